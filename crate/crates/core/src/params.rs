//! Named parameter tensors and the small layer helpers built on them.

use std::collections::BTreeMap;

use crate::tensor::{Real, Result as TensorResult, Rng, Tape, Tensor, TensorError, Var};

/// Deterministically ordered map from parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(!self.map.contains_key(&name), "duplicate parameter {name}");
        self.map.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Put every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(k, v)| {
                let var = if trainable { tape.param(v.clone()) } else { tape.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    pub fn he_normal(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut Rng) {
        let std = (2.0 / fan_in as f64).sqrt() as Real;
        self.insert(name, Tensor::randn(shape, rng).scale(std));
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    /// Conv weight `[out, in, k..]` (He init) and bias `[out]` (zero).
    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, kernel: &[usize], rng: &mut Rng) {
        let mut shape = vec![c_out, c_in];
        shape.extend_from_slice(kernel);
        let fan_in = c_in * kernel.iter().product::<usize>();
        self.he_normal(format!("{name}.w"), &shape, fan_in, rng);
        self.zeros(format!("{name}.b"), &[c_out]);
    }

    /// Conv with all-zero weight and bias.
    pub fn conv_zero(&mut self, name: &str, c_in: usize, c_out: usize, kernel: &[usize]) {
        let mut shape = vec![c_out, c_in];
        shape.extend_from_slice(kernel);
        self.zeros(format!("{name}.w"), &shape);
        self.zeros(format!("{name}.b"), &[c_out]);
    }

    /// Dense layer `[in, out]` weight (He init) with `[1, out]` bias.
    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) {
        self.he_normal(format!("{name}.w"), &[d_in, d_out], d_in, rng);
        self.zeros(format!("{name}.b"), &[1, d_out]);
    }

    pub fn group_norm(&mut self, name: &str, channels: usize) {
        self.insert(format!("{name}.gamma"), Tensor::ones(&[channels]));
        self.zeros(format!("{name}.beta"), &[channels]);
    }
}

/// Parameters placed on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Bind names to variables that already live on a tape.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> TensorResult<Var> {
        self.vars.get(name).copied().ok_or_else(|| TensorError::InvalidShape {
            op: "parameter lookup",
            shape: vec![],
            reason: format!("missing parameter {name}"),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

pub const NORM_EPS: Real = 1e-5;

pub fn conv(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> TensorResult<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    tape.conv(x, w, Some(b))
}

/// `x[1, in] · W + b`.
pub fn linear(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> TensorResult<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

pub fn group_norm(tape: &mut Tape, p: &Bound, name: &str, x: Var, groups: usize) -> TensorResult<Var> {
    let g = p.get(&format!("{name}.gamma"))?;
    let b = p.get(&format!("{name}.beta"))?;
    tape.group_norm(x, groups, g, b, NORM_EPS)
}

/// Group norm followed by SiLU.
pub fn norm_act(tape: &mut Tape, p: &Bound, name: &str, x: Var, groups: usize) -> TensorResult<Var> {
    let h = group_norm(tape, p, name, x, groups)?;
    tape.silu(h)
}
