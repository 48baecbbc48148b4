use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{Real, Result, SamplePlan, Tensor, TensorError};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    id: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.id as usize
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    Scale(usize, Real),
    Silu(usize),
    AddChannel {
        x: usize,
        bias: usize,
    },
    Matmul(usize, usize),
    Bmm {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        mean: Vec<Real>,
        rstd: Vec<Real>,
    },
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    GridSample {
        x: usize,
        plan: Arc<SamplePlan>,
    },
    Reshape(usize),
    Transpose(usize),
    Concat {
        inputs: Vec<usize>,
        outer: usize,
    },
    AvgPool2(usize),
    Upsample2(usize),
    Sum(usize),
    Mse(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Define-by-run record of differentiable operations.
///
/// Nodes are appended in evaluation order, so recording order is a valid
/// topological order and [`backward`](Tape::backward) walks it in reverse.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn bad_shape(op: &'static str, shape: &[usize], reason: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        shape: shape.to_vec(),
        reason: reason.into(),
    }
}

fn sigmoid(x: Real) -> Real {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradient-tracked leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.index()].tracked
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node { value, op, tracked });
        Var { tape: self.id, id }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let tracked = parents.iter().any(|&p| self.nodes[p].tracked);
        Ok(self.push_unchecked(value, op, tracked))
    }

    fn get(&self, v: Var) -> Result<(usize, &Tensor)> {
        if v.tape != self.id {
            return Err(TensorError::ForeignVar);
        }
        Ok((v.index(), &self.nodes[v.index()].value))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(Real, Real) -> Real,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ta) = self.get(a)?;
        let (ib, tb) = self.get(b)?;
        let value = if ta.shape() == tb.shape() {
            ta.zip_map(tb, &f)?
        } else if tb.is_scalar() {
            let s = tb.item();
            ta.map(|v| f(v, s))
        } else if ta.is_scalar() {
            let s = ta.item();
            tb.map(|v| f(s, v))
        } else {
            return Err(mismatch(name, ta, tb));
        };
        self.push(name, value, op(ia, ib), &[ia, ib])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn add_scalar(&mut self, a: Var, c: Real) -> Result<Var> {
        let (ia, ta) = self.get(a)?;
        let value = ta.map(|v| v + c);
        self.push("add_scalar", value, Op::AddScalar(ia), &[ia])
    }

    pub fn scale(&mut self, a: Var, s: Real) -> Result<Var> {
        let (ia, ta) = self.get(a)?;
        let value = ta.scale(s);
        self.push("scale", value, Op::Scale(ia, s), &[ia])
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let (ia, ta) = self.get(a)?;
        let value = ta.map(|v| v * sigmoid(v));
        self.push("silu", value, Op::Silu(ia), &[ia])
    }

    /// Add a per-channel vector `bias[C]` to `x[C, ...]`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, tx) = self.get(x)?;
        let (ib, tb) = self.get(bias)?;
        let c = tx.shape()[0];
        if tb.len() != c {
            return Err(mismatch("add_channel", tx, tb));
        }
        let s = tx.len() / c;
        let mut value = tx.clone();
        for (row, &b) in value.data_mut().chunks_exact_mut(s).zip(tb.data()) {
            row.iter_mut().for_each(|v| *v += b);
        }
        self.push("add_channel", value, Op::AddChannel { x: ix, bias: ib }, &[ix, ib])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ta) = self.get(a)?;
        let (ib, tb) = self.get(b)?;
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        let value = Tensor::new(&[m, n], out)?;
        self.push("matmul", value, Op::Matmul(ia, ib), &[ia, ib])
    }

    /// Batched product `[B, m, k] · [B, k, n]`, or `[B, m, k] · [B, n, k]ᵀ`
    /// when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ia, ta) = self.get(a)?;
        let (ib, tb) = self.get(b)?;
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch("bmm", ta, tb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(mismatch("bmm", ta, tb));
        }
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let a_blk = &ta.data()[bi * m * k..(bi + 1) * m * k];
            let b_blk = &tb.data()[bi * k * n..(bi + 1) * k * n];
            let o_blk = &mut out[bi * m * n..(bi + 1) * m * n];
            small_matmul(m, k, n, a_blk, false, b_blk, trans_b, o_blk);
        }
        let value = Tensor::new(&[batch, m, n], out)?;
        self.push("bmm", value, Op::Bmm { a: ia, b: ib, trans_b }, &[ia, ib])
    }

    /// Stride-1, zero-padded "same" convolution. `x` is `[C_in, H, W]` with
    /// weight `[C_out, C_in, k, k]`, or `[C_in, D, H, W]` with weight
    /// `[C_out, C_in, k, k, k]`. Kernel extents must be odd.
    pub fn conv(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (ix, tx) = self.get(x)?;
        let (iw, tw) = self.get(w)?;
        let (xs, ws) = (tx.shape(), tw.shape());
        let dims = xs.len() - 1;
        if !(dims == 2 || dims == 3) || ws.len() != dims + 2 {
            return Err(mismatch("conv", tx, tw));
        }
        if ws[1] != xs[0] {
            return Err(bad_shape("conv", ws, format!("expects {} input channels, got {}", ws[1], xs[0])));
        }
        if ws[2..].iter().any(|k| k % 2 == 0) {
            return Err(bad_shape("conv", ws, "kernel extents must be odd"));
        }
        let mut spatial = [1; 3];
        let mut kernel = [1; 3];
        spatial[3 - dims..].copy_from_slice(&xs[1..]);
        kernel[3 - dims..].copy_from_slice(&ws[2..]);
        let geom = ConvGeom {
            c_in: xs[0],
            c_out: ws[0],
            spatial,
            kernel,
        };
        let mut parents = vec![ix, iw];
        let bias_data = match bias {
            Some(b) => {
                let (ib, tb) = self.get(b)?;
                if tb.len() != geom.c_out {
                    return Err(mismatch("conv bias", tw, tb));
                }
                parents.push(ib);
                Some((ib, tb.data()))
            }
            None => None,
        };
        let out = kernels::conv_forward(tx.data(), tw.data(), bias_data.map(|b| b.1), &geom);
        let mut shape = vec![geom.c_out];
        shape.extend_from_slice(&xs[1..]);
        let value = Tensor::new(&shape, out)?;
        let op = Op::Conv {
            x: ix,
            w: iw,
            b: bias_data.map(|b| b.0),
            geom,
        };
        self.push("conv", value, op, &parents)
    }

    /// Group normalization of `x[C, ...]` followed by a per-channel affine map.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: Real) -> Result<Var> {
        let (ix, tx) = self.get(x)?;
        let (ig, tg) = self.get(gamma)?;
        let (ib, tb) = self.get(beta)?;
        let c = tx.shape()[0];
        if groups == 0 || c % groups != 0 {
            return Err(bad_shape("group_norm", tx.shape(), format!("{c} channels not divisible into {groups} groups")));
        }
        if tg.len() != c || tb.len() != c {
            return Err(mismatch("group_norm affine", tx, tg));
        }
        let s = tx.len() / c;
        let per_group = c / groups;
        let (mean, rstd) = kernels::group_stats(tx.data(), groups, eps);
        let mut value = tx.clone();
        for (ch, row) in value.data_mut().chunks_exact_mut(s).enumerate() {
            let g = ch / per_group;
            let (m, r, ga, be) = (mean[g], rstd[g], tg.data()[ch], tb.data()[ch]);
            row.iter_mut().for_each(|v| *v = (*v - m) * r * ga + be);
        }
        let op = Op::GroupNorm {
            x: ix,
            gamma: ig,
            beta: ib,
            groups,
            mean,
            rstd,
        };
        self.push("group_norm", value, op, &[ix, ig, ib])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (ix, tx) = self.get(x)?;
        let shape = tx.shape();
        if axis >= shape.len() {
            return Err(bad_shape("softmax", shape, format!("axis {axis} out of range")));
        }
        let outer = shape[..axis].iter().product();
        let len = shape[axis];
        let inner = shape[axis + 1..].iter().product();
        let mut value = tx.clone();
        kernels::softmax_in_place(value.data_mut(), outer, len, inner);
        self.push("softmax", value, Op::Softmax { x: ix, outer, len, inner }, &[ix])
    }

    /// Interpolate `x[C, spatial..]` at the plan's points, producing `[P, C]`.
    /// Sample locations are constants: gradients flow to `x` only.
    pub fn grid_sample(&mut self, x: Var, plan: &Arc<SamplePlan>) -> Result<Var> {
        let (ix, tx) = self.get(x)?;
        if tx.shape()[1..] != *plan.spatial() {
            return Err(bad_shape(
                "grid_sample",
                tx.shape(),
                format!("plan expects spatial extent {:?}", plan.spatial()),
            ));
        }
        let c = tx.shape()[0];
        let value = Tensor::new(&[plan.points(), c], plan.gather(tx.data(), c))?;
        self.push("grid_sample", value, Op::GridSample { x: ix, plan: plan.clone() }, &[ix])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let (ix, tx) = self.get(x)?;
        let value = tx.clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(ix), &[ix])
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (ix, tx) = self.get(x)?;
        let s = tx.shape();
        if s.len() != 2 {
            return Err(bad_shape("transpose", s, "expects a matrix"));
        }
        let (m, n) = (s[0], s[1]);
        let value = Tensor::new(&[n, m], transpose_buf(tx.data(), m, n))?;
        self.push("transpose", value, Op::Transpose(ix), &[ix])
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| bad_shape("concat", &[], "nothing to concatenate"))?;
        let (_, t0) = self.get(*first)?;
        let base = t0.shape().to_vec();
        if axis >= base.len() {
            return Err(bad_shape("concat", &base, format!("axis {axis} out of range")));
        }
        let outer: usize = base[..axis].iter().product();
        let mut ids = Vec::with_capacity(parts.len());
        let mut axis_total = 0;
        for &p in parts {
            let (ip, tp) = self.get(p)?;
            let s = tp.shape();
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(mismatch("concat", t0, tp));
            }
            axis_total += s[axis];
            ids.push(ip);
        }
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &ip in &ids {
                let t = &self.nodes[ip].value;
                let chunk = t.len() / outer;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(&shape, data)?;
        let op = Op::Concat {
            inputs: ids.clone(),
            outer,
        };
        self.push("concat", value, op, &ids)
    }

    /// 2×2 average pooling of `[C, H, W]` with even `H`, `W`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (ix, tx) = self.get(x)?;
        let s = tx.shape();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(bad_shape("avg_pool2", s, "expects [C, H, W] with even H and W"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let src = tx.data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    let at = |yy: usize, xx: usize| src[(ch * h + yy) * w + xx];
                    out[(ch * ho + y) * wo + x] =
                        0.25 * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1));
                }
            }
        }
        let value = Tensor::new(&[c, ho, wo], out)?;
        self.push("avg_pool2", value, Op::AvgPool2(ix), &[ix])
    }

    /// Nearest-neighbour 2× upsampling of `[C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (ix, tx) = self.get(x)?;
        let s = tx.shape();
        if s.len() != 3 {
            return Err(bad_shape("upsample2", s, "expects [C, H, W]"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = tx.data();
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + x] = src[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        let value = Tensor::new(&[c, 2 * h, 2 * w], out)?;
        self.push("upsample2", value, Op::Upsample2(ix), &[ix])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let (ix, tx) = self.get(x)?;
        let value = Tensor::scalar(tx.sum());
        self.push("sum", value, Op::Sum(ix), &[ix])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as Real;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean squared difference, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ta) = self.get(a)?;
        let (ib, tb) = self.get(b)?;
        if ta.shape() != tb.shape() {
            return Err(mismatch("mse", ta, tb));
        }
        let n = ta.len() as Real;
        let total: Real = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push("mse", Tensor::scalar(total / n), Op::Mse(ia, ib), &[ia, ib])
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape and returns the
    /// accumulated gradient of every tracked leaf.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let (il, tl) = self.get(loss)?;
        if !tl.is_scalar() {
            return Err(TensorError::NonScalarLoss(tl.shape().to_vec()));
        }
        if !self.nodes[il].tracked {
            return Err(TensorError::DetachedLoss);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[il] = Some(Tensor::full(tl.shape(), 1.0));
        for i in (0..=il).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: usize, g: Vec<Real>) {
        if !self.nodes[id].tracked {
            return;
        }
        match &mut grads[id] {
            Some(existing) => existing.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => {
                *slot = Some(Tensor::new(self.nodes[id].value.shape(), g).expect("gradient shape"));
            }
        }
    }

    /// Gradient for an operand of an elementwise op that may have been broadcast from a scalar.
    fn reduce_to(&self, id: usize, g: Vec<Real>) -> Vec<Real> {
        if self.nodes[id].value.len() == g.len() {
            g
        } else {
            vec![g.iter().sum()]
        }
    }

    fn elementwise_operand(&self, id: usize, index: usize) -> Real {
        let v = self.nodes[id].value.data();
        if v.len() == 1 {
            v[0]
        } else {
            v[index]
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let ga = self.reduce_to(*a, gd.to_vec());
                let gb = self.reduce_to(*b, gd.to_vec());
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Sub(a, b) => {
                let ga = self.reduce_to(*a, gd.to_vec());
                let gb = self.reduce_to(*b, gd.iter().map(|v| -v).collect());
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                if self.nodes[*a].tracked {
                    let ga = gd.iter().enumerate().map(|(k, &v)| v * self.elementwise_operand(*b, k)).collect();
                    let ga = self.reduce_to(*a, ga);
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[*b].tracked {
                    let gb = gd.iter().enumerate().map(|(k, &v)| v * self.elementwise_operand(*a, k)).collect();
                    let gb = self.reduce_to(*b, gb);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, gd.to_vec()),
            Op::Scale(a, s) => self.accumulate(grads, *a, gd.iter().map(|v| v * s).collect()),
            Op::Silu(a) => {
                let x = self.nodes[*a].value.data();
                let ga = gd
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::AddChannel { x, bias } => {
                self.accumulate(grads, *x, gd.to_vec());
                if self.nodes[*bias].tracked {
                    let c = self.nodes[*bias].value.len();
                    let s = gd.len() / c;
                    let gb = gd.chunks_exact(s).map(|r| r.iter().sum()).collect();
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[*a].tracked {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, gd, false, tb.data(), true, 0.0, &mut ga);
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[*b].tracked {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, ta.data(), true, gd, false, 0.0, &mut gb);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = out.shape()[2];
                if self.nodes[*a].tracked {
                    let mut ga = vec![0.0; batch * m * k];
                    for bi in 0..batch {
                        let g_blk = &gd[bi * m * n..(bi + 1) * m * n];
                        let b_blk = &tb.data()[bi * k * n..(bi + 1) * k * n];
                        // dA = G · op(B)ᵀ
                        small_matmul(m, n, k, g_blk, false, b_blk, !trans_b, &mut ga[bi * m * k..(bi + 1) * m * k]);
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[*b].tracked {
                    let mut gb = vec![0.0; batch * k * n];
                    for bi in 0..batch {
                        let g_blk = &gd[bi * m * n..(bi + 1) * m * n];
                        let a_blk = &ta.data()[bi * m * k..(bi + 1) * m * k];
                        let dst = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            // B is [n, k]: dB = Gᵀ · A
                            small_matmul_at(n, m, k, g_blk, a_blk, dst);
                        } else {
                            // dB = Aᵀ · G
                            small_matmul_at(k, m, n, a_blk, g_blk, dst);
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Conv { x, w, b, geom } => {
                let need = (
                    self.nodes[*x].tracked,
                    self.nodes[*w].tracked,
                    b.is_some_and(|b| self.nodes[b].tracked),
                );
                let cg = kernels::conv_backward(self.nodes[*x].value.data(), self.nodes[*w].value.data(), gd, geom, need);
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let tx = &self.nodes[*x].value;
                let tg = self.nodes[*gamma].value.data();
                let c = tx.shape()[0];
                let s = tx.len() / c;
                let per_group = c / groups;
                let xd = tx.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; tx.len()];
                let n = (per_group * s) as Real;
                for grp in 0..*groups {
                    let (m, r) = (mean[grp], rstd[grp]);
                    let range = grp * per_group * s..(grp + 1) * per_group * s;
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for k in range.clone() {
                        let ch = k / s;
                        let xhat = (xd[k] - m) * r;
                        dgamma[ch] += gd[k] * xhat;
                        dbeta[ch] += gd[k];
                        let dxhat = gd[k] * tg[ch];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let (mean_d, mean_dx) = (sum_dxhat / n, sum_dxhat_xhat / n);
                    for k in range {
                        let ch = k / s;
                        let xhat = (xd[k] - m) * r;
                        dx[k] = r * (gd[k] * tg[ch] - mean_d - xhat * mean_dx);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |d: usize| (o * len + d) * inner + i;
                        let dot: Real = (0..*len).map(|d| gd[at(d)] * y[at(d)]).sum();
                        for d in 0..*len {
                            dx[at(d)] = y[at(d)] * (gd[at(d)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GridSample { x, plan } => {
                let tx = &self.nodes[*x].value;
                let c = tx.shape()[0];
                let mut dx = vec![0.0; tx.len()];
                plan.scatter_add(gd, c, &mut dx);
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, gd.to_vec()),
            Op::Transpose(x) => {
                let s = out.shape();
                self.accumulate(grads, *x, transpose_buf(gd, s[0], s[1]));
            }
            Op::Concat { inputs, outer } => {
                let mut offset = 0;
                let total = gd.len() / outer;
                for &ip in inputs {
                    let chunk = self.nodes[ip].value.len() / outer;
                    if self.nodes[ip].tracked {
                        let mut gi = Vec::with_capacity(chunk * outer);
                        for o in 0..*outer {
                            gi.extend_from_slice(&gd[o * total + offset..o * total + offset + chunk]);
                        }
                        self.accumulate(grads, ip, gi);
                    }
                    offset += chunk;
                }
            }
            Op::AvgPool2(x) => {
                let s = self.nodes[*x].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[(ch * h + y) * w + xx] = 0.25 * gd[(ch * ho + y / 2) * wo + xx / 2];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2(x) => {
                let s = self.nodes[*x].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[(ch * h + y / 2) * w + xx / 2] += gd[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.nodes[*x].value.len();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                let k = 2.0 * gd[0] / ta.len() as Real;
                if self.nodes[*a].tracked {
                    self.accumulate(grads, *a, ta.iter().zip(tb).map(|(x, y)| k * (x - y)).collect());
                }
                if self.nodes[*b].tracked {
                    self.accumulate(grads, *b, ta.iter().zip(tb).map(|(x, y)| k * (y - x)).collect());
                }
            }
        }
    }
}

fn transpose_buf(src: &[Real], m: usize, n: usize) -> Vec<Real> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    out
}

/// `out = a[m,k] · op(b)` with `b` stored `[k,n]`, or `[n,k]` when `b_trans`.
#[allow(clippy::too_many_arguments)]
fn small_matmul(m: usize, k: usize, n: usize, a: &[Real], a_trans: bool, b: &[Real], b_trans: bool, out: &mut [Real]) {
    debug_assert!(!a_trans);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                let bv = if b_trans { b[j * k + p] } else { b[p * n + j] };
                acc += a[i * k + p] * bv;
            }
            out[i * n + j] = acc;
        }
    }
}

/// `out[r, c] = Σ_p a[p, r] · b[p, c]` with `a` stored `[inner, rows]`, `b` stored `[inner, cols]`.
fn small_matmul_at(rows: usize, inner: usize, cols: usize, a: &[Real], b: &[Real], out: &mut [Real]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for p in 0..inner {
        for r in 0..rows {
            let av = a[p * rows + r];
            for c in 0..cols {
                out[r * cols + c] += av * b[p * cols + c];
            }
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a tracked leaf; `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        assert_eq!(v.tape, self.tape, "variable from another tape");
        self.grads[v.index()].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        assert_eq!(v.tape, self.tape, "variable from another tape");
        self.grads[v.index()].take()
    }
}
