//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates forward values, so it is independent
//! of every backward rule it checks.

use super::{Real, Result, Rng, Tape, Tensor, Var};

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative error with a small absolute floor so that vanishing gradients do
/// not divide by zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Check `f` (which must return a scalar) with respect to every tensor in
/// `inputs`. At most `max_per_input` entries per input are probed, chosen
/// deterministically from `seed`.
pub fn gradcheck<F>(inputs: &[Tensor], h: f64, max_per_input: usize, seed: u64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item() as f64)
    };

    let mut rng = Rng::new(seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
    };
    for (k, input) in inputs.iter().enumerate() {
        let mut indices: Vec<usize> = (0..input.len()).collect();
        if indices.len() > max_per_input {
            rng.shuffle(&mut indices);
            indices.truncate(max_per_input);
        }
        for &i in &indices {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h as Real;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h as Real;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = rel_err(analytic[k].data()[i] as f64, numeric);
            report.max_rel_err = report.max_rel_err.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// `Σ out ⊙ R` for a fixed pseudo-random `R`; turns any tensor into a scalar
/// loss whose gradient is not uniform.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::new(seed);
    let weights = Tensor::randn(tape.shape(out), &mut rng);
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}
