//! Central finite-difference gradient checking.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::numerics::{Graph, Tensor, Var};
use crate::rng;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Factor applied to every checked loss. Central-difference round-off is about
/// `1e-11·|loss|`; scaling keeps it below the `1e-8` denominator floor so that
/// exactly-zero analytic gradients are not reported as failures.
pub const LOSS_SCALE: f64 = 1e-3;

/// Standard-normal tensor from a seed.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = r.sample::<f64, _>(StandardNormal);
    }
    t
}

fn eval(inputs: &[Tensor], build: &impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let out = g.scale(out, LOSS_SCALE);
    Ok(g.value(out).data()[0])
}

/// Worst entry found by [`check_gradients`].
#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub input: usize,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Max over all input entries of `|analytic − fd| / max(1e-8, |analytic|)`.
pub fn max_relative_error(
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<f64> {
    Ok(check_gradients(inputs, build)?.max_rel_err)
}

/// Compares tape gradients against central differences for every input entry.
///
/// `build` maps the inputs (as leaves) to a scalar loss. Discrete choices made
/// inside `build` (TopK sets, head selection) must not flip within `FD_STEP`.
pub fn check_gradients(
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let loss = g.scale(loss, LOSS_SCALE);
    let grads = g.backward(loss)?;
    let mut worst = GradCheck::default();
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, inputs[k].shape());
        for idx in 0..inputs[k].numel() {
            let orig = inputs[k].data()[idx];
            probe[k].data_mut()[idx] = orig + FD_STEP;
            let up = eval(&probe, &build)?;
            probe[k].data_mut()[idx] = orig - FD_STEP;
            let down = eval(&probe, &build)?;
            probe[k].data_mut()[idx] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[idx];
            let rel = (a - fd).abs() / a.abs().max(1e-8);
            if rel > worst.max_rel_err {
                worst = GradCheck {
                    max_rel_err: rel,
                    input: k,
                    entry: idx,
                    analytic: a,
                    numeric: fd,
                };
            }
        }
    }
    Ok(worst)
}
