//! Finite-difference verification of the full backward path (network plus
//! composite loss) in `f64`.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{build_pairs, composite_loss, DEFAULT_MARGIN};
use crate::model::{backward, forward, ModelParams, INPUT_CHANNELS};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub max_attempts: u32,
    pub margin: f64,
    pub batch: usize,
    pub size: usize,
    pub precision: Precision,
    /// Applied to the analytic gradients before comparison; used to check
    /// that the harness catches a broken backward pass.
    pub corrupt: Option<fn(&mut ModelParams<f64>)>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-4,
            tolerance: 1e-5,
            max_attempts: 10,
            margin: DEFAULT_MARGIN,
            batch: 2,
            size: 8,
            precision: Precision::F64,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorError {
    pub name: &'static str,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub attempts: u32,
    pub params_checked: usize,
    pub max_rel_error: f64,
    pub worst_tensor: &'static str,
    pub worst_index: usize,
    pub per_tensor: Vec<TensorError>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn failing_tensors(&self) -> Vec<&'static str> {
        self.per_tensor
            .iter()
            .filter(|t| !(t.max_rel_error < self.tolerance))
            .map(|t| t.name)
            .collect()
    }
}

struct Problem {
    params: ModelParams<f64>,
    inputs: Vec<f64>,
    targets: Vec<f64>,
}

fn draw_problem(seed: u64, attempt: u32, opts: &GradcheckOptions) -> Problem {
    let mut rng = rng::stream(seed, &format!("gradcheck/attempt-{attempt}"));
    let mut params = ModelParams::<f64>::init(rng.gen());
    // Non-zero biases so their gradients are exercised away from the origin.
    for t in params.tensors_mut().iter_mut().filter(|t| t.is_vector()) {
        for v in &mut t.data {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
    let n = opts.batch * INPUT_CHANNELS * opts.size * opts.size;
    let inputs = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let targets = (0..opts.batch).map(|_| rng.gen_range(4.0..7.0)).collect();
    Problem {
        params,
        inputs,
        targets,
    }
}

/// Loss plus every piecewise-linear branch taken: ReLU signs, pool winners
/// and active hinges. Finite differences are only trusted when all of these
/// agree at θ, θ+h and θ−h.
type Branches = ((Vec<bool>, Vec<u32>), Vec<bool>);

fn evaluate(
    p: &ModelParams<f64>,
    prob: &Problem,
    opts: &GradcheckOptions,
) -> Result<(f64, Branches)> {
    let (preds, trace) = forward(p, &prob.inputs, opts.batch, opts.size, opts.size)?;
    let loss = composite_loss(&preds, &prob.targets, opts.margin, true)?;
    let pairs = build_pairs(&preds, &prob.targets, opts.margin)?;
    let hinges = (0..pairs.len())
        .map(|k| -(pairs.y[k] as f64) * (pairs.x1[k] - pairs.x2[k]) + pairs.margin > 0.0)
        .collect();
    Ok((loss.total, (trace.pattern(), hinges)))
}

fn hinge_gap(p: &ModelParams<f64>, prob: &Problem, opts: &GradcheckOptions) -> Result<f64> {
    let (preds, _) = forward(p, &prob.inputs, opts.batch, opts.size, opts.size)?;
    let pairs = build_pairs(&preds, &prob.targets, opts.margin)?;
    Ok((0..pairs.len())
        .map(|k| (-(pairs.y[k] as f64) * (pairs.x1[k] - pairs.x2[k]) + pairs.margin).abs())
        .fold(f64::INFINITY, f64::min))
}

enum Attempt {
    Kink,
    Done(GradcheckReport),
}

fn attempt(seed: u64, index: u32, opts: &GradcheckOptions) -> Result<Attempt> {
    let prob = draw_problem(seed, index, opts);
    if hinge_gap(&prob.params, &prob, opts)? <= 1e-6 {
        return Ok(Attempt::Kink);
    }
    let (preds, trace) = forward(&prob.params, &prob.inputs, opts.batch, opts.size, opts.size)?;
    let loss = composite_loss(&preds, &prob.targets, opts.margin, true)?;
    let mut analytic = backward(&prob.params, &trace, &loss.grad_wrt_predictions)?;
    if let Some(corrupt) = opts.corrupt {
        corrupt(&mut analytic);
    }
    let (_, base) = evaluate(&prob.params, &prob, opts)?;

    let mut probe = prob.params.clone();
    let mut per_tensor = Vec::new();
    let mut worst = (0.0f64, "", 0usize);
    let mut checked = 0;
    for t in 0..probe.tensors().len() {
        let name = probe.tensors()[t].name;
        let mut tensor_max = 0.0f64;
        for i in 0..probe.tensors()[t].data.len() {
            let orig = probe.tensors()[t].data[i];
            probe.tensors_mut()[t].data[i] = orig + opts.step;
            let (up, up_branches) = evaluate(&probe, &prob, opts)?;
            probe.tensors_mut()[t].data[i] = orig - opts.step;
            let (dn, dn_branches) = evaluate(&probe, &prob, opts)?;
            probe.tensors_mut()[t].data[i] = orig;
            if up_branches != base || dn_branches != base {
                return Ok(Attempt::Kink);
            }
            let numeric = (up - dn) / (2.0 * opts.step);
            let a = analytic.tensors()[t].data[i];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            tensor_max = tensor_max.max(err);
            if err > worst.0 || worst.1.is_empty() {
                worst = (err, name, i);
            }
            checked += 1;
        }
        per_tensor.push(TensorError {
            name,
            max_rel_error: tensor_max,
        });
    }
    Ok(Attempt::Done(GradcheckReport {
        seed,
        attempts: index + 1,
        params_checked: checked,
        max_rel_error: worst.0,
        worst_tensor: worst.1,
        worst_index: worst.2,
        per_tensor,
        tolerance: opts.tolerance,
        passed: worst.0 < opts.tolerance,
    }))
}

/// Compares analytic and central-difference gradients of the composite loss
/// for every parameter on a random two-sample 8×8 batch. Draws that put any
/// hinge, ReLU or pooling boundary within reach of the perturbation are
/// re-drawn.
pub fn gradcheck_with(seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if opts.precision != Precision::F64 {
        return Err(Error::Config(
            "gradcheck only runs in float64; float32 lacks the precision for central differences"
                .into(),
        ));
    }
    for index in 0..opts.max_attempts {
        match attempt(seed, index, opts)? {
            Attempt::Done(report) => return Ok(report),
            Attempt::Kink => log::debug!("gradcheck draw {index} hit a kink, re-drawing"),
        }
    }
    Err(Error::Degenerate(format!(
        "gradcheck hit a non-differentiable point on all {} draws",
        opts.max_attempts
    )))
}

pub fn gradcheck(seed: u64) -> Result<GradcheckReport> {
    gradcheck_with(seed, &GradcheckOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float32_is_refused() {
        let opts = GradcheckOptions {
            precision: Precision::F32,
            ..Default::default()
        };
        assert!(matches!(
            gradcheck_with(0, &opts).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn seed_zero_passes() {
        let r = gradcheck(0).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.params_checked, crate::model::PARAM_COUNT);
    }

    #[test]
    fn sign_flip_is_caught() {
        let opts = GradcheckOptions {
            corrupt: Some(|g| {
                for v in &mut g.get_mut("conv1.b").unwrap().data {
                    *v = -*v;
                }
            }),
            ..Default::default()
        };
        let r = gradcheck_with(0, &opts).unwrap();
        assert!(!r.passed);
        assert_eq!(r.failing_tensors(), vec!["conv1.b"]);
        assert_eq!(r.worst_tensor, "conv1.b");
    }
}
