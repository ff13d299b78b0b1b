//! Finite-difference verification of analytic gradients, run in f64.
//!
//! The op's output is reduced to a scalar by a fixed random projection
//! `L = Σ y·r`; the analytic backward with gradient `r` must then match
//! central differences on every input element and every parameter.
//!
//! The op must be differentiable at the sampled point. For chains containing
//! ReLU that means no pre-activation may sit within the perturbation's reach
//! of zero, or the two-sided evaluations straddle the kink; use a step small
//! enough (1e-4 and below works for the residual block) or pick inputs away
//! from the kink as the ReLU tests do.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{softmax_cross_entropy, DiffOp, Mode, Tensor, TensorShape};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Tensor and element index of the worst disagreement.
    pub worst: String,
}

fn random_tensor(shape: TensorShape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).expect("shape/data agree")
}

fn eval_loss(op: &mut dyn DiffOp<f64>, x: &Tensor<f64>, r: &[f64]) -> Result<f64> {
    let y = op.forward(x, Mode::Train)?;
    Ok(y.data.iter().zip(r).map(|(&a, &b)| a * b).sum())
}

/// Check `op` on a random input of the given shape.
pub fn grad_check(
    op: &mut dyn DiffOp<f64>,
    shape: TensorShape,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(shape, &mut rng);
    grad_check_with_input(op, &x, h, seed ^ 0x9e3779b97f4a7c15)
}

/// Check `op` on a caller-supplied input (used to keep ReLU inputs away from
/// the kink).
pub fn grad_check_with_input(
    op: &mut dyn DiffOp<f64>,
    x: &Tensor<f64>,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y0 = op.forward(x, Mode::Train)?;
    let r: Vec<f64> = (0..y0.shape.len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let r_tensor = Tensor::from_vec(y0.shape, r.clone())?;

    // Analytic gradients.
    for (_, p) in op.params() {
        p.zero_grad();
    }
    op.forward(x, Mode::Train)?;
    let gx = op.backward(&r_tensor)?;
    let param_grads: Vec<(String, Vec<f64>)> = op
        .params()
        .into_iter()
        .map(|(name, p)| (name, p.grad_slice().to_vec()))
        .collect();

    let gmax = gx
        .data
        .iter()
        .chain(param_grads.iter().flat_map(|(_, g)| g.iter()))
        .fold(0.0f64, |a, &b| a.max(b.abs()));
    let floor = 1e-6 + 1e-3 * gmax;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let mut record = |analytic: f64, numeric: f64, what: String, report: &mut GradCheckReport| {
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let rel = (analytic - numeric).abs() / denom;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = what;
        }
    };

    // Input elements.
    let mut xp = x.clone();
    for i in 0..xp.data.len() {
        let orig = xp.data[i];
        xp.data[i] = orig + h;
        let lp = eval_loss(op, &xp, &r)?;
        xp.data[i] = orig - h;
        let lm = eval_loss(op, &xp, &r)?;
        xp.data[i] = orig;
        record(gx.data[i], (lp - lm) / (2.0 * h), format!("input[{i}]"), &mut report);
    }

    // Parameter elements.
    for (pi, (name, analytic)) in param_grads.iter().enumerate() {
        for i in 0..analytic.len() {
            let orig = {
                let mut ps = op.params();
                let v = ps[pi].1.data[i];
                ps[pi].1.data[i] = v + h;
                v
            };
            let lp = eval_loss(op, x, &r)?;
            {
                let mut ps = op.params();
                ps[pi].1.data[i] = orig - h;
            }
            let lm = eval_loss(op, x, &r)?;
            {
                let mut ps = op.params();
                ps[pi].1.data[i] = orig;
            }
            record(
                analytic[i],
                (lp - lm) / (2.0 * h),
                format!("{name}[{i}]"),
                &mut report,
            );
        }
    }

    Ok(report)
}

/// Finite-difference check of the loss gradient itself.
pub fn grad_check_loss(
    logits: &Tensor<f64>,
    labels: &[u8],
    h: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = softmax_cross_entropy(logits, labels)?;
    let gmax = analytic.data.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let floor = 1e-6 + 1e-3 * gmax;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let mut lp_logits = logits.clone();
    for i in 0..logits.data.len() {
        let orig = lp_logits.data[i];
        lp_logits.data[i] = orig + h;
        let (lp, _) = softmax_cross_entropy(&lp_logits, labels)?;
        lp_logits.data[i] = orig - h;
        let (lm, _) = softmax_cross_entropy(&lp_logits, labels)?;
        lp_logits.data[i] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        let denom = analytic.data[i].abs().max(numeric.abs()).max(floor);
        let rel = (analytic.data[i] - numeric).abs() / denom;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = format!("logits[{i}]");
        }
    }
    Ok(report)
}
