//! Task losses and their gradients with respect to the head outputs.

use serde::{Deserialize, Serialize};

use crate::dataset::ExampleSet;
use crate::error::{Error, Result};
use crate::model::{ModelOutput, OutputGrad};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NmseMode {
    /// Denominator `N · var_train` from the training split.
    #[default]
    Global,
    /// Denominator `Σ (t − mean_batch)²` over the batch itself.
    PerBatch,
}

/// Reference statistics of the (standardized) regression targets on the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    pub p_mean: f64,
    pub p_var: f64,
    pub logr_mean: f64,
    pub logr_var: f64,
}

fn mean_var(v: &[f32]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

impl TargetStats {
    pub fn from_train(train: &ExampleSet) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Domain("empty training split".into()));
        }
        let (p_mean, p_var) = mean_var(&train.target_p);
        let (logr_mean, logr_var) = mean_var(&train.target_logr);
        if !(p_var > 0.0 && logr_var > 0.0) {
            return Err(Error::Domain(format!(
                "training targets have zero variance (p: {p_var}, log R: {logr_var})"
            )));
        }
        Ok(TargetStats {
            p_mean,
            p_var,
            logr_mean,
            logr_var,
        })
    }
}

/// Where the NMSE denominator comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Denominator {
    /// Training-split variance of the target.
    Global { var: f64 },
    PerBatch,
}

fn nmse_denominator(target: &[f64], denom: Denominator) -> Result<f64> {
    let n = target.len() as f64;
    let d = match denom {
        Denominator::Global { var } => n * var,
        Denominator::PerBatch => {
            let mean = target.iter().sum::<f64>() / n;
            target.iter().map(|t| (t - mean).powi(2)).sum()
        }
    };
    if !(d > 0.0) {
        return Err(Error::Domain(format!("NMSE denominator is {d}; targets are constant")));
    }
    Ok(d)
}

/// `Σ (t − ŷ)² / D` with `D` from [`Denominator`].
pub fn nmse(pred: &[f64], target: &[f64], denom: Denominator) -> Result<f64> {
    Ok(nmse_with_grad(pred, target, denom)?.0)
}

pub fn nmse_with_grad(pred: &[f64], target: &[f64], denom: Denominator) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "NMSE over {} predictions and {} targets",
            pred.len(),
            target.len()
        )));
    }
    let d = nmse_denominator(target, denom)?;
    let sse: f64 = pred.iter().zip(target).map(|(p, t)| (t - p).powi(2)).sum();
    let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / d).collect();
    Ok((sse / d, grad))
}

/// True class gets `1 − r`, every other class `r / (K − 1)`.
pub fn smoothed_targets(true_class: usize, k: usize, r: f64) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::Domain(format!("label smoothing needs at least 2 classes, got {k}")));
    }
    if true_class >= k {
        return Err(Error::Domain(format!("class {true_class} outside 0..{k}")));
    }
    if !(0.0..1.0).contains(&r) {
        return Err(Error::Domain(format!("smoothing {r} outside [0, 1)")));
    }
    let mut q = vec![r / (k - 1) as f64; k];
    q[true_class] = 1.0 - r;
    Ok(q)
}

/// Log-softmax of one row, shifted by its maximum.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Mean label-smoothed cross-entropy over `batch` rows of `k` logits, and its gradient.
pub fn lsce_with_grad(logits: &[f64], k: usize, classes: &[u8], r: f64) -> Result<(f64, Vec<f64>)> {
    let batch = classes.len();
    if logits.len() != batch * k || batch == 0 {
        return Err(Error::Shape(format!(
            "{} logits for {batch} examples of {k} classes",
            logits.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (i, &c) in classes.iter().enumerate() {
        let q = smoothed_targets(c as usize, k, r)?;
        let ls = log_softmax(&logits[i * k..(i + 1) * k]);
        loss -= q.iter().zip(&ls).map(|(q, l)| q * l).sum::<f64>();
        for j in 0..k {
            grad[i * k + j] = (ls[j].exp() - q[j]) / batch as f64;
        }
    }
    Ok((loss / batch as f64, grad))
}

pub fn lsce(logits: &[f64], k: usize, classes: &[u8], r: f64) -> Result<f64> {
    Ok(lsce_with_grad(logits, k, classes, r)?.0)
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Fraction of rows whose largest logit is the true class.
pub fn accuracy(logits: &[f64], k: usize, classes: &[u8]) -> f64 {
    let correct = classes
        .iter()
        .enumerate()
        .filter(|&(i, &c)| argmax(&logits[i * k..(i + 1) * k]) == c as usize)
        .count();
    correct as f64 / classes.len() as f64
}

/// Regression and class targets for one batch, already standardized.
#[derive(Debug, Clone, Copy)]
pub struct Targets<'a> {
    pub p: &'a [f64],
    pub logr: &'a [f64],
    pub classes: &'a [u8],
}

#[derive(Debug, Clone, Copy)]
pub struct LossSettings {
    pub lambdas: [f64; 3],
    pub smoothing: f64,
    pub mode: NmseMode,
    pub stats: TargetStats,
}

/// Component losses of the heads that are present, and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub p: Option<f64>,
    pub r: Option<f64>,
    pub gamma: Option<f64>,
    pub joint: f64,
}

fn regression(pred: &[f64], target: &[f64], mode: NmseMode, var: f64) -> Result<(f64, Vec<f64>)> {
    match mode {
        NmseMode::Global => nmse_with_grad(pred, target, Denominator::Global { var }),
        NmseMode::PerBatch => nmse_with_grad(pred, target, Denominator::PerBatch)
            .or_else(|_| nmse_with_grad(pred, target, Denominator::Global { var })),
    }
}

/// `λ1·NMSE_p + λ2·NMSE_R + λ3·LSCE_Γ` over the heads present in `out`, with
/// gradients scaled by the weights.
pub fn joint_loss(out: &ModelOutput, targets: Targets<'_>, s: &LossSettings) -> Result<(LossParts, OutputGrad)> {
    validate_lambdas(s.lambdas)?;
    let [l1, l2, l3] = s.lambdas;
    let mut parts = LossParts::default();
    let mut grad = OutputGrad::default();
    if let Some(p) = &out.p_hat {
        let (loss, g) = regression(p, targets.p, s.mode, s.stats.p_var)?;
        parts.p = Some(loss);
        parts.joint += l1 * loss;
        grad.p_hat = Some(g.into_iter().map(|v| l1 * v).collect());
    }
    if let Some(r) = &out.r_hat {
        let (loss, g) = regression(r, targets.logr, s.mode, s.stats.logr_var)?;
        parts.r = Some(loss);
        parts.joint += l2 * loss;
        grad.r_hat = Some(g.into_iter().map(|v| l2 * v).collect());
    }
    if let Some(logits) = &out.gamma_logits {
        let (loss, g) = lsce_with_grad(logits, out.num_classes, targets.classes, s.smoothing)?;
        parts.gamma = Some(loss);
        parts.joint += l3 * loss;
        grad.gamma_logits = Some(g.into_iter().map(|v| l3 * v).collect());
    }
    Ok((parts, grad))
}

pub fn validate_lambdas(l: [f64; 3]) -> Result<()> {
    if l.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || l.iter().all(|&v| v == 0.0) {
        return Err(Error::Config(format!(
            "loss weights must be nonnegative and not all zero, got {l:?}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn nmse_reference_values() {
        let t = [0.0, 1.0];
        assert_eq!(nmse(&t, &t, Denominator::PerBatch).unwrap(), 0.0);
        assert_eq!(nmse(&[0.5, 0.5], &t, Denominator::PerBatch).unwrap(), 1.0);
        assert_eq!(nmse(&[0.25, 0.75], &t, Denominator::PerBatch).unwrap(), 0.25);
        assert_eq!(nmse(&[0.25, 0.75], &t, Denominator::Global { var: 0.25 }).unwrap(), 0.25);
        assert!(nmse(&[1.0, 1.0], &[2.0, 2.0], Denominator::PerBatch).is_err());
        assert!(nmse(&[1.0], &[2.0, 2.0], Denominator::Global { var: 1.0 }).is_err());
    }

    #[test]
    fn smoothing_reference_vector() {
        let q = smoothed_targets(2, 4, 0.1).unwrap();
        assert_eq!(q, vec![1.0 / 30.0, 1.0 / 30.0, 0.9, 1.0 / 30.0]);
        assert_eq!(q.iter().sum::<f64>(), 1.0);
        assert_eq!(smoothed_targets(1, 3, 0.0).unwrap(), vec![0.0, 1.0, 0.0]);
        assert!(smoothed_targets(0, 1, 0.1).is_err());
        assert!(smoothed_targets(4, 4, 0.1).is_err());
        assert!(smoothed_targets(0, 4, 1.0).is_err());
    }

    #[test]
    fn lsce_reference_values() {
        for r in [0.0, 0.1, 0.5] {
            let l = lsce(&[0.3; 8], 4, &[1, 3], r).unwrap();
            assert!((l - 4f64.ln()).abs() < 1e-12);
        }
        let s: Vec<f64> = log_softmax(&[10.0, 0.0, 0.0, 0.0]).iter().map(|v| -v).collect();
        let expected = 0.9 * s[0] + 0.1 / 3.0 * (s[1] + s[2] + s[3]);
        let l = lsce(&[10.0, 0.0, 0.0, 0.0], 4, &[0], 0.1).unwrap();
        assert_relative_eq!(l, expected, max_relative = 1e-14);
        assert_relative_eq!(l, 1.000136, max_relative = 1e-6);
        let big = lsce(&[1000.0, -1000.0, 0.0, 0.0], 4, &[1], 0.1).unwrap();
        assert_relative_eq!(big, 0.9 * 2000.0 + 0.1 / 3.0 * 2000.0, max_relative = 1e-12);
    }

    #[test]
    fn joint_loss_weights_components() {
        let out = ModelOutput {
            batch: 2,
            num_classes: 2,
            p_hat: Some(vec![0.5, 0.5]),
            r_hat: Some(vec![0.0, 0.0]),
            gamma_logits: Some(vec![0.0; 4]),
        };
        let targets = Targets {
            p: &[0.0, 1.0],
            logr: &[1.0, -1.0],
            classes: &[0, 1],
        };
        let stats = TargetStats {
            p_mean: 0.5,
            p_var: 0.25,
            logr_mean: 0.0,
            logr_var: 1.0,
        };
        let s = LossSettings {
            lambdas: [0.7, 0.85, 1.0],
            smoothing: 0.1,
            mode: NmseMode::Global,
            stats,
        };
        let (parts, _) = joint_loss(&out, targets, &s).unwrap();
        assert_eq!(parts.p, Some(1.0));
        assert_eq!(parts.r, Some(1.0));
        assert_relative_eq!(parts.gamma.unwrap(), 2f64.ln(), max_relative = 1e-14);
        assert_relative_eq!(parts.joint, 0.7 + 0.85 + 2f64.ln(), max_relative = 1e-14);
        let only_gamma = LossSettings {
            lambdas: [0.0, 0.0, 1.0],
            ..s
        };
        let (parts, grad) = joint_loss(&out, targets, &only_gamma).unwrap();
        assert_eq!(parts.joint, parts.gamma.unwrap());
        assert!(grad.p_hat.unwrap().iter().all(|&g| g == 0.0));
        assert!(validate_lambdas([0.0; 3]).is_err());
        assert!(validate_lambdas([-1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn per_batch_mode_falls_back_on_constant_targets() {
        let (l, _) = regression(&[1.0, 1.0], &[2.0, 2.0], NmseMode::PerBatch, 4.0).unwrap();
        assert_eq!(l, 0.25);
    }

    proptest! {
        #[test]
        fn smoothed_distribution_is_proper(k in 2usize..12, c in 0usize..12, r in 0.0f64..0.99) {
            prop_assume!(c < k);
            let q = smoothed_targets(c, k, r).unwrap();
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            if r > 0.0 {
                prop_assert!(q.iter().all(|&v| v > 0.0));
            }
        }

        #[test]
        fn lsce_gradient_matches_differences(
            logits in proptest::collection::vec(-5.0f64..5.0, 12),
            classes in proptest::collection::vec(0u8..4, 3),
            r in 0.0f64..0.5,
        ) {
            let (_, g) = lsce_with_grad(&logits, 4, &classes, r).unwrap();
            for j in 0..12 {
                let mut a = logits.clone();
                let mut b = logits.clone();
                a[j] += 1e-6;
                b[j] -= 1e-6;
                let fd = (lsce(&a, 4, &classes, r).unwrap() - lsce(&b, 4, &classes, r).unwrap()) / 2e-6;
                prop_assert!((fd - g[j]).abs() < 1e-7);
            }
        }

        #[test]
        fn lower_true_logit_raises_loss(logits in proptest::collection::vec(-5.0f64..5.0, 4), c in 0u8..4, d in 0.01f64..3.0, r in 0.0f64..0.5) {
            // With smoothing the loss is minimised at softmax = q, so monotonicity
            // holds while the true-class probability stays below 1 - r.
            let prob = log_softmax(&logits)[c as usize].exp();
            prop_assume!(prob < 1.0 - r);
            let base = lsce(&logits, 4, &[c], r).unwrap();
            let mut lower = logits.clone();
            lower[c as usize] -= d;
            prop_assert!(lsce(&lower, 4, &[c], r).unwrap() > base);
        }
    }
}
