//! Training losses and evaluation metrics.
//!
//! The losses build on the tape so gradients flow back to the predictions;
//! metrics (rank correlation, percentage errors) are plain functions over
//! f64 slices.

use serde::{Deserialize, Serialize};

use crate::error::{NarError, Result};
use crate::numeric::tape::{Tape, Var};
use crate::numeric::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the ranking term.
    pub lambda1: f64,
    /// Weight of the consistency term; only applied when augmented pairs exist.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.1,
            lambda2: 0.5,
        }
    }
}

/// How the per-pair ranking differences reduce to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SrVariant {
    /// Sum of absolute differences (the default; always a valid loss).
    #[default]
    Abs,
    /// Sum of squared differences.
    Square,
    /// Raw signed sum (can be negative; kept for comparison).
    Raw,
}

fn check_same_len<T: Scalar>(
    tape: &Tape<'_, T>,
    op: &'static str,
    a: Var,
    b: Var,
) -> Result<usize> {
    let (ar, ac) = tape.dims(a);
    let (br, bc) = tape.dims(b);
    if ac != 1 || bc != 1 || ar != br {
        return Err(NarError::ShapeMismatch {
            op,
            detail: format!("expected equal-length column vectors, got {ar}x{ac} and {br}x{bc}"),
        });
    }
    if ar == 0 {
        return Err(NarError::ShapeMismatch {
            op,
            detail: "empty vectors".into(),
        });
    }
    Ok(ar)
}

/// Sum of squared residuals; `mean_reduction` divides by the length.
pub fn mse_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    pred: Var,
    target: Var,
    mean_reduction: bool,
) -> Result<Var> {
    let m = check_same_len(tape, "mse_loss", pred, target)?;
    let r = tape.sub(pred, target)?;
    let sq = tape.mul(r, r)?;
    let s = tape.sum(sq)?;
    if mean_reduction {
        tape.scale(s, T::from_f64(1.0 / m as f64))
    } else {
        Ok(s)
    }
}

/// Ranking loss: for each i compares the prediction difference against the
/// target difference for the shuffled partner I(i).
pub fn sr_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    pred: Var,
    target: Var,
    shuffle: &[usize],
) -> Result<Var> {
    sr_loss_with(tape, pred, target, shuffle, SrVariant::Abs)
}

pub fn sr_loss_with<T: Scalar>(
    tape: &mut Tape<'_, T>,
    pred: Var,
    target: Var,
    shuffle: &[usize],
    variant: SrVariant,
) -> Result<Var> {
    let m = check_same_len(tape, "sr_loss", pred, target)?;
    if shuffle.len() != m {
        return Err(NarError::ShapeMismatch {
            op: "sr_loss",
            detail: format!("shuffle length {} vs {m}", shuffle.len()),
        });
    }
    let pg = tape.gather_rows(pred, shuffle)?;
    let tg = tape.gather_rows(target, shuffle)?;
    let dp = tape.sub(pg, pred)?;
    let dt = tape.sub(tg, target)?;
    let d = tape.sub(dp, dt)?;
    let reduced = match variant {
        SrVariant::Abs => tape.abs(d)?,
        SrVariant::Square => tape.mul(d, d)?,
        SrVariant::Raw => d,
    };
    tape.sum(reduced)
}

/// Consistency loss: sum of |prediction - augmented prediction| over pairs.
pub fn ac_loss<T: Scalar>(tape: &mut Tape<'_, T>, pred: Var, pred_aug: Var) -> Result<Var> {
    check_same_len(tape, "ac_loss", pred, pred_aug)?;
    let d = tape.sub(pred, pred_aug)?;
    let a = tape.abs(d)?;
    tape.sum(a)
}

/// Weighted combination. `pred`/`target` already contain any augmented
/// samples; `ac_pair` supplies the (original, augmented) prediction columns
/// when consistency pairs exist — without them the lambda2 term is zero by
/// definition.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    pred: Var,
    target: Var,
    shuffle: &[usize],
    ac_pair: Option<(Var, Var)>,
    weights: &LossWeights,
    sr_variant: SrVariant,
    mse_mean: bool,
) -> Result<Var> {
    if weights.lambda1 < 0.0 || weights.lambda2 < 0.0 {
        return Err(NarError::InvalidSpec(
            "loss weights must be non-negative".into(),
        ));
    }
    let mut loss = mse_loss(tape, pred, target, mse_mean)?;
    if weights.lambda1 > 0.0 {
        let sr = sr_loss_with(tape, pred, target, shuffle, sr_variant)?;
        let sr = tape.scale(sr, T::from_f64(weights.lambda1))?;
        loss = tape.add(loss, sr)?;
    }
    if let Some((orig, aug)) = ac_pair {
        if weights.lambda2 > 0.0 {
            let ac = ac_loss(tape, orig, aug)?;
            let ac = tape.scale(ac, T::from_f64(weights.lambda2))?;
            loss = tape.add(loss, ac)?;
        }
    }
    Ok(loss)
}

// --- metrics ---------------------------------------------------------------

/// Tie-corrected Kendall rank correlation (tau-b) over all pairs.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(NarError::ShapeMismatch {
            op: "kendall_tau",
            detail: format!("{} vs {}", a.len(), b.len()),
        });
    }
    let m = a.len();
    if m < 2 {
        return Err(NarError::MetricUndefined(
            "kendall tau needs at least 2 samples".into(),
        ));
    }
    let mut concordant = 0u64;
    let mut discordant = 0u64;
    let mut ties_a = 0u64;
    let mut ties_b = 0u64;
    for i in 0..m {
        for j in i + 1..m {
            let dx = a[i] - a[j];
            let dy = b[i] - b[j];
            if dx == 0.0 && dy == 0.0 {
                ties_a += 1;
                ties_b += 1;
            } else if dx == 0.0 {
                ties_a += 1;
            } else if dy == 0.0 {
                ties_b += 1;
            } else if dx * dy > 0.0 {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let n0 = (m * (m - 1) / 2) as f64;
    let denom = ((n0 - ties_a as f64) * (n0 - ties_b as f64)).sqrt();
    if denom == 0.0 {
        return Err(NarError::MetricUndefined(
            "kendall tau undefined: one input has zero rank variance".into(),
        ));
    }
    Ok((concordant as f64 - discordant as f64) / denom)
}

fn check_positive_targets(op: &'static str, target: &[f64]) -> Result<()> {
    if target.iter().any(|&t| t <= 0.0 || !t.is_finite()) {
        return Err(NarError::MetricUndefined(format!(
            "{op} requires strictly positive targets"
        )));
    }
    Ok(())
}

/// Mean absolute percentage error, in percent.
pub fn mape(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(NarError::ShapeMismatch {
            op: "mape",
            detail: format!("{} vs {}", pred.len(), target.len()),
        });
    }
    check_positive_targets("mape", target)?;
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| (p - t).abs() / t)
        .sum();
    Ok(total / pred.len() as f64 * 100.0)
}

/// Fraction of samples whose relative error is at most `delta` (inclusive).
pub fn acc_delta(pred: &[f64], target: &[f64], delta: f64) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(NarError::ShapeMismatch {
            op: "acc_delta",
            detail: format!("{} vs {}", pred.len(), target.len()),
        });
    }
    if delta <= 0.0 {
        return Err(NarError::InvalidSpec(format!("delta {delta} must be > 0")));
    }
    check_positive_targets("acc_delta", target)?;
    let hits = pred
        .iter()
        .zip(target)
        .filter(|(&p, &t)| (p - t).abs() / t <= delta)
        .count();
    Ok(hits as f64 / pred.len() as f64)
}
