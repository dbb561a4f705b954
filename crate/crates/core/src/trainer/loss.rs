//! Pixel-level cross-entropy terms with ignore and confidence masking.
//!
//! Every term comes in two forms: a scalar loss on one image, and a
//! [`CeSum`] accumulator that keeps the unnormalized per-pixel gradient so
//! that batch means can be formed across images before backpropagation.

use crate::error::{Error, Result};
use crate::perturb::Target;
use crate::types::{LabelMap, ProbMap, IGNORE_ID};

use super::model::{softmax_row, Logits, Real};

/// Summed cross-entropy over the contributing pixels of one image.
#[derive(Debug, Clone)]
pub struct CeSum<T> {
    pub loss_sum: T,
    /// Pixels that contributed.
    pub active: usize,
    /// Pixels excluded by the confidence indicator.
    pub masked: usize,
    /// `d loss_sum / d logits`, class-major like the logits.
    pub grad: Vec<T>,
}

/// Cross-entropy against `targets` on pixels where `include` holds.
fn ce_sum<T: Real>(
    logits: &Logits<T>,
    targets: &[u16],
    include: impl Fn(usize) -> bool,
    want_grad: bool,
) -> CeSum<T> {
    let (n, hw) = (logits.classes, logits.pixels());
    let mut out = CeSum {
        loss_sum: T::zero(),
        active: 0,
        masked: 0,
        grad: if want_grad { vec![T::zero(); n * hw] } else { Vec::new() },
    };
    let mut row = vec![T::zero(); n];
    for p in 0..hw {
        if !include(p) {
            continue;
        }
        let t = targets[p] as usize;
        for (c, r) in row.iter_mut().enumerate() {
            *r = logits.at(c, p);
        }
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<T>().ln();
        out.loss_sum += lse - row[t];
        out.active += 1;
        if want_grad {
            softmax_row(&mut row);
            for c in 0..n {
                let onehot = if c == t { T::one() } else { T::zero() };
                out.grad[c * hw + p] = row[c] - onehot;
            }
        }
    }
    out
}

fn check_shape<T>(logits: &Logits<T>, h: usize, w: usize) -> Result<()> {
    if (logits.height, logits.width) != (h, w) {
        return Err(Error::contract(format!(
            "logits are {}x{}, target is {h}x{w}",
            logits.height, logits.width
        )));
    }
    Ok(())
}

/// Supervised term on one image; pixels with the ignore id are skipped.
pub fn supervised_ce<T: Real>(logits: &Logits<T>, label: &LabelMap, want_grad: bool) -> Result<CeSum<T>> {
    check_shape(logits, label.height(), label.width())?;
    if let Some(&bad) = label
        .data()
        .iter()
        .find(|&&v| v != IGNORE_ID && v as usize >= logits.classes)
    {
        return Err(Error::contract(format!(
            "label id {bad} outside the {} model classes",
            logits.classes
        )));
    }
    let data = label.data();
    Ok(ce_sum(logits, data, |p| data[p] != IGNORE_ID, want_grad))
}

/// Confidence-masked term: pixel contributes iff `confidence >= tau`.
pub fn masked_ce<T: Real>(logits: &Logits<T>, target: &Target, tau: f64, want_grad: bool) -> Result<CeSum<T>> {
    check_shape(logits, target.label.height(), target.label.width())?;
    if let Some(&bad) = target.label.data().iter().find(|&&v| v as usize >= logits.classes) {
        return Err(Error::contract(format!(
            "pseudo-label id {bad} outside the {} model classes",
            logits.classes
        )));
    }
    let conf = &target.confidence;
    let keep = |p: usize| conf[p] as f64 >= tau;
    let mut out = ce_sum(logits, target.label.data(), keep, want_grad);
    out.masked = target.label.len() - out.active;
    Ok(out)
}

/// Mean cross-entropy over non-ignored pixels; 0 when none are valid.
pub fn supervised_loss<T: Real>(logits: &Logits<T>, label: &LabelMap) -> Result<T> {
    let s = supervised_ce(logits, label, false)?;
    Ok(mean(s.loss_sum, s.active))
}

/// Weak-to-strong consistency term on one image. The pseudo-label is the
/// argmax of `prob_weak`, gated by its max probability against `tau`.
/// Returns the loss and the fraction of masked-out pixels.
pub fn masked_consistency_loss<T: Real>(prob_weak: &ProbMap, logits_strong: &Logits<T>, tau: f64) -> Result<(T, f64)> {
    let target = target_from_probs(prob_weak);
    masked_target_loss(&target, logits_strong, tau)
}

/// Same as [`masked_consistency_loss`] with an explicit label + confidence target.
pub fn masked_target_loss<T: Real>(target: &Target, logits_strong: &Logits<T>, tau: f64) -> Result<(T, f64)> {
    let s = masked_ce(logits_strong, target, tau, false)?;
    let total = target.label.len().max(1);
    Ok((mean(s.loss_sum, s.active), s.masked as f64 / total as f64))
}

pub fn target_from_probs(prob: &ProbMap) -> Target {
    let (ids, conf) = prob.argmax_max();
    Target {
        label: LabelMap::from_vec(prob.height(), prob.width(), ids).expect("sizes agree"),
        confidence: conf,
    }
}

/// `l_s + l_u_in + lambda_out * l_u_out`.
pub fn total_loss<T: Real>(l_s: T, l_u_in: T, l_u_out: T, lambda_out: T) -> T {
    l_s + l_u_in + lambda_out * l_u_out
}

pub(crate) fn mean<T: Real>(sum: T, count: usize) -> T {
    sum / T::from_f64(count.max(1) as f64)
}
