//! Loss kernels with analytic gradients with respect to the student logits.
//!
//! Every kernel averages over pixels. Reductions go through
//! [`pairwise_sum`] so values do not depend on thread scheduling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, BinaryMask, ProbMap, PROB_EPS};

#[derive(Clone, Debug, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// `d value / d logit`, one entry per pixel.
    pub grad: Vec<f64>,
}

/// Which unlabeled-background regularizer accompanies the synthetic BCE.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConsistencyVariant {
    /// Masked MSE between student on x̃ and teacher on x.
    Mse,
    /// Masked soft-target cross entropy, same inputs as `Mse`.
    Ce,
    /// Unmasked MSE between student and teacher, both fed x̃.
    WholeImage,
    None,
}

impl ConsistencyVariant {
    pub const ALL: [ConsistencyVariant; 4] = [Self::None, Self::Mse, Self::Ce, Self::WholeImage];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mse => "mse",
            Self::Ce => "ce",
            Self::WholeImage => "whole-image",
            Self::None => "none",
        }
    }
}

/// Pixel counts over the labeled training set and the derived positive weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBalance {
    pub total: u64,
    pub positive: u64,
    pub w_pos: f64,
}

impl ClassBalance {
    pub fn from_masks<'a>(masks: impl IntoIterator<Item = &'a BinaryMask>) -> Result<Self> {
        let (mut total, mut positive) = (0u64, 0u64);
        for m in masks {
            total += m.data().len() as u64;
            positive += m.count() as u64;
        }
        Ok(Self { total, positive, w_pos: positive_weight(total, positive)? })
    }
}

/// `ln(total / positive)`.
pub fn positive_weight(total: u64, positive: u64) -> Result<f64> {
    if positive == 0 {
        return Err(Error::UndefinedWeight);
    }
    if total < positive {
        return Err(Error::invalid("P_total", format!("{total} < positive count {positive}")));
    }
    Ok((total as f64 / positive as f64).ln())
}

fn log_sigmoid(z: f64) -> f64 {
    // ln σ(z) = -softplus(-z), evaluated without overflow.
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

const LN_EPS: f64 = -16.118_095_650_958_32; // ln(1e-7)

fn clamped_ln(v: f64) -> f64 {
    v.clamp(LN_EPS, (1.0 - PROB_EPS).ln())
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a} vs {b} pixels")));
    }
    Ok(())
}

/// Pixel-mean of `-[w_pos·y·ln p + (1-y)·ln(1-p)]`, `p = sigmoid(logit)`
/// clamped to `[1e-7, 1-1e-7]` inside the logarithms.
pub fn weighted_bce(logits: &[f64], target: &BinaryMask, w_pos: f64) -> Result<LossResult> {
    check_len("weighted_bce", logits.len(), target.data().len())?;
    let n = logits.len() as f64;
    let mut terms = Vec::with_capacity(logits.len());
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(target.data()) {
        let p = crate::tensor::sigmoid(z);
        if y == 1 {
            terms.push(-w_pos * clamped_ln(log_sigmoid(z)));
            grad.push(-w_pos * (1.0 - p) / n);
        } else {
            terms.push(-clamped_ln(log_sigmoid(-z)));
            grad.push(p / n);
        }
    }
    Ok(LossResult { value: pairwise_sum(&terms) / n, grad })
}

fn check_maps(what: &str, a: &ProbMap, b: &ProbMap) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!("{what}: {}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width())));
    }
    Ok(())
}

/// Pixel-mean of `((s - t)·(1 - ỹ))²`. The teacher map is a constant.
pub fn background_consistency_mse(student: &ProbMap, teacher: &ProbMap, mask: &BinaryMask) -> Result<LossResult> {
    check_maps("background_consistency_mse", student, teacher)?;
    if !student.same_dims(mask) {
        return Err(Error::Shape("background_consistency_mse: mask dims".into()));
    }
    let n = student.len() as f64;
    let mut terms = Vec::with_capacity(student.len());
    let mut grad = Vec::with_capacity(student.len());
    for ((&s, &t), &y) in student.data().iter().zip(teacher.data()).zip(mask.data()) {
        let bg = 1.0 - y as f64;
        let d = (s - t) * bg;
        terms.push(d * d);
        grad.push(2.0 * d * bg * s * (1.0 - s) / n);
    }
    Ok(LossResult { value: pairwise_sum(&terms) / n, grad })
}

/// Pixel-mean of `(1 - ỹ)·BCE(s; soft target t)`.
pub fn background_consistency_ce(student: &ProbMap, teacher: &ProbMap, mask: &BinaryMask) -> Result<LossResult> {
    check_maps("background_consistency_ce", student, teacher)?;
    if !student.same_dims(mask) {
        return Err(Error::Shape("background_consistency_ce: mask dims".into()));
    }
    let n = student.len() as f64;
    let mut terms = Vec::with_capacity(student.len());
    let mut grad = Vec::with_capacity(student.len());
    for ((&s, &t), &y) in student.data().iter().zip(teacher.data()).zip(mask.data()) {
        let bg = 1.0 - y as f64;
        terms.push(-bg * (t * clamped_ln(s.ln()) + (1.0 - t) * clamped_ln((1.0 - s).ln())));
        grad.push(bg * (s - t) / n);
    }
    Ok(LossResult { value: pairwise_sum(&terms) / n, grad })
}

/// Unmasked pixel-mean of `(s - t)²`, both maps computed from x̃.
pub fn whole_image_consistency(student: &ProbMap, teacher: &ProbMap) -> Result<LossResult> {
    check_maps("whole_image_consistency", student, teacher)?;
    let n = student.len() as f64;
    let mut terms = Vec::with_capacity(student.len());
    let mut grad = Vec::with_capacity(student.len());
    for (&s, &t) in student.data().iter().zip(teacher.data()) {
        let d = s - t;
        terms.push(d * d);
        grad.push(2.0 * d * s * (1.0 - s) / n);
    }
    Ok(LossResult { value: pairwise_sum(&terms) / n, grad })
}

/// Background term for one synthetic sample; `None` for the `None` variant.
pub fn consistency_term(
    variant: ConsistencyVariant,
    student: &ProbMap,
    teacher: &ProbMap,
    mask: &BinaryMask,
) -> Result<Option<LossResult>> {
    Ok(match variant {
        ConsistencyVariant::Mse => Some(background_consistency_mse(student, teacher, mask)?),
        ConsistencyVariant::Ce => Some(background_consistency_ce(student, teacher, mask)?),
        ConsistencyVariant::WholeImage => Some(whole_image_consistency(student, teacher)?),
        ConsistencyVariant::None => None,
    })
}
