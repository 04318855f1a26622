//! The combined training objective `L = L_l + lambda_u * L_u` over one batch,
//! with gradients for every student parameter.
//!
//! `L_l` is the mean weighted BCE over labeled samples. `L_u` is the mean over
//! synthetic samples of the BCE on the pasted mask plus the background term.
//! Teacher outputs enter only as constant probability maps.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss::{consistency_term, weighted_bce, ConsistencyVariant};
use crate::net::{ModelParams, SegNet};
use crate::synth::SyntheticSample;
use crate::tensor::{BinaryMask, Image};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub lambda_u: f64,
    pub w_pos: f64,
    pub variant: ConsistencyVariant,
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_u.is_finite() && self.lambda_u >= 0.0) {
            return Err(Error::invalid("lambda_u", format!("must be >= 0, got {}", self.lambda_u)));
        }
        if !(self.w_pos.is_finite() && self.w_pos >= 0.0) {
            return Err(Error::invalid("w_pos", format!("must be >= 0, got {}", self.w_pos)));
        }
        Ok(())
    }
}

/// Loss components for one batch. Component values are batch means.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub total: f64,
    pub supervised: f64,
    pub synthetic_bce: f64,
    pub consistency: f64,
}

#[derive(Clone, Debug)]
pub struct ObjectiveOutput {
    pub parts: LossParts,
    pub grads: Vec<f64>,
}

struct SampleOut {
    bce: f64,
    bg: f64,
    grads: Vec<f64>,
}

fn labeled_sample(
    net: &SegNet,
    student: &ModelParams,
    image: &Image,
    mask: &BinaryMask,
    w_pos: f64,
    scale: f64,
) -> Result<SampleOut> {
    let fwd = net.forward(student, image)?;
    let mut l = weighted_bce(&fwd.logits, mask, w_pos)?;
    l.grad.iter_mut().for_each(|g| *g *= scale);
    let grads = net.backward(student, &fwd.cache, &l.grad)?;
    Ok(SampleOut { bce: l.value, bg: 0.0, grads })
}

fn synthetic_sample(
    net: &SegNet,
    student: &ModelParams,
    teacher: &ModelParams,
    s: &SyntheticSample,
    obj: &Objective,
    scale: f64,
) -> Result<SampleOut> {
    let fwd = net.forward(student, &s.blended)?;
    let bce = weighted_bce(&fwd.logits, &s.mask, obj.w_pos)?;
    let mut grad = bce.grad;
    let mut bg = 0.0;
    if obj.variant != ConsistencyVariant::None {
        let teacher_input = match obj.variant {
            ConsistencyVariant::WholeImage => &s.blended,
            _ => &s.original,
        };
        let t = net.predict(teacher, teacher_input)?;
        if let Some(term) = consistency_term(obj.variant, &fwd.probs(), &t, &s.mask)? {
            bg = term.value;
            grad.iter_mut().zip(&term.grad).for_each(|(g, d)| *g += d);
        }
    }
    grad.iter_mut().for_each(|g| *g *= scale);
    let grads = net.backward(student, &fwd.cache, &grad)?;
    Ok(SampleOut { bce: bce.value, bg, grads })
}

/// Batch objective and its gradient. Samples are processed in parallel and
/// reduced in input order, so the result does not depend on thread count.
pub fn total_loss(
    net: &SegNet,
    student: &ModelParams,
    teacher: &ModelParams,
    labeled: &[(&Image, &BinaryMask)],
    synthetic: &[SyntheticSample],
    obj: &Objective,
) -> Result<ObjectiveOutput> {
    obj.validate()?;
    if !student.same_layout(teacher) {
        return Err(Error::Shape("teacher and student layouts differ".into()));
    }
    if labeled.is_empty() && synthetic.is_empty() {
        return Err(Error::invalid("batch", "labeled and synthetic batches are both empty"));
    }
    let use_synth = obj.lambda_u > 0.0 && !synthetic.is_empty();
    let l_scale = if labeled.is_empty() { 0.0 } else { 1.0 / labeled.len() as f64 };
    let s_scale = if use_synth { obj.lambda_u / synthetic.len() as f64 } else { 0.0 };

    let lab: Vec<SampleOut> = labeled
        .par_iter()
        .map(|(img, mask)| labeled_sample(net, student, img, mask, obj.w_pos, l_scale))
        .collect::<Result<_>>()?;
    let syn: Vec<SampleOut> = if use_synth {
        synthetic.par_iter().map(|s| synthetic_sample(net, student, teacher, s, obj, s_scale)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut grads = vec![0.0; student.len()];
    for out in lab.iter().chain(&syn) {
        grads.iter_mut().zip(&out.grads).for_each(|(g, d)| *g += d);
    }
    let mean = |xs: &mut dyn Iterator<Item = f64>, n: usize| if n == 0 { 0.0 } else { xs.sum::<f64>() / n as f64 };
    let supervised = mean(&mut lab.iter().map(|o| o.bce), lab.len());
    let synthetic_bce = mean(&mut syn.iter().map(|o| o.bce), syn.len());
    let consistency = mean(&mut syn.iter().map(|o| o.bg), syn.len());
    let total = supervised + obj.lambda_u * (synthetic_bce + consistency);
    Ok(ObjectiveOutput { parts: LossParts { total, supervised, synthetic_bce, consistency }, grads })
}
