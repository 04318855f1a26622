//! Full-network gradient check of the training objective against central
//! finite differences.

use serde::Serialize;

use crate::error::Result;
use crate::loss::ConsistencyVariant;
use crate::net::{Architecture, ModelParams, SegNet};
use crate::objective::{total_loss, Objective};
use crate::synth::{Provenance, SyntheticSample};
use crate::tensor::{BinaryMask, Image, Rng};

/// Denominator floor, so parameters with vanishing gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub params_per_variant: usize,
    pub step: f64,
    pub size: usize,
    pub channels: usize,
    pub zero_input: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { params_per_variant: 64, step: 1e-5, size: 8, channels: 3, zero_input: false }
    }
}

/// Which part of the objective is being checked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckedTerm {
    /// Weighted BCE on labeled data.
    Supervised,
    /// Synthetic BCE plus the given background term.
    Unlabeled(ConsistencyVariant),
}

impl CheckedTerm {
    pub const ALL: [CheckedTerm; 4] = [
        CheckedTerm::Supervised,
        CheckedTerm::Unlabeled(ConsistencyVariant::Mse),
        CheckedTerm::Unlabeled(ConsistencyVariant::Ce),
        CheckedTerm::Unlabeled(ConsistencyVariant::WholeImage),
    ];

    pub fn name(self) -> String {
        match self {
            CheckedTerm::Supervised => "supervised".into(),
            CheckedTerm::Unlabeled(v) => format!("unlabeled-{}", v.name()),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TermReport {
    pub term: String,
    pub params_checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub terms: Vec<TermReport>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.terms.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic[i]` with central differences of `f` at each index.
/// Returns `(max relative error, index where it occurred)`.
pub fn compare_gradients(
    params: &mut ModelParams,
    analytic: &[f64],
    indices: &[usize],
    step: f64,
    mut f: impl FnMut(&ModelParams) -> Result<f64>,
) -> Result<(f64, usize)> {
    let mut worst = (0.0, indices.first().copied().unwrap_or(0));
    for &i in indices {
        let orig = params.data()[i];
        params.data_mut()[i] = orig + step;
        let up = f(params)?;
        params.data_mut()[i] = orig - step;
        let down = f(params)?;
        params.data_mut()[i] = orig;
        let err = rel_error(analytic[i], (up - down) / (2.0 * step));
        // NaN compares false, so it must be caught explicitly.
        if err.is_nan() || err > worst.0 {
            worst = (if err.is_nan() { f64::INFINITY } else { err }, i);
        }
    }
    Ok(worst)
}

/// One index per parameter tensor, then uniform draws up to `n`.
fn sample_indices(params: &ModelParams, n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = params.layout().entries.iter().map(|e| e.offset + rng.below(e.len())).collect();
    while idx.len() < n {
        idx.push(rng.below(params.len()));
    }
    idx
}

fn make_image(rng: &mut Rng, cfg: &GradcheckConfig) -> Image {
    let n = cfg.size * cfg.size * cfg.channels;
    let data = if cfg.zero_input { vec![0.0; n] } else { (0..n).map(|_| rng.uniform(0.0, 1.0)).collect() };
    Image::new(cfg.size, cfg.size, cfg.channels, data).expect("valid by construction")
}

fn make_mask(rng: &mut Rng, size: usize) -> BinaryMask {
    let mut m = BinaryMask::from_fn(size, size, |_, _| rng.uniform(0.0, 1.0) < 0.3);
    if m.is_empty() {
        m.set(0, 0, true);
    }
    m
}

pub fn gradcheck(cfg: &GradcheckConfig, rng: &Rng) -> Result<GradcheckReport> {
    let arch = Architecture::new(cfg.channels);
    let net = SegNet::new(arch);
    let mut terms = Vec::new();
    for (k, term) in CheckedTerm::ALL.into_iter().enumerate() {
        let mut r = rng.derive(&[k as u64]);
        let mut student = ModelParams::init(arch, &mut r);
        // Random biases keep every unit away from zero pre-activation.
        for e in student.layout().clone().entries.iter().filter(|e| e.shape.len() == 1) {
            for v in &mut student.data_mut()[e.offset..e.offset + e.len()] {
                *v = r.symmetric(0.1);
            }
        }
        let teacher = ModelParams::init(arch, &mut r);
        let image = make_image(&mut r, cfg);
        let mask = make_mask(&mut r, cfg.size);
        let synth = SyntheticSample {
            original: make_image(&mut r, cfg),
            blended: make_image(&mut r, cfg),
            mask: make_mask(&mut r, cfg.size),
            provenance: Provenance { unlabeled: 0, labeled: 0, seed: rng.seed(), stream: rng.stream() },
        };
        let (labeled, synthetic, obj) = match term {
            CheckedTerm::Supervised => (
                vec![(&image, &mask)],
                vec![],
                Objective { lambda_u: 0.0, w_pos: 2.0, variant: ConsistencyVariant::None },
            ),
            CheckedTerm::Unlabeled(variant) => (vec![], vec![synth], Objective { lambda_u: 1.0, w_pos: 2.0, variant }),
        };
        let eval = |p: &ModelParams| -> Result<f64> {
            Ok(total_loss(&net, p, &teacher, &labeled, &synthetic, &obj)?.parts.total)
        };
        let analytic = total_loss(&net, &student, &teacher, &labeled, &synthetic, &obj)?.grads;
        let indices = sample_indices(&student, cfg.params_per_variant, &mut r);
        let (err, at) = compare_gradients(&mut student, &analytic, &indices, cfg.step, eval)?;
        terms.push(TermReport {
            term: term.name(),
            params_checked: indices.len(),
            max_rel_error: err,
            worst_param: student.layout().entry_at(at).map_or("?".into(), |e| e.name.clone()),
        });
    }
    Ok(GradcheckReport { step: cfg.step, terms })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_term_passes() {
        let report = gradcheck(&GradcheckConfig::default(), &Rng::new(11, 0)).unwrap();
        assert_eq!(report.terms.len(), 4);
        for t in &report.terms {
            assert!(t.params_checked >= 50);
            assert!(t.max_rel_error < 1e-4, "{t:?}");
        }
    }

    #[test]
    fn zero_input_is_finite() {
        let cfg = GradcheckConfig { zero_input: true, params_per_variant: 30, ..GradcheckConfig::default() };
        let report = gradcheck(&cfg, &Rng::new(12, 0)).unwrap();
        assert!(report.terms.iter().all(|t| t.max_rel_error.is_finite()));
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let arch = Architecture::new(1);
        let net = SegNet::new(arch);
        let mut rng = Rng::new(13, 0);
        let mut p = ModelParams::init(arch, &mut rng);
        let img = Image::new(8, 8, 1, (0..64).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
        let mask = make_mask(&mut rng, 8);
        let obj = Objective { lambda_u: 0.0, w_pos: 1.0, variant: ConsistencyVariant::None };
        let f = |q: &ModelParams| Ok(total_loss(&net, q, q, &[(&img, &mask)], &[], &obj)?.parts.total);
        let mut g = total_loss(&net, &p, &p, &[(&img, &mask)], &[], &obj).unwrap().grads;
        let i = p.layout().entry("head.bias").unwrap().offset;
        g[i] = 1.5 * g[i] + 1e-3;
        let (err, at) = compare_gradients(&mut p, &g, &[i], 1e-5, f).unwrap();
        assert!(err > 1e-2);
        assert_eq!(at, i);
    }
}
