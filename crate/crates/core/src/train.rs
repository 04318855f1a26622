//! Training loop: labeled batches plus on-the-fly cut-paste synthesis,
//! AdamW with warmup + cosine schedule, teacher update, per-epoch validation
//! and early stopping on validation Jaccard.
//!
//! Every random draw comes from a stream keyed by its purpose and position
//! (init, split, step, sample), so a supervised run and a cut-paste run with
//! the same seed see the same initialization and labeled batches.

use rayon::prelude::*;
use serde::Serialize;

use crate::color::{image_descriptors, match_top_k, MatchTable};
use crate::config::{TeacherKind, TrainConfig};
use crate::dataset::LabeledSet;
use crate::error::{Error, Result};
use crate::loss::ClassBalance;
use crate::metrics::{auc_pr, binarize, pr_curve, Overlap, PixelPool};
use crate::net::{Architecture, ModelParams, SegNet};
use crate::objective::{total_loss, LossParts, Objective};
use crate::optim::{adamw_step, ema_update, OptimizerState, ScheduleConfig};
use crate::synth::{synthesize_with_retries, Matcher, SyntheticSample};
use crate::tensor::{Image, Rng};

const STREAM_INIT: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_BATCH: u64 = 3;
const STREAM_SYNTH: u64 = 4;

#[derive(Clone, Debug, Serialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub lr: f64,
    pub loss: LossParts,
    pub synthesized: usize,
    pub rejected: usize,
    pub val_jaccard: Option<f64>,
    pub val_f1: Option<f64>,
    pub best: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// Student at the best validation epoch (the last epoch without validation).
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub log: Vec<EpochLog>,
    pub best_epoch: u64,
    pub stopped_early: bool,
    pub balance: Option<ClassBalance>,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

/// `round(frac * n)` validation images, always leaving one for training.
pub fn split_validation(n: usize, frac: f64, rng: &Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.derive(&[STREAM_SPLIT]).shuffle(&mut idx);
    let n_val = ((frac * n as f64).round() as usize).min(n.saturating_sub(1));
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    (train, val)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub auc_pr: Option<f64>,
    pub f1: f64,
    pub jaccard: f64,
    pub threshold: f64,
    pub n_images: usize,
    pub n_pixels: usize,
}

/// Pixel-pooled scores over a labeled set. AUC-PR is `None` without positives.
pub fn evaluate(net: &SegNet, params: &ModelParams, set: &LabeledSet, threshold: f64) -> Result<EvalReport> {
    let preds = set.images.par_iter().map(|img| net.predict(params, img)).collect::<Result<Vec<_>>>()?;
    let mut pool = PixelPool::new();
    let mut overlap = Overlap::default();
    for (p, m) in preds.iter().zip(&set.masks) {
        pool.push(p, m)?;
        overlap.add(Overlap::of(&binarize(p, threshold), m)?);
    }
    let auc = if pool.positives() > 0 { Some(auc_pr(&pr_curve(&pool)?)) } else { None };
    let (f1, jaccard) = overlap.scores();
    Ok(EvalReport { auc_pr: auc, f1, jaccard, threshold, n_images: set.len(), n_pixels: pool.len() })
}

struct Synthesizer<'a> {
    cfg: &'a TrainConfig,
    unlabeled: &'a [Image],
    labeled: Vec<(&'a Image, &'a crate::tensor::BinaryMask)>,
    table: Option<MatchTable>,
}

impl Synthesizer<'_> {
    fn batch(&self, step: u64, rng: &Rng) -> Result<(Vec<SyntheticSample>, usize)> {
        let matcher = match &self.table {
            Some(t) => Matcher::TopK(t),
            None => Matcher::Random(self.labeled.len()),
        };
        let base = rng.derive(&[STREAM_SYNTH, step]);
        let mut pick = base.derive(&[u64::MAX]);
        let chosen: Vec<usize> = (0..self.cfg.synthetic_batch).map(|_| pick.below(self.unlabeled.len())).collect();
        let made = chosen
            .par_iter()
            .enumerate()
            .map(|(k, &u)| {
                synthesize_with_retries(
                    u,
                    &self.unlabeled[u],
                    &self.labeled,
                    matcher,
                    &self.cfg.synth,
                    &base.derive(&[k as u64]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let rejected = made.iter().filter(|s| s.is_none()).count();
        Ok((made.into_iter().flatten().collect(), rejected))
    }
}

/// Trains a student (and teacher) on `labeled` plus synthetic samples built
/// from `unlabeled`. `on_epoch` sees each log record as it is produced.
pub fn train(
    cfg: &TrainConfig,
    labeled: &LabeledSet,
    unlabeled: &[Image],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutput> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::invalid("labeled", "the labeled set is empty"));
    }
    let channels = labeled.images[0].channels();
    if labeled.images.iter().chain(unlabeled).any(|i| i.channels() != channels) {
        return Err(Error::Shape("all images must have the same channel count".into()));
    }
    let rng = Rng::new(cfg.seed, 0);
    let (train_idx, val_idx) = split_validation(labeled.len(), cfg.val_fraction, &rng);
    let train_set = labeled.subset(&train_idx);
    let val_set = labeled.subset(&val_idx);

    let balance = if cfg.class_weighting { Some(ClassBalance::from_masks(&train_set.masks)?) } else { None };
    let objective = Objective { lambda_u: cfg.lambda_u, w_pos: balance.map_or(1.0, |b| b.w_pos), variant: cfg.variant };

    let synth = if cfg.uses_synthesis() && !unlabeled.is_empty() {
        let table = if cfg.synth.color_matching {
            let unl = image_descriptors(unlabeled);
            let lab = image_descriptors(&train_set.images);
            Some(match_top_k(&unl, &lab, cfg.synth.top_k)?)
        } else {
            None
        };
        Some(Synthesizer { cfg, unlabeled, labeled: train_set.pairs(), table })
    } else {
        None
    };

    let net = SegNet::new(Architecture::new(channels));
    let mut student = ModelParams::init(net.architecture(), &mut rng.derive(&[STREAM_INIT]));
    let mut teacher = student.clone();
    let mut opt = OptimizerState::new(student.len());
    let schedule = ScheduleConfig::new(
        cfg.optimizer.lr,
        cfg.warmup_epochs * cfg.steps_per_epoch,
        cfg.epochs * cfg.steps_per_epoch,
    )?;

    let mut log = Vec::new();
    let mut best: Option<(f64, u64, ModelParams, ModelParams)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let train_pairs = train_set.pairs();
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut sums = LossParts::default();
        let (mut synthesized, mut rejected) = (0, 0);
        let mut lr = 0.0;
        for s in 0..cfg.steps_per_epoch {
            let step = epoch * cfg.steps_per_epoch + s;
            lr = schedule.lr_at(step)?;
            rng.derive(&[STREAM_BATCH, step]).shuffle(&mut order);
            let batch: Vec<_> = order.iter().take(cfg.labeled_batch).map(|&i| train_pairs[i]).collect();
            let samples = match &synth {
                Some(sy) => {
                    let (samples, rej) = sy.batch(step, &rng)?;
                    rejected += rej;
                    samples
                }
                None => Vec::new(),
            };
            synthesized += samples.len();
            if cfg.teacher == TeacherKind::Copy {
                teacher.data_mut().copy_from_slice(student.data());
            }
            let out = total_loss(&net, &student, &teacher, &batch, &samples, &objective)?;
            if !out.parts.total.is_finite() {
                return Err(Error::NonFinite {
                    name: "loss".into(),
                    context: format!("epoch {epoch}, step {step}: {:?}", out.parts),
                });
            }
            adamw_step(&mut student, &out.grads, &mut opt, lr, &cfg.optimizer)?;
            if cfg.teacher == TeacherKind::Ema {
                ema_update(&mut teacher, &student, cfg.ema_decay)?;
            }
            sums.total += out.parts.total;
            sums.supervised += out.parts.supervised;
            sums.synthetic_bce += out.parts.synthetic_bce;
            sums.consistency += out.parts.consistency;
        }
        let n = cfg.steps_per_epoch as f64;
        let loss = LossParts {
            total: sums.total / n,
            supervised: sums.supervised / n,
            synthetic_bce: sums.synthetic_bce / n,
            consistency: sums.consistency / n,
        };

        let (val_jaccard, val_f1, improved) = if val_set.is_empty() {
            (None, None, false)
        } else {
            let r = evaluate(&net, &student, &val_set, cfg.threshold)?;
            let improved = best.as_ref().is_none_or(|b| r.jaccard > b.0);
            (Some(r.jaccard), Some(r.f1), improved)
        };
        if improved {
            best = Some((val_jaccard.unwrap_or(0.0), epoch, student.clone(), teacher.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        let record = EpochLog { epoch, lr, loss, synthesized, rejected, val_jaccard, val_f1, best: improved };
        on_epoch(&record);
        log.push(record);
        if !val_set.is_empty() && since_best >= cfg.patience {
            stopped_early = epoch + 1 < cfg.epochs;
            break;
        }
    }

    let (best_epoch, student, teacher) = match best {
        Some((_, e, s, t)) => (e, s, t),
        None => (log.last().map_or(0, |l| l.epoch), student, teacher),
    };
    let teacher = match cfg.teacher {
        TeacherKind::Copy => student.clone(),
        TeacherKind::Ema => teacher,
    };
    Ok(TrainOutput {
        student,
        teacher,
        log,
        best_epoch,
        stopped_early,
        balance,
        train_ids: train_set.ids.clone(),
        val_ids: val_set.ids.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::ConsistencyVariant;
    use crate::toy::{gen_sample, Split, ToyConfig};

    fn toy(n_lab: usize, n_unl: usize, size: usize) -> (LabeledSet, Vec<Image>) {
        let cfg = ToyConfig { size, radius: [2.0, 4.0], ..ToyConfig::default() };
        let lab: Vec<_> = (0..n_lab).map(|i| gen_sample(&cfg, Split::Labeled, i)).collect();
        let set = LabeledSet {
            ids: (0..n_lab).map(|i| i.to_string()).collect(),
            images: lab.iter().map(|p| p.0.clone()).collect(),
            masks: lab.into_iter().map(|p| p.1).collect(),
        };
        let unl = (0..n_unl).map(|i| gen_sample(&cfg, Split::Unlabeled, i).0).collect();
        (set, unl)
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            warmup_epochs: 1,
            steps_per_epoch: 2,
            labeled_batch: 2,
            synthetic_batch: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn split_keeps_one_for_training() {
        let rng = Rng::new(0, 0);
        assert_eq!(split_validation(8, 0.1, &rng).1.len(), 1);
        assert_eq!(split_validation(1, 0.1, &rng).1.len(), 0);
        assert_eq!(split_validation(4, 0.9, &rng).0.len(), 1);
        let (t, v) = split_validation(30, 0.1, &rng);
        assert_eq!((t.len(), v.len()), (27, 3));
        assert!(v.iter().all(|i| !t.contains(i)));
    }

    #[test]
    fn supervised_degenerate_case_is_finite() {
        let (lab, _) = toy(4, 0, 16);
        let out = train(&small_cfg().supervised(), &lab, &[], |_| {}).unwrap();
        assert_eq!(out.log.len(), 4);
        assert!(out.log.iter().all(|l| l.loss.total.is_finite() && l.synthesized == 0));
        assert_eq!(out.train_ids.len() + out.val_ids.len(), 4);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let (lab, unl) = toy(4, 4, 16);
        let cfg = small_cfg();
        let a = train(&cfg, &lab, &unl, |_| {}).unwrap();
        let b = train(&cfg, &lab, &unl, |_| {}).unwrap();
        assert!(a.log.iter().any(|l| l.synthesized > 0));
        assert!(a.student.data().iter().zip(b.student.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn teacher_only_moves_by_ema() {
        let (lab, unl) = toy(2, 2, 16);
        let cfg = TrainConfig { lambda_u: 1.0, val_fraction: 0.0, ..small_cfg() };
        let frozen = train(&TrainConfig { ema_decay: 1.0, ..cfg.clone() }, &lab, &unl, |_| {}).unwrap();
        let init = ModelParams::init(frozen.student.architecture(), &mut Rng::new(cfg.seed, 0).derive(&[STREAM_INIT]));
        assert_eq!(frozen.teacher, init);
        assert_ne!(frozen.student, init);
        let tracking = train(&TrainConfig { ema_decay: 0.0, ..cfg }, &lab, &unl, |_| {}).unwrap();
        assert_eq!(tracking.teacher, tracking.student);
    }

    #[test]
    fn variants_and_teachers_run() {
        let (lab, unl) = toy(3, 3, 16);
        for variant in ConsistencyVariant::ALL {
            for teacher in [TeacherKind::Copy, TeacherKind::Ema] {
                let cfg = TrainConfig { variant, teacher, epochs: 2, ..small_cfg() };
                let out = train(&cfg, &lab, &unl, |_| {}).unwrap();
                assert!(out.log.iter().all(|l| l.loss.total.is_finite()));
                if teacher == TeacherKind::Copy {
                    assert_eq!(out.teacher, out.student);
                }
            }
        }
    }

    #[test]
    fn empty_labeled_set_is_rejected() {
        let empty = LabeledSet { ids: vec![], images: vec![], masks: vec![] };
        assert!(train(&small_cfg(), &empty, &[], |_| {}).is_err());
    }
}
