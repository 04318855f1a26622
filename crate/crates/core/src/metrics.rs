//! Pixel-level evaluation: pooled precision-recall curve, average precision,
//! F1 and Jaccard.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BinaryMask, ProbMap};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Scores and labels of every pixel from a set of images.
#[derive(Clone, Debug, Default)]
pub struct PixelPool {
    scores: Vec<f64>,
    truths: Vec<bool>,
}

impl PixelPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_raw(scores: Vec<f64>, truths: Vec<bool>) -> Result<Self> {
        if scores.len() != truths.len() {
            return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), truths.len())));
        }
        Ok(Self { scores, truths })
    }

    pub fn push(&mut self, pred: &ProbMap, truth: &BinaryMask) -> Result<()> {
        if !pred.same_dims(truth) {
            return Err(Error::Shape("prediction and mask dims differ".into()));
        }
        self.scores.extend_from_slice(pred.data());
        self.truths.extend(truth.data().iter().map(|&v| v == 1));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.truths.iter().filter(|&&t| t).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    /// Pixels scoring at least this value are predicted positive.
    pub threshold: f64,
}

/// Starts at `(recall 0, precision 1)`; one point per distinct score after that,
/// in decreasing threshold order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

pub fn pr_curve(pool: &PixelPool) -> Result<PrCurve> {
    let p = pool.positives();
    if p == 0 {
        return Err(Error::UndefinedMetric("precision-recall needs at least one positive pixel"));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| pool.scores[b].total_cmp(&pool.scores[a]));
    let mut points = vec![PrPoint { recall: 0.0, precision: 1.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = pool.scores[order[i]];
        while i < order.len() && pool.scores[order[i]] == s {
            if pool.truths[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint { recall: tp as f64 / p as f64, precision: tp as f64 / (tp + fp) as f64, threshold: s });
    }
    Ok(PrCurve { points })
}

/// Step-interpolated average precision `sum (R_n - R_{n-1}) P_n`.
pub fn auc_pr(curve: &PrCurve) -> f64 {
    curve.points.windows(2).map(|w| (w[1].recall - w[0].recall) * w[1].precision).sum()
}

/// `pred >= tau` becomes foreground.
pub fn binarize(pred: &ProbMap, tau: f64) -> BinaryMask {
    let w = pred.width();
    BinaryMask::from_fn(pred.height(), w, |y, x| pred.data()[y * w + x] >= tau)
}

/// Overlap counts; summing them over images gives pooled scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Overlap {
    pub intersection: u64,
    pub predicted: u64,
    pub truth: u64,
}

impl Overlap {
    pub fn of(pred: &BinaryMask, truth: &BinaryMask) -> Result<Self> {
        if !pred.same_dims(truth) {
            return Err(Error::Shape("prediction and truth masks differ in size".into()));
        }
        let mut o = Overlap::default();
        for (&a, &b) in pred.data().iter().zip(truth.data()) {
            o.intersection += u64::from(a & b);
            o.predicted += u64::from(a);
            o.truth += u64::from(b);
        }
        Ok(o)
    }

    pub fn add(&mut self, other: Overlap) {
        self.intersection += other.intersection;
        self.predicted += other.predicted;
        self.truth += other.truth;
    }

    /// `(F1, Jaccard)`, both 1 when prediction and truth are empty.
    pub fn scores(&self) -> (f64, f64) {
        if self.predicted == 0 && self.truth == 0 {
            return (1.0, 1.0);
        }
        let i = self.intersection as f64;
        let union = (self.predicted + self.truth - self.intersection) as f64;
        (2.0 * i / (self.predicted + self.truth) as f64, i / union)
    }
}

pub fn f1_jaccard(pred: &BinaryMask, truth: &BinaryMask) -> Result<(f64, f64)> {
    Ok(Overlap::of(pred, truth)?.scores())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    /// Enumerate thresholds independently, counting from scratch each time.
    fn brute_force_ap(scores: &[f64], truths: &[bool]) -> (Vec<(f64, f64)>, f64) {
        let p = truths.iter().filter(|&&t| t).count() as f64;
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut pts = vec![(0.0, 1.0)];
        for &t in &thresholds {
            let tp = scores.iter().zip(truths).filter(|(&s, &y)| s >= t && y).count() as f64;
            let pp = scores.iter().filter(|&&s| s >= t).count() as f64;
            pts.push((tp / p, tp / pp));
        }
        let mut ap = 0.0;
        for n in 1..pts.len() {
            ap += (pts[n].0 - pts[n - 1].0) * pts[n].1;
        }
        (pts, ap)
    }

    fn pool(scores: &[f64], truths: &[bool]) -> PixelPool {
        PixelPool::from_raw(scores.to_vec(), truths.to_vec()).unwrap()
    }

    #[test]
    fn perfect_separation() {
        let c = pr_curve(&pool(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false])).unwrap();
        assert!(c.points.iter().take_while(|p| p.recall < 1.0).all(|p| p.precision == 1.0));
        assert_eq!(c.points[2].recall, 1.0);
        assert_eq!(c.points[2].precision, 1.0);
        assert_eq!(auc_pr(&c), 1.0);
    }

    #[test]
    fn constant_scores_give_prevalence() {
        let c = pr_curve(&pool(&[0.3; 5], &[true, false, false, false, false])).unwrap();
        assert_eq!(c.points.len(), 2);
        assert_eq!(c.points[1].recall, 1.0);
        assert_eq!(c.points[1].precision, 0.2);
        assert_eq!(auc_pr(&c), 0.2);
    }

    #[test]
    fn no_positive_is_undefined() {
        assert!(matches!(pr_curve(&pool(&[0.1, 0.2], &[false, false])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn twenty_pixel_case_matches_oracle() {
        let mut rng = Rng::new(5, 0);
        let scores: Vec<f64> = (0..20).map(|_| (rng.uniform(0.0, 1.0) * 8.0).floor() / 8.0).collect();
        let mut truths: Vec<bool> = (0..20).map(|_| rng.uniform(0.0, 1.0) < 0.4).collect();
        truths[0] = true;
        let c = pr_curve(&pool(&scores, &truths)).unwrap();
        let (pts, ap) = brute_force_ap(&scores, &truths);
        assert_eq!(c.points.iter().map(|p| (p.recall, p.precision)).collect::<Vec<_>>(), pts);
        assert!((auc_pr(&c) - ap).abs() < 1e-12);
    }

    #[test]
    fn binarize_examples() {
        let half = ProbMap::new(2, 2, vec![0.5; 4]).unwrap();
        assert_eq!(binarize(&half, 0.5).count(), 4);
        let m = ProbMap::new(1, 4, vec![0.2, 0.7, 0.49, 0.5]).unwrap();
        assert_eq!(binarize(&m, 0.7 + 1e-9).count(), 0);
        assert_eq!(binarize(&m, 0.5).data(), &[0, 1, 0, 1]);
    }

    #[test]
    fn f1_jaccard_examples() {
        let a = BinaryMask::from_fn(4, 4, |y, _| y == 0);
        assert_eq!(f1_jaccard(&a, &a).unwrap(), (1.0, 1.0));
        let b = BinaryMask::from_fn(4, 4, |y, _| y == 1);
        assert_eq!(f1_jaccard(&a, &b).unwrap(), (0.0, 0.0));
        let c = BinaryMask::from_fn(4, 4, |y, x| (y == 0 && x < 2) || (y == 1 && x < 2));
        let (f1, j) = f1_jaccard(&a, &c).unwrap();
        assert_eq!(f1, 0.5);
        assert!((j - 1.0 / 3.0).abs() < 1e-15);
        let e = BinaryMask::zeros(4, 4);
        assert_eq!(f1_jaccard(&e, &e).unwrap(), (1.0, 1.0));
        assert!(f1_jaccard(&e, &BinaryMask::zeros(3, 4)).is_err());
    }

    proptest! {
        #[test]
        fn curve_matches_brute_force(
            pix in proptest::collection::vec((0u8..16, any::<bool>()), 1..200),
        ) {
            let scores: Vec<f64> = pix.iter().map(|&(s, _)| s as f64 / 15.0).collect();
            let mut truths: Vec<bool> = pix.iter().map(|&(_, t)| t).collect();
            truths[0] = true;
            let c = pr_curve(&pool(&scores, &truths)).unwrap();
            let (pts, ap) = brute_force_ap(&scores, &truths);
            prop_assert_eq!(c.points.iter().map(|p| (p.recall, p.precision)).collect::<Vec<_>>(), pts);
            prop_assert!((auc_pr(&c) - ap).abs() < 1e-12);
            prop_assert!(c.points.windows(2).all(|w| w[0].recall <= w[1].recall));
            prop_assert_eq!(c.points.last().unwrap().recall, 1.0);
        }

        #[test]
        fn ap_invariant_under_monotone_transform(
            pix in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 1..200),
        ) {
            let scores: Vec<f64> = pix.iter().map(|p| p.0).collect();
            let mut truths: Vec<bool> = pix.iter().map(|p| p.1).collect();
            truths[0] = true;
            let warped: Vec<f64> = scores.iter().map(|&s| (3.0 * s).exp() - 7.0).collect();
            let a = auc_pr(&pr_curve(&pool(&scores, &truths)).unwrap());
            let b = auc_pr(&pr_curve(&pool(&warped, &truths)).unwrap());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn f1_jaccard_identity(a in proptest::collection::vec(0u8..2, 36), b in proptest::collection::vec(0u8..2, 36)) {
            let (f1, j) = f1_jaccard(&BinaryMask::new(6, 6, a).unwrap(), &BinaryMask::new(6, 6, b).unwrap()).unwrap();
            prop_assert!((f1 - 2.0 * j / (1.0 + j)).abs() < 1e-12);
        }
    }
}
