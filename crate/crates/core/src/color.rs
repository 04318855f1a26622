//! Pairing unlabeled images with visually similar labeled samples.
//!
//! Color images are compared by the CIE76 difference of their mean CIELAB
//! color; grayscale images by pixelwise L2 distance between 32x32
//! area-averaged thumbnails.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Image, Rng};

pub const THUMBNAIL_SIDE: usize = 32;
pub const DEFAULT_TOP_K: usize = 5;

// sRGB primaries to XYZ under D65.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

fn srgb_to_linear(c: f64) -> f64 {
    let c = c.clamp(0.0, 1.0);
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// sRGB in `[0, 1]` to CIELAB (D65). Inputs outside `[0, 1]` are clamped.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let mut xyz = [0.0; 3];
    for (out, row) in xyz.iter_mut().zip(RGB_TO_XYZ) {
        *out = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
    }
    // Reference white is the image of RGB (1, 1, 1), so white maps to L=100, a=b=0.
    let white = RGB_TO_XYZ.map(|row| row[0] + row[1] + row[2]);
    let fx = lab_f(xyz[0] / white[0]);
    let fy = lab_f(xyz[1] / white[1]);
    let fz = lab_f(xyz[2] / white[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// CIE76 color difference.
pub fn delta_e(lab1: [f64; 3], lab2: [f64; 3]) -> f64 {
    euclidean(&lab1, &lab2)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DescriptorKind {
    ColorMeanLab,
    GrayThumbnail,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    pub kind: DescriptorKind,
    pub values: Vec<f64>,
}

impl Descriptor {
    pub fn distance(&self, other: &Descriptor) -> Result<f64> {
        if self.kind != other.kind {
            return Err(Error::invalid("descriptor", "cannot compare color and gray descriptors"));
        }
        Ok(match self.kind {
            DescriptorKind::ColorMeanLab => delta_e(
                [self.values[0], self.values[1], self.values[2]],
                [other.values[0], other.values[1], other.values[2]],
            ),
            DescriptorKind::GrayThumbnail => euclidean(&self.values, &other.values),
        })
    }
}

pub fn image_descriptor(image: &Image) -> Descriptor {
    if image.channels() == 3 {
        let mut sum = [0.0; 3];
        for px in image.data().chunks_exact(3) {
            let lab = srgb_to_lab([px[0], px[1], px[2]]);
            for c in 0..3 {
                sum[c] += lab[c];
            }
        }
        let n = image.num_pixels() as f64;
        Descriptor { kind: DescriptorKind::ColorMeanLab, values: sum.iter().map(|s| s / n).collect() }
    } else {
        Descriptor {
            kind: DescriptorKind::GrayThumbnail,
            values: area_resample(image.data(), image.height(), image.width(), THUMBNAIL_SIDE, THUMBNAIL_SIDE),
        }
    }
}

/// Row-stochastic box-filter weights mapping `src` samples onto `dst` cells.
fn box_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|j| {
                    let overlap = (hi.min((j + 1) as f64) - lo.max(j as f64)).max(0.0);
                    (overlap > 0.0).then_some((j, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// Area-averaging resize of a single-channel `h x w` array.
pub fn area_resample(data: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let rows = box_weights(h, out_h);
    let cols = box_weights(w, out_w);
    // Columns first: h x out_w intermediate.
    let mut tmp = vec![0.0; h * out_w];
    for y in 0..h {
        for (ox, taps) in cols.iter().enumerate() {
            tmp[y * out_w + ox] = taps.iter().map(|&(x, wt)| wt * data[y * w + x]).sum();
        }
    }
    let mut out = vec![0.0; out_h * out_w];
    for (oy, taps) in rows.iter().enumerate() {
        for ox in 0..out_w {
            out[oy * out_w + ox] = taps.iter().map(|&(y, wt)| wt * tmp[y * out_w + ox]).sum();
        }
    }
    out
}

pub fn image_descriptors(images: &[Image]) -> Vec<Descriptor> {
    images.par_iter().map(image_descriptor).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub labeled: usize,
    pub distance: f64,
}

/// For each unlabeled image, its nearest labeled samples in ascending
/// distance order (ties broken by lower labeled index).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchTable {
    pub rows: Vec<Vec<Candidate>>,
}

#[derive(Serialize, Deserialize)]
struct MatchLine {
    unlabeled: usize,
    candidates: Vec<Candidate>,
}

impl MatchTable {
    /// One JSON object per line: `{"unlabeled", "candidates": [{"labeled", "distance"}]}`.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for (unlabeled, candidates) in self.rows.iter().enumerate() {
            let line = MatchLine { unlabeled, candidates: candidates.clone() };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_json_lines(text: &str) -> Result<Self> {
        let mut lines: Vec<MatchLine> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        lines.sort_by_key(|l| l.unlabeled);
        for (i, l) in lines.iter().enumerate() {
            if l.unlabeled != i {
                return Err(Error::Config(format!("match table is missing row {i}")));
            }
        }
        Ok(Self { rows: lines.into_iter().map(|l| l.candidates).collect() })
    }
}

pub fn match_top_k(unlabeled: &[Descriptor], labeled: &[Descriptor], k: usize) -> Result<MatchTable> {
    let first = labeled.first().ok_or_else(|| Error::invalid("labeled", "no labeled descriptors to match against"))?;
    if k == 0 {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    let kind = first.kind;
    if let Some(d) = unlabeled.iter().chain(labeled).find(|d| d.kind != kind) {
        return Err(Error::invalid("descriptor", format!("kind mismatch: {:?} vs {:?}", d.kind, kind)));
    }
    let k = k.min(labeled.len());
    let rows = unlabeled
        .par_iter()
        .map(|u| {
            let mut cands: Vec<Candidate> = labeled
                .iter()
                .enumerate()
                .map(|(j, l)| Candidate { labeled: j, distance: u.distance(l).expect("kinds checked above") })
                .collect();
            cands.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.labeled.cmp(&b.labeled)));
            cands.truncate(k);
            cands
        })
        .collect();
    Ok(MatchTable { rows })
}

/// Uniform draw among the candidates of one row.
pub fn sample_match(table: &MatchTable, row: usize, rng: &mut Rng) -> Result<usize> {
    let cands = table
        .rows
        .get(row)
        .ok_or_else(|| Error::invalid("row", format!("{row} out of range ({} rows)", table.rows.len())))?;
    if cands.is_empty() {
        return Err(Error::invalid("row", format!("row {row} has no candidates")));
    }
    Ok(cands[rng.below(cands.len())].labeled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn close3(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn lab_reference_points() {
        assert!(close3(srgb_to_lab([1.0, 1.0, 1.0]), [100.0, 0.0, 0.0], 1e-3));
        assert!(close3(srgb_to_lab([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0], 1e-12));
        // Reference values from scikit-image `rgb2lab` (D65, 2 degree observer).
        assert!(close3(srgb_to_lab([1.0, 0.0, 0.0]), [53.2406, 80.0923, 67.2028], 1e-2));
        assert!(close3(srgb_to_lab([0.0, 1.0, 0.0]), [87.7351, -86.1830, 83.1797], 1e-2));
        assert!(close3(srgb_to_lab([0.0, 0.0, 1.0]), [32.2957, 79.1856, -107.8573], 1e-2));
        assert!(close3(srgb_to_lab([0.2, 0.6, 0.3]), [56.1016, -46.2386, 31.6752], 1e-2));
    }

    #[test]
    fn delta_e_examples() {
        assert_eq!(delta_e([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]), 0.0);
        assert_eq!(delta_e([0.0, 0.0, 0.0], [100.0, 0.0, 0.0]), 100.0);
        assert_eq!(delta_e([50.0, 3.0, 4.0], [50.0, 0.0, 0.0]), 5.0);
    }

    #[test]
    fn descriptors_of_constant_images() {
        let d = image_descriptor(&Image::filled(5, 7, 3, 1.0));
        assert_eq!(d.kind, DescriptorKind::ColorMeanLab);
        assert!(close3([d.values[0], d.values[1], d.values[2]], [100.0, 0.0, 0.0], 1e-3));

        let g = image_descriptor(&Image::filled(40, 50, 1, 0.5));
        assert_eq!(g.kind, DescriptorKind::GrayThumbnail);
        assert_eq!(g.values.len(), 1024);
        assert!(g.values.iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn thumbnail_of_half_split_image() {
        let data: Vec<f64> = (0..64 * 64).map(|i| if i % 64 < 32 { 0.0 } else { 1.0 }).collect();
        let img = Image::new(64, 64, 1, data).unwrap();
        let d = image_descriptor(&img);
        for y in 0..32 {
            for x in 0..32 {
                let want = if x < 16 { 0.0 } else { 1.0 };
                assert_eq!(d.values[y * 32 + x], want, "cell ({y},{x})");
            }
        }
    }

    #[test]
    fn area_resample_preserves_mean_for_uneven_sizes() {
        let mut rng = Rng::new(5, 0);
        let data: Vec<f64> = (0..45 * 37).map(|_| rng.uniform(0.0, 1.0)).collect();
        let out = area_resample(&data, 45, 37, 32, 32);
        let m_in = data.iter().sum::<f64>() / data.len() as f64;
        let m_out = out.iter().sum::<f64>() / out.len() as f64;
        assert!((m_in - m_out).abs() < 1e-12);
    }

    fn gray(values: Vec<f64>) -> Descriptor {
        Descriptor { kind: DescriptorKind::GrayThumbnail, values }
    }

    #[test]
    fn match_exact_duplicate_first_and_clipping() {
        let labeled = vec![gray(vec![0.0, 1.0]), gray(vec![0.3, 0.3]), gray(vec![0.9, 0.1])];
        let table = match_top_k(&[gray(vec![0.3, 0.3])], &labeled, 5).unwrap();
        assert_eq!(table.rows[0].len(), 3);
        assert_eq!(table.rows[0][0], Candidate { labeled: 1, distance: 0.0 });
    }

    #[test]
    fn match_errors() {
        let color = Descriptor { kind: DescriptorKind::ColorMeanLab, values: vec![0.0; 3] };
        assert!(match_top_k(&[gray(vec![0.0])], &[], 5).is_err());
        assert!(match_top_k(&[color], &[gray(vec![0.0])], 5).is_err());
        let t = MatchTable { rows: vec![] };
        assert!(sample_match(&t, 0, &mut Rng::new(0, 0)).is_err());
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let labeled = vec![gray(vec![1.0]), gray(vec![-1.0]), gray(vec![1.0])];
        let t = match_top_k(&[gray(vec![0.0])], &labeled, 3).unwrap();
        let order: Vec<usize> = t.rows[0].iter().map(|c| c.labeled).collect();
        assert_eq!(order, vec![0, 1, 2]);
    }

    /// Exhaustive oracle: all pairs, sort by (distance, index), take k.
    fn brute_force(unlabeled: &[Vec<f64>], labeled: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
        unlabeled
            .iter()
            .map(|u| {
                let mut all: Vec<(f64, usize)> = labeled
                    .iter()
                    .enumerate()
                    .map(|(j, l)| {
                        let mut s = 0.0;
                        for i in 0..u.len() {
                            s += (u[i] - l[i]).powi(2);
                        }
                        (s.sqrt(), j)
                    })
                    .collect();
                all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                all.into_iter().take(k).map(|(_, j)| j).collect()
            })
            .collect()
    }

    #[test]
    fn matches_brute_force_on_random_descriptors() {
        let mut rng = Rng::new(9, 1);
        let mut vecs = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..3).map(|_| rng.uniform(-50.0, 50.0)).collect()).collect()
        };
        let u = vecs(20);
        let l = vecs(20);
        let to_desc = |v: &Vec<Vec<f64>>| -> Vec<Descriptor> {
            v.iter().map(|x| Descriptor { kind: DescriptorKind::ColorMeanLab, values: x.clone() }).collect()
        };
        let table = match_top_k(&to_desc(&u), &to_desc(&l), 5).unwrap();
        let oracle = brute_force(&u, &l, 5);
        for (row, want) in table.rows.iter().zip(oracle) {
            let got: Vec<usize> = row.iter().map(|c| c.labeled).collect();
            assert_eq!(got, want);
            assert!(row.windows(2).all(|w| w[0].distance <= w[1].distance));
        }
    }

    proptest! {
        #[test]
        fn rows_match_oracle_and_ignore_row_order(
            u in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 1..50),
            l in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 1..50),
            k in 1usize..8,
        ) {
            let ud: Vec<Descriptor> = u.iter().cloned().map(gray).collect();
            let ld: Vec<Descriptor> = l.iter().cloned().map(gray).collect();
            let table = match_top_k(&ud, &ld, k).unwrap();
            let oracle = brute_force(&u, &l, k);
            for (row, want) in table.rows.iter().zip(&oracle) {
                let got: Vec<usize> = row.iter().map(|c| c.labeled).collect();
                prop_assert_eq!(&got, want);
            }
            let rev: Vec<Descriptor> = ud.iter().rev().cloned().collect();
            let rtable = match_top_k(&rev, &ld, k).unwrap();
            for (i, row) in rtable.rows.iter().enumerate() {
                prop_assert_eq!(row, &table.rows[ud.len() - 1 - i]);
            }
        }
    }

    #[test]
    fn sample_match_is_uniform_and_deterministic() {
        let single = MatchTable { rows: vec![vec![Candidate { labeled: 4, distance: 0.0 }]] };
        let mut rng = Rng::new(1, 1);
        assert!((0..100).all(|_| sample_match(&single, 0, &mut rng).unwrap() == 4));

        let row: Vec<Candidate> = (0..5).map(|j| Candidate { labeled: 10 + j, distance: j as f64 }).collect();
        let table = MatchTable { rows: vec![row] };
        let mut counts = [0usize; 5];
        let mut rng = Rng::new(2, 0);
        let n = 100_000;
        for _ in 0..n {
            counts[sample_match(&table, 0, &mut rng).unwrap() - 10] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.2).abs() < 0.01, "{counts:?}");
        }

        let draw = |seed| {
            let mut r = Rng::new(seed, 0);
            (0..20).map(|_| sample_match(&table, 0, &mut r).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
    }

    #[test]
    fn json_lines_round_trip() {
        let t = MatchTable { rows: vec![vec![Candidate { labeled: 2, distance: 1.5 }], vec![]] };
        let text = t.to_json_lines().unwrap();
        assert!(text.starts_with("{\"unlabeled\":0,\"candidates\":[{\"labeled\":2,\"distance\":1.5}]}"));
        assert_eq!(MatchTable::from_json_lines(&text).unwrap(), t);
    }
}
