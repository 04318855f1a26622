//! Procedural lesion-segmentation benchmark: tinted value-noise backgrounds
//! with bright blob lesions and exact masks.

use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_manifest, ManifestEntry, SEALED_DIR};
use crate::error::{Error, Result};
use crate::io::{save_mask_png, save_png};
use crate::tensor::{BinaryMask, Image, Rng};

/// RGB multipliers; one is drawn per image.
pub const TINT_PALETTE: [[f64; 3]; 4] = [[1.0, 0.72, 0.50], [0.62, 0.78, 1.0], [0.70, 1.0, 0.72], [0.95, 0.95, 0.95]];

/// Aperture radius as a fraction of the image side.
pub const APERTURE_FRAC: f64 = 0.48;

const NOISE_LO: f64 = 0.1;
const NOISE_HI: f64 = 0.6;
/// Largest relative boundary perturbation of a lesion outline.
const WOBBLE: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub size: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub test: usize,
    pub lesions: [usize; 2],
    pub radius: [f64; 2],
    pub intensity: [f64; 2],
    pub octaves: usize,
    pub channels: usize,
    pub aperture: bool,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            size: 64,
            labeled: 8,
            unlabeled: 64,
            test: 32,
            lesions: [1, 3],
            radius: [3.0, 7.0],
            intensity: [0.25, 0.45],
            octaves: 3,
            channels: 3,
            aperture: false,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || !self.size.is_multiple_of(4) {
            return Err(Error::invalid("size", "must be a multiple of 4 and at least 16"));
        }
        if self.labeled == 0 {
            return Err(Error::invalid("labeled", "need at least one labeled image"));
        }
        if self.lesions[0] == 0 || self.lesions[0] > self.lesions[1] {
            return Err(Error::invalid("lesions", "need 1 <= min <= max"));
        }
        let [r0, r1] = self.radius;
        if !(r0 >= 1.0 && r0 <= r1 && r1 < self.size as f64 / 4.0) {
            return Err(Error::invalid("radius", "need 1 <= min <= max < size/4"));
        }
        let [i0, i1] = self.intensity;
        if !(0.0 < i0 && i0 <= i1 && i1 <= 1.0) {
            return Err(Error::invalid("intensity", "need 0 < min <= max <= 1"));
        }
        if self.octaves == 0 || self.octaves > 6 {
            return Err(Error::invalid("octaves", "must lie in 1..=6"));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::invalid("channels", "must be 1 or 3"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
}

impl Split {
    pub fn prefix(self) -> &'static str {
        match self {
            Split::Labeled => "lab",
            Split::Unlabeled => "unl",
            Split::Test => "tst",
        }
    }

    fn key(self) -> u64 {
        match self {
            Split::Labeled => 1,
            Split::Unlabeled => 2,
            Split::Test => 3,
        }
    }
}

fn in_aperture(cfg: &ToyConfig, y: f64, x: f64) -> bool {
    let c = (cfg.size as f64 - 1.0) / 2.0;
    ((y - c).powi(2) + (x - c).powi(2)).sqrt() <= APERTURE_FRAC * cfg.size as f64
}

/// Multi-octave value noise on `[0, 1]`, smoothstep-interpolated.
fn value_noise(size: usize, octaves: usize, rng: &mut Rng) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    let mut amp_total = 0.0;
    for o in 0..octaves {
        let cells = 4usize << o;
        let amp = 0.5f64.powi(o as i32);
        amp_total += amp;
        let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.uniform(0.0, 1.0)).collect();
        let step = size as f64 / cells as f64;
        for y in 0..size {
            let fy = y as f64 / step;
            let (iy, ty) = ((fy as usize).min(cells - 1), fy - (fy as usize).min(cells - 1) as f64);
            let sy = ty * ty * (3.0 - 2.0 * ty);
            for x in 0..size {
                let fx = x as f64 / step;
                let (ix, tx) = ((fx as usize).min(cells - 1), fx - (fx as usize).min(cells - 1) as f64);
                let sx = tx * tx * (3.0 - 2.0 * tx);
                let l = |yy: usize, xx: usize| lattice[yy * (cells + 1) + xx];
                let top = l(iy, ix) * (1.0 - sx) + l(iy, ix + 1) * sx;
                let bot = l(iy + 1, ix) * (1.0 - sx) + l(iy + 1, ix + 1) * sx;
                out[y * size + x] += amp * (top * (1.0 - sy) + bot * sy);
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= amp_total);
    out
}

/// Returns the background and the index of its tint in [`TINT_PALETTE`].
pub fn gen_background(cfg: &ToyConfig, rng: &mut Rng) -> (Image, usize) {
    let n = cfg.size;
    let noise = value_noise(n, cfg.octaves, rng);
    let tint_idx = rng.below(TINT_PALETTE.len());
    let tint = TINT_PALETTE[tint_idx];
    let mut data = Vec::with_capacity(n * n * cfg.channels);
    for y in 0..n {
        for x in 0..n {
            let v = NOISE_LO + (NOISE_HI - NOISE_LO) * noise[y * n + x];
            let inside = !cfg.aperture || in_aperture(cfg, y as f64, x as f64);
            if cfg.channels == 1 {
                data.push(if inside { v } else { 0.0 });
            } else {
                data.extend(tint.iter().map(|t| if inside { v * t } else { 0.0 }));
            }
        }
    }
    (Image::from_clamped(n, n, cfg.channels, data).expect("sized by construction"), tint_idx)
}

/// A lesion: its mask and the intensity added inside it.
#[derive(Clone, Debug, PartialEq)]
pub struct Lesion {
    pub mask: BinaryMask,
    pub offset: f64,
}

/// Perturbed, rotated ellipse with mean radius drawn from `cfg.radius`.
/// Placed so the whole outline lies inside the image (and aperture).
pub fn gen_lesion(cfg: &ToyConfig, rng: &mut Rng) -> Lesion {
    let r = rng.uniform(cfg.radius[0], cfg.radius[1]);
    let aspect = rng.uniform(0.8, 1.25);
    let angle = rng.uniform(0.0, PI);
    let harmonics: Vec<(f64, f64)> = (2..=4).map(|_| (rng.uniform(0.0, WOBBLE / 3.0), rng.uniform(0.0, TAU))).collect();
    let offset = rng.uniform(cfg.intensity[0], cfg.intensity[1]);
    let reach = r * aspect.max(1.0 / aspect) * (1.0 + WOBBLE) + 1.0;
    let n = cfg.size as f64;
    let (cy, cx) = loop {
        let cy = rng.uniform(reach, n - 1.0 - reach);
        let cx = rng.uniform(reach, n - 1.0 - reach);
        let c = (n - 1.0) / 2.0;
        if !cfg.aperture || ((cy - c).powi(2) + (cx - c).powi(2)).sqrt() + reach <= APERTURE_FRAC * n - 1.0 {
            break (cy, cx);
        }
    };
    let (sin, cos) = angle.sin_cos();
    let (ra, rb) = (r * aspect, r / aspect);
    let mask = BinaryMask::from_fn(cfg.size, cfg.size, |y, x| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let u = (dx * cos + dy * sin) / ra;
        let v = (-dx * sin + dy * cos) / rb;
        let theta = v.atan2(u);
        let rho =
            1.0 + harmonics.iter().enumerate().map(|(k, (a, ph))| a * ((k + 2) as f64 * theta + ph).cos()).sum::<f64>();
        (u * u + v * v).sqrt() <= rho
    });
    Lesion { mask, offset }
}

/// One image of a split, a pure function of `(cfg, split, index)`.
pub fn gen_sample(cfg: &ToyConfig, split: Split, index: usize) -> (Image, BinaryMask) {
    let mut rng = Rng::new(cfg.seed, 0).derive(&[split.key(), index as u64]);
    let (bg, _) = gen_background(cfg, &mut rng);
    let count = cfg.lesions[0] + rng.below(cfg.lesions[1] - cfg.lesions[0] + 1);
    let mut data = bg.into_data();
    let mut mask = BinaryMask::zeros(cfg.size, cfg.size);
    let c = cfg.channels;
    for _ in 0..count {
        let lesion = gen_lesion(cfg, &mut rng);
        for (i, &m) in lesion.mask.data().iter().enumerate() {
            if m == 1 && mask.data()[i] == 0 {
                data[i * c..(i + 1) * c].iter_mut().for_each(|v| *v += lesion.offset);
            }
        }
        mask = mask.or(&lesion.mask).expect("same dims");
    }
    let image = Image::from_clamped(cfg.size, cfg.size, c, data).expect("sized by construction");
    (image, mask)
}

/// Manifest paths written by [`gen_dataset`].
#[derive(Clone, Debug, Serialize)]
pub struct DatasetPaths {
    pub labeled: PathBuf,
    pub unlabeled: PathBuf,
    pub test: PathBuf,
    pub sealed_truth: PathBuf,
}

fn write_split(cfg: &ToyConfig, out: &Path, split: Split, count: usize) -> Result<Vec<(ManifestEntry, BinaryMask)>> {
    let dir = out.join(split.prefix());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let id = format!("{}-{i:04}", split.prefix());
            let (image, mask) = gen_sample(cfg, split, i);
            let image_rel = PathBuf::from(split.prefix()).join(format!("{id}.png"));
            save_png(&image, out.join(&image_rel))?;
            let mask_rel = if split == Split::Unlabeled {
                None
            } else {
                let rel = PathBuf::from(split.prefix()).join(format!("{id}_mask.png"));
                save_mask_png(&mask, out.join(&rel))?;
                Some(rel)
            };
            Ok((ManifestEntry { image: image_rel, mask: mask_rel, id }, mask))
        })
        .collect()
}

/// Writes all three splits under `out`. Unlabeled masks go to the sealed
/// directory, which dataset loading refuses to open.
pub fn gen_dataset(cfg: &ToyConfig, out: &Path) -> Result<DatasetPaths> {
    cfg.validate()?;
    let mut manifests = Vec::new();
    for (split, count) in [(Split::Labeled, cfg.labeled), (Split::Unlabeled, cfg.unlabeled), (Split::Test, cfg.test)] {
        let rows = write_split(cfg, out, split, count)?;
        let path = out.join(format!("{}.jsonl", split.prefix()));
        let entries: Vec<ManifestEntry> = rows.iter().map(|(e, _)| e.clone()).collect();
        write_manifest(&entries, &path)?;
        if split == Split::Unlabeled {
            let sealed = out.join(SEALED_DIR);
            std::fs::create_dir_all(&sealed).map_err(|e| Error::io(&sealed, e))?;
            let truth: Vec<ManifestEntry> = rows
                .iter()
                .map(|(e, mask)| {
                    let rel = PathBuf::from(format!("{}_mask.png", e.id));
                    save_mask_png(mask, sealed.join(&rel))?;
                    Ok(ManifestEntry { image: PathBuf::from("..").join(&e.image), mask: Some(rel), id: e.id.clone() })
                })
                .collect::<Result<_>>()?;
            write_manifest(&truth, &sealed.join("unlabeled_truth.jsonl"))?;
        }
        manifests.push(path);
    }
    let sealed_truth = out.join(SEALED_DIR).join("unlabeled_truth.jsonl");
    let mut it = manifests.into_iter();
    Ok(DatasetPaths {
        labeled: it.next().expect("three splits"),
        unlabeled: it.next().expect("three splits"),
        test: it.next().expect("three splits"),
        sealed_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::image_descriptor;

    #[test]
    fn background_is_reproducible_and_in_range() {
        let cfg = ToyConfig::default();
        let a = gen_background(&cfg, &mut Rng::new(3, 0));
        let b = gen_background(&cfg, &mut Rng::new(3, 0));
        assert_eq!(a, b);
        assert!(a.0.data().iter().all(|v| (0.0..=0.6).contains(v)));
        let gray = ToyConfig { channels: 1, ..cfg };
        let (g, _) = gen_background(&gray, &mut Rng::new(3, 0));
        assert!(g.data().iter().all(|v| (NOISE_LO..=NOISE_HI).contains(v)));
    }

    #[test]
    fn tints_are_separable_in_lab() {
        let cfg = ToyConfig::default();
        let flat = |t: [f64; 3]| Image::new(8, 8, 3, (0..64).flat_map(|_| t.map(|c| 0.35 * c)).collect()).unwrap();
        for i in 0..TINT_PALETTE.len() {
            for j in i + 1..TINT_PALETTE.len() {
                let d = image_descriptor(&flat(TINT_PALETTE[i]))
                    .distance(&image_descriptor(&flat(TINT_PALETTE[j])))
                    .unwrap();
                assert!(d > 2.0, "tints {i} and {j}: {d}");
            }
        }
        // Also on generated textures whose tints differ.
        let mut seen: Vec<(usize, crate::color::Descriptor)> = Vec::new();
        for s in 0..40 {
            let (img, t) = gen_background(&cfg, &mut Rng::new(s, 0));
            let d = image_descriptor(&img);
            for (t2, d2) in &seen {
                if *t2 != t {
                    assert!(d.distance(d2).unwrap() > 2.0);
                }
            }
            seen.push((t, d));
        }
    }

    #[test]
    fn lesion_area_bounded_and_inside() {
        for r in [3.0, 5.0, 7.0] {
            let cfg = ToyConfig { radius: [r, r], aperture: true, ..ToyConfig::default() };
            let mut rng = Rng::new(9, 0);
            let ideal = PI * r * r;
            for _ in 0..1000 {
                let l = gen_lesion(&cfg, &mut rng);
                let area = l.mask.count() as f64;
                assert!(area >= 0.5 * ideal && area <= 1.5 * ideal, "r={r} area={area}");
                let n = cfg.size;
                for y in 0..n {
                    for x in 0..n {
                        if l.mask.get(y, x) {
                            assert!(y > 0 && x > 0 && y < n - 1 && x < n - 1);
                            assert!(in_aperture(&cfg, y as f64, x as f64));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn lesion_is_reproducible() {
        let cfg = ToyConfig::default();
        assert_eq!(gen_lesion(&cfg, &mut Rng::new(1, 2)), gen_lesion(&cfg, &mut Rng::new(1, 2)));
    }

    #[test]
    fn labeled_prevalence_in_range() {
        let cfg = ToyConfig::default();
        let (mut pos, mut tot) = (0, 0);
        for i in 0..cfg.labeled {
            let (_, m) = gen_sample(&cfg, Split::Labeled, i);
            assert!(!m.is_empty());
            pos += m.count();
            tot += m.data().len();
        }
        let prev = pos as f64 / tot as f64;
        assert!((0.005..=0.08).contains(&prev), "{prev}");
    }

    #[test]
    fn lesions_are_brighter() {
        let cfg = ToyConfig::default();
        let (img, m) = gen_sample(&cfg, Split::Test, 0);
        let mean = |on: bool| {
            let v: Vec<f64> = (0..m.data().len())
                .filter(|&i| (m.data()[i] == 1) == on)
                .map(|i| img.data()[3 * i..3 * i + 3].iter().sum::<f64>())
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(true) > mean(false) + 0.3);
    }

    #[test]
    fn config_validation() {
        assert!(ToyConfig::default().validate().is_ok());
        assert!(ToyConfig { radius: [3.0, 16.0], ..ToyConfig::default() }.validate().is_err());
        assert!(ToyConfig { labeled: 0, ..ToyConfig::default() }.validate().is_err());
        assert!(ToyConfig { size: 30, ..ToyConfig::default() }.validate().is_err());
    }
}
