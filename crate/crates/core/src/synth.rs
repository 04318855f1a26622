//! Partially labeled sample synthesis.
//!
//! A labeled foreground is cut out with its mask, jittered geometrically and
//! photometrically, then alpha-blended onto a (noised) unlabeled background.
//! Pastes that land on the background's out-of-bound region are clipped away.
//! The synthetic mask stays binary even when the alpha is feathered.

use serde::{Deserialize, Serialize};

use crate::color::MatchTable;
use crate::error::{Error, Result};
use crate::tensor::{BinaryMask, Image, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Maximum absolute rotation, degrees.
    pub rotation_deg: f64,
    /// Maximum absolute translation as a fraction of the image side.
    pub translation_frac: f64,
    pub scale_range: [f64; 2],
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub feather_sigma: f64,
    pub noise_sigma: f64,
    pub background_blur_sigma: f64,
    /// Out-of-bound threshold on channel-mean intensity.
    pub oob_threshold: f64,
    pub mask_blur: bool,
    pub background_noise: bool,
    pub background_blur: bool,
    pub color_matching: bool,
    pub top_k: usize,
    pub max_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 15.0,
            translation_frac: 0.10,
            scale_range: [0.9, 1.1],
            brightness: 0.10,
            contrast: 0.10,
            saturation: 0.10,
            feather_sigma: 1.5,
            noise_sigma: 0.01,
            background_blur_sigma: 1.0,
            oob_threshold: 10.0 / 255.0,
            mask_blur: true,
            background_noise: true,
            background_blur: false,
            color_matching: true,
            top_k: crate::color::DEFAULT_TOP_K,
            max_retries: 5,
        }
    }
}

impl SynthConfig {
    /// Every jitter range zero: the foreground is pasted unchanged.
    pub fn without_jitter(mut self) -> Self {
        self.rotation_deg = 0.0;
        self.translation_frac = 0.0;
        self.scale_range = [1.0, 1.0];
        self.brightness = 0.0;
        self.contrast = 0.0;
        self.saturation = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("rotation_deg", self.rotation_deg),
            ("translation_frac", self.translation_frac),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("feather_sigma", self.feather_sigma),
            ("noise_sigma", self.noise_sigma),
            ("background_blur_sigma", self.background_blur_sigma),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid("scale_range", format!("need 0 < lo <= hi, got [{lo}, {hi}]")));
        }
        if !(0.0..1.0).contains(&self.oob_threshold) {
            return Err(Error::invalid("oob_threshold", "must be in [0, 1)"));
        }
        if self.brightness >= 1.0 || self.contrast >= 1.0 || self.saturation >= 1.0 {
            return Err(Error::invalid("brightness/contrast/saturation", "jitter fraction must be < 1"));
        }
        if self.top_k == 0 {
            return Err(Error::invalid("top_k", "must be at least 1"));
        }
        Ok(())
    }
}

/// A labeled object cut out of its source image.
#[derive(Clone, Debug, PartialEq)]
pub struct Foreground {
    /// Source pixels on the mask, zero elsewhere.
    pub patch: Image,
    pub mask: BinaryMask,
    /// Index of the labeled sample the object came from.
    pub source: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub unlabeled: usize,
    pub labeled: usize,
    pub seed: u64,
    pub stream: u64,
}

/// `(x, x̃, ỹ)`: clean unlabeled image, blended image, synthetic mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub original: Image,
    pub blended: Image,
    pub mask: BinaryMask,
    pub provenance: Provenance,
}

pub fn extract_foreground(image: &Image, mask: &BinaryMask, source: usize) -> Result<Foreground> {
    if !image.same_dims(mask) {
        return Err(Error::Shape("image and mask dims differ".into()));
    }
    if mask.is_empty() {
        return Err(Error::NoForeground("labeled mask is empty"));
    }
    let c = image.channels();
    let mut data = image.data().to_vec();
    for (px, &m) in data.chunks_exact_mut(c).zip(mask.data()) {
        if m == 0 {
            px.fill(0.0);
        }
    }
    Ok(Foreground { patch: Image::new(image.height(), image.width(), c, data)?, mask: mask.clone(), source })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometricParams {
    pub angle_deg: f64,
    pub scale: f64,
    /// Translation in pixels along x (columns) and y (rows).
    pub dx: f64,
    pub dy: f64,
}

impl GeometricParams {
    pub const IDENTITY: GeometricParams = GeometricParams { angle_deg: 0.0, scale: 1.0, dx: 0.0, dy: 0.0 };

    pub fn sample(cfg: &SynthConfig, height: usize, width: usize, rng: &mut Rng) -> Self {
        Self {
            angle_deg: rng.symmetric(cfg.rotation_deg),
            scale: rng.uniform(cfg.scale_range[0], cfg.scale_range[1]),
            dx: rng.symmetric(cfg.translation_frac) * width as f64,
            dy: rng.symmetric(cfg.translation_frac) * height as f64,
        }
    }
}

fn mask_centroid(mask: &BinaryMask) -> (f64, f64) {
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                sy += y as f64;
                sx += x as f64;
                n += 1.0;
            }
        }
    }
    (sy / n, sx / n)
}

/// Rotates and scales about the mask centroid, then translates.
///
/// Every output pixel is inverse-mapped into the source and sampled
/// bilinearly. The mask is re-binarized at 0.5; patch values are
/// mask-weighted so object edges do not pick up the zero fill outside the
/// mask. Content mapped off the canvas is dropped.
pub fn apply_geometric(fg: &Foreground, p: GeometricParams) -> Result<Foreground> {
    if p == GeometricParams::IDENTITY {
        return Ok(fg.clone());
    }
    if fg.mask.is_empty() {
        return Err(Error::NoForeground("foreground mask is empty"));
    }
    let (h, w, c) = (fg.patch.height(), fg.patch.width(), fg.patch.channels());
    let (cy, cx) = mask_centroid(&fg.mask);
    let (sin, cos) = p.angle_deg.to_radians().sin_cos();
    // Inverse map q = A p + b, with A = R(-angle) / scale.
    let a = [[cos / p.scale, sin / p.scale], [-sin / p.scale, cos / p.scale]];
    let apply = |v: [f64; 2]| [a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]];
    let ac = apply([cy, cx]);
    let at = apply([p.dy, p.dx]);
    let b = [(cy - ac[0]) - at[0], (cx - ac[1]) - at[1]];

    let mask_f = fg.mask.as_f64();
    let mut patch = vec![0.0; h * w * c];
    let mut mask = BinaryMask::zeros(h, w);
    let mut acc = vec![0.0; c];
    for y in 0..h {
        for x in 0..w {
            let q = apply([y as f64, x as f64]);
            let (qy, qx) = (q[0] + b[0], q[1] + b[1]);
            let (y0, x0) = (qy.floor(), qx.floor());
            let (fy, fx) = (qy - y0, qx - x0);
            let mut m = 0.0;
            acc.fill(0.0);
            for (oy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                for (ox, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                    let (sy, sx) = (y0 + oy, x0 + ox);
                    let wgt = wy * wx;
                    if wgt == 0.0 || sy < 0.0 || sx < 0.0 || sy >= h as f64 || sx >= w as f64 {
                        continue;
                    }
                    let (sy, sx) = (sy as usize, sx as usize);
                    let mv = mask_f[sy * w + sx];
                    if mv == 0.0 {
                        continue;
                    }
                    m += wgt * mv;
                    for (ch, a) in acc.iter_mut().enumerate() {
                        *a += wgt * fg.patch.get(sy, sx, ch);
                    }
                }
            }
            if m >= 0.5 {
                mask.set(y, x, true);
                let out = &mut patch[(y * w + x) * c..(y * w + x + 1) * c];
                for (o, a) in out.iter_mut().zip(&acc) {
                    *o = (a / m).clamp(0.0, 1.0);
                }
            }
        }
    }
    if mask.is_empty() {
        return Err(Error::NoForeground("geometric jitter moved the object off the canvas"));
    }
    Ok(Foreground { patch: Image::new(h, w, c, patch)?, mask, source: fg.source })
}

pub fn geometric_jitter(fg: &Foreground, cfg: &SynthConfig, rng: &mut Rng) -> Result<Foreground> {
    let p = GeometricParams::sample(cfg, fg.patch.height(), fg.patch.width(), rng);
    apply_geometric(fg, p)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl ColorParams {
    pub const IDENTITY: ColorParams = ColorParams { brightness: 1.0, contrast: 1.0, saturation: 1.0 };

    pub fn sample(cfg: &SynthConfig, rng: &mut Rng) -> Self {
        Self {
            brightness: 1.0 + rng.symmetric(cfg.brightness),
            contrast: 1.0 + rng.symmetric(cfg.contrast),
            saturation: 1.0 + rng.symmetric(cfg.saturation),
        }
    }
}

fn luma(px: &[f64]) -> f64 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

/// Brightness (scale), contrast (about the on-mask mean), then saturation
/// (blend toward per-pixel luma, RGB only). Off-mask pixels stay zero.
pub fn apply_color(fg: &Foreground, p: ColorParams) -> Result<Foreground> {
    if p == ColorParams::IDENTITY {
        return Ok(fg.clone());
    }
    let c = fg.patch.channels();
    let mut data = fg.patch.data().to_vec();
    let on: Vec<bool> = fg.mask.data().iter().map(|&m| m == 1).collect();

    for (px, _) in data.chunks_exact_mut(c).zip(&on).filter(|(_, &m)| m) {
        for v in px.iter_mut() {
            *v *= p.brightness;
        }
    }
    let (sum, n) = data
        .chunks_exact(c)
        .zip(&on)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (px, _)| (s + px.iter().sum::<f64>(), n + c));
    let mean = if n > 0 { sum / n as f64 } else { 0.0 };
    for (px, _) in data.chunks_exact_mut(c).zip(&on).filter(|(_, &m)| m) {
        for v in px.iter_mut() {
            *v = (*v - mean) * p.contrast + mean;
        }
        if c == 3 {
            let l = luma(px);
            for v in px.iter_mut() {
                *v = l + p.saturation * (*v - l);
            }
        }
        for v in px.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(Foreground {
        patch: Image::new(fg.patch.height(), fg.patch.width(), c, data)?,
        mask: fg.mask.clone(),
        source: fg.source,
    })
}

pub fn color_jitter(fg: &Foreground, cfg: &SynthConfig, rng: &mut Rng) -> Result<Foreground> {
    apply_color(fg, ColorParams::sample(cfg, rng))
}

/// Normalized 1-D Gaussian taps, radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("sigma", format!("must be > 0, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Separable Gaussian blur of an `h x w x c` array with replicate padding.
pub fn gaussian_blur(data: &[f64], h: usize, w: usize, c: usize, sigma: f64) -> Result<Vec<f64>> {
    let k = gaussian_kernel(sigma)?;
    let r = (k.len() / 2) as i64;
    let clampi = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut s = 0.0;
                for (t, wt) in k.iter().enumerate() {
                    let sx = clampi(x as i64 + t as i64 - r, w);
                    s += wt * data[(y * w + sx) * c + ch];
                }
                tmp[(y * w + x) * c + ch] = s;
            }
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut s = 0.0;
                for (t, wt) in k.iter().enumerate() {
                    let sy = clampi(y as i64 + t as i64 - r, h);
                    s += wt * tmp[(sy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = s;
            }
        }
    }
    Ok(out)
}

/// Alpha map for compositing: the Gaussian-blurred mask, or the mask itself
/// when `sigma` is zero.
pub fn feather_mask(mask: &BinaryMask, sigma: f64) -> Result<Vec<f64>> {
    let m = mask.as_f64();
    if sigma == 0.0 {
        return Ok(m);
    }
    let mut alpha = gaussian_blur(&m, mask.height(), mask.width(), 1, sigma)?;
    for a in &mut alpha {
        *a = a.clamp(0.0, 1.0);
    }
    Ok(alpha)
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every value and clamps to `[0, 1]`.
pub fn add_background_noise(image: &Image, sigma: f64, rng: &mut Rng) -> Result<Image> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid("noise_sigma", "must be >= 0"));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let data = image.data().iter().map(|v| v + sigma * rng.normal()).collect();
    Image::from_clamped(image.height(), image.width(), image.channels(), data)
}

pub fn blur_image(image: &Image, sigma: f64) -> Result<Image> {
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let data = gaussian_blur(image.data(), image.height(), image.width(), image.channels(), sigma)?;
    Image::from_clamped(image.height(), image.width(), image.channels(), data)
}

/// Pixels whose channel-mean intensity exceeds `tau`.
pub fn valid_region_mask(image: &Image, tau: f64) -> BinaryMask {
    let means = image.channel_mean();
    BinaryMask::new(image.height(), image.width(), means.iter().map(|&m| u8::from(m > tau)).collect())
        .expect("dims come from the image")
}

/// Composites `fg` over `background` with alpha restricted to `valid`.
///
/// Returns the blended image and the clipped synthetic mask; an empty
/// clipped mask is a [`Error::NoForeground`] rejection.
pub fn paste(background: &Image, fg: &Foreground, alpha: &[f64], valid: &BinaryMask) -> Result<(Image, BinaryMask)> {
    let (h, w, c) = (background.height(), background.width(), background.channels());
    if fg.patch.height() != h || fg.patch.width() != w || fg.patch.channels() != c {
        return Err(Error::Shape("foreground and background dims differ".into()));
    }
    if alpha.len() != h * w || !background.same_dims(valid) {
        return Err(Error::Shape("alpha or valid mask dims differ from background".into()));
    }
    let mut data = Vec::with_capacity(h * w * c);
    for i in 0..h * w {
        let a = alpha[i] * valid.data()[i] as f64;
        for ch in 0..c {
            let p = fg.patch.data()[i * c + ch];
            let b = background.data()[i * c + ch];
            data.push(a * p + (1.0 - a) * b);
        }
    }
    let mask = fg.mask.and(valid)?;
    if mask.is_empty() {
        return Err(Error::NoForeground("paste fell entirely outside the valid region"));
    }
    Ok((Image::from_clamped(h, w, c, data)?, mask))
}

/// Full synthesis pipeline for one (unlabeled, labeled) pair.
///
/// extract -> geometric jitter -> color jitter -> feather -> background
/// blur/noise -> out-of-bound clipping -> paste. `original` keeps the clean
/// unlabeled image.
pub fn synthesize(
    unlabeled: &Image,
    labeled: (&Image, &BinaryMask),
    source: (usize, usize),
    cfg: &SynthConfig,
    rng: &mut Rng,
) -> Result<SyntheticSample> {
    let (image, mask) = labeled;
    if image.height() != unlabeled.height()
        || image.width() != unlabeled.width()
        || image.channels() != unlabeled.channels()
    {
        return Err(Error::Shape(format!(
            "labeled {}x{}x{} vs unlabeled {}x{}x{}",
            image.height(),
            image.width(),
            image.channels(),
            unlabeled.height(),
            unlabeled.width(),
            unlabeled.channels()
        )));
    }
    let provenance = Provenance { unlabeled: source.0, labeled: source.1, seed: rng.seed(), stream: rng.stream() };
    let fg = extract_foreground(image, mask, source.1)?;
    let fg = geometric_jitter(&fg, cfg, rng)?;
    let fg = color_jitter(&fg, cfg, rng)?;

    // Feathering softens the object's own rim; the alpha never reaches past
    // the mask, where the patch holds no content.
    let alpha = if cfg.mask_blur && cfg.feather_sigma > 0.0 {
        let mut a = feather_mask(&fg.mask, cfg.feather_sigma)?;
        for (a, &m) in a.iter_mut().zip(fg.mask.data()) {
            *a *= m as f64;
        }
        a
    } else {
        fg.mask.as_f64()
    };

    let mut background = unlabeled.clone();
    if cfg.background_blur {
        background = blur_image(&background, cfg.background_blur_sigma)?;
    }
    if cfg.background_noise {
        background = add_background_noise(&background, cfg.noise_sigma, rng)?;
    }
    let valid = valid_region_mask(unlabeled, cfg.oob_threshold);
    let (blended, mask) = paste(&background, &fg, &alpha, &valid)?;
    Ok(SyntheticSample { original: unlabeled.clone(), blended, mask, provenance })
}

/// How an unlabeled image picks its labeled partner.
#[derive(Clone, Copy, Debug)]
pub enum Matcher<'a> {
    /// Uniform among the top-k candidates of the unlabeled image's row.
    TopK(&'a MatchTable),
    /// Uniform over all `n` labeled samples.
    Random(usize),
}

impl Matcher<'_> {
    pub fn pick(&self, unlabeled: usize, rng: &mut Rng) -> Result<usize> {
        match *self {
            Matcher::TopK(table) => crate::color::sample_match(table, unlabeled, rng),
            Matcher::Random(0) => Err(Error::invalid("labeled", "empty labeled set")),
            Matcher::Random(n) => Ok(rng.below(n)),
        }
    }
}

/// Synthesizes a sample for one unlabeled image, drawing a fresh match and
/// fresh jitter after each rejection. `Ok(None)` once `max_retries` extra
/// attempts have all been rejected.
pub fn synthesize_with_retries(
    unlabeled_index: usize,
    unlabeled: &Image,
    labeled: &[(&Image, &BinaryMask)],
    matcher: Matcher<'_>,
    cfg: &SynthConfig,
    rng: &Rng,
) -> Result<Option<SyntheticSample>> {
    for attempt in 0..=cfg.max_retries as u64 {
        let mut r = rng.derive(&[attempt]);
        let j = matcher.pick(unlabeled_index, &mut r)?;
        let (img, mask) =
            *labeled.get(j).ok_or_else(|| Error::invalid("match", format!("labeled index {j} out of range")))?;
        match synthesize(unlabeled, (img, mask), (unlabeled_index, j), cfg, &mut r) {
            Ok(s) => return Ok(Some(s)),
            Err(Error::NoForeground(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}
