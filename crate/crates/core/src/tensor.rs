//! Array types shared by every stage of the pipeline, plus the seeded RNG.
//!
//! Images are stored row-major with interleaved channels (`HWC`), values in
//! `[0, 1]`. Masks are `0`/`1` bytes. Everything on the loss and gradient
//! path is `f64`.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Clamp applied to probabilities before they enter a logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid("channels", format!("must be 1 or 3, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!("image data length {} != {height}x{width}x{channels}", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("image", format!("value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        assert!((0.0..=1.0).contains(&value), "value outside [0, 1]");
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    /// Builds an image from arbitrary values, clamping each into `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, channels: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Mean over channels at every pixel.
    pub fn channel_mean(&self) -> Vec<f64> {
        self.data.chunks_exact(self.channels).map(|px| px.iter().sum::<f64>() / self.channels as f64).collect()
    }

    pub fn same_dims(&self, mask: &BinaryMask) -> bool {
        self.height == mask.height() && self.width == mask.width()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("mask data length {} != {height}x{width}", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask", "values must be 0 or 1"));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![1; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn same_dims(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Pixelwise AND.
    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if !self.same_dims(other) {
            return Err(Error::Shape("mask AND of different dims".into()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a & b).collect();
        Ok(BinaryMask { height: self.height, width: self.width, data })
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if !self.same_dims(other) {
            return Err(Error::Shape("mask OR of different dims".into()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect();
        Ok(BinaryMask { height: self.height, width: self.width, data })
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Per-pixel foreground probabilities, strictly inside `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("probability map length {} != {height}x{width}", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::invalid("probabilities", format!("value {v} not in (0, 1)")));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_logits(height: usize, width: usize, logits: &[f64]) -> Result<Self> {
        let data = logits.iter().map(|&z| sigmoid(z).clamp(PROB_EPS, 1.0 - PROB_EPS)).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_dims(&self, mask: &BinaryMask) -> bool {
        self.height == mask.height() && self.width == mask.width()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Sum in a fixed binary-tree order, so the result does not depend on how
/// the caller chunked or parallelized the work that produced `values`.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 8;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Seeded generator with independent streams.
///
/// `(seed, stream)` fully determines the output sequence; ChaCha8 is
/// platform-independent.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A generator on a new stream keyed by `keys`; independent of how many
    /// draws were already taken from `self`.
    pub fn derive(&self, keys: &[u64]) -> Rng {
        let mut h = splitmix(self.stream ^ 0x5851_f42d_4c95_7f2d);
        for &k in keys {
            h = splitmix(h ^ splitmix(k.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        }
        Rng::new(self.seed, h)
    }

    /// Uniform in `[lo, hi)`; returns `lo` when the interval is empty.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        lo + (hi - lo) * u
    }

    /// Symmetric draw in `[-r, r)`.
    pub fn symmetric(&mut self, r: f64) -> f64 {
        self.uniform(-r, r)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform index in `0..n`. Panics when `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Lemire's multiply-shift with rejection.
        let n = n as u64;
        loop {
            let m = (self.inner.next_u64() as u128) * (n as u128);
            let low = m as u64;
            if low >= n.wrapping_neg() % n {
                return (m >> 64) as usize;
            }
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
