//! Two-level encoder–decoder segmentation network with hand-written backprop.
//!
//! ```text
//! enc1a, enc1b (3x3, w0) ───────────────────────────── skip ──┐
//!   avgpool 2x2                                              │
//!   enc2a, enc2b (3x3, w1) ──────────── skip ──┐              │
//!     avgpool 2x2                             │              │
//!     mid_a, mid_b (3x3, w2)                  │              │
//!     nearest 2x up, concat ◄─────────────────┘              │
//!   dec2a, dec2b (3x3, w1)                                   │
//!   nearest 2x up, concat ◄──────────────────────────────────┘
//! dec1a, dec1b (3x3, w0)
//! head (1x1, 1 logit)
//! ```
//!
//! 3x3 convolutions are zero-padded and followed by SiLU, whose smoothness
//! keeps finite-difference gradient checks free of kinks. Activations are
//! stored channel-major (`CHW`) in `f64`.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Image, ProbMap, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub in_channels: usize,
    pub widths: [usize; 3],
}

impl Architecture {
    pub fn new(in_channels: usize) -> Self {
        Self { in_channels, widths: [8, 16, 32] }
    }

    fn conv_specs(&self) -> Vec<(&'static str, usize, usize, usize)> {
        let [w0, w1, w2] = self.widths;
        vec![
            ("enc1a", self.in_channels, w0, 3),
            ("enc1b", w0, w0, 3),
            ("enc2a", w0, w1, 3),
            ("enc2b", w1, w1, 3),
            ("mid_a", w1, w2, 3),
            ("mid_b", w2, w2, 3),
            ("dec2a", w2 + w1, w1, 3),
            ("dec2b", w1, w1, 3),
            ("dec1a", w1 + w0, w0, 3),
            ("dec1b", w0, w0, 3),
            ("head", w0, 1, 1),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Names, shapes and offsets of every parameter tensor in the flat buffer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub architecture: Architecture,
    pub entries: Vec<ParamEntry>,
}

impl ParamLayout {
    pub fn new(architecture: Architecture) -> Self {
        let mut entries = Vec::new();
        let mut offset = 0;
        for (name, cin, cout, k) in architecture.conv_specs() {
            let w = ParamEntry { name: format!("{name}.weight"), shape: vec![cout, cin, k, k], offset };
            offset += w.len();
            let b = ParamEntry { name: format!("{name}.bias"), shape: vec![cout], offset };
            offset += b.len();
            entries.push(w);
            entries.push(b);
        }
        Self { architecture, entries }
    }

    pub fn total(&self) -> usize {
        self.entries.last().map_or(0, |e| e.offset + e.len())
    }

    /// The entry containing flat index `i`.
    pub fn entry_at(&self, i: usize) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| (e.offset..e.offset + e.len()).contains(&i))
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Flat parameter buffer plus its layout. Student and teacher share layouts.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    layout: Arc<ParamLayout>,
    data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(architecture: Architecture) -> Self {
        let layout = Arc::new(ParamLayout::new(architecture));
        let data = vec![0.0; layout.total()];
        Self { layout, data }
    }

    /// Uniform in `±sqrt(6 / fan_in)` for kernels, zero biases.
    pub fn init(architecture: Architecture, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(architecture);
        let layout = p.layout.clone();
        for e in layout.entries.iter().filter(|e| e.shape.len() == 4) {
            let fan_in = (e.shape[1] * e.shape[2] * e.shape[3]) as f64;
            let bound = (6.0 / fan_in).sqrt();
            for v in &mut p.data[e.offset..e.offset + e.len()] {
                *v = rng.symmetric(bound);
            }
        }
        p
    }

    pub fn from_data(layout: Arc<ParamLayout>, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.total() {
            return Err(Error::Shape(format!(
                "parameter buffer has {} values, layout needs {}",
                data.len(),
                layout.total()
            )));
        }
        Ok(Self { layout, data })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn architecture(&self) -> Architecture {
        self.layout.architecture
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.layout.entry(name).map(|e| &self.data[e.offset..e.offset + e.len()])
    }

    pub fn same_layout(&self, other: &ModelParams) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    /// Writes the flat buffer as `f32` to `path` and the layout to the
    /// same path with a `.json` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let flat: Vec<f32> = self.data.iter().map(|&v| v as f32).collect();
        crate::io::write_tensor(&flat, &[flat.len()], path)?;
        let index = path.with_extension("json");
        let text = serde_json::to_string_pretty(&*self.layout)?;
        std::fs::write(&index, text).map_err(|e| Error::io(&index, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let index = path.with_extension("json");
        let text = std::fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
        let layout: ParamLayout = serde_json::from_str(&text)?;
        if layout != ParamLayout::new(layout.architecture) {
            return Err(Error::format(&index, "layout does not match its architecture"));
        }
        let (flat, dims) = crate::io::read_tensor(path)?;
        if dims != [layout.total()] {
            return Err(Error::format(path, format!("dims {dims:?}, expected [{}]", layout.total())));
        }
        Self::from_data(Arc::new(layout), flat.into_iter().map(f64::from).collect())
    }

    /// First non-finite value, reported by parameter name.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        check_finite_named(&self.layout, &self.data, what)
    }
}

pub(crate) fn check_finite_named(layout: &ParamLayout, data: &[f64], what: &str) -> Result<()> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        let name = layout.entry_at(i).map_or("?".to_string(), |e| e.name.clone());
        return Err(Error::NonFinite { name, context: format!("{what} (flat index {i}, value {})", data[i]) });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    cin: usize,
    cout: usize,
    k: usize,
    w_off: usize,
    b_off: usize,
}

impl Conv {
    fn weights<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.w_off..self.w_off + self.cout * self.cin * self.k * self.k]
    }
}

/// C = alpha * A * B + beta * C with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || ((m - 1) * rsa + (k - 1) * csa) < a.len());
    assert!(k == 0 || ((k - 1) * rsb + (n - 1) * csb) < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds a zero-padded 3x3 neighbourhood: row `c*9 + ky*3 + kx`, column `y*w + x`.
fn im2col3(input: &[f64], cin: usize, h: usize, w: usize, col: &mut Vec<f64>) {
    let hw = h * w;
    col.clear();
    col.resize(cin * 9 * hw, 0.0);
    for c in 0..cin {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(c * 9 + ky * 3 + kx) * hw..][..hw];
                let (x_lo, x_hi) = (if kx == 0 { 1 } else { 0 }, if kx == 2 { w - 1 } else { w });
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    for x in x_lo..x_hi {
                        dst[x] = src[x + kx - 1];
                    }
                }
            }
        }
    }
}

fn col2im3(col: &[f64], cin: usize, h: usize, w: usize, out: &mut [f64]) {
    let hw = h * w;
    for c in 0..cin {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(c * 9 + ky * 3 + kx) * hw..][..hw];
                let (x_lo, x_hi) = (if kx == 0 { 1 } else { 0 }, if kx == 2 { w - 1 } else { w });
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    for x in x_lo..x_hi {
                        dst[x + kx - 1] += src[x];
                    }
                }
            }
        }
    }
}

fn conv_forward(conv: &Conv, params: &[f64], input: &[f64], h: usize, w: usize, col: &mut Vec<f64>) -> Vec<f64> {
    let hw = h * w;
    let kk = conv.cin * conv.k * conv.k;
    let mut out = vec![0.0; conv.cout * hw];
    for (o, plane) in out.chunks_exact_mut(hw).enumerate() {
        plane.fill(params[conv.b_off + o]);
    }
    let cols: &[f64] = if conv.k == 3 {
        im2col3(input, conv.cin, h, w, col);
        col
    } else {
        input
    };
    gemm(conv.cout, kk, hw, conv.weights(params), (kk, 1), cols, (hw, 1), 1.0, &mut out);
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when asked.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    conv: &Conv,
    params: &[f64],
    input: &[f64],
    dout: &[f64],
    h: usize,
    w: usize,
    grads: &mut [f64],
    col: &mut Vec<f64>,
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    let hw = h * w;
    let kk = conv.cin * conv.k * conv.k;
    for (o, plane) in dout.chunks_exact(hw).enumerate() {
        grads[conv.b_off + o] += plane.iter().sum::<f64>();
    }
    let cols: &[f64] = if conv.k == 3 {
        im2col3(input, conv.cin, h, w, col);
        col
    } else {
        input
    };
    // dW (cout x kk) += dout (cout x hw) * cols^T (hw x kk)
    gemm(conv.cout, hw, kk, dout, (hw, 1), cols, (1, hw), 1.0, &mut grads[conv.w_off..conv.w_off + conv.cout * kk]);
    if !want_input_grad {
        return None;
    }
    // dcols (kk x hw) = W^T (kk x cout) * dout (cout x hw)
    let mut dcol = vec![0.0; kk * hw];
    gemm(kk, conv.cout, hw, conv.weights(params), (1, kk), dout, (hw, 1), 0.0, &mut dcol);
    if conv.k == 3 {
        let mut dx = vec![0.0; conv.cin * hw];
        col2im3(&dcol, conv.cin, h, w, &mut dx);
        Some(dx)
    } else {
        Some(dcol)
    }
}

fn silu(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| v * crate::tensor::sigmoid(v)).collect()
}

fn silu_backward(z: &[f64], da: &[f64]) -> Vec<f64> {
    z.iter()
        .zip(da)
        .map(|(&v, &g)| {
            let s = crate::tensor::sigmoid(v);
            g * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

fn avgpool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let base = ch * h * w;
                let s = x[base + 2 * y * w + 2 * xx]
                    + x[base + 2 * y * w + 2 * xx + 1]
                    + x[base + (2 * y + 1) * w + 2 * xx]
                    + x[base + (2 * y + 1) * w + 2 * xx + 1];
                out[ch * oh * ow + y * ow + xx] = 0.25 * s;
            }
        }
    }
    out
}

fn avgpool2_backward(dout: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                dx[ch * h * w + y * w + xx] += 0.25 * dout[ch * oh * ow + (y / 2) * ow + xx / 2];
            }
        }
    }
}

fn upsample2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[ch * oh * ow + y * ow + xx] = x[ch * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// `h, w` are the low-resolution dims.
fn upsample2_backward(dout: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                dx[ch * h * w + (y / 2) * w + xx / 2] += dout[ch * oh * ow + y * ow + xx];
            }
        }
    }
    dx
}

/// Activations retained by [`SegNet::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ActivationCache {
    height: usize,
    width: usize,
    /// Input of every conv, in layer order.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of every 3x3 conv.
    pre: Vec<Vec<f64>>,
}

impl ActivationCache {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

/// Output of a forward pass: per-pixel logits in row-major order.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub cache: ActivationCache,
}

impl Forward {
    pub fn probs(&self) -> ProbMap {
        ProbMap::from_logits(self.cache.height, self.cache.width, &self.logits).expect("dims from forward")
    }
}

#[derive(Clone, Debug)]
pub struct SegNet {
    architecture: Architecture,
    convs: Vec<Conv>,
}

const ENC1A: usize = 0;
const ENC1B: usize = 1;
const ENC2A: usize = 2;
const ENC2B: usize = 3;
const MID_A: usize = 4;
const MID_B: usize = 5;
const DEC2A: usize = 6;
const DEC2B: usize = 7;
const DEC1A: usize = 8;
const DEC1B: usize = 9;
const HEAD: usize = 10;

impl SegNet {
    pub fn new(architecture: Architecture) -> Self {
        let layout = ParamLayout::new(architecture);
        let convs = architecture
            .conv_specs()
            .iter()
            .enumerate()
            .map(|(i, &(_, cin, cout, k))| Conv {
                cin,
                cout,
                k,
                w_off: layout.entries[2 * i].offset,
                b_off: layout.entries[2 * i + 1].offset,
            })
            .collect();
        Self { architecture, convs }
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    fn check_params(&self, params: &ModelParams) -> Result<()> {
        if params.architecture() != self.architecture {
            return Err(Error::Shape("parameters were built for a different architecture".into()));
        }
        Ok(())
    }

    pub fn forward(&self, params: &ModelParams, image: &Image) -> Result<Forward> {
        self.check_params(params)?;
        let (h, w, c) = (image.height(), image.width(), image.channels());
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("image {h}x{w} must have non-zero sides divisible by 4")));
        }
        if c != self.architecture.in_channels {
            return Err(Error::Shape(format!(
                "image has {c} channels, network expects {}",
                self.architecture.in_channels
            )));
        }
        let p = params.data();
        let [w0, w1, w2] = self.architecture.widths;
        let (h2, wd2, h4, wd4) = (h / 2, w / 2, h / 4, w / 4);
        let mut col = Vec::new();
        let mut inputs = Vec::with_capacity(11);
        let mut pre = Vec::with_capacity(10);

        // HWC -> CHW
        let hw = h * w;
        let mut x0 = vec![0.0; c * hw];
        for (i, px) in image.data().chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                x0[ch * hw + i] = v;
            }
        }

        let mut layer = |idx: usize, input: Vec<f64>, lh: usize, lw: usize, inputs: &mut Vec<Vec<f64>>| {
            let z = conv_forward(&self.convs[idx], p, &input, lh, lw, &mut col);
            inputs.push(input);
            if idx == HEAD {
                return z;
            }
            let a = silu(&z);
            pre.push(z);
            a
        };

        let a1 = layer(ENC1A, x0, h, w, &mut inputs);
        let a2 = layer(ENC1B, a1, h, w, &mut inputs);
        let p1 = avgpool2(&a2, w0, h, w);
        let a3 = layer(ENC2A, p1, h2, wd2, &mut inputs);
        let a4 = layer(ENC2B, a3, h2, wd2, &mut inputs);
        let p2 = avgpool2(&a4, w1, h2, wd2);
        let a5 = layer(MID_A, p2, h4, wd4, &mut inputs);
        let a6 = layer(MID_B, a5, h4, wd4, &mut inputs);
        let mut c2 = upsample2(&a6, w2, h4, wd4);
        c2.extend_from_slice(&a4);
        let a7 = layer(DEC2A, c2, h2, wd2, &mut inputs);
        let a8 = layer(DEC2B, a7, h2, wd2, &mut inputs);
        let mut c1 = upsample2(&a8, w1, h2, wd2);
        c1.extend_from_slice(&a2);
        let a9 = layer(DEC1A, c1, h, w, &mut inputs);
        let a10 = layer(DEC1B, a9, h, w, &mut inputs);
        let logits = layer(HEAD, a10, h, w, &mut inputs);

        Ok(Forward { logits, cache: ActivationCache { height: h, width: w, inputs, pre } })
    }

    pub fn predict(&self, params: &ModelParams, image: &Image) -> Result<ProbMap> {
        Ok(self.forward(params, image)?.probs())
    }

    /// Gradients of a scalar loss w.r.t. every parameter, given
    /// `d loss / d logit` per pixel. Added into `grads`.
    pub fn backward_into(
        &self,
        params: &ModelParams,
        cache: &ActivationCache,
        grad_logits: &[f64],
        grads: &mut [f64],
    ) -> Result<()> {
        self.check_params(params)?;
        let (h, w) = (cache.height, cache.width);
        if grad_logits.len() != h * w {
            return Err(Error::Shape(format!(
                "logit gradient has {} entries, forward produced {}",
                grad_logits.len(),
                h * w
            )));
        }
        if grads.len() != params.len() {
            return Err(Error::Shape("gradient buffer does not match parameters".into()));
        }
        let p = params.data();
        let [w0, w1, w2] = self.architecture.widths;
        let (h2, wd2, h4, wd4) = (h / 2, w / 2, h / 4, w / 4);
        let mut col = Vec::new();
        let inputs = &cache.inputs;
        let pre = &cache.pre;

        let mut back = |idx: usize, dout: &[f64], lh: usize, lw: usize, want: bool| {
            conv_backward(&self.convs[idx], p, &inputs[idx], dout, lh, lw, grads, &mut col, want)
        };

        let da10 = back(HEAD, grad_logits, h, w, true).unwrap();
        let da9 = back(DEC1B, &silu_backward(&pre[DEC1B], &da10), h, w, true).unwrap();
        let dc1 = back(DEC1A, &silu_backward(&pre[DEC1A], &da9), h, w, true).unwrap();
        let (du1, da2_skip) = dc1.split_at(w1 * h * w);
        let da8 = upsample2_backward(du1, w1, h2, wd2);
        let da7 = back(DEC2B, &silu_backward(&pre[DEC2B], &da8), h2, wd2, true).unwrap();
        let dc2 = back(DEC2A, &silu_backward(&pre[DEC2A], &da7), h2, wd2, true).unwrap();
        let (du2, da4_skip) = dc2.split_at(w2 * h2 * wd2);
        let da6 = upsample2_backward(du2, w2, h4, wd4);
        let da5 = back(MID_B, &silu_backward(&pre[MID_B], &da6), h4, wd4, true).unwrap();
        let dp2 = back(MID_A, &silu_backward(&pre[MID_A], &da5), h4, wd4, true).unwrap();
        let mut da4 = da4_skip.to_vec();
        avgpool2_backward(&dp2, w1, h2, wd2, &mut da4);
        let da3 = back(ENC2B, &silu_backward(&pre[ENC2B], &da4), h2, wd2, true).unwrap();
        let dp1 = back(ENC2A, &silu_backward(&pre[ENC2A], &da3), h2, wd2, true).unwrap();
        let mut da2 = da2_skip.to_vec();
        avgpool2_backward(&dp1, w0, h, w, &mut da2);
        let da1 = back(ENC1B, &silu_backward(&pre[ENC1B], &da2), h, w, true).unwrap();
        back(ENC1A, &silu_backward(&pre[ENC1A], &da1), h, w, false);
        Ok(())
    }

    pub fn backward(&self, params: &ModelParams, cache: &ActivationCache, grad_logits: &[f64]) -> Result<Vec<f64>> {
        let mut grads = vec![0.0; params.len()];
        self.backward_into(params, cache, grad_logits, &mut grads)?;
        Ok(grads)
    }
}
