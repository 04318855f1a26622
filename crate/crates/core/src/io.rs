//! PNG and raw tensor (`.cpt`) file IO.
//!
//! `.cpt` layout: magic `CPCT`, version byte `0x01`, ndim byte, `ndim`
//! little-endian `u32` dims, then row-major little-endian `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{BinaryMask, Image};

pub const TENSOR_MAGIC: &[u8; 4] = b"CPCT";
pub const TENSOR_VERSION: u8 = 0x01;

/// Threshold for mask binarization: bytes above this are foreground.
pub const MASK_THRESHOLD: u8 = 127;

struct RawPng {
    width: usize,
    height: usize,
    channels: usize,
    bytes: Vec<u8>,
}

fn read_png(path: &Path) -> Result<RawPng> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, format!("decode: {e}")))?;
    let (color, depth) = {
        let info = reader.info();
        (info.color_type, info.bit_depth)
    };
    if depth != png::BitDepth::Eight {
        return Err(Error::format(path, format!("bit depth {depth:?}, expected 8")));
    }
    let channels = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        png::ColorType::GrayscaleAlpha | png::ColorType::Rgba => {
            return Err(Error::format(path, format!("alpha channel ({color:?}) not accepted")))
        }
        png::ColorType::Indexed => {
            return Err(Error::format(path, "indexed color not accepted"));
        }
    };
    let size = reader.output_buffer_size().ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| Error::format(path, format!("decode: {e}")))?;
    let width = frame.width as usize;
    let height = frame.height as usize;
    let line = frame.line_size;
    let mut bytes = Vec::with_capacity(width * height * channels);
    for row in buf.chunks(line).take(height) {
        bytes.extend_from_slice(&row[..width * channels]);
    }
    Ok(RawPng { width, height, channels, bytes })
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| match e {
        png::EncodingError::IoError(e) => Error::io(path, e),
        other => Error::format(path, format!("encode: {other}")),
    };
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Loads an 8-bit grayscale or RGB PNG; byte `p` becomes `p / 255`.
pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let raw = read_png(path.as_ref())?;
    let data = raw.bytes.iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(raw.height, raw.width, raw.channels, data)
}

/// Loads an 8-bit grayscale PNG as a mask: bytes `> 127` are foreground.
pub fn load_mask_png(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let raw = read_png(path)?;
    if raw.channels != 1 {
        return Err(Error::format(path, "mask must be single-channel grayscale"));
    }
    let data = raw.bytes.iter().map(|&b| u8::from(b > MASK_THRESHOLD)).collect();
    BinaryMask::new(raw.height, raw.width, data)
}

/// Quantizes with round-half-up: `floor(v * 255 + 0.5)`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn save_png(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
    let color = if image.channels() == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb };
    write_png(path.as_ref(), image.width(), image.height(), color, &bytes)
}

/// Writes a mask as 0/255 grayscale.
pub fn save_mask_png(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    write_png(path.as_ref(), mask.width(), mask.height(), png::ColorType::Grayscale, &bytes)
}

/// Writes a single-channel map of values in `[0, 1]` (e.g. probabilities).
pub fn save_gray_png(values: &[f64], height: usize, width: usize, path: impl AsRef<Path>) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::Shape("gray map length does not match dims".into()));
    }
    let bytes: Vec<u8> = values.iter().map(|&v| quantize(v)).collect();
    write_png(path.as_ref(), width, height, png::ColorType::Grayscale, &bytes)
}

pub fn encode_tensor(data: &[f32], dims: &[usize]) -> Result<Vec<u8>> {
    if dims.is_empty() {
        return Err(Error::invalid("dims", "tensor must have at least one dimension"));
    }
    if dims.len() > u8::MAX as usize {
        return Err(Error::invalid("dims", "more than 255 dimensions"));
    }
    let mut count: usize = 1;
    for &d in dims {
        if d > u32::MAX as usize {
            return Err(Error::invalid("dims", format!("dimension {d} exceeds u32")));
        }
        count = count.checked_mul(d).ok_or_else(|| Error::invalid("dims", "element count overflows"))?;
    }
    if count != data.len() {
        return Err(Error::Shape(format!("tensor has {} values but dims {dims:?} need {count}", data.len())));
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { name: "tensor".into(), context: format!("element {i}") });
    }
    let mut out = Vec::with_capacity(6 + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    let truncated = || Error::format(path, "truncated tensor file");
    if bytes.len() < 6 {
        return Err(truncated());
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::format(path, "bad magic, expected CPCT"));
    }
    if bytes[4] != TENSOR_VERSION {
        return Err(Error::format(path, format!("unknown version {}", bytes[4])));
    }
    let ndim = bytes[5] as usize;
    if ndim == 0 {
        return Err(Error::format(path, "zero dimensions"));
    }
    let header = 6 + 4 * ndim;
    if bytes.len() < header {
        return Err(truncated());
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut count: usize = 1;
    for chunk in bytes[6..header].chunks_exact(4) {
        let d = u32::from_le_bytes(chunk.try_into().unwrap()) as usize;
        count = count.checked_mul(d).ok_or_else(|| Error::format(path, "dimension product overflows"))?;
        dims.push(d);
    }
    let body = count.checked_mul(4).ok_or_else(|| Error::format(path, "dimension product overflows"))?;
    if bytes.len() - header < body {
        return Err(truncated());
    }
    if bytes.len() - header > body {
        return Err(Error::format(path, "trailing bytes after tensor data"));
    }
    let data = bytes[header..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((data, dims))
}

pub fn write_tensor(data: &[f32], dims: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(data, dims)?;
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<(Vec<f32>, Vec<usize>)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}
