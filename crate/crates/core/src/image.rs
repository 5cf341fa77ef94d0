//! Image buffers and the two on-disk formats: binary PPM (`P6`, 8-bit) and a
//! raw planar float format.
//!
//! Raw float layout (all integers little-endian):
//!
//! ```text
//! bytes 0..4   magic  b"RFLT"
//! bytes 4..8   u32    rank
//! next 4*rank  u32    extents, outermost first
//! rest         f32    values, row-major
//! ```
//!
//! Images use rank 3 `(C, H, W)`; token dumps use `(views, tokens, dim)`.

use std::io::{Read, Write};
use std::path::Path;

use hires_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RAW_MAGIC: &[u8; 4] = b"RFLT";

/// Per-channel normalisation applied after resizing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    /// CLIP image statistics.
    fn default() -> Self {
        Self {
            mean: [0.481_454_66, 0.457_827_5, 0.408_210_73],
            std: [0.268_629_54, 0.261_302_58, 0.275_777_11],
        }
    }
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0))
            || self.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::Config(format!("invalid normalisation {self:?}")));
        }
        Ok(())
    }

    /// `(x - mean) / std` per channel, in place on a `(3,H,W)` tensor.
    pub fn apply(&self, t: &mut Tensor) -> Result<()> {
        let (c, h, w) = t.chw()?;
        if c != 3 {
            return Err(Error::Usage(format!(
                "normalisation needs 3 channels, got {c}"
            )));
        }
        let plane = h * w;
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            let ch = i / plane;
            *v = (*v - self.mean[ch]) / self.std[ch];
        }
        Ok(())
    }
}

/// Channel-first RGB image with values in `[0, 1]`, plus the normalisation
/// to apply once it has been resized.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pixels: Tensor,
    norm: Normalization,
}

impl ImageBuffer {
    pub fn new(pixels: Tensor, norm: Normalization) -> Result<Self> {
        let (c, _, _) = pixels.chw()?;
        if c != 3 {
            return Err(Error::Usage(format!("image must have 3 channels, got {c}")));
        }
        if !pixels.is_finite() {
            return Err(Error::Usage("image contains non-finite values".into()));
        }
        norm.validate()?;
        Ok(Self { pixels, norm })
    }

    /// Uniform image of the given colour.
    pub fn constant(
        width: usize,
        height: usize,
        rgb: [f64; 3],
        norm: Normalization,
    ) -> Result<Self> {
        let plane = width * height;
        let data = (0..3 * plane).map(|i| rgb[i / plane]).collect();
        Self::new(Tensor::new(vec![3, height, width], data)?, norm)
    }

    pub fn width(&self) -> usize {
        self.pixels.dims()[2]
    }

    pub fn height(&self) -> usize {
        self.pixels.dims()[1]
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut Tensor {
        &mut self.pixels
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn with_normalization(mut self, norm: Normalization) -> Result<Self> {
        norm.validate()?;
        self.norm = norm;
        Ok(self)
    }

    /// Flat index of `(channel, y, x)` into [`ImageBuffer::pixels`].
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height() + y) * self.width() + x
    }
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    parse_ppm(&bytes)
}

/// Parses a binary `P6` file into a `(3,H,W)` tensor scaled to `[0,1]`.
pub fn parse_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(Error::Format(format!(
            "expected P6 magic, got {:?}",
            fields[0]
        )));
    }
    let parse = |s: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PPM header field {s:?}")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!(
            "unsupported PPM geometry {w}x{h} maxval {maxval}"
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(Error::Format(format!(
            "PPM raster truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let raster = &bytes[pos..pos + need];
    let mut data = vec![0.0; need];
    let plane = w * h;
    for (p, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + p] = f64::from(px[c]) / maxval as f64;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data)?)
}

/// Writes a `(3,H,W)` tensor in `[0,1]` as an 8-bit `P6` file.
pub fn write_ppm(path: &Path, pixels: &Tensor) -> Result<()> {
    let (c, h, w) = pixels.chw()?;
    if c != 3 {
        return Err(Error::Usage(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = w * h;
    for p in 0..plane {
        for ch in 0..3 {
            let v = pixels.data()[ch * plane + p].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    atomic_write(path, &out)
}

pub fn encode_raw(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for d in t.dims() {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<Tensor> {
    let mut r = bytes;
    let mut word = [0u8; 4];
    r.read_exact(&mut word)
        .map_err(|_| Error::Format("raw float file too short".into()))?;
    if &word != RAW_MAGIC {
        return Err(Error::Format(format!("bad raw float magic {word:?}")));
    }
    let mut read_u32 = |r: &mut &[u8]| -> Result<u32> {
        r.read_exact(&mut word)
            .map_err(|_| Error::Format("raw float header truncated".into()))?;
        Ok(u32::from_le_bytes(word))
    };
    let rank = read_u32(&mut r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("unsupported raw float rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(&mut r)? as usize);
    }
    let n: usize = dims.iter().product();
    if r.len() != 4 * n {
        return Err(Error::Format(format!(
            "raw float payload has {} bytes, dims {dims:?} need {}",
            r.len(),
            4 * n
        )));
    }
    let data = r
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Ok(Tensor::new(dims, data)?)
}

pub fn read_raw(path: &Path) -> Result<Tensor> {
    decode_raw(&std::fs::read(path)?)
}

pub fn write_raw(path: &Path, t: &Tensor) -> Result<()> {
    atomic_write(path, &encode_raw(t))
}

/// Loads an image by extension: `.ppm` as P6, anything else as raw float.
pub fn load_image(path: &Path, norm: Normalization) -> Result<ImageBuffer> {
    let is_ppm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    let pixels = if is_ppm {
        read_ppm(path)?
    } else {
        read_raw(path)?
    };
    ImageBuffer::new(pixels, norm)
}

/// Writes via a sibling temp file and rename so readers never see a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
