//! Binary PPM (P6) and PGM (P5) with maxval 255.

use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

/// Decoded raster; `channels` is 3 for PPM and 1 for PGM, samples interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format!("expected {what} at byte {start}"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| format!("{what} out of range at byte {start}"))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Raster, String> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err("not a binary PPM/PGM (expected magic P6 or P5)".into()),
    };
    let mut c = Cursor { bytes, pos: 2 };
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("empty raster {width}×{height}"));
    }
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported, need 255"));
    }
    if !c.bytes.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format!("missing whitespace after header at byte {}", c.pos));
    }
    let start = c.pos + 1;
    let need = width * height * channels;
    let body = &bytes[start..];
    if body.len() < need {
        return Err(format!("truncated pixel data: need {need} bytes, found {}", body.len()));
    }
    Ok(Raster {
        width,
        height,
        channels,
        samples: body[..need].to_vec(),
    })
}

pub fn read(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|msg| Error::Image {
        path: path.to_path_buf(),
        msg,
    })
}

pub fn encode(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.samples);
    out
}

pub fn write(path: &Path, r: &Raster) -> Result<()> {
    fs::write(path, encode(r))?;
    Ok(())
}

/// `round(255·v)` after clamping to `[0,1]`.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Planar `[3,H,W]` values in `[0,1]` to an RGB raster.
pub fn rgb_from_planar(values: &[f64], h: usize, w: usize) -> Raster {
    let plane = h * w;
    let samples = (0..plane)
        .flat_map(|p| (0..3).map(move |ch| quantize(values[ch * plane + p])))
        .collect();
    Raster {
        width: w,
        height: h,
        channels: 3,
        samples,
    }
}

pub fn gray(values: &[f64], h: usize, w: usize) -> Raster {
    Raster {
        width: w,
        height: h,
        channels: 1,
        samples: values.iter().map(|&v| quantize(v)).collect(),
    }
}

/// Raster back to planar `[C,H,W]` values in `[0,1]`.
pub fn to_planar(r: &Raster) -> Vec<f64> {
    let plane = r.width * r.height;
    let mut out = vec![0.0; plane * r.channels];
    for p in 0..plane {
        for ch in 0..r.channels {
            out[ch * plane + p] = r.samples[p * r.channels + ch] as f64 / 255.0;
        }
    }
    out
}
