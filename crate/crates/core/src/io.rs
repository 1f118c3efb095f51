//! Binary PGM (P5) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    /// Values in `[0, 1]` mapped linearly to `0..=255`.
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape("pgm", &[values.len()], &[height, width]));
        }
        let pixels = values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Min-max normalized rendering; a constant map renders black.
    pub fn from_values(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let unit: Vec<f64> = values
            .iter()
            .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
            .collect();
        Self::from_unit(width, height, &unit)
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    /// Axis-aligned outline of a normalized `(cx, cy, w, h)` box.
    pub fn draw_box(&mut self, b: [f64; 4], v: u8) {
        let (w, h) = (self.width as f64, self.height as f64);
        let px = |t: f64, n: f64| ((t * n).floor().max(0.0) as usize).min(n as usize - 1);
        let x0 = px(b[0] - b[2] / 2.0, w);
        let x1 = px(b[0] + b[2] / 2.0, w);
        let y0 = px(b[1] - b[3] / 2.0, h);
        let y1 = px(b[1] + b[3] / 2.0, h);
        for x in x0..=x1 {
            self.set(x, y0, v);
            self.set(x, y1, v);
        }
        for y in y0..=y1 {
            self.set(x0, y, v);
            self.set(x1, y, v);
        }
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn upscale(&self, k: usize) -> Self {
        let mut out = Self::new(self.width * k, self.height * k);
        for y in 0..out.height {
            for x in 0..out.width {
                out.set(x, y, self.get(x / k, y / k));
            }
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Contract(format!("invalid PGM: {m}"));
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("magic"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("dimension"));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("only 8-bit images are supported"));
        }
        let data = &bytes[pos + 1..];
        if data.len() != width * height {
            return Err(bad("pixel count"));
        }
        Ok(Self {
            width,
            height,
            pixels: data.to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
