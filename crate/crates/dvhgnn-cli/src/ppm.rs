//! Binary P6 PPM, the only image format the tool speaks.
//!
//! The header is ASCII ("P6", width, height, maxval) with `#` comments
//! allowed between tokens; pixels follow as raw 8-bit RGB triplets. Only
//! maxval 255 is accepted. Anything else is a conversion job for
//! ImageMagick (`convert in.png -depth 8 out.ppm`), not for this crate.

use std::path::Path;

use dvhgnn_core::{Error, Result, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PpmImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triplets, `3 * width * height` bytes.
    pub pixels: Vec<u8>,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { what: "ppm image", line, msg: msg.into() }
}

impl PpmImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        let want = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| Error::Config("image dimensions overflow".into()))?;
        if width == 0 || height == 0 || pixels.len() != want {
            return Err(Error::Config(format!(
                "pixel buffer holds {} bytes, {}x{} needs {}",
                pixels.len(),
                width,
                height,
                want
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut line = 1usize;

        let token = |pos: &mut usize, line: &mut usize| -> Result<String> {
            loop {
                match bytes.get(*pos) {
                    Some(b'#') => {
                        while let Some(&b) = bytes.get(*pos) {
                            *pos += 1;
                            if b == b'\n' {
                                *line += 1;
                                break;
                            }
                        }
                    }
                    Some(&b) if b.is_ascii_whitespace() => {
                        *pos += 1;
                        if b == b'\n' {
                            *line += 1;
                        }
                    }
                    Some(_) => break,
                    None => return Err(parse_err(*line, "header ended early")),
                }
            }
            let start = *pos;
            while let Some(&b) = bytes.get(*pos) {
                if b.is_ascii_whitespace() {
                    break;
                }
                *pos += 1;
            }
            Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
        };

        let magic = token(&mut pos, &mut line)?;
        if magic != "P6" {
            return Err(parse_err(line, format!("expected P6 magic, got {magic:?}")));
        }
        let dim = |what: &str, pos: &mut usize, line: &mut usize| -> Result<usize> {
            let t = token(pos, line)?;
            t.parse::<usize>().map_err(|_| parse_err(*line, format!("bad {what} {t:?}")))
        };
        let width = dim("width", &mut pos, &mut line)?;
        let height = dim("height", &mut pos, &mut line)?;
        let maxval = dim("maxval", &mut pos, &mut line)?;
        if maxval != 255 {
            return Err(parse_err(line, format!("maxval {maxval} unsupported, want 255")));
        }
        // exactly one whitespace byte separates the header from the raster
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            _ => return Err(parse_err(line, "missing separator before pixel data")),
        }
        let want = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| parse_err(line, "dimensions overflow"))?;
        let rest = &bytes[pos..];
        if rest.len() < want {
            return Err(parse_err(line, format!("raster holds {} of {} bytes", rest.len(), want)));
        }
        if rest.len() > want {
            return Err(parse_err(line, format!("{} trailing bytes after raster", rest.len() - want)));
        }
        Self::new(width, height, rest.to_vec())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.encode())?)
    }

    /// `[height, width, 3]` tensor, channel values scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let data = self.pixels.iter().map(|&b| b as f64 / 255.0).collect();
        Tensor::from_vec(vec![self.height, self.width, 3], data)
    }

    /// Center-crop or zero-pad each side to its nearest multiple of `m`
    /// (at least `m`). No resampling: pixels are kept or dropped whole,
    /// padding is black.
    pub fn fit_to_multiple(&self, m: usize) -> Self {
        assert!(m > 0, "multiple must be positive");
        let target = |n: usize| (((n + m / 2) / m) * m).max(m);
        let (tw, th) = (target(self.width), target(self.height));
        if (tw, th) == (self.width, self.height) {
            return self.clone();
        }
        let mut pixels = vec![0u8; 3 * tw * th];
        // source/destination row and column offsets for the copied band
        let (sy, dy) = if self.height >= th { ((self.height - th) / 2, 0) } else { (0, (th - self.height) / 2) };
        let (sx, dx) = if self.width >= tw { ((self.width - tw) / 2, 0) } else { (0, (tw - self.width) / 2) };
        let rows = self.height.min(th);
        let cols = self.width.min(tw);
        for r in 0..rows {
            let src = 3 * ((sy + r) * self.width + sx);
            let dst = 3 * ((dy + r) * tw + dx);
            pixels[dst..dst + 3 * cols].copy_from_slice(&self.pixels[src..src + 3 * cols]);
        }
        Self { width: tw, height: th, pixels }
    }
}
