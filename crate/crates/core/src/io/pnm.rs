//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Raw 8-bit raster, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if !(channels == 1 || channels == 3) {
            return Err(Error::format("image", format!("{channels} channels")));
        }
        if width == 0 || height == 0 || pixels.len() != width * height * channels {
            return Err(Error::format(
                "image",
                format!("{} bytes for {width}x{height}x{channels}", pixels.len()),
            ));
        }
        Ok(Raster {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let channels = match bytes.get(..2) {
            Some(b"P6") => 3,
            Some(b"P5") => 1,
            _ => return Err(Error::format("image", "expected P5 or P6 magic")),
        };
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for f in &mut fields {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if bytes.get(pos) == Some(&b'#') {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                pos += 1;
            }
            *f = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format("image", "truncated header"))?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(Error::format("image", format!("maxval {maxval}, only 255 supported")));
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(Error::format("image", "missing separator after header"));
        }
        pos += 1;
        let len = width * height * channels;
        let pixels = bytes
            .get(pos..pos + len)
            .ok_or_else(|| Error::format("image", "payload shorter than header states"))?
            .to_vec();
        Raster::new(width, height, channels, pixels)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Raster::decode(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    /// `1×C×H×W` tensor with values divided by 255.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (w, c) = (self.width, self.channels);
        Tensor::from_fn(Shape::new(1, c, self.height, w), |_, ch, y, x| {
            f32::from(self.pixels[(y * w + x) * c + ch]) / 255.0
        })
    }

    /// Quantizes a batch-1 tensor of 1 or 3 channels, clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 {
            return Err(Error::Shape(format!("image tensor must hold one sample, got {s}")));
        }
        let mut pixels = Vec::with_capacity(s.c * s.plane());
        for y in 0..s.h {
            for x in 0..s.w {
                for c in 0..s.c {
                    pixels.push(quantize(t.at(0, c, y, x)));
                }
            }
        }
        Raster::new(s.w, s.h, s.c, pixels)
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    Ok(Raster::read(path)?.to_tensor())
}

pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    Raster::from_tensor(image)?.write(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let r = Raster::decode(&bytes).unwrap();
        assert_eq!((r.width, r.height, r.channels), (2, 1, 1));
        assert_eq!(r.to_tensor().data(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(Raster::decode(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(Raster::decode(b"P6\n2 2\n255\n\x00").is_err());
        assert!(Raster::decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }
}
