use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            rgb: vec![value; width * height * 3],
        }
    }

    pub fn from_rgb(width: usize, height: usize, rgb: Vec<f64>) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::DimensionMismatch {
                expected: format!("{} values", width * height * 3),
                actual: rgb.len().to_string(),
            });
        }
        if rgb.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("image", "non-finite pixel value"));
        }
        Ok(Self { width, height, rgb })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * 3 + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.rgb[self.index(x, y, c)]
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = self.index(x, y, 0);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> Result<()> {
        if self.width == other.width && self.height == other.height && self.rgb.len() == other.rgb.len() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: format!("{}x{}", self.width, self.height),
                actual: format!("{}x{}", other.width, other.height),
            })
        }
    }

    /// Per-channel population variance averaged over channels.
    pub fn variance(&self) -> f64 {
        let n = (self.width * self.height) as f64;
        (0..3)
            .map(|c| {
                let vals = self.rgb.iter().skip(c).step_by(3);
                let mean = vals.clone().sum::<f64>() / n;
                vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
            })
            .sum::<f64>()
            / 3.0
    }

    /// Single channel as a plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.rgb.iter().skip(c).step_by(3).copied().collect()
    }

    /// Binary P6, 8 bits per channel.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.rgb.len() + 32);
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        out.extend(self.rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let parse_err = |message: &str| Error::Parse {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        let mut fields = Vec::new();
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
                return Err(parse_err("truncated header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P6" {
            return Err(parse_err("not a binary P6 pixmap"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| parse_err("bad header number"));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(parse_err("only 8-bit pixmaps are supported"));
        }
        let data = bytes.get(pos..pos + width * height * 3).ok_or_else(|| parse_err("truncated pixel data"))?;
        Self::from_rgb(width, height, data.iter().map(|&b| b as f64 / 255.0).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let rgb: Vec<f64> = (0..4 * 3 * 3).map(|i| (i % 256) as f64 / 255.0).collect();
        let img = ImageBuffer::from_rgb(4, 3, rgb).unwrap();
        img.write_ppm(&path).unwrap();
        let back = ImageBuffer::read_ppm(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn length_checked() {
        assert!(ImageBuffer::from_rgb(2, 2, vec![0.0; 11]).is_err());
    }
}
