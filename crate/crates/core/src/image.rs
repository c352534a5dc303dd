//! Small planar images and binary PGM/PPM files.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Planar (channel-major) image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl ImagePatch {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::invalid(format!(
                "bad image geometry {height}x{width}x{channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::shape("image", &[channels, height, width], &[pixels.len()]));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels]).expect("valid geometry")
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.pixels[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.pixels[c * n..(c + 1) * n]
    }

    pub fn clamp(&mut self) {
        self.pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn clamped(mut self) -> Self {
        self.clamp();
        self
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.pixels.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / self.pixels.len() as f64
    }

    /// `[C, H, W]` tensor view of the pixels.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.channels, self.height, self.width], self.pixels.clone()).expect("image shape")
    }

    /// Inverse of [`to_tensor`](Self::to_tensor); values are kept as-is.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::shape("image from tensor", s, &[3]));
        }
        Self::new(s[1], s[2], s[0], t.data().to_vec())
    }

    /// Binary PGM (1 channel) or PPM (3 channels), 8-bit, round-to-nearest.
    pub fn to_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        let n = self.height * self.width;
        for i in 0..n {
            for c in 0..self.channels {
                let v = self.pixels[c * n + i].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn from_pnm(bytes: &[u8]) -> Result<Self> {
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
                return Err(Error::invalid("truncated PNM header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        let channels = match fields[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            m => return Err(Error::invalid(format!("unsupported PNM magic {m}"))),
        };
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad PNM field {s}")))
        };
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(Error::invalid("only 8-bit PNM is supported"));
        }
        let n = width * height;
        let body = bytes
            .get(pos..pos + n * channels)
            .ok_or_else(|| Error::invalid("truncated PNM body"))?;
        let mut pixels = vec![0f32; n * channels];
        for i in 0..n {
            for c in 0..channels {
                pixels[c * n + i] = body[i * channels + c] as f32 / 255.0;
            }
        }
        Self::new(height, width, channels, pixels)
    }

    pub fn save_pnm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_pnm())?;
        Ok(())
    }

    pub fn load_pnm(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_pnm(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_roundtrip_quantizes_to_nearest() {
        let img = ImagePatch::new(2, 3, 1, vec![0.0, 0.5, 1.0, 0.2, 0.7, 0.999]).unwrap();
        let bytes = img.to_pnm();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        let back = ImagePatch::from_pnm(&bytes).unwrap();
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert_eq!(back.to_pnm(), bytes);
    }

    #[test]
    fn ppm_is_interleaved() {
        let img = ImagePatch::new(1, 2, 3, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let bytes = img.to_pnm();
        let header = b"P6\n2 1\n255\n".len();
        assert_eq!(&bytes[header..], &[255, 0, 0, 0, 255, 0]);
        assert_eq!(ImagePatch::from_pnm(&bytes).unwrap(), img);
    }
}
