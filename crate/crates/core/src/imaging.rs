//! Float images and 8-bit PNG I/O.

use std::path::Path;

use image::ImageEncoder;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: image::ImageError,
    },
    #[error("image size {0}x{1} does not match the buffer")]
    Size(u32, u32),
    #[error("unsupported channel count {0}")]
    Channels(usize),
}

/// Row-major interleaved float image, 3 (RGB) or 4 (RGBA) channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub channels: usize,
    pub data: Vec<f64>,
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(b: u8) -> f64 {
    b as f64 / 255.0
}

impl Image {
    pub fn new(width: u32, height: u32, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width as usize * height as usize * channels],
        }
    }

    pub fn filled(width: u32, height: u32, value: &[f64]) -> Self {
        let mut img = Self::new(width, height, value.len());
        for px in img.data.chunks_exact_mut(value.len()) {
            px.copy_from_slice(value);
        }
        img
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * self.channels
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[f64] {
        let o = self.offset(x, y);
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, x: u32, y: u32) -> &mut [f64] {
        let o = self.offset(x, y);
        let c = self.channels;
        &mut self.data[o..o + c]
    }

    /// Composites an RGBA image over a constant background.
    pub fn over(&self, background: [f64; 3]) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let mut out = Image::new(self.width, self.height, 3);
        for (dst, src) in out.data.chunks_exact_mut(3).zip(self.data.chunks_exact(4)) {
            let a = src[3];
            for c in 0..3 {
                dst[c] = src[c] * a + background[c] * (1.0 - a);
            }
        }
        out
    }

    /// Rounds every value through 8-bit storage.
    pub fn quantized(&self) -> Image {
        Image {
            data: self.data.iter().map(|&v| dequantize(quantize(v))).collect(),
            ..self.clone()
        }
    }

    /// Box-filter downsampling by an integer factor (trailing rows/columns
    /// that do not fill a block are dropped).
    pub fn downsample(&self, factor: u32) -> Image {
        if factor <= 1 {
            return self.clone();
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = Image::new(w, h, self.channels);
        let norm = 1.0 / (factor * factor) as f64;
        for y in 0..h {
            for x in 0..w {
                let mut acc = vec![0.0; self.channels];
                for dy in 0..factor {
                    for dx in 0..factor {
                        let p = self.pixel(x * factor + dx, y * factor + dy);
                        acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
                    }
                }
                out.pixel_mut(x, y)
                    .iter_mut()
                    .zip(&acc)
                    .for_each(|(o, a)| *o = a * norm);
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_bytes(width: u32, height: u32, channels: usize, bytes: &[u8]) -> Result<Self, ImageError> {
        if bytes.len() != width as usize * height as usize * channels {
            return Err(ImageError::Size(width, height));
        }
        Ok(Self {
            width,
            height,
            channels,
            data: bytes.iter().map(|&b| dequantize(b)).collect(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let color = match self.channels {
            3 => image::ExtendedColorType::Rgb8,
            4 => image::ExtendedColorType::Rgba8,
            c => return Err(ImageError::Channels(c)),
        };
        image::save_buffer_with_format(
            path,
            &self.to_bytes(),
            self.width,
            self.height,
            color,
            image::ImageFormat::Png,
        )
        .map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// PNG encoding in memory (used for size reports).
    pub fn png_bytes(&self) -> Result<Vec<u8>, ImageError> {
        let color = match self.channels {
            3 => image::ExtendedColorType::Rgb8,
            4 => image::ExtendedColorType::Rgba8,
            c => return Err(ImageError::Channels(c)),
        };
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(&self.to_bytes(), self.width, self.height, color)
            .map_err(|source| ImageError::Io {
                path: "<memory>".into(),
                source,
            })?;
        Ok(out)
    }

    /// Loads a PNG as RGB (`channels == 3`) or RGBA (`channels == 4`).
    pub fn load_png(path: &Path, channels: usize) -> Result<Self, ImageError> {
        let img = image::open(path).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let (w, h) = (img.width(), img.height());
        let bytes = match channels {
            3 => img.to_rgb8().into_raw(),
            4 => img.to_rgba8().into_raw(),
            c => return Err(ImageError::Channels(c)),
        };
        Self::from_bytes(w, h, channels, &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless_for_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(5, 3, 4);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = dequantize((i * 37 % 256) as u8);
        }
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p, 4).unwrap(), img);
    }

    #[test]
    fn over_and_downsample() {
        let img = Image::filled(4, 4, &[1.0, 0.0, 0.0, 0.25]);
        let rgb = img.over([0.0, 0.0, 1.0]);
        assert_eq!(rgb.pixel(2, 1), &[0.25, 0.0, 0.75]);
        let mut g = Image::new(4, 2, 3);
        for x in 0..4 {
            for y in 0..2 {
                g.pixel_mut(x, y).fill((x + 4 * y) as f64);
            }
        }
        let d = g.downsample(2);
        assert_eq!((d.width, d.height), (2, 1));
        assert_eq!(d.pixel(0, 0)[0], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
    }
}
