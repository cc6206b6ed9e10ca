//! Planar RGB images with real-valued samples.
//!
//! Samples are stored channel-major (`C×H×W`). Images decoded from disk
//! are mapped to `[0, 1]`; intermediate images produced during
//! optimization may leave that range and are only clamped on export.

use std::path::Path;

use image::{imageops::FilterType, ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::mask_ops::BinaryMask;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "expected {} samples for {channels}x{height}x{width}, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn check_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.channels, self.height, self.width, other.channels, other.height, other.width
            )))
        }
    }

    pub fn check_mask(&self, mask: &BinaryMask, what: &str) -> Result<()> {
        if mask.height() == self.height && mask.width() == self.width {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: image {}x{} vs mask {}x{}",
                self.height,
                self.width,
                mask.height(),
                mask.width()
            )))
        }
    }

    /// Pixel-space masking: every channel multiplied by the 0/1 mask.
    pub fn masked(&self, mask: &BinaryMask) -> Result<Image> {
        self.check_mask(mask, "masked")?;
        let mut out = self.clone();
        out.apply_mask(mask);
        Ok(out)
    }

    pub(crate) fn apply_mask(&mut self, mask: &BinaryMask) {
        let n = self.plane_len();
        for c in 0..self.channels {
            for (v, &m) in self.data[c * n..(c + 1) * n].iter_mut().zip(mask.as_slice()) {
                if !m {
                    *v = 0.0;
                }
            }
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Image, scale: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn clamped(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel-mean luminance plane.
    pub fn grayscale(&self) -> Vec<f64> {
        let n = self.plane_len();
        let inv = 1.0 / self.channels as f64;
        (0..n)
            .map(|i| (0..self.channels).map(|c| self.data[c * n + i]).sum::<f64>() * inv)
            .collect()
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let rgb = image::open(path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Codec(other),
            })?
            .to_rgb8();
        Ok(Self::from_rgb8(&rgb))
    }

    pub fn from_rgb8(rgb: &RgbImage) -> Image {
        let (w, h) = rgb.dimensions();
        Image::from_fn(3, h as usize, w as usize, |c, y, x| {
            rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        })
    }

    /// Quantizes to 8-bit, clamping to `[0, 1]` first.
    pub fn to_rgb8(&self) -> RgbImage {
        assert!(self.channels == 3, "to_rgb8 requires three channels");
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c: usize| {
                (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8
            };
            Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8().save(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Codec(other),
        })
    }

    /// Triangle-filter resample; returns a clone when the size already matches.
    pub fn resized(&self, height: usize, width: usize) -> Image {
        if self.height == height && self.width == width {
            return self.clone();
        }
        let planes: Vec<f64> = (0..self.channels)
            .flat_map(|c| {
                let buf: ImageBuffer<image::Luma<f32>, Vec<f32>> = ImageBuffer::from_raw(
                    self.width as u32,
                    self.height as u32,
                    self.plane(c).iter().map(|&v| v as f32).collect(),
                )
                .expect("plane length matches dimensions");
                image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle)
                    .into_raw()
                    .into_iter()
                    .map(|v| v as f64)
            })
            .collect();
        Image {
            channels: self.channels,
            height,
            width,
            data: planes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_grid() {
        let img = Image::from_fn(3, 5, 7, |c, y, x| ((c * 37 + y * 11 + x * 5) % 256) as f64 / 255.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn masking_zeroes_outside() {
        let img = Image::filled(3, 2, 2, 0.7);
        let mask = BinaryMask::from_fn(2, 2, |y, x| y == x);
        let m = img.masked(&mask).unwrap();
        assert_eq!(m.get(1, 0, 0), 0.7);
        assert_eq!(m.get(2, 0, 1), 0.0);
    }
}
