use super::BinaryMask;
use crate::error::{Error, Result};
use crate::image::Image;

/// Per-pixel compositing weight in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendAlpha {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl BlendAlpha {
    pub fn uniform(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            values: vec![value.clamp(0.0, 1.0); height * width],
        }
    }

    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape("alpha length does not match its grid"));
        }
        Ok(Self {
            height,
            width,
            values: values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `alpha·fg + (1 − alpha)·bg`, channel by channel.
    pub fn composite(&self, foreground: &Image, background: &Image) -> Result<Image> {
        foreground.check_same_shape(background, "composite")?;
        if foreground.height() != self.height || foreground.width() != self.width {
            return Err(Error::shape("alpha grid does not match images"));
        }
        let n = self.values.len();
        let mut out = background.clone();
        for c in 0..foreground.channels() {
            let fg = foreground.plane(c);
            let dst = &mut out.data_mut()[c * n..(c + 1) * n];
            for ((o, &f), &a) in dst.iter_mut().zip(fg).zip(&self.values) {
                *o = a * f + (1.0 - a) * *o;
            }
        }
        Ok(out)
    }
}

/// Feathering radius used when none is configured: 5 px at 512², scaled
/// linearly with the image side.
pub fn default_feather_sigma(side: usize) -> f64 {
    5.0 * side as f64 / 512.0
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * d * d / (sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

// Separable pass with edge replication. A window holding a single value
// reproduces that value exactly, so constant regions stay exactly 0 or 1.
fn blur_1d(src: &[f64], dst: &mut [f64], len: usize, stride: usize, count: usize, step: usize, k: &[f64]) {
    let r = k.len() / 2;
    for line in 0..count {
        let base = line * step;
        for i in 0..len {
            let first = src[base + i.saturating_sub(r).min(len - 1) * stride];
            let mut uniform = true;
            let mut acc = 0.0;
            for (j, &w) in k.iter().enumerate() {
                let idx = (i + j).saturating_sub(r).min(len - 1);
                let v = src[base + idx * stride];
                uniform &= v == first;
                acc += w * v;
            }
            dst[base + i * stride] = if uniform { first } else { acc };
        }
    }
}

/// Gaussian-feathered alpha from a binary mask. `sigma = 0` returns the
/// mask itself (hard compositing).
pub fn gaussian_alpha(mask: &BinaryMask, sigma: f64) -> Result<BlendAlpha> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("feather sigma must be >= 0, got {sigma}")));
    }
    let (h, w) = (mask.height(), mask.width());
    let base = mask.to_f64();
    if sigma == 0.0 || h == 0 || w == 0 {
        return BlendAlpha::from_values(h, w, base);
    }
    let k = gaussian_kernel(sigma);
    let mut tmp = vec![0.0; h * w];
    blur_1d(&base, &mut tmp, w, 1, h, w, &k);
    let mut out = vec![0.0; h * w];
    blur_1d(&tmp, &mut out, h, w, w, 1, &k);
    BlendAlpha::from_values(h, w, out)
}

pub fn soft_blend(
    foreground: &Image,
    background: &Image,
    mask: &BinaryMask,
    feather_sigma: f64,
) -> Result<Image> {
    foreground.check_same_shape(background, "soft_blend")?;
    foreground.check_mask(mask, "soft_blend")?;
    gaussian_alpha(mask, feather_sigma)?.composite(foreground, background)
}
