//! Multi-level perceptual features and the statistics built on them.
//!
//! An extractor exposes five block-level taps (`Tap::Block(1..=5)`, the
//! end of each convolutional block) plus a shallow `Tap::Appearance` tap.
//! Style statistics use blocks 1–4. Every extractor also provides a
//! vector–Jacobian product so losses on features can be pulled back to
//! pixels.

mod identity;
mod toy;
mod vgg;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask_ops::BinaryMask;

pub use identity::IdentityExtractor;
pub use toy::ToyExtractor;
pub use vgg::{Vgg16Extractor, VGG16_BLOCK_DEPTHS};

/// Blocks whose Gram matrices define the style statistic.
pub const STYLE_LEVELS: [usize; 4] = [1, 2, 3, 4];
/// Blocks compared by the hair-structure loss.
pub const STRUCTURE_LEVELS: [usize; 2] = [4, 5];
pub const NUM_LEVELS: usize = 5;

/// Norm offset used when unit-normalising feature vectors.
pub const NORMALIZE_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(Error::shape(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn from_image(image: &Image) -> Self {
        Self {
            channels: image.channels(),
            height: image.height(),
            width: image.width(),
            values: image.data().to_vec(),
        }
    }

    pub fn into_image(self) -> Image {
        Image::from_vec(self.channels, self.height, self.width, self.values)
            .expect("feature map dimensions are consistent")
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
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.positions();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.positions();
        &mut self.values[c * n..(c + 1) * n]
    }

    pub fn same_geometry(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    fn check_geometry(&self, other: &FeatureMap, what: &str) -> Result<()> {
        if self.same_geometry(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.channels, self.height, self.width, other.channels, other.height, other.width
            )))
        }
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert!(self.same_geometry(other));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Where in the extractor a feature map is read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tap {
    /// End of convolutional block `b` (1-based).
    Block(usize),
    /// Shallowest activation, used for mean appearance.
    Appearance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelGeometry {
    pub channels: usize,
    pub stride: usize,
}

pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;

    /// Geometry of block taps 1..=5, indexed `b − 1`.
    fn levels(&self) -> &[LevelGeometry];

    fn appearance_geometry(&self) -> LevelGeometry;

    /// Features at each requested tap, in request order.
    fn forward(&self, image: &Image, taps: &[Tap]) -> Result<Vec<FeatureMap>>;

    /// Pulls per-tap feature gradients back to a gradient on `image`.
    fn backward(&self, image: &Image, taps: &[Tap], grads: &[FeatureMap]) -> Result<Image>;

    /// Optional per-channel weights for the perceptual distance at block `b`.
    fn calibration(&self, _level: usize) -> Option<&[f64]> {
        None
    }

    fn geometry_of(&self, tap: Tap) -> Result<LevelGeometry> {
        match tap {
            Tap::Appearance => Ok(self.appearance_geometry()),
            Tap::Block(b) => {
                let levels = self.levels();
                if b == 0 || b > levels.len() {
                    Err(Error::Level {
                        level: b,
                        max: levels.len(),
                    })
                } else {
                    Ok(levels[b - 1])
                }
            }
        }
    }
}

pub(crate) fn check_taps(extractor: &dyn FeatureExtractor, taps: &[Tap]) -> Result<()> {
    for &t in taps {
        extractor.geometry_of(t)?;
    }
    Ok(())
}

pub(crate) fn check_backward_args(
    extractor: &dyn FeatureExtractor,
    image: &Image,
    taps: &[Tap],
    grads: &[FeatureMap],
) -> Result<()> {
    if taps.len() != grads.len() {
        return Err(Error::shape("one gradient per tap is required"));
    }
    for (&t, g) in taps.iter().zip(grads) {
        let geo = extractor.geometry_of(t)?;
        let (h, w) = tap_resolution(image, geo.stride);
        if g.channels() != geo.channels || g.height() != h || g.width() != w {
            return Err(Error::shape(format!(
                "gradient for {t:?} is {}x{}x{}, expected {}x{h}x{w}",
                g.channels(),
                g.height(),
                g.width(),
                geo.channels
            )));
        }
    }
    Ok(())
}

pub(crate) fn tap_resolution(image: &Image, stride: usize) -> (usize, usize) {
    (image.height() / stride, image.width() / stride)
}

/// Block-level features of `image`.
pub fn extract(extractor: &dyn FeatureExtractor, image: &Image, level: usize) -> Result<FeatureMap> {
    let mut maps = extractor.forward(image, &[Tap::Block(level)])?;
    Ok(maps.pop().expect("one tap requested"))
}

/// Mean over positions of `Σ_c w_c (â_c − b̂_c)²`, where `â`, `b̂` are the
/// per-position channel vectors scaled to unit length. With no calibration
/// `w_c = 1/C`, i.e. a plain average over channels and positions.
pub fn perceptual_distance(fa: &FeatureMap, fb: &FeatureMap) -> Result<f64> {
    perceptual_distance_weighted(fa, fb, None)
}

pub fn perceptual_distance_weighted(
    fa: &FeatureMap,
    fb: &FeatureMap,
    weights: Option<&[f64]>,
) -> Result<f64> {
    Ok(perceptual_distance_impl(fa, fb, weights, false)?.0)
}

/// Distance and its gradient with respect to `fb`.
pub fn perceptual_distance_with_grad(
    fa: &FeatureMap,
    fb: &FeatureMap,
    weights: Option<&[f64]>,
) -> Result<(f64, FeatureMap)> {
    let (d, g) = perceptual_distance_impl(fa, fb, weights, true)?;
    Ok((d, g.expect("gradient requested")))
}

fn perceptual_distance_impl(
    fa: &FeatureMap,
    fb: &FeatureMap,
    weights: Option<&[f64]>,
    want_grad: bool,
) -> Result<(f64, Option<FeatureMap>)> {
    fa.check_geometry(fb, "perceptual_distance")?;
    let c = fa.channels();
    let n = fa.positions();
    let unit = vec![1.0 / c as f64; c];
    let w = match weights {
        Some(w) if w.len() != c => {
            return Err(Error::shape(format!(
                "calibration has {} weights for {c} channels",
                w.len()
            )))
        }
        Some(w) => w,
        None => &unit[..],
    };
    let inv_n = 1.0 / n as f64;
    let mut grad = want_grad.then(|| FeatureMap::zeros(c, fa.height(), fa.width()));
    let mut total = 0.0;
    let mut a = vec![0.0; c];
    let mut b = vec![0.0; c];
    let mut g = vec![0.0; c];
    for p in 0..n {
        for ch in 0..c {
            a[ch] = fa.values[ch * n + p];
            b[ch] = fb.values[ch * n + p];
        }
        let ra = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let sa = ra + NORMALIZE_EPS;
        let sb = rb + NORMALIZE_EPS;
        let mut d = 0.0;
        for ch in 0..c {
            let diff = a[ch] / sa - b[ch] / sb;
            d += w[ch] * diff * diff;
            g[ch] = -2.0 * inv_n * w[ch] * diff;
        }
        total += d;
        if let Some(grad) = grad.as_mut() {
            // VJP of b ↦ b / (|b| + ε)
            let bg: f64 = b.iter().zip(&g).map(|(x, y)| x * y).sum();
            let coef = if rb > 0.0 { bg / (rb * sb * sb) } else { 0.0 };
            for ch in 0..c {
                grad.values[ch * n + p] = g[ch] / sb - b[ch] * coef;
            }
        }
    }
    Ok((total * inv_n, grad))
}

fn appearance_weights(
    extractor: &dyn FeatureExtractor,
    image: &Image,
    mask: &BinaryMask,
) -> Result<(Vec<f64>, usize, usize)> {
    image.check_mask(mask, "mean_appearance")?;
    let geo = extractor.appearance_geometry();
    let (h, w) = tap_resolution(image, geo.stride);
    let small = mask.resize_nearest(h, w);
    let count = small.area();
    if count == 0 {
        return Err(Error::EmptyRegion(format!(
            "mask has no pixels at appearance resolution {h}x{w}"
        )));
    }
    Ok((small.to_f64(), count, geo.channels))
}

/// Per-channel mean of appearance-tap features over `mask` (nearest-
/// neighbour downscaled to the tap's resolution).
pub fn mean_appearance(
    extractor: &dyn FeatureExtractor,
    image: &Image,
    mask: &BinaryMask,
) -> Result<Vec<f64>> {
    let (weights, count, _) = appearance_weights(extractor, image, mask)?;
    let feats = extractor.forward(image, &[Tap::Appearance])?.pop().expect("one tap");
    Ok(masked_channel_mean(&feats, &weights, count))
}

pub(crate) fn masked_channel_mean(feats: &FeatureMap, weights: &[f64], count: usize) -> Vec<f64> {
    let inv = 1.0 / count as f64;
    (0..feats.channels())
        .map(|c| {
            feats
                .plane(c)
                .iter()
                .zip(weights)
                .map(|(f, m)| f * m)
                .sum::<f64>()
                * inv
        })
        .collect()
}

/// Mean appearance together with the pull-back of a gradient on it.
pub(crate) fn mean_appearance_vjp<'a>(
    extractor: &'a dyn FeatureExtractor,
    image: &Image,
    mask: &BinaryMask,
) -> Result<(Vec<f64>, impl Fn(&[f64]) -> Result<Image> + 'a)> {
    let (weights, count, channels) = appearance_weights(extractor, image, mask)?;
    let feats = extractor.forward(image, &[Tap::Appearance])?.pop().expect("one tap");
    let mean = masked_channel_mean(&feats, &weights, count);
    let (fh, fw) = (feats.height(), feats.width());
    let image = image.clone();
    let pull = move |g: &[f64]| -> Result<Image> {
        let inv = 1.0 / count as f64;
        let mut gf = FeatureMap::zeros(channels, fh, fw);
        for c in 0..channels {
            for (v, m) in gf.plane_mut(c).iter_mut().zip(&weights) {
                *v = g[c] * m * inv;
            }
        }
        extractor.backward(&image, &[Tap::Appearance], &[gf])
    };
    Ok((mean, pull))
}

/// `C×C` second-moment matrix of a feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    size: usize,
    values: Vec<f64>,
}

impl GramMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn squared_distance(&self, other: &GramMatrix) -> Result<f64> {
        if self.size != other.size {
            return Err(Error::shape("gram matrices differ in size"));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }
}

/// `γᵀγ` with `γ` the features reshaped to `HW×C`; unnormalised.
pub fn gram(features: &FeatureMap) -> GramMatrix {
    let c = features.channels();
    let mut values = vec![0.0; c * c];
    for i in 0..c {
        let pi = features.plane(i);
        for j in i..c {
            let v: f64 = pi.iter().zip(features.plane(j)).map(|(a, b)| a * b).sum();
            values[i * c + j] = v;
            values[j * c + i] = v;
        }
    }
    GramMatrix { size: c, values }
}

/// Gradient of `‖target − gram(γ)‖²_F` with respect to `γ`: `−4·γ·D` with
/// `D = target − gram(γ)` (symmetric).
pub(crate) fn gram_distance_grad(features: &FeatureMap, diff: &GramMatrix) -> FeatureMap {
    let c = features.channels();
    let n = features.positions();
    let mut out = FeatureMap::zeros(c, features.height(), features.width());
    for j in 0..c {
        let dst = &mut out.values[j * n..(j + 1) * n];
        for i in 0..c {
            let d = diff.get(i, j);
            if d == 0.0 {
                continue;
            }
            for (o, f) in dst.iter_mut().zip(features.plane(i)) {
                *o += -4.0 * f * d;
            }
        }
    }
    out
}

pub(crate) fn gram_difference(target: &GramMatrix, current: &GramMatrix) -> GramMatrix {
    GramMatrix {
        size: target.size,
        values: target
            .values
            .iter()
            .zip(&current.values)
            .map(|(a, b)| a - b)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn orthogonal_unit_vectors_have_distance_one() {
        let a = FeatureMap::from_vec(2, 1, 1, vec![1.0, 0.0]).unwrap();
        let b = FeatureMap::from_vec(2, 1, 1, vec![0.0, 1.0]).unwrap();
        let d = perceptual_distance(&a, &b).unwrap();
        assert!((d - 1.0).abs() < 1e-9);
    }

    #[test]
    fn distance_zero_on_self_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_map(&mut rng, 5, 3, 4);
        let b = random_map(&mut rng, 5, 3, 4);
        assert_eq!(perceptual_distance(&a, &a).unwrap(), 0.0);
        let ab = perceptual_distance(&a, &b).unwrap();
        let ba = perceptual_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-15);
    }

    #[test]
    fn distance_rejects_geometry_mismatch() {
        let a = FeatureMap::zeros(2, 2, 2);
        let b = FeatureMap::zeros(3, 2, 2);
        assert!(matches!(perceptual_distance(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn distance_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_map(&mut rng, 4, 3, 3);
        let b = random_map(&mut rng, 4, 3, 3);
        let w: Vec<f64> = (0..4).map(|i| 0.1 + i as f64 * 0.2).collect();
        let (_, g) = perceptual_distance_with_grad(&a, &b, Some(&w)).unwrap();
        let h = 1e-6;
        for i in 0..b.values().len() {
            let mut bp = b.clone();
            bp.values_mut()[i] += h;
            let mut bm = b.clone();
            bm.values_mut()[i] -= h;
            let fd = (perceptual_distance_weighted(&a, &bp, Some(&w)).unwrap()
                - perceptual_distance_weighted(&a, &bm, Some(&w)).unwrap())
                / (2.0 * h);
            assert!((fd - g.values()[i]).abs() < 1e-7, "{i}: {fd} vs {}", g.values()[i]);
        }
    }

    #[test]
    fn gram_examples() {
        let z = FeatureMap::zeros(3, 2, 2);
        assert!(gram(&z).values().iter().all(|&v| v == 0.0));
        // HW=2, C=2 identity; channel-major storage is the transpose of γ
        let id = FeatureMap::from_vec(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(gram(&id).values(), &[1.0, 0.0, 0.0, 1.0]);
        // γ rows (1,2),(3,4),(5,6)
        let g = FeatureMap::from_vec(2, 3, 1, vec![1.0, 3.0, 5.0, 2.0, 4.0, 6.0]).unwrap();
        assert_eq!(gram(&g).values(), &[35.0, 44.0, 44.0, 56.0]);
    }

    #[test]
    fn gram_distance_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_map(&mut rng, 3, 2, 3);
        let target = gram(&random_map(&mut rng, 3, 2, 3));
        let loss = |f: &FeatureMap| target.squared_distance(&gram(f)).unwrap();
        let g = gram_distance_grad(&f, &gram_difference(&target, &gram(&f)));
        let h = 1e-6;
        for i in 0..f.values().len() {
            let mut p = f.clone();
            p.values_mut()[i] += h;
            let mut m = f.clone();
            m.values_mut()[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - g.values()[i]).abs() < 1e-5 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn masked_mean_left_column() {
        let ext = IdentityExtractor::new(1);
        let img = Image::from_vec(1, 2, 2, vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let mask = BinaryMask::rect(2, 2, 0, 0, 2, 1);
        assert_eq!(mean_appearance(&ext, &img, &mask).unwrap(), vec![3.0]);
    }

    #[test]
    fn mean_appearance_of_constant_image() {
        let ext = IdentityExtractor::new(3);
        let img = Image::filled(3, 4, 4, 0.37);
        let a = mean_appearance(&ext, &img, &BinaryMask::full(4, 4)).unwrap();
        assert!(a.iter().all(|&v| (v - 0.37).abs() < 1e-15));
        assert!(matches!(
            mean_appearance(&ext, &img, &BinaryMask::empty(4, 4)),
            Err(Error::EmptyRegion(_))
        ));
    }

    #[test]
    fn unknown_level_is_rejected() {
        let ext = ToyExtractor::new(1);
        let img = Image::zeros(3, 32, 32);
        assert!(matches!(extract(&ext, &img, 6), Err(Error::Level { level: 6, .. })));
        assert!(matches!(extract(&ext, &img, 0), Err(Error::Level { .. })));
    }

    proptest! {
        #[test]
        fn gram_is_symmetric_psd(vals in proptest::collection::vec(-3.0f64..3.0, 4 * 6)) {
            let f = FeatureMap::from_vec(4, 2, 3, vals).unwrap();
            let g = gram(&f);
            let m = DMatrix::from_row_slice(4, 4, g.values());
            prop_assert!((&m - m.transpose()).abs().max() == 0.0);
            let eig = m.symmetric_eigen();
            prop_assert!(eig.eigenvalues.iter().all(|&e| e >= -1e-8));
        }

        #[test]
        fn distance_nonnegative(a in proptest::collection::vec(-2.0f64..2.0, 12),
                                b in proptest::collection::vec(-2.0f64..2.0, 12)) {
            let fa = FeatureMap::from_vec(3, 2, 2, a).unwrap();
            let fb = FeatureMap::from_vec(3, 2, 2, b).unwrap();
            prop_assert!(perceptual_distance(&fa, &fb).unwrap() >= 0.0);
        }

        #[test]
        fn mean_appearance_permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ext = ToyExtractor::new(2);
            let img = Image::from_fn(3, 8, 8, |_, _, _| rng.random_range(0.0..1.0));
            let mask = BinaryMask::rect(8, 8, 1, 2, 6, 7);
            let cells: Vec<(usize, usize)> = (0..8).flat_map(|y| (0..8).map(move |x| (y, x)))
                .filter(|&(y, x)| mask.get(y, x)).collect();
            let mut perm = cells.clone();
            for i in (1..perm.len()).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
            let mut shuffled = img.clone();
            for (&(y, x), &(py, px)) in cells.iter().zip(&perm) {
                for c in 0..3 {
                    shuffled.set(c, py, px, img.get(c, y, x));
                }
            }
            let a = mean_appearance(&ext, &img, &mask).unwrap();
            let b = mean_appearance(&ext, &shuffled, &mask).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
