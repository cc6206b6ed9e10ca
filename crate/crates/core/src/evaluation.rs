//! Image-quality and distribution metrics for transfer results.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, Tap};
use crate::generator::ToyGenerator;
use crate::image::Image;
use crate::mask_ops::{mask_iou, BinaryMask};

/// Reported for bit-identical images instead of +∞.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Peak signal-to-noise ratio for unit dynamic range, over all channels.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b, "psnr")?;
    let n = a.data().len();
    if n == 0 {
        return Err(Error::shape("psnr of empty images"));
    }
    let se: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(psnr_from_mse(se / n as f64))
}

/// PSNR restricted to the pixels of `mask` (all channels).
pub fn psnr_masked(a: &Image, b: &Image, mask: &BinaryMask) -> Result<f64> {
    a.check_same_shape(b, "psnr")?;
    a.check_mask(mask, "psnr")?;
    if mask.area() == 0 {
        return Err(Error::EmptyRegion("psnr mask is empty".into()));
    }
    let mut se = 0.0;
    for c in 0..a.channels() {
        for ((x, y), &m) in a.plane(c).iter().zip(b.plane(c)).zip(mask.as_slice()) {
            if m {
                se += (x - y) * (x - y);
            }
        }
    }
    Ok(psnr_from_mse(se / (mask.area() * a.channels()) as f64))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" filtering of a `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut horiz = vec![0.0; h * ow];
    for y in 0..h {
        for j in 0..ow {
            horiz[y * ow + j] = (0..SSIM_WINDOW).map(|t| k[t] * x[y * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..SSIM_WINDOW).map(|t| k[t] * horiz[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Per-position SSIM over valid window placements of the channel-mean
/// grayscale images; returned row-major at `(h−10) × (w−10)`.
pub fn ssim_map(a: &Image, b: &Image) -> Result<(Vec<f64>, usize, usize)> {
    a.check_same_shape(b, "ssim")?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let (x, y) = (a.grayscale(), b.grayscale());
    let k = gaussian_window();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let (mx, my) = (filter_valid(&x, h, w, &k), filter_valid(&y, h, w, &k));
    let (exx, eyy, exy) = (filter_valid(&xx, h, w, &k), filter_valid(&yy, h, w, &k), filter_valid(&xy, h, w, &k));
    let map = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = exx[i] - ux * ux;
            let vy = eyy[i] - uy * uy;
            let cov = exy[i] - ux * uy;
            ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .collect();
    Ok((map, h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW))
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let (map, _, _) = ssim_map(a, b)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// Mean SSIM over window placements whose centre pixel lies in `mask`.
pub fn ssim_masked(a: &Image, b: &Image, mask: &BinaryMask) -> Result<f64> {
    a.check_mask(mask, "ssim")?;
    let (map, oh, ow) = ssim_map(a, b)?;
    let r = SSIM_WINDOW / 2;
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..oh {
        for j in 0..ow {
            if mask.get(i + r, j + r) {
                sum += map[i * ow + j];
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyRegion("no ssim window centred inside the mask".into()));
    }
    Ok(sum / n as f64)
}

/// Gaussian summary of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSetStats {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    count: usize,
}

impl FeatureSetStats {
    /// `cov` is row-major `C × C`.
    pub fn new(mean: Vec<f64>, cov: Vec<f64>, count: usize) -> Result<Self> {
        let c = mean.len();
        if cov.len() != c * c {
            return Err(Error::shape(format!("covariance has {} entries, need {}", cov.len(), c * c)));
        }
        if count < 2 {
            return Err(Error::InvalidParameter("feature statistics need at least 2 samples".into()));
        }
        let cov = DMatrix::from_row_slice(c, c, &cov);
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > 1e-9 * scale {
            return Err(Error::InvalidParameter("covariance is not symmetric".into()));
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov,
            count,
        })
    }

    /// Sample mean and unbiased covariance, folded in input order.
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::InvalidParameter("feature statistics need at least 2 samples".into()));
        }
        let c = samples[0].len();
        if samples.iter().any(|s| s.len() != c) {
            return Err(Error::shape("feature vectors differ in length"));
        }
        let mut mean = DVector::zeros(c);
        for s in samples {
            mean += DVector::from_column_slice(s);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(c, c);
        for s in samples {
            let d = DVector::from_column_slice(s) - &mean;
            cov += &d * d.transpose();
        }
        cov /= (n - 1) as f64;
        Ok(Self { mean, cov, count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Clipped eigenvalues of the symmetrized matrix.
fn psd_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let mut e = SymmetricEigen::new(symmetrize(m));
    e.eigenvalues.iter_mut().for_each(|v| *v = v.max(0.0));
    e
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = psd_eigen(m);
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(f64::sqrt));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`.
///
/// `Tr (Σ₁Σ₂)^{1/2}` is taken as `Tr (Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2}`: the inner
/// matrix is symmetric PSD and similar to `Σ₁Σ₂`, so a symmetric
/// eigendecomposition applies. Negative eigenvalues from round-off or
/// rank-deficient sample covariances are clipped to 0 throughout.
pub fn frechet_distance(s1: &FeatureSetStats, s2: &FeatureSetStats) -> Result<f64> {
    if s1.dim() != s2.dim() {
        return Err(Error::shape(format!("feature dimensions differ ({} vs {})", s1.dim(), s2.dim())));
    }
    let dm = (&s1.mean - &s2.mean).norm_squared();
    let root1 = psd_sqrt(&s1.cov);
    let inner = &root1 * &s2.cov * &root1;
    let tr_sqrt: f64 = psd_eigen(&inner).eigenvalues.iter().map(|v| v.sqrt()).sum();
    let tr1: f64 = psd_eigen(&s1.cov).eigenvalues.iter().sum();
    let tr2: f64 = psd_eigen(&s2.cov).eigenvalues.iter().sum();
    Ok((dm + tr1 + tr2 - 2.0 * tr_sqrt).max(0.0))
}

/// Global-average-pooled deepest-level activations, used as the FID
/// embedding when a pretrained extractor is configured.
pub fn pooled_embedding(extractor: &dyn FeatureExtractor, image: &Image) -> Result<Vec<f64>> {
    let deepest = extractor.levels().len();
    let maps = extractor.forward(image, &[Tap::Block(deepest)])?;
    let f = &maps[0];
    let n = f.positions() as f64;
    Ok((0..f.channels()).map(|c| f.plane(c).iter().sum::<f64>() / n).collect())
}

/// IoU between the shape reference's hair and the synthesized hair.
pub fn hair_iou_eval(target_hair: &BinaryMask, synth_hair: &BinaryMask) -> Result<f64> {
    mask_iou(target_hair, synth_hair)
}

/// Hair mask read off the toy backend's hair-signal channel.
pub fn toy_hair_mask(synth: &Image) -> Result<BinaryMask> {
    ToyGenerator::hair_mask(synth)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub tuple_id: String,
    pub psnr: f64,
    pub ssim: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fid: Option<f64>,
    pub latent_distance: f64,
    #[serde(default)]
    pub hair_iou: Option<f64>,
    pub config_hash: String,
    /// Region PSNR/SSIM were measured in.
    pub metric_region: String,
}
