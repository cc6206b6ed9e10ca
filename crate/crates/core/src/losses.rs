//! The five transfer objectives and their weighted sum.
//!
//! Targets derived from the reference images are computed once
//! ([`PerceptualTarget`], [`AppearanceTarget`], [`StyleTarget`]) and then
//! evaluated against any number of synthesized images, returning the loss
//! and, on request, its gradient with respect to the synthesized pixels.
//! The one-shot functions (`face_loss`, `structure_loss`, ...) wrap them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    gram, gram_difference, gram_distance_grad, mean_appearance, mean_appearance_vjp,
    perceptual_distance_with_grad, FeatureExtractor, FeatureMap, GramMatrix, Tap, NUM_LEVELS,
    STRUCTURE_LEVELS, STYLE_LEVELS,
};
use crate::image::Image;
use crate::mask_ops::BinaryMask;

/// Side at which the noise pyramid stops.
pub const PYRAMID_FLOOR: usize = 8;
/// Variance floor used when standardising noise maps.
pub const NOISE_VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub face: f64,
    pub structure: f64,
    pub appearance: f64,
    pub style: f64,
    pub noise: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            face: 1.0,
            structure: 1.0,
            appearance: 40.0,
            style: 1.5e4,
            noise: 1e5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParameter(format!("loss weight {name} = {v}")));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("face", self.face),
            ("structure", self.structure),
            ("appearance", self.appearance),
            ("style", self.style),
            ("noise", self.noise),
        ]
    }
}

/// Which terms take part in a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMask {
    pub face: bool,
    pub structure: bool,
    pub appearance: bool,
    pub style: bool,
    pub noise: bool,
}

impl StageMask {
    /// Identity and hair-structure reconstruction only.
    pub const RECONSTRUCT: StageMask = StageMask {
        face: true,
        structure: true,
        appearance: false,
        style: false,
        noise: true,
    };
    pub const ALL: StageMask = StageMask {
        face: true,
        structure: true,
        appearance: true,
        style: true,
        noise: true,
    };

    /// Drops the noise term when its weight is switched off entirely.
    pub fn with_noise(mut self, on: bool) -> Self {
        self.noise &= on;
        self
    }
}

/// Unweighted component values. Disabled terms are reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub face: f64,
    pub structure: f64,
    pub appearance: f64,
    pub style: f64,
    pub noise: f64,
}

impl LossValues {
    pub fn is_finite(&self) -> bool {
        [self.face, self.structure, self.appearance, self.style, self.noise]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `Σ λ_t · L_t` over enabled terms; disabled terms contribute exactly 0
/// whatever their value.
pub fn total_loss(values: &LossValues, weights: &LossWeights, mask: StageMask) -> f64 {
    let term = |on: bool, w: f64, v: f64| if on { w * v } else { 0.0 };
    term(mask.face, weights.face, values.face)
        + term(mask.structure, weights.structure, values.structure)
        + term(mask.appearance, weights.appearance, values.appearance)
        + term(mask.style, weights.style, values.style)
        + term(mask.noise, weights.noise, values.noise)
}

fn require_nonempty(mask: &BinaryMask, what: &str) -> Result<()> {
    if mask.is_empty() {
        Err(Error::EmptyRegion(format!("{what} mask is empty")))
    } else {
        Ok(())
    }
}

fn block_taps(levels: &[usize]) -> Vec<Tap> {
    levels.iter().map(|&b| Tap::Block(b)).collect()
}

/// Mean perceptual distance over a set of blocks between a pixel-masked
/// reference and the equally masked synthesized image.
#[derive(Clone, Debug)]
pub struct PerceptualTarget {
    mask: BinaryMask,
    levels: Vec<usize>,
    features: Vec<FeatureMap>,
}

impl PerceptualTarget {
    pub fn new(
        extractor: &dyn FeatureExtractor,
        reference: &Image,
        mask: &BinaryMask,
        levels: &[usize],
    ) -> Result<Self> {
        require_nonempty(mask, "perceptual target")?;
        let features = extractor.forward(&reference.masked(mask)?, &block_taps(levels))?;
        Ok(Self {
            mask: mask.clone(),
            levels: levels.to_vec(),
            features,
        })
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    pub fn evaluate(
        &self,
        extractor: &dyn FeatureExtractor,
        synth: &Image,
        want_grad: bool,
    ) -> Result<(f64, Option<Image>)> {
        let masked = synth.masked(&self.mask)?;
        let taps = block_taps(&self.levels);
        let feats = extractor.forward(&masked, &taps)?;
        let k = 1.0 / self.levels.len() as f64;
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(feats.len());
        for ((&b, target), f) in self.levels.iter().zip(&self.features).zip(&feats) {
            let (d, mut g) = perceptual_distance_with_grad(target, f, extractor.calibration(b))?;
            total += d;
            g.values_mut().iter_mut().for_each(|v| *v *= k);
            grads.push(g);
        }
        let grad = if want_grad {
            let mut gi = extractor.backward(&masked, &taps, &grads)?;
            gi.apply_mask(&self.mask);
            Some(gi)
        } else {
            None
        };
        Ok((total * k, grad))
    }
}

/// Squared distance between the reference mean appearance and that of the
/// synthesized image inside `synth_mask`.
#[derive(Clone, Debug)]
pub struct AppearanceTarget {
    synth_mask: BinaryMask,
    mean: Vec<f64>,
}

impl AppearanceTarget {
    pub fn new(
        extractor: &dyn FeatureExtractor,
        reference: &Image,
        reference_mask: &BinaryMask,
        synth_mask: &BinaryMask,
    ) -> Result<Self> {
        Ok(Self {
            mean: mean_appearance(extractor, reference, reference_mask)?,
            synth_mask: synth_mask.clone(),
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn evaluate(
        &self,
        extractor: &dyn FeatureExtractor,
        synth: &Image,
        want_grad: bool,
    ) -> Result<(f64, Option<Image>)> {
        let (a, pull) = mean_appearance_vjp(extractor, synth, &self.synth_mask)?;
        let diff: Vec<f64> = a.iter().zip(&self.mean).map(|(x, t)| x - t).collect();
        let loss = diff.iter().map(|d| d * d).sum();
        let grad = if want_grad {
            let g: Vec<f64> = diff.iter().map(|d| 2.0 * d).collect();
            Some(pull(&g)?)
        } else {
            None
        };
        Ok((loss, grad))
    }
}

/// Mean squared Frobenius distance between Gram matrices of the pixel-
/// masked reference and synthesized images over the style blocks.
#[derive(Clone, Debug)]
pub struct StyleTarget {
    synth_mask: BinaryMask,
    grams: Vec<GramMatrix>,
}

impl StyleTarget {
    pub fn new(
        extractor: &dyn FeatureExtractor,
        reference: &Image,
        reference_mask: &BinaryMask,
        synth_mask: &BinaryMask,
    ) -> Result<Self> {
        require_nonempty(reference_mask, "style reference")?;
        require_nonempty(synth_mask, "style synthesis")?;
        let feats = extractor.forward(&reference.masked(reference_mask)?, &block_taps(&STYLE_LEVELS))?;
        Ok(Self {
            synth_mask: synth_mask.clone(),
            grams: feats.iter().map(gram).collect(),
        })
    }

    pub fn evaluate(
        &self,
        extractor: &dyn FeatureExtractor,
        synth: &Image,
        want_grad: bool,
    ) -> Result<(f64, Option<Image>)> {
        let masked = synth.masked(&self.synth_mask)?;
        let taps = block_taps(&STYLE_LEVELS);
        let feats = extractor.forward(&masked, &taps)?;
        let k = 1.0 / STYLE_LEVELS.len() as f64;
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(feats.len());
        for (target, f) in self.grams.iter().zip(&feats) {
            let current = gram(f);
            total += target.squared_distance(&current)?;
            if want_grad {
                let mut g = gram_distance_grad(f, &gram_difference(target, &current));
                g.values_mut().iter_mut().for_each(|v| *v *= k);
                grads.push(g);
            }
        }
        let grad = if want_grad {
            let mut gi = extractor.backward(&masked, &taps, &grads)?;
            gi.apply_mask(&self.synth_mask);
            Some(gi)
        } else {
            None
        };
        Ok((total * k, grad))
    }
}

const FACE_LEVELS: [usize; NUM_LEVELS] = [1, 2, 3, 4, 5];

/// Mean perceptual distance over all five blocks inside the face target mask.
pub fn face_loss(extractor: &dyn FeatureExtractor, identity: &Image, synth: &Image, target_mask: &BinaryMask) -> Result<f64> {
    identity.check_same_shape(synth, "face_loss")?;
    let t = PerceptualTarget::new(extractor, identity, target_mask, &FACE_LEVELS)?;
    Ok(t.evaluate(extractor, synth, false)?.0)
}

pub fn face_target(extractor: &dyn FeatureExtractor, identity: &Image, target_mask: &BinaryMask) -> Result<PerceptualTarget> {
    PerceptualTarget::new(extractor, identity, target_mask, &FACE_LEVELS)
}

/// Mean perceptual distance over the two deepest blocks inside the eroded
/// hair mask.
pub fn structure_loss(extractor: &dyn FeatureExtractor, shape_ref: &Image, synth: &Image, eroded_hair: &BinaryMask) -> Result<f64> {
    shape_ref.check_same_shape(synth, "structure_loss")?;
    let t = structure_target(extractor, shape_ref, eroded_hair)?;
    Ok(t.evaluate(extractor, synth, false)?.0)
}

pub fn structure_target(extractor: &dyn FeatureExtractor, shape_ref: &Image, eroded_hair: &BinaryMask) -> Result<PerceptualTarget> {
    PerceptualTarget::new(extractor, shape_ref, eroded_hair, &STRUCTURE_LEVELS)
}

pub fn appearance_loss(
    extractor: &dyn FeatureExtractor,
    app_ref: &Image,
    app_mask: &BinaryMask,
    synth: &Image,
    synth_hair_mask: &BinaryMask,
) -> Result<f64> {
    let t = AppearanceTarget::new(extractor, app_ref, app_mask, synth_hair_mask)?;
    Ok(t.evaluate(extractor, synth, false)?.0)
}

pub fn style_loss(
    extractor: &dyn FeatureExtractor,
    app_ref: &Image,
    app_mask: &BinaryMask,
    synth: &Image,
    synth_hair_mask: &BinaryMask,
) -> Result<f64> {
    let t = StyleTarget::new(extractor, app_ref, app_mask, synth_hair_mask)?;
    Ok(t.evaluate(extractor, synth, false)?.0)
}

fn check_noise_side(len: usize) -> Result<usize> {
    let side = (len as f64).sqrt().round() as usize;
    if side * side != len || !side.is_power_of_two() {
        return Err(Error::shape(format!(
            "noise map with {len} values is not a square with power-of-two side"
        )));
    }
    Ok(side)
}

fn pool2(map: &[f64], side: usize) -> Vec<f64> {
    let h = side / 2;
    let mut out = vec![0.0; h * h];
    for y in 0..h {
        for x in 0..h {
            let i = 2 * y * side + 2 * x;
            out[y * h + x] = 0.25 * (map[i] + map[i + 1] + map[i + side] + map[i + side + 1]);
        }
    }
    out
}

/// Successive 2×2 means of a square map down to 8×8. Maps already at or
/// below 8×8 give no extra levels.
pub fn pyramid_down(map: &[f64]) -> Result<Vec<Vec<f64>>> {
    let mut side = check_noise_side(map.len())?;
    let mut levels = Vec::new();
    let mut cur = map.to_vec();
    while side > PYRAMID_FLOOR {
        cur = pool2(&cur, side);
        side /= 2;
        levels.push(cur.clone());
    }
    Ok(levels)
}

/// Squared mean of horizontal and vertical neighbour products of one level
/// (indices wrap around), with the gradient on the level.
fn autocorrelation(level: &[f64], side: usize) -> (f64, Vec<f64>) {
    let r2 = (side * side) as f64;
    let at = |y: usize, x: usize| level[y * side + x];
    let (mut sh, mut sv) = (0.0, 0.0);
    for y in 0..side {
        for x in 0..side {
            sh += at(y, x) * at(y, (x + side - 1) % side);
            sv += at(y, x) * at((y + side - 1) % side, x);
        }
    }
    let (ah, av) = (sh / r2, sv / r2);
    let mut grad = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let h = at(y, (x + side - 1) % side) + at(y, (x + 1) % side);
            let v = at((y + side - 1) % side, x) + at((y + 1) % side, x);
            grad[y * side + x] = 2.0 * ah / r2 * h + 2.0 * av / r2 * v;
        }
    }
    (ah * ah + av * av, grad)
}

fn standardized(map: &[f64]) -> (Vec<f64>, f64, f64) {
    let n = map.len() as f64;
    let mean = map.iter().sum::<f64>() / n;
    let var = map.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let floored = var <= NOISE_VARIANCE_FLOOR;
    let sd = var.max(NOISE_VARIANCE_FLOOR).sqrt();
    let out = map.iter().map(|v| (v - mean) / sd).collect();
    (out, sd, if floored { 0.0 } else { 1.0 })
}

/// Penalty of one noise map and its gradient.
pub fn noise_penalty_with_grad(map: &[f64]) -> Result<(f64, Vec<f64>)> {
    let side = check_noise_side(map.len())?;
    let (z, sd, var_live) = standardized(map);
    let mut sides = vec![side];
    let mut levels = vec![z.clone()];
    let mut s = side;
    while s > PYRAMID_FLOOR {
        let next = pool2(levels.last().expect("nonempty"), s);
        s /= 2;
        sides.push(s);
        levels.push(next);
    }
    let mut total = 0.0;
    // back-propagate from the coarsest level, accumulating through pooling
    let mut g_up: Option<Vec<f64>> = None;
    for i in (0..levels.len()).rev() {
        let (p, mut g) = autocorrelation(&levels[i], sides[i]);
        total += p;
        if let Some(gu) = g_up.take() {
            let s = sides[i];
            for y in 0..s {
                for x in 0..s {
                    g[y * s + x] += 0.25 * gu[(y / 2) * (s / 2) + x / 2];
                }
            }
        }
        g_up = Some(g);
    }
    let gz = g_up.expect("at least one level");
    // through z = (n − μ)/σ: g_n = (g − mean(g) − z·mean(g·z)·[σ² live]) / σ
    let n = gz.len() as f64;
    let gm = gz.iter().sum::<f64>() / n;
    let gzz = gz.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / n;
    let grad = gz
        .iter()
        .zip(&z)
        .map(|(g, zv)| (g - gm - zv * gzz * var_live) / sd)
        .collect();
    Ok((total, grad))
}

/// Sum over maps and pyramid levels of the squared wrap-around
/// neighbour autocorrelations of the standardised maps.
pub fn noise_regularization(maps: &[&[f64]]) -> Result<f64> {
    maps.iter().map(|m| noise_penalty_with_grad(m).map(|(p, _)| p)).sum()
}
