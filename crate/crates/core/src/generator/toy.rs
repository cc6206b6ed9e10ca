//! Affine stand-in for a style-based generator, 32² output.
//!
//! `image = 0.5 + Σ_l P_l w_l + Σ_j 0.05·up(n_j)` where `P_l` maps the
//! 8-dimensional style vector of layer `l` to a seeded random pattern at
//! `2^l` pixels per side (`l = 1..=5`) (nearest-upsampled to 32), so early layers
//! control coarse layout and late layers fine detail. Noise maps are
//! nearest-upsampled and added to all three channels.
//!
//! Channel 0 doubles as the hair signal: pixels whose channel-0 value
//! exceeds [`ToyGenerator::HAIR_THRESHOLD`] count as hair.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{GeneratorBackend, LatentGeometry, LatentGrad, LatentState};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask_ops::BinaryMask;

const RESOLUTION: usize = 32;
const LAYERS: usize = 5;
const DIM: usize = 8;
const NOISE_SIDES: [usize; 5] = [4, 8, 16, 32, 32];
/// Gain applied to every upsampled noise map.
pub const NOISE_GAIN: f64 = 0.05;
/// Per-entry standard deviation of the projection patterns.
const PROJ_SCALE: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct ToyGenerator {
    geometry: LatentGeometry,
    /// Pattern side per layer.
    sides: Vec<usize>,
    /// Per layer: `D × 3 × side × side`.
    proj: Vec<Vec<f64>>,
    mean_latent: Vec<f64>,
}

impl ToyGenerator {
    pub const HAIR_CHANNEL: usize = 0;
    pub const HAIR_THRESHOLD: f64 = 0.6;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sides: Vec<usize> = (1..=LAYERS).map(|l| 1 << l).collect();
        let normal = Normal::new(0.0, PROJ_SCALE).expect("finite scale");
        let proj = sides
            .iter()
            .map(|&s| (0..DIM * 3 * s * s).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let mean_latent = (0..DIM)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.5 * z
            })
            .collect();
        Self {
            geometry: LatentGeometry {
                num_layers: LAYERS,
                dim: DIM,
                noise_sides: NOISE_SIDES.to_vec(),
                resolution: RESOLUTION,
            },
            sides,
            proj,
            mean_latent,
        }
    }

    /// Thresholded hair-signal channel.
    pub fn hair_mask(image: &Image) -> Result<BinaryMask> {
        if image.channels() < Self::HAIR_CHANNEL + 1 {
            return Err(Error::shape("image has no hair-signal channel"));
        }
        let plane = image.plane(Self::HAIR_CHANNEL);
        BinaryMask::from_bits(
            image.height(),
            image.width(),
            plane.iter().map(|&v| v > Self::HAIR_THRESHOLD).collect(),
        )
    }

    #[inline]
    fn proj_at(&self, l: usize, d: usize, c: usize, py: usize, px: usize) -> f64 {
        let s = self.sides[l];
        self.proj[l][((d * 3 + c) * s + py) * s + px]
    }
}

impl GeneratorBackend for ToyGenerator {
    fn name(&self) -> &str {
        "toy"
    }

    fn geometry(&self) -> &LatentGeometry {
        &self.geometry
    }

    fn mean_latent(&self) -> &[f64] {
        &self.mean_latent
    }

    fn synthesize(&self, state: &LatentState) -> Result<Image> {
        state.check_geometry(&self.geometry)?;
        let r = RESOLUTION;
        let mut img = Image::filled(3, r, r, 0.5);
        for l in 0..LAYERS {
            let s = self.sides[l];
            let f = r / s;
            // pattern at native side, then nearest-upsample
            let mut pat = vec![0.0; 3 * s * s];
            for (d, &wd) in state.w(l).iter().enumerate() {
                for c in 0..3 {
                    for p in 0..s * s {
                        pat[c * s * s + p] += wd * self.proj_at(l, d, c, p / s, p % s);
                    }
                }
            }
            for c in 0..3 {
                for y in 0..r {
                    for x in 0..r {
                        let v = img.get(c, y, x) + pat[(c * s + y / f) * s + x / f];
                        img.set(c, y, x, v);
                    }
                }
            }
        }
        for (j, &s) in NOISE_SIDES.iter().enumerate() {
            let f = r / s;
            let n = state.noise(j);
            for c in 0..3 {
                for y in 0..r {
                    for x in 0..r {
                        let v = img.get(c, y, x) + NOISE_GAIN * n[(y / f) * s + x / f];
                        img.set(c, y, x, v);
                    }
                }
            }
        }
        Ok(img)
    }

    fn synthesize_vjp(&self, state: &LatentState, grad_image: &Image) -> Result<LatentGrad> {
        state.check_geometry(&self.geometry)?;
        if grad_image.channels() != 3 || grad_image.height() != RESOLUTION || grad_image.width() != RESOLUTION {
            return Err(Error::shape("image gradient does not match generator output"));
        }
        let r = RESOLUTION;
        let mut out = LatentState::zeros(&self.geometry);
        for l in 0..LAYERS {
            let s = self.sides[l];
            let f = r / s;
            // sum the image gradient over each upsampled cell
            let mut pooled = vec![0.0; 3 * s * s];
            for c in 0..3 {
                for y in 0..r {
                    for x in 0..r {
                        pooled[(c * s + y / f) * s + x / f] += grad_image.get(c, y, x);
                    }
                }
            }
            let gw = out.w_mut(l);
            for (d, g) in gw.iter_mut().enumerate() {
                let mut acc = 0.0;
                for c in 0..3 {
                    for p in 0..s * s {
                        acc += pooled[c * s * s + p] * self.proj_at(l, d, c, p / s, p % s);
                    }
                }
                *g = acc;
            }
        }
        for (j, &s) in NOISE_SIDES.iter().enumerate() {
            let f = r / s;
            let gn = out.noise_mut(j);
            for c in 0..3 {
                for y in 0..r {
                    for x in 0..r {
                        gn[(y / f) * s + x / f] += NOISE_GAIN * grad_image.get(c, y, x);
                    }
                }
            }
        }
        Ok(out)
    }
}
