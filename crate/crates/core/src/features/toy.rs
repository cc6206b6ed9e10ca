//! Linear stand-in for a convolutional feature extractor.
//!
//! Block `b` average-pools the image over `2^(b−1)`-pixel squares and mixes
//! the three colour channels into `2^(b+2)` feature channels with a fixed
//! seeded Gaussian matrix (no bias). The appearance tap mixes unpooled
//! pixels into 8 channels with its own matrix. Everything is linear, so
//! `extract(αx + βy) = α·extract(x) + β·extract(y)` and the backward pass
//! is the exact transpose.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{check_backward_args, check_taps, tap_resolution, FeatureExtractor, FeatureMap, LevelGeometry, Tap, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::image::Image;

const INPUT_CHANNELS: usize = 3;
const APPEARANCE_CHANNELS: usize = 8;

#[derive(Clone, Debug)]
pub struct ToyExtractor {
    levels: Vec<LevelGeometry>,
    /// Row-major `C_b × 3` mixing matrices, one per block.
    mixing: Vec<Vec<f64>>,
    appearance_mixing: Vec<f64>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let scale = 1.0 / (cols as f64).sqrt();
    (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

impl ToyExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels: Vec<LevelGeometry> = (1..=NUM_LEVELS)
            .map(|b| LevelGeometry {
                channels: 1 << (b + 2),
                stride: 1 << (b - 1),
            })
            .collect();
        let mixing = levels
            .iter()
            .map(|g| gaussian_matrix(&mut rng, g.channels, INPUT_CHANNELS))
            .collect();
        let appearance_mixing = gaussian_matrix(&mut rng, APPEARANCE_CHANNELS, INPUT_CHANNELS);
        Self {
            levels,
            mixing,
            appearance_mixing,
        }
    }

    fn tap_params(&self, tap: Tap) -> (LevelGeometry, &[f64]) {
        match tap {
            Tap::Appearance => (self.appearance_geometry(), &self.appearance_mixing),
            Tap::Block(b) => (self.levels[b - 1], &self.mixing[b - 1]),
        }
    }

    /// Mixing matrix of a tap, row-major `C × 3`.
    pub fn mixing(&self, tap: Tap) -> Result<&[f64]> {
        self.geometry_of(tap)?;
        Ok(self.tap_params(tap).1)
    }
}

fn pool(image: &Image, stride: usize) -> Vec<f64> {
    let (h, w) = tap_resolution(image, stride);
    let inv = 1.0 / (stride * stride) as f64;
    let mut out = vec![0.0; INPUT_CHANNELS * h * w];
    for c in 0..INPUT_CHANNELS {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dy in 0..stride {
                    for dx in 0..stride {
                        s += image.get(c, y * stride + dy, x * stride + dx);
                    }
                }
                out[(c * h + y) * w + x] = s * inv;
            }
        }
    }
    out
}

impl FeatureExtractor for ToyExtractor {
    fn name(&self) -> &str {
        "toy"
    }

    fn levels(&self) -> &[LevelGeometry] {
        &self.levels
    }

    fn appearance_geometry(&self) -> LevelGeometry {
        LevelGeometry {
            channels: APPEARANCE_CHANNELS,
            stride: 1,
        }
    }

    fn forward(&self, image: &Image, taps: &[Tap]) -> Result<Vec<FeatureMap>> {
        check_taps(self, taps)?;
        if image.channels() != INPUT_CHANNELS {
            return Err(Error::shape("toy extractor expects 3-channel images"));
        }
        taps.iter()
            .map(|&tap| {
                let (geo, mix) = self.tap_params(tap);
                let (h, w) = tap_resolution(image, geo.stride);
                let pooled = pool(image, geo.stride);
                let n = h * w;
                let mut out = vec![0.0; geo.channels * n];
                for o in 0..geo.channels {
                    let dst = &mut out[o * n..(o + 1) * n];
                    for i in 0..INPUT_CHANNELS {
                        let m = mix[o * INPUT_CHANNELS + i];
                        for (d, s) in dst.iter_mut().zip(&pooled[i * n..(i + 1) * n]) {
                            *d += m * s;
                        }
                    }
                }
                FeatureMap::from_vec(geo.channels, h, w, out)
            })
            .collect()
    }

    fn backward(&self, image: &Image, taps: &[Tap], grads: &[FeatureMap]) -> Result<Image> {
        check_backward_args(self, image, taps, grads)?;
        let mut out = Image::zeros(INPUT_CHANNELS, image.height(), image.width());
        for (&tap, g) in taps.iter().zip(grads) {
            let (geo, mix) = self.tap_params(tap);
            let s = geo.stride;
            let inv = 1.0 / (s * s) as f64;
            for i in 0..INPUT_CHANNELS {
                for y in 0..g.height() {
                    for x in 0..g.width() {
                        let mut acc = 0.0;
                        for o in 0..geo.channels {
                            acc += mix[o * INPUT_CHANNELS + i] * g.get(o, y, x);
                        }
                        acc *= inv;
                        for dy in 0..s {
                            for dx in 0..s {
                                let (py, px) = (y * s + dy, x * s + dx);
                                let v = out.get(i, py, px) + acc;
                                out.set(i, py, px, v);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::extract;
    use rand::Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(3, h, w, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn geometry_table() {
        let e = ToyExtractor::new(0);
        let ch: Vec<usize> = e.levels().iter().map(|g| g.channels).collect();
        let st: Vec<usize> = e.levels().iter().map(|g| g.stride).collect();
        assert_eq!(ch, vec![8, 16, 32, 64, 128]);
        assert_eq!(st, vec![1, 2, 4, 8, 16]);
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let e = ToyExtractor::new(4);
        let img = Image::zeros(3, 32, 32);
        for b in 1..=5 {
            assert!(extract(&e, &img, b).unwrap().values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn deterministic() {
        let e = ToyExtractor::new(4);
        let img = random_image(1, 32, 32);
        for b in 1..=5 {
            assert_eq!(extract(&e, &img, b).unwrap(), extract(&e, &img, b).unwrap());
        }
        assert_eq!(
            ToyExtractor::new(4).mixing(Tap::Block(3)).unwrap(),
            e.mixing(Tap::Block(3)).unwrap()
        );
    }

    #[test]
    fn level_one_matches_explicit_loops() {
        let e = ToyExtractor::new(9);
        let img = random_image(2, 4, 4);
        let f = extract(&e, &img, 1).unwrap();
        let m = e.mixing(Tap::Block(1)).unwrap();
        for o in 0..8 {
            for y in 0..4 {
                for x in 0..4 {
                    let mut want = 0.0;
                    for i in 0..3 {
                        want += m[o * 3 + i] * img.get(i, y, x);
                    }
                    assert!((f.get(o, y, x) - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn linear_in_the_image() {
        let e = ToyExtractor::new(7);
        let x = random_image(3, 32, 32);
        let y = random_image(4, 32, 32);
        let (a, b) = (0.7, -1.3);
        let mut combo = x.clone();
        combo.scale(a);
        combo.add_scaled(&y, b);
        for lvl in 1..=5 {
            let fc = extract(&e, &combo, lvl).unwrap();
            let fx = extract(&e, &x, lvl).unwrap();
            let fy = extract(&e, &y, lvl).unwrap();
            for i in 0..fc.values().len() {
                let want = a * fx.values()[i] + b * fy.values()[i];
                assert!((fc.values()[i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_the_adjoint() {
        // <J x, g> == <x, Jᵀ g> for every tap
        let e = ToyExtractor::new(5);
        let x = random_image(8, 32, 32);
        let taps = [Tap::Appearance, Tap::Block(1), Tap::Block(3), Tap::Block(5)];
        let feats = e.forward(&x, &taps).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let grads: Vec<FeatureMap> = feats
            .iter()
            .map(|f| {
                FeatureMap::from_vec(
                    f.channels(),
                    f.height(),
                    f.width(),
                    (0..f.values().len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        let lhs: f64 = feats
            .iter()
            .zip(&grads)
            .map(|(f, g)| f.values().iter().zip(g.values()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let back = e.backward(&x, &taps, &grads).unwrap();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }
}
