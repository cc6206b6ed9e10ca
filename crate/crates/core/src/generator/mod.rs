//! Latent-variable image synthesizers with an extended latent (`L × D`)
//! and per-layer noise maps, both of which are optimisation variables.

mod stylesynth;
mod toy;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub use stylesynth::StyleSynth;
pub use toy::ToyGenerator;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentGeometry {
    /// Number of per-layer style vectors (`L`).
    pub num_layers: usize,
    /// Style-vector dimension (`D`).
    pub dim: usize,
    /// Side length of each square noise map.
    pub noise_sides: Vec<usize>,
    /// Output image side.
    pub resolution: usize,
}

impl LatentGeometry {
    pub fn w_len(&self) -> usize {
        self.num_layers * self.dim
    }

    pub fn noise_len(&self) -> usize {
        self.noise_sides.iter().map(|s| s * s).sum()
    }

    pub fn total_len(&self) -> usize {
        self.w_len() + self.noise_len()
    }

    /// Flat offset of noise map `j`.
    pub fn noise_offset(&self, j: usize) -> usize {
        self.w_len() + self.noise_sides[..j].iter().map(|s| s * s).sum::<usize>()
    }
}

/// `w⁺` rows followed by the noise maps, stored as one flat vector so the
/// optimiser and gradient projection can treat it as a single point.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    geometry: LatentGeometry,
    values: Vec<f64>,
}

/// Gradients share the layout of the state they differentiate.
pub type LatentGrad = LatentState;

impl LatentState {
    pub fn zeros(geometry: &LatentGeometry) -> Self {
        Self {
            values: vec![0.0; geometry.total_len()],
            geometry: geometry.clone(),
        }
    }

    pub fn from_vec(geometry: &LatentGeometry, values: Vec<f64>) -> Result<Self> {
        if values.len() != geometry.total_len() {
            return Err(Error::shape(format!(
                "latent vector has {} entries, geometry needs {}",
                values.len(),
                geometry.total_len()
            )));
        }
        Ok(Self {
            geometry: geometry.clone(),
            values,
        })
    }

    pub fn geometry(&self) -> &LatentGeometry {
        &self.geometry
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn w_plus(&self) -> &[f64] {
        &self.values[..self.geometry.w_len()]
    }

    pub fn w_plus_mut(&mut self) -> &mut [f64] {
        let n = self.geometry.w_len();
        &mut self.values[..n]
    }

    pub fn w(&self, layer: usize) -> &[f64] {
        let d = self.geometry.dim;
        &self.values[layer * d..(layer + 1) * d]
    }

    pub fn w_mut(&mut self, layer: usize) -> &mut [f64] {
        let d = self.geometry.dim;
        &mut self.values[layer * d..(layer + 1) * d]
    }

    pub fn num_noise(&self) -> usize {
        self.geometry.noise_sides.len()
    }

    pub fn noise(&self, j: usize) -> &[f64] {
        let o = self.geometry.noise_offset(j);
        let s = self.geometry.noise_sides[j];
        &self.values[o..o + s * s]
    }

    pub fn noise_mut(&mut self, j: usize) -> &mut [f64] {
        let o = self.geometry.noise_offset(j);
        let s = self.geometry.noise_sides[j];
        &mut self.values[o..o + s * s]
    }

    pub fn noise_maps(&self) -> Vec<&[f64]> {
        (0..self.num_noise()).map(|j| self.noise(j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn add_scaled(&mut self, other: &LatentState, s: f64) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
    }

    pub(crate) fn check_geometry(&self, geometry: &LatentGeometry) -> Result<()> {
        if &self.geometry != geometry {
            return Err(Error::shape(format!(
                "latent state geometry {:?} does not match backend {:?}",
                self.geometry, geometry
            )));
        }
        Ok(())
    }
}

pub trait GeneratorBackend: Send + Sync {
    fn name(&self) -> &str;

    fn geometry(&self) -> &LatentGeometry;

    /// `ŵ`, the D-dimensional mean latent.
    fn mean_latent(&self) -> &[f64];

    /// Unclamped image; callers clamp only for export.
    fn synthesize(&self, state: &LatentState) -> Result<Image>;

    /// Pulls a gradient on the synthesized image back to the latent state.
    fn synthesize_vjp(&self, state: &LatentState, grad_image: &Image) -> Result<LatentGrad>;
}

/// Standardise a map in place to zero mean and unit (population) variance.
pub fn standardize(map: &mut [f64]) {
    let n = map.len() as f64;
    let mean = map.iter().sum::<f64>() / n;
    let var = map.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.max(1e-8).sqrt();
    map.iter_mut().for_each(|v| *v = (*v - mean) / sd);
}

/// `ŵ` on every row; each noise map seeded-normal then standardised.
pub fn init_latent_state(backend: &dyn GeneratorBackend, seed: u64) -> LatentState {
    let geo = backend.geometry();
    let mut state = LatentState::zeros(geo);
    let mean = backend.mean_latent();
    for l in 0..geo.num_layers {
        state.w_mut(l).copy_from_slice(mean);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for j in 0..geo.noise_sides.len() {
        let map = state.noise_mut(j);
        for v in map.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        standardize(map);
    }
    state
}

/// `‖w⁺ − ŵ‖` over all `L × D` entries.
pub fn latent_distance(state: &LatentState, backend: &dyn GeneratorBackend) -> Result<f64> {
    state.check_geometry(backend.geometry())?;
    let mean = backend.mean_latent();
    let d = backend.geometry().dim;
    Ok(state
        .w_plus()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let diff = v - mean[i % d];
            diff * diff
        })
        .sum::<f64>()
        .sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn geometry_offsets() {
        let g = ToyGenerator::new(0).geometry().clone();
        assert_eq!(g.w_len(), 40);
        assert_eq!(g.noise_len(), 16 + 64 + 256 + 1024 + 1024);
        assert_eq!(g.noise_offset(0), 40);
        assert_eq!(g.noise_offset(2), 40 + 16 + 64);
    }

    #[test]
    fn init_is_seeded_and_standardised() {
        let g = ToyGenerator::new(1);
        let a = init_latent_state(&g, 7);
        assert_eq!(a, init_latent_state(&g, 7));
        assert_ne!(a, init_latent_state(&g, 8));
        for l in 0..5 {
            assert_eq!(a.w(l), g.mean_latent());
        }
        for j in 0..a.num_noise() {
            let m = a.noise(j);
            let n = m.len() as f64;
            let mean = m.iter().sum::<f64>() / n;
            let var = m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn latent_distance_cases() {
        let g = ToyGenerator::new(2);
        let mut s = init_latent_state(&g, 0);
        assert_eq!(latent_distance(&s, &g).unwrap(), 0.0);
        s.w_mut(3)[5] += 3.0;
        assert!((latent_distance(&s, &g).unwrap() - 3.0).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = init_latent_state(&g, 0);
        let offs: Vec<f64> = (0..40).map(|_| rng.random_range(-2.0..2.0)).collect();
        for (v, o) in s.w_plus_mut().iter_mut().zip(&offs) {
            *v += o;
        }
        let want = offs.iter().map(|o| o * o).sum::<f64>().sqrt();
        assert!((latent_distance(&s, &g).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let g = ToyGenerator::new(0);
        let other = LatentGeometry {
            num_layers: 2,
            dim: 8,
            noise_sides: vec![4],
            resolution: 32,
        };
        let s = LatentState::zeros(&other);
        assert!(matches!(g.synthesize(&s), Err(Error::Shape(_))));
        assert!(latent_distance(&s, &g).is_err());
        assert!(LatentState::from_vec(&other, vec![0.0; 3]).is_err());
    }
}
