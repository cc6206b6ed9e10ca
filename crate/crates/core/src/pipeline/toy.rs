//! Seeded tuples rendered by the toy generator. Hair is the generator's
//! hair-signal channel; the face is a fixed lower-centre disc minus the hair.
//!
//! Tuples are built around a hidden latent `w*`: the shape reference is
//! `G(w*)` and the identity agrees with it inside the face disc, so the
//! stage-1 target (identity face plus reference hair) has an exact solution.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Portrait, TransferTuple};
use crate::curation::NUM_LANDMARKS;
use crate::error::{Error, Result};
use crate::generator::{init_latent_state, GeneratorBackend, LatentState, ToyGenerator};
use crate::image::Image;
use crate::mask_ops::BinaryMask;

/// Standard deviation of the per-row latent offsets, coarse to fine.
const ROW_SPREAD: [f64; 5] = [0.7, 0.5, 0.25, 0.15, 0.1];
/// Minimum hair pixels for a toy portrait to be usable.
pub const MIN_TOY_HAIR: usize = 40;
const FACE_CENTRE: (f64, f64) = (21.0, 16.0);
const FACE_RADIUS: f64 = 9.0;

/// `ŵ` plus seeded offsets, larger on coarse rows so hair forms blobs.
pub fn toy_latent(generator: &ToyGenerator, seed: u64) -> LatentState {
    let mut s = init_latent_state(generator, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for (l, spread) in ROW_SPREAD.iter().enumerate() {
        for v in s.w_mut(l) {
            let z: f64 = rng.sample(StandardNormal);
            *v += spread * z;
        }
    }
    s
}

fn face_disc(side: usize) -> BinaryMask {
    BinaryMask::from_fn(side, side, |y, x| {
        let (dy, dx) = (y as f64 + 0.5 - FACE_CENTRE.0, x as f64 + 0.5 - FACE_CENTRE.1);
        dy * dy + dx * dx <= FACE_RADIUS * FACE_RADIUS
    })
}

pub fn toy_portrait(generator: &ToyGenerator, state: &LatentState) -> Result<Portrait> {
    let image = generator.synthesize(state)?.clamped();
    let hair = ToyGenerator::hair_mask(&image)?;
    let side = image.height();
    let face = face_disc(side).difference(&hair)?;
    Portrait::new(image, face, hair)
}

fn usable(p: &Portrait) -> bool {
    p.hair.area() >= MIN_TOY_HAIR && p.face.area() >= MIN_TOY_HAIR
}

/// Portrait from the first seed at or after `seed` whose masks are usable.
fn next_portrait(generator: &ToyGenerator, seed: &mut u64) -> Result<Portrait> {
    for _ in 0..1000 {
        let p = toy_portrait(generator, &toy_latent(generator, *seed))?;
        *seed += 1;
        if usable(&p) {
            return Ok(p);
        }
    }
    Err(Error::EmptyRegion("no usable toy portrait in 1000 seeds".into()))
}

/// `inside` within the face disc, `outside` elsewhere, with masks re-derived.
fn splice(inside: &Portrait, outside: &Portrait) -> Result<Portrait> {
    let side = inside.image.height();
    let disc = face_disc(side);
    let image = Image::from_fn(3, side, side, |c, y, x| {
        if disc.get(y, x) {
            inside.image.get(c, y, x)
        } else {
            outside.image.get(c, y, x)
        }
    });
    let hair = ToyGenerator::hair_mask(&image)?;
    let face = disc.difference(&hair)?;
    Portrait::new(image, face, hair)
}

/// Tuple from seeds derived from `seed`: shape reference `G(w*)`, identity
/// spliced from `G(w*)` (face disc) and an unrelated render (everything
/// else, hence different hair), appearance reference independent.
pub fn toy_tuple(generator: &ToyGenerator, seed: u64) -> Result<TransferTuple> {
    let mut s = seed.wrapping_mul(1000);
    for _ in 0..1000 {
        let shape = next_portrait(generator, &mut s)?;
        let other = next_portrait(generator, &mut s)?;
        let identity = splice(&shape, &other)?;
        if !usable(&identity) {
            continue;
        }
        return Ok(TransferTuple {
            id: format!("toy-{seed:03}"),
            identity,
            shape,
            appearance: next_portrait(generator, &mut s)?,
        });
    }
    Err(Error::EmptyRegion("no usable toy tuple in 1000 attempts".into()))
}

pub fn toy_suite(generator: &ToyGenerator, count: usize, base_seed: u64) -> Result<Vec<TransferTuple>> {
    (0..count as u64).map(|i| toy_tuple(generator, base_seed + i)).collect()
}

/// Writes portraits in the curation layout (`<stem>.png`, `.face.png`,
/// `.hair.png`, `.landmarks.json`) under `dir`, one per seed. Landmarks are
/// a fixed grid over the face disc.
pub fn write_toy_corpus(dir: &Path, generator: &ToyGenerator, seeds: &[u64]) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = Vec::new();
    for &seed in seeds {
        let mut s = seed;
        let p = next_portrait(generator, &mut s)?;
        let stem = format!("toy{seed:03}");
        p.image.save_png(dir.join(format!("{stem}.png")))?;
        p.face.save_png(dir.join(format!("{stem}.face.png")))?;
        p.hair.save_png(dir.join(format!("{stem}.hair.png")))?;
        let lm: Vec<[f64; 2]> = (0..NUM_LANDMARKS)
            .map(|k| {
                let a = k as f64 / NUM_LANDMARKS as f64 * std::f64::consts::TAU;
                [FACE_CENTRE.1 + 6.0 * a.cos(), FACE_CENTRE.0 + 6.0 * a.sin()]
            })
            .collect();
        let path = dir.join(format!("{stem}.landmarks.json"));
        std::fs::write(&path, serde_json::to_string(&lm)?).map_err(|e| Error::io(&path, e))?;
        stems.push(stem);
    }
    Ok(stems)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_is_seeded_and_usable() {
        let g = ToyGenerator::new(0);
        let a = toy_suite(&g, 4, 0).unwrap();
        assert_eq!(a, toy_suite(&g, 4, 0).unwrap());
        for t in &a {
            for p in [&t.identity, &t.shape, &t.appearance] {
                assert!(usable(p));
                assert!(p.face.is_disjoint(&p.hair));
            }
        }
        assert_ne!(a[0].identity, a[0].shape);
    }
}
