use super::BinaryMask;
use crate::error::{Error, Result};
use crate::image::Image;

/// Stop once no hole pixel moves by more than this in a sweep.
pub const INPAINT_TOLERANCE: f64 = 1e-4;

const MAX_SWEEPS: usize = 20_000;

/// Harmonic fill of `hole`: each hole pixel converges to the mean of its
/// in-grid 4-neighbours (Gauss–Seidel sweeps, raster order). Pixels outside
/// the hole are copied through untouched.
pub fn fallback_inpaint(image: &Image, hole: &BinaryMask) -> Result<Image> {
    image.check_mask(hole, "fallback_inpaint")?;
    let area = hole.area();
    if area == 0 {
        return Ok(image.clone());
    }
    if area == hole.len() {
        return Err(Error::InpaintUnderdetermined);
    }
    let (h, w) = (image.height(), image.width());
    let cells: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| hole.get(y, x))
        .collect();

    let mut out = image.clone();
    for c in 0..image.channels() {
        let plane = out.plane_mut(c);
        let known: Vec<f64> = plane
            .iter()
            .zip(hole.as_slice())
            .filter(|(_, &m)| !m)
            .map(|(&v, _)| v)
            .collect();
        let seed = known.iter().sum::<f64>() / known.len() as f64;
        for &(y, x) in &cells {
            plane[y * w + x] = seed;
        }
        for _ in 0..MAX_SWEEPS {
            let mut max_delta: f64 = 0.0;
            for &(y, x) in &cells {
                let mut sum = 0.0;
                let mut n = 0.0;
                if y > 0 {
                    sum += plane[(y - 1) * w + x];
                    n += 1.0;
                }
                if y + 1 < h {
                    sum += plane[(y + 1) * w + x];
                    n += 1.0;
                }
                if x > 0 {
                    sum += plane[y * w + x - 1];
                    n += 1.0;
                }
                if x + 1 < w {
                    sum += plane[y * w + x + 1];
                    n += 1.0;
                }
                let v = sum / n;
                max_delta = max_delta.max((v - plane[y * w + x]).abs());
                plane[y * w + x] = v;
            }
            if max_delta < INPAINT_TOLERANCE {
                break;
            }
        }
    }
    Ok(out)
}
