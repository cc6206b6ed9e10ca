//! 3×3 (8-connected) binary morphology with stopping calibrated to a
//! relative change in foreground area.
//!
//! Whole iterations are applied while they stay on the near side of the
//! target area. If the next whole iteration would land outside the
//! tolerance band on the far side, only part of its ring is applied: ring
//! pixels are ranked by how many 8-neighbours they share with the current
//! foreground (most for growth, fewest for shrinkage), ties broken in raster
//! order, and taken until the target area is met exactly.

use super::BinaryMask;
use crate::error::{Error, Result};

/// Relative tolerance on achieved area versus target area.
pub const AREA_TOLERANCE: f64 = 0.05;

/// Erosion on masks this small is refused and flagged as degenerate.
const MIN_ERODIBLE_AREA: usize = 9;

#[derive(Clone, Debug, PartialEq)]
pub struct MorphOutcome {
    pub mask: BinaryMask,
    /// Whole 3×3 iterations applied.
    pub iterations: usize,
    /// Whether a partial ring was applied after the whole iterations.
    pub partial: bool,
    pub target_area: usize,
    /// `achieved area / original area`.
    pub achieved_ratio: f64,
    /// Set when the requested change could not be applied (saturated
    /// dilation or a mask too small to erode).
    pub degenerate: bool,
}

impl MorphOutcome {
    pub fn area(&self) -> usize {
        self.mask.area()
    }
}

fn neighbours(mask: &BinaryMask, y: usize, x: usize) -> usize {
    let (h, w) = (mask.height() as isize, mask.width() as isize);
    let mut n = 0;
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            if dy == 0 && dx == 0 {
                continue;
            }
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            if ny >= 0 && ny < h && nx >= 0 && nx < w && mask.get(ny as usize, nx as usize) {
                n += 1;
            }
        }
    }
    n
}

/// One 3×3 dilation step; pixels outside the grid are ignored.
pub fn dilate3x3(mask: &BinaryMask) -> BinaryMask {
    BinaryMask::from_fn(mask.height(), mask.width(), |y, x| {
        mask.get(y, x) || neighbours(mask, y, x) > 0
    })
}

/// One 3×3 erosion step; pixels outside the grid count as background, so
/// border pixels always erode.
pub fn erode3x3(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    BinaryMask::from_fn(h, w, |y, x| {
        mask.get(y, x) && y > 0 && x > 0 && y + 1 < h && x + 1 < w && neighbours(mask, y, x) == 8
    })
}

fn within_tolerance(area: usize, target: usize) -> bool {
    (area as f64 - target as f64).abs() <= AREA_TOLERANCE * target as f64
}

#[derive(Clone, Copy)]
enum Direction {
    Grow,
    Shrink,
}

fn partial_ring(current: &BinaryMask, next: &BinaryMask, target: usize, dir: Direction) -> BinaryMask {
    let mut ring: Vec<(usize, usize, usize)> = Vec::new();
    for y in 0..current.height() {
        for x in 0..current.width() {
            if current.get(y, x) != next.get(y, x) {
                ring.push((neighbours(current, y, x), y, x));
            }
        }
    }
    match dir {
        Direction::Grow => ring.sort_by(|a, b| b.0.cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2)))),
        Direction::Shrink => ring.sort_by(|a, b| a.0.cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2)))),
    }
    let mut out = current.clone();
    let area = current.area();
    let steps = match dir {
        Direction::Grow => target.saturating_sub(area),
        Direction::Shrink => area.saturating_sub(target),
    };
    for &(_, y, x) in ring.iter().take(steps) {
        out.set(y, x, matches!(dir, Direction::Grow));
    }
    out
}

fn calibrate(mask: &BinaryMask, target: usize, dir: Direction) -> MorphOutcome {
    let original = mask.area();
    let mut current = mask.clone();
    let mut iterations = 0;
    loop {
        let area = current.area();
        if within_tolerance(area, target) {
            return finish(current, iterations, false, target, original, false);
        }
        let next = match dir {
            Direction::Grow => dilate3x3(&current),
            Direction::Shrink => erode3x3(&current),
        };
        let next_area = next.area();
        if next_area == area {
            // saturated: nothing more can change
            return finish(current, iterations, false, target, original, true);
        }
        let crossed = match dir {
            Direction::Grow => next_area >= target,
            Direction::Shrink => next_area <= target,
        };
        if crossed {
            if within_tolerance(next_area, target) && next_area > 0 {
                return finish(next, iterations + 1, false, target, original, false);
            }
            let partial = partial_ring(&current, &next, target, dir);
            return finish(partial, iterations, true, target, original, false);
        }
        current = next;
        iterations += 1;
    }
}

fn finish(
    mask: BinaryMask,
    iterations: usize,
    partial: bool,
    target_area: usize,
    original: usize,
    degenerate: bool,
) -> MorphOutcome {
    let achieved_ratio = mask.area() as f64 / original as f64;
    MorphOutcome {
        mask,
        iterations,
        partial,
        target_area,
        achieved_ratio,
        degenerate,
    }
}

/// Grows `mask` until its area is as close as possible to
/// `(1 + area_growth) × area`.
pub fn dilate(mask: &BinaryMask, area_growth: f64) -> Result<MorphOutcome> {
    if !(area_growth > 0.0 && area_growth <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "area_growth must be in (0, 1], got {area_growth}"
        )));
    }
    let area = mask.area();
    if area == 0 {
        return Err(Error::EmptyMask);
    }
    let target = ((1.0 + area_growth) * area as f64).round() as usize;
    if target > mask.len() {
        // the grid cannot hold the requested area
        let mut out = calibrate(mask, mask.len(), Direction::Grow);
        out.degenerate |= !within_tolerance(out.mask.area(), target);
        out.target_area = target;
        return Ok(out);
    }
    Ok(calibrate(mask, target, Direction::Grow))
}

/// Shrinks `mask` until its area is as close as possible to
/// `(1 − area_shrink) × area`. Never empties a mask.
pub fn erode(mask: &BinaryMask, area_shrink: f64) -> Result<MorphOutcome> {
    if !(area_shrink > 0.0 && area_shrink < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "area_shrink must be in (0, 1), got {area_shrink}"
        )));
    }
    let area = mask.area();
    if area == 0 {
        return Err(Error::EmptyMask);
    }
    let target = (((1.0 - area_shrink) * area as f64).round() as usize).max(1);
    if area <= MIN_ERODIBLE_AREA {
        return Ok(finish(mask.clone(), 0, false, target, area, true));
    }
    Ok(calibrate(mask, target, Direction::Shrink))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(side: usize) -> BinaryMask {
        let o = (64 - side) / 2;
        BinaryMask::rect(64, 64, o, o, o + side, o + side)
    }

    #[test]
    fn one_step_areas_match_hand_count() {
        // 10x10 grows to 12x12 and shrinks to 8x8 under one 3x3 step
        assert_eq!(dilate3x3(&square(10)).area(), 144);
        assert_eq!(erode3x3(&square(10)).area(), 64);
    }

    #[test]
    fn dilate_square_by_twenty_percent() {
        let m = square(10);
        let out = dilate(&m, 0.2).unwrap();
        assert!((114..=126).contains(&out.area()), "area {}", out.area());
        assert!(m.is_subset_of(&out.mask));
        assert_eq!(out.target_area, 120);
        assert!(out.partial);
        assert_eq!(out.iterations, 0);
        assert!((out.achieved_ratio - out.area() as f64 / 100.0).abs() < 1e-15);
    }

    #[test]
    fn dilate_takes_whole_steps_when_they_fit() {
        // 30x30 = 900 -> one step gives 32x32 = 1024, target 990 ± 49.5
        let m = square(30);
        let out = dilate(&m, 0.1).unwrap();
        assert_eq!(out.iterations, 1);
        assert!(!out.partial);
        assert_eq!(out.area(), 1024);
    }

    #[test]
    fn dilate_identity_when_already_close() {
        let m = square(10);
        let out = dilate(&m, 0.04).unwrap();
        assert_eq!(out.mask, m);
        assert_eq!(out.iterations, 0);
        assert!(!out.partial);
    }

    #[test]
    fn dilate_full_mask_is_saturated() {
        let m = BinaryMask::full(8, 8);
        let out = dilate(&m, 0.2).unwrap();
        assert_eq!(out.mask, m);
        assert!(out.degenerate);
    }

    #[test]
    fn erode_square_by_twenty_percent() {
        let m = square(10);
        let out = erode(&m, 0.2).unwrap();
        assert!((76..=84).contains(&out.area()), "area {}", out.area());
        assert!(out.mask.is_subset_of(&m));
    }

    #[test]
    fn erode_single_pixel_is_degenerate() {
        let mut m = BinaryMask::empty(8, 8);
        m.set(3, 3, true);
        let out = erode(&m, 0.2).unwrap();
        assert_eq!(out.mask, m);
        assert!(out.degenerate);
    }

    #[test]
    fn erode_full_mask_gives_strict_subset() {
        let m = BinaryMask::full(16, 16);
        let out = erode(&m, 0.2).unwrap();
        assert!(out.mask.is_subset_of(&m));
        assert!(out.area() < m.area());
        assert!(within_tolerance(out.area(), 205));
    }

    #[test]
    fn empty_and_bad_parameters() {
        let z = BinaryMask::empty(4, 4);
        assert!(matches!(dilate(&z, 0.2), Err(Error::EmptyMask)));
        assert!(matches!(erode(&z, 0.2), Err(Error::EmptyMask)));
        let m = square(10);
        assert!(dilate(&m, 0.0).is_err());
        assert!(dilate(&m, 1.5).is_err());
        assert!(erode(&m, 1.0).is_err());
    }

    fn arb_mask() -> impl Strategy<Value = BinaryMask> {
        (4usize..24, 4usize..24).prop_flat_map(|(h, w)| {
            proptest::collection::vec(prop::bool::weighted(0.4), h * w)
                .prop_map(move |b| BinaryMask::from_bits(h, w, b).unwrap())
        })
    }

    proptest! {
        #[test]
        fn dilate_is_extensive(m in arb_mask(), g in 0.01f64..1.0) {
            prop_assume!(!m.is_empty());
            let out = dilate(&m, g).unwrap();
            prop_assert!(m.is_subset_of(&out.mask));
            if !out.degenerate {
                prop_assert!(within_tolerance(out.area(), out.target_area));
            }
        }

        #[test]
        fn erode_is_anti_extensive_and_nonempty(m in arb_mask(), s in 0.01f64..0.99) {
            prop_assume!(!m.is_empty());
            let out = erode(&m, s).unwrap();
            prop_assert!(out.mask.is_subset_of(&m));
            prop_assert!(!out.mask.is_empty());
            if !out.degenerate {
                prop_assert!(within_tolerance(out.area(), out.target_area));
            }
        }
    }
}
