//! Binary masks: set algebra, area-calibrated morphology, ignore regions,
//! soft compositing and a diffusion fill for missing pixels.

mod blend;
mod inpaint;
mod morphology;

use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{Error, Result};

pub use blend::{default_feather_sigma, gaussian_alpha, soft_blend, BlendAlpha};
pub use inpaint::{fallback_inpaint, INPAINT_TOLERANCE};
pub use morphology::{dilate, dilate3x3, erode, erode3x3, MorphOutcome, AREA_TOLERANCE};

/// Gray levels strictly above this become foreground when a mask is decoded.
pub const MASK_THRESHOLD: u8 = 127;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BinaryMask({}x{}, area {})", self.height, self.width, self.area())
    }
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!(
                "mask {height}x{width} needs {} cells, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    /// Builds a mask from 0/1 bytes; any other value is rejected.
    pub fn from_u8(height: usize, width: usize, cells: &[u8]) -> Result<Self> {
        if let Some(bad) = cells.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidParameter(format!(
                "mask cells must be 0 or 1, found {bad}"
            )));
        }
        Self::from_bits(height, width, cells.iter().map(|&v| v == 1).collect())
    }

    /// Axis-aligned rectangle `[y0, y1) × [x0, x1)`.
    pub fn rect(height: usize, width: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> Self {
        Self::from_fn(height, width, |y, x| y >= y0 && y < y1 && x >= x0 && x < x1)
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
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.bits
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn check_same_shape(&self, other: &BinaryMask, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    fn zip_with(&self, other: &BinaryMask, what: &str, f: impl Fn(bool, bool) -> bool) -> Result<Self> {
        self.check_same_shape(other, what)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn union(&self, other: &BinaryMask) -> Result<Self> {
        self.zip_with(other, "union", |a, b| a || b)
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<Self> {
        self.zip_with(other, "intersection", |a, b| a && b)
    }

    pub fn difference(&self, other: &BinaryMask) -> Result<Self> {
        self.zip_with(other, "difference", |a, b| a && !b)
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|&b| !b).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.same_shape(other) && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn is_disjoint(&self, other: &BinaryMask) -> bool {
        self.same_shape(other) && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !(a && b))
    }

    /// Nearest-neighbour resample, sampling the source at cell centres.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        Self::from_fn(height, width, |y, x| {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64).floor() as usize;
            let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64).floor() as usize;
            self.get(sy.min(self.height - 1), sx.min(self.width - 1))
        })
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn from_gray(gray: &GrayImage) -> Self {
        let (w, h) = gray.dimensions();
        Self::from_fn(h as usize, w as usize, |y, x| {
            gray.get_pixel(x as u32, y as u32)[0] > MASK_THRESHOLD
        })
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    /// Reads an 8-bit mask file; colour files are converted to luma first.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let gray = image::open(path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Codec(other),
            })?
            .to_luma8();
        Ok(Self::from_gray(&gray))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_gray().save(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Codec(other),
        })
    }
}

/// `dilated − eroded`, the ring excluded from supervision.
pub fn ignore_region(dilated: &BinaryMask, eroded: &BinaryMask) -> Result<BinaryMask> {
    dilated.check_same_shape(eroded, "ignore_region")?;
    let outside = eroded
        .as_slice()
        .iter()
        .zip(dilated.as_slice())
        .filter(|(&e, &d)| e && !d)
        .count();
    if outside > 0 {
        return Err(Error::MaskOrder { outside });
    }
    dilated.difference(eroded)
}

/// Face pixels not covered by the dilated reference hair: `face ∩ ¬hair`.
pub fn face_target_mask(face: &BinaryMask, dilated_hair: &BinaryMask) -> Result<BinaryMask> {
    face.check_same_shape(dilated_hair, "face_target_mask")?;
    face.difference(dilated_hair)
}

pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_same_shape(b, "mask_iou")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Err(Error::UndefinedIoU);
    }
    Ok(inter as f64 / union as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ignore_region_of_equal_masks_is_empty() {
        let m = BinaryMask::rect(16, 16, 2, 2, 10, 10);
        assert!(ignore_region(&m, &m).unwrap().is_empty());
    }

    #[test]
    fn ignore_region_area_is_set_difference() {
        // 12x10 = 120 dilated, 8x10 = 80 eroded inside it
        let d = BinaryMask::rect(32, 32, 0, 0, 12, 10);
        let e = BinaryMask::rect(32, 32, 2, 0, 10, 10);
        assert_eq!((d.area(), e.area()), (120, 80));
        assert_eq!(ignore_region(&d, &e).unwrap().area(), 40);
    }

    #[test]
    fn concentric_squares_leave_a_ring() {
        let d = BinaryMask::rect(20, 20, 4, 4, 16, 16);
        let e = BinaryMask::rect(20, 20, 6, 6, 14, 14);
        let ring = ignore_region(&d, &e).unwrap();
        // counted independently: 144 - 64
        let mut count = 0;
        for y in 0..20 {
            for x in 0..20 {
                let outer = (4..16).contains(&y) && (4..16).contains(&x);
                let inner = (6..14).contains(&y) && (6..14).contains(&x);
                count += (outer && !inner) as usize;
            }
        }
        assert_eq!(count, 80);
        assert_eq!(ring.area(), 80);
    }

    #[test]
    fn ignore_region_rejects_uncontained_eroded() {
        let d = BinaryMask::rect(8, 8, 0, 0, 4, 4);
        let e = BinaryMask::rect(8, 8, 3, 3, 5, 5);
        assert!(matches!(ignore_region(&d, &e), Err(Error::MaskOrder { outside: 3 })));
    }

    #[test]
    fn face_target_examples() {
        let face = BinaryMask::rect(4, 4, 0, 0, 4, 2);
        assert_eq!(face_target_mask(&face, &BinaryMask::empty(4, 4)).unwrap(), face);
        assert!(face_target_mask(&face, &BinaryMask::full(4, 4)).unwrap().is_empty());
        let hair = BinaryMask::rect(4, 4, 0, 0, 2, 4);
        let t = face_target_mask(&face, &hair).unwrap();
        assert_eq!(t, BinaryMask::rect(4, 4, 2, 0, 4, 2));
        assert_eq!(t.area(), 4);
        assert!(matches!(
            face_target_mask(&face, &BinaryMask::empty(4, 5)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn iou_examples() {
        let a = BinaryMask::rect(6, 6, 1, 1, 3, 3);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let far = BinaryMask::rect(6, 6, 4, 4, 6, 6);
        assert_eq!(mask_iou(&a, &far).unwrap(), 0.0);
        let b = BinaryMask::rect(6, 6, 2, 2, 4, 4);
        assert!((mask_iou(&a, &b).unwrap() - 1.0 / 7.0).abs() < 1e-15);
        let z = BinaryMask::empty(6, 6);
        assert!(matches!(mask_iou(&z, &z), Err(Error::UndefinedIoU)));
    }

    #[test]
    fn from_u8_rejects_non_binary_cells() {
        assert!(BinaryMask::from_u8(1, 3, &[0, 1, 2]).is_err());
        assert_eq!(BinaryMask::from_u8(1, 3, &[0, 1, 1]).unwrap().area(), 2);
    }

    #[test]
    fn png_threshold_is_strictly_above_127() {
        let gray = GrayImage::from_fn(3, 1, |x, _| Luma([[127u8, 128, 255][x as usize]]));
        let m = BinaryMask::from_gray(&gray);
        assert_eq!(m.as_slice(), &[false, true, true]);
    }

    #[test]
    fn nearest_resize_preserves_block_layout() {
        let m = BinaryMask::rect(8, 8, 0, 0, 4, 4);
        assert_eq!(m.resize_nearest(2, 2).as_slice(), &[true, false, false, false]);
        assert_eq!(m.resize_nearest(16, 16), BinaryMask::rect(16, 16, 0, 0, 8, 8));
    }

    fn arb_mask_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
        (1usize..10, 1usize..10).prop_flat_map(|(h, w)| {
            (
                proptest::collection::vec(any::<bool>(), h * w),
                proptest::collection::vec(any::<bool>(), h * w),
            )
                .prop_map(move |(a, b)| {
                    (
                        BinaryMask::from_bits(h, w, a).unwrap(),
                        BinaryMask::from_bits(h, w, b).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded((a, b) in arb_mask_pair()) {
            match (mask_iou(&a, &b), mask_iou(&b, &a)) {
                (Ok(x), Ok(y)) => {
                    prop_assert_eq!(x, y);
                    prop_assert!((0.0..=1.0).contains(&x));
                }
                (Err(_), Err(_)) => prop_assert!(a.is_empty() && b.is_empty()),
                _ => prop_assert!(false, "asymmetric failure"),
            }
            if !a.is_empty() {
                prop_assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
            }
        }

        #[test]
        fn ignore_region_partitions_dilated((a, b) in arb_mask_pair()) {
            let d = a.union(&b).unwrap();
            let e = b;
            let ir = ignore_region(&d, &e).unwrap();
            prop_assert!(ir.is_disjoint(&e));
            prop_assert_eq!(ir.union(&e).unwrap(), d);
        }
    }
}
