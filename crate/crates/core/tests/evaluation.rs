use std::path::PathBuf;

use hairxfer::evaluation::{hair_iou_eval, ssim, toy_hair_mask};
use hairxfer::image::Image;
use hairxfer::mask_ops::BinaryMask;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/ssim").join(name)
}

#[test]
fn ssim_matches_scalar_loop_reference() {
    let a = Image::load_png(fixture("a.png")).unwrap();
    let b = Image::load_png(fixture("b.png")).unwrap();
    let reference: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("reference.json")).unwrap()).unwrap();
    let want = reference["ssim"].as_f64().unwrap();
    let got = ssim(&a, &b).unwrap();
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn hair_iou_cases() {
    let m = BinaryMask::rect(16, 16, 2, 2, 10, 10);
    assert_eq!(hair_iou_eval(&m, &m).unwrap(), 1.0);
    assert_eq!(hair_iou_eval(&m, &m.complement()).unwrap(), 0.0);
    let shifted = BinaryMask::rect(16, 16, 2, 6, 10, 14);
    let (mut inter, mut union) = (0, 0);
    for y in 0..16 {
        for x in 0..16 {
            inter += (m.get(y, x) && shifted.get(y, x)) as usize;
            union += (m.get(y, x) || shifted.get(y, x)) as usize;
        }
    }
    assert!((hair_iou_eval(&m, &shifted).unwrap() - inter as f64 / union as f64).abs() < 1e-12);
}

#[test]
fn toy_hair_signal_threshold() {
    let mut img = Image::filled(3, 4, 4, 0.5);
    img.set(0, 0, 0, 0.61);
    img.set(0, 3, 3, 0.6);
    let m = toy_hair_mask(&img).unwrap();
    assert_eq!(m.area(), 1);
    assert!(m.get(0, 0));
}
