//! End-to-end behaviour on the toy backend. Goldens under
//! `tests/fixtures/pipeline` are regenerated with `HAIRXFER_BLESS=1`.

use std::path::{Path, PathBuf};

use hairxfer::curation::{Category, PortraitPaths, TupleRecord};
use hairxfer::evaluation::{hair_iou_eval, toy_hair_mask};
use hairxfer::features::ToyExtractor;
use hairxfer::generator::ToyGenerator;
use hairxfer::mask_ops::BinaryMask;
use hairxfer::pipeline::toy::{toy_suite, toy_tuple};
use hairxfer::pipeline::{
    execute, prepare, run_batch, run_transfer, EditMode, JobMetrics, PipelineConfig, Portrait, TransferTuple,
};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/pipeline")
}

fn bless() -> bool {
    std::env::var_os("HAIRXFER_BLESS").is_some()
}

fn toy() -> (ToyGenerator, ToyExtractor) {
    (ToyGenerator::new(0), ToyExtractor::new(0))
}

fn config(iters: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.optimizer.stage1_iters = iters;
    cfg.optimizer.stage2_iters = iters;
    cfg
}

const ROLES: [&str; 3] = ["identity", "shape", "appearance"];

fn save_portrait(dir: &Path, stem: &str, p: &Portrait) -> PortraitPaths {
    p.image.save_png(dir.join(format!("{stem}.png"))).unwrap();
    p.face.save_png(dir.join(format!("{stem}.face.png"))).unwrap();
    p.hair.save_png(dir.join(format!("{stem}.hair.png"))).unwrap();
    PortraitPaths {
        image: format!("{stem}.png"),
        face_mask: format!("{stem}.face.png"),
        hair_mask: format!("{stem}.hair.png"),
        landmarks: format!("{stem}.landmarks.json"),
    }
}

fn load_fixture_tuple() -> TransferTuple {
    let dir = fixtures().join("tuple");
    let load = |role: &str| {
        Portrait::load(
            dir.join(format!("{role}.png")),
            dir.join(format!("{role}.face.png")),
            dir.join(format!("{role}.hair.png")),
        )
        .unwrap()
    };
    TransferTuple {
        id: "fixture".into(),
        identity: load(ROLES[0]),
        shape: load(ROLES[1]),
        appearance: load(ROLES[2]),
    }
}

#[test]
fn prepared_masks_match_golden_pngs() {
    let tuple_dir = fixtures().join("tuple");
    if bless() {
        std::fs::create_dir_all(&tuple_dir).unwrap();
        let t = toy_tuple(&ToyGenerator::new(0), 7).unwrap();
        for (role, p) in ROLES.iter().zip([&t.identity, &t.shape, &t.appearance]) {
            save_portrait(&tuple_dir, role, p);
        }
    }
    let prepared = prepare(load_fixture_tuple(), 32, &PipelineConfig::default().masks).unwrap();
    let golden = fixtures().join("prepared-masks");
    if bless() {
        prepared.masks.save(&golden).unwrap();
    }
    let out = tempfile::tempdir().unwrap();
    prepared.masks.save(out.path()).unwrap();
    for name in ["dilated_hair", "eroded_hair", "ignore_region", "face_target", "inpaint_hole", "blend_support"] {
        let file = format!("{name}.png");
        let got = std::fs::read(out.path().join(&file)).unwrap();
        let want = std::fs::read(golden.join(&file)).unwrap();
        assert!(got == want, "{file} differs from golden");
    }
    assert!(!prepared.masks.dilation_degenerate);
    assert!(!prepared.masks.erosion_fallback);
}

fn assert_metrics_close(got: &JobMetrics, want: &JobMetrics) {
    let close = |what: &str, a: f64, b: f64| {
        assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{what}: {a} vs golden {b}");
    };
    let (g, w) = (&got.report, &want.report);
    assert_eq!(g.tuple_id, w.tuple_id);
    assert_eq!(g.config_hash, w.config_hash);
    assert_eq!((got.seed, got.mode, &got.inpainter), (want.seed, want.mode, &want.inpainter));
    close("psnr", g.psnr, w.psnr);
    close("ssim", g.ssim, w.ssim);
    close("latent_distance", g.latent_distance, w.latent_distance);
    close("hair_iou", g.hair_iou.unwrap(), w.hair_iou.unwrap());
    let (gl, wl) = (got.final_losses.as_ref().unwrap(), want.final_losses.as_ref().unwrap());
    assert_eq!(gl.iteration, wl.iteration);
    for (name, a, b) in [
        ("face", gl.face, wl.face),
        ("structure", gl.structure, wl.structure),
        ("appearance", gl.appearance, wl.appearance),
        ("style", gl.style, wl.style),
        ("noise", gl.noise, wl.noise),
    ] {
        close(name, a, b);
    }
    close("total", gl.total, wl.total);
}

#[test]
fn seeded_toy_job_matches_golden_metrics() {
    let (gen, ext) = toy();
    let out = tempfile::tempdir().unwrap();
    let r = run_transfer(toy_tuple(&gen, 2).unwrap(), EditMode::Full, &gen, &ext, &config(200), out.path()).unwrap();
    for f in ["result.png", "losses.csv", "metrics.json", "prepared-masks/face_target.png"] {
        assert!(out.path().join(f).is_file(), "{f} missing");
    }
    let csv = std::fs::read_to_string(out.path().join("losses.csv")).unwrap();
    assert_eq!(csv.lines().count(), 401);

    let golden = fixtures().join("toy_job_metrics.json");
    if bless() {
        std::fs::copy(out.path().join("metrics.json"), &golden).unwrap();
    }
    let written: JobMetrics =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(written, r.metrics);
    let want: JobMetrics = serde_json::from_str(&std::fs::read_to_string(golden).unwrap()).unwrap();
    assert_metrics_close(&r.metrics, &want);
}

/// Writes `tuples` into `data` and returns matching manifest records.
fn write_records(data: &Path, tuples: &[TransferTuple], categories: &[Category]) -> Vec<TupleRecord> {
    tuples
        .iter()
        .zip(categories)
        .map(|(t, &category)| {
            let [identity, shape, appearance] = [(&t.identity, "i"), (&t.shape, "s"), (&t.appearance, "a")]
                .map(|(p, role)| save_portrait(data, &format!("{}-{role}", t.id), p));
            TupleRecord {
                id: t.id.clone(),
                identity,
                shape,
                appearance,
                iou: 0.0,
                pd: 0.0,
                category,
                resolution: [32, 32],
            }
        })
        .collect()
}

#[test]
fn batch_output_is_independent_of_worker_count() {
    let (gen, ext) = toy();
    let data = tempfile::tempdir().unwrap();
    let tuples = toy_suite(&gen, 4, 10).unwrap();
    let records = write_records(data.path(), &tuples, &[Category::Easy; 4]);
    let cfg = config(30);
    let one = tempfile::tempdir().unwrap();
    let four = tempfile::tempdir().unwrap();
    let a = run_batch(&records, data.path(), &cfg, &gen, &ext, 1, EditMode::Full, one.path()).unwrap();
    let b = run_batch(&records, data.path(), &cfg, &gen, &ext, 4, EditMode::Full, four.path()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.failed(), 0);
    for t in &tuples {
        for f in ["result.png", "losses.csv", "metrics.json", "latent.json"] {
            let x = std::fs::read(one.path().join(&t.id).join(f)).unwrap();
            let y = std::fs::read(four.path().join(&t.id).join(f)).unwrap();
            assert!(x == y, "{}/{f} differs between 1 and 4 workers", t.id);
        }
    }
}

#[test]
fn category_aggregates_are_per_job_means() {
    let (gen, ext) = toy();
    let data = tempfile::tempdir().unwrap();
    let tuples = toy_suite(&gen, 3, 20).unwrap();
    let cats = [Category::Medium, Category::Easy, Category::Medium];
    let mut records = write_records(data.path(), &tuples, &cats);
    // a job that cannot load still counts towards `jobs`
    let mut broken = records[0].clone();
    broken.id = "zz-missing".into();
    broken.identity.image = "absent.png".into();
    records.push(broken);
    let out = tempfile::tempdir().unwrap();
    let report = run_batch(&records, data.path(), &config(20), &gen, &ext, 2, EditMode::Full, out.path()).unwrap();
    assert_eq!(report.failed(), 1);
    assert!(out.path().join("batch_report.json").is_file());

    let metrics = |id: &str| report.jobs.iter().find(|j| j.id == id).unwrap().metrics.clone().unwrap().report;
    let m: Vec<_> = tuples.iter().map(|t| metrics(&t.id)).collect();
    let medium = &report.categories[&Category::Medium];
    assert_eq!((medium.jobs, medium.succeeded), (3, 2));
    assert_eq!(medium.mean_psnr, Some((m[0].psnr + m[2].psnr) / 2.0));
    assert_eq!(medium.mean_ssim, Some((m[0].ssim + m[2].ssim) / 2.0));
    assert_eq!(medium.mean_latent_distance, Some((m[0].latent_distance + m[2].latent_distance) / 2.0));
    assert_eq!(medium.mean_hair_iou, Some((m[0].hair_iou.unwrap() + m[2].hair_iou.unwrap()) / 2.0));
    let easy = &report.categories[&Category::Easy];
    assert_eq!((easy.jobs, easy.succeeded), (1, 1));
    assert_eq!(easy.mean_psnr, Some(m[1].psnr));
    assert_eq!(report.categories.len(), 2);
}

#[test]
fn empty_manifest_gives_empty_report() {
    let (gen, ext) = toy();
    let out = tempfile::tempdir().unwrap();
    let report = run_batch(&[], out.path(), &config(10), &gen, &ext, 4, EditMode::Full, out.path()).unwrap();
    assert!(report.jobs.is_empty());
    assert!(report.categories.is_empty());
}

#[test]
fn stage_one_windowed_loss_decreases() {
    let (gen, ext) = toy();
    let mut cfg = config(200);
    cfg.optimizer.stage2_iters = 0;
    for t in toy_suite(&gen, 3, 0).unwrap() {
        let p = prepare(t, 32, &cfg.masks).unwrap();
        let r = execute(&p, &gen, &ext, &cfg, 3, EditMode::Full, None).unwrap();
        let means: Vec<f64> = r.log.chunks(50).map(|w| w.iter().map(|l| l.total).sum::<f64>() / w.len() as f64).collect();
        assert_eq!(means.len(), 4);
        for w in means.windows(2) {
            assert!(w[1] < w[0], "{}: windowed means {means:?}", p.tuple.id);
        }
    }
}

/// Hair IoU between the identity's own hair and the synthesis.
fn own_hair_iou(t: &TransferTuple, synth: &hairxfer::image::Image) -> f64 {
    let hair: &BinaryMask = &t.identity.hair;
    hair_iou_eval(hair, &toy_hair_mask(synth).unwrap()).unwrap()
}

#[test]
fn appearance_edit_keeps_identity_hair_shape() {
    let (gen, ext) = toy();
    let cfg = config(200);
    let mut worst = 0.0f64;
    for t in toy_suite(&gen, 10, 0).unwrap() {
        let seed = cfg.job_seed(&t.id);
        let edit = prepare(t.clone().with_mode(EditMode::AppearanceOnly), 32, &cfg.masks).unwrap();
        let edited = execute(&edit, &gen, &ext, &cfg, seed, EditMode::AppearanceOnly, None).unwrap();
        let baseline = TransferTuple {
            shape: t.identity.clone(),
            appearance: t.identity.clone(),
            ..t.clone()
        };
        let base = prepare(baseline, 32, &cfg.masks).unwrap();
        let reference = execute(&base, &gen, &ext, &cfg, seed, EditMode::Full, None).unwrap();
        let diff = (own_hair_iou(&t, &edited.synthesized) - own_hair_iou(&t, &reference.synthesized)).abs();
        worst = worst.max(diff);
    }
    assert!(worst <= 0.05, "hair IoU moved by up to {worst:.4} under appearance-only edits");
}
