//! End-to-end transfer jobs: load a tuple, derive the supervision masks,
//! optimise, composite over the inpainted identity background, and write
//! the artefacts.

mod batch;
mod config;
mod inpaint;
pub mod toy;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curation::PortraitPaths;
use crate::error::{Error, Result};
use crate::evaluation::{hair_iou_eval, psnr_masked, ssim_masked, toy_hair_mask, EvaluationReport};
use crate::features::FeatureExtractor;
use crate::generator::{latent_distance, GeneratorBackend, LatentState};
use crate::image::Image;
use crate::mask_ops::{
    default_feather_sigma, dilate, erode, face_target_mask, ignore_region, soft_blend, BinaryMask,
};
use crate::optimizer::{run_two_stage, write_loss_csv, LossRecord, OptimizationConfig, ProjectionRecord, TransferInputs};

pub use batch::{run_batch, BatchReport, CategoryAggregate, JobOutcome, JobStatus};
pub use config::{BlendConfig, EvaluationConfig, ExtractorConfig, GeneratorConfig, MaskConfig, PipelineConfig};
pub use inpaint::inpaint_background;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    /// Structure from the shape reference, appearance from the appearance
    /// reference.
    #[default]
    Full,
    /// Keep the identity's own hair shape (`I₂ := I₁`).
    AppearanceOnly,
    /// Keep the identity's own hair appearance (`I₃ := I₁`).
    ShapeOnly,
}

/// A portrait with its face and hair masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Portrait {
    pub image: Image,
    pub face: BinaryMask,
    pub hair: BinaryMask,
}

impl Portrait {
    pub fn new(image: Image, face: BinaryMask, hair: BinaryMask) -> Result<Self> {
        if image.channels() != 3 {
            return Err(Error::shape(format!("portraits are RGB, got {} channels", image.channels())));
        }
        image.check_mask(&face, "face mask")?;
        image.check_mask(&hair, "hair mask")?;
        Ok(Self { image, face, hair })
    }

    pub fn load(image: impl AsRef<Path>, face: impl AsRef<Path>, hair: impl AsRef<Path>) -> Result<Self> {
        Self::new(Image::load_png(image)?, BinaryMask::load_png(face)?, BinaryMask::load_png(hair)?)
    }

    /// `<stem>.png` with `<stem>.face.png` and `<stem>.hair.png` beside it.
    pub fn load_with_companions(image: impl AsRef<Path>) -> Result<Self> {
        let image = image.as_ref();
        let stem = image.file_stem().unwrap_or_default().to_string_lossy();
        let companion = |kind: &str| image.with_file_name(format!("{stem}.{kind}.png"));
        Self::load(image, companion("face"), companion("hair"))
    }

    pub fn load_record(data_dir: &Path, paths: &PortraitPaths) -> Result<Self> {
        Self::load(
            data_dir.join(&paths.image),
            data_dir.join(&paths.face_mask),
            data_dir.join(&paths.hair_mask),
        )
    }

    /// Image resampled with a triangle filter, masks nearest-neighbour.
    pub fn resized(&self, side: usize) -> Self {
        if self.image.height() == side && self.image.width() == side {
            return self.clone();
        }
        Self {
            image: self.image.resized(side, side),
            face: self.face.resize_nearest(side, side),
            hair: self.hair.resize_nearest(side, side),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferTuple {
    pub id: String,
    pub identity: Portrait,
    pub shape: Portrait,
    pub appearance: Portrait,
}

impl TransferTuple {
    pub fn with_mode(mut self, mode: EditMode) -> Self {
        match mode {
            EditMode::Full => {}
            EditMode::AppearanceOnly => self.shape = self.identity.clone(),
            EditMode::ShapeOnly => self.appearance = self.identity.clone(),
        }
        self
    }
}

/// Supervision masks at generator resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedMasks {
    /// Shape reference hair grown by the configured fraction.
    pub dilated_hair: BinaryMask,
    /// Shape reference hair shrunk by the configured fraction (or the
    /// undilated mask after a degenerate erosion).
    pub eroded_hair: BinaryMask,
    /// `dilated − eroded`; never supervised.
    pub ignore: BinaryMask,
    /// Identity face minus the dilated reference hair.
    pub face_target: BinaryMask,
    /// Identity foreground (face ∪ hair), filled by inpainting.
    pub inpaint_hole: BinaryMask,
    /// Identity face ∪ dilated reference hair, composited from the synthesis.
    pub blend_support: BinaryMask,
    pub dilation_degenerate: bool,
    /// Erosion collapsed below `min_eroded_area`; the undilated mask is used.
    pub erosion_fallback: bool,
}

impl PreparedMasks {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, m) in [
            ("dilated_hair", &self.dilated_hair),
            ("eroded_hair", &self.eroded_hair),
            ("ignore_region", &self.ignore),
            ("face_target", &self.face_target),
            ("inpaint_hole", &self.inpaint_hole),
            ("blend_support", &self.blend_support),
        ] {
            m.save_png(dir.join(format!("{name}.png")))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub tuple: TransferTuple,
    pub masks: PreparedMasks,
}

impl Prepared {
    pub fn transfer_inputs(&self) -> TransferInputs {
        let t = &self.tuple;
        TransferInputs {
            identity: t.identity.image.clone(),
            shape_ref: t.shape.image.clone(),
            appearance_ref: t.appearance.image.clone(),
            face_target: self.masks.face_target.clone(),
            eroded_hair: self.masks.eroded_hair.clone(),
            appearance_hair: t.appearance.hair.clone(),
        }
    }
}

/// Resamples the tuple to `side` and derives every mask. The ignore ring is
/// checked to be disjoint from each supervised support.
pub fn prepare(tuple: TransferTuple, side: usize, cfg: &MaskConfig) -> Result<Prepared> {
    let tuple = TransferTuple {
        identity: tuple.identity.resized(side),
        shape: tuple.shape.resized(side),
        appearance: tuple.appearance.resized(side),
        id: tuple.id,
    };
    let hair2 = &tuple.shape.hair;
    let dil = dilate(hair2, cfg.dilate)?;
    let ero = erode(hair2, cfg.erode)?;
    let erosion_fallback = ero.degenerate || ero.mask.area() < cfg.min_eroded_area;
    let eroded = if erosion_fallback { hair2.clone() } else { ero.mask };
    let ignore = ignore_region(&dil.mask, &eroded)?;
    let face_target = face_target_mask(&tuple.identity.face, &dil.mask)?;
    let inpaint_hole = tuple.identity.face.union(&tuple.identity.hair)?;
    let blend_support = tuple.identity.face.union(&dil.mask)?;

    if !ignore.is_disjoint(&face_target) || !ignore.is_disjoint(&eroded) {
        return Err(Error::MaskOrder {
            outside: ignore.intersection(&face_target.union(&eroded)?)?.area(),
        });
    }
    Ok(Prepared {
        masks: PreparedMasks {
            dilated_hair: dil.mask,
            eroded_hair: eroded,
            ignore,
            face_target,
            inpaint_hole,
            blend_support,
            dilation_degenerate: dil.degenerate,
            erosion_fallback,
        },
        tuple,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobMetrics {
    #[serde(flatten)]
    pub report: EvaluationReport,
    pub seed: u64,
    pub mode: EditMode,
    pub inpainter: String,
    pub dilation_degenerate: bool,
    pub erosion_fallback: bool,
    /// Final-iteration loss row, if any iterations ran.
    pub final_losses: Option<LossRecord>,
}

#[derive(Clone, Debug)]
pub struct TransferResult {
    pub id: String,
    /// Composite over the inpainted identity background.
    pub image: Image,
    pub synthesized: Image,
    pub background: Image,
    pub state: LatentState,
    pub log: Vec<LossRecord>,
    pub projections: Vec<ProjectionRecord>,
    pub snapshots: Vec<(usize, Image)>,
    pub metrics: JobMetrics,
}

impl TransferResult {
    /// `result.png`, `synthesized.png`, `losses.csv`, `metrics.json`,
    /// `latent.json` and any snapshots under `snapshots/`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.image.save_png(dir.join("result.png"))?;
        self.synthesized.save_png(dir.join("synthesized.png"))?;
        let csv = dir.join("losses.csv");
        let f = std::fs::File::create(&csv).map_err(|e| Error::io(&csv, e))?;
        write_loss_csv(&self.log, std::io::BufWriter::new(f)).map_err(|e| Error::io(&csv, e))?;
        write_json(&dir.join("metrics.json"), &self.metrics)?;
        let latent = serde_json::json!({
            "geometry": self.state.geometry(),
            "values": self.state.values(),
        });
        write_json(&dir.join("latent.json"), &latent)?;
        if !self.snapshots.is_empty() {
            let sd = dir.join("snapshots");
            std::fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
            for (it, img) in &self.snapshots {
                img.save_png(sd.join(format!("iter_{it:05}.png")))?;
            }
        }
        Ok(())
    }
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Optimises, composites and scores one prepared tuple. `work_dir` hosts
/// the external inpainter's scratch files when one is configured.
pub fn execute(
    prepared: &Prepared,
    generator: &dyn GeneratorBackend,
    extractor: &dyn FeatureExtractor,
    config: &PipelineConfig,
    seed: u64,
    mode: EditMode,
    work_dir: Option<&Path>,
) -> Result<TransferResult> {
    let opt = OptimizationConfig {
        seed,
        ..config.optimizer.clone()
    };
    let run = run_two_stage(generator, extractor, &prepared.transfer_inputs(), &opt)?;
    let masks = &prepared.masks;
    let identity = &prepared.tuple.identity;
    let (background, inpainter) = inpaint_background(&identity.image, &masks.inpaint_hole, &config.blending, work_dir)?;
    let side = identity.image.height();
    let sigma = config.blending.feather_sigma.unwrap_or_else(|| default_feather_sigma(side));
    let image = soft_blend(&run.image, &background, &masks.blend_support, sigma)?.clamped();

    let hair_iou = if generator.name() == "toy" {
        Some(hair_iou_eval(&prepared.tuple.shape.hair, &toy_hair_mask(&run.image)?)?)
    } else if let Some(p) = &config.evaluation.synth_hair_mask {
        Some(hair_iou_eval(&prepared.tuple.shape.hair, &BinaryMask::load_png(p)?)?)
    } else {
        None
    };
    let report = EvaluationReport {
        tuple_id: prepared.tuple.id.clone(),
        psnr: psnr_masked(&image, &identity.image, &masks.face_target)?,
        ssim: ssim_masked(&image, &identity.image, &masks.face_target)?,
        fid: None,
        latent_distance: latent_distance(&run.state, generator)?,
        hair_iou,
        config_hash: config.hash()?,
        metric_region: "face_target".into(),
    };
    Ok(TransferResult {
        id: prepared.tuple.id.clone(),
        metrics: JobMetrics {
            report,
            seed,
            mode,
            inpainter: inpainter.to_owned(),
            dilation_degenerate: masks.dilation_degenerate,
            erosion_fallback: masks.erosion_fallback,
            final_losses: run.log.last().cloned(),
        },
        image,
        synthesized: run.image,
        background,
        state: run.state,
        log: run.log,
        projections: run.projections,
        snapshots: run.snapshots,
    })
}

/// `prepare` + `execute` + artefact writing for a single tuple.
pub fn run_transfer(
    tuple: TransferTuple,
    mode: EditMode,
    generator: &dyn GeneratorBackend,
    extractor: &dyn FeatureExtractor,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<TransferResult> {
    let tuple = tuple.with_mode(mode);
    let seed = config.job_seed(&tuple.id);
    let prepared = prepare(tuple, generator.geometry().resolution, &config.masks)?;
    prepared.masks.save(&out_dir.join("prepared-masks"))?;
    let result = execute(&prepared, generator, extractor, config, seed, mode, Some(out_dir))?;
    result.save(out_dir)?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::ToyExtractor;
    use crate::generator::ToyGenerator;
    use crate::optimizer::Objective;

    fn tuple() -> TransferTuple {
        toy::toy_tuple(&ToyGenerator::new(0), 3).unwrap()
    }

    #[test]
    fn identity_tuple_prepares() {
        let t = tuple();
        let same = TransferTuple {
            id: "same".into(),
            shape: t.identity.clone(),
            appearance: t.identity.clone(),
            identity: t.identity,
        };
        let p = prepare(same, 32, &MaskConfig::default()).unwrap();
        assert!(p.masks.eroded_hair.is_subset_of(&p.tuple.shape.hair));
        assert!(p.tuple.shape.hair.is_subset_of(&p.masks.dilated_hair));
        assert!(p.masks.face_target.is_disjoint(&p.masks.dilated_hair));
    }

    #[test]
    fn tiny_hair_falls_back_to_undilated_mask() {
        let mut t = tuple();
        t.shape.hair = BinaryMask::rect(32, 32, 4, 4, 7, 7);
        let p = prepare(t, 32, &MaskConfig::default()).unwrap();
        assert!(p.masks.erosion_fallback);
        assert_eq!(p.masks.eroded_hair, p.tuple.shape.hair);
    }

    #[test]
    fn edit_modes_substitute_references() {
        let t = tuple();
        let a = t.clone().with_mode(EditMode::AppearanceOnly);
        assert_eq!(a.shape, t.identity);
        assert_eq!(a.appearance, t.appearance);
        let s = t.clone().with_mode(EditMode::ShapeOnly);
        assert_eq!(s.appearance, t.identity);
        assert_eq!(s.shape, t.shape);
    }

    #[test]
    fn ignore_ring_is_unsupervised() {
        let gen = ToyGenerator::new(0);
        let ext = ToyExtractor::new(0);
        let p = prepare(tuple(), 32, &MaskConfig::default()).unwrap();
        assert!(p.masks.ignore.area() > 0);
        let synth = gen.synthesize(&crate::generator::init_latent_state(&gen, 1)).unwrap();
        let state = crate::generator::init_latent_state(&gen, 1);
        let before = Objective::new(&ext, &p.transfer_inputs()).unwrap();
        let mut perturbed = p.clone();
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    if p.masks.ignore.get(y, x) {
                        perturbed.tuple.shape.image.set(c, y, x, 1.0 - p.tuple.shape.image.get(c, y, x));
                    }
                }
            }
        }
        let after = Objective::new(&ext, &perturbed.transfer_inputs()).unwrap();
        assert_eq!(before.values(&synth, &state).unwrap(), after.values(&synth, &state).unwrap());
        assert_eq!(
            before.shape_reference_values(&synth).unwrap(),
            after.shape_reference_values(&synth).unwrap()
        );
    }

    #[test]
    fn zero_iterations_complete_with_hard_background() {
        let gen = ToyGenerator::new(0);
        let ext = ToyExtractor::new(0);
        let mut cfg = PipelineConfig::default();
        cfg.optimizer.stage1_iters = 0;
        cfg.optimizer.stage2_iters = 0;
        cfg.blending.feather_sigma = Some(0.0);
        let p = prepare(tuple(), 32, &cfg.masks).unwrap();
        let r = execute(&p, &gen, &ext, &cfg, 5, EditMode::Full, None).unwrap();
        let init = gen.synthesize(&crate::generator::init_latent_state(&gen, 5)).unwrap();
        assert_eq!(r.synthesized, init);
        let keep = p.masks.blend_support.union(&p.masks.inpaint_hole).unwrap().complement();
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    if keep.get(y, x) {
                        assert_eq!(r.image.get(c, y, x), p.tuple.identity.image.get(c, y, x));
                    }
                    if p.masks.blend_support.get(y, x) {
                        assert_eq!(r.image.get(c, y, x), init.get(c, y, x).clamp(0.0, 1.0));
                    }
                }
            }
        }
        assert_eq!(r.metrics.inpainter, "fallback");
        assert!(r.metrics.final_losses.is_none());
    }
}
