//! Two-stage Adam optimisation of a latent state with per-stage cosine
//! annealing and, in the transfer stage, projection of the structure
//! gradient away from the shape reference's own appearance/style gradient.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::generator::{init_latent_state, GeneratorBackend, LatentGrad, LatentState};
use crate::image::Image;
use crate::losses::{
    face_target, noise_penalty_with_grad, structure_target, total_loss, AppearanceTarget, LossValues,
    LossWeights, PerceptualTarget, StageMask, StyleTarget,
};
use crate::mask_ops::BinaryMask;

/// Squared-norm guard below which the projection is skipped.
pub const GO_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, cfg: &AdamConfig) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::shape("Adam state, parameters and gradient differ in length"));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                stage: 0,
                iteration: self.t as usize,
                detail: format!("non-finite gradient at coordinate {i}"),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

/// `lr0 · ½(1 + cos(π·iter/total))`.
pub fn cosine_lr(iter: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * iter as f64 / total as f64).cos())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Removes from `g_r` its component along `g_as`; returned unchanged when
/// `‖g_as‖² ≤ eps`.
pub fn orthogonalize(g_r: &[f64], g_as: &[f64], eps: f64) -> Result<Vec<f64>> {
    if g_r.len() != g_as.len() {
        return Err(Error::shape(format!(
            "gradients differ in length ({} vs {})",
            g_r.len(),
            g_as.len()
        )));
    }
    let nn = dot(g_as, g_as);
    if nn <= eps {
        return Ok(g_r.to_vec());
    }
    let c = dot(g_r, g_as) / nn;
    let mut out: Vec<f64> = g_r.iter().zip(g_as).map(|(r, a)| r - c * a).collect();
    // one refinement pass mops up cancellation error
    let c2 = dot(&out, g_as) / nn;
    if c2 != 0.0 {
        out.iter_mut().zip(g_as).for_each(|(r, a)| *r -= c2 * a);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionScope {
    /// Project over every optimised coordinate (style rows and noise).
    #[default]
    All,
    /// Project the style rows only; noise gradients pass through untouched.
    WPlusOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizationConfig {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub lr0: f64,
    pub weights: LossWeights,
    pub go_enabled: bool,
    pub noise_reg_enabled: bool,
    pub projection: ProjectionScope,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Record the synthesized image every N iterations (0 = never).
    pub snapshot_every: usize,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        Self {
            stage1_iters: 1000,
            stage2_iters: 1000,
            lr0: 0.1,
            weights: LossWeights::default(),
            go_enabled: true,
            noise_reg_enabled: true,
            projection: ProjectionScope::All,
            seed: 0,
            adam: AdamConfig::default(),
            snapshot_every: 0,
        }
    }
}

impl OptimizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::InvalidParameter(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::InvalidParameter("Adam betas must lie in [0, 1) and eps > 0".into()));
        }
        self.weights.validate()
    }

    fn stage_mask(&self, stage: u8) -> StageMask {
        let m = if stage == 1 { StageMask::RECONSTRUCT } else { StageMask::ALL };
        m.with_noise(self.noise_reg_enabled)
    }
}

/// Images and masks that define one transfer objective, all at the
/// generator's resolution.
#[derive(Clone, Debug)]
pub struct TransferInputs {
    /// `I₁`.
    pub identity: Image,
    /// `I₂`.
    pub shape_ref: Image,
    /// `I₃`.
    pub appearance_ref: Image,
    /// Face of `I₁` minus the dilated hair of `I₂`.
    pub face_target: BinaryMask,
    /// Eroded hair of `I₂`; also stands in for the synthesized hair mask.
    pub eroded_hair: BinaryMask,
    /// Hair of `I₃`.
    pub appearance_hair: BinaryMask,
}

/// Precomputed reference statistics for every term.
pub struct Objective<'a> {
    extractor: &'a dyn FeatureExtractor,
    face: PerceptualTarget,
    structure: PerceptualTarget,
    appearance: AppearanceTarget,
    style: StyleTarget,
    shape_appearance: AppearanceTarget,
    shape_style: StyleTarget,
}

impl<'a> Objective<'a> {
    pub fn new(extractor: &'a dyn FeatureExtractor, inputs: &TransferInputs) -> Result<Self> {
        let eroded = &inputs.eroded_hair;
        inputs.identity.check_same_shape(&inputs.shape_ref, "transfer inputs")?;
        inputs.identity.check_same_shape(&inputs.appearance_ref, "transfer inputs")?;
        Ok(Self {
            extractor,
            face: face_target(extractor, &inputs.identity, &inputs.face_target)?,
            structure: structure_target(extractor, &inputs.shape_ref, eroded)?,
            appearance: AppearanceTarget::new(extractor, &inputs.appearance_ref, &inputs.appearance_hair, eroded)?,
            style: StyleTarget::new(extractor, &inputs.appearance_ref, &inputs.appearance_hair, eroded)?,
            shape_appearance: AppearanceTarget::new(extractor, &inputs.shape_ref, eroded, eroded)?,
            shape_style: StyleTarget::new(extractor, &inputs.shape_ref, eroded, eroded)?,
        })
    }

    /// Component values at `synth` (all five terms, noise from `state`).
    pub fn values(&self, synth: &Image, state: &LatentState) -> Result<LossValues> {
        let e = self.extractor;
        Ok(LossValues {
            face: self.face.evaluate(e, synth, false)?.0,
            structure: self.structure.evaluate(e, synth, false)?.0,
            appearance: self.appearance.evaluate(e, synth, false)?.0,
            style: self.style.evaluate(e, synth, false)?.0,
            noise: noise_values(state)?.0,
        })
    }

    /// Unweighted latent gradient of every term at `state`, in
    /// [`LossWeights::named`] order.
    pub fn component_gradients(
        &self,
        backend: &dyn GeneratorBackend,
        state: &LatentState,
    ) -> Result<(LossValues, [LatentGrad; 5])> {
        let e = self.extractor;
        let synth = backend.synthesize(state)?;
        let pull = |(v, g): (f64, Option<Image>)| -> Result<(f64, LatentGrad)> {
            let g = g.expect("gradient requested");
            Ok((v, backend.synthesize_vjp(state, &g)?))
        };
        let (face, g_face) = pull(self.face.evaluate(e, &synth, true)?)?;
        let (structure, g_structure) = pull(self.structure.evaluate(e, &synth, true)?)?;
        let (appearance, g_appearance) = pull(self.appearance.evaluate(e, &synth, true)?)?;
        let (style, g_style) = pull(self.style.evaluate(e, &synth, true)?)?;
        let (noise, g_noise) = noise_values(state)?;
        let values = LossValues {
            face,
            structure,
            appearance,
            style,
            noise,
        };
        Ok((values, [g_face, g_structure, g_appearance, g_style, g_noise]))
    }

    /// Appearance and style of the synthesized image measured against the
    /// shape reference.
    pub fn shape_reference_values(&self, synth: &Image) -> Result<(f64, f64)> {
        let e = self.extractor;
        Ok((
            self.shape_appearance.evaluate(e, synth, false)?.0,
            self.shape_style.evaluate(e, synth, false)?.0,
        ))
    }
}

fn noise_values(state: &LatentState) -> Result<(f64, LatentGrad)> {
    let mut grad = LatentState::zeros(state.geometry());
    let mut total = 0.0;
    for j in 0..state.num_noise() {
        let (p, g) = noise_penalty_with_grad(state.noise(j))?;
        total += p;
        grad.noise_mut(j).copy_from_slice(&g);
    }
    Ok((total, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// Global iteration index (stage 2 continues the count).
    pub iteration: usize,
    pub stage: u8,
    pub face: f64,
    pub structure: f64,
    pub appearance: f64,
    pub style: f64,
    pub noise: f64,
    pub total: f64,
    pub learning_rate: f64,
}

impl LossRecord {
    pub fn values(&self) -> LossValues {
        LossValues {
            face: self.face,
            structure: self.structure,
            appearance: self.appearance,
            style: self.style,
            noise: self.noise,
        }
    }
}

/// Inner products around the projection at one transfer-stage iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRecord {
    pub iteration: usize,
    /// `g_Rᵀ g_AS` before projection.
    pub dot_before: f64,
    /// `g_R'ᵀ g_AS` after projection.
    pub dot_after: f64,
    pub norm_structure: f64,
    pub norm_projected: f64,
    pub norm_reference: f64,
    /// Whether the projection was applied (reference gradient above eps).
    pub applied: bool,
}

impl ProjectionRecord {
    /// `|g_R'ᵀ g_AS| / (‖g_R'‖·‖g_AS‖)`, 0 when either norm vanishes.
    pub fn residual_cosine(&self) -> f64 {
        let d = self.norm_projected * self.norm_reference;
        if d == 0.0 {
            0.0
        } else {
            self.dot_after.abs() / d
        }
    }
}

#[derive(Clone, Debug)]
pub struct TwoStageResult {
    pub state: LatentState,
    /// Final synthesized image, before any blending.
    pub image: Image,
    pub log: Vec<LossRecord>,
    pub projections: Vec<ProjectionRecord>,
    pub snapshots: Vec<(usize, Image)>,
}

pub const LOSS_CSV_HEADER: &str = "iteration,stage,face,structure,appearance,style,noise,total,learning_rate";

pub fn write_loss_csv(records: &[LossRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{LOSS_CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.iteration, r.stage, r.face, r.structure, r.appearance, r.style, r.noise, r.total, r.learning_rate
        )?;
    }
    Ok(())
}

struct Step {
    values: LossValues,
    grad: Vec<f64>,
    projection: Option<ProjectionRecord>,
}

fn accumulate(acc: &mut Option<Image>, g: Option<Image>, w: f64) {
    if let Some(g) = g {
        match acc {
            Some(a) => a.add_scaled(&g, w),
            None => {
                let mut g = g;
                g.scale(w);
                *acc = Some(g);
            }
        }
    }
}

fn divergence(stage: u8, iteration: usize, detail: impl Into<String>) -> Error {
    Error::Divergence {
        stage,
        iteration,
        detail: detail.into(),
    }
}

struct Runner<'a> {
    backend: &'a dyn GeneratorBackend,
    objective: Objective<'a>,
    config: &'a OptimizationConfig,
}

impl Runner<'_> {
    fn vjp(&self, state: &LatentState, g: Option<Image>) -> Result<Option<LatentGrad>> {
        g.map(|g| self.backend.synthesize_vjp(state, &g)).transpose()
    }

    fn step(&self, state: &LatentState, stage: u8, iteration: usize) -> Result<Step> {
        let mask = self.config.stage_mask(stage);
        let w = &self.config.weights;
        let e = self.objective.extractor;
        let synth = self.backend.synthesize(state)?;
        let mut values = LossValues::default();

        let mut img_grad: Option<Image> = None;
        let mut structure_grad: Option<Image> = None;
        if mask.face {
            let (v, g) = self.objective.face.evaluate(e, &synth, true)?;
            values.face = v;
            accumulate(&mut img_grad, g, w.face);
        }
        if mask.structure {
            let (v, g) = self.objective.structure.evaluate(e, &synth, true)?;
            values.structure = v;
            structure_grad = g;
        }
        if mask.appearance {
            let (v, g) = self.objective.appearance.evaluate(e, &synth, true)?;
            values.appearance = v;
            accumulate(&mut img_grad, g, w.appearance);
        }
        if mask.style {
            let (v, g) = self.objective.style.evaluate(e, &synth, true)?;
            values.style = v;
            accumulate(&mut img_grad, g, w.style);
        }

        let project = stage == 2 && self.config.go_enabled && mask.structure;
        let mut projection = None;
        let mut grad = LatentState::zeros(state.geometry());
        if project {
            let g_r = self.vjp(state, structure_grad)?.expect("structure gradient requested");
            let mut ref_grad: Option<Image> = None;
            accumulate(&mut ref_grad, self.objective.shape_appearance.evaluate(e, &synth, true)?.1, 1.0);
            accumulate(&mut ref_grad, self.objective.shape_style.evaluate(e, &synth, true)?.1, 1.0);
            let g_as = self.vjp(state, ref_grad)?.expect("reference gradient requested");
            let span = match self.config.projection {
                ProjectionScope::All => state.values().len(),
                ProjectionScope::WPlusOnly => state.geometry().w_len(),
            };
            let (r, a) = (&g_r.values()[..span], &g_as.values()[..span]);
            let projected = orthogonalize(r, a, GO_EPS)?;
            projection = Some(ProjectionRecord {
                iteration,
                dot_before: dot(r, a),
                dot_after: dot(&projected, a),
                norm_structure: norm(r),
                norm_projected: norm(&projected),
                norm_reference: norm(a),
                applied: dot(a, a) > GO_EPS,
            });
            let mut g_r = g_r;
            g_r.values_mut()[..span].copy_from_slice(&projected);
            grad.add_scaled(&g_r, w.structure);
        } else {
            accumulate(&mut img_grad, structure_grad, w.structure);
        }
        if let Some(g) = self.vjp(state, img_grad)? {
            grad.add_scaled(&g, 1.0);
        }
        if mask.noise {
            let (v, g) = noise_values(state)?;
            values.noise = v;
            grad.add_scaled(&g, w.noise);
        }
        if !values.is_finite() {
            return Err(divergence(stage, iteration, format!("non-finite loss {values:?}")));
        }
        Ok(Step {
            values,
            grad: grad.into_vec(),
            projection,
        })
    }
}

/// Reconstruction stage then transfer stage from the mean-latent start.
pub fn run_two_stage(
    backend: &dyn GeneratorBackend,
    extractor: &dyn FeatureExtractor,
    inputs: &TransferInputs,
    config: &OptimizationConfig,
) -> Result<TwoStageResult> {
    let state = init_latent_state(backend, config.seed);
    run_two_stage_from(backend, extractor, inputs, config, state)
}

pub fn run_two_stage_from(
    backend: &dyn GeneratorBackend,
    extractor: &dyn FeatureExtractor,
    inputs: &TransferInputs,
    config: &OptimizationConfig,
    mut state: LatentState,
) -> Result<TwoStageResult> {
    config.validate()?;
    state.check_geometry(backend.geometry())?;
    let r = backend.geometry().resolution;
    if inputs.identity.height() != r || inputs.identity.width() != r {
        return Err(Error::shape(format!(
            "inputs are {}x{}, generator produces {r}x{r}",
            inputs.identity.height(),
            inputs.identity.width()
        )));
    }
    let runner = Runner {
        backend,
        objective: Objective::new(extractor, inputs)?,
        config,
    };
    let mut log = Vec::with_capacity(config.stage1_iters + config.stage2_iters);
    let mut projections = Vec::new();
    let mut snapshots = Vec::new();
    let mut iteration = 0;
    for (stage, iters) in [(1u8, config.stage1_iters), (2u8, config.stage2_iters)] {
        let mut adam = AdamState::new(state.values().len());
        let mask = config.stage_mask(stage);
        for t in 0..iters {
            let lr = cosine_lr(t, iters, config.lr0);
            let step = runner.step(&state, stage, iteration)?;
            if config.snapshot_every > 0 && iteration % config.snapshot_every == 0 {
                snapshots.push((iteration, backend.synthesize(&state)?));
            }
            let v = step.values;
            log.push(LossRecord {
                iteration,
                stage,
                face: v.face,
                structure: v.structure,
                appearance: v.appearance,
                style: v.style,
                noise: v.noise,
                total: total_loss(&v, &config.weights, mask),
                learning_rate: lr,
            });
            projections.extend(step.projection);
            adam.step(state.values_mut(), &step.grad, lr, &config.adam).map_err(|e| match e {
                Error::Divergence { detail, .. } => divergence(stage, iteration, detail),
                other => other,
            })?;
            if !state.is_finite() {
                return Err(divergence(stage, iteration, "latent state became non-finite"));
            }
            iteration += 1;
        }
    }
    let image = backend.synthesize(&state)?;
    Ok(TwoStageResult {
        state,
        image,
        log,
        projections,
        snapshots,
    })
}
