use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, IdentityExtractor, ToyExtractor, Vgg16Extractor};
use crate::generator::{GeneratorBackend, StyleSynth, ToyGenerator};
use crate::optimizer::OptimizationConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum GeneratorConfig {
    Toy {
        #[serde(default)]
        seed: u64,
    },
    /// Pretrained weights in safetensors form.
    Stylesynth { weights: PathBuf },
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig::Toy { seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum ExtractorConfig {
    Toy {
        #[serde(default)]
        seed: u64,
    },
    Identity,
    Vgg16 {
        weights: PathBuf,
        /// Optional per-channel perceptual calibration heads.
        #[serde(default)]
        calibration: Option<PathBuf>,
    },
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig::Toy { seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    /// Relative area growth of the shape reference's hair mask.
    pub dilate: f64,
    /// Relative area shrink of the shape reference's hair mask.
    pub erode: f64,
    /// Eroded masks smaller than this fall back to the undilated mask.
    pub min_eroded_area: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            dilate: 0.2,
            erode: 0.2,
            min_eroded_area: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlendConfig {
    /// Feathering in pixels; unset means 5 px scaled from 512².
    pub feather_sigma: Option<f64>,
    /// External inpainter argv; `{input}`, `{mask}` and `{output}` are
    /// replaced by PNG paths.
    pub inpaint_command: Option<Vec<String>>,
    pub inpaint_timeout_secs: u64,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self {
            feather_sigma: None,
            inpaint_command: None,
            inpaint_timeout_secs: 120,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Hair-IoU source for the synthesized image when the generator has no
    /// hair-signal channel: a mask PNG written by an external segmenter.
    pub synth_hair_mask: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub generator: GeneratorConfig,
    pub extractor: ExtractorConfig,
    pub optimizer: OptimizationConfig,
    pub masks: MaskConfig,
    pub blending: BlendConfig,
    pub evaluation: EvaluationConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative weight and calibration paths are resolved against the
    /// config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let GeneratorConfig::Stylesynth { weights } = &mut self.generator {
            fix(weights);
        }
        if let ExtractorConfig::Vgg16 { weights, calibration } = &mut self.extractor {
            fix(weights);
            if let Some(c) = calibration {
                fix(c);
            }
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        let m = &self.masks;
        if !(m.dilate > 0.0 && m.dilate <= 1.0) {
            return Err(Error::Config(format!("masks.dilate must lie in (0, 1], got {}", m.dilate)));
        }
        if !(m.erode > 0.0 && m.erode < 1.0) {
            return Err(Error::Config(format!("masks.erode must lie in (0, 1), got {}", m.erode)));
        }
        if let Some(s) = self.blending.feather_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("blending.feather_sigma must be >= 0, got {s}")));
            }
        }
        if let Some(cmd) = &self.blending.inpaint_command {
            if cmd.is_empty() {
                return Err(Error::Config("blending.inpaint_command is empty".into()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML serialisation, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let text = self.to_toml_string()?;
        Ok(hex_digest(text.as_bytes()))
    }

    /// Per-job seed derived from the optimizer seed and the tuple id.
    pub fn job_seed(&self, tuple_id: &str) -> u64 {
        let digest = Sha256::digest(format!("{}:{tuple_id}", self.optimizer.seed).as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    pub fn build_generator(&self) -> Result<Box<dyn GeneratorBackend>> {
        Ok(match &self.generator {
            GeneratorConfig::Toy { seed } => Box::new(ToyGenerator::new(*seed)),
            GeneratorConfig::Stylesynth { weights } => Box::new(StyleSynth::load(weights)?),
        })
    }

    pub fn build_extractor(&self) -> Result<Box<dyn FeatureExtractor>> {
        Ok(match &self.extractor {
            ExtractorConfig::Toy { seed } => Box::new(ToyExtractor::new(*seed)),
            ExtractorConfig::Identity => Box::new(IdentityExtractor::new(3)),
            ExtractorConfig::Vgg16 { weights, calibration } => {
                let mut e = Vgg16Extractor::load(weights)?;
                if let Some(c) = calibration {
                    e = e.with_calibration_file(c)?;
                }
                Box::new(e)
            }
        })
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
