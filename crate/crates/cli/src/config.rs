//! TOML run configuration. Every section is optional and unknown keys are
//! rejected; omitted values fall back to the library defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use regformer_core::bench::{BenchConfig, Strategy};
use regformer_core::detection::DetectorConfig;
use regformer_core::evaluation::DEFAULT_RARE_THRESHOLD;
use regformer_core::params::{DEFAULT_GAMMA, DEFAULT_TAU_P};
use regformer_core::synthetic::SyntheticSpec;
use regformer_core::training::TrainConfig;
use regformer_core::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for every random stream; `--seed` takes precedence.
    pub seed: Option<u64>,
    pub model: ModelSection,
    pub detector: DetectorConfig,
    pub train: TrainSection,
    pub data: DataSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
    pub paths: PathsSection,
}

/// Model settings. `tau_p` and `gamma` default to 0.05 and 1.0 for a fresh
/// model; when unset at inference time the checkpoint's values are kept.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Grounding-space width; defaults to the text embedding width.
    pub d_s: Option<usize>,
    pub tau_p: Option<f64>,
    pub gamma: Option<f64>,
}

impl ModelSection {
    pub fn tau_p_or_default(&self) -> f64 {
        self.tau_p.unwrap_or(DEFAULT_TAU_P)
    }

    pub fn gamma_or_default(&self) -> f64 {
        self.gamma.unwrap_or(DEFAULT_GAMMA)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            focal_gamma: t.focal_gamma,
            focal_alpha: t.focal_alpha,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            focal_gamma: self.focal_gamma,
            focal_alpha: self.focal_alpha,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub grid_h: usize,
    pub grid_w: usize,
    pub d_v: usize,
    pub d_t: usize,
    pub n_objects: usize,
    pub n_actions: usize,
    pub n_images: usize,
    pub noise_std: f64,
    pub max_objects_per_image: usize,
    pub interaction_prob: f64,
    pub signature_strength: f64,
    pub background_strength: f64,
    pub max_blob: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            grid_h: s.grid_h,
            grid_w: s.grid_w,
            d_v: s.d_v,
            d_t: s.d_t,
            n_objects: s.n_objects,
            n_actions: s.n_actions,
            n_images: s.n_images,
            noise_std: s.noise_std,
            max_objects_per_image: s.max_objects_per_image,
            interaction_prob: s.interaction_prob,
            signature_strength: s.signature_strength,
            background_strength: s.background_strength,
            max_blob: s.max_blob,
        }
    }
}

impl DataSection {
    pub fn to_spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            d_v: self.d_v,
            d_t: self.d_t,
            n_objects: self.n_objects,
            n_actions: self.n_actions,
            n_images: self.n_images,
            noise_std: self.noise_std,
            seed,
            max_objects_per_image: self.max_objects_per_image,
            interaction_prob: self.interaction_prob,
            signature_strength: self.signature_strength,
            background_strength: self.background_strength,
            max_blob: self.max_blob,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub rare_threshold: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            rare_threshold: DEFAULT_RARE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub grid_h: usize,
    pub grid_w: usize,
    pub d_v: usize,
    pub d_t: usize,
    pub n_objects: usize,
    pub n_actions: usize,
    pub pair_counts: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub iterations: usize,
    pub warmup: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        let b = BenchConfig::default();
        Self {
            grid_h: b.grid_h,
            grid_w: b.grid_w,
            d_v: b.d_v,
            d_t: b.d_t,
            n_objects: b.n_objects,
            n_actions: b.n_actions,
            pair_counts: b.pair_counts,
            strategies: b.strategies,
            iterations: b.iterations,
            warmup: b.warmup,
        }
    }
}

impl BenchSection {
    pub fn to_config(&self, seed: u64) -> BenchConfig {
        BenchConfig {
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            d_v: self.d_v,
            d_t: self.d_t,
            n_objects: self.n_objects,
            n_actions: self.n_actions,
            pair_counts: self.pair_counts.clone(),
            strategies: self.strategies.clone(),
            iterations: self.iterations,
            warmup: self.warmup,
            seed,
        }
    }
}

/// Fallbacks for positional paths left off the command line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub bank: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub gt: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.detector.validate()?;
        if let Some(t) = cfg.model.tau_p {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::Config(format!("model.tau_p must be > 0, got {t}")));
            }
        }
        if let Some(g) = cfg.model.gamma {
            if !(g >= 0.0) || !g.is_finite() {
                return Err(Error::Config(format!("model.gamma must be >= 0, got {g}")));
            }
        }
        Ok(cfg)
    }
}

/// Command-line path, else the configured one, else an argument error.
pub fn resolve_path(arg: Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    arg.or_else(|| configured.clone())
        .ok_or_else(|| Error::Argument(format!("missing {what}: pass it on the command line or set paths.{what}")))
}
