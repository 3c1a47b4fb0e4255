//! Experiment configuration: one TOML file, dotted command-line overrides,
//! and defaults that follow the reference training setup.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::frm::SigmaConfig;
use crate::ingest::{BoundingBox, ColumnMap, SplitRatios};
use crate::model::DenoiserConfig;
use crate::sample::TransitionMode;
use crate::schedule::{subsample_levels, InferenceStepping, ScheduleParams};
use crate::treeplan::{build_plan, build_plan_with_branching, TreePlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Csv,
    Synthetic,
}

/// Parameters of the moving-bump generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_segments: usize,
    /// Bump width in pixels.
    pub sigma_px: f64,
    /// Largest per-day displacement along each axis, in pixels.
    pub max_speed_px: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_segments: 40,
            sigma_px: 1.5,
            max_speed_px: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub csv: Option<PathBuf>,
    pub bbox: BoundingBox,
    /// `[height, width]` of every map.
    pub resolution: [usize; 2],
    /// Forecast horizons per segment (segments hold one more day).
    pub horizons: usize,
    pub sigma: SigmaConfig,
    /// Kernel truncation radius in σ; `None` evaluates every pixel.
    pub cutoff_sigmas: Option<f64>,
    pub min_confidence: Option<f64>,
    pub columns: ColumnMap,
    pub split: SplitRatios,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Csv,
            csv: None,
            bbox: BoundingBox::CONUS,
            resolution: [128, 128],
            horizons: 27,
            sigma: SigmaConfig::default(),
            cutoff_sigmas: None,
            min_confidence: None,
            columns: ColumnMap::default(),
            split: SplitRatios::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

/// Network hyperparameters not implied by the data or the schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub film_init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        ModelConfig {
            base_channels: d.base_channels,
            depth: d.depth,
            embed_dim: d.embed_dim,
            film_init_scale: d.film_init_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    /// Training steps D_train.
    pub d_train: usize,
    /// Inference steps D_test.
    pub d_test: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub mode: TransitionMode,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        let s = ScheduleParams::default();
        DiffusionConfig {
            d_train: s.steps,
            d_test: 10,
            beta_start: s.beta_start,
            beta_end: s.beta_end,
            mode: TransitionMode::Deterministic,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule_params(&self) -> ScheduleParams {
        ScheduleParams {
            steps: self.d_train,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }

    pub fn stepping(&self) -> Result<InferenceStepping> {
        subsample_levels(self.d_train, self.d_test)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeConfig {
    /// Tree depth L; ignored when `branching` is given.
    pub depth: usize,
    pub branching: Option<Vec<usize>>,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            depth: 4,
            branching: None,
        }
    }
}

impl TreeConfig {
    pub fn plan(&self, horizons: usize, steps: usize) -> Result<TreePlan> {
        match &self.branching {
            Some(b) => build_plan_with_branching(horizons, b.clone(), steps),
            None => build_plan(horizons, self.depth, steps),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSampling {
    /// Offsets realized by the plan's branch transitions (with `p_tree`).
    #[default]
    Tree,
    /// Any ordered pair of horizons, uniformly (with `p_tree`).
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Cap on optimizer steps across all epochs.
    pub max_steps: Option<u64>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Probability of drawing a shifted pair instead of `t_i = t_j`.
    pub p_tree: f64,
    pub pair_sampling: PairSampling,
    /// Use one ε draw for both noisy states of a pair.
    pub share_noise: bool,
    /// Validation interval in steps (0: only after the last step).
    pub eval_every: u64,
    /// Validation segments sampled per evaluation (0: all).
    pub val_segments: usize,
    /// Periodic checkpoint interval in steps (0: only the final one).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 1e-4,
            lr_min: 1e-6,
            batch_size: 4,
            epochs: 100,
            max_steps: None,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            p_tree: 0.8,
            pair_sampling: PairSampling::Tree,
            share_noise: false,
            eval_every: 1000,
            val_segments: 16,
            checkpoint_every: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            dataset_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            output_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every random consumer derives a named stream from it.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub tree: TreeConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
    }

    /// Loads `path` (or the defaults) and applies `overrides` in order.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut config = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        for (key, value) in overrides {
            config.set(key, value)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable in TOML")
    }

    /// Sets a dotted key such as `train.lr_max` from its textual value.
    /// Values parse as TOML scalars/arrays, falling back to a bare string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::InvalidArgument(format!("unknown config key `{key}`")))?;
        }
        *slot = parse_value(value);
        *self = serde_json::from_value(doc)
            .map_err(|e| Error::InvalidArgument(format!("`{key} = {value}`: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        ensure!(t.batch_size >= 1, "train.batch_size must be positive");
        ensure!(
            t.lr_max > 0.0 && t.lr_min >= 0.0 && t.lr_min <= t.lr_max,
            "need 0 <= train.lr_min <= train.lr_max, 0 < train.lr_max"
        );
        ensure!((0.0..=1.0).contains(&t.p_tree), "train.p_tree must lie in [0, 1]");
        ensure!(
            (1..=self.diffusion.d_train).contains(&self.diffusion.d_test),
            "need 1 <= diffusion.d_test <= diffusion.d_train"
        );
        ensure!(self.data.horizons >= 1, "data.horizons must be positive");
        self.diffusion.schedule_params().build()?;
        self.denoiser_config().validate()?;
        self.plan()?;
        Ok(())
    }

    /// Network configuration implied by the model, data and diffusion sections.
    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            resolution: (self.data.resolution[0], self.data.resolution[1]),
            base_channels: self.model.base_channels,
            depth: self.model.depth,
            embed_dim: self.model.embed_dim,
            max_level: self.diffusion.d_train,
            horizons: self.data.horizons,
            film_init_scale: self.model.film_init_scale,
        }
    }

    /// Tree plan with the inference step allocation.
    pub fn plan(&self) -> Result<TreePlan> {
        self.tree.plan(self.data.horizons, self.diffusion.d_test)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(canonical))
    }
}

fn parse_value(text: &str) -> serde_json::Value {
    let wrapped = format!("v = {text}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut table) => {
            let v = table.remove("v").expect("key present");
            serde_json::to_value(v).unwrap_or_else(|_| serde_json::Value::String(text.into()))
        }
        Err(_) => serde_json::Value::String(text.into()),
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
