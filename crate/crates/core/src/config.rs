//! Experiment configuration files.
//!
//! A config is a TOML document with the sections `run`, `data`, `noise`,
//! `model` and `schedule`. Every key except the noise variant has a
//! default, and unknown keys are rejected so that typos fail loudly. The
//! fully expanded form (see [`ExperimentConfig::resolved_toml`]) is what
//! gets written next to a run's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{BiasKind, InferenceOptions};
use crate::error::{IdrError, Result};
use crate::model::ModelConfig;
use crate::noise::{NoiseSpec, NoiseSpecText};
use crate::pilot::PilotConfig;
use crate::scheduler::{IdrConfig, LrSchedule, Mode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    /// Parent directory of the run directory `<out_dir>/<name>`.
    pub out_dir: PathBuf,
    pub seed: u64,
    pub workers: usize,
    pub eval_every_epoch: bool,
    /// Also write wall-clock seconds into `metrics.csv`. Off by default so
    /// that the file is byte-reproducible.
    pub timing_in_metrics: bool,
    pub tile: usize,
    pub overlap: usize,
    pub infer_batch: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        let inf = InferenceOptions::default();
        RunSection {
            name: "run".into(),
            out_dir: PathBuf::from("runs"),
            seed: 0,
            workers: inf.workers,
            eval_every_epoch: true,
            timing_in_metrics: false,
            tile: inf.tile,
            overlap: inf.overlap,
            infer_batch: inf.batch,
        }
    }
}

/// Image folders. Relative entries are resolved against `root`, and a
/// relative `root` against the directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    pub train: PathBuf,
    pub test_noisy: PathBuf,
    pub test_clean: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            root: None,
            train: PathBuf::from("train/noisy"),
            test_noisy: PathBuf::from("test/noisy"),
            test_clean: PathBuf::from("test/clean"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub leaky_slope: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            levels: m.levels,
            base_channels: m.base_channels,
            in_channels: m.in_channels,
            leaky_slope: m.leaky_slope,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub mode: Mode,
    pub epochs: usize,
    pub rounds: usize,
    pub epochs_per_round: usize,
    pub iterations_per_epoch: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub refine: bool,
    pub round_seeds: Vec<u64>,
    pub lr: LrSchedule,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let c = IdrConfig::default();
        ScheduleSection {
            mode: c.mode,
            epochs: c.epochs,
            rounds: c.rounds,
            epochs_per_round: c.epochs_per_round,
            iterations_per_epoch: c.iterations_per_epoch,
            batch_size: c.batch_size,
            patch_size: c.patch_size,
            refine: c.refine,
            round_seeds: c.round_seeds,
            lr: c.lr,
        }
    }
}

/// Settings of the data-bias study. Without `clean_dir` a procedural
/// corpus of `corpus_images` gray images of `corpus_size` pixels is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PilotSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clean_dir: Option<PathBuf>,
    pub corpus_images: usize,
    pub corpus_size: usize,
    pub corpus_seed: u64,
    pub seeds: Vec<u64>,
    pub test_levels: usize,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub bias: BiasKind,
    pub bias_sigmas: Vec<f64>,
}

impl Default for PilotSection {
    fn default() -> Self {
        let p = PilotConfig::default();
        PilotSection {
            clean_dir: None,
            corpus_images: 80,
            corpus_size: 128,
            corpus_seed: 0,
            seeds: p.seeds,
            test_levels: p.test_levels,
            train_fraction: p.train_fraction,
            split_seed: p.split_seed,
            bias: BiasKind::GaussianNoise,
            bias_sigmas: vec![0.0, 1.0, 3.0, 5.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub data: DataSection,
    pub noise: NoiseSpecText,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub pilot: PilotSection,
    /// Directory the config was read from; anchors relative paths.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<ExperimentConfig> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| IdrError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| IdrError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        ExperimentConfig::parse(&text, base)
            .map_err(|e| IdrError::Config(format!("{}: {e}", path.display())))
    }

    pub fn noise_spec(&self) -> Result<NoiseSpec> {
        self.noise.resolve(&self.base_dir)
    }

    /// Training schedule with the run seed and inference settings folded in.
    pub fn idr_config(&self) -> IdrConfig {
        let s = &self.schedule;
        IdrConfig {
            mode: s.mode,
            epochs: s.epochs,
            rounds: s.rounds,
            epochs_per_round: s.epochs_per_round,
            iterations_per_epoch: s.iterations_per_epoch,
            batch_size: s.batch_size,
            patch_size: s.patch_size,
            lr: s.lr.clone(),
            seed: self.run.seed,
            round_seeds: s.round_seeds.clone(),
            refine: s.refine,
            inference: self.inference(),
            model: ModelConfig {
                levels: self.model.levels,
                base_channels: self.model.base_channels,
                in_channels: self.model.in_channels,
                leaky_slope: self.model.leaky_slope,
                seed: self.run.seed,
            },
        }
    }

    /// Study settings; every model uses this config's schedule.
    pub fn pilot_config(&self) -> PilotConfig {
        PilotConfig {
            schedule: self.idr_config(),
            seeds: self.pilot.seeds.clone(),
            test_levels: self.pilot.test_levels,
            train_fraction: self.pilot.train_fraction,
            split_seed: self.pilot.split_seed,
        }
    }

    pub fn inference(&self) -> InferenceOptions {
        InferenceOptions {
            tile: self.run.tile,
            overlap: self.run.overlap,
            batch: self.run.infer_batch,
            workers: self.run.workers,
        }
    }

    /// Checks everything that can be checked without touching the data.
    pub fn validate(&self) -> Result<()> {
        let as_config = |e: IdrError| match e {
            IdrError::Config(m) => IdrError::Config(m),
            other => IdrError::Config(other.to_string()),
        };
        self.noise_spec().map_err(as_config)?;
        self.idr_config().validate().map_err(as_config)?;
        self.pilot_config().validate().map_err(as_config)?;
        if self.run.name.is_empty() || self.run.name.contains(['/', '\\']) {
            return Err(IdrError::Config(format!("invalid run name `{}`", self.run.name)));
        }
        Ok(())
    }

    /// Data root: the `[data] root` key, else `fallback` (typically the
    /// `IDR_DATA_DIR` environment variable), else the config directory.
    pub fn data_root(&self, fallback: Option<&Path>) -> PathBuf {
        match (&self.data.root, fallback) {
            (Some(r), _) => self.base_dir.join(r),
            (None, Some(f)) => f.to_path_buf(),
            (None, None) => self.base_dir.clone(),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.base_dir.join(&self.run.out_dir).join(&self.run.name)
    }

    /// The config with every default written out.
    pub fn resolved_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to toml")
    }
}
