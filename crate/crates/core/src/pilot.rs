//! Desk-scale data-bias study.
//!
//! Finding 1: a model trained on `{x + n, x}` still improves the actual
//! noisy images `x`; a model trained on `{y + n, y}` is the reference.
//! Finding 2: training on targets degraded by a bias of growing strength
//! gives steadily worse denoisers.
//!
//! Clean references are used here for three labeled purposes only:
//! synthesizing observations, the noisy-clean / biased reference
//! conditions, and evaluation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{make_biased_targets, BiasKind, CleanSet, NoisySet};
use crate::error::{IdrError, Result};
use crate::image::ImageBuffer;
use crate::metrics::psnr;
use crate::noise::{NoiseSpec, RngStream};
use crate::scheduler::{evaluate, train_baseline, train_on_reference, IdrConfig, Mode, RunContext};

pub const STUDY_STREAM: u64 = 4;
pub const BIASED_STREAM: u64 = 5;

/// Substream of the study stream that holds per-level test noise.
const TEST_NOISE_BASE: u64 = 1000;

/// Smooth synthetic gray images: a tilted background, soft-edged discs and
/// rectangles, Gaussian blobs and an occasional low-contrast grating.
/// Image `i` depends only on `(seed, i)`.
pub fn procedural_corpus(count: usize, size: usize, seed: u64) -> CleanSet {
    let base = RngStream::new(seed, STUDY_STREAM);
    let images = (0..count)
        .map(|i| procedural_image(size, &mut base.substream(i as u64)))
        .collect();
    CleanSet::from_images(images)
}

fn smoothstep(edge: f64) -> f64 {
    // soft edge of roughly one pixel around 0
    let t = (edge + 0.75).clamp(0.0, 1.5) / 1.5;
    t * t * (3.0 - 2.0 * t)
}

fn procedural_image(size: usize, rng: &mut RngStream) -> ImageBuffer {
    let n = size as f64;
    let mut v = vec![0f64; size * size];
    let (a, gx, gy) = (0.3 + 0.4 * rng.uniform(), rng.uniform() - 0.5, rng.uniform() - 0.5);
    for y in 0..size {
        for x in 0..size {
            v[y * size + x] = a + 0.3 * (gx * x as f64 + gy * y as f64) / n;
        }
    }
    let shapes = 3 + rng.below(6);
    for _ in 0..shapes {
        let level = 0.1 + 0.8 * rng.uniform();
        let alpha = 0.5 + 0.5 * rng.uniform();
        let (cx, cy) = (n * rng.uniform(), n * rng.uniform());
        let disc = rng.uniform() < 0.5;
        let (rx, ry) = (n * (0.05 + 0.2 * rng.uniform()), n * (0.05 + 0.2 * rng.uniform()));
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let inside = if disc {
                    rx.min(ry) - (dx * dx + dy * dy).sqrt()
                } else {
                    (rx - dx.abs()).min(ry - dy.abs())
                };
                let w = alpha * smoothstep(inside);
                let p = &mut v[y * size + x];
                *p = (1.0 - w) * *p + w * level;
            }
        }
    }
    let blobs = rng.below(4);
    for _ in 0..blobs {
        let amp = 0.3 * (rng.uniform() - 0.5);
        let (cx, cy, s) = (n * rng.uniform(), n * rng.uniform(), n * (0.05 + 0.15 * rng.uniform()));
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                v[y * size + x] += amp * (-(dx * dx + dy * dy) / (2.0 * s * s)).exp();
            }
        }
    }
    if rng.uniform() < 0.5 {
        let amp = 0.03 + 0.05 * rng.uniform();
        let period = 6.0 + 14.0 * rng.uniform();
        let theta = std::f64::consts::PI * rng.uniform();
        let (c, s) = (theta.cos(), theta.sin());
        for y in 0..size {
            for x in 0..size {
                let t = (c * x as f64 + s * y as f64) * 2.0 * std::f64::consts::PI / period;
                v[y * size + x] += amp * t.sin();
            }
        }
    }
    let data = v.iter().map(|&p| p.clamp(0.05, 0.95) as f32).collect();
    ImageBuffer::new(size, size, 1, data).expect("corpus image is well formed")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotConfig {
    /// Training schedule shared by every trained model (mode is ignored;
    /// each model trains for `schedule.epochs` epochs on fixed targets).
    pub schedule: IdrConfig,
    pub seeds: Vec<u64>,
    pub test_levels: usize,
    pub train_fraction: f64,
    /// Seed of the train/test split.
    pub split_seed: u64,
}

impl Default for PilotConfig {
    fn default() -> Self {
        PilotConfig {
            schedule: IdrConfig {
                mode: Mode::Baseline,
                epochs: 4,
                ..IdrConfig::default()
            },
            seeds: vec![0, 1, 2],
            test_levels: 4,
            train_fraction: 0.7,
            split_seed: 0,
        }
    }
}

impl PilotConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.seeds.is_empty() {
            return Err(IdrError::param("pilot needs at least one seed"));
        }
        if self.test_levels == 0 {
            return Err(IdrError::param("pilot needs at least one test level"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(IdrError::param("train_fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    fn schedule_for(&self, seed: u64) -> IdrConfig {
        IdrConfig {
            mode: Mode::Baseline,
            seed,
            round_seeds: Vec::new(),
            ..self.schedule.clone()
        }
    }
}

/// Deterministic shuffled split into `(train, test)`.
pub fn split_corpus(corpus: &CleanSet, train_fraction: f64, seed: u64) -> (CleanSet, CleanSet) {
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = RngStream::new(seed, STUDY_STREAM).substream(u64::MAX);
    for i in (1..idx.len()).rev() {
        idx.swap(i, rng.below(i + 1));
    }
    let n_train = ((corpus.len() as f64) * train_fraction).round() as usize;
    let (train, test) = idx.split_at(n_train.min(corpus.len()));
    let (mut train, mut test) = (train.to_vec(), test.to_vec());
    train.sort_unstable();
    test.sort_unstable();
    (corpus.subset(&train), corpus.subset(&test))
}

/// One long-format result row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PilotRow {
    pub level: f64,
    pub condition: String,
    pub psnr: f64,
    pub seed: u64,
}

/// Test observations at each level for one seed, plus their references.
struct TestBench {
    levels: Vec<f64>,
    noisy: Vec<NoisySet>,
    clean: CleanSet,
}

impl TestBench {
    fn new(test: &CleanSet, spec: &NoiseSpec, levels: usize, seed: u64) -> Result<TestBench> {
        let levels = spec.test_levels(levels);
        let base = RngStream::new(seed, STUDY_STREAM);
        let noisy = levels
            .iter()
            .enumerate()
            .map(|(i, &l)| test.synthesize_noisy_at(spec, l, &base.substream(TEST_NOISE_BASE + i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(TestBench {
            levels,
            noisy,
            clean: test.clone(),
        })
    }

    fn input_psnr(&self, i: usize) -> Result<f64> {
        let vals = self.noisy[i]
            .images()
            .iter()
            .zip(self.clean.images())
            .map(|(x, y)| psnr(x, y, 1.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    }

    fn model_psnr(&self, model: &crate::model::DenoiserModel, cfg: &IdrConfig, i: usize) -> Result<f64> {
        Ok(evaluate(model, &self.noisy[i], &self.clean, &cfg.inference)?.mean_psnr)
    }
}

fn ctx(verbose: bool) -> RunContext<'static> {
    RunContext {
        verbose,
        ..RunContext::default()
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn rows_csv(rows: &[PilotRow]) -> String {
    let mut s = String::from("level,condition,psnr,seed\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.level, r.condition, crate::metrics::fmt_metric(r.psnr), r.seed);
    }
    s
}

pub const NOISY_INPUT: &str = "noisy_input";
pub const NOISIER_NOISY: &str = "noisier_noisy";
pub const NOISY_CLEAN: &str = "noisy_clean";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Finding1Report {
    pub rows: Vec<PilotRow>,
    pub levels: Vec<f64>,
}

impl Finding1Report {
    /// Median over seeds of `condition` at each test level.
    pub fn median_curve(&self, condition: &str) -> Vec<f64> {
        self.levels
            .iter()
            .map(|&l| {
                let v: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.level == l && r.condition == condition)
                    .map(|r| r.psnr)
                    .collect();
                median(&v)
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        rows_csv(&self.rows)
    }
}

/// Finding 1 over every seed: noisy-input, noisier-noisy model and
/// noisy-clean model PSNR at `cfg.test_levels` levels spanning the range.
pub fn run_finding1(clean_oracle: &CleanSet, spec: &NoiseSpec, cfg: &PilotConfig, verbose: bool) -> Result<Finding1Report> {
    cfg.validate()?;
    spec.validate()?;
    let (train, test) = split_corpus(clean_oracle, cfg.train_fraction, cfg.split_seed);
    let mut rows = Vec::new();
    let mut levels = Vec::new();
    for &seed in &cfg.seeds {
        let schedule = cfg.schedule_for(seed);
        let (observed, _) = train.synthesize_noisy(spec, &RngStream::new(seed, STUDY_STREAM).substream(0))?;
        let bench = TestBench::new(&test, spec, cfg.test_levels, seed)?;
        levels = bench.levels.clone();
        let nn = train_baseline(&observed, spec, &schedule, &ctx(verbose))?;
        let nc = train_on_reference(train.images().to_vec(), "clean references", spec, &schedule, &ctx(verbose))?;
        for (i, &level) in bench.levels.iter().enumerate() {
            rows.push(PilotRow { level, condition: NOISY_INPUT.into(), psnr: bench.input_psnr(i)?, seed });
            rows.push(PilotRow {
                level,
                condition: NOISIER_NOISY.into(),
                psnr: bench.model_psnr(nn.final_model(), &schedule, i)?,
                seed,
            });
            rows.push(PilotRow {
                level,
                condition: NOISY_CLEAN.into(),
                psnr: bench.model_psnr(nc.final_model(), &schedule, i)?,
                seed,
            });
        }
    }
    Ok(Finding1Report { rows, levels })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Finding2Report {
    pub bias: BiasKind,
    pub sigmas: Vec<f64>,
    /// Per-level rows; `condition` is `sigma=<σ>`.
    pub rows: Vec<PilotRow>,
}

impl Finding2Report {
    pub fn condition(sigma: f64) -> String {
        format!("sigma={sigma}")
    }

    /// Test PSNR averaged over levels for one seed and bias strength.
    pub fn mean_psnr(&self, sigma: f64, seed: u64) -> f64 {
        let c = Self::condition(sigma);
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.condition == c && r.seed == seed)
            .map(|r| r.psnr)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        s.dedup();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Median over seeds of the level-averaged PSNR, per σ.
    pub fn median_psnr(&self) -> Vec<f64> {
        let seeds = self.seeds();
        self.sigmas
            .iter()
            .map(|&s| median(&seeds.iter().map(|&seed| self.mean_psnr(s, seed)).collect::<Vec<_>>()))
            .collect()
    }

    /// Median PSNR change relative to the first (least biased) σ.
    pub fn median_drops(&self) -> Vec<f64> {
        let m = self.median_psnr();
        m.iter().map(|v| v - m[0]).collect()
    }

    pub fn to_csv(&self) -> String {
        rows_csv(&self.rows)
    }
}

/// Finding 2 over every seed: for each σ, a model trained on
/// `{b + n, b}` with biased targets `b` built from the clean references.
/// All σ share the same base noise field, patch and noise streams, so
/// conditions differ only in bias strength.
pub fn run_finding2(
    clean_oracle: &CleanSet,
    spec: &NoiseSpec,
    bias: BiasKind,
    sigmas: &[f64],
    cfg: &PilotConfig,
    verbose: bool,
) -> Result<Finding2Report> {
    cfg.validate()?;
    spec.validate()?;
    if sigmas.is_empty() || sigmas.windows(2).any(|w| w[0] >= w[1]) || sigmas[0] < 0.0 {
        return Err(IdrError::param(format!(
            "bias sigmas {sigmas:?} must be non-negative and strictly ascending"
        )));
    }
    let (train, test) = split_corpus(clean_oracle, cfg.train_fraction, cfg.split_seed);
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let schedule = cfg.schedule_for(seed);
        let bench = TestBench::new(&test, spec, cfg.test_levels, seed)?;
        for &sigma in sigmas {
            let targets = make_biased_targets(train.images(), bias, sigma, &RngStream::new(seed, BIASED_STREAM))?;
            let label = format!("biased references ({bias:?}, sigma {sigma})");
            let model = train_on_reference(targets, &label, spec, &schedule, &ctx(verbose))?;
            for (i, &level) in bench.levels.iter().enumerate() {
                rows.push(PilotRow {
                    level,
                    condition: Finding2Report::condition(sigma),
                    psnr: bench.model_psnr(model.final_model(), &schedule, i)?,
                    seed,
                });
            }
        }
    }
    Ok(Finding2Report {
        bias,
        sigmas: sigmas.to_vec(),
        rows,
    })
}
