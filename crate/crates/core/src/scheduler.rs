//! Training schedules: noisier-noisy baseline, full iterative data
//! refinement (a fresh model per round) and fast refinement (one epoch per
//! refinement, parameters carried over).
//!
//! Every training sample is a random patch of the current targets with
//! freshly drawn noise added, so each epoch sees a newly constructed
//! noisier-noisy dataset.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{extract_patches, infer_images, make_noisier_noisy, refine_targets, CleanSet, InferenceOptions, NoisySet, TargetStore};
use crate::error::{IdrError, Result};
use crate::image::ImageBuffer;
use crate::metrics::{fmt_metric, MetricReport};
use crate::model::{build_unet, save_checkpoint, train_step, DenoiserModel, ModelConfig, TrainingState, INIT_STREAM};
use crate::noise::{NoiseSpec, RngStream};
use crate::tensor::AdamConfig;

pub const PATCH_STREAM: u64 = 2;
pub const NOISE_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Full,
    Fast,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Full => "full",
            Mode::Fast => "fast",
        }
    }
}

/// Step decay: the rate is multiplied by `factor` once the iteration
/// reaches each milestone, given as a fraction of the schedule length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub milestones: Vec<f64>,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 3e-4,
            milestones: vec![0.5, 0.8],
            factor: 0.5,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial >= 0.0 && self.initial.is_finite()) {
            return Err(IdrError::param(format!("learning rate {} must be finite and >= 0", self.initial)));
        }
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return Err(IdrError::param(format!("decay factor {} must lie in (0, 1]", self.factor)));
        }
        let mut prev = 0.0;
        for &m in &self.milestones {
            if !(m > prev && m < 1.0) {
                return Err(IdrError::param(format!(
                    "milestones {:?} must be strictly increasing fractions in (0, 1)",
                    self.milestones
                )));
            }
            prev = m;
        }
        Ok(())
    }

    /// Iteration indices at which the rate decays for a `total`-step run.
    pub fn milestone_iterations(&self, total: u64) -> Vec<u64> {
        self.milestones
            .iter()
            .map(|m| (m * total as f64).floor() as u64)
            .collect()
    }

    pub fn lr_at(&self, iteration: u64, total: u64) -> f64 {
        let passed = self
            .milestone_iterations(total)
            .iter()
            .filter(|&&m| iteration >= m)
            .count();
        self.initial * self.factor.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdrConfig {
    pub mode: Mode,
    /// Total epochs `M` for baseline and fast mode.
    pub epochs: usize,
    /// Refinement rounds `M` for full mode; models `F_0 … F_M` are trained.
    pub rounds: usize,
    pub epochs_per_round: usize,
    pub iterations_per_epoch: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    /// Per-round seeds for full mode (length `rounds + 1`). Empty means
    /// `seed + m` for round `m`.
    #[serde(default)]
    pub round_seeds: Vec<u64>,
    /// Fast mode only: `false` freezes the targets at the observations.
    pub refine: bool,
    pub inference: InferenceOptions,
    /// Architecture; its `seed` is replaced by the run's round seed.
    pub model: ModelConfig,
}

impl Default for IdrConfig {
    fn default() -> Self {
        IdrConfig {
            mode: Mode::Fast,
            epochs: 10,
            rounds: 4,
            epochs_per_round: 4,
            iterations_per_epoch: 2000,
            batch_size: 4,
            patch_size: 48,
            lr: LrSchedule::default(),
            seed: 0,
            round_seeds: Vec::new(),
            refine: true,
            inference: InferenceOptions::default(),
            model: ModelConfig::default(),
        }
    }
}

impl IdrConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.lr.validate()?;
        let align = self.model.alignment();
        self.inference.validate(align)?;
        if self.epochs == 0 && self.mode != Mode::Full {
            return Err(IdrError::param("epochs must be at least 1"));
        }
        if self.mode == Mode::Full && self.epochs_per_round == 0 {
            return Err(IdrError::param("epochs_per_round must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(IdrError::param("batch size must be positive"));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(align) {
            return Err(IdrError::param(format!(
                "patch size {} must be a positive multiple of {align}",
                self.patch_size
            )));
        }
        if !self.round_seeds.is_empty() && self.round_seeds.len() != self.rounds + 1 {
            return Err(IdrError::param(format!(
                "round_seeds has {} entries, expected {}",
                self.round_seeds.len(),
                self.rounds + 1
            )));
        }
        Ok(())
    }

    pub fn round_seed(&self, round: usize) -> u64 {
        self.round_seeds
            .get(round)
            .copied()
            .unwrap_or_else(|| self.seed.wrapping_add(round as u64))
    }

    pub fn model_config(&self, round: usize) -> ModelConfig {
        ModelConfig {
            seed: self.round_seed(round),
            ..self.model.clone()
        }
    }

    /// Optimizer steps per model: the whole run for baseline and fast
    /// mode, one round for full mode.
    pub fn iterations_per_model(&self) -> u64 {
        let epochs = match self.mode {
            Mode::Full => self.epochs_per_round,
            _ => self.epochs,
        };
        (epochs * self.iterations_per_epoch) as u64
    }

    /// Human-readable plan of what a run will do.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        let per_model = self.iterations_per_model();
        let _ = writeln!(s, "mode: {}", self.mode.as_str());
        match self.mode {
            Mode::Baseline => {
                let _ = writeln!(s, "epochs: {} (targets fixed at the noisy images)", self.epochs);
            }
            Mode::Fast => {
                let _ = writeln!(
                    s,
                    "epochs: {} (refinement {})",
                    self.epochs,
                    if self.refine { "before every epoch after the first, plus a final pass" } else { "disabled" }
                );
            }
            Mode::Full => {
                let _ = writeln!(
                    s,
                    "rounds: {} refinements, {} models x {} epochs, each from scratch",
                    self.rounds,
                    self.rounds + 1,
                    self.epochs_per_round
                );
            }
        }
        let _ = writeln!(
            s,
            "iterations/epoch: {}, batch: {}, patch: {}",
            self.iterations_per_epoch, self.batch_size, self.patch_size
        );
        let _ = writeln!(
            s,
            "lr: {} x{} at iterations {:?} of {per_model}",
            self.lr.initial,
            self.lr.factor,
            self.lr.milestone_iterations(per_model)
        );
        let _ = writeln!(
            s,
            "model: levels {}, base {}, in {}, slope {}",
            self.model.levels, self.model.base_channels, self.model.in_channels, self.model.leaky_slope
        );
        let _ = writeln!(
            s,
            "inference: tile {}, overlap {}, batch {}, workers {}",
            self.inference.tile, self.inference.overlap, self.inference.batch, self.inference.workers
        );
        let _ = writeln!(
            s,
            "seed: {} (streams: init={INIT_STREAM}, patches={PATCH_STREAM}, noise={NOISE_STREAM})",
            self.seed
        );
        s
    }
}

/// Noisy observations paired with clean references, for evaluation only.
#[derive(Clone, Copy, Debug)]
pub struct EvalData<'a> {
    pub noisy: &'a NoisySet,
    pub clean: &'a CleanSet,
}

/// Where and how a run reports.
#[derive(Clone, Debug, Default)]
pub struct RunContext<'a> {
    pub out_dir: Option<&'a Path>,
    pub eval: Option<EvalData<'a>>,
    /// Evaluate after every epoch rather than only after each model.
    pub eval_every_epoch: bool,
    /// Write wall-clock seconds into `metrics.csv`. Off by default so the
    /// file is reproducible byte for byte; timings always go to `run.json`.
    pub timing_in_metrics: bool,
    /// Progress lines on stderr.
    pub verbose: bool,
}

/// Mean PSNR/SSIM of `F(x)` against `y` over a noisy/clean test set.
pub fn evaluate(model: &DenoiserModel, noisy: &NoisySet, clean: &CleanSet, opts: &InferenceOptions) -> Result<MetricReport> {
    if noisy.len() != clean.len() {
        return Err(IdrError::shape(format!(
            "{} noisy test images but {} clean references",
            noisy.len(),
            clean.len()
        )));
    }
    let outputs = infer_images(model, noisy.images(), opts)?;
    MetricReport::compute(noisy.names(), &outputs, clean.images())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub round: usize,
    pub mean_loss: f64,
    pub train_seconds: f64,
    /// Refinement performed before this epoch.
    pub refine_seconds: f64,
    pub test_psnr: Option<f64>,
    pub test_ssim: Option<f64>,
    /// Seconds since the run started when the epoch finished.
    pub finished_at: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub model_hash: String,
    pub checkpoint: Option<String>,
    pub test_psnr: Option<f64>,
    pub test_ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: Mode,
    pub seed: u64,
    pub streams: BTreeMap<String, u64>,
    pub config: IdrConfig,
    pub epochs: Vec<EpochRecord>,
    pub rounds: Vec<RoundRecord>,
    pub checkpoints: Vec<String>,
    pub train_seconds: f64,
    pub refine_seconds: f64,
    pub eval_seconds: f64,
    pub total_seconds: f64,
    /// `refine / (train + refine)` wall-clock.
    pub refinement_overhead_fraction: f64,
    pub final_test_psnr: Option<f64>,
    pub final_test_ssim: Option<f64>,
}

/// Models, record and final targets of a run. `models` holds one model
/// for baseline/fast runs and `F_0 … F_M` for full runs.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub models: Vec<DenoiserModel>,
    pub record: RunRecord,
    pub targets: TargetStore,
}

impl RunOutcome {
    pub fn final_model(&self) -> &DenoiserModel {
        self.models.last().expect("a run trains at least one model")
    }
}

/// One model's optimizer, RNG streams and schedule position.
struct Trainer {
    model: DenoiserModel,
    state: TrainingState,
    patch_rng: RngStream,
    noise_rng: RngStream,
    total: u64,
}

impl Trainer {
    fn new(cfg: &IdrConfig, round: usize) -> Result<Trainer> {
        let model = build_unet(&cfg.model_config(round))?;
        let adam = AdamConfig {
            lr: cfg.lr.initial,
            ..AdamConfig::default()
        };
        let state = TrainingState::new(&model, adam);
        let seed = cfg.round_seed(round);
        Ok(Trainer {
            model,
            state,
            patch_rng: RngStream::new(seed, PATCH_STREAM),
            noise_rng: RngStream::new(seed, NOISE_STREAM),
            total: cfg.iterations_per_model(),
        })
    }

    /// One epoch on `{t + n, t}` patches; returns the mean loss.
    fn epoch(&mut self, targets: &[ImageBuffer], spec: &NoiseSpec, cfg: &IdrConfig) -> Result<f64> {
        let mut sum = 0.0;
        for _ in 0..cfg.iterations_per_epoch {
            let lr = cfg.lr.lr_at(self.state.iteration, self.total);
            self.state.set_lr(lr);
            let patches = extract_patches(targets, cfg.patch_size, cfg.batch_size, &mut self.patch_rng)?;
            let pairs = make_noisier_noisy(&patches, spec, &mut self.noise_rng)?;
            let (inputs, tgts) = pairs.to_tensors()?;
            sum += train_step(&mut self.model, &mut self.state, &inputs, &tgts)? as f64;
        }
        Ok(if cfg.iterations_per_epoch == 0 {
            0.0
        } else {
            sum / cfg.iterations_per_epoch as f64
        })
    }
}

/// Accumulates records and writes run artifacts.
struct Recorder<'a> {
    ctx: &'a RunContext<'a>,
    cfg: &'a IdrConfig,
    start: Instant,
    record: RunRecord,
    csv: String,
}

impl<'a> Recorder<'a> {
    fn new(ctx: &'a RunContext<'a>, cfg: &'a IdrConfig) -> Result<Recorder<'a>> {
        if let Some(dir) = ctx.out_dir {
            let ck = dir.join("checkpoints");
            fs::create_dir_all(&ck).map_err(|e| IdrError::io(&ck, e))?;
        }
        let streams = [("init", INIT_STREAM), ("patches", PATCH_STREAM), ("noise", NOISE_STREAM)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Ok(Recorder {
            ctx,
            cfg,
            start: Instant::now(),
            record: RunRecord {
                mode: cfg.mode,
                seed: cfg.seed,
                streams,
                config: cfg.clone(),
                epochs: Vec::new(),
                rounds: Vec::new(),
                checkpoints: Vec::new(),
                train_seconds: 0.0,
                refine_seconds: 0.0,
                eval_seconds: 0.0,
                total_seconds: 0.0,
                refinement_overhead_fraction: 0.0,
                final_test_psnr: None,
                final_test_ssim: None,
            },
            csv: String::from("epoch,round,split,psnr,ssim,loss,seconds\n"),
        })
    }

    fn seconds(&self, s: f64) -> String {
        if self.ctx.timing_in_metrics {
            format!("{s:.3}")
        } else {
            String::new()
        }
    }

    fn evaluate(&mut self, model: &DenoiserModel) -> Result<Option<MetricReport>> {
        let Some(eval) = self.ctx.eval else {
            return Ok(None);
        };
        let t = Instant::now();
        let report = evaluate(model, eval.noisy, eval.clean, &self.cfg.inference)?;
        self.record.eval_seconds += t.elapsed().as_secs_f64();
        Ok(Some(report))
    }

    #[allow(clippy::too_many_arguments)]
    fn epoch(
        &mut self,
        epoch: usize,
        round: usize,
        loss: f64,
        train_s: f64,
        refine_s: f64,
        model: &DenoiserModel,
        force_eval: bool,
    ) -> Result<Option<MetricReport>> {
        self.record.train_seconds += train_s;
        self.record.refine_seconds += refine_s;
        let report = if self.ctx.eval_every_epoch || force_eval {
            self.evaluate(model)?
        } else {
            None
        };
        let _ = writeln!(
            self.csv,
            "{epoch},{round},train,,,{loss:.8},{}",
            self.seconds(train_s + refine_s)
        );
        if let Some(r) = &report {
            let _ = writeln!(
                self.csv,
                "{epoch},{round},test,{},{},,{}",
                fmt_metric(r.mean_psnr),
                fmt_metric(r.mean_ssim),
                self.seconds(train_s + refine_s)
            );
        }
        if self.ctx.verbose {
            let test = report
                .as_ref()
                .map(|r| format!(", test psnr {:.3} ssim {:.4}", r.mean_psnr, r.mean_ssim))
                .unwrap_or_default();
            eprintln!(
                "[{}] round {round} epoch {epoch}: loss {loss:.6}, train {train_s:.1}s, refine {refine_s:.1}s{test}",
                self.cfg.mode.as_str()
            );
        }
        self.record.epochs.push(EpochRecord {
            epoch,
            round,
            mean_loss: loss,
            train_seconds: train_s,
            refine_seconds: refine_s,
            test_psnr: report.as_ref().map(|r| r.mean_psnr),
            test_ssim: report.as_ref().map(|r| r.mean_ssim),
            finished_at: self.start.elapsed().as_secs_f64(),
        });
        Ok(report)
    }

    fn checkpoint(&mut self, model: &DenoiserModel, file: &str) -> Result<Option<String>> {
        let Some(dir) = self.ctx.out_dir else {
            return Ok(None);
        };
        let rel = format!("checkpoints/{file}");
        save_checkpoint(model, dir.join(&rel))?;
        self.record.checkpoints.push(rel.clone());
        Ok(Some(rel))
    }

    fn round(&mut self, round: usize, model: &DenoiserModel, checkpoint: Option<String>, report: Option<&MetricReport>) {
        self.record.rounds.push(RoundRecord {
            round,
            model_hash: model.fingerprint(),
            checkpoint,
            test_psnr: report.map(|r| r.mean_psnr),
            test_ssim: report.map(|r| r.mean_ssim),
        });
    }

    fn finish(mut self, models: Vec<DenoiserModel>, targets: TargetStore) -> Result<RunOutcome> {
        let r = &mut self.record;
        r.total_seconds = self.start.elapsed().as_secs_f64();
        let busy = r.train_seconds + r.refine_seconds;
        r.refinement_overhead_fraction = if busy > 0.0 { r.refine_seconds / busy } else { 0.0 };
        if let Some(last) = r.rounds.last() {
            r.final_test_psnr = last.test_psnr;
            r.final_test_ssim = last.test_ssim;
        }
        if let Some(dir) = self.ctx.out_dir {
            let final_model = models.last().expect("at least one model");
            save_checkpoint(final_model, dir.join("checkpoints/final.ckpt"))?;
            r.checkpoints.push("checkpoints/final.ckpt".into());
            write_file(&dir.join("metrics.csv"), self.csv.as_bytes())?;
            let json = serde_json::to_string_pretty(&self.record).expect("run record serializes");
            write_file(&dir.join("run.json"), json.as_bytes())?;
        }
        Ok(RunOutcome {
            models,
            record: self.record,
            targets,
        })
    }
}

fn write_file(path: &PathBuf, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| IdrError::io(path, e))
}

fn check_training_set(noisy: &NoisySet, cfg: &IdrConfig) -> Result<()> {
    cfg.validate()?;
    if noisy.is_empty() {
        return Err(IdrError::param("training set is empty"));
    }
    if let Some(img) = noisy.images().iter().find(|i| i.channels() != cfg.model.in_channels) {
        return Err(IdrError::shape(format!(
            "model expects {} channels but an image has {}",
            cfg.model.in_channels,
            img.channels()
        )));
    }
    Ok(())
}

/// Cumulative training on `store`; when `refine_from` is given the targets
/// are rebuilt from those observations before every epoch after the first
/// and once more after the last.
fn cumulative(
    mut store: TargetStore,
    refine_from: Option<&NoisySet>,
    spec: &NoiseSpec,
    cfg: &IdrConfig,
    ctx: &RunContext,
) -> Result<RunOutcome> {
    spec.validate()?;
    let mut rec = Recorder::new(ctx, cfg)?;
    let mut trainer = Trainer::new(cfg, 0)?;
    let mut last_report = None;
    for epoch in 0..cfg.epochs {
        let mut refine_s = 0.0;
        if epoch > 0 {
            if let Some(noisy) = refine_from {
                let t = Instant::now();
                store = refine_targets(&trainer.model, noisy, &store, &cfg.inference)?;
                refine_s = t.elapsed().as_secs_f64();
            }
        }
        let t = Instant::now();
        let loss = trainer.epoch(store.targets(), spec, cfg)?;
        let train_s = t.elapsed().as_secs_f64();
        let last = epoch + 1 == cfg.epochs;
        let round = if refine_from.is_some() { epoch } else { 0 };
        last_report = rec.epoch(epoch, round, loss, train_s, refine_s, &trainer.model, last)?;
        rec.checkpoint(&trainer.model, &format!("epoch_{epoch:03}.ckpt"))?;
    }
    if let Some(noisy) = refine_from {
        let t = Instant::now();
        store = refine_targets(&trainer.model, noisy, &store, &cfg.inference)?;
        rec.record.refine_seconds += t.elapsed().as_secs_f64();
    }
    rec.round(store.round(), &trainer.model, None, last_report.as_ref());
    rec.finish(vec![trainer.model], store)
}

/// Trains one model on `{x + n, x}` for `cfg.epochs` epochs.
pub fn train_baseline(noisy: &NoisySet, spec: &NoiseSpec, cfg: &IdrConfig, ctx: &RunContext) -> Result<RunOutcome> {
    check_training_set(noisy, cfg)?;
    let cfg = IdrConfig {
        mode: Mode::Baseline,
        ..cfg.clone()
    };
    cumulative(TargetStore::initial(noisy), None, spec, &cfg, ctx)
}

/// Fast refinement: one model trained for `cfg.epochs` epochs, with the
/// targets replaced by `F(x)` before every epoch after the first (unless
/// `cfg.refine` is off, which makes this identical to the baseline).
pub fn train_fast_idr(noisy: &NoisySet, spec: &NoiseSpec, cfg: &IdrConfig, ctx: &RunContext) -> Result<RunOutcome> {
    check_training_set(noisy, cfg)?;
    let cfg = IdrConfig {
        mode: Mode::Fast,
        ..cfg.clone()
    };
    let refine_from = cfg.refine.then_some(noisy);
    cumulative(TargetStore::initial(noisy), refine_from, spec, &cfg, ctx)
}

/// Full refinement: `F_0` on `{x + n, x}`, then for each round `m` a
/// fresh model on `{F_{m-1}(x) + n, F_{m-1}(x)}`.
pub fn train_full_idr(noisy: &NoisySet, spec: &NoiseSpec, cfg: &IdrConfig, ctx: &RunContext) -> Result<RunOutcome> {
    check_training_set(noisy, cfg)?;
    spec.validate()?;
    let cfg = IdrConfig {
        mode: Mode::Full,
        ..cfg.clone()
    };
    let mut rec = Recorder::new(ctx, &cfg)?;
    let mut store = TargetStore::initial(noisy);
    let mut models: Vec<DenoiserModel> = Vec::with_capacity(cfg.rounds + 1);
    for round in 0..=cfg.rounds {
        let mut refine_s = 0.0;
        if let Some(prev) = models.last() {
            let t = Instant::now();
            store = refine_targets(prev, noisy, &store, &cfg.inference)?;
            refine_s = t.elapsed().as_secs_f64();
        }
        let mut trainer = Trainer::new(&cfg, round)?;
        let mut report = None;
        for epoch in 0..cfg.epochs_per_round {
            let t = Instant::now();
            let loss = trainer.epoch(store.targets(), spec, &cfg)?;
            let train_s = t.elapsed().as_secs_f64();
            let last = epoch + 1 == cfg.epochs_per_round;
            let before = if epoch == 0 { refine_s } else { 0.0 };
            report = rec.epoch(epoch, round, loss, train_s, before, &trainer.model, last)?;
        }
        let ck = rec.checkpoint(&trainer.model, &format!("round_{round:02}.ckpt"))?;
        rec.round(round, &trainer.model, ck, report.as_ref());
        models.push(trainer.model);
    }
    rec.finish(models, store)
}

/// Dispatches on `cfg.mode`.
pub fn run(noisy: &NoisySet, spec: &NoiseSpec, cfg: &IdrConfig, ctx: &RunContext) -> Result<RunOutcome> {
    match cfg.mode {
        Mode::Baseline => train_baseline(noisy, spec, cfg, ctx),
        Mode::Fast => train_fast_idr(noisy, spec, cfg, ctx),
        Mode::Full => train_full_idr(noisy, spec, cfg, ctx),
    }
}

/// Trains on fixed reference targets (clean or deliberately biased). Only
/// the pilot study's reference conditions use this path.
pub(crate) fn train_on_reference(
    targets: Vec<ImageBuffer>,
    label: &str,
    spec: &NoiseSpec,
    cfg: &IdrConfig,
    ctx: &RunContext,
) -> Result<RunOutcome> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(IdrError::param("reference target set is empty"));
    }
    let cfg = IdrConfig {
        mode: Mode::Baseline,
        ..cfg.clone()
    };
    cumulative(TargetStore::from_reference(targets, label), None, spec, &cfg, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> IdrConfig {
        IdrConfig {
            epochs: 2,
            rounds: 1,
            epochs_per_round: 1,
            iterations_per_epoch: 3,
            batch_size: 2,
            patch_size: 8,
            model: ModelConfig {
                levels: 2,
                base_channels: 2,
                ..ModelConfig::default()
            },
            ..IdrConfig::default()
        }
    }

    fn data() -> NoisySet {
        let imgs = (0..3)
            .map(|k| {
                let d = (0..16 * 16).map(|i| ((i * (k + 3)) % 17) as f32 / 17.0).collect();
                ImageBuffer::new(16, 16, 1, d).unwrap()
            })
            .collect();
        NoisySet::from_images(imgs)
    }

    #[test]
    fn lr_schedule_halves_twice() {
        let s = LrSchedule::default();
        assert_eq!(s.milestone_iterations(50_000), vec![25_000, 40_000]);
        assert_eq!(s.lr_at(24_999, 50_000), 3e-4);
        assert_eq!(s.lr_at(25_000, 50_000), 1.5e-4);
        assert_eq!(s.lr_at(40_000, 50_000), 7.5e-5);
        let bad = LrSchedule {
            milestones: vec![0.8, 0.5],
            ..LrSchedule::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(tiny().validate().is_ok());
        let mut c = tiny();
        c.patch_size = 9;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.round_seeds = vec![1];
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_iterations_return_initial_model() {
        let cfg = IdrConfig {
            iterations_per_epoch: 0,
            ..tiny()
        };
        let out = train_baseline(&data(), &NoiseSpec::gaussian(10.0, 10.0), &cfg, &RunContext::default()).unwrap();
        assert_eq!(out.final_model(), &build_unet(&cfg.model_config(0)).unwrap());
    }

    #[test]
    fn fast_without_refinement_is_baseline() {
        let spec = NoiseSpec::gaussian(5.0, 20.0);
        let cfg = IdrConfig {
            refine: false,
            ..tiny()
        };
        let a = train_baseline(&data(), &spec, &cfg, &RunContext::default()).unwrap();
        let b = train_fast_idr(&data(), &spec, &cfg, &RunContext::default()).unwrap();
        assert_eq!(a.final_model().to_checkpoint_bytes(), b.final_model().to_checkpoint_bytes());
        let c = train_fast_idr(&data(), &spec, &tiny(), &RunContext::default()).unwrap();
        assert_ne!(a.final_model(), c.final_model());
        assert_eq!(c.targets.round(), 2);
    }

    #[test]
    fn full_round_count() {
        let out = train_full_idr(&data(), &NoiseSpec::gaussian(10.0, 10.0), &tiny(), &RunContext::default()).unwrap();
        assert_eq!(out.models.len(), 2);
        assert_eq!(out.record.rounds.len(), 2);
        assert_eq!(out.targets.round(), 1);
    }
}
