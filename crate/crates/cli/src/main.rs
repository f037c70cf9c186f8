use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use idr_core::config::ExperimentConfig;
use idr_core::dataset::{refine_targets, CleanSet, InferenceOptions, NoisySet, TargetStore};
use idr_core::image::{load_image, save_image};
use idr_core::model::load_checkpoint;
use idr_core::noise::{load_noise_spec, RngStream};
use idr_core::pilot::{procedural_corpus, run_finding1, run_finding2};
use idr_core::scheduler::{evaluate, run, EvalData, RunContext};
use idr_core::{IdrError, Result};

#[derive(Parser, Debug)]
#[command(name = "idr", version, about = "Self-supervised denoising by iterative data refinement")]
struct Cli {
    /// Overrides the run seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for inference (1 keeps runs reproducible).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Validate inputs and print the plan without doing the work.
    #[arg(long, global = true)]
    dry_run: bool,

    /// Default data root when a config does not set `[data] root`.
    #[arg(long, global = true, env = "IDR_DATA_DIR")]
    data_dir: Option<PathBuf>,

    /// Suppress progress output on stderr
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a denoiser (baseline, full or fast IDR) from a config file.
    Train {
        /// Experiment config (TOML)
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on paired noisy/clean test images.
    Eval {
        /// Model checkpoint to evaluate
        #[arg(long)]
        checkpoint: PathBuf,
        /// Noisy test images (default: <data>/test/noisy).
        #[arg(long)]
        noisy: Option<PathBuf>,
        /// Clean references with the same file names (default: <data>/test/clean).
        #[arg(long)]
        clean: Option<PathBuf>,
        /// Emit one CSV row per image instead of a single mean row.
        #[arg(long)]
        per_image: bool,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replace a target set with a model's predictions on the observations.
    Refine {
        /// Model checkpoint that produces the targets
        #[arg(long)]
        checkpoint: PathBuf,
        /// Original noisy observations.
        #[arg(long)]
        noisy: PathBuf,
        /// Existing target store; the observations themselves when omitted.
        #[arg(long)]
        targets: Option<PathBuf>,
        /// Directory for the refined target store.
        #[arg(long)]
        out: PathBuf,
    },
    /// Add synthetic noise to one image and report residual statistics.
    NoiseSim {
        /// Noise spec file (TOML)
        #[arg(long)]
        spec: PathBuf,
        /// Clean input image
        #[arg(long)]
        input: PathBuf,
        /// Where to write the noisy image
        #[arg(long)]
        out: PathBuf,
        /// Noise level; sampled from the spec's range when omitted.
        #[arg(long)]
        level: Option<f64>,
        /// Statistics JSON path (default: the output path with `.json`).
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Bit depth of the written image (8 or 16)
        #[arg(long, default_value_t = 16)]
        bit_depth: u8,
    },
    /// Run the desk-scale data-bias study.
    Pilot {
        study: Study,
        /// Experiment config (TOML); the `[pilot]` section sets the study
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: the config's run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Study {
    Finding1,
    Finding2,
}

fn exit_code(err: &IdrError) -> u8 {
    match err {
        IdrError::Config(_) | IdrError::Parameter(_) => 2,
        IdrError::Data { .. } | IdrError::Io { .. } | IdrError::Image { .. } | IdrError::Format(_) => 3,
        IdrError::Numeric(_) => 4,
        IdrError::Shape(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train { config } => cmd_train(cli, config),
        Command::Eval {
            checkpoint,
            noisy,
            clean,
            per_image,
            out,
        } => {
            let root = cli.data_dir.clone().unwrap_or_else(|| PathBuf::from("data"));
            let noisy = noisy.clone().unwrap_or_else(|| root.join("test/noisy"));
            let clean = clean.clone().unwrap_or_else(|| root.join("test/clean"));
            cmd_eval(cli, checkpoint, &noisy, &clean, *per_image, out.as_deref())
        }
        Command::Refine {
            checkpoint,
            noisy,
            targets,
            out,
        } => cmd_refine(cli, checkpoint, noisy, targets.as_deref(), out),
        Command::NoiseSim {
            spec,
            input,
            out,
            level,
            stats,
            bit_depth,
        } => cmd_noise_sim(cli, spec, input, out, *level, stats.as_deref(), *bit_depth),
        Command::Pilot { study, config, out } => cmd_pilot(cli, *study, config, out.as_deref()),
    }
}

fn load_config(cli: &Cli, path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.run.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn inference_opts(cli: &Cli) -> InferenceOptions {
    InferenceOptions {
        workers: cli.workers.unwrap_or(1),
        ..InferenceOptions::default()
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| IdrError::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| IdrError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_train(cli: &Cli, config: &Path) -> Result<()> {
    let cfg = load_config(cli, config)?;
    let spec = cfg.noise_spec()?;
    let idr = cfg.idr_config();
    let root = cfg.data_root(cli.data_dir.as_deref());
    let run_dir = cfg.run_dir();
    if cli.dry_run {
        print!("{}", cfg.resolved_toml());
        println!();
        print!("{}", idr.describe());
        println!("data: {}", root.display());
        println!("run directory: {}", run_dir.display());
        return Ok(());
    }

    let train = NoisySet::load_dir(root.join(&cfg.data.train))?;
    let test_noisy = root.join(&cfg.data.test_noisy);
    let test_clean = root.join(&cfg.data.test_clean);
    let test = if test_noisy.is_dir() && test_clean.is_dir() {
        let noisy = NoisySet::load_dir(&test_noisy)?;
        let clean = paired_clean(&noisy, &test_clean)?;
        Some((noisy, clean))
    } else {
        if !cli.quiet {
            eprintln!("no test pairs under {}; training without evaluation", root.display());
        }
        None
    };

    write_text(&run_dir.join("config.resolved.toml"), &cfg.resolved_toml())?;
    let ctx = RunContext {
        out_dir: Some(&run_dir),
        eval: test.as_ref().map(|(noisy, clean)| EvalData { noisy, clean }),
        eval_every_epoch: cfg.run.eval_every_epoch,
        timing_in_metrics: cfg.run.timing_in_metrics,
        verbose: !cli.quiet,
    };
    let outcome = run(&train, &spec, &idr, &ctx)?;
    outcome.targets.save(run_dir.join("targets"))?;
    let r = &outcome.record;
    println!(
        "{} run finished in {:.1}s (refinement overhead {:.2}%)",
        r.mode.as_str(),
        r.total_seconds,
        100.0 * r.refinement_overhead_fraction
    );
    if let (Some(p), Some(s)) = (r.final_test_psnr, r.final_test_ssim) {
        println!("test psnr {p:.4} ssim {s:.4}");
    }
    println!("outputs in {}", run_dir.display());
    Ok(())
}

/// Pairs clean references with the noisy images by file name.
fn paired_clean(noisy: &NoisySet, clean_dir: &Path) -> Result<CleanSet> {
    let clean = CleanSet::load_dir(clean_dir)?;
    let mut picked = Vec::with_capacity(noisy.len());
    for name in noisy.names() {
        let idx = clean
            .names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| IdrError::Data {
                path: clean_dir.join(name),
                msg: "no clean reference for this noisy image".into(),
            })?;
        picked.push(idx);
    }
    Ok(clean.subset(&picked))
}

fn cmd_eval(cli: &Cli, checkpoint: &Path, noisy_dir: &Path, clean_dir: &Path, per_image: bool, out: Option<&Path>) -> Result<()> {
    let noisy = NoisySet::load_dir(noisy_dir)?;
    let clean = paired_clean(&noisy, clean_dir)?;
    let model = load_checkpoint(checkpoint)?;
    if cli.dry_run {
        println!(
            "would evaluate {} ({} parameters) on {} pairs",
            checkpoint.display(),
            model.num_weights(),
            noisy.len()
        );
        return Ok(());
    }
    let report = evaluate(&model, &noisy, &clean, &inference_opts(cli))?;
    let csv = if per_image {
        report.to_csv()
    } else {
        format!(
            "file,psnr,ssim\nmean,{},{}\n",
            idr_core::metrics::fmt_metric(report.mean_psnr),
            idr_core::metrics::fmt_metric(report.mean_ssim)
        )
    };
    match out {
        Some(path) => {
            write_text(path, &csv)?;
            if !cli.quiet {
                eprintln!(
                    "mean psnr {} ssim {} over {} images",
                    idr_core::metrics::fmt_metric(report.mean_psnr),
                    idr_core::metrics::fmt_metric(report.mean_ssim),
                    report.images.len()
                );
            }
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_refine(cli: &Cli, checkpoint: &Path, noisy_dir: &Path, targets: Option<&Path>, out: &Path) -> Result<()> {
    let noisy = NoisySet::load_dir(noisy_dir)?;
    let store = match targets {
        Some(dir) => TargetStore::load(dir)?,
        None => TargetStore::initial(&noisy),
    };
    let model = load_checkpoint(checkpoint)?;
    if cli.dry_run {
        println!(
            "would refine {} targets (round {} -> {}) into {}",
            store.len(),
            store.round(),
            store.round() + 1,
            out.display()
        );
        return Ok(());
    }
    let refined = refine_targets(&model, &noisy, &store, &inference_opts(cli))?;
    refined.save(out)?;
    if !cli.quiet {
        eprintln!("wrote round {} targets to {}", refined.round(), out.display());
    }
    Ok(())
}

fn cmd_noise_sim(
    cli: &Cli,
    spec_path: &Path,
    input: &Path,
    out: &Path,
    level: Option<f64>,
    stats: Option<&Path>,
    bit_depth: u8,
) -> Result<()> {
    let spec = load_noise_spec(spec_path)?;
    let clean = load_image(input)?;
    let seed = cli.seed.unwrap_or(0);
    let mut rng = RngStream::new(seed, idr_core::scheduler::NOISE_STREAM);
    let level = match level {
        Some(l) => l,
        None => spec.sample_level(&mut rng),
    };
    if cli.dry_run {
        println!("{} noise at level {level} on {}", spec.variant_name(), input.display());
        return Ok(());
    }
    let noisy = spec.apply(&clean, level, &mut rng)?;
    save_image(&noisy, out, bit_depth)?;

    let n = clean.len() as f64;
    let residual: Vec<f64> = noisy
        .data()
        .iter()
        .zip(clean.data())
        .map(|(&a, &b)| a as f64 - b as f64)
        .collect();
    let mean = residual.iter().sum::<f64>() / n;
    let variance = residual.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let report = json!({
        "variant": spec.variant_name(),
        "level": level,
        "seed": seed,
        "pixels": clean.len(),
        "residual_mean": mean,
        "residual_variance": variance,
        "residual_std": variance.sqrt(),
        "input": input.display().to_string(),
        "output": out.display().to_string(),
    });
    let stats_path = stats.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("json"));
    write_text(&stats_path, &serde_json::to_string_pretty(&report).expect("stats serialize"))?;
    if !cli.quiet {
        eprintln!("residual mean {mean:.6} variance {variance:.6e}");
    }
    Ok(())
}

fn cmd_pilot(cli: &Cli, study: Study, config: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(cli, config)?;
    let spec = cfg.noise_spec()?;
    let pilot = cfg.pilot_config();
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.run_dir());
    let corpus = match &cfg.pilot.clean_dir {
        Some(dir) => CleanSet::load_dir(cfg.data_root(cli.data_dir.as_deref()).join(dir))?,
        None => procedural_corpus(cfg.pilot.corpus_images, cfg.pilot.corpus_size, cfg.pilot.corpus_seed),
    };
    if cli.dry_run {
        println!("study: {study:?} on {} clean images", corpus.len());
        println!("seeds: {:?}, test levels: {:?}", pilot.seeds, spec.test_levels(pilot.test_levels));
        if let Study::Finding2 = study {
            println!("bias: {:?}, sigmas: {:?}", cfg.pilot.bias, cfg.pilot.bias_sigmas);
        }
        print!("{}", pilot.schedule.describe());
        return Ok(());
    }
    write_text(&out_dir.join("config.resolved.toml"), &cfg.resolved_toml())?;
    let verbose = !cli.quiet;
    match study {
        Study::Finding1 => {
            let report = run_finding1(&corpus, &spec, &pilot, verbose)?;
            write_text(&out_dir.join("pilot_finding1.csv"), &report.to_csv())?;
            for cond in [
                idr_core::pilot::NOISY_INPUT,
                idr_core::pilot::NOISIER_NOISY,
                idr_core::pilot::NOISY_CLEAN,
            ] {
                println!("{cond}: {:?}", report.median_curve(cond));
            }
        }
        Study::Finding2 => {
            let report = run_finding2(&corpus, &spec, cfg.pilot.bias, &cfg.pilot.bias_sigmas, &pilot, verbose)?;
            write_text(&out_dir.join("pilot_finding2.csv"), &report.to_csv())?;
            println!("median psnr per sigma {:?}: {:?}", report.sigmas, report.median_psnr());
            println!("drops: {:?}", report.median_drops());
        }
    }
    println!("outputs in {}", out_dir.display());
    Ok(())
}
