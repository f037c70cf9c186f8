use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use idr_core::image::{load_image, save_image, ImageBuffer};
use idr_core::model::{save_checkpoint, DenoiserModel, ModelConfig};

fn idr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idr"))
        .args(args)
        .env_remove("IDR_DATA_DIR")
        .output()
        .expect("idr binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ramp(h: usize, w: usize, phase: f32) -> ImageBuffer {
    let data = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f32, (i % w) as f32);
            0.5 + 0.3 * ((x * 0.3 + phase).sin() * (y * 0.2).cos())
        })
        .collect();
    ImageBuffer::new(h, w, 1, data).unwrap()
}

fn write_images(dir: &Path, count: usize, phase: f32) {
    fs::create_dir_all(dir).unwrap();
    for i in 0..count {
        save_image(&ramp(32, 32, phase + i as f32), dir.join(format!("img{i}.png")), 16).unwrap();
    }
}

fn write(path: &Path, text: &str) -> PathBuf {
    fs::write(path, text).unwrap();
    path.to_path_buf()
}

const TINY: &str = r#"
[run]
name = "tiny"
seed = 7

[noise]
variant = "gaussian"
sigma_range = [5.0, 25.0]

[model]
levels = 2
base_channels = 4

[schedule]
mode = "fast"
epochs = 2
iterations_per_epoch = 3
batch_size = 2
patch_size = 16
"#;

fn tiny_workspace() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_images(&data.join("train/noisy"), 3, 0.0);
    write_images(&data.join("test/noisy"), 2, 0.1);
    write_images(&data.join("test/clean"), 2, 0.0);
    let cfg = write(&tmp.path().join("tiny.toml"), &format!("{TINY}\n[data]\nroot = \"data\"\n"));
    (tmp, cfg)
}

#[test]
fn dry_run_prints_resolved_schedule() {
    let (_tmp, cfg) = tiny_workspace();
    let out = idr(&["--dry-run", "train", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("mode: fast"), "{text}");
    assert!(text.contains("[schedule.lr]"), "{text}");
    assert!(text.contains("seed = 7"), "{text}");
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write(&tmp.path().join("bad.toml"), &format!("{TINY}\n[run2]\nx = 1\n"));
    let out = idr(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let missing = tmp.path().join("nope.toml");
    assert_eq!(idr(&["train", "--config", missing.to_str().unwrap()]).status.code(), Some(2));
    let invalid = write(&tmp.path().join("inv.toml"), &TINY.replace("patch_size = 16", "patch_size = 17"));
    assert_eq!(idr(&["train", "--config", invalid.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn missing_data_exits_3_with_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(&tmp.path().join("c.toml"), &format!("{TINY}\n[data]\nroot = \"absent\"\n"));
    let out = idr(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("absent"), "{}", stderr(&out));
}

#[test]
fn data_root_from_environment() {
    let (tmp, _) = tiny_workspace();
    let cfg = write(&tmp.path().join("env.toml"), TINY);
    let out = Command::new(env!("CARGO_BIN_EXE_idr"))
        .args(["--dry-run", "train", "--config", cfg.to_str().unwrap()])
        .env("IDR_DATA_DIR", tmp.path().join("data"))
        .output()
        .unwrap();
    assert!(stdout(&out).contains(&format!("data: {}", tmp.path().join("data").display())));
}

#[test]
fn train_writes_run_directory_then_eval_and_refine() {
    let (tmp, cfg) = tiny_workspace();
    let out = idr(&["-q", "train", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let run = tmp.path().join("runs/tiny");
    for f in [
        "config.resolved.toml",
        "metrics.csv",
        "run.json",
        "checkpoints/epoch_000.ckpt",
        "checkpoints/epoch_001.ckpt",
        "checkpoints/final.ckpt",
        "targets/manifest.json",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["seed"], 7);
    assert!(record["refinement_overhead_fraction"].as_f64().unwrap() >= 0.0);
    assert_eq!(record["streams"]["init"], 1);

    let ckpt = run.join("checkpoints/final.ckpt");
    let data = tmp.path().join("data");
    let eval = |csv: &Path| {
        let o = idr(&[
            "-q",
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--noisy",
            data.join("test/noisy").to_str().unwrap(),
            "--clean",
            data.join("test/clean").to_str().unwrap(),
            "--per-image",
            "--out",
            csv.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read_to_string(csv).unwrap()
    };
    let a = eval(&tmp.path().join("a.csv"));
    let b = eval(&tmp.path().join("b.csv"));
    assert_eq!(a, b);
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], "file,psnr,ssim");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("img0.png,"));

    let refined = tmp.path().join("refined");
    let o = idr(&[
        "refine",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--noisy",
        data.join("train/noisy").to_str().unwrap(),
        "--out",
        refined.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(refined.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["round"], 1);
}

#[test]
fn eval_of_identity_pairs_reports_inf() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("same");
    write_images(&dir, 2, 0.0);
    let ckpt = tmp.path().join("id.ckpt");
    let cfg = ModelConfig {
        levels: 2,
        base_channels: 4,
        // with a zero slope every operation of the pass-through is exact
        leaky_slope: 0.0,
        ..ModelConfig::default()
    };
    save_checkpoint(&DenoiserModel::pass_through(&cfg).unwrap(), &ckpt).unwrap();
    let o = idr(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--noisy",
        dir.to_str().unwrap(),
        "--clean",
        dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "file,psnr,ssim\nmean,inf,1.000000\n");
}

#[test]
fn eval_of_unpaired_sets_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    write_images(&tmp.path().join("n"), 2, 0.0);
    write_images(&tmp.path().join("c"), 1, 0.0);
    let ckpt = tmp.path().join("id.ckpt");
    save_checkpoint(&DenoiserModel::pass_through(&ModelConfig::default()).unwrap(), &ckpt).unwrap();
    let o = idr(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--noisy",
        tmp.path().join("n").to_str().unwrap(),
        "--clean",
        tmp.path().join("c").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("img1.png"));
}

fn noise_sim(tmp: &Path, spec: &str, name: &str) -> serde_json::Value {
    let input = tmp.join("flat.png");
    if !input.exists() {
        save_image(&ImageBuffer::filled(96, 96, 1, 0.5), &input, 16).unwrap();
    }
    let spec_path = write(&tmp.join(format!("{name}.toml")), spec);
    let out = tmp.join(format!("{name}.png"));
    let o = idr(&[
        "--seed",
        "11",
        "noise-sim",
        "--spec",
        spec_path.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    serde_json::from_str(&fs::read_to_string(out.with_extension("json")).unwrap()).unwrap()
}

#[test]
fn noise_sim_zero_sigma_is_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let stats = noise_sim(tmp.path(), "variant = \"gaussian\"\nsigma = 0.0\n", "zero");
    assert_eq!(stats["residual_mean"], 0.0);
    assert_eq!(stats["residual_variance"], 0.0);
    let a = load_image(tmp.path().join("flat.png")).unwrap();
    let b = load_image(tmp.path().join("zero.png")).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn noise_sim_moments_and_delta_kernel() {
    let tmp = tempfile::tempdir().unwrap();
    let g = noise_sim(tmp.path(), "variant = \"gaussian\"\nsigma = 20.0\n", "g");
    let c = noise_sim(
        tmp.path(),
        "variant = \"correlated\"\nsigma = 20.0\nkernel = \"delta\"\n",
        "c",
    );
    let expected = (20.0f64 / 255.0).powi(2);
    for s in [&g, &c] {
        let var = s["residual_variance"].as_f64().unwrap();
        let mean = s["residual_mean"].as_f64().unwrap();
        assert!((var / expected - 1.0).abs() < 0.08, "variance {var} vs {expected}");
        // 4σ bound on the sample mean of 9216 draws.
        assert!(mean.abs() < 4.0 * expected.sqrt() / 96.0, "mean {mean}");
    }
    let (vg, vc) = (g["residual_variance"].as_f64().unwrap(), c["residual_variance"].as_f64().unwrap());
    assert!((vg / vc - 1.0).abs() < 0.1);
}

#[test]
fn bad_noise_spec_is_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write(&tmp.path().join("s.toml"), "variant = \"gaussian\"\nsigmaa = 2.0\n");
    save_image(&ImageBuffer::filled(8, 8, 1, 0.5), tmp.path().join("i.png"), 8).unwrap();
    let o = idr(&[
        "noise-sim",
        "--spec",
        spec.to_str().unwrap(),
        "--input",
        tmp.path().join("i.png").to_str().unwrap(),
        "--out",
        tmp.path().join("o.png").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn pilot_dry_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        &tmp.path().join("p.toml"),
        "[noise]\nvariant = \"gaussian\"\nsigma_range = [5.0, 20.0]\n[pilot]\ncorpus_images = 10\ncorpus_size = 32\n",
    );
    let o = idr(&["--dry-run", "pilot", "finding2", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("10 clean images"), "{text}");
    assert!(text.contains("[5.0, 10.0, 15.0, 20.0]"), "{text}");
}

#[test]
fn pilot_finding1_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        &tmp.path().join("p.toml"),
        "[noise]\nvariant = \"gaussian\"\nsigma_range = [5.0, 20.0]\n\
         [model]\nlevels = 2\nbase_channels = 4\n\
         [schedule]\nepochs = 1\niterations_per_epoch = 2\nbatch_size = 2\npatch_size = 16\n\
         [pilot]\ncorpus_images = 6\ncorpus_size = 32\nseeds = [0]\ntest_levels = 2\n",
    );
    let out = tmp.path().join("out");
    let o = idr(&["-q", "pilot", "finding1", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("pilot_finding1.csv")).unwrap();
    assert!(csv.starts_with("level,condition,psnr,seed\n"));
    // 2 levels x 3 conditions x 1 seed
    assert_eq!(csv.lines().count(), 1 + 6);
}

#[test]
fn shipped_configs_resolve() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let p = path.to_str().unwrap();
        let o = if path.file_stem().unwrap() == "pilot" {
            idr(&["--dry-run", "pilot", "finding1", "--config", p])
        } else {
            idr(&["--dry-run", "train", "--config", p])
        };
        assert!(o.status.success(), "{p}: {}", stderr(&o));
        seen += 1;
    }
    assert!(seen >= 4);
}
