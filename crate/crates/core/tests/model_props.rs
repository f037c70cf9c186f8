use proptest::prelude::*;

use idr_core::model::{build_unet, load_checkpoint, save_checkpoint, train_step, DenoiserModel, ModelConfig, TrainingState};
use idr_core::noise::RngStream;
use idr_core::tensor::{AdamConfig, Tensor};

fn random_input(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = RngStream::new(seed, 0);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform() as f32).collect()).unwrap()
}

fn config(levels: usize, base: usize, in_channels: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        levels,
        base_channels: base,
        in_channels,
        seed,
        ..ModelConfig::default()
    }
}

/// Shifts an `(1, C, H, W)` tensor down/right by `(dy, dx)`, zero-filling.
fn shift(t: &Tensor<f32>, dy: usize, dx: usize) -> Tensor<f32> {
    let (_, c, h, w) = t.dims4().unwrap();
    let mut out = Tensor::zeros(t.shape());
    for ch in 0..c {
        for y in dy..h {
            for x in dx..w {
                out.data_mut()[(ch * h + y) * w + x] = t.data()[(ch * h + y - dy) * w + x - dx];
            }
        }
    }
    out
}

#[test]
fn aligned_translation_shifts_the_output_interior() {
    let cfg = config(3, 8, 1, 4);
    let model = build_unet(&cfg).unwrap();
    let stride = cfg.alignment();
    assert_eq!(stride, 4);
    let n = 128;
    let x = random_input(&[1, 1, n, n], 1);
    let shifted = shift(&x, stride, 2 * stride);
    let y = model.forward(&x).unwrap();
    let ys = model.forward(&shifted).unwrap();
    // Stay a full receptive field away from the borders, where zero padding differs.
    let band = 40;
    let mut worst = 0.0f32;
    for yy in band + stride..n - band {
        for xx in band + 2 * stride..n - band {
            let a = ys.data()[yy * n + xx];
            let b = y.data()[(yy - stride) * n + xx - 2 * stride];
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-5, "interior mismatch {worst}");
}

#[test]
fn forward_is_deterministic_and_shape_preserving() {
    for (levels, in_channels) in [(1, 1), (2, 3), (3, 4)] {
        let model = build_unet(&config(levels, 4, in_channels, 9)).unwrap();
        let x = random_input(&[2, in_channels, 16, 24], 3);
        let a = model.forward(&x).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert!(a.is_finite());
        assert_eq!(a, model.forward(&x).unwrap());
    }
}

#[test]
fn default_architecture_shape() {
    let model = build_unet(&config(3, 16, 1, 0)).unwrap();
    let out = model.forward(&random_input(&[1, 1, 48, 48], 0)).unwrap();
    assert_eq!(out.shape(), &[1, 1, 48, 48]);
}

#[test]
fn zero_learning_rate_step_is_pure() {
    let cfg = config(2, 4, 1, 5);
    let mut model = build_unet(&cfg).unwrap();
    let before = model.clone();
    let mut state = TrainingState::new(
        &model,
        AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        },
    );
    let x = random_input(&[2, 1, 16, 16], 6);
    let t = random_input(&[2, 1, 16, 16], 7);
    let l1 = train_step(&mut model, &mut state, &x, &t).unwrap();
    let l2 = train_step(&mut model, &mut state, &x, &t).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(model.params(), before.params());
    assert_eq!(state.iteration, 2);
    assert_eq!(state.adam.step_count(), 2);
}

#[test]
fn pass_through_is_near_identity_and_learning_keeps_loss_small() {
    let cfg = config(2, 4, 1, 0);
    let mut model = DenoiserModel::pass_through(&cfg).unwrap();
    let x = random_input(&[2, 1, 16, 16], 8);
    let mut state = TrainingState::new(&model, AdamConfig { lr: 1e-4, ..AdamConfig::default() });
    let first = train_step(&mut model, &mut state, &x, &x).unwrap();
    assert!(first < 1e-6, "{first}");
    let mut last = first;
    for _ in 0..5 {
        last = train_step(&mut model, &mut state, &x, &x).unwrap();
    }
    assert!(last < 1e-2, "{last}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoint_round_trip(levels in 1usize..4, base in 2usize..7, ch in prop::sample::select(vec![1usize, 3, 4]), seed in 0u64..1000) {
        let cfg = config(levels, base, ch, seed);
        let model = build_unet(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        prop_assert_eq!(back.params(), model.params());
        prop_assert_eq!(back.config(), model.config());
        prop_assert_eq!(back.fingerprint(), model.fingerprint());
        let x = random_input(&[1, ch, 16, 16], seed);
        prop_assert_eq!(back.forward(&x).unwrap(), model.forward(&x).unwrap());
        // a second save is byte-identical
        let again = dir.path().join("again.ckpt");
        save_checkpoint(&back, &again).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn same_seed_same_weights(seed in 0u64..10_000) {
        let a = build_unet(&config(3, 4, 1, seed)).unwrap();
        let b = build_unet(&config(3, 4, 1, seed)).unwrap();
        prop_assert_eq!(a.params(), b.params());
        let c = build_unet(&config(3, 4, 1, seed + 1)).unwrap();
        prop_assert_ne!(a.params(), c.params());
    }
}
