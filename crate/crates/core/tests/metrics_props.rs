use proptest::prelude::*;

use idr_core::image::ImageBuffer;
use idr_core::metrics::{psnr, ssim, ImageMetrics, MetricReport};
use idr_core::noise::{apply_gaussian, RngStream};

fn random_image(h: usize, w: usize, seed: u64) -> ImageBuffer {
    let mut rng = RngStream::new(seed, 0);
    ImageBuffer::new(h, w, 1, (0..h * w).map(|_| rng.uniform() as f32).collect()).unwrap()
}

/// Smooth test card: low-frequency sinusoids in [0.1, 0.9].
fn smooth(n: usize) -> ImageBuffer {
    let data = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f32, (i % n) as f32);
            0.5 + 0.2 * (x / 9.0).sin() + 0.2 * (y / 13.0).cos()
        })
        .collect();
    ImageBuffer::new(n, n, 1, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn psnr_is_symmetric_and_shift_invariant(s1 in 0u64..1000, s2 in 0u64..1000, c in -0.25f32..0.25) {
        // Scores clamp to [0, 1], so keep every shifted value inside it.
        let squeeze = |img: ImageBuffer| {
            let mut out = img;
            out.data_mut().iter_mut().for_each(|v| *v = 0.3 + 0.4 * *v);
            out
        };
        let a = squeeze(random_image(16, 16, s1));
        let b = squeeze(random_image(16, 16, s2 + 1000));
        let p = psnr(&a, &b, 1.0).unwrap();
        prop_assert_eq!(p, psnr(&b, &a, 1.0).unwrap());
        let shift = |img: &ImageBuffer| {
            let mut out = img.clone();
            out.data_mut().iter_mut().for_each(|v| *v += c);
            out
        };
        let q = psnr(&shift(&a), &shift(&b), 1.0).unwrap();
        prop_assert!((p - q).abs() < 1e-3, "{} vs {}", p, q);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(s1 in 0u64..1000, s2 in 0u64..1000) {
        let a = random_image(24, 24, s1);
        let b = random_image(24, 24, s2 + 1000);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn report_means_ignore_order(values in prop::collection::vec((10.0f64..50.0, 0.0f64..1.0), 1..12), rot in 0usize..12) {
        let images: Vec<ImageMetrics> = values
            .iter()
            .enumerate()
            .map(|(i, &(psnr, ssim))| ImageMetrics { file: format!("{i}.png"), psnr, ssim })
            .collect();
        let mut moved = images.clone();
        moved.rotate_left(rot % images.len());
        moved.reverse();
        let a = MetricReport::from_images(images);
        let b = MetricReport::from_images(moved);
        prop_assert_eq!(a.mean_psnr, b.mean_psnr);
        prop_assert_eq!(a.mean_ssim, b.mean_ssim);
    }
}

#[test]
fn psnr_falls_as_noise_grows() {
    let clean = smooth(96);
    let scores: Vec<f64> = [5.0, 10.0, 25.0]
        .iter()
        .map(|&s| {
            let noisy = apply_gaussian(&clean, s / 255.0, &mut RngStream::new(1, 3));
            psnr(&noisy, &clean, 1.0).unwrap()
        })
        .collect();
    assert!(scores.windows(2).all(|w| w[0] > w[1]), "{scores:?}");
}

#[test]
fn ssim_of_unrelated_noise_is_near_zero() {
    let a = random_image(128, 128, 1);
    let b = random_image(128, 128, 2);
    let s = ssim(&a, &b).unwrap();
    assert!(s.abs() < 0.1, "{s}");
}

#[test]
fn report_rejects_mismatched_lengths() {
    let a = random_image(16, 16, 0);
    assert!(MetricReport::compute(&["a".into()], &[a.clone(), a.clone()], &[a.clone(), a]).is_err());
}
