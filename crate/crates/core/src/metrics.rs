//! PSNR and SSIM.
//!
//! Both metrics clamp their inputs to the valid intensity range first and
//! accumulate in `f64`. PSNR of identical images is `f64::INFINITY`, which
//! the CSV writer prints as `inf`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{IdrError, Result};
use crate::image::ImageBuffer;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_pair(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if !a.same_shape(b) {
        return Err(IdrError::shape(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    if a.is_empty() {
        return Err(IdrError::shape("metric inputs are empty"));
    }
    Ok(())
}

/// Mean squared error after clamping both images to `[0, peak]`.
pub fn mse(a: &ImageBuffer, b: &ImageBuffer, peak: f64) -> Result<f64> {
    check_pair(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x as f64).clamp(0.0, peak) - (y as f64).clamp(0.0, peak);
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// `10·log10(peak² / MSE)` in dB; `INFINITY` when the clamped images agree.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, peak: f64) -> Result<f64> {
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(IdrError::param(format!("peak must be positive, got {peak}")));
    }
    let m = mse(a, b, peak)?;
    Ok(psnr_from_mse(m, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn ssim_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-mode separable filtering of a `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&src[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained 11×11 Gaussian windows, averaged
/// over channels. Inputs are clamped to `[0, 1]`.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w, c) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(IdrError::shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps = ssim_window();
    let mut total = 0.0;
    for ch in 0..c {
        let plane = |img: &ImageBuffer| -> Vec<f64> {
            img.data()
                .iter()
                .skip(ch)
                .step_by(c)
                .map(|&v| (v as f64).clamp(0.0, 1.0))
                .collect()
        };
        let pa = plane(a);
        let pb = plane(b);
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, h, w, &taps);
        let mu_b = filter_valid(&pb, h, w, &taps);
        let e_aa = filter_valid(&sq(&pa, &pa), h, w, &taps);
        let e_bb = filter_valid(&sq(&pb, &pb), h, w, &taps);
        let e_ab = filter_valid(&sq(&pa, &pb), h, w, &taps);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2);
            sum += num / den;
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub file: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image PSNR/SSIM with their means.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    /// Scores `outputs[i]` against `references[i]` with peak 1.
    pub fn compute(names: &[String], outputs: &[ImageBuffer], references: &[ImageBuffer]) -> Result<MetricReport> {
        if outputs.len() != references.len() || names.len() != outputs.len() {
            return Err(IdrError::shape(format!(
                "{} names, {} outputs and {} references",
                names.len(),
                outputs.len(),
                references.len()
            )));
        }
        let images = names
            .iter()
            .zip(outputs.iter().zip(references))
            .map(|(name, (o, r))| {
                Ok(ImageMetrics {
                    file: name.clone(),
                    psnr: psnr(o, r, 1.0)?,
                    ssim: ssim(o, r)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MetricReport::from_images(images))
    }

    /// Means are summed in sorted order, so they do not depend on the
    /// order of `images`.
    pub fn from_images(images: Vec<ImageMetrics>) -> MetricReport {
        let n = images.len().max(1) as f64;
        let sorted_sum = |f: fn(&ImageMetrics) -> f64| {
            let mut v: Vec<f64> = images.iter().map(f).collect();
            v.sort_by(f64::total_cmp);
            v.iter().sum::<f64>()
        };
        let mean_psnr = sorted_sum(|m| m.psnr) / n;
        let mean_ssim = sorted_sum(|m| m.ssim) / n;
        MetricReport {
            images,
            mean_psnr,
            mean_ssim,
        }
    }

    /// CSV with columns `file,psnr,ssim`, one row per image.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("file,psnr,ssim\n");
        for m in &self.images {
            let _ = writeln!(out, "{},{},{}", m.file, fmt_metric(m.psnr), fmt_metric(m.ssim));
        }
        out
    }
}

/// Fixed six-decimal formatting; infinite PSNR prints as `inf`.
pub fn fmt_metric(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{apply_gaussian, RngStream};

    fn img(h: usize, w: usize, data: Vec<f32>) -> ImageBuffer {
        ImageBuffer::new(h, w, 1, data).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = img(2, 2, vec![0.2, 0.4, 0.6, 0.8]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let z = img(2, 2, vec![0.0; 4]);
        let o = img(2, 2, vec![1.0; 4]);
        assert!(psnr(&z, &o, 1.0).unwrap().abs() < 1e-12);
        let b = img(2, 2, vec![0.2, 0.4, 0.6, 0.3]);
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p - 10.0 * 16f64.log10()).abs() < 1e-6, "{p}");
    }

    #[test]
    fn psnr_clamps_and_rejects_bad_input() {
        let a = img(1, 2, vec![1.5, -0.5]);
        let b = img(1, 2, vec![1.0, 0.0]);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &img(2, 1, vec![0.0; 2]), 1.0).is_err());
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    #[test]
    fn window_is_normalized_and_symmetric() {
        let w = ssim_window();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(w[i], w[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn ssim_identity_and_constants() {
        let mut rng = RngStream::new(3, 0);
        let base = ImageBuffer::filled(32, 32, 1, 0.5);
        let a = apply_gaussian(&base, 0.1, &mut rng).clamped();
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let c = ImageBuffer::filled(16, 16, 1, 0.5);
        assert_eq!(ssim(&c, &c).unwrap(), 1.0);
        let small = ImageBuffer::filled(10, 40, 1, 0.5);
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn csv_format() {
        let r = MetricReport::from_images(vec![
            ImageMetrics { file: "a.png".into(), psnr: f64::INFINITY, ssim: 1.0 },
            ImageMetrics { file: "b.png".into(), psnr: 30.25, ssim: 0.5 },
        ]);
        assert_eq!(
            r.to_csv(),
            "file,psnr,ssim\na.png,inf,1.000000\nb.png,30.250000,0.500000\n"
        );
        assert_eq!(r.mean_psnr, f64::INFINITY);
        assert_eq!(r.mean_ssim, 0.75);
    }
}
