//! Synthetic noise models and reproducible random streams.
//!
//! Every sampler is a pure function of its image, parameters and
//! [`RngStream`] state, and returns a new buffer. Additive noise is never
//! clipped here; clamping to `[0, 1]` is an explicit export step.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{IdrError, Result};
use crate::image::ImageBuffer;

/// Largest corruption probability a spec may request.
pub const MAX_CORRUPTION_P: f64 = 0.95;

/// A ChaCha8 keystream addressed by `(seed, stream id, word position)`.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl PartialEq for RngStream {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed && self.stream == other.stream && self.counter() == other.counter()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    /// Resumes a stream at a given word position.
    pub fn at(seed: u64, stream: u64, counter: u128) -> Self {
        let mut s = Self::new(seed, stream);
        s.rng.set_word_pos(counter);
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Independent child stream, e.g. one per image index.
    pub fn substream(&self, index: u64) -> RngStream {
        RngStream::new(self.seed, splitmix64(self.stream ^ splitmix64(index.wrapping_add(1))))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Poisson draw with the given mean; non-positive means give 0.
    pub fn poisson(&mut self, mean: f64) -> f64 {
        match Poisson::new(mean) {
            Ok(d) => self.rng.sample(d),
            Err(_) => 0.0,
        }
    }
}

/// Convolution kernel `g` for spatially correlated noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Kernel {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Kernel> {
        if rows == 0 || cols == 0 || values.is_empty() {
            return Err(IdrError::param("kernel is empty"));
        }
        if values.len() != rows * cols {
            return Err(IdrError::param(format!(
                "kernel {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(IdrError::param("kernel has non-finite entries"));
        }
        Ok(Kernel { rows, cols, values })
    }

    pub fn delta() -> Kernel {
        Kernel {
            rows: 1,
            cols: 1,
            values: vec![1.0],
        }
    }

    /// Parses `rows cols` on the first line followed by row-major values.
    pub fn parse(text: &str) -> Result<Kernel> {
        let mut tokens = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        let mut dim = |what: &str| -> Result<usize> {
            tokens
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| IdrError::format(format!("kernel file: missing {what}")))
        };
        let rows = dim("row count")?;
        let cols = dim("column count")?;
        let values = tokens
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| IdrError::format(format!("kernel file: bad value `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Kernel::new(rows, cols, values)
    }

    pub fn load(path: &Path) -> Result<Kernel> {
        let text = fs::read_to_string(path).map_err(|e| IdrError::io(path, e))?;
        Kernel::parse(&text).map_err(|e| IdrError::data(path, e.to_string()))
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Scaled to unit L2 energy, so unit-variance white noise convolved with
    /// it keeps unit variance.
    pub fn unit_energy(mut self) -> Kernel {
        let e = self.energy().sqrt();
        if e > 0.0 {
            self.values.iter_mut().for_each(|v| *v /= e);
        }
        self
    }

    /// Autocorrelation `(g ⋆ g)(dy, dx)`.
    pub fn autocorrelation(&self, dy: isize, dx: isize) -> f64 {
        let mut acc = 0.0;
        for r in 0..self.rows as isize {
            for c in 0..self.cols as isize {
                let (r2, c2) = (r + dy, c + dx);
                if r2 < 0 || c2 < 0 || r2 >= self.rows as isize || c2 >= self.cols as isize {
                    continue;
                }
                acc += self.values[(r * self.cols as isize + c) as usize]
                    * self.values[(r2 * self.cols as isize + c2) as usize];
            }
        }
        acc
    }

    /// Named default kernels, each scaled to unit energy.
    pub fn named(id: &str) -> Result<Kernel> {
        let k = match id {
            "delta" => Kernel::delta(),
            "gauss3" => {
                let s2 = 2.0 * 0.75f64 * 0.75;
                let mut v = Vec::with_capacity(9);
                for y in -1i32..=1 {
                    for x in -1i32..=1 {
                        v.push((-((y * y + x * x) as f64) / s2).exp());
                    }
                }
                Kernel::new(3, 3, v)?
            }
            "hline5" => Kernel::new(1, 5, vec![1.0; 5])?,
            "vline5" => Kernel::new(5, 1, vec![1.0; 5])?,
            "ring5" => {
                let mut v = vec![0.0; 25];
                for y in 0..5 {
                    for x in 0..5 {
                        if y == 0 || y == 4 || x == 0 || x == 4 {
                            v[y * 5 + x] = 1.0;
                        }
                    }
                }
                Kernel::new(5, 5, v)?
            }
            other => {
                return Err(IdrError::param(format!(
                    "unknown kernel `{other}` (known: {})",
                    KERNEL_IDS.join(", ")
                )))
            }
        };
        Ok(k.unit_energy())
    }
}

pub const KERNEL_IDS: [&str; 5] = ["delta", "gauss3", "hline5", "vline5", "ring5"];

/// Poisson-Gaussian sensor parameters at ISO 100; both scale linearly with
/// ISO.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorProfile {
    /// Signal gain in normalized units per photon-equivalent.
    pub k0: f64,
    /// Read-noise standard deviation in normalized units.
    pub sigma0: f64,
}

impl Default for SensorProfile {
    fn default() -> Self {
        SensorProfile {
            k0: 2.5e-5,
            sigma0: 2.0e-4,
        }
    }
}

impl SensorProfile {
    /// `(k, σ_r)` at the given ISO.
    pub fn at_iso(&self, iso: f64) -> (f64, f64) {
        (self.k0 * iso / 100.0, self.sigma0 * iso / 100.0)
    }

    /// Parses calibration lines `iso k sigma_r` and fits `k0`, `σ0` by least
    /// squares through the origin in `iso / 100`.
    pub fn parse_calibration(text: &str) -> Result<SensorProfile> {
        let (mut ss, mut sk, mut sr) = (0.0, 0.0, 0.0);
        let mut rows = 0;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let v: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| IdrError::format(format!("calibration line {}: not numeric", n + 1)))?;
            let [iso, k, sigma] = v[..] else {
                return Err(IdrError::format(format!(
                    "calibration line {}: expected `iso k sigma_r`",
                    n + 1
                )));
            };
            if iso <= 0.0 || k <= 0.0 || sigma < 0.0 {
                return Err(IdrError::format(format!(
                    "calibration line {}: iso and k must be positive",
                    n + 1
                )));
            }
            let s = iso / 100.0;
            ss += s * s;
            sk += s * k;
            sr += s * sigma;
            rows += 1;
        }
        if rows == 0 {
            return Err(IdrError::format("calibration file has no entries"));
        }
        Ok(SensorProfile {
            k0: sk / ss,
            sigma0: sr / ss,
        })
    }

    pub fn load_calibration(path: &Path) -> Result<SensorProfile> {
        let text = fs::read_to_string(path).map_err(|e| IdrError::io(path, e))?;
        Self::parse_calibration(&text).map_err(|e| IdrError::data(path, e.to_string()))
    }
}

/// A noise model with the level range it is sampled over. `sigma` values
/// are in 1/255 units.
#[derive(Clone, Debug, PartialEq)]
pub enum NoiseSpec {
    Gaussian {
        sigma_range: [f64; 2],
    },
    PoissonGaussian {
        iso_range: [f64; 2],
        profile: SensorProfile,
    },
    Binomial {
        p_range: [f64; 2],
    },
    Impulse {
        p_range: [f64; 2],
    },
    Correlated {
        sigma_range: [f64; 2],
        kernel: Kernel,
    },
}

impl NoiseSpec {
    pub fn gaussian(lo: f64, hi: f64) -> NoiseSpec {
        NoiseSpec::Gaussian {
            sigma_range: [lo, hi],
        }
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            NoiseSpec::Gaussian { .. } => "gaussian",
            NoiseSpec::PoissonGaussian { .. } => "poisson_gaussian",
            NoiseSpec::Binomial { .. } => "binomial",
            NoiseSpec::Impulse { .. } => "impulse",
            NoiseSpec::Correlated { .. } => "correlated",
        }
    }

    pub fn range(&self) -> [f64; 2] {
        match self {
            NoiseSpec::Gaussian { sigma_range } | NoiseSpec::Correlated { sigma_range, .. } => {
                *sigma_range
            }
            NoiseSpec::PoissonGaussian { iso_range, .. } => *iso_range,
            NoiseSpec::Binomial { p_range } | NoiseSpec::Impulse { p_range } => *p_range,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.range();
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(IdrError::param(format!(
                "{} range [{lo}, {hi}] must be finite and ordered",
                self.variant_name()
            )));
        }
        match self {
            NoiseSpec::Gaussian { .. } | NoiseSpec::Correlated { .. } if lo < 0.0 => {
                Err(IdrError::param("sigma must be non-negative"))
            }
            NoiseSpec::Binomial { .. } | NoiseSpec::Impulse { .. }
                if lo < 0.0 || hi > MAX_CORRUPTION_P =>
            {
                Err(IdrError::param(format!(
                    "corruption probability must lie in [0, {MAX_CORRUPTION_P}]"
                )))
            }
            NoiseSpec::PoissonGaussian { profile, .. } => {
                if lo <= 0.0 {
                    Err(IdrError::param("ISO must be positive"))
                } else if profile.k0 <= 0.0 || profile.sigma0 < 0.0 {
                    Err(IdrError::param("k0 must be positive and sigma0 non-negative"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Uniform draw from the level range; a degenerate range returns its
    /// value without consuming randomness.
    pub fn sample_level(&self, rng: &mut RngStream) -> f64 {
        let [lo, hi] = self.range();
        if lo == hi {
            lo
        } else {
            lo + (hi - lo) * rng.uniform()
        }
    }

    /// `n` evenly spaced levels spanning the range.
    pub fn test_levels(&self, n: usize) -> Vec<f64> {
        let [lo, hi] = self.range();
        match n {
            0 => Vec::new(),
            1 => vec![(lo + hi) / 2.0],
            _ => (0..n)
                .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }

    /// Applies noise at a concrete level.
    pub fn apply(&self, img: &ImageBuffer, level: f64, rng: &mut RngStream) -> Result<ImageBuffer> {
        match self {
            NoiseSpec::Gaussian { .. } => Ok(apply_gaussian(img, level / 255.0, rng)),
            NoiseSpec::PoissonGaussian { profile, .. } => {
                apply_poisson_gaussian(img, level, profile, rng)
            }
            NoiseSpec::Binomial { .. } => Ok(apply_binomial(img, level, rng)),
            NoiseSpec::Impulse { .. } => Ok(apply_impulse(img, level, rng)),
            NoiseSpec::Correlated { kernel, .. } => apply_correlated(img, level / 255.0, kernel, rng),
        }
    }

    /// Samples a level and applies it, returning the noisy image and level.
    pub fn sample_and_apply(&self, img: &ImageBuffer, rng: &mut RngStream) -> Result<(ImageBuffer, f64)> {
        let level = self.sample_level(rng);
        Ok((self.apply(img, level, rng)?, level))
    }

    /// Whether the spec can only produce the identity.
    pub fn is_noiseless(&self) -> bool {
        match self {
            NoiseSpec::Gaussian { sigma_range } => sigma_range[1] == 0.0,
            NoiseSpec::Correlated { sigma_range, kernel } => {
                sigma_range[1] == 0.0 || kernel.values.iter().all(|&v| v == 0.0)
            }
            NoiseSpec::Binomial { p_range } | NoiseSpec::Impulse { p_range } => p_range[1] == 0.0,
            NoiseSpec::PoissonGaussian { .. } => false,
        }
    }
}

/// `x = y + σ·z`, `z ~ N(0, 1)` i.i.d. `sigma` is in `[0, 1]` intensity units.
pub fn apply_gaussian(img: &ImageBuffer, sigma: f64, rng: &mut RngStream) -> ImageBuffer {
    let mut out = img.clone();
    if sigma == 0.0 {
        return out;
    }
    for v in out.data_mut() {
        *v = (*v as f64 + sigma * rng.normal()) as f32;
    }
    out
}

/// `x = k·Poisson(y/k) + N(0, σ_r²)` with `k`, `σ_r` taken from `profile` at
/// `iso`. Negative intensities act as zero photon means.
pub fn apply_poisson_gaussian(
    img: &ImageBuffer,
    iso: f64,
    profile: &SensorProfile,
    rng: &mut RngStream,
) -> Result<ImageBuffer> {
    if iso.is_nan() || iso <= 0.0 {
        return Err(IdrError::param(format!("ISO must be positive, got {iso}")));
    }
    let (k, sigma_r) = profile.at_iso(iso);
    poisson_gaussian_with(img, k, sigma_r, rng)
}

/// Poisson-Gaussian noise with explicit gain `k` and read noise `σ_r`.
pub fn poisson_gaussian_with(
    img: &ImageBuffer,
    k: f64,
    sigma_r: f64,
    rng: &mut RngStream,
) -> Result<ImageBuffer> {
    if k.is_nan() || k <= 0.0 {
        return Err(IdrError::param(format!("gain k must be positive, got {k}")));
    }
    let mut out = img.clone();
    for v in out.data_mut() {
        let mean = (*v as f64).max(0.0) / k;
        let shot = k * rng.poisson(mean);
        *v = (shot + sigma_r * rng.normal()) as f32;
    }
    Ok(out)
}

/// Multiplies by a one-channel Bernoulli(1 − p) mask shared by all channels.
pub fn apply_binomial(img: &ImageBuffer, p: f64, rng: &mut RngStream) -> ImageBuffer {
    let mut out = img.clone();
    if p <= 0.0 {
        return out;
    }
    let c = img.channels();
    for px in out.data_mut().chunks_mut(c) {
        if rng.uniform() < p {
            px.fill(0.0);
        }
    }
    out
}

/// With probability `p`, replaces each pixel-channel independently by a fair
/// draw from {0, 1}.
pub fn apply_impulse(img: &ImageBuffer, p: f64, rng: &mut RngStream) -> ImageBuffer {
    let mut out = img.clone();
    if p <= 0.0 {
        return out;
    }
    for v in out.data_mut() {
        if rng.uniform() < p {
            *v = if rng.uniform() < 0.5 { 0.0 } else { 1.0 };
        }
    }
    out
}

/// `x = y + (σ·v) ⊗ g` with `v ~ N(0, 1)` per channel and zero padding
/// outside the image. The kernel anchor is `(rows/2, cols/2)`.
pub fn apply_correlated(
    img: &ImageBuffer,
    sigma: f64,
    kernel: &Kernel,
    rng: &mut RngStream,
) -> Result<ImageBuffer> {
    if kernel.values.is_empty() {
        return Err(IdrError::param("kernel is empty"));
    }
    let mut out = img.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let (h, w, c) = img.dims();
    let (ar, ac) = (kernel.rows / 2, kernel.cols / 2);
    let mut field = vec![0.0f64; h * w];
    for ch in 0..c {
        for v in field.iter_mut() {
            *v = sigma * rng.normal();
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for r in 0..kernel.rows {
                    let sy = y as isize + r as isize - ar as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let row = &field[sy as usize * w..(sy as usize + 1) * w];
                    let krow = &kernel.values[r * kernel.cols..(r + 1) * kernel.cols];
                    for (cc, &g) in krow.iter().enumerate() {
                        let sx = x as isize + cc as isize - ac as isize;
                        if sx >= 0 && sx < w as isize {
                            acc += g * row[sx as usize];
                        }
                    }
                }
                let i = (y * w + x) * c + ch;
                out.data_mut()[i] = (img.data()[i] as f64 + acc) as f32;
            }
        }
    }
    Ok(out)
}

/// Text form of a [`NoiseSpec`], as found in spec files and the `[noise]`
/// section of experiment configs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpecText {
    pub variant: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_range: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iso_range: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_range: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel_rows: Option<Vec<Vec<f64>>>,
}

impl NoiseSpecText {
    /// Resolves file references relative to `base_dir` and validates.
    pub fn resolve(&self, base_dir: &Path) -> Result<NoiseSpec> {
        let cfg = |m: String| IdrError::Config(m);
        let sigma_range = || -> Result<[f64; 2]> {
            match (self.sigma_range, self.sigma) {
                (Some(r), None) => Ok(r),
                (None, Some(s)) => Ok([s, s]),
                (None, None) => Err(cfg(format!("{}: needs sigma_range or sigma", self.variant))),
                (Some(_), Some(_)) => Err(cfg("give either sigma_range or sigma, not both".into())),
            }
        };
        let p_range = || {
            self.p_range
                .ok_or_else(|| cfg(format!("{}: needs p_range", self.variant)))
        };
        let spec = match self.variant.as_str() {
            "gaussian" => NoiseSpec::Gaussian {
                sigma_range: sigma_range()?,
            },
            "poisson_gaussian" => {
                let mut profile = match &self.calibration {
                    Some(p) => SensorProfile::load_calibration(&base_dir.join(p))?,
                    None => SensorProfile::default(),
                };
                if let Some(k0) = self.k0 {
                    profile.k0 = k0;
                }
                if let Some(s0) = self.sigma0 {
                    profile.sigma0 = s0;
                }
                NoiseSpec::PoissonGaussian {
                    iso_range: self
                        .iso_range
                        .ok_or_else(|| cfg("poisson_gaussian: needs iso_range".into()))?,
                    profile,
                }
            }
            "binomial" => NoiseSpec::Binomial { p_range: p_range()? },
            "impulse" => NoiseSpec::Impulse { p_range: p_range()? },
            "correlated" => {
                let kernel = match (&self.kernel, &self.kernel_path, &self.kernel_rows) {
                    (Some(id), None, None) => Kernel::named(id)?,
                    (None, Some(p), None) => Kernel::load(&base_dir.join(p))?,
                    (None, None, Some(rows)) => {
                        let cols = rows.first().map_or(0, Vec::len);
                        if rows.iter().any(|r| r.len() != cols) {
                            return Err(cfg("kernel_rows must be rectangular".into()));
                        }
                        Kernel::new(rows.len(), cols, rows.concat())?
                    }
                    _ => {
                        return Err(cfg(
                            "correlated: give exactly one of kernel, kernel_path, kernel_rows".into(),
                        ))
                    }
                };
                NoiseSpec::Correlated {
                    sigma_range: sigma_range()?,
                    kernel,
                }
            }
            other => return Err(cfg(format!("unknown noise variant `{other}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<&NoiseSpec> for NoiseSpecText {
    fn from(spec: &NoiseSpec) -> Self {
        let mut t = NoiseSpecText {
            variant: spec.variant_name().to_string(),
            ..Default::default()
        };
        match spec {
            NoiseSpec::Gaussian { sigma_range } => t.sigma_range = Some(*sigma_range),
            NoiseSpec::PoissonGaussian { iso_range, profile } => {
                t.iso_range = Some(*iso_range);
                t.k0 = Some(profile.k0);
                t.sigma0 = Some(profile.sigma0);
            }
            NoiseSpec::Binomial { p_range } | NoiseSpec::Impulse { p_range } => {
                t.p_range = Some(*p_range)
            }
            NoiseSpec::Correlated {
                sigma_range,
                kernel,
            } => {
                t.sigma_range = Some(*sigma_range);
                t.kernel_rows = Some(kernel.values.chunks(kernel.cols).map(<[f64]>::to_vec).collect());
            }
        }
        t
    }
}

/// Reads a stand-alone noise-spec file (TOML key-value text).
pub fn load_noise_spec(path: impl AsRef<Path>) -> Result<NoiseSpec> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| IdrError::io(path, e))?;
    let raw: NoiseSpecText =
        toml::from_str(&text).map_err(|e| IdrError::Config(format!("{}: {e}", path.display())))?;
    raw.resolve(path.parent().unwrap_or(Path::new(".")))
}
