//! Image sets, patch sampling and every training-pair construction.
//!
//! Noisy observations and clean references live in two unrelated types,
//! [`NoisySet`] and [`CleanSet`]. Training entry points only accept a
//! `NoisySet`; there is no conversion from `CleanSet` into it, so clean
//! references cannot reach a training path by accident. Clean pixels are
//! readable only inside this crate (evaluation, noise synthesis, and the
//! explicitly labeled biased-target study).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{IdrError, Result};
use crate::image::{encode_image, load_image, ImageBuffer};
use crate::model::{hex_digest, DenoiserModel};
use crate::noise::{apply_gaussian, NoiseSpec, RngStream};
use crate::tensor::Tensor;

/// File extensions recognised when loading a directory of images.
pub const IMAGE_EXTENSIONS: [&str; 5] = ["png", "pgm", "ppm", "pnm", "raw"];

fn check_images(names: &[String], images: &[ImageBuffer]) -> Result<()> {
    if names.len() != images.len() {
        return Err(IdrError::shape(format!(
            "{} names for {} images",
            names.len(),
            images.len()
        )));
    }
    Ok(())
}

fn default_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("img{i:04}")).collect()
}

/// Lists `dir`'s image files, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| IdrError::Data {
        path: dir.to_path_buf(),
        msg: format!("cannot read image directory: {e}"),
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(IdrError::Data {
            path: dir.to_path_buf(),
            msg: "directory contains no supported images".into(),
        });
    }
    Ok(paths)
}

fn load_dir(dir: &Path) -> Result<(Vec<String>, Vec<ImageBuffer>)> {
    let mut names = Vec::new();
    let mut images = Vec::new();
    for path in list_images(dir)? {
        let name = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        images.push(load_image(&path)?.with_source_id(name.clone()));
        names.push(name);
    }
    Ok((names, images))
}

/// Observed noisy images `x_i` — the only data training may consume.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisySet {
    names: Vec<String>,
    images: Vec<ImageBuffer>,
}

impl NoisySet {
    pub fn new(names: Vec<String>, images: Vec<ImageBuffer>) -> Result<NoisySet> {
        check_images(&names, &images)?;
        Ok(NoisySet { names, images })
    }

    pub fn from_images(images: Vec<ImageBuffer>) -> NoisySet {
        NoisySet {
            names: default_names(images.len()),
            images,
        }
    }

    /// Loads every image in `dir` (`<data>/<split>/<scene>.{png,pgm,raw}`).
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<NoisySet> {
        let (names, images) = load_dir(dir.as_ref())?;
        Ok(NoisySet { names, images })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn images(&self) -> &[ImageBuffer] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> NoisySet {
        NoisySet {
            names: indices.iter().map(|&i| self.names[i].clone()).collect(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }
}

/// Ground-truth references `y_i`. Usable for evaluation and simulation,
/// never as training data.
#[derive(Clone, Debug, PartialEq)]
pub struct CleanSet {
    names: Vec<String>,
    images: Vec<ImageBuffer>,
}

impl CleanSet {
    pub fn new(names: Vec<String>, images: Vec<ImageBuffer>) -> Result<CleanSet> {
        check_images(&names, &images)?;
        Ok(CleanSet { names, images })
    }

    pub fn from_images(images: Vec<ImageBuffer>) -> CleanSet {
        CleanSet {
            names: default_names(images.len()),
            images,
        }
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<CleanSet> {
        let (names, images) = load_dir(dir.as_ref())?;
        Ok(CleanSet { names, images })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub(crate) fn images(&self) -> &[ImageBuffer] {
        &self.images
    }

    pub fn subset(&self, indices: &[usize]) -> CleanSet {
        CleanSet {
            names: indices.iter().map(|&i| self.names[i].clone()).collect(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }

    /// Simulates observations `x_i = y_i + n_i`, one level per image drawn
    /// from `spec`. Image `i` uses substream `i` of `rng`.
    pub fn synthesize_noisy(&self, spec: &NoiseSpec, rng: &RngStream) -> Result<(NoisySet, Vec<f64>)> {
        let mut images = Vec::with_capacity(self.len());
        let mut levels = Vec::with_capacity(self.len());
        for (i, y) in self.images.iter().enumerate() {
            let mut r = rng.substream(i as u64);
            let (x, level) = spec.sample_and_apply(y, &mut r)?;
            images.push(x);
            levels.push(level);
        }
        Ok((NoisySet::new(self.names.clone(), images)?, levels))
    }

    /// Like [`CleanSet::synthesize_noisy`] with every image at `level`.
    pub fn synthesize_noisy_at(&self, spec: &NoiseSpec, level: f64, rng: &RngStream) -> Result<NoisySet> {
        let images = self
            .images
            .iter()
            .enumerate()
            .map(|(i, y)| spec.apply(y, level, &mut rng.substream(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        NoisySet::new(self.names.clone(), images)
    }
}

/// Training pairs `(input, target)` with the noise level used for each.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    pub inputs: Vec<ImageBuffer>,
    pub targets: Vec<ImageBuffer>,
    pub levels: Vec<f64>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// `(N, C, H, W)` tensors of inputs and targets.
    pub fn to_tensors(&self) -> Result<(Tensor<f32>, Tensor<f32>)> {
        Ok((ImageBuffer::stack(&self.inputs)?, ImageBuffer::stack(&self.targets)?))
    }
}

/// Builds `{(t_i + n_i, t_i)}` with a fresh level and noise draw per pair.
/// Targets are copied unchanged.
pub fn make_noisier_noisy(targets: &[ImageBuffer], spec: &NoiseSpec, rng: &mut RngStream) -> Result<PairSet> {
    spec.validate()?;
    let mut inputs = Vec::with_capacity(targets.len());
    let mut levels = Vec::with_capacity(targets.len());
    for t in targets {
        let (x, level) = spec.sample_and_apply(t, rng)?;
        inputs.push(x);
        levels.push(level);
    }
    Ok(PairSet {
        inputs,
        targets: targets.to_vec(),
        levels,
    })
}

/// Uniformly random `patch × patch` crops: image index first, then the
/// top-left corner, all from `rng`.
pub fn extract_patches(
    images: &[ImageBuffer],
    patch: usize,
    count: usize,
    rng: &mut RngStream,
) -> Result<Vec<ImageBuffer>> {
    if images.is_empty() {
        return Err(IdrError::shape("cannot extract patches from an empty set"));
    }
    if patch == 0 {
        return Err(IdrError::param("patch size must be positive"));
    }
    if let Some(img) = images.iter().find(|i| i.height() < patch || i.width() < patch) {
        return Err(IdrError::shape(format!(
            "patch {patch} is larger than image {}x{}",
            img.height(),
            img.width()
        )));
    }
    (0..count)
        .map(|_| {
            let img = &images[rng.below(images.len())];
            let y = rng.below(img.height() - patch + 1);
            let x = rng.below(img.width() - patch + 1);
            img.crop(y, x, patch, patch)
        })
        .collect()
}

/// Normalized 1-D Gaussian of radius `ceil(3σ)`; `[1]` for `σ = 0`.
pub fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with reflect padding. `sigma` is in pixels.
pub fn gaussian_blur(img: &ImageBuffer, sigma: f64) -> Result<ImageBuffer> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(IdrError::param(format!("blur sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let k = gaussian_kernel_1d(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w, c) = img.dims();
    let src = img.data();
    let mut tmp = vec![0f64; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let sx = crate::image::reflect_index(x as isize + i as isize - r, w);
                    acc += kv * src[(y * w + sx) * c + ch] as f64;
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = img.clone();
    let dst = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let sy = crate::image::reflect_index(y as isize + i as isize - r, h);
                    acc += kv * tmp[(sy * w + x) * c + ch];
                }
                dst[(y * w + x) * c + ch] = acc as f32;
            }
        }
    }
    Ok(out)
}

/// Degradation applied to clean references to build deliberately biased
/// targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasKind {
    /// `y + N(0, σ²)`, σ in 1/255 units.
    GaussianNoise,
    /// Gaussian blur, σ in pixels.
    GaussianBlur,
}

/// Biased targets `y_gn` / `y_gb`. Image `i` draws from substream `i` of
/// `rng`, so the same `rng` gives noise fields that scale linearly in σ.
pub fn make_biased_targets(
    clean: &[ImageBuffer],
    bias: BiasKind,
    sigma: f64,
    rng: &RngStream,
) -> Result<Vec<ImageBuffer>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(IdrError::param(format!("bias sigma must be non-negative, got {sigma}")));
    }
    clean
        .iter()
        .enumerate()
        .map(|(i, y)| match bias {
            BiasKind::GaussianNoise => Ok(apply_gaussian(y, sigma / 255.0, &mut rng.substream(i as u64))),
            BiasKind::GaussianBlur => gaussian_blur(y, sigma),
        })
        .collect()
}

/// Full-image inference settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceOptions {
    pub tile: usize,
    pub overlap: usize,
    pub batch: usize,
    pub workers: usize,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            tile: 256,
            overlap: 16,
            batch: 32,
            workers: 1,
        }
    }
}

impl InferenceOptions {
    pub fn validate(&self, alignment: usize) -> Result<()> {
        if self.batch == 0 || self.workers == 0 {
            return Err(IdrError::param("inference batch and workers must be positive"));
        }
        if self.tile == 0 || !self.tile.is_multiple_of(alignment) {
            return Err(IdrError::param(format!(
                "inference tile {} must be a positive multiple of {alignment}",
                self.tile
            )));
        }
        if 2 * self.overlap >= self.tile || !(self.tile - 2 * self.overlap).is_multiple_of(alignment) {
            return Err(IdrError::param(format!(
                "tile {} with overlap {} leaves no aligned interior",
                self.tile, self.overlap
            )));
        }
        Ok(())
    }
}

/// Where one tile came from and which part of it is kept.
struct TilePlan {
    image: usize,
    /// Top-left of the kept region in original image coordinates.
    y: usize,
    x: usize,
    /// Offset of the kept region inside the tile.
    off_y: usize,
    off_x: usize,
    keep_h: usize,
    keep_w: usize,
}

/// Tiling along one axis: `(tile extent, kept core, context, tile count)`.
fn axis_plan(n: usize, align: usize, opts: &InferenceOptions) -> (usize, usize, usize, usize) {
    let padded = n.div_ceil(align) * align;
    if padded <= opts.tile {
        (padded, padded, 0, 1)
    } else {
        let core = opts.tile - 2 * opts.overlap;
        (opts.tile, core, opts.overlap, n.div_ceil(core))
    }
}

/// Denoises whole images of any size. Each image is reflect-padded to the
/// model alignment; images larger than one tile are split into tiles of
/// `opts.tile` whose `opts.overlap`-wide borders give context and are
/// discarded. Tiles of equal shape are batched `opts.batch` at a time.
/// Batching and worker count do not change the result.
pub fn infer_images(model: &DenoiserModel, images: &[ImageBuffer], opts: &InferenceOptions) -> Result<Vec<ImageBuffer>> {
    let align = model.config().alignment();
    opts.validate(align)?;
    let mut plans = Vec::new();
    let mut tiles = Vec::new();
    for (idx, img) in images.iter().enumerate() {
        let (h, w, _) = img.dims();
        let (th, ch, cy, ny) = axis_plan(h, align, opts);
        let (tw, cw, cx, nx) = axis_plan(w, align, opts);
        let padded = img.pad_reflect(cy, ny * ch - h + cy, cx, nx * cw - w + cx);
        for ty in 0..ny {
            for tx in 0..nx {
                tiles.push(padded.crop(ty * ch, tx * cw, th, tw)?);
                plans.push(TilePlan {
                    image: idx,
                    y: ty * ch,
                    x: tx * cw,
                    off_y: cy,
                    off_x: cx,
                    keep_h: ch.min(h - ty * ch),
                    keep_w: cw.min(w - tx * cw),
                });
            }
        }
    }

    // group tile indices by shape, preserving order within a group
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, t) in tiles.iter().enumerate() {
        groups.entry((t.height(), t.width())).or_default().push(i);
    }
    let chunks: Vec<Vec<usize>> = groups
        .into_values()
        .flat_map(|idx| idx.chunks(opts.batch).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect();
    let run = |chunk: &Vec<usize>| -> Result<Vec<ImageBuffer>> {
        let batch: Vec<ImageBuffer> = chunk.iter().map(|&i| tiles[i].clone()).collect();
        model.denoise(&batch)
    };
    let results: Vec<Vec<ImageBuffer>> = if opts.workers > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .map_err(|e| IdrError::param(format!("cannot start worker pool: {e}")))?;
        pool.install(|| chunks.par_iter().map(run).collect::<Result<Vec<_>>>())?
    } else {
        chunks.iter().map(run).collect::<Result<Vec<_>>>()?
    };
    let mut outputs: Vec<Option<ImageBuffer>> = vec![None; tiles.len()];
    for (chunk, res) in chunks.iter().zip(results) {
        for (&i, out) in chunk.iter().zip(res) {
            outputs[i] = Some(out);
        }
    }

    let mut stitched: Vec<ImageBuffer> = images
        .iter()
        .map(|img| {
            let mut o = ImageBuffer::filled(img.height(), img.width(), img.channels(), 0.0);
            o.source_id = img.source_id.clone();
            o.bit_depth = img.bit_depth;
            o.raw_levels = img.raw_levels;
            o
        })
        .collect();
    for (plan, out) in plans.iter().zip(outputs) {
        let out = out.expect("every tile was inferred");
        let dst = &mut stitched[plan.image];
        for yy in 0..plan.keep_h {
            for xx in 0..plan.keep_w {
                for c in 0..dst.channels() {
                    let v = out.get(plan.off_y + yy, plan.off_x + xx, c);
                    dst.set(plan.y + yy, plan.x + xx, c, v);
                }
            }
        }
    }
    if let Some(i) = stitched.iter().position(|s| s.data().iter().any(|v| !v.is_finite())) {
        return Err(IdrError::numeric(format!("inference produced non-finite values for image {i}")));
    }
    Ok(stitched)
}

/// Current training targets `x_i^(m)` and where they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetStore {
    targets: Vec<ImageBuffer>,
    round: usize,
    /// Fingerprint of the model that produced the targets; `None` for the
    /// raw observations.
    provenance: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct StoreManifest {
    round: usize,
    model_hash: Option<String>,
    files: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    sha256: String,
}

impl TargetStore {
    /// Round 0: the noisy observations themselves.
    pub fn initial(noisy: &NoisySet) -> TargetStore {
        TargetStore {
            targets: noisy.images().to_vec(),
            round: 0,
            provenance: None,
        }
    }

    /// Targets drawn from clean or biased references. Only the pilot
    /// study's reference and biased conditions build stores this way.
    pub(crate) fn from_reference(targets: Vec<ImageBuffer>, provenance: &str) -> TargetStore {
        TargetStore {
            targets,
            round: 0,
            provenance: Some(provenance.to_string()),
        }
    }

    pub fn targets(&self) -> &[ImageBuffer] {
        &self.targets
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn provenance(&self) -> Option<&str> {
        self.provenance.as_deref()
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Writes 16-bit PNGs (`00000.png`, …) plus `manifest.json` with the
    /// round, model hash and per-file SHA-256. The manifest is written
    /// last, to a temporary name that is then renamed into place.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| IdrError::io(dir, e))?;
        let mut files = Vec::with_capacity(self.targets.len());
        for (i, t) in self.targets.iter().enumerate() {
            let file = format!("{i:05}.png");
            let bytes = encode_image(t, "png", 16)?;
            let path = dir.join(&file);
            fs::write(&path, &bytes).map_err(|e| IdrError::io(&path, e))?;
            files.push(ManifestEntry {
                file,
                sha256: hex_digest(&bytes),
            });
        }
        let manifest = StoreManifest {
            round: self.round,
            model_hash: self.provenance.clone(),
            files,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let tmp = dir.join("manifest.json.tmp");
        fs::write(&tmp, json).map_err(|e| IdrError::io(&tmp, e))?;
        let path = dir.join("manifest.json");
        fs::rename(&tmp, &path).map_err(|e| IdrError::io(&path, e))
    }

    /// Reads a store written by [`TargetStore::save`], verifying checksums.
    /// Values come back quantized to 16 bits.
    pub fn load(dir: impl AsRef<Path>) -> Result<TargetStore> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| IdrError::io(&path, e))?;
        let manifest: StoreManifest = serde_json::from_str(&text).map_err(|e| IdrError::Data {
            path: path.clone(),
            msg: format!("bad manifest: {e}"),
        })?;
        let mut targets = Vec::with_capacity(manifest.files.len());
        for entry in &manifest.files {
            let p = dir.join(&entry.file);
            let bytes = fs::read(&p).map_err(|e| IdrError::io(&p, e))?;
            if hex_digest(&bytes) != entry.sha256 {
                return Err(IdrError::Data {
                    path: p,
                    msg: "checksum does not match manifest".into(),
                });
            }
            targets.push(load_image(&p)?);
        }
        Ok(TargetStore {
            targets,
            round: manifest.round,
            provenance: manifest.model_hash,
        })
    }
}

/// `x_i^(m+1) = F(x_i)` over the ORIGINAL observations. The returned store
/// replaces `store` as a whole, with the round index advanced by one.
pub fn refine_targets(
    model: &DenoiserModel,
    noisy: &NoisySet,
    store: &TargetStore,
    opts: &InferenceOptions,
) -> Result<TargetStore> {
    if store.len() != noisy.len() {
        return Err(IdrError::shape(format!(
            "store holds {} targets for {} noisy images",
            store.len(),
            noisy.len()
        )));
    }
    let targets = infer_images(model, noisy.images(), opts)?;
    for (i, (t, x)) in targets.iter().zip(noisy.images()).enumerate() {
        if !t.same_shape(x) {
            return Err(IdrError::shape(format!("refined target {i} changed shape")));
        }
    }
    Ok(TargetStore {
        targets,
        round: store.round + 1,
        provenance: Some(model.fingerprint()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn ramp(h: usize, w: usize) -> ImageBuffer {
        let data = (0..h * w).map(|i| (i % 251) as f32 / 251.0).collect();
        ImageBuffer::new(h, w, 1, data).unwrap()
    }

    #[test]
    fn patch_equal_to_image_is_identity() {
        let img = ramp(16, 16);
        let mut rng = RngStream::new(0, 2);
        let p = extract_patches(std::slice::from_ref(&img), 16, 3, &mut rng).unwrap();
        assert!(p.iter().all(|q| q.data() == img.data()));
        assert!(extract_patches(&[img], 17, 1, &mut rng).is_err());
    }

    #[test]
    fn noisier_noisy_keeps_targets() {
        let t = vec![ramp(8, 8), ramp(8, 8)];
        let mut rng = RngStream::new(1, 3);
        let zero = make_noisier_noisy(&t, &NoiseSpec::gaussian(0.0, 0.0), &mut rng).unwrap();
        assert_eq!(zero.inputs, t);
        let p = make_noisier_noisy(&t, &NoiseSpec::gaussian(25.0, 25.0), &mut rng).unwrap();
        assert_eq!(p.targets, t);
        assert_ne!(p.inputs, t);
        assert_eq!(p.levels, vec![25.0, 25.0]);
    }

    #[test]
    fn blur_kernel_properties() {
        for s in [0.5, 1.0, 2.3] {
            let k = gaussian_kernel_1d(s);
            assert_eq!(k.len(), 2 * (3.0 * s).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let c = ImageBuffer::filled(9, 7, 1, 0.3);
        let b = gaussian_blur(&c, 1.2).unwrap();
        assert!(b.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        let r = ramp(9, 9);
        assert_eq!(gaussian_blur(&r, 0.0).unwrap(), r);
    }

    #[test]
    fn impulse_blur_reads_out_kernel() {
        let mut img = ImageBuffer::filled(21, 21, 1, 0.0);
        img.set(10, 10, 0, 1.0);
        let b = gaussian_blur(&img, 1.0).unwrap();
        let k = gaussian_kernel_1d(1.0);
        for dy in 0..7 {
            for dx in 0..7 {
                let v = b.get(7 + dy, 7 + dx, 0) as f64;
                assert!((v - k[dy] * k[dx]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn tiles_cover_large_images() {
        let cfg = ModelConfig {
            levels: 2,
            base_channels: 2,
            ..ModelConfig::default()
        };
        let model = DenoiserModel::pass_through(&cfg).unwrap();
        let opts = InferenceOptions {
            tile: 32,
            overlap: 4,
            batch: 3,
            workers: 1,
        };
        let imgs = vec![ramp(45, 70), ramp(10, 13)];
        let out = infer_images(&model, &imgs, &opts).unwrap();
        for (o, i) in out.iter().zip(&imgs) {
            assert!(o.same_shape(i));
            for (a, b) in o.data().iter().zip(i.data()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn inference_options_validated() {
        let bad = InferenceOptions {
            tile: 30,
            ..InferenceOptions::default()
        };
        assert!(bad.validate(4).is_err());
        assert!(InferenceOptions::default().validate(4).is_ok());
    }

    #[test]
    fn store_roundtrip_and_refine_round() {
        let noisy = NoisySet::from_images(vec![ramp(8, 8), ramp(8, 12)]);
        let store = TargetStore::initial(&noisy);
        let cfg = ModelConfig {
            levels: 2,
            base_channels: 2,
            ..ModelConfig::default()
        };
        let model = DenoiserModel::pass_through(&cfg).unwrap();
        let next = refine_targets(&model, &noisy, &store, &InferenceOptions::default()).unwrap();
        assert_eq!(next.round(), 1);
        assert_eq!(next.provenance(), Some(model.fingerprint().as_str()));
        let dir = tempfile::tempdir().unwrap();
        next.save(dir.path()).unwrap();
        let back = TargetStore::load(dir.path()).unwrap();
        assert_eq!(back.round(), 1);
        assert_eq!(back.len(), 2);
        fs::write(dir.path().join("00000.png"), b"junk").unwrap();
        assert!(TargetStore::load(dir.path()).is_err());
    }
}
