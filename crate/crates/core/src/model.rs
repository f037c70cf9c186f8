//! Shallow U-Net denoiser without normalization layers.
//!
//! Level `l` holds two 3×3 convolutions with `base·2^l` channels, each
//! followed by a leaky ReLU. Encoder levels are joined by 2×2 max pooling,
//! decoder levels by nearest-neighbour upsampling and a channel concat with
//! the matching encoder output. A final linear 3×3 convolution maps back to
//! the image channel count. The network predicts the image itself, not the
//! noise residual.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{IdrError, Result};
use crate::image::ImageBuffer;
use crate::noise::RngStream;
use crate::tensor::{adam_step, checkpoint, kernels, AdamConfig, AdamState, Graph, Scalar, Tensor, Var};

/// Seed stream reserved for weight initialization.
pub const INIT_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 3,
            base_channels: 16,
            in_channels: 1,
            leaky_slope: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(IdrError::param("levels must be at least 1"));
        }
        if self.base_channels == 0 {
            return Err(IdrError::param("base_channels must be at least 1"));
        }
        if ![1, 3, 4].contains(&self.in_channels) {
            return Err(IdrError::param(format!(
                "in_channels must be 1, 3 or 4, got {}",
                self.in_channels
            )));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(IdrError::param(format!(
                "leaky slope must lie in [0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// Spatial extents fed to the network must be multiples of this.
    pub fn alignment(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// `(name, out_ch, in_ch)` for every convolution in forward order.
    fn layer_plan(&self) -> Vec<(String, usize, usize)> {
        let mut plan = Vec::new();
        let mut prev = self.in_channels;
        for l in 0..self.levels {
            let c = self.channels_at(l);
            plan.push((format!("enc{l}.conv0"), c, prev));
            plan.push((format!("enc{l}.conv1"), c, c));
            prev = c;
        }
        for l in (0..self.levels - 1).rev() {
            let c = self.channels_at(l);
            plan.push((format!("dec{l}.conv0"), c, prev + c));
            plan.push((format!("dec{l}.conv1"), c, c));
            prev = c;
        }
        plan.push(("out".to_string(), self.in_channels, prev));
        plan
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex_digest(json.as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Parameters and architecture of one denoiser `F`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<f32>>,
}

/// He-uniform initialized U-Net. Identical configs (including the seed)
/// produce bit-identical parameters.
pub fn build_unet(config: &ModelConfig) -> Result<DenoiserModel> {
    config.validate()?;
    let mut rng = RngStream::new(config.seed, INIT_STREAM);
    let plan = config.layer_plan();
    let last = plan.len() - 1;
    let mut names = Vec::new();
    let mut params = Vec::new();
    for (i, (name, oc, ic)) in plan.into_iter().enumerate() {
        let fan_in = (ic * 9) as f64;
        // leaky-relu gain for hidden layers, unit gain for the linear output
        let gain2 = if i == last {
            1.0
        } else {
            2.0 / (1.0 + config.leaky_slope * config.leaky_slope)
        };
        let bound = (3.0 * gain2 / fan_in).sqrt();
        let w: Vec<f32> = (0..oc * ic * 9)
            .map(|_| rng.rng().random_range(-bound..bound) as f32)
            .collect();
        names.push(format!("{name}.weight"));
        params.push(Tensor::from_vec(&[oc, ic, 3, 3], w)?);
        names.push(format!("{name}.bias"));
        params.push(Tensor::zeros(&[oc]));
    }
    Ok(DenoiserModel {
        config: config.clone(),
        names,
        params,
    })
}

/// Records the U-Net forward pass on `graph`. `params` must follow the
/// model's parameter order.
pub fn unet_graph<T: Scalar>(
    graph: &mut Graph<T>,
    config: &ModelConfig,
    params: &[Var],
    input: Var,
) -> Result<Var> {
    let slope = T::of_f64(config.leaky_slope);
    let mut next = 0;
    let mut conv = |g: &mut Graph<T>, x: Var| -> Result<Var> {
        let y = g.conv2d(x, params[next], params[next + 1])?;
        next += 2;
        Ok(y)
    };
    let mut skips = Vec::with_capacity(config.levels);
    let mut h = input;
    for l in 0..config.levels {
        let a = conv(graph, h)?;
        h = graph.leaky_relu(a, slope)?;
        let a = conv(graph, h)?;
        h = graph.leaky_relu(a, slope)?;
        if l + 1 < config.levels {
            skips.push(h);
            h = graph.maxpool2(h)?;
        }
    }
    for l in (0..config.levels - 1).rev() {
        let up = graph.upsample2(h)?;
        h = graph.concat_channels(up, skips[l])?;
        let a = conv(graph, h)?;
        h = graph.leaky_relu(a, slope)?;
        let a = conv(graph, h)?;
        h = graph.leaky_relu(a, slope)?;
    }
    conv(graph, h)
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    config_hash: String,
}

impl DenoiserModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// A model whose output equals its input up to float rounding: the
    /// skip path carries `+x` and `−x` through every leaky ReLU and the
    /// output layer recombines them. Needs `base_channels ≥ 2·in_channels`.
    /// Intended as a test double.
    pub fn pass_through(config: &ModelConfig) -> Result<DenoiserModel> {
        let c = config.in_channels;
        if config.base_channels < 2 * c {
            return Err(IdrError::param(
                "pass-through model needs base_channels >= 2 * in_channels",
            ));
        }
        let mut model = build_unet(config)?;
        model.params.iter_mut().for_each(|p| p.data_mut().fill(0.0));
        let set = |t: &mut Tensor<f32>, o: usize, i: usize, v: f32| {
            let ic = t.shape()[1];
            t.data_mut()[(o * ic + i) * 9 + 4] = v;
        };
        let index = |name: &str| model.names.iter().position(|n| n == name).unwrap();
        let enc0 = index("enc0.conv0.weight");
        let enc1 = index("enc0.conv1.weight");
        let levels = config.levels;
        for ch in 0..c {
            set(&mut model.params[enc0], 2 * ch, ch, 1.0);
            set(&mut model.params[enc0], 2 * ch + 1, ch, -1.0);
            for k in 0..2 {
                set(&mut model.params[enc1], 2 * ch + k, 2 * ch + k, 1.0);
            }
        }
        let mut relus = 2;
        if levels > 1 {
            // decoder level 0 reads the skip after the upsampled channels
            let up_ch = config.channels_at(1);
            let dec0 = index("dec0.conv0.weight");
            let dec1 = index("dec0.conv1.weight");
            for ch in 0..c {
                for k in 0..2 {
                    set(&mut model.params[dec0], 2 * ch + k, up_ch + 2 * ch + k, 1.0);
                    set(&mut model.params[dec1], 2 * ch + k, 2 * ch + k, 1.0);
                }
            }
            relus += 2;
        }
        let s = config.leaky_slope as f32;
        let scale = 1.0 / (1.0 + s.powi(relus));
        let out = index("out.weight");
        for ch in 0..c {
            set(&mut model.params[out], ch, 2 * ch, scale);
            set(&mut model.params[out], ch, 2 * ch + 1, -scale);
        }
        Ok(model)
    }

    fn check_input(&self, input: &Tensor<f32>) -> Result<()> {
        let (_, c, h, w) = input.dims4()?;
        if c != self.config.in_channels {
            return Err(IdrError::shape(format!(
                "model expects {} channels, input has {c}",
                self.config.in_channels
            )));
        }
        let a = self.config.alignment();
        if h % a != 0 || w % a != 0 {
            return Err(IdrError::shape(format!(
                "spatial extents {h}x{w} must be multiples of {a}"
            )));
        }
        Ok(())
    }

    /// Inference-only forward pass on an `(N, C, H, W)` batch. Produces the
    /// same values as [`unet_graph`] without recording a tape.
    pub fn forward(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_input(input)?;
        let slope = self.config.leaky_slope as f32;
        let p = &self.params;
        let mut next = 0;
        let mut conv = |x: &Tensor<f32>| -> Result<Tensor<f32>> {
            let (y, _) = kernels::conv2d_forward(x, &p[next], &p[next + 1])?;
            next += 2;
            Ok(y)
        };
        let act = |x: &Tensor<f32>| kernels::leaky_relu_forward(x, slope);
        let levels = self.config.levels;
        let mut skips = Vec::with_capacity(levels);
        let mut h = input.clone();
        for l in 0..levels {
            h = act(&conv(&h)?);
            h = act(&conv(&h)?);
            if l + 1 < levels {
                let (pooled, _) = kernels::maxpool2_forward(&h)?;
                skips.push(h);
                h = pooled;
            }
        }
        for l in (0..levels - 1).rev() {
            let up = kernels::upsample2_forward(&h)?;
            h = kernels::concat_channels_forward(&up, &skips[l])?;
            h = act(&conv(&h)?);
            h = act(&conv(&h)?);
        }
        let out = conv(&h)?;
        out.check_finite("denoiser output")?;
        Ok(out)
    }

    /// Maps each image `x` to `F(x)`. Equally shaped images run as one
    /// batch; every batch item is computed independently, so results do not
    /// depend on how images are grouped. Outputs are not clamped.
    pub fn denoise(&self, images: &[ImageBuffer]) -> Result<Vec<ImageBuffer>> {
        let Some(first) = images.first() else {
            return Ok(Vec::new());
        };
        let outputs = if images.iter().all(|i| i.same_shape(first)) {
            ImageBuffer::unstack(&self.forward(&ImageBuffer::stack(images)?)?)?
        } else {
            let mut out = Vec::with_capacity(images.len());
            for img in images {
                let t = ImageBuffer::stack(std::slice::from_ref(img))?;
                out.push(ImageBuffer::unstack(&self.forward(&t)?)?.remove(0));
            }
            out
        };
        Ok(outputs
            .into_iter()
            .zip(images)
            .map(|(mut o, img)| {
                o.source_id = img.source_id.clone();
                o
            })
            .collect())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            config_hash: self.config.hash(),
        };
        let named: Vec<(String, Tensor<f32>)> = self
            .names
            .iter()
            .cloned()
            .zip(self.params.iter().cloned())
            .collect();
        checkpoint::encode(&named, serde_json::to_string(&meta).expect("meta").as_bytes())
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<DenoiserModel> {
        let (named, meta) = checkpoint::decode(bytes)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta)
            .map_err(|e| IdrError::format(format!("checkpoint config blob: {e}")))?;
        if meta.config.hash() != meta.config_hash {
            return Err(IdrError::format("checkpoint config hash mismatch"));
        }
        let template = build_unet(&meta.config)?;
        if named.len() != template.params.len() {
            return Err(IdrError::format(format!(
                "checkpoint holds {} tensors, architecture needs {}",
                named.len(),
                template.params.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut params = Vec::with_capacity(named.len());
        for ((name, t), (want_name, want)) in named.into_iter().zip(template.names.iter().zip(&template.params)) {
            if &name != want_name || t.shape() != want.shape() {
                return Err(IdrError::format(format!(
                    "checkpoint tensor `{name}` {:?} does not match `{want_name}` {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
            names.push(name);
            params.push(t);
        }
        Ok(DenoiserModel {
            config: meta.config,
            names,
            params,
        })
    }

    /// SHA-256 of the checkpoint encoding, used as provenance.
    pub fn fingerprint(&self) -> String {
        hex_digest(&self.to_checkpoint_bytes())
    }
}

pub fn save_checkpoint(model: &DenoiserModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model.to_checkpoint_bytes()).map_err(|e| IdrError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DenoiserModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| IdrError::io(path, e))?;
    DenoiserModel::from_checkpoint_bytes(&bytes)
}

/// Optimizer state owned by one training run.
#[derive(Clone, Debug)]
pub struct TrainingState {
    pub adam: AdamState<f32>,
    pub iteration: u64,
}

impl TrainingState {
    pub fn new(model: &DenoiserModel, adam: AdamConfig) -> Self {
        TrainingState {
            adam: AdamState::new(adam, model.params()),
            iteration: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.adam.config.lr = lr;
    }
}

/// One forward/backward/Adam update on `(inputs, targets)`, both
/// `(N, C, H, W)`. Returns the L1 loss before the update.
pub fn train_step(
    model: &mut DenoiserModel,
    state: &mut TrainingState,
    inputs: &Tensor<f32>,
    targets: &Tensor<f32>,
) -> Result<f32> {
    if inputs.shape() != targets.shape() {
        return Err(IdrError::shape(format!(
            "inputs {:?} and targets {:?} differ",
            inputs.shape(),
            targets.shape()
        )));
    }
    model.check_input(inputs)?;
    let iteration = state.iteration;
    let at = |e: IdrError| match e {
        IdrError::Numeric(m) => IdrError::Numeric(format!("iteration {iteration}: {m}")),
        other => other,
    };
    let mut g = Graph::<f32>::new();
    let vars = model
        .params
        .iter()
        .map(|p| g.param(p.clone()))
        .collect::<Result<Vec<_>>>()
        .map_err(at)?;
    let x = g.input(inputs.clone()).map_err(at)?;
    let y = unet_graph(&mut g, &model.config, &vars, x).map_err(at)?;
    let t = g.input(targets.clone()).map_err(at)?;
    let loss_var = g.l1_loss(y, t).map_err(at)?;
    let loss = g.value(loss_var).data()[0];
    g.backward(loss_var)?;
    let grads = vars
        .iter()
        .enumerate()
        .map(|(i, v)| {
            g.grad(*v)
                .ok_or_else(|| IdrError::numeric(format!("parameter {i} received no gradient")))
        })
        .collect::<Result<Vec<&[f32]>>>()?;
    adam_step(&mut model.params, &grads, &mut state.adam).map_err(at)?;
    state.iteration += 1;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            levels: 3,
            base_channels: 4,
            in_channels: 1,
            leaky_slope: 0.1,
            seed: 5,
        }
    }

    fn ramp(n: usize, c: usize, h: usize, w: usize) -> Tensor<f32> {
        let data = (0..n * c * h * w)
            .map(|i| ((i * 37 % 101) as f32) / 101.0)
            .collect();
        Tensor::from_vec(&[n, c, h, w], data).unwrap()
    }

    #[test]
    fn same_seed_same_bits() {
        let a = build_unet(&small()).unwrap();
        let b = build_unet(&small()).unwrap();
        assert_eq!(a, b);
        let mut cfg = small();
        cfg.seed = 6;
        assert_ne!(build_unet(&cfg).unwrap().params(), a.params());
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            ModelConfig { in_channels: 2, ..small() },
            ModelConfig { levels: 0, ..small() },
            ModelConfig { base_channels: 0, ..small() },
            ModelConfig { leaky_slope: 1.0, ..small() },
        ] {
            assert!(build_unet(&cfg).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn gray_model_shapes() {
        let cfg = ModelConfig {
            base_channels: 16,
            ..small()
        };
        let m = build_unet(&cfg).unwrap();
        let y = m.forward(&ramp(1, 1, 48, 48)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 48, 48]);
        assert!(y.is_finite());
        let names = m.param_names();
        assert_eq!(names.first().unwrap(), "enc0.conv0.weight");
        assert_eq!(names.last().unwrap(), "out.bias");
        assert_eq!(m.params()[names.len() - 2].shape(), &[1, 16, 3, 3]);
    }

    #[test]
    fn misaligned_input_names_the_multiple() {
        let m = build_unet(&small()).unwrap();
        let err = m.forward(&ramp(1, 1, 10, 8)).unwrap_err();
        assert!(err.to_string().contains("multiples of 4"), "{err}");
        assert!(m.forward(&ramp(1, 3, 8, 8)).is_err());
    }

    #[test]
    fn tape_and_inference_forward_agree_bitwise() {
        let m = build_unet(&small()).unwrap();
        let x = ramp(2, 1, 8, 16);
        let mut g = Graph::<f32>::new();
        let vars: Vec<Var> = m.params().iter().map(|p| g.param(p.clone()).unwrap()).collect();
        let xv = g.input(x.clone()).unwrap();
        let y = unet_graph(&mut g, m.config(), &vars, xv).unwrap();
        assert_eq!(g.value(y), &m.forward(&x).unwrap());
    }

    #[test]
    fn batch_equals_single_calls() {
        let m = build_unet(&small()).unwrap();
        let x = ramp(3, 1, 8, 8);
        let batched = m.forward(&x).unwrap();
        let imgs = ImageBuffer::unstack(&x).unwrap();
        let singles = m.denoise(&imgs).unwrap();
        assert_eq!(ImageBuffer::unstack(&batched).unwrap(), singles);
    }

    #[test]
    fn pass_through_reproduces_input() {
        for levels in [1, 2, 3] {
            let cfg = ModelConfig { levels, ..small() };
            let m = DenoiserModel::pass_through(&cfg).unwrap();
            let mut x = ramp(1, 1, 8, 8);
            x.data_mut()[3] = -0.4;
            let y = m.forward(&x).unwrap();
            for (a, b) in x.data().iter().zip(y.data()) {
                assert!((a - b).abs() < 1e-6, "levels {levels}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_forward_equality() {
        let m = build_unet(&small()).unwrap();
        let back = DenoiserModel::from_checkpoint_bytes(&m.to_checkpoint_bytes()).unwrap();
        assert_eq!(back, m);
        let x = ramp(1, 1, 8, 8);
        assert_eq!(back.forward(&x).unwrap(), m.forward(&x).unwrap());
    }

    #[test]
    fn zero_lr_leaves_params_and_moments() {
        let mut m = build_unet(&small()).unwrap();
        let before = m.clone();
        let mut st = TrainingState::new(&m, AdamConfig { lr: 0.0, ..AdamConfig::default() });
        let st0 = st.adam.clone();
        let x = ramp(2, 1, 8, 8);
        let t = Tensor::filled(&[2, 1, 8, 8], 0.5);
        let l1 = train_step(&mut m, &mut st, &x, &t).unwrap();
        let l2 = train_step(&mut m, &mut st, &x, &t).unwrap();
        assert_eq!(m, before);
        assert_eq!(l1, l2);
        assert_eq!(st.adam.first_moment(0), st0.first_moment(0));
        assert_eq!(st.adam.step_count(), 2);
        assert_eq!(st.iteration, 2);
    }

    #[test]
    fn overfits_a_fixed_batch() {
        let mut m = build_unet(&small()).unwrap();
        let mut st = TrainingState::new(&m, AdamConfig { lr: 1e-3, ..AdamConfig::default() });
        let x = ramp(2, 1, 8, 8);
        let t = Tensor::from_vec(&[2, 1, 8, 8], x.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        let losses: Vec<f32> = (0..50).map(|_| train_step(&mut m, &mut st, &x, &t).unwrap()).collect();
        assert!(losses[49] < losses[0] * 0.7, "{losses:?}");
    }
}
