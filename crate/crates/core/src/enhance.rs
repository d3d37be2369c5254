//! SRCNN-style enhancer trained on `(1 - SSIM) + lambda * |q_max - IACA(y)|`
//! with the quality model frozen.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{crop_patch_at, crop_window, derive_seed, ImageBuffer};
use crate::error::{Error, Result};
use crate::graph::{Bound, Graph, Var};
use crate::iqa::{g_forward, predict_tensor, read_model_files, write_model_files, QualityModel, MIN_INPUT_SIZE};
use crate::metrics::{ssim_planar, SsimConfig};
use crate::params::{uniform_fan_in, Adam, ParamStore};
use crate::tensor::{ConvGeom, Tensor};

pub const ENHANCER_FORMAT_VERSION: u32 = 1;
pub const KERNELS: [usize; 3] = [9, 1, 5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhanceTrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    /// Epoch at which the learning rate is multiplied by `lr_decay_factor`;
    /// defaults to `epochs / 2`.
    #[serde(default)]
    pub decay_epoch: Option<usize>,
    pub crop_size: usize,
    pub batch_size: usize,
    pub widths: [usize; 2],
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub ssim: SsimConfig,
}

impl Default for EnhanceTrainConfig {
    fn default() -> Self {
        EnhanceTrainConfig {
            lambda: 5e-3,
            epochs: 200,
            initial_lr: 1e-4,
            lr_decay_factor: 0.5,
            decay_epoch: None,
            crop_size: 256,
            batch_size: 8,
            widths: [64, 32],
            max_steps: None,
            ssim: SsimConfig::default(),
        }
    }
}

impl EnhanceTrainConfig {
    pub fn decay_epoch(&self) -> usize {
        self.decay_epoch.unwrap_or((self.epochs / 2).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be finite and non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::config("initial_lr", "must be positive"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::config("lr_decay_factor", "must lie in (0, 1]"));
        }
        let d = self.decay_epoch();
        if d == 0 || d > self.epochs {
            return Err(Error::config("decay_epoch", "must lie in 1..=epochs"));
        }
        if self.crop_size < MIN_INPUT_SIZE.max(self.ssim.window) {
            return Err(Error::config(
                "crop_size",
                format!("must be at least {}", MIN_INPUT_SIZE.max(self.ssim.window)),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.widths.contains(&0) {
            return Err(Error::config("widths", "must be positive"));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnhancerArch {
    SrcnnStyle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnhancerManifest {
    pub format_version: u32,
    pub arch: EnhancerArch,
    pub widths: [usize; 2],
    pub lambda: f64,
    pub seed: u64,
    pub config_digest: String,
}

impl EnhancerManifest {
    pub fn parse(json: &str) -> Result<Self> {
        let m: EnhancerManifest = serde_json::from_str(json)?;
        if m.format_version != ENHANCER_FORMAT_VERSION {
            return Err(Error::config("format_version", format!("unsupported {}", m.format_version)));
        }
        if m.widths.contains(&0) {
            return Err(Error::config("widths", "must be positive"));
        }
        if !(m.lambda >= 0.0 && m.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be finite and non-negative"));
        }
        Ok(m)
    }
}

#[derive(Clone, Debug)]
pub struct EnhancerModel {
    pub params: ParamStore,
    pub arch: EnhancerArch,
    pub widths: [usize; 2],
    pub config_digest: String,
    pub lambda: f64,
    pub seed: u64,
}

const OUTPUT_BIAS_INIT: f64 = 0.5;

fn init_params(widths: [usize; 2], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xE4]));
    let chans = [3, widths[0], widths[1], 3];
    let mut store = ParamStore::new();
    for l in 0..3 {
        let (cin, cout, k) = (chans[l], chans[l + 1], KERNELS[l]);
        store.push(format!("conv{}.weight", l + 1), uniform_fan_in(&[cout, cin, k, k], cin * k * k, &mut rng));
        // The last layer starts at mid-gray. SSIM rewards a sign-inverted output
        // as much as the true one, and a zero-mean start lands in that basin for
        // roughly half the channels.
        let bias = if l == 2 { OUTPUT_BIAS_INIT } else { 0.0 };
        store.push(format!("conv{}.bias", l + 1), Tensor::full(&[cout], bias));
    }
    store
}

impl EnhancerModel {
    pub fn new(widths: [usize; 2], seed: u64) -> Self {
        EnhancerModel {
            params: init_params(widths, seed),
            arch: EnhancerArch::SrcnnStyle,
            widths,
            config_digest: String::new(),
            lambda: 0.0,
            seed,
        }
    }

    pub fn manifest(&self) -> EnhancerManifest {
        EnhancerManifest {
            format_version: ENHANCER_FORMAT_VERSION,
            arch: self.arch.clone(),
            widths: self.widths,
            lambda: self.lambda,
            seed: self.seed,
            config_digest: self.config_digest.clone(),
        }
    }

    pub fn from_parts(manifest: EnhancerManifest, blob: &[u8]) -> Result<Self> {
        let params = ParamStore::from_bytes(blob)?;
        init_params(manifest.widths, 0).check_layout(&params)?;
        Ok(EnhancerModel {
            params,
            arch: manifest.arch,
            widths: manifest.widths,
            config_digest: manifest.config_digest,
            lambda: manifest.lambda,
            seed: manifest.seed,
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>, force: bool) -> Result<()> {
        write_model_files(
            dir.as_ref(),
            &self.params.to_bytes(),
            &serde_json::to_string_pretty(&self.manifest())?,
            force,
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (blob, manifest) = read_model_files(dir.as_ref())?;
        Self::from_parts(EnhancerManifest::parse(&manifest)?, &blob)
    }
}

fn g_enhance(g: &mut Graph, x: Var, bound: &Bound) -> Result<Var> {
    let mut y = x;
    for l in 0..3 {
        let geom = ConvGeom::same(KERNELS[l]);
        y = g.conv2d(y, bound.var(2 * l), Some(bound.var(2 * l + 1)), geom)?;
        if l < 2 {
            y = g.relu(y);
        }
    }
    Ok(y)
}

/// Unclamped network output, as used during training.
pub fn enhancer_forward_raw(low: &Tensor, model: &EnhancerModel) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = g.bind(&model.params, false);
    let x = g.input(low.clone(), false);
    let y = g_enhance(&mut g, x, &bound)?;
    Ok(g.value(y).clone())
}

/// Inference output clamped to `[0, 1]`.
pub fn enhancer_forward(low: &ImageBuffer, model: &EnhancerModel) -> Result<ImageBuffer> {
    ImageBuffer::from_tensor_clamped(&enhancer_forward_raw(&low.to_tensor(), model)?)
}

fn fidelity_planar(enhanced: &Tensor, reference: &Tensor, cfg: &SsimConfig) -> Result<f64> {
    if enhanced.shape() != reference.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", enhanced.shape(), reference.shape())));
    }
    let (_, h, w) = enhanced.chw();
    Ok(1.0 - ssim_planar(enhanced.data(), reference.data(), h, w, cfg, false)?.0)
}

/// `1 - SSIM(enhanced, reference)`.
pub fn fidelity_loss(enhanced: &ImageBuffer, reference: &ImageBuffer) -> Result<f64> {
    fidelity_planar(&enhanced.to_tensor(), &reference.to_tensor(), &SsimConfig::default())
}

/// `|q_max - IACA(enhanced)|`.
pub fn quality_loss(enhanced: &ImageBuffer, iqa: &QualityModel) -> Result<f64> {
    let q_max = iqa.q_max()?;
    Ok((q_max - predict_tensor(&enhanced.to_tensor(), iqa)?.score).abs())
}

/// Per-image loss on the unclamped enhancer output.
pub fn combined_loss(
    low: &ImageBuffer,
    reference: &ImageBuffer,
    enhancer: &EnhancerModel,
    iqa: &QualityModel,
    lambda: f64,
) -> Result<f64> {
    let y = enhancer_forward_raw(&low.to_tensor(), enhancer)?;
    let fid = fidelity_planar(&y, &reference.to_tensor(), &SsimConfig::default())?;
    if lambda == 0.0 {
        return Ok(fid);
    }
    let q = (iqa.q_max()? - predict_tensor(&y, iqa)?.score).abs();
    Ok(fid + lambda * q)
}

/// Batch-mean combined loss and its gradient for every enhancer parameter.
/// The quality model is bound without gradients.
pub fn combined_loss_and_grads(
    params: &ParamStore,
    batch: &[(Tensor, Tensor)],
    iqa: &QualityModel,
    lambda: f64,
    ssim_cfg: &SsimConfig,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let q_max = if lambda > 0.0 { iqa.q_max()? } else { 0.0 };
    let mut g = Graph::new();
    let bound = g.bind(params, true);
    let frozen = (lambda > 0.0).then(|| g.bind(&iqa.params, false));
    let mut terms = Vec::with_capacity(batch.len());
    for (low, reference) in batch {
        let x = g.input(low.clone(), false);
        let y = g_enhance(&mut g, x, &bound)?;
        let s = g.ssim(y, reference, ssim_cfg.clone())?;
        let mut term = g.scale(s, -1.0);
        if let Some(frozen) = &frozen {
            let out = g_forward(&mut g, y, iqa.layout(), frozen, &iqa.config)?;
            let q = g.abs_diff(out.score, q_max);
            let q = g.scale(q, lambda);
            term = g.add(term, q)?;
        }
        terms.push(term);
    }
    let cat = g.concat(&terms);
    let loss = g.mean_all(cat);
    // the constant 1 of the fidelity term carries no gradient
    let value = 1.0 + g.value(loss).item();
    let grads = g.backward(loss).for_bound(&bound, params);
    Ok((value, grads))
}

pub fn train_enhancer(
    pairs: &[(ImageBuffer, ImageBuffer)],
    iqa: &QualityModel,
    config: &EnhanceTrainConfig,
    seed: u64,
) -> Result<EnhancerModel> {
    train_enhancer_logged(pairs, iqa, config, seed).map(|(m, _)| m)
}

/// Like [`train_enhancer`], also returning every step's loss.
pub fn train_enhancer_logged(
    pairs: &[(ImageBuffer, ImageBuffer)],
    iqa: &QualityModel,
    config: &EnhanceTrainConfig,
    seed: u64,
) -> Result<(EnhancerModel, Vec<f64>)> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    for (i, (low, reference)) in pairs.iter().enumerate() {
        if (low.height(), low.width()) != (reference.height(), reference.width()) {
            return Err(Error::Shape(format!("pair {i}: low and reference sizes differ")));
        }
    }
    if config.lambda > 0.0 {
        iqa.q_max()?;
    }
    let mut model = EnhancerModel::new(config.widths, seed);
    model.lambda = config.lambda;
    model.config_digest = config.digest();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3]));
    let mut opt = Adam::new(&model.params, config.initial_lr);
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let size = config.crop_size;
    'epochs: for epoch in 0..config.epochs {
        opt.lr = if epoch >= config.decay_epoch() {
            config.initial_lr * config.lr_decay_factor
        } else {
            config.initial_lr
        };
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| losses.len() >= m) {
                break 'epochs;
            }
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (low, reference) = &pairs[i];
                let (patch, (oy, ox)) = crop_patch_at(low, size, rng.random())?;
                batch.push((patch.to_tensor(), crop_window(reference, oy, ox, size, size).to_tensor()));
            }
            let step = losses.len();
            let (loss, grads) = combined_loss_and_grads(&model.params, &batch, iqa, config.lambda, &config.ssim)?;
            if !loss.is_finite() || grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("epoch {epoch}, lr {}, loss {loss}", opt.lr),
                });
            }
            opt.step(&mut model.params, &grads);
            losses.push(loss);
            log::debug!("enhance step {step} epoch {epoch} loss {loss:.6}");
        }
    }
    log::info!("enhancer training finished after {} steps", losses.len());
    Ok((model, losses))
}
