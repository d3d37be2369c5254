//! Illumination-aware, content-adaptive blind quality model.
//!
//! A residual backbone yields two feature maps at strides 16 and 32. For each
//! scale, a Max-RGB luminance map is max-pooled to the map's size, passed
//! through a three-layer convolutional branch and added to the features.
//! Mean-pooled features drive a sigmoid channel attention that re-weights the
//! std-pooled features; each re-weighted vector is encoded by three dense
//! layers and regressed to a per-scale score, and the concatenated encodings
//! give the final score.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{derive_seed, ImageBuffer};
use crate::error::{Error, Result};
use crate::graph::{Bound, Graph, Var};
use crate::params::{uniform_fan_in, ParamStore};
use crate::tensor::{ConvGeom, Tensor};

mod train;

pub use train::{batch_loss_and_grads, train_iqa, train_iqa_logged, IqaTrainHyper, TrainItem};

pub const MODEL_FORMAT_VERSION: u32 = 1;
/// Smallest input side the two-stage backbone accepts.
pub const MIN_INPUT_SIZE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub stage4_channels: usize,
    pub stage5_channels: usize,
    #[serde(default = "stride16")]
    pub stage4_stride: usize,
    #[serde(default = "stride32")]
    pub stage5_stride: usize,
    /// Cardinality of the grouped 3x3 convolutions.
    pub groups: usize,
    #[serde(default)]
    pub pretrained_weights_path: Option<PathBuf>,
}

fn stride16() -> usize {
    16
}

fn stride32() -> usize {
    32
}

impl BackboneConfig {
    pub fn full() -> Self {
        BackboneConfig {
            stage4_channels: 1024,
            stage5_channels: 2048,
            stage4_stride: 16,
            stage5_stride: 32,
            groups: 32,
            pretrained_weights_path: None,
        }
    }

    pub fn tiny() -> Self {
        BackboneConfig {
            stage4_channels: 8,
            stage5_channels: 16,
            groups: 2,
            ..Self::full()
        }
    }

    /// Output widths of the stem and the four strided stages.
    pub fn widths(&self) -> [usize; 5] {
        let c4 = self.stage4_channels;
        [(c4 / 16).max(4), (c4 / 4).max(4), (c4 / 2).max(4), c4, self.stage5_channels]
    }

    fn bottleneck(&self, out: usize) -> usize {
        (out / 2).max(self.groups).div_ceil(self.groups) * self.groups
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage4_channels == 0 {
            return Err(Error::config("backbone.stage4_channels", "must be positive"));
        }
        if self.stage5_channels != 2 * self.stage4_channels {
            return Err(Error::config("backbone.stage5_channels", "must equal 2 x stage4_channels"));
        }
        if self.stage4_stride != 16 || self.stage5_stride != 32 {
            return Err(Error::config("backbone.stride", "strides are fixed at 16 and 32"));
        }
        if self.groups == 0 {
            return Err(Error::config("backbone.groups", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    /// Mean-driven attention over std-pooled features.
    ContentAdaptive,
    StdOnly,
    MeanOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IacaConfig {
    pub backbone: BackboneConfig,
    pub use_multi_scale: bool,
    pub use_illumination: bool,
    pub use_content_adaptation: bool,
    pub pooling_mode: PoolingMode,
    /// Hidden widths of the attention MLP; its last layer matches the scale's channels.
    pub attention_units: [usize; 3],
    pub encoder_units: [usize; 3],
    /// Hidden width of the illumination branch.
    pub illumination_units: usize,
    /// Loss weights for the final, stage-4 and stage-5 scores.
    pub aux_loss_weights: [f64; 3],
    pub input_mean: [f64; 3],
    pub input_std: [f64; 3],
}

impl IacaConfig {
    pub fn full() -> Self {
        IacaConfig {
            backbone: BackboneConfig::full(),
            use_multi_scale: true,
            use_illumination: true,
            use_content_adaptation: true,
            pooling_mode: PoolingMode::ContentAdaptive,
            attention_units: [256, 64, 256],
            encoder_units: [256, 128, 64],
            illumination_units: 32,
            aux_loss_weights: [1.0; 3],
            input_mean: [0.485, 0.456, 0.406],
            input_std: [0.229, 0.224, 0.225],
        }
    }

    pub fn tiny() -> Self {
        IacaConfig {
            backbone: BackboneConfig::tiny(),
            attention_units: [4, 2, 4],
            encoder_units: [8, 8, 8],
            illumination_units: 4,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.attention_units.contains(&0) || self.encoder_units.contains(&0) || self.illumination_units == 0 {
            return Err(Error::config("units", "layer widths must be positive"));
        }
        if self.pooling_mode == PoolingMode::ContentAdaptive && !self.use_content_adaptation {
            return Err(Error::config(
                "pooling_mode",
                "content_adaptive pooling requires use_content_adaptation",
            ));
        }
        if self.input_std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("input_std", "must be positive"));
        }
        if self.aux_loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("aux_loss_weights", "must be finite and non-negative"));
        }
        Ok(())
    }

    fn attends(&self) -> bool {
        self.use_content_adaptation && self.pooling_mode == PoolingMode::ContentAdaptive
    }

    /// Scales feeding the head: `[stage4, stage5]`.
    pub fn active_scales(&self) -> [bool; 2] {
        [self.use_multi_scale, true]
    }

    pub fn scale_channels(&self) -> [usize; 2] {
        [self.backbone.stage4_channels, self.backbone.stage5_channels]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityPrediction {
    pub score: f64,
    /// Stage-4 score; equals `score_s2` when only stage 5 is used.
    pub score_s1: f64,
    pub score_s2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub s1: Tensor,
    pub s2: Tensor,
    pub f_s1_mean: Vec<f64>,
    pub f_s1_std: Vec<f64>,
    pub f_s2_mean: Vec<f64>,
    pub f_s2_std: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Parameter layout

type Layer = (usize, usize);

#[derive(Clone, Debug)]
struct Block {
    reduce: Layer,
    grouped: Layer,
    expand: Layer,
    project: Layer,
}

/// Indices of every layer's weight and bias inside the model's [`ParamStore`].
#[derive(Clone, Debug)]
pub struct IacaLayout {
    stem: Layer,
    blocks: Vec<Block>,
    illumination: [Option<[Layer; 3]>; 2],
    attention: [Option<[Layer; 4]>; 2],
    encoder: [Option<[Layer; 3]>; 2],
    scale_head: [Option<Layer>; 2],
    final_head: Layer,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, cout: usize, cin_g: usize, k: usize) -> Layer {
        let fan_in = cin_g * k * k;
        let w = uniform_fan_in(&[cout, cin_g, k, k], fan_in, self.rng);
        (
            self.store.push(format!("{name}.weight"), w),
            self.store.push(format!("{name}.bias"), Tensor::zeros(&[cout])),
        )
    }

    fn dense(&mut self, name: &str, out: usize, inp: usize) -> Layer {
        let w = uniform_fan_in(&[out, inp], inp, self.rng);
        (
            self.store.push(format!("{name}.weight"), w),
            self.store.push(format!("{name}.bias"), Tensor::zeros(&[out])),
        )
    }
}

impl IacaLayout {
    /// Creates the layout and a freshly initialized parameter store.
    pub fn build(config: &IacaConfig, seed: u64) -> Result<(ParamStore, IacaLayout)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x1ACA]));
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let bc = &config.backbone;
        let widths = bc.widths();
        let stem = b.conv("backbone.stem", widths[0], 3, 3);
        let mut blocks = Vec::new();
        for s in 1..5 {
            let (cin, cout) = (widths[s - 1], widths[s]);
            let mid = bc.bottleneck(cout);
            let p = format!("backbone.stage{}", s + 1);
            blocks.push(Block {
                reduce: b.conv(&format!("{p}.reduce"), mid, cin, 1),
                grouped: b.conv(&format!("{p}.grouped"), mid, mid / bc.groups, 3),
                expand: b.conv(&format!("{p}.expand"), cout, mid, 1),
                project: b.conv(&format!("{p}.project"), cout, cin, 1),
            });
        }
        let mut illumination = [None, None];
        let mut attention = [None, None];
        let mut encoder = [None, None];
        let mut scale_head = [None, None];
        let channels = config.scale_channels();
        let iu = config.illumination_units;
        let [a1, a2, a3] = config.attention_units;
        let [e1, e2, e3] = config.encoder_units;
        for (k, active) in config.active_scales().into_iter().enumerate() {
            if !active {
                continue;
            }
            let c = channels[k];
            let p = format!("s{}", k + 1);
            if config.use_illumination {
                illumination[k] = Some([
                    b.conv(&format!("{p}.illum.0"), iu, 1, 3),
                    b.conv(&format!("{p}.illum.1"), iu, iu, 3),
                    b.conv(&format!("{p}.illum.2"), c, iu, 3),
                ]);
            }
            if config.attends() {
                attention[k] = Some([
                    b.dense(&format!("{p}.attn.0"), a1, c),
                    b.dense(&format!("{p}.attn.1"), a2, a1),
                    b.dense(&format!("{p}.attn.2"), a3, a2),
                    b.dense(&format!("{p}.attn.3"), c, a3),
                ]);
            }
            encoder[k] = Some([
                b.dense(&format!("{p}.enc.0"), e1, c),
                b.dense(&format!("{p}.enc.1"), e2, e1),
                b.dense(&format!("{p}.enc.2"), e3, e2),
            ]);
            scale_head[k] = Some(b.dense(&format!("{p}.head"), 1, e3));
        }
        let n_active = config.active_scales().iter().filter(|a| **a).count();
        let final_head = b.dense("head", 1, e3 * n_active);
        let store = b.store;
        Ok((
            store,
            IacaLayout {
                stem,
                blocks,
                illumination,
                attention,
                encoder,
                scale_head,
                final_head,
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// Graph construction

struct P<'b> {
    bound: &'b Bound,
}

impl P<'_> {
    fn l(&self, layer: Layer) -> (Var, Var) {
        (self.bound.var(layer.0), self.bound.var(layer.1))
    }
}

fn conv(g: &mut Graph, x: Var, layer: (Var, Var), geom: ConvGeom) -> Result<Var> {
    g.conv2d(x, layer.0, Some(layer.1), geom)
}

const POINTWISE: ConvGeom = ConvGeom {
    stride: 1,
    pad: 0,
    groups: 1,
};

fn residual_block(g: &mut Graph, x: Var, p: &P, block: &Block, groups: usize) -> Result<Var> {
    let a = conv(g, x, p.l(block.reduce), POINTWISE)?;
    let a = g.relu(a);
    let b = conv(
        g,
        a,
        p.l(block.grouped),
        ConvGeom {
            stride: 2,
            pad: 1,
            groups,
        },
    )?;
    let b = g.relu(b);
    let c = conv(g, b, p.l(block.expand), POINTWISE)?;
    let s = conv(
        g,
        x,
        p.l(block.project),
        ConvGeom {
            stride: 2,
            pad: 0,
            groups: 1,
        },
    )?;
    let sum = g.add(c, s)?;
    Ok(g.relu(sum))
}

/// Three 3x3 convolutions with rectifiers after the first two.
pub(crate) fn g_illumination(g: &mut Graph, pooled: Var, layers: &[(Var, Var); 3]) -> Result<Var> {
    let mut x = pooled;
    for (i, &layer) in layers.iter().enumerate() {
        x = conv(g, x, layer, ConvGeom::same(3))?;
        if i < 2 {
            x = g.relu(x);
        }
    }
    Ok(x)
}

/// Four dense layers, rectifiers after the first three and a sigmoid last.
pub(crate) fn g_attention(g: &mut Graph, mean: Var, layers: &[(Var, Var); 4]) -> Result<Var> {
    let mut x = mean;
    for (i, &(w, b)) in layers.iter().enumerate() {
        x = g.linear(x, w, b)?;
        x = if i < 3 { g.relu(x) } else { g.sigmoid(x) };
    }
    Ok(x)
}

fn g_encoder(g: &mut Graph, v: Var, layers: &[(Var, Var); 3]) -> Result<Var> {
    let mut x = v;
    for &(w, b) in layers {
        x = g.linear(x, w, b)?;
        x = g.relu(x);
    }
    Ok(x)
}

pub(crate) struct ScaleVars {
    pub map: Var,
    pub mean: Var,
    pub std: Var,
}

pub(crate) struct NetVars {
    pub score: Var,
    pub score_s1: Var,
    pub score_s2: Var,
}

fn g_features(g: &mut Graph, image: Var, layout: &IacaLayout, p: &P, config: &IacaConfig) -> Result<[Option<ScaleVars>; 2]> {
    let (_, h, w) = g.value(image).chw();
    if h < MIN_INPUT_SIZE || w < MIN_INPUT_SIZE {
        return Err(Error::TooSmall {
            height: h,
            width: w,
            min: MIN_INPUT_SIZE,
        });
    }
    let scale: Vec<f64> = config.input_std.iter().map(|s| 1.0 / s).collect();
    let shift: Vec<f64> = config.input_mean.iter().zip(&config.input_std).map(|(m, s)| -m / s).collect();
    let x = g.channel_affine(image, &scale, &shift)?;
    let x = conv(
        g,
        x,
        p.l(layout.stem),
        ConvGeom {
            stride: 2,
            pad: 1,
            groups: 1,
        },
    )?;
    let mut x = g.relu(x);
    let mut maps = Vec::new();
    for block in &layout.blocks {
        x = residual_block(g, x, p, block, config.backbone.groups)?;
        maps.push(x);
    }
    let raw = [maps[2], maps[3]];
    let lum = if config.use_illumination {
        Some(g.max_rgb(image)?)
    } else {
        None
    };
    let mut out = [None, None];
    for k in 0..2 {
        if !config.active_scales()[k] {
            continue;
        }
        let mut map = raw[k];
        if let (Some(lum), Some(layers)) = (lum, layout.illumination[k]) {
            let (_, fh, fw) = g.value(map).chw();
            let pooled = g.adaptive_max_pool(lum, fh, fw)?;
            let vars = [p.l(layers[0]), p.l(layers[1]), p.l(layers[2])];
            let illum = g_illumination(g, pooled, &vars)?;
            map = g.add(map, illum)?;
        }
        let mean = g.spatial_mean(map);
        let std = g.spatial_std(map);
        out[k] = Some(ScaleVars { map, mean, std });
    }
    Ok(out)
}

/// Head over pooled statistics: `stats[k] = (mean, std)` for active scales.
fn g_head(g: &mut Graph, stats: [Option<(Var, Var)>; 2], layout: &IacaLayout, p: &P, config: &IacaConfig) -> Result<(Var, Var, Var)> {
    let mut encoded = Vec::new();
    let mut scale_scores = [None, None];
    for k in 0..2 {
        let Some((mean, std)) = stats[k] else { continue };
        let pooled = match config.pooling_mode {
            PoolingMode::MeanOnly => mean,
            PoolingMode::StdOnly => std,
            PoolingMode::ContentAdaptive => {
                let layers = layout.attention[k].expect("attention layers exist when attending");
                let vars = [p.l(layers[0]), p.l(layers[1]), p.l(layers[2]), p.l(layers[3])];
                let att = g_attention(g, mean, &vars)?;
                g.mul(att, std)?
            }
        };
        let enc_layers = layout.encoder[k].expect("encoder exists for active scale");
        let enc = g_encoder(g, pooled, &[p.l(enc_layers[0]), p.l(enc_layers[1]), p.l(enc_layers[2])])?;
        let (hw, hb) = p.l(layout.scale_head[k].expect("head exists for active scale"));
        scale_scores[k] = Some(g.linear(enc, hw, hb)?);
        encoded.push(enc);
    }
    let cat = g.concat(&encoded);
    let (fw, fb) = p.l(layout.final_head);
    let score = g.linear(cat, fw, fb)?;
    let s2 = scale_scores[1].expect("stage 5 is always active");
    let s1 = scale_scores[0].unwrap_or(s2);
    Ok((score, s1, s2))
}

pub(crate) fn g_forward(g: &mut Graph, image: Var, layout: &IacaLayout, bound: &Bound, config: &IacaConfig) -> Result<NetVars> {
    let p = P { bound };
    let scales = g_features(g, image, layout, &p, config)?;
    let stats = [
        scales[0].as_ref().map(|s| (s.mean, s.std)),
        scales[1].as_ref().map(|s| (s.mean, s.std)),
    ];
    let (score, score_s1, score_s2) = g_head(g, stats, layout, &p, config)?;
    Ok(NetVars {
        score,
        score_s1,
        score_s2,
    })
}

// ---------------------------------------------------------------------------
// Model

#[derive(Clone, Debug)]
pub struct QualityModel {
    pub params: ParamStore,
    pub config: IacaConfig,
    pub q_max: Option<f64>,
    pub train_split_digest: String,
    pub seed: u64,
    layout: IacaLayout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub format_version: u32,
    pub config: IacaConfig,
    pub q_max: Option<f64>,
    pub seed: u64,
    pub train_split_digest: String,
}

impl ModelManifest {
    pub fn parse(json: &str) -> Result<Self> {
        let m: ModelManifest = serde_json::from_str(json)?;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::config("format_version", format!("unsupported {}", m.format_version)));
        }
        if m.q_max.is_some_and(|q| !q.is_finite()) {
            return Err(Error::config("q_max", "must be finite"));
        }
        m.config.validate()?;
        Ok(m)
    }
}

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "model.json";

impl QualityModel {
    /// Freshly initialized model; optionally seeds backbone tensors from
    /// `config.backbone.pretrained_weights_path`.
    pub fn new(config: IacaConfig, seed: u64) -> Result<Self> {
        let (mut params, layout) = IacaLayout::build(&config, seed)?;
        if let Some(path) = &config.backbone.pretrained_weights_path {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let pretrained = ParamStore::from_bytes(&bytes)?;
            let mut loaded = 0;
            for i in 0..params.len() {
                let name = params.name(i).to_string();
                if !name.starts_with("backbone.") {
                    continue;
                }
                let j = pretrained
                    .index_of(&name)
                    .ok_or_else(|| Error::Blob(format!("pretrained weights lack `{name}`")))?;
                if pretrained.get(j).shape() != params.get(i).shape() {
                    return Err(Error::Blob(format!(
                        "pretrained `{name}` has shape {:?}, expected {:?}",
                        pretrained.get(j).shape(),
                        params.get(i).shape()
                    )));
                }
                *params.get_mut(i) = pretrained.get(j).clone();
                loaded += 1;
            }
            log::info!("loaded {loaded} pretrained backbone tensors from {}", path.display());
        }
        Ok(QualityModel {
            params,
            config,
            q_max: None,
            train_split_digest: String::new(),
            seed,
            layout,
        })
    }

    /// Reassembles a model from a parameter blob and its manifest.
    pub fn from_parts(manifest: ModelManifest, blob: &[u8]) -> Result<Self> {
        let (template, layout) = IacaLayout::build(&manifest.config, manifest.seed)?;
        let params = ParamStore::from_bytes(blob)?;
        template.check_layout(&params)?;
        Ok(QualityModel {
            params,
            config: manifest.config,
            q_max: manifest.q_max,
            train_split_digest: manifest.train_split_digest,
            seed: manifest.seed,
            layout,
        })
    }

    pub fn layout(&self) -> &IacaLayout {
        &self.layout
    }

    pub fn manifest(&self) -> ModelManifest {
        ModelManifest {
            format_version: MODEL_FORMAT_VERSION,
            config: self.config.clone(),
            q_max: self.q_max,
            seed: self.seed,
            train_split_digest: self.train_split_digest.clone(),
        }
    }

    /// Writes `params.bin` and `model.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, force: bool) -> Result<()> {
        let dir = dir.as_ref();
        write_model_files(dir, &self.params.to_bytes(), &serde_json::to_string_pretty(&self.manifest())?, force)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let (blob, manifest) = read_model_files(dir)?;
        Self::from_parts(ModelManifest::parse(&manifest)?, &blob)
    }

    pub fn q_max(&self) -> Result<f64> {
        self.q_max
            .ok_or_else(|| Error::InvalidArgument("quality model has no q_max; train it first".into()))
    }
}

pub(crate) fn write_model_files(dir: &Path, blob: &[u8], manifest: &str, force: bool) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params = dir.join(PARAMS_FILE);
    let man = dir.join(MANIFEST_FILE);
    if !force && (params.exists() || man.exists()) {
        return Err(Error::InvalidArgument(format!(
            "{} already holds a model; pass --force to overwrite",
            dir.display()
        )));
    }
    std::fs::write(&params, blob).map_err(|e| Error::io(&params, e))?;
    std::fs::write(&man, format!("{manifest}\n")).map_err(|e| Error::io(&man, e))
}

pub(crate) fn read_model_files(dir: &Path) -> Result<(Vec<u8>, String)> {
    let params = dir.join(PARAMS_FILE);
    let man = dir.join(MANIFEST_FILE);
    let blob = std::fs::read(&params).map_err(|e| Error::io(&params, e))?;
    let text = std::fs::read_to_string(&man).map_err(|e| Error::io(&man, e))?;
    Ok((blob, text))
}

// ---------------------------------------------------------------------------
// Component operations

/// Per-pixel maximum over R, G and B, shape `(1, H, W)`.
pub fn max_rgb(image: &ImageBuffer) -> Tensor {
    let mut g = Graph::new();
    let x = g.input(image.to_tensor(), false);
    let v = g.max_rgb(x).expect("ImageBuffer has three channels");
    g.value(v).clone()
}

/// Max-pools a `(C, H, W)` map to exactly `target_h x target_w`.
pub fn pool_luminance(lum: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(lum.clone(), false);
    let v = g.adaptive_max_pool(x, target_h, target_w)?;
    Ok(g.value(v).clone())
}

/// Borrowed weight and bias of one layer.
#[derive(Clone, Copy)]
pub struct LayerRef<'a> {
    pub weight: &'a Tensor,
    pub bias: &'a Tensor,
}

fn bind_layers<'a, const N: usize>(g: &mut Graph<'a>, layers: &[LayerRef<'a>; N]) -> [(Var, Var); N] {
    layers.map(|l| (g.borrowed(l.weight, false), g.borrowed(l.bias, false)))
}

pub fn illumination_branch(pooled: &Tensor, layers: &[LayerRef; 3]) -> Result<Tensor> {
    let out_channels = layers[2].weight.shape().first().copied().unwrap_or(0);
    let mut g = Graph::new();
    let x = g.input(pooled.clone(), false);
    let vars = bind_layers(&mut g, layers);
    let v = g_illumination(&mut g, x, &vars)?;
    debug_assert_eq!(g.value(v).chw().0, out_channels);
    Ok(g.value(v).clone())
}

/// Element-wise sum of backbone and illumination features.
pub fn merge_features(backbone: &Tensor, illumination: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let a = g.input(backbone.clone(), false);
    let b = g.input(illumination.clone(), false);
    let v = g.add(a, b)?;
    Ok(g.value(v).clone())
}

pub fn content_attention(mean: &[f64], layers: &[LayerRef; 4]) -> Result<Vec<f64>> {
    let expected = layers[0].weight.shape().get(1).copied().unwrap_or(0);
    if mean.len() != expected {
        return Err(Error::Shape(format!("attention expects {expected} channels, got {}", mean.len())));
    }
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(mean.to_vec()), false);
    let vars = bind_layers(&mut g, layers);
    let v = g_attention(&mut g, x, &vars)?;
    Ok(g.value(v).data().to_vec())
}

impl QualityModel {
    fn layer(&self, l: Layer) -> LayerRef<'_> {
        LayerRef {
            weight: self.params.get(l.0),
            bias: self.params.get(l.1),
        }
    }

    /// Illumination branch layers of scale `k` (0 = stage 4, 1 = stage 5).
    pub fn illumination_layers(&self, k: usize) -> Option<[LayerRef<'_>; 3]> {
        self.layout.illumination[k].map(|ls| ls.map(|l| self.layer(l)))
    }

    pub fn attention_layers(&self, k: usize) -> Option<[LayerRef<'_>; 4]> {
        self.layout.attention[k].map(|ls| ls.map(|l| self.layer(l)))
    }

    pub fn encoder_layers(&self, k: usize) -> Option<[LayerRef<'_>; 3]> {
        self.layout.encoder[k].map(|ls| ls.map(|l| self.layer(l)))
    }

    pub fn scale_head_layer(&self, k: usize) -> Option<LayerRef<'_>> {
        self.layout.scale_head[k].map(|l| self.layer(l))
    }

    pub fn final_head_layer(&self) -> LayerRef<'_> {
        self.layer(self.layout.final_head)
    }
}

/// Stage-4/5 maps (illumination-merged when enabled) and their pooled statistics.
///
/// With `use_multi_scale` off, the stage-4 entries are empty.
pub fn backbone_forward(image: &ImageBuffer, model: &QualityModel) -> Result<FeatureBundle> {
    let mut g = Graph::new();
    let bound = g.bind(&model.params, false);
    let x = g.input(image.to_tensor(), false);
    let p = P { bound: &bound };
    let scales = g_features(&mut g, x, &model.layout, &p, &model.config)?;
    let take = |k: usize, g: &Graph| -> (Tensor, Vec<f64>, Vec<f64>) {
        match &scales[k] {
            Some(s) => (
                g.value(s.map).clone(),
                g.value(s.mean).data().to_vec(),
                g.value(s.std).data().to_vec(),
            ),
            None => (Tensor::zeros(&[0, 0, 0]), Vec::new(), Vec::new()),
        }
    };
    let (s1, f_s1_mean, f_s1_std) = take(0, &g);
    let (s2, f_s2_mean, f_s2_std) = take(1, &g);
    Ok(FeatureBundle {
        s1,
        s2,
        f_s1_mean,
        f_s1_std,
        f_s2_mean,
        f_s2_std,
    })
}

/// Scores pooled statistics with the model's attention, encoders and heads.
pub fn quality_head(bundle: &FeatureBundle, model: &QualityModel) -> Result<QualityPrediction> {
    let cfg = &model.config;
    let channels = cfg.scale_channels();
    let mut g = Graph::new();
    let bound = g.bind(&model.params, false);
    let vecs = [(&bundle.f_s1_mean, &bundle.f_s1_std), (&bundle.f_s2_mean, &bundle.f_s2_std)];
    let mut stats = [None, None];
    for k in 0..2 {
        if !cfg.active_scales()[k] {
            continue;
        }
        let (mean, std) = vecs[k];
        if mean.len() != channels[k] || std.len() != channels[k] {
            return Err(Error::Shape(format!(
                "scale {} statistics have lengths {}/{}, model expects {}",
                k + 1,
                mean.len(),
                std.len(),
                channels[k]
            )));
        }
        let m = g.input(Tensor::vector(mean.clone()), false);
        let s = g.input(Tensor::vector(std.clone()), false);
        stats[k] = Some((m, s));
    }
    let (score, s1, s2) = g_head(&mut g, stats, &model.layout, &P { bound: &bound }, cfg)?;
    Ok(QualityPrediction {
        score: g.value(score).item(),
        score_s1: g.value(s1).item(),
        score_s2: g.value(s2).item(),
    })
}

/// `|| p' - t' ||` with `p' = (p - mean p) / (||p - mean p|| + 1e-8)`, `t'` likewise.
pub fn norm_in_norm_loss(preds: &[f64], targets: &[f64]) -> Result<f64> {
    crate::graph::norm_in_norm_value(preds, targets)
}

/// Full forward pass on one image at its native size.
pub fn iaca_forward(image: &ImageBuffer, model: &QualityModel) -> Result<QualityPrediction> {
    predict_tensor(&image.to_tensor(), model)
}

/// Like [`iaca_forward`] but on an unconstrained `(3, H, W)` tensor.
pub fn predict_tensor(image: &Tensor, model: &QualityModel) -> Result<QualityPrediction> {
    let mut g = Graph::new();
    let bound = g.bind(&model.params, false);
    let x = g.input(image.clone(), false);
    let out = g_forward(&mut g, x, &model.layout, &bound, &model.config)?;
    let pred = QualityPrediction {
        score: g.value(out.score).item(),
        score_s1: g.value(out.score_s1).item(),
        score_s2: g.value(out.score_s2).item(),
    };
    if ![pred.score, pred.score_s1, pred.score_s2].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step: 0,
            detail: "non-finite quality prediction".into(),
        });
    }
    Ok(pred)
}

#[cfg(test)]
mod tests;
