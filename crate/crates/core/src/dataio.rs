//! Image IO, the synthetic degradation corpus, content-disjoint splits and
//! random patch cropping.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer as RawImage, Rgb};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An RGB image with values in `[0, 1]`, stored as three planes (R, G, B).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    planes: Vec<f64>,
}

impl ImageBuffer {
    /// Builds an image from planar `R, G, B` data.
    pub fn from_planar(height: usize, width: usize, planes: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!("empty image {height}x{width}")));
        }
        if planes.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                3 * height * width,
                planes.len()
            )));
        }
        if let Some(v) = planes.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [0,1]")));
        }
        Ok(ImageBuffer {
            height,
            width,
            planes,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut planes = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    planes.push(f(y, x, c));
                }
            }
        }
        Self::from_planar(height, width, planes)
    }

    /// Clamps each value into `[0, 1]`; used for network outputs at inference.
    pub fn from_tensor_clamped(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.chw();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let planes = t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::from_planar(h, w, planes)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.planes[(c * self.height + y) * self.width + x]
    }

    pub fn planes(&self) -> &[f64] {
        &self.planes
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.planes[c * n..(c + 1) * n]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[3, self.height, self.width], self.planes.clone()).unwrap()
    }

    pub fn max_abs_diff(&self, other: &ImageBuffer) -> f64 {
        self.planes
            .iter()
            .zip(&other.planes)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn to_rgb8(&self) -> RawImage<Rgb<u8>, Vec<u8>> {
        RawImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| quantize(self.get(y as usize, x as usize, c));
            Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Decode(e.to_string()))?;
        Ok(out.into_inner())
    }
}

/// `[0,1]` to 8-bit, rounding half away from zero.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn from_dynamic(img: DynamicImage) -> std::result::Result<ImageBuffer, String> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageRgb8(buf) => {
            ImageBuffer::from_fn(h, w, |y, x, c| buf.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
                .map_err(|e| e.to_string())
        }
        DynamicImage::ImageRgb16(buf) => {
            ImageBuffer::from_fn(h, w, |y, x, c| buf.get_pixel(x as u32, y as u32)[c] as f64 / 65535.0)
                .map_err(|e| e.to_string())
        }
        other => Err(format!(
            "expected 8- or 16-bit RGB, found {:?} with {} channels",
            other.color(),
            other.color().channel_count()
        )),
    }
}

/// Decodes an in-memory PNG (or JPEG) into an [`ImageBuffer`].
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Decode(e.to_string()))?;
    from_dynamic(img).map_err(Error::Decode)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::UnsupportedImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    from_dynamic(img).map_err(|reason| Error::UnsupportedImage {
        path: path.to_path_buf(),
        reason,
    })
}

/// Writes an 8-bit RGB PNG without alpha.
pub fn save_png(image: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bytes = image.encode_png()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Degradations

/// One degradation recipe standing in for an enhancement method.
///
/// Steps run in field order (gamma, gains, contrast, exposure, blur, noise)
/// and every step clips to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub method_id: String,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub blur_sigma: f64,
    #[serde(default = "unit_gains")]
    pub gains: [f64; 3],
    /// Scale of the deviation from mid-grey.
    #[serde(default = "one")]
    pub contrast: f64,
    /// Additive exposure offset.
    #[serde(default)]
    pub exposure: f64,
}

fn one() -> f64 {
    1.0
}

fn unit_gains() -> [f64; 3] {
    [1.0; 3]
}

impl Recipe {
    pub fn identity(method_id: impl Into<String>) -> Self {
        Recipe {
            method_id: method_id.into(),
            gamma: 1.0,
            noise_sigma: 0.0,
            blur_sigma: 0.0,
            gains: [1.0; 3],
            contrast: 1.0,
            exposure: 0.0,
        }
    }

    fn validate(&self, field: &str, gamma_range: (f64, f64)) -> Result<()> {
        let check = |name: &str, v: f64, lo: f64, hi: f64| {
            if v.is_finite() && (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{field}.{name}"), format!("{v} not in [{lo}, {hi}]")))
            }
        };
        if self.method_id.is_empty() || self.method_id.contains(['/', '\\']) || self.method_id == ".." {
            return Err(Error::config(format!("{field}.method_id"), "must be a plain non-empty name"));
        }
        check("gamma", self.gamma, gamma_range.0, gamma_range.1)?;
        check("noise_sigma", self.noise_sigma, 0.0, 0.1)?;
        check("blur_sigma", self.blur_sigma, 0.0, 2.0)?;
        for g in self.gains {
            check("gains", g, 0.7, 1.3)?;
        }
        check("contrast", self.contrast, 0.3, 1.5)?;
        check("exposure", self.exposure, -0.5, 0.5)
    }
}

pub const RECIPE_GAMMA_RANGE: (f64, f64) = (0.25, 4.0);
pub const LOW_LIGHT_GAMMA_RANGE: (f64, f64) = (1.5, 4.0);

/// Applies `recipe` to `image`; `rng` feeds the additive noise.
pub fn apply_recipe(image: &ImageBuffer, recipe: &Recipe, rng: &mut ChaCha8Rng) -> ImageBuffer {
    let (h, w) = (image.height, image.width);
    let n = h * w;
    let mut p = image.planes.clone();
    let clip = |v: f64| v.clamp(0.0, 1.0);
    if recipe.gamma != 1.0 {
        p.iter_mut().for_each(|v| *v = clip(v.powf(recipe.gamma)));
    }
    for (c, plane) in p.chunks_mut(n).enumerate() {
        if recipe.gains[c] != 1.0 {
            plane.iter_mut().for_each(|v| *v = clip(*v * recipe.gains[c]));
        }
    }
    if recipe.contrast != 1.0 {
        p.iter_mut().for_each(|v| *v = clip(0.5 + (*v - 0.5) * recipe.contrast));
    }
    if recipe.exposure != 0.0 {
        p.iter_mut().for_each(|v| *v = clip(*v + recipe.exposure));
    }
    if recipe.blur_sigma > 0.0 {
        let kernel = gaussian_kernel(recipe.blur_sigma);
        for plane in p.chunks_mut(n) {
            let blurred = blur_plane(plane, h, w, &kernel);
            for (d, s) in plane.iter_mut().zip(blurred) {
                *d = clip(s);
            }
        }
    }
    if recipe.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, recipe.noise_sigma).unwrap();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let i = c * n + y * w + x;
                    p[i] = clip(p[i] + normal.sample(rng));
                }
            }
        }
    }
    ImageBuffer {
        height: h,
        width: w,
        planes: p,
    }
}

/// Normalized 1-D Gaussian with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable blur with clamp-to-edge borders.
fn blur_plane(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| {
                    let xx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                    kv * plane[y * w + xx]
                })
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| {
                    let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                    kv * tmp[yy * w + x]
                })
                .sum();
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationConfig {
    #[serde(default = "format_v1")]
    pub format_version: u32,
    /// Darkening applied to the reference to produce the low-light input.
    pub low_light: Recipe,
    /// Pseudo-enhanced variants, one per "method".
    pub recipes: Vec<Recipe>,
}

pub(crate) fn format_v1() -> u32 {
    1
}

pub const LOW_LIGHT_METHOD: &str = "low_light";

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != 1 {
            return Err(Error::config("format_version", format!("unsupported {}", self.format_version)));
        }
        self.low_light.validate("low_light", LOW_LIGHT_GAMMA_RANGE)?;
        if self.recipes.is_empty() {
            return Err(Error::config("recipes", "at least one recipe required"));
        }
        let mut seen = BTreeSet::new();
        for (i, r) in self.recipes.iter().enumerate() {
            r.validate(&format!("recipes[{i}]"), RECIPE_GAMMA_RANGE)?;
            if r.method_id == LOW_LIGHT_METHOD || !seen.insert(r.method_id.as_str()) {
                return Err(Error::config(
                    format!("recipes[{i}].method_id"),
                    format!("`{}` is reserved or duplicated", r.method_id),
                ));
            }
        }
        Ok(())
    }

    /// Six recipes spanning noise, blur, exposure, contrast and colour shift.
    pub fn default_recipes() -> Self {
        let r = |id: &str| Recipe::identity(id);
        DegradationConfig {
            format_version: 1,
            low_light: Recipe {
                gamma: 2.5,
                noise_sigma: 0.02,
                ..r(LOW_LIGHT_METHOD)
            },
            recipes: vec![
                Recipe {
                    noise_sigma: 0.01,
                    ..r("mild")
                },
                Recipe {
                    noise_sigma: 0.08,
                    ..r("noisy")
                },
                Recipe {
                    blur_sigma: 1.5,
                    noise_sigma: 0.02,
                    ..r("blurry")
                },
                Recipe {
                    gamma: 0.5,
                    exposure: 0.15,
                    ..r("overexposed")
                },
                Recipe {
                    gamma: 1.8,
                    contrast: 0.6,
                    ..r("dim_flat")
                },
                Recipe {
                    gains: [1.25, 0.95, 0.75],
                    contrast: 0.8,
                    noise_sigma: 0.03,
                    ..r("color_cast")
                },
            ],
        }
    }
}

// ---------------------------------------------------------------------------
// Corpus manifest

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Reference,
    LowLight,
    Enhanced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub content_id: String,
    pub role: Role,
    pub method_id: Option<String>,
    /// Relative to the manifest's directory.
    pub path: String,
    pub degradation_params: Option<Recipe>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
}

impl CorpusManifest {
    pub fn validate(&self) -> Result<()> {
        let mut keys = BTreeSet::new();
        let mut references = BTreeSet::new();
        for e in &self.entries {
            if !keys.insert((e.content_id.as_str(), e.method_id.as_deref())) {
                return Err(Error::Malformed(format!(
                    "duplicate entry ({}, {:?})",
                    e.content_id, e.method_id
                )));
            }
            if Path::new(&e.path).is_absolute() || e.path.split(['/', '\\']).any(|s| s == "..") {
                return Err(Error::Malformed(format!("path `{}` escapes the corpus directory", e.path)));
            }
            if e.role == Role::Reference {
                references.insert(e.content_id.as_str());
            }
        }
        for e in &self.entries {
            if e.role != Role::Reference && !references.contains(e.content_id.as_str()) {
                return Err(Error::MissingReference(e.content_id.clone()));
            }
        }
        Ok(())
    }

    pub fn parse(json: &str) -> Result<Self> {
        let m: CorpusManifest = serde_json::from_str(json)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Sorted distinct content ids.
    pub fn content_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.entries.iter().map(|e| e.content_id.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn reference(&self, content_id: &str) -> Option<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.content_id == content_id && e.role == Role::Reference)
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.role == role)
    }

    /// Pseudo-enhanced entries grouped by content id.
    pub fn enhanced_by_content(&self) -> BTreeMap<&str, Vec<&ManifestEntry>> {
        let mut map: BTreeMap<&str, Vec<&ManifestEntry>> = BTreeMap::new();
        for e in self.with_role(Role::Enhanced) {
            map.entry(&e.content_id).or_default().push(e);
        }
        map
    }
}

/// SplitMix64-style mixing of a base seed with a stream index.
pub fn derive_seed(seed: u64, stream: &[u64]) -> u64 {
    let mut z = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &s in stream {
        z = z.wrapping_add(s.wrapping_mul(0xBF58_476D_1CE4_E5B9)).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

pub fn content_id(index: usize) -> String {
    format!("c{index:04}")
}

/// Renders every base image's reference, low-light and pseudo-enhanced
/// variants under `out_dir` and returns the manifest describing them.
pub fn generate_degraded_corpus(
    base_images: &[ImageBuffer],
    config: &DegradationConfig,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<CorpusManifest> {
    let out_dir = out_dir.as_ref();
    if base_images.is_empty() {
        return Err(Error::InvalidArgument("empty base image set".into()));
    }
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let per_content: Vec<Result<Vec<ManifestEntry>>> = base_images
        .par_iter()
        .enumerate()
        .map(|(ci, base)| {
            let cid = content_id(ci);
            let mut entries = Vec::with_capacity(config.recipes.len() + 2);
            let mut emit = |role, recipe: Option<&Recipe>, img: &ImageBuffer| -> Result<()> {
                let method = recipe.map(|r| r.method_id.clone());
                let rel = format!("{cid}/{}.png", method.as_deref().unwrap_or("reference"));
                save_png(img, out_dir.join(&rel))?;
                entries.push(ManifestEntry {
                    content_id: cid.clone(),
                    role,
                    method_id: method,
                    path: rel,
                    degradation_params: recipe.cloned(),
                });
                Ok(())
            };
            emit(Role::Reference, None, base)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[ci as u64, 0]));
            emit(
                Role::LowLight,
                Some(&config.low_light),
                &apply_recipe(base, &config.low_light, &mut rng),
            )?;
            for (ri, recipe) in config.recipes.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[ci as u64, ri as u64 + 1]));
                emit(Role::Enhanced, Some(recipe), &apply_recipe(base, recipe, &mut rng))?;
            }
            Ok(entries)
        })
        .collect();

    let mut entries = Vec::new();
    for chunk in per_content {
        entries.extend(chunk?);
    }
    let manifest = CorpusManifest { entries, seed };
    manifest.validate()?;
    Ok(manifest)
}

/// Procedural stand-ins for natural scenes: a two-colour gradient, a few
/// flat shapes and a sinusoidal texture. Values stay within `[0.05, 0.95]`.
pub fn synth_base_images(count: usize, height: usize, width: usize, seed: u64) -> Result<Vec<ImageBuffer>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xBA5E, i as u64]));
            let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
            let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (dy, dx) = angle.sin_cos();
            let shapes: Vec<(f64, f64, f64, [f64; 3], bool)> = (0..rng.random_range(2..6))
                .map(|_| {
                    (
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.08..0.3),
                        std::array::from_fn(|_| rng.random_range(0.05..0.95)),
                        rng.random_bool(0.5),
                    )
                })
                .collect();
            let freq = rng.random_range(4.0..16.0);
            let amp = rng.random_range(0.02..0.12);
            ImageBuffer::from_fn(height, width, |y, x, c| {
                let (u, v) = (y as f64 / height as f64, x as f64 / width as f64);
                let t = ((u - 0.5) * dy + (v - 0.5) * dx + 0.5).clamp(0.0, 1.0);
                let mut val = c0[c] * (1.0 - t) + c1[c] * t;
                for &(cy, cx, r, col, round) in &shapes {
                    let inside = if round {
                        (u - cy).powi(2) + (v - cx).powi(2) < r * r
                    } else {
                        (u - cy).abs() < r && (v - cx).abs() < r * 0.7
                    };
                    if inside {
                        val = col[c];
                    }
                }
                val += amp * (freq * std::f64::consts::TAU * (u + 0.7 * v)).sin();
                val.clamp(0.05, 0.95)
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Splits and crops

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_content_ids: BTreeSet<String>,
    pub test_content_ids: BTreeSet<String>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(id) = self.train_content_ids.intersection(&self.test_content_ids).next() {
            return Err(Error::Malformed(format!("content `{id}` is on both sides of the split")));
        }
        Ok(())
    }

    pub fn parse(json: &str) -> Result<Self> {
        let s: SplitSpec = serde_json::from_str(json)?;
        s.validate()?;
        Ok(s)
    }

    /// Writes sorted id arrays.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// SHA-256 over the sorted training content ids.
    pub fn train_digest(&self) -> String {
        digest_ids(self.train_content_ids.iter().map(String::as_str))
    }
}

pub fn digest_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> String {
    use sha2::{Digest, Sha256};
    let mut sorted: Vec<&str> = ids.into_iter().collect();
    sorted.sort_unstable();
    let mut h = Sha256::new();
    for id in sorted {
        h.update(id.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

pub fn split_by_content(manifest: &CorpusManifest, test_fraction: f64, seed: u64) -> Result<SplitSpec> {
    let mut ids = manifest.content_ids();
    if ids.is_empty() {
        return Err(Error::InvalidArgument("empty manifest".into()));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("test fraction {test_fraction} not in (0,1)")));
    }
    let n_test = (test_fraction * ids.len() as f64).round() as usize;
    if n_test == 0 || n_test == ids.len() {
        return Err(Error::InvalidArgument(format!(
            "test fraction {test_fraction} of {} contents leaves one side empty",
            ids.len()
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = ids.split_off(ids.len() - n_test);
    Ok(SplitSpec {
        train_content_ids: ids.into_iter().collect(),
        test_content_ids: test.into_iter().collect(),
    })
}

/// Crops a seeded random `size x size` window; returns it with its `(y, x)` offset.
pub fn crop_patch_at(image: &ImageBuffer, size: usize, seed: u64) -> Result<(ImageBuffer, (usize, usize))> {
    if size == 0 || image.height < size || image.width < size {
        return Err(Error::TooSmall {
            height: image.height,
            width: image.width,
            min: size,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let oy = rng.random_range(0..=image.height - size);
    let ox = rng.random_range(0..=image.width - size);
    Ok((crop_window(image, oy, ox, size, size), (oy, ox)))
}

pub fn crop_patch(image: &ImageBuffer, size: usize, seed: u64) -> Result<ImageBuffer> {
    crop_patch_at(image, size, seed).map(|(img, _)| img)
}

pub(crate) fn crop_window(image: &ImageBuffer, oy: usize, ox: usize, h: usize, w: usize) -> ImageBuffer {
    let mut planes = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        let plane = image.plane(c);
        for y in oy..oy + h {
            planes.extend_from_slice(&plane[y * image.width + ox..y * image.width + ox + w]);
        }
    }
    ImageBuffer {
        height: h,
        width: w,
        planes,
    }
}

/// Resolves a manifest entry's path against the manifest directory.
pub fn entry_path(root: &Path, entry: &ManifestEntry) -> PathBuf {
    root.join(&entry.path)
}
