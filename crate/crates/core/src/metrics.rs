//! SSIM, rank and linear correlation, and the score-difference and
//! preference reports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::ImageBuffer;
use crate::error::{Error, Result};
use crate::iqa::{iaca_forward, QualityModel};
use crate::study::{Choice, VoteRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsimColor {
    /// SSIM per R, G, B plane, averaged.
    PerChannel,
    /// SSIM on BT.601 luma only.
    Luma,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
    pub color: SsimColor,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
            color: SsimColor::PerChannel,
        }
    }
}

impl SsimConfig {
    fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as isize;
        let mut k: Vec<f64> = (-r..=r)
            .map(|i| (-(i * i) as f64 / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= s);
        k
    }
}

/// Separable "valid" correlation: output is `(h-k+1) x (w-k+1)`.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        let row = &x[y * w..(y + 1) * w];
        for xo in 0..wo {
            tmp[y * wo + xo] = k.iter().zip(&row[xo..xo + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for (i, kv) in k.iter().enumerate() {
            let src = &tmp[(yo + i) * wo..(yo + i + 1) * wo];
            for (d, s) in out[yo * wo..(yo + 1) * wo].iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(g: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * wo];
    for yo in 0..ho {
        for (i, kv) in k.iter().enumerate() {
            let dst = &mut tmp[(yo + i) * wo..(yo + i + 1) * wo];
            for (d, s) in dst.iter_mut().zip(&g[yo * wo..(yo + 1) * wo]) {
                *d += kv * s;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xo in 0..wo {
            let v = tmp[y * wo + xo];
            for (i, kv) in k.iter().enumerate() {
                out[y * w + xo + i] += kv * v;
            }
        }
    }
    out
}

/// Mean SSIM of one plane and, optionally, its gradient with respect to `x`.
fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, cfg: &SsimConfig, k: &[f64], want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mx = filter_valid(x, h, w, k);
    let my = filter_valid(y, h, w, k);
    let mxx = filter_valid(&sq(x, x), h, w, k);
    let myy = filter_valid(&sq(y, y), h, w, k);
    let mxy = filter_valid(&sq(x, y), h, w, k);
    let p = mx.len() as f64;

    let mut total = 0.0;
    let mut g_mx = want_grad.then(|| vec![0.0; mx.len()]);
    let mut g_mxx = want_grad.then(|| vec![0.0; mx.len()]);
    let mut g_mxy = want_grad.then(|| vec![0.0; mx.len()]);
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let sxx = mxx[i] - ux * ux;
        let syy = myy[i] - uy * uy;
        let sxy = mxy[i] - ux * uy;
        let a1 = 2.0 * ux * uy + c1;
        let a2 = 2.0 * sxy + c2;
        let b1 = ux * ux + uy * uy + c1;
        let b2 = sxx + syy + c2;
        let s = (a1 * a2) / (b1 * b2);
        total += s;
        if let (Some(gm), Some(gxx), Some(gxy)) = (g_mx.as_mut(), g_mxx.as_mut(), g_mxy.as_mut()) {
            let d_a1 = a2 / (b1 * b2);
            let d_a2 = a1 / (b1 * b2);
            let d_b1 = -s / b1;
            let d_b2 = -s / b2;
            gm[i] = (d_a1 * 2.0 * uy - d_a2 * 2.0 * uy + d_b1 * 2.0 * ux - d_b2 * 2.0 * ux) / p;
            gxx[i] = d_b2 / p;
            gxy[i] = d_a2 * 2.0 / p;
        }
    }
    let grad = match (g_mx, g_mxx, g_mxy) {
        (Some(gm), Some(gxx), Some(gxy)) => {
            let a = filter_valid_adjoint(&gm, h, w, k);
            let b = filter_valid_adjoint(&gxx, h, w, k);
            let c = filter_valid_adjoint(&gxy, h, w, k);
            Some((0..h * w).map(|i| a[i] + 2.0 * x[i] * b[i] + y[i] * c[i]).collect())
        }
        _ => None,
    };
    (total / p, grad)
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// SSIM of two planar `(3, h, w)` arrays, with the gradient w.r.t. `x` on request.
pub fn ssim_planar(
    x: &[f64],
    y: &[f64],
    h: usize,
    w: usize,
    cfg: &SsimConfig,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if x.len() != 3 * h * w || y.len() != x.len() {
        return Err(Error::Shape(format!("ssim inputs of length {} and {}", x.len(), y.len())));
    }
    if cfg.window == 0 || cfg.window % 2 == 0 || cfg.sigma <= 0.0 {
        return Err(Error::config("ssim.window", "window must be odd and sigma positive"));
    }
    if h < cfg.window || w < cfg.window {
        return Err(Error::TooSmall {
            height: h,
            width: w,
            min: cfg.window,
        });
    }
    let k = cfg.kernel();
    let n = h * w;
    match cfg.color {
        SsimColor::PerChannel => {
            let mut value = 0.0;
            let mut grad = want_grad.then(|| vec![0.0; 3 * n]);
            for c in 0..3 {
                let (v, g) = ssim_plane(&x[c * n..(c + 1) * n], &y[c * n..(c + 1) * n], h, w, cfg, &k, want_grad);
                value += v / 3.0;
                if let (Some(dst), Some(g)) = (grad.as_mut(), g) {
                    for (d, s) in dst[c * n..(c + 1) * n].iter_mut().zip(g) {
                        *d = s / 3.0;
                    }
                }
            }
            Ok((value, grad))
        }
        SsimColor::Luma => {
            let luma = |a: &[f64]| (0..n).map(|i| (0..3).map(|c| LUMA[c] * a[c * n + i]).sum()).collect::<Vec<f64>>();
            let (v, g) = ssim_plane(&luma(x), &luma(y), h, w, cfg, &k, want_grad);
            let grad = g.map(|g| (0..3).flat_map(|c| g.iter().map(move |v| v * LUMA[c])).collect());
            Ok((v, grad))
        }
    }
}

pub fn ssim(x: &ImageBuffer, y: &ImageBuffer, cfg: &SsimConfig) -> Result<f64> {
    if (x.height(), x.width()) != (y.height(), y.width()) {
        return Err(Error::Shape(format!(
            "ssim of {}x{} vs {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    Ok(ssim_planar(x.planes(), y.planes(), x.height(), x.width(), cfg, false)?.0)
}

// ---------------------------------------------------------------------------
// Correlations

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("correlation of lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least 2 values".into()));
    }
    for v in [a, b] {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite value".into()));
        }
        if v.iter().all(|&x| x == v[0]) {
            return Err(Error::InvalidArgument("constant input".into()));
        }
    }
    Ok(())
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn srocc(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

pub fn plcc(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    Ok(pearson(a, b))
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemValue {
    pub id: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub per_item: Vec<ItemValue>,
    pub summary: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn new(name: impl Into<String>) -> Self {
        MetricReport {
            name: name.into(),
            per_item: Vec::new(),
            summary: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, value: f64) {
        self.per_item.push(ItemValue { id: id.into(), value });
    }

    pub fn values(&self) -> Vec<f64> {
        self.per_item.iter().map(|i| i.value).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,value\n");
        for item in &self.per_item {
            out.push_str(&format!("{},{:.6}\n", csv_field(&item.id), item.value));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => self.to_csv(),
            _ => self.to_json()?,
        };
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Fraction of strictly positive values.
pub fn fraction_positive(v: &[f64]) -> f64 {
    v.iter().filter(|&&x| x > 0.0).count() as f64 / v.len() as f64
}

pub struct ScorePair {
    pub id: String,
    pub baseline: ImageBuffer,
    pub optimized: ImageBuffer,
}

/// Per pair `score(optimized) - score(baseline)` under a frozen quality model.
pub fn score_diff_report(model: &QualityModel, pairs: &[ScorePair]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no image pairs".into()));
    }
    let mut report = MetricReport::new("score_diff");
    for p in pairs {
        let base = iaca_forward(&p.baseline, model)?.score;
        let opt = iaca_forward(&p.optimized, model)?.score;
        report.push(&p.id, opt - base);
    }
    let values = report.values();
    report.summary.insert("mean".into(), mean(&values));
    report.summary.insert("median".into(), median(&values));
    report.summary.insert("fraction_positive".into(), fraction_positive(&values));
    Ok(report)
}

/// Preference for method `ours` in a two-method study.
///
/// Items are `image:<content_id>` and `subject:<subject_id>` percentages;
/// `overall` pools every vote.
pub fn preference_report(votes: &[VoteRecord], ours: &str) -> Result<MetricReport> {
    let methods: std::collections::BTreeSet<&str> = votes
        .iter()
        .flat_map(|v| [v.method_a.as_str(), v.method_b.as_str()])
        .collect();
    if methods.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "preference report needs exactly two methods, found {}",
            methods.len()
        )));
    }
    if !methods.contains(ours) {
        return Err(Error::UnknownMethod(ours.to_string()));
    }
    let mut by_image: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut by_subject: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut favour = 0;
    for v in votes {
        let winner = match v.choice {
            Choice::A => &v.method_a,
            Choice::B => &v.method_b,
        };
        let hit = usize::from(winner == ours);
        favour += hit;
        for (map, key) in [(&mut by_image, v.content_id.as_str()), (&mut by_subject, v.subject_id.as_str())] {
            let e = map.entry(key).or_default();
            e.0 += hit;
            e.1 += 1;
        }
    }
    let mut report = MetricReport::new("preference");
    for (id, (f, n)) in &by_image {
        report.push(format!("image:{id}"), *f as f64 / *n as f64);
    }
    let subject_pct: Vec<f64> = by_subject.values().map(|(f, n)| *f as f64 / *n as f64).collect();
    for ((id, _), pct) in by_subject.iter().zip(&subject_pct) {
        report.push(format!("subject:{id}"), *pct);
    }
    report.summary.insert("overall".into(), favour as f64 / votes.len() as f64);
    report.summary.insert(
        "fraction_subjects_above_half".into(),
        subject_pct.iter().filter(|&&p| p > 0.5).count() as f64 / subject_pct.len() as f64,
    );
    report.summary.insert("votes".into(), votes.len() as f64);
    Ok(report)
}
