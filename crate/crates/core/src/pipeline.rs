//! Glue between a corpus on disk and the trainers.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::dataio::{entry_path, load_image, CorpusManifest, ImageBuffer, Role};
use crate::error::{Error, Result};
use crate::iqa::{iaca_forward, QualityModel, QualityPrediction, TrainItem};
use crate::metrics::csv_field;
use crate::study::OpinionScore;

pub const SCORING_CSV_HEADER: &str = "path,score,score_s1,score_s2";

fn keep(contents: Option<&BTreeSet<String>>, id: &str) -> bool {
    contents.is_none_or(|c| c.contains(id))
}

/// One training item per pseudo-enhanced image that has an opinion score.
pub fn iqa_items(
    manifest: &CorpusManifest,
    root: &Path,
    scores: &[OpinionScore],
    contents: Option<&BTreeSet<String>>,
) -> Result<Vec<TrainItem>> {
    let by_key: BTreeMap<(&str, &str), f64> = scores
        .iter()
        .map(|s| ((s.content_id.as_str(), s.method_id.as_str()), s.score))
        .collect();
    let wanted: Vec<_> = manifest
        .with_role(Role::Enhanced)
        .filter(|e| keep(contents, &e.content_id))
        .filter_map(|e| {
            let method = e.method_id.as_deref()?;
            by_key.get(&(e.content_id.as_str(), method)).map(|s| (e, method, *s))
        })
        .collect();
    if wanted.is_empty() {
        return Err(Error::InvalidArgument("no scored images in the manifest".into()));
    }
    wanted
        .par_iter()
        .map(|(e, method, score)| {
            Ok(TrainItem {
                id: format!("{}/{}", e.content_id, method),
                content_id: e.content_id.clone(),
                image: load_image(entry_path(root, e))?,
                score: *score,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct EnhancePair {
    pub content_id: String,
    pub low: ImageBuffer,
    pub reference: ImageBuffer,
}

/// Low-light input and reference for every selected content.
pub fn enhance_pairs(
    manifest: &CorpusManifest,
    root: &Path,
    contents: Option<&BTreeSet<String>>,
) -> Result<Vec<EnhancePair>> {
    let lows: Vec<_> = manifest
        .with_role(Role::LowLight)
        .filter(|e| keep(contents, &e.content_id))
        .collect();
    if lows.is_empty() {
        return Err(Error::InvalidArgument("no low-light images selected".into()));
    }
    lows.par_iter()
        .map(|e| {
            let r = manifest
                .reference(&e.content_id)
                .ok_or_else(|| Error::MissingReference(e.content_id.clone()))?;
            Ok(EnhancePair {
                content_id: e.content_id.clone(),
                low: load_image(entry_path(root, e))?,
                reference: load_image(entry_path(root, r))?,
            })
        })
        .collect()
}

/// PNG and JPEG files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn score_paths(model: &QualityModel, paths: &[PathBuf]) -> Result<Vec<(PathBuf, QualityPrediction)>> {
    paths
        .par_iter()
        .map(|p| Ok((p.clone(), iaca_forward(&load_image(p)?, model)?)))
        .collect()
}

pub fn scoring_csv(rows: &[(PathBuf, QualityPrediction)]) -> String {
    let mut out = format!("{SCORING_CSV_HEADER}\n");
    for (path, p) in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            csv_field(&path.display().to_string()),
            p.score,
            p.score_s1,
            p.score_s2
        ));
    }
    out
}
