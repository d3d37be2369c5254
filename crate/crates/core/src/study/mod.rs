//! Two-alternative forced-choice study engine.
//!
//! Trials are scheduled per subject, votes go to an append-only JSON-lines
//! log, and opinion scores are always recomputed from that log: a method's
//! score for one content is its number of pairwise wins divided by
//! `n_subjects * (M - 1)`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{derive_seed, entry_path, load_image, CorpusManifest};
use crate::error::{Error, Result};
use crate::graph::logistic;
use crate::metrics::{csv_field, ssim, SsimConfig};

#[cfg(feature = "server")]
pub mod server;

/// Votes faster than this are flagged (not rejected).
pub const FAST_VOTE_MS: u64 = 500;
pub const DEFAULT_MIN_CONSISTENCY: f64 = 0.8;
pub const DEFAULT_TEMPERATURE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
}

impl Choice {
    pub fn other(self) -> Self {
        match self {
            Choice::A => Choice::B,
            Choice::B => Choice::A,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoteRecord {
    pub study_id: String,
    pub subject_id: String,
    pub content_id: String,
    pub method_a: String,
    pub method_b: String,
    pub choice: Choice,
    pub presented_left: Choice,
    pub elapsed_ms: u64,
    pub is_sanity: bool,
    pub timestamp_ms: u64,
}

impl VoteRecord {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("study_id", &self.study_id),
            ("subject_id", &self.subject_id),
            ("content_id", &self.content_id),
            ("method_a", &self.method_a),
            ("method_b", &self.method_b),
        ] {
            if v.is_empty() {
                return Err(Error::Malformed(format!("empty {name}")));
            }
        }
        if self.method_a == self.method_b {
            return Err(Error::Malformed(format!("method_a and method_b are both `{}`", self.method_a)));
        }
        if self.elapsed_ms == 0 {
            return Err(Error::Malformed("elapsed_ms must be positive".into()));
        }
        Ok(())
    }

    pub fn winner(&self) -> &str {
        match self.choice {
            Choice::A => &self.method_a,
            Choice::B => &self.method_b,
        }
    }

    pub fn loser(&self) -> &str {
        match self.choice {
            Choice::A => &self.method_b,
            Choice::B => &self.method_a,
        }
    }

    pub fn is_fast(&self) -> bool {
        self.elapsed_ms < FAST_VOTE_MS
    }

    /// Unordered method pair, lexicographically sorted.
    pub fn pair(&self) -> (&str, &str) {
        if self.method_a <= self.method_b {
            (&self.method_a, &self.method_b)
        } else {
            (&self.method_b, &self.method_a)
        }
    }

    fn key(&self) -> TrialKey {
        let (a, b) = self.pair();
        TrialKey {
            study_id: self.study_id.clone(),
            subject_id: self.subject_id.clone(),
            content_id: self.content_id.clone(),
            pair: (a.to_string(), b.to_string()),
            is_sanity: self.is_sanity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct TrialKey {
    study_id: String,
    subject_id: String,
    content_id: String,
    pair: (String, String),
    is_sanity: bool,
}

// ---------------------------------------------------------------------------
// Scheduling

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub content_id: String,
    pub method_a: String,
    pub method_b: String,
    pub presented_left: Choice,
    pub is_sanity: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSchedule {
    pub trials: Vec<Trial>,
    pub subject_id: String,
    pub seed: u64,
}

impl TrialSchedule {
    pub fn non_sanity(&self) -> impl Iterator<Item = &Trial> {
        self.trials.iter().filter(|t| !t.is_sanity)
    }
}

fn string_seed(s: &str) -> u64 {
    // FNV-1a
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn random_side(rng: &mut ChaCha8Rng) -> Choice {
    if rng.random_bool(0.5) {
        Choice::A
    } else {
        Choice::B
    }
}

/// Every unordered method pair once per content, shuffled, with seeded
/// left/right placement and `round(sanity_rate * n)` repeated trials.
///
/// A repeat copies an earlier trial with the sides swapped and is placed
/// somewhere after it.
pub fn schedule_trials(
    content_ids: &[String],
    methods: &[String],
    subject_id: &str,
    sanity_rate: f64,
    seed: u64,
) -> Result<TrialSchedule> {
    if methods.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 methods, got {}", methods.len())));
    }
    if content_ids.is_empty() {
        return Err(Error::InvalidArgument("no contents to schedule".into()));
    }
    if methods.iter().collect::<BTreeSet<_>>().len() != methods.len() {
        return Err(Error::InvalidArgument("duplicate method id".into()));
    }
    if content_ids.iter().collect::<BTreeSet<_>>().len() != content_ids.len() {
        return Err(Error::InvalidArgument("duplicate content id".into()));
    }
    if !(0.0..=0.2).contains(&sanity_rate) {
        return Err(Error::InvalidArgument(format!("sanity rate {sanity_rate} not in [0, 0.2]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[string_seed(subject_id)]));
    let mut trials = Vec::with_capacity(content_ids.len() * methods.len() * (methods.len() - 1) / 2);
    for c in content_ids {
        for i in 0..methods.len() {
            for j in i + 1..methods.len() {
                trials.push(Trial {
                    content_id: c.clone(),
                    method_a: methods[i].clone(),
                    method_b: methods[j].clone(),
                    presented_left: Choice::A,
                    is_sanity: false,
                });
            }
        }
    }
    trials.shuffle(&mut rng);
    for t in &mut trials {
        t.presented_left = random_side(&mut rng);
    }

    let n = trials.len();
    let n_sanity = ((sanity_rate * n as f64).round() as usize).min(n);
    // slots[k] holds repeats emitted right after trial k
    let mut slots: Vec<Vec<Trial>> = vec![Vec::new(); n];
    let mut originals = index::sample(&mut rng, n, n_sanity).into_vec();
    originals.sort_unstable();
    for orig in originals {
        let after = rng.random_range(orig..n);
        let mut dup = trials[orig].clone();
        dup.presented_left = dup.presented_left.other();
        dup.is_sanity = true;
        slots[after].push(dup);
    }
    let mut out = Vec::with_capacity(n + n_sanity);
    for (t, extra) in trials.into_iter().zip(slots) {
        out.push(t);
        out.extend(extra);
    }
    Ok(TrialSchedule {
        trials: out,
        subject_id: subject_id.to_string(),
        seed,
    })
}

// ---------------------------------------------------------------------------
// Vote log

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub sequence: u64,
}

struct LogState {
    file: Option<File>,
    records: Vec<VoteRecord>,
    keys: HashSet<TrialKey>,
}

/// Append-only vote log; every accepted record is one JSON line.
pub struct VoteLog {
    path: Option<PathBuf>,
    state: Mutex<LogState>,
}

impl VoteLog {
    pub fn in_memory() -> Self {
        VoteLog {
            path: None,
            state: Mutex::new(LogState {
                file: None,
                records: Vec::new(),
                keys: HashSet::new(),
            }),
        }
    }

    /// Opens (or creates) a log file, replaying any existing records.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let records = if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            parse_vote_log(&text)?
        } else {
            Vec::new()
        };
        let mut keys = HashSet::new();
        for r in &records {
            if !keys.insert(r.key()) {
                return Err(Error::DuplicateTrial(format!("{:?} in existing log", r.key())));
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(VoteLog {
            path: Some(path),
            state: Mutex::new(LogState {
                file: Some(file),
                records,
                keys,
            }),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Validates and appends one record; the acknowledgement carries its
    /// 1-based sequence number.
    pub fn record_vote(&self, record: VoteRecord) -> Result<Ack> {
        record.validate()?;
        let key = record.key();
        let mut state = self.state.lock().expect("vote log poisoned");
        if state.keys.contains(&key) {
            return Err(Error::DuplicateTrial(format!(
                "{}/{}/{} {}-{}{}",
                key.study_id,
                key.subject_id,
                key.content_id,
                key.pair.0,
                key.pair.1,
                if key.is_sanity { " (sanity)" } else { "" }
            )));
        }
        if record.is_fast() {
            log::warn!(
                "fast vote ({} ms) from subject {} on {}",
                record.elapsed_ms,
                record.subject_id,
                record.content_id
            );
        }
        if let Some(file) = state.file.as_mut() {
            let mut line = serde_json::to_string(&record)?;
            line.push('\n');
            let path = self.path.as_deref().unwrap_or(Path::new("votes.jsonl"));
            file.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
            file.sync_data().map_err(|e| Error::io(path, e))?;
        }
        state.keys.insert(key);
        state.records.push(record);
        Ok(Ack {
            sequence: state.records.len() as u64,
        })
    }

    pub fn len(&self) -> usize {
        self.state.lock().expect("vote log poisoned").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<VoteRecord> {
        self.state.lock().expect("vote log poisoned").records.clone()
    }
}

/// Parses a JSON-lines vote log; blank lines are skipped.
pub fn parse_vote_log(text: &str) -> Result<Vec<VoteRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: VoteRecord =
            serde_json::from_str(line).map_err(|e| Error::Malformed(format!("line {}: {e}", i + 1)))?;
        rec.validate()
            .map_err(|e| Error::Malformed(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_vote_log(votes: &[VoteRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for v in votes {
        text.push_str(&serde_json::to_string(v)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Sanity check

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanityResult {
    pub passed: bool,
    pub consistency: f64,
    pub n_sanity: usize,
}

/// Fraction of repeated trials whose winner matches the original trial's.
///
/// Repeats without an original in `votes` are ignored.
pub fn sanity_check(votes: &[VoteRecord], min_consistency: f64) -> Result<SanityResult> {
    let originals: BTreeMap<(&str, (&str, &str)), &str> = votes
        .iter()
        .filter(|v| !v.is_sanity)
        .map(|v| ((v.content_id.as_str(), v.pair()), v.winner()))
        .collect();
    let mut matched = 0;
    let mut total = 0;
    for v in votes.iter().filter(|v| v.is_sanity) {
        if let Some(&w) = originals.get(&(v.content_id.as_str(), v.pair())) {
            total += 1;
            matched += usize::from(w == v.winner());
        }
    }
    if total == 0 {
        return Err(Error::NoSanityTrials);
    }
    let consistency = matched as f64 / total as f64;
    Ok(SanityResult {
        passed: consistency >= min_consistency,
        consistency,
        n_sanity: total,
    })
}

// ---------------------------------------------------------------------------
// Tally and opinion scores

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairwiseTally {
    pub content_id: String,
    pub methods: Vec<String>,
    /// `counts[r][c]`: times method `r` was preferred over method `c`.
    pub counts: Vec<Vec<u32>>,
    pub n_subjects: u32,
}

impl PairwiseTally {
    /// Builds a tally from a winning-count matrix (diagonal must be zero).
    pub fn from_counts(
        content_id: impl Into<String>,
        methods: Vec<String>,
        counts: Vec<Vec<u32>>,
        n_subjects: u32,
    ) -> Result<Self> {
        let m = methods.len();
        if counts.len() != m || counts.iter().any(|r| r.len() != m) {
            return Err(Error::Shape(format!("tally matrix must be {m}x{m}")));
        }
        if (0..m).any(|i| counts[i][i] != 0) {
            return Err(Error::Malformed("tally diagonal must be zero".into()));
        }
        Ok(PairwiseTally {
            content_id: content_id.into(),
            methods,
            counts,
            n_subjects,
        })
    }

    pub fn winning_times(&self, row: usize) -> u32 {
        self.counts[row].iter().sum()
    }

    /// First pair whose two counts do not add up to `n_subjects`.
    pub fn incomplete_pair(&self) -> Option<(usize, usize)> {
        let m = self.methods.len();
        (0..m)
            .flat_map(|r| (r + 1..m).map(move |c| (r, c)))
            .find(|&(r, c)| self.counts[r][c] + self.counts[c][r] != self.n_subjects)
    }

    /// Expands the matrix back into one vote per subject and pair.
    pub fn to_votes(&self, study_id: &str) -> Vec<VoteRecord> {
        let m = self.methods.len();
        let mut out = Vec::new();
        for r in 0..m {
            for c in r + 1..m {
                let wins_r = self.counts[r][c];
                for s in 0..self.counts[r][c] + self.counts[c][r] {
                    out.push(VoteRecord {
                        study_id: study_id.to_string(),
                        subject_id: format!("s{s:03}"),
                        content_id: self.content_id.clone(),
                        method_a: self.methods[r].clone(),
                        method_b: self.methods[c].clone(),
                        choice: if s < wins_r { Choice::A } else { Choice::B },
                        presented_left: Choice::A,
                        elapsed_ms: 3000,
                        is_sanity: false,
                        timestamp_ms: out.len() as u64,
                    });
                }
            }
        }
        out
    }
}

/// Counts the non-sanity votes on `content_id`; other contents are skipped.
pub fn tally(votes: &[VoteRecord], methods: &[String], content_id: &str) -> Result<PairwiseTally> {
    let index: BTreeMap<&str, usize> = methods.iter().enumerate().map(|(i, m)| (m.as_str(), i)).collect();
    if index.len() != methods.len() {
        return Err(Error::InvalidArgument("duplicate method id".into()));
    }
    let m = methods.len();
    let mut counts = vec![vec![0u32; m]; m];
    let mut subjects = BTreeSet::new();
    for v in votes.iter().filter(|v| v.content_id == content_id && !v.is_sanity) {
        let w = *index.get(v.winner()).ok_or_else(|| Error::UnknownMethod(v.winner().to_string()))?;
        let l = *index.get(v.loser()).ok_or_else(|| Error::UnknownMethod(v.loser().to_string()))?;
        counts[w][l] += 1;
        subjects.insert(v.subject_id.as_str());
    }
    Ok(PairwiseTally {
        content_id: content_id.to_string(),
        methods: methods.to_vec(),
        counts,
        n_subjects: subjects.len() as u32,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpinionScore {
    pub content_id: String,
    pub method_id: String,
    pub winning_times: u32,
    pub total: u32,
    pub score: f64,
}

pub fn opinion_scores(tally: &PairwiseTally) -> Result<Vec<OpinionScore>> {
    let m = tally.methods.len();
    if m < 2 || tally.n_subjects == 0 {
        return Err(Error::IncompleteTally {
            content_id: tally.content_id.clone(),
            detail: format!("{m} methods, {} subjects", tally.n_subjects),
        });
    }
    if let Some((r, c)) = tally.incomplete_pair() {
        return Err(Error::IncompleteTally {
            content_id: tally.content_id.clone(),
            detail: format!(
                "{} vs {}: {} + {} != {}",
                tally.methods[r], tally.methods[c], tally.counts[r][c], tally.counts[c][r], tally.n_subjects
            ),
        });
    }
    let total = tally.n_subjects * (m as u32 - 1);
    Ok((0..m)
        .map(|r| {
            let wins = tally.winning_times(r);
            OpinionScore {
                content_id: tally.content_id.clone(),
                method_id: tally.methods[r].clone(),
                winning_times: wins,
                total,
                score: wins as f64 / total as f64,
            }
        })
        .collect())
}

pub const SCORES_CSV_HEADER: &str = "content_id,method_id,winning_times,total,score";

pub fn scores_to_csv(scores: &[OpinionScore]) -> String {
    let mut out = format!("{SCORES_CSV_HEADER}\n");
    for s in scores {
        out.push_str(&format!(
            "{},{},{},{},{:.4}\n",
            csv_field(&s.content_id),
            csv_field(&s.method_id),
            s.winning_times,
            s.total,
            s.score
        ));
    }
    out
}

/// Reads an opinion-score CSV written by [`scores_to_csv`].
pub fn parse_scores_csv(text: &str) -> Result<Vec<OpinionScore>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(SCORES_CSV_HEADER) {
        return Err(Error::Malformed("missing opinion-score header".into()));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Malformed(format!("row {}: {what}", i + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        out.push(OpinionScore {
            content_id: f[0].to_string(),
            method_id: f[1].to_string(),
            winning_times: f[2].parse().map_err(|_| bad("winning_times"))?,
            total: f[3].parse().map_err(|_| bad("total"))?,
            score: f[4].parse().map_err(|_| bad("score"))?,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcludedSession {
    pub study_id: String,
    pub subject_id: String,
    pub consistency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub scores: Vec<OpinionScore>,
    pub excluded_sessions: Vec<ExcludedSession>,
    pub fast_votes: usize,
}

/// Drops sessions failing the sanity check, then tallies every content.
///
/// Sessions without repeated trials are kept unchecked.
pub fn aggregate(votes: &[VoteRecord], min_consistency: f64) -> Result<Aggregate> {
    let mut sessions: BTreeMap<(&str, &str), Vec<VoteRecord>> = BTreeMap::new();
    for v in votes {
        sessions
            .entry((v.study_id.as_str(), v.subject_id.as_str()))
            .or_default()
            .push(v.clone());
    }
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for ((study, subject), session) in sessions {
        match sanity_check(&session, min_consistency) {
            Ok(r) if !r.passed => excluded.push(ExcludedSession {
                study_id: study.to_string(),
                subject_id: subject.to_string(),
                consistency: r.consistency,
            }),
            Ok(_) | Err(Error::NoSanityTrials) => kept.extend(session),
            Err(e) => return Err(e),
        }
    }
    let mut methods_by_content: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for v in &kept {
        let e = methods_by_content.entry(&v.content_id).or_default();
        e.insert(&v.method_a);
        e.insert(&v.method_b);
    }
    let mut scores = Vec::new();
    for (content, methods) in &methods_by_content {
        let methods: Vec<String> = methods.iter().map(|m| m.to_string()).collect();
        scores.extend(opinion_scores(&tally(&kept, &methods, content)?)?);
    }
    Ok(Aggregate {
        scores,
        excluded_sessions: excluded,
        fast_votes: votes.iter().filter(|v| v.is_fast()).count(),
    })
}

// ---------------------------------------------------------------------------
// Vote simulation

/// Probability that a method with distortion `d_a` beats one with `d_b`.
pub fn preference_probability(d_a: f64, d_b: f64, temperature: f64) -> f64 {
    logistic((d_b - d_a) / temperature)
}

/// One complete simulated study from per-content `(method, distortion)` lists.
pub fn simulate_votes_from_distances(
    distances: &BTreeMap<String, Vec<(String, f64)>>,
    n_subjects: usize,
    temperature: f64,
    seed: u64,
    study_id: &str,
) -> Result<Vec<VoteRecord>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
    }
    if n_subjects == 0 {
        return Err(Error::InvalidArgument("need at least one subject".into()));
    }
    let mut out = Vec::new();
    for s in 0..n_subjects {
        let subject = format!("sim{s:03}");
        let mut clock = 0u64;
        for (ci, (content, methods)) in distances.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[s as u64, ci as u64]));
            for i in 0..methods.len() {
                for j in i + 1..methods.len() {
                    let (ma, da) = &methods[i];
                    let (mb, db) = &methods[j];
                    let p = preference_probability(*da, *db, temperature);
                    let choice = if rng.random::<f64>() < p { Choice::A } else { Choice::B };
                    let elapsed = rng.random_range(2000..=5000);
                    clock += elapsed;
                    out.push(VoteRecord {
                        study_id: study_id.to_string(),
                        subject_id: subject.clone(),
                        content_id: content.clone(),
                        method_a: ma.clone(),
                        method_b: mb.clone(),
                        choice,
                        presented_left: random_side(&mut rng),
                        elapsed_ms: elapsed,
                        is_sanity: false,
                        timestamp_ms: clock,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// `1 - SSIM(x, reference)` for every pseudo-enhanced entry of the corpus.
pub fn corpus_distances(
    manifest: &CorpusManifest,
    root: &Path,
    cfg: &SsimConfig,
) -> Result<BTreeMap<String, Vec<(String, f64)>>> {
    let groups = manifest.enhanced_by_content();
    let computed: Vec<Result<(String, Vec<(String, f64)>)>> = groups
        .par_iter()
        .map(|(content, entries)| {
            let reference = manifest
                .reference(content)
                .ok_or_else(|| Error::MissingReference(content.to_string()))?;
            let ref_img = load_image(entry_path(root, reference))?;
            let mut list = Vec::with_capacity(entries.len());
            for e in entries {
                let img = load_image(entry_path(root, e))?;
                let method = e.method_id.clone().unwrap_or_else(|| e.path.clone());
                list.push((method, 1.0 - ssim(&img, &ref_img, cfg)?));
            }
            Ok((content.to_string(), list))
        })
        .collect();
    computed.into_iter().collect()
}

/// Simulated subjects voting on every pseudo-enhanced pair of the corpus.
pub fn simulate_votes(
    manifest: &CorpusManifest,
    root: &Path,
    n_subjects: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<VoteRecord>> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
    }
    let distances = corpus_distances(manifest, root, &SsimConfig::default())?;
    simulate_votes_from_distances(&distances, n_subjects, temperature, seed, "simulated")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    fn vote(subject: &str, content: &str, a: &str, b: &str, choice: Choice, sanity: bool) -> VoteRecord {
        VoteRecord {
            study_id: "st".into(),
            subject_id: subject.into(),
            content_id: content.into(),
            method_a: a.into(),
            method_b: b.into(),
            choice,
            presented_left: Choice::A,
            elapsed_ms: 2500,
            is_sanity: sanity,
            timestamp_ms: 0,
        }
    }

    #[test]
    fn schedule_counts() {
        let s = schedule_trials(&ids("c", 290), &ids("m", 10), "s1", 0.0, 1).unwrap();
        assert_eq!(s.non_sanity().count(), 13_050);
        let s = schedule_trials(&ids("c", 1), &ids("m", 2), "s1", 0.0, 1).unwrap();
        assert_eq!(s.trials.len(), 1);
    }

    #[test]
    fn schedule_covers_each_pair_once() {
        let s = schedule_trials(&ids("c", 4), &ids("m", 5), "s1", 0.1, 9).unwrap();
        assert_eq!(s.non_sanity().count(), 40);
        let mut seen = BTreeSet::new();
        for t in s.non_sanity() {
            let pair = if t.method_a < t.method_b {
                (t.method_a.clone(), t.method_b.clone())
            } else {
                (t.method_b.clone(), t.method_a.clone())
            };
            assert!(seen.insert((t.content_id.clone(), pair)));
        }
        let mut expected = BTreeSet::new();
        for c in ids("c", 4) {
            let m = ids("m", 5);
            for i in 0..5 {
                for j in i + 1..5 {
                    expected.insert((c.clone(), (m[i].clone(), m[j].clone())));
                }
            }
        }
        assert_eq!(seen, expected);
    }

    #[test]
    fn sanity_repeats_follow_their_original_swapped() {
        let s = schedule_trials(&ids("c", 6), &ids("m", 4), "subj", 0.2, 3).unwrap();
        let n_sanity = s.trials.iter().filter(|t| t.is_sanity).count();
        assert_eq!(n_sanity, (0.2f64 * 36.0).round() as usize);
        for (i, t) in s.trials.iter().enumerate().filter(|(_, t)| t.is_sanity) {
            let orig = s.trials[..i]
                .iter()
                .find(|o| !o.is_sanity && o.content_id == t.content_id && o.method_a == t.method_a && o.method_b == t.method_b)
                .expect("original precedes repeat");
            assert_eq!(orig.presented_left, t.presented_left.other());
        }
    }

    #[test]
    fn schedule_is_seeded_per_subject() {
        let c = ids("c", 3);
        let m = ids("m", 4);
        assert_eq!(schedule_trials(&c, &m, "a", 0.1, 5).unwrap(), schedule_trials(&c, &m, "a", 0.1, 5).unwrap());
        assert_ne!(schedule_trials(&c, &m, "a", 0.1, 5).unwrap().trials, schedule_trials(&c, &m, "b", 0.1, 5).unwrap().trials);
    }

    #[test]
    fn schedule_errors() {
        assert!(schedule_trials(&ids("c", 2), &ids("m", 1), "s", 0.0, 0).is_err());
        assert!(schedule_trials(&[], &ids("m", 3), "s", 0.0, 0).is_err());
        assert!(schedule_trials(&ids("c", 2), &ids("m", 3), "s", 0.5, 0).is_err());
    }

    #[test]
    fn log_appends_and_rejects_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("votes.jsonl");
        let log = VoteLog::open(&path).unwrap();
        let v = vote("s", "c", "x", "y", Choice::A, false);
        assert_eq!(log.record_vote(v.clone()).unwrap().sequence, 1);
        assert!(matches!(log.record_vote(v.clone()), Err(Error::DuplicateTrial(_))));
        let mut swapped = v.clone();
        std::mem::swap(&mut swapped.method_a, &mut swapped.method_b);
        assert!(log.record_vote(swapped).is_err());
        let mut repeat = v.clone();
        repeat.is_sanity = true;
        assert_eq!(log.record_vote(repeat).unwrap().sequence, 2);
        assert_eq!(log.len(), 2);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.ends_with('\n') && !text.contains('\r'));
        drop(log);
        let reopened = VoteLog::open(&path).unwrap();
        assert_eq!(reopened.records().len(), 2);
        assert!(reopened.record_vote(v).is_err());
    }

    #[test]
    fn log_rejects_malformed() {
        let log = VoteLog::in_memory();
        assert!(log.record_vote(vote("s", "c", "x", "x", Choice::A, false)).is_err());
        let mut v = vote("s", "c", "x", "y", Choice::A, false);
        v.elapsed_ms = 0;
        assert!(matches!(log.record_vote(v), Err(Error::Malformed(_))));
        assert!(log.is_empty());
    }

    #[test]
    fn log_field_names_are_exact() {
        let v = vote("s", "c", "x", "y", Choice::B, true);
        let json: serde_json::Value = serde_json::to_value(&v).unwrap();
        let mut keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "choice", "content_id", "elapsed_ms", "is_sanity", "method_a", "method_b",
                "presented_left", "study_id", "subject_id", "timestamp_ms"
            ]
        );
        assert_eq!(json["choice"], "B");
        assert!(parse_vote_log("{\"study_id\":1}\n").is_err());
    }

    #[test]
    fn sanity_examples() {
        let orig = |c: &str, ch| vote("s", c, "x", "y", ch, false);
        let rep = |c: &str, ch| vote("s", c, "x", "y", ch, true);
        let all_agree = vec![orig("c1", Choice::A), rep("c1", Choice::A)];
        let r = sanity_check(&all_agree, 0.8).unwrap();
        assert_eq!((r.consistency, r.passed), (1.0, true));
        let disagree = vec![orig("c1", Choice::A), rep("c1", Choice::B)];
        let r = sanity_check(&disagree, 0.01).unwrap();
        assert_eq!((r.consistency, r.passed), (0.0, false));
        let mut mixed = Vec::new();
        for (i, same) in [true, true, true, false].iter().enumerate() {
            let c = format!("c{i}");
            mixed.push(orig(&c, Choice::A));
            mixed.push(rep(&c, if *same { Choice::A } else { Choice::B }));
        }
        let r = sanity_check(&mixed, 0.7).unwrap();
        assert_eq!((r.consistency, r.passed), (0.75, true));
        assert!(matches!(sanity_check(&[orig("c", Choice::A)], 0.5), Err(Error::NoSanityTrials)));
    }

    #[test]
    fn tally_empty_and_unknown() {
        let m = ids("m", 3);
        let t = tally(&[], &m, "c").unwrap();
        assert!(t.counts.iter().flatten().all(|&v| v == 0));
        let bad = vote("s", "c", "m0", "zz", Choice::A, false);
        assert!(matches!(tally(&[bad], &m, "c"), Err(Error::UnknownMethod(_))));
    }

    #[test]
    fn opinion_boundaries() {
        let m = ids("m", 2);
        let t = PairwiseTally::from_counts("c", m, vec![vec![0, 3], vec![0, 0]], 3).unwrap();
        let s = opinion_scores(&t).unwrap();
        assert_eq!((s[0].score, s[1].score), (1.0, 0.0));
        let incomplete = PairwiseTally::from_counts("c", ids("m", 2), vec![vec![0, 1], vec![0, 0]], 3).unwrap();
        assert!(matches!(opinion_scores(&incomplete), Err(Error::IncompleteTally { .. })));
    }

    #[test]
    fn tally_matches_scalar_recount() {
        let mut d = BTreeMap::new();
        let methods = ids("m", 6);
        d.insert("c0".to_string(), methods.iter().enumerate().map(|(i, m)| (m.clone(), i as f64 * 0.03)).collect());
        let votes = simulate_votes_from_distances(&d, 11, 0.05, 4, "st").unwrap();
        let t = tally(&votes, &methods, "c0").unwrap();
        for r in 0..6 {
            for c in 0..6 {
                let mut n = 0;
                for v in &votes {
                    if v.choice == Choice::A && v.method_a == methods[r] && v.method_b == methods[c] {
                        n += 1;
                    }
                    if v.choice == Choice::B && v.method_b == methods[r] && v.method_a == methods[c] {
                        n += 1;
                    }
                }
                assert_eq!(t.counts[r][c], n);
            }
        }
        assert_eq!(t.n_subjects, 11);
        assert!(t.incomplete_pair().is_none());
    }

    #[test]
    fn scores_csv_roundtrip() {
        let t = PairwiseTally::from_counts("c", ids("m", 2), vec![vec![0, 2], vec![1, 0]], 3).unwrap();
        let s = opinion_scores(&t).unwrap();
        let csv = scores_to_csv(&s);
        assert!(csv.starts_with("content_id,method_id,winning_times,total,score\n"));
        assert!(csv.contains("c,m0,2,3,0.6667"));
        let back = parse_scores_csv(&csv).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].winning_times, 2);
    }

    #[test]
    fn aggregate_excludes_failing_sessions() {
        let mut votes = vec![
            vote("good", "c", "x", "y", Choice::A, false),
            vote("good", "c", "x", "y", Choice::A, true),
            vote("bad", "c", "x", "y", Choice::B, false),
            vote("bad", "c", "x", "y", Choice::A, true),
        ];
        votes[0].elapsed_ms = 100;
        let agg = aggregate(&votes, 0.8).unwrap();
        assert_eq!(agg.excluded_sessions.len(), 1);
        assert_eq!(agg.excluded_sessions[0].subject_id, "bad");
        assert_eq!(agg.fast_votes, 1);
        let x = agg.scores.iter().find(|s| s.method_id == "x").unwrap();
        assert_eq!((x.winning_times, x.total), (1, 1));
    }

    #[test]
    fn logistic_probability_limits() {
        assert_eq!(preference_probability(0.3, 0.3, 0.05), 0.5);
        assert!(preference_probability(0.0, 1.0, 1e-6) > 1.0 - 1e-12);
        assert!(simulate_votes_from_distances(&BTreeMap::new(), 1, 0.0, 0, "s").is_err());
    }
}
