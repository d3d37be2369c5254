use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use percept_core::dataio::{
    generate_degraded_corpus, load_image, save_png, split_by_content, synth_base_images, CorpusManifest, SplitSpec,
};
use percept_core::enhance::{enhancer_forward, train_enhancer, EnhancerModel};
use percept_core::iqa::{iaca_forward, train_iqa, QualityModel};
use percept_core::metrics::{plcc, preference_report, score_diff_report, srocc, MetricReport, ScorePair};
use percept_core::pipeline::{enhance_pairs, iqa_items, list_images, score_paths, scoring_csv};
use percept_core::study::server::{serve, StudyConfig, StudyServer};
use percept_core::study::{
    aggregate, parse_scores_csv, parse_vote_log, scores_to_csv, simulate_votes, write_vote_log, OpinionScore, VoteLog,
};

use crate::config::{self, resolve};
use crate::*;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const SPLIT_NAME: &str = "split.json";

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| {
        let msg = format!("{}: {e}", path.display());
        if e.kind() == std::io::ErrorKind::NotFound {
            Failure::Validation(msg)
        } else {
            Failure::Runtime(msg)
        }
    })
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

/// Writes to `out`, or stdout when no path was given.
fn emit(out: Option<&Path>, text: &str) -> CmdResult {
    match out {
        Some(path) => write_text(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn emit_report(out: Option<&Path>, report: &MetricReport) -> CmdResult {
    match out {
        Some(path) => Ok(report.save(path)?),
        None => emit(None, &report.to_json()?),
    }
}

fn refuse_overwrite(path: &Path, force: bool) -> CmdResult {
    if path.exists() && !force {
        return Err(invalid(format!("{} exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<CorpusManifest, Failure> {
    let manifest = CorpusManifest::parse(&read_text(&dir.join(MANIFEST_NAME))?)?;
    Ok(manifest)
}

/// The configured split, else the corpus's own `split.json` when present.
fn load_split(config_path: Option<&Path>, split: Option<&PathBuf>, corpus: &Path) -> Result<Option<SplitSpec>, Failure> {
    let path = match split {
        Some(p) => resolve(config_path, p),
        None => corpus.join(SPLIT_NAME),
    };
    if split.is_none() && !path.is_file() {
        log::info!("no split; using every content");
        return Ok(None);
    }
    log::info!("split from {}", path.display());
    Ok(Some(SplitSpec::parse(&read_text(&path)?)?))
}

fn load_scores(path: &Path) -> Result<Vec<OpinionScore>, Failure> {
    Ok(parse_scores_csv(&read_text(path)?)?)
}

/// A single image file or every PNG/JPEG directly inside a directory.
fn image_inputs(path: &Path) -> Result<Vec<PathBuf>, Failure> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(invalid(format!("{}: no such file or directory", path.display())));
    }
    let paths = list_images(path)?;
    if paths.is_empty() {
        return Err(invalid(format!("{}: no PNG or JPEG images", path.display())));
    }
    Ok(paths)
}

pub fn corpus_synth(a: SynthArgs) -> CmdResult {
    let cfg: config::SynthConfig = config::load(a.config.as_deref())?;
    let manifest_path = a.out.join(MANIFEST_NAME);
    refuse_overwrite(&manifest_path, a.force)?;
    let base = match &cfg.base_images {
        Some(dir) => {
            let dir = resolve(a.config.as_deref(), dir);
            image_inputs(&dir)?
                .iter()
                .map(load_image)
                .collect::<Result<Vec<_>, _>>()?
        }
        None => synth_base_images(cfg.count, cfg.height, cfg.width, a.seed)?,
    };
    log::info!("rendering {} contents x {} methods", base.len(), cfg.degradation.recipes.len());
    let manifest = generate_degraded_corpus(&base, &cfg.degradation, a.seed, &a.out)?;
    let split = split_by_content(&manifest, cfg.test_fraction, a.seed)?;
    manifest.save(&manifest_path)?;
    write_text(&a.out.join(SPLIT_NAME), &split.to_json()?)?;
    log::info!(
        "wrote {} entries; {} train / {} test contents",
        manifest.entries.len(),
        split.train_content_ids.len(),
        split.test_content_ids.len()
    );
    Ok(())
}

pub fn study_serve(a: ServeArgs) -> CmdResult {
    let cfg: config::ServeConfig = config::load(a.config.as_deref())?;
    let manifest = load_corpus(&a.images)?;
    let study = StudyConfig {
        study_id: cfg.study_id,
        sanity_rate: cfg.sanity_rate,
        min_consistency: cfg.min_consistency,
        seed: a.seed,
        methods: cfg.methods,
    };
    let ui_dir = cfg.ui_dir.map(|d| resolve(a.config.as_deref(), &d));
    let log = VoteLog::open(&a.votes)?;
    let server = Arc::new(StudyServer::new(&manifest, &a.images, study, log, ui_dir)?);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::Runtime(format!("async runtime: {e}")))?;
    runtime.block_on(serve(server, a.port))?;
    Ok(())
}

pub fn study_simulate(a: SimulateArgs) -> CmdResult {
    let cfg: config::SimulateConfig = config::load(a.config.as_deref())?;
    refuse_overwrite(&a.out, a.force)?;
    let manifest = load_corpus(&a.images)?;
    let votes = simulate_votes(&manifest, &a.images, cfg.n_subjects, cfg.temperature, a.seed)?;
    if a.out.exists() {
        std::fs::remove_file(&a.out).map_err(|e| Failure::Runtime(format!("{}: {e}", a.out.display())))?;
    }
    write_vote_log(&votes, &a.out)?;
    log::info!("wrote {} votes", votes.len());
    Ok(())
}

pub fn study_aggregate(a: AggregateArgs) -> CmdResult {
    let cfg: config::AggregateConfig = config::load(a.config.as_deref())?;
    let votes = parse_vote_log(&read_text(&a.votes)?)?;
    let agg = aggregate(&votes, cfg.min_consistency)?;
    for s in &agg.excluded_sessions {
        log::warn!("excluded {}/{}: consistency {:.3}", s.study_id, s.subject_id, s.consistency);
    }
    if agg.fast_votes > 0 {
        log::warn!("{} votes answered faster than the response-time floor", agg.fast_votes);
    }
    emit(a.out.as_deref(), &scores_to_csv(&agg.scores))
}

pub fn iqa_train(a: IqaTrainArgs) -> CmdResult {
    let mut cfg: config::IqaTrainConfig = config::load(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        cfg.hyper.epochs = e;
    }
    let model_cfg = cfg.model.resolve();
    model_cfg.validate()?;
    cfg.hyper.validate()?;
    refuse_overwrite(&a.out.join(percept_core::iqa::PARAMS_FILE), a.force)?;
    let manifest = load_corpus(&a.images)?;
    let split = load_split(a.config.as_deref(), cfg.split.as_ref(), &a.images)?;
    let scores = load_scores(&a.votes)?;
    let items = iqa_items(&manifest, &a.images, &scores, split.as_ref().map(|s| &s.train_content_ids))?;
    log::info!("training on {} scored images", items.len());
    let model = train_iqa(&items, model_cfg, &cfg.hyper, a.seed)?;
    model.save(&a.out, a.force)?;
    log::info!("saved model to {}", a.out.display());
    Ok(())
}

pub fn iqa_score(a: IqaScoreArgs) -> CmdResult {
    let model = QualityModel::load(&a.model)?;
    let rows = score_paths(&model, &image_inputs(&a.images)?)?;
    emit(a.out.as_deref(), &scoring_csv(&rows))
}

pub fn enhance_train(a: EnhanceTrainArgs) -> CmdResult {
    let mut cfg: config::EnhanceConfig = config::load(a.config.as_deref())?;
    if let Some(l) = a.lambda {
        cfg.train.lambda = l;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
        if cfg.train.decay_epoch.is_some_and(|d| d > e) {
            cfg.train.decay_epoch = None;
        }
    }
    cfg.train.validate()?;
    refuse_overwrite(&a.out.join(percept_core::iqa::PARAMS_FILE), a.force)?;
    let iqa = QualityModel::load(&a.model)?;
    let manifest = load_corpus(&a.images)?;
    let split = load_split(a.config.as_deref(), cfg.split.as_ref(), &a.images)?;
    let pairs: Vec<_> = enhance_pairs(&manifest, &a.images, split.as_ref().map(|s| &s.train_content_ids))?
        .into_iter()
        .map(|p| (p.low, p.reference))
        .collect();
    log::info!("training on {} pairs with lambda {}", pairs.len(), cfg.train.lambda);
    let model = train_enhancer(&pairs, &iqa, &cfg.train, a.seed)?;
    model.save(&a.out, a.force)?;
    log::info!("saved enhancer to {}", a.out.display());
    Ok(())
}

pub fn enhance_apply(a: EnhanceApplyArgs) -> CmdResult {
    let model = EnhancerModel::load(&a.model)?;
    let inputs = image_inputs(&a.images)?;
    let targets: Vec<PathBuf> = inputs
        .iter()
        .map(|p| a.out.join(Path::new(p.file_stem().unwrap_or_default()).with_extension("png")))
        .collect();
    let unique: BTreeSet<&PathBuf> = targets.iter().collect();
    if unique.len() != targets.len() {
        return Err(invalid("input images share a file stem; outputs would collide"));
    }
    for t in &targets {
        refuse_overwrite(t, a.force)?;
    }
    for (src, dst) in inputs.iter().zip(&targets) {
        let out = enhancer_forward(&load_image(src)?, &model)?;
        save_png(&out, dst)?;
        log::debug!("{} -> {}", src.display(), dst.display());
    }
    log::info!("enhanced {} images", inputs.len());
    Ok(())
}

pub fn eval_correlations(a: CorrelationsArgs) -> CmdResult {
    let cfg: config::CorrelationsConfig = config::load(a.config.as_deref())?;
    let model = QualityModel::load(&a.model)?;
    let manifest = load_corpus(&a.images)?;
    let split = load_split(a.config.as_deref(), cfg.split.as_ref(), &a.images)?;
    let scores = load_scores(&a.votes)?;
    let items = iqa_items(&manifest, &a.images, &scores, split.as_ref().map(|s| &s.test_content_ids))?;
    if items.len() < 2 {
        return Err(invalid("correlations need at least two scored images"));
    }
    let mut report = MetricReport::new("correlations");
    let mut preds = Vec::with_capacity(items.len());
    for item in &items {
        let p = iaca_forward(&item.image, &model)?.score;
        report.push(&item.id, p);
        preds.push(p);
    }
    let truth: Vec<f64> = items.iter().map(|i| i.score).collect();
    report.summary.insert("srocc".into(), srocc(&preds, &truth)?);
    report.summary.insert("plcc".into(), plcc(&preds, &truth)?);
    report.summary.insert("n".into(), items.len() as f64);
    emit_report(a.out.as_deref(), &report)
}

pub fn eval_scorediff(a: ScorediffArgs) -> CmdResult {
    let model = QualityModel::load(&a.model)?;
    let by_stem = |dir: &Path| -> Result<BTreeMap<String, PathBuf>, Failure> {
        Ok(image_inputs(dir)?
            .into_iter()
            .map(|p| (p.file_stem().unwrap_or_default().to_string_lossy().into_owned(), p))
            .collect())
    };
    let (base, opt) = (by_stem(&a.images[0])?, by_stem(&a.images[1])?);
    let mut pairs = Vec::new();
    for (stem, b) in &base {
        match opt.get(stem) {
            Some(o) => pairs.push(ScorePair {
                id: stem.clone(),
                baseline: load_image(b)?,
                optimized: load_image(o)?,
            }),
            None => log::warn!("{stem}: no optimized counterpart"),
        }
    }
    if pairs.is_empty() {
        return Err(invalid("no image stems appear in both directories"));
    }
    emit_report(a.out.as_deref(), &score_diff_report(&model, &pairs)?)
}

pub fn eval_preference(a: PreferenceArgs) -> CmdResult {
    let cfg: config::PreferenceConfig = config::load(a.config.as_deref())?;
    let votes = parse_vote_log(&read_text(&a.votes)?)?;
    emit_report(a.out.as_deref(), &preference_report(&votes, &cfg.ours)?)
}
