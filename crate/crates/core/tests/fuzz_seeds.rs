//! Replays the fuzz corpus seeds through the parsers they target.

use std::path::PathBuf;

use percept_core::dataio::{decode_image, CorpusManifest, SplitSpec};
use percept_core::enhance::EnhancerManifest;
use percept_core::iqa::ModelManifest;
use percept_core::params::ParamStore;
use percept_core::study::{parse_scores_csv, parse_vote_log};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn text(bytes: &[u8]) -> &str {
    std::str::from_utf8(bytes).unwrap()
}

// Seeds named `reject_*` exercise error paths.
fn check<T, E: std::fmt::Display>(name: &str, result: Result<T, E>) {
    match result {
        Ok(_) => assert!(!name.starts_with("reject_"), "{name} parsed"),
        Err(e) => assert!(name.starts_with("reject_"), "{name}: {e}"),
    }
}

#[test]
fn param_blob_seeds_round_trip() {
    for (name, bytes) in seeds("param_blob") {
        let store = ParamStore::from_bytes(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(store.to_bytes(), bytes, "{name}");
    }
}

#[test]
fn json_seeds_parse() {
    for (name, b) in seeds("corpus_manifest") {
        check(&name, CorpusManifest::parse(text(&b)));
    }
    for (name, b) in seeds("split_spec") {
        check(&name, SplitSpec::parse(text(&b)));
    }
    for (name, b) in seeds("model_manifest") {
        check(&name, ModelManifest::parse(text(&b)));
    }
    for (name, b) in seeds("enhancer_manifest") {
        check(&name, EnhancerManifest::parse(text(&b)));
    }
    for (name, b) in seeds("vote_log") {
        check(&name, parse_vote_log(text(&b)));
    }
    for (name, b) in seeds("scores_csv") {
        check(&name, parse_scores_csv(text(&b)));
    }
}

#[test]
fn image_seeds_decode() {
    for (name, bytes) in seeds("image_decode") {
        check(&name, decode_image(&bytes));
    }
}
