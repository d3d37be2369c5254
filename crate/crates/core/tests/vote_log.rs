use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};

use percept_core::study::{parse_vote_log, Choice, VoteLog, VoteRecord};
use percept_core::Error;

fn record(subject: usize, content: usize) -> VoteRecord {
    VoteRecord {
        study_id: "conc".into(),
        subject_id: format!("s{subject:04}"),
        content_id: format!("c{content}"),
        method_a: "x".into(),
        method_b: "y".into(),
        choice: if subject % 2 == 0 { Choice::A } else { Choice::B },
        presented_left: Choice::A,
        elapsed_ms: 1000,
        is_sanity: false,
        timestamp_ms: subject as u64,
    }
}

#[test]
fn a_thousand_concurrent_votes_are_all_logged_once() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("votes.jsonl");
    let log = VoteLog::open(&path).unwrap();
    let sequences: Vec<u64> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..1000)
            .map(|i| {
                let log = &log;
                scope.spawn(move || log.record_vote(record(i, i % 7)).unwrap().sequence)
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let unique: BTreeSet<u64> = sequences.iter().copied().collect();
    assert_eq!(unique, (1..=1000).collect());

    let on_disk = parse_vote_log(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(on_disk.len(), 1000);
    assert_eq!(on_disk, log.records(), "file order matches sequence order");
    let subjects: BTreeSet<&str> = on_disk.iter().map(|r| r.subject_id.as_str()).collect();
    assert_eq!(subjects.len(), 1000);
}

#[test]
fn racing_duplicates_are_accepted_exactly_once() {
    let log = VoteLog::in_memory();
    let accepted = AtomicUsize::new(0);
    let rejected = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for t in 0..16 {
            let (log, accepted, rejected) = (&log, &accepted, &rejected);
            scope.spawn(move || {
                let mut r = record(1, 1);
                // same trial key whichever way the pair is ordered
                if t % 2 == 1 {
                    std::mem::swap(&mut r.method_a, &mut r.method_b);
                }
                match log.record_vote(r) {
                    Ok(_) => accepted.fetch_add(1, Ordering::SeqCst),
                    Err(Error::DuplicateTrial(_)) => rejected.fetch_add(1, Ordering::SeqCst),
                    Err(e) => panic!("unexpected {e}"),
                };
            });
        }
    });
    assert_eq!(accepted.into_inner(), 1);
    assert_eq!(rejected.into_inner(), 15);
    assert_eq!(log.len(), 1);
}

#[test]
fn reopening_refuses_a_log_with_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("votes.jsonl");
    let line = serde_json::to_string(&record(3, 3)).unwrap();
    std::fs::write(&path, format!("{line}\n{line}\n")).unwrap();
    assert!(matches!(VoteLog::open(&path), Err(Error::DuplicateTrial(_))));
}

#[test]
fn invalid_records_are_not_written() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("votes.jsonl");
    let log = VoteLog::open(&path).unwrap();
    let mut r = record(1, 1);
    r.method_b = r.method_a.clone();
    assert!(log.record_vote(r).is_err());
    let mut r = record(2, 1);
    r.elapsed_ms = 0;
    assert!(log.record_vote(r).is_err());
    assert!(log.is_empty());
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "");
}
