//! Replays the checked-in fuzz seed corpora through the parsers, so seeds
//! stay meaningful and no seed panics on stable builds.

use std::fs;
use std::path::PathBuf;

use cmtm::cli::{parse_config_text, RunConfig};
use cmtm::corpus::io::{parse_aligned, parse_tsv};
use cmtm::corpus::Vocab;
use cmtm::model::{Checkpoint, Model};
use cmtm::training::parse_metrics_log;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let path = e.unwrap().path();
            (path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path).unwrap())
        })
        .collect();
    out.sort();
    assert!(out.len() >= 2, "{target} has too few seeds");
    out
}

fn text(bytes: &[u8]) -> &str {
    std::str::from_utf8(bytes).unwrap()
}

#[test]
fn checkpoint_seeds() {
    let mut parsed = 0;
    for (name, bytes) in seeds("checkpoint") {
        if let Ok(ckpt) = Checkpoint::from_bytes(&bytes) {
            assert_eq!(ckpt.to_bytes(), bytes, "{name}");
            Model::from_checkpoint(&ckpt).unwrap();
            parsed += 1;
        }
    }
    assert!(parsed >= 1);
}

#[test]
fn config_seeds() {
    let mut resolved = 0;
    for (_, bytes) in seeds("config") {
        if let Ok(values) = parse_config_text(text(&bytes)) {
            if RunConfig::resolve(values, std::iter::empty()).is_ok() {
                resolved += 1;
            }
        }
    }
    assert!(resolved >= 2);
}

#[test]
fn vocab_seeds() {
    let ok: Vec<bool> = seeds("vocab").iter().map(|(_, b)| Vocab::from_text(text(b)).is_ok()).collect();
    assert!(ok.contains(&true) && ok.contains(&false));
}

#[test]
fn tsv_seeds() {
    let ok: Vec<bool> = seeds("tsv").iter().map(|(_, b)| parse_tsv(text(b)).is_ok()).collect();
    assert!(ok.contains(&true) && ok.contains(&false));
}

#[test]
fn aligned_seeds() {
    let ok: Vec<bool> = seeds("aligned")
        .iter()
        .map(|(_, b)| {
            let (s, t) = text(b).split_once('\0').unwrap();
            parse_aligned(s, t).is_ok()
        })
        .collect();
    assert!(ok.contains(&true) && ok.contains(&false));
}

#[test]
fn metrics_log_seeds() {
    let ok: Vec<bool> = seeds("metrics_log").iter().map(|(_, b)| parse_metrics_log(text(b)).is_ok()).collect();
    assert!(ok.contains(&true) && ok.contains(&false));
}

#[test]
fn mask_predict_seeds_are_well_formed() {
    for (name, bytes) in seeds("mask_predict") {
        assert!(bytes.len() >= 3, "{name}");
    }
}
