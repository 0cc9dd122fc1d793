//! Runs the checked-in fuzz seeds through the same entry points as the fuzz
//! targets, so the corpus stays parseable as formats evolve.

use std::fs;
use std::path::{Path, PathBuf};

use layertie::ablations::{Permutation, ReplaySchedule};
use layertie::config::RunConfig;
use layertie::data::Corpus;
use layertie::model::checkpoint;
use layertie::qcontroller::QNet;
use layertie::trainer::read_trajectory_bytes;
use layertie::tying::{canonicalize, ActionVector, TyingState};

/// Seeds whose name starts with one of these are expected to be rejected.
const REJECTED: [&str; 5] = ["invalid", "duplicate", "unknown", "empty", "truncated"];

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn expect(target: &str, name: &str, ok: bool) {
    let rejected = REJECTED.iter().any(|p| name.starts_with(p));
    assert_eq!(ok, !rejected, "{target}/{name}: parsed = {ok}");
}

#[test]
fn state_seeds() {
    for (name, data) in seeds("parse_state") {
        let state = serde_json::from_slice::<TyingState>(&data);
        let action = serde_json::from_slice::<ActionVector>(&data);
        if let Ok(a) = &action {
            assert!(TyingState::new(canonicalize(a).as_slice().to_vec()).is_ok());
        }
        // Actions are the looser format.
        expect("parse_state", &name, action.is_ok());
        if name.starts_with("action") {
            assert!(state.is_err());
        } else if action.is_ok() {
            assert!(state.is_ok(), "{name}");
        }
    }
}

#[test]
fn permutation_seeds() {
    for (name, data) in seeds("parse_permutation") {
        expect("parse_permutation", &name, Permutation::from_json(&data).is_ok());
    }
}

#[test]
fn config_seeds() {
    for (name, data) in seeds("parse_config") {
        let (doc, rest) = match data.iter().position(|&b| b == 0) {
            Some(i) => (&data[..i], &data[i + 1..]),
            None => (&data[..], &[][..]),
        };
        let overrides: Vec<String> = String::from_utf8_lossy(rest).lines().map(str::to_string).collect();
        expect(
            "parse_config",
            &name,
            RunConfig::from_json_with_overrides(doc, &overrides).is_ok(),
        );
    }
}

#[test]
fn corpus_seeds() {
    for (name, data) in seeds("parse_corpus") {
        expect("parse_corpus", &name, Corpus::from_bytes(data, 0.1).is_ok());
    }
}

#[test]
fn trajectory_seeds() {
    for (name, data) in seeds("parse_trajectory") {
        let parsed = read_trajectory_bytes(&data);
        if let Ok(records) = &parsed {
            if let Some(first) = records.first() {
                ReplaySchedule::from_trajectory(records, first.state.n_layers(), None).unwrap();
            }
        }
        expect("parse_trajectory", &name, parsed.is_ok());
    }
}

#[test]
fn checkpoint_seeds() {
    for (name, data) in seeds("decode_checkpoint") {
        let ok = data.len() >= 4 && {
            let n = u32::from_le_bytes(data[..4].try_into().unwrap()) as usize;
            let body = &data[4..];
            n <= body.len() && {
                let (m, p) = body.split_at(n);
                checkpoint::decode_bytes::<f32>(m, p).is_ok()
            }
        };
        expect("decode_checkpoint", &name, ok);
    }
}

#[test]
fn qnet_seeds() {
    for (name, data) in seeds("decode_qnet") {
        expect("decode_qnet", &name, QNet::decode_checkpoint(&data).is_ok());
    }
}
