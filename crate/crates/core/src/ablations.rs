//! Fixed tying patterns and replay of recorded tying trajectories.
//!
//! Patterns use 0-based layers. Pairing "layer i with layer L-i" in 1-based
//! terms becomes pairing `i` with `L-1-i` here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{TrainerConfig, TrajectoryRecord};
use crate::tying::{groups, TyingState};

/// A static tying pattern.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PatternSpec {
    /// Layer `L/2 + i` shares layer `i`.
    Cycle,
    /// Layer `L-1-i` shares layer `i`.
    CycleRev,
    /// Layer `2i+1` shares layer `2i`.
    Sequence,
    /// An explicit state, e.g. the final state of a finished run.
    FixedCustom { state: TyingState },
}

impl PatternSpec {
    pub fn parse_kind(name: &str) -> Result<Self> {
        match name {
            "cycle" => Ok(PatternSpec::Cycle),
            "cycle_rev" => Ok(PatternSpec::CycleRev),
            "sequence" => Ok(PatternSpec::Sequence),
            other => Err(Error::config(
                "pattern",
                format!("unknown pattern {other:?} (expected cycle, cycle_rev or sequence)"),
            )),
        }
    }
}

pub fn pattern_state(spec: &PatternSpec, n_layers: usize) -> Result<TyingState> {
    let paired = |f: &dyn Fn(usize, &mut [usize])| -> Result<TyingState> {
        if n_layers < 2 || !n_layers.is_multiple_of(2) {
            return Err(Error::config(
                "pattern",
                format!("paired patterns need an even layer count >= 2, got {n_layers}"),
            ));
        }
        let mut s: Vec<usize> = (0..n_layers).collect();
        for i in 0..n_layers / 2 {
            f(i, &mut s);
        }
        TyingState::new(s)
    };
    let half = n_layers / 2;
    match spec {
        PatternSpec::Cycle => paired(&|i, s| s[half + i] = i),
        PatternSpec::CycleRev => paired(&|i, s| s[n_layers - 1 - i] = i),
        PatternSpec::Sequence => paired(&|i, s| s[2 * i + 1] = 2 * i),
        PatternSpec::FixedCustom { state } => {
            if state.n_layers() != n_layers {
                return Err(Error::LengthMismatch {
                    expected: n_layers,
                    actual: state.n_layers(),
                    context: "custom pattern state",
                });
            }
            Ok(state.clone())
        }
    }
}

/// A bijection on layer indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for (i, &p) in map.iter().enumerate() {
            if p >= map.len() || seen[p] {
                return Err(Error::InvalidInput(format!(
                    "permutation entry {i} = {p} is out of range or repeated"
                )));
            }
            seen[p] = true;
        }
        Ok(Permutation(map))
    }

    pub fn identity(n: usize) -> Self {
        Permutation((0..n).collect())
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn apply(&self, i: usize) -> usize {
        self.0[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Permutation::new(v)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.0
    }
}

/// Maps every group of `state` through `perm` and relabels each image group
/// by its minimum, so the result is always canonical.
pub fn permute_state(state: &TyingState, perm: &Permutation) -> Result<TyingState> {
    if perm.len() != state.n_layers() {
        return Err(Error::InvalidInput(format!(
            "permutation has length {} but the state has {} layers",
            perm.len(),
            state.n_layers()
        )));
    }
    let mut out = vec![0; state.n_layers()];
    for group in groups(state) {
        let image: Vec<usize> = group.iter().map(|&i| perm.apply(i)).collect();
        let rep = *image.iter().min().expect("groups are non-empty");
        for y in image {
            out[y] = rep;
        }
    }
    TyingState::new(out)
}

/// A recorded tying state to apply after a given training step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub step: usize,
    pub state: TyingState,
}

/// States to apply at fixed steps, driving the trainer without a controller.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReplaySchedule {
    pub entries: Vec<ReplayEntry>,
}

impl ReplaySchedule {
    pub fn from_trajectory(
        records: &[TrajectoryRecord],
        n_layers: usize,
        permutation: Option<&Permutation>,
    ) -> Result<Self> {
        if let Some(p) = permutation {
            if p.len() != n_layers {
                return Err(Error::InvalidInput(format!(
                    "permutation has length {} but the model has {n_layers} layers",
                    p.len()
                )));
            }
        }
        let mut entries = Vec::with_capacity(records.len());
        let mut last_step = 0;
        for r in records {
            if r.state.n_layers() != n_layers {
                return Err(Error::LengthMismatch {
                    expected: n_layers,
                    actual: r.state.n_layers(),
                    context: "trajectory state vs model layers",
                });
            }
            if r.step <= last_step && !entries.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "trajectory steps must increase (step {} after {last_step})",
                    r.step
                )));
            }
            last_step = r.step;
            let state = match permutation {
                Some(p) => permute_state(&r.state, p)?,
                None => r.state.clone(),
            };
            entries.push(ReplayEntry {
                step: r.step,
                state,
            });
        }
        Ok(ReplaySchedule { entries })
    }
}

/// Replication without tying: copies happen, storage stays independent.
pub fn no_tie_mode(cfg: TrainerConfig, enabled: bool) -> TrainerConfig {
    TrainerConfig {
        no_tie: enabled,
        ..cfg
    }
}

/// Skips the initial freeze of layers `1..L`.
pub fn all_trainable_init(cfg: TrainerConfig, enabled: bool) -> TrainerConfig {
    TrainerConfig {
        all_trainable_init: enabled,
        ..cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tying::count_independent;

    #[test]
    fn hand_derived_patterns() {
        let s = |spec, l| pattern_state(&spec, l).unwrap().as_slice().to_vec();
        assert_eq!(s(PatternSpec::Cycle, 4), vec![0, 1, 0, 1]);
        assert_eq!(s(PatternSpec::CycleRev, 4), vec![0, 1, 1, 0]);
        assert_eq!(s(PatternSpec::Sequence, 4), vec![0, 0, 2, 2]);
        assert_eq!(s(PatternSpec::Cycle, 8), vec![0, 1, 2, 3, 0, 1, 2, 3]);
        assert_eq!(s(PatternSpec::CycleRev, 8), vec![0, 1, 2, 3, 3, 2, 1, 0]);
        assert_eq!(s(PatternSpec::Sequence, 8), vec![0, 0, 2, 2, 4, 4, 6, 6]);
    }

    #[test]
    fn patterns_halve_independent_layers() {
        for l in [2, 4, 6, 8, 12] {
            for spec in [PatternSpec::Cycle, PatternSpec::CycleRev, PatternSpec::Sequence] {
                let s = pattern_state(&spec, l).unwrap();
                assert_eq!(count_independent(&s), l / 2);
            }
        }
    }

    #[test]
    fn odd_layer_count_rejected() {
        assert!(pattern_state(&PatternSpec::Cycle, 5).is_err());
        assert!(pattern_state(&PatternSpec::Sequence, 0).is_err());
    }

    #[test]
    fn custom_pattern_checks_length() {
        let spec = PatternSpec::FixedCustom {
            state: TyingState::zeros(3),
        };
        assert!(pattern_state(&spec, 4).is_err());
        assert_eq!(pattern_state(&spec, 3).unwrap(), TyingState::zeros(3));
    }

    #[test]
    fn permutation_validation() {
        assert!(Permutation::new(vec![0, 0]).is_err());
        assert!(Permutation::new(vec![0, 2]).is_err());
        assert!(Permutation::from_json(b"[2,0,1]").is_ok());
        assert!(Permutation::from_json(b"[2,0,0]").is_err());
        let s = TyingState::zeros(3);
        let err = permute_state(&s, &Permutation::identity(4)).unwrap_err();
        assert!(err.to_string().contains("length 4"));
    }

    #[test]
    fn permuting_relabels_by_minimum() {
        let s = TyingState::new(vec![0, 1, 1, 0]).unwrap();
        let p = Permutation::new(vec![3, 0, 2, 1]).unwrap();
        // {0,3} -> {3,1}; {1,2} -> {0,2}
        assert_eq!(permute_state(&s, &p).unwrap().as_slice(), &[0, 1, 0, 1]);
        // a permutation fixing every group leaves the state alone
        let fix = Permutation::new(vec![3, 2, 1, 0]).unwrap();
        assert_eq!(permute_state(&s, &fix).unwrap(), s);
    }

    #[test]
    fn pattern_spec_json() {
        let spec: PatternSpec = serde_json::from_str(r#"{"kind":"cycle_rev"}"#).unwrap();
        assert_eq!(spec, PatternSpec::CycleRev);
        let spec: PatternSpec =
            serde_json::from_str(r#"{"kind":"fixed_custom","state":[0,0,2]}"#).unwrap();
        assert!(matches!(spec, PatternSpec::FixedCustom { .. }));
    }
}
