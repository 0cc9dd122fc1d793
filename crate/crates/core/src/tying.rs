//! Tying states, action vectors and the packed Q-output layout.
//!
//! A [`TyingState`] maps every layer to the lowest-index layer sharing its
//! weights. An [`ActionVector`] is what the controller emits: each entry may
//! point at any earlier layer, and [`canonicalize`] resolves the chain.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_prefix_bounded(entries: &[usize], what: &str) -> Result<()> {
    if entries.is_empty() {
        return Err(Error::InvalidState(format!("{what} must have at least one layer")));
    }
    for (i, &e) in entries.iter().enumerate() {
        if e > i {
            return Err(Error::InvalidState(format!(
                "{what}[{i}] = {e} points forward (must be <= {i})"
            )));
        }
    }
    Ok(())
}

/// Canonical per-layer tying vector.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct TyingState(Vec<usize>);

impl TyingState {
    /// Validates `entries` as a canonical tying vector.
    pub fn new(entries: Vec<usize>) -> Result<Self> {
        check_prefix_bounded(&entries, "state")?;
        for (i, &e) in entries.iter().enumerate() {
            if entries[e] != e {
                return Err(Error::InvalidState(format!(
                    "state[{i}] = {e} but state[{e}] = {} (representative must point to itself)",
                    entries[e]
                )));
            }
        }
        Ok(TyingState(entries))
    }

    /// Every layer independent.
    pub fn identity(n_layers: usize) -> Self {
        TyingState((0..n_layers).collect())
    }

    /// Every layer in layer 0's group.
    pub fn zeros(n_layers: usize) -> Self {
        TyingState(vec![0; n_layers])
    }

    pub fn n_layers(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn representative(&self, layer: usize) -> usize {
        self.0[layer]
    }

    pub fn is_independent(&self, layer: usize) -> bool {
        self.0[layer] == layer
    }

    /// Reinterprets the state as an action; canonicalizing it is a no-op.
    pub fn to_action(&self) -> ActionVector {
        ActionVector(self.0.clone())
    }
}

impl TryFrom<Vec<usize>> for TyingState {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        TyingState::new(v)
    }
}

impl From<TyingState> for Vec<usize> {
    fn from(s: TyingState) -> Self {
        s.0
    }
}

impl fmt::Debug for TyingState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TyingState{:?}", self.0)
    }
}

/// Raw controller output; `entries[i]` is any layer in `0..=i`.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ActionVector(Vec<usize>);

impl ActionVector {
    pub fn new(entries: Vec<usize>) -> Result<Self> {
        check_prefix_bounded(&entries, "action")?;
        Ok(ActionVector(entries))
    }

    pub fn zeros(n_layers: usize) -> Self {
        ActionVector(vec![0; n_layers])
    }

    pub fn n_layers(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

impl TryFrom<Vec<usize>> for ActionVector {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        ActionVector::new(v)
    }
}

impl From<ActionVector> for Vec<usize> {
    fn from(a: ActionVector) -> Self {
        a.0
    }
}

impl fmt::Debug for ActionVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ActionVector{:?}", self.0)
    }
}

/// Resolves an action into its canonical state: `s[i] = i` when `a[i] == i`,
/// otherwise `s[i] = s[a[i]]`, evaluated in ascending order.
pub fn canonicalize(action: &ActionVector) -> TyingState {
    let a = action.as_slice();
    let mut s = Vec::with_capacity(a.len());
    for (i, &target) in a.iter().enumerate() {
        let rep = if target == i { i } else { s[target] };
        s.push(rep);
    }
    TyingState(s)
}

/// Same as [`canonicalize`], for raw slices that have not been validated.
pub fn canonicalize_raw(entries: &[usize]) -> Result<TyingState> {
    Ok(canonicalize(&ActionVector::new(entries.to_vec())?))
}

/// Partition of the layers into weight-sharing groups, ordered by
/// representative. Each group is sorted ascending.
pub fn groups(state: &TyingState) -> Vec<Vec<usize>> {
    let mut by_rep: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &r) in state.as_slice().iter().enumerate() {
        by_rep.entry(r).or_default().push(i);
    }
    by_rep.into_values().collect()
}

/// Number of group representatives (`s[i] == i`).
pub fn count_independent(state: &TyingState) -> usize {
    state
        .as_slice()
        .iter()
        .enumerate()
        .filter(|&(i, &r)| i == r)
        .count()
}

/// Layers that changed state between two consecutive tying states.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventDiff {
    pub tied_events: Vec<usize>,
    pub untied_events: Vec<usize>,
}

impl EventDiff {
    pub fn is_empty(&self) -> bool {
        self.tied_events.is_empty() && self.untied_events.is_empty()
    }
}

/// Classifies every changed layer: untied when it becomes its own
/// representative, tied otherwise.
pub fn diff_events(old: &TyingState, new: &TyingState) -> Result<EventDiff> {
    if old.n_layers() != new.n_layers() {
        return Err(Error::LengthMismatch {
            expected: old.n_layers(),
            actual: new.n_layers(),
            context: "diff_events",
        });
    }
    let mut diff = EventDiff::default();
    for (i, (&before, &after)) in old.as_slice().iter().zip(new.as_slice()).enumerate() {
        if before == after {
            continue;
        }
        if after == i {
            diff.untied_events.push(i);
        } else {
            diff.tied_events.push(i);
        }
    }
    Ok(diff)
}

/// Draws each coordinate independently and uniformly from `0..=i`.
pub fn uniform_random_action<R: Rng + ?Sized>(n_layers: usize, rng: &mut R) -> ActionVector {
    assert!(n_layers >= 1, "an action needs at least one layer");
    let mut a = Vec::with_capacity(n_layers);
    a.push(0);
    for i in 1..n_layers {
        a.push(rng.gen_range(0..=i));
    }
    ActionVector(a)
}

/// Number of joint actions for `n_layers` layers, i.e. `n_layers!`.
pub fn action_space_size(n_layers: usize) -> u128 {
    (1..=n_layers as u128).product()
}

/// Position of one (layer, choice) Q-value inside the packed output vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackedIndex {
    pub layer: usize,
    pub choice: usize,
}

/// Length of the packed Q-output for `n_layers` layers: `(L+2)(L-1)/2`.
pub fn packed_len(n_layers: usize) -> usize {
    if n_layers < 2 {
        return 0;
    }
    (n_layers + 2) * (n_layers - 1) / 2
}

fn row_start(layer: usize) -> usize {
    (layer - 1) * (layer + 2) / 2
}

impl PackedIndex {
    pub fn new(layer: usize, choice: usize, n_layers: usize) -> Result<Self> {
        if layer == 0 || layer >= n_layers {
            return Err(Error::OutOfRange(format!(
                "packed layer {layer} outside [1, {})",
                n_layers
            )));
        }
        if choice > layer {
            return Err(Error::OutOfRange(format!(
                "choice {choice} exceeds layer {layer}"
            )));
        }
        Ok(PackedIndex { layer, choice })
    }

    /// `(layer-1)(layer+2)/2 + choice`.
    pub fn flat_offset(self) -> usize {
        row_start(self.layer) + self.choice
    }

    pub fn unpack(offset: usize, n_layers: usize) -> Result<Self> {
        let total = packed_len(n_layers);
        if offset >= total {
            return Err(Error::OutOfRange(format!(
                "offset {offset} outside packed length {total}"
            )));
        }
        let mut layer = 1;
        while row_start(layer + 1) <= offset {
            layer += 1;
        }
        Ok(PackedIndex {
            layer,
            choice: offset - row_start(layer),
        })
    }
}

/// Range of the packed vector holding the Q-values of `layer`'s choices.
pub fn packed_row(layer: usize) -> std::ops::Range<usize> {
    let start = row_start(layer);
    start..start + layer + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn st(v: &[usize]) -> TyingState {
        TyingState::new(v.to_vec()).unwrap()
    }

    #[test]
    fn canonicalize_examples() {
        let cases: [(&[usize], &[usize]); 3] = [
            (&[0, 1, 2, 3], &[0, 1, 2, 3]),
            (&[0, 0, 0, 0], &[0, 0, 0, 0]),
            (&[0, 1, 1, 2], &[0, 1, 1, 1]),
        ];
        for (a, s) in cases {
            let got = canonicalize(&ActionVector::new(a.to_vec()).unwrap());
            assert_eq!(got.as_slice(), s);
        }
    }

    #[test]
    fn malformed_actions_rejected() {
        assert!(ActionVector::new(vec![0, 2]).is_err());
        assert!(ActionVector::new(vec![1]).is_err());
        assert!(ActionVector::new(vec![]).is_err());
        assert!(canonicalize_raw(&[0, 0, 3]).is_err());
    }

    #[test]
    fn non_canonical_state_rejected() {
        assert!(TyingState::new(vec![0, 1, 1, 2]).is_err());
        assert!(TyingState::new(vec![0, 0, 1]).is_err());
        assert!(TyingState::new(vec![0, 1, 1, 1]).is_ok());
    }

    #[test]
    fn groups_examples() {
        assert_eq!(groups(&st(&[0, 1, 1, 1])), vec![vec![0], vec![1, 2, 3]]);
        assert_eq!(groups(&st(&[0, 0, 0, 0])), vec![vec![0, 1, 2, 3]]);
        assert_eq!(
            groups(&st(&[0, 1, 2, 3])),
            vec![vec![0], vec![1], vec![2], vec![3]]
        );
    }

    #[test]
    fn independent_counts() {
        assert_eq!(count_independent(&st(&[0, 1, 1, 1])), 2);
        assert_eq!(count_independent(&st(&[0, 0, 0, 0])), 1);
        assert_eq!(count_independent(&st(&[0, 1, 2, 3])), 4);
    }

    #[test]
    fn event_examples() {
        let d = diff_events(&st(&[0, 0, 2, 2]), &st(&[0, 1, 2, 0])).unwrap();
        assert_eq!(d.tied_events, vec![3]);
        assert_eq!(d.untied_events, vec![1]);

        let s = st(&[0, 1, 1, 3]);
        assert!(diff_events(&s, &s).unwrap().is_empty());

        let d = diff_events(&st(&[0, 0]), &st(&[0, 1])).unwrap();
        assert!(d.tied_events.is_empty());
        assert_eq!(d.untied_events, vec![1]);

        assert!(diff_events(&st(&[0, 0]), &st(&[0, 0, 0])).is_err());
    }

    #[test]
    fn random_action_single_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(uniform_random_action(1, &mut rng).as_slice(), &[0]);
        }
    }

    #[test]
    fn random_action_marginals_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let a = uniform_random_action(3, &mut rng);
            assert_eq!(a.as_slice()[0], 0);
            counts[a.as_slice()[2]] += 1;
        }
        for c in counts {
            let p = c as f64 / n as f64;
            assert!((p - 1.0 / 3.0).abs() < 0.01, "p = {p}");
        }
    }

    #[test]
    fn action_space_is_factorial() {
        assert_eq!(action_space_size(5), 120);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..20_000 {
            seen.insert(uniform_random_action(5, &mut rng));
        }
        assert_eq!(seen.len(), 120);
    }

    #[test]
    fn packed_layout_examples() {
        assert_eq!(packed_len(48), 1175);
        assert_eq!(packed_len(3), 5);
        assert_eq!(PackedIndex::new(1, 0, 4).unwrap().flat_offset(), 0);
        assert_eq!(PackedIndex::new(2, 2, 4).unwrap().flat_offset(), 4);
        assert!(PackedIndex::unpack(5, 3).is_err());
        assert!(PackedIndex::new(0, 0, 3).is_err());
        assert!(PackedIndex::new(2, 3, 3).is_err());
        assert_eq!(packed_row(2), 2..5);
    }

    #[test]
    fn state_json_is_integer_array() {
        let s = st(&[0, 1, 1]);
        assert_eq!(serde_json::to_string(&s).unwrap(), "[0,1,1]");
        let back: TyingState = serde_json::from_str("[0,1,1]").unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<TyingState>("[0,0,1]").is_err());
        let a: ActionVector = serde_json::from_str("[0,1,1,2]").unwrap();
        assert_eq!(a.as_slice(), &[0, 1, 1, 2]);
    }
}
