//! Tying-aware parameter storage.
//!
//! Every decoder block resolves to a storage slot. Tied layers share one
//! slot, so their weights are the same memory and stay identical through
//! any number of optimizer steps. Slots are kept compact and numbered in
//! order of the lowest layer that uses them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{GlobalLayout, LayerLayout, ModelConfig};
use super::scalar::Scalar;
use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::tying::{diff_events, EventDiff, TyingState};

const INIT_STD: f64 = 0.02;

/// One physical parameter set with its optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot<T> {
    pub params: Vec<T>,
    pub adam: AdamState<T>,
}

impl<T: Scalar> Slot<T> {
    fn new(params: Vec<T>) -> Self {
        let adam = AdamState::zeros(params.len());
        Slot { params, adam }
    }
}

/// How the store starts out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StartMode {
    /// Layers are independently initialized; only layer 0 trains and the
    /// bookkeeping state is all-zero until the first transition.
    FrozenTail,
    /// Like `FrozenTail` but nothing is frozen.
    AllTrainable,
    /// Fixed structure from step 0: representatives keep their own
    /// initialization and members alias them. Nothing is frozen.
    Static(TyingState),
}

/// Options for [`ParameterStore::apply_state`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransitionOptions {
    /// Copy weights at tie events but keep independent storage.
    pub replicate_only: bool,
    /// On the first transition only touch layers whose state changed,
    /// leaving unchanged layers at their initialization (and frozen).
    pub literal_first_transition: bool,
}

/// Per-slot and global gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub(crate) version: u64,
    pub globals: Vec<T>,
    /// `None` for frozen slots.
    pub slots: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn all_finite(&self) -> bool {
        self.globals.iter().all(|g| g.is_finite())
            && self
                .slots
                .iter()
                .flatten()
                .all(|s| s.iter().all(|g| g.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<T> {
    cfg: ModelConfig,
    layer_layout: LayerLayout,
    global_layout: GlobalLayout,
    pub(crate) globals: Slot<T>,
    pub(crate) slots: Vec<Slot<T>>,
    pub(crate) slot_of: Vec<usize>,
    tying: TyingState,
    frozen: Vec<bool>,
    first_transition_pending: bool,
    version: u64,
    adam_cfg: AdamConfig,
}

fn normal_vec<T: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Vec<T> {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    (0..n).map(|_| T::from_f64(dist.sample(rng))).collect()
}

fn init_layer<T: Scalar>(layout: &LayerLayout, rng: &mut ChaCha8Rng) -> Vec<T> {
    let d = layout.d_model;
    let f = layout.d_ffn;
    let mut p = vec![T::zero(); layout.len()];
    for (off, n) in [
        (layout.w_q, d * d),
        (layout.w_k, d * d),
        (layout.w_v, d * d),
        (layout.w_o, d * d),
        (layout.w_up, d * f),
        (layout.w_down, f * d),
    ] {
        p[off..off + n].copy_from_slice(&normal_vec::<T>(rng, n));
    }
    for off in [layout.ln1_g, layout.ln2_g] {
        p[off..off + d].iter_mut().for_each(|x| *x = T::one());
    }
    p
}

fn init_globals<T: Scalar>(cfg: &ModelConfig, layout: &GlobalLayout, rng: &mut ChaCha8Rng) -> Vec<T> {
    let (d, v, c) = (cfg.d_model, cfg.vocab_size, cfg.context_length);
    let mut p = vec![T::zero(); layout.len()];
    p[layout.tok_emb..layout.tok_emb + v * d].copy_from_slice(&normal_vec::<T>(rng, v * d));
    p[layout.pos_emb..layout.pos_emb + c * d].copy_from_slice(&normal_vec::<T>(rng, c * d));
    p[layout.lnf_g..layout.lnf_g + d]
        .iter_mut()
        .for_each(|x| *x = T::one());
    if let Some(w) = layout.w_out {
        p[w..w + d * v].copy_from_slice(&normal_vec::<T>(rng, d * v));
    }
    p
}

impl<T: Scalar> ParameterStore<T> {
    /// Initialization for the dynamic method: independent random layers,
    /// layers `1..L` frozen, bookkeeping state all-zero.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        Self::init_with(cfg, StartMode::FrozenTail)
    }

    pub fn init_with(cfg: &ModelConfig, mode: StartMode) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_layers;
        let layer_layout = cfg.layer_layout();
        let global_layout = cfg.global_layout();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let globals = Slot::new(init_globals(cfg, &global_layout, &mut rng));
        let layer_inits: Vec<Vec<T>> = (0..n).map(|_| init_layer(&layer_layout, &mut rng)).collect();

        let mut store = ParameterStore {
            cfg: cfg.clone(),
            layer_layout,
            global_layout,
            globals,
            slots: Vec::new(),
            slot_of: Vec::new(),
            tying: TyingState::zeros(n),
            frozen: vec![false; n],
            first_transition_pending: false,
            version: 0,
            adam_cfg: AdamConfig::default(),
        };
        match mode {
            StartMode::FrozenTail | StartMode::AllTrainable => {
                store.slots = layer_inits.into_iter().map(Slot::new).collect();
                store.slot_of = (0..n).collect();
                store.first_transition_pending = true;
                if mode == StartMode::FrozenTail {
                    store.frozen.iter_mut().skip(1).for_each(|f| *f = true);
                }
            }
            StartMode::Static(state) => {
                if state.n_layers() != n {
                    return Err(Error::LengthMismatch {
                        expected: n,
                        actual: state.n_layers(),
                        context: "static tying state",
                    });
                }
                let mut slot_of = vec![0; n];
                for (i, init) in layer_inits.into_iter().enumerate() {
                    let rep = state.representative(i);
                    if rep == i {
                        slot_of[i] = store.slots.len();
                        store.slots.push(Slot::new(init));
                    } else {
                        slot_of[i] = slot_of[rep];
                    }
                }
                store.slot_of = slot_of;
                store.tying = state;
            }
        }
        Ok(store)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layer_layout(&self) -> &LayerLayout {
        &self.layer_layout
    }

    pub fn global_layout(&self) -> &GlobalLayout {
        &self.global_layout
    }

    pub fn tying(&self) -> &TyingState {
        &self.tying
    }

    pub fn frozen(&self) -> &[bool] {
        &self.frozen
    }

    pub fn first_transition_pending(&self) -> bool {
        self.first_transition_pending
    }

    /// Bumped every time the physical layer-to-slot structure changes.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn slot_of(&self, layer: usize) -> usize {
        self.slot_of[layer]
    }

    pub fn slot_map(&self) -> &[usize] {
        &self.slot_of
    }

    pub fn layer_params(&self, layer: usize) -> &[T] {
        &self.slots[self.slot_of[layer]].params
    }

    pub fn slot_params(&self, slot: usize) -> &[T] {
        &self.slots[slot].params
    }

    pub fn slot_params_mut(&mut self, slot: usize) -> &mut [T] {
        &mut self.slots[slot].params
    }

    pub fn globals(&self) -> &[T] {
        &self.globals.params
    }

    pub fn globals_mut(&mut self) -> &mut [T] {
        &mut self.globals.params
    }

    pub fn slot(&self, slot: usize) -> &Slot<T> {
        &self.slots[slot]
    }

    pub(crate) fn slot_frozen(&self) -> Vec<bool> {
        let mut frozen = vec![false; self.slots.len()];
        for (layer, &s) in self.slot_of.iter().enumerate() {
            frozen[s] |= self.frozen[layer];
        }
        frozen
    }

    /// Block parameters that receive optimizer updates plus every global
    /// parameter.
    pub fn trainable_param_count(&self) -> usize {
        self.trainable_block_param_count() + self.global_layout.len()
    }

    pub fn trainable_block_param_count(&self) -> usize {
        let trainable = self.slot_frozen().iter().filter(|f| !**f).count();
        trainable * self.layer_layout.len()
    }

    /// Number of distinct block parameter sets that currently train.
    pub fn trainable_layer_sets(&self) -> usize {
        self.slot_frozen().iter().filter(|f| !**f).count()
    }

    /// True when all layers of every group hold byte-equal weights.
    pub fn groups_bit_identical(&self) -> bool {
        (0..self.cfg.n_layers).all(|i| {
            let rep = self.tying.representative(i);
            let a = self.layer_params(i);
            let b = self.layer_params(rep);
            a.len() == b.len()
                && a.iter()
                    .zip(b)
                    .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
        })
    }

    /// Moves the store to `new_state`, replicating and tying weights layer by
    /// layer in ascending order, and returns the state-change events.
    ///
    /// The first call after a `FrozenTail`/`AllTrainable` start first realizes
    /// the all-zero bookkeeping physically (every layer joins layer 0), so
    /// every layer ends up derived from layer 0's weights. All layers are
    /// unfrozen afterwards.
    pub fn apply_state(&mut self, new_state: &TyingState, opts: TransitionOptions) -> Result<EventDiff> {
        let diff = diff_events(&self.tying, new_state)?;
        let n = self.cfg.n_layers;
        let first = self.first_transition_pending;

        if first && !opts.literal_first_transition {
            let bookkeeping = self.tying.clone();
            for i in 0..n {
                let rep = bookkeeping.representative(i);
                if rep != i {
                    self.join(i, rep, opts.replicate_only);
                }
            }
        }

        let old = self.tying.clone();
        // Untied layers copy their previous group's weights as they were
        // before this transition, even if the group's representative moves
        // earlier in the loop.
        let mut untie_src: Vec<Option<Vec<T>>> = (0..n)
            .map(|i| {
                let prev = old.representative(i);
                (new_state.representative(i) == i && prev != i)
                    .then(|| self.slots[self.slot_of[prev]].params.clone())
            })
            .collect();
        for (i, src) in untie_src.iter_mut().enumerate() {
            let target = new_state.representative(i);
            if target == old.representative(i) {
                continue;
            }
            if let Some(copy) = src.take() {
                self.slot_of[i] = self.slots.len();
                self.slots.push(Slot::new(copy));
            } else {
                self.join(i, target, opts.replicate_only);
            }
            self.frozen[i] = false;
        }

        if first {
            if !opts.literal_first_transition {
                self.frozen.iter_mut().for_each(|f| *f = false);
            }
            self.first_transition_pending = false;
        }
        self.tying = new_state.clone();
        let changed = first || !diff.is_empty();
        if changed {
            self.compact();
            self.version += 1;
        }
        Ok(diff)
    }

    /// Makes layer `i` use `rep`'s weights, either by aliasing its slot or
    /// by copying them into `i`'s own slot with fresh moments.
    fn join(&mut self, i: usize, rep: usize, copy_only: bool) {
        let src = self.slot_of[rep];
        if copy_only {
            let dst = self.slot_of[i];
            if dst != src {
                let params = self.slots[src].params.clone();
                self.slots[dst] = Slot::new(params);
            }
        } else {
            self.slot_of[i] = src;
        }
    }

    /// Drops unreferenced slots and renumbers by first use.
    fn compact(&mut self) {
        let mut remap = vec![usize::MAX; self.slots.len()];
        let mut order = Vec::new();
        for s in self.slot_of.iter_mut() {
            if remap[*s] == usize::MAX {
                remap[*s] = order.len();
                order.push(*s);
            }
            *s = remap[*s];
        }
        let mut old: Vec<Option<Slot<T>>> = std::mem::take(&mut self.slots).into_iter().map(Some).collect();
        self.slots = order
            .into_iter()
            .map(|s| old[s].take().expect("each slot moved once"))
            .collect();
    }

    /// One Adam step per slot (not per stack position) and on the globals.
    pub fn optimizer_step(&mut self, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if grads.version != self.version || grads.slots.len() != self.slots.len() {
            return Err(Error::StaleGradients {
                computed: grads.version,
                current: self.version,
            });
        }
        let frozen = self.slot_frozen();
        let cfg = self.adam_cfg;
        for ((slot, grad), is_frozen) in self.slots.iter_mut().zip(&grads.slots).zip(frozen) {
            if is_frozen {
                continue;
            }
            if let Some(g) = grad {
                slot.adam.update(&mut slot.params, g, lr, &cfg);
            }
        }
        let g = &mut self.globals;
        g.adam.update(&mut g.params, &grads.globals, lr, &cfg);
        Ok(())
    }

    /// Reassembles a store from decoded checkpoint parts. Optimizer moments
    /// start at zero.
    pub(crate) fn from_parts(
        cfg: ModelConfig,
        tying: TyingState,
        frozen: Vec<bool>,
        slot_of: Vec<usize>,
        globals: Vec<T>,
        slots: Vec<Vec<T>>,
        first_transition_pending: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let layer_layout = cfg.layer_layout();
        let global_layout = cfg.global_layout();
        let n = cfg.n_layers;
        let bad = |m: String| Error::format("checkpoint", m);
        if tying.n_layers() != n || frozen.len() != n || slot_of.len() != n {
            return Err(bad("per-layer vectors do not match n_layers".into()));
        }
        if globals.len() != global_layout.len() {
            return Err(bad("global parameter length mismatch".into()));
        }
        let mut seen = vec![false; slots.len()];
        let mut next = 0;
        for &s in &slot_of {
            if s >= slots.len() {
                return Err(bad(format!("slot {s} out of range")));
            }
            if !seen[s] {
                if s != next {
                    return Err(bad("slots are not numbered by first use".into()));
                }
                seen[s] = true;
                next += 1;
            }
        }
        if next != slots.len() {
            return Err(bad("unreferenced slot".into()));
        }
        if slots.iter().any(|p| p.len() != layer_layout.len()) {
            return Err(bad("layer parameter length mismatch".into()));
        }
        Ok(ParameterStore {
            cfg,
            layer_layout,
            global_layout,
            globals: Slot::new(globals),
            slots: slots.into_iter().map(Slot::new).collect(),
            slot_of,
            tying,
            frozen,
            first_transition_pending,
            version: 0,
            adam_cfg: AdamConfig::default(),
        })
    }
}
