//! Q-function approximator and the epsilon-greedy controller around it.
//!
//! The network maps the normalized tying state (layers `1..L`) to a packed
//! vector holding one Q-value per (layer, choice) pair. The value of a joint
//! action is the sum of the entries it selects, so the joint argmax and max
//! decompose into independent per-layer row maxima.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::tying::{packed_len, packed_row, uniform_random_action, ActionVector, TyingState};

pub const DEFAULT_HIDDEN_UNITS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub gamma: f64,
    pub epsilon: f64,
    pub epsilon_decay: f64,
    pub epsilon_floor: f64,
    pub learning_rate: f64,
    pub hidden_units: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            gamma: 0.99,
            epsilon: 1.0,
            epsilon_decay: 0.95,
            epsilon_floor: 0.1,
            learning_rate: 1e-3,
            hidden_units: DEFAULT_HIDDEN_UNITS,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config("controller.gamma", "must lie in [0, 1)"));
        }
        if !(0.0 <= self.epsilon_floor && self.epsilon_floor <= self.epsilon && self.epsilon <= 1.0)
        {
            return Err(Error::config(
                "controller.epsilon",
                "need 0 <= epsilon_floor <= epsilon <= 1",
            ));
        }
        if !(self.epsilon_decay > 0.0 && self.epsilon_decay < 1.0) {
            return Err(Error::config("controller.epsilon_decay", "must lie in (0, 1)"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("controller.learning_rate", "must be positive"));
        }
        if self.hidden_units == 0 {
            return Err(Error::config("controller.hidden_units", "must be >= 1"));
        }
        Ok(())
    }

    /// `epsilon <- max(epsilon * decay, floor)`.
    pub fn decay_epsilon(&mut self) {
        self.epsilon = (self.epsilon * self.epsilon_decay).max(self.epsilon_floor);
    }
}

/// One-hidden-layer ReLU MLP with packed ragged output.
///
/// Parameters live in one flat buffer laid out as `[w1, b1, w2, b2]`, with
/// `w1` stored input-major (`input_dim x hidden`) and `w2` hidden-major.
#[derive(Debug, Clone, PartialEq)]
pub struct QNet {
    n_layers: usize,
    hidden: usize,
    seed: u64,
    params: Vec<f64>,
}

impl QNet {
    /// Uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(n_layers: usize, hidden: usize, seed: u64) -> Self {
        assert!(n_layers >= 1 && hidden >= 1);
        let mut net = QNet {
            n_layers,
            hidden,
            seed,
            params: Vec::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_bound = 1.0 / (net.input_dim().max(1) as f64).sqrt();
        let hid_bound = 1.0 / (hidden as f64).sqrt();
        let mut params = Vec::with_capacity(net.param_count());
        for _ in 0..(net.input_dim() * hidden + hidden) {
            params.push(rng.gen_range(-in_bound..=in_bound));
        }
        for _ in 0..(hidden * net.output_dim() + net.output_dim()) {
            params.push(rng.gen_range(-hid_bound..=hid_bound));
        }
        net.params = params;
        net
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn input_dim(&self) -> usize {
        self.n_layers - 1
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn output_dim(&self) -> usize {
        packed_len(self.n_layers)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        let (i, h, o) = (self.input_dim(), self.hidden, self.output_dim());
        i * h + h + h * o + o
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let (i, h, o) = (self.input_dim(), self.hidden, self.output_dim());
        let (w1, rest) = self.params.split_at(i * h);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(h * o);
        (w1, b1, w2, b2)
    }

    /// `s[i] / (L-1)` for layers `1..L`.
    pub fn encode(&self, state: &TyingState) -> Vec<f64> {
        let denom = (self.n_layers.max(2) - 1) as f64;
        state.as_slice()[1..]
            .iter()
            .map(|&r| r as f64 / denom)
            .collect()
    }

    fn check_dims(&self, n: usize) -> Result<()> {
        if n != self.n_layers {
            return Err(Error::LengthMismatch {
                expected: self.n_layers,
                actual: n,
                context: "q-network state",
            });
        }
        Ok(())
    }

    /// Returns (hidden pre-activation, output).
    fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (w1, b1, w2, b2) = self.split();
        let h = self.hidden;
        let mut z = b1.to_vec();
        for (xi, row) in x.iter().zip(w1.chunks_exact(h)) {
            for (zj, wij) in z.iter_mut().zip(row) {
                *zj += xi * wij;
            }
        }
        let o = self.output_dim();
        let mut out = b2.to_vec();
        for (zj, row) in z.iter().zip(w2.chunks_exact(o.max(1))) {
            let a = zj.max(0.0);
            if a == 0.0 {
                continue;
            }
            for (ok, wjk) in out.iter_mut().zip(row) {
                *ok += a * wjk;
            }
        }
        (z, out)
    }

    /// Packed Q-values for every (layer, choice) pair.
    pub fn forward(&self, state: &TyingState) -> Result<Vec<f64>> {
        self.check_dims(state.n_layers())?;
        Ok(self.forward_cached(&self.encode(state)).1)
    }

    pub fn q_value(&self, state: &TyingState, action: &ActionVector) -> Result<f64> {
        self.check_dims(action.n_layers())?;
        let out = self.forward(state)?;
        Ok(packed_action_value(&out, action))
    }

    pub fn greedy_action(&self, state: &TyingState) -> Result<ActionVector> {
        Ok(packed_greedy(&self.forward(state)?, self.n_layers))
    }

    pub fn max_q(&self, state: &TyingState) -> Result<f64> {
        Ok(packed_max(&self.forward(state)?, self.n_layers))
    }

    /// Squared error `(Q(s,a) - target)^2` and its gradient w.r.t. all params.
    pub fn loss_and_grad(
        &self,
        state: &TyingState,
        action: &ActionVector,
        target: f64,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_dims(state.n_layers())?;
        self.check_dims(action.n_layers())?;
        let x = self.encode(state);
        let (z, out) = self.forward_cached(&x);
        let pred = packed_action_value(&out, action);
        let resid = pred - target;
        let loss = resid * resid;
        let dpred = 2.0 * resid;

        let (i_dim, h, o) = (self.input_dim(), self.hidden, self.output_dim());
        let (_, _, w2, _) = self.split();
        let mut grad = vec![0.0; self.param_count()];
        let (g_w1, rest) = grad.split_at_mut(i_dim * h);
        let (g_b1, rest) = rest.split_at_mut(h);
        let (g_w2, g_b2) = rest.split_at_mut(h * o);

        let chosen: Vec<usize> = selected_offsets(action).collect();
        for &k in &chosen {
            g_b2[k] += dpred;
        }
        let mut dz = vec![0.0; h];
        for j in 0..h {
            if z[j] <= 0.0 {
                continue;
            }
            let a = z[j];
            let mut acc = 0.0;
            for &k in &chosen {
                g_w2[j * o + k] += a * dpred;
                acc += w2[j * o + k] * dpred;
            }
            dz[j] = acc;
        }
        g_b1.copy_from_slice(&dz);
        for (xi, row) in x.iter().zip(g_w1.chunks_exact_mut(h)) {
            for (g, d) in row.iter_mut().zip(&dz) {
                *g = xi * d;
            }
        }
        Ok((loss, grad))
    }

    /// Serializes as `QNET` magic, little-endian u32 header length, JSON
    /// header, then every parameter as little-endian f64.
    pub fn encode_checkpoint(&self, step: u64) -> Vec<u8> {
        let header = QNetHeader {
            n_layers: self.n_layers,
            input_dim: self.input_dim(),
            hidden: self.hidden,
            output_dim: self.output_dim(),
            seed: self.seed,
            step,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + header.len() + self.params.len() * 8);
        out.extend_from_slice(QNET_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn decode_checkpoint(bytes: &[u8]) -> Result<(QNet, QNetHeader)> {
        let err = |m: &str| Error::format("q-network checkpoint", m);
        if bytes.len() < 8 || &bytes[..4] != QNET_MAGIC {
            return Err(err("missing magic"));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() < hlen {
            return Err(err("truncated header"));
        }
        let header: QNetHeader = serde_json::from_slice(&body[..hlen])?;
        if header.n_layers == 0 || header.hidden == 0 {
            return Err(err("zero dimension"));
        }
        if header.n_layers > MAX_CHECKPOINT_LAYERS || header.hidden > MAX_CHECKPOINT_HIDDEN {
            return Err(err("dimensions too large"));
        }
        if header.input_dim != header.n_layers - 1
            || header.output_dim != packed_len(header.n_layers)
        {
            return Err(err("inconsistent dimensions"));
        }
        let mut net = QNet {
            n_layers: header.n_layers,
            hidden: header.hidden,
            seed: header.seed,
            params: Vec::new(),
        };
        let payload = &body[hlen..];
        if payload.len() != net.param_count() * 8 {
            return Err(err("payload length does not match dimensions"));
        }
        net.params = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((net, header))
    }
}

const QNET_MAGIC: &[u8; 4] = b"QNET";
const MAX_CHECKPOINT_LAYERS: usize = 4096;
const MAX_CHECKPOINT_HIDDEN: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QNetHeader {
    pub n_layers: usize,
    pub input_dim: usize,
    pub hidden: usize,
    pub output_dim: usize,
    pub seed: u64,
    pub step: u64,
}

fn selected_offsets(action: &ActionVector) -> impl Iterator<Item = usize> + '_ {
    action
        .as_slice()
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, &j)| packed_row(i).start + j)
}

/// `sum_{i>=1} out[offset(i, a[i])]`.
pub fn packed_action_value(out: &[f64], action: &ActionVector) -> f64 {
    selected_offsets(action).map(|k| out[k]).sum()
}

/// Row-wise argmax; ties go to the lowest choice.
pub fn packed_greedy(out: &[f64], n_layers: usize) -> ActionVector {
    let mut a = vec![0; n_layers];
    for (i, slot) in a.iter_mut().enumerate().skip(1) {
        let row = &out[packed_row(i)];
        let mut best = 0;
        for (j, &q) in row.iter().enumerate().skip(1) {
            if q > row[best] {
                best = j;
            }
        }
        *slot = best;
    }
    ActionVector::new(a).expect("argmax choices are bounded by layer index")
}

/// Sum of row maxima.
pub fn packed_max(out: &[f64], n_layers: usize) -> f64 {
    (1..n_layers)
        .map(|i| {
            out[packed_row(i)]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum()
}

/// Epsilon-greedy action selection.
pub fn policy<R: Rng + ?Sized>(
    net: &QNet,
    state: &TyingState,
    cfg: &ControllerConfig,
    rng: &mut R,
) -> Result<ActionVector> {
    let u: f64 = rng.gen();
    if u < cfg.epsilon {
        Ok(uniform_random_action(state.n_layers(), rng))
    } else {
        net.greedy_action(state)
    }
}

/// `r_step + gamma * max_a Q(s_next)_a`, using the live network.
pub fn bellman_target(
    r_step: f64,
    cfg: &ControllerConfig,
    net: &QNet,
    next_state: &TyingState,
) -> Result<f64> {
    if !r_step.is_finite() {
        return Err(Error::NonFinite(format!("reward {r_step}")));
    }
    Ok(r_step + cfg.gamma * net.max_q(next_state)?)
}

/// The Q-network together with its optimizer and exploration schedule.
#[derive(Debug, Clone)]
pub struct Controller {
    pub net: QNet,
    pub cfg: ControllerConfig,
    adam: AdamState<f64>,
    adam_cfg: AdamConfig,
    updates: u64,
}

impl Controller {
    pub fn new(n_layers: usize, cfg: ControllerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let net = QNet::new(n_layers, cfg.hidden_units, seed);
        let adam = AdamState::zeros(net.param_count());
        Ok(Controller {
            net,
            cfg,
            adam,
            adam_cfg: AdamConfig::default(),
            updates: 0,
        })
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn act<R: Rng + ?Sized>(&self, state: &TyingState, rng: &mut R) -> Result<ActionVector> {
        policy(&self.net, state, &self.cfg, rng)
    }

    /// One online regression step of `Q(s,a)` toward `target`. Returns the
    /// pre-step loss. Nothing moves when the prediction already equals the
    /// target or the gradient is not finite.
    pub fn q_update(
        &mut self,
        state: &TyingState,
        action: &ActionVector,
        target: f64,
        lr: f64,
    ) -> Result<f64> {
        if !target.is_finite() {
            return Err(Error::NonFinite(format!("bellman target {target}")));
        }
        let (loss, grad) = self.net.loss_and_grad(state, action, target)?;
        if loss == 0.0 {
            return Ok(0.0);
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("q-network gradient".into()));
        }
        self.adam
            .update(&mut self.net.params, &grad, lr, &self.adam_cfg);
        self.updates += 1;
        Ok(loss)
    }

    pub fn decay_epsilon(&mut self) {
        self.cfg.decay_epsilon();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const QOUT: [f64; 5] = [0.1, 0.2, 0.3, 0.5, 0.4];

    fn act(v: &[usize]) -> ActionVector {
        ActionVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn output_lengths() {
        assert_eq!(QNet::new(3, 8, 0).output_dim(), 5);
        let net = QNet::new(48, 128, 0);
        let out = net.forward(&TyingState::zeros(48)).unwrap();
        assert_eq!(out.len(), 1175);
    }

    #[test]
    fn forward_is_deterministic() {
        let net = QNet::new(4, 16, 5);
        let s = TyingState::new(vec![0, 1, 1, 0]).unwrap();
        assert_eq!(net.forward(&s).unwrap(), net.forward(&s).unwrap());
        assert!(net.forward(&TyingState::zeros(3)).is_err());
    }

    #[test]
    fn packed_value_examples() {
        assert!((packed_action_value(&QOUT, &act(&[0, 1, 1])) - 0.7).abs() < 1e-12);
        assert!((packed_action_value(&QOUT, &act(&[0, 0, 0])) - 0.4).abs() < 1e-12);
        assert_eq!(packed_action_value(&[0.0; 5], &act(&[0, 1, 2])), 0.0);
    }

    #[test]
    fn greedy_and_max_examples() {
        assert_eq!(packed_greedy(&QOUT, 3), act(&[0, 1, 1]));
        assert!((packed_max(&QOUT, 3) - 0.7).abs() < 1e-12);
        assert_eq!(packed_greedy(&[0.25; 9], 4), act(&[0, 0, 0, 0]));
        assert_eq!(packed_max(&[0.0; 5], 3), 0.0);
    }

    #[test]
    fn bellman_examples() {
        let cfg = ControllerConfig::default();
        let net = QNet::new(2, 4, 1);
        let s = TyingState::zeros(2);
        let m = net.max_q(&s).unwrap();
        let t = bellman_target(-50.0, &cfg, &net, &s).unwrap();
        assert!((t - (-50.0 + 0.99 * m)).abs() < 1e-12);
        assert!((-50.0 + 0.99 * 10.0f64 - (-40.1)).abs() < 1e-12);

        let zero_gamma = ControllerConfig {
            gamma: 0.0,
            ..cfg
        };
        assert_eq!(bellman_target(-3.0, &zero_gamma, &net, &s).unwrap(), -3.0);
        assert!(bellman_target(f64::NAN, &cfg, &net, &s).is_err());
    }

    #[test]
    fn bellman_with_zero_max_q() {
        let mut net = QNet::new(3, 4, 2);
        net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let cfg = ControllerConfig::default();
        let t = bellman_target(-7.5, &cfg, &net, &TyingState::zeros(3)).unwrap();
        assert_eq!(t, -7.5);
    }

    #[test]
    fn epsilon_schedule() {
        let mut cfg = ControllerConfig::default();
        cfg.decay_epsilon();
        assert!((cfg.epsilon - 0.95).abs() < 1e-15);

        let mut floor = ControllerConfig {
            epsilon: 0.1,
            ..ControllerConfig::default()
        };
        floor.decay_epsilon();
        assert_eq!(floor.epsilon, 0.1);

        let mut cfg = ControllerConfig::default();
        let mut n = 0;
        while cfg.epsilon > cfg.epsilon_floor {
            cfg.decay_epsilon();
            n += 1;
        }
        assert_eq!(n, 45);
    }

    #[test]
    fn zero_residual_update_is_noop() {
        let mut c = Controller::new(4, ControllerConfig::default(), 3).unwrap();
        let s = TyingState::new(vec![0, 1, 1, 3]).unwrap();
        let a = act(&[0, 1, 2, 0]);
        // move the optimizer off its initial moments first
        c.q_update(&s, &a, 1.0, 1e-3).unwrap();
        let target = c.net.q_value(&s, &a).unwrap();
        let before = c.net.params().to_vec();
        let loss = c.q_update(&s, &a, target, 1e-3).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(c.net.params(), &before[..]);
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = ControllerConfig {
            gamma: 1.0,
            ..ControllerConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ControllerConfig {
            epsilon: 0.05,
            ..ControllerConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_rejects_garbage() {
        let net = QNet::new(5, 16, 9);
        let bytes = net.encode_checkpoint(42);
        let (back, header) = QNet::decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(header.step, 42);
        assert!(QNet::decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(QNet::decode_checkpoint(b"QNE").is_err());
    }
}
