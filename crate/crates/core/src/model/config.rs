use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the decoder stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    pub seed: u64,
    pub tie_embedding_to_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 6,
            d_model: 128,
            n_heads: 4,
            d_ffn: 512,
            vocab_size: 256,
            context_length: 64,
            seed: 0,
            tie_embedding_to_head: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("model.n_layers", self.n_layers),
            ("model.d_model", self.d_model),
            ("model.n_heads", self.n_heads),
            ("model.d_ffn", self.d_ffn),
            ("model.vocab_size", self.vocab_size),
            ("model.context_length", self.context_length),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "model.n_heads",
                format!(
                    "d_model {} is not divisible by n_heads {}",
                    self.d_model, self.n_heads
                ),
            ));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::config("model.vocab_size", "too large"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn layer_layout(&self) -> LayerLayout {
        LayerLayout::new(self.d_model, self.d_ffn)
    }

    pub fn global_layout(&self) -> GlobalLayout {
        GlobalLayout::new(self)
    }

    /// Parameters in one decoder block.
    pub fn layer_param_count(&self) -> usize {
        self.layer_layout().len()
    }
}

/// Offsets of every tensor inside a block's flat parameter buffer.
///
/// Order: `w_q b_q w_k b_k w_v b_v w_o b_o w_up b_up w_down b_down ln1_g
/// ln1_b ln2_g ln2_b`. Weight matrices are stored input-major (`in x out`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub d_model: usize,
    pub d_ffn: usize,
    pub w_q: usize,
    pub b_q: usize,
    pub w_k: usize,
    pub b_k: usize,
    pub w_v: usize,
    pub b_v: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub w_up: usize,
    pub b_up: usize,
    pub w_down: usize,
    pub b_down: usize,
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    len: usize,
}

impl LayerLayout {
    pub fn new(d: usize, f: usize) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let w_q = take(d * d);
        let b_q = take(d);
        let w_k = take(d * d);
        let b_k = take(d);
        let w_v = take(d * d);
        let b_v = take(d);
        let w_o = take(d * d);
        let b_o = take(d);
        let w_up = take(d * f);
        let b_up = take(f);
        let w_down = take(f * d);
        let b_down = take(d);
        let ln1_g = take(d);
        let ln1_b = take(d);
        let ln2_g = take(d);
        let ln2_b = take(d);
        LayerLayout {
            d_model: d,
            d_ffn: f,
            w_q,
            b_q,
            w_k,
            b_k,
            w_v,
            b_v,
            w_o,
            b_o,
            w_up,
            b_up,
            w_down,
            b_down,
            ln1_g,
            ln1_b,
            ln2_g,
            ln2_b,
            len: at,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// The feed-forward weights (`w_up` then `w_down`, biases excluded).
    pub fn ffn_weights<'a, T>(&self, params: &'a [T]) -> (&'a [T], &'a [T]) {
        let d = self.d_model;
        let f = self.d_ffn;
        (
            &params[self.w_up..self.w_up + d * f],
            &params[self.w_down..self.w_down + f * d],
        )
    }
}

/// Offsets of the untied tensors: token and position embeddings, final
/// layer norm and the output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlobalLayout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub lnf_g: usize,
    pub lnf_b: usize,
    /// Absent when the head reuses the token embedding.
    pub w_out: Option<usize>,
    pub b_out: usize,
    len: usize,
}

impl GlobalLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, v, c) = (cfg.d_model, cfg.vocab_size, cfg.context_length);
        let tok_emb = 0;
        let pos_emb = tok_emb + v * d;
        let lnf_g = pos_emb + c * d;
        let lnf_b = lnf_g + d;
        let mut at = lnf_b + d;
        let w_out = if cfg.tie_embedding_to_head {
            None
        } else {
            let o = at;
            at += d * v;
            Some(o)
        };
        let b_out = at;
        at += v;
        GlobalLayout {
            tok_emb,
            pos_emb,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
            len: at,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}
