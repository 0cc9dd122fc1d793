//! Pre-LN causal decoder stack with hand-written reverse-mode gradients.
//!
//! Activations are kept row-major as `(batch * time) x width` buffers. Every
//! block is `x + attn(ln1(x))` followed by `x + ffn(ln2(x))`; the stack ends
//! in a final layer norm and a linear head over the vocabulary.

use super::config::{GlobalLayout, LayerLayout, ModelConfig};
use super::scalar::{gemm, Scalar, View, ViewMut};
use super::store::{Gradients, ParameterStore};
use crate::data::Batch;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Logits laid out as `batch x time x vocab`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    pub batch: usize,
    pub time: usize,
    pub vocab: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Logits<T> {
    pub fn at(&self, b: usize, t: usize) -> &[T] {
        let start = (b * self.time + t) * self.vocab;
        &self.data[start..start + self.vocab]
    }
}

struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

struct BlockCache<T> {
    ln1: LnCache<T>,
    h1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    ln2: LnCache<T>,
    h2: Vec<T>,
    u: Vec<T>,
    /// `gelu_tanh(u)`, reused by the backward pass.
    t: Vec<T>,
    g: Vec<T>,
}

struct Shape {
    batch: usize,
    time: usize,
    d: usize,
    heads: usize,
    ffn: usize,
}

impl Shape {
    fn rows(&self) -> usize {
        self.batch * self.time
    }

    fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

fn layer_norm<T: Scalar>(x: &[T], gain: &[T], bias: &[T], d: usize) -> (Vec<T>, LnCache<T>) {
    let rows = x.len() / d;
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::from_f64(1.0 / d as f64);
    let eps = T::from_f64(LN_EPS);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().fold(T::zero(), |a, &b| a + b) * inv_d;
        let var = row.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[r * d + j] = xh;
            out[r * d + j] = xh * gain[j] + bias[j];
        }
    }
    (out, LnCache { xhat, rstd })
}

/// Accumulates the input gradient into `dx` and, when given, the gain/bias
/// gradients.
fn layer_norm_backward<T: Scalar>(
    dout: &[T],
    cache: &LnCache<T>,
    gain: &[T],
    d: usize,
    dx: &mut [T],
    dgain_dbias: Option<(&mut [T], &mut [T])>,
) {
    let rows = dout.len() / d;
    let inv_d = T::from_f64(1.0 / d as f64);
    if let Some((dg, db)) = dgain_dbias {
        for r in 0..rows {
            for j in 0..d {
                let g = dout[r * d + j];
                dg[j] = dg[j] + g * cache.xhat[r * d + j];
                db[j] = db[j] + g;
            }
        }
    }
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            let v = dout[r * d + j] * gain[j];
            dxhat[j] = v;
            mean_dxhat = mean_dxhat + v;
            mean_dxhat_xhat = mean_dxhat_xhat + v * xh[j];
        }
        mean_dxhat = mean_dxhat * inv_d;
        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
        let rs = cache.rstd[r];
        for j in 0..d {
            let out = &mut dx[r * d + j];
            *out = *out + rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

/// tanh of the GELU argument. Written through `exp`, which is several times
/// cheaper than libm's `tanh` and accurate to a few ulps in absolute terms.
fn gelu_tanh<T: Scalar>(u: T) -> T {
    let z = T::from_f64(GELU_C) * (u + T::from_f64(GELU_K) * u * u * u);
    let limit = T::from_f64(20.0);
    if z > limit {
        return T::one();
    }
    if z < -limit {
        return -T::one();
    }
    let e = (z + z).exp();
    (e - T::one()) / (e + T::one())
}

/// GELU given `t = gelu_tanh(u)`.
fn gelu<T: Scalar>(u: T, t: T) -> T {
    T::from_f64(0.5) * u * (T::one() + t)
}

fn gelu_grad<T: Scalar>(u: T, t: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + three * k * u * u)
}

/// `out = x W + b` for `x: rows x n_in`, `W: n_in x n_out`.
fn linear<T: Scalar>(x: &[T], w: &[T], b: &[T], rows: usize, n_in: usize, n_out: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * n_out);
    for _ in 0..rows {
        out.extend_from_slice(b);
    }
    gemm(
        rows,
        n_in,
        n_out,
        View::rows(x, n_in),
        View::rows(w, n_out),
        ViewMut::rows(&mut out, n_out),
        T::one(),
        true,
    );
    out
}

/// Weight and bias gradients of a linear map: `dW += x^T dy`, `db += sum dy`.
fn linear_param_grads<T: Scalar>(
    x: &[T],
    dy: &[T],
    rows: usize,
    n_in: usize,
    n_out: usize,
    dw: &mut [T],
    db: &mut [T],
) {
    gemm(
        n_in,
        rows,
        n_out,
        View::rows(x, n_in).t(),
        View::rows(dy, n_out),
        ViewMut::rows(dw, n_out),
        T::one(),
        true,
    );
    for r in 0..rows {
        for (acc, &g) in db.iter_mut().zip(&dy[r * n_out..(r + 1) * n_out]) {
            *acc = *acc + g;
        }
    }
}

/// `dx (+)= dy W^T`.
fn linear_input_grad<T: Scalar>(
    dy: &[T],
    w: &[T],
    rows: usize,
    n_in: usize,
    n_out: usize,
    dx: &mut [T],
    accumulate: bool,
) {
    gemm(
        rows,
        n_out,
        n_in,
        View::rows(dy, n_out),
        View::rows(w, n_out).t(),
        ViewMut::rows(dx, n_in),
        T::one(),
        accumulate,
    );
}

fn block_forward<T: Scalar>(
    x: &mut [T],
    p: &[T],
    lay: &LayerLayout,
    sh: &Shape,
    keep: bool,
) -> Option<BlockCache<T>> {
    let (rows, d, f) = (sh.rows(), sh.d, sh.ffn);
    let (h1, ln1) = layer_norm(x, &p[lay.ln1_g..lay.ln1_g + d], &p[lay.ln1_b..lay.ln1_b + d], d);
    let w = |off: usize, n: usize| &p[off..off + n];
    let q = linear(&h1, w(lay.w_q, d * d), w(lay.b_q, d), rows, d, d);
    let k = linear(&h1, w(lay.w_k, d * d), w(lay.b_k, d), rows, d, d);
    let v = linear(&h1, w(lay.w_v, d * d), w(lay.b_v, d), rows, d, d);

    let (t_len, hd) = (sh.time, sh.head_dim());
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut probs = vec![T::zero(); sh.batch * sh.heads * t_len * t_len];
    let mut att = vec![T::zero(); rows * d];
    for b in 0..sh.batch {
        for h in 0..sh.heads {
            let base = b * t_len * d + h * hd;
            let pbase = (b * sh.heads + h) * t_len * t_len;
            let pm = &mut probs[pbase..pbase + t_len * t_len];
            gemm(
                t_len,
                hd,
                t_len,
                View::at(&q, base, d),
                View::at(&k, base, d).t(),
                ViewMut::rows(pm, t_len),
                scale,
                false,
            );
            for t in 0..t_len {
                let row = &mut pm[t * t_len..(t + 1) * t_len];
                let max = row[..=t].iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let mut sum = T::zero();
                for x in row[..=t].iter_mut() {
                    *x = (*x - max).exp();
                    sum = sum + *x;
                }
                for x in row[..=t].iter_mut() {
                    *x = *x / sum;
                }
                row[t + 1..].iter_mut().for_each(|x| *x = T::zero());
            }
            gemm(
                t_len,
                t_len,
                hd,
                View::rows(pm, t_len),
                View::at(&v, base, d),
                ViewMut::at(&mut att, base, d),
                T::one(),
                false,
            );
        }
    }
    let o = linear(&att, w(lay.w_o, d * d), w(lay.b_o, d), rows, d, d);
    for (xi, oi) in x.iter_mut().zip(&o) {
        *xi = *xi + *oi;
    }

    let (h2, ln2) = layer_norm(x, &p[lay.ln2_g..lay.ln2_g + d], &p[lay.ln2_b..lay.ln2_b + d], d);
    let u = linear(&h2, w(lay.w_up, d * f), w(lay.b_up, f), rows, d, f);
    let t: Vec<T> = u.iter().map(|&x| gelu_tanh(x)).collect();
    let g: Vec<T> = u.iter().zip(&t).map(|(&x, &tx)| gelu(x, tx)).collect();
    let y = linear(&g, w(lay.w_down, f * d), w(lay.b_down, d), rows, f, d);
    for (xi, yi) in x.iter_mut().zip(&y) {
        *xi = *xi + *yi;
    }
    keep.then_some(BlockCache {
        ln1,
        h1,
        q,
        k,
        v,
        probs,
        att,
        ln2,
        h2,
        u,
        t,
        g,
    })
}

/// Backpropagates through one block. `dx` holds the gradient w.r.t. the
/// block output on entry and w.r.t. its input on return.
fn block_backward<T: Scalar>(
    dx: &mut [T],
    c: &BlockCache<T>,
    p: &[T],
    lay: &LayerLayout,
    sh: &Shape,
    mut grad: Option<&mut [T]>,
) {
    let (rows, d, f) = (sh.rows(), sh.d, sh.ffn);
    let w = |off: usize, n: usize| &p[off..off + n];

    // feed-forward half; dx doubles as the residual gradient
    if let Some(gr) = grad.as_deref_mut() {
        let (dw, db) = split_two(gr, lay.w_down, f * d, lay.b_down, d);
        linear_param_grads(&c.g, dx, rows, f, d, dw, db);
    }
    let mut du = vec![T::zero(); rows * f];
    linear_input_grad(dx, w(lay.w_down, f * d), rows, f, d, &mut du, false);
    for ((g, &u), &t) in du.iter_mut().zip(&c.u).zip(&c.t) {
        *g = *g * gelu_grad(u, t);
    }
    if let Some(gr) = grad.as_deref_mut() {
        let (dw, db) = split_two(gr, lay.w_up, d * f, lay.b_up, f);
        linear_param_grads(&c.h2, &du, rows, d, f, dw, db);
    }
    let mut dh2 = vec![T::zero(); rows * d];
    linear_input_grad(&du, w(lay.w_up, d * f), rows, d, f, &mut dh2, false);
    let ln2_params = grad
        .as_deref_mut()
        .map(|gr| split_two(gr, lay.ln2_g, d, lay.ln2_b, d));
    layer_norm_backward(&dh2, &c.ln2, w(lay.ln2_g, d), d, dx, ln2_params);

    // attention half
    if let Some(gr) = grad.as_deref_mut() {
        let (dw, db) = split_two(gr, lay.w_o, d * d, lay.b_o, d);
        linear_param_grads(&c.att, dx, rows, d, d, dw, db);
    }
    let mut datt = vec![T::zero(); rows * d];
    linear_input_grad(dx, w(lay.w_o, d * d), rows, d, d, &mut datt, false);

    let (t_len, hd) = (sh.time, sh.head_dim());
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut dq = vec![T::zero(); rows * d];
    let mut dk = vec![T::zero(); rows * d];
    let mut dv = vec![T::zero(); rows * d];
    let mut dp = vec![T::zero(); t_len * t_len];
    for b in 0..sh.batch {
        for h in 0..sh.heads {
            let base = b * t_len * d + h * hd;
            let pbase = (b * sh.heads + h) * t_len * t_len;
            let pm = &c.probs[pbase..pbase + t_len * t_len];
            // dP = dAtt V^T
            gemm(
                t_len,
                hd,
                t_len,
                View::at(&datt, base, d),
                View::at(&c.v, base, d).t(),
                ViewMut::rows(&mut dp, t_len),
                T::one(),
                false,
            );
            // dV = P^T dAtt
            gemm(
                t_len,
                t_len,
                hd,
                View::rows(pm, t_len).t(),
                View::at(&datt, base, d),
                ViewMut::at(&mut dv, base, d),
                T::one(),
                false,
            );
            // softmax backward, in place: dS = P * (dP - rowsum(dP * P))
            for t in 0..t_len {
                let pr = &pm[t * t_len..(t + 1) * t_len];
                let dr = &mut dp[t * t_len..(t + 1) * t_len];
                let dot = (0..=t).fold(T::zero(), |a, j| a + pr[j] * dr[j]);
                for j in 0..t_len {
                    dr[j] = if j <= t { pr[j] * (dr[j] - dot) } else { T::zero() };
                }
            }
            gemm(
                t_len,
                t_len,
                hd,
                View::rows(&dp, t_len),
                View::at(&c.k, base, d),
                ViewMut::at(&mut dq, base, d),
                scale,
                false,
            );
            gemm(
                t_len,
                t_len,
                hd,
                View::rows(&dp, t_len).t(),
                View::at(&c.q, base, d),
                ViewMut::at(&mut dk, base, d),
                scale,
                false,
            );
        }
    }
    if let Some(gr) = grad.as_deref_mut() {
        for (dy, wo, bo) in [(&dq, lay.w_q, lay.b_q), (&dk, lay.w_k, lay.b_k), (&dv, lay.w_v, lay.b_v)] {
            let (dw, db) = split_two(gr, wo, d * d, bo, d);
            linear_param_grads(&c.h1, dy, rows, d, d, dw, db);
        }
    }
    let mut dh1 = vec![T::zero(); rows * d];
    linear_input_grad(&dq, w(lay.w_q, d * d), rows, d, d, &mut dh1, false);
    linear_input_grad(&dk, w(lay.w_k, d * d), rows, d, d, &mut dh1, true);
    linear_input_grad(&dv, w(lay.w_v, d * d), rows, d, d, &mut dh1, true);
    let ln1_params = grad
        .map(|gr| split_two(gr, lay.ln1_g, d, lay.ln1_b, d));
    layer_norm_backward(&dh1, &c.ln1, w(lay.ln1_g, d), d, dx, ln1_params);
}

/// Two disjoint mutable sub-slices `[a, a+na)` and `[b, b+nb)` with `a < b`.
fn split_two<T>(buf: &mut [T], a: usize, na: usize, b: usize, nb: usize) -> (&mut [T], &mut [T]) {
    debug_assert!(a + na <= b);
    let (lo, hi) = buf.split_at_mut(b);
    (&mut lo[a..a + na], &mut hi[..nb])
}

struct Forward<T> {
    lnf: LnCache<T>,
    hf: Vec<T>,
    logits: Vec<T>,
    caches: Vec<BlockCache<T>>,
}

fn check_tokens(cfg: &ModelConfig, ids: &[u32], batch: usize, time: usize) -> Result<()> {
    if batch == 0 || time == 0 {
        return Err(Error::InvalidInput("empty token batch".into()));
    }
    if ids.len() != batch * time {
        return Err(Error::LengthMismatch {
            expected: batch * time,
            actual: ids.len(),
            context: "token ids",
        });
    }
    if time > cfg.context_length {
        return Err(Error::InvalidInput(format!(
            "sequence length {time} exceeds context length {}",
            cfg.context_length
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::InvalidInput(format!(
            "token {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_forward<T: Scalar>(
    cfg: &ModelConfig,
    gl: &GlobalLayout,
    lay: &LayerLayout,
    globals: &[T],
    layers: &[&[T]],
    ids: &[u32],
    batch: usize,
    time: usize,
    keep: bool,
) -> Forward<T> {
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let sh = Shape {
        batch,
        time,
        d,
        heads: cfg.n_heads,
        ffn: cfg.d_ffn,
    };
    let rows = sh.rows();
    let mut x = vec![T::zero(); rows * d];
    for (r, &tok) in ids.iter().enumerate() {
        let t = r % time;
        let te = gl.tok_emb + tok as usize * d;
        let pe = gl.pos_emb + t * d;
        for j in 0..d {
            x[r * d + j] = globals[te + j] + globals[pe + j];
        }
    }
    let mut caches = Vec::new();
    for p in layers {
        if let Some(c) = block_forward(&mut x, p, lay, &sh, keep) {
            caches.push(c);
        }
    }
    let (hf, lnf) = layer_norm(
        &x,
        &globals[gl.lnf_g..gl.lnf_g + d],
        &globals[gl.lnf_b..gl.lnf_b + d],
        d,
    );
    let mut logits = Vec::with_capacity(rows * v);
    for _ in 0..rows {
        logits.extend_from_slice(&globals[gl.b_out..gl.b_out + v]);
    }
    let head = match gl.w_out {
        Some(w) => View::at(globals, w, v),
        None => View::at(globals, gl.tok_emb, d).t(),
    };
    gemm(
        rows,
        d,
        v,
        View::rows(&hf, d),
        head,
        ViewMut::rows(&mut logits, v),
        T::one(),
        true,
    );
    Forward {
        lnf,
        hf,
        logits,
        caches,
    }
}

/// Mean token cross-entropy (accumulated in f64) and, optionally, the
/// gradient of that mean w.r.t. the logits.
fn cross_entropy<T: Scalar>(logits: &[T], targets: &[u32], vocab: usize, want_grad: bool) -> (f64, Vec<T>) {
    let rows = targets.len();
    let mut total = 0.0f64;
    let mut grad = if want_grad { vec![T::zero(); logits.len()] } else { Vec::new() };
    let inv_rows = T::from_f64(1.0 / rows as f64);
    for (r, &tgt) in targets.iter().enumerate() {
        let row = &logits[r * vocab..(r + 1) * vocab];
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let sum = row.iter().fold(T::zero(), |a, &b| a + (b - max).exp());
        let lse = max + sum.ln();
        total += (lse - row[tgt as usize]).as_f64();
        if want_grad {
            let g = &mut grad[r * vocab..(r + 1) * vocab];
            for (gj, &lj) in g.iter_mut().zip(row) {
                *gj = (lj - lse).exp() * inv_rows;
            }
            g[tgt as usize] = g[tgt as usize] - inv_rows;
        }
    }
    (total / rows as f64, grad)
}

impl<T: Scalar> ParameterStore<T> {
    fn stack(&self) -> Vec<&[T]> {
        (0..self.config().n_layers).map(|i| self.layer_params(i)).collect()
    }

    /// Logits for `inputs` (`batch x time` row-major token ids).
    pub fn forward(&self, inputs: &[u32], batch: usize, time: usize) -> Result<Logits<T>> {
        self.forward_stack(&self.stack(), inputs, batch, time)
    }

    /// Runs this store's embeddings and head around an arbitrary sequence
    /// of block parameter sets.
    pub fn forward_stack(
        &self,
        layers: &[&[T]],
        inputs: &[u32],
        batch: usize,
        time: usize,
    ) -> Result<Logits<T>> {
        let cfg = self.config();
        check_tokens(cfg, inputs, batch, time)?;
        if layers.iter().any(|p| p.len() != self.layer_layout().len()) {
            return Err(Error::InvalidInput("block parameter length mismatch".into()));
        }
        let fw = run_forward(
            cfg,
            self.global_layout(),
            self.layer_layout(),
            self.globals(),
            layers,
            inputs,
            batch,
            time,
            false,
        );
        Ok(Logits {
            batch,
            time,
            vocab: cfg.vocab_size,
            data: fw.logits,
        })
    }

    /// Mean cross-entropy without gradients.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let cfg = self.config();
        check_tokens(cfg, &batch.inputs, batch.batch, batch.time)?;
        check_tokens(cfg, &batch.targets, batch.batch, batch.time)?;
        let fw = run_forward(
            cfg,
            self.global_layout(),
            self.layer_layout(),
            self.globals(),
            &self.stack(),
            &batch.inputs,
            batch.batch,
            batch.time,
            false,
        );
        let (ce, _) = cross_entropy(&fw.logits, &batch.targets, cfg.vocab_size, false);
        Ok(ce)
    }

    /// Mean token cross-entropy and gradients. Gradients of tied layers are
    /// summed over every stack position sharing the slot; frozen slots get
    /// no entry.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, Gradients<T>)> {
        let cfg = self.config();
        check_tokens(cfg, &batch.inputs, batch.batch, batch.time)?;
        check_tokens(cfg, &batch.targets, batch.batch, batch.time)?;
        let gl = *self.global_layout();
        let lay = *self.layer_layout();
        let stack = self.stack();
        let fw = run_forward(
            cfg,
            &gl,
            &lay,
            self.globals(),
            &stack,
            &batch.inputs,
            batch.batch,
            batch.time,
            true,
        );
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        let (ce, dlogits) = cross_entropy(&fw.logits, &batch.targets, v, true);
        if !ce.is_finite() {
            return Err(Error::NonFinite(format!("training loss {ce}")));
        }
        let rows = batch.batch * batch.time;
        let globals = self.globals();
        let mut g_glob = vec![T::zero(); gl.len()];

        // head
        {
            let (pre, rest) = g_glob.split_at_mut(gl.b_out);
            let db = &mut rest[..v];
            for r in 0..rows {
                for (acc, &g) in db.iter_mut().zip(&dlogits[r * v..(r + 1) * v]) {
                    *acc = *acc + g;
                }
            }
            match gl.w_out {
                Some(w) => gemm(
                    d,
                    rows,
                    v,
                    View::rows(&fw.hf, d).t(),
                    View::rows(&dlogits, v),
                    ViewMut::at(pre, w, v),
                    T::one(),
                    true,
                ),
                None => gemm(
                    v,
                    rows,
                    d,
                    View::rows(&dlogits, v).t(),
                    View::rows(&fw.hf, d),
                    ViewMut::at(pre, gl.tok_emb, d),
                    T::one(),
                    true,
                ),
            }
        }
        let mut dhf = vec![T::zero(); rows * d];
        let head = match gl.w_out {
            Some(w) => View::at(globals, w, v).t(),
            None => View::at(globals, gl.tok_emb, d),
        };
        gemm(
            rows,
            v,
            d,
            View::rows(&dlogits, v),
            head,
            ViewMut::rows(&mut dhf, d),
            T::one(),
            false,
        );
        let mut dx = vec![T::zero(); rows * d];
        {
            let (lo, hi) = g_glob.split_at_mut(gl.lnf_b);
            layer_norm_backward(
                &dhf,
                &fw.lnf,
                &globals[gl.lnf_g..gl.lnf_g + d],
                d,
                &mut dx,
                Some((&mut lo[gl.lnf_g..gl.lnf_g + d], &mut hi[..d])),
            );
        }

        let sh = Shape {
            batch: batch.batch,
            time: batch.time,
            d,
            heads: cfg.n_heads,
            ffn: cfg.d_ffn,
        };
        let frozen = self.slot_frozen();
        let mut g_slots: Vec<Option<Vec<T>>> = frozen
            .iter()
            .map(|&f| (!f).then(|| vec![T::zero(); lay.len()]))
            .collect();
        for (i, cache) in fw.caches.iter().enumerate().rev() {
            let slot = self.slot_of(i);
            block_backward(&mut dx, cache, stack[i], &lay, &sh, g_slots[slot].as_deref_mut());
        }

        for (r, &tok) in batch.inputs.iter().enumerate() {
            let t = r % batch.time;
            let te = gl.tok_emb + tok as usize * d;
            let pe = gl.pos_emb + t * d;
            for j in 0..d {
                let g = dx[r * d + j];
                g_glob[te + j] = g_glob[te + j] + g;
                g_glob[pe + j] = g_glob[pe + j] + g;
            }
        }
        Ok((
            ce,
            Gradients {
                version: self.version(),
                globals: g_glob,
                slots: g_slots,
            },
        ))
    }
}

/// `exp(cross_entropy)`, clamped to `ceiling`.
pub fn perplexity_from_loss(cross_entropy: f64, ceiling: f64) -> f64 {
    let ppl = cross_entropy.exp();
    if !ppl.is_finite() || ppl > ceiling {
        log::warn!("perplexity exp({cross_entropy}) clamped to {ceiling}");
        return ceiling;
    }
    ppl
}

pub const DEFAULT_PPL_CEILING: f64 = 1e9;

impl<T: Scalar> ParameterStore<T> {
    pub fn perplexity(&self, batch: &Batch) -> Result<f64> {
        Ok(perplexity_from_loss(self.loss(batch)?, DEFAULT_PPL_CEILING))
    }
}
