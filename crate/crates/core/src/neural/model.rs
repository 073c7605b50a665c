//! Forward and backward passes of the pre-norm decoder-only transformer.
//!
//! Every position is either a semantic token or an acoustic frame. A frame
//! embeds as the concatenation of its `K` group-code embeddings. One code
//! path serves training (full sequence, traced for backward) and incremental
//! decoding (new rows attend to a key/value cache).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Layer, Params};
use super::real::{gemm_view, matmul, Real, View};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// One input position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Slot {
    Token(u32),
    Frame(Box<[u32]>),
}

/// One training sequence with per-position targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub inputs: Vec<Slot>,
    /// `inputs.len() * n_output_heads` ids, row-major by position.
    pub targets: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl Example {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn n_scored(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// Per-layer keys and values of every position seen so far.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
    /// Absolute index whose position id is zero.
    reset: usize,
}

impl<T: Real> KvCache<T> {
    pub fn new(n_layers: usize) -> Self {
        KvCache {
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            len: 0,
            reset: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone)]
struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

#[derive(Debug, Clone)]
struct LayerTrace<T> {
    ln1: LnCache<T>,
    h1: Vec<T>,
    qkv: Vec<T>,
    /// `[head][i * n + j]`
    probs: Vec<Vec<T>>,
    att: Vec<T>,
    ln2: LnCache<T>,
    h2: Vec<T>,
    fc_pre: Vec<T>,
    fc_act: Vec<T>,
    drop_att: Option<Vec<T>>,
    drop_mlp: Option<Vec<T>>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    n: usize,
    positions: Vec<usize>,
    layers: Vec<LayerTrace<T>>,
    lnf: LnCache<T>,
    xf: Vec<T>,
    cache: KvCache<T>,
    /// Per head `[n, head vocab]`.
    pub logits: Vec<Vec<T>>,
}

fn layer_norm<T: Real>(x: &[T], gain: &[T], bias: &[T], d: usize, y: &mut [T], cache: Option<&mut LnCache<T>>) {
    let n = x.len() / d;
    let eps = T::lit(LN_EPS);
    let inv_d = T::one() / T::lit(d as f64);
    let mut xhat_all = cache.as_ref().map(|_| Vec::with_capacity(x.len()));
    let mut rstd_all = cache.as_ref().map(|_| Vec::with_capacity(n));
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        let out = &mut y[i * d..(i + 1) * d];
        for j in 0..d {
            let xh = (row[j] - mean) * rstd;
            out[j] = xh * gain[j] + bias[j];
            if let Some(v) = xhat_all.as_mut() {
                v.push(xh);
            }
        }
        if let Some(v) = rstd_all.as_mut() {
            v.push(rstd);
        }
    }
    if let Some(c) = cache {
        c.xhat = xhat_all.unwrap();
        c.rstd = rstd_all.unwrap();
    }
}

/// Accumulates gain/bias gradients and adds the input gradient into `dx`.
fn layer_norm_backward<T: Real>(
    dy: &[T],
    cache: &LnCache<T>,
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
    d: usize,
    dx: &mut [T],
) {
    let n = dy.len() / d;
    let inv_d = T::one() / T::lit(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for i in 0..n {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let rstd = cache.rstd[i];
        let out = &mut dx[i * d..(i + 1) * d];
        for j in 0..d {
            out[j] += rstd * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

fn gelu_consts<T: Real>() -> (T, T) {
    (T::lit((2.0 / std::f64::consts::PI).sqrt()), T::lit(0.044715))
}

/// `tanh` through one `exp`; saturates cleanly to +-1.
#[inline]
fn tanh_fast<T: Real>(z: T) -> T {
    let two = T::lit(2.0);
    T::one() - two / ((two * z).exp() + T::one())
}

fn gelu<T: Real>(u: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::lit(0.5);
    half * u * (T::one() + tanh_fast(c * (u + a * u * u * u)))
}

fn gelu_grad<T: Real>(u: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::lit(0.5);
    let t = tanh_fast(c * (u + a * u * u * u));
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * u * u)
}

fn add_bias<T: Real>(y: &mut [T], bias: &[T]) {
    for row in y.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn col_sum_into<T: Real>(dy: &[T], width: usize, out: &mut [T]) {
    for row in dy.chunks_exact(width) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

fn dropout_mask<T: Real>(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.random_bool(rate) { T::zero() } else { keep })
        .collect()
}

/// Position ids of `slots` placed at absolute indices `start..`. `reset` is
/// the absolute index of position zero and advances at each separator when
/// the config asks for it.
pub fn position_ids(cfg: &super::ModelConfig, slots: &[Slot], start: usize, reset: &mut usize) -> Vec<usize> {
    let sep = cfg.semantic_vocab.separator();
    slots
        .iter()
        .enumerate()
        .map(|(i, slot)| {
            let abs = start + i;
            if cfg.position_reset && matches!(slot, Slot::Token(t) if Some(*t) == sep) {
                *reset = abs;
            }
            abs - *reset
        })
        .collect()
}

/// Token/frame embedding plus learned positions for a fresh sequence placed
/// at absolute indices `start..start + slots.len()`.
pub fn embed<T: Real>(params: &Params<T>, slots: &[Slot], start: usize) -> Result<Vec<T>> {
    let positions = position_ids(&params.config, slots, start, &mut 0);
    embed_at(params, slots, start, &positions)
}

fn embed_at<T: Real>(params: &Params<T>, slots: &[Slot], start: usize, positions: &[usize]) -> Result<Vec<T>> {
    let cfg = &params.config;
    let d = cfg.d_model;
    if start + slots.len() > cfg.context_len {
        return Err(Error::ContextOverflow {
            len: start + slots.len(),
            context: cfg.context_len,
        });
    }
    let mut x = vec![T::zero(); slots.len() * d];
    let sem = cfg.semantic_vocab.size();
    let gdim = cfg.group_embed_dim();
    for (i, slot) in slots.iter().enumerate() {
        let row = &mut x[i * d..(i + 1) * d];
        match slot {
            Slot::Token(t) => {
                if *t as usize >= sem {
                    return Err(Error::TokenOutOfRange {
                        utt_id: format!("position {}", start + i),
                        token: *t,
                        size: sem,
                    });
                }
                row.copy_from_slice(params.token_embed.row(*t as usize));
            }
            Slot::Frame(codes) => {
                if codes.len() != cfg.acoustic_groups {
                    return Err(Error::GroupCount {
                        utt_id: format!("position {}", start + i),
                        frame: start + i,
                        got: codes.len(),
                        expected: cfg.acoustic_groups,
                    });
                }
                for (g, &c) in codes.iter().enumerate() {
                    let table = &params.group_embed[g];
                    if c as usize >= table.shape[0] {
                        return Err(Error::TokenOutOfRange {
                            utt_id: format!("position {} group {g}", start + i),
                            token: c,
                            size: table.shape[0],
                        });
                    }
                    row[g * gdim..(g + 1) * gdim].copy_from_slice(table.row(c as usize));
                }
            }
        }
        for (v, &p) in row.iter_mut().zip(params.pos_embed.row(positions[i])) {
            *v += p;
        }
    }
    Ok(x)
}

/// Rotates each head's query and key coordinate pairs `(2m, 2m + 1)` of
/// `n` fused `[q | k | v]` rows by `pos * 10000^(-2m / head_dim)`, where
/// `pos` is the row's position id. `inverse` applies the transpose (backward).
fn rotate_qk<T: Real>(qkv: &mut [T], positions: &[usize], d: usize, n_heads: usize, inverse: bool) {
    let dh = d / n_heads;
    let n = qkv.len() / (3 * d);
    let freqs: Vec<f64> = (0..dh / 2).map(|m| 10_000f64.powf(-2.0 * m as f64 / dh as f64)).collect();
    for i in 0..n {
        let pos = positions[i] as f64;
        let rot: Vec<(T, T)> = freqs
            .iter()
            .map(|f| {
                let (s, c) = (pos * f).sin_cos();
                (T::lit(c), T::lit(if inverse { -s } else { s }))
            })
            .collect();
        for part in 0..2 {
            for h in 0..n_heads {
                let base = i * 3 * d + part * d + h * dh;
                for (m, &(c, s)) in rot.iter().enumerate() {
                    let (a, b) = (qkv[base + 2 * m], qkv[base + 2 * m + 1]);
                    qkv[base + 2 * m] = a * c - b * s;
                    qkv[base + 2 * m + 1] = a * s + b * c;
                }
            }
        }
    }
}

/// Runs one block in place on `x` (`n` new rows starting at absolute
/// position `cache_len`).
#[allow(clippy::too_many_arguments)]
fn layer_forward<T: Real>(
    layer: &Layer<T>,
    d: usize,
    n_heads: usize,
    rotary: Option<&[usize]>,
    x: &mut [T],
    keys: &mut Vec<T>,
    values: &mut Vec<T>,
    mut trace: Option<&mut LayerTrace<T>>,
    dropout: Option<(&mut ChaCha8Rng, f64)>,
) {
    let n = x.len() / d;
    let start = keys.len() / d;
    let total = start + n;
    let dh = d / n_heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let ff = layer.b_fc1.len();

    let mut ln1 = LnCache { xhat: Vec::new(), rstd: Vec::new() };
    let mut h1 = vec![T::zero(); n * d];
    layer_norm(x, &layer.ln1_gain.data, &layer.ln1_bias.data, d, &mut h1, trace.is_some().then_some(&mut ln1));
    let mut qkv = vec![T::zero(); n * 3 * d];
    matmul(n, d, 3 * d, &h1, false, &layer.w_qkv.data, false, &mut qkv, false);
    add_bias(&mut qkv, &layer.b_qkv.data);
    if let Some(positions) = rotary {
        rotate_qk(&mut qkv, positions, d, n_heads, false);
    }
    for i in 0..n {
        keys.extend_from_slice(&qkv[i * 3 * d + d..i * 3 * d + 2 * d]);
        values.extend_from_slice(&qkv[i * 3 * d + 2 * d..i * 3 * d + 3 * d]);
    }

    let mut att = vec![T::zero(); n * d];
    let mut probs: Vec<Vec<T>> = Vec::new();
    let mut scores = vec![T::zero(); n * total];
    for h in 0..n_heads {
        let off = h * dh;
        // scores = scale * Q K^T over every cached key.
        gemm_view(n, dh, total, scale, &qkv, View::new(off, 3 * d, 1), keys, View::new(off, 1, d), T::zero(), &mut scores, View::new(0, total, 1));
        for i in 0..n {
            let pos = start + i;
            let row = &mut scores[i * total..(i + 1) * total];
            let max = row[..=pos].iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for s in row[..=pos].iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let inv = T::one() / sum;
            row[..=pos].iter_mut().for_each(|s| *s *= inv);
            row[pos + 1..].iter_mut().for_each(|s| *s = T::zero());
        }
        gemm_view(n, total, dh, T::one(), &scores, View::new(0, total, 1), values, View::new(off, d, 1), T::zero(), &mut att, View::new(off, d, 1));
        if trace.is_some() {
            probs.push(scores.clone());
        }
    }

    let mut proj = vec![T::zero(); n * d];
    matmul(n, d, d, &att, false, &layer.w_out.data, false, &mut proj, false);
    add_bias(&mut proj, &layer.b_out.data);
    let (drop_att, drop_mlp) = match dropout {
        Some((rng, rate)) if rate > 0.0 => (
            Some(dropout_mask::<T>(n * d, rate, rng)),
            Some(dropout_mask::<T>(n * d, rate, rng)),
        ),
        _ => (None, None),
    };
    if let Some(m) = &drop_att {
        proj.iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
    }
    x.iter_mut().zip(&proj).for_each(|(v, &p)| *v += p);

    let mut ln2 = LnCache { xhat: Vec::new(), rstd: Vec::new() };
    let mut h2 = vec![T::zero(); n * d];
    layer_norm(x, &layer.ln2_gain.data, &layer.ln2_bias.data, d, &mut h2, trace.is_some().then_some(&mut ln2));
    let mut fc_pre = vec![T::zero(); n * ff];
    matmul(n, d, ff, &h2, false, &layer.w_fc1.data, false, &mut fc_pre, false);
    add_bias(&mut fc_pre, &layer.b_fc1.data);
    let fc_act: Vec<T> = fc_pre.iter().map(|&u| gelu(u)).collect();
    let mut mlp = vec![T::zero(); n * d];
    matmul(n, ff, d, &fc_act, false, &layer.w_fc2.data, false, &mut mlp, false);
    add_bias(&mut mlp, &layer.b_fc2.data);
    if let Some(m) = &drop_mlp {
        mlp.iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
    }
    x.iter_mut().zip(&mlp).for_each(|(v, &p)| *v += p);

    if let Some(t) = trace.as_deref_mut() {
        *t = LayerTrace {
            ln1,
            h1,
            qkv,
            probs,
            att,
            ln2,
            h2,
            fc_pre,
            fc_act,
            drop_att,
            drop_mlp,
        };
    }
}

fn check_finite<T: Real>(x: &[T], layer: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { layer })
    }
}

/// Final layer norm and output heads for every row of `x`.
fn heads_forward<T: Real>(params: &Params<T>, x: &[T], lnf: Option<&mut LnCache<T>>) -> (Vec<T>, Vec<Vec<T>>) {
    let d = params.config.d_model;
    let n = x.len() / d;
    let hv = params.config.head_vocab();
    let mut xf = vec![T::zero(); x.len()];
    layer_norm(x, &params.lnf_gain.data, &params.lnf_bias.data, d, &mut xf, lnf);
    let logits = params
        .head_w
        .iter()
        .zip(&params.head_b)
        .map(|(w, b)| {
            let mut out = vec![T::zero(); n * hv];
            matmul(n, d, hv, &xf, false, &w.data, false, &mut out, false);
            add_bias(&mut out, &b.data);
            out
        })
        .collect();
    (xf, logits)
}

/// Feeds `slots` after the positions already in `cache` and returns the
/// logits of the new positions, per head `[slots.len(), head vocab]`.
pub fn forward_cached<T: Real>(params: &Params<T>, slots: &[Slot], cache: &mut KvCache<T>) -> Result<Vec<Vec<T>>> {
    if slots.is_empty() {
        return Err(Error::EmptyInput("forward needs at least one position".into()));
    }
    let cfg = &params.config;
    let mut reset = cache.reset;
    let positions = position_ids(cfg, slots, cache.len, &mut reset);
    let mut x = embed_at(params, slots, cache.len, &positions)?;
    let rotary = cfg.rotary.then_some(positions.as_slice());
    for (l, layer) in params.layers.iter().enumerate() {
        layer_forward(layer, cfg.d_model, cfg.n_heads, rotary, &mut x, &mut cache.keys[l], &mut cache.values[l], None, None);
        check_finite(&x, l)?;
    }
    cache.len += slots.len();
    cache.reset = reset;
    let (_, logits) = heads_forward(params, &x, None);
    for l in &logits {
        check_finite(l, cfg.n_layers)?;
    }
    Ok(logits)
}

/// Logits of every position of a fresh sequence.
pub fn forward<T: Real>(params: &Params<T>, slots: &[Slot]) -> Result<Vec<Vec<T>>> {
    forward_cached(params, slots, &mut KvCache::new(params.config.n_layers))
}

/// Full-sequence forward pass that records what backward needs. Dropout is
/// applied when a generator is supplied and the configured rate is nonzero.
pub fn forward_train<T: Real>(
    params: &Params<T>,
    slots: &[Slot],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Trace<T>> {
    if slots.is_empty() {
        return Err(Error::EmptyInput("forward needs at least one position".into()));
    }
    let cfg = &params.config;
    let mut cache = KvCache::new(cfg.n_layers);
    let positions = position_ids(cfg, slots, 0, &mut cache.reset);
    let mut x = embed_at(params, slots, 0, &positions)?;
    let rotary = cfg.rotary.then_some(positions.as_slice());
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, layer) in params.layers.iter().enumerate() {
        let mut t = LayerTrace {
            ln1: LnCache { xhat: Vec::new(), rstd: Vec::new() },
            h1: Vec::new(),
            qkv: Vec::new(),
            probs: Vec::new(),
            att: Vec::new(),
            ln2: LnCache { xhat: Vec::new(), rstd: Vec::new() },
            h2: Vec::new(),
            fc_pre: Vec::new(),
            fc_act: Vec::new(),
            drop_att: None,
            drop_mlp: None,
        };
        let drop = dropout_rng.as_deref_mut().map(|r| (r, cfg.dropout));
        layer_forward(layer, cfg.d_model, cfg.n_heads, rotary, &mut x, &mut cache.keys[l], &mut cache.values[l], Some(&mut t), drop);
        check_finite(&x, l)?;
        layers.push(t);
    }
    cache.len = slots.len();
    let mut lnf = LnCache { xhat: Vec::new(), rstd: Vec::new() };
    let (xf, logits) = heads_forward(params, &x, Some(&mut lnf));
    for l in &logits {
        check_finite(l, cfg.n_layers)?;
    }
    Ok(Trace {
        n: slots.len(),
        positions,
        layers,
        lnf,
        xf,
        cache,
        logits,
    })
}

/// Log-softmax of one logit row, in `f64`.
pub fn log_softmax<T: Real>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.to_f64().unwrap()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row
        .iter()
        .map(|v| (v.to_f64().unwrap() - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    row.iter().map(|v| v.to_f64().unwrap() - lse).collect()
}

/// Mean over unmasked positions of the summed per-head negative
/// log-likelihood of the targets.
pub fn nll_loss<T: Real>(logits: &[Vec<T>], targets: &[u32], loss_mask: &[bool], head_vocab: usize) -> Result<f64> {
    let heads = logits.len();
    let n = loss_mask.len();
    if targets.len() != n * heads || logits.iter().any(|l| l.len() != n * head_vocab) {
        return Err(Error::Shape(format!(
            "{} positions, {} heads, {} targets",
            n,
            heads,
            targets.len()
        )));
    }
    let scored = loss_mask.iter().filter(|&&m| m).count();
    if scored == 0 {
        return Err(Error::AllMasked);
    }
    let mut total = 0.0;
    for (i, _) in loss_mask.iter().enumerate().filter(|(_, &m)| m) {
        for (h, l) in logits.iter().enumerate() {
            let lp = log_softmax(&l[i * head_vocab..(i + 1) * head_vocab]);
            total -= lp[targets[i * heads + h] as usize];
        }
    }
    Ok(total / scored as f64)
}

/// Summed loss of one example and `d loss / d logits` scaled by `weight`.
fn loss_grad<T: Real>(trace: &Trace<T>, ex: &Example, head_vocab: usize, weight: f64) -> (f64, Vec<Vec<T>>) {
    let heads = trace.logits.len();
    let mut total = 0.0;
    let mut dlogits = vec![vec![T::zero(); trace.n * head_vocab]; heads];
    for i in 0..trace.n {
        if !ex.loss_mask[i] {
            continue;
        }
        for h in 0..heads {
            let row = &trace.logits[h][i * head_vocab..(i + 1) * head_vocab];
            let lp = log_softmax(row);
            let target = ex.targets[i * heads + h] as usize;
            total -= lp[target];
            let out = &mut dlogits[h][i * head_vocab..(i + 1) * head_vocab];
            for (j, (o, l)) in out.iter_mut().zip(&lp).enumerate() {
                let p = l.exp() - if j == target { 1.0 } else { 0.0 };
                *o = T::lit(p * weight);
            }
        }
    }
    (total, dlogits)
}

/// Backpropagates `dlogits` through a traced pass, accumulating into `grads`.
pub fn backward<T: Real>(
    params: &Params<T>,
    slots: &[Slot],
    trace: &Trace<T>,
    dlogits: &[Vec<T>],
    grads: &mut Params<T>,
) {
    let cfg = &params.config;
    let d = cfg.d_model;
    let n = trace.n;
    let hv = cfg.head_vocab();
    let ff = cfg.d_ff;
    let n_heads = cfg.n_heads;
    let dh = d / n_heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();

    let mut dxf = vec![T::zero(); n * d];
    for (h, dl) in dlogits.iter().enumerate() {
        matmul(d, n, hv, &trace.xf, true, dl, false, &mut grads.head_w[h].data, true);
        col_sum_into(dl, hv, &mut grads.head_b[h].data);
        matmul(n, hv, d, dl, false, &params.head_w[h].data, true, &mut dxf, true);
    }
    let mut dx = vec![T::zero(); n * d];
    layer_norm_backward(&dxf, &trace.lnf, &params.lnf_gain.data, &mut grads.lnf_gain.data, &mut grads.lnf_bias.data, d, &mut dx);

    for l in (0..cfg.n_layers).rev() {
        let layer = &params.layers[l];
        let g = &mut grads.layers[l];
        let t = &trace.layers[l];
        let keys = &trace.cache.keys[l];
        let values = &trace.cache.values[l];

        // MLP branch.
        let mut dmlp = dx.clone();
        if let Some(m) = &t.drop_mlp {
            dmlp.iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
        }
        matmul(ff, n, d, &t.fc_act, true, &dmlp, false, &mut g.w_fc2.data, true);
        col_sum_into(&dmlp, d, &mut g.b_fc2.data);
        let mut dact = vec![T::zero(); n * ff];
        matmul(n, d, ff, &dmlp, false, &layer.w_fc2.data, true, &mut dact, false);
        for (v, &u) in dact.iter_mut().zip(&t.fc_pre) {
            *v *= gelu_grad(u);
        }
        matmul(d, n, ff, &t.h2, true, &dact, false, &mut g.w_fc1.data, true);
        col_sum_into(&dact, ff, &mut g.b_fc1.data);
        let mut dh2 = vec![T::zero(); n * d];
        matmul(n, ff, d, &dact, false, &layer.w_fc1.data, true, &mut dh2, false);
        // dx now holds d x_mid: residual plus the layer-norm path.
        layer_norm_backward(&dh2, &t.ln2, &layer.ln2_gain.data, &mut g.ln2_gain.data, &mut g.ln2_bias.data, d, &mut dx);

        // Attention branch.
        let mut dproj = dx.clone();
        if let Some(m) = &t.drop_att {
            dproj.iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
        }
        matmul(d, n, d, &t.att, true, &dproj, false, &mut g.w_out.data, true);
        col_sum_into(&dproj, d, &mut g.b_out.data);
        let mut datt = vec![T::zero(); n * d];
        matmul(n, d, d, &dproj, false, &layer.w_out.data, true, &mut datt, false);

        let mut dqkv = vec![T::zero(); n * 3 * d];
        let mut dp = vec![T::zero(); n * n];
        let mut ds = vec![T::zero(); n * n];
        for h in 0..n_heads {
            let off = h * dh;
            let probs = &t.probs[h];
            // dP = dOut V^T
            gemm_view(n, dh, n, T::one(), &datt, View::new(off, d, 1), values, View::new(off, 1, d), T::zero(), &mut dp, View::new(0, n, 1));
            for i in 0..n {
                let prow = &probs[i * n..(i + 1) * n];
                let dprow = &dp[i * n..(i + 1) * n];
                let weighted = prow[..=i].iter().zip(&dprow[..=i]).map(|(&p, &g)| p * g).sum::<T>();
                let dsrow = &mut ds[i * n..(i + 1) * n];
                for j in 0..=i {
                    dsrow[j] = prow[j] * (dprow[j] - weighted) * scale;
                }
                dsrow[i + 1..].iter_mut().for_each(|v| *v = T::zero());
            }
            // dQ = dS K, dK = dS^T Q, dV = P^T dOut
            gemm_view(n, n, dh, T::one(), &ds, View::new(0, n, 1), keys, View::new(off, d, 1), T::zero(), &mut dqkv, View::new(off, 3 * d, 1));
            gemm_view(n, n, dh, T::one(), &ds, View::new(0, 1, n), &t.qkv, View::new(off, 3 * d, 1), T::zero(), &mut dqkv, View::new(d + off, 3 * d, 1));
            gemm_view(n, n, dh, T::one(), probs, View::new(0, 1, n), &datt, View::new(off, d, 1), T::zero(), &mut dqkv, View::new(2 * d + off, 3 * d, 1));
        }
        if cfg.rotary {
            rotate_qk(&mut dqkv, &trace.positions, d, n_heads, true);
        }
        matmul(d, n, 3 * d, &t.h1, true, &dqkv, false, &mut g.w_qkv.data, true);
        col_sum_into(&dqkv, 3 * d, &mut g.b_qkv.data);
        let mut dh1 = vec![T::zero(); n * d];
        matmul(n, 3 * d, d, &dqkv, false, &layer.w_qkv.data, true, &mut dh1, false);
        layer_norm_backward(&dh1, &t.ln1, &layer.ln1_gain.data, &mut g.ln1_gain.data, &mut g.ln1_bias.data, d, &mut dx);
    }

    // Embeddings.
    let gdim = cfg.group_embed_dim();
    for (i, slot) in slots.iter().enumerate() {
        let row = &dx[i * d..(i + 1) * d];
        for (p, &v) in grads.pos_embed.row_mut(trace.positions[i]).iter_mut().zip(row) {
            *p += v;
        }
        match slot {
            Slot::Token(tok) => {
                for (p, &v) in grads.token_embed.row_mut(*tok as usize).iter_mut().zip(row) {
                    *p += v;
                }
            }
            Slot::Frame(codes) => {
                for (gi, &c) in codes.iter().enumerate() {
                    let dst = grads.group_embed[gi].row_mut(c as usize);
                    for (p, &v) in dst.iter_mut().zip(&row[gi * gdim..(gi + 1) * gdim]) {
                        *p += v;
                    }
                }
            }
        }
    }
}

/// Validates shapes of an example against a config.
pub fn check_example<T: Real>(params: &Params<T>, ex: &Example) -> Result<()> {
    let heads = params.config.n_output_heads;
    let hv = params.config.head_vocab();
    if ex.targets.len() != ex.inputs.len() * heads || ex.loss_mask.len() != ex.inputs.len() {
        return Err(Error::Shape(format!(
            "example with {} inputs has {} targets and {} mask entries",
            ex.inputs.len(),
            ex.targets.len(),
            ex.loss_mask.len()
        )));
    }
    if let Some(&t) = ex.targets.iter().find(|&&t| t as usize >= hv) {
        return Err(Error::TokenOutOfRange {
            utt_id: "target".into(),
            token: t,
            size: hv,
        });
    }
    Ok(())
}

/// Mean loss over all scored positions of a batch and its gradient.
pub fn loss_and_grad<T: Real>(
    params: &Params<T>,
    batch: &[Example],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Params<T>)> {
    let scored: usize = batch.iter().map(Example::n_scored).sum();
    if scored == 0 {
        return Err(Error::AllMasked);
    }
    let weight = 1.0 / scored as f64;
    let hv = params.config.head_vocab();
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    for ex in batch {
        check_example(params, ex)?;
        if ex.n_scored() == 0 {
            continue;
        }
        let trace = forward_train(params, &ex.inputs, dropout_rng.as_deref_mut())?;
        let (loss, dlogits) = loss_grad(&trace, ex, hv, weight);
        total += loss;
        backward(params, &ex.inputs, &trace, &dlogits, &mut grads);
    }
    Ok((total * weight, grads))
}

/// Mean loss over all scored positions, no gradient.
pub fn batch_loss<T: Real>(params: &Params<T>, batch: &[Example]) -> Result<f64> {
    let scored: usize = batch.iter().map(Example::n_scored).sum();
    if scored == 0 {
        return Err(Error::AllMasked);
    }
    let hv = params.config.head_vocab();
    let mut total = 0.0;
    for ex in batch {
        check_example(params, ex)?;
        if ex.n_scored() == 0 {
            continue;
        }
        let logits = forward(params, &ex.inputs)?;
        total += nll_loss(&logits, &ex.targets, &ex.loss_mask, hv)? * ex.n_scored() as f64;
    }
    Ok(total / scored as f64)
}

/// Per-position argmax accuracy over scored positions, per head.
pub fn head_accuracy<T: Real>(params: &Params<T>, batch: &[Example]) -> Result<Vec<f64>> {
    let heads = params.config.n_output_heads;
    let hv = params.config.head_vocab();
    let mut hits = vec![0usize; heads];
    let mut scored = 0usize;
    for ex in batch {
        check_example(params, ex)?;
        let logits = forward(params, &ex.inputs)?;
        for i in (0..ex.len()).filter(|&i| ex.loss_mask[i]) {
            scored += 1;
            for h in 0..heads {
                let row = &logits[h][i * hv..(i + 1) * hv];
                let arg = argmax(row);
                if arg == ex.targets[i * heads + h] as usize {
                    hits[h] += 1;
                }
            }
        }
    }
    if scored == 0 {
        return Err(Error::AllMasked);
    }
    Ok(hits.into_iter().map(|h| h as f64 / scored as f64).collect())
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::config::ModelConfig;
    use rand::SeedableRng;

    fn toy(groups: usize) -> ModelConfig {
        let mut c = if groups == 0 {
            ModelConfig::converter(6)
        } else {
            ModelConfig::speaker(6, groups, 5)
        };
        c.n_layers = 2;
        c.n_heads = 2;
        c.d_model = 8;
        c.d_ff = 12;
        c.context_len = 16;
        c.init_std = 0.3;
        c
    }

    #[test]
    fn single_position_shape() {
        let p: Params<f64> = Params::init(&toy(2), 1);
        let logits = forward(&p, &[Slot::Token(0)]).unwrap();
        assert_eq!(logits.len(), 2);
        assert_eq!(logits[0].len(), 6);
    }

    #[test]
    fn overlength_is_rejected() {
        let p: Params<f32> = Params::init(&toy(0), 1);
        let slots = vec![Slot::Token(0); 17];
        assert!(matches!(forward(&p, &slots), Err(Error::ContextOverflow { len: 17, context: 16 })));
    }

    #[test]
    fn cached_decoding_matches_full_pass() {
        let p: Params<f64> = Params::init(&toy(2), 5);
        let slots: Vec<Slot> = vec![
            Slot::Token(1),
            Slot::Token(3),
            Slot::Token(7),
            Slot::Frame(vec![1, 4].into()),
            Slot::Frame(vec![0, 2].into()),
        ];
        let full = forward(&p, &slots).unwrap();
        let mut cache = KvCache::new(2);
        let first = forward_cached(&p, &slots[..3], &mut cache).unwrap();
        let mut rows = vec![first];
        for s in &slots[3..] {
            rows.push(forward_cached(&p, std::slice::from_ref(s), &mut cache).unwrap());
        }
        let hv = 6;
        for h in 0..2 {
            let joined: Vec<f64> = rows.iter().flat_map(|r| r[h].iter().copied()).collect();
            assert_eq!(joined.len(), 5 * hv);
            for (a, b) in joined.iter().zip(&full[h]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nll_examples() {
        // Uniform logits: ln V per head.
        let logits = vec![vec![0.0f64; 2 * 5]];
        let l = nll_loss(&logits, &[1, 3], &[true, true], 5).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        // Saturated correct logits.
        let mut sat = vec![vec![0.0f64; 5]];
        sat[0][2] = 60.0;
        assert!(nll_loss(&sat, &[2], &[true], 5).unwrap() < 1e-20);
        assert!(matches!(nll_loss(&logits, &[1, 3], &[false, false], 5), Err(Error::AllMasked)));
        assert!(nll_loss(&logits, &[1], &[true, true], 5).is_err());
    }

    #[test]
    fn nll_matches_scalar_recomputation() {
        let logits = vec![vec![0.3f64, -1.2, 2.0, 0.1, 0.7, -0.4], vec![1.0, 0.0, -1.0, 0.5, 0.5, 2.5]];
        // two heads, two positions of 3 logits
        let targets = [2, 0, 1, 2];
        let l = nll_loss(&logits, &targets, &[true, true], 3).unwrap();
        let ce = |row: &[f64], t: usize| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[t].exp() / z).ln()
        };
        let want = (ce(&logits[0][0..3], 2) + ce(&logits[1][0..3], 0) + ce(&logits[0][3..6], 1) + ce(&logits[1][3..6], 2)) / 2.0;
        assert!((l - want).abs() < 1e-12);
    }

    #[test]
    fn zero_head_blocks_body_gradient() {
        let cfg = toy(0);
        let mut p: Params<f64> = Params::init(&cfg, 9);
        p.head_w[0].data.iter_mut().for_each(|v| *v = 0.0);
        let ex = Example {
            inputs: vec![Slot::Token(0), Slot::Token(2), Slot::Token(4)],
            targets: vec![2, 4, 8],
            loss_mask: vec![true, true, true],
        };
        let (_, g) = loss_and_grad(&p, &[ex], None).unwrap();
        for (name, t) in g.tensors() {
            if name.starts_with("heads.") {
                assert!(t.data.iter().any(|&v| v != 0.0), "{name}");
            } else {
                assert!(t.data.iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn gradient_is_deterministic() {
        let cfg = toy(2);
        let p: Params<f32> = Params::init(&cfg, 2);
        let ex = Example {
            inputs: vec![Slot::Token(1), Slot::Frame(vec![1, 1].into()), Slot::Frame(vec![1, 1].into())],
            targets: vec![0, 0, 1, 1, 5, 5],
            loss_mask: vec![true, true, true],
        };
        let a = loss_and_grad(&p, std::slice::from_ref(&ex), None).unwrap();
        let b = loss_and_grad(&p, std::slice::from_ref(&ex), None).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn dropout_changes_training_pass_only_with_rng() {
        let mut cfg = toy(0);
        cfg.dropout = 0.5;
        let p: Params<f64> = Params::init(&cfg, 4);
        let slots = vec![Slot::Token(1), Slot::Token(2)];
        let plain = forward_train(&p, &slots, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dropped = forward_train(&p, &slots, Some(&mut rng)).unwrap();
        assert_eq!(plain.logits, forward(&p, &slots).unwrap());
        assert_ne!(plain.logits, dropped.logits);
    }
}
