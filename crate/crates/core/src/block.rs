//! One Nirvana layer: the specialized memory updater (sliding-window
//! attention with low-rank deltas, gated-delta linear attention, conditional
//! interpolation) and the task-aware trigger (weight bank, meta function and
//! the cross-layer online gradient step on the fast parameters).
//!
//! Everything is laid out row-per-token so one call processes a whole
//! sequence chunk; the single-vector functions at the top are the reference
//! forms and are what the tests compare the batched graph against.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Graph, Op};
use crate::error::{Error, Result};
use crate::numerics::{self, Tensor, LAYER_NORM_EPS, RMS_NORM_EPS};
use crate::rules::KvBuffer;

/// Reference learning rate of the fast-parameter step.
pub const ETA_REF: f64 = 1e-2;
pub const ROPE_BASE: f64 = 10_000.0;
/// Linear-attention key normalization floor.
pub const KEY_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub d_model: usize,
    pub heads: usize,
    pub window: usize,
    pub d_trig: usize,
    pub bank_size: usize,
    pub rank: usize,
    pub rope: bool,
}

impl BlockConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn zeta_hidden(&self) -> usize {
        self.d_model / 8
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.window == 0 {
            return bad("window must be ≥ 1".into());
        }
        if self.bank_size == 0 {
            return bad("bank size K must be ≥ 1".into());
        }
        if self.d_trig == 0 {
            return bad("d_trig must be ≥ 1".into());
        }
        if self.rank == 0 || self.rank >= self.d_model {
            return bad(format!("rank {} must lie in 1..d_model", self.rank));
        }
        if self.zeta_hidden() == 0 {
            return bad(format!("d_model {} leaves no zeta hidden units", self.d_model));
        }
        if self.rope && self.d_head() % 2 != 0 {
            return bad("rope needs an even head width".into());
        }
        Ok(())
    }

    /// Width of one flattened bank block, `d_trig² + d_trig`.
    pub fn bank_block(&self) -> usize {
        self.d_trig * self.d_trig + self.d_trig
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    /// linear attention and FFN only
    Prelude,
    Nirvana,
}

/// Parameter names and shapes of one layer. Projections are stored
/// input-major so a row of hidden states multiplies them on the left.
pub fn layer_shapes(cfg: &BlockConfig, kind: LayerKind) -> Vec<(&'static str, Vec<usize>)> {
    let d = cfg.d_model;
    let (h, r, dt) = (cfg.heads, cfg.rank, cfg.d_trig);
    let mut out = vec![
        ("norm_attn", vec![d]),
        ("w_q", vec![d, d]),
        ("w_k", vec![d, d]),
        ("w_v", vec![d, d]),
        ("gate_alpha_w", vec![d, h]),
        ("gate_alpha_b", vec![h]),
        ("gate_beta_w", vec![d, h]),
    ];
    if kind == LayerKind::Nirvana {
        out.extend([
            ("lr_q_down", vec![d, r]),
            ("lr_q_up", vec![r, d]),
            ("lr_k_down", vec![d, r]),
            ("lr_k_up", vec![r, d]),
            ("lr_v_down", vec![d, r]),
            ("lr_v_up", vec![r, d]),
            ("trig_q", vec![d, dt]),
            ("trig_k", vec![d, dt]),
            ("trig_v", vec![d, dt]),
            ("theta", vec![d]),
            ("u", vec![dt]),
            ("zeta_w1", vec![2 * d + dt, cfg.zeta_hidden()]),
            ("zeta_w2", vec![cfg.zeta_hidden(), d]),
        ]);
    }
    out.extend([("norm_ffn", vec![d]), ("ffn_w1", vec![d, 4 * d]), ("ffn_w2", vec![4 * d, d])]);
    out
}

/// Per-token fast parameters `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastParams(pub Vec<f64>);

impl FastParams {
    pub fn ones(k: usize) -> Self {
        Self(vec![1.0; k])
    }
}

/// `K` blocks `(W_j, b_j)` stored one per row as `[vec(W_j) | b_j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBank {
    d_trig: usize,
    data: Tensor,
}

impl WeightBank {
    pub fn new(d_trig: usize, data: Tensor) -> Result<Self> {
        let width = d_trig * d_trig + d_trig;
        if data.rank() != 2 || data.shape()[1] != width || data.shape()[0] == 0 {
            return Err(Error::Dimension(format!(
                "bank shape {:?} does not hold blocks of width {width}",
                data.shape()
            )));
        }
        Ok(Self { d_trig, data })
    }

    pub fn from_blocks(blocks: &[(Tensor, Vec<f64>)]) -> Result<Self> {
        let d_trig = blocks.first().map(|(_, b)| b.len()).unwrap_or(0);
        let mut data = Vec::new();
        for (w, b) in blocks {
            if w.shape() != [d_trig, d_trig] || b.len() != d_trig {
                return Err(Error::Dimension("bank blocks differ in shape".into()));
            }
            data.extend_from_slice(w.data());
            data.extend_from_slice(b);
        }
        Self::new(d_trig, Tensor::matrix(blocks.len(), d_trig * d_trig + d_trig, data)?)
    }

    pub fn zeros(k: usize, d_trig: usize) -> Self {
        Self {
            d_trig,
            data: Tensor::zeros(&[k, d_trig * d_trig + d_trig]),
        }
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_trig(&self) -> usize {
        self.d_trig
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn block(&self, j: usize) -> (Tensor, Vec<f64>) {
        let row = self.data.row(j);
        let n = self.d_trig * self.d_trig;
        let w = Tensor::new(vec![self.d_trig, self.d_trig], row[..n].to_vec()).expect("block shape");
        (w, row[n..].to_vec())
    }
}

/// `W = Σ_k p_k W_k`, `b = Σ_k p_k b_k`.
pub fn materialize_fast_weights(p: &FastParams, bank: &WeightBank) -> Result<(Tensor, Vec<f64>)> {
    if p.0.len() != bank.len() {
        return Err(Error::Dimension(format!("p has {} entries, bank {}", p.0.len(), bank.len())));
    }
    let width = bank.data.shape()[1];
    let mut flat = vec![0.0; width];
    for (pk, j) in p.0.iter().zip(0..) {
        for (f, x) in flat.iter_mut().zip(bank.data.row(j)) {
            *f += pk * x;
        }
    }
    let n = bank.d_trig * bank.d_trig;
    let b = flat.split_off(n);
    Ok((Tensor::new(vec![bank.d_trig, bank.d_trig], flat)?, b))
}

fn affine(x: &[f64], w: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    if w.rank() != 2 || w.shape()[1] != x.len() || w.shape()[0] != b.len() {
        return Err(Error::Dimension(format!(
            "W {:?} with x of {} and b of {}",
            w.shape(),
            x.len(),
            b.len()
        )));
    }
    Ok((0..b.len()).map(|i| numerics::dot(w.row(i), x) + b[i]).collect())
}

/// Meta function `f(x; W, b) = x + LN(W x + b)`.
pub fn meta_apply(x: &[f64], w: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    let z = affine(x, w, b)?;
    let y = numerics::layer_norm(&z, LAYER_NORM_EPS);
    Ok(x.iter().zip(&y).map(|(a, c)| a + c).collect())
}

/// Trigger regression loss `‖f(k̃; W(p)) − ṽ‖²`.
pub fn trigger_loss(p: &FastParams, bank: &WeightBank, k: &[f64], v: &[f64]) -> Result<f64> {
    let (w, b) = materialize_fast_weights(p, bank)?;
    let f = meta_apply(k, &w, &b)?;
    Ok(f.iter().zip(v).map(|(a, c)| (a - c) * (a - c)).sum())
}

/// Backward through `y = LN(z)`: returns `∂L/∂z` given `∂L/∂y`.
fn layer_norm_backward(z: &[f64], gy: &[f64], eps: f64) -> Vec<f64> {
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    let y: Vec<f64> = z.iter().map(|v| (v - mean) * inv).collect();
    let mg = gy.iter().sum::<f64>() / n;
    let mgy = gy.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / n;
    gy.iter().zip(&y).map(|(g, yy)| inv * (g - mg - yy * mgy)).collect()
}

/// Gradient of [`trigger_loss`] in `p`, contracted blockwise:
/// `Δp_j = ⟨∂L/∂W, W_j⟩_F + ⟨∂L/∂b, b_j⟩`.
pub fn clogd_grad(p_prev: &FastParams, bank: &WeightBank, k: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let (w, b) = materialize_fast_weights(p_prev, bank)?;
    if v.len() != k.len() {
        return Err(Error::Dimension("k̃ and ṽ differ in length".into()));
    }
    let z = affine(k, &w, &b)?;
    let y = numerics::layer_norm(&z, LAYER_NORM_EPS);
    let gy: Vec<f64> = (0..k.len()).map(|i| 2.0 * (k[i] + y[i] - v[i])).collect();
    let dz = layer_norm_backward(&z, &gy, LAYER_NORM_EPS);
    // ∂L/∂W = dz kᵀ, so ⟨∂L/∂W, W_j⟩ + ⟨dz, b_j⟩ = dz · (W_j k + b_j)
    (0..bank.len())
        .map(|j| {
            let (wj, bj) = bank.block(j);
            Ok(numerics::dot(&dz, &affine(k, &wj, &bj)?))
        })
        .collect()
}

/// `η = η_ref σ(θ·h)`, `p_new = p_prev − η Δp`.
pub fn clogd_update(p_prev: &FastParams, dp: &[f64], h: &[f64], theta: &[f64]) -> Result<(FastParams, f64)> {
    if dp.len() != p_prev.0.len() || h.len() != theta.len() {
        return Err(Error::Dimension("clogd_update shapes".into()));
    }
    let eta = ETA_REF * numerics::sigmoid(numerics::dot(theta, h));
    Ok((FastParams(p_prev.0.iter().zip(dp).map(|(p, d)| p - eta * d).collect()), eta))
}

/// `c = f(q̃; W, b)` with the weights materialized from the updated `p`.
pub fn extract_condition(q: &[f64], w: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    meta_apply(q, w, b)
}

fn rope_vec(x: &[f64], pos: usize) -> Result<Vec<f64>> {
    let t = Tensor::matrix(1, x.len(), x.to_vec())?;
    Ok(autodiff::eval(&Op::Rope { offset: pos, base: ROPE_BASE }, &[&t])?.into_data())
}

/// Append `(k, v)` to each head's buffer and read it with `q`. Inputs are
/// full-width vectors split evenly across `buffers`.
pub fn swa_attend(
    buffers: &mut [KvBuffer],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    position: usize,
    rope: bool,
) -> Result<Vec<f64>> {
    let heads = buffers.len();
    if heads == 0 || q.len() % heads != 0 || k.len() != q.len() || v.len() % heads != 0 {
        return Err(Error::Dimension("swa_attend head split".into()));
    }
    let (dh, dv) = (q.len() / heads, v.len() / heads);
    let mut out = Vec::with_capacity(v.len());
    for (h, buf) in buffers.iter_mut().enumerate() {
        let (mut qh, mut kh) = (q[h * dh..(h + 1) * dh].to_vec(), k[h * dh..(h + 1) * dh].to_vec());
        if rope {
            qh = rope_vec(&qh, position)?;
            kh = rope_vec(&kh, position)?;
        }
        buf.push(kh, v[h * dv..(h + 1) * dv].to_vec());
        out.extend(buf.attend(&qh));
    }
    Ok(out)
}

/// Shared projections and low-rank deltas for one hidden vector.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdaterQkv {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    pub dv: Vec<f64>,
}

fn row_times(x: &[f64], w: &Tensor) -> Result<Vec<f64>> {
    Ok(numerics::matmul(&Tensor::vector(x.to_vec()), w)?.into_data())
}

/// Base `h W` and rank-r deltas `(h D) U` for q, k and v.
pub fn updater_qkv(h: &[f64], lv: &Vars<'_, Tensor>) -> Result<UpdaterQkv> {
    let lr = |a: &str, b: &str| -> Result<Vec<f64>> { row_times(&row_times(h, lv.get(a)?)?, lv.get(b)?) };
    Ok(UpdaterQkv {
        q: row_times(h, lv.get("w_q")?)?,
        k: row_times(h, lv.get("w_k")?)?,
        v: row_times(h, lv.get("w_v")?)?,
        dq: lr("lr_q_down", "lr_q_up")?,
        dk: lr("lr_k_down", "lr_k_up")?,
        dv: lr("lr_v_down", "lr_v_up")?,
    })
}

/// `t = σ(u·c)`, `t a + (1 − t) b + W₂ swish(W₁ [a; b; c])`. Returns `(v_out, t)`.
pub fn interpolate(
    a: &[f64],
    b: &[f64],
    c: &[f64],
    u: &[f64],
    zeta_w1: &Tensor,
    zeta_w2: &Tensor,
) -> Result<(Vec<f64>, f64)> {
    if a.len() != b.len() || c.len() != u.len() {
        return Err(Error::Dimension("interpolate operand lengths".into()));
    }
    let t = numerics::sigmoid(numerics::dot(u, c));
    let mut abc = a.to_vec();
    abc.extend_from_slice(b);
    abc.extend_from_slice(c);
    let hidden: Vec<f64> = row_times(&abc, zeta_w1)?.into_iter().map(numerics::swish).collect();
    let z = row_times(&hidden, zeta_w2)?;
    let out = (0..a.len()).map(|i| t * a[i] + (1.0 - t) * b[i] + z[i]).collect();
    Ok((out, t))
}

/// Named view into a parameter map under a prefix such as `layers.2.`.
pub struct Vars<'a, V> {
    map: &'a BTreeMap<String, V>,
    prefix: String,
}

impl<'a, V> Vars<'a, V> {
    pub fn new(map: &'a BTreeMap<String, V>, prefix: impl Into<String>) -> Self {
        Self {
            map,
            prefix: prefix.into(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&'a V> {
        let key = format!("{}{name}", self.prefix);
        self.map
            .get(&key)
            .ok_or_else(|| Error::Config(format!("missing parameter {key}")))
    }
}

/// Recurrent state of one layer across calls.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    /// per-head linear-attention memory `[d_head × d_head]`
    pub memory: Vec<Tensor>,
    /// per-head sliding-window keys (rotated when rope is on) and values
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
}

impl LayerState {
    pub fn new(cfg: &BlockConfig, kind: LayerKind) -> Self {
        let dh = cfg.d_head();
        let swa = if kind == LayerKind::Nirvana { cfg.heads } else { 0 };
        Self {
            memory: vec![Tensor::zeros(&[dh, dh]); cfg.heads],
            keys: vec![Tensor::zeros(&[0, dh]); swa],
            values: vec![Tensor::zeros(&[0, dh]); swa],
        }
    }

    /// Number of stored scalars.
    pub fn size(&self) -> usize {
        self.memory.iter().chain(&self.keys).chain(&self.values).map(Tensor::len).sum()
    }

    pub fn buffer_len(&self) -> usize {
        self.keys.first().map(Tensor::n_rows).unwrap_or(0)
    }
}

/// Intermediate values of one post-prelude layer for one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub layer: usize,
    pub position: usize,
    pub q_trig: Vec<f64>,
    pub k_trig: Vec<f64>,
    pub v_trig: Vec<f64>,
    pub p_in: Vec<f64>,
    pub delta_p: Vec<f64>,
    pub eta: f64,
    pub p_out: Vec<f64>,
    pub c: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub t: f64,
    pub v_out: Vec<f64>,
    pub h_out: Vec<f64>,
}

pub fn write_layer_traces<W: Write>(mut w: W, traces: &[LayerTrace]) -> Result<()> {
    for t in traces {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn ones(rows: usize, cols: usize) -> Tensor {
    Tensor::filled(&[rows, cols], 1.0)
}

/// Broadcast a `[T×1]` column across `n` columns.
fn expand_col<G: Graph>(g: &mut G, col: &G::Var, n: usize) -> Result<G::Var> {
    let o = g.constant(ones(1, n));
    g.matmul(col, &o)
}

/// Row means as a `[T×1]` column.
fn row_mean<G: Graph>(g: &mut G, x: &G::Var) -> Result<G::Var> {
    let n = g.value(x).last_dim();
    let w = g.constant(Tensor::filled(&[n, 1], 1.0 / n as f64));
    g.matmul(x, &w)
}

/// `[T] → [T×1]`.
fn column<G: Graph>(g: &mut G, v: &G::Var) -> Result<G::Var> {
    let t = g.value(v).len();
    g.reshape(v, &[t, 1])
}

fn concat_rows<G: Graph>(g: &mut G, a: &G::Var, b: &G::Var) -> Result<G::Var> {
    let at = g.transpose(a)?;
    let bt = g.transpose(b)?;
    let c = g.concat(&[&at, &bt])?;
    g.transpose(&c)
}

/// Graph form of the trigger for every row at once.
pub struct TriggerOut<V> {
    pub q: V,
    pub k: V,
    pub v: V,
    pub delta_p: V,
    pub eta: V,
    pub p_out: V,
    pub c: V,
}

/// `[T×dt]` inputs against all bank blocks: row t, block j holds
/// `W_j x_t + b_j` in columns `j·dt .. (j+1)·dt`.
fn bank_affine<G: Graph>(g: &mut G, bank: &G::Var, x: &G::Var, dt: usize) -> Result<G::Var> {
    let k = g.value(bank).shape()[0];
    let w = g.slice_cols(bank, 0, dt * dt)?;
    let w = g.reshape(&w, &[k * dt, dt])?;
    let w = g.transpose(&w)?;
    let b = g.slice_cols(bank, dt * dt, dt)?;
    let b = g.reshape(&b, &[k * dt])?;
    let z = g.matmul(x, &w)?;
    g.add(&z, &b)
}

/// Block expansion `[K × K·dt]` and block sum `[K·dt × dt]` selectors.
fn block_selectors(k: usize, dt: usize) -> (Tensor, Tensor) {
    let mut e = Tensor::zeros(&[k, k * dt]);
    let mut s = Tensor::zeros(&[k * dt, dt]);
    for j in 0..k {
        for i in 0..dt {
            e.data_mut()[j * k * dt + j * dt + i] = 1.0;
            s.data_mut()[(j * dt + i) * dt + i] = 1.0;
        }
    }
    (e, s)
}

/// Trigger for all rows: projections, `Δp` at `p_in`, the step to `p_out`
/// and the condition `c` under the updated weights. `x` is the normed hidden
/// state `[T×d]`; `p_in` is `[T×K]`.
pub fn trigger_graph<G: Graph>(
    g: &mut G,
    cfg: &BlockConfig,
    lv: &Vars<'_, G::Var>,
    bank: &G::Var,
    x: &G::Var,
    p_in: &G::Var,
) -> Result<TriggerOut<G::Var>> {
    let (k, dt) = (cfg.bank_size, cfg.d_trig);
    let q = g.matmul(x, lv.get("trig_q")?)?;
    let kk = g.matmul(x, lv.get("trig_k")?)?;
    let v = g.matmul(x, lv.get("trig_v")?)?;
    let (e, s) = block_selectors(k, dt);
    let e = g.constant(e);
    let s = g.constant(s);

    // loss at p_in
    let zk = bank_affine(g, bank, &kk, dt)?;
    let pe = g.matmul(p_in, &e)?;
    let zp = g.mul(&zk, &pe)?;
    let z = g.matmul(&zp, &s)?;
    let y = g.layer_norm(&z, LAYER_NORM_EPS)?;
    let f = g.add(&kk, &y)?;
    let r = g.sub(&f, &v)?;
    let gy = g.scale(&r, 2.0)?;

    // analytic LN backward: dz = σ⁻¹ (gy − mean(gy) − y · mean(gy ⊙ y))
    let mu = row_mean(g, &z)?;
    let mu = expand_col(g, &mu, dt)?;
    let cen = g.sub(&z, &mu)?;
    let sq = g.mul(&cen, &cen)?;
    let var = row_mean(g, &sq)?;
    let eps = g.scalar(LAYER_NORM_EPS);
    let var = g.add(&var, &eps)?;
    let inv = g.powf(&var, -0.5)?;
    let inv = expand_col(g, &inv, dt)?;
    let mg = row_mean(g, &gy)?;
    let mg = expand_col(g, &mg, dt)?;
    let gyy = g.mul(&gy, &y)?;
    let mgy = row_mean(g, &gyy)?;
    let mgy = expand_col(g, &mgy, dt)?;
    let ymgy = g.mul(&y, &mgy)?;
    let inner = g.sub(&gy, &mg)?;
    let inner = g.sub(&inner, &ymgy)?;
    let dz = g.mul(&inv, &inner)?;

    // Δp_j = dz · (W_j k̃ + b_j)
    let st = g.transpose(&s)?;
    let dzt = g.matmul(&dz, &st)?;
    let prod = g.mul(&zk, &dzt)?;
    let et = g.transpose(&e)?;
    let delta_p = g.matmul(&prod, &et)?;

    let logit = g.matmul(x, lv.get("theta")?)?;
    let sig = g.sigmoid(&logit)?;
    let eta = g.scale(&sig, ETA_REF)?;
    let eta_col = column(g, &eta)?;
    let eta_k = expand_col(g, &eta_col, k)?;
    let step = g.mul(&eta_k, &delta_p)?;
    let p_out = g.sub(p_in, &step)?;

    // condition under the updated weights
    let zq = bank_affine(g, bank, &q, dt)?;
    let pe = g.matmul(&p_out, &e)?;
    let zp = g.mul(&zq, &pe)?;
    let z = g.matmul(&zp, &s)?;
    let y = g.layer_norm(&z, LAYER_NORM_EPS)?;
    let c = g.add(&q, &y)?;
    Ok(TriggerOut {
        q,
        k: kk,
        v,
        delta_p,
        eta,
        p_out,
        c,
    })
}

fn head_cols<G: Graph>(g: &mut G, x: &G::Var, h: usize, dh: usize) -> Result<G::Var> {
    g.slice_cols(x, h * dh, dh)
}

fn head_col_vec<G: Graph>(g: &mut G, x: &G::Var, h: usize) -> Result<G::Var> {
    let c = g.slice_cols(x, h, 1)?;
    let t = g.value(&c).n_rows();
    g.reshape(&c, &[t])
}

/// Gated-delta linear attention over all heads, keys L2-normalized per
/// head, gates `α = σ(x w_α + c_α)`, `β = σ(x w_β)`. Advances `state`.
fn linear_attention<G: Graph>(
    g: &mut G,
    cfg: &BlockConfig,
    lv: &Vars<'_, G::Var>,
    x: &G::Var,
    q: &G::Var,
    k: &G::Var,
    v: &G::Var,
    state: &mut Option<&mut LayerState>,
) -> Result<G::Var> {
    let dh = cfg.d_head();
    let al = g.matmul(x, lv.get("gate_alpha_w")?)?;
    let al = g.add(&al, lv.get("gate_alpha_b")?)?;
    let alpha = g.sigmoid(&al)?;
    let be = g.matmul(x, lv.get("gate_beta_w")?)?;
    let beta = g.sigmoid(&be)?;
    let mut outs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = head_cols(g, q, h, dh)?;
        let kh = head_cols(g, k, h, dh)?;
        let kh = g.l2_normalize(&kh, KEY_NORM_EPS)?;
        let vh = head_cols(g, v, h, dh)?;
        let ah = head_col_vec(g, &alpha, h)?;
        let bh = head_col_vec(g, &beta, h)?;
        let m0 = match state.as_deref() {
            Some(s) => s.memory[h].clone(),
            None => Tensor::zeros(&[dh, dh]),
        };
        let m0 = g.constant(m0);
        outs.push(g.gated_delta_scan(&qh, &kh, &vh, &ah, &bh, &m0)?);
        if let Some(s) = state.as_deref_mut() {
            let (_, m) = autodiff::gated_delta_scan(
                g.value(&qh),
                g.value(&kh),
                g.value(&vh),
                g.value(&ah),
                g.value(&bh),
                g.value(&m0),
            )?;
            s.memory[h] = m;
        }
    }
    let refs: Vec<&G::Var> = outs.iter().collect();
    g.concat(&refs)
}

/// Sliding-window attention over all heads, continuing from the buffers in
/// `state` and leaving the most recent `window` entries behind.
fn sliding_attention<G: Graph>(
    g: &mut G,
    cfg: &BlockConfig,
    q: &G::Var,
    k: &G::Var,
    v: &G::Var,
    pos0: usize,
    state: &mut Option<&mut LayerState>,
) -> Result<G::Var> {
    let dh = cfg.d_head();
    let mut outs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let mut qh = head_cols(g, q, h, dh)?;
        let mut kh = head_cols(g, k, h, dh)?;
        let vh = head_cols(g, v, h, dh)?;
        if cfg.rope {
            qh = g.rope(&qh, pos0, ROPE_BASE)?;
            kh = g.rope(&kh, pos0, ROPE_BASE)?;
        }
        let prev = state.as_deref().filter(|s| s.keys[h].n_rows() > 0);
        let (kall, vall) = match prev {
            Some(s) => {
                let pk = g.constant(s.keys[h].clone());
                let pv = g.constant(s.values[h].clone());
                (concat_rows(g, &pk, &kh)?, concat_rows(g, &pv, &vh)?)
            }
            None => (kh, vh),
        };
        outs.push(g.window_attention(&qh, &kall, &vall, cfg.window)?);
        if let Some(s) = state.as_deref_mut() {
            let (kt, vt) = (g.value(&kall), g.value(&vall));
            let n = kt.n_rows();
            let keep = n.min(cfg.window);
            let tail = |t: &Tensor| -> Result<Tensor> {
                Tensor::new(vec![keep, dh], t.data()[(n - keep) * dh..].to_vec())
            };
            s.keys[h] = tail(kt)?;
            s.values[h] = tail(vt)?;
        }
    }
    let refs: Vec<&G::Var> = outs.iter().collect();
    g.concat(&refs)
}

fn ffn<G: Graph>(g: &mut G, lv: &Vars<'_, G::Var>, h: &G::Var) -> Result<G::Var> {
    let x = g.rms_norm(h, lv.get("norm_ffn")?, RMS_NORM_EPS)?;
    let u = g.matmul(&x, lv.get("ffn_w1")?)?;
    let u = g.swish(&u)?;
    let y = g.matmul(&u, lv.get("ffn_w2")?)?;
    g.add(h, &y)
}

/// Prelude layer: gated-delta linear attention and FFN, pre-norm residual.
pub fn prelude_layer<G: Graph>(
    g: &mut G,
    cfg: &BlockConfig,
    lv: &Vars<'_, G::Var>,
    h: &G::Var,
    mut state: Option<&mut LayerState>,
) -> Result<G::Var> {
    let x = g.rms_norm(h, lv.get("norm_attn")?, RMS_NORM_EPS)?;
    let q = g.matmul(&x, lv.get("w_q")?)?;
    let k = g.matmul(&x, lv.get("w_k")?)?;
    let v = g.matmul(&x, lv.get("w_v")?)?;
    let o = linear_attention(g, cfg, lv, &x, &q, &k, &v, &mut state)?;
    let h1 = g.add(h, &o)?;
    ffn(g, lv, &h1)
}

/// Everything a post-prelude layer hands back besides the new hidden rows.
pub struct LayerOut<V> {
    pub h: V,
    pub p_out: V,
}

/// Post-prelude Nirvana layer for rows `h [T×d]` at absolute positions
/// `pos0..pos0+T`, fast parameters `p_in [T×K]`.
#[allow(clippy::too_many_arguments)]
pub fn nirvana_layer<G: Graph>(
    g: &mut G,
    cfg: &BlockConfig,
    lv: &Vars<'_, G::Var>,
    bank: &G::Var,
    h: &G::Var,
    p_in: &G::Var,
    mut state: Option<&mut LayerState>,
    pos0: usize,
    layer: usize,
    trace: Option<&mut Vec<LayerTrace>>,
) -> Result<LayerOut<G::Var>> {
    let d = cfg.d_model;
    let x = g.rms_norm(h, lv.get("norm_attn")?, RMS_NORM_EPS)?;
    let trig = trigger_graph(g, cfg, lv, bank, &x, p_in)?;

    let q = g.matmul(&x, lv.get("w_q")?)?;
    let k = g.matmul(&x, lv.get("w_k")?)?;
    let v = g.matmul(&x, lv.get("w_v")?)?;
    let delta = |g: &mut G, down: &str, up: &str| -> Result<G::Var> {
        let r = g.matmul(&x, lv.get(down)?)?;
        g.matmul(&r, lv.get(up)?)
    };
    let dq = delta(g, "lr_q_down", "lr_q_up")?;
    let dk = delta(g, "lr_k_down", "lr_k_up")?;
    let dv = delta(g, "lr_v_down", "lr_v_up")?;
    let qs = g.add(&q, &dq)?;
    let ks = g.add(&k, &dk)?;
    let vs = g.add(&v, &dv)?;

    let b = linear_attention(g, cfg, lv, &x, &q, &k, &v, &mut state)?;
    let a = sliding_attention(g, cfg, &qs, &ks, &vs, pos0, &mut state)?;

    let logit = g.matmul(&trig.c, lv.get("u")?)?;
    let t = g.sigmoid(&logit)?;
    let tcol = column(g, &t)?;
    let tw = expand_col(g, &tcol, d)?;
    let one = g.scalar(1.0);
    let tb = g.sub(&one, &tw)?;
    let ta = g.mul(&tw, &a)?;
    let tb = g.mul(&tb, &b)?;
    let mix = g.add(&ta, &tb)?;
    let abc = g.concat(&[&a, &b, &trig.c])?;
    let zh = g.matmul(&abc, lv.get("zeta_w1")?)?;
    let zh = g.swish(&zh)?;
    let z = g.matmul(&zh, lv.get("zeta_w2")?)?;
    let v_out = g.add(&mix, &z)?;

    let h1 = g.add(h, &v_out)?;
    let h2 = ffn(g, lv, &h1)?;

    if let Some(out) = trace {
        let rows = g.value(h).n_rows();
        let row = |g: &G, var: &G::Var, r: usize| g.value(var).row(r).to_vec();
        for r in 0..rows {
            out.push(LayerTrace {
                layer,
                position: pos0 + r,
                q_trig: row(g, &trig.q, r),
                k_trig: row(g, &trig.k, r),
                v_trig: row(g, &trig.v, r),
                p_in: row(g, p_in, r),
                delta_p: row(g, &trig.delta_p, r),
                eta: g.value(&trig.eta).data()[r],
                p_out: row(g, &trig.p_out, r),
                c: row(g, &trig.c, r),
                q: row(g, &qs, r),
                k: row(g, &ks, r),
                v: row(g, &vs, r),
                a: row(g, &a, r),
                b: row(g, &b, r),
                t: g.value(&t).data()[r],
                v_out: row(g, &v_out, r),
                h_out: row(g, &h2, r),
            });
        }
    }
    Ok(LayerOut { h: h2, p_out: trig.p_out })
}

/// Output of [`block_forward`] for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockStep {
    pub h_out: Vec<f64>,
    pub p_out: FastParams,
    pub trace: LayerTrace,
}

/// One post-prelude layer applied to a single hidden vector, advancing
/// `state` in place.
#[allow(clippy::too_many_arguments)]
pub fn block_forward(
    cfg: &BlockConfig,
    params: &BTreeMap<String, Tensor>,
    prefix: &str,
    bank: &WeightBank,
    h: &[f64],
    p_in: &FastParams,
    state: &mut LayerState,
    position: usize,
) -> Result<BlockStep> {
    let mut g = autodiff::Eager::default();
    let vars: BTreeMap<String, _> = params.iter().map(|(k, v)| (k.clone(), g.constant(v.clone()))).collect();
    let lv = Vars::new(&vars, prefix);
    let bank = g.constant(bank.tensor().clone());
    let hv = g.constant(Tensor::matrix(1, h.len(), h.to_vec())?);
    let pv = g.constant(Tensor::matrix(1, p_in.0.len(), p_in.0.clone())?);
    let mut traces = Vec::with_capacity(1);
    let out = nirvana_layer(&mut g, cfg, &lv, &bank, &hv, &pv, Some(state), position, 0, Some(&mut traces))?;
    Ok(BlockStep {
        h_out: out.h.data().to_vec(),
        p_out: FastParams(out.p_out.data().to_vec()),
        trace: traces.pop().expect("one row traced"),
    })
}
