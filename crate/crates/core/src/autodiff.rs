//! Reverse-mode differentiation over the numerics op set.
//!
//! Model code is written once against [`Graph`]. [`Eager`] evaluates ops
//! immediately; [`Tape`] evaluates them the same way and also records them so
//! [`Tape::backward`] can replay the chain rule in reverse. Both backends share
//! [`eval`], so a forward on either produces bit-identical values.

use std::collections::HashMap;
use std::rc::Rc;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{self, Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// First axis (rows of a matrix).
    Rows,
    /// Last axis.
    Cols,
}

/// A recordable primitive together with its static attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Matmul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    LayerNorm { eps: f64 },
    /// Inputs: `x`, `gain`.
    RmsNorm { eps: f64 },
    Sigmoid,
    Swish,
    Softmax,
    /// Concatenate along the last axis.
    Concat,
    /// Stack equal-shaped inputs along a new leading axis.
    Stack,
    Slice { axis: Axis, start: usize, len: usize },
    /// Row `i` of a matrix as a vector.
    Select(usize),
    Sum,
    /// `Σ (a − b)²`.
    SquaredError,
    Reshape(Vec<usize>),
    Transpose,
    L2Normalize { eps: f64 },
    /// Weighted negative log-likelihood of `targets` under row-softmax of the logits.
    CrossEntropy { targets: Vec<usize>, weights: Vec<f64> },
    /// Rotary embedding of rows at absolute positions `offset + row`.
    Rope { offset: usize, base: f64 },
    /// elementwise `x^p`
    Powf(f64),
    /// Gated delta recurrence over a whole sequence. Inputs `q, k [T×d_k]`,
    /// `v [T×d_v]`, `alpha, beta [T]`, initial memory `m0 [d_v×d_k]`;
    /// output row t is `M_t q_t`.
    GatedDeltaScan,
    /// Causal sliding-window softmax attention. Inputs `q [T×d]`,
    /// `k [(P+T)×d]`, `v [(P+T)×d_v]`, where the first `P` key/value rows are
    /// history preceding the queries. Query t sees the `window` most recent
    /// positions up to and including its own.
    WindowAttention { window: usize },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Matmul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::LayerNorm { .. } => "layer_norm",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Sigmoid => "sigmoid",
            Op::Swish => "swish",
            Op::Softmax => "softmax",
            Op::Concat => "concat",
            Op::Stack => "stack",
            Op::Slice { .. } => "slice",
            Op::Select(_) => "select",
            Op::Sum => "sum",
            Op::SquaredError => "squared_error",
            Op::Reshape(_) => "reshape",
            Op::Transpose => "transpose",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Rope { .. } => "rope",
            Op::Powf(_) => "powf",
            Op::GatedDeltaScan => "gated_delta_scan",
            Op::WindowAttention { .. } => "window_attention",
        }
    }
}

/// Parses primitives that need no attributes (defaults used for the norms).
impl FromStr for Op {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => Op::Matmul,
            "add" => Op::Add,
            "sub" => Op::Sub,
            "mul" => Op::Mul,
            "layer_norm" => Op::LayerNorm {
                eps: numerics::LAYER_NORM_EPS,
            },
            "rms_norm" => Op::RmsNorm {
                eps: numerics::RMS_NORM_EPS,
            },
            "sigmoid" => Op::Sigmoid,
            "swish" => Op::Swish,
            "softmax" => Op::Softmax,
            "concat" => Op::Concat,
            "stack" => Op::Stack,
            "sum" => Op::Sum,
            "squared_error" => Op::SquaredError,
            "transpose" => Op::Transpose,
            other => return Err(Error::UnsupportedOp(other.to_string())),
        })
    }
}

fn arity(op: &Op) -> Option<usize> {
    match op {
        Op::Matmul | Op::Add | Op::Sub | Op::Mul | Op::RmsNorm { .. } | Op::SquaredError => Some(2),
        Op::GatedDeltaScan => Some(6),
        Op::WindowAttention { .. } => Some(3),
        Op::Concat | Op::Stack => None,
        _ => Some(1),
    }
}

/// How the second operand of a binary elementwise op lines up with the first.
#[derive(Clone, Copy)]
enum Bcast {
    Same,
    /// rhs is a single value
    RhsScalar,
    /// lhs is a single value
    LhsScalar,
    /// rhs is a vector matching the last axis of lhs
    RhsRow,
}

fn bcast(a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.len() == b.len() {
        Ok(Bcast::Same)
    } else if b.len() == 1 {
        Ok(Bcast::RhsScalar)
    } else if a.len() == 1 {
        Ok(Bcast::LhsScalar)
    } else if b.rank() == 1 && b.len() == a.last_dim() {
        Ok(Bcast::RhsRow)
    } else {
        Err(Error::Dimension(format!(
            "cannot broadcast {:?} with {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (ad, bd) = (a.data(), b.data());
    let (shape, data): (Vec<usize>, Vec<f64>) = match bcast(a, b)? {
        Bcast::Same => (
            a.shape().to_vec(),
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        ),
        Bcast::RhsScalar => (a.shape().to_vec(), ad.iter().map(|&x| f(x, bd[0])).collect()),
        Bcast::LhsScalar => (b.shape().to_vec(), bd.iter().map(|&y| f(ad[0], y)).collect()),
        Bcast::RhsRow => {
            let c = bd.len();
            (
                a.shape().to_vec(),
                ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % c])).collect(),
            )
        }
    };
    Tensor::new(shape, data)
}

/// Sum `g` back down to the shape of an operand that was broadcast as `how`.
fn unbroadcast(g: &[f64], target: &Tensor, how: Bcast, is_rhs: bool) -> Tensor {
    let reduce_all = matches!((how, is_rhs), (Bcast::RhsScalar, true) | (Bcast::LhsScalar, false));
    if reduce_all {
        let mut s = 0.0;
        for v in g {
            s += v;
        }
        return Tensor::new(target.shape().to_vec(), vec![s]).expect("scalar shape");
    }
    if matches!(how, Bcast::RhsRow) && is_rhs {
        let c = target.len();
        let mut out = vec![0.0; c];
        for (i, v) in g.iter().enumerate() {
            out[i % c] += v;
        }
        return Tensor::new(target.shape().to_vec(), out).expect("row shape");
    }
    Tensor::new(target.shape().to_vec(), g.to_vec()).expect("same shape")
}

fn rows_apply(x: &Tensor, f: impl Fn(&[f64]) -> Vec<f64>) -> Tensor {
    let c = x.last_dim();
    let mut out = Vec::with_capacity(x.len());
    if c > 0 {
        for r in x.data().chunks(c) {
            out.extend(f(r));
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("row-wise op keeps shape")
}

fn rope_angles(pos: usize, d: usize, base: f64) -> Vec<(f64, f64)> {
    (0..d / 2)
        .map(|i| {
            let theta = pos as f64 * base.powf(-2.0 * i as f64 / d as f64);
            (theta.cos(), theta.sin())
        })
        .collect()
}

fn rope_rows(x: &Tensor, offset: usize, base: f64, sign: f64) -> Tensor {
    let d = x.last_dim();
    let mut out = x.data().to_vec();
    for (r, row) in out.chunks_mut(d.max(1)).enumerate() {
        for (i, (c, s)) in rope_angles(offset + r, d, base).into_iter().enumerate() {
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            let s = sign * s;
            row[2 * i] = a * c - b * s;
            row[2 * i + 1] = a * s + b * c;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("rope keeps shape")
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row {
        s += (v - max).exp();
    }
    max + s.ln()
}

/// Forward evaluation of one primitive.
pub fn eval(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    if let Some(n) = arity(op) {
        if inputs.len() != n {
            return Err(Error::Shape(format!(
                "{} takes {n} inputs, got {}",
                op.name(),
                inputs.len()
            )));
        }
    } else if inputs.is_empty() {
        return Err(Error::Shape(format!("{} needs at least one input", op.name())));
    }
    let x = inputs[0];
    match op {
        Op::Matmul => numerics::matmul(x, inputs[1]),
        Op::Add => binary(x, inputs[1], |a, b| a + b),
        Op::Sub => binary(x, inputs[1], |a, b| a - b),
        Op::Mul => binary(x, inputs[1], |a, b| a * b),
        Op::Scale(c) => Ok(x.scale(*c)),
        Op::LayerNorm { eps } => Ok(rows_apply(x, |r| numerics::layer_norm(r, *eps))),
        Op::RmsNorm { eps } => {
            let gain = inputs[1];
            if gain.len() != x.last_dim() {
                return Err(Error::Dimension(format!(
                    "rms_norm gain {} vs width {}",
                    gain.len(),
                    x.last_dim()
                )));
            }
            Ok(rows_apply(x, |r| {
                numerics::rms_norm(r, gain.data(), *eps).expect("checked above")
            }))
        }
        Op::Sigmoid => Ok(x.map(numerics::sigmoid)),
        Op::Swish => Ok(x.map(numerics::swish)),
        Op::Softmax => Ok(rows_apply(x, numerics::softmax)),
        Op::Concat => {
            let rows = x.n_rows();
            let lead: Vec<usize> = x.shape()[..x.rank().saturating_sub(1)].to_vec();
            let mut width = 0;
            for t in inputs {
                if t.n_rows() != rows || t.shape()[..t.rank().saturating_sub(1)] != lead[..] {
                    return Err(Error::Dimension("concat: leading extents differ".into()));
                }
                width += t.last_dim();
            }
            let mut data = Vec::with_capacity(rows * width);
            for r in 0..rows {
                for t in inputs {
                    data.extend_from_slice(t.row(r));
                }
            }
            let mut shape = lead;
            shape.push(width);
            Tensor::new(shape, data)
        }
        Op::Stack => {
            let mut data = Vec::with_capacity(x.len() * inputs.len());
            for t in inputs {
                if t.shape() != x.shape() {
                    return Err(Error::Dimension("stack: shapes differ".into()));
                }
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![inputs.len()];
            shape.extend_from_slice(x.shape());
            Tensor::new(shape, data)
        }
        Op::Slice { axis, start, len } => match axis {
            Axis::Rows => {
                if x.rank() == 0 || start + len > x.shape()[0] {
                    return Err(Error::Dimension(format!(
                        "row slice {start}+{len} of {:?}",
                        x.shape()
                    )));
                }
                let inner: usize = x.shape()[1..].iter().product();
                let mut shape = x.shape().to_vec();
                shape[0] = *len;
                Tensor::new(shape, x.data()[start * inner..(start + len) * inner].to_vec())
            }
            Axis::Cols => {
                let c = x.last_dim();
                if start + len > c {
                    return Err(Error::Dimension(format!(
                        "column slice {start}+{len} of {:?}",
                        x.shape()
                    )));
                }
                let mut data = Vec::with_capacity(x.n_rows() * len);
                for r in 0..x.n_rows() {
                    data.extend_from_slice(&x.row(r)[*start..start + len]);
                }
                let mut shape = x.shape().to_vec();
                *shape.last_mut().expect("rank ≥ 1") = *len;
                Tensor::new(shape, data)
            }
        },
        Op::Select(i) => {
            if x.rank() != 2 || *i >= x.shape()[0] {
                return Err(Error::Dimension(format!("select row {i} of {:?}", x.shape())));
            }
            Ok(Tensor::vector(x.row(*i).to_vec()))
        }
        Op::Sum => {
            let mut s = 0.0;
            for v in x.data() {
                s += v;
            }
            Ok(Tensor::scalar(s))
        }
        Op::SquaredError => {
            let y = inputs[1];
            if x.len() != y.len() {
                return Err(Error::Dimension("squared_error: lengths differ".into()));
            }
            let mut s = 0.0;
            for (a, b) in x.data().iter().zip(y.data()) {
                s += (a - b) * (a - b);
            }
            Ok(Tensor::scalar(s))
        }
        Op::Reshape(shape) => x.reshape(shape),
        Op::Transpose => x.transpose(),
        Op::L2Normalize { eps } => Ok(rows_apply(x, |r| numerics::l2_normalize(r, *eps))),
        Op::CrossEntropy { targets, weights } => {
            if targets.len() != x.n_rows() || weights.len() != targets.len() {
                return Err(Error::Dimension("cross_entropy: targets vs rows".into()));
            }
            let v = x.last_dim();
            let mut s = 0.0;
            for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                if w == 0.0 {
                    continue;
                }
                if t >= v {
                    return Err(Error::VocabOverflow { token: t, vocab: v });
                }
                let row = x.row(r);
                s += w * (log_sum_exp(row) - row[t]);
            }
            Ok(Tensor::scalar(s))
        }
        Op::Rope { offset, base } => {
            if x.last_dim() % 2 != 0 {
                return Err(Error::Dimension("rope needs an even width".into()));
            }
            Ok(rope_rows(x, *offset, *base, 1.0))
        }
        Op::Powf(p) => Ok(x.map(|v| v.powf(*p))),
        Op::GatedDeltaScan => {
            let (out, _) = gated_delta_scan(x, inputs[1], inputs[2], inputs[3], inputs[4], inputs[5])?;
            Ok(out)
        }
        Op::WindowAttention { window } => window_attention(x, inputs[1], inputs[2], *window),
    }
}

fn check_scan_shapes(q: &Tensor, k: &Tensor, v: &Tensor, alpha: &Tensor, beta: &Tensor, m0: &Tensor) -> Result<()> {
    let t = q.n_rows();
    let ok = q.rank() == 2
        && k.shape() == q.shape()
        && v.rank() == 2
        && v.n_rows() == t
        && alpha.len() == t
        && beta.len() == t
        && m0.shape() == [v.last_dim(), q.last_dim()];
    if ok {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "gated_delta_scan: q {:?} k {:?} v {:?} alpha {:?} beta {:?} m0 {:?}",
            q.shape(),
            k.shape(),
            v.shape(),
            alpha.shape(),
            beta.shape(),
            m0.shape()
        )))
    }
}

fn mat_vec(m: &[f64], cols: usize, x: &[f64]) -> Vec<f64> {
    m.chunks(cols).map(|r| numerics::dot(r, x)).collect()
}

/// `M_t = α_t (M_{t−1} − β_t (M_{t−1} k_t) k_tᵀ) + β_t v_t k_tᵀ`, read `M_t q_t`.
/// Returns the stacked reads and the final memory.
pub fn gated_delta_scan(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    alpha: &Tensor,
    beta: &Tensor,
    m0: &Tensor,
) -> Result<(Tensor, Tensor)> {
    check_scan_shapes(q, k, v, alpha, beta, m0)?;
    let (t_len, dk, dv) = (q.n_rows(), q.last_dim(), v.last_dim());
    let mut m = m0.data().to_vec();
    let mut out = Vec::with_capacity(t_len * dv);
    for t in 0..t_len {
        delta_step(&mut m, dk, k.row(t), v.row(t), alpha.data()[t], beta.data()[t]);
        out.extend(mat_vec(&m, dk, q.row(t)));
    }
    Ok((Tensor::new(vec![t_len, dv], out)?, Tensor::new(m0.shape().to_vec(), m)?))
}

fn delta_step(m: &mut [f64], dk: usize, k: &[f64], v: &[f64], a: f64, b: f64) {
    for (row, &vi) in m.chunks_mut(dk).zip(v) {
        let mki = numerics::dot(row, k);
        for (x, &kj) in row.iter_mut().zip(k) {
            *x = a * (*x - b * mki * kj) + b * vi * kj;
        }
    }
}

fn gated_delta_vjp(ins: &[&Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
    let (q, k, v, alpha, beta, m0) = (ins[0], ins[1], ins[2], ins[3], ins[4], ins[5]);
    let (t_len, dk, dv) = (q.n_rows(), q.last_dim(), v.last_dim());
    // states[t] is the memory before step t; states[T] the final one
    let mut states = Vec::with_capacity(t_len + 1);
    states.push(m0.data().to_vec());
    for t in 0..t_len {
        let mut m = states[t].clone();
        delta_step(&mut m, dk, k.row(t), v.row(t), alpha.data()[t], beta.data()[t]);
        states.push(m);
    }
    let (mut dq, mut dk_out, mut dv_out) = (vec![0.0; t_len * dk], vec![0.0; t_len * dk], vec![0.0; t_len * dv]);
    let (mut da, mut db) = (vec![0.0; t_len], vec![0.0; t_len]);
    let mut gm = vec![0.0; dv * dk];
    for t in (0..t_len).rev() {
        let (kt, vt, qt) = (k.row(t), v.row(t), q.row(t));
        let (a, b) = (alpha.data()[t], beta.data()[t]);
        let gt = g.row(t);
        let cur = &states[t + 1];
        for i in 0..dv {
            for j in 0..dk {
                gm[i * dk + j] += gt[i] * qt[j];
                dq[t * dk + j] += cur[i * dk + j] * gt[i];
            }
        }
        let prev = &states[t];
        let pk = mat_vec(prev, dk, kt);
        let gk = mat_vec(&gm, dk, kt);
        // Gᵀ v, Gᵀ (P k), Pᵀ (G k)
        let mut gtv = vec![0.0; dk];
        let mut gtpk = vec![0.0; dk];
        let mut ptgk = vec![0.0; dk];
        for i in 0..dv {
            for j in 0..dk {
                gtv[j] += gm[i * dk + j] * vt[i];
                gtpk[j] += gm[i * dk + j] * pk[i];
                ptgk[j] += prev[i * dk + j] * gk[i];
            }
        }
        // ⟨G, P − β (Pk) kᵀ⟩
        let mut ga = 0.0;
        for i in 0..dv {
            for j in 0..dk {
                ga += gm[i * dk + j] * (prev[i * dk + j] - b * pk[i] * kt[j]);
            }
        }
        da[t] = ga;
        db[t] = (0..dv).map(|i| (vt[i] - a * pk[i]) * gk[i]).sum();
        for i in 0..dv {
            dv_out[t * dv + i] = b * gk[i];
        }
        for j in 0..dk {
            dk_out[t * dk + j] = -a * b * (ptgk[j] + gtpk[j]) + b * gtv[j];
        }
        for i in 0..dv {
            for j in 0..dk {
                gm[i * dk + j] = a * (gm[i * dk + j] - b * gk[i] * kt[j]);
            }
        }
    }
    Ok(vec![
        Tensor::new(q.shape().to_vec(), dq)?,
        Tensor::new(k.shape().to_vec(), dk_out)?,
        Tensor::new(v.shape().to_vec(), dv_out)?,
        Tensor::new(alpha.shape().to_vec(), da)?,
        Tensor::new(beta.shape().to_vec(), db)?,
        Tensor::new(m0.shape().to_vec(), gm)?,
    ])
}

fn window_span(t: usize, prefix: usize, window: usize) -> (usize, usize) {
    let end = prefix + t + 1;
    (end.saturating_sub(window), end)
}

fn check_window(q: &Tensor, k: &Tensor, v: &Tensor, window: usize) -> Result<usize> {
    if window == 0 {
        return Err(Error::Dimension("window_attention needs window ≥ 1".into()));
    }
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || k.last_dim() != q.last_dim() {
        return Err(Error::Dimension(format!(
            "window_attention: q {:?} k {:?} v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if k.n_rows() != v.n_rows() || k.n_rows() < q.n_rows() {
        return Err(Error::Dimension("window_attention: key/value rows".into()));
    }
    Ok(k.n_rows() - q.n_rows())
}

fn window_probs(q: &[f64], k: &Tensor, lo: usize, hi: usize, scale: f64) -> Vec<f64> {
    let scores: Vec<f64> = (lo..hi).map(|j| numerics::dot(k.row(j), q) * scale).collect();
    numerics::softmax(&scores)
}

fn window_attention(q: &Tensor, k: &Tensor, v: &Tensor, window: usize) -> Result<Tensor> {
    let prefix = check_window(q, k, v, window)?;
    let dv = v.last_dim();
    let scale = 1.0 / (q.last_dim() as f64).sqrt();
    let mut out = Vec::with_capacity(q.n_rows() * dv);
    for t in 0..q.n_rows() {
        let (lo, hi) = window_span(t, prefix, window);
        let p = window_probs(q.row(t), k, lo, hi, scale);
        let mut o = vec![0.0; dv];
        for (pj, j) in p.iter().zip(lo..hi) {
            for (oi, x) in o.iter_mut().zip(v.row(j)) {
                *oi += pj * x;
            }
        }
        out.extend(o);
    }
    Tensor::new(vec![q.n_rows(), dv], out)
}

fn window_attention_vjp(q: &Tensor, k: &Tensor, v: &Tensor, window: usize, g: &Tensor) -> Result<Vec<Tensor>> {
    let prefix = check_window(q, k, v, window)?;
    let (d, dv) = (q.last_dim(), v.last_dim());
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dvv = vec![0.0; v.len()];
    for t in 0..q.n_rows() {
        let (lo, hi) = window_span(t, prefix, window);
        let qt = q.row(t);
        let gt = g.row(t);
        let p = window_probs(qt, k, lo, hi, scale);
        let dp: Vec<f64> = (lo..hi).map(|j| numerics::dot(gt, v.row(j))).collect();
        let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
        for (idx, j) in (lo..hi).enumerate() {
            let ds = p[idx] * (dp[idx] - mean) * scale;
            let kj = k.row(j);
            for c in 0..d {
                dq[t * d + c] += ds * kj[c];
                dk[j * d + c] += ds * qt[c];
            }
            for c in 0..dv {
                dvv[j * dv + c] += p[idx] * gt[c];
            }
        }
    }
    Ok(vec![
        Tensor::new(q.shape().to_vec(), dq)?,
        Tensor::new(k.shape().to_vec(), dk)?,
        Tensor::new(v.shape().to_vec(), dvv)?,
    ])
}

/// Vector-Jacobian product: gradients for each input given the output gradient.
fn vjp(op: &Op, inputs: &[&Tensor], out: &Tensor, g: &Tensor) -> Result<Vec<Tensor>> {
    let x = inputs[0];
    let gd = g.data();
    let same = |data: Vec<f64>, like: &Tensor| Tensor::new(like.shape().to_vec(), data);
    Ok(match op {
        Op::Matmul => {
            let b = inputs[1];
            let (m, k, n, _) = numerics::matmul_shape(x.shape(), b.shape())?;
            let (ad, bd) = (x.data(), b.data());
            // da = g · bᵀ, summed over the columns of g in order
            let mut bt = vec![0.0; n * k];
            for p in 0..k {
                for j in 0..n {
                    bt[j * k + p] = bd[p * n + j];
                }
            }
            let mut da = vec![0.0; m * k];
            numerics::matmul_into(gd, &bt, m, n, k, &mut da);
            // db = aᵀ · g
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                let grow = &gd[i * n..(i + 1) * n];
                for p in 0..k {
                    let a = ad[i * k + p];
                    let drow = &mut db[p * n..(p + 1) * n];
                    for (d, &gv) in drow.iter_mut().zip(grow) {
                        *d += a * gv;
                    }
                }
            }
            vec![same(da, x)?, same(db, b)?]
        }
        Op::Add | Op::Sub | Op::Mul => {
            let b = inputs[1];
            let how = bcast(x, b)?;
            let (ga, gb): (Vec<f64>, Vec<f64>) = match op {
                Op::Add => (gd.to_vec(), gd.to_vec()),
                Op::Sub => (gd.to_vec(), gd.iter().map(|v| -v).collect()),
                _ => {
                    // Expand both operands to the output layout first.
                    let n = out.len();
                    let at = |t: &Tensor, i: usize, rhs: bool| -> f64 {
                        match (how, rhs) {
                            (Bcast::Same, _) => t.data()[i],
                            (Bcast::RhsScalar, true) | (Bcast::LhsScalar, false) => t.data()[0],
                            (Bcast::RhsRow, true) => t.data()[i % t.len()],
                            _ => t.data()[i],
                        }
                    };
                    let ga = (0..n).map(|i| gd[i] * at(b, i, true)).collect();
                    let gb = (0..n).map(|i| gd[i] * at(x, i, false)).collect();
                    (ga, gb)
                }
            };
            vec![unbroadcast(&ga, x, how, false), unbroadcast(&gb, b, how, true)]
        }
        Op::Scale(c) => vec![g.scale(*c)],
        Op::LayerNorm { eps } => {
            let c = x.last_dim();
            let mut dx = Vec::with_capacity(x.len());
            for r in 0..x.n_rows() {
                let xr = x.row(r);
                let yr = out.row(r);
                let gr = &gd[r * c..(r + 1) * c];
                let mu = xr.iter().sum::<f64>() / c as f64;
                let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let gm = gr.iter().sum::<f64>() / c as f64;
                let gy = numerics::dot(gr, yr) / c as f64;
                dx.extend((0..c).map(|j| inv * (gr[j] - gm - yr[j] * gy)));
            }
            vec![same(dx, x)?]
        }
        Op::RmsNorm { eps } => {
            let gain = inputs[1].data();
            let c = x.last_dim();
            let mut dx = Vec::with_capacity(x.len());
            let mut dgain = vec![0.0; c];
            for r in 0..x.n_rows() {
                let xr = x.row(r);
                let gr = &gd[r * c..(r + 1) * c];
                let ms = xr.iter().map(|v| v * v).sum::<f64>() / c as f64;
                let inv = 1.0 / (ms + eps).sqrt();
                let mut s = 0.0;
                for j in 0..c {
                    s += gr[j] * gain[j] * xr[j];
                    dgain[j] += gr[j] * xr[j] * inv;
                }
                let k = inv * inv * inv * s / c as f64;
                dx.extend((0..c).map(|j| inv * gain[j] * gr[j] - k * xr[j]));
            }
            vec![same(dx, x)?, same(dgain, inputs[1])?]
        }
        Op::Sigmoid => {
            let d = out.data().iter().zip(gd).map(|(s, gv)| gv * s * (1.0 - s)).collect();
            vec![same(d, x)?]
        }
        Op::Swish => {
            let d = x
                .data()
                .iter()
                .zip(gd)
                .map(|(&v, gv)| {
                    let s = numerics::sigmoid(v);
                    gv * (s + v * s * (1.0 - s))
                })
                .collect();
            vec![same(d, x)?]
        }
        Op::Softmax => {
            let c = x.last_dim();
            let mut dx = Vec::with_capacity(x.len());
            for r in 0..x.n_rows() {
                let yr = out.row(r);
                let gr = &gd[r * c..(r + 1) * c];
                let s = numerics::dot(gr, yr);
                dx.extend(yr.iter().zip(gr).map(|(y, gv)| y * (gv - s)));
            }
            vec![same(dx, x)?]
        }
        Op::Concat => {
            let width = out.last_dim();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for t in inputs {
                let w = t.last_dim();
                let mut d = Vec::with_capacity(t.len());
                for r in 0..t.n_rows() {
                    d.extend_from_slice(&gd[r * width + offset..r * width + offset + w]);
                }
                grads.push(same(d, t)?);
                offset += w;
            }
            grads
        }
        Op::Stack => {
            let n = x.len();
            inputs
                .iter()
                .enumerate()
                .map(|(i, t)| same(gd[i * n..(i + 1) * n].to_vec(), t))
                .collect::<Result<_>>()?
        }
        Op::Slice { axis, start, len } => {
            let mut d = vec![0.0; x.len()];
            match axis {
                Axis::Rows => {
                    let inner: usize = x.shape()[1..].iter().product();
                    d[start * inner..(start + len) * inner].copy_from_slice(gd);
                }
                Axis::Cols => {
                    let c = x.last_dim();
                    for r in 0..x.n_rows() {
                        d[r * c + start..r * c + start + len]
                            .copy_from_slice(&gd[r * len..(r + 1) * len]);
                    }
                }
            }
            vec![same(d, x)?]
        }
        Op::Select(i) => {
            let c = x.last_dim();
            let mut d = vec![0.0; x.len()];
            d[i * c..(i + 1) * c].copy_from_slice(gd);
            vec![same(d, x)?]
        }
        Op::Sum => vec![Tensor::filled(x.shape(), gd[0])],
        Op::SquaredError => {
            let y = inputs[1];
            let da: Vec<f64> = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(a, b)| 2.0 * (a - b) * gd[0])
                .collect();
            let db = da.iter().map(|v| -v).collect();
            vec![same(da, x)?, same(db, y)?]
        }
        Op::Reshape(_) => vec![same(gd.to_vec(), x)?],
        Op::Transpose => vec![g.transpose()?],
        Op::L2Normalize { eps } => {
            let c = x.last_dim();
            let mut dx = Vec::with_capacity(x.len());
            for r in 0..x.n_rows() {
                let xr = x.row(r);
                let yr = out.row(r);
                let gr = &gd[r * c..(r + 1) * c];
                let n = (xr.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
                let gy = numerics::dot(gr, yr);
                dx.extend((0..c).map(|j| (gr[j] - yr[j] * gy) / n));
            }
            vec![same(dx, x)?]
        }
        Op::CrossEntropy { targets, weights } => {
            let v = x.last_dim();
            let mut dx = vec![0.0; x.len()];
            for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                if w == 0.0 {
                    continue;
                }
                let p = numerics::softmax(x.row(r));
                let row = &mut dx[r * v..(r + 1) * v];
                for (j, pj) in p.into_iter().enumerate() {
                    row[j] = w * gd[0] * (pj - if j == t { 1.0 } else { 0.0 });
                }
            }
            vec![same(dx, x)?]
        }
        Op::Rope { offset, base } => vec![rope_rows(g, *offset, *base, -1.0)],
        Op::Powf(p) => {
            let d: Vec<f64> = x
                .data()
                .iter()
                .zip(gd)
                .map(|(v, gv)| gv * p * v.powf(p - 1.0))
                .collect();
            vec![same(d, x)?]
        }
        Op::GatedDeltaScan => gated_delta_vjp(inputs, g)?,
        Op::WindowAttention { window } => window_attention_vjp(x, inputs[1], inputs[2], *window, g)?,
    })
}

/// A computation backend. Implementations must produce identical forward
/// values for identical op sequences.
pub trait Graph {
    type Var: Clone;

    fn precision(&self) -> Precision;
    fn constant(&mut self, t: Tensor) -> Self::Var;
    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor;
    fn apply(&mut self, op: Op, inputs: &[&Self::Var]) -> Result<Self::Var>;

    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Matmul, &[a, b])
    }
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Add, &[a, b])
    }
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Sub, &[a, b])
    }
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Mul, &[a, b])
    }
    fn scale(&mut self, a: &Self::Var, c: f64) -> Result<Self::Var> {
        self.apply(Op::Scale(c), &[a])
    }
    fn layer_norm(&mut self, a: &Self::Var, eps: f64) -> Result<Self::Var> {
        self.apply(Op::LayerNorm { eps }, &[a])
    }
    fn rms_norm(&mut self, a: &Self::Var, gain: &Self::Var, eps: f64) -> Result<Self::Var> {
        self.apply(Op::RmsNorm { eps }, &[a, gain])
    }
    fn sigmoid(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Sigmoid, &[a])
    }
    fn swish(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Swish, &[a])
    }
    fn softmax(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Softmax, &[a])
    }
    fn concat(&mut self, parts: &[&Self::Var]) -> Result<Self::Var> {
        self.apply(Op::Concat, parts)
    }
    fn stack(&mut self, parts: &[&Self::Var]) -> Result<Self::Var> {
        self.apply(Op::Stack, parts)
    }
    fn slice_rows(&mut self, a: &Self::Var, start: usize, len: usize) -> Result<Self::Var> {
        self.apply(
            Op::Slice {
                axis: Axis::Rows,
                start,
                len,
            },
            &[a],
        )
    }
    fn slice_cols(&mut self, a: &Self::Var, start: usize, len: usize) -> Result<Self::Var> {
        self.apply(
            Op::Slice {
                axis: Axis::Cols,
                start,
                len,
            },
            &[a],
        )
    }
    fn select(&mut self, a: &Self::Var, row: usize) -> Result<Self::Var> {
        self.apply(Op::Select(row), &[a])
    }
    fn sum(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Sum, &[a])
    }
    fn squared_error(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::SquaredError, &[a, b])
    }
    fn reshape(&mut self, a: &Self::Var, shape: &[usize]) -> Result<Self::Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[a])
    }
    fn transpose(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Transpose, &[a])
    }
    fn l2_normalize(&mut self, a: &Self::Var, eps: f64) -> Result<Self::Var> {
        self.apply(Op::L2Normalize { eps }, &[a])
    }
    fn cross_entropy(
        &mut self,
        logits: &Self::Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    ) -> Result<Self::Var> {
        self.apply(Op::CrossEntropy { targets, weights }, &[logits])
    }
    fn rope(&mut self, a: &Self::Var, offset: usize, base: f64) -> Result<Self::Var> {
        self.apply(Op::Rope { offset, base }, &[a])
    }
    fn powf(&mut self, a: &Self::Var, p: f64) -> Result<Self::Var> {
        self.apply(Op::Powf(p), &[a])
    }
    fn gated_delta_scan(
        &mut self,
        q: &Self::Var,
        k: &Self::Var,
        v: &Self::Var,
        alpha: &Self::Var,
        beta: &Self::Var,
        m0: &Self::Var,
    ) -> Result<Self::Var> {
        self.apply(Op::GatedDeltaScan, &[q, k, v, alpha, beta, m0])
    }
    fn window_attention(&mut self, q: &Self::Var, k: &Self::Var, v: &Self::Var, window: usize) -> Result<Self::Var> {
        self.apply(Op::WindowAttention { window }, &[q, k, v])
    }
    /// Outer product `u vᵀ` of two vectors.
    fn outer(&mut self, u: &Self::Var, v: &Self::Var) -> Result<Self::Var> {
        let (m, n) = (self.value(u).len(), self.value(v).len());
        let col = self.reshape(u, &[m, 1])?;
        let row = self.reshape(v, &[1, n])?;
        self.matmul(&col, &row)
    }
    fn scalar(&mut self, x: f64) -> Self::Var {
        self.constant(Tensor::scalar(x))
    }
}

/// Immediate evaluation with no recording.
#[derive(Debug, Clone, Copy, Default)]
pub struct Eager {
    precision: Precision,
}

impl Eager {
    pub fn new(precision: Precision) -> Self {
        Self { precision }
    }
}

impl Graph for Eager {
    type Var = Rc<Tensor>;

    fn precision(&self) -> Precision {
        self.precision
    }

    fn constant(&mut self, t: Tensor) -> Rc<Tensor> {
        Rc::new(t)
    }

    fn value<'a>(&'a self, v: &'a Rc<Tensor>) -> &'a Tensor {
        v
    }

    fn apply(&mut self, op: Op, inputs: &[&Rc<Tensor>]) -> Result<Rc<Tensor>> {
        let vals: Vec<&Tensor> = inputs.iter().map(|v| v.as_ref()).collect();
        let mut t = eval(&op, &vals)?;
        self.precision.round_slice(t.data_mut());
        Ok(Rc::new(t))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeRef(usize);

impl NodeRef {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node {
    op: Option<Op>,
    inputs: Vec<NodeRef>,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only record of primitive applications. Inputs always precede their
/// consumers, so node order is a topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> NodeRef {
        self.push(None, Vec::new(), t, true)
    }

    fn push(&mut self, op: Option<Op>, inputs: Vec<NodeRef>, value: Tensor, needs_grad: bool) -> NodeRef {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        NodeRef(self.nodes.len() - 1)
    }

    /// Record `op` applied to previously recorded nodes.
    pub fn record(&mut self, op: Op, inputs: &[NodeRef]) -> Result<NodeRef> {
        let refs: Vec<&NodeRef> = inputs.iter().collect();
        self.apply(op, &refs)
    }

    /// Gradients of the scalar `loss` with respect to each node in `wrt`.
    pub fn backward(&self, loss: NodeRef, wrt: &[NodeRef]) -> Result<Grads> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(op) = &node.op else { continue };
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let ins: Vec<&Tensor> = node.inputs.iter().map(|r| &self.nodes[r.0].value).collect();
            let mut dins = vjp(op, &ins, &node.value, &g)?;
            grads[id] = Some(g);
            for (r, mut d) in node.inputs.iter().zip(dins.drain(..)) {
                if !self.nodes[r.0].needs_grad {
                    continue;
                }
                self.precision.round_slice(d.data_mut());
                match &mut grads[r.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(d.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(d),
                }
            }
        }
        let mut map = HashMap::with_capacity(wrt.len());
        for r in wrt {
            let g = grads
                .get(r.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(self.nodes[r.0].value.shape()));
            map.insert(*r, g);
        }
        Ok(Grads { map })
    }
}

impl Graph for Tape {
    type Var = NodeRef;

    fn precision(&self) -> Precision {
        self.precision
    }

    fn constant(&mut self, t: Tensor) -> NodeRef {
        self.push(None, Vec::new(), t, false)
    }

    fn value<'a>(&'a self, v: &'a NodeRef) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    fn apply(&mut self, op: Op, inputs: &[&NodeRef]) -> Result<NodeRef> {
        let mut t = {
            let vals: Vec<&Tensor> = inputs.iter().map(|r| &self.nodes[r.0].value).collect();
            eval(&op, &vals)?
        };
        self.precision.round_slice(t.data_mut());
        let needs_grad = inputs.iter().any(|r| self.nodes[r.0].needs_grad);
        Ok(self.push(Some(op), inputs.iter().map(|r| **r).collect(), t, needs_grad))
    }
}

/// Gradients keyed by the nodes they were requested for.
#[derive(Debug, Clone)]
pub struct Grads {
    map: HashMap<NodeRef, Tensor>,
}

impl Grads {
    pub fn get(&self, r: NodeRef) -> Option<&Tensor> {
        self.map.get(&r)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff(mut f: impl FnMut(&Tensor) -> f64, at: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite_diff step must be positive");
    let mut x = at.clone();
    let mut out = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let up = f(&x);
        x.data_mut()[i] = orig - h;
        let down = f(&x);
        x.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(at.shape().to_vec(), out).expect("same shape as input")
}

/// Five-point central difference, error O(h⁴).
pub fn finite_diff5(mut f: impl FnMut(&Tensor) -> f64, at: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite_diff5 step must be positive");
    let mut x = at.clone();
    let mut out = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let orig = x.data()[i];
        let mut at_off = |o: f64| {
            x.data_mut()[i] = orig + o * h;
            f(&x)
        };
        let (p2, p1, m1, m2) = (at_off(2.0), at_off(1.0), at_off(-1.0), at_off(-2.0));
        x.data_mut()[i] = orig;
        out.push((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h));
    }
    Tensor::new(at.shape().to_vec(), out).expect("same shape as input")
}

/// Five-point estimates over a ladder of steps from 1e-2 to 1e-5, returning
/// the estimate that agrees best with its neighbour on the ladder. Trades
/// truncation against roundoff when the gradient scale is unknown.
pub fn finite_diff_adaptive(mut f: impl FnMut(&Tensor) -> f64, at: &Tensor) -> Tensor {
    const STEPS: [f64; 7] = [1e-2, 3e-3, 1e-3, 3e-4, 1e-4, 3e-5, 1e-5];
    let ests: Vec<Tensor> = STEPS.iter().map(|&h| finite_diff5(&mut f, at, h)).collect();
    let best = (1..ests.len())
        .min_by(|&i, &j| {
            let di = ests[i].max_abs_diff(&ests[i - 1]);
            let dj = ests[j].max_abs_diff(&ests[j - 1]);
            di.total_cmp(&dj)
        })
        .unwrap_or(0);
    ests[best].clone()
}

/// `max|a − b| / max(max|b|, floor)`: elementwise error scaled by the
/// magnitude of the reference.
pub fn relative_error(a: &Tensor, reference: &Tensor, floor: f64) -> f64 {
    a.max_abs_diff(reference) / reference.max_abs().max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

/// One decoupled-weight-decay Adam step, in place.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} params vs {} grads",
            params.len(),
            grads.len()
        )));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(Error::Shape("optimizer state does not match params".into()));
    }
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::Shape(format!(
                "param {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *pi -= cfg.lr * cfg.weight_decay * *pi;
            *pi -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Scale gradients so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for v in g.data() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Linear warmup over the first 5% of `total` steps, then constant.
pub fn warmup_lr(step: usize, total: usize, peak: f64) -> f64 {
    let warm = ((total as f64) * 0.05).ceil() as usize;
    if warm == 0 || step >= warm {
        peak
    } else {
        peak * (step + 1) as f64 / warm as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn t(xs: &[f64]) -> Tensor {
        Tensor::vector(xs.to_vec())
    }

    #[test]
    fn record_examples() {
        let mut tape = Tape::default();
        let x = tape.param(Tensor::scalar(1.0));
        let y = tape.param(Tensor::scalar(2.0));
        let s = tape.record(Op::Add, &[x, y]).unwrap();
        assert_eq!(tape.value(&s).item(), 3.0);
        let z = tape.param(Tensor::scalar(0.0));
        let f = tape.param(Tensor::scalar(5.0));
        let p = tape.record(Op::Mul, &[z, f]).unwrap();
        assert_eq!(tape.value(&p).item(), 0.0);
    }

    #[test]
    fn unknown_primitive_is_rejected() {
        assert!(matches!("conv2d".parse::<Op>(), Err(Error::UnsupportedOp(_))));
        assert_eq!("add".parse::<Op>().unwrap(), Op::Add);
    }

    #[test]
    fn square_and_sigmoid_grads() {
        let mut tape = Tape::default();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.record(Op::Mul, &[x, x]).unwrap();
        assert_eq!(tape.value(&y).item(), 9.0);
        let g = tape.backward(y, &[x]).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);

        let mut tape = Tape::default();
        let x = tape.param(Tensor::scalar(0.0));
        let y = tape.sigmoid(&x).unwrap();
        let g = tape.backward(y, &[x]).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn non_scalar_loss_is_shape_error() {
        let mut tape = Tape::default();
        let x = tape.param(t(&[1.0, 2.0]));
        let y = tape.sigmoid(&x).unwrap();
        assert!(matches!(tape.backward(y, &[x]), Err(Error::Shape(_))));
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff(|x| x.data().iter().map(|v| v * v).sum(), &t(&[1.0, 2.0]), 1e-5);
        assert!((g.data()[0] - 2.0).abs() < 1e-8 && (g.data()[1] - 4.0).abs() < 1e-8);
        let z = finite_diff(|_| 7.0, &t(&[1.0, 2.0, 3.0]), 1e-5);
        assert_eq!(z.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_shift_has_zero_gradient() {
        let mut rng = Rng::new(3);
        let mut tape = Tape::default();
        let x = tape.param(rng.normal_tensor(&[5], 1.0));
        let c = tape.param(Tensor::scalar(0.3));
        let shifted = tape.add(&x, &c).unwrap();
        let p = tape.softmax(&shifted).unwrap();
        let w = tape.constant(rng.normal_tensor(&[5], 1.0));
        let pw = tape.mul(&p, &w).unwrap();
        let l = tape.sum(&pw).unwrap();
        let g = tape.backward(l, &[c]).unwrap();
        assert!(g.get(c).unwrap().item().abs() < 1e-10);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = Rng::new(11);
            let mut tape = Tape::default();
            let w = tape.param(rng.normal_tensor(&[4, 4], 0.5));
            let x = tape.constant(rng.normal_tensor(&[4], 1.0));
            let h = tape.matmul(&w, &x).unwrap();
            let h = tape.swish(&h).unwrap();
            let h = tape.layer_norm(&h, 1e-6).unwrap();
            let l = tape.sum(&h).unwrap();
            let l2 = tape.mul(&l, &l).unwrap();
            tape.backward(l2, &[w]).unwrap().get(w).unwrap().clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adamw_examples() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![t(&[1.0, -2.0])];
        let mut st = AdamState::default();
        adamw_step(&mut p, &[t(&[0.0, 0.0])], &mut st, &cfg).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);

        // f(x) = x², one step from x = 1
        let mut p = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::default();
        adamw_step(&mut p, &[Tensor::scalar(2.0)], &mut st, &cfg).unwrap();
        assert!(p[0].item().abs() < 1.0);

        let decay = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut p = vec![t(&[1.0, 3.0])];
        let mut st = AdamState::default();
        adamw_step(&mut p, &[t(&[0.0, 0.0])], &mut st, &decay).unwrap();
        assert!((p[0].data()[0] - 0.99).abs() < 1e-15);
        assert!((p[0].data()[1] - 2.97).abs() < 1e-15);

        assert!(adamw_step(&mut p, &[t(&[0.0])], &mut st, &decay).is_err());
    }

    #[test]
    fn warmup_schedule() {
        assert_eq!(warmup_lr(0, 100, 1.0), 0.2);
        assert_eq!(warmup_lr(4, 100, 1.0), 1.0);
        assert_eq!(warmup_lr(50, 100, 1.0), 1.0);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = vec![t(&[3.0, 4.0])];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].frobenius_norm() - 1.0).abs() < 1e-15);
    }
}
