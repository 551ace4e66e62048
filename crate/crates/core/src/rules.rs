//! Memory update rules for attention, sliding-window attention and the linear
//! attention / recurrent family.
//!
//! Matrix memories are `M ∈ R^{d_v×d_k}` and are read as `M q`. Erase and
//! decay operators (`I − β k kᵀ`, `Diag(α)`) act on the key side, i.e. they
//! right-multiply `M`, which is the only reading that type-checks against the
//! `v kᵀ` write term.
//!
//! | rule | update |
//! |------|--------|
//! | NaiveLinear | `M + v kᵀ` |
//! | DeltaNet | `M (I − β k kᵀ) + β v kᵀ` |
//! | Longhorn | `M (I − δ k kᵀ) + δ v kᵀ` |
//! | RetNet | `α M + v kᵀ` |
//! | GLA | `M Diag(α) + v kᵀ` |
//! | HGRN2 | `M Diag(a) + v (1 − a)ᵀ` |
//! | Mamba2 | `α M + β v kᵀ` |
//! | PolySketch | `M + v (k^p)ᵀ` (elementwise power) |
//! | TTT | `M − η ∇ℓ`, `ℓ = ‖M k − v‖²` |
//! | RWKV7 | `M (Diag(α) − β k kᵀ) + β v kᵀ` |
//! | GatedDeltaNet | `α M (I − β k kᵀ) + β v kᵀ` |
//! | Titans | `S ← η S − η ∇ℓ`, `M ← α M + S` |
//!
//! Attention keeps every `(k, v)`; SWA keeps the newest `capacity` pairs.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleId {
    Attention,
    Swa,
    NaiveLinear,
    DeltaNet,
    Longhorn,
    RetNet,
    Gla,
    Hgrn2,
    Mamba2,
    PolySketch,
    Ttt,
    Rwkv7,
    GatedDeltaNet,
    Titans,
}

impl RuleId {
    pub const ALL: [RuleId; 14] = [
        RuleId::Attention,
        RuleId::Swa,
        RuleId::NaiveLinear,
        RuleId::DeltaNet,
        RuleId::Longhorn,
        RuleId::RetNet,
        RuleId::Gla,
        RuleId::Hgrn2,
        RuleId::Mamba2,
        RuleId::PolySketch,
        RuleId::Ttt,
        RuleId::Rwkv7,
        RuleId::GatedDeltaNet,
        RuleId::Titans,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RuleId::Attention => "attention",
            RuleId::Swa => "swa",
            RuleId::NaiveLinear => "naive_linear",
            RuleId::DeltaNet => "delta_net",
            RuleId::Longhorn => "longhorn",
            RuleId::RetNet => "ret_net",
            RuleId::Gla => "gla",
            RuleId::Hgrn2 => "hgrn2",
            RuleId::Mamba2 => "mamba2",
            RuleId::PolySketch => "poly_sketch",
            RuleId::Ttt => "ttt",
            RuleId::Rwkv7 => "rwkv7",
            RuleId::GatedDeltaNet => "gated_delta_net",
            RuleId::Titans => "titans",
        }
    }

    /// Rules whose state is a set of `(k, v)` pairs rather than a matrix.
    pub fn is_set_rule(self) -> bool {
        matches!(self, RuleId::Attention | RuleId::Swa)
    }

    /// Rules with an `(I − β k kᵀ)`-style erase term.
    pub fn is_delta_family(self) -> bool {
        matches!(
            self,
            RuleId::DeltaNet | RuleId::Longhorn | RuleId::GatedDeltaNet | RuleId::Rwkv7
        )
    }
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RuleId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        RuleId::ALL
            .into_iter()
            .find(|r| r.name().replace('_', "") == norm)
            .ok_or_else(|| Error::Config(format!("unknown rule `{s}`")))
    }
}

/// A decay gate: a token-independent scalar or a per-channel vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Decay {
    Scalar(f64),
    Vector(Vec<f64>),
}

/// Per-token gate values. Which fields a rule needs is checked by [`step`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GateValues {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Decay>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a_vec: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_degree: Option<u32>,
}

impl GateValues {
    pub fn none() -> Self {
        Self::default()
    }
    pub fn alpha(mut self, a: f64) -> Self {
        self.alpha = Some(Decay::Scalar(a));
        self
    }
    pub fn alpha_vec(mut self, a: Vec<f64>) -> Self {
        self.alpha = Some(Decay::Vector(a));
        self
    }
    pub fn beta(mut self, b: f64) -> Self {
        self.beta = Some(b);
        self
    }
    pub fn delta(mut self, d: f64) -> Self {
        self.delta = Some(d);
        self
    }
    pub fn eta(mut self, e: f64) -> Self {
        self.eta = Some(e);
        self
    }
    pub fn a_vec(mut self, a: Vec<f64>) -> Self {
        self.a_vec = Some(a);
        self
    }
    pub fn p_degree(mut self, p: u32) -> Self {
        self.p_degree = Some(p);
        self
    }

    /// Range checks: decays in `[0, 1]`, `β ≥ 0`, `p ≥ 1`.
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, x: f64| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(Error::Gate(format!("{name} = {x} outside [0, 1]")))
            }
        };
        match &self.alpha {
            Some(Decay::Scalar(a)) => unit("alpha", *a)?,
            Some(Decay::Vector(v)) => v.iter().try_for_each(|&a| unit("alpha", a))?,
            None => {}
        }
        if let Some(d) = self.delta {
            unit("delta", d)?;
        }
        if let Some(a) = &self.a_vec {
            a.iter().try_for_each(|&x| unit("a", x))?;
        }
        if let Some(b) = self.beta {
            if !(b >= 0.0) {
                return Err(Error::Gate(format!("beta = {b} is negative")));
            }
        }
        if let Some(e) = self.eta {
            if !e.is_finite() {
                return Err(Error::Gate("eta is not finite".into()));
            }
        }
        if self.p_degree == Some(0) {
            return Err(Error::Gate("p_degree must be ≥ 1".into()));
        }
        Ok(())
    }

    fn need_scalar_alpha(&self, rule: RuleId) -> Result<f64> {
        match &self.alpha {
            Some(Decay::Scalar(a)) => Ok(*a),
            Some(Decay::Vector(_)) => Err(Error::Gate(format!("{rule} needs a scalar alpha"))),
            None => Err(Error::Gate(format!("{rule} needs alpha"))),
        }
    }

    fn need_vector_alpha(&self, rule: RuleId, len: usize) -> Result<Vec<f64>> {
        let v = match &self.alpha {
            Some(Decay::Vector(v)) => v.clone(),
            Some(Decay::Scalar(a)) => vec![*a; len],
            None => return Err(Error::Gate(format!("{rule} needs alpha"))),
        };
        if v.len() != len {
            return Err(Error::Dimension(format!(
                "{rule} decay has length {}, expected {len}",
                v.len()
            )));
        }
        Ok(v)
    }

    fn need(&self, field: Option<f64>, name: &str, rule: RuleId) -> Result<f64> {
        field.ok_or_else(|| Error::Gate(format!("{rule} needs {name}")))
    }
}

/// Which side of `M` the GLA decay multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecaySide {
    /// `M Diag(α)`, α of length `d_k`.
    #[default]
    Key,
    /// `Diag(α) M`, α of length `d_v` (the literal left-multiplication).
    Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RuleOptions {
    /// L2-normalize keys before the update for delta-family rules.
    pub normalize_keys: bool,
    pub gla_decay_side: DecaySide,
    /// Buffer capacity for SWA.
    pub window: Option<usize>,
}

impl RuleOptions {
    pub fn window(w: usize) -> Self {
        Self {
            window: Some(w),
            ..Self::default()
        }
    }
}

/// FIFO key/value store. `capacity: None` means unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct KvBuffer {
    pub d_k: usize,
    pub d_v: usize,
    pub capacity: Option<usize>,
    pub keys: VecDeque<Vec<f64>>,
    pub values: VecDeque<Vec<f64>>,
}

impl KvBuffer {
    pub fn new(d_k: usize, d_v: usize, capacity: Option<usize>) -> Self {
        Self {
            d_k,
            d_v,
            capacity,
            keys: VecDeque::new(),
            values: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn push(&mut self, k: Vec<f64>, v: Vec<f64>) {
        self.keys.push_back(k);
        self.values.push_back(v);
        if let Some(c) = self.capacity {
            while self.keys.len() > c {
                self.keys.pop_front();
                self.values.pop_front();
            }
        }
    }

    /// Scaled dot-product softmax read; zeros when empty.
    pub fn attend(&self, q: &[f64]) -> Vec<f64> {
        if self.keys.is_empty() {
            return vec![0.0; self.d_v];
        }
        let scale = 1.0 / (self.d_k as f64).sqrt();
        let scores: Vec<f64> = self.keys.iter().map(|k| numerics::dot(k, q) * scale).collect();
        let w = numerics::softmax(&scores);
        let mut out = vec![0.0; self.d_v];
        for (wi, v) in w.iter().zip(&self.values) {
            for (o, x) in out.iter_mut().zip(v) {
                *o += wi * x;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MemoryState {
    Matrix(Tensor),
    Buffer(KvBuffer),
    Titans { memory: Tensor, momentum: Tensor },
}

impl MemoryState {
    pub fn matrix(&self) -> Option<&Tensor> {
        match self {
            MemoryState::Matrix(m) => Some(m),
            MemoryState::Titans { memory, .. } => Some(memory),
            MemoryState::Buffer(_) => None,
        }
    }

    pub fn buffer(&self) -> Option<&KvBuffer> {
        match self {
            MemoryState::Buffer(b) => Some(b),
            _ => None,
        }
    }

    /// Stored scalars.
    pub fn size(&self) -> usize {
        match self {
            MemoryState::Matrix(m) => m.len(),
            MemoryState::Buffer(b) => b.len() * (b.d_k + b.d_v),
            MemoryState::Titans { memory, momentum } => memory.len() + momentum.len(),
        }
    }
}

/// Empty state for `rule`. `capacity` is only used by SWA (and ignored for
/// matrix rules).
pub fn init_state(rule: RuleId, d_k: usize, d_v: usize, capacity: Option<usize>) -> Result<MemoryState> {
    if d_k == 0 || d_v == 0 {
        return Err(Error::Dimension(format!("d_k = {d_k}, d_v = {d_v}")));
    }
    Ok(match rule {
        RuleId::Attention => MemoryState::Buffer(KvBuffer::new(d_k, d_v, None)),
        RuleId::Swa => {
            let c = capacity.ok_or_else(|| Error::Config("swa needs a capacity".into()))?;
            if c == 0 {
                return Err(Error::Config("swa capacity must be ≥ 1".into()));
            }
            MemoryState::Buffer(KvBuffer::new(d_k, d_v, Some(c)))
        }
        RuleId::Titans => MemoryState::Titans {
            memory: Tensor::zeros(&[d_v, d_k]),
            momentum: Tensor::zeros(&[d_v, d_k]),
        },
        RuleId::Hgrn2 if d_k != d_v => {
            return Err(Error::Dimension(format!(
                "hgrn2 needs d_k = d_v, got {d_k} and {d_v}"
            )))
        }
        _ => MemoryState::Matrix(Tensor::zeros(&[d_v, d_k])),
    })
}

fn mat_vec(m: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..m.shape()[0]).map(|i| numerics::dot(m.row(i), x)).collect()
}

fn unit(k: &[f64]) -> Vec<f64> {
    let n = numerics::dot(k, k).sqrt();
    if n == 0.0 {
        k.to_vec()
    } else {
        k.iter().map(|x| x / n).collect()
    }
}

/// `M_new[i][j] = f(M[i][j], i, j)`.
fn update(m: &mut Tensor, f: impl Fn(f64, usize, usize) -> f64) {
    let dk = m.shape()[1];
    for (idx, x) in m.data_mut().iter_mut().enumerate() {
        *x = f(*x, idx / dk, idx % dk);
    }
}

/// Pure state transition: returns the state after writing `(k, v)`.
pub fn step(state: &MemoryState, rule: RuleId, k: &[f64], v: &[f64], g: &GateValues) -> Result<MemoryState> {
    step_with(state, rule, k, v, g, &RuleOptions::default())
}

pub fn step_with(
    state: &MemoryState,
    rule: RuleId,
    k: &[f64],
    v: &[f64],
    g: &GateValues,
    opts: &RuleOptions,
) -> Result<MemoryState> {
    let mut next = state.clone();
    step_in_place(&mut next, rule, k, v, g, opts)?;
    Ok(next)
}

/// In-place variant of [`step_with`].
pub fn step_in_place(
    state: &mut MemoryState,
    rule: RuleId,
    k: &[f64],
    v: &[f64],
    g: &GateValues,
    opts: &RuleOptions,
) -> Result<()> {
    g.validate()?;
    match (rule, state) {
        (RuleId::Attention | RuleId::Swa, MemoryState::Buffer(buf)) => {
            if k.len() != buf.d_k || v.len() != buf.d_v {
                return Err(Error::Dimension(format!(
                    "{rule}: k {} / v {} vs state {}x{}",
                    k.len(),
                    v.len(),
                    buf.d_k,
                    buf.d_v
                )));
            }
            buf.push(k.to_vec(), v.to_vec());
            Ok(())
        }
        (RuleId::Titans, MemoryState::Titans { memory, momentum }) => {
            check_dims(rule, memory, k, v)?;
            let alpha = g.need_scalar_alpha(rule)?;
            let eta = g.need(g.eta, "eta", rule)?;
            let mk = mat_vec(memory, k);
            // ∇_M ‖M k − v‖² = 2 (M k − v) kᵀ, taken at the previous memory.
            update(momentum, |s, i, j| eta * s - eta * (2.0 * (mk[i] - v[i]) * k[j]));
            let s = momentum.data().to_vec();
            for (m, sv) in memory.data_mut().iter_mut().zip(&s) {
                *m = alpha * *m + sv;
            }
            Ok(())
        }
        (_, MemoryState::Matrix(m)) if !rule.is_set_rule() && rule != RuleId::Titans => {
            check_dims(rule, m, k, v)?;
            let k_owned;
            let k = if opts.normalize_keys && rule.is_delta_family() {
                k_owned = unit(k);
                &k_owned[..]
            } else {
                k
            };
            matrix_step(m, rule, k, v, g, opts)
        }
        (_, s) => Err(Error::Config(format!(
            "state {} does not belong to rule {rule}",
            match s {
                MemoryState::Matrix(_) => "matrix",
                MemoryState::Buffer(_) => "buffer",
                MemoryState::Titans { .. } => "titans",
            }
        ))),
    }
}

fn check_dims(rule: RuleId, m: &Tensor, k: &[f64], v: &[f64]) -> Result<()> {
    let (dv, dk) = (m.shape()[0], m.shape()[1]);
    if k.len() != dk || v.len() != dv {
        return Err(Error::Dimension(format!(
            "{rule}: k {} / v {} vs memory {dv}x{dk}",
            k.len(),
            v.len()
        )));
    }
    Ok(())
}

fn matrix_step(m: &mut Tensor, rule: RuleId, k: &[f64], v: &[f64], g: &GateValues, opts: &RuleOptions) -> Result<()> {
    let (dv, dk) = (m.shape()[0], m.shape()[1]);
    match rule {
        RuleId::NaiveLinear => update(m, |x, i, j| x + v[i] * k[j]),
        RuleId::DeltaNet | RuleId::Longhorn => {
            let b = if rule == RuleId::DeltaNet {
                g.need(g.beta, "beta", rule)?
            } else {
                g.need(g.delta, "delta", rule)?
            };
            let mk = mat_vec(m, k);
            update(m, |x, i, j| (x - b * mk[i] * k[j]) + b * v[i] * k[j]);
        }
        RuleId::RetNet => {
            let a = g.need_scalar_alpha(rule)?;
            update(m, |x, i, j| a * x + v[i] * k[j]);
        }
        RuleId::Gla => match opts.gla_decay_side {
            DecaySide::Key => {
                let a = g.need_vector_alpha(rule, dk)?;
                update(m, |x, i, j| x * a[j] + v[i] * k[j]);
            }
            DecaySide::Value => {
                let a = g.need_vector_alpha(rule, dv)?;
                update(m, |x, i, j| a[i] * x + v[i] * k[j]);
            }
        },
        RuleId::Hgrn2 => {
            if dk != dv {
                return Err(Error::Dimension(format!("hgrn2 needs d_k = d_v, got {dk} and {dv}")));
            }
            let a = g
                .a_vec
                .as_ref()
                .ok_or_else(|| Error::Gate("hgrn2 needs a".into()))?;
            if a.len() != dk {
                return Err(Error::Dimension(format!("hgrn2 gate length {} vs {dk}", a.len())));
            }
            update(m, |x, i, j| x * a[j] + v[i] * (1.0 - a[j]));
        }
        RuleId::Mamba2 => {
            let a = g.need_scalar_alpha(rule)?;
            let b = g.need(g.beta, "beta", rule)?;
            update(m, |x, i, j| a * x + b * v[i] * k[j]);
        }
        RuleId::PolySketch => {
            let p = g.p_degree.unwrap_or(2) as i32;
            let kp: Vec<f64> = k.iter().map(|x| x.powi(p)).collect();
            update(m, |x, i, j| x + v[i] * kp[j]);
        }
        RuleId::Ttt => {
            let eta = g.need(g.eta, "eta", rule)?;
            let mk = mat_vec(m, k);
            update(m, |x, i, j| x - eta * (2.0 * (mk[i] - v[i]) * k[j]));
        }
        RuleId::Rwkv7 => {
            let a = g.need_vector_alpha(rule, dk)?;
            let b = g.need(g.beta, "beta", rule)?;
            let mk = mat_vec(m, k);
            update(m, |x, i, j| (x * a[j] - b * mk[i] * k[j]) + b * v[i] * k[j]);
        }
        RuleId::GatedDeltaNet => {
            let a = g.need_scalar_alpha(rule)?;
            let b = g.need(g.beta, "beta", rule)?;
            let mk = mat_vec(m, k);
            update(m, |x, i, j| a * (x - b * mk[i] * k[j]) + b * v[i] * k[j]);
        }
        RuleId::Attention | RuleId::Swa | RuleId::Titans => unreachable!("handled by caller"),
    }
    Ok(())
}

/// Read the memory with query `q`.
pub fn read(state: &MemoryState, rule: RuleId, q: &[f64]) -> Result<Vec<f64>> {
    read_with(state, rule, q, &GateValues::none())
}

/// Like [`read`], using the PolySketch degree from `g` when present.
pub fn read_with(state: &MemoryState, rule: RuleId, q: &[f64], g: &GateValues) -> Result<Vec<f64>> {
    match state {
        MemoryState::Buffer(b) => {
            if q.len() != b.d_k {
                return Err(Error::Dimension(format!("query {} vs d_k {}", q.len(), b.d_k)));
            }
            Ok(b.attend(q))
        }
        MemoryState::Matrix(m) | MemoryState::Titans { memory: m, .. } => {
            if q.len() != m.shape()[1] {
                return Err(Error::Dimension(format!(
                    "query {} vs d_k {}",
                    q.len(),
                    m.shape()[1]
                )));
            }
            if rule == RuleId::PolySketch {
                let p = g.p_degree.unwrap_or(2) as i32;
                let qp: Vec<f64> = q.iter().map(|x| x.powi(p)).collect();
                Ok(mat_vec(m, &qp))
            } else {
                Ok(mat_vec(m, q))
            }
        }
    }
}

/// A sequence to run through a rule.
#[derive(Debug, Clone, Default)]
pub struct Sequence {
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub gates: Vec<GateValues>,
    pub queries: Vec<Vec<f64>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    fn check(&self) -> Result<()> {
        let t = self.keys.len();
        if self.values.len() != t || self.gates.len() != t || self.queries.len() != t {
            return Err(Error::Dimension(format!(
                "sequence lengths differ: keys {t}, values {}, gates {}, queries {}",
                self.values.len(),
                self.gates.len(),
                self.queries.len()
            )));
        }
        Ok(())
    }

    fn dims(&self) -> Result<(usize, usize)> {
        match (self.keys.first(), self.values.first()) {
            (Some(k), Some(v)) => Ok((k.len(), v.len())),
            _ => Err(Error::Dimension("empty sequence".into())),
        }
    }
}

/// Outputs `read(M_t, q_t)` where `M_t` already includes token `t`'s write.
pub fn scan(rule: RuleId, seq: &Sequence) -> Result<Vec<Vec<f64>>> {
    scan_with(rule, seq, &RuleOptions::default())
}

pub fn scan_with(rule: RuleId, seq: &Sequence, opts: &RuleOptions) -> Result<Vec<Vec<f64>>> {
    Ok(trace_with(rule, seq, opts)?.into_iter().map(|r| r.read).collect())
}

/// One token of a rule trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuleTraceRecord {
    pub t: usize,
    pub rule: RuleId,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub gates: GateValues,
    pub read: Vec<f64>,
}

pub fn trace_with(rule: RuleId, seq: &Sequence, opts: &RuleOptions) -> Result<Vec<RuleTraceRecord>> {
    seq.check()?;
    let (dk, dv) = seq.dims()?;
    let mut state = init_state(rule, dk, dv, opts.window)?;
    let mut out = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        step_in_place(&mut state, rule, &seq.keys[t], &seq.values[t], &seq.gates[t], opts)?;
        let r = read_with(&state, rule, &seq.queries[t], &seq.gates[t])?;
        out.push(RuleTraceRecord {
            t,
            rule,
            k: seq.keys[t].clone(),
            v: seq.values[t].clone(),
            gates: seq.gates[t].clone(),
            read: r,
        });
    }
    Ok(out)
}

pub fn write_trace_jsonl<W: Write>(records: &[RuleTraceRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Gated delta rule evaluated chunk by chunk.
///
/// Within a chunk starting from state `S`, write `γ_t = α_1⋯α_t` and the
/// pseudo-values `u_t = β_t (v_t − α_t M_{t−1} k_t)`, so that
/// `M_t = γ_t S + Σ_{i≤t} (γ_t/γ_i) u_i k_iᵀ`. Substituting gives a unit
/// lower-triangular system for the `u_t`, solved by forward substitution;
/// outputs and the carried state then follow in closed form.
pub fn chunkwise_gated_delta(seq: &Sequence, chunk: usize) -> Result<Vec<Vec<f64>>> {
    if chunk == 0 {
        return Err(Error::Config("chunk must be ≥ 1".into()));
    }
    seq.check()?;
    let (dk, dv) = seq.dims()?;
    let mut state = Tensor::zeros(&[dv, dk]);
    let mut outputs = Vec::with_capacity(seq.len());
    let mut alphas = Vec::with_capacity(seq.len());
    let mut betas = Vec::with_capacity(seq.len());
    for g in &seq.gates {
        g.validate()?;
        alphas.push(g.need_scalar_alpha(RuleId::GatedDeltaNet)?);
        betas.push(g.need(g.beta, "beta", RuleId::GatedDeltaNet)?);
    }
    let mut start = 0;
    while start < seq.len() {
        let end = (start + chunk).min(seq.len());
        let c = end - start;
        let ks = &seq.keys[start..end];
        let qs = &seq.queries[start..end];
        // decay[t][i] = α_{i+1}⋯α_t for i ≤ t; gamma[t] = α_0⋯α_t
        let mut decay = vec![vec![1.0; c]; c];
        for t in 1..c {
            for i in 0..t {
                decay[t][i] = decay[t - 1][i] * alphas[start + t];
            }
        }
        let mut gamma = vec![0.0; c];
        let mut acc = 1.0;
        for (t, g) in gamma.iter_mut().enumerate() {
            acc *= alphas[start + t];
            *g = acc;
        }
        let mut u: Vec<Vec<f64>> = Vec::with_capacity(c);
        for t in 0..c {
            let sk = mat_vec(&state, &ks[t]);
            let mut w: Vec<f64> = seq.values[start + t]
                .iter()
                .zip(&sk)
                .map(|(v, s)| v - gamma[t] * s)
                .collect();
            for (i, ui) in u.iter().enumerate() {
                let coef = decay[t][i] * numerics::dot(&ks[i], &ks[t]);
                for (wj, uj) in w.iter_mut().zip(ui) {
                    *wj -= coef * uj;
                }
            }
            let b = betas[start + t];
            u.push(w.into_iter().map(|x| b * x).collect());
        }
        for t in 0..c {
            let sq = mat_vec(&state, &qs[t]);
            let mut o: Vec<f64> = sq.iter().map(|s| gamma[t] * s).collect();
            for i in 0..=t {
                let coef = decay[t][i] * numerics::dot(&ks[i], &qs[t]);
                for (oj, uj) in o.iter_mut().zip(&u[i]) {
                    *oj += coef * uj;
                }
            }
            outputs.push(o);
        }
        let last = c - 1;
        let gl = gamma[last];
        for x in state.data_mut() {
            *x *= gl;
        }
        for i in 0..c {
            let coef = decay[last][i];
            update(&mut state, |x, r, col| x + coef * u[i][r] * ks[i][col]);
        }
        start = end;
    }
    Ok(outputs)
}

/// Random inputs with every gate a rule needs, drawn inside its valid range.
pub mod sample {
    use super::{GateValues, RuleId, Sequence};
    use crate::numerics::Rng;

    pub fn gates(rule: RuleId, d_k: usize, d_v: usize, rng: &mut Rng) -> GateValues {
        let g = GateValues::none();
        match rule {
            RuleId::Attention | RuleId::Swa | RuleId::NaiveLinear => g,
            RuleId::DeltaNet => g.beta(rng.uniform()),
            RuleId::Longhorn => g.delta(rng.uniform()),
            RuleId::RetNet => g.alpha(rng.uniform_range(0.5, 1.0)),
            RuleId::Gla => g.alpha_vec((0..d_k).map(|_| rng.uniform_range(0.5, 1.0)).collect()),
            RuleId::Hgrn2 => g.a_vec((0..d_k.min(d_v)).map(|_| rng.uniform()).collect()),
            RuleId::Mamba2 => g.alpha(rng.uniform_range(0.5, 1.0)).beta(rng.uniform()),
            RuleId::PolySketch => g.p_degree(2),
            RuleId::Ttt => g.eta(rng.uniform_range(0.0, 0.2)),
            RuleId::Rwkv7 => g
                .alpha_vec((0..d_k).map(|_| rng.uniform_range(0.5, 1.0)).collect())
                .beta(rng.uniform()),
            RuleId::GatedDeltaNet => g.alpha(rng.uniform_range(0.5, 1.0)).beta(rng.uniform()),
            RuleId::Titans => g.alpha(rng.uniform_range(0.5, 1.0)).eta(rng.uniform_range(0.0, 0.2)),
        }
    }

    /// Unit keys and queries, Gaussian values.
    pub fn sequence(rule: RuleId, len: usize, d_k: usize, d_v: usize, rng: &mut Rng) -> Sequence {
        let mut s = Sequence::default();
        for _ in 0..len {
            s.keys.push(rng.unit_vector(d_k));
            s.values.push(rng.normal_vec(d_v, 1.0));
            s.gates.push(gates(rule, d_k, d_v, rng));
            s.queries.push(rng.unit_vector(d_k));
        }
        s
    }

    /// Small-integer entries, so sums of products are exact in binary64.
    pub fn integer_sequence(len: usize, d_k: usize, d_v: usize, rng: &mut Rng) -> Sequence {
        let mut int = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.below(7) as f64 - 3.0).collect() };
        let mut s = Sequence::default();
        for _ in 0..len {
            s.keys.push(int(d_k));
            s.values.push(int(d_v));
            s.gates.push(GateValues::none());
            s.queries.push(int(d_k));
        }
        s
    }
}

/// Brute-force references that never materialize a recurrent state.
pub mod oracle {
    use crate::numerics;

    /// `o_t = Σ_{s≤t} (k_s · q_t) v_s`.
    pub fn quadratic_linear_attention(keys: &[Vec<f64>], values: &[Vec<f64>], queries: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let dv = values.first().map_or(0, |v| v.len());
        (0..queries.len())
            .map(|t| {
                let mut o = vec![0.0; dv];
                for s in 0..=t {
                    let w = numerics::dot(&keys[s], &queries[t]);
                    for (oj, vj) in o.iter_mut().zip(&values[s]) {
                        *oj += w * vj;
                    }
                }
                o
            })
            .collect()
    }

    /// Causal softmax attention over positions `max(0, t − window + 1) ..= t`
    /// (`window = None` means the whole prefix).
    pub fn causal_attention(
        keys: &[Vec<f64>],
        values: &[Vec<f64>],
        queries: &[Vec<f64>],
        window: Option<usize>,
    ) -> Vec<Vec<f64>> {
        let dk = keys.first().map_or(1, |k| k.len());
        let dv = values.first().map_or(0, |v| v.len());
        (0..queries.len())
            .map(|t| {
                let lo = window.map_or(0, |w| (t + 1).saturating_sub(w));
                let scores: Vec<f64> = (lo..=t)
                    .map(|s| numerics::dot(&keys[s], &queries[t]) / (dk as f64).sqrt())
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|x| (x - max).exp()).collect();
                let z: f64 = e.iter().sum();
                let mut o = vec![0.0; dv];
                for (w, s) in e.iter().zip(lo..=t) {
                    for (oj, vj) in o.iter_mut().zip(&values[s]) {
                        *oj += w / z * vj;
                    }
                }
                o
            })
            .collect()
    }

    /// Unrolled gated delta rule written with explicit dense matrices:
    /// `M_t = α_t M_{t−1} (I − β_t k_t k_tᵀ) + β_t v_t k_tᵀ`, `o_t = M_t q_t`.
    pub fn dense_gated_delta(
        keys: &[Vec<f64>],
        values: &[Vec<f64>],
        alphas: &[f64],
        betas: &[f64],
        queries: &[Vec<f64>],
    ) -> Vec<Vec<f64>> {
        let dk = keys[0].len();
        let dv = values[0].len();
        let mut m = vec![vec![0.0; dk]; dv];
        let mut out = Vec::with_capacity(keys.len());
        for t in 0..keys.len() {
            let (k, v, a, b) = (&keys[t], &values[t], alphas[t], betas[t]);
            // P = I − β k kᵀ
            let mut p = vec![vec![0.0; dk]; dk];
            for i in 0..dk {
                for j in 0..dk {
                    p[i][j] = if i == j { 1.0 } else { 0.0 } - b * k[i] * k[j];
                }
            }
            let mut next = vec![vec![0.0; dk]; dv];
            for i in 0..dv {
                for j in 0..dk {
                    let mut s = 0.0;
                    for l in 0..dk {
                        s += m[i][l] * p[l][j];
                    }
                    next[i][j] = a * s + b * v[i] * k[j];
                }
            }
            m = next;
            out.push(m.iter().map(|row| numerics::dot(row, &queries[t])).collect());
        }
        out
    }
}
