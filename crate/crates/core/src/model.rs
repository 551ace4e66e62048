//! Toy language model: tied embeddings, prelude layers with linear attention
//! only, Nirvana layers sharing one weight bank with the fast parameters
//! flowing layer to layer, final RMSNorm and the tied LM head.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Eager, Graph};
use crate::block::{self, BlockConfig, LayerKind, LayerState, LayerTrace, Vars};
use crate::error::{Error, Result};
use crate::numerics::{self, Precision, Rng, Tensor, RMS_NORM_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_prelude: usize,
    pub heads: usize,
    pub window: usize,
    pub d_trig: usize,
    /// weight-bank size K
    pub k: usize,
    pub rank: usize,
    pub rope_enabled: bool,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            d_model: 64,
            n_layers: 4,
            n_prelude: 1,
            heads: 2,
            window: 16,
            d_trig: 16,
            k: 4,
            rank: 4,
            rope_enabled: false,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

impl ModelConfig {
    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            heads: self.heads,
            window: self.window,
            d_trig: self.d_trig,
            bank_size: self.k,
            rank: self.rank,
            rope: self.rope_enabled,
        }
    }

    pub fn n_nirvana(&self) -> usize {
        self.n_layers - self.n_prelude
    }

    pub fn layer_kind(&self, l: usize) -> LayerKind {
        if l < self.n_prelude {
            LayerKind::Prelude
        } else {
            LayerKind::Nirvana
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.d_model == 0 {
            return Err(Error::Config("vocab and d_model must be positive".into()));
        }
        if self.n_prelude > self.n_layers {
            return Err(Error::Config(format!(
                "n_prelude {} exceeds n_layers {}",
                self.n_prelude, self.n_layers
            )));
        }
        if self.n_layers == 0 {
            return Ok(());
        }
        let b = self.block();
        if self.n_nirvana() > 0 {
            b.validate()
        } else if self.heads == 0 || self.d_model % self.heads != 0 {
            Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )))
        } else {
            Ok(())
        }
    }
}

/// Parameter groups used when itemizing counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Embedding,
    Norm,
    Attention,
    Gates,
    LowRank,
    TriggerProjection,
    Bank,
    Zeta,
    Ffn,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Embedding => "embedding",
            Group::Norm => "norm",
            Group::Attention => "attention",
            Group::Gates => "gates",
            Group::LowRank => "low_rank",
            Group::TriggerProjection => "trigger_projection",
            Group::Bank => "bank",
            Group::Zeta => "zeta",
            Group::Ffn => "ffn",
        }
    }
}

/// Group of a parameter by its leaf name.
pub fn group_of(name: &str) -> Group {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    match leaf {
        "embed" => Group::Embedding,
        "bank" => Group::Bank,
        n if n.starts_with("norm") || n == "final_norm" => Group::Norm,
        "w_q" | "w_k" | "w_v" => Group::Attention,
        n if n.starts_with("gate_") => Group::Gates,
        n if n.starts_with("lr_") => Group::LowRank,
        "trig_q" | "trig_k" | "trig_v" | "theta" | "u" => Group::TriggerProjection,
        n if n.starts_with("zeta") => Group::Zeta,
        _ => Group::Ffn,
    }
}

pub fn layer_prefix(l: usize) -> String {
    format!("layers.{l}.")
}

/// Every learnable tensor with its shape, in a fixed order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = vec![("embed".to_string(), vec![cfg.vocab, cfg.d_model])];
    if cfg.n_layers == 0 {
        return out;
    }
    let b = cfg.block();
    if cfg.n_nirvana() > 0 {
        out.push(("bank".into(), vec![cfg.k, b.bank_block()]));
    }
    for l in 0..cfg.n_layers {
        for (name, shape) in block::layer_shapes(&b, cfg.layer_kind(l)) {
            out.push((format!("{}{name}", layer_prefix(l)), shape));
        }
    }
    out.push(("final_norm".into(), vec![cfg.d_model]));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub by_group: BTreeMap<Group, usize>,
}

/// Exact learnable-scalar count, itemized by [`Group`].
pub fn count_params(cfg: &ModelConfig) -> ParamCount {
    let mut by_group = BTreeMap::new();
    let mut total = 0;
    for (name, shape) in param_shapes(cfg) {
        let n: usize = shape.iter().product();
        *by_group.entry(group_of(&name)).or_insert(0) += n;
        total += n;
    }
    ParamCount { total, by_group }
}

/// Named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tensors: BTreeMap<String, Tensor>,
}

impl Params {
    /// Seeded initialization from `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed);
        let d = cfg.d_model as f64;
        let depth = (2 * cfg.n_layers.max(1)) as f64;
        let mut tensors = BTreeMap::new();
        for (name, shape) in param_shapes(cfg) {
            let leaf = name.rsplit('.').next().unwrap_or(&name).to_string();
            let fan_in = shape[0] as f64;
            let normal = |rng: &mut Rng, std: f64| rng.normal_tensor(&shape, std);
            let t = match leaf.as_str() {
                "embed" => normal(&mut rng, 1.0 / d.sqrt()),
                "final_norm" | "norm_attn" | "norm_ffn" => Tensor::filled(&shape, 1.0),
                "bank" => {
                    let dt = cfg.d_trig;
                    let mut t = normal(&mut rng, 1.0 / (dt as f64).sqrt());
                    for r in 0..cfg.k {
                        for c in dt * dt..dt * dt + dt {
                            t.data_mut()[r * (dt * dt + dt) + c] = 0.0;
                        }
                    }
                    t
                }
                "gate_alpha_w" | "gate_beta_w" => normal(&mut rng, 0.1 / d.sqrt()),
                // decay timescales spread across heads, α from σ(1) to σ(7)
                "gate_alpha_b" => {
                    let h = shape[0];
                    let b = (0..h).map(|i| if h == 1 { 4.0 } else { 1.0 + 6.0 * i as f64 / (h - 1) as f64 });
                    Tensor::vector(b.collect())
                }
                "lr_q_up" | "lr_k_up" | "lr_v_up" | "theta" | "u" | "zeta_w2" => Tensor::zeros(&shape),
                "ffn_w2" => normal(&mut rng, 1.0 / (fan_in * depth).sqrt()),
                _ => normal(&mut rng, 1.0 / fan_in.sqrt()),
            };
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Zero the weight bank, which disables the trigger analytically.
    pub fn zero_bank(&mut self) {
        if let Some(b) = self.tensors.get_mut("bank") {
            *b = Tensor::zeros(b.shape());
        }
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let shapes = param_shapes(cfg);
        if shapes.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, found {}",
                shapes.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in shapes {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!("{name}: {:?} vs {shape:?}", t.shape())));
            }
        }
        Ok(())
    }
}

/// Per-sequence recurrent state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub layers: Vec<LayerState>,
    pub position: usize,
}

impl ModelState {
    pub fn new(cfg: &ModelConfig) -> Self {
        let b = cfg.block();
        Self {
            layers: (0..cfg.n_layers).map(|l| LayerState::new(&b, cfg.layer_kind(l))).collect(),
            position: 0,
        }
    }

    /// Stored scalars across all layers.
    pub fn size(&self) -> usize {
        self.layers.iter().map(LayerState::size).sum()
    }
}

/// Load parameters into a graph, rounded to its precision.
pub fn bind<G: Graph>(g: &mut G, params: &Params) -> BTreeMap<String, G::Var> {
    let p = g.precision();
    params
        .tensors
        .iter()
        .map(|(k, t)| {
            let mut t = t.clone();
            p.round_slice(t.data_mut());
            (k.clone(), g.constant(t))
        })
        .collect()
}

/// Logits `[T×vocab]` for `tokens`, continuing from `state` when given.
/// Post-prelude layer traces are appended to `traces` when requested.
pub fn forward_graph<G: Graph>(
    g: &mut G,
    cfg: &ModelConfig,
    vars: &BTreeMap<String, G::Var>,
    tokens: &[usize],
    mut state: Option<&mut ModelState>,
    mut traces: Option<&mut Vec<LayerTrace>>,
) -> Result<G::Var> {
    if tokens.is_empty() {
        return Err(Error::Shape("empty token sequence".into()));
    }
    let t_len = tokens.len();
    let mut onehot = Tensor::zeros(&[t_len, cfg.vocab]);
    for (r, &tok) in tokens.iter().enumerate() {
        if tok >= cfg.vocab {
            return Err(Error::VocabOverflow {
                token: tok,
                vocab: cfg.vocab,
            });
        }
        onehot.data_mut()[r * cfg.vocab + tok] = 1.0;
    }
    let embed = Vars::new(vars, "").get("embed")?;
    let oh = g.constant(onehot);
    let mut h = g.matmul(&oh, embed)?;
    let pos0 = state.as_deref().map(|s| s.position).unwrap_or(0);
    let b = cfg.block();
    let mut p = None;
    for l in 0..cfg.n_layers {
        let prefix = layer_prefix(l);
        let lv = Vars::new(vars, prefix.as_str());
        let ls = state.as_deref_mut().map(|s| &mut s.layers[l]);
        match cfg.layer_kind(l) {
            LayerKind::Prelude => h = block::prelude_layer(g, &b, &lv, &h, ls)?,
            LayerKind::Nirvana => {
                let p_in = match p.take() {
                    Some(p) => p,
                    None => g.constant(Tensor::filled(&[t_len, cfg.k], 1.0)),
                };
                let bank = Vars::new(vars, "").get("bank")?;
                let out = block::nirvana_layer(g, &b, &lv, bank, &h, &p_in, ls, pos0, l, traces.as_deref_mut())?;
                h = out.h;
                p = Some(out.p_out);
            }
        }
    }
    if cfg.n_layers > 0 {
        h = g.rms_norm(&h, Vars::new(vars, "").get("final_norm")?, RMS_NORM_EPS)?;
    }
    if let Some(s) = state {
        s.position += t_len;
    }
    let et = g.transpose(embed)?;
    g.matmul(&h, &et)
}

/// A configuration with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

impl Model {
    pub fn init(config: ModelConfig) -> Result<Self> {
        let params = Params::init(&config)?;
        Ok(Self { config, params })
    }

    pub fn new(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        params.check(&config)?;
        Ok(Self { config, params })
    }

    pub fn new_state(&self) -> ModelState {
        ModelState::new(&self.config)
    }

    fn eager(&self) -> (Eager, BTreeMap<String, std::rc::Rc<Tensor>>) {
        let mut g = Eager::new(self.config.precision);
        let vars = bind(&mut g, &self.params);
        (g, vars)
    }

    /// Logits for the next token after feeding `token`, advancing `state`.
    pub fn forward_token(&self, state: &mut ModelState, token: usize) -> Result<Vec<f64>> {
        let (mut g, vars) = self.eager();
        let logits = forward_graph(&mut g, &self.config, &vars, &[token], Some(state), None)?;
        Ok(logits.data().to_vec())
    }

    /// Teacher-forced logits `[T×vocab]` from a fresh state.
    pub fn forward_sequence(&self, tokens: &[usize]) -> Result<Tensor> {
        Ok(self.forward_traced(tokens, None)?.0)
    }

    /// Like [`Model::forward_sequence`], also returning per-layer traces.
    pub fn forward_traced(&self, tokens: &[usize], state: Option<&mut ModelState>) -> Result<(Tensor, Vec<LayerTrace>)> {
        let (mut g, vars) = self.eager();
        let mut traces = Vec::new();
        let logits = forward_graph(&mut g, &self.config, &vars, tokens, state, Some(&mut traces))?;
        traces.sort_by_key(|t| (t.position, t.layer));
        Ok(((*logits).clone(), traces))
    }

    /// Continue `prompt` by `n_new` tokens, greedily or by seeded sampling.
    pub fn generate(&self, prompt: &[usize], n_new: usize, greedy: bool, rng: &mut Rng) -> Result<Vec<usize>> {
        let mut out = prompt.to_vec();
        if n_new == 0 {
            return Ok(out);
        }
        if prompt.is_empty() {
            return Err(Error::Shape("generation needs a non-empty prompt".into()));
        }
        let mut state = self.new_state();
        let (mut g, vars) = self.eager();
        let logits = forward_graph(&mut g, &self.config, &vars, prompt, Some(&mut state), None)?;
        let mut last = logits.row(logits.n_rows() - 1).to_vec();
        for i in 0..n_new {
            let next = if greedy { argmax(&last) } else { sample(&last, rng) };
            out.push(next);
            if i + 1 < n_new {
                last = self.forward_token(&mut state, next)?;
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(&mut f, self)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Index of the largest value; the first on ties.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

fn sample(logits: &[f64], rng: &mut Rng) -> usize {
    let p = numerics::softmax(logits);
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NRVA";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Container: magic, version, config JSON, manifest of
/// `(name, shape, offset)`, then little-endian f64 data in manifest order.
pub fn write_checkpoint<W: Write>(mut w: W, model: &Model) -> Result<()> {
    let json = serde_json::to_vec(&model.config)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(model.params.tensors.len() as u32).to_le_bytes())?;
    let mut offset = 0u64;
    for (name, t) in &model.params.tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        w.write_all(&offset.to_le_bytes())?;
        offset += t.len() as u64;
    }
    for t in model.params.tensors.values() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Model> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut json = vec![0u8; read_u32(&mut r)? as usize];
    r.read_exact(&mut json)?;
    let config: ModelConfig = serde_json::from_slice(&json)?;
    let n = read_u32(&mut r)? as usize;
    let mut manifest = Vec::with_capacity(n);
    let mut expected = 0u64;
    for _ in 0..n {
        let mut name = vec![0u8; read_u32(&mut r)? as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if read_u64(&mut r)? != expected {
            return Err(Error::Checkpoint(format!("offset mismatch at {name}")));
        }
        expected += shape.iter().product::<usize>() as u64;
        manifest.push((name, shape));
    }
    let mut tensors = BTreeMap::new();
    for (name, shape) in manifest {
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| read_u64(&mut r).map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Model::new(config, Params { tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab: 11,
            d_model: 8,
            n_layers: 2,
            n_prelude: 1,
            heads: 2,
            window: 3,
            d_trig: 4,
            k: 2,
            rank: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn embeddings_only_count() {
        let cfg = ModelConfig {
            n_layers: 0,
            n_prelude: 0,
            ..ModelConfig::default()
        };
        assert_eq!(count_params(&cfg).total, 256 * 64);
    }

    #[test]
    fn bank_block_increment() {
        let cfg = ModelConfig::default();
        let more = ModelConfig { k: cfg.k + 1, ..cfg.clone() };
        assert_eq!(count_params(&more).total - count_params(&cfg).total, 16 * 16 + 16);
    }

    #[test]
    fn n_prelude_bound() {
        let cfg = ModelConfig {
            n_prelude: 5,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_weights_give_uniform_logits() {
        let cfg = small();
        let mut m = Model::init(cfg).unwrap();
        for t in m.params.tensors.values_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let logits = m.forward_sequence(&[1, 2, 3]).unwrap();
        assert!(logits.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn vocab_overflow() {
        let m = Model::init(small()).unwrap();
        assert!(matches!(
            m.forward_sequence(&[3, 11]),
            Err(Error::VocabOverflow { token: 11, vocab: 11 })
        ));
    }

    #[test]
    fn single_token_matches_forward_token() {
        let m = Model::init(small()).unwrap();
        let mut s = m.new_state();
        let a = m.forward_token(&mut s, 4).unwrap();
        let b = m.forward_sequence(&[4]).unwrap();
        assert_eq!(a, b.data());
    }

    #[test]
    fn generate_zero_new_returns_prompt() {
        let m = Model::init(small()).unwrap();
        assert_eq!(m.generate(&[1, 2], 0, true, &mut Rng::new(0)).unwrap(), vec![1, 2]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Model::init(small()).unwrap();
        let mut a = Vec::new();
        write_checkpoint(&mut a, &m).unwrap();
        let back = read_checkpoint(a.as_slice()).unwrap();
        assert_eq!(back, m);
        let mut b = Vec::new();
        write_checkpoint(&mut b, &back).unwrap();
        assert_eq!(a, b);
        assert!(read_checkpoint(&a[..a.len() - 1]).is_err());
        let mut wrong = a.clone();
        wrong[0] = b'X';
        assert!(read_checkpoint(wrong.as_slice()).is_err());
    }
}
