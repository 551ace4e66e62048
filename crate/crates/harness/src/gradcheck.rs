//! Analytic gradients against finite differences.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nirvana_core::autodiff::{finite_diff5, finite_diff_adaptive, relative_error, Eager, Graph, Tape};
use nirvana_core::block::{self, clogd_grad, trigger_loss, BlockConfig, FastParams, LayerKind, Vars, WeightBank};
use nirvana_core::model::{forward_graph, group_of, ModelConfig, Params};
use nirvana_core::{Error, Result, Rng, Tensor};
use serde::Serialize;

/// Trigger gradients below this are compared absolutely: finite differences
/// of an O(10) loss cannot resolve them relatively.
pub const TRIGGER_FLOOR: f64 = 1e-3;
const TAPE_FLOOR: f64 = 1e-6;
const TAPE_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Trigger,
    Block,
    Model,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trigger" => Ok(Scope::Trigger),
            "block" => Ok(Scope::Block),
            "model" => Ok(Scope::Model),
            _ => Err(Error::Config(format!("unknown gradcheck scope `{s}`"))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Trigger => "trigger",
            Scope::Block => "block",
            Scope::Model => "model",
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub scope: Scope,
    pub seeds: u64,
    pub tol: f64,
    /// Worst relative error per parameter group over all seeds.
    pub groups: BTreeMap<String, f64>,
    pub pass: bool,
}

impl Report {
    pub fn max_error(&self) -> f64 {
        self.groups.values().fold(0.0, |m, e| m.max(*e))
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "gradcheck scope={} seeds={} tol={:e}", self.scope, self.seeds, self.tol)?;
        for (g, e) in &self.groups {
            let mark = if *e < self.tol { "ok" } else { "FAIL" };
            writeln!(f, "  {g:<20} {e:.3e} {mark}")?;
        }
        write!(f, "{}", if self.pass { "PASS" } else { "FAIL" })
    }
}

/// Applied to every analytic gradient before comparison. The identity in
/// normal use; tests pass a corrupting hook to exercise the failure path.
pub type Tamper<'a> = &'a dyn Fn(&str, &mut Tensor);

pub fn gradcheck(scope: Scope, seeds: u64, tol: f64) -> Result<Report> {
    gradcheck_with(scope, seeds, tol, &|_, _| {})
}

pub fn gradcheck_with(scope: Scope, seeds: u64, tol: f64, tamper: Tamper<'_>) -> Result<Report> {
    let mut groups: BTreeMap<String, f64> = BTreeMap::new();
    for seed in 0..seeds {
        let errs = match scope {
            Scope::Trigger => trigger_case(seed, tamper)?,
            Scope::Block => block_case(seed, tamper)?,
            Scope::Model => model_case(seed, tamper)?,
        };
        for (g, e) in errs {
            let slot = groups.entry(g).or_insert(0.0);
            // NaN must not be hidden by max
            *slot = if e.is_nan() { f64::NAN } else { slot.max(e) };
        }
    }
    let pass = !groups.is_empty() && groups.values().all(|e| *e < tol);
    Ok(Report {
        scope,
        seeds,
        tol,
        groups,
        pass,
    })
}

/// Random trigger-loss problem; shapes cycle through d_trig ∈ {2,4,8} and K ∈ {1,2,4}.
pub fn trigger_problem(seed: u64) -> (WeightBank, FastParams, Vec<f64>, Vec<f64>) {
    let mut rng = Rng::new(seed);
    let dt = [2, 4, 8][seed as usize % 3];
    let k = [1, 2, 4][(seed as usize / 3) % 3];
    let bank = WeightBank::new(dt, rng.normal_tensor(&[k, dt * dt + dt], 1.0)).expect("bank shape");
    let p = FastParams(rng.normal_vec(k, 1.0));
    (bank, p, rng.normal_vec(dt, 1.0), rng.normal_vec(dt, 1.0))
}

fn trigger_case(seed: u64, tamper: Tamper<'_>) -> Result<Vec<(String, f64)>> {
    let (bank, p, k, v) = trigger_problem(seed);
    let mut g = Tensor::vector(clogd_grad(&p, &bank, &k, &v)?);
    tamper("clogd_grad", &mut g);
    let at = Tensor::vector(p.0.clone());
    let fd = finite_diff_adaptive(
        |x| trigger_loss(&FastParams(x.data().to_vec()), &bank, &k, &v).unwrap_or(f64::NAN),
        &at,
    );
    Ok(vec![("clogd_grad".into(), relative_error(&g, &fd, TRIGGER_FLOOR))])
}

/// Max relative error per group between tape gradients and five-point
/// differences of `value`.
fn compare(
    params: &BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    value: impl Fn(&BTreeMap<String, Tensor>) -> f64,
    group: impl Fn(&str) -> String,
    tamper: Tamper<'_>,
) -> Vec<(String, f64)> {
    // group → (analytic, numeric) flattened
    let mut by_group: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (name, t) in params {
        let mut g = grads[name].clone();
        tamper(name, &mut g);
        let mut q = params.clone();
        let fd = finite_diff5(
            |x| {
                q.insert(name.clone(), x.clone());
                value(&q)
            },
            t,
            TAPE_STEP,
        );
        let e = by_group.entry(group(name)).or_default();
        e.0.extend(g.data());
        e.1.extend(fd.data());
    }
    by_group
        .into_iter()
        .map(|(g, (a, n))| {
            let e = relative_error(&Tensor::vector(a), &Tensor::vector(n), TAPE_FLOOR);
            (g, e)
        })
        .collect()
}

fn tape_grads(
    params: &BTreeMap<String, Tensor>,
    build: impl FnOnce(&mut Tape, &BTreeMap<String, nirvana_core::autodiff::NodeRef>) -> Result<nirvana_core::autodiff::NodeRef>,
) -> Result<BTreeMap<String, Tensor>> {
    let mut tape = Tape::default();
    let vars: BTreeMap<String, _> = params.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect();
    let loss = build(&mut tape, &vars)?;
    let wrt: Vec<_> = vars.values().copied().collect();
    let grads = tape.backward(loss, &wrt)?;
    vars.iter()
        .map(|(k, n)| {
            let g = grads.get(*n).cloned().unwrap_or_else(|| Tensor::zeros(params[k].shape()));
            Ok((k.clone(), g))
        })
        .collect()
}

fn block_config(seed: u64) -> BlockConfig {
    BlockConfig {
        d_model: 8,
        heads: 2,
        window: 3,
        d_trig: 4,
        bank_size: 3,
        rank: 2,
        rope: seed % 2 == 1,
    }
}

fn block_objective<G: Graph>(
    g: &mut G,
    c: &BlockConfig,
    vars: &BTreeMap<String, G::Var>,
    h: &Tensor,
    p: &Tensor,
    probe: &Tensor,
) -> Result<G::Var> {
    let hv = g.constant(h.clone());
    let pv = g.constant(p.clone());
    let out = block::nirvana_layer(g, c, &Vars::new(vars, ""), &vars["bank"], &hv, &pv, None, 0, 0, None)?;
    let pr = g.constant(probe.clone());
    let prod = g.mul(&out.h, &pr)?;
    let s1 = g.sum(&prod)?;
    let s2 = g.sum(&out.p_out)?;
    g.add(&s1, &s2)
}

/// One post-prelude layer on a random 5-token input, loss a random linear
/// probe of its outputs.
fn block_case(seed: u64, tamper: Tamper<'_>) -> Result<Vec<(String, f64)>> {
    let c = block_config(seed);
    let mut rng = Rng::new(seed);
    let mut params: BTreeMap<String, Tensor> = block::layer_shapes(&c, LayerKind::Nirvana)
        .into_iter()
        .map(|(name, shape)| {
            let t = rng.normal_tensor(&shape, 0.5);
            let t = if name.starts_with("norm") { t.map(|v| 1.0 + 0.2 * v) } else { t };
            (name.to_string(), t)
        })
        .collect();
    params.insert("bank".into(), rng.normal_tensor(&[c.bank_size, c.bank_block()], 0.5));
    let h = rng.normal_tensor(&[5, c.d_model], 1.0);
    let p = rng.normal_tensor(&[5, c.bank_size], 1.0);
    let probe = rng.normal_tensor(&[5, c.d_model], 1.0);
    let grads = tape_grads(&params, |t, v| block_objective(t, &c, v, &h, &p, &probe))?;
    let value = |q: &BTreeMap<String, Tensor>| -> f64 {
        let mut g = Eager::default();
        let vars: BTreeMap<String, _> = q.iter().map(|(k, v)| (k.clone(), g.constant(v.clone()))).collect();
        block_objective(&mut g, &c, &vars, &h, &p, &probe).map_or(f64::NAN, |v| v.item())
    };
    Ok(compare(&params, &grads, value, |n| group_of(n).name().to_string(), tamper))
}

/// The d=16, two-layer (one prelude) model used by the model scope.
pub fn model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab: 11,
        d_model: 16,
        n_layers: 2,
        n_prelude: 1,
        heads: 2,
        window: 3,
        d_trig: 4,
        k: 3,
        rank: 2,
        rope_enabled: seed % 2 == 1,
        seed,
        ..ModelConfig::default()
    }
}

fn model_objective<G: Graph>(
    g: &mut G,
    cfg: &ModelConfig,
    vars: &BTreeMap<String, G::Var>,
    tokens: &[usize],
    targets: &[usize],
) -> Result<G::Var> {
    let logits = forward_graph(g, cfg, vars, tokens, None, None)?;
    let w = vec![1.0 / tokens.len() as f64; tokens.len()];
    g.cross_entropy(&logits, targets.to_vec(), w)
}

/// Cross-entropy of an 8-token sequence against random targets, with every
/// parameter (zero-initialized ones included) perturbed away from init.
fn model_case(seed: u64, tamper: Tamper<'_>) -> Result<Vec<(String, f64)>> {
    let cfg = model_config(seed);
    let mut rng = Rng::new(seed);
    let mut params = Params::init(&cfg)?.tensors;
    for t in params.values_mut() {
        *t = t.add(&rng.normal_tensor(t.shape(), 0.3))?;
    }
    let tokens: Vec<usize> = (0..8).map(|_| rng.below(cfg.vocab)).collect();
    let targets: Vec<usize> = (0..8).map(|_| rng.below(cfg.vocab)).collect();
    let grads = tape_grads(&params, |t, v| model_objective(t, &cfg, v, &tokens, &targets))?;
    let value = |q: &BTreeMap<String, Tensor>| -> f64 {
        let mut g = Eager::default();
        let vars: BTreeMap<String, _> = q.iter().map(|(k, v)| (k.clone(), g.constant(v.clone()))).collect();
        model_objective(&mut g, &cfg, &vars, &tokens, &targets).map_or(f64::NAN, |v| v.item())
    };
    Ok(compare(&params, &grads, value, |n| group_of(n).name().to_string(), tamper))
}

/// A trigger problem whose target value is exactly reached at `p`, so the
/// residual and the analytic gradient are zero. Returns `(max |analytic|,
/// max |finite difference|)`.
pub fn zero_residual_case(seed: u64) -> Result<(f64, f64)> {
    let (bank, p, k, _) = trigger_problem(seed);
    let (w, b) = block::materialize_fast_weights(&p, &bank)?;
    let v = block::meta_apply(&k, &w, &b)?;
    let g = clogd_grad(&p, &bank, &k, &v)?;
    let fd = finite_diff_adaptive(
        |x| trigger_loss(&FastParams(x.data().to_vec()), &bank, &k, &v).unwrap_or(f64::NAN),
        &Tensor::vector(p.0.clone()),
    );
    Ok((g.iter().fold(0.0f64, |m, x| m.max(x.abs())), fd.max_abs()))
}
