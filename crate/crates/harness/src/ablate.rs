//! Variant comparison and length-extrapolation sweep.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nirvana_core::block::{self, interpolate, swa_attend, updater_qkv, Vars, KEY_NORM_EPS};
use nirvana_core::model::{layer_prefix, Model, ModelConfig};
use nirvana_core::numerics::{self, RMS_NORM_EPS};
use nirvana_core::rules::{self, GateValues, KvBuffer, RuleId};
use nirvana_core::{Error, Result, Tensor};
use serde::Serialize;

use crate::tasks::TaskSpec;
use crate::train::{eval_set, train_toy, write_summary, RunMetrics, TrainOptions, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoTrigger,
    RopeOn,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTrigger => "no_trigger",
            Variant::RopeOn => "rope_on",
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<Variant>> {
        s.split(',').map(|v| v.trim().parse()).collect()
    }

    /// Model for this variant. `full` and `no_trigger` run SWA without rotary
    /// embeddings; `no_trigger` starts from a zero bank.
    pub fn model(self, base: &ModelConfig) -> Result<Model> {
        let cfg = ModelConfig {
            rope_enabled: self == Variant::RopeOn,
            ..base.clone()
        };
        let mut m = Model::init(cfg)?;
        if self == Variant::NoTrigger {
            m.params.zero_bank();
        }
        Ok(m)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_trigger" => Ok(Variant::NoTrigger),
            "rope_on" => Ok(Variant::RopeOn),
            _ => Err(Error::Config(format!("unknown variant `{s}`"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Evaluation of a trained variant at one sequence length.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub variant: Variant,
    pub eval_len: usize,
    pub loss: f64,
    pub token_acc: f64,
    pub query_acc: f64,
    /// Floats held by the recurrent state after the longest sequence.
    pub state_size: usize,
    /// `n_layers · heads · d_head² + n_post_prelude · 2 · window · d_model`.
    pub state_bound: usize,
    /// Every post-prelude `p` in the traces equals all-ones.
    pub p_all_ones: bool,
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub variant: Variant,
    pub report: TrainReport,
    pub sweep: Vec<SweepPoint>,
}

pub fn state_bound(cfg: &ModelConfig) -> usize {
    let dh = cfg.d_model / cfg.heads;
    cfg.n_layers * cfg.heads * dh * dh + cfg.n_nirvana() * 2 * cfg.window * cfg.d_model
}

/// Evaluates `model` at lengths `T, 2T, 4T` of `spec`.
pub fn length_sweep(model: &Model, variant: Variant, spec: &TaskSpec, eval_size: usize) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::new();
    for mult in [1, 2, 4] {
        let s = TaskSpec {
            seq_len: spec.seq_len * mult,
            ..spec.clone()
        };
        let tasks = eval_set(&s, eval_size)?;
        let e = crate::train::evaluate(model, &tasks)?;
        let mut state = model.new_state();
        let (_, traces) = model.forward_traced(&tasks[0].tokens, Some(&mut state))?;
        out.push(SweepPoint {
            variant,
            eval_len: s.seq_len,
            loss: e.loss,
            token_acc: e.token_acc,
            query_acc: e.query_acc,
            state_size: state.size(),
            state_bound: state_bound(&model.config),
            p_all_ones: traces.iter().all(|t| t.p_in.iter().chain(&t.p_out).all(|v| *v == 1.0)),
        });
    }
    Ok(out)
}

/// Trains every variant from the same seed and data, then sweeps lengths.
/// Metrics are emitted in `(variant, step)` order.
pub fn ablate(
    base: &ModelConfig,
    spec: &TaskSpec,
    variants: &[Variant],
    opts: &TrainOptions,
    mut emit: impl FnMut(Variant, &RunMetrics) -> Result<()>,
) -> Result<Vec<VariantRun>> {
    let mut runs = Vec::new();
    for &v in variants {
        let mut model = v.model(base)?;
        let o = TrainOptions {
            freeze_bank: v == Variant::NoTrigger,
            ..opts.clone()
        };
        let report = train_toy(&mut model, spec, &o, None, |m| emit(v, m))?;
        let sweep = length_sweep(&model, v, spec, opts.eval_size)?;
        runs.push(VariantRun {
            variant: v,
            report,
            sweep,
        });
    }
    Ok(runs)
}

#[derive(Serialize)]
struct VariantLine<'a> {
    variant: Variant,
    #[serde(flatten)]
    m: &'a RunMetrics,
}

/// Writes `metrics.jsonl` (training metrics tagged by variant), `sweep.jsonl`
/// and `summary.csv` under `out`.
pub fn ablate_to_dir(
    base: &ModelConfig,
    spec: &TaskSpec,
    variants: &[Variant],
    opts: &TrainOptions,
    out: &Path,
) -> Result<Vec<VariantRun>> {
    std::fs::create_dir_all(out)?;
    let mut w = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    let runs = ablate(base, spec, variants, opts, |v, m| {
        serde_json::to_writer(&mut w, &VariantLine { variant: v, m })?;
        w.write_all(b"\n")?;
        Ok(())
    })?;
    w.flush()?;
    let mut s = BufWriter::new(File::create(out.join("sweep.jsonl"))?);
    for r in &runs {
        for p in &r.sweep {
            serde_json::to_writer(&mut s, p)?;
            s.write_all(b"\n")?;
        }
    }
    s.flush()?;
    let rows: Vec<(String, &TrainReport)> = runs.iter().map(|r| (r.variant.to_string(), &r.report)).collect();
    write_summary(&out.join("summary.csv"), &rows)?;
    Ok(runs)
}

fn row_times(x: &[f64], w: &Tensor) -> Result<Vec<f64>> {
    Ok(numerics::matmul(&Tensor::vector(x.to_vec()), w)?.into_data())
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// The hybrid without any trigger: per-token loop over SWA, gated-delta
/// memory and interpolation conditioned directly on the projected query
/// `x W_trig_q`. No bank, no `p`. Used to check the zero-bank model path.
pub fn trigger_free_reference(model: &Model, tokens: &[usize]) -> Result<Tensor> {
    let cfg = &model.config;
    let p = &model.params.tensors;
    let b = cfg.block();
    let dh = b.d_head();
    let mut mems = vec![vec![rules::init_state(RuleId::GatedDeltaNet, dh, dh, None)?; cfg.heads]; cfg.n_layers];
    let mut bufs = vec![vec![KvBuffer::new(dh, dh, Some(cfg.window)); cfg.heads]; cfg.n_layers];
    let mut logits = Vec::with_capacity(tokens.len() * cfg.vocab);
    for (pos, &tok) in tokens.iter().enumerate() {
        if tok >= cfg.vocab {
            return Err(Error::VocabOverflow {
                token: tok,
                vocab: cfg.vocab,
            });
        }
        let mut h = p["embed"].row(tok).to_vec();
        for l in 0..cfg.n_layers {
            let prefix = layer_prefix(l);
            let lv = Vars::new(p, prefix.as_str());
            let x = numerics::rms_norm(&h, lv.get("norm_attn")?.data(), RMS_NORM_EPS)?;
            let (q, k, v) = (
                row_times(&x, lv.get("w_q")?)?,
                row_times(&x, lv.get("w_k")?)?,
                row_times(&x, lv.get("w_v")?)?,
            );
            let al = row_times(&x, lv.get("gate_alpha_w")?)?;
            let be = row_times(&x, lv.get("gate_beta_w")?)?;
            let mut lin = Vec::with_capacity(cfg.d_model);
            for hd in 0..cfg.heads {
                let r = hd * dh..(hd + 1) * dh;
                let kh = &k[r.clone()];
                let n = (numerics::dot(kh, kh) + KEY_NORM_EPS).sqrt();
                let kh: Vec<f64> = kh.iter().map(|x| x / n).collect();
                let g = GateValues::none()
                    .alpha(numerics::sigmoid(al[hd] + lv.get("gate_alpha_b")?.data()[hd]))
                    .beta(numerics::sigmoid(be[hd]));
                mems[l][hd] = rules::step(&mems[l][hd], RuleId::GatedDeltaNet, &kh, &v[r.clone()], &g)?;
                lin.extend(rules::read(&mems[l][hd], RuleId::GatedDeltaNet, &q[r])?);
            }
            let mixed = match cfg.layer_kind(l) {
                block::LayerKind::Prelude => lin,
                block::LayerKind::Nirvana => {
                    let u = updater_qkv(&x, &lv)?;
                    let a = swa_attend(
                        &mut bufs[l],
                        &add(&u.q, &u.dq),
                        &add(&u.k, &u.dk),
                        &add(&u.v, &u.dv),
                        pos,
                        cfg.rope_enabled,
                    )?;
                    let c = row_times(&x, lv.get("trig_q")?)?;
                    interpolate(&a, &lin, &c, lv.get("u")?.data(), lv.get("zeta_w1")?, lv.get("zeta_w2")?)?.0
                }
            };
            let h1 = add(&h, &mixed);
            let y = numerics::rms_norm(&h1, lv.get("norm_ffn")?.data(), RMS_NORM_EPS)?;
            let hid: Vec<f64> = row_times(&y, lv.get("ffn_w1")?)?.into_iter().map(numerics::swish).collect();
            h = add(&h1, &row_times(&hid, lv.get("ffn_w2")?)?);
        }
        if cfg.n_layers > 0 {
            h = numerics::rms_norm(&h, p["final_norm"].data(), RMS_NORM_EPS)?;
        }
        for v in 0..cfg.vocab {
            logits.push(numerics::dot(&h, p["embed"].row(v)));
        }
    }
    Tensor::new(vec![tokens.len(), cfg.vocab], logits)
}
