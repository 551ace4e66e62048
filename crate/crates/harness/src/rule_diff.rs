//! Rule scans against brute-force oracles and reduction identities.

use std::fmt;

use nirvana_core::rules::{self, oracle, sample, Decay, scan, scan_with, GateValues, RuleId, RuleOptions, Sequence};
use nirvana_core::{Result, Rng};
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub max_abs: f64,
    pub max_rel: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiffReport {
    pub rule: RuleId,
    pub len: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl DiffReport {
    pub fn worst_abs(&self) -> f64 {
        self.checks.iter().fold(0.0, |m, c| m.max(c.max_abs))
    }
}

impl fmt::Display for DiffReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "rule {} len={} d_k={} d_v={} seed={}",
            self.rule, self.len, self.d_k, self.d_v, self.seed
        )?;
        for c in &self.checks {
            writeln!(f, "  {:<32} max_abs {:.3e}  max_rel {:.3e}", c.name, c.max_abs, c.max_rel)?;
        }
        Ok(())
    }
}

fn check(name: &str, got: &[Vec<f64>], want: &[Vec<f64>]) -> Check {
    let (mut abs, mut scale) = (0.0f64, 0.0f64);
    for (a, b) in got.iter().zip(want) {
        for (x, y) in a.iter().zip(b) {
            abs = abs.max((x - y).abs());
            scale = scale.max(y.abs());
        }
    }
    if got.len() != want.len() {
        abs = f64::INFINITY;
    }
    Check {
        name: name.into(),
        max_abs: abs,
        max_rel: abs / scale.max(f64::MIN_POSITIVE),
    }
}

fn regate(seq: &Sequence, f: impl Fn(&GateValues) -> GateValues) -> Sequence {
    Sequence {
        gates: seq.gates.iter().map(f).collect(),
        ..seq.clone()
    }
}

pub fn rule_diff(rule: RuleId, len: usize, d_k: usize, d_v: usize, seed: u64) -> Result<DiffReport> {
    let mut rng = Rng::new(seed);
    let seq = sample::sequence(rule, len, d_k, d_v, &mut rng);
    let opts = RuleOptions {
        window: rule.is_set_rule().then_some(len.max(1)),
        ..RuleOptions::default()
    };
    let out = scan_with(rule, &seq, &opts)?;
    let mut checks = Vec::new();
    let naive = |s: &Sequence| oracle::quadratic_linear_attention(&s.keys, &s.values, &s.queries);
    match rule {
        RuleId::NaiveLinear => checks.push(check("quadratic oracle", &out, &naive(&seq))),
        RuleId::Attention => checks.push(check(
            "causal softmax oracle",
            &out,
            &oracle::causal_attention(&seq.keys, &seq.values, &seq.queries, None),
        )),
        RuleId::Swa => {
            let full = scan_with(rule, &seq, &RuleOptions::window(len))?;
            checks.push(check(
                "capacity >= T vs full attention",
                &full,
                &oracle::causal_attention(&seq.keys, &seq.values, &seq.queries, None),
            ));
            let w = (len / 4).max(1);
            let windowed = scan_with(rule, &seq, &RuleOptions::window(w))?;
            checks.push(check(
                &format!("capacity {w} vs windowed oracle"),
                &windowed,
                &oracle::causal_attention(&seq.keys, &seq.values, &seq.queries, Some(w)),
            ));
        }
        RuleId::GatedDeltaNet => {
            let alphas: Vec<f64> = seq
                .gates
                .iter()
                .map(|g| match g.alpha {
                    Some(Decay::Scalar(a)) => a,
                    _ => 1.0,
                })
                .collect();
            let betas: Vec<f64> = seq.gates.iter().map(|g| g.beta.unwrap_or(1.0)).collect();
            checks.push(check(
                "dense unroll",
                &out,
                &oracle::dense_gated_delta(&seq.keys, &seq.values, &alphas, &betas, &seq.queries),
            ));
            let one = regate(&seq, |g| g.clone().alpha(1.0));
            checks.push(check(
                "alpha=1 vs delta_net",
                &scan(rule, &one)?,
                &scan(RuleId::DeltaNet, &one)?,
            ));
            for chunk in [1, 8, len.max(1)] {
                checks.push(check(
                    &format!("chunkwise chunk={chunk}"),
                    &rules::chunkwise_gated_delta(&seq, chunk)?,
                    &out,
                ));
            }
        }
        RuleId::DeltaNet => {
            let betas: Vec<f64> = seq.gates.iter().map(|g| g.beta.unwrap_or(1.0)).collect();
            checks.push(check(
                "dense unroll (alpha=1)",
                &out,
                &oracle::dense_gated_delta(&seq.keys, &seq.values, &vec![1.0; len], &betas, &seq.queries),
            ));
        }
        RuleId::Gla => {
            let s = regate(&seq, |_| GateValues::none().alpha_vec(vec![1.0; d_k]));
            checks.push(check("alpha=1 vs naive_linear", &scan(rule, &s)?, &naive(&s)));
        }
        RuleId::Rwkv7 => {
            let s = regate(&seq, |g| g.clone().alpha_vec(vec![1.0; d_k]));
            checks.push(check("alpha=1 vs delta_net", &scan(rule, &s)?, &scan(RuleId::DeltaNet, &s)?));
        }
        RuleId::PolySketch => {
            let s = regate(&seq, |_| GateValues::none().p_degree(1));
            checks.push(check("p=1 vs naive_linear", &scan(rule, &s)?, &naive(&s)));
        }
        RuleId::Mamba2 => {
            let s = regate(&seq, |_| GateValues::none().alpha(1.0).beta(1.0));
            checks.push(check("alpha=beta=1 vs naive_linear", &scan(rule, &s)?, &naive(&s)));
        }
        RuleId::RetNet => {
            let s = regate(&seq, |_| GateValues::none().alpha(1.0));
            checks.push(check("alpha=1 vs naive_linear", &scan(rule, &s)?, &naive(&s)));
        }
        RuleId::Longhorn => {
            // δ = 1 with a unit key overwrites that key's slot: read(k) = v
            let s = regate(&seq, |_| GateValues::none().delta(1.0));
            let mut state = rules::init_state(rule, d_k, d_v, None)?;
            let (mut got, mut want) = (Vec::new(), Vec::new());
            for t in 0..len {
                state = rules::step(&state, rule, &s.keys[t], &s.values[t], &s.gates[t])?;
                got.push(rules::read(&state, rule, &s.keys[t])?);
                want.push(s.values[t].clone());
            }
            checks.push(check("delta=1 exact write", &got, &want));
        }
        RuleId::Hgrn2 | RuleId::Ttt | RuleId::Titans => {}
    }
    // every rule: the last token cannot change earlier reads
    if len > 1 {
        let mut pert = seq.clone();
        let last = len - 1;
        pert.keys[last] = rng.unit_vector(d_k);
        pert.values[last] = rng.normal_vec(d_v, 1.0);
        pert.queries[last] = rng.unit_vector(d_k);
        let b = scan_with(rule, &pert, &opts)?;
        checks.push(check("causality (prefix reads)", &b[..last], &out[..last]));
    }
    Ok(DiffReport {
        rule,
        len,
        d_k,
        d_v,
        seed,
        checks,
    })
}
