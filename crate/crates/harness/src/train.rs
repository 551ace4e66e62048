//! Masked next-token training on synthetic tasks.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nirvana_core::autodiff::{adamw_step, clip_grad_norm, warmup_lr, AdamState, AdamWConfig, Eager, Graph, Tape};
use nirvana_core::block::write_layer_traces;
use nirvana_core::model::{argmax, bind, forward_graph, Model};
use nirvana_core::{Error, Result, Rng, Tensor};
use serde::Serialize;

use crate::tasks::{gen_task_with, Task, TaskSpec};

/// Substream offset for held-out evaluation sequences.
const EVAL_STREAM: u64 = 1 << 62;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub eval_every: usize,
    pub eval_size: usize,
    pub clip: f64,
    /// Keep the weight bank at its current value (the no-trigger ablation).
    pub freeze_bank: bool,
    /// Stop after the first evaluation reaching this query accuracy.
    pub stop_at: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 3e-3,
            batch: 4,
            eval_every: 50,
            eval_size: 32,
            clip: 1.0,
            freeze_bank: false,
            stop_at: None,
        }
    }
}

/// One metrics record. `wall_ms` is kept out of the JSONL stream so repeated
/// runs produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub step: usize,
    /// Masked cross-entropy on the held-out evaluation set.
    pub loss: f64,
    pub token_acc: f64,
    pub query_acc: f64,
    /// Masked cross-entropy of the most recent training batch.
    pub train_loss: f64,
    #[serde(skip)]
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalStats {
    pub loss: f64,
    pub token_acc: f64,
    pub query_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub metrics: Vec<RunMetrics>,
    /// First evaluated step whose query accuracy reached `stop_at`.
    pub reached: Option<usize>,
    pub wall_ms: f64,
}

/// Training batch `step`: sequences drawn from per-sequence substreams of the task seed.
pub fn train_batch(spec: &TaskSpec, step: usize, batch: usize) -> Result<Vec<Task>> {
    (0..batch)
        .map(|i| gen_task_with(spec, &mut Rng::with_stream(spec.seed, (step * batch + i) as u64 + 1)))
        .collect()
}

pub fn eval_set(spec: &TaskSpec, n: usize) -> Result<Vec<Task>> {
    (0..n)
        .map(|i| gen_task_with(spec, &mut Rng::with_stream(spec.seed, EVAL_STREAM + i as u64)))
        .collect()
}

fn targets(task: &Task) -> Vec<usize> {
    task.answers.clone()
}

/// Mean masked cross-entropy over `tasks` and its gradient for every
/// parameter in `model.params` order. With no supervised position the loss
/// and every gradient are exactly zero.
pub fn loss_and_grads(model: &Model, tasks: &[Task]) -> Result<(f64, Vec<Tensor>)> {
    let total: usize = tasks.iter().map(Task::n_supervised).sum();
    let mut grads: Vec<Tensor> = model.params.tensors.values().map(|t| Tensor::zeros(t.shape())).collect();
    let mut loss = 0.0;
    for task in tasks {
        let mut tape = Tape::new(model.config.precision);
        let mut nodes = Vec::with_capacity(grads.len());
        let mut vars = std::collections::BTreeMap::new();
        for (name, t) in &model.params.tensors {
            let mut t = t.clone();
            model.config.precision.round_slice(t.data_mut());
            let n = tape.param(t);
            nodes.push(n);
            vars.insert(name.clone(), n);
        }
        let logits = forward_graph(&mut tape, &model.config, &vars, &task.tokens, None, None)?;
        let weights: Vec<f64> = task
            .answer_mask
            .iter()
            .map(|m| if *m { 1.0 / total as f64 } else { 0.0 })
            .collect();
        let l = tape.cross_entropy(&logits, targets(task), weights)?;
        loss += tape.value(&l).item();
        let g = tape.backward(l, &nodes)?;
        for (acc, n) in grads.iter_mut().zip(&nodes) {
            if let Some(gn) = g.get(*n) {
                for (a, b) in acc.data_mut().iter_mut().zip(gn.data()) {
                    *a += b;
                }
            }
        }
    }
    Ok((loss, grads))
}

/// Forward-only loss and accuracies. `token_acc` counts every next-token
/// prediction; `query_acc` only the supervised ones.
pub fn evaluate(model: &Model, tasks: &[Task]) -> Result<EvalStats> {
    let total: usize = tasks.iter().map(Task::n_supervised).sum();
    let (mut loss, mut tok_ok, mut tok_n, mut q_ok) = (0.0, 0usize, 0usize, 0usize);
    for task in tasks {
        let mut g = Eager::new(model.config.precision);
        let vars = bind(&mut g, &model.params);
        let logits = forward_graph(&mut g, &model.config, &vars, &task.tokens, None, None)?;
        let weights: Vec<f64> = task
            .answer_mask
            .iter()
            .map(|m| if *m { 1.0 / total.max(1) as f64 } else { 0.0 })
            .collect();
        loss += g.cross_entropy(&logits, targets(task), weights)?.item();
        for t in 0..task.tokens.len() - 1 {
            let pred = argmax(logits.row(t));
            tok_n += 1;
            tok_ok += usize::from(pred == task.tokens[t + 1]);
            if task.answer_mask[t] {
                q_ok += usize::from(pred == task.answers[t]);
            }
        }
    }
    Ok(EvalStats {
        loss,
        token_acc: tok_ok as f64 / tok_n.max(1) as f64,
        query_acc: if total == 0 { 0.0 } else { q_ok as f64 / total as f64 },
    })
}

/// Trains in place on `spec`, calling `emit` for every evaluation in step
/// order. See [`train_with`].
pub fn train_toy(
    model: &mut Model,
    spec: &TaskSpec,
    opts: &TrainOptions,
    dump: Option<&Path>,
    emit: impl FnMut(&RunMetrics) -> Result<()>,
) -> Result<TrainReport> {
    let evals = eval_set(spec, opts.eval_size)?;
    train_with(model, |step| train_batch(spec, step, opts.batch), &evals, opts, dump, emit)
}

/// Trains on the batches produced by `batches(step)`. Batches with no
/// supervised position leave the parameters untouched. Aborts with
/// [`Error::NonFinite`] when the training loss stops being finite, after
/// writing the offending sequence's last layer traces to `dump` when given.
pub fn train_with(
    model: &mut Model,
    mut batches: impl FnMut(usize) -> Result<Vec<Task>>,
    evals: &[Task],
    opts: &TrainOptions,
    dump: Option<&Path>,
    mut emit: impl FnMut(&RunMetrics) -> Result<()>,
) -> Result<TrainReport> {
    let start = Instant::now();
    let names: Vec<String> = model.params.tensors.keys().cloned().collect();
    let bank_ix = names.iter().position(|n| n == "bank");
    let mut adam = AdamState::default();
    let mut metrics = Vec::new();
    let mut reached = None;
    for step in 0..opts.steps {
        let batch = batches(step)?;
        let (loss, mut grads) = loss_and_grads(model, &batch)?;
        if !loss.is_finite() {
            let msg = format!("training loss {loss} at step {step}");
            if let (Some(path), Some(first)) = (dump, batch.first()) {
                dump_last_traces(model, first, path)?;
                return Err(Error::NonFinite(format!("{msg}; traces written to {}", path.display())));
            }
            return Err(Error::NonFinite(msg));
        }
        if opts.freeze_bank {
            if let Some(i) = bank_ix {
                grads[i] = Tensor::zeros(grads[i].shape());
            }
        }
        if batch.iter().any(|t| t.n_supervised() > 0) {
            clip_grad_norm(&mut grads, opts.clip);
            let cfg = AdamWConfig {
                lr: warmup_lr(step, opts.steps, opts.lr),
                ..AdamWConfig::default()
            };
            let mut params: Vec<Tensor> = std::mem::take(&mut model.params.tensors).into_values().collect();
            let res = adamw_step(&mut params, &grads, &mut adam, &cfg);
            if opts.freeze_bank {
                if let Some(i) = bank_ix {
                    params[i] = Tensor::zeros(params[i].shape());
                }
            }
            model.params.tensors = names.iter().cloned().zip(params).collect();
            res?;
        }
        let done = step + 1 == opts.steps;
        if (step + 1) % opts.eval_every.max(1) == 0 || done {
            let e = evaluate(model, evals)?;
            let m = RunMetrics {
                step: step + 1,
                loss: e.loss,
                token_acc: e.token_acc,
                query_acc: e.query_acc,
                train_loss: loss,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            emit(&m)?;
            metrics.push(m);
            if let Some(target) = opts.stop_at {
                if e.query_acc >= target {
                    reached = Some(step + 1);
                    break;
                }
            }
        }
    }
    Ok(TrainReport {
        metrics,
        reached,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

fn dump_last_traces(model: &Model, task: &Task, path: &Path) -> Result<()> {
    let (_, traces) = model.forward_traced(&task.tokens, None)?;
    let last = traces.last().map(|t| t.position);
    let tail: Vec<_> = traces.into_iter().filter(|t| Some(t.position) == last).collect();
    write_layer_traces(BufWriter::new(File::create(path)?), &tail)
}

/// Files written by [`run_to_dir`].
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub checkpoint: PathBuf,
    pub traces: Option<PathBuf>,
}

/// Trains and writes `metrics.jsonl`, `summary.csv` and `checkpoint.nrva`
/// (plus `traces.jsonl` for the first evaluation sequence when asked).
pub fn run_to_dir(
    model: &mut Model,
    spec: &TaskSpec,
    opts: &TrainOptions,
    out: &Path,
    dump_traces: bool,
) -> Result<(TrainReport, RunFiles)> {
    std::fs::create_dir_all(out)?;
    let files = RunFiles {
        metrics: out.join("metrics.jsonl"),
        summary: out.join("summary.csv"),
        checkpoint: out.join("checkpoint.nrva"),
        traces: dump_traces.then(|| out.join("traces.jsonl")),
    };
    let mut w = BufWriter::new(File::create(&files.metrics)?);
    let report = train_toy(model, spec, opts, Some(&out.join("divergence_traces.jsonl")), |m| {
        write_metrics_line(&mut w, m)
    })?;
    w.flush()?;
    write_summary(&files.summary, &[("train".to_string(), &report)])?;
    model.save(&files.checkpoint)?;
    if let Some(path) = &files.traces {
        let task = &eval_set(spec, 1)?[0];
        let (_, traces) = model.forward_traced(&task.tokens, None)?;
        write_layer_traces(BufWriter::new(File::create(path)?), &traces)?;
    }
    Ok((report, files))
}

pub fn write_metrics_line<W: Write>(w: &mut W, m: &RunMetrics) -> Result<()> {
    serde_json::to_writer(&mut *w, m)?;
    w.write_all(b"\n")?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    variant: &'a str,
    steps: usize,
    loss: f64,
    token_acc: f64,
    query_acc: f64,
    reached: String,
    wall_ms: f64,
}

/// One row per run with its final evaluation.
pub fn write_summary(path: &Path, runs: &[(String, &TrainReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(e.to_string()))?;
    for (variant, r) in runs {
        let last = r.metrics.last();
        w.serialize(SummaryRow {
            variant,
            steps: last.map_or(0, |m| m.step),
            loss: last.map_or(f64::NAN, |m| m.loss),
            token_acc: last.map_or(0.0, |m| m.token_acc),
            query_acc: last.map_or(0.0, |m| m.query_acc),
            reached: r.reached.map(|s| s.to_string()).unwrap_or_default(),
            wall_ms: r.wall_ms,
        })
        .map_err(|e| Error::Config(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
