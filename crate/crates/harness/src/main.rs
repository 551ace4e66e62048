use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nirvana_core::model::Model;
use nirvana_core::rules::{self, sample, RuleId, RuleOptions};
use nirvana_core::Rng;
use nirvana_harness::ablate::{ablate_to_dir, Variant};
use nirvana_harness::config::RunConfig;
use nirvana_harness::gradcheck::{gradcheck_with, Scope};
use nirvana_harness::rule_diff::rule_diff;
use nirvana_harness::tasks::{TaskKind, TaskSpec};
use nirvana_harness::train::{eval_set, evaluate, run_to_dir, TrainOptions};

#[derive(Parser)]
#[command(name = "nirvana", version, about = "Memory-rule zoo, hybrid block and toy trainer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Memory-update rule tools.
    Rules {
        #[command(subcommand)]
        cmd: RulesCmd,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value = "trigger")]
        scope: Scope,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Perturb every analytic gradient (harness self-test).
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Train on a synthetic task.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        task: Option<TaskKind>,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: OptArgs,
        /// Also write layer traces for the first evaluation sequence.
        #[arg(long)]
        dump_traces: bool,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "assoc_recall")]
        task: TaskKind,
        #[arg(long, default_value_t = 128)]
        len: usize,
        #[arg(long, default_value_t = 8)]
        n_pairs: usize,
        #[arg(long, default_value_t = 32)]
        eval_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train several variants on the same data and sweep evaluation length.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "full,no_trigger,rope_on")]
        variants: String,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value = "ablate_out")]
        out: PathBuf,
        #[command(flatten)]
        opts: OptArgs,
    },
}

#[derive(Subcommand)]
enum RulesCmd {
    /// Run a rule against its oracles and reduction identities.
    Diff {
        #[arg(long)]
        rule: String,
        #[arg(long, default_value_t = 32)]
        len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        dk: usize,
        #[arg(long, default_value_t = 4)]
        dv: usize,
        /// Write the scan's per-token trace as JSONL.
        #[arg(long)]
        dump_trace: Option<PathBuf>,
    },
}

#[derive(Args)]
struct OptArgs {
    #[arg(long, default_value_t = TrainOptions::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = TrainOptions::default().batch)]
    batch: usize,
    #[arg(long, default_value_t = TrainOptions::default().eval_every)]
    eval_every: usize,
    #[arg(long, default_value_t = TrainOptions::default().eval_size)]
    eval_size: usize,
    /// Stop at the first evaluation whose query accuracy reaches this value.
    #[arg(long)]
    stop_at: Option<f64>,
}

impl OptArgs {
    fn options(&self, steps: usize) -> TrainOptions {
        TrainOptions {
            steps,
            lr: self.lr,
            batch: self.batch,
            eval_every: self.eval_every,
            eval_size: self.eval_size,
            stop_at: self.stop_at,
            ..TrainOptions::default()
        }
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    let c = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::reference(),
    };
    Ok(c.with_env()?)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Rules {
            cmd:
                RulesCmd::Diff {
                    rule,
                    len,
                    seed,
                    dk,
                    dv,
                    dump_trace,
                },
        } => {
            let rule: RuleId = rule.parse()?;
            let report = rule_diff(rule, len, dk, dv, seed)?;
            print!("{report}");
            if let Some(path) = dump_trace {
                let seq = sample::sequence(rule, len, dk, dv, &mut Rng::new(seed));
                let opts = RuleOptions {
                    window: rule.is_set_rule().then_some(len),
                    ..RuleOptions::default()
                };
                let trace = rules::trace_with(rule, &seq, &opts)?;
                rules::write_trace_jsonl(&trace, BufWriter::new(File::create(&path)?))?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Gradcheck {
            scope,
            seeds,
            tol,
            corrupt,
        } => {
            let report = if corrupt {
                gradcheck_with(scope, seeds, tol, &|_, g| *g = g.map(|x| 1.01 * x + 1e-2))?
            } else {
                gradcheck_with(scope, seeds, tol, &|_, _| {})?
            };
            println!("{report}");
            Ok(if report.pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Cmd::Train {
            config,
            task,
            steps,
            out,
            opts,
            dump_traces,
        } => {
            let mut c = load_config(config.as_ref())?;
            if let Some(k) = task {
                c.task.kind = k;
            }
            let mut model = Model::init(c.model.clone())?;
            let (report, files) = run_to_dir(&mut model, &c.task, &opts.options(steps), &out, dump_traces)?;
            if let Some(m) = report.metrics.last() {
                println!(
                    "step {} loss {:.4} token_acc {:.4} query_acc {:.4}",
                    m.step, m.loss, m.token_acc, m.query_acc
                );
            }
            if let Some(s) = report.reached {
                println!("reached target at step {s}");
            }
            println!("wrote {} and {}", files.metrics.display(), files.checkpoint.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval {
            ckpt,
            task,
            len,
            n_pairs,
            eval_size,
            seed,
        } => {
            let model = Model::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let spec = TaskSpec {
                kind: task,
                vocab: model.config.vocab,
                seq_len: len,
                n_pairs,
                seed,
                ..TaskSpec::default()
            };
            let e = evaluate(&model, &eval_set(&spec, eval_size)?)?;
            println!(
                "{}",
                serde_json::json!({"task": task, "len": len, "loss": e.loss, "token_acc": e.token_acc, "query_acc": e.query_acc})
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Ablate {
            config,
            variants,
            steps,
            out,
            opts,
        } => {
            let c = load_config(config.as_ref())?;
            let vs = Variant::parse_list(&variants)?;
            if vs.is_empty() {
                bail!("no variants given");
            }
            let runs = ablate_to_dir(&c.model, &c.task, &vs, &opts.options(steps), &out)?;
            for r in &runs {
                for p in &r.sweep {
                    println!(
                        "{:<10} len {:>4} loss {:.4} query_acc {:.4} state {} (bound {})",
                        r.variant, p.eval_len, p.loss, p.query_acc, p.state_size, p.state_bound
                    );
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
