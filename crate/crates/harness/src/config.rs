//! Flat `key = value` run configuration.
//!
//! Keys are the fields of [`ModelConfig`] and [`TaskSpec`]; `vocab` and `seed`
//! are shared by both. Blank lines and `#` comments are ignored. Unknown or
//! repeated keys are errors.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nirvana_core::model::ModelConfig;
use nirvana_core::{Error, Precision, Result};

use crate::tasks::{TaskKind, TaskSpec};

pub const SEED_ENV: &str = "NIRVANA_SEED";
pub const PRECISION_ENV: &str = "NIRVANA_PRECISION";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
}

impl RunConfig {
    /// The reference model on the reference recall task.
    pub fn reference() -> Self {
        let mut c = Self::default();
        c.set("vocab", "64").unwrap();
        c
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::reference();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` given twice", i + 1)));
            }
            c.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `NIRVANA_SEED` and `NIRVANA_PRECISION` when set.
    pub fn with_env(mut self) -> Result<Self> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.set("seed", &s)?;
        }
        if let Ok(p) = std::env::var(PRECISION_ENV) {
            self.set("precision", &p)?;
        }
        Ok(self)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.task;
        match key {
            "vocab" => {
                m.vocab = num(key, value)?;
                t.vocab = m.vocab;
            }
            "seed" => {
                m.seed = num(key, value)?;
                t.seed = m.seed;
            }
            "d_model" => m.d_model = num(key, value)?,
            "n_layers" => m.n_layers = num(key, value)?,
            "n_prelude" => m.n_prelude = num(key, value)?,
            "heads" => m.heads = num(key, value)?,
            "window" => m.window = num(key, value)?,
            "d_trig" => m.d_trig = num(key, value)?,
            "k" => m.k = num(key, value)?,
            "rank" => m.rank = num(key, value)?,
            "rope_enabled" => m.rope_enabled = num(key, value)?,
            "precision" => m.precision = Precision::from_str(value)?,
            "kind" => t.kind = TaskKind::from_str(value)?,
            "seq_len" => t.seq_len = num(key, value)?,
            "n_pairs" => t.n_pairs = num(key, value)?,
            "filler_entropy" => t.filler_entropy = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Renders every key; `parse(render())` reproduces the config.
    pub fn render(&self) -> String {
        let (m, t) = (&self.model, &self.task);
        let mut s = String::new();
        let pairs: [(&str, String); 16] = [
            ("vocab", m.vocab.to_string()),
            ("d_model", m.d_model.to_string()),
            ("n_layers", m.n_layers.to_string()),
            ("n_prelude", m.n_prelude.to_string()),
            ("heads", m.heads.to_string()),
            ("window", m.window.to_string()),
            ("d_trig", m.d_trig.to_string()),
            ("k", m.k.to_string()),
            ("rank", m.rank.to_string()),
            ("rope_enabled", m.rope_enabled.to_string()),
            ("seed", m.seed.to_string()),
            ("precision", m.precision.to_string()),
            ("kind", t.kind.to_string()),
            ("seq_len", t.seq_len.to_string()),
            ("n_pairs", t.n_pairs.to_string()),
            ("filler_entropy", format!("{:?}", t.filler_entropy)),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}
