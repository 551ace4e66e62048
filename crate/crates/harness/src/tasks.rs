//! Synthetic retrieval and copying tasks.
//!
//! Token ids 0 and 1 are reserved (`BOS`, `SEP`). The remaining ids are split
//! into disjoint key, value and filler alphabets, so a parser can recover the
//! answers from the stream alone.

use std::fmt;
use std::str::FromStr;

use nirvana_core::{Error, Result, Rng};
use serde::{Deserialize, Serialize};

pub const BOS: usize = 0;
pub const SEP: usize = 1;
const RESERVED: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    AssocRecall,
    SNiahToy,
    Copy,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::AssocRecall => "assoc_recall",
            TaskKind::SNiahToy => "s_niah_toy",
            TaskKind::Copy => "copy",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "assoc_recall" => Ok(TaskKind::AssocRecall),
            "s_niah_toy" => Ok(TaskKind::SNiahToy),
            "copy" => Ok(TaskKind::Copy),
            _ => Err(Error::Config(format!("unknown task `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    pub n_pairs: usize,
    /// Bits of entropy per filler token; the filler alphabet has
    /// `round(2^filler_entropy)` symbols, capped by what the vocab leaves.
    pub filler_entropy: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::AssocRecall,
            vocab: 64,
            seq_len: 128,
            n_pairs: 8,
            filler_entropy: 4.0,
            seed: 0,
        }
    }
}

/// Disjoint token ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Alphabet {
    pub keys: (usize, usize),
    pub values: (usize, usize),
    pub filler: (usize, usize),
}

impl Alphabet {
    pub fn for_spec(spec: &TaskSpec) -> Result<Self> {
        if spec.vocab < RESERVED + 3 {
            return Err(Error::Config(format!("vocab {} leaves no room for the alphabets", spec.vocab)));
        }
        let free = spec.vocab - RESERVED;
        let third = free / 3;
        let keys = (RESERVED, RESERVED + third);
        let values = (keys.1, keys.1 + third);
        let avail = spec.vocab - values.1;
        let n_fill = if spec.filler_entropy.is_finite() && spec.filler_entropy > 0.0 {
            (spec.filler_entropy.exp2().round() as usize).clamp(1, avail)
        } else {
            1
        };
        Ok(Self {
            keys,
            values,
            filler: (values.1, values.1 + n_fill),
        })
    }

    fn draw(range: (usize, usize), rng: &mut Rng) -> usize {
        range.0 + rng.below(range.1 - range.0)
    }

    /// Copy strings draw from keys ∪ values.
    fn content(&self) -> (usize, usize) {
        (self.keys.0, self.values.1)
    }
}

/// One generated sequence. `answers[t]` is the supervised next token at
/// position `t` where `answer_mask[t]`, and 0 elsewhere.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Task {
    pub tokens: Vec<usize>,
    pub answer_mask: Vec<bool>,
    pub answers: Vec<usize>,
}

impl Task {
    fn from_stream(tokens: Vec<usize>, supervised: &[usize]) -> Self {
        let mut answer_mask = vec![false; tokens.len()];
        let mut answers = vec![0; tokens.len()];
        for &t in supervised {
            answer_mask[t] = true;
            answers[t] = tokens[t + 1];
        }
        Self {
            tokens,
            answer_mask,
            answers,
        }
    }

    pub fn masked_answers(&self) -> Vec<usize> {
        self.answers
            .iter()
            .zip(&self.answer_mask)
            .filter(|(_, m)| **m)
            .map(|(a, _)| *a)
            .collect()
    }

    pub fn n_supervised(&self) -> usize {
        self.answer_mask.iter().filter(|m| **m).count()
    }
}

/// Generates one task instance from `spec.seed`.
pub fn gen_task(spec: &TaskSpec) -> Result<Task> {
    gen_task_with(spec, &mut Rng::new(spec.seed))
}

pub fn gen_task_with(spec: &TaskSpec, rng: &mut Rng) -> Result<Task> {
    let a = Alphabet::for_spec(spec)?;
    let layout = |need: usize| -> Result<()> {
        if spec.seq_len < need {
            Err(Error::Config(format!(
                "layout error: {} needs seq_len >= {need}, got {}",
                spec.kind, spec.seq_len
            )))
        } else {
            Ok(())
        }
    };
    match spec.kind {
        TaskKind::AssocRecall => {
            let n = spec.n_pairs;
            if n == 0 || n > a.keys.1 - a.keys.0 {
                return Err(Error::Config(format!(
                    "layout error: n_pairs {n} with {} distinct keys",
                    a.keys.1 - a.keys.0
                )));
            }
            // BOS, pairs, SEP, every key queried once
            layout(1 + 2 * n + 1 + 2 * n)?;
            let mut keys: Vec<usize> = (a.keys.0..a.keys.1).collect();
            rng.shuffle(&mut keys);
            keys.truncate(n);
            let values: Vec<usize> = (0..n).map(|_| Alphabet::draw(a.values, rng)).collect();
            let mut s = vec![BOS];
            for i in 0..n {
                s.push(keys[i]);
                s.push(values[i]);
            }
            let n_fill = spec.seq_len - (1 + 4 * n + 1);
            for _ in 0..n_fill {
                s.push(Alphabet::draw(a.filler, rng));
            }
            s.push(SEP);
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            let mut sup = Vec::new();
            for i in order {
                sup.push(s.len());
                s.push(keys[i]);
                s.push(values[i]);
            }
            Ok(Task::from_stream(s, &sup))
        }
        TaskKind::SNiahToy => {
            // BOS, needle pair, SEP, key, value
            layout(6)?;
            let key = Alphabet::draw(a.keys, rng);
            let value = Alphabet::draw(a.values, rng);
            let hay = spec.seq_len - 6;
            let at = rng.below(hay + 1);
            let mut s = vec![BOS];
            for i in 0..=hay {
                if i == at {
                    s.push(key);
                    s.push(value);
                }
                if i < hay {
                    s.push(Alphabet::draw(a.filler, rng));
                }
            }
            s.push(SEP);
            let q = s.len();
            s.push(key);
            s.push(value);
            Ok(Task::from_stream(s, &[q]))
        }
        TaskKind::Copy => {
            // BOS, string, SEP, string
            layout(4)?;
            let n = (spec.seq_len - 2) / 2;
            let body: Vec<usize> = (0..n).map(|_| Alphabet::draw(a.content(), rng)).collect();
            let mut s = vec![BOS];
            s.extend(&body);
            let sep = s.len();
            s.push(SEP);
            s.extend(&body);
            let sup: Vec<usize> = (sep..sep + n).collect();
            Ok(Task::from_stream(s, &sup))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_supervises_the_repeat() {
        let spec = TaskSpec {
            kind: TaskKind::Copy,
            seq_len: 6,
            ..TaskSpec::default()
        };
        let t = gen_task(&spec).unwrap();
        assert_eq!(t.tokens.len(), 6);
        assert_eq!(t.tokens[3], SEP);
        assert_eq!(t.masked_answers(), t.tokens[1..3].to_vec());
        assert_eq!(t.answer_mask, vec![false, false, false, true, true, false]);
    }

    #[test]
    fn single_pair_recall_targets_its_value() {
        let spec = TaskSpec {
            n_pairs: 1,
            seq_len: 16,
            ..TaskSpec::default()
        };
        let t = gen_task(&spec).unwrap();
        assert_eq!(t.masked_answers(), vec![t.tokens[2]]);
        assert_eq!(t.tokens.len(), 16);
    }

    #[test]
    fn infeasible_layout_is_rejected() {
        let spec = TaskSpec {
            seq_len: 20,
            ..TaskSpec::default()
        };
        assert!(gen_task(&spec).is_err());
        let spec = TaskSpec {
            n_pairs: 40,
            ..TaskSpec::default()
        };
        assert!(gen_task(&spec).is_err());
    }

    #[test]
    fn alphabets_are_disjoint() {
        let a = Alphabet::for_spec(&TaskSpec::default()).unwrap();
        assert_eq!(a.keys, (2, 22));
        assert_eq!(a.values, (22, 42));
        assert_eq!(a.filler, (42, 58));
    }
}
