// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sequence reversal and sorting tasks.
//!
//! Every example is laid out as `[BOS, x1..xN, SEP, y1..yN, EOS]` and padded
//! with `PAD` to the batch length. Values `1..=99` are their own token ids.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const PAD: usize = 0;
pub const BOS: usize = 100;
pub const SEP: usize = 101;
pub const EOS: usize = 102;
pub const VOCAB_SIZE: usize = 103;
pub const MIN_VALUE: usize = 1;
pub const MAX_VALUE: usize = 99;
/// Shortest and longest sequence length any sampler may request.
pub const MIN_LEN: usize = 3;
pub const MAX_LEN: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Reverse,
    Sort,
}

impl TaskKind {
    pub const ALL: [TaskKind; 2] = [TaskKind::Reverse, TaskKind::Sort];

    pub fn target(self, input: &[usize]) -> Vec<usize> {
        match self {
            TaskKind::Reverse => input.iter().rev().copied().collect(),
            TaskKind::Sort => {
                let mut out = input.to_vec();
                out.sort_unstable();
                out
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
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
            "reverse" => Ok(TaskKind::Reverse),
            "sort" => Ok(TaskKind::Sort),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

/// One (input, target) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExample {
    pub task: TaskKind,
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

/// Token ids plus a mask marking the positions that hold `y1..yN` or `EOS`,
/// i.e. the tokens the model is trained to predict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub tokens: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl TaskExample {
    pub fn new(task: TaskKind, input: Vec<usize>) -> Result<Self> {
        if input.is_empty() {
            return Err(Error::Empty("task input"));
        }
        if let Some(v) = input.iter().find(|v| !(MIN_VALUE..=MAX_VALUE).contains(*v)) {
            return Err(Error::Config(format!("value {v} outside {MIN_VALUE}..={MAX_VALUE}")));
        }
        let target = task.target(&input);
        Ok(Self {
            task,
            input,
            target,
        })
    }

    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }

    /// Unpadded token count, `2N + 3`.
    pub fn token_len(&self) -> usize {
        2 * self.len() + 3
    }

    /// `[BOS, x1..xN, SEP]`
    pub fn prompt(&self) -> Vec<usize> {
        let mut p = Vec::with_capacity(self.len() + 2);
        p.push(BOS);
        p.extend_from_slice(&self.input);
        p.push(SEP);
        p
    }

    pub fn encode(&self, pad_to: usize) -> Result<Encoded> {
        let needed = self.token_len();
        if pad_to < needed {
            return Err(Error::PadTooSmall { needed, pad_to });
        }
        let mut tokens = self.prompt();
        tokens.extend_from_slice(&self.target);
        tokens.push(EOS);
        let mut loss_mask = vec![false; pad_to];
        for m in &mut loss_mask[self.len() + 2..needed] {
            *m = true;
        }
        tokens.resize(pad_to, PAD);
        Ok(Encoded { tokens, loss_mask })
    }
}

/// Inverse of [`TaskExample::encode`]; trailing padding is ignored.
pub fn decode(task: TaskKind, tokens: &[usize]) -> Result<TaskExample> {
    let bad = |why: &str| Error::Format(format!("cannot decode {tokens:?}: {why}"));
    let used = tokens.iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1);
    let body = &tokens[..used];
    if body.len() < 5 || body.len().is_multiple_of(2) {
        return Err(bad("wrong length"));
    }
    let n = (body.len() - 3) / 2;
    if body[0] != BOS || body[n + 1] != SEP || body[used - 1] != EOS {
        return Err(bad("misplaced special token"));
    }
    let ex = TaskExample::new(task, body[1..=n].to_vec())?;
    if body[n + 2..used - 1] != ex.target[..] {
        return Err(bad("target segment does not match task"));
    }
    Ok(ex)
}

/// What to sample: `count` examples with lengths uniform in
/// `min_len..=max_len` and values i.i.d. uniform in `1..=99`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub task: TaskKind,
    pub min_len: usize,
    pub max_len: usize,
    pub count: usize,
    pub seed: u64,
}

impl SampleSpec {
    pub fn fixed(task: TaskKind, len: usize, count: usize, seed: u64) -> Self {
        Self {
            task,
            min_len: len,
            max_len: len,
            count,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("sample count must be >= 1".into()));
        }
        if self.min_len < MIN_LEN || self.max_len > MAX_LEN || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "lengths {}..={} outside {MIN_LEN}..={MAX_LEN}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

pub fn generate(spec: &SampleSpec) -> Result<Vec<TaskExample>> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, "examples", 0);
    let mut out = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let n = rng.random_range(spec.min_len..=spec.max_len);
        let input = (0..n).map(|_| rng.random_range(MIN_VALUE..=MAX_VALUE)).collect();
        out.push(TaskExample::new(spec.task, input)?);
    }
    Ok(out)
}

/// Rectangular batch of token ids, row-major `[batch, seq]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
    /// Position index of each row's first token; empty means all zero.
    pub offsets: Vec<usize>,
}

impl TokenBatch {
    pub fn new(rows: &[Vec<usize>]) -> Result<Self> {
        let seq = rows.first().ok_or(Error::Empty("token batch"))?.len();
        if seq == 0 || rows.iter().any(|r| r.len() != seq) {
            return Err(Error::shape("token batch", "rows must be non-empty and equal length"));
        }
        Ok(Self {
            batch: rows.len(),
            seq,
            ids: rows.concat(),
            offsets: Vec::new(),
        })
    }

    /// Position index of row `b`'s first token.
    pub fn offset(&self, b: usize) -> usize {
        self.offsets.get(b).copied().unwrap_or(0)
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }
}

/// Teacher-forced inputs and next-token targets; `PAD` marks ignored targets.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub inputs: TokenBatch,
    pub targets: Vec<usize>,
}

/// Pads every example to the longest one and shifts by one position.
pub fn make_batch(examples: &[TaskExample]) -> Result<TrainBatch> {
    let pad_to = examples
        .iter()
        .map(TaskExample::token_len)
        .max()
        .ok_or(Error::Empty("batch examples"))?;
    let mut rows = Vec::with_capacity(examples.len());
    let mut targets = Vec::with_capacity(examples.len() * (pad_to - 1));
    for ex in examples {
        let enc = ex.encode(pad_to)?;
        rows.push(enc.tokens[..pad_to - 1].to_vec());
        for t in 1..pad_to {
            targets.push(if enc.loss_mask[t] { enc.tokens[t] } else { PAD });
        }
    }
    Ok(TrainBatch {
        inputs: TokenBatch::new(&rows)?,
        targets,
    })
}

/// Anything that can extend equal-length prompts greedily.
pub trait Decoder {
    /// Appends `steps` argmax tokens to every prompt and returns only the
    /// generated tokens.
    fn continue_greedy(&self, prompts: &[Vec<usize>], steps: usize) -> Result<Vec<Vec<usize>>>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchOptions {
    /// Also require the token after the N outputs to be `EOS`.
    pub require_eos: bool,
}

/// Fraction of examples whose greedy continuation reproduces the target.
pub fn exact_match_accuracy<D: Decoder + ?Sized>(
    decoder: &D,
    examples: &[TaskExample],
    opts: MatchOptions,
) -> Result<f64> {
    let first = examples.first().ok_or(Error::Empty("evaluation examples"))?;
    if examples.iter().any(|e| e.task != first.task) {
        return Err(Error::Config("evaluation examples mix tasks".into()));
    }
    let mut by_len: BTreeMap<usize, Vec<&TaskExample>> = BTreeMap::new();
    for ex in examples {
        by_len.entry(ex.len()).or_default().push(ex);
    }
    let mut correct = 0usize;
    for (n, group) in by_len {
        let prompts: Vec<Vec<usize>> = group.iter().map(|e| e.prompt()).collect();
        let steps = n + usize::from(opts.require_eos);
        let outputs = decoder.continue_greedy(&prompts, steps)?;
        for (ex, out) in group.iter().zip(&outputs) {
            let values_ok = out.len() >= n && out[..n] == ex.target[..];
            let eos_ok = !opts.require_eos || out.get(n) == Some(&EOS);
            correct += usize::from(values_ok && eos_ok);
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Writes one `task,N,input,target` line per example; values are
/// space-separated.
pub fn write_dataset<W: Write>(examples: &[TaskExample], mut out: W) -> std::io::Result<()> {
    let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ");
    for ex in examples {
        writeln!(out, "{},{},{},{}", ex.task, ex.len(), join(&ex.input), join(&ex.target))?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<TaskExample>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<dataset>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("dataset line {}: '{line}'", i + 1));
        let fields: Vec<&str> = line.split(',').collect();
        let [task, n, input, target] = fields[..] else {
            return Err(bad());
        };
        let parse = |s: &str| -> Result<Vec<usize>> {
            s.split_whitespace().map(|v| v.parse().map_err(|_| bad())).collect()
        };
        let ex = TaskExample::new(task.parse()?, parse(input)?)?;
        if n.parse::<usize>().map_err(|_| bad())? != ex.len() || parse(target)? != ex.target {
            return Err(bad());
        }
        out.push(ex);
    }
    Ok(out)
}
