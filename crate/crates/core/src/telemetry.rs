//! Training-dynamics telemetry and greedy evaluation reports.

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::entropy::entropy_unchecked;
use crate::error::{Error, Result};
use crate::grpo::RolloutGroup;
use crate::model::{self, Generation, PolicyParams};
use crate::task::{parse_answer, verify, Problem, TokenId};
use crate::traces::TraceRecord;

/// Length statistics of one rollout group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupLengthStats {
    pub clip_ratio: f64,
    pub mean_length: f64,
    pub min_length: usize,
}

/// Lengths count generated tokens including `END`; `clip_ratio` is the
/// fraction of responses that hit `max_len` without finishing.
pub fn group_length_stats(group: &RolloutGroup, max_len: usize) -> GroupLengthStats {
    let n = group.responses.len();
    if n == 0 {
        return GroupLengthStats {
            clip_ratio: 0.0,
            mean_length: 0.0,
            min_length: 0,
        };
    }
    let truncated = group.responses.iter().filter(|r| r.truncated).count();
    debug_assert!(group
        .responses
        .iter()
        .all(|r| !r.truncated || r.tokens.len() == max_len));
    let total: usize = group.responses.iter().map(|r| r.tokens.len()).sum();
    GroupLengthStats {
        clip_ratio: truncated as f64 / n as f64,
        mean_length: total as f64 / n as f64,
        min_length: group.responses.iter().map(|r| r.tokens.len()).min().unwrap_or(0),
    }
}

/// One line of the training telemetry stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub mean_reward: f64,
    pub accuracy: f64,
    pub mean_length: f64,
    pub min_length: usize,
    pub clip_ratio: f64,
    pub mean_teca_last: f64,
    pub objective: f64,
    pub kl_mean: f64,
    #[serde(default)]
    pub grad_norm: f64,
    #[serde(default)]
    pub active_groups: usize,
}

impl TelemetryRecord {
    pub fn is_finite(&self) -> bool {
        [
            self.mean_reward,
            self.accuracy,
            self.mean_length,
            self.clip_ratio,
            self.mean_teca_last,
            self.objective,
            self.kl_mean,
            self.grad_norm,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Named numeric series for plotting.
    pub fn field(&self, name: &str) -> Option<f64> {
        Some(match name {
            "mean_reward" => self.mean_reward,
            "accuracy" => self.accuracy,
            "mean_length" => self.mean_length,
            "min_length" => self.min_length as f64,
            "clip_ratio" => self.clip_ratio,
            "mean_teca_last" => self.mean_teca_last,
            "objective" => self.objective,
            "kl_mean" => self.kl_mean,
            "grad_norm" => self.grad_norm,
            _ => return None,
        })
    }
}

/// Mean of `field` over all records of `epoch`.
pub fn epoch_mean(records: &[TelemetryRecord], epoch: usize, field: &str) -> Option<f64> {
    let vals: Vec<f64> = records
        .iter()
        .filter(|r| r.epoch == epoch)
        .filter_map(|r| r.field(field))
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn write_telemetry_line<W: Write>(w: &mut W, record: &TelemetryRecord) -> std::io::Result<()> {
    let line = serde_json::to_string(record).expect("telemetry serializes");
    writeln!(w, "{line}")
}

pub fn read_telemetry(path: &Path) -> Result<Vec<TelemetryRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Record {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Per-difficulty slice of an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyEval {
    pub difficulty: usize,
    pub problems: usize,
    pub accuracy: f64,
    pub mean_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub problems: usize,
    pub accuracy: f64,
    pub mean_length: f64,
    /// `100 * (baseline_len - len) / baseline_len`, once a baseline is attached.
    pub delta_length_pct: Option<f64>,
    pub baseline: Option<String>,
    pub by_difficulty: Vec<DifficultyEval>,
}

/// Percentage reduction of `length` relative to `baseline_length`.
pub fn delta_length_pct(baseline_length: f64, length: f64) -> f64 {
    100.0 * (baseline_length - length) / baseline_length
}

impl EvalReport {
    pub fn with_baseline(mut self, baseline: &EvalReport) -> Self {
        self.delta_length_pct = Some(delta_length_pct(baseline.mean_length, self.mean_length));
        self.baseline = Some(baseline.name.clone());
        self
    }

    pub fn difficulty(&self, k: usize) -> Option<&DifficultyEval> {
        self.by_difficulty.iter().find(|d| d.difficulty == k)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        crate::checkpoint::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Record {
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Anything that can answer a prompt greedily.
pub trait GreedyPolicy: Sync {
    fn greedy(&self, prompt: &[TokenId], max_len: usize) -> Result<Generation>;
}

impl GreedyPolicy for PolicyParams {
    fn greedy(&self, prompt: &[TokenId], max_len: usize) -> Result<Generation> {
        model::greedy_response(self, prompt, max_len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    /// One record per problem with per-step entropies at temperature 1.
    pub traces: Vec<TraceRecord>,
}

/// Greedy decoding over a fixed problem set. Deterministic in
/// `(policy, problems)`.
pub fn evaluate<P: GreedyPolicy + ?Sized>(
    policy: &P,
    problems: &[Problem],
    max_len: usize,
    name: &str,
) -> Result<Evaluation> {
    if problems.is_empty() {
        return Err(Error::invalid("evaluation needs at least one problem"));
    }
    let rows: Vec<Result<(f64, usize, TraceRecord)>> = problems
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let g = policy.greedy(&p.prompt_tokens, max_len)?;
            let correct = if g.truncated { 0.0 } else { verify(&parse_answer(&g.tokens), p) };
            let entropies = g.logits.iter().map(|z| entropy_unchecked(z, 1.0)).collect();
            Ok((
                correct,
                g.tokens.len(),
                TraceRecord {
                    id: Some(format!("eval-{i}")),
                    correct: Some(correct == 1.0),
                    difficulty: Some(p.difficulty),
                    entropies: Some(entropies),
                    logits: None,
                    temperature: None,
                },
            ))
        })
        .collect();
    let mut traces = Vec::with_capacity(problems.len());
    let mut acc = 0.0;
    let mut len = 0usize;
    let max_k = problems.iter().map(|p| p.difficulty).max().unwrap_or(0);
    let mut per_k = vec![(0usize, 0.0f64, 0usize); max_k + 1];
    for (row, p) in rows.into_iter().zip(problems) {
        let (c, l, t) = row?;
        acc += c;
        len += l;
        let slot = &mut per_k[p.difficulty];
        slot.0 += 1;
        slot.1 += c;
        slot.2 += l;
        traces.push(t);
    }
    let n = problems.len() as f64;
    let by_difficulty = per_k
        .into_iter()
        .enumerate()
        .filter(|(_, s)| s.0 > 0)
        .map(|(k, (count, a, l))| DifficultyEval {
            difficulty: k,
            problems: count,
            accuracy: a / count as f64,
            mean_length: l as f64 / count as f64,
        })
        .collect();
    Ok(Evaluation {
        report: EvalReport {
            name: name.to_string(),
            problems: problems.len(),
            accuracy: acc / n,
            mean_length: len as f64 / n,
            delta_length_pct: None,
            baseline: None,
            by_difficulty,
        },
        traces,
    })
}
