//! Synthetic verifiable reasoning task: a chain of modular add/sub/mul
//! operations applied left to right to a start value.
//!
//! Prompt layout (values written as decimal digit runs):
//!
//! ```text
//! BOS s op1 a1 ... opk ak [PAD PAD]* EQ
//! ```
//!
//! Unused operation slots up to the configured maximum difficulty are filled
//! with `PAD PAD`, so every prompt of a task family has the same length when
//! all values are single digits.

use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::{accuracy_reward, Answer};

pub type TokenId = usize;

/// Token ids. Digits map to themselves.
pub mod tok {
    use super::TokenId;

    pub const PLUS: TokenId = 10;
    pub const MINUS: TokenId = 11;
    pub const TIMES: TokenId = 12;
    pub const EQ: TokenId = 13;
    pub const BOS: TokenId = 14;
    pub const PAD: TokenId = 15;
    pub const THINK: TokenId = 16;
    pub const WAIT: TokenId = 17;
    pub const ANSWER: TokenId = 18;
    pub const END: TokenId = 19;
}

pub const VOCAB_SIZE: usize = 20;

pub fn is_digit(t: TokenId) -> bool {
    t < 10
}

pub fn token_name(t: TokenId) -> String {
    match t {
        0..=9 => t.to_string(),
        tok::PLUS => "+".into(),
        tok::MINUS => "-".into(),
        tok::TIMES => "*".into(),
        tok::EQ => "=".into(),
        tok::BOS => "BOS".into(),
        tok::PAD => "PAD".into(),
        tok::THINK => "THINK".into(),
        tok::WAIT => "WAIT".into(),
        tok::ANSWER => "ANSWER".into(),
        tok::END => "END".into(),
        other => format!("<{other}>"),
    }
}

pub fn render(tokens: &[TokenId]) -> String {
    tokens.iter().map(|&t| token_name(t)).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    pub const ALL: [Op; 3] = [Op::Add, Op::Sub, Op::Mul];

    pub fn token(self) -> TokenId {
        match self {
            Op::Add => tok::PLUS,
            Op::Sub => tok::MINUS,
            Op::Mul => tok::TIMES,
        }
    }

    pub fn from_token(t: TokenId) -> Option<Op> {
        match t {
            tok::PLUS => Some(Op::Add),
            tok::MINUS => Some(Op::Sub),
            tok::TIMES => Some(Op::Mul),
            _ => None,
        }
    }

    pub fn apply(self, lhs: u64, rhs: u64, modulus: u64) -> u64 {
        let (l, r) = (lhs % modulus, rhs % modulus);
        match self {
            Op::Add => (l + r) % modulus,
            Op::Sub => (l + modulus - r) % modulus,
            Op::Mul => (l * r) % modulus,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub modulus: u64,
    pub min_difficulty: usize,
    pub max_difficulty: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            modulus: 10,
            min_difficulty: 1,
            max_difficulty: 4,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modulus < 2 || self.modulus > 1_000_000 {
            return Err(Error::invalid(format!("modulus {} out of range [2, 1e6]", self.modulus)));
        }
        if self.min_difficulty == 0 || self.min_difficulty > self.max_difficulty {
            return Err(Error::invalid(format!(
                "difficulty range [{}, {}] is empty or starts at 0",
                self.min_difficulty, self.max_difficulty
            )));
        }
        Ok(())
    }

    /// Digits needed to write the largest residue.
    pub fn value_width(&self) -> usize {
        digits_of(self.modulus - 1).len()
    }

    pub fn max_prompt_len(&self) -> usize {
        let w = self.value_width();
        2 + w + self.max_difficulty * (1 + w)
    }
}

/// One task instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    #[serde(rename = "prompt")]
    pub prompt_tokens: Vec<TokenId>,
    pub ground_truth: u64,
    pub difficulty: usize,
}

/// Operations decoded back out of a prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chain {
    pub start: u64,
    pub steps: Vec<(Op, u64)>,
}

impl Chain {
    pub fn evaluate(&self, modulus: u64) -> u64 {
        self.residues(modulus).last().copied().unwrap_or(self.start % modulus)
    }

    /// Intermediate values after each operation.
    pub fn residues(&self, modulus: u64) -> Vec<u64> {
        let mut acc = self.start % modulus;
        self.steps
            .iter()
            .map(|&(op, v)| {
                acc = op.apply(acc, v, modulus);
                acc
            })
            .collect()
    }
}

pub fn digits_of(mut v: u64) -> Vec<TokenId> {
    if v == 0 {
        return vec![0];
    }
    let mut out = Vec::new();
    while v > 0 {
        out.push((v % 10) as TokenId);
        v /= 10;
    }
    out.reverse();
    out
}

pub fn generate_problem<R: Rng + ?Sized>(rng: &mut R, difficulty: usize, cfg: &TaskConfig) -> Problem {
    let m = cfg.modulus;
    let chain = Chain {
        start: rng.gen_range(0..m),
        steps: (0..difficulty)
            .map(|_| (Op::ALL[rng.gen_range(0..3)], rng.gen_range(0..m)))
            .collect(),
    };
    build_problem(&chain, cfg)
}

/// Samples the difficulty uniformly from the configured range.
pub fn sample_problem<R: Rng + ?Sized>(rng: &mut R, cfg: &TaskConfig) -> Problem {
    let k = rng.gen_range(cfg.min_difficulty..=cfg.max_difficulty);
    generate_problem(rng, k, cfg)
}

pub fn build_problem(chain: &Chain, cfg: &TaskConfig) -> Problem {
    let mut prompt = vec![tok::BOS];
    prompt.extend(digits_of(chain.start));
    for &(op, v) in &chain.steps {
        prompt.push(op.token());
        prompt.extend(digits_of(v));
    }
    for _ in chain.steps.len()..cfg.max_difficulty {
        prompt.extend([tok::PAD, tok::PAD]);
    }
    prompt.push(tok::EQ);
    Problem {
        prompt_tokens: prompt,
        ground_truth: chain.evaluate(cfg.modulus),
        difficulty: chain.steps.len(),
    }
}

/// Decodes the chain a prompt encodes.
pub fn parse_prompt(prompt: &[TokenId]) -> Result<Chain> {
    let bad = |msg: &str| Error::invalid(format!("malformed prompt ({msg}): {}", render(prompt)));
    let mut it = prompt.iter().copied().peekable();
    if it.next() != Some(tok::BOS) {
        return Err(bad("missing BOS"));
    }
    let read_number = |it: &mut std::iter::Peekable<std::iter::Copied<std::slice::Iter<'_, TokenId>>>| {
        let mut v: Option<u64> = None;
        while let Some(&t) = it.peek() {
            if !is_digit(t) {
                break;
            }
            it.next();
            v = Some(v.unwrap_or(0).checked_mul(10)?.checked_add(t as u64)?);
        }
        v
    };
    let start = read_number(&mut it).ok_or_else(|| bad("missing start value"))?;
    let mut steps = Vec::new();
    loop {
        match it.next() {
            Some(t) if Op::from_token(t).is_some() => {
                let v = read_number(&mut it).ok_or_else(|| bad("missing operand"))?;
                steps.push((Op::from_token(t).unwrap(), v));
            }
            Some(tok::PAD) => {}
            Some(tok::EQ) => break,
            _ => return Err(bad("unexpected token")),
        }
    }
    if it.next().is_some() {
        return Err(bad("tokens after EQ"));
    }
    Ok(Chain { start, steps })
}

impl Problem {
    pub fn chain(&self) -> Result<Chain> {
        parse_prompt(&self.prompt_tokens)
    }

    /// The intermediate residues, recomputed from the prompt.
    pub fn residues(&self, modulus: u64) -> Result<Vec<u64>> {
        Ok(self.chain()?.residues(modulus))
    }
}

/// The shortest correct response: `ANSWER digits END`.
pub fn shortest_response(problem: &Problem) -> Vec<TokenId> {
    let mut out = vec![tok::ANSWER];
    out.extend(digits_of(problem.ground_truth));
    out.push(tok::END);
    out
}

/// Step-by-step response: `THINK s (op a r)* ANSWER r END`.
pub fn full_reasoning_response(problem: &Problem, modulus: u64) -> Result<Vec<TokenId>> {
    let chain = problem.chain()?;
    let mut out = vec![tok::THINK];
    out.extend(digits_of(chain.start % modulus));
    for ((op, v), r) in chain.steps.iter().zip(chain.residues(modulus)) {
        out.push(op.token());
        out.extend(digits_of(*v));
        out.extend(digits_of(r));
    }
    out.extend(shortest_response(problem));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedAnswer {
    pub value: Answer,
    pub answer_span: Option<Range<usize>>,
}

/// Reads the digit run right after the last `ANSWER` token. Total over any
/// token sequence: no delimiter, an empty run or an overflowing run all give
/// [`Answer::Absent`].
pub fn parse_answer(response: &[TokenId]) -> ParsedAnswer {
    let Some(pos) = response.iter().rposition(|&t| t == tok::ANSWER) else {
        return ParsedAnswer {
            value: Answer::Absent,
            answer_span: None,
        };
    };
    let start = pos + 1;
    let end = response[start..]
        .iter()
        .position(|&t| !is_digit(t))
        .map_or(response.len(), |p| start + p);
    let value = response[start..end]
        .iter()
        .try_fold(None::<u64>, |acc, &d| {
            acc.unwrap_or(0).checked_mul(10)?.checked_add(d as u64).map(Some)
        })
        .flatten();
    match value {
        Some(v) => ParsedAnswer {
            value: Answer::Value(v),
            answer_span: Some(start..end),
        },
        None => ParsedAnswer {
            value: Answer::Absent,
            answer_span: None,
        },
    }
}

pub fn verify(parsed: &ParsedAnswer, problem: &Problem) -> f64 {
    accuracy_reward(parsed.value, problem.ground_truth)
}

pub fn write_problem_set(path: &Path, problems: &[Problem]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for p in problems {
        let line = serde_json::to_string(p).expect("problem serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_problem_set(path: &Path) -> Result<Vec<Problem>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Problem = serde_json::from_str(&line).map_err(|e| Error::Record {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}
