//! Run configuration and its flat `key = value` text format.
//!
//! Blank lines and lines starting with `#` are ignored. Every other line must
//! be `key = value` with a known key; unknown or repeated keys are errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::{Aggregation, DegeneracyPolicy, SurrogateConfig};
use crate::model::ModelConfig;
use crate::optim::OptimizerKind;
use crate::reward::RewardMode;
use crate::task::TaskConfig;

/// Supervised warm-start that precedes RL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmStartConfig {
    /// Number of descent steps; 0 skips the warm start.
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        Self {
            steps: 4500,
            batch_size: 32,
            learning_rate: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub init_std: f64,
    pub warmstart: WarmStartConfig,
    pub train_problems: usize,
    pub eval_problems: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_iterations: Option<usize>,
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub temperature: f64,
    pub entropy_temperature: Option<f64>,
    pub max_response_length: usize,
    pub reward_mode: RewardMode,
    pub degeneracy: DegeneracyPolicy,
    pub aggregation: Aggregation,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub minibatches: usize,
    pub ppo_epochs: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            init_std: 0.02,
            warmstart: WarmStartConfig::default(),
            train_problems: 2000,
            eval_problems: 2000,
            batch_size: 32,
            epochs: 5,
            max_iterations: None,
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.001,
            temperature: 1.5,
            entropy_temperature: None,
            max_response_length: 64,
            reward_mode: RewardMode::Cer,
            degeneracy: DegeneracyPolicy::Zero,
            aggregation: Aggregation::TokenMean,
            optimizer: OptimizerKind::default(),
            learning_rate: 3e-4,
            minibatches: 1,
            ppo_epochs: 1,
            checkpoint_every: 0,
        }
    }
}

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("cannot parse `{value}`: {e}"))
}

fn parse_optional<T: FromStr>(value: &str) -> std::result::Result<Option<T>, String>
where
    T::Err: std::fmt::Display,
{
    if value == "none" {
        Ok(None)
    } else {
        parse(value).map(Some)
    }
}

fn display_optional<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |x| x.to_string())
}

const KEYS: &[&str] = &[
    "seed",
    "modulus",
    "min_difficulty",
    "max_difficulty",
    "vocab_size",
    "d_model",
    "n_blocks",
    "context_window",
    "ffn_mult",
    "init_std",
    "warmstart_steps",
    "warmstart_batch_size",
    "warmstart_learning_rate",
    "train_problems",
    "eval_problems",
    "batch_size",
    "epochs",
    "max_iterations",
    "group_size",
    "clip_eps",
    "kl_beta",
    "temperature",
    "entropy_temperature",
    "max_response_length",
    "reward",
    "degeneracy",
    "aggregation",
    "optimizer",
    "momentum",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "learning_rate",
    "minibatches",
    "ppo_epochs",
    "checkpoint_every",
];

impl TrainConfig {
    /// Known configuration keys, in serialization order.
    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let adam = |o: &OptimizerKind| match *o {
            OptimizerKind::Adam { beta1, beta2, eps } => Ok((beta1, beta2, eps)),
            OptimizerKind::Sgd { .. } => Err(format!("`{key}` requires optimizer = adam")),
        };
        match key {
            "seed" => self.seed = parse(value)?,
            "modulus" => self.task.modulus = parse(value)?,
            "min_difficulty" => self.task.min_difficulty = parse(value)?,
            "max_difficulty" => self.task.max_difficulty = parse(value)?,
            "vocab_size" => self.model.vocab_size = parse(value)?,
            "d_model" => self.model.d_model = parse(value)?,
            "n_blocks" => self.model.n_blocks = parse(value)?,
            "context_window" => self.model.context_window = parse(value)?,
            "ffn_mult" => self.model.ffn_mult = parse(value)?,
            "init_std" => self.init_std = parse(value)?,
            "warmstart_steps" => self.warmstart.steps = parse(value)?,
            "warmstart_batch_size" => self.warmstart.batch_size = parse(value)?,
            "warmstart_learning_rate" => self.warmstart.learning_rate = parse(value)?,
            "train_problems" => self.train_problems = parse(value)?,
            "eval_problems" => self.eval_problems = parse(value)?,
            "batch_size" => self.batch_size = parse(value)?,
            "epochs" => self.epochs = parse(value)?,
            "max_iterations" => self.max_iterations = parse_optional(value)?,
            "group_size" => self.group_size = parse(value)?,
            "clip_eps" => self.clip_eps = parse(value)?,
            "kl_beta" => self.kl_beta = parse(value)?,
            "temperature" => self.temperature = parse(value)?,
            "entropy_temperature" => self.entropy_temperature = parse_optional(value)?,
            "max_response_length" => self.max_response_length = parse(value)?,
            "reward" => self.reward_mode = parse(value)?,
            "degeneracy" => self.degeneracy = parse(value)?,
            "aggregation" => self.aggregation = parse(value)?,
            "optimizer" => {
                self.optimizer = match value {
                    "adam" => match self.optimizer {
                        a @ OptimizerKind::Adam { .. } => a,
                        OptimizerKind::Sgd { .. } => OptimizerKind::default(),
                    },
                    "sgd" => match self.optimizer {
                        s @ OptimizerKind::Sgd { .. } => s,
                        OptimizerKind::Adam { .. } => OptimizerKind::Sgd { momentum: 0.0 },
                    },
                    other => return Err(format!("unknown optimizer `{other}` (expected adam|sgd)")),
                }
            }
            "momentum" => match &mut self.optimizer {
                OptimizerKind::Sgd { momentum } => *momentum = parse(value)?,
                OptimizerKind::Adam { .. } => return Err("`momentum` requires optimizer = sgd".into()),
            },
            "adam_beta1" => {
                let (_, b2, e) = adam(&self.optimizer)?;
                self.optimizer = OptimizerKind::Adam { beta1: parse(value)?, beta2: b2, eps: e };
            }
            "adam_beta2" => {
                let (b1, _, e) = adam(&self.optimizer)?;
                self.optimizer = OptimizerKind::Adam { beta1: b1, beta2: parse(value)?, eps: e };
            }
            "adam_eps" => {
                let (b1, b2, _) = adam(&self.optimizer)?;
                self.optimizer = OptimizerKind::Adam { beta1: b1, beta2: b2, eps: parse(value)? };
            }
            "learning_rate" => self.learning_rate = parse(value)?,
            "minibatches" => self.minibatches = parse(value)?,
            "ppo_epochs" => self.ppo_epochs = parse(value)?,
            "checkpoint_every" => self.checkpoint_every = parse(value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "seed" => self.seed.to_string(),
            "modulus" => self.task.modulus.to_string(),
            "min_difficulty" => self.task.min_difficulty.to_string(),
            "max_difficulty" => self.task.max_difficulty.to_string(),
            "vocab_size" => self.model.vocab_size.to_string(),
            "d_model" => self.model.d_model.to_string(),
            "n_blocks" => self.model.n_blocks.to_string(),
            "context_window" => self.model.context_window.to_string(),
            "ffn_mult" => self.model.ffn_mult.to_string(),
            "init_std" => self.init_std.to_string(),
            "warmstart_steps" => self.warmstart.steps.to_string(),
            "warmstart_batch_size" => self.warmstart.batch_size.to_string(),
            "warmstart_learning_rate" => self.warmstart.learning_rate.to_string(),
            "train_problems" => self.train_problems.to_string(),
            "eval_problems" => self.eval_problems.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "max_iterations" => display_optional(&self.max_iterations),
            "group_size" => self.group_size.to_string(),
            "clip_eps" => self.clip_eps.to_string(),
            "kl_beta" => self.kl_beta.to_string(),
            "temperature" => self.temperature.to_string(),
            "entropy_temperature" => display_optional(&self.entropy_temperature),
            "max_response_length" => self.max_response_length.to_string(),
            "reward" => self.reward_mode.to_string(),
            "degeneracy" => match self.degeneracy {
                DegeneracyPolicy::Zero => "zero".into(),
                DegeneracyPolicy::EpsilonFloor => "epsilon_floor".into(),
            },
            "aggregation" => match self.aggregation {
                Aggregation::TokenMean => "token_mean".into(),
                Aggregation::TokenSum => "token_sum".into(),
                Aggregation::Sequence => "sequence".into(),
            },
            "optimizer" => match self.optimizer {
                OptimizerKind::Adam { .. } => "adam".into(),
                OptimizerKind::Sgd { .. } => "sgd".into(),
            },
            "momentum" => match self.optimizer {
                OptimizerKind::Sgd { momentum } => momentum.to_string(),
                OptimizerKind::Adam { .. } => return None,
            },
            "adam_beta1" | "adam_beta2" | "adam_eps" => match self.optimizer {
                OptimizerKind::Adam { beta1, beta2, eps } => match key {
                    "adam_beta1" => beta1.to_string(),
                    "adam_beta2" => beta2.to_string(),
                    _ => eps.to_string(),
                },
                OptimizerKind::Sgd { .. } => return None,
            },
            "learning_rate" => self.learning_rate.to_string(),
            "minibatches" => self.minibatches.to_string(),
            "ppo_epochs" => self.ppo_epochs.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Parses the flat text format on top of the defaults. `optimizer` is
    /// applied before its coefficient keys regardless of line order.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, &str, &str)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    line: line_no,
                    message: format!("expected `key = value`, got `{line}`"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config {
                    line: line_no,
                    message: format!("unknown key `{key}`"),
                });
            }
            if let Some((prev, _, _)) = entries.iter().find(|(_, k, _)| *k == key) {
                return Err(Error::Config {
                    line: line_no,
                    message: format!("key `{key}` already set on line {prev}"),
                });
            }
            entries.push((line_no, key, value));
        }
        entries.sort_by_key(|(_, k, _)| (*k != "optimizer") as u8);
        let mut cfg = TrainConfig::default();
        for (line, key, value) in entries {
            cfg.set(key, value).map_err(|message| Error::Config {
                line,
                message: format!("`{key}`: {message}"),
            })?;
        }
        cfg.validate().map_err(|e| Error::Config {
            line: 0,
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Renders every key; `parse_str(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            if let Some(v) = self.get(key) {
                let _ = writeln!(out, "{key} = {v}");
            }
        }
        out
    }

    pub fn surrogate(&self) -> SurrogateConfig {
        SurrogateConfig {
            clip_eps: self.clip_eps,
            kl_beta: self.kl_beta,
            temperature: self.temperature,
            aggregation: self.aggregation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        self.task.validate()?;
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return fail(format!("clip_eps must lie in (0, 1), got {}", self.clip_eps));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return fail(format!("kl_beta must be finite and >= 0, got {}", self.kl_beta));
        }
        if self.group_size < 2 {
            return fail(format!("group_size must be >= 2, got {}", self.group_size));
        }
        for (name, t) in [("temperature", Some(self.temperature)), ("entropy_temperature", self.entropy_temperature)] {
            if let Some(t) = t {
                if !(t > 0.0 && t.is_finite()) {
                    return fail(format!("{name} must be finite and > 0, got {t}"));
                }
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return fail(format!("init_std must be finite and > 0, got {}", self.init_std));
        }
        for (name, v) in [
            ("train_problems", self.train_problems),
            ("eval_problems", self.eval_problems),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("max_response_length", self.max_response_length),
            ("minibatches", self.minibatches),
            ("ppo_epochs", self.ppo_epochs),
            ("warmstart_batch_size", self.warmstart.batch_size),
        ] {
            if v == 0 {
                return fail(format!("{name} must be >= 1"));
            }
        }
        if self.model.vocab_size != crate::task::VOCAB_SIZE {
            return fail(format!(
                "vocab_size must be {} for the arithmetic task, got {}",
                crate::task::VOCAB_SIZE,
                self.model.vocab_size
            ));
        }
        self.model.validate()?;
        let teacher = crate::warmstart::longest_teacher_response(&self.task);
        if self.warmstart.steps > 0 && teacher > self.max_response_length {
            return fail(format!(
                "max_response_length {} is shorter than the longest warm-start response ({teacher} tokens)",
                self.max_response_length
            ));
        }
        let needed = self.task.max_prompt_len() + self.max_response_length;
        if needed > self.model.context_window + 1 {
            return fail(format!(
                "context_window {} cannot hold a {}-token prompt plus {} response tokens",
                self.model.context_window,
                self.task.max_prompt_len(),
                self.max_response_length
            ));
        }
        Ok(())
    }
}
