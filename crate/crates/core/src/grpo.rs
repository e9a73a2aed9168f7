//! Group relative policy optimization with the cumulative-entropy reward.
//!
//! One iteration: freeze `θ_old`, sample `G` responses per problem, score
//! them, normalize rewards within each group, then take ascent steps on the
//! clipped surrogate minus `β` times the k3 KL estimate against the frozen
//! initial policy `θ_ref`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::entropy::{entropy_unchecked, teca_of, EntropySeries, LogitTrace, TecaCurve};
use crate::error::{Error, Result};
use crate::model::{self, grad_objective, Generation, PolicyParams, PolicySnapshot, ScoredSequence, SurrogateGroup};
use crate::optim::Optimizer;
use crate::reward::{self, RewardBundle, RewardMode};
use crate::task::{self, parse_answer, ParsedAnswer, Problem, TokenId};
use crate::telemetry::{group_length_stats, GroupLengthStats, TelemetryRecord};

/// How per-token surrogate terms are combined into one value per response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Token-level ratios, averaged over the response's tokens.
    #[default]
    TokenMean,
    /// Token-level ratios, summed over the response's tokens.
    TokenSum,
    /// One ratio and one KL term over the whole sequence log-probability.
    Sequence,
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "token_mean" => Ok(Aggregation::TokenMean),
            "token_sum" => Ok(Aggregation::TokenSum),
            "sequence" => Ok(Aggregation::Sequence),
            other => Err(format!("unknown aggregation `{other}` (expected token_mean|token_sum|sequence)")),
        }
    }
}

/// What to do with a group whose rewards are all equal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegeneracyPolicy {
    /// All advantages zero; the group is left out of the surrogate.
    #[default]
    Zero,
    /// Divide by `max(std, 1e-8)`; the group stays in the surrogate.
    EpsilonFloor,
}

impl std::str::FromStr for DegeneracyPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "zero" => Ok(DegeneracyPolicy::Zero),
            "epsilon_floor" => Ok(DegeneracyPolicy::EpsilonFloor),
            other => Err(format!("unknown degeneracy policy `{other}` (expected zero|epsilon_floor)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub temperature: f64,
    pub aggregation: Aggregation,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            kl_beta: 0.001,
            temperature: 1.5,
            aggregation: Aggregation::TokenMean,
        }
    }
}

/// k3 estimate `ρ - ln ρ - 1` with `ρ = π_ref / π_θ`, evaluated from the
/// log-ratio so it never overflows for moderate differences and is exactly
/// zero for equal inputs.
pub fn kl_penalty(logprob_theta: f64, logprob_ref: f64) -> f64 {
    let x = logprob_ref - logprob_theta;
    (x.exp_m1() - x).max(0.0)
}

/// Derivative of [`kl_penalty`] with respect to `logprob_theta`.
fn kl_penalty_grad(logprob_theta: f64, logprob_ref: f64) -> f64 {
    -(logprob_ref - logprob_theta).exp_m1()
}

/// `min(ρA, clip(ρ, 1-ε, 1+ε)A)` and its derivative with respect to `ln ρ`.
pub fn clipped_term(log_ratio: f64, advantage: f64, clip_eps: f64) -> (f64, f64) {
    let ratio = log_ratio.exp();
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    if unclipped <= clipped {
        (unclipped, unclipped)
    } else {
        (clipped, 0.0)
    }
}

/// Surrogate value of one response and its derivative with respect to each
/// token's current log-probability.
pub fn response_surrogate(
    logprobs: &[f64],
    old_logprobs: &[f64],
    ref_logprobs: &[f64],
    advantage: f64,
    cfg: &SurrogateConfig,
) -> (f64, Vec<f64>) {
    let n = logprobs.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    match cfg.aggregation {
        Aggregation::TokenMean | Aggregation::TokenSum => {
            let w = if cfg.aggregation == Aggregation::TokenMean {
                1.0 / n as f64
            } else {
                1.0
            };
            let mut value = 0.0;
            let mut grads = Vec::with_capacity(n);
            for i in 0..n {
                let (v, dv) = clipped_term(logprobs[i] - old_logprobs[i], advantage, cfg.clip_eps);
                let kl = kl_penalty(logprobs[i], ref_logprobs[i]);
                let dkl = kl_penalty_grad(logprobs[i], ref_logprobs[i]);
                value += w * (v - cfg.kl_beta * kl);
                grads.push(w * (dv - cfg.kl_beta * dkl));
            }
            (value, grads)
        }
        Aggregation::Sequence => {
            let s: f64 = logprobs.iter().sum();
            let s_old: f64 = old_logprobs.iter().sum();
            let s_ref: f64 = ref_logprobs.iter().sum();
            let (v, dv) = clipped_term(s - s_old, advantage, cfg.clip_eps);
            let value = v - cfg.kl_beta * kl_penalty(s, s_ref);
            let g = dv - cfg.kl_beta * kl_penalty_grad(s, s_ref);
            (value, vec![g; n])
        }
    }
}

/// `(r_i - mean) / std` with the population standard deviation. Returns the
/// advantages and whether the group was degenerate (all rewards equal).
pub fn group_advantages(rewards: &[f64], policy: DegeneracyPolicy) -> (Vec<f64>, bool) {
    let (mean, std) = mean_std(rewards);
    let degenerate = rewards.windows(2).all(|w| w[0] == w[1]) || std == 0.0;
    let adv = match (degenerate, policy) {
        (true, DegeneracyPolicy::Zero) => vec![0.0; rewards.len()],
        (_, DegeneracyPolicy::EpsilonFloor) => rewards.iter().map(|r| (r - mean) / std.max(1e-8)).collect(),
        (false, DegeneracyPolicy::Zero) => rewards.iter().map(|r| (r - mean) / std).collect(),
    };
    (adv, degenerate)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One sampled and scored response.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub tokens: Vec<TokenId>,
    /// Logits each token was sampled from; `None` for an empty response.
    pub trace: Option<LogitTrace>,
    pub truncated: bool,
    pub entropies: EntropySeries,
    pub teca: Option<TecaCurve>,
    pub parsed: ParsedAnswer,
    pub reward: RewardBundle,
    /// Per-token log-probabilities under `θ_old` at the rollout temperature.
    pub old_logprobs: Vec<f64>,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub problem: Problem,
    pub responses: Vec<Response>,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub degenerate: bool,
}

impl RolloutGroup {
    /// Whether the group enters the surrogate under `policy`.
    pub fn contributes(&self, policy: DegeneracyPolicy) -> bool {
        !(self.degenerate && policy == DegeneracyPolicy::Zero)
    }
}

/// Rollout-related settings, split out of [`TrainConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutConfig {
    pub group_size: usize,
    pub temperature: f64,
    pub entropy_temperature: f64,
    pub max_response_length: usize,
    pub reward_mode: RewardMode,
    pub degeneracy: DegeneracyPolicy,
}

impl From<&TrainConfig> for RolloutConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            group_size: c.group_size,
            temperature: c.temperature,
            entropy_temperature: c.entropy_temperature.unwrap_or(c.temperature),
            max_response_length: c.max_response_length,
            reward_mode: c.reward_mode,
            degeneracy: c.degeneracy,
        }
    }
}

/// Scores a finished generation; shared by rollouts and re-scoring checks.
pub fn score_generation(
    generation: &Generation,
    problem: &Problem,
    entropy_temperature: f64,
    mode: RewardMode,
) -> Result<(EntropySeries, Option<TecaCurve>, ParsedAnswer, RewardBundle)> {
    let entropies: Vec<f64> = generation
        .logits
        .iter()
        .map(|z| entropy_unchecked(z, entropy_temperature))
        .collect();
    let teca = if entropies.is_empty() {
        None
    } else {
        Some(teca_of(&entropies)?)
    };
    let parsed = parse_answer(&generation.tokens);
    let reward = reward::score(
        mode,
        parsed.value,
        problem.ground_truth,
        teca.as_ref().map(TecaCurve::last),
        generation.truncated,
    )?;
    Ok((EntropySeries::new(entropies)?, teca, parsed, reward))
}

/// Samples and scores `G` responses to `problem` from `θ_old`.
pub fn rollout_group<R: rand::Rng + ?Sized>(
    old: &PolicySnapshot,
    problem: &Problem,
    cfg: &RolloutConfig,
    rng: &mut R,
) -> Result<RolloutGroup> {
    if cfg.group_size < 2 {
        return Err(Error::invalid(format!("group size must be >= 2, got {}", cfg.group_size)));
    }
    let mut responses = Vec::with_capacity(cfg.group_size);
    for _ in 0..cfg.group_size {
        let g = model::sample_response(
            old.params(),
            &problem.prompt_tokens,
            cfg.temperature,
            cfg.max_response_length,
            rng,
        )?;
        let (entropies, teca, parsed, reward) = score_generation(&g, problem, cfg.entropy_temperature, cfg.reward_mode)?;
        let trace = if g.logits.is_empty() {
            None
        } else {
            Some(LogitTrace::new(g.logits, cfg.temperature)?)
        };
        responses.push(Response {
            tokens: g.tokens,
            trace,
            truncated: g.truncated,
            entropies,
            teca,
            parsed,
            reward,
            old_logprobs: g.logprobs,
            advantage: 0.0,
        });
    }
    let rewards: Vec<f64> = responses.iter().map(|r| r.reward.combined).collect();
    let (mean, std) = mean_std(&rewards);
    let (adv, degenerate) = group_advantages(&rewards, cfg.degeneracy);
    for (r, a) in responses.iter_mut().zip(adv) {
        r.advantage = a;
    }
    Ok(RolloutGroup {
        problem: problem.clone(),
        responses,
        reward_mean: mean,
        reward_std: std,
        degenerate,
    })
}

/// Builds the surrogate batch for the contributing groups, attaching
/// reference log-probabilities.
pub fn surrogate_batch(
    groups: &[RolloutGroup],
    reference: &PolicyParams,
    temperature: f64,
    policy: DegeneracyPolicy,
) -> Result<Vec<SurrogateGroup>> {
    groups
        .par_iter()
        .filter(|g| g.contributes(policy))
        .map(|g| {
            g.responses
                .iter()
                .map(|r| {
                    Ok(ScoredSequence {
                        prompt: g.problem.prompt_tokens.clone(),
                        response: r.tokens.clone(),
                        advantage: r.advantage,
                        old_logprobs: r.old_logprobs.clone(),
                        ref_logprobs: model::logprob(reference, &g.problem.prompt_tokens, &r.tokens, temperature)?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Value of the surrogate at `params` (no gradient).
pub fn objective(params: &PolicyParams, batch: &[SurrogateGroup], cfg: &SurrogateConfig) -> Result<f64> {
    if batch.is_empty() || batch.iter().any(|g| g.is_empty()) {
        return Err(Error::invalid("surrogate batch must hold non-empty groups"));
    }
    let values: Vec<Result<f64>> = batch
        .par_iter()
        .map(|group| {
            let mut v = 0.0;
            for seq in group {
                if seq.old_logprobs.len() != seq.response.len() || seq.ref_logprobs.len() != seq.response.len() {
                    return Err(Error::invalid("logprob arrays do not match the response length"));
                }
                let lp = model::logprob(params, &seq.prompt, &seq.response, cfg.temperature)?;
                v += response_surrogate(&lp, &seq.old_logprobs, &seq.ref_logprobs, seq.advantage, cfg).0;
            }
            Ok(v / group.len() as f64)
        })
        .collect();
    let mut total = 0.0;
    for v in values {
        total += v?;
    }
    Ok(total / batch.len() as f64)
}

/// Callbacks from [`train`].
pub trait TrainObserver {
    fn on_iteration(&mut self, _record: &TelemetryRecord) -> Result<()> {
        Ok(())
    }

    /// Called every `checkpoint_every` iterations with the current
    /// parameters.
    fn on_checkpoint(&mut self, _iteration: usize, _params: &PolicyParams) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Collects telemetry in memory.
#[derive(Debug, Default)]
pub struct Recorder {
    pub records: Vec<TelemetryRecord>,
}

impl TrainObserver for Recorder {
    fn on_iteration(&mut self, record: &TelemetryRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub iterations: usize,
}

/// A run that stopped early; `last_good` holds the parameters from before
/// the failing update.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub last_good: Box<PolicyParams>,
    pub iterations: usize,
}

impl std::fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training aborted after {} iterations: {}", self.iterations, self.error)
    }
}

impl std::error::Error for TrainAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// The fixed training problem set for a config.
pub fn training_problems(cfg: &TrainConfig) -> Vec<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    (0..cfg.train_problems)
        .map(|_| task::sample_problem(&mut rng, &cfg.task))
        .collect()
}

/// Held-out evaluation problems, disjoint in stream from the training set.
pub fn evaluation_problems(cfg: &TrainConfig) -> Vec<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    (0..cfg.eval_problems)
        .map(|_| task::sample_problem(&mut rng, &cfg.task))
        .collect()
}

fn rollout_rng(seed: u64, iteration: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(((iteration as u64) << 20) | index as u64);
    rng
}

/// Runs GRPO from `initial`. `θ_ref` is `initial` for the whole run.
pub fn train(
    cfg: &TrainConfig,
    initial: &PolicyParams,
    observer: &mut dyn TrainObserver,
) -> std::result::Result<TrainOutcome, TrainAbort> {
    let abort = |error: Error, params: &PolicyParams, iterations: usize| TrainAbort {
        error,
        last_good: Box::new(params.clone()),
        iterations,
    };
    if let Err(e) = cfg.validate() {
        return Err(abort(e, initial, 0));
    }
    let reference = PolicySnapshot::new(initial, 0);
    let mut params = initial.clone();
    let mut optimizer = Optimizer::new(cfg.optimizer, params.values().len());
    let rollout_cfg = RolloutConfig::from(cfg);
    let surrogate_cfg = cfg.surrogate();
    let mut problems = training_problems(cfg);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(3);
    let per_epoch = cfg.train_problems.div_ceil(cfg.batch_size);
    let planned = per_epoch * cfg.epochs;
    let total = cfg.max_iterations.map_or(planned, |m| m.min(planned));

    let mut iteration = 0;
    'epochs: for epoch in 0..cfg.epochs {
        problems.shuffle(&mut shuffle_rng);
        for batch in problems.chunks(cfg.batch_size) {
            if iteration >= total {
                break 'epochs;
            }
            let old = PolicySnapshot::new(&params, iteration as u64 + 1);
            let groups: Result<Vec<RolloutGroup>> = batch
                .par_iter()
                .enumerate()
                .map(|(i, p)| rollout_group(&old, p, &rollout_cfg, &mut rollout_rng(cfg.seed, iteration, i)))
                .collect();
            let groups = groups.map_err(|e| abort(e, &params, iteration))?;
            let surrogate = surrogate_batch(&groups, reference.params(), cfg.temperature, cfg.degeneracy)
                .map_err(|e| abort(e, &params, iteration))?;

            let mut objective_value = 0.0;
            let mut grad_norm = 0.0;
            if !surrogate.is_empty() {
                let n_mini = cfg.minibatches.min(surrogate.len()).max(1);
                let chunk = surrogate.len().div_ceil(n_mini);
                let mut first = true;
                for _ in 0..cfg.ppo_epochs {
                    for mini in surrogate.chunks(chunk) {
                        let (value, grad) =
                            grad_objective(&params, mini, &surrogate_cfg).map_err(|e| abort(e, &params, iteration))?;
                        if first {
                            objective_value = value;
                            grad_norm = grad.norm();
                            first = false;
                        }
                        optimizer
                            .step(&mut params, &grad, cfg.learning_rate)
                            .map_err(|e| abort(e, &params, iteration))?;
                    }
                }
            }

            let record = telemetry_record(iteration, epoch, &groups, &surrogate, cfg, objective_value, grad_norm);
            observer.on_iteration(&record).map_err(|e| abort(e, &params, iteration))?;
            iteration += 1;
            if cfg.checkpoint_every > 0 && iteration % cfg.checkpoint_every == 0 {
                observer
                    .on_checkpoint(iteration, &params)
                    .map_err(|e| abort(e, &params, iteration))?;
            }
        }
    }
    Ok(TrainOutcome {
        params,
        iterations: iteration,
    })
}

fn telemetry_record(
    iteration: usize,
    epoch: usize,
    groups: &[RolloutGroup],
    surrogate: &[SurrogateGroup],
    cfg: &TrainConfig,
    objective: f64,
    grad_norm: f64,
) -> TelemetryRecord {
    let stats: Vec<GroupLengthStats> = groups
        .iter()
        .map(|g| group_length_stats(g, cfg.max_response_length))
        .collect();
    let n_groups = stats.len().max(1) as f64;
    let responses = groups.iter().flat_map(|g| &g.responses);
    let n = groups.iter().map(|g| g.responses.len()).sum::<usize>().max(1) as f64;
    let mut reward_sum = 0.0;
    let mut acc_sum = 0.0;
    let mut teca_sum = 0.0;
    let mut teca_n = 0usize;
    for r in responses {
        reward_sum += r.reward.combined;
        acc_sum += r.reward.accuracy;
        if let Some(t) = r.teca.as_ref().filter(|_| !r.truncated) {
            teca_sum += t.last();
            teca_n += 1;
        }
    }
    let mut kl_sum = 0.0;
    let mut kl_n = 0usize;
    for seq in surrogate.iter().flatten() {
        for (o, r) in seq.old_logprobs.iter().zip(&seq.ref_logprobs) {
            kl_sum += kl_penalty(*o, *r);
            kl_n += 1;
        }
    }
    TelemetryRecord {
        iteration,
        epoch,
        mean_reward: reward_sum / n,
        accuracy: acc_sum / n,
        mean_length: stats.iter().map(|s| s.mean_length).sum::<f64>() / n_groups,
        min_length: stats.iter().map(|s| s.min_length).min().unwrap_or(0),
        clip_ratio: stats.iter().map(|s| s.clip_ratio).sum::<f64>() / n_groups,
        mean_teca_last: if teca_n > 0 { teca_sum / teca_n as f64 } else { 0.0 },
        objective,
        kl_mean: if kl_n > 0 { kl_sum / kl_n as f64 } else { 0.0 },
        grad_norm,
        active_groups: surrogate.len(),
    }
}
