//! Supervised warm start producing a verbose, exploratory base policy.
//!
//! Teacher responses have the shape
//!
//! ```text
//! THINK g s (op a r)* ANSWER r [WAIT c x y z]* END
//! ```
//!
//! where `g` is a uniformly random guess, `(op a r)` restates each step of
//! the chain with its running residue `r`, and every `WAIT` segment that
//! follows the answer carries its 1-based index `c` (a single digit, mod 10)
//! and three uniformly random values. The number of `WAIT` segments is drawn
//! from [`EXPLORATION_WEIGHTS`]. The last weight is a run-on response: in
//! place of `ANSWER` it restarts the derivation from `THINK` again and again
//! until the length limit, never committing to an answer.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{nll_grad, Gradient, PolicyParams};
use crate::optim::{Optimizer, OptimizerKind};
use crate::task::{self, digits_of, tok, Problem, TaskConfig, TokenId};

/// Weights for 0, 1, 2, 3 exploration segments and for a run-on response.
pub const EXPLORATION_WEIGHTS: [f64; 5] = [0.10, 0.10, 0.15, 0.55, 0.10];

/// Segment count that marks a run-on response.
const RUN_ON: usize = EXPLORATION_WEIGHTS.len() - 1;

fn push_value(out: &mut Vec<TokenId>, v: u64) {
    out.extend(digits_of(v));
}

/// Teacher response with an explicit number of exploration segments;
/// `None` produces a run-on response of exactly `max_len` tokens.
pub fn teacher_response<R: Rng + ?Sized>(
    problem: &Problem,
    task: &TaskConfig,
    segments: Option<usize>,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    let chain = problem.chain()?;
    let m = task.modulus;
    let derivation = |out: &mut Vec<TokenId>, rng: &mut R| {
        out.push(tok::THINK);
        push_value(out, rng.gen_range(0..m));
        push_value(out, chain.start);
        let mut r = chain.start % m;
        for &(op, a) in &chain.steps {
            r = op.apply(r, a, m);
            out.push(op.token());
            push_value(out, a);
            push_value(out, r);
        }
        r
    };
    let mut out = Vec::with_capacity(max_len);
    let r = derivation(&mut out, rng);
    match segments {
        Some(n) => {
            out.push(tok::ANSWER);
            push_value(&mut out, r);
            for i in 1..=n {
                out.push(tok::WAIT);
                out.push(i % 10);
                for _ in 0..3 {
                    push_value(&mut out, rng.gen_range(0..m));
                }
            }
            out.push(tok::END);
            if out.len() > max_len {
                return Err(Error::invalid(format!(
                    "teacher response of {} tokens exceeds max_len {max_len}",
                    out.len()
                )));
            }
        }
        None => {
            while out.len() < max_len {
                derivation(&mut out, rng);
            }
            out.truncate(max_len);
        }
    }
    Ok(out)
}

/// Length of the longest non-run-on teacher response for `task`.
pub fn longest_teacher_response(task: &TaskConfig) -> usize {
    let w = task.value_width();
    let segments = RUN_ON - 1;
    // THINK g s (op a r)* ANSWER r [WAIT c x y z]* END
    3 + 2 * w + task.max_difficulty * (1 + 2 * w) + w + segments * (2 + 3 * w)
}

/// Draws a teacher response with a random number of exploration segments.
pub fn sample_teacher<R: Rng + ?Sized>(
    problem: &Problem,
    task: &TaskConfig,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    let dist = WeightedIndex::new(EXPLORATION_WEIGHTS).expect("weights are positive");
    let k = dist.sample(rng);
    let segments = (k != RUN_ON).then_some(k);
    teacher_response(problem, task, segments, max_len, rng)
}

/// Mean per-token negative log-likelihood of one batch and its gradient.
fn batch_nll(params: &PolicyParams, batch: &[(Vec<TokenId>, Vec<TokenId>)]) -> Result<(f64, Gradient)> {
    let tokens: usize = batch.iter().map(|(_, t)| t.len()).sum();
    let w = 1.0 / tokens as f64;
    let parts: Vec<Result<(f64, Gradient)>> = batch
        .par_iter()
        .map(|(prompt, target)| {
            let mut g = Gradient::zeros_like(params);
            let nll = nll_grad(params, prompt, target, w, &mut g)?;
            Ok((nll, g))
        })
        .collect();
    let mut total = Gradient::zeros_like(params);
    let mut nll = 0.0;
    for p in parts {
        let (v, g) = p?;
        nll += v;
        total.add_scaled(&g, 1.0);
    }
    Ok((nll * w, total))
}

/// Fits `params` to fresh teacher responses for `cfg.warmstart.steps`
/// steps. Returns the mean token NLL of every step.
pub fn warm_start(cfg: &TrainConfig, params: &mut PolicyParams) -> Result<Vec<f64>> {
    let ws = &cfg.warmstart;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(4);
    let mut opt = Optimizer::new(OptimizerKind::default(), params.values().len());
    let mut losses = Vec::with_capacity(ws.steps);
    for step in 0..ws.steps {
        let batch: Vec<(Vec<TokenId>, Vec<TokenId>)> = (0..ws.batch_size)
            .map(|_| {
                let p = task::sample_problem(&mut rng, &cfg.task);
                let t = sample_teacher(&p, &cfg.task, cfg.max_response_length, &mut rng)?;
                Ok((p.prompt_tokens, t))
            })
            .collect::<Result<_>>()?;
        let (nll, mut grad) = batch_nll(params, &batch)?;
        grad.scale(-1.0);
        // Linear decay keeps the final iterates from oscillating.
        let lr = ws.learning_rate * (1.0 - step as f64 / ws.steps as f64);
        opt.step(params, &grad, lr).map_err(|e| Error::AtStep {
            step,
            source: Box::new(e),
        })?;
        losses.push(nll);
    }
    Ok(losses)
}

/// Freshly initialized parameters after the configured warm start.
pub fn initial_policy(cfg: &TrainConfig) -> Result<PolicyParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(5);
    let mut params = PolicyParams::init_with_std(cfg.model, cfg.init_std, &mut rng)?;
    warm_start(cfg, &mut params)?;
    Ok(params)
}
