#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teca_core::grpo::{self, Aggregation, SurrogateConfig};
use teca_core::model::{self, ModelConfig, PolicyParams, ScoredSequence, SurrogateGroup};

/// Which side of the trust region the old log-probabilities put each ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Every ratio strictly inside `(1-ε, 1+ε)`.
    Unclipped,
    /// Every ratio well outside `[1-ε, 1+ε]`.
    Clipped,
}

pub struct Instance {
    pub params: PolicyParams,
    pub batch: Vec<SurrogateGroup>,
    pub cfg: SurrogateConfig,
}

/// A random tiny model and surrogate batch. Log-ratios stay at least 0.05
/// away from `ln(1±ε)` so central differences never straddle a kink.
pub fn small_instance(seed: u64, kl_beta: f64, regime: Regime, aggregation: Aggregation) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        vocab_size: rng.gen_range(4..=8),
        d_model: rng.gen_range(4..=8),
        n_blocks: rng.gen_range(1..=2),
        context_window: 12,
        ffn_mult: 2,
    };
    let params = PolicyParams::init_with_std(config, 0.5, &mut rng).unwrap();
    let cfg = SurrogateConfig {
        clip_eps: 0.2,
        kl_beta,
        temperature: rng.gen_range(0.7..1.5),
        aggregation,
    };
    let v = config.vocab_size;
    let groups = rng.gen_range(1..=2);
    let batch = (0..groups)
        .map(|_| {
            let g = rng.gen_range(2..=3);
            (0..g)
                .map(|_| {
                    let prompt: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(0..v)).collect();
                    let response: Vec<usize> = (0..rng.gen_range(1..=6)).map(|_| rng.gen_range(0..v)).collect();
                    let lp = model::logprob(&params, &prompt, &response, cfg.temperature).unwrap();
                    let n = lp.len() as f64;
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    let offsets: Vec<f64> = match (regime, aggregation) {
                        (Regime::Unclipped, Aggregation::Sequence) => {
                            (0..lp.len()).map(|_| rng.gen_range(-0.12..0.12) / n).collect()
                        }
                        (Regime::Unclipped, _) => (0..lp.len()).map(|_| rng.gen_range(-0.12..0.12)).collect(),
                        (Regime::Clipped, _) => (0..lp.len()).map(|_| sign * rng.gen_range(0.3..0.7)).collect(),
                    };
                    let old_logprobs = lp.iter().zip(&offsets).map(|(l, o)| l + o).collect();
                    let ref_logprobs = lp.iter().map(|l| l + rng.gen_range(-0.5..0.5)).collect();
                    let mut advantage = rng.gen_range(0.2..1.5);
                    if rng.gen_bool(0.5) {
                        advantage = -advantage;
                    }
                    ScoredSequence {
                        prompt,
                        response,
                        advantage,
                        old_logprobs,
                        ref_logprobs,
                    }
                })
                .collect()
        })
        .collect();
    Instance { params, batch, cfg }
}

/// Central-difference gradient of the surrogate objective.
pub fn finite_difference(inst: &Instance, h: f64) -> Vec<f64> {
    let base = inst.params.values().to_vec();
    let config = *inst.params.config();
    (0..base.len())
        .map(|i| {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let fp = grpo::objective(&PolicyParams::from_values(config, plus).unwrap(), &inst.batch, &inst.cfg).unwrap();
            let fm = grpo::objective(&PolicyParams::from_values(config, minus).unwrap(), &inst.batch, &inst.cfg).unwrap();
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a-b| / max(|a|, |b|, floor)` over coordinates.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Checks the analytic gradient of one instance; returns the worst
/// relative error.
pub fn gradient_error(inst: &Instance) -> f64 {
    let (_, g) = model::grad_objective(&inst.params, &inst.batch, &inst.cfg).unwrap();
    let fd = finite_difference(inst, 1e-5);
    max_relative_error(g.values(), &fd, 1e-6)
}
