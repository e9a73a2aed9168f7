//! First-order ascent steps on the policy parameters.
//!
//! Every update is computed into a scratch buffer first and only committed
//! when all resulting values are finite, so a rejected update leaves both
//! the parameters and the optimizer state untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradient, PolicyParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
    scratch: Vec<f64>,
}

fn check_shape(params: &PolicyParams, grad: &Gradient) -> Result<()> {
    if params.values().len() != grad.len() {
        return Err(Error::invalid(format!(
            "gradient has {} entries, parameters have {}",
            grad.len(),
            params.values().len()
        )));
    }
    Ok(())
}

fn reject_non_finite(params: &PolicyParams, candidate: &[f64]) -> Result<()> {
    match candidate.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::UpdateRejected {
            param: params.layout().name_of(i).to_string(),
        }),
        None => Ok(()),
    }
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        Self {
            kind,
            first: vec![0.0; n_params],
            second: match kind {
                OptimizerKind::Adam { .. } => vec![0.0; n_params],
                OptimizerKind::Sgd { .. } => Vec::new(),
            },
            steps: 0,
            scratch: vec![0.0; n_params],
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One ascent step: parameters move along `grad`.
    pub fn step(&mut self, params: &mut PolicyParams, grad: &Gradient, lr: f64) -> Result<()> {
        check_shape(params, grad)?;
        if self.first.len() != grad.len() {
            return Err(Error::invalid("optimizer state does not match the parameter count"));
        }
        if !lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be finite, got {lr}")));
        }
        let g = grad.values();
        let theta = params.values();
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                let mut new_first = self.first.clone();
                for i in 0..g.len() {
                    new_first[i] = momentum * new_first[i] + g[i];
                    self.scratch[i] = theta[i] + lr * new_first[i];
                }
                reject_non_finite(params, &self.scratch)?;
                if new_first.iter().any(|v| !v.is_finite()) {
                    return Err(Error::UpdateRejected {
                        param: "optimizer momentum".into(),
                    });
                }
                self.first = new_first;
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps + 1;
                let bc1 = 1.0 - beta1.powi(t as i32);
                let bc2 = 1.0 - beta2.powi(t as i32);
                let mut new_first = vec![0.0; g.len()];
                let mut new_second = vec![0.0; g.len()];
                for i in 0..g.len() {
                    let m = beta1 * self.first[i] + (1.0 - beta1) * g[i];
                    let v = beta2 * self.second[i] + (1.0 - beta2) * g[i] * g[i];
                    new_first[i] = m;
                    new_second[i] = v;
                    self.scratch[i] = theta[i] + lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                }
                reject_non_finite(params, &self.scratch)?;
                if new_first.iter().chain(&new_second).any(|v| !v.is_finite()) {
                    return Err(Error::UpdateRejected {
                        param: "optimizer moments".into(),
                    });
                }
                self.first = new_first;
                self.second = new_second;
            }
        }
        self.steps += 1;
        params.values_mut().copy_from_slice(&self.scratch);
        Ok(())
    }
}

/// Plain gradient-ascent step `params + lr * grad`, returning new parameters.
pub fn apply_update(params: &PolicyParams, grad: &Gradient, lr: f64) -> Result<PolicyParams> {
    check_shape(params, grad)?;
    let candidate: Vec<f64> = params
        .values()
        .iter()
        .zip(grad.values())
        .map(|(p, g)| p + lr * g)
        .collect();
    reject_non_finite(params, &candidate)?;
    PolicyParams::from_values(*params.config(), candidate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 5,
            d_model: 4,
            n_blocks: 1,
            context_window: 6,
            ffn_mult: 2,
        }
    }

    fn params() -> PolicyParams {
        PolicyParams::init_with_std(cfg(), 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn zero_gradient_and_zero_lr_are_no_ops() {
        let p = params();
        let zero = Gradient::zeros_like(&p);
        assert_eq!(apply_update(&p, &zero, 0.1).unwrap(), p);
        let ones = Gradient::from_values(vec![1.0; p.values().len()]);
        assert_eq!(apply_update(&p, &ones, 0.0).unwrap(), p);
        for kind in [OptimizerKind::default(), OptimizerKind::Sgd { momentum: 0.9 }] {
            let mut q = p.clone();
            let mut opt = Optimizer::new(kind, q.values().len());
            opt.step(&mut q, &zero, 0.1).unwrap();
            assert_eq!(q, p);
            opt.step(&mut q, &ones, 0.0).unwrap();
            assert_eq!(q, p);
        }
    }

    #[test]
    fn non_finite_update_is_rejected_atomically() {
        let p = params();
        let mut values = vec![0.0; p.values().len()];
        let wq = p.layout().tensors().iter().find(|(n, _, _)| n == "block0.attn.wq").unwrap().1.start;
        values[wq + 2] = f64::INFINITY;
        let bad = Gradient::from_values(values);
        match apply_update(&p, &bad, 1.0) {
            Err(Error::UpdateRejected { param }) => assert_eq!(param, "block0.attn.wq"),
            other => panic!("expected rejection, got {other:?}"),
        }
        let mut q = p.clone();
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.5 }, q.values().len());
        assert!(opt.step(&mut q, &bad, 1.0).is_err());
        assert_eq!(q, p);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = params();
        assert!(apply_update(&p, &Gradient::from_values(vec![0.0; 3]), 0.1).is_err());
    }

    /// Maximize `-(theta - target)^2` and compare with the closed-form optimum.
    fn quadratic_run(kind: OptimizerKind, lr: f64, steps: usize) -> f64 {
        let mut p = params();
        let target: Vec<f64> = (0..p.values().len()).map(|i| ((i * 37) % 11) as f64 / 5.0 - 1.0).collect();
        let mut opt = Optimizer::new(kind, p.values().len());
        for _ in 0..steps {
            let g: Vec<f64> = p.values().iter().zip(&target).map(|(t, s)| -2.0 * (t - s)).collect();
            opt.step(&mut p, &Gradient::from_values(g), lr).unwrap();
        }
        p.values()
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn converges_on_quadratic() {
        assert!(quadratic_run(OptimizerKind::Sgd { momentum: 0.0 }, 0.1, 1000) < 1e-6);
        assert!(quadratic_run(OptimizerKind::Sgd { momentum: 0.5 }, 0.1, 1000) < 1e-6);
        let err = quadratic_run(OptimizerKind::default(), 0.05, 1000);
        assert!(err < 1e-6, "adam error {err}");
    }
}
