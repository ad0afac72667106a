//! The stochastic-gradient training loop shared by every experiment.
//!
//! Each iteration draws a fresh batch through the objective, records the loss
//! on a new [`Graph`], back-propagates to the parameter leaves and applies one
//! Adam step.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{DermError, Result};
use crate::nn::Mlp;
use crate::optim::{adam_step, AdamState};
use crate::rng::{substream, StreamRng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopRule {
    Fixed,
    /// Stop once the best loss has not improved by `tol_rel` (relative) for
    /// `patience` iterations; `iterations` stays an upper bound.
    Plateau {
        tol_rel: f64,
        patience: usize,
    },
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule::Plateau {
            tol_rel: 1e-4,
            patience: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "fixed_rule")]
    pub stop: StopRule,
    /// When set, the learning rate decays geometrically to
    /// `learning_rate * lr_final_fraction` at the last iteration.
    #[serde(default)]
    pub lr_final_fraction: Option<f64>,
}

fn default_lr() -> f64 {
    1e-3
}

fn fixed_rule() -> StopRule {
    StopRule::Fixed
}

impl TrainConfig {
    pub fn new(batch_size: usize, iterations: usize, seed: u64) -> Self {
        Self {
            batch_size,
            iterations,
            learning_rate: default_lr(),
            seed,
            stop: StopRule::Fixed,
            lr_final_fraction: None,
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }

    pub fn with_lr_decay(mut self, final_fraction: f64) -> Self {
        self.lr_final_fraction = Some(final_fraction);
        self
    }

    /// Learning rate in effect at iteration `it`.
    pub fn lr_at(&self, it: usize) -> f64 {
        match self.lr_final_fraction {
            Some(f) if self.iterations > 1 => self.learning_rate * f.powf(it as f64 / (self.iterations - 1) as f64),
            _ => self.learning_rate,
        }
    }

    pub fn with_stop(mut self, stop: StopRule) -> Self {
        self.stop = stop;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(DermError::Contract("batch_size must be at least 1".into()));
        }
        if self.iterations == 0 {
            return Err(DermError::Contract("iterations must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DermError::Contract("learning_rate must be positive".into()));
        }
        if let Some(f) = self.lr_final_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(DermError::Contract("lr_final_fraction must lie in (0, 1]".into()));
            }
        }
        if let StopRule::Plateau { tol_rel, patience } = self.stop {
            if tol_rel < 0.0 || patience == 0 {
                return Err(DermError::Contract("invalid plateau rule".into()));
            }
        }
        Ok(())
    }
}

/// Monte Carlo evaluation of a trained policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub price: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub params: Vec<f64>,
    pub iterations: usize,
    pub seed: u64,
    pub evaluation: Option<Evaluation>,
    /// Learned initial wealth when the price is a trainable parameter.
    pub learned_price: Option<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Anything whose parameters can be placed on a graph and updated from a flat vector.
pub trait Trainable {
    /// Registers the parameters as leaves; the order defines the flat layout.
    fn bind(&self, g: &mut Graph) -> Vec<Var>;
    fn flat_params(&self) -> Vec<f64>;
    fn set_flat_params(&mut self, params: &[f64]);
}

impl Trainable for Mlp {
    fn bind(&self, g: &mut Graph) -> Vec<Var> {
        Mlp::bind(self, g)
    }

    fn flat_params(&self) -> Vec<f64> {
        self.params().to_vec()
    }

    fn set_flat_params(&mut self, params: &[f64]) {
        self.params_mut().copy_from_slice(params);
    }
}

/// A bare parameter vector, bound as one `1 x n` leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl Trainable for ParamVector {
    fn bind(&self, g: &mut Graph) -> Vec<Var> {
        vec![g.param(Tensor::row(self.0.clone()))]
    }

    fn flat_params(&self) -> Vec<f64> {
        self.0.clone()
    }

    fn set_flat_params(&mut self, params: &[f64]) {
        self.0.copy_from_slice(params);
    }
}

/// Runs the optimization loop.
///
/// `objective(model, graph, params, rng, iteration)` builds the scalar loss
/// for one freshly drawn batch. The rng is the `"batch"` substream of
/// `config.seed`, so identical seeds give bit-identical trajectories.
pub fn train<M, F>(model: &mut M, config: &TrainConfig, mut objective: F) -> Result<TrainReport>
where
    M: Trainable,
    F: FnMut(&mut M, &mut Graph, &[Var], &mut StreamRng, usize) -> Result<Var>,
{
    config.validate()?;
    let mut rng = substream(config.seed, "batch", 0);
    let mut params = model.flat_params();
    let mut adam = AdamState::with_lr(params.len(), config.learning_rate);
    let mut losses = Vec::with_capacity(config.iterations);
    let mut best = f64::INFINITY;
    let mut last_improvement = 0;

    for it in 0..config.iterations {
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let loss = objective(model, &mut g, &vars, &mut rng, it)?;
        let value = g.value(loss);
        if !value.is_scalar() {
            return Err(DermError::Contract(format!("objective returned shape {:?}", value.shape())));
        }
        let value = value.item();
        if !value.is_finite() {
            return Err(DermError::Training {
                iteration: it + 1,
                reason: format!("loss is {value}"),
            });
        }
        let grads = g.backward(loss)?;
        let flat = grads.flatten(&vars);
        adam.lr = config.lr_at(it);
        adam_step(&mut params, &flat, &mut adam).map_err(|e| match e {
            DermError::Training { reason, .. } => DermError::Training { iteration: it + 1, reason },
            other => other,
        })?;
        model.set_flat_params(&params);
        losses.push(value);

        if let StopRule::Plateau { tol_rel, patience } = config.stop {
            if value < best - tol_rel * best.abs() {
                best = value;
                last_improvement = it;
            } else if it - last_improvement >= patience {
                break;
            }
        }
    }

    Ok(TrainReport {
        iterations: losses.len(),
        losses,
        params,
        seed: config.seed,
        evaluation: None,
        learned_price: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn convex_quadratic_converges() {
        let mut theta = ParamVector(vec![0.0]);
        let cfg = TrainConfig::new(1, 5000, 1).with_lr(0.01);
        train(&mut theta, &cfg, |_, g, p, _, _| {
            let d = g.add_const(p[0], -3.0);
            let sq = g.square(d);
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!((theta.0[0] - 3.0).abs() < 1e-2, "theta = {}", theta.0[0]);
    }

    fn noisy_mean_run(seed: u64) -> (f64, Vec<f64>) {
        let mut theta = ParamVector(vec![1.0]);
        let cfg = TrainConfig::new(512, 3000, seed).with_lr(0.01);
        let rep = train(&mut theta, &cfg, |_, g, p, rng, _| {
            let z: Vec<f64> = (0..512).map(|_| StandardNormal.sample(rng)).collect();
            let b = g.broadcast_rows(p[0], 512);
            let d = g.sub_const(b, &Tensor::column(z))?;
            let sq = g.square(d);
            Ok(g.mean(sq))
        })
        .unwrap();
        (theta.0[0], rep.losses)
    }

    #[test]
    fn empirical_mean_minimizer_and_determinism() {
        let (theta, losses) = noisy_mean_run(9);
        assert!(theta.abs() < 0.05, "theta = {theta}");
        let (theta2, losses2) = noisy_mean_run(9);
        assert_eq!(theta.to_bits(), theta2.to_bits());
        assert_eq!(losses, losses2);
    }

    #[test]
    fn non_finite_loss_carries_iteration() {
        let mut theta = ParamVector(vec![0.0]);
        let cfg = TrainConfig::new(1, 10, 0);
        let err = train(&mut theta, &cfg, |_, g, p, _, it| {
            let s = g.sum(p[0]);
            Ok(if it == 3 { g.scale(s, f64::NAN) } else { s })
        })
        .unwrap_err();
        assert!(matches!(err, DermError::Training { iteration: 4, .. }));
    }

    #[test]
    fn plateau_rule_stops_early() {
        let mut theta = ParamVector(vec![0.0]);
        let cfg = TrainConfig::new(1, 100_000, 0).with_stop(StopRule::Plateau { tol_rel: 1e-4, patience: 50 });
        let rep = train(&mut theta, &cfg, |_, g, p, _, _| {
            let c = g.scale(p[0], 0.0);
            let s = g.sum(c);
            Ok(g.add_const(s, 1.0))
        })
        .unwrap();
        assert_eq!(rep.iterations, 51);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut theta = ParamVector(vec![0.0]);
        let cfg = TrainConfig::new(0, 10, 0);
        assert!(train(&mut theta, &cfg, |_, g, p, _, _| Ok(g.sum(p[0]))).is_err());
    }
}
