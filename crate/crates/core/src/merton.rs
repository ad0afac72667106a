//! Two-period exponential-utility investment and the overlearning experiment.
//!
//! In the first period the investor holds `1/d` in each asset, so
//! `X_1 = mean(Z_1) - r`. In the second period a network maps `Z_1` to a
//! position `pi_1` and `X_2 = (1 + r) X_1 + pi_1 . (Z_2 - r 1)`. The value is
//! `E[U(X_2)]` with `U(x) = 1 - e^{-x}`.
//!
//! Because `Z_2` is independent of `Z_1` the optimal position is the constant
//! `Sigma^{-1}(mu - r 1)`, so any dependence of a trained network on `Z_1` is
//! fitted noise. On a fixed dataset this shows up as in-sample values above
//! the true optimum and out-of-sample values below it.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{DermError, Result};
use crate::nn::{Activation, Mlp, Mode};
use crate::optim::{adam_step, AdamState};
use crate::rng::{child_seed, substream, StreamRng};
use crate::tensor::Tensor;

/// `U(x) = 1 - e^{-x}`.
pub fn utility(x: f64) -> f64 {
    1.0 - (-x).exp()
}

/// The cash amount with utility `v`: `-ln(1 - v)`.
pub fn certainty_equivalent(v: f64) -> Result<f64> {
    if !(v < 1.0) {
        return Err(DermError::Domain(format!("certainty equivalent needs v < 1, got {v}")));
    }
    Ok(-(1.0 - v).ln())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// One dataset sampled once and reused every epoch.
    FixedDataset,
    /// A fresh batch every iteration.
    Continual,
}

/// Gaussian returns, i.i.d. across the two periods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MertonSpec {
    pub d: usize,
    pub mu: Vec<f64>,
    /// Row-major `d x d` covariance of one period's returns.
    pub cov: Vec<f64>,
    pub rate: f64,
    pub n_data: usize,
    pub regime: Regime,
}

impl MertonSpec {
    /// `mu_i = 0.03 + 0.02 i / d`, covariance `0.04` times the equicorrelated
    /// matrix `0.7 I + 0.3 11^T / d` rescaled to unit diagonal, `r = 0`.
    pub fn default_for(d: usize, n_data: usize, regime: Regime) -> Self {
        let mu = (1..=d).map(|i| 0.03 + 0.02 * i as f64 / d as f64).collect();
        let diag = 0.7 + 0.3 / d as f64;
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let c = if i == j { 0.7 } else { 0.0 } + 0.3 / d as f64;
                cov[i * d + j] = 0.04 * c / diag;
            }
        }
        Self {
            d,
            mu,
            cov,
            rate: 0.0,
            n_data,
            regime,
        }
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.d, self.d, &self.cov)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d;
        if d == 0 || self.mu.len() != d || self.cov.len() != d * d {
            return Err(DermError::Dimension("mean and covariance must match d".into()));
        }
        let c = self.cov_matrix();
        if (0..d).any(|i| (0..d).any(|j| (c[(i, j)] - c[(j, i)]).abs() > 1e-12)) {
            return Err(DermError::Model("covariance must be symmetric".into()));
        }
        if c.cholesky().is_none() {
            return Err(DermError::Model("covariance must be positive definite".into()));
        }
        if self.n_data < 2 {
            return Err(DermError::Contract("n_data must be at least 2".into()));
        }
        Ok(())
    }

    fn factor(&self) -> Result<DMatrix<f64>> {
        self.cov_matrix()
            .cholesky()
            .map(|c| c.l())
            .ok_or_else(|| DermError::Model("covariance must be positive definite".into()))
    }
}

/// Closed-form optimum of the second-period problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MertonOptimum {
    pub position: Vec<f64>,
    pub value: f64,
    pub ce: f64,
}

/// `a* = Sigma^{-1}(mu - r 1)` and the exact optimal value.
///
/// With `X_1 ~ N(m_1, s_1^2)`, `m_1 = mean(mu) - r`, `s_1^2 = 1^T Sigma 1 / d^2`,
/// the certainty equivalent is
/// `(1 + r) m_1 - (1 + r)^2 s_1^2 / 2 + (mu - r)^T Sigma^{-1} (mu - r) / 2`.
pub fn closed_form_optimum(spec: &MertonSpec) -> Result<MertonOptimum> {
    spec.validate()?;
    let d = spec.d;
    let c = spec.cov_matrix();
    let excess = DVector::from_iterator(d, spec.mu.iter().map(|m| m - spec.rate));
    let lu = c.clone().lu();
    let a = lu.solve(&excess).ok_or_else(|| DermError::Model("singular covariance".into()))?;
    let growth = 1.0 + spec.rate;
    let m1 = spec.mu.iter().sum::<f64>() / d as f64 - spec.rate;
    let s1_sq = c.sum() / (d * d) as f64;
    let ce = growth * m1 - 0.5 * growth * growth * s1_sq + 0.5 * excess.dot(&a);
    Ok(MertonOptimum {
        position: a.iter().cloned().collect(),
        value: utility(ce),
        ce,
    })
}

/// `E[U(X_2)]` for a constant position `a`, from the Gaussian moment generating function.
pub fn constant_position_value(spec: &MertonSpec, a: &[f64]) -> f64 {
    let d = spec.d;
    let c = spec.cov_matrix();
    let av = DVector::from_column_slice(a);
    let growth = 1.0 + spec.rate;
    let m1 = spec.mu.iter().sum::<f64>() / d as f64 - spec.rate;
    let s1_sq = c.sum() / (d * d) as f64;
    let drift: f64 = a.iter().zip(&spec.mu).map(|(ai, mi)| ai * (mi - spec.rate)).sum();
    let var = (av.transpose() * &c * &av)[(0, 0)];
    let log_e = -growth * m1 + 0.5 * growth * growth * s1_sq - drift + 0.5 * var;
    1.0 - log_e.exp()
}

/// Samples of `(Z_1, Z_2)`, each `n x d` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnSample {
    pub n: usize,
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
}

pub fn sample_returns(spec: &MertonSpec, n: usize, rng: &mut StreamRng) -> Result<ReturnSample> {
    let l = spec.factor()?;
    let d = spec.d;
    let draw = |rng: &mut StreamRng| {
        let mut out = Vec::with_capacity(n * d);
        let mut e = vec![0.0; d];
        for _ in 0..n {
            e.iter_mut().for_each(|x| *x = StandardNormal.sample(rng));
            for i in 0..d {
                let shock: f64 = (0..=i).map(|j| l[(i, j)] * e[j]).sum();
                out.push(spec.mu[i] + shock);
            }
        }
        out
    };
    let z1 = draw(rng);
    let z2 = draw(rng);
    Ok(ReturnSample { n, z1, z2 })
}

impl ReturnSample {
    fn subset(&self, idx: &[usize], d: usize) -> ReturnSample {
        let mut z1 = Vec::with_capacity(idx.len() * d);
        let mut z2 = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            z1.extend_from_slice(&self.z1[i * d..(i + 1) * d]);
            z2.extend_from_slice(&self.z2[i * d..(i + 1) * d]);
        }
        ReturnSample { n: idx.len(), z1, z2 }
    }
}

/// Network architecture and optimization budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MertonTraining {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epoch cap in the fixed-dataset regime.
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Share of the dataset held out for the stopping rule.
    pub validation_fraction: f64,
    /// Iterations in the continual regime.
    pub iterations: usize,
    /// Size of the fresh out-of-sample set.
    pub n_out: usize,
}

impl Default for MertonTraining {
    fn default() -> Self {
        Self {
            hidden: vec![10, 10, 10],
            activation: Activation::Relu,
            batch_size: 256,
            learning_rate: 1e-3,
            max_epochs: 200,
            patience: 10,
            validation_fraction: 0.1,
            iterations: 5000,
            n_out: 200_000,
        }
    }
}

/// One trained run, measured in and out of sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub v_in: f64,
    pub v_out: f64,
    pub ce_in: f64,
    pub ce_out: f64,
    pub ce_out_std_error: f64,
    pub v_star: f64,
    pub ce_star: f64,
    /// `(ce_in - ce*) / |ce*|`.
    pub p_in: f64,
    /// `(ce_out - ce*) / |ce*|`.
    pub p_out: f64,
    pub epochs: usize,
}

impl UtilityReport {
    pub fn gap(&self) -> f64 {
        self.p_in - self.p_out
    }
}

struct Policy {
    net: Mlp,
    loc: Vec<f64>,
    inv_scale: Vec<f64>,
}

impl Policy {
    fn standardize(&self, z1: &[f64], n: usize) -> Tensor {
        let d = self.loc.len();
        let mut x = Vec::with_capacity(n * d);
        for row in z1.chunks_exact(d) {
            for j in 0..d {
                x.push((row[j] - self.loc[j]) * self.inv_scale[j]);
            }
        }
        Tensor::matrix(n, d, x)
    }

    /// Per-sample `exp(-X_2)` in evaluation mode.
    fn exp_losses(&self, spec: &MertonSpec, data: &ReturnSample) -> Result<Vec<f64>> {
        let d = spec.d;
        let pi = self.net.predict(&self.standardize(&data.z1, data.n))?;
        let growth = 1.0 + spec.rate;
        Ok((0..data.n)
            .map(|i| {
                let z1 = &data.z1[i * d..(i + 1) * d];
                let z2 = &data.z2[i * d..(i + 1) * d];
                let x1 = z1.iter().sum::<f64>() / d as f64 - spec.rate;
                let gain: f64 = (0..d).map(|j| pi.data()[i * d + j] * (z2[j] - spec.rate)).sum();
                (-(growth * x1 + gain)).exp()
            })
            .collect())
    }

    fn loss_node(&mut self, g: &mut Graph, vars: &[Var], spec: &MertonSpec, data: &ReturnSample) -> Result<Var> {
        let d = spec.d;
        let growth = 1.0 + spec.rate;
        let x = g.constant(self.standardize(&data.z1, data.n));
        let pi = self.net.forward_graph(g, vars, x, Mode::Train)?;
        let excess = Tensor::matrix(data.n, d, data.z2.iter().map(|z| z - spec.rate).collect());
        let gain = g.mul_const(pi, &excess)?;
        let gain = g.row_sums(gain);
        let neg_x1: Vec<f64> = data
            .z1
            .chunks_exact(d)
            .map(|z| -growth * (z.iter().sum::<f64>() / d as f64 - spec.rate))
            .collect();
        let x2 = g.sub_const(gain, &Tensor::column(neg_x1))?;
        let neg = g.scale(x2, -1.0);
        let e = g.exp(neg);
        Ok(g.mean(e))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trains one second-period policy and measures it.
pub fn train_merton(spec: &MertonSpec, cfg: &MertonTraining, seed: u64) -> Result<UtilityReport> {
    spec.validate()?;
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(DermError::Contract("invalid Merton training budget".into()));
    }
    let d = spec.d;
    let optimum = closed_form_optimum(spec)?;
    let mut sizes = vec![d];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(d);
    let mut policy = Policy {
        net: Mlp::new(&sizes, cfg.activation, false, &mut substream(seed, "init", 0))?,
        loc: spec.mu.clone(),
        inv_scale: (0..d).map(|i| 1.0 / spec.cov[i * d + i].sqrt()).collect(),
    };
    let mut adam = AdamState::with_lr(policy.net.num_params(), cfg.learning_rate);
    let mut params = policy.net.params().to_vec();
    let step = |policy: &mut Policy, adam: &mut AdamState, params: &mut Vec<f64>, batch: &ReturnSample| -> Result<f64> {
        let mut g = Graph::new();
        let vars = policy.net.bind(&mut g);
        let loss = policy.loss_node(&mut g, &vars, spec, batch)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(DermError::Training {
                iteration: adam.step as usize + 1,
                reason: format!("loss is {value}"),
            });
        }
        let grad = g.backward(loss)?.flatten(&vars);
        adam_step(params, &grad, adam)?;
        policy.net.params_mut().copy_from_slice(params);
        Ok(value)
    };

    let (train_set, epochs) = match spec.regime {
        Regime::FixedDataset => {
            let data = sample_returns(spec, spec.n_data, &mut substream(seed, "data", 0))?;
            let n_val = ((spec.n_data as f64 * cfg.validation_fraction).round() as usize).clamp(1, spec.n_data - 1);
            let n_fit = spec.n_data - n_val;
            let fit = data.subset(&(0..n_fit).collect::<Vec<_>>(), d);
            let val = data.subset(&(n_fit..spec.n_data).collect::<Vec<_>>(), d);
            let mut rng = substream(seed, "shuffle", 0);
            let mut order: Vec<usize> = (0..n_fit).collect();
            let mut best = (f64::INFINITY, params.clone(), 0);
            let mut epochs = 0;
            for epoch in 0..cfg.max_epochs {
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.batch_size) {
                    step(&mut policy, &mut adam, &mut params, &fit.subset(chunk, d))?;
                }
                epochs = epoch + 1;
                let val_loss = mean(&policy.exp_losses(spec, &val)?);
                if val_loss < best.0 {
                    best = (val_loss, params.clone(), epoch);
                } else if epoch - best.2 >= cfg.patience {
                    break;
                }
            }
            params = best.1;
            policy.net.params_mut().copy_from_slice(&params);
            (fit, epochs)
        }
        Regime::Continual => {
            let mut rng = substream(seed, "batch", 0);
            let mut last = None;
            for _ in 0..cfg.iterations {
                let batch = sample_returns(spec, cfg.batch_size, &mut rng)?;
                step(&mut policy, &mut adam, &mut params, &batch)?;
                last = Some(batch);
            }
            (last.ok_or_else(|| DermError::Contract("no iterations".into()))?, 0)
        }
    };

    let in_losses = policy.exp_losses(spec, &train_set)?;
    let out_set = sample_returns(spec, cfg.n_out, &mut substream(seed, "out-of-sample", 0))?;
    let out_losses = policy.exp_losses(spec, &out_set)?;
    let (e_in, e_out) = (mean(&in_losses), mean(&out_losses));
    let var_out = out_losses.iter().map(|e| (e - e_out).powi(2)).sum::<f64>() / (out_losses.len() as f64 - 1.0);
    let (v_in, v_out) = (1.0 - e_in, 1.0 - e_out);
    let (ce_in, ce_out) = (certainty_equivalent(v_in)?, certainty_equivalent(v_out)?);
    let denom = optimum.ce.abs();
    Ok(UtilityReport {
        v_in,
        v_out,
        ce_in,
        ce_out,
        ce_out_std_error: (var_out / out_losses.len() as f64).sqrt() / e_out,
        v_star: optimum.value,
        ce_star: optimum.ce,
        p_in: (ce_in - optimum.ce) / denom,
        p_out: (ce_out - optimum.ce) / denom,
        epochs,
    })
}

/// Mean and standard deviation over repeats, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlearningSummary {
    pub d: usize,
    pub repeats: usize,
    pub p_in_mean: f64,
    pub p_in_std: f64,
    pub gap_mean: f64,
    pub gap_std: f64,
    pub reports: Vec<UtilityReport>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = mean(v);
    let s = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, s)
}

/// Runs `repeats` independent trainings, each with its own dataset and seed.
pub fn run_overlearning_experiment(spec: &MertonSpec, cfg: &MertonTraining, repeats: usize, seed: u64) -> Result<OverlearningSummary> {
    if repeats == 0 {
        return Err(DermError::Contract("at least one repeat is needed".into()));
    }
    let reports: Vec<UtilityReport> = (0..repeats)
        .into_par_iter()
        .map(|k| train_merton(spec, cfg, child_seed(seed, "repeat", k as u64)))
        .collect::<Result<_>>()?;
    let p_in: Vec<f64> = reports.iter().map(|r| 100.0 * r.p_in).collect();
    let gap: Vec<f64> = reports.iter().map(|r| 100.0 * r.gap()).collect();
    let (p_in_mean, p_in_std) = mean_std(&p_in);
    let (gap_mean, gap_std) = mean_std(&gap);
    Ok(OverlearningSummary {
        d: spec.d,
        repeats,
        p_in_mean,
        p_in_std,
        gap_mean,
        gap_std,
        reports,
    })
}

/// `dims,p_in_mean,p_in_std,gap_mean,gap_std` with values in percent.
pub fn write_overlearning_csv<W: Write>(rows: &[OverlearningSummary], mut w: W) -> Result<()> {
    writeln!(w, "dims,p_in_mean,p_in_std,gap_mean,gap_std")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.d, r.p_in_mean, r.p_in_std, r.gap_mean, r.gap_std)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn certainty_equivalent_examples() {
        assert_eq!(certainty_equivalent(0.0).unwrap(), 0.0);
        assert!((certainty_equivalent(1.0 - (-1.0f64).exp()).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(certainty_equivalent(1.0), Err(DermError::Domain(_))));
    }

    #[test]
    fn no_excess_return_means_no_position() {
        let mut spec = MertonSpec::default_for(3, 10, Regime::Continual);
        spec.mu = vec![0.02; 3];
        spec.rate = 0.02;
        let opt = closed_form_optimum(&spec).unwrap();
        assert!(opt.position.iter().all(|a| a.abs() < 1e-15));
    }

    #[test]
    fn one_dimensional_optimum() {
        let spec = MertonSpec {
            d: 1,
            mu: vec![0.05],
            cov: vec![0.04],
            rate: 0.0,
            n_data: 10,
            regime: Regime::Continual,
        };
        let opt = closed_form_optimum(&spec).unwrap();
        assert!((opt.position[0] - 1.25).abs() < 1e-12);
        assert!((constant_position_value(&spec, &opt.position) - opt.value).abs() < 1e-14);
    }

    #[test]
    fn default_covariance_has_unit_correlation_diagonal() {
        let spec = MertonSpec::default_for(10, 10, Regime::Continual);
        for i in 0..10 {
            assert!((spec.cov[i * 10 + i] - 0.04).abs() < 1e-15);
        }
        spec.validate().unwrap();
    }

    #[test]
    fn sampled_moments_match() {
        let spec = MertonSpec::default_for(3, 10, Regime::Continual);
        let s = sample_returns(&spec, 200_000, &mut substream(1, "m", 0)).unwrap();
        for j in 0..3 {
            let m: f64 = s.z2.iter().skip(j).step_by(3).sum::<f64>() / 200_000.0;
            assert!((m - spec.mu[j]).abs() < 4.0 * 0.2 / 200_000f64.sqrt());
        }
        let c01: f64 = s.z1.chunks_exact(3).map(|z| (z[0] - spec.mu[0]) * (z[1] - spec.mu[1])).sum::<f64>() / 200_000.0;
        assert!((c01 - spec.cov[1]).abs() < 5e-4);
    }

    #[test]
    fn two_dimensional_optimum_matches_grid_search() {
        let spec = MertonSpec::default_for(2, 10, Regime::Continual);
        let opt = closed_form_optimum(&spec).unwrap();
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for i in 0..=400 {
            for j in 0..=400 {
                let a = [-2.0 + 0.02 * i as f64, -2.0 + 0.02 * j as f64];
                let v = constant_position_value(&spec, &a);
                if v > best.0 {
                    best = (v, a[0], a[1]);
                }
            }
        }
        assert!((best.1 - opt.position[0]).abs() <= 0.01 + 1e-12);
        assert!((best.2 - opt.position[1]).abs() <= 0.01 + 1e-12);
        assert!(opt.value >= best.0);
        assert!((utility(opt.ce) - opt.value).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn certainty_equivalent_inverts_utility(x in -5.0f64..5.0) {
            let ce = certainty_equivalent(utility(x)).unwrap();
            proptest::prop_assert!((ce - x).abs() < 1e-9 * (1.0 + x.abs()) * x.exp().max(1.0));
        }
    }
}
