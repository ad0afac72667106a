//! Quadratic hedging of a European call under Heston.
//!
//! The self-financing wealth follows `X_{t+1} = (1 + r_t) X_t + pi_t (Z_{t+1} - r_t)`
//! with per-period rate `r_t = r dt_t` and dollar holding `pi_t` in the stock.
//! Since the recursion is affine in the initial wealth, it is carried as
//! `X_t = x B_t + G_t` with `B_t` the money-market growth and `G_t` the
//! wealth started from zero.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{DermError, Result};
use crate::markets::{simulate_heston, HestonParams, PathBatch, TimeMesh};
use crate::nn::{Activation, Mlp, Mode};
use crate::oracles::black_scholes::call_delta;
use crate::tensor::Tensor;
use crate::train::{train, TrainConfig, TrainReport, Trainable};

/// Initial wealth handling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WealthMode {
    Fixed {
        x: f64,
    },
    /// Trained jointly with the policy; the result is the quadratic-hedging price.
    Learnable,
}

/// Inputs of the hedging policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HedgeEncoding {
    /// `(t / T, S_t / S_0)`.
    TimePrice,
    /// `(t / T, X_t / S_0, Z_t)`, the wealth-feedback form.
    TimeWealthReturn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HedgingSpec {
    pub strike: f64,
    pub market: HestonParams,
    pub mesh: TimeMesh,
    pub wealth: WealthMode,
    pub encoding: HedgeEncoding,
    /// The learnable price is `price_scale * theta_x`, so one optimizer step
    /// moves it by about `learning_rate * price_scale`.
    #[serde(default = "default_price_scale")]
    pub price_scale: f64,
}

fn default_price_scale() -> f64 {
    10.0
}

impl HedgingSpec {
    /// The one-month, 22-step setup of the hedging table.
    pub fn table(strike: f64, wealth: WealthMode) -> Self {
        Self {
            strike,
            market: HestonParams::hedging_table(),
            mesh: TimeMesh::uniform(1.0 / 12.0, 22).expect("valid mesh"),
            wealth,
            encoding: HedgeEncoding::TimePrice,
            price_scale: default_price_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.strike > 0.0) {
            return Err(DermError::Contract("strike must be positive".into()));
        }
        if !(self.price_scale > 0.0) {
            return Err(DermError::Contract("price_scale must be positive".into()));
        }
        self.market.validate()
    }

    pub fn payoff(&self, s: f64) -> f64 {
        (s - self.strike).max(0.0)
    }

    fn period_rates(&self) -> Vec<f64> {
        (0..self.mesh.steps()).map(|k| self.market.rate * self.mesh.dt(k)).collect()
    }

    fn input_dim(&self) -> usize {
        match self.encoding {
            HedgeEncoding::TimePrice => 2,
            HedgeEncoding::TimeWealthReturn => 3,
        }
    }
}

/// A feedback hedge `pi = scale * net(inputs)` in dollars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HedgePolicy {
    pub net: Mlp,
    pub scale: f64,
}

impl HedgePolicy {
    /// Two hidden ReLU layers with batch normalization, as used for the table.
    pub fn default_for<R: Rng + ?Sized>(spec: &HedgingSpec, rng: &mut R) -> Result<Self> {
        Self::new(spec, &[20, 20], Activation::Relu, true, rng)
    }

    pub fn new<R: Rng + ?Sized>(spec: &HedgingSpec, hidden: &[usize], activation: Activation, batch_norm: bool, rng: &mut R) -> Result<Self> {
        let mut sizes = vec![spec.input_dim()];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(Self {
            net: Mlp::new(&sizes, activation, batch_norm, rng)?,
            scale: spec.market.s0,
        })
    }

    /// The policy that never holds stock.
    pub fn zero(spec: &HedgingSpec) -> Self {
        Self {
            net: Mlp::zeroed(&[spec.input_dim(), 1], Activation::Identity, false),
            scale: spec.market.s0,
        }
    }

    /// Dollar holdings for a block of encoded inputs (evaluation mode).
    pub fn holdings(&self, inputs: &Tensor) -> Result<Vec<f64>> {
        Ok(self.net.predict(inputs)?.data().iter().map(|v| v * self.scale).collect())
    }
}

/// Per-path hedging results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HedgeOutcome {
    pub terminal_wealth: Vec<f64>,
    pub payoff: Vec<f64>,
    /// `phi(S_T) - X_T`.
    pub error: Vec<f64>,
    pub mse: f64,
    pub mean_error: f64,
    /// Population variance of the error.
    pub error_variance: f64,
}

impl HedgeOutcome {
    fn from_paths(terminal_wealth: Vec<f64>, payoff: Vec<f64>) -> Self {
        let error: Vec<f64> = payoff.iter().zip(&terminal_wealth).map(|(p, x)| p - x).collect();
        let n = error.len() as f64;
        let mean_error = error.iter().sum::<f64>() / n;
        let error_variance = error.iter().map(|e| (e - mean_error).powi(2)).sum::<f64>() / n;
        let mse = error.iter().map(|e| e * e).sum::<f64>() / n;
        Self {
            terminal_wealth,
            payoff,
            error,
            mse,
            mean_error,
            error_variance,
        }
    }
}

fn time_price_inputs(spec: &HedgingSpec, batch: &PathBatch) -> Tensor {
    let n = spec.mesh.steps();
    let t_mat = spec.mesh.maturity();
    let s0 = spec.market.s0;
    let mut x = Vec::with_capacity(batch.paths() * n * 2);
    for i in 0..batch.paths() {
        for t in 0..n {
            x.push(spec.mesh.times()[t] / t_mat);
            x.push(batch.price(i, t, 0) / s0);
        }
    }
    Tensor::matrix(batch.paths() * n, 2, x)
}

fn check_batch(spec: &HedgingSpec, batch: &PathBatch) -> Result<()> {
    if batch.dim() != 1 || batch.mesh() != &spec.mesh {
        return Err(DermError::Contract("batch does not match the hedging spec".into()));
    }
    Ok(())
}

/// Rolls the wealth recursion forward from `x` on every path.
pub fn wealth_rollout(policy: &HedgePolicy, x: f64, batch: &PathBatch, spec: &HedgingSpec) -> Result<HedgeOutcome> {
    check_batch(spec, batch)?;
    let n = spec.mesh.steps();
    let m = batch.paths();
    let rates = spec.period_rates();
    let t_mat = spec.mesh.maturity();
    let s0 = spec.market.s0;
    let mut growth = 1.0;
    let mut gains = vec![0.0; m];
    match spec.encoding {
        HedgeEncoding::TimePrice => {
            let pi = policy.holdings(&time_price_inputs(spec, batch))?;
            for (i, g) in gains.iter_mut().enumerate() {
                for t in 0..n {
                    *g = (1.0 + rates[t]) * *g + pi[i * n + t] * (batch.ret(i, t, 0) - rates[t]);
                }
            }
            growth = rates.iter().map(|r| 1.0 + r).product();
        }
        HedgeEncoding::TimeWealthReturn => {
            for t in 0..n {
                let mut inp = Vec::with_capacity(3 * m);
                for (i, g) in gains.iter().enumerate() {
                    let z_t = if t == 0 { 0.0 } else { batch.ret(i, t - 1, 0) };
                    inp.extend([spec.mesh.times()[t] / t_mat, (x * growth + g) / s0, z_t]);
                }
                let pi = policy.holdings(&Tensor::matrix(m, 3, inp))?;
                for (i, g) in gains.iter_mut().enumerate() {
                    *g = (1.0 + rates[t]) * *g + pi[i] * (batch.ret(i, t, 0) - rates[t]);
                }
                growth *= 1.0 + rates[t];
            }
        }
    }
    let wealth: Vec<f64> = gains.iter().map(|g| x * growth + g).collect();
    if let Some(path) = wealth.iter().position(|w| !w.is_finite()) {
        return Err(DermError::Rollout { path });
    }
    let payoff = (0..m).map(|i| spec.payoff(batch.price(i, n, 0))).collect();
    Ok(HedgeOutcome::from_paths(wealth, payoff))
}

/// Hedging policy plus the scaled initial-wealth parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct HedgeModel {
    pub policy: HedgePolicy,
    /// `x / price_scale`; only trained when the wealth mode is learnable.
    pub theta_x: f64,
    pub learnable: bool,
    /// Keeps the policy fixed so that only the wealth is trained.
    pub frozen_policy: bool,
    pub price_scale: f64,
}

impl HedgeModel {
    pub fn new(policy: HedgePolicy, spec: &HedgingSpec) -> Self {
        let (x, learnable) = match spec.wealth {
            WealthMode::Fixed { x } => (x, false),
            // discounted intrinsic value as the starting guess
            WealthMode::Learnable => (
                (spec.market.s0 - spec.strike * (-spec.market.rate * spec.mesh.maturity()).exp()).max(0.0),
                true,
            ),
        };
        Self {
            policy,
            theta_x: x / spec.price_scale,
            learnable,
            frozen_policy: false,
            price_scale: spec.price_scale,
        }
    }

    pub fn initial_wealth(&self) -> f64 {
        self.theta_x * self.price_scale
    }
}

impl Trainable for HedgeModel {
    fn bind(&self, g: &mut Graph) -> Vec<Var> {
        // a frozen policy is placed on the graph as constants by the loss itself
        let mut vars = if self.frozen_policy { Vec::new() } else { self.policy.net.bind(g) };
        if self.learnable {
            vars.push(g.param(Tensor::scalar(self.theta_x)));
        }
        vars
    }

    fn flat_params(&self) -> Vec<f64> {
        let mut p = if self.frozen_policy {
            Vec::new()
        } else {
            self.policy.net.params().to_vec()
        };
        if self.learnable {
            p.push(self.theta_x);
        }
        p
    }

    fn set_flat_params(&mut self, params: &[f64]) {
        let n = if self.frozen_policy { 0 } else { self.policy.net.num_params() };
        self.policy.net.params_mut()[..n].copy_from_slice(&params[..n]);
        if self.learnable {
            self.theta_x = params[n];
        }
    }
}

/// Mean squared hedging error of one batch as a graph node.
fn hedge_loss(model: &mut HedgeModel, g: &mut Graph, vars: &[Var], batch: &PathBatch, spec: &HedgingSpec) -> Result<Var> {
    let n = spec.mesh.steps();
    let m = batch.paths();
    let rates = spec.period_rates();
    let frozen;
    let net_vars = if model.frozen_policy {
        frozen = model.policy.net.bind_frozen(g);
        &frozen[..]
    } else {
        &vars[..vars.len() - usize::from(model.learnable)]
    };
    let scale = model.policy.scale;
    let total_growth: f64 = rates.iter().map(|r| 1.0 + r).product();
    let x_node = if model.learnable {
        g.scale(vars[vars.len() - 1], model.price_scale * total_growth)
    } else {
        g.constant(Tensor::scalar(model.initial_wealth() * total_growth))
    };
    let gains = match spec.encoding {
        HedgeEncoding::TimePrice => {
            let inp = g.constant(time_price_inputs(spec, batch));
            let raw = model.policy.net.forward_graph(g, net_vars, inp, Mode::Train)?;
            let pi = g.reshape(raw, &[m, n])?;
            // weight of pi_t in X_T: (Z_{t+1} - r_t) times growth after t+1
            let mut w = Vec::with_capacity(m * n);
            for i in 0..m {
                for t in 0..n {
                    let after: f64 = rates[t + 1..].iter().map(|r| 1.0 + r).product();
                    w.push(scale * (batch.ret(i, t, 0) - rates[t]) * after);
                }
            }
            let weighted = g.mul_const(pi, &Tensor::matrix(m, n, w))?;
            g.row_sums(weighted)
        }
        HedgeEncoding::TimeWealthReturn => {
            let t_mat = spec.mesh.maturity();
            let s0 = spec.market.s0;
            let mut gains = g.constant(Tensor::zeros(&[m, 1]));
            let mut growth = 1.0;
            let x_unit = if model.learnable {
                g.scale(vars[vars.len() - 1], model.price_scale)
            } else {
                g.constant(Tensor::scalar(model.initial_wealth()))
            };
            for t in 0..n {
                let xg = g.scale(x_unit, growth);
                let wealth = g.add_scalar_var(gains, xg)?;
                let wealth = g.scale(wealth, 1.0 / s0);
                let mut tz = Vec::with_capacity(2 * m);
                for i in 0..m {
                    tz.push(spec.mesh.times()[t] / t_mat);
                    tz.push(if t == 0 { 0.0 } else { batch.ret(i, t - 1, 0) });
                }
                let tz = Tensor::matrix(m, 2, tz);
                let time_col = g.constant(Tensor::column(tz.data().iter().step_by(2).cloned().collect()));
                let ret_col = g.constant(Tensor::column(tz.data().iter().skip(1).step_by(2).cloned().collect()));
                let inp = g.concat_cols(&[time_col, wealth, ret_col])?;
                let raw = model.policy.net.forward_graph(g, net_vars, inp, Mode::Train)?;
                let dz: Vec<f64> = (0..m).map(|i| scale * (batch.ret(i, t, 0) - rates[t])).collect();
                let step = g.mul_const(raw, &Tensor::column(dz))?;
                let grown = g.scale(gains, 1.0 + rates[t]);
                gains = g.add(grown, step)?;
                growth *= 1.0 + rates[t];
            }
            gains
        }
    };
    let wealth = g.add_scalar_var(gains, x_node)?;
    let payoff: Vec<f64> = (0..m).map(|i| spec.payoff(batch.price(i, n, 0))).collect();
    let err = g.sub_const(wealth, &Tensor::column(payoff))?;
    let sq = g.square(err);
    Ok(g.mean(sq))
}

fn run_training(spec: &HedgingSpec, model: &mut HedgeModel, config: &TrainConfig) -> Result<TrainReport> {
    spec.validate()?;
    let batch_size = config.batch_size;
    let mut rep = train(model, config, |mdl, g, vars, rng, _| {
        let batch = simulate_heston(&spec.market, &spec.mesh, batch_size, rng)?;
        hedge_loss(mdl, g, vars, &batch, spec)
    })?;
    if model.learnable {
        rep.learned_price = Some(model.initial_wealth());
    }
    Ok(rep)
}

/// Minimizes the mean squared hedging error for a fixed initial wealth.
pub fn train_pure_hedge(spec: &HedgingSpec, policy: &mut HedgePolicy, config: &TrainConfig) -> Result<TrainReport> {
    if !matches!(spec.wealth, WealthMode::Fixed { .. }) {
        return Err(DermError::Contract("pure hedging needs a fixed initial wealth".into()));
    }
    let mut model = HedgeModel::new(policy.clone(), spec);
    let rep = run_training(spec, &mut model, config)?;
    *policy = model.policy;
    Ok(rep)
}

/// Minimizes jointly over the initial wealth and the policy; the learned
/// wealth is reported as the price.
pub fn train_price_and_hedge(spec: &HedgingSpec, policy: &mut HedgePolicy, config: &TrainConfig) -> Result<TrainReport> {
    if spec.wealth != WealthMode::Learnable {
        return Err(DermError::Contract("joint training needs a learnable initial wealth".into()));
    }
    let mut model = HedgeModel::new(policy.clone(), spec);
    let rep = run_training(spec, &mut model, config)?;
    *policy = model.policy;
    Ok(rep)
}

/// Black-Scholes delta hedge with volatility `sqrt(v0)`, in dollars.
pub fn black_scholes_hedge_outcome(spec: &HedgingSpec, x: f64, batch: &PathBatch) -> Result<HedgeOutcome> {
    check_batch(spec, batch)?;
    let n = spec.mesh.steps();
    let rates = spec.period_rates();
    let vol = spec.market.v0.sqrt();
    let t_mat = spec.mesh.maturity();
    let mut wealth = Vec::with_capacity(batch.paths());
    let mut payoff = Vec::with_capacity(batch.paths());
    for i in 0..batch.paths() {
        let mut w = x;
        for t in 0..n {
            let s = batch.price(i, t, 0);
            let tau = t_mat - spec.mesh.times()[t];
            let pi = s * call_delta(s, spec.strike, tau, spec.market.rate, 0.0, vol);
            w = (1.0 + rates[t]) * w + pi * (batch.ret(i, t, 0) - rates[t]);
        }
        wealth.push(w);
        payoff.push(spec.payoff(batch.price(i, n, 0)));
    }
    Ok(HedgeOutcome::from_paths(wealth, payoff))
}

/// Writes `path_id,time,S_t,X_t,pi_t` for the first `paths` paths.
pub fn write_hedge_trace<W: Write>(policy: &HedgePolicy, x: f64, batch: &PathBatch, spec: &HedgingSpec, paths: usize, mut w: W) -> Result<()> {
    check_batch(spec, batch)?;
    if spec.encoding != HedgeEncoding::TimePrice {
        return Err(DermError::Contract("traces are written for the (t, S) encoding".into()));
    }
    let n = spec.mesh.steps();
    let rates = spec.period_rates();
    let pi = policy.holdings(&time_price_inputs(spec, batch))?;
    writeln!(w, "path_id,time,S_t,X_t,pi_t")?;
    for i in 0..paths.min(batch.paths()) {
        let mut x_t = x;
        for t in 0..=n {
            let hold = if t < n { pi[i * n + t] } else { f64::NAN };
            writeln!(w, "{i},{},{},{},{}", spec.mesh.times()[t], batch.price(i, t, 0), x_t, hold)?;
            if t < n {
                x_t = (1.0 + rates[t]) * x_t + hold * (batch.ret(i, t, 0) - rates[t]);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markets::Measure;
    use crate::rng::substream;

    fn table_batch(m: usize, seed: u64) -> (HedgingSpec, PathBatch) {
        let spec = HedgingSpec::table(100.0, WealthMode::Fixed { x: 1.0 });
        let b = simulate_heston(&spec.market, &spec.mesh, m, &mut substream(seed, "h", 0)).unwrap();
        (spec, b)
    }

    #[test]
    fn zero_policy_keeps_wealth() {
        let (spec, b) = table_batch(200, 1);
        let out = wealth_rollout(&HedgePolicy::zero(&spec), 3.5, &b, &spec).unwrap();
        assert!(out.terminal_wealth.iter().all(|&x| x == 3.5));
        let out0 = wealth_rollout(&HedgePolicy::zero(&spec), 0.0, &b, &spec).unwrap();
        let direct: f64 = (0..200).map(|i| (b.price(i, 22, 0) - 100.0).max(0.0).powi(2)).sum::<f64>() / 200.0;
        assert!((out0.mse - direct).abs() < 1e-12 * direct.max(1.0));
    }

    #[test]
    fn one_step_arithmetic() {
        let mesh = TimeMesh::uniform(1.0, 1).unwrap();
        let mut spec = HedgingSpec::table(100.0, WealthMode::Fixed { x: 1.0 });
        spec.mesh = mesh.clone();
        let batch = PathBatch::from_prices(1, 1, mesh, vec![100.0, 110.0], Measure::RiskNeutral).unwrap();
        let mut policy = HedgePolicy::zero(&spec);
        // constant output 2 dollars: bias 2 / scale
        policy.net.bias_mut(0)[0] = 2.0 / policy.scale;
        let out = wealth_rollout(&policy, 1.0, &batch, &spec).unwrap();
        assert!((out.terminal_wealth[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn outcome_moments_and_translation() {
        let (spec, b) = table_batch(500, 2);
        let policy = HedgePolicy::default_for(&spec, &mut substream(2, "init", 0)).unwrap();
        let a = wealth_rollout(&policy, 1.0, &b, &spec).unwrap();
        let c = wealth_rollout(&policy, 3.25, &b, &spec).unwrap();
        let z = wealth_rollout(&policy, 0.0, &b, &spec).unwrap();
        assert!((a.mse - (a.mean_error.powi(2) + a.error_variance)).abs() < 1e-9);
        assert!((a.error_variance - c.error_variance).abs() < 1e-10);
        for i in 0..500 {
            assert_eq!(a.terminal_wealth[i], 1.0 + z.terminal_wealth[i]);
        }
    }

    #[test]
    fn graph_loss_matches_rollout() {
        for encoding in [HedgeEncoding::TimePrice, HedgeEncoding::TimeWealthReturn] {
            let (mut spec, b) = table_batch(64, 3);
            spec.encoding = encoding;
            spec.market.rate = 0.03;
            let policy = HedgePolicy::new(&spec, &[6], Activation::Tanh, false, &mut substream(3, "init", 0)).unwrap();
            let mut model = HedgeModel::new(policy.clone(), &spec);
            let mut g = Graph::new();
            let vars = model.bind(&mut g);
            let loss = hedge_loss(&mut model, &mut g, &vars, &b, &spec).unwrap();
            let out = wealth_rollout(&policy, 1.0, &b, &spec).unwrap();
            assert!((g.value(loss).item() - out.mse).abs() < 1e-9 * out.mse, "{encoding:?}");
        }
    }

    #[test]
    fn frozen_policy_learns_mean_payoff() {
        let spec = HedgingSpec::table(100.0, WealthMode::Learnable);
        let mut model = HedgeModel::new(HedgePolicy::zero(&spec), &spec);
        model.frozen_policy = true;
        let cfg = TrainConfig::new(512, 1500, 4).with_lr(0.01).with_lr_decay(0.02);
        let rep = run_training(&spec, &mut model, &cfg).unwrap();
        assert!(model.policy.net.params().iter().all(|&p| p == 0.0));
        // replay the training batches from the same substream
        let mut rng = crate::rng::substream(4, "batch", 0);
        let mut late = Vec::new();
        for it in 0..1500 {
            let b = simulate_heston(&spec.market, &spec.mesh, 512, &mut rng).unwrap();
            if it >= 500 {
                late.extend((0..512).map(|i| spec.payoff(b.price(i, 22, 0))));
            }
        }
        let mean = late.iter().sum::<f64>() / late.len() as f64;
        let learned = rep.learned_price.unwrap();
        assert!((learned - mean).abs() < 0.03, "{learned} vs {mean}");
    }

    #[test]
    fn black_scholes_benchmark_beats_no_hedge() {
        let (spec, b) = table_batch(4000, 5);
        let price = crate::oracles::heston_call(&spec.market, 100.0, spec.mesh.maturity()).unwrap().price;
        let bs = black_scholes_hedge_outcome(&spec, price, &b).unwrap();
        let none = wealth_rollout(&HedgePolicy::zero(&spec), price, &b, &spec).unwrap();
        assert!(bs.mse < 0.2 * none.mse, "{} vs {}", bs.mse, none.mse);
    }

    #[test]
    fn trace_has_header_and_rows() {
        let (spec, b) = table_batch(3, 6);
        let mut buf = Vec::new();
        write_hedge_trace(&HedgePolicy::zero(&spec), 2.0, &b, &spec, 2, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("path_id,time,S_t,X_t,pi_t\n"));
        assert_eq!(s.lines().count(), 1 + 2 * 23);
    }
}
