//! Optimal stopping with a neural free boundary.
//!
//! A [`BoundaryNet`] maps time (and, for the max-call, the direction
//! `s / m(s)`) to a boundary level `F`. Training maximizes the relaxed value
//! of the fuzzy rule `p_t = g(clamp(gap_t / eps))`; reported prices use the
//! sharp first-entry rule on independent risk-neutral paths.
//!
//! The signed gap is positive inside the stopping region: `F - s` for the put
//! (stop when the price falls to the boundary) and `m(s) - F` for the
//! max-call (stop when the largest asset reaches the boundary).

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{DermError, Result};
use crate::markets::{simulate_gbm, GbmParams, PathBatch, TimeMesh};
use crate::nn::{Activation, Mlp};
use crate::payoff::{max_component, Payoff};
use crate::rng::substream;
use crate::tensor::Tensor;
use crate::train::{train, Evaluation, TrainConfig, TrainReport, Trainable};

/// Profile `g : [-1, 1] -> [0, 1]`, increasing and onto.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Relaxation {
    /// `g(d) = (d + 1) / 2`.
    Linear,
    /// Logistic curve of steepness `k`, rescaled so that `g(-1) = 0` and `g(1) = 1`.
    ScaledSigmoid { k: f64 },
}

impl Relaxation {
    pub fn apply(&self, d: f64) -> f64 {
        let d = d.clamp(-1.0, 1.0);
        match *self {
            Relaxation::Linear => 0.5 * (d + 1.0),
            Relaxation::ScaledSigmoid { k } => {
                let lo = crate::autodiff::sigmoid(-k);
                let hi = crate::autodiff::sigmoid(k);
                ((crate::autodiff::sigmoid(k * d) - lo) / (hi - lo)).clamp(0.0, 1.0)
            }
        }
    }

    /// `g'(d)` on the open interval; zero outside `(-1, 1)` where the clamp is flat.
    pub fn derivative(&self, d: f64) -> f64 {
        if d <= -1.0 || d >= 1.0 {
            return 0.0;
        }
        match *self {
            Relaxation::Linear => 0.5,
            Relaxation::ScaledSigmoid { k } => {
                let lo = crate::autodiff::sigmoid(-k);
                let hi = crate::autodiff::sigmoid(k);
                let s = crate::autodiff::sigmoid(k * d);
                k * s * (1.0 - s) / (hi - lo)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Relaxation::Linear => Ok(()),
            Relaxation::ScaledSigmoid { k } if k > 0.0 && k.is_finite() => Ok(()),
            Relaxation::ScaledSigmoid { k } => Err(DermError::Contract(format!("sigmoid steepness must be positive, got {k}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoppingSpec {
    pub payoff: Payoff,
    pub rate: f64,
    pub mesh: TimeMesh,
    /// Half-width of the fuzzy band, in price units.
    pub epsilon: f64,
    pub relaxation: Relaxation,
    /// When set, the band shrinks geometrically to `epsilon * final_fraction`
    /// over the training run.
    #[serde(default)]
    pub epsilon_final_fraction: Option<f64>,
}

impl StoppingSpec {
    pub fn new(payoff: Payoff, rate: f64, mesh: TimeMesh, epsilon: f64) -> Self {
        Self {
            payoff,
            rate,
            mesh,
            epsilon,
            relaxation: Relaxation::Linear,
            epsilon_final_fraction: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if matches!(self.payoff, Payoff::Call { .. }) {
            return Err(DermError::Contract("stopping supports the put and the max-call".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(DermError::Contract(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if let Some(f) = self.epsilon_final_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(DermError::Contract("epsilon_final_fraction must lie in (0, 1]".into()));
            }
        }
        self.relaxation.validate()
    }

    /// `alpha(s)`: the state compared with the boundary.
    pub fn alpha(&self, s: &[f64]) -> f64 {
        match self.payoff {
            Payoff::MaxCall { .. } => max_component(s),
            _ => s[0],
        }
    }

    /// Signed distance into the stopping region.
    pub fn gap(&self, level: f64, s: &[f64]) -> f64 {
        match self.payoff {
            Payoff::MaxCall { .. } => max_component(s) - level,
            _ => level - s[0],
        }
    }

    /// `d gap / d level`.
    fn gap_sign(&self) -> f64 {
        match self.payoff {
            Payoff::MaxCall { .. } => -1.0,
            _ => 1.0,
        }
    }

    fn discount(&self, t: usize) -> f64 {
        (-self.rate * self.mesh.times()[t]).exp()
    }

    /// Band half-width used at training iteration `it` of `iterations`.
    pub fn epsilon_at(&self, it: usize, iterations: usize) -> f64 {
        match self.epsilon_final_fraction {
            Some(f) if iterations > 1 => self.epsilon * f.powf(it as f64 / (iterations - 1) as f64),
            _ => self.epsilon,
        }
    }

    fn check_batch(&self, batch: &PathBatch) -> Result<()> {
        if batch.mesh() != &self.mesh {
            return Err(DermError::Contract("batch mesh differs from the stopping mesh".into()));
        }
        let expected = if matches!(self.payoff, Payoff::MaxCall { .. }) { None } else { Some(1) };
        if let Some(d) = expected {
            if batch.dim() != d {
                return Err(DermError::Dimension(format!("put needs one asset, batch has {}", batch.dim())));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, as lowercase hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex(&Sha256::digest(&json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Conditional stopping probabilities and accumulated stopped mass, stored
/// path-major with `nodes = N + 1` entries per path.
#[derive(Clone, Debug, PartialEq)]
pub struct StopProbProcess {
    pub paths: usize,
    pub nodes: usize,
    pub p: Vec<f64>,
    pub xi: Vec<f64>,
}

impl StopProbProcess {
    /// Builds the process from probabilities, checking `p in [0, 1]` and `p_N = 1`.
    pub fn from_probs(paths: usize, nodes: usize, p: Vec<f64>) -> Result<Self> {
        if p.len() != paths * nodes {
            return Err(DermError::Dimension(format!(
                "{} probabilities for {paths} paths of {nodes} nodes",
                p.len()
            )));
        }
        let mut xi = Vec::with_capacity(p.len());
        for row in p.chunks_exact(nodes) {
            xi.extend(xi_recursion(row)?);
        }
        Ok(Self { paths, nodes, p, xi })
    }

    pub fn path_p(&self, i: usize) -> &[f64] {
        &self.p[i * self.nodes..(i + 1) * self.nodes]
    }

    pub fn path_xi(&self, i: usize) -> &[f64] {
        &self.xi[i * self.nodes..(i + 1) * self.nodes]
    }
}

/// `xi_0 = 0`, `xi_{t+1} = xi_t + p_t (1 - xi_t)` for one path of `p_0..p_N`.
pub fn xi_recursion(p: &[f64]) -> Result<Vec<f64>> {
    if p.is_empty() {
        return Err(DermError::Contract("empty probability path".into()));
    }
    if let Some(bad) = p.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(DermError::Contract(format!("stopping probability {bad} outside [0, 1]")));
    }
    if p[p.len() - 1] != 1.0 {
        return Err(DermError::Contract("the final stopping probability must be 1".into()));
    }
    let mut xi = Vec::with_capacity(p.len());
    let mut x = 0.0;
    for &pt in p {
        xi.push(x);
        x += pt * (1.0 - x);
    }
    Ok(xi)
}

/// Discounted payoffs `e^{-r t} phi(S_t)` per path and node.
fn discounted_payoffs(batch: &PathBatch, spec: &StoppingSpec) -> Vec<f64> {
    let nodes = spec.mesh.times().len();
    let disc: Vec<f64> = (0..nodes).map(|t| spec.discount(t)).collect();
    let mut out = Vec::with_capacity(batch.paths() * nodes);
    for i in 0..batch.paths() {
        for (t, dt) in disc.iter().enumerate() {
            out.push(dt * spec.payoff.value(batch.state(i, t)));
        }
    }
    out
}

/// Empirical relaxed value `E[sum_t p_t (1 - xi_t) e^{-r t} phi(S_t)]`.
pub fn relaxed_value(batch: &PathBatch, probs: &StopProbProcess, spec: &StoppingSpec) -> Result<f64> {
    batch.require_risk_neutral()?;
    spec.check_batch(batch)?;
    if probs.paths != batch.paths() || probs.nodes != spec.mesh.times().len() {
        return Err(DermError::Dimension("probability process does not match the batch".into()));
    }
    let y = discounted_payoffs(batch, spec);
    let mut sum = 0.0;
    for i in 0..batch.paths() {
        let (p, xi) = (probs.path_p(i), probs.path_xi(i));
        let yi = &y[i * probs.nodes..(i + 1) * probs.nodes];
        let v: f64 = (0..probs.nodes).map(|t| p[t] * (1.0 - xi[t]) * yi[t]).sum();
        sum += v;
    }
    Ok(sum / batch.paths() as f64)
}

/// How the boundary network sees the state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// Input `t / T`; the boundary is a curve in time.
    TimeOnly,
    /// Input `(t / T, s / m(s))`; the max-call boundary is a radius on the simplex.
    TimeAndSimplex,
}

/// A boundary network `F = scale * net(inputs)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryNet {
    pub net: Mlp,
    pub encoding: Encoding,
    pub scale: f64,
    pub maturity: f64,
}

impl BoundaryNet {
    /// A fresh network whose output starts close to the flat level `init_level`.
    pub fn new<R: Rng + ?Sized>(
        encoding: Encoding,
        dim: usize,
        hidden: &[usize],
        activation: Activation,
        scale: f64,
        init_level: f64,
        maturity: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let input = match encoding {
            Encoding::TimeOnly => 1,
            Encoding::TimeAndSimplex => 1 + dim,
        };
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut net = Mlp::new(&sizes, activation, false, rng)?;
        let last = sizes.len() - 2;
        net.weights_mut(last).iter_mut().for_each(|w| *w *= 0.1);
        net.bias_mut(last)[0] = init_level / scale;
        Ok(Self {
            net,
            encoding,
            scale,
            maturity,
        })
    }

    fn encode(&self, t: f64, s: &[f64], out: &mut Vec<f64>) {
        out.push(t / self.maturity);
        if self.encoding == Encoding::TimeAndSimplex {
            let m = max_component(s);
            out.extend(s.iter().map(|x| x / m));
        }
    }

    /// Boundary level at calendar time `t` and state `s`.
    pub fn level(&self, t: f64, s: &[f64]) -> Result<f64> {
        let mut x = Vec::new();
        self.encode(t, s, &mut x);
        let n = x.len();
        Ok(self.scale * self.net.predict(&Tensor::matrix(1, n, x))?.item())
    }

    /// Inputs for every node a batch needs, and whether they are shared across paths.
    fn batch_inputs(&self, batch: &PathBatch) -> (Tensor, bool) {
        let times = batch.mesh().times();
        let mut x = Vec::new();
        match self.encoding {
            Encoding::TimeOnly => {
                for &t in times {
                    x.push(t / self.maturity);
                }
                (Tensor::matrix(times.len(), 1, x), true)
            }
            Encoding::TimeAndSimplex => {
                for i in 0..batch.paths() {
                    for (k, &t) in times.iter().enumerate() {
                        self.encode(t, batch.state(i, k), &mut x);
                    }
                }
                let rows = batch.paths() * times.len();
                let cols = x.len() / rows;
                (Tensor::matrix(rows, cols, x), false)
            }
        }
    }

    /// Boundary levels per path and node, path-major.
    pub fn levels(&self, batch: &PathBatch) -> Result<Vec<f64>> {
        let (x, shared) = self.batch_inputs(batch);
        let raw = self.net.predict(&x)?;
        let f: Vec<f64> = raw.data().iter().map(|v| self.scale * v).collect();
        Ok(if shared {
            let mut out = Vec::with_capacity(batch.paths() * f.len());
            for _ in 0..batch.paths() {
                out.extend_from_slice(&f);
            }
            out
        } else {
            f
        })
    }
}

impl Trainable for BoundaryNet {
    fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.net.bind(g)
    }

    fn flat_params(&self) -> Vec<f64> {
        self.net.params().to_vec()
    }

    fn set_flat_params(&mut self, params: &[f64]) {
        self.net.params_mut().copy_from_slice(params);
    }
}

/// `p_t = g(clamp(gap_t / eps))` with `p_N = 1`.
pub fn fuzzy_stop_probs(boundary: &BoundaryNet, batch: &PathBatch, spec: &StoppingSpec) -> Result<StopProbProcess> {
    spec.validate()?;
    spec.check_batch(batch)?;
    let levels = boundary.levels(batch)?;
    fuzzy_probs_from_levels(&levels, batch, spec, spec.epsilon)
}

fn fuzzy_probs_from_levels(levels: &[f64], batch: &PathBatch, spec: &StoppingSpec, eps: f64) -> Result<StopProbProcess> {
    let nodes = spec.mesh.times().len();
    let mut p = Vec::with_capacity(levels.len());
    for i in 0..batch.paths() {
        for t in 0..nodes {
            p.push(if t + 1 == nodes {
                1.0
            } else {
                spec.relaxation.apply(spec.gap(levels[i * nodes + t], batch.state(i, t)) / eps)
            });
        }
    }
    StopProbProcess::from_probs(batch.paths(), nodes, p)
}

/// Relaxed value of the fuzzy rule as a graph node, differentiable in the levels.
///
/// `levels` holds one row per node (`shared`) or one row per (path, node).
/// The adjoint follows from the continuation recursion
/// `R_N = Y_N`, `R_t = p_t Y_t + (1 - p_t) R_{t+1}`, which gives
/// `dV/dp_t = (1 - xi_t)(Y_t - R_{t+1})` per path.
fn relaxed_value_node(g: &mut Graph, levels: Var, shared: bool, batch: &PathBatch, spec: &StoppingSpec, eps: f64) -> Var {
    let nodes = spec.mesh.times().len();
    let m = batch.paths();
    let lv = g.value(levels).data().to_vec();
    let y = discounted_payoffs(batch, spec);
    let sign = spec.gap_sign();
    let mut grad = vec![0.0; lv.len()];
    let mut total = 0.0;
    let mut p = vec![0.0; nodes];
    let mut dp = vec![0.0; nodes];
    let mut xi = vec![0.0; nodes];
    for i in 0..m {
        let yi = &y[i * nodes..(i + 1) * nodes];
        let row = |t: usize| if shared { t } else { i * nodes + t };
        for t in 0..nodes {
            if t + 1 == nodes {
                p[t] = 1.0;
                dp[t] = 0.0;
            } else {
                let d = spec.gap(lv[row(t)], batch.state(i, t)) / eps;
                p[t] = spec.relaxation.apply(d);
                dp[t] = spec.relaxation.derivative(d) * sign / eps;
            }
        }
        let mut x = 0.0;
        for t in 0..nodes {
            xi[t] = x;
            x += p[t] * (1.0 - x);
        }
        let mut r = yi[nodes - 1];
        for t in (0..nodes - 1).rev() {
            if dp[t] != 0.0 {
                grad[row(t)] += (1.0 - xi[t]) * (yi[t] - r) * dp[t] / m as f64;
            }
            r = p[t] * yi[t] + (1.0 - p[t]) * r;
        }
        total += r;
    }
    let value = Tensor::scalar(total / m as f64);
    let shape = g.value(levels).shape().to_vec();
    g.custom(
        &[levels],
        value,
        Box::new(move |up, _, _, needs| {
            if !needs[0] {
                return vec![None];
            }
            let u = up.item();
            vec![Some(Tensor::new(shape.clone(), grad.iter().map(|v| v * u).collect()).expect("shape"))]
        }),
    )
}

/// Trains the boundary by maximizing the relaxed value on fresh batches drawn
/// under a drift tilt of `tilt` per year.
pub fn train_boundary(spec: &StoppingSpec, boundary: &mut BoundaryNet, market: &GbmParams, config: &TrainConfig, tilt: f64) -> Result<TrainReport> {
    spec.validate()?;
    market.validate()?;
    let iterations = config.iterations;
    let batch_size = config.batch_size;
    train(boundary, config, |b, g, vars, rng, it| {
        let batch = simulate_gbm(market, &spec.mesh, batch_size, rng, tilt)?;
        spec.check_batch(&batch)?;
        let (x, shared) = b.batch_inputs(&batch);
        let x = g.constant(x);
        let raw = b.net.forward_graph(g, vars, x, crate::nn::Mode::Train)?;
        let levels = g.scale(raw, b.scale);
        let eps = spec.epsilon_at(it, iterations);
        let v = relaxed_value_node(g, levels, shared, &batch, spec, eps);
        Ok(g.scale(v, -1.0))
    })
}

/// Sharp first-entry value per path given boundary levels.
fn sharp_path_values(levels: &[f64], batch: &PathBatch, spec: &StoppingSpec) -> Vec<f64> {
    let nodes = spec.mesh.times().len();
    (0..batch.paths())
        .map(|i| {
            let t = (0..nodes - 1)
                .find(|&t| spec.gap(levels[i * nodes + t], batch.state(i, t)) >= 0.0)
                .unwrap_or(nodes - 1);
            spec.discount(t) * spec.payoff.value(batch.state(i, t))
        })
        .collect()
}

fn summarize(values: &[f64]) -> Evaluation {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    Evaluation {
        price: mean,
        std_error: (var / m).sqrt(),
        n_paths: values.len(),
    }
}

/// Sharp-boundary Monte Carlo price on a risk-neutral batch.
pub fn sharp_evaluate(boundary: &BoundaryNet, batch: &PathBatch, spec: &StoppingSpec) -> Result<Evaluation> {
    batch.require_risk_neutral()?;
    spec.check_batch(batch)?;
    let levels = boundary.levels(batch)?;
    Ok(summarize(&sharp_path_values(&levels, batch, spec)))
}

/// Sharp value of an arbitrary boundary given as levels (path-major).
pub fn sharp_evaluate_levels(levels: &[f64], batch: &PathBatch, spec: &StoppingSpec) -> Result<Evaluation> {
    batch.require_risk_neutral()?;
    spec.check_batch(batch)?;
    if levels.len() != batch.paths() * spec.mesh.times().len() {
        return Err(DermError::Dimension("one level per path and node expected".into()));
    }
    Ok(summarize(&sharp_path_values(levels, batch, spec)))
}

/// Indicator process of the sharp first-entry rule for the given levels.
pub fn indicator_probs(levels: &[f64], batch: &PathBatch, spec: &StoppingSpec) -> Result<StopProbProcess> {
    let nodes = spec.mesh.times().len();
    let mut p = Vec::with_capacity(levels.len());
    for i in 0..batch.paths() {
        for t in 0..nodes {
            let stop = t + 1 == nodes || spec.gap(levels[i * nodes + t], batch.state(i, t)) >= 0.0;
            p.push(if stop { 1.0 } else { 0.0 });
        }
    }
    StopProbProcess::from_probs(batch.paths(), nodes, p)
}

/// Paths per evaluation chunk; each chunk has its own substream.
const EVAL_CHUNK: usize = 1 << 16;

/// Sharp price on `n_paths` fresh risk-neutral paths, simulated and evaluated
/// chunk by chunk so memory stays bounded. Deterministic in `seed`.
pub fn evaluate_boundary(boundary: &BoundaryNet, spec: &StoppingSpec, market: &GbmParams, n_paths: usize, seed: u64) -> Result<Evaluation> {
    if n_paths < 2 {
        return Err(DermError::Contract("evaluation needs at least two paths".into()));
    }
    let chunks = n_paths.div_ceil(EVAL_CHUNK);
    let partial: Vec<Result<(f64, f64)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let m = EVAL_CHUNK.min(n_paths - c * EVAL_CHUNK);
            let batch = simulate_gbm(market, &spec.mesh, m, &mut substream(seed, "eval", c as u64), 0.0)?;
            let levels = boundary.levels(&batch)?;
            let v = sharp_path_values(&levels, &batch, spec);
            Ok((v.iter().sum(), v.iter().map(|x| x * x).sum()))
        })
        .collect();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for r in partial {
        let (s, q) = r?;
        sum += s;
        sum_sq += q;
    }
    let m = n_paths as f64;
    let mean = sum / m;
    let var = ((sum_sq - m * mean * mean) / (m - 1.0)).max(0.0);
    Ok(Evaluation {
        price: mean,
        std_error: (var / m).sqrt(),
        n_paths,
    })
}

/// Result of [`star_shape_check`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StarShapeReport {
    pub checked: usize,
    pub violations: Vec<(f64, Vec<f64>, f64)>,
}

/// Checks that `stop(t, s)` implies `stop(t, lambda s)` for every grid point
/// and every `lambda >= 1`.
pub fn star_shape_check<F>(stop: F, grid: &[(f64, Vec<f64>)], lambdas: &[f64]) -> Result<StarShapeReport>
where
    F: Fn(f64, &[f64]) -> Result<bool>,
{
    if lambdas.iter().any(|l| !(*l >= 1.0)) {
        return Err(DermError::Contract("scaling factors must be at least 1".into()));
    }
    let mut report = StarShapeReport {
        checked: 0,
        violations: Vec::new(),
    };
    for (t, s) in grid {
        if !stop(*t, s)? {
            continue;
        }
        for &l in lambdas {
            report.checked += 1;
            let scaled: Vec<f64> = s.iter().map(|x| x * l).collect();
            if !stop(*t, &scaled)? {
                report.violations.push((*t, s.clone(), l));
            }
        }
    }
    Ok(report)
}

/// The max-call stopping rule `m(s) >= F(t, s / m(s))` induced by `boundary`.
pub fn max_call_rule<'a>(boundary: &'a BoundaryNet, spec: &'a StoppingSpec) -> impl Fn(f64, &[f64]) -> Result<bool> + 'a {
    move |t, s| Ok(spec.gap(boundary.level(t, s)?, s) >= 0.0)
}

/// Writes the boundary on a grid: `time,F` for the time-only encoding and
/// `time,x_1,...,x_d,F` over the supplied simplex points otherwise.
pub fn write_boundary_csv<W: Write>(boundary: &BoundaryNet, times: &[f64], simplex: &[Vec<f64>], mut w: W) -> Result<()> {
    match boundary.encoding {
        Encoding::TimeOnly => {
            writeln!(w, "time,F")?;
            for &t in times {
                writeln!(w, "{t},{}", boundary.level(t, &[1.0])?)?;
            }
        }
        Encoding::TimeAndSimplex => {
            let d = simplex.first().map_or(0, |x| x.len());
            let cols: Vec<String> = (1..=d).map(|j| format!("x_{j}")).collect();
            writeln!(w, "time,{},F", cols.join(","))?;
            for &t in times {
                for x in simplex {
                    let coords: Vec<String> = x.iter().map(|v| v.to_string()).collect();
                    writeln!(w, "{t},{},{}", coords.join(","), boundary.level(t, x)?)?;
                }
            }
        }
    }
    Ok(())
}

/// Price report written next to every stopping run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceReport {
    pub price: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub spec_hash: String,
}

impl PriceReport {
    pub fn new(eval: &Evaluation, seed: u64, spec: &StoppingSpec) -> Self {
        Self {
            price: eval.price,
            std_error: eval.std_error,
            n_paths: eval.n_paths,
            seed,
            spec_hash: spec.hash(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markets::Measure;

    fn one_path(prices: &[f64], mesh: TimeMesh) -> PathBatch {
        PathBatch::from_prices(1, 1, mesh, prices.to_vec(), Measure::RiskNeutral).unwrap()
    }

    #[test]
    fn xi_examples() {
        assert_eq!(xi_recursion(&[0.0, 0.0, 0.0, 1.0]).unwrap(), vec![0.0; 4]);
        assert_eq!(xi_recursion(&[1.0, 0.3, 1.0]).unwrap(), vec![0.0, 1.0, 1.0]);
        assert_eq!(xi_recursion(&[0.5, 0.5, 1.0]).unwrap(), vec![0.0, 0.5, 0.75]);
        assert!(xi_recursion(&[1.2, 1.0]).is_err());
        assert!(xi_recursion(&[0.2, 0.5]).is_err());
    }

    #[test]
    fn relaxed_value_hand_sum() {
        let mesh = TimeMesh::uniform(2.0, 2).unwrap();
        let spec = StoppingSpec::new(Payoff::Put { strike: 2.0 }, 0.0, mesh.clone(), 1.0);
        let batch = one_path(&[1.0, 1.0, 1.0], mesh);
        let probs = StopProbProcess::from_probs(1, 3, vec![0.5, 0.5, 1.0]).unwrap();
        assert_eq!(relaxed_value(&batch, &probs, &spec).unwrap(), 1.0);
        let probs = StopProbProcess::from_probs(1, 3, vec![1.0, 0.0, 1.0]).unwrap();
        assert_eq!(relaxed_value(&batch, &probs, &spec).unwrap(), 1.0);
    }

    #[test]
    fn tilted_batches_rejected() {
        let mesh = TimeMesh::uniform(1.0, 2).unwrap();
        let spec = StoppingSpec::new(Payoff::Put { strike: 2.0 }, 0.0, mesh.clone(), 1.0);
        let batch = PathBatch::from_prices(1, 1, mesh, vec![1.0; 3], Measure::Tilted { drift_shift: -0.1 }).unwrap();
        let probs = StopProbProcess::from_probs(1, 3, vec![0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(relaxed_value(&batch, &probs, &spec), Err(DermError::Measure(_))));
        assert!(sharp_evaluate_levels(&[0.0; 3], &batch, &spec).is_err());
    }

    #[test]
    fn relaxation_profiles() {
        for g in [Relaxation::Linear, Relaxation::ScaledSigmoid { k: 4.0 }] {
            assert_eq!(g.apply(-1.0), 0.0);
            assert_eq!(g.apply(1.0), 1.0);
            assert_eq!(g.apply(7.0), 1.0);
            let mut prev = -1.0;
            for k in 0..=40 {
                let v = g.apply(-1.0 + k as f64 / 20.0);
                assert!(v >= prev);
                prev = v;
            }
            let h = 1e-6;
            for d in [-0.7, 0.0, 0.4] {
                let fd = (g.apply(d + h) - g.apply(d - h)) / (2.0 * h);
                assert!((fd - g.derivative(d)).abs() < 1e-7);
            }
        }
        assert_eq!(Relaxation::Linear.apply(0.0), 0.5);
    }

    #[test]
    fn fuzzy_band_edges() {
        let mesh = TimeMesh::uniform(1.0, 1).unwrap();
        let spec = StoppingSpec::new(Payoff::Put { strike: 40.0 }, 0.0, mesh.clone(), 0.5);
        let batch = one_path(&[35.0, 35.0], mesh);
        for (level, want) in [(35.5, 1.0), (34.5, 0.0), (35.0, 0.5)] {
            let p = fuzzy_probs_from_levels(&[level, level], &batch, &spec, spec.epsilon).unwrap();
            assert_eq!(p.p, vec![want, 1.0]);
        }
    }

    fn toy_boundary(encoding: Encoding, dim: usize, init: f64) -> BoundaryNet {
        BoundaryNet::new(encoding, dim, &[8], Activation::Tanh, 40.0, init, 1.0, &mut substream(1, "init", 0)).unwrap()
    }

    #[test]
    fn relaxed_gradient_matches_finite_differences() {
        let mesh = TimeMesh::uniform(1.0, 5).unwrap();
        let spec = StoppingSpec::new(Payoff::Put { strike: 40.0 }, 0.06, mesh.clone(), 4.0);
        let market = GbmParams::independent(1, 40.0, 0.06, 0.0, 0.4);
        let batch = simulate_gbm(&market, &mesh, 64, &mut substream(3, "t", 0), 0.0).unwrap();
        let b = toy_boundary(Encoding::TimeOnly, 1, 34.0);
        let value_at = |params: &[f64]| {
            let mut bb = b.clone();
            bb.set_flat_params(params);
            let probs = fuzzy_stop_probs(&bb, &batch, &spec).unwrap();
            relaxed_value(&batch, &probs, &spec).unwrap()
        };
        let mut g = Graph::new();
        let vars = b.bind(&mut g);
        let (x, shared) = b.batch_inputs(&batch);
        let x = g.constant(x);
        let raw = b.net.clone().forward_graph(&mut g, &vars, x, crate::nn::Mode::Train).unwrap();
        let levels = g.scale(raw, b.scale);
        let v = relaxed_value_node(&mut g, levels, shared, &batch, &spec, spec.epsilon);
        let direct = value_at(&b.flat_params());
        assert!((g.value(v).item() - direct).abs() < 1e-12);
        let grad = g.backward(v).unwrap().flatten(&vars);
        let p0 = b.flat_params();
        let h = 1e-6;
        for k in 0..p0.len() {
            let mut up = p0.clone();
            up[k] += h;
            let mut dn = p0.clone();
            dn[k] -= h;
            let fd = (value_at(&up) - value_at(&dn)) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-6 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn always_and_never_stop() {
        let mesh = TimeMesh::uniform(1.0, 4).unwrap();
        let spec = StoppingSpec::new(Payoff::Put { strike: 45.0 }, 0.06, mesh.clone(), 1.0);
        let market = GbmParams::independent(1, 40.0, 0.06, 0.0, 0.4);
        let batch = simulate_gbm(&market, &mesh, 100, &mut substream(3, "t", 0), 0.0).unwrap();
        let always = vec![f64::INFINITY; 500];
        assert_eq!(sharp_evaluate_levels(&always, &batch, &spec).unwrap().price, 5.0);
        let never = vec![0.0; 500];
        let v = sharp_evaluate_levels(&never, &batch, &spec).unwrap().price;
        let euro: f64 = (0..100).map(|i| (-0.06f64).exp() * (45.0 - batch.price(i, 4, 0)).max(0.0)).sum::<f64>() / 100.0;
        assert!((v - euro).abs() < 1e-12);
    }

    #[test]
    fn star_shape_of_simplex_parametrization() {
        let mesh = TimeMesh::uniform(3.0, 9).unwrap();
        let spec = StoppingSpec::new(Payoff::MaxCall { strike: 100.0 }, 0.05, mesh, 1.0);
        let b = BoundaryNet::new(
            Encoding::TimeAndSimplex,
            2,
            &[8],
            Activation::Tanh,
            100.0,
            120.0,
            3.0,
            &mut substream(2, "i", 0),
        )
        .unwrap();
        let mut rng = substream(5, "grid", 0);
        let grid: Vec<(f64, Vec<f64>)> = (0..300)
            .map(|_| {
                (
                    rng.random_range(0.0..3.0),
                    vec![rng.random_range(20.0..200.0), rng.random_range(20.0..200.0)],
                )
            })
            .collect();
        let rep = star_shape_check(max_call_rule(&b, &spec), &grid, &[1.0, 1.5, 2.0, 10.0]).unwrap();
        assert!(rep.checked > 0);
        assert!(rep.violations.is_empty());
    }
}
