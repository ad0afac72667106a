//! Simulated markets: correlated geometric Brownian motion with dividends and
//! the Heston stochastic-volatility model.
//!
//! Paths are generated in fixed-size chunks, each drawing from its own
//! substream keyed by one value taken from the caller's rng, so a batch is
//! identical no matter how many worker threads produce it.

use std::io::Write;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DermError, Result};
use crate::rng::{substream, StreamRng};

const CHUNK: usize = 4096;

/// Node times `0 = t_0 < t_1 < ... < t_N = T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeMesh {
    times: Vec<f64>,
}

impl TimeMesh {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(DermError::Contract("a mesh needs at least two nodes".into()));
        }
        if times[0] != 0.0 {
            return Err(DermError::Contract("mesh must start at 0".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || !times.iter().all(|t| t.is_finite()) {
            return Err(DermError::Contract("mesh must be strictly increasing".into()));
        }
        Ok(Self { times })
    }

    pub fn uniform(maturity: f64, steps: usize) -> Result<Self> {
        if steps == 0 || !(maturity > 0.0) {
            return Err(DermError::Contract(format!(
                "uniform mesh needs steps > 0 and T > 0, got {steps}, {maturity}"
            )));
        }
        let mut times: Vec<f64> = (0..=steps).map(|k| maturity * k as f64 / steps as f64).collect();
        times[steps] = maturity;
        Self::new(times)
    }

    /// Geometric refinement toward maturity: consecutive steps shrink by a
    /// constant ratio and the last step is `1 / first_over_last` of the first.
    pub fn refined_toward_maturity(maturity: f64, steps: usize, first_over_last: f64) -> Result<Self> {
        if steps == 0 || !(maturity > 0.0) || !(first_over_last >= 1.0) {
            return Err(DermError::Contract("invalid refined mesh parameters".into()));
        }
        if steps == 1 || first_over_last == 1.0 {
            return Self::uniform(maturity, steps);
        }
        let q = first_over_last.powf(-1.0 / (steps as f64 - 1.0));
        let h0 = maturity * (1.0 - q) / (1.0 - q.powi(steps as i32));
        let mut times = Vec::with_capacity(steps + 1);
        let mut t = 0.0;
        times.push(0.0);
        for k in 0..steps {
            t += h0 * q.powi(k as i32);
            times.push(t);
        }
        times[steps] = maturity;
        Self::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn maturity(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }
}

/// Probability measure a batch was simulated under.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Measure {
    RiskNeutral,
    /// Log-drift shifted by `drift_shift` per year, for training batches only.
    Tilted {
        drift_shift: f64,
    },
}

/// Multi-asset geometric Brownian motion with continuous dividend yields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbmParams {
    pub s0: Vec<f64>,
    pub rate: f64,
    pub dividend: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Row-major `d x d` correlation matrix of the driving Brownian motions.
    pub correlation: Vec<f64>,
}

impl GbmParams {
    /// `d` identical, independent assets.
    pub fn independent(d: usize, s0: f64, rate: f64, dividend: f64, sigma: f64) -> Self {
        let mut correlation = vec![0.0; d * d];
        for i in 0..d {
            correlation[i * d + i] = 1.0;
        }
        Self {
            s0: vec![s0; d],
            rate,
            dividend: vec![dividend; d],
            sigma: vec![sigma; d],
            correlation,
        }
    }

    pub fn dim(&self) -> usize {
        self.s0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || self.dividend.len() != d || self.sigma.len() != d || self.correlation.len() != d * d {
            return Err(DermError::Model("inconsistent GBM dimensions".into()));
        }
        if self.s0.iter().any(|&s| !(s > 0.0)) {
            return Err(DermError::Model("initial prices must be positive".into()));
        }
        if self.sigma.iter().any(|&s| !(s >= 0.0)) {
            return Err(DermError::Model("volatilities must be non-negative".into()));
        }
        for i in 0..d {
            if (self.correlation[i * d + i] - 1.0).abs() > 1e-12 {
                return Err(DermError::Model("correlation diagonal must be 1".into()));
            }
            for j in 0..i {
                if (self.correlation[i * d + j] - self.correlation[j * d + i]).abs() > 1e-12 {
                    return Err(DermError::Model("correlation must be symmetric".into()));
                }
            }
        }
        Ok(())
    }

    /// Lower-triangular (or eigen-clipped) factor `L` with `L L^T = C`.
    pub fn correlation_factor(&self) -> Result<Vec<f64>> {
        correlation_factor(&self.correlation, self.dim())
    }
}

/// Cholesky factor of a correlation matrix, falling back to the eigenvalue
/// factor `Q sqrt(max(Λ, 0))` when the matrix is only semi-definite.
pub fn correlation_factor(c: &[f64], d: usize) -> Result<Vec<f64>> {
    let m = DMatrix::from_row_slice(d, d, c);
    if let Some(ch) = m.clone().cholesky() {
        let l = ch.l();
        return Ok((0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| l[(i, j)]).collect());
    }
    let eig = SymmetricEigen::new(m);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-10 {
        return Err(DermError::Model(format!(
            "correlation matrix is not positive semi-definite (eigenvalue {min:.3e})"
        )));
    }
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let lam = eig.eigenvalues[k].max(0.0).sqrt();
            out[i * d + k] = eig.eigenvectors[(i, k)] * lam;
        }
    }
    Ok(out)
}

/// Heston dynamics
/// `dS = S (mu dt + sqrt(v) dW)`, `dv = (kappa (theta - v) - lambda v) dt + sigma sqrt(v) dW~`,
/// `d<W, W~> = rho dt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HestonParams {
    pub s0: f64,
    pub v0: f64,
    pub mu: f64,
    pub kappa: f64,
    pub theta: f64,
    pub sigma: f64,
    pub rho: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FellerCheck {
    /// `2 kappa theta`
    pub lhs: f64,
    /// `sigma^2`
    pub rhs: f64,
    pub satisfied: bool,
}

impl HestonParams {
    /// Parameters of the hedging table: `S0 = 100, v0 = theta = 0.04,
    /// kappa = 0.9, sigma = 0.2, r = lambda = mu = rho = 0`.
    pub fn hedging_table() -> Self {
        Self {
            s0: 100.0,
            v0: 0.04,
            mu: 0.0,
            kappa: 0.9,
            theta: 0.04,
            sigma: 0.2,
            rho: 0.0,
            lambda: 0.0,
            rate: 0.0,
        }
    }

    pub fn feller(&self) -> FellerCheck {
        let lhs = 2.0 * self.kappa * self.theta;
        let rhs = self.sigma * self.sigma;
        FellerCheck {
            lhs,
            rhs,
            satisfied: lhs >= rhs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s0 > 0.0) {
            return Err(DermError::Model("S0 must be positive".into()));
        }
        if !(self.v0 >= 0.0) || !(self.theta >= 0.0) || !(self.sigma >= 0.0) {
            return Err(DermError::Model("variances and vol-of-vol must be non-negative".into()));
        }
        if !(self.rho.abs() <= 1.0) {
            return Err(DermError::Model("|rho| must not exceed 1".into()));
        }
        if !self.feller().satisfied {
            warn!(
                "Feller condition violated: 2 kappa theta = {} < sigma^2 = {}",
                self.feller().lhs,
                self.feller().rhs
            );
        }
        Ok(())
    }
}

/// Simulated paths. Prices are stored row-major as `path x time x asset`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBatch {
    paths: usize,
    dim: usize,
    mesh: TimeMesh,
    prices: Vec<f64>,
    returns: Vec<f64>,
    variance: Option<Vec<f64>>,
    measure: Measure,
}

impl PathBatch {
    pub fn from_prices(paths: usize, dim: usize, mesh: TimeMesh, prices: Vec<f64>, measure: Measure) -> Result<Self> {
        let n1 = mesh.times().len();
        if prices.len() != paths * n1 * dim {
            return Err(DermError::Dimension(format!(
                "{} prices for {paths} paths x {n1} nodes x {dim} assets",
                prices.len()
            )));
        }
        let returns = returns_from_prices(&prices, paths, mesh.steps(), dim)?;
        Ok(Self {
            paths,
            dim,
            mesh,
            prices,
            returns,
            variance: None,
            measure,
        })
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mesh(&self) -> &TimeMesh {
        &self.mesh
    }

    pub fn measure(&self) -> Measure {
        self.measure
    }

    pub fn is_tilted(&self) -> bool {
        matches!(self.measure, Measure::Tilted { .. })
    }

    /// Fails with a measure error unless the batch is risk-neutral.
    pub fn require_risk_neutral(&self) -> Result<()> {
        match self.measure {
            Measure::RiskNeutral => Ok(()),
            Measure::Tilted { drift_shift } => Err(DermError::Measure(format!("batch tilted by {drift_shift}"))),
        }
    }

    pub fn prices(&self) -> &[f64] {
        &self.prices
    }

    pub fn returns(&self) -> &[f64] {
        &self.returns
    }

    /// Positive part of the simulated variance, present for Heston batches.
    pub fn variance(&self) -> Option<&[f64]> {
        self.variance.as_deref()
    }

    pub fn price(&self, path: usize, t: usize, asset: usize) -> f64 {
        self.prices[(path * self.mesh.times().len() + t) * self.dim + asset]
    }

    /// Price vector of `path` at node `t`.
    pub fn state(&self, path: usize, t: usize) -> &[f64] {
        let start = (path * self.mesh.times().len() + t) * self.dim;
        &self.prices[start..start + self.dim]
    }

    /// Return `Z_{t+1} = (S_{t+1} - S_t) / S_t` for `t` in `0..N`.
    pub fn ret(&self, path: usize, t: usize, asset: usize) -> f64 {
        self.returns[(path * self.mesh.steps() + t) * self.dim + asset]
    }

    /// CSV dump with columns `path_id,time_index,time,asset_index,price`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "path_id,time_index,time,asset_index,price")?;
        for p in 0..self.paths {
            for (t, time) in self.mesh.times().iter().enumerate() {
                for a in 0..self.dim {
                    writeln!(w, "{p},{t},{time},{a},{}", self.price(p, t, a))?;
                }
            }
        }
        Ok(())
    }
}

/// Entrywise simple returns of `paths x (steps + 1) x dim` prices.
pub fn returns_from_prices(prices: &[f64], paths: usize, steps: usize, dim: usize) -> Result<Vec<f64>> {
    let n1 = steps + 1;
    if prices.len() != paths * n1 * dim {
        return Err(DermError::Dimension("price array size".into()));
    }
    if prices.iter().any(|&p| !(p > 0.0)) {
        return Err(DermError::Contract("prices must be positive".into()));
    }
    let mut out = Vec::with_capacity(paths * steps * dim);
    for path in prices.chunks_exact(n1 * dim) {
        for t in 0..steps {
            for a in 0..dim {
                let (s0, s1) = (path[t * dim + a], path[(t + 1) * dim + a]);
                out.push((s1 - s0) / s0);
            }
        }
    }
    Ok(out)
}

/// Rebuilds prices from initial values (`paths x dim`) and simple returns.
pub fn prices_from_returns(initial: &[f64], returns: &[f64], paths: usize, steps: usize, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(paths * (steps + 1) * dim);
    for p in 0..paths {
        let mut s = initial[p * dim..(p + 1) * dim].to_vec();
        out.extend_from_slice(&s);
        for t in 0..steps {
            for a in 0..dim {
                s[a] *= 1.0 + returns[(p * steps + t) * dim + a];
            }
            out.extend_from_slice(&s);
        }
    }
    out
}

/// Exact log-normal stepping of correlated GBM.
///
/// A non-zero `drift_tilt` shifts every log-drift by that annualized amount
/// and tags the batch as tilted.
pub fn simulate_gbm(p: &GbmParams, mesh: &TimeMesh, m: usize, rng: &mut StreamRng, drift_tilt: f64) -> Result<PathBatch> {
    p.validate()?;
    if m == 0 {
        return Err(DermError::Contract("batch size must be at least 1".into()));
    }
    let d = p.dim();
    let factor = p.correlation_factor()?;
    let key: u64 = rng.random();
    let n1 = mesh.times().len();
    let stride = n1 * d;
    let drift: Vec<f64> = (0..d)
        .map(|j| p.rate - p.dividend[j] - 0.5 * p.sigma[j] * p.sigma[j] + drift_tilt)
        .collect();
    let sqrt_dt: Vec<f64> = (0..mesh.steps()).map(|k| mesh.dt(k).sqrt()).collect();
    let log_s0: Vec<f64> = p.s0.iter().map(|s| s.ln()).collect();

    let mut prices = vec![0.0; m * stride];
    prices.par_chunks_mut(CHUNK * stride).enumerate().for_each(|(c, block)| {
        let mut rng = substream(key, "gbm", c as u64);
        let mut z = vec![0.0; d];
        let mut log_s = vec![0.0; d];
        for path in block.chunks_exact_mut(stride) {
            log_s.copy_from_slice(&log_s0);
            path[..d].copy_from_slice(&p.s0);
            for k in 0..mesh.steps() {
                for zi in z.iter_mut() {
                    *zi = StandardNormal.sample(&mut rng);
                }
                let dt = mesh.dt(k);
                for j in 0..d {
                    let w: f64 = (0..d).map(|l| factor[j * d + l] * z[l]).sum();
                    log_s[j] += drift[j] * dt + p.sigma[j] * sqrt_dt[k] * w;
                    path[(k + 1) * d + j] = log_s[j].exp();
                }
            }
        }
    });
    let measure = if drift_tilt == 0.0 {
        Measure::RiskNeutral
    } else {
        Measure::Tilted { drift_shift: drift_tilt }
    };
    PathBatch::from_prices(m, d, mesh.clone(), prices, measure)
}

/// Full-truncation Euler scheme for Heston; the stock is stepped in log space.
pub fn simulate_heston(p: &HestonParams, mesh: &TimeMesh, m: usize, rng: &mut StreamRng) -> Result<PathBatch> {
    p.validate()?;
    if m == 0 {
        return Err(DermError::Contract("batch size must be at least 1".into()));
    }
    let key: u64 = rng.random();
    let n1 = mesh.times().len();
    let rho_perp = (1.0 - p.rho * p.rho).max(0.0).sqrt();
    let mut prices = vec![0.0; m * n1];
    let mut variance = vec![0.0; m * n1];
    prices
        .par_chunks_mut(CHUNK * n1)
        .zip(variance.par_chunks_mut(CHUNK * n1))
        .enumerate()
        .for_each(|(c, (pblock, vblock))| {
            let mut rng = substream(key, "heston", c as u64);
            for (path, vpath) in pblock.chunks_exact_mut(n1).zip(vblock.chunks_exact_mut(n1)) {
                let mut log_s = p.s0.ln();
                let mut v = p.v0;
                path[0] = p.s0;
                vpath[0] = v;
                for k in 0..mesh.steps() {
                    let dt = mesh.dt(k);
                    let z1: f64 = StandardNormal.sample(&mut rng);
                    let z2: f64 = StandardNormal.sample(&mut rng);
                    let zv = p.rho * z1 + rho_perp * z2;
                    let vp = v.max(0.0);
                    let sd = (vp * dt).sqrt();
                    log_s += (p.mu - 0.5 * vp) * dt + sd * z1;
                    // the raw variance may go negative; only its positive part drives the dynamics
                    v += (p.kappa * (p.theta - vp) - p.lambda * vp) * dt + p.sigma * sd * zv;
                    path[k + 1] = log_s.exp();
                    vpath[k + 1] = v.max(0.0);
                }
            }
        });
    let mut batch = PathBatch::from_prices(m, 1, mesh.clone(), prices, Measure::RiskNeutral)?;
    batch.variance = Some(variance);
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> StreamRng {
        substream(seed, "test", 0)
    }

    #[test]
    fn meshes() {
        let u = TimeMesh::uniform(3.0, 9).unwrap();
        assert_eq!(u.steps(), 9);
        assert_eq!(u.maturity(), 3.0);
        let r = TimeMesh::refined_toward_maturity(1.0, 50, 20.0).unwrap();
        assert_eq!(r.steps(), 50);
        assert_eq!(r.maturity(), 1.0);
        assert!((r.dt(0) / r.dt(49) - 20.0).abs() < 1e-9);
        assert!(TimeMesh::new(vec![0.0, 0.5, 0.5]).is_err());
        assert!(TimeMesh::new(vec![0.1, 0.5]).is_err());
    }

    #[test]
    fn zero_volatility_is_deterministic() {
        let p = GbmParams::independent(1, 100.0, 0.05, 0.1, 0.0);
        let mesh = TimeMesh::uniform(3.0, 9).unwrap();
        let b = simulate_gbm(&p, &mesh, 7, &mut rng(1), 0.0).unwrap();
        let expected = 100.0 * (-0.05f64 * 3.0).exp();
        assert!((expected - 86.0708).abs() < 1e-4);
        for i in 0..7 {
            assert!((b.price(i, 9, 0) - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn tilt_is_tagged() {
        let p = GbmParams::independent(2, 90.0, 0.05, 0.1, 0.2);
        let mesh = TimeMesh::uniform(3.0, 9).unwrap();
        let b = simulate_gbm(&p, &mesh, 4, &mut rng(1), -0.014).unwrap();
        assert_eq!(b.measure(), Measure::Tilted { drift_shift: -0.014 });
        assert!(matches!(b.require_risk_neutral(), Err(DermError::Measure(_))));
    }

    #[test]
    fn non_psd_correlation_rejected() {
        let mut p = GbmParams::independent(3, 100.0, 0.0, 0.0, 0.2);
        let c = -0.9;
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            p.correlation[i * 3 + j] = c;
            p.correlation[j * 3 + i] = c;
        }
        let mesh = TimeMesh::uniform(1.0, 2).unwrap();
        assert!(matches!(simulate_gbm(&p, &mesh, 2, &mut rng(0), 0.0), Err(DermError::Model(_))));
    }

    #[test]
    fn semidefinite_correlation_uses_eigen_factor() {
        let c = vec![1.0, 1.0, 1.0, 1.0];
        let l = correlation_factor(&c, 2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let v: f64 = (0..2).map(|k| l[i * 2 + k] * l[j * 2 + k]).sum();
                assert!((v - c[i * 2 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn returns_arithmetic() {
        let r = returns_from_prices(&[100.0, 110.0], 1, 1, 1).unwrap();
        assert!((r[0] - 0.10).abs() < 1e-15);
        let r = returns_from_prices(&[5.0; 8], 2, 3, 1).unwrap();
        assert!(r.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn seeded_batches_repeat() {
        let p = GbmParams::independent(2, 100.0, 0.05, 0.1, 0.2);
        let mesh = TimeMesh::uniform(3.0, 9).unwrap();
        let a = simulate_gbm(&p, &mesh, 5000, &mut rng(3), 0.0).unwrap();
        let b = simulate_gbm(&p, &mesh, 5000, &mut rng(3), 0.0).unwrap();
        assert_eq!(a, b);
        let h = HestonParams::hedging_table();
        let mesh = TimeMesh::uniform(1.0 / 12.0, 22).unwrap();
        let a = simulate_heston(&h, &mesh, 100, &mut rng(4)).unwrap();
        let b = simulate_heston(&h, &mesh, 100, &mut rng(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn feller_for_table_parameters() {
        let f = HestonParams::hedging_table().feller();
        assert!((f.lhs - 0.072).abs() < 1e-12);
        assert!((f.rhs - 0.04).abs() < 1e-12);
        assert!(f.satisfied);
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let p = GbmParams::independent(2, 100.0, 0.0, 0.0, 0.2);
        let mesh = TimeMesh::uniform(1.0, 2).unwrap();
        let b = simulate_gbm(&p, &mesh, 2, &mut rng(0), 0.0).unwrap();
        let mut buf = Vec::new();
        b.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path_id,time_index,time,asset_index,price");
        assert_eq!(lines.len(), 1 + 2 * 3 * 2);
        assert!(lines[1].starts_with("0,0,0,0,100"));
    }
}
