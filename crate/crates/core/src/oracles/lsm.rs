//! Longstaff-Schwartz regression Monte Carlo for Bermudan payoffs on GBM.
//!
//! Regression coefficients are fitted on one path set and the resulting
//! exercise rule is priced on an independent set, which removes the
//! foresight bias and makes the estimate a lower bound up to noise.

use log::info;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DermError, Result};
use crate::markets::{simulate_gbm, GbmParams, PathBatch, TimeMesh};
use crate::payoff::{max_component, Payoff};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsmConfig {
    pub paths: usize,
    pub degree: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsmResult {
    pub price: f64,
    pub std_error: f64,
}

/// Features `(s_1, ..., s_d, max_i s_i [d > 1], payoff)`, all scaled by the strike.
fn features(payoff: &Payoff, s: &[f64]) -> Vec<f64> {
    let k = payoff.strike();
    let mut f: Vec<f64> = s.iter().map(|x| x / k).collect();
    if s.len() > 1 {
        f.push(max_component(s) / k);
    }
    f.push(payoff.value(s) / k);
    f
}

/// All monomials of total degree `<= degree` in `f`, constant first.
fn monomials(f: &[f64], degree: usize, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    let mut prev_start = 0;
    // each monomial extends ones of the previous degree by a non-decreasing index
    let mut last_index: Vec<usize> = vec![0];
    for _ in 0..degree {
        let prev_end = out.len();
        let mut new_last = Vec::new();
        for m in prev_start..prev_end {
            let from = if m == 0 { 0 } else { last_index[m - prev_start] };
            for (j, fj) in f.iter().enumerate().skip(from) {
                out.push(out[m] * fj);
                new_last.push(j);
            }
        }
        prev_start = prev_end;
        last_index = new_last;
    }
}

fn basis_len(n_features: usize, degree: usize) -> usize {
    let mut f = vec![1.0; n_features];
    f.iter_mut().enumerate().for_each(|(i, x)| *x += i as f64);
    let mut out = Vec::new();
    monomials(&f, degree, &mut out);
    out.len()
}

/// Least squares via the normal equations, with a ridge fallback when the
/// Gram matrix is numerically singular.
fn regress(gram: DMatrix<f64>, rhs: DVector<f64>) -> DVector<f64> {
    let p = gram.nrows();
    if let Some(ch) = gram.clone().cholesky() {
        let l = ch.l();
        let diag: Vec<f64> = (0..p).map(|i| l[(i, i)] * l[(i, i)]).collect();
        let max = diag.iter().cloned().fold(0.0, f64::max);
        let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        if min > 1e-12 * max {
            return ch.solve(&rhs);
        }
    }
    let lambda = 1e-8 * gram.trace() / p as f64;
    info!("LSM regression rank-deficient; ridge lambda = {lambda:.3e}");
    let mut ridged = gram;
    for i in 0..p {
        ridged[(i, i)] += lambda;
    }
    match ridged.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => ridged.svd(true, true).solve(&rhs, 1e-14).unwrap_or_else(|_| DVector::zeros(p)),
    }
}

/// Prices an exercise rule given per-date regression coefficients on `batch`.
fn price_with_rule(payoff: &Payoff, rate: f64, batch: &PathBatch, coefs: &[Option<DVector<f64>>], degree: usize) -> (f64, f64) {
    let times = batch.mesh().times();
    let n = batch.mesh().steps();
    let m = batch.paths();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut basis = Vec::new();
    for i in 0..m {
        let mut cash = 0.0;
        for t in 1..=n {
            let s = batch.state(i, t);
            let pay = payoff.value(s);
            let stop = if t == n {
                true
            } else if pay > 0.0 {
                match &coefs[t] {
                    Some(beta) => {
                        monomials(&features(payoff, s), degree, &mut basis);
                        let cont: f64 = basis.iter().zip(beta.iter()).map(|(a, b)| a * b).sum::<f64>() * payoff.strike();
                        pay >= cont
                    }
                    None => false,
                }
            } else {
                false
            };
            if stop {
                cash = (-rate * times[t]).exp() * pay;
                break;
            }
        }
        sum += cash;
        sum_sq += cash * cash;
    }
    let mean = sum / m as f64;
    let var = (sum_sq / m as f64 - mean * mean).max(0.0);
    (mean, (var / m as f64).sqrt())
}

/// Bermudan price with exercise allowed at every node of `mesh`.
pub fn lsm_price(payoff: &Payoff, market: &GbmParams, mesh: &TimeMesh, cfg: &LsmConfig) -> Result<LsmResult> {
    if cfg.paths < 2 {
        return Err(DermError::Contract("LSM needs at least two paths".into()));
    }
    if market.dim() > 5 {
        return Err(DermError::Contract("LSM basis is limited to d <= 5".into()));
    }
    let train = simulate_gbm(market, mesh, cfg.paths, &mut substream(cfg.seed, "lsm-fit", 0), 0.0)?;
    let eval = simulate_gbm(market, mesh, cfg.paths, &mut substream(cfg.seed, "lsm-eval", 0), 0.0)?;
    let times = mesh.times();
    let n = mesh.steps();
    let m = cfg.paths;
    let n_feat = market.dim() + usize::from(market.dim() > 1) + 1;
    let p = basis_len(n_feat, cfg.degree);

    // discounted-to-0 cash flow per path under the rule being built backwards
    let mut cash: Vec<f64> = (0..m)
        .map(|i| (-market.rate * times[n]).exp() * payoff.value(train.state(i, n)))
        .collect();
    let mut coefs: Vec<Option<DVector<f64>>> = vec![None; n + 1];
    let mut basis = Vec::new();
    for t in (1..n).rev() {
        let disc_t = (-market.rate * times[t]).exp();
        let mut gram = DMatrix::<f64>::zeros(p, p);
        let mut rhs = DVector::<f64>::zeros(p);
        let mut itm = 0usize;
        for (i, c) in cash.iter().enumerate() {
            let s = train.state(i, t);
            if payoff.value(s) <= 0.0 {
                continue;
            }
            itm += 1;
            monomials(&features(payoff, s), cfg.degree, &mut basis);
            let y = c / disc_t / payoff.strike();
            for a in 0..p {
                rhs[a] += basis[a] * y;
                for b in a..p {
                    gram[(a, b)] += basis[a] * basis[b];
                }
            }
        }
        if itm < p {
            continue;
        }
        for a in 0..p {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        let beta = regress(gram, rhs);
        for (i, c) in cash.iter_mut().enumerate() {
            let s = train.state(i, t);
            let pay = payoff.value(s);
            if pay <= 0.0 {
                continue;
            }
            monomials(&features(payoff, s), cfg.degree, &mut basis);
            let cont: f64 = basis.iter().zip(beta.iter()).map(|(a, b)| a * b).sum::<f64>() * payoff.strike();
            if pay >= cont {
                *c = disc_t * pay;
            }
        }
        coefs[t] = Some(beta);
    }
    let (mean, se) = price_with_rule(payoff, market.rate, &eval, &coefs, cfg.degree);
    let immediate = payoff.value(&market.s0);
    Ok(if immediate > mean {
        LsmResult {
            price: immediate,
            std_error: 0.0,
        }
    } else {
        LsmResult { price: mean, std_error: se }
    })
}
