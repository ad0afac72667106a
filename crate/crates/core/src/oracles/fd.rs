//! Crank-Nicolson finite differences in log-price for the American (or
//! Bermudan) put, with projected SOR for the early-exercise constraint and
//! Rannacher start-up after every payoff kink.

use serde::{Deserialize, Serialize};

use crate::error::{DermError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Exercise {
    American,
    /// Exercise only at the listed calendar times (maturity is always included).
    Bermudan {
        times: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FdControls {
    /// Number of log-price intervals (rounded up to even).
    pub space_steps: usize,
    pub time_steps: usize,
    /// Half-width of the log-price domain in units of `sigma sqrt(T)`.
    pub width_sd: f64,
    /// Crank-Nicolson steps replaced by two implicit half steps after each kink.
    pub rannacher_steps: usize,
    pub omega: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub exercise: Exercise,
}

impl Default for FdControls {
    fn default() -> Self {
        Self {
            space_steps: 800,
            time_steps: 500,
            width_sd: 6.0,
            rannacher_steps: 2,
            omega: 1.3,
            tolerance: 1e-12,
            max_iterations: 20_000,
            exercise: Exercise::American,
        }
    }
}

/// Solution surface of the finite-difference solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdGrid {
    /// Log-price nodes.
    pub log_s: Vec<f64>,
    /// Calendar times, increasing, `0..=T`.
    pub times: Vec<f64>,
    /// `values[k][i]` is the option value at `times[k]` and `exp(log_s[i])`.
    pub values: Vec<Vec<f64>>,
    /// Exercise boundary per time node (`NaN` where no node is exercised).
    pub boundary: Vec<f64>,
    /// Value at `S0`.
    pub price: f64,
}

fn put_payoff(s: f64, k: f64) -> f64 {
    (k - s).max(0.0)
}

fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64]) {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut b = diag[0];
    c[0] = upper[0] / b;
    rhs[0] /= b;
    for i in 1..n {
        b = diag[i] - lower[i] * c[i - 1];
        c[i] = upper[i] / b;
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / b;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
}

/// Prices a put under one-dimensional GBM with dividend yield `div`.
pub fn fd_american_put(s0: f64, strike: f64, maturity: f64, rate: f64, div: f64, sigma: f64, controls: &FdControls) -> Result<FdGrid> {
    if !(s0 > 0.0 && strike > 0.0 && maturity > 0.0 && sigma >= 0.0) {
        return Err(DermError::Contract("invalid put parameters".into()));
    }
    let m = controls.space_steps.max(4).div_ceil(2) * 2;
    let half = controls.width_sd * sigma.max(1e-3) * maturity.sqrt();
    let h = 2.0 * half / m as f64;
    let x0 = s0.ln();
    let log_s: Vec<f64> = (0..=m).map(|i| x0 - half + i as f64 * h).collect();
    let s: Vec<f64> = log_s.iter().map(|x| x.exp()).collect();
    let payoff: Vec<f64> = s.iter().map(|&si| put_payoff(si, strike)).collect();

    // Calendar-time grid; Bermudan dates become grid nodes.
    let mut exercise_times: Vec<f64> = match &controls.exercise {
        Exercise::American => Vec::new(),
        Exercise::Bermudan { times } => times.iter().cloned().filter(|&t| t >= 0.0 && t <= maturity).collect(),
    };
    exercise_times.sort_by(f64::total_cmp);
    exercise_times.dedup();
    let mut breaks = vec![0.0];
    breaks.extend(exercise_times.iter().cloned().filter(|&t| t > 0.0 && t < maturity));
    breaks.push(maturity);
    let mut times = vec![0.0];
    for w in breaks.windows(2) {
        let n = ((controls.time_steps as f64) * (w[1] - w[0]) / maturity).ceil().max(1.0) as usize;
        for j in 1..=n {
            times.push(if j == n { w[1] } else { w[0] + (w[1] - w[0]) * j as f64 / n as f64 });
        }
    }
    let american = matches!(controls.exercise, Exercise::American);
    let is_exercise = |t: f64| american || exercise_times.iter().any(|&e| (e - t).abs() <= 1e-12 * maturity.max(1.0));

    let sig2 = sigma * sigma;
    let mu = rate - div - 0.5 * sig2;
    let a = 0.5 * sig2 / (h * h) - mu / (2.0 * h);
    let b = -sig2 / (h * h) - rate;
    let c = 0.5 * sig2 / (h * h) + mu / (2.0 * h);

    let nt = times.len();
    let mut values = vec![Vec::new(); nt];
    let mut v = payoff.clone();
    values[nt - 1] = v.clone();
    let mut since_kink = 0usize;
    // tau of the last date at which the payoff was imposed, for the lower boundary
    let mut last_reset_tau = 0.0;
    let n_int = m - 1;

    for k in (0..nt - 1).rev() {
        let dt_total = times[k + 1] - times[k];
        let tau_end = maturity - times[k];
        let substeps: Vec<(f64, f64)> = if since_kink < controls.rannacher_steps {
            vec![(0.5 * dt_total, 1.0), (0.5 * dt_total, 1.0)]
        } else {
            vec![(dt_total, 0.5)]
        };
        let mut tau = maturity - times[k + 1];
        for (dt, theta) in substeps {
            tau += dt;
            let lower_bc = if american {
                put_payoff(s[0], strike)
            } else {
                let el = tau - last_reset_tau;
                strike * (-rate * el).exp() - s[0] * (-div * el).exp()
            };
            let upper_bc = 0.0;
            let mut rhs = vec![0.0; n_int];
            for i in 1..m {
                let lv = v[i - 1];
                let uv = v[i + 1];
                rhs[i - 1] = v[i] + (1.0 - theta) * dt * (a * lv + b * v[i] + c * uv);
            }
            let lo = -theta * dt * a;
            let di = 1.0 - theta * dt * b;
            let up = -theta * dt * c;
            rhs[0] -= lo * lower_bc;
            rhs[n_int - 1] -= up * upper_bc;
            let mut new_v = vec![0.0; m + 1];
            new_v[0] = lower_bc;
            new_v[m] = upper_bc;
            let exercise_now = american;
            if exercise_now {
                // PSOR from the unconstrained solution as a warm start
                let mut x: Vec<f64> = (1..m).map(|i| v[i].max(payoff[i])).collect();
                let mut converged = false;
                for _ in 0..controls.max_iterations {
                    let mut err = 0.0f64;
                    for j in 0..n_int {
                        let left = if j == 0 { 0.0 } else { lo * x[j - 1] };
                        let right = if j + 1 == n_int { 0.0 } else { up * x[j + 1] };
                        let gs = (rhs[j] - left - right) / di;
                        let updated = (x[j] + controls.omega * (gs - x[j])).max(payoff[j + 1]);
                        err = err.max((updated - x[j]).abs());
                        x[j] = updated;
                    }
                    if err < controls.tolerance {
                        converged = true;
                        break;
                    }
                }
                if !converged {
                    return Err(DermError::Solver(format!(
                        "PSOR did not converge within {} iterations at t = {}",
                        controls.max_iterations, times[k]
                    )));
                }
                new_v[1..m].copy_from_slice(&x);
            } else {
                let lower = vec![lo; n_int];
                let diag = vec![di; n_int];
                let upper = vec![up; n_int];
                solve_tridiagonal(&lower, &diag, &upper, &mut rhs);
                new_v[1..m].copy_from_slice(&rhs);
            }
            v = new_v;
        }
        debug_assert!((tau - tau_end).abs() < 1e-9);
        since_kink += 1;
        if !american && is_exercise(times[k]) {
            for (vi, &gi) in v.iter_mut().zip(&payoff) {
                *vi = vi.max(gi);
            }
            since_kink = 0;
            last_reset_tau = tau_end;
        }
        values[k] = v.clone();
    }

    let boundary = values
        .iter()
        .enumerate()
        .map(|(k, vals)| {
            if k == nt - 1 {
                return strike;
            }
            if !is_exercise(times[k]) {
                return f64::NAN;
            }
            extract_boundary(&log_s, vals, &payoff, strike)
        })
        .collect();
    Ok(FdGrid {
        price: values[0][m / 2],
        log_s,
        times,
        values,
        boundary,
    })
}

/// Exercise boundary: first node (scanning up from low prices) where the
/// value exceeds the payoff by more than `1e-9`, linearly interpolated.
fn extract_boundary(log_s: &[f64], values: &[f64], payoff: &[f64], strike: f64) -> f64 {
    const TOL: f64 = 1e-9;
    let gap = |i: usize| values[i] - payoff[i];
    if gap(0) > TOL {
        return f64::NAN;
    }
    for i in 1..values.len() {
        if payoff[i] <= 0.0 {
            return strike.min(log_s[i].exp());
        }
        if gap(i) > TOL {
            let (g0, g1) = (gap(i - 1), gap(i));
            let w = ((TOL - g0) / (g1 - g0)).clamp(0.0, 1.0);
            return (log_s[i - 1] + w * (log_s[i] - log_s[i - 1])).exp();
        }
    }
    f64::NAN
}
