//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export takes plain numbers and returns a JSON string, which keeps the
//! JavaScript side free of generated class wrappers. The `*_json` functions
//! hold the logic and are ordinary Rust so they can be tested natively.

use derm_core::error::{DermError, Result};
use derm_core::experiments::{run_put, PutExperiment};
use derm_core::markets::HestonParams;
use derm_core::oracles::{black_scholes, fd_american_put, heston_call, FdControls, OptionKind};
use derm_core::train::TrainConfig;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(DermError::Contract(format!("{name} must be positive, got {v}")))
    }
}

/// American put price and early-exercise boundary from the finite-difference solver.
pub fn fd_put_json(s0: f64, strike: f64, maturity: f64, rate: f64, sigma: f64) -> Result<Value> {
    for (n, v) in [("s0", s0), ("strike", strike), ("maturity", maturity), ("sigma", sigma)] {
        positive(n, v)?;
    }
    let controls = FdControls {
        time_steps: 400,
        space_steps: 400,
        ..FdControls::default()
    };
    let grid = fd_american_put(s0, strike, maturity, rate, 0.0, sigma, &controls)?;
    let european = black_scholes(OptionKind::Put, s0, strike, maturity, rate, 0.0, sigma);
    // NaN marks times with no exercise region; JSON has no NaN so send null
    let boundary: Vec<Option<f64>> = grid.boundary.iter().map(|b| b.is_finite().then_some(*b)).collect();
    Ok(json!({
        "price": grid.price,
        "european": european,
        "times": grid.times,
        "boundary": boundary,
    }))
}

/// Black-Scholes volatility reproducing `price` for a call, by bisection.
fn implied_vol(price: f64, s0: f64, strike: f64, maturity: f64, rate: f64) -> Option<f64> {
    let f = |sig: f64| black_scholes(OptionKind::Call, s0, strike, maturity, rate, 0.0, sig) - price;
    let (mut lo, mut hi) = (1e-4, 4.0);
    if f(lo) > 0.0 || f(hi) < 0.0 {
        return None;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Heston call prices and implied volatilities across `n` strikes in `[k_lo, k_hi]`, spot 100.
#[allow(clippy::too_many_arguments)]
pub fn heston_smile_json(v0: f64, kappa: f64, theta: f64, sigma: f64, rho: f64, maturity: f64, k_lo: f64, k_hi: f64, n: usize) -> Result<Value> {
    positive("maturity", maturity)?;
    if !(k_lo > 0.0 && k_hi > k_lo && (2..=200).contains(&n)) {
        return Err(DermError::Contract("need 0 < k_lo < k_hi and 2 to 200 strikes".into()));
    }
    let market = HestonParams {
        v0,
        kappa,
        theta,
        sigma,
        rho,
        ..HestonParams::hedging_table()
    };
    let mut strikes = Vec::with_capacity(n);
    let mut prices = Vec::with_capacity(n);
    let mut vols = Vec::with_capacity(n);
    for i in 0..n {
        let k = k_lo + (k_hi - k_lo) * i as f64 / (n - 1) as f64;
        let p = heston_call(&market, k, maturity)?.price;
        strikes.push(k);
        prices.push(p);
        vols.push(implied_vol(p, market.s0, k, maturity, market.rate));
    }
    Ok(json!({ "strikes": strikes, "prices": prices, "implied_vols": vols }))
}

/// Trains a small stopping network for the at-the-money put and compares its boundary with the FD one.
pub fn train_put_json(iterations: usize, seed: u64) -> Result<Value> {
    if !(1..=5000).contains(&iterations) {
        return Err(DermError::Contract("iterations must lie in 1..=5000".into()));
    }
    let cfg = PutExperiment {
        hidden: vec![16, 16],
        train: TrainConfig::new(256, iterations, 0),
        n_eval_paths: 1 << 14,
        fd_time_steps: 500,
        ..PutExperiment::default()
    };
    let out = run_put(&cfg, seed)?;
    let times = out.spec.mesh.times().to_vec();
    let learned = times.iter().map(|&t| out.boundary.level(t, &[1.0])).collect::<Result<Vec<f64>>>()?;
    let fd = cfg.fd_bermudan()?;
    let fd_boundary: Vec<Option<f64>> = fd.boundary.iter().map(|b| b.is_finite().then_some(*b)).collect();
    Ok(json!({
        "price": out.evaluation.price,
        "std_error": out.evaluation.std_error,
        "fd_price": out.fd_price,
        "relative_error": out.relative_error,
        "losses": out.train.losses,
        "times": times,
        "learned": learned,
        "fd_times": fd.times,
        "fd_boundary": fd_boundary,
    }))
}

fn to_js(r: Result<Value>) -> std::result::Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn fd_put(s0: f64, strike: f64, maturity: f64, rate: f64, sigma: f64) -> std::result::Result<String, JsError> {
    to_js(fd_put_json(s0, strike, maturity, rate, sigma))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn heston_smile(
    v0: f64,
    kappa: f64,
    theta: f64,
    sigma: f64,
    rho: f64,
    maturity: f64,
    k_lo: f64,
    k_hi: f64,
    n: usize,
) -> std::result::Result<String, JsError> {
    to_js(heston_smile_json(v0, kappa, theta, sigma, rho, maturity, k_lo, k_hi, n))
}

#[wasm_bindgen]
pub fn train_put(iterations: usize, seed: u64) -> std::result::Result<String, JsError> {
    to_js(train_put_json(iterations, seed))
}
