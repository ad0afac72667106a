use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionKind {
    Call,
    Put,
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// European price with continuous dividend yield `div`.
///
/// `T = 0` returns the payoff and `sigma = 0` the discounted deterministic
/// forward payoff.
pub fn black_scholes(kind: OptionKind, s0: f64, strike: f64, t: f64, rate: f64, div: f64, sigma: f64) -> f64 {
    let fwd_s = s0 * (-div * t).exp();
    let df_k = strike * (-rate * t).exp();
    let vol = sigma * t.sqrt();
    if t <= 0.0 || vol <= 0.0 {
        return match kind {
            OptionKind::Call => (fwd_s - df_k).max(0.0),
            OptionKind::Put => (df_k - fwd_s).max(0.0),
        };
    }
    let d1 = ((fwd_s / df_k).ln() + 0.5 * vol * vol) / vol;
    let d2 = d1 - vol;
    match kind {
        OptionKind::Call => fwd_s * norm_cdf(d1) - df_k * norm_cdf(d2),
        OptionKind::Put => df_k * norm_cdf(-d2) - fwd_s * norm_cdf(-d1),
    }
}

/// Delta `dC/dS` of a European call.
pub fn call_delta(s0: f64, strike: f64, t: f64, rate: f64, div: f64, sigma: f64) -> f64 {
    let vol = sigma * t.sqrt();
    if t <= 0.0 || vol <= 0.0 {
        let fwd = s0 * ((rate - div) * t).exp();
        return if fwd > strike { (-div * t).exp() } else { 0.0 };
    }
    let d1 = ((s0 / strike).ln() + (rate - div) * t + 0.5 * vol * vol) / vol;
    (-div * t).exp() * norm_cdf(d1)
}
