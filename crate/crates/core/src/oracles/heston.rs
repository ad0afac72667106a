//! Semi-analytic European call under Heston.
//!
//! Uses the single-integral (Lewis) representation
//! `C = S e^{-qT} - sqrt(S K) e^{-(r+q)T/2} / pi * int_0^inf Re[e^{iuk} phi(u - i/2)] / (u^2 + 1/4) du`
//! with `k = ln(S/K) + (r - q)T` and the characteristic function written in
//! the rotation-count-free form (`g = (xi - d)/(xi + d)`, decaying exponentials
//! only), so the complex logarithm never crosses its branch cut.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{DermError, Result};
use crate::markets::HestonParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HestonQuote {
    pub strike: f64,
    pub maturity: f64,
    pub price: f64,
    pub error_estimate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Quadrature {
    /// Adaptive Gauss-Kronrod (7/15) on `[0, inf)` mapped to `[0, 1)`.
    Adaptive { tolerance: f64, max_intervals: usize },
    /// Composite 15-point Kronrod rule with `panels` equal panels on `[0, upper]`.
    Fixed { panels: usize, upper: f64 },
}

impl Default for Quadrature {
    fn default() -> Self {
        Quadrature::Adaptive {
            tolerance: 1e-10,
            max_intervals: 5000,
        }
    }
}

/// Characteristic function of `ln(S_T / F_T)` under the pricing dynamics.
fn log_forward_cf(u: Complex64, p: &HestonParams, t: f64) -> Complex64 {
    let i = Complex64::i();
    // market price of volatility risk folded into the mean reversion
    let kappa = p.kappa + p.lambda;
    let theta = if kappa > 0.0 { p.kappa * p.theta / kappa } else { p.theta };
    let sigma = p.sigma;
    let iu = i * u;
    if sigma < 1e-10 {
        let int_var = if kappa > 1e-12 {
            theta * t + (p.v0 - theta) * (1.0 - (-kappa * t).exp()) / kappa
        } else {
            p.v0 * t
        };
        return (-0.5 * (u * u + iu) * int_var).exp();
    }
    let xi = kappa - p.rho * sigma * iu;
    let d = (xi * xi + sigma * sigma * (u * u + iu)).sqrt();
    // xi - d rewritten without cancellation, so small vol-of-vol stays accurate
    let xi_minus_d_over_s2 = -(u * u + iu) / (xi + d);
    let s2 = sigma * sigma;
    let g = xi_minus_d_over_s2 * s2 / (xi + d);
    let e = (-d * t).exp();
    let log_ratio = ln_1p(g * (1.0 - e) / (1.0 - g));
    let c = kappa * theta * (xi_minus_d_over_s2 * t - 2.0 * log_ratio / s2);
    let dd = xi_minus_d_over_s2 * (1.0 - e) / (1.0 - g * e);
    (c + dd * p.v0).exp()
}

/// `ln(1 + z)` accurate for small `|z|`.
fn ln_1p(z: Complex64) -> Complex64 {
    if z.norm() < 1e-4 {
        z * (1.0 - z * (0.5 - z * (1.0 / 3.0 - z * 0.25)))
    } else {
        (1.0 + z).ln()
    }
}

#[allow(clippy::excessive_precision)]
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
#[allow(clippy::excessive_precision)]
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
#[allow(clippy::excessive_precision)]
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

/// 15-point Kronrod estimate and |Kronrod - Gauss| on `[a, b]`.
fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = fc * WGK[7];
    let mut g = fc * WG[3];
    for j in 0..7 {
        let x = h * XGK[j];
        let s = f(c - x) + f(c + x);
        k += WGK[j] * s;
        if j % 2 == 1 {
            g += WG[j / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

fn integrate(f: &impl Fn(f64) -> f64, q: Quadrature) -> Result<(f64, f64)> {
    match q {
        Quadrature::Fixed { panels, upper } => {
            let w = upper / panels as f64;
            let (mut s, mut e) = (0.0, 0.0);
            for j in 0..panels {
                let (v, err) = gk15(f, j as f64 * w, (j + 1) as f64 * w);
                s += v;
                e += err;
            }
            Ok((s, e))
        }
        Quadrature::Adaptive { tolerance, max_intervals } => {
            // u = x / (1 - x), du = dx / (1 - x)^2
            let mapped = |x: f64| {
                if x >= 1.0 {
                    return 0.0;
                }
                let om = 1.0 - x;
                f(x / om) / (om * om)
            };
            let mut intervals = vec![(0.0, 1.0, gk15(&mapped, 0.0, 1.0))];
            loop {
                let total: f64 = intervals.iter().map(|iv| iv.2 .0).sum();
                let err: f64 = intervals.iter().map(|iv| iv.2 .1).sum();
                if err <= tolerance {
                    return Ok((total, err));
                }
                if intervals.len() >= max_intervals {
                    return Err(DermError::Solver(format!(
                        "Heston quadrature error {err:.2e} above {tolerance:.1e} after {max_intervals} intervals"
                    )));
                }
                let (idx, _) = intervals
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1 .2 .1.total_cmp(&b.1 .2 .1))
                    .expect("non-empty");
                let (a, b, _) = intervals.swap_remove(idx);
                let mid = 0.5 * (a + b);
                intervals.push((a, mid, gk15(&mapped, a, mid)));
                intervals.push((mid, b, gk15(&mapped, mid, b)));
            }
        }
    }
}

pub fn heston_call(p: &HestonParams, strike: f64, maturity: f64) -> Result<HestonQuote> {
    heston_call_with(p, strike, maturity, Quadrature::default())
}

pub fn heston_call_with(p: &HestonParams, strike: f64, maturity: f64, q: Quadrature) -> Result<HestonQuote> {
    p.validate()?;
    if !(strike > 0.0 && maturity > 0.0) {
        return Err(DermError::Contract("strike and maturity must be positive".into()));
    }
    let r = p.rate;
    let div = 0.0;
    let k = (p.s0 / strike).ln() + (r - div) * maturity;
    let integrand = |u: f64| {
        let z = Complex64::new(u, -0.5);
        let v = (Complex64::i() * u * k).exp() * log_forward_cf(z, p, maturity);
        v.re / (u * u + 0.25)
    };
    let (integral, err) = integrate(&integrand, q)?;
    let scale = (p.s0 * strike).sqrt() * (-(r + div) * maturity / 2.0).exp() / std::f64::consts::PI;
    let price = p.s0 * (-div * maturity).exp() - scale * integral;
    let lower = (p.s0 * (-div * maturity).exp() - strike * (-r * maturity).exp()).max(0.0);
    if !price.is_finite() {
        return Err(DermError::Solver("non-finite Heston price".into()));
    }
    Ok(HestonQuote {
        strike,
        maturity,
        price: price.max(lower),
        error_estimate: scale * err,
    })
}
