/// Cox-Ross-Rubinstein tree for a put; American when `american` is set.
pub fn binomial_put(s0: f64, strike: f64, t: f64, rate: f64, div: f64, sigma: f64, steps: usize, american: bool) -> f64 {
    let dt = t / steps as f64;
    let u = (sigma * dt.sqrt()).exp();
    let d = 1.0 / u;
    let disc = (-rate * dt).exp();
    let p = (((rate - div) * dt).exp() - d) / (u - d);
    let mut values: Vec<f64> = (0..=steps)
        .map(|j| (strike - s0 * u.powi(j as i32) * d.powi((steps - j) as i32)).max(0.0))
        .collect();
    for n in (0..steps).rev() {
        for j in 0..=n {
            let cont = disc * (p * values[j + 1] + (1.0 - p) * values[j]);
            values[j] = if american {
                let s = s0 * u.powi(j as i32) * d.powi((n - j) as i32);
                cont.max(strike - s)
            } else {
                cont
            };
        }
    }
    values[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::black_scholes::{black_scholes, OptionKind};

    #[test]
    fn european_tree_converges_to_closed_form() {
        let tree = binomial_put(40.0, 40.0, 1.0, 0.06, 0.0, 0.4, 4000, false);
        let bs = black_scholes(OptionKind::Put, 40.0, 40.0, 1.0, 0.06, 0.0, 0.4);
        assert!((tree - bs).abs() < 2e-3, "{tree} vs {bs}");
    }

    #[test]
    fn american_premium_positive() {
        let am = binomial_put(40.0, 40.0, 1.0, 0.06, 0.0, 0.4, 2000, true);
        let eu = binomial_put(40.0, 40.0, 1.0, 0.06, 0.0, 0.4, 2000, false);
        assert!(am > eu + 0.1);
    }
}
