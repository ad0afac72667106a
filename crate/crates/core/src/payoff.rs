use serde::{Deserialize, Serialize};

/// Exercise payoffs of the stopping problems.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payoff {
    /// `(K - s)^+` on a single asset.
    Put { strike: f64 },
    /// `(max_i s_i - K)^+`.
    MaxCall { strike: f64 },
    /// `(s - K)^+` on a single asset.
    Call { strike: f64 },
}

impl Payoff {
    pub fn strike(&self) -> f64 {
        match *self {
            Payoff::Put { strike } | Payoff::MaxCall { strike } | Payoff::Call { strike } => strike,
        }
    }

    pub fn value(&self, s: &[f64]) -> f64 {
        match *self {
            Payoff::Put { strike } => (strike - s[0]).max(0.0),
            Payoff::Call { strike } => (s[0] - strike).max(0.0),
            Payoff::MaxCall { strike } => (max_component(s) - strike).max(0.0),
        }
    }
}

/// `m(s) = max_i s_i`.
pub fn max_component(s: &[f64]) -> f64 {
    s.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

pub fn payoff_put(s: f64, strike: f64) -> f64 {
    Payoff::Put { strike }.value(&[s])
}

pub fn payoff_max_call(s: &[f64], strike: f64) -> f64 {
    Payoff::MaxCall { strike }.value(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(payoff_max_call(&[90.0, 105.0], 100.0), 5.0);
        assert_eq!(payoff_max_call(&[80.0, 90.0], 100.0), 0.0);
        assert_eq!(payoff_put(35.0, 40.0), 5.0);
        assert_eq!(Payoff::Call { strike: 90.0 }.value(&[100.0]), 10.0);
    }
}
