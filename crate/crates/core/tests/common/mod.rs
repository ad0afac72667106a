//! Deterministic checks shared by the property suites and the acceptance run.
//! Each returns the measured quantity so callers choose how to report it.
#![allow(dead_code)]

use derm_core::autodiff::Graph;
use derm_core::markets::{simulate_gbm, simulate_heston, GbmParams, HestonParams, TimeMesh};
use derm_core::nn::{Activation, Mlp, Mode};
use derm_core::oracles::{black_scholes, OptionKind};
use derm_core::payoff::Payoff;
use derm_core::rng::substream;
use derm_core::stopping::{
    indicator_probs, max_call_rule, relaxed_value, sharp_evaluate_levels, star_shape_check, xi_recursion, BoundaryNet, Encoding, StoppingSpec,
};
use derm_core::tensor::Tensor;
use rand::Rng;

fn mlp_loss(net: &Mlp, params: &[f64], x: &Tensor, y: &Tensor) -> f64 {
    let mut net = net.clone();
    net.params_mut().copy_from_slice(params);
    let mut g = Graph::new();
    let vars = net.bind(&mut g);
    let xv = g.constant(x.clone());
    let out = net.forward_graph(&mut g, &vars, xv, Mode::Train).unwrap();
    let diff = g.sub_const(out, y).unwrap();
    let sq = g.square(diff);
    let l = g.mean(sq);
    g.value(l).item()
}

/// Norm-wise relative error `|g_ad - g_fd| / |g_fd|` of a network gradient.
pub fn mlp_gradient_error(seed: u64, activation: Activation, batch_norm: bool) -> f64 {
    let mut rng = substream(seed, "grad", 0);
    let net = Mlp::new(&[3, 6, 5, 2], activation, batch_norm, &mut rng).unwrap();
    let rows = 8;
    let x = Tensor::matrix(rows, 3, (0..rows * 3).map(|_| rng.random_range(-1.5..1.5)).collect());
    let y = Tensor::matrix(rows, 2, (0..rows * 2).map(|_| rng.random_range(-1.0..1.0)).collect());
    let p0 = net.params().to_vec();
    let mut g = Graph::new();
    let mut net_g = net.clone();
    let vars = net_g.bind(&mut g);
    let xv = g.constant(x.clone());
    let out = net_g.forward_graph(&mut g, &vars, xv, Mode::Train).unwrap();
    let diff = g.sub_const(out, &y).unwrap();
    let sq = g.square(diff);
    let l = g.mean(sq);
    let analytic = g.backward(l).unwrap().flatten(&vars);
    let h = 1e-5;
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..p0.len() {
        let mut up = p0.clone();
        up[k] += h;
        let mut dn = p0.clone();
        dn[k] -= h;
        let fd = (mlp_loss(&net, &up, &x, &y) - mlp_loss(&net, &dn, &x, &y)) / (2.0 * h);
        num += (analytic[k] - fd).powi(2);
        den += fd * fd;
    }
    (num / den).sqrt()
}

/// `|sum_t p_t (1 - xi_t) - 1|` for a random probability path of `n + 1` nodes.
pub fn xi_mass_error(seed: u64, n: usize) -> f64 {
    let mut rng = substream(seed, "xi", 0);
    let mut p: Vec<f64> = (0..n)
        .map(|_| match rng.random_range(0..4) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(0.0..1.0),
        })
        .collect();
    p.push(1.0);
    let xi = xi_recursion(&p).unwrap();
    (p.iter().zip(&xi).map(|(pt, x)| pt * (1.0 - x)).sum::<f64>() - 1.0).abs()
}

/// Relaxed value under indicator probabilities minus the sharp first-entry
/// value of the same random boundary levels. Zero when exact.
pub fn relaxed_minus_sharp(seed: u64, max_call: bool) -> f64 {
    let mut rng = substream(seed, "indicator", 0);
    let (spec, market) = if max_call {
        let mesh = TimeMesh::uniform(3.0, 9).unwrap();
        (
            StoppingSpec::new(Payoff::MaxCall { strike: 100.0 }, 0.05, mesh, 2.0),
            GbmParams::independent(2, 90.0, 0.05, 0.1, 0.2),
        )
    } else {
        let mesh = TimeMesh::refined_toward_maturity(1.0, 12, 5.0).unwrap();
        (
            StoppingSpec::new(Payoff::Put { strike: 40.0 }, 0.06, mesh, 1.0),
            GbmParams::independent(1, 40.0, 0.06, 0.0, 0.4),
        )
    };
    let batch = simulate_gbm(&market, &spec.mesh, 500, &mut rng, 0.0).unwrap();
    let nodes = spec.mesh.times().len();
    let centre = if max_call { 130.0 } else { 34.0 };
    let levels: Vec<f64> = (0..500 * nodes).map(|_| centre + rng.random_range(-10.0..10.0)).collect();
    let probs = indicator_probs(&levels, &batch, &spec).unwrap();
    let relaxed = relaxed_value(&batch, &probs, &spec).unwrap();
    let sharp = sharp_evaluate_levels(&levels, &batch, &spec).unwrap().price;
    relaxed - sharp
}

/// Star-shape violations of a randomly initialized max-call boundary network.
pub fn star_shape_violations(seed: u64) -> (usize, usize) {
    let mesh = TimeMesh::uniform(3.0, 9).unwrap();
    let spec = StoppingSpec::new(Payoff::MaxCall { strike: 100.0 }, 0.05, mesh, 5.0);
    let mut rng = substream(seed, "star", 0);
    let b = BoundaryNet::new(
        Encoding::TimeAndSimplex,
        2,
        &[16, 16],
        Activation::Relu,
        100.0,
        rng.random_range(90.0..160.0),
        3.0,
        &mut rng,
    )
    .unwrap();
    let grid: Vec<(f64, Vec<f64>)> = (0..400)
        .map(|_| {
            (
                rng.random_range(0.0..3.0),
                vec![rng.random_range(10.0..250.0), rng.random_range(10.0..250.0)],
            )
        })
        .collect();
    let rep = star_shape_check(max_call_rule(&b, &spec), &grid, &[1.0, 1.01, 1.3, 2.0, 5.0]).unwrap();
    (rep.checked, rep.violations.len())
}

/// Worst `|C - P - (S e^{-qT} - K e^{-rT})| / (1 + max(S, K))` over random inputs.
pub fn parity_error(seed: u64, cases: usize) -> f64 {
    let mut rng = substream(seed, "parity", 0);
    (0..cases)
        .map(|_| {
            let (s, k, t) = (rng.random_range(1.0..200.0), rng.random_range(1.0..200.0), rng.random_range(0.0..5.0));
            let (r, q, sigma) = (rng.random_range(-0.02..0.1), rng.random_range(0.0..0.1), rng.random_range(0.0..1.0));
            let c = black_scholes(OptionKind::Call, s, k, t, r, q, sigma);
            let p = black_scholes(OptionKind::Put, s, k, t, r, q, sigma);
            let parity = s * (-q * t).exp() - k * (-r * t).exp();
            (c - p - parity).abs() / (1.0 + s.max(k))
        })
        .fold(0.0, f64::max)
}

/// Largest deviation of a discounted price from its start, in standard errors,
/// over every asset and mesh node.
pub fn gbm_martingale_z(seed: u64, paths: usize) -> f64 {
    let mut market = GbmParams::independent(2, 100.0, 0.05, 0.02, 0.3);
    market.dividend[1] = 0.0;
    market.correlation = vec![1.0, 0.4, 0.4, 1.0];
    let mesh = TimeMesh::uniform(2.0, 8).unwrap();
    let batch = simulate_gbm(&market, &mesh, paths, &mut substream(seed, "mart", 0), 0.0).unwrap();
    let mut worst: f64 = 0.0;
    for (t, &time) in mesh.times().iter().enumerate().skip(1) {
        let growth = |a: usize| (-(market.rate - market.dividend[a]) * time).exp();
        for a in 0..2 {
            let v: Vec<f64> = (0..paths).map(|i| growth(a) * batch.price(i, t, a)).collect();
            worst = worst.max(z_score(&v, market.s0[a]));
        }
    }
    worst
}

pub fn heston_martingale_z(seed: u64, paths: usize) -> f64 {
    let p = HestonParams {
        s0: 100.0,
        v0: 0.04,
        mu: 0.03,
        kappa: 1.5,
        theta: 0.05,
        sigma: 0.5,
        rho: -0.6,
        lambda: 0.0,
        rate: 0.03,
    };
    let mesh = TimeMesh::uniform(1.0, 24).unwrap();
    let batch = simulate_heston(&p, &mesh, paths, &mut substream(seed, "hmart", 0)).unwrap();
    mesh.times()
        .iter()
        .enumerate()
        .skip(1)
        .map(|(t, &time)| {
            let v: Vec<f64> = (0..paths).map(|i| (-p.rate * time).exp() * batch.price(i, t, 0)).collect();
            z_score(&v, p.s0)
        })
        .fold(0.0, f64::max)
}

pub fn z_score(v: &[f64], target: f64) -> f64 {
    let m = v.len() as f64;
    let mean = v.iter().sum::<f64>() / m;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean - target).abs() / (var / m).sqrt()
}
