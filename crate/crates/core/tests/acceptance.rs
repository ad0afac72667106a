//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on failure.
//!
//! The paper-scale max-call run takes tens of minutes and only runs when
//! `DERM_PAPER_SCALE=1`. `DERM_ACCEPTANCE_ONLY=3,4` restricts the run to the
//! listed criteria.

mod common;

use std::time::Instant;

use derm_core::experiments::{
    boundary_agreement, run_hedge_price, run_max_call, run_merton, run_put, HedgeExperiment, MaxCallExperiment, MaxCallOutcome, MertonExperiment,
    PutExperiment,
};
use derm_core::hedging::{black_scholes_hedge_outcome, wealth_rollout, HedgePolicy, HedgingSpec, WealthMode};
use derm_core::markets::simulate_heston;
use derm_core::nn::Activation;
use derm_core::oracles::{fd_american_put, heston_call, FdControls};
use derm_core::rng::substream;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn criterion_1() -> Outcome {
    let grid = fd_american_put(
        40.0,
        40.0,
        1.0,
        0.06,
        0.0,
        0.4,
        &FdControls {
            time_steps: 2000,
            ..FdControls::default()
        },
    )
    .unwrap();
    outcome(
        (grid.price - 5.311).abs() <= 0.01,
        format!("American put {:.5}, target 5.311 +/- 0.01", grid.price),
    )
}

fn criterion_2() -> Outcome {
    let spec = HedgingSpec::table(100.0, WealthMode::Learnable);
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, want) in [(90.0, 10.076508), (100.0, 2.295405), (110.0, 0.128136)] {
        let got = heston_call(&spec.market, k, spec.mesh.maturity()).unwrap().price;
        pass &= (got - want).abs() <= 1e-4;
        parts.push(format!("K={k}: {got:.6} (target {want})"));
    }
    outcome(pass, parts.join(", "))
}

fn criterion_3() -> Outcome {
    let out = run_put(&PutExperiment::default(), 1).unwrap();
    outcome(
        out.relative_error.abs() <= 0.015,
        format!(
            "trained {:.4} (se {:.4}) vs 50-date FD {:.5}, relative error {:+.3}%",
            out.evaluation.price,
            out.evaluation.std_error,
            out.fd_price,
            100.0 * out.relative_error
        ),
    )
}

fn criterion_4_desk() -> (Outcome, MaxCallOutcome) {
    let start = Instant::now();
    let out = run_max_call(&MaxCallExperiment::default(), 1).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let p = out.evaluation.price;
    let pass = (8.00..=8.11).contains(&p) && secs <= 15.0 * 60.0;
    let o = outcome(
        pass,
        format!("desk price {p:.4} (se {:.4}) in [8.00, 8.11], {secs:.0} s", out.evaluation.std_error),
    );
    (o, out)
}

fn criterion_4_paper() -> Outcome {
    let start = Instant::now();
    let out = run_max_call(&MaxCallExperiment::default().paper_scale(), 1).unwrap();
    let p = out.evaluation.price;
    let se = out.evaluation.std_error;
    outcome(
        (8.053..=8.082).contains(&p) && (se - 0.003).abs() <= 0.001,
        format!(
            "paper-scale price {p:.4} (se {se:.5}) in [8.053, 8.082], {:.0} s",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_5(at_90: Option<MaxCallOutcome>) -> Outcome {
    let a = at_90.unwrap_or_else(|| run_max_call(&MaxCallExperiment::default(), 1).unwrap());
    let b = run_max_call(
        &MaxCallExperiment {
            s0: 100.0,
            ..MaxCallExperiment::default()
        },
        1,
    )
    .unwrap();
    let rep = boundary_agreement(&a, &b, 1 << 16, 10, 0.005, 5).unwrap();
    outcome(
        rep.cells > 0 && rep.max_relative_deviation <= 0.05,
        format!(
            "max relative deviation {:.2}% over {} commonly visited cells (worst at {:?})",
            100.0 * rep.max_relative_deviation,
            rep.cells,
            rep.worst
        ),
    )
}

fn criterion_6() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for k in [90.0, 100.0, 110.0] {
        let start = Instant::now();
        let out = run_hedge_price(
            &HedgeExperiment {
                strike: k,
                ..HedgeExperiment::default()
            },
            17,
        )
        .unwrap();
        let secs = start.elapsed().as_secs_f64();
        pass &= out.mean_error().abs() <= 0.02 && secs <= 600.0;
        parts.push(format!(
            "K={k}: mean {:.5} vs {:.6} (diff {:+.5}, sd {:.4}, {secs:.0} s)",
            out.mean_price,
            out.oracle,
            out.mean_error(),
            out.std_price
        ));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_7() -> Outcome {
    let spec = HedgingSpec::table(100.0, WealthMode::Fixed { x: 0.0 });
    let batch = simulate_heston(&spec.market, &spec.mesh, 1 << 14, &mut substream(7, "paths", 0)).unwrap();
    let wealths = [-3.0, 0.0, 1.147, 2.295, 10.0];
    let mut worst: f64 = 0.0;
    let mut check = |variances: Vec<f64>| {
        for v in &variances {
            worst = worst.max((v - variances[0]).abs());
        }
    };
    for seed in 0..4 {
        let policy = HedgePolicy::new(&spec, &[20, 20], Activation::Relu, seed % 2 == 0, &mut substream(seed, "init", 0)).unwrap();
        check(
            wealths
                .iter()
                .map(|&x| wealth_rollout(&policy, x, &batch, &spec).unwrap().error_variance)
                .collect(),
        );
    }
    check(
        wealths
            .iter()
            .map(|&x| black_scholes_hedge_outcome(&spec, x, &batch).unwrap().error_variance)
            .collect(),
    );
    outcome(
        worst <= 1e-10,
        format!("largest error-variance difference {worst:.2e} across 5 wealths and 5 policies"),
    )
}

fn criterion_8() -> Outcome {
    let out = run_merton(&MertonExperiment::default(), 8).unwrap();
    let (d10, d40) = (&out.rows[0], &out.rows[1]);
    let cont = out.continual.as_ref().unwrap();
    let ce_rel = (cont.ce_out - cont.ce_star).abs() / cont.ce_star.abs();
    outcome(
        d10.gap_mean > 0.0 && d40.gap_mean > d10.gap_mean && ce_rel <= 0.05,
        format!(
            "gap d=10 {:.2}% (sd {:.2}), d=40 {:.2}% (sd {:.2}); continual ce {:.5} vs ce* {:.5} ({:.2}%)",
            d10.gap_mean,
            d10.gap_std,
            d40.gap_mean,
            d40.gap_std,
            cont.ce_out,
            cont.ce_star,
            100.0 * ce_rel
        ),
    )
}

fn criterion_9() -> Outcome {
    let grad = (0..20)
        .map(|s| common::mlp_gradient_error(s, if s % 2 == 0 { Activation::Tanh } else { Activation::Sigmoid }, s % 3 == 0))
        .fold(0.0, f64::max);
    let mass = (0..200).map(|s| common::xi_mass_error(s, 1 + (s as usize * 7) % 150)).fold(0.0, f64::max);
    let relaxed = (0..20).map(|s| common::relaxed_minus_sharp(s, s % 2 == 1).abs()).fold(0.0, f64::max);
    let star = (0..20).map(|s| common::star_shape_violations(s).1).sum::<usize>();
    let parity = common::parity_error(9, 2000);
    let mart = common::gbm_martingale_z(9, 1 << 18).max(common::heston_martingale_z(9, 1 << 17));
    let pass = grad < 1e-5 && mass <= 1e-12 && relaxed == 0.0 && star == 0 && parity < 1e-12 && mart < 3.0;
    outcome(
        pass,
        format!(
            "gradient rel err {grad:.1e}, mass err {mass:.1e}, relaxed-sharp {relaxed:.1e}, star violations {star}, parity {parity:.1e}, martingale max z {mart:.2}"
        ),
    )
}

fn main() {
    let only: Option<Vec<String>> = std::env::var("DERM_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').map(|x| x.trim().to_string()).collect());
    let wanted = |id: &str| only.as_ref().is_none_or(|o| o.iter().any(|x| x == id));
    let paper_scale = std::env::var("DERM_PAPER_SCALE").is_ok_and(|v| v == "1");
    let mut failures = 0;
    let mut report = |name: &str, start: Instant, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        if !o.pass {
            failures += 1;
        }
        println!("criterion {name}: {tag} ({}; {:.1} s)", o.detail, start.elapsed().as_secs_f64());
    };

    let simple: [Criterion; 3] = [("1", criterion_1), ("2", criterion_2), ("3", criterion_3)];
    for (id, f) in simple {
        if wanted(id) {
            let t = Instant::now();
            report(id, t, f());
        }
    }
    let mut at_90 = None;
    if wanted("4") {
        let t = Instant::now();
        let (o, run) = criterion_4_desk();
        at_90 = Some(run);
        report("4 (desk scale)", t, o);
        if paper_scale {
            let t = Instant::now();
            report("4 (paper scale)", t, criterion_4_paper());
        } else {
            println!("criterion 4 (paper scale): SKIPPED (set DERM_PAPER_SCALE=1 to run)");
        }
    }
    if wanted("5") {
        let t = Instant::now();
        report("5", t, criterion_5(at_90));
    }
    let rest: [Criterion; 4] = [("6", criterion_6), ("7", criterion_7), ("8", criterion_8), ("9", criterion_9)];
    for (id, f) in rest {
        if wanted(id) {
            let t = Instant::now();
            report(id, t, f());
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
