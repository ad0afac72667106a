//! Executes a resolved plan and writes its artifacts.
//!
//! Numeric outputs (CSV and report JSON) depend only on the configuration and
//! seed. Wall-clock timings go to the manifest alone so that reruns produce
//! byte-identical result files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use derm_core::experiments::{run_hedge_price, run_max_call, run_merton, run_put};
use derm_core::hedging::write_hedge_trace;
use derm_core::markets::{simulate_heston, GbmParams, TimeMesh};
use derm_core::merton::write_overlearning_csv;
use derm_core::oracles::{black_scholes, fd_american_put, heston_call, lsm_price, Exercise, LsmConfig, OptionKind};
use derm_core::payoff::Payoff;
use derm_core::rng::{child_seed, substream};
use derm_core::stopping::{write_boundary_csv, PriceReport};
use derm_core::train::TrainReport;
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{ExperimentConfig, OracleConfig, Plan};
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub label: String,
    pub seconds: f64,
}

/// Everything needed to reproduce and locate a run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub paper_scale: bool,
    pub seeds: Vec<u64>,
    /// File names relative to the run directory.
    pub outputs: Vec<String>,
    pub timings: Vec<Timing>,
}

struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
    timings: Vec<Timing>,
    seeds: Vec<u64>,
}

impl Artifacts {
    fn create(&mut self, name: &str) -> Result<BufWriter<File>, CliError> {
        self.files.push(name.to_string());
        Ok(BufWriter::new(File::create(self.dir.join(name))?))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn time<T>(&mut self, label: String, f: impl FnOnce() -> Result<T, CliError>) -> Result<T, CliError> {
        let start = Instant::now();
        let out = f()?;
        let seconds = start.elapsed().as_secs_f64();
        info!("{label}: {seconds:.1} s");
        self.timings.push(Timing { label, seconds });
        Ok(out)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, s)
}

fn write_losses<W: Write>(w: &mut W, key: &str, run: usize, rep: &TrainReport) -> Result<(), CliError> {
    for (it, loss) in rep.losses.iter().enumerate() {
        writeln!(w, "{key}{run},{it},{loss}")?;
    }
    Ok(())
}

/// Runs `plan` into `out` and returns the manifest that was written there.
pub fn execute(config: &ExperimentConfig, plan: &Plan, paper_scale: bool, out: &Path) -> Result<RunManifest, CliError> {
    fs::create_dir_all(out)?;
    let mut art = Artifacts {
        dir: out.to_path_buf(),
        files: Vec::new(),
        timings: Vec::new(),
        seeds: Vec::new(),
    };
    let seed = config.seed;
    match plan {
        Plan::Put { experiment, repeats } => {
            let mut runs = Vec::new();
            for r in 0..*repeats {
                let s = child_seed(seed, "repeat", r as u64);
                art.seeds.push(s);
                runs.push(art.time(format!("put run {r}"), || Ok(run_put(experiment, s)?))?);
            }
            let mut prices = art.create("prices.csv")?;
            writeln!(prices, "run,seed,price,std_error,fd_price,relative_error")?;
            for (r, o) in runs.iter().enumerate() {
                writeln!(
                    prices,
                    "{r},{},{},{},{},{}",
                    art.seeds[r], o.evaluation.price, o.evaluation.std_error, o.fd_price, o.relative_error
                )?;
            }
            prices.flush()?;
            let mut loss = art.create("loss.csv")?;
            writeln!(loss, "run,iteration,loss")?;
            for (r, o) in runs.iter().enumerate() {
                write_losses(&mut loss, "", r, &o.train)?;
            }
            loss.flush()?;
            let first = &runs[0];
            let mut b = art.create("boundary.csv")?;
            write_boundary_csv(&first.boundary, first.spec.mesh.times(), &[], &mut b)?;
            b.flush()?;
            let fd = experiment.fd_bermudan()?;
            let mut f = art.create("fd_boundary.csv")?;
            writeln!(f, "time,F")?;
            for (t, level) in fd.times.iter().zip(&fd.boundary) {
                writeln!(f, "{t},{level}")?;
            }
            f.flush()?;
            let prices: Vec<f64> = runs.iter().map(|o| o.evaluation.price).collect();
            let (mean, std) = mean_std(&prices);
            let reports: Vec<PriceReport> = runs
                .iter()
                .zip(&art.seeds)
                .map(|(o, s)| PriceReport::new(&o.evaluation, *s, &o.spec))
                .collect();
            art.json("report.json", &json!({ "fd_price": fd.price, "mean": mean, "std": std, "runs": reports }))?;
            println!("put: mean price {mean:.5} (sd {std:.5}) vs 50-date FD {:.5}", fd.price);
        }
        Plan::MaxCall { experiments, repeats } => {
            let mut all = Vec::new();
            for e in experiments {
                for r in 0..*repeats {
                    let s = child_seed(seed, "repeat", r as u64);
                    art.seeds.push(s);
                    all.push((e.s0, r, s, art.time(format!("maxcall s0={} run {r}", e.s0), || Ok(run_max_call(e, s)?))?));
                }
            }
            let mut prices = art.create("prices.csv")?;
            writeln!(prices, "s0,run,seed,price,std_error")?;
            for (s0, r, s, o) in &all {
                writeln!(prices, "{s0},{r},{s},{},{}", o.evaluation.price, o.evaluation.std_error)?;
            }
            prices.flush()?;
            let mut summary = art.create("summary.csv")?;
            writeln!(summary, "s0,runs,mean,std,mean_std_error")?;
            let mut reports = Vec::new();
            for e in experiments {
                let mine: Vec<_> = all.iter().filter(|x| x.0 == e.s0).collect();
                let p: Vec<f64> = mine.iter().map(|x| x.3.evaluation.price).collect();
                let se: Vec<f64> = mine.iter().map(|x| x.3.evaluation.std_error).collect();
                let (mean, std) = mean_std(&p);
                writeln!(summary, "{},{},{mean},{std},{}", e.s0, p.len(), mean_std(&se).0)?;
                println!("maxcall s0={}: mean {mean:.4} (sd {std:.4}) over {} runs", e.s0, p.len());
                reports.extend(
                    mine.iter()
                        .map(|x| json!({"s0": x.0, "run": x.1, "report": PriceReport::new(&x.3.evaluation, x.2, &x.3.spec)})),
                );
            }
            summary.flush()?;
            let mut loss = art.create("loss.csv")?;
            writeln!(loss, "s0,run,iteration,loss")?;
            for (s0, r, _, o) in &all {
                write_losses(&mut loss, &format!("{s0},"), *r, &o.train)?;
            }
            loss.flush()?;
            let simplex: Vec<Vec<f64>> = (0..=20)
                .map(|k| vec![1.0, k as f64 / 20.0])
                .chain((0..20).map(|k| vec![k as f64 / 20.0, 1.0]))
                .collect();
            for e in experiments {
                if let Some((_, _, _, o)) = all.iter().find(|x| x.0 == e.s0 && x.1 == 0) {
                    if o.config.d == 2 {
                        let times = &o.spec.mesh.times()[..o.spec.mesh.steps()];
                        let mut w = art.create(&format!("boundary_s0_{}.csv", e.s0))?;
                        write_boundary_csv(&o.boundary, times, &simplex, &mut w)?;
                        w.flush()?;
                    }
                }
            }
            art.json("report.json", &reports)?;
        }
        Plan::Hedge { experiments } => {
            let mut outcomes = Vec::new();
            for e in experiments {
                let o = art.time(format!("hedge K={}", e.strike), || Ok(run_hedge_price(e, seed)?))?;
                art.seeds.extend(o.runs.iter().map(|r| r.seed));
                outcomes.push(o);
            }
            let mut prices = art.create("prices.csv")?;
            writeln!(prices, "strike,run,seed,learned_price")?;
            for o in &outcomes {
                for (r, run) in o.runs.iter().enumerate() {
                    writeln!(prices, "{},{r},{},{}", o.spec.strike, run.seed, run.learned_price)?;
                }
            }
            prices.flush()?;
            let mut summary = art.create("summary.csv")?;
            writeln!(summary, "strike,oracle,runs,mean,std,abs_error")?;
            for o in &outcomes {
                writeln!(
                    summary,
                    "{},{},{},{},{},{}",
                    o.spec.strike,
                    o.oracle,
                    o.runs.len(),
                    o.mean_price,
                    o.std_price,
                    o.mean_error().abs()
                )?;
                println!("hedge K={}: learned {:.5} vs oracle {:.6}", o.spec.strike, o.mean_price, o.oracle);
            }
            summary.flush()?;
            let mut loss = art.create("loss.csv")?;
            writeln!(loss, "strike,run,iteration,loss")?;
            for o in &outcomes {
                for (r, run) in o.runs.iter().enumerate() {
                    write_losses(&mut loss, &format!("{},", o.spec.strike), r, &run.train)?;
                }
            }
            loss.flush()?;
            for o in &outcomes {
                // the same policy and paths traced from the learned price and from half of it
                let run = &o.runs[0];
                let batch = simulate_heston(&o.spec.market, &o.spec.mesh, 64, &mut substream(seed, "trace", 0))?;
                for (label, x) in [("full", run.learned_price), ("half", 0.5 * run.learned_price)] {
                    let mut w = art.create(&format!("trace_K{}_{label}.csv", o.spec.strike))?;
                    write_hedge_trace(&run.policy, x, &batch, &o.spec, 16, &mut w)?;
                    w.flush()?;
                }
            }
        }
        Plan::Merton(e) => {
            let outcome = art.time("merton".into(), || Ok(run_merton(e, seed)?))?;
            let mut table = art.create("table.csv")?;
            write_overlearning_csv(&outcome.rows, &mut table)?;
            table.flush()?;
            let mut runs = art.create("runs.csv")?;
            writeln!(runs, "d,repeat,p_in,p_out,ce_in,ce_out,ce_star,epochs")?;
            for row in &outcome.rows {
                for (k, r) in row.reports.iter().enumerate() {
                    writeln!(
                        runs,
                        "{},{k},{},{},{},{},{},{}",
                        row.d, r.p_in, r.p_out, r.ce_in, r.ce_out, r.ce_star, r.epochs
                    )?;
                }
                println!(
                    "merton d={}: p_in {:.2}% (sd {:.2}), gap {:.2}% (sd {:.2})",
                    row.d, row.p_in_mean, row.p_in_std, row.gap_mean, row.gap_std
                );
            }
            runs.flush()?;
            if let Some(c) = &outcome.continual {
                println!("merton continual: ce {:.5} vs ce* {:.5}", c.ce_out, c.ce_star);
            }
            art.json("report.json", &outcome)?;
        }
        Plan::Oracle(o) => {
            let result = art.time("oracle".into(), || oracle(o, seed))?;
            println!("{}", serde_json::to_string(&result)?);
            art.json("result.json", &result)?;
        }
    }
    let manifest = RunManifest {
        experiment: config.experiment.name().into(),
        config_hash: config.hash(paper_scale),
        code_version: env!("CARGO_PKG_VERSION").into(),
        seed,
        paper_scale,
        seeds: art.seeds.clone(),
        outputs: art.files.clone(),
        timings: art.timings.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(out.join(MANIFEST), text + "\n")?;
    Ok(manifest)
}

fn oracle(o: &OracleConfig, seed: u64) -> Result<serde_json::Value, CliError> {
    Ok(match o {
        OracleConfig::Heston { strike, maturity, market } => {
            let q = heston_call(market, *strike, *maturity)?;
            json!({ "kind": "heston", "strike": strike, "maturity": maturity, "price": q.price })
        }
        OracleConfig::AmericanPut {
            s0,
            strike,
            maturity,
            rate,
            dividend,
            sigma,
            exercise_dates,
            controls,
        } => {
            let mut c = controls.clone().unwrap_or_default();
            if let Some(n) = exercise_dates {
                c.exercise = Exercise::Bermudan {
                    times: TimeMesh::uniform(*maturity, *n)?.times()[1..].to_vec(),
                };
            }
            let grid = fd_american_put(*s0, *strike, *maturity, *rate, *dividend, *sigma, &c)?;
            json!({ "kind": "american_put", "price": grid.price })
        }
        OracleConfig::BlackScholes {
            call,
            s0,
            strike,
            maturity,
            rate,
            dividend,
            sigma,
        } => {
            let kind = if *call { OptionKind::Call } else { OptionKind::Put };
            json!({ "kind": "black_scholes", "price": black_scholes(kind, *s0, *strike, *maturity, *rate, *dividend, *sigma) })
        }
        OracleConfig::Lsm {
            d,
            s0,
            strike,
            maturity,
            steps,
            rate,
            dividend,
            sigma,
            paths,
            degree,
        } => {
            let market = GbmParams::independent(*d, *s0, *rate, *dividend, *sigma);
            let mesh = TimeMesh::uniform(*maturity, *steps)?;
            let cfg = LsmConfig {
                paths: *paths,
                degree: *degree,
                seed,
            };
            let r = lsm_price(&Payoff::MaxCall { strike: *strike }, &market, &mesh, &cfg)?;
            json!({ "kind": "lsm", "price": r.price, "std_error": r.std_error })
        }
    })
}
