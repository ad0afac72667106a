//! Ready-made experiment runners with desk-scale defaults.
//!
//! Each experiment is a serializable configuration plus a `run` function that
//! returns everything needed for reports. The command-line tool and the
//! acceptance tests both go through these, so a number printed by one can be
//! reproduced by the other from the same configuration and seed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DermError, Result};
use crate::hedging::{train_price_and_hedge, HedgePolicy, HedgingSpec, WealthMode};
use crate::markets::{simulate_gbm, GbmParams, TimeMesh};
use crate::merton::{run_overlearning_experiment, train_merton, MertonSpec, MertonTraining, OverlearningSummary, Regime, UtilityReport};
use crate::nn::Activation;
use crate::oracles::{fd_american_put, heston_call, Exercise, FdControls};
use crate::payoff::Payoff;
use crate::rng::{child_seed, substream};
use crate::stopping::{evaluate_boundary, train_boundary, BoundaryNet, Encoding, StoppingSpec};
use crate::train::{Evaluation, TrainConfig, TrainReport};

fn with_seed(mut cfg: TrainConfig, seed: u64) -> TrainConfig {
    cfg.seed = seed;
    cfg
}

/// One-dimensional American put on a mesh refined toward maturity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PutExperiment {
    pub s0: f64,
    pub strike: f64,
    pub maturity: f64,
    pub rate: f64,
    pub sigma: f64,
    pub steps: usize,
    /// Ratio of the first to the last mesh interval.
    pub refinement: f64,
    pub epsilon: f64,
    pub tilt: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub init_level: f64,
    pub train: TrainConfig,
    pub n_eval_paths: usize,
    pub fd_time_steps: usize,
}

impl Default for PutExperiment {
    fn default() -> Self {
        Self {
            s0: 40.0,
            strike: 40.0,
            maturity: 1.0,
            rate: 0.06,
            sigma: 0.4,
            steps: 50,
            refinement: 20.0,
            epsilon: 1.0,
            tilt: 0.0,
            hidden: vec![32, 32],
            activation: Activation::Tanh,
            init_level: 32.0,
            train: TrainConfig::new(1 << 10, 2000, 0),
            n_eval_paths: 1 << 20,
            fd_time_steps: 2000,
        }
    }
}

impl PutExperiment {
    pub fn mesh(&self) -> Result<TimeMesh> {
        TimeMesh::refined_toward_maturity(self.maturity, self.steps, self.refinement)
    }

    pub fn market(&self) -> GbmParams {
        GbmParams::independent(1, self.s0, self.rate, 0.0, self.sigma)
    }

    pub fn spec(&self) -> Result<StoppingSpec> {
        let spec = StoppingSpec::new(Payoff::Put { strike: self.strike }, self.rate, self.mesh()?, self.epsilon);
        spec.validate()?;
        Ok(spec)
    }

    /// Finite-difference put restricted to the exercise dates of the mesh.
    pub fn fd_bermudan(&self) -> Result<crate::oracles::FdGrid> {
        let mesh = self.mesh()?;
        let controls = FdControls {
            time_steps: self.fd_time_steps,
            exercise: Exercise::Bermudan {
                times: mesh.times()[1..].to_vec(),
            },
            ..FdControls::default()
        };
        fd_american_put(self.s0, self.strike, self.maturity, self.rate, 0.0, self.sigma, &controls)
    }
}

#[derive(Clone, Debug)]
pub struct PutOutcome {
    pub spec: StoppingSpec,
    pub boundary: BoundaryNet,
    pub train: TrainReport,
    pub evaluation: Evaluation,
    pub fd_price: f64,
    /// `price / fd_price - 1`.
    pub relative_error: f64,
}

pub fn run_put(cfg: &PutExperiment, seed: u64) -> Result<PutOutcome> {
    let spec = cfg.spec()?;
    let market = cfg.market();
    let mut boundary = BoundaryNet::new(
        Encoding::TimeOnly,
        1,
        &cfg.hidden,
        cfg.activation,
        cfg.strike,
        cfg.init_level,
        cfg.maturity,
        &mut substream(seed, "init", 0),
    )?;
    let train = train_boundary(&spec, &mut boundary, &market, &with_seed(cfg.train.clone(), seed), cfg.tilt)?;
    let evaluation = evaluate_boundary(&boundary, &spec, &market, cfg.n_eval_paths, child_seed(seed, "eval", 0))?;
    let fd_price = cfg.fd_bermudan()?.price;
    Ok(PutOutcome {
        relative_error: evaluation.price / fd_price - 1.0,
        spec,
        boundary,
        train,
        evaluation,
        fd_price,
    })
}

/// Bermudan max-call on `d` symmetric assets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaxCallExperiment {
    pub d: usize,
    pub s0: f64,
    pub strike: f64,
    pub maturity: f64,
    pub steps: usize,
    pub rate: f64,
    pub dividend: f64,
    pub sigma: f64,
    pub epsilon: f64,
    /// Geometric decay of the band half-width to this fraction of `epsilon`.
    #[serde(default)]
    pub epsilon_final_fraction: Option<f64>,
    /// Drift tilt per year applied to training paths.
    pub tilt: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub scale: f64,
    pub init_level: f64,
    pub train: TrainConfig,
    pub n_eval_paths: usize,
}

impl Default for MaxCallExperiment {
    fn default() -> Self {
        Self {
            d: 2,
            s0: 90.0,
            strike: 100.0,
            maturity: 3.0,
            steps: 9,
            rate: 0.05,
            dividend: 0.1,
            sigma: 0.2,
            epsilon: 5.0,
            epsilon_final_fraction: None,
            tilt: -0.014,
            hidden: vec![32, 32],
            activation: Activation::Relu,
            scale: 100.0,
            init_level: 120.0,
            train: TrainConfig::new(1 << 10, 3000, 0).with_lr(0.01).with_lr_decay(0.05),
            n_eval_paths: 1 << 20,
        }
    }
}

impl MaxCallExperiment {
    /// Batch `2^13`, 7000 iterations and `2^23` evaluation paths.
    pub fn paper_scale(mut self) -> Self {
        self.train.batch_size = 1 << 13;
        self.train.iterations = 7000;
        self.n_eval_paths = 1 << 23;
        self
    }

    pub fn market(&self) -> GbmParams {
        GbmParams::independent(self.d, self.s0, self.rate, self.dividend, self.sigma)
    }

    pub fn spec(&self) -> Result<StoppingSpec> {
        let spec = StoppingSpec::new(
            Payoff::MaxCall { strike: self.strike },
            self.rate,
            TimeMesh::uniform(self.maturity, self.steps)?,
            self.epsilon,
        );
        let spec = StoppingSpec {
            epsilon_final_fraction: self.epsilon_final_fraction,
            ..spec
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug)]
pub struct MaxCallOutcome {
    pub config: MaxCallExperiment,
    pub spec: StoppingSpec,
    pub boundary: BoundaryNet,
    pub train: TrainReport,
    pub evaluation: Evaluation,
}

pub fn run_max_call(cfg: &MaxCallExperiment, seed: u64) -> Result<MaxCallOutcome> {
    let spec = cfg.spec()?;
    let market = cfg.market();
    market.validate()?;
    let mut boundary = BoundaryNet::new(
        Encoding::TimeAndSimplex,
        cfg.d,
        &cfg.hidden,
        cfg.activation,
        cfg.scale,
        cfg.init_level,
        cfg.maturity,
        &mut substream(seed, "init", 0),
    )?;
    let train = train_boundary(&spec, &mut boundary, &market, &with_seed(cfg.train.clone(), seed), cfg.tilt)?;
    let evaluation = evaluate_boundary(&boundary, &spec, &market, cfg.n_eval_paths, child_seed(seed, "eval", 0))?;
    Ok(MaxCallOutcome {
        config: cfg.clone(),
        spec,
        boundary,
        train,
        evaluation,
    })
}

/// Where a two-asset training run actually probes its boundary.
///
/// A state `s` at an interior exercise date falls into the cell indexed by
/// the leading asset and by `min(s) / max(s)` binned into `bins` intervals.
/// A cell counts as visited when at least `min_fraction` of the training
/// paths sit inside the fuzzy band `|gap| <= epsilon` there, since only
/// those states carry gradient signal for the boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitedRegion {
    pub bins: usize,
    /// `visited[t][leader * bins + bin]` for `t` in `1..N`.
    pub visited: Vec<Vec<bool>>,
}

impl VisitedRegion {
    pub fn cell_center(&self, leader: usize, bin: usize) -> Vec<f64> {
        let ratio = (bin as f64 + 0.5) / self.bins as f64;
        let mut x = vec![ratio; 2];
        x[leader] = 1.0;
        x
    }

    pub fn count(&self) -> usize {
        self.visited.iter().flatten().filter(|v| **v).count()
    }

    pub fn intersect(&self, other: &VisitedRegion) -> Result<VisitedRegion> {
        if self.bins != other.bins || self.visited.len() != other.visited.len() {
            return Err(DermError::Dimension("visited regions use different grids".into()));
        }
        let visited = self
            .visited
            .iter()
            .zip(&other.visited)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| *x && *y).collect())
            .collect();
        Ok(VisitedRegion { bins: self.bins, visited })
    }
}

pub fn visited_region(outcome: &MaxCallOutcome, paths: usize, bins: usize, min_fraction: f64, seed: u64) -> Result<VisitedRegion> {
    let cfg = &outcome.config;
    if cfg.d != 2 {
        return Err(DermError::Contract("visited regions are defined for two assets".into()));
    }
    if bins == 0 || paths == 0 {
        return Err(DermError::Contract("need at least one bin and one path".into()));
    }
    let batch = simulate_gbm(&cfg.market(), &outcome.spec.mesh, paths, &mut substream(seed, "visited", 0), cfg.tilt)?;
    let levels = outcome.boundary.levels(&batch)?;
    let nodes = cfg.steps + 1;
    let mut counts = vec![vec![0usize; 2 * bins]; nodes];
    for i in 0..paths {
        for (t, row) in counts.iter_mut().enumerate().take(nodes - 1).skip(1) {
            let s = batch.state(i, t);
            if outcome.spec.gap(levels[i * nodes + t], s).abs() > cfg.epsilon {
                continue;
            }
            let leader = usize::from(s[1] > s[0]);
            let ratio = s[1 - leader] / s[leader];
            let bin = ((ratio * bins as f64) as usize).min(bins - 1);
            row[leader * bins + bin] += 1;
        }
    }
    let threshold = min_fraction * paths as f64;
    Ok(VisitedRegion {
        bins,
        visited: counts[1..nodes - 1]
            .iter()
            .map(|row| row.iter().map(|&c| c > 0 && c as f64 >= threshold).collect())
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryAgreement {
    pub cells: usize,
    /// Largest `|F_a - F_b| / |F_b|` over the common visited cells.
    pub max_relative_deviation: f64,
    /// Time and simplex point of the largest deviation.
    pub worst: Option<(f64, Vec<f64>)>,
}

/// Compares two trained max-call boundaries on the cells both runs visit.
pub fn boundary_agreement(
    a: &MaxCallOutcome,
    b: &MaxCallOutcome,
    paths: usize,
    bins: usize,
    min_fraction: f64,
    seed: u64,
) -> Result<BoundaryAgreement> {
    if a.spec.mesh != b.spec.mesh {
        return Err(DermError::Contract("boundaries live on different meshes".into()));
    }
    let common = visited_region(a, paths, bins, min_fraction, seed)?.intersect(&visited_region(b, paths, bins, min_fraction, seed)?)?;
    let times = a.spec.mesh.times();
    let mut report = BoundaryAgreement {
        cells: 0,
        max_relative_deviation: 0.0,
        worst: None,
    };
    for (k, row) in common.visited.iter().enumerate() {
        let t = times[k + 1];
        for (cell, _) in row.iter().enumerate().filter(|(_, v)| **v) {
            let x = common.cell_center(cell / bins, cell % bins);
            let (fa, fb) = (a.boundary.level(t, &x)?, b.boundary.level(t, &x)?);
            let dev = (fa - fb).abs() / fb.abs();
            report.cells += 1;
            if dev >= report.max_relative_deviation {
                report.max_relative_deviation = dev;
                report.worst = Some((t, x));
            }
        }
    }
    Ok(report)
}

/// Learned quadratic-hedging price under Heston, repeated over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HedgeExperiment {
    pub strike: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub batch_norm: bool,
    pub price_scale: f64,
    pub train: TrainConfig,
    pub repeats: usize,
}

impl Default for HedgeExperiment {
    fn default() -> Self {
        Self {
            strike: 100.0,
            hidden: vec![20, 20],
            activation: Activation::Relu,
            batch_norm: true,
            price_scale: 10.0,
            train: TrainConfig::new(512, 2000, 0).with_lr(0.002).with_lr_decay(0.1),
            repeats: 20,
        }
    }
}

impl HedgeExperiment {
    pub fn spec(&self) -> Result<HedgingSpec> {
        let mut spec = HedgingSpec::table(self.strike, WealthMode::Learnable);
        spec.price_scale = self.price_scale;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug)]
pub struct HedgeRun {
    pub seed: u64,
    pub policy: HedgePolicy,
    pub train: TrainReport,
    pub learned_price: f64,
}

#[derive(Clone, Debug)]
pub struct HedgePriceOutcome {
    pub spec: HedgingSpec,
    pub oracle: f64,
    pub runs: Vec<HedgeRun>,
    pub mean_price: f64,
    pub std_price: f64,
}

impl HedgePriceOutcome {
    pub fn mean_error(&self) -> f64 {
        self.mean_price - self.oracle
    }
}

pub fn run_hedge_price(cfg: &HedgeExperiment, seed: u64) -> Result<HedgePriceOutcome> {
    if cfg.repeats == 0 {
        return Err(DermError::Contract("at least one repeat is needed".into()));
    }
    let spec = cfg.spec()?;
    let oracle = heston_call(&spec.market, cfg.strike, spec.mesh.maturity())?.price;
    let runs: Vec<HedgeRun> = (0..cfg.repeats)
        .into_par_iter()
        .map(|k| {
            let run_seed = child_seed(seed, "repeat", k as u64);
            let mut policy = HedgePolicy::new(&spec, &cfg.hidden, cfg.activation, cfg.batch_norm, &mut substream(run_seed, "init", 0))?;
            let train = train_price_and_hedge(&spec, &mut policy, &with_seed(cfg.train.clone(), run_seed))?;
            let learned_price = train.learned_price.ok_or_else(|| DermError::Contract("price was not learned".into()))?;
            Ok(HedgeRun {
                seed: run_seed,
                policy,
                train,
                learned_price,
            })
        })
        .collect::<Result<_>>()?;
    let n = runs.len() as f64;
    let mean_price = runs.iter().map(|r| r.learned_price).sum::<f64>() / n;
    let var = runs.iter().map(|r| (r.learned_price - mean_price).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(HedgePriceOutcome {
        spec,
        oracle,
        runs,
        mean_price,
        std_price: var.sqrt(),
    })
}

/// Overlearning table across dimensions plus one continual-simulation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MertonExperiment {
    pub dims: Vec<usize>,
    pub repeats: usize,
    pub n_data: usize,
    pub training: MertonTraining,
    /// Dimension of the continual-simulation check; skipped when absent.
    pub continual_dim: Option<usize>,
}

impl Default for MertonExperiment {
    fn default() -> Self {
        Self {
            dims: vec![10, 40],
            repeats: 30,
            n_data: 5000,
            training: MertonTraining {
                n_out: 100_000,
                ..MertonTraining::default()
            },
            continual_dim: Some(10),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MertonOutcome {
    pub rows: Vec<OverlearningSummary>,
    pub continual: Option<UtilityReport>,
}

pub fn run_merton(cfg: &MertonExperiment, seed: u64) -> Result<MertonOutcome> {
    let rows = cfg
        .dims
        .iter()
        .map(|&d| {
            let spec = MertonSpec::default_for(d, cfg.n_data, Regime::FixedDataset);
            run_overlearning_experiment(&spec, &cfg.training, cfg.repeats, child_seed(seed, "dim", d as u64))
        })
        .collect::<Result<_>>()?;
    let continual = cfg
        .continual_dim
        .map(|d| {
            let spec = MertonSpec::default_for(d, cfg.n_data, Regime::Continual);
            train_merton(&spec, &cfg.training, child_seed(seed, "continual", d as u64))
        })
        .transpose()?;
    Ok(MertonOutcome { rows, continual })
}
