//! Experiment configuration files and their resolution into runnable plans.
//!
//! A config is one JSON document:
//!
//! ```json
//! {
//!   "experiment": "maxcall",
//!   "seed": 1,
//!   "output_dir": "runs/maxcall",
//!   "model": { "d": 2, "s0": [90, 100, 110], "strike": 100, ... },
//!   "train": { "batch_size": 1024, "iterations": 3000, "learning_rate": 0.01 },
//!   "evaluation": { "n_eval_paths": 1048576, "n_repeats": 10 }
//! }
//! ```
//!
//! The `model` block holds the experiment's parameters. Scalar fields that
//! naturally form a sweep (`s0` for the max-call, `strike` for hedging) also
//! accept a list.

use std::path::PathBuf;

use derm_core::experiments::{HedgeExperiment, MaxCallExperiment, MertonExperiment, PutExperiment};
use derm_core::markets::{GbmParams, HestonParams, TimeMesh};
use derm_core::merton::{MertonSpec, MertonTraining, Regime};
use derm_core::oracles::FdControls;
use derm_core::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    PutBoundary,
    Maxcall,
    HestonHedge,
    Merton,
    Oracle,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::PutBoundary => "put-boundary",
            Experiment::Maxcall => "maxcall",
            Experiment::HestonHedge => "heston-hedge",
            Experiment::Merton => "merton",
            Experiment::Oracle => "oracle",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationBlock {
    pub n_eval_paths: Option<usize>,
    pub n_repeats: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub model: Map<String, Value>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub evaluation: Option<EvaluationBlock>,
}

/// Reference prices computed without any training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleConfig {
    /// Semi-analytic European call under Heston; the market defaults to the
    /// hedging-table parameters.
    Heston {
        strike: f64,
        maturity: f64,
        #[serde(default = "HestonParams::hedging_table")]
        market: HestonParams,
    },
    /// Finite-difference put, American or restricted to `exercise_dates`
    /// equally spaced dates.
    AmericanPut {
        s0: f64,
        strike: f64,
        maturity: f64,
        rate: f64,
        #[serde(default)]
        dividend: f64,
        sigma: f64,
        #[serde(default)]
        exercise_dates: Option<usize>,
        #[serde(default)]
        controls: Option<FdControls>,
    },
    BlackScholes {
        call: bool,
        s0: f64,
        strike: f64,
        maturity: f64,
        rate: f64,
        #[serde(default)]
        dividend: f64,
        sigma: f64,
    },
    /// Regression Monte Carlo for the Bermudan max-call.
    Lsm {
        d: usize,
        s0: f64,
        strike: f64,
        maturity: f64,
        steps: usize,
        rate: f64,
        dividend: f64,
        sigma: f64,
        paths: usize,
        degree: usize,
    },
}

/// Fully resolved work for one invocation.
#[derive(Clone, Debug)]
pub enum Plan {
    Put { experiment: PutExperiment, repeats: usize },
    MaxCall { experiments: Vec<MaxCallExperiment>, repeats: usize },
    Hedge { experiments: Vec<HedgeExperiment> },
    Merton(MertonExperiment),
    Oracle(OracleConfig),
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| config_err(format!("config: {e}")))
    }

    /// SHA-256 of the canonical JSON of the effective configuration.
    pub fn hash(&self, paper_scale: bool) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v["output_dir"] = Value::Null;
        v["paper_scale"] = Value::Bool(paper_scale);
        let digest = Sha256::digest(serde_json::to_vec(&v).expect("value serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn train_block(&self) -> Result<TrainConfig, CliError> {
        let train = self
            .train
            .clone()
            .ok_or_else(|| config_err(format!("{} needs a `train` block", self.experiment.name())))?;
        let mut train = train;
        train.seed = self.seed;
        train.validate().map_err(|e| config_err(format!("train: {e}")))?;
        Ok(train)
    }

    fn eval_paths(&self) -> Result<usize, CliError> {
        self.evaluation
            .as_ref()
            .and_then(|e| e.n_eval_paths)
            .ok_or_else(|| config_err("evaluation: missing field `n_eval_paths`"))
    }

    fn repeats(&self) -> Result<usize, CliError> {
        let n = self
            .evaluation
            .as_ref()
            .and_then(|e| e.n_repeats)
            .ok_or_else(|| config_err("evaluation: missing field `n_repeats`"))?;
        if n == 0 {
            return Err(config_err("evaluation: `n_repeats` must be at least 1"));
        }
        Ok(n)
    }

    fn reject_train(&self) -> Result<(), CliError> {
        if self.train.is_some() {
            return Err(config_err(format!("{} takes no `train` block", self.experiment.name())));
        }
        Ok(())
    }

    /// Validates every block needed by the experiment and builds the plan.
    pub fn plan(&self, paper_scale: bool) -> Result<Plan, CliError> {
        let model = Value::Object(self.model.clone());
        match self.experiment {
            Experiment::PutBoundary => {
                let mut obj = self.model.clone();
                obj.insert("train".into(), to_value(&self.train_block()?));
                obj.insert("n_eval_paths".into(), self.eval_paths()?.into());
                let experiment: PutExperiment = from_model(Value::Object(obj))?;
                experiment.spec().map_err(|e| config_err(format!("model: {e}")))?;
                experiment.market().validate().map_err(|e| config_err(format!("model: {e}")))?;
                Ok(Plan::Put {
                    experiment,
                    repeats: self.repeats()?,
                })
            }
            Experiment::Maxcall => {
                let train = self.train_block()?;
                let paths = self.eval_paths()?;
                let experiments = expand(&self.model, "s0")?
                    .into_iter()
                    .map(|mut obj| {
                        obj.insert("train".into(), to_value(&train));
                        obj.insert("n_eval_paths".into(), paths.into());
                        let mut e: MaxCallExperiment = from_model(Value::Object(obj))?;
                        if paper_scale {
                            e = e.paper_scale();
                        }
                        e.spec().map_err(|e| config_err(format!("model: {e}")))?;
                        e.market().validate().map_err(|e| config_err(format!("model: {e}")))?;
                        Ok(e)
                    })
                    .collect::<Result<Vec<_>, CliError>>()?;
                Ok(Plan::MaxCall {
                    experiments,
                    repeats: self.repeats()?,
                })
            }
            Experiment::HestonHedge => {
                let train = self.train_block()?;
                // the published table averages 100 runs per strike
                let repeats = if paper_scale { 100 } else { self.repeats()? };
                let experiments = expand(&self.model, "strike")?
                    .into_iter()
                    .map(|mut obj| {
                        obj.insert("train".into(), to_value(&train));
                        obj.insert("repeats".into(), repeats.into());
                        let e: HedgeExperiment = from_model(Value::Object(obj))?;
                        e.spec().map_err(|e| config_err(format!("model: {e}")))?;
                        Ok(e)
                    })
                    .collect::<Result<Vec<_>, CliError>>()?;
                Ok(Plan::Hedge { experiments })
            }
            Experiment::Merton => {
                self.reject_train()?;
                let mut obj = self.model.clone();
                obj.insert("repeats".into(), self.repeats()?.into());
                let e: MertonExperiment = from_model(Value::Object(obj))?;
                validate_merton(&e)?;
                Ok(Plan::Merton(e))
            }
            Experiment::Oracle => {
                self.reject_train()?;
                let o: OracleConfig = from_model(model)?;
                validate_oracle(&o)?;
                Ok(Plan::Oracle(o))
            }
        }
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("value serializes")
}

fn from_model<T: DeserializeOwned>(v: Value) -> Result<T, CliError> {
    serde_json::from_value(v).map_err(|e| config_err(format!("model: {e}")))
}

/// One model object per entry when `key` holds a list.
fn expand(model: &Map<String, Value>, key: &str) -> Result<Vec<Map<String, Value>>, CliError> {
    match model.get(key) {
        Some(Value::Array(items)) => {
            if items.is_empty() {
                return Err(config_err(format!("model: `{key}` list is empty")));
            }
            Ok(items
                .iter()
                .map(|v| {
                    let mut obj = model.clone();
                    obj.insert(key.into(), v.clone());
                    obj
                })
                .collect())
        }
        _ => Ok(vec![model.clone()]),
    }
}

fn validate_merton(e: &MertonExperiment) -> Result<(), CliError> {
    if e.dims.is_empty() {
        return Err(config_err("model: `dims` must not be empty"));
    }
    let training: &MertonTraining = &e.training;
    if training.batch_size == 0 || !(training.learning_rate > 0.0) || training.n_out < 2 {
        return Err(config_err("model.training: batch_size, learning_rate and n_out must be positive"));
    }
    if !(training.validation_fraction > 0.0 && training.validation_fraction < 1.0) {
        return Err(config_err("model.training: `validation_fraction` must lie in (0, 1)"));
    }
    for &d in e.dims.iter().chain(e.continual_dim.iter()) {
        MertonSpec::default_for(d, e.n_data, Regime::FixedDataset)
            .validate()
            .map_err(|err| config_err(format!("model: dimension {d}: {err}")))?;
    }
    Ok(())
}

fn validate_oracle(o: &OracleConfig) -> Result<(), CliError> {
    let positive = |name: &str, v: f64| {
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(config_err(format!("model: `{name}` must be positive, got {v}")))
        }
    };
    match o {
        OracleConfig::Heston { strike, maturity, market } => {
            positive("strike", *strike)?;
            positive("maturity", *maturity)?;
            market.validate().map_err(|e| config_err(format!("model.market: {e}")))
        }
        OracleConfig::AmericanPut {
            s0,
            strike,
            maturity,
            sigma,
            exercise_dates,
            ..
        } => {
            positive("s0", *s0)?;
            positive("strike", *strike)?;
            positive("maturity", *maturity)?;
            if !(*sigma >= 0.0) {
                return Err(config_err("model: `sigma` must be non-negative"));
            }
            if *exercise_dates == Some(0) {
                return Err(config_err("model: `exercise_dates` must be at least 1"));
            }
            Ok(())
        }
        OracleConfig::BlackScholes {
            s0, strike, maturity, sigma, ..
        } => {
            positive("s0", *s0)?;
            positive("strike", *strike)?;
            if !(*maturity >= 0.0 && *sigma >= 0.0) {
                return Err(config_err("model: `maturity` and `sigma` must be non-negative"));
            }
            Ok(())
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
            ..
        } => {
            positive("strike", *strike)?;
            TimeMesh::uniform(*maturity, *steps).map_err(|e| config_err(format!("model: {e}")))?;
            GbmParams::independent(*d, *s0, *rate, *dividend, *sigma)
                .validate()
                .map_err(|e| config_err(format!("model: {e}")))?;
            if *paths < 2 {
                return Err(config_err("model: `paths` must be at least 2"));
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maxcall_json(s0: &str) -> String {
        format!(
            r#"{{"experiment": "maxcall", "seed": 3,
                "model": {{"d": 2, "s0": {s0}, "strike": 100, "maturity": 3, "steps": 9, "rate": 0.05,
                          "dividend": 0.1, "sigma": 0.2, "epsilon": 5, "tilt": -0.014, "hidden": [8],
                          "activation": "relu", "scale": 100, "init_level": 120}},
                "train": {{"batch_size": 64, "iterations": 5}},
                "evaluation": {{"n_eval_paths": 1000, "n_repeats": 2}}}}"#
        )
    }

    #[test]
    fn sweep_expands_and_paper_scale_applies() {
        let cfg = ExperimentConfig::parse(&maxcall_json("[90, 100, 110]")).unwrap();
        match cfg.plan(true).unwrap() {
            Plan::MaxCall { experiments, repeats } => {
                assert_eq!(repeats, 2);
                assert_eq!(experiments.iter().map(|e| e.s0).collect::<Vec<_>>(), vec![90.0, 100.0, 110.0]);
                assert!(experiments.iter().all(|e| e.train.batch_size == 1 << 13 && e.train.seed == 3));
            }
            other => panic!("unexpected plan {other:?}"),
        }
    }

    #[test]
    fn missing_and_unknown_fields_are_named() {
        let cfg = ExperimentConfig::parse(&maxcall_json("90").replace(r#""strike": 100, "#, "")).unwrap();
        let err = cfg.plan(false).unwrap_err().to_string();
        assert!(err.contains("strike"), "{err}");
        let err = ExperimentConfig::parse(&maxcall_json("90").replace(r#""seed": 3"#, r#""sed": 3"#))
            .unwrap_err()
            .to_string();
        assert!(err.contains("sed"), "{err}");
    }

    #[test]
    fn hash_ignores_output_dir_but_not_seed() {
        let a = ExperimentConfig::parse(&maxcall_json("90")).unwrap();
        let mut b = a.clone();
        b.output_dir = Some("elsewhere".into());
        assert_eq!(a.hash(false), b.hash(false));
        b.seed = 4;
        assert_ne!(a.hash(false), b.hash(false));
        assert_ne!(a.hash(false), a.hash(true));
    }
}
