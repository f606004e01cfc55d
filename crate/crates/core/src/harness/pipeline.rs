//! Train, calibrate and evaluate.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Mode};
use super::data::{generate_datasets, streams, Datasets};
use super::report::{cv_to_f64, CoverageReport, PrefixOutcome};
use crate::conformal::{score, CalibrationRecord, MaxDrRegion, Suffix, WeightedCalibrationSet};
use crate::density_ratio::{density_ratio, log_density_ratio, EgoActionSequence};
use crate::env::{Mpe, Trajectory};
use crate::error::{Error, Result};
use crate::policy::{Policy, PolicySpec};
use crate::predictor::PredictorModel;
use crate::rng::{stream, stream_id};
use crate::synthetic::{
    estimate_max_dr, ContinuationSampler, EgoDynamicsModel, EgoPolicies, NonEgoDynamicsModel,
    SearchContext, SyntheticProcess, TrueTargetProcess,
};

/// Everything learned from the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub predictor: PredictorModel,
    pub non_ego: NonEgoDynamicsModel,
    pub ego: Option<EgoDynamicsModel>,
}

pub const PREDICTOR_FILE: &str = "predictor.json";
pub const DYNAMICS_FILE: &str = "dynamics.json";

#[derive(Serialize, Deserialize)]
struct DynamicsFile {
    non_ego: NonEgoDynamicsModel,
    ego: Option<EgoDynamicsModel>,
}

impl Trained {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.predictor.save(&dir.join(PREDICTOR_FILE))?;
        let path = dir.join(DYNAMICS_FILE);
        let file = DynamicsFile {
            non_ego: self.non_ego.clone(),
            ego: self.ego.clone(),
        };
        let text = serde_json::to_string(&file).map_err(|e| Error::parse(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let predictor = PredictorModel::load(&dir.join(PREDICTOR_FILE))?;
        let path = dir.join(DYNAMICS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: DynamicsFile = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e))?;
        Ok(Trained {
            predictor,
            non_ego: file.non_ego,
            ego: file.ego,
        })
    }
}

/// Fits the predictor and the dynamics models on the training split.
pub fn train(cfg: &ExperimentConfig, data: &Datasets) -> Result<Trained> {
    let predictor = PredictorModel::train(&data.train, cfg.h, cfg.t, cfg.ridge_lambda)?;
    let non_ego = NonEgoDynamicsModel::fit(&data.train, &cfg.ego_agents, cfg.ridge_lambda)?;
    let ego = if cfg.learned_ego_dynamics {
        Some(EgoDynamicsModel::fit(
            &data.train,
            &cfg.ego_agents,
            cfg.ridge_lambda,
        )?)
    } else {
        None
    };
    Ok(Trained {
        predictor,
        non_ego,
        ego,
    })
}

/// Per-agent policy specs for one point of the bias grid.
struct PolicySet {
    behavioural: Vec<PolicySpec>,
    target: Vec<PolicySpec>,
}

impl PolicySet {
    fn new(cfg: &ExperimentConfig, eps_bias: f64) -> Self {
        PolicySet {
            behavioural: cfg.behavioural_policies(),
            target: cfg.target_policies(eps_bias),
        }
    }

    fn ego<'a>(specs: &'a [PolicySpec], ego_agents: &[usize]) -> Vec<&'a dyn Policy> {
        ego_agents
            .iter()
            .map(|&a| &specs[a] as &dyn Policy)
            .collect()
    }

    fn all(specs: &[PolicySpec]) -> Vec<&dyn Policy> {
        specs.iter().map(|s| s as &dyn Policy).collect()
    }
}

fn check_len(traj: &Trajectory, len: usize, what: &str) -> Result<()> {
    if traj.len() != len || traj.ego_actions.len() + 1 != len {
        return Err(Error::contract(format!(
            "{what} has {} states, expected {len}",
            traj.len()
        )));
    }
    Ok(())
}

/// Exact DR of the suffix actions of a full-length trajectory.
pub fn trajectory_density_ratio(
    cfg: &ExperimentConfig,
    traj: &Trajectory,
    eps_bias: f64,
) -> Result<f64> {
    check_len(traj, cfg.t, "trajectory")?;
    let set = PolicySet::new(cfg, eps_bias);
    let beh = PolicySet::ego(&set.behavioural, &cfg.ego_agents);
    let tgt = PolicySet::ego(&set.target, &cfg.ego_agents);
    let actions = EgoActionSequence::from_records(&traj.ego_actions[cfg.h - 1..])?;
    let log_w = log_density_ratio(
        &traj.states[cfg.h - 1..cfg.t - 1],
        &actions,
        &cfg.ego_agents,
        &beh,
        &tgt,
    )?;
    Ok(density_ratio(log_w, cfg.w_max))
}

/// Scores the calibration split and weights it for `mode`.
pub fn calibrate(
    cfg: &ExperimentConfig,
    mode: Mode,
    data: &Datasets,
    predictor: &PredictorModel,
) -> Result<WeightedCalibrationSet> {
    let trajectories = match mode {
        Mode::TargetToTarget => &data.calib_target,
        _ => &data.calib_behavioural,
    };
    let gammas = cfg.gammas.gammas(cfg.suffix_len());
    let sigma = predictor.sigma_for(cfg.score_dims);
    let records = trajectories
        .par_iter()
        .map(|traj| {
            check_len(traj, cfg.t, "calibration trajectory")?;
            let center = predictor.predict_suffix(&traj.states[..cfg.h], cfg.score_dims)?;
            let actual = Suffix::from_states(&traj.states[cfg.h..], cfg.score_dims);
            let s = score(&center, &actual, &gammas, &sigma)?;
            let weight = if mode.is_weighted() {
                trajectory_density_ratio(cfg, traj, data.eps_bias)?
            } else {
                1.0
            };
            Ok(CalibrationRecord {
                score: s.value(),
                weight,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    WeightedCalibrationSet::new(records)
}

/// Builds the region for every test prefix and measures coverage over the
/// target-process continuations.
pub fn evaluate(
    cfg: &ExperimentConfig,
    mode: Mode,
    data: &Datasets,
    trained: &Trained,
    calib: &WeightedCalibrationSet,
) -> Result<(CoverageReport, Vec<PrefixOutcome>)> {
    if data.test_prefixes.len() != data.test_target.len() {
        return Err(Error::contract("test prefixes and continuations disagree"));
    }
    let env = Mpe::new(cfg.env.clone())?;
    let set = PolicySet::new(cfg, data.eps_bias);
    let ego_beh = PolicySet::ego(&set.behavioural, &cfg.ego_agents);
    let ego_tgt = PolicySet::ego(&set.target, &cfg.ego_agents);
    let all_tgt = PolicySet::all(&set.target);
    let policies = EgoPolicies {
        ego_agents: &cfg.ego_agents,
        behavioural: &ego_beh,
        target: &ego_tgt,
    };
    let steps = cfg.suffix_len();
    let synthetic = SyntheticProcess {
        env: &env,
        non_ego: &trained.non_ego,
        ego_model: trained.ego.as_ref(),
        policies,
        steps,
    };
    let truth = TrueTargetProcess {
        env: &env,
        agent_policies: &all_tgt,
        policies,
        steps,
    };
    let (sampler, purpose): (Option<&dyn ContinuationSampler>, u16) = match mode {
        Mode::MaCoppSynthetic => (Some(&synthetic), streams::SEARCH_SYNTHETIC),
        Mode::MaCoppTrue => (Some(&truth), streams::SEARCH_TRUE),
        _ => (None, 0),
    };
    let gammas = cfg.gammas.gammas(steps);
    let sigma = trained.predictor.sigma_for(cfg.score_dims);
    let first_test = cfg.n_train + cfg.n_calib;

    let outcomes = data
        .test_prefixes
        .par_iter()
        .zip(&data.test_target)
        .enumerate()
        .map(|(i, (prefix, continuations))| {
            check_len(prefix, cfg.h, "test prefix")?;
            let center = trained
                .predictor
                .predict_suffix(&prefix.states, cfg.score_dims)?;
            let (region, w_tilde, n_passing, violations) = match sampler {
                None => {
                    let region = MaxDrRegion::standard(
                        center,
                        calib,
                        gammas.clone(),
                        sigma.clone(),
                        cfg.alpha,
                    )?;
                    (region, 1.0, None, 0)
                }
                Some(sampler) => {
                    let ctx = SearchContext {
                        calib,
                        center: &center,
                        gammas: &gammas,
                        sigma: &sigma,
                        dims: cfg.score_dims,
                        alpha: cfg.alpha,
                        w_max: cfg.w_max,
                    };
                    let mut rng = stream(cfg.seed, stream_id(purpose, (first_test + i) as u32, 0));
                    let est = estimate_max_dr(
                        &prefix.states,
                        sampler,
                        cfg.search_samples,
                        &ctx,
                        &mut rng,
                    )?;
                    let region = MaxDrRegion::build(
                        center.clone(),
                        calib,
                        est.w_tilde,
                        gammas.clone(),
                        sigma.clone(),
                        cfg.alpha,
                    )?;
                    let v = est.containment_violations(&region);
                    (region, est.w_tilde, Some(est.n_passing), v)
                }
            };
            let mut covered = 0;
            for c in continuations {
                check_len(c, cfg.t, "test continuation")?;
                if region.contains(&Suffix::from_states(&c.states[cfg.h..], cfg.score_dims))? {
                    covered += 1;
                }
            }
            Ok(PrefixOutcome {
                prefix: first_test + i,
                critical_value: cv_to_f64(region.critical_value()),
                w_tilde,
                n_passing,
                covered,
                n_continuations: continuations.len(),
                containment_violations: violations,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = CoverageReport::from_outcomes(mode, data.eps_bias, &outcomes);
    Ok((report, outcomes))
}

/// Reports and per-prefix outcomes of one (mode, eps_bias) cell.
#[derive(Debug, Clone)]
pub struct ModeRun {
    pub report: CoverageReport,
    pub outcomes: Vec<PrefixOutcome>,
    pub calibration: WeightedCalibrationSet,
}

/// Runs every configured mode at one bias value with an already trained model.
pub fn run_point(
    cfg: &ExperimentConfig,
    data: &Datasets,
    trained: &Trained,
) -> Result<Vec<ModeRun>> {
    cfg.modes
        .iter()
        .map(|&mode| {
            let calibration = calibrate(cfg, mode, data, &trained.predictor)?;
            let (report, outcomes) = evaluate(cfg, mode, data, trained, &calibration)?;
            log::info!(
                "{mode} eps_bias={}: coverage {:.4}, unbounded {:.3}",
                data.eps_bias,
                report.marginal_coverage,
                report.proportion_unbounded
            );
            Ok(ModeRun {
                report,
                outcomes,
                calibration,
            })
        })
        .collect()
}

/// Output of a sweep over the bias grid.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub trained: Trained,
    /// One entry per grid value, in grid order.
    pub points: Vec<(f64, Vec<ModeRun>)>,
}

impl SweepResult {
    pub fn reports(&self) -> Vec<CoverageReport> {
        self.points
            .iter()
            .flat_map(|(_, runs)| runs.iter().map(|r| r.report.clone()))
            .collect()
    }

    pub fn run(&self, mode: Mode, eps_bias: f64) -> Option<&ModeRun> {
        self.points
            .iter()
            .find(|(b, _)| *b == eps_bias)
            .and_then(|(_, runs)| runs.iter().find(|r| r.report.mode == mode))
    }
}

/// Trains once, then generates data and evaluates every mode for each value
/// in `grid`. The training split does not depend on the bias.
pub fn sweep(cfg: &ExperimentConfig, grid: &[f64]) -> Result<SweepResult> {
    cfg.validate()?;
    if grid.is_empty() {
        return Err(Error::config("eps_bias grid is empty"));
    }
    let mut trained = None;
    let mut points = Vec::with_capacity(grid.len());
    for &eps_bias in grid {
        let data = generate_datasets(cfg, eps_bias)?;
        let model = match &trained {
            Some(m) => m,
            None => trained.insert(train(cfg, &data)?),
        };
        points.push((eps_bias, run_point(cfg, &data, model)?));
    }
    Ok(SweepResult {
        trained: trained.expect("grid is non-empty"),
        points,
    })
}
