//! Synthetic target process and the max-DR search.
//!
//! The target process is unknown except for the ego agents' policies. A
//! synthetic stand-in is assembled from the known ego target policy, the ego
//! transition (simulator or learned), and an end-to-end linear-Gaussian model
//! of the non-ego agents' next states fitted on behavioural transitions.
//!
//! For a test prefix we sample continuations, score each against the
//! prediction and run its own weighted CP test `S_i <= Q(F̂(w_i))`. The
//! largest density ratio among passing candidates is the under-approximation
//! `w̃` of the maximum DR used to build the region.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conformal::{
    weighted_quantile, CriticalValue, MaxDrRegion, Score, ScoreDims, Suffix, WeightedCalibrationSet,
};
use crate::density_ratio::{log_density_ratio, log_ratio_term, EgoActionSequence, LogDensityRatio};
use crate::env::{Action, AgentState, GlobalState, Mpe, Trajectory, AGENT_DIM};
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::ridge;
use crate::rng::StreamRng;

/// Synthetic continuations drawn per test prefix.
pub const DEFAULT_SYNTHETIC_SAMPLES: usize = 25;

const MIN_TRANSITIONS: usize = 10;

fn state_features(state: &GlobalState) -> Vec<f64> {
    let mut f = Vec::with_capacity(state.n_agents() * AGENT_DIM + 2 * state.n_landmarks() + 1);
    state.extend_agent_features(&mut f);
    state.extend_landmark_features(&mut f);
    f.push(1.0);
    f
}

fn gaussian_step<R: Rng + ?Sized>(mean: &[f64], sigma: &[f64], rng: &mut R) -> Vec<f64> {
    mean.iter()
        .zip(sigma)
        .map(|(m, s)| {
            let z: f64 = StandardNormal.sample(rng);
            m + s * z
        })
        .collect()
}

/// Linear-Gaussian map from the current global state to the next states of
/// all non-ego agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonEgoDynamicsModel {
    non_ego: Vec<usize>,
    /// `n_features × (|non_ego| · 4)`.
    coef: DMatrix<f64>,
    residual_sigma: Vec<f64>,
}

impl NonEgoDynamicsModel {
    /// Fits on every transition of the given behavioural trajectories.
    pub fn fit(data: &[Trajectory], ego_agents: &[usize], ridge_lambda: f64) -> Result<Self> {
        let k = data
            .first()
            .and_then(|t| t.states.first())
            .map(GlobalState::n_agents)
            .ok_or_else(|| Error::config("no training trajectories for the dynamics model"))?;
        let non_ego: Vec<usize> = (0..k).filter(|a| !ego_agents.contains(a)).collect();
        let pairs: Vec<(&GlobalState, &GlobalState)> = data
            .iter()
            .flat_map(|t| t.states.iter().zip(t.states.iter().skip(1)))
            .collect();
        if pairs.len() < MIN_TRANSITIONS {
            return Err(Error::config(format!(
                "dynamics model needs at least {MIN_TRANSITIONS} transitions, got {}",
                pairs.len()
            )));
        }
        let n_in = state_features(pairs[0].0).len();
        let n_out = non_ego.len() * AGENT_DIM;
        let mut x = DMatrix::zeros(pairs.len(), n_in);
        let mut y = DMatrix::zeros(pairs.len(), n_out);
        for (i, (cur, next)) in pairs.iter().enumerate() {
            let f = state_features(cur);
            if f.len() != n_in || next.n_agents() != k {
                return Err(Error::contract("training transitions differ in shape"));
            }
            x.row_mut(i).copy_from_slice(&f);
            for (j, &a) in non_ego.iter().enumerate() {
                for (d, v) in next.agents[a].to_array().into_iter().enumerate() {
                    y[(i, j * AGENT_DIM + d)] = v;
                }
            }
        }
        let coef = ridge::fit(&x, &y, ridge_lambda)?;
        let residual_sigma = ridge::residual_std(&(&x * &coef - &y));
        Ok(NonEgoDynamicsModel {
            non_ego,
            coef,
            residual_sigma,
        })
    }

    pub fn non_ego_agents(&self) -> &[usize] {
        &self.non_ego
    }

    pub fn residual_sigma(&self) -> &[f64] {
        &self.residual_sigma
    }

    /// Mean next states of the non-ego agents, flattened agent-major.
    pub fn mean_next(&self, state: &GlobalState) -> Vec<f64> {
        self.coef
            .tr_mul(&DVector::from_vec(state_features(state)))
            .as_slice()
            .to_vec()
    }

    pub fn sample_next<R: Rng + ?Sized>(
        &self,
        state: &GlobalState,
        rng: &mut R,
    ) -> Vec<AgentState> {
        gaussian_step(&self.mean_next(state), &self.residual_sigma, rng)
            .chunks(AGENT_DIM)
            .map(AgentState::from_slice)
            .collect()
    }

    #[cfg(test)]
    pub(crate) fn with_residual_sigma(mut self, sigma: Vec<f64>) -> Self {
        self.residual_sigma = sigma;
        self
    }
}

/// Learned ego transition: linear in the global state and the one-hot ego
/// actions, with Gaussian residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoDynamicsModel {
    ego: Vec<usize>,
    coef: DMatrix<f64>,
    residual_sigma: Vec<f64>,
}

impl EgoDynamicsModel {
    fn features(state: &GlobalState, actions: &[Action]) -> Vec<f64> {
        let mut f = state_features(state);
        for a in actions {
            let mut one_hot = [0.0; Action::COUNT];
            one_hot[a.index()] = 1.0;
            f.extend_from_slice(&one_hot);
        }
        f
    }

    pub fn fit(data: &[Trajectory], ego_agents: &[usize], ridge_lambda: f64) -> Result<Self> {
        let rows: Vec<(Vec<f64>, Vec<f64>)> = data
            .iter()
            .flat_map(|t| {
                t.states.windows(2).zip(&t.ego_actions).map(|(w, acts)| {
                    let target = ego_agents
                        .iter()
                        .flat_map(|&e| w[1].agents[e].to_array())
                        .collect();
                    (Self::features(&w[0], acts), target)
                })
            })
            .collect();
        if rows.len() < MIN_TRANSITIONS {
            return Err(Error::config(format!(
                "ego dynamics model needs at least {MIN_TRANSITIONS} transitions, got {}",
                rows.len()
            )));
        }
        let x = DMatrix::from_fn(rows.len(), rows[0].0.len(), |i, j| rows[i].0[j]);
        let y = DMatrix::from_fn(rows.len(), rows[0].1.len(), |i, j| rows[i].1[j]);
        let coef = ridge::fit(&x, &y, ridge_lambda)?;
        let residual_sigma = ridge::residual_std(&(&x * &coef - &y));
        Ok(EgoDynamicsModel {
            ego: ego_agents.to_vec(),
            coef,
            residual_sigma,
        })
    }

    pub fn sample_next<R: Rng + ?Sized>(
        &self,
        state: &GlobalState,
        actions: &[Action],
        rng: &mut R,
    ) -> Vec<AgentState> {
        let mean = self
            .coef
            .tr_mul(&DVector::from_vec(Self::features(state, actions)));
        gaussian_step(mean.as_slice(), &self.residual_sigma, rng)
            .chunks(AGENT_DIM)
            .map(AgentState::from_slice)
            .collect()
    }
}

/// A sampled suffix with the ego actions that produced it and its DR.
#[derive(Debug, Clone)]
pub struct SampledContinuation {
    /// The `T - H` suffix states.
    pub states: Vec<GlobalState>,
    /// One record per suffix step, taken in the preceding state.
    pub ego_actions: Vec<Vec<Action>>,
    pub log_w: LogDensityRatio,
}

/// Anything that can draw continuations of a prefix under the target policy.
pub trait ContinuationSampler: Sync {
    fn sample(&self, prefix: &[GlobalState], rng: &mut StreamRng) -> Result<SampledContinuation>;
}

/// Ego policies, behavioural and target, aligned with `ego_agents`.
#[derive(Clone, Copy)]
pub struct EgoPolicies<'a> {
    pub ego_agents: &'a [usize],
    pub behavioural: &'a [&'a dyn Policy],
    pub target: &'a [&'a dyn Policy],
}

pub struct SyntheticProcess<'a> {
    pub env: &'a Mpe,
    pub non_ego: &'a NonEgoDynamicsModel,
    /// `None` uses the simulator's ego transition.
    pub ego_model: Option<&'a EgoDynamicsModel>,
    pub policies: EgoPolicies<'a>,
    /// Number of suffix steps to generate.
    pub steps: usize,
}

impl ContinuationSampler for SyntheticProcess<'_> {
    fn sample(&self, prefix: &[GlobalState], rng: &mut StreamRng) -> Result<SampledContinuation> {
        let mut state = prefix
            .last()
            .cloned()
            .ok_or_else(|| Error::contract("empty prefix"))?;
        let p = self.policies;
        let mut log_w = LogDensityRatio::ZERO;
        let mut states = Vec::with_capacity(self.steps);
        let mut records = Vec::with_capacity(self.steps);
        for _ in 0..self.steps {
            let mut actions = Vec::with_capacity(p.ego_agents.len());
            for (e, &agent) in p.ego_agents.iter().enumerate() {
                let obs = self.env.observe(&state, agent, rng);
                let action = p.target[e].pmf(&obs).sample(rng);
                log_w.accumulate(log_ratio_term(
                    &state,
                    agent,
                    action,
                    p.behavioural[e],
                    p.target[e],
                )?);
                actions.push(action);
            }
            let ego_next: Vec<AgentState> = match self.ego_model {
                Some(model) => model.sample_next(&state, &actions, rng),
                None => p
                    .ego_agents
                    .iter()
                    .zip(&actions)
                    .map(|(&agent, &a)| self.env.step_agent(&state.agents[agent], a, rng))
                    .collect(),
            };
            let non_ego_next = self.non_ego.sample_next(&state, rng);
            let mut agents = state.agents.clone();
            for (&agent, s) in p.ego_agents.iter().zip(ego_next) {
                agents[agent] = s;
            }
            for (&agent, s) in self.non_ego.non_ego_agents().iter().zip(non_ego_next) {
                agents[agent] = s;
            }
            state = GlobalState {
                agents,
                landmarks: state.landmarks.clone(),
            };
            states.push(state.clone());
            records.push(actions);
        }
        Ok(SampledContinuation {
            states,
            ego_actions: records,
            log_w: LogDensityRatio::new(log_w.value())?,
        })
    }
}

/// Samples the real target process in the simulator. Only usable for
/// evaluation, where the simulator stands in for the unknown system.
pub struct TrueTargetProcess<'a> {
    pub env: &'a Mpe,
    /// One policy per agent, ego agents already switched to their target.
    pub agent_policies: &'a [&'a dyn Policy],
    pub policies: EgoPolicies<'a>,
    pub steps: usize,
}

impl ContinuationSampler for TrueTargetProcess<'_> {
    fn sample(&self, prefix: &[GlobalState], rng: &mut StreamRng) -> Result<SampledContinuation> {
        let last = prefix
            .last()
            .cloned()
            .ok_or_else(|| Error::contract("empty prefix"))?;
        let start = Trajectory::from_initial(last, self.policies.ego_agents.to_vec());
        let traj = self
            .env
            .rollout(start, self.agent_policies, self.steps + 1, rng)?;
        let actions = EgoActionSequence::from_records(&traj.ego_actions)?;
        let p = self.policies;
        let log_w = log_density_ratio(
            &traj.states[..self.steps],
            &actions,
            p.ego_agents,
            p.behavioural,
            p.target,
        )?;
        let mut states = traj.states;
        states.remove(0);
        Ok(SampledContinuation {
            states,
            ego_actions: traj.ego_actions,
            log_w,
        })
    }
}

/// What the max-DR search scores candidates against.
#[derive(Clone, Copy)]
pub struct SearchContext<'a> {
    pub calib: &'a WeightedCalibrationSet,
    pub center: &'a Suffix,
    pub gammas: &'a [f64],
    pub sigma: &'a [f64],
    pub dims: ScoreDims,
    pub alpha: f64,
    pub w_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateCheck {
    pub score: Score,
    pub weight: f64,
    /// Critical value of the calibration set reweighted with `weight`.
    pub critical_value: CriticalValue,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxDrEstimate {
    pub w_tilde: f64,
    pub n_samples: usize,
    pub n_passing: usize,
    /// Some candidate's DR hit the cap.
    pub saturated: bool,
    pub candidates: Vec<CandidateCheck>,
}

impl MaxDrEstimate {
    /// Passing candidates with DR at most `w_tilde` that fall outside `region`.
    /// Always zero when the region was built with this estimate's `w_tilde`.
    pub fn containment_violations(&self, region: &MaxDrRegion) -> usize {
        self.candidates
            .iter()
            .filter(|c| {
                c.passed && c.weight <= region.w_top() && !region.critical_value().admits(c.score)
            })
            .count()
    }
}

/// Runs the per-candidate CP test and takes the largest passing DR.
///
/// With no passing candidate the smallest sampled DR is returned and
/// `n_passing` is zero.
pub fn max_dr_from_candidates(
    candidates: &[(Score, f64)],
    calib: &WeightedCalibrationSet,
    alpha: f64,
    w_max: f64,
) -> Result<MaxDrEstimate> {
    if candidates.is_empty() {
        return Err(Error::contract(
            "max-DR search needs at least one candidate",
        ));
    }
    let mut checks = Vec::with_capacity(candidates.len());
    for &(score, weight) in candidates {
        let critical_value = weighted_quantile(calib, weight, alpha)?;
        checks.push(CandidateCheck {
            score,
            weight,
            critical_value,
            passed: critical_value.admits(score),
        });
    }
    let passing = checks.iter().filter(|c| c.passed).map(|c| c.weight);
    let n_passing = passing.clone().count();
    let w_tilde = if n_passing > 0 {
        passing.fold(f64::MIN, f64::max)
    } else {
        checks
            .iter()
            .map(|c| c.weight)
            .fold(f64::INFINITY, f64::min)
    };
    Ok(MaxDrEstimate {
        w_tilde,
        n_samples: checks.len(),
        n_passing,
        saturated: checks.iter().any(|c| c.weight >= w_max),
        candidates: checks,
    })
}

/// Samples `n_samples` continuations of `prefix` and estimates the max DR.
pub fn estimate_max_dr<S: ContinuationSampler + ?Sized>(
    prefix: &[GlobalState],
    sampler: &S,
    n_samples: usize,
    ctx: &SearchContext<'_>,
    rng: &mut StreamRng,
) -> Result<MaxDrEstimate> {
    if n_samples == 0 {
        return Err(Error::config("need at least one synthetic sample"));
    }
    let mut candidates = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let cont = sampler.sample(prefix, rng)?;
        let suffix = Suffix::from_states(&cont.states, ctx.dims);
        let score = crate::conformal::score(ctx.center, &suffix, ctx.gammas, ctx.sigma)?;
        let weight = crate::density_ratio::density_ratio(cont.log_w, ctx.w_max);
        candidates.push((score, weight));
    }
    max_dr_from_candidates(&candidates, ctx.calib, ctx.alpha, ctx.w_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::GammaRule;
    use crate::density_ratio::DEFAULT_W_MAX;
    use crate::env::EnvConfig;
    use crate::policy::PolicySpec;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn behavioural_data(env: &Mpe, n: usize, len: usize, seed: u64) -> Vec<Trajectory> {
        let spec = PolicySpec::behavioural();
        let policies = vec![&spec; env.config().k];
        (0..n)
            .map(|i| {
                let mut rng = stream(seed, i as u64);
                let init = Trajectory::from_initial(env.sample_initial(&mut rng), vec![0]);
                env.rollout(init, &policies, len, &mut rng).unwrap()
            })
            .collect()
    }

    #[test]
    fn linear_non_ego_dynamics_fit_exactly() {
        // Deterministic "nothing" policies: next state is linear in the current one.
        let env = Mpe::new(EnvConfig {
            sigma_act: 0.0,
            sigma_sensor: 0.0,
            m: 0,
            ..EnvConfig::default()
        })
        .unwrap();
        let data: Vec<Trajectory> = (0..20)
            .map(|i| {
                let mut rng = stream(1, i);
                let mut s = env.sample_initial(&mut rng);
                for a in &mut s.agents {
                    a.vel = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
                }
                let mut states = vec![s];
                for _ in 0..5 {
                    let n = env
                        .step(states.last().unwrap(), &[Action::Nothing; 3], &mut rng)
                        .unwrap();
                    states.push(n);
                }
                Trajectory {
                    states,
                    ego_agents: vec![0],
                    ego_actions: vec![vec![Action::Nothing]; 5],
                }
            })
            .collect();
        let model = NonEgoDynamicsModel::fit(&data, &[0], 0.0).unwrap();
        assert_eq!(model.non_ego_agents(), &[1, 2]);
        for traj in &data {
            let mean = model.mean_next(&traj.states[0]);
            let truth: Vec<f64> = [1, 2]
                .iter()
                .flat_map(|&a| traj.states[1].agents[a].to_array())
                .collect();
            for (m, t) in mean.iter().zip(&truth) {
                assert!((m - t).abs() < 1e-8);
            }
        }
        assert!(model
            .residual_sigma()
            .iter()
            .all(|s| *s > 0.0 && s.is_finite()));
    }

    #[test]
    fn non_ego_model_beats_zero_on_held_out() {
        let env = Mpe::new(EnvConfig::default()).unwrap();
        let train = behavioural_data(&env, 200, 12, 2);
        let test = behavioural_data(&env, 100, 12, 3);
        let model = NonEgoDynamicsModel::fit(&train, &[0], 1e-3).unwrap();
        let (mut err, mut zero) = (0.0, 0.0);
        for traj in &test {
            for w in traj.states.windows(2) {
                let mean = model.mean_next(&w[0]);
                let truth: Vec<f64> = [1, 2]
                    .iter()
                    .flat_map(|&a| w[1].agents[a].to_array())
                    .collect();
                for (m, t) in mean.iter().zip(&truth) {
                    err += (m - t).powi(2);
                    zero += t * t;
                }
            }
        }
        assert!(err < zero);
        assert!(model
            .residual_sigma()
            .iter()
            .all(|s| *s > 0.0 && s.is_finite()));
        assert!(NonEgoDynamicsModel::fit(&train[..0], &[0], 1e-3).is_err());
    }

    struct Fixture {
        env: Mpe,
        model: NonEgoDynamicsModel,
        data: Vec<Trajectory>,
    }

    fn fixture() -> Fixture {
        let env = Mpe::new(EnvConfig::default()).unwrap();
        let data = behavioural_data(&env, 100, 10, 4);
        let model = NonEgoDynamicsModel::fit(&data, &[0], 1e-3).unwrap();
        Fixture { env, model, data }
    }

    #[test]
    fn identical_target_gives_unit_weights() {
        let f = fixture();
        let b = PolicySpec::behavioural();
        let beh: [&dyn Policy; 1] = [&b];
        let process = SyntheticProcess {
            env: &f.env,
            non_ego: &f.model,
            ego_model: None,
            policies: EgoPolicies {
                ego_agents: &[0],
                behavioural: &beh,
                target: &beh,
            },
            steps: 6,
        };
        let mut rng = stream(5, 0);
        for _ in 0..20 {
            let c = process.sample(&f.data[0].states[..4], &mut rng).unwrap();
            assert_eq!(c.states.len(), 6);
            assert_eq!(c.ego_actions.len(), 6);
            assert_eq!(c.log_w.value(), 0.0);
        }
    }

    #[test]
    fn accumulated_ratio_matches_post_hoc() {
        let f = fixture();
        let b = PolicySpec::behavioural();
        let t = PolicySpec::biased(0.3);
        let beh: [&dyn Policy; 1] = [&b];
        let tgt: [&dyn Policy; 1] = [&t];
        let policies = EgoPolicies {
            ego_agents: &[0],
            behavioural: &beh,
            target: &tgt,
        };
        let process = SyntheticProcess {
            env: &f.env,
            non_ego: &f.model,
            ego_model: None,
            policies,
            steps: 8,
        };
        let mut rng = stream(6, 0);
        let prefix = &f.data[3].states[..5];
        for _ in 0..50 {
            let c = process.sample(prefix, &mut rng).unwrap();
            let mut visited = vec![prefix[4].clone()];
            visited.extend_from_slice(&c.states[..7]);
            let actions = EgoActionSequence::from_records(&c.ego_actions).unwrap();
            let post = log_density_ratio(&visited, &actions, &[0], &beh, &tgt).unwrap();
            assert_eq!(post.value().to_bits(), c.log_w.value().to_bits());
        }
    }

    #[test]
    fn deterministic_without_noise() {
        let env = Mpe::new(EnvConfig {
            sigma_act: 0.0,
            sigma_sensor: 0.0,
            ..EnvConfig::default()
        })
        .unwrap();
        let data = behavioural_data(&env, 50, 8, 7);
        let model = NonEgoDynamicsModel::fit(&data, &[0], 1e-3)
            .unwrap()
            .with_residual_sigma(vec![0.0; 8]);
        let g = PolicySpec::greedy();
        let pol: [&dyn Policy; 1] = [&g];
        let process = SyntheticProcess {
            env: &env,
            non_ego: &model,
            ego_model: None,
            policies: EgoPolicies {
                ego_agents: &[0],
                behavioural: &pol,
                target: &pol,
            },
            steps: 5,
        };
        let a = process
            .sample(&data[0].states[..3], &mut stream(8, 0))
            .unwrap();
        let b = process
            .sample(&data[0].states[..3], &mut stream(8, 1))
            .unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn ego_actions_follow_target_pmf() {
        let f = fixture();
        let b = PolicySpec::behavioural();
        let t = PolicySpec::biased(0.2);
        let beh: [&dyn Policy; 1] = [&b];
        let tgt: [&dyn Policy; 1] = [&t];
        let process = SyntheticProcess {
            env: &f.env,
            non_ego: &f.model,
            ego_model: None,
            policies: EgoPolicies {
                ego_agents: &[0],
                behavioural: &beh,
                target: &tgt,
            },
            steps: 1,
        };
        let prefix = &f.data[0].states[..3];
        let pmf = t.pmf(&crate::env::observe_exact(&prefix[2], 0));
        let mut rng = stream(9, 0);
        let n = 10_000;
        let mut counts = [0usize; Action::COUNT];
        for _ in 0..n {
            counts[process.sample(prefix, &mut rng).unwrap().ego_actions[0][0].index()] += 1;
        }
        for a in Action::ALL {
            let p = pmf.prob(a);
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((counts[a.index()] as f64 - p * n as f64).abs() <= 4.0 * sd);
        }
    }

    #[test]
    fn learned_ego_model_runs() {
        let f = fixture();
        let ego = EgoDynamicsModel::fit(&f.data, &[0], 1e-3).unwrap();
        let b = PolicySpec::behavioural();
        let beh: [&dyn Policy; 1] = [&b];
        let process = SyntheticProcess {
            env: &f.env,
            non_ego: &f.model,
            ego_model: Some(&ego),
            policies: EgoPolicies {
                ego_agents: &[0],
                behavioural: &beh,
                target: &beh,
            },
            steps: 4,
        };
        let c = process
            .sample(&f.data[1].states[..3], &mut stream(10, 0))
            .unwrap();
        assert_eq!(c.states.len(), 4);
        assert!(c.states.iter().all(|s| s
            .agents
            .iter()
            .all(|a| a.to_array().iter().all(|v| v.is_finite()))));
    }

    #[test]
    fn true_process_matches_rollout_shapes() {
        let env = Mpe::new(EnvConfig::default()).unwrap();
        let data = behavioural_data(&env, 1, 5, 11);
        let b = PolicySpec::behavioural();
        let t = PolicySpec::biased(0.3);
        let beh: [&dyn Policy; 1] = [&b];
        let tgt: [&dyn Policy; 1] = [&t];
        let agents: [&dyn Policy; 3] = [&t, &b, &b];
        let process = TrueTargetProcess {
            env: &env,
            agent_policies: &agents,
            policies: EgoPolicies {
                ego_agents: &[0],
                behavioural: &beh,
                target: &tgt,
            },
            steps: 7,
        };
        let c = process.sample(&data[0].states, &mut stream(12, 0)).unwrap();
        assert_eq!(c.states.len(), 7);
        assert_eq!(c.ego_actions.len(), 7);
    }

    fn calib() -> WeightedCalibrationSet {
        WeightedCalibrationSet::new(
            (1..=40)
                .map(|i| crate::conformal::CalibrationRecord {
                    score: i as f64 * 0.1,
                    weight: 0.5 + (i % 3) as f64,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn no_shift_search_reduces_to_standard() {
        let c = WeightedCalibrationSet::uniform((1..=40).map(|i| i as f64)).unwrap();
        let cands: Vec<(Score, f64)> = (0..25)
            .map(|i| (Score::new(i as f64).unwrap(), 1.0))
            .collect();
        let est = max_dr_from_candidates(&cands, &c, 0.05, DEFAULT_W_MAX).unwrap();
        assert_eq!(est.w_tilde, 1.0);
        let std = crate::conformal::standard_quantile(&c, 0.05).unwrap();
        assert_eq!(weighted_quantile(&c, est.w_tilde, 0.05).unwrap(), std);
    }

    #[test]
    fn fallback_when_nothing_passes() {
        let c = calib();
        let cands = vec![
            (Score::new(100.0).unwrap(), 0.3),
            (Score::new(200.0).unwrap(), 0.2),
        ];
        let est = max_dr_from_candidates(&cands, &c, 0.1, DEFAULT_W_MAX).unwrap();
        assert_eq!(est.n_passing, 0);
        assert_eq!(est.w_tilde, 0.2);
        assert!(max_dr_from_candidates(&[], &c, 0.1, DEFAULT_W_MAX).is_err());
    }

    #[test]
    fn saturation_flag() {
        let c = calib();
        let cands = vec![(Score::new(1.0).unwrap(), DEFAULT_W_MAX)];
        let est = max_dr_from_candidates(&cands, &c, 0.1, DEFAULT_W_MAX).unwrap();
        assert!(est.saturated);
        assert_eq!(est.n_passing, 1);
    }

    #[test]
    fn search_end_to_end_with_gammas() {
        let f = fixture();
        let b = PolicySpec::behavioural();
        let t = PolicySpec::biased(0.2);
        let beh: [&dyn Policy; 1] = [&b];
        let tgt: [&dyn Policy; 1] = [&t];
        let process = SyntheticProcess {
            env: &f.env,
            non_ego: &f.model,
            ego_model: None,
            policies: EgoPolicies {
                ego_agents: &[0],
                behavioural: &beh,
                target: &tgt,
            },
            steps: 4,
        };
        let prefix = &f.data[2].states[..4];
        let center =
            Suffix::from_states(&f.data[2].states[4..8], ScoreDims::PositionsAndVelocities);
        let gammas = GammaRule::InverseStep.gammas(4);
        let sigma = vec![0.3; 12];
        let c = calib();
        let ctx = SearchContext {
            calib: &c,
            center: &center,
            gammas: &gammas,
            sigma: &sigma,
            dims: ScoreDims::PositionsAndVelocities,
            alpha: 0.1,
            w_max: DEFAULT_W_MAX,
        };
        let est = estimate_max_dr(prefix, &process, 25, &ctx, &mut stream(13, 0)).unwrap();
        assert_eq!(est.n_samples, 25);
        assert!(est.n_passing <= est.n_samples);
        assert!(est.w_tilde > 0.0);
        let region = MaxDrRegion::build(
            center.clone(),
            &c,
            est.w_tilde,
            gammas.clone(),
            sigma.clone(),
            0.1,
        )
        .unwrap();
        assert_eq!(est.containment_violations(&region), 0);
    }

    proptest! {
        #[test]
        fn passing_candidate_lies_in_its_region(
            cands in prop::collection::vec((0.0f64..6.0, 0.05f64..30.0), 1..30),
        ) {
            let c = calib();
            let cands: Vec<(Score, f64)> = cands.into_iter().map(|(s, w)| (Score::new(s).unwrap(), w)).collect();
            let est = max_dr_from_candidates(&cands, &c, 0.1, DEFAULT_W_MAX).unwrap();
            let center = Suffix::new(1, 1, vec![0.0]).unwrap();
            let region = MaxDrRegion::build(center, &c, est.w_tilde, vec![1.0], vec![1.0], 0.1).unwrap();
            prop_assert_eq!(est.containment_violations(&region), 0);
            for check in est.candidates.iter().filter(|c| c.passed) {
                let own = MaxDrRegion::build(Suffix::new(1, 1, vec![0.0]).unwrap(), &c, check.weight, vec![1.0], vec![1.0], 0.1).unwrap();
                let cand = Suffix::new(1, 1, vec![check.score.value()]).unwrap();
                prop_assert!(own.contains(&cand).unwrap());
            }
        }

        #[test]
        fn w_tilde_grows_with_more_samples(
            cands in prop::collection::vec((0.0f64..6.0, 0.05f64..30.0), 2..40),
            split in 1usize..39,
        ) {
            let c = calib();
            let cands: Vec<(Score, f64)> = cands.into_iter().map(|(s, w)| (Score::new(s).unwrap(), w)).collect();
            let split = split.min(cands.len() - 1);
            let small = max_dr_from_candidates(&cands[..split], &c, 0.1, DEFAULT_W_MAX).unwrap();
            let large = max_dr_from_candidates(&cands, &c, 0.1, DEFAULT_W_MAX).unwrap();
            prop_assert!(large.n_passing >= small.n_passing);
            if small.n_passing > 0 {
                prop_assert!(large.w_tilde >= small.w_tilde);
            }
        }
    }
}
