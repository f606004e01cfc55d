//! Linear trajectory predictor: maps a prefix of `H` global states to the
//! next `T - H` states, fitted by ridge regression on behavioural data.
//!
//! Features are the agents' positions and velocities at every prefix step,
//! the landmark positions, and a constant 1. Outputs are positions and
//! velocities of all agents at every suffix step. `sigma` holds the residual
//! standard deviation of each per-step output coordinate on the training set
//! and is what the score divides residuals by.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conformal::{ScoreDims, Suffix};
use crate::env::{AgentState, GlobalState, Trajectory, AGENT_DIM};
use crate::error::{Error, Result};
use crate::ridge;

pub const DEFAULT_RIDGE_LAMBDA: f64 = 1e-3;
pub const MIN_TRAINING_SAMPLES: usize = 10;

const FILE_FORMAT: &str = "macopp-linear-predictor/1";

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    h: usize,
    t: usize,
    k: usize,
    m: usize,
    ridge_lambda: f64,
    /// `n_inputs × n_outputs`.
    coef: DMatrix<f64>,
    sigma: Vec<f64>,
}

pub fn prefix_features(prefix: &[GlobalState]) -> Vec<f64> {
    let mut f = Vec::new();
    for s in prefix {
        s.extend_agent_features(&mut f);
    }
    if let Some(last) = prefix.last() {
        last.extend_landmark_features(&mut f);
    }
    f.push(1.0);
    f
}

fn suffix_targets(suffix: &[GlobalState]) -> Vec<f64> {
    let mut v = Vec::new();
    for s in suffix {
        s.extend_agent_features(&mut v);
    }
    v
}

impl PredictorModel {
    pub fn n_inputs(&self) -> usize {
        self.h * self.k * AGENT_DIM + 2 * self.m + 1
    }

    pub fn n_outputs(&self) -> usize {
        (self.t - self.h) * self.k * AGENT_DIM
    }

    pub fn prefix_len(&self) -> usize {
        self.h
    }

    pub fn total_len(&self) -> usize {
        self.t
    }

    pub fn suffix_len(&self) -> usize {
        self.t - self.h
    }

    pub fn ridge_lambda(&self) -> f64 {
        self.ridge_lambda
    }

    /// Residual scale per `[px, py, vx, vy]` coordinate of every agent.
    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn sigma_for(&self, dims: ScoreDims) -> Vec<f64> {
        dims.select(&self.sigma)
    }

    /// Predictor that always outputs zeros, with unit sigma.
    pub fn zero(h: usize, t: usize, k: usize, m: usize) -> Self {
        let mut model = PredictorModel {
            h,
            t,
            k,
            m,
            ridge_lambda: 0.0,
            coef: DMatrix::zeros(0, 0),
            sigma: vec![1.0; k * AGENT_DIM],
        };
        model.coef = DMatrix::zeros(model.n_inputs(), model.n_outputs());
        model
    }

    /// Fits on the first `t` states of each trajectory.
    pub fn train(data: &[Trajectory], h: usize, t: usize, ridge_lambda: f64) -> Result<Self> {
        if h == 0 || h >= t {
            return Err(Error::config(format!("need 0 < H < T, got H={h}, T={t}")));
        }
        if data.len() < MIN_TRAINING_SAMPLES {
            return Err(Error::config(format!(
                "predictor needs at least {MIN_TRAINING_SAMPLES} training trajectories, got {}",
                data.len()
            )));
        }
        let first = &data[0].states[0];
        let (k, m) = (first.n_agents(), first.n_landmarks());
        let mut model = PredictorModel::zero(h, t, k, m);
        model.ridge_lambda = ridge_lambda;
        let (n_in, n_out) = (model.n_inputs(), model.n_outputs());

        let mut x = DMatrix::zeros(data.len(), n_in);
        let mut y = DMatrix::zeros(data.len(), n_out);
        for (i, traj) in data.iter().enumerate() {
            if traj.len() < t {
                return Err(Error::contract(format!(
                    "training trajectory {i} has {} states, need {t}",
                    traj.len()
                )));
            }
            let f = prefix_features(&traj.states[..h]);
            let g = suffix_targets(&traj.states[h..t]);
            if f.len() != n_in || g.len() != n_out {
                return Err(Error::contract(format!(
                    "training trajectory {i} has a different agent/landmark count"
                )));
            }
            x.row_mut(i).copy_from_slice(&f);
            y.row_mut(i).copy_from_slice(&g);
        }
        model.coef = ridge::fit(&x, &y, ridge_lambda)?;

        // Pool residuals over samples and suffix steps per coordinate.
        let residuals = &x * &model.coef - &y;
        let per_step = k * AGENT_DIM;
        let steps = t - h;
        let mut pooled = DMatrix::zeros(data.len() * steps, per_step);
        for i in 0..data.len() {
            for s in 0..steps {
                for d in 0..per_step {
                    pooled[(i * steps + s, d)] = residuals[(i, s * per_step + d)];
                }
            }
        }
        model.sigma = ridge::residual_std(&pooled);
        Ok(model)
    }

    fn predict_flat(&self, prefix: &[GlobalState]) -> Result<Vec<f64>> {
        if prefix.len() != self.h {
            return Err(Error::contract(format!(
                "prefix has {} states, model expects {}",
                prefix.len(),
                self.h
            )));
        }
        let f = prefix_features(prefix);
        if f.len() != self.n_inputs() {
            return Err(Error::contract(
                "prefix agent/landmark counts do not match the model",
            ));
        }
        let out = self.coef.tr_mul(&DVector::from_vec(f));
        Ok(out.as_slice().to_vec())
    }

    /// Predicted suffix as global states (landmarks copied from the prefix).
    pub fn predict(&self, prefix: &[GlobalState]) -> Result<Vec<GlobalState>> {
        let flat = self.predict_flat(prefix)?;
        let landmarks = prefix
            .last()
            .map(|s| s.landmarks.clone())
            .unwrap_or_default();
        Ok(flat
            .chunks(self.k * AGENT_DIM)
            .map(|step| GlobalState {
                agents: step.chunks(AGENT_DIM).map(AgentState::from_slice).collect(),
                landmarks: landmarks.clone(),
            })
            .collect())
    }

    pub fn predict_suffix(&self, prefix: &[GlobalState], dims: ScoreDims) -> Result<Suffix> {
        Ok(Suffix::from_states(&self.predict(prefix)?, dims))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = PredictorFile {
            format: FILE_FORMAT.to_string(),
            h: self.h,
            t: self.t,
            k: self.k,
            m: self.m,
            ridge_lambda: self.ridge_lambda,
            n_inputs: self.n_inputs(),
            n_outputs: self.n_outputs(),
            // Column-major n_inputs × n_outputs is row-major n_outputs × n_inputs.
            weights: self.coef.as_slice().to_vec(),
            sigma: self.sigma.clone(),
        };
        let text = serde_json::to_string(&file).map_err(|e| Error::parse(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: PredictorFile = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        if file.format != FILE_FORMAT {
            return Err(Error::parse(
                path,
                format!("unsupported format `{}`", file.format),
            ));
        }
        let mut model = PredictorModel::zero(file.h, file.t, file.k, file.m);
        if file.n_inputs != model.n_inputs()
            || file.n_outputs != model.n_outputs()
            || file.weights.len() != file.n_inputs * file.n_outputs
            || file.sigma.len() != file.k * AGENT_DIM
        {
            return Err(Error::parse(
                path,
                "weight or sigma shape does not match header",
            ));
        }
        model.ridge_lambda = file.ridge_lambda;
        model.coef = DMatrix::from_column_slice(file.n_inputs, file.n_outputs, &file.weights);
        model.sigma = file.sigma;
        Ok(model)
    }
}

/// On-disk layout of a [`PredictorModel`].
#[derive(Debug, Serialize, Deserialize)]
struct PredictorFile {
    format: String,
    h: usize,
    t: usize,
    k: usize,
    m: usize,
    ridge_lambda: f64,
    n_inputs: usize,
    n_outputs: usize,
    /// Row-major `n_outputs × n_inputs`; the last input column is the bias.
    weights: Vec<f64>,
    sigma: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvConfig, Mpe};
    use crate::policy::PolicySpec;
    use crate::rng::stream;

    /// Constant-velocity single agent: exactly linear in the prefix.
    fn drifting(n: usize) -> Vec<Trajectory> {
        (0..n)
            .map(|i| {
                let x = i as f64 * 0.1;
                let v = [0.05 * (i % 7) as f64 - 0.1, 0.02 * (i % 5) as f64];
                let states = (0..8)
                    .map(|t| GlobalState {
                        agents: vec![AgentState {
                            pos: [x + v[0] * t as f64, -x + v[1] * t as f64],
                            vel: v,
                        }],
                        landmarks: vec![],
                    })
                    .collect();
                Trajectory {
                    states,
                    ego_agents: vec![0],
                    ego_actions: vec![vec![crate::env::Action::Nothing]; 7],
                }
            })
            .collect()
    }

    fn mpe_data(n: usize, seed: u64) -> Vec<Trajectory> {
        let env = Mpe::new(EnvConfig::default()).unwrap();
        let spec = PolicySpec::behavioural();
        let policies = vec![&spec; 3];
        (0..n)
            .map(|i| {
                let mut rng = stream(seed, i as u64);
                let init = Trajectory::from_initial(env.sample_initial(&mut rng), vec![0]);
                env.rollout(init, &policies, 12, &mut rng).unwrap()
            })
            .collect()
    }

    fn mse(model: &PredictorModel, data: &[Trajectory]) -> f64 {
        let mut acc = 0.0;
        let mut n = 0;
        for traj in data {
            let pred = model.predict(&traj.states[..model.h]).unwrap();
            for (p, s) in pred.iter().zip(&traj.states[model.h..model.t]) {
                for (pa, sa) in p.agents.iter().zip(&s.agents) {
                    for (a, b) in pa.to_array().iter().zip(sa.to_array()) {
                        acc += (a - b).powi(2);
                        n += 1;
                    }
                }
            }
        }
        acc / n as f64
    }

    #[test]
    fn linear_system_is_fitted_exactly() {
        let data = drifting(30);
        let model = PredictorModel::train(&data, 3, 8, 0.0).unwrap();
        for traj in &data {
            let pred = model.predict(&traj.states[..3]).unwrap();
            for (p, s) in pred.iter().zip(&traj.states[3..]) {
                for (a, b) in p.agents[0].to_array().iter().zip(s.agents[0].to_array()) {
                    assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
                }
            }
        }
        assert!(model.sigma().iter().all(|&s| s >= ridge::SIGMA_FLOOR));
    }

    #[test]
    fn duplicated_data_gives_same_solution() {
        let data = mpe_data(60, 1);
        let mut doubled = data.clone();
        doubled.extend(data.iter().cloned());
        let a = PredictorModel::train(&data, 5, 9, 0.0).unwrap();
        let b = PredictorModel::train(&doubled, 5, 9, 0.0).unwrap();
        let scale = a.coef.amax();
        assert!((&a.coef - &b.coef).amax() <= 1e-8 * scale.max(1.0));
    }

    #[test]
    fn beats_zero_predictor_in_and_out_of_sample() {
        let train = mpe_data(400, 2);
        let test = mpe_data(200, 3);
        let model = PredictorModel::train(&train, 6, 12, DEFAULT_RIDGE_LAMBDA).unwrap();
        let zero = PredictorModel::zero(6, 12, 3, 3);
        assert!(mse(&model, &train) <= mse(&zero, &train));
        assert!(mse(&model, &test) < mse(&zero, &test));
    }

    #[test]
    fn zero_model_and_affinity() {
        let data = mpe_data(2, 4);
        let zero = PredictorModel::zero(4, 8, 3, 3);
        let pred = zero.predict(&data[0].states[..4]).unwrap();
        assert_eq!(pred.len(), 4);
        assert!(pred
            .iter()
            .all(|s| s.agents.iter().all(|a| a.to_array() == [0.0; 4])));

        let model = PredictorModel::train(&mpe_data(50, 5), 4, 8, 1e-3).unwrap();
        let a = 0.3;
        let mixed: Vec<GlobalState> = data[0].states[..4]
            .iter()
            .zip(&data[1].states[..4])
            .map(|(s1, s2)| GlobalState {
                agents: s1
                    .agents
                    .iter()
                    .zip(&s2.agents)
                    .map(|(x, y)| {
                        let v: Vec<f64> = x
                            .to_array()
                            .iter()
                            .zip(y.to_array())
                            .map(|(p, q)| a * p + (1.0 - a) * q)
                            .collect();
                        AgentState::from_slice(&v)
                    })
                    .collect(),
                landmarks: s1
                    .landmarks
                    .iter()
                    .zip(&s2.landmarks)
                    .map(|(p, q)| [a * p[0] + (1.0 - a) * q[0], a * p[1] + (1.0 - a) * q[1]])
                    .collect(),
            })
            .collect();
        let p1 = model.predict_flat(&data[0].states[..4]).unwrap();
        let p2 = model.predict_flat(&data[1].states[..4]).unwrap();
        let pm = model.predict_flat(&mixed).unwrap();
        for ((x, y), z) in p1.iter().zip(&p2).zip(&pm) {
            assert!((a * x + (1.0 - a) * y - z).abs() < 1e-9);
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(
            PredictorModel::train(&mpe_data(5, 6), 4, 8, 0.0),
            Err(Error::Config(_))
        ));
        assert!(PredictorModel::train(&mpe_data(20, 6), 8, 8, 0.0).is_err());
        let model = PredictorModel::zero(4, 8, 3, 3);
        let data = mpe_data(1, 7);
        assert!(matches!(
            model.predict(&data[0].states[..3]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn deterministic_and_persistent() {
        let data = mpe_data(80, 8);
        let a = PredictorModel::train(&data, 4, 10, 1e-3).unwrap();
        let b = PredictorModel::train(&data, 4, 10, 1e-3).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        a.save(&path).unwrap();
        assert_eq!(PredictorModel::load(&path).unwrap(), a);
        assert_eq!(a.sigma_for(ScoreDims::Positions).len(), 6);
    }
}
