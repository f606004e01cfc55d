//! Dataset generation and the line-delimited trajectory format.
//!
//! Each line of a dataset file is one JSON object:
//!
//! ```text
//! {"id": 17, "split": "calib", "role": "behavioural", "prefix": 3, "continuation": 0,
//!  "k": 3, "m": 3, "ego_agents": [0],
//!  "states": [...],        // time × agent × [px, py, vx, vy], row-major
//!  "ego_actions": [...],   // time × ego, action names
//!  "landmarks": [[x, y], ...]}
//! ```
//!
//! Prefixes are generated once under the behavioural policy; continuations
//! branch from the last prefix state. Every trajectory draws from its own RNG
//! stream, so behavioural data and prefixes do not depend on the target bias
//! and target continuations for different biases share random numbers.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::env::{Action, AgentState, GlobalState, Mpe, Trajectory, AGENT_DIM};
use crate::error::{Error, Result};
use crate::policy::PolicySpec;
use crate::rng::{stream, stream_id};

pub(crate) mod streams {
    pub const PREFIX: u16 = 1;
    pub const BEHAVIOURAL: u16 = 2;
    pub const TARGET: u16 = 3;
    pub const SEARCH_SYNTHETIC: u16 = 4;
    pub const SEARCH_TRUE: u16 = 5;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Calib,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Prefix,
    Behavioural,
    Target,
}

/// Behavioural prefixes and their continuations for one target bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub eps_bias: f64,
    /// Prefix plus one behavioural continuation each.
    pub train: Vec<Trajectory>,
    /// Prefix plus one behavioural continuation each.
    pub calib_behavioural: Vec<Trajectory>,
    /// Same calibration prefixes continued under the target policy.
    pub calib_target: Vec<Trajectory>,
    /// `H`-state test prefixes.
    pub test_prefixes: Vec<Trajectory>,
    /// Target-process continuations per test prefix (full length `T`).
    pub test_target: Vec<Vec<Trajectory>>,
}

fn refs(specs: &[PolicySpec]) -> Vec<&PolicySpec> {
    specs.iter().collect()
}

struct Generator<'a> {
    cfg: &'a ExperimentConfig,
    env: Mpe,
    behavioural: Vec<PolicySpec>,
    target: Vec<PolicySpec>,
}

impl Generator<'_> {
    fn prefix(&self, global: usize) -> Result<Trajectory> {
        let mut rng = stream(self.cfg.seed, stream_id(streams::PREFIX, global as u32, 0));
        let init = Trajectory::from_initial(
            self.env.sample_initial(&mut rng),
            self.cfg.ego_agents.clone(),
        );
        self.env
            .rollout(init, &refs(&self.behavioural), self.cfg.h, &mut rng)
    }

    fn continue_with(
        &self,
        prefix: &Trajectory,
        purpose: u16,
        global: usize,
        j: usize,
    ) -> Result<Trajectory> {
        let mut rng = stream(self.cfg.seed, stream_id(purpose, global as u32, j as u16));
        let policies = if purpose == streams::TARGET {
            &self.target
        } else {
            &self.behavioural
        };
        self.env
            .rollout(prefix.clone(), &refs(policies), self.cfg.t, &mut rng)
    }
}

/// Generates all splits for one value of the ego target bias.
pub fn generate_datasets(cfg: &ExperimentConfig, eps_bias: f64) -> Result<Datasets> {
    cfg.validate()?;
    let gen = Generator {
        cfg,
        env: Mpe::new(cfg.env.clone())?,
        behavioural: cfg.behavioural_policies(),
        target: cfg.target_policies(eps_bias),
    };
    let (n_train, n_calib) = (cfg.n_train, cfg.n_calib);

    let train = (0..n_train)
        .into_par_iter()
        .map(|i| gen.continue_with(&gen.prefix(i)?, streams::BEHAVIOURAL, i, 0))
        .collect::<Result<Vec<_>>>()?;

    let calib = (n_train..n_train + n_calib)
        .into_par_iter()
        .map(|i| {
            let p = gen.prefix(i)?;
            Ok((
                gen.continue_with(&p, streams::BEHAVIOURAL, i, 0)?,
                gen.continue_with(&p, streams::TARGET, i, 0)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (calib_behavioural, calib_target) = calib.into_iter().unzip();

    let test = (n_train + n_calib..cfg.n_prefixes)
        .into_par_iter()
        .map(|i| {
            let p = gen.prefix(i)?;
            let conts = (0..cfg.mc_continuations)
                .map(|j| gen.continue_with(&p, streams::TARGET, i, j))
                .collect::<Result<Vec<_>>>()?;
            Ok((p, conts))
        })
        .collect::<Result<Vec<_>>>()?;
    let (test_prefixes, test_target) = test.into_iter().unzip();

    Ok(Datasets {
        eps_bias,
        train,
        calib_behavioural,
        calib_target,
        test_prefixes,
        test_target,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub id: u64,
    pub split: Split,
    pub role: Role,
    pub prefix: usize,
    pub continuation: usize,
    pub k: usize,
    pub m: usize,
    pub ego_agents: Vec<usize>,
    pub states: Vec<f64>,
    pub ego_actions: Vec<Action>,
    pub landmarks: Vec<[f64; 2]>,
}

impl TrajectoryRecord {
    pub fn from_trajectory(
        id: u64,
        split: Split,
        role: Role,
        prefix: usize,
        continuation: usize,
        traj: &Trajectory,
    ) -> Self {
        let first = &traj.states[0];
        let mut states = Vec::with_capacity(traj.len() * first.n_agents() * AGENT_DIM);
        for s in &traj.states {
            s.extend_agent_features(&mut states);
        }
        TrajectoryRecord {
            id,
            split,
            role,
            prefix,
            continuation,
            k: first.n_agents(),
            m: first.n_landmarks(),
            ego_agents: traj.ego_agents.clone(),
            states,
            ego_actions: traj.ego_actions.iter().flatten().copied().collect(),
            landmarks: first.landmarks.clone(),
        }
    }

    pub fn to_trajectory(&self) -> Result<Trajectory> {
        let per_state = self.k * AGENT_DIM;
        if self.k == 0 || !self.states.len().is_multiple_of(per_state) {
            return Err(Error::contract(format!(
                "record {}: state array does not match k = {}",
                self.id, self.k
            )));
        }
        if self.landmarks.len() != self.m {
            return Err(Error::contract(format!(
                "record {}: expected {} landmarks",
                self.id, self.m
            )));
        }
        let n_states = self.states.len() / per_state;
        let n_ego = self.ego_agents.len();
        if self.ego_actions.len() != n_states.saturating_sub(1) * n_ego {
            return Err(Error::contract(format!(
                "record {}: ego action count does not match states",
                self.id
            )));
        }
        let states = self
            .states
            .chunks(per_state)
            .map(|c| GlobalState {
                agents: c.chunks(AGENT_DIM).map(AgentState::from_slice).collect(),
                landmarks: self.landmarks.clone(),
            })
            .collect();
        let ego_actions = if n_ego == 0 {
            vec![Vec::new(); n_states.saturating_sub(1)]
        } else {
            self.ego_actions
                .chunks(n_ego)
                .map(<[Action]>::to_vec)
                .collect()
        };
        Ok(Trajectory {
            states,
            ego_agents: self.ego_agents.clone(),
            ego_actions,
        })
    }
}

pub fn write_records(path: &Path, records: &[TrajectoryRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::parse(path, e))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, format!("line {}: {e}", n + 1)))?;
        records.push(r);
    }
    Ok(records)
}

/// File names inside a data directory.
pub const TRAIN_FILE: &str = "train.jsonl";
pub const CALIB_FILE: &str = "calib.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const META_FILE: &str = "meta.json";

#[derive(Serialize, Deserialize)]
struct Meta {
    eps_bias: f64,
}

impl Datasets {
    /// Writes `train.jsonl`, `calib.jsonl`, `test.jsonl` and `meta.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta_path = dir.join(META_FILE);
        let meta = serde_json::to_string(&Meta {
            eps_bias: self.eps_bias,
        })
        .map_err(|e| Error::parse(&meta_path, e))?;
        fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
        let n_train = self.train.len();
        let n_calib = self.calib_behavioural.len();
        let mut id = 0u64;
        let mut next = || {
            id += 1;
            id - 1
        };

        let train: Vec<_> = self
            .train
            .iter()
            .enumerate()
            .map(|(i, t)| {
                TrajectoryRecord::from_trajectory(next(), Split::Train, Role::Behavioural, i, 0, t)
            })
            .collect();
        write_records(&dir.join(TRAIN_FILE), &train)?;

        let mut calib = Vec::with_capacity(2 * n_calib);
        for (i, (b, t)) in self
            .calib_behavioural
            .iter()
            .zip(&self.calib_target)
            .enumerate()
        {
            calib.push(TrajectoryRecord::from_trajectory(
                next(),
                Split::Calib,
                Role::Behavioural,
                n_train + i,
                0,
                b,
            ));
            calib.push(TrajectoryRecord::from_trajectory(
                next(),
                Split::Calib,
                Role::Target,
                n_train + i,
                0,
                t,
            ));
        }
        write_records(&dir.join(CALIB_FILE), &calib)?;

        let mut test = Vec::new();
        for (i, (p, conts)) in self.test_prefixes.iter().zip(&self.test_target).enumerate() {
            let global = n_train + n_calib + i;
            test.push(TrajectoryRecord::from_trajectory(
                next(),
                Split::Test,
                Role::Prefix,
                global,
                0,
                p,
            ));
            for (j, c) in conts.iter().enumerate() {
                test.push(TrajectoryRecord::from_trajectory(
                    next(),
                    Split::Test,
                    Role::Target,
                    global,
                    j,
                    c,
                ));
            }
        }
        write_records(&dir.join(TEST_FILE), &test)
    }

    /// Reads a data directory written by [`Datasets::write`].
    pub fn read(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let Meta { eps_bias } =
            serde_json::from_str(&text).map_err(|e| Error::parse(&meta_path, e))?;
        let convert = |records: Vec<TrajectoryRecord>,
                       role: Role|
         -> Result<Vec<(usize, usize, Trajectory)>> {
            records
                .into_iter()
                .filter(|r| r.role == role)
                .map(|r| Ok((r.prefix, r.continuation, r.to_trajectory()?)))
                .collect()
        };
        let train = convert(read_records(&dir.join(TRAIN_FILE))?, Role::Behavioural)?
            .into_iter()
            .map(|(_, _, t)| t)
            .collect();
        let calib = read_records(&dir.join(CALIB_FILE))?;
        let calib_behavioural: Vec<_> = convert(calib.clone(), Role::Behavioural)?
            .into_iter()
            .map(|(_, _, t)| t)
            .collect();
        let calib_target: Vec<_> = convert(calib, Role::Target)?
            .into_iter()
            .map(|(_, _, t)| t)
            .collect();
        if calib_behavioural.len() != calib_target.len() {
            return Err(Error::parse(
                dir.join(CALIB_FILE),
                "behavioural and target calibration counts differ",
            ));
        }

        let test = read_records(&dir.join(TEST_FILE))?;
        let prefixes = convert(test.clone(), Role::Prefix)?;
        let mut test_target: Vec<Vec<Trajectory>> = vec![Vec::new(); prefixes.len()];
        let index: std::collections::HashMap<usize, usize> = prefixes
            .iter()
            .enumerate()
            .map(|(i, (p, _, _))| (*p, i))
            .collect();
        for (p, _, t) in convert(test, Role::Target)? {
            let slot = index.get(&p).ok_or_else(|| {
                Error::parse(
                    dir.join(TEST_FILE),
                    format!("continuation for unknown prefix {p}"),
                )
            })?;
            test_target[*slot].push(t);
        }
        Ok(Datasets {
            eps_bias,
            train,
            calib_behavioural,
            calib_target,
            test_prefixes: prefixes.into_iter().map(|(_, _, t)| t).collect(),
            test_target,
        })
    }
}
