//! Multi-particle environment.
//!
//! `K` point agents move in the plane among `M` static landmarks. Each agent
//! picks one of five discrete actions per step; an action adds a fixed
//! acceleration to the velocity, and the position integrates the velocity
//! from before the update plus Gaussian actuation noise:
//!
//! ```text
//! pos' = pos + vel + N(0, sigma_act^2 I)
//! vel' = vel + accel * u(action)
//! ```
//!
//! Agents observe their own position and velocity exactly, the landmarks
//! exactly, and the other agents' positions through Gaussian sensor noise.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Policy;

pub type Vec2 = [f64; 2];

/// Per-agent state dimension (position and velocity).
pub const AGENT_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Left,
    Right,
    Up,
    Down,
    Nothing,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; Action::COUNT] = [
        Action::Left,
        Action::Right,
        Action::Up,
        Action::Down,
        Action::Nothing,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Action::ALL
            .get(index)
            .copied()
            .ok_or_else(|| Error::contract(format!("unknown action id {index}")))
    }

    pub fn unit(self) -> Vec2 {
        match self {
            Action::Left => [-1.0, 0.0],
            Action::Right => [1.0, 0.0],
            Action::Up => [0.0, 1.0],
            Action::Down => [0.0, -1.0],
            Action::Nothing => [0.0, 0.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Left => "left",
            Action::Right => "right",
            Action::Up => "up",
            Action::Down => "down",
            Action::Nothing => "nothing",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Action::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown action `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentState {
    pub pos: Vec2,
    pub vel: Vec2,
}

impl AgentState {
    pub fn to_array(&self) -> [f64; AGENT_DIM] {
        [self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        AgentState {
            pos: [v[0], v[1]],
            vel: [v[2], v[3]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    pub agents: Vec<AgentState>,
    pub landmarks: Vec<Vec2>,
}

impl GlobalState {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn n_landmarks(&self) -> usize {
        self.landmarks.len()
    }

    /// Appends agent positions and velocities (agent-major) to `out`.
    pub fn extend_agent_features(&self, out: &mut Vec<f64>) {
        for a in &self.agents {
            out.extend_from_slice(&a.to_array());
        }
    }

    pub fn extend_landmark_features(&self, out: &mut Vec<f64>) {
        for l in &self.landmarks {
            out.extend_from_slice(l);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    /// Number of agents.
    pub k: usize,
    /// Number of landmarks.
    pub m: usize,
    /// Acceleration magnitude applied by a cardinal action.
    pub accel: f64,
    pub sigma_act: f64,
    pub sigma_sensor: f64,
    pub arena_half_width: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            k: 3,
            m: 3,
            accel: 0.5,
            sigma_act: 0.02,
            sigma_sensor: 0.05,
            arena_half_width: 1.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("env.k must be at least 1"));
        }
        if !(self.accel > 0.0 && self.accel.is_finite()) {
            return Err(Error::config("env.accel must be positive"));
        }
        if !(self.sigma_act >= 0.0 && self.sigma_act.is_finite()) {
            return Err(Error::config("env.sigma_act must be non-negative"));
        }
        if !(self.sigma_sensor >= 0.0 && self.sigma_sensor.is_finite()) {
            return Err(Error::config("env.sigma_sensor must be non-negative"));
        }
        if !(self.arena_half_width > 0.0 && self.arena_half_width.is_finite()) {
            return Err(Error::config("env.arena_half_width must be positive"));
        }
        Ok(())
    }

    /// Length of one agent's observation vector.
    pub fn observation_len(&self) -> usize {
        AGENT_DIM + 2 * (self.k - 1) + 2 * self.m
    }
}

/// One agent's view of the world.
///
/// Layout: own `[px, py, vx, vy]`, then the positions of the other agents in
/// index order, then the landmark positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    data: Vec<f64>,
    k: usize,
    m: usize,
}

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn own_pos(&self) -> Vec2 {
        [self.data[0], self.data[1]]
    }

    pub fn own_vel(&self) -> Vec2 {
        [self.data[2], self.data[3]]
    }

    pub fn n_others(&self) -> usize {
        self.k - 1
    }

    pub fn other_pos(&self, j: usize) -> Vec2 {
        let o = AGENT_DIM + 2 * j;
        [self.data[o], self.data[o + 1]]
    }

    pub fn n_landmarks(&self) -> usize {
        self.m
    }

    pub fn landmark(&self, j: usize) -> Vec2 {
        let o = AGENT_DIM + 2 * (self.k - 1) + 2 * j;
        [self.data[o], self.data[o + 1]]
    }
}

/// A realised trajectory: global states plus the actions of the ego agents.
///
/// `ego_actions[t][e]` is the action ego agent `ego_agents[e]` took in
/// `states[t]`, so there is one fewer action record than states.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<GlobalState>,
    pub ego_agents: Vec<usize>,
    pub ego_actions: Vec<Vec<Action>>,
}

impl Trajectory {
    pub fn from_initial(state: GlobalState, ego_agents: Vec<usize>) -> Self {
        Trajectory {
            states: vec![state],
            ego_agents,
            ego_actions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// First `len` states with their ego actions.
    pub fn truncated(&self, len: usize) -> Trajectory {
        let len = len.min(self.states.len());
        Trajectory {
            states: self.states[..len].to_vec(),
            ego_agents: self.ego_agents.clone(),
            ego_actions: self.ego_actions[..len.saturating_sub(1)].to_vec(),
        }
    }
}

fn gaussian(sigma: f64) -> Option<Normal<f64>> {
    (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"))
}

#[derive(Debug, Clone)]
pub struct Mpe {
    cfg: EnvConfig,
    act_noise: Option<Normal<f64>>,
    sensor_noise: Option<Normal<f64>>,
}

impl Mpe {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Mpe {
            act_noise: gaussian(cfg.sigma_act),
            sensor_noise: gaussian(cfg.sigma_sensor),
            cfg,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    /// Agents and landmarks uniform in the arena square, agents at rest.
    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> GlobalState {
        let w = self.cfg.arena_half_width;
        let point = |rng: &mut R| [rng.random_range(-w..=w), rng.random_range(-w..=w)];
        let agents = (0..self.cfg.k)
            .map(|_| AgentState {
                pos: point(rng),
                vel: [0.0, 0.0],
            })
            .collect();
        let landmarks = (0..self.cfg.m).map(|_| point(rng)).collect();
        GlobalState { agents, landmarks }
    }

    /// Advances a single agent.
    pub fn step_agent<R: Rng + ?Sized>(
        &self,
        agent: &AgentState,
        action: Action,
        rng: &mut R,
    ) -> AgentState {
        let mut pos = [agent.pos[0] + agent.vel[0], agent.pos[1] + agent.vel[1]];
        if let Some(noise) = &self.act_noise {
            pos[0] += noise.sample(rng);
            pos[1] += noise.sample(rng);
        }
        let u = action.unit();
        AgentState {
            pos,
            vel: [
                agent.vel[0] + self.cfg.accel * u[0],
                agent.vel[1] + self.cfg.accel * u[1],
            ],
        }
    }

    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &GlobalState,
        actions: &[Action],
        rng: &mut R,
    ) -> Result<GlobalState> {
        if actions.len() != state.agents.len() {
            return Err(Error::contract(format!(
                "expected {} actions, got {}",
                state.agents.len(),
                actions.len()
            )));
        }
        let agents = state
            .agents
            .iter()
            .zip(actions)
            .map(|(a, &act)| self.step_agent(a, act, rng))
            .collect();
        Ok(GlobalState {
            agents,
            landmarks: state.landmarks.clone(),
        })
    }

    /// Noisy observation for `agent`.
    pub fn observe<R: Rng + ?Sized>(
        &self,
        state: &GlobalState,
        agent: usize,
        rng: &mut R,
    ) -> Observation {
        let mut obs = observe_exact(state, agent);
        if let Some(noise) = &self.sensor_noise {
            let start = AGENT_DIM;
            let end = start + 2 * (state.n_agents() - 1);
            for v in &mut obs.data[start..end] {
                *v += noise.sample(rng);
            }
        }
        obs
    }

    /// Extends `traj` to `horizon` states. Every agent acts according to
    /// `policies[k]` on its own (noisy) observation.
    pub fn rollout<P: Policy + ?Sized, R: Rng + ?Sized>(
        &self,
        mut traj: Trajectory,
        policies: &[&P],
        horizon: usize,
        rng: &mut R,
    ) -> Result<Trajectory> {
        if policies.len() != self.cfg.k {
            return Err(Error::contract(format!(
                "need one policy per agent ({}), got {}",
                self.cfg.k,
                policies.len()
            )));
        }
        let Some(mut state) = traj.states.last().cloned() else {
            return Err(Error::contract("rollout needs a non-empty start"));
        };
        let mut actions = Vec::with_capacity(self.cfg.k);
        while traj.states.len() < horizon {
            actions.clear();
            for (k, policy) in policies.iter().enumerate() {
                let obs = self.observe(&state, k, rng);
                actions.push(policy.pmf(&obs).sample(rng));
            }
            traj.ego_actions
                .push(traj.ego_agents.iter().map(|&e| actions[e]).collect());
            state = self.step(&state, &actions, rng)?;
            traj.states.push(state.clone());
        }
        Ok(traj)
    }
}

/// Observation without sensor noise.
pub fn observe_exact(state: &GlobalState, agent: usize) -> Observation {
    let k = state.n_agents();
    let m = state.n_landmarks();
    let mut data = Vec::with_capacity(AGENT_DIM + 2 * (k - 1) + 2 * m);
    data.extend_from_slice(&state.agents[agent].to_array());
    for (j, other) in state.agents.iter().enumerate() {
        if j != agent {
            data.extend_from_slice(&other.pos);
        }
    }
    state.extend_landmark_features(&mut data);
    Observation { data, k, m }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicySpec;
    use crate::rng::stream;

    fn quiet() -> Mpe {
        Mpe::new(EnvConfig {
            sigma_act: 0.0,
            sigma_sensor: 0.0,
            ..EnvConfig::default()
        })
        .unwrap()
    }

    fn single(pos: Vec2, vel: Vec2) -> GlobalState {
        GlobalState {
            agents: vec![AgentState { pos, vel }],
            landmarks: vec![],
        }
    }

    #[test]
    fn initial_state_in_arena_and_at_rest() {
        let env = Mpe::new(EnvConfig::default()).unwrap();
        let mut rng = stream(1, 0);
        for _ in 0..100 {
            let s = env.sample_initial(&mut rng);
            assert_eq!(s.n_agents(), 3);
            assert_eq!(s.n_landmarks(), 3);
            for a in &s.agents {
                assert!(a.pos.iter().all(|c| c.abs() <= 1.0));
                assert_eq!(a.vel, [0.0, 0.0]);
            }
            assert!(s.landmarks.iter().flatten().all(|c| c.abs() <= 1.0));
        }
        let a = env.sample_initial(&mut stream(9, 9));
        let b = env.sample_initial(&mut stream(9, 9));
        assert_eq!(a, b);
    }

    #[test]
    fn noise_free_step() {
        let env = quiet();
        let mut rng = stream(0, 0);
        let s = single([0.3, -0.2], [0.1, 0.05]);
        let n = env.step(&s, &[Action::Nothing], &mut rng).unwrap();
        assert_eq!(n.agents[0].pos, [0.4, -0.15000000000000002]);
        assert_eq!(n.agents[0].vel, [0.1, 0.05]);

        let s = single([0.0, 0.0], [0.0, 0.0]);
        let n = env.step(&s, &[Action::Up], &mut rng).unwrap();
        assert_eq!(n.agents[0].pos, [0.0, 0.0]);
        assert_eq!(n.agents[0].vel, [0.0, 0.5]);
        let n2 = env.step(&n, &[Action::Up], &mut rng).unwrap();
        assert_eq!(n2.agents[0].pos, [0.0, 0.5]);
        assert_eq!(n2.agents[0].vel, [0.0, 1.0]);
    }

    #[test]
    fn step_rejects_wrong_action_count() {
        let env = quiet();
        let s = single([0.0, 0.0], [0.0, 0.0]);
        assert!(matches!(
            env.step(&s, &[Action::Up, Action::Up], &mut stream(0, 0)),
            Err(Error::Contract(_))
        ));
        assert!(Action::from_index(5).is_err());
        assert!("sideways".parse::<Action>().is_err());
        assert_eq!("down".parse::<Action>().unwrap(), Action::Down);
    }

    #[test]
    fn observation_layout() {
        let env = quiet();
        let s = env.sample_initial(&mut stream(3, 0));
        let obs = env.observe(&s, 1, &mut stream(3, 1));
        assert_eq!(obs.len(), 4 + 2 * 2 + 2 * 3);
        assert_eq!(obs.len(), env.config().observation_len());
        assert_eq!(obs.own_pos(), s.agents[1].pos);
        assert_eq!(obs.other_pos(0), s.agents[0].pos);
        assert_eq!(obs.other_pos(1), s.agents[2].pos);
        assert_eq!(obs.landmark(2), s.landmarks[2]);
        assert_eq!(obs, observe_exact(&s, 1));
    }

    #[test]
    fn sensor_noise_only_touches_other_agents() {
        let env = Mpe::new(EnvConfig::default()).unwrap();
        let s = env.sample_initial(&mut stream(4, 0));
        let mut rng = stream(4, 1);
        let n = 10_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let obs = env.observe(&s, 0, &mut rng);
            assert_eq!(obs.own_pos(), s.agents[0].pos);
            assert_eq!(obs.own_vel(), s.agents[0].vel);
            assert_eq!(obs.landmark(0), s.landmarks[0]);
            let d = obs.other_pos(0)[0] - s.agents[1].pos[0];
            sum += d;
            sum_sq += d * d;
        }
        let mean = sum / n as f64;
        let std = (sum_sq / n as f64 - mean * mean).sqrt();
        assert!((std - 0.05).abs() / 0.05 < 0.05, "std {std}");
    }

    #[test]
    fn rollout_shapes_and_landmarks() {
        let env = Mpe::new(EnvConfig::default()).unwrap();
        let spec = PolicySpec::behavioural();
        let policies = vec![&spec; 3];
        let mut rng = stream(5, 0);
        let init = Trajectory::from_initial(env.sample_initial(&mut rng), vec![0]);
        let one = env.rollout(init.clone(), &policies, 1, &mut rng).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one.ego_actions.is_empty());

        let traj = env.rollout(init, &policies, 12, &mut rng).unwrap();
        assert_eq!(traj.len(), 12);
        assert_eq!(traj.ego_actions.len(), 11);
        assert!(traj.ego_actions.iter().all(|a| a.len() == 1));
        let l0 = &traj.states[0].landmarks;
        assert!(traj.states.iter().all(|s| &s.landmarks == l0));
    }

    #[test]
    fn deterministic_rollout_is_reproducible() {
        let env = quiet();
        let spec = PolicySpec::greedy();
        let policies = vec![&spec; 3];
        let run = || {
            let mut rng = stream(6, 0);
            let init = Trajectory::from_initial(env.sample_initial(&mut rng), vec![0]);
            env.rollout(init, &policies, 10, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }
}
