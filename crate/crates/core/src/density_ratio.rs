//! Exact target/behavioural density ratio of an ego action sequence.
//!
//! Once the prediction target is lifted to states plus ego actions, the
//! transition kernels and the non-ego policies cancel, and the ratio reduces
//! to
//!
//! ```text
//! w = Π_{t=H}^{T-1} Π_{e ∈ E} π*_e(a_{e,t} | x_t) / π^b_e(a_{e,t} | x_t)
//! ```
//!
//! which is accumulated in log space, time-major then by ego index.

use crate::env::{observe_exact, Action, GlobalState};
use crate::error::{Error, Result};
use crate::policy::Policy;

pub const DEFAULT_W_MAX: f64 = 1e12;

/// Ego actions for `steps` consecutive transitions, time-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EgoActionSequence {
    n_ego: usize,
    actions: Vec<Action>,
}

impl EgoActionSequence {
    pub fn new(n_ego: usize, actions: Vec<Action>) -> Result<Self> {
        if n_ego == 0 || !actions.len().is_multiple_of(n_ego) {
            return Err(Error::contract(format!(
                "{} actions do not split across {n_ego} ego agents",
                actions.len()
            )));
        }
        Ok(EgoActionSequence { n_ego, actions })
    }

    /// From per-step action records as stored in a [`crate::env::Trajectory`].
    pub fn from_records(records: &[Vec<Action>]) -> Result<Self> {
        let n_ego = records.first().map_or(1, Vec::len);
        if records.iter().any(|r| r.len() != n_ego) {
            return Err(Error::contract("ragged ego action records"));
        }
        Self::new(n_ego, records.iter().flatten().copied().collect())
    }

    pub fn steps(&self) -> usize {
        self.actions.len() / self.n_ego
    }

    pub fn n_ego(&self) -> usize {
        self.n_ego
    }

    pub fn at(&self, t: usize) -> &[Action] {
        &self.actions[t * self.n_ego..(t + 1) * self.n_ego]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LogDensityRatio(f64);

impl LogDensityRatio {
    pub const ZERO: LogDensityRatio = LogDensityRatio(0.0);

    pub fn new(log_w: f64) -> Result<Self> {
        if log_w.is_nan() || log_w == f64::INFINITY {
            return Err(Error::contract(format!(
                "invalid log density ratio {log_w}"
            )));
        }
        Ok(LogDensityRatio(log_w))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Adds one ego agent's contribution at one step.
    pub(crate) fn accumulate(&mut self, term: f64) {
        self.0 += term;
    }

    /// `exp(log_w)` capped at `w_max`. Returns the ratio and whether the cap
    /// was hit.
    pub fn to_ratio(self, w_max: f64) -> (f64, bool) {
        if self.0 > w_max.ln() {
            (w_max, true)
        } else {
            (self.0.exp(), false)
        }
    }
}

/// `ln π*(a|x) - ln π^b(a|x)` for one ego agent in one state.
pub fn log_ratio_term<B, P>(
    state: &GlobalState,
    ego: usize,
    action: Action,
    behavioural: &B,
    target: &P,
) -> Result<f64>
where
    B: Policy + ?Sized,
    P: Policy + ?Sized,
{
    let obs = observe_exact(state, ego);
    let pb = behavioural.pmf(&obs).prob(action);
    if pb <= 0.0 {
        return Err(Error::contract(format!(
            "behavioural policy of agent {ego} gives zero probability to `{action}`"
        )));
    }
    let pt = target.pmf(&obs).prob(action);
    Ok(pt.ln() - pb.ln())
}

/// Log density ratio of `ego_actions` taken in `states` (one state per step).
///
/// `behavioural[e]` and `target[e]` are the policies of ego agent
/// `ego_agents[e]`.
pub fn log_density_ratio<B, P>(
    states: &[GlobalState],
    ego_actions: &EgoActionSequence,
    ego_agents: &[usize],
    behavioural: &[&B],
    target: &[&P],
) -> Result<LogDensityRatio>
where
    B: Policy + ?Sized,
    P: Policy + ?Sized,
{
    if states.len() != ego_actions.steps() {
        return Err(Error::contract(format!(
            "{} states for {} action steps",
            states.len(),
            ego_actions.steps()
        )));
    }
    let n_ego = ego_actions.n_ego();
    if ego_agents.len() != n_ego || behavioural.len() != n_ego || target.len() != n_ego {
        return Err(Error::contract(
            "ego agent, policy and action counts disagree",
        ));
    }
    let mut log_w = LogDensityRatio::ZERO;
    for (t, state) in states.iter().enumerate() {
        for (e, &action) in ego_actions.at(t).iter().enumerate() {
            log_w.accumulate(log_ratio_term(
                state,
                ego_agents[e],
                action,
                behavioural[e],
                target[e],
            )?);
        }
    }
    LogDensityRatio::new(log_w.value())
}

/// Linear-space density ratio, saturating at `w_max`.
pub fn density_ratio(log_w: LogDensityRatio, w_max: f64) -> f64 {
    let (w, capped) = log_w.to_ratio(w_max);
    if capped {
        log::warn!(
            "density ratio exp({:.3}) exceeds cap {w_max:e}; saturating",
            log_w.value()
        );
    }
    w
}
