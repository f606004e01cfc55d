//! Stochastic discrete policies with exactly evaluable action pmfs.
//!
//! The base rule is a scripted greedy controller that heads for the nearest
//! landmark. Stochasticity comes from ε-greedy randomisation, and a policy
//! shift is expressed as a mixture with a fixed "bias" action:
//!
//! ```text
//! p_greedy(a) = 1 - eps_greedy            if a is the greedy action
//!             = eps_greedy / (|A| - 1)    otherwise
//! p(a)        = eps_bias * [a == bias] + (1 - eps_bias) * p_greedy(a)
//! ```

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Observation};
use crate::error::{Error, Result};

pub const DEFAULT_CAPTURE_RADIUS: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionPmf([f64; Action::COUNT]);

impl ActionPmf {
    pub fn new(probs: [f64; Action::COUNT]) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::contract(format!("invalid probabilities {probs:?}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::contract(format!("pmf sums to {total}")));
        }
        Ok(ActionPmf(probs))
    }

    pub fn deterministic(action: Action) -> Self {
        let mut p = [0.0; Action::COUNT];
        p[action.index()] = 1.0;
        ActionPmf(p)
    }

    pub fn uniform() -> Self {
        ActionPmf([1.0 / Action::COUNT as f64; Action::COUNT])
    }

    pub fn prob(&self, action: Action) -> f64 {
        self.0[action.index()]
    }

    pub fn probs(&self) -> &[f64; Action::COUNT] {
        &self.0
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Action {
        let idx = WeightedIndex::new(self.0).expect("pmf has positive mass");
        Action::ALL[idx.sample(rng)]
    }
}

/// A policy whose action distribution can be evaluated exactly.
pub trait Policy: Sync {
    fn pmf(&self, obs: &Observation) -> ActionPmf;

    fn sample<R: Rng + ?Sized>(&self, obs: &Observation, rng: &mut R) -> Action
    where
        Self: Sized,
    {
        self.pmf(obs).sample(rng)
    }
}

/// Nearest-landmark greedy action.
///
/// Picks the cardinal action best aligned with the direction to the closest
/// landmark, or `Nothing` once inside `capture_radius` (or when there are no
/// landmarks). Ties keep the first action in `left, right, up, down` order.
pub fn base_action(obs: &Observation, capture_radius: f64) -> Action {
    let pos = obs.own_pos();
    let nearest = (0..obs.n_landmarks())
        .map(|j| {
            let l = obs.landmark(j);
            [l[0] - pos[0], l[1] - pos[1]]
        })
        .min_by(|a, b| {
            let da = a[0] * a[0] + a[1] * a[1];
            let db = b[0] * b[0] + b[1] * b[1];
            da.total_cmp(&db)
        });
    let Some(d) = nearest else {
        return Action::Nothing;
    };
    if (d[0] * d[0] + d[1] * d[1]).sqrt() <= capture_radius {
        return Action::Nothing;
    }
    let mut best = Action::Left;
    let mut best_dot = f64::NEG_INFINITY;
    for a in [Action::Left, Action::Right, Action::Up, Action::Down] {
        let u = a.unit();
        let dot = u[0] * d[0] + u[1] * d[1];
        if dot > best_dot {
            best = a;
            best_dot = dot;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub eps_greedy: f64,
    #[serde(default)]
    pub eps_bias: f64,
    #[serde(default = "default_bias_action")]
    pub bias_action: Action,
    #[serde(default = "default_capture_radius")]
    pub capture_radius: f64,
}

fn default_bias_action() -> Action {
    Action::Down
}

fn default_capture_radius() -> f64 {
    DEFAULT_CAPTURE_RADIUS
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec::behavioural()
    }
}

impl PolicySpec {
    /// ε-greedy with ε = 0.1 and no bias.
    pub fn behavioural() -> Self {
        PolicySpec {
            eps_greedy: 0.1,
            eps_bias: 0.0,
            bias_action: Action::Down,
            capture_radius: DEFAULT_CAPTURE_RADIUS,
        }
    }

    /// Behavioural policy shifted towards `down` with weight `eps_bias`.
    pub fn biased(eps_bias: f64) -> Self {
        PolicySpec {
            eps_bias,
            ..PolicySpec::behavioural()
        }
    }

    /// Fully deterministic greedy controller.
    pub fn greedy() -> Self {
        PolicySpec {
            eps_greedy: 0.0,
            ..PolicySpec::behavioural()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.eps_greedy) {
            return Err(Error::config(format!(
                "eps_greedy must be in [0, 1), got {}",
                self.eps_greedy
            )));
        }
        if !(0.0..1.0).contains(&self.eps_bias) {
            return Err(Error::config(format!(
                "eps_bias must be in [0, 1), got {}",
                self.eps_bias
            )));
        }
        if !(self.capture_radius >= 0.0 && self.capture_radius.is_finite()) {
            return Err(Error::config("capture_radius must be non-negative"));
        }
        Ok(())
    }

    pub fn pmf_for_greedy(&self, greedy: Action) -> ActionPmf {
        let other = self.eps_greedy / (Action::COUNT - 1) as f64;
        let mut p = [0.0; Action::COUNT];
        for a in Action::ALL {
            let p_greedy = if a == greedy {
                1.0 - self.eps_greedy
            } else {
                other
            };
            let bias = if a == self.bias_action {
                self.eps_bias
            } else {
                0.0
            };
            p[a.index()] = bias + (1.0 - self.eps_bias) * p_greedy;
        }
        ActionPmf(p)
    }
}

impl Policy for PolicySpec {
    fn pmf(&self, obs: &Observation) -> ActionPmf {
        self.pmf_for_greedy(base_action(obs, self.capture_radius))
    }
}
