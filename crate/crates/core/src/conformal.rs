//! Nonconformity scores, (weighted) calibration distributions and the
//! max-DR prediction region.
//!
//! The calibration distribution places mass `w_i / (W + w_test)` on each
//! calibration score `s_i` and the remaining `w_test / (W + w_test)` on `+∞`,
//! the unknown test score. The critical value is the smallest score whose
//! cumulative mass reaches `1 - α`; if the finite scores never get there the
//! quantile is the `+∞` atom and the region is unbounded.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::env::{GlobalState, AGENT_DIM};
use crate::error::{Error, Result};

/// Relative slack on the `≥ 1 - α` mass comparison. Absorbs rounding in the
/// cumulative sums so that exact rational boundaries (e.g. 19/20 = 0.95)
/// resolve to the weak inequality.
pub const MASS_TOL: f64 = 1e-12;

/// Which per-agent coordinates enter the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreDims {
    #[default]
    PositionsAndVelocities,
    Positions,
}

impl ScoreDims {
    pub fn per_agent(self) -> usize {
        match self {
            ScoreDims::PositionsAndVelocities => AGENT_DIM,
            ScoreDims::Positions => 2,
        }
    }

    /// Selects the scored components from a full `[px, py, vx, vy]`-per-agent
    /// vector.
    pub fn select(self, full: &[f64]) -> Vec<f64> {
        match self {
            ScoreDims::PositionsAndVelocities => full.to_vec(),
            ScoreDims::Positions => full.chunks(AGENT_DIM).flat_map(|c| [c[0], c[1]]).collect(),
        }
    }
}

/// A suffix trajectory laid out as `steps × dim` (row-major), where `dim`
/// covers all agents.
#[derive(Debug, Clone, PartialEq)]
pub struct Suffix {
    steps: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Suffix {
    pub fn new(steps: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != steps * dim {
            return Err(Error::contract(format!(
                "suffix of {steps}x{dim} needs {} values, got {}",
                steps * dim,
                data.len()
            )));
        }
        Ok(Suffix { steps, dim, data })
    }

    pub fn from_states(states: &[GlobalState], dims: ScoreDims) -> Self {
        let k = states.first().map_or(0, GlobalState::n_agents);
        let dim = k * dims.per_agent();
        let mut data = Vec::with_capacity(states.len() * dim);
        for s in states {
            for a in &s.agents {
                match dims {
                    ScoreDims::PositionsAndVelocities => data.extend_from_slice(&a.to_array()),
                    ScoreDims::Positions => data.extend_from_slice(&a.pos),
                }
            }
        }
        Suffix {
            steps: states.len(),
            dim,
            data,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Per-step score weights γ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaRule {
    /// γ_t = 1 / (t - H), i.e. 1, 1/2, 1/3, ...
    #[default]
    InverseStep,
    Uniform,
}

impl GammaRule {
    pub fn gammas(self, steps: usize) -> Vec<f64> {
        match self {
            GammaRule::InverseStep => (1..=steps).map(|j| 1.0 / j as f64).collect(),
            GammaRule::Uniform => vec![1.0; steps],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Score(f64);

impl Score {
    pub fn new(value: f64) -> Result<Self> {
        if value >= 0.0 && value.is_finite() {
            Ok(Score(value))
        } else {
            Err(Error::contract(format!(
                "score must be finite and >= 0, got {value}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

fn check_scaling(gammas: &[f64], sigma: &[f64], steps: usize, dim: usize) -> Result<()> {
    if gammas.len() != steps {
        return Err(Error::contract(format!(
            "{} gammas for {steps} suffix steps",
            gammas.len()
        )));
    }
    if sigma.len() != dim {
        return Err(Error::contract(format!(
            "{} sigma entries for dimension {dim}",
            sigma.len()
        )));
    }
    if gammas.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
        return Err(Error::config("gammas must be positive"));
    }
    if sigma.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::config("sigma must be positive"));
    }
    Ok(())
}

/// Time-series nonconformity score: `max_t γ_t ‖(prediction_t - candidate_t) / σ‖₂`.
pub fn score(
    prediction: &Suffix,
    candidate: &Suffix,
    gammas: &[f64],
    sigma: &[f64],
) -> Result<Score> {
    if prediction.steps != candidate.steps || prediction.dim != candidate.dim {
        return Err(Error::contract(format!(
            "prediction is {}x{}, candidate is {}x{}",
            prediction.steps, prediction.dim, candidate.steps, candidate.dim
        )));
    }
    check_scaling(gammas, sigma, prediction.steps, prediction.dim)?;
    Ok(score_unchecked(prediction, candidate, gammas, sigma))
}

fn score_unchecked(
    prediction: &Suffix,
    candidate: &Suffix,
    gammas: &[f64],
    sigma: &[f64],
) -> Score {
    let mut worst: f64 = 0.0;
    for (t, gamma) in gammas.iter().enumerate() {
        let sq: f64 = prediction
            .step(t)
            .iter()
            .zip(candidate.step(t))
            .zip(sigma)
            .map(|((p, c), s)| {
                let r = (p - c) / s;
                r * r
            })
            .sum();
        worst = worst.max(gamma * sq.sqrt());
    }
    Score(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub score: f64,
    pub weight: f64,
}

/// Calibration scores with their density-ratio weights, kept sorted by score
/// with running weight totals.
#[derive(Debug, Clone)]
pub struct WeightedCalibrationSet {
    records: Vec<CalibrationRecord>,
    cumulative: Vec<f64>,
    sum_weights: f64,
}

impl WeightedCalibrationSet {
    pub fn new(mut records: Vec<CalibrationRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::contract("calibration set is empty"));
        }
        for r in &records {
            Score::new(r.score)?;
            if !(r.weight > 0.0 && r.weight.is_finite()) {
                return Err(Error::contract(format!(
                    "calibration weight must be positive and finite, got {}",
                    r.weight
                )));
            }
        }
        records.sort_by(|a, b| a.score.total_cmp(&b.score));
        let mut cumulative = Vec::with_capacity(records.len());
        let mut acc = 0.0;
        for r in &records {
            acc += r.weight;
            cumulative.push(acc);
        }
        Ok(WeightedCalibrationSet {
            records,
            cumulative,
            sum_weights: acc,
        })
    }

    /// Unit weight on every score.
    pub fn uniform(scores: impl IntoIterator<Item = f64>) -> Result<Self> {
        Self::new(
            scores
                .into_iter()
                .map(|score| CalibrationRecord { score, weight: 1.0 })
                .collect(),
        )
    }

    /// Records in ascending score order.
    pub fn records(&self) -> &[CalibrationRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn sum_weights(&self) -> f64 {
        self.sum_weights
    }

    /// The shared weight if every record carries the same one.
    pub fn common_weight(&self) -> Option<f64> {
        let w = self.records[0].weight;
        self.records.iter().all(|r| r.weight == w).then_some(w)
    }
}

/// A (1 - α)-quantile of a calibration distribution with a `+∞` atom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CriticalValue {
    Finite(f64),
    Infinite,
}

impl CriticalValue {
    pub fn is_infinite(self) -> bool {
        matches!(self, CriticalValue::Infinite)
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            CriticalValue::Finite(v) => Some(v),
            CriticalValue::Infinite => None,
        }
    }

    pub fn admits(self, score: Score) -> bool {
        match self {
            CriticalValue::Finite(v) => score.value() <= v,
            CriticalValue::Infinite => true,
        }
    }
}

impl PartialOrd for CriticalValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        use CriticalValue::*;
        match (self, other) {
            (Finite(a), Finite(b)) => a.partial_cmp(b),
            (Finite(_), Infinite) => Some(Ordering::Less),
            (Infinite, Finite(_)) => Some(Ordering::Greater),
            (Infinite, Infinite) => Some(Ordering::Equal),
        }
    }
}

impl fmt::Display for CriticalValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CriticalValue::Finite(v) => write!(f, "{v}"),
            CriticalValue::Infinite => f.write_str("inf"),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!(
            "alpha must be in (0, 1), got {alpha}"
        )))
    }
}

/// Quantile of the calibration distribution reweighted for a test point of
/// weight `test_weight`.
pub fn weighted_quantile(
    calib: &WeightedCalibrationSet,
    test_weight: f64,
    alpha: f64,
) -> Result<CriticalValue> {
    check_alpha(alpha)?;
    if !(test_weight > 0.0 && test_weight.is_finite()) {
        return Err(Error::contract(format!(
            "test weight must be positive and finite, got {test_weight}"
        )));
    }
    let total = calib.sum_weights + test_weight;
    let threshold = ((1.0 - alpha) - MASS_TOL) * total;
    let idx = calib.cumulative.partition_point(|&c| c < threshold);
    Ok(match calib.records.get(idx) {
        Some(r) => CriticalValue::Finite(r.score),
        None => CriticalValue::Infinite,
    })
}

/// Unweighted split-conformal quantile: the ⌈(1-α)(n+1)⌉-th smallest score.
pub fn standard_quantile(calib: &WeightedCalibrationSet, alpha: f64) -> Result<CriticalValue> {
    let w = calib
        .common_weight()
        .ok_or_else(|| Error::contract("standard quantile needs equal calibration weights"))?;
    weighted_quantile(calib, w, alpha)
}

/// An implicitly represented joint prediction region: every suffix whose
/// score against `center` does not exceed the critical value obtained by
/// reweighting the calibration set once with `w_top`.
#[derive(Debug, Clone)]
pub struct MaxDrRegion {
    center: Suffix,
    critical_value: CriticalValue,
    gammas: Vec<f64>,
    sigma: Vec<f64>,
    alpha: f64,
    w_top: f64,
}

impl MaxDrRegion {
    pub fn build(
        center: Suffix,
        calib: &WeightedCalibrationSet,
        w_top: f64,
        gammas: Vec<f64>,
        sigma: Vec<f64>,
        alpha: f64,
    ) -> Result<Self> {
        check_scaling(&gammas, &sigma, center.steps, center.dim)?;
        let critical_value = weighted_quantile(calib, w_top, alpha)?;
        Ok(MaxDrRegion {
            center,
            critical_value,
            gammas,
            sigma,
            alpha,
            w_top,
        })
    }

    /// Standard (unweighted) region for an equal-weight calibration set.
    pub fn standard(
        center: Suffix,
        calib: &WeightedCalibrationSet,
        gammas: Vec<f64>,
        sigma: Vec<f64>,
        alpha: f64,
    ) -> Result<Self> {
        let w = calib
            .common_weight()
            .ok_or_else(|| Error::contract("standard region needs equal calibration weights"))?;
        Self::build(center, calib, w, gammas, sigma, alpha)
    }

    pub fn center(&self) -> &Suffix {
        &self.center
    }

    pub fn critical_value(&self) -> CriticalValue {
        self.critical_value
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn w_top(&self) -> f64 {
        self.w_top
    }

    pub fn is_unbounded(&self) -> bool {
        self.critical_value.is_infinite()
    }

    pub fn score(&self, candidate: &Suffix) -> Result<Score> {
        score(&self.center, candidate, &self.gammas, &self.sigma)
    }

    pub fn contains(&self, candidate: &Suffix) -> Result<bool> {
        Ok(self.critical_value.admits(self.score(candidate)?))
    }

    /// Per-step radius `critical_value / γ_t` of the normalised-residual ball.
    pub fn radii(&self) -> Option<Vec<f64>> {
        let cv = self.critical_value.finite()?;
        Some(self.gammas.iter().map(|g| cv / g).collect())
    }

    /// Membership test over state-only suffixes.
    pub fn project(&self) -> StateRegion<'_> {
        StateRegion { region: self }
    }

    /// Membership of an augmented suffix (states plus ego actions). The score
    /// ignores actions, so only the state part matters.
    pub fn contains_augmented<A>(&self, states: &Suffix, _ego_actions: &[A]) -> Result<bool> {
        self.contains(states)
    }
}

/// Projection of a [`MaxDrRegion`] onto the state components.
#[derive(Debug, Clone, Copy)]
pub struct StateRegion<'a> {
    region: &'a MaxDrRegion,
}

impl StateRegion<'_> {
    pub fn contains(&self, states: &Suffix) -> Result<bool> {
        self.region.contains(states)
    }
}
