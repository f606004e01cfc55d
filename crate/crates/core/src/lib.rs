//! Conformal off-policy prediction of multi-agent trajectories.
//!
//! A predictor trained on behavioural data forecasts the joint suffix of all
//! agents from an observed prefix. Calibration scores are reweighted by the
//! density ratio between the ego agents' target and behavioural policies, and
//! the region for a test prefix uses the largest ratio found by sampling
//! candidate suffixes from a (synthetic or true) target process.

pub mod conformal;
pub mod density_ratio;
pub mod env;
pub mod error;
pub mod harness;
pub mod policy;
pub mod predictor;
pub mod ridge;
pub mod rng;
pub mod synthetic;

pub use conformal::{
    score, standard_quantile, weighted_quantile, CalibrationRecord, CriticalValue, GammaRule,
    MaxDrRegion, Score, ScoreDims, Suffix, WeightedCalibrationSet,
};
pub use density_ratio::{density_ratio, log_density_ratio, EgoActionSequence, LogDensityRatio};
pub use env::{Action, AgentState, EnvConfig, GlobalState, Mpe, Observation, Trajectory};
pub use error::{Error, Result};
pub use policy::{ActionPmf, Policy, PolicySpec};
pub use predictor::PredictorModel;
pub use synthetic::{estimate_max_dr, MaxDrEstimate, SyntheticProcess, TrueTargetProcess};
