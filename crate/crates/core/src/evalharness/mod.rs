//! Measurement: ranking metrics, closed-form penalty analysis, and
//! overestimation against exact oracles.

pub mod analysis;
pub mod metrics;
pub mod overestimation;

pub use analysis::{absorbed_discount, blom_expected_max, expected_penalized, inv_norm_cdf, penalty_toy};
pub use metrics::{evaluate_ranking, hr_at_k, ndcg_at_k, GroundTruth, MetricsReport, Ranker};
pub use overestimation::{dataset_states, overestimation_gap};
