//! Data-dividend policy simulation.
//!
//! Training observations are valued by their estimated leave-one-out effect
//! on test loss, the valuations are turned into per-contributor dividend
//! shares under several transforms, and each design is scored for
//! inequality (Gini) and demographic disparity (median ratios).
//!
//! The pipeline is `dataset` -> `model` -> `influence` -> `dividends` ->
//! `metrics`; [`pipeline`] wires them together behind a flat config file.

pub mod config;
pub mod dataset;
pub mod dividends;
pub mod influence;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod pipeline;

pub use dataset::{
    build_contributor_index, load_dataset, split_train_test, Cardinality, ContributorIndex, ContributorSource,
    ObservationTable, Schema, SplitSpec,
};
pub use dividends::{
    allocate, fixed_allocation, to_currency, transform_values, DividendAllocation, Mode, TransformSpec,
};
pub use influence::{
    estimate_loo_deltas, exact_loo_delta, inverse_hvp, validate_influence, SolverConfig, ValidationReport,
    ValuationVector,
};
pub use metrics::{disparity_report, gini, group_medians, mean_ratio_summary, DisparityReport, GiniResult};
pub use model::{hessian_vector_product, per_example_loss, total_gradient, train, FittedModel, LossFamily, ModelSpec};
