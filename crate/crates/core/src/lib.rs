//! Federated learning simulator in which a simulated trusted enclave
//! filters each client's update against a guiding update computed from a
//! small sample of that client's data, plus the robust-aggregation
//! baselines it is compared with.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod enclave;
pub mod faults;
pub mod nn;
pub mod orchestrator;
pub mod robust_agg;
pub mod seeding;
pub mod theory;

pub use data::{Dataset, PartitionMode, PartitionPlan, SampleBatch};
pub use enclave::{Enclave, FilterDecision, SealedBlob, Thresholds};
pub use faults::{ClientUpdate, FaultKind, FaultSpec};
pub use nn::{Model, ModelSpec, ParamVector};
pub use orchestrator::{run_experiment, ExperimentConfig, ExperimentResult, RoundRecord, Rule, Simulation, Summary};
