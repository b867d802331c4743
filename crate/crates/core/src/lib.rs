//! Simulation, feature extraction, autoencoder training and federated
//! anomaly detection for a hierarchical ZigBee-style IoT network under
//! redirection attacks.
//!
//! The pipeline runs bottom-up through the modules:
//!
//! * [`netmodel`] and [`attacks`] describe the tree and how attacks rewrite it,
//! * [`simkernel`] generates per-packet traces and device logs,
//! * [`logfmt`] parses and writes the log grammar,
//! * [`features`] turns logs into normalized 31-slot window vectors,
//! * [`autoencoder`] and [`federated`] train the detector centrally or with
//!   hierarchical FedAvg,
//! * [`detect`] calibrates thresholds and scores verdicts,
//! * [`harness`] wires everything into reproducible experiment bundles.

pub mod attacks;
pub mod autoencoder;
pub mod detect;
pub mod features;
pub mod federated;
pub mod harness;
pub mod logfmt;
pub mod netmodel;
pub mod simkernel;
pub mod util;

pub use attacks::{enumerate_attacks, AttackPlan, AttackSpec, Truth};
pub use autoencoder::{Architecture, ModelWeights, TrainConfig, Trainer};
pub use detect::{calibrate_threshold, classify_window, sweep_k, DetectionReport, LossStats, Threshold, Verdict};
pub use features::{apply_scaler, extract_window, fit_scaler, FeatureSchema, FeatureVector, ScalerParams};
pub use federated::{fedavg, hierarchical_round, run_federated_training, AggregationTree, FLConfig};
pub use harness::{run_experiment, ExperimentConfig, HarnessError, Stage};
pub use logfmt::{parse_entry, serialize_entry, LogEntry, Timestamp};
pub use netmodel::{NodeId, Scenario, Topology};
pub use simkernel::{run_simulation, SimConfig, SimOutput};
