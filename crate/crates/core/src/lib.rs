//! Multi-controller dataflow orchestration for multi-stage RL pipelines.

pub mod central;
pub mod config;
pub mod dag;
pub mod experiment;
pub mod data;
pub mod hash;
pub mod oracle;
pub mod planner;
pub mod report;
pub mod runner;
pub mod topology;
pub mod transport;
pub mod worker;

pub use config::{ControllerPlacement, Mode, RunConfig};
pub use experiment::{sweep, verify, Launcher, VerifyReport};
pub use report::{ResultRow, SummaryRow};
pub use runner::{run_experiment, run_hub, HubOptions, HubReport, RunError, RunOutcome};
pub use topology::{ClusterTopology, ParallelLayout};
pub use transport::Backend;
