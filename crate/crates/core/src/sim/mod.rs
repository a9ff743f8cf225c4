//! Simulated microservice system used for recording traces and running tests.

pub mod engine;
pub mod reference;
pub mod topology;
pub mod workload;

pub use engine::{EndpointStats, EntryOutcome, SimError, System};
pub use topology::{load_topology, BugFlag, SeededBug, TopologyError, TopologySpec};
pub use workload::{load_workload, simulate_record, Workload, WorkloadEntry, WorkloadError};
