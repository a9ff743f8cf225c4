//! Three-phase test execution and verdicts.

pub mod oracle;
pub mod runner;

pub use oracle::{
    derive_criteria, evaluate, CaseMetrics, EntryMetrics, OracleCriteria, OracleError, PhaseConfig, PhaseMetrics,
    PhaseSpec, Thresholds, Verdict,
};
pub use runner::{covered_pairs, run_batch, BatchOutcome, RunOptions, TestRun};
