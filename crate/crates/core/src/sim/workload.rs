//! Workload scripts and healthy-traffic recording.
//!
//! A workload is JSON lines, one `{"at_us", "line", "payload"}` object per
//! entry request, in non-decreasing time order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::trace_model::{Corpus, CorpusMetadata, Payload};

use super::engine::System;
use super::topology::TopologySpec;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("workload i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadEntry {
    pub at_us: u64,
    pub line: String,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Workload {
    pub entries: Vec<WorkloadEntry>,
}

impl Workload {
    pub fn parse(text: &str) -> Result<Self, WorkloadError> {
        let mut entries: Vec<WorkloadEntry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let err = |message: String| WorkloadError::Parse { line: i + 1, message };
            let e: WorkloadEntry = serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
            if let Some(prev) = entries.last() {
                if e.at_us < prev.at_us {
                    return Err(err(format!("time {} precedes {}", e.at_us, prev.at_us)));
                }
            }
            entries.push(e);
        }
        Ok(Workload { entries })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn load_workload(path: &Path) -> Result<Workload, WorkloadError> {
    let text = std::fs::read_to_string(path).map_err(|e| WorkloadError::Io(format!("{}: {e}", path.display())))?;
    Workload::parse(&text)
}

/// Replays `workload` against a healthy fresh system and records every trace.
pub fn simulate_record(spec: &TopologySpec, workload: &Workload, seed: u64) -> Corpus {
    let mut sys = System::start(spec, seed);
    sys.set_recording(true);
    let handles: Vec<usize> = workload
        .entries
        .iter()
        .map(|e| {
            sys.run_until(e.at_us);
            sys.submit(&e.line, e.payload.clone())
        })
        .collect();
    sys.drain();
    let traces = handles.into_iter().filter_map(|h| sys.take_trace(h)).collect();
    Corpus::new(
        CorpusMetadata {
            seed,
            topology_hash: spec.digest(),
        },
        traces,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_render_round_trip() {
        let text = "{\"at_us\":5,\"line\":\"GET /a/b\",\"payload\":{\"k\":\"v\"}}\n\
                    {\"at_us\":9,\"line\":\"GET /a/c\",\"payload\":{}}\n";
        let w = Workload::parse(text).unwrap();
        assert_eq!(w.entries.len(), 2);
        assert_eq!(w.render(), text);
        let backwards = "{\"at_us\":9,\"line\":\"GET /a\",\"payload\":{}}\n{\"at_us\":5,\"line\":\"GET /a\",\"payload\":{}}\n";
        assert!(matches!(Workload::parse(backwards), Err(WorkloadError::Parse { line: 2, .. })));
        assert!(Workload::parse("{not json}\n").is_err());
    }

    #[test]
    fn empty_workload_records_nothing() {
        let spec = TopologySpec::parse("topology seed=1\nservice a\nend\n").unwrap();
        let c = simulate_record(&spec, &Workload::default(), 4);
        assert!(c.traces.is_empty());
        assert_eq!(c.metadata.topology_hash, spec.digest());
    }
}
