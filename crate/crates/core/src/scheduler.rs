//! Greedy batching of test cases into runs, and execution history.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::executor::Verdict;
use crate::target_planner::TestCase;
use crate::trace_model::Endpoint;

/// Coverage unit: an endpoint as invoked by one service.
pub type CoveragePair = (Endpoint, String);

pub fn coverage_pair(case: &TestCase) -> CoveragePair {
    (case.target.endpoint.clone(), case.target.service.clone())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Run {
    pub trace_id: String,
    pub cases: Vec<TestCase>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunPlan {
    pub runs: Vec<Run>,
    /// Number of leading runs after which every coverage pair of the input
    /// has been exercised.
    pub runs_to_full_coverage: usize,
}

impl RunPlan {
    pub fn case_count(&self) -> usize {
        self.runs.iter().map(|r| r.cases.len()).sum()
    }
}

/// Repeatedly picks the trace whose pending cases add the most uncovered
/// (endpoint, service) pairs; ties go to more pending cases, then the
/// smaller trace id. Each pick becomes one run holding all of that trace's
/// cases in input order.
pub fn greedy_batch(cases: &[TestCase]) -> RunPlan {
    let mut by_trace: BTreeMap<&str, Vec<&TestCase>> = BTreeMap::new();
    for c in cases {
        by_trace.entry(c.target.trace_id.as_str()).or_default().push(c);
    }
    let pairs: BTreeMap<&str, BTreeSet<CoveragePair>> = by_trace
        .iter()
        .map(|(t, cs)| (*t, cs.iter().map(|c| coverage_pair(c)).collect()))
        .collect();
    let total: BTreeSet<&CoveragePair> = pairs.values().flatten().collect();

    let mut covered: BTreeSet<CoveragePair> = BTreeSet::new();
    let mut plan = RunPlan::default();
    while !by_trace.is_empty() {
        let mut best: Option<(&str, usize, usize)> = None;
        for (t, cs) in &by_trace {
            let gain = pairs[t].iter().filter(|p| !covered.contains(*p)).count();
            let better = match best {
                None => true,
                Some((_, bg, bn)) => gain > bg || (gain == bg && cs.len() > bn),
            };
            if better {
                best = Some((t, gain, cs.len()));
            }
        }
        let (trace, _, _) = best.expect("non-empty");
        let trace = trace.to_string();
        let run_cases = by_trace.remove(trace.as_str()).expect("present");
        covered.extend(pairs[trace.as_str()].iter().cloned());
        plan.runs.push(Run {
            trace_id: trace,
            cases: run_cases.into_iter().cloned().collect(),
        });
        if plan.runs_to_full_coverage == 0 && covered.len() == total.len() {
            plan.runs_to_full_coverage = plan.runs.len();
        }
    }
    plan
}

pub fn render_run_plan(plan: &RunPlan) -> String {
    let mut out = String::new();
    for (i, run) in plan.runs.iter().enumerate() {
        out.push_str(&format!("run {i} {}\n", run.trace_id));
        for c in &run.cases {
            out.push_str(&crate::target_planner::render_case(c));
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum HistoryError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("history i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: u64,
    pub verdict: Verdict,
    pub timestamp: u64,
}

/// Executed cases keyed by case id. Timestamps are a logical clock, so the
/// file is reproducible.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct History {
    pub epoch: u64,
    clock: u64,
    executed: BTreeMap<String, HistoryRecord>,
    log: Vec<String>,
}

pub const RESET_MARKER: &str = "RESET";

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    /// Latest record for `case_id` in the current epoch.
    pub fn get(&self, case_id: &str) -> Option<&HistoryRecord> {
        self.executed.get(case_id).filter(|r| r.epoch == self.epoch)
    }

    pub fn record_outcome(&mut self, case_id: &str, verdict: Verdict) {
        self.clock += 1;
        let rec = HistoryRecord {
            epoch: self.epoch,
            verdict,
            timestamp: self.clock,
        };
        self.log.push(format!("{} {case_id} {verdict} {}", self.epoch, self.clock));
        self.executed.insert(case_id.to_string(), rec);
    }

    pub fn reset(&mut self) {
        self.epoch += 1;
        self.executed.clear();
        self.log.push(format!("{} {RESET_MARKER}", self.epoch));
    }

    pub fn passed_in_epoch(&self, case_id: &str) -> bool {
        self.get(case_id).is_some_and(|r| r.verdict.is_pass())
    }

    pub fn executed_in_epoch(&self) -> impl Iterator<Item = (&String, &HistoryRecord)> {
        self.executed.iter().filter(|(_, r)| r.epoch == self.epoch)
    }

    pub fn render(&self) -> String {
        self.log.iter().map(|l| format!("{l}\n")).collect()
    }

    /// Replays an append-only history file. Lines are
    /// `epoch case_id verdict timestamp` or `epoch RESET`.
    pub fn parse(text: &str) -> Result<Self, HistoryError> {
        let mut h = History::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| HistoryError::Parse { line: i + 1, message };
            let f: Vec<&str> = line.split_whitespace().collect();
            match f[..] {
                [epoch, RESET_MARKER] => {
                    let e: u64 = epoch.parse().map_err(|_| err(format!("bad epoch `{epoch}`")))?;
                    if e != h.epoch + 1 {
                        return Err(err(format!("reset to epoch {e} after epoch {}", h.epoch)));
                    }
                    h.reset();
                }
                [epoch, case_id, verdict, ts] => {
                    let e: u64 = epoch.parse().map_err(|_| err(format!("bad epoch `{epoch}`")))?;
                    if e != h.epoch {
                        return Err(err(format!("record for epoch {e} inside epoch {}", h.epoch)));
                    }
                    let verdict: Verdict = verdict.parse().map_err(err)?;
                    let ts: u64 = ts.parse().map_err(|_| err(format!("bad timestamp `{ts}`")))?;
                    h.clock = h.clock.max(ts - 1);
                    h.record_outcome(case_id, verdict);
                }
                _ => return Err(err("expected `epoch case_id verdict timestamp` or `epoch RESET`".into())),
            }
        }
        Ok(h)
    }

    pub fn load_or_default(path: &Path) -> Result<Self, HistoryError> {
        match std::fs::read_to_string(path) {
            Ok(text) => Self::parse(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(History::new()),
            Err(e) => Err(HistoryError::Io(format!("{}: {e}", path.display()))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), HistoryError> {
        std::fs::write(path, self.render()).map_err(|e| HistoryError::Io(format!("{}: {e}", path.display())))
    }
}

/// Splits `cases` into (to run, skipped). Only a PASS in the current epoch
/// skips a case; failures are retried.
pub fn filter_history(cases: &[TestCase], history: &History) -> (Vec<TestCase>, Vec<TestCase>) {
    cases
        .iter()
        .cloned()
        .partition(|c| !history.passed_in_epoch(&c.case_id))
}
