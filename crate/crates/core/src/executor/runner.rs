//! Fail-fast batched execution of run plans against fresh simulator starts.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::digest::derive_seed;
use crate::scheduler::{Run, RunPlan};
use crate::sim::engine::{Compiled, System, STARTUP_COST_US};
use crate::sim::TopologySpec;
use crate::target_planner::TestCase;
use crate::templating::{IdSource, InstantiationContext, TraceTemplate};
use crate::trace_model::Endpoint;

use super::oracle::{evaluate, CaseMetrics, OracleCriteria, PhaseConfig, PhaseMetrics, PhaseSpec, Verdict};

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub phases: PhaseConfig,
    pub entry_only_oracle: bool,
    pub seed: u64,
    /// Worker threads for independent runs; results keep run order.
    pub parallel: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            phases: PhaseConfig::default(),
            entry_only_oracle: false,
            seed: 0,
            parallel: 1,
        }
    }
}

/// Outcome of one executed test case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRun {
    pub case_id: String,
    pub interface_id: String,
    pub trace_id: String,
    pub service: String,
    pub endpoint: Endpoint,
    pub fault_id: String,
    pub rationale: String,
    /// Index of the fresh start this case executed in, campaign-wide.
    pub start_index: usize,
    pub metrics: CaseMetrics,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchOutcome {
    pub runs: Vec<TestRun>,
    /// Fresh system starts, including restarts after a failing case.
    pub startups: usize,
    pub reschedules: usize,
    /// Virtual time spent, counting the fixed start cost per start.
    pub virtual_time_us: u64,
}

fn replay_phase(
    sys: &mut System,
    template: &TraceTemplate,
    ids: &mut IdSource,
    spec: &PhaseSpec,
) -> Result<(u64, u64), String> {
    let start = sys.now();
    for off in spec.request_offsets() {
        sys.run_until(start + off);
        let req = template
            .instantiate(&mut InstantiationContext { now: sys.now(), ids })
            .map_err(|e| e.to_string())?;
        let mut payload = req.payload;
        let unresolved = sys.resolve_opaque(&req.line, &mut payload, &req.pending);
        if !unresolved.is_empty() {
            return Err(format!("cannot resolve opaque values {unresolved:?}"));
        }
        sys.submit(&req.line, payload);
    }
    let end = start + spec.duration_us;
    sys.run_before(end);
    Ok((start, end))
}

fn phase_metrics(sys: &System, window: (u64, u64), case: &TestCase) -> PhaseMetrics {
    let st = sys.endpoint_stats(window.0, window.1, &case.target.service, &case.target.endpoint);
    PhaseMetrics {
        entry: sys.entry_metrics(window.0, window.1),
        injection_hits: st.hits,
        endpoint_failures: st.failures,
        downstream_effect_ok: sys.lost_effects(window.0, window.1) == 0,
    }
}

fn record(case: &TestCase, start_index: usize, metrics: CaseMetrics, verdict: Verdict, error: Option<String>) -> TestRun {
    TestRun {
        case_id: case.case_id.clone(),
        interface_id: case.interface_id.clone(),
        trace_id: case.target.trace_id.clone(),
        service: case.target.service.clone(),
        endpoint: case.target.endpoint.clone(),
        fault_id: case.fault.fault_id.clone(),
        rationale: case.target.rationale.as_str().to_string(),
        start_index,
        metrics,
        verdict,
        error,
    }
}

/// Executes one run on a fresh start. Returns the executed cases and the
/// cases deferred after the first non-PASS verdict.
fn execute_run(
    topo: &Arc<Compiled>,
    cases: &[TestCase],
    template: Option<&TraceTemplate>,
    criteria: &OracleCriteria,
    opts: &RunOptions,
    start_seed: u64,
    start_index: usize,
) -> (Vec<TestRun>, Vec<TestCase>) {
    let Some(template) = template else {
        let first = &cases[0];
        let err = format!("no replay template for interface {}", first.interface_id);
        let r = record(first, start_index, CaseMetrics::default(), Verdict::StartupFailure, Some(err));
        return (vec![r], cases[1..].to_vec());
    };
    let mut sys = System::start_compiled(Arc::clone(topo), start_seed);
    let mut ids = IdSource::new(derive_seed(start_seed, "ids"));
    let startup = match replay_phase(&mut sys, template, &mut ids, &opts.phases.startup) {
        Ok(w) => PhaseMetrics {
            entry: sys.entry_metrics(w.0, w.1),
            ..PhaseMetrics::default()
        },
        Err(e) => {
            let r = record(&cases[0], start_index, CaseMetrics::default(), Verdict::StartupFailure, Some(e));
            return (vec![r], cases[1..].to_vec());
        }
    };

    let mut out = Vec::new();
    for (i, case) in cases.iter().enumerate() {
        let thresholds = criteria.for_interface(&case.interface_id);
        let mut metrics = CaseMetrics {
            startup: Some(startup),
            ..CaseMetrics::default()
        };
        let outcome = (|| -> Result<(), String> {
            sys.arm_fault(&case.target.service, &case.target.endpoint, &case.fault)
                .map_err(|e| e.to_string())?;
            let inj = replay_phase(&mut sys, template, &mut ids, &opts.phases.injection)?;
            sys.disarm_fault(&case.target.service, &case.target.endpoint)
                .map_err(|e| e.to_string())?;
            let rec = replay_phase(&mut sys, template, &mut ids, &opts.phases.recovery)?;
            let mut injection = phase_metrics(&sys, inj, case);
            let mut recovery = phase_metrics(&sys, rec, case);
            let settled = phase_metrics(&sys, (rec.0 + opts.phases.settle_us, rec.1), case);
            recovery.injection_hits = settled.injection_hits;
            recovery.endpoint_failures = settled.endpoint_failures;
            // Downstream effects are judged once the system had time to recover.
            injection.downstream_effect_ok =
                sys.lost_effects(inj.0, rec.1) == 0 && sys.pending_deferred() == 0;
            metrics.injection = Some(injection);
            metrics.recovery = Some(recovery);
            sys.discard_logs_before(rec.1);
            Ok(())
        })();
        let judged = if opts.entry_only_oracle { metrics.entry_only() } else { metrics };
        let (verdict, error) = match outcome {
            Err(e) => (Verdict::StartupFailure, Some(e)),
            Ok(()) => match evaluate(&judged, &thresholds) {
                Ok(v) => (v, None),
                Err(e) => (Verdict::StartupFailure, Some(e.to_string())),
            },
        };
        out.push(record(case, start_index, metrics, verdict, error));
        if !verdict.is_pass() {
            return (out, cases[i + 1..].to_vec());
        }
    }
    (out, Vec::new())
}

/// Runs one planned run and every fresh restart its failures cause.
fn execute_with_restarts(
    topo: &Arc<Compiled>,
    run: &Run,
    run_index: usize,
    templates: &BTreeMap<String, TraceTemplate>,
    criteria: &OracleCriteria,
    opts: &RunOptions,
) -> Vec<(Vec<TestRun>, bool)> {
    let mut pending: VecDeque<Vec<TestCase>> = VecDeque::from([run.cases.clone()]);
    let mut attempts = Vec::new();
    let mut attempt = 0usize;
    while let Some(cases) = pending.pop_front() {
        if cases.is_empty() {
            continue;
        }
        let seed = derive_seed(opts.seed, &format!("{}/{run_index}/{attempt}", run.trace_id));
        let template = templates.get(&cases[0].interface_id);
        let (done, rest) = execute_run(topo, &cases, template, criteria, opts, seed, 0);
        attempts.push((done, attempt > 0));
        attempt += 1;
        if !rest.is_empty() {
            pending.push_back(rest);
        }
    }
    attempts
}

/// Executes a run plan with fail-fast restarts. Every planned case yields
/// exactly one [`TestRun`].
pub fn run_batch(
    plan: &RunPlan,
    topology: &TopologySpec,
    templates: &BTreeMap<String, TraceTemplate>,
    criteria: &OracleCriteria,
    opts: &RunOptions,
) -> BatchOutcome {
    let topo = Arc::new(Compiled::new(topology));
    let work = |(i, run): (usize, &Run)| execute_with_restarts(&topo, run, i, templates, criteria, opts);
    let per_run: Vec<Vec<(Vec<TestRun>, bool)>> = if opts.parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.parallel)
            .build()
            .expect("thread pool");
        pool.install(|| plan.runs.par_iter().enumerate().map(work).collect())
    } else {
        plan.runs.iter().enumerate().map(work).collect()
    };

    let mut out = BatchOutcome::default();
    let phase_time = opts.phases.startup.duration_us;
    let case_time = opts.phases.injection.duration_us + opts.phases.recovery.duration_us;
    for attempts in per_run {
        for (mut runs, is_restart) in attempts {
            for r in &mut runs {
                r.start_index = out.startups;
            }
            out.startups += 1;
            out.reschedules += is_restart as usize;
            out.virtual_time_us += STARTUP_COST_US + phase_time + case_time * runs.len() as u64;
            out.runs.extend(runs);
        }
    }
    out
}

/// Distinct (endpoint, service) pairs exercised by `runs`.
pub fn covered_pairs(runs: &[TestRun]) -> BTreeSet<(Endpoint, String)> {
    runs.iter().map(|r| (r.endpoint.clone(), r.service.clone())).collect()
}
