//! End-to-end pipeline: analysis, planning, execution and reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::aggregation::{cluster_interfaces, AggregationError, DrainParams, InterfaceCluster};
use crate::executor::{covered_pairs, run_batch, BatchOutcome, OracleCriteria, RunOptions, TestRun, Verdict};
use crate::fault_catalog::FaultCatalog;
use crate::scheduler::{filter_history, greedy_batch, History, RunPlan};
use crate::selection::{rank, score_interfaces, ComplexityWeights, ScoredInterface, SelectionError};
use crate::digest::derive_seed;
use crate::sim::engine::{Compiled, System};
use crate::sim::{SeededBug, TopologySpec};
use crate::target_planner::{plan_targets, AsyncHints, PlanConfig, TestCase, DEFAULT_N_SERVICES};
use crate::templating::{build_template, IdSource, InstantiationContext, ManualVariableRegistry, TemplateOptions, TraceTemplate, DEFAULT_MIN_INSTANCES};
use crate::trace_model::{Corpus, SpanStatus};

#[derive(Debug, thiserror::Error)]
pub enum CampaignError {
    #[error(transparent)]
    Aggregation(#[from] AggregationError),

    #[error(transparent)]
    Selection(#[from] SelectionError),

    #[error("report: {0}")]
    Report(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeOptions {
    pub weights: ComplexityWeights,
    pub drain: DrainParams,
    pub min_instances: usize,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions {
            weights: ComplexityWeights::default(),
            drain: DrainParams::default(),
            min_instances: DEFAULT_MIN_INSTANCES,
        }
    }
}

/// Interfaces ranked by complexity, with one replay template each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub ranked: Vec<ScoredInterface>,
    pub templates: BTreeMap<String, TraceTemplate>,
    /// Interfaces whose template could not be built, with the reason.
    pub template_errors: BTreeMap<String, String>,
}

/// Clusters the corpus, ranks interfaces and builds a template per interface
/// based on the trace the planner will target.
pub fn analyze(
    corpus: &Corpus,
    registry: &ManualVariableRegistry,
    opts: &AnalyzeOptions,
) -> Result<(Vec<InterfaceCluster>, Analysis), CampaignError> {
    let clusters = cluster_interfaces(corpus, &opts.drain)?;
    let ranked = rank(&score_interfaces(corpus, &clusters, &opts.weights));
    let by_id: BTreeMap<&str, &crate::trace_model::Trace> =
        corpus.traces.iter().map(|t| (t.trace_id.as_str(), t)).collect();
    let by_iface: BTreeMap<&str, &InterfaceCluster> = clusters.iter().map(|c| (c.interface_id.as_str(), c)).collect();
    let window = corpus.recording_window();
    let mut templates = BTreeMap::new();
    let mut template_errors = BTreeMap::new();
    for s in &ranked {
        let members: Vec<&crate::trace_model::Trace> = by_iface[s.interface_id.as_str()]
            .member_trace_ids
            .iter()
            .filter_map(|id| by_id.get(id.as_str()).copied())
            .collect();
        let topts = TemplateOptions {
            min_instances: opts.min_instances,
            window,
            base_trace_id: Some(s.best_trace_id.clone()),
        };
        match build_template(&s.interface_id, &members, registry, &topts) {
            Ok(t) => {
                templates.insert(s.interface_id.clone(), t);
            }
            Err(e) => {
                template_errors.insert(s.interface_id.clone(), e.to_string());
            }
        }
    }
    Ok((
        clusters,
        Analysis {
            ranked,
            templates,
            template_errors,
        },
    ))
}

/// Result of replaying one instantiated request per interface.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReplayReport {
    /// Interface id to the entry status, or the error that prevented replay.
    pub interfaces: BTreeMap<String, String>,
}

impl ReplayReport {
    pub fn total(&self) -> usize {
        self.interfaces.len()
    }

    pub fn succeeded(&self) -> usize {
        self.interfaces.values().filter(|s| *s == "ok").count()
    }

    pub fn success_rate(&self) -> f64 {
        if self.interfaces.is_empty() {
            return 0.0;
        }
        self.succeeded() as f64 / self.total() as f64
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Replays every ranked interface once against a fresh healthy start.
/// Interfaces without a template count as failures.
pub fn replay_check(analysis: &Analysis, topology: &TopologySpec, seed: u64) -> ReplayReport {
    let topo = std::sync::Arc::new(Compiled::new(topology));
    let mut interfaces = BTreeMap::new();
    for s in &analysis.ranked {
        let id = &s.interface_id;
        let Some(template) = analysis.templates.get(id) else {
            let why = analysis.template_errors.get(id).cloned().unwrap_or_default();
            interfaces.insert(id.clone(), format!("no template: {why}"));
            continue;
        };
        let start_seed = derive_seed(seed, &format!("replay/{id}"));
        let mut sys = System::start_compiled(std::sync::Arc::clone(&topo), start_seed);
        let mut ids = IdSource::new(derive_seed(start_seed, "ids"));
        let status = match template.instantiate(&mut InstantiationContext { now: sys.now(), ids: &mut ids }) {
            Err(e) => format!("instantiate: {e}"),
            Ok(req) => {
                let mut payload = req.payload;
                let unresolved = sys.resolve_opaque(&req.line, &mut payload, &req.pending);
                if unresolved.is_empty() {
                    let (out, _) = sys.submit_and_wait(&req.line, payload);
                    match out.status {
                        SpanStatus::Ok => "ok".to_string(),
                        st => st.to_string(),
                    }
                } else {
                    format!("unresolved {unresolved:?}")
                }
            }
        };
        interfaces.insert(id.clone(), status);
    }
    ReplayReport { interfaces }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOptions {
    /// `None` selects every interface.
    pub top_k: Option<usize>,
    pub n_services: usize,
    pub seed: u64,
    pub async_hints: AsyncHints,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            top_k: None,
            n_services: DEFAULT_N_SERVICES,
            seed: 0,
            async_hints: AsyncHints::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Planned {
    pub selected: Vec<ScoredInterface>,
    pub cases: Vec<TestCase>,
    /// Cases that already passed in the current history epoch.
    pub skipped: Vec<TestCase>,
    pub run_plan: RunPlan,
}

/// Selects the top-K interfaces and plans their cases. With a history,
/// interfaces whose every case already passed this epoch are passed over so
/// later campaigns reach new interfaces, and passed cases are skipped.
pub fn plan(
    analysis: &Analysis,
    corpus: &Corpus,
    catalog: &FaultCatalog,
    opts: &PlanOptions,
    history: Option<&History>,
) -> Result<Planned, CampaignError> {
    if opts.top_k == Some(0) {
        return Err(SelectionError::ZeroK.into());
    }
    let by_id: BTreeMap<&str, &crate::trace_model::Trace> =
        corpus.traces.iter().map(|t| (t.trace_id.as_str(), t)).collect();
    let pairs: Vec<(String, &crate::trace_model::Trace)> = analysis
        .ranked
        .iter()
        .filter_map(|s| by_id.get(s.best_trace_id.as_str()).map(|t| (s.interface_id.clone(), *t)))
        .collect();
    let config = PlanConfig {
        n_services: opts.n_services,
        seed: opts.seed,
        async_hints: opts.async_hints.clone(),
    };
    let mut by_iface: BTreeMap<String, Vec<TestCase>> = BTreeMap::new();
    for c in plan_targets(&pairs, corpus, catalog, &config) {
        by_iface.entry(c.interface_id.clone()).or_default().push(c);
    }
    let exhausted = |iface: &str| match (history, by_iface.get(iface)) {
        (Some(h), Some(cs)) => !cs.is_empty() && cs.iter().all(|c| h.passed_in_epoch(&c.case_id)),
        _ => false,
    };
    let k = opts.top_k.unwrap_or(usize::MAX);
    let selected: Vec<ScoredInterface> = analysis
        .ranked
        .iter()
        .filter(|s| !exhausted(&s.interface_id))
        .take(k)
        .cloned()
        .collect();
    let cases: Vec<TestCase> = selected
        .iter()
        .flat_map(|s| by_iface.get(&s.interface_id).cloned().unwrap_or_default())
        .collect();
    let (cases, skipped) = match history {
        Some(h) => filter_history(&cases, h),
        None => (cases, Vec::new()),
    };
    let run_plan = greedy_batch(&cases);
    Ok(Planned {
        selected,
        cases,
        skipped,
        run_plan,
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub cases: usize,
    pub verdicts: BTreeMap<Verdict, usize>,
    pub startups: usize,
    pub reschedules: usize,
    pub virtual_time_us: u64,
    /// Distinct (endpoint, service) pairs exercised.
    pub endpoint_coverage: usize,
    pub skipped_by_history: usize,
    pub entry_only_oracle: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CampaignReport {
    pub summary: Summary,
    pub runs: Vec<TestRun>,
}

impl CampaignReport {
    pub fn new(outcome: BatchOutcome, skipped: usize, entry_only_oracle: bool) -> Self {
        let mut verdicts: BTreeMap<Verdict, usize> = Verdict::ALL.iter().map(|v| (*v, 0)).collect();
        for r in &outcome.runs {
            *verdicts.entry(r.verdict).or_default() += 1;
        }
        CampaignReport {
            summary: Summary {
                cases: outcome.runs.len(),
                verdicts,
                startups: outcome.startups,
                reschedules: outcome.reschedules,
                virtual_time_us: outcome.virtual_time_us,
                endpoint_coverage: covered_pairs(&outcome.runs).len(),
                skipped_by_history: skipped,
                entry_only_oracle,
            },
            runs: outcome.runs,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, CampaignError> {
        serde_json::from_str(text).map_err(|e| CampaignError::Report(e.to_string()))
    }

    pub fn failures(&self) -> impl Iterator<Item = &TestRun> {
        self.runs.iter().filter(|r| !r.verdict.is_pass())
    }
}

/// Executes a planned campaign and folds the verdicts into `history`.
pub fn execute(
    planned: &Planned,
    topology: &TopologySpec,
    analysis: &Analysis,
    criteria: &OracleCriteria,
    opts: &RunOptions,
    history: Option<&mut History>,
) -> CampaignReport {
    let outcome = run_batch(&planned.run_plan, topology, &analysis.templates, criteria, opts);
    if let Some(h) = history {
        for r in &outcome.runs {
            h.record_outcome(&r.case_id, r.verdict);
        }
    }
    CampaignReport::new(outcome, planned.skipped.len(), opts.entry_only_oracle)
}

/// Seeded bugs implicated by a non-PASS verdict on their own step.
pub fn detected_bugs<'a>(report: &CampaignReport, bugs: &'a [SeededBug]) -> Vec<&'a SeededBug> {
    bugs.iter()
        .filter(|b| {
            report
                .failures()
                .any(|r| r.service == b.service && r.endpoint == b.endpoint)
        })
        .collect()
}

/// Seeded bugs whose step is targeted by at least one planned case.
pub fn targeted_bugs<'a>(cases: &[TestCase], bugs: &'a [SeededBug]) -> Vec<&'a SeededBug> {
    let targets: BTreeSet<(&str, &crate::trace_model::Endpoint)> = cases
        .iter()
        .map(|c| (c.target.service.as_str(), &c.target.endpoint))
        .collect();
    bugs.iter()
        .filter(|b| targets.contains(&(b.service.as_str(), &b.endpoint)))
        .collect()
}

pub fn render_summary(report: &CampaignReport) -> String {
    let s = &report.summary;
    let mut out = String::new();
    let _ = writeln!(out, "cases executed      {}", s.cases);
    for (v, n) in &s.verdicts {
        let _ = writeln!(out, "  {:<18}{n}", v.as_str());
    }
    let _ = writeln!(out, "fresh starts        {}", s.startups);
    let _ = writeln!(out, "reschedules         {}", s.reschedules);
    let _ = writeln!(out, "endpoint coverage   {}", s.endpoint_coverage);
    let _ = writeln!(out, "skipped by history  {}", s.skipped_by_history);
    let _ = writeln!(out, "virtual time        {:.1} s", s.virtual_time_us as f64 / 1e6);
    if s.entry_only_oracle {
        let _ = writeln!(out, "oracle              entry point only");
    }
    let failures: Vec<&TestRun> = report.failures().collect();
    if !failures.is_empty() {
        let _ = writeln!(out, "\nfailing cases:");
        for r in failures {
            let _ = writeln!(
                out,
                "  {} {} {} {} {}",
                r.verdict, r.service, r.endpoint, r.fault_id, r.case_id
            );
        }
    }
    out
}

/// One row per report: label, cases, non-PASS verdicts, cumulative
/// endpoint coverage and cumulative failing endpoints.
pub fn sensitivity_table(reports: &[(String, CampaignReport)]) -> String {
    let mut out = String::from("# label cases failing cumulative_coverage cumulative_failing_endpoints\n");
    let mut covered = BTreeSet::new();
    let mut failing = BTreeSet::new();
    for (label, r) in reports {
        covered.extend(covered_pairs(&r.runs));
        failing.extend(r.failures().map(|t| (t.endpoint.clone(), t.service.clone())));
        let _ = writeln!(
            out,
            "{label} {} {} {} {}",
            r.summary.cases,
            r.failures().count(),
            covered.len(),
            failing.len()
        );
    }
    out
}
