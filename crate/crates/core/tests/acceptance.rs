//! Acceptance suite. Every criterion prints one PASS/FAIL line; the target
//! exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use resilitest::campaign::{
    analyze, detected_bugs, execute, plan, replay_check, sensitivity_table, Analysis, AnalyzeOptions, CampaignReport,
    PlanOptions, Planned, ReplayReport,
};
use resilitest::executor::{
    covered_pairs, evaluate, CaseMetrics, EntryMetrics, OracleCriteria, PhaseMetrics, RunOptions, Thresholds, Verdict,
};
use resilitest::fault_catalog::{faults_for_endpoint, FaultCatalog};
use resilitest::scheduler::{greedy_batch, History};
use resilitest::sim::reference::{self, ReferenceAssets};
use resilitest::sim::{simulate_record, SeededBug, TopologySpec};
use resilitest::target_planner::{
    case_id, plan_targets, sample_services, AsyncHints, InjectionTarget, PlanConfig, Rationale, TestCase,
};
use resilitest::templating::{build_template, ManualVariableRegistry, TemplateOptions};
use resilitest::trace_model::{Corpus, CorpusMetadata, Endpoint, Payload, Span, SpanStatus, Trace};

const SEED: u64 = 11;
const RECORD_SEED: u64 = 1;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

/// Recorded corpus and analyses of the shipped reference system.
struct Setup {
    assets: ReferenceAssets,
    corpus: Corpus,
    bare: Analysis,
    registered: Analysis,
    popts: PlanOptions,
}

fn setup() -> Setup {
    let assets = reference::shipped();
    let corpus = simulate_record(&assets.topology, &assets.workload, RECORD_SEED);
    let (_, bare) = analyze(&corpus, &ManualVariableRegistry::new(), &AnalyzeOptions::default()).expect("analyze");
    let (_, registered) = analyze(&corpus, &assets.registry, &AnalyzeOptions::default()).expect("analyze");
    let popts = PlanOptions {
        seed: SEED,
        async_hints: assets.topology.async_hints(),
        ..PlanOptions::default()
    };
    Setup {
        assets,
        corpus,
        bare,
        registered,
        popts,
    }
}

fn run_opts(entry_only: bool) -> RunOptions {
    RunOptions {
        seed: SEED,
        entry_only_oracle: entry_only,
        ..RunOptions::default()
    }
}

fn planned_with_top_k(s: &Setup, top_k: Option<usize>, history: Option<&History>) -> Planned {
    let opts = PlanOptions { top_k, ..s.popts.clone() };
    plan(&s.registered, &s.corpus, &FaultCatalog::builtin(), &opts, history).expect("plan")
}

fn campaign(s: &Setup, planned: &Planned, topology: &TopologySpec, entry_only: bool) -> CampaignReport {
    execute(planned, topology, &s.registered, &OracleCriteria::default(), &run_opts(entry_only), None)
}

fn targets_bug(c: &TestCase, b: &SeededBug) -> bool {
    c.target.service == b.service && c.target.endpoint == b.endpoint
}

// ---------------------------------------------------------------- criterion 1

fn session_trace(id: &str, session: &str) -> Trace {
    let p: Payload = [("session_id", session), ("domain_id", "d-1001"), ("status", "active")]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    Trace {
        trace_id: id.into(),
        root: "s0".into(),
        spans: vec![Span {
            span_id: "s0".into(),
            parent_id: None,
            service: "portal".into(),
            endpoint: "HTTP/httpserver/post".parse().unwrap(),
            operation_name: "POST /api/session".into(),
            request_payload: p.clone(),
            response_payload: p,
            status: SpanStatus::Ok,
            start_time: 0,
            duration: 10,
        }],
    }
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let (a, b) = (session_trace("t1", "f7k9q2"), session_trace("t2", "r4m8p1"));
    let tpl = build_template("if", &[&a, &b], &ManualVariableRegistry::new(), &TemplateOptions::default())
        .map_err(|e| e.to_string())?;
    let paths: BTreeSet<&str> = tpl.placeholders.keys().map(|p| p.key_path.as_str()).collect();
    let el = t0.elapsed();
    check(
        paths == BTreeSet::from(["session_id"]) && el < Duration::from_secs(1),
        format!("parameterized {paths:?} in {}", secs(el)),
    )
}

// ---------------------------------------------------------------- criterion 2

fn replay_reports(seed: u64) -> (ReplayReport, ReplayReport, usize) {
    let s = setup();
    let bare = replay_check(&s.bare, &s.assets.topology, seed);
    let registered = replay_check(&s.registered, &s.assets.topology, seed);
    (bare, registered, s.bare.ranked.len())
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let (bare, reg, interfaces) = replay_reports(SEED);
    let el = t0.elapsed();
    let ok = interfaces >= 200
        && bare.total() == interfaces
        && bare.success_rate() >= 0.98
        && reg.succeeded() == reg.total()
        && el < Duration::from_secs(60);
    check(
        ok,
        format!(
            "{interfaces} interfaces, {}/{} without registry, {}/{} with registry, {}",
            bare.succeeded(),
            bare.total(),
            reg.succeeded(),
            reg.total(),
            secs(el)
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

fn full_campaigns(s: &Setup) -> (CampaignReport, CampaignReport) {
    let planned = planned_with_top_k(s, None, None);
    let buggy = campaign(s, &planned, &s.assets.topology, false);
    let fixed = campaign(s, &planned, &s.assets.fixed, false);
    (buggy, fixed)
}

fn criterion_3(s: &Setup, buggy: &CampaignReport, fixed: &CampaignReport, el: Duration) -> Outcome {
    let bugs = s.assets.topology.seeded_bugs();
    let found = detected_bugs(buggy, &bugs).len();
    let false_fails = fixed.failures().count();
    check(
        bugs.len() == 10 && found >= 9 && false_fails == 0 && el < Duration::from_secs(300),
        format!(
            "{found}/{} seeded bugs detected, {false_fails} false FAIL on the bug-free variant ({} cases), {}",
            bugs.len(),
            fixed.summary.cases,
            secs(el)
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

/// Verdicts per fire-and-forget bug under both oracles.
fn criterion_4(s: &Setup) -> Outcome {
    let all = planned_with_top_k(s, None, None);
    let bugs: Vec<SeededBug> = s
        .assets
        .topology
        .seeded_bugs()
        .into_iter()
        .filter(|b| b.flag.as_str() == "fire_and_forget")
        .collect();
    if bugs.len() != 2 {
        return Err(format!("expected 2 fire_and_forget bugs, found {}", bugs.len()));
    }
    let cases: Vec<TestCase> = all
        .cases
        .iter()
        .filter(|c| bugs.iter().any(|b| targets_bug(c, b)))
        .cloned()
        .collect();
    let planned = Planned {
        run_plan: greedy_batch(&cases),
        cases,
        ..Planned::default()
    };
    let entry = campaign(s, &planned, &s.assets.topology, true);
    let dual = campaign(s, &planned, &s.assets.topology, false);
    let mut details = Vec::new();
    let mut ok = true;
    for b in &bugs {
        let verdicts = |r: &CampaignReport| -> BTreeSet<Verdict> {
            r.runs
                .iter()
                .filter(|t| t.service == b.service && t.endpoint == b.endpoint)
                .map(|t| t.verdict)
                .collect()
        };
        let (e, d) = (verdicts(&entry), verdicts(&dual));
        let entry_pass = e == BTreeSet::from([Verdict::Pass]);
        let dual_silent = d == BTreeSet::from([Verdict::FailSilent]);
        ok &= entry_pass && dual_silent;
        details.push(format!("{} {} entry-only {:?} dual {:?}", b.service, b.endpoint, e, d));
    }
    check(ok, details.join("; "))
}

// --------------------------------------------------------------- criterion 10

/// The decision table written out row by row over integer tenths.
fn table_verdict(s: u32, i: u32, r: u32, hits: bool, inj_fail: bool, rec_fail: bool, downstream_ok: bool) -> Verdict {
    match (s == 10, hits, i > 3 && inj_fail && !downstream_ok, r >= 8 && !rec_fail) {
        (false, _, _, _) => Verdict::StartupFailure,
        (true, false, _, _) => Verdict::FailNoImpact,
        (true, true, true, _) => Verdict::FailSilent,
        (true, true, false, false) => Verdict::FailNoRecovery,
        (true, true, false, true) => Verdict::Pass,
    }
}

fn tenth_phase(k: u32, hits: u64, failures: u64, downstream_ok: bool) -> PhaseMetrics {
    PhaseMetrics {
        entry: EntryMetrics {
            samples: 10,
            successes: k as u64,
            ..EntryMetrics::default()
        },
        injection_hits: hits,
        endpoint_failures: failures,
        downstream_effect_ok: downstream_ok,
    }
}

fn criterion_10() -> Outcome {
    let t0 = Instant::now();
    let t = Thresholds::default();
    let (mut rows, mut mismatches) = (0usize, Vec::new());
    for s in 0..=10u32 {
        for i in 0..=10u32 {
            for r in 0..=10u32 {
                for hits in [false, true] {
                    for inj_fail in [false, true] {
                        for rec_fail in [false, true] {
                            for ok in [true, false] {
                                let m = CaseMetrics {
                                    startup: Some(tenth_phase(s, 0, 0, true)),
                                    injection: Some(tenth_phase(i, hits as u64 * 7, inj_fail as u64 * 3, ok)),
                                    recovery: Some(tenth_phase(r, 0, rec_fail as u64 * 2, true)),
                                };
                                let want = table_verdict(s, i, r, hits, inj_fail, rec_fail, ok);
                                rows += 1;
                                if evaluate(&m, &t) != Ok(want) {
                                    mismatches.push((s, i, r, hits, inj_fail, rec_fail, ok));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let el = t0.elapsed();
    check(
        mismatches.is_empty() && el < Duration::from_secs(5),
        format!("{rows} grid points, {} mismatches {:?}, {}", mismatches.len(), mismatches.first(), secs(el)),
    )
}

// ---------------------------------------------------------------- criterion 5

fn cover_case(trace: usize, endpoint: usize) -> TestCase {
    let ep: Endpoint = format!("Database/fw{endpoint}/query").parse().unwrap();
    let fault = faults_for_endpoint(&FaultCatalog::builtin(), &ep)[0].clone();
    TestCase {
        case_id: format!("t{trace}-e{endpoint}"),
        interface_id: "i".into(),
        target: InjectionTarget {
            trace_id: format!("t{trace:02}"),
            span_position: endpoint + 1,
            endpoint: ep,
            service: "svc".into(),
            rationale: Rationale::Plain,
        },
        fault,
    }
}

/// Fewest traces whose endpoint sets cover the union, by enumeration.
fn optimum_cover(sets: &[u32]) -> usize {
    let full = sets.iter().fold(0, |a, s| a | s);
    (0u32..1 << sets.len())
        .filter(|pick| (0..sets.len()).filter(|i| pick >> i & 1 == 1).fold(0, |a, i| a | sets[i]) == full)
        .map(|pick| pick.count_ones() as usize)
        .min()
        .unwrap_or(0)
}

fn criterion_5() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let bound = 1.0 + 15f64.ln();
    let (mut partitions, mut bad) = (0usize, Vec::new());
    for n in 0..200 {
        let traces = rng.gen_range(1..=10usize);
        let endpoints = rng.gen_range(1..=15usize);
        let mut sets = vec![0u32; traces];
        if n % 2 == 0 {
            for e in 0..endpoints {
                sets[rng.gen_range(0..traces)] |= 1 << e;
            }
        } else {
            for e in 0..endpoints {
                for s in sets.iter_mut() {
                    if rng.gen_bool(0.3) {
                        *s |= 1 << e;
                    }
                }
                if sets.iter().all(|s| s >> e & 1 == 0) {
                    sets[rng.gen_range(0..traces)] |= 1 << e;
                }
            }
        }
        let cases: Vec<TestCase> = sets
            .iter()
            .enumerate()
            .flat_map(|(t, s)| (0..endpoints).filter(move |e| s >> e & 1 == 1).map(move |e| cover_case(t, e)))
            .collect();
        let greedy = greedy_batch(&cases).runs_to_full_coverage;
        let used: Vec<u32> = sets.iter().copied().filter(|s| *s != 0).collect();
        let opt = optimum_cover(&used);
        let partition = (0..endpoints).all(|e| used.iter().filter(|s| *s >> e & 1 == 1).count() == 1);
        partitions += partition as usize;
        if greedy as f64 > opt as f64 * bound || (partition && greedy != opt) {
            bad.push((n, greedy, opt, partition));
        }
    }
    let el = t0.elapsed();
    check(
        bad.is_empty() && el < Duration::from_secs(30),
        format!("200 instances ({partitions} partitions), violations {bad:?}, {}", secs(el)),
    )
}

// ---------------------------------------------------------------- criterion 6

const ENDPOINTS: [&str; 7] = [
    "Database/jdbc/update",
    "Database/jdbc/query",
    "Cache/redis/set",
    "Cache/redis/get",
    "MQ/kafka/send",
    "RPC/grpc/invoke",
    "HTTP/okhttp/call",
];
const SERVICES: [&str; 4] = ["alpha", "beta", "gamma", "delta"];
const TOKENS: [&str; 7] = ["abcd", "efgh", "ijkl", "mnop", "xy", "ok", "7"];

fn random_payload(rng: &mut ChaCha8Rng) -> Payload {
    (0..rng.gen_range(0..=2))
        .map(|k| (format!("k{k}"), TOKENS.choose(rng).unwrap().to_string()))
        .collect()
}

fn random_trace(rng: &mut ChaCha8Rng, id: &str) -> Trace {
    let n = rng.gen_range(2..=8usize);
    let mut spans = Vec::with_capacity(n);
    for i in 0..n {
        let parent = match i {
            0 => None,
            1 => Some("s0".to_string()),
            _ if rng.gen_bool(0.7) => Some("s0".to_string()),
            _ => Some(format!("s{}", rng.gen_range(1..i))),
        };
        spans.push(Span {
            span_id: format!("s{i}"),
            parent_id: parent,
            service: if i == 0 { "gateway".into() } else { SERVICES[rng.gen_range(0..2 + i % 3)].into() },
            endpoint: if i == 0 { "HTTP/httpserver/get".parse().unwrap() } else { ENDPOINTS.choose(rng).unwrap().parse().unwrap() },
            operation_name: if i == 0 { "GET /x".into() } else { "op".into() },
            request_payload: random_payload(rng),
            response_payload: random_payload(rng),
            status: SpanStatus::Ok,
            start_time: i as u64,
            duration: (n - i) as u64,
        });
    }
    Trace {
        trace_id: id.into(),
        root: "s0".into(),
        spans,
    }
}

fn long_tokens(p: &Payload) -> BTreeSet<&str> {
    p.values().map(String::as_str).filter(|v| v.len() >= 4).collect()
}

fn writes(e: &Endpoint) -> bool {
    ["update", "insert", "delete", "send", "set", "publish"].contains(&e.method.as_str())
}

type PlannedRow = (String, usize, String, Rationale, String);

/// Enumerates every (span, fault) pair, then keeps those passing each rule
/// checked on its own.
fn oracle_plan(selected: &[&Trace], corpus: &Corpus, config: &PlanConfig) -> Vec<PlannedRow> {
    let catalog = FaultCatalog::builtin();
    let mut out = Vec::new();
    for t in selected {
        let sp = &t.spans;
        let is_async = |s: &Span| config.async_hints.contains(&(s.service.clone(), s.endpoint.clone()));
        let shares = |a: &Payload, b: &Payload| !long_tokens(a).is_disjoint(&long_tokens(b));
        let feeds = |i: usize, j: usize| {
            i > 0 && i < j && sp[i].parent_id == sp[j].parent_id && sp[i].service == sp[j].service
                && shares(&sp[i].response_payload, &sp[j].request_payload)
        };
        let mut roles: Vec<(usize, usize)> = Vec::new(); // (primary, secondary)
        for i in 1..sp.len() {
            for j in i + 1..sp.len() {
                let (a, b) = (&sp[i], &sp[j]);
                if writes(&a.endpoint)
                    && writes(&b.endpoint)
                    && a.service == b.service
                    && a.endpoint.component != b.endpoint.component
                    && shares(&a.request_payload, &b.request_payload)
                {
                    roles.push(if is_async(a) && !is_async(b) { (j, i) } else { (i, j) });
                }
            }
        }
        for p in 1..sp.len() {
            let last = (p + 1..sp.len()).all(|q| sp[q].endpoint != sp[p].endpoint);
            let consumer = (1..p).any(|i| feeds(i, p));
            let secondary = roles.iter().any(|r| r.1 == p);
            let primary_only = roles.iter().any(|r| r.0 == p) && !secondary;
            let sampled = sample_services(corpus, &sp[p].endpoint, config.n_services, config.seed).contains(&sp[p].service);
            if !(last && !consumer && !primary_only && sampled) {
                continue;
            }
            let rationale = if (p + 1..sp.len()).any(|j| feeds(p, j)) {
                Rationale::Producer
            } else if secondary {
                Rationale::DualWriteSecondary
            } else if (1..sp.len()).filter(|&q| sp[q].endpoint == sp[p].endpoint).count() > 1 {
                Rationale::LastInvocation
            } else {
                Rationale::Plain
            };
            for f in faults_for_endpoint(&catalog, &sp[p].endpoint) {
                out.push((t.trace_id.clone(), p, f.fault_id.clone(), rationale, case_id(&t.trace_id, p, &f.fault_id)));
            }
        }
    }
    out
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let catalog = FaultCatalog::builtin();
    let (mut traces, mut cases, mut bad) = (0usize, 0usize, Vec::new());
    let mut pruned = 0usize;
    while traces < 100 {
        let n = rng.gen_range(1..=6usize).min(100 - traces);
        let ts: Vec<Trace> = (0..n).map(|i| random_trace(&mut rng, &format!("r{}", traces + i))).collect();
        traces += n;
        let corpus = Corpus::new(CorpusMetadata::default(), ts.clone());
        let mut hints = AsyncHints::new();
        for s in SERVICES {
            for e in ENDPOINTS {
                if rng.gen_bool(0.2) {
                    hints.insert((s.to_string(), e.parse().unwrap()));
                }
            }
        }
        let config = PlanConfig {
            n_services: rng.gen_range(1..=3),
            seed: rng.gen(),
            async_hints: hints,
        };
        let selected: Vec<(String, &Trace)> = ts.iter().map(|t| (t.trace_id.clone(), t)).collect();
        let got: Vec<PlannedRow> = plan_targets(&selected, &corpus, &catalog, &config)
            .into_iter()
            .map(|c| (c.target.trace_id, c.target.span_position, c.fault.fault_id, c.target.rationale, c.case_id))
            .collect();
        let want = oracle_plan(&ts.iter().collect::<Vec<_>>(), &corpus, &config);
        let all_pairs: usize = ts
            .iter()
            .flat_map(|t| t.spans.iter().skip(1))
            .map(|s| faults_for_endpoint(&catalog, &s.endpoint).len())
            .sum();
        pruned += all_pairs - want.len();
        cases += got.len();
        if got != want {
            bad.push(ts[0].trace_id.clone());
        }
    }
    check(
        bad.is_empty(),
        format!("{traces} traces, {cases} cases, {pruned} pairs pruned, mismatching corpora {bad:?}"),
    )
}

// ---------------------------------------------------------------- criterion 7

struct Sweep {
    labels: Vec<String>,
    case_counts: Vec<usize>,
    ks: Vec<usize>,
    detected: Vec<BTreeSet<String>>,
    reports: Vec<(String, CampaignReport)>,
}

fn bug_key(b: &SeededBug) -> String {
    format!("{} {}", b.service, b.endpoint)
}

fn sweep(s: &Setup, full: &CampaignReport) -> Sweep {
    let bugs = s.assets.topology.seeded_bugs();
    let n = s.registered.ranked.len();
    let mut out = Sweep {
        labels: Vec::new(),
        case_counts: Vec::new(),
        ks: Vec::new(),
        detected: Vec::new(),
        reports: Vec::new(),
    };
    for k in [Some(5), Some(10), Some(20), Some(40), None] {
        let planned = planned_with_top_k(s, k, None);
        let report = match k {
            Some(_) => campaign(s, &planned, &s.assets.topology, false),
            None => full.clone(),
        };
        let label = k.map_or("all".to_string(), |k| k.to_string());
        out.labels.push(label.clone());
        out.case_counts.push(planned.cases.len());
        out.ks.push(k.unwrap_or(n));
        out.detected.push(detected_bugs(&report, &bugs).into_iter().map(bug_key).collect());
        out.reports.push((label, report));
    }
    out
}

fn reachable_bugs(s: &Setup) -> BTreeSet<String> {
    s.assets
        .topology
        .seeded_bugs()
        .iter()
        .filter(|b| {
            s.corpus
                .traces
                .iter()
                .any(|t| t.spans.iter().any(|sp| sp.service == b.service && sp.endpoint == b.endpoint))
        })
        .map(bug_key)
        .collect()
}

fn criterion_7(s: &Setup, sw: &Sweep, el: Duration) -> Outcome {
    let c = &sw.case_counts;
    let k = &sw.ks;
    let non_decreasing = c.windows(2).all(|w| w[0] <= w[1]);
    let per_k = |i: usize| (c[i] - c[i - 1]) as f64 / (k[i] - k[i - 1]) as f64;
    let last = c.len() - 1;
    let diminishing = per_k(last) < per_k(last - 1);
    let mut cumulative = BTreeSet::new();
    let coverage: Vec<usize> = sw
        .detected
        .iter()
        .map(|d| {
            cumulative.extend(d.iter().cloned());
            cumulative.len()
        })
        .collect();
    let reachable = reachable_bugs(s);
    let complete = reachable.is_subset(&cumulative) && !reachable.is_empty();
    check(
        non_decreasing && diminishing && complete && el < Duration::from_secs(600),
        format!(
            "K {:?} cases {:?} marginal/K {:.2} then {:.2}, cumulative bugs {:?} of {} reachable, {}",
            sw.labels,
            c,
            per_k(last - 1),
            per_k(last),
            coverage,
            reachable.len(),
            secs(el)
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8(s: &Setup) -> Outcome {
    let mut history = History::new();
    let mut reports = Vec::new();
    for _ in 0..2 {
        let planned = planned_with_top_k(s, Some(10), Some(&history));
        let r = execute(
            &planned,
            &s.assets.topology,
            &s.registered,
            &OracleCriteria::default(),
            &run_opts(false),
            Some(&mut history),
        );
        reports.push(r);
    }
    let passed = |r: &CampaignReport| -> BTreeSet<String> {
        r.runs.iter().filter(|t| t.verdict.is_pass()).map(|t| t.case_id.clone()).collect()
    };
    let (p1, p2) = (passed(&reports[0]), passed(&reports[1]));
    let c1 = covered_pairs(&reports[0].runs);
    let mut c2 = c1.clone();
    c2.extend(covered_pairs(&reports[1].runs));
    let total: BTreeSet<_> = planned_with_top_k(s, None, None)
        .cases
        .iter()
        .map(|c| (c.target.endpoint.clone(), c.target.service.clone()))
        .collect();
    let grows = c2.len() > c1.len() || c1 == total;
    check(
        p1.is_disjoint(&p2) && !p1.is_empty() && !p2.is_empty() && grows,
        format!(
            "PASS sets {} and {} ({} shared), cumulative coverage {} -> {} of {}",
            p1.len(),
            p2.len(),
            p1.intersection(&p2).count(),
            c1.len(),
            c2.len(),
            total.len()
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

/// Report files of criteria 2, 3 and 7 for one seed, keyed by file name.
fn report_files(replay: &(ReplayReport, ReplayReport), full: &(CampaignReport, CampaignReport), sw: &Sweep) -> BTreeMap<String, String> {
    let mut files = BTreeMap::new();
    files.insert("replay-bare.json".to_string(), replay.0.to_json());
    files.insert("replay-registered.json".to_string(), replay.1.to_json());
    files.insert("campaign-buggy.json".to_string(), full.0.to_json());
    files.insert("campaign-fixed.json".to_string(), full.1.to_json());
    files.insert("sensitivity.txt".to_string(), sensitivity_table(&sw.reports));
    for (label, r) in &sw.reports {
        files.insert(format!("sweep-{label}.json"), r.to_json());
    }
    files
}

fn write_files(dir: &Path, files: &BTreeMap<String, String>) {
    std::fs::create_dir_all(dir).unwrap();
    for (name, body) in files {
        std::fs::write(dir.join(name), body).unwrap();
    }
}

fn criterion_9(first: &BTreeMap<String, String>) -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_files(&tmp.path().join("a"), first);

    let (bare, reg, _) = replay_reports(SEED);
    let s = setup();
    let full = full_campaigns(&s);
    let sw = sweep(&s, &full.0);
    write_files(&tmp.path().join("b"), &report_files(&(bare, reg), &full, &sw));

    let mut differing = Vec::new();
    for name in first.keys() {
        let a = std::fs::read(tmp.path().join("a").join(name)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(name)).unwrap();
        if a != b {
            differing.push(name.clone());
        }
    }
    check(
        differing.is_empty(),
        format!("{} report files compared, differing {differing:?}", first.len()),
    )
}

// --------------------------------------------------------------------- driver

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    let mut results: BTreeMap<u32, Outcome> = BTreeMap::new();
    let mut report = |n: u32, r: Outcome| {
        match &r {
            Ok(d) => println!("criterion {n:>2}: PASS  {d}"),
            Err(d) => println!("criterion {n:>2}: FAIL  {d}"),
        }
        results.insert(n, r);
    };

    report(1, guarded(criterion_1));
    report(10, guarded(criterion_10));
    report(5, guarded(criterion_5));
    report(6, guarded(criterion_6));
    report(2, guarded(criterion_2));

    let s = setup();
    let t0 = Instant::now();
    let full = full_campaigns(&s);
    let full_time = t0.elapsed();
    report(3, guarded(|| criterion_3(&s, &full.0, &full.1, full_time)));
    report(4, guarded(|| criterion_4(&s)));

    let t0 = Instant::now();
    let sw = sweep(&s, &full.0);
    // The K = all point reuses the full campaign, so its time counts too.
    let sweep_time = t0.elapsed() + full_time / 2;
    report(7, guarded(|| criterion_7(&s, &sw, sweep_time)));
    report(8, guarded(|| criterion_8(&s)));

    let (bare, reg, _) = replay_reports(SEED);
    let first = report_files(&(bare, reg), &full, &sw);
    report(9, guarded(|| criterion_9(&first)));

    println!("\nsummary");
    for (n, r) in &results {
        println!("criterion {n:>2}: {}", if r.is_ok() { "PASS" } else { "FAIL" });
    }
    let failed: Vec<u32> = results.iter().filter(|(_, r)| r.is_err()).map(|(n, _)| *n).collect();
    if !failed.is_empty() {
        eprintln!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
