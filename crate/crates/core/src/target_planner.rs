//! Injection target extraction and pruning.
//!
//! Pruning runs per trace: keep the last invocation of each endpoint, skip
//! consumers fed by a producer sibling, keep only the secondary write of a
//! dual write, and keep a target only when its service is among the sampled
//! services for that endpoint. Survivors are crossed with the catalog.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::digest::{derive_seed, short_digest};
use crate::fault_catalog::{faults_for_endpoint, FaultCatalog, FaultSpec};
use crate::trace_model::{Corpus, Endpoint, Span, Trace};

pub const WRITE_METHODS: [&str; 6] = ["update", "insert", "delete", "send", "set", "publish"];
pub const MIN_TOKEN_LEN: usize = 4;
pub const DEFAULT_N_SERVICES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rationale {
    Producer,
    DualWriteSecondary,
    LastInvocation,
    Plain,
}

impl Rationale {
    pub fn as_str(self) -> &'static str {
        match self {
            Rationale::Producer => "producer",
            Rationale::DualWriteSecondary => "dual_write_secondary",
            Rationale::LastInvocation => "last_invocation",
            Rationale::Plain => "plain",
        }
    }
}

impl fmt::Display for Rationale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Rationale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            Rationale::Producer,
            Rationale::DualWriteSecondary,
            Rationale::LastInvocation,
            Rationale::Plain,
        ]
        .into_iter()
        .find(|r| r.as_str() == s)
        .ok_or_else(|| format!("unknown rationale `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InjectionTarget {
    pub trace_id: String,
    pub span_position: usize,
    pub endpoint: Endpoint,
    pub service: String,
    pub rationale: Rationale,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub case_id: String,
    pub interface_id: String,
    pub target: InjectionTarget,
    pub fault: FaultSpec,
}

pub fn case_id(trace_id: &str, span_position: usize, fault_id: &str) -> String {
    short_digest(&[trace_id, &span_position.to_string(), fault_id])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DependencyKind {
    ProducerConsumer,
    DualWrite,
}

/// `from` is the producer (or primary write), `to` the consumer (or
/// secondary write). Both are span positions with `from < to` unless the
/// earlier write was the asynchronous one.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DependencyEdge {
    pub kind: DependencyKind,
    pub from: usize,
    pub to: usize,
    pub shared_tokens: BTreeSet<String>,
}

/// (service, endpoint) pairs whose steps run asynchronously, as declared by
/// the system topology.
pub type AsyncHints = BTreeSet<(String, Endpoint)>;

/// One entry per non-root span, in span order.
pub fn extract_endpoints(trace: &Trace) -> Vec<(usize, Endpoint)> {
    trace
        .spans
        .iter()
        .enumerate()
        .filter(|(_, s)| s.span_id != trace.root)
        .map(|(i, s)| (i, s.endpoint.clone()))
        .collect()
}

/// Services that invoke each endpoint anywhere in the corpus (root spans excluded).
#[derive(Debug, Clone, Default)]
pub struct ServiceIndex {
    by_endpoint: BTreeMap<Endpoint, BTreeSet<String>>,
}

impl ServiceIndex {
    pub fn build(corpus: &Corpus) -> Self {
        let mut by_endpoint: BTreeMap<Endpoint, BTreeSet<String>> = BTreeMap::new();
        for t in &corpus.traces {
            for s in t.spans.iter().filter(|s| s.span_id != t.root) {
                by_endpoint
                    .entry(s.endpoint.clone())
                    .or_default()
                    .insert(s.service.clone());
            }
        }
        ServiceIndex { by_endpoint }
    }

    pub fn services(&self, endpoint: &Endpoint) -> Option<&BTreeSet<String>> {
        self.by_endpoint.get(endpoint)
    }

    /// Seeded sample of at most `n` services using `endpoint`.
    pub fn sample(&self, endpoint: &Endpoint, n: usize, seed: u64) -> BTreeSet<String> {
        let Some(all) = self.by_endpoint.get(endpoint) else {
            return BTreeSet::new();
        };
        if all.len() <= n {
            return all.clone();
        }
        let pool: Vec<&String> = all.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &endpoint.to_string()));
        pool.choose_multiple(&mut rng, n).map(|s| (*s).clone()).collect()
    }
}

pub fn sample_services(corpus: &Corpus, endpoint: &Endpoint, n: usize, seed: u64) -> BTreeSet<String> {
    ServiceIndex::build(corpus).sample(endpoint, n, seed)
}

/// Final occurrence of each distinct endpoint, ordered by position.
pub fn last_invocation_targets(trace: &Trace) -> Vec<InjectionTarget> {
    let mut last: BTreeMap<&Endpoint, usize> = BTreeMap::new();
    for (i, s) in trace.spans.iter().enumerate() {
        if s.span_id != trace.root {
            last.insert(&s.endpoint, i);
        }
    }
    let mut positions: Vec<usize> = last.into_values().collect();
    positions.sort_unstable();
    positions
        .into_iter()
        .map(|i| InjectionTarget {
            trace_id: trace.trace_id.clone(),
            span_position: i,
            endpoint: trace.spans[i].endpoint.clone(),
            service: trace.spans[i].service.clone(),
            rationale: Rationale::LastInvocation,
        })
        .collect()
}

fn long_values(p: &BTreeMap<String, String>) -> BTreeSet<&str> {
    p.values()
        .map(String::as_str)
        .filter(|v| v.chars().count() >= MIN_TOKEN_LEN)
        .collect()
}

fn is_non_root(trace: &Trace, s: &Span) -> bool {
    s.span_id != trace.root
}

pub fn detect_producer_consumer(trace: &Trace) -> Vec<DependencyEdge> {
    let spans = &trace.spans;
    let mut edges = Vec::new();
    for (i, a) in spans.iter().enumerate() {
        if !is_non_root(trace, a) {
            continue;
        }
        let produced = long_values(&a.response_payload);
        if produced.is_empty() {
            continue;
        }
        for (j, b) in spans.iter().enumerate().skip(i + 1) {
            if b.parent_id != a.parent_id || b.service != a.service {
                continue;
            }
            let consumed = long_values(&b.request_payload);
            let shared: BTreeSet<String> = produced.intersection(&consumed).map(|s| s.to_string()).collect();
            if !shared.is_empty() {
                edges.push(DependencyEdge {
                    kind: DependencyKind::ProducerConsumer,
                    from: i,
                    to: j,
                    shared_tokens: shared,
                });
            }
        }
    }
    edges
}

pub fn is_write(endpoint: &Endpoint) -> bool {
    WRITE_METHODS.contains(&endpoint.method.as_str())
}

pub fn detect_dual_write(trace: &Trace, hints: &AsyncHints) -> Vec<DependencyEdge> {
    let spans = &trace.spans;
    let is_async = |s: &Span| hints.contains(&(s.service.clone(), s.endpoint.clone()));
    let writes: Vec<usize> = (0..spans.len())
        .filter(|&i| is_non_root(trace, &spans[i]) && is_write(&spans[i].endpoint))
        .collect();
    let mut edges = Vec::new();
    for (x, &i) in writes.iter().enumerate() {
        for &j in &writes[x + 1..] {
            let (a, b) = (&spans[i], &spans[j]);
            if a.service != b.service || a.endpoint.component == b.endpoint.component {
                continue;
            }
            let shared: BTreeSet<String> = long_values(&a.request_payload)
                .intersection(&long_values(&b.request_payload))
                .map(|s| s.to_string())
                .collect();
            if shared.is_empty() {
                continue;
            }
            let (from, to) = if is_async(a) && !is_async(b) { (j, i) } else { (i, j) };
            edges.push(DependencyEdge {
                kind: DependencyKind::DualWrite,
                from,
                to,
                shared_tokens: shared,
            });
        }
    }
    edges
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanConfig {
    pub n_services: usize,
    pub seed: u64,
    pub async_hints: AsyncHints,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            n_services: DEFAULT_N_SERVICES,
            seed: 0,
            async_hints: AsyncHints::new(),
        }
    }
}

/// Surviving targets of one trace after rules 1 to 4.
pub fn prune_trace(trace: &Trace, index: &ServiceIndex, config: &PlanConfig) -> Vec<InjectionTarget> {
    let pc = detect_producer_consumer(trace);
    let dw = detect_dual_write(trace, &config.async_hints);
    let producers: BTreeSet<usize> = pc.iter().map(|e| e.from).collect();
    let consumers: BTreeSet<usize> = pc.iter().map(|e| e.to).collect();
    let secondaries: BTreeSet<usize> = dw.iter().map(|e| e.to).collect();
    let primaries: BTreeSet<usize> = dw.iter().map(|e| e.from).filter(|p| !secondaries.contains(p)).collect();

    let mut occurrences: BTreeMap<&Endpoint, usize> = BTreeMap::new();
    for s in trace.spans.iter().filter(|s| is_non_root(trace, s)) {
        *occurrences.entry(&s.endpoint).or_default() += 1;
    }

    let mut samples: BTreeMap<Endpoint, BTreeSet<String>> = BTreeMap::new();
    last_invocation_targets(trace)
        .into_iter()
        .filter(|t| !consumers.contains(&t.span_position))
        .filter(|t| !primaries.contains(&t.span_position))
        .filter(|t| {
            samples
                .entry(t.endpoint.clone())
                .or_insert_with(|| index.sample(&t.endpoint, config.n_services, config.seed))
                .contains(&t.service)
        })
        .map(|mut t| {
            t.rationale = if producers.contains(&t.span_position) {
                Rationale::Producer
            } else if secondaries.contains(&t.span_position) {
                Rationale::DualWriteSecondary
            } else if occurrences.get(&t.endpoint).copied().unwrap_or(0) > 1 {
                Rationale::LastInvocation
            } else {
                Rationale::Plain
            };
            t
        })
        .collect()
}

/// Builds the test cases for the selected `(interface_id, trace)` pairs.
/// Output order: selection order, then span position, then fault id.
pub fn plan_targets(
    selected: &[(String, &Trace)],
    corpus: &Corpus,
    catalog: &FaultCatalog,
    config: &PlanConfig,
) -> Vec<TestCase> {
    let index = ServiceIndex::build(corpus);
    let per_trace: Vec<Vec<TestCase>> = selected
        .par_iter()
        .map(|(iface, trace)| {
            prune_trace(trace, &index, config)
                .into_iter()
                .flat_map(|t| {
                    faults_for_endpoint(catalog, &t.endpoint)
                        .into_iter()
                        .map(move |f| TestCase {
                            case_id: case_id(&t.trace_id, t.span_position, &f.fault_id),
                            interface_id: iface.clone(),
                            target: t.clone(),
                            fault: f.clone(),
                        })
                })
                .collect()
        })
        .collect();
    let mut seen = BTreeSet::new();
    per_trace
        .into_iter()
        .flatten()
        .filter(|c| seen.insert(c.case_id.clone()))
        .collect()
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PlanFileError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub const PLAN_HEADER: &str = "# case_id trace_id span_position endpoint service fault_id rationale interface_id";

pub fn render_case(c: &TestCase) -> String {
    format!(
        "{} {} {} {} {} {} {} {}",
        c.case_id,
        c.target.trace_id,
        c.target.span_position,
        c.target.endpoint,
        c.target.service,
        c.fault.fault_id,
        c.target.rationale,
        c.interface_id
    )
}

pub fn render_plan(cases: &[TestCase]) -> String {
    let mut out = format!("{PLAN_HEADER}\n");
    for c in cases {
        out.push_str(&render_case(c));
        out.push('\n');
    }
    out
}

/// Reads a plan file back; fault ids are resolved against `catalog`.
pub fn parse_plan(text: &str, catalog: &FaultCatalog) -> Result<Vec<TestCase>, PlanFileError> {
    let mut cases = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| PlanFileError::Parse { line: i + 1, message };
        let f: Vec<&str> = line.split(' ').collect();
        let [cid, tid, pos, ep, svc, fid, rat, iface] = f[..] else {
            return Err(err("expected 8 fields".into()));
        };
        let fault = catalog.get(fid).ok_or_else(|| err(format!("unknown fault `{fid}`")))?;
        let endpoint: Endpoint = ep.parse().map_err(err)?;
        if !fault.applies_to.matches(&endpoint) {
            return Err(err(format!("fault `{fid}` does not apply to {endpoint}")));
        }
        cases.push(TestCase {
            case_id: cid.to_string(),
            interface_id: iface.to_string(),
            target: InjectionTarget {
                trace_id: tid.to_string(),
                span_position: pos.parse().map_err(|_| err(format!("bad position `{pos}`")))?,
                endpoint,
                service: svc.to_string(),
                rationale: rat.parse().map_err(err)?,
            },
            fault: fault.clone(),
        });
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace_model::{Component, Payload, SpanStatus};

    fn payload(kv: &[(&str, &str)]) -> Payload {
        kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    struct B {
        spans: Vec<Span>,
    }

    impl B {
        fn new() -> Self {
            let root = Span {
                span_id: "s0".into(),
                parent_id: None,
                service: "order".into(),
                endpoint: Endpoint::new(Component::HTTP, "httpserver", "post"),
                operation_name: "POST /order".into(),
                request_payload: Payload::new(),
                response_payload: Payload::new(),
                status: SpanStatus::Ok,
                start_time: 0,
                duration: 1000,
            };
            B { spans: vec![root] }
        }

        fn add(mut self, svc: &str, ep: &str, req: &[(&str, &str)], resp: &[(&str, &str)]) -> Self {
            let i = self.spans.len();
            self.spans.push(Span {
                span_id: format!("s{i}"),
                parent_id: Some("s0".into()),
                service: svc.into(),
                endpoint: ep.parse().unwrap(),
                operation_name: ep.into(),
                request_payload: payload(req),
                response_payload: payload(resp),
                status: SpanStatus::Ok,
                start_time: i as u64,
                duration: 1,
            });
            self
        }

        fn build(self) -> Trace {
            Trace {
                trace_id: "t1".into(),
                root: "s0".into(),
                spans: self.spans,
            }
        }
    }

    fn checkout_trace() -> Trace {
        B::new()
            .add("order", "RPC/grpc/validate", &[("addr", "12 Main St")], &[("validated", "12 MAIN ST 02139")])
            .add("order", "HTTP/httpclient/call", &[("address", "12 MAIN ST 02139")], &[("eta", "2d")])
            .build()
    }

    fn product_update_trace() -> Trace {
        B::new()
            .add("product", "Database/sqlclient/update", &[("id", "prod-9921")], &[])
            .add("product", "Cache/kvclient/delete", &[("key", "prod-9921")], &[])
            .build()
    }

    fn corpus_of(ts: &[Trace]) -> Corpus {
        Corpus {
            traces: ts.to_vec(),
            ..Default::default()
        }
    }

    #[test]
    fn endpoints_skip_root() {
        let t = B::new()
            .add("a", "Database/sqlclient/update", &[], &[])
            .add("a", "Cache/kvclient/get", &[], &[])
            .build();
        assert_eq!(
            extract_endpoints(&t),
            vec![
                (1, "Database/sqlclient/update".parse().unwrap()),
                (2, "Cache/kvclient/get".parse().unwrap())
            ]
        );
        assert!(extract_endpoints(&B::new().build()).is_empty());
    }

    #[test]
    fn last_invocation_picks_final_occurrence() {
        let t = B::new()
            .add("a", "Database/sqlclient/query", &[], &[])
            .add("a", "Cache/kvclient/get", &[], &[])
            .add("a", "Database/sqlclient/query", &[], &[])
            .build();
        let pos: Vec<usize> = last_invocation_targets(&t).iter().map(|t| t.span_position).collect();
        assert_eq!(pos, vec![2, 3]);
    }

    #[test]
    fn producer_consumer_checkout() {
        let edges = detect_producer_consumer(&checkout_trace());
        assert_eq!(edges.len(), 1);
        assert_eq!((edges[0].from, edges[0].to), (1, 2));
        assert!(edges[0].shared_tokens.contains("12 MAIN ST 02139"));

        let plan = prune_trace(&checkout_trace(), &ServiceIndex::build(&corpus_of(&[checkout_trace()])), &PlanConfig::default());
        assert_eq!(plan.len(), 1);
        assert_eq!(plan[0].span_position, 1);
        assert_eq!(plan[0].rationale, Rationale::Producer);
    }

    #[test]
    fn chain_yields_two_edges() {
        let t = B::new()
            .add("o", "RPC/grpc/a", &[], &[("x", "alpha-1")])
            .add("o", "RPC/grpc/b", &[("in", "alpha-1")], &[("y", "beta-22")])
            .add("o", "RPC/grpc/c", &[("in", "beta-22")], &[])
            .build();
        let e = detect_producer_consumer(&t);
        assert_eq!(e.iter().map(|e| (e.from, e.to)).collect::<Vec<_>>(), vec![(1, 2), (2, 3)]);
        assert!(detect_producer_consumer(&product_update_trace()).is_empty());
    }

    #[test]
    fn dual_write_product_update() {
        let e = detect_dual_write(&product_update_trace(), &AsyncHints::new());
        assert_eq!(e.len(), 1);
        assert_eq!((e[0].from, e[0].to), (1, 2));
        let plan = prune_trace(&product_update_trace(), &ServiceIndex::build(&corpus_of(&[product_update_trace()])), &PlanConfig::default());
        assert_eq!(plan.len(), 1);
        assert_eq!(plan[0].endpoint.component, Component::Cache);
        assert_eq!(plan[0].rationale, Rationale::DualWriteSecondary);
    }

    #[test]
    fn async_flag_picks_secondary() {
        let t = B::new()
            .add("o", "MQ/mqclient/publish", &[("order", "ord-77")], &[])
            .add("o", "Database/sqlclient/insert", &[("order", "ord-77")], &[])
            .build();
        let hints: AsyncHints = [("o".to_string(), "MQ/mqclient/publish".parse().unwrap())].into();
        let e = detect_dual_write(&t, &hints);
        assert_eq!((e[0].from, e[0].to), (2, 1));
        let unrelated = B::new()
            .add("o", "MQ/mqclient/publish", &[("order", "ord-77")], &[])
            .add("o", "Database/sqlclient/insert", &[("order", "ord-78")], &[])
            .build();
        assert!(detect_dual_write(&unrelated, &hints).is_empty());
    }

    #[test]
    fn sampling_is_seeded_and_bounded() {
        let traces: Vec<Trace> = (0..10)
            .map(|i| {
                let mut t = B::new().add(&format!("svc{i}"), "Cache/kvclient/get", &[], &[]).build();
                t.trace_id = format!("t{i}");
                t
            })
            .collect();
        let c = corpus_of(&traces);
        let ep: Endpoint = "Cache/kvclient/get".parse().unwrap();
        let a = sample_services(&c, &ep, 3, 42);
        assert_eq!(a.len(), 3);
        assert_eq!(a, sample_services(&c, &ep, 3, 42));
        assert!(sample_services(&c, &"Cache/kvclient/set".parse().unwrap(), 3, 42).is_empty());
        let one = corpus_of(&traces[..1]);
        assert_eq!(sample_services(&one, &ep, 3, 1), ["svc0".to_string()].into());
    }

    #[test]
    fn plan_file_round_trip() {
        let t = product_update_trace();
        let cat = FaultCatalog::builtin();
        let cases = plan_targets(&[("iface".into(), &t)], &corpus_of(std::slice::from_ref(&t)), &cat, &PlanConfig::default());
        assert!(!cases.is_empty());
        let text = render_plan(&cases);
        assert_eq!(parse_plan(&text, &cat).unwrap(), cases);
        assert!(parse_plan("x y\n", &cat).is_err());
    }
}
