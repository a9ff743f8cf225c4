//! Generator for the reference topology, its workload and registry.
//!
//! Ten services with 25 public interfaces each. Five interfaces sign their
//! session token, and ten steps carry seeded bugs (two per flag), each on a
//! framework no other step uses.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{interface_id, TemplateToken};
use crate::templating::{ManualVariableRegistry, PayloadSide, PlaceholderKind};
use crate::trace_model::{Component, Endpoint, Payload};

use super::engine::{sign, signing_secret};
use super::topology::{
    BugFlag, InterfaceSpec, OnError, ParamKind, ParamSpec, ServiceSpec, StepKind, StepSpec, TopologySpec, ValueRef,
    DEFAULT_WORKERS,
};
use super::workload::{Workload, WorkloadEntry};

pub const REFERENCE_SEED: u64 = 7;
pub const PUBLIC_PER_SERVICE: usize = 25;
pub const REQUESTS_PER_INTERFACE: usize = 4;
pub const WORKLOAD_START_US: u64 = 3_600_000_000;
pub const WORKLOAD_SPACING_US: u64 = 40_000;

pub const SHIPPED_TOPOLOGY: &str = include_str!("../../assets/reference.topo");
pub const SHIPPED_FIXED_TOPOLOGY: &str = include_str!("../../assets/reference-fixed.topo");
pub const SHIPPED_WORKLOAD: &str = include_str!("../../assets/reference.workload");
pub const SHIPPED_REGISTRY: &str = include_str!("../../assets/reference.registry");

const SERVICES: [&str; 10] = [
    "orders", "payments", "inventory", "shipping", "accounts", "catalog", "reviews", "notify", "search", "billing",
];

const RESOURCES: [&str; PUBLIC_PER_SERVICE] = [
    "items", "carts", "quotes", "receipts", "profiles", "addresses", "coupons", "wallets", "tickets", "batches",
    "labels", "regions", "vendors", "returns", "invoices", "bundles", "prices", "stocks", "sessions", "devices",
    "alerts", "reports", "tags", "notes", "rules",
];

const DB_COMMON: [&str; 3] = ["hibernate", "mybatis", "jdbc"];
const CACHE_COMMON: [&str; 2] = ["redis", "memcached"];
const MQ_COMMON: [&str; 2] = ["kafka", "rabbitmq"];
const CALL_COMMON: [&str; 3] = ["HTTP/httpclient/call", "RPC/grpc/invoke", "RPC/dubbo/invoke"];

/// Interfaces that sign their session token: (service index, resource index).
const SIGNED: [(usize, usize); 5] = [(0, 3), (2, 7), (4, 11), (6, 15), (8, 19)];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferenceAssets {
    pub topology: TopologySpec,
    pub fixed: TopologySpec,
    pub workload: Workload,
    pub registry: ManualVariableRegistry,
}

impl ReferenceAssets {
    /// The four files as shipped: topology, fixed topology, workload, registry.
    pub fn render(&self) -> [String; 4] {
        [
            self.topology.render(),
            self.fixed.render(),
            self.workload.render(),
            self.registry.render(),
        ]
    }
}

pub const ASSET_FILES: [&str; 4] = [
    "reference.topo",
    "reference-fixed.topo",
    "reference.workload",
    "reference.registry",
];

fn step(kind: StepKind, endpoint: Endpoint) -> StepSpec {
    let timeout = kind.default_timeout_us();
    StepSpec {
        kind,
        endpoint,
        timeout_us: Some(timeout),
        retries: 0,
        is_async: false,
        on_error: OnError::Propagate,
        bug: None,
        inputs: Vec::new(),
        output: None,
    }
}

fn db(fw: &str, method: &str) -> StepSpec {
    step(StepKind::Db, Endpoint::new(Component::Database, fw, method))
}

fn cache(fw: &str, method: &str) -> StepSpec {
    step(StepKind::Cache, Endpoint::new(Component::Cache, fw, method))
}

fn mq(fw: &str, method: &str) -> StepSpec {
    step(StepKind::Mq, Endpoint::new(Component::MQ, fw, method))
}

fn call(service: &str, interface: &str, via: &str) -> StepSpec {
    let kind = StepKind::Call {
        service: service.to_string(),
        interface: interface.to_string(),
    };
    step(kind, via.parse().expect("static endpoint"))
}

fn with_input(mut s: StepSpec, name: &str, r: ValueRef) -> StepSpec {
    s.inputs.push((name.to_string(), r));
    s
}

fn with_output(mut s: StepSpec, name: &str) -> StepSpec {
    s.output = Some(name.to_string());
    s
}

struct Stack {
    db: &'static str,
    cache: &'static str,
    mq: &'static str,
}

fn internal_interfaces(svc: &str, stack: &Stack) -> Vec<InterfaceSpec> {
    let req = || ValueRef::Req("ref".into());
    let mut lookup_cache = with_output(with_input(cache(stack.cache, "get"), "key", req()), "hit");
    lookup_cache.on_error = OnError::Ignore;
    let lookup_db = with_output(with_input(db(stack.db, "query"), "key", req()), "row");
    let store_db = with_input(db(stack.db, "insert"), "key", req());
    let mut store_mq = with_input(mq(stack.mq, "send"), "key", req());
    store_mq.is_async = true;
    store_mq.on_error = OnError::CatchAndDegrade;
    vec![
        InterfaceSpec {
            name: "lookup".into(),
            method: "POST".into(),
            uri_template: format!("/{svc}/internal/lookup"),
            internal: true,
            params: Vec::new(),
            steps: vec![lookup_cache, lookup_db],
        },
        InterfaceSpec {
            name: "store".into(),
            method: "POST".into(),
            uri_template: format!("/{svc}/internal/store"),
            internal: true,
            params: Vec::new(),
            steps: vec![store_db, store_mq],
        },
    ]
}

/// One healthy workflow step drawn from the menu. `queries` holds the
/// 0-based indices of earlier steps that produce a `row`.
fn random_step(rng: &mut ChaCha8Rng, si: usize, stack: &Stack, queries: &[usize]) -> StepSpec {
    let path = || ValueRef::Path(2);
    match rng.gen_range(0..7) {
        0 => {
            let mut s = with_output(with_input(cache(stack.cache, "get"), "key", path()), "hit");
            s.on_error = OnError::Ignore;
            s
        }
        1 => with_output(with_input(db(stack.db, "query"), "key", path()), "row"),
        2 => {
            let m = ["insert", "update", "delete"].choose(rng).expect("non-empty");
            with_input(db(stack.db, m), "key", path())
        }
        3 => {
            let mut s = with_input(cache(stack.cache, "set"), "key", path());
            s.on_error = OnError::CatchAndDegrade;
            s
        }
        4 => {
            let m = ["send", "publish"].choose(rng).expect("non-empty");
            let mut s = with_input(mq(stack.mq, m), "key", path());
            s.is_async = true;
            s.on_error = OnError::CatchAndDegrade;
            s
        }
        k => {
            let mut other = rng.gen_range(0..SERVICES.len() - 1);
            if other >= si {
                other += 1;
            }
            let via = CALL_COMMON.choose(rng).expect("non-empty");
            let (iface, input) = match (k, queries.choose(rng)) {
                (5, Some(&q)) => ("lookup", ValueRef::Step(q, "row".into())),
                (5, None) => ("lookup", path()),
                _ => ("store", path()),
            };
            let mut s = with_input(call(SERVICES[other], iface, via), "ref", input);
            if rng.gen_bool(0.3) {
                s.retries = 1;
            }
            s
        }
    }
}

/// The bug step for bug slot `b` (0..10), planted in service `b`.
fn bug_step(b: usize, tag: &str) -> StepSpec {
    let lit = || ValueRef::Lit(tag.to_string());
    let other = SERVICES[(b + 1) % SERVICES.len()];
    match b {
        0 | 1 => {
            let via = if b == 0 { "HTTP/okhttp/call" } else { "RPC/thrift/invoke" };
            let mut s = with_input(call(other, "lookup", via), "ref", lit());
            s.timeout_us = None;
            s.bug = Some(BugFlag::MissingTimeout);
            s
        }
        2 | 3 => {
            let (fw, m) = if b == 2 { ("rocketmq", "publish") } else { ("activemq", "send") };
            let mut s = with_input(mq(fw, m), "key", lit());
            s.is_async = true;
            s.on_error = OnError::Ignore;
            s.bug = Some(BugFlag::FireAndForget);
            s
        }
        4 | 5 => {
            let (fw, m) = if b == 4 { ("druid", "update") } else { ("c3p0", "insert") };
            let mut s = with_input(db(fw, m), "key", lit());
            s.bug = Some(BugFlag::NoRollback);
            s
        }
        6 => {
            let mut s = with_input(cache("ehcache", "set"), "key", lit());
            s.bug = Some(BugFlag::NoRetry);
            s
        }
        7 => {
            let mut s = with_input(call(other, "store", "RPC/brpc/invoke"), "ref", lit());
            s.bug = Some(BugFlag::NoRetry);
            s
        }
        _ => {
            let mut s = if b == 8 {
                with_input(db("sharding", "delete"), "key", lit())
            } else {
                with_input(cache("hazelcast", "set"), "key", lit())
            };
            s.on_error = OnError::Ignore;
            s.bug = Some(BugFlag::SwallowThenSucceed);
            s
        }
    }
}

fn params_for(method: &str, signed: bool, rng: &mut ChaCha8Rng) -> Vec<ParamSpec> {
    let p = |key: &str, kind: ParamKind| ParamSpec {
        key: key.to_string(),
        kind,
    };
    let mut out = vec![p("session_id", ParamKind::Session), p("ts", ParamKind::Timestamp)];
    if method != "GET" {
        out.push(p("request_id", ParamKind::Idempotency));
    }
    out.push(p("channel", ParamKind::Const("web".into())));
    if rng.gen_bool(0.5) {
        out.push(p("note", ParamKind::Data));
    }
    if signed {
        out.push(p("auth", ParamKind::Signature("session_id".into())));
    }
    out
}

fn token(rng: &mut ChaCha8Rng, len: usize) -> String {
    const ALPHA: &[u8] = b"abcdefghijkmnpqrstuvwxyz23456789";
    (0..len).map(|_| ALPHA[rng.gen_range(0..ALPHA.len())] as char).collect()
}

pub fn generate_topology(seed: u64) -> TopologySpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut components = Vec::new();
    for fw in DB_COMMON.iter().chain(&["druid", "c3p0", "sharding"]) {
        components.push((Component::Database, fw.to_string()));
    }
    for fw in CACHE_COMMON.iter().chain(&["ehcache", "hazelcast"]) {
        components.push((Component::Cache, fw.to_string()));
    }
    for fw in MQ_COMMON.iter().chain(&["rocketmq", "activemq"]) {
        components.push((Component::MQ, fw.to_string()));
    }

    let mut services = Vec::new();
    for (si, svc) in SERVICES.iter().enumerate() {
        let stack = Stack {
            db: DB_COMMON[si % DB_COMMON.len()],
            cache: CACHE_COMMON[si % CACHE_COMMON.len()],
            mq: MQ_COMMON[(si / 2) % MQ_COMMON.len()],
        };
        let mut interfaces = Vec::new();
        let bug_iface = rng.gen_range(0..PUBLIC_PER_SERVICE);
        for (ri, res) in RESOURCES.iter().enumerate() {
            let method = ["GET", "POST", "PUT", "DELETE"].choose(&mut rng).expect("non-empty").to_string();
            let signed = SIGNED.contains(&(si, ri));
            let params = params_for(&method, signed, &mut rng);
            // Skewed length: many short workflows, a few long ones.
            let n = 2 + (rng.gen_range(0.0f64..1.0).powi(2) * 9.0) as usize;
            let mut steps: Vec<StepSpec> = Vec::new();
            for _ in 0..n {
                let queries: Vec<usize> = steps
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.output.as_deref() == Some("row"))
                    .map(|(i, _)| i)
                    .collect();
                steps.push(random_step(&mut rng, si, &stack, &queries));
            }
            if ri == bug_iface {
                let at = rng.gen_range(0..=steps.len());
                let b = bug_step(si, &format!("{svc}-{res}"));
                steps.insert(at, b);
                // Step references after the insertion point shift by one.
                for s in steps.iter_mut().skip(at + 1) {
                    for (_, r) in s.inputs.iter_mut() {
                        if let ValueRef::Step(j, _) = r {
                            if *j >= at {
                                *j += 1;
                            }
                        }
                    }
                }
            }
            interfaces.push(InterfaceSpec {
                name: res.to_string(),
                method,
                uri_template: format!("/{svc}/{res}/{{id}}"),
                internal: false,
                params,
                steps,
            });
        }
        interfaces.extend(internal_interfaces(svc, &stack));
        services.push(ServiceSpec {
            name: svc.to_string(),
            workers: DEFAULT_WORKERS,
            interfaces,
        });
    }
    let spec = TopologySpec {
        seed,
        components,
        services,
    };
    spec.validate().expect("generated topology is valid");
    spec
}

/// Healthy traffic: every public interface is called
/// [`REQUESTS_PER_INTERFACE`] times, round-robin, with fresh tokens.
pub fn generate_workload(spec: &TopologySpec, seed: u64) -> Workload {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let secret = signing_secret(spec.seed);
    let public: Vec<(&ServiceSpec, &InterfaceSpec)> = spec
        .services
        .iter()
        .flat_map(|s| s.interfaces.iter().filter(|i| !i.internal).map(move |i| (s, i)))
        .collect();
    let mut entries = Vec::new();
    let mut n = 0u64;
    for _ in 0..REQUESTS_PER_INTERFACE {
        for (_, iface) in &public {
            let at_us = WORKLOAD_START_US + n * WORKLOAD_SPACING_US;
            n += 1;
            let id = format!("{}{}", token(&mut rng, 3), rng.gen_range(10..100));
            let line = format!("{} {}", iface.method, iface.uri_template.replace("{id}", &id));
            let mut payload = Payload::new();
            for p in &iface.params {
                let v = match &p.kind {
                    ParamKind::Session | ParamKind::Idempotency => token(&mut rng, 12),
                    ParamKind::Timestamp => at_us.to_string(),
                    ParamKind::Const(v) => v.clone(),
                    ParamKind::Data => format!("note-{}", token(&mut rng, 6)),
                    ParamKind::Signature(_) => continue,
                };
                payload.insert(p.key.clone(), v);
            }
            for p in &iface.params {
                if let ParamKind::Signature(src) = &p.kind {
                    let sig = sign(&secret, &payload[src]);
                    payload.insert(p.key.clone(), sig);
                }
            }
            entries.push(WorkloadEntry { at_us, line, payload });
        }
    }
    Workload { entries }
}

/// Interface id the aggregator assigns to a `/svc/res/{id}` route.
pub fn route_interface_id(method: &str, uri_template: &str) -> String {
    let tokens: Vec<TemplateToken> = uri_template
        .trim_start_matches('/')
        .split('/')
        .map(|t| {
            if t.starts_with('{') {
                TemplateToken::Wildcard
            } else {
                TemplateToken::Literal(t.to_string())
            }
        })
        .collect();
    interface_id(method, &tokens)
}

/// Registry entries for every signed request key.
pub fn generate_registry(spec: &TopologySpec) -> ManualVariableRegistry {
    let mut reg = ManualVariableRegistry::new();
    for s in &spec.services {
        for i in s.interfaces.iter().filter(|i| !i.internal) {
            for p in &i.params {
                if let ParamKind::Signature(src) = &p.kind {
                    let id = route_interface_id(&i.method, &i.uri_template);
                    let note = format!("{} {} signs {src}", i.method, i.uri_template);
                    reg.register(&id, PayloadSide::Req, &p.key, PlaceholderKind::OpaqueCopy, &note)
                        .expect("valid key path");
                }
            }
        }
    }
    reg
}

pub fn generate(seed: u64) -> ReferenceAssets {
    let topology = generate_topology(seed);
    let fixed = topology.without_bugs();
    let workload = generate_workload(&topology, seed);
    let registry = generate_registry(&topology);
    ReferenceAssets {
        topology,
        fixed,
        workload,
        registry,
    }
}

/// The shipped reference assets, parsed.
pub fn shipped() -> ReferenceAssets {
    ReferenceAssets {
        topology: TopologySpec::parse(SHIPPED_TOPOLOGY).expect("shipped topology parses"),
        fixed: TopologySpec::parse(SHIPPED_FIXED_TOPOLOGY).expect("shipped fixed topology parses"),
        workload: Workload::parse(SHIPPED_WORKLOAD).expect("shipped workload parses"),
        registry: ManualVariableRegistry::parse(SHIPPED_REGISTRY).expect("shipped registry parses"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn asset_dir() -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets")
    }

    #[test]
    fn shipped_assets_match_generator() {
        let files = generate(REFERENCE_SEED).render();
        if std::env::var_os("RESILITEST_BLESS").is_some() {
            for (name, text) in ASSET_FILES.iter().zip(&files) {
                std::fs::write(asset_dir().join(name), text).unwrap();
            }
        }
        let shipped = [SHIPPED_TOPOLOGY, SHIPPED_FIXED_TOPOLOGY, SHIPPED_WORKLOAD, SHIPPED_REGISTRY];
        for ((name, text), want) in ASSET_FILES.iter().zip(&files).zip(shipped) {
            assert!(text == want, "{name} is stale; rerun with RESILITEST_BLESS=1");
        }
    }

    #[test]
    fn reference_shape() {
        let a = shipped();
        assert_eq!(a.topology.services.len(), 10);
        assert_eq!(a.topology.public_interface_count(), 250);
        let bugs = a.topology.seeded_bugs();
        assert_eq!(bugs.len(), 10);
        for flag in BugFlag::ALL {
            assert_eq!(bugs.iter().filter(|b| b.flag == flag).count(), 2, "{flag}");
        }
        let endpoints: std::collections::BTreeSet<_> = bugs.iter().map(|b| &b.endpoint).collect();
        assert_eq!(endpoints.len(), 10);
        assert!(a.fixed.seeded_bugs().is_empty());
        assert_eq!(a.registry.len(), 5);
        assert_eq!(a.workload.entries.len(), 250 * REQUESTS_PER_INTERFACE);
        let kinds: std::collections::BTreeSet<Component> =
            a.topology.components.iter().map(|(c, _)| *c).collect();
        assert_eq!(kinds.len(), 3);
    }
}
