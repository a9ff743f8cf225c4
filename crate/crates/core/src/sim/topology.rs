//! Declarative system topology and its text format.
//!
//! ```text
//! topology seed=7
//! component Database hibernate
//! service orders workers=4
//!   interface POST /orders/items/{id} name=add-item
//!     param session_id session
//!     param ts timestamp
//!     step db hibernate insert timeout=500ms in=key:path.2 out=row
//!     step call stock.reserve via=HTTP/httpclient/call timeout=2s in=item:s1.row
//!   end
//! end
//! ```
//!
//! Value references inside `in=name:ref` are `path.<i>` (request path
//! token), `req.<key>` (request payload), `s<k>.<key>` (response of the
//! k-th step, 1-based) or `lit.<text>`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::digest::short_digest;
use crate::fault_catalog::parse_duration_us;
use crate::target_planner::AsyncHints;
use crate::trace_model::{Component, Endpoint};

pub const DEFAULT_WORKERS: usize = 4;
pub const DB_TIMEOUT_US: u64 = 500_000;
pub const CACHE_TIMEOUT_US: u64 = 200_000;
pub const MQ_TIMEOUT_US: u64 = 1_000_000;
pub const CALL_TIMEOUT_US: u64 = 2_000_000;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{location}: {message}")]
    Invalid { location: String, message: String },

    #[error("cannot read topology: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OnError {
    Propagate,
    CatchAndDegrade,
    Ignore,
}

impl OnError {
    pub fn as_str(self) -> &'static str {
        match self {
            OnError::Propagate => "propagate",
            OnError::CatchAndDegrade => "catch_and_degrade",
            OnError::Ignore => "ignore",
        }
    }
}

impl FromStr for OnError {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [OnError::Propagate, OnError::CatchAndDegrade, OnError::Ignore]
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| format!("unknown on_error `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BugFlag {
    MissingTimeout,
    FireAndForget,
    NoRollback,
    NoRetry,
    SwallowThenSucceed,
}

impl BugFlag {
    pub const ALL: [BugFlag; 5] = [
        BugFlag::MissingTimeout,
        BugFlag::FireAndForget,
        BugFlag::NoRollback,
        BugFlag::NoRetry,
        BugFlag::SwallowThenSucceed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BugFlag::MissingTimeout => "missing_timeout",
            BugFlag::FireAndForget => "fire_and_forget",
            BugFlag::NoRollback => "no_rollback",
            BugFlag::NoRetry => "no_retry",
            BugFlag::SwallowThenSucceed => "swallow_then_succeed",
        }
    }
}

impl fmt::Display for BugFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BugFlag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BugFlag::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| format!("unknown bug flag `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ValueRef {
    Path(usize),
    Req(String),
    /// 0-based step index and response key.
    Step(usize, String),
    Lit(String),
}

impl fmt::Display for ValueRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValueRef::Path(i) => write!(f, "path.{i}"),
            ValueRef::Req(k) => write!(f, "req.{k}"),
            ValueRef::Step(i, k) => write!(f, "s{}.{k}", i + 1),
            ValueRef::Lit(v) => write!(f, "lit.{v}"),
        }
    }
}

impl FromStr for ValueRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("bad value reference `{s}`");
        let (head, rest) = s.split_once('.').ok_or_else(bad)?;
        if rest.is_empty() {
            return Err(bad());
        }
        match head {
            "path" => rest.parse().map(ValueRef::Path).map_err(|_| bad()),
            "req" => Ok(ValueRef::Req(rest.to_string())),
            "lit" => Ok(ValueRef::Lit(rest.to_string())),
            _ => {
                let k: usize = head.strip_prefix('s').and_then(|n| n.parse().ok()).ok_or_else(bad)?;
                if k == 0 {
                    return Err(bad());
                }
                Ok(ValueRef::Step(k - 1, rest.to_string()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum StepKind {
    Db,
    Cache,
    Mq,
    Call { service: String, interface: String },
}

impl StepKind {
    pub fn default_timeout_us(&self) -> u64 {
        match self {
            StepKind::Db => DB_TIMEOUT_US,
            StepKind::Cache => CACHE_TIMEOUT_US,
            StepKind::Mq => MQ_TIMEOUT_US,
            StepKind::Call { .. } => CALL_TIMEOUT_US,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepSpec {
    pub kind: StepKind,
    pub endpoint: Endpoint,
    pub timeout_us: Option<u64>,
    pub retries: u32,
    pub is_async: bool,
    pub on_error: OnError,
    pub bug: Option<BugFlag>,
    pub inputs: Vec<(String, ValueRef)>,
    pub output: Option<String>,
}

impl StepSpec {
    pub fn is_write(&self) -> bool {
        crate::target_planner::is_write(&self.endpoint)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamKind {
    /// Single-use session token, echoed in the response.
    Session,
    /// Single-use idempotency key, echoed in the response.
    Idempotency,
    /// Client clock in virtual microseconds; must be within 60 s of now.
    Timestamp,
    /// Signature over the value of another request key; not echoed.
    Signature(String),
    Const(String),
    /// Free-form client data, echoed and never validated.
    Data,
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamKind::Session => f.write_str("session"),
            ParamKind::Idempotency => f.write_str("idem"),
            ParamKind::Timestamp => f.write_str("timestamp"),
            ParamKind::Signature(src) => write!(f, "sig={src}"),
            ParamKind::Const(v) => write!(f, "const={v}"),
            ParamKind::Data => f.write_str("data"),
        }
    }
}

impl FromStr for ParamKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "session" => Ok(ParamKind::Session),
            "idem" => Ok(ParamKind::Idempotency),
            "timestamp" => Ok(ParamKind::Timestamp),
            "data" => Ok(ParamKind::Data),
            _ => {
                if let Some(src) = s.strip_prefix("sig=").filter(|v| !v.is_empty()) {
                    Ok(ParamKind::Signature(src.to_string()))
                } else if let Some(v) = s.strip_prefix("const=").filter(|v| !v.is_empty()) {
                    Ok(ParamKind::Const(v.to_string()))
                } else {
                    Err(format!("unknown param kind `{s}`"))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub key: String,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterfaceSpec {
    pub name: String,
    pub method: String,
    pub uri_template: String,
    pub internal: bool,
    pub params: Vec<ParamSpec>,
    pub steps: Vec<StepSpec>,
}

impl InterfaceSpec {
    pub fn template_tokens(&self) -> Vec<&str> {
        self.uri_template.trim_start_matches('/').split('/').filter(|t| !t.is_empty()).collect()
    }

    /// Whether a concrete path fits this interface's URI template.
    pub fn matches_path(&self, tokens: &[&str]) -> bool {
        let tpl = self.template_tokens();
        tpl.len() == tokens.len()
            && tpl.iter().zip(tokens).all(|(t, v)| {
                if t.starts_with('{') && t.ends_with('}') {
                    !v.is_empty()
                } else {
                    t == v
                }
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceSpec {
    pub name: String,
    pub workers: usize,
    pub interfaces: Vec<InterfaceSpec>,
}

impl ServiceSpec {
    pub fn bug_flags(&self) -> BTreeSet<BugFlag> {
        self.interfaces
            .iter()
            .flat_map(|i| i.steps.iter().filter_map(|s| s.bug))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopologySpec {
    pub seed: u64,
    pub components: Vec<(Component, String)>,
    pub services: Vec<ServiceSpec>,
}

/// A seeded bug located at one step.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SeededBug {
    pub flag: BugFlag,
    pub service: String,
    pub endpoint: Endpoint,
}

impl TopologySpec {
    pub fn service(&self, name: &str) -> Option<&ServiceSpec> {
        self.services.iter().find(|s| s.name == name)
    }

    /// Distinct seeded bugs, keyed by (flag, service, endpoint).
    pub fn seeded_bugs(&self) -> Vec<SeededBug> {
        let mut out = BTreeSet::new();
        for svc in &self.services {
            for iface in &svc.interfaces {
                for step in &iface.steps {
                    if let Some(flag) = step.bug {
                        out.insert(SeededBug {
                            flag,
                            service: svc.name.clone(),
                            endpoint: step.endpoint.clone(),
                        });
                    }
                }
            }
        }
        out.into_iter().collect()
    }

    pub fn async_hints(&self) -> AsyncHints {
        let mut out = AsyncHints::new();
        for svc in &self.services {
            for step in svc.interfaces.iter().flat_map(|i| &i.steps) {
                if step.is_async {
                    out.insert((svc.name.clone(), step.endpoint.clone()));
                }
            }
        }
        out
    }

    pub fn public_interface_count(&self) -> usize {
        self.services
            .iter()
            .flat_map(|s| &s.interfaces)
            .filter(|i| !i.internal)
            .count()
    }

    /// Whether `service` has any step on `endpoint`.
    pub fn has_endpoint(&self, service: &str, endpoint: &Endpoint) -> bool {
        self.service(service)
            .is_some_and(|s| s.interfaces.iter().flat_map(|i| &i.steps).any(|st| st.endpoint == *endpoint))
    }

    /// The same system with every seeded bug repaired: missing timeouts get
    /// the per-kind default, fire-and-forget becomes a deferred retry,
    /// swallowed failures propagate, and the remaining flags are dropped.
    pub fn without_bugs(&self) -> TopologySpec {
        let mut out = self.clone();
        for step in out.services.iter_mut().flat_map(|s| s.interfaces.iter_mut()).flat_map(|i| i.steps.iter_mut()) {
            match step.bug.take() {
                Some(BugFlag::MissingTimeout) => step.timeout_us = Some(step.kind.default_timeout_us()),
                Some(BugFlag::FireAndForget) => step.on_error = OnError::CatchAndDegrade,
                Some(BugFlag::SwallowThenSucceed) => step.on_error = OnError::Propagate,
                Some(BugFlag::NoRollback) | Some(BugFlag::NoRetry) | None => {}
            }
        }
        out
    }

    pub fn digest(&self) -> String {
        short_digest(&[self.render()])
    }

    pub fn render(&self) -> String {
        let mut out = format!("topology seed={}\n", self.seed);
        for (c, fw) in &self.components {
            let _ = writeln!(out, "component {c} {fw}");
        }
        for svc in &self.services {
            let _ = writeln!(out, "service {} workers={}", svc.name, svc.workers);
            for iface in &svc.interfaces {
                let _ = write!(out, "  interface {} {} name={}", iface.method, iface.uri_template, iface.name);
                if iface.internal {
                    out.push_str(" internal");
                }
                out.push('\n');
                for p in &iface.params {
                    let _ = writeln!(out, "    param {} {}", p.key, p.kind);
                }
                for s in &iface.steps {
                    out.push_str("    ");
                    out.push_str(&render_step(s));
                    out.push('\n');
                }
                out.push_str("  end\n");
            }
            out.push_str("end\n");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, TopologyError> {
        let spec = parse_topology(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        validate(self)
    }
}

fn render_step(s: &StepSpec) -> String {
    let mut out = match &s.kind {
        StepKind::Db => format!("step db {} {}", s.endpoint.framework, s.endpoint.method),
        StepKind::Cache => format!("step cache {} {}", s.endpoint.framework, s.endpoint.method),
        StepKind::Mq => format!("step mq {} {}", s.endpoint.framework, s.endpoint.method),
        StepKind::Call { service, interface } => format!("step call {service}.{interface} via={}", s.endpoint),
    };
    if let Some(t) = s.timeout_us {
        if t % 1_000_000 == 0 {
            let _ = write!(out, " timeout={}s", t / 1_000_000);
        } else if t % 1_000 == 0 {
            let _ = write!(out, " timeout={}ms", t / 1_000);
        } else {
            let _ = write!(out, " timeout={t}us");
        }
    }
    if s.retries > 0 {
        let _ = write!(out, " retries={}", s.retries);
    }
    if s.is_async {
        out.push_str(" async");
    }
    if s.on_error != OnError::Propagate {
        let _ = write!(out, " on_error={}", s.on_error.as_str());
    }
    if let Some(b) = s.bug {
        let _ = write!(out, " bug={b}");
    }
    for (name, r) in &s.inputs {
        let _ = write!(out, " in={name}:{r}");
    }
    if let Some(o) = &s.output {
        let _ = write!(out, " out={o}");
    }
    out
}

fn kv<'a>(word: &'a str, key: &str) -> Option<&'a str> {
    word.strip_prefix(key).and_then(|r| r.strip_prefix('='))
}

fn parse_step(words: &[&str]) -> Result<StepSpec, String> {
    let (kind, endpoint, rest) = match words {
        ["db", fw, m, rest @ ..] => (StepKind::Db, Endpoint::new(Component::Database, *fw, *m), rest),
        ["cache", fw, m, rest @ ..] => (StepKind::Cache, Endpoint::new(Component::Cache, *fw, *m), rest),
        ["mq", fw, m, rest @ ..] => (StepKind::Mq, Endpoint::new(Component::MQ, *fw, *m), rest),
        ["call", target, rest @ ..] => {
            let (svc, iface) = target
                .split_once('.')
                .filter(|(a, b)| !a.is_empty() && !b.is_empty())
                .ok_or_else(|| format!("call target `{target}` must be service.interface"))?;
            let kind = StepKind::Call {
                service: svc.to_string(),
                interface: iface.to_string(),
            };
            (kind, Endpoint::new(Component::HTTP, "httpclient", "call"), rest)
        }
        _ => return Err("malformed step, expected `step db|cache|mq <framework> <method>` or `step call <svc>.<iface>`".into()),
    };
    let mut step = StepSpec {
        kind,
        endpoint,
        timeout_us: None,
        retries: 0,
        is_async: false,
        on_error: OnError::Propagate,
        bug: None,
        inputs: Vec::new(),
        output: None,
    };
    for w in rest {
        if *w == "async" {
            step.is_async = true;
        } else if let Some(v) = kv(w, "timeout") {
            step.timeout_us = Some(parse_duration_us(v).ok_or_else(|| format!("bad timeout `{v}`"))?);
        } else if let Some(v) = kv(w, "retries") {
            step.retries = v.parse().map_err(|_| format!("bad retries `{v}`"))?;
        } else if let Some(v) = kv(w, "on_error") {
            step.on_error = v.parse()?;
        } else if let Some(v) = kv(w, "bug") {
            step.bug = Some(v.parse()?);
        } else if let Some(v) = kv(w, "in") {
            let (name, r) = v.split_once(':').ok_or_else(|| format!("bad input `{v}`, expected name:ref"))?;
            if name.is_empty() {
                return Err(format!("bad input `{v}`"));
            }
            step.inputs.push((name.to_string(), r.parse()?));
        } else if let Some(v) = kv(w, "out") {
            step.output = Some(v.to_string());
        } else if let Some(v) = kv(w, "via") {
            if !matches!(step.kind, StepKind::Call { .. }) {
                return Err("via= only applies to call steps".into());
            }
            let ep: Endpoint = v.parse()?;
            if !matches!(ep.component, Component::HTTP | Component::RPC) {
                return Err(format!("call endpoint `{ep}` must be HTTP or RPC"));
            }
            step.endpoint = ep;
        } else {
            return Err(format!("unknown step attribute `{w}`"));
        }
    }
    Ok(step)
}

fn parse_topology(text: &str) -> Result<TopologySpec, TopologyError> {
    let mut seed = None;
    let mut components = Vec::new();
    let mut services: Vec<ServiceSpec> = Vec::new();
    let mut in_service = false;
    let mut in_iface = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| TopologyError::Parse { line: i + 1, message };
        let words: Vec<&str> = line.split_whitespace().collect();
        match words[0] {
            "topology" => {
                let v = words.get(1).and_then(|w| kv(w, "seed")).ok_or_else(|| err("expected `topology seed=<u64>`".into()))?;
                seed = Some(v.parse().map_err(|_| err(format!("bad seed `{v}`")))?);
            }
            "component" => {
                let [_, c, fw] = words[..] else {
                    return Err(err("expected `component <Component> <framework>`".into()));
                };
                let c: Component = c.parse().map_err(err)?;
                if !matches!(c, Component::Database | Component::Cache | Component::MQ) {
                    return Err(err(format!("platform component must be Database, Cache or MQ, got {c}")));
                }
                components.push((c, fw.to_string()));
            }
            "service" => {
                if in_service {
                    return Err(err("nested service; missing `end`".into()));
                }
                let name = words.get(1).ok_or_else(|| err("service needs a name".into()))?;
                let mut workers = DEFAULT_WORKERS;
                for w in &words[2..] {
                    let v = kv(w, "workers").ok_or_else(|| err(format!("unknown service attribute `{w}`")))?;
                    workers = v.parse().map_err(|_| err(format!("bad worker count `{v}`")))?;
                }
                services.push(ServiceSpec {
                    name: name.to_string(),
                    workers,
                    interfaces: Vec::new(),
                });
                in_service = true;
            }
            "interface" => {
                if !in_service || in_iface {
                    return Err(err("interface must sit directly inside a service".into()));
                }
                let [_, method, uri, rest @ ..] = &words[..] else {
                    return Err(err("expected `interface <METHOD> <uri> name=<name> [internal]`".into()));
                };
                if !uri.starts_with('/') {
                    return Err(err(format!("uri `{uri}` must start with /")));
                }
                let mut name = None;
                let mut internal = false;
                for w in rest {
                    if *w == "internal" {
                        internal = true;
                    } else if let Some(v) = kv(w, "name") {
                        name = Some(v.to_string());
                    } else {
                        return Err(err(format!("unknown interface attribute `{w}`")));
                    }
                }
                let name = name.ok_or_else(|| err("interface needs name=".into()))?;
                services.last_mut().expect("in service").interfaces.push(InterfaceSpec {
                    name,
                    method: method.to_string(),
                    uri_template: uri.to_string(),
                    internal,
                    params: Vec::new(),
                    steps: Vec::new(),
                });
                in_iface = true;
            }
            "param" => {
                if !in_iface {
                    return Err(err("param outside interface".into()));
                }
                let [_, key, kind] = words[..] else {
                    return Err(err("expected `param <key> <kind>`".into()));
                };
                let kind = kind.parse().map_err(err)?;
                let iface = services.last_mut().and_then(|s| s.interfaces.last_mut()).expect("in interface");
                iface.params.push(ParamSpec { key: key.to_string(), kind });
            }
            "step" => {
                if !in_iface {
                    return Err(err("step outside interface".into()));
                }
                let step = parse_step(&words[1..]).map_err(err)?;
                let iface = services.last_mut().and_then(|s| s.interfaces.last_mut()).expect("in interface");
                iface.steps.push(step);
            }
            "end" => {
                if in_iface {
                    in_iface = false;
                } else if in_service {
                    in_service = false;
                } else {
                    return Err(err("unmatched `end`".into()));
                }
            }
            other => return Err(err(format!("unknown directive `{other}`"))),
        }
    }
    if in_service || in_iface {
        return Err(TopologyError::Parse {
            line: text.lines().count(),
            message: "unterminated block, missing `end`".into(),
        });
    }
    let seed = seed.ok_or(TopologyError::Parse {
        line: 1,
        message: "missing `topology seed=` header".into(),
    })?;
    Ok(TopologySpec {
        seed,
        components,
        services,
    })
}

fn validate(spec: &TopologySpec) -> Result<(), TopologyError> {
    let invalid = |location: String, message: String| TopologyError::Invalid { location, message };
    let mut names = BTreeSet::new();
    for s in &spec.services {
        if !names.insert(s.name.as_str()) {
            return Err(invalid(format!("service {}", s.name), "duplicate service name".into()));
        }
        if s.workers == 0 {
            return Err(invalid(format!("service {}", s.name), "workers must be at least 1".into()));
        }
    }
    let declared: BTreeSet<(Component, &str)> = spec.components.iter().map(|(c, f)| (*c, f.as_str())).collect();
    let mut routes = BTreeSet::new();
    let mut graph: BTreeMap<(&str, &str), Vec<(&str, &str)>> = BTreeMap::new();
    for svc in &spec.services {
        let mut iface_names = BTreeSet::new();
        for iface in &svc.interfaces {
            let loc = format!("{}.{}", svc.name, iface.name);
            if !iface_names.insert(iface.name.as_str()) {
                return Err(invalid(loc, "duplicate interface name".into()));
            }
            if !iface.internal && !routes.insert((iface.method.as_str(), iface.uri_template.as_str())) {
                return Err(invalid(loc, format!("route {} {} declared twice", iface.method, iface.uri_template)));
            }
            if iface.internal && !iface.params.is_empty() {
                return Err(invalid(loc, "internal interfaces take no client params".into()));
            }
            let keys: BTreeSet<&str> = iface.params.iter().map(|p| p.key.as_str()).collect();
            for p in &iface.params {
                if let ParamKind::Signature(src) = &p.kind {
                    if !keys.contains(src.as_str()) {
                        return Err(invalid(loc, format!("signature source `{src}` is not a param")));
                    }
                }
            }
            let n_tokens = iface.template_tokens().len();
            let edges = graph.entry((svc.name.as_str(), iface.name.as_str())).or_default();
            for (k, step) in iface.steps.iter().enumerate() {
                let sloc = format!("{loc} step {}", k + 1);
                match &step.kind {
                    StepKind::Call { service, interface } => {
                        let target = spec
                            .service(service)
                            .ok_or_else(|| invalid(sloc.clone(), format!("call to undeclared service `{service}`")))?;
                        if !target.interfaces.iter().any(|i| i.name == *interface) {
                            return Err(invalid(sloc, format!("call to undeclared interface `{service}.{interface}`")));
                        }
                        edges.push((service.as_str(), interface.as_str()));
                    }
                    _ => {
                        if !declared.contains(&(step.endpoint.component, step.endpoint.framework.as_str())) {
                            return Err(invalid(
                                sloc,
                                format!("undeclared component {} {}", step.endpoint.component, step.endpoint.framework),
                            ));
                        }
                    }
                }
                if step.is_async && step.on_error == OnError::Propagate {
                    return Err(invalid(sloc, "async steps must use on_error=ignore or catch_and_degrade".into()));
                }
                match step.bug {
                    Some(BugFlag::MissingTimeout) if step.timeout_us.is_some() => {
                        return Err(invalid(sloc, "missing_timeout step declares a timeout".into()));
                    }
                    Some(BugFlag::FireAndForget) if !(step.is_async && step.on_error == OnError::Ignore) => {
                        return Err(invalid(sloc, "fire_and_forget needs async and on_error=ignore".into()));
                    }
                    Some(BugFlag::SwallowThenSucceed) if step.is_async || step.on_error != OnError::Ignore => {
                        return Err(invalid(sloc, "swallow_then_succeed needs a synchronous on_error=ignore step".into()));
                    }
                    Some(BugFlag::NoRollback) if step.kind != StepKind::Db => {
                        return Err(invalid(sloc, "no_rollback applies to database steps".into()));
                    }
                    _ => {}
                }
                for (_, r) in &step.inputs {
                    match r {
                        ValueRef::Path(i) if *i >= n_tokens => {
                            return Err(invalid(sloc, format!("path.{i} out of range")));
                        }
                        ValueRef::Step(j, _) if *j >= k => {
                            return Err(invalid(sloc, format!("s{} does not precede this step", j + 1)));
                        }
                        _ => {}
                    }
                }
            }
        }
    }
    // Call graph must be acyclic.
    let mut state: BTreeMap<(&str, &str), u8> = BTreeMap::new();
    fn visit<'a>(
        n: (&'a str, &'a str),
        g: &BTreeMap<(&'a str, &'a str), Vec<(&'a str, &'a str)>>,
        state: &mut BTreeMap<(&'a str, &'a str), u8>,
    ) -> Result<(), String> {
        match state.get(&n) {
            Some(2) => return Ok(()),
            Some(1) => return Err(format!("{}.{}", n.0, n.1)),
            _ => {}
        }
        state.insert(n, 1);
        for m in g.get(&n).into_iter().flatten() {
            visit(*m, g, state)?;
        }
        state.insert(n, 2);
        Ok(())
    }
    for n in graph.keys() {
        visit(*n, &graph, &mut state).map_err(|at| invalid(at, "call cycle".into()))?;
    }
    Ok(())
}

pub fn load_topology(path: &Path) -> Result<TopologySpec, TopologyError> {
    let text = std::fs::read_to_string(path).map_err(|e| TopologyError::Io(format!("{}: {e}", path.display())))?;
    TopologySpec::parse(&text)
}
