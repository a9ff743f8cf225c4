//! Dynamic-variable identification and replay templates.
//!
//! A request key-path is a dynamic variable when its value is echoed verbatim
//! in the response of the same span (intra-span correlation) and that value
//! changes across independent recordings of the same interface (inter-span
//! variability). Engineers can add paths the heuristic misses through a
//! [`ManualVariableRegistry`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::selection::{self, ComplexityWeights, CorpusNorms};
use crate::trace_model::{Payload, RecordingWindow, Span, Trace};

pub const DEFAULT_MIN_INSTANCES: usize = 2;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TemplateError {
    #[error("no traces supplied for interface template")]
    EmptyInput,

    #[error("insufficient evidence: {have} span instances, need {need}")]
    InsufficientEvidence { have: usize, need: usize },

    #[error("dynamic path {0} has no placeholder kind")]
    UnknownPlaceholderKind(String),

    #[error("invalid key-path `{0}`")]
    InvalidKeyPath(String),

    #[error("registry line {line}: {message}")]
    RegistryParse { line: usize, message: String },

    #[error("trace `{0}` has no root span")]
    MissingRoot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PayloadSide {
    Req,
    Resp,
}

impl fmt::Display for PayloadSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PayloadSide::Req => "req",
            PayloadSide::Resp => "resp",
        })
    }
}

impl FromStr for PayloadSide {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "req" => Ok(PayloadSide::Req),
            "resp" => Ok(PayloadSide::Resp),
            _ => Err(format!("unknown payload side `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaceholderKind {
    FreshId,
    Timestamp,
    OpaqueCopy,
}

impl fmt::Display for PlaceholderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlaceholderKind::FreshId => "fresh_id",
            PlaceholderKind::Timestamp => "timestamp",
            PlaceholderKind::OpaqueCopy => "opaque_copy",
        })
    }
}

impl FromStr for PlaceholderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fresh_id" => Ok(PlaceholderKind::FreshId),
            "timestamp" => Ok(PlaceholderKind::Timestamp),
            "opaque_copy" => Ok(PlaceholderKind::OpaqueCopy),
            _ => Err(format!("unknown placeholder kind `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DynamicPath {
    pub span_position: usize,
    pub side: PayloadSide,
    pub key_path: String,
}

impl fmt::Display for DynamicPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}/{}/{}", self.span_position, self.side, self.key_path)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceTemplate {
    pub interface_id: String,
    pub base_trace: Trace,
    #[serde(with = "placeholder_list")]
    pub placeholders: BTreeMap<DynamicPath, PlaceholderKind>,
}

mod placeholder_list {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        #[serde(flatten)]
        path: DynamicPath,
        kind: PlaceholderKind,
    }

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<DynamicPath, PlaceholderKind>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = map
            .iter()
            .map(|(p, k)| Entry {
                path: p.clone(),
                kind: *k,
            })
            .collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<DynamicPath, PlaceholderKind>, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        Ok(entries.into_iter().map(|e| (e.path, e.kind)).collect())
    }
}

impl TraceTemplate {
    pub fn dynamic_paths(&self) -> BTreeSet<DynamicPath> {
        self.placeholders.keys().cloned().collect()
    }

    fn root_position(&self) -> Result<usize, TemplateError> {
        self.base_trace
            .position_of(&self.base_trace.root)
            .ok_or_else(|| TemplateError::MissingRoot(self.base_trace.trace_id.clone()))
    }

    /// Produces the entry request for one replay. Opaque-copy paths are left
    /// in [`EntryRequest::pending`] for the executor to resolve against the
    /// live system.
    pub fn instantiate(&self, ctx: &mut InstantiationContext<'_>) -> Result<EntryRequest, TemplateError> {
        let root_pos = self.root_position()?;
        let root = &self.base_trace.spans[root_pos];
        let mut payload = root.request_payload.clone();
        let mut pending = Vec::new();
        for (path, kind) in &self.placeholders {
            if path.span_position != root_pos || path.side != PayloadSide::Req {
                continue;
            }
            match kind {
                PlaceholderKind::FreshId => {
                    payload.insert(path.key_path.clone(), ctx.ids.next_id());
                }
                PlaceholderKind::Timestamp => {
                    payload.insert(path.key_path.clone(), ctx.now.to_string());
                }
                PlaceholderKind::OpaqueCopy => pending.push(path.key_path.clone()),
            }
        }
        Ok(EntryRequest {
            line: root.operation_name.clone(),
            payload,
            pending,
        })
    }
}

/// A request ready to submit at the system entry point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryRequest {
    pub line: String,
    pub payload: Payload,
    /// Request key-paths whose values must be copied from the live system.
    pub pending: Vec<String>,
}

/// Deterministic generator of unique identifiers.
///
/// Values are a bijective mix of a per-source offset and a counter, so two
/// calls on one source never collide.
#[derive(Debug, Clone)]
pub struct IdSource {
    offset: u64,
    counter: u64,
}

impl IdSource {
    pub fn new(seed: u64) -> Self {
        IdSource {
            offset: splitmix(seed),
            counter: 0,
        }
    }

    pub fn next_id(&mut self) -> String {
        let v = splitmix(self.offset.wrapping_add(self.counter));
        self.counter += 1;
        format!("{v:016x}")
    }
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct InstantiationContext<'a> {
    pub now: u64,
    pub ids: &'a mut IdSource,
}

/// Request key-paths whose value appears verbatim among the response values.
pub fn find_intraspan_candidates(span: &Span) -> BTreeSet<String> {
    let resp_values: BTreeSet<&str> = span
        .response_payload
        .values()
        .map(String::as_str)
        .filter(|v| !v.is_empty())
        .collect();
    span.request_payload
        .iter()
        .filter(|(_, v)| !v.is_empty() && resp_values.contains(v.as_str()))
        .map(|(k, _)| k.clone())
        .collect()
}

/// Keeps the intra-span candidates whose value is not constant across `spans`.
pub fn confirm_dynamic_variables(
    spans: &[&Span],
    min_instances: usize,
) -> Result<BTreeSet<String>, TemplateError> {
    let need = min_instances.max(2);
    if spans.len() < need {
        return Err(TemplateError::InsufficientEvidence {
            have: spans.len(),
            need,
        });
    }
    let candidates: BTreeSet<String> = spans.iter().flat_map(|s| find_intraspan_candidates(s)).collect();
    Ok(candidates
        .into_iter()
        .filter(|path| {
            let values: BTreeSet<Option<&String>> =
                spans.iter().map(|s| s.request_payload.get(path)).collect();
            values.len() > 1
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegistryEntry {
    pub interface_id: String,
    pub side: PayloadSide,
    pub key_path: String,
    pub kind: PlaceholderKind,
}

/// Engineer-maintained list of variables the heuristic cannot find.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ManualVariableRegistry {
    entries: BTreeMap<RegistryEntry, String>,
}

pub fn validate_key_path(path: &str) -> Result<(), TemplateError> {
    let ok = !path.is_empty()
        && path.split('.').all(|seg| {
            !seg.is_empty() && seg.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        });
    if ok {
        Ok(())
    } else {
        Err(TemplateError::InvalidKeyPath(path.to_string()))
    }
}

impl ManualVariableRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&RegistryEntry, &str)> {
        self.entries.iter().map(|(e, n)| (e, n.as_str()))
    }

    pub fn register(
        &mut self,
        interface_id: &str,
        side: PayloadSide,
        key_path: &str,
        kind: PlaceholderKind,
        note: &str,
    ) -> Result<(), TemplateError> {
        validate_key_path(key_path)?;
        self.entries
            .entry(RegistryEntry {
                interface_id: interface_id.to_string(),
                side,
                key_path: key_path.to_string(),
                kind,
            })
            .or_insert_with(|| note.to_string());
        Ok(())
    }

    pub fn deregister(
        &mut self,
        interface_id: &str,
        side: PayloadSide,
        key_path: &str,
        kind: PlaceholderKind,
    ) -> Result<bool, TemplateError> {
        validate_key_path(key_path)?;
        Ok(self
            .entries
            .remove(&RegistryEntry {
                interface_id: interface_id.to_string(),
                side,
                key_path: key_path.to_string(),
                kind,
            })
            .is_some())
    }

    /// Union with another registry; on a shared entry the existing note wins.
    pub fn merge(&mut self, other: &ManualVariableRegistry) {
        for (e, note) in &other.entries {
            self.entries.entry(e.clone()).or_insert_with(|| note.clone());
        }
    }

    pub fn for_interface<'a>(&'a self, interface_id: &'a str) -> impl Iterator<Item = &'a RegistryEntry> + 'a {
        self.entries.keys().filter(move |e| e.interface_id == interface_id)
    }

    pub fn parse(text: &str) -> Result<Self, TemplateError> {
        let mut reg = ManualVariableRegistry::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let (body, note) = match raw.split_once('#') {
                Some((b, n)) => (b, n.trim()),
                None => (raw, ""),
            };
            let fields: Vec<&str> = body.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let err = |message: String| TemplateError::RegistryParse { line, message };
            if fields.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", fields.len())));
            }
            let side: PayloadSide = fields[1].parse().map_err(err)?;
            let kind: PlaceholderKind = fields[3].parse().map_err(err)?;
            validate_key_path(fields[2]).map_err(|e| err(e.to_string()))?;
            reg.register(fields[0], side, fields[2], kind, note)?;
        }
        Ok(reg)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (e, note) in &self.entries {
            out.push_str(&format!("{} {} {} {}", e.interface_id, e.side, e.key_path, e.kind));
            if !note.is_empty() {
                out.push_str(" # ");
                out.push_str(note);
            }
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let text = fs::read_to_string(path).map_err(|e| TemplateError::RegistryParse {
            line: 0,
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone)]
pub struct TemplateOptions {
    pub min_instances: usize,
    pub window: Option<RecordingWindow>,
    /// Trace to use as the template base; defaults to the cluster's most
    /// complex trace.
    pub base_trace_id: Option<String>,
}

impl Default for TemplateOptions {
    fn default() -> Self {
        TemplateOptions {
            min_instances: DEFAULT_MIN_INSTANCES,
            window: None,
            base_trace_id: None,
        }
    }
}

fn shape(trace: &Trace) -> Vec<(&str, &crate::trace_model::Endpoint)> {
    trace.spans.iter().map(|s| (s.service.as_str(), &s.endpoint)).collect()
}

fn infer_kind(values: &[&str], window: Option<RecordingWindow>) -> PlaceholderKind {
    let Some(w) = window else {
        return PlaceholderKind::FreshId;
    };
    let all_in_window = values
        .iter()
        .all(|v| v.parse::<u64>().map(|t| w.contains(t)).unwrap_or(false));
    if all_in_window {
        PlaceholderKind::Timestamp
    } else {
        PlaceholderKind::FreshId
    }
}

/// Builds the replay template for one interface cluster.
pub fn build_template(
    interface_id: &str,
    cluster_traces: &[&Trace],
    registry: &ManualVariableRegistry,
    opts: &TemplateOptions,
) -> Result<TraceTemplate, TemplateError> {
    if cluster_traces.is_empty() {
        return Err(TemplateError::EmptyInput);
    }
    let base: &Trace = match &opts.base_trace_id {
        Some(id) => cluster_traces
            .iter()
            .copied()
            .find(|t| &t.trace_id == id)
            .unwrap_or(cluster_traces[0]),
        None => most_complex(cluster_traces),
    };
    let base_shape = shape(base);
    let peers: Vec<&Trace> = cluster_traces
        .iter()
        .copied()
        .filter(|t| shape(t) == base_shape)
        .collect();

    let mut placeholders = BTreeMap::new();
    for pos in 0..base.spans.len() {
        let spans: Vec<&Span> = peers.iter().map(|t| &t.spans[pos]).collect();
        let dynamic = match confirm_dynamic_variables(&spans, opts.min_instances) {
            Ok(d) => d,
            Err(TemplateError::InsufficientEvidence { .. }) => BTreeSet::new(),
            Err(e) => return Err(e),
        };
        for key_path in dynamic {
            if !base.spans[pos].request_payload.contains_key(&key_path) {
                continue;
            }
            let values: Vec<&str> = spans
                .iter()
                .filter_map(|s| s.request_payload.get(&key_path).map(String::as_str))
                .collect();
            let kind = infer_kind(&values, opts.window);
            placeholders.insert(
                DynamicPath {
                    span_position: pos,
                    side: PayloadSide::Req,
                    key_path,
                },
                kind,
            );
        }
    }

    let root_pos = base
        .position_of(&base.root)
        .ok_or_else(|| TemplateError::MissingRoot(base.trace_id.clone()))?;
    let root = &base.spans[root_pos];
    for entry in registry.for_interface(interface_id) {
        let payload = match entry.side {
            PayloadSide::Req => &root.request_payload,
            PayloadSide::Resp => &root.response_payload,
        };
        if !payload.contains_key(&entry.key_path) {
            continue;
        }
        placeholders.insert(
            DynamicPath {
                span_position: root_pos,
                side: entry.side,
                key_path: entry.key_path.clone(),
            },
            entry.kind,
        );
    }

    Ok(TraceTemplate {
        interface_id: interface_id.to_string(),
        base_trace: base.clone(),
        placeholders,
    })
}

fn most_complex<'a>(traces: &[&'a Trace]) -> &'a Trace {
    let owned: Vec<&Trace> = traces.to_vec();
    let norms = CorpusNorms::from_traces(owned.iter().copied());
    let w = ComplexityWeights::default();
    let mut best: Option<(&Trace, f64)> = None;
    for t in owned {
        let s = selection::trace_complexity(t, &w, &norms);
        best = match best {
            None => Some((t, s)),
            Some((bt, bs)) => {
                if s > bs || (s == bs && t.trace_id < bt.trace_id) {
                    Some((t, s))
                } else {
                    Some((bt, bs))
                }
            }
        };
    }
    best.expect("non-empty").0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace_model::{Component, Endpoint, SpanStatus};

    fn payload(pairs: &[(&str, &str)]) -> Payload {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    fn span(req: &[(&str, &str)], resp: &[(&str, &str)]) -> Span {
        Span {
            span_id: "s0".into(),
            parent_id: None,
            service: "login".into(),
            endpoint: Endpoint::new(Component::HTTP, "httpserver", "post"),
            operation_name: "POST /api/login/alice".into(),
            request_payload: payload(req),
            response_payload: payload(resp),
            status: SpanStatus::Ok,
            start_time: 0,
            duration: 10,
        }
    }

    fn trace(id: &str, s: Span) -> Trace {
        Trace {
            trace_id: id.into(),
            root: s.span_id.clone(),
            spans: vec![s],
        }
    }

    fn session_pair() -> (Span, Span) {
        let a = span(
            &[("session_id", "f7k9q2"), ("domain_id", "d-1001"), ("status", "active")],
            &[("session_id", "f7k9q2"), ("domain_id", "d-1001"), ("status", "active")],
        );
        let b = span(
            &[("session_id", "r4m8p1"), ("domain_id", "d-1001"), ("status", "active")],
            &[("session_id", "r4m8p1"), ("domain_id", "d-1001"), ("status", "active")],
        );
        (a, b)
    }

    #[test]
    fn stage_one_finds_echoed_session() {
        let s = span(&[("session_id", "f7k9q2")], &[("session_id", "f7k9q2"), ("status", "ok")]);
        assert_eq!(find_intraspan_candidates(&s), BTreeSet::from(["session_id".to_string()]));
        let s = span(&[("a", "1")], &[("b", "2")]);
        assert!(find_intraspan_candidates(&s).is_empty());
    }

    #[test]
    fn stage_one_matches_every_request_path_by_value() {
        let s = span(&[("x", "v"), ("y", "v")], &[("z", "v")]);
        // Brute force over all (request path, response path) pairs.
        let mut oracle = BTreeSet::new();
        for (rk, rv) in &s.request_payload {
            for rv2 in s.response_payload.values() {
                if rv == rv2 {
                    oracle.insert(rk.clone());
                }
            }
        }
        assert_eq!(find_intraspan_candidates(&s), oracle);
        assert_eq!(oracle.len(), 2);
    }

    #[test]
    fn stage_two_keeps_only_varying_values() {
        let (a, b) = session_pair();
        let got = confirm_dynamic_variables(&[&a, &b], 2).unwrap();
        assert_eq!(got, BTreeSet::from(["session_id".to_string()]));
        assert!(confirm_dynamic_variables(&[&a, &a], 2).unwrap().is_empty());
        assert_eq!(
            confirm_dynamic_variables(&[&a], 2),
            Err(TemplateError::InsufficientEvidence { have: 1, need: 2 })
        );
    }

    #[test]
    fn stage_two_generated_cycle() {
        let spans: Vec<Span> = (0..50)
            .map(|i| {
                let t = ["tok-a", "tok-b", "tok-c"][i % 3];
                span(&[("T", t), ("U", "constant")], &[("T", t), ("U", "constant")])
            })
            .collect();
        let refs: Vec<&Span> = spans.iter().collect();
        assert_eq!(
            confirm_dynamic_variables(&refs, 2).unwrap(),
            BTreeSet::from(["T".to_string()])
        );
    }

    #[test]
    fn session_pair_template_has_exactly_session_id() {
        let (a, b) = session_pair();
        let (ta, tb) = (trace("t1", a), trace("t2", b));
        let tpl = build_template("if1", &[&ta, &tb], &ManualVariableRegistry::new(), &TemplateOptions::default()).unwrap();
        let paths: Vec<&str> = tpl.placeholders.keys().map(|p| p.key_path.as_str()).collect();
        assert_eq!(paths, vec!["session_id"]);
        assert_eq!(tpl.placeholders.values().next(), Some(&PlaceholderKind::FreshId));
    }

    #[test]
    fn registry_overrides_missing_evidence() {
        let s = span(&[("auth.signature", "abc123"), ("q", "1")], &[("ok", "yes")]);
        let t = trace("t1", s);
        let mut reg = ManualVariableRegistry::new();
        reg.register("if1", PayloadSide::Req, "auth.signature", PlaceholderKind::OpaqueCopy, "signed")
            .unwrap();
        let tpl = build_template("if1", &[&t], &reg, &TemplateOptions::default()).unwrap();
        assert_eq!(tpl.placeholders.len(), 1);
        let other = build_template("if2", &[&t], &reg, &TemplateOptions::default()).unwrap();
        assert!(other.placeholders.is_empty());
    }

    #[test]
    fn empty_input_is_an_error() {
        let reg = ManualVariableRegistry::new();
        assert_eq!(
            build_template("x", &[], &reg, &TemplateOptions::default()),
            Err(TemplateError::EmptyInput)
        );
    }

    #[test]
    fn timestamps_inside_window_are_classified() {
        let a = span(&[("ts", "1000500")], &[("ts", "1000500")]);
        let b = span(&[("ts", "1000900")], &[("ts", "1000900")]);
        let (ta, tb) = (trace("a", a), trace("b", b));
        let opts = TemplateOptions {
            window: Some(RecordingWindow {
                start_us: 1_000_000,
                end_us: 1_001_000,
            }),
            ..Default::default()
        };
        let tpl = build_template("i", &[&ta, &tb], &ManualVariableRegistry::new(), &opts).unwrap();
        assert_eq!(tpl.placeholders.values().next(), Some(&PlaceholderKind::Timestamp));
    }

    #[test]
    fn instantiate_substitutes_and_is_deterministic() {
        let (a, b) = session_pair();
        let (ta, tb) = (trace("t1", a), trace("t2", b));
        let tpl = build_template("if1", &[&ta, &tb], &ManualVariableRegistry::new(), &TemplateOptions::default()).unwrap();
        let mut ids = IdSource::new(9);
        let r1 = tpl.instantiate(&mut InstantiationContext { now: 5, ids: &mut ids }).unwrap();
        let r2 = tpl.instantiate(&mut InstantiationContext { now: 5, ids: &mut ids }).unwrap();
        assert_ne!(r1.payload["session_id"], "f7k9q2");
        assert_ne!(r1.payload["session_id"], r2.payload["session_id"]);
        assert_eq!(r1.payload["domain_id"], "d-1001");

        let mut again = IdSource::new(9);
        let r1b = tpl.instantiate(&mut InstantiationContext { now: 5, ids: &mut again }).unwrap();
        assert_eq!(r1, r1b);
    }

    #[test]
    fn instantiate_without_dynamic_paths_is_verbatim() {
        let s = span(&[("a", "1")], &[("b", "2")]);
        let t = trace("t", s.clone());
        let tpl = build_template("i", &[&t], &ManualVariableRegistry::new(), &TemplateOptions::default()).unwrap();
        let mut ids = IdSource::new(1);
        let r = tpl.instantiate(&mut InstantiationContext { now: 0, ids: &mut ids }).unwrap();
        assert_eq!(r.payload, s.request_payload);
        assert_eq!(r.line, s.operation_name);
        assert!(r.pending.is_empty());
    }

    #[test]
    fn registry_is_idempotent_and_invertible() {
        let mut reg = ManualVariableRegistry::new();
        let orig = reg.clone();
        reg.register("a", PayloadSide::Req, "auth.signature", PlaceholderKind::OpaqueCopy, "n").unwrap();
        reg.register("a", PayloadSide::Req, "auth.signature", PlaceholderKind::OpaqueCopy, "n").unwrap();
        assert_eq!(reg.len(), 1);
        assert!(reg.deregister("a", PayloadSide::Req, "auth.signature", PlaceholderKind::OpaqueCopy).unwrap());
        assert_eq!(reg, orig);
        assert!(reg.register("a", PayloadSide::Req, "bad path", PlaceholderKind::FreshId, "").is_err());
        assert!(reg.register("a", PayloadSide::Req, "a..b", PlaceholderKind::FreshId, "").is_err());
    }

    #[test]
    fn registry_file_round_trip() {
        let text = "# header comment\nif1 req auth.signature opaque_copy # signature header\nif2 resp token fresh_id\n";
        let reg = ManualVariableRegistry::parse(text).unwrap();
        assert_eq!(reg.len(), 2);
        assert_eq!(ManualVariableRegistry::parse(&reg.render()).unwrap(), reg);
        let bad = ManualVariableRegistry::parse("if1 req x sometimes\n").unwrap_err();
        assert!(matches!(bad, TemplateError::RegistryParse { line: 1, .. }));
    }

    #[test]
    fn registry_merge_is_union() {
        let mut a = ManualVariableRegistry::new();
        a.register("i", PayloadSide::Req, "x", PlaceholderKind::FreshId, "").unwrap();
        let mut b = ManualVariableRegistry::new();
        b.register("i", PayloadSide::Req, "y", PlaceholderKind::FreshId, "").unwrap();
        b.register("i", PayloadSide::Req, "x", PlaceholderKind::FreshId, "").unwrap();
        let mut ab = a.clone();
        ab.merge(&b);
        let mut ba = b.clone();
        ba.merge(&a);
        assert_eq!(ab.len(), 2);
        assert_eq!(ab, ba);
    }

    #[test]
    fn template_serde_round_trip() {
        let (a, b) = session_pair();
        let (ta, tb) = (trace("t1", a), trace("t2", b));
        let tpl = build_template("if1", &[&ta, &tb], &ManualVariableRegistry::new(), &TemplateOptions::default()).unwrap();
        let json = serde_json::to_string(&tpl).unwrap();
        assert_eq!(serde_json::from_str::<TraceTemplate>(&json).unwrap(), tpl);
    }
}
