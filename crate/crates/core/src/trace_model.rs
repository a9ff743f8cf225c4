//! Span/trace data model and the line-delimited corpus format.
//!
//! A corpus file starts with a header line
//! `resilitest-corpus v1 seed=<u64> topology=<hex-digest>` followed by one
//! JSON trace record per line. Payloads are flat maps from dotted key-paths
//! to scalar strings.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Flattened payload: dotted key-path to scalar value.
pub type Payload = BTreeMap<String, String>;

pub const CORPUS_MAGIC: &str = "resilitest-corpus";
pub const CORPUS_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Component {
    Database,
    Cache,
    MQ,
    RPC,
    HTTP,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Database,
        Component::Cache,
        Component::MQ,
        Component::RPC,
        Component::HTTP,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Database => "Database",
            Component::Cache => "Cache",
            Component::MQ => "MQ",
            Component::RPC => "RPC",
            Component::HTTP => "HTTP",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Component::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown component `{s}`"))
    }
}

/// The (Component, Framework, Method) injection-target tuple.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Endpoint {
    pub component: Component,
    pub framework: String,
    pub method: String,
}

impl Endpoint {
    pub fn new(component: Component, framework: impl Into<String>, method: impl Into<String>) -> Self {
        Endpoint {
            component,
            framework: framework.into(),
            method: method.into(),
        }
    }

    pub fn is_valid(&self) -> bool {
        !self.framework.is_empty() && !self.method.is_empty()
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.component, self.framework, self.method)
    }
}

impl FromStr for Endpoint {
    type Err = String;

    /// Parses `Component/framework/method`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split('/');
        match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(c), Some(fw), Some(m), None) if !fw.is_empty() && !m.is_empty() => {
                Ok(Endpoint::new(c.parse()?, fw, m))
            }
            _ => Err(format!("malformed endpoint `{s}`, expected Component/framework/method")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpanStatus {
    Ok,
    Error(u16),
}

impl SpanStatus {
    pub fn is_ok(self) -> bool {
        matches!(self, SpanStatus::Ok)
    }
}

impl fmt::Display for SpanStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpanStatus::Ok => f.write_str("ok"),
            SpanStatus::Error(code) => write!(f, "error:{code}"),
        }
    }
}

impl FromStr for SpanStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "ok" {
            return Ok(SpanStatus::Ok);
        }
        s.strip_prefix("error:")
            .and_then(|c| c.parse().ok())
            .map(SpanStatus::Error)
            .ok_or_else(|| format!("bad status `{s}`"))
    }
}

impl Serialize for SpanStatus {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SpanStatus {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    #[serde(rename = "id")]
    pub span_id: String,
    #[serde(rename = "parent")]
    pub parent_id: Option<String>,
    pub service: String,
    pub endpoint: Endpoint,
    #[serde(rename = "op")]
    pub operation_name: String,
    #[serde(rename = "req")]
    pub request_payload: Payload,
    #[serde(rename = "resp")]
    pub response_payload: Payload,
    pub status: SpanStatus,
    /// Virtual microseconds.
    #[serde(rename = "start_us")]
    pub start_time: u64,
    #[serde(rename = "dur_us")]
    pub duration: u64,
}

impl Span {
    pub fn end_time(&self) -> u64 {
        self.start_time.saturating_add(self.duration)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub trace_id: String,
    pub root: String,
    pub spans: Vec<Span>,
}

impl Trace {
    pub fn root_span(&self) -> Option<&Span> {
        self.spans.iter().find(|s| s.span_id == self.root)
    }

    pub fn position_of(&self, span_id: &str) -> Option<usize> {
        self.spans.iter().position(|s| s.span_id == span_id)
    }

    /// Request line of the entry span (`METHOD /path`).
    pub fn request_line(&self) -> Option<&str> {
        self.root_span().map(|s| s.operation_name.as_str())
    }

    /// Root span duration, the end-to-end latency of the trace.
    pub fn duration(&self) -> u64 {
        self.root_span().map_or(0, |s| s.duration)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ViolationRule {
    DuplicateSpanId,
    DanglingParent,
    NoRoot,
    MultipleRoots,
    RootMismatch,
    Containment,
    Order,
}

impl fmt::Display for ViolationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationRule::DuplicateSpanId => "duplicate span id",
            ViolationRule::DanglingParent => "dangling parent",
            ViolationRule::NoRoot => "no root",
            ViolationRule::MultipleRoots => "multiple roots",
            ViolationRule::RootMismatch => "root mismatch",
            ViolationRule::Containment => "containment",
            ViolationRule::Order => "order",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub span_id: String,
    pub rule: ViolationRule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.span_id, self.rule)
    }
}

/// Checks every span/trace invariant. Violations are returned as data.
pub fn validate_trace(trace: &Trace) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut by_id: HashMap<&str, usize> = HashMap::new();
    for (i, span) in trace.spans.iter().enumerate() {
        if by_id.insert(span.span_id.as_str(), i).is_some() {
            out.push(Violation {
                span_id: span.span_id.clone(),
                rule: ViolationRule::DuplicateSpanId,
            });
        }
    }

    let roots: Vec<&Span> = trace.spans.iter().filter(|s| s.parent_id.is_none()).collect();
    match roots.len() {
        0 => out.push(Violation {
            span_id: trace.root.clone(),
            rule: ViolationRule::NoRoot,
        }),
        1 => {
            if roots[0].span_id != trace.root {
                out.push(Violation {
                    span_id: roots[0].span_id.clone(),
                    rule: ViolationRule::RootMismatch,
                });
            }
        }
        _ => {
            for r in roots.iter().skip(1) {
                out.push(Violation {
                    span_id: r.span_id.clone(),
                    rule: ViolationRule::MultipleRoots,
                });
            }
        }
    }

    for (i, span) in trace.spans.iter().enumerate() {
        if let Some(pid) = &span.parent_id {
            match by_id.get(pid.as_str()) {
                None => out.push(Violation {
                    span_id: span.span_id.clone(),
                    rule: ViolationRule::DanglingParent,
                }),
                Some(&pi) => {
                    let parent = &trace.spans[pi];
                    if span.start_time < parent.start_time || span.end_time() > parent.end_time() {
                        out.push(Violation {
                            span_id: span.span_id.clone(),
                            rule: ViolationRule::Containment,
                        });
                    }
                    if pi >= i {
                        out.push(Violation {
                            span_id: span.span_id.clone(),
                            rule: ViolationRule::Order,
                        });
                    }
                }
            }
        }
        if i > 0 && span.start_time < trace.spans[i - 1].start_time {
            out.push(Violation {
                span_id: span.span_id.clone(),
                rule: ViolationRule::Order,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorpusMetadata {
    pub seed: u64,
    pub topology_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub metadata: CorpusMetadata,
    pub traces: Vec<Trace>,
}

/// Closed interval of virtual time covered by a recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordingWindow {
    pub start_us: u64,
    pub end_us: u64,
}

impl RecordingWindow {
    pub fn contains(&self, t: u64) -> bool {
        t >= self.start_us && t <= self.end_us
    }
}

impl Corpus {
    pub fn new(metadata: CorpusMetadata, traces: Vec<Trace>) -> Self {
        Corpus { metadata, traces }
    }

    /// Span of root intervals over all traces; `None` for an empty corpus.
    pub fn recording_window(&self) -> Option<RecordingWindow> {
        let roots = self.traces.iter().filter_map(Trace::root_span);
        roots.fold(None, |acc: Option<RecordingWindow>, s| {
            Some(match acc {
                None => RecordingWindow {
                    start_us: s.start_time,
                    end_us: s.end_time(),
                },
                Some(w) => RecordingWindow {
                    start_us: w.start_us.min(s.start_time),
                    end_us: w.end_us.max(s.end_time()),
                },
            })
        })
    }

    pub fn trace(&self, trace_id: &str) -> Option<&Trace> {
        self.traces.iter().find(|t| t.trace_id == trace_id)
    }

    pub fn duplicate_trace_ids(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut dups = BTreeSet::new();
        for t in &self.traces {
            if !seen.insert(t.trace_id.as_str()) {
                dups.insert(t.trace_id.clone());
            }
        }
        dups.into_iter().collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("incompatible corpus: found `{found}`, expected {CORPUS_MAGIC} {CORPUS_VERSION}")]
    Incompatible { found: String },

    #[error("duplicate trace id `{0}`")]
    DuplicateTraceId(String),
}

pub fn header_line(meta: &CorpusMetadata) -> String {
    format!(
        "{CORPUS_MAGIC} {CORPUS_VERSION} seed={} topology={}",
        meta.seed, meta.topology_hash
    )
}

fn parse_header(line: &str) -> Result<CorpusMetadata, CorpusError> {
    let mut parts = line.split(' ');
    let magic = parts.next().unwrap_or_default();
    let version = parts.next().unwrap_or_default();
    if magic != CORPUS_MAGIC {
        return Err(CorpusError::Parse {
            line: 1,
            message: format!("missing `{CORPUS_MAGIC}` header"),
        });
    }
    if version != CORPUS_VERSION {
        return Err(CorpusError::Incompatible {
            found: format!("{magic} {version}"),
        });
    }
    let mut meta = CorpusMetadata::default();
    let mut have_seed = false;
    let mut have_topology = false;
    for field in parts {
        if let Some(v) = field.strip_prefix("seed=") {
            meta.seed = v.parse().map_err(|_| CorpusError::Parse {
                line: 1,
                message: format!("bad seed `{v}`"),
            })?;
            have_seed = true;
        } else if let Some(v) = field.strip_prefix("topology=") {
            if !v.chars().all(|c| c.is_ascii_hexdigit()) {
                return Err(CorpusError::Parse {
                    line: 1,
                    message: format!("topology digest `{v}` is not hex"),
                });
            }
            meta.topology_hash = v.to_string();
            have_topology = true;
        } else {
            return Err(CorpusError::Parse {
                line: 1,
                message: format!("unexpected header field `{field}`"),
            });
        }
    }
    if !(have_seed && have_topology) {
        return Err(CorpusError::Parse {
            line: 1,
            message: "header needs seed= and topology=".into(),
        });
    }
    Ok(meta)
}

pub fn write_corpus<W: Write>(corpus: &Corpus, mut w: W) -> Result<(), CorpusError> {
    writeln!(w, "{}", header_line(&corpus.metadata))?;
    for trace in &corpus.traces {
        let record = serde_json::to_string(trace).expect("trace serializes");
        writeln!(w, "{record}")?;
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(r: R) -> Result<Corpus, CorpusError> {
    let mut lines = r.lines();
    let header = match lines.next() {
        Some(l) => l?,
        None => {
            return Err(CorpusError::Parse {
                line: 1,
                message: "empty file".into(),
            })
        }
    };
    let metadata = parse_header(header.trim_end_matches('\r'))?;
    let mut traces = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let trace: Trace = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if !seen.insert(trace.trace_id.clone()) {
            return Err(CorpusError::DuplicateTraceId(trace.trace_id));
        }
        traces.push(trace);
    }
    Ok(Corpus { metadata, traces })
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_corpus(corpus, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    read_corpus(BufReader::new(File::open(path)?))
}
