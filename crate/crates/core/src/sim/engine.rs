//! Discrete-event execution of a topology in virtual time.
//!
//! Every service owns a fixed worker pool and a FIFO queue. A request holds
//! its worker from dequeue until its workflow ends, including while it waits
//! on callees, so stalled dependencies exhaust upstream pools. Platform
//! operations (database, cache, queue) only cost latency. All randomness
//! comes from one seeded generator consumed in event order. A fresh system
//! starts at virtual time zero with empty stores.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::parse_request_line;
use crate::digest::{derive_seed, short_digest};
use crate::executor::EntryMetrics;
use crate::fault_catalog::{FaultEffect, FaultSpec};
use crate::trace_model::{Component, Endpoint, Payload, Span, SpanStatus, Trace};

use super::topology::{BugFlag, OnError, ParamKind, StepKind, TopologySpec, ValueRef};

/// Virtual cost of bringing a fresh system up, charged by the executor
/// once per start.
pub const STARTUP_COST_US: u64 = 30_000_000;
/// How long an entry client waits before giving up.
pub const CLIENT_DEADLINE_US: u64 = 5_000_000;
/// Accepted clock skew for timestamp parameters.
pub const TIMESTAMP_SKEW_US: u64 = 60_000_000;
pub const DB_LATENCY_US: u64 = 2_000;
pub const CACHE_LATENCY_US: u64 = 300;
pub const MQ_LATENCY_US: u64 = 1_000;
pub const NET_LATENCY_US: u64 = 200;
pub const ASYNC_ENQUEUE_US: u64 = 50;
pub const THROW_LATENCY_US: u64 = 100;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SimError {
    #[error("service `{service}` has no step on endpoint {endpoint}")]
    UnknownTarget { service: String, endpoint: String },

    #[error("entry {0} is still in flight")]
    InFlight(usize),

    #[error("request at {at} us is earlier than the system clock {now} us")]
    InThePast { at: u64, now: u64 },
}

#[derive(Debug, Clone, PartialEq)]
struct CStep {
    kind: CKind,
    key: u32,
    endpoint: Endpoint,
    timeout: Option<u64>,
    retries: u32,
    is_async: bool,
    on_error: OnError,
    bug: Option<BugFlag>,
    is_write: bool,
    inputs: Vec<(String, ValueRef)>,
    output: Option<String>,
    op_name: String,
}

#[derive(Debug, Clone, PartialEq)]
enum CKind {
    Infra { latency: u64, is_db: bool },
    Call { svc: usize, iface: usize },
}

#[derive(Debug, Clone, PartialEq)]
struct CIface {
    name: String,
    method: String,
    line: String,
    path: Vec<String>,
    params: Vec<(String, ParamKind)>,
    steps: Vec<CStep>,
    server_endpoint: Endpoint,
}

#[derive(Debug, Clone, PartialEq)]
struct CService {
    name: String,
    workers: usize,
    ifaces: Vec<CIface>,
}

/// Topology lowered to indices for the event loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Compiled {
    services: Vec<CService>,
    keys: Vec<(usize, Endpoint)>,
    key_index: HashMap<(usize, Endpoint), u32>,
    routes: HashMap<(String, usize), Vec<(usize, usize)>>,
    secret: String,
    seed: u64,
}

impl Compiled {
    pub fn new(spec: &TopologySpec) -> Self {
        let svc_index: HashMap<&str, usize> =
            spec.services.iter().enumerate().map(|(i, s)| (s.name.as_str(), i)).collect();
        let mut keys = Vec::new();
        let mut key_index = HashMap::new();
        let mut routes: HashMap<(String, usize), Vec<(usize, usize)>> = HashMap::new();
        let mut services = Vec::new();
        for (si, svc) in spec.services.iter().enumerate() {
            let mut ifaces = Vec::new();
            for (ii, iface) in svc.interfaces.iter().enumerate() {
                let path: Vec<String> = iface.template_tokens().iter().map(|s| s.to_string()).collect();
                if !iface.internal {
                    routes.entry((iface.method.clone(), path.len())).or_default().push((si, ii));
                }
                let steps = iface
                    .steps
                    .iter()
                    .map(|st| {
                        let key = *key_index.entry((si, st.endpoint.clone())).or_insert_with(|| {
                            keys.push((si, st.endpoint.clone()));
                            (keys.len() - 1) as u32
                        });
                        let (kind, op_name) = match &st.kind {
                            StepKind::Call { service, interface } => {
                                let ts = svc_index[service.as_str()];
                                let ti = spec.services[ts]
                                    .interfaces
                                    .iter()
                                    .position(|i| i.name == *interface)
                                    .expect("validated");
                                let callee = &spec.services[ts].interfaces[ti];
                                (
                                    CKind::Call { svc: ts, iface: ti },
                                    format!("{} {}", callee.method, callee.uri_template),
                                )
                            }
                            k => {
                                let latency = match k {
                                    StepKind::Db => DB_LATENCY_US,
                                    StepKind::Cache => CACHE_LATENCY_US,
                                    _ => MQ_LATENCY_US,
                                };
                                (
                                    CKind::Infra {
                                        latency,
                                        is_db: *k == StepKind::Db,
                                    },
                                    format!("{}.{}", st.endpoint.framework, st.endpoint.method),
                                )
                            }
                        };
                        CStep {
                            kind,
                            key,
                            endpoint: st.endpoint.clone(),
                            timeout: st.timeout_us,
                            retries: st.retries,
                            is_async: st.is_async,
                            on_error: st.on_error,
                            bug: st.bug,
                            is_write: st.is_write(),
                            inputs: st.inputs.clone(),
                            output: st.output.clone(),
                            op_name,
                        }
                    })
                    .collect();
                ifaces.push(CIface {
                    name: iface.name.clone(),
                    method: iface.method.clone(),
                    line: format!("{} {}", iface.method, iface.uri_template),
                    path,
                    params: iface.params.iter().map(|p| (p.key.clone(), p.kind.clone())).collect(),
                    steps,
                    server_endpoint: Endpoint::new(Component::HTTP, "httpserver", iface.method.to_lowercase()),
                });
            }
            services.push(CService {
                name: svc.name.clone(),
                workers: svc.workers,
                ifaces,
            });
        }
        Compiled {
            services,
            keys,
            key_index,
            routes,
            secret: signing_secret(spec.seed),
            seed: spec.seed,
        }
    }

    fn key_of(&self, service: &str, endpoint: &Endpoint) -> Option<u32> {
        let si = self.services.iter().position(|s| s.name == service)?;
        self.key_index.get(&(si, endpoint.clone())).copied()
    }

    fn route(&self, line: &str) -> Option<(usize, usize, Vec<String>)> {
        let (method, tokens) = parse_request_line(line).ok()?;
        let candidates = self.routes.get(&(method, tokens.len()))?;
        candidates.iter().find_map(|&(s, i)| {
            let tpl = &self.services[s].ifaces[i].path;
            let fits = tpl.iter().zip(&tokens).all(|(t, v)| {
                if t.starts_with('{') && t.ends_with('}') {
                    !v.is_empty()
                } else {
                    t == v
                }
            });
            fits.then(|| (s, i, tokens.clone()))
        })
    }
}

pub fn signing_secret(topology_seed: u64) -> String {
    short_digest(&["secret".to_string(), topology_seed.to_string()])
}

/// The signature a client must present for `value`.
pub fn sign(secret: &str, value: &str) -> String {
    short_digest(&["sig", secret, value])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EndpointStats {
    pub invocations: u64,
    pub failures: u64,
    pub hits: u64,
}

#[derive(Debug, Clone, Copy)]
struct StepRecord {
    start: u64,
    key: u32,
    hit: bool,
    failed: bool,
}

#[derive(Debug, Clone, Copy)]
struct EntryRecord {
    complete: u64,
    latency: u64,
    ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Parent {
    Entry(usize),
    Call { exec: usize, token: u64 },
    Detached,
}

#[derive(Debug)]
struct ExecRec {
    req: Payload,
    path: Vec<String>,
    outputs: Vec<Payload>,
    parent_span: usize,
    step_span: Option<usize>,
    pending_resp: Payload,
}

#[derive(Debug)]
struct Exec {
    svc: usize,
    iface: usize,
    step: usize,
    parent: Parent,
    entry: usize,
    deadline: u64,
    token: u64,
    step_start: u64,
    step_log: usize,
    attempts: u32,
    error: Option<u16>,
    rec: Option<Box<ExecRec>>,
}

#[derive(Debug)]
struct TraceBuf {
    trace_id: String,
    spans: Vec<Span>,
    parent_idx: Vec<Option<usize>>,
    ended: Vec<bool>,
}

#[derive(Debug)]
struct EntryState {
    submit: u64,
    done: bool,
    status: SpanStatus,
    response: Payload,
    trace: Option<TraceBuf>,
    finished_trace: Option<Trace>,
}

#[derive(Debug, Clone)]
enum Ev {
    Arrive { exec: usize },
    StepDone { exec: usize, token: u64, code: Option<u16> },
    Continue { exec: usize, token: u64 },
    Timeout { exec: usize, token: u64 },
    Reply { exec: usize, token: u64, code: Option<u16>, resp: Option<Payload> },
    SendCall { exec: usize, token: u64 },
    ClientDeadline { entry: usize },
}

struct Scheduled {
    at: u64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, o: &Self) -> bool {
        (self.at, self.seq) == (o.at, o.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, o: &Self) -> Ordering {
        (o.at, o.seq).cmp(&(self.at, self.seq))
    }
}

#[derive(Debug, Clone)]
struct Armed {
    effect: FaultEffect,
    hits: u64,
}

/// Outcome of one entry request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryOutcome {
    pub status: SpanStatus,
    pub response: Payload,
}

/// One running system instance.
pub struct System {
    topo: Arc<Compiled>,
    now: u64,
    seq: u64,
    next_token: u64,
    rng: ChaCha8Rng,
    recording: bool,
    queue: BinaryHeap<Scheduled>,
    execs: Vec<Option<Exec>>,
    free_execs: Vec<usize>,
    busy: Vec<usize>,
    waiting: Vec<VecDeque<usize>>,
    entries: Vec<EntryState>,
    used_tokens: HashSet<String>,
    armed: HashMap<u32, Armed>,
    poisoned: HashSet<u32>,
    leaked_locks: HashSet<(usize, usize)>,
    deferred: BTreeMap<u32, u64>,
    delivered: HashMap<u32, u64>,
    step_log: Vec<StepRecord>,
    step_log_base: usize,
    entry_log: Vec<EntryRecord>,
    lost_log: Vec<u64>,
}

impl System {
    /// A fresh instance: empty stores, no faults, clock at the startup cost.
    pub fn start(spec: &TopologySpec, seed: u64) -> Self {
        Self::start_compiled(Arc::new(Compiled::new(spec)), seed)
    }

    pub fn start_compiled(topo: Arc<Compiled>, seed: u64) -> Self {
        let n = topo.services.len();
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ topo.seed, "latency"));
        System {
            topo,
            now: 0,
            seq: 0,
            next_token: 1,
            rng,
            recording: false,
            queue: BinaryHeap::new(),
            execs: Vec::new(),
            free_execs: Vec::new(),
            busy: vec![0; n],
            waiting: vec![VecDeque::new(); n],
            entries: Vec::new(),
            used_tokens: HashSet::new(),
            armed: HashMap::new(),
            poisoned: HashSet::new(),
            leaked_locks: HashSet::new(),
            deferred: BTreeMap::new(),
            delivered: HashMap::new(),
            step_log: Vec::new(),
            step_log_base: 0,
            entry_log: Vec::new(),
            lost_log: Vec::new(),
        }
    }

    /// Record full traces with payloads for every later request.
    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    /// The auth facility: the signature the system expects for `value`.
    pub fn auth_token(&self, value: &str) -> String {
        sign(&self.topo.secret, value)
    }

    fn schedule(&mut self, at: u64, ev: Ev) {
        self.seq += 1;
        self.queue.push(Scheduled { at, seq: self.seq, ev });
    }

    fn token(&mut self) -> u64 {
        self.next_token += 1;
        self.next_token
    }

    fn jitter(&mut self, base: u64) -> u64 {
        base + self.rng.gen_range(0..=base / 4)
    }

    /// Fills opaque request values the way a client obtains them from the
    /// live auth facility: each listed key that the routed interface declares
    /// as a signature is set to a valid signature of its source value.
    /// Returns the keys that could not be resolved.
    pub fn resolve_opaque(&self, line: &str, payload: &mut Payload, keys: &[String]) -> Vec<String> {
        let Some((si, ii, _)) = self.topo.route(line) else {
            return keys.to_vec();
        };
        let params = &self.topo.services[si].ifaces[ii].params;
        let mut unresolved = Vec::new();
        for key in keys {
            let src = params.iter().find_map(|(k, kind)| match kind {
                ParamKind::Signature(src) if k == key => Some(src),
                _ => None,
            });
            match src.and_then(|s| payload.get(s)).map(|v| sign(&self.topo.secret, v)) {
                Some(sig) => {
                    payload.insert(key.clone(), sig);
                }
                None => unresolved.push(key.clone()),
            }
        }
        unresolved
    }

    /// Processes every event up to and including `t`, then moves the clock to `t`.
    pub fn run_until(&mut self, t: u64) {
        while let Some(top) = self.queue.peek() {
            if top.at > t {
                break;
            }
            let Scheduled { at, ev, .. } = self.queue.pop().expect("peeked");
            self.now = at;
            self.handle(ev);
        }
        self.now = self.now.max(t);
    }

    /// Processes every event strictly before `t`, then moves the clock to
    /// `t`. Phase boundaries use this so that work starting at `t` belongs to
    /// the next phase.
    pub fn run_before(&mut self, t: u64) {
        while let Some(top) = self.queue.peek() {
            if top.at >= t {
                break;
            }
            let Scheduled { at, ev, .. } = self.queue.pop().expect("peeked");
            self.now = at;
            self.handle(ev);
        }
        self.now = self.now.max(t);
    }

    /// Runs until every submitted entry request has completed.
    pub fn drain(&mut self) {
        let horizon = self.now + CLIENT_DEADLINE_US + 1;
        self.run_until(horizon);
    }

    pub fn arm_fault(&mut self, service: &str, endpoint: &Endpoint, fault: &FaultSpec) -> Result<(), SimError> {
        let key = self.topo.key_of(service, endpoint).ok_or_else(|| SimError::UnknownTarget {
            service: service.to_string(),
            endpoint: endpoint.to_string(),
        })?;
        self.armed.insert(
            key,
            Armed {
                effect: fault.effect.clone(),
                hits: 0,
            },
        );
        Ok(())
    }

    pub fn disarm_fault(&mut self, service: &str, endpoint: &Endpoint) -> Result<(), SimError> {
        let key = self.topo.key_of(service, endpoint).ok_or_else(|| SimError::UnknownTarget {
            service: service.to_string(),
            endpoint: endpoint.to_string(),
        })?;
        self.armed.remove(&key);
        Ok(())
    }

    pub fn fault_hits(&self, service: &str, endpoint: &Endpoint) -> u64 {
        self.topo
            .key_of(service, endpoint)
            .and_then(|k| self.armed.get(&k))
            .map_or(0, |a| a.hits)
    }

    /// Submits an entry request at the current clock and returns its handle.
    pub fn submit(&mut self, line: &str, payload: Payload) -> usize {
        let now = self.now;
        let entry = self.entries.len();
        let trace_id = short_digest(&["trace".to_string(), self.topo.seed.to_string(), entry.to_string()]);
        self.entries.push(EntryState {
            submit: now,
            done: false,
            status: SpanStatus::Ok,
            response: Payload::new(),
            trace: None,
            finished_trace: None,
        });
        self.schedule(now + CLIENT_DEADLINE_US, Ev::ClientDeadline { entry });

        let topo = Arc::clone(&self.topo);
        let Some((si, ii, path)) = topo.route(line) else {
            self.reject(entry, line, payload, 404, trace_id, None);
            return entry;
        };
        let iface = &topo.services[si].ifaces[ii];
        if let Some(code) = self.validate_params(iface, &payload) {
            self.reject(entry, line, payload, code, trace_id, Some((si, ii)));
            return entry;
        }
        for (key, kind) in &iface.params {
            if matches!(kind, ParamKind::Session | ParamKind::Idempotency) {
                self.used_tokens.insert(payload[key].clone());
            }
        }
        let rec = if self.recording {
            self.entries[entry].trace = Some(TraceBuf {
                trace_id: trace_id.clone(),
                spans: vec![root_span(&trace_id, &topo.services[si].name, iface, line, &payload, now)],
                parent_idx: vec![None],
                ended: vec![false],
            });
            Some(Box::new(ExecRec {
                req: payload,
                path,
                outputs: Vec::new(),
                parent_span: 0,
                step_span: None,
                pending_resp: Payload::new(),
            }))
        } else {
            None
        };
        let exec = self.new_exec(si, ii, Parent::Entry(entry), entry, now + CLIENT_DEADLINE_US, rec);
        self.schedule(now, Ev::Arrive { exec });
        entry
    }

    fn validate_params(&self, iface: &CIface, payload: &Payload) -> Option<u16> {
        for (key, kind) in &iface.params {
            let v = payload.get(key);
            match kind {
                ParamKind::Session | ParamKind::Idempotency => match v {
                    Some(v) if !v.is_empty() && !self.used_tokens.contains(v) => {}
                    _ => return Some(409),
                },
                ParamKind::Timestamp => {
                    let ok = v
                        .and_then(|v| v.parse::<u64>().ok())
                        .is_some_and(|ts| ts.abs_diff(self.now) <= TIMESTAMP_SKEW_US);
                    if !ok {
                        return Some(400);
                    }
                }
                ParamKind::Signature(src) => {
                    let expected = payload.get(src).map(|s| sign(&self.topo.secret, s));
                    if v.is_none() || v != expected.as_ref() {
                        return Some(401);
                    }
                }
                ParamKind::Const(_) | ParamKind::Data => {}
            }
        }
        None
    }

    fn reject(
        &mut self,
        entry: usize,
        line: &str,
        payload: Payload,
        code: u16,
        trace_id: String,
        target: Option<(usize, usize)>,
    ) {
        let now = self.now;
        if self.recording {
            let (service, endpoint) = match target {
                Some((s, i)) => (
                    self.topo.services[s].name.clone(),
                    self.topo.services[s].ifaces[i].server_endpoint.clone(),
                ),
                None => ("gateway".to_string(), Endpoint::new(Component::HTTP, "httpserver", "unknown")),
            };
            let span = Span {
                span_id: format!("{trace_id}-0"),
                parent_id: None,
                service,
                endpoint,
                operation_name: line.to_string(),
                request_payload: payload,
                response_payload: Payload::new(),
                status: SpanStatus::Ok,
                start_time: now,
                duration: 0,
            };
            self.entries[entry].trace = Some(TraceBuf {
                trace_id,
                spans: vec![span],
                parent_idx: vec![None],
                ended: vec![false],
            });
        }
        let mut resp = Payload::new();
        resp.insert("status".into(), "error".into());
        resp.insert("code".into(), code.to_string());
        self.complete_entry(entry, Some(code), resp);
    }

    fn new_exec(
        &mut self,
        svc: usize,
        iface: usize,
        parent: Parent,
        entry: usize,
        deadline: u64,
        rec: Option<Box<ExecRec>>,
    ) -> usize {
        let e = Exec {
            svc,
            iface,
            step: 0,
            parent,
            entry,
            deadline,
            token: 0,
            step_start: 0,
            step_log: usize::MAX,
            attempts: 0,
            error: None,
            rec,
        };
        match self.free_execs.pop() {
            Some(i) => {
                self.execs[i] = Some(e);
                i
            }
            None => {
                self.execs.push(Some(e));
                self.execs.len() - 1
            }
        }
    }

    fn exec(&mut self, i: usize) -> &mut Exec {
        self.execs[i].as_mut().expect("live exec")
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Arrive { exec } => {
                let svc = self.exec(exec).svc;
                self.waiting[svc].push_back(exec);
                self.pump(svc);
            }
            Ev::StepDone { exec, token, code } | Ev::Reply { exec, token, code, resp: None } => {
                if self.is_current(exec, token) {
                    self.step_finished(exec, code, None);
                }
            }
            Ev::Reply {
                exec,
                token,
                code,
                resp: Some(resp),
            } => {
                if self.is_current(exec, token) {
                    self.step_finished(exec, code, Some(resp));
                }
            }
            Ev::Timeout { exec, token } => {
                if self.is_current(exec, token) {
                    self.step_finished(exec, Some(504), None);
                }
            }
            Ev::Continue { exec, token } => {
                if self.is_current(exec, token) {
                    self.advance(exec);
                }
            }
            Ev::SendCall { exec, token } => {
                if self.is_current(exec, token) {
                    self.send_call(exec, token);
                }
            }
            Ev::ClientDeadline { entry } => {
                if !self.entries[entry].done {
                    let mut resp = Payload::new();
                    resp.insert("status".into(), "error".into());
                    resp.insert("code".into(), "504".into());
                    self.complete_entry(entry, Some(504), resp);
                }
            }
        }
    }

    fn is_current(&self, exec: usize, token: u64) -> bool {
        self.execs.get(exec).and_then(Option::as_ref).is_some_and(|e| e.token == token)
    }

    /// Hands free workers to queued requests. Requests whose caller already
    /// gave up are dropped without doing any work.
    fn pump(&mut self, svc: usize) {
        while self.busy[svc] < self.topo.services[svc].workers {
            let Some(next) = self.waiting[svc].pop_front() else { break };
            self.busy[svc] += 1;
            let (stale, empty) = {
                let now = self.now;
                let e = self.execs[next].as_ref().expect("live exec");
                (now > e.deadline, self.topo.services[e.svc].ifaces[e.iface].steps.is_empty())
            };
            if stale {
                self.exec(next).error = Some(503);
                self.release(next);
            } else if empty {
                self.release(next);
            } else {
                self.start_step(next);
            }
        }
    }

    fn start_step(&mut self, exec: usize) {
        let topo = Arc::clone(&self.topo);
        let (svc, iface, k) = {
            let e = self.exec(exec);
            (e.svc, e.iface, e.step)
        };
        let ci = &topo.services[svc].ifaces[iface];
        if k >= ci.steps.len() {
            self.finish_exec(exec);
            return;
        }
        let step = &ci.steps[k];
        let now = self.now;
        let token = self.token();
        let armed = self.armed.get_mut(&step.key).map(|a| {
            a.hits += 1;
            a.effect.clone()
        });
        self.step_log.push(StepRecord {
            start: now,
            key: step.key,
            hit: armed.is_some(),
            failed: false,
        });
        let log_idx = self.step_log_base + self.step_log.len() - 1;
        {
            let e = self.exec(exec);
            e.token = token;
            e.step_start = now;
            e.step_log = log_idx;
        }
        let span = self.open_step_span(exec, step);

        // Decide how the step ends. `None` completion means it never returns.
        enum Plan {
            Done(Option<u64>, Option<u16>),
            Call { send_at: u64 },
        }
        let timeout = step.timeout;
        let plan = if self.poisoned.contains(&step.key) {
            Plan::Done(Some(now + THROW_LATENCY_US), Some(503))
        } else if matches!(step.kind, CKind::Infra { is_db: true, .. }) && self.leaked_locks.contains(&(svc, iface)) {
            Plan::Done(Some(now + timeout.unwrap_or(DB_LATENCY_US).min(50_000)), Some(500))
        } else if let Some(effect) = armed {
            match effect {
                FaultEffect::Throw(name) if name.contains("Timeout") => {
                    Plan::Done(timeout.map(|t| now + t), Some(504))
                }
                FaultEffect::Throw(_) => Plan::Done(Some(now + THROW_LATENCY_US), Some(500)),
                FaultEffect::Status { code, .. } => Plan::Done(Some(now + 2 * NET_LATENCY_US), Some(code)),
                FaultEffect::Delay(spec) => {
                    let d = spec.resolve(timeout);
                    match timeout {
                        Some(t) if d >= t => Plan::Done(Some(now + t), Some(504)),
                        _ => match step.kind {
                            CKind::Infra { latency, .. } => {
                                let l = self.jitter(latency);
                                Plan::Done(Some(now + d + l), None)
                            }
                            CKind::Call { .. } => Plan::Call { send_at: now + d },
                        },
                    }
                }
            }
        } else {
            match step.kind {
                CKind::Infra { latency, .. } => {
                    let l = self.jitter(latency);
                    Plan::Done(Some(now + l), None)
                }
                CKind::Call { .. } => Plan::Call { send_at: now },
            }
        };

        if self.recording {
            self.record_inputs(exec, step, span);
        }

        if step.is_async {
            match plan {
                Plan::Done(at, code) => {
                    if let (Some(span), Some(at)) = (span, at) {
                        // The outcome is known at dispatch; the span end is clipped on seal.
                        let entry = self.exec(exec).entry;
                        if let Some(tb) = self.entries[entry].trace.as_mut() {
                            finish_span(tb, span, at, code, None);
                        }
                    }
                    let failed = code.is_some() || at.is_none();
                    if failed {
                        self.mark_failed(log_idx);
                        self.apply_bug_on_failure(svc, iface, step);
                        self.degrade(step);
                    } else {
                        self.write_succeeded(step);
                    }
                }
                Plan::Call { send_at } => {
                    // The reply is never awaited.
                    self.fire_call(exec, step, send_at, None);
                }
            }
            {
                let e = self.exec(exec);
                if let Some(r) = e.rec.as_mut() {
                    r.step_span = None;
                    let out = infra_output(step, &r.pending_resp);
                    r.outputs.push(out);
                }
            }
            self.schedule(now + ASYNC_ENQUEUE_US, Ev::Continue { exec, token });
            return;
        }

        match plan {
            Plan::Done(Some(at), code) => self.schedule(at, Ev::StepDone { exec, token, code }),
            Plan::Done(None, _) => {}
            Plan::Call { send_at } => {
                if let Some(t) = timeout {
                    self.schedule(now + t, Ev::Timeout { exec, token });
                }
                if send_at == now {
                    self.send_call(exec, token);
                } else {
                    self.schedule(send_at, Ev::SendCall { exec, token });
                }
            }
        }
    }

    fn send_call(&mut self, exec: usize, token: u64) {
        let topo = Arc::clone(&self.topo);
        let (svc, iface, k) = {
            let e = self.exec(exec);
            (e.svc, e.iface, e.step)
        };
        let step = &topo.services[svc].ifaces[iface].steps[k];
        self.fire_call(exec, step, self.now, Some(token));
    }

    fn fire_call(&mut self, exec: usize, step: &CStep, at: u64, reply_token: Option<u64>) {
        let CKind::Call { svc: ts, iface: ti } = step.kind else {
            unreachable!("call step")
        };
        let (entry, parent_deadline, step_start) = {
            let e = self.exec(exec);
            (e.entry, e.deadline, e.step_start)
        };
        let deadline = match step.timeout {
            Some(t) => parent_deadline.min(step_start + t),
            None => parent_deadline,
        };
        let parent = match reply_token {
            Some(token) => Parent::Call { exec, token },
            None => Parent::Detached,
        };
        let topo = Arc::clone(&self.topo);
        let rec = self.execs[exec].as_ref().and_then(|e| e.rec.as_ref()).and_then(|r| {
            r.step_span.map(|span| {
                let path = topo.services[ts].ifaces[ti].path.clone();
                Box::new(ExecRec {
                    req: r.pending_resp.clone(),
                    path,
                    outputs: Vec::new(),
                    parent_span: span,
                    step_span: None,
                    pending_resp: Payload::new(),
                })
            })
        });
        let callee = self.new_exec(ts, ti, parent, entry, deadline, rec);
        self.schedule(at + NET_LATENCY_US, Ev::Arrive { exec: callee });
    }

    fn mark_failed(&mut self, log_idx: usize) {
        if log_idx >= self.step_log_base {
            if let Some(r) = self.step_log.get_mut(log_idx - self.step_log_base) {
                r.failed = true;
            }
        }
    }

    fn apply_bug_on_failure(&mut self, svc: usize, iface: usize, step: &CStep) {
        match step.bug {
            Some(BugFlag::NoRetry) => {
                self.poisoned.insert(step.key);
            }
            Some(BugFlag::NoRollback) => {
                self.leaked_locks.insert((svc, iface));
            }
            _ => {}
        }
    }

    fn write_succeeded(&mut self, step: &CStep) {
        if !step.is_write {
            return;
        }
        let flushed = self.deferred.remove(&step.key).unwrap_or(0);
        if step.endpoint.component == Component::MQ {
            *self.delivered.entry(step.key).or_default() += 1 + flushed;
        }
    }

    /// Side effects of a failed step whose error is not propagated.
    fn degrade(&mut self, step: &CStep) {
        if !step.is_write {
            return;
        }
        match step.on_error {
            OnError::CatchAndDegrade => *self.deferred.entry(step.key).or_default() += 1,
            OnError::Ignore => self.lost_log.push(self.now),
            OnError::Propagate => {}
        }
    }

    fn step_finished(&mut self, exec: usize, code: Option<u16>, resp: Option<Payload>) {
        let topo = Arc::clone(&self.topo);
        let (svc, iface, k, log_idx) = {
            let e = self.exec(exec);
            e.token = 0;
            (e.svc, e.iface, e.step, e.step_log)
        };
        let step = &topo.services[svc].ifaces[iface].steps[k];
        let now = self.now;

        if self.recording {
            let e = self.execs[exec].as_mut().expect("live");
            let entry = e.entry;
            if let Some(r) = e.rec.as_mut() {
                let out = match (&step.kind, code, resp) {
                    (_, Some(_), _) => Payload::new(),
                    (CKind::Call { .. }, None, Some(p)) => p,
                    (_, None, _) => infra_output(step, &r.pending_resp),
                };
                if let Some(span) = r.step_span.take() {
                    if let Some(tb) = self.entries[entry].trace.as_mut() {
                        finish_span(tb, span, now, code, Some(out.clone()));
                    }
                }
                r.outputs.push(out);
            }
        }

        match code {
            None => {
                self.write_succeeded(step);
                self.advance(exec);
            }
            Some(code) => {
                self.mark_failed(log_idx);
                self.apply_bug_on_failure(svc, iface, step);
                let attempts = self.exec(exec).attempts;
                if attempts < step.retries && !self.poisoned.contains(&step.key) {
                    let e = self.exec(exec);
                    e.attempts += 1;
                    if let Some(r) = e.rec.as_mut() {
                        r.outputs.pop();
                    }
                    self.start_step(exec);
                    return;
                }
                match step.on_error {
                    OnError::Propagate => {
                        self.exec(exec).error = Some(code);
                        self.finish_exec(exec);
                    }
                    _ => {
                        self.degrade(step);
                        self.advance(exec);
                    }
                }
            }
        }
    }

    fn advance(&mut self, exec: usize) {
        let e = self.exec(exec);
        e.step += 1;
        e.attempts = 0;
        e.token = 0;
        self.start_step(exec);
    }

    fn finish_exec(&mut self, exec: usize) {
        let svc = self.release(exec);
        self.pump(svc);
    }

    /// Frees the worker and answers the caller; returns the service index.
    fn release(&mut self, exec: usize) -> usize {
        let e = self.execs[exec].take().expect("live exec");
        self.free_execs.push(exec);
        let now = self.now;
        self.busy[e.svc] -= 1;
        let resp = e.rec.as_ref().map(|r| {
            let ci = &self.topo.services[e.svc].ifaces[e.iface];
            match e.parent {
                Parent::Entry(_) => entry_response(ci, &r.req, e.error),
                _ => callee_response(&self.topo.services[e.svc].name, ci, &r.req, e.error),
            }
        });
        match e.parent {
            Parent::Entry(entry) => {
                if !self.entries[entry].done {
                    self.complete_entry(entry, e.error, resp.unwrap_or_default());
                }
            }
            Parent::Call { exec: p, token } => {
                self.schedule(
                    now + NET_LATENCY_US,
                    Ev::Reply {
                        exec: p,
                        token,
                        code: e.error.map(|c| if c == 503 { 502 } else { c }),
                        resp,
                    },
                );
            }
            Parent::Detached => {}
        }
        e.svc
    }

    fn complete_entry(&mut self, entry: usize, error: Option<u16>, response: Payload) {
        let now = self.now;
        let st = &mut self.entries[entry];
        st.done = true;
        st.status = error.map_or(SpanStatus::Ok, SpanStatus::Error);
        self.entry_log.push(EntryRecord {
            complete: now,
            latency: now - st.submit,
            ok: error.is_none(),
        });
        if let Some(mut tb) = st.trace.take() {
            tb.spans[0].response_payload = response.clone();
            tb.spans[0].status = st.status;
            tb.ended[0] = true;
            tb.spans[0].duration = now - tb.spans[0].start_time;
            st.finished_trace = Some(seal_trace(tb));
        }
        st.response = response;
    }

    fn open_step_span(&mut self, exec: usize, step: &CStep) -> Option<usize> {
        if !self.recording {
            return None;
        }
        let now = self.now;
        let (entry, parent_span, svc) = {
            let e = self.execs[exec].as_ref()?;
            (e.entry, e.rec.as_ref()?.parent_span, e.svc)
        };
        let service = self.topo.services[svc].name.clone();
        let tb = self.entries[entry].trace.as_mut()?;
        if tb.ended[parent_span] {
            return None;
        }
        let idx = tb.spans.len();
        tb.spans.push(Span {
            span_id: format!("{}-{idx}", tb.trace_id),
            parent_id: Some(tb.spans[parent_span].span_id.clone()),
            service,
            endpoint: step.endpoint.clone(),
            operation_name: step.op_name.clone(),
            request_payload: Payload::new(),
            response_payload: Payload::new(),
            status: SpanStatus::Ok,
            start_time: now,
            duration: 0,
        });
        tb.parent_idx.push(Some(parent_span));
        tb.ended.push(false);
        if let Some(r) = self.exec(exec).rec.as_mut() {
            r.step_span = Some(idx);
        }
        Some(idx)
    }

    fn record_inputs(&mut self, exec: usize, step: &CStep, span: Option<usize>) {
        let e = self.execs[exec].as_mut().expect("live");
        let entry = e.entry;
        let Some(r) = e.rec.as_mut() else { return };
        let mut req = Payload::new();
        for (name, vr) in &step.inputs {
            let v = match vr {
                ValueRef::Path(i) => r.path.get(*i).cloned(),
                ValueRef::Req(k) => r.req.get(k).cloned(),
                ValueRef::Step(j, k) => r.outputs.get(*j).and_then(|p| p.get(k)).cloned(),
                ValueRef::Lit(v) => Some(v.clone()),
            };
            req.insert(name.clone(), v.unwrap_or_default());
        }
        r.pending_resp = req.clone();
        if let Some(span) = span {
            if let Some(tb) = self.entries[entry].trace.as_mut() {
                tb.spans[span].request_payload = req;
            }
        }
    }

    pub fn is_done(&self, entry: usize) -> bool {
        self.entries.get(entry).is_some_and(|e| e.done)
    }

    pub fn outcome(&self, entry: usize) -> Result<EntryOutcome, SimError> {
        let e = self.entries.get(entry).filter(|e| e.done).ok_or(SimError::InFlight(entry))?;
        Ok(EntryOutcome {
            status: e.status,
            response: e.response.clone(),
        })
    }

    /// The recorded trace of a completed entry request (recording mode only).
    pub fn take_trace(&mut self, entry: usize) -> Option<Trace> {
        self.entries.get_mut(entry).and_then(|e| e.finished_trace.take())
    }

    /// Submits one request and runs until it completes.
    pub fn submit_and_wait(&mut self, line: &str, payload: Payload) -> (EntryOutcome, Option<Trace>) {
        let h = self.submit(line, payload);
        while !self.is_done(h) {
            let next = self.queue.peek().map(|s| s.at).expect("pending entry has a deadline event");
            self.run_until(next);
        }
        (self.outcome(h).expect("done"), self.take_trace(h))
    }

    /// Entry-point metrics over requests completing in `[from, to)`.
    pub fn entry_metrics(&self, from: u64, to: u64) -> EntryMetrics {
        let lo = self.entry_log.partition_point(|r| r.complete < from);
        let hi = self.entry_log.partition_point(|r| r.complete < to);
        let window = &self.entry_log[lo..hi];
        let mut lat: Vec<u64> = window.iter().map(|r| r.latency).collect();
        lat.sort_unstable();
        let pick = |q: f64| -> u64 {
            if lat.is_empty() {
                0
            } else {
                let rank = ((q * lat.len() as f64).ceil() as usize).clamp(1, lat.len());
                lat[rank - 1]
            }
        };
        let secs = (to.saturating_sub(from)) as f64 / 1e6;
        EntryMetrics {
            samples: window.len() as u64,
            successes: window.iter().filter(|r| r.ok).count() as u64,
            p50_us: pick(0.50),
            p95_us: pick(0.95),
            throughput: if secs > 0.0 { window.len() as f64 / secs } else { 0.0 },
        }
    }

    /// Step counters at one (service, endpoint), attributed by step start time.
    pub fn endpoint_stats(&self, from: u64, to: u64, service: &str, endpoint: &Endpoint) -> EndpointStats {
        let Some(key) = self.topo.key_of(service, endpoint) else {
            return EndpointStats::default();
        };
        let lo = self.step_log.partition_point(|r| r.start < from);
        let hi = self.step_log.partition_point(|r| r.start < to);
        let mut s = EndpointStats::default();
        for r in self.step_log[lo..hi].iter().filter(|r| r.key == key) {
            s.invocations += 1;
            s.failures += r.failed as u64;
            s.hits += r.hit as u64;
        }
        s
    }

    /// Invocation counts for every (service, endpoint) over the whole log.
    pub fn all_endpoint_invocations(&self) -> BTreeMap<(String, Endpoint), u64> {
        let mut out = BTreeMap::new();
        for r in &self.step_log {
            let (si, ep) = &self.topo.keys[r.key as usize];
            *out.entry((self.topo.services[*si].name.clone(), ep.clone())).or_default() += 1;
        }
        out
    }

    /// Writes dropped without a trace in `[from, to)`.
    pub fn lost_effects(&self, from: u64, to: u64) -> u64 {
        self.lost_log.iter().filter(|&&t| t >= from && t < to).count() as u64
    }

    /// Messages that reached the queue behind an MQ write endpoint.
    pub fn delivered_messages(&self, service: &str, endpoint: &Endpoint) -> u64 {
        self.topo
            .key_of(service, endpoint)
            .and_then(|k| self.delivered.get(&k))
            .copied()
            .unwrap_or(0)
    }

    /// Degraded writes still waiting for a successful retry.
    pub fn pending_deferred(&self) -> u64 {
        self.deferred.values().sum()
    }

    /// Drops metric records older than `t` to bound memory in long runs.
    pub fn discard_logs_before(&mut self, t: u64) {
        let n = self.step_log.partition_point(|r| r.start < t);
        self.step_log.drain(..n);
        self.step_log_base += n;
        let n = self.entry_log.partition_point(|r| r.complete < t);
        self.entry_log.drain(..n);
        self.lost_log.retain(|&x| x >= t);
    }

    /// Busy workers per service, for diagnostics.
    pub fn busy_workers(&self) -> BTreeMap<String, usize> {
        self.topo
            .services
            .iter()
            .zip(&self.busy)
            .map(|(s, b)| (s.name.clone(), *b))
            .collect()
    }
}

fn root_span(trace_id: &str, service: &str, iface: &CIface, line: &str, payload: &Payload, now: u64) -> Span {
    Span {
        span_id: format!("{trace_id}-0"),
        parent_id: None,
        service: service.to_string(),
        endpoint: iface.server_endpoint.clone(),
        operation_name: line.to_string(),
        request_payload: payload.clone(),
        response_payload: Payload::new(),
        status: SpanStatus::Ok,
        start_time: now,
        duration: 0,
    }
}

fn infra_output(step: &CStep, inputs: &Payload) -> Payload {
    let mut out = Payload::new();
    match &step.output {
        Some(name) => {
            let mut parts: Vec<&str> = vec![&step.op_name];
            parts.extend(inputs.values().map(String::as_str));
            out.insert(name.clone(), short_digest(&parts)[..12].to_string());
        }
        None => {
            out.insert("result".into(), "ok".into());
        }
    }
    out
}

fn entry_response(iface: &CIface, req: &Payload, error: Option<u16>) -> Payload {
    let mut out = Payload::new();
    if let Some(code) = error {
        out.insert("status".into(), "error".into());
        out.insert("code".into(), code.to_string());
        return out;
    }
    for (key, kind) in &iface.params {
        if !matches!(kind, ParamKind::Signature(_)) {
            if let Some(v) = req.get(key) {
                out.insert(key.clone(), v.clone());
            }
        }
    }
    out.insert("status".into(), "success".into());
    out
}

fn callee_response(service: &str, iface: &CIface, req: &Payload, error: Option<u16>) -> Payload {
    let mut out = Payload::new();
    if let Some(code) = error {
        out.insert("error".into(), code.to_string());
        return out;
    }
    let mut parts: Vec<&str> = vec![service, &iface.name];
    parts.extend(req.values().map(String::as_str));
    out.insert("ref".into(), short_digest(&parts)[..12].to_string());
    out
}

fn finish_span(tb: &mut TraceBuf, span: usize, now: u64, code: Option<u16>, resp: Option<Payload>) {
    if tb.ended[span] {
        return;
    }
    tb.ended[span] = true;
    let s = &mut tb.spans[span];
    s.duration = now.saturating_sub(s.start_time);
    s.status = code.map_or(SpanStatus::Ok, SpanStatus::Error);
    match (code, resp) {
        (Some(c), _) => {
            s.response_payload.insert("error".into(), c.to_string());
        }
        (None, Some(p)) => s.response_payload = p,
        (None, None) => {}
    }
}

/// Closes unfinished spans at the root's end and clips children to parents.
fn seal_trace(mut tb: TraceBuf) -> Trace {
    let root_end = tb.spans[0].end_time();
    for i in 1..tb.spans.len() {
        let parent = tb.parent_idx[i].expect("non-root has a parent");
        let parent_end = tb.spans[parent].end_time().min(root_end);
        let s = &mut tb.spans[i];
        if !tb.ended[i] {
            s.duration = parent_end.saturating_sub(s.start_time);
        }
        if s.end_time() > parent_end {
            s.duration = parent_end.saturating_sub(s.start_time);
        }
    }
    Trace {
        trace_id: tb.trace_id.clone(),
        root: tb.spans[0].span_id.clone(),
        spans: tb.spans,
    }
}
