//! Phase metrics, thresholds and the verdict function.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "PASS")]
    Pass,
    #[serde(rename = "FAIL_NO_RECOVERY")]
    FailNoRecovery,
    #[serde(rename = "FAIL_SILENT")]
    FailSilent,
    #[serde(rename = "FAIL_NO_IMPACT")]
    FailNoImpact,
    #[serde(rename = "STARTUP_FAILURE")]
    StartupFailure,
}

impl Verdict {
    pub const ALL: [Verdict; 5] = [
        Verdict::Pass,
        Verdict::FailNoRecovery,
        Verdict::FailSilent,
        Verdict::FailNoImpact,
        Verdict::StartupFailure,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "PASS",
            Verdict::FailNoRecovery => "FAIL_NO_RECOVERY",
            Verdict::FailSilent => "FAIL_SILENT",
            Verdict::FailNoImpact => "FAIL_NO_IMPACT",
            Verdict::StartupFailure => "STARTUP_FAILURE",
        }
    }

    pub fn is_pass(self) -> bool {
        self == Verdict::Pass
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Verdict {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Verdict::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown verdict `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub duration_us: u64,
    pub rate_per_s: f64,
}

impl PhaseSpec {
    /// Evenly spaced request offsets within the phase.
    pub fn request_offsets(&self) -> impl Iterator<Item = u64> {
        let gap = (1e6 / self.rate_per_s).max(1.0);
        let n = ((self.duration_us as f64) * self.rate_per_s / 1e6).floor() as u64;
        (0..n).map(move |i| (i as f64 * gap) as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub startup: PhaseSpec,
    pub injection: PhaseSpec,
    pub recovery: PhaseSpec,
    /// Recovery endpoint assertions ignore steps started this soon after the
    /// fault is disarmed, while the backlog built up under injection drains.
    #[serde(default = "default_settle_us")]
    pub settle_us: u64,
}

pub const DEFAULT_SETTLE_US: u64 = 10_000_000;

fn default_settle_us() -> u64 {
    DEFAULT_SETTLE_US
}

impl Default for PhaseConfig {
    fn default() -> Self {
        let p = PhaseSpec {
            duration_us: 60_000_000,
            rate_per_s: 10.0,
        };
        PhaseConfig {
            startup: p,
            injection: p,
            recovery: p,
            settle_us: DEFAULT_SETTLE_US,
        }
    }
}

impl PhaseConfig {
    pub fn validate(&self) -> Result<(), OracleError> {
        for p in [self.startup, self.injection, self.recovery] {
            if p.duration_us == 0 || p.rate_per_s.is_nan() || p.rate_per_s <= 0.0 {
                return Err(OracleError::InvalidPhase);
            }
        }
        if self.settle_us >= self.recovery.duration_us {
            return Err(OracleError::InvalidPhase);
        }
        Ok(())
    }
}

/// Entry-point metrics over the requests completing in one phase.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EntryMetrics {
    pub samples: u64,
    pub successes: u64,
    pub p50_us: u64,
    pub p95_us: u64,
    /// Completed requests per virtual second.
    pub throughput: f64,
}

impl EntryMetrics {
    /// `None` marks an empty window, which is not the same as 0% success.
    pub fn success_rate(&self) -> Option<f64> {
        (self.samples > 0).then(|| self.successes as f64 / self.samples as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub entry: EntryMetrics,
    /// Steps intercepted by the armed fault.
    pub injection_hits: u64,
    /// Failed steps at the targeted (service, endpoint).
    pub endpoint_failures: u64,
    pub downstream_effect_ok: bool,
}

impl Default for PhaseMetrics {
    fn default() -> Self {
        PhaseMetrics {
            entry: EntryMetrics::default(),
            injection_hits: 0,
            endpoint_failures: 0,
            downstream_effect_ok: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub startup: Option<PhaseMetrics>,
    pub injection: Option<PhaseMetrics>,
    pub recovery: Option<PhaseMetrics>,
}

impl CaseMetrics {
    /// Drops every internal assertion point, keeping only entry metrics and
    /// the impact check.
    pub fn entry_only(&self) -> CaseMetrics {
        let strip = |p: Option<PhaseMetrics>| {
            p.map(|p| PhaseMetrics {
                endpoint_failures: 0,
                downstream_effect_ok: true,
                ..p
            })
        };
        CaseMetrics {
            startup: strip(self.startup),
            injection: strip(self.injection),
            recovery: strip(self.recovery),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OracleError {
    #[error("phase `{0}` was not recorded")]
    MissingPhase(&'static str),

    #[error("phase `{0}` has no completed requests")]
    NoSamples(&'static str),

    #[error("thresholds violate 0 <= inject < recover <= startup <= 1: {0:?}")]
    InvalidThresholds(Thresholds),

    #[error("phase durations and rates must be positive")]
    InvalidPhase,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("cannot read criteria: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub startup_min_success: f64,
    pub inject_max_success: f64,
    pub recover_min_success: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            startup_min_success: 1.0,
            inject_max_success: 0.30,
            recover_min_success: 0.80,
        }
    }
}

impl Thresholds {
    pub fn validate(self) -> Result<Self, OracleError> {
        let ok = 0.0 <= self.inject_max_success
            && self.inject_max_success < self.recover_min_success
            && self.recover_min_success <= self.startup_min_success
            && self.startup_min_success <= 1.0;
        if ok {
            Ok(self)
        } else {
            Err(OracleError::InvalidThresholds(self))
        }
    }

    fn set(&mut self, field: &str, value: f64) -> Result<(), String> {
        match field {
            "startup_min_success" => self.startup_min_success = value,
            "inject_max_success" => self.inject_max_success = value,
            "recover_min_success" => self.recover_min_success = value,
            _ => return Err(format!("unknown criterion `{field}`")),
        }
        Ok(())
    }

    fn render(&self) -> String {
        format!(
            "startup_min_success={} inject_max_success={} recover_min_success={}",
            self.startup_min_success, self.inject_max_success, self.recover_min_success
        )
    }
}

/// Default thresholds plus per-interface overrides.
///
/// Text form, one scope per line:
///
/// ```text
/// default recover_min_success=0.85
/// 3fa29c0d11e2b7a4 inject_max_success=0.5
/// ```
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OracleCriteria {
    pub defaults: Thresholds,
    pub overrides: BTreeMap<String, Thresholds>,
}

impl OracleCriteria {
    pub fn for_interface(&self, interface_id: &str) -> Thresholds {
        self.overrides.get(interface_id).copied().unwrap_or(self.defaults)
    }

    pub fn parse(text: &str) -> Result<Self, OracleError> {
        let mut defaults = Thresholds::default();
        // (line, interface id, field assignments) per override line.
        type Override = (usize, String, Vec<(String, f64)>);
        let mut partial: Vec<Override> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| OracleError::Parse { line: i + 1, message };
            let mut words = line.split_whitespace();
            let scope = words.next().unwrap_or_default().to_string();
            let mut fields = Vec::new();
            for w in words {
                let (k, v) = w.split_once('=').ok_or_else(|| err(format!("expected key=value, got `{w}`")))?;
                let v: f64 = v.parse().map_err(|_| err(format!("bad number `{v}`")))?;
                fields.push((k.to_string(), v));
            }
            if fields.is_empty() {
                return Err(err("no criteria given".into()));
            }
            if scope == "default" {
                for (k, v) in &fields {
                    defaults.set(k, *v).map_err(err)?;
                }
                defaults.validate().map_err(|e| err(e.to_string()))?;
            } else {
                partial.push((i + 1, scope, fields));
            }
        }
        let mut overrides = BTreeMap::new();
        for (line, scope, fields) in partial {
            let mut t = defaults;
            for (k, v) in &fields {
                t.set(k, *v).map_err(|message| OracleError::Parse { line, message })?;
            }
            let t = t.validate().map_err(|e| OracleError::Parse {
                line,
                message: e.to_string(),
            })?;
            overrides.insert(scope, t);
        }
        Ok(OracleCriteria { defaults, overrides })
    }

    pub fn load(path: &Path) -> Result<Self, OracleError> {
        let text = std::fs::read_to_string(path).map_err(|e| OracleError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn render(&self) -> String {
        let mut out = format!("default {}\n", self.defaults.render());
        for (iface, t) in &self.overrides {
            out.push_str(&format!("{iface} {}\n", t.render()));
        }
        out
    }
}

pub const DERIVE_MARGIN: f64 = 0.05;

/// Lowers each interface's recovery bar to its observed healthy success
/// rate minus a margin, never raising it above the configured value.
/// Adjustments that would break the threshold ordering are skipped.
pub fn derive_criteria(observed_healthy: &BTreeMap<String, f64>, base: &OracleCriteria) -> OracleCriteria {
    let mut out = base.clone();
    for (iface, &rate) in observed_healthy {
        let current = base.for_interface(iface);
        let lowered = current.recover_min_success.min(rate - DERIVE_MARGIN);
        if lowered >= current.recover_min_success {
            continue;
        }
        let candidate = Thresholds {
            recover_min_success: lowered,
            ..current
        };
        if let Ok(t) = candidate.validate() {
            out.overrides.insert(iface.clone(), t);
        }
    }
    out
}

/// The five-way decision table. Checks run in a fixed order and the first
/// matching rule decides.
pub fn evaluate(m: &CaseMetrics, t: &Thresholds) -> Result<Verdict, OracleError> {
    let startup = m.startup.ok_or(OracleError::MissingPhase("startup"))?;
    let injection = m.injection.ok_or(OracleError::MissingPhase("injection"))?;
    let recovery = m.recovery.ok_or(OracleError::MissingPhase("recovery"))?;
    let s = startup.entry.success_rate().ok_or(OracleError::NoSamples("startup"))?;
    let i = injection.entry.success_rate().ok_or(OracleError::NoSamples("injection"))?;
    let r = recovery.entry.success_rate().ok_or(OracleError::NoSamples("recovery"))?;

    if s < t.startup_min_success {
        return Ok(Verdict::StartupFailure);
    }
    if injection.injection_hits == 0 {
        return Ok(Verdict::FailNoImpact);
    }
    if i > t.inject_max_success && injection.endpoint_failures > 0 && !injection.downstream_effect_ok {
        return Ok(Verdict::FailSilent);
    }
    if r < t.recover_min_success || recovery.endpoint_failures > 0 {
        return Ok(Verdict::FailNoRecovery);
    }
    Ok(Verdict::Pass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn phase(rate: f64, hits: u64, failures: u64, downstream_ok: bool) -> PhaseMetrics {
        let samples = 1000;
        PhaseMetrics {
            entry: EntryMetrics {
                samples,
                successes: (rate * samples as f64).round() as u64,
                ..EntryMetrics::default()
            },
            injection_hits: hits,
            endpoint_failures: failures,
            downstream_effect_ok: downstream_ok,
        }
    }

    fn metrics(s: f64, i: f64, r: f64, hits: u64, inj_fail: u64, rec_fail: u64, ok: bool) -> CaseMetrics {
        CaseMetrics {
            startup: Some(phase(s, 0, 0, true)),
            injection: Some(phase(i, hits, inj_fail, ok)),
            recovery: Some(phase(r, 0, rec_fail, true)),
        }
    }

    #[test]
    fn threshold_examples() {
        let t = Thresholds::default();
        assert_eq!(evaluate(&metrics(1.0, 0.2, 0.85, 5, 5, 0, true), &t), Ok(Verdict::Pass));
        assert_eq!(evaluate(&metrics(1.0, 0.2, 0.5, 5, 5, 0, true), &t), Ok(Verdict::FailNoRecovery));
        assert_eq!(evaluate(&metrics(1.0, 0.35, 0.85, 5, 5, 0, false), &t), Ok(Verdict::FailSilent));
        assert_eq!(evaluate(&metrics(0.99, 0.2, 0.85, 5, 5, 0, true), &t), Ok(Verdict::StartupFailure));
        assert_eq!(evaluate(&metrics(1.0, 1.0, 1.0, 0, 0, 0, true), &t), Ok(Verdict::FailNoImpact));
    }

    #[test]
    fn missing_and_empty_phases_are_errors() {
        let mut m = metrics(1.0, 0.2, 0.9, 1, 1, 0, true);
        m.recovery = None;
        assert_eq!(evaluate(&m, &Thresholds::default()), Err(OracleError::MissingPhase("recovery")));
        let mut m = metrics(1.0, 0.2, 0.9, 1, 1, 0, true);
        m.injection.as_mut().unwrap().entry.samples = 0;
        assert_eq!(evaluate(&m, &Thresholds::default()), Err(OracleError::NoSamples("injection")));
    }

    #[test]
    fn entry_only_hides_silent_failures() {
        let m = metrics(1.0, 1.0, 1.0, 10, 10, 0, false);
        let t = Thresholds::default();
        assert_eq!(evaluate(&m, &t), Ok(Verdict::FailSilent));
        assert_eq!(evaluate(&m.entry_only(), &t), Ok(Verdict::Pass));
    }

    #[test]
    fn mixed_window_rate() {
        let e = EntryMetrics {
            samples: 10,
            successes: 7,
            ..Default::default()
        };
        assert_eq!(e.success_rate(), Some(0.7));
        assert_eq!(EntryMetrics::default().success_rate(), None);
    }

    #[test]
    fn derive_uses_min_rule() {
        let base = OracleCriteria::default();
        assert_eq!(derive_criteria(&BTreeMap::new(), &base), base);
        let obs: BTreeMap<String, f64> = [("a".to_string(), 0.92), ("b".to_string(), 0.80)].into();
        let d = derive_criteria(&obs, &base);
        assert_eq!(d.for_interface("a").recover_min_success, 0.80);
        assert!((d.for_interface("b").recover_min_success - 0.75).abs() < 1e-12);
        assert_eq!(d.for_interface("zzz"), Thresholds::default());
    }

    #[test]
    fn criteria_file_round_trip() {
        let c = OracleCriteria::parse("# comment\nabc inject_max_success=0.5\n").unwrap();
        assert_eq!(c.defaults, Thresholds::default());
        assert_eq!(c.for_interface("abc").inject_max_success, 0.5);
        assert_eq!(c.for_interface("abc").recover_min_success, 0.8);
        assert_eq!(c.for_interface("other"), Thresholds::default());
        assert_eq!(OracleCriteria::parse(&c.render()).unwrap(), c);
        assert!(OracleCriteria::parse("default inject_max_success=0.9").is_err());
        assert!(OracleCriteria::parse("x bogus=1").is_err());
    }

    #[test]
    fn phase_offsets() {
        let p = PhaseConfig::default().startup;
        let offs: Vec<u64> = p.request_offsets().collect();
        assert_eq!(offs.len(), 600);
        assert_eq!(offs[1], 100_000);
        assert!(PhaseConfig::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn verdict_is_pure(s in 0u32..=10, i in 0u32..=10, r in 0u32..=10,
                           hits in 0u64..3, fi in 0u64..3, fr in 0u64..3, ok: bool) {
            let m = metrics(s as f64 / 10.0, i as f64 / 10.0, r as f64 / 10.0, hits, fi, fr, ok);
            let t = Thresholds::default();
            prop_assert_eq!(evaluate(&m, &t), evaluate(&m.clone(), &t));
        }
    }
}
