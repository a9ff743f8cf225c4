//! Application-level fault library and endpoint matching.
//!
//! Catalog files hold one fault per line:
//!
//! ```text
//! <fault_id> <category> <Component>/<framework|*>/<method|*> <effect> [args]
//! ```
//!
//! where the effect is `throw <ExceptionName>`, `delay <duration|auto>` or
//! `status <code> [body]`. Durations take an optional `us`, `ms` or `s`
//! suffix (bare numbers are microseconds). `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::trace_model::{Component, Endpoint};

pub const DEFAULT_CATALOG: &str = include_str!("../assets/default.catalog");

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CatalogError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: duplicate fault id `{id}`")]
    DuplicateId { line: usize, id: String },

    #[error("cannot read catalog: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultCategory {
    PlatformException,
    CommLatency,
    CommProtocolError,
    CommManipulatedResponse,
}

impl FaultCategory {
    pub const ALL: [FaultCategory; 4] = [
        FaultCategory::PlatformException,
        FaultCategory::CommLatency,
        FaultCategory::CommProtocolError,
        FaultCategory::CommManipulatedResponse,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FaultCategory::PlatformException => "platform_exception",
            FaultCategory::CommLatency => "comm_latency",
            FaultCategory::CommProtocolError => "comm_protocol_error",
            FaultCategory::CommManipulatedResponse => "comm_manipulated_response",
        }
    }

    fn allows(self, effect: &FaultEffect) -> bool {
        matches!(
            (self, effect),
            (FaultCategory::PlatformException, FaultEffect::Throw(_))
                | (FaultCategory::CommProtocolError, FaultEffect::Throw(_))
                | (FaultCategory::CommLatency, FaultEffect::Delay(_))
                | (FaultCategory::CommManipulatedResponse, FaultEffect::Status { .. })
        )
    }
}

impl fmt::Display for FaultCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FaultCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FaultCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown category `{s}`"))
    }
}

/// Delay length. `Auto` resolves to twice the target step's timeout, or a
/// fixed default when the step has none.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DelaySpec {
    Auto,
    Fixed(u64),
}

pub const AUTO_DELAY_FALLBACK_US: u64 = 5_000_000;

impl DelaySpec {
    pub fn resolve(self, step_timeout_us: Option<u64>) -> u64 {
        match self {
            DelaySpec::Fixed(us) => us,
            DelaySpec::Auto => step_timeout_us.map_or(AUTO_DELAY_FALLBACK_US, |t| t.saturating_mul(2)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaultEffect {
    Throw(String),
    Delay(DelaySpec),
    Status { code: u16, body: Option<String> },
}

impl fmt::Display for FaultEffect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultEffect::Throw(e) => write!(f, "throw {e}"),
            FaultEffect::Delay(DelaySpec::Auto) => f.write_str("delay auto"),
            FaultEffect::Delay(DelaySpec::Fixed(us)) => write!(f, "delay {us}us"),
            FaultEffect::Status { code, body: None } => write!(f, "status {code}"),
            FaultEffect::Status { code, body: Some(b) } => write!(f, "status {code} {b}"),
        }
    }
}

/// Parses `250`, `250us`, `40ms` or `5s` into microseconds.
pub fn parse_duration_us(s: &str) -> Option<u64> {
    let (num, mult) = if let Some(n) = s.strip_suffix("us") {
        (n, 1)
    } else if let Some(n) = s.strip_suffix("ms") {
        (n, 1_000)
    } else if let Some(n) = s.strip_suffix('s') {
        (n, 1_000_000)
    } else {
        (s, 1)
    };
    num.parse::<u64>().ok()?.checked_mul(mult)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EndpointMatcher {
    pub component: Component,
    pub framework: Option<String>,
    pub method: Option<String>,
}

impl EndpointMatcher {
    pub fn matches(&self, ep: &Endpoint) -> bool {
        self.component == ep.component
            && self.framework.as_ref().is_none_or(|f| *f == ep.framework)
            && self.method.as_ref().is_none_or(|m| *m == ep.method)
    }
}

impl fmt::Display for EndpointMatcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}",
            self.component,
            self.framework.as_deref().unwrap_or("*"),
            self.method.as_deref().unwrap_or("*")
        )
    }
}

impl FromStr for EndpointMatcher {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('/').collect();
        let [c, fw, m] = parts[..] else {
            return Err(format!("malformed matcher `{s}`, expected Component/framework/method"));
        };
        let opt = |p: &str| -> Result<Option<String>, String> {
            match p {
                "*" => Ok(None),
                "" => Err(format!("empty field in matcher `{s}`")),
                p => Ok(Some(p.to_string())),
            }
        };
        Ok(EndpointMatcher {
            component: c.parse()?,
            framework: opt(fw)?,
            method: opt(m)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FaultSpec {
    pub fault_id: String,
    pub category: FaultCategory,
    pub applies_to: EndpointMatcher,
    pub effect: FaultEffect,
}

impl fmt::Display for FaultSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.fault_id, self.category, self.applies_to, self.effect)
    }
}

fn parse_effect(words: &[&str]) -> Result<FaultEffect, String> {
    match words {
        ["throw", exc] => Ok(FaultEffect::Throw(exc.to_string())),
        ["delay", "auto"] => Ok(FaultEffect::Delay(DelaySpec::Auto)),
        ["delay", d] => parse_duration_us(d)
            .map(|us| FaultEffect::Delay(DelaySpec::Fixed(us)))
            .ok_or_else(|| format!("bad duration `{d}`")),
        ["status", code, body @ ..] => {
            let code: u16 = code
                .parse()
                .ok()
                .filter(|c| (100..=599).contains(c))
                .ok_or_else(|| format!("bad status code `{code}`"))?;
            let body = (!body.is_empty()).then(|| body.join(" "));
            Ok(FaultEffect::Status { code, body })
        }
        [] => Err("missing effect".into()),
        [kind, ..] => Err(format!("unknown or malformed effect `{kind}`")),
    }
}

fn parse_fault(line: &str) -> Result<FaultSpec, String> {
    let words: Vec<&str> = line.split_whitespace().collect();
    let [id, category, matcher, effect @ ..] = &words[..] else {
        return Err("expected `<id> <category> <matcher> <effect>`".into());
    };
    let category: FaultCategory = category.parse()?;
    let effect = parse_effect(effect)?;
    if !category.allows(&effect) {
        return Err(format!("effect `{effect}` does not fit category {category}"));
    }
    Ok(FaultSpec {
        fault_id: id.to_string(),
        category,
        applies_to: matcher.parse()?,
        effect,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FaultCatalog {
    faults: BTreeMap<String, FaultSpec>,
}

impl FaultCatalog {
    pub fn parse(text: &str) -> Result<Self, CatalogError> {
        let mut faults = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fault = parse_fault(line).map_err(|message| CatalogError::Parse { line: i + 1, message })?;
            if faults.contains_key(&fault.fault_id) {
                return Err(CatalogError::DuplicateId {
                    line: i + 1,
                    id: fault.fault_id,
                });
            }
            faults.insert(fault.fault_id.clone(), fault);
        }
        Ok(FaultCatalog { faults })
    }

    pub fn builtin() -> Self {
        Self::parse(DEFAULT_CATALOG).expect("shipped catalog parses")
    }

    pub fn len(&self) -> usize {
        self.faults.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faults.is_empty()
    }

    pub fn get(&self, fault_id: &str) -> Option<&FaultSpec> {
        self.faults.get(fault_id)
    }

    /// All faults, ordered by id.
    pub fn iter(&self) -> impl Iterator<Item = &FaultSpec> {
        self.faults.values()
    }

    pub fn render(&self) -> String {
        self.iter().map(|f| format!("{f}\n")).collect()
    }
}

pub fn load_catalog(path: &Path) -> Result<FaultCatalog, CatalogError> {
    let text = std::fs::read_to_string(path).map_err(|e| CatalogError::Io(format!("{}: {e}", path.display())))?;
    FaultCatalog::parse(&text)
}

/// Every fault whose matcher accepts `endpoint`, ordered by fault id.
pub fn faults_for_endpoint<'a>(catalog: &'a FaultCatalog, endpoint: &Endpoint) -> Vec<&'a FaultSpec> {
    catalog.iter().filter(|f| f.applies_to.matches(endpoint)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ep(s: &str) -> Endpoint {
        s.parse().unwrap()
    }

    #[test]
    fn builtin_spans_all_categories() {
        let cat = FaultCatalog::builtin();
        assert!(cat.len() >= 12);
        for c in FaultCategory::ALL {
            assert!(cat.iter().any(|f| f.category == c), "{c} missing");
        }
        let sql = cat
            .iter()
            .find(|f| f.effect == FaultEffect::Throw("SQLTimeoutException".into()))
            .expect("SQLTimeoutException");
        assert_eq!(sql.applies_to.component, Component::Database);
    }

    #[test]
    fn mq_send_gets_timeout_and_serialization() {
        let cat = FaultCatalog::builtin();
        let effects: Vec<_> = faults_for_endpoint(&cat, &ep("MQ/mqclient/send"))
            .into_iter()
            .map(|f| f.effect.clone())
            .collect();
        assert!(effects.contains(&FaultEffect::Throw("TimeoutException".into())));
        assert!(effects.contains(&FaultEffect::Throw("SerializationException".into())));
    }

    #[test]
    fn http_call_gets_every_http_fault() {
        let cat = FaultCatalog::builtin();
        let fs = faults_for_endpoint(&cat, &ep("HTTP/httpclient/call"));
        let codes: Vec<u16> = fs
            .iter()
            .filter_map(|f| match f.effect {
                FaultEffect::Status { code, .. } => Some(code),
                _ => None,
            })
            .collect();
        for c in [500, 401, 504] {
            assert!(codes.contains(&c), "status {c}");
        }
        assert!(fs
            .iter()
            .any(|f| f.effect == FaultEffect::Throw("java.net.SocketTimeoutException".into())));
        assert!(fs.iter().any(|f| matches!(f.effect, FaultEffect::Delay(_))));
        let ids: Vec<&str> = fs.iter().map(|f| f.fault_id.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn unmatched_endpoint_is_empty() {
        let cat = FaultCatalog::parse("f1 platform_exception Database/*/* throw X\n").unwrap();
        assert!(faults_for_endpoint(&cat, &ep("Cache/kv/get")).is_empty());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dup = "a platform_exception Database/*/* throw X\n\na comm_latency MQ/*/* delay 5s\n";
        assert_eq!(
            FaultCatalog::parse(dup),
            Err(CatalogError::DuplicateId { line: 3, id: "a".into() })
        );
        for bad in [
            "x weird Database/*/* throw X",
            "x platform_exception Database/*/* explode",
            "x comm_latency Database/*/* throw X",
            "x comm_latency Database/* delay 5s",
            "x comm_manipulated_response HTTP/*/* status 9999",
        ] {
            let text = format!("# header\n{bad}\n");
            match FaultCatalog::parse(&text) {
                Err(CatalogError::Parse { line, .. }) => assert_eq!(line, 2, "{bad}"),
                other => panic!("{bad}: {other:?}"),
            }
        }
    }

    #[test]
    fn render_round_trips() {
        let cat = FaultCatalog::builtin();
        assert_eq!(FaultCatalog::parse(&cat.render()).unwrap(), cat);
    }

    #[test]
    fn durations_and_auto_delay() {
        assert_eq!(parse_duration_us("5s"), Some(5_000_000));
        assert_eq!(parse_duration_us("40ms"), Some(40_000));
        assert_eq!(parse_duration_us("17"), Some(17));
        assert_eq!(parse_duration_us("x"), None);
        assert_eq!(DelaySpec::Auto.resolve(Some(1_000_000)), 2_000_000);
        assert_eq!(DelaySpec::Auto.resolve(None), AUTO_DELAY_FALLBACK_US);
    }

    proptest! {
        #[test]
        fn loosening_a_matcher_never_shrinks_matches(
            c in 0usize..5, fw in "[ab]", m in "[xy]",
            efw in "[ab]", em in "[xy]", ec in 0usize..5,
        ) {
            let strict = EndpointMatcher {
                component: Component::ALL[c],
                framework: Some(fw),
                method: Some(m),
            };
            let target = Endpoint::new(Component::ALL[ec], efw, em);
            let looser = [
                EndpointMatcher { framework: None, ..strict.clone() },
                EndpointMatcher { method: None, ..strict.clone() },
                EndpointMatcher { framework: None, method: None, ..strict.clone() },
            ];
            if strict.matches(&target) {
                for l in &looser {
                    prop_assert!(l.matches(&target));
                }
            }
        }
    }
}
