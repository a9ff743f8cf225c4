//! Trace complexity scoring and two-level top-K selection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::aggregation::InterfaceCluster;
use crate::trace_model::{Corpus, Trace};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SelectionError {
    #[error("weights must be in [0,1] and sum to 1, got ({0}, {1}, {2})")]
    InvalidWeights(f64, f64, f64),

    #[error("k must be at least 1")]
    ZeroK,

    #[error("malformed weights `{0}`, expected w_len,w_div,w_dur")]
    MalformedWeights(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexityWeights {
    w_len: f64,
    w_div: f64,
    w_dur: f64,
}

impl ComplexityWeights {
    pub fn new(w_len: f64, w_div: f64, w_dur: f64) -> Result<Self, SelectionError> {
        let in_range = |w: f64| (0.0..=1.0).contains(&w);
        if !(in_range(w_len) && in_range(w_div) && in_range(w_dur))
            || ((w_len + w_div + w_dur) - 1.0).abs() > 1e-9
        {
            return Err(SelectionError::InvalidWeights(w_len, w_div, w_dur));
        }
        Ok(ComplexityWeights { w_len, w_div, w_dur })
    }

    pub fn parse(text: &str) -> Result<Self, SelectionError> {
        let parts: Vec<f64> = text
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| SelectionError::MalformedWeights(text.to_string()))?;
        match parts[..] {
            [a, b, c] => Self::new(a, b, c),
            _ => Err(SelectionError::MalformedWeights(text.to_string())),
        }
    }

    pub fn len(&self) -> f64 {
        self.w_len
    }

    pub fn div(&self) -> f64 {
        self.w_div
    }

    pub fn dur(&self) -> f64 {
        self.w_dur
    }
}

impl Default for ComplexityWeights {
    fn default() -> Self {
        ComplexityWeights {
            w_len: 1.0 / 3.0,
            w_div: 1.0 / 3.0,
            w_dur: 1.0 / 3.0,
        }
    }
}

/// Raw complexity factors of one trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Factors {
    pub spans: f64,
    pub diversity: f64,
    pub duration: f64,
}

/// Unique services plus unique (component, framework) pairs.
pub fn diversity(trace: &Trace) -> usize {
    let services: BTreeSet<&str> = trace.spans.iter().map(|s| s.service.as_str()).collect();
    let infra: BTreeSet<(_, &str)> = trace
        .spans
        .iter()
        .map(|s| (s.endpoint.component, s.endpoint.framework.as_str()))
        .collect();
    services.len() + infra.len()
}

pub fn factors(trace: &Trace) -> Factors {
    Factors {
        spans: trace.spans.len() as f64,
        diversity: diversity(trace) as f64,
        duration: trace.duration() as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    fn empty() -> Self {
        Range {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }

    fn include(&mut self, v: f64) {
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    /// Min-max normalization; a degenerate range maps to 0.
    pub fn normalize(&self, v: f64) -> f64 {
        if self.max > self.min {
            ((v - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusNorms {
    pub spans: Range,
    pub diversity: Range,
    pub duration: Range,
}

impl CorpusNorms {
    pub fn from_traces<'a>(traces: impl IntoIterator<Item = &'a Trace>) -> Self {
        let mut n = CorpusNorms {
            spans: Range::empty(),
            diversity: Range::empty(),
            duration: Range::empty(),
        };
        for t in traces {
            let f = factors(t);
            n.spans.include(f.spans);
            n.diversity.include(f.diversity);
            n.duration.include(f.duration);
        }
        n
    }

    pub fn from_corpus(corpus: &Corpus) -> Self {
        Self::from_traces(&corpus.traces)
    }
}

pub fn score_factors(f: &Factors, w: &ComplexityWeights, norms: &CorpusNorms) -> f64 {
    w.w_len * norms.spans.normalize(f.spans)
        + w.w_div * norms.diversity.normalize(f.diversity)
        + w.w_dur * norms.duration.normalize(f.duration)
}

/// Weighted sum of normalized span count, component diversity and duration.
pub fn trace_complexity(trace: &Trace, w: &ComplexityWeights, norms: &CorpusNorms) -> f64 {
    score_factors(&factors(trace), w, norms)
}

/// Arithmetic mean of the member scores; members without a score are skipped.
pub fn interface_score(cluster: &InterfaceCluster, scores: &BTreeMap<String, f64>) -> f64 {
    let vals: Vec<f64> = cluster
        .member_trace_ids
        .iter()
        .filter_map(|id| scores.get(id).copied())
        .collect();
    if vals.is_empty() {
        return 0.0;
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredInterface {
    pub interface_id: String,
    pub template: String,
    pub aggregate: f64,
    pub best_trace_id: String,
    pub best_score: f64,
    pub best_factors: Factors,
}

/// Scores every cluster and pairs it with its most complex member.
pub fn score_interfaces(
    corpus: &Corpus,
    clusters: &[InterfaceCluster],
    w: &ComplexityWeights,
) -> Vec<ScoredInterface> {
    let norms = CorpusNorms::from_corpus(corpus);
    let by_id: BTreeMap<&str, &Trace> = corpus.traces.iter().map(|t| (t.trace_id.as_str(), t)).collect();
    let scores: BTreeMap<String, f64> = corpus
        .traces
        .iter()
        .map(|t| (t.trace_id.clone(), trace_complexity(t, w, &norms)))
        .collect();
    clusters
        .iter()
        .filter_map(|c| {
            let mut best: Option<(&str, f64)> = None;
            for id in &c.member_trace_ids {
                let s = scores.get(id).copied()?;
                best = match best {
                    Some((bid, bs)) if bs > s || (bs == s && bid <= id.as_str()) => Some((bid, bs)),
                    _ => Some((id.as_str(), s)),
                };
            }
            let (best_id, best_score) = best?;
            Some(ScoredInterface {
                interface_id: c.interface_id.clone(),
                template: c.template_string(),
                aggregate: interface_score(c, &scores),
                best_trace_id: best_id.to_string(),
                best_score,
                best_factors: factors(by_id[best_id]),
            })
        })
        .collect()
}

/// Orders interfaces by descending aggregate, ties by interface id.
pub fn rank(scored: &[ScoredInterface]) -> Vec<ScoredInterface> {
    let mut ranked = scored.to_vec();
    ranked.sort_by(|a, b| {
        b.aggregate
            .total_cmp(&a.aggregate)
            .then_with(|| a.interface_id.cmp(&b.interface_id))
    });
    ranked
}

/// The `k` highest-aggregate interfaces with their representative trace.
/// `k` beyond the cluster count returns every cluster.
pub fn select_top_k(scored: &[ScoredInterface], k: usize) -> Result<Vec<ScoredInterface>, SelectionError> {
    if k == 0 {
        return Err(SelectionError::ZeroK);
    }
    let mut ranked = rank(scored);
    ranked.truncate(k);
    Ok(ranked)
}

/// Ranked report: rank, interface, aggregate, chosen trace, factor breakdown.
pub fn render_selection_report(ranked: &[ScoredInterface]) -> String {
    let mut out = String::from("# rank interface_id aggregate trace_id trace_score spans diversity duration_us template\n");
    for (i, s) in ranked.iter().enumerate() {
        let _ = writeln!(
            out,
            "{} {} {:.6} {} {:.6} {} {} {} {}",
            i + 1,
            s.interface_id,
            s.aggregate,
            s.best_trace_id,
            s.best_score,
            s.best_factors.spans,
            s.best_factors.diversity,
            s.best_factors.duration,
            s.template
        );
    }
    out
}
