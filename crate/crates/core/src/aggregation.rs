//! Interface aggregation over root-span request lines.
//!
//! A fixed-depth parse tree in the style of Drain: lines are bucketed by
//! (HTTP method, token count), then descend through up to `tree_depth - 2`
//! leading path tokens. Each leaf holds clusters; a line joins the most
//! similar cluster when the fraction of equal tokens reaches the threshold,
//! turning mismatched positions into wildcards.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::digest::short_digest;
use crate::trace_model::Corpus;

pub const WILDCARD: &str = "<*>";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum AggregationError {
    #[error("malformed request line `{0}`")]
    MalformedRequestLine(String),

    #[error("trace `{0}` has no root span")]
    MissingRoot(String),

    #[error("cannot cluster an empty corpus")]
    EmptyCorpus,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateToken {
    Literal(String),
    Wildcard,
}

impl fmt::Display for TemplateToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TemplateToken::Literal(s) => f.write_str(s),
            TemplateToken::Wildcard => f.write_str(WILDCARD),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterfaceCluster {
    pub interface_id: String,
    pub http_method: String,
    pub template_tokens: Vec<TemplateToken>,
    pub member_trace_ids: Vec<String>,
}

impl InterfaceCluster {
    pub fn template_string(&self) -> String {
        render_template(&self.http_method, &self.template_tokens)
    }

    pub fn wildcard_positions(&self) -> Vec<usize> {
        self.template_tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == TemplateToken::Wildcard)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn render_template(method: &str, tokens: &[TemplateToken]) -> String {
    let path: Vec<String> = tokens.iter().map(ToString::to_string).collect();
    format!("{method} /{}", path.join("/"))
}

/// Stable id of an interface template.
pub fn interface_id(method: &str, tokens: &[TemplateToken]) -> String {
    short_digest(&[render_template(method, tokens)])
}

/// Splits `METHOD /a/b/c` into the method and its path tokens.
pub fn parse_request_line(line: &str) -> Result<(String, Vec<String>), AggregationError> {
    let malformed = || AggregationError::MalformedRequestLine(line.to_string());
    let mut parts = line.split(' ');
    let method = parts.next().filter(|m| !m.is_empty()).ok_or_else(malformed)?;
    let path = parts.next().filter(|p| !p.is_empty()).ok_or_else(malformed)?;
    if parts.next().is_some() || !path.starts_with('/') {
        return Err(malformed());
    }
    let rest = &path[1..];
    let tokens = if rest.is_empty() {
        Vec::new()
    } else {
        rest.split('/').map(str::to_string).collect()
    };
    Ok((method.to_string(), tokens))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrainParams {
    pub tree_depth: usize,
    pub similarity_threshold: f64,
    pub max_children: usize,
}

impl Default for DrainParams {
    fn default() -> Self {
        DrainParams {
            tree_depth: 4,
            similarity_threshold: 0.5,
            max_children: 100,
        }
    }
}

#[derive(Debug, Default)]
struct Node {
    children: HashMap<String, Node>,
    clusters: Vec<usize>,
}

#[derive(Debug)]
struct Group {
    method: String,
    tokens: Vec<TemplateToken>,
    members: Vec<String>,
}

/// Online template miner. Feed lines with [`DrainTree::add`].
#[derive(Debug)]
pub struct DrainTree {
    params: DrainParams,
    roots: HashMap<(String, usize), Node>,
    groups: Vec<Group>,
}

fn has_digit(token: &str) -> bool {
    token.bytes().any(|b| b.is_ascii_digit())
}

fn similarity(template: &[TemplateToken], tokens: &[String]) -> (f64, usize) {
    if tokens.is_empty() {
        return (1.0, 0);
    }
    let mut same = 0;
    let mut wild = 0;
    for (t, tok) in template.iter().zip(tokens) {
        match t {
            TemplateToken::Literal(l) if l == tok => same += 1,
            TemplateToken::Wildcard => wild += 1,
            _ => {}
        }
    }
    (same as f64 / tokens.len() as f64, wild)
}

impl DrainTree {
    pub fn new(params: DrainParams) -> Self {
        DrainTree {
            params,
            roots: HashMap::new(),
            groups: Vec::new(),
        }
    }

    fn leaf_mut(&mut self, method: &str, tokens: &[String]) -> &mut Node {
        let depth = self.params.tree_depth.saturating_sub(2);
        let max_children = self.params.max_children.max(1);
        let mut node = self
            .roots
            .entry((method.to_string(), tokens.len()))
            .or_default();
        for tok in tokens.iter().take(depth) {
            let key = if has_digit(tok) { WILDCARD.to_string() } else { tok.clone() };
            // The last free child slot is reserved for the wildcard branch.
            let key = if key == WILDCARD
                || node.children.contains_key(&key)
                || node.children.len() + 1 < max_children
            {
                key
            } else {
                WILDCARD.to_string()
            };
            node = node.children.entry(key).or_default();
        }
        node
    }

    /// Adds one request line and returns the index of the cluster it joined.
    pub fn add(&mut self, line: &str, member: &str) -> Result<usize, AggregationError> {
        let (method, tokens) = parse_request_line(line)?;
        let threshold = self.params.similarity_threshold;
        let leaf_clusters = self.leaf_mut(&method, &tokens).clusters.clone();

        let mut best: Option<(usize, f64, usize)> = None;
        for gi in leaf_clusters {
            let (sim, wild) = similarity(&self.groups[gi].tokens, &tokens);
            let better = match best {
                None => true,
                Some((_, bs, bw)) => sim > bs || (sim == bs && wild > bw),
            };
            if better {
                best = Some((gi, sim, wild));
            }
        }

        let chosen = match best {
            Some((gi, sim, _)) if sim >= threshold => {
                let group = &mut self.groups[gi];
                for (t, tok) in group.tokens.iter_mut().zip(&tokens) {
                    if let TemplateToken::Literal(l) = t {
                        if l != tok {
                            *t = TemplateToken::Wildcard;
                        }
                    }
                }
                group.members.push(member.to_string());
                gi
            }
            _ => {
                let gi = self.groups.len();
                self.groups.push(Group {
                    method: method.clone(),
                    tokens: tokens.iter().cloned().map(TemplateToken::Literal).collect(),
                    members: vec![member.to_string()],
                });
                self.leaf_mut(&method, &tokens).clusters.push(gi);
                gi
            }
        };
        Ok(chosen)
    }

    /// Finished clusters, sorted by interface id.
    pub fn clusters(&self) -> Vec<InterfaceCluster> {
        let mut out: Vec<InterfaceCluster> = self
            .groups
            .iter()
            .map(|g| InterfaceCluster {
                interface_id: interface_id(&g.method, &g.tokens),
                http_method: g.method.clone(),
                template_tokens: g.tokens.clone(),
                member_trace_ids: g.members.clone(),
            })
            .collect();
        out.sort_by(|a, b| a.interface_id.cmp(&b.interface_id));
        out
    }
}

/// Partitions the corpus into interface clusters keyed on root request lines.
pub fn cluster_interfaces(
    corpus: &Corpus,
    params: &DrainParams,
) -> Result<Vec<InterfaceCluster>, AggregationError> {
    if corpus.traces.is_empty() {
        return Err(AggregationError::EmptyCorpus);
    }
    let mut tree = DrainTree::new(*params);
    for trace in &corpus.traces {
        let line = trace
            .request_line()
            .ok_or_else(|| AggregationError::MissingRoot(trace.trace_id.clone()))?;
        tree.add(line, &trace.trace_id)?;
    }
    Ok(tree.clusters())
}

/// Maps trace id to the interface id of its cluster.
pub fn membership(clusters: &[InterfaceCluster]) -> BTreeMap<String, String> {
    clusters
        .iter()
        .flat_map(|c| {
            c.member_trace_ids
                .iter()
                .map(move |t| (t.clone(), c.interface_id.clone()))
        })
        .collect()
}

/// One line per cluster: `<interface_id> <member count> <template>`.
pub fn render_cluster_report(clusters: &[InterfaceCluster]) -> String {
    clusters
        .iter()
        .map(|c| format!("{} {} {}\n", c.interface_id, c.member_trace_ids.len(), c.template_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lit(s: &str) -> TemplateToken {
        TemplateToken::Literal(s.into())
    }

    #[test]
    fn request_line_parsing() {
        assert_eq!(
            parse_request_line("POST /api/login/alice").unwrap(),
            ("POST".into(), vec!["api".into(), "login".into(), "alice".into()])
        );
        assert_eq!(parse_request_line("GET /").unwrap(), ("GET".into(), vec![]));
        assert_eq!(
            parse_request_line("PUT /a//b").unwrap().1,
            vec!["a".to_string(), String::new(), "b".to_string()]
        );
        for bad in ["", "GET", "/only/path", "GET  /x", "GET x"] {
            assert!(parse_request_line(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn login_lines_share_one_template() {
        let mut tree = DrainTree::new(DrainParams::default());
        tree.add("POST /api/login/alice", "t1").unwrap();
        tree.add("POST /api/login/bob", "t2").unwrap();
        let clusters = tree.clusters();
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].template_string(), "POST /api/login/<*>");
        assert_eq!(clusters[0].template_tokens, vec![lit("api"), lit("login"), TemplateToken::Wildcard]);
    }

    #[test]
    fn identical_lines_have_no_wildcards() {
        let mut tree = DrainTree::new(DrainParams::default());
        for i in 0..1000 {
            tree.add("GET /health", &format!("t{i}")).unwrap();
        }
        let c = tree.clusters();
        assert_eq!(c.len(), 1);
        assert!(c[0].wildcard_positions().is_empty());
        assert_eq!(c[0].member_trace_ids.len(), 1000);
    }

    #[test]
    fn methods_and_lengths_never_share_clusters() {
        let mut tree = DrainTree::new(DrainParams::default());
        tree.add("GET /a/b", "1").unwrap();
        tree.add("POST /a/b", "2").unwrap();
        tree.add("GET /a/b/c", "3").unwrap();
        assert_eq!(tree.clusters().len(), 3);
    }

    #[test]
    fn interface_id_is_stable_across_runs() {
        let a = interface_id("POST", &[lit("api"), TemplateToken::Wildcard]);
        let b = interface_id("POST", &[lit("api"), TemplateToken::Wildcard]);
        assert_eq!(a, b);
        assert_ne!(a, interface_id("GET", &[lit("api"), TemplateToken::Wildcard]));
    }

    #[test]
    fn max_children_overflow_routes_to_wildcard() {
        let params = DrainParams {
            max_children: 3,
            ..DrainParams::default()
        };
        let mut tree = DrainTree::new(params);
        for name in ["alpha", "beta", "gamma", "delta", "epsilon"] {
            tree.add(&format!("GET /{name}/x/y"), name).unwrap();
        }
        let total: usize = tree.clusters().iter().map(|c| c.member_trace_ids.len()).sum();
        assert_eq!(total, 5);
    }
}
