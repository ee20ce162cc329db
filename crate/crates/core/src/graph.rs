//! Provenance graphs and source-independence scoring.
//!
//! Documents and issuers form a directed graph whose edges point from a
//! document to its direct ancestors: the organization that issued it and
//! every upstream source it cites. Two supports are dependent when their
//! ancestor sets — everything reachable within `k_hops` edges, counting a
//! fragment's own issuer as a one-hop ancestor — intersect. The
//! independence score `g_indep` is the exact fraction of unordered support
//! pairs with disjoint ancestries, kept as a reduced rational so threshold
//! comparisons never lose to floating-point rounding.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{CitationRef, Fragment, PolicySnapshot};

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Errors raised by independence scoring.
#[derive(Debug, Error)]
pub enum GraphError {
    /// Scores are undefined without at least one support.
    #[error("independence scoring requires at least one support")]
    EmptySupports,
}

// ---------------------------------------------------------------------------
// Exact shares
// ---------------------------------------------------------------------------

/// A reduced non-negative rational `num / den` with `den > 0`.
///
/// Shares and independence scores are compared against policy thresholds
/// exactly: the `f64` threshold is lifted to a rational via its binary
/// expansion, so `2/3` against a stored `0.6666666666666666` compares
/// `Greater` rather than falling to rounding noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Share {
    num: u64,
    den: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

impl Share {
    /// Construct a reduced share. Panics on a zero denominator, which is a
    /// programming error (counts are always taken over non-empty sets).
    pub fn new(num: u64, den: u64) -> Share {
        assert!(den != 0, "share denominator must be positive");
        let g = gcd(num, den);
        Share { num: num / g, den: den / g }
    }

    pub fn zero() -> Share {
        Share { num: 0, den: 1 }
    }

    pub fn one() -> Share {
        Share { num: 1, den: 1 }
    }

    pub fn num(&self) -> u64 {
        self.num
    }

    pub fn den(&self) -> u64 {
        self.den
    }

    /// Nearest floating-point value, for display and trace output only.
    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Exact comparison against a floating-point threshold. The threshold
    /// is interpreted as the rational its bit pattern denotes. Panics on
    /// NaN (policy validation excludes it); ±infinity compares as expected.
    pub fn cmp_f64(&self, threshold: f64) -> Ordering {
        assert!(!threshold.is_nan(), "cannot compare a share against NaN");
        match BigRational::from_float(threshold) {
            Some(r) => {
                BigRational::new(BigInt::from(self.num), BigInt::from(self.den)).cmp(&r)
            }
            None => {
                if threshold > 0.0 {
                    Ordering::Less
                } else {
                    Ordering::Greater
                }
            }
        }
    }

    /// `self >= threshold`, exactly.
    pub fn ge_f64(&self, threshold: f64) -> bool {
        self.cmp_f64(threshold) != Ordering::Less
    }

    /// `self <= threshold`, exactly.
    pub fn le_f64(&self, threshold: f64) -> bool {
        self.cmp_f64(threshold) != Ordering::Greater
    }
}

impl fmt::Display for Share {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

/// A node in the provenance graph: a document or an issuing organization.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum NodeId {
    Doc(String),
    Issuer(String),
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Doc(id) => write!(f, "doc:{id}"),
            NodeId::Issuer(id) => write!(f, "issuer:{id}"),
        }
    }
}

impl From<&CitationRef> for NodeId {
    fn from(r: &CitationRef) -> NodeId {
        match r {
            CitationRef::Doc(id) => NodeId::Doc(id.clone()),
            CitationRef::Issuer(id) => NodeId::Issuer(id.clone()),
        }
    }
}

/// Background citation knowledge for documents outside the candidate pool,
/// keyed by document id.
pub type CitationIndex = BTreeMap<String, Vec<CitationRef>>;

/// Directed ancestry graph over documents and issuers.
///
/// Edges run from a document to its direct ancestors. Citations of unknown
/// documents keep a placeholder node and record a warning rather than
/// failing the build.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProvenanceGraph {
    nodes: BTreeSet<NodeId>,
    parents: BTreeMap<NodeId, BTreeSet<NodeId>>,
    warnings: Vec<String>,
}

impl ProvenanceGraph {
    /// Build the ancestry graph from pool fragments and background
    /// citations. Every fragment contributes a document node, an issuer
    /// node, a document-to-issuer edge, and one edge per upstream citation.
    pub fn build(fragments: &[Fragment], citations: &CitationIndex) -> ProvenanceGraph {
        let mut graph = ProvenanceGraph::default();
        let mut known_docs: BTreeSet<&str> = BTreeSet::new();
        for f in fragments {
            known_docs.insert(f.doc_id.as_str());
        }
        for doc_id in citations.keys() {
            known_docs.insert(doc_id.as_str());
        }

        let mut cited: Vec<(String, NodeId)> = Vec::new();
        for f in fragments {
            let doc = NodeId::Doc(f.doc_id.clone());
            graph.add_edge(doc.clone(), NodeId::Issuer(f.issuer.clone()));
            for r in &f.upstream_citations {
                cited.push((f.doc_id.clone(), NodeId::from(r)));
            }
        }
        for (doc_id, refs) in citations {
            for r in refs {
                cited.push((doc_id.clone(), NodeId::from(r)));
            }
        }
        for (from_doc, target) in cited {
            if let NodeId::Doc(target_doc) = &target {
                if !known_docs.contains(target_doc.as_str()) {
                    graph.warnings.push(format!(
                        "dangling reference: doc:{from_doc} cites unknown doc:{target_doc}; placeholder node retained"
                    ));
                }
            }
            graph.add_edge(NodeId::Doc(from_doc), target);
        }
        graph
    }

    fn add_edge(&mut self, from: NodeId, to: NodeId) {
        self.nodes.insert(from.clone());
        self.nodes.insert(to.clone());
        self.parents.entry(from).or_default().insert(to);
    }

    /// Direct ancestors of a node, if it has any.
    pub fn parents_of(&self, node: &NodeId) -> Option<&BTreeSet<NodeId>> {
        self.parents.get(node)
    }

    /// All nodes, in canonical order.
    pub fn nodes(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.iter()
    }

    /// Warnings recorded during the build (dangling references).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Everything reachable from `start` within `k` ancestor edges,
    /// including `start` itself (zero edges).
    pub fn ancestors(&self, start: &NodeId, k: u32) -> BTreeSet<NodeId> {
        let mut seen: BTreeSet<NodeId> = BTreeSet::from([start.clone()]);
        let mut frontier: VecDeque<(NodeId, u32)> = VecDeque::from([(start.clone(), 0)]);
        while let Some((node, depth)) = frontier.pop_front() {
            if depth == k {
                continue;
            }
            if let Some(parents) = self.parents.get(&node) {
                for p in parents {
                    if seen.insert(p.clone()) {
                        frontier.push_back((p.clone(), depth + 1));
                    }
                }
            }
        }
        seen
    }
}

/// Convenience wrapper mirroring the graph-construction operation name.
pub fn build_graph(fragments: &[Fragment], citations: &CitationIndex) -> ProvenanceGraph {
    ProvenanceGraph::build(fragments, citations)
}

// ---------------------------------------------------------------------------
// Independence scoring
// ---------------------------------------------------------------------------

/// An unordered support pair flagged for shared ancestry, with the
/// lexicographically least shared node as witness.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlaggedPair {
    pub a: String,
    pub b: String,
    pub witness: NodeId,
}

/// Concentration of supports held by each key (issuer or author).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharesReport {
    pub shares: BTreeMap<String, Share>,
    pub max_share: Share,
    /// Holder of the maximum share (first in key order on ties).
    pub max_holder: String,
}

/// Full outcome of independence scoring over a support set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndependenceReport {
    /// Exact fraction of unordered support pairs with disjoint ancestries.
    pub g_indep: Share,
    /// Number of unordered pairs scored.
    pub pairs: u64,
    /// Pairs with intersecting ancestor sets.
    pub flagged_pairs: Vec<FlaggedPair>,
    /// True when fewer than two supports made the score vacuous (1/1).
    pub vacuous: bool,
    /// Ancestry depth used.
    pub k_hops: u32,
    /// Share of supports per issuer.
    pub issuer_shares: BTreeMap<String, Share>,
    pub max_issuer_share: Share,
    /// Share of supports per author, when the author cap is enforced.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub author_shares: Option<BTreeMap<String, Share>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub max_author_share: Option<Share>,
    /// `g_indep >= g_indep_min`, compared exactly.
    pub pass_independence: bool,
    /// `max_issuer_share <= issuer_cap`, compared exactly (inclusive).
    pub pass_issuer_cap: bool,
    /// Author cap check; true when the cap is disabled.
    pub pass_author_cap: bool,
    /// Conjunction of the three checks above.
    pub pass: bool,
}

fn concentration<'a>(
    supports: &'a [Fragment],
    key: impl Fn(&'a Fragment) -> &'a str,
) -> SharesReport {
    let n = supports.len() as u64;
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for f in supports {
        *counts.entry(key(f).to_string()).or_insert(0) += 1;
    }
    let shares: BTreeMap<String, Share> =
        counts.iter().map(|(k, c)| (k.clone(), Share::new(*c, n))).collect();
    let (max_holder, max_share) = shares
        .iter()
        .max_by(|(ka, a), (kb, b)| {
            // Largest share wins; first key in order wins ties.
            (a.num() * b.den()).cmp(&(b.num() * a.den())).then(kb.cmp(ka))
        })
        .map(|(k, s)| (k.clone(), *s))
        .expect("supports checked non-empty");
    SharesReport { shares, max_share, max_holder }
}

/// Share of supports contributed by each issuer, with the maximum.
pub fn issuer_shares(supports: &[Fragment]) -> Result<SharesReport, GraphError> {
    if supports.is_empty() {
        return Err(GraphError::EmptySupports);
    }
    Ok(concentration(supports, |f| f.issuer.as_str()))
}

/// Score the independence of a support set against route policy.
///
/// Each support's ancestor set is taken from its document node to depth
/// `policy.k_hops`. A pair is flagged when the sets intersect; the score
/// is the exact fraction of unflagged pairs. A single support yields the
/// vacuous score 1/1. Threshold checks (independence floor, issuer cap,
/// optional author cap) are carried out in exact rational arithmetic; the
/// issuer cap is inclusive.
pub fn g_indep(
    supports: &[Fragment],
    graph: &ProvenanceGraph,
    policy: &PolicySnapshot,
) -> Result<IndependenceReport, GraphError> {
    if supports.is_empty() {
        return Err(GraphError::EmptySupports);
    }

    let k = policy.k_hops;
    let ancestries: Vec<(&str, BTreeSet<NodeId>)> = supports
        .iter()
        .map(|f| (f.fragment_id.as_str(), graph.ancestors(&NodeId::Doc(f.doc_id.clone()), k)))
        .collect();

    let n = supports.len() as u64;
    let pairs = n * (n - 1) / 2;
    let mut flagged_pairs = Vec::new();
    for i in 0..ancestries.len() {
        for j in (i + 1)..ancestries.len() {
            let (id_a, set_a) = &ancestries[i];
            let (id_b, set_b) = &ancestries[j];
            if let Some(witness) = set_a.intersection(set_b).next() {
                flagged_pairs.push(FlaggedPair {
                    a: (*id_a).to_string(),
                    b: (*id_b).to_string(),
                    witness: witness.clone(),
                });
            }
        }
    }

    let vacuous = pairs == 0;
    let g = if vacuous {
        Share::one()
    } else {
        Share::new(pairs - flagged_pairs.len() as u64, pairs)
    };

    let issuers = concentration(supports, |f| f.issuer.as_str());
    let (author_shares, max_author_share, pass_author_cap) = if policy.author_cap_enabled {
        let authors = concentration(supports, |f| f.author.as_str());
        let pass = authors.max_share.le_f64(policy.author_cap);
        (Some(authors.shares), Some(authors.max_share), pass)
    } else {
        (None, None, true)
    };

    let pass_independence = g.ge_f64(policy.g_indep_min);
    let pass_issuer_cap = issuers.max_share.le_f64(policy.issuer_cap);

    Ok(IndependenceReport {
        g_indep: g,
        pairs,
        flagged_pairs,
        vacuous,
        k_hops: k,
        issuer_shares: issuers.shares,
        max_issuer_share: issuers.max_share,
        author_shares,
        max_author_share,
        pass_independence,
        pass_issuer_cap,
        pass_author_cap,
        pass: pass_independence && pass_issuer_cap && pass_author_cap,
    })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
