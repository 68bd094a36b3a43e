//! Anchor-function identification in stripped images.
//!
//! Two stages: a precision-first direct match against a named reference
//! graph, then caller inference and callee matching guided by the RTOS
//! boot-sequence knowledge base until no new binding appears.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use crate::funcgraph::{CallGraph, FunctionRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Rtos {
    Vxworks,
    RtThread,
    Nuttx,
    Zephyr,
}

/// Inclusive expected range for one feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FeatureRange {
    pub lo: u32,
    pub hi: u32,
}

impl FeatureRange {
    pub const ANY: FeatureRange = FeatureRange { lo: 0, hi: u32::MAX };

    pub const fn new(lo: u32, hi: u32) -> Self {
        FeatureRange { lo, hi }
    }

    pub fn contains(&self, v: u32) -> bool {
        self.lo <= v && v <= self.hi
    }

    fn similarity(&self, v: u32) -> f64 {
        if self.contains(v) {
            1.0
        } else if v < self.lo {
            sim(v as f64, self.lo as f64)
        } else {
            sim(v as f64, self.hi as f64)
        }
    }
}

impl Default for FeatureRange {
    fn default() -> Self {
        FeatureRange::ANY
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct KbNode {
    pub name: String,
    pub bb_count: FeatureRange,
    pub edge_count: FeatureRange,
    pub callee_count: FeatureRange,
    pub in_degree: FeatureRange,
    pub strings: BTreeSet<String>,
    /// Designated anchor function.
    pub anchor: bool,
    /// Drivers register underneath this function.
    pub registration: bool,
    /// Boundary symbols of an init-pointer table this function walks.
    pub pointer_table: Option<(String, String)>,
}

/// Boot-sequence knowledge for one RTOS.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KnowledgeBase {
    pub rtos: Rtos,
    /// Reset/startup node; every edge is reachable from it.
    pub entry: String,
    /// Code reachable from `entry` without passing one of these is BSP.
    pub bsp_boundary: Vec<String>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub heap_top_symbol: Option<String>,
    pub nodes: Vec<KbNode>,
    /// Expected caller -> callee relations.
    pub edges: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KbError {
    #[error("edge references unknown node `{0}`")]
    UnknownNode(String),
    #[error("duplicate node `{0}`")]
    DuplicateNode(String),
    #[error("knowledge base graph has a cycle through `{0}`")]
    Cycle(String),
    #[error("node `{0}` is not reachable from the entry node")]
    Unreachable(String),
}

impl KnowledgeBase {
    pub fn node(&self, name: &str) -> Option<&KbNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn kb_callers(&self, name: &str) -> Vec<&str> {
        self.edges.iter().filter(|(_, c)| c == name).map(|(p, _)| p.as_str()).collect()
    }

    pub fn kb_callees(&self, name: &str) -> Vec<&str> {
        self.edges.iter().filter(|(p, _)| p == name).map(|(_, c)| c.as_str()).collect()
    }

    pub fn anchors(&self) -> impl Iterator<Item = &KbNode> {
        self.nodes.iter().filter(|n| n.anchor)
    }

    /// Checks that edges name real nodes and form a DAG rooted at `entry`.
    pub fn validate(&self) -> Result<(), KbError> {
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(n.name.as_str()) {
                return Err(KbError::DuplicateNode(n.name.clone()));
            }
        }
        for name in
            core::iter::once(&self.entry).chain(&self.bsp_boundary).chain(self.edges.iter().flat_map(|(a, b)| [a, b]))
        {
            if !seen.contains(name.as_str()) {
                return Err(KbError::UnknownNode(name.clone()));
            }
        }
        // Kahn's algorithm for the cycle check.
        let mut indeg: BTreeMap<&str, usize> = self.nodes.iter().map(|n| (n.name.as_str(), 0)).collect();
        for (_, c) in &self.edges {
            *indeg.get_mut(c.as_str()).unwrap() += 1;
        }
        let mut ready: Vec<&str> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&n, _)| n).collect();
        let mut done = 0;
        while let Some(n) = ready.pop() {
            done += 1;
            for c in self.kb_callees(n) {
                let d = indeg.get_mut(c).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.push(c);
                }
            }
        }
        if done != self.nodes.len() {
            let stuck = indeg.iter().find(|(_, &d)| d > 0).map(|(&n, _)| n).unwrap_or_default();
            return Err(KbError::Cycle(stuck.into()));
        }
        let mut reach = BTreeSet::from([self.entry.as_str()]);
        let mut stack = alloc::vec![self.entry.as_str()];
        while let Some(n) = stack.pop() {
            for c in self.kb_callees(n) {
                if reach.insert(c) {
                    stack.push(c);
                }
            }
        }
        if let Some(n) = self.nodes.iter().find(|n| !reach.contains(n.name.as_str())) {
            return Err(KbError::Unreachable(n.name.clone()));
        }
        Ok(())
    }
}

/// Feature weights for [`score`]; they sum to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Weights {
    pub bb: f64,
    pub edges: f64,
    pub callees: f64,
    pub in_degree: f64,
    pub strings: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Weights { bb: 0.30, edges: 0.25, callees: 0.20, in_degree: 0.10, strings: 0.15 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct MatchConfig {
    pub weights: Weights,
    /// Direct matches must score strictly above this.
    pub first_pass_threshold: f64,
    /// ... and beat the runner-up by at least this much.
    pub margin: f64,
    /// Knowledge-base guided matches must reach this.
    pub iteration_threshold: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig { weights: Weights::default(), first_pass_threshold: 0.75, margin: 0.10, iteration_threshold: 0.95 }
    }
}

/// The features the score compares.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FeatureVector {
    pub bb_count: u32,
    pub edge_count: u32,
    pub callee_count: u32,
    pub in_degree: u32,
    pub strings: BTreeSet<String>,
}

impl From<&FunctionRecord> for FeatureVector {
    fn from(f: &FunctionRecord) -> Self {
        FeatureVector {
            bb_count: f.bb_count,
            edge_count: f.edge_count,
            callee_count: f.callee_entries.len() as u32,
            in_degree: f.in_degree,
            strings: f.string_refs.clone(),
        }
    }
}

/// `1 - |a-b| / max(a, b, 1)`
pub fn sim(a: f64, b: f64) -> f64 {
    1.0 - (a - b).abs() / a.max(b).max(1.0)
}

/// Jaccard index; two empty sets score 0 so featureless functions are not
/// rewarded.
pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn score_features(a: &FeatureVector, b: &FeatureVector, w: &Weights) -> f64 {
    w.bb * sim(a.bb_count as f64, b.bb_count as f64)
        + w.edges * sim(a.edge_count as f64, b.edge_count as f64)
        + w.callees * sim(a.callee_count as f64, b.callee_count as f64)
        + w.in_degree * sim(a.in_degree as f64, b.in_degree as f64)
        + w.strings * jaccard(&a.strings, &b.strings)
}

/// Similarity of two functions in [0, 1]; symmetric, 1 on identical
/// non-empty features.
pub fn score(candidate: &FunctionRecord, reference: &FunctionRecord, w: &Weights) -> f64 {
    score_features(&candidate.into(), &reference.into(), w)
}

/// Similarity of a function to a knowledge-base node's expected ranges.
pub fn score_node(candidate: &FunctionRecord, node: &KbNode, w: &Weights) -> f64 {
    w.bb * node.bb_count.similarity(candidate.bb_count)
        + w.edges * node.edge_count.similarity(candidate.edge_count)
        + w.callees * node.callee_count.similarity(candidate.callee_entries.len() as u32)
        + w.in_degree * node.in_degree.similarity(candidate.in_degree)
        + w.strings * jaccard(&node.strings, &candidate.string_refs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    FirstPass,
    Iterated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum BindingSource {
    /// Direct match against the reference graph.
    Direct,
    /// Sole graph caller of a bound node whose knowledge-base caller is unique.
    CallerInferred,
    /// Matched among the callees of a bound node.
    CalleeMatched,
    /// Named by a recovered symbol.
    Symbol,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    pub bindings: BTreeMap<String, u32>,
    pub scores: BTreeMap<String, f64>,
    pub sources: BTreeMap<String, BindingSource>,
    pub stage: Option<Stage>,
}

impl MatchResult {
    pub fn is_bound(&self, addr: u32) -> bool {
        self.bindings.values().any(|&a| a == addr)
    }

    pub fn name_at(&self, addr: u32) -> Option<&str> {
        self.bindings.iter().find(|(_, &a)| a == addr).map(|(n, _)| n.as_str())
    }

    fn bind(&mut self, name: &str, addr: u32, score: f64, source: BindingSource) {
        self.bindings.insert(name.into(), addr);
        self.scores.insert(name.into(), score);
        self.sources.insert(name.into(), source);
    }

    /// Bound knowledge-base anchors.
    pub fn anchors_bound<'a>(&'a self, kb: &'a KnowledgeBase) -> impl Iterator<Item = &'a str> + 'a {
        kb.anchors().filter(|n| self.bindings.contains_key(&n.name)).map(|n| n.name.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AnchorError {
    #[error("reference graph has no named functions")]
    NoReference,
    #[error("BSP boundary node(s) not bound: {0:?}")]
    BoundaryUnbound(Vec<String>),
}

/// Direct matching of every named reference function against the stripped
/// graph. A binding needs a best score above the threshold, a margin over
/// the runner-up, and must be the best reference for that stripped
/// function too.
pub fn first_pass(stripped: &CallGraph, reference: &CallGraph, cfg: &MatchConfig) -> Result<MatchResult, AnchorError> {
    let named: Vec<&FunctionRecord> = reference.functions.values().filter(|f| f.name.is_some()).collect();
    if named.is_empty() {
        return Err(AnchorError::NoReference);
    }
    let cands: Vec<(&FunctionRecord, FeatureVector)> = stripped.functions.values().map(|f| (f, f.into())).collect();
    // Best reference per stripped function, for the mutual-best check.
    let mut best_for_candidate: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    let mut proposals: Vec<(usize, u32, f64)> = Vec::new();
    for (ri, r) in named.iter().enumerate() {
        let rf: FeatureVector = (*r).into();
        let mut best: Option<(f64, u32)> = None;
        let mut runner = 0.0f64;
        for (c, cf) in &cands {
            let s = score_features(cf, &rf, &cfg.weights);
            let slot = best_for_candidate.entry(c.entry).or_insert((-1.0, usize::MAX));
            if s > slot.0 {
                *slot = (s, ri);
            } else if s == slot.0 {
                slot.1 = usize::MAX;
            }
            match best {
                Some((b, _)) if s <= b => runner = runner.max(s),
                _ => {
                    if let Some((b, _)) = best {
                        runner = runner.max(b);
                    }
                    best = Some((s, c.entry));
                }
            }
        }
        if let Some((b, addr)) = best {
            if b > cfg.first_pass_threshold && b - runner >= cfg.margin {
                proposals.push((ri, addr, b));
            }
        }
    }
    let mut result = MatchResult { stage: Some(Stage::FirstPass), ..Default::default() };
    for (ri, addr, s) in proposals {
        if best_for_candidate.get(&addr).map(|b| b.1) != Some(ri) {
            continue;
        }
        let name = named[ri].name.as_deref().unwrap();
        result.bind(name, addr, s, BindingSource::Direct);
    }
    Ok(result)
}

/// Binds every knowledge-base node whose name already labels a function
/// in `graph`, e.g. after applying a recovered symbol table.
pub fn bind_named(graph: &CallGraph, kb: &KnowledgeBase) -> MatchResult {
    let mut result = MatchResult { stage: Some(Stage::FirstPass), ..Default::default() };
    for n in &kb.nodes {
        if let Some(addr) = graph.by_name(&n.name) {
            if !result.is_bound(addr) {
                result.bind(&n.name, addr, 1.0, BindingSource::Symbol);
            }
        }
    }
    result
}

/// Best unbound candidate for `node` among `cands`, at or above the
/// iteration threshold. Ties go to the lowest address.
fn best_candidate(
    graph: &CallGraph,
    result: &MatchResult,
    node: &KbNode,
    cands: &BTreeSet<u32>,
    cfg: &MatchConfig,
) -> Option<(u32, f64)> {
    let mut best: Option<(u32, f64)> = None;
    for &c in cands {
        if result.is_bound(c) {
            continue;
        }
        let Some(f) = graph.get(c) else { continue };
        let s = score_node(f, node, &cfg.weights);
        if s >= cfg.iteration_threshold && best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    best
}

/// Infers the caller of a bound node when the knowledge base gives it a
/// single caller.
fn infer_caller(
    graph: &CallGraph,
    kb: &KnowledgeBase,
    result: &mut MatchResult,
    name: &str,
    cfg: &MatchConfig,
) -> Option<String> {
    let kb_callers = kb.kb_callers(name);
    let [caller] = kb_callers.as_slice() else { return None };
    if result.bindings.contains_key(*caller) {
        return None;
    }
    let addr = result.bindings[name];
    let cands: BTreeSet<u32> = graph.callers(addr).into_iter().filter(|&c| c != addr && !result.is_bound(c)).collect();
    let node = kb.node(caller)?;
    let (pick, score, source) = if cands.len() == 1 {
        (*cands.first().unwrap(), 1.0, BindingSource::CallerInferred)
    } else {
        let (a, s) = best_candidate(graph, result, node, &cands, cfg)?;
        (a, s, BindingSource::CalleeMatched)
    };
    result.bind(caller, pick, score, source);
    Some(String::from(*caller))
}

fn dfs(
    graph: &CallGraph,
    kb: &KnowledgeBase,
    result: &mut MatchResult,
    name: &str,
    cfg: &MatchConfig,
    visited: &mut BTreeSet<String>,
) -> bool {
    if !visited.insert(name.into()) {
        return false;
    }
    let Some(&addr) = result.bindings.get(name) else { return false };
    let mut changed = false;
    let cands = graph.callees(addr);
    for callee in kb.kb_callees(name) {
        if !result.bindings.contains_key(callee) {
            let Some(node) = kb.node(callee) else { continue };
            if let Some((a, s)) = best_candidate(graph, result, node, &cands, cfg) {
                result.bind(callee, a, s, BindingSource::CalleeMatched);
                changed = true;
            }
        }
        if result.bindings.contains_key(callee) {
            changed |= dfs(graph, kb, result, callee, cfg, visited);
        }
    }
    changed
}

/// Knowledge-base guided refinement. Monotone (never unbinds), keeps
/// bindings injective, and stops at a fixpoint.
pub fn iterate(result: &MatchResult, graph: &CallGraph, kb: &KnowledgeBase, cfg: &MatchConfig) -> MatchResult {
    let mut out = result.clone();
    out.stage = Some(Stage::Iterated);
    loop {
        let mut changed = false;
        // Caller inference closure over the worklist.
        let mut frontier: Vec<String> =
            kb.nodes.iter().filter(|n| out.bindings.contains_key(&n.name)).map(|n| n.name.clone()).collect();
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for s in &frontier {
                if let Some(c) = infer_caller(graph, kb, &mut out, s, cfg) {
                    next.push(c);
                    changed = true;
                }
            }
            frontier = next;
        }
        // Depth-first callee matching from every bound node.
        let bound: Vec<String> =
            kb.nodes.iter().filter(|n| out.bindings.contains_key(&n.name)).map(|n| n.name.clone()).collect();
        let mut visited = BTreeSet::new();
        for s in bound {
            changed |= dfs(graph, kb, &mut out, &s, cfg, &mut visited);
        }
        if !changed {
            return out;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BspRegion {
    pub functions: BTreeSet<u32>,
    /// Merged `[start, end)` ranges covering those functions.
    pub ranges: Vec<(u32, u64)>,
}

/// Functions reachable from the entry without passing a boundary node.
/// The entry is the bound KB entry node, else `fallback_entry`.
pub fn locate_bsp(
    result: &MatchResult,
    graph: &CallGraph,
    kb: &KnowledgeBase,
    fallback_entry: Option<u32>,
) -> Result<BspRegion, AnchorError> {
    let missing: Vec<String> = kb.bsp_boundary.iter().filter(|b| !result.bindings.contains_key(*b)).cloned().collect();
    if !missing.is_empty() {
        return Err(AnchorError::BoundaryUnbound(missing));
    }
    let stops: BTreeSet<u32> = kb.bsp_boundary.iter().map(|b| result.bindings[b]).collect();
    let Some(entry) = result.bindings.get(&kb.entry).copied().or(fallback_entry) else {
        return Ok(BspRegion::default());
    };
    let mut seen = BTreeSet::new();
    let mut stack = Vec::new();
    if !stops.contains(&entry) {
        stack.push(entry);
    }
    while let Some(f) = stack.pop() {
        if !seen.insert(f) {
            continue;
        }
        for c in graph.callees(f) {
            if !stops.contains(&c) && !seen.contains(&c) {
                stack.push(c);
            }
        }
    }
    let mut ranges: Vec<(u32, u64)> = Vec::new();
    for &f in &seen {
        let end = graph.get(f).map_or(f as u64, |r| r.end());
        match ranges.last_mut() {
            Some(last) if last.1 == f as u64 => last.1 = end,
            _ => ranges.push((f, end)),
        }
    }
    Ok(BspRegion { functions: seen, ranges })
}

/// One row of the anchor report: direct matches, anchors among them,
/// anchors still missing, anchors after iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchSummary {
    pub symbols: usize,
    pub direct: usize,
    pub anchors_first: usize,
    pub missing: usize,
    pub anchors_after: usize,
}

pub fn summarize(
    reference_symbols: usize,
    first: &MatchResult,
    iterated: &MatchResult,
    kb: &KnowledgeBase,
) -> MatchSummary {
    let total = kb.anchors().count();
    let af = first.anchors_bound(kb).count();
    MatchSummary {
        symbols: reference_symbols,
        direct: first.bindings.len(),
        anchors_first: af,
        missing: total - af,
        anchors_after: iterated.anchors_bound(kb).count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn rec(entry: u32, bb: u32, strings: &[&str]) -> FunctionRecord {
        FunctionRecord {
            entry,
            bb_count: bb,
            edge_count: bb.saturating_sub(1),
            string_refs: strings.iter().map(|s| String::from(*s)).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn score_examples() {
        let w = Weights::default();
        let a = rec(0, 10, &["x"]);
        assert!((score(&a, &a, &w) - 1.0).abs() < 1e-12);
        let mut b = a.clone();
        b.bb_count = 5;
        assert!((score(&a, &b, &w) - 0.85).abs() < 1e-12);
        let z1 = FunctionRecord::default();
        let z2 = FunctionRecord { entry: 4, ..Default::default() };
        assert!((score(&z1, &z2, &w) - 0.85).abs() < 1e-12);
        let c = rec(0, 3, &["y"]);
        assert!((score(&a, &c, &w) - score(&c, &a, &w)).abs() < 1e-12);
    }

    fn chain_kb() -> KnowledgeBase {
        let node = |n: &str, s: &str, anchor| KbNode {
            name: n.into(),
            strings: [String::from(s)].into(),
            anchor,
            ..Default::default()
        };
        KnowledgeBase {
            rtos: Rtos::Vxworks,
            entry: "start".into(),
            bsp_boundary: vec!["root".into()],
            heap_top_symbol: None,
            nodes: vec![
                node("start", "s0", false),
                node("init", "s1", false),
                node("root", "s2", true),
                node("core", "s3", true),
            ],
            edges: vec![
                ("start".into(), "init".into()),
                ("init".into(), "root".into()),
                ("root".into(), "core".into()),
            ],
        }
    }

    #[test]
    fn kb_validation() {
        let mut kb = chain_kb();
        assert!(kb.validate().is_ok());
        kb.edges.push(("core".into(), "start".into()));
        assert!(matches!(kb.validate(), Err(KbError::Cycle(_))));
        let mut kb = chain_kb();
        kb.edges.push(("core".into(), "nope".into()));
        assert_eq!(kb.validate(), Err(KbError::UnknownNode("nope".into())));
    }

    fn chain_graph() -> CallGraph {
        let mut fs =
            vec![rec(0x100, 2, &["s0"]), rec(0x200, 2, &["s1"]), rec(0x300, 2, &["s2"]), rec(0x400, 2, &["s3"])];
        fs[0].callee_entries.insert(0x200);
        fs[1].callee_entries.insert(0x300);
        fs[2].callee_entries.insert(0x400);
        for f in fs.iter_mut() {
            f.length = 0x100;
        }
        CallGraph::from_functions(fs)
    }

    #[test]
    fn iteration_from_a_single_binding() {
        let g = chain_graph();
        let kb = chain_kb();
        let mut r = MatchResult::default();
        r.bind("core", 0x400, 1.0, BindingSource::Direct);
        let out = iterate(&r, &g, &kb, &MatchConfig::default());
        assert_eq!(out.bindings.len(), 4);
        assert_eq!(out.bindings["start"], 0x100);
        assert_eq!(out.sources["root"], BindingSource::CallerInferred);
        assert_eq!(iterate(&out, &g, &kb, &MatchConfig::default()).bindings, out.bindings);
    }

    #[test]
    fn bsp_chain_and_unbound_boundary() {
        let g = chain_graph();
        let kb = chain_kb();
        let mut r = MatchResult::default();
        assert!(matches!(locate_bsp(&r, &g, &kb, Some(0x100)), Err(AnchorError::BoundaryUnbound(_))));
        r.bind("root", 0x300, 1.0, BindingSource::Direct);
        let bsp = locate_bsp(&r, &g, &kb, Some(0x100)).unwrap();
        assert_eq!(bsp.functions, BTreeSet::from([0x100, 0x200]));
        assert_eq!(bsp.ranges, vec![(0x100, 0x300)]);
    }

    #[test]
    fn first_pass_needs_names() {
        let g = chain_graph();
        assert_eq!(first_pass(&g, &g, &MatchConfig::default()), Err(AnchorError::NoReference));
        let mut named = g.clone();
        for (i, f) in named.functions.values_mut().enumerate() {
            f.name = Some(alloc::format!("f{i}"));
        }
        let r = first_pass(&g, &named, &MatchConfig::default()).unwrap();
        assert_eq!(r.bindings.len(), 4);
        assert!(r.scores.values().all(|&s| s == 1.0));
        let empty = CallGraph::default();
        assert!(first_pass(&empty, &named, &MatchConfig::default()).unwrap().bindings.is_empty());
    }
}
