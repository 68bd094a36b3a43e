//! Random call graphs with a random knowledge base over them.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rtport_core::anchor::{BindingSource, FeatureRange, KbNode, KnowledgeBase, MatchConfig, MatchResult, Rtos};
use rtport_core::funcgraph::{CallGraph, FunctionRecord};

const VOCAB: [&str; 6] = ["boot", "init", "net", "uart", "disk", "clock"];

/// A random call graph, a random DAG knowledge base over it and a random
/// injective starting binding.
pub fn random_world(seed: u64) -> (CallGraph, KnowledgeBase, MatchResult, MatchConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(3..40u32);
    let entry = |i: u32| 0x1000 + 0x100 * i;
    let funcs = (0..n).map(|i| {
        let callees: BTreeSet<u32> = (0..n).filter(|&j| j != i && rng.gen_bool(0.12)).map(entry).collect();
        let strings = VOCAB.iter().filter(|_| rng.gen_bool(0.2)).map(|s| s.to_string()).collect();
        let bb = rng.gen_range(1..20);
        FunctionRecord {
            entry: entry(i),
            length: 0x80,
            bb_count: bb,
            edge_count: rng.gen_range(0..bb * 2),
            callee_entries: callees,
            string_refs: strings,
            ..Default::default()
        }
    });
    let graph = CallGraph::from_functions(funcs.collect::<Vec<_>>());

    let k = rng.gen_range(2..12usize);
    let range = |rng: &mut ChaCha8Rng| {
        let lo = rng.gen_range(0..10);
        FeatureRange::new(lo, lo + rng.gen_range(0..10))
    };
    let nodes: Vec<KbNode> = (0..k)
        .map(|i| KbNode {
            name: format!("n{i}"),
            bb_count: range(&mut rng),
            edge_count: range(&mut rng),
            callee_count: range(&mut rng),
            in_degree: range(&mut rng),
            strings: VOCAB.iter().filter(|_| rng.gen_bool(0.2)).map(|s| s.to_string()).collect(),
            anchor: rng.gen_bool(0.3),
            ..Default::default()
        })
        .collect();
    let mut edges = Vec::new();
    for j in 1..k {
        let p = rng.gen_range(0..j);
        edges.push((format!("n{p}"), format!("n{j}")));
        for q in 0..j {
            if q != p && rng.gen_bool(0.15) {
                edges.push((format!("n{q}"), format!("n{j}")));
            }
        }
    }
    let kb = KnowledgeBase {
        rtos: Rtos::Vxworks,
        entry: "n0".into(),
        bsp_boundary: vec![],
        heap_top_symbol: None,
        nodes,
        edges,
    };
    kb.validate().unwrap();

    let mut start = MatchResult::default();
    let mut free: Vec<u32> = graph.functions.keys().copied().collect();
    for node in &kb.nodes {
        if !free.is_empty() && rng.gen_bool(0.3) {
            let a = free.swap_remove(rng.gen_range(0..free.len()));
            start.bindings.insert(node.name.clone(), a);
            start.scores.insert(node.name.clone(), 1.0);
            start.sources.insert(node.name.clone(), BindingSource::Direct);
        }
    }
    let cfg = MatchConfig { iteration_threshold: rng.gen_range(0.3..1.0), ..MatchConfig::default() };
    (graph, kb, start, cfg)
}

pub fn injective(r: &MatchResult) -> bool {
    let addrs: BTreeSet<u32> = r.bindings.values().copied().collect();
    addrs.len() == r.bindings.len()
}
