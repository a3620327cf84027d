//! Small random graphs, stores and run logs shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use parallax_core::embedding::{entity_key, query_key, relation_key, EmbeddingStore, MultiViewEmbedding};
use parallax_core::kg::{annotate_gold, KnowledgeGraph, QuerySample, Traversal, TripleId};
use parallax_core::params::rng_stream;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random directed multigraph over `n` entities and `r` relations.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, edges: usize, r: usize) -> KnowledgeGraph {
    let mut g = KnowledgeGraph::new();
    for i in 0..n {
        g.intern_entity(&format!("n{i}"));
    }
    for j in 0..r {
        g.intern_relation(&format!("r{j}"));
    }
    for _ in 0..edges {
        let h = rng.random_range(0..n);
        let t = rng.random_range(0..n);
        let rel = rng.random_range(0..r);
        g.add_labeled(&format!("n{h}"), &format!("r{rel}"), &format!("n{t}"));
    }
    g
}

fn vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Store holding every entity, relation and the listed queries of `g`.
pub fn random_store(
    rng: &mut ChaCha8Rng,
    g: &KnowledgeGraph,
    query_ids: &[String],
    heads: usize,
    dh: usize,
    d: usize,
) -> EmbeddingStore {
    let mut store = EmbeddingStore::new(heads, dh, d).unwrap();
    let item = |rng: &mut ChaCha8Rng| MultiViewEmbedding {
        heads: (0..heads).map(|_| vector(rng, dh)).collect(),
        global: (d > 0).then(|| vector(rng, d)),
    };
    for l in g.entity_labels() {
        store.push(entity_key(l), &item(rng)).unwrap();
    }
    for l in g.relation_labels() {
        store.push(relation_key(l), &item(rng)).unwrap();
    }
    for id in query_ids {
        store.push(query_key(id), &item(rng)).unwrap();
    }
    store
}

/// A small graph with one trainable query: topic `n0`, answer reachable.
pub struct Instance {
    pub graph: KnowledgeGraph,
    pub store: EmbeddingStore,
    pub query: QuerySample,
}

pub fn trainable_instance(seed: u64, max_nodes: usize, heads: usize) -> Instance {
    let mut rng = rng_stream(seed, 77);
    loop {
        let n = rng.random_range(3..=max_nodes);
        let edges = rng.random_range(n..=2 * n);
        let graph = random_graph(&mut rng, n, edges, 3);
        let reach = graph.distances(&[0], Traversal::Forward, false);
        let Some(answer) = (1..n).find(|&v| matches!(reach[v], Some(d) if (1..=3).contains(&d))) else {
            continue;
        };
        let mut q = vec![QuerySample {
            id: "q0".into(),
            question: "question 0".into(),
            topic_entities: vec![0],
            answers: vec![answer as u32],
            gold_triples: Default::default(),
            hop: None,
        }];
        annotate_gold(&graph, &mut q, Traversal::Forward);
        let store = random_store(&mut rng, &graph, &["q0".into()], heads, 3, heads * 2);
        return Instance { graph, store, query: q.pop().unwrap() };
    }
}

/// Every simple walk from `from` to `to`, as triple-id sequences.
fn simple_paths(g: &KnowledgeGraph, from: u32, to: u32, traversal: Traversal) -> Vec<Vec<TripleId>> {
    fn rec(
        g: &KnowledgeGraph,
        at: u32,
        to: u32,
        traversal: Traversal,
        seen: &mut Vec<bool>,
        path: &mut Vec<TripleId>,
        out: &mut Vec<Vec<TripleId>>,
    ) {
        if at == to && !path.is_empty() {
            out.push(path.clone());
            return;
        }
        let mut steps: Vec<(TripleId, u32)> = g.out_edges(at).to_vec();
        if traversal == Traversal::Undirected {
            steps.extend_from_slice(g.in_edges(at));
        }
        for (tid, next) in steps {
            if seen[next as usize] {
                continue;
            }
            seen[next as usize] = true;
            path.push(tid);
            rec(g, next, to, traversal, seen, path, out);
            path.pop();
            seen[next as usize] = false;
        }
    }
    let mut seen = vec![false; g.num_entities()];
    seen[from as usize] = true;
    let mut out = Vec::new();
    rec(g, from, to, traversal, &mut seen, &mut Vec::new(), &mut out);
    out
}

pub fn brute_force_gold(g: &KnowledgeGraph, topics: &[u32], answers: &[u32], traversal: Traversal) -> (BTreeSet<TripleId>, Option<usize>) {
    let mut triples = BTreeSet::new();
    let mut hop: Option<usize> = None;
    for &t in topics {
        for &a in answers {
            if t == a {
                continue;
            }
            let paths = simple_paths(g, t, a, traversal);
            let Some(best) = paths.iter().map(Vec::len).min() else { continue };
            hop = Some(hop.map_or(best, |h| h.min(best)));
            for p in paths.iter().filter(|p| p.len() == best) {
                triples.extend(p.iter().copied());
            }
        }
    }
    (triples, hop)
}
