//! Graph algorithms and ranking checked against exhaustive oracles.

mod common;

use std::collections::BTreeSet;

use parallax_core::kg::{bfs_step_partition, gold_shortest_path_triples, Traversal, TripleId};
use parallax_core::params::rng_stream;
use parallax_core::retriever::top_k_positions;
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn gold_paths_match_exhaustive_enumeration(seed in any::<u64>(), undirected in any::<bool>()) {
        let mut rng = rng_stream(seed, 1);
        let n = rng.random_range(2..=12);
        let edges = rng.random_range(0..=2 * n);
        let g = common::random_graph(&mut rng, n, edges, 2);
        let topics: Vec<u32> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(0..n as u32)).collect();
        let answers: Vec<u32> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(0..n as u32)).collect();
        let traversal = if undirected { Traversal::Undirected } else { Traversal::Forward };
        let got = gold_shortest_path_triples(&g, &topics, &answers, traversal);
        let (want, hop) = common::brute_force_gold(&g, &topics, &answers, traversal);
        prop_assert_eq!(got.triples, want);
        prop_assert_eq!(got.hop, hop);
    }

    #[test]
    fn step_partition_is_disjoint_and_matches_depth(seed in any::<u64>(), max_step in 1usize..4) {
        let mut rng = rng_stream(seed, 2);
        let n = rng.random_range(2..=12);
        let edges = rng.random_range(0..=3 * n);
        let g = common::random_graph(&mut rng, n, edges, 2);
        let topics = vec![0u32];
        let part = bfs_step_partition(&g, &topics, max_step);
        let depth = g.distances(&topics, Traversal::Forward, false);
        let mut seen = BTreeSet::new();
        for (i, cell) in part.steps.iter().enumerate() {
            for &tid in cell {
                prop_assert!(seen.insert(tid), "triple {} in two steps", tid);
                prop_assert_eq!(depth[g.triple(tid).head as usize], Some(i as u32));
            }
        }
        let expected: BTreeSet<TripleId> = (0..g.num_triples() as u32)
            .filter(|&t| matches!(depth[g.triple(t).head as usize], Some(d) if (d as usize) < max_step))
            .collect();
        prop_assert_eq!(seen, expected);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn top_k_matches_full_sort(seed in any::<u64>()) {
        let mut rng = rng_stream(seed, 3);
        let n = rng.random_range(0..60);
        // Few distinct values so that ties are common.
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..8u8)) * 0.25).collect();
        let mut ids: Vec<u32> = (0..n as u32).map(|i| i * 3 + 1).collect();
        for i in (1..ids.len()).rev() {
            ids.swap(i, rng.random_range(0..=i));
        }
        let k = rng.random_range(0..=n + 2);
        let mut oracle: Vec<usize> = (0..n).collect();
        oracle.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(ids[a].cmp(&ids[b])));
        oracle.truncate(k);
        prop_assert_eq!(top_k_positions(&scores, &ids, k), oracle);
    }
}
