use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tumorgraph_core::gnn::{Gnn, GnnConfig};
use tumorgraph_core::graph::{BrainGraph, N_FEATURES};

fn random_graph(rng: &mut ChaCha8Rng) -> BrainGraph {
    let n = rng.gen_range(8..40);
    let mut edges = Vec::new();
    // A random spanning path keeps most nodes far apart, plus a few chords.
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(rng);
    for w in order.windows(2) {
        edges.push((w[0].min(w[1]), w[0].max(w[1])));
    }
    for _ in 0..n / 4 {
        let (a, b) = (rng.gen_range(0..n as u32), rng.gen_range(0..n as u32));
        if a != b {
            edges.push((a.min(b), a.max(b)));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    BrainGraph {
        n_nodes: n,
        node_features: (0..n * N_FEATURES).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        node_labels: None,
        edges,
        node_to_supervoxel: (0..n as u32).collect(),
        class_weights: None,
    }
}

fn model(seed: u64) -> Gnn {
    Gnn::init(&GnnConfig { depth: 3, hidden: 32, seed, ..GnnConfig::default() }).unwrap()
}

fn hops_from(g: &BrainGraph, src: usize) -> Vec<usize> {
    let nb = g.neighborhoods(false);
    let mut d = vec![usize::MAX; g.n_nodes];
    d[src] = 0;
    let mut q = VecDeque::from([src]);
    while let Some(u) = q.pop_front() {
        for &v in nb.neighbors(u) {
            if d[v as usize] == usize::MAX {
                d[v as usize] = d[u] + 1;
                q.push_back(v as usize);
            }
        }
    }
    d
}

#[test]
fn neighbor_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..50 {
        let g = random_graph(&mut rng);
        let m = model(i);
        let base = m.forward(&g).unwrap();
        let mut shuffled = g.clone();
        shuffled.edges.shuffle(&mut rng);
        for e in shuffled.edges.iter_mut() {
            if rng.gen_bool(0.5) {
                *e = (e.1, e.0);
            }
        }
        assert_eq!(m.forward(&shuffled).unwrap(), base, "graph {i}");
    }
}

#[test]
fn duplicate_edges_do_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..50 {
        let g = random_graph(&mut rng);
        let m = model(i);
        let mut dup = g.clone();
        for _ in 0..rng.gen_range(1..10) {
            let e = *g.edges.choose(&mut rng).unwrap();
            dup.edges.push(e);
        }
        assert_eq!(m.forward(&dup).unwrap(), m.forward(&g).unwrap(), "graph {i}");
    }
}

#[test]
fn relabeling_nodes_permutes_the_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..50 {
        let g = random_graph(&mut rng);
        let m = model(i);
        let n = g.n_nodes;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        // Node u of `g` becomes node perm[u] of `h`.
        let mut features = vec![0.0; n * N_FEATURES];
        for u in 0..n {
            features[perm[u] * N_FEATURES..(perm[u] + 1) * N_FEATURES].copy_from_slice(g.features_row(u));
        }
        let mut edges: Vec<(u32, u32)> = g
            .edges
            .iter()
            .map(|&(a, b)| {
                let (a, b) = (perm[a as usize] as u32, perm[b as usize] as u32);
                (a.min(b), a.max(b))
            })
            .collect();
        edges.sort_unstable();
        let h = BrainGraph { node_features: features, edges, ..g.clone() };
        let out_g = m.forward(&g).unwrap();
        let out_h = m.forward(&h).unwrap();
        for u in 0..n {
            assert_eq!(out_g.data()[u * 4..u * 4 + 4], out_h.data()[perm[u] * 4..perm[u] * 4 + 4], "graph {i}");
        }
    }
}

#[test]
fn influence_stays_within_depth_hops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..50 {
        let g = random_graph(&mut rng);
        let m = model(i);
        let src = rng.gen_range(0..g.n_nodes);
        let mut poked = g.clone();
        for f in &mut poked.node_features[src * N_FEATURES..(src + 1) * N_FEATURES] {
            *f += 5.0;
        }
        let (a, b) = (m.forward(&g).unwrap(), m.forward(&poked).unwrap());
        let hops = hops_from(&g, src);
        for (u, &d) in hops.iter().enumerate() {
            let same = a.data()[u * 4..u * 4 + 4] == b.data()[u * 4..u * 4 + 4];
            if d > m.config.depth {
                assert!(same, "graph {i}: node {u} at {d} hops changed");
            }
        }
        assert_ne!(a.data()[src * 4..src * 4 + 4], b.data()[src * 4..src * 4 + 4]);
    }
}
