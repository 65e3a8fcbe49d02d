//! Shared fixtures for the criterion benchmarks.

use tumorgraph_core::graph::{build_graph, BrainGraph};
use tumorgraph_core::phantom::{generate_phantom, PhantomSpec};
use tumorgraph_core::supervoxel::{slic_partition, SlicParams, SupervoxelPartition};
use tumorgraph_core::volume::{preprocess, LabelVolume, MultiModalVolume};

/// A preprocessed phantom case of edge length `n`.
pub fn phantom(n: usize, seed: u64) -> (MultiModalVolume, LabelVolume) {
    let r = n as f64 / 64.0;
    let spec = PhantomSpec { shape: [n; 3], tumor_radius: [9.0 * r, 13.0 * r], ..PhantomSpec::default() };
    let (v, l) = generate_phantom(&spec, seed).expect("valid phantom spec");
    let (v, l) = preprocess(&v, Some(&l), None).expect("phantom preprocesses");
    (v, l.expect("labels"))
}

/// Partition and graph of a phantom case.
pub fn phantom_graph(n: usize, k: usize, seed: u64) -> (SupervoxelPartition, BrainGraph) {
    let (v, l) = phantom(n, seed);
    let p = slic_partition(&v, &SlicParams { k, m: 0.5, max_iter: 10 }).expect("slic");
    let g = build_graph(&v, &p, Some(&l)).expect("graph");
    (p, g)
}
