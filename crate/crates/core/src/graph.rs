//! Supervoxel partition → node/edge graph with quintile intensity features and
//! majority labels.

use std::path::Path;

use crate::autodiff::Neighborhoods;
use crate::error::{Error, Result};
use crate::grid::{argmax_high, percentiles};
use crate::supervoxel::SupervoxelPartition;
use crate::volume::{LabelVolume, MultiModalVolume, N_CHANNELS, N_CLASSES};

/// Percentile points summarising each modality within a supervoxel: the
/// midpoints of the five quintile bins.
pub const FEATURE_PERCENTILES: [f64; 5] = [10.0, 30.0, 50.0, 70.0, 90.0];

pub const N_FEATURES: usize = FEATURE_PERCENTILES.len() * N_CHANNELS;

pub const MIN_CLASS_WEIGHT: f32 = 0.2;
pub const MAX_CLASS_WEIGHT: f32 = 20.0;

#[derive(Clone, Debug, PartialEq)]
pub struct BrainGraph {
    pub n_nodes: usize,
    /// Row-major `n_nodes × 20`; column `5 * channel + q`.
    pub node_features: Vec<f32>,
    pub node_labels: Option<Vec<u8>>,
    /// Undirected edges stored once as `(a, b)` with `a < b`, sorted.
    pub edges: Vec<(u32, u32)>,
    pub node_to_supervoxel: Vec<u32>,
    pub class_weights: Option<[f32; N_CLASSES]>,
}

impl BrainGraph {
    pub fn features_row(&self, node: usize) -> &[f32] {
        &self.node_features[node * N_FEATURES..(node + 1) * N_FEATURES]
    }

    /// Neighbour lists for message passing, sorted by node id. With
    /// `self_loops` every node also lists itself first.
    pub fn neighborhoods(&self, self_loops: bool) -> Neighborhoods {
        let mut lists: Vec<Vec<u32>> = (0..self.n_nodes)
            .map(|u| if self_loops { vec![u as u32] } else { Vec::new() })
            .collect();
        for &(a, b) in &self.edges {
            lists[a as usize].push(b);
            lists[b as usize].push(a);
        }
        Neighborhoods::from_lists(&lists)
    }

    pub fn degree(&self) -> Vec<usize> {
        let mut d = vec![0; self.n_nodes];
        for &(a, b) in &self.edges {
            d[a as usize] += 1;
            d[b as usize] += 1;
        }
        d
    }

    /// Block-diagonal union of several graphs; node ids are offset in order.
    pub fn disjoint_union(graphs: &[&BrainGraph]) -> BrainGraph {
        let mut out = BrainGraph {
            n_nodes: 0,
            node_features: Vec::new(),
            node_labels: Some(Vec::new()),
            edges: Vec::new(),
            node_to_supervoxel: Vec::new(),
            class_weights: graphs.first().and_then(|g| g.class_weights),
        };
        for g in graphs {
            let off = out.n_nodes as u32;
            out.node_features.extend_from_slice(&g.node_features);
            match (&mut out.node_labels, &g.node_labels) {
                (Some(dst), Some(src)) => dst.extend_from_slice(src),
                (labels, _) => *labels = None,
            }
            out.edges.extend(g.edges.iter().map(|&(a, b)| (a + off, b + off)));
            out.node_to_supervoxel.extend_from_slice(&g.node_to_supervoxel);
            out.n_nodes += g.n_nodes;
        }
        out
    }

    /// Binary layout (little-endian): `b"BGR1"`, node count, feature width,
    /// features as f32, label flag + labels, edge count + `(u32, u32)` pairs,
    /// node→supervoxel map, weight flag + 4 f32 class weights.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"BGR1");
        out.extend_from_slice(&(self.n_nodes as u32).to_le_bytes());
        out.extend_from_slice(&(N_FEATURES as u32).to_le_bytes());
        for v in &self.node_features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        match &self.node_labels {
            Some(l) => {
                out.push(1);
                out.extend_from_slice(l);
            }
            None => out.push(0),
        }
        out.extend_from_slice(&(self.edges.len() as u32).to_le_bytes());
        for &(a, b) in &self.edges {
            out.extend_from_slice(&a.to_le_bytes());
            out.extend_from_slice(&b.to_le_bytes());
        }
        for &s in &self.node_to_supervoxel {
            out.extend_from_slice(&s.to_le_bytes());
        }
        match &self.class_weights {
            Some(w) => {
                out.push(1);
                for v in w {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => out.push(0),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<BrainGraph> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != b"BGR1" {
            return Err(Error::format("<graph>", "missing BGR1 magic"));
        }
        let n = r.u32()? as usize;
        let width = r.u32()? as usize;
        if width != N_FEATURES {
            return Err(Error::format("<graph>", format!("feature width {width}, expected {N_FEATURES}")));
        }
        let node_features = (0..n * width).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let node_labels = match r.u8()? {
            0 => None,
            _ => Some(r.take(n)?.to_vec()),
        };
        let n_edges = r.u32()? as usize;
        let mut edges = Vec::with_capacity(n_edges);
        for _ in 0..n_edges {
            let a = r.u32()?;
            let b = r.u32()?;
            if a as usize >= n || b as usize >= n || a >= b {
                return Err(Error::format("<graph>", format!("invalid edge ({a}, {b})")));
            }
            edges.push((a, b));
        }
        let node_to_supervoxel = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let class_weights = match r.u8()? {
            0 => None,
            _ => Some([r.f32()?, r.f32()?, r.f32()?, r.f32()?]),
        };
        if r.pos != bytes.len() {
            return Err(Error::format("<graph>", "trailing bytes"));
        }
        Ok(BrainGraph {
            n_nodes: n,
            node_features,
            node_labels,
            edges,
            node_to_supervoxel,
            class_weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<BrainGraph> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        BrainGraph::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { msg, .. } => Error::format(path, msg),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("<graph>", "unexpected end of data"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn check_shapes(v: &MultiModalVolume, p: &SupervoxelPartition) -> Result<()> {
    if v.dims != p.dims {
        return Err(Error::Shape(format!("volume {} vs partition {}", v.dims, p.dims)));
    }
    Ok(())
}

/// Five percentiles of each modality over every supervoxel's voxels.
pub fn compute_node_features(v: &MultiModalVolume, p: &SupervoxelPartition) -> Result<Vec<f32>> {
    check_shapes(v, p)?;
    let mut out = Vec::with_capacity(p.len() * N_FEATURES);
    let mut buf = Vec::new();
    for (id, sv) in p.supervoxels.iter().enumerate() {
        if sv.is_empty() {
            return Err(Error::Degenerate(format!("supervoxel {id} is empty")));
        }
        for c in 0..N_CHANNELS {
            let ch = v.channel(c);
            buf.clear();
            buf.extend(sv.iter().map(|&i| ch[i as usize] as f64));
            out.extend(percentiles(&buf, &FEATURE_PERCENTILES).into_iter().map(|x| x as f32));
        }
    }
    Ok(out)
}

/// Majority voxel label per supervoxel; ties go to the higher class.
pub fn compute_node_labels(p: &SupervoxelPartition, l: &LabelVolume) -> Result<Vec<u8>> {
    if p.dims != l.dims {
        return Err(Error::Shape(format!("partition {} vs labels {}", p.dims, l.dims)));
    }
    Ok(p.supervoxels
        .iter()
        .map(|sv| {
            let mut counts = [0usize; N_CLASSES];
            for &i in sv {
                counts[l.labels[i as usize] as usize] += 1;
            }
            argmax_high(&counts) as u8
        })
        .collect())
}

/// Face-adjacency edges between supervoxels.
pub fn supervoxel_edges(p: &SupervoxelPartition) -> Vec<(u32, u32)> {
    let d = p.dims;
    let [nx, ny, nz] = d.0;
    let a = &p.assignment;
    let mut edges = Vec::new();
    let mut push = |x: i32, y: i32| {
        if x >= 0 && y >= 0 && x != y {
            edges.push((x.min(y) as u32, x.max(y) as u32));
        }
    };
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = d.index(x, y, z);
                if x + 1 < nx {
                    push(a[i], a[i + 1]);
                }
                if y + 1 < ny {
                    push(a[i], a[i + nx]);
                }
                if z + 1 < nz {
                    push(a[i], a[i + nx * ny]);
                }
            }
        }
    }
    edges.sort_unstable();
    edges.dedup();
    edges
}

pub fn build_graph(v: &MultiModalVolume, p: &SupervoxelPartition, l: Option<&LabelVolume>) -> Result<BrainGraph> {
    check_shapes(v, p)?;
    if p.is_empty() {
        return Err(Error::Degenerate("partition has no supervoxels".into()));
    }
    let node_features = compute_node_features(v, p)?;
    if node_features.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite node feature".into()));
    }
    let node_labels = l.map(|l| compute_node_labels(p, l)).transpose()?;
    Ok(BrainGraph {
        n_nodes: p.len(),
        node_features,
        node_labels,
        edges: supervoxel_edges(p),
        node_to_supervoxel: (0..p.len() as u32).collect(),
        class_weights: None,
    })
}

/// Inverse-prevalence class weights `N / (4 N_c)`, clipped to `[0.2, 20]`;
/// classes that never occur get the maximum.
pub fn compute_class_weights<'a, I>(graphs: I) -> Result<[f32; N_CLASSES]>
where
    I: IntoIterator<Item = &'a BrainGraph>,
{
    let mut counts = [0u64; N_CLASSES];
    let mut any = false;
    for g in graphs {
        if let Some(labels) = &g.node_labels {
            any = true;
            for &l in labels {
                counts[l as usize] += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    if !any || total == 0 {
        return Err(Error::Usage("class weights need at least one labelled node".into()));
    }
    Ok(counts.map(|c| {
        if c == 0 {
            MAX_CLASS_WEIGHT
        } else {
            let w = total as f64 / (N_CLASSES as f64 * c as f64);
            (w as f32).clamp(MIN_CLASS_WEIGHT, MAX_CLASS_WEIGHT)
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Dims;
    use crate::supervoxel::PartitionMeta;

    fn meta() -> PartitionMeta {
        PartitionMeta { k: 1, m: 1.0, grid_step: 1.0, iterations: 0, seed: 0 }
    }

    fn labelled(labels: &[u8]) -> BrainGraph {
        BrainGraph {
            n_nodes: labels.len(),
            node_features: vec![0.0; labels.len() * N_FEATURES],
            node_labels: Some(labels.to_vec()),
            edges: vec![],
            node_to_supervoxel: (0..labels.len() as u32).collect(),
            class_weights: None,
        }
    }

    #[test]
    fn face_vs_corner_adjacency() {
        let dims = Dims::new(2, 2, 1);
        let face = SupervoxelPartition::from_assignment(dims, vec![0, 1, 0, 1], &meta()).unwrap();
        assert_eq!(supervoxel_edges(&face), vec![(0, 1)]);
        let dims = Dims::new(2, 2, 2);
        let corner = SupervoxelPartition::from_assignment(dims, vec![0, -1, -1, -1, -1, -1, -1, 1], &meta()).unwrap();
        assert!(supervoxel_edges(&corner).is_empty());
    }

    #[test]
    fn constant_supervoxel_features() {
        let dims = Dims::new(3, 1, 1);
        let mut data = vec![1.0f32; 12];
        data[0..3].copy_from_slice(&[7.0, 7.0, 7.0]);
        let v = MultiModalVolume::from_channels(dims, data, [1.0; 3]).unwrap();
        let p = SupervoxelPartition::from_assignment(dims, vec![0, 0, 0], &meta()).unwrap();
        let f = compute_node_features(&v, &p).unwrap();
        assert_eq!(&f[0..5], &[7.0; 5]);
        assert_eq!(&f[5..20], &[1.0; 15]);
    }

    #[test]
    fn mode_with_ties() {
        let dims = Dims::new(15, 1, 1);
        let mut raw = vec![0u8; 10];
        raw.extend([2; 5]);
        let l = LabelVolume::new(dims, raw).unwrap();
        let p = SupervoxelPartition::from_assignment(dims, vec![0; 15], &meta()).unwrap();
        assert_eq!(compute_node_labels(&p, &l).unwrap(), vec![0]);

        let dims = Dims::new(10, 1, 1);
        let l = LabelVolume::new(dims, vec![0, 0, 0, 0, 0, 2, 2, 2, 2, 2]).unwrap();
        let p = SupervoxelPartition::from_assignment(dims, vec![0; 10], &meta()).unwrap();
        assert_eq!(compute_node_labels(&p, &l).unwrap(), vec![2]);
    }

    #[test]
    fn class_weight_arithmetic() {
        let balanced = labelled(&[0, 1, 2, 3, 0, 1, 2, 3]);
        assert_eq!(compute_class_weights([&balanced]).unwrap(), [1.0; 4]);

        let mut labels = vec![0u8; 900];
        labels.extend([1; 50]);
        labels.extend([2; 40]);
        labels.extend([3; 10]);
        let w = compute_class_weights([&labelled(&labels)]).unwrap();
        // 1000/(4*900), 1000/(4*50), 1000/(4*40), 1000/(4*10)=25 -> clipped.
        assert!((w[0] - 1000.0 / 3600.0).abs() < 1e-6);
        assert_eq!(w[1], 5.0);
        assert_eq!(w[2], 6.25);
        assert_eq!(w[3], 20.0);

        let absent = compute_class_weights([&labelled(&[0, 1, 2, 0])]).unwrap();
        assert_eq!(absent[3], 20.0);

        let unlabeled = BrainGraph { node_labels: None, ..labelled(&[0]) };
        assert!(matches!(compute_class_weights([&unlabeled]), Err(Error::Usage(_))));
    }

    #[test]
    fn empty_partition_is_degenerate() {
        let dims = Dims::new(2, 1, 1);
        let v = MultiModalVolume::from_channels(dims, vec![1.0; 8], [1.0; 3]).unwrap();
        let p = SupervoxelPartition::from_assignment(dims, vec![-1, -1], &meta()).unwrap();
        assert!(matches!(build_graph(&v, &p, None), Err(Error::Degenerate(_))));
    }

    #[test]
    fn bytes_roundtrip_and_union() {
        let mut g = labelled(&[0, 1, 3]);
        g.edges = vec![(0, 1), (1, 2)];
        g.node_features.iter_mut().enumerate().for_each(|(i, x)| *x = i as f32 * 0.5);
        g.class_weights = Some([1.0, 2.0, 3.0, 4.0]);
        assert_eq!(BrainGraph::from_bytes(&g.to_bytes()).unwrap(), g);
        let u = BrainGraph::disjoint_union(&[&g, &g]);
        assert_eq!(u.n_nodes, 6);
        assert_eq!(u.edges, vec![(0, 1), (1, 2), (3, 4), (4, 5)]);
        assert_eq!(u.node_labels.unwrap(), vec![0, 1, 3, 0, 1, 3]);
        let nb = g.neighborhoods(true);
        assert_eq!(nb.neighbors(1), &[1, 0, 2]);
    }
}
