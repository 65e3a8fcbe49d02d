//! Multi-channel 3D SLIC supervoxels and achievable segmentation accuracy.
//!
//! SLIC runs on the cropped, standardized four-channel grid. Distances combine
//! intensity and space as `D² = d_c² + (d_s / S)² · m²` where `S` is the
//! initial grid step `(N_brain / k)^(1/3)`. Clustering sees every voxel of the
//! grid, background included; clusters that end up mostly outside the brain
//! are discarded afterwards and their brain voxels handed to the nearest
//! surviving cluster. A final pass makes every supervoxel 6-connected.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Dims;
use crate::volume::{LabelVolume, MultiModalVolume, N_CHANNELS, N_CLASSES};

/// Stops iterating once no center moves by this many voxels or more.
const CONVERGENCE_MOVE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlicParams {
    /// Requested number of supervoxels.
    pub k: usize,
    /// Compactness: weight of spatial against intensity distance.
    pub m: f64,
    pub max_iter: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        SlicParams {
            k: 15000,
            m: 0.5,
            max_iter: 10,
        }
    }
}

/// A partition of the brain mask into 6-connected supervoxels.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervoxelPartition {
    pub dims: Dims,
    /// Supervoxel id per voxel, `-1` outside the brain.
    pub assignment: Vec<i32>,
    /// Flat voxel indices of each supervoxel, ascending.
    pub supervoxels: Vec<Vec<u32>>,
    pub k_requested: usize,
    pub m: f64,
    /// Initial grid step `S`.
    pub grid_step: f64,
    pub iterations: usize,
}

/// Plain-text sidecar written next to a serialized partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionMeta {
    pub k: usize,
    pub m: f64,
    #[serde(rename = "S")]
    pub grid_step: f64,
    pub iterations: usize,
    /// Grid initialization is deterministic; recorded for completeness.
    pub seed: u64,
}

impl SupervoxelPartition {
    pub fn len(&self) -> usize {
        self.supervoxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.supervoxels.is_empty()
    }

    /// Builds a partition from an assignment grid, regenerating voxel lists.
    pub fn from_assignment(dims: Dims, assignment: Vec<i32>, meta: &PartitionMeta) -> Result<Self> {
        if assignment.len() != dims.len() {
            return Err(Error::Shape(format!(
                "assignment has {} entries, expected {}",
                assignment.len(),
                dims.len()
            )));
        }
        let count = assignment.iter().copied().max().unwrap_or(-1) + 1;
        let mut supervoxels = vec![Vec::new(); count.max(0) as usize];
        for (i, &a) in assignment.iter().enumerate() {
            if a < -1 {
                return Err(Error::Data(format!("invalid supervoxel id {a}")));
            }
            if a >= 0 {
                supervoxels[a as usize].push(i as u32);
            }
        }
        if let Some(id) = supervoxels.iter().position(|s| s.is_empty()) {
            return Err(Error::Data(format!("supervoxel id {id} is unused; ids must be contiguous")));
        }
        Ok(SupervoxelPartition {
            dims,
            assignment,
            supervoxels,
            k_requested: meta.k,
            m: meta.m,
            grid_step: meta.grid_step,
            iterations: meta.iterations,
        })
    }

    pub fn meta(&self) -> PartitionMeta {
        PartitionMeta {
            k: self.k_requested,
            m: self.m,
            grid_step: self.grid_step,
            iterations: self.iterations,
            seed: 0,
        }
    }

    /// Binary layout: `b"SVP1"`, `nx ny nz` as u32, then the assignment grid
    /// as i32, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.assignment.len());
        out.extend_from_slice(b"SVP1");
        for d in self.dims.0 {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &a in &self.assignment {
            out.extend_from_slice(&a.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], meta: &PartitionMeta) -> Result<Self> {
        let bad = |msg: &str| Error::format("<partition>", msg);
        if bytes.len() < 16 || &bytes[..4] != b"SVP1" {
            return Err(bad("missing SVP1 magic"));
        }
        let rd = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let dims = Dims::new(rd(4), rd(8), rd(12));
        if bytes.len() != 16 + 4 * dims.len() {
            return Err(bad("partition size does not match its shape"));
        }
        let assignment = bytes[16..]
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::from_assignment(dims, assignment, meta)
    }

    /// Writes the binary grid to `path` and the metadata to `path` with a
    /// `.toml` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let meta_path = path.with_extension("toml");
        let text = toml::to_string(&self.meta()).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let meta_path = path.with_extension("toml");
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: PartitionMeta =
            toml::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
        Self::from_bytes(&bytes, &meta).map_err(|e| match e {
            Error::Format { msg, .. } => Error::format(path, msg),
            other => other,
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct Center {
    pos: [f64; 3],
    color: [f64; N_CHANNELS],
}

fn gradient_at(v: &MultiModalVolume, x: usize, y: usize, z: usize) -> f64 {
    let d = v.dims;
    let [nx, ny, nz] = d.0;
    let mut g = 0.0;
    for axis in 0..3 {
        let c = [x, y, z];
        let (mut lo, mut hi) = (c, c);
        if c[axis] > 0 {
            lo[axis] -= 1;
        }
        if c[axis] + 1 < [nx, ny, nz][axis] {
            hi[axis] += 1;
        }
        let a = v.voxel(d.index(lo[0], lo[1], lo[2]));
        let b = v.voxel(d.index(hi[0], hi[1], hi[2]));
        for ch in 0..N_CHANNELS {
            let diff = (b[ch] - a[ch]) as f64;
            g += diff * diff;
        }
    }
    g
}

fn initial_centers(v: &MultiModalVolume, step: f64) -> Vec<Center> {
    let d = v.dims;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for (i, _) in v.brain_mask.iter().enumerate().filter(|(_, &m)| m) {
        let c = d.coords(i);
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let axis_points = |a: usize| -> Vec<usize> {
        let mut pts = Vec::new();
        let mut i = 0usize;
        loop {
            let p = lo[a] + (step / 2.0 + i as f64 * step).floor() as usize;
            if p > hi[a] {
                break;
            }
            pts.push(p);
            i += 1;
        }
        if pts.is_empty() {
            pts.push((lo[a] + hi[a]) / 2);
        }
        pts
    };
    let (xs, ys, zs) = (axis_points(0), axis_points(1), axis_points(2));
    let snap = step >= 3.0;
    let mut taken = std::collections::HashSet::new();
    let mut centers = Vec::new();
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                let mut best = [x, y, z];
                if snap {
                    let mut best_g = f64::INFINITY;
                    for dz in -1i64..=1 {
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let (cx, cy, cz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                                if cx < 0 || cy < 0 || cz < 0 {
                                    continue;
                                }
                                let (cx, cy, cz) = (cx as usize, cy as usize, cz as usize);
                                if cx >= d.0[0] || cy >= d.0[1] || cz >= d.0[2] {
                                    continue;
                                }
                                if !v.brain_mask[d.index(cx, cy, cz)] {
                                    continue;
                                }
                                let g = gradient_at(v, cx, cy, cz);
                                if g < best_g {
                                    best_g = g;
                                    best = [cx, cy, cz];
                                }
                            }
                        }
                    }
                    if taken.contains(&best) {
                        best = [x, y, z];
                    }
                }
                let idx = d.index(best[0], best[1], best[2]);
                if !v.brain_mask[idx] || !taken.insert(best) {
                    continue;
                }
                let color = v.voxel(idx).map(|c| c as f64);
                centers.push(Center {
                    pos: best.map(|p| p as f64),
                    color,
                });
            }
        }
    }
    centers
}

/// One assignment sweep: each center claims the voxels in its `±S` window
/// that are closer to it than to any center seen before. Centers are visited
/// in id order with strict comparison, so ties go to the lower id.
fn assign(v: &MultiModalVolume, centers: &[Center], step: f64, m: f64, labels: &mut [i32], dist: &mut [f64]) {
    let d = v.dims;
    let [nx, ny, nz] = d.0;
    labels.fill(-1);
    dist.fill(f64::INFINITY);
    let win = step.ceil() as i64;
    let spatial_w = (m / step) * (m / step);
    let n = d.len();
    for (id, c) in centers.iter().enumerate() {
        let cz = c.pos[2].round() as i64;
        let cy = c.pos[1].round() as i64;
        let cx = c.pos[0].round() as i64;
        let z0 = (cz - win).max(0) as usize;
        let z1 = ((cz + win) as usize).min(nz - 1);
        let y0 = (cy - win).max(0) as usize;
        let y1 = ((cy + win) as usize).min(ny - 1);
        let x0 = (cx - win).max(0) as usize;
        let x1 = ((cx + win) as usize).min(nx - 1);
        for z in z0..=z1 {
            let dz = z as f64 - c.pos[2];
            for y in y0..=y1 {
                let dy = y as f64 - c.pos[1];
                let row = d.index(0, y, z);
                for x in x0..=x1 {
                    let dx = x as f64 - c.pos[0];
                    let i = row + x;
                    let mut dc = 0.0;
                    for ch in 0..N_CHANNELS {
                        let diff = v.data[ch * n + i] as f64 - c.color[ch];
                        dc += diff * diff;
                    }
                    let dd = dc + (dx * dx + dy * dy + dz * dz) * spatial_w;
                    if dd < dist[i] {
                        dist[i] = dd;
                        labels[i] = id as i32;
                    }
                }
            }
        }
    }
}

/// Moves centers to the mean position and intensity of their members and
/// returns the largest displacement.
fn update(v: &MultiModalVolume, centers: &mut [Center], labels: &[i32]) -> f64 {
    let n = v.dims.len();
    let mut sums = vec![[0.0f64; 3 + N_CHANNELS]; centers.len()];
    let mut counts = vec![0usize; centers.len()];
    for (i, &l) in labels.iter().enumerate() {
        if l < 0 {
            continue;
        }
        let c = v.dims.coords(i);
        let s = &mut sums[l as usize];
        for a in 0..3 {
            s[a] += c[a] as f64;
        }
        for ch in 0..N_CHANNELS {
            s[3 + ch] += v.data[ch * n + i] as f64;
        }
        counts[l as usize] += 1;
    }
    let mut max_move: f64 = 0.0;
    for ((c, s), &cnt) in centers.iter_mut().zip(&sums).zip(&counts) {
        if cnt == 0 {
            continue;
        }
        let inv = 1.0 / cnt as f64;
        let pos = [s[0] * inv, s[1] * inv, s[2] * inv];
        let mv = ((pos[0] - c.pos[0]).powi(2) + (pos[1] - c.pos[1]).powi(2) + (pos[2] - c.pos[2]).powi(2)).sqrt();
        max_move = max_move.max(mv);
        c.pos = pos;
        for ch in 0..N_CHANNELS {
            c.color[ch] = s[3 + ch] * inv;
        }
    }
    max_move
}

/// Drops clusters whose members are mostly outside the brain and hands their
/// brain voxels to the geodesically nearest surviving cluster.
fn discard_outside(mask: &[bool], dims: Dims, labels: &mut [i32], n_clusters: usize) {
    let mut total = vec![0usize; n_clusters];
    let mut outside = vec![0usize; n_clusters];
    for (i, &l) in labels.iter().enumerate() {
        if l >= 0 {
            total[l as usize] += 1;
            if !mask[i] {
                outside[l as usize] += 1;
            }
        }
    }
    let discarded: Vec<bool> = (0..n_clusters).map(|c| 2 * outside[c] > total[c]).collect();
    let mut queue = VecDeque::new();
    for (i, l) in labels.iter_mut().enumerate() {
        if !mask[i] || *l < 0 || discarded[*l as usize] {
            *l = -1;
        } else {
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let l = labels[i];
        dims.for_each_face_neighbor(i, |j| {
            if mask[j] && labels[j] < 0 {
                labels[j] = l;
                queue.push_back(j);
            }
        });
    }
}

/// 6-connected components of equal label over the brain mask. Brain voxels
/// still unlabelled form components of their own. Returns per-voxel component
/// ids (`u32::MAX` outside the brain) and the voxel list of each component.
fn components(mask: &[bool], dims: Dims, labels: &[i32]) -> (Vec<u32>, Vec<Vec<u32>>) {
    let mut comp = vec![u32::MAX; labels.len()];
    let mut lists: Vec<Vec<u32>> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        if !mask[start] || comp[start] != u32::MAX {
            continue;
        }
        let id = lists.len() as u32;
        let l = labels[start];
        let mut members = Vec::new();
        comp[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            members.push(i as u32);
            dims.for_each_face_neighbor(i, |j| {
                if mask[j] && comp[j] == u32::MAX && labels[j] == l {
                    comp[j] = id;
                    stack.push(j);
                }
            });
        }
        members.sort_unstable();
        lists.push(members);
    }
    (comp, lists)
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Every label keeps its largest component; other fragments smaller than
/// `min_size` are merged into their largest face-adjacent neighbour, larger
/// ones become supervoxels of their own. Returns contiguous final ids.
fn enforce_connectivity(mask: &[bool], dims: Dims, labels: &[i32], min_size: f64) -> Vec<i32> {
    let (comp, lists) = components(mask, dims, labels);
    let n_comp = lists.len();

    // Largest component per label (ties: first in raster order).
    let mut main_of_label = std::collections::HashMap::<i32, usize>::new();
    for (c, members) in lists.iter().enumerate() {
        let l = labels[members[0] as usize];
        if l < 0 {
            continue;
        }
        let e = main_of_label.entry(l).or_insert(c);
        if lists[*e].len() < members.len() {
            *e = c;
        }
    }
    let is_stray =
        |c: usize| -> bool { main_of_label.get(&labels[lists[c][0] as usize]) != Some(&c) };

    let mut parent: Vec<usize> = (0..n_comp).collect();
    let mut size: Vec<usize> = lists.iter().map(Vec::len).collect();
    let mut strays: Vec<usize> = (0..n_comp)
        .filter(|&c| is_stray(c) && ((lists[c].len() as f64) < min_size || labels[lists[c][0] as usize] < 0))
        .collect();
    strays.sort_by_key(|&c| (lists[c].len(), c));
    for c in strays {
        let mut neighbours = Vec::new();
        for &i in &lists[c] {
            dims.for_each_face_neighbor(i as usize, |j| {
                if comp[j] != u32::MAX && comp[j] as usize != c {
                    neighbours.push(comp[j] as usize);
                }
            });
        }
        let rc = find(&mut parent, c);
        let mut best: Option<usize> = None;
        for nb in neighbours {
            let r = find(&mut parent, nb);
            if r == rc {
                continue;
            }
            best = match best {
                None => Some(r),
                Some(b) if size[r] > size[b] || (size[r] == size[b] && r < b) => Some(r),
                keep => keep,
            };
        }
        if let Some(b) = best {
            parent[rc] = b;
            size[b] += size[rc];
        }
    }

    let mut final_id = vec![-1i32; n_comp];
    let mut next = 0i32;
    let mut out = vec![-1i32; labels.len()];
    for i in 0..labels.len() {
        if comp[i] == u32::MAX {
            continue;
        }
        let r = find(&mut parent, comp[i] as usize);
        if final_id[r] < 0 {
            final_id[r] = next;
            next += 1;
        }
        out[i] = final_id[r];
    }
    out
}

/// Partitions the brain of `v` into roughly `k` supervoxels.
pub fn slic_partition(v: &MultiModalVolume, params: &SlicParams) -> Result<SupervoxelPartition> {
    if params.k == 0 {
        return Err(Error::Usage("k must be at least 1".into()));
    }
    if !(params.m > 0.0) {
        return Err(Error::Usage(format!("compactness m must be positive, got {}", params.m)));
    }
    let n_brain = v.brain_voxel_count();
    if n_brain == 0 {
        return Err(Error::Degenerate("brain mask is empty".into()));
    }
    let mut k = params.k;
    if k > n_brain {
        log::warn!("k={} exceeds the {} brain voxels; clamping", k, n_brain);
        k = n_brain;
    }
    let step = (n_brain as f64 / k as f64).cbrt();
    let mut centers = initial_centers(v, step);

    let n = v.dims.len();
    let mut labels = vec![-1i32; n];
    let mut dist = vec![f64::INFINITY; n];
    let mut iterations = 0;
    for _ in 0..params.max_iter.max(1) {
        assign(v, &centers, step, params.m, &mut labels, &mut dist);
        iterations += 1;
        let moved = update(v, &mut centers, &labels);
        if moved < CONVERGENCE_MOVE {
            break;
        }
    }

    discard_outside(&v.brain_mask, v.dims, &mut labels, centers.len());
    let min_size = step.powi(3) / 4.0;
    let assignment = enforce_connectivity(&v.brain_mask, v.dims, &labels, min_size);

    let meta = PartitionMeta {
        k: params.k,
        m: params.m,
        grid_step: step,
        iterations,
        seed: 0,
    };
    SupervoxelPartition::from_assignment(v.dims, assignment, &meta)
}

/// Fraction of brain voxels labelled correctly when every supervoxel takes
/// its majority label.
pub fn achievable_segmentation_accuracy(p: &SupervoxelPartition, l: &LabelVolume) -> Result<f64> {
    if p.dims != l.dims {
        return Err(Error::Shape(format!("partition {} vs labels {}", p.dims, l.dims)));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for sv in &p.supervoxels {
        let mut counts = [0usize; N_CLASSES];
        for &i in sv {
            counts[l.labels[i as usize] as usize] += 1;
        }
        correct += counts.iter().max().copied().unwrap_or(0);
        total += sv.len();
    }
    if total == 0 {
        return Err(Error::Degenerate("partition covers no voxels".into()));
    }
    Ok(correct as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub k: usize,
    pub m: f64,
    pub mean_asa: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSearchResult {
    pub table: Vec<GridCell>,
    pub best: GridCell,
}

/// Mean ASA over `cases` for each `(k, m)`; ties go to smaller `k`, then
/// smaller `m`.
pub fn slic_grid_search(
    cases: &[(MultiModalVolume, LabelVolume)],
    k_grid: &[usize],
    m_grid: &[f64],
    max_iter: usize,
) -> Result<GridSearchResult> {
    if cases.is_empty() || k_grid.is_empty() || m_grid.is_empty() {
        return Err(Error::Usage("grid search needs cases and nonempty k/m grids".into()));
    }
    let mut table = Vec::new();
    for &k in k_grid {
        for &m in m_grid {
            let params = SlicParams { k, m, max_iter };
            let asas = cases
                .par_iter()
                .map(|(v, l)| slic_partition(v, &params).and_then(|p| achievable_segmentation_accuracy(&p, l)))
                .collect::<Result<Vec<f64>>>()?;
            let mean_asa = asas.iter().sum::<f64>() / asas.len() as f64;
            table.push(GridCell { k, m, mean_asa });
        }
    }
    let best = table
        .iter()
        .cloned()
        .reduce(|a, b| {
            let better = b.mean_asa > a.mean_asa
                || (b.mean_asa == a.mean_asa && (b.k < a.k || (b.k == a.k && b.m < a.m)));
            if better {
                b
            } else {
                a
            }
        })
        .expect("nonempty grid");
    Ok(GridSearchResult { table, best })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(dims: Dims, value: f32) -> MultiModalVolume {
        MultiModalVolume::from_channels(dims, vec![value; 4 * dims.len()], [1.0; 3]).unwrap()
    }

    #[test]
    fn k_equal_to_voxel_count_gives_singletons() {
        let dims = Dims::new(5, 4, 3);
        let v = uniform(dims, 1.0);
        for m in [0.1, 0.5, 10.0] {
            let p = slic_partition(&v, &SlicParams { k: dims.len(), m, max_iter: 10 }).unwrap();
            assert_eq!(p.len(), dims.len());
            assert!(p.supervoxels.iter().all(|s| s.len() == 1));
        }
        // Clamped when k is too large.
        let p = slic_partition(&v, &SlicParams { k: 10 * dims.len(), m: 0.5, max_iter: 3 }).unwrap();
        assert_eq!(p.len(), dims.len());
    }

    #[test]
    fn uniform_cube_splits_into_octants() {
        let dims = Dims::new(32, 32, 32);
        let v = uniform(dims, 1.0);
        let p = slic_partition(&v, &SlicParams { k: 8, m: 0.5, max_iter: 10 }).unwrap();
        assert!((4..=16).contains(&p.len()), "{} supervoxels", p.len());
        let sizes: Vec<usize> = p.supervoxels.iter().map(Vec::len).collect();
        let (mn, mx) = (*sizes.iter().min().unwrap(), *sizes.iter().max().unwrap());
        assert!(mx <= 4 * mn, "sizes {sizes:?}");
    }

    #[test]
    fn invalid_parameters() {
        let v = uniform(Dims::new(2, 2, 2), 1.0);
        assert!(matches!(slic_partition(&v, &SlicParams { k: 0, m: 0.5, max_iter: 1 }), Err(Error::Usage(_))));
        assert!(matches!(slic_partition(&v, &SlicParams { k: 2, m: 0.0, max_iter: 1 }), Err(Error::Usage(_))));
        let empty = uniform(Dims::new(2, 2, 2), 0.0);
        assert!(matches!(slic_partition(&empty, &SlicParams { k: 2, m: 0.5, max_iter: 1 }), Err(Error::Degenerate(_))));
    }

    #[test]
    fn asa_definition_cases() {
        let dims = Dims::new(10, 1, 1);
        let labels = LabelVolume::new(dims, vec![0, 0, 0, 0, 0, 0, 0, 2, 2, 2]).unwrap();
        let meta = PartitionMeta { k: 1, m: 1.0, grid_step: 1.0, iterations: 0, seed: 0 };
        let one = SupervoxelPartition::from_assignment(dims, vec![0; 10], &meta).unwrap();
        assert!((achievable_segmentation_accuracy(&one, &labels).unwrap() - 0.7).abs() < 1e-12);
        let singles = SupervoxelPartition::from_assignment(dims, (0..10).collect(), &meta).unwrap();
        assert_eq!(achievable_segmentation_accuracy(&singles, &labels).unwrap(), 1.0);
        let none = SupervoxelPartition::from_assignment(dims, vec![-1; 10], &meta).unwrap();
        assert!(matches!(achievable_segmentation_accuracy(&none, &labels), Err(Error::Degenerate(_))));
    }

    #[test]
    fn serialization_roundtrip() {
        let dims = Dims::new(3, 2, 2);
        let meta = PartitionMeta { k: 3, m: 0.5, grid_step: 1.5, iterations: 4, seed: 0 };
        let p = SupervoxelPartition::from_assignment(dims, vec![0, 0, 1, -1, 1, 2, 2, 2, -1, 0, 1, 2], &meta).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.svp");
        p.save(&path).unwrap();
        assert_eq!(SupervoxelPartition::load(&path).unwrap(), p);
        assert!(SupervoxelPartition::from_bytes(b"XXXX", &meta).is_err());
    }

    #[test]
    fn grid_search_tie_break() {
        let dims = Dims::new(4, 4, 4);
        let v = uniform(dims, 1.0);
        let l = LabelVolume::zeros(dims);
        let r = slic_grid_search(&[(v, l)], &[4, 2], &[1.0, 0.5], 5).unwrap();
        assert_eq!(r.table.len(), 4);
        // Every cell has ASA 1 on a single-label volume.
        assert_eq!((r.best.k, r.best.m), (2, 0.5));
    }
}
