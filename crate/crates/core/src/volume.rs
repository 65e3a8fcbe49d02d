//! Multi-modal MRI volumes, label volumes and the intensity preprocessing
//! chain: brain bounding-box crop, per-image percentile rescale and
//! dataset-level standardization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{percentile_sorted, Dims};
use crate::nifti::{read_nifti, write_nifti, DataType, NiftiHeader};

pub const N_CHANNELS: usize = 4;

/// File-name suffixes of the four modalities, in channel order.
pub const MODALITIES: [&str; N_CHANNELS] = ["t1", "t1ce", "t2", "flair"];

/// Number of tissue classes: healthy, necrotic/NET, edema, enhancing.
pub const N_CLASSES: usize = 4;

/// Percentile used for per-image intensity rescaling.
pub const RESCALE_PERCENTILE: f64 = 99.5;

/// Four co-registered modalities on one grid plus a brain mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalVolume {
    pub dims: Dims,
    /// Channel-major: channel `c` occupies `data[c * n .. (c + 1) * n]`.
    pub data: Vec<f32>,
    pub spacing: [f32; 3],
    pub brain_mask: Vec<bool>,
    /// Corner of this grid inside the original (pre-crop) grid.
    pub origin_offset: [usize; 3],
    /// Header of the original input; carries the pre-crop geometry.
    pub source_header: NiftiHeader,
}

impl MultiModalVolume {
    /// Builds a volume whose brain mask is every voxel with a nonzero value in
    /// any channel.
    pub fn from_channels(dims: Dims, data: Vec<f32>, spacing: [f32; 3]) -> Result<Self> {
        let n = dims.len();
        if data.len() != N_CHANNELS * n {
            return Err(Error::Shape(format!(
                "expected {} values for {} channels of {dims}, got {}",
                N_CHANNELS * n,
                N_CHANNELS,
                data.len()
            )));
        }
        let brain_mask = (0..n)
            .map(|i| (0..N_CHANNELS).any(|c| data[c * n + i] != 0.0))
            .collect();
        Ok(MultiModalVolume {
            dims,
            data,
            spacing,
            brain_mask,
            origin_offset: [0; 3],
            source_header: NiftiHeader::new(dims, spacing, DataType::F32),
        })
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.len()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.n_voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.n_voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn voxel(&self, idx: usize) -> [f32; N_CHANNELS] {
        let n = self.n_voxels();
        std::array::from_fn(|c| self.data[c * n + idx])
    }

    pub fn brain_voxel_count(&self) -> usize {
        self.brain_mask.iter().filter(|&&m| m).count()
    }

    pub fn source_dims(&self) -> Dims {
        self.source_header.dims()
    }
}

/// Per-voxel class labels in `0..4` (BraTS label 4 is stored as 3).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    pub dims: Dims,
    pub labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: Dims, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != dims.len() {
            return Err(Error::Shape(format!(
                "label grid has {} values, expected {}",
                labels.len(),
                dims.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= N_CLASSES) {
            return Err(Error::Data(format!("internal label {bad} outside 0..4")));
        }
        Ok(LabelVolume { dims, labels })
    }

    pub fn zeros(dims: Dims) -> Self {
        LabelVolume {
            dims,
            labels: vec![0; dims.len()],
        }
    }

    /// Converts raw BraTS values {0,1,2,4} to internal classes.
    pub fn from_brats(dims: Dims, raw: &[f32]) -> Result<Self> {
        let labels = raw
            .iter()
            .map(|&v| match v {
                x if x == 0.0 => Ok(0),
                x if x == 1.0 => Ok(1),
                x if x == 2.0 => Ok(2),
                x if x == 4.0 => Ok(3),
                x => Err(Error::Data(format!("label value {x} outside {{0,1,2,4}}"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        LabelVolume::new(dims, labels)
    }

    /// Internal classes mapped back to BraTS values.
    pub fn to_brats(&self) -> Vec<f32> {
        self.labels
            .iter()
            .map(|&l| if l == 3 { 4.0 } else { l as f32 })
            .collect()
    }
}

/// Per-channel moments pooled over the nonzero voxels of a training corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub mean: [f64; N_CHANNELS],
    pub std: [f64; N_CHANNELS],
    pub n_cases: usize,
}

impl DatasetStats {
    pub fn identity() -> Self {
        DatasetStats {
            mean: [0.0; N_CHANNELS],
            std: [1.0; N_CHANNELS],
            n_cases: 0,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stats: DatasetStats =
            toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if stats.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::format(path, "non-positive standard deviation"));
        }
        Ok(stats)
    }
}

/// Paths of one case in the on-disk dataset layout:
/// `<root>/<id>/<id>_{t1,t1ce,t2,flair,seg}.nii.gz`.
#[derive(Clone, Debug)]
pub struct CasePaths {
    pub id: String,
    pub images: [PathBuf; N_CHANNELS],
    pub label: PathBuf,
}

impl CasePaths {
    pub fn new(root: &Path, id: &str) -> Self {
        let dir = root.join(id);
        CasePaths {
            id: id.to_string(),
            images: MODALITIES.map(|m| dir.join(format!("{id}_{m}.nii.gz"))),
            label: dir.join(format!("{id}_seg.nii.gz")),
        }
    }

    pub fn dir(&self) -> PathBuf {
        self.label.parent().expect("case file has a parent").to_path_buf()
    }
}

/// Loads four modalities and an optional label map into one volume.
pub fn load_case(
    image_paths: &[PathBuf; N_CHANNELS],
    label_path: Option<&Path>,
) -> Result<(MultiModalVolume, Option<LabelVolume>)> {
    let mut header = None;
    let mut dims = None;
    let mut data = Vec::new();
    for path in image_paths {
        let img = read_nifti(path)?;
        let d = img.header.dims();
        match dims {
            None => {
                dims = Some(d);
                header = Some(img.header.clone());
            }
            Some(prev) if prev != d => {
                return Err(Error::Consistency(format!(
                    "{} has shape {d}, expected {prev}",
                    path.display()
                )))
            }
            _ => {}
        }
        data.extend_from_slice(&img.data);
    }
    let dims = dims.expect("four image paths");
    let header = header.expect("four image paths");
    let spacing = header.spacing();
    let mut volume = MultiModalVolume::from_channels(dims, data, spacing)?;
    volume.source_header = header;

    let labels = match label_path {
        Some(path) => {
            let img = read_nifti(path)?;
            if img.header.dims() != dims {
                return Err(Error::Consistency(format!(
                    "{} has shape {}, expected {dims}",
                    path.display(),
                    img.header.dims()
                )));
            }
            Some(LabelVolume::from_brats(dims, &img.data).map_err(|e| match e {
                Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
                other => other,
            })?)
        }
        None => None,
    };
    Ok((volume, labels))
}

/// Writes a case in the dataset layout. Used by the phantom generator.
pub fn write_case(paths: &CasePaths, v: &MultiModalVolume, l: Option<&LabelVolume>) -> Result<()> {
    let dir = paths.dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (c, path) in paths.images.iter().enumerate() {
        write_nifti(path, &v.source_header, v.dims, DataType::F32, v.channel(c))?;
    }
    if let Some(l) = l {
        write_nifti(&paths.label, &v.source_header, l.dims, DataType::U8, &l.to_brats())?;
    }
    Ok(())
}

/// Writes a prediction in the original (pre-crop) geometry as uint8 BraTS
/// labels, reusing the reference input header.
pub fn export_prediction(path: &Path, pred: &LabelVolume, reference: &MultiModalVolume) -> Result<()> {
    if pred.dims != reference.dims {
        return Err(Error::Shape(format!(
            "prediction {} does not match volume {}",
            pred.dims, reference.dims
        )));
    }
    let full = reference.source_dims();
    let [ox, oy, oz] = reference.origin_offset;
    let mut out = vec![0f32; full.len()];
    let brats = pred.to_brats();
    let [nx, ny, nz] = pred.dims.0;
    for z in 0..nz {
        for y in 0..ny {
            let src = pred.dims.index(0, y, z);
            let dst = full.index(ox, oy + y, oz + z);
            out[dst..dst + nx].copy_from_slice(&brats[src..src + nx]);
        }
    }
    write_nifti(path, &reference.source_header, full, DataType::U8, &out)
}

/// Crops to the tight bounding box of the brain mask.
pub fn crop_to_brain_bbox(
    v: &MultiModalVolume,
    l: Option<&LabelVolume>,
) -> Result<(MultiModalVolume, Option<LabelVolume>)> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, _) in v.brain_mask.iter().enumerate().filter(|(_, &m)| m) {
        any = true;
        let c = v.dims.coords(i);
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    if !any {
        return Err(Error::Degenerate("brain mask is empty".into()));
    }
    let new_dims = Dims::new(hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1);
    let crop = |src: &[f32], dst: &mut Vec<f32>| {
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                let s = v.dims.index(lo[0], y, z);
                dst.extend_from_slice(&src[s..s + new_dims.0[0]]);
            }
        }
    };
    let mut data = Vec::with_capacity(N_CHANNELS * new_dims.len());
    for c in 0..N_CHANNELS {
        crop(v.channel(c), &mut data);
    }
    let mut mask = Vec::with_capacity(new_dims.len());
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            let s = v.dims.index(lo[0], y, z);
            mask.extend_from_slice(&v.brain_mask[s..s + new_dims.0[0]]);
        }
    }
    let labels = l.map(|l| {
        let mut out = Vec::with_capacity(new_dims.len());
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                let s = l.dims.index(lo[0], y, z);
                out.extend_from_slice(&l.labels[s..s + new_dims.0[0]]);
            }
        }
        LabelVolume {
            dims: new_dims,
            labels: out,
        }
    });
    let cropped = MultiModalVolume {
        dims: new_dims,
        data,
        spacing: v.spacing,
        brain_mask: mask,
        origin_offset: [
            v.origin_offset[0] + lo[0],
            v.origin_offset[1] + lo[1],
            v.origin_offset[2] + lo[2],
        ],
        source_header: v.source_header.clone(),
    };
    Ok((cropped, labels))
}

fn nonzero_sorted(values: &[f32]) -> Vec<f64> {
    let mut nz: Vec<f64> = values
        .iter()
        .filter(|&&x| x != 0.0)
        .map(|&x| x as f64)
        .collect();
    nz.sort_by(f64::total_cmp);
    nz
}

/// Divides each channel by the 99.5th percentile of its nonzero voxels.
pub fn rescale_by_percentile(v: &MultiModalVolume) -> Result<MultiModalVolume> {
    let mut out = v.clone();
    for c in 0..N_CHANNELS {
        let nz = nonzero_sorted(v.channel(c));
        if nz.is_empty() {
            return Err(Error::Degenerate(format!(
                "channel {} ({}) has no nonzero voxels",
                c, MODALITIES[c]
            )));
        }
        let divisor = percentile_sorted(&nz, RESCALE_PERCENTILE);
        if !(divisor.is_finite() && divisor != 0.0) {
            return Err(Error::Degenerate(format!(
                "channel {} ({}) has percentile divisor {divisor}",
                c, MODALITIES[c]
            )));
        }
        for x in out.channel_mut(c) {
            *x = (*x as f64 / divisor) as f32;
        }
    }
    Ok(out)
}

/// Applies `(x - mean) / std` per channel to every voxel, background
/// included.
pub fn standardize(v: &MultiModalVolume, stats: &DatasetStats) -> MultiModalVolume {
    let mut out = v.clone();
    for c in 0..N_CHANNELS {
        let (m, s) = (stats.mean[c], stats.std[c]);
        for x in out.channel_mut(c) {
            *x = ((*x as f64 - m) / s) as f32;
        }
    }
    out
}

/// Inverse of [`standardize`].
pub fn destandardize(v: &MultiModalVolume, stats: &DatasetStats) -> MultiModalVolume {
    let mut out = v.clone();
    for c in 0..N_CHANNELS {
        let (m, s) = (stats.mean[c], stats.std[c]);
        for x in out.channel_mut(c) {
            *x = (*x as f64 * s + m) as f32;
        }
    }
    out
}

/// Running count / mean / M2 accumulator that merges exactly enough to be
/// insensitive to reduction order at the tolerances we care about.
#[derive(Clone, Copy, Debug, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn of_nonzero(values: &[f32]) -> Self {
        let nz = || values.iter().filter(|&&x| x != 0.0).map(|&x| x as f64);
        let (n, sum) = nz().fold((0.0, 0.0), |(n, s), x| (n + 1.0, s + x));
        if n == 0.0 {
            return Moments::default();
        }
        let mean = sum / n;
        let m2 = nz().map(|x| (x - mean) * (x - mean)).sum();
        Moments { n, mean, m2 }
    }

    fn merge(self, o: Moments) -> Moments {
        if self.n == 0.0 {
            return o;
        }
        if o.n == 0.0 {
            return self;
        }
        let n = self.n + o.n;
        let delta = o.mean - self.mean;
        Moments {
            n,
            mean: self.mean + delta * o.n / n,
            m2: self.m2 + o.m2 + delta * delta * self.n * o.n / n,
        }
    }
}

/// Pools per-channel mean and population standard deviation over the nonzero
/// voxels of every case.
pub fn compute_dataset_stats<'a, I>(corpus: I) -> Result<DatasetStats>
where
    I: IntoIterator<Item = &'a MultiModalVolume>,
{
    let mut acc = [Moments::default(); N_CHANNELS];
    let mut n_cases = 0;
    for v in corpus {
        n_cases += 1;
        for (c, a) in acc.iter_mut().enumerate() {
            *a = a.merge(Moments::of_nonzero(v.channel(c)));
        }
    }
    if n_cases == 0 {
        return Err(Error::Usage("cannot compute dataset statistics of an empty corpus".into()));
    }
    let mut mean = [0.0; N_CHANNELS];
    let mut std = [0.0; N_CHANNELS];
    for c in 0..N_CHANNELS {
        if acc[c].n < 2.0 {
            return Err(Error::Degenerate(format!(
                "channel {} ({}) has fewer than two nonzero voxels in the corpus",
                c, MODALITIES[c]
            )));
        }
        mean[c] = acc[c].mean;
        std[c] = (acc[c].m2 / acc[c].n).sqrt();
        if !(std[c] > 0.0) {
            return Err(Error::Degenerate(format!(
                "channel {} ({}) has zero variance",
                c, MODALITIES[c]
            )));
        }
    }
    Ok(DatasetStats { mean, std, n_cases })
}

/// Crop, rescale and (optionally) standardize in one call.
pub fn preprocess(
    v: &MultiModalVolume,
    l: Option<&LabelVolume>,
    stats: Option<&DatasetStats>,
) -> Result<(MultiModalVolume, Option<LabelVolume>)> {
    let (cropped, labels) = crop_to_brain_bbox(v, l)?;
    let rescaled = rescale_by_percentile(&cropped)?;
    let out = match stats {
        Some(s) => standardize(&rescaled, s),
        None => rescaled,
    };
    Ok((out, labels))
}

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Usage(format!("unknown split {other:?} (expected train or val)"))),
        }
    }
}

/// Writes `<root>/manifest.txt`, one `case_id split` line per case.
pub fn write_manifest(root: &Path, entries: &[(String, Split)]) -> Result<()> {
    let mut s = String::new();
    for (id, split) in entries {
        s.push_str(id);
        s.push(' ');
        s.push_str(split.as_str());
        s.push('\n');
    }
    let path = root.join(MANIFEST_FILE);
    std::fs::write(&path, s).map_err(|e| Error::io(&path, e))
}

/// Reads the manifest; without one, every case subdirectory is a training
/// case, in sorted order.
pub fn read_manifest(root: &Path) -> Result<Vec<(String, Split)>> {
    let path = root.join(MANIFEST_FILE);
    if path.exists() {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(id), Some(split), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::format(&path, format!("line {}: expected `case_id split`", n + 1)));
            };
            let split = split
                .parse()
                .map_err(|_| Error::format(&path, format!("line {}: unknown split {split:?}", n + 1)))?;
            out.push((id.to_string(), split));
        }
        return Ok(out);
    }
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut ids = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(root, e))?;
        if e.file_type().map_err(|err| Error::io(e.path(), err))?.is_dir() {
            ids.push(e.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    log::warn!("{} has no {MANIFEST_FILE}; treating all {} cases as training cases", root.display(), ids.len());
    Ok(ids.into_iter().map(|id| (id, Split::Train)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume_from_fn(dims: Dims, f: impl Fn([usize; 3], usize) -> f32) -> MultiModalVolume {
        let n = dims.len();
        let mut data = vec![0.0; N_CHANNELS * n];
        for c in 0..N_CHANNELS {
            for i in 0..n {
                data[c * n + i] = f(dims.coords(i), c);
            }
        }
        MultiModalVolume::from_channels(dims, data, [1.0; 3]).unwrap()
    }

    #[test]
    fn crop_to_known_box() {
        let dims = Dims::new(10, 10, 10);
        let v = volume_from_fn(dims, |[x, y, z], c| {
            let inside = (2..=5).contains(&x) && (2..=5).contains(&y) && (2..=5).contains(&z);
            if inside {
                (x + 10 * y + 100 * z + c) as f32 + 1.0
            } else {
                0.0
            }
        });
        let labels = LabelVolume::new(dims, (0..dims.len()).map(|i| (i % 4) as u8).collect()).unwrap();
        let (cv, cl) = crop_to_brain_bbox(&v, Some(&labels)).unwrap();
        assert_eq!(cv.dims, Dims::new(4, 4, 4));
        assert_eq!(cv.origin_offset, [2, 2, 2]);
        let cl = cl.unwrap();
        for i in 0..cv.dims.len() {
            let [x, y, z] = cv.dims.coords(i);
            let orig = dims.index(x + 2, y + 2, z + 2);
            assert_eq!(cl.labels[i], labels.labels[orig]);
            assert_eq!(cv.voxel(i), v.voxel(orig));
            assert!(cv.brain_mask[i]);
        }
    }

    #[test]
    fn crop_full_volume_is_identity() {
        let dims = Dims::new(3, 4, 5);
        let v = volume_from_fn(dims, |_, _| 1.0);
        let (cv, _) = crop_to_brain_bbox(&v, None).unwrap();
        assert_eq!(cv.dims, dims);
        assert_eq!(cv.origin_offset, [0, 0, 0]);
        assert_eq!(cv.data, v.data);
    }

    #[test]
    fn crop_empty_mask_is_degenerate() {
        let v = volume_from_fn(Dims::new(4, 4, 4), |_, _| 0.0);
        assert!(matches!(crop_to_brain_bbox(&v, None), Err(Error::Degenerate(_))));
    }

    #[test]
    fn rescale_constant_channel_gives_ones() {
        let dims = Dims::new(4, 4, 4);
        let v = volume_from_fn(dims, |[x, _, _], _| if x < 2 { 200.0 } else { 0.0 });
        let r = rescale_by_percentile(&v).unwrap();
        for c in 0..N_CHANNELS {
            for (i, &x) in r.channel(c).iter().enumerate() {
                if v.brain_mask[i] {
                    assert_eq!(x, 1.0);
                } else {
                    assert_eq!(x, 0.0);
                }
            }
        }
        assert_eq!(r.brain_mask, v.brain_mask);
    }

    #[test]
    fn rescale_matches_sorted_percentile_oracle() {
        let dims = Dims::new(10, 10, 10);
        let v = volume_from_fn(dims, |[x, y, z], _| (x + 10 * y + 100 * z + 1) as f32);
        // Oracle: sort 1..=1000, position 0.995 * 999 = 994.005.
        let mut sorted: Vec<f64> = (1..=1000).map(f64::from).collect();
        sorted.sort_by(f64::total_cmp);
        let lo = sorted[994];
        let hi = sorted[995];
        let divisor = lo + (hi - lo) * 0.005;
        assert!((divisor - 995.005).abs() < 1e-9);
        let r = rescale_by_percentile(&v).unwrap();
        let max = r.channel(0).iter().cloned().fold(f32::MIN, f32::max) as f64;
        assert!((max - 1000.0 / divisor).abs() < 1e-6);

        let twice = rescale_by_percentile(&r).unwrap();
        for (a, b) in twice.data.iter().zip(&r.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rescale_zero_channel_names_it() {
        let v = volume_from_fn(Dims::new(2, 2, 2), |_, c| if c == 2 { 0.0 } else { 1.0 });
        match rescale_by_percentile(&v) {
            Err(Error::Degenerate(msg)) => assert!(msg.contains("t2"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn standardize_identity_and_constant() {
        let v = volume_from_fn(Dims::new(2, 2, 2), |_, _| 5.0);
        assert_eq!(standardize(&v, &DatasetStats::identity()), v);
        let stats = DatasetStats {
            mean: [5.0; 4],
            std: [2.0; 4],
            n_cases: 1,
        };
        assert!(standardize(&v, &stats).data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn two_point_stats() {
        let dims = Dims::new(2, 1, 1);
        let v = volume_from_fn(dims, |[x, _, _], _| if x == 0 { 1.0 } else { 3.0 });
        let s = compute_dataset_stats([&v]).unwrap();
        assert_eq!(s.mean, [2.0; 4]);
        assert_eq!(s.std, [1.0; 4]);
        let twice = compute_dataset_stats([&v, &v]).unwrap();
        assert_eq!(twice.mean, s.mean);
        assert_eq!(twice.std, s.std);
    }

    #[test]
    fn empty_corpus_is_usage_error() {
        let empty: Vec<MultiModalVolume> = Vec::new();
        assert!(matches!(compute_dataset_stats(&empty), Err(Error::Usage(_))));
    }

    #[test]
    fn brats_label_mapping() {
        let dims = Dims::new(4, 1, 1);
        let l = LabelVolume::from_brats(dims, &[0.0, 1.0, 2.0, 4.0]).unwrap();
        assert_eq!(l.labels, vec![0, 1, 2, 3]);
        assert_eq!(l.to_brats(), vec![0.0, 1.0, 2.0, 4.0]);
        assert!(matches!(
            LabelVolume::from_brats(dims, &[0.0, 3.0, 0.0, 0.0]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![("a".to_string(), Split::Train), ("b".to_string(), Split::Val)];
        write_manifest(dir.path(), &entries).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), entries);
        std::fs::write(dir.path().join(MANIFEST_FILE), "a test\n").unwrap();
        assert!(matches!(read_manifest(dir.path()), Err(Error::Format { .. })));
    }
}
