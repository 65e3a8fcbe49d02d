//! End-to-end orchestration: preprocessing, supervoxels, graphs, the two
//! training stages, prediction and evaluation over on-disk datasets.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Checkpoint, Tensor};
use crate::error::{Error, Result};
use crate::gnn::{train_gnn, EpochRecord, Gnn, GnnConfig};
use crate::graph::BrainGraph;
use crate::grid::Dims;
use crate::metrics::{evaluate_case, format_csv, summarize, CaseReport, MetricConfig, Summary};
use crate::nifti::{read_nifti, NiftiHeader};
use crate::phantom::PhantomSpec;
use crate::refine::{
    merge_predictions, patch_input, reproject_logits, train_cnn, tumor_patch, Cnn, CnnConfig, CnnSample,
    LogitVolume, PatchBounds,
};
use crate::supervoxel::{slic_grid_search, slic_partition, GridSearchResult, SlicParams, SupervoxelPartition};
use crate::volume::{
    compute_dataset_stats, crop_to_brain_bbox, export_prediction, load_case, read_manifest, rescale_by_percentile,
    standardize, write_manifest, CasePaths, DatasetStats, LabelVolume, MultiModalVolume, Split, N_CHANNELS,
};

pub const STATS_FILE: &str = "stats.toml";
pub const CONFIG_FILE: &str = "config.toml";
pub const GNN_CHECKPOINT: &str = "gnn.ckpt";
pub const CNN_CHECKPOINT: &str = "cnn.ckpt";
pub const GNN_LOG: &str = "gnn_metrics.log";
pub const CNN_LOG: &str = "cnn_metrics.log";
pub const PATCHES_FILE: &str = "patches.tsv";
const CASE_EXT: &str = "pvol";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Where intermediate artifacts are cached; `<train out>/cache` if unset.
    pub cache_dir: Option<PathBuf>,
}

/// Every tunable of the pipeline in one TOML document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub slic: SlicParams,
    pub gnn: GnnConfig,
    pub cnn: CnnConfig,
    pub metrics: MetricConfig,
    pub phantom: PhantomSpec,
    pub paths: PathsConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// `path` if given, the default configuration otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.slic.k == 0 || !(self.slic.m > 0.0) || self.slic.max_iter == 0 {
            return Err(Error::Config("slic.k, slic.m and slic.max_iter must be positive".into()));
        }
        self.gnn.validate()?;
        self.cnn.validate()?;
        if !(self.metrics.empty_penalty >= 0.0) {
            return Err(Error::Config("metrics.empty_penalty must be non-negative".into()));
        }
        Ok(())
    }

    pub fn log_resolved(&self) {
        log::info!("resolved configuration:\n{}", self.to_toml());
    }
}

/// Runs `f` on a rayon pool of `jobs` threads (0 = rayon's default).
pub fn with_jobs<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Usage(format!("cannot start {jobs} worker threads: {e}")))?;
    Ok(pool.install(f))
}

/// A cropped, rescaled, standardized case with what is needed to restore its
/// original geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessedCase {
    pub id: String,
    pub volume: MultiModalVolume,
    pub labels: Option<LabelVolume>,
}

impl PreprocessedCase {
    /// Binary layout: `b"PVOL1"`, id, dims, spacing, crop offset, 348 source
    /// header bytes, channel data, mask bytes, label flag + labels.
    pub fn to_bytes(&self) -> Vec<u8> {
        let v = &self.volume;
        let mut out = b"PVOL1".to_vec();
        out.extend_from_slice(&(self.id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.id.as_bytes());
        for d in v.dims.0 {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in v.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for o in v.origin_offset {
            out.extend_from_slice(&(o as u32).to_le_bytes());
        }
        out.extend_from_slice(v.source_header.as_bytes());
        for x in &v.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend(v.brain_mask.iter().map(|&m| m as u8));
        match &self.labels {
            Some(l) => {
                out.push(1);
                out.extend_from_slice(&l.labels);
            }
            None => out.push(0),
        }
        out
    }

    pub fn from_bytes(path: &Path, b: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = b.get(pos..pos + n).ok_or_else(|| bad("truncated preprocessed case"))?;
            pos += n;
            Ok(s)
        };
        if take(5)? != b"PVOL1" {
            return Err(bad("not a preprocessed case"));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
        let id_len = u32_at(take(4)?) as usize;
        let id = String::from_utf8(take(id_len)?.to_vec()).map_err(|_| bad("case id is not utf-8"))?;
        let mut d = [0usize; 3];
        for v in &mut d {
            *v = u32_at(take(4)?) as usize;
        }
        let mut spacing = [0f32; 3];
        for s in &mut spacing {
            *s = f32::from_le_bytes(take(4)?.try_into().unwrap());
        }
        let mut origin_offset = [0usize; 3];
        for o in &mut origin_offset {
            *o = u32_at(take(4)?) as usize;
        }
        let source_header = NiftiHeader::from_bytes(take(348)?)?;
        let dims = Dims(d);
        let n = dims.len();
        let data = take(4 * N_CHANNELS * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let brain_mask = take(n)?.iter().map(|&m| m != 0).collect();
        let labels = match take(1)?[0] {
            0 => None,
            1 => Some(LabelVolume::new(dims, take(n)?.to_vec())?),
            _ => return Err(bad("bad label flag")),
        };
        if pos != b.len() {
            return Err(bad("trailing bytes in preprocessed case"));
        }
        let volume = MultiModalVolume { dims, data, spacing, brain_mask, origin_offset, source_header };
        Ok(PreprocessedCase { id, volume, labels })
    }

    pub fn path(dir: &Path, id: &str) -> PathBuf {
        dir.join(format!("{id}.{CASE_EXT}"))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = Self::path(dir, &self.id);
        fs::write(&path, self.to_bytes()).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, id: &str) -> Result<Self> {
        let path = Self::path(dir, id);
        let b = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_bytes(&path, &b)
    }
}

/// Content hash of a byte string plus a tag, as lowercase hex.
fn content_key(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Crops, rescales and standardizes every case listed in `data`'s manifest
/// into `out`, with statistics from the training split only. Writes one
/// `.pvol` per case, `stats.toml` and a copy of the manifest.
pub fn preprocess_dataset(data: &Path, out: &Path) -> Result<DatasetStats> {
    let manifest = read_manifest(data)?;
    if manifest.is_empty() {
        return Err(Error::Usage(format!("{} lists no cases", data.display())));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let rescaled: Vec<(String, Split, MultiModalVolume, Option<LabelVolume>)> = manifest
        .par_iter()
        .map(|(id, split)| {
            let paths = CasePaths::new(data, id);
            let label = paths.label.exists().then_some(paths.label.as_path());
            if label.is_none() && *split == Split::Train {
                return Err(Error::Data(format!("training case {id} has no label file {}", paths.label.display())));
            }
            let (v, l) = load_case(&paths.images, label)?;
            let (c, l) = crop_to_brain_bbox(&v, l.as_ref())
                .map_err(|e| Error::Data(format!("case {id}: {e}")))?;
            Ok((id.clone(), *split, rescale_by_percentile(&c)?, l))
        })
        .collect::<Result<_>>()?;
    let train: Vec<&MultiModalVolume> =
        rescaled.iter().filter(|c| c.1 == Split::Train).map(|c| &c.2).collect();
    if train.is_empty() {
        return Err(Error::Usage("no training cases to compute dataset statistics from".into()));
    }
    let stats = compute_dataset_stats(train)?;
    log::info!("dataset statistics from {} training cases: {stats:?}", stats.n_cases);
    rescaled.into_par_iter().try_for_each(|(id, _, v, l)| {
        PreprocessedCase { id, volume: standardize(&v, &stats), labels: l }.save(out)
    })?;
    stats.save(&out.join(STATS_FILE))?;
    write_manifest(out, &manifest)?;
    Ok(stats)
}

fn require_preprocessed(data: &Path) -> Result<Vec<(String, Split)>> {
    if !data.join(STATS_FILE).exists() {
        return Err(Error::Usage(format!(
            "{} is not a preprocessed dataset (no {STATS_FILE}); run `preprocess` first",
            data.display()
        )));
    }
    read_manifest(data)
}

fn select(manifest: Vec<(String, Split)>, split: Option<Split>) -> Vec<String> {
    manifest
        .into_iter()
        .filter(|(_, s)| split.is_none_or(|want| *s == want))
        .map(|(id, _)| id)
        .collect()
}

/// Grid search of SLIC parameters on the labelled training cases of a
/// preprocessed dataset.
pub fn tune_slic(data: &Path, k_grid: &[usize], m_grid: &[f64], max_iter: usize) -> Result<GridSearchResult> {
    let ids = select(require_preprocessed(data)?, Some(Split::Train));
    let cases = ids
        .par_iter()
        .map(|id| {
            let c = PreprocessedCase::load(data, id)?;
            let l = c.labels.ok_or_else(|| Error::Data(format!("training case {id} has no labels")))?;
            Ok((c.volume, l))
        })
        .collect::<Result<Vec<_>>>()?;
    slic_grid_search(&cases, k_grid, m_grid, max_iter)
}

/// Formats a grid-search table as CSV with the best row marked.
pub fn format_asa_table(r: &GridSearchResult) -> String {
    let mut s = String::from("k,m,mean_asa,best\n");
    for c in &r.table {
        let best = if c.k == r.best.k && c.m == r.best.m { "*" } else { "" };
        s.push_str(&format!("{},{},{:.6},{best}\n", c.k, c.m, c.mean_asa));
    }
    s
}

/// On-disk cache of per-case intermediate artifacts.
pub struct ArtifactCache {
    dir: PathBuf,
}

impl ArtifactCache {
    pub fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(ArtifactCache { dir })
    }

    fn file(&self, key: &str, ext: &str) -> PathBuf {
        self.dir.join(format!("{key}.{ext}"))
    }

    /// Partition and graph of one case, computed on a miss.
    pub fn graph(&self, case: &PreprocessedCase, slic: &SlicParams) -> Result<(SupervoxelPartition, BrainGraph, String)> {
        let params = toml::to_string(slic).expect("slic params serialize");
        let key = content_key(&[b"graph", &case.to_bytes(), params.as_bytes()]);
        let (pp, gp) = (self.file(&key, "svp"), self.file(&key, "bgr"));
        if pp.exists() && gp.exists() {
            if let (Ok(p), Ok(g)) = (SupervoxelPartition::load(&pp), BrainGraph::load(&gp)) {
                return Ok((p, g, key));
            }
            log::warn!("ignoring unreadable cache entry {key}");
        }
        let p = slic_partition(&case.volume, slic).map_err(|e| match e {
            Error::Degenerate(m) => Error::Data(format!("case {}: {m}", case.id)),
            other => other,
        })?;
        let g = crate::graph::build_graph(&case.volume, &p, case.labels.as_ref())?;
        p.save(&pp)?;
        g.save(&gp)?;
        Ok((p, g, key))
    }

    /// Reprojected GNN logits of one case, computed on a miss.
    pub fn logits(
        &self,
        graph_key: &str,
        gnn_bytes: &[u8],
        p: &SupervoxelPartition,
        g: &BrainGraph,
        gnn: &Gnn<f32>,
    ) -> Result<LogitVolume> {
        let key = content_key(&[b"logits", graph_key.as_bytes(), gnn_bytes]);
        let path = self.file(&key, "lgv");
        if let Ok(b) = fs::read(&path) {
            match LogitVolume::from_bytes(&b) {
                Ok(lv) => return Ok(lv),
                Err(e) => log::warn!("ignoring unreadable cache entry {}: {e}", path.display()),
            }
        }
        let lv = gnn_logit_volume(gnn, p, g)?;
        fs::write(&path, lv.to_bytes()).map_err(|e| Error::io(&path, e))?;
        Ok(lv)
    }
}

pub fn gnn_logit_volume(gnn: &Gnn<f32>, p: &SupervoxelPartition, g: &BrainGraph) -> Result<LogitVolume> {
    let _fp = crate::autodiff::FlushDenormals::new();
    let logits = gnn.forward(g)?;
    reproject_logits(logits.data(), p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Gnn,
    Cnn,
    Both,
}

fn write_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let text: String = records.iter().map(|r| format!("{r}\n")).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cache_for(cfg: &PipelineConfig, out: &Path) -> Result<ArtifactCache> {
    ArtifactCache::new(cfg.paths.cache_dir.clone().unwrap_or_else(|| out.join("cache")))
}

/// Trains the requested stages on the training split of a preprocessed
/// dataset. Writes `gnn.ckpt` / `cnn.ckpt`, per-epoch logs and the resolved
/// configuration into `out`.
pub fn train(data: &Path, out: &Path, cfg: &PipelineConfig, stage: Stage) -> Result<()> {
    cfg.validate()?;
    let ids = select(require_preprocessed(data)?, Some(Split::Train));
    if ids.is_empty() {
        return Err(Error::Usage(format!("{} has no training cases", data.display())));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let gnn_path = out.join(GNN_CHECKPOINT);
    if stage == Stage::Cnn && !gnn_path.exists() {
        return Err(Error::Usage(format!(
            "no GNN checkpoint at {}; run `train --stage gnn` (or `--stage both`) first",
            gnn_path.display()
        )));
    }
    fs::write(out.join(CONFIG_FILE), cfg.to_toml()).map_err(|e| Error::io(out.join(CONFIG_FILE), e))?;
    let cache = cache_for(cfg, out)?;

    let cases: Vec<(PreprocessedCase, SupervoxelPartition, BrainGraph, String)> = ids
        .par_iter()
        .map(|id| {
            let c = PreprocessedCase::load(data, id)?;
            if c.labels.is_none() {
                return Err(Error::Data(format!("training case {id} has no labels")));
            }
            let (p, g, key) = cache.graph(&c, &cfg.slic)?;
            Ok((c, p, g, key))
        })
        .collect::<Result<_>>()?;
    let nodes: usize = cases.iter().map(|c| c.2.n_nodes).sum();
    log::info!("{} training graphs, {nodes} nodes in total", cases.len());

    if matches!(stage, Stage::Gnn | Stage::Both) {
        let graphs: Vec<BrainGraph> = cases.iter().map(|c| c.2.clone()).collect();
        let mut records = Vec::new();
        let (model, _) = train_gnn(&graphs, &cfg.gnn, |r| {
            log::info!("gnn {r}");
            records.push(*r);
        })?;
        model.to_checkpoint(cfg.gnn.epochs as u32).save(&gnn_path)?;
        write_log(&out.join(GNN_LOG), &records)?;
    }

    if matches!(stage, Stage::Cnn | Stage::Both) {
        let gnn_bytes = fs::read(&gnn_path).map_err(|e| Error::io(&gnn_path, e))?;
        let gnn = Gnn::from_checkpoint(&Checkpoint::load(&gnn_path)?)?;
        let samples: Vec<Option<CnnSample>> = cases
            .par_iter()
            .map(|(c, p, g, key)| {
                let lv = cache.logits(key, &gnn_bytes, p, g, &gnn)?;
                CnnSample::from_case(&lv, &c.volume, c.labels.as_ref().expect("checked"), cfg.cnn.margin)
            })
            .collect::<Result<_>>()?;
        let samples: Vec<CnnSample> = samples.into_iter().flatten().collect();
        log::info!("{} of {} training cases have a predicted tumour patch", samples.len(), cases.len());
        let mut records = Vec::new();
        let (model, _) = train_cnn(&samples, &cfg.cnn, |r| {
            log::info!("cnn {r}");
            records.push(*r);
        })?;
        if let Some(model) = model {
            model.to_checkpoint(cfg.cnn.epochs as u32).save(&out.join(CNN_CHECKPOINT))?;
        }
        write_log(&out.join(CNN_LOG), &records)?;
    }
    Ok(())
}

/// Prediction for one case.
pub struct CasePrediction {
    pub id: String,
    pub labels: LabelVolume,
    /// Patch refined by the CNN, if one ran, in the preprocessed grid.
    pub patch: Option<PatchBounds>,
    /// Corner of the preprocessed grid inside the exported one.
    pub origin_offset: [usize; 3],
}

pub fn predict_case(
    case: &PreprocessedCase,
    slic: &SlicParams,
    gnn: &Gnn<f32>,
    cnn: Option<&Cnn<f32>>,
) -> Result<CasePrediction> {
    let _fp = crate::autodiff::FlushDenormals::new();
    let p = slic_partition(&case.volume, slic)?;
    let g = crate::graph::build_graph(&case.volume, &p, None)?;
    let lv = gnn_logit_volume(gnn, &p, &g)?;
    let gnn_pred = lv.argmax();
    let (id, origin_offset) = (case.id.clone(), case.volume.origin_offset);
    let Some(cnn) = cnn else {
        return Ok(CasePrediction { id, labels: gnn_pred, patch: None, origin_offset });
    };
    let Some(bounds) = tumor_patch(&lv, cnn.config.margin) else {
        return Ok(CasePrediction { id, labels: gnn_pred, patch: None, origin_offset });
    };
    let input = patch_input(&lv, &case.volume, &bounds)?;
    let logits: Tensor<f32> = cnn.forward_stacked(&input)?;
    let labels = merge_predictions(&gnn_pred, Some(&logits), Some(&bounds), &case.volume.brain_mask)?;
    Ok(CasePrediction { id, labels, patch: Some(bounds), origin_offset })
}

/// SLIC settings used at training time, read from the `config.toml` written
/// next to the GNN checkpoint.
pub fn training_config_near(gnn_ckpt: &Path) -> Result<PipelineConfig> {
    let path = gnn_ckpt.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE);
    if path.exists() {
        PipelineConfig::load(&path)
    } else {
        log::warn!("no {} next to the GNN checkpoint; using default settings", CONFIG_FILE);
        Ok(PipelineConfig::default())
    }
}

/// Predicts every selected case of a preprocessed dataset into
/// `out/<id>.nii.gz` in original geometry. With a CNN, refined patch bounds
/// are listed in `out/patches.tsv` as half-open ranges in that same geometry.
pub fn predict(
    data: &Path,
    gnn_ckpt: &Path,
    cnn_ckpt: Option<&Path>,
    out: &Path,
    cfg: &PipelineConfig,
    split: Option<Split>,
) -> Result<Vec<CasePrediction>> {
    let ids = select(require_preprocessed(data)?, split);
    let gnn = Gnn::from_checkpoint(&Checkpoint::load(gnn_ckpt)?)?;
    let cnn = cnn_ckpt.map(|p| Checkpoint::load(p).and_then(|c| Cnn::from_checkpoint(&c))).transpose()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let preds: Vec<CasePrediction> = ids
        .par_iter()
        .map(|id| {
            let case = PreprocessedCase::load(data, id)?;
            let pred = predict_case(&case, &cfg.slic, &gnn, cnn.as_ref())?;
            export_prediction(&out.join(format!("{id}.nii.gz")), &pred.labels, &case.volume)?;
            Ok(pred)
        })
        .collect::<Result<_>>()?;
    if cnn.is_some() {
        let mut s = String::from("case_id\tx0\tx1\ty0\ty1\tz0\tz1\n");
        for p in &preds {
            match &p.patch {
                Some(b) => {
                    let o = p.origin_offset;
                    s.push_str(&format!(
                        "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                        p.id,
                        b.lo[0] + o[0],
                        b.hi[0] + o[0],
                        b.lo[1] + o[1],
                        b.hi[1] + o[1],
                        b.lo[2] + o[2],
                        b.hi[2] + o[2]
                    ))
                }
                None => s.push_str(&format!("{}\t-\t-\t-\t-\t-\t-\n", p.id)),
            }
        }
        fs::write(out.join(PATCHES_FILE), s).map_err(|e| Error::io(out.join(PATCHES_FILE), e))?;
    }
    Ok(preds)
}

/// Locates the label map of case `id` in a dataset or prediction directory.
pub fn find_label_file(dir: &Path, id: &str) -> Option<PathBuf> {
    [
        dir.join(id).join(format!("{id}_seg.nii.gz")),
        dir.join(format!("{id}_seg.nii.gz")),
        dir.join(format!("{id}.nii.gz")),
    ]
    .into_iter()
    .find(|p| p.is_file())
}

/// Case ids of a truth directory: the manifest if present, otherwise case
/// subdirectories and `*.nii.gz` label files.
pub fn list_label_cases(dir: &Path, split: Option<Split>) -> Result<Vec<String>> {
    if dir.join(crate::volume::MANIFEST_FILE).exists() {
        return Ok(select(read_manifest(dir)?, split));
    }
    if split.is_some() {
        return Err(Error::Usage(format!("--split needs a manifest in {}", dir.display())));
    }
    let mut ids = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if e.path().is_dir() {
            ids.push(name);
        } else if let Some(stem) = name.strip_suffix(".nii.gz") {
            ids.push(stem.strip_suffix("_seg").unwrap_or(stem).to_string());
        }
    }
    ids.sort();
    ids.dedup();
    Ok(ids)
}

fn load_labels(path: &Path) -> Result<(LabelVolume, [f64; 3])> {
    let img = read_nifti(path)?;
    let dims = img.header.dims();
    let spacing = img.header.spacing().map(f64::from);
    let l = LabelVolume::from_brats(dims, &img.data).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })?;
    Ok((l, spacing))
}

/// Scores predictions against ground truth; missing predictions get Dice 0
/// and the HD95 penalty.
pub fn evaluate(pred_dir: &Path, truth_dir: &Path, cfg: &MetricConfig, split: Option<Split>) -> Result<Vec<CaseReport>> {
    let ids = list_label_cases(truth_dir, split)?;
    ids.par_iter()
        .map(|id| {
            let truth_path = find_label_file(truth_dir, id)
                .ok_or_else(|| Error::Data(format!("no ground-truth label map for case {id}")))?;
            let (truth, spacing) = load_labels(&truth_path)?;
            let Some(pred_path) = find_label_file(pred_dir, id) else {
                log::warn!("no prediction for case {id}; scoring it as a failure");
                return Ok(CaseReport::missing(id, cfg));
            };
            let (pred, _) = load_labels(&pred_path)?;
            if pred.dims != truth.dims {
                return Err(Error::Shape(format!(
                    "case {id}: prediction {} vs ground truth {}",
                    pred.dims, truth.dims
                )));
            }
            evaluate_case(id, &pred, &truth, spacing, cfg)
        })
        .collect()
}

/// Writes the CSV report and returns the summary.
pub fn write_report(path: &Path, reports: &[CaseReport]) -> Result<Option<Summary>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, format_csv(reports)).map_err(|e| Error::io(path, e))?;
    Ok(summarize(reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(matches!(PipelineConfig::from_toml("[slic]\nk = 10\nbogus = 1\n"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_toml("colour = 1\n"), Err(Error::Config(_))));
        let cfg = PipelineConfig::from_toml("[slic]\nk = 10\n[gnn]\ndepth = 2\n").unwrap();
        assert_eq!((cfg.slic.k, cfg.slic.m, cfg.gnn.depth, cfg.gnn.hidden), (10, 0.5, 2, 256));
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn defaults_match_reference_settings() {
        let cfg = PipelineConfig::default();
        assert_eq!((cfg.slic.k, cfg.slic.m), (15000, 0.5));
        assert_eq!((cfg.gnn.depth, cfg.gnn.hidden, cfg.gnn.epochs, cfg.gnn.graphs_per_batch), (6, 256, 300, 6));
        assert_eq!((cfg.cnn.epochs, cfg.cnn.margin), (100, 8));
        assert_eq!(cfg.metrics.empty_penalty, 373.13);
    }

    #[test]
    fn preprocessed_case_round_trip() {
        let (v, l) = crate::phantom::generate_phantom(
            &PhantomSpec { shape: [16, 16, 16], tumor_radius: [2.0, 3.0], ..PhantomSpec::default() },
            4,
        )
        .unwrap();
        let case = PreprocessedCase { id: "p".into(), volume: v, labels: Some(l) };
        let back = PreprocessedCase::from_bytes(Path::new("x"), &case.to_bytes()).unwrap();
        assert_eq!(back, case);
    }
}
