//! Voxel-level refinement: node logits painted back onto voxels, a crop around
//! the predicted tumour, and a two-layer 3D CNN over that crop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    lr_at_epoch, xavier_uniform, AdamW, AdamWConfig, Checkpoint, Parameter, Scalar, Tape, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::gnn::EpochRecord;
use crate::grid::{argmax_high, mix_seed, Dims};
use crate::supervoxel::SupervoxelPartition;
use crate::volume::{LabelVolume, MultiModalVolume, N_CHANNELS, N_CLASSES};

/// Logit vector painted on voxels outside the brain mask.
pub const BACKGROUND_LOGITS: [f32; N_CLASSES] = [10.0, 0.0, 0.0, 0.0];

pub const KERNEL: usize = 5;
pub const PADDING: usize = 2;
pub const CNN_IN: usize = N_CLASSES + N_CHANNELS;
pub const CNN_HIDDEN: usize = 16;

/// Per-voxel class logits, channel-major `4 × N` in grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitVolume {
    pub dims: Dims,
    pub data: Vec<f32>,
}

impl LogitVolume {
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.dims.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn logits_at(&self, idx: usize) -> [f32; N_CLASSES] {
        let n = self.dims.len();
        std::array::from_fn(|c| self.data[c * n + idx])
    }

    /// Voxel-wise argmax, ties toward the higher class.
    pub fn argmax(&self) -> LabelVolume {
        let labels = (0..self.dims.len()).map(|i| argmax_high(&self.logits_at(i)) as u8).collect();
        LabelVolume { dims: self.dims, labels }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = b"LGV1".to_vec();
        for d in self.dims.0 {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> std::result::Result<Self, String> {
        if b.len() < 16 || &b[..4] != b"LGV1" {
            return Err("not a logit volume".into());
        }
        let d = |i: usize| u32::from_le_bytes(b[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let dims = Dims([d(0), d(1), d(2)]);
        let body = &b[16..];
        if body.len() != dims.len() * N_CLASSES * 4 {
            return Err("logit volume size does not match its dimensions".into());
        }
        let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(LogitVolume { dims, data })
    }
}

/// Paints row `i` of `logits` (`S × 4`, node `i` = supervoxel `i`) onto
/// every voxel of supervoxel `i`; unassigned voxels get [`BACKGROUND_LOGITS`].
pub fn reproject_logits(logits: &[f32], p: &SupervoxelPartition) -> Result<LogitVolume> {
    if logits.len() != p.len() * N_CLASSES {
        return Err(Error::Consistency(format!(
            "{} logit values for {} supervoxels",
            logits.len(),
            p.len()
        )));
    }
    let n = p.dims.len();
    let mut data = vec![0.0; N_CLASSES * n];
    for (i, &a) in p.assignment.iter().enumerate() {
        let row: &[f32] = if a < 0 {
            &BACKGROUND_LOGITS
        } else {
            &logits[a as usize * N_CLASSES..(a as usize + 1) * N_CLASSES]
        };
        for c in 0..N_CLASSES {
            data[c * n + i] = row[c];
        }
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logit in reprojection".into()));
    }
    Ok(LogitVolume { dims: p.dims, data })
}

/// Half-open voxel box `lo..hi` per axis, `[x, y, z]` order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchBounds {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl PatchBounds {
    pub fn shape(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.hi[a] - self.lo[a])
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, c: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= c[a] && c[a] < self.hi[a])
    }

    /// Patch spatial shape as `[d, h, w] = [z, y, x]` extents.
    pub fn conv_shape(&self) -> [usize; 3] {
        let [x, y, z] = self.shape();
        [z, y, x]
    }

    /// Calls `f(patch_index, volume_index)` in patch raster order.
    pub fn for_each(&self, dims: Dims, mut f: impl FnMut(usize, usize)) {
        let mut k = 0;
        for z in self.lo[2]..self.hi[2] {
            for y in self.lo[1]..self.hi[1] {
                for x in self.lo[0]..self.hi[0] {
                    f(k, dims.index(x, y, z));
                    k += 1;
                }
            }
        }
    }
}

/// Bounding box of voxels whose argmax is a tumour class, grown by `margin`
/// and clipped to the volume; `None` when no tumour is predicted.
pub fn tumor_patch(lv: &LogitVolume, margin: usize) -> Option<PatchBounds> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for i in 0..lv.dims.len() {
        if argmax_high(&lv.logits_at(i)) == 0 {
            continue;
        }
        any = true;
        let c = lv.dims.coords(i);
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    any.then(|| PatchBounds {
        lo: lo.map(|v| v.saturating_sub(margin)),
        hi: std::array::from_fn(|a| (hi[a] + margin + 1).min(lv.dims.0[a])),
    })
}

/// CNN input for a patch: 4 logit channels then 4 image channels,
/// `8 × D × H × W`.
pub fn patch_input(lv: &LogitVolume, image: &MultiModalVolume, b: &PatchBounds) -> Result<Tensor<f32>> {
    if lv.dims != image.dims {
        return Err(Error::Shape(format!("logit volume {} vs image {}", lv.dims, image.dims)));
    }
    let p = b.len();
    let mut data = vec![0.0; CNN_IN * p];
    b.for_each(lv.dims, |k, i| {
        for c in 0..N_CLASSES {
            data[c * p + k] = lv.channel(c)[i];
        }
        for c in 0..N_CHANNELS {
            data[(N_CLASSES + c) * p + k] = image.channel(c)[i];
        }
    });
    let [d, h, w] = b.conv_shape();
    Tensor::new(vec![CNN_IN, d, h, w], data)
}

pub fn patch_labels(l: &LabelVolume, b: &PatchBounds) -> Vec<u8> {
    let mut out = vec![0; b.len()];
    b.for_each(l.dims, |k, i| out[k] = l.labels[i]);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnConfig {
    pub lr0: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Voxels added around the predicted tumour box on every side.
    pub margin: usize,
    pub seed: u64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig { lr0: 5e-4, lr_decay: 0.98, weight_decay: 1e-4, epochs: 100, margin: 8, seed: 0 }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("cnn learning-rate settings out of range".into()));
        }
        Ok(())
    }
}

/// `conv(8→16, 5³) → ReLU → conv(16→4, 5³)`, both padded to keep the shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Cnn<T: Scalar = f32> {
    pub config: CnnConfig,
    /// `conv1.w`, `conv1.b`, `conv2.w`, `conv2.b`.
    pub params: Vec<Parameter<T>>,
}

impl<T: Scalar> Cnn<T> {
    pub fn init(config: &CnnConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let k3 = KERNEL * KERNEL * KERNEL;
        let k = KERNEL;
        let params = vec![
            Parameter::new(
                "conv1.w",
                xavier_uniform(&[CNN_HIDDEN, CNN_IN, k, k, k], CNN_IN * k3, CNN_HIDDEN * k3, &mut rng),
            ),
            Parameter::new("conv1.b", Tensor::zeros(&[CNN_HIDDEN])),
            Parameter::new(
                "conv2.w",
                xavier_uniform(&[N_CLASSES, CNN_HIDDEN, k, k, k], CNN_HIDDEN * k3, N_CLASSES * k3, &mut rng),
            ),
            Parameter::new("conv2.b", Tensor::zeros(&[N_CLASSES])),
        ];
        Ok(Cnn { config: config.clone(), params })
    }

    pub fn zeros(config: &CnnConfig) -> Result<Self> {
        let mut m = Self::init(config)?;
        for p in &mut m.params {
            p.value = Tensor::zeros(p.value.shape());
        }
        Ok(m)
    }

    pub fn cast<U: Scalar>(&self) -> Cnn<U> {
        Cnn { config: self.config.clone(), params: self.params.iter().map(Parameter::cast).collect() }
    }

    /// Records the network on `tape`; `x` is `8 × D × H × W`, the result
    /// `4 × D × H × W`.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let [w1, b1, w2, b2] = vars else {
            return Err(Error::Shape(format!("CNN needs 4 parameters, got {}", vars.len())));
        };
        let h = tape.conv3d(x, *w1, Some(*b1), PADDING)?;
        let h = tape.relu(h)?;
        tape.conv3d(h, *w2, Some(*b2), PADDING)
    }

    /// `4 × P` logits for `logits_in` and `image_in`, each `4 × D × H × W`.
    pub fn forward(&self, logits_in: &Tensor<T>, image_in: &Tensor<T>) -> Result<Tensor<T>> {
        if logits_in.shape() != image_in.shape() || logits_in.shape().len() != 4 || logits_in.shape()[0] != N_CLASSES {
            return Err(Error::Shape(format!(
                "CNN inputs {:?} and {:?} must both be 4 × D × H × W",
                logits_in.shape(),
                image_in.shape()
            )));
        }
        let mut shape = logits_in.shape().to_vec();
        shape[0] = CNN_IN;
        let mut data = logits_in.data().to_vec();
        data.extend_from_slice(image_in.data());
        self.forward_stacked(&Tensor::new(shape, data)?)
    }

    /// As [`Cnn::forward`] with the two inputs already stacked channel-wise.
    pub fn forward_stacked(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.param(&p.value)).collect();
        let x = tape.constant(x.clone());
        let out = self.forward_on_tape(&mut tape, &vars, x)?;
        Ok(tape.value(out).clone())
    }
}

impl Cnn<f32> {
    pub fn to_checkpoint(&self, epoch: u32) -> Checkpoint {
        Checkpoint {
            epoch,
            meta: toml::to_string(&self.config).expect("config serializes"),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: CnnConfig =
            toml::from_str(&ck.meta).map_err(|e| Error::Config(format!("CNN checkpoint config: {e}")))?;
        let template = Self::zeros(&config)?;
        let ok = template.params.len() == ck.params.len()
            && template
                .params
                .iter()
                .zip(&ck.params)
                .all(|(t, p)| t.name == p.name && t.value.shape() == p.value.shape());
        if !ok {
            return Err(Error::Shape("CNN checkpoint parameters do not match the network layout".into()));
        }
        Ok(Cnn { config, params: ck.params.clone() })
    }
}

/// Flattens `4 × D × H × W` logits on a tape into `P × 4` rows.
fn voxel_rows<T: Scalar>(tape: &mut Tape<T>, logits: Var) -> Result<Var> {
    let p = tape.value(logits).len() / N_CLASSES;
    let flat = tape.reshape(logits, &[N_CLASSES, p])?;
    tape.transpose(flat)
}

/// Unweighted voxel-wise cross-entropy of the CNN over one patch.
pub fn cnn_loss_on_tape<T: Scalar>(
    model: &Cnn<T>,
    tape: &mut Tape<T>,
    vars: &[Var],
    input: &Tensor<T>,
    targets: &[u8],
) -> Result<Var> {
    let x = tape.constant(input.clone());
    let out = model.forward_on_tape(tape, vars, x)?;
    let rows = voxel_rows(tape, out)?;
    tape.cross_entropy(rows, targets, None)
}

/// One training example: stacked input and the cropped ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnSample {
    pub input: Tensor<f32>,
    pub targets: Vec<u8>,
}

impl CnnSample {
    /// `None` when the logit volume predicts no tumour.
    pub fn from_case(
        lv: &LogitVolume,
        image: &MultiModalVolume,
        labels: &LabelVolume,
        margin: usize,
    ) -> Result<Option<Self>> {
        let Some(b) = tumor_patch(lv, margin) else {
            return Ok(None);
        };
        Ok(Some(CnnSample { input: patch_input(lv, image, &b)?, targets: patch_labels(labels, &b) }))
    }
}

/// Trains a fresh CNN, one sample per step in a seeded random order per
/// epoch. Returns `None` for the model when there are no samples.
pub fn train_cnn(
    samples: &[CnnSample],
    config: &CnnConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Option<Cnn<f32>>, Vec<f64>)> {
    let _fp = crate::autodiff::FlushDenormals::new();
    config.validate()?;
    if samples.is_empty() {
        log::warn!("no case has a predicted tumour; the CNN stays untrained");
        return Ok((None, Vec::new()));
    }
    let mut model = Cnn::<f32>::init(config)?;
    let opt = AdamW::new(AdamWConfig { weight_decay: config.weight_decay, ..AdamWConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 1));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = lr_at_epoch(config.lr0, config.lr_decay, epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let s = &samples[i];
            let mut tape = Tape::<f32>::new();
            let vars: Vec<Var> = model.params.iter().map(|p| tape.param(&p.value)).collect();
            let loss = cnn_loss_on_tape(&model, &mut tape, &vars, &s.input, &s.targets)?;
            total += tape.value(loss).item() as f64;
            let mut grads = tape.backward(loss)?;
            for (p, v) in model.params.iter_mut().zip(&vars) {
                let g = grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                opt.step(p, &g, lr)?;
            }
        }
        let mean_loss = total / samples.len() as f64;
        trace.push(mean_loss);
        on_epoch(&EpochRecord { epoch, lr, mean_loss });
    }
    Ok((Some(model), trace))
}

/// Inside `bounds`, the CNN argmax (out-of-brain voxels forced to 0); outside,
/// the GNN prediction unchanged.
pub fn merge_predictions(
    gnn_pred: &LabelVolume,
    cnn_logits: Option<&Tensor<f32>>,
    bounds: Option<&PatchBounds>,
    brain_mask: &[bool],
) -> Result<LabelVolume> {
    let mut out = gnn_pred.clone();
    let (Some(logits), Some(b)) = (cnn_logits, bounds) else {
        return Ok(out);
    };
    let p = b.len();
    if logits.len() != N_CLASSES * p {
        return Err(Error::Shape(format!("{} CNN logits for a patch of {p} voxels", logits.len())));
    }
    if (0..3).any(|a| b.hi[a] > gnn_pred.dims.0[a] || b.lo[a] > b.hi[a]) {
        return Err(Error::Shape(format!("patch {b:?} exceeds volume {}", gnn_pred.dims)));
    }
    if brain_mask.len() != gnn_pred.dims.len() {
        return Err(Error::Shape("brain mask does not match the prediction grid".into()));
    }
    let d = logits.data();
    b.for_each(gnn_pred.dims, |k, i| {
        out.labels[i] = if brain_mask[i] {
            let row: [f32; N_CLASSES] = std::array::from_fn(|c| d[c * p + k]);
            argmax_high(&row) as u8
        } else {
            0
        };
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logit_volume_with_tumor(dims: Dims, tumor: impl Fn([usize; 3]) -> bool) -> LogitVolume {
        let n = dims.len();
        let mut data = vec![0.0; 4 * n];
        for i in 0..n {
            let c = if tumor(dims.coords(i)) { 2 } else { 0 };
            data[c * n + i] = 1.0;
        }
        LogitVolume { dims, data }
    }

    #[test]
    fn patch_box_arithmetic() {
        let lv = logit_volume_with_tumor(Dims::new(64, 64, 64), |c| c.iter().all(|&v| (8..=15).contains(&v)));
        let b = tumor_patch(&lv, 8).unwrap();
        assert_eq!(b, PatchBounds { lo: [0; 3], hi: [24; 3] });
        let none = logit_volume_with_tumor(Dims::new(8, 8, 8), |_| false);
        assert_eq!(tumor_patch(&none, 8), None);
    }

    #[test]
    fn zero_cnn_gives_zero_output() {
        let m = Cnn::<f32>::zeros(&CnnConfig::default()).unwrap();
        let z = Tensor::zeros(&[4, 3, 4, 5]);
        let out = m.forward(&z, &z).unwrap();
        assert_eq!(out.shape(), &[4, 3, 4, 5]);
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(matches!(m.forward(&z, &Tensor::zeros(&[4, 3, 4, 4])), Err(Error::Shape(_))));
    }

    #[test]
    fn merge_without_patch_is_identity() {
        let g = LabelVolume { dims: Dims::new(2, 2, 2), labels: vec![0, 1, 2, 3, 0, 1, 2, 3] };
        assert_eq!(merge_predictions(&g, None, None, &[true; 8]).unwrap(), g);
    }

    #[test]
    fn logit_volume_bytes_round_trip() {
        let lv = logit_volume_with_tumor(Dims::new(3, 2, 2), |c| c[0] == 1);
        assert_eq!(LogitVolume::from_bytes(&lv.to_bytes()).unwrap(), lv);
    }
}
