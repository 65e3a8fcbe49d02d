//! GraphSAGE network with max-pool aggregation over supervoxel graphs.
//!
//! Layer `l` computes, for every node `u`,
//! `h'_u = σ(W · (h_u ‖ max_{v ∈ N(u) ∪ {u}} σ(W_pool · h_v + b_pool)) + b)`
//! with σ = ReLU on every layer but the last, which emits raw logits.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    lr_at_epoch, xavier_uniform, AdamW, AdamWConfig, Checkpoint, Neighborhoods, Parameter, Scalar, Tape, Tensor,
    Var,
};
use crate::error::{Error, Result};
use crate::graph::{compute_class_weights, BrainGraph, N_FEATURES};
use crate::grid::argmax_high;
use crate::volume::N_CLASSES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GnnConfig {
    pub depth: usize,
    pub hidden: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub graphs_per_batch: usize,
    /// Uniform cap on sampled neighbours per node during training; `None`
    /// uses full neighbourhoods.
    pub max_neighbors: Option<usize>,
    pub seed: u64,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig {
            depth: 6,
            hidden: 256,
            lr0: 5e-4,
            lr_decay: 0.98,
            weight_decay: 1e-4,
            epochs: 300,
            graphs_per_batch: 6,
            max_neighbors: None,
            seed: 0,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("gnn.depth must be at least 1".into()));
        }
        if self.hidden == 0 || self.graphs_per_batch == 0 {
            return Err(Error::Config("gnn.hidden and gnn.graphs_per_batch must be positive".into()));
        }
        if !(self.lr0 > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("gnn learning-rate settings out of range".into()));
        }
        Ok(())
    }

    /// `(in, out)` width of each layer.
    pub fn layer_widths(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|l| {
                let fin = if l == 0 { N_FEATURES } else { self.hidden };
                let fout = if l + 1 == self.depth { N_CLASSES } else { self.hidden };
                (fin, fout)
            })
            .collect()
    }
}

/// One GraphSAGE-pool layer as four consecutive entries of [`Gnn::params`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphSagePoolLayer {
    pub fan_in: usize,
    pub fan_out: usize,
}

impl GraphSagePoolLayer {
    pub const PARAMS: usize = 4;

    fn names(l: usize) -> [String; 4] {
        [format!("layer{l}.w"), format!("layer{l}.b"), format!("layer{l}.w_pool"), format!("layer{l}.b_pool")]
    }

    /// Records the layer on `tape`; `vars` are its `[w, b, w_pool, b_pool]`.
    pub fn forward<T: Scalar>(
        tape: &mut Tape<T>,
        vars: &[Var],
        h: Var,
        nb: &Neighborhoods,
        activate: bool,
    ) -> Result<Var> {
        let [w, b, w_pool, b_pool] = vars else {
            return Err(Error::Shape(format!("layer needs 4 parameters, got {}", vars.len())));
        };
        let p = tape.linear(h, *w_pool)?;
        let p = tape.add_bias(p, *b_pool)?;
        let p = tape.relu(p)?;
        let agg = tape.neighbor_max(p, nb)?;
        let cat = tape.concat(h, agg)?;
        let out = tape.linear(cat, *w)?;
        let out = tape.add_bias(out, *b)?;
        if activate {
            tape.relu(out)
        } else {
            Ok(out)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gnn<T: Scalar = f32> {
    pub config: GnnConfig,
    /// Per layer: `w (out × 2in)`, `b (out)`, `w_pool (in × in)`, `b_pool (in)`.
    pub params: Vec<Parameter<T>>,
}

impl<T: Scalar> Gnn<T> {
    /// Xavier-uniform weights, zero biases, drawn from `config.seed`.
    pub fn init(config: &GnnConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        for (l, (fin, fout)) in config.layer_widths().into_iter().enumerate() {
            let [nw, nb, nwp, nbp] = GraphSagePoolLayer::names(l);
            params.push(Parameter::new(nw, xavier_uniform(&[fout, 2 * fin], 2 * fin, fout, &mut rng)));
            params.push(Parameter::new(nb, Tensor::zeros(&[fout])));
            params.push(Parameter::new(nwp, xavier_uniform(&[fin, fin], fin, fin, &mut rng)));
            params.push(Parameter::new(nbp, Tensor::zeros(&[fin])));
        }
        Ok(Gnn { config: config.clone(), params })
    }

    /// All parameters zero.
    pub fn zeros(config: &GnnConfig) -> Result<Self> {
        let mut g = Self::init(config)?;
        for p in &mut g.params {
            p.value = Tensor::zeros(p.value.shape());
        }
        Ok(g)
    }

    pub fn layers(&self) -> Vec<GraphSagePoolLayer> {
        self.config
            .layer_widths()
            .into_iter()
            .map(|(fan_in, fan_out)| GraphSagePoolLayer { fan_in, fan_out })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Gnn<U> {
        Gnn { config: self.config.clone(), params: self.params.iter().map(Parameter::cast).collect() }
    }

    /// Records the full network on `tape`, returning the `S × 4` logits.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, param_vars: &[Var], x: Var, nb: &Neighborhoods) -> Result<Var> {
        let (_, width) = match tape.value(x).shape() {
            &[s, w] => (s, w),
            s => return Err(Error::Shape(format!("node features must be a matrix, got {s:?}"))),
        };
        if width != N_FEATURES {
            return Err(Error::Shape(format!("expected {N_FEATURES} node features, got {width}")));
        }
        let depth = self.config.depth;
        let mut h = x;
        for (l, vars) in param_vars.chunks(GraphSagePoolLayer::PARAMS).enumerate() {
            h = GraphSagePoolLayer::forward(tape, vars, h, nb, l + 1 < depth)?;
        }
        Ok(h)
    }

    /// Node features as a tensor in this model's precision.
    pub fn features(g: &BrainGraph) -> Result<Tensor<T>> {
        if g.node_features.len() != g.n_nodes * N_FEATURES {
            return Err(Error::Shape(format!(
                "graph has {} feature values for {} nodes of width {N_FEATURES}",
                g.node_features.len(),
                g.n_nodes
            )));
        }
        Tensor::new(
            vec![g.n_nodes, N_FEATURES],
            g.node_features.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )
    }

    /// `S × 4` logits for every node of `g` (self-loops injected).
    pub fn forward(&self, g: &BrainGraph) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.param(&p.value)).collect();
        let x = tape.constant(Self::features(g)?);
        let out = self.forward_on_tape(&mut tape, &vars, x, &g.neighborhoods(true))?;
        Ok(tape.value(out).clone())
    }

    /// Predicted class per node, ties toward the higher class.
    pub fn predict(&self, g: &BrainGraph) -> Result<Vec<u8>> {
        let logits = self.forward(g)?;
        Ok(logits.data().chunks_exact(N_CLASSES).map(|r| argmax_high(r) as u8).collect())
    }
}

impl Gnn<f32> {
    pub fn to_checkpoint(&self, epoch: u32) -> Checkpoint {
        Checkpoint {
            epoch,
            meta: toml::to_string(&self.config).expect("config serializes"),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: GnnConfig =
            toml::from_str(&ck.meta).map_err(|e| Error::Config(format!("GNN checkpoint config: {e}")))?;
        let template = Self::zeros(&config)?;
        if template.params.len() != ck.params.len() {
            return Err(Error::Shape(format!(
                "GNN checkpoint has {} parameters, configuration needs {}",
                ck.params.len(),
                template.params.len()
            )));
        }
        for (t, p) in template.params.iter().zip(&ck.params) {
            if t.name != p.name || t.value.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "GNN checkpoint parameter {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.value.shape(),
                    t.name,
                    t.value.shape()
                )));
            }
        }
        Ok(Gnn { config, params: ck.params.clone() })
    }
}

/// One line of the training metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} lr={:.6e} loss={:.6}", self.epoch, self.lr, self.mean_loss)
    }
}

fn sample_neighborhoods(g: &BrainGraph, cap: usize, rng: &mut ChaCha8Rng) -> Neighborhoods {
    let full = g.neighborhoods(false);
    let lists: Vec<Vec<u32>> = (0..g.n_nodes)
        .map(|u| {
            let mut l = vec![u as u32];
            let nbrs = full.neighbors(u);
            if nbrs.len() <= cap {
                l.extend_from_slice(nbrs);
            } else {
                l.extend(nbrs.choose_multiple(rng, cap).copied());
            }
            l
        })
        .collect();
    Neighborhoods::from_lists(&lists)
}

/// Trains a fresh network on labelled graphs. Class weights are computed over
/// the whole training set; each epoch visits the graphs in a seeded random
/// order, `graphs_per_batch` at a time as one disjoint union.
pub fn train_gnn(
    graphs: &[BrainGraph],
    config: &GnnConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Gnn<f32>, Vec<f64>)> {
    let _fp = crate::autodiff::FlushDenormals::new();
    if graphs.is_empty() {
        return Err(Error::Usage("GNN training set is empty".into()));
    }
    if let Some(i) = graphs.iter().position(|g| g.node_labels.is_none()) {
        return Err(Error::Usage(format!("training graph {i} has no node labels")));
    }
    let weights = compute_class_weights(graphs)?;
    let mut model = Gnn::<f32>::init(config)?;
    let opt = AdamW::new(AdamWConfig { weight_decay: config.weight_decay, ..AdamWConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(crate::grid::mix_seed(config.seed, 1));
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = lr_at_epoch(config.lr0, config.lr_decay, epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.graphs_per_batch) {
            let members: Vec<&BrainGraph> = chunk.iter().map(|&i| &graphs[i]).collect();
            let batch = BrainGraph::disjoint_union(&members);
            let nb = match config.max_neighbors {
                Some(cap) => sample_neighborhoods(&batch, cap, &mut rng),
                None => batch.neighborhoods(true),
            };
            let mut tape = Tape::<f32>::new();
            let vars: Vec<Var> = model.params.iter().map(|p| tape.param(&p.value)).collect();
            let x = tape.constant(Gnn::<f32>::features(&batch)?);
            let logits = model.forward_on_tape(&mut tape, &vars, x, &nb)?;
            let labels = batch.node_labels.as_deref().expect("checked above");
            let loss = tape.cross_entropy(logits, labels, Some(&weights))?;
            total += tape.value(loss).item() as f64;
            batches += 1;
            let mut grads = tape.backward(loss)?;
            for (p, v) in model.params.iter_mut().zip(&vars) {
                let g = grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                opt.step(p, &g, lr)?;
            }
        }
        let mean_loss = total / batches as f64;
        trace.push(mean_loss);
        on_epoch(&EpochRecord { epoch, lr, mean_loss });
    }
    Ok((model, trace))
}

/// Fraction of nodes whose predicted class equals the label.
pub fn node_accuracy(pred: &[u8], labels: &[u8]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}
