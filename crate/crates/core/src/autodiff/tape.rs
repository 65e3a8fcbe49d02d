use crate::error::{Error, Result};

use super::conv::{self, ConvGeom};
use super::tensor::Tensor;
use super::{gemm, MatMut, MatRef, Scalar};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-node neighbour index lists in CSR form.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Neighborhoods {
    offsets: Vec<usize>,
    indices: Vec<u32>,
}

impl Neighborhoods {
    pub fn from_lists(lists: &[Vec<u32>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        offsets.push(0);
        let mut indices = Vec::new();
        for l in lists {
            indices.extend_from_slice(l);
            offsets.push(indices.len());
        }
        Neighborhoods { offsets, indices }
    }

    /// Number of target nodes.
    pub fn len(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn neighbors(&self, u: usize) -> &[u32] {
        &self.indices[self.offsets[u]..self.offsets[u + 1]]
    }
}

const NO_SOURCE: u32 = u32::MAX;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var },
    AddBias { x: Var, b: Var },
    Relu { x: Var },
    Concat { a: Var, b: Var },
    NeighborMax { x: Var, source: Vec<u32> },
    Conv3d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Softmax { x: Var },
    Log { x: Var },
    Transpose { x: Var },
    Reshape { x: Var },
    WeightedSum { x: Var, weights: Vec<T> },
    CrossEntropy { logits: Var, probs: Vec<T>, targets: Vec<u8>, item_weights: Vec<T>, norm: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records one forward pass.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Scalar>(t: &Tensor<T>, op: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{op} produced a non-finite value")))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf; gradients are reported for it.
    pub fn param(&mut self, value: &Tensor<T>) -> Var {
        self.push(value.clone(), Op::Leaf, true)
    }

    /// An input leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// `a · b` for `a: n×k`, `b: k×m`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2("matmul lhs")?;
        let (k2, m) = self.value(b).dims2("matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul {n}x{k} · {k2}x{m}")));
        }
        let mut out = vec![T::zero(); n * m];
        gemm(
            T::one(),
            MatRef::dense(self.value(a).data(), n, k),
            MatRef::dense(self.value(b).data(), k, m),
            T::zero(),
            MatMut::dense(&mut out, n, m),
        );
        let t = Tensor::new(vec![n, m], out)?;
        check_finite(&t, "matmul")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul { a, b }, rg))
    }

    /// `x · wᵀ` for `x: n×in`, `w: out×in` (weight stored output-major).
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, fin) = self.value(x).dims2("linear input")?;
        let (fout, fin2) = self.value(w).dims2("linear weight")?;
        if fin != fin2 {
            return Err(Error::Shape(format!("linear input width {fin} vs weight {fout}x{fin2}")));
        }
        let mut out = vec![T::zero(); n * fout];
        gemm(
            T::one(),
            MatRef::dense(self.value(x).data(), n, fin),
            MatRef::dense(self.value(w).data(), fout, fin).t(),
            T::zero(),
            MatMut::dense(&mut out, n, fout),
        );
        let t = Tensor::new(vec![n, fout], out)?;
        check_finite(&t, "linear")?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, Op::Linear { x, w }, rg))
    }

    /// Adds `b` (length = last axis) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.value(x);
        let f = *xs.shape().last().ok_or_else(|| Error::Shape("add_bias on a scalar".into()))?;
        if self.value(b).shape() != [f] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match last axis {f}",
                self.value(b).shape()
            )));
        }
        let bias = self.value(b).data();
        let mut t = xs.clone();
        for row in t.data_mut().chunks_exact_mut(f) {
            for (v, &bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        check_finite(&t, "add_bias")?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddBias { x, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut t = self.value(x).clone();
        for v in t.data_mut() {
            if !(*v > T::zero()) {
                *v = T::zero();
            }
        }
        let rg = self.rg(x);
        Ok(self.push(t, Op::Relu { x }, rg))
    }

    /// Concatenates two matrices with equal row counts along columns.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, p) = self.value(a).dims2("concat lhs")?;
        let (n2, q) = self.value(b).dims2("concat rhs")?;
        if n != n2 {
            return Err(Error::Shape(format!("concat row counts {n} vs {n2}")));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (p + q));
        for r in 0..n {
            out.extend_from_slice(&ad[r * p..(r + 1) * p]);
            out.extend_from_slice(&bd[r * q..(r + 1) * q]);
        }
        let t = Tensor::new(vec![n, p + q], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Concat { a, b }, rg))
    }

    /// Row `u` of the result is the element-wise max of the rows of `x`
    /// listed in `nb.neighbors(u)`; an empty list yields zeros.
    pub fn neighbor_max(&mut self, x: Var, nb: &Neighborhoods) -> Result<Var> {
        let (n_src, f) = self.value(x).dims2("neighbor_max input")?;
        if let Some(&bad) = nb.indices.iter().find(|&&i| i as usize >= n_src) {
            return Err(Error::Shape(format!("neighbour index {bad} out of range for {n_src} rows")));
        }
        let xd = self.value(x).data();
        let n = nb.len();
        let mut out = vec![T::zero(); n * f];
        let mut source = vec![NO_SOURCE; n * f];
        for u in 0..n {
            let nbrs = nb.neighbors(u);
            let Some((&first, rest)) = nbrs.split_first() else {
                continue;
            };
            let row = &mut out[u * f..(u + 1) * f];
            let src = &mut source[u * f..(u + 1) * f];
            row.copy_from_slice(&xd[first as usize * f..(first as usize + 1) * f]);
            src.fill(first);
            for &v in rest {
                let xv = &xd[v as usize * f..(v as usize + 1) * f];
                for j in 0..f {
                    if xv[j] > row[j] {
                        row[j] = xv[j];
                        src[j] = v;
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, f], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::NeighborMax { x, source }, rg))
    }

    /// Stride-1 cross-correlation of `x: C_in×D×H×W` with
    /// `w: C_out×C_in×k×k×k`, zero padding `pad` on every side.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (&[cin, d, h, wd], &[cout, cin2, k, k2, k3]) = (&xs[..], &ws[..]) else {
            return Err(Error::Shape(format!("conv3d input {xs:?} / weight {ws:?}")));
        };
        if cin != cin2 || k != k2 || k != k3 || k == 0 || pad >= k {
            return Err(Error::Shape(format!("conv3d input {xs:?} incompatible with weight {ws:?}")));
        }
        if [d, h, wd].iter().any(|&n| n + 2 * pad < k) {
            return Err(Error::Shape(format!("conv3d input {xs:?} smaller than kernel {k}")));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::Shape(format!("conv3d bias {:?}, expected [{cout}]", self.value(b).shape())));
            }
        }
        let geom = ConvGeom { cin, cout, k, pad, input: [d, h, wd] };
        let out = conv::forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let [od, oh, ow] = geom.output();
        let t = Tensor::new(vec![cout, od, oh, ow], out)?;
        check_finite(&t, "conv3d")?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Conv3d { x, w, b, geom }, rg))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2("softmax")?;
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_exact_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        check_finite(&t, "softmax")?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x }, rg))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let mut t = self.value(x).clone();
        for v in t.data_mut() {
            *v = v.ln();
        }
        check_finite(&t, "log")?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Log { x }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("transpose")?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Transpose { x }, rg))
    }

    /// Same values under a new shape with an equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// `Σ x ⊙ weights` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::Shape(format!(
                "weighted_sum: {} weights for {} values",
                weights.len(),
                self.value(x).len()
            )));
        }
        let s = self.value(x).data().iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    /// Mean of `w[t_i] · (−log softmax(logits_i)[t_i])` normalised by
    /// `Σ w[t_i]`; unit weights when `class_weights` is `None`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u8], class_weights: Option<&[T]>) -> Result<Var> {
        let (n, c) = self.value(logits).dims2("cross_entropy logits")?;
        if targets.len() != n {
            return Err(Error::Shape(format!("{} targets for {n} rows", targets.len())));
        }
        if n == 0 {
            return Err(Error::Shape("cross_entropy over zero rows".into()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c) {
            return Err(Error::Shape(format!("target {bad} out of range for {c} classes")));
        }
        if let Some(w) = class_weights {
            if w.len() != c {
                return Err(Error::Shape(format!("{} class weights for {c} classes", w.len())));
            }
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut item_weights = Vec::with_capacity(n);
        let mut total = T::zero();
        let mut norm = T::zero();
        for i in 0..n {
            let row = &ld[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (p, &z) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (z - m).exp();
                s += *p;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p = *p / s;
            }
            let t = targets[i] as usize;
            let w = class_weights.map_or(T::one(), |w| w[t]);
            let nll = m + s.ln() - row[t];
            total += w * nll;
            norm += w;
            item_weights.push(w);
        }
        if !(norm > T::zero()) {
            return Err(Error::Numeric("cross_entropy weights sum to zero".into()));
        }
        let t = Tensor::scalar(total / norm);
        check_finite(&t, "cross_entropy")?;
        let rg = self.rg(logits);
        Ok(self.push(
            t,
            Op::CrossEntropy { logits, probs, targets: targets.to_vec(), item_weights, norm },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![T::one()])?);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut acc = |v: Var, t: Tensor<T>| {
                if !self.rg(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul { a, b } => {
                    let (n, k) = self.value(*a).dims2("")?;
                    let m = self.value(*b).shape()[1];
                    if self.rg(*a) {
                        let mut ga = vec![T::zero(); n * k];
                        gemm(
                            T::one(),
                            MatRef::dense(g.data(), n, m),
                            MatRef::dense(self.value(*b).data(), k, m).t(),
                            T::zero(),
                            MatMut::dense(&mut ga, n, k),
                        );
                        acc(*a, Tensor::new(vec![n, k], ga)?);
                    }
                    if self.rg(*b) {
                        let mut gb = vec![T::zero(); k * m];
                        gemm(
                            T::one(),
                            MatRef::dense(self.value(*a).data(), n, k).t(),
                            MatRef::dense(g.data(), n, m),
                            T::zero(),
                            MatMut::dense(&mut gb, k, m),
                        );
                        acc(*b, Tensor::new(vec![k, m], gb)?);
                    }
                }
                Op::Linear { x, w } => {
                    let (n, fin) = self.value(*x).dims2("")?;
                    let fout = self.value(*w).shape()[0];
                    if self.rg(*x) {
                        let mut gx = vec![T::zero(); n * fin];
                        gemm(
                            T::one(),
                            MatRef::dense(g.data(), n, fout),
                            MatRef::dense(self.value(*w).data(), fout, fin),
                            T::zero(),
                            MatMut::dense(&mut gx, n, fin),
                        );
                        acc(*x, Tensor::new(vec![n, fin], gx)?);
                    }
                    if self.rg(*w) {
                        let mut gw = vec![T::zero(); fout * fin];
                        gemm(
                            T::one(),
                            MatRef::dense(g.data(), n, fout).t(),
                            MatRef::dense(self.value(*x).data(), n, fin),
                            T::zero(),
                            MatMut::dense(&mut gw, fout, fin),
                        );
                        acc(*w, Tensor::new(vec![fout, fin], gw)?);
                    }
                }
                Op::AddBias { x, b } => {
                    let f = self.value(*b).len();
                    if self.rg(*b) {
                        let mut gb = vec![T::zero(); f];
                        for row in g.data().chunks_exact(f) {
                            for (s, &v) in gb.iter_mut().zip(row) {
                                *s += v;
                            }
                        }
                        acc(*b, Tensor::new(vec![f], gb)?);
                    }
                    acc(*x, g);
                }
                Op::Relu { x } => {
                    let mut gx = g;
                    for (gv, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        if !(y > T::zero()) {
                            *gv = T::zero();
                        }
                    }
                    acc(*x, gx);
                }
                Op::Concat { a, b } => {
                    let (n, p) = self.value(*a).dims2("")?;
                    let q = self.value(*b).shape()[1];
                    let gd = g.data();
                    let mut ga = Vec::with_capacity(n * p);
                    let mut gb = Vec::with_capacity(n * q);
                    for r in 0..n {
                        ga.extend_from_slice(&gd[r * (p + q)..r * (p + q) + p]);
                        gb.extend_from_slice(&gd[r * (p + q) + p..(r + 1) * (p + q)]);
                    }
                    acc(*a, Tensor::new(vec![n, p], ga)?);
                    acc(*b, Tensor::new(vec![n, q], gb)?);
                }
                Op::NeighborMax { x, source } => {
                    let (n_src, f) = self.value(*x).dims2("")?;
                    let mut gx = vec![T::zero(); n_src * f];
                    for (i, (&s, &gv)) in source.iter().zip(g.data()).enumerate() {
                        if s != NO_SOURCE {
                            gx[s as usize * f + i % f] += gv;
                        }
                    }
                    acc(*x, Tensor::new(vec![n_src, f], gx)?);
                }
                Op::Conv3d { x, w, b, geom } => {
                    let grads_c = conv::backward(
                        self.value(*x).data(),
                        self.value(*w).data(),
                        g.data(),
                        geom,
                        self.rg(*x),
                    );
                    if let Some(gx) = grads_c.input {
                        acc(*x, Tensor::new(self.value(*x).shape().to_vec(), gx)?);
                    }
                    acc(*w, Tensor::new(self.value(*w).shape().to_vec(), grads_c.weight)?);
                    if let Some(b) = b {
                        acc(*b, Tensor::new(vec![geom.cout], grads_c.bias)?);
                    }
                }
                Op::Softmax { x } => {
                    let c = node.value.shape()[1];
                    let mut gx = g.clone();
                    for (grow, yrow) in gx.data_mut().chunks_exact_mut(c).zip(node.value.data().chunks_exact(c)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for (gv, &y) in grow.iter_mut().zip(yrow) {
                            *gv = y * (*gv - dot);
                        }
                    }
                    acc(*x, gx);
                }
                Op::Log { x } => {
                    let mut gx = g;
                    for (gv, &xv) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        *gv = *gv / xv;
                    }
                    acc(*x, gx);
                }
                Op::Transpose { x } => {
                    let (r, c) = self.value(*x).dims2("")?;
                    let gd = g.data();
                    let mut gx = vec![T::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = gd[j * r + i];
                        }
                    }
                    acc(*x, Tensor::new(vec![r, c], gx)?);
                }
                Op::Reshape { x } => {
                    acc(*x, Tensor::new(self.value(*x).shape().to_vec(), g.into_data())?);
                }
                Op::WeightedSum { x, weights } => {
                    let s = g.item();
                    let gx = weights.iter().map(|&w| w * s).collect();
                    acc(*x, Tensor::new(self.value(*x).shape().to_vec(), gx)?);
                }
                Op::CrossEntropy { logits, probs, targets, item_weights, norm } => {
                    let c = self.value(*logits).shape()[1];
                    let s = g.item() / *norm;
                    let mut gl = probs.clone();
                    for (i, (&t, &w)) in targets.iter().zip(item_weights).enumerate() {
                        let row = &mut gl[i * c..(i + 1) * c];
                        row[t as usize] = row[t as usize] - T::one();
                        for v in row.iter_mut() {
                            *v = *v * w * s;
                        }
                    }
                    acc(*logits, Tensor::new(vec![probs.len() / c, c], gl)?);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of a loss with respect to every node that required one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
