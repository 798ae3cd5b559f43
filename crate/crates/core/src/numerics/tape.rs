//! Reverse-mode differentiation over a fixed operation vocabulary.
//!
//! A [`Tape`] records every forward operation in execution order, so the node
//! list is already topologically sorted. [`Tape::backward`] walks it once in
//! reverse and accumulates vector-Jacobian products. Every op checks its output
//! for NaN/Inf and fails with the op name instead of propagating poison.

use crate::error::{Error, Result};

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
const BCE_CLIP: f64 = 1e-7;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter registry. Frozen entries enter a tape as constants and
/// never receive gradients or optimizer updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    frozen: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.frozen.push(false);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen.iter_mut().for_each(|f| *f = frozen);
    }

    pub fn set_param_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn all_frozen(&self) -> bool {
        self.frozen.iter().all(|&f| f)
    }

    /// Ids of parameters an optimizer may touch.
    pub fn trainable(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| !self.is_frozen(id)).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Copies values and frozen flags from `source` by name. Every parameter
    /// of `self` must be present in `source` with the same shape.
    pub fn load_from(&mut self, source: &ParamStore) -> Result<()> {
        for i in 0..self.values.len() {
            let id = source
                .find(&self.names[i])
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {}", self.names[i])))?;
            let value = source.get(id);
            if value.shape() != self.values[i].shape() {
                return Err(Error::shape("load_from", self.values[i].shape(), value.shape()));
            }
            self.values[i] = value.clone();
            self.frozen[i] = source.is_frozen(id);
        }
        if source.len() != self.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, model expects {}",
                source.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

/// Gradients indexed like the [`ParamStore`] they were computed for.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.values.iter().map(|v| Tensor::zeros(v.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` scaled by `weight` into `self`.
    pub fn accumulate(&mut self, other: &Gradients, weight: f64) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += weight * y;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Concat { parts: Vec<Var>, axis: usize },
    SliceCols { src: Var, start: usize },
    Mean { src: Var, axis: usize },
    Sum(Var),
    LayerNorm { src: Var, gain: Var, bias: Var, xhat: Tensor, inv_std: Vec<f64> },
    Relu(Var),
    Sigmoid(Var),
    Softmax { src: Var, axis: usize },
    NormalizeRows { src: Var, norms: Vec<f64> },
    Bce { pred: Var, target: Tensor },
    SoftmaxCe { logits: Var, targets: Vec<usize>, probs: Tensor },
    Conv1d { x: Var, w: Var, b: Var, unfolded: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Forward recording of one computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<(ParamId, Var)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(Node { value, op: node_op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Const });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; frozen parameters become constants.
    /// Repeated requests for the same id share one leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.param_vars.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let value = store.get(id).clone();
        let op = if store.is_frozen(id) { Op::Const } else { Op::Param(id) };
        self.nodes.push(Node { value, op });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", x.shape(), y.shape()));
        }
        let out = x.zip_map(y, |p, q| p + q);
        self.push("add", out, Op::Add(a, b))
    }

    /// Adds a row vector (`[n]` or `[1, n]`) to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let n = x.cols();
        if x.rank() != 2 || y.len() != n {
            return Err(Error::shape("add_row", x.shape(), y.shape()));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(y.data()) {
                *o += bv;
            }
        }
        self.push("add_row", out, Op::AddRow(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", x.shape(), y.shape()));
        }
        let out = x.zip_map(y, |p, q| p * q);
        self.push("mul", out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.push("scale", out, Op::Scale(a, c))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(Error::shape("transpose", x.shape(), &[]));
        }
        let out = x.transpose();
        self.push("transpose", out, Op::Transpose(a))
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        self.push("concat", out, Op::Concat { parts: parts.to_vec(), axis })
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 || start >= end || end > x.cols() {
            return Err(Error::shape("slice_cols", x.shape(), &[start, end]));
        }
        let (r, c) = (x.rows(), x.cols());
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&x.data()[i * c + start..i * c + end]);
        }
        let out = Tensor::matrix(r, w, data)?;
        self.push("slice_cols", out, Op::SliceCols { src: a, start })
    }

    /// Mean along `axis`, keeping the axis with extent 1.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::shape("mean", x.shape(), &[axis]));
        }
        let (outer, len, inner) = x.axis_split(axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += x.data()[base + i];
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        let out = Tensor::new(shape, data)?;
        self.push("mean", out, Op::Mean { src: a, axis })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let x = self.value(a);
        let n = *x.shape().last().unwrap_or(&0);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::shape("layer_norm", x.shape(), self.value(gain).shape()));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = x.clone();
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.len() / n.max(1));
        for (row, orow) in xhat.data_mut().chunks_mut(n).zip(out.data_mut().chunks_mut(n)) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..n {
                row[j] = (row[j] - mu) * is;
                orow[j] = row[j] * g[j] + b[j];
            }
            inv_std.push(is);
        }
        self.push("layer_norm", out, Op::LayerNorm { src: a, gain, bias, xhat, inv_std })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 });
        self.push("relu", out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a))
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::shape("softmax", x.shape(), &[axis]));
        }
        let out = softmax_tensor(x, axis)?;
        self.push("softmax", out, Op::Softmax { src: a, axis })
    }

    /// Scales every row of a matrix to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for row in out.data_mut().chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.push("normalize_rows", out, Op::NormalizeRows { src: a, norms })
    }

    /// Mean binary cross-entropy of probabilities against 0/1 targets.
    /// Probabilities are clipped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(Error::shape("bce", p.shape(), target.shape()));
        }
        let n = p.len() as f64;
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        self.push("bce", Tensor::scalar(loss), Op::Bce { pred, target })
    }

    /// Mean softmax cross-entropy of row logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if x.rank() != 2 || x.rows() != targets.len() || targets.iter().any(|&t| t >= x.cols()) {
            return Err(Error::shape("softmax_cross_entropy", x.shape(), &[targets.len()]));
        }
        let probs = softmax_tensor(x, 1)?;
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -probs.get(i, t).max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / targets.len() as f64;
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCe { logits, targets: targets.to_vec(), probs },
        )
    }

    /// Temporal convolution with kernel width 3 and zero "same" padding.
    ///
    /// `x` is T×c, `w` is (3c)×o with rows grouped by tap (t-1, t, t+1), `b` is 1×o.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (t, c) = (xv.rows(), xv.cols());
        if xv.rank() != 2 || wv.rows() != 3 * c || self.value(b).len() != wv.cols() {
            return Err(Error::shape("conv1d", xv.shape(), wv.shape()));
        }
        let o = wv.cols();
        let mut unfolded = vec![0.0; t * 3 * c];
        for step in 0..t {
            for tap in 0..3 {
                let src = step as isize + tap as isize - 1;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                unfolded[step * 3 * c + tap * c..step * 3 * c + (tap + 1) * c]
                    .copy_from_slice(&xv.data()[src * c..(src + 1) * c]);
            }
        }
        let mut out = vec![0.0; t * o];
        matmul_into(&unfolded, wv.data(), &mut out, t, 3 * c, o);
        let bv = self.value(b).data();
        for row in out.chunks_mut(o) {
            for (v, bb) in row.iter_mut().zip(bv) {
                *v += bb;
            }
        }
        let out = Tensor::matrix(t, o, out)?;
        let unfolded = Tensor::matrix(t, 3 * c, unfolded)?;
        self.push("conv1d", out, Op::Conv1d { x, w, b, unfolded })
    }

    /// Reverse pass from a scalar node. Parameters the loss does not reach get
    /// zero gradients; frozen parameters always get zero.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));
        let mut out = Gradients::zeros_like(store);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => out.grads[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let mut da = vec![0.0; m * k];
                    matmul_nt_into(g.data(), bv.data(), &mut da, m, n, k);
                    let mut db = vec![0.0; k * n];
                    matmul_tn_into(av.data(), g.data(), &mut db, m, k, n);
                    accum(&mut grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                    accum(&mut grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *b, g);
                }
                Op::AddRow(a, b) => {
                    let bshape = self.shape(*b).to_vec();
                    let n = bshape.iter().product::<usize>();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accum(&mut grads, *b, Tensor::new(bshape, db)?);
                    accum(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |g, y| g * y);
                    let db = g.zip_map(self.value(*a), |g, x| g * x);
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
                Op::Scale(a, c) => accum(&mut grads, *a, g.map(|v| v * c)),
                Op::Transpose(a) => accum(&mut grads, *a, g.transpose()),
                Op::Concat { parts, axis } => {
                    let shape = g.shape().to_vec();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let total = shape[*axis];
                    let mut offset = 0;
                    for &p in parts {
                        let ps = self.shape(p).to_vec();
                        let width = ps[*axis] * inner;
                        let mut d = Vec::with_capacity(outer * width);
                        for o in 0..outer {
                            let start = o * total * inner + offset;
                            d.extend_from_slice(&g.data()[start..start + width]);
                        }
                        offset += width;
                        accum(&mut grads, p, Tensor::new(ps, d)?);
                    }
                }
                Op::SliceCols { src, start } => {
                    let xs = self.value(*src);
                    let (r, c) = (xs.rows(), xs.cols());
                    let w = g.cols();
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        d[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                    }
                    accum(&mut grads, *src, Tensor::new(xs.shape().to_vec(), d)?);
                }
                Op::Mean { src, axis } => {
                    let xs = self.value(*src);
                    let (outer, len, inner) = xs.axis_split(*axis);
                    let mut d = vec![0.0; xs.len()];
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                d[(o * len + l) * inner + i] = g.data()[o * inner + i] / len as f64;
                            }
                        }
                    }
                    accum(&mut grads, *src, Tensor::new(xs.shape().to_vec(), d)?);
                }
                Op::Sum(a) => {
                    let s = g.item();
                    accum(&mut grads, *a, Tensor::filled(self.shape(*a), s));
                }
                Op::LayerNorm { src, gain, bias, xhat, inv_std } => {
                    let n = *xhat.shape().last().unwrap();
                    let gv = self.value(*gain).data();
                    let mut dx = vec![0.0; xhat.len()];
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for (r, (grow, hrow)) in g.data().chunks(n).zip(xhat.data().chunks(n)).enumerate() {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..n {
                            dg[j] += grow[j] * hrow[j];
                            db[j] += grow[j];
                            let dh = grow[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hrow[j];
                        }
                        let is = inv_std[r];
                        for j in 0..n {
                            let dh = grow[j] * gv[j];
                            dx[r * n + j] =
                                is * (dh - sum_dh / n as f64 - hrow[j] * sum_dh_h / n as f64);
                        }
                    }
                    accum(&mut grads, *src, Tensor::new(xhat.shape().to_vec(), dx)?);
                    accum(&mut grads, *gain, Tensor::new(self.shape(*gain).to_vec(), dg)?);
                    accum(&mut grads, *bias, Tensor::new(self.shape(*bias).to_vec(), db)?);
                }
                Op::Relu(a) => {
                    let d = g.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    accum(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, |g, y| g * y * (1.0 - y));
                    accum(&mut grads, *a, d);
                }
                Op::Softmax { src, axis } => {
                    let y = &node.value;
                    let (outer, len, inner) = y.axis_split(*axis);
                    let mut d = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..len).map(|l| g.data()[at(l)] * y.data()[at(l)]).sum();
                            for l in 0..len {
                                d[at(l)] = y.data()[at(l)] * (g.data()[at(l)] - dot);
                            }
                        }
                    }
                    accum(&mut grads, *src, Tensor::new(y.shape().to_vec(), d)?);
                }
                Op::NormalizeRows { src, norms } => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut d = vec![0.0; y.len()];
                    for (r, (yrow, grow)) in y.data().chunks(c).zip(g.data().chunks(c)).enumerate() {
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[r * c + j] = (grow[j] - yrow[j] * dot) / norms[r];
                        }
                    }
                    accum(&mut grads, *src, Tensor::new(y.shape().to_vec(), d)?);
                }
                Op::Bce { pred, target } => {
                    let p = self.value(*pred);
                    let n = p.len() as f64;
                    let s = g.item();
                    let d = p.zip_map(target, |p, y| {
                        if p <= BCE_CLIP || p >= 1.0 - BCE_CLIP {
                            0.0
                        } else {
                            s * (p - y) / (p * (1.0 - p)) / n
                        }
                    });
                    accum(&mut grads, *pred, d);
                }
                Op::SoftmaxCe { logits, targets, probs } => {
                    let s = g.item() / targets.len() as f64;
                    let mut d = probs.clone();
                    let c = d.cols();
                    for (i, &t) in targets.iter().enumerate() {
                        d.data_mut()[i * c + t] -= 1.0;
                    }
                    d.data_mut().iter_mut().for_each(|v| *v *= s);
                    accum(&mut grads, *logits, d);
                }
                Op::Conv1d { x, w, b, unfolded } => {
                    let wv = self.value(*w);
                    let (t, c3) = (unfolded.rows(), unfolded.cols());
                    let o = wv.cols();
                    let c = c3 / 3;
                    let mut dw = vec![0.0; c3 * o];
                    matmul_tn_into(unfolded.data(), g.data(), &mut dw, t, c3, o);
                    let mut du = vec![0.0; t * c3];
                    matmul_nt_into(g.data(), wv.data(), &mut du, t, o, c3);
                    let mut dx = vec![0.0; t * c];
                    for step in 0..t {
                        for tap in 0..3 {
                            let src = step as isize + tap as isize - 1;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let src = src as usize;
                            for j in 0..c {
                                dx[src * c + j] += du[step * c3 + tap * c + j];
                            }
                        }
                    }
                    let mut db = vec![0.0; o];
                    for row in g.data().chunks(o) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accum(&mut grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?);
                    accum(&mut grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                    accum(&mut grads, *b, Tensor::new(self.shape(*b).to_vec(), db)?);
                }
            }
        }
        Ok(out)
    }
}

fn accum(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of a plain tensor along `axis`.
pub fn softmax_tensor(x: &Tensor, axis: usize) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let (outer, len, inner) = x.axis_split(axis);
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let m = (0..len).map(|l| d[at(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in 0..len {
                let e = (d[at(l)] - m).exp();
                d[at(l)] = e;
                z += e;
            }
            for l in 0..len {
                d[at(l)] /= z;
            }
        }
    }
    Ok(out)
}

/// Cross-attention: `weights = softmax(q·kᵀ/√d)`, `out = weights·v`.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(Error::shape("scaled_dot_attention", &qs, &ks));
    }
    if ks[0] == 0 {
        return Err(Error::EmptyReference);
    }
    if qs[1] != ks[1] {
        return Err(Error::shape("scaled_dot_attention", &qs, &ks));
    }
    if ks[0] != vs[0] {
        return Err(Error::shape("scaled_dot_attention", &ks, &vs));
    }
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (qs[1] as f64).sqrt())?;
    let weights = tape.softmax(logits, 1)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}
