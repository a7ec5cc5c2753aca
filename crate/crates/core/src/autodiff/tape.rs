//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. `backward` walks
//! the list in reverse and accumulates vector-Jacobian products into a
//! separate gradient buffer, so forward values are never touched.

use std::rc::Rc;

use super::tensor::{matmul_nt_into, matmul_tn_into, Tensor};
use super::AutodiffError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Segment membership for ragged reductions: element `j` belongs to segment `ids[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Segments {
    ids: Vec<usize>,
    count: usize,
}

impl Segments {
    pub fn new(ids: Vec<usize>, count: usize) -> Result<Self, AutodiffError> {
        if let Some(&bad) = ids.iter().find(|&&s| s >= count) {
            return Err(AutodiffError::IndexOutOfRange { index: bad, bound: count });
        }
        Ok(Self { ids, count })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Constant compressed-sparse-row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self, AutodiffError> {
        let mut sorted = triplets.to_vec();
        sorted.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in &sorted {
            if r >= rows {
                return Err(AutodiffError::IndexOutOfRange { index: r, bound: rows });
            }
            if c >= cols {
                return Err(AutodiffError::IndexOutOfRange { index: c, bound: cols });
            }
            if last == Some((r, c)) {
                *values.last_mut().expect("duplicate follows an entry") += v;
                continue;
            }
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(Self { rows, cols, indptr, indices, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.rows, self.cols]);
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                t.set(r, c, t.get(r, c) + v);
            }
        }
        t
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Log1p(Var),
    Expm1(Var),
    Square(Var),
    Softmax { input: Var, axis: usize },
    MaskedSoftmax { input: Var },
    SumAll(Var),
    MeanAll(Var),
    SumAxis { input: Var },
    MaskedMean { input: Var, mask: Rc<Tensor>, count: f64 },
    Slice { input: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    GatherRows { input: Var, index: Rc<Vec<usize>> },
    SegmentSoftmax { input: Var, seg: Rc<Segments> },
    SegmentWeightedSum { weights: Var, values: Var, seg: Rc<Segments> },
    SparseMatMul { matrix: Rc<Csr>, input: Var },
    Conv1d { input: Var, weight: Var, bias: Var, left_pad: usize },
    GumbelBinary { input: Var, soft: Vec<f64>, tau: f64 },
    FocalLogits { input: Var, targets: Rc<Tensor>, alpha: f64, gamma: f64 },
    FocalProbs { input: Var, targets: Rc<Tensor>, alpha: f64, gamma: f64, eps: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`; `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

fn require_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<(), AutodiffError> {
    if t.rank() == rank {
        Ok(())
    } else {
        Err(AutodiffError::Rank { op, expected: rank, shape: t.shape().to_vec() })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// (outer, axis length, inner) decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// For every flat output index, the flat index read from an input of `in_shape`.
/// `x^g`, taking the cheap path for small integer exponents.
#[inline]
fn ipow(x: f64, g: f64) -> f64 {
    if g.fract() == 0.0 && (0.0..=16.0).contains(&g) {
        x.powi(g as i32)
    } else {
        x.powf(g)
    }
}

fn broadcast_strides(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; out_shape.len()];
    let mut stride = 1;
    for d in (0..out_shape.len()).rev() {
        strides[d] = if in_shape[d] == 1 { 0 } else { stride };
        stride *= in_shape[d];
    }
    strides
}

/// Visits the output positions in order, passing the matching flat offsets of
/// two broadcast inputs. Offsets advance incrementally, one row at a time.
fn broadcast_walk(out_shape: &[usize], a_shape: &[usize], b_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let (sa, sb) = (broadcast_strides(out_shape, a_shape), broadcast_strides(out_shape, b_shape));
    let len = out_shape[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let rows: usize = out_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..rows {
        for t in 0..len {
            f(oa + t * la, ob + t * lb);
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(shape);
    let data = out.data_mut();
    let g = grad.data();
    let mut k = 0;
    broadcast_walk(grad.shape(), shape, shape, |i, _| {
        data[i] += g[k];
        k += 1;
    });
    out
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        require_rank("transpose", self.value(a), 2)?;
        let out = self.value(a).transpose();
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(ta.shape().to_vec(), data);
        }
        let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| mismatch(name, ta, tb))?;
        let (da, db) = (ta.data(), tb.data());
        let mut data = Vec::with_capacity(shape.iter().product());
        broadcast_walk(&shape, ta.shape(), tb.shape(), |i, j| data.push(f(da[i], db[j])));
        Tensor::new(shape, data)
    }

    /// Elementwise sum with size-1 broadcasting on either side.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Hadamard product with size-1 broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a), &[a])
    }

    pub fn log1p(&mut self, a: Var) -> Result<Var, AutodiffError> {
        if self.value(a).data().iter().any(|&x| x <= -1.0) {
            return Err(AutodiffError::Domain { op: "log1p" });
        }
        let out = self.value(a).map(f64::ln_1p);
        Ok(self.push(out, Op::Log1p(a), &[a]))
    }

    pub fn expm1(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp_m1);
        self.push(out, Op::Expm1(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(AutodiffError::Axis { op: "softmax", axis, shape: t.shape().to_vec() });
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = t.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    d[at(k)] = (d[at(k)] - max).exp();
                    z += d[at(k)];
                }
                for k in 0..len {
                    d[at(k)] /= z;
                }
            }
        }
        Ok(self.push(out, Op::Softmax { input: a, axis }, &[a]))
    }

    /// Row-wise softmax over entries where `mask` is nonzero; fully masked rows yield zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: &Tensor) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        require_rank("masked_softmax", t, 2)?;
        if t.shape() != mask.shape() {
            return Err(mismatch("masked_softmax", t, mask));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let keep: Vec<usize> = (0..c).filter(|&j| mask.get(i, j) != 0.0).collect();
            if keep.is_empty() {
                continue;
            }
            let max = keep.iter().map(|&j| t.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = keep.iter().map(|&j| (t.get(i, j) - max).exp()).sum();
            for &j in &keep {
                out.set(i, j, (t.get(i, j) - max).exp() / z);
            }
        }
        Ok(self.push(out, Op::MaskedSoftmax { input: a }, &[a]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(AutodiffError::Empty { op: "mean_all" });
        }
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        Ok(self.push(out, Op::MeanAll(a), &[a]))
    }

    /// Sum over `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(AutodiffError::Axis { op: "sum_axis", axis, shape: t.shape().to_vec() });
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += t.data()[o * len * inner + k * inner + i];
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::SumAxis { input: a }, &[a]))
    }

    /// Sum over entries with nonzero `mask`.
    pub fn masked_sum(&mut self, a: Var, mask: &Tensor) -> Result<Var, AutodiffError> {
        self.masked_reduce(a, mask, false)
    }

    /// Mean over entries with nonzero `mask`; zero when nothing is selected.
    pub fn masked_mean(&mut self, a: Var, mask: &Tensor) -> Result<Var, AutodiffError> {
        self.masked_reduce(a, mask, true)
    }

    fn masked_reduce(&mut self, a: Var, mask: &Tensor, mean: bool) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        if t.shape() != mask.shape() {
            return Err(mismatch("masked_reduce", t, mask));
        }
        let mask = mask.map(|m| if m != 0.0 { 1.0 } else { 0.0 });
        let selected = mask.sum();
        let total: f64 = t.data().iter().zip(mask.data()).map(|(x, m)| x * m).sum();
        let count = if mean { selected.max(1.0) } else { 1.0 };
        let out = Tensor::scalar(total / count);
        Ok(self.push(out, Op::MaskedMean { input: a, mask: Rc::new(mask), count }, &[a]))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        if axis >= t.rank() || start + len > t.shape()[axis] {
            return Err(AutodiffError::Axis { op: "slice", axis, shape: t.shape().to_vec() });
        }
        let (outer, full, inner) = split_axis(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Slice { input: a, axis, start }, &[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = inputs.first().ok_or(AutodiffError::Empty { op: "concat" })?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::Axis { op: "concat", axis, shape: base });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", self.value(*first), self.value(*v)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Selects rows of a matrix; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        require_rank("gather_rows", t, 2)?;
        let c = t.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= t.rows() {
                return Err(AutodiffError::IndexOutOfRange { index: i, bound: t.rows() });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![index.len(), c], data)?;
        Ok(self.push(out, Op::GatherRows { input: a, index: Rc::new(index.to_vec()) }, &[a]))
    }

    /// Softmax of an `n×1` score column within each segment.
    pub fn segment_softmax(&mut self, a: Var, seg: &Rc<Segments>) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        if t.len() != seg.len() {
            return Err(AutodiffError::SegmentLength { values: t.len(), segments: seg.len() });
        }
        let mut max = vec![f64::NEG_INFINITY; seg.count()];
        for (&x, &s) in t.data().iter().zip(seg.ids()) {
            max[s] = max[s].max(x);
        }
        let mut z = vec![0.0; seg.count()];
        let mut e: Vec<f64> = t.data().iter().zip(seg.ids()).map(|(&x, &s)| (x - max[s]).exp()).collect();
        for (&v, &s) in e.iter().zip(seg.ids()) {
            z[s] += v;
        }
        for (v, &s) in e.iter_mut().zip(seg.ids()) {
            *v /= z[s];
        }
        let out = Tensor::new(t.shape().to_vec(), e)?;
        Ok(self.push(out, Op::SegmentSoftmax { input: a, seg: Rc::clone(seg) }, &[a]))
    }

    /// `out[s] = Σ_{j in s} weights[j] · values[j]`; empty segments give zero rows.
    pub fn segment_weighted_sum(
        &mut self,
        weights: Var,
        values: Var,
        seg: &Rc<Segments>,
    ) -> Result<Var, AutodiffError> {
        let (w, v) = (self.value(weights), self.value(values));
        require_rank("segment_weighted_sum", v, 2)?;
        if w.len() != seg.len() || v.rows() != seg.len() {
            return Err(AutodiffError::SegmentLength { values: v.rows(), segments: seg.len() });
        }
        let d = v.cols();
        let mut out = Tensor::zeros(&[seg.count(), d]);
        let od = out.data_mut();
        for (j, &s) in seg.ids().iter().enumerate() {
            let wj = w.data()[j];
            for (o, x) in od[s * d..(s + 1) * d].iter_mut().zip(v.row(j)) {
                *o += wj * x;
            }
        }
        let op = Op::SegmentWeightedSum { weights, values, seg: Rc::clone(seg) };
        Ok(self.push(out, op, &[weights, values]))
    }

    /// Constant sparse matrix times a dense variable.
    pub fn sparse_matmul(&mut self, matrix: &Rc<Csr>, a: Var) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        require_rank("sparse_matmul", t, 2)?;
        if matrix.cols() != t.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "sparse_matmul",
                lhs: vec![matrix.rows(), matrix.cols()],
                rhs: t.shape().to_vec(),
            });
        }
        let d = t.cols();
        let mut out = Tensor::zeros(&[matrix.rows(), d]);
        let od = out.data_mut();
        for r in 0..matrix.rows() {
            for (c, v) in matrix.row_entries(r) {
                for (o, x) in od[r * d..(r + 1) * d].iter_mut().zip(t.row(c)) {
                    *o += v * x;
                }
            }
        }
        Ok(self.push(out, Op::SparseMatMul { matrix: Rc::clone(matrix), input: a }, &[a]))
    }

    /// 1-D convolution over `[batch, in_channels, time]` with a `[out, in, k]` kernel and an
    /// `[out]` bias. `left_pad` zeros are implied before the first step; output length equals
    /// input length (`k - 1` is causal, `(k - 1) / 2` is centred).
    pub fn conv1d(&mut self, x: Var, weight: Var, bias: Var, left_pad: usize) -> Result<Var, AutodiffError> {
        let (tx, tw, tb) = (self.value(x), self.value(weight), self.value(bias));
        require_rank("conv1d", tx, 3)?;
        require_rank("conv1d", tw, 3)?;
        let (b, c, t) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (o, ci, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        if ci != c || tb.len() != o || k == 0 || left_pad > k - 1 {
            return Err(mismatch("conv1d", tx, tw));
        }
        let mut out = vec![0.0; b * o * t];
        for bi in 0..b {
            for oi in 0..o {
                let orow = &mut out[(bi * o + oi) * t..(bi * o + oi + 1) * t];
                orow.iter_mut().for_each(|v| *v = tb.data()[oi]);
                for cj in 0..c {
                    let xrow = &tx.data()[(bi * c + cj) * t..(bi * c + cj + 1) * t];
                    for j in 0..k {
                        let w = tw.data()[(oi * c + cj) * k + j];
                        for (ti, ov) in orow.iter_mut().enumerate() {
                            let s = ti as isize + j as isize - left_pad as isize;
                            if s >= 0 && (s as usize) < t {
                                *ov += w * xrow[s as usize];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![b, o, t], out)?;
        Ok(self.push(out, Op::Conv1d { input: x, weight, bias, left_pad }, &[x, weight, bias]))
    }

    /// Binary-concrete relaxation `σ((logits + noise) / τ)` with externally supplied
    /// logistic noise. In hard mode the forward value is thresholded at 0.5 while the
    /// backward pass uses the relaxed derivative.
    pub fn gumbel_binary(&mut self, logits: Var, noise: &Tensor, tau: f64, hard: bool) -> Result<Var, AutodiffError> {
        let t = self.value(logits);
        if t.shape() != noise.shape() {
            return Err(mismatch("gumbel_binary", t, noise));
        }
        if tau <= 0.0 {
            return Err(AutodiffError::Domain { op: "gumbel_binary" });
        }
        let soft: Vec<f64> = t.data().iter().zip(noise.data()).map(|(&z, &l)| sigmoid((z + l) / tau)).collect();
        let fwd = if hard { soft.iter().map(|&s| if s >= 0.5 { 1.0 } else { 0.0 }).collect() } else { soft.clone() };
        let out = Tensor::new(t.shape().to_vec(), fwd)?;
        Ok(self.push(out, Op::GumbelBinary { input: logits, soft, tau }, &[logits]))
    }

    /// Mean focal loss of `σ(logits)` against targets in `[0, 1]`, with the same `α` on
    /// both classes: `-α (1-p)^γ ln p` for positives and `-α p^γ ln(1-p)` for negatives.
    pub fn focal_logits(
        &mut self,
        logits: Var,
        targets: &Tensor,
        alpha: f64,
        gamma: f64,
    ) -> Result<Var, AutodiffError> {
        let t = self.value(logits);
        if t.shape() != targets.shape() {
            return Err(mismatch("focal_logits", t, targets));
        }
        if t.is_empty() {
            return Err(AutodiffError::Empty { op: "focal_logits" });
        }
        let total: f64 = t
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| {
                let p = sigmoid(z);
                let (ln_p, ln_q) = (-softplus(-z), -softplus(z));
                -alpha * (y * ipow(1.0 - p, gamma) * ln_p + (1.0 - y) * ipow(p, gamma) * ln_q)
            })
            .sum();
        let out = Tensor::scalar(total / t.len() as f64);
        let op = Op::FocalLogits { input: logits, targets: Rc::new(targets.clone()), alpha, gamma };
        Ok(self.push(out, op, &[logits]))
    }

    /// [`Tape::focal_logits`] on probabilities clamped to `[eps, 1 - eps]`; clamped
    /// entries pass no gradient.
    pub fn focal_probs(
        &mut self,
        probs: Var,
        targets: &Tensor,
        alpha: f64,
        gamma: f64,
        eps: f64,
    ) -> Result<Var, AutodiffError> {
        let t = self.value(probs);
        if t.shape() != targets.shape() {
            return Err(mismatch("focal_probs", t, targets));
        }
        if t.is_empty() {
            return Err(AutodiffError::Empty { op: "focal_probs" });
        }
        if !(eps > 0.0 && eps < 0.5) {
            return Err(AutodiffError::Domain { op: "focal_probs" });
        }
        let total: f64 = t
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&p, &y)| {
                let p = p.clamp(eps, 1.0 - eps);
                -alpha * (y * ipow(1.0 - p, gamma) * p.ln() + (1.0 - y) * ipow(p, gamma) * (1.0 - p).ln())
            })
            .sum();
        let out = Tensor::scalar(total / t.len() as f64);
        let op = Op::FocalProbs { input: probs, targets: Rc::new(targets.clone()), alpha, gamma, eps };
        Ok(self.push(out, op, &[probs]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss { shape: self.value(loss).shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn unary_grad(&self, grads: &mut [Option<Tensor>], a: Var, g: &Tensor, f: impl Fn(f64, f64) -> f64, out: &Tensor) {
        let x = self.value(a);
        let data = g.data().iter().zip(x.data()).zip(out.data()).map(|((&gi, &xi), &yi)| gi * f(xi, yi)).collect();
        let t = Tensor::new(x.shape().to_vec(), data).expect("unary shape");
        self.accumulate(grads, a, t);
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                if self.requires_grad(*a) {
                    // G (n×m) · Bᵀ (m×k)
                    let mut da = vec![0.0; n * k];
                    matmul_nt_into(g.data(), tb.data(), &mut da, n, m, k);
                    self.accumulate(grads, *a, Tensor::new(vec![n, k], da).expect("matmul grad"));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * m];
                    matmul_tn_into(ta.data(), g.data(), &mut db, n, k, m);
                    self.accumulate(grads, *b, Tensor::new(vec![k, m], db).expect("matmul grad"));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                let (sa, sb) = (self.value(*a).shape().to_vec(), self.value(*b).shape().to_vec());
                self.accumulate(grads, *a, reduce_to(g, &sa));
                self.accumulate(grads, *b, reduce_to(g, &sb));
            }
            Op::Sub(a, b) => {
                let (sa, sb) = (self.value(*a).shape().to_vec(), self.value(*b).shape().to_vec());
                self.accumulate(grads, *a, reduce_to(g, &sa));
                self.accumulate(grads, *b, reduce_to(&g.map(|x| -x), &sb));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let shape = out.shape();
                for (this, other) in [(a, tb), (b, ta)] {
                    if !self.requires_grad(*this) {
                        continue;
                    }
                    let prod: Vec<f64> = if other.shape() == shape {
                        g.data().iter().zip(other.data()).map(|(x, y)| x * y).collect()
                    } else {
                        let (gd, od) = (g.data(), other.data());
                        let mut prod = Vec::with_capacity(gd.len());
                        let mut k = 0;
                        broadcast_walk(shape, other.shape(), other.shape(), |j, _| {
                            prod.push(gd[k] * od[j]);
                            k += 1;
                        });
                        prod
                    };
                    let full = Tensor::new(shape.to_vec(), prod).expect("mul grad");
                    let target = self.value(*this).shape().to_vec();
                    self.accumulate(grads, *this, reduce_to(&full, &target));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Tanh(a) => self.unary_grad(grads, *a, g, |_, y| 1.0 - y * y, out),
            Op::Sigmoid(a) => self.unary_grad(grads, *a, g, |_, y| y * (1.0 - y), out),
            Op::Relu(a) => self.unary_grad(grads, *a, g, |x, _| if x > 0.0 { 1.0 } else { 0.0 }, out),
            Op::Softplus(a) => self.unary_grad(grads, *a, g, |x, _| sigmoid(x), out),
            Op::Log1p(a) => self.unary_grad(grads, *a, g, |x, _| 1.0 / (1.0 + x), out),
            Op::Expm1(a) => self.unary_grad(grads, *a, g, |_, y| y + 1.0, out),
            Op::Square(a) => self.unary_grad(grads, *a, g, |x, _| 2.0 * x, out),
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                let mut dx = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let dot: f64 = (0..len).map(|k| out.data()[at(k)] * g.data()[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = out.data()[at(k)] * (g.data()[at(k)] - dot);
                        }
                    }
                }
                let t = Tensor::new(out.shape().to_vec(), dx).expect("softmax grad");
                self.accumulate(grads, *input, t);
            }
            Op::MaskedSoftmax { input } => {
                let (r, c) = (out.rows(), out.cols());
                let mut dx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let dot: f64 = (0..c).map(|j| out.get(i, j) * g.get(i, j)).sum();
                    for j in 0..c {
                        dx.set(i, j, out.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::SumAll(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.data()[0]));
            }
            Op::MeanAll(a) => {
                let t = self.value(*a);
                let v = g.data()[0] / t.len() as f64;
                self.accumulate(grads, *a, Tensor::full(t.shape(), v));
            }
            Op::SumAxis { input, .. } => {
                let shape = self.value(*input).shape().to_vec();
                let gd = g.data();
                let mut data = Vec::with_capacity(shape.iter().product());
                broadcast_walk(&shape, g.shape(), g.shape(), |j, _| data.push(gd[j]));
                self.accumulate(grads, *input, Tensor::new(shape, data).expect("sum_axis grad"));
            }
            Op::MaskedMean { input, mask, count } => {
                let v = g.data()[0] / count;
                self.accumulate(grads, *input, mask.map(|m| m * v));
            }
            Op::Slice { input, axis, start } => {
                let shape = self.value(*input).shape().to_vec();
                let (outer, full, inner) = split_axis(&shape, *axis);
                let len = out.shape()[*axis];
                let mut dx = Tensor::zeros(&shape);
                let d = dx.data_mut();
                for o in 0..outer {
                    let dst = o * full * inner + start * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *input, dx);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let shape = self.value(*v).shape().to_vec();
                    let len = shape[*axis];
                    let mut data = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let src = o * total * inner + offset * inner;
                        data.extend_from_slice(&g.data()[src..src + len * inner]);
                    }
                    offset += len;
                    self.accumulate(grads, *v, Tensor::new(shape, data).expect("concat grad"));
                }
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshaped(&shape).expect("reshape grad"));
            }
            Op::GatherRows { input, index } => {
                let shape = self.value(*input).shape().to_vec();
                let c = shape[1];
                let mut dx = Tensor::zeros(&shape);
                let d = dx.data_mut();
                for (j, &i) in index.iter().enumerate() {
                    for (dst, src) in d[i * c..(i + 1) * c].iter_mut().zip(g.row(j)) {
                        *dst += src;
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::SegmentSoftmax { input, seg } => {
                let mut dot = vec![0.0; seg.count()];
                for ((&y, &gi), &s) in out.data().iter().zip(g.data()).zip(seg.ids()) {
                    dot[s] += y * gi;
                }
                let data =
                    out.data().iter().zip(g.data()).zip(seg.ids()).map(|((&y, &gi), &s)| y * (gi - dot[s])).collect();
                let t = Tensor::new(out.shape().to_vec(), data).expect("segment softmax grad");
                self.accumulate(grads, *input, t);
            }
            Op::SegmentWeightedSum { weights, values, seg } => {
                let (w, v) = (self.value(*weights), self.value(*values));
                let d = v.cols();
                if self.requires_grad(*weights) {
                    let data = seg
                        .ids()
                        .iter()
                        .enumerate()
                        .map(|(j, &s)| g.row(s).iter().zip(v.row(j)).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *weights, Tensor::new(w.shape().to_vec(), data).expect("weights grad"));
                }
                if self.requires_grad(*values) {
                    let mut dv = Tensor::zeros(v.shape());
                    let dd = dv.data_mut();
                    for (j, &s) in seg.ids().iter().enumerate() {
                        let wj = w.data()[j];
                        for (dst, gs) in dd[j * d..(j + 1) * d].iter_mut().zip(g.row(s)) {
                            *dst = wj * gs;
                        }
                    }
                    self.accumulate(grads, *values, dv);
                }
            }
            Op::SparseMatMul { matrix, input } => {
                let shape = self.value(*input).shape().to_vec();
                let d = shape[1];
                let mut dx = Tensor::zeros(&shape);
                let dd = dx.data_mut();
                for r in 0..matrix.rows() {
                    for (c, v) in matrix.row_entries(r) {
                        for (dst, gs) in dd[c * d..(c + 1) * d].iter_mut().zip(g.row(r)) {
                            *dst += v * gs;
                        }
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::Conv1d { input, weight, bias, left_pad } => {
                let (tx, tw) = (self.value(*input), self.value(*weight));
                let (b, c, t) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (o, k) = (tw.shape()[0], tw.shape()[2]);
                let mut dx = Tensor::zeros(tx.shape());
                let mut dw = Tensor::zeros(tw.shape());
                let mut db = Tensor::zeros(self.value(*bias).shape());
                for bi in 0..b {
                    for oi in 0..o {
                        let grow = &g.data()[(bi * o + oi) * t..(bi * o + oi + 1) * t];
                        db.data_mut()[oi] += grow.iter().sum::<f64>();
                        for cj in 0..c {
                            let xoff = (bi * c + cj) * t;
                            for j in 0..k {
                                let widx = (oi * c + cj) * k + j;
                                let w = tw.data()[widx];
                                let mut acc = 0.0;
                                for (ti, &gv) in grow.iter().enumerate() {
                                    let s = ti as isize + j as isize - *left_pad as isize;
                                    if s >= 0 && (s as usize) < t {
                                        let s = s as usize;
                                        acc += tx.data()[xoff + s] * gv;
                                        dx.data_mut()[xoff + s] += w * gv;
                                    }
                                }
                                dw.data_mut()[widx] += acc;
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, dx);
                self.accumulate(grads, *weight, dw);
                self.accumulate(grads, *bias, db);
            }
            Op::GumbelBinary { input, soft, tau } => {
                let data = g.data().iter().zip(soft).map(|(gi, s)| gi * s * (1.0 - s) / tau).collect();
                let t = Tensor::new(out.shape().to_vec(), data).expect("gumbel grad");
                self.accumulate(grads, *input, t);
            }
            Op::FocalLogits { input, targets, alpha, gamma } => {
                let x = self.value(*input);
                let scale = g.data()[0] / x.len() as f64;
                let data = x
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&z, &y)| {
                        let p = sigmoid(z);
                        let q = 1.0 - p;
                        let (ln_p, ln_q) = (-softplus(-z), -softplus(z));
                        let pos = alpha * (gamma * ipow(q, *gamma) * p * ln_p - ipow(q, gamma + 1.0));
                        let neg = alpha * (ipow(p, gamma + 1.0) - gamma * ipow(p, *gamma) * q * ln_q);
                        scale * (y * pos + (1.0 - y) * neg)
                    })
                    .collect();
                let t = Tensor::new(x.shape().to_vec(), data).expect("focal grad");
                self.accumulate(grads, *input, t);
            }
            Op::FocalProbs { input, targets, alpha, gamma, eps } => {
                let x = self.value(*input);
                let scale = g.data()[0] / x.len() as f64;
                let data = x
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&p, &y)| {
                        if p < *eps || p > 1.0 - eps {
                            return 0.0;
                        }
                        let q = 1.0 - p;
                        let pos = gamma * ipow(q, gamma - 1.0) * p.ln() - ipow(q, *gamma) / p;
                        let neg = gamma * ipow(p, gamma - 1.0) * q.ln() - ipow(p, *gamma) / q;
                        scale * alpha * (y * pos - (1.0 - y) * neg)
                    })
                    .collect();
                let t = Tensor::new(x.shape().to_vec(), data).expect("focal grad");
                self.accumulate(grads, *input, t);
            }
        }
    }
}
