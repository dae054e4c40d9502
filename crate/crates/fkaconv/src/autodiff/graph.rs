//! Arena-based computation graph with eager forward evaluation and
//! reverse-mode gradients.
//!
//! Nodes are appended in topological order (an op's parents always have
//! smaller ids), so the backward sweep is a single descending pass.
//! Gradients accumulate across repeated `backward` calls until explicitly
//! zeroed. Parameters are leaves created before a watermark; per-batch
//! nodes are reclaimed with [`Graph::truncate`].

use super::broadcast::BroadcastMap;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Non-learnable batch-norm state (running statistics).
#[derive(Debug, Clone)]
pub struct BnState<F: Real> {
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    pub momentum: F,
}

impl<F: Real> BnState<F> {
    pub fn new(features: usize, momentum: f64) -> Self {
        BnState {
            running_mean: vec![F::zero(); features],
            running_var: vec![F::one(); features],
            momentum: F::from_f64(momentum),
        }
    }
}

const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<F: Real> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Bmm { a: NodeId, b: NodeId },
    TransposeLast2 { x: NodeId },
    Unary { x: NodeId, kind: UnaryKind },
    Scale { x: NodeId, factor: F },
    Binary { a: NodeId, b: NodeId, kind: BinaryKind, map: BroadcastMap },
    L2NormLast { x: NodeId },
    MaxAxis { x: NodeId, axis: usize, argmax: Vec<u32> },
    SumAxis { x: NodeId, axis: usize },
    Concat { xs: Vec<NodeId>, axis: usize },
    ExpandAxis { x: NodeId, axis: usize, reps: usize },
    Gather { x: NodeId, indices: Vec<u32> },
    Reshape { x: NodeId },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<F>,
        invstd: Vec<F>,
        training: bool,
    },
    CrossEntropy { logits: NodeId, labels: Vec<u32>, probs: Vec<F> },
    KernelApply { kernel: NodeId, g: NodeId, bias: NodeId },
}

impl<F: Real> Op<F> {
    fn for_each_parent(&self, mut f: impl FnMut(NodeId)) {
        match self {
            Op::Leaf => {}
            Op::Matmul { a, b } | Op::Bmm { a, b } => {
                f(*a);
                f(*b);
            }
            Op::Binary { a, b, .. } => {
                f(*a);
                f(*b);
            }
            Op::Linear { x, w, b } => {
                f(*x);
                f(*w);
                f(*b);
            }
            Op::TransposeLast2 { x }
            | Op::Unary { x, .. }
            | Op::Scale { x, .. }
            | Op::L2NormLast { x }
            | Op::MaxAxis { x, .. }
            | Op::SumAxis { x, .. }
            | Op::ExpandAxis { x, .. }
            | Op::Gather { x, .. }
            | Op::Reshape { x } => f(*x),
            Op::Concat { xs, .. } => {
                for x in xs {
                    f(*x);
                }
            }
            Op::BatchNorm { x, gamma, beta, .. } => {
                f(*x);
                f(*gamma);
                f(*beta);
            }
            Op::CrossEntropy { logits, .. } => f(*logits),
            Op::KernelApply { kernel, g, bias } => {
                f(*kernel);
                f(*g);
                f(*bias);
            }
        }
    }
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// The computation graph. One instance per logical training/evaluation
/// sequence; distinct instances share nothing.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> NodeId {
        let mut requires_grad = false;
        op.for_each_parent(|p| requires_grad |= self.nodes[p.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current node count, used with [`Graph::truncate`] to reclaim
    /// per-batch nodes while keeping parameter leaves alive.
    pub fn watermark(&self) -> usize {
        self.nodes.len()
    }

    pub fn truncate(&mut self, watermark: usize) {
        self.nodes.truncate(watermark);
        self.grads.truncate(watermark);
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.grads[id.0].as_deref()
    }

    pub fn zero_grad(&mut self, id: NodeId) {
        self.grads[id.0] = None;
    }

    pub fn zero_all_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Replace a leaf's value in place (optimizer steps, finite
    /// differences). The shape must match.
    pub fn set_leaf_value(&mut self, id: NodeId, data: &[F]) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Parameter("set_leaf_value on a non-leaf".into()));
        }
        if node.value.numel() != data.len() {
            return Err(Error::Parameter(format!(
                "leaf has {} elements, got {}",
                node.value.numel(),
                data.len()
            )));
        }
        node.value.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> NodeId {
        self.push_with(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.leaf(value, false)
    }

    // ---- op constructors (forward runs eagerly) ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.dims()[1] != bv.dims()[0] {
            return Err(Error::dims("matmul", av.dims(), bv.dims()));
        }
        let (m, k, n) = (av.dims()[0], av.dims()[1], bv.dims()[1]);
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m, k, n,
            F::one(),
            av.data(), k as isize, 1,
            bv.data(), n as isize, 1,
            F::zero(),
            &mut out, n as isize, 1,
        );
        let value = Tensor::from_slice(&[m, n], &out)?;
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    /// Affine map over the trailing dimension:
    /// `x (.. x Fin) * w (Fin x Fout) + b (Fout)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.rank() != 2 {
            return Err(Error::dims("linear weight", wv.dims(), &[0, 0]));
        }
        let (fin, fout) = (wv.dims()[0], wv.dims()[1]);
        if xv.rank() == 0 || *xv.dims().last().unwrap() != fin {
            return Err(Error::dims("linear input", xv.dims(), wv.dims()));
        }
        if bv.dims() != [fout] {
            return Err(Error::dims("linear bias", bv.dims(), &[fout]));
        }
        let rows = xv.numel() / fin;
        let mut out = vec![F::zero(); rows * fout];
        F::gemm(
            rows, fin, fout,
            F::one(),
            xv.data(), fin as isize, 1,
            wv.data(), fout as isize, 1,
            F::zero(),
            &mut out, fout as isize, 1,
        );
        for r in 0..rows {
            for (o, bias) in bv.data().iter().enumerate() {
                out[r * fout + o] = out[r * fout + o] + *bias;
            }
        }
        let mut dims = xv.dims().to_vec();
        *dims.last_mut().unwrap() = fout;
        let value = Tensor::from_slice(&dims, &out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    /// Batched matrix product: `a (S x m x k) * b (S x k x n)`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 3
            || bv.rank() != 3
            || av.dims()[0] != bv.dims()[0]
            || av.dims()[2] != bv.dims()[1]
        {
            return Err(Error::dims("bmm", av.dims(), bv.dims()));
        }
        let (s, m, k, n) = (av.dims()[0], av.dims()[1], av.dims()[2], bv.dims()[2]);
        let mut out = vec![F::zero(); s * m * n];
        let (ad, bd) = (av.data(), bv.data());
        for si in 0..s {
            for mi in 0..m {
                for ki in 0..k {
                    let aval = ad[(si * m + mi) * k + ki];
                    let brow = &bd[(si * k + ki) * n..(si * k + ki) * n + n];
                    let orow = &mut out[(si * m + mi) * n..(si * m + mi) * n + n];
                    for (oe, be) in orow.iter_mut().zip(brow) {
                        *oe = *oe + aval * *be;
                    }
                }
            }
        }
        let value = Tensor::from_slice(&[s, m, n], &out)?;
        Ok(self.push(value, Op::Bmm { a, b }))
    }

    /// Swap the last two axes of a rank-3 tensor.
    pub fn transpose_last2(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(Error::dims("transpose_last2", xv.dims(), &[0, 0, 0]));
        }
        let (s, m, n) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
        let mut out = vec![F::zero(); s * m * n];
        let xd = xv.data();
        for si in 0..s {
            for mi in 0..m {
                for ni in 0..n {
                    out[si * m * n + ni * m + mi] = xd[si * m * n + mi * n + ni];
                }
            }
        }
        let value = Tensor::from_slice(&[s, n, m], &out)?;
        Ok(self.push(value, Op::TransposeLast2 { x }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self
            .value(x)
            .map(|v| if v > F::zero() { v } else { F::zero() });
        self.push(value, Op::Unary { x, kind: UnaryKind::Relu })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let one = F::one();
        let value = self.value(x).map(|v| one / (one + (-v).exp()));
        self.push(value, Op::Unary { x, kind: UnaryKind::Sigmoid })
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, x: NodeId, factor: F) -> NodeId {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, BinaryKind::Mul)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, kind: BinaryKind) -> Result<NodeId> {
        let map = BroadcastMap::new(self.value(a).dims(), self.value(b).dims())?;
        let mut out = vec![F::zero(); map.out_numel()];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            map.for_each(|o, ia, ib| {
                out[o] = match kind {
                    BinaryKind::Add => ad[ia] + bd[ib],
                    BinaryKind::Sub => ad[ia] - bd[ib],
                    BinaryKind::Mul => ad[ia] * bd[ib],
                };
            });
        }
        let value = Tensor::from_slice(&map.out_dims().to_vec(), &out)?;
        Ok(self.push(value, Op::Binary { a, b, kind, map }))
    }

    /// Euclidean norm over the last axis; the gradient at an exactly zero
    /// vector is defined as zero.
    pub fn l2_norm_last(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(Error::dims("l2_norm_last", xv.dims(), &[0]));
        }
        let c = *xv.dims().last().unwrap();
        let rows = xv.numel() / c;
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut acc = F::zero();
            for v in &xv.data()[r * c..(r + 1) * c] {
                acc = acc + *v * *v;
            }
            out.push(acc.sqrt());
        }
        let dims = &xv.dims()[..xv.rank() - 1];
        let value = Tensor::from_slice(dims, &out)?;
        Ok(self.push(value, Op::L2NormLast { x }))
    }

    /// Max over `axis`, removing it. Ties route to the lowest index; the
    /// backward pass sends the upstream gradient only to the argmax slot.
    pub fn max_axis(&mut self, x: NodeId, axis: usize) -> Result<(NodeId, Vec<u32>)> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::dims("max_axis", xv.dims(), &[axis]));
        }
        let dims = xv.dims();
        let extent = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let outer: usize = dims[..axis].iter().product();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        let xd = xv.data();
        for o in 0..outer {
            for i in 0..inner {
                let mut best = xd[o * extent * inner + i];
                let mut best_j = 0u32;
                for j in 1..extent {
                    let v = xd[(o * extent + j) * inner + i];
                    if v > best {
                        best = v;
                        best_j = j as u32;
                    }
                }
                out.push(best);
                argmax.push(best_j);
            }
        }
        let mut out_dims = dims.to_vec();
        out_dims.remove(axis);
        let value = Tensor::from_slice(&out_dims, &out)?;
        let id = self.push(
            value,
            Op::MaxAxis {
                x,
                axis,
                argmax: argmax.clone(),
            },
        );
        Ok((id, argmax))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::dims("sum_axis", xv.dims(), &[axis]));
        }
        let dims = xv.dims();
        let extent = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let outer: usize = dims[..axis].iter().product();
        let mut out = vec![F::zero(); outer * inner];
        let xd = xv.data();
        for o in 0..outer {
            for j in 0..extent {
                let base = (o * extent + j) * inner;
                let orow = &mut out[o * inner..(o + 1) * inner];
                for (oe, xe) in orow.iter_mut().zip(&xd[base..base + inner]) {
                    *oe = *oe + *xe;
                }
            }
        }
        let mut out_dims = dims.to_vec();
        out_dims.remove(axis);
        let value = Tensor::from_slice(&out_dims, &out)?;
        Ok(self.push(value, Op::SumAxis { x, axis }))
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.sum_axis(flat, 0)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let extent = self.value(x).dims()[axis];
        let summed = self.sum_axis(x, axis)?;
        Ok(self.scale(summed, F::one() / F::from_f64(extent as f64)))
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::EmptyInput("concat of zero tensors".into()));
        }
        let first = self.value(xs[0]).dims().to_vec();
        if axis >= first.len() {
            return Err(Error::dims("concat axis", &first, &[axis]));
        }
        let mut total = 0usize;
        for &x in xs {
            let d = self.value(x).dims();
            if d.len() != first.len()
                || d.iter()
                    .enumerate()
                    .any(|(i, &e)| i != axis && e != first[i])
            {
                return Err(Error::dims("concat", &first, d));
            }
            total += d[axis];
        }
        let mut out_dims = first.clone();
        out_dims[axis] = total;
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let mut out = vec![F::zero(); out_dims.iter().product()];
        let row = total * inner;
        let mut offset = 0usize;
        for &x in xs {
            let xv = self.value(x);
            let extent = xv.dims()[axis];
            let chunk = extent * inner;
            for o in 0..outer {
                out[o * row + offset..o * row + offset + chunk]
                    .copy_from_slice(&xv.data()[o * chunk..(o + 1) * chunk]);
            }
            offset += chunk;
        }
        let value = Tensor::from_slice(&out_dims, &out)?;
        Ok(self.push(value, Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// Insert a new axis of length `reps` at `axis`, repeating the input.
    pub fn expand_axis(&mut self, x: NodeId, axis: usize, reps: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if axis > xv.rank() || reps == 0 {
            return Err(Error::Parameter(format!(
                "expand_axis axis {axis} reps {reps} on rank {}",
                xv.rank()
            )));
        }
        let dims = xv.dims();
        let inner: usize = dims[axis..].iter().product();
        let outer: usize = dims[..axis].iter().product();
        let mut out = vec![F::zero(); outer * reps * inner];
        let xd = xv.data();
        for o in 0..outer {
            for r in 0..reps {
                out[(o * reps + r) * inner..(o * reps + r + 1) * inner]
                    .copy_from_slice(&xd[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_dims = dims.to_vec();
        out_dims.insert(axis, reps);
        let value = Tensor::from_slice(&out_dims, &out)?;
        Ok(self.push(value, Op::ExpandAxis { x, axis, reps }))
    }

    /// Select rows of a rank-2 tensor: `x (N x C)` gathered by `indices`
    /// viewed as `prefix_dims`, giving `prefix_dims x C`. The backward
    /// pass scatter-adds into the source rows.
    pub fn gather(&mut self, x: NodeId, indices: &[u32], prefix_dims: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::dims("gather source", xv.dims(), &[0, 0]));
        }
        let n = xv.dims()[0];
        let c = xv.dims()[1];
        let rows: usize = prefix_dims.iter().product();
        if rows != indices.len() {
            return Err(Error::Parameter(format!(
                "gather: {} indices for prefix {prefix_dims:?}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= n) {
            return Err(Error::Parameter(format!(
                "gather index {bad} out of range for {n} rows"
            )));
        }
        let mut out = vec![F::zero(); rows * c];
        let xd = xv.data();
        for (r, &i) in indices.iter().enumerate() {
            out[r * c..(r + 1) * c].copy_from_slice(&xd[i as usize * c..(i as usize + 1) * c]);
        }
        let mut out_dims = prefix_dims.to_vec();
        out_dims.push(c);
        let value = Tensor::from_slice(&out_dims, &out)?;
        Ok(self.push(value, Op::Gather { x, indices: indices.to_vec() }))
    }

    pub fn reshape(&mut self, x: NodeId, dims: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshaped(dims)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Batch normalization over the leading axis of `x (B x F)`.
    ///
    /// Training mode normalizes with batch statistics (biased variance)
    /// and folds them into `state` with its momentum; eval mode uses the
    /// running statistics.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BnState<F>,
        training: bool,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::dims("batch_norm input", xv.dims(), &[0, 0]));
        }
        let (b, f) = (xv.dims()[0], xv.dims()[1]);
        if state.running_mean.len() != f {
            return Err(Error::dims(
                "batch_norm state",
                &[state.running_mean.len()],
                &[f],
            ));
        }
        if self.value(gamma).dims() != [f] || self.value(beta).dims() != [f] {
            return Err(Error::dims(
                "batch_norm scale/shift",
                self.value(gamma).dims(),
                &[f],
            ));
        }
        let eps = F::from_f64(BN_EPS);
        let (mean, invstd) = if training {
            if b < 2 {
                return Err(Error::DegenerateBatch(b));
            }
            let xd = xv.data();
            let nb = F::from_f64(b as f64);
            let mut mean = vec![F::zero(); f];
            for r in 0..b {
                for (m, v) in mean.iter_mut().zip(&xd[r * f..(r + 1) * f]) {
                    *m = *m + *v;
                }
            }
            for m in &mut mean {
                *m = *m / nb;
            }
            let mut var = vec![F::zero(); f];
            for r in 0..b {
                for j in 0..f {
                    let d = xd[r * f + j] - mean[j];
                    var[j] = var[j] + d * d;
                }
            }
            for v in &mut var {
                *v = *v / nb;
            }
            let mom = state.momentum;
            let keep = F::one() - mom;
            for j in 0..f {
                state.running_mean[j] = keep * state.running_mean[j] + mom * mean[j];
                state.running_var[j] = keep * state.running_var[j] + mom * var[j];
            }
            let invstd: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
            (mean, invstd)
        } else {
            let invstd: Vec<F> = state
                .running_var
                .iter()
                .map(|&v| F::one() / (v + eps).sqrt())
                .collect();
            (state.running_mean.clone(), invstd)
        };
        let xd = self.value(x).data();
        let mut xhat = vec![F::zero(); b * f];
        let mut out = vec![F::zero(); b * f];
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        for r in 0..b {
            for j in 0..f {
                let h = (xd[r * f + j] - mean[j]) * invstd[j];
                xhat[r * f + j] = h;
                out[r * f + j] = gd[j] * h + bd[j];
            }
        }
        let value = Tensor::from_slice(&[b, f], &out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                training,
            },
        ))
    }

    /// Mean cross entropy of `logits (B x C)` against integer labels,
    /// stabilized by per-row max subtraction.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[u32]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rank() != 2 {
            return Err(Error::dims("cross_entropy logits", lv.dims(), &[0, 0]));
        }
        let (b, c) = (lv.dims()[0], lv.dims()[1]);
        if labels.len() != b {
            return Err(Error::dims("cross_entropy labels", &[labels.len()], &[b]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::Label {
                label: bad as usize,
                classes: c,
            });
        }
        let ld = lv.data();
        let mut probs = vec![F::zero(); b * c];
        let mut loss = F::zero();
        for r in 0..b {
            let row = &ld[r * c..(r + 1) * c];
            let mut mx = row[0];
            for &v in row.iter().skip(1) {
                if v > mx {
                    mx = v;
                }
            }
            let mut denom = F::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[r * c + j] = e;
                denom = denom + e;
            }
            for j in 0..c {
                probs[r * c + j] = probs[r * c + j] / denom;
            }
            let y = labels[r] as usize;
            loss = loss - (row[y] - mx - denom.ln());
        }
        loss = loss / F::from_f64(b as f64);
        let value = Tensor::scalar(loss);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Contract a per-support feature block `g (S x M x Fin)` with a
    /// kernel `k (Fout x Fin x M)` plus a per-output bias:
    /// `out[s,o] = sum_{m,f} k[o,f,m] * g[s,m,f] + bias[o]`.
    pub fn kernel_apply(&mut self, kernel: NodeId, g: NodeId, bias: NodeId) -> Result<NodeId> {
        let kv = self.value(kernel);
        let gv = self.value(g);
        let bv = self.value(bias);
        if kv.rank() != 3 || gv.rank() != 3 {
            return Err(Error::dims("kernel_apply", kv.dims(), gv.dims()));
        }
        let (fout, fin, m) = (kv.dims()[0], kv.dims()[1], kv.dims()[2]);
        let s = gv.dims()[0];
        if gv.dims()[1] != m || gv.dims()[2] != fin {
            return Err(Error::dims("kernel_apply", kv.dims(), gv.dims()));
        }
        if bv.dims() != [fout] {
            return Err(Error::dims("kernel_apply bias", bv.dims(), &[fout]));
        }
        // Repack k[o,f,m] as w[(m*fin + f), o] so the contraction is one
        // row-major GEMM against g flattened to (S x M*Fin).
        let w = repack_kernel(kv.data(), fout, fin, m);
        let mf = m * fin;
        let mut out = vec![F::zero(); s * fout];
        F::gemm(
            s, mf, fout,
            F::one(),
            gv.data(), mf as isize, 1,
            &w, fout as isize, 1,
            F::zero(),
            &mut out, fout as isize, 1,
        );
        let bd = bv.data();
        for r in 0..s {
            for (o, bias) in bd.iter().enumerate() {
                out[r * fout + o] = out[r * fout + o] + *bias;
            }
        }
        let value = Tensor::from_slice(&[s, fout], &out)?;
        Ok(self.push(value, Op::KernelApply { kernel, g, bias }))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar `loss`, accumulating gradients into
    /// every `requires_grad` ancestor. Values are never mutated; repeated
    /// calls without zeroing add up.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarRoot(self.value(loss).dims().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut active = vec![false; loss.0 + 1];
        active[loss.0] = true;
        let mut sweep: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        sweep[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !active[i] {
                continue;
            }
            let Some(g) = sweep[i].take() else { continue };
            let mut parents: Vec<NodeId> = Vec::new();
            self.nodes[i].op.for_each_parent(|p| parents.push(p));
            for p in parents {
                if self.nodes[p.0].requires_grad {
                    active[p.0] = true;
                }
            }
            self.backprop_node(i, &g, &mut sweep);
            accumulate(&mut self.grads[i], &g);
        }
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[F], sweep: &mut [Option<Vec<F>>]) {
        let needs = |p: NodeId| self.nodes[p.0].requires_grad;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (m, k) = (av.dims()[0], av.dims()[1]);
                let n = bv.dims()[1];
                if needs(*a) {
                    // dA = g (m x n) * B^T
                    let buf = ensure(sweep, a.0, m * k);
                    F::gemm(
                        m, n, k,
                        F::one(),
                        g, n as isize, 1,
                        bv.data(), 1, n as isize,
                        F::one(),
                        buf, k as isize, 1,
                    );
                }
                if needs(*b) {
                    // dB = A^T * g
                    let buf = ensure(sweep, b.0, k * n);
                    F::gemm(
                        k, m, n,
                        F::one(),
                        av.data(), 1, k as isize,
                        g, n as isize, 1,
                        F::one(),
                        buf, n as isize, 1,
                    );
                }
            }
            Op::Linear { x, w, b } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (fin, fout) = (wv.dims()[0], wv.dims()[1]);
                let rows = xv.numel() / fin;
                if needs(*x) {
                    let buf = ensure(sweep, x.0, rows * fin);
                    F::gemm(
                        rows, fout, fin,
                        F::one(),
                        g, fout as isize, 1,
                        wv.data(), 1, fout as isize,
                        F::one(),
                        buf, fin as isize, 1,
                    );
                }
                if needs(*w) {
                    let buf = ensure(sweep, w.0, fin * fout);
                    F::gemm(
                        fin, rows, fout,
                        F::one(),
                        xv.data(), 1, fin as isize,
                        g, fout as isize, 1,
                        F::one(),
                        buf, fout as isize, 1,
                    );
                }
                if needs(*b) {
                    let buf = ensure(sweep, b.0, fout);
                    for r in 0..rows {
                        for o in 0..fout {
                            buf[o] = buf[o] + g[r * fout + o];
                        }
                    }
                }
            }
            Op::Bmm { a, b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (s, m, k) = (av.dims()[0], av.dims()[1], av.dims()[2]);
                let n = bv.dims()[2];
                if needs(*a) {
                    let buf = ensure(sweep, a.0, s * m * k);
                    let bd = bv.data();
                    for si in 0..s {
                        for mi in 0..m {
                            let grow = &g[(si * m + mi) * n..(si * m + mi) * n + n];
                            for ki in 0..k {
                                let brow = &bd[(si * k + ki) * n..(si * k + ki) * n + n];
                                let mut acc = F::zero();
                                for (ge, be) in grow.iter().zip(brow) {
                                    acc = acc + *ge * *be;
                                }
                                buf[(si * m + mi) * k + ki] = buf[(si * m + mi) * k + ki] + acc;
                            }
                        }
                    }
                }
                if needs(*b) {
                    let buf = ensure(sweep, b.0, s * k * n);
                    let ad = av.data();
                    for si in 0..s {
                        for mi in 0..m {
                            let grow = &g[(si * m + mi) * n..(si * m + mi) * n + n];
                            for ki in 0..k {
                                let aval = ad[(si * m + mi) * k + ki];
                                let brow = &mut buf[(si * k + ki) * n..(si * k + ki) * n + n];
                                for (be, ge) in brow.iter_mut().zip(grow) {
                                    *be = *be + aval * *ge;
                                }
                            }
                        }
                    }
                }
            }
            Op::TransposeLast2 { x } => {
                if needs(*x) {
                    let out_dims = self.nodes[id].value.dims();
                    let (s, n, m) = (out_dims[0], out_dims[1], out_dims[2]);
                    let buf = ensure(sweep, x.0, s * m * n);
                    for si in 0..s {
                        for ni in 0..n {
                            for mi in 0..m {
                                buf[si * m * n + mi * n + ni] =
                                    buf[si * m * n + mi * n + ni] + g[si * m * n + ni * m + mi];
                            }
                        }
                    }
                }
            }
            Op::Unary { x, kind } => {
                if needs(*x) {
                    let n = self.nodes[id].value.numel();
                    let yd = self.nodes[id].value.data();
                    let xd = self.nodes[x.0].value.data();
                    let buf = ensure(sweep, x.0, n);
                    match kind {
                        UnaryKind::Relu => {
                            for i in 0..n {
                                if xd[i] > F::zero() {
                                    buf[i] = buf[i] + g[i];
                                }
                            }
                        }
                        UnaryKind::Sigmoid => {
                            for i in 0..n {
                                let y = yd[i];
                                buf[i] = buf[i] + g[i] * y * (F::one() - y);
                            }
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                if needs(*x) {
                    let n = self.nodes[id].value.numel();
                    let buf = ensure(sweep, x.0, n);
                    for i in 0..n {
                        buf[i] = buf[i] + g[i] * *factor;
                    }
                }
            }
            Op::Binary { a, b, kind, map } => {
                let (na_grad, nb_grad) = (needs(*a), needs(*b));
                if !na_grad && !nb_grad {
                    return;
                }
                let na = self.nodes[a.0].value.numel();
                let nb = self.nodes[b.0].value.numel();
                let ad = self.nodes[a.0].value.data();
                let bd = self.nodes[b.0].value.data();
                let mut da = if na_grad { vec![F::zero(); na] } else { Vec::new() };
                let mut db = if nb_grad { vec![F::zero(); nb] } else { Vec::new() };
                map.for_each(|o, ia, ib| match kind {
                    BinaryKind::Add => {
                        if na_grad {
                            da[ia] = da[ia] + g[o];
                        }
                        if nb_grad {
                            db[ib] = db[ib] + g[o];
                        }
                    }
                    BinaryKind::Sub => {
                        if na_grad {
                            da[ia] = da[ia] + g[o];
                        }
                        if nb_grad {
                            db[ib] = db[ib] - g[o];
                        }
                    }
                    BinaryKind::Mul => {
                        if na_grad {
                            da[ia] = da[ia] + g[o] * bd[ib];
                        }
                        if nb_grad {
                            db[ib] = db[ib] + g[o] * ad[ia];
                        }
                    }
                });
                if na_grad {
                    let buf = ensure(sweep, a.0, na);
                    for i in 0..na {
                        buf[i] = buf[i] + da[i];
                    }
                }
                if nb_grad {
                    let buf = ensure(sweep, b.0, nb);
                    for i in 0..nb {
                        buf[i] = buf[i] + db[i];
                    }
                }
            }
            Op::L2NormLast { x } => {
                if needs(*x) {
                    let xv = &self.nodes[x.0].value;
                    let yd = self.nodes[id].value.data();
                    let c = *xv.dims().last().unwrap();
                    let rows = xv.numel() / c;
                    let xd = xv.data();
                    let buf = ensure(sweep, x.0, rows * c);
                    for r in 0..rows {
                        let norm = yd[r];
                        if norm > F::zero() {
                            let s = g[r] / norm;
                            for j in 0..c {
                                buf[r * c + j] = buf[r * c + j] + s * xd[r * c + j];
                            }
                        }
                    }
                }
            }
            Op::MaxAxis { x, axis, argmax } => {
                if needs(*x) {
                    let dims = self.nodes[x.0].value.dims();
                    let extent = dims[*axis];
                    let inner: usize = dims[axis + 1..].iter().product();
                    let outer: usize = dims[..*axis].iter().product();
                    let buf = ensure(sweep, x.0, outer * extent * inner);
                    for o in 0..outer {
                        for i in 0..inner {
                            let j = argmax[o * inner + i] as usize;
                            let dst = (o * extent + j) * inner + i;
                            buf[dst] = buf[dst] + g[o * inner + i];
                        }
                    }
                }
            }
            Op::SumAxis { x, axis } => {
                if needs(*x) {
                    let dims = self.nodes[x.0].value.dims();
                    let extent = dims[*axis];
                    let inner: usize = dims[axis + 1..].iter().product();
                    let outer: usize = dims[..*axis].iter().product();
                    let buf = ensure(sweep, x.0, outer * extent * inner);
                    for o in 0..outer {
                        for j in 0..extent {
                            let base = (o * extent + j) * inner;
                            for i in 0..inner {
                                buf[base + i] = buf[base + i] + g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let out_dims = self.nodes[id].value.dims();
                let inner: usize = out_dims[axis + 1..].iter().product();
                let outer: usize = out_dims[..*axis].iter().product();
                let row = out_dims[*axis] * inner;
                let mut offset = 0usize;
                for x in xs {
                    let extent = self.nodes[x.0].value.dims()[*axis];
                    let chunk = extent * inner;
                    if needs(*x) {
                        let numel = self.nodes[x.0].value.numel();
                        let buf = ensure(sweep, x.0, numel);
                        for o in 0..outer {
                            for i in 0..chunk {
                                buf[o * chunk + i] = buf[o * chunk + i] + g[o * row + offset + i];
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            Op::ExpandAxis { x, axis, reps } => {
                if needs(*x) {
                    let dims = self.nodes[x.0].value.dims();
                    let inner: usize = dims[*axis..].iter().product();
                    let outer: usize = dims[..*axis].iter().product();
                    let buf = ensure(sweep, x.0, outer * inner);
                    for o in 0..outer {
                        for r in 0..*reps {
                            let base = (o * reps + r) * inner;
                            for i in 0..inner {
                                buf[o * inner + i] = buf[o * inner + i] + g[base + i];
                            }
                        }
                    }
                }
            }
            Op::Gather { x, indices } => {
                if needs(*x) {
                    let dims = self.nodes[x.0].value.dims();
                    let c = dims[1];
                    let buf = ensure(sweep, x.0, dims[0] * c);
                    for (r, &i) in indices.iter().enumerate() {
                        let dst = i as usize * c;
                        for j in 0..c {
                            buf[dst + j] = buf[dst + j] + g[r * c + j];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if needs(*x) {
                    let numel = self.nodes[x.0].value.numel();
                    let buf = ensure(sweep, x.0, numel);
                    for i in 0..numel {
                        buf[i] = buf[i] + g[i];
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                training,
            } => {
                let dims = self.nodes[x.0].value.dims();
                let (b, f) = (dims[0], dims[1]);
                if needs(*gamma) {
                    let buf = ensure(sweep, gamma.0, f);
                    for r in 0..b {
                        for j in 0..f {
                            buf[j] = buf[j] + g[r * f + j] * xhat[r * f + j];
                        }
                    }
                }
                if needs(*beta) {
                    let buf = ensure(sweep, beta.0, f);
                    for r in 0..b {
                        for j in 0..f {
                            buf[j] = buf[j] + g[r * f + j];
                        }
                    }
                }
                if needs(*x) {
                    let gd = self.nodes[gamma.0].value.data();
                    let buf = ensure(sweep, x.0, b * f);
                    if *training {
                        // dx = gamma*invstd/B * (B*g - sum(g) - xhat*sum(g*xhat))
                        // per feature column.
                        let nb = F::from_f64(b as f64);
                        for j in 0..f {
                            let mut sum_g = F::zero();
                            let mut sum_gx = F::zero();
                            for r in 0..b {
                                sum_g = sum_g + g[r * f + j];
                                sum_gx = sum_gx + g[r * f + j] * xhat[r * f + j];
                            }
                            let k = gd[j] * invstd[j] / nb;
                            for r in 0..b {
                                let t = nb * g[r * f + j] - sum_g - xhat[r * f + j] * sum_gx;
                                buf[r * f + j] = buf[r * f + j] + k * t;
                            }
                        }
                    } else {
                        for r in 0..b {
                            for j in 0..f {
                                buf[r * f + j] =
                                    buf[r * f + j] + g[r * f + j] * gd[j] * invstd[j];
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if needs(*logits) {
                    let dims = self.nodes[logits.0].value.dims();
                    let (b, c) = (dims[0], dims[1]);
                    let inv_b = F::one() / F::from_f64(b as f64);
                    let buf = ensure(sweep, logits.0, b * c);
                    let up = g[0];
                    for r in 0..b {
                        for j in 0..c {
                            let onehot = if labels[r] as usize == j {
                                F::one()
                            } else {
                                F::zero()
                            };
                            buf[r * c + j] =
                                buf[r * c + j] + up * (probs[r * c + j] - onehot) * inv_b;
                        }
                    }
                }
            }
            Op::KernelApply { kernel, g: gid, bias } => {
                let kv = &self.nodes[kernel.0].value;
                let gv = &self.nodes[gid.0].value;
                let (fout, fin, m) = (kv.dims()[0], kv.dims()[1], kv.dims()[2]);
                let s = gv.dims()[0];
                let mf = m * fin;
                if needs(*gid) {
                    // dG = g (s x fout) * W^T, W = repacked kernel (mf x fout)
                    let w = repack_kernel(kv.data(), fout, fin, m);
                    let buf = ensure(sweep, gid.0, s * mf);
                    F::gemm(
                        s, fout, mf,
                        F::one(),
                        g, fout as isize, 1,
                        &w, 1, fout as isize,
                        F::one(),
                        buf, mf as isize, 1,
                    );
                }
                if needs(*kernel) {
                    // dW = G^T (mf x s) * g (s x fout), then unpack.
                    let mut dw = vec![F::zero(); mf * fout];
                    F::gemm(
                        mf, s, fout,
                        F::one(),
                        gv.data(), 1, mf as isize,
                        g, fout as isize, 1,
                        F::zero(),
                        &mut dw, fout as isize, 1,
                    );
                    let buf = ensure(sweep, kernel.0, fout * fin * m);
                    for mi in 0..m {
                        for fi in 0..fin {
                            for o in 0..fout {
                                let dst = o * fin * m + fi * m + mi;
                                buf[dst] = buf[dst] + dw[(mi * fin + fi) * fout + o];
                            }
                        }
                    }
                }
                if needs(*bias) {
                    let buf = ensure(sweep, bias.0, fout);
                    for r in 0..s {
                        for o in 0..fout {
                            buf[o] = buf[o] + g[r * fout + o];
                        }
                    }
                }
            }
        }
    }
}

/// Repack `k[o,f,m]` (row-major `fout x fin x m`) into `w[(m*fin+f), o]`.
fn repack_kernel<F: Real>(k: &[F], fout: usize, fin: usize, m: usize) -> Vec<F> {
    let mut w = vec![F::zero(); m * fin * fout];
    for o in 0..fout {
        for f in 0..fin {
            for mi in 0..m {
                w[(mi * fin + f) * fout + o] = k[o * fin * m + f * m + mi];
            }
        }
    }
    w
}

fn ensure<'a, F: Real>(sweep: &'a mut [Option<Vec<F>>], idx: usize, n: usize) -> &'a mut Vec<F> {
    let slot = &mut sweep[idx];
    if slot.is_none() {
        *slot = Some(vec![F::zero(); n]);
    }
    slot.as_mut().unwrap()
}

fn accumulate<F: Real>(slot: &mut Option<Vec<F>>, g: &[F]) {
    match slot {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e = *e + *v;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}
