//! Operation tape: forward recording and the reverse gradient sweep.

use super::{Tensor, TensorError};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Affine { x: NodeId, mul: f64 },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    Relu { x: NodeId },
    Log { x: NodeId },
    Clamp { x: NodeId, lo: f64, hi: f64 },
    SoftmaxLast { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    ConcatLast { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    SliceRows { x: NodeId, start: usize, len: usize },
    Transpose { x: NodeId },
    RepeatRows { x: NodeId, times: usize },
    Sum { x: NodeId },
}

struct Node {
    tensor: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a computation as a topologically ordered list of operations.
///
/// A tape is confined to a single thread for its lifetime. Gradients
/// accumulate (sum) into leaves across repeated `backward` calls until
/// [`Tape::zero_grads`] clears them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers `tensor` as a leaf. Gradients are accumulated into it during
    /// `backward` only when `requires_grad` is set.
    pub fn leaf(&mut self, mut tensor: Tensor, requires_grad: bool) -> NodeId {
        tensor.requires_grad = requires_grad;
        tensor.grad = None;
        self.push(tensor, Op::Leaf, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    /// Gradient accumulated into a leaf; `None` until `backward` has reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    /// Clears all accumulated leaf gradients.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }

    fn push(&mut self, mut tensor: Tensor, op: Op, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        tensor.node_id = Some(id);
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    fn data_of(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].tensor.data()
    }

    // ── Forward operations ───────────────────────────────────────────────

    /// Matrix product. Both operands are at least rank 2; leading (batch)
    /// extents must match, or one operand may be a plain matrix shared across
    /// the other's batch.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (batch, m, k, n, a_batched, b_batched) =
            matmul_dims(self.shape_of(a), self.shape_of(b))?;
        let ad = self.data_of(a);
        let bd = self.data_of(b);
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let asl = &ad[if a_batched { bi * m * k } else { 0 }..][..m * k];
            let bsl = &bd[if b_batched { bi * k * n } else { 0 }..][..k * n];
            matmul_into(asl, bsl, m, k, n, &mut out[bi * m * n..][..m * n]);
        }
        let mut shape: Vec<usize> = if a_batched {
            self.shape_of(a)[..self.shape_of(a).len() - 2].to_vec()
        } else if b_batched {
            self.shape_of(b)[..self.shape_of(b).len() - 2].to_vec()
        } else {
            Vec::new()
        };
        shape.push(m);
        shape.push(n);
        let t = Tensor::new(shape, out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::MatMul { a, b }, needs))
    }

    /// Elementwise sum. `b` may have a shape that is a trailing suffix of
    /// `a`'s shape, in which case it is broadcast over the leading axes
    /// (e.g. a bias row added to every row of a matrix).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.broadcast_binary(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    /// Elementwise product with the same broadcast rule as [`Tape::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.broadcast_binary(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    /// `mul * x + add`, elementwise with scalar constants.
    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let data = self.data_of(x).iter().map(|v| mul * v + add).collect();
        let t = Tensor::new(self.shape_of(x).to_vec(), data).expect("affine preserves shape");
        let needs = self.needs(x);
        self.push(t, Op::Affine { x, mul }, needs)
    }

    /// Multiplication by a scalar constant.
    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.affine(x, c, 0.0)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, sigmoid_scalar, |x| Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::tanh, |x| Op::Tanh { x })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.max(0.0), |x| Op::Relu { x })
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::ln, |x| Op::Log { x })
    }

    /// Clamps into `[lo, hi]`; gradient passes only strictly inside the range.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(x, |v| v.clamp(lo, hi), |x| Op::Clamp { x, lo, hi })
    }

    /// Numerically stabilized softmax over the last axis.
    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape_of(x).to_vec();
        let n = *shape.last().expect("tensor rank >= 1");
        let xd = self.data_of(x);
        let mut out = vec![0.0; xd.len()];
        for (xs, os) in xd.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, v) in os.iter_mut().zip(xs) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in os.iter_mut() {
                *o /= sum;
            }
        }
        let t = Tensor::new(shape, out).expect("softmax preserves shape");
        let needs = self.needs(x);
        self.push(t, Op::SoftmaxLast { x }, needs)
    }

    /// Per-slice normalization over the last axis to zero mean and unit
    /// variance (population variance, `eps` inside the square root), followed
    /// by the affine map `gamma * xhat + beta`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let shape = self.shape_of(x).to_vec();
        let f = *shape.last().expect("tensor rank >= 1");
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.shape_of(id) != [f] {
                return Err(TensorError::ShapeMismatch {
                    op: if name == "gamma" {
                        "layer_norm gamma"
                    } else {
                        "layer_norm beta"
                    },
                    lhs: shape,
                    rhs: self.shape_of(id).to_vec(),
                });
            }
        }
        let xd = self.data_of(x);
        let gd = self.data_of(gamma).to_vec();
        let bd = self.data_of(beta).to_vec();
        let mut out = vec![0.0; xd.len()];
        for (xs, os) in xd.chunks_exact(f).zip(out.chunks_exact_mut(f)) {
            let mean = xs.iter().sum::<f64>() / f as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..f {
                os[j] = gd[j] * (xs[j] - mean) * inv + bd[j];
            }
        }
        let t = Tensor::new(shape, out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, eps }, needs))
    }

    /// Concatenation along the last axis; all parts share the leading extents.
    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let first = *parts.first().ok_or(TensorError::EmptyInput {
            op: "concat_last",
        })?;
        let lead = self.shape_of(first)[..self.shape_of(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape_of(p);
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_last",
                    lhs: self.shape_of(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.data_of(p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, out)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            t,
            Op::ConcatLast {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Concatenation along the first axis; all parts share the trailing extents.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let first = *parts.first().ok_or(TensorError::EmptyInput {
            op: "concat_rows",
        })?;
        let trail = self.shape_of(first)[1..].to_vec();
        let mut lead = 0;
        for &p in parts {
            let s = self.shape_of(p);
            if s.is_empty() || s[1..] != trail[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape_of(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            lead += s[0];
        }
        let mut out = Vec::with_capacity(lead * trail.iter().product::<usize>());
        for &p in parts {
            out.extend_from_slice(self.data_of(p));
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&trail);
        let t = Tensor::new(shape, out)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            t,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Contiguous block of `len` rows starting at `start` (first axis).
    pub fn slice_rows(
        &mut self,
        x: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let shape = self.shape_of(x).to_vec();
        if shape.is_empty() || start + len > shape[0] || len == 0 {
            return Err(TensorError::InvalidShape {
                op: "slice_rows",
                shape,
                reason: format!("rows {start}..{} out of range", start + len),
            });
        }
        let stride: usize = shape[1..].iter().product();
        let data = self.data_of(x)[start * stride..(start + len) * stride].to_vec();
        let mut out_shape = vec![len];
        out_shape.extend_from_slice(&shape[1..]);
        let t = Tensor::new(out_shape, data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::SliceRows { x, start, len }, needs))
    }

    /// Matrix transpose (rank 2 only).
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.shape_of(x).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape,
                reason: "rank 2 required".into(),
            });
        }
        let (m, n) = (shape[0], shape[1]);
        let xd = self.data_of(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Transpose { x }, needs))
    }

    /// Repeats a single-row tensor `[1, ..]` into `[times, ..]`.
    pub fn repeat_rows(&mut self, x: NodeId, times: usize) -> Result<NodeId, TensorError> {
        let shape = self.shape_of(x).to_vec();
        if shape.first() != Some(&1) || times == 0 {
            return Err(TensorError::InvalidShape {
                op: "repeat_rows",
                shape,
                reason: format!("leading extent must be 1, times = {times}"),
            });
        }
        let xd = self.data_of(x);
        let mut out = Vec::with_capacity(xd.len() * times);
        for _ in 0..times {
            out.extend_from_slice(xd);
        }
        let mut out_shape = vec![times];
        out_shape.extend_from_slice(&shape[1..]);
        let t = Tensor::new(out_shape, out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::RepeatRows { x, times }, needs))
    }

    /// Full reduction to a `[1]`-shaped scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.data_of(x).iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, needs)
    }

    fn unary(
        &mut self,
        x: NodeId,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(NodeId) -> Op,
    ) -> NodeId {
        let data = self.data_of(x).iter().map(|&v| f(v)).collect();
        let t = Tensor::new(self.shape_of(x).to_vec(), data).expect("unary preserves shape");
        let needs = self.needs(x);
        self.push(t, op(x), needs)
    }

    fn broadcast_binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(NodeId, NodeId) -> Op,
    ) -> Result<NodeId, TensorError> {
        let (la, lb) = broadcast_check(name, self.shape_of(a), self.shape_of(b))?;
        let ad = self.data_of(a);
        let bd = self.data_of(b);
        let mut out = vec![0.0; la];
        for (chunk, o) in ad.chunks_exact(lb).zip(out.chunks_exact_mut(lb)) {
            for j in 0..lb {
                o[j] = f(chunk[j], bd[j]);
            }
        }
        let t = Tensor::new(self.shape_of(a).to_vec(), out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, op(a, b), needs))
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse-topological gradient sweep from a scalar loss. Leaf gradients
    /// accumulate; repeated calls without [`Tape::zero_grads`] sum up.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        let loss_idx = loss.0;
        if self.nodes[loss_idx].tensor.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss_idx].tensor.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss_idx).map(|_| None).collect();
        adj[loss_idx] = Some(vec![1.0]);

        for i in (0..=loss_idx).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    let tensor = &mut self.nodes[i].tensor;
                    if tensor.requires_grad {
                        let grad = tensor.grad.get_or_insert_with(|| vec![0.0; g.len()]);
                        for (dst, src) in grad.iter_mut().zip(&g) {
                            *dst += src;
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let (batch, m, k, n, a_batched, b_batched) =
                        matmul_dims(self.shape_of(a), self.shape_of(b))
                            .expect("validated at record time");
                    if self.needs(a) {
                        let bd = self.data_of(b);
                        let mut da = vec![0.0; self.data_of(a).len()];
                        for bi in 0..batch {
                            let gs = &g[bi * m * n..][..m * n];
                            let bsl = &bd[if b_batched { bi * k * n } else { 0 }..][..k * n];
                            let dst = &mut da[if a_batched { bi * m * k } else { 0 }..][..m * k];
                            // dA = dC · Bᵀ
                            for i2 in 0..m {
                                for p in 0..k {
                                    let mut s = 0.0;
                                    for j in 0..n {
                                        s += gs[i2 * n + j] * bsl[p * n + j];
                                    }
                                    dst[i2 * k + p] += s;
                                }
                            }
                        }
                        accumulate(&mut adj[a.0], &da);
                    }
                    if self.needs(b) {
                        let ad = self.data_of(a);
                        let mut db = vec![0.0; self.data_of(b).len()];
                        for bi in 0..batch {
                            let gs = &g[bi * m * n..][..m * n];
                            let asl = &ad[if a_batched { bi * m * k } else { 0 }..][..m * k];
                            let dst = &mut db[if b_batched { bi * k * n } else { 0 }..][..k * n];
                            // dB = Aᵀ · dC
                            for p in 0..k {
                                for j in 0..n {
                                    let mut s = 0.0;
                                    for i2 in 0..m {
                                        s += asl[i2 * k + p] * gs[i2 * n + j];
                                    }
                                    dst[p * n + j] += s;
                                }
                            }
                        }
                        accumulate(&mut adj[b.0], &db);
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(a) {
                        accumulate(&mut adj[a.0], &g);
                    }
                    if self.needs(b) {
                        let nb = self.data_of(b).len();
                        let mut db = vec![0.0; nb];
                        for chunk in g.chunks_exact(nb) {
                            for (d, gv) in db.iter_mut().zip(chunk) {
                                *d += gv;
                            }
                        }
                        accumulate(&mut adj[b.0], &db);
                    }
                }
                Op::Mul { a, b } => {
                    let nb = self.data_of(b).len();
                    if self.needs(a) {
                        let bd = self.data_of(b);
                        let da: Vec<f64> = g
                            .iter()
                            .enumerate()
                            .map(|(idx, gv)| gv * bd[idx % nb])
                            .collect();
                        accumulate(&mut adj[a.0], &da);
                    }
                    if self.needs(b) {
                        let ad = self.data_of(a);
                        let mut db = vec![0.0; nb];
                        for (idx, gv) in g.iter().enumerate() {
                            db[idx % nb] += gv * ad[idx];
                        }
                        accumulate(&mut adj[b.0], &db);
                    }
                }
                Op::Affine { x, mul } => {
                    if self.needs(x) {
                        let dx: Vec<f64> = g.iter().map(|gv| gv * mul).collect();
                        accumulate(&mut adj[x.0], &dx);
                    }
                }
                Op::Sigmoid { x } => {
                    if self.needs(x) {
                        let out = self.data_of(NodeId(i));
                        let dx: Vec<f64> = g
                            .iter()
                            .zip(out)
                            .map(|(gv, s)| gv * s * (1.0 - s))
                            .collect();
                        accumulate(&mut adj[x.0], &dx);
                    }
                }
                Op::Tanh { x } => {
                    if self.needs(x) {
                        let out = self.data_of(NodeId(i));
                        let dx: Vec<f64> =
                            g.iter().zip(out).map(|(gv, t)| gv * (1.0 - t * t)).collect();
                        accumulate(&mut adj[x.0], &dx);
                    }
                }
                Op::Relu { x } => {
                    if self.needs(x) {
                        let xd = self.data_of(x);
                        let dx: Vec<f64> = g
                            .iter()
                            .zip(xd)
                            .map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 })
                            .collect();
                        accumulate(&mut adj[x.0], &dx);
                    }
                }
                Op::Log { x } => {
                    if self.needs(x) {
                        let xd = self.data_of(x);
                        let dx: Vec<f64> = g.iter().zip(xd).map(|(gv, v)| gv / v).collect();
                        accumulate(&mut adj[x.0], &dx);
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    if self.needs(x) {
                        let xd = self.data_of(x);
                        let dx: Vec<f64> = g
                            .iter()
                            .zip(xd)
                            .map(|(gv, &v)| if v > lo && v < hi { *gv } else { 0.0 })
                            .collect();
                        accumulate(&mut adj[x.0], &dx);
                    }
                }
                Op::SoftmaxLast { x } => {
                    if self.needs(x) {
                        let out = self.data_of(NodeId(i));
                        let n = *self.shape_of(NodeId(i)).last().unwrap();
                        let mut dx = vec![0.0; out.len()];
                        for ((ss, gs), ds) in out
                            .chunks_exact(n)
                            .zip(g.chunks_exact(n))
                            .zip(dx.chunks_exact_mut(n))
                        {
                            let dot: f64 = ss.iter().zip(gs).map(|(s, gv)| s * gv).sum();
                            for j in 0..n {
                                ds[j] = ss[j] * (gs[j] - dot);
                            }
                        }
                        accumulate(&mut adj[x.0], &dx);
                    }
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let f = *self.shape_of(x).last().unwrap();
                    let xd = self.data_of(x);
                    let gd = self.data_of(gamma);
                    let mut dx = vec![0.0; xd.len()];
                    let mut dgamma = vec![0.0; f];
                    let mut dbeta = vec![0.0; f];
                    for (slice_idx, (xs, gs)) in
                        xd.chunks_exact(f).zip(g.chunks_exact(f)).enumerate()
                    {
                        let mean = xs.iter().sum::<f64>() / f as f64;
                        let var =
                            xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = xs.iter().map(|v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> = gs.iter().zip(gd).map(|(gv, ga)| gv * ga).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / f as f64;
                        let mean_dxhat_xhat =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / f as f64;
                        for j in 0..f {
                            dx[slice_idx * f + j] =
                                inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                            dgamma[j] += gs[j] * xhat[j];
                            dbeta[j] += gs[j];
                        }
                    }
                    if self.needs(x) {
                        accumulate(&mut adj[x.0], &dx);
                    }
                    if self.needs(gamma) {
                        accumulate(&mut adj[gamma.0], &dgamma);
                    }
                    if self.needs(beta) {
                        accumulate(&mut adj[beta.0], &dbeta);
                    }
                }
                Op::ConcatLast { parts } => {
                    let total = *self.shape_of(NodeId(i)).last().unwrap();
                    let rows = self.data_of(NodeId(i)).len() / total;
                    let mut offset = 0;
                    for &p in &parts {
                        let w = *self.shape_of(p).last().unwrap();
                        if self.needs(p) {
                            let mut dp = vec![0.0; rows * w];
                            for r in 0..rows {
                                dp[r * w..(r + 1) * w]
                                    .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                            }
                            accumulate(&mut adj[p.0], &dp);
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in &parts {
                        let len = self.data_of(p).len();
                        if self.needs(p) {
                            accumulate(&mut adj[p.0], &g[offset..offset + len]);
                        }
                        offset += len;
                    }
                }
                Op::SliceRows { x, start, len } => {
                    if self.needs(x) {
                        let stride: usize = self.shape_of(x)[1..].iter().product();
                        let mut dx = vec![0.0; self.data_of(x).len()];
                        dx[start * stride..(start + len) * stride].copy_from_slice(&g);
                        accumulate(&mut adj[x.0], &dx);
                    }
                }
                Op::Transpose { x } => {
                    if self.needs(x) {
                        let shape = self.shape_of(x);
                        let (m, n) = (shape[0], shape[1]);
                        let mut dx = vec![0.0; m * n];
                        for i2 in 0..n {
                            for j in 0..m {
                                dx[j * n + i2] = g[i2 * m + j];
                            }
                        }
                        accumulate(&mut adj[x.0], &dx);
                    }
                }
                Op::RepeatRows { x, times } => {
                    if self.needs(x) {
                        let len = self.data_of(x).len();
                        let mut dx = vec![0.0; len];
                        for t in 0..times {
                            for j in 0..len {
                                dx[j] += g[t * len + j];
                            }
                        }
                        accumulate(&mut adj[x.0], &dx);
                    }
                }
                Op::Sum { x } => {
                    if self.needs(x) {
                        let dx = vec![g[0]; self.data_of(x).len()];
                        accumulate(&mut adj[x.0], &dx);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: &[f64]) {
    match slot {
        Some(existing) => {
            for (dst, src) in existing.iter_mut().zip(contribution) {
                *dst += src;
            }
        }
        None => *slot = Some(contribution.to_vec()),
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Validates matmul operand shapes. Returns (batch, m, k, n, a_batched, b_batched).
fn matmul_dims(
    a: &[usize],
    b: &[usize],
) -> Result<(usize, usize, usize, usize, bool, bool), TensorError> {
    let err = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, ka) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if ka != kb {
        return Err(err());
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let batch = match (a_batch.is_empty(), b_batch.is_empty()) {
        (true, true) => 1,
        (false, true) => a_batch.iter().product(),
        (true, false) => b_batch.iter().product(),
        (false, false) => {
            if a_batch != b_batch {
                return Err(err());
            }
            a_batch.iter().product()
        }
    };
    Ok((batch, m, ka, n, !a_batch.is_empty(), !b_batch.is_empty()))
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// Checks the suffix-broadcast rule; returns (numel(a), numel(b)).
fn broadcast_check(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<(usize, usize), TensorError> {
    if b.len() > a.len() || a[a.len() - b.len()..] != b[..] {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok((a.iter().product(), b.iter().product()))
}
