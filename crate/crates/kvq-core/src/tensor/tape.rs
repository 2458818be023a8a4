//! Reverse-mode autodiff tape.
//!
//! Every operation appends a node holding the forward value and the parent
//! links needed for the backward sweep. Nodes are appended in evaluation
//! order, so reverse iteration is a topological order and each node is
//! visited exactly once. All loops run in a fixed order: identical inputs
//! produce bit-identical outputs.

use std::sync::Arc;

use crate::error::{KvqError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Exp(TensorId),
    Sqrt(TensorId),
    Gelu(TensorId),
    ClampMin(TensorId, f64),
    Scale(TensorId, f64),
    AddConst(TensorId),
    MatMul(TensorId, TensorId),
    /// Batched matmul; `transpose_b` multiplies by the transpose of each b slice.
    Bmm { a: TensorId, b: TensorId, transpose_b: bool },
    Transpose2d(TensorId),
    Reshape(TensorId),
    SumAll(TensorId),
    MeanAll(TensorId),
    SumAxis(TensorId, usize),
    Softmax(TensorId, usize),
    AvgPool { x: TensorId, window: Vec<usize> },
    Resample3d(TensorId),
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    Linear { x: TensorId, w: TensorId, b: Option<TensorId> },
    IndexSelect { x: TensorId, axis: usize, indices: Arc<Vec<usize>> },
    GatherFlat { x: TensorId, indices: Arc<Vec<usize>> },
    Concat { parts: Vec<TensorId>, axis: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation graph: owns all node values and replays them in reverse for
/// gradient accumulation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<TensorId>,
}

/// Gradient buffers produced by [`Tape::backward`]. Every parameter leaf has
/// an entry; leaves the loss does not reach get zeros.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to node `id`, if one was accumulated.
    pub fn wrt(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf that does not require gradients.
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.leaf(t, false)
    }

    /// Inserts a leaf that accumulates gradients during backward.
    pub fn param(&mut self, t: Tensor) -> TensorId {
        self.leaf(t, true)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: requires_grad });
        if requires_grad {
            self.params.push(id);
        }
        id
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[TensorId]) -> TensorId {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { value, op, needs_grad: needs });
        id
    }

    // ── elementwise binaries (same shape, or one scalar operand) ──────

    fn binary_out_shape(&self, a: TensorId, b: TensorId, name: &str) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok(sa.to_vec())
        } else if self.data(b).len() == 1 {
            Ok(sa.to_vec())
        } else if self.data(a).len() == 1 {
            Ok(sb.to_vec())
        } else {
            Err(KvqError::shape(format!("{name}: incompatible shapes {sa:?} vs {sb:?}")))
        }
    }

    fn binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let shape = self.binary_out_shape(a, b, name)?;
        let da = self.data(a);
        let db = self.data(b);
        let out = if da.len() == db.len() {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if db.len() == 1 {
            let y = db[0];
            da.iter().map(|&x| f(x, y)).collect()
        } else {
            let x = da[0];
            db.iter().map(|&y| f(x, y)).collect()
        };
        Ok(self.push(Tensor::new(shape, out)?, op, &[a, b]))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise division; the divisor must be nonzero everywhere.
    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    // ── elementwise unaries ────────────────────────────────────────────

    fn unary(&mut self, a: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let out: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let t = Tensor::new(shape, out).expect("unary preserves shape");
        self.push(t, op, &[a])
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Elementwise square root; gradient requires strictly positive inputs.
    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, gelu_fwd, Op::Gelu(a))
    }

    /// max(x, c); subgradient 0 at the kink.
    pub fn clamp_min(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(a, |x| x.max(c), Op::ClampMin(a, c))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.clamp_min(a, 0.0)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(a, |x| x + c, Op::AddConst(a))
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.scale(a, -1.0)
    }

    // ── linear algebra ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(KvqError::shape(format!("matmul: need 2-d operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = (sb[0], sb[1]);
        if k != k2 {
            return Err(KvqError::shape(format!("matmul: inner dims {k} vs {k2}")));
        }
        let out = matmul_kernel(self.data(a), self.data(b), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched matmul over leading dim: a `[B,m,k]` times b `[B,k,n]`
    /// (`[B,n,k]` when `transpose_b`), giving `[B,m,n]`.
    pub fn bmm(&mut self, a: TensorId, b: TensorId, transpose_b: bool) -> Result<TensorId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(KvqError::shape(format!("bmm: need [B,m,k]x[B,k,n], got {sa:?} and {sb:?}")));
        }
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let (n, kb) = if transpose_b { (sb[1], sb[2]) } else { (sb[2], sb[1]) };
        if k != kb {
            return Err(KvqError::shape(format!("bmm: inner dims {k} vs {kb}")));
        }
        let da = self.data(a);
        let db = self.data(b);
        let mut out = vec![0.0; bsz * m * n];
        for i in 0..bsz {
            let asl = &da[i * m * k..(i + 1) * m * k];
            let bsl = &db[i * k * n..(i + 1) * k * n];
            let osl = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                matmul_nt_into(asl, bsl, m, k, n, osl);
            } else {
                matmul_into(asl, bsl, m, k, n, osl);
            }
        }
        Ok(self.push(
            Tensor::new(vec![bsz, m, n], out)?,
            Op::Bmm { a, b, transpose_b },
            &[a, b],
        ))
    }

    pub fn transpose2d(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(KvqError::shape(format!("transpose2d: need rank 2, got {sa:?}")));
        }
        let (m, n) = (sa[0], sa[1]);
        let da = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = da[i * n + j];
            }
        }
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose2d(a), &[a]))
    }

    /// Applies `x @ w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: Option<TensorId>) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w);
        if sx.is_empty() || sw.len() != 2 {
            return Err(KvqError::shape(format!("linear: x {sx:?} w {sw:?}")));
        }
        let k = *sx.last().unwrap();
        if sw[0] != k {
            return Err(KvqError::shape(format!("linear: x last dim {k} vs w rows {}", sw[0])));
        }
        let n = sw[1];
        if let Some(bid) = b {
            let sb = self.shape(bid);
            if sb != [n] {
                return Err(KvqError::shape(format!("linear: bias {sb:?}, expected [{n}]")));
            }
        }
        let rows = self.data(x).len() / k;
        let mut out = matmul_kernel(self.data(x), self.data(w), rows, k, n);
        if let Some(bid) = b {
            let bias = self.data(bid);
            for r in 0..rows {
                for (o, &bv) in out[r * n..(r + 1) * n].iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = n;
        let parents: Vec<TensorId> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Linear { x, w, b }, &parents))
    }

    // ── shape manipulation ─────────────────────────────────────────────

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.data(a).len() {
            return Err(KvqError::shape(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape(a),
                shape
            )));
        }
        let t = Tensor::new(shape, self.data(a).to_vec())?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Selects `indices` along `axis`; indices may repeat.
    pub fn index_select(
        &mut self,
        a: TensorId,
        axis: usize,
        indices: Arc<Vec<usize>>,
    ) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(KvqError::shape(format!("index_select: axis {axis} of {sa:?}")));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= sa[axis]) {
            return Err(KvqError::contract(format!(
                "index_select: index {bad} out of range for axis of size {}",
                sa[axis]
            )));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let da = self.data(a);
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            let base = o * sa[axis] * inner;
            for &src in indices.iter() {
                out.extend_from_slice(&da[base + src * inner..base + (src + 1) * inner]);
            }
        }
        let mut out_shape = sa;
        out_shape[axis] = indices.len();
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::IndexSelect { x: a, axis, indices },
            &[a],
        ))
    }

    /// Arbitrary reindexing: `out.flat[i] = x.flat[indices[i]]`, reshaped to
    /// `out_shape`. Backward scatter-adds, so repeated indices accumulate and
    /// ungathered positions receive exactly zero.
    pub fn gather_flat(
        &mut self,
        a: TensorId,
        indices: Arc<Vec<usize>>,
        out_shape: Vec<usize>,
    ) -> Result<TensorId> {
        let numel: usize = out_shape.iter().product();
        if numel != indices.len() {
            return Err(KvqError::shape(format!(
                "gather_flat: {} indices vs out shape {:?}",
                indices.len(),
                out_shape
            )));
        }
        let da = self.data(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= da.len()) {
            return Err(KvqError::contract(format!(
                "gather_flat: index {bad} out of range for {} elements",
                da.len()
            )));
        }
        let out: Vec<f64> = indices.iter().map(|&i| da[i]).collect();
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::GatherFlat { x: a, indices },
            &[a],
        ))
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(KvqError::contract("concat: no parts".to_string()));
        }
        let s0 = self.shape(parts[0]).to_vec();
        if axis >= s0.len() {
            return Err(KvqError::shape(format!("concat: axis {axis} of {s0:?}")));
        }
        let mut axis_total = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != s0.len()
                || sp.iter().zip(&s0).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(KvqError::shape(format!("concat: {sp:?} vs {s0:?} on axis {axis}")));
            }
            axis_total += sp[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for &p in parts {
                let ap = self.shape(p)[axis];
                let dp = self.data(p);
                out.extend_from_slice(&dp[o * ap * inner..(o + 1) * ap * inner]);
            }
        }
        let mut out_shape = s0;
        out_shape[axis] = axis_total;
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat { parts: parts.to_vec(), axis },
            parts,
        ))
    }

    // ── reductions ─────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let d = self.data(a);
        let s: f64 = d.iter().sum();
        let m = s / d.len() as f64;
        self.push(Tensor::scalar(m), Op::MeanAll(a), &[a])
    }

    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(KvqError::shape(format!("sum_axis: axis {axis} of {sa:?}")));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let da = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..sa[axis] {
                let base = (o * sa[axis] + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += da[base + i];
                }
            }
        }
        let mut out_shape: Vec<usize> = sa;
        out_shape.remove(axis);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis(a, axis), &[a]))
    }

    // ── structured ops ─────────────────────────────────────────────────

    /// Softmax along `axis`, stabilized by max subtraction; slices along the
    /// axis are nonnegative and sum to one.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(KvqError::shape(format!("softmax: axis {axis} of {sa:?}")));
        }
        let (outer, len, inner) = axis_split(&sa, axis);
        let da = self.data(a);
        let mut out = vec![0.0; da.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(da[at(j)]);
                }
                let mut denom = 0.0;
                for j in 0..len {
                    let e = (da[at(j)] - mx).exp();
                    out[at(j)] = e;
                    denom += e;
                }
                for j in 0..len {
                    out[at(j)] /= denom;
                }
            }
        }
        Ok(self.push(Tensor::new(sa, out)?, Op::Softmax(a, axis), &[a]))
    }

    /// Mean pooling with one window size per axis; every pooled axis must be
    /// divisible by its window (no implicit padding).
    pub fn avg_pool(&mut self, a: TensorId, window: &[usize]) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if window.len() != sa.len() {
            return Err(KvqError::shape(format!(
                "avg_pool: window rank {} vs tensor rank {}",
                window.len(),
                sa.len()
            )));
        }
        if window.iter().any(|&w| w == 0) {
            return Err(KvqError::shape("avg_pool: zero window".to_string()));
        }
        if sa.iter().zip(window).any(|(&d, &w)| d % w != 0) {
            return Err(KvqError::shape(format!(
                "avg_pool: dims {sa:?} not divisible by window {window:?}"
            )));
        }
        let out_shape: Vec<usize> = sa.iter().zip(window).map(|(&d, &w)| d / w).collect();
        let out_numel: usize = out_shape.iter().product();
        let wsize: usize = window.iter().product();
        let da = self.data(a);
        let mut out = vec![0.0; out_numel];
        for (flat, &v) in da.iter().enumerate() {
            out[pool_target(&sa, window, &out_shape, flat)] += v;
        }
        let inv = 1.0 / wsize as f64;
        for v in &mut out {
            *v *= inv;
        }
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::AvgPool { x: a, window: window.to_vec() },
            &[a],
        ))
    }

    /// Trilinear resampling of a rank-3 tensor to `target` with corner
    /// alignment; identical shapes reproduce the input exactly.
    pub fn resample3d(&mut self, a: TensorId, target: &[usize; 3]) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 {
            return Err(KvqError::shape(format!("resample3d: need rank 3, got {sa:?}")));
        }
        if target.iter().any(|&d| d == 0) {
            return Err(KvqError::shape(format!("resample3d: zero target dim {target:?}")));
        }
        let da = self.data(a);
        let mut out = vec![0.0; target.iter().product()];
        let mut flat = 0;
        for ot in 0..target[0] {
            let (t0, t1, ft) = lerp_coords(ot, target[0], sa[0]);
            for oh in 0..target[1] {
                let (h0, h1, fh) = lerp_coords(oh, target[1], sa[1]);
                for ow in 0..target[2] {
                    let (w0, w1, fw) = lerp_coords(ow, target[2], sa[2]);
                    let mut acc = 0.0;
                    for (ti, wt) in [(t0, 1.0 - ft), (t1, ft)] {
                        if wt == 0.0 {
                            continue;
                        }
                        for (hi, wh) in [(h0, 1.0 - fh), (h1, fh)] {
                            if wh == 0.0 {
                                continue;
                            }
                            for (wi, ww) in [(w0, 1.0 - fw), (w1, fw)] {
                                if ww == 0.0 {
                                    continue;
                                }
                                acc += wt * wh * ww * da[(ti * sa[1] + hi) * sa[2] + wi];
                            }
                        }
                    }
                    out[flat] = acc;
                    flat += 1;
                }
            }
        }
        Ok(self.push(Tensor::new(target.to_vec(), out)?, Op::Resample3d(a), &[a]))
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let d = *sx
            .last()
            .ok_or_else(|| KvqError::shape("layer_norm: rank 0 input".to_string()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(KvqError::shape(format!(
                "layer_norm: gamma {:?} beta {:?}, expected [{d}]",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let dx = self.data(x);
        let dg = self.data(gamma);
        let db = self.data(beta);
        let rows = dx.len() / d;
        let mut out = vec![0.0; dx.len()];
        for r in 0..rows {
            let row = &dx[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv_std * dg[j] + db[j];
            }
        }
        Ok(self.push(
            Tensor::new(sx, out)?,
            Op::LayerNorm { x, gamma, beta, eps },
            &[x, gamma, beta],
        ))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Accumulates d(loss)/d(leaf) for every parameter leaf. The loss must be
    /// a scalar. Each node is visited once, in reverse insertion order.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients> {
        if self.data(loss).len() != 1 {
            return Err(KvqError::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        // Parameters the loss never reached get explicit zeros.
        for &p in &self.params {
            if grads[p.0].is_none() {
                grads[p.0] = Some(vec![0.0; self.data(p).len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.push_binary_grad(*a, g.to_vec(), grads);
                self.push_binary_grad(*b, g.to_vec(), grads);
            }
            Op::Sub(a, b) => {
                self.push_binary_grad(*a, g.to_vec(), grads);
                self.push_binary_grad(*b, g.iter().map(|v| -v).collect(), grads);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let gb = self.expand_operand(*b, g.len());
                    self.push_binary_grad(*a, g.iter().zip(gb).map(|(&gv, bv)| gv * bv).collect(), grads);
                }
                if self.wants(*b) {
                    let ga = self.expand_operand(*a, g.len());
                    self.push_binary_grad(*b, g.iter().zip(ga).map(|(&gv, av)| gv * av).collect(), grads);
                }
            }
            Op::Div(a, b) => {
                let bb = self.expand_operand(*b, g.len());
                if self.wants(*a) {
                    self.push_binary_grad(
                        *a,
                        g.iter().zip(&bb).map(|(&gv, &bv)| gv / bv).collect(),
                        grads,
                    );
                }
                if self.wants(*b) {
                    let aa = self.expand_operand(*a, g.len());
                    self.push_binary_grad(
                        *b,
                        g.iter()
                            .zip(aa)
                            .zip(&bb)
                            .map(|((&gv, av), &bv)| -gv * av / (bv * bv))
                            .collect(),
                        grads,
                    );
                }
            }
            Op::Exp(a) => {
                let out = node.value.data();
                self.add_grad(*a, g.iter().zip(out).map(|(&gv, &e)| gv * e), grads);
            }
            Op::Sqrt(a) => {
                let out = node.value.data();
                self.add_grad(*a, g.iter().zip(out).map(|(&gv, &s)| gv / (2.0 * s)), grads);
            }
            Op::Gelu(a) => {
                let din = self.data(*a);
                self.add_grad(*a, g.iter().zip(din).map(|(&gv, &x)| gv * gelu_bwd(x)), grads);
            }
            Op::ClampMin(a, c) => {
                let din = self.data(*a);
                self.add_grad(
                    *a,
                    g.iter().zip(din).map(|(&gv, &x)| if x > *c { gv } else { 0.0 }),
                    grads,
                );
            }
            Op::Scale(a, c) => {
                self.add_grad(*a, g.iter().map(|&gv| gv * c), grads);
            }
            Op::AddConst(a) => {
                self.add_grad(*a, g.iter().copied(), grads);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    matmul_nt_into(g, self.data(*b), m, n, k, &mut da);
                    self.add_grad(*a, da.into_iter(), grads);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    let db = matmul_tn(self.data(*a), g, m, k, n);
                    self.add_grad(*b, db.into_iter(), grads);
                }
            }
            Op::Bmm { a, b, transpose_b } => {
                let sa = self.shape(*a);
                let (bsz, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let da_all = self.data(*a);
                let db_all = self.data(*b);
                if self.wants(*a) {
                    let mut ga = vec![0.0; bsz * m * k];
                    for i in 0..bsz {
                        let gsl = &g[i * m * n..(i + 1) * m * n];
                        let bsl = &db_all[i * k * n..(i + 1) * k * n];
                        let out = &mut ga[i * m * k..(i + 1) * m * k];
                        if *transpose_b {
                            // y = a·bᵀ  ⇒  da = dy·b
                            matmul_into(gsl, bsl, m, n, k, out);
                        } else {
                            matmul_nt_into(gsl, bsl, m, n, k, out);
                        }
                    }
                    self.add_grad(*a, ga.into_iter(), grads);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; db_all.len()];
                    for i in 0..bsz {
                        let gsl = &g[i * m * n..(i + 1) * m * n];
                        let asl = &da_all[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if *transpose_b {
                            // y = a·bᵀ  ⇒  db = dyᵀ·a
                            matmul_tn_into(gsl, asl, m, n, k, out);
                        } else {
                            matmul_tn_into(asl, gsl, m, k, n, out);
                        }
                    }
                    self.add_grad(*b, gb.into_iter(), grads);
                }
            }
            Op::Transpose2d(a) => {
                let (n, m) = (node.value.shape()[0], node.value.shape()[1]);
                let mut ga = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        ga[j * n + i] = g[i * m + j];
                    }
                }
                self.add_grad(*a, ga.into_iter(), grads);
            }
            Op::Reshape(a) => {
                self.add_grad(*a, g.iter().copied(), grads);
            }
            Op::SumAll(a) => {
                let n = self.data(*a).len();
                self.add_grad(*a, std::iter::repeat(g[0]).take(n), grads);
            }
            Op::MeanAll(a) => {
                let n = self.data(*a).len();
                let gv = g[0] / n as f64;
                self.add_grad(*a, std::iter::repeat(gv).take(n), grads);
            }
            Op::SumAxis(a, axis) => {
                let sa = self.shape(*a);
                let (outer, len, inner) = axis_split(sa, *axis);
                let mut ga = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        let base = (o * len + j) * inner;
                        ga[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                self.add_grad(*a, ga.into_iter(), grads);
            }
            Op::Softmax(a, axis) => {
                let out = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut ga = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut dot = 0.0;
                        for j in 0..len {
                            dot += g[at(j)] * out[at(j)];
                        }
                        for j in 0..len {
                            ga[at(j)] = out[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                self.add_grad(*a, ga.into_iter(), grads);
            }
            Op::AvgPool { x, window } => {
                let sa = self.shape(*x);
                let out_shape = node.value.shape();
                let wsize: usize = window.iter().product();
                let inv = 1.0 / wsize as f64;
                let n = self.data(*x).len();
                let mut ga = vec![0.0; n];
                for (flat, gslot) in ga.iter_mut().enumerate() {
                    *gslot = g[pool_target(sa, window, out_shape, flat)] * inv;
                }
                self.add_grad(*x, ga.into_iter(), grads);
            }
            Op::Resample3d(a) => {
                let sa = self.shape(*a);
                let target = node.value.shape();
                let mut ga = vec![0.0; self.data(*a).len()];
                let mut flat = 0;
                for ot in 0..target[0] {
                    let (t0, t1, ft) = lerp_coords(ot, target[0], sa[0]);
                    for oh in 0..target[1] {
                        let (h0, h1, fh) = lerp_coords(oh, target[1], sa[1]);
                        for ow in 0..target[2] {
                            let (w0, w1, fw) = lerp_coords(ow, target[2], sa[2]);
                            let gv = g[flat];
                            flat += 1;
                            for (ti, wt) in [(t0, 1.0 - ft), (t1, ft)] {
                                if wt == 0.0 {
                                    continue;
                                }
                                for (hi, wh) in [(h0, 1.0 - fh), (h1, fh)] {
                                    if wh == 0.0 {
                                        continue;
                                    }
                                    for (wi, ww) in [(w0, 1.0 - fw), (w1, fw)] {
                                        if ww == 0.0 {
                                            continue;
                                        }
                                        ga[(ti * sa[1] + hi) * sa[2] + wi] += gv * wt * wh * ww;
                                    }
                                }
                            }
                        }
                    }
                }
                self.add_grad(*a, ga.into_iter(), grads);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let dx_in = self.data(*x);
                let dg_in = self.data(*gamma);
                let d = self.shape(*gamma)[0];
                let rows = dx_in.len() / d;
                let mut gx = vec![0.0; dx_in.len()];
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for r in 0..rows {
                    let row = &dx_in[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let dxhat: Vec<f64> =
                        grow.iter().zip(dg_in).map(|(&gv, &gm)| gv * gm).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        ggamma[j] += grow[j] * xhat[j];
                        gbeta[j] += grow[j];
                        gx[r * d + j] = inv_std / df
                            * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.add_grad(*x, gx.into_iter(), grads);
                self.add_grad(*gamma, ggamma.into_iter(), grads);
                self.add_grad(*beta, gbeta.into_iter(), grads);
            }
            Op::Linear { x, w, b } => {
                let k = self.shape(*w)[0];
                let n = self.shape(*w)[1];
                let rows = self.data(*x).len() / k;
                if self.wants(*x) {
                    let mut gx = vec![0.0; rows * k];
                    matmul_nt_into(g, self.data(*w), rows, n, k, &mut gx);
                    self.add_grad(*x, gx.into_iter(), grads);
                }
                if self.wants(*w) {
                    let gw = matmul_tn(self.data(*x), g, rows, k, n);
                    self.add_grad(*w, gw.into_iter(), grads);
                }
                if let Some(bid) = b {
                    if self.wants(*bid) {
                        let mut gb = vec![0.0; n];
                        for r in 0..rows {
                            for j in 0..n {
                                gb[j] += g[r * n + j];
                            }
                        }
                        self.add_grad(*bid, gb.into_iter(), grads);
                    }
                }
            }
            Op::IndexSelect { x, axis, indices } => {
                let sa = self.shape(*x);
                let inner: usize = sa[*axis + 1..].iter().product();
                let outer: usize = sa[..*axis].iter().product();
                let mut ga = vec![0.0; self.data(*x).len()];
                for o in 0..outer {
                    let in_base = o * sa[*axis] * inner;
                    let out_base = o * indices.len() * inner;
                    for (j, &src) in indices.iter().enumerate() {
                        let gsl = &g[out_base + j * inner..out_base + (j + 1) * inner];
                        let tsl = &mut ga[in_base + src * inner..in_base + (src + 1) * inner];
                        for (t, &gv) in tsl.iter_mut().zip(gsl) {
                            *t += gv;
                        }
                    }
                }
                self.add_grad(*x, ga.into_iter(), grads);
            }
            Op::GatherFlat { x, indices } => {
                let mut ga = vec![0.0; self.data(*x).len()];
                for (&src, &gv) in indices.iter().zip(g) {
                    ga[src] += gv;
                }
                self.add_grad(*x, ga.into_iter(), grads);
            }
            Op::Concat { parts, axis } => {
                let s_out = node.value.shape();
                let outer: usize = s_out[..*axis].iter().product();
                let inner: usize = s_out[*axis + 1..].iter().product();
                let total_axis = s_out[*axis];
                let mut offset = 0;
                for &p in parts {
                    let ap = self.shape(p)[*axis];
                    if self.wants(p) {
                        let mut gp = vec![0.0; self.data(p).len()];
                        for o in 0..outer {
                            let src = (o * total_axis + offset) * inner;
                            let dst = o * ap * inner;
                            gp[dst..dst + ap * inner]
                                .copy_from_slice(&g[src..src + ap * inner]);
                        }
                        self.add_grad(p, gp.into_iter(), grads);
                    }
                    offset += ap;
                }
            }
        }
    }

    fn wants(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Materializes a possibly-scalar operand to `n` elements for gradient math.
    fn expand_operand(&self, id: TensorId, n: usize) -> Vec<f64> {
        let d = self.data(id);
        if d.len() == n {
            d.to_vec()
        } else {
            vec![d[0]; n]
        }
    }

    /// Routes a full-size gradient to a binary operand, summing when the
    /// operand was a broadcast scalar.
    fn push_binary_grad(&self, id: TensorId, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        if !self.wants(id) {
            return;
        }
        let n = self.data(id).len();
        if n == g.len() {
            self.add_grad(id, g.into_iter(), grads);
        } else {
            self.add_grad(id, std::iter::once(g.iter().sum()), grads);
        }
    }

    fn add_grad(
        &self,
        id: TensorId,
        g: impl Iterator<Item = f64>,
        grads: &mut [Option<Vec<f64>>],
    ) {
        if !self.wants(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            slot => *slot = Some(g.collect()),
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Output slot for pooled input position `flat`.
fn pool_target(in_shape: &[usize], window: &[usize], out_shape: &[usize], mut flat: usize) -> usize {
    let mut out = 0;
    let rank = in_shape.len();
    let mut coords = [0usize; 8];
    debug_assert!(rank <= 8);
    for d in (0..rank).rev() {
        coords[d] = flat % in_shape[d];
        flat /= in_shape[d];
    }
    for d in 0..rank {
        out = out * out_shape[d] + coords[d] / window[d];
    }
    out
}

/// Align-corners sample position: floor/ceil source indices plus fraction.
fn lerp_coords(o: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    if out_len == 1 || in_len == 1 {
        return (0, 0, 0.0);
    }
    let pos = o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
    let i0 = pos.floor() as usize;
    let i0 = i0.min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, pos - i0 as f64)
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

/// C[m,n] = A[m,k] · B[k,n], accumulated in fixed k order.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_into(a, b, m, k, n, &mut c);
    c
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ (dot products of rows).
fn matmul_nt_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            c[i * n + j] += acc;
        }
    }
}

/// C[k,n] = A[m,k]ᵀ · B[m,n].
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    matmul_tn_into(a, b, m, k, n, &mut c);
    c
}

fn matmul_tn_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * n..(r + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
        }
    }

    #[test]
    fn matmul_identity_preserves_input() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 4.0, 3.0, -1.0]).unwrap());
        let eye = tape.constant(Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        ).unwrap());
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.data(c), tape.data(a));
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(KvqError::Shape(_))));
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let s = tape.softmax(x, 0).unwrap();
        assert_close(tape.data(s), &[0.5, 0.5], 1e-15);

        let y = tape.constant(Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap());
        let ys = tape.softmax(y, 0).unwrap();
        let y_shift = tape.add_const(y, 7.5);
        let ys2 = tape.softmax(y_shift, 0).unwrap();
        assert_close(tape.data(ys), &tape.data(ys2).to_vec(), 1e-12);
    }

    #[test]
    fn softmax_closed_form_logs() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(
            vec![3],
            vec![1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()],
        ).unwrap());
        let s = tape.softmax(x, 0).unwrap();
        assert_close(tape.data(s), &[1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0], 1e-14);
    }

    #[test]
    fn avg_pool_full_window_is_mean() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = tape.avg_pool(x, &[2, 2]).unwrap();
        assert_eq!(tape.data(p), &[2.5]);
    }

    #[test]
    fn avg_pool_constant_stays_constant() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4, 6], 3.25));
        let p = tape.avg_pool(x, &[2, 3]).unwrap();
        assert!(tape.data(p).iter().all(|&v| (v - 3.25).abs() < 1e-15));
    }

    #[test]
    fn avg_pool_rejects_non_divisible() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[5, 4]));
        assert!(matches!(tape.avg_pool(x, &[2, 2]), Err(KvqError::Shape(_))));
    }

    #[test]
    fn resample3d_identity_and_constant() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.37 - 1.0));
        let same = tape.resample3d(x, &[2, 3, 4]).unwrap();
        assert_eq!(tape.data(same), tape.data(x));

        let c = tape.constant(Tensor::full(&[2, 2, 2], -0.75));
        let up = tape.resample3d(c, &[5, 7, 3]).unwrap();
        assert!(tape.data(up).iter().all(|&v| (v + 0.75).abs() < 1e-15));
    }

    #[test]
    fn resample3d_linear_ramp_doubling() {
        // 1-d ramp [0,1,2,3] along W upsampled to 7: positions o*(3)/6 = o/2.
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let up = tape.resample3d(x, &[1, 1, 7]).unwrap();
        assert_close(tape.data(up), &[0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0], 1e-12);
    }

    #[test]
    fn resample3d_zero_target_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2, 2]));
        assert!(matches!(tape.resample3d(x, &[0, 2, 2]), Err(KvqError::Shape(_))));
    }

    #[test]
    fn backward_square_and_sum() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let g = tape.backward(sq).unwrap();
        assert_close(g.wrt(x).unwrap(), &[6.0], 1e-12);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = tape.sum_all(x);
        let g = tape.backward(s).unwrap();
        assert_close(g.wrt(x).unwrap(), &[1.0; 6], 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(KvqError::Contract(_))));
    }

    #[test]
    fn unreachable_leaves_get_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0));
        let unused = tape.param(Tensor::zeros(&[3]));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(unused).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_backward_scatters_only_to_gathered_positions() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[5], |i| i as f64));
        let idx = Arc::new(vec![1usize, 3, 3]);
        let gth = tape.gather_flat(x, idx, vec![3]).unwrap();
        let s = tape.sum_all(gth);
        let g = tape.backward(s).unwrap();
        // index 3 gathered twice accumulates; 0, 2, 4 receive exactly zero
        assert_eq!(g.wrt(x).unwrap(), &[0.0, 1.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn index_select_out_of_range_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        let r = tape.index_select(x, 0, Arc::new(vec![5]));
        assert!(matches!(r, Err(KvqError::Contract(_))));
    }

    #[test]
    fn concat_and_split_gradients() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = tape.param(Tensor::new(vec![1, 3], vec![3.0, 4.0, 5.0]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let w = tape.constant(Tensor::new(vec![1, 5], vec![1.0, 10.0, 100.0, 1000.0, 10000.0]).unwrap());
        let prod = tape.mul(c, w).unwrap();
        let s = tape.sum_all(prod);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(a).unwrap(), &[1.0, 10.0]);
        assert_eq!(g.wrt(b).unwrap(), &[100.0, 1000.0, 10000.0]);
    }

    #[test]
    fn scalar_broadcast_binary_ops() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let c = tape.param(Tensor::scalar(2.0));
        let y = tape.mul(x, c).unwrap();
        assert_eq!(tape.data(y), &[2.0, 4.0, 6.0]);
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(c).unwrap(), &[6.0]);
        assert_eq!(g.wrt(x).unwrap(), &[2.0, 2.0, 2.0]);
        // non-scalar mismatched shapes are rejected
        let bad = tape.param(Tensor::zeros(&[2]));
        assert!(tape.add(x, bad).is_err());
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -4.0, 0.0, 4.0]).unwrap());
        let gamma = tape.constant(Tensor::ones(&[3]));
        let beta = tape.constant(Tensor::zeros(&[3]));
        let y = tape.layer_norm(x, gamma, beta, 1e-12).unwrap();
        let d = tape.data(y);
        for r in 0..2 {
            let row = &d[r * 3..(r + 1) * 3];
            let mean: f64 = row.iter().sum::<f64>() / 3.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_visits_each_node_once_diamond_graph() {
        // f = (x*x) + (x*x) reuses the same intermediate node twice.
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, sq).unwrap();
        let g = tape.backward(y).unwrap();
        // d/dx 2x^2 = 4x = 8
        assert_close(g.wrt(x).unwrap(), &[8.0], 1e-12);
    }
}
