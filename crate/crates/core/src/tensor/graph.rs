//! The compute graph: op recording, forward kernels, and backward rules.

use super::{el, Element, TensorData, TensorError};

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Recorded operation. Metadata that steers a kernel (indices, masks,
/// targets) is owned by the variant; tensor operands live in the node's
/// input list.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    /// (m,k) x (k,n) -> (m,n)
    Matmul,
    /// (b,m,k) x (b,k,n) -> (b,m,n); with `transpose_rhs`, rhs is (b,n,k).
    Bmm { transpose_rhs: bool },
    Add,
    Mul,
    Scale(f64),
    Silu,
    Square,
    Softmax { axis: usize },
    /// (b,s,s): row i is softmaxed over columns 0..=i, the rest forced to 0.
    CausalSoftmax,
    /// (..., n) -> (...): log-sum-exp over the last axis, max-stabilized.
    LogSumExpLast,
    SumAll,
    MeanAll,
    /// (r,c) -> (c,): column means.
    MeanAxis0,
    /// (t,v) + target ids -> scalar mean negative log-likelihood.
    CrossEntropy { targets: Vec<usize> },
    /// (n,d) -> (len(indices), d)
    GatherRows { indices: Vec<usize> },
    /// Flat element gather into `out_shape`.
    GatherElems { indices: Vec<usize>, out_shape: Vec<usize> },
    /// inputs [src (r,d), w (r,)]: out[dst[t]] += w[t] * src[t].
    WeightedRowScatter { dst: Vec<usize>, out_rows: usize },
    /// (t,k) -> (t,k): rows rescaled so kept entries sum to 1; fully
    /// masked rows become zero.
    MaskedRowNormalize { keep: Vec<bool> },
    /// inputs [x (t,d), gain (d,)]: x / rms(x) * gain per row.
    RmsNorm { eps: f64 },
    /// (b*s, h*dh) -> (b*h, s, dh)
    SplitHeads { batch: usize, heads: usize },
    /// (b*h, s, dh) -> (b*s, h*dh)
    MergeHeads { batch: usize, heads: usize },
    Reshape,
    /// (n,) -> scalar: sum of w_i * x_i with fixed weights.
    WeightedSum { weights: Vec<f64> },
}

struct Node<T> {
    op: Op,
    inputs: Vec<TensorId>,
    value: TensorData<T>,
    requires_grad: bool,
}

/// A dynamically recorded compute graph. Nodes are appended in execution
/// order, so node index order is a topological order.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf tensor.
    pub fn leaf(&mut self, value: TensorData<T>, requires_grad: bool) -> TensorId {
        self.push(Op::Leaf, vec![], value, requires_grad)
    }

    /// Registers a non-differentiable constant.
    pub fn constant(&mut self, value: TensorData<T>) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &TensorData<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        self.nodes[id.0].value.data()
    }

    /// Gradient of the last `backward` target with respect to `id`, if it
    /// was reached.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(
        &mut self,
        op: Op,
        inputs: Vec<TensorId>,
        value: TensorData<T>,
        requires_grad: bool,
    ) -> TensorId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn push_derived(&mut self, op: Op, inputs: Vec<TensorId>, value: TensorData<T>) -> TensorId {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.push(op, inputs, value, requires_grad)
    }

    // ── Elementwise and linear ops ──────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_kernel(self.data(a), self.data(b), &mut out, m, k, n);
        let value = TensorData::new(vec![m, n], out)?;
        Ok(self.push_derived(Op::Matmul, vec![a, b], value))
    }

    pub fn bmm(
        &mut self,
        a: TensorId,
        b: TensorId,
        transpose_rhs: bool,
    ) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = |_: ()| TensorError::ShapeMismatch {
            op: "bmm",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad(()));
        }
        let (batches, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_rhs {
            if sb[2] != k {
                return Err(bad(()));
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad(()));
            }
            sb[2]
        };
        let mut out = vec![T::zero(); batches * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for bi in 0..batches {
            let a_off = bi * m * k;
            let o_off = bi * m * n;
            if transpose_rhs {
                let b_off = bi * n * k;
                // out[i,j] = sum_p a[i,p] * b[j,p]
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = T::zero();
                        for p in 0..k {
                            acc = acc + da[a_off + i * k + p] * db[b_off + j * k + p];
                        }
                        out[o_off + i * n + j] = acc;
                    }
                }
            } else {
                let b_off = bi * k * n;
                matmul_kernel(
                    &da[a_off..a_off + m * k],
                    &db[b_off..b_off + k * n],
                    &mut out[o_off..o_off + m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let value = TensorData::new(vec![batches, m, n], out)?;
        Ok(self.push_derived(Op::Bmm { transpose_rhs }, vec![a, b], value))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip_same_shape("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip_same_shape("mul", a, b, Op::Mul, |x, y| x * y)
    }

    fn zip_same_shape(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        op: Op,
        f: impl Fn(T, T) -> T,
    ) -> Result<TensorId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = TensorData::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_derived(op, vec![a, b], value))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let cv = el::<T>(c);
        let data: Vec<T> = self.data(a).iter().map(|&x| x * cv).collect();
        let value = TensorData::new(self.shape(a).to_vec(), data).unwrap();
        self.push_derived(Op::Scale(c), vec![a], value)
    }

    pub fn silu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<T> = self.data(a).iter().map(|&x| x * sigmoid(x)).collect();
        let value = TensorData::new(self.shape(a).to_vec(), data).unwrap();
        self.push_derived(Op::Silu, vec![a], value)
    }

    pub fn square(&mut self, a: TensorId) -> TensorId {
        let data: Vec<T> = self.data(a).iter().map(|&x| x * x).collect();
        let value = TensorData::new(self.shape(a).to_vec(), data).unwrap();
        self.push_derived(Op::Square, vec![a], value)
    }

    // ── Softmax family ──────────────────────────────────────────────────

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::BadShape {
                op: "softmax",
                shape,
                detail: format!("axis {axis} out of range"),
            });
        }
        let mut data = self.data(a).to_vec();
        for_each_lane(&shape, axis, |idx| {
            softmax_lane(&mut data, &idx);
        });
        let value = TensorData::new(shape, data)?;
        Ok(self.push_derived(Op::Softmax { axis }, vec![a], value))
    }

    /// Causal masked softmax on attention scores of shape (b, s, s).
    pub fn causal_softmax(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 || shape[1] != shape[2] {
            return Err(TensorError::BadShape {
                op: "causal_softmax",
                shape,
                detail: "expected (batch, s, s)".to_string(),
            });
        }
        let (b, s) = (shape[0], shape[1]);
        let src = self.data(a);
        let mut data = vec![T::zero(); src.len()];
        for bi in 0..b {
            for i in 0..s {
                let row = bi * s * s + i * s;
                let visible = &src[row..row + i + 1];
                let max = visible
                    .iter()
                    .fold(T::neg_infinity(), |m, &x| if x > m { x } else { m });
                let mut denom = T::zero();
                for j in 0..=i {
                    let e = (src[row + j] - max).exp();
                    data[row + j] = e;
                    denom = denom + e;
                }
                for j in 0..=i {
                    data[row + j] = data[row + j] / denom;
                }
            }
        }
        let value = TensorData::new(shape, data)?;
        Ok(self.push_derived(Op::CausalSoftmax, vec![a], value))
    }

    /// Log-sum-exp over the last axis, with max subtraction.
    pub fn log_sum_exp_last(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(TensorError::BadShape {
                op: "log_sum_exp",
                shape,
                detail: "needs at least one axis".to_string(),
            });
        }
        let n = shape[shape.len() - 1];
        let rows = self.data(a).len() / n.max(1);
        let src = self.data(a);
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            data.push(log_sum_exp(&src[r * n..(r + 1) * n]));
        }
        let value = TensorData::new(shape[..shape.len() - 1].to_vec(), data)?;
        Ok(self.push_derived(Op::LogSumExpLast, vec![a], value))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let total = self.data(a).iter().fold(T::zero(), |acc, &x| acc + x);
        self.push_derived(Op::SumAll, vec![a], TensorData::scalar(total))
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.data(a).len().max(1);
        let total = self.data(a).iter().fold(T::zero(), |acc, &x| acc + x);
        let value = TensorData::scalar(total / el::<T>(n as f64));
        self.push_derived(Op::MeanAll, vec![a], value)
    }

    /// Column means of a (rows, cols) matrix.
    pub fn mean_axis0(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::BadShape {
                op: "mean_axis0",
                shape,
                detail: "expected a matrix".to_string(),
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let src = self.data(a);
        let inv = el::<T>(1.0 / r as f64);
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for j in 0..c {
                out[j] = out[j] + src[i * c + j];
            }
        }
        for v in &mut out {
            *v = *v * inv;
        }
        let value = TensorData::new(vec![c], out)?;
        Ok(self.push_derived(Op::MeanAxis0, vec![a], value))
    }

    /// Sum of `weights[i] * x[i]` over a vector, weights fixed.
    pub fn weighted_sum(&mut self, a: TensorId, weights: &[f64]) -> Result<TensorId, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 1 || shape[0] != weights.len() {
            return Err(TensorError::BadShape {
                op: "weighted_sum",
                shape,
                detail: format!("expected a vector of length {}", weights.len()),
            });
        }
        let total = self
            .data(a)
            .iter()
            .zip(weights)
            .fold(T::zero(), |acc, (&x, &w)| acc + x * el::<T>(w));
        let value = TensorData::scalar(total);
        Ok(self.push_derived(
            Op::WeightedSum {
                weights: weights.to_vec(),
            },
            vec![a],
            value,
        ))
    }

    /// Mean negative log-likelihood of `targets` under rows of `logits`.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(TensorError::BadShape {
                op: "cross_entropy",
                shape,
                detail: format!("expected ({}, vocab) logits", targets.len()),
            });
        }
        let (t, v) = (shape[0], shape[1]);
        for &target in targets {
            if target >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: target,
                    bound: v,
                });
            }
        }
        let src = self.data(logits);
        let mut total = T::zero();
        for (i, &target) in targets.iter().enumerate() {
            let row = &src[i * v..(i + 1) * v];
            total = total + log_sum_exp(row) - row[target];
        }
        let value = TensorData::scalar(total / el::<T>(t as f64));
        Ok(self.push_derived(
            Op::CrossEntropy {
                targets: targets.to_vec(),
            },
            vec![logits],
            value,
        ))
    }

    // ── Gather / scatter ────────────────────────────────────────────────

    /// Row gather from a (n, d) matrix; rows may repeat.
    pub fn gather_rows(
        &mut self,
        src: TensorId,
        indices: &[usize],
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(src).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::BadShape {
                op: "gather_rows",
                shape,
                detail: "expected a matrix".to_string(),
            });
        }
        let (n, d) = (shape[0], shape[1]);
        let data_src = self.data(src);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &row in indices {
            if row >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: row,
                    bound: n,
                });
            }
            out.extend_from_slice(&data_src[row * d..(row + 1) * d]);
        }
        let value = TensorData::new(vec![indices.len(), d], out)?;
        Ok(self.push_derived(
            Op::GatherRows {
                indices: indices.to_vec(),
            },
            vec![src],
            value,
        ))
    }

    /// Flat element gather reshaped to `out_shape`.
    pub fn gather_elems(
        &mut self,
        src: TensorId,
        indices: &[usize],
        out_shape: Vec<usize>,
    ) -> Result<TensorId, TensorError> {
        let numel: usize = out_shape.iter().product();
        if numel != indices.len() {
            return Err(TensorError::BadShape {
                op: "gather_elems",
                shape: out_shape,
                detail: format!("{} indices provided", indices.len()),
            });
        }
        let bound = self.data(src).len();
        let data_src = self.data(src);
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= bound {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_elems",
                    index: i,
                    bound,
                });
            }
            out.push(data_src[i]);
        }
        let value = TensorData::new(out_shape.clone(), out)?;
        Ok(self.push_derived(
            Op::GatherElems {
                indices: indices.to_vec(),
                out_shape,
            },
            vec![src],
            value,
        ))
    }

    /// Scatter rows of `src` (r, d) into a fresh (out_rows, d) accumulator at
    /// `dst` positions, each row scaled by its entry in `w` (r,). Both the
    /// rows and the weights receive gradients.
    pub fn weighted_row_scatter(
        &mut self,
        src: TensorId,
        w: TensorId,
        dst: &[usize],
        out_rows: usize,
    ) -> Result<TensorId, TensorError> {
        let s_shape = self.shape(src).to_vec();
        let w_shape = self.shape(w).to_vec();
        if s_shape.len() != 2 || w_shape != vec![s_shape[0]] || dst.len() != s_shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_row_scatter",
                lhs: s_shape,
                rhs: w_shape,
            });
        }
        let (r, d) = (s_shape[0], s_shape[1]);
        for &t in dst {
            if t >= out_rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "weighted_row_scatter",
                    index: t,
                    bound: out_rows,
                });
            }
        }
        let src_data = self.data(src);
        let w_data = self.data(w);
        let mut out = vec![T::zero(); out_rows * d];
        for i in 0..r {
            let weight = w_data[i];
            let o = dst[i] * d;
            for c in 0..d {
                out[o + c] = out[o + c] + weight * src_data[i * d + c];
            }
        }
        let value = TensorData::new(vec![out_rows, d], out)?;
        Ok(self.push_derived(
            Op::WeightedRowScatter {
                dst: dst.to_vec(),
                out_rows,
            },
            vec![src, w],
            value,
        ))
    }

    /// Rescales each row of `w` (t, k) so its kept entries sum to one.
    /// Rows whose kept entries sum to zero (e.g. fully dropped) become zero.
    pub fn masked_row_normalize(
        &mut self,
        w: TensorId,
        keep: &[bool],
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(w).to_vec();
        if shape.len() != 2 || keep.len() != self.data(w).len() {
            return Err(TensorError::BadShape {
                op: "masked_row_normalize",
                shape,
                detail: format!("mask has {} entries", keep.len()),
            });
        }
        let (t, k) = (shape[0], shape[1]);
        let src = self.data(w);
        let mut out = vec![T::zero(); t * k];
        for row in 0..t {
            let base = row * k;
            let mut total = T::zero();
            for j in 0..k {
                if keep[base + j] {
                    total = total + src[base + j];
                }
            }
            if total > T::zero() {
                for j in 0..k {
                    if keep[base + j] {
                        out[base + j] = src[base + j] / total;
                    }
                }
            }
        }
        let value = TensorData::new(shape, out)?;
        Ok(self.push_derived(
            Op::MaskedRowNormalize {
                keep: keep.to_vec(),
            },
            vec![w],
            value,
        ))
    }

    // ── Normalization and attention layout ──────────────────────────────

    /// RMS normalization with learned gain: `x / rms(x) * gain` per row.
    pub fn rms_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let xs = self.shape(x).to_vec();
        let gs = self.shape(gain).to_vec();
        if xs.len() != 2 || gs != vec![xs[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "rms_norm",
                lhs: xs,
                rhs: gs,
            });
        }
        let (t, d) = (xs[0], xs[1]);
        let src = self.data(x);
        let g = self.data(gain);
        let mut out = vec![T::zero(); t * d];
        for row in 0..t {
            let base = row * d;
            let r = rms(&src[base..base + d], eps);
            for j in 0..d {
                out[base + j] = src[base + j] / r * g[j];
            }
        }
        let value = TensorData::new(xs, out)?;
        Ok(self.push_derived(Op::RmsNorm { eps }, vec![x, gain], value))
    }

    /// (batch*s, heads*dh) -> (batch*heads, s, dh)
    pub fn split_heads(
        &mut self,
        x: TensorId,
        batch: usize,
        heads: usize,
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] % batch != 0 || shape[1] % heads != 0 {
            return Err(TensorError::BadShape {
                op: "split_heads",
                shape,
                detail: format!("batch={batch} heads={heads}"),
            });
        }
        let s = shape[0] / batch;
        let dh = shape[1] / heads;
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for h in 0..heads {
                for si in 0..s {
                    let src_base = (b * s + si) * heads * dh + h * dh;
                    let dst_base = ((b * heads + h) * s + si) * dh;
                    out[dst_base..dst_base + dh].copy_from_slice(&src[src_base..src_base + dh]);
                }
            }
        }
        let value = TensorData::new(vec![batch * heads, s, dh], out)?;
        Ok(self.push_derived(Op::SplitHeads { batch, heads }, vec![x], value))
    }

    /// (batch*heads, s, dh) -> (batch*s, heads*dh)
    pub fn merge_heads(
        &mut self,
        x: TensorId,
        batch: usize,
        heads: usize,
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != batch * heads {
            return Err(TensorError::BadShape {
                op: "merge_heads",
                shape,
                detail: format!("batch={batch} heads={heads}"),
            });
        }
        let (s, dh) = (shape[1], shape[2]);
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for h in 0..heads {
                for si in 0..s {
                    let src_base = ((b * heads + h) * s + si) * dh;
                    let dst_base = (b * s + si) * heads * dh + h * dh;
                    out[dst_base..dst_base + dh].copy_from_slice(&src[src_base..src_base + dh]);
                }
            }
        }
        let value = TensorData::new(vec![batch * s, heads * dh], out)?;
        Ok(self.push_derived(Op::MergeHeads { batch, heads }, vec![x], value))
    }

    /// Row-major reinterpretation to a new shape of equal element count.
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(TensorError::BadShape {
                op: "reshape",
                shape,
                detail: format!("input has {} elements", self.data(x).len()),
            });
        }
        let value = TensorData::new(shape, self.data(x).to_vec())?;
        Ok(self.push_derived(Op::Reshape, vec![x], value))
    }

    // ── Composite helpers ───────────────────────────────────────────────

    /// SwiGLU feed-forward: `(silu(x W_gate) ⊙ (x W_up)) W_down`.
    pub fn swiglu_ffn(
        &mut self,
        x: TensorId,
        w_gate: TensorId,
        w_up: TensorId,
        w_down: TensorId,
    ) -> Result<TensorId, TensorError> {
        let gated = self.matmul(x, w_gate)?;
        let gated = self.silu(gated);
        let up = self.matmul(x, w_up)?;
        let hidden = self.mul(gated, up)?;
        self.matmul(hidden, w_down)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate
    /// additively into every `requires_grad` tensor reachable from it.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        let value = &self.nodes[loss.0].value;
        if value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: value.shape().to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop(&self, i: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let input_val = |slot: usize| self.nodes[node.inputs[slot].0].value.data();
        let input_shape = |slot: usize| self.nodes[node.inputs[slot].0].value.shape();
        let wants = |slot: usize| self.nodes[node.inputs[slot].0].requires_grad;

        // Accumulator for input `slot`, lazily initialized to zeros.
        macro_rules! gin {
            ($slot:expr) => {{
                let id = node.inputs[$slot].0;
                let len = self.nodes[id].value.numel();
                grads[id].get_or_insert_with(|| vec![T::zero(); len])
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::Matmul => {
                let (m, k) = (input_shape(0)[0], input_shape(0)[1]);
                let n = input_shape(1)[1];
                if wants(0) {
                    let b = input_val(1);
                    let ga = gin!(0);
                    for ii in 0..m {
                        for p in 0..k {
                            let mut acc = T::zero();
                            for j in 0..n {
                                acc = acc + gout[ii * n + j] * b[p * n + j];
                            }
                            ga[ii * k + p] = ga[ii * k + p] + acc;
                        }
                    }
                }
                if wants(1) {
                    let a = input_val(0);
                    let gb = gin!(1);
                    for p in 0..k {
                        for ii in 0..m {
                            let av = a[ii * k + p];
                            for j in 0..n {
                                gb[p * n + j] = gb[p * n + j] + av * gout[ii * n + j];
                            }
                        }
                    }
                }
            }
            Op::Bmm { transpose_rhs } => {
                let sa = input_shape(0);
                let (batches, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let a = input_val(0);
                let b = input_val(1);
                for bi in 0..batches {
                    let a_off = bi * m * k;
                    let o_off = bi * m * n;
                    if *transpose_rhs {
                        let b_off = bi * n * k;
                        if wants(0) {
                            let ga = gin!(0);
                            // dA[i,p] += sum_j gout[i,j] * B[j,p]
                            for ii in 0..m {
                                for j in 0..n {
                                    let gv = gout[o_off + ii * n + j];
                                    for p in 0..k {
                                        ga[a_off + ii * k + p] =
                                            ga[a_off + ii * k + p] + gv * b[b_off + j * k + p];
                                    }
                                }
                            }
                        }
                        if wants(1) {
                            let gb = gin!(1);
                            // dB[j,p] += sum_i gout[i,j] * A[i,p]
                            for j in 0..n {
                                for ii in 0..m {
                                    let gv = gout[o_off + ii * n + j];
                                    for p in 0..k {
                                        gb[b_off + j * k + p] =
                                            gb[b_off + j * k + p] + gv * a[a_off + ii * k + p];
                                    }
                                }
                            }
                        }
                    } else {
                        let b_off = bi * k * n;
                        if wants(0) {
                            let ga = gin!(0);
                            for ii in 0..m {
                                for p in 0..k {
                                    let mut acc = T::zero();
                                    for j in 0..n {
                                        acc = acc + gout[o_off + ii * n + j] * b[b_off + p * n + j];
                                    }
                                    ga[a_off + ii * k + p] = ga[a_off + ii * k + p] + acc;
                                }
                            }
                        }
                        if wants(1) {
                            let gb = gin!(1);
                            for p in 0..k {
                                for ii in 0..m {
                                    let av = a[a_off + ii * k + p];
                                    for j in 0..n {
                                        gb[b_off + p * n + j] =
                                            gb[b_off + p * n + j] + av * gout[o_off + ii * n + j];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Add => {
                for slot in 0..2 {
                    if wants(slot) {
                        let g = gin!(slot);
                        for (gv, &go) in g.iter_mut().zip(gout) {
                            *gv = *gv + go;
                        }
                    }
                }
            }
            Op::Mul => {
                for slot in 0..2 {
                    if wants(slot) {
                        let other = input_val(1 - slot).to_vec();
                        let g = gin!(slot);
                        for ((gv, &go), &ov) in g.iter_mut().zip(gout).zip(&other) {
                            *gv = *gv + go * ov;
                        }
                    }
                }
            }
            Op::Scale(c) => {
                if wants(0) {
                    let cv = el::<T>(*c);
                    let g = gin!(0);
                    for (gv, &go) in g.iter_mut().zip(gout) {
                        *gv = *gv + go * cv;
                    }
                }
            }
            Op::Silu => {
                if wants(0) {
                    let x = input_val(0).to_vec();
                    let g = gin!(0);
                    for ((gv, &go), &xv) in g.iter_mut().zip(gout).zip(&x) {
                        let s = sigmoid(xv);
                        *gv = *gv + go * s * (T::one() + xv * (T::one() - s));
                    }
                }
            }
            Op::Square => {
                if wants(0) {
                    let x = input_val(0).to_vec();
                    let two = el::<T>(2.0);
                    let g = gin!(0);
                    for ((gv, &go), &xv) in g.iter_mut().zip(gout).zip(&x) {
                        *gv = *gv + go * two * xv;
                    }
                }
            }
            Op::Softmax { axis } => {
                if wants(0) {
                    let y = node.value.data().to_vec();
                    let shape = node.value.shape().to_vec();
                    let axis = *axis;
                    let g = gin!(0);
                    for_each_lane(&shape, axis, |idx| {
                        let mut dot = T::zero();
                        for &p in &idx {
                            dot = dot + gout[p] * y[p];
                        }
                        for &p in &idx {
                            g[p] = g[p] + y[p] * (gout[p] - dot);
                        }
                    });
                }
            }
            Op::CausalSoftmax => {
                if wants(0) {
                    let y = node.value.data().to_vec();
                    let shape = node.value.shape().to_vec();
                    let (b, s) = (shape[0], shape[1]);
                    let g = gin!(0);
                    for bi in 0..b {
                        for ii in 0..s {
                            let row = bi * s * s + ii * s;
                            let mut dot = T::zero();
                            for j in 0..=ii {
                                dot = dot + gout[row + j] * y[row + j];
                            }
                            for j in 0..=ii {
                                g[row + j] = g[row + j] + y[row + j] * (gout[row + j] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSumExpLast => {
                if wants(0) {
                    let x = input_val(0).to_vec();
                    let shape = input_shape(0).to_vec();
                    let n = shape[shape.len() - 1];
                    let rows = x.len() / n;
                    let g = gin!(0);
                    for r in 0..rows {
                        let row = &x[r * n..(r + 1) * n];
                        let probs = softmax_vec(row);
                        for j in 0..n {
                            g[r * n + j] = g[r * n + j] + gout[r] * probs[j];
                        }
                    }
                }
            }
            Op::SumAll => {
                if wants(0) {
                    let g = gin!(0);
                    for gv in g.iter_mut() {
                        *gv = *gv + gout[0];
                    }
                }
            }
            Op::MeanAll => {
                if wants(0) {
                    let g = gin!(0);
                    let inv = el::<T>(1.0 / g.len().max(1) as f64);
                    for gv in g.iter_mut() {
                        *gv = *gv + gout[0] * inv;
                    }
                }
            }
            Op::MeanAxis0 => {
                if wants(0) {
                    let shape = input_shape(0).to_vec();
                    let (r, c) = (shape[0], shape[1]);
                    let inv = el::<T>(1.0 / r as f64);
                    let g = gin!(0);
                    for ii in 0..r {
                        for j in 0..c {
                            g[ii * c + j] = g[ii * c + j] + gout[j] * inv;
                        }
                    }
                }
            }
            Op::CrossEntropy { targets } => {
                if wants(0) {
                    let x = input_val(0).to_vec();
                    let v = input_shape(0)[1];
                    let t = targets.len();
                    let scale = gout[0] * el::<T>(1.0 / t as f64);
                    let g = gin!(0);
                    for (ii, &target) in targets.iter().enumerate() {
                        let row = &x[ii * v..(ii + 1) * v];
                        let probs = softmax_vec(row);
                        for j in 0..v {
                            let indicator = if j == target { T::one() } else { T::zero() };
                            g[ii * v + j] = g[ii * v + j] + scale * (probs[j] - indicator);
                        }
                    }
                }
            }
            Op::GatherRows { indices } => {
                if wants(0) {
                    let d = input_shape(0)[1];
                    let g = gin!(0);
                    for (r, &row) in indices.iter().enumerate() {
                        for c in 0..d {
                            g[row * d + c] = g[row * d + c] + gout[r * d + c];
                        }
                    }
                }
            }
            Op::GatherElems { indices, .. } => {
                if wants(0) {
                    let g = gin!(0);
                    for (r, &src_idx) in indices.iter().enumerate() {
                        g[src_idx] = g[src_idx] + gout[r];
                    }
                }
            }
            Op::WeightedRowScatter { dst, .. } => {
                let d = input_shape(0)[1];
                if wants(0) {
                    let w = input_val(1).to_vec();
                    let g = gin!(0);
                    for (r, &t) in dst.iter().enumerate() {
                        for c in 0..d {
                            g[r * d + c] = g[r * d + c] + w[r] * gout[t * d + c];
                        }
                    }
                }
                if wants(1) {
                    let src = input_val(0).to_vec();
                    let g = gin!(1);
                    for (r, &t) in dst.iter().enumerate() {
                        let mut acc = T::zero();
                        for c in 0..d {
                            acc = acc + src[r * d + c] * gout[t * d + c];
                        }
                        g[r] = g[r] + acc;
                    }
                }
            }
            Op::MaskedRowNormalize { keep } => {
                if wants(0) {
                    let w = input_val(0).to_vec();
                    let y = node.value.data().to_vec();
                    let shape = node.value.shape().to_vec();
                    let (t, k) = (shape[0], shape[1]);
                    let g = gin!(0);
                    for row in 0..t {
                        let base = row * k;
                        let mut total = T::zero();
                        for j in 0..k {
                            if keep[base + j] {
                                total = total + w[base + j];
                            }
                        }
                        if total <= T::zero() {
                            continue;
                        }
                        let mut dot = T::zero();
                        for j in 0..k {
                            dot = dot + gout[base + j] * y[base + j];
                        }
                        for j in 0..k {
                            if keep[base + j] {
                                g[base + j] = g[base + j] + (gout[base + j] - dot) / total;
                            }
                        }
                    }
                }
            }
            Op::RmsNorm { eps } => {
                let x = input_val(0).to_vec();
                let gain = input_val(1).to_vec();
                let shape = input_shape(0).to_vec();
                let (t, d) = (shape[0], shape[1]);
                if wants(1) {
                    let g = gin!(1);
                    for row in 0..t {
                        let base = row * d;
                        let r = rms(&x[base..base + d], *eps);
                        for j in 0..d {
                            g[j] = g[j] + gout[base + j] * x[base + j] / r;
                        }
                    }
                }
                if wants(0) {
                    let g = gin!(0);
                    let dn = el::<T>(d as f64);
                    for row in 0..t {
                        let base = row * d;
                        let r = rms(&x[base..base + d], *eps);
                        let mut dot = T::zero();
                        for j in 0..d {
                            dot = dot + gout[base + j] * gain[j] * x[base + j];
                        }
                        let r3 = r * r * r;
                        for j in 0..d {
                            g[base + j] = g[base + j] + gout[base + j] * gain[j] / r
                                - x[base + j] * dot / (dn * r3);
                        }
                    }
                }
            }
            Op::SplitHeads { batch, heads } => {
                if wants(0) {
                    let shape = node.value.shape().to_vec();
                    let (s, dh) = (shape[1], shape[2]);
                    let g = gin!(0);
                    for b in 0..*batch {
                        for h in 0..*heads {
                            for si in 0..s {
                                let out_base = ((b * heads + h) * s + si) * dh;
                                let in_base = (b * s + si) * heads * dh + h * dh;
                                for c in 0..dh {
                                    g[in_base + c] = g[in_base + c] + gout[out_base + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { batch, heads } => {
                if wants(0) {
                    let shape = input_shape(0).to_vec();
                    let (s, dh) = (shape[1], shape[2]);
                    let g = gin!(0);
                    for b in 0..*batch {
                        for h in 0..*heads {
                            for si in 0..s {
                                let in_base = ((b * heads + h) * s + si) * dh;
                                let out_base = (b * s + si) * heads * dh + h * dh;
                                for c in 0..dh {
                                    g[in_base + c] = g[in_base + c] + gout[out_base + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::Reshape => {
                if wants(0) {
                    let g = gin!(0);
                    for (gv, &go) in g.iter_mut().zip(gout) {
                        *gv = *gv + go;
                    }
                }
            }
            Op::WeightedSum { weights } => {
                if wants(0) {
                    let g = gin!(0);
                    for (gv, &w) in g.iter_mut().zip(weights) {
                        *gv = *gv + gout[0] * el::<T>(w);
                    }
                }
            }
        }
    }
}

// ── Shared numeric kernels ─────────────────────────────────────────────

fn matmul_kernel<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            let out_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + av * b_row[j];
            }
        }
    }
}

fn rms<T: Element>(row: &[T], eps: f64) -> T {
    let n = el::<T>(row.len() as f64);
    let ms = row.iter().fold(T::zero(), |acc, &x| acc + x * x) / n;
    (ms + el::<T>(eps)).sqrt()
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn log_sum_exp<T: Element>(row: &[T]) -> T {
    let max = row
        .iter()
        .fold(T::neg_infinity(), |m, &x| if x > m { x } else { m });
    if max == T::neg_infinity() {
        return T::neg_infinity();
    }
    let sum = row.iter().fold(T::zero(), |acc, &x| acc + (x - max).exp());
    max + sum.ln()
}

fn softmax_vec<T: Element>(row: &[T]) -> Vec<T> {
    let max = row
        .iter()
        .fold(T::neg_infinity(), |m, &x| if x > m { x } else { m });
    let mut out: Vec<T> = row.iter().map(|&x| (x - max).exp()).collect();
    let denom = out.iter().fold(T::zero(), |acc, &x| acc + x);
    for v in &mut out {
        *v = *v / denom;
    }
    out
}

fn softmax_lane<T: Element>(data: &mut [T], idx: &[usize]) {
    let max = idx
        .iter()
        .fold(T::neg_infinity(), |m, &p| if data[p] > m { data[p] } else { m });
    let mut denom = T::zero();
    for &p in idx {
        let e = (data[p] - max).exp();
        data[p] = e;
        denom = denom + e;
    }
    for &p in idx {
        data[p] = data[p] / denom;
    }
}

/// Calls `f` once per lane along `axis`, passing the flat indices of that
/// lane's elements in order.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(Vec<usize>)) {
    let axis_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let idx: Vec<usize> = (0..axis_len)
                .map(|a| o * axis_len * inner + a * inner + i)
                .collect();
            f(idx);
        }
    }
}
