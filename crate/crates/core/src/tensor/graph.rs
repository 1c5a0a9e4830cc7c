use std::collections::HashMap;

use super::{axis_split, ParamId, ParamStore, Result, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var, usize),
    Relu(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Concat(Vec<Var>, usize),
    Mean(Var, usize),
    GatherSum(Var, Vec<Vec<usize>>),
    SelectCols(Var, Vec<usize>),
    SliceCols(Var, usize),
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A single-use computation tape.
///
/// Nodes are appended in evaluation order, so the tape is already a
/// topological order and `backward` is one reverse sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    bound: HashMap<ParamId, Var>,
    relu_signature: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: HashMap::new(),
            relu_signature: FNV_OFFSET,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf whose gradient is readable after `backward`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter into the graph (once per graph).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.bound.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Hash of every relu activation pattern and branch mark recorded so far.
    pub fn relu_signature(&self) -> u64 {
        self.relu_signature
    }

    /// Mixes a discrete decision (such as a top-k selection) into the
    /// signature so gradient checks can skip points where it flips.
    pub fn mark_branch(&mut self, tag: u64) {
        for b in tag.to_le_bytes() {
            self.relu_signature = (self.relu_signature ^ u64::from(b)).wrapping_mul(FNV_PRIME);
        }
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::InvalidAxis {
                op,
                axis: 1,
                rank: s.len(),
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), needs))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul_nt", a)?;
        let (n, k2) = self.matrix_dims("matmul_nt", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (1, k as isize),
            T::zero(),
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNT(a, b), needs))
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.check_broadcast(op, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let n = bv.len();
        let data = av
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(av.shape(), data)
    }

    /// Elementwise `a + b`; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape(), v.data().iter().map(|&e| e * c).collect()).expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, c), needs)
    }

    /// Multiplies every element of `x` by the scalar `s[index]`.
    pub fn scale_by(&mut self, x: Var, s: Var, index: usize) -> Result<Var> {
        let sv = self.value(s);
        if index >= sv.len() {
            return Err(TensorError::IndexOutOfRange {
                op: "scale_by",
                index,
                extent: sv.len(),
            });
        }
        let c = sv.data()[index];
        let v = self.value(x);
        let out = Tensor::new(v.shape(), v.data().iter().map(|&e| e * c).collect())?;
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(out, Op::ScaleBy(x, s, index), needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut sig = self.relu_signature;
        let data = v
            .data()
            .iter()
            .map(|&e| {
                let on = e > T::zero();
                sig = (sig ^ u64::from(on)).wrapping_mul(FNV_PRIME);
                if on {
                    e
                } else {
                    T::zero()
                }
            })
            .collect();
        let out = Tensor::new(v.shape(), data).expect("same shape");
        self.relu_signature = sig;
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    /// Softmax along `axis`, stabilised by subtracting the per-slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let (outer, extent, inner) = axis_split("softmax", v.shape(), axis)?;
        if v.data().iter().any(|e| !e.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let src = v.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..extent {
                    max = max.max(src[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..extent {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum = sum + e;
                }
                for j in 0..extent {
                    out[base + j * inner] = out[base + j * inner] / sum;
                }
            }
        }
        let out = Tensor::new(v.shape(), out)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Softmax(x, axis), needs))
    }

    /// Layer normalisation over the last axis with variance epsilon 1e-5.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let v = self.value(x);
        let d = v.cols();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: v.shape().to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let eps = T::of(1e-5);
        let dn = T::of(d as f64);
        let rows = v.rows();
        let mut xhat = Vec::with_capacity(v.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(v.len());
        for row in v.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &e) in row.iter().enumerate() {
                let h = (e - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(v.shape(), out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        axis_split("concat", &base, axis)?;
        let mut extent = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            extent += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = extent;
        let (outer, _, inner) = axis_split("concat", &shape, axis)?;
        let mut out = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let block = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat(parts.to_vec(), axis), needs))
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let (outer, extent, inner) = axis_split("mean", v.shape(), axis)?;
        let mut out = vec![T::zero(); outer * inner];
        let src = v.data();
        for o in 0..outer {
            for j in 0..extent {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src[(o * extent + j) * inner + i];
                }
            }
        }
        let scale = T::one() / T::of(extent.max(1) as f64);
        out.iter_mut().for_each(|e| *e = *e * scale);
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mean(x, axis), needs))
    }

    /// Row lookup into a `[vocab × d]` table.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let lists: Vec<Vec<usize>> = indices.iter().map(|&i| vec![i]).collect();
        self.gather_sum(table, lists)
    }

    /// Each output row is the sum of the listed table rows. This is exactly a
    /// multi-hot vector times the table.
    pub fn gather_sum(&mut self, table: Var, lists: Vec<Vec<usize>>) -> Result<Var> {
        let (vocab, d) = self.matrix_dims("gather_sum", table)?;
        let t = self.value(table).data();
        let mut out = vec![T::zero(); lists.len() * d];
        for (r, list) in lists.iter().enumerate() {
            let dst = &mut out[r * d..(r + 1) * d];
            for &i in list {
                if i >= vocab {
                    return Err(TensorError::IndexOutOfRange {
                        op: "gather_sum",
                        index: i,
                        extent: vocab,
                    });
                }
                for (o, &s) in dst.iter_mut().zip(&t[i * d..(i + 1) * d]) {
                    *o = *o + s;
                }
            }
        }
        let out = Tensor::new(&[lists.len(), d], out)?;
        let needs = self.needs(table);
        Ok(self.push(out, Op::GatherSum(table, lists), needs))
    }

    /// Rows of a matrix selected by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.embedding_lookup(x, rows)
    }

    /// Columns of a matrix selected by index.
    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims("select_cols", x)?;
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(TensorError::IndexOutOfRange {
                op: "select_cols",
                index: bad,
                extent: c,
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            out.extend(cols.iter().map(|&j| src[i * c + j]));
        }
        let out = Tensor::new(&[r, cols.len()], out)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::SelectCols(x, cols.to_vec()), needs))
    }

    /// Contiguous column block `[start, start + len)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("slice_cols", x)?;
        if start + len > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                extent: c,
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let out = Tensor::new(&[r, len], out)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::SliceCols(x, start), needs))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), needs)
    }

    /// Mean softmax cross-entropy over a `[batch × classes]` logit matrix.
    ///
    /// Returns the scalar mean loss and the per-example losses.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<(Var, Vec<T>)> {
        let (b, c) = self.matrix_dims("cross_entropy", logits)?;
        if labels.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![b, c],
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::LabelOutOfRange { label: bad, classes: c });
        }
        let src = self.value(logits).data();
        if src.iter().any(|e| !e.is_finite()) {
            return Err(TensorError::NonFinite { op: "cross_entropy" });
        }
        let mut probs = vec![T::zero(); b * c];
        let mut losses = Vec::with_capacity(b);
        for (r, &label) in labels.iter().enumerate() {
            let row = &src[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&e| (e - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            losses.push(lse - row[label]);
        }
        let mean = losses.iter().copied().sum::<T>() / T::of(b as f64);
        let needs = self.needs(logits);
        let v = self.push(
            Tensor::scalar(mean),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        );
        Ok((v, losses))
    }

    /// Reverse sweep from `root`, seeding its gradient with ones.
    pub fn backward(&mut self, root: Var) {
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::one(); self.nodes[root.0].value.len()]);
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                backprop(&self.nodes, i, &dy, &mut grads);
            }
            grads[i] = Some(dy);
        }
        self.grads = grads;
    }

    /// Adds the gradients of every bound parameter into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (&id, &v) in &self.bound {
            if let Some(g) = self.grad(v) {
                store.accumulate_grad(id, g);
            }
        }
    }
}

fn acc<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn backprop<T: Scalar>(nodes: &[Node<T>], i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &nodes[i].op {
        Op::Leaf | Op::Param => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            if let Some(ga) = acc(grads, nodes, *a) {
                // dA += dC · Bᵀ
                T::gemm(m, n, k, T::one(), dy, (n as isize, 1), val(*b).data(), (1, n as isize), T::one(), ga);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                // dB += Aᵀ · dC
                T::gemm(k, m, n, T::one(), val(*a).data(), (1, k as isize), dy, (n as isize, 1), T::one(), gb);
            }
        }
        Op::MatMulNT(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[0];
            if let Some(ga) = acc(grads, nodes, *a) {
                // dA += dC · B
                T::gemm(m, n, k, T::one(), dy, (n as isize, 1), val(*b).data(), (k as isize, 1), T::one(), ga);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                // dB += dCᵀ · A
                T::gemm(n, m, k, T::one(), dy, (1, n as isize), val(*a).data(), (k as isize, 1), T::one(), gb);
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let negate = matches!(nodes[i].op, Op::Sub(..));
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(dy).for_each(|(g, &d)| *g = *g + d);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                let n = gb.len();
                for chunk in dy.chunks(n) {
                    for (g, &d) in gb.iter_mut().zip(chunk) {
                        *g = if negate { *g - d } else { *g + d };
                    }
                }
            }
        }
        Op::Mul(a, b) => {
            let av = val(*a).data();
            let bv = val(*b).data();
            let n = bv.len();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (j, (g, &d)) in ga.iter_mut().zip(dy).enumerate() {
                    *g = *g + d * bv[j % n];
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for (j, (&d, &x)) in dy.iter().zip(av).enumerate() {
                    gb[j % n] = gb[j % n] + d * x;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(dy).for_each(|(g, &d)| *g = *g + d * *c);
            }
        }
        Op::ScaleBy(x, s, idx) => {
            let c = val(*s).data()[*idx];
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(dy).for_each(|(g, &d)| *g = *g + d * c);
            }
            let xv = val(*x).data();
            if let Some(gs) = acc(grads, nodes, *s) {
                let dot: T = dy.iter().zip(xv).map(|(&d, &e)| d * e).sum();
                gs[*idx] = gs[*idx] + dot;
            }
        }
        Op::Relu(x) => {
            let xv = val(*x).data();
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((g, &d), &e) in gx.iter_mut().zip(dy).zip(xv) {
                    if e > T::zero() {
                        *g = *g + d;
                    }
                }
            }
        }
        Op::Softmax(x, axis) => {
            let y = nodes[i].value.data();
            let (outer, extent, inner) = axis_split("softmax", nodes[i].value.shape(), *axis).expect("validated");
            if let Some(gx) = acc(grads, nodes, *x) {
                for o in 0..outer {
                    for k in 0..inner {
                        let base = o * extent * inner + k;
                        let dot: T = (0..extent).map(|j| dy[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..extent {
                            let p = base + j * inner;
                            gx[p] = gx[p] + y[p] * (dy[p] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = val(*gain).len();
            let g = val(*gain).data();
            let dn = T::of(d as f64);
            if let Some(gg) = acc(grads, nodes, *gain) {
                for (r, row) in dy.chunks(d).enumerate() {
                    for j in 0..d {
                        gg[j] = gg[j] + row[j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, *bias) {
                for row in dy.chunks(d) {
                    for j in 0..d {
                        gb[j] = gb[j] + row[j];
                    }
                }
            }
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, row) in dy.chunks(d).enumerate() {
                    let h = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..d {
                        let dh = row[j] * g[j];
                        mean_dh = mean_dh + dh;
                        mean_dh_h = mean_dh_h + dh * h[j];
                    }
                    mean_dh = mean_dh / dn;
                    mean_dh_h = mean_dh_h / dn;
                    for j in 0..d {
                        let dh = row[j] * g[j];
                        gx[r * d + j] = gx[r * d + j] + rstd[r] * (dh - mean_dh - h[j] * mean_dh_h);
                    }
                }
            }
        }
        Op::Concat(parts, axis) => {
            let shape = nodes[i].value.shape();
            let (outer, _, inner) = axis_split("concat", shape, *axis).expect("validated");
            let total_block = shape[*axis] * inner;
            let mut offset = 0;
            for p in parts {
                let block = val(*p).shape()[*axis] * inner;
                if let Some(gp) = acc(grads, nodes, *p) {
                    for o in 0..outer {
                        let src = &dy[o * total_block + offset..o * total_block + offset + block];
                        for (g, &d) in gp[o * block..(o + 1) * block].iter_mut().zip(src) {
                            *g = *g + d;
                        }
                    }
                }
                offset += block;
            }
        }
        Op::Mean(x, axis) => {
            let (outer, extent, inner) = axis_split("mean", val(*x).shape(), *axis).expect("validated");
            let scale = T::one() / T::of(extent.max(1) as f64);
            if let Some(gx) = acc(grads, nodes, *x) {
                for o in 0..outer {
                    for j in 0..extent {
                        for k in 0..inner {
                            let p = (o * extent + j) * inner + k;
                            gx[p] = gx[p] + dy[o * inner + k] * scale;
                        }
                    }
                }
            }
        }
        Op::GatherSum(table, lists) => {
            let d = val(*table).cols();
            if let Some(gt) = acc(grads, nodes, *table) {
                for (r, list) in lists.iter().enumerate() {
                    let src = &dy[r * d..(r + 1) * d];
                    for &idx in list {
                        for (g, &e) in gt[idx * d..(idx + 1) * d].iter_mut().zip(src) {
                            *g = *g + e;
                        }
                    }
                }
            }
        }
        Op::SelectCols(x, cols) => {
            let c = val(*x).cols();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, row) in dy.chunks(cols.len().max(1)).enumerate() {
                    for (&j, &d) in cols.iter().zip(row) {
                        gx[r * c + j] = gx[r * c + j] + d;
                    }
                }
            }
        }
        Op::SliceCols(x, start) => {
            let c = val(*x).cols();
            let len = nodes[i].value.cols();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, row) in dy.chunks(len.max(1)).enumerate() {
                    for (j, &d) in row.iter().enumerate() {
                        gx[r * c + start + j] = gx[r * c + start + j] + d;
                    }
                }
            }
        }
        Op::SumAll(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().for_each(|g| *g = *g + dy[0]);
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let b = labels.len();
            let c = probs.len() / b.max(1);
            let scale = dy[0] / T::of(b as f64);
            if let Some(gl) = acc(grads, nodes, *logits) {
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let target = if j == label { T::one() } else { T::zero() };
                        gl[r * c + j] = gl[r * c + j] + (probs[r * c + j] - target) * scale;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_2x2() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let b = g.constant(t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn softmax_basic_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(t(&[3], &[1000.0, 1000.0, 1000.0]));
        let y = g.softmax(x, 0).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }

        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.softmax(x, 0).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (p, v) in g.value(y).data().iter().zip([1.0f64, 2.0, 3.0]) {
            assert!((p - v.exp() / z).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[2], vec![f32::NAN, 0.0]).unwrap());
        assert!(matches!(g.softmax(x, 0), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[0.0, 5.0, 0.0, -5.0]));
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.5).abs() < 1e-12 && (v[2] - 0.5).abs() < 1e-12);
        assert!((v[1] + v[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::<f64>::new();
        let gain = g.constant(t(&[3], &[1.0; 3]));
        let bias = g.constant(t(&[3], &[0.0; 3]));
        let x = g.constant(t(&[1, 3], &[4.0, 4.0, 4.0]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

        let gain = g.constant(t(&[2], &[1.0; 2]));
        let bias = g.constant(t(&[2], &[0.0; 2]));
        let x = g.constant(t(&[1, 2], &[1.0, -1.0]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-5 && (v[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn relu_mean_concat_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

        let x = g.constant(t(&[1, 2], &[2.0, 4.0]));
        let m = g.mean(x, 1).unwrap();
        assert_eq!(g.value(m).shape(), &[1]);
        assert_eq!(g.value(m).data(), &[3.0]);

        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[1, 1], &[3.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
        assert!(g.concat(&[a, b], 0).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 4], &[0.0; 4]));
        let (loss, per) = g.cross_entropy(x, &[2]).unwrap();
        assert!((g.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);
        assert_eq!(per.len(), 1);

        let x = g.constant(t(&[1, 3], &[100.0, 0.0, 0.0]));
        let (loss, _) = g.cross_entropy(x, &[0]).unwrap();
        assert!(g.value(loss).data()[0] < 1e-12);

        assert!(matches!(
            g.cross_entropy(x, &[3]),
            Err(TensorError::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn fan_out_accumulates_gradients() {
        // y = x*x + x, dy/dx = 2x + 1
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[3.0, -1.5]));
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let s = g.sum_all(y);
        g.backward(s);
        assert_eq!(g.grad(x).unwrap(), &[7.0, -2.0]);
    }

    #[test]
    fn broadcast_add_reduces_bias_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.leaf(t(&[2], &[10.0, 20.0]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 13.0, 24.0, 15.0, 26.0]);
        let s = g.sum_all(y);
        g.backward(s);
        assert_eq!(g.grad(b).unwrap(), &[3.0, 3.0]);
        assert!(g.add(b, x).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let x = g.leaf(t(&[2], &[1.0, 1.0]));
        let y = g.mul(c, x).unwrap();
        let s = g.sum_all(y);
        g.backward(s);
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
    }
}
