//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Calling [`Graph::backward`] on a scalar node walks the tape in reverse and
//! returns the gradient of that scalar with respect to every node.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::scalar::{gemm, lit, Scalar};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a channels-last 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Width of one im2col patch row, ordered (ky, kx, channel).
    pub fn patch(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Relu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Reshape(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    MaskedMean {
        x: Var,
        groups: usize,
        len: usize,
        mask: Vec<bool>,
    },
    PairDist {
        a: Var,
        b: Var,
        metric: Metric,
    },
    Min {
        x: Var,
        argmin: usize,
    },
    Mean(Var),
    Sum(Var),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Operation tape for one forward/backward pass.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Var(nodes.len() - 1)
    }

    /// Records a value with no parents.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a shared value (parameters) without copying it.
    pub fn leaf_shared(&self, value: Arc<Tensor<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Attention probabilities `[batch, heads, lq, lk]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<Vec<T>> {
        match &self.nodes.borrow()[v.0].op {
            Op::Attention { probs, .. } => Some(probs.clone()),
            _ => None,
        }
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(&va, &vb, "add");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        self.push(Tensor::new(va.shape(), data), Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(&va, &vb, "sub");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        self.push(Tensor::new(va.shape(), data), Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(&va, &vb, "mul");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        self.push(Tensor::new(va.shape(), data), Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let va = self.value(a);
        self.push(va.map(|x| x * c), Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        let va = self.value(a);
        self.push(va.map(|x| x + c), Op::AddScalar(a))
    }

    /// `x[..., n] + b[n]`, broadcasting `b` over every row.
    pub fn add_row(&self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let n = vx.last_dim();
        assert_eq!(vb.numel(), n, "add_row: width mismatch");
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(vb.data()) {
                *o += bb;
            }
        }
        self.push(Tensor::new(vx.shape(), data), Op::AddRow(x, b))
    }

    fn matmul_value(vx: &Tensor<T>, vw: &Tensor<T>) -> Tensor<T> {
        let k = vx.last_dim();
        assert_eq!(vw.shape().len(), 2, "matmul: weight must be 2-D");
        assert_eq!(vw.shape()[0], k, "matmul: inner dimension mismatch");
        let n = vw.shape()[1];
        let r = vx.rows();
        let mut out = vec![T::zero(); r * n];
        gemm(r, k, n, vx.data(), false, vw.data(), false, &mut out, false);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = n;
        Tensor::new(&shape, out)
    }

    /// `x[..., k] @ w[k, n]`.
    pub fn matmul(&self, x: Var, w: Var) -> Var {
        let value = Self::matmul_value(&self.value(x), &self.value(w));
        self.push(value, Op::MatMul(x, w))
    }

    /// `x[..., k] @ w[k, n] + b[n]`.
    pub fn affine(&self, x: Var, w: Var, b: Var) -> Var {
        let mut value = Self::matmul_value(&self.value(x), &self.value(w));
        let vb = self.value(b);
        let n = value.last_dim();
        assert_eq!(vb.numel(), n, "affine: bias width mismatch");
        for row in value.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(vb.data()) {
                *o += bb;
            }
        }
        self.push(value, Op::Affine(x, w, b))
    }

    pub fn relu(&self, x: Var) -> Var {
        let v = self.value(x);
        self.push(v.map(|a| a.max(T::zero())), Op::Relu(x))
    }

    pub fn tanh(&self, x: Var) -> Var {
        let v = self.value(x);
        self.push(v.map(|a| a.tanh()), Op::Tanh(x))
    }

    /// Normalizes each row over the trailing axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = vx.last_dim();
        assert_eq!(vg.numel(), n, "layer_norm: gamma width");
        assert_eq!(vb.numel(), n, "layer_norm: beta width");
        let nf = lit::<T>(n as f64);
        let mut xhat = Vec::with_capacity(vx.numel());
        let mut inv_std = Vec::with_capacity(vx.rows());
        let mut out = Vec::with_capacity(vx.numel());
        for row in vx.data().chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &a) in row.iter().enumerate() {
                let h = (a - mean) * is;
                xhat.push(h);
                out.push(h * vg.data()[j] + vb.data()[j]);
            }
        }
        self.push(
            Tensor::new(vx.shape(), out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Inverted dropout with a caller-supplied keep mask (1 keeps, 0 drops).
    pub fn dropout_with_mask(&self, x: Var, keep: &[bool], p: T) -> Var {
        let vx = self.value(x);
        assert_eq!(keep.len(), vx.numel(), "dropout: mask size");
        let s = T::one() / (T::one() - p);
        let mask: Vec<T> = keep
            .iter()
            .map(|&k| if k { s } else { T::zero() })
            .collect();
        let data = vx.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        self.push(Tensor::new(vx.shape(), data), Op::Dropout { x, mask })
    }

    /// Scaled dot-product multi-head attention.
    ///
    /// `q` holds `batch × lq` rows, `k` and `v` hold `batch × lk` rows, all of
    /// width `d`. `key_mask` has `batch × lk` entries; masked keys receive
    /// exactly zero weight. A query whose keys are all masked outputs zeros.
    pub fn attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        key_mask: &[bool],
    ) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.last_dim();
        assert_eq!(vk.last_dim(), d, "attention: key width");
        assert_eq!(vv.last_dim(), d, "attention: value width");
        assert_eq!(d % heads, 0, "attention: width not divisible by heads");
        assert_eq!(vq.rows() % batch, 0, "attention: query rows");
        assert_eq!(vk.rows(), vv.rows(), "attention: key/value rows");
        let lq = vq.rows() / batch;
        let lk = vk.rows() / batch;
        assert_eq!(key_mask.len(), batch * lk, "attention: mask size");
        let dh = d / heads;
        let scale = T::one() / lit::<T>(dh as f64).sqrt();
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        let mut probs = vec![T::zero(); batch * heads * lq * lk];
        let mut out = vec![T::zero(); batch * lq * d];
        let mut scores = vec![T::zero(); lk];
        for b in 0..batch {
            let mask = &key_mask[b * lk..(b + 1) * lk];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..lq {
                    let qrow = &qd[(b * lq + i) * d + off..(b * lq + i) * d + off + dh];
                    let mut max = T::neg_infinity();
                    for j in 0..lk {
                        if !mask[j] {
                            continue;
                        }
                        let krow = &kd[(b * lk + j) * d + off..(b * lk + j) * d + off + dh];
                        let s = qrow.iter().zip(krow).map(|(&a, &c)| a * c).sum::<T>() * scale;
                        scores[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    if max == T::neg_infinity() {
                        continue;
                    }
                    let base = ((b * heads + h) * lq + i) * lk;
                    let mut denom = T::zero();
                    for j in 0..lk {
                        if mask[j] {
                            let e = (scores[j] - max).exp();
                            probs[base + j] = e;
                            denom += e;
                        }
                    }
                    let orow = &mut out[(b * lq + i) * d + off..(b * lq + i) * d + off + dh];
                    for j in 0..lk {
                        if !mask[j] {
                            continue;
                        }
                        let p = probs[base + j] / denom;
                        probs[base + j] = p;
                        let vrow = &vd[(b * lk + j) * d + off..(b * lk + j) * d + off + dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let mut shape = vq.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = d;
        self.push(
            Tensor::new(&shape, out),
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            },
        )
    }

    /// Channels-last convolution: `x [N, H, W, C]`, `w [k·k·C, C_out]`, `b [C_out]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(
            vx.numel(),
            geom.batch * geom.in_h * geom.in_w * geom.in_c,
            "conv2d: input size"
        );
        assert_eq!(vw.shape(), &[geom.patch(), geom.out_c], "conv2d: weight shape");
        assert_eq!(vb.numel(), geom.out_c, "conv2d: bias size");
        let cols = im2col(vx.data(), &geom);
        let rows = geom.batch * geom.out_h() * geom.out_w();
        let mut out = vec![T::zero(); rows * geom.out_c];
        gemm(
            rows,
            geom.patch(),
            geom.out_c,
            &cols,
            false,
            vw.data(),
            false,
            &mut out,
            false,
        );
        for row in out.chunks_mut(geom.out_c) {
            for (o, &bb) in row.iter_mut().zip(vb.data()) {
                *o += bb;
            }
        }
        let shape = [geom.batch, geom.out_h(), geom.out_w(), geom.out_c];
        self.push(
            Tensor::new(&shape, out),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
        )
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let vx = self.value(x);
        let value = (*vx).clone().reshaped(shape);
        self.push(value, Op::Reshape(x))
    }

    /// Selects rows (trailing-axis vectors) of `x` by index, with repetition.
    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(vx.row(i));
        }
        self.push(
            Tensor::new(&[idx.len(), d], data),
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Stacks row blocks of equal width into `[Σ rows, d]`.
    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let d = self.value(parts[0]).last_dim();
        let mut data = Vec::new();
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.last_dim(), d, "concat_rows: width mismatch");
            data.extend_from_slice(vp.data());
        }
        let rows = data.len() / d.max(1);
        self.push(Tensor::new(&[rows, d], data), Op::ConcatRows(parts.to_vec()))
    }

    /// Joins `[r, n1]` and `[r, n2]` into `[r, n1 + n2]`.
    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows(), vb.rows(), "concat_cols: row mismatch");
        let (n1, n2) = (va.last_dim(), vb.last_dim());
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        for r in 0..va.rows() {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        self.push(
            Tensor::new(&[va.rows(), n1 + n2], data),
            Op::ConcatCols(a, b),
        )
    }

    /// Mean over the `len` axis of `x [groups, len, d]`, counting only rows
    /// whose mask entry is true. Groups with no true entry produce zeros.
    pub fn masked_mean(&self, x: Var, groups: usize, mask: &[bool]) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        assert_eq!(vx.rows() % groups.max(1), 0, "masked_mean: rows");
        let len = vx.rows() / groups.max(1);
        assert_eq!(mask.len(), groups * len, "masked_mean: mask size");
        let mut out = vec![T::zero(); groups * d];
        for g in 0..groups {
            let count = mask[g * len..(g + 1) * len].iter().filter(|&&m| m).count();
            if count == 0 {
                continue;
            }
            let inv = T::one() / lit::<T>(count as f64);
            let orow = &mut out[g * d..(g + 1) * d];
            for l in 0..len {
                if mask[g * len + l] {
                    for (o, &a) in orow.iter_mut().zip(vx.row(g * len + l)) {
                        *o += a;
                    }
                }
            }
            orow.iter_mut().for_each(|o| *o *= inv);
        }
        self.push(
            Tensor::new(&[groups, d], out),
            Op::MaskedMean {
                x,
                groups,
                len,
                mask: mask.to_vec(),
            },
        )
    }

    /// Pairwise distances between the rows of `a [r, d]` and `b [c, d]`.
    pub fn pair_dist(&self, a: Var, b: Var, metric: Metric) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (r, c) = (va.rows(), vb.rows());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(metric.eval(va.row(i), vb.row(j))?);
            }
        }
        Ok(self.push(Tensor::new(&[r, c], out), Op::PairDist { a, b, metric }))
    }

    /// Smallest entry; ties resolve to the lowest flat index.
    pub fn min_all(&self, x: Var) -> Var {
        let vx = self.value(x);
        assert!(vx.numel() > 0, "min_all: empty input");
        let mut argmin = 0;
        for (i, &v) in vx.data().iter().enumerate() {
            if v < vx.data()[argmin] {
                argmin = i;
            }
        }
        self.push(Tensor::scalar(vx.data()[argmin]), Op::Min { x, argmin })
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let vx = self.value(x);
        assert!(vx.numel() > 0, "mean_all: empty input");
        let m = vx.data().iter().copied().sum::<T>() / lit::<T>(vx.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Gradients of the scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.numel(), 1, "backward: loss must be scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    let slot = acc(grads, v, g.len());
    for (s, &x) in slot.iter_mut().zip(g) {
        *s += x;
    }
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| -> &Tensor<T> { &nodes[v.0].value };
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_into(grads, *a, g);
            add_into(grads, *b, g);
        }
        Op::Sub(a, b) => {
            add_into(grads, *a, g);
            let slot = acc(grads, *b, g.len());
            for (s, &x) in slot.iter_mut().zip(g) {
                *s -= x;
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            let ga: Vec<T> = g.iter().zip(vb).map(|(&x, &y)| x * y).collect();
            let gb: Vec<T> = g.iter().zip(va).map(|(&x, &y)| x * y).collect();
            add_into(grads, *a, &ga);
            add_into(grads, *b, &gb);
        }
        Op::Scale(a, c) => {
            let slot = acc(grads, *a, g.len());
            for (s, &x) in slot.iter_mut().zip(g) {
                *s += x * *c;
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => add_into(grads, *a, g),
        Op::AddRow(x, b) => {
            add_into(grads, *x, g);
            let n = val(*b).numel();
            let slot = acc(grads, *b, n);
            for row in g.chunks(n) {
                for (s, &x) in slot.iter_mut().zip(row) {
                    *s += x;
                }
            }
        }
        Op::MatMul(x, w) | Op::Affine(x, w, _) => {
            let (vx, vw) = (val(*x), val(*w));
            let k = vx.last_dim();
            let n = vw.shape()[1];
            let r = vx.rows();
            // dx = g @ w^T
            let slot = acc(grads, *x, r * k);
            gemm(r, n, k, g, false, vw.data(), true, slot, true);
            // dw = x^T @ g
            let slot = acc(grads, *w, k * n);
            gemm(k, r, n, vx.data(), true, g, false, slot, true);
            if let Op::Affine(_, _, b) = &nodes[id].op {
                let slot = acc(grads, *b, n);
                for row in g.chunks(n) {
                    for (s, &x) in slot.iter_mut().zip(row) {
                        *s += x;
                    }
                }
            }
        }
        Op::Relu(x) => {
            let vx = val(*x).data();
            let slot = acc(grads, *x, g.len());
            for ((s, &gg), &a) in slot.iter_mut().zip(g).zip(vx) {
                if a > T::zero() {
                    *s += gg;
                }
            }
        }
        Op::Tanh(x) => {
            let slot = acc(grads, *x, g.len());
            for ((s, &gg), &y) in slot.iter_mut().zip(g).zip(out.data()) {
                *s += gg * (T::one() - y * y);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let vg = val(*gamma).data();
            let n = vg.len();
            let nf = lit::<T>(n as f64);
            let mut gx = vec![T::zero(); g.len()];
            let mut gg = vec![T::zero(); n];
            let mut gb = vec![T::zero(); n];
            for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                let mut sum_dh = T::zero();
                let mut sum_dh_h = T::zero();
                for j in 0..n {
                    gg[j] += grow[j] * hrow[j];
                    gb[j] += grow[j];
                    let dh = grow[j] * vg[j];
                    sum_dh += dh;
                    sum_dh_h += dh * hrow[j];
                }
                let is = inv_std[r];
                for j in 0..n {
                    let dh = grow[j] * vg[j];
                    gx[r * n + j] = is * (dh - sum_dh / nf - hrow[j] * sum_dh_h / nf);
                }
            }
            add_into(grads, *x, &gx);
            add_into(grads, *gamma, &gg);
            add_into(grads, *beta, &gb);
        }
        Op::Dropout { x, mask } => {
            let gx: Vec<T> = g.iter().zip(mask).map(|(&a, &m)| a * m).collect();
            add_into(grads, *x, &gx);
        }
        Op::Attention {
            q,
            k,
            v,
            batch,
            heads,
            probs,
        } => {
            let (vq, vk, vv) = (val(*q), val(*k), val(*v));
            let d = vq.last_dim();
            let (batch, heads) = (*batch, *heads);
            let lq = vq.rows() / batch;
            let lk = vk.rows() / batch;
            let dh = d / heads;
            let scale = T::one() / lit::<T>(dh as f64).sqrt();
            let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
            let mut gq = vec![T::zero(); vq.numel()];
            let mut gk = vec![T::zero(); vk.numel()];
            let mut gv = vec![T::zero(); vv.numel()];
            let mut dp = vec![T::zero(); lk];
            for b in 0..batch {
                for h in 0..heads {
                    let off = h * dh;
                    for i in 0..lq {
                        let base = ((b * heads + h) * lq + i) * lk;
                        let p = &probs[base..base + lk];
                        let go = &g[(b * lq + i) * d + off..(b * lq + i) * d + off + dh];
                        let mut dot = T::zero();
                        for j in 0..lk {
                            if p[j] == T::zero() {
                                dp[j] = T::zero();
                                continue;
                            }
                            let vrow = (b * lk + j) * d + off;
                            let mut s = T::zero();
                            for c in 0..dh {
                                s += go[c] * vd[vrow + c];
                                gv[vrow + c] += p[j] * go[c];
                            }
                            dp[j] = s;
                            dot += p[j] * s;
                        }
                        let qrow = (b * lq + i) * d + off;
                        for j in 0..lk {
                            if p[j] == T::zero() {
                                continue;
                            }
                            let ds = p[j] * (dp[j] - dot) * scale;
                            let krow = (b * lk + j) * d + off;
                            for c in 0..dh {
                                gq[qrow + c] += ds * kd[krow + c];
                                gk[krow + c] += ds * qd[qrow + c];
                            }
                        }
                    }
                }
            }
            add_into(grads, *q, &gq);
            add_into(grads, *k, &gk);
            add_into(grads, *v, &gv);
        }
        Op::Conv2d {
            x,
            w,
            b,
            geom,
            cols,
        } => {
            let vw = val(*w);
            let rows = geom.batch * geom.out_h() * geom.out_w();
            let (patch, oc) = (geom.patch(), geom.out_c);
            let slot = acc(grads, *w, patch * oc);
            gemm(patch, rows, oc, cols, true, g, false, slot, true);
            let slot = acc(grads, *b, oc);
            for row in g.chunks(oc) {
                for (s, &x) in slot.iter_mut().zip(row) {
                    *s += x;
                }
            }
            let mut dcols = vec![T::zero(); rows * patch];
            gemm(rows, oc, patch, g, false, vw.data(), true, &mut dcols, false);
            let gx = col2im(&dcols, geom);
            add_into(grads, *x, &gx);
        }
        Op::Gather { x, idx } => {
            let vx = val(*x);
            let d = vx.last_dim();
            let slot = acc(grads, *x, vx.numel());
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..d {
                    slot[i * d + c] += g[r * d + c];
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = val(p).numel();
                add_into(grads, p, &g[off..off + n]);
                off += n;
            }
        }
        Op::ConcatCols(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (n1, n2) = (va.last_dim(), vb.last_dim());
            let mut ga = Vec::with_capacity(va.numel());
            let mut gb = Vec::with_capacity(vb.numel());
            for row in g.chunks(n1 + n2) {
                ga.extend_from_slice(&row[..n1]);
                gb.extend_from_slice(&row[n1..]);
            }
            add_into(grads, *a, &ga);
            add_into(grads, *b, &gb);
        }
        Op::MaskedMean {
            x,
            groups,
            len,
            mask,
        } => {
            let vx = val(*x);
            let d = vx.last_dim();
            let slot = acc(grads, *x, vx.numel());
            for gi in 0..*groups {
                let m = &mask[gi * len..(gi + 1) * len];
                let count = m.iter().filter(|&&b| b).count();
                if count == 0 {
                    continue;
                }
                let inv = T::one() / lit::<T>(count as f64);
                for l in 0..*len {
                    if m[l] {
                        let r = gi * len + l;
                        for c in 0..d {
                            slot[r * d + c] += g[gi * d + c] * inv;
                        }
                    }
                }
            }
        }
        Op::PairDist { a, b, metric } => {
            let (va, vb) = (val(*a), val(*b));
            let (r, c, d) = (va.rows(), vb.rows(), va.last_dim());
            let mut ga = vec![T::zero(); va.numel()];
            let mut gb = vec![T::zero(); vb.numel()];
            for i in 0..r {
                for j in 0..c {
                    let gij = g[i * c + j];
                    if gij == T::zero() {
                        continue;
                    }
                    let (u, w) = (va.row(i), vb.row(j));
                    let (gu, gw) = metric.grad(u, w, out.data()[i * c + j]);
                    for t in 0..d {
                        ga[i * d + t] += gij * gu[t];
                        gb[j * d + t] += gij * gw[t];
                    }
                }
            }
            add_into(grads, *a, &ga);
            add_into(grads, *b, &gb);
        }
        Op::Min { x, argmin } => {
            let n = val(*x).numel();
            let slot = acc(grads, *x, n);
            slot[*argmin] += g[0];
        }
        Op::Mean(x) => {
            let n = val(*x).numel();
            let share = g[0] / lit::<T>(n as f64);
            let slot = acc(grads, *x, n);
            slot.iter_mut().for_each(|s| *s += share);
        }
        Op::Sum(x) => {
            let n = val(*x).numel();
            let slot = acc(grads, *x, n);
            slot.iter_mut().for_each(|s| *s += g[0]);
        }
    }
}

fn im2col<T: Scalar>(x: &[T], geom: &ConvGeom) -> Vec<T> {
    let (oh, ow, patch) = (geom.out_h(), geom.out_w(), geom.patch());
    let mut cols = vec![T::zero(); geom.batch * oh * ow * patch];
    let c = geom.in_c;
    for n in 0..geom.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((n * oh + oy) * ow + ox) * patch;
                for ky in 0..geom.kernel {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= geom.in_h as isize {
                        continue;
                    }
                    for kx in 0..geom.kernel {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= geom.in_w as isize {
                            continue;
                        }
                        let src = ((n * geom.in_h + iy as usize) * geom.in_w + ix as usize) * c;
                        let dst = row + (ky * geom.kernel + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], geom: &ConvGeom) -> Vec<T> {
    let (oh, ow, patch) = (geom.out_h(), geom.out_w(), geom.patch());
    let c = geom.in_c;
    let mut x = vec![T::zero(); geom.batch * geom.in_h * geom.in_w * c];
    for n in 0..geom.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((n * oh + oy) * ow + ox) * patch;
                for ky in 0..geom.kernel {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= geom.in_h as isize {
                        continue;
                    }
                    for kx in 0..geom.kernel {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= geom.in_w as isize {
                            continue;
                        }
                        let dst = ((n * geom.in_h + iy as usize) * geom.in_w + ix as usize) * c;
                        let src = row + (ky * geom.kernel + kx) * c;
                        for t in 0..c {
                            x[dst + t] += cols[src + t];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Scalar value of a single-element node.
pub fn scalar_value<T: Scalar>(g: &Graph<T>, v: Var) -> T {
    g.value(v).item()
}

/// Fails with [`Error::NonFiniteLoss`] when `value` is NaN or infinite.
pub fn ensure_finite<T: Scalar>(value: T, batch_seed: u64) -> Result<T> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { batch_seed })
    }
}
