//! Parameter storage and the transformer / convolution building blocks.

use std::cell::RefCell;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{ConvGeom, Grads, Graph, Var};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
}

/// Ordered, named parameter tensors. Order is the checkpoint order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value: Arc::new(value),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[i].value)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Reads one scalar by its position in the flattened parameter vector.
    pub fn flat_get(&self, mut i: usize) -> T {
        for p in &self.params {
            if i < p.value.numel() {
                return p.value.data()[i];
            }
            i -= p.value.numel();
        }
        panic!("flat parameter index out of range");
    }

    pub fn flat_set(&mut self, mut i: usize, v: T) {
        for p in &mut self.params {
            let n = p.value.numel();
            if i < n {
                Arc::make_mut(&mut p.value).data_mut()[i] = v;
                return;
            }
            i -= n;
        }
        panic!("flat parameter index out of range");
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &Graph<T>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| g.leaf_shared(Arc::clone(&p.value)))
                .collect(),
        }
    }

    /// Bit-level equality of every value (used by frozen-weight checks).
    pub fn same_values(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits_eq(y))
            })
    }
}

trait BitsEq {
    fn to_bits_eq(&self, other: &Self) -> bool;
}

impl<T: Scalar> BitsEq for T {
    fn to_bits_eq(&self, other: &Self) -> bool {
        self.as_f64().to_bits() == other.as_f64().to_bits()
    }
}

/// Graph handles of a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// One gradient buffer per parameter; untouched parameters get zeros.
    pub fn collect_grads<T: Scalar>(&self, grads: &mut Grads<T>, params: &ParamSet<T>) -> Vec<Vec<T>> {
        self.vars
            .iter()
            .zip(params.iter())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| vec![T::zero(); p.value.numel()]))
            .collect()
    }
}

/// Per-forward state: the graph, train/eval mode and the dropout stream.
pub struct Session<'g, T: Scalar> {
    pub graph: &'g Graph<T>,
    pub train: bool,
    pub dropout_p: f64,
    rng: RefCell<ChaCha8Rng>,
}

impl<'g, T: Scalar> Session<'g, T> {
    pub fn new(graph: &'g Graph<T>, train: bool, dropout_p: f64, seed: u64) -> Self {
        Self {
            graph,
            train,
            dropout_p,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn eval(graph: &'g Graph<T>) -> Self {
        Self::new(graph, false, 0.0, 0)
    }

    /// Identity in eval mode or when `p == 0`.
    pub fn dropout(&self, x: Var) -> Var {
        if !self.train || self.dropout_p <= 0.0 {
            return x;
        }
        let n = self.graph.value(x).numel();
        let keep_p = 1.0 - self.dropout_p;
        let keep: Vec<bool> = {
            let mut rng = self.rng.borrow_mut();
            (0..n).map(|_| rng.random::<f64>() < keep_p).collect()
        };
        self.graph.dropout_with_mask(x, &keep, lit(self.dropout_p))
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
pub fn uniform_fan_in<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| lit::<T>(rng.random_range(-bound..bound)))
            .collect(),
    )
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), uniform_fan_in(rng, &[in_dim, out_dim], in_dim));
        let b = ps.add(format!("{name}.b"), uniform_fan_in(rng, &[out_dim], in_dim));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, p: &Bound, x: Var) -> Var {
        s.graph.affine(x, p.var(self.w), p.var(self.b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::filled(&[dim], T::one())),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, p: &Bound, x: Var) -> Var {
        s.graph
            .layer_norm(x, p.var(self.gamma), p.var(self.beta), lit(LAYER_NORM_EPS))
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        heads: usize,
    ) -> Self {
        Self {
            q: Linear::new(ps, rng, &format!("{name}.q"), d_model, d_model),
            k: Linear::new(ps, rng, &format!("{name}.k"), d_model, d_model),
            v: Linear::new(ps, rng, &format!("{name}.v"), d_model, d_model),
            out: Linear::new(ps, rng, &format!("{name}.out"), d_model, d_model),
            heads,
        }
    }

    /// Returns the output and the raw attention node (for inspection).
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        p: &Bound,
        query: Var,
        memory: Var,
        batch: usize,
        key_mask: &[bool],
    ) -> (Var, Var) {
        let q = self.q.forward(s, p, query);
        let k = self.k.forward(s, p, memory);
        let v = self.v.forward(s, p, memory);
        let att = s.graph.attention(q, k, v, batch, self.heads, key_mask);
        (self.out.forward(s, p, att), att)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        d_ff: usize,
    ) -> Self {
        Self {
            up: Linear::new(ps, rng, &format!("{name}.up"), d_model, d_ff),
            down: Linear::new(ps, rng, &format!("{name}.down"), d_ff, d_model),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, p: &Bound, x: Var) -> Var {
        let h = s.graph.relu(self.up.forward(s, p, x));
        self.down.forward(s, p, h)
    }
}

/// Post-norm transformer encoder block.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ff: FeedForward,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(ps, rng, &format!("{name}.attn"), d_model, heads),
            ff: FeedForward::new(ps, rng, &format!("{name}.ff"), d_model, d_ff),
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), d_model),
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), d_model),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        p: &Bound,
        x: Var,
        batch: usize,
        mask: &[bool],
        probes: &mut Vec<Var>,
    ) -> Var {
        let g = s.graph;
        let (a, att) = self.attn.forward(s, p, x, x, batch, mask);
        probes.push(att);
        let x = self.norm1.forward(s, p, g.add(x, s.dropout(a)));
        let f = self.ff.forward(s, p, x);
        self.norm2.forward(s, p, g.add(x, s.dropout(f)))
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        blocks: usize,
        d_model: usize,
        heads: usize,
        d_ff: usize,
    ) -> Self {
        Self {
            layers: (0..blocks)
                .map(|i| EncoderLayer::new(ps, rng, &format!("{name}.{i}"), d_model, heads, d_ff))
                .collect(),
        }
    }

    /// `x` holds `batch × len` rows; `mask` marks the real positions.
    pub fn forward<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        p: &Bound,
        mut x: Var,
        batch: usize,
        mask: &[bool],
        probes: &mut Vec<Var>,
    ) -> Var {
        for layer in &self.layers {
            x = layer.forward(s, p, x, batch, mask, probes);
        }
        x
    }
}

/// Post-norm transformer decoder block (self-attention, cross-attention, FF).
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub ff: FeedForward,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
    ) -> Self {
        Self {
            self_attn: MultiHeadAttention::new(ps, rng, &format!("{name}.self_attn"), d_model, heads),
            cross_attn: MultiHeadAttention::new(ps, rng, &format!("{name}.cross_attn"), d_model, heads),
            ff: FeedForward::new(ps, rng, &format!("{name}.ff"), d_model, d_ff),
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), d_model),
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), d_model),
            norm3: LayerNorm::new(ps, &format!("{name}.norm3"), d_model),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        p: &Bound,
        tgt: Var,
        tgt_len: usize,
        memory: Var,
        memory_mask: &[bool],
        probes: &mut Vec<Var>,
    ) -> Var {
        let g = s.graph;
        let all = vec![true; tgt_len];
        let (a, att) = self.self_attn.forward(s, p, tgt, tgt, 1, &all);
        probes.push(att);
        let x = self.norm1.forward(s, p, g.add(tgt, s.dropout(a)));
        let (c, att) = self.cross_attn.forward(s, p, x, memory, 1, memory_mask);
        probes.push(att);
        let x = self.norm2.forward(s, p, g.add(x, s.dropout(c)));
        let f = self.ff.forward(s, p, x);
        self.norm3.forward(s, p, g.add(x, s.dropout(f)))
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
}

impl Decoder {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        blocks: usize,
        d_model: usize,
        heads: usize,
        d_ff: usize,
    ) -> Self {
        Self {
            layers: (0..blocks)
                .map(|i| DecoderLayer::new(ps, rng, &format!("{name}.{i}"), d_model, heads, d_ff))
                .collect(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        p: &Bound,
        mut tgt: Var,
        tgt_len: usize,
        memory: Var,
        memory_mask: &[bool],
        probes: &mut Vec<Var>,
    ) -> Var {
        for layer in &self.layers {
            tgt = layer.forward(s, p, tgt, tgt_len, memory, memory_mask, probes);
        }
        tgt
    }
}

/// 3×3 (or k×k) channels-last convolution.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = kernel * kernel * in_c;
        Self {
            w: ps.add(format!("{name}.w"), uniform_fan_in(rng, &[fan_in, out_c], fan_in)),
            b: ps.add(format!("{name}.b"), uniform_fan_in(rng, &[out_c], fan_in)),
            in_c,
            out_c,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward<T: Scalar>(
        &self,
        s: &Session<'_, T>,
        p: &Bound,
        x: Var,
        batch: usize,
        h: usize,
        w: usize,
    ) -> Var {
        let geom = ConvGeom {
            batch,
            in_h: h,
            in_w: w,
            in_c: self.in_c,
            out_c: self.out_c,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        };
        s.graph.conv2d(x, p.var(self.w), p.var(self.b), geom)
    }
}

pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
