//! Transformer building blocks recorded onto a [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

pub(crate) const NEG_INF: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

pub(crate) fn normal<F: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            F::from_f64(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn filled<F: Scalar>(shape: &[usize], v: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), vec![F::from_f64(v); n]).expect("shape matches")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, inp: usize, out: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (inp as f64).sqrt();
        Self {
            w: store.add(format!("{name}.w"), normal(&[inp, out], std, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[out])),
        }
    }

    /// `x @ w + b` for `x` of shape `[rows, inp]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, s: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(s.get(self.w))?;
        let b = g.param(s.get(self.b))?;
        let y = g.matmul(x, w, false, false)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), filled(&[width], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, s: &ParamStore<F>, x: Var) -> Result<Var> {
        let gamma = g.param(s.get(self.gamma))?;
        let beta = g.param(s.get(self.beta))?;
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Shapes of one attention call: `batch` sequences, `tq` queries and `tk`
/// keys per sequence.
#[derive(Debug, Clone, Copy)]
pub struct AttnShape {
    pub batch: usize,
    pub tq: usize,
    pub tk: usize,
}

impl Attention {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, width: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, rng),
            o: Linear::new(store, &format!("{name}.o"), width, width, rng),
            heads,
        }
    }

    /// `[batch * t, width]` -> `[batch * heads, t, width / heads]`.
    fn split_heads<F: Scalar>(&self, g: &mut Graph<F>, x: Var, batch: usize, t: usize) -> Result<Var> {
        let width = g.shape(x)[1];
        let dh = width / self.heads;
        let x = g.reshape(x, &[batch, t, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[batch * self.heads, t, dh])
    }

    /// `query` is `[batch * tq, width]`, `memory` is `[batch * tk, width]`;
    /// `mask` is an additive `[batch * heads, tq, tk]` constant.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        s: &ParamStore<F>,
        query: Var,
        memory: Var,
        shape: AttnShape,
        mask: Option<Var>,
    ) -> Result<Var> {
        let AttnShape { batch, tq, tk } = shape;
        let width = g.shape(query)[1];
        let dh = width / self.heads;
        let q = self.q.forward(g, s, query)?;
        let k = self.k.forward(g, s, memory)?;
        let v = self.v.forward(g, s, memory)?;
        let q = self.split_heads(g, q, batch, tq)?;
        let k = self.split_heads(g, k, batch, tk)?;
        let v = self.split_heads(g, v, batch, tk)?;
        let scores = g.matmul(q, k, false, true)?;
        let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        let att = g.softmax(scores)?;
        let ctx = g.matmul(att, v, false, false)?;
        let ctx = g.reshape(ctx, &[batch, self.heads, tq, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[batch * tq, width])?;
        self.o.forward(g, s, ctx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, width: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), width, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, width, rng),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, s: &ParamStore<F>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, s, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, s, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderLayer {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        width: usize,
        heads: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), width),
            attn: Attention::new(store, &format!("{name}.attn"), width, heads, rng),
            norm2: Norm::new(store, &format!("{name}.norm2"), width),
            ff: FeedForward::new(store, &format!("{name}.ff"), width, hidden, rng),
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        s: &ParamStore<F>,
        x: Var,
        batch: usize,
        t: usize,
        mask: Option<Var>,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, s, x)?;
        let a = self.attn.forward(g, s, h, h, AttnShape { batch, tq: t, tk: t }, mask)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, s, x)?;
        let f = self.ff.forward(g, s, h)?;
        g.add(x, f)
    }
}

/// Pre-norm causal self-attention, cross-attention, and feed-forward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderLayer {
    pub norm1: Norm,
    pub self_attn: Attention,
    pub norm2: Norm,
    pub cross_attn: Attention,
    pub norm3: Norm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        width: usize,
        heads: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), width),
            self_attn: Attention::new(store, &format!("{name}.self_attn"), width, heads, rng),
            norm2: Norm::new(store, &format!("{name}.norm2"), width),
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), width, heads, rng),
            norm3: Norm::new(store, &format!("{name}.norm3"), width),
            ff: FeedForward::new(store, &format!("{name}.ff"), width, hidden, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        s: &ParamStore<F>,
        y: Var,
        memory: Var,
        batch: usize,
        ty: usize,
        tm: usize,
        self_mask: Var,
        cross_mask: Option<Var>,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, s, y)?;
        let a = self
            .self_attn
            .forward(g, s, h, h, AttnShape { batch, tq: ty, tk: ty }, Some(self_mask))?;
        let y = g.add(y, a)?;
        let h = self.norm2.forward(g, s, y)?;
        let c = self
            .cross_attn
            .forward(g, s, h, memory, AttnShape { batch, tq: ty, tk: tm }, cross_mask)?;
        let y = g.add(y, c)?;
        let h = self.norm3.forward(g, s, y)?;
        let f = self.ff.forward(g, s, h)?;
        g.add(y, f)
    }
}

/// Additive mask `[batch * heads, tq, tk]` hiding padded keys and, when
/// `causal`, keys after the query position.
pub(crate) fn attention_mask<F: Scalar>(
    key_valid: &[bool],
    batch: usize,
    heads: usize,
    tq: usize,
    tk: usize,
    causal: bool,
) -> Tensor<F> {
    debug_assert_eq!(key_valid.len(), batch * tk);
    let neg = F::from_f64(NEG_INF);
    let mut data = vec![F::zero(); batch * heads * tq * tk];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..tq {
                let row = ((b * heads + h) * tq + i) * tk;
                for j in 0..tk {
                    if !key_valid[b * tk + j] || (causal && j > i) {
                        data[row + j] = neg;
                    }
                }
            }
        }
    }
    Tensor::new(vec![batch * heads, tq, tk], data).expect("mask shape")
}
