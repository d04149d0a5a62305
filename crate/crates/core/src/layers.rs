//! Transformer building blocks on top of the autograd graph.

use case_autograd::{Graph, Matrix, ParamId, ParamStore, Var};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Additive logit used for masked attention positions.
pub const MASK_VALUE: f64 = -1e9;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-forward state: dropout randomness, absent in evaluation mode.
pub struct Ctx {
    rng: Option<ChaCha8Rng>,
    rate: f64,
}

impl Ctx {
    pub fn eval() -> Self {
        Ctx { rng: None, rate: 0.0 }
    }

    pub fn train(rate: f64, rng: ChaCha8Rng) -> Self {
        Ctx { rng: Some(rng), rate }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    /// Inverted dropout.
    pub fn dropout(&mut self, g: &mut Graph<'_>, x: Var) -> Var {
        let rate = self.rate;
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        if rate <= 0.0 {
            return x;
        }
        let (r, c) = g.shape(x);
        let keep = 1.0 / (1.0 - rate);
        let mask = Array2::from_shape_fn((r, c), |_| if rng.random::<f64>() < rate { 0.0 } else { keep });
        let m = g.constant(mask);
        g.mul(x, m)
    }
}

/// Glorot-uniform matrix.
pub fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

pub fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, input, output));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Array2::zeros((1, output))));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Array2::ones((1, dim))),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, dim))),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let n = g.layer_norm_rows(x, LAYER_NORM_EPS);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul(n, gain);
        g.add(y, bias)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Embedding {
            table: store.add(format!("{name}.table"), normal(rng, rows, dim, 0.02)),
            rows,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, ids: &[usize]) -> Var {
        debug_assert!(ids.iter().all(|&i| i < self.rows));
        let t = g.param(self.table);
        g.gather_rows(t, ids)
    }
}

/// Additive mask from key validity: 0 for attendable keys, [`MASK_VALUE`]
/// otherwise. Shape `1 × keys`.
pub fn key_mask(valid: &[bool]) -> Matrix {
    Array2::from_shape_fn((1, valid.len()), |(_, j)| if valid[j] { 0.0 } else { MASK_VALUE })
}

/// Lower-triangular mask combined with key validity. Shape `len × len`.
pub fn causal_mask(len: usize, valid: Option<&[bool]>) -> Matrix {
    Array2::from_shape_fn((len, len), |(i, j)| {
        let ok = j <= i && valid.is_none_or(|v| v[j]);
        if ok {
            0.0
        } else {
            MASK_VALUE
        }
    })
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    heads: usize,
}

pub struct AttentionOutput {
    pub output: Var,
    /// One `queries × keys` weight matrix per head.
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(dim.is_multiple_of(heads), "dimension must divide into heads");
        MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, true, rng),
            heads,
        }
    }

    /// `mask` is additive and broadcast against `queries × keys`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, memory: Var, mask: Option<&Matrix>, ctx: &mut Ctx) -> AttentionOutput {
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, memory);
        let v = self.value.forward(g, memory);
        let dim = g.shape(q).1;
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mask = mask.map(|m| g.constant(m.clone()));
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let qh = g.slice_cols(q, lo, hi);
            let kh = g.slice_cols(k, lo, hi);
            let vh = g.slice_cols(v, lo, hi);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m);
            }
            let w = g.softmax_rows(scores);
            weights.push(w);
            let wd = ctx.dropout(g, w);
            outs.push(g.matmul(wd, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        AttentionOutput {
            output: self.output.forward(g, cat),
            weights,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, inner: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), dim, inner, true, rng),
            down: Linear::new(store, &format!("{name}.down"), inner, dim, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, ctx: &mut Ctx) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        let h = ctx.dropout(g, h);
        self.down.forward(g, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    attn_norm: LayerNorm,
    attn: MultiHeadAttention,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, inner: usize, rng: &mut ChaCha8Rng) -> Self {
        EncoderLayer {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, inner, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, mask: Option<&Matrix>, ctx: &mut Ctx) -> (Var, Vec<Var>) {
        let n = self.attn_norm.forward(g, x);
        let a = self.attn.forward(g, n, n, mask, ctx);
        let o = ctx.dropout(g, a.output);
        let x = g.add(x, o);
        let n = self.ffn_norm.forward(g, x);
        let f = self.ffn.forward(g, n, ctx);
        let f = ctx.dropout(g, f);
        (g.add(x, f), a.weights)
    }
}

/// Pre-norm causal self-attention, cross-attention and feed-forward block.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    self_norm: LayerNorm,
    self_attn: MultiHeadAttention,
    cross_norm: LayerNorm,
    cross_attn: MultiHeadAttention,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, inner: usize, rng: &mut ChaCha8Rng) -> Self {
        DecoderLayer {
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), dim),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads, rng),
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), dim),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, heads, rng),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, inner, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        memory: Var,
        self_mask: &Matrix,
        memory_mask: Option<&Matrix>,
        ctx: &mut Ctx,
    ) -> Var {
        let n = self.self_norm.forward(g, x);
        let a = self.self_attn.forward(g, n, n, Some(self_mask), ctx).output;
        let a = ctx.dropout(g, a);
        let x = g.add(x, a);
        let n = self.cross_norm.forward(g, x);
        let c = self.cross_attn.forward(g, n, memory, memory_mask, ctx).output;
        let c = ctx.dropout(g, c);
        let x = g.add(x, c);
        let n = self.ffn_norm.forward(g, x);
        let f = self.ffn.forward(g, n, ctx);
        let f = ctx.dropout(g, f);
        g.add(x, f)
    }
}

/// Two-layer scorer mapping each row to one logit.
#[derive(Debug, Clone)]
pub struct ScoreHead {
    pub hidden: Linear,
    pub output: Linear,
}

impl ScoreHead {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        ScoreHead {
            hidden: Linear::new(store, &format!("{name}.hidden"), dim, dim, true, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, 1, true, rng),
        }
    }

    /// `rows × 1` logits.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.gelu(h);
        self.output.forward(g, h)
    }
}
