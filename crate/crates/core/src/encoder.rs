//! Transformer encoders for the query history and for candidate passages.

use case_autograd::{Graph, ParamStore, Var};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{CaseError, Result};
use crate::layers::{key_mask, Ctx, Embedding, EncoderLayer, LayerNorm};

/// One encoder stack with its own learned positions.
#[derive(Debug, Clone)]
pub struct SequenceEncoder {
    positions: Embedding,
    layers: Vec<EncoderLayer>,
    norm: LayerNorm,
    max_len: usize,
    label: &'static str,
}

impl SequenceEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &'static str,
        config: &ModelConfig,
        layers: usize,
        max_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let n = config.hidden_size;
        SequenceEncoder {
            positions: Embedding::new(store, &format!("{name}.positions"), max_len, n, rng),
            layers: (0..layers)
                .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), n, config.num_heads, config.ffn_size, rng))
                .collect(),
            norm: LayerNorm::new(store, &format!("{name}.norm"), n),
            max_len,
            label: name,
        }
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Runs the stack over already-embedded rows (positions are added here).
    pub fn forward_embedded(&self, g: &mut Graph<'_>, x: Var, mask: &[bool], ctx: &mut Ctx) -> Result<Var> {
        let len = g.shape(x).0;
        if len == 0 {
            return Err(CaseError::Input(format!("{} input is empty", self.label)));
        }
        if len > self.max_len {
            return Err(CaseError::Input(format!(
                "{} input has {len} positions, limit is {}",
                self.label, self.max_len
            )));
        }
        if mask.len() != len {
            return Err(CaseError::Input(format!("{} mask length does not match input", self.label)));
        }
        let pos: Vec<usize> = (0..len).collect();
        let p = self.positions.forward(g, &pos);
        let x = g.add(x, p);
        let mut x = ctx.dropout(g, x);
        let additive = mask.iter().any(|&m| !m).then(|| key_mask(mask));
        for layer in &self.layers {
            x = layer.forward(g, x, additive.as_ref(), ctx).0;
        }
        Ok(self.norm.forward(g, x))
    }

    /// Attention weights of every head in every layer, for inspection.
    pub fn attention_weights(&self, g: &mut Graph<'_>, x: Var, mask: &[bool]) -> Vec<Var> {
        let len = g.shape(x).0;
        let pos: Vec<usize> = (0..len).collect();
        let p = self.positions.forward(g, &pos);
        let mut x = g.add(x, p);
        let additive = mask.iter().any(|&m| !m).then(|| key_mask(mask));
        let mut all = Vec::new();
        let mut ctx = Ctx::eval();
        for layer in &self.layers {
            let (y, w) = layer.forward(g, x, additive.as_ref(), &mut ctx);
            x = y;
            all.extend(w);
        }
        all
    }
}

/// Shared token embedding plus separate query and passage stacks.
#[derive(Debug, Clone)]
pub struct CpuEncoder {
    pub tokens: Embedding,
    pub query: SequenceEncoder,
    pub passage: SequenceEncoder,
}

fn to_index(ids: &[u32], vocab: usize) -> Result<Vec<usize>> {
    ids.iter()
        .map(|&i| {
            let i = i as usize;
            if i < vocab {
                Ok(i)
            } else {
                Err(CaseError::Input(format!("token id {i} is outside the vocabulary of {vocab}")))
            }
        })
        .collect()
}

impl CpuEncoder {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        CpuEncoder {
            tokens: Embedding::new(store, "embedding", config.vocab_size, config.hidden_size, rng),
            query: SequenceEncoder::new(store, "query_encoder", config, config.encoder_layers, config.max_query_len, rng),
            passage: SequenceEncoder::new(
                store,
                "passage_encoder",
                config,
                config.encoder_layers,
                config.max_passage_len,
                rng,
            ),
        }
    }

    pub fn embed(&self, g: &mut Graph<'_>, ids: &[u32]) -> Result<Var> {
        let idx = to_index(ids, self.tokens.rows)?;
        Ok(self.tokens.forward(g, &idx))
    }

    /// `(len × N)` states for the `[CLS]`-led query history.
    pub fn encode_queries(&self, g: &mut Graph<'_>, ids: &[u32], mask: &[bool], ctx: &mut Ctx) -> Result<Var> {
        check_len(ids.len(), self.query.max_len, "query")?;
        let x = self.embed(g, ids)?;
        self.query.forward_embedded(g, x, mask, ctx)
    }

    /// `(len × N)` states for one `[CLS]`-led passage.
    pub fn encode_passage(&self, g: &mut Graph<'_>, ids: &[u32], mask: &[bool], ctx: &mut Ctx) -> Result<Var> {
        check_len(ids.len(), self.passage.max_len, "passage")?;
        let x = self.embed(g, ids)?;
        self.passage.forward_embedded(g, x, mask, ctx)
    }

    /// Encodes unpadded passages as one padded batch and returns each
    /// passage's rows at its own length.
    pub fn encode_passages(&self, g: &mut Graph<'_>, passages: &[Vec<u32>], pad: u32, ctx: &mut Ctx) -> Result<Vec<Var>> {
        let width = passages.iter().map(Vec::len).max().unwrap_or(0);
        let mut out = Vec::with_capacity(passages.len());
        for p in passages {
            let mut ids = p.clone();
            ids.resize(width, pad);
            let mask: Vec<bool> = (0..width).map(|i| i < p.len()).collect();
            let states = self.encode_passage(g, &ids, &mask, ctx)?;
            out.push(if p.len() == width { states } else { g.slice_rows(states, 0, p.len()) });
        }
        Ok(out)
    }
}

fn check_len(len: usize, max: usize, what: &str) -> Result<()> {
    if len > max {
        return Err(CaseError::Input(format!("{what} has {len} tokens, limit is {max}; truncate first")));
    }
    Ok(())
}
