//! Response decoder: two stacked transformer decoders, a vocabulary
//! generator, query and passage pointers weighted by the selection priors,
//! mode mixing, the likelihood loss and greedy/beam generation.

use case_autograd::{Graph, ParamStore, Var};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{CaseError, Result};
use crate::layers::{causal_mask, key_mask, Ctx, DecoderLayer, Embedding, LayerNorm, Linear};

/// Probability floor before the log in the generation loss.
pub const LIKELIHOOD_EPS: f64 = 1e-9;

/// Relevance and support priors plus the token states they weight.
#[derive(Debug, Clone)]
pub struct PriorBundle {
    /// `K × 1` passage priors in (0, 1).
    pub passage: Var,
    /// Per passage, `len × 1`, zero at `[CLS]` and padding.
    pub support: Vec<Var>,
    /// Per passage, `len × N` states from the support scorer's interaction.
    pub token_states: Vec<Var>,
}

/// `1/K` for every passage.
pub fn uniform_passage_prior(k: usize) -> Array2<f64> {
    Array2::from_elem((k, 1), 1.0 / k as f64)
}

/// `1/n` over the `n` content positions, zero elsewhere.
pub fn uniform_support_prior(content: &[bool]) -> Array2<f64> {
    let n = content.iter().filter(|&&c| c).count().max(1) as f64;
    Array2::from_shape_fn((content.len(), 1), |(i, _)| if content[i] { 1.0 / n } else { 0.0 })
}

/// `Σ_k P_k Σ_i s_ki h_ki` as a `1 × N` row.
pub fn answer_representation(g: &mut Graph<'_>, priors: &PriorBundle) -> Var {
    let mut acc: Option<Var> = None;
    for (k, (&s, &h)) in priors.support.iter().zip(&priors.token_states).enumerate() {
        let st = g.transpose(s);
        let weighted = g.matmul(st, h);
        let p = g.slice_rows(priors.passage, k, k + 1);
        let term = g.mul(weighted, p);
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    acc.expect("at least one passage")
}

/// What the pointers can copy from: interaction-block states with their ids.
#[derive(Debug, Clone)]
pub struct CopySources<'a> {
    pub query_states: Var,
    pub query_ids: &'a [u32],
    pub query_mask: &'a [bool],
    pub passage_states: Vec<Var>,
    pub passage_ids: &'a [Vec<u32>],
    pub passage_masks: &'a [Vec<bool>],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum PointerKind {
    /// Passage copy weighted by passage and support priors.
    #[default]
    PriorAware,
    /// Unweighted per-passage attention averaged uniformly.
    Plain,
}

/// Per-step (row) distributions for a teacher-forced prefix.
#[derive(Debug, Clone)]
pub struct ModeDistribution {
    /// `T × 3`: generate, copy from query, copy from passages.
    pub modes: Var,
    /// `T × V` vocabulary softmax.
    pub vocab: Var,
    /// `T × |Q|` query pointer weights.
    pub query_positions: Var,
    pub query_copy: Var,
    /// Per passage, `T × len` pointer weights after prior reweighting.
    pub passage_positions: Vec<Var>,
    /// `K × 1` passage weights used by the passage pointer.
    pub passage_weights: Var,
    pub passage_copy: Var,
    /// `T × V` mixture.
    pub mixed: Var,
}

/// `wᵀ tanh(W_q q + W_k k)` scored for every (query row, key row) pair.
#[derive(Debug, Clone)]
pub struct AdditiveAttention {
    query: Linear,
    key: Linear,
    score: Linear,
}

impl AdditiveAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        AdditiveAttention {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, false, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, rng),
            score: Linear::new(store, &format!("{name}.score"), dim, 1, false, rng),
        }
    }

    /// `T × L` unnormalized scores.
    pub fn scores(&self, g: &mut Graph<'_>, queries: Var, keys: Var) -> Var {
        let t = g.shape(queries).0;
        let l = g.shape(keys).0;
        let a = self.query.forward(g, queries);
        let b = self.key.forward(g, keys);
        let qi: Vec<usize> = (0..t).flat_map(|j| std::iter::repeat_n(j, l)).collect();
        let ki: Vec<usize> = (0..t).flat_map(|_| 0..l).collect();
        let a = g.gather_rows(a, &qi);
        let b = g.gather_rows(b, &ki);
        let s = g.add(a, b);
        let s = g.tanh(s);
        let s = self.score.forward(g, s);
        g.reshape(s, t, l)
    }
}

/// Pointer mask: padding always, `[CLS]` whenever anything else is left.
fn pointer_mask(mask: &[bool]) -> Vec<bool> {
    let others = mask.iter().skip(1).any(|&m| m);
    mask.iter().enumerate().map(|(i, &m)| m && !(i == 0 && others)).collect()
}

fn to_index(ids: &[u32]) -> Vec<usize> {
    ids.iter().map(|&i| i as usize).collect()
}

#[derive(Debug, Clone)]
pub struct ResponseDecoder {
    positions: Embedding,
    query_stack: Vec<DecoderLayer>,
    query_norm: LayerNorm,
    passage_stack: Vec<DecoderLayer>,
    passage_norm: LayerNorm,
    generate_hidden: Linear,
    generate_out: Linear,
    query_pointer: AdditiveAttention,
    passage_pointer: AdditiveAttention,
    mode: Linear,
    vocab_size: usize,
    max_len: usize,
}

impl ResponseDecoder {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let n = config.hidden_size;
        let layer = |store: &mut ParamStore, name: String, rng: &mut ChaCha8Rng| {
            DecoderLayer::new(store, &name, n, config.num_heads, config.ffn_size, rng)
        };
        ResponseDecoder {
            positions: Embedding::new(store, "decoder.positions", config.max_response_len, n, rng),
            query_stack: (0..config.decoder_layers)
                .map(|i| layer(store, format!("decoder.query_stack{i}"), rng))
                .collect(),
            query_norm: LayerNorm::new(store, "decoder.query_norm", n),
            passage_stack: (0..config.decoder_layers)
                .map(|i| layer(store, format!("decoder.passage_stack{i}"), rng))
                .collect(),
            passage_norm: LayerNorm::new(store, "decoder.passage_norm", n),
            generate_hidden: Linear::new(store, "decoder.generate_hidden", 3 * n, n, true, rng),
            generate_out: Linear::new(store, "decoder.generate_out", n, config.vocab_size, true, rng),
            query_pointer: AdditiveAttention::new(store, "decoder.query_pointer", n, rng),
            passage_pointer: AdditiveAttention::new(store, "decoder.passage_pointer", n, rng),
            mode: Linear::new(store, "decoder.mode", 3 * n, 3, false, rng),
            vocab_size: config.vocab_size,
            max_len: config.max_response_len,
        }
    }

    pub fn mode_layer(&self) -> &Linear {
        &self.mode
    }

    /// Distributions for every position of `prefix` (row `j` predicts the
    /// token after `prefix[j]`).
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        tokens: &Embedding,
        prefix: &[u32],
        sources: &CopySources<'_>,
        priors: &PriorBundle,
        pointer: PointerKind,
        ctx: &mut Ctx,
    ) -> Result<ModeDistribution> {
        let t = prefix.len();
        if t == 0 {
            return Err(CaseError::Input("decoder prefix is empty".into()));
        }
        if t > self.max_len {
            return Err(CaseError::Input(format!(
                "decoder prefix has {t} tokens, limit is {}",
                self.max_len
            )));
        }
        if let Some(&bad) = prefix.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(CaseError::Input(format!("token id {bad} is outside the vocabulary")));
        }
        let k = sources.passage_states.len();
        if k == 0 || sources.passage_ids.len() != k || priors.support.len() != k {
            return Err(CaseError::Input("decoder needs aligned, non-empty passage inputs".into()));
        }

        // Stacked decoders.
        let emb = tokens.forward(g, &to_index(prefix));
        let pos: Vec<usize> = (0..t).collect();
        let p = self.positions.forward(g, &pos);
        let x = g.add(emb, p);
        let mut x = ctx.dropout(g, x);
        let causal = causal_mask(t, None);
        let q_mem_mask = sources.query_mask.iter().any(|&m| !m).then(|| key_mask(sources.query_mask));
        for layer in &self.query_stack {
            x = layer.forward(g, x, sources.query_states, &causal, q_mem_mask.as_ref(), ctx);
        }
        let h_query = self.query_norm.forward(g, x);

        let d_memory = if k == 1 {
            sources.passage_states[0]
        } else {
            g.concat_rows(&sources.passage_states)
        };
        let all_d_mask: Vec<bool> = sources.passage_masks.iter().flatten().copied().collect();
        let d_mem_mask = all_d_mask.iter().any(|&m| !m).then(|| key_mask(&all_d_mask));
        let mut x = h_query;
        for layer in &self.passage_stack {
            x = layer.forward(g, x, d_memory, &causal, d_mem_mask.as_ref(), ctx);
        }
        let h_passage = self.passage_norm.forward(g, x);

        // Vocabulary generation.
        let answer = answer_representation(g, priors);
        let answer_rows = g.gather_rows(answer, &vec![0; t]);
        let gen_in = g.concat_cols(&[emb, h_passage, answer_rows]);
        let gen_h = self.generate_hidden.forward(g, gen_in);
        let gen_h = g.gelu(gen_h);
        let gen_logits = self.generate_out.forward(g, gen_h);
        let vocab = g.softmax_rows(gen_logits);

        // Query pointer.
        let q_scores = self.query_pointer.scores(g, h_query, sources.query_states);
        let q_mask = g.constant(key_mask(&pointer_mask(sources.query_mask)));
        let q_scores = g.add(q_scores, q_mask);
        let query_positions = g.softmax_rows(q_scores);
        let query_copy = g.scatter_cols(query_positions, &to_index(sources.query_ids), self.vocab_size);
        let query_context = g.matmul(query_positions, sources.query_states);

        // Passage pointer.
        let passage_weights = match pointer {
            PointerKind::PriorAware => {
                let total = g.sum_all(priors.passage);
                g.div(priors.passage, total)
            }
            PointerKind::Plain => g.constant(uniform_passage_prior(k)),
        };
        let mut passage_positions = Vec::with_capacity(k);
        let mut weighted = Vec::with_capacity(k);
        for i in 0..k {
            let mask = &sources.passage_masks[i];
            if !mask.iter().skip(1).any(|&m| m) {
                return Err(CaseError::Input(format!("passage {i} has no content tokens")));
            }
            let scores = self.passage_pointer.scores(g, h_passage, sources.passage_states[i]);
            let m = g.constant(key_mask(&pointer_mask(mask)));
            let scores = g.add(scores, m);
            let alpha = g.softmax_rows(scores);
            let beta = match pointer {
                PointerKind::PriorAware => {
                    let s = g.transpose(priors.support[i]);
                    let prod = g.mul(alpha, s);
                    let norm = g.row_sums(prod);
                    let norm = g.clamp_min(norm, 1e-300);
                    g.div(prod, norm)
                }
                PointerKind::Plain => alpha,
            };
            passage_positions.push(beta);
            let w = g.slice_rows(passage_weights, i, i + 1);
            weighted.push(g.mul(beta, w));
        }
        let all_ids: Vec<usize> = sources.passage_ids.iter().flatten().map(|&i| i as usize).collect();
        let weighted_all = if k == 1 { weighted[0] } else { g.concat_cols(&weighted) };
        let passage_copy = g.scatter_cols(weighted_all, &all_ids, self.vocab_size);
        let passage_context = g.matmul(weighted_all, d_memory);

        // Mode mixing.
        let mode_in = g.concat_cols(&[h_passage, query_context, passage_context]);
        let mode_logits = self.mode.forward(g, mode_in);
        let modes = g.softmax_rows(mode_logits);
        let mixed = mix_modes(g, modes, vocab, query_copy, passage_copy);

        Ok(ModeDistribution {
            modes,
            vocab,
            query_positions,
            query_copy,
            passage_positions,
            passage_weights,
            passage_copy,
            mixed,
        })
    }
}

/// `λ_g·P_g + λ_q·P_q + λ_d·P_d` row by row.
pub fn mix_modes(g: &mut Graph<'_>, modes: Var, vocab: Var, query_copy: Var, passage_copy: Var) -> Var {
    let w_g = g.slice_cols(modes, 0, 1);
    let w_q = g.slice_cols(modes, 1, 2);
    let w_d = g.slice_cols(modes, 2, 3);
    let a = g.mul(vocab, w_g);
    let b = g.mul(query_copy, w_q);
    let c = g.mul(passage_copy, w_d);
    let ab = g.add(a, b);
    g.add(ab, c)
}

/// Mean negative log-likelihood of `targets` (one per row).
pub fn rg_loss(g: &mut Graph<'_>, mixed: Var, targets: &[u32]) -> Result<Var> {
    let (t, _) = g.shape(mixed);
    if t != targets.len() {
        return Err(CaseError::Input(format!(
            "{} targets for {t} decoder positions",
            targets.len()
        )));
    }
    let picked = g.pick(mixed, &to_index(targets));
    let floor = g.clamp_min(picked, LIKELIHOOD_EPS);
    let logs = g.log(floor);
    let mean = g.mean_all(logs);
    Ok(g.scale(mean, -1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeStrategy {
    Greedy,
    Beam(usize),
}

/// Lowest index among the maxima.
fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Decodes from `bos` until `eos` or `max_new` tokens. `next` returns the
/// next-token distribution for a prefix. The result excludes `bos`/`eos`.
pub fn generate(
    mut next: impl FnMut(&[u32]) -> Result<Vec<f64>>,
    bos: u32,
    eos: u32,
    max_new: usize,
    strategy: DecodeStrategy,
) -> Result<Vec<u32>> {
    match strategy {
        DecodeStrategy::Greedy => {
            let mut prefix = vec![bos];
            for _ in 0..max_new {
                let p = next(&prefix)?;
                let tok = argmax(&p) as u32;
                if tok == eos {
                    break;
                }
                prefix.push(tok);
            }
            Ok(prefix[1..].to_vec())
        }
        DecodeStrategy::Beam(width) => beam_search(next, bos, eos, max_new, width.max(1)),
    }
}

fn beam_search(
    mut next: impl FnMut(&[u32]) -> Result<Vec<f64>>,
    bos: u32,
    eos: u32,
    max_new: usize,
    width: usize,
) -> Result<Vec<u32>> {
    // (tokens after bos, summed log-probability)
    let mut alive: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
    for _ in 0..max_new {
        let mut candidates: Vec<(usize, u32, f64)> = Vec::new();
        for (h, (tokens, score)) in alive.iter().enumerate() {
            let mut prefix = Vec::with_capacity(tokens.len() + 1);
            prefix.push(bos);
            prefix.extend_from_slice(tokens);
            let p = next(&prefix)?;
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
            for &tok in order.iter().take(width) {
                candidates.push((h, tok as u32, score + p[tok].ln()));
            }
        }
        // stable: earlier hypothesis, then higher-probability token, wins ties
        candidates.sort_by(|a, b| b.2.total_cmp(&a.2));
        let mut next_alive = Vec::with_capacity(width);
        for (h, tok, score) in candidates.into_iter().take(width) {
            let mut tokens = alive[h].0.clone();
            if tok == eos {
                finished.push((tokens, score));
            } else {
                tokens.push(tok);
                next_alive.push((tokens, score));
            }
        }
        alive = next_alive;
        if alive.is_empty() || finished.len() >= width {
            break;
        }
    }
    // Length counts the emitted end token for finished hypotheses.
    let normalized = |(tokens, score): &(Vec<u32>, f64), done: bool| {
        let len = tokens.len() + usize::from(done);
        score / len.max(1) as f64
    };
    let mut best: Option<(&Vec<u32>, f64)> = None;
    let pool: Vec<(&(Vec<u32>, f64), bool)> = if finished.is_empty() {
        alive.iter().map(|h| (h, false)).collect()
    } else {
        finished.iter().map(|h| (h, true)).collect()
    };
    for (h, done) in pool {
        let s = normalized(h, done);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((&h.0, s));
        }
    }
    Ok(best.map(|(t, _)| t.clone()).unwrap_or_default())
}
