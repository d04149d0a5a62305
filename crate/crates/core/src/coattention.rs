//! Query–passage interaction: bilinear-style interaction matrix, two-hop
//! coattention with max-pooling over passages, and width reduction back to
//! the hidden size.

use case_autograd::{Graph, ParamStore, Var};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{CaseError, Result};
use crate::layers::{key_mask, xavier, Ctx, EncoderLayer, LayerNorm, Linear};

/// Token states with their validity mask.
#[derive(Debug, Clone)]
pub struct MaskedStates {
    pub states: Var,
    pub mask: Vec<bool>,
}

impl MaskedStates {
    pub fn unmasked(g: &Graph<'_>, states: Var) -> Self {
        let len = g.shape(states).0;
        MaskedStates {
            states,
            mask: vec![true; len],
        }
    }
}

/// `wᵀ[h_q ⊕ h_d ⊕ (h_q ⊙ h_d)]` for single vectors.
pub fn cross_correlation(h_q: &[f64], h_d: &[f64], w: &[f64]) -> f64 {
    let n = h_q.len();
    assert_eq!(h_d.len(), n, "state sizes differ");
    assert_eq!(w.len(), 3 * n, "weight must have three blocks of the state size");
    (0..n)
        .map(|i| w[i] * h_q[i] + w[n + i] * h_d[i] + w[2 * n + i] * h_q[i] * h_d[i])
        .sum()
}

/// All-pairs cross-correlation `(|Q| × |d|)`, without forming the pairwise
/// concatenations. `w` is a `3N × 1` column.
pub fn interaction_matrix(g: &mut Graph<'_>, h_q: Var, h_d: Var, w: Var) -> Var {
    let n = g.shape(h_q).1;
    let w_q = g.slice_rows(w, 0, n);
    let w_d = g.slice_rows(w, n, 2 * n);
    let w_x = g.slice_rows(w, 2 * n, 3 * n);
    let q_term = g.matmul(h_q, w_q);
    let d_col = g.matmul(h_d, w_d);
    let d_term = g.transpose(d_col);
    let w_row = g.transpose(w_x);
    let scaled_q = g.mul(h_q, w_row);
    let d_t = g.transpose(h_d);
    let x_term = g.matmul(scaled_q, d_t);
    let m = g.add(x_term, q_term);
    g.add(m, d_term)
}

/// Attention maps and intermediate states for one passage set.
#[derive(Debug, Clone)]
pub struct DualIntermediates {
    pub interaction: Vec<Var>,
    /// Per passage, `|Q| × |d|`, rows normalized over passage tokens.
    pub passage_attention: Vec<Var>,
    /// Per passage, `|d| × |Q|`, rows normalized over query tokens.
    pub query_attention: Vec<Var>,
    pub query_hop1: Var,
    pub query_hop2: Var,
    pub passage_hop1: Vec<Var>,
    pub passage_hop2: Vec<Var>,
}

/// Query-aware passage states and passage-aware query states, reduced to
/// the hidden size.
#[derive(Debug, Clone)]
pub struct DualStates {
    pub query: Var,
    pub passages: Vec<Var>,
    pub intermediates: DualIntermediates,
}

#[derive(Debug, Clone)]
struct Reducer {
    project: Linear,
    layers: Vec<EncoderLayer>,
    norm: LayerNorm,
}

impl Reducer {
    fn new(store: &mut ParamStore, name: &str, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let n = config.hidden_size;
        Reducer {
            project: Linear::new(store, &format!("{name}.project"), 5 * n, n, true, rng),
            layers: (0..config.fusion_layers)
                .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), n, config.num_heads, config.ffn_size, rng))
                .collect(),
            norm: LayerNorm::new(store, &format!("{name}.norm"), n),
        }
    }

    fn forward(&self, g: &mut Graph<'_>, parts: [Var; 3], mask: &[bool], ctx: &mut Ctx) -> Var {
        let [h, h1, h2] = parts;
        let p1 = g.mul(h1, h);
        let p2 = g.mul(h2, h);
        let wide = g.concat_cols(&[h, h1, h2, p1, p2]);
        let mut x = self.project.forward(g, wide);
        let additive = mask.iter().any(|&m| !m).then(|| key_mask(mask));
        for layer in &self.layers {
            x = layer.forward(g, x, additive.as_ref(), ctx).0;
        }
        self.norm.forward(g, x)
    }
}

/// One interaction block with its own parameters.
#[derive(Debug, Clone)]
pub struct CoattentionBlock {
    pub weight: case_autograd::ParamId,
    query_reducer: Reducer,
    passage_reducer: Reducer,
}

impl CoattentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let n = config.hidden_size;
        CoattentionBlock {
            weight: store.add(format!("{name}.interaction"), xavier(rng, 3 * n, 1)),
            query_reducer: Reducer::new(store, &format!("{name}.query_reducer"), config, rng),
            passage_reducer: Reducer::new(store, &format!("{name}.passage_reducer"), config, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        query: &MaskedStates,
        passages: &[MaskedStates],
        ctx: &mut Ctx,
    ) -> Result<DualStates> {
        if passages.is_empty() {
            return Err(CaseError::Input("interaction needs at least one passage".into()));
        }
        if !query.mask.iter().any(|&m| m) {
            return Err(CaseError::Input("query is fully masked".into()));
        }
        if let Some(i) = passages.iter().position(|p| !p.mask.iter().any(|&m| m)) {
            return Err(CaseError::Input(format!("passage {i} is fully masked")));
        }
        let w = g.param(self.weight);
        let q_mask = g.constant(key_mask(&query.mask));

        let mut interaction = Vec::with_capacity(passages.len());
        let mut passage_attention = Vec::with_capacity(passages.len());
        let mut query_attention = Vec::with_capacity(passages.len());
        let mut passage_hop1 = Vec::with_capacity(passages.len());
        for p in passages {
            let m = interaction_matrix(g, query.states, p.states, w);
            let d_mask = g.constant(key_mask(&p.mask));
            let over_d = g.add(m, d_mask);
            let m_d = g.softmax_rows(over_d);
            let m_t = g.transpose(m);
            let over_q = g.add(m_t, q_mask);
            let m_q = g.softmax_rows(over_q);
            passage_hop1.push(g.matmul(m_q, query.states));
            interaction.push(m);
            passage_attention.push(m_d);
            query_attention.push(m_q);
        }
        let pooled: Vec<Var> = passages
            .iter()
            .zip(&passage_attention)
            .map(|(p, &m_d)| g.matmul(m_d, p.states))
            .collect();
        let query_hop1 = g.max_of(&pooled);
        let passage_hop2: Vec<Var> = query_attention.iter().map(|&m_q| g.matmul(m_q, query_hop1)).collect();
        let pooled: Vec<Var> = passage_attention
            .iter()
            .zip(&passage_hop1)
            .map(|(&m_d, &h1)| g.matmul(m_d, h1))
            .collect();
        let query_hop2 = g.max_of(&pooled);

        let q = self
            .query_reducer
            .forward(g, [query.states, query_hop1, query_hop2], &query.mask, ctx);
        let mut reduced = Vec::with_capacity(passages.len());
        for (k, p) in passages.iter().enumerate() {
            reduced.push(
                self.passage_reducer
                    .forward(g, [p.states, passage_hop1[k], passage_hop2[k]], &p.mask, ctx),
            );
        }
        Ok(DualStates {
            query: q,
            passages: reduced,
            intermediates: DualIntermediates {
                interaction,
                passage_attention,
                query_attention,
                query_hop1,
                query_hop2,
                passage_hop1,
                passage_hop2,
            },
        })
    }
}
