//! Passage relevance scoring and its binary cross-entropy loss.

use case_autograd::{Graph, ParamStore, Var};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::coattention::{CoattentionBlock, DualStates};
use crate::config::ModelConfig;
use crate::error::{CaseError, Result};
use crate::layers::ScoreHead;

/// Probability clamp applied before taking logs in the selection losses.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct PassageSelector {
    pub interaction: CoattentionBlock,
    pub head: ScoreHead,
}

/// `K × 1` logits and sigmoid probabilities, one row per passage.
#[derive(Debug, Clone, Copy)]
pub struct PassageRelevance {
    pub logits: Var,
    pub probabilities: Var,
}

impl PassageSelector {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        PassageSelector {
            interaction: CoattentionBlock::new(store, "selector.interaction", config, rng),
            head: ScoreHead::new(store, "selector.head", config.hidden_size, rng),
        }
    }

    /// Scores each passage from its first (`[CLS]`) row.
    pub fn relevance(&self, g: &mut Graph<'_>, dual: &DualStates) -> PassageRelevance {
        relevance_from_states(g, &self.head, dual)
    }
}

pub fn relevance_from_states(g: &mut Graph<'_>, head: &ScoreHead, dual: &DualStates) -> PassageRelevance {
    let firsts: Vec<Var> = dual.passages.iter().map(|&p| g.slice_rows(p, 0, 1)).collect();
    let stacked = g.concat_rows(&firsts);
    let logits = head.forward(g, stacked);
    PassageRelevance {
        logits,
        probabilities: g.sigmoid(logits),
    }
}

/// Mean binary cross entropy of `K × 1` probabilities against labels.
pub fn rps_loss(g: &mut Graph<'_>, probabilities: Var, labels: &[bool]) -> Result<Var> {
    let (k, _) = g.shape(probabilities);
    if k != labels.len() {
        return Err(CaseError::Input(format!(
            "{} relevance labels for {k} passages",
            labels.len()
        )));
    }
    let y = Array2::from_shape_fn((k, 1), |(i, _)| if labels[i] { 1.0 } else { 0.0 });
    let not_y = y.mapv(|v| 1.0 - v);
    Ok(weighted_log_likelihood(g, probabilities, y, not_y, k as f64))
}

/// `-Σ [a·log p + b·log(1-p)] / count`.
pub(crate) fn weighted_log_likelihood(g: &mut Graph<'_>, p: Var, pos: Array2<f64>, neg: Array2<f64>, count: f64) -> Var {
    let pc = g.clamp_min(p, PROB_EPS);
    let log_p = g.log(pc);
    let q = g.one_minus(p);
    let qc = g.clamp_min(q, PROB_EPS);
    let log_q = g.log(qc);
    let a = g.constant(pos);
    let b = g.constant(neg);
    let t1 = g.mul(log_p, a);
    let t2 = g.mul(log_q, b);
    let t = g.add(t1, t2);
    let s = g.sum_all(t);
    g.scale(s, -1.0 / count)
}

/// Passage indices by descending probability; ties keep input order.
pub fn ranking(probabilities: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probabilities.len()).collect();
    order.sort_by(|&a, &b| probabilities[b].total_cmp(&probabilities[a]));
    order
}
