//! Supporting-token scoring and the confidence-weighted cross-entropy loss
//! trained from weak labels.

use case_autograd::{Graph, ParamStore, Var};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::coattention::{CoattentionBlock, DualStates};
use crate::config::ModelConfig;
use crate::corpus::WeakSupportLabels;
use crate::error::{CaseError, Result};
use crate::layers::ScoreHead;
use crate::rps::weighted_log_likelihood;

#[derive(Debug, Clone)]
pub struct TokenSupporter {
    pub interaction: CoattentionBlock,
    pub head: ScoreHead,
}

/// Per passage: raw sigmoid probabilities (`len × 1`) and the same values
/// with `[CLS]` and padding forced to zero.
#[derive(Debug, Clone)]
pub struct SupportDistribution {
    pub raw: Vec<Var>,
    pub masked: Vec<Var>,
    /// Content positions (not `[CLS]`, not padding), per passage.
    pub content: Vec<Vec<bool>>,
}

/// Positions after the leading `[CLS]` that are not padding.
pub fn content_mask(mask: &[bool]) -> Vec<bool> {
    mask.iter().enumerate().map(|(i, &m)| i > 0 && m).collect()
}

fn column(values: &[bool]) -> Array2<f64> {
    Array2::from_shape_fn((values.len(), 1), |(i, _)| if values[i] { 1.0 } else { 0.0 })
}

impl TokenSupporter {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        TokenSupporter {
            interaction: CoattentionBlock::new(store, "supporter.interaction", config, rng),
            head: ScoreHead::new(store, "supporter.head", config.hidden_size, rng),
        }
    }

    /// `masks[k]` marks the real (non-padding) positions of passage `k`.
    pub fn support(&self, g: &mut Graph<'_>, dual: &DualStates, masks: &[Vec<bool>]) -> SupportDistribution {
        support_from_states(g, &self.head, dual, masks)
    }
}

pub fn support_from_states(g: &mut Graph<'_>, head: &ScoreHead, dual: &DualStates, masks: &[Vec<bool>]) -> SupportDistribution {
    let mut raw = Vec::with_capacity(dual.passages.len());
    let mut masked = Vec::with_capacity(dual.passages.len());
    let mut content = Vec::with_capacity(dual.passages.len());
    for (&states, mask) in dual.passages.iter().zip(masks) {
        let logits = head.forward(g, states);
        let p = g.sigmoid(logits);
        let c = content_mask(mask);
        let keep = g.constant(column(&c));
        raw.push(p);
        masked.push(g.mul(p, keep));
        content.push(c);
    }
    SupportDistribution { raw, masked, content }
}

/// `-Σ_k Σ_i [c·ŷ·log p + (1-ŷ)·log(1-p)]` averaged over content tokens.
pub fn sti_loss(g: &mut Graph<'_>, support: &SupportDistribution, weak: &WeakSupportLabels) -> Result<Var> {
    let k = support.raw.len();
    if weak.labels.len() != k || weak.confidence.len() != k {
        return Err(CaseError::Input(format!(
            "weak labels cover {} passages, expected {k}",
            weak.labels.len()
        )));
    }
    let total: usize = support.content.iter().map(|c| c.iter().filter(|&&b| b).count()).sum();
    if total == 0 {
        return Err(CaseError::Input("no content tokens to supervise".into()));
    }
    let mut parts = Vec::with_capacity(k);
    for p in 0..k {
        let len = g.shape(support.raw[p]).0;
        let (labels, conf, content) = (&weak.labels[p], &weak.confidence[p], &support.content[p]);
        if labels.len() != len || conf.len() != len {
            return Err(CaseError::Input(format!(
                "passage {p} has {len} positions but {} weak labels",
                labels.len()
            )));
        }
        let pos = Array2::from_shape_fn((len, 1), |(i, _)| {
            if content[i] && labels[i] == 1 {
                conf[i]
            } else {
                0.0
            }
        });
        let neg = Array2::from_shape_fn((len, 1), |(i, _)| {
            if content[i] && labels[i] == 0 {
                1.0
            } else {
                0.0
            }
        });
        // scaled by the example-wide count so the parts sum to the mean
        parts.push(weighted_log_likelihood(g, support.raw[p], pos, neg, total as f64));
    }
    let mut acc = parts[0];
    for &part in &parts[1..] {
        acc = g.add(acc, part);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use case_autograd::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};

    /// Support distribution over constant probabilities, one passage.
    fn fixed(g: &mut Graph<'_>, p: &[f64]) -> SupportDistribution {
        let v = g.constant(Array2::from_shape_vec((p.len(), 1), p.to_vec()).unwrap());
        SupportDistribution {
            raw: vec![v],
            masked: vec![v],
            content: vec![content_mask(&vec![true; p.len()])],
        }
    }

    fn weak(labels: &[u8], conf: &[f64]) -> WeakSupportLabels {
        WeakSupportLabels {
            labels: vec![labels.to_vec()],
            confidence: vec![conf.to_vec()],
        }
    }

    #[test]
    fn negative_only_tokens_cost_ln_two() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let s = fixed(&mut g, &[0.5; 5]);
        let l = sti_loss(&mut g, &s, &weak(&[0; 5], &[0.0; 5])).unwrap();
        assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn single_positive_token() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        // position 0 is [CLS] and excluded
        let s = fixed(&mut g, &[0.3, 0.9]);
        let l = sti_loss(&mut g, &s, &weak(&[0, 1], &[0.0, 1.0])).unwrap();
        assert!((g.scalar(l) + 0.9f64.ln()).abs() < 1e-12);
        assert!((g.scalar(l) - 0.1054).abs() < 1e-4);
    }

    #[test]
    fn halving_confidence_halves_the_positive_term() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let s = fixed(&mut g, &[0.5, 0.7, 0.2]);
        let full = sti_loss(&mut g, &s, &weak(&[0, 1, 0], &[0.0, 0.8, 0.0])).unwrap();
        let half = sti_loss(&mut g, &s, &weak(&[0, 1, 0], &[0.0, 0.4, 0.0])).unwrap();
        let neg_only = sti_loss(&mut g, &s, &weak(&[0, 1, 0], &[0.0, 0.0, 0.0])).unwrap();
        let (f, h, n) = (g.scalar(full), g.scalar(half), g.scalar(neg_only));
        assert!(((h - n) - 0.5 * (f - n)).abs() < 1e-12);
    }

    #[test]
    fn misaligned_labels_are_errors() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let s = fixed(&mut g, &[0.5, 0.5]);
        assert!(sti_loss(&mut g, &s, &weak(&[0, 1, 0], &[0.0; 3])).is_err());
    }

    fn logit_graph(g: &mut Graph<'_>, logits: case_autograd::ParamId, labels: &[u8], conf: &[f64]) -> Var {
        let l = g.param(logits);
        let p = g.sigmoid(l);
        let n = labels.len();
        let s = SupportDistribution {
            raw: vec![p],
            masked: vec![p],
            content: vec![content_mask(&vec![true; n])],
        };
        sti_loss(g, &s, &weak(labels, conf)).unwrap()
    }

    #[test]
    fn positive_gradient_scales_with_confidence() {
        let mut store = ParamStore::new();
        let logits = store.add("logits", Array2::from_shape_vec((3, 1), vec![0.1, -0.4, 0.7]).unwrap());
        let grad_at = |c: f64| {
            let mut g = Graph::new(&store);
            let l = logit_graph(&mut g, logits, &[0, 1, 0], &[0.0, c, 0.0]);
            g.backward(l).get(logits, (3, 1)).unwrap()[[1, 0]]
        };
        let (a, b) = (grad_at(0.9), grad_at(0.3));
        assert!(a < 0.0 && b < 0.0, "positive tokens are pushed toward p = 1");
        assert!((a / b - 3.0).abs() < 1e-6);
    }

    #[test]
    fn zero_head_gives_half_before_masking() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let head = ScoreHead::new(&mut store, "h", 4, &mut rng);
        for id in [head.output.weight, head.output.bias.unwrap()] {
            store.get_mut(id).fill(0.0);
        }
        let mut g = Graph::new(&store);
        let passages: Vec<Var> = [5, 7]
            .iter()
            .map(|&n| g.constant(crate::layers::normal(&mut rng, n, 4, 1.0)))
            .collect();
        let q = passages[0];
        let dual = DualStates {
            query: q,
            passages: passages.clone(),
            intermediates: crate::coattention::DualIntermediates {
                interaction: vec![],
                passage_attention: vec![],
                query_attention: vec![],
                query_hop1: q,
                query_hop2: q,
                passage_hop1: vec![],
                passage_hop2: vec![],
            },
        };
        let mut pad_mask = vec![true; 7];
        pad_mask[6] = false;
        let s = support_from_states(&mut g, &head, &dual, &[vec![true; 5], pad_mask]);
        assert_eq!(g.shape(s.raw[0]), (5, 1));
        assert_eq!(g.shape(s.raw[1]), (7, 1));
        assert!(s.raw.iter().all(|&r| g.value(r).iter().all(|&v| v == 0.5)));
        let m = g.value(s.masked[1]);
        assert_eq!((m[[0, 0]], m[[6, 0]], m[[3, 0]]), (0.0, 0.0, 0.5));
    }

    #[test]
    fn raising_one_logit_leaves_others_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let head = ScoreHead::new(&mut store, "h", 4, &mut rng);
        let mut g = Graph::new(&store);
        let states = g.constant(crate::layers::normal(&mut rng, 6, 4, 1.0));
        let base = head.forward(&mut g, states);
        let base = g.value(base).clone();
        // Rows are scored independently: perturbing one row's state only
        // changes that row's probability.
        let mut perturbed = g.value(states).clone();
        perturbed[[3, 0]] += 1.0;
        let p2 = g.constant(perturbed);
        let moved = head.forward(&mut g, p2);
        let moved = g.value(moved).clone();
        for i in 0..6 {
            if i == 3 {
                assert_ne!(base[[i, 0]], moved[[i, 0]]);
            } else {
                assert_eq!(base[[i, 0]], moved[[i, 0]]);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_on_three_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let logits = store.add(
            "logits",
            Array2::from_shape_fn((4, 1), |_| rng.random_range(-2.0..2.0)),
        );
        let coords: Vec<_> = (0..4).map(|i| (logits, i)).collect();
        let report = check_gradients(&mut store, &coords, 1e-5, 1e-6, |g| {
            logit_graph(g, logits, &[0, 1, 0, 1], &[0.0, 0.7, 0.0, 0.2])
        });
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
