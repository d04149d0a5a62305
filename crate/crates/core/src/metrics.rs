//! Generation metrics (ROUGE-1/2/L, BLEU) and passage ranking metrics
//! (average precision, Recall@5, NDCG).

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{CaseError, Result};

/// Lowercases, deletes punctuation and splits on whitespace.
pub fn normalize_text(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation() && !is_unicode_punct(*c))
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

fn is_unicode_punct(c: char) -> bool {
    matches!(c, '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205E}' | '\u{3000}'..='\u{303F}')
}

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and hypothesis n-gram total.
fn clipped_matches<T: AsRef<str>>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, hyp.len().saturating_sub(n - 1).min(hyp.len()))
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn rouge_n<T: AsRef<str>>(hyp: &[T], reference: &[T], n: usize) -> f64 {
    assert!(n >= 1, "n-gram order must be positive");
    if hyp.len() < n || reference.len() < n {
        return 0.0;
    }
    let (matched, hyp_total) = clipped_matches(hyp, reference, n);
    let ref_total = reference.len() - n + 1;
    f1(matched as f64 / hyp_total as f64, matched as f64 / ref_total as f64)
}

fn lcs_len<T: AsRef<str>>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: AsRef<str>>(hyp: &[T], reference: &[T]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(hyp, reference) as f64;
    f1(l / hyp.len() as f64, l / reference.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum BleuSmoothing {
    /// Any zero n-gram precision makes the score zero.
    #[default]
    None,
    /// Adds one to numerator and denominator for orders above one.
    AddOne,
}

pub fn bleu<T: AsRef<str>>(hyp: &[T], reference: &[T], smoothing: BleuSmoothing) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (matched, total) = if hyp.len() >= n {
            clipped_matches(hyp, reference, n)
        } else {
            (0, 0)
        };
        let (num, den) = match smoothing {
            BleuSmoothing::AddOne if n > 1 => (matched as f64 + 1.0, total as f64 + 1.0),
            _ => (matched as f64, total as f64),
        };
        if num == 0.0 || den == 0.0 {
            return 0.0;
        }
        log_sum += 0.25 * (num / den).ln();
    }
    let (h, r) = (hyp.len() as f64, reference.len() as f64);
    let bp = (1.0 - r / h).exp().min(1.0);
    bp * log_sum.exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingScores {
    pub average_precision: f64,
    pub recall_at_5: f64,
    pub ndcg: f64,
}

/// Scores a ranked list of passage ids against binary relevance.
/// Ids missing from `relevant` count as non-relevant.
pub fn ranking_metrics<S: AsRef<str>>(ranking: &[S], relevant: &HashSet<String>) -> Result<RankingScores> {
    let mut seen = HashSet::new();
    for id in ranking {
        if !seen.insert(id.as_ref()) {
            return Err(CaseError::Input(format!("duplicate id {:?} in ranking", id.as_ref())));
        }
    }
    let flags: Vec<bool> = ranking.iter().map(|id| relevant.contains(id.as_ref())).collect();
    Ok(ranking_metrics_from_flags(&flags))
}

/// Same as [`ranking_metrics`] on relevance flags already in rank order.
pub fn ranking_metrics_from_flags(flags: &[bool]) -> RankingScores {
    let total = flags.iter().filter(|&&f| f).count();
    if total == 0 {
        return RankingScores {
            average_precision: 0.0,
            recall_at_5: 0.0,
            ndcg: 0.0,
        };
    }
    let mut hits = 0usize;
    let mut ap = 0.0;
    let mut dcg = 0.0;
    for (i, &rel) in flags.iter().enumerate() {
        if rel {
            hits += 1;
            ap += hits as f64 / (i + 1) as f64;
            dcg += 1.0 / ((i + 2) as f64).log2();
        }
    }
    let ideal: f64 = (0..total).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
    let top5 = flags.iter().take(5).filter(|&&f| f).count();
    RankingScores {
        average_precision: ap / total as f64,
        recall_at_5: top5 as f64 / total as f64,
        ndcg: dcg / ideal,
    }
}

/// Per-example scores for one generated response.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationScores {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub bleu: f64,
}

pub fn generation_scores(hypothesis: &str, reference: &str) -> GenerationScores {
    let h = normalize_text(hypothesis);
    let r = normalize_text(reference);
    GenerationScores {
        rouge1: rouge_n(&h, &r, 1),
        rouge2: rouge_n(&h, &r, 2),
        rouge_l: rouge_l(&h, &r),
        bleu: bleu(&h, &r, BleuSmoothing::None),
    }
}

/// Averages in [0, 1].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub bleu: f64,
    pub map: f64,
    pub recall_at_5: f64,
    pub ndcg: f64,
    pub generation_examples: usize,
    pub ranking_examples: usize,
}

impl MetricsReport {
    pub fn aggregate(generation: &[GenerationScores], ranking: &[RankingScores]) -> Self {
        let mean = |xs: &mut dyn Iterator<Item = f64>, n: usize| {
            if n == 0 {
                0.0
            } else {
                xs.sum::<f64>() / n as f64
            }
        };
        let g = generation.len();
        let k = ranking.len();
        MetricsReport {
            rouge1: mean(&mut generation.iter().map(|s| s.rouge1), g),
            rouge2: mean(&mut generation.iter().map(|s| s.rouge2), g),
            rouge_l: mean(&mut generation.iter().map(|s| s.rouge_l), g),
            bleu: mean(&mut generation.iter().map(|s| s.bleu), g),
            map: mean(&mut ranking.iter().map(|s| s.average_precision), k),
            recall_at_5: mean(&mut ranking.iter().map(|s| s.recall_at_5), k),
            ndcg: mean(&mut ranking.iter().map(|s| s.ndcg), k),
            generation_examples: g,
            ranking_examples: k,
        }
    }

    pub fn to_json(&self) -> PercentReport {
        let pct = |x: f64| (x * 10_000.0).round() / 100.0;
        PercentReport {
            rouge1: pct(self.rouge1),
            rouge2: pct(self.rouge2),
            rouge_l: pct(self.rouge_l),
            bleu: pct(self.bleu),
            map: pct(self.map),
            recall_at_5: pct(self.recall_at_5),
            ndcg: pct(self.ndcg),
        }
    }
}

/// Percentages rounded to two decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentReport {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub bleu: f64,
    pub map: f64,
    pub recall_at_5: f64,
    pub ndcg: f64,
}
