//! Descriptive corpus statistics: lengths, passage similarity, answer/passage
//! n-gram overlap and common-word ratios.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::DialogueExample;
use crate::error::{CaseError, Result};
use crate::metrics::normalize_text;

/// Word frequency at or above which a word counts as common.
pub const COMMON_WORD_THRESHOLD: u64 = 100_000;

/// Ratios are reported as percentages, lengths in whitespace tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    #[serde(rename = "#examples")]
    pub examples: usize,
    #[serde(rename = "#query length")]
    pub query_length: f64,
    #[serde(rename = "#answer length")]
    pub answer_length: f64,
    #[serde(rename = "#passage length")]
    pub passage_length: f64,
    #[serde(rename = "#pairwise passage similarity")]
    pub pairwise_passage_similarity: f64,
    #[serde(rename = "#1-gram overlap")]
    pub overlap_1: f64,
    #[serde(rename = "#2-gram overlap")]
    pub overlap_2: f64,
    #[serde(rename = "#3-gram overlap")]
    pub overlap_3: f64,
    #[serde(rename = "#4-gram overlap")]
    pub overlap_4: f64,
    #[serde(rename = "#query common words ratio")]
    pub query_common_words_ratio: f64,
    #[serde(rename = "#answer common words ratio")]
    pub answer_common_words_ratio: f64,
}

impl StatsReport {
    pub fn overlaps(&self) -> [f64; 4] {
        [self.overlap_1, self.overlap_2, self.overlap_3, self.overlap_4]
    }
}

#[derive(Debug, Clone, Default)]
pub struct StatsOptions {
    /// External word frequencies; when absent, counts over the examples'
    /// own queries, responses and passages are used.
    pub word_frequencies: Option<HashMap<String, u64>>,
    pub common_threshold: Option<u64>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Fraction of the answer's n-gram positions whose n-gram occurs in any
/// candidate passage. Zero when the answer has fewer than `n` tokens.
pub fn ngram_overlap(answer: &[String], passages: &[Vec<String>], n: usize) -> f64 {
    if answer.len() < n {
        return 0.0;
    }
    let available: HashSet<&[String]> = passages.iter().flat_map(|p| p.windows(n)).collect();
    let total = answer.len() - n + 1;
    let covered = answer.windows(n).filter(|w| available.contains(w)).count();
    covered as f64 / total as f64
}

/// Mean pairwise dot product of L2-normalized TF-IDF vectors within one
/// candidate set. `idf` maps a word to its inverse document frequency.
fn pairwise_similarity(passages: &[Vec<String>], idf: &HashMap<&str, f64>) -> Option<f64> {
    if passages.len() < 2 {
        return None;
    }
    let vectors: Vec<BTreeMap<&str, f64>> = passages
        .iter()
        .map(|p| {
            let mut tf: BTreeMap<&str, f64> = BTreeMap::new();
            for w in p {
                *tf.entry(w.as_str()).or_default() += 1.0;
            }
            for (w, v) in tf.iter_mut() {
                *v *= idf[w];
            }
            let norm = tf.values().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                tf.values_mut().for_each(|v| *v /= norm);
            }
            tf
        })
        .collect();
    let mut sims = Vec::new();
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let dot = vectors[i]
                .iter()
                .filter_map(|(w, a)| vectors[j].get(w).map(|b| a * b))
                .sum::<f64>();
            sims.push(dot);
        }
    }
    Some(mean(sims))
}

pub fn corpus_statistics(examples: &[DialogueExample], options: &StatsOptions) -> Result<StatsReport> {
    if examples.is_empty() {
        return Err(CaseError::Input("statistics need at least one example".into()));
    }
    let threshold = options.common_threshold.unwrap_or(COMMON_WORD_THRESHOLD);

    let norm_passages: Vec<Vec<Vec<String>>> = examples
        .iter()
        .map(|e| e.passages.iter().map(|p| normalize_text(&p.text)).collect())
        .collect();
    let norm_answers: Vec<Vec<String>> = examples.iter().map(|e| normalize_text(&e.response)).collect();
    let norm_queries: Vec<Vec<String>> = examples.iter().map(|e| normalize_text(e.current_query())).collect();

    // Document frequency over every passage in the collection.
    let mut df: HashMap<&str, usize> = HashMap::new();
    let mut docs = 0usize;
    for set in &norm_passages {
        for p in set {
            docs += 1;
            let unique: HashSet<&str> = p.iter().map(String::as_str).collect();
            for w in unique {
                *df.entry(w).or_default() += 1;
            }
        }
    }
    let idf: HashMap<&str, f64> = df
        .iter()
        .map(|(&w, &d)| (w, ((1 + docs) as f64 / (1 + d) as f64).ln() + 1.0))
        .collect();

    let own_counts;
    let word_freq: &HashMap<String, u64> = match &options.word_frequencies {
        Some(f) => f,
        None => {
            let mut counts: HashMap<String, u64> = HashMap::new();
            let all = norm_queries
                .iter()
                .chain(&norm_answers)
                .chain(norm_passages.iter().flatten());
            for seq in all {
                for w in seq {
                    *counts.entry(w.clone()).or_default() += 1;
                }
            }
            own_counts = counts;
            &own_counts
        }
    };
    let common_ratio = |words: &[String]| {
        if words.is_empty() {
            return None;
        }
        let common = words
            .iter()
            .filter(|w| word_freq.get(*w).copied().unwrap_or(0) >= threshold)
            .count();
        Some(common as f64 / words.len() as f64)
    };

    let answered: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].has_response()).collect();
    let overlap = |n: usize| {
        100.0 * mean(answered.iter().map(|&i| ngram_overlap(&norm_answers[i], &norm_passages[i], n)))
    };

    Ok(StatsReport {
        examples: examples.len(),
        query_length: mean(examples.iter().map(|e| e.current_query().split_whitespace().count() as f64)),
        answer_length: mean(answered.iter().map(|&i| examples[i].response.split_whitespace().count() as f64)),
        passage_length: mean(
            examples
                .iter()
                .flat_map(|e| e.passages.iter().map(|p| p.text.split_whitespace().count() as f64)),
        ),
        pairwise_passage_similarity: 100.0
            * mean(norm_passages.iter().filter_map(|set| pairwise_similarity(set, &idf))),
        overlap_1: overlap(1),
        overlap_2: overlap(2),
        overlap_3: overlap(3),
        overlap_4: overlap(4),
        query_common_words_ratio: 100.0 * mean(norm_queries.iter().filter_map(|q| common_ratio(q))),
        answer_common_words_ratio: 100.0
            * mean(answered.iter().filter_map(|&i| common_ratio(&norm_answers[i]))),
    })
}

/// Reads a `word<TAB>count` table.
pub fn load_word_frequencies(path: impl AsRef<std::path::Path>) -> Result<HashMap<String, u64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CaseError::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = line
            .rsplit_once('\t')
            .and_then(|(w, c)| c.trim().parse::<u64>().ok().map(|c| (w.to_lowercase(), c)));
        match parsed {
            Some((w, c)) => {
                out.insert(w, c);
            }
            None => {
                return Err(CaseError::Parse {
                    line: i + 1,
                    message: "expected word<TAB>count".into(),
                })
            }
        }
    }
    Ok(out)
}
