//! A small generated dialogue corpus for overfitting and smoke tests.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::corpus::{DialogueExample, LengthLimits, Passage};

const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Distinct two-syllable pseudo-words in a fixed order.
pub fn toy_words(count: usize) -> Vec<String> {
    let syllables: Vec<String> = ONSETS
        .iter()
        .flat_map(|o| NUCLEI.iter().map(move |n| format!("{o}{n}")))
        .collect();
    let mut words = Vec::with_capacity(count);
    'outer: for (i, a) in syllables.iter().enumerate() {
        for b in syllables.iter().skip(i % 7).step_by(7) {
            if words.len() == count {
                break 'outer;
            }
            words.push(format!("{a}{b}"));
        }
    }
    assert_eq!(words.len(), count, "not enough pseudo-words");
    words
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToySpec {
    pub examples: usize,
    pub passages: usize,
    pub words: usize,
    pub query_words: usize,
    pub passage_words: usize,
    pub span_words: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            examples: 32,
            passages: 3,
            words: 140,
            query_words: 4,
            passage_words: 10,
            span_words: 4,
            seed: 7,
        }
    }
}

/// Each example has one relevant passage; the response is a lead word
/// followed by a span copied from that passage. Half the examples carry
/// a previous query turn.
pub fn toy_corpus(spec: &ToySpec) -> Vec<DialogueExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let words = toy_words(spec.words);
    let (leads, pool) = words.split_at(4);
    let sentence = |rng: &mut ChaCha8Rng, n: usize| -> Vec<&str> { (0..n).map(|_| pool.choose(rng).expect("pool").as_str()).collect() };
    (0..spec.examples)
        .map(|i| {
            let relevant = rng.random_range(0..spec.passages);
            let passages: Vec<Passage> = (0..spec.passages)
                .map(|k| Passage {
                    passage_id: format!("p{i}_{k}"),
                    text: sentence(&mut rng, spec.passage_words).join(" "),
                    relevant: k == relevant,
                })
                .collect();
            let gold: Vec<&str> = passages[relevant].text.split(' ').collect();
            let start = rng.random_range(0..=gold.len() - spec.span_words);
            let mut query = sentence(&mut rng, spec.query_words - 1);
            // the query names a word of the answer span
            query.push(gold[start + rng.random_range(0..spec.span_words)]);
            query.shuffle(&mut rng);
            let mut queries = Vec::new();
            if i % 2 == 1 {
                queries.push(sentence(&mut rng, spec.query_words).join(" "));
            }
            queries.push(query.join(" "));
            let lead = leads.choose(&mut rng).expect("leads");
            let response = std::iter::once(lead.as_str())
                .chain(gold[start..start + spec.span_words].iter().copied())
                .collect::<Vec<_>>()
                .join(" ");
            DialogueExample {
                conversation_id: format!("toy{i:02}"),
                turn_index: queries.len() as u32,
                queries,
                passages,
                response,
            }
        })
        .collect()
}

/// Length limits that never truncate a toy example.
pub fn toy_limits(spec: &ToySpec) -> LengthLimits {
    LengthLimits {
        max_query_len: 2 * spec.query_words + 2,
        max_passage_len: spec.passage_words + 1,
        max_response_len: spec.span_words + 3,
    }
}

/// Hidden size 64, two layers per stack.
pub fn toy_model_config(vocab_size: usize, limits: &LengthLimits) -> ModelConfig {
    ModelConfig {
        vocab_size,
        hidden_size: 64,
        num_heads: 4,
        ffn_size: 128,
        encoder_layers: 2,
        fusion_layers: 2,
        decoder_layers: 2,
        dropout: 0.0,
        max_query_len: limits.max_query_len,
        max_passage_len: limits.max_passage_len,
        max_response_len: limits.max_response_len,
    }
}
