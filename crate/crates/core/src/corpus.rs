//! Conversational QA records, model-ready encodings, weak supporting-token
//! labels and token frequencies.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{CaseError, Result};
use crate::vocab::{SpecialIds, Vocabulary};

/// Default half-widths for the window-overlap factor of the confidence
/// coefficient.
pub const DEFAULT_WINDOWS: [usize; 2] = [1, 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    #[serde(rename = "id")]
    pub passage_id: String,
    pub text: String,
    #[serde(default, deserialize_with = "lenient_bool")]
    pub relevant: bool,
}

/// One conversation turn: query history (oldest first, current query
/// last), candidate passages and the gold response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueExample {
    pub conversation_id: String,
    pub turn_index: u32,
    pub queries: Vec<String>,
    pub passages: Vec<Passage>,
    #[serde(default, deserialize_with = "lenient_string")]
    pub response: String,
}

fn lenient_bool<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    Ok(serde_json::Value::deserialize(d)?.as_bool().unwrap_or(false))
}

fn lenient_string<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    Ok(match serde_json::Value::deserialize(d)? {
        serde_json::Value::String(s) => s,
        _ => String::new(),
    })
}

impl DialogueExample {
    pub fn current_query(&self) -> &str {
        self.queries.last().map(String::as_str).unwrap_or("")
    }

    pub fn has_response(&self) -> bool {
        !self.response.trim().is_empty()
    }

    /// `conversation_id#turn_index`.
    pub fn key(&self) -> String {
        format!("{}#{}", self.conversation_id, self.turn_index)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.queries.is_empty() {
            return Err("\"queries\" must not be empty".into());
        }
        if self.passages.is_empty() {
            return Err("\"passages\" must not be empty".into());
        }
        if self.turn_index == 0 {
            return Err("\"turn_index\" must be at least 1".into());
        }
        if let Some(p) = self.passages.iter().find(|p| p.text.split_whitespace().next().is_none()) {
            return Err(format!("passage {:?} has empty text", p.passage_id));
        }
        Ok(())
    }
}

/// Parses JSON-Lines records; blank lines are skipped but still counted.
pub fn parse_examples(reader: impl Read) -> Result<Vec<DialogueExample>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CaseError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: DialogueExample = serde_json::from_str(&line).map_err(|e| CaseError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        ex.validate().map_err(|message| CaseError::Parse {
            line: line_no,
            message,
        })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn load_examples(path: impl AsRef<Path>) -> Result<Vec<DialogueExample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CaseError::io(path, e))?;
    parse_examples(file)
}

pub fn write_examples(path: impl AsRef<Path>, examples: &[DialogueExample]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| CaseError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let line = serde_json::to_string(ex).expect("examples serialize");
        writeln!(w, "{line}").map_err(|e| CaseError::io(path, e))?;
    }
    w.flush().map_err(|e| CaseError::io(path, e))
}

/// Maximum sequence lengths, counting the leading special token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthLimits {
    pub max_query_len: usize,
    pub max_passage_len: usize,
    pub max_response_len: usize,
}

impl LengthLimits {
    pub fn validate(&self) -> Result<()> {
        if self.max_query_len < 2 || self.max_passage_len < 2 || self.max_response_len < 2 {
            return Err(CaseError::Config(
                "length limits must leave room for a special token and content".into(),
            ));
        }
        Ok(())
    }
}

/// Unpadded id sequences for one example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub key: String,
    /// `[CLS] q1 [SEP] q2 ... [SEP] qt`, tail-truncated.
    pub query_ids: Vec<u32>,
    /// `[CLS] d...`, head-truncated, one per passage.
    pub passage_ids: Vec<Vec<u32>>,
    /// `[BOS] r... [EOS]`; just `[BOS] [EOS]` when there is no response.
    pub response_ids: Vec<u32>,
    pub relevance: Vec<bool>,
}

/// A sequence padded to a fixed length with its attention mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Padded {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

pub fn pad_sequence(ids: &[u32], len: usize, pad: u32) -> Padded {
    let mut out = ids[..ids.len().min(len)].to_vec();
    let real = out.len();
    out.resize(len, pad);
    Padded {
        ids: out,
        mask: (0..len).map(|i| i < real).collect(),
    }
}

/// Model-ready ids for one example.
pub fn encode_example(ex: &DialogueExample, vocab: &Vocabulary, limits: &LengthLimits) -> EncodedExample {
    let s = vocab.special();

    let mut history = Vec::new();
    for (i, q) in ex.queries.iter().enumerate() {
        if i > 0 {
            history.push(s.sep);
        }
        history.extend(vocab.tokenize(q));
    }
    let keep = limits.max_query_len - 1;
    let tail = &history[history.len().saturating_sub(keep)..];
    let mut query_ids = Vec::with_capacity(tail.len() + 1);
    query_ids.push(s.cls);
    query_ids.extend_from_slice(tail);

    let passage_ids = ex
        .passages
        .iter()
        .map(|p| {
            let mut ids = vec![s.cls];
            ids.extend(vocab.tokenize(&p.text).into_iter().take(limits.max_passage_len - 1));
            ids
        })
        .collect();

    let mut response_ids = vec![s.bos];
    response_ids.extend(
        vocab
            .tokenize(&ex.response)
            .into_iter()
            .take(limits.max_response_len - 2),
    );
    response_ids.push(s.eos);

    EncodedExample {
        key: ex.key(),
        query_ids,
        passage_ids,
        response_ids,
        relevance: ex.passages.iter().map(|p| p.relevant).collect(),
    }
}

/// Corpus token counts, indexed by id. Unseen tokens count as 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyTable {
    counts: Vec<u64>,
}

impl FrequencyTable {
    pub fn uniform(vocab_size: usize) -> Self {
        Self {
            counts: vec![1; vocab_size],
        }
    }

    /// Counts over the given id sequences, special tokens excluded.
    pub fn from_sequences<'a>(
        sequences: impl IntoIterator<Item = &'a [u32]>,
        vocab_size: usize,
        special: &SpecialIds,
    ) -> Self {
        let mut counts = vec![0u64; vocab_size];
        for seq in sequences {
            for &id in seq {
                if !special.contains(id) {
                    counts[id as usize] += 1;
                }
            }
        }
        for c in &mut counts {
            *c = (*c).max(1);
        }
        Self { counts }
    }

    /// Counts over the passages and responses of encoded examples.
    pub fn from_examples(examples: &[EncodedExample], vocab: &Vocabulary) -> Self {
        let seqs = examples
            .iter()
            .flat_map(|e| e.passage_ids.iter().map(Vec::as_slice).chain([e.response_ids.as_slice()]));
        Self::from_sequences(seqs, vocab.len(), &vocab.special())
    }

    pub fn get(&self, id: u32) -> u64 {
        self.counts.get(id as usize).copied().unwrap_or(1)
    }

    pub fn set(&mut self, id: u32, count: u64) {
        self.counts[id as usize] = count.max(1);
    }

    /// Writes `token<TAB>count` for every token seen more than once, in id
    /// order.
    pub fn save(&self, path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for (id, &c) in self.counts.iter().enumerate() {
            if c > 1 {
                out.push_str(vocab.token(id as u32));
                out.push('\t');
                out.push_str(&c.to_string());
                out.push('\n');
            }
        }
        fs::write(path, out).map_err(|e| CaseError::io(path, e))
    }

    /// Reads a TSV table; tokens missing from the vocabulary are ignored.
    pub fn load(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CaseError::io(path, e))?;
        let mut table = Self::uniform(vocab.len());
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (token, count) = line.rsplit_once('\t').ok_or_else(|| CaseError::Parse {
                line: i + 1,
                message: "expected token<TAB>count".into(),
            })?;
            let count: u64 = count.trim().parse().map_err(|_| CaseError::Parse {
                line: i + 1,
                message: format!("bad count {count:?}"),
            })?;
            if let Some(id) = vocab.id(token) {
                table.set(id, count);
            }
        }
        Ok(table)
    }
}

/// Per passage, per position: weak label and confidence coefficient.
///
/// Positions with label 0 carry confidence 0; the loss ignores it.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakSupportLabels {
    pub labels: Vec<Vec<u8>>,
    pub confidence: Vec<Vec<f64>>,
}

/// Weak supporting-token labels for every passage of one example.
///
/// A passage token is positive when its id occurs in the response (special
/// tokens never count). Its raw confidence is
/// `1/ln(freq + e) · Π_n |{p ∈ [i-n, i+n] : d_p ∈ response}|`, then all
/// positives of the example are scaled by the largest raw value. With no
/// windows every positive gets confidence 1.
pub fn compute_weak_labels(
    passages: &[Vec<u32>],
    response_ids: &[u32],
    freq: &FrequencyTable,
    windows: &[usize],
    special: &SpecialIds,
) -> Result<WeakSupportLabels> {
    let response: HashSet<u32> = response_ids
        .iter()
        .copied()
        .filter(|&id| !special.contains(id))
        .collect();
    if response.is_empty() {
        return Err(CaseError::Input(
            "weak labels need a non-empty response".into(),
        ));
    }

    let mut labels = Vec::with_capacity(passages.len());
    let mut raw = Vec::with_capacity(passages.len());
    for passage in passages {
        let hit: Vec<bool> = passage
            .iter()
            .map(|id| !special.contains(*id) && response.contains(id))
            .collect();
        let conf: Vec<f64> = (0..passage.len())
            .map(|i| {
                if !hit[i] {
                    return 0.0;
                }
                if windows.is_empty() {
                    return 1.0;
                }
                let rarity = 1.0 / (freq.get(passage[i]) as f64 + std::f64::consts::E).ln();
                let overlap: f64 = windows
                    .iter()
                    .map(|&n| {
                        let lo = i.saturating_sub(n);
                        let hi = (i + n).min(passage.len() - 1);
                        hit[lo..=hi].iter().filter(|&&h| h).count() as f64
                    })
                    .product();
                rarity * overlap
            })
            .collect();
        labels.push(hit.iter().map(|&h| h as u8).collect());
        raw.push(conf);
    }

    let max = raw
        .iter()
        .flatten()
        .copied()
        .fold(0.0_f64, f64::max);
    let confidence = raw
        .into_iter()
        .zip(&labels)
        .map(|(conf, lab)| {
            conf.iter()
                .zip(lab)
                .map(|(&c, &y)| match (y, max > 0.0) {
                    (0, _) => 0.0,
                    (_, true) => c / max,
                    (_, false) => 1.0,
                })
                .collect()
        })
        .collect();
    Ok(WeakSupportLabels { labels, confidence })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::VocabSize;

    fn specials() -> SpecialIds {
        SpecialIds {
            pad: 0,
            unk: 1,
            cls: 2,
            sep: 3,
            bos: 4,
            eos: 5,
        }
    }

    fn example(queries: &[&str], passages: &[&str], response: &str) -> DialogueExample {
        DialogueExample {
            conversation_id: "c".into(),
            turn_index: queries.len() as u32,
            queries: queries.iter().map(|s| s.to_string()).collect(),
            passages: passages
                .iter()
                .enumerate()
                .map(|(i, t)| Passage {
                    passage_id: format!("p{i}"),
                    text: t.to_string(),
                    relevant: i == 0,
                })
                .collect(),
            response: response.into(),
        }
    }

    const LIMITS: LengthLimits = LengthLimits {
        max_query_len: 8,
        max_passage_len: 6,
        max_response_len: 6,
    };

    #[test]
    fn parse_reports_line_numbers_and_defaults_optional_fields() {
        let good = r#"{"conversation_id":"a","turn_index":1,"queries":["q"],"passages":[{"id":"p","text":"t","relevant":"yes"}]}"#;
        let bad = r#"{"conversation_id":"a","turn_index":1,"queries":[],"passages":[{"id":"p","text":"t"}]}"#;
        let ok = parse_examples(good.as_bytes()).unwrap();
        assert!(!ok[0].passages[0].relevant);
        assert_eq!(ok[0].response, "");

        let input = format!("{good}\n\n{bad}\n");
        match parse_examples(input.as_bytes()) {
            Err(CaseError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn whitespace_only_passage_is_rejected() {
        let line = r#"{"conversation_id":"a","turn_index":1,"queries":["q"],"passages":[{"id":"p","text":"  \t "}]}"#;
        assert!(matches!(
            parse_examples(line.as_bytes()),
            Err(CaseError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn single_turn_query_starts_with_cls() {
        let ex = example(&["hello"], &["world"], "hi");
        let vocab = Vocabulary::build(["hello world hi"], VocabSize::Compact).unwrap();
        let enc = encode_example(&ex, &vocab, &LIMITS);
        assert_eq!(enc.query_ids, vec![vocab.special().cls, vocab.id("hello").unwrap()]);
        assert_eq!(enc.response_ids.first(), Some(&vocab.special().bos));
        assert_eq!(enc.response_ids.last(), Some(&vocab.special().eos));
    }

    #[test]
    fn query_truncation_keeps_tail_and_passage_keeps_head() {
        let ex = example(
            &["a b c d", "e f g h"],
            &["one two three four five six seven"],
            "x",
        );
        let vocab = Vocabulary::build(
            ["a b c d e f g h one two three four five six seven x"],
            VocabSize::Compact,
        )
        .unwrap();
        let enc = encode_example(&ex, &vocab, &LIMITS);
        assert_eq!(enc.query_ids.len(), LIMITS.max_query_len);
        assert_eq!(enc.query_ids[0], vocab.special().cls);
        assert_eq!(*enc.query_ids.last().unwrap(), vocab.id("h").unwrap());
        assert!(enc.query_ids.contains(&vocab.special().sep));
        assert_eq!(enc.passage_ids[0].len(), LIMITS.max_passage_len);
        assert_eq!(enc.passage_ids[0][1], vocab.id("one").unwrap());
        assert_eq!(encode_example(&ex, &vocab, &LIMITS), enc);
    }

    #[test]
    fn padding_mask_counts_real_positions() {
        let p = pad_sequence(&[7, 8, 9], 5, 0);
        assert_eq!(p.ids, vec![7, 8, 9, 0, 0]);
        assert_eq!(p.mask.iter().filter(|&&m| m).count(), 3);
    }

    #[test]
    fn absent_tokens_are_negative() {
        let freq = FrequencyTable::uniform(20);
        let w = compute_weak_labels(&[vec![2, 10, 11, 12]], &[4, 11, 5], &freq, &[1], &specials()).unwrap();
        assert_eq!(w.labels[0], vec![0, 0, 1, 0]);
        assert_eq!(w.confidence[0][1], 0.0);
    }

    #[test]
    fn single_overlap_normalizes_to_one() {
        // passage "a b c", response "b"
        let freq = FrequencyTable::uniform(20);
        let w = compute_weak_labels(&[vec![2, 10, 11, 12]], &[4, 11, 5], &freq, &[1], &specials()).unwrap();
        assert_eq!(w.confidence[0][2], 1.0);
    }

    #[test]
    fn rare_token_gets_larger_confidence() {
        let mut freq = FrequencyTable::uniform(20);
        freq.set(10, 10);
        freq.set(11, 10_000);
        // both tokens isolated between non-overlapping neighbours
        let w = compute_weak_labels(
            &[vec![2, 10, 12, 11, 13]],
            &[4, 10, 11, 5],
            &freq,
            &[1],
            &specials(),
        )
        .unwrap();
        let rare = w.confidence[0][1];
        let frequent = w.confidence[0][3];
        assert_eq!(rare, 1.0);
        let expected = (10.0 + std::f64::consts::E).ln() / (10_000.0 + std::f64::consts::E).ln();
        assert!((frequent - expected).abs() < 1e-12);
        assert!(rare > frequent);
    }

    #[test]
    fn empty_response_is_an_error() {
        let freq = FrequencyTable::uniform(20);
        assert!(compute_weak_labels(&[vec![2, 10]], &[4, 5], &freq, &[1], &specials()).is_err());
    }

    #[test]
    fn no_windows_means_membership_with_unit_confidence() {
        let mut freq = FrequencyTable::uniform(20);
        freq.set(10, 500);
        let w = compute_weak_labels(&[vec![2, 10, 11, 12]], &[10, 12], &freq, &[], &specials()).unwrap();
        assert_eq!(w.labels[0], vec![0, 1, 0, 1]);
        assert_eq!(w.confidence[0], vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn frequency_table_roundtrips_through_tsv() {
        let vocab = Vocabulary::build(["a b b c c c"], VocabSize::Compact).unwrap();
        let ids = vocab.tokenize("a b b c c c");
        let table = FrequencyTable::from_sequences([ids.as_slice()], vocab.len(), &vocab.special());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("freq.tsv");
        table.save(&path, &vocab).unwrap();
        assert_eq!(FrequencyTable::load(&path, &vocab).unwrap(), table);
        assert_eq!(table.get(vocab.id("c").unwrap()), 3);
        assert_eq!(table.get(vocab.special().cls), 1);
    }
}
