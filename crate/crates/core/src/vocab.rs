//! Lower-cased WordPiece vocabulary and tokenizer.
//!
//! Vocabularies are either loaded from a BERT-style `vocab.txt` (one token
//! per line, line number = id) or built deterministically from a corpus.
//! Built vocabularies are padded with `[unusedN]` entries up to the
//! standard 30,522 size unless a compact vocabulary is requested.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CaseError, Result};

pub const STANDARD_VOCAB_SIZE: usize = 30_522;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";

/// Name recorded in checkpoints for this tokenization scheme.
pub const TOKENIZER_SCHEME: &str = "wordpiece-lowercase-v1";

const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
    pub bos: u32,
    pub eos: u32,
}

impl SpecialIds {
    pub fn contains(&self, id: u32) -> bool {
        [self.pad, self.unk, self.cls, self.sep, self.bos, self.eos].contains(&id)
    }
}

/// Target size when building from a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VocabSize {
    /// 30,522 entries.
    Standard,
    Exact(usize),
    /// Only the entries the corpus needs.
    Compact,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    special: SpecialIds,
}

impl Vocabulary {
    /// Builds from an ordered token list (position = id).
    ///
    /// `[BOS]`/`[EOS]` may be absent when the list carries BERT's
    /// `[unused0]`/`[unused1]`, which are then renamed.
    pub fn from_tokens(mut tokens: Vec<String>) -> Result<Self> {
        for (name, fallback) in [(BOS, "[unused0]"), (EOS, "[unused1]")] {
            if !tokens.iter().any(|t| t == name) {
                match tokens.iter().position(|t| t == fallback) {
                    Some(p) => tokens[p] = name.to_string(),
                    None => {
                        return Err(CaseError::Config(format!(
                            "vocabulary has neither {name} nor {fallback}"
                        )))
                    }
                }
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(CaseError::Config(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| CaseError::Config(format!("vocabulary is missing {name}")))
        };
        let special = SpecialIds {
            pad: lookup(PAD)?,
            unk: lookup(UNK)?,
            cls: lookup(CLS)?,
            sep: lookup(SEP)?,
            bos: lookup(BOS)?,
            eos: lookup(EOS)?,
        };
        Ok(Self {
            tokens,
            index,
            special,
        })
    }

    /// Deterministic WordPiece vocabulary over `texts`.
    ///
    /// Layout: the six special tokens, every character seen (bare and as a
    /// `##` continuation), then whole words by descending frequency with
    /// ties broken lexically, then `[unusedN]` filler.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, size: VocabSize) -> Result<Self> {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for text in texts {
            for word in basic_tokenize(text) {
                *counts.entry(word).or_default() += 1;
            }
        }
        let chars: BTreeSet<char> = counts.keys().flat_map(|w| w.chars()).collect();

        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP, BOS, EOS].map(String::from).to_vec();
        tokens.extend(chars.iter().map(|c| c.to_string()));
        tokens.extend(chars.iter().map(|c| format!("##{c}")));
        let mut seen: BTreeSet<String> = tokens.iter().cloned().collect();

        let mut words: Vec<(&String, &u64)> = counts.iter().collect();
        words.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));

        let target = match size {
            VocabSize::Standard => Some(STANDARD_VOCAB_SIZE),
            VocabSize::Exact(n) => Some(n),
            VocabSize::Compact => None,
        };
        if let Some(n) = target {
            if tokens.len() > n {
                return Err(CaseError::Config(format!(
                    "corpus needs {} base entries, more than the requested size {n}",
                    tokens.len()
                )));
            }
        }
        for (word, _) in words {
            if target.is_some_and(|n| tokens.len() >= n) {
                break;
            }
            if seen.insert(word.clone()) {
                tokens.push(word.clone());
            }
        }
        if let Some(n) = target {
            let mut i = 0;
            while tokens.len() < n {
                let filler = format!("[unused{i}]");
                if seen.insert(filler.clone()) {
                    tokens.push(filler);
                }
                i += 1;
            }
        }
        Self::from_tokens(tokens)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CaseError::io(path, e))?;
        let tokens = text
            .lines()
            .map(|l| l.trim_end_matches('\r').to_string())
            .filter(|l| !l.is_empty())
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out).map_err(|e| CaseError::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn special(&self) -> SpecialIds {
        self.special
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Stable identifier: SHA-256 over the scheme name and the token list.
    pub fn identifier(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(TOKENIZER_SCHEME.as_bytes());
        for t in &self.tokens {
            hasher.update([0u8]);
            hasher.update(t.as_bytes());
        }
        hex::encode(&hasher.finalize()[..16])
    }

    /// WordPiece pieces for `text`.
    pub fn tokenize_pieces(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for word in basic_tokenize(text) {
            self.wordpiece(&word, &mut out);
        }
        out
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        self.tokenize_pieces(text)
            .iter()
            .map(|p| self.id(p).unwrap_or(self.special.unk))
            .collect()
    }

    fn wordpiece(&self, word: &str, out: &mut Vec<String>) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push(UNK.to_string());
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece.insert_str(0, "##");
                }
                if self.index.contains_key(&piece) {
                    found = Some(piece);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(p) => {
                    pieces.push(p);
                    start = end;
                }
                None => {
                    out.push(UNK.to_string());
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    /// Joins pieces back into text, dropping special tokens and gluing
    /// `##` continuations and punctuation.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut glue_next = false;
        for &id in ids {
            if self.special.contains(id) && id != self.special.unk {
                continue;
            }
            let tok = self.token(id);
            if let Some(rest) = tok.strip_prefix("##") {
                out.push_str(rest);
                continue;
            }
            let attach_left = matches!(tok, "." | "," | "!" | "?" | ";" | ":" | "%" | ")" | "]" | "}" | "'" | "-" | "/");
            if !out.is_empty() && !attach_left && !glue_next {
                out.push(' ');
            }
            out.push_str(tok);
            glue_next = matches!(tok, "(" | "[" | "{" | "'" | "-" | "/" | "$");
        }
        out
    }
}

/// Lower-cases, splits on whitespace and isolates every non-alphanumeric
/// character as its own token. Control characters are dropped.
pub fn basic_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
        } else if c.is_control() {
            continue;
        } else if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            out.push(c.to_string());
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Vec<&'static str> {
        vec!["The cat sat on the mat.", "A dog barked, loudly!", "cats and dogs"]
    }

    #[test]
    fn standard_build_has_full_size_and_distinct_specials() {
        let v = Vocabulary::build(corpus(), VocabSize::Standard).unwrap();
        assert_eq!(v.len(), STANDARD_VOCAB_SIZE);
        let s = v.special();
        let ids = [s.pad, s.unk, s.cls, s.sep, s.bos, s.eos];
        let distinct: BTreeSet<u32> = ids.iter().copied().collect();
        assert_eq!(distinct.len(), 6);
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i as u32));
        }
    }

    #[test]
    fn wordpiece_falls_back_to_characters() {
        let v = Vocabulary::build(["cat"], VocabSize::Compact).unwrap();
        assert_eq!(v.tokenize_pieces("cat tac"), vec!["cat", "t", "##a", "##c"]);
        assert_eq!(v.tokenize("dog")[0], v.special().unk);
    }

    #[test]
    fn decode_glues_continuations_and_punctuation() {
        let v = Vocabulary::build(["hello, world."], VocabSize::Compact).unwrap();
        let ids = v.tokenize("hello, world.");
        assert_eq!(v.decode(&ids), "hello, world.");
        let ids = v.tokenize("hellow");
        assert_eq!(v.decode(&ids), "hellow");
    }

    #[test]
    fn bert_style_list_gets_bos_and_eos_from_unused_slots() {
        let tokens = ["[PAD]", "[unused0]", "[unused1]", "[UNK]", "[CLS]", "[SEP]", "a"]
            .map(String::from)
            .to_vec();
        let v = Vocabulary::from_tokens(tokens).unwrap();
        assert_eq!(v.special().bos, 1);
        assert_eq!(v.special().eos, 2);
    }

    #[test]
    fn identifier_is_stable_and_content_sensitive() {
        let a = Vocabulary::build(corpus(), VocabSize::Compact).unwrap();
        let b = Vocabulary::build(corpus(), VocabSize::Compact).unwrap();
        let c = Vocabulary::build(["other"], VocabSize::Compact).unwrap();
        assert_eq!(a.identifier(), b.identifier());
        assert_ne!(a.identifier(), c.identifier());
    }

    #[test]
    fn too_small_exact_size_is_rejected() {
        assert!(Vocabulary::build(corpus(), VocabSize::Exact(10)).is_err());
    }
}
