use serde::{Deserialize, Serialize};

use crate::error::{CaseError, Result};
use crate::vocab::STANDARD_VOCAB_SIZE;

/// Sizes for every network block.
///
/// `hidden_size` is shared by embeddings, encoder, interaction blocks and
/// decoder. Lengths bound the query history, each passage and the response
/// (including their leading special token).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub encoder_layers: usize,
    /// Encoder blocks applied after the 5N→N projection in each
    /// interaction block.
    pub fusion_layers: usize,
    /// Layers in each of the two decoder stacks.
    pub decoder_layers: usize,
    pub dropout: f64,
    pub max_query_len: usize,
    pub max_passage_len: usize,
    pub max_response_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: STANDARD_VOCAB_SIZE,
            hidden_size: 256,
            num_heads: 4,
            ffn_size: 1024,
            encoder_layers: 2,
            fusion_layers: 1,
            decoder_layers: 2,
            dropout: 0.1,
            max_query_len: 64,
            max_passage_len: 128,
            max_response_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("ffn_size", self.ffn_size),
            ("max_query_len", self.max_query_len),
            ("max_passage_len", self.max_passage_len),
            ("max_response_len", self.max_response_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CaseError::Config(format!("{name} must be positive")));
            }
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(CaseError::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CaseError::Config("dropout must be in [0, 1)".into()));
        }
        if self.max_response_len < 2 {
            return Err(CaseError::Config(
                "max_response_len must leave room for [BOS] and [EOS]".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }
}

/// Structural ablations.
///
/// `disable_rps` and `disable_sti` replace the corresponding priors with
/// uniform ones and drop the module's loss; `plain_pointer` swaps the
/// prior-aware passage pointer for a uniformly averaged one.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    #[serde(default)]
    pub disable_rps: bool,
    #[serde(default)]
    pub disable_sti: bool,
    #[serde(default)]
    pub plain_pointer: bool,
}
