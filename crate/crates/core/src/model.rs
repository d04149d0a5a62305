//! The full network: encoders, passage selector, token supporter and
//! response decoder wired together.

use case_autograd::{Graph, ParamStore, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::coattention::{DualStates, MaskedStates};
use crate::config::{Ablation, ModelConfig};
use crate::corpus::{compute_weak_labels, EncodedExample, FrequencyTable, WeakSupportLabels};
use crate::decoder::{
    generate, rg_loss, uniform_passage_prior, uniform_support_prior, CopySources, DecodeStrategy, ModeDistribution,
    PointerKind, PriorBundle, ResponseDecoder,
};
use crate::encoder::CpuEncoder;
use crate::error::{CaseError, Result};
use crate::layers::Ctx;
use crate::rps::{rps_loss, PassageRelevance, PassageSelector};
use crate::sti::{sti_loss, SupportDistribution, TokenSupporter};
use crate::vocab::SpecialIds;

#[derive(Debug, Clone)]
pub struct CaseModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: CpuEncoder,
    pub selector: PassageSelector,
    pub supporter: TokenSupporter,
    pub decoder: ResponseDecoder,
}

/// An encoded example with its weak support labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub encoded: EncodedExample,
    pub weak: WeakSupportLabels,
}

pub fn prepare_training_example(
    encoded: EncodedExample,
    freq: &FrequencyTable,
    windows: &[usize],
    special: &SpecialIds,
) -> Result<TrainingExample> {
    let weak = compute_weak_labels(&encoded.passage_ids, &encoded.response_ids, freq, windows, special)
        .map_err(|e| CaseError::Input(format!("{}: {e}", encoded.key)))?;
    Ok(TrainingExample { encoded, weak })
}

/// Everything computed before the decoder runs.
pub struct ContextStates {
    pub query: MaskedStates,
    pub passages: Vec<MaskedStates>,
    pub selector_dual: DualStates,
    pub supporter_dual: DualStates,
    /// Absent when the selector is ablated.
    pub relevance: Option<PassageRelevance>,
    pub support: SupportDistribution,
    pub priors: PriorBundle,
}

/// Component losses; an ablated component is `None`.
pub struct ForwardOutput {
    pub context: ContextStates,
    pub modes: ModeDistribution,
    pub l_rps: Option<Var>,
    pub l_sti: Option<Var>,
    pub l_rg: Var,
}

impl CaseModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = CpuEncoder::new(&mut params, &config, &mut rng);
        let selector = PassageSelector::new(&mut params, &config, &mut rng);
        let supporter = TokenSupporter::new(&mut params, &config, &mut rng);
        let decoder = ResponseDecoder::new(&mut params, &config, &mut rng);
        Ok(CaseModel {
            config,
            params,
            encoder,
            selector,
            supporter,
            decoder,
        })
    }

    /// Encodes the query and passages, runs both interaction blocks and
    /// derives the decoder priors.
    pub fn context(&self, g: &mut Graph<'_>, ex: &EncodedExample, ablation: Ablation, ctx: &mut Ctx) -> Result<ContextStates> {
        if ex.passage_ids.is_empty() {
            return Err(CaseError::Input(format!("{}: no candidate passages", ex.key)));
        }
        let q_mask = vec![true; ex.query_ids.len()];
        let q = self.encoder.encode_queries(g, &ex.query_ids, &q_mask, ctx)?;
        let query = MaskedStates { states: q, mask: q_mask };
        let mut passages = Vec::with_capacity(ex.passage_ids.len());
        for ids in &ex.passage_ids {
            let mask = vec![true; ids.len()];
            let d = self.encoder.encode_passage(g, ids, &mask, ctx)?;
            passages.push(MaskedStates { states: d, mask });
        }
        let selector_dual = self.selector.interaction.forward(g, &query, &passages, ctx)?;
        let supporter_dual = self.supporter.interaction.forward(g, &query, &passages, ctx)?;
        let masks: Vec<Vec<bool>> = passages.iter().map(|p| p.mask.clone()).collect();
        let support = self.supporter.support(g, &supporter_dual, &masks);

        let relevance = (!ablation.disable_rps).then(|| self.selector.relevance(g, &selector_dual));
        let passage_prior = match relevance {
            Some(r) => r.probabilities,
            None => g.constant(uniform_passage_prior(passages.len())),
        };
        let support_prior = if ablation.disable_sti {
            support
                .content
                .iter()
                .map(|c| g.constant(uniform_support_prior(c)))
                .collect()
        } else {
            support.masked.clone()
        };
        let priors = PriorBundle {
            passage: passage_prior,
            support: support_prior,
            token_states: supporter_dual.passages.clone(),
        };
        Ok(ContextStates {
            query,
            passages,
            selector_dual,
            supporter_dual,
            relevance,
            support,
            priors,
        })
    }

    pub fn decode(
        &self,
        g: &mut Graph<'_>,
        ex: &EncodedExample,
        context: &ContextStates,
        prefix: &[u32],
        ablation: Ablation,
        ctx: &mut Ctx,
    ) -> Result<ModeDistribution> {
        let masks: Vec<Vec<bool>> = context.passages.iter().map(|p| p.mask.clone()).collect();
        let sources = CopySources {
            query_states: context.selector_dual.query,
            query_ids: &ex.query_ids,
            query_mask: &context.query.mask,
            passage_states: context.selector_dual.passages.clone(),
            passage_ids: &ex.passage_ids,
            passage_masks: &masks,
        };
        let pointer = if ablation.plain_pointer {
            PointerKind::Plain
        } else {
            PointerKind::PriorAware
        };
        self.decoder
            .forward(g, &self.encoder.tokens, prefix, &sources, &context.priors, pointer, ctx)
    }

    /// Teacher-forced forward pass with every enabled loss.
    pub fn forward(&self, g: &mut Graph<'_>, ex: &TrainingExample, ablation: Ablation, ctx: &mut Ctx) -> Result<ForwardOutput> {
        let enc = &ex.encoded;
        if enc.response_ids.len() < 2 {
            return Err(CaseError::Input(format!("{}: response is too short to train on", enc.key)));
        }
        let context = self.context(g, enc, ablation, ctx)?;
        let n = enc.response_ids.len();
        let modes = self.decode(g, enc, &context, &enc.response_ids[..n - 1], ablation, ctx)?;
        let l_rg = rg_loss(g, modes.mixed, &enc.response_ids[1..])?;
        let l_rps = match context.relevance {
            Some(r) => Some(rps_loss(g, r.probabilities, &enc.relevance)?),
            None => None,
        };
        let l_sti = if ablation.disable_sti {
            None
        } else {
            Some(sti_loss(g, &context.support, &ex.weak)?)
        };
        Ok(ForwardOutput {
            context,
            modes,
            l_rps,
            l_sti,
            l_rg,
        })
    }

    /// Passage relevance probabilities in input order.
    pub fn passage_scores(&self, ex: &EncodedExample) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let ctx = self.context(&mut g, ex, Ablation::default(), &mut Ctx::eval())?;
        let rel = ctx.relevance.expect("selector enabled");
        Ok(g.value(rel.probabilities).iter().copied().collect())
    }

    /// Response ids without `[BOS]`/`[EOS]`.
    pub fn generate(
        &self,
        ex: &EncodedExample,
        special: &SpecialIds,
        ablation: Ablation,
        strategy: DecodeStrategy,
    ) -> Result<Vec<u32>> {
        let mut g = Graph::new(&self.params);
        let mut ctx = Ctx::eval();
        let context = self.context(&mut g, ex, ablation, &mut ctx)?;
        let max_new = self.config.max_response_len - 1;
        generate(
            |prefix| {
                let d = self.decode(&mut g, ex, &context, prefix, ablation, &mut ctx)?;
                let mixed = g.value(d.mixed);
                Ok(mixed.row(mixed.nrows() - 1).to_vec())
            },
            special.bos,
            special.eos,
            max_new,
            strategy,
        )
    }
}
