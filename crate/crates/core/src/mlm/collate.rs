use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::TrainSeq;
use crate::tokenizer::{TokenId, TokenSeq, Vocab, MASK};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub mask_ratio: f64,
    pub mask_token_prob: f64,
    pub random_token_prob: f64,
    pub mask_role_tags: bool,
}

/// What happened to a selected position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Substitution {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSeq {
    /// Padded input ids with substitutions applied.
    pub input: Vec<TokenId>,
    /// Original id at each selected position.
    pub targets: Vec<Option<TokenId>>,
    pub substitutions: Vec<Option<Substitution>>,
    /// Attention length; positions from here on are padding.
    pub len: usize,
}

impl MaskedSeq {
    pub fn selection_mask(&self) -> Vec<bool> {
        self.targets.iter().map(Option::is_some).collect()
    }

    pub fn attention_mask(&self) -> Vec<bool> {
        (0..self.input.len()).map(|i| i < self.len).collect()
    }

    pub fn selected(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }

    /// Active (unpadded) view used by the training step.
    pub fn train_seq(&self) -> TrainSeq<'_> {
        TrainSeq {
            ids: &self.input[..self.len],
            targets: &self.targets[..self.len],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskedBatch {
    pub seqs: Vec<MaskedSeq>,
}

impl MaskedBatch {
    pub fn selected(&self) -> usize {
        self.seqs.iter().map(MaskedSeq::selected).sum()
    }
}

/// Ids eligible for prediction under `policy`: everything except specials
/// and, unless enabled, role tags.
pub fn is_eligible(vocab: &Vocab, id: TokenId, policy: &MaskPolicy) -> bool {
    !vocab.is_special(id) && (policy.mask_role_tags || !vocab.is_role_tag(id))
}

/// Ids random replacements are drawn from: all non-special, non-tag ids.
pub fn replacement_pool(vocab: &Vocab) -> Vec<TokenId> {
    (0..vocab.len() as TokenId)
        .filter(|&id| !vocab.is_special(id) && !vocab.is_role_tag(id))
        .collect()
}

/// BERT-style masking. Every eligible position is selected independently
/// with probability `mask_ratio`; a selected token becomes `[MASK]`, a
/// uniformly drawn replacement, or stays unchanged.
pub fn mask_collate(seqs: &[TokenSeq], vocab: &Vocab, policy: &MaskPolicy, rng: &mut impl Rng) -> MaskedBatch {
    let pool = replacement_pool(vocab);
    let seqs = seqs
        .iter()
        .map(|seq| {
            let mut input = seq.ids.clone();
            let mut targets = vec![None; input.len()];
            let mut substitutions = vec![None; input.len()];
            for i in 0..seq.len {
                let id = input[i];
                if !is_eligible(vocab, id, policy) || !rng.random_bool(policy.mask_ratio) {
                    continue;
                }
                targets[i] = Some(id);
                let u: f64 = rng.random();
                let sub = if u < policy.mask_token_prob {
                    input[i] = MASK;
                    Substitution::Mask
                } else if u < policy.mask_token_prob + policy.random_token_prob && !pool.is_empty() {
                    input[i] = pool[rng.random_range(0..pool.len())];
                    Substitution::Random
                } else {
                    Substitution::Keep
                };
                substitutions[i] = Some(sub);
            }
            MaskedSeq {
                input,
                targets,
                substitutions,
                len: seq.len,
            }
        })
        .collect();
    MaskedBatch { seqs }
}
