//! End-to-end helpers: shared tokenizer, per-mode model preparation and
//! training.

use crate::corpus::{Mode, Sentence};
use crate::error::Result;
use crate::mlm::{train, Checkpoint, ModelConfig, TrainConfig, TrainReport};
use crate::prediction::Board;
use crate::tokenizer::{add_mwe_tokens, add_role_tokens, train_subword, MweExtension, NewToken, Vocab};

/// Vocabulary budget for the base tokenizer. Training stops earlier once no
/// pair is left to merge.
pub const DEFAULT_VOCAB_TARGET: usize = 1500;

/// Texts the base tokenizer learns from: both renderings of every training
/// sentence plus every card caption.
pub fn tokenizer_texts(train: &[Sentence], board: &Board) -> Vec<String> {
    train
        .iter()
        .flat_map(|s| [s.render_tagged(), s.render_flat()])
        .chain(board.cards.iter().map(|c| c.caption.clone()))
        .collect()
}

/// The base vocabulary shared by both models.
pub fn train_tokenizer(train: &[Sentence], board: &Board, target: usize) -> Result<Vocab> {
    train_subword(&tokenizer_texts(train, board), target)
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub ckpt: Checkpoint,
    pub role_tags: Vec<NewToken>,
    pub mwe: MweExtension,
}

/// A freshly initialized model for `mode`. The cs model gets the role tags
/// and the board's multi-word captions as extra tokens, initialized from the
/// mean of their pieces; the flat model keeps the base vocabulary.
pub fn prepare_checkpoint(
    mode: Mode,
    base: &Vocab,
    board: &Board,
    template: &ModelConfig,
    seed: u64,
) -> Result<Prepared> {
    let config = ModelConfig {
        vocab_size: base.len(),
        ..template.clone()
    };
    let ckpt = Checkpoint::init(config, base.clone(), seed)?;
    if mode == Mode::Flat {
        return Ok(Prepared {
            ckpt,
            role_tags: Vec::new(),
            mwe: MweExtension::default(),
        });
    }
    let (tagged, role_tags) = add_role_tokens(base, &ckpt.model.params.word_embeddings)?;
    let ckpt = ckpt.extend_embeddings(&tagged, &role_tags)?;
    let (full, mwe) = add_mwe_tokens(&tagged, &board.multiword_captions(), &ckpt.model.params.word_embeddings)?;
    let ckpt = ckpt.extend_embeddings(&full, &mwe.added)?;
    Ok(Prepared { ckpt, role_tags, mwe })
}

/// Prepares and trains a model for `mode` on `train` rendered in that mode.
pub fn train_for_mode(
    mode: Mode,
    base: &Vocab,
    train_set: &[Sentence],
    board: &Board,
    template: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    let prepared = prepare_checkpoint(mode, base, board, template, cfg.seed)?;
    let texts: Vec<String> = train_set.iter().map(|s| s.render(mode)).collect();
    train(&prepared.ckpt, &texts, cfg, Some(mode))
}
