//! Card prediction: card vectors, the card decoder that replaces the
//! vocabulary decoder, masked query construction and ranking.

mod board;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

pub use board::{Board, Card, Folder};

use crate::corpus::{render_tagged_slots, Mode, Role};
use crate::error::{Error, Result};
use crate::mlm::Checkpoint;
use crate::tokenizer::{mean_of_rows, EmbeddingLookup, TokenSeq, Vocab, MASK, UNK};

/// Mean of the input-embedding rows of the caption's tokens. A caption made
/// only of unknown pieces gets the `[UNK]` row, with a warning.
pub fn card_vector(card: &Card, vocab: &Vocab, embeddings: &impl EmbeddingLookup) -> Result<Vec<f32>> {
    let ids = vocab.tokenize(&card.caption);
    if ids.is_empty() {
        return Err(Error::Prediction(format!(
            "caption of card `{}` has no tokens",
            card.id
        )));
    }
    if ids.iter().all(|&id| id == UNK) {
        log::warn!(
            "caption `{}` of card `{}` is entirely unknown tokens",
            card.caption,
            card.id
        );
    }
    Ok(mean_of_rows(embeddings, &ids))
}

/// An `h × |cards|` matrix whose column `j` is the vector of card `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CardDecoder {
    matrix: Array2<f32>,
    card_ids: Vec<String>,
    index: HashMap<String, usize>,
    fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct DecoderFile {
    fingerprint: String,
    hidden: usize,
    cards: Vec<DecoderColumn>,
}

#[derive(Serialize, Deserialize)]
struct DecoderColumn {
    id: String,
    vector: Vec<f32>,
}

impl CardDecoder {
    /// Encodes every board card with the checkpoint's vocabulary and input
    /// embeddings.
    pub fn build(board: &Board, ckpt: &Checkpoint) -> Result<Self> {
        board.validate()?;
        let table = &ckpt.model.params.word_embeddings;
        let columns = board
            .cards
            .iter()
            .map(|c| card_vector(c, &ckpt.vocab, table).map(|v| (c.id.clone(), v)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_columns(ckpt.config().hidden, columns, ckpt.fingerprint()?)
    }

    fn from_columns(hidden: usize, columns: Vec<(String, Vec<f32>)>, fingerprint: String) -> Result<Self> {
        let mut matrix = Array2::zeros((hidden, columns.len()));
        let mut index = HashMap::with_capacity(columns.len());
        let mut card_ids = Vec::with_capacity(columns.len());
        for (j, (id, v)) in columns.into_iter().enumerate() {
            if v.len() != hidden {
                return Err(Error::Prediction(format!(
                    "vector for card `{id}` has length {}, expected {hidden}",
                    v.len()
                )));
            }
            if index.insert(id.clone(), j).is_some() {
                return Err(Error::Prediction(format!("duplicate card id `{id}`")));
            }
            matrix.column_mut(j).assign(&Array1::from(v));
            card_ids.push(id);
        }
        Ok(CardDecoder {
            matrix,
            card_ids,
            index,
            fingerprint,
        })
    }

    pub fn matrix(&self) -> &Array2<f32> {
        &self.matrix
    }

    pub fn card_ids(&self) -> &[String] {
        &self.card_ids
    }

    pub fn column_of(&self, card_id: &str) -> Option<usize> {
        self.index.get(card_id).copied()
    }

    pub fn column(&self, card_id: &str) -> Option<Vec<f32>> {
        self.column_of(card_id).map(|j| self.matrix.column(j).to_vec())
    }

    pub fn len(&self) -> usize {
        self.card_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.card_ids.is_empty()
    }

    /// Fingerprint of the checkpoint this decoder was built from.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// One logit per card: `hidden · column`, accumulated in f64.
    pub fn logits(&self, hidden: &[f32]) -> Vec<f64> {
        self.matrix
            .columns()
            .into_iter()
            .map(|col| col.iter().zip(hidden).map(|(&w, &h)| f64::from(w) * f64::from(h)).sum())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = DecoderFile {
            fingerprint: self.fingerprint.clone(),
            hidden: self.matrix.nrows(),
            cards: self
                .card_ids
                .iter()
                .enumerate()
                .map(|(j, id)| DecoderColumn {
                    id: id.clone(),
                    vector: self.matrix.column(j).to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DecoderFile = serde_json::from_str(text)?;
        let columns = file.cards.into_iter().map(|c| (c.id, c.vector)).collect();
        Self::from_columns(file.hidden, columns, file.fingerprint)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }
}

/// What the model sees around the masked slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Context {
    /// Filled slots rendered with role tags; the mask goes inside
    /// `mask_role`'s tags at its canonical position.
    Cs {
        filled: BTreeMap<Role, String>,
        mask_role: Role,
    },
    /// Plain words; the mask is appended.
    Flat { prefix: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub context: Context,
    pub k: usize,
}

impl Query {
    pub fn cs(filled: impl IntoIterator<Item = (Role, String)>, mask_role: Role, k: usize) -> Result<Self> {
        let filled: BTreeMap<Role, String> = filled.into_iter().collect();
        if filled.contains_key(&mask_role) {
            return Err(Error::Prediction(format!("mask role `{mask_role}` is already filled")));
        }
        for (role, text) in &filled {
            crate::corpus::validate_phrase(text).map_err(|m| Error::Prediction(format!("slot {role}: {m}")))?;
        }
        Self::with_k(Context::Cs { filled, mask_role }, k)
    }

    pub fn flat(prefix: impl Into<String>, k: usize) -> Result<Self> {
        let prefix: String = prefix.into();
        if prefix.contains(['[', ']', '<', '>']) {
            return Err(Error::Prediction("prefix must not contain brackets".into()));
        }
        Self::with_k(
            Context::Flat {
                prefix: prefix.split_whitespace().collect::<Vec<_>>().join(" "),
            },
            k,
        )
    }

    /// Builds a query from filled slots. In flat mode the prefix is the
    /// filled phrases in canonical order and `mask_role` only needs to be
    /// unfilled.
    pub fn from_slots(
        mode: Mode,
        filled: impl IntoIterator<Item = (Role, String)>,
        mask_role: Option<Role>,
        k: usize,
    ) -> Result<Self> {
        let filled: BTreeMap<Role, String> = filled.into_iter().collect();
        match mode {
            Mode::Cs => {
                let role = mask_role.ok_or_else(|| Error::Prediction("cs mode requires a mask role".into()))?;
                Self::cs(filled, role, k)
            }
            Mode::Flat => {
                if let Some(role) = mask_role.filter(|r| filled.contains_key(r)) {
                    return Err(Error::Prediction(format!("mask role `{role}` is already filled")));
                }
                Self::flat(filled.into_values().collect::<Vec<_>>().join(" "), k)
            }
        }
    }

    fn with_k(context: Context, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Prediction("k must be at least 1".into()));
        }
        Ok(Query { context, k })
    }

    pub fn mode(&self) -> Mode {
        match self.context {
            Context::Cs { .. } => Mode::Cs,
            Context::Flat { .. } => Mode::Flat,
        }
    }

    /// Model input text with a literal `[MASK]`.
    pub fn text(&self) -> String {
        match &self.context {
            Context::Cs { filled, mask_role } => {
                let mut slots: Vec<(Role, &str)> = filled.iter().map(|(r, t)| (*r, t.as_str())).collect();
                slots.push((*mask_role, "[MASK]"));
                slots.sort_by_key(|(r, _)| *r);
                render_tagged_slots(slots)
            }
            Context::Flat { prefix } if prefix.is_empty() => "[MASK]".to_owned(),
            Context::Flat { prefix } => format!("{prefix} [MASK]"),
        }
    }
}

/// Encodes the query and returns the sequence with the `[MASK]` position.
pub fn build_masked_sequence(query: &Query, vocab: &Vocab, max_seq: usize) -> Result<(TokenSeq, usize)> {
    if query.mode() == Mode::Cs && !vocab.has_role_tags() {
        return Err(Error::Prediction(
            "cs query needs a vocabulary with role-tag tokens".into(),
        ));
    }
    let content = vocab.tokenize(&query.text());
    if content.len() + 2 > max_seq {
        return Err(Error::Prediction(format!(
            "query needs {} tokens, more than max_seq {max_seq}",
            content.len() + 2
        )));
    }
    let masks: Vec<usize> = content
        .iter()
        .enumerate()
        .filter(|(_, &id)| id == MASK)
        .map(|(i, _)| i)
        .collect();
    if masks.len() != 1 {
        return Err(Error::Prediction(format!(
            "query has {} [MASK] tokens, expected 1",
            masks.len()
        )));
    }
    Ok((TokenSeq::from_content(&content, max_seq), masks[0] + 1))
}

/// Scores for every card, in decoder column order.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub logits: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// Columns by descending logit, ties by ascending card id.
    pub order: Vec<usize>,
}

impl Ranking {
    pub fn from_logits(logits: Vec<f64>, card_ids: &[String]) -> Self {
        let mut by_id: Vec<usize> = (0..logits.len()).collect();
        by_id.sort_by(|&a, &b| card_ids[a].cmp(&card_ids[b]));
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Summed in card-id order so the result does not depend on board order.
        let sum: f64 = by_id.iter().map(|&j| (logits[j] - max).exp()).sum();
        let log_z = max + sum.ln();
        let log_probs = logits.iter().map(|l| l - log_z).collect();
        let mut order = by_id;
        order.sort_by(|&a, &b| {
            logits[b]
                .total_cmp(&logits[a])
                .then_with(|| card_ids[a].cmp(&card_ids[b]))
        });
        Ranking {
            logits,
            log_probs,
            order,
        }
    }

    /// 1-based rank of column `j`.
    pub fn rank_of(&self, j: usize) -> Option<usize> {
        self.order.iter().position(|&c| c == j).map(|p| p + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCard {
    pub rank: usize,
    pub card_id: String,
    pub caption: String,
    pub role: Option<Role>,
    pub prob: f64,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mode: Mode,
    pub query: String,
    pub k: usize,
    pub predictions: Vec<RankedCard>,
}

/// A checkpoint, its card decoder and the board, ready to answer queries.
#[derive(Debug, Clone)]
pub struct Predictor {
    ckpt: Checkpoint,
    decoder: CardDecoder,
    board: Board,
    fingerprint: String,
    card_pos: HashMap<String, usize>,
}

impl Predictor {
    /// Fails if the decoder was built from a different checkpoint or does not
    /// cover exactly the board's cards.
    pub fn new(ckpt: Checkpoint, board: Board, decoder: CardDecoder) -> Result<Self> {
        let fingerprint = ckpt.fingerprint()?;
        if decoder.fingerprint() != fingerprint {
            return Err(Error::Prediction(format!(
                "card decoder is stale: built for model {}, loaded model is {fingerprint}",
                decoder.fingerprint()
            )));
        }
        board.validate()?;
        if decoder.len() != board.cards.len() || board.cards.iter().any(|c| decoder.column_of(&c.id).is_none()) {
            return Err(Error::Prediction(
                "card decoder does not match the board's cards".into(),
            ));
        }
        let card_pos = board.cards.iter().enumerate().map(|(i, c)| (c.id.clone(), i)).collect();
        Ok(Predictor {
            ckpt,
            decoder,
            board,
            fingerprint,
            card_pos,
        })
    }

    /// Builds the decoder from the board and wraps everything.
    pub fn build(ckpt: Checkpoint, board: Board) -> Result<Self> {
        let decoder = CardDecoder::build(&board, &ckpt)?;
        Self::new(ckpt, board, decoder)
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.ckpt
    }

    pub fn decoder(&self) -> &CardDecoder {
        &self.decoder
    }

    pub fn board(&self) -> &Board {
        &self.board
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn mode(&self) -> Option<Mode> {
        self.ckpt.meta.mode
    }

    /// Head-transformed hidden state at the `[MASK]` position.
    pub fn hidden_at_mask(&self, query: &Query) -> Result<Array1<f32>> {
        let (seq, pos) = build_masked_sequence(query, &self.ckpt.vocab, self.ckpt.config().max_seq)?;
        self.ckpt.model.hidden_at(seq.active(), pos)
    }

    pub fn rank(&self, query: &Query) -> Result<Ranking> {
        let hidden = self.hidden_at_mask(query)?;
        let logits = self.decoder.logits(hidden.as_slice().expect("contiguous"));
        Ok(Ranking::from_logits(logits, self.decoder.card_ids()))
    }

    pub fn predict(&self, query: &Query) -> Result<Prediction> {
        let ranking = self.rank(query)?;
        let predictions = ranking
            .order
            .iter()
            .take(query.k)
            .enumerate()
            .map(|(i, &j)| {
                let id = &self.decoder.card_ids()[j];
                let card = &self.board.cards[self.card_pos[id]];
                RankedCard {
                    rank: i + 1,
                    card_id: id.clone(),
                    caption: card.caption.clone(),
                    role: card.role_hint,
                    prob: ranking.log_probs[j].exp(),
                    log_prob: ranking.log_probs[j],
                }
            })
            .collect();
        Ok(Prediction {
            mode: query.mode(),
            query: query.text(),
            k: query.k,
            predictions,
        })
    }
}

/// One-shot prediction; prefer [`Predictor`] when answering many queries.
pub fn predict_cards(query: &Query, ckpt: &Checkpoint, board: &Board, decoder: &CardDecoder) -> Result<Prediction> {
    Predictor::new(ckpt.clone(), board.clone(), decoder.clone())?.predict(query)
}
