use ndarray::Array2;

use super::{role_tag_strings, TokenId, Vocab};
use crate::error::{Error, Result};

/// Read access to embedding rows by token id.
pub trait EmbeddingLookup {
    fn width(&self) -> usize;
    fn rows(&self) -> usize;
    fn row(&self, id: TokenId) -> &[f32];
}

impl EmbeddingLookup for Array2<f32> {
    fn width(&self) -> usize {
        self.ncols()
    }

    fn rows(&self) -> usize {
        self.nrows()
    }

    fn row(&self, id: TokenId) -> &[f32] {
        let w = self.ncols();
        let start = id as usize * w;
        &self.as_slice().expect("embedding tables are contiguous")[start..start + w]
    }
}

/// A token appended to a vocabulary together with the vector its embedding
/// row should be initialized with.
#[derive(Debug, Clone, PartialEq)]
pub struct NewToken {
    pub token: String,
    pub id: TokenId,
    pub init: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MweExtension {
    pub added: Vec<NewToken>,
    /// Expressions that were not added, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Elementwise mean of the rows for `ids`, accumulated in f64.
pub fn mean_of_rows(lookup: &impl EmbeddingLookup, ids: &[TokenId]) -> Vec<f32> {
    mean_of(ids.iter().map(|&id| lookup.row(id)), lookup.width())
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a [f32]>, width: usize) -> Vec<f32> {
    let mut acc = vec![0f64; width];
    let mut n = 0usize;
    for row in rows {
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += f64::from(x);
        }
        n += 1;
    }
    assert!(n > 0, "mean of zero rows");
    acc.into_iter().map(|a| (a / n as f64) as f32).collect()
}

/// Adds the 12 role tags as single tokens. Each tag's init vector is the mean
/// of the rows of the pieces the tag string segments into under the
/// pre-extension vocabulary (`<`, `o`, `_`, `que`, `>` for `<o_que>`).
pub fn add_role_tokens(vocab: &Vocab, lookup: &impl EmbeddingLookup) -> Result<(Vocab, Vec<NewToken>)> {
    if vocab.has_role_tags() {
        return Err(Error::Tokenizer("vocabulary already has role tags".into()));
    }
    check_lookup(vocab, lookup)?;
    let mut extended = vocab.clone();
    let mut added = Vec::with_capacity(12);
    for tag in role_tag_strings() {
        if vocab.id(&tag).is_some() {
            return Err(Error::Tokenizer(format!("tag `{tag}` is already a token")));
        }
        let pieces = vocab.tokenize(&tag);
        let init = mean_of_rows(lookup, &pieces);
        let id = extended.push_role_tag(tag.clone())?;
        added.push(NewToken { token: tag, id, init });
    }
    Ok((extended, added))
}

/// Adds one token per 2–3 word expression, joined with `_`. The init vector
/// is the mean over words of each word's vector, where a word's vector is the
/// mean of its subword-piece rows. Expressions whose token already exists
/// are skipped and reported.
pub fn add_mwe_tokens<S: AsRef<str>>(
    vocab: &Vocab,
    expressions: &[S],
    lookup: &impl EmbeddingLookup,
) -> Result<(Vocab, MweExtension)> {
    check_lookup(vocab, lookup)?;
    let mut extended = vocab.clone();
    let mut ext = MweExtension::default();
    for expr in expressions {
        let expr = expr.as_ref();
        let lower = expr.to_lowercase();
        let words: Vec<&str> = lower.split_whitespace().collect();
        if !(2..=3).contains(&words.len()) {
            return Err(Error::Tokenizer(format!("expression `{expr}` must have 2 or 3 words")));
        }
        if words.iter().any(|w| w.contains('_')) {
            return Err(Error::Tokenizer(format!("expression `{expr}` contains `_`")));
        }
        let token = words.join("_");
        if extended.id(&token).is_some() {
            log::warn!("multi-word expression `{expr}` collides with an existing token; skipped");
            ext.skipped
                .push((expr.to_owned(), format!("token `{token}` already exists")));
            continue;
        }
        let word_vectors: Vec<Vec<f32>> = words.iter().map(|w| mean_of_rows(lookup, &vocab.tokenize(w))).collect();
        let init = mean_of(word_vectors.iter().map(Vec::as_slice), lookup.width());
        let id = extended.push_mwe(&words)?;
        ext.added.push(NewToken { token, id, init });
    }
    Ok((extended, ext))
}

fn check_lookup(vocab: &Vocab, lookup: &impl EmbeddingLookup) -> Result<()> {
    if lookup.width() == 0 {
        return Err(Error::Tokenizer("embedding lookup has zero width".into()));
    }
    if lookup.rows() < vocab.len() {
        return Err(Error::Tokenizer(format!(
            "embedding lookup has {} rows for a vocabulary of {}",
            lookup.rows(),
            vocab.len()
        )));
    }
    Ok(())
}
