//! WordPiece-style subword tokenizer with vocabulary extension for role tags
//! and multi-word expressions.
//!
//! Text is lowercased, split on whitespace, and punctuation characters are
//! split into their own words before greedy longest-match segmentation, so a
//! tag string such as `<o_que>` segments into `<`, `o`, `_`, `que`, `>` until
//! the vocabulary is extended with the tag as a whole token. After extension,
//! role tags and multi-word expressions are matched as whole tokens in a
//! pre-pass over whitespace-delimited words.

mod extend;
mod wordpiece;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::Role;
use crate::error::{Error, Result};

pub use extend::{add_mwe_tokens, add_role_tokens, mean_of_rows, EmbeddingLookup, MweExtension, NewToken};
pub use wordpiece::train_subword;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const MASK: TokenId = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

const CONTINUATION: &str = "##";
const MAX_WORD_CHARS: usize = 100;
const VOCAB_MAGIC: &str = "# picto-vocab v1";

/// Role tag strings in id order: open and close tag for each role.
pub fn role_tag_strings() -> Vec<String> {
    Role::ALL.iter().flat_map(|r| [r.open_tag(), r.close_tag()]).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    role_tags: Vec<TokenId>,
    mwe: Vec<TokenId>,
    mwe_by_phrase: HashMap<String, TokenId>,
}

/// Encoded sequence: `[CLS] content [SEP]` followed by `[PAD]` up to the
/// fixed length. `len` is the attention length (everything before padding).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub len: usize,
}

impl TokenSeq {
    /// Wraps content ids with `[CLS]`/`[SEP]`, truncating trailing content
    /// so that the result fits in `max_seq`.
    pub fn from_content(content: &[TokenId], max_seq: usize) -> Self {
        assert!(max_seq >= 3, "max_seq must leave room for [CLS] and [SEP]");
        let keep = content.len().min(max_seq - 2);
        let mut ids = Vec::with_capacity(max_seq);
        ids.push(CLS);
        ids.extend_from_slice(&content[..keep]);
        ids.push(SEP);
        let len = ids.len();
        ids.resize(max_seq, PAD);
        TokenSeq { ids, len }
    }

    pub fn active(&self) -> &[TokenId] {
        &self.ids[..self.len]
    }

    pub fn max_seq(&self) -> usize {
        self.ids.len()
    }
}

pub(crate) fn is_split_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_control())
}

/// Lowercases and splits one whitespace-delimited word into punctuation-free
/// runs and single punctuation characters.
pub(crate) fn split_word(word: &str) -> Vec<String> {
    let lower = word.to_lowercase();
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in lower.chars() {
        if is_split_punct(c) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        } else {
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

impl Vocab {
    pub(crate) fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut vocab = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
            role_tags: Vec::new(),
            mwe: Vec::new(),
            mwe_by_phrase: HashMap::new(),
        };
        for t in tokens {
            vocab.push(t)?;
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if vocab.tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Tokenizer(format!("special token {s} must have id {i}")));
            }
        }
        Ok(vocab)
    }

    fn push(&mut self, token: String) -> Result<TokenId> {
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(Error::Tokenizer(format!("invalid token {token:?}")));
        }
        if self.index.contains_key(&token) {
            return Err(Error::Tokenizer(format!("duplicate token `{token}`")));
        }
        let id = self.tokens.len() as TokenId;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        Ok(id)
    }

    pub(crate) fn push_role_tag(&mut self, tag: String) -> Result<TokenId> {
        let id = self.push(tag)?;
        self.role_tags.push(id);
        Ok(id)
    }

    pub(crate) fn push_mwe(&mut self, words: &[&str]) -> Result<TokenId> {
        let id = self.push(words.join("_"))?;
        self.mwe.push(id);
        self.mwe_by_phrase.insert(words.join(" "), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids of the 12 role tags (open/close per role, canonical order), empty
    /// before extension.
    pub fn role_tag_ids(&self) -> &[TokenId] {
        &self.role_tags
    }

    pub fn has_role_tags(&self) -> bool {
        !self.role_tags.is_empty()
    }

    pub fn is_role_tag(&self, id: TokenId) -> bool {
        self.role_tags.contains(&id)
    }

    pub fn mwe_ids(&self) -> &[TokenId] {
        &self.mwe
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < SPECIAL_TOKENS.len()
    }

    pub fn is_mwe(&self, id: TokenId) -> bool {
        self.mwe.contains(&id)
    }

    /// Greedy longest-match segmentation of a single punctuation-free word.
    fn wordpiece(&self, word: &str, out: &mut Vec<TokenId>) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push(UNK);
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece.insert_str(0, CONTINUATION);
                }
                if let Some(&id) = self.index.get(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(UNK);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    /// Content token ids for `text`, without `[CLS]`/`[SEP]`.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let mut out = Vec::new();
        let mut i = 0;
        'words: while i < words.len() {
            let word = words[i];
            if let Some(pos) = SPECIAL_TOKENS.iter().position(|s| *s == word) {
                out.push(pos as TokenId);
                i += 1;
                continue;
            }
            let lower = word.to_lowercase();
            if self.has_role_tags() {
                if let Some(&id) = self.index.get(&lower) {
                    if self.is_role_tag(id) {
                        out.push(id);
                        i += 1;
                        continue;
                    }
                }
            }
            if !self.mwe_by_phrase.is_empty() {
                for n in (2..=3).rev() {
                    if i + n > words.len() {
                        continue;
                    }
                    let phrase = words[i..i + n]
                        .iter()
                        .map(|w| w.to_lowercase())
                        .collect::<Vec<_>>()
                        .join(" ");
                    if let Some(&id) = self.mwe_by_phrase.get(&phrase) {
                        out.push(id);
                        i += n;
                        continue 'words;
                    }
                }
            }
            for piece in split_word(word) {
                self.wordpiece(&piece, &mut out);
            }
            i += 1;
        }
        out
    }

    pub fn encode(&self, text: &str, max_seq: usize) -> TokenSeq {
        TokenSeq::from_content(&self.tokenize(text), max_seq)
    }

    /// Reassembles text from ids, skipping `[PAD]`, `[CLS]` and `[SEP]`.
    /// Continuation pieces are glued to the previous piece and multi-word
    /// tokens are expanded back to space-separated words.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            if matches!(id, PAD | CLS | SEP) {
                continue;
            }
            let tok = self.token(id).unwrap_or(SPECIAL_TOKENS[UNK as usize]);
            if let Some(rest) = tok.strip_prefix(CONTINUATION).filter(|r| !r.is_empty()) {
                if !out.is_empty() {
                    out.push_str(rest);
                    continue;
                }
            }
            if !out.is_empty() {
                out.push(' ');
            }
            if self.is_mwe(id) {
                out.push_str(&tok.replace('_', " "));
            } else {
                out.push_str(tok);
            }
        }
        out
    }

    pub fn decode_seq(&self, seq: &TokenSeq) -> String {
        self.decode(seq.active())
    }

    /// Serializes to the vocab file format: `# ` header lines followed by one
    /// token per line, where the line index (after the header) is the id.
    pub fn to_file_string(&self) -> String {
        let list = |out: &mut String, key: &str, ids: &[TokenId]| {
            out.push_str(key);
            for id in ids {
                let _ = write!(out, " {id}");
            }
            out.push('\n');
        };
        let mut out = String::new();
        out.push_str(VOCAB_MAGIC);
        out.push('\n');
        out.push_str("# specials");
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            let _ = write!(out, " {s}={i}");
        }
        out.push('\n');
        list(&mut out, "# role_tags", &self.role_tags);
        list(&mut out, "# mwe", &self.mwe);
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut lines = text.split_inclusive('\n').peekable();
        let mut header = Vec::new();
        while let Some(line) = lines.peek() {
            if !line.starts_with("# ") {
                break;
            }
            header.push(line.trim_end_matches('\n'));
            lines.next();
        }
        if header.first() != Some(&VOCAB_MAGIC) {
            return Err(Error::Tokenizer("missing vocab header".into()));
        }
        let tokens: Vec<String> = lines
            .map(|l| {
                l.strip_suffix('\n')
                    .map(str::to_owned)
                    .ok_or_else(|| Error::Tokenizer("vocab file must end with a newline".into()))
            })
            .collect::<Result<_>>()?;
        let mut vocab = Vocab::from_tokens(tokens)?;

        let parse_ids = |rest: &str| -> Result<Vec<TokenId>> {
            rest.split_whitespace()
                .map(|s| {
                    s.parse::<TokenId>()
                        .map_err(|_| Error::Tokenizer(format!("bad id `{s}` in vocab header")))
                })
                .collect()
        };
        for line in &header[1..] {
            let line = line.trim_end();
            if let Some(rest) = line.strip_prefix("# role_tags") {
                let ids = parse_ids(rest)?;
                if !ids.is_empty() {
                    let expected = role_tag_strings();
                    if ids.len() != expected.len() {
                        return Err(Error::Tokenizer("role_tags header must list 12 ids".into()));
                    }
                    for (id, tag) in ids.iter().zip(&expected) {
                        if vocab.token(*id) != Some(tag.as_str()) {
                            return Err(Error::Tokenizer(format!("role tag id {id} is not `{tag}`")));
                        }
                    }
                }
                vocab.role_tags = ids;
            } else if let Some(rest) = line.strip_prefix("# mwe") {
                for id in parse_ids(rest)? {
                    let tok = vocab
                        .token(id)
                        .ok_or_else(|| Error::Tokenizer(format!("mwe id {id} out of range")))?
                        .to_owned();
                    if !tok.contains('_') {
                        return Err(Error::Tokenizer(format!("mwe token `{tok}` has no `_`")));
                    }
                    vocab.mwe.push(id);
                    vocab.mwe_by_phrase.insert(tok.replace('_', " "), id);
                }
            } else if let Some(rest) = line.strip_prefix("# specials") {
                let expected: Vec<String> = SPECIAL_TOKENS
                    .iter()
                    .enumerate()
                    .map(|(i, s)| format!("{s}={i}"))
                    .collect();
                let got: Vec<&str> = rest.split_whitespace().collect();
                if got != expected {
                    return Err(Error::Tokenizer(format!("unexpected specials header `{line}`")));
                }
            } else {
                return Err(Error::Tokenizer(format!("unknown vocab header `{line}`")));
            }
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_file_string(&text)
    }
}
