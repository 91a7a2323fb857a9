//! Colourful Semantics sentences: roles, slots, the tagged and flat
//! renderings, and the line-delimited corpus file.
//!
//! A sentence is an ordered list of slots, each pairing a semantic role with
//! a short word phrase. Slots always appear in canonical role order
//! (`quem < verbo < o_que < como < onde < quando`) and a role appears at most
//! once.

mod grammar;

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use grammar::{
    generate_corpus, validate_sentence, Affinity, CorpusSplit, Grammar, WeightedPhrase, DEFAULT_GRAMMAR,
};

/// Semantic role of a slot. The derived `Ord` is the canonical slot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Quem,
    Verbo,
    OQue,
    Como,
    Onde,
    Quando,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::Quem,
        Role::Verbo,
        Role::OQue,
        Role::Como,
        Role::Onde,
        Role::Quando,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Quem => "quem",
            Role::Verbo => "verbo",
            Role::OQue => "o_que",
            Role::Como => "como",
            Role::Onde => "onde",
            Role::Quando => "quando",
        }
    }

    pub fn open_tag(self) -> String {
        format!("<{}>", self.as_str())
    }

    pub fn close_tag(self) -> String {
        format!("</{}>", self.as_str())
    }

    /// Position in the canonical order, 0-based.
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown role `{s}`")))
    }
}

/// How a sentence is rendered for a model: with role tags or as plain words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Cs,
    Flat,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Cs => "cs",
            Mode::Flat => "flat",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cs" => Ok(Mode::Cs),
            "flat" => Ok(Mode::Flat),
            _ => Err(Error::Config(format!("unknown mode `{s}` (expected cs or flat)"))),
        }
    }
}

/// Checks a slot phrase: 1 to 3 words separated by single spaces, no
/// surrounding whitespace, and no characters that could be confused with
/// role tags or special tokens.
pub fn validate_phrase(text: &str) -> std::result::Result<(), String> {
    if text.is_empty() {
        return Err("empty phrase".into());
    }
    if text.trim() != text {
        return Err(format!("phrase `{text}` has leading or trailing whitespace"));
    }
    if text.contains(['<', '>', '[', ']']) {
        return Err(format!("phrase `{text}` contains a bracket"));
    }
    let words: Vec<&str> = text.split(' ').collect();
    if words.iter().any(|w| w.is_empty() || w.chars().any(char::is_whitespace)) {
        return Err(format!("phrase `{text}` must use single spaces between words"));
    }
    if words.len() > 3 {
        return Err(format!("phrase `{text}` has more than 3 words"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub role: Role,
    pub text: String,
}

impl Slot {
    pub fn new(role: Role, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        validate_phrase(&text).map_err(Error::Config)?;
        Ok(Slot { role, text })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Sentence {
    slots: Vec<Slot>,
}

#[derive(Deserialize)]
struct SentenceRecord {
    slots: Vec<Slot>,
}

impl<'de> Deserialize<'de> for Sentence {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let record = SentenceRecord::deserialize(d)?;
        Sentence::new(record.slots).map_err(serde::de::Error::custom)
    }
}

impl Sentence {
    /// Builds a sentence, rejecting duplicate roles, out-of-order roles and
    /// malformed phrases.
    pub fn new(slots: Vec<Slot>) -> Result<Self> {
        for slot in &slots {
            validate_phrase(&slot.text).map_err(Error::Config)?;
        }
        for pair in slots.windows(2) {
            if pair[0].role == pair[1].role {
                return Err(Error::Config(format!("duplicate role `{}`", pair[0].role)));
            }
            if pair[0].role > pair[1].role {
                return Err(Error::Config(format!(
                    "role `{}` after `{}` breaks canonical order",
                    pair[1].role, pair[0].role
                )));
            }
        }
        Ok(Sentence { slots })
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn get(&self, role: Role) -> Option<&str> {
        self.slots.iter().find(|s| s.role == role).map(|s| s.text.as_str())
    }

    pub fn last(&self) -> Option<&Slot> {
        self.slots.last()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// `<quem> eu </quem> <verbo> comer </verbo> ...`
    pub fn render_tagged(&self) -> String {
        render_tagged_slots(self.slots.iter().map(|s| (s.role, s.text.as_str())))
    }

    /// Slot phrases joined in canonical order, without tags.
    pub fn render(&self, mode: Mode) -> String {
        match mode {
            Mode::Cs => self.render_tagged(),
            Mode::Flat => self.render_flat(),
        }
    }

    pub fn render_flat(&self) -> String {
        self.slots.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join(" ")
    }
}

/// Renders (role, text) pairs in the given order; callers are responsible for
/// passing canonical order.
pub(crate) fn render_tagged_slots<'a>(slots: impl IntoIterator<Item = (Role, &'a str)>) -> String {
    let mut out = String::new();
    for (role, text) in slots {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&role.open_tag());
        out.push(' ');
        out.push_str(text);
        out.push(' ');
        out.push_str(&role.close_tag());
    }
    out
}

fn parse_tag(token: &str) -> Option<(bool, &str)> {
    let inner = token.strip_prefix('<')?.strip_suffix('>')?;
    match inner.strip_prefix('/') {
        Some(name) => Some((true, name)),
        None => Some((false, inner)),
    }
}

/// Parses the tagged rendering back into a sentence.
///
/// Errors carry the byte offset of the offending token.
pub fn parse_tagged(text: &str) -> Result<Sentence> {
    let mut slots: Vec<Slot> = Vec::new();
    let mut open: Option<(Role, usize)> = None;
    let mut words: Vec<&str> = Vec::new();

    for (pos, token) in whitespace_tokens(text) {
        match parse_tag(token) {
            Some((closing, name)) => {
                let role: Role = name
                    .parse()
                    .map_err(|_| Error::parse(pos, format!("unknown tag `{token}`")))?;
                match (closing, open) {
                    (false, None) => {
                        if slots.iter().any(|s| s.role == role) {
                            return Err(Error::parse(pos, format!("duplicate role `{role}`")));
                        }
                        if let Some(prev) = slots.last() {
                            if prev.role > role {
                                return Err(Error::parse(
                                    pos,
                                    format!("role `{role}` out of canonical order after `{}`", prev.role),
                                ));
                            }
                        }
                        open = Some((role, pos));
                    }
                    (false, Some((outer, _))) => {
                        return Err(Error::parse(
                            pos,
                            format!("tag `{token}` opened inside unclosed `<{outer}>`"),
                        ));
                    }
                    (true, None) => {
                        return Err(Error::parse(pos, format!("closing tag `{token}` without opening tag")));
                    }
                    (true, Some((outer, open_pos))) => {
                        if outer != role {
                            return Err(Error::parse(
                                pos,
                                format!("mismatched tag `{token}` closes `<{outer}>`"),
                            ));
                        }
                        let phrase = words.join(" ");
                        validate_phrase(&phrase).map_err(|m| Error::parse(open_pos, m))?;
                        slots.push(Slot { role, text: phrase });
                        words.clear();
                        open = None;
                    }
                }
            }
            None => {
                if token.contains(['<', '>']) {
                    return Err(Error::parse(pos, format!("malformed tag `{token}`")));
                }
                if open.is_none() {
                    return Err(Error::parse(pos, format!("word `{token}` outside of a role tag")));
                }
                words.push(token);
            }
        }
    }
    if let Some((role, pos)) = open {
        return Err(Error::parse(pos, format!("unclosed tag `<{role}>`")));
    }
    Sentence::new(slots).map_err(|e| Error::parse(0, e.to_string()))
}

fn whitespace_tokens(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.split_whitespace().map(move |tok| {
        let offset = tok.as_ptr() as usize - text.as_ptr() as usize;
        (offset, tok)
    })
}

/// Writes one JSON record per line.
pub fn write_corpus(path: &Path, sentences: &[Sentence]) -> Result<()> {
    let mut out = Vec::new();
    write_corpus_to(&mut out, sentences)?;
    fs::write(path, out).map_err(|e| Error::file(path, e))
}

pub fn write_corpus_to(mut w: impl Write, sentences: &[Sentence]) -> Result<()> {
    for s in sentences {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<Sentence>> {
    let file = fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let mut sentences = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sentence: Sentence = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        sentences.push(sentence);
    }
    Ok(sentences)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sentence(slots: &[(Role, &str)]) -> Sentence {
        Sentence::new(slots.iter().map(|&(r, t)| Slot::new(r, t).unwrap()).collect()).unwrap()
    }

    #[test]
    fn renders_annotated_example() {
        let s = sentence(&[
            (Role::Quem, "eu"),
            (Role::Verbo, "querer comer"),
            (Role::OQue, "pipoca"),
        ]);
        assert_eq!(
            s.render_tagged(),
            "<quem> eu </quem> <verbo> querer comer </verbo> <o_que> pipoca </o_que>"
        );
    }

    #[test]
    fn single_slot_rendering() {
        let s = sentence(&[(Role::Verbo, "dormir")]);
        assert_eq!(s.render_tagged(), "<verbo> dormir </verbo>");
        assert_eq!(s.render_flat(), "dormir");
    }

    #[test]
    fn five_slot_tag_order() {
        let s = sentence(&[
            (Role::Quem, "eu"),
            (Role::Verbo, "comi"),
            (Role::OQue, "pipoca"),
            (Role::Onde, "na escola"),
            (Role::Quando, "hoje"),
        ]);
        assert_eq!(
            s.render_tagged(),
            "<quem> eu </quem> <verbo> comi </verbo> <o_que> pipoca </o_que> \
             <onde> na escola </onde> <quando> hoje </quando>"
        );
        assert_eq!(s.render_flat(), "eu comi pipoca na escola hoje");
    }

    #[test]
    fn flat_rendering() {
        let s = sentence(&[(Role::Quem, "eu"), (Role::Verbo, "comer"), (Role::OQue, "pipoca")]);
        assert_eq!(s.render_flat(), "eu comer pipoca");
    }

    #[test]
    fn sentence_rejects_bad_order_and_duplicates() {
        let dup = vec![
            Slot::new(Role::Quem, "eu").unwrap(),
            Slot::new(Role::Quem, "você").unwrap(),
        ];
        assert!(Sentence::new(dup).is_err());
        let order = vec![
            Slot::new(Role::OQue, "bolo").unwrap(),
            Slot::new(Role::Verbo, "comer").unwrap(),
        ];
        assert!(Sentence::new(order).is_err());
    }

    #[test]
    fn phrase_validation() {
        assert!(validate_phrase("na escola").is_ok());
        assert!(validate_phrase("").is_err());
        assert!(validate_phrase(" eu").is_err());
        assert!(validate_phrase("a  b").is_err());
        assert!(validate_phrase("<quem>").is_err());
        assert!(validate_phrase("um dois tres quatro").is_err());
        assert!(validate_phrase("[MASK]").is_err());
    }

    #[test]
    fn parse_round_trip() {
        let s = sentence(&[
            (Role::Quem, "a mamãe"),
            (Role::Verbo, "beber"),
            (Role::OQue, "suco"),
            (Role::Quando, "de manhã"),
        ]);
        assert_eq!(parse_tagged(&s.render_tagged()).unwrap(), s);
    }

    #[test]
    fn parse_rejects_duplicate_role() {
        let err = parse_tagged("<quem> eu </quem> <quem> você </quem>").unwrap_err();
        assert!(matches!(err, Error::Parse { position: 18, .. }), "{err}");
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn parse_rejects_mismatched_tag() {
        let err = parse_tagged("<verbo> comer </o_que>").unwrap_err();
        assert!(matches!(err, Error::Parse { position: 14, .. }), "{err}");
        assert!(err.to_string().contains("mismatched"));
    }

    #[test]
    fn parse_rejects_other_malformations() {
        for bad in [
            "<foo> eu </foo>",
            "<verbo> comer </verbo> <quem> eu </quem>",
            "<verbo> comer",
            "eu <verbo> comer </verbo>",
            "<verbo> </verbo>",
            "</verbo>",
            "<verbo> <quem> eu </quem> </verbo>",
            "<verbo> co>mer </verbo>",
        ] {
            assert!(matches!(parse_tagged(bad), Err(Error::Parse { .. })), "{bad}");
        }
    }

    #[test]
    fn corpus_record_format() {
        let s = sentence(&[(Role::Quem, "eu"), (Role::Verbo, "dormir")]);
        let line = serde_json::to_string(&s).unwrap();
        assert_eq!(
            line,
            r#"{"slots":[{"role":"quem","text":"eu"},{"role":"verbo","text":"dormir"}]}"#
        );
        let back: Sentence = serde_json::from_str(&line).unwrap();
        assert_eq!(back, s);
        let bad = r#"{"slots":[{"role":"verbo","text":"x"},{"role":"quem","text":"eu"}]}"#;
        assert!(serde_json::from_str::<Sentence>(bad).is_err());
    }

    #[test]
    fn role_order_is_canonical() {
        let mut roles = Role::ALL;
        roles.reverse();
        roles.sort();
        assert_eq!(roles, Role::ALL);
        assert_eq!("o_que".parse::<Role>().unwrap(), Role::OQue);
        assert_eq!(serde_json::to_string(&Role::OQue).unwrap(), "\"o_que\"");
    }
}
