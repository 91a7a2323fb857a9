use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{split_word, Vocab, CONTINUATION, SPECIAL_TOKENS};
use crate::error::{Error, Result};

/// Learns a subword vocabulary from `texts`.
///
/// The vocabulary starts with the special tokens and the character alphabet
/// (word-initial characters plain, the rest with the `##` prefix), then adds
/// the most frequent adjacent-piece merges until `target_vocab_size` is
/// reached or every word is a single piece. Ties are broken by the
/// lexicographically smallest pair, so training is deterministic.
pub fn train_subword<S: AsRef<str>>(texts: &[S], target_vocab_size: usize) -> Result<Vocab> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for text in texts {
        for word in text.as_ref().split_whitespace() {
            for piece in split_word(word) {
                *counts.entry(piece).or_default() += 1;
            }
        }
    }
    if counts.is_empty() {
        return Err(Error::Tokenizer("cannot train on an empty corpus".into()));
    }

    let mut words: Vec<(Vec<String>, u64)> = counts
        .into_iter()
        .map(|(w, c)| {
            let symbols = w
                .chars()
                .enumerate()
                .map(|(i, ch)| {
                    if i == 0 {
                        ch.to_string()
                    } else {
                        format!("{CONTINUATION}{ch}")
                    }
                })
                .collect();
            (symbols, c)
        })
        .collect();

    let alphabet: BTreeSet<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();
    let minimum = SPECIAL_TOKENS.len() + alphabet.len();
    if target_vocab_size < minimum {
        return Err(Error::Tokenizer(format!(
            "target vocab size {target_vocab_size} is below the {minimum} needed for specials and alphabet"
        )));
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet.iter().cloned());
    let mut known: BTreeSet<String> = tokens.iter().cloned().collect();

    while tokens.len() < target_vocab_size {
        let mut pairs: HashMap<(&str, &str), u64> = HashMap::new();
        for (symbols, c) in &words {
            for w in symbols.windows(2) {
                *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += c;
            }
        }
        let Some(((a, b), _)) = pairs
            .into_iter()
            .max_by(|(p1, c1), (p2, c2)| c1.cmp(c2).then_with(|| p2.cmp(p1)))
        else {
            break;
        };
        let (a, b) = (a.to_owned(), b.to_owned());
        let merged = format!("{a}{}", b.strip_prefix(CONTINUATION).unwrap_or(&b));
        for (symbols, _) in &mut words {
            let mut i = 0;
            while i + 1 < symbols.len() {
                if symbols[i] == a && symbols[i + 1] == b {
                    symbols[i] = merged.clone();
                    symbols.remove(i + 1);
                }
                i += 1;
            }
        }
        if known.insert(merged.clone()) {
            tokens.push(merged);
        }
    }
    Vocab::from_tokens(tokens)
}
