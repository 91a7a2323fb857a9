#![allow(dead_code)]

use picto_core::corpus::{generate_corpus, CorpusSplit, Grammar, Mode};
use picto_core::mlm::{Checkpoint, ModelConfig};
use picto_core::pipeline::{prepare_checkpoint, train_tokenizer, Prepared};
use picto_core::prediction::Board;
use picto_core::tokenizer::{TokenId, Vocab, UNK};

pub const SAMPLE_BOARD: &str = include_str!("../../../../data/board.sample");

pub fn board() -> Board {
    Board::from_json(SAMPLE_BOARD).unwrap()
}

pub fn split(n_train: usize, seed: u64) -> CorpusSplit {
    generate_corpus(&Grammar::default_grammar(), n_train, 20, seed).unwrap()
}

pub fn base_vocab(split: &CorpusSplit) -> Vocab {
    train_tokenizer(&split.train, &board(), 1500).unwrap()
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        hidden: 16,
        layers: 1,
        heads: 2,
        ff_size: 32,
        max_seq: 33,
        vocab_size: 0,
        dropout: 0.1,
    }
}

/// Untrained model of `mode` over the sample board, small enough for tests.
pub fn prepared(mode: Mode, seed: u64) -> (CorpusSplit, Prepared) {
    let split = split(300, 1);
    let base = base_vocab(&split);
    let p = prepare_checkpoint(mode, &base, &board(), &tiny_config(), seed).unwrap();
    (split, p)
}

pub fn checkpoint(mode: Mode) -> Checkpoint {
    prepared(mode, 3).1.ckpt
}

/// Independent greedy longest-match segmenter over the token strings.
pub fn oracle_segment(vocab: &Vocab, text: &str) -> Vec<TokenId> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let lower = word.to_lowercase();
        let mut runs: Vec<String> = Vec::new();
        let mut cur = String::new();
        for c in lower.chars() {
            if c.is_ascii_punctuation() {
                if !cur.is_empty() {
                    runs.push(std::mem::take(&mut cur));
                }
                runs.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            runs.push(cur);
        }
        for run in runs {
            let chars: Vec<char> = run.chars().collect();
            let mut ids = Vec::new();
            let mut start = 0;
            let mut ok = true;
            while start < chars.len() {
                let hit = (start + 1..=chars.len()).rev().find_map(|end| {
                    let s: String = chars[start..end].iter().collect();
                    let piece = if start == 0 { s } else { format!("##{s}") };
                    vocab.id(&piece).map(|id| (id, end))
                });
                match hit {
                    Some((id, end)) => {
                        ids.push(id);
                        start = end;
                    }
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                out.extend(ids);
            } else {
                out.push(UNK);
            }
        }
    }
    out
}
