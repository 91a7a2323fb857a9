#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::Array2;
use picto_core::corpus::{generate_corpus, Grammar, Mode};
use picto_core::mlm::{Checkpoint, ModelConfig};
use picto_core::pipeline::{prepare_checkpoint, train_tokenizer};
use picto_core::prediction::Board;
use picto_core::tokenizer::{TokenId, Vocab, UNK};

pub fn board_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/board.sample")
}

/// Small untrained model of `mode` over the sample board, initialized from
/// `seed`.
pub fn tiny_checkpoint(mode: Mode, seed: u64) -> Checkpoint {
    let board = Board::load(board_path()).unwrap();
    let split = generate_corpus(&Grammar::default_grammar(), 200, 0, 1).unwrap();
    let base = train_tokenizer(&split.train, &board, 1500).unwrap();
    let template = ModelConfig {
        hidden: 16,
        layers: 1,
        heads: 2,
        ff_size: 32,
        max_seq: 33,
        vocab_size: 0,
        dropout: 0.1,
    };
    let mut ckpt = prepare_checkpoint(mode, &base, &board, &template, seed).unwrap().ckpt;
    ckpt.meta.mode = Some(mode);
    ckpt
}

/// Runs the `picto` binary with `args`.
pub fn picto<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_picto"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("picto binary runs")
}

/// Runs `picto` and returns stdout, panicking with stderr on failure.
pub fn picto_ok<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> String {
    let out = picto(args);
    assert!(
        out.status.success(),
        "picto exited with {}: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Greedy longest-match segmentation over the token strings.
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
                        ids = vec![UNK];
                        break;
                    }
                }
            }
            out.extend(ids);
        }
    }
    out
}

/// Caption tokens: multi-word tokens first, then word pieces.
pub fn oracle_caption_ids(vocab: &Vocab, caption: &str) -> Vec<TokenId> {
    let words: Vec<String> = caption.split_whitespace().map(str::to_lowercase).collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let joined = (2..=3).rev().filter(|n| i + n <= words.len()).find_map(|n| {
            let id = vocab.id(&words[i..i + n].join("_"))?;
            vocab.is_mwe(id).then_some((id, n))
        });
        match joined {
            Some((id, n)) => {
                out.push(id);
                i += n;
            }
            None => {
                out.extend(oracle_segment(vocab, &words[i]));
                i += 1;
            }
        }
    }
    out
}

/// Mean of table rows accumulated in f64.
pub fn oracle_mean(table: &Array2<f32>, ids: &[TokenId]) -> Vec<f64> {
    (0..table.ncols())
        .map(|c| ids.iter().map(|&id| f64::from(table[[id as usize, c]])).sum::<f64>() / ids.len() as f64)
        .collect()
}

pub fn oracle_card_vector(vocab: &Vocab, table: &Array2<f32>, caption: &str) -> Vec<f64> {
    oracle_mean(table, &oracle_caption_ids(vocab, caption))
}

/// Mean of per-word vectors, the init rule for a multi-word token. Word
/// vectors are f32 like every other embedding row.
pub fn oracle_mwe_init(vocab: &Vocab, table: &Array2<f32>, expr: &str) -> Vec<f64> {
    let words: Vec<Vec<f32>> = expr
        .split_whitespace()
        .map(|w| to_f32(oracle_mean(table, &oracle_segment(vocab, w))))
        .collect();
    (0..table.ncols())
        .map(|c| words.iter().map(|w| f64::from(w[c])).sum::<f64>() / words.len() as f64)
        .collect()
}

pub fn to_f32(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}
