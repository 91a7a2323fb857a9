//! Completion experiment: mask the last slot of each held-out sentence,
//! rank the board's cards, and score both models on the same cases.

mod metrics;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{acc_at_k, entropy_at_k, mrr, rank_of};

use crate::corpus::{Mode, Sentence};
use crate::error::{Error, Result};
use crate::prediction::{Board, Predictor, Query};

/// Grid sizes evaluated by default.
pub const DEFAULT_K_LIST: [usize; 5] = [1, 9, 18, 25, 36];

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub sentence: Sentence,
    /// Card matching the last slot's phrase; `None` if the board has none.
    pub target: Option<String>,
    pub query: Query,
}

/// The last slot becomes the mask: in cs mode its role is masked with the
/// other slots as context, in flat mode the words before it form the prefix.
pub fn eval_case(sentence: &Sentence, board: &Board, mode: Mode, k: usize) -> Result<EvalCase> {
    let last = sentence
        .last()
        .ok_or_else(|| Error::Eval("cannot build a case from an empty sentence".into()))?;
    let context = sentence.slots()[..sentence.slots().len() - 1]
        .iter()
        .map(|s| (s.role, s.text.clone()));
    let query = Query::from_slots(mode, context, Some(last.role), k)?;
    let target = board.card_for_phrase(&last.text, Some(last.role)).map(|c| c.id.clone());
    Ok(EvalCase {
        sentence: sentence.clone(),
        target,
        query,
    })
}

/// One case per sentence. Sentences whose final phrase has no card stay in
/// the set as guaranteed misses; it is an error if none has a card.
pub fn build_eval_cases(test: &[Sentence], board: &Board, mode: Mode, k: usize) -> Result<Vec<EvalCase>> {
    let cases = test
        .iter()
        .map(|s| eval_case(s, board, mode, k))
        .collect::<Result<Vec<_>>>()?;
    if !cases.iter().any(|c| c.target.is_some()) {
        return Err(Error::Eval(
            "no test sentence ends in a phrase that has a card on the board".into(),
        ));
    }
    let missing = cases.iter().filter(|c| c.target.is_none()).count();
    if missing > 0 {
        log::warn!("{missing} of {} test sentences have no matching card", cases.len());
    }
    Ok(cases)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub sentence: String,
    pub target: Option<String>,
    pub rank: Option<usize>,
    /// Top cards with natural-log probabilities, up to the largest K.
    #[serde(skip)]
    pub top: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub name: String,
    pub mode: Mode,
    pub model: String,
    pub k_list: Vec<usize>,
    pub acc: Vec<f64>,
    pub mrr: f64,
    pub entropy: Vec<f64>,
    pub cases: usize,
    pub missing_targets: usize,
    pub per_case: Vec<CaseResult>,
}

impl ModelReport {
    pub fn acc_at(&self, k: usize) -> Option<f64> {
        self.k_list.iter().position(|&x| x == k).map(|i| self.acc[i])
    }

    pub fn entropy_at(&self, k: usize) -> Option<f64> {
        self.k_list.iter().position(|&x| x == k).map(|i| self.entropy[i])
    }
}

fn check_k_list(k_list: &[usize], cards: usize) -> Result<()> {
    if k_list.is_empty() || k_list.contains(&0) {
        return Err(Error::Eval("K list must be nonempty and positive".into()));
    }
    if let Some(k) = k_list.iter().find(|&&k| k > cards) {
        return Err(Error::Eval(format!("K = {k} exceeds the board's {cards} cards")));
    }
    Ok(())
}

/// Ranks every case with `predictor` and computes all metrics.
pub fn evaluate(name: &str, predictor: &Predictor, cases: &[EvalCase], k_list: &[usize]) -> Result<ModelReport> {
    check_k_list(k_list, predictor.decoder().len())?;
    if cases.is_empty() {
        return Err(Error::Eval("no evaluation cases".into()));
    }
    let mode = cases[0].query.mode();
    if cases.iter().any(|c| c.query.mode() != mode) {
        return Err(Error::Eval("cases mix cs and flat queries".into()));
    }
    let max_k = *k_list.iter().max().expect("nonempty");
    let ids = predictor.decoder().card_ids();
    let per_case = cases
        .par_iter()
        .map(|case| {
            let ranking = predictor.rank(&case.query)?;
            let rank = case
                .target
                .as_deref()
                .and_then(|t| predictor.decoder().column_of(t))
                .and_then(|j| ranking.rank_of(j));
            let top = ranking
                .order
                .iter()
                .take(max_k)
                .map(|&j| (ids[j].clone(), ranking.log_probs[j]))
                .collect();
            Ok(CaseResult {
                sentence: case.sentence.render_tagged(),
                target: case.target.clone(),
                rank,
                top,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let ranks: Vec<Option<usize>> = per_case.iter().map(|c| c.rank).collect();
    let tops: Vec<Vec<f64>> = per_case
        .iter()
        .map(|c| c.top.iter().map(|(_, lp)| *lp).collect())
        .collect();
    let acc = k_list
        .iter()
        .map(|&k| acc_at_k(&ranks, k))
        .collect::<Result<Vec<_>>>()?;
    let entropy = k_list
        .iter()
        .map(|&k| entropy_at_k(&tops, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelReport {
        name: name.to_owned(),
        mode,
        model: predictor.fingerprint().to_owned(),
        k_list: k_list.to_vec(),
        acc,
        mrr: mrr(&ranks)?,
        entropy,
        cases: per_case.len(),
        missing_targets: per_case
            .iter()
            .filter(|c| c.target.is_none() || c.rank.is_none())
            .count(),
        per_case,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub k_list: Vec<usize>,
    /// Logarithm used by Entropy@K.
    pub log_base: String,
    pub cs: ModelReport,
    pub flat: ModelReport,
}

/// Evaluates both models on cases built from the same sentences. Each model
/// gets queries in the mode it was trained for; a model without a recorded
/// mode is treated as its slot's mode (cs first, flat second).
pub fn compare(
    cs: &Predictor,
    flat: &Predictor,
    test: &[Sentence],
    board: &Board,
    k_list: &[usize],
) -> Result<Comparison> {
    let max_k = k_list.iter().copied().max().unwrap_or(1);
    let cs_cases = build_eval_cases(test, board, cs.mode().unwrap_or(Mode::Cs), max_k)?;
    let flat_cases = build_eval_cases(test, board, flat.mode().unwrap_or(Mode::Flat), max_k)?;
    Ok(Comparison {
        k_list: k_list.to_vec(),
        log_base: "e".into(),
        cs: evaluate("cs", cs, &cs_cases, k_list)?,
        flat: evaluate("flat", flat, &flat_cases, k_list)?,
    })
}

impl Comparison {
    /// Accuracy/MRR table followed by the Entropy@K table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let rows = [&self.cs, &self.flat];
        let _ = writeln!(out, "Top-K accuracy and MRR ({} cases)", self.cs.cases);
        let _ = write!(out, "{:<8}", "model");
        for k in &self.k_list {
            let _ = write!(out, "{:>9}", format!("ACC@{k}"));
        }
        let _ = writeln!(out, "{:>9}", "MRR");
        for r in rows {
            let _ = write!(out, "{:<8}", r.name);
            for a in &r.acc {
                let _ = write!(out, "{a:>9.4}");
            }
            let _ = writeln!(out, "{:>9.4}", r.mrr);
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "Entropy@K (natural log, mean over cases)");
        let _ = write!(out, "{:<8}", "model");
        for k in &self.k_list {
            let _ = write!(out, "{:>9}", format!("E@{k}"));
        }
        let _ = writeln!(out);
        for r in rows {
            let _ = write!(out, "{:<8}", r.name);
            for e in &r.entropy {
                let _ = write!(out, "{e:>9.4}");
            }
            let _ = writeln!(out);
        }
        for r in rows.iter().filter(|r| r.missing_targets > 0) {
            let _ = writeln!(
                out,
                "note: {} has {} cases whose target is not on the board",
                r.name, r.missing_targets
            );
        }
        out
    }

    /// Per-case top-K cards and log-probabilities for both models.
    pub fn rankings_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Row<'a> {
            model: &'a str,
            sentence: &'a str,
            target: Option<&'a str>,
            rank: Option<usize>,
            top: &'a [(String, f64)],
        }
        let rows: Vec<Row> = [&self.cs, &self.flat]
            .into_iter()
            .flat_map(|r| {
                r.per_case.iter().map(move |c| Row {
                    model: &r.name,
                    sentence: &c.sentence,
                    target: c.target.as_deref(),
                    rank: c.rank,
                    top: &c.top,
                })
            })
            .collect();
        Ok(serde_json::to_string_pretty(&rows)?)
    }
}
