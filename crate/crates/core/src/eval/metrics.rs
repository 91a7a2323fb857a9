use crate::error::{Error, Result};

/// 1-based position of `target` in `ranked`.
pub fn rank_of<S: AsRef<str>>(ranked: &[S], target: &str) -> Option<usize> {
    ranked.iter().position(|c| c.as_ref() == target).map(|i| i + 1)
}

fn check_cases<T>(cases: &[T]) -> Result<()> {
    if cases.is_empty() {
        return Err(Error::Eval("no cases to score".into()));
    }
    Ok(())
}

/// Fraction of cases whose target rank is at most `k`. A missing target
/// (`None`) is a miss.
pub fn acc_at_k(ranks: &[Option<usize>], k: usize) -> Result<f64> {
    check_cases(ranks)?;
    if k == 0 {
        return Err(Error::Eval("k must be at least 1".into()));
    }
    let hits = ranks.iter().filter(|r| matches!(r, Some(r) if *r <= k)).count();
    Ok(hits as f64 / ranks.len() as f64)
}

/// Mean reciprocal rank; a missing target contributes 0.
pub fn mrr(ranks: &[Option<usize>]) -> Result<f64> {
    check_cases(ranks)?;
    if ranks.contains(&Some(0)) {
        return Err(Error::Eval("ranks are 1-based".into()));
    }
    let total: f64 = ranks.iter().map(|r| r.map_or(0.0, |r| 1.0 / r as f64)).sum();
    Ok(total / ranks.len() as f64)
}

/// Per case, `-(1/k) Σ ln p` over the `k` highest-ranked items; the result
/// is the mean over cases. `top_log_probs[c]` lists case `c`'s natural-log
/// probabilities in rank order.
pub fn entropy_at_k(top_log_probs: &[Vec<f64>], k: usize) -> Result<f64> {
    check_cases(top_log_probs)?;
    if k == 0 {
        return Err(Error::Eval("k must be at least 1".into()));
    }
    let mut total = 0.0;
    for (c, lps) in top_log_probs.iter().enumerate() {
        if lps.len() < k {
            return Err(Error::Eval(format!(
                "case {c} has {} ranked items, fewer than k = {k}",
                lps.len()
            )));
        }
        if lps[..k].iter().any(|lp| !lp.is_finite()) {
            return Err(Error::Eval(format!("case {c} has a zero probability in its top {k}")));
        }
        total += -lps[..k].iter().sum::<f64>() / k as f64;
    }
    Ok(total / top_log_probs.len() as f64)
}
