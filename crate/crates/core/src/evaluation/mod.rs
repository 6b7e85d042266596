//! Exact-match scoring, benchmark aggregation, diagnostics, and reward.

mod benchmark;
mod diagnostics;
mod reward;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use benchmark::{run_benchmark, BankMode, BenchmarkConfig, BenchmarkReport, BenchmarkRun, EvalExample, ScoredTrace};
pub use diagnostics::{
    compute_diagnostics, is_near_copy, jaccard, AtomicJudge, BackendJudge, DiagnosticTrace, DiagnosticsConfig,
    DiagnosticsReport, HeuristicJudge, DEFAULT_COPY_THRESHOLD,
};
pub use reward::{contains_span, score_reward, RewardBreakdown, RewardConfig};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no datasets to aggregate")]
    NoDatasets,
    #[error("evaluation split is empty")]
    EmptySplit,
}

/// Lowercase, drop punctuation and the articles a/an/the, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered.chars().map(|c| if c.is_alphanumeric() { c } else { ' ' }).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1 iff the normalized prediction equals some normalized gold answer.
/// An empty prediction never matches.
pub fn exact_match<S: AsRef<str>>(prediction: &str, golds: &[S]) -> u8 {
    let pred = normalize_answer(prediction);
    if pred.is_empty() {
        return 0;
    }
    u8::from(golds.iter().any(|g| normalize_answer(g.as_ref()) == pred))
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Dataset name and EM percentage, in input order.
    pub per_dataset_em: Vec<(String, f64)>,
    /// Unweighted mean over datasets, rounded to 2 decimals.
    pub macro_avg: f64,
    /// `best_avg - macro_avg`, rounded to 2 decimals.
    pub delta_from_best: f64,
}

/// Macro average of per-dataset EM and its gap from `best_avg`
/// (the row itself when `None`).
pub fn aggregate(per_dataset_em: &[(String, f64)], best_avg: Option<f64>) -> Result<EvalResult, EvalError> {
    if per_dataset_em.is_empty() {
        return Err(EvalError::NoDatasets);
    }
    let mean = per_dataset_em.iter().map(|(_, v)| v).sum::<f64>() / per_dataset_em.len() as f64;
    let macro_avg = round2(mean);
    let delta_from_best = round2(best_avg.map_or(0.0, |b| b - macro_avg)) + 0.0;
    Ok(EvalResult { per_dataset_em: per_dataset_em.to_vec(), macro_avg, delta_from_best })
}

/// Aggregates a block of rows, measuring each row's gap from the block's best
/// macro average.
pub fn aggregate_block(rows: &[Vec<(String, f64)>]) -> Result<Vec<EvalResult>, EvalError> {
    let own: Vec<EvalResult> = rows.iter().map(|r| aggregate(r, None)).collect::<Result<_, _>>()?;
    let best = own.iter().map(|r| r.macro_avg).fold(f64::NEG_INFINITY, f64::max);
    rows.iter().map(|r| aggregate(r, Some(best))).collect()
}
