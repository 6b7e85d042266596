//! Query-planning diagnostics over finished traces.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{exact_match, normalize_answer};
use crate::environment::{ChatTurn, PolicyBackend};
use crate::rollout::RolloutOutcome;

pub const DEFAULT_COPY_THRESHOLD: f64 = 0.8;

/// What diagnostics need from one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticTrace {
    pub question: String,
    pub queries: Vec<String>,
    pub prediction: Option<String>,
    pub gold_answers: Vec<String>,
}

impl DiagnosticTrace {
    pub fn from_outcome(outcome: &RolloutOutcome, gold_answers: &[String]) -> Self {
        DiagnosticTrace {
            question: outcome.question.clone(),
            queries: outcome.queries().into_iter().map(str::to_string).collect(),
            prediction: outcome.answer().map(str::to_string),
            gold_answers: gold_answers.to_vec(),
        }
    }

    pub fn correct(&self) -> bool {
        self.prediction.as_deref().is_some_and(|p| exact_match(p, &self.gold_answers) == 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosticsConfig {
    /// Token-set Jaccard at or above which a query counts as a copy of the question.
    pub copy_threshold: f64,
    /// Searches allowed for an example to count toward `correct_at_3`.
    pub correct_within: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig { copy_threshold: DEFAULT_COPY_THRESHOLD, correct_within: 3 }
    }
}

/// Percentages in [0, 100] except `avg_searches`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    /// Share of traces with at least one search whose first query copies the question.
    pub first_query_copy_rate: f64,
    /// Share of all search queries judged atomic.
    pub atomic_hop_rate: f64,
    pub avg_searches: f64,
    /// Share of traces answered correctly within `correct_within` searches.
    pub correct_at_3: f64,
    pub traces: usize,
    pub queries: usize,
    pub copy_threshold: f64,
    pub judge: String,
}

fn token_set(text: &str) -> BTreeSet<String> {
    normalize_answer(text).split_whitespace().map(str::to_string).collect()
}

/// Jaccard similarity of normalized token sets. Two empty sets score 1.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let (a, b) = (token_set(a), token_set(b));
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

pub fn is_near_copy(query: &str, question: &str, threshold: f64) -> bool {
    jaccard(query, question) >= threshold
}

/// Decides whether a search query targets a single retrieval subgoal.
pub trait AtomicJudge: Sync {
    fn is_atomic(&self, question: &str, query: &str) -> bool;
    fn name(&self) -> String;
}

/// Atomic iff the query is shorter than the question and not a near copy.
#[derive(Debug, Clone, Copy)]
pub struct HeuristicJudge {
    pub threshold: f64,
}

impl Default for HeuristicJudge {
    fn default() -> Self {
        HeuristicJudge { threshold: DEFAULT_COPY_THRESHOLD }
    }
}

impl AtomicJudge for HeuristicJudge {
    fn is_atomic(&self, question: &str, query: &str) -> bool {
        let q_len = normalize_answer(query).split_whitespace().count();
        let x_len = normalize_answer(question).split_whitespace().count();
        q_len < x_len && jaccard(query, question) < self.threshold
    }

    fn name(&self) -> String {
        format!("heuristic(jaccard<{})", self.threshold)
    }
}

/// Asks a chat model for a yes/no verdict; falls back to the heuristic when
/// the call fails or the reply is neither.
pub struct BackendJudge<B> {
    pub backend: B,
    pub fallback: HeuristicJudge,
}

impl<B: PolicyBackend> AtomicJudge for BackendJudge<B> {
    fn is_atomic(&self, question: &str, query: &str) -> bool {
        let prompt = format!(
            "Question: {question}\nSearch query: {query}\n\
             Does the search query target exactly one retrieval subgoal of the question \
             rather than the whole question? Reply yes or no."
        );
        match self.backend.complete(&[ChatTurn::user(prompt)], &[]) {
            Ok(reply) => {
                let reply = reply.trim().to_lowercase();
                if reply.starts_with("yes") {
                    true
                } else if reply.starts_with("no") {
                    false
                } else {
                    self.fallback.is_atomic(question, query)
                }
            }
            Err(_) => self.fallback.is_atomic(question, query),
        }
    }

    fn name(&self) -> String {
        "backend".to_string()
    }
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

pub fn compute_diagnostics(
    traces: &[DiagnosticTrace],
    config: &DiagnosticsConfig,
    judge: &dyn AtomicJudge,
) -> DiagnosticsReport {
    let with_search: Vec<&DiagnosticTrace> = traces.iter().filter(|t| !t.queries.is_empty()).collect();
    let copies = with_search
        .iter()
        .filter(|t| is_near_copy(&t.queries[0], &t.question, config.copy_threshold))
        .count();
    let total_queries: usize = traces.iter().map(|t| t.queries.len()).sum();
    let atomic: usize = traces
        .iter()
        .map(|t| t.queries.iter().filter(|q| judge.is_atomic(&t.question, q)).count())
        .sum();
    let correct_early =
        traces.iter().filter(|t| t.correct() && t.queries.len() <= config.correct_within).count();
    DiagnosticsReport {
        first_query_copy_rate: pct(copies, with_search.len()),
        atomic_hop_rate: pct(atomic, total_queries),
        avg_searches: if traces.is_empty() { 0.0 } else { total_queries as f64 / traces.len() as f64 },
        correct_at_3: pct(correct_early, traces.len()),
        traces: traces.len(),
        queries: total_queries,
        copy_threshold: config.copy_threshold,
        judge: judge.name(),
    }
}
