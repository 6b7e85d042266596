//! Runs an evaluation split under a bank mode and scores the results.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    aggregate, compute_diagnostics, exact_match, score_reward, AtomicJudge, DiagnosticTrace, DiagnosticsConfig,
    DiagnosticsReport, EvalError, EvalResult, RewardBreakdown, RewardConfig,
};
use crate::environment::{PolicyBackend, Retriever};
use crate::rollout::{run_batch, BatchItem, RolloutConfig, TraceRecord};
use crate::skillbank::{ablate, AblationMode, Category, SkillBankVersion};

/// Which bank the policy sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BankMode {
    #[default]
    Full,
    Empty,
    StripContent,
    /// The seed bank in place of the final one.
    Seed,
    RemoveCategory(Category),
}

impl BankMode {
    pub fn resolve(self, full: &SkillBankVersion, seed: &SkillBankVersion) -> SkillBankVersion {
        match self {
            BankMode::Full => full.clone(),
            BankMode::Seed => seed.clone(),
            BankMode::Empty => ablate(full, AblationMode::Empty),
            BankMode::StripContent => ablate(full, AblationMode::StripContent),
            BankMode::RemoveCategory(c) => ablate(full, AblationMode::RemoveCategory(c)),
        }
    }
}

impl fmt::Display for BankMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BankMode::Full => f.write_str("full"),
            BankMode::Empty => f.write_str("empty"),
            BankMode::StripContent => f.write_str("strip-content"),
            BankMode::Seed => f.write_str("seed"),
            BankMode::RemoveCategory(c) => write!(f, "no-{c}"),
        }
    }
}

impl FromStr for BankMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(BankMode::Full),
            "empty" => Ok(BankMode::Empty),
            "strip-content" => Ok(BankMode::StripContent),
            "seed" => Ok(BankMode::Seed),
            other => other
                .strip_prefix("no-")
                .and_then(|c| c.parse::<Category>().ok())
                .map(BankMode::RemoveCategory)
                .ok_or_else(|| {
                    format!("unknown bank mode `{other}` (full, empty, strip-content, seed, no-<category>)")
                }),
        }
    }
}

impl TryFrom<String> for BankMode {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<BankMode> for String {
    fn from(m: BankMode) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalExample {
    pub id: String,
    pub dataset: String,
    pub question: String,
    #[serde(alias = "answers")]
    pub gold_answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub bank_mode: BankMode,
    pub rollout: RolloutConfig,
    pub parallelism: usize,
    pub diagnostics: DiagnosticsConfig,
    pub reward: RewardConfig,
    /// Best macro average in the comparison block; the run itself when unset.
    pub best_avg: Option<f64>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            bank_mode: BankMode::Full,
            rollout: RolloutConfig::default(),
            parallelism: 4,
            diagnostics: DiagnosticsConfig::default(),
            reward: RewardConfig::default(),
            best_avg: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrace {
    pub dataset: String,
    pub gold_answers: Vec<String>,
    pub em: u8,
    pub reward: RewardBreakdown,
    #[serde(flatten)]
    pub record: TraceRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub bank_label: String,
    pub bank_size: usize,
    pub examples: usize,
    /// Items whose rollout raised a backend or retriever error.
    pub failures: usize,
    pub invalid_actions: usize,
    /// Traces that selected at least one id missing from the bank.
    pub unresolved_skill_traces: usize,
    pub result: EvalResult,
    pub diagnostics: DiagnosticsReport,
    pub mean_reward: f64,
    pub lambda_e: f64,
    pub lambda_d: f64,
    pub lambda_note: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_file: Option<String>,
}

#[derive(Debug, Clone)]
pub struct BenchmarkRun {
    pub report: BenchmarkReport,
    pub traces: Vec<ScoredTrace>,
}

/// Runs every example, then aggregates EM per dataset (in first-seen order),
/// diagnostics, and reward. Per-item failures score zero and are counted.
pub fn run_benchmark<F>(
    split: &[EvalExample],
    full_bank: &SkillBankVersion,
    seed_bank: &SkillBankVersion,
    make_backend: F,
    retriever: &dyn Retriever,
    config: &BenchmarkConfig,
    judge: &dyn AtomicJudge,
) -> Result<BenchmarkRun, EvalError>
where
    F: Fn(usize, &BatchItem) -> Box<dyn PolicyBackend> + Sync,
{
    if split.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let bank = config.bank_mode.resolve(full_bank, seed_bank);
    let items: Vec<BatchItem> =
        split.iter().map(|e| BatchItem { id: e.id.clone(), question: e.question.clone() }).collect();
    let results = run_batch(&items, &bank, make_backend, retriever, &config.rollout, config.parallelism);

    let mut datasets: Vec<(String, usize, usize)> = Vec::new();
    let mut traces = Vec::with_capacity(split.len());
    let mut diag = Vec::with_capacity(split.len());
    let (mut failures, mut invalid, mut unresolved) = (0, 0, 0);
    for (example, result) in split.iter().zip(&results) {
        let (em, reward) = match result {
            Ok(outcome) => {
                diag.push(DiagnosticTrace::from_outcome(outcome, &example.gold_answers));
                unresolved += usize::from(outcome.has_unresolved_skills());
                invalid += usize::from(matches!(outcome.status, crate::rollout::RolloutStatus::InvalidAction { .. }));
                let em = outcome.answer().map_or(0, |a| exact_match(a, &example.gold_answers));
                let reward = score_reward(
                    outcome.answer(),
                    &outcome.queries(),
                    outcome.evidence(),
                    &example.gold_answers,
                    &config.reward,
                );
                (em, reward)
            }
            Err(_) => {
                failures += 1;
                diag.push(DiagnosticTrace {
                    question: example.question.clone(),
                    queries: Vec::new(),
                    prediction: None,
                    gold_answers: example.gold_answers.clone(),
                });
                let reward = score_reward::<_, &str, _>(None, &[], [], &example.gold_answers, &config.reward);
                (0, reward)
            }
        };
        match datasets.iter_mut().find(|(d, _, _)| *d == example.dataset) {
            Some(entry) => {
                entry.1 += usize::from(em);
                entry.2 += 1;
            }
            None => datasets.push((example.dataset.clone(), usize::from(em), 1)),
        }
        traces.push(ScoredTrace {
            dataset: example.dataset.clone(),
            gold_answers: example.gold_answers.clone(),
            em,
            reward,
            record: TraceRecord::from_result(&example.id, &example.question, result),
        });
    }
    let per_dataset: Vec<(String, f64)> =
        datasets.into_iter().map(|(d, hits, n)| (d, 100.0 * hits as f64 / n as f64)).collect();
    let result = aggregate(&per_dataset, config.best_avg)?;
    let diagnostics = compute_diagnostics(&diag, &config.diagnostics, judge);
    let mean_reward = traces.iter().map(|t| t.reward.total).sum::<f64>() / traces.len() as f64;
    let report = BenchmarkReport {
        config: config.clone(),
        bank_label: bank.label.clone(),
        bank_size: bank.len(),
        examples: split.len(),
        failures,
        invalid_actions: invalid,
        unresolved_skill_traces: unresolved,
        result,
        diagnostics,
        mean_reward,
        lambda_e: config.reward.lambda_e,
        lambda_d: config.reward.lambda_d,
        lambda_note: "reward coefficients are configurable defaults, not published values".into(),
        trace_file: None,
    };
    Ok(BenchmarkRun { report, traces })
}
