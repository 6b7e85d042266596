//! Select-read-act rollout loop, batch execution, and trace replay.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{BackendError, ChatTurn, Passage, PolicyBackend, RetrieveError, Retriever, DEFAULT_TOP_K};
use crate::fixtures::CaseFixture;
use crate::prompt::{card_context, History, SYSTEM_PROMPT};
use crate::protocol::{
    parse_action_turn_with, parse_selection_turn_with, render_information_capped, render_no_results, ActionKind,
    ParseError, ParseMode, ParsedAction, SkillSelection, ACTION_STOPS, SELECTION_STOP,
};
use crate::skillbank::{get_cards, render_index, SkillBankVersion};

pub const DEFAULT_BUDGET: usize = 5;
/// Per-passage character cap: a 1400-character observation split across top-3.
pub const DEFAULT_MAX_PASSAGE_CHARS: usize = 1400 / DEFAULT_TOP_K;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    /// Maximum number of search actions.
    pub budget: usize,
    pub top_k: usize,
    pub max_passage_chars: Option<usize>,
    pub parse_mode: ParseMode,
    pub system_prompt: String,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            budget: DEFAULT_BUDGET,
            top_k: DEFAULT_TOP_K,
            max_passage_chars: Some(DEFAULT_MAX_PASSAGE_CHARS),
            parse_mode: ParseMode::Permissive,
            system_prompt: SYSTEM_PROMPT.to_string(),
        }
    }
}

impl RolloutConfig {
    /// Information block for one search result list.
    pub fn observation(&self, passages: &[Passage]) -> String {
        render_information_capped(passages, self.max_passage_chars).unwrap_or_else(|_| render_no_results())
    }
}

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("budget must be at least 1")]
    ZeroBudget,
    #[error("top-k must be at least 1")]
    ZeroTopK,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Retriever(#[from] RetrieveError),
}

/// One select-read-act iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub selection: SkillSelection,
    /// Raw selection turn as returned by the policy.
    pub selection_text: String,
    /// Ids of the cards that resolved and were shown.
    pub cards_shown: Vec<String>,
    /// Selected ids with no card in the bank.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unresolved_skills: Vec<String>,
    pub action: ParsedAction,
    /// Raw action turn as returned by the policy.
    pub action_text: String,
    /// Present iff the action is a search.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieved: Option<Vec<Passage>>,
    /// Information block appended to the history for a search.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

impl TraceStep {
    pub fn is_search(&self) -> bool {
        self.action.kind == ActionKind::Search
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RolloutStatus {
    Answered { answer: String },
    BudgetExhausted,
    InvalidAction { turn: InvalidTurn, error: ParseError, text: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidTurn {
    Selection,
    Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutOutcome {
    pub question: String,
    pub status: RolloutStatus,
    pub trace: Vec<TraceStep>,
}

impl RolloutOutcome {
    pub fn answer(&self) -> Option<&str> {
        match &self.status {
            RolloutStatus::Answered { answer } => Some(answer),
            _ => None,
        }
    }

    pub fn search_count(&self) -> usize {
        self.trace.iter().filter(|s| s.is_search()).count()
    }

    pub fn queries(&self) -> Vec<&str> {
        self.trace.iter().filter(|s| s.is_search()).map(|s| s.action.payload.as_str()).collect()
    }

    /// Retrieved passages deduplicated by doc id, first occurrence kept.
    pub fn evidence(&self) -> Vec<&Passage> {
        evidence_of(&self.trace)
    }

    pub fn has_unresolved_skills(&self) -> bool {
        self.trace.iter().any(|s| !s.unresolved_skills.is_empty())
    }
}

pub fn evidence_of(trace: &[TraceStep]) -> Vec<&Passage> {
    let mut seen = HashSet::new();
    trace
        .iter()
        .filter_map(|s| s.retrieved.as_ref())
        .flatten()
        .filter(|p| seen.insert(p.doc_id.as_str()))
        .collect()
}

/// Runs one question through the select-read-act loop until the policy
/// answers, emits an unparseable turn, or spends `budget` searches.
pub fn run_rollout(
    question: &str,
    bank: &SkillBankVersion,
    backend: &dyn PolicyBackend,
    retriever: &dyn Retriever,
    config: &RolloutConfig,
) -> Result<RolloutOutcome, RolloutError> {
    if config.budget == 0 {
        return Err(RolloutError::ZeroBudget);
    }
    if config.top_k == 0 {
        return Err(RolloutError::ZeroTopK);
    }
    let mut history = History::start(&config.system_prompt, question, &render_index(bank));
    let mut trace = Vec::new();
    let outcome = |status, trace| Ok(RolloutOutcome { question: question.to_string(), status, trace });
    let mut searches = 0;
    while searches < config.budget {
        let selection_text = backend.complete(history.turns(), &[SELECTION_STOP])?;
        let selection = match parse_selection_turn_with(&selection_text, config.parse_mode) {
            Ok(s) => s,
            Err(error) => {
                let status = RolloutStatus::InvalidAction { turn: InvalidTurn::Selection, error, text: selection_text };
                return outcome(status, trace);
            }
        };
        history.push_selection(&selection_text);
        let lookup = get_cards(bank, &selection.ids);
        history.push_cards(&card_context(bank, &selection.ids));

        let action_text = backend.complete(history.turns(), &ACTION_STOPS)?;
        let action = match parse_action_turn_with(&action_text, config.parse_mode) {
            Ok(a) => a,
            Err(error) => {
                let status = RolloutStatus::InvalidAction { turn: InvalidTurn::Action, error, text: action_text };
                return outcome(status, trace);
            }
        };
        history.push_action(&action_text);
        let mut step = TraceStep {
            selection,
            selection_text,
            cards_shown: lookup.cards.iter().map(|c| c.id.clone()).collect(),
            unresolved_skills: lookup.unrecognized,
            action,
            action_text,
            retrieved: None,
            observation: None,
            checkpoint: None,
        };
        match step.action.kind {
            ActionKind::Answer => {
                let answer = step.action.payload.clone();
                trace.push(step);
                return outcome(RolloutStatus::Answered { answer }, trace);
            }
            ActionKind::Search => {
                let passages = retriever.retrieve(&step.action.payload, config.top_k)?;
                let observation = config.observation(&passages);
                history.push_observation(&observation);
                step.retrieved = Some(passages);
                step.observation = Some(observation);
                trace.push(step);
                searches += 1;
            }
        }
    }
    outcome(RolloutStatus::BudgetExhausted, trace)
}

/// Prompts sent at each step: `(selection prompt, action prompt)`. The final
/// pair of an invalid rollout is not included.
pub fn reconstruct_prompts(
    question: &str,
    trace: &[TraceStep],
    bank: &SkillBankVersion,
    config: &RolloutConfig,
) -> Vec<(Vec<ChatTurn>, Vec<ChatTurn>)> {
    let mut history = History::start(&config.system_prompt, question, &render_index(bank));
    let mut prompts = Vec::with_capacity(trace.len());
    for step in trace {
        let sel = history.turns().to_vec();
        history.push_selection(&step.selection_text);
        history.push_cards(&card_context(bank, &step.selection.ids));
        let act = history.turns().to_vec();
        history.push_action(&step.action_text);
        if let Some(obs) = &step.observation {
            history.push_observation(obs);
        }
        prompts.push((sel, act));
    }
    prompts
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchItem {
    pub id: String,
    pub question: String,
}

/// Runs every item with its own backend from `make_backend`. Results keep
/// input order; one item's failure does not affect the others.
pub fn run_batch<F>(
    items: &[BatchItem],
    bank: &SkillBankVersion,
    make_backend: F,
    retriever: &dyn Retriever,
    config: &RolloutConfig,
    parallelism: usize,
) -> Vec<Result<RolloutOutcome, RolloutError>>
where
    F: Fn(usize, &BatchItem) -> Box<dyn PolicyBackend> + Sync,
{
    let run = |(i, item): (usize, &BatchItem)| {
        let backend = make_backend(i, item);
        run_rollout(&item.question, bank, backend.as_ref(), retriever, config)
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(parallelism.max(1)).build();
    match pool {
        Ok(pool) => pool.install(|| items.par_iter().enumerate().map(run).collect()),
        Err(_) => items.iter().enumerate().map(run).collect(),
    }
}

/// Compact per-rollout record: ids and text only, no passage bodies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<RolloutStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub steps: Vec<TraceRecordStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecordStep {
    pub selection: Vec<String>,
    pub cards_shown: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unresolved_skills: Vec<String>,
    pub skills: Vec<String>,
    pub action: ActionKind,
    pub payload: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub retrieved_doc_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

impl TraceRecord {
    pub fn from_result(id: &str, question: &str, result: &Result<RolloutOutcome, RolloutError>) -> Self {
        match result {
            Ok(o) => TraceRecord {
                id: id.to_string(),
                question: question.to_string(),
                outcome: Some(o.status.clone()),
                error: None,
                steps: o.trace.iter().map(TraceRecordStep::from_step).collect(),
            },
            Err(e) => TraceRecord {
                id: id.to_string(),
                question: question.to_string(),
                outcome: None,
                error: Some(e.to_string()),
                steps: Vec::new(),
            },
        }
    }
}

impl TraceRecordStep {
    pub fn from_step(step: &TraceStep) -> Self {
        TraceRecordStep {
            selection: step.selection.ids.clone(),
            cards_shown: step.cards_shown.clone(),
            unresolved_skills: step.unresolved_skills.clone(),
            skills: step.action.skills.clone(),
            action: step.action.kind,
            payload: step.action.payload.clone(),
            retrieved_doc_ids: step.retrieved.iter().flatten().map(|p| p.doc_id.clone()).collect(),
            checkpoint: step.checkpoint.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReplay {
    pub query: String,
    pub expected: Vec<String>,
    pub actual: Vec<String>,
    pub matches: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub case_id: String,
    pub steps: Vec<StepReplay>,
    pub final_answer: Option<String>,
    pub all_match: bool,
}

/// Re-runs each recorded search of a case against `retriever` and compares
/// the returned doc ids with the recorded ones.
pub fn replay_trace(case: &CaseFixture, retriever: &dyn Retriever, k: usize) -> Result<ReplayReport, RetrieveError> {
    let mut steps = Vec::new();
    for s in case.steps.iter().filter(|s| s.action == ActionKind::Search) {
        let actual: Vec<String> = retriever.retrieve(&s.payload, k)?.into_iter().map(|p| p.doc_id).collect();
        let matches = actual == s.retrieved_doc_ids;
        steps.push(StepReplay { query: s.payload.clone(), expected: s.retrieved_doc_ids.clone(), actual, matches });
    }
    Ok(ReplayReport {
        case_id: case.case_id.clone(),
        all_match: steps.iter().all(|s| s.matches),
        steps,
        final_answer: case.final_answer().map(str::to_string),
    })
}
