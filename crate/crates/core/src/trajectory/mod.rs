//! Trajectory records, teacher-action normalization, validation filters, and
//! keep-best deduplication.

mod finalize;
mod synthesis;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{BackendError, Passage, RetrieveError};
use crate::evaluation::{exact_match, normalize_answer};
use crate::fixtures::CaseFixture;
use crate::protocol::{render_action, render_selection, ActionKind, ParsedAction, SkillSelection};
use crate::rollout::{evidence_of, RolloutConfig, RolloutOutcome, RolloutStatus, TraceStep};
use crate::skillbank::{get_cards, SkillBankVersion};

pub use finalize::{finalize_answer, finalize_heuristic, occurs_verbatim};
pub use synthesis::{parse_teacher_reply, synthesize, teacher_prompt, SynthesisConfig};

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("answer action has an empty draft")]
    EmptyDraft,
    #[error("search action has an empty query")]
    EmptyQuery,
    #[error("primary skill is empty or malformed: `{0}`")]
    BadPrimarySkill(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Retriever(#[from] RetrieveError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionMode {
    #[default]
    Full,
    /// Only the final assistant turn is a training target.
    Closure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryStatus {
    Answered,
    BudgetExhausted,
    InvalidAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryMetadata {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub question_type: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hop_count: Option<u32>,
    /// Names of the retrieval cues set for this question.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub cues: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub example_id: String,
    pub dataset: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub steps: Vec<TraceStep>,
    pub final_answer: Option<String>,
    pub status: TrajectoryStatus,
    #[serde(default)]
    pub metadata: TrajectoryMetadata,
    #[serde(default)]
    pub supervision_mode: SupervisionMode,
    /// Skill hints that were shown to the teacher, reused in stage-I prompts.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidate_skills: Vec<String>,
    /// Where the row came from, e.g. a file name or `pool`.
    #[serde(default)]
    pub source: String,
    /// Synthesis problems kept for diagnosis.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

impl Trajectory {
    pub fn search_count(&self) -> usize {
        self.steps.iter().filter(|s| s.is_search()).count()
    }

    pub fn queries(&self) -> Vec<&str> {
        self.steps.iter().filter(|s| s.is_search()).map(|s| s.action.payload.as_str()).collect()
    }

    pub fn evidence(&self) -> Vec<&Passage> {
        evidence_of(&self.steps)
    }

    pub fn from_outcome(example_id: &str, dataset: &str, gold_answers: &[String], outcome: &RolloutOutcome) -> Self {
        let (status, final_answer) = match &outcome.status {
            RolloutStatus::Answered { answer } => (TrajectoryStatus::Answered, Some(answer.clone())),
            RolloutStatus::BudgetExhausted => (TrajectoryStatus::BudgetExhausted, None),
            RolloutStatus::InvalidAction { .. } => (TrajectoryStatus::InvalidAction, None),
        };
        Trajectory {
            example_id: example_id.to_string(),
            dataset: dataset.to_string(),
            question: outcome.question.clone(),
            gold_answers: gold_answers.to_vec(),
            steps: outcome.trace.clone(),
            final_answer,
            status,
            metadata: TrajectoryMetadata::default(),
            supervision_mode: SupervisionMode::Full,
            candidate_skills: Vec::new(),
            source: String::new(),
            errors: Vec::new(),
        }
    }

    /// Builds a trajectory from a recorded case, retrieving each search
    /// against `retriever` to fill the evidence.
    pub fn from_case(
        case: &CaseFixture,
        bank: &SkillBankVersion,
        retriever: &dyn crate::environment::Retriever,
        config: &RolloutConfig,
    ) -> Result<Self, RetrieveError> {
        let mut steps = Vec::with_capacity(case.steps.len());
        for s in &case.steps {
            let selection = s.parsed_selection();
            let action = s.parsed_action();
            let (retrieved, observation) = if action.is_search() {
                let passages = retriever.retrieve(&action.payload, config.top_k)?;
                let obs = config.observation(&passages);
                (Some(passages), Some(obs))
            } else {
                (None, None)
            };
            steps.push(build_step(bank, selection, action, retrieved, observation, s.checkpoint.clone()));
        }
        let final_answer = case.final_answer().map(str::to_string);
        Ok(Trajectory {
            example_id: case.case_id.clone(),
            dataset: case.dataset.clone(),
            question: case.question.clone(),
            gold_answers: case.gold_answers.clone(),
            status: if final_answer.is_some() { TrajectoryStatus::Answered } else { TrajectoryStatus::BudgetExhausted },
            final_answer,
            steps,
            metadata: TrajectoryMetadata::default(),
            supervision_mode: SupervisionMode::Full,
            candidate_skills: Vec::new(),
            source: "fixtures".into(),
            errors: Vec::new(),
        })
    }

    /// Copy of this trajectory supervised only on its final turn.
    pub fn closure(&self) -> Self {
        Trajectory { supervision_mode: SupervisionMode::Closure, ..self.clone() }
    }
}

/// Canonical step whose raw turn texts are the rendered tags.
pub fn build_step(
    bank: &SkillBankVersion,
    selection: SkillSelection,
    action: ParsedAction,
    retrieved: Option<Vec<Passage>>,
    observation: Option<String>,
    checkpoint: Option<String>,
) -> TraceStep {
    let lookup = get_cards(bank, &selection.ids);
    TraceStep {
        selection_text: render_selection(&selection),
        cards_shown: lookup.cards.iter().map(|c| c.id.clone()).collect(),
        unresolved_skills: lookup.unrecognized,
        action_text: render_action(&action),
        selection,
        action,
        retrieved,
        observation,
        checkpoint,
    }
}

/// Each trajectory once in full mode and once as a closure record.
pub fn expand_with_closure(trajs: &[Trajectory]) -> Vec<Trajectory> {
    trajs.iter().flat_map(|t| [t.clone(), t.closure()]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherActionType {
    Search,
    Verify,
    Answer,
}

/// One structured teacher turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherAction {
    pub primary_skill: String,
    #[serde(default)]
    pub support_skills: Vec<String>,
    pub action_type: TeacherActionType,
    pub query_or_draft: String,
    #[serde(default)]
    pub checkpoint: String,
}

/// Search and verify both become searches; answer becomes an answer.
/// Skills are the primary followed by the support skills.
pub fn normalize_teacher_action(action: &TeacherAction) -> Result<ParsedAction, TrajectoryError> {
    let primary = action.primary_skill.trim();
    if !crate::skillbank::is_valid_skill_id(primary) {
        return Err(TrajectoryError::BadPrimarySkill(action.primary_skill.clone()));
    }
    let mut skills = vec![primary.to_string()];
    for s in &action.support_skills {
        let s = s.trim();
        if !s.is_empty() && !skills.iter().any(|k| k == s) {
            skills.push(s.to_string());
        }
    }
    let payload = action.query_or_draft.trim();
    match action.action_type {
        TeacherActionType::Answer if payload.is_empty() => Err(TrajectoryError::EmptyDraft),
        TeacherActionType::Answer => Ok(ParsedAction::answer(skills, payload)),
        _ if payload.is_empty() => Err(TrajectoryError::EmptyQuery),
        _ => Ok(ParsedAction::search(skills, payload)),
    }
}

pub const CHECK_EXACT_MATCH: &str = "exact_match";
pub const CHECK_HAS_SEARCH: &str = "has_search";
pub const CHECK_LEGAL_SKILLS: &str = "legal_skills";
pub const CHECK_SUPPORT_PRIMARY: &str = "no_support_only_primary";
pub const CHECK_ROUTE: &str = "route_consistency";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl CheckResult {
    fn from(reason: Option<String>) -> Self {
        CheckResult { passed: reason.is_none(), reason }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub accepted: bool,
    pub checks: BTreeMap<String, CheckResult>,
}

impl ValidationReport {
    pub fn passed(&self, check: &str) -> bool {
        self.checks.get(check).is_some_and(|c| c.passed)
    }

    pub fn failed_checks(&self) -> Vec<&str> {
        self.checks.iter().filter(|(_, c)| !c.passed).map(|(k, _)| k.as_str()).collect()
    }
}

/// Applies the executable filters:
/// correct final answer, at least one search, every skill id in the bank,
/// no support-only card as the primary skill before the answer, and a
/// consistent route (one final answer step, primaries drawn from the
/// selection, no repeated consecutive query).
pub fn validate_trajectory(traj: &Trajectory, bank: &SkillBankVersion) -> ValidationReport {
    let mut checks = BTreeMap::new();

    let em = match &traj.final_answer {
        Some(a) if exact_match(a, &traj.gold_answers) == 1 => None,
        Some(a) => Some(format!("final answer `{a}` does not match gold")),
        None => Some("no final answer".to_string()),
    };
    checks.insert(CHECK_EXACT_MATCH.to_string(), CheckResult::from(em));

    let searches = traj.search_count();
    let has_search = (searches == 0).then(|| "no search step".to_string());
    checks.insert(CHECK_HAS_SEARCH.to_string(), CheckResult::from(has_search));

    let illegal: Vec<&str> = traj
        .steps
        .iter()
        .flat_map(|s| s.selection.ids.iter().chain(&s.action.skills))
        .map(String::as_str)
        .filter(|id| !bank.contains(id))
        .collect();
    let legal = (!illegal.is_empty()).then(|| {
        let mut ids = illegal.clone();
        ids.dedup();
        format!("unknown skill ids: {}", ids.join(", "))
    });
    checks.insert(CHECK_LEGAL_SKILLS.to_string(), CheckResult::from(legal));

    let support_primary: Vec<String> = traj
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| s.action.kind == ActionKind::Search)
        .filter(|(_, s)| bank.card(s.action.primary_skill()).is_some_and(|c| c.support_only))
        .map(|(i, s)| format!("step {} ({})", i + 1, s.action.primary_skill()))
        .collect();
    let support = (!support_primary.is_empty())
        .then(|| format!("support-only skill as primary before the answer: {}", support_primary.join(", ")));
    checks.insert(CHECK_SUPPORT_PRIMARY.to_string(), CheckResult::from(support));

    checks.insert(CHECK_ROUTE.to_string(), CheckResult::from(route_problem(traj)));

    ValidationReport { accepted: checks.values().all(|c| c.passed), checks }
}

fn route_problem(traj: &Trajectory) -> Option<String> {
    let answers: Vec<usize> =
        traj.steps.iter().enumerate().filter(|(_, s)| s.action.kind == ActionKind::Answer).map(|(i, _)| i).collect();
    if answers.len() != 1 {
        return Some(format!("expected exactly one answer step, found {}", answers.len()));
    }
    if answers[0] + 1 != traj.steps.len() {
        return Some("answer step is not last".into());
    }
    if let (Some(final_answer), Some(last)) = (&traj.final_answer, traj.steps.last()) {
        if final_answer.trim() != last.action.payload.trim() {
            return Some("final answer differs from the answer action".into());
        }
    }
    for (i, s) in traj.steps.iter().enumerate() {
        if !s.selection.ids.iter().any(|id| id == s.action.primary_skill()) {
            return Some(format!("step {}: primary skill `{}` was not selected", i + 1, s.action.primary_skill()));
        }
    }
    let queries: Vec<String> = traj.queries().iter().map(|q| normalize_answer(q)).collect();
    if let Some(i) = queries.windows(2).position(|w| w[0] == w[1]) {
        return Some(format!("search {} repeats the previous query", i + 2));
    }
    None
}

fn complete(traj: &Trajectory) -> bool {
    !traj.steps.is_empty()
        && traj.steps.iter().all(|s| {
            !s.selection_text.trim().is_empty()
                && !s.action_text.trim().is_empty()
                && (s.is_search() == (s.retrieved.is_some() && s.observation.is_some()))
        })
}

/// Ordering key, larger is better.
fn quality(traj: &Trajectory, bank: &SkillBankVersion) -> [bool; 6] {
    let report = validate_trajectory(traj, bank);
    [
        report.accepted,
        traj.status == TrajectoryStatus::Answered,
        traj.final_answer.as_deref().is_some_and(|a| !a.trim().is_empty()),
        report.passed(CHECK_LEGAL_SKILLS),
        report.passed(CHECK_ROUTE) && report.passed(CHECK_SUPPORT_PRIMARY),
        complete(traj),
    ]
}

/// Keeps one trajectory per example id: the best by validation success,
/// answered status, non-empty answer, legal skills, route consistency, and
/// completeness, in that priority. Ties go to the earliest input row. Output
/// is sorted by example id.
pub fn dedup_keep_best(trajs: Vec<Trajectory>, bank: &SkillBankVersion) -> Vec<Trajectory> {
    let mut best: HashMap<String, ([bool; 6], Trajectory)> = HashMap::new();
    for t in trajs {
        let key = quality(&t, bank);
        match best.get(&t.example_id) {
            Some((k, _)) if *k >= key => {}
            _ => {
                best.insert(t.example_id.clone(), (key, t));
            }
        }
    }
    let mut out: Vec<Trajectory> = best.into_values().map(|(_, t)| t).collect();
    out.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    out
}

/// One row of a synthesis manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub example_id: String,
    pub dataset: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    #[serde(default)]
    pub metadata: TrajectoryMetadata,
    #[serde(default)]
    pub candidate_primary_skills: Vec<String>,
    #[serde(default)]
    pub suggested_support_skills: Vec<String>,
    pub source: EntrySource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntrySource {
    Pool,
    FailureReplay,
}
