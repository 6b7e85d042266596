//! Teacher-driven trajectory synthesis.

use serde::{Deserialize, Serialize};

use super::{
    build_step, finalize_answer, normalize_teacher_action, ManifestEntry, TeacherAction, Trajectory,
    TrajectoryError, TrajectoryStatus, SupervisionMode,
};
use crate::environment::{ChatTurn, PolicyBackend, Retriever};
use crate::protocol::{ActionKind, SkillSelection};
use crate::rollout::{evidence_of, RolloutConfig};
use crate::skillbank::{render_index, SkillBankVersion};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub rollout: RolloutConfig,
    /// Re-prompts allowed per turn after a malformed reply.
    pub max_reprompts: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig { rollout: RolloutConfig::default(), max_reprompts: 1 }
    }
}

const TEACHER_INSTRUCTIONS: &str = "You are solving a question with a search tool, one action per turn. \
Reply with exactly one JSON object and nothing else, with fields: \
primary_skill (a skill id from the SkillBank), support_skills (list of skill ids, may be empty), \
action_type (\"search\", \"verify\" or \"answer\"), query_or_draft (the search query, verification probe, \
or draft answer), checkpoint (the intermediate facts resolved so far). \
Use support-only verification skills as support skills, not as the primary skill of a search. \
Search at least once before answering, and answer with the shortest span stated in the evidence.";

const REPROMPT: &str = "Your reply was not a valid action object. Reply with exactly one JSON object with fields \
primary_skill, support_skills, action_type, query_or_draft, checkpoint.";

/// Opening turns shown to the teacher for one manifest entry.
pub fn teacher_prompt(entry: &ManifestEntry, bank: &SkillBankVersion) -> Vec<ChatTurn> {
    let mut user = format!("Question: {}", entry.question.trim());
    if !entry.candidate_primary_skills.is_empty() {
        user.push_str(&format!("\nCandidate primary skills: {}", entry.candidate_primary_skills.join(", ")));
    }
    if !entry.suggested_support_skills.is_empty() {
        user.push_str(&format!("\nSuggested support skills: {}", entry.suggested_support_skills.join(", ")));
    }
    vec![ChatTurn::system(format!("{TEACHER_INSTRUCTIONS}\n\n{}", render_index(bank))), ChatTurn::user(user)]
}

/// Extracts the first JSON object in a reply, tolerating code fences and
/// surrounding prose.
pub fn parse_teacher_reply(reply: &str) -> Result<TeacherAction, String> {
    let start = reply.find('{').ok_or("reply contains no JSON object")?;
    let mut stream = serde_json::Deserializer::from_str(&reply[start..]).into_iter::<TeacherAction>();
    match stream.next() {
        Some(Ok(action)) => Ok(action),
        Some(Err(e)) => Err(format!("invalid action object: {e}")),
        None => Err("reply contains no JSON object".into()),
    }
}

/// Drives `teacher` through one manifest entry. Search and verify actions
/// hit the retriever; an answer is shortened with [`finalize_answer`].
/// Malformed replies and budget exhaustion produce a non-answered trajectory
/// with the problem recorded in `errors`; backend and retriever failures are
/// returned as errors.
pub fn synthesize(
    entry: &ManifestEntry,
    bank: &SkillBankVersion,
    teacher: &dyn PolicyBackend,
    retriever: &dyn Retriever,
    finalizer: Option<&dyn PolicyBackend>,
    config: &SynthesisConfig,
) -> Result<Trajectory, TrajectoryError> {
    let mut history = teacher_prompt(entry, bank);
    let mut traj = Trajectory {
        example_id: entry.example_id.clone(),
        dataset: entry.dataset.clone(),
        question: entry.question.clone(),
        gold_answers: entry.gold_answers.clone(),
        steps: Vec::new(),
        final_answer: None,
        status: TrajectoryStatus::BudgetExhausted,
        metadata: entry.metadata.clone(),
        supervision_mode: SupervisionMode::Full,
        candidate_skills: entry.candidate_primary_skills.clone(),
        source: format!("{:?}", entry.source).to_lowercase(),
        errors: Vec::new(),
    };
    let rollout = &config.rollout;
    let mut searches = 0;
    while searches < rollout.budget {
        let mut attempts = 0;
        let (teacher_action, action) = loop {
            let reply = teacher.complete(&history, &[])?;
            let parsed = parse_teacher_reply(&reply)
                .and_then(|t| normalize_teacher_action(&t).map(|a| (t, a)).map_err(|e| e.to_string()));
            history.push(ChatTurn::assistant(reply));
            match parsed {
                Ok(ok) => break ok,
                Err(e) if attempts < config.max_reprompts => {
                    attempts += 1;
                    traj.errors.push(format!("turn {}: {e}; re-prompted", traj.steps.len() + 1));
                    history.push(ChatTurn::user(format!("{REPROMPT}\nProblem: {e}")));
                }
                Err(e) => {
                    traj.errors.push(format!("turn {}: {e}", traj.steps.len() + 1));
                    traj.status = TrajectoryStatus::InvalidAction;
                    return Ok(traj);
                }
            }
        };
        let selection = SkillSelection { ids: action.skills.clone() };
        let checkpoint = Some(teacher_action.checkpoint.trim().to_string()).filter(|c| !c.is_empty());
        match action.kind {
            ActionKind::Search => {
                let passages = retriever.retrieve(&action.payload, rollout.top_k)?;
                let observation = rollout.observation(&passages);
                history.push(ChatTurn::user(observation.clone()));
                traj.steps.push(build_step(bank, selection, action, Some(passages), Some(observation), checkpoint));
                searches += 1;
            }
            ActionKind::Answer => {
                let evidence = evidence_of(&traj.steps);
                let answer = finalize_answer(&action.payload, &evidence, finalizer);
                let mut action = action;
                action.payload = answer.clone();
                traj.steps.push(build_step(bank, selection, action, None, None, checkpoint));
                traj.final_answer = Some(answer);
                traj.status = TrajectoryStatus::Answered;
                return Ok(traj);
            }
        }
    }
    traj.errors.push(format!("search budget of {} exhausted", rollout.budget));
    Ok(traj)
}
