//! Supervision records for the two training stages and their export.
//!
//! Stage I records teach the action format: system prompt, question, then
//! skill-tagged action turns alternating with information turns. Stage II
//! records split every action into a selection turn, the selected card
//! context, and the unchanged action turn, with the bank index re-appended
//! after each information block exactly as at inference.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::environment::{ChatTurn, Role};
use crate::prompt::{card_context, question_turn, strip_hints, with_hints, History, EXECUTION_PROMPT, SYSTEM_PROMPT};
use crate::protocol::{parse_action_turn, render_action, render_selection, ActionKind, ParseError, SkillSelection};
use crate::skillbank::{render_index, SkillBankVersion};
use crate::trajectory::{validate_trajectory, SupervisionMode, Trajectory};

#[derive(Debug, Error)]
pub enum PackError {
    #[error("trajectory `{0}` has no assistant turns")]
    NoAssistantTurns(String),
    #[error("trajectory `{id}` failed validation: {checks}")]
    Unvalidated { id: String, checks: String },
    #[error("trajectory `{id}` step {step} is a search without a recorded observation")]
    MissingObservation { id: String, step: usize },
    #[error("record `{id}` is not a stage-I record: {reason}")]
    NotStageOne { id: String, reason: String },
    #[error("record `{id}` turn {turn} does not parse: {error}")]
    UnparseableAction { id: String, turn: usize, error: ParseError },
    #[error("record `{id}` turn {turn} cites skills missing from bank {bank}: {ids}")]
    UnknownSkills { id: String, turn: usize, bank: String, ids: String },
    #[error("nothing to export")]
    NoRecords,
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    Selection,
    AnswerAction,
    SearchAction,
    Other,
}

impl TargetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetKind::Selection => "selection",
            TargetKind::AnswerAction => "answer-action",
            TargetKind::SearchAction => "search-action",
            TargetKind::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub index: usize,
    pub supervised: bool,
    pub weight: f64,
    pub kind: TargetKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisionRecord {
    pub messages: Vec<ChatTurn>,
    pub targets: Vec<Target>,
    pub example_id: String,
    pub stage: u8,
    pub supervision_mode: SupervisionMode,
}

impl SupervisionRecord {
    pub fn supervised(&self) -> impl Iterator<Item = &Target> {
        self.targets.iter().filter(|t| t.supervised)
    }

    /// Every supervised index points at an assistant turn and every weight is positive.
    pub fn is_well_formed(&self) -> bool {
        self.targets.iter().all(|t| {
            t.weight > 0.0 && self.messages.get(t.index).is_some_and(|m| m.role == Role::Assistant || !t.supervised)
        })
    }
}

/// Per-turn loss weights for one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageWeights {
    pub answer: f64,
    pub search: f64,
    pub other: f64,
    pub selection: f64,
}

impl StageWeights {
    pub fn weight(&self, kind: TargetKind) -> f64 {
        match kind {
            TargetKind::Selection => self.selection,
            TargetKind::AnswerAction => self.answer,
            TargetKind::SearchAction => self.search,
            TargetKind::Other => self.other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightConfig {
    pub stage1: StageWeights,
    pub stage2: StageWeights,
}

impl Default for WeightConfig {
    fn default() -> Self {
        WeightConfig {
            stage1: StageWeights { answer: 2.5, search: 0.8, other: 1.0, selection: 1.0 },
            stage2: StageWeights { answer: 2.0, search: 0.8, other: 1.0, selection: 1.0 },
        }
    }
}

fn action_kind(kind: ActionKind) -> TargetKind {
    match kind {
        ActionKind::Search => TargetKind::SearchAction,
        ActionKind::Answer => TargetKind::AnswerAction,
    }
}

/// Stage-I record for one trajectory. Unless `allow_unvalidated`, full-mode
/// trajectories must pass validation against `bank`.
pub fn pack_stage1(
    traj: &Trajectory,
    bank: &SkillBankVersion,
    weights: &WeightConfig,
    allow_unvalidated: bool,
) -> Result<SupervisionRecord, PackError> {
    if traj.steps.is_empty() {
        return Err(PackError::NoAssistantTurns(traj.example_id.clone()));
    }
    if !allow_unvalidated && traj.supervision_mode == SupervisionMode::Full {
        let report = validate_trajectory(traj, bank);
        if !report.accepted {
            return Err(PackError::Unvalidated {
                id: traj.example_id.clone(),
                checks: report.failed_checks().join(", "),
            });
        }
    }
    let mut messages = vec![
        ChatTurn::system(with_hints(EXECUTION_PROMPT, &traj.candidate_skills)),
        ChatTurn::user(question_turn(&traj.question)),
    ];
    let mut targets = Vec::new();
    for (i, step) in traj.steps.iter().enumerate() {
        let kind = action_kind(step.action.kind);
        targets.push(Target { index: messages.len(), supervised: true, weight: weights.stage1.weight(kind), kind });
        messages.push(ChatTurn::assistant(render_action(&step.action)));
        if step.is_search() {
            let obs = step
                .observation
                .clone()
                .ok_or_else(|| PackError::MissingObservation { id: traj.example_id.clone(), step: i + 1 })?;
            messages.push(ChatTurn::user(obs));
        }
    }
    apply_closure(&mut targets, traj.supervision_mode, 1);
    Ok(SupervisionRecord {
        messages,
        targets,
        example_id: traj.example_id.clone(),
        stage: 1,
        supervision_mode: traj.supervision_mode,
    })
}

/// In closure mode only the last `tail` targets stay supervised.
fn apply_closure(targets: &mut [Target], mode: SupervisionMode, tail: usize) {
    if mode == SupervisionMode::Closure {
        let keep_from = targets.len().saturating_sub(tail);
        for t in &mut targets[..keep_from] {
            t.supervised = false;
        }
    }
}

/// Expands each stage-I action turn into selection, card context, and the
/// same action text. The system prompt is regenerated without hints.
pub fn rewrite_stage2(
    record: &SupervisionRecord,
    bank: &SkillBankVersion,
    weights: &WeightConfig,
) -> Result<SupervisionRecord, PackError> {
    let id = &record.example_id;
    let not_stage1 = |reason: &str| PackError::NotStageOne { id: id.clone(), reason: reason.to_string() };
    if record.stage != 1 {
        return Err(not_stage1("stage is not 1"));
    }
    match record.messages.first() {
        Some(m) if m.role == Role::System => {}
        _ => return Err(not_stage1("first message is not a system prompt")),
    }
    let question = match record.messages.get(1) {
        Some(m) if m.role == Role::User => m.content.strip_prefix("Question: ").unwrap_or(&m.content).to_string(),
        _ => return Err(not_stage1("second message is not the question")),
    };

    let mut history = History::start(&strip_hints(SYSTEM_PROMPT), &question, &render_index(bank));
    let mut targets = Vec::new();
    let mut turns = 0;
    let mut rest = record.messages[2..].iter().enumerate().peekable();
    while let Some((offset, msg)) = rest.next() {
        if msg.role != Role::Assistant {
            return Err(not_stage1("user turn without a preceding action"));
        }
        let turn = offset + 2;
        let action = parse_action_turn(&msg.content).map_err(|error| PackError::UnparseableAction {
            id: id.clone(),
            turn,
            error,
        })?;
        let missing: Vec<&str> = action.skills.iter().map(String::as_str).filter(|s| !bank.contains(s)).collect();
        if !missing.is_empty() {
            return Err(PackError::UnknownSkills {
                id: id.clone(),
                turn,
                bank: bank.label.clone(),
                ids: missing.join(", "),
            });
        }
        let selection = SkillSelection { ids: action.skills.clone() };
        targets.push(Target {
            index: history.len(),
            supervised: true,
            weight: weights.stage2.weight(TargetKind::Selection),
            kind: TargetKind::Selection,
        });
        history.push_selection(&render_selection(&selection));
        history.push_cards(&card_context(bank, &selection.ids));
        let kind = action_kind(action.kind);
        targets.push(Target { index: history.len(), supervised: true, weight: weights.stage2.weight(kind), kind });
        history.push_action(&msg.content);
        turns += 1;
        if let Some((_, obs)) = rest.next_if(|(_, m)| m.role == Role::User) {
            history.push_observation(&obs.content);
        }
    }
    if turns == 0 {
        return Err(PackError::NoAssistantTurns(id.clone()));
    }
    apply_closure(&mut targets, record.supervision_mode, 2);
    Ok(SupervisionRecord {
        messages: history.into_turns(),
        targets,
        example_id: id.clone(),
        stage: 2,
        supervision_mode: record.supervision_mode,
    })
}

/// Training hyperparameters carried as export metadata; nothing here is executed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecipe {
    pub max_seq_len: usize,
    pub truncation_side: String,
    pub learning_rate: f64,
    pub epochs: f64,
    pub warmup_ratio: f64,
    pub scheduler: String,
    pub per_device_batch: usize,
    pub grad_accumulation: usize,
    pub lora_r: usize,
    pub lora_alpha: usize,
    pub lora_dropout: f64,
    pub lora_targets: Vec<String>,
    pub weights: StageWeights,
}

impl TrainingRecipe {
    pub fn for_stage(stage: u8, weights: &WeightConfig) -> Self {
        let (max_seq_len, learning_rate, epochs, warmup_ratio, w) = if stage == 1 {
            (8192, 7e-5, 2.0, 0.05, weights.stage1)
        } else {
            (12288, 1e-5, 1.0, 0.03, weights.stage2)
        };
        TrainingRecipe {
            max_seq_len,
            truncation_side: "left".into(),
            learning_rate,
            epochs,
            warmup_ratio,
            scheduler: "cosine".into(),
            per_device_batch: 1,
            grad_accumulation: 4,
            lora_r: 16,
            lora_alpha: 32,
            lora_dropout: 0.05,
            lora_targets: ["q_proj", "k_proj", "v_proj", "o_proj", "up_proj", "down_proj", "gate_proj"]
                .map(String::from)
                .to_vec(),
            weights: w,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub seed: u64,
    pub eval_count: usize,
    /// All remaining records when unset.
    pub train_count: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { seed: 0, eval_count: 16, train_count: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub records: usize,
    pub examples: usize,
    pub supervised_by_kind: BTreeMap<TargetKind, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub split: SplitConfig,
    pub train: SplitSummary,
    pub eval: SplitSummary,
    /// Records left out because the targets were reached.
    pub unused: usize,
    pub files: BTreeMap<String, String>,
    pub recipe: BTreeMap<String, TrainingRecipe>,
}

fn split_key(seed: u64, example_id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(example_id.as_bytes());
    h.finalize().into()
}

/// Assigns whole examples to eval then train, in seeded-hash order, taking an
/// example only while it fits under the split's target count. Returns
/// `(train, eval, unused)` record indices.
pub fn split_records(records: &[SupervisionRecord], config: &SplitConfig) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.example_id.as_str()).or_default().push(i);
    }
    let mut order: Vec<(&str, Vec<usize>)> = groups.into_iter().collect();
    order.sort_by_cached_key(|(id, _)| split_key(config.seed, id));
    let train_target = config.train_count.unwrap_or(usize::MAX);
    let (mut train, mut eval, mut unused) = (Vec::new(), Vec::new(), Vec::new());
    for (_, members) in order {
        if eval.len() + members.len() <= config.eval_count {
            eval.extend(members);
        } else if train.len() + members.len() <= train_target {
            train.extend(members);
        } else {
            unused.extend(members);
        }
    }
    train.sort_unstable();
    eval.sort_unstable();
    unused.sort_unstable();
    (train, eval, unused)
}

fn summarize(records: &[SupervisionRecord], idx: &[usize]) -> SplitSummary {
    let mut by_kind = BTreeMap::new();
    let mut examples = std::collections::BTreeSet::new();
    for &i in idx {
        examples.insert(records[i].example_id.as_str());
        for t in records[i].supervised() {
            *by_kind.entry(t.kind).or_insert(0) += 1;
        }
    }
    SplitSummary { records: idx.len(), examples: examples.len(), supervised_by_kind: by_kind }
}

fn write_jsonl(path: &Path, records: &[SupervisionRecord], idx: &[usize]) -> Result<(), PackError> {
    let io = |source| PackError::Io { path: path.display().to_string(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for &i in idx {
        let line = serde_json::to_string(&records[i]).expect("records serialize");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes `train.jsonl`, `eval.jsonl`, and `manifest.json` under `dir`.
pub fn export(
    records: &[SupervisionRecord],
    dir: &Path,
    split: &SplitConfig,
    weights: &WeightConfig,
) -> Result<ExportManifest, PackError> {
    if records.is_empty() {
        return Err(PackError::NoRecords);
    }
    std::fs::create_dir_all(dir).map_err(|source| PackError::Io { path: dir.display().to_string(), source })?;
    let (train, eval, unused) = split_records(records, split);
    let train_path: PathBuf = dir.join("train.jsonl");
    let eval_path: PathBuf = dir.join("eval.jsonl");
    write_jsonl(&train_path, records, &train)?;
    write_jsonl(&eval_path, records, &eval)?;
    let mut stages: Vec<u8> = records.iter().map(|r| r.stage).collect();
    stages.sort_unstable();
    stages.dedup();
    let manifest = ExportManifest {
        split: split.clone(),
        train: summarize(records, &train),
        eval: summarize(records, &eval),
        unused: unused.len(),
        files: BTreeMap::from([
            ("train".to_string(), "train.jsonl".to_string()),
            ("eval".to_string(), "eval.jsonl".to_string()),
        ]),
        recipe: stages.iter().map(|&s| (format!("stage{s}"), TrainingRecipe::for_stage(s, weights))).collect(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|source| PackError::Io { path: path.display().to_string(), source })?;
    Ok(manifest)
}
