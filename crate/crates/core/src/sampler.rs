//! Coverage-oriented pool construction: heuristic profiles, reasoning
//! signatures, signature-capped sampling, and manifest assembly.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evaluation::normalize_answer;
use crate::skillbank::{Category, SkillBankVersion};
use crate::trajectory::{EntrySource, ManifestEntry, Trajectory, TrajectoryMetadata};

#[derive(Debug, Error, PartialEq)]
pub enum SampleError {
    #[error("example `{0}` has an empty question")]
    EmptyQuestion(String),
    #[error("target {target} exceeds pool size {pool}")]
    TargetExceedsPool { target: usize, pool: usize },
    #[error("rare signatures alone hold {rare} examples, more than the target {target}")]
    RareExceedsTarget { rare: usize, target: usize },
    #[error("target {target} is unreachable: at most {reachable} examples fit under cap {cap}")]
    CapTooSmall { target: usize, reachable: usize, cap: usize },
    #[error("replay ratio must be in [0, 1), got {0}")]
    BadRatio(f64),
}

/// One QA record from a pool file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub id: String,
    #[serde(default)]
    pub dataset: String,
    pub question: String,
    #[serde(default)]
    pub answers: Vec<String>,
    #[serde(default, rename = "type", skip_serializing_if = "Option::is_none")]
    pub native_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hop: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnswerForm {
    Entity,
    Date,
    Number,
    YesNo,
    Span,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WhType {
    Who,
    What,
    When,
    Where,
    Which,
    Why,
    How,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthBucket {
    Short,
    Medium,
    Long,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct CueFlags {
    pub temporal: bool,
    pub numerical: bool,
    pub comparison: bool,
    pub alias: bool,
    pub verification: bool,
    pub relation_chain: bool,
}

impl CueFlags {
    pub fn names(&self) -> Vec<&'static str> {
        [
            (self.temporal, "temporal"),
            (self.numerical, "numerical"),
            (self.comparison, "comparison"),
            (self.alias, "alias"),
            (self.verification, "verification"),
            (self.relation_chain, "relation-chain"),
        ]
        .into_iter()
        .filter_map(|(on, name)| on.then_some(name))
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleProfile {
    pub example_id: String,
    pub dataset: String,
    pub question: String,
    #[serde(default)]
    pub gold_answers: Vec<String>,
    pub answer_form: AnswerForm,
    pub wh_type: WhType,
    pub length_bucket: LengthBucket,
    pub entity_count: u8,
    pub cues: CueFlags,
    pub native_type: Option<String>,
    pub hop_count: Option<u32>,
}

/// Token-count upper bounds for the short and medium length buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthThresholds {
    pub short_max: usize,
    pub medium_max: usize,
}

impl Default for LengthThresholds {
    fn default() -> Self {
        LengthThresholds { short_max: 8, medium_max: 16 }
    }
}

const AUXILIARIES: &[&str] = &[
    "is", "are", "was", "were", "did", "do", "does", "can", "could", "has", "have", "had", "will", "would", "should",
];
const MONTHS: &[&str] = &[
    "january", "february", "march", "april", "may", "june", "july", "august", "september", "october", "november",
    "december",
];
const TEMPORAL: &[&str] = &[
    "when", "year", "years", "date", "century", "decade", "during", "before", "after", "until", "since", "era",
    "founded", "established", "born", "period",
];
const NUMERICAL: &[&str] = &[
    "many", "much", "number", "population", "toll", "percent", "percentage", "age", "height", "length", "count",
    "total", "amount", "size",
];
const COMPARISON: &[&str] = &[
    "first", "earlier", "later", "older", "younger", "larger", "smaller", "bigger", "longer", "shorter", "higher",
    "lower", "more", "less", "fewer", "than", "both", "same", "either", "earliest", "latest", "oldest", "youngest",
];
const ALIAS_PHRASES: &[&str] = &[
    "also known as", "known as", "aka", "nickname", "real name", "stage name", "pen name", "birth name", "alias",
    "called", "better known",
];
const RELATIONS: &[&str] = &[
    "father", "mother", "son", "daughter", "wife", "husband", "spouse", "brother", "sister", "child", "parent",
    "grandfather", "grandmother", "uncle", "aunt", "director", "founder", "author", "creator", "composer",
    "performer", "producer", "capital", "headquarters", "owner", "successor", "predecessor", "father-in-law",
    "mother-in-law",
];

fn lower_words(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '\''))
        .filter(|w| !w.is_empty())
        .map(|w| w.trim_matches('\'').to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

fn wh_of(word: &str) -> Option<WhType> {
    Some(match word {
        "who" | "whom" | "whose" => WhType::Who,
        "what" => WhType::What,
        "when" => WhType::When,
        "where" => WhType::Where,
        "which" => WhType::Which,
        "why" => WhType::Why,
        "how" => WhType::How,
        _ => return None,
    })
}

fn is_year(word: &str) -> bool {
    word.len() == 4 && word.chars().all(|c| c.is_ascii_digit())
}

fn is_numeric(text: &str) -> bool {
    let t = text.trim();
    !t.is_empty() && t.chars().all(|c| c.is_ascii_digit() || matches!(c, ',' | '.' | ' ' | '%')) && t.chars().any(|c| c.is_ascii_digit())
}

fn answer_form(question_words: &[String], wh: WhType, answers: &[String]) -> AnswerForm {
    let answer = answers.first().map(|a| a.trim()).unwrap_or("");
    let answer_words = lower_words(answer);
    let first_q = question_words.first().map(String::as_str).unwrap_or("");
    if matches!(normalize_answer(answer).as_str(), "yes" | "no") || AUXILIARIES.contains(&first_q) {
        return AnswerForm::YesNo;
    }
    if answer_words.iter().any(|w| MONTHS.contains(&w.as_str()))
        || (answer_words.len() == 1 && is_year(&answer_words[0]))
        || (answer.is_empty() && wh == WhType::When)
    {
        return AnswerForm::Date;
    }
    let how_many = question_words.windows(2).any(|w| w[0] == "how" && (w[1] == "many" || w[1] == "much"));
    if is_numeric(answer) || (answer.is_empty() && how_many) {
        return AnswerForm::Number;
    }
    if answer.split_whitespace().any(|w| w.chars().next().is_some_and(char::is_uppercase)) {
        return AnswerForm::Entity;
    }
    if answer_words.len() >= 3 {
        return AnswerForm::Span;
    }
    if answer.is_empty() && matches!(wh, WhType::Who | WhType::Where | WhType::Which) {
        return AnswerForm::Entity;
    }
    AnswerForm::Other
}

/// Runs of capitalized words, ignoring the sentence-initial word.
fn entity_count(question: &str) -> u8 {
    let mut runs = 0u8;
    let mut in_run = false;
    for (i, w) in question.split_whitespace().enumerate() {
        let w = w.trim_matches(|c: char| !c.is_alphanumeric());
        let cap = i > 0 && w.chars().next().is_some_and(|c| c.is_uppercase() || c.is_ascii_digit());
        if cap && !in_run {
            runs = runs.saturating_add(1);
        }
        in_run = cap || (in_run && matches!(w, "of" | "de" | "the" | "von" | "van"));
    }
    runs
}

fn cues(question: &str, words: &[String], wh: WhType) -> CueFlags {
    let lower = format!(" {} ", words.join(" "));
    let has = |list: &[&str]| words.iter().any(|w| list.contains(&w.as_str()));
    let phrase = |list: &[&str]| list.iter().any(|p| lower.contains(&format!(" {p} ")));
    let first = words.first().map(String::as_str).unwrap_or("");
    CueFlags {
        temporal: has(TEMPORAL) || words.iter().any(|w| MONTHS.contains(&w.as_str()) || is_year(w)),
        numerical: has(NUMERICAL) || words.iter().any(|w| w.chars().any(|c| c.is_ascii_digit()) && !is_year(w)),
        comparison: has(COMPARISON)
            || words.iter().any(|w| w.ends_with("est") && w.len() > 5)
            || (lower.contains(" or ") && matches!(wh, WhType::Who | WhType::Which | WhType::What)),
        alias: phrase(ALIAS_PHRASES),
        verification: AUXILIARIES.contains(&first) || phrase(&["true", "correct", "both"]),
        relation_chain: question.contains("'s ")
            || question.contains("’s ")
            || words.iter().filter(|w| RELATIONS.contains(&w.as_str())).count() >= 1 && lower.contains(" of ")
            || lower.matches(" of ").count() >= 2,
    }
}

pub fn profile_example(raw: &RawExample, lengths: &LengthThresholds) -> Result<ExampleProfile, SampleError> {
    let question = raw.question.trim();
    if question.is_empty() {
        return Err(SampleError::EmptyQuestion(raw.id.clone()));
    }
    let words = lower_words(question);
    let wh_type = words.iter().find_map(|w| wh_of(w)).unwrap_or(WhType::None);
    let length_bucket = match words.len() {
        n if n <= lengths.short_max => LengthBucket::Short,
        n if n <= lengths.medium_max => LengthBucket::Medium,
        _ => LengthBucket::Long,
    };
    Ok(ExampleProfile {
        example_id: raw.id.clone(),
        dataset: raw.dataset.clone(),
        question: question.to_string(),
        gold_answers: raw.answers.clone(),
        answer_form: answer_form(&words, wh_type, &raw.answers),
        wh_type,
        length_bucket,
        entity_count: entity_count(question),
        cues: cues(question, &words, wh_type),
        native_type: raw.native_type.clone(),
        hop_count: raw.hop,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SignatureKey {
    pub dataset: String,
    pub native_type: Option<String>,
    pub hop_count: Option<u32>,
    pub answer_form: AnswerForm,
    pub wh_type: WhType,
    pub cues: CueFlags,
}

impl SignatureKey {
    pub fn of(p: &ExampleProfile) -> Self {
        SignatureKey {
            dataset: p.dataset.clone(),
            native_type: p.native_type.clone(),
            hop_count: p.hop_count,
            answer_form: p.answer_form,
            wh_type: p.wh_type,
            cues: p.cues,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub key: SignatureKey,
    /// Member example ids, sorted.
    pub members: Vec<String>,
}

/// Partitions profiles by signature key; output sorted by key.
pub fn group_signatures(profiles: &[ExampleProfile]) -> Vec<Signature> {
    let mut map: BTreeMap<SignatureKey, Vec<String>> = BTreeMap::new();
    for p in profiles {
        map.entry(SignatureKey::of(p)).or_default().push(p.example_id.clone());
    }
    map.into_iter()
        .map(|(key, mut members)| {
            members.sort();
            Signature { key, members }
        })
        .collect()
}

/// Coverage labels for one example.
fn labels(p: &ExampleProfile) -> Vec<String> {
    let mut out = vec![
        format!("form:{:?}", p.answer_form),
        format!("wh:{:?}", p.wh_type),
        format!("length:{:?}", p.length_bucket),
        format!("entities:{}", p.entity_count.min(3)),
    ];
    let cue_names = p.cues.names();
    if cue_names.is_empty() {
        out.push("cue:none".into());
    }
    out.extend(cue_names.into_iter().map(|c| format!("cue:{c}")));
    out
}

fn seeded_hash(seed: u64, text: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(text.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 8 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub target: usize,
    /// Most examples any non-rare signature may contribute.
    pub cap: usize,
    /// Signatures with at most this many members are taken whole.
    pub rare_threshold: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    /// Selected ids, sorted.
    pub selected: Vec<String>,
    pub signatures: usize,
    pub rare_signatures: usize,
    pub rare_examples: usize,
    pub max_from_one_signature: usize,
    pub label_counts: BTreeMap<String, usize>,
}

struct HeapItem {
    gain: f64,
    tiebreak: u64,
    cell: usize,
}

impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapItem {}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.gain
            .total_cmp(&other.gain)
            .then_with(|| other.tiebreak.cmp(&self.tiebreak))
            .then_with(|| other.cell.cmp(&self.cell))
    }
}

/// Signature-capped selection of exactly `config.target` examples.
///
/// Rare signatures are included whole. The rest of the budget is filled one
/// example at a time by lazy greedy coverage: an example's gain is the sum of
/// `1 / (1 + count)` over its labels, where `count` is how many selected
/// examples already carry that label. No non-rare signature exceeds `cap`.
/// Examples with the same signature and label set form a cell and are drawn
/// in seeded-hash order. The result does not depend on input order.
pub fn sample_capped(profiles: &[ExampleProfile], config: &SampleConfig) -> Result<SampleReport, SampleError> {
    let pool = profiles.len();
    if config.target > pool {
        return Err(SampleError::TargetExceedsPool { target: config.target, pool });
    }
    let by_id: HashMap<&str, &ExampleProfile> = profiles.iter().map(|p| (p.example_id.as_str(), p)).collect();
    let signatures = group_signatures(profiles);

    let mut selected: Vec<String> = Vec::with_capacity(config.target);
    let mut label_counts: HashMap<String, usize> = HashMap::new();
    let mut rare_signatures = 0;
    let mut reachable = 0;
    // cells: (signature index, members in draw order, labels)
    let mut cells: Vec<(usize, Vec<&str>, Vec<String>)> = Vec::new();
    for (si, sig) in signatures.iter().enumerate() {
        if sig.members.len() <= config.rare_threshold {
            rare_signatures += 1;
            for m in &sig.members {
                for l in labels(by_id[m.as_str()]) {
                    *label_counts.entry(l).or_default() += 1;
                }
                selected.push(m.clone());
            }
            continue;
        }
        reachable += sig.members.len().min(config.cap);
        let mut groups: BTreeMap<Vec<String>, Vec<&str>> = BTreeMap::new();
        for m in &sig.members {
            groups.entry(labels(by_id[m.as_str()])).or_default().push(m);
        }
        for (labs, mut members) in groups {
            members.sort_by_cached_key(|m| (seeded_hash(config.seed, m), m.to_string()));
            cells.push((si, members, labs));
        }
    }
    let rare_examples = selected.len();
    if rare_examples > config.target {
        return Err(SampleError::RareExceedsTarget { rare: rare_examples, target: config.target });
    }
    if rare_examples + reachable < config.target {
        return Err(SampleError::CapTooSmall { target: config.target, reachable: rare_examples + reachable, cap: config.cap });
    }

    let gain = |labs: &[String], counts: &HashMap<String, usize>| -> f64 {
        labs.iter().map(|l| 1.0 / (1.0 + *counts.get(l).unwrap_or(&0) as f64)).sum()
    };
    let cell_hash: Vec<u64> = cells
        .iter()
        .map(|(si, _, labs)| seeded_hash(config.seed, &format!("{:?}|{}", signatures[*si].key, labs.join(","))))
        .collect();
    let mut heap: BinaryHeap<HeapItem> = cells
        .iter()
        .enumerate()
        .map(|(ci, (_, _, labs))| HeapItem { gain: gain(labs, &label_counts), tiebreak: cell_hash[ci], cell: ci })
        .collect();
    let mut taken_from_sig = vec![0usize; signatures.len()];
    let mut next_in_cell = vec![0usize; cells.len()];
    while selected.len() < config.target {
        let Some(top) = heap.pop() else { break };
        let (si, members, labs) = &cells[top.cell];
        if taken_from_sig[*si] >= config.cap || next_in_cell[top.cell] >= members.len() {
            continue;
        }
        let fresh = gain(labs, &label_counts);
        if heap.peek().is_some_and(|next| fresh < next.gain) {
            heap.push(HeapItem { gain: fresh, ..top });
            continue;
        }
        let id = members[next_in_cell[top.cell]];
        next_in_cell[top.cell] += 1;
        taken_from_sig[*si] += 1;
        for l in labs {
            *label_counts.entry(l.clone()).or_default() += 1;
        }
        selected.push(id.to_string());
        heap.push(HeapItem { gain: gain(labs, &label_counts), ..top });
    }
    selected.sort();
    let max_from_one_signature = taken_from_sig.into_iter().max().unwrap_or(0);
    Ok(SampleReport {
        selected,
        signatures: signatures.len(),
        rare_signatures,
        rare_examples,
        max_from_one_signature,
        label_counts: label_counts.into_iter().collect(),
    })
}

/// Drops pool examples that share an id or a normalized question with any
/// evaluation example. Returns `(kept, removed_ids)`.
pub fn remove_overlap(pool: Vec<RawExample>, eval: &[RawExample]) -> (Vec<RawExample>, Vec<String>) {
    let ids: HashSet<&str> = eval.iter().map(|e| e.id.as_str()).filter(|id| !id.is_empty()).collect();
    let questions: HashSet<String> = eval.iter().map(|e| normalize_answer(&e.question)).collect();
    let mut removed = Vec::new();
    let kept = pool
        .into_iter()
        .filter(|p| {
            let hit = (!p.id.is_empty() && ids.contains(p.id.as_str())) || questions.contains(&normalize_answer(&p.question));
            if hit {
                removed.push(p.id.clone());
            }
            !hit
        })
        .collect();
    (kept, removed)
}

/// Skill categories suggested by each cue; questions without cues map to
/// direct lookup, and multi-hop questions always add bridge-chain.
pub fn cue_categories(cues: &CueFlags, hop_count: Option<u32>) -> BTreeSet<Category> {
    let mut out = BTreeSet::new();
    if cues.temporal || cues.numerical || cues.alias {
        out.insert(Category::DirectLookup);
    }
    if cues.comparison {
        out.insert(Category::ComparisonJoin);
    }
    if cues.relation_chain || hop_count.is_some_and(|h| h >= 2) {
        out.insert(Category::BridgeChain);
    }
    if cues.verification {
        out.insert(Category::GroundingVerification);
    }
    if out.iter().all(|c| *c == Category::GroundingVerification) {
        out.insert(Category::DirectLookup);
    }
    out
}

/// Candidate primary skills (non-support cards of the mapped categories) and
/// suggested support skills (support-only cards of the mapped categories and
/// of grounding-verification), in bank order.
pub fn suggest_skills(profile: &ExampleProfile, bank: &SkillBankVersion) -> (Vec<String>, Vec<String>) {
    let cats = cue_categories(&profile.cues, profile.hop_count);
    let primary = bank
        .cards()
        .iter()
        .filter(|c| !c.support_only && cats.contains(&c.category))
        .map(|c| c.id.clone())
        .collect();
    let support = bank
        .cards()
        .iter()
        .filter(|c| c.support_only && (cats.contains(&c.category) || c.category == Category::GroundingVerification))
        .map(|c| c.id.clone())
        .collect();
    (primary, support)
}

fn entry_for(profile: &ExampleProfile, bank: &SkillBankVersion, source: EntrySource) -> ManifestEntry {
    let (candidate_primary_skills, suggested_support_skills) = suggest_skills(profile, bank);
    ManifestEntry {
        example_id: profile.example_id.clone(),
        dataset: profile.dataset.clone(),
        question: profile.question.clone(),
        gold_answers: profile.gold_answers.clone(),
        metadata: TrajectoryMetadata {
            question_type: profile.native_type.clone(),
            hop_count: profile.hop_count,
            cues: profile.cues.names().into_iter().map(String::from).collect(),
        },
        candidate_primary_skills,
        suggested_support_skills,
        source,
    }
}

/// Number of replay entries that make up `ratio` of a manifest with
/// `pool` sampled entries.
pub fn replay_count(pool: usize, ratio: f64) -> usize {
    (pool as f64 * ratio / (1.0 - ratio)).round() as usize
}

/// Builds manifest rows for the selected pool plus failure-replay rows taken
/// in input order, spreading replay rows evenly through the pool rows.
pub fn build_manifest(
    selected: &[ExampleProfile],
    failures: &[Trajectory],
    ratio: f64,
    bank: &SkillBankVersion,
    lengths: &LengthThresholds,
) -> Result<Vec<ManifestEntry>, SampleError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(SampleError::BadRatio(ratio));
    }
    let n_replay = replay_count(selected.len(), ratio).min(failures.len());
    let mut replay = Vec::with_capacity(n_replay);
    for t in &failures[..n_replay] {
        let raw = RawExample {
            id: t.example_id.clone(),
            dataset: t.dataset.clone(),
            question: t.question.clone(),
            answers: t.gold_answers.clone(),
            native_type: t.metadata.question_type.clone(),
            hop: t.metadata.hop_count,
        };
        replay.push(entry_for(&profile_example(&raw, lengths)?, bank, EntrySource::FailureReplay));
    }
    let total = selected.len() + n_replay;
    let mut out = Vec::with_capacity(total);
    let (mut pool_it, mut replay_it) = (selected.iter(), replay.into_iter());
    for i in 0..total {
        if (i + 1) * n_replay / total > i * n_replay / total {
            out.extend(replay_it.next());
        } else {
            out.extend(pool_it.next().map(|p| entry_for(p, bank, EntrySource::Pool)));
        }
    }
    Ok(out)
}
