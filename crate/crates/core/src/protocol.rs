//! Tag grammar spoken between the policy and the runtime.
//!
//! Selection turn: `<select_skill>id, id</select_skill>`.
//! Action turn: `<skill>primary|support</skill>` followed by exactly one of
//! `<search>query</search>` or `<answer>text</answer>`.
//! Environment turn: `<information>Doc 1: ...</information>`.
//!
//! Tag names are matched exactly and case-sensitively. In permissive mode the
//! first well-formed instance of each tag wins and trailing text is ignored;
//! strict mode rejects any content outside the expected tags.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::Passage;
use crate::skillbank::is_valid_skill_id;

pub const SELECT_SKILL: &str = "select_skill";
pub const SKILL: &str = "skill";
pub const SEARCH: &str = "search";
pub const ANSWER: &str = "answer";
pub const INFORMATION: &str = "information";

/// Separator between ids inside `<select_skill>`.
pub const SELECTION_SEPARATOR: char = ',';
/// Separator between ids inside `<skill>`; primary skill first.
pub const SKILL_SEPARATOR: char = '|';

pub const SELECTION_STOP: &str = "</select_skill>";
pub const ACTION_STOPS: [&str; 2] = ["</search>", "</answer>"];

const TAG_NAMES: [&str; 5] = [SELECT_SKILL, SKILL, SEARCH, ANSWER, INFORMATION];

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "error", content = "detail", rename_all = "snake_case")]
pub enum ParseError {
    #[error("no <select_skill> tag pair")]
    MissingTag,
    #[error("<select_skill> contains no skill ids")]
    EmptySelection,
    #[error("no <skill> tag pair before the action")]
    MissingSkillTag,
    #[error("<skill> contains no skill ids")]
    EmptySkillList,
    #[error("neither <search> nor <answer> is present")]
    MissingAction,
    #[error("both <search> and <answer> are present")]
    MultipleActions,
    #[error("malformed tag: {0}")]
    MalformedTag(String),
    #[error("invalid skill id `{0}`")]
    InvalidSkillId(String),
    #[error("action payload is empty")]
    EmptyPayload,
    #[error("unexpected content outside tags: {0:?}")]
    UnexpectedContent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    #[default]
    Permissive,
    Strict,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SkillSelection {
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Search,
    Answer,
}

impl ActionKind {
    pub fn tag(self) -> &'static str {
        match self {
            ActionKind::Search => SEARCH,
            ActionKind::Answer => ANSWER,
        }
    }
}

/// One decoded action turn. `skills[0]` is the primary skill.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParsedAction {
    pub skills: Vec<String>,
    pub kind: ActionKind,
    pub payload: String,
}

impl ParsedAction {
    pub fn search(skills: Vec<String>, query: impl Into<String>) -> Self {
        ParsedAction { skills, kind: ActionKind::Search, payload: query.into() }
    }

    pub fn answer(skills: Vec<String>, text: impl Into<String>) -> Self {
        ParsedAction { skills, kind: ActionKind::Answer, payload: text.into() }
    }

    pub fn primary_skill(&self) -> &str {
        &self.skills[0]
    }

    pub fn is_search(&self) -> bool {
        self.kind == ActionKind::Search
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnKind {
    Selection,
    Action,
    Neither,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct TagEvent {
    name: &'static str,
    close: bool,
    start: usize,
    end: usize,
}

fn scan_tags(text: &str) -> Vec<TagEvent> {
    let mut events = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'<' {
            let rest = &text[i + 1..];
            let (close, rest) = match rest.strip_prefix('/') {
                Some(r) => (true, r),
                None => (false, rest),
            };
            if let Some(name) = TAG_NAMES
                .iter()
                .find(|name| rest.strip_prefix(**name).is_some_and(|r| r.starts_with('>')))
            {
                let end = i + 1 + usize::from(close) + name.len() + 1;
                events.push(TagEvent { name, close, start: i, end });
                i = end;
                continue;
            }
        }
        i += 1;
    }
    events
}

#[derive(Debug, Clone, Copy)]
struct TagPair {
    open_start: usize,
    inner_start: usize,
    inner_end: usize,
    close_end: usize,
}

/// Balanced pairs of one tag name plus the first structural fault, if any,
/// as (position, description).
fn pair_up(events: &[TagEvent], name: &str) -> (Vec<TagPair>, Vec<(usize, String)>) {
    let mut pairs = Vec::new();
    let mut faults = Vec::new();
    let mut open: Option<&TagEvent> = None;
    for ev in events.iter().filter(|e| e.name == name) {
        match (ev.close, open) {
            (false, None) => open = Some(ev),
            (false, Some(prev)) => {
                faults.push((prev.start, format!("<{name}> opened twice without closing")));
                open = Some(ev);
            }
            (true, Some(o)) => {
                pairs.push(TagPair {
                    open_start: o.start,
                    inner_start: o.end,
                    inner_end: ev.start,
                    close_end: ev.end,
                });
                open = None;
            }
            (true, None) => faults.push((ev.start, format!("</{name}> without matching <{name}>"))),
        }
    }
    if let Some(o) = open {
        faults.push((o.start, format!("<{name}> is never closed")));
    }
    (pairs, faults)
}

fn split_ids(content: &str, sep: char) -> Result<Vec<String>, ParseError> {
    let ids: Vec<String> = content
        .split(sep)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    if let Some(bad) = ids.iter().find(|id| !is_valid_skill_id(id)) {
        return Err(ParseError::InvalidSkillId(bad.clone()));
    }
    Ok(ids)
}

fn outside_content(text: &str, spans: &[(usize, usize)]) -> Option<String> {
    let mut spans = spans.to_vec();
    spans.sort_unstable();
    let mut cursor = 0;
    let mut extra = String::new();
    for (s, e) in spans {
        if s > cursor {
            extra.push_str(&text[cursor..s]);
        }
        cursor = cursor.max(e);
    }
    extra.push_str(&text[cursor.min(text.len())..]);
    let extra = extra.trim();
    (!extra.is_empty()).then(|| extra.to_string())
}

pub fn parse_selection_turn(text: &str) -> Result<SkillSelection, ParseError> {
    parse_selection_turn_with(text, ParseMode::Permissive)
}

pub fn parse_selection_turn_with(text: &str, mode: ParseMode) -> Result<SkillSelection, ParseError> {
    let events = scan_tags(text);
    let mut pair = None;
    let mut open: Option<&TagEvent> = None;
    for ev in events.iter().filter(|e| e.name == SELECT_SKILL) {
        match (ev.close, open) {
            (false, _) => open = Some(ev),
            (true, Some(o)) => {
                pair = Some((o.start, o.end, ev.start, ev.end));
                break;
            }
            (true, None) => {}
        }
    }
    let (open_start, inner_start, inner_end, close_end) = pair.ok_or(ParseError::MissingTag)?;
    if mode == ParseMode::Strict {
        if let Some(extra) = outside_content(text, &[(open_start, close_end)]) {
            return Err(ParseError::UnexpectedContent(extra));
        }
    }
    let ids = split_ids(&text[inner_start..inner_end], SELECTION_SEPARATOR)?;
    if ids.is_empty() {
        return Err(ParseError::EmptySelection);
    }
    Ok(SkillSelection { ids })
}

pub fn parse_action_turn(text: &str) -> Result<ParsedAction, ParseError> {
    parse_action_turn_with(text, ParseMode::Permissive)
}

pub fn parse_action_turn_with(text: &str, mode: ParseMode) -> Result<ParsedAction, ParseError> {
    let events = scan_tags(text);
    let (skill_pairs, skill_faults) = pair_up(&events, SKILL);
    let (search_pairs, search_faults) = pair_up(&events, SEARCH);
    let (answer_pairs, answer_faults) = pair_up(&events, ANSWER);

    let first_search = search_pairs.first().copied();
    let first_answer = answer_pairs.first().copied();
    let action = match (first_search, first_answer) {
        (Some(s), Some(a)) => {
            if s.open_start < a.open_start {
                Some((ActionKind::Search, s))
            } else {
                Some((ActionKind::Answer, a))
            }
        }
        (Some(s), None) => Some((ActionKind::Search, s)),
        (None, Some(a)) => Some((ActionKind::Answer, a)),
        (None, None) => None,
    };

    // Faults after the first complete action are trailing text in permissive mode.
    let cutoff = match (mode, action) {
        (ParseMode::Permissive, Some((_, pair))) => pair.close_end,
        _ => usize::MAX,
    };
    let mut faults: Vec<&(usize, String)> = skill_faults
        .iter()
        .chain(&search_faults)
        .chain(&answer_faults)
        .filter(|(pos, _)| *pos < cutoff)
        .collect();
    faults.sort_by_key(|(pos, _)| *pos);
    if let Some((_, msg)) = faults.first() {
        return Err(ParseError::MalformedTag(msg.clone()));
    }
    if first_search.is_some() && first_answer.is_some() {
        return Err(ParseError::MultipleActions);
    }
    let (kind, action_pair) = action.ok_or(ParseError::MissingAction)?;
    let skill_pair = skill_pairs
        .iter()
        .find(|p| p.close_end <= action_pair.open_start)
        .copied()
        .ok_or(ParseError::MissingSkillTag)?;

    if mode == ParseMode::Strict {
        let repeated = skill_pairs.len() > 1 || search_pairs.len() + answer_pairs.len() > 1;
        let spans = [
            (skill_pair.open_start, skill_pair.close_end),
            (action_pair.open_start, action_pair.close_end),
        ];
        if let Some(extra) = outside_content(text, &spans) {
            return Err(ParseError::UnexpectedContent(extra));
        }
        if repeated {
            return Err(ParseError::UnexpectedContent("repeated tags".into()));
        }
    }

    let skills = split_ids(&text[skill_pair.inner_start..skill_pair.inner_end], SKILL_SEPARATOR)?;
    if skills.is_empty() {
        return Err(ParseError::EmptySkillList);
    }
    let payload = text[action_pair.inner_start..action_pair.inner_end].trim();
    if payload.is_empty() {
        return Err(ParseError::EmptyPayload);
    }
    Ok(ParsedAction { skills, kind, payload: payload.to_string() })
}

pub fn classify_turn(text: &str) -> TurnKind {
    if parse_selection_turn(text).is_ok() {
        TurnKind::Selection
    } else if parse_action_turn(text).is_ok() {
        TurnKind::Action
    } else {
        TurnKind::Neither
    }
}

pub fn render_selection(selection: &SkillSelection) -> String {
    format!("<{SELECT_SKILL}>{}</{SELECT_SKILL}>", selection.ids.join(", "))
}

pub fn render_action(action: &ParsedAction) -> String {
    let tag = action.kind.tag();
    format!(
        "<{SKILL}>{}</{SKILL}>\n<{tag}>{}</{tag}>",
        action.skills.join(&SKILL_SEPARATOR.to_string()),
        action.payload
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RenderError {
    #[error("an information block needs at least one passage")]
    EmptyInformation,
}

/// Serializes retrieved passages as `Doc i: <title>. <text>` lines inside one
/// information tag pair. The exact bytes are part of the supervision format.
pub fn render_information(passages: &[Passage]) -> Result<String, RenderError> {
    render_information_capped(passages, None)
}

/// Like [`render_information`], truncating each passage text to
/// `max_chars_per_passage` characters.
pub fn render_information_capped(
    passages: &[Passage],
    max_chars_per_passage: Option<usize>,
) -> Result<String, RenderError> {
    if passages.is_empty() {
        return Err(RenderError::EmptyInformation);
    }
    let mut out = format!("<{INFORMATION}>\n");
    for (i, p) in passages.iter().enumerate() {
        let text = match max_chars_per_passage {
            Some(cap) if p.text.chars().count() > cap => p.text.chars().take(cap).collect::<String>(),
            _ => p.text.clone(),
        };
        out.push_str(&format!("Doc {}: {}. {}\n", i + 1, p.title, text));
    }
    out.push_str(&format!("</{INFORMATION}>"));
    Ok(out)
}

/// Block returned to the policy when a search retrieves nothing.
pub fn render_no_results() -> String {
    format!("<{INFORMATION}>\nNo results found.\n</{INFORMATION}>")
}
