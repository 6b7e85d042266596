//! Prompt text and the history update rules shared by rollouts and packed
//! supervision records. Both sides build histories through [`History`] so a
//! packed context is byte-identical to what the policy saw at inference.

use crate::environment::ChatTurn;
use crate::skillbank::{get_cards, render_cards, SkillBankVersion};

pub const SYSTEM_PROMPT: &str = "You answer questions by searching a document collection. \
Before every action, choose skills from the SkillBank index with <select_skill>id, id</select_skill>. \
You will then receive the selected skill cards. \
Next write <skill>primary|support</skill> followed by exactly one action: \
<search>query</search> to retrieve documents, or <answer>short answer</answer> to finish. \
Search results arrive inside <information></information>. \
Answer with the shortest span supported by the retrieved evidence.";

/// Stage-I prompt: no selection turns, the policy writes skill-tagged actions directly.
pub const EXECUTION_PROMPT: &str = "You answer questions by searching a document collection. \
Each turn, write <skill>primary|support</skill> followed by exactly one action: \
<search>query</search> to retrieve documents, or <answer>short answer</answer> to finish. \
Search results arrive inside <information></information>. \
Answer with the shortest span supported by the retrieved evidence.";

/// Prefix of the optional per-question hint line appended to a system prompt.
pub const HINT_PREFIX: &str = "Recommended skills for this question: ";

pub fn question_turn(question: &str) -> String {
    format!("Question: {}", question.trim())
}

/// Appends a hint line naming candidate skills. No-op for an empty list.
pub fn with_hints(system: &str, skills: &[String]) -> String {
    if skills.is_empty() {
        system.to_string()
    } else {
        format!("{system}\n{HINT_PREFIX}{}", skills.join(", "))
    }
}

/// Removes any hint line added by [`with_hints`].
pub fn strip_hints(system: &str) -> String {
    system.lines().filter(|l| !l.starts_with(HINT_PREFIX)).collect::<Vec<_>>().join("\n")
}

/// Card context turn for a selection.
pub fn card_context(bank: &SkillBankVersion, ids: &[String]) -> String {
    render_cards(&get_cards(bank, ids))
}

/// Growing chat history under the select-read-act update rules:
/// `[system, question, index]`, then per step `selection, cards, action`, and
/// after each search `information, index`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct History {
    turns: Vec<ChatTurn>,
    index: String,
}

impl History {
    pub fn start(system: &str, question: &str, index: &str) -> Self {
        History {
            turns: vec![ChatTurn::system(system), ChatTurn::user(question_turn(question)), ChatTurn::user(index)],
            index: index.to_string(),
        }
    }

    pub fn turns(&self) -> &[ChatTurn] {
        &self.turns
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn push_selection(&mut self, text: &str) {
        self.turns.push(ChatTurn::assistant(text));
    }

    pub fn push_cards(&mut self, text: &str) {
        self.turns.push(ChatTurn::user(text));
    }

    pub fn push_action(&mut self, text: &str) {
        self.turns.push(ChatTurn::assistant(text));
    }

    /// Information block followed by the re-appended index.
    pub fn push_observation(&mut self, information: &str) {
        self.turns.push(ChatTurn::user(information));
        self.turns.push(ChatTurn::user(self.index.clone()));
    }

    pub fn into_turns(self) -> Vec<ChatTurn> {
        self.turns
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::Role;

    #[test]
    fn hints_round_trip() {
        let with = with_hints(SYSTEM_PROMPT, &["bridge-entity-search".into(), "conflict-check".into()]);
        assert!(with.ends_with("Recommended skills for this question: bridge-entity-search, conflict-check"));
        assert_eq!(strip_hints(&with), SYSTEM_PROMPT);
        assert_eq!(with_hints(SYSTEM_PROMPT, &[]), SYSTEM_PROMPT);
    }

    #[test]
    fn history_rules() {
        let mut h = History::start("sys", " q? ", "INDEX");
        h.push_selection("<select_skill>a</select_skill>");
        h.push_cards("cards");
        h.push_action("<skill>a</skill>\n<search>q</search>");
        h.push_observation("<information>\nDoc 1: t. x\n</information>");
        let roles: Vec<Role> = h.turns().iter().map(|t| t.role).collect();
        use Role::*;
        assert_eq!(roles, [System, User, User, Assistant, User, Assistant, User, User]);
        assert_eq!(h.turns()[1].content, "Question: q?");
        assert_eq!(h.turns()[7].content, "INDEX");
    }
}
