//! Bundled fixtures: the B0 and B4 banks, the four curriculum updates, a small
//! corpus, and seven worked case traces with scripted policies.

use serde::{Deserialize, Serialize};

use crate::environment::{ContextPredicate, Document, LexicalIndex, ScriptEntry, ScriptedBackend};
use crate::protocol::{render_action, render_selection, ActionKind, ParsedAction, SkillSelection};
use crate::skillbank::{BankUpdate, SkillBankVersion};

pub const BANK_B0_JSON: &str = include_str!("../fixtures/bank_b0.json");
pub const BANK_B4_JSON: &str = include_str!("../fixtures/bank_b4.json");
pub const UPDATE_JSON: [&str; 4] = [
    include_str!("../fixtures/update_b1.json"),
    include_str!("../fixtures/update_b2.json"),
    include_str!("../fixtures/update_b3.json"),
    include_str!("../fixtures/update_b4.json"),
];
pub const CORPUS_JSONL: &str = include_str!("../fixtures/corpus.jsonl");
pub const CASES_JSON: &str = include_str!("../fixtures/cases.json");
pub const MAIN_RESULTS_JSON: &str = include_str!("../fixtures/main_results.json");

pub fn bank_b0() -> SkillBankVersion {
    SkillBankVersion::from_json_str(BANK_B0_JSON).expect("bundled B0 is valid")
}

pub fn bank_b4() -> SkillBankVersion {
    SkillBankVersion::from_json_str(BANK_B4_JSON).expect("bundled B4 is valid")
}

/// Updates producing B1..B4, in order.
pub fn updates() -> Vec<BankUpdate> {
    UPDATE_JSON.iter().map(|s| BankUpdate::from_json_str(s).expect("bundled update is valid")).collect()
}

/// Resolves `B0`/`B4` (case-insensitive) to a bundled bank.
pub fn named_bank(name: &str) -> Option<SkillBankVersion> {
    match name.to_ascii_uppercase().as_str() {
        "B0" => Some(bank_b0()),
        "B4" => Some(bank_b4()),
        _ => None,
    }
}

pub fn corpus() -> Vec<Document> {
    CORPUS_JSONL
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("bundled corpus line is valid"))
        .collect()
}

pub fn corpus_index() -> LexicalIndex {
    LexicalIndex::from_documents(corpus()).expect("bundled corpus is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStep {
    pub selection: Vec<String>,
    pub skills: Vec<String>,
    pub action: ActionKind,
    pub payload: String,
    #[serde(default)]
    pub evidence_doc_id: Option<String>,
    #[serde(default)]
    pub checkpoint: Option<String>,
    /// Doc ids the bundled retriever returns for this search at k=3.
    #[serde(default)]
    pub retrieved_doc_ids: Vec<String>,
}

impl CaseStep {
    pub fn parsed_action(&self) -> ParsedAction {
        ParsedAction { skills: self.skills.clone(), kind: self.action, payload: self.payload.clone() }
    }

    pub fn parsed_selection(&self) -> SkillSelection {
        SkillSelection { ids: self.selection.clone() }
    }
}

/// One recorded interaction: question, gold answers, and the policy's turns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFixture {
    pub case_id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    #[serde(default)]
    pub dataset: String,
    pub steps: Vec<CaseStep>,
}

impl CaseFixture {
    pub fn search_count(&self) -> usize {
        self.steps.iter().filter(|s| s.action == ActionKind::Search).count()
    }

    pub fn final_answer(&self) -> Option<&str> {
        self.steps.last().filter(|s| s.action == ActionKind::Answer).map(|s| s.payload.as_str())
    }

    /// Selection and action replies in call order, unchecked.
    pub fn replies(&self) -> Vec<String> {
        self.steps
            .iter()
            .flat_map(|s| [render_selection(&s.parsed_selection()), render_action(&s.parsed_action())])
            .collect()
    }

    /// A backend that replays this case and checks that each selection call
    /// follows the index and each action call follows the card context.
    pub fn scripted_backend(&self) -> ScriptedBackend {
        let entries = self
            .replies()
            .into_iter()
            .enumerate()
            .map(|(i, reply)| {
                let needle = if i % 2 == 0 { "SkillBank index" } else { "skill cards" };
                ScriptEntry::reply(reply).expecting(ContextPredicate::LastTurnContains(needle.into()))
            })
            .collect();
        ScriptedBackend::new(entries)
    }
}

pub fn cases() -> Vec<CaseFixture> {
    serde_json::from_str(CASES_JSON).expect("bundled cases are valid")
}

pub fn case(id: &str) -> Option<CaseFixture> {
    cases().into_iter().find(|c| c.case_id == id)
}

/// Published per-dataset EM rows with their reported macro average and gap
/// to the best row of the block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub datasets: Vec<String>,
    pub rows: Vec<ResultRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub block: String,
    pub method: String,
    pub em: Vec<f64>,
    pub avg: f64,
    /// 0 for the best row of the block.
    pub delta: f64,
}

impl ResultRow {
    pub fn labeled(&self, datasets: &[String]) -> Vec<(String, f64)> {
        datasets.iter().cloned().zip(self.em.iter().copied()).collect()
    }
}

pub fn main_results() -> ResultTable {
    serde_json::from_str(MAIN_RESULTS_JSON).expect("bundled result table is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_fixtures_load() {
        assert_eq!(bank_b0().len(), 6);
        assert_eq!(bank_b4().len(), 20);
        assert_eq!(updates().len(), 4);
        assert_eq!(cases().len(), 7);
        assert_eq!(main_results().rows.len(), 18);
        assert_eq!(corpus().len(), 21);
        assert_eq!(corpus_index().len(), 21);
        assert!(named_bank("b4").is_some());
        assert!(named_bank("B9").is_none());
    }

    #[test]
    fn case_skills_exist_in_b4() {
        let b4 = bank_b4();
        for c in cases() {
            for s in &c.steps {
                for id in s.selection.iter().chain(&s.skills) {
                    assert!(b4.contains(id), "{} uses unknown skill {id}", c.case_id);
                }
            }
        }
    }

    #[test]
    fn case_search_counts() {
        let counts: Vec<usize> = cases().iter().map(CaseFixture::search_count).collect();
        assert_eq!(counts, [3, 2, 2, 3, 2, 3, 2]);
    }
}
