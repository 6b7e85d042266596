//! Skill cards, bank versions, curriculum updates and bank ablations.
//!
//! A bank version is a closed, self-describing set of cards. Versions are
//! immutable once loaded; evolution produces a new version through
//! [`apply_update`], and ablations produce derived versions through
//! [`ablate`].

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Text rendered in place of the index when a bank has no cards.
pub const EMPTY_INDEX_SENTINEL: &str =
    "No skills are provided. Choose your own skill names and continue with search or answer actions.";

#[derive(Debug, Error)]
pub enum BankError {
    #[error("failed to read bank file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed bank document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("duplicate card id `{0}`")]
    DuplicateId(String),
    #[error("unknown skill category `{0}`")]
    UnknownCategory(String),
    #[error("invalid card id `{0}`: ids are lowercase kebab-case")]
    InvalidId(String),
    #[error("card `{0}` has an empty summary")]
    EmptySummary(String),
    #[error("bank `{0}` has no cards; only ablation banks may be empty")]
    EmptyBank(String),
    #[error("addition `{0}` already exists in the parent bank")]
    AdditionCollision(String),
    #[error("refinement targets `{0}`, which is not in the parent bank")]
    MissingRefinementTarget(String),
    #[error("refinement for `{id}` carries a card with id `{card_id}`")]
    RefinementIdMismatch { id: String, card_id: String },
    #[error("update is for parent `{expected}` but was applied to `{actual}`")]
    ParentMismatch { expected: String, actual: String },
    #[error("card `{0}` from the parent bank is missing in the child")]
    LineageViolation(String),
}

/// Functional group of a skill card.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    DirectLookup,
    BridgeChain,
    ComparisonJoin,
    GroundingVerification,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::DirectLookup,
        Category::BridgeChain,
        Category::ComparisonJoin,
        Category::GroundingVerification,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::DirectLookup => "direct-lookup",
            Category::BridgeChain => "bridge-chain",
            Category::ComparisonJoin => "comparison-join",
            Category::GroundingVerification => "grounding-verification",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = BankError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| BankError::UnknownCategory(s.to_string()))
    }
}

/// Returns true when `id` matches `[a-z0-9]+(-[a-z0-9]+)*`.
pub fn is_valid_skill_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .split('-')
            .all(|seg| !seg.is_empty() && seg.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit()))
}

/// One reusable search strategy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillCard {
    pub id: String,
    pub display_name: String,
    pub category: Category,
    pub summary: String,
    #[serde(default)]
    pub usage_notes: String,
    /// Verification skills that may support a turn but must not be the
    /// primary skill of a turn before the final answer.
    #[serde(default)]
    pub support_only: bool,
}

impl SkillCard {
    fn validate(&self, allow_blank_summary: bool) -> Result<(), BankError> {
        if !is_valid_skill_id(&self.id) {
            return Err(BankError::InvalidId(self.id.clone()));
        }
        if !allow_blank_summary && self.summary.trim().is_empty() {
            return Err(BankError::EmptySummary(self.id.clone()));
        }
        Ok(())
    }
}

// Wire form of a card: the category is kept as a string so an unknown value
// surfaces as `UnknownCategory` rather than a generic parse error.
#[derive(Debug, Deserialize)]
struct RawCard {
    id: String,
    #[serde(default)]
    display_name: String,
    category: String,
    #[serde(default)]
    summary: String,
    #[serde(default)]
    usage_notes: String,
    #[serde(default)]
    support_only: bool,
}

impl TryFrom<RawCard> for SkillCard {
    type Error = BankError;

    fn try_from(raw: RawCard) -> Result<Self, Self::Error> {
        Ok(SkillCard {
            category: raw.category.parse()?,
            id: raw.id,
            display_name: raw.display_name,
            summary: raw.summary,
            usage_notes: raw.usage_notes,
            support_only: raw.support_only,
        })
    }
}

#[derive(Debug, Deserialize)]
struct RawBank {
    label: String,
    #[serde(default)]
    parent_label: Option<String>,
    #[serde(default)]
    provenance: String,
    cards: Vec<RawCard>,
}

#[derive(Debug, Deserialize)]
struct RawRefinement {
    id: String,
    card: RawCard,
}

#[derive(Debug, Deserialize)]
struct RawUpdate {
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    parent_label: Option<String>,
    #[serde(default)]
    provenance: String,
    #[serde(default)]
    additions: Vec<RawCard>,
    #[serde(default)]
    refinements: Vec<RawRefinement>,
}

/// A labeled, validated set of cards. Card order is canonical.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkillBankVersion {
    pub label: String,
    pub parent_label: Option<String>,
    pub provenance: String,
    cards: Vec<SkillCard>,
}

/// Result of resolving requested skill ids against a bank.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CardLookup {
    pub cards: Vec<SkillCard>,
    pub unrecognized: Vec<String>,
}

/// Whether `label` names an ablation bank that is allowed to be empty.
pub fn is_empty_ablation_label(label: &str) -> bool {
    label == "empty" || label.ends_with("-empty")
}

impl SkillBankVersion {
    /// Builds a validated bank from cards.
    pub fn new(
        label: impl Into<String>,
        parent_label: Option<String>,
        provenance: impl Into<String>,
        cards: Vec<SkillCard>,
    ) -> Result<Self, BankError> {
        let bank = SkillBankVersion {
            label: label.into(),
            parent_label,
            provenance: provenance.into(),
            cards,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn from_json_str(text: &str) -> Result<Self, BankError> {
        let raw: RawBank = serde_json::from_str(text)?;
        let cards = raw
            .cards
            .into_iter()
            .map(SkillCard::try_from)
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(raw.label, raw.parent_label, raw.provenance, cards)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("bank serialization is infallible")
    }

    fn validate(&self) -> Result<(), BankError> {
        if self.cards.is_empty() && !is_empty_ablation_label(&self.label) {
            return Err(BankError::EmptyBank(self.label.clone()));
        }
        let stripped = self.label.ends_with("-strip-content");
        let mut seen = HashSet::new();
        for card in &self.cards {
            card.validate(stripped)?;
            if !seen.insert(card.id.as_str()) {
                return Err(BankError::DuplicateId(card.id.clone()));
            }
        }
        Ok(())
    }

    pub fn cards(&self) -> &[SkillCard] {
        &self.cards
    }

    pub fn len(&self) -> usize {
        self.cards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cards.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.cards.iter().map(|c| c.id.as_str())
    }

    pub fn card(&self, id: &str) -> Option<&SkillCard> {
        self.cards.iter().find(|c| c.id == id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.card(id).is_some()
    }

    pub fn count_in(&self, category: Category) -> usize {
        self.cards.iter().filter(|c| c.category == category).count()
    }
}

/// Reads and validates a bank document.
pub fn load_bank(path: impl AsRef<Path>) -> Result<SkillBankVersion, BankError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| BankError::Io {
        path: path.display().to_string(),
        source,
    })?;
    SkillBankVersion::from_json_str(&text)
}

/// Constrained add/refine update from one curriculum round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BankUpdate {
    pub label: Option<String>,
    pub parent_label: Option<String>,
    pub provenance: String,
    pub additions: Vec<SkillCard>,
    pub refinements: Vec<(String, SkillCard)>,
}

impl BankUpdate {
    pub fn empty() -> Self {
        BankUpdate {
            label: None,
            parent_label: None,
            provenance: String::new(),
            additions: Vec::new(),
            refinements: Vec::new(),
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self, BankError> {
        let raw: RawUpdate = serde_json::from_str(text)?;
        let additions = raw
            .additions
            .into_iter()
            .map(SkillCard::try_from)
            .collect::<Result<Vec<_>, _>>()?;
        let refinements = raw
            .refinements
            .into_iter()
            .map(|r| Ok((r.id, SkillCard::try_from(r.card)?)))
            .collect::<Result<Vec<_>, BankError>>()?;
        Ok(BankUpdate {
            label: raw.label,
            parent_label: raw.parent_label,
            provenance: raw.provenance,
            additions,
            refinements,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BankError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| BankError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    /// Checks the update against its parent without building the child.
    pub fn check_against(&self, parent: &SkillBankVersion) -> Result<(), BankError> {
        if let Some(expected) = &self.parent_label {
            if expected != &parent.label {
                return Err(BankError::ParentMismatch {
                    expected: expected.clone(),
                    actual: parent.label.clone(),
                });
            }
        }
        let mut added = HashSet::new();
        for card in &self.additions {
            card.validate(false)?;
            if parent.contains(&card.id) {
                return Err(BankError::AdditionCollision(card.id.clone()));
            }
            if !added.insert(card.id.as_str()) {
                return Err(BankError::DuplicateId(card.id.clone()));
            }
        }
        let mut refined = HashSet::new();
        for (id, card) in &self.refinements {
            if &card.id != id {
                return Err(BankError::RefinementIdMismatch {
                    id: id.clone(),
                    card_id: card.id.clone(),
                });
            }
            card.validate(false)?;
            if !parent.contains(id) {
                return Err(BankError::MissingRefinementTarget(id.clone()));
            }
            if !refined.insert(id.as_str()) {
                return Err(BankError::DuplicateId(id.clone()));
            }
        }
        Ok(())
    }
}

/// Builds the child bank: refined cards are replaced in place and additions
/// are appended in update order.
pub fn apply_update(
    parent: &SkillBankVersion,
    update: &BankUpdate,
    new_label: &str,
) -> Result<SkillBankVersion, BankError> {
    update.check_against(parent)?;
    let mut cards = parent.cards.clone();
    for (id, replacement) in &update.refinements {
        if let Some(slot) = cards.iter_mut().find(|c| &c.id == id) {
            *slot = replacement.clone();
        }
    }
    cards.extend(update.additions.iter().cloned());

    let mut provenance = update.provenance.clone();
    if !update.refinements.is_empty() {
        let ids: Vec<&str> = update.refinements.iter().map(|(id, _)| id.as_str()).collect();
        if !provenance.is_empty() {
            provenance.push(' ');
        }
        provenance.push_str(&format!("Refined: {}.", ids.join(", ")));
    }
    let child = SkillBankVersion::new(new_label, Some(parent.label.clone()), provenance, cards)?;
    verify_lineage(parent, &child)?;
    Ok(child)
}

/// Every parent card id must persist in the child (refined cards keep their id).
pub fn verify_lineage(parent: &SkillBankVersion, child: &SkillBankVersion) -> Result<(), BankError> {
    match parent.ids().find(|id| !child.contains(id)) {
        Some(missing) => Err(BankError::LineageViolation(missing.to_string())),
        None => Ok(()),
    }
}

/// Compact index shown to the policy: one line per card, id plus summary.
pub fn render_index(bank: &SkillBankVersion) -> String {
    if bank.is_empty() {
        return EMPTY_INDEX_SENTINEL.to_string();
    }
    let mut out = String::from("SkillBank index. Select one or more skill ids before each action.\n");
    for card in &bank.cards {
        let summary = one_line(&card.summary);
        if summary.is_empty() {
            out.push_str(&format!("- {}\n", card.id));
        } else {
            out.push_str(&format!("- {}: {}\n", card.id, summary));
        }
    }
    out.pop();
    out
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Resolves ids in request order. Repeated ids are resolved once; unknown
/// ids are reported, never dropped.
pub fn get_cards<S: AsRef<str>>(bank: &SkillBankVersion, ids: &[S]) -> CardLookup {
    let mut lookup = CardLookup::default();
    let mut seen = HashSet::new();
    for id in ids {
        let id = id.as_ref();
        if !seen.insert(id) {
            continue;
        }
        match bank.card(id) {
            Some(card) => lookup.cards.push(card.clone()),
            None => lookup.unrecognized.push(id.to_string()),
        }
    }
    lookup
}

/// Card context inserted after a selection turn.
pub fn render_cards(lookup: &CardLookup) -> String {
    let mut blocks = Vec::new();
    for card in &lookup.cards {
        let mut block = format!("[{}] {} ({})", card.id, card.display_name, card.category);
        let summary = one_line(&card.summary);
        if !summary.is_empty() {
            block.push_str("\nSummary: ");
            block.push_str(&summary);
        }
        let notes = one_line(&card.usage_notes);
        if !notes.is_empty() {
            block.push_str("\nUsage: ");
            block.push_str(&notes);
        }
        blocks.push(block);
    }
    if !lookup.unrecognized.is_empty() {
        blocks.push(format!(
            "Unknown skill ids (no card available): {}",
            lookup.unrecognized.join(", ")
        ));
    }
    if lookup.cards.is_empty() && lookup.unrecognized.is_empty() {
        blocks.push("No skill cards selected.".to_string());
    }
    format!("Selected skill cards:\n{}", blocks.join("\n\n"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "category")]
pub enum AblationMode {
    Empty,
    StripContent,
    RemoveCategory(Category),
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AblationMode::Empty => f.write_str("empty"),
            AblationMode::StripContent => f.write_str("strip-content"),
            AblationMode::RemoveCategory(c) => write!(f, "no-{c}"),
        }
    }
}

/// Derives an ablated bank. The source bank is untouched.
pub fn ablate(bank: &SkillBankVersion, mode: AblationMode) -> SkillBankVersion {
    let cards = match mode {
        AblationMode::Empty => Vec::new(),
        AblationMode::StripContent => bank
            .cards
            .iter()
            .map(|c| SkillCard {
                summary: String::new(),
                usage_notes: String::new(),
                ..c.clone()
            })
            .collect(),
        AblationMode::RemoveCategory(category) => bank
            .cards
            .iter()
            .filter(|c| c.category != category)
            .cloned()
            .collect(),
    };
    SkillBankVersion {
        label: format!("{}-{}", bank.label, mode),
        parent_label: Some(bank.label.clone()),
        provenance: format!("Ablation `{mode}` of {}.", bank.label),
        cards,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn card(id: &str, category: Category) -> SkillCard {
        SkillCard {
            id: id.into(),
            display_name: id.into(),
            category,
            summary: format!("summary of {id}"),
            usage_notes: String::new(),
            support_only: false,
        }
    }

    #[test]
    fn kebab_ids() {
        assert!(is_valid_skill_id("bridge-entity-search"));
        assert!(is_valid_skill_id("b4"));
        assert!(!is_valid_skill_id(""));
        assert!(!is_valid_skill_id("Bridge"));
        assert!(!is_valid_skill_id("a--b"));
        assert!(!is_valid_skill_id("-a"));
        assert!(!is_valid_skill_id("a_b"));
    }

    #[test]
    fn b4_category_counts() {
        let b4 = fixtures::bank_b4();
        assert_eq!(b4.len(), 20);
        assert_eq!(b4.count_in(Category::DirectLookup), 5);
        assert_eq!(b4.count_in(Category::BridgeChain), 7);
        assert_eq!(b4.count_in(Category::ComparisonJoin), 4);
        assert_eq!(b4.count_in(Category::GroundingVerification), 4);
        assert_eq!(fixtures::bank_b0().len(), 6);
    }

    #[test]
    fn support_only_membership() {
        let b4 = fixtures::bank_b4();
        let mut support: Vec<&str> = b4.cards().iter().filter(|c| c.support_only).map(|c| c.id.as_str()).collect();
        support.sort();
        assert_eq!(
            support,
            [
                "answer-grounding-check",
                "conflict-check",
                "multihop-yes-no-verification",
                "reconstructed-chain-verification",
                "verbatim-evidence-span"
            ]
        );
    }

    #[test]
    fn duplicate_ids_rejected() {
        let doc = r#"{"label":"X","cards":[
            {"id":"bridge-entity-search","display_name":"a","category":"bridge-chain","summary":"s"},
            {"id":"bridge-entity-search","display_name":"b","category":"bridge-chain","summary":"t"}]}"#;
        assert!(matches!(
            SkillBankVersion::from_json_str(doc),
            Err(BankError::DuplicateId(id)) if id == "bridge-entity-search"
        ));
    }

    #[test]
    fn unknown_category_and_empty_bank() {
        let doc = r#"{"label":"X","cards":[{"id":"a","category":"magic","summary":"s"}]}"#;
        assert!(matches!(SkillBankVersion::from_json_str(doc), Err(BankError::UnknownCategory(c)) if c == "magic"));
        let empty = r#"{"label":"B4","cards":[]}"#;
        assert!(matches!(SkillBankVersion::from_json_str(empty), Err(BankError::EmptyBank(_))));
        let ablation = r#"{"label":"B4-empty","cards":[]}"#;
        assert!(SkillBankVersion::from_json_str(ablation).unwrap().is_empty());
        let garbage = "{not json";
        assert!(matches!(SkillBankVersion::from_json_str(garbage), Err(BankError::Parse(_))));
    }

    #[test]
    fn load_bank_missing_file() {
        assert!(matches!(load_bank("/definitely/not/here.json"), Err(BankError::Io { .. })));
    }

    #[test]
    fn update_rules() {
        let parent = SkillBankVersion::new("P", None, "", vec![card("a", Category::DirectLookup)]).unwrap();
        let mut update = BankUpdate::empty();
        let same = apply_update(&parent, &update, "C").unwrap();
        assert_eq!(same.cards(), parent.cards());
        assert_eq!(same.label, "C");
        assert_eq!(same.parent_label.as_deref(), Some("P"));

        update.additions.push(card("a", Category::BridgeChain));
        assert!(matches!(apply_update(&parent, &update, "C"), Err(BankError::AdditionCollision(_))));

        update.additions.clear();
        update.refinements.push(("zzz".into(), card("zzz", Category::BridgeChain)));
        assert!(matches!(apply_update(&parent, &update, "C"), Err(BankError::MissingRefinementTarget(_))));

        update.refinements = vec![("a".into(), card("b", Category::BridgeChain))];
        assert!(matches!(apply_update(&parent, &update, "C"), Err(BankError::RefinementIdMismatch { .. })));

        let mut refined = card("a", Category::DirectLookup);
        refined.summary = "sharper".into();
        update.refinements = vec![("a".into(), refined)];
        update.additions = vec![card("b", Category::BridgeChain)];
        let child = apply_update(&parent, &update, "C").unwrap();
        assert_eq!(child.ids().collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(child.card("a").unwrap().summary, "sharper");
        assert!(child.provenance.contains("Refined: a."));
    }

    #[test]
    fn lineage_check() {
        let parent = SkillBankVersion::new("P", None, "", vec![card("a", Category::DirectLookup)]).unwrap();
        let child = SkillBankVersion::new("C", None, "", vec![card("b", Category::DirectLookup)]).unwrap();
        assert!(matches!(verify_lineage(&parent, &child), Err(BankError::LineageViolation(id)) if id == "a"));
    }

    #[test]
    fn index_rendering() {
        let b4 = fixtures::bank_b4();
        let index = render_index(&b4);
        assert_eq!(index, render_index(&b4));
        let lines: Vec<&str> = index.lines().filter(|l| l.starts_with("- ")).collect();
        assert_eq!(lines.len(), 20);
        assert!(!index.contains(&b4.cards()[0].usage_notes));
        let empty = ablate(&b4, AblationMode::Empty);
        assert_eq!(render_index(&empty), EMPTY_INDEX_SENTINEL);
    }

    #[test]
    fn lookup_examples() {
        let b4 = fixtures::bank_b4();
        let hit = get_cards(&b4, &["bridge-entity-search"]);
        assert!(hit.cards[0].summary.starts_with("Find one hidden intermediate entity"));
        assert!(hit.unrecognized.is_empty());

        let miss = get_cards(&b4, &["no-such-skill"]);
        assert!(miss.cards.is_empty());
        assert_eq!(miss.unrecognized, ["no-such-skill"]);

        let two = get_cards(&b4, &["conflict-check", "verbatim-evidence-span"]);
        assert_eq!(two.cards.iter().map(|c| c.id.as_str()).collect::<Vec<_>>(), ["conflict-check", "verbatim-evidence-span"]);
        assert!(two.cards.iter().all(|c| c.category == Category::GroundingVerification));
    }

    #[test]
    fn card_context_rendering() {
        let b4 = fixtures::bank_b4();
        let text = render_cards(&get_cards(&b4, &["bridge-entity-search", "search-wiki-entity"]));
        assert!(text.starts_with("Selected skill cards:\n[bridge-entity-search]"));
        assert!(text.contains("Unknown skill ids (no card available): search-wiki-entity"));
        let stripped = ablate(&b4, AblationMode::StripContent);
        let text = render_cards(&get_cards(&stripped, &["bridge-entity-search"]));
        assert!(!text.contains("Summary:"));
        assert!(render_cards(&CardLookup::default()).contains("No skill cards selected."));
    }

    #[test]
    fn ablation_examples() {
        let b4 = fixtures::bank_b4();
        assert_eq!(ablate(&b4, AblationMode::Empty).len(), 0);
        let stripped = ablate(&b4, AblationMode::StripContent);
        assert_eq!(stripped.len(), 20);
        assert!(stripped.cards().iter().all(|c| c.summary.is_empty() && c.usage_notes.is_empty()));
        let no_bridge = ablate(&b4, AblationMode::RemoveCategory(Category::BridgeChain));
        assert_eq!(no_bridge.len(), 20 - b4.count_in(Category::BridgeChain));
        assert_eq!(no_bridge.len(), 13);
        assert_eq!(b4.len(), 20, "source bank untouched");
        // Ablated banks round-trip through the document format.
        for bank in [&stripped, &no_bridge, &ablate(&b4, AblationMode::Empty)] {
            assert_eq!(&SkillBankVersion::from_json_str(&bank.to_json_string()).unwrap(), bank);
        }
    }
}
