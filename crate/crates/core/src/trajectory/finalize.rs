//! Shortening a draft answer to a span the evidence supports.

use crate::environment::{ChatTurn, Passage, PolicyBackend};
use crate::evaluation::{contains_span, normalize_answer};

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "as", "at", "by", "for", "from", "he", "her", "his", "in", "is", "it", "its", "of", "on", "or",
    "she", "that", "the", "their", "they", "this", "to", "was", "were", "which", "who", "with",
];

/// Whether `span` appears in `text` with no alphanumeric character directly
/// before or after it.
pub fn occurs_verbatim(text: &str, span: &str) -> bool {
    if span.is_empty() {
        return false;
    }
    text.match_indices(span).any(|(i, _)| {
        let before = text[..i].chars().next_back();
        let after = text[i + span.len()..].chars().next();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    })
}

fn in_evidence(evidence: &[&Passage], span: &str) -> bool {
    evidence.iter().any(|p| occurs_verbatim(&p.text, span) || occurs_verbatim(&p.title, span))
}

/// Word byte ranges: maximal runs of alphanumerics.
fn words(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, text.len()));
    }
    out
}

/// A word that can open or close an answer span: contains a digit, or is
/// capitalized and not a stopword.
fn is_typed_word(word: &str) -> bool {
    word.chars().any(|c| c.is_ascii_digit())
        || (word.chars().next().is_some_and(char::is_uppercase) && !STOPWORDS.contains(&word.to_lowercase().as_str()))
}

fn strip_trailing_punct(s: &str) -> &str {
    s.trim_end_matches(['.', ',', ';', ':', '!', '?']).trim_end()
}

/// Heuristic shortening:
/// the whole draft if the evidence contains it verbatim, else the shortest
/// span of the draft that starts and ends on a typed word and occurs
/// verbatim in the evidence (earliest on ties), else the trimmed draft.
pub fn finalize_heuristic(draft: &str, evidence: &[&Passage]) -> String {
    let trimmed = draft.trim();
    let whole = strip_trailing_punct(trimmed);
    if !whole.is_empty() && in_evidence(evidence, whole) {
        return whole.to_string();
    }
    let ws = words(trimmed);
    let mut best: Option<(usize, usize)> = None;
    for (i, &(s, _)) in ws.iter().enumerate() {
        if !is_typed_word(&trimmed[ws[i].0..ws[i].1]) {
            continue;
        }
        for &(js, e) in &ws[i..] {
            if !is_typed_word(&trimmed[js..e]) {
                continue;
            }
            let len = e - s;
            if best.is_some_and(|(bs, be)| be - bs <= len) {
                break;
            }
            if in_evidence(evidence, &trimmed[s..e]) {
                best = Some((s, e));
                break;
            }
        }
    }
    match best {
        Some((s, e)) => trimmed[s..e].to_string(),
        None => trimmed.to_string(),
    }
}

/// Asks `finalizer` for the shortest supported answer, accepting its reply
/// only when the evidence contains it; otherwise uses the heuristic.
pub fn finalize_answer(draft: &str, evidence: &[&Passage], finalizer: Option<&dyn PolicyBackend>) -> String {
    if let Some(backend) = finalizer {
        let docs: Vec<String> = evidence.iter().map(|p| format!("{}. {}", p.title, p.text)).collect();
        let prompt = format!(
            "Draft answer: {draft}\nEvidence:\n{}\n\
             Reply with only the shortest answer span that the evidence states explicitly.",
            docs.join("\n")
        );
        if let Ok(reply) = backend.complete(&[ChatTurn::user(prompt)], &[]) {
            let reply = strip_trailing_punct(reply.trim()).to_string();
            let norm = normalize_answer(&reply);
            let supported = evidence
                .iter()
                .any(|p| contains_span(&normalize_answer(&format!("{} {}", p.title, p.text)), &norm));
            if supported {
                return reply;
            }
        }
    }
    finalize_heuristic(draft, evidence)
}
