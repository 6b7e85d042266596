//! Offline trajectory reward: `r = r_em + lambda_e * r_evi - lambda_d * r_dup`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{exact_match, normalize_answer};
use crate::environment::Passage;

/// Reward coefficients. The defaults are this crate's choice, not values
/// taken from any published configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub lambda_e: f64,
    pub lambda_d: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { lambda_e: 0.2, lambda_d: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_em: u8,
    pub r_evi: u8,
    pub r_dup: u32,
    pub lambda_e: f64,
    pub lambda_d: f64,
    pub total: f64,
}

/// Whether `needle` occurs in `haystack` on whole-token boundaries. Both are
/// expected to be normalized already.
pub fn contains_span(haystack: &str, needle: &str) -> bool {
    !needle.is_empty() && format!(" {haystack} ").contains(&format!(" {needle} "))
}

/// Scores one trajectory. `r_evi` is 1 iff some normalized gold answer
/// appears in some normalized retrieved passage (title and text); `r_dup`
/// counts queries whose normalized form repeats an earlier one.
pub fn score_reward<'a, S, Q, P>(
    prediction: Option<&str>,
    queries: &[Q],
    passages: P,
    golds: &[S],
    config: &RewardConfig,
) -> RewardBreakdown
where
    S: AsRef<str>,
    Q: AsRef<str>,
    P: IntoIterator<Item = &'a Passage>,
{
    let r_em = prediction.map_or(0, |p| exact_match(p, golds));
    let gold_norm: Vec<String> =
        golds.iter().map(|g| normalize_answer(g.as_ref())).filter(|g| !g.is_empty()).collect();
    let r_evi = u8::from(passages.into_iter().any(|p| {
        let text = normalize_answer(&format!("{} {}", p.title, p.text));
        gold_norm.iter().any(|g| contains_span(&text, g))
    }));
    let mut seen = HashSet::new();
    let r_dup = queries.iter().filter(|q| !seen.insert(normalize_answer(q.as_ref()))).count() as u32;
    let total = f64::from(r_em) + config.lambda_e * f64::from(r_evi) - config.lambda_d * f64::from(r_dup);
    RewardBreakdown { r_em, r_evi, r_dup, lambda_e: config.lambda_e, lambda_d: config.lambda_d, total }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn passage(id: &str, text: &str) -> Passage {
        Passage::new(id, "T", text, 1.0)
    }

    #[test]
    fn formula_examples() {
        let cfg = RewardConfig::default();
        let ev = [passage("a", "Conscription was introduced in 1964.")];
        let r = score_reward(Some("1964"), &["q1", "q2"], &ev, &["1964"], &cfg);
        assert_eq!((r.r_em, r.r_evi, r.r_dup), (1, 1, 0));
        assert!((r.total - 1.2).abs() < 1e-12);

        let r = score_reward(Some("1965"), &["q1", "Q1!"], &ev, &["1964"], &cfg);
        assert_eq!((r.r_em, r.r_evi, r.r_dup), (0, 1, 1));
        assert!((r.total - 0.1).abs() < 1e-12);

        let r = score_reward::<_, &str, _>(Some("x"), &[], &[], &["1964"], &cfg);
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn evidence_needs_token_boundary() {
        let ev = [passage("a", "In 19640 nothing happened")];
        let r = score_reward::<_, &str, _>(None, &[], &ev, &["1964"], &RewardConfig::default());
        assert_eq!(r.r_evi, 0);
        assert!(contains_span("died in london england", "london"));
        assert!(!contains_span("londoner", "london"));
        assert!(!contains_span("anything", ""));
    }
}
