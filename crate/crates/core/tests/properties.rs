use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Mutex;

use proptest::prelude::*;
use proptest::sample::subsequence;

use skillroute::environment::{
    tokenize, BackendError, ChatTurn, Document, LexicalIndex, Passage, PolicyBackend, Retriever, ScriptedBackend,
};
use skillroute::evaluation::{exact_match, score_reward, RewardConfig};
use skillroute::fixtures;
use skillroute::packer::{pack_stage1, rewrite_stage2, TargetKind, WeightConfig};
use skillroute::protocol::{
    parse_action_turn, parse_selection_turn, render_action, render_selection, ParsedAction, SkillSelection,
};
use skillroute::rollout::{reconstruct_prompts, run_rollout, RolloutConfig, RolloutStatus};
use skillroute::sampler::{
    build_manifest, profile_example, remove_overlap, sample_capped, ExampleProfile, LengthThresholds, RawExample,
    SampleConfig,
};
use skillroute::skillbank::{ablate, get_cards, render_index, AblationMode, SkillBankVersion};
use skillroute::trajectory::{
    dedup_keep_best, finalize_heuristic, validate_trajectory, Trajectory, CHECK_LEGAL_SKILLS, CHECK_ROUTE,
    CHECK_SUPPORT_PRIMARY,
};

fn skill_id() -> impl Strategy<Value = String> {
    "[a-z0-9]{1,6}(-[a-z0-9]{1,6}){0,3}"
}

fn payload() -> impl Strategy<Value = String> {
    "[^<>\\s]([^<>]{0,40}[^<>\\s])?"
}

fn sub_bank(b4: &SkillBankVersion, keep: &[bool]) -> SkillBankVersion {
    let cards = b4.cards().iter().zip(keep).filter(|(_, k)| **k).map(|(c, _)| c.clone()).collect();
    SkillBankVersion::new("sub", Some(b4.label.clone()), "", cards).unwrap()
}

/// Serves fixed replies and records every prompt.
struct Recorder {
    inner: ScriptedBackend,
    prompts: Mutex<Vec<Vec<ChatTurn>>>,
}

impl PolicyBackend for Recorder {
    fn complete(&self, history: &[ChatTurn], stop: &[&str]) -> Result<String, BackendError> {
        self.prompts.lock().unwrap().push(history.to_vec());
        self.inner.complete(history, stop)
    }
}

const WORDS: &[&str] = &[
    "emu", "war", "australia", "conscription", "mayor", "york", "dinkins", "washington", "leigh", "london",
    "dauphin", "philip", "pinatubo", "eruption", "tarzi", "kabul", "1964", "847",
];

/// Replies for `searches` search steps followed by an answer when `answer`.
fn scripted_replies(bank: &SkillBankVersion, picks: &[(usize, usize)], answer: bool) -> Vec<String> {
    let ids: Vec<&str> = bank.ids().collect();
    let mut out = Vec::new();
    for (i, &(skill, word)) in picks.iter().enumerate() {
        let skills = vec![ids[skill % ids.len()].to_string()];
        let payload = format!("{} {}", WORDS[word % WORDS.len()], i);
        let last = answer && i + 1 == picks.len();
        let action = if last { ParsedAction::answer(skills.clone(), payload) } else { ParsedAction::search(skills.clone(), payload) };
        out.push(render_selection(&SkillSelection { ids: skills }));
        out.push(render_action(&action));
    }
    out
}

fn rollout_trajectory(id: &str, picks: &[(usize, usize)], gold: &str) -> Trajectory {
    let bank = fixtures::bank_b4();
    let backend = ScriptedBackend::from_replies(scripted_replies(&bank, picks, true));
    let out = run_rollout("Which emu?", &bank, &backend, &fixtures::corpus_index(), &RolloutConfig::default()).unwrap();
    Trajectory::from_outcome(id, "d", &[gold.to_string()], &out)
}

fn bm25_oracle(docs: &[Document], query: &str, k: usize) -> Vec<(String, f64)> {
    let toks: Vec<Vec<String>> = docs.iter().map(|d| tokenize(&format!("{} {}", d.title, d.text))).collect();
    let n = docs.len() as f64;
    let avg = toks.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let mut terms = tokenize(query);
    terms.sort();
    terms.dedup();
    let mut scored: Vec<(String, f64)> = Vec::new();
    for (d, t) in docs.iter().zip(&toks) {
        let mut s = 0.0;
        for term in &terms {
            let tf = t.iter().filter(|x| *x == term).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let df = toks.iter().filter(|x| x.contains(term)).count() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            s += idf * tf * 2.2 / (tf + 1.2 * (0.25 + 0.75 * t.len() as f64 / avg));
        }
        if s > 0.0 {
            scored.push((d.doc_id.clone(), s));
        }
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Every shortest typed-word span of the draft, by brute force over all spans.
fn finalize_oracle(draft: &str, evidence: &str) -> String {
    let trimmed = draft.trim();
    let whole = trimmed.trim_end_matches(['.', ',', ';', ':', '!', '?']).trim_end();
    let bounded = |span: &str| {
        !span.is_empty()
            && evidence.match_indices(span).any(|(i, _)| {
                !evidence[..i].chars().last().is_some_and(char::is_alphanumeric)
                    && !evidence[i + span.len()..].chars().next().is_some_and(char::is_alphanumeric)
            })
    };
    if bounded(whole) {
        return whole.to_string();
    }
    let mut words = Vec::new();
    let mut start = None;
    for (i, c) in trimmed.char_indices().chain([(trimmed.len(), ' ')]) {
        match (c.is_alphanumeric() && i < trimmed.len(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                words.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    let stop = ["the", "of", "in", "and", "a", "was", "he", "she"];
    let typed = |w: &str| {
        w.chars().any(|c| c.is_ascii_digit())
            || (w.chars().next().is_some_and(char::is_uppercase) && !stop.contains(&w.to_lowercase().as_str()))
    };
    let mut best: Option<(usize, usize)> = None;
    for &(s, e0) in &words {
        for &(_, e) in words.iter().filter(|(ws, _)| *ws >= s) {
            let first = &trimmed[s..e0];
            let last_start = words.iter().find(|(_, we)| *we == e).unwrap().0;
            if !typed(first) || !typed(&trimmed[last_start..e]) || !bounded(&trimmed[s..e]) {
                continue;
            }
            if best.is_none_or(|(bs, be)| e - s < be - bs || (e - s == be - bs && s < bs)) {
                best = Some((s, e));
            }
        }
    }
    best.map_or_else(|| trimmed.to_string(), |(s, e)| trimmed[s..e].to_string())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn action_round_trip(skills in prop::collection::vec(skill_id(), 1..5), text in payload(), search in any::<bool>()) {
        let action = if search { ParsedAction::search(skills, text) } else { ParsedAction::answer(skills, text) };
        prop_assert_eq!(parse_action_turn(&render_action(&action)), Ok(action));
    }

    #[test]
    fn selection_round_trip(ids in prop::collection::vec(skill_id(), 1..6)) {
        let sel = SkillSelection { ids };
        prop_assert_eq!(parse_selection_turn(&render_selection(&sel)), Ok(sel));
    }

    #[test]
    fn parsed_actions_are_complete(text in "(<skill>|</skill>|<search>|</search>|<answer>|</answer>|[a-z| -]{0,8}){0,8}") {
        if let Ok(a) = parse_action_turn(&text) {
            prop_assert!(!a.skills.is_empty());
            prop_assert!(!a.payload.is_empty());
        }
    }

    #[test]
    fn index_lists_each_card_once(keep in prop::collection::vec(any::<bool>(), 20)) {
        let bank = sub_bank(&fixtures::bank_b4(), &keep);
        let index = render_index(&bank);
        let tokens: Vec<&str> = index.split(|c: char| !(c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-')).collect();
        for id in fixtures::bank_b4().ids() {
            let n = tokens.iter().filter(|t| **t == id).count();
            prop_assert_eq!(n, usize::from(bank.contains(id)), "{}", id);
        }
        let all: Vec<&str> = bank.ids().collect();
        let lookup = get_cards(&bank, &all);
        prop_assert!(lookup.unrecognized.is_empty());
        prop_assert_eq!(lookup.cards.len(), bank.len());

        let stripped = ablate(&bank, AblationMode::StripContent);
        let cats = |b: &SkillBankVersion| b.cards().iter().map(|c| (c.id.clone(), c.category)).collect::<Vec<_>>();
        prop_assert_eq!(cats(&stripped), cats(&bank));
    }

    #[test]
    fn bm25_matches_oracle(
        docs in prop::collection::vec(prop::collection::vec(0usize..12, 1..15), 1..8),
        query in prop::collection::vec(0usize..14, 1..5),
        k in 1usize..5,
    ) {
        let vocab = ["emu", "war", "bird", "army", "gun", "farm", "wheat", "west", "drought", "crop", "soldier", "field", "nope", "zilch"];
        let docs: Vec<Document> = docs.iter().enumerate().map(|(i, ws)| Document {
            doc_id: format!("d{i}"),
            title: vocab[ws[0]].to_string(),
            text: ws.iter().map(|w| vocab[*w]).collect::<Vec<_>>().join(" "),
        }).collect();
        let q = query.iter().map(|w| vocab[*w]).collect::<Vec<_>>().join(" ");
        let index = LexicalIndex::from_documents(docs.clone()).unwrap();
        let got = index.retrieve(&q, k).unwrap();
        let want = bm25_oracle(&docs, &q, k);
        prop_assert_eq!(got.len(), want.len());
        prop_assert!(got.len() <= k);
        for (g, (id, s)) in got.iter().zip(&want) {
            prop_assert!((g.score - s).abs() < 1e-9);
            if (g.score - s).abs() < 1e-9 && g.doc_id != *id {
                // Only legal when the scores tie within rounding.
                prop_assert!(want.iter().any(|(i, s2)| i == &g.doc_id && (s2 - s).abs() < 1e-9));
            }
        }
        prop_assert!(got.windows(2).all(|w| w[0].score >= w[1].score));
        prop_assert_eq!(index.retrieve(&q, k).unwrap(), got);
    }

    #[test]
    fn rollout_invariants(
        picks in prop::collection::vec((0usize..20, 0usize..18), 1..9),
        answer in any::<bool>(),
        budget in 1usize..6,
        top_k in 1usize..4,
    ) {
        let bank = fixtures::bank_b4();
        let backend = Recorder { inner: ScriptedBackend::from_replies(scripted_replies(&bank, &picks, answer)), prompts: Mutex::new(Vec::new()) };
        let cfg = RolloutConfig { budget, top_k, ..RolloutConfig::default() };
        let run = run_rollout("Which emu?", &bank, &backend, &fixtures::corpus_index(), &cfg);
        let out = match run {
            Ok(o) => o,
            // The script ran dry before the budget was spent.
            Err(_) => return Ok(()),
        };
        prop_assert!(out.search_count() <= budget);
        match &out.status {
            RolloutStatus::Answered { .. } => prop_assert!(!out.trace.last().unwrap().is_search()),
            RolloutStatus::BudgetExhausted => prop_assert_eq!(out.search_count(), budget),
            RolloutStatus::InvalidAction { .. } => prop_assert!(false, "fixture replies always parse"),
        }
        for s in &out.trace {
            prop_assert!(s.retrieved.as_ref().map_or(0, Vec::len) <= top_k);
        }
        let sent = backend.prompts.into_inner().unwrap();
        let rebuilt: Vec<Vec<ChatTurn>> = reconstruct_prompts("Which emu?", &out.trace, &bank, &cfg)
            .into_iter()
            .flat_map(|(a, b)| [a, b])
            .collect();
        prop_assert_eq!(rebuilt, sent);
    }

    #[test]
    fn finalize_idempotent_and_matches_oracle(
        draft in prop::collection::vec(prop::sample::select(vec!["The", "answer", "is", "London", "England", "1964", "of", "April", "30,", "in", "Kabul."]), 1..7),
        evidence in prop::collection::vec(prop::sample::select(vec!["She", "died", "in", "London", "on", "April", "30,", "1964", "near", "Kabul", "England."]), 1..12),
    ) {
        let draft = draft.join(" ");
        let evidence = evidence.join(" ");
        let p = Passage::new("d", "", evidence.clone(), 1.0);
        let once = finalize_heuristic(&draft, &[&p]);
        prop_assert_eq!(finalize_heuristic(&once, &[&p]), once.clone());
        prop_assert_eq!(once, finalize_oracle(&draft, &evidence));
    }

    #[test]
    fn validation_is_deterministic_and_accepted_rows_replay(
        picks in prop::collection::vec((0usize..20, 0usize..18), 1..5),
        gold_word in 0usize..18,
    ) {
        let bank = fixtures::bank_b4();
        let gold = format!("{} {}", WORDS[gold_word], picks.len() - 1);
        let t = rollout_trajectory("p", &picks, &gold);
        let a = validate_trajectory(&t, &bank);
        prop_assert_eq!(&a, &validate_trajectory(&t, &bank));
        if a.accepted {
            for s in &t.steps {
                prop_assert_eq!(parse_action_turn(&s.action_text).unwrap(), s.action.clone());
                prop_assert!(s.action.skills.iter().all(|id| bank.contains(id)));
            }
            prop_assert_eq!(exact_match(t.final_answer.as_deref().unwrap(), &t.gold_answers), 1);
        }
    }

    #[test]
    fn dedup_ignores_order_apart_from_ties(
        rows in prop::collection::vec((0usize..4, prop::collection::vec((0usize..20, 0usize..18), 1..4), any::<bool>()), 1..10),
        seed in any::<u64>(),
    ) {
        let bank = fixtures::bank_b4();
        let trajs: Vec<Trajectory> = rows.iter().map(|(id, picks, correct)| {
            let answer = format!("{} {}", WORDS[picks.last().unwrap().1 % WORDS.len()], picks.len() - 1);
            let gold = if *correct { answer } else { "nothing".to_string() };
            rollout_trajectory(&format!("e{id}"), picks, &gold)
        }).collect();
        let key = |ts: &[Trajectory]| ts.iter().map(|t| {
            let r = validate_trajectory(t, &bank);
            let route = r.passed(CHECK_ROUTE) && r.passed(CHECK_SUPPORT_PRIMARY);
            (t.example_id.clone(), r.accepted, t.status, r.passed(CHECK_LEGAL_SKILLS), route)
        }).collect::<Vec<_>>();
        let forward = dedup_keep_best(trajs.clone(), &bank);
        let mut shuffled = trajs;
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed as usize ^ i.wrapping_mul(2654435761)) % (i + 1));
        }
        let backward = dedup_keep_best(shuffled, &bank);
        prop_assert_eq!(key(&forward), key(&backward));
    }

    #[test]
    fn packing_preserves_actions(picks in prop::collection::vec((0usize..20, 0usize..18), 1..6)) {
        let bank = fixtures::bank_b4();
        let weights = WeightConfig::default();
        let t = rollout_trajectory("k", &picks, "x");
        let s1 = pack_stage1(&t, &bank, &weights, true).unwrap();
        let s2 = rewrite_stage2(&s1, &bank, &weights).unwrap();
        prop_assert!(s1.is_well_formed() && s2.is_well_formed());
        let actions = |r: &skillroute::packer::SupervisionRecord| r.targets.iter()
            .filter(|t| t.kind != TargetKind::Selection)
            .map(|t| r.messages[t.index].content.clone())
            .collect::<Vec<_>>();
        prop_assert_eq!(actions(&s1), actions(&s2));
        for (rec, w) in [(&s1, weights.stage1), (&s2, weights.stage2)] {
            for t in &rec.targets {
                prop_assert_eq!(t.weight, w.weight(t.kind));
            }
        }
    }

    #[test]
    fn reward_ignores_passage_order_and_duplicates(order in Just(()).prop_perturb(|_, mut rng| {
        let mut v: Vec<usize> = (0..6).map(|i| i % 3).collect();
        for i in (1..v.len()).rev() { v.swap(i, rng.random_range(0..=i)); }
        v
    })) {
        let ps = [
            Passage::new("a", "Vivien Leigh", "She died in London.", 1.0),
            Passage::new("b", "Emu War", "Western Australia.", 0.5),
            Passage::new("c", "Kabul", "Capital city.", 0.2),
        ];
        let cfg = RewardConfig::default();
        let base = score_reward(Some("London"), &["q", "q"], &ps, &["London"], &cfg);
        let shuffled: Vec<&Passage> = order.iter().map(|i| &ps[*i]).collect();
        prop_assert_eq!(score_reward(Some("London"), &["q", "q"], shuffled, &["London"], &cfg), base);
    }

    #[test]
    fn exact_match_is_symmetric(a in "[A-Za-z ,.!]{0,12}", b in "[A-Za-z ,.!]{0,12}") {
        prop_assert_eq!(exact_match(&a, &[&b]), exact_match(&b, &[&a]));
    }
}

fn pool(n: usize) -> Vec<RawExample> {
    let questions = [
        "Who wrote {}?", "When was {} founded?", "Which is older, {} or Rome?", "Is {} in Europe?",
        "How many people live in {}?", "What is {} also known as?", "Where was the mother of {} born?",
    ];
    (0..n)
        .map(|i| RawExample {
            id: format!("x{i}"),
            dataset: ["nq", "hotpotqa"][i % 2].into(),
            question: questions[i % questions.len()].replace("{}", ["Avalon", "Borodin", "Castile"][i % 3]),
            answers: vec![["Paris", "1905", "yes"][i % 3].into()],
            native_type: None,
            hop: (i % 2 == 1).then_some(2),
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sampling_is_order_invariant_and_avoids_eval(
        order in Just(()).prop_perturb(|_, mut rng| {
            let mut v: Vec<usize> = (0..300).collect();
            for i in (1..v.len()).rev() { v.swap(i, rng.random_range(0..=i)); }
            v
        }),
        eval_ids in subsequence((0..300).collect::<Vec<usize>>(), 0..20),
        seed in any::<u64>(),
    ) {
        let lengths = LengthThresholds::default();
        let raw = pool(300);
        let eval: Vec<RawExample> = eval_ids.iter().map(|&i| RawExample { question: format!("unrelated {i}"), ..raw[i].clone() }).collect();
        let (kept, removed) = remove_overlap(raw.clone(), &eval);
        prop_assert_eq!(removed.len(), eval.len());
        let profiles: Vec<ExampleProfile> = kept.iter().map(|r| profile_example(r, &lengths).unwrap()).collect();
        let by_id: HashMap<&str, usize> = profiles.iter().enumerate().map(|(i, p)| (p.example_id.as_str(), i)).collect();
        let permuted: Vec<ExampleProfile> = order.iter()
            .filter_map(|i| by_id.get(format!("x{i}").as_str()).map(|&j| profiles[j].clone()))
            .collect();
        let cfg = SampleConfig { target: 100, cap: 40, rare_threshold: 2, seed };
        let a = sample_capped(&profiles, &cfg).unwrap();
        let b = sample_capped(&permuted, &cfg).unwrap();
        prop_assert_eq!(&a.selected, &b.selected);
        let eval_set: HashSet<&str> = eval.iter().map(|e| e.id.as_str()).collect();
        prop_assert!(a.selected.iter().all(|s| !eval_set.contains(s.as_str())));

        let chosen: Vec<ExampleProfile> = a.selected.iter().map(|id| profiles[by_id[id.as_str()]].clone()).collect();
        let bank = fixtures::bank_b4();
        let manifest = build_manifest(&chosen, &[], 0.0, &bank, &lengths).unwrap();
        let mut per_id = BTreeMap::new();
        for e in &manifest {
            prop_assert!(e.candidate_primary_skills.iter().chain(&e.suggested_support_skills).all(|s| bank.contains(s)));
            *per_id.entry(&e.example_id).or_insert(0) += 1;
        }
        prop_assert!(per_id.values().all(|n| *n == 1));
    }
}
