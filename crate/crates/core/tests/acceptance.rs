//! Acceptance criteria, one line each. Runs without the libtest harness so
//! the PASS/FAIL lines always reach stdout.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skillroute::environment::{BackendError, ChatTurn, Passage, PolicyBackend, Retriever, ScriptedBackend};
use skillroute::evaluation::{
    aggregate_block, compute_diagnostics, score_reward, DiagnosticTrace, DiagnosticsConfig, HeuristicJudge,
    RewardConfig,
};
use skillroute::fixtures;
use skillroute::packer::{pack_stage1, rewrite_stage2, TargetKind, WeightConfig};
use skillroute::protocol::{
    parse_action_turn, parse_selection_turn, render_action, render_selection, ParseError, ParsedAction,
    SkillSelection,
};
use skillroute::rollout::{replay_trace, run_rollout, InvalidTurn, RolloutConfig, RolloutStatus};
use skillroute::sampler::{profile_example, sample_capped, ExampleProfile, LengthThresholds, RawExample, SampleConfig, SignatureKey};
use skillroute::skillbank::{apply_update, get_cards, render_cards, render_index, SkillBankVersion};
use skillroute::trajectory::{
    build_step, dedup_keep_best, validate_trajectory, SupervisionMode, Trajectory, TrajectoryMetadata,
    TrajectoryStatus, CHECK_EXACT_MATCH, CHECK_HAS_SEARCH, CHECK_LEGAL_SKILLS, CHECK_ROUTE, CHECK_SUPPORT_PRIMARY,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);
type ErrorCheck = fn(&ParseError) -> bool;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn table_arithmetic() -> Outcome {
    let table = fixtures::main_results();
    ensure(table.rows.len() == 18, || format!("expected 18 rows, found {}", table.rows.len()))?;
    let mut blocks: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, row) in table.rows.iter().enumerate() {
        blocks.entry(row.block.as_str()).or_default().push(i);
    }
    let mut worst = (0.0f64, 0.0f64);
    for idx in blocks.values() {
        let rows: Vec<Vec<(String, f64)>> = idx.iter().map(|&i| table.rows[i].labeled(&table.datasets)).collect();
        let results = aggregate_block(&rows).map_err(|e| e.to_string())?;
        for (&i, r) in idx.iter().zip(&results) {
            let row = &table.rows[i];
            let (da, dd) = ((r.macro_avg - row.avg).abs(), (r.delta_from_best - row.delta).abs());
            ensure(da <= 0.005, || format!("{} {}: avg {} vs {}", row.block, row.method, r.macro_avg, row.avg))?;
            ensure(dd <= 0.01, || format!("{} {}: delta {} vs {}", row.block, row.method, r.delta_from_best, row.delta))?;
            worst = (worst.0.max(da), worst.1.max(dd));
        }
    }
    Ok(format!("18 rows, max |avg err| {:.4}, max |delta err| {:.4}", worst.0, worst.1))
}

fn curriculum() -> Outcome {
    let mut bank = fixtures::bank_b0();
    let mut counts = vec![bank.len()];
    for (i, update) in fixtures::updates().iter().enumerate() {
        bank = apply_update(&bank, update, &format!("B{}", i + 1)).map_err(|e| e.to_string())?;
        counts.push(bank.len());
    }
    ensure(counts == [6, 11, 14, 17, 20], || format!("card counts {counts:?}"))?;
    let got: BTreeSet<&str> = bank.ids().collect();
    let b4 = fixtures::bank_b4();
    let want: BTreeSet<&str> = b4.ids().collect();
    ensure(got == want, || format!("id sets differ: {:?}", got.symmetric_difference(&want).collect::<Vec<_>>()))?;
    Ok(format!("counts {counts:?}, id set equals B4"))
}

fn case_replay() -> Outcome {
    let expected = [
        ("case-1", "1964"),
        ("case-2", "David Dinkins"),
        ("case-3", "April 30, 1789"),
        ("case-4", "London"),
        ("case-5", "Louis, Grand Dauphin"),
        ("case-6", "Abdul Wahab Khan Tarzi"),
        ("case-7", "847"),
    ];
    let bank = fixtures::bank_b4();
    let index = fixtures::corpus_index();
    let cfg = RolloutConfig::default();
    let mut searches = Vec::new();
    for (id, answer) in expected {
        let case = fixtures::case(id).ok_or_else(|| format!("{id} missing"))?;
        let backend = case.scripted_backend();
        let out = run_rollout(&case.question, &bank, &backend, &index, &cfg).map_err(|e| format!("{id}: {e}"))?;
        ensure(out.answer() == Some(answer), || format!("{id}: status {:?}", out.status))?;
        ensure(out.search_count() == case.search_count(), || {
            format!("{id}: {} searches, fixture has {}", out.search_count(), case.search_count())
        })?;
        let replay = replay_trace(&case, &index, cfg.top_k).map_err(|e| e.to_string())?;
        ensure(replay.all_match, || format!("{id}: retrieval drifted from the recorded doc ids"))?;
        searches.push(out.search_count());
    }
    Ok(format!("7/7 answered, search counts {searches:?}"))
}

const ID_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
const PAYLOAD_CHARS: &[char] = &[
    'a', 'Z', 'q', '7', ' ', ' ', ',', '.', '|', '"', '\'', '(', ')', '-', ':', '?', '&', '<', '>', '/', 'é', 'ß', '北',
    '\n', '\t', '%',
];

fn random_id(rng: &mut ChaCha8Rng) -> String {
    let segments = rng.random_range(1..=4);
    (0..segments)
        .map(|_| {
            let len = rng.random_range(1..=7);
            (0..len).map(|_| *ID_ALPHABET.choose(rng).unwrap() as char).collect::<String>()
        })
        .collect::<Vec<_>>()
        .join("-")
}

fn random_payload(rng: &mut ChaCha8Rng) -> String {
    loop {
        let len = rng.random_range(1..=60);
        let s: String = (0..len).map(|_| *PAYLOAD_CHARS.choose(rng).unwrap()).collect();
        let s = s.trim().to_string();
        let tag_like = ["select_skill>", "skill>", "search>", "answer>", "information>"]
            .iter()
            .any(|t| s.contains(&format!("<{t}")) || s.contains(&format!("</{t}")));
        if !s.is_empty() && !tag_like {
            return s;
        }
    }
}

fn protocol_fuzz() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let skills: Vec<String> = (0..rng.random_range(1..=4)).map(|_| random_id(&mut rng)).collect();
        let payload = random_payload(&mut rng);
        let action = if rng.random_bool(0.5) {
            ParsedAction::search(skills.clone(), payload)
        } else {
            ParsedAction::answer(skills.clone(), payload)
        };
        if parse_action_turn(&render_action(&action)).as_ref() != Ok(&action) {
            mismatches += 1;
        }
        let selection = SkillSelection { ids: skills };
        if parse_selection_turn(&render_selection(&selection)).as_ref() != Ok(&selection) {
            mismatches += 1;
        }
    }
    ensure(mismatches == 0, || format!("{mismatches} round-trip mismatches"))?;

    let malformed: [(&str, ErrorCheck); 5] = [
        ("</search>", |e| matches!(e, ParseError::MalformedTag(_))),
        ("</answer>", |e| matches!(e, ParseError::MalformedTag(_))),
        ("<skill>bridge-entity-search</skill>\n</search>", |e| matches!(e, ParseError::MalformedTag(_))),
        (
            "<skill>bridge-entity-search</skill>\n<search>Vivien Leigh death place</search>\n<answer>London</answer>",
            |e| matches!(e, ParseError::MultipleActions),
        ),
        ("<search>Vivien Leigh death place</search>", |e| matches!(e, ParseError::MissingSkillTag)),
    ];
    for (text, designated) in malformed {
        match parse_action_turn(text) {
            Err(e) if designated(&e) => {}
            other => return Err(format!("{text:?} gave {other:?}")),
        }
    }
    let backend = ScriptedBackend::from_replies(["<select_skill>bridge-entity-search</select_skill>", "</search>"]);
    let out = run_rollout("q", &fixtures::bank_b4(), &backend, &fixtures::corpus_index(), &RolloutConfig::default())
        .map_err(|e| e.to_string())?;
    ensure(
        matches!(
            out.status,
            RolloutStatus::InvalidAction { turn: InvalidTurn::Action, error: ParseError::MalformedTag(_), .. }
        ),
        || format!("bare close tag rollout ended {:?}", out.status),
    )?;
    Ok("10000 actions + 10000 selections round-trip, 5 malformed strings rejected".into())
}

struct Variant {
    correct: bool,
    searches: bool,
    legal: bool,
    support_primary: bool,
}

fn synthetic_trajectory(i: usize, v: &Variant, bank: &SkillBankVersion) -> Trajectory {
    let index = fixtures::corpus_index();
    let cfg = RolloutConfig::default();
    let mut steps = Vec::new();
    let gold = "1964";
    if v.searches {
        let primary = if v.support_primary { "conflict-check" } else { "bridge-entity-search" };
        let mut skills = vec![primary.to_string()];
        if !v.legal {
            skills.push("invented-skill".into());
        }
        let query = "conscription introduced Australia";
        let passages = index.retrieve(query, cfg.top_k).unwrap();
        let obs = cfg.observation(&passages);
        steps.push(build_step(
            bank,
            SkillSelection { ids: skills.clone() },
            ParsedAction::search(skills, query),
            Some(passages),
            Some(obs),
            None,
        ));
    }
    let mut skills = vec!["verbatim-evidence-span".to_string()];
    if !v.legal && !v.searches {
        skills.push("invented-skill".into());
    }
    let answer = if v.correct { gold } else { "1966" };
    steps.push(build_step(
        bank,
        SkillSelection { ids: skills.clone() },
        ParsedAction::answer(skills, answer),
        None,
        None,
        None,
    ));
    Trajectory {
        example_id: format!("v{i:02}"),
        dataset: "synthetic".into(),
        question: "When was conscription introduced in Australia?".into(),
        gold_answers: vec![gold.into()],
        steps,
        final_answer: Some(answer.into()),
        status: TrajectoryStatus::Answered,
        metadata: TrajectoryMetadata::default(),
        supervision_mode: SupervisionMode::Full,
        candidate_skills: Vec::new(),
        source: "synthetic".into(),
        errors: Vec::new(),
    }
}

fn validation_suite() -> Outcome {
    let bank = fixtures::bank_b4();
    let mut variants = Vec::new();
    for correct in [true, false] {
        for searches in [true, false] {
            for legal in [true, false] {
                variants.push(Variant { correct, searches, legal, support_primary: false });
            }
        }
    }
    for correct in [true, false] {
        for legal in [true, false] {
            variants.push(Variant { correct, searches: true, legal, support_primary: true });
        }
    }
    ensure(variants.len() == 12, || "set size".into())?;
    let mut accepted = 0;
    for (i, v) in variants.iter().enumerate() {
        let t = synthetic_trajectory(i, v, &bank);
        let report = validate_trajectory(&t, &bank);
        let mut want = BTreeSet::new();
        if !v.correct {
            want.insert(CHECK_EXACT_MATCH);
        }
        if !v.searches {
            want.insert(CHECK_HAS_SEARCH);
        }
        if !v.legal {
            want.insert(CHECK_LEGAL_SKILLS);
        }
        if v.support_primary {
            want.insert(CHECK_SUPPORT_PRIMARY);
        }
        let got: BTreeSet<&str> = report.failed_checks().into_iter().collect();
        ensure(got == want, || format!("trajectory {i}: failed {got:?}, expected {want:?}"))?;
        ensure(report.accepted == want.is_empty(), || format!("trajectory {i}: accepted flag"))?;
        ensure(report.passed(CHECK_ROUTE), || format!("trajectory {i}: route check"))?;
        accepted += usize::from(report.accepted);
    }
    ensure(accepted == 1, || format!("{accepted} accepted, expected 1"))?;

    // Quality ordering over duplicates of the same example.
    let good = |id: &str| Trajectory { example_id: id.into(), ..synthetic_trajectory(0, &variants[0], &bank) };
    let wrong = |id: &str| Trajectory { example_id: id.into(), ..synthetic_trajectory(4, &variants[4], &bank) };
    let wrong_illegal = |id: &str| Trajectory { example_id: id.into(), ..synthetic_trajectory(5, &variants[5], &bank) };
    let mut exhausted = good("y");
    exhausted.steps.pop();
    exhausted.final_answer = None;
    exhausted.status = TrajectoryStatus::BudgetExhausted;
    let mut second_good = good("x");
    second_good.source = "second".into();
    let rows = vec![wrong("x"), good("x"), second_good, exhausted, wrong("y"), wrong_illegal("z"), wrong("z"), good("w")];
    let kept = dedup_keep_best(rows, &bank);
    let summary: Vec<(String, Option<String>, String)> =
        kept.iter().map(|t| (t.example_id.clone(), t.final_answer.clone(), t.source.clone())).collect();
    let want = vec![
        ("w".to_string(), Some("1964".to_string()), "synthetic".to_string()),
        ("x".into(), Some("1964".into()), "synthetic".into()),
        ("y".into(), Some("1966".into()), "synthetic".into()),
        ("z".into(), Some("1966".into()), "synthetic".into()),
    ];
    ensure(summary == want, || format!("dedup kept {summary:?}"))?;
    ensure(validate_trajectory(&kept[3], &bank).passed(CHECK_LEGAL_SKILLS), || "z kept the illegal row".into())?;
    Ok(format!("12 trajectories classified, {accepted} accepted; dedup kept 4 of 8 rows as ordered"))
}

/// Replays fixed replies and records every prompt it receives.
struct RecordingBackend {
    inner: ScriptedBackend,
    prompts: Mutex<Vec<Vec<ChatTurn>>>,
}

impl PolicyBackend for RecordingBackend {
    fn complete(&self, history: &[ChatTurn], stop: &[&str]) -> Result<String, BackendError> {
        self.prompts.lock().unwrap().push(history.to_vec());
        self.inner.complete(history, stop)
    }
}

const QUERY_WORDS: &[&str] = &[
    "emu", "war", "conscription", "australia", "mayor", "new", "york", "washington", "inauguration", "vivien",
    "leigh", "death", "philip", "dauphin", "eruption", "pinatubo", "volcano", "\"The Things They Carried\"", "1964",
];

fn packer_structure() -> Outcome {
    let bank = fixtures::bank_b4();
    let weights = WeightConfig::default();
    let cfg = RolloutConfig::default();
    let index = fixtures::corpus_index();
    let primaries: Vec<&str> = bank.cards().iter().filter(|c| !c.support_only).map(|c| c.id.as_str()).collect();
    let all: Vec<&str> = bank.ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut compared = 0;
    for n in 0..50 {
        let k = rng.random_range(1..=5);
        let mut replies = Vec::new();
        for t in 0..k {
            let answer = t + 1 == k;
            let mut skills = vec![if answer { *all.choose(&mut rng).unwrap() } else { *primaries.choose(&mut rng).unwrap() }];
            for _ in 0..rng.random_range(0..=2) {
                let s = *all.choose(&mut rng).unwrap();
                if !skills.contains(&s) {
                    skills.push(s);
                }
            }
            let skills: Vec<String> = skills.into_iter().map(String::from).collect();
            let n_words = rng.random_range(1..=4);
            let words: Vec<&str> = QUERY_WORDS.choose_multiple(&mut rng, n_words).copied().collect();
            let payload = format!("{} {t}", words.join(" "));
            let action = if answer { ParsedAction::answer(skills.clone(), payload) } else { ParsedAction::search(skills.clone(), payload) };
            replies.push(render_selection(&SkillSelection { ids: skills }));
            replies.push(render_action(&action));
        }
        let backend = RecordingBackend { inner: ScriptedBackend::from_replies(replies), prompts: Mutex::new(Vec::new()) };
        let question = format!("Randomized question number {n}?");
        let out = run_rollout(&question, &bank, &backend, &index, &cfg).map_err(|e| e.to_string())?;
        ensure(out.trace.len() == k, || format!("rollout {n} stopped after {} steps", out.trace.len()))?;
        let traj = Trajectory::from_outcome(&format!("r{n}"), "synthetic", &[], &out);
        let s1 = pack_stage1(&traj, &bank, &weights, true).map_err(|e| e.to_string())?;
        ensure(s1.supervised().count() == k, || format!("record {n}: stage-I targets"))?;
        for t in s1.supervised() {
            let w = match t.kind {
                TargetKind::AnswerAction => 2.5,
                TargetKind::SearchAction => 0.8,
                _ => 1.0,
            };
            ensure(t.weight == w, || format!("record {n}: stage-I weight {} for {:?}", t.weight, t.kind))?;
        }
        let s2 = rewrite_stage2(&s1, &bank, &weights).map_err(|e| e.to_string())?;
        ensure(s2.supervised().count() == 2 * k, || format!("record {n}: {} stage-II targets", s2.supervised().count()))?;
        let card_turns = s2.messages.iter().filter(|m| m.content.starts_with("Selected skill cards:")).count();
        ensure(card_turns == k, || format!("record {n}: {card_turns} card turns for {k} actions"))?;
        for t in s2.supervised() {
            let w = match t.kind {
                TargetKind::AnswerAction => 2.0,
                TargetKind::SearchAction => 0.8,
                TargetKind::Selection => 1.0,
                TargetKind::Other => 1.0,
            };
            ensure(t.weight == w, || format!("record {n}: stage-II weight {} for {:?}", t.weight, t.kind))?;
        }

        // Every supervised turn's context must equal the prompt the policy saw.
        let prompts = backend.prompts.into_inner().unwrap();
        ensure(prompts.len() == 2 * k, || format!("rollout {n}: {} calls", prompts.len()))?;
        for (t, prompt) in s2.supervised().zip(&prompts) {
            ensure(s2.messages[..t.index] == prompt[..], || format!("record {n}: context of turn {} differs", t.index))?;
            compared += 1;
        }
        // Independent construction of the same contexts from the rendering primitives.
        let mut ctx = vec![
            ChatTurn::system(cfg.system_prompt.clone()),
            ChatTurn::user(format!("Question: {question}")),
            ChatTurn::user(render_index(&bank)),
        ];
        let mut contexts = Vec::new();
        for step in &out.trace {
            contexts.push(ctx.clone());
            ctx.push(ChatTurn::assistant(render_selection(&SkillSelection { ids: step.action.skills.clone() })));
            ctx.push(ChatTurn::user(render_cards(&get_cards(&bank, &step.action.skills))));
            contexts.push(ctx.clone());
            ctx.push(ChatTurn::assistant(render_action(&step.action)));
            if let Some(p) = &step.retrieved {
                let obs = if p.is_empty() { cfg.observation(&[]) } else { cfg.observation(p) };
                ctx.push(ChatTurn::user(obs));
                ctx.push(ChatTurn::user(render_index(&bank)));
            }
        }
        ensure(ctx == s2.messages, || format!("record {n}: full message list differs from oracle"))?;
        for (t, want) in s2.supervised().zip(&contexts) {
            ensure(s2.messages[..t.index] == want[..], || format!("record {n}: oracle context at {}", t.index))?;
        }
    }
    Ok(format!("50 randomized records, {compared} contexts byte-identical, weights 2.5/0.8/1.0 and 2.0/0.8/1.0"))
}

fn oracle_norm(s: &str) -> Vec<String> {
    let lower = s.to_lowercase();
    let cleaned: String = lower.chars().map(|c| if c.is_alphanumeric() { c } else { ' ' }).collect();
    cleaned.split_whitespace().filter(|w| !["a", "an", "the"].contains(w)).map(String::from).collect()
}

fn oracle_jaccard(a: &str, b: &str) -> f64 {
    let a: HashSet<String> = oracle_norm(a).into_iter().collect();
    let b: HashSet<String> = oracle_norm(b).into_iter().collect();
    let inter = a.iter().filter(|x| b.contains(*x)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn diagnostics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let questions = [
        "When was conscription introduced in the country having emus during the war?",
        "Who was the first African American mayor of New York City?",
        "Where was the place of death of Suzanne Farrington's mother?",
        "Who died first, Olaf Everson or Abdul Wahab Khan Tarzi?",
        "What was the death toll of the second largest volcanic eruption?",
    ];
    let mut traces = Vec::new();
    for _ in 0..25 {
        let question = questions.choose(&mut rng).unwrap().to_string();
        let words: Vec<&str> = question.split_whitespace().collect();
        let mut queries = Vec::new();
        for _ in 0..rng.random_range(0..=5) {
            let q = match rng.random_range(0..4) {
                0 => question.clone(),
                1 => question.to_uppercase().replace('?', ""),
                2 => {
                    let mut w = words.clone();
                    w.shuffle(&mut rng);
                    w[..rng.random_range(1..=w.len())].join(" ")
                }
                _ => QUERY_WORDS.choose_multiple(&mut rng, 2).copied().collect::<Vec<_>>().join(" "),
            };
            queries.push(q);
        }
        let gold = "London".to_string();
        let prediction = match rng.random_range(0..4) {
            0 => None,
            1 => Some("the london.".to_string()),
            2 => Some("Paris".to_string()),
            _ => Some("London".to_string()),
        };
        traces.push(DiagnosticTrace { question, queries, prediction, gold_answers: vec![gold] });
    }
    let cfg = DiagnosticsConfig::default();
    let got = compute_diagnostics(&traces, &cfg, &HeuristicJudge::default());

    let (mut searched, mut copies, mut total, mut atomic, mut early) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for t in &traces {
        if let Some(first) = t.queries.first() {
            searched += 1;
            if oracle_jaccard(first, &t.question) >= 0.8 {
                copies += 1;
            }
        }
        for q in &t.queries {
            total += 1;
            if oracle_norm(q).len() < oracle_norm(&t.question).len() && oracle_jaccard(q, &t.question) < 0.8 {
                atomic += 1;
            }
        }
        let correct = t.prediction.as_ref().is_some_and(|p| {
            let p = oracle_norm(p);
            !p.is_empty() && t.gold_answers.iter().any(|g| oracle_norm(g) == p)
        });
        if correct && t.queries.len() <= 3 {
            early += 1;
        }
    }
    let pct = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
    let want = (pct(copies, searched), pct(atomic, total), total as f64 / traces.len() as f64, pct(early, traces.len()));
    let have = (got.first_query_copy_rate, got.atomic_hop_rate, got.avg_searches, got.correct_at_3);
    ensure(have == want, || format!("diagnostics {have:?}, oracle {want:?}"))?;

    // (r_em, r_evi, r_dup) and totals under (0.2, 0.1), (0.5, 0.25), (0, 0).
    let table: [((u8, u8, u32), [f64; 3]); 10] = [
        ((1, 1, 0), [1.2, 1.5, 1.0]),
        ((1, 0, 0), [1.0, 1.0, 1.0]),
        ((0, 1, 0), [0.2, 0.5, 0.0]),
        ((0, 0, 0), [0.0, 0.0, 0.0]),
        ((1, 1, 1), [1.1, 1.25, 1.0]),
        ((0, 0, 1), [-0.1, -0.25, 0.0]),
        ((1, 0, 2), [0.8, 0.5, 1.0]),
        ((0, 1, 2), [0.0, 0.0, 0.0]),
        ((1, 1, 3), [0.9, 0.75, 1.0]),
        ((0, 0, 3), [-0.3, -0.75, 0.0]),
    ];
    let settings = [RewardConfig { lambda_e: 0.2, lambda_d: 0.1 }, RewardConfig { lambda_e: 0.5, lambda_d: 0.25 }, RewardConfig { lambda_e: 0.0, lambda_d: 0.0 }];
    let hit = Passage::new("d1", "Vivien Leigh", "Leigh died at her home in London in 1967.", 1.0);
    let miss = Passage::new("d2", "Emu War", "The Emu War took place in Western Australia.", 1.0);
    for ((em, evi, dup), totals) in table {
        let prediction = if em == 1 { "london" } else { "Paris" };
        let mut queries = vec!["vivien leigh death".to_string(), "leigh residence".to_string()];
        queries.extend((0..dup).map(|_| "Vivien Leigh, death!".to_string()));
        let passages = if evi == 1 { vec![&miss, &hit] } else { vec![&miss] };
        for (cfg, want) in settings.iter().zip(totals) {
            let r = score_reward(Some(prediction), &queries, passages.iter().copied(), &["London"], cfg);
            ensure((r.r_em, r.r_evi, r.r_dup) == (em, evi, dup), || format!("components {:?}", (r.r_em, r.r_evi, r.r_dup)))?;
            ensure((r.total - want).abs() < 1e-9, || format!("{:?} under {cfg:?}: {} vs {want}", (em, evi, dup), r.total))?;
        }
    }
    Ok(format!(
        "25 traces match oracle (copy {:.1}%, atomic {:.1}%, avg {:.2}, correct@3 {:.1}%); 30 reward totals match",
        want.0, want.1, want.2, want.3
    ))
}

const TEMPLATES: &[(&str, &str, &str)] = &[
    ("Who wrote {E}?", "{E} Author", "bridge"),
    ("When was {E} founded?", "1905", "single"),
    ("Where was {E} born?", "Paris", "single"),
    ("How many people live in {E}?", "42,000", "single"),
    ("Which is older, {E} or {F}?", "{E}", "comparison"),
    ("Is {E} in {F}?", "yes", "comparison"),
    ("What is the capital of the country where {E} was born?", "Rome", "bridge"),
    ("Who is the father of the director of {E}?", "{F} Smith", "bridge"),
    ("What is {E} also known as?", "The Big Apple", "single"),
    ("why did the {e} collapse in the late period of the dynasty", "economic decline of the empire", "single"),
    ("{E} released which album in March?", "March 3, 1999", "single"),
    ("Did {E} and {F} both play for the same team?", "no", "comparison"),
];
const NAMES: &[&str] = &["Avalon", "Borodin", "Castile", "Dunmore", "Elbrus", "Fontaine", "Galway", "Hartwell", "Ilium", "Jurgen"];

fn synthetic_pool(rng: &mut ChaCha8Rng, n: usize, datasets: &[&str]) -> Vec<RawExample> {
    (0..n)
        .map(|i| {
            let (q, a, ty) = TEMPLATES.choose(rng).unwrap();
            let e = NAMES.choose(rng).unwrap();
            let f = NAMES.choose(rng).unwrap();
            let dataset = *datasets.choose(rng).unwrap();
            let fill = |s: &str| s.replace("{E}", e).replace("{F}", f).replace("{e}", &e.to_lowercase());
            let multi = dataset != "nq";
            RawExample {
                id: format!("{dataset}-{i:05}"),
                dataset: dataset.to_string(),
                question: fill(q),
                answers: vec![fill(a)],
                native_type: multi.then(|| ty.to_string()),
                hop: multi.then(|| if *ty == "bridge" { rng.random_range(2..=4) } else { rng.random_range(1..=2) }),
            }
        })
        .collect()
}

fn sampler_determinism() -> Outcome {
    let lengths = LengthThresholds::default();
    let mut rng = ChaCha8Rng::seed_from_u64(10_000);
    let mut raw = synthetic_pool(&mut rng, 10_000, &["hotpotqa", "2wiki", "musique", "nq", "triviaqa"]);
    // A few singleton and near-singleton signatures.
    for (i, q) in ["Why is the sky blue?", "How do bees fly?", "Whose portrait hangs in Versailles?"].iter().enumerate() {
        raw.push(RawExample { id: format!("rare-{i}"), dataset: "bamboogle".into(), question: q.to_string(), answers: vec!["x".into()], native_type: None, hop: None });
    }
    let profiles: Vec<ExampleProfile> = raw.iter().map(|r| profile_example(r, &lengths)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let cfg = SampleConfig { target: 3000, cap: 120, rare_threshold: 3, seed: 11 };
    let a = sample_capped(&profiles, &cfg).map_err(|e| e.to_string())?;
    let b = sample_capped(&profiles, &cfg).map_err(|e| e.to_string())?;
    let mut shuffled = profiles.clone();
    shuffled.shuffle(&mut rng);
    let c = sample_capped(&shuffled, &cfg).map_err(|e| e.to_string())?;
    ensure(a == b && a.selected == c.selected, || "selection not reproducible".into())?;
    ensure(a.selected.len() == cfg.target, || format!("selected {}", a.selected.len()))?;

    let chosen: HashSet<&str> = a.selected.iter().map(String::as_str).collect();
    let mut groups: BTreeMap<SignatureKey, Vec<&str>> = BTreeMap::new();
    for p in &profiles {
        groups.entry(SignatureKey::of(p)).or_default().push(&p.example_id);
    }
    let (mut rare, mut max_taken) = (0, 0);
    for members in groups.values() {
        let taken = members.iter().filter(|m| chosen.contains(*m)).count();
        if members.len() <= cfg.rare_threshold {
            rare += 1;
            ensure(taken == members.len(), || "rare signature not fully included".into())?;
        } else {
            ensure(taken <= cfg.cap, || format!("signature contributed {taken} > cap"))?;
            max_taken = max_taken.max(taken);
        }
    }
    ensure(rare > 0, || "pool has no rare signatures".into())?;

    let nq = synthetic_pool(&mut ChaCha8Rng::seed_from_u64(3000), 8000, &["nq"]);
    let nq_profiles: Vec<ExampleProfile> = nq.iter().map(|r| profile_example(r, &lengths)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let nq_cfg = SampleConfig { target: 3000, cap: 400, rare_threshold: 3, seed: 1 };
    let nq_sel = sample_capped(&nq_profiles, &nq_cfg).map_err(|e| e.to_string())?;
    ensure(nq_sel.selected.len() == 3000, || format!("NQ-style pool selected {}", nq_sel.selected.len()))?;
    Ok(format!(
        "{} signatures ({rare} rare) over {} examples, 3000 selected, max per signature {max_taken}; NQ-style 3000/{}",
        groups.len(),
        profiles.len(),
        nq_profiles.len()
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("result-table arithmetic", Duration::from_secs(1), table_arithmetic),
        ("curriculum reconstruction", Duration::from_secs(1), curriculum),
        ("case replay", Duration::from_secs(5), case_replay),
        ("protocol fuzz", Duration::from_secs(10), protocol_fuzz),
        ("validation filter", Duration::MAX, validation_suite),
        ("packer structure", Duration::MAX, packer_structure),
        ("diagnostics oracle", Duration::MAX, diagnostics_oracle),
        ("sampler determinism", Duration::MAX, sampler_determinism),
    ];
    let mut failed = 0;
    for (name, limit, run) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > limit => Err(format!("{detail}; took {elapsed:?}, limit {limit:?}")),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS  {name:<26} {:>8.1?}  {detail}", elapsed),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<26} {:>8.1?}  {why}", elapsed);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 8 acceptance criteria passed");
}
