use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use skillroute::environment::{HttpChatBackend, HttpRetriever, LexicalIndex, PolicyBackend, Retriever, ScriptedBackend};
use skillroute::evaluation::{
    compute_diagnostics, run_benchmark, score_reward, AtomicJudge, BackendJudge, BankMode, BenchmarkConfig,
    DiagnosticTrace, EvalExample, HeuristicJudge, ScoredTrace,
};
use skillroute::fixtures;
use skillroute::packer::{export, pack_stage1, rewrite_stage2, SupervisionRecord};
use skillroute::protocol::ActionKind;
use skillroute::rollout::{replay_trace, run_batch, BatchItem, RolloutStatus};
use skillroute::sampler::{
    build_manifest, group_signatures, profile_example, remove_overlap, sample_capped, LengthThresholds, RawExample,
    SampleConfig,
};
use skillroute::skillbank::{apply_update, load_bank, BankUpdate, Category, SkillBankVersion};
use skillroute::trajectory::{
    dedup_keep_best, expand_with_closure, synthesize, validate_trajectory, ManifestEntry, SynthesisConfig, Trajectory,
    TrajectoryStatus,
};

use crate::config::{BackendKind, RunConfig};
use crate::errors::{config_error, missing_input};

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let file = File::open(path).map_err(|_| missing_input(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).with_context(|| format!("{}:{}: malformed record", path.display(), i + 1))?;
        out.push(row);
    }
    Ok(out)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|_| missing_input(path))?;
    serde_json::from_str(&text).with_context(|| format!("{}: malformed JSON", path.display()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn resolve_bank(name: &str) -> anyhow::Result<SkillBankVersion> {
    if let Some(bank) = fixtures::named_bank(name) {
        return Ok(bank);
    }
    let path = Path::new(name);
    if !path.is_file() {
        return Err(missing_input(path));
    }
    load_bank(path).with_context(|| format!("loading bank {name}"))
}

fn resolve_index(corpus: &str) -> anyhow::Result<LexicalIndex> {
    if corpus == "fixtures" {
        return Ok(fixtures::corpus_index());
    }
    let path = Path::new(corpus);
    if !path.is_file() {
        return Err(missing_input(path));
    }
    skillroute::environment::build_index(path).with_context(|| format!("indexing {corpus}"))
}

fn resolve_retriever(cfg: &RunConfig) -> anyhow::Result<Box<dyn Retriever>> {
    match &cfg.retriever {
        Some(http) => Ok(Box::new(HttpRetriever::new(http))),
        None => Ok(Box::new(resolve_index(&cfg.corpus)?)),
    }
}

/// Where policy replies come from.
pub enum Policy {
    Scripted(BTreeMap<String, Vec<String>>),
    Http(Arc<HttpChatBackend>),
}

impl Policy {
    /// Scripted runs read `backend.script`, or replay the recorded cases when
    /// `fixture_default` is set and no script is given.
    fn resolve(cfg: &RunConfig, fixture_default: bool) -> anyhow::Result<Policy> {
        match cfg.backend.kind {
            BackendKind::Http => {
                let http = cfg.backend.http.clone().ok_or_else(|| config_error("backend.http is required for the http backend"))?;
                Ok(Policy::Http(Arc::new(HttpChatBackend::new(http).map_err(|e| config_error(e.to_string()))?)))
            }
            BackendKind::Scripted => match &cfg.backend.script {
                Some(path) => Ok(Policy::Scripted(read_json(path)?)),
                None if fixture_default => {
                    Ok(Policy::Scripted(fixtures::cases().into_iter().map(|c| (c.case_id.clone(), c.replies())).collect()))
                }
                None => Err(config_error("the scripted backend needs --script")),
            },
        }
    }

    /// A fresh backend for one item. Unscripted ids get an empty script and
    /// fail on their first call.
    fn for_item(&self, id: &str) -> Box<dyn PolicyBackend> {
        match self {
            Policy::Scripted(map) => Box::new(ScriptedBackend::from_replies(map.get(id).cloned().unwrap_or_default())),
            Policy::Http(b) => Box::new(Arc::clone(b)),
        }
    }
}

fn resolve_split(split: &str) -> anyhow::Result<Vec<EvalExample>> {
    if split == "fixtures" {
        return Ok(fixtures::cases()
            .into_iter()
            .map(|c| EvalExample { id: c.case_id, dataset: c.dataset, question: c.question, gold_answers: c.gold_answers })
            .collect());
    }
    let rows: Vec<EvalExample> = read_jsonl(Path::new(split))?;
    if rows.is_empty() {
        bail!("split {split} has no examples");
    }
    Ok(rows)
}

/// Applies `f` to every item on up to `workers` threads, keeping input order.
fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if items.is_empty() {
        return Vec::new();
    }
    let chunk = items.len().div_ceil(workers.max(1));
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

fn envelope(command: &str, cfg: &RunConfig, body: Value) -> Value {
    json!({ "command": command, "config": cfg, "report": body })
}

// ---------------------------------------------------------------- sample

pub struct SampleArgs {
    pub pool: PathBuf,
    pub eval: Vec<PathBuf>,
    pub replay: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn sample(cfg: &RunConfig, args: &SampleArgs) -> anyhow::Result<Value> {
    let s = &cfg.sampler;
    let need = |v: Option<usize>, name: &str| v.ok_or_else(|| config_error(format!("sampler.{name} is required")));
    let config = SampleConfig {
        target: need(s.target, "target")?,
        cap: need(s.cap, "cap")?,
        rare_threshold: need(s.rare_threshold, "rare_threshold")?,
        seed: cfg.seed,
    };
    let lengths = LengthThresholds { short_max: s.short_max, medium_max: s.medium_max };
    let bank = resolve_bank(&cfg.bank)?;

    let pool: Vec<RawExample> = read_jsonl(&args.pool)?;
    let mut eval = Vec::new();
    for path in &args.eval {
        eval.extend(read_jsonl::<RawExample>(path)?);
    }
    let pool_size = pool.len();
    let (pool, overlap) = remove_overlap(pool, &eval);
    let profiles = pool.iter().map(|r| profile_example(r, &lengths)).collect::<Result<Vec<_>, _>>()?;
    let signatures = group_signatures(&profiles);
    let report = sample_capped(&profiles, &config)?;

    let chosen: BTreeSet<&str> = report.selected.iter().map(String::as_str).collect();
    let selected: Vec<_> = profiles.iter().filter(|p| chosen.contains(p.example_id.as_str())).cloned().collect();
    let failures: Vec<Trajectory> = match &args.replay {
        Some(path) => read_jsonl::<Trajectory>(path)?.into_iter().filter(|t| !validate_trajectory(t, &bank).accepted).collect(),
        None => Vec::new(),
    };
    let manifest = build_manifest(&selected, &failures, s.replay_ratio, &bank, &lengths)?;
    let replayed = manifest.len() - selected.len();

    out_dir(&args.out)?;
    write_jsonl(&args.out.join("profiles.jsonl"), &profiles)?;
    write_json(&args.out.join("signatures.json"), &signatures)?;
    write_jsonl(&args.out.join("manifest.jsonl"), &manifest)?;
    let body = json!({
        "pool": pool_size,
        "eval_overlap_removed": overlap,
        "sample": report,
        "replay_candidates": failures.len(),
        "replay_entries": replayed,
        "manifest_entries": manifest.len(),
    });
    let env = envelope("sample", cfg, body);
    write_json(&args.out.join("report.json"), &env)?;
    Ok(env)
}

// ---------------------------------------------------------------- evolve-bank

fn child_label(parent: &str) -> String {
    match parent.strip_prefix('B').and_then(|n| n.parse::<u32>().ok()) {
        Some(n) => format!("B{}", n + 1),
        None => format!("{parent}+1"),
    }
}

fn category_counts(bank: &SkillBankVersion) -> BTreeMap<&'static str, usize> {
    Category::ALL.iter().map(|c| (c.as_str(), bank.count_in(*c))).collect()
}

pub fn evolve_bank(cfg: &RunConfig, from: &str, updates: &[PathBuf], out: &Path) -> anyhow::Result<Value> {
    let mut bank = resolve_bank(from)?;
    let updates = if updates.is_empty() {
        fixtures::updates()
    } else {
        updates
            .iter()
            .map(|p| {
                if !p.is_file() {
                    return Err(missing_input(p));
                }
                BankUpdate::load(p).with_context(|| format!("loading update {}", p.display()))
            })
            .collect::<anyhow::Result<Vec<_>>>()?
    };
    out_dir(out)?;
    let mut rounds = vec![json!({ "label": bank.label, "cards": bank.len(), "categories": category_counts(&bank) })];
    write_json(&out.join(format!("{}.json", bank.label)), &bank)?;
    for update in &updates {
        let label = update.label.clone().unwrap_or_else(|| child_label(&bank.label));
        let child = apply_update(&bank, update, &label).with_context(|| format!("applying update for {label}"))?;
        rounds.push(json!({
            "label": child.label,
            "parent": bank.label,
            "cards": child.len(),
            "added": update.additions.iter().map(|c| &c.id).collect::<Vec<_>>(),
            "refined": update.refinements.iter().map(|(id, _)| id).collect::<Vec<_>>(),
            "categories": category_counts(&child),
        }));
        std::fs::write(out.join(format!("{label}.json")), child.to_json_string() + "\n")?;
        bank = child;
    }
    let env = envelope("evolve-bank", cfg, json!({ "rounds": rounds, "final": bank.label }));
    write_json(&out.join("lineage.json"), &env)?;
    Ok(env)
}

// ---------------------------------------------------------------- synthesize

pub fn synthesize_cmd(cfg: &RunConfig, manifest: &Path, out: &Path) -> anyhow::Result<Value> {
    let bank = resolve_bank(&cfg.bank)?;
    let retriever = resolve_retriever(cfg)?;
    let policy = Policy::resolve(cfg, false)?;
    let entries: Vec<ManifestEntry> = read_jsonl(manifest)?;
    let config = SynthesisConfig { rollout: cfg.rollout.clone(), max_reprompts: cfg.max_reprompts };
    let results = par_map(&entries, cfg.workers, |e| {
        let teacher = policy.for_item(&e.example_id);
        synthesize(e, &bank, teacher.as_ref(), retriever.as_ref(), None, &config)
    });
    let mut trajs = Vec::new();
    let mut failures = Vec::new();
    for (e, r) in entries.iter().zip(results) {
        match r {
            Ok(t) => trajs.push(t),
            Err(err) => failures.push(json!({ "example_id": e.example_id, "error": err.to_string() })),
        }
    }
    let mut by_status: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &trajs {
        let key = match t.status {
            TrajectoryStatus::Answered => "answered",
            TrajectoryStatus::BudgetExhausted => "budget_exhausted",
            TrajectoryStatus::InvalidAction => "invalid_action",
        };
        *by_status.entry(key).or_default() += 1;
    }
    let accepted = trajs.iter().filter(|t| validate_trajectory(t, &bank).accepted).count();
    out_dir(out)?;
    write_jsonl(&out.join("trajectories.jsonl"), &trajs)?;
    let env = envelope(
        "synthesize",
        cfg,
        json!({
            "entries": entries.len(),
            "trajectories": trajs.len(),
            "by_status": by_status,
            "would_pass_validation": accepted,
            "failures": failures,
        }),
    );
    write_json(&out.join("report.json"), &env)?;
    Ok(env)
}

// ---------------------------------------------------------------- validate

pub fn validate(cfg: &RunConfig, input: &Path, out: &Path) -> anyhow::Result<Value> {
    let bank = resolve_bank(&cfg.bank)?;
    let trajs: Vec<Trajectory> = read_jsonl(input)?;
    let mut failed_by_check: BTreeMap<String, usize> = BTreeMap::new();
    let mut rows = Vec::with_capacity(trajs.len());
    for t in &trajs {
        let report = validate_trajectory(t, &bank);
        for check in report.failed_checks() {
            *failed_by_check.entry(check.to_string()).or_default() += 1;
        }
        rows.push(json!({ "example_id": t.example_id, "accepted": report.accepted, "checks": report.checks }));
    }
    let input_rows = trajs.len();
    let kept: Vec<Trajectory> =
        dedup_keep_best(trajs, &bank).into_iter().filter(|t| validate_trajectory(t, &bank).accepted).collect();
    out_dir(out)?;
    write_jsonl(&out.join("accepted.jsonl"), &kept)?;
    write_jsonl(&out.join("checks.jsonl"), &rows)?;
    let env = envelope(
        "validate",
        cfg,
        json!({
            "input": input_rows,
            "passed_before_dedup": rows.iter().filter(|r| r["accepted"] == true).count(),
            "accepted": kept.len(),
            "failed_by_check": failed_by_check,
        }),
    );
    write_json(&out.join("report.json"), &env)?;
    Ok(env)
}

// ---------------------------------------------------------------- pack

pub struct PackArgs {
    pub input: PathBuf,
    pub stage: u8,
    pub closure: bool,
    pub allow_unvalidated: bool,
    pub out: PathBuf,
}

pub fn pack(cfg: &RunConfig, args: &PackArgs) -> anyhow::Result<Value> {
    let bank = resolve_bank(&cfg.bank)?;
    let mut trajs: Vec<Trajectory> = read_jsonl(&args.input)?;
    if args.closure {
        trajs = expand_with_closure(&trajs);
    }
    let mut records: Vec<SupervisionRecord> = Vec::with_capacity(trajs.len());
    let mut skipped = Vec::new();
    for t in &trajs {
        let packed = pack_stage1(t, &bank, &cfg.weights, args.allow_unvalidated).and_then(|r| match args.stage {
            1 => Ok(r),
            _ => rewrite_stage2(&r, &bank, &cfg.weights),
        });
        match packed {
            Ok(r) => records.push(r),
            Err(e) => skipped.push(json!({ "example_id": t.example_id, "error": e.to_string() })),
        }
    }
    if records.is_empty() {
        bail!("no trajectory could be packed ({} skipped)", skipped.len());
    }
    let manifest = export(&records, &args.out, &cfg.split, &cfg.weights)?;
    let env = envelope(
        "pack",
        cfg,
        json!({ "stage": args.stage, "input": trajs.len(), "packed": records.len(), "skipped": skipped, "export": manifest }),
    );
    write_json(&args.out.join("report.json"), &env)?;
    Ok(env)
}

// ---------------------------------------------------------------- rollout

pub fn rollout(cfg: &RunConfig, split: &str, question: Option<&str>, out: Option<&Path>) -> anyhow::Result<Value> {
    let bank = resolve_bank(&cfg.bank)?;
    let retriever = resolve_retriever(cfg)?;
    let examples = match question {
        Some(q) => vec![EvalExample { id: "q1".into(), dataset: "adhoc".into(), question: q.into(), gold_answers: vec![] }],
        None => resolve_split(split)?,
    };
    let policy = Policy::resolve(cfg, question.is_none() && split == "fixtures")?;
    let items: Vec<BatchItem> =
        examples.iter().map(|e| BatchItem { id: e.id.clone(), question: e.question.clone() }).collect();
    let results =
        run_batch(&items, &bank, |_, item| policy.for_item(&item.id), retriever.as_ref(), &cfg.rollout, cfg.workers);
    let mut trajs = Vec::new();
    let mut errors = Vec::new();
    let mut by_status: BTreeMap<&str, usize> = BTreeMap::new();
    for (e, r) in examples.iter().zip(&results) {
        match r {
            Ok(o) => {
                let key = match o.status {
                    RolloutStatus::Answered { .. } => "answered",
                    RolloutStatus::BudgetExhausted => "budget_exhausted",
                    RolloutStatus::InvalidAction { .. } => "invalid_action",
                };
                *by_status.entry(key).or_default() += 1;
                trajs.push(Trajectory::from_outcome(&e.id, &e.dataset, &e.gold_answers, o));
            }
            Err(err) => errors.push(json!({ "id": e.id, "error": err.to_string() })),
        }
    }
    let answers: Vec<Value> =
        trajs.iter().map(|t| json!({ "id": t.example_id, "answer": t.final_answer, "searches": t.search_count() })).collect();
    let env = envelope(
        "rollout",
        cfg,
        json!({ "bank": bank.label, "examples": examples.len(), "by_status": by_status, "answers": answers, "errors": errors }),
    );
    if let Some(out) = out {
        out_dir(out)?;
        write_jsonl(&out.join("trajectories.jsonl"), &trajs)?;
        write_json(&out.join("report.json"), &env)?;
    }
    Ok(env)
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum JudgeKind {
    Heuristic,
    Backend,
}

fn make_judge(cfg: &RunConfig, kind: JudgeKind) -> anyhow::Result<Box<dyn AtomicJudge>> {
    let fallback = HeuristicJudge { threshold: cfg.diagnostics.copy_threshold };
    match kind {
        JudgeKind::Heuristic => Ok(Box::new(fallback)),
        JudgeKind::Backend => {
            let http = cfg.backend.http.clone().ok_or_else(|| config_error("--judge backend needs backend.http"))?;
            let backend = HttpChatBackend::new(http).map_err(|e| config_error(e.to_string()))?;
            Ok(Box::new(BackendJudge { backend, fallback }))
        }
    }
}

pub struct EvalArgs {
    pub split: String,
    pub ablation: BankMode,
    pub best_avg: Option<f64>,
    pub judge: JudgeKind,
    pub out: Option<PathBuf>,
}

pub fn eval(cfg: &RunConfig, args: &EvalArgs) -> anyhow::Result<Value> {
    let full = resolve_bank(&cfg.bank)?;
    let seed = resolve_bank(&cfg.seed_bank)?;
    let split = resolve_split(&args.split)?;
    let retriever = resolve_retriever(cfg)?;
    let policy = Policy::resolve(cfg, args.split == "fixtures")?;
    let judge = make_judge(cfg, args.judge)?;
    let config = BenchmarkConfig {
        bank_mode: args.ablation,
        rollout: cfg.rollout.clone(),
        parallelism: cfg.workers,
        diagnostics: cfg.diagnostics,
        reward: cfg.reward,
        best_avg: args.best_avg,
    };
    let mut run = run_benchmark(
        &split,
        &full,
        &seed,
        |_, item| policy.for_item(&item.id),
        retriever.as_ref(),
        &config,
        judge.as_ref(),
    )?;
    if let Some(out) = &args.out {
        out_dir(out)?;
        write_jsonl(&out.join("traces.jsonl"), &run.traces)?;
        run.report.trace_file = Some("traces.jsonl".into());
    }
    let env = envelope("eval", cfg, serde_json::to_value(&run.report)?);
    if let Some(out) = &args.out {
        write_json(&out.join("report.json"), &env)?;
    }
    Ok(env)
}

// ---------------------------------------------------------------- diagnose

/// Any trace file the pipeline writes.
#[derive(Deserialize)]
#[serde(untagged)]
enum AnyTrace {
    Trajectory(Box<Trajectory>),
    Scored(Box<ScoredTrace>),
    Plain(DiagnosticTrace),
}

impl AnyTrace {
    fn into_diagnostic(self) -> DiagnosticTrace {
        match self {
            AnyTrace::Trajectory(t) => DiagnosticTrace {
                queries: t.queries().into_iter().map(str::to_string).collect(),
                question: t.question,
                prediction: t.final_answer,
                gold_answers: t.gold_answers,
            },
            AnyTrace::Scored(s) => DiagnosticTrace {
                queries: s
                    .record
                    .steps
                    .iter()
                    .filter(|st| st.action == ActionKind::Search)
                    .map(|st| st.payload.clone())
                    .collect(),
                prediction: match s.record.outcome {
                    Some(RolloutStatus::Answered { answer }) => Some(answer),
                    _ => None,
                },
                question: s.record.question,
                gold_answers: s.gold_answers,
            },
            AnyTrace::Plain(d) => d,
        }
    }
}

pub fn diagnose(cfg: &RunConfig, input: &Path, judge: JudgeKind, out: Option<&Path>) -> anyhow::Result<Value> {
    let traces: Vec<DiagnosticTrace> = read_jsonl::<AnyTrace>(input)?.into_iter().map(AnyTrace::into_diagnostic).collect();
    let judge = make_judge(cfg, judge)?;
    let report = compute_diagnostics(&traces, &cfg.diagnostics, judge.as_ref());
    let env = envelope("diagnose", cfg, serde_json::to_value(report)?);
    if let Some(out) = out {
        write_json(out, &env)?;
    }
    Ok(env)
}

// ---------------------------------------------------------------- score-reward

pub fn score_reward_cmd(cfg: &RunConfig, input: &Path, out: Option<&Path>) -> anyhow::Result<Value> {
    let trajs: Vec<Trajectory> = read_jsonl(input)?;
    let rows: Vec<Value> = trajs
        .iter()
        .map(|t| {
            let r = score_reward(t.final_answer.as_deref(), &t.queries(), t.evidence(), &t.gold_answers, &cfg.reward);
            json!({ "example_id": t.example_id, "reward": r })
        })
        .collect();
    let n = rows.len();
    let mean = |key: &str| {
        if n == 0 {
            0.0
        } else {
            rows.iter().map(|r| r["reward"][key].as_f64().unwrap_or(0.0)).sum::<f64>() / n as f64
        }
    };
    let body = json!({
        "trajectories": n,
        "mean_total": mean("total"),
        "mean_r_em": mean("r_em"),
        "mean_r_evi": mean("r_evi"),
        "mean_r_dup": mean("r_dup"),
    });
    let env = envelope("score-reward", cfg, body);
    if let Some(out) = out {
        out_dir(out)?;
        write_jsonl(&out.join("rewards.jsonl"), &rows)?;
        write_json(&out.join("report.json"), &env)?;
    }
    Ok(env)
}

// ---------------------------------------------------------------- replay

pub fn replay(cfg: &RunConfig, case: &str) -> anyhow::Result<Value> {
    let retriever = resolve_retriever(cfg)?;
    let cases: Vec<_> = match case {
        "all" => fixtures::cases(),
        id => vec![fixtures::case(id).ok_or_else(|| missing_input(format!("case {id}")))?],
    };
    let reports = cases
        .iter()
        .map(|c| replay_trace(c, retriever.as_ref(), cfg.rollout.top_k))
        .collect::<Result<Vec<_>, _>>()?;
    let mismatched: Vec<&str> = reports.iter().filter(|r| !r.all_match).map(|r| r.case_id.as_str()).collect();
    if !mismatched.is_empty() {
        bail!("retrieval differs from the recorded trace for {}", mismatched.join(", "));
    }
    Ok(envelope("replay", cfg, json!({ "cases": reports })))
}
