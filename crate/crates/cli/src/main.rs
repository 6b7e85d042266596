//! `skillroute`: command-line front end for the skill-routed search agent
//! pipeline. Every command prints a JSON summary on stdout; failures print
//! `{"error": {...}}` on stderr and exit nonzero.

mod commands;
mod config;
mod errors;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use skillroute::evaluation::BankMode;

use commands::{EvalArgs, JudgeKind, PackArgs, SampleArgs};
use config::CommonArgs;
use errors::ErrorSummary;

#[derive(Parser, Debug)]
#[command(name = "skillroute", version, about = "Skill-routed search agent pipeline")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Profile a QA pool and draw a signature-capped synthesis manifest.
    Sample {
        /// Pool JSONL: {id, dataset, question, answers, type?, hop?}.
        #[arg(long)]
        pool: PathBuf,
        /// Evaluation JSONL files whose examples must not enter the pool.
        #[arg(long)]
        eval: Vec<PathBuf>,
        #[arg(long)]
        target: Option<usize>,
        /// Maximum examples drawn from one non-rare signature.
        #[arg(long)]
        cap: Option<usize>,
        /// Signatures with at most this many members are kept whole.
        #[arg(long)]
        rare_threshold: Option<usize>,
        /// Trajectories JSONL; rejected rows become failure-replay entries.
        #[arg(long)]
        replay: Option<PathBuf>,
        #[arg(long)]
        replay_ratio: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply curriculum updates to a bank and write every version.
    EvolveBank {
        /// Starting bank: B0, B4, or a bank file.
        #[arg(long, default_value = "B0")]
        from: String,
        /// Update files in order; the bundled curriculum when omitted.
        #[arg(long)]
        update: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the teacher over a manifest and record trajectories.
    Synthesize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Filter trajectories and keep the best accepted row per example.
    Validate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pack trajectories into weighted supervision records and export splits.
    Pack {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Add a closure record per trajectory.
        #[arg(long)]
        closure: bool,
        /// Pack trajectories that fail validation.
        #[arg(long)]
        allow_unvalidated: bool,
        #[arg(long)]
        eval_count: Option<usize>,
        #[arg(long)]
        train_count: Option<usize>,
    },
    /// Run the policy on a split or a single question.
    Rollout {
        /// `fixtures` or an examples JSONL file.
        #[arg(long, default_value = "fixtures", conflicts_with = "question")]
        split: String,
        #[arg(long)]
        question: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Benchmark a bank, optionally ablated, and report EM and diagnostics.
    Eval {
        #[arg(long, default_value = "fixtures")]
        split: String,
        /// full, empty, strip-content, seed, or no-<category>.
        #[arg(long, default_value = "full")]
        ablation: BankMode,
        /// Best macro average in the comparison block, for the gap column.
        #[arg(long)]
        best_avg: Option<f64>,
        #[arg(long, value_enum, default_value = "heuristic")]
        judge: JudgeKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Query-decomposition diagnostics over a trace file.
    Diagnose {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "heuristic")]
        judge: JudgeKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score trajectories with the shaped reward.
    ScoreReward {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        lambda_e: Option<f64>,
        #[arg(long)]
        lambda_d: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run the recorded searches of the bundled cases.
    Replay {
        /// A case id or `all`.
        #[arg(long, default_value = "all")]
        case: String,
    },
}

fn run(cli: Cli) -> anyhow::Result<Value> {
    let mut cfg = cli.common.resolve()?;
    match cli.command {
        Command::Sample { pool, eval, target, cap, rare_threshold, replay, replay_ratio, out } => {
            let s = &mut cfg.sampler;
            s.target = target.or(s.target);
            s.cap = cap.or(s.cap);
            s.rare_threshold = rare_threshold.or(s.rare_threshold);
            s.replay_ratio = replay_ratio.unwrap_or(s.replay_ratio);
            commands::sample(&cfg, &SampleArgs { pool, eval, replay, out })
        }
        Command::EvolveBank { from, update, out } => commands::evolve_bank(&cfg, &from, &update, &out),
        Command::Synthesize { manifest, out } => commands::synthesize_cmd(&cfg, &manifest, &out),
        Command::Validate { input, out } => commands::validate(&cfg, &input, &out),
        Command::Pack { stage, input, out, closure, allow_unvalidated, eval_count, train_count } => {
            cfg.split.eval_count = eval_count.unwrap_or(cfg.split.eval_count);
            cfg.split.train_count = train_count.or(cfg.split.train_count);
            commands::pack(&cfg, &PackArgs { input, stage, closure, allow_unvalidated, out })
        }
        Command::Rollout { split, question, out } => commands::rollout(&cfg, &split, question.as_deref(), out.as_deref()),
        Command::Eval { split, ablation, best_avg, judge, out } => {
            commands::eval(&cfg, &EvalArgs { split, ablation, best_avg, judge, out })
        }
        Command::Diagnose { input, judge, out } => commands::diagnose(&cfg, &input, judge, out.as_deref()),
        Command::ScoreReward { input, lambda_e, lambda_d, out } => {
            cfg.reward.lambda_e = lambda_e.unwrap_or(cfg.reward.lambda_e);
            cfg.reward.lambda_d = lambda_d.unwrap_or(cfg.reward.lambda_d);
            commands::score_reward_cmd(&cfg, &input, out.as_deref())
        }
        Command::Replay { case } => commands::replay(&cfg, &case),
    }
}

fn fail(summary: ErrorSummary) -> ExitCode {
    eprintln!("{}", json!({ "error": summary }));
    ExitCode::from(summary.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            return fail(ErrorSummary::usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    match run(cli) {
        Ok(report) => {
            // A closed stdout (e.g. piped into `head`) is not a failure.
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&report).expect("reports serialize"));
            ExitCode::SUCCESS
        }
        Err(e) => fail(ErrorSummary::from_error(&e)),
    }
}
