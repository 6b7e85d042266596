//! Resolved run configuration: built-in defaults, overlaid by an optional
//! TOML file, overlaid by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use skillroute::environment::{HttpChatConfig, HttpRetrieverConfig};
use skillroute::evaluation::{DiagnosticsConfig, RewardConfig};
use skillroute::packer::{SplitConfig, WeightConfig};
use skillroute::rollout::RolloutConfig;

use crate::errors::{config_error, missing_input};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Replays recorded replies.
    #[default]
    Scripted,
    /// OpenAI-compatible chat completion endpoint.
    Http,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    /// JSON object mapping example ids to reply lists, for scripted runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub http: Option<HttpChatConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cap: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rare_threshold: Option<usize>,
    pub short_max: usize,
    pub medium_max: usize,
    pub replay_ratio: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection { target: None, cap: None, rare_threshold: None, short_max: 8, medium_max: 16, replay_ratio: 0.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    /// `B0`, `B4`, or a bank file.
    pub bank: String,
    /// Bank used by the `seed` ablation.
    pub seed_bank: String,
    /// `fixtures` or a JSONL corpus file.
    pub corpus: String,
    pub rollout: RolloutConfig,
    pub backend: BackendSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retriever: Option<HttpRetrieverConfig>,
    pub weights: WeightConfig,
    pub reward: RewardConfig,
    pub diagnostics: DiagnosticsConfig,
    pub sampler: SamplerSection,
    pub split: SplitConfig,
    pub max_reprompts: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 4,
            bank: "B4".into(),
            seed_bank: "B0".into(),
            corpus: "fixtures".into(),
            rollout: RolloutConfig::default(),
            backend: BackendSection::default(),
            retriever: None,
            weights: WeightConfig::default(),
            reward: RewardConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            sampler: SamplerSection::default(),
            split: SplitConfig::default(),
            max_reprompts: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = std::fs::read_to_string(path).map_err(|_| missing_input(path))?;
        toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
    }
}

/// Flags shared by every subcommand; each one overrides the config file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct CommonArgs {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Bank: B0, B4, or a bank JSON file.
    #[arg(long, global = true)]
    pub bank: Option<String>,
    /// Corpus: `fixtures` or a JSONL file of {doc_id, title, text}.
    #[arg(long, global = true)]
    pub corpus: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for batch rollouts.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    /// Scripted replies: JSON object of example id to reply list.
    #[arg(long, global = true)]
    pub script: Option<PathBuf>,
    /// Maximum searches per rollout.
    #[arg(long, global = true)]
    pub budget: Option<usize>,
    /// Passages per search.
    #[arg(long, global = true)]
    pub top_k: Option<usize>,
}

impl CommonArgs {
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(v) = &self.bank {
            cfg.bank = v.clone();
        }
        if let Some(v) = &self.corpus {
            cfg.corpus = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        if let Some(v) = self.backend {
            cfg.backend.kind = v;
        }
        if let Some(v) = &self.script {
            cfg.backend.script = Some(v.clone());
        }
        if let Some(v) = self.budget {
            cfg.rollout.budget = v;
        }
        if let Some(v) = self.top_k {
            cfg.rollout.top_k = v;
        }
        cfg.split.seed = cfg.seed;
        if cfg.workers == 0 {
            return Err(config_error("workers must be at least 1"));
        }
        Ok(cfg)
    }
}
