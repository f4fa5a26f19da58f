//! Turning flags and an optional TOML file into a `CampaignConfig`.
//!
//! Flags are applied first; any key present in the config file replaces the
//! flag value. Relative paths in the file resolve against the file's
//! directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use lingprobe_core::campaign::{CampaignConfig, ConditionSet, LayerRange, TaskGrouping};
use lingprobe_core::{MomentMode, ShareBy, TemporalGrid};

const PATH_KEYS: &[&str] = &["manifest", "alignments", "store", "untrained_store", "output_dir"];

#[derive(Debug, Clone, Args)]
pub struct CampaignArgs {
    /// TOML campaign file; its keys override the flags below.
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,

    /// Corpus manifest (JSON lines).
    #[arg(long)]
    pub manifest: Option<PathBuf>,

    /// Alignment sidecar (JSON lines); required for temporal probes.
    #[arg(long)]
    pub alignments: Option<PathBuf>,

    /// Embedding store of the trained encoder.
    #[arg(long)]
    pub store: Option<PathBuf>,

    /// Embedding store of the randomly initialized encoder.
    #[arg(long)]
    pub untrained_store: Option<PathBuf>,

    /// Phenomenon ids or level names, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub tasks: Vec<String>,

    /// Inclusive layer range such as `0..11`.
    #[arg(long)]
    pub layers: Option<LayerRange>,

    #[arg(long)]
    pub k_folds: Option<usize>,

    /// L2 penalty on the probe weights.
    #[arg(long)]
    pub l2: Option<f64>,

    #[arg(long)]
    pub max_iterations: Option<usize>,

    #[arg(long)]
    pub tolerance: Option<f64>,

    /// Train probes on raw features.
    #[arg(long)]
    pub no_standardize: bool,

    /// Temporal offsets in ms, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub temporal_grid: Vec<i32>,

    /// Layer for temporal probes (default: best mean-pool layer per task).
    #[arg(long)]
    pub temporal_layer: Option<usize>,

    #[arg(long, value_enum)]
    pub group_by: Option<Grouping>,

    #[arg(long, value_enum)]
    pub noise_moments: Option<Moments>,

    #[arg(long, value_enum)]
    pub noise_share_by: Option<Sharing>,

    /// Simulated chance-band trials per task (0 disables).
    #[arg(long)]
    pub chance_trials: Option<usize>,

    #[arg(long)]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long, short = 'o', env = "LINGPROBE_OUTPUT")]
    pub output: Option<PathBuf>,

    /// Worker threads (default: all cores).
    #[arg(long, short = 'j', env = "LINGPROBE_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum Grouping {
    Phenomenon,
    Level,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum Moments {
    PerDimension,
    Scalar,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum Sharing {
    Pair,
    BaseAudioId,
    None,
}

impl CampaignArgs {
    fn flag_config(&self, conditions: &[ConditionSet]) -> Result<CampaignConfig> {
        let mut cfg = CampaignConfig {
            conditions: conditions.to_vec(),
            ..CampaignConfig::default()
        };
        if let Some(p) = &self.manifest {
            cfg.manifest = p.clone();
        }
        cfg.alignments = self.alignments.clone();
        if let Some(p) = &self.store {
            cfg.store = p.clone();
        }
        cfg.untrained_store = self.untrained_store.clone();
        cfg.tasks = self.tasks.clone();
        cfg.layers = self.layers;
        if let Some(k) = self.k_folds {
            cfg.k_folds = k;
        }
        if let Some(l2) = self.l2 {
            cfg.train.l2_strength = l2;
        }
        if let Some(n) = self.max_iterations {
            cfg.train.max_iterations = n;
        }
        if let Some(t) = self.tolerance {
            cfg.train.convergence_tol = t;
        }
        cfg.train.standardize = !self.no_standardize;
        if !self.temporal_grid.is_empty() {
            cfg.temporal_grid = TemporalGrid::new(self.temporal_grid.clone())?;
        }
        cfg.temporal_layer = self.temporal_layer;
        if let Some(g) = self.group_by {
            cfg.grouping = match g {
                Grouping::Phenomenon => TaskGrouping::Phenomenon,
                Grouping::Level => TaskGrouping::Level,
            };
        }
        if let Some(m) = self.noise_moments {
            cfg.noise_moments = match m {
                Moments::PerDimension => MomentMode::PerDimension,
                Moments::Scalar => MomentMode::Scalar,
            };
        }
        if let Some(s) = self.noise_share_by {
            cfg.noise_share_by = match s {
                Sharing::Pair => ShareBy::Pair,
                Sharing::BaseAudioId => ShareBy::BaseAudioId,
                Sharing::None => ShareBy::None,
            };
        }
        if let Some(n) = self.chance_trials {
            cfg.chance_trials = n;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.output {
            cfg.output_dir = o.clone();
        }
        cfg.threads = self.threads;
        Ok(cfg)
    }

    /// The effective configuration for a subcommand that probes
    /// `conditions` by default.
    pub fn resolve(&self, conditions: &[ConditionSet]) -> Result<CampaignConfig> {
        let flags = self.flag_config(conditions)?;
        let cfg = match &self.config {
            Some(path) => merge_file(&flags, path)?,
            None => flags,
        };
        if cfg.manifest.as_os_str().is_empty() {
            bail!("no manifest given (use --manifest or set `manifest` in the config file)");
        }
        if cfg.store.as_os_str().is_empty() {
            bail!("no store given (use --store or set `store` in the config file)");
        }
        Ok(cfg)
    }
}

fn resolve_relative(value: &mut toml::Value, base: &Path) {
    if let toml::Value::String(s) = value {
        let p = Path::new(s.as_str());
        if p.is_relative() {
            *s = base.join(p).to_string_lossy().into_owned();
        }
    }
}

pub fn merge_file(flags: &CampaignConfig, path: &Path) -> Result<CampaignConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut file: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for key in PATH_KEYS {
        if let Some(v) = file.get_mut(*key) {
            resolve_relative(v, base);
        }
    }

    let mut merged = toml::Table::try_from(flags).context("serializing flag configuration")?;
    for (key, value) in file {
        match (merged.get_mut(&key), value) {
            (Some(toml::Value::Table(inner)), toml::Value::Table(over)) => inner.extend(over),
            (_, value) => {
                merged.insert(key, value);
            }
        }
    }
    toml::Value::Table(merged)
        .try_into()
        .with_context(|| format!("invalid campaign configuration in {}", path.display()))
}
