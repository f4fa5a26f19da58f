//! `lingprobe`: layer-wise probing campaigns over embedding stores.

mod config;

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use lingprobe_core::analysis::{delta_embeddings_for, import_projection, project_2d, projection_rows};
use lingprobe_core::campaign::{report, run_campaign, score_tables, write_csv, ConditionSet};
use lingprobe_core::corpus::{load_alignments, load_manifest, validate_corpus, ValidationOptions};
use lingprobe_core::synthetic::{write_synthetic_corpus, write_synthetic_store, synthetic_manifest, SyntheticSpec};
use lingprobe_core::{Condition, LinguisticLevel, MinimalPair, StoreReader};

use crate::config::CampaignArgs;

#[derive(Parser)]
#[command(name = "lingprobe", version, about = "Linear probing of speech-encoder layers on minimal pairs")]
struct Cli {
    /// More log output (-v, -vv).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a corpus manifest (and optionally alignments and a store).
    Validate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        alignments: Option<PathBuf>,
        /// Report utterances without alignment spans.
        #[arg(long)]
        require_alignments: bool,
        /// Also check that this store holds every utterance.
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Layer-wise probes on mean-pooled sentence vectors.
    Probe(CampaignArgs),
    /// Single-frame probes at 0/25/50/75/100% alongside mean pooling.
    ProbePositions(CampaignArgs),
    /// Single-frame probes around the critical-word onset.
    ProbeTemporal(CampaignArgs),
    /// Matched random-embedding control alongside mean pooling.
    ControlRandemb(CampaignArgs),
    /// Any combination of conditions, typically from a config file.
    Run {
        #[command(flatten)]
        args: CampaignArgs,
        /// Condition sets: mean, positions, temporal, randemb.
        #[arg(long, value_delimiter = ',', default_value = "mean")]
        conditions: Vec<ConditionSet>,
    },
    /// Selection scores from a trained and an untrained result table.
    Score {
        #[arg(long)]
        trained: PathBuf,
        #[arg(long)]
        untrained: PathBuf,
        #[arg(long, short = 'o')]
        out: PathBuf,
    },
    /// Analysis tables for a finished campaign directory.
    Report {
        dir: PathBuf,
        /// Campaign directory of the untrained encoder.
        #[arg(long)]
        untrained_dir: Option<PathBuf>,
    },
    /// 2-D projection of delta embeddings, or labeling of imported
    /// coordinates.
    Project {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        alignments: Option<PathBuf>,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value = "mean")]
        condition: Condition,
        /// Phenomenon ids or level names, comma separated.
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
        /// CSV with pair_id,x,y computed elsewhere (e.g. t-SNE).
        #[arg(long, conflicts_with_all = ["store", "layer"])]
        import: Option<PathBuf>,
        #[arg(long, short = 'o')]
        out: PathBuf,
    },
    /// Write a synthetic corpus with a planted signal.
    Synth {
        #[arg(long, short = 'o')]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        tasks: usize,
        #[arg(long, default_value_t = 100)]
        pairs: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        layers: usize,
        /// Planted signal per layer, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0,1,4,2")]
        snr: Vec<f64>,
        /// Restrict the signal to frames in [lo,hi) ms around the onset.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        window: Vec<i32>,
        /// Also write `untrained.lps` with the same noise and no signal.
        #[arg(long)]
        untrained: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

fn run_probe(args: &CampaignArgs, conditions: &[ConditionSet]) -> Result<()> {
    let cfg = args.resolve(conditions)?;
    let summary = run_campaign(&cfg)?;
    println!(
        "{}: {} results, {} failures, {} untrained results, {} scores -> {}",
        summary.model,
        summary.results,
        summary.failures,
        summary.untrained_results,
        summary.scores,
        summary.output_dir.display()
    );
    println!("run hash {}", summary.run_hash);
    Ok(())
}

fn selected(manifest: &lingprobe_core::CorpusManifest, tasks: &[String]) -> Vec<MinimalPair> {
    manifest
        .pairs()
        .iter()
        .filter(|p| {
            tasks.is_empty()
                || tasks.iter().any(|t| {
                    *t == p.phenomenon
                        || manifest
                            .phenomenon(&p.phenomenon)
                            .is_some_and(|ph| t.parse::<LinguisticLevel>().ok() == Some(ph.level))
                })
        })
        .cloned()
        .collect()
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    init_logging(cli.verbose, cli.quiet);

    match cli.command {
        Command::Validate {
            manifest,
            alignments,
            require_alignments,
            store,
        } => {
            let mut m = load_manifest(&manifest)?;
            if let Some(a) = alignments {
                m = m.with_alignments(load_alignments(a)?);
            }
            let report = validate_corpus(&m, ValidationOptions { require_alignments });
            for v in &report.violations {
                println!("{v}");
            }
            let (blimp, comps) = m.suite_counts();
            println!(
                "{} phenomena ({blimp} grammatical, {comps} conceptual), {} pairs, {} violations",
                m.phenomena().len(),
                m.pairs().len(),
                report.violations.len()
            );
            if let Some(path) = store {
                let s = StoreReader::open(&path)?;
                let missing = m.utterances().filter(|u| !s.contains(&u.id)).count();
                println!(
                    "store `{}`: {} layers, {} utterances, {missing} manifest utterances missing",
                    s.header().model_id,
                    s.num_layers(),
                    s.utterance_ids().len()
                );
                if missing > 0 {
                    bail!("store is missing {missing} utterances");
                }
            }
            if !report.is_valid() {
                bail!("corpus has {} violations", report.violations.len());
            }
        }
        Command::Probe(args) => run_probe(&args, &[ConditionSet::Mean])?,
        Command::ProbePositions(args) => run_probe(&args, &[ConditionSet::Mean, ConditionSet::Positions])?,
        Command::ProbeTemporal(args) => run_probe(&args, &[ConditionSet::Mean, ConditionSet::Temporal])?,
        Command::ControlRandemb(args) => run_probe(&args, &[ConditionSet::Mean, ConditionSet::RandomEmbedding])?,
        Command::Run { args, conditions } => run_probe(&args, &conditions)?,
        Command::Score { trained, untrained, out } => {
            let scores = score_tables(&trained, &untrained, &out)?;
            println!("{} selection scores -> {}", scores.len(), out.display());
        }
        Command::Report { dir, untrained_dir } => {
            let summary = report(&dir, untrained_dir.as_deref())?;
            for f in &summary.files {
                println!("{}", f.display());
            }
            if let Some(why) = summary.projection_skipped {
                println!("projection skipped: {why}");
            }
        }
        Command::Project {
            manifest,
            store,
            alignments,
            layer,
            condition,
            tasks,
            import,
            out,
        } => {
            let mut m = load_manifest(&manifest)?;
            if let Some(a) = alignments {
                m = m.with_alignments(load_alignments(a)?);
            }
            let rows = if let Some(coords) = import {
                import_projection(coords, &m)?
            } else {
                let (Some(store), Some(layer)) = (store, layer) else {
                    bail!("--store and --layer are required unless --import is given");
                };
                let s = StoreReader::open(&store)?;
                let pairs = selected(&m, &tasks);
                let refs: Vec<&MinimalPair> = pairs.iter().collect();
                let deltas = delta_embeddings_for(&s, &m, &refs, layer, condition)?;
                let vectors: Vec<Vec<f64>> = deltas.deltas.iter().map(|d| d.delta.clone()).collect();
                let p = project_2d(&vectors)?;
                println!(
                    "explained variance {:.4} + {:.4}{}; {} pairs skipped",
                    p.explained_variance_ratio[0],
                    p.explained_variance_ratio[1],
                    if p.degenerate { " (degenerate)" } else { "" },
                    deltas.skipped
                );
                projection_rows(&deltas.deltas, &p)
            };
            write_csv(&out, &rows).with_context(|| format!("writing {}", out.display()))?;
            println!("{} points -> {}", rows.len(), out.display());
        }
        Command::Synth {
            out,
            tasks,
            pairs,
            dim,
            layers,
            snr,
            window,
            untrained,
            seed,
        } => {
            let signal_window_ms = match window.as_slice() {
                [] => None,
                [lo, hi] if lo < hi => Some([*lo, *hi]),
                _ => bail!("--window takes two increasing offsets, e.g. --window=-600,-400"),
            };
            let spec = SyntheticSpec {
                n_tasks: tasks,
                pairs_per_task: pairs,
                dim,
                num_layers: layers,
                snr,
                signal_window_ms,
                seed,
                ..SyntheticSpec::default()
            };
            let paths = write_synthetic_corpus(&spec, &out, "trained.lps")?;
            let mut written: BTreeMap<&str, PathBuf> = BTreeMap::new();
            written.insert("manifest", paths.manifest);
            written.insert("alignments", paths.alignments);
            written.insert("store", paths.store);
            if untrained {
                let u = SyntheticSpec {
                    model_id: format!("{}-untrained", spec.model_id),
                    trained: false,
                    snr: Vec::new(),
                    ..spec.clone()
                };
                let path = out.join("untrained.lps");
                write_synthetic_store(&u, &synthetic_manifest(&spec)?, &path)?;
                written.insert("untrained_store", path);
            }
            for (k, v) in written {
                println!("{k} {}", v.display());
            }
        }
    }
    Ok(())
}
