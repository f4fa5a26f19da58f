//! Campaigns: the cross-product of tasks, layers and conditions over one or
//! two embedding stores, written as canonical result tables, plus the
//! report that turns a finished campaign directory into analysis tables.
//!
//! Every output is sorted by (task, layer, condition) before it is written,
//! so identical inputs give byte-identical files regardless of thread count.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    build_layer_curves, curve_peak, delta_embeddings_for, positional_comparison, project_2d, projection_rows,
    temporal_profile, PeakReport,
};
use crate::controls::{chance_band, matched_random_features_for, MatchedNoiseSpec, MomentMode, ShareBy};
use crate::corpus::{
    assign_folds_for, load_alignments, load_manifest, validate_corpus, CorpusManifest, FoldAssignment,
    LinguisticLevel, MinimalPair, ValidationOptions,
};
use crate::hashing::{derive_seed, sha256_file, sha256_hex};
use crate::pooling::{mean_pool, position_token, temporal_samples, Condition, RelativePosition, TemporalGrid};
use crate::probe::{cross_validate, join_scores, ProbeResult, ScoreReport, TrainConfig};
use crate::store::{LayerTensor, StoreReader};
use crate::{Error, Result};

pub const RESULTS_FILE: &str = "results.csv";
pub const UNTRAINED_RESULTS_FILE: &str = "results_untrained.csv";
pub const FAILURES_FILE: &str = "failures.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const CHANCE_FILE: &str = "chance.csv";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

const RUN_MANIFEST_FORMAT: u32 = 1;

/// Groups of conditions a campaign can request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSet {
    Mean,
    /// Single frames at 0, 25, 50, 75 and 100 percent.
    Positions,
    /// Single frames around the critical-word onset.
    Temporal,
    /// Matched random embeddings in place of mean-pooled vectors.
    #[serde(rename = "ctrl:randemb", alias = "randemb")]
    RandomEmbedding,
}

impl FromStr for ConditionSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| Error::Argument(format!("unknown condition set `{s}`")))
    }
}

/// What one probe is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskGrouping {
    /// One probe per phenomenon.
    #[default]
    Phenomenon,
    /// One probe per linguistic level over all of its pairs.
    Level,
}

/// Inclusive layer range. Config files may give it as a table or as a
/// string such as `"2..5"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LayerRangeRepr")]
pub struct LayerRange {
    pub first: usize,
    pub last: usize,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LayerRangeRepr {
    Text(String),
    Table { first: usize, last: usize },
}

impl TryFrom<LayerRangeRepr> for LayerRange {
    type Error = Error;

    fn try_from(r: LayerRangeRepr) -> Result<Self> {
        match r {
            LayerRangeRepr::Text(s) => s.parse(),
            LayerRangeRepr::Table { first, last } if first <= last => Ok(Self { first, last }),
            LayerRangeRepr::Table { first, last } => Err(Error::Argument(format!("layer range {first}..{last} is empty"))),
        }
    }
}

impl FromStr for LayerRange {
    type Err = Error;

    /// `3`, `2..5` or `2-5`, both ends inclusive.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Argument(format!("bad layer range `{s}`"));
        let (a, b) = s.split_once("..").or_else(|| s.split_once('-')).unwrap_or((s, s));
        let first = a.trim().parse().map_err(|_| bad())?;
        let last = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if first > last {
            return Err(bad());
        }
        Ok(Self { first, last })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub manifest: PathBuf,
    pub alignments: Option<PathBuf>,
    pub store: PathBuf,
    pub untrained_store: Option<PathBuf>,
    /// Phenomenon ids or level names; empty selects everything.
    pub tasks: Vec<String>,
    /// Defaults to every layer of the store.
    pub layers: Option<LayerRange>,
    pub conditions: Vec<ConditionSet>,
    pub k_folds: usize,
    pub train: TrainConfig,
    pub temporal_grid: TemporalGrid,
    /// Layer for temporal probes; defaults to each task's best mean-pool
    /// layer.
    pub temporal_layer: Option<usize>,
    pub grouping: TaskGrouping,
    pub noise_moments: MomentMode,
    pub noise_share_by: ShareBy,
    /// Simulated chance-band trials per task; 0 skips the simulation.
    pub chance_trials: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Worker threads; defaults to the number of cores.
    pub threads: Option<usize>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::new(),
            alignments: None,
            store: PathBuf::new(),
            untrained_store: None,
            tasks: Vec::new(),
            layers: None,
            conditions: vec![ConditionSet::Mean],
            k_folds: 5,
            train: TrainConfig::default(),
            temporal_grid: TemporalGrid::default(),
            temporal_layer: None,
            grouping: TaskGrouping::default(),
            noise_moments: MomentMode::default(),
            noise_share_by: ShareBy::default(),
            chance_trials: 0,
            output_dir: PathBuf::from("lingprobe-out"),
            seed: 0,
            threads: None,
        }
    }
}

impl CampaignConfig {
    pub fn wants(&self, set: ConditionSet) -> bool {
        self.conditions.contains(&set)
    }

    /// The fields that determine results: everything except where the
    /// output goes and how many threads compute it.
    pub fn result_relevant(&self) -> CampaignConfig {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.threads = None;
        c.conditions.sort();
        c.conditions.dedup();
        c
    }

    pub fn config_hash(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(&self.result_relevant())?))
    }

    fn check(&self) -> Result<()> {
        self.train.check()?;
        if self.conditions.is_empty() {
            return Err(Error::Config("no conditions requested".into()));
        }
        if self.k_folds < 2 {
            return Err(Error::Config(format!("k_folds must be at least 2, got {}", self.k_folds)));
        }
        if self.wants(ConditionSet::Temporal) {
            if self.alignments.is_none() {
                return Err(Error::Config("temporal probing requires an alignment sidecar".into()));
            }
            if self.temporal_layer.is_none() && !self.wants(ConditionSet::Mean) {
                return Err(Error::Config(
                    "temporal probing at the best mean-pool layer requires the mean condition".into(),
                ));
            }
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        Ok(())
    }
}

/// A probing task: its pairs, in manifest order, and its folds.
#[derive(Debug, Clone)]
pub struct TaskUnit<'a> {
    pub name: String,
    pub level: String,
    pub pairs: Vec<&'a MinimalPair>,
    pub folds: FoldAssignment,
}

impl TaskUnit<'_> {
    fn labels(&self) -> Vec<u8> {
        self.pairs.iter().flat_map(|p| [p.pos.label, p.neg.label]).collect()
    }

    fn pair_ids(&self) -> Vec<&str> {
        self.pairs.iter().flat_map(|p| [p.id.as_str(), p.id.as_str()]).collect()
    }

    fn n_samples(&self) -> usize {
        2 * self.pairs.len()
    }
}

/// Applies the task filter and grouping and assigns folds.
pub fn resolve_tasks<'a>(cfg: &CampaignConfig, manifest: &'a CorpusManifest) -> Result<Vec<TaskUnit<'a>>> {
    let wanted = |id: &str, level: LinguisticLevel| {
        cfg.tasks.is_empty() || cfg.tasks.iter().any(|t| t == id || t.parse::<LinguisticLevel>().ok() == Some(level))
    };
    for t in &cfg.tasks {
        let known = manifest.phenomenon(t).is_some()
            || t.parse::<LinguisticLevel>()
                .is_ok_and(|l| manifest.phenomena().iter().any(|p| p.level == l));
        if !known {
            return Err(Error::Config(format!("task filter `{t}` matches no phenomenon or level")));
        }
    }

    let mut groups: Vec<(String, String, Vec<&MinimalPair>)> = Vec::new();
    match cfg.grouping {
        TaskGrouping::Phenomenon => {
            let mut phenomena: Vec<_> = manifest.phenomena().iter().filter(|p| wanted(&p.id, p.level)).collect();
            phenomena.sort_by(|a, b| a.id.cmp(&b.id));
            for p in phenomena {
                groups.push((p.id.clone(), p.level.to_string(), manifest.pairs_for(&p.id).collect()));
            }
        }
        TaskGrouping::Level => {
            for level in LinguisticLevel::ALL {
                let pairs: Vec<&MinimalPair> = manifest
                    .pairs()
                    .iter()
                    .filter(|pair| {
                        manifest
                            .phenomenon(&pair.phenomenon)
                            .is_some_and(|p| p.level == level && wanted(&p.id, p.level))
                    })
                    .collect();
                if !pairs.is_empty() {
                    groups.push((level.to_string(), level.to_string(), pairs));
                }
            }
        }
    }
    if groups.is_empty() {
        return Err(Error::Config("no tasks selected".into()));
    }
    groups
        .into_iter()
        .map(|(name, level, pairs)| {
            let ids: Vec<&str> = pairs.iter().map(|p| p.id.as_str()).collect();
            let folds = assign_folds_for(&ids, &name, cfg.k_folds, cfg.seed)?;
            Ok(TaskUnit { name, level, pairs, folds })
        })
        .collect()
}

/// A probe that could not produce a result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRow {
    pub model: String,
    pub task: String,
    pub layer: usize,
    pub condition: Condition,
    pub error: String,
}

/// Chance band for one task's sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChanceRow {
    pub task: String,
    pub n_samples: usize,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRecord {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
    /// Hash of the store header, for stores.
    pub header_sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: u32,
    /// Changes whenever an input file or a result-relevant config field
    /// changes.
    pub run_hash: String,
    pub config_hash: String,
    pub config: CampaignConfig,
    pub inputs: Vec<InputRecord>,
    pub model: String,
    pub untrained_model: Option<String>,
    /// Every (task, layer, condition) cell the campaign set out to fill.
    pub cells: Vec<String>,
    pub untrained_cells: Vec<String>,
    pub results: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CampaignSummary {
    pub output_dir: PathBuf,
    pub model: String,
    pub results: usize,
    pub failures: usize,
    pub untrained_results: usize,
    pub scores: usize,
    pub run_hash: String,
}

pub fn cell_key(task: &str, layer: usize, condition: Condition) -> String {
    format!("{task}/L{layer}/{condition}")
}

type CellOutcome = std::result::Result<ProbeResult, FailureRow>;

struct Probing<'a> {
    cfg: &'a CampaignConfig,
    manifest: &'a CorpusManifest,
    store: &'a StoreReader,
    model: String,
    with_controls: bool,
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

impl Probing<'_> {
    fn failure(&self, task: &TaskUnit, layer: usize, condition: Condition, e: &Error) -> FailureRow {
        FailureRow {
            model: self.model.clone(),
            task: task.name.clone(),
            layer,
            condition,
            error: e.to_string(),
        }
    }

    fn probe(&self, task: &TaskUnit, layer: usize, condition: Condition, rows: &[Vec<f64>]) -> CellOutcome {
        let x = rows_to_matrix(rows);
        cross_validate(&x, &task.labels(), &task.pair_ids(), &task.folds, &self.cfg.train)
            .map(|cv| ProbeResult::from_cv(&cv, &self.model, &task.name, &task.level, layer, condition, &self.cfg.train))
            .map_err(|e| self.failure(task, layer, condition, &e))
    }

    fn layer_conditions(&self) -> Vec<Condition> {
        let mut out = Vec::new();
        if self.cfg.wants(ConditionSet::Mean) {
            out.push(Condition::Mean);
        }
        if self.cfg.wants(ConditionSet::Positions) {
            out.extend(RelativePosition::ALL.map(Condition::Position));
        }
        if self.with_controls && self.cfg.wants(ConditionSet::RandomEmbedding) {
            out.push(Condition::RandomEmbedding);
        }
        out
    }

    fn read_task(&self, task: &TaskUnit, layer: usize) -> Result<Vec<LayerTensor>> {
        task.pairs
            .iter()
            .flat_map(|p| p.members())
            .map(|u| self.store.read_layer(&u.id, layer))
            .collect()
    }

    /// Mean, positional and control probes for one task at one layer.
    fn layer_unit(&self, task: &TaskUnit, layer: usize) -> Vec<CellOutcome> {
        let conditions = self.layer_conditions();
        let tensors = match self.read_task(task, layer) {
            Ok(t) => t,
            Err(e) => return conditions.iter().map(|&c| Err(self.failure(task, layer, c, &e))).collect(),
        };
        let means: Vec<Vec<f64>> = tensors.iter().map(|t| mean_pool(t).vector).collect();
        conditions
            .iter()
            .map(|&c| match c {
                Condition::Mean => self.probe(task, layer, c, &means),
                Condition::Position(pos) => {
                    let rows: Vec<Vec<f64>> = tensors.iter().map(|t| position_token(t, pos).vector).collect();
                    self.probe(task, layer, c, &rows)
                }
                Condition::RandomEmbedding => {
                    let noise = MatchedNoiseSpec::from_vectors(
                        format!("{}/L{layer}/mean", self.model),
                        layer,
                        &means,
                        self.cfg.noise_moments,
                        derive_seed(self.cfg.seed, &format!("randemb:{}:{layer}", task.name)),
                        self.cfg.noise_share_by,
                    )
                    .and_then(|(spec, _)| matched_random_features_for(&spec, &task.pairs));
                    match noise {
                        Ok(vs) => {
                            let rows: Vec<Vec<f64>> = vs.into_iter().map(|v| v.vector).collect();
                            self.probe(task, layer, c, &rows)
                        }
                        Err(e) => Err(self.failure(task, layer, c, &e)),
                    }
                }
                Condition::Temporal(_) => unreachable!("temporal probes run separately"),
            })
            .collect()
    }

    /// Temporal probes for one task at one layer, one per grid offset.
    fn temporal_unit(&self, task: &TaskUnit, layer: usize) -> Vec<CellOutcome> {
        let grid = &self.cfg.temporal_grid;
        let samples: Result<Vec<_>> = self.read_task(task, layer).and_then(|tensors| {
            let rate = self.store.header().frame_rate_hz[layer];
            tensors
                .iter()
                .map(|t| temporal_samples(t, self.manifest.alignment(&t.utterance_id), grid, rate))
                .collect()
        });
        let samples = match samples {
            Ok(s) => s,
            Err(e) => return grid.conditions().map(|c| Err(self.failure(task, layer, c, &e))).collect(),
        };
        grid.conditions()
            .enumerate()
            .map(|(k, c)| {
                let rows: Vec<Vec<f64>> = samples.iter().map(|per_offset| per_offset[k].vector.clone()).collect();
                self.probe(task, layer, c, &rows)
            })
            .collect()
    }
}

fn sort_results(rows: &mut [ProbeResult]) {
    rows.sort_by(|a, b| (&a.task, a.layer, a.condition).cmp(&(&b.task, b.layer, b.condition)));
}

fn sort_failures(rows: &mut [FailureRow]) {
    rows.sort_by(|a, b| (&a.task, a.layer, a.condition).cmp(&(&b.task, b.layer, b.condition)));
}

pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Writes a CSV with a header even when there are no rows.
fn write_table<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    if rows.is_empty() {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(header)?;
        w.flush()?;
        Ok(())
    } else {
        write_csv(path, rows)
    }
}

const FAILURE_HEADER: &[&str] = &["model", "task", "layer", "condition", "error"];
const RESULT_HEADER: &[&str] = &[
    "model",
    "task",
    "level",
    "layer",
    "condition",
    "accuracy",
    "stderr",
    "pooled_accuracy",
    "confidence",
    "n_samples",
    "n_folds",
    "failed_folds",
    "converged",
    "config",
];
const SCORE_HEADER: &[&str] = &["task", "level", "layer", "condition", "acc_trained", "acc_untrained", "selection"];

fn store_record(role: &str, path: &Path, store: &StoreReader) -> Result<InputRecord> {
    Ok(InputRecord {
        role: role.into(),
        path: path.to_path_buf(),
        sha256: sha256_file(path)?,
        header_sha256: Some(sha256_hex(&serde_json::to_vec(store.header())?)),
    })
}

fn file_record(role: &str, path: &Path) -> Result<InputRecord> {
    Ok(InputRecord {
        role: role.into(),
        path: path.to_path_buf(),
        sha256: sha256_file(path)?,
        header_sha256: None,
    })
}

/// Loads the manifest (with alignments attached when configured).
pub fn load_campaign_manifest(cfg: &CampaignConfig) -> Result<CorpusManifest> {
    let manifest = load_manifest(&cfg.manifest)?;
    Ok(match &cfg.alignments {
        Some(path) => manifest.with_alignments(load_alignments(path)?),
        None => manifest,
    })
}

fn layer_list(cfg: &CampaignConfig, stores: &[&StoreReader]) -> Result<Vec<usize>> {
    let available = stores.iter().map(|s| s.num_layers()).min().expect("at least one store");
    let range = cfg.layers.unwrap_or(LayerRange {
        first: 0,
        last: available - 1,
    });
    if range.last >= available {
        return Err(Error::Range {
            what: "layer",
            index: range.last,
            limit: available,
        });
    }
    if let Some(l) = cfg.temporal_layer {
        if l >= available {
            return Err(Error::Range {
                what: "temporal layer",
                index: l,
                limit: available,
            });
        }
    }
    Ok((range.first..=range.last).collect())
}

fn preflight(cfg: &CampaignConfig, manifest: &CorpusManifest, tasks: &[TaskUnit], stores: &[&StoreReader]) -> Result<()> {
    let report = validate_corpus(
        manifest,
        ValidationOptions {
            require_alignments: cfg.wants(ConditionSet::Temporal),
        },
    );
    if !report.is_valid() {
        let shown: Vec<String> = report.violations.iter().take(20).map(ToString::to_string).collect();
        return Err(Error::Validation(format!(
            "{} corpus violations: {}",
            report.violations.len(),
            shown.join("; ")
        )));
    }
    for store in stores {
        let missing: Vec<&str> = tasks
            .iter()
            .flat_map(|t| t.pairs.iter().flat_map(|p| p.members()))
            .filter(|u| !store.contains(&u.id))
            .map(|u| u.id.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Validation(format!(
                "store `{}` lacks {} utterances, e.g. {}",
                store.header().model_id,
                missing.len(),
                missing[0]
            )));
        }
    }
    Ok(())
}

/// Best mean-pool layer per task, shallowest on ties.
fn best_mean_layers(results: &[ProbeResult]) -> BTreeMap<String, usize> {
    let mut best: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for r in results.iter().filter(|r| r.condition == Condition::Mean) {
        let e = best.entry(r.task.clone()).or_insert((r.layer, r.accuracy));
        if r.accuracy > e.1 || (r.accuracy == e.1 && r.layer < e.0) {
            *e = (r.layer, r.accuracy);
        }
    }
    best.into_iter().map(|(t, (l, _))| (t, l)).collect()
}

struct StoreRun {
    results: Vec<ProbeResult>,
    failures: Vec<FailureRow>,
    cells: Vec<String>,
}

fn probe_store(probing: &Probing, tasks: &[TaskUnit], layers: &[usize], temporal_layers: Option<&BTreeMap<String, usize>>) -> (StoreRun, BTreeMap<String, usize>) {
    let units: Vec<(&TaskUnit, usize)> = tasks.iter().flat_map(|t| layers.iter().map(move |&l| (t, l))).collect();
    let mut outcomes: Vec<CellOutcome> = units
        .par_iter()
        .flat_map_iter(|(t, l)| probing.layer_unit(t, *l))
        .collect();

    let mut chosen = BTreeMap::new();
    if probing.cfg.wants(ConditionSet::Temporal) {
        let trained_best = {
            let ok: Vec<ProbeResult> = outcomes.iter().filter_map(|o| o.as_ref().ok().cloned()).collect();
            best_mean_layers(&ok)
        };
        let pick = |t: &TaskUnit| -> Option<usize> {
            probing
                .cfg
                .temporal_layer
                .or_else(|| temporal_layers.and_then(|m| m.get(&t.name).copied()))
                .or_else(|| trained_best.get(&t.name).copied())
        };
        let temporal: Vec<CellOutcome> = tasks
            .par_iter()
            .flat_map_iter(|t| match pick(t) {
                Some(layer) => probing.temporal_unit(t, layer),
                None => {
                    let e = Error::DegenerateData("no mean-pool result to choose a temporal layer".into());
                    probing
                        .cfg
                        .temporal_grid
                        .conditions()
                        .map(|c| Err(probing.failure(t, usize::MAX, c, &e)))
                        .collect()
                }
            })
            .collect();
        outcomes.extend(temporal);
        for t in tasks {
            if let Some(l) = pick(t) {
                chosen.insert(t.name.clone(), l);
            }
        }
    }

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => results.push(r),
            Err(f) => {
                log::warn!("{} failed: {}", cell_key(&f.task, f.layer, f.condition), f.error);
                failures.push(f);
            }
        }
    }
    sort_results(&mut results);
    sort_failures(&mut failures);
    let mut cells: Vec<String> = results
        .iter()
        .map(|r| cell_key(&r.task, r.layer, r.condition))
        .chain(failures.iter().map(|f| cell_key(&f.task, f.layer, f.condition)))
        .collect();
    cells.sort();
    (StoreRun { results, failures, cells }, chosen)
}

/// Runs every probe of the campaign and writes its tables and run manifest
/// into `cfg.output_dir`. Validation problems abort before any probe runs;
/// failing probes are recorded in the failures table.
pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignSummary> {
    cfg.check()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| run_inner(cfg))
}

fn run_inner(cfg: &CampaignConfig) -> Result<CampaignSummary> {
    let manifest = load_campaign_manifest(cfg)?;
    let tasks = resolve_tasks(cfg, &manifest)?;
    let store = StoreReader::open(&cfg.store)?;
    let untrained = cfg.untrained_store.as_ref().map(StoreReader::open).transpose()?;
    let mut stores = vec![&store];
    stores.extend(untrained.as_ref());
    let layers = layer_list(cfg, &stores)?;
    preflight(cfg, &manifest, &tasks, &stores)?;

    let mut inputs = vec![file_record("manifest", &cfg.manifest)?];
    if let Some(p) = &cfg.alignments {
        inputs.push(file_record("alignments", p)?);
    }
    inputs.push(store_record("store", &cfg.store, &store)?);
    if let (Some(p), Some(s)) = (&cfg.untrained_store, &untrained) {
        inputs.push(store_record("untrained_store", p, s)?);
    }

    let model = store.header().model_id.clone();
    log::info!(
        "probing {} tasks x {} layers over `{model}` ({} conditions)",
        tasks.len(),
        layers.len(),
        cfg.conditions.len()
    );
    let probing = Probing {
        cfg,
        manifest: &manifest,
        store: &store,
        model: model.clone(),
        with_controls: true,
    };
    let (trained_run, chosen) = probe_store(&probing, &tasks, &layers, None);

    let untrained_run = untrained.as_ref().map(|u| {
        let probing = Probing {
            cfg,
            manifest: &manifest,
            store: u,
            model: u.header().model_id.clone(),
            with_controls: false,
        };
        probe_store(&probing, &tasks, &layers, Some(&chosen)).0
    });

    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;
    write_table(&out.join(RESULTS_FILE), RESULT_HEADER, &trained_run.results)?;
    let mut failures = trained_run.failures.clone();
    let mut scores: Vec<ScoreReport> = Vec::new();
    if let Some(u) = &untrained_run {
        write_table(&out.join(UNTRAINED_RESULTS_FILE), RESULT_HEADER, &u.results)?;
        failures.extend(u.failures.iter().cloned());
        scores = join_scores(&trained_run.results, &u.results);
        write_table(&out.join(SCORES_FILE), SCORE_HEADER, &scores)?;
    }
    failures.sort_by(|a, b| (&a.model, &a.task, a.layer, a.condition).cmp(&(&b.model, &b.task, b.layer, b.condition)));
    write_table(&out.join(FAILURES_FILE), FAILURE_HEADER, &failures)?;

    if cfg.chance_trials > 0 {
        let rows: Vec<ChanceRow> = tasks
            .iter()
            .map(|t| {
                let seed = derive_seed(cfg.seed, &format!("chance:{}", t.name));
                let (lower, upper) = chance_band(t.n_samples(), cfg.k_folds, cfg.chance_trials, seed)?;
                Ok(ChanceRow {
                    task: t.name.clone(),
                    n_samples: t.n_samples(),
                    lower,
                    upper,
                })
            })
            .collect::<Result<_>>()?;
        write_csv(out.join(CHANCE_FILE), &rows)?;
    }

    let config_hash = cfg.config_hash()?;
    let mut run_material = config_hash.clone();
    for i in &inputs {
        run_material.push_str(&i.sha256);
    }
    let run_hash = sha256_hex(run_material.as_bytes());
    let run_manifest = RunManifest {
        format: RUN_MANIFEST_FORMAT,
        run_hash: run_hash.clone(),
        config_hash,
        config: cfg.result_relevant(),
        inputs,
        model: model.clone(),
        untrained_model: untrained.as_ref().map(|u| u.header().model_id.clone()),
        cells: trained_run.cells.clone(),
        untrained_cells: untrained_run.as_ref().map(|u| u.cells.clone()).unwrap_or_default(),
        results: trained_run.results.len(),
        failures: failures.len(),
    };
    let mut w = BufWriter::new(File::create(out.join(RUN_MANIFEST_FILE))?);
    serde_json::to_writer_pretty(&mut w, &run_manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;

    Ok(CampaignSummary {
        output_dir: out.clone(),
        model,
        results: trained_run.results.len(),
        failures: failures.len(),
        untrained_results: untrained_run.as_ref().map_or(0, |u| u.results.len()),
        scores: scores.len(),
        run_hash,
    })
}

// ---------------------------------------------------------------------------
// Report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub model: String,
    pub name: String,
    pub level: String,
    pub is_level: bool,
    pub condition: Condition,
    pub layer: usize,
    pub accuracy: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakRow {
    pub model: String,
    pub name: String,
    pub level: String,
    pub condition: Condition,
    pub best_accuracy: f64,
    pub best_layer: usize,
    pub stderr: f64,
}

impl PeakRow {
    fn new(model: &str, p: PeakReport) -> Self {
        Self {
            model: model.into(),
            name: p.name,
            level: p.level,
            condition: p.condition,
            best_accuracy: p.best_accuracy,
            best_layer: p.best_layer,
            stderr: p.stderr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionRow {
    pub model: String,
    pub name: String,
    pub level: String,
    pub is_level: bool,
    pub layer: usize,
    pub mean: f64,
    pub pos_0: f64,
    pub pos_25: f64,
    pub pos_50: f64,
    pub pos_75: f64,
    pub pos_100: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalRow {
    pub model: String,
    pub name: String,
    pub level: String,
    pub is_level: bool,
    pub offset_ms: i32,
    pub accuracy: f64,
    pub stderr: f64,
    pub argmax_offset_ms: i32,
}

/// Plot-ready long table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub model: String,
    pub task: String,
    pub level: String,
    pub layer: usize,
    pub condition: Condition,
    pub accuracy: f64,
    pub stderr: f64,
    pub confidence: Option<f64>,
    pub selection: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportSummary {
    pub files: Vec<PathBuf>,
    pub models: Vec<String>,
    pub task_peaks: usize,
    /// Set when no projection could be computed, with the reason.
    pub projection_skipped: Option<String>,
}

fn missing_cells(dir: &Path, expected: &[String], results: &[ProbeResult]) -> Vec<String> {
    let present: BTreeSet<String> = results.iter().map(|r| cell_key(&r.task, r.layer, r.condition)).collect();
    expected
        .iter()
        .filter(|c| !present.contains(*c))
        .map(|c| format!("{}:{c}", dir.display()))
        .collect()
}

fn load_results_checked(dir: &Path, file: &str, expected: Option<&[String]>) -> Result<Vec<ProbeResult>> {
    let path = dir.join(file);
    if !path.exists() {
        return Err(Error::Gap(match expected {
            Some(cells) if !cells.is_empty() => cells.iter().map(|c| format!("{}:{c}", dir.display())).collect(),
            _ => vec![format!("{}: no {file}", dir.display())],
        }));
    }
    let results: Vec<ProbeResult> = read_csv(&path)?;
    if let Some(cells) = expected {
        let missing = missing_cells(dir, cells, &results);
        if !missing.is_empty() {
            return Err(Error::Gap(missing));
        }
    }
    if results.is_empty() {
        return Err(Error::Gap(vec![format!("{}: {file} has no rows", dir.display())]));
    }
    Ok(results)
}

fn read_run_manifest(dir: &Path) -> Result<Option<RunManifest>> {
    let path = dir.join(RUN_MANIFEST_FILE);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?))
}

fn curve_rows(model: &str, results: &[ProbeResult]) -> Result<Vec<CurveRow>> {
    let conditions: BTreeSet<Condition> = results.iter().map(|r| r.condition).filter(|c| !c.is_temporal()).collect();
    let mut out = Vec::new();
    for c in conditions {
        let rows: Vec<ProbeResult> = results.iter().filter(|r| r.condition == c).cloned().collect();
        let curves = build_layer_curves(&rows)?;
        for curve in curves.all() {
            for (layer, p) in curve.layers() {
                out.push(CurveRow {
                    model: model.into(),
                    name: curve.name.clone(),
                    level: curve.level.clone(),
                    is_level: curve.is_level,
                    condition: c,
                    layer,
                    accuracy: p.accuracy,
                    stderr: p.stderr,
                });
            }
        }
    }
    Ok(out)
}

/// Turns a campaign directory into analysis tables: layer curves, task and
/// level peaks, positional comparison, temporal profiles, the long table,
/// selection scores (when an untrained table is present in `dir` or given
/// via `untrained_dir`) and the delta-embedding projection at the best
/// mean-pool layer.
pub fn report(dir: &Path, untrained_dir: Option<&Path>) -> Result<ReportSummary> {
    let run = read_run_manifest(dir)?;
    let trained = load_results_checked(dir, RESULTS_FILE, run.as_ref().map(|r| r.cells.as_slice()))?;

    let untrained = match untrained_dir {
        Some(u) => {
            let urun = read_run_manifest(u)?;
            Some(load_results_checked(u, RESULTS_FILE, urun.as_ref().map(|r| r.cells.as_slice()))?)
        }
        None if dir.join(UNTRAINED_RESULTS_FILE).exists() => Some(load_results_checked(
            dir,
            UNTRAINED_RESULTS_FILE,
            run.as_ref().map(|r| r.untrained_cells.as_slice()),
        )?),
        None => None,
    };

    let mut all = trained.clone();
    all.extend(untrained.iter().flatten().cloned());
    let models: Vec<String> = all.iter().map(|r| r.model.clone()).collect::<BTreeSet<_>>().into_iter().collect();

    let mut curves = Vec::new();
    let mut task_peaks = Vec::new();
    let mut level_peaks = Vec::new();
    let mut positions = Vec::new();
    let mut temporal = Vec::new();
    for model in &models {
        let rows: Vec<ProbeResult> = all.iter().filter(|r| &r.model == model).cloned().collect();
        curves.extend(curve_rows(model, &rows)?);
        let mean_rows: Vec<ProbeResult> = rows.iter().filter(|r| r.condition == Condition::Mean).cloned().collect();
        if !mean_rows.is_empty() {
            let c = build_layer_curves(&mean_rows)?;
            task_peaks.extend(c.tasks.iter().filter_map(curve_peak).map(|p| PeakRow::new(model, p)));
            level_peaks.extend(c.levels.iter().filter_map(curve_peak).map(|p| PeakRow::new(model, p)));
            if rows.iter().any(|r| matches!(r.condition, Condition::Position(_))) {
                for p in positional_comparison(&rows)? {
                    positions.push(PositionRow {
                        model: model.clone(),
                        name: p.name,
                        level: p.level,
                        is_level: p.is_level,
                        layer: p.layer,
                        mean: p.mean,
                        pos_0: p.positions[0],
                        pos_25: p.positions[1],
                        pos_50: p.positions[2],
                        pos_75: p.positions[3],
                        pos_100: p.positions[4],
                    });
                }
            }
        }
        for prof in temporal_profile(&rows)? {
            for pt in &prof.points {
                temporal.push(TemporalRow {
                    model: model.clone(),
                    name: prof.name.clone(),
                    level: prof.level.clone(),
                    is_level: prof.is_level,
                    offset_ms: pt.offset_ms,
                    accuracy: pt.accuracy,
                    stderr: pt.stderr,
                    argmax_offset_ms: prof.argmax_offset_ms,
                });
            }
        }
    }

    let scores = untrained.as_ref().map(|u| join_scores(&trained, u)).unwrap_or_default();
    let selection: BTreeMap<(String, usize, Condition), f64> =
        scores.iter().map(|s| ((s.task.clone(), s.layer, s.condition), s.selection)).collect();
    let long: Vec<LongRow> = all
        .iter()
        .map(|r| LongRow {
            model: r.model.clone(),
            task: r.task.clone(),
            level: r.level.clone(),
            layer: r.layer,
            condition: r.condition,
            accuracy: r.accuracy,
            stderr: r.stderr,
            confidence: r.confidence,
            selection: if trained.first().is_some_and(|t| t.model == r.model) {
                selection.get(&r.key()).copied()
            } else {
                None
            },
        })
        .collect();

    let mut files = Vec::new();
    let mut emit = |name: &str, f: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
        let path = dir.join(name);
        f(&path)?;
        files.push(path);
        Ok(())
    };
    emit("curves.csv", &|p| write_csv(p, &curves))?;
    emit("peaks.csv", &|p| write_csv(p, &task_peaks))?;
    emit("level_peaks.csv", &|p| write_csv(p, &level_peaks))?;
    emit("long.csv", &|p| write_csv(p, &long))?;
    if !positions.is_empty() {
        emit("positions.csv", &|p| write_csv(p, &positions))?;
    }
    if !temporal.is_empty() {
        emit("temporal.csv", &|p| write_csv(p, &temporal))?;
    }
    if !scores.is_empty() {
        emit("selection.csv", &|p| write_csv(p, &scores))?;
    }

    let projection_skipped = match &run {
        None => Some("no run manifest".to_string()),
        Some(run) => match project_best_layer(run, &trained)? {
            Some(rows) => {
                emit("projection.csv", &|p| write_csv(p, &rows))?;
                None
            }
            None => Some("campaign inputs are no longer available".to_string()),
        },
    };
    if let Some(why) = &projection_skipped {
        log::warn!("projection skipped: {why}");
    }

    Ok(ReportSummary {
        files,
        models,
        task_peaks: task_peaks.iter().filter(|p| trained.first().is_some_and(|t| t.model == p.model)).count(),
        projection_skipped,
    })
}

/// Projection of mean-pool delta embeddings at the layer where the macro
/// average over all tasks peaks. `None` when the inputs are gone.
fn project_best_layer(run: &RunManifest, trained: &[ProbeResult]) -> Result<Option<Vec<crate::analysis::ProjectionRow>>> {
    let cfg = &run.config;
    if !(cfg.manifest.exists() && cfg.store.exists()) {
        return Ok(None);
    }
    let mut by_layer: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in trained.iter().filter(|r| r.condition == Condition::Mean) {
        let e = by_layer.entry(r.layer).or_insert((0.0, 0));
        e.0 += r.accuracy;
        e.1 += 1;
    }
    let Some(layer) = by_layer
        .iter()
        .map(|(l, (s, n))| (*l, s / *n as f64))
        .fold(None::<(usize, f64)>, |best, (l, a)| match best {
            Some((_, ba)) if ba >= a => best,
            _ => Some((l, a)),
        })
        .map(|(l, _)| l)
    else {
        return Ok(None);
    };
    let manifest = load_campaign_manifest(cfg)?;
    let tasks = resolve_tasks(cfg, &manifest)?;
    let store = StoreReader::open(&cfg.store)?;
    let pairs: Vec<&MinimalPair> = tasks.iter().flat_map(|t| t.pairs.iter().copied()).collect();
    let deltas = delta_embeddings_for(&store, &manifest, &pairs, layer, Condition::Mean)?;
    let vectors: Vec<Vec<f64>> = deltas.deltas.iter().map(|d| d.delta.clone()).collect();
    let projection = project_2d(&vectors)?;
    Ok(Some(projection_rows(&deltas.deltas, &projection)))
}

/// Selection-score join of two result tables on disk.
pub fn score_tables(trained: &Path, untrained: &Path, out: &Path) -> Result<Vec<ScoreReport>> {
    let t: Vec<ProbeResult> = read_csv(trained)?;
    let u: Vec<ProbeResult> = read_csv(untrained)?;
    let scores = join_scores(&t, &u);
    write_table(out, SCORE_HEADER, &scores)?;
    Ok(scores)
}
