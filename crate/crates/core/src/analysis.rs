//! Aggregation of probe results: layer curves, peaks, positional and
//! temporal comparisons, delta embeddings and their 2-D projection.
//!
//! Level-wise numbers are unweighted macro-averages over the tasks of that
//! level. A level's peak is the peak of its macro-curve.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusManifest, MinimalPair};
use crate::pooling::{pool, Condition, RelativePosition};
use crate::probe::ProbeResult;
use crate::store::StoreReader;
use crate::{Error, Result};

/// Minimum share of pairs that must survive missing-data skips.
pub const MIN_PAIR_SURVIVAL: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub accuracy: f64,
    pub stderr: f64,
}

/// Accuracy per layer for one task or one level, contiguous from
/// `first_layer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCurve {
    pub name: String,
    pub level: String,
    /// True for a level macro-curve.
    pub is_level: bool,
    pub condition: Condition,
    pub first_layer: usize,
    pub points: Vec<CurvePoint>,
}

impl LayerCurve {
    pub fn layers(&self) -> impl Iterator<Item = (usize, &CurvePoint)> + '_ {
        self.points.iter().enumerate().map(|(i, p)| (self.first_layer + i, p))
    }

    pub fn at(&self, layer: usize) -> Option<&CurvePoint> {
        layer.checked_sub(self.first_layer).and_then(|i| self.points.get(i))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CurveSet {
    pub tasks: Vec<LayerCurve>,
    pub levels: Vec<LayerCurve>,
}

impl CurveSet {
    pub fn all(&self) -> impl Iterator<Item = &LayerCurve> + '_ {
        self.tasks.iter().chain(&self.levels)
    }
}

/// Unweighted mean of accuracies; stderr of that mean assuming independent
/// task estimates.
fn macro_point(points: &[CurvePoint]) -> CurvePoint {
    let m = points.len() as f64;
    CurvePoint {
        accuracy: points.iter().map(|p| p.accuracy).sum::<f64>() / m,
        stderr: points.iter().map(|p| p.stderr * p.stderr).sum::<f64>().sqrt() / m,
    }
}

/// One curve per task and one macro-curve per level. All results must share
/// a condition and every task must cover every layer between the smallest
/// and largest layer present.
pub fn build_layer_curves(results: &[ProbeResult]) -> Result<CurveSet> {
    let Some(first) = results.first() else {
        return Ok(CurveSet::default());
    };
    let condition = first.condition;
    if results.iter().any(|r| r.condition != condition) {
        return Err(Error::Argument("layer curves need results from a single condition".into()));
    }
    let lo = results.iter().map(|r| r.layer).min().expect("nonempty");
    let hi = results.iter().map(|r| r.layer).max().expect("nonempty");

    let mut by_task: BTreeMap<&str, (&str, BTreeMap<usize, CurvePoint>)> = BTreeMap::new();
    for r in results {
        let entry = by_task.entry(r.task.as_str()).or_insert((r.level.as_str(), BTreeMap::new()));
        if entry.0 != r.level {
            return Err(Error::Integrity(format!("task `{}` appears under two levels", r.task)));
        }
        let point = CurvePoint {
            accuracy: r.accuracy,
            stderr: r.stderr,
        };
        if entry.1.insert(r.layer, point).is_some() {
            return Err(Error::Duplicate(format!("task `{}` layer {} {}", r.task, r.layer, condition)));
        }
    }

    let mut gaps = Vec::new();
    for (task, (_, layers)) in &by_task {
        for l in lo..=hi {
            if !layers.contains_key(&l) {
                gaps.push(format!("{task}/L{l}/{condition}"));
            }
        }
    }
    if !gaps.is_empty() {
        return Err(Error::Gap(gaps));
    }

    let tasks: Vec<LayerCurve> = by_task
        .iter()
        .map(|(task, (level, layers))| LayerCurve {
            name: task.to_string(),
            level: level.to_string(),
            is_level: false,
            condition,
            first_layer: lo,
            points: layers.values().copied().collect(),
        })
        .collect();

    let mut by_level: BTreeMap<&str, Vec<&LayerCurve>> = BTreeMap::new();
    for c in &tasks {
        by_level.entry(c.level.as_str()).or_default().push(c);
    }
    let levels = by_level
        .into_iter()
        .map(|(level, curves)| LayerCurve {
            name: level.to_string(),
            level: level.to_string(),
            is_level: true,
            condition,
            first_layer: lo,
            points: (0..=hi - lo)
                .map(|i| macro_point(&curves.iter().map(|c| c.points[i]).collect::<Vec<_>>()))
                .collect(),
        })
        .collect();

    Ok(CurveSet { tasks, levels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakReport {
    pub name: String,
    pub level: String,
    pub is_level: bool,
    pub condition: Condition,
    pub best_accuracy: f64,
    pub best_layer: usize,
    pub stderr: f64,
}

/// Best accuracy and its layer; ties go to the shallower layer.
pub fn curve_peak(curve: &LayerCurve) -> Option<PeakReport> {
    let (layer, point) = curve
        .layers()
        .fold(None::<(usize, &CurvePoint)>, |best, (l, p)| match best {
            Some((_, bp)) if bp.accuracy >= p.accuracy => best,
            _ => Some((l, p)),
        })?;
    Some(PeakReport {
        name: curve.name.clone(),
        level: curve.level.clone(),
        is_level: curve.is_level,
        condition: curve.condition,
        best_accuracy: point.accuracy,
        best_layer: layer,
        stderr: point.stderr,
    })
}

pub fn peak_accuracy<'a>(curves: impl IntoIterator<Item = &'a LayerCurve>) -> Vec<PeakReport> {
    curves.into_iter().filter_map(curve_peak).collect()
}

/// Single-token vs mean-pool accuracy at the best mean-pool layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionalComparison {
    pub name: String,
    pub level: String,
    pub is_level: bool,
    pub layer: usize,
    pub mean: f64,
    /// Accuracy at 0, 25, 50, 75 and 100 percent.
    pub positions: [f64; 5],
}

/// `results` must hold mean-pool rows and all five positional conditions for
/// every task at its best mean-pool layer (level rows use the level's best
/// layer).
pub fn positional_comparison(results: &[ProbeResult]) -> Result<Vec<PositionalComparison>> {
    let mean_rows: Vec<ProbeResult> = results.iter().filter(|r| r.condition == Condition::Mean).cloned().collect();
    let curves = build_layer_curves(&mean_rows)?;
    let cell: BTreeMap<(&str, usize, Condition), f64> = results
        .iter()
        .map(|r| ((r.task.as_str(), r.layer, r.condition), r.accuracy))
        .collect();
    let task_level: BTreeMap<&str, &str> = results.iter().map(|r| (r.task.as_str(), r.level.as_str())).collect();

    let mut gaps = Vec::new();
    let mut lookup = |task: &str, layer: usize, c: Condition| -> f64 {
        cell.get(&(task, layer, c)).copied().unwrap_or_else(|| {
            gaps.push(format!("{task}/L{layer}/{c}"));
            f64::NAN
        })
    };

    let mut out = Vec::new();
    for curve in &curves.tasks {
        let peak = curve_peak(curve).expect("nonempty curve");
        let positions = RelativePosition::ALL.map(|p| lookup(&curve.name, peak.best_layer, Condition::Position(p)));
        out.push(PositionalComparison {
            name: curve.name.clone(),
            level: curve.level.clone(),
            is_level: false,
            layer: peak.best_layer,
            mean: peak.best_accuracy,
            positions,
        });
    }
    for curve in &curves.levels {
        let peak = curve_peak(curve).expect("nonempty curve");
        let tasks: Vec<&str> = task_level
            .iter()
            .filter(|(_, l)| **l == curve.level)
            .map(|(t, _)| *t)
            .collect();
        let positions = RelativePosition::ALL.map(|p| {
            let vals: Vec<f64> = tasks
                .iter()
                .map(|t| lookup(t, peak.best_layer, Condition::Position(p)))
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        });
        out.push(PositionalComparison {
            name: curve.name.clone(),
            level: curve.level.clone(),
            is_level: true,
            layer: peak.best_layer,
            mean: peak.best_accuracy,
            positions,
        });
    }
    if !gaps.is_empty() {
        gaps.sort();
        gaps.dedup();
        return Err(Error::Gap(gaps));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalPoint {
    pub offset_ms: i32,
    pub accuracy: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalProfile {
    pub name: String,
    pub level: String,
    pub is_level: bool,
    pub points: Vec<TemporalPoint>,
    /// Offset of maximal accuracy; ties go to the smallest |offset|, then to
    /// the earlier offset.
    pub argmax_offset_ms: i32,
}

fn argmax_offset(points: &[TemporalPoint]) -> i32 {
    points
        .iter()
        .max_by(|a, b| {
            a.accuracy
                .total_cmp(&b.accuracy)
                .then_with(|| b.offset_ms.abs().cmp(&a.offset_ms.abs()))
                .then_with(|| b.offset_ms.cmp(&a.offset_ms))
        })
        .map_or(0, |p| p.offset_ms)
}

/// Per-task and per-level profiles over the temporal conditions in
/// `results`. Every task must cover every offset that appears.
pub fn temporal_profile(results: &[ProbeResult]) -> Result<Vec<TemporalProfile>> {
    let temporal: Vec<&ProbeResult> = results.iter().filter(|r| r.condition.is_temporal()).collect();
    let offsets: BTreeSet<i32> = temporal
        .iter()
        .filter_map(|r| match r.condition {
            Condition::Temporal(o) => Some(o),
            _ => None,
        })
        .collect();
    let mut by_task: BTreeMap<&str, (&str, BTreeMap<i32, CurvePoint>)> = BTreeMap::new();
    for r in &temporal {
        let Condition::Temporal(o) = r.condition else { unreachable!() };
        let e = by_task.entry(r.task.as_str()).or_insert((r.level.as_str(), BTreeMap::new()));
        if e.1.insert(o, CurvePoint { accuracy: r.accuracy, stderr: r.stderr }).is_some() {
            return Err(Error::Duplicate(format!("task `{}` offset {o}", r.task)));
        }
    }
    let mut gaps = Vec::new();
    for (task, (_, pts)) in &by_task {
        for o in &offsets {
            if !pts.contains_key(o) {
                gaps.push(format!("{task}/t:{o}"));
            }
        }
    }
    if !gaps.is_empty() {
        return Err(Error::Gap(gaps));
    }

    let mut out = Vec::new();
    let mut by_level: BTreeMap<&str, Vec<&BTreeMap<i32, CurvePoint>>> = BTreeMap::new();
    for (task, (level, pts)) in &by_task {
        by_level.entry(level).or_default().push(pts);
        let points: Vec<TemporalPoint> = pts
            .iter()
            .map(|(&o, p)| TemporalPoint {
                offset_ms: o,
                accuracy: p.accuracy,
                stderr: p.stderr,
            })
            .collect();
        out.push(TemporalProfile {
            name: task.to_string(),
            level: level.to_string(),
            is_level: false,
            argmax_offset_ms: argmax_offset(&points),
            points,
        });
    }
    for (level, tasks) in by_level {
        let points: Vec<TemporalPoint> = offsets
            .iter()
            .map(|o| {
                let p = macro_point(&tasks.iter().map(|t| t[o]).collect::<Vec<_>>());
                TemporalPoint {
                    offset_ms: *o,
                    accuracy: p.accuracy,
                    stderr: p.stderr,
                }
            })
            .collect();
        out.push(TemporalProfile {
            name: level.to_string(),
            level: level.to_string(),
            is_level: true,
            argmax_offset_ms: argmax_offset(&points),
            points,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Delta embeddings and projection

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaEmbedding {
    pub pair_id: String,
    pub layer: usize,
    pub condition: Condition,
    pub level: String,
    pub task: String,
    /// Acceptable minus unacceptable.
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSet {
    pub deltas: Vec<DeltaEmbedding>,
    pub skipped: usize,
}

pub fn delta_vector(acceptable: &[f64], unacceptable: &[f64]) -> Vec<f64> {
    acceptable.iter().zip(unacceptable).map(|(a, b)| a - b).collect()
}

/// Delta embedding for every pair whose two members can be pooled from the
/// store. Pairs with a missing member are skipped and counted; fewer than
/// [`MIN_PAIR_SURVIVAL`] surviving pairs is an error.
pub fn delta_embeddings(
    store: &StoreReader,
    manifest: &CorpusManifest,
    layer: usize,
    condition: Condition,
) -> Result<DeltaSet> {
    let pairs: Vec<&MinimalPair> = manifest.pairs().iter().collect();
    delta_embeddings_for(store, manifest, &pairs, layer, condition)
}

/// As [`delta_embeddings`], restricted to `pairs`.
pub fn delta_embeddings_for(
    store: &StoreReader,
    manifest: &CorpusManifest,
    pairs: &[&MinimalPair],
    layer: usize,
    condition: Condition,
) -> Result<DeltaSet> {
    if layer >= store.num_layers() {
        return Err(Error::Range {
            what: "layer",
            index: layer,
            limit: store.num_layers(),
        });
    }
    let rate = store.header().frame_rate_hz[layer];
    let mut deltas = Vec::new();
    let mut skipped = 0;
    for pair in pairs {
        let pooled = |id: &str| -> Result<Vec<f64>> {
            let t = store.read_layer(id, layer)?;
            Ok(pool(&t, condition, manifest.alignment(id), rate)?.vector)
        };
        match (pooled(&pair.pos.id), pooled(&pair.neg.id)) {
            (Ok(pos), Ok(neg)) => {
                let level = manifest.phenomenon(&pair.phenomenon).map(|p| p.level.to_string()).unwrap_or_default();
                deltas.push(DeltaEmbedding {
                    pair_id: pair.id.clone(),
                    layer,
                    condition,
                    level,
                    task: pair.phenomenon.clone(),
                    delta: delta_vector(&pos, &neg),
                });
            }
            (Err(e @ (Error::Lookup(_) | Error::AlignmentMissing(_))), _) | (_, Err(e @ (Error::Lookup(_) | Error::AlignmentMissing(_)))) => {
                log::debug!("pair {} skipped: {e}", pair.id);
                skipped += 1;
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    let total = pairs.len();
    if total > 0 && (deltas.len() as f64) < MIN_PAIR_SURVIVAL * total as f64 {
        return Err(Error::InsufficientData(format!(
            "only {} of {total} pairs have both members available",
            deltas.len()
        )));
    }
    if skipped > 0 {
        log::warn!("{skipped} pairs skipped for missing data");
    }
    Ok(DeltaSet { deltas, skipped })
}

/// Deterministic PCA onto two axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub points: Vec<[f64; 2]>,
    pub mean: Vec<f64>,
    /// Unit principal axes, largest-magnitude loading positive.
    pub components: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
    pub explained_variance_ratio: [f64; 2],
    /// Fewer than two nonzero eigenvalues; the missing axes are zero.
    pub degenerate: bool,
}

/// Relative threshold below which an eigenvalue counts as zero.
const EIGEN_RTOL: f64 = 1e-10;

fn fix_sign(v: &mut [f64]) {
    let (idx, _) = v
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |(bi, bv), (i, x)| if x.abs() > bv { (i, x.abs()) } else { (bi, bv) });
    if v.get(idx).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Mean-centers the rows of `data` and projects them onto the top two
/// principal components (descending eigenvalue).
pub fn project_2d(data: &[Vec<f64>]) -> Result<Projection> {
    let n = data.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!("projection needs at least 3 vectors, got {n}")));
    }
    let d = data[0].len();
    if d == 0 || data.iter().any(|v| v.len() != d) {
        return Err(Error::Input("projection inputs must share a nonzero dimension".into()));
    }
    if data.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Input("projection inputs contain non-finite values".into()));
    }
    let mut mean = vec![0.0; d];
    for v in data {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| data[i][j] - mean[j]);
    let denom = (n - 1) as f64;
    let total_var = centered.iter().map(|x| x * x).sum::<f64>() / denom;

    // Eigen-decompose the smaller of the covariance and Gram matrices.
    let (values, axes): (Vec<f64>, Vec<Vec<f64>>) = if d <= n {
        let cov = centered.transpose() * &centered / denom;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        order
            .iter()
            .take(2)
            .map(|&k| (eig.eigenvalues[k], eig.eigenvectors.column(k).iter().copied().collect()))
            .unzip()
    } else {
        let gram = &centered * centered.transpose() / denom;
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        order
            .iter()
            .take(2)
            .map(|&k| {
                let u = eig.eigenvectors.column(k);
                let mut axis: Vec<f64> = (0..d).map(|j| centered.column(j).dot(&u)).collect();
                let norm = axis.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    axis.iter_mut().for_each(|x| *x /= norm);
                }
                (eig.eigenvalues[k], axis)
            })
            .unzip()
    };

    let scale = values[0].abs().max(f64::MIN_POSITIVE);
    let mut degenerate = false;
    let mut comps: [Vec<f64>; 2] = [vec![0.0; d], vec![0.0; d]];
    let mut eigs = [0.0; 2];
    for k in 0..2 {
        let nonzero = values.get(k).is_some_and(|&v| v > EIGEN_RTOL * scale && v > 0.0);
        if nonzero {
            comps[k] = axes[k].clone();
            fix_sign(&mut comps[k]);
            eigs[k] = values[k];
        } else {
            degenerate = true;
        }
    }
    if degenerate {
        log::warn!("projection is rank-deficient; missing axes are zeroed");
    }

    let points = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let p = |c: &Vec<f64>| row.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
            [p(&comps[0]), p(&comps[1])]
        })
        .collect();
    let ratio = |e: f64| if total_var > 0.0 { e / total_var } else { 0.0 };
    Ok(Projection {
        points,
        mean,
        explained_variance_ratio: [ratio(eigs[0]), ratio(eigs[1])],
        components: comps,
        eigenvalues: eigs,
        degenerate,
    })
}

/// Mean silhouette coefficient with Euclidean distance. Points in singleton
/// clusters score 0.
pub fn silhouette_score(points: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(Error::Input("silhouette needs one label per point".into()));
    }
    let clusters: BTreeSet<usize> = labels.iter().copied().collect();
    if clusters.len() < 2 {
        return Err(Error::InsufficientData("silhouette needs at least two clusters".into()));
    }
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (j, q) in points.iter().enumerate() {
            if i != j {
                let e = sums.entry(labels[j]).or_insert((0.0, 0));
                e.0 += dist(p, q);
                e.1 += 1;
            }
        }
        let own = sums.get(&labels[i]).copied().unwrap_or((0.0, 0));
        if own.1 == 0 {
            continue;
        }
        let a = own.0 / own.1 as f64;
        let b = sums
            .iter()
            .filter(|(c, _)| **c != labels[i])
            .map(|(_, (s, k))| s / *k as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / points.len() as f64)
}

/// One row of a projection table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRow {
    pub pair_id: String,
    pub level: String,
    pub task: String,
    pub x: f64,
    pub y: f64,
}

pub fn projection_rows(deltas: &[DeltaEmbedding], projection: &Projection) -> Vec<ProjectionRow> {
    deltas
        .iter()
        .zip(&projection.points)
        .map(|(d, p)| ProjectionRow {
            pair_id: d.pair_id.clone(),
            level: d.level.clone(),
            task: d.task.clone(),
            x: p[0],
            y: p[1],
        })
        .collect()
}

#[derive(Debug, Deserialize)]
struct ImportedPoint {
    pair_id: String,
    x: f64,
    y: f64,
}

/// Reads externally computed 2-D coordinates (CSV with `pair_id,x,y`) and
/// labels them from the manifest.
pub fn import_projection(path: impl AsRef<Path>, manifest: &CorpusManifest) -> Result<Vec<ProjectionRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in reader.deserialize() {
        let p: ImportedPoint = rec?;
        let pair = manifest
            .pairs()
            .iter()
            .find(|q| q.id == p.pair_id)
            .ok_or_else(|| Error::Lookup(format!("pair `{}` not in manifest", p.pair_id)))?;
        if !(p.x.is_finite() && p.y.is_finite()) {
            return Err(Error::Input(format!("non-finite coordinate for `{}`", p.pair_id)));
        }
        let level = manifest.phenomenon(&pair.phenomenon).map(|ph| ph.level.to_string()).unwrap_or_default();
        rows.push(ProjectionRow {
            pair_id: p.pair_id,
            level,
            task: pair.phenomenon.clone(),
            x: p.x,
            y: p.y,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::TrainConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn row(task: &str, level: &str, layer: usize, condition: Condition, acc: f64) -> ProbeResult {
        ProbeResult {
            model: "m".into(),
            task: task.into(),
            level: level.into(),
            layer,
            condition,
            accuracy: acc,
            stderr: 0.01,
            pooled_accuracy: acc,
            confidence: None,
            n_samples: 10,
            n_folds: 5,
            failed_folds: 0,
            converged: true,
            config: TrainConfig::default().fingerprint(),
        }
    }

    #[test]
    fn two_point_curve() {
        let rs = [row("a", "syntax", 0, Condition::Mean, 0.6), row("a", "syntax", 1, Condition::Mean, 0.9)];
        let c = build_layer_curves(&rs).unwrap();
        assert_eq!(c.tasks.len(), 1);
        let accs: Vec<f64> = c.tasks[0].points.iter().map(|p| p.accuracy).collect();
        assert_eq!(accs, vec![0.6, 0.9]);
    }

    #[test]
    fn level_is_macro_average() {
        let rs = [row("a", "syntax", 0, Condition::Mean, 0.8), row("b", "syntax", 0, Condition::Mean, 0.6)];
        let c = build_layer_curves(&rs).unwrap();
        assert!((c.levels[0].points[0].accuracy - 0.7).abs() < 1e-15);
    }

    #[test]
    fn missing_layer_is_gap() {
        let rs = [
            row("a", "syntax", 0, Condition::Mean, 0.8),
            row("a", "syntax", 2, Condition::Mean, 0.6),
            row("b", "syntax", 1, Condition::Mean, 0.6),
        ];
        match build_layer_curves(&rs) {
            Err(Error::Gap(g)) => assert!(g.contains(&"a/L1/mean".to_string())),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mixed_conditions_rejected() {
        let rs = [row("a", "s", 0, Condition::Mean, 0.8), row("a", "s", 1, Condition::Temporal(0), 0.6)];
        assert!(build_layer_curves(&rs).is_err());
    }

    #[test]
    fn peak_examples() {
        let mut rs = Vec::new();
        for l in 0..12 {
            let acc = match l {
                5 => 0.92,
                11 => 0.85,
                _ => 0.6,
            };
            rs.push(row("a", "s", l, Condition::Mean, acc));
        }
        let c = build_layer_curves(&rs).unwrap();
        let p = curve_peak(&c.tasks[0]).unwrap();
        assert_eq!((p.best_accuracy, p.best_layer), (0.92, 5));

        let flat: Vec<_> = (0..4).map(|l| row("a", "s", l, Condition::Mean, 0.7)).collect();
        let p = curve_peak(&build_layer_curves(&flat).unwrap().tasks[0]).unwrap();
        assert_eq!(p.best_layer, 0);
    }

    #[test]
    fn level_peak_uses_macro_curve() {
        let mut rs = Vec::new();
        for l in 0..8 {
            rs.push(row("a", "s", l, Condition::Mean, if l == 4 { 0.9 } else { 0.5 }));
            rs.push(row("b", "s", l, Condition::Mean, if l == 6 { 0.8 } else { 0.5 }));
        }
        let c = build_layer_curves(&rs).unwrap();
        let p = curve_peak(&c.levels[0]).unwrap();
        assert_eq!((p.best_accuracy, p.best_layer), (0.7, 4));
        assert!(p.best_accuracy < 0.9);
    }

    fn temporal_rows(task: &str, pts: &[(i32, f64)]) -> Vec<ProbeResult> {
        pts.iter().map(|&(o, a)| row(task, "s", 3, Condition::Temporal(o), a)).collect()
    }

    #[test]
    fn temporal_examples() {
        let p = temporal_profile(&temporal_rows("a", &[(-500, 0.9), (0, 0.7), (500, 0.6)])).unwrap();
        assert_eq!(p[0].argmax_offset_ms, -500);

        let p = temporal_profile(&temporal_rows("a", &[(-500, 0.7), (0, 0.7), (500, 0.7)])).unwrap();
        assert_eq!(p[0].argmax_offset_ms, 0);

        let mut rs = temporal_rows("a", &[(-500, 0.9), (0, 0.7), (500, 0.5)]);
        rs.extend(temporal_rows("b", &[(-500, 0.7), (0, 0.5), (500, 0.7)]));
        let p = temporal_profile(&rs).unwrap();
        let level = p.iter().find(|t| t.is_level).unwrap();
        let accs: Vec<f64> = level.points.iter().map(|t| t.accuracy).collect();
        assert_eq!(accs, vec![0.8, 0.6, 0.6]);
    }

    #[test]
    fn temporal_gap() {
        let mut rs = temporal_rows("a", &[(-500, 0.9), (0, 0.7), (500, 0.6)]);
        rs.extend(temporal_rows("b", &[(-500, 0.9), (0, 0.7)]));
        assert!(matches!(temporal_profile(&rs), Err(Error::Gap(_))));
    }

    #[test]
    fn positional_at_best_layer() {
        let mut rs = Vec::new();
        for l in 0..3 {
            rs.push(row("a", "s", l, Condition::Mean, [0.6, 0.9, 0.7][l]));
            for (i, p) in RelativePosition::ALL.iter().enumerate() {
                rs.push(row("a", "s", l, Condition::Position(*p), 0.5 + 0.01 * i as f64 + 0.1 * l as f64));
            }
        }
        let cmp = positional_comparison(&rs).unwrap();
        assert_eq!(cmp[0].layer, 1);
        assert_eq!(cmp[0].mean, 0.9);
        assert!((cmp[0].positions[2] - 0.62).abs() < 1e-12);
        assert_eq!(cmp.len(), 2);
    }

    #[test]
    fn delta_examples() {
        assert_eq!(delta_vector(&[0.5, 0.5], &[0.5, 0.5]), vec![0.0, 0.0]);
        assert_eq!(delta_vector(&[1.0, 0.0], &[0.0, 1.0]), vec![1.0, -1.0]);
        let a = [0.3, -2.0, 7.5];
        let b = [1.25, 4.0, -0.5];
        let fwd = delta_vector(&a, &b);
        let back = delta_vector(&b, &a);
        assert!(fwd.iter().zip(&back).all(|(x, y)| *x == -*y));
    }

    #[test]
    fn rank_two_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u: Vec<f64> = (0..10).map(|_| StandardNormal.sample(&mut rng)).collect();
        let v: Vec<f64> = (0..10).map(|_| StandardNormal.sample(&mut rng)).collect();
        let offset: Vec<f64> = (0..10).map(|j| j as f64).collect();
        let data: Vec<Vec<f64>> = (0..40)
            .map(|_| {
                let (a, b): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
                (0..10).map(|j| offset[j] + 3.0 * a * u[j] + b * v[j]).collect()
            })
            .collect();
        let p = project_2d(&data).unwrap();
        assert!(!p.degenerate);
        for (x, pt) in data.iter().zip(&p.points) {
            for j in 0..10 {
                let rec = p.mean[j] + pt[0] * p.components[0][j] + pt[1] * p.components[1][j];
                assert!((rec - x[j]).abs() < 1e-9);
            }
        }
        assert!((p.explained_variance_ratio[0] + p.explained_variance_ratio[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn wide_data_uses_gram_route() {
        let data: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..30).map(|j| ((i * 7 + j * 3) % 11) as f64).collect())
            .collect();
        let p = project_2d(&data).unwrap();
        // Compare against the covariance route on the transposed problem size.
        let mut padded = data.clone();
        for _ in 0..30 {
            padded.push(padded[0].clone());
        }
        let q = project_2d(&padded).unwrap();
        for k in 0..2 {
            let dot: f64 = p.components[k].iter().zip(&q.components[k]).map(|(a, b)| a * b).sum();
            assert!(dot.abs() > 0.5);
        }
    }

    #[test]
    fn collinear_data_is_degenerate() {
        let data: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 2.0 * i as f64, 0.0]).collect();
        let p = project_2d(&data).unwrap();
        assert!(p.degenerate);
        assert!(p.points.iter().all(|pt| pt[1] == 0.0));
        assert!(project_2d(&data[..2]).is_err());
    }

    #[test]
    fn projection_is_deterministic() {
        let data: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64, (i % 3) as f64]).collect();
        assert_eq!(project_2d(&data).unwrap(), project_2d(&data).unwrap());
    }

    #[test]
    fn silhouette_simple() {
        let pts = [[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
        let s = silhouette_score(&pts, &[0, 0, 1, 1]).unwrap();
        assert!(s > 0.85);
        let s = silhouette_score(&pts, &[0, 1, 0, 1]).unwrap();
        assert!(s < 0.0);
        assert!(silhouette_score(&pts, &[0, 0, 0, 0]).is_err());
    }
}
