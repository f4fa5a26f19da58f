//! Synthetic corpora and stores with a planted, known signal.
//!
//! Every utterance's frames are `base(pair) + noise + s * snr * u(layer)`,
//! where `s` is +1 for the acceptable member and -1 for the other, `u` is a
//! unit direction per layer and the noise is scaled so that each coordinate
//! of a mean-pooled vector has unit variance. `snr` is therefore the norm of
//! the planted component of a pooled vector over the per-coordinate noise
//! standard deviation. A fraction `pair_shared` of that variance is shared by
//! both members of a pair.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    save_alignments, save_manifest, AlignmentSpan, CorpusManifest, LinguisticLevel, MinimalPair, Phenomenon, Suite,
    Utterance,
};
use crate::hashing::derive_seed;
use crate::store::{LayerTensor, Rational, StoreHeader, StoreWriter};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub model_id: String,
    pub trained: bool,
    pub n_tasks: usize,
    pub pairs_per_task: usize,
    /// Levels assigned to tasks round-robin.
    pub levels: Vec<LinguisticLevel>,
    pub dim: usize,
    pub num_layers: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub frame_rate_hz: u32,
    /// Planted signal strength per layer; missing entries are 0.
    pub snr: Vec<f64>,
    /// Share of pooled noise variance common to both members of a pair.
    pub pair_shared: f64,
    /// When set, only frames within `[onset + lo, onset + hi)` ms carry the
    /// signal, at `snr` relative to single-frame noise.
    pub signal_window_ms: Option<[i32; 2]>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            model_id: "synthetic".into(),
            trained: true,
            n_tasks: 1,
            pairs_per_task: 200,
            levels: LinguisticLevel::ALL.to_vec(),
            dim: 32,
            num_layers: 4,
            frames_min: 20,
            frames_max: 60,
            frame_rate_hz: 50,
            snr: vec![0.0, 0.0, 4.0, 0.0],
            pair_shared: 0.5,
            signal_window_ms: None,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn check(&self) -> Result<()> {
        if self.n_tasks == 0 || self.pairs_per_task == 0 || self.dim == 0 || self.num_layers == 0 {
            return Err(Error::Argument("synthetic corpus dimensions must be positive".into()));
        }
        if self.frames_min == 0 || self.frames_min > self.frames_max {
            return Err(Error::Argument("need 0 < frames_min <= frames_max".into()));
        }
        if self.levels.is_empty() || self.frame_rate_hz == 0 {
            return Err(Error::Argument("need at least one level and a positive frame rate".into()));
        }
        if !(0.0..=1.0).contains(&self.pair_shared) {
            return Err(Error::Argument("pair_shared must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn snr_at(&self, layer: usize) -> f64 {
        self.snr.get(layer).copied().unwrap_or(0.0)
    }

    pub fn frame_rate(&self) -> Rational {
        Rational::integer(self.frame_rate_hz)
    }

    fn rng(&self, key: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, key))
    }

    fn frames_of(&self, utterance_id: &str) -> usize {
        self.rng(&format!("len:{utterance_id}")).random_range(self.frames_min..=self.frames_max)
    }

    fn direction(&self, layer: usize) -> Vec<f64> {
        let mut rng = self.rng(&format!("dir:{layer}"));
        let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }

    fn gaussian(&self, key: &str, scale: f64) -> Vec<f64> {
        let mut rng = self.rng(key);
        (0..self.dim)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect()
    }
}

fn level_suite(level: LinguisticLevel) -> Suite {
    if level == LinguisticLevel::Concept {
        Suite::Comps
    } else {
        Suite::Blimp
    }
}

/// Manifest and alignment spans for `spec`. Texts differ in exactly one word.
pub fn synthetic_manifest(spec: &SyntheticSpec) -> Result<CorpusManifest> {
    spec.check()?;
    let mut phenomena = Vec::new();
    let mut pairs = Vec::new();
    let mut spans = BTreeMap::new();
    for t in 0..spec.n_tasks {
        let level = spec.levels[t % spec.levels.len()];
        let task = format!("task{t:02}");
        phenomena.push(Phenomenon {
            id: task.clone(),
            name: format!("synthetic {level} task {t}"),
            level,
            suite: level_suite(level),
        });
        for i in 0..spec.pairs_per_task {
            let pair_id = format!("{task}-p{i:04}");
            let member = |suffix: &str, label: u8, word: &str| -> Utterance {
                let id = format!("{pair_id}{suffix}");
                let frames = spec.frames_of(&id);
                Utterance {
                    text: format!("sentence {i} has {word} here"),
                    label,
                    audio_ref: Some(format!("audio/{id}.wav")),
                    duration_ms: Some((frames as u64 * 1000) / u64::from(spec.frame_rate_hz)),
                    base_audio_id: Some(pair_id.clone()),
                    critical_word: Some(word.to_string()),
                    id,
                }
            };
            let pos = member("a", 1, "cats");
            let neg = member("b", 0, "cat");
            for u in [&pos, &neg] {
                let duration = u.duration_ms.expect("set above");
                let onset = spec.rng(&format!("onset:{pair_id}")).random_range(0..=duration / 2);
                let offset = (onset + 300).min(duration).max(onset + 1);
                spans.insert(u.id.clone(), AlignmentSpan { onset_ms: onset, offset_ms: offset });
            }
            pairs.push(MinimalPair {
                id: pair_id,
                pos,
                neg,
                phenomenon: task.clone(),
                critical_word: "cats".into(),
                critical_word_index: 3,
            });
        }
    }
    Ok(CorpusManifest::new(phenomena, pairs)?.with_alignments(spans))
}

/// All layers for one utterance of `pair`.
pub fn synthetic_tensors(spec: &SyntheticSpec, manifest: &CorpusManifest, pair: &MinimalPair, utterance: &Utterance) -> Result<Vec<LayerTensor>> {
    let frames = spec.frames_of(&utterance.id);
    let sign = if utterance.label == 1 { 1.0 } else { -1.0 };
    let frame_sd = ((1.0 - spec.pair_shared) * frames as f64).sqrt();
    let window = spec.signal_window_ms.map(|[lo, hi]| {
        let onset = manifest.alignment(&utterance.id).map_or(0, |s| s.onset_ms as i64);
        let rate = i64::from(spec.frame_rate_hz);
        let to_frame = |ms: i64| ((ms * rate).div_euclid(1000)).clamp(0, frames as i64) as usize;
        to_frame(onset + i64::from(lo))..to_frame(onset + i64::from(hi))
    });

    (0..spec.num_layers)
        .map(|layer| {
            let base = spec.gaussian(&format!("base:{}:{layer}", pair.id), spec.pair_shared.sqrt());
            let dir = spec.direction(layer);
            let snr = spec.snr_at(layer);
            let mut rng = spec.rng(&format!("frames:{}:{layer}", utterance.id));
            let mut data = Vec::with_capacity(frames * spec.dim);
            for t in 0..frames {
                let amp = match &window {
                    None => sign * snr,
                    Some(w) if w.contains(&t) => sign * snr * frame_sd.max(1.0),
                    Some(_) => 0.0,
                };
                for j in 0..spec.dim {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push((base[j] + frame_sd * z + amp * dir[j]) as f32);
                }
            }
            LayerTensor::new(utterance.id.clone(), layer, frames, spec.dim, data)
        })
        .collect()
}

pub fn write_synthetic_store(spec: &SyntheticSpec, manifest: &CorpusManifest, path: impl AsRef<Path>) -> Result<()> {
    spec.check()?;
    let header = StoreHeader::uniform(spec.model_id.clone(), spec.num_layers, spec.dim, spec.frame_rate(), spec.trained);
    let mut writer = StoreWriter::create(path, header)?;
    let members: Vec<(&MinimalPair, &Utterance)> = manifest
        .pairs()
        .iter()
        .flat_map(|p| p.members().map(|u| (p, u)))
        .collect();
    for chunk in members.chunks(256) {
        let tensors: Vec<Vec<LayerTensor>> = chunk
            .par_iter()
            .map(|(p, u)| synthetic_tensors(spec, manifest, p, u))
            .collect::<Result<_>>()?;
        for ((_, u), t) in chunk.iter().zip(&tensors) {
            writer.write_utterance(&u.id, t)?;
        }
    }
    writer.finish()
}

/// Paths written by [`write_synthetic_corpus`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticPaths {
    pub manifest: PathBuf,
    pub alignments: PathBuf,
    pub store: PathBuf,
}

/// Writes `manifest.jsonl`, `alignments.jsonl` and `<store_name>` into `dir`.
pub fn write_synthetic_corpus(spec: &SyntheticSpec, dir: impl AsRef<Path>, store_name: &str) -> Result<SyntheticPaths> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let manifest = synthetic_manifest(spec)?;
    let paths = SyntheticPaths {
        manifest: dir.join("manifest.jsonl"),
        alignments: dir.join("alignments.jsonl"),
        store: dir.join(store_name),
    };
    save_manifest(&manifest, &paths.manifest)?;
    let words = manifest
        .utterances()
        .filter_map(|u| u.critical_word.clone().map(|w| (u.id.clone(), w)))
        .collect();
    save_alignments(manifest.alignments().expect("synthetic manifests carry alignments"), &words, &paths.alignments)?;
    write_synthetic_store(spec, &manifest, &paths.store)?;
    Ok(paths)
}

/// Points around three (or more) cluster centers, one cluster per label.
/// Centers have norm `snr` and are mutually orthogonal; noise is isotropic
/// with unit variance per coordinate.
pub fn planted_clusters(n_per_cluster: usize, n_clusters: usize, dim: usize, snr: f64, seed: u64) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    if n_clusters > dim || n_clusters == 0 || n_per_cluster == 0 {
        return Err(Error::Argument("need 0 < n_clusters <= dim and a nonempty cluster".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n_per_cluster * n_clusters);
    let mut labels = Vec::with_capacity(points.capacity());
    for c in 0..n_clusters {
        for _ in 0..n_per_cluster {
            let v = (0..dim)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z + if j == c { snr } else { 0.0 }
                })
                .collect();
            points.push(v);
            labels.push(c);
        }
    }
    Ok((points, labels))
}
