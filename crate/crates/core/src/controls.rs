//! Controls that separate representational content from classifier bias:
//! Gaussian embeddings matched to the moments of real sentence vectors, and
//! an empirical chance band for cross-validated accuracy.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{assign_folds_for, CorpusManifest, MinimalPair, Utterance};
use crate::hashing::{derive_seed, derive_seed_n};
use crate::pooling::{Condition, PooledVector};
use crate::probe::{cross_validate, TrainConfig};
use crate::{Error, Result};

/// Lower bound on generated standard deviations.
pub const MIN_NOISE_STD: f64 = 1e-12;

/// Feature dimension used by [`chance_band`].
pub const CHANCE_BAND_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareBy {
    /// Both members of a pair receive the same vector.
    #[default]
    Pair,
    /// Utterances with the same `base_audio_id` share a vector; utterances
    /// without one fall back to their pair.
    BaseAudioId,
    /// Every utterance gets its own vector.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentMode {
    #[default]
    PerDimension,
    /// One mean and one standard deviation over all coordinates.
    Scalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedNoiseSpec {
    /// Free-form description of the source, e.g. `hubert-base/L7/mean`.
    pub source: String,
    pub layer: usize,
    pub per_dim_mean: Vec<f64>,
    pub per_dim_std: Vec<f64>,
    pub seed: u64,
    pub share_by: ShareBy,
}

impl MatchedNoiseSpec {
    /// Estimates moments from pooled source vectors. Also returns the number
    /// of dimensions whose standard deviation had to be floored.
    pub fn from_vectors(
        source: impl Into<String>,
        layer: usize,
        vectors: &[Vec<f64>],
        mode: MomentMode,
        seed: u64,
        share_by: ShareBy,
    ) -> Result<(Self, usize)> {
        let d = vectors.first().map_or(0, Vec::len);
        if vectors.len() < 2 || d == 0 {
            return Err(Error::InsufficientData("need at least two nonempty source vectors".into()));
        }
        if vectors.iter().any(|v| v.len() != d) {
            return Err(Error::Input("source vectors differ in length".into()));
        }
        let n = vectors.len() as f64;
        let (means, stds) = match mode {
            MomentMode::PerDimension => {
                let mut means = vec![0.0; d];
                for v in vectors {
                    for (m, x) in means.iter_mut().zip(v) {
                        *m += x;
                    }
                }
                means.iter_mut().for_each(|m| *m /= n);
                let mut vars = vec![0.0; d];
                for v in vectors {
                    for ((s, x), m) in vars.iter_mut().zip(v).zip(&means) {
                        *s += (x - m) * (x - m);
                    }
                }
                (means, vars.into_iter().map(|s| (s / n).sqrt()).collect::<Vec<_>>())
            }
            MomentMode::Scalar => {
                let total = n * d as f64;
                let mean = vectors.iter().flatten().sum::<f64>() / total;
                let var = vectors.iter().flatten().map(|x| (x - mean) * (x - mean)).sum::<f64>() / total;
                (vec![mean; d], vec![var.sqrt(); d])
            }
        };
        let floored = stds.iter().filter(|s| !(**s >= MIN_NOISE_STD)).count();
        if floored > 0 {
            log::warn!("{floored} source dimensions have zero variance; std floored at {MIN_NOISE_STD:e}");
        }
        let stds = stds.into_iter().map(|s| if s >= MIN_NOISE_STD { s } else { MIN_NOISE_STD }).collect();
        Ok((
            Self {
                source: source.into(),
                layer,
                per_dim_mean: means,
                per_dim_std: stds,
                seed,
                share_by,
            },
            floored,
        ))
    }

    pub fn dim(&self) -> usize {
        self.per_dim_mean.len()
    }

    fn share_key(&self, pair: &MinimalPair, u: &Utterance) -> String {
        match self.share_by {
            ShareBy::Pair => format!("pair:{}", pair.id),
            ShareBy::BaseAudioId => match &u.base_audio_id {
                Some(base) => format!("audio:{base}"),
                None => format!("pair:{}", pair.id),
            },
            ShareBy::None => format!("utt:{}", u.id),
        }
    }

    /// Draws the vector for one sharing key. Seeding per key keeps the output
    /// independent of generation order.
    fn draw(&self, key: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, key));
        self.per_dim_mean
            .iter()
            .zip(&self.per_dim_std)
            .map(|(m, s)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + s * z
            })
            .collect()
    }
}

/// One Gaussian vector per utterance of the manifest, in pair order
/// (acceptable member first).
pub fn matched_random_features(spec: &MatchedNoiseSpec, manifest: &CorpusManifest) -> Result<Vec<PooledVector>> {
    let pairs: Vec<&MinimalPair> = manifest.pairs().iter().collect();
    matched_random_features_for(spec, &pairs)
}

/// As [`matched_random_features`], restricted to `pairs`.
pub fn matched_random_features_for(spec: &MatchedNoiseSpec, pairs: &[&MinimalPair]) -> Result<Vec<PooledVector>> {
    if spec.per_dim_mean.len() != spec.per_dim_std.len() || spec.dim() == 0 {
        return Err(Error::Input("noise spec mean and std must have equal, nonzero length".into()));
    }
    if spec.per_dim_std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::Input("noise spec standard deviations must be positive".into()));
    }
    Ok(pairs
        .par_iter()
        .flat_map_iter(|pair| {
            pair.members().map(|u| PooledVector {
                utterance_id: u.id.clone(),
                layer: spec.layer,
                condition: Condition::RandomEmbedding,
                vector: spec.draw(&spec.share_key(pair, u)),
            })
        })
        .collect())
}

/// Linear-interpolated quantile of sorted data, `q` in `[0, 1]`.
pub(crate) fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Cross-validated accuracy of the default probe on label-independent
/// Gaussian features, one value per trial.
pub fn simulate_null_accuracies(
    n_samples: usize,
    k_folds: usize,
    n_trials: usize,
    dim: usize,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if n_samples < 2 * k_folds || !n_samples.is_multiple_of(2) {
        return Err(Error::Argument(format!(
            "n_samples must be even and at least 2k ({n_samples} samples, k={k_folds})"
        )));
    }
    let n_pairs = n_samples / 2;
    let pair_ids: Vec<String> = (0..n_pairs).map(|p| format!("p{p}")).collect();
    let sample_pairs: Vec<&str> = pair_ids.iter().flat_map(|p| [p.as_str(), p.as_str()]).collect();
    let labels: Vec<u8> = (0..n_samples).map(|i| u8::from(i % 2 == 0)).collect();
    let unique: Vec<&str> = pair_ids.iter().map(String::as_str).collect();

    (0..n_trials)
        .into_par_iter()
        .map(|trial| {
            let trial_seed = derive_seed_n(seed, trial as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
            let x = DMatrix::from_fn(n_samples, dim, |_, _| StandardNormal.sample(&mut rng));
            let folds = assign_folds_for(&unique, "chance", k_folds, trial_seed)?;
            Ok(cross_validate(&x, &labels, &sample_pairs, &folds, cfg)?.accuracy_mean)
        })
        .collect()
}

/// Central 95% interval of cross-validated accuracy under label-independent
/// features, estimated by simulation.
pub fn chance_band(n_samples: usize, k_folds: usize, n_trials: usize, seed: u64) -> Result<(f64, f64)> {
    if n_trials < 20 {
        return Err(Error::Argument(format!("chance band needs at least 20 trials, got {n_trials}")));
    }
    let mut accs = simulate_null_accuracies(n_samples, k_folds, n_trials, CHANCE_BAND_DIM, seed, &TrainConfig::default())?;
    accs.sort_by(f64::total_cmp);
    Ok((quantile(&accs, 0.025), quantile(&accs, 0.975)))
}
