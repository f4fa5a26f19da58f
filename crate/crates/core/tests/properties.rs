use lingprobe_core::analysis::{build_layer_curves, curve_peak, project_2d, silhouette_score};
use lingprobe_core::controls::{chance_band, matched_random_features};
use lingprobe_core::pooling::{mean_pool, temporal_samples};
use lingprobe_core::probe::{fit_logistic, predict_proba};
use lingprobe_core::synthetic::{synthetic_manifest, SyntheticSpec};
use lingprobe_core::{
    AlignmentSpan, Condition, LayerTensor, MatchedNoiseSpec, ProbeResult, Rational, ShareBy, TemporalGrid,
    TrainConfig,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor_strategy() -> impl Strategy<Value = LayerTensor> {
    (1usize..30, 1usize..6).prop_flat_map(|(frames, dim)| {
        prop::collection::vec(-100.0f32..100.0, frames * dim)
            .prop_map(move |data| LayerTensor::new("u", 0, frames, dim, data).unwrap())
    })
}

fn result(task: &str, level: &str, layer: usize, accuracy: f64) -> ProbeResult {
    ProbeResult {
        model: "m".into(),
        task: task.into(),
        level: level.into(),
        layer,
        condition: Condition::Mean,
        accuracy,
        stderr: 0.01,
        pooled_accuracy: accuracy,
        confidence: None,
        n_samples: 100,
        n_folds: 5,
        failed_folds: 0,
        converged: true,
        config: String::new(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn mean_pool_is_bounded_by_frames(t in tensor_strategy()) {
        let m = mean_pool(&t).vector;
        for (j, v) in m.iter().enumerate() {
            let col = t.rows().map(|r| f64::from(r[j]));
            let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            prop_assert!(lo - 1e-9 <= *v && *v <= hi + 1e-9);
        }
    }

    #[test]
    fn temporal_samples_stay_in_range(t in tensor_strategy(), onset in 0u64..5000) {
        let span = AlignmentSpan { onset_ms: onset, offset_ms: onset + 100 };
        let grid = TemporalGrid::default();
        let samples = temporal_samples(&t, Some(&span), &grid, Rational::integer(50)).unwrap();
        prop_assert_eq!(samples.len(), grid.len());
        for s in &samples {
            let hit = t.rows().any(|r| r.iter().map(|&v| f64::from(v)).eq(s.vector.iter().copied()));
            prop_assert!(hit);
        }
    }

    #[test]
    fn probe_ignores_feature_affine_maps(seed in any::<u64>(), scale in 0.01f64..100.0, shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (40, 3);
        let y: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 0)).collect();
        let x = DMatrix::from_fn(n, d, |i, _| rng.random::<f64>() + if i % 2 == 0 { 0.3 } else { 0.0 });
        let moved = x.map(|v| v * scale + shift);
        let cfg = TrainConfig::default();
        let a = predict_proba(&fit_logistic(&x, &y, &cfg).unwrap(), &x).unwrap();
        let b = predict_proba(&fit_logistic(&moved, &y, &cfg).unwrap(), &moved).unwrap();
        for (ra, rb) in a.rows().iter().zip(b.rows()) {
            prop_assert!((ra[1] - rb[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn level_curve_stays_within_task_range(accs in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 1..5)) {
        let rows: Vec<ProbeResult> = accs
            .iter()
            .enumerate()
            .flat_map(|(t, layer_accs)| {
                layer_accs.iter().enumerate().map(move |(l, &a)| result(&format!("t{t}"), "syntax", l, a))
            })
            .collect();
        let curves = build_layer_curves(&rows).unwrap();
        prop_assert_eq!(curves.levels.len(), 1);
        for (layer, p) in curves.levels[0].layers() {
            let col: Vec<f64> = accs.iter().map(|a| a[layer]).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo - 1e-12 <= p.accuracy && p.accuracy <= hi + 1e-12);
        }
        for c in curves.all() {
            let peak = curve_peak(c).unwrap();
            prop_assert!(c.points.iter().all(|p| p.accuracy <= peak.best_accuracy));
        }
    }

    #[test]
    fn projection_ignores_translation(seed in any::<u64>(), shift in -1e3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![rng.random::<f64>() * 5.0 * (i % 3) as f64, rng.random(), rng.random::<f64>() * 0.1])
            .collect();
        let moved: Vec<Vec<f64>> = data.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
        let a = project_2d(&data).unwrap();
        let b = project_2d(&moved).unwrap();
        for (pa, pb) in a.points.iter().zip(&b.points) {
            prop_assert!((pa[0] - pb[0]).abs() < 1e-6 && (pa[1] - pb[1]).abs() < 1e-6);
        }
    }
}

#[test]
fn projection_is_rotation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<Vec<f64>> = (0..50).map(|_| vec![3.0 * rng.random::<f64>(), rng.random::<f64>()]).collect();
    let (c, s) = (0.6f64, 0.8f64);
    let rotated: Vec<Vec<f64>> = data.iter().map(|r| vec![c * r[0] - s * r[1], s * r[0] + c * r[1]]).collect();
    let a = project_2d(&data).unwrap();
    let b = project_2d(&rotated).unwrap();
    // Coordinates agree up to a per-axis sign.
    for axis in 0..2 {
        let same = a.points.iter().zip(&b.points).all(|(p, q)| (p[axis] - q[axis]).abs() < 1e-9);
        let flipped = a.points.iter().zip(&b.points).all(|(p, q)| (p[axis] + q[axis]).abs() < 1e-9);
        assert!(same || flipped, "axis {axis}");
    }
}

#[test]
fn isotropic_data_splits_variance_evenly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let data: Vec<Vec<f64>> = (0..500)
        .map(|_| (0..3).map(|_| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng)).collect())
        .collect();
    let p = project_2d(&data).unwrap();
    let total = p.explained_variance_ratio[0] + p.explained_variance_ratio[1];
    assert!((total - 2.0 / 3.0).abs() < 0.05, "{total}");
}

#[test]
fn shuffled_silhouette_is_near_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pts: Vec<[f64; 2]> = (0..300).map(|_| [rng.random(), rng.random()]).collect();
    let labels: Vec<usize> = (0..300).map(|_| rng.random_range(0..3)).collect();
    assert!(silhouette_score(&pts, &labels).unwrap().abs() < 0.1);
}

#[test]
fn matched_noise_reproduces_moments() {
    let manifest = synthetic_manifest(&SyntheticSpec {
        pairs_per_task: 4000,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let spec = MatchedNoiseSpec {
        source: "test".into(),
        layer: 0,
        per_dim_mean: vec![-2.0, 0.0, 5.0],
        per_dim_std: vec![0.5, 1.0, 3.0],
        seed: 12,
        share_by: ShareBy::None,
    };
    let feats = matched_random_features(&spec, &manifest).unwrap();
    let n = feats.len() as f64;
    for j in 0..3 {
        let mean = feats.iter().map(|f| f.vector[j]).sum::<f64>() / n;
        let var = feats.iter().map(|f| (f.vector[j] - mean).powi(2)).sum::<f64>() / n;
        let sd = spec.per_dim_std[j];
        assert!((mean - spec.per_dim_mean[j]).abs() < 4.0 * sd / n.sqrt(), "dim {j} mean {mean}");
        assert!((var.sqrt() - sd).abs() < 4.0 * sd / (2.0 * n).sqrt(), "dim {j} std {}", var.sqrt());
    }
}

#[test]
fn matched_noise_sharing_follows_the_key() {
    let manifest = synthetic_manifest(&SyntheticSpec {
        pairs_per_task: 10,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let mut spec = MatchedNoiseSpec {
        source: "test".into(),
        layer: 0,
        per_dim_mean: vec![0.0; 4],
        per_dim_std: vec![1.0; 4],
        seed: 1,
        share_by: ShareBy::Pair,
    };
    let shared = matched_random_features(&spec, &manifest).unwrap();
    assert!(shared.chunks(2).all(|c| c[0].vector == c[1].vector));
    spec.share_by = ShareBy::None;
    let own = matched_random_features(&spec, &manifest).unwrap();
    assert!(own.chunks(2).all(|c| c[0].vector != c[1].vector));
}

#[test]
fn chance_band_narrows_with_more_samples() {
    let (lo_small, hi_small) = chance_band(100, 5, 40, 1).unwrap();
    let (lo_big, hi_big) = chance_band(1000, 5, 40, 1).unwrap();
    assert!(hi_big - lo_big < hi_small - lo_small);
    assert!(lo_big < 0.5 && 0.5 < hi_big);
}
