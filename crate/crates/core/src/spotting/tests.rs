use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::ModelConfig;
use crate::pooling::{PoolKind, PoolSpec, TemporalWindow};

fn config(kind: PoolKind, temporal: bool) -> ModelConfig {
    ModelConfig {
        input_dim: 3,
        reduced_dim: Some(4),
        pool: PoolSpec::new(kind, temporal, 4),
        window: TemporalWindow::centered(2.0, 3.0),
        action_classes: 2,
        background: true,
        dropout: 0.4,
        normalize_frames: true,
    }
}

fn random_seq(frames: usize, rng: &mut ChaCha8Rng) -> FeatureSequence {
    FeatureSequence::new("v", 2.0, Matrix::from_fn(frames, 3, |_, _| rng.random_range(-1.0..1.0))).unwrap()
}

fn curve_from(rows: Vec<Vec<f64>>, step_ms: u64) -> ActionnessCurve {
    let n = rows[0].len();
    ActionnessCurve::new(Matrix::from_rows(&rows).unwrap(), (0..n as u64).map(|p| p * step_ms).collect(), 1).unwrap()
}

#[test]
fn zero_classifier_gives_flat_half_curve() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = SpottingModel::new(config(PoolKind::NetVlad, true), &mut rng).unwrap();
    let seq = random_seq(17, &mut rng);
    let curve = dense_actionness(&model, &seq).unwrap();
    assert_eq!(curve.positions(), 17);
    assert_eq!(curve.classes(), 2);
    assert!(curve.scores.as_slice().iter().all(|&s| s == 0.5));
    assert_eq!(curve.positions_ms[3], 1500);
}

#[test]
fn dense_curve_matches_padded_windows() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for kind in PoolKind::ALL {
        let mut model = SpottingModel::new(config(kind, true), &mut rng).unwrap();
        for (_, t) in model.params_mut().tensors_mut() {
            t.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        let seq = random_seq(9, &mut rng);
        let curve = dense_actionness(&model, &seq).unwrap();
        let (len, before) = (model.config().window_frames(), model.config().window.frames_before());
        for p in 0..9 {
            let window = Matrix::from_fn(len, 3, |r, c| {
                let f = (p + r) as isize - before as isize;
                if (0..9).contains(&f) { seq.features.get(f as usize, c) } else { 0.0 }
            });
            let want = model.predict(&window).unwrap().scores;
            for c in 0..2 {
                assert!((curve.scores.get(c, p) - want[c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn dense_inference_rejects_bad_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = SpottingModel::new(config(PoolKind::Max, false), &mut rng).unwrap();
    assert!(dense_actionness(&model, &random_seq(1, &mut rng)).is_err());
    let other_rate = FeatureSequence::new("v", 1.0, Matrix::zeros(10, 3)).unwrap();
    assert!(dense_actionness(&model, &other_rate).is_err());
    let other_dim = FeatureSequence::new("v", 2.0, Matrix::zeros(10, 5)).unwrap();
    assert!(dense_actionness(&model, &other_dim).is_err());
}

#[test]
fn single_peak_gives_one_spot() {
    let mut row = vec![0.0; 50];
    row[20] = 0.9;
    let spots = nms(&curve_from(vec![row], 1000), 30.0, Some(0.5)).unwrap();
    assert_eq!(spots, vec![Spot { class_index: 0, position_ms: 20_000, confidence: 0.9 }]);
}

#[test]
fn equal_peaks_keep_the_earlier() {
    let mut row = vec![0.1; 60];
    row[20] = 0.8;
    row[30] = 0.8;
    let spots = nms(&curve_from(vec![row], 1000), 30.0, Some(0.5)).unwrap();
    assert_eq!(spots.len(), 1);
    assert_eq!(spots[0].position_ms, 20_000);
}

#[test]
fn suppression_radius_is_half_the_window() {
    let mut row = vec![0.0; 60];
    row[10] = 0.9;
    row[25] = 0.8; // exactly 15 s away: suppressed
    row[41] = 0.7; // 16 s from the next kept spot: kept
    let spots = nms(&curve_from(vec![row], 1000), 30.0, Some(0.5)).unwrap();
    let positions: Vec<u64> = spots.iter().map(|s| s.position_ms).collect();
    assert_eq!(positions, vec![10_000, 41_000]);
}

#[test]
fn nms_rejects_non_positive_window() {
    let curve = curve_from(vec![vec![0.5; 3]], 500);
    assert!(nms(&curve, 0.0, None).is_err());
    assert!(nms(&curve, -1.0, None).is_err());
}

/// Re-scans every position on each iteration.
fn brute_force_nms(curve: &ActionnessCurve, t_nms_s: f64, threshold: Option<f64>) -> Vec<Spot> {
    let radius = t_nms_s * 1000.0 / 2.0;
    let mut out = Vec::new();
    for c in 0..curve.classes() {
        let mut alive: Vec<bool> = vec![true; curve.positions()];
        loop {
            let mut best: Option<usize> = None;
            for p in 0..curve.positions() {
                if alive[p] && best.is_none_or(|b| curve.scores.get(c, p) > curve.scores.get(c, b)) {
                    best = Some(p);
                }
            }
            let Some(b) = best else { break };
            let score = curve.scores.get(c, b);
            if threshold.is_some_and(|t| score < t) {
                break;
            }
            out.push(Spot { class_index: c, position_ms: curve.positions_ms[b], confidence: score });
            for p in 0..curve.positions() {
                if (curve.positions_ms[p] as f64 - curve.positions_ms[b] as f64).abs() <= radius {
                    alive[p] = false;
                }
            }
        }
    }
    out.sort_by(|a, b| a.position_ms.cmp(&b.position_ms).then(a.class_index.cmp(&b.class_index)));
    out
}

proptest! {
    #[test]
    fn nms_matches_brute_force(
        seed in any::<u64>(),
        len in 1usize..120,
        classes in 1usize..4,
        t_nms in 1.0f64..40.0,
        quantized in any::<bool>(),
        threshold in proptest::option::of(0.0f64..1.0),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..classes)
            .map(|_| (0..len).map(|_| {
                let s: f64 = rng.random();
                // coarse values force ties
                if quantized { (s * 4.0).round() / 4.0 } else { s }
            }).collect())
            .collect();
        let curve = curve_from(rows, 500);
        let fast = nms(&curve, t_nms, threshold).unwrap();
        prop_assert_eq!(&fast, &brute_force_nms(&curve, t_nms, threshold));

        let radius = t_nms * 1000.0 / 2.0;
        for (i, a) in fast.iter().enumerate() {
            for b in &fast[i + 1..] {
                prop_assert!(b.position_ms >= a.position_ms);
                if a.class_index == b.class_index {
                    prop_assert!((b.position_ms - a.position_ms) as f64 > radius);
                }
            }
        }
    }

    #[test]
    fn nms_is_idempotent(seed in any::<u64>(), len in 1usize..120, t_nms in 1.0f64..40.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..2).map(|_| (0..len).map(|_| rng.random_range(0.01..1.0)).collect()).collect();
        let curve = curve_from(rows, 500);
        let spots = nms(&curve, t_nms, None).unwrap();

        let mut impulse = Matrix::zeros(2, len);
        for s in &spots {
            impulse.set(s.class_index, (s.position_ms / 500) as usize, s.confidence);
        }
        let impulse = ActionnessCurve::new(impulse, curve.positions_ms.clone(), 1).unwrap();
        prop_assert_eq!(nms(&impulse, t_nms, Some(0.01)).unwrap(), spots);
    }
}

#[test]
fn curve_validation() {
    assert!(ActionnessCurve::new(Matrix::zeros(1, 2), vec![5, 5], 1).is_err());
    assert!(ActionnessCurve::new(Matrix::zeros(1, 2), vec![5], 1).is_err());
    assert!(ActionnessCurve::new(Matrix::from_vec(1, 1, vec![1.5]).unwrap(), vec![0], 1).is_err());
}

#[test]
fn spot_file_round_trip() {
    let classes = ClassVocabulary::new(vec!["goal".into(), "card".into()]).unwrap();
    let spots = vec![
        Spot { class_index: 1, position_ms: 500, confidence: 0.25 },
        Spot { class_index: 0, position_ms: 9000, confidence: 0.875 },
    ];
    let file = SpotFile::from_spots("game", &spots, &classes).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.json");
    file.save(&path).unwrap();
    let back = SpotFile::load(&path).unwrap();
    assert_eq!(back, file);
    assert_eq!(back.spots(&classes).unwrap(), spots);
    let narrow = ClassVocabulary::new(vec!["goal".into()]).unwrap();
    assert!(back.spots(&narrow).is_err());
    assert!(SpotFile::from_spots("game", &spots, &narrow).is_err());
}
