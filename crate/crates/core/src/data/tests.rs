use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::FormatError;
use crate::numerics::norm2;

fn random_seq(rows: usize, cols: usize, seed: u64) -> FeatureSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Matrix::from_fn(rows, cols, |_, _| f64::from(rng.random_range(-3.0f32..3.0)));
    FeatureSequence::new("v", 2.0, m).unwrap()
}

fn small_spec() -> SynthSpec {
    SynthSpec { train_games: 2, val_games: 1, test_games: 1, duration_s: 600.0, actions_per_game: 6, ..SynthSpec::default() }
}

#[test]
fn feature_round_trip_is_bit_exact() {
    let seq = random_seq(10, 4, 1);
    let bytes = encode_features(&seq);
    assert_eq!(bytes.len(), 20 + 10 * 4 * 4);
    let back = decode_features("v", &bytes).unwrap();
    assert_eq!(back, seq);
    assert_eq!(encode_features(&back), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clip_01.feat");
    save_features(&seq, &path).unwrap();
    let loaded = load_features(&path).unwrap();
    assert_eq!(loaded.video_id, "clip_01");
    assert_eq!(loaded.features, seq.features);
}

#[test]
fn damaged_feature_files_are_rejected() {
    let bytes = encode_features(&random_seq(10, 4, 2));
    let err = decode_features("v", &bytes[..bytes.len() - 3]).unwrap_err();
    assert!(matches!(err, Error::Format(FormatError::TruncatedPayload { expected: 160, actual: 157 })));
    assert!(err.to_string().contains("160") && err.to_string().contains("157"));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_features("v", &bad), Err(Error::Format(FormatError::BadMagic { .. }))));

    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(decode_features("v", &bad), Err(Error::Format(FormatError::UnsupportedVersion(9)))));

    assert!(matches!(decode_features("v", &bytes[..12]), Err(Error::Format(FormatError::TruncatedHeader))));

    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_features("v", &long), Err(Error::Format(FormatError::Malformed(_)))));
}

#[test]
fn ninety_minutes_at_two_fps() {
    assert_eq!(whole_frames(90.0 * 60.0, 2.0).unwrap(), 10800);
    assert!(whole_frames(7.25, 2.0).is_err());
    assert_eq!(frame_of_ms(22_000, 2.0), 44);
    assert_eq!(ms_of_frame(45, 2.0), 22_500);
}

#[test]
fn labels_and_classes_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let classes = ClassVocabulary::new(vec!["goal".into(), "card".into(), "shot".into()]).unwrap();
    classes.save(&dir.path().join("classes.json")).unwrap();
    let back = ClassVocabulary::load(&dir.path().join("classes.json")).unwrap();
    assert_eq!(back, classes);

    let actions = vec![
        GroundTruthAction { class_index: 2, position_ms: 1500, visible: true },
        GroundTruthAction { class_index: 0, position_ms: 99_000, visible: false },
    ];
    let path = dir.path().join("a.labels.json");
    save_labels(&actions, &classes, &path).unwrap();
    assert_eq!(load_labels(&path, &classes).unwrap(), actions);

    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"label\": \"shot\"") && text.contains("\"position_ms\": 1500"));

    let other = ClassVocabulary::new(vec!["goal".into()]).unwrap();
    assert!(load_labels(&path, &other).is_err());
    assert!(ClassVocabulary::new(vec!["a".into(), "a".into()]).is_err());
    let gap = [("a".to_string(), 0), ("b".to_string(), 2)].into_iter().collect();
    assert!(ClassVocabulary::from_map(gap).is_err());
}

#[test]
fn sixty_second_video_gives_four_chunks() {
    let seq = FeatureSequence::new("v", 2.0, Matrix::zeros(120, 3)).unwrap();
    let action = GroundTruthAction { class_index: 1, position_ms: 22_000, visible: true };
    let chunks = make_training_chunks(&seq, &[action], 15.0, 2, true).unwrap();
    assert_eq!(chunks.len(), 4);
    for (k, c) in chunks.iter().enumerate() {
        assert_eq!(c.frames.rows(), 30);
        assert_eq!(c.center_ms, 15_000 * k as u64 + 7_500);
        if k == 1 {
            assert_eq!(c.target, vec![0.0, 1.0, 0.0]);
        } else {
            assert_eq!(c.target, vec![0.0, 0.0, 1.0]);
        }
    }
    let no_bg = make_training_chunks(&seq, &[action], 15.0, 2, false).unwrap();
    assert_eq!(no_bg[0].target, vec![0.0, 0.0]);
}

#[test]
fn trailing_partial_chunk_is_dropped() {
    let seq = FeatureSequence::new("v", 2.0, Matrix::zeros(131, 1)).unwrap();
    let late = GroundTruthAction { class_index: 0, position_ms: 62_000, visible: true };
    let chunks = make_training_chunks(&seq, &[late], 15.0, 1, true).unwrap();
    assert_eq!(chunks.len(), 4);
    assert!(chunks.iter().all(|c| c.target == vec![0.0, 1.0]));
}

#[test]
fn chunking_rejects_bad_arguments() {
    let seq = FeatureSequence::new("v", 2.0, Matrix::zeros(40, 1)).unwrap();
    assert!(make_training_chunks(&seq, &[], 0.5, 1, true).is_err());
    assert!(make_training_chunks(&seq, &[], 1.25, 1, true).is_err());
    let bad = GroundTruthAction { class_index: 3, position_ms: 0, visible: true };
    assert!(make_training_chunks(&seq, &[bad], 5.0, 2, true).is_err());
}

#[test]
fn chunk_targets_match_interval_scan() {
    let spec = SynthSpec { actions_per_game: 20, min_gap_s: 15.0, ..small_spec() };
    let videos = generate_synthetic(&spec).unwrap();
    for v in &videos {
        let chunks = make_training_chunks(&v.features, &v.labels, 15.0, spec.class_count(), true).unwrap();
        let mut positive_bits = 0;
        for (k, chunk) in chunks.iter().enumerate() {
            let (start, end) = (k as u64 * 15_000, (k as u64 + 1) * 15_000);
            for c in 0..spec.class_count() {
                let inside = v.labels.iter().any(|a| a.class_index == c && (start..end).contains(&a.position_ms));
                assert_eq!(chunk.target[c] == 1.0, inside);
                positive_bits += usize::from(inside);
            }
            let empty = !v.labels.iter().any(|a| (start..end).contains(&a.position_ms));
            assert_eq!(chunk.target[spec.class_count()] == 1.0, empty);
        }
        let mut distinct: Vec<(u64, usize)> =
            v.labels.iter().map(|a| (a.position_ms / 15_000, a.class_index)).filter(|&(k, _)| (k as usize) < chunks.len()).collect();
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(positive_bits, distinct.len());
    }
}

proptest! {
    #[test]
    fn chunking_is_a_partition(frames in 2usize..400, chunk_frames in 2usize..40) {
        let seq = FeatureSequence::new("v", 1.0, Matrix::from_fn(frames, 1, |r, _| r as f64)).unwrap();
        let chunks = make_training_chunks(&seq, &[], chunk_frames as f64, 1, true).unwrap();
        prop_assert_eq!(chunks.len(), frames / chunk_frames);
        let mut next = 0.0;
        for c in &chunks {
            prop_assert_eq!(c.frames.rows(), chunk_frames);
            for r in 0..chunk_frames {
                prop_assert_eq!(c.frames.get(r, 0), next);
                next += 1.0;
            }
        }
        prop_assert!(next as usize <= frames);
    }
}

#[test]
fn synthetic_generation_is_deterministic() {
    let spec = small_spec();
    assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());

    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_synthetic(&spec, a.path()).unwrap();
    write_synthetic(&spec, b.path()).unwrap();
    let mut files = 0;
    for split in SPLITS {
        for entry in std::fs::read_dir(a.path().join(split)).unwrap() {
            let path = entry.unwrap().path();
            let twin = b.path().join(split).join(path.file_name().unwrap());
            assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&twin).unwrap());
            files += 1;
        }
    }
    assert_eq!(files, 2 * 4);
    assert_eq!(std::fs::read(a.path().join(CLASSES_FILE)).unwrap(), std::fs::read(b.path().join(CLASSES_FILE)).unwrap());

    let other = SynthSpec { seed: 1, ..spec };
    assert_ne!(generate_synthetic(&other).unwrap()[0].features, generate_synthetic(&small_spec()).unwrap()[0].features);
}

#[test]
fn written_dataset_loads_back() {
    let spec = small_spec();
    let dir = tempfile::tempdir().unwrap();
    let videos = write_synthetic(&spec, dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.classes, synth_classes(&spec));
    let train = ds.load_split("train").unwrap();
    assert_eq!(train.len(), 2);
    assert_eq!(train[0].features, videos[0].features);
    assert_eq!(train[0].labels, videos[0].labels);
    let truth = load_truth_dir(&dir.path().join("test"), &ds.classes).unwrap();
    assert_eq!(truth.len(), 1);
    assert_eq!(truth[0].0, videos[3].features.video_id);
}

#[test]
fn retry_budget_is_enforced() {
    let spec = SynthSpec { duration_s: 300.0, actions_per_game: 50, retry_budget: 20, ..small_spec() };
    assert!(generate_synthetic(&spec).is_err());
}

/// Mean frame over `[start, end)` summed across all actions of `class`.
fn region_mean(videos: &[SynthVideo], class: usize, before: bool, spec: &SynthSpec) -> Vec<f64> {
    let half = whole_frames(spec.before_s, spec.frame_rate).unwrap();
    let mut sum = vec![0.0; spec.dim];
    let mut n = 0.0;
    for v in videos {
        for a in v.labels.iter().filter(|a| a.class_index == class) {
            let f = frame_of_ms(a.position_ms, spec.frame_rate);
            let range = if before { f - half..f } else { f..f + half };
            for r in range {
                crate::numerics::add_into(&mut sum, v.features.features.row(r));
                n += 1.0;
            }
        }
    }
    sum.iter().map(|s| s / n).collect()
}

#[test]
fn paired_classes_differ_only_in_order() {
    let spec = SynthSpec { train_games: 12, ..small_spec() };
    let videos = generate_synthetic(&spec).unwrap();
    let dist = |a: &[f64], b: &[f64]| norm2(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>());
    for p in 0..spec.pairs {
        let (fwd, rev) = (2 * p, 2 * p + 1);
        // the forward class's past is the reverse class's future and vice versa
        let shared = dist(&region_mean(&videos, fwd, true, &spec), &region_mean(&videos, rev, false, &spec));
        let swapped = dist(&region_mean(&videos, fwd, false, &spec), &region_mean(&videos, rev, true, &spec));
        let distinct = dist(&region_mean(&videos, fwd, false, &spec), &region_mean(&videos, rev, false, &spec));
        assert!(shared < 0.15 * distinct, "{shared}");
        assert!(swapped < 0.15 * distinct, "{swapped}");
        assert!(distinct > 4.0 * spec.sigma, "{distinct}");
    }
    assert_eq!(class_patterns(0), (0, 1));
    assert_eq!(class_patterns(1), (1, 0));
}

#[test]
fn single_frame_linear_probe_detects_patterns() {
    let spec = small_spec();
    let videos = generate_synthetic(&spec).unwrap();
    let patterns = synth_patterns(&spec);
    let half = whole_frames(spec.before_s, spec.frame_rate).unwrap();
    let (mut correct, mut total) = (0usize, 0usize);
    for v in &videos {
        let mut truth = vec![None; v.features.frames()];
        for a in &v.labels {
            let f = frame_of_ms(a.position_ms, spec.frame_rate);
            let (pb, pa) = class_patterns(a.class_index);
            (f - half..f).for_each(|r| truth[r] = Some(pb));
            (f..f + half).for_each(|r| truth[r] = Some(pa));
        }
        for (r, t) in truth.iter().enumerate() {
            let frame = v.features.features.row(r);
            for p in 0..patterns.rows() {
                let detected = crate::numerics::dot(frame, patterns.row(p)) > spec.amplitude / 2.0;
                correct += usize::from(detected == (*t == Some(p)));
                total += 1;
            }
        }
    }
    assert!(correct as f64 / total as f64 > 0.95);
}
