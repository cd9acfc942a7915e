use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{finite_diff_grad, max_relative_error};
use crate::pooling::{ClusterParams, PoolKind};

pub(crate) fn tiny_config(kind: PoolKind, temporal: bool) -> ModelConfig {
    ModelConfig {
        input_dim: 3,
        reduced_dim: Some(2),
        pool: PoolSpec::new(kind, temporal, 2),
        window: TemporalWindow::centered(1.0, 4.0),
        action_classes: 1,
        background: true,
        dropout: 0.4,
        normalize_frames: true,
    }
}

fn randomize(model: &mut SpottingModel, rng: &mut ChaCha8Rng) {
    for (_, t) in model.params_mut().tensors_mut() {
        t.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
}

fn random_chunk(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

#[test]
fn identity_projection_is_a_no_op() {
    let mut config = tiny_config(PoolKind::Avg, false);
    config.input_dim = 2;
    let mut model = SpottingModel::zeroed(config).unwrap();
    model.params_mut().projection.as_mut().unwrap().weights = Matrix::identity(2);
    let x = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
    assert_eq!(model.project(&x).unwrap(), x);
    assert!(model.project(&Matrix::zeros(2, 3)).is_err());
}

#[test]
fn default_projection_reduces_2048_to_512() {
    let config = ModelConfig {
        input_dim: 2048,
        reduced_dim: Some(512),
        pool: PoolSpec::new(PoolKind::Max, false, 0),
        window: TemporalWindow::centered(2.0, 15.0),
        action_classes: 17,
        background: true,
        dropout: 0.4,
        normalize_frames: true,
    };
    let model = SpottingModel::zeroed(config).unwrap();
    let out = model.project(&Matrix::zeros(30, 2048)).unwrap();
    assert_eq!(out.shape(), (30, 512));
    assert_eq!(model.param_count().projection, 2048 * 512 + 512);
}

#[test]
fn zero_classifier_scores_one_half_and_eval_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for kind in PoolKind::ALL {
        let model = SpottingModel::new(tiny_config(kind, true), &mut rng).unwrap();
        let x = random_chunk(4, 3, &mut rng);
        let a = model.predict(&x).unwrap();
        assert_eq!(a.scores, vec![0.5, 0.5]);
        let mut trained = model.clone();
        randomize(&mut trained, &mut rng);
        assert_eq!(trained.predict(&x).unwrap(), trained.predict(&x).unwrap());
    }
}

#[test]
fn wrong_frame_count_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = SpottingModel::new(tiny_config(PoolKind::NetVlad, false), &mut rng).unwrap();
    assert!(model.predict(&Matrix::zeros(5, 3)).is_err());
}

/// Straight-line transcription of the tiny NetVLAD model.
fn transcribed_scores(model: &SpottingModel, x: &Matrix) -> Vec<f64> {
    let p = model.params();
    let proj = p.projection.as_ref().unwrap();
    let cp = match &p.heads[0] {
        PoolParams::NetVlad(c) => c,
        _ => unreachable!(),
    };
    let centers = cp.centers.as_ref().unwrap();
    let mut frames = Vec::new();
    for i in 0..4 {
        let mut f = [0.0f64; 2];
        for (o, slot) in f.iter_mut().enumerate() {
            *slot = proj.bias[o] + (0..3).map(|j| x.get(i, j) * proj.weights.get(j, o)).sum::<f64>();
        }
        let n = (f[0] * f[0] + f[1] * f[1]).sqrt();
        frames.push([f[0] / n, f[1] / n]);
    }
    let mut v = [[0.0f64; 2]; 2];
    for f in &frames {
        let l0 = cp.weights.get(0, 0) * f[0] + cp.weights.get(0, 1) * f[1] + cp.biases[0];
        let l1 = cp.weights.get(1, 0) * f[0] + cp.weights.get(1, 1) * f[1] + cp.biases[1];
        let a0 = l0.exp() / (l0.exp() + l1.exp());
        let a1 = 1.0 - a0;
        for j in 0..2 {
            v[0][j] += a0 * (f[j] - centers.get(0, j));
            v[1][j] += a1 * (f[j] - centers.get(1, j));
        }
    }
    let mut flat = Vec::new();
    for row in v {
        let n = (row[0] * row[0] + row[1] * row[1]).sqrt();
        flat.push(row[0] / n);
        flat.push(row[1] / n);
    }
    let g = flat.iter().map(|a| a * a).sum::<f64>().sqrt();
    let flat: Vec<f64> = flat.iter().map(|a| a / g).collect();
    (0..2)
        .map(|c| {
            let z = p.classifier.bias[c] + (0..4).map(|j| flat[j] * p.classifier.weights.get(j, c)).sum::<f64>();
            1.0 / (1.0 + (-z).exp())
        })
        .collect()
}

#[test]
fn tiny_model_matches_transcription() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let mut model = SpottingModel::new(tiny_config(PoolKind::NetVlad, false), &mut rng).unwrap();
        randomize(&mut model, &mut rng);
        let x = random_chunk(4, 3, &mut rng);
        let got = model.predict(&x).unwrap().scores;
        let want = transcribed_scores(&model, &x);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn bce_examples() {
    let half = ChunkPrediction { scores: vec![0.5; 3] };
    let loss = bce_loss(&[half.clone(), half], &[vec![1.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]]).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);

    let perfect = ChunkPrediction { scores: vec![1.0, 0.0] };
    let loss = bce_loss(&[perfect], &[vec![1.0, 0.0]]).unwrap();
    assert!(loss <= 1e-6 * (1e-7f64).ln().abs());

    let p = ChunkPrediction { scores: vec![0.9, 0.2] };
    let loss = bce_loss(&[p], &[vec![1.0, 0.0]]).unwrap();
    assert!((loss - (-(0.9f64).ln() - (0.8f64).ln()) / 2.0).abs() < 1e-15);

    assert!(bce_loss(&[ChunkPrediction { scores: vec![0.5] }], &[vec![1.0, 0.0]]).is_err());
}

fn full_model_error(model: &SpottingModel, x: &Matrix, target: &[f64]) -> f64 {
    let (_, cache) = model.forward(x, None).unwrap();
    let analytic = model.backward(&cache, target).unwrap().flatten();
    let base = model.params().flatten();
    let mut probe = model.clone();
    let numeric = finite_diff_grad(
        |flat| {
            probe.params_mut().assign_flat(flat).unwrap();
            let p = probe.predict(x).unwrap();
            bce_loss(&[p], &[target.to_vec()]).unwrap()
        },
        &base,
        1e-5,
    )
    .unwrap();
    max_relative_error(&analytic, &numeric)
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut models = 0;
    for kind in PoolKind::ALL {
        for temporal in [false, true] {
            for _ in 0..2 {
                let mut model = SpottingModel::new(tiny_config(kind, temporal), &mut rng).unwrap();
                randomize(&mut model, &mut rng);
                let x = random_chunk(4, 3, &mut rng);
                let target = vec![f64::from(rng.random_bool(0.5)), f64::from(rng.random_bool(0.5))];
                let err = full_model_error(&model, &x, &target);
                assert!(err < 1e-4, "{kind:?} temporal={temporal}: {err}");
                models += 1;
            }
        }
    }
    assert!(models >= 20);
}

#[test]
fn gradients_mirror_parameter_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = SpottingModel::new(tiny_config(PoolKind::NetVlad, true), &mut rng).unwrap();
    let (_, cache) = model.forward(&random_chunk(4, 3, &mut rng), None).unwrap();
    let grads = model.backward(&cache, &[1.0, 0.0]).unwrap();
    let shapes = |p: &ModelParams| p.tensors().into_iter().map(|(n, s, _)| (n, s)).collect::<Vec<_>>();
    assert_eq!(shapes(&grads), shapes(model.params()));
}

#[test]
fn perfect_prediction_has_near_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut model = SpottingModel::new(tiny_config(PoolKind::Avg, false), &mut rng).unwrap();
    // saturate the classifier towards target [1, 0]
    model.params_mut().classifier.bias = vec![60.0, -60.0];
    let (p, cache) = model.forward(&random_chunk(4, 3, &mut rng), None).unwrap();
    assert!(p.scores[0] > 1.0 - 1e-12 && p.scores[1] < 1e-12);
    let grads = model.backward(&cache, &[1.0, 0.0]).unwrap();
    assert!(grads.norm() < 1e-9);
}

#[test]
fn stale_cache_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut model = SpottingModel::new(tiny_config(PoolKind::NetVlad, false), &mut rng).unwrap();
    let (_, cache) = model.forward(&random_chunk(4, 3, &mut rng), None).unwrap();
    model.params_mut().classifier.bias[0] = 1.0;
    assert!(matches!(model.backward(&cache, &[1.0, 0.0]), Err(Error::StaleCache)));
}

#[test]
fn dropout_mask_is_inverted_and_reused() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut model = SpottingModel::new(tiny_config(PoolKind::Avg, false), &mut rng).unwrap();
    randomize(&mut model, &mut rng);
    let x = random_chunk(4, 3, &mut rng);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(99);
    let (_, cache) = model.forward(&x, Some(&mut drop_rng)).unwrap();
    let mask = cache.mask.clone().unwrap();
    assert!(mask.iter().all(|&m| m == 0.0 || (m - 1.0 / 0.6).abs() < 1e-15));

    // gradient with the mask equals finite differences of the masked network
    let target = [1.0, 0.0];
    let analytic = model.backward(&cache, &target).unwrap();
    let c = &analytic.classifier.weights;
    for (j, &m) in mask.iter().enumerate() {
        if m == 0.0 {
            assert!(c.row(j).iter().all(|&g| g == 0.0));
        }
    }
}

#[test]
fn parameter_counts() {
    let head = |kind, temporal, clusters| {
        let config = ModelConfig {
            input_dim: 512,
            reduced_dim: None,
            pool: PoolSpec::new(kind, temporal, clusters),
            window: TemporalWindow::centered(2.0, 15.0),
            action_classes: 17,
            background: true,
            dropout: 0.4,
            normalize_frames: true,
        };
        SpottingModel::zeroed(config).unwrap().param_count()
    };
    assert_eq!(head(PoolKind::Max, false, 0).total, 9234);
    assert_eq!(head(PoolKind::Avg, false, 0).total, 9234);
    assert_eq!(head(PoolKind::Max, true, 0).total, 18450);
    assert_eq!(head(PoolKind::Avg, true, 0).total, 18450);
    let netvlad = head(PoolKind::NetVlad, false, 64);
    assert_eq!(netvlad.classifier, 589_842);
    assert_eq!(netvlad.pooling, 2 * 64 * 512 + 64);
    let plusplus = head(PoolKind::NetVlad, true, 64);
    assert_eq!(plusplus.classifier, 589_842);
    assert_eq!(plusplus.pooling, netvlad.pooling);
    let rvlad = head(PoolKind::NetRVlad, true, 64);
    assert_eq!(rvlad.pooling, 64 * 512 + 64);
}

#[test]
fn from_parts_checks_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = SpottingModel::new(tiny_config(PoolKind::NetVlad, true), &mut rng).unwrap();
    let rebuilt = SpottingModel::from_parts(model.config().clone(), model.params().clone()).unwrap();
    assert_eq!(rebuilt.params(), model.params());
    let mut other = model.params().clone();
    other.heads[0] = PoolParams::NetVlad(ClusterParams::random(3, 2, true, &mut rng));
    assert!(SpottingModel::from_parts(model.config().clone(), other).is_err());
}
