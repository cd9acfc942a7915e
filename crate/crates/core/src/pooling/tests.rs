use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{finite_diff_grad, max_relative_error, norm2};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_params(k: usize, d: usize, centers: bool, rng: &mut ChaCha8Rng) -> ClusterParams {
    ClusterParams {
        weights: random_matrix(k, d, rng),
        biases: (0..k).map(|_| rng.random_range(-0.5..0.5)).collect(),
        centers: centers.then(|| random_matrix(k, d, rng)),
    }
}

/// Per-cluster L2, flatten, global L2, written out independently.
fn oracle_normalize(v: &[Vec<f64>]) -> Vec<f64> {
    let mut flat = Vec::new();
    for row in v {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        flat.extend(row.iter().map(|x| x / n));
    }
    let n = flat.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    flat.iter().map(|x| x / n).collect()
}

/// Soft-assignment aggregation as a scalar triple loop.
fn oracle_netvlad(x: &Matrix, p: &ClusterParams) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (n, d) = x.shape();
    let k = p.weights.rows();
    let mut v = vec![vec![0.0; d]; k];
    for i in 0..n {
        let logits: Vec<f64> = (0..k)
            .map(|c| (0..d).map(|j| p.weights.get(c, j) * x.get(i, j)).sum::<f64>() + p.biases[c])
            .collect();
        let denom: f64 = logits.iter().map(|l| l.exp()).sum();
        for c in 0..k {
            let a = logits[c].exp() / denom;
            for j in 0..d {
                let center = p.centers.as_ref().map_or(0.0, |m| m.get(c, j));
                v[c][j] += a * (x.get(i, j) - center);
            }
        }
    }
    let out = oracle_normalize(&v);
    (v, out)
}

fn oracle_vlad(x: &Matrix, centers: &Matrix) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (n, d) = x.shape();
    let k = centers.rows();
    let mut v = vec![vec![0.0; d]; k];
    for i in 0..n {
        let mut best = 0;
        let mut best_d = f64::MAX;
        for c in 0..k {
            let dist: f64 = (0..d).map(|j| (x.get(i, j) - centers.get(c, j)).powi(2)).sum();
            if dist < best_d {
                best_d = dist;
                best = c;
            }
        }
        for j in 0..d {
            v[best][j] += x.get(i, j) - centers.get(best, j);
        }
    }
    let out = oracle_normalize(&v);
    (v, out)
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

#[test]
fn vlad_zero_residuals() {
    let centers = Matrix::from_rows(&[vec![0.0, 1.0], vec![2.0, -1.0]]).unwrap();
    let x = Matrix::from_rows(&[vec![0.0, 1.0], vec![2.0, -1.0], vec![0.0, 1.0]]).unwrap();
    let out = vlad_forward(&x, &centers).unwrap();
    assert!(out.raw_descriptor().unwrap().as_slice().iter().all(|&v| v == 0.0));
    assert!(out.vector.iter().all(|&v| v == 0.0));
}

#[test]
fn vlad_single_zero_center_sums_features() {
    let centers = Matrix::zeros(1, 2);
    let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let out = vlad_forward(&x, &centers).unwrap();
    assert_eq!(out.raw_descriptor().unwrap().as_slice(), &[1.0, 1.0]);
}

#[test]
fn vlad_matches_brute_force() {
    let mut r = rng(1);
    for _ in 0..20 {
        let x = random_matrix(5, 4, &mut r);
        let c = random_matrix(3, 4, &mut r);
        let out = vlad_forward(&x, &c).unwrap();
        let (raw, norm) = oracle_vlad(&x, &c);
        assert_close(out.raw_descriptor().unwrap().as_slice(), &raw.concat(), 1e-12);
        assert_close(&out.vector, &norm, 1e-12);
    }
}

#[test]
fn vlad_ties_go_to_lowest_cluster() {
    let centers = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
    let x = Matrix::from_rows(&[vec![0.0, 3.0]]).unwrap();
    let out = vlad_forward(&x, &centers).unwrap();
    assert_eq!(out.assignments().unwrap().row(0), &[1.0, 0.0]);
}

#[test]
fn zero_clusters_is_an_error() {
    let x = Matrix::zeros(2, 3);
    assert!(vlad_forward(&x, &Matrix::zeros(0, 3)).is_err());
    let empty = ClusterParams {
        weights: Matrix::zeros(0, 3),
        biases: vec![],
        centers: Some(Matrix::zeros(0, 3)),
    };
    assert!(netvlad_forward_naive(&x, &empty).is_err());
    assert!(netvlad_forward_efficient(&x, &empty).is_err());
}

#[test]
fn soft_assign_uniform_and_single_cluster() {
    let mut r = rng(2);
    let x = random_matrix(6, 3, &mut r);
    let zero = ClusterParams::new(Matrix::zeros(4, 3), vec![0.0; 4], None).unwrap();
    let a = soft_assign(&x, &zero).unwrap();
    assert!(a.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let single = random_params(1, 3, true, &mut r);
    let a = soft_assign(&x, &single).unwrap();
    assert!(a.as_slice().iter().all(|&v| v == 1.0));
    assert!(soft_assign(&random_matrix(2, 5, &mut r), &single).is_err());
}

#[test]
fn soft_assign_approaches_hard_assignment_at_high_temperature() {
    let mut r = rng(3);
    let alpha = 1000.0;
    let mut checked = 0;
    while checked < 50 {
        let d = r.random_range(2..6);
        let k = r.random_range(2..6);
        let centers = random_matrix(k, d, &mut r);
        let x = random_matrix(4, d, &mut r);
        // skip near-equidistant points
        let ok = (0..x.rows()).all(|i| {
            let mut dists: Vec<f64> = (0..k)
                .map(|c| (0..d).map(|j| (x.get(i, j) - centers.get(c, j)).powi(2)).sum())
                .collect();
            dists.sort_by(f64::total_cmp);
            dists[1] - dists[0] > 0.02
        });
        if !ok {
            continue;
        }
        let weights = Matrix::from_fn(k, d, |c, j| 2.0 * alpha * centers.get(c, j));
        let biases = (0..k)
            .map(|c| -alpha * centers.row(c).iter().map(|v| v * v).sum::<f64>())
            .collect();
        let soft = soft_assign(&x, &ClusterParams::new(weights, biases, None).unwrap()).unwrap();
        let hard = vlad_forward(&x, &centers).unwrap();
        assert_close(soft.as_slice(), hard.assignments().unwrap().as_slice(), 1e-6);
        checked += 1;
    }
}

#[test]
fn netvlad_single_cluster_sums_residuals() {
    let mut r = rng(4);
    let x = random_matrix(5, 3, &mut r);
    let p = random_params(1, 3, true, &mut r);
    let out = netvlad_forward_naive(&x, &p).unwrap();
    let raw = out.raw_descriptor().unwrap();
    for j in 0..3 {
        let expected: f64 = (0..5).map(|i| x.get(i, j)).sum::<f64>() - 5.0 * p.centers.as_ref().unwrap().get(0, j);
        assert!((raw.get(0, j) - expected).abs() < 1e-12);
    }
    let zero_centers = ClusterParams {
        centers: Some(Matrix::zeros(1, 3)),
        ..p
    };
    let out = netvlad_forward_efficient(&x, &zero_centers).unwrap();
    assert_close(out.raw_descriptor().unwrap().as_slice(), &x.col_sums(), 1e-12);
}

#[test]
fn netvlad_zero_residual_limit() {
    let center = vec![0.3, -0.2, 0.5];
    let x = Matrix::from_rows(&[center.clone(), center.clone(), center.clone()]).unwrap();
    // cluster 0 dominates the assignment
    let p = ClusterParams::new(
        Matrix::zeros(2, 3),
        vec![40.0, 0.0],
        Some(Matrix::from_rows(&[center.clone(), vec![1.0, 1.0, 1.0]]).unwrap()),
    )
    .unwrap();
    let out = netvlad_forward_efficient(&x, &p).unwrap();
    assert!(norm2(out.raw_descriptor().unwrap().row(0)) < 1e-12);
}

#[test]
fn netvlad_matches_triple_loop() {
    let mut r = rng(5);
    for _ in 0..10 {
        let x = random_matrix(7, 6, &mut r);
        let p = random_params(4, 6, true, &mut r);
        let (raw, norm) = oracle_netvlad(&x, &p);
        for out in [netvlad_forward_naive(&x, &p).unwrap(), netvlad_forward_efficient(&x, &p).unwrap()] {
            assert_close(out.raw_descriptor().unwrap().as_slice(), &raw.concat(), 1e-12);
            assert_close(&out.vector, &norm, 1e-12);
        }
    }
}

#[test]
fn naive_and_efficient_agree() {
    let mut r = rng(6);
    for case in 0..120 {
        let n = r.random_range(1..=40);
        let k = [1, 2, 32, 64][case % 4];
        let d = r.random_range(2..=64);
        let x = Matrix::from_fn(n, d, |_, _| r.random_range(-2.0..2.0));
        let p = random_params(k, d, true, &mut r);
        let a = netvlad_forward_naive(&x, &p).unwrap();
        let b = netvlad_forward_efficient(&x, &p).unwrap();
        assert_close(&a.vector, &b.vector, 1e-10);
    }
}

#[test]
fn netrvlad_is_netvlad_without_centers() {
    let mut r = rng(7);
    for _ in 0..10 {
        let x = random_matrix(6, 5, &mut r);
        let p = random_params(3, 5, false, &mut r);
        let rv = netrvlad_forward(&x, &p).unwrap();
        let zero_c = ClusterParams {
            centers: Some(Matrix::zeros(3, 5)),
            ..p.clone()
        };
        let v = netvlad_forward_efficient(&x, &zero_c).unwrap();
        assert_eq!(rv.vector, v.vector);
        let (raw, norm) = oracle_netvlad(&x, &p);
        assert_close(rv.raw_descriptor().unwrap().as_slice(), &raw.concat(), 1e-12);
        assert_close(&rv.vector, &norm, 1e-12);
    }
    let single = random_params(1, 5, false, &mut r);
    let x = random_matrix(4, 5, &mut r);
    let out = netrvlad_forward(&x, &single).unwrap();
    assert_close(out.raw_descriptor().unwrap().as_slice(), &x.col_sums(), 1e-12);
    assert!(netrvlad_forward(&x, &random_params(2, 5, true, &mut r)).is_err());
}

#[test]
fn aggregation_output_has_unit_norm() {
    let mut r = rng(8);
    for _ in 0..30 {
        let x = random_matrix(9, 7, &mut r);
        let p = random_params(5, 7, true, &mut r);
        let outs = [
            netvlad_forward_efficient(&x, &p).unwrap(),
            netrvlad_forward(&x, &ClusterParams { centers: None, ..p.clone() }).unwrap(),
            vlad_forward(&x, p.centers.as_ref().unwrap()).unwrap(),
        ];
        for out in outs {
            assert!((norm2(&out.vector) - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn reduce_examples() {
    let x = Matrix::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0]]).unwrap();
    assert_eq!(reduce_pool(&x, ReduceMode::Max).unwrap().vector, vec![3.0, 5.0]);
    assert_eq!(reduce_pool(&x, ReduceMode::Avg).unwrap().vector, vec![2.0, 3.5]);
    let one = Matrix::from_rows(&[vec![-1.0, 4.0]]).unwrap();
    for mode in [ReduceMode::Max, ReduceMode::Avg] {
        assert_eq!(reduce_pool(&one, mode).unwrap().vector, vec![-1.0, 4.0]);
    }
    assert!(reduce_pool(&Matrix::zeros(0, 2), ReduceMode::Max).is_err());
}

#[test]
fn max_backward_tie_goes_to_earliest_frame() {
    let x = Matrix::from_rows(&[vec![0.0, 2.0], vec![1.0, 2.0], vec![1.0, -3.0]]).unwrap();
    let out = reduce_pool(&x, ReduceMode::Max).unwrap();
    let (dx, _) = PoolParams::Max.backward(&out, &[1.5, -2.0]).unwrap();
    assert_eq!(dx.as_slice(), &[0.0, -2.0, 1.5, 0.0, 0.0, 0.0]);

    // on a perturbed, untied neighborhood the analytic and numeric gradients agree
    let mut perturbed = x.clone();
    perturbed.set(1, 0, 1.0 + 1e-3);
    perturbed.set(0, 1, 2.0 + 1e-3);
    let upstream = [1.5, -2.0];
    let out = reduce_pool(&perturbed, ReduceMode::Max).unwrap();
    let (dx, _) = PoolParams::Max.backward(&out, &upstream).unwrap();
    let numeric = finite_diff_grad(
        |flat| {
            let m = Matrix::from_vec(3, 2, flat.to_vec()).unwrap();
            let v = reduce_pool(&m, ReduceMode::Max).unwrap().vector;
            v[0] * upstream[0] + v[1] * upstream[1]
        },
        perturbed.as_slice(),
        1e-5,
    )
    .unwrap();
    assert!(max_relative_error(dx.as_slice(), &numeric) < 1e-6);
}

fn check_head_gradients(head: &PoolParams, x: &Matrix, seed: u64) -> f64 {
    let out = head.forward(x).unwrap();
    let mut r = rng(seed);
    let upstream: Vec<f64> = (0..out.vector.len()).map(|_| r.random_range(-1.0..1.0)).collect();
    let loss = |h: &PoolParams, m: &Matrix| -> f64 {
        h.forward(m).unwrap().vector.iter().zip(&upstream).map(|(a, b)| a * b).sum()
    };
    let (dx, dparams) = head.backward(&out, &upstream).unwrap();
    let (rows, cols) = x.shape();
    let num_x = finite_diff_grad(
        |flat| loss(head, &Matrix::from_vec(rows, cols, flat.to_vec()).unwrap()),
        x.as_slice(),
        1e-5,
    )
    .unwrap();
    let mut worst = max_relative_error(dx.as_slice(), &num_x);
    let analytic = dparams.tensors();
    for (t, (name, _, grad)) in analytic.iter().enumerate() {
        let base: Vec<f64> = head.tensors()[t].2.to_vec();
        let numeric = finite_diff_grad(
            |flat| {
                let mut probe = head.clone();
                probe.tensors_mut()[t].1.copy_from_slice(flat);
                loss(&probe, x)
            },
            &base,
            1e-5,
        )
        .unwrap();
        let err = max_relative_error(grad, &numeric);
        assert!(err < 1e-4, "{}.{name}: relative error {err}", head.kind().name());
        worst = worst.max(err);
    }
    worst
}

#[test]
fn netvlad_backward_matches_finite_differences() {
    let mut r = rng(9);
    for seed in 0..5 {
        let x = random_matrix(5, 4, &mut r);
        let p = random_params(3, 4, true, &mut r);
        let err = check_head_gradients(&PoolParams::NetVlad(p.clone()), &x, seed);
        assert!(err < 1e-4, "{err}");

        // the literal path produces the same gradients
        let naive = netvlad_forward_naive(&x, &p).unwrap();
        let fast = netvlad_forward_efficient(&x, &p).unwrap();
        let g: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let (dxn, dpn) = netvlad_backward(&p, &naive, &g).unwrap();
        let (dxf, dpf) = netvlad_backward(&p, &fast, &g).unwrap();
        assert_close(dxn.as_slice(), dxf.as_slice(), 1e-10);
        assert_close(dpn.weights.as_slice(), dpf.weights.as_slice(), 1e-10);
        assert_close(dpn.centers.unwrap().as_slice(), dpf.centers.unwrap().as_slice(), 1e-10);
    }
}

#[test]
fn other_heads_match_finite_differences() {
    let mut r = rng(10);
    for seed in 0..4 {
        let x = random_matrix(6, 4, &mut r);
        let heads = [
            PoolParams::NetRVlad(random_params(3, 4, false, &mut r)),
            PoolParams::Vlad { centers: random_matrix(3, 4, &mut r) },
            PoolParams::Max,
            PoolParams::Avg,
        ];
        for head in &heads {
            let err = check_head_gradients(head, &x, seed);
            assert!(err < 1e-4, "{}: {err}", head.kind().name());
        }
    }
}

#[test]
fn backward_shapes_and_zero_upstream() {
    let mut r = rng(11);
    let x = random_matrix(5, 4, &mut r);
    let p = random_params(3, 4, true, &mut r);
    let out = netvlad_forward_efficient(&x, &p).unwrap();
    let (dx, dp) = netvlad_backward(&p, &out, &[0.0; 12]).unwrap();
    assert_eq!(dx.shape(), (5, 4));
    assert_eq!(dp.weights.shape(), (3, 4));
    assert!(dx.as_slice().iter().chain(dp.weights.as_slice()).all(|&v| v == 0.0));
    assert!(dp.biases.iter().all(|&v| v == 0.0));
    assert!(netvlad_backward(&p, &out, &[0.0; 11]).is_err());
    let other = random_params(2, 4, true, &mut r);
    assert!(netvlad_backward(&other, &out, &[0.0; 12]).is_err());
}

fn permute(x: &Matrix, order: &[usize]) -> Matrix {
    Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(order[i], j))
}

#[test]
fn heads_are_order_invariant() {
    let mut r = rng(12);
    for _ in 0..20 {
        let x = random_matrix(8, 5, &mut r);
        let mut order: Vec<usize> = (0..8).collect();
        for i in (1..8).rev() {
            order.swap(i, r.random_range(0..=i));
        }
        let shuffled = permute(&x, &order);
        let heads = [
            PoolParams::NetVlad(random_params(3, 5, true, &mut r)),
            PoolParams::NetRVlad(random_params(3, 5, false, &mut r)),
            PoolParams::Max,
            PoolParams::Avg,
        ];
        for head in &heads {
            let a = head.forward(&x).unwrap().vector;
            let b = head.forward(&shuffled).unwrap().vector;
            let tol = if matches!(head, PoolParams::Max) { 0.0 } else { 1e-12 };
            assert_close(&a, &b, tol);
        }
    }
}

#[test]
fn plusplus_output_dimensions() {
    let mut r = rng(13);
    let window = TemporalWindow::centered(2.0, 15.0);
    let x = random_matrix(30, 512, &mut r);
    let spec = PoolSpec::new(PoolKind::NetVlad, true, 64);
    assert_eq!((spec.clusters_before, spec.clusters_after), (32, 32));
    assert_eq!(spec.output_dim(512), 32768);
    let heads = spec.init_heads(512, &mut r).unwrap();
    let out = pool_plusplus(&x, &spec, &window, &heads[0], &heads[1]).unwrap();
    assert_eq!(out.vector.len(), (32 + 32) * 512);

    let max_spec = PoolSpec::new(PoolKind::Max, true, 0);
    let out = pool_plusplus(&x, &max_spec, &window, &PoolParams::Max, &PoolParams::Max).unwrap();
    assert_eq!(out.vector.len(), 1024);
    assert_eq!(max_spec.output_dim(512), 1024);

    assert!(pool_plusplus(&x, &PoolSpec::new(PoolKind::Max, false, 0), &window, &PoolParams::Max, &PoolParams::Max).is_err());
}

#[test]
fn plusplus_is_order_invariant_within_halves_but_not_across() {
    let mut r = rng(14);
    let window = TemporalWindow::centered(1.0, 8.0);
    for kind in [PoolKind::NetVlad, PoolKind::Avg] {
        let spec = PoolSpec::new(kind, true, 4);
        for _ in 0..100 {
            let heads = spec.init_heads(3, &mut r).unwrap();
            let x = random_matrix(8, 3, &mut r);
            let base = pool_plusplus(&x, &spec, &window, &heads[0], &heads[1]).unwrap().vector;
            let within = permute(&x, &[2, 0, 3, 1, 4, 5, 6, 7]);
            let same = pool_plusplus(&within, &spec, &window, &heads[0], &heads[1]).unwrap().vector;
            assert_close(&base, &same, 1e-12);
            let across = permute(&x, &[0, 1, 2, 4, 3, 5, 6, 7]);
            let moved = pool_plusplus(&across, &spec, &window, &heads[0], &heads[1]).unwrap().vector;
            let change = base.iter().zip(&moved).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(change > 1e-9, "{kind:?}: change {change}");
        }
    }
}

#[test]
fn layer_backward_matches_finite_differences() {
    let mut r = rng(15);
    for kind in PoolKind::ALL {
        for temporal in [false, true] {
            for normalize_concat in [false, true] {
                let mut spec = PoolSpec::new(kind, temporal, 4);
                spec.normalize_concat = normalize_concat;
                let heads = spec.init_heads(3, &mut r).unwrap();
                let x = random_matrix(6, 3, &mut r);
                let opts = LayerOptions {
                    split: temporal.then_some(3),
                    normalize_frames: true,
                    normalize_concat,
                };
                let pooled = pool_frames(&x, &heads, opts).unwrap();
                let upstream: Vec<f64> = (0..pooled.vector.len()).map(|_| r.random_range(-1.0..1.0)).collect();
                let (dx, _) = pool_frames_backward(&heads, &pooled, &upstream).unwrap();
                let numeric = finite_diff_grad(
                    |flat| {
                        let m = Matrix::from_vec(6, 3, flat.to_vec()).unwrap();
                        let v = pool_frames(&m, &heads, opts).unwrap().vector;
                        v.iter().zip(&upstream).map(|(a, b)| a * b).sum()
                    },
                    x.as_slice(),
                    1e-5,
                )
                .unwrap();
                let err = max_relative_error(dx.as_slice(), &numeric);
                assert!(err < 1e-4, "{kind:?} temporal={temporal}: {err}");
            }
        }
    }
}

#[test]
fn spec_validation() {
    assert!(PoolSpec::new(PoolKind::NetVlad, true, 1).validate().is_err());
    let mut spec = PoolSpec::new(PoolKind::NetVlad, true, 8);
    spec.clusters_after = 3;
    assert!(spec.validate().is_err());
    assert!(PoolSpec::new(PoolKind::Max, true, 0).validate().is_ok());
    assert_eq!("NetRVLAD".parse::<PoolKind>().unwrap(), PoolKind::NetRVlad);
}
