//! Finite-difference verification of every hand-written backward pass.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{bce_loss, ChunkPrediction, ModelConfig, SpottingModel};
use crate::numerics::{
    dot, finite_diff_grad, l2_normalize, l2_normalize_with_norm, l2_normalize_backward, max_relative_error, sigmoid,
    Matrix, NORM_EPS,
};
use crate::pooling::aggregate::{normalize_descriptor, normalize_descriptor_backward};
use crate::pooling::{
    pool_frames, pool_frames_backward, soft_assign, soft_assign_backward, ClusterParams, LayerOptions, PoolKind,
    PoolParams, PoolSpec, TemporalWindow,
};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCheck {
    pub component: String,
    pub cases: usize,
    pub max_rel_error: f64,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRAD_TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub models: usize,
    pub components: Vec<ComponentCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(ComponentCheck::passed)
    }

    pub fn to_table(&self) -> String {
        let width = self.components.iter().map(|c| c.component.len()).max().unwrap_or(9).max(9);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$} {:>6} {:>14}  status", "component", "cases", "max rel err");
        for c in &self.components {
            let status = if c.passed() { "ok" } else { "FAIL" };
            let _ = writeln!(out, "{:<width$} {:>6} {:>14.3e}  {status}", c.component, c.cases, c.max_rel_error);
        }
        out
    }
}

#[derive(Default)]
struct Tally(BTreeMap<String, (usize, f64)>);

impl Tally {
    fn record(&mut self, component: &str, analytic: &[f64], numeric: &[f64]) {
        let err = max_relative_error(analytic, numeric);
        let entry = self.0.entry(component.to_string()).or_insert((0, 0.0));
        entry.0 += 1;
        entry.1 = entry.1.max(err);
    }
}

fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn uniform_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn numeric(f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Result<Vec<f64>> {
    finite_diff_grad(f, x, FD_STEP)
}

fn check_soft_assign(tally: &mut Tally, rng: &mut ChaCha8Rng) -> Result<()> {
    let (n, d, k) = (rng.random_range(1..6), rng.random_range(2..5), rng.random_range(1..5));
    let x = uniform(n, d, rng);
    let params = ClusterParams::random(k, d, false, rng);
    let r = uniform(n, k, rng);
    let a = soft_assign(&x, &params)?;
    let (dx, dw, db) = soft_assign_backward(&x, &params.weights, &a, &r)?;
    let loss = |x: &Matrix, p: &ClusterParams| dot(soft_assign(x, p).expect("valid").as_slice(), r.as_slice());

    let nx = numeric(|v| loss(&Matrix::from_vec(n, d, v.to_vec()).expect("shape"), &params), x.as_slice())?;
    let nw = numeric(
        |v| {
            let p = ClusterParams { weights: Matrix::from_vec(k, d, v.to_vec()).expect("shape"), ..params.clone() };
            loss(&x, &p)
        },
        params.weights.as_slice(),
    )?;
    let nb = numeric(|v| loss(&x, &ClusterParams { biases: v.to_vec(), ..params.clone() }), &params.biases)?;
    tally.record("soft assignment", &[dx.into_vec(), dw.into_vec(), db].concat(), &[nx, nw, nb].concat());
    Ok(())
}

fn check_normalizations(tally: &mut Tally, rng: &mut ChaCha8Rng) -> Result<()> {
    let (k, d) = (rng.random_range(1..5), rng.random_range(2..6));
    let raw = uniform(k, d, rng);
    let r = uniform_vec(k * d, rng);

    let intra = |m: &[f64]| -> f64 {
        m.chunks(d).zip(r.chunks(d)).map(|(row, rr)| dot(&l2_normalize(row, NORM_EPS), rr)).sum()
    };
    let analytic: Vec<f64> = raw
        .row_iter()
        .zip(r.chunks(d))
        .flat_map(|(row, rr)| {
            let (y, norm) = l2_normalize_with_norm(row, NORM_EPS);
            l2_normalize_backward(&y, norm, rr, NORM_EPS)
        })
        .collect();
    tally.record("L2 per cluster", &analytic, &numeric(intra, raw.as_slice())?);

    let global = |m: &[f64]| dot(&l2_normalize(m, NORM_EPS), &r);
    let (y, norm) = l2_normalize_with_norm(raw.as_slice(), NORM_EPS);
    let analytic = l2_normalize_backward(&y, norm, &r, NORM_EPS);
    tally.record("L2 global", &analytic, &numeric(global, raw.as_slice())?);

    let both = |m: &[f64]| dot(&normalize_descriptor(&Matrix::from_vec(k, d, m.to_vec()).expect("shape")).out, &r);
    let analytic = normalize_descriptor_backward(&normalize_descriptor(&raw), &r);
    tally.record("L2 per cluster + global", analytic.as_slice(), &numeric(both, raw.as_slice())?);
    Ok(())
}

fn pool_flat(heads: &[PoolParams]) -> Vec<f64> {
    heads.iter().flat_map(|h| h.tensors().into_iter().flat_map(|(_, _, t)| t.to_vec())).collect()
}

fn assign_pool_flat(heads: &mut [PoolParams], flat: &[f64]) {
    let mut offset = 0;
    for h in heads {
        for (_, t) in h.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
    }
}

/// Pooling layer (one head, or two around a split) on random frames.
fn check_layer(tally: &mut Tally, rng: &mut ChaCha8Rng, kind: PoolKind, temporal: bool, concat_norm: bool) -> Result<()> {
    let (n, d) = (rng.random_range(2..7), rng.random_range(2..5));
    let clusters = if kind.has_clusters() { rng.random_range(if temporal { 2 } else { 1 }..5) } else { 0 };
    let spec = PoolSpec { normalize_concat: concat_norm, ..PoolSpec::new(kind, temporal, clusters) };
    let heads = spec.init_heads(d, rng)?;
    let opts = LayerOptions {
        split: temporal.then(|| rng.random_range(1..n)),
        normalize_frames: temporal || rng.random_bool(0.5),
        normalize_concat: concat_norm,
    };
    let x = uniform(n, d, rng);
    let pooled = pool_frames(&x, &heads, opts)?;
    let r = uniform_vec(pooled.vector.len(), rng);
    let (dx, grads) = pool_frames_backward(&heads, &pooled, &r)?;

    let nx = numeric(
        |v| dot(&pool_frames(&Matrix::from_vec(n, d, v.to_vec()).expect("shape"), &heads, opts).expect("valid").vector, &r),
        x.as_slice(),
    )?;
    let mut probe = heads.clone();
    let np = numeric(
        |v| {
            assign_pool_flat(&mut probe, v);
            dot(&pool_frames(&x, &probe, opts).expect("valid").vector, &r)
        },
        &pool_flat(&heads),
    )?;
    let name = kind.display_name(temporal);
    let name = if concat_norm { format!("{name} (normalized concat)") } else { name };
    tally.record(&name, &[dx.into_vec(), pool_flat(&grads)].concat(), &[nx, np].concat());
    Ok(())
}

fn check_bce(tally: &mut Tally, rng: &mut ChaCha8Rng) -> Result<()> {
    let c = rng.random_range(1..6);
    let z = uniform_vec(c, rng).into_iter().map(|v| 4.0 * v).collect::<Vec<_>>();
    let y: Vec<f64> = (0..c).map(|_| f64::from(rng.random_bool(0.5))).collect();
    let loss = |z: &[f64]| {
        let p = ChunkPrediction { scores: z.iter().map(|&v| sigmoid(v)).collect() };
        bce_loss(&[p], std::slice::from_ref(&y)).expect("matching lengths")
    };
    let analytic: Vec<f64> = z.iter().zip(&y).map(|(&v, &t)| (sigmoid(v) - t) / c as f64).collect();
    tally.record("BCE + sigmoid", &analytic, &numeric(loss, &z)?);
    Ok(())
}

/// Small model with every tensor drawn uniformly from [-1, 1].
pub fn random_tiny_model(kind: PoolKind, temporal: bool, rng: &mut ChaCha8Rng) -> Result<SpottingModel> {
    let half = rng.random_range(1..4);
    let config = ModelConfig {
        input_dim: rng.random_range(2..5),
        reduced_dim: Some(rng.random_range(2..4)),
        pool: PoolSpec::new(kind, temporal, 2 * rng.random_range(1..3)),
        window: TemporalWindow { frame_rate: 1.0, before_s: half as f64, after_s: rng.random_range(1..4) as f64 },
        action_classes: rng.random_range(1..4),
        background: true,
        dropout: 0.4,
        normalize_frames: true,
    };
    let mut model = SpottingModel::new(config, rng)?;
    for (_, t) in model.params_mut().tensors_mut() {
        t.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    Ok(model)
}

fn check_model(tally: &mut Tally, rng: &mut ChaCha8Rng, kind: PoolKind, temporal: bool) -> Result<()> {
    let model = random_tiny_model(kind, temporal, rng)?;
    let config = model.config().clone();
    let x = uniform(config.window_frames(), config.input_dim, rng);
    let target: Vec<f64> = (0..config.class_count()).map(|_| f64::from(rng.random_bool(0.5))).collect();
    let (_, cache) = model.forward(&x, None)?;
    let grads = model.backward(&cache, &target)?;
    let mut probe = model.clone();
    let numeric_all = numeric(
        |v| {
            probe.params_mut().assign_flat(v).expect("same length");
            let p = probe.predict(&x).expect("valid");
            bce_loss(&[p], std::slice::from_ref(&target)).expect("valid")
        },
        &model.params().flatten(),
    )?;
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut offset = 0;
    for (name, _, t) in grads.tensors() {
        let group = if name.starts_with("projection") {
            "projection"
        } else if name.starts_with("classifier") {
            "classifier"
        } else {
            "model pooling parameters"
        };
        let entry = groups.entry(group).or_default();
        entry.0.extend_from_slice(t);
        entry.1.extend_from_slice(&numeric_all[offset..offset + t.len()]);
        offset += t.len();
    }
    for (group, (a, n)) in groups {
        tally.record(group, &a, &n);
    }
    tally.record("full model", &grads.flatten(), &numeric_all);
    Ok(())
}

/// Runs every component check on random instances and `models` random tiny
/// end-to-end models, cycling through pooling kinds with and without the
/// temporal split.
pub fn run_gradient_suite(seed: u64, models: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::default();
    for _ in 0..20 {
        check_soft_assign(&mut tally, &mut rng)?;
        check_normalizations(&mut tally, &mut rng)?;
        check_bce(&mut tally, &mut rng)?;
        for kind in PoolKind::ALL {
            for temporal in [false, true] {
                check_layer(&mut tally, &mut rng, kind, temporal, false)?;
            }
            check_layer(&mut tally, &mut rng, kind, true, true)?;
        }
    }
    let variants: Vec<(PoolKind, bool)> =
        PoolKind::ALL.into_iter().flat_map(|k| [(k, false), (k, true)]).collect();
    for i in 0..models {
        let (kind, temporal) = variants[i % variants.len()];
        check_model(&mut tally, &mut rng, kind, temporal)?;
    }
    Ok(GradCheckReport {
        tolerance: GRAD_TOLERANCE,
        models,
        components: tally
            .0
            .into_iter()
            .map(|(component, (cases, max_rel_error))| ComponentCheck { component, cases, max_rel_error })
            .collect(),
    })
}
