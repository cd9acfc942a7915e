//! Pooling heads over a set of frame features and the temporally-aware
//! wrapper that pools past and future context with separate vocabularies.
//!
//! Every head has an analytic backward pass. Aggregation heads (VLAD,
//! NetVLAD, NetRVLAD) normalize their K×D descriptor per cluster, flatten it
//! and normalize it globally.

pub(crate) mod aggregate;
mod reduce;
mod temporal;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_backward, l2_normalize_in_place, Matrix, NORM_EPS};

pub use aggregate::{soft_assign, soft_assign_backward, AggregateCache};
pub use reduce::{ReduceCache, ReduceMode};
pub use temporal::{temporal_split, TemporalWindow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
    NetVlad,
    NetRVlad,
    Vlad,
}

impl PoolKind {
    pub const ALL: [PoolKind; 5] = [
        PoolKind::Max,
        PoolKind::Avg,
        PoolKind::NetVlad,
        PoolKind::NetRVlad,
        PoolKind::Vlad,
    ];

    pub fn has_clusters(self) -> bool {
        matches!(self, PoolKind::NetVlad | PoolKind::NetRVlad | PoolKind::Vlad)
    }

    pub fn name(self) -> &'static str {
        match self {
            PoolKind::Max => "max",
            PoolKind::Avg => "avg",
            PoolKind::NetVlad => "netvlad",
            PoolKind::NetRVlad => "netrvlad",
            PoolKind::Vlad => "vlad",
        }
    }

    /// Human-readable name such as `NetVLAD++`.
    pub fn display_name(self, temporally_aware: bool) -> String {
        let base = match self {
            PoolKind::Max => "MaxPool",
            PoolKind::Avg => "AvgPool",
            PoolKind::NetVlad => "NetVLAD",
            PoolKind::NetRVlad => "NetRVLAD",
            PoolKind::Vlad => "VLAD",
        };
        if temporally_aware {
            format!("{base}++")
        } else {
            base.to_string()
        }
    }
}

impl std::str::FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PoolKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown pooling kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub temporally_aware: bool,
    /// Total cluster count K; ignored by max/avg.
    pub clusters: usize,
    pub clusters_before: usize,
    pub clusters_after: usize,
    /// L2-normalize the concatenated past/future descriptor.
    #[serde(default)]
    pub normalize_concat: bool,
}

impl PoolSpec {
    /// Splits `clusters` evenly between past and future when temporally aware.
    pub fn new(kind: PoolKind, temporally_aware: bool, clusters: usize) -> Self {
        let (before, after) = if temporally_aware {
            (clusters / 2, clusters - clusters / 2)
        } else {
            (0, 0)
        };
        Self {
            kind,
            temporally_aware,
            clusters,
            clusters_before: before,
            clusters_after: after,
            normalize_concat: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.kind.has_clusters() {
            return Ok(());
        }
        if self.clusters == 0 {
            return Err(Error::invalid("cluster count must be positive"));
        }
        if self.temporally_aware {
            if self.clusters_before + self.clusters_after != self.clusters {
                return Err(Error::invalid(format!(
                    "K_before ({}) + K_after ({}) must equal K ({})",
                    self.clusters_before, self.clusters_after, self.clusters
                )));
            }
            if self.clusters_before == 0 || self.clusters_after == 0 {
                return Err(Error::invalid("each temporal half needs at least one cluster"));
            }
        }
        Ok(())
    }

    /// Cluster count of each head, in past-then-future order.
    pub fn head_clusters(&self) -> Vec<usize> {
        match (self.kind.has_clusters(), self.temporally_aware) {
            (true, true) => vec![self.clusters_before, self.clusters_after],
            (true, false) => vec![self.clusters],
            (false, true) => vec![0, 0],
            (false, false) => vec![0],
        }
    }

    /// Pooled descriptor length for `dim`-dimensional frames.
    pub fn output_dim(&self, dim: usize) -> usize {
        self.head_clusters()
            .into_iter()
            .map(|k| if self.kind.has_clusters() { k * dim } else { dim })
            .sum()
    }

    /// Freshly initialized heads: weights and centers ~ U(-1/√D, 1/√D), biases 0.
    pub fn init_heads<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> Result<Vec<PoolParams>> {
        self.validate()?;
        Ok(self
            .head_clusters()
            .into_iter()
            .map(|k| PoolParams::init(self.kind, k, dim, rng))
            .collect())
    }
}

/// Assignment weights `w_k`, biases `b_k` and (for NetVLAD) centers `c_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub weights: Matrix,
    pub biases: Vec<f64>,
    pub centers: Option<Matrix>,
}

impl ClusterParams {
    pub fn new(weights: Matrix, biases: Vec<f64>, centers: Option<Matrix>) -> Result<Self> {
        let params = Self {
            weights,
            biases,
            centers,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn random<R: Rng + ?Sized>(k: usize, dim: usize, with_centers: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (dim.max(1) as f64).sqrt();
        let mut uniform = |_, _| rng.random_range(-bound..bound);
        let weights = Matrix::from_fn(k, dim, &mut uniform);
        let centers = with_centers.then(|| Matrix::from_fn(k, dim, &mut uniform));
        Self {
            weights,
            biases: vec![0.0; k],
            centers,
        }
    }

    pub fn cluster_count(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.rows();
        if k == 0 {
            return Err(Error::invalid("cluster count must be positive"));
        }
        if self.biases.len() != k {
            return Err(Error::shape("ClusterParams", format!("{k} biases"), self.biases.len()));
        }
        if let Some(c) = &self.centers {
            if c.shape() != self.weights.shape() {
                return Err(Error::shape(
                    "ClusterParams",
                    format!("centers {:?}", self.weights.shape()),
                    format!("{:?}", c.shape()),
                ));
            }
        }
        Ok(())
    }

    fn zeros_like(&self) -> Self {
        let (k, d) = self.weights.shape();
        Self {
            weights: Matrix::zeros(k, d),
            biases: vec![0.0; k],
            centers: self.centers.as_ref().map(|_| Matrix::zeros(k, d)),
        }
    }
}

/// Parameters of one pooling head. Also used as the gradient container,
/// since gradients share the parameter shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PoolParams {
    Max,
    Avg,
    Vlad { centers: Matrix },
    NetVlad(ClusterParams),
    NetRVlad(ClusterParams),
}

impl PoolParams {
    pub fn init<R: Rng + ?Sized>(kind: PoolKind, k: usize, dim: usize, rng: &mut R) -> Self {
        match kind {
            PoolKind::Max => PoolParams::Max,
            PoolKind::Avg => PoolParams::Avg,
            PoolKind::NetVlad => PoolParams::NetVlad(ClusterParams::random(k, dim, true, rng)),
            PoolKind::NetRVlad => PoolParams::NetRVlad(ClusterParams::random(k, dim, false, rng)),
            PoolKind::Vlad => {
                let bound = 1.0 / (dim.max(1) as f64).sqrt();
                PoolParams::Vlad {
                    centers: Matrix::from_fn(k, dim, |_, _| rng.random_range(-bound..bound)),
                }
            }
        }
    }

    pub fn zeros(kind: PoolKind, k: usize, dim: usize) -> Self {
        let clusters = |centers: bool| ClusterParams {
            weights: Matrix::zeros(k, dim),
            biases: vec![0.0; k],
            centers: centers.then(|| Matrix::zeros(k, dim)),
        };
        match kind {
            PoolKind::Max => PoolParams::Max,
            PoolKind::Avg => PoolParams::Avg,
            PoolKind::NetVlad => PoolParams::NetVlad(clusters(true)),
            PoolKind::NetRVlad => PoolParams::NetRVlad(clusters(false)),
            PoolKind::Vlad => PoolParams::Vlad {
                centers: Matrix::zeros(k, dim),
            },
        }
    }

    pub fn kind(&self) -> PoolKind {
        match self {
            PoolParams::Max => PoolKind::Max,
            PoolParams::Avg => PoolKind::Avg,
            PoolParams::Vlad { .. } => PoolKind::Vlad,
            PoolParams::NetVlad(_) => PoolKind::NetVlad,
            PoolParams::NetRVlad(_) => PoolKind::NetRVlad,
        }
    }

    pub fn cluster_count(&self) -> usize {
        match self {
            PoolParams::Max | PoolParams::Avg => 0,
            PoolParams::Vlad { centers } => centers.rows(),
            PoolParams::NetVlad(p) | PoolParams::NetRVlad(p) => p.cluster_count(),
        }
    }

    pub fn output_dim(&self, dim: usize) -> usize {
        match self {
            PoolParams::Max | PoolParams::Avg => dim,
            _ => self.cluster_count() * dim,
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            PoolParams::Max => PoolParams::Max,
            PoolParams::Avg => PoolParams::Avg,
            PoolParams::Vlad { centers } => PoolParams::Vlad {
                centers: Matrix::zeros(centers.rows(), centers.cols()),
            },
            PoolParams::NetVlad(p) => PoolParams::NetVlad(p.zeros_like()),
            PoolParams::NetRVlad(p) => PoolParams::NetRVlad(p.zeros_like()),
        }
    }

    /// Named parameter tensors with their shapes.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        match self {
            PoolParams::Max | PoolParams::Avg => Vec::new(),
            PoolParams::Vlad { centers } => {
                vec![("centers", vec![centers.rows(), centers.cols()], centers.as_slice())]
            }
            PoolParams::NetVlad(p) | PoolParams::NetRVlad(p) => {
                let (k, d) = p.weights.shape();
                let mut out = vec![
                    ("weights", vec![k, d], p.weights.as_slice()),
                    ("biases", vec![k], &p.biases[..]),
                ];
                if let Some(c) = &p.centers {
                    out.push(("centers", vec![k, d], c.as_slice()));
                }
                out
            }
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        match self {
            PoolParams::Max | PoolParams::Avg => Vec::new(),
            PoolParams::Vlad { centers } => vec![("centers", centers.as_mut_slice())],
            PoolParams::NetVlad(p) | PoolParams::NetRVlad(p) => {
                let mut out = vec![
                    ("weights", p.weights.as_mut_slice()),
                    ("biases", &mut p.biases[..]),
                ];
                if let Some(c) = p.centers.as_mut() {
                    out.push(("centers", c.as_mut_slice()));
                }
                out
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn forward(&self, x: &Matrix) -> Result<PoolOutput> {
        match self {
            PoolParams::Max => reduce_pool(x, ReduceMode::Max),
            PoolParams::Avg => reduce_pool(x, ReduceMode::Avg),
            PoolParams::Vlad { centers } => vlad_forward(x, centers),
            PoolParams::NetVlad(p) => netvlad_forward_efficient(x, p),
            PoolParams::NetRVlad(p) => netrvlad_forward(x, p),
        }
    }

    /// Returns the gradient w.r.t. the frames and a same-shaped gradient of
    /// this head's parameters.
    pub fn backward(&self, output: &PoolOutput, grad: &[f64]) -> Result<(Matrix, PoolParams)> {
        match (self, &output.cache) {
            (PoolParams::Max, PoolCache::Reduce(c)) if c.mode == ReduceMode::Max => {
                Ok((reduce_backward_checked(c, grad, output)?, PoolParams::Max))
            }
            (PoolParams::Avg, PoolCache::Reduce(c)) if c.mode == ReduceMode::Avg => {
                Ok((reduce_backward_checked(c, grad, output)?, PoolParams::Avg))
            }
            (PoolParams::Vlad { centers }, PoolCache::Aggregate(c))
                if c.mode == aggregate::Assignment::Hard =>
            {
                let g = aggregate::aggregate_backward(c, None, Some(centers), grad)?;
                let centers = g.centers.expect("VLAD gradient carries centers");
                Ok((g.x, PoolParams::Vlad { centers }))
            }
            (PoolParams::NetVlad(p), PoolCache::Aggregate(_)) => {
                let (dx, dp) = netvlad_backward(p, output, grad)?;
                Ok((dx, PoolParams::NetVlad(dp)))
            }
            (PoolParams::NetRVlad(p), PoolCache::Aggregate(_)) => {
                let (dx, dp) = netvlad_backward(p, output, grad)?;
                Ok((dx, PoolParams::NetRVlad(dp)))
            }
            _ => Err(Error::invalid(format!(
                "pooling cache does not belong to a {} head",
                self.kind().name()
            ))),
        }
    }

    /// In-place `self += other`; both must have identical structure.
    pub fn accumulate(&mut self, other: &PoolParams) -> Result<()> {
        let theirs = other.tensors();
        let mut mine = self.tensors_mut();
        if mine.len() != theirs.len() {
            return Err(Error::invalid("pooling gradient structure mismatch"));
        }
        for ((_, dst), (_, _, src)) in mine.iter_mut().zip(&theirs) {
            if dst.len() != src.len() {
                return Err(Error::shape("PoolParams::accumulate", dst.len(), src.len()));
            }
            crate::numerics::add_into(dst, src);
        }
        Ok(())
    }
}

fn reduce_backward_checked(cache: &ReduceCache, grad: &[f64], output: &PoolOutput) -> Result<Matrix> {
    if grad.len() != output.vector.len() {
        return Err(Error::shape("reduce backward", output.vector.len(), grad.len()));
    }
    Ok(reduce::reduce_backward(cache, grad))
}

#[derive(Debug, Clone)]
pub enum PoolCache {
    Reduce(ReduceCache),
    Aggregate(AggregateCache),
}

/// Pooled descriptor plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct PoolOutput {
    pub vector: Vec<f64>,
    pub cache: PoolCache,
}

impl PoolOutput {
    /// The K×D descriptor before normalization (aggregation heads only).
    pub fn raw_descriptor(&self) -> Option<&Matrix> {
        match &self.cache {
            PoolCache::Aggregate(c) => Some(c.raw_descriptor()),
            PoolCache::Reduce(_) => None,
        }
    }

    pub fn assignments(&self) -> Option<&Matrix> {
        match &self.cache {
            PoolCache::Aggregate(c) => Some(c.assignments()),
            PoolCache::Reduce(_) => None,
        }
    }

    fn from_aggregate(cache: AggregateCache) -> Self {
        Self {
            vector: cache.norm.out.clone(),
            cache: PoolCache::Aggregate(cache),
        }
    }
}

/// Hard-assignment VLAD over the given centers.
pub fn vlad_forward(x: &Matrix, centers: &Matrix) -> Result<PoolOutput> {
    aggregate::vlad(x, centers).map(PoolOutput::from_aggregate)
}

/// NetVLAD through the literal residual expansion (reference path).
pub fn netvlad_forward_naive(x: &Matrix, params: &ClusterParams) -> Result<PoolOutput> {
    aggregate::netvlad_naive(x, params).map(PoolOutput::from_aggregate)
}

/// NetVLAD as two matrix products: `Aᵀ X − (Σ_i A) ∘ C`.
pub fn netvlad_forward_efficient(x: &Matrix, params: &ClusterParams) -> Result<PoolOutput> {
    aggregate::netvlad_efficient(x, params).map(PoolOutput::from_aggregate)
}

/// Residual-less NetVLAD; `params.centers` must be `None`.
pub fn netrvlad_forward(x: &Matrix, params: &ClusterParams) -> Result<PoolOutput> {
    if params.centers.is_some() {
        return Err(Error::invalid("NetRVLAD parameters carry no cluster centers"));
    }
    aggregate::netvlad_efficient(x, params).map(PoolOutput::from_aggregate)
}

/// Backward of NetVLAD/NetRVLAD. Follows whichever path (literal or
/// factored) produced `output`.
pub fn netvlad_backward(
    params: &ClusterParams,
    output: &PoolOutput,
    upstream: &[f64],
) -> Result<(Matrix, ClusterParams)> {
    let cache = match &output.cache {
        PoolCache::Aggregate(c) if c.mode == aggregate::Assignment::Soft => c,
        _ => return Err(Error::invalid("cache was not produced by a NetVLAD forward pass")),
    };
    if cache.assign.cols() != params.cluster_count() || cache.x.cols() != params.dim() {
        return Err(Error::shape(
            "netvlad_backward",
            format!("{}x{} parameters", cache.assign.cols(), cache.x.cols()),
            format!("{}x{}", params.cluster_count(), params.dim()),
        ));
    }
    let g = aggregate::aggregate_backward(
        cache,
        Some(&params.weights),
        params.centers.as_ref(),
        upstream,
    )?;
    Ok((
        g.x,
        ClusterParams {
            weights: g.weights.expect("soft head has weight gradient"),
            biases: g.biases.expect("soft head has bias gradient"),
            centers: g.centers,
        },
    ))
}

/// Column-wise max or mean over frames.
pub fn reduce_pool(x: &Matrix, mode: ReduceMode) -> Result<PoolOutput> {
    let (vector, cache) = reduce::reduce(x, mode)?;
    Ok(PoolOutput {
        vector,
        cache: PoolCache::Reduce(cache),
    })
}

/// Options for [`pool_frames`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LayerOptions {
    /// Index of the first future frame; `None` pools all frames with one head.
    pub split: Option<usize>,
    /// L2-normalize each frame along the feature dimension before pooling.
    pub normalize_frames: bool,
    pub normalize_concat: bool,
}

#[derive(Debug, Clone)]
struct PartCache {
    rows: std::ops::Range<usize>,
    /// Normalized frames and their original norms.
    normalized: Option<(Matrix, Vec<f64>)>,
    output: PoolOutput,
}

/// Concatenated output of one or two pooling heads.
#[derive(Debug, Clone)]
pub struct PooledFeatures {
    pub vector: Vec<f64>,
    parts: Vec<PartCache>,
    concat_norm: Option<(Vec<f64>, f64)>,
    frames: usize,
    dim: usize,
}

impl PooledFeatures {
    /// Per-head outputs in past-then-future order.
    pub fn head_outputs(&self) -> impl Iterator<Item = &PoolOutput> {
        self.parts.iter().map(|p| &p.output)
    }
}

/// Runs one head over all frames, or two heads over the past/future halves,
/// and concatenates `[past ‖ future]`.
pub fn pool_frames(x: &Matrix, heads: &[PoolParams], opts: LayerOptions) -> Result<PooledFeatures> {
    let (n, d) = x.shape();
    let ranges = match (opts.split, heads.len()) {
        (None, 1) => vec![0..n],
        (Some(s), 2) => {
            if s == 0 || s >= n {
                return Err(Error::invalid(format!(
                    "split at frame {s} leaves an empty half of {n} frames"
                )));
            }
            vec![0..s, s..n]
        }
        (split, count) => {
            return Err(Error::invalid(format!(
                "{count} pooling heads cannot serve split {split:?}"
            )))
        }
    };
    let mut parts = Vec::with_capacity(ranges.len());
    let mut vector = Vec::new();
    for (head, rows) in heads.iter().zip(ranges) {
        let mut frames = x.slice_rows(rows.clone());
        let normalized = if opts.normalize_frames {
            let norms = (0..frames.rows())
                .map(|i| l2_normalize_in_place(frames.row_mut(i), NORM_EPS))
                .collect();
            Some(norms)
        } else {
            None
        };
        let output = head.forward(&frames)?;
        vector.extend_from_slice(&output.vector);
        parts.push(PartCache {
            rows,
            normalized: normalized.map(|norms| (frames, norms)),
            output,
        });
    }
    let concat_norm = if opts.normalize_concat {
        let norm = l2_normalize_in_place(&mut vector, NORM_EPS);
        Some((vector.clone(), norm))
    } else {
        None
    };
    Ok(PooledFeatures {
        vector,
        parts,
        concat_norm,
        frames: n,
        dim: d,
    })
}

/// Backward of [`pool_frames`]: gradient w.r.t. the input frames and one
/// gradient per head.
pub fn pool_frames_backward(
    heads: &[PoolParams],
    pooled: &PooledFeatures,
    grad: &[f64],
) -> Result<(Matrix, Vec<PoolParams>)> {
    if grad.len() != pooled.vector.len() {
        return Err(Error::shape("pool_frames_backward", pooled.vector.len(), grad.len()));
    }
    if heads.len() != pooled.parts.len() {
        return Err(Error::invalid("head count differs from the forward pass"));
    }
    let grad = match &pooled.concat_norm {
        Some((out, norm)) => l2_normalize_backward(out, *norm, grad, NORM_EPS),
        None => grad.to_vec(),
    };
    let mut dx = Matrix::zeros(pooled.frames, pooled.dim);
    let mut head_grads = Vec::with_capacity(heads.len());
    let mut offset = 0;
    for (head, part) in heads.iter().zip(&pooled.parts) {
        let len = part.output.vector.len();
        let (mut d_frames, d_head) = head.backward(&part.output, &grad[offset..offset + len])?;
        offset += len;
        if let Some((normalized, norms)) = &part.normalized {
            for i in 0..d_frames.rows() {
                let g = l2_normalize_backward(normalized.row(i), norms[i], d_frames.row(i), NORM_EPS);
                d_frames.row_mut(i).copy_from_slice(&g);
            }
        }
        for (local, global) in part.rows.clone().enumerate() {
            dx.row_mut(global).copy_from_slice(d_frames.row(local));
        }
        head_grads.push(d_head);
    }
    Ok((dx, head_grads))
}

/// Temporally-aware pooling: frame-normalizes each half, pools past and
/// future with their own heads, and concatenates the descriptors.
pub fn pool_plusplus(
    x: &Matrix,
    spec: &PoolSpec,
    window: &TemporalWindow,
    before: &PoolParams,
    after: &PoolParams,
) -> Result<PooledFeatures> {
    if !spec.temporally_aware {
        return Err(Error::invalid("pool_plusplus needs a temporally-aware spec"));
    }
    spec.validate()?;
    window.validate()?;
    let expected = spec.head_clusters();
    for (head, k) in [before, after].into_iter().zip(expected) {
        if head.kind() != spec.kind || head.cluster_count() != k {
            return Err(Error::invalid(format!(
                "head {}({}) does not match spec {}({k})",
                head.kind().name(),
                head.cluster_count(),
                spec.kind.name()
            )));
        }
    }
    if x.rows() != window.total_frames() {
        return Err(Error::shape("pool_plusplus", window.total_frames(), x.rows()));
    }
    pool_frames(
        x,
        &[before.clone(), after.clone()],
        LayerOptions {
            split: Some(window.frames_before()),
            normalize_frames: true,
            normalize_concat: spec.normalize_concat,
        },
    )
}

#[cfg(test)]
mod tests;
