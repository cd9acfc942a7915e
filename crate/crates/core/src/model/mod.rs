//! The spotting network: learnable projection, pooling layer, and a single
//! sigmoid classifier with dropout, trained with multi-label BCE.

mod checkpoint;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{add_into, axpy, dot, sigmoid, Matrix};
use crate::pooling::{pool_frames, pool_frames_backward, LayerOptions, PoolParams, PoolSpec, PooledFeatures, TemporalWindow};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Predictions are clamped into `[PRED_CLAMP, 1 - PRED_CLAMP]` before the loss.
pub const PRED_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Output width of the learnable projection; `None` feeds raw features
    /// straight into pooling.
    pub reduced_dim: Option<usize>,
    pub pool: PoolSpec,
    pub window: TemporalWindow,
    pub action_classes: usize,
    /// Adds an explicit no-action output unit after the action units.
    pub background: bool,
    pub dropout: f64,
    pub normalize_frames: bool,
}

impl ModelConfig {
    pub fn class_count(&self) -> usize {
        self.action_classes + usize::from(self.background)
    }

    pub fn feature_dim(&self) -> usize {
        self.reduced_dim.unwrap_or(self.input_dim)
    }

    pub fn pool_dim(&self) -> usize {
        self.pool.output_dim(self.feature_dim())
    }

    pub fn window_frames(&self) -> usize {
        self.window.total_frames()
    }

    pub fn validate(&self) -> Result<()> {
        self.pool.validate()?;
        self.window.validate()?;
        if self.input_dim == 0 || self.reduced_dim == Some(0) {
            return Err(Error::invalid("feature dimensions must be positive"));
        }
        if self.class_count() == 0 {
            return Err(Error::invalid("model needs at least one output"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// D_in × D_red
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    /// pool_dim × C
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Every learnable tensor of the model. Gradients use the same type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub projection: Option<Projection>,
    pub heads: Vec<PoolParams>,
    pub classifier: Classifier,
}

/// Name, shape and data of one parameter tensor.
pub type TensorView<'a> = (String, Vec<usize>, &'a [f64]);

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            projection: self.projection.as_ref().map(|p| Projection {
                weights: Matrix::zeros(p.weights.rows(), p.weights.cols()),
                bias: vec![0.0; p.bias.len()],
            }),
            heads: self.heads.iter().map(PoolParams::zeros_like).collect(),
            classifier: Classifier {
                weights: Matrix::zeros(self.classifier.weights.rows(), self.classifier.weights.cols()),
                bias: vec![0.0; self.classifier.bias.len()],
            },
        }
    }

    fn head_prefix(&self, index: usize) -> String {
        match (self.heads.len(), index) {
            (2, 0) => "pool.before".into(),
            (2, 1) => "pool.after".into(),
            (1, _) => "pool".into(),
            _ => format!("pool.{index}"),
        }
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = Vec::new();
        if let Some(p) = &self.projection {
            out.push(("projection.weight".into(), vec![p.weights.rows(), p.weights.cols()], p.weights.as_slice()));
            out.push(("projection.bias".into(), vec![p.bias.len()], &p.bias[..]));
        }
        for (i, head) in self.heads.iter().enumerate() {
            let prefix = self.head_prefix(i);
            for (name, shape, data) in head.tensors() {
                out.push((format!("{prefix}.{name}"), shape, data));
            }
        }
        let c = &self.classifier;
        out.push(("classifier.weight".into(), vec![c.weights.rows(), c.weights.cols()], c.weights.as_slice()));
        out.push(("classifier.bias".into(), vec![c.bias.len()], &c.bias[..]));
        out
    }

    /// Mutable tensors in the same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let prefixes: Vec<String> = (0..self.heads.len()).map(|i| self.head_prefix(i)).collect();
        let mut out = Vec::new();
        if let Some(p) = self.projection.as_mut() {
            out.push(("projection.weight".to_string(), p.weights.as_mut_slice()));
            out.push(("projection.bias".to_string(), &mut p.bias[..]));
        }
        for (head, prefix) in self.heads.iter_mut().zip(prefixes) {
            for (name, data) in head.tensors_mut() {
                out.push((format!("{prefix}.{name}"), data));
            }
        }
        out.push(("classifier.weight".to_string(), self.classifier.weights.as_mut_slice()));
        out.push(("classifier.bias".to_string(), &mut self.classifier.bias[..]));
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.len());
        for (_, _, t) in self.tensors() {
            flat.extend_from_slice(t);
        }
        flat
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.len();
        if flat.len() != total {
            return Err(Error::shape("ModelParams::assign_flat", total, flat.len()));
        }
        let mut offset = 0;
        for (_, t) in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &ModelParams) -> Result<()> {
        let theirs = other.tensors();
        let mut mine = self.tensors_mut();
        if mine.len() != theirs.len() {
            return Err(Error::invalid("parameter structure mismatch"));
        }
        for ((name, dst), (_, _, src)) in mine.iter_mut().zip(&theirs) {
            if dst.len() != src.len() {
                return Err(Error::shape("ModelParams::accumulate", format!("{name} of {}", dst.len()), src.len()));
            }
            add_into(dst, src);
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, _, t)| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Independent per-class sigmoid scores for one chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkPrediction {
    pub scores: Vec<f64>,
}

/// Parameter counts per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub projection: usize,
    pub pooling: usize,
    pub classifier: usize,
    pub total: usize,
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    input: Matrix,
    pooled: PooledFeatures,
    mask: Option<Vec<f64>>,
    classifier_input: Vec<f64>,
    scores: Vec<f64>,
}

impl ForwardCache {
    pub fn pooled_vector(&self) -> &[f64] {
        &self.pooled.vector
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpottingModel {
    config: ModelConfig,
    params: ModelParams,
    /// Bumped on every mutable access so stale caches can be detected.
    version: u64,
}

impl SpottingModel {
    /// Random projection and pooling parameters, zero classifier.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let projection = config.reduced_dim.map(|out| {
            let bound = 1.0 / (config.input_dim as f64).sqrt();
            Projection {
                weights: Matrix::from_fn(config.input_dim, out, |_, _| rng.random_range(-bound..bound)),
                bias: vec![0.0; out],
            }
        });
        let heads = config.pool.init_heads(config.feature_dim(), rng)?;
        let classifier = Classifier {
            weights: Matrix::zeros(config.pool_dim(), config.class_count()),
            bias: vec![0.0; config.class_count()],
        };
        Ok(Self {
            config,
            params: ModelParams {
                projection,
                heads,
                classifier,
            },
            version: 0,
        })
    }

    /// All-zero parameters with the shapes `config` implies.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let projection = config.reduced_dim.map(|out| Projection {
            weights: Matrix::zeros(config.input_dim, out),
            bias: vec![0.0; out],
        });
        let heads = config
            .pool
            .head_clusters()
            .into_iter()
            .map(|k| PoolParams::zeros(config.pool.kind, k, config.feature_dim()))
            .collect();
        let classifier = Classifier {
            weights: Matrix::zeros(config.pool_dim(), config.class_count()),
            bias: vec![0.0; config.class_count()],
        };
        Ok(Self {
            config,
            params: ModelParams {
                projection,
                heads,
                classifier,
            },
            version: 0,
        })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        let template = SpottingModel::zeroed(config)?;
        let shapes = |p: &ModelParams| -> Vec<(String, Vec<usize>)> {
            p.tensors().into_iter().map(|(n, s, _)| (n, s)).collect()
        };
        let (expected, actual) = (shapes(&template.params), shapes(&params));
        if expected != actual {
            return Err(Error::shape(
                "SpottingModel::from_parts",
                format!("{expected:?}"),
                format!("{actual:?}"),
            ));
        }
        Ok(Self {
            params,
            ..template
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        self.version += 1;
        &mut self.params
    }

    pub fn param_count(&self) -> ParamCount {
        let projection = self
            .params
            .projection
            .as_ref()
            .map_or(0, |p| p.weights.as_slice().len() + p.bias.len());
        let pooling = self.params.heads.iter().map(PoolParams::param_count).sum();
        let classifier = self.params.classifier.weights.as_slice().len() + self.params.classifier.bias.len();
        ParamCount {
            projection,
            pooling,
            classifier,
            total: projection + pooling + classifier,
        }
    }

    /// Per-frame affine map `X W + b`.
    pub fn project(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.config.input_dim {
            return Err(Error::shape("project", format!("input dim {}", self.config.input_dim), x.cols()));
        }
        match &self.params.projection {
            None => Ok(x.clone()),
            Some(p) => {
                let mut out = x.matmul(&p.weights)?;
                for i in 0..out.rows() {
                    add_into(out.row_mut(i), &p.bias);
                }
                Ok(out)
            }
        }
    }

    fn layer_options(&self) -> LayerOptions {
        LayerOptions {
            split: self.config.pool.temporally_aware.then(|| self.config.window.frames_before()),
            normalize_frames: self.config.normalize_frames,
            normalize_concat: self.config.pool.normalize_concat,
        }
    }

    /// Inference-mode forward pass.
    pub fn predict(&self, chunk: &Matrix) -> Result<ChunkPrediction> {
        self.forward(chunk, None).map(|(p, _)| p)
    }

    /// Inference-mode forward pass over frames that already went through
    /// [`project`](Self::project). Dense inference projects a whole video
    /// once and slides over the result.
    pub fn predict_projected(&self, projected: &Matrix) -> Result<ChunkPrediction> {
        let frames = self.config.window_frames();
        if projected.shape() != (frames, self.config.feature_dim()) {
            return Err(Error::shape(
                "predict_projected",
                format!("{frames}x{}", self.config.feature_dim()),
                format!("{}x{}", projected.rows(), projected.cols()),
            ));
        }
        let pooled = pool_frames(projected, &self.params.heads, self.layer_options())?;
        Ok(ChunkPrediction { scores: self.classify(&pooled.vector) })
    }

    fn classify(&self, input: &[f64]) -> Vec<f64> {
        let c = &self.params.classifier;
        let mut logits = c.bias.clone();
        for (j, &v) in input.iter().enumerate() {
            if v != 0.0 {
                axpy(v, c.weights.row(j), &mut logits);
            }
        }
        logits.iter().map(|&z| sigmoid(z)).collect()
    }

    /// Forward pass; dropout is active iff an RNG is supplied.
    pub fn forward(&self, chunk: &Matrix, dropout_rng: Option<&mut dyn RngCore>) -> Result<(ChunkPrediction, ForwardCache)> {
        let frames = self.config.window_frames();
        if chunk.rows() != frames {
            return Err(Error::shape("forward", format!("{frames} frames"), chunk.rows()));
        }
        let projected = self.project(chunk)?;
        let pooled = pool_frames(&projected, &self.params.heads, self.layer_options())?;

        let (mask, classifier_input) = match dropout_rng {
            Some(rng) if self.config.dropout > 0.0 => {
                let keep = 1.0 - self.config.dropout;
                let mask: Vec<f64> = (0..pooled.vector.len())
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let dropped = pooled.vector.iter().zip(&mask).map(|(v, m)| v * m).collect();
                (Some(mask), dropped)
            }
            _ => (None, pooled.vector.clone()),
        };

        let scores = self.classify(&classifier_input);
        let cache = ForwardCache {
            version: self.version,
            input: chunk.clone(),
            pooled,
            mask,
            classifier_input,
            scores: scores.clone(),
        };
        Ok((ChunkPrediction { scores }, cache))
    }

    /// Gradient of the chunk's mean BCE over its `C` outputs.
    pub fn backward(&self, cache: &ForwardCache, target: &[f64]) -> Result<ModelParams> {
        if cache.version != self.version {
            return Err(Error::StaleCache);
        }
        let classes = self.config.class_count();
        if target.len() != classes {
            return Err(Error::shape("backward", format!("{classes} targets"), target.len()));
        }
        let mut grads = self.params.zeros_like();

        let d_logits: Vec<f64> = cache
            .scores
            .iter()
            .zip(target)
            .map(|(&s, &y)| {
                // the clamp is flat outside (PRED_CLAMP, 1 - PRED_CLAMP)
                if s > PRED_CLAMP && s < 1.0 - PRED_CLAMP {
                    (s - y) / classes as f64
                } else {
                    0.0
                }
            })
            .collect();

        let c = &self.params.classifier;
        let mut d_input = vec![0.0; cache.classifier_input.len()];
        for (j, &v) in cache.classifier_input.iter().enumerate() {
            if v != 0.0 {
                axpy(v, &d_logits, grads.classifier.weights.row_mut(j));
            }
            d_input[j] = dot(c.weights.row(j), &d_logits);
        }
        grads.classifier.bias.copy_from_slice(&d_logits);

        if let Some(mask) = &cache.mask {
            d_input.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
        }

        let (d_projected, head_grads) = pool_frames_backward(&self.params.heads, &cache.pooled, &d_input)?;
        grads.heads = head_grads;

        if let (Some(gp), Some(_)) = (grads.projection.as_mut(), self.params.projection.as_ref()) {
            gp.weights = cache.input.t_matmul(&d_projected)?;
            gp.bias = d_projected.col_sums();
        }
        Ok(grads)
    }
}

/// Mean binary cross-entropy over every (sample, class) pair.
pub fn bce_loss(predictions: &[ChunkPrediction], targets: &[Vec<f64>]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::shape("bce_loss", format!("{} targets", predictions.len()), targets.len()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, t) in predictions.iter().zip(targets) {
        if p.scores.len() != t.len() {
            return Err(Error::shape("bce_loss", format!("{} classes", p.scores.len()), t.len()));
        }
        total += p.scores.iter().zip(t).map(|(&s, &y)| bce_term(s, y)).sum::<f64>();
        count += t.len();
    }
    if count == 0 {
        return Err(Error::Empty("bce_loss batch"));
    }
    Ok(total / count as f64)
}

#[inline]
pub(crate) fn bce_term(score: f64, target: f64) -> f64 {
    let p = score.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

#[cfg(test)]
mod tests;
