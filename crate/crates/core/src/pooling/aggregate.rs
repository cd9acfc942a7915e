//! Residual aggregation heads: VLAD, NetVLAD (literal and factored), NetRVLAD.

use crate::error::{Error, Result};
use crate::numerics::{
    add_into, axpy, dot, l2_normalize_backward, l2_normalize_in_place, softmax_backward,
    softmax_in_place, Matrix, NORM_EPS,
};

use super::ClusterParams;

/// How frames were assigned to clusters in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Assignment {
    Hard,
    Soft,
}

/// Intermediates kept for the backward pass of an aggregation head.
#[derive(Debug, Clone)]
pub struct AggregateCache {
    pub(crate) x: Matrix,
    /// N×K assignment weights (0/1 for VLAD).
    pub(crate) assign: Matrix,
    /// K×D descriptor before any normalization.
    pub(crate) raw: Matrix,
    pub(crate) norm: NormalizedDescriptor,
    /// Literal N×K×D residual tensor, kept only by the reference path.
    pub(crate) residuals: Option<Vec<f64>>,
    pub(crate) mode: Assignment,
    pub(crate) has_centers: bool,
}

impl AggregateCache {
    pub fn raw_descriptor(&self) -> &Matrix {
        &self.raw
    }

    pub fn assignments(&self) -> &Matrix {
        &self.assign
    }
}

/// Per-cluster L2, flatten, global L2.
#[derive(Debug, Clone)]
pub(crate) struct NormalizedDescriptor {
    pub(crate) out: Vec<f64>,
    intra: Matrix,
    row_norms: Vec<f64>,
    global_norm: f64,
}

pub(crate) fn normalize_descriptor(raw: &Matrix) -> NormalizedDescriptor {
    let mut intra = raw.clone();
    let row_norms = (0..raw.rows())
        .map(|k| l2_normalize_in_place(intra.row_mut(k), NORM_EPS))
        .collect();
    let mut out = intra.as_slice().to_vec();
    let global_norm = l2_normalize_in_place(&mut out, NORM_EPS);
    NormalizedDescriptor {
        out,
        intra,
        row_norms,
        global_norm,
    }
}

pub(crate) fn normalize_descriptor_backward(norm: &NormalizedDescriptor, grad: &[f64]) -> Matrix {
    let d_intra = l2_normalize_backward(&norm.out, norm.global_norm, grad, NORM_EPS);
    let (k, d) = norm.intra.shape();
    let mut d_raw = Matrix::zeros(k, d);
    for c in 0..k {
        let g = l2_normalize_backward(
            norm.intra.row(c),
            norm.row_norms[c],
            &d_intra[c * d..(c + 1) * d],
            NORM_EPS,
        );
        d_raw.row_mut(c).copy_from_slice(&g);
    }
    d_raw
}

fn check_frames(x: &Matrix, dim: usize, context: &'static str) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::Empty("frame set"));
    }
    if x.cols() != dim {
        return Err(Error::shape(context, format!("feature dim {dim}"), x.cols()));
    }
    Ok(())
}

/// Row-wise softmax of `X wᵀ + b`, the convolutional form of the soft assignment.
pub fn soft_assign(x: &Matrix, params: &ClusterParams) -> Result<Matrix> {
    params.validate()?;
    if x.cols() != params.dim() {
        return Err(Error::shape("soft_assign", format!("feature dim {}", params.dim()), x.cols()));
    }
    let mut logits = x.matmul_t(&params.weights)?;
    for i in 0..logits.rows() {
        let row = logits.row_mut(i);
        add_into(row, &params.biases);
        softmax_in_place(row);
    }
    Ok(logits)
}

/// Backward of [`soft_assign`]: returns `(dX, dW, db)`.
pub fn soft_assign_backward(
    x: &Matrix,
    weights: &Matrix,
    assign: &Matrix,
    d_assign: &Matrix,
) -> Result<(Matrix, Matrix, Vec<f64>)> {
    let mut d_logits = Matrix::zeros(assign.rows(), assign.cols());
    for i in 0..assign.rows() {
        let g = softmax_backward(assign.row(i), d_assign.row(i));
        d_logits.row_mut(i).copy_from_slice(&g);
    }
    let d_w = d_logits.t_matmul(x)?;
    let d_b = d_logits.col_sums();
    let d_x = d_logits.matmul(weights)?;
    Ok((d_x, d_w, d_b))
}

/// Index of the nearest center; ties go to the lowest index.
fn nearest_center(x: &[f64], centers: &Matrix) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for k in 0..centers.rows() {
        let dist: f64 = x
            .iter()
            .zip(centers.row(k))
            .map(|(a, c)| (a - c) * (a - c))
            .sum();
        if dist < best_dist {
            best = k;
            best_dist = dist;
        }
    }
    best
}

/// Factored aggregation `Aᵀ X − diag(Σ_i A) C`; never builds the N×K×D tensor.
fn aggregate(x: &Matrix, assign: &Matrix, centers: Option<&Matrix>) -> Result<Matrix> {
    let mut raw = assign.t_matmul(x)?;
    if let Some(c) = centers {
        let mass = assign.col_sums();
        for (k, &s) in mass.iter().enumerate() {
            axpy(-s, c.row(k), raw.row_mut(k));
        }
    }
    Ok(raw)
}

fn finish(
    x: &Matrix,
    assign: Matrix,
    raw: Matrix,
    residuals: Option<Vec<f64>>,
    mode: Assignment,
    has_centers: bool,
) -> AggregateCache {
    let norm = normalize_descriptor(&raw);
    AggregateCache {
        x: x.clone(),
        assign,
        raw,
        norm,
        residuals,
        mode,
        has_centers,
    }
}

/// Hard-assignment VLAD.
pub(crate) fn vlad(x: &Matrix, centers: &Matrix) -> Result<AggregateCache> {
    if centers.rows() == 0 {
        return Err(Error::invalid("VLAD needs at least one cluster"));
    }
    check_frames(x, centers.cols(), "vlad_forward")?;
    let mut assign = Matrix::zeros(x.rows(), centers.rows());
    for i in 0..x.rows() {
        let k = nearest_center(x.row(i), centers);
        assign.set(i, k, 1.0);
    }
    let raw = aggregate(x, &assign, Some(centers))?;
    Ok(finish(x, assign, raw, None, Assignment::Hard, true))
}

/// Soft-assignment aggregation through the factored form.
pub(crate) fn netvlad_efficient(x: &Matrix, params: &ClusterParams) -> Result<AggregateCache> {
    params.validate()?;
    check_frames(x, params.dim(), "netvlad_forward")?;
    let assign = soft_assign(x, params)?;
    let raw = aggregate(x, &assign, params.centers.as_ref())?;
    Ok(finish(
        x,
        assign,
        raw,
        None,
        Assignment::Soft,
        params.centers.is_some(),
    ))
}

/// Literal transcription: materializes every residual `x_i − c_k`.
pub(crate) fn netvlad_naive(x: &Matrix, params: &ClusterParams) -> Result<AggregateCache> {
    params.validate()?;
    check_frames(x, params.dim(), "netvlad_forward_naive")?;
    let (n, d) = x.shape();
    let k_count = params.cluster_count();
    let assign = soft_assign(x, params)?;
    let zero = vec![0.0; d];
    let mut residuals = vec![0.0; n * k_count * d];
    for i in 0..n {
        for k in 0..k_count {
            let c = params.centers.as_ref().map_or(&zero[..], |c| c.row(k));
            let r = &mut residuals[(i * k_count + k) * d..(i * k_count + k + 1) * d];
            for j in 0..d {
                r[j] = x.get(i, j) - c[j];
            }
        }
    }
    let mut raw = Matrix::zeros(k_count, d);
    for i in 0..n {
        for k in 0..k_count {
            let a = assign.get(i, k);
            let r = &residuals[(i * k_count + k) * d..(i * k_count + k + 1) * d];
            axpy(a, r, raw.row_mut(k));
        }
    }
    Ok(finish(
        x,
        assign,
        raw,
        Some(residuals),
        Assignment::Soft,
        params.centers.is_some(),
    ))
}

/// Gradients of an aggregation head.
pub(crate) struct AggregateGrads {
    pub(crate) x: Matrix,
    pub(crate) weights: Option<Matrix>,
    pub(crate) biases: Option<Vec<f64>>,
    pub(crate) centers: Option<Matrix>,
}

/// Backward through normalization, aggregation and (for soft heads) the
/// soft assignment. `weights` must be the assignment weights used in the
/// forward pass when the head is soft; `centers` the centers when present.
pub(crate) fn aggregate_backward(
    cache: &AggregateCache,
    weights: Option<&Matrix>,
    centers: Option<&Matrix>,
    grad: &[f64],
) -> Result<AggregateGrads> {
    let (n, d) = cache.x.shape();
    let k_count = cache.raw.rows();
    if grad.len() != k_count * d {
        return Err(Error::shape("aggregate backward", k_count * d, grad.len()));
    }
    if cache.has_centers != centers.is_some() {
        return Err(Error::invalid("cluster centers do not match the forward pass"));
    }
    if let Some(c) = centers {
        if c.shape() != (k_count, d) {
            return Err(Error::shape(
                "aggregate backward",
                format!("centers {k_count}x{d}"),
                format!("{:?}", c.shape()),
            ));
        }
    }
    let d_raw = normalize_descriptor_backward(&cache.norm, grad);
    let assign = &cache.assign;

    let mut d_x;
    let mut d_assign = Matrix::zeros(n, k_count);
    let mut d_centers = centers.map(|_| Matrix::zeros(k_count, d));

    if let Some(residuals) = &cache.residuals {
        // literal path: push the gradient through the N×K×D residual tensor
        let mut d_res = vec![0.0; n * k_count * d];
        for i in 0..n {
            for k in 0..k_count {
                let a = assign.get(i, k);
                let dr = &mut d_res[(i * k_count + k) * d..(i * k_count + k + 1) * d];
                for (dst, g) in dr.iter_mut().zip(d_raw.row(k)) {
                    *dst = a * g;
                }
            }
        }
        for i in 0..n {
            for k in 0..k_count {
                let r = &residuals[(i * k_count + k) * d..(i * k_count + k + 1) * d];
                d_assign.set(i, k, dot(d_raw.row(k), r));
            }
        }
        d_x = Matrix::zeros(n, d);
        for i in 0..n {
            for k in 0..k_count {
                let dr = &d_res[(i * k_count + k) * d..(i * k_count + k + 1) * d];
                add_into(d_x.row_mut(i), dr);
                if let Some(dc) = d_centers.as_mut() {
                    axpy(-1.0, dr, dc.row_mut(k));
                }
            }
        }
    } else {
        d_x = assign.matmul(&d_raw)?;
        if cache.mode == Assignment::Soft {
            d_assign = cache.x.matmul_t(&d_raw)?;
            if let Some(c) = centers {
                for k in 0..k_count {
                    let shift = dot(d_raw.row(k), c.row(k));
                    for i in 0..n {
                        let v = d_assign.get(i, k) - shift;
                        d_assign.set(i, k, v);
                    }
                }
            }
        }
        if let Some(dc) = d_centers.as_mut() {
            let mass = assign.col_sums();
            for k in 0..k_count {
                axpy(-mass[k], d_raw.row(k), dc.row_mut(k));
            }
        }
    }

    let (d_w, d_b) = match cache.mode {
        Assignment::Hard => (None, None),
        Assignment::Soft => {
            let w = weights.ok_or_else(|| Error::invalid("soft head needs assignment weights"))?;
            let (dx_assign, d_w, d_b) = soft_assign_backward(&cache.x, w, assign, &d_assign)?;
            d_x.add_assign(&dx_assign)?;
            (Some(d_w), Some(d_b))
        }
    };

    Ok(AggregateGrads {
        x: d_x,
        weights: d_w,
        biases: d_b,
        centers: d_centers,
    })
}
