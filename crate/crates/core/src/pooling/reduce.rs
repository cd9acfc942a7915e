use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{add_into, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceMode {
    Max,
    Avg,
}

#[derive(Debug, Clone)]
pub struct ReduceCache {
    pub(crate) mode: ReduceMode,
    pub(crate) frames: usize,
    /// Winning frame per column (max mode only).
    pub(crate) argmax: Vec<usize>,
}

pub(crate) fn reduce(x: &Matrix, mode: ReduceMode) -> Result<(Vec<f64>, ReduceCache)> {
    let (n, d) = x.shape();
    if n == 0 {
        return Err(Error::Empty("frame set"));
    }
    match mode {
        ReduceMode::Max => {
            let mut out = x.row(0).to_vec();
            let mut argmax = vec![0; d];
            for i in 1..n {
                for (j, &v) in x.row(i).iter().enumerate() {
                    // strict comparison keeps the earliest frame on ties
                    if v > out[j] {
                        out[j] = v;
                        argmax[j] = i;
                    }
                }
            }
            Ok((
                out,
                ReduceCache {
                    mode,
                    frames: n,
                    argmax,
                },
            ))
        }
        ReduceMode::Avg => {
            let mut out = vec![0.0; d];
            for row in x.row_iter() {
                add_into(&mut out, row);
            }
            let inv = 1.0 / n as f64;
            out.iter_mut().for_each(|v| *v *= inv);
            Ok((
                out,
                ReduceCache {
                    mode,
                    frames: n,
                    argmax: Vec::new(),
                },
            ))
        }
    }
}

pub(crate) fn reduce_backward(cache: &ReduceCache, grad: &[f64]) -> Matrix {
    let d = grad.len();
    let mut dx = Matrix::zeros(cache.frames, d);
    match cache.mode {
        ReduceMode::Max => {
            for (j, &i) in cache.argmax.iter().enumerate() {
                dx.set(i, j, grad[j]);
            }
        }
        ReduceMode::Avg => {
            let inv = 1.0 / cache.frames as f64;
            for i in 0..cache.frames {
                for (dst, g) in dx.row_mut(i).iter_mut().zip(grad) {
                    *dst = g * inv;
                }
            }
        }
    }
    dx
}
