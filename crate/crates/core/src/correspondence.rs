//! Correspondences and confidences from a forward/backward flow pair.

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pixel;
use crate::tensorio::{FlowMap, ScalarMap};

/// Occlusion test `|f + b|^2 < alpha (|f|^2 + |b|^2) + beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencyParams {
    pub alpha: f64,
    /// Squared pixels.
    pub beta: f64,
}

impl Default for ConsistencyParams {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.5,
        }
    }
}

/// Bilinear flow lookup; NaN if any contributing neighbor is NaN.
pub fn sample_flow(f: &FlowMap, p: &Pixel) -> Result<Vector2<f64>> {
    f.sample(p).ok_or(Error::OutOfBounds { u: p.x, v: p.y })
}

/// `p0 + f(p0)`. The result may leave the image.
pub fn track(p0: &Pixel, f_fwd: &FlowMap) -> Result<Pixel> {
    Ok(p0 + sample_flow(f_fwd, p0)?)
}

/// Binary confidence for every pixel of `f_fwd`. Swap the arguments for the
/// backward weights.
pub fn forward_backward_weights(
    f_fwd: &FlowMap,
    f_bwd: &FlowMap,
    params: &ConsistencyParams,
) -> Result<ScalarMap> {
    if f_fwd.dims() != f_bwd.dims() {
        return Err(Error::DimensionMismatch {
            entry: "flow_bwd".into(),
            expected: f_fwd.dims(),
            found: f_bwd.dims(),
        });
    }
    let (w, h) = f_fwd.dims();
    let data = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let fwd = f_fwd.get(x, y);
            if !(fwd.x.is_finite() && fwd.y.is_finite()) {
                return 0.0;
            }
            let target = Pixel::new(x as f64, y as f64) + fwd;
            let Some(bwd) = f_bwd.sample(&target) else {
                return 0.0;
            };
            if !(bwd.x.is_finite() && bwd.y.is_finite()) {
                return 0.0;
            }
            let r = fwd + bwd;
            let bound = params.alpha * (fwd.norm_squared() + bwd.norm_squared()) + params.beta;
            if r.norm_squared() < bound {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    ScalarMap::new(w, h, data)
}

/// Weights that only reject NaN flow and tracks leaving the image, for when
/// no backward flow is available.
pub fn in_bounds_weights(f_fwd: &FlowMap) -> ScalarMap {
    let (w, h) = f_fwd.dims();
    let data = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let fwd = f_fwd.get(x, y);
            let t = Pixel::new(x as f64, y as f64) + fwd;
            let inside = t.x >= 0.0 && t.y >= 0.0 && t.x <= (w - 1) as f64 && t.y <= (h - 1) as f64;
            if inside {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    ScalarMap { width: w, height: h, data }
}
