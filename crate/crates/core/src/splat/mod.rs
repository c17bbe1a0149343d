//! CPU Gaussian splatting: initialization from pixels, covariance
//! projection, depth-sorted compositing with an analytic backward pass, and
//! image losses.

mod loss;
mod raster;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_jacobian, unproject, CameraIntrinsics, Pixel, SE3Transform};
use crate::tensorio::{LabelMap, RgbImage, ScalarMap};

pub use loss::{image_loss, metrics, psnr, ssim, Metrics};
pub use raster::{
    rasterize, rasterize_backward, GaussianGrads, Motion, MotionGrads, RenderGrads, RenderOutput,
};

pub const TILE: usize = 16;
/// Screen-space dilation added to every projected covariance, pixels².
pub const COV2D_DILATION: f64 = 0.3;
pub const INIT_OPACITY: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub near_clip: f64,
    pub alpha_threshold: f64,
    /// Support radius in standard deviations.
    pub gaussian_extent: f64,
    pub background: [f64; 3],
    pub dssim_weight: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            near_clip: 0.01,
            alpha_threshold: 1.0 / 255.0,
            gaussian_extent: 3.0,
            background: [0.0; 3],
            dssim_weight: 0.2,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.near_clip > 0.0)
            || !(self.gaussian_extent > 0.0)
            || !(0.0..=1.0).contains(&self.dssim_weight)
            || !(self.alpha_threshold >= 0.0)
        {
            return Err(Error::InvalidParameter(format!("invalid render config {self:?}")));
        }
        Ok(())
    }
}

/// Structure-of-arrays Gaussian scene. Quaternions are `(w, x, y, z)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianSet {
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<Vector4<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub logit_opacity: Vec<f64>,
    pub colors: Vec<Vector3<f64>>,
    pub region_id: Vec<u32>,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation of a (not necessarily unit) quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let n = q / q.norm();
    let (w, x, y, z) = (n[0], n[1], n[2], n[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a rotation-matrix gradient back onto the raw quaternion, including
/// the normalization.
pub fn quat_backward(q: &Vector4<f64>, g: &Matrix3<f64>) -> Vector4<f64> {
    let norm = q.norm();
    let n = q / norm;
    let (w, x, y, z) = (n[0], n[1], n[2], n[3]);
    let gn = 2.0
        * Vector4::new(
            -z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
                + x * g[(2, 1)],
            y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
                + z * g[(2, 0)]
                + w * g[(2, 1)]
                - 2.0 * x * g[(2, 2)],
            -2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
                - w * g[(2, 0)]
                + z * g[(2, 1)]
                - 2.0 * y * g[(2, 2)],
            -2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
                - 2.0 * z * g[(1, 1)]
                + y * g[(1, 2)]
                + x * g[(2, 0)]
                + y * g[(2, 1)],
        );
    (gn - n * n.dot(&gn)) / norm
}

/// Quaternion `(w, x, y, z)` of a rotation matrix.
pub fn matrix_to_quat(r: &Matrix3<f64>) -> Vector4<f64> {
    let q = nalgebra::UnitQuaternion::from_matrix(r);
    Vector4::new(q.w, q.i, q.j, q.k)
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.rotations.len() != n
            || self.log_scales.len() != n
            || self.logit_opacity.len() != n
            || self.colors.len() != n
            || self.region_id.len() != n
        {
            return Err(Error::InvalidParameter("GaussianSet arrays differ in length".into()));
        }
        Ok(())
    }

    pub fn push(
        &mut self,
        position: Vector3<f64>,
        rotation: Vector4<f64>,
        log_scale: Vector3<f64>,
        opacity: f64,
        color: Vector3<f64>,
        region: u32,
    ) {
        self.positions.push(position);
        self.rotations.push(rotation);
        self.log_scales.push(log_scale);
        self.logit_opacity.push(logit(opacity));
        self.colors.push(color);
        self.region_id.push(region);
    }

    pub fn extend(&mut self, other: &GaussianSet) {
        self.positions.extend_from_slice(&other.positions);
        self.rotations.extend_from_slice(&other.rotations);
        self.log_scales.extend_from_slice(&other.log_scales);
        self.logit_opacity.extend_from_slice(&other.logit_opacity);
        self.colors.extend_from_slice(&other.colors);
        self.region_id.extend_from_slice(&other.region_id);
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.logit_opacity[i])
    }

    /// `R S S^T R^T` in the Gaussian's own frame.
    pub fn covariance(&self, i: usize) -> Matrix3<f64> {
        let r = quat_to_matrix(&self.rotations[i]);
        let s = self.log_scales[i].map(|v| (2.0 * v).exp());
        r * Matrix3::from_diagonal(&s) * r.transpose()
    }

    /// Renormalizes every quaternion.
    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            let n = q.norm();
            if n > 0.0 {
                *q /= n;
            } else {
                *q = Vector4::new(1.0, 0.0, 0.0, 0.0);
            }
        }
    }
}

/// One Gaussian per valid pixel on a `stride` grid, placed in the world
/// frame through `cam_pose` (world to camera).
pub fn init_gaussians(
    image: &RgbImage,
    depth: &ScalarMap,
    labels: &LabelMap,
    k: &CameraIntrinsics,
    cam_pose: &SE3Transform,
    stride: usize,
) -> Result<GaussianSet> {
    let (w, h) = k.dims();
    for (entry, dims) in [("image", image.dims()), ("depth", depth.dims()), ("labels", labels.dims())] {
        if dims != (w, h) {
            return Err(Error::DimensionMismatch {
                entry: entry.into(),
                expected: (w, h),
                found: dims,
            });
        }
    }
    let stride = stride.max(1);
    let to_world = cam_pose.inverse();
    let pix = 1.0 / k.fx.min(k.fy);
    let mut set = GaussianSet::default();
    for y in (0..h).step_by(stride) {
        for x in (0..w).step_by(stride) {
            let d = depth.get(x, y);
            if !(d > 0.0) || !d.is_finite() {
                continue;
            }
            let p = unproject(k, &Pixel::new(x as f64, y as f64), d)?;
            let scale = (d * pix * stride as f64).ln();
            set.push(
                to_world.apply(&p),
                Vector4::new(1.0, 0.0, 0.0, 0.0),
                Vector3::repeat(scale),
                INIT_OPACITY,
                Vector3::from(image.get(x, y)),
                labels.get(x, y),
            );
        }
    }
    if set.is_empty() {
        return Err(Error::NoValidPixels);
    }
    Ok(set)
}

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub mean2d: Pixel,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
}

/// Projects a world-frame mean and covariance through a world-to-camera
/// pose. Returns the camera-space mean and projection Jacobian too.
pub(crate) fn project_cov(
    mean: &Vector3<f64>,
    cov: &Matrix3<f64>,
    view: &SE3Transform,
    k: &CameraIntrinsics,
    near_clip: f64,
) -> Result<(Projection, Vector3<f64>, Matrix2x3<f64>, Matrix3<f64>)> {
    let t = view.apply(mean);
    if !(t.z > near_clip) {
        return Err(Error::Clipped { depth: t.z });
    }
    let wr = view.rotation();
    let cov_c = wr * cov * wr.transpose();
    let j = project_jacobian(k, &t);
    let cov2d = j * cov_c * j.transpose() + Matrix2::identity() * COV2D_DILATION;
    let mean2d = Pixel::new(k.fx * t.x / t.z + k.cx, k.fy * t.y / t.z + k.cy);
    Ok((
        Projection {
            mean2d,
            cov2d,
            depth: t.z,
        },
        t,
        j,
        cov_c,
    ))
}

/// Projection of Gaussian `i` with no motion applied.
pub fn project_gaussian(
    g: &GaussianSet,
    i: usize,
    k: &CameraIntrinsics,
    view: &SE3Transform,
    near_clip: f64,
) -> Result<Projection> {
    project_cov(&g.positions[i], &g.covariance(i), view, k, near_clip).map(|r| r.0)
}
