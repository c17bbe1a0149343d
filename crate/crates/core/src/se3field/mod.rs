//! Per-Gaussian rigid motion field: initialization from region motions,
//! application at a ratio, the rigidity regularizer, joint training and
//! test-time alignment.

mod checkpoint;
mod train;

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3, Vector4};

use crate::dense_ba::BAResult;
use crate::error::{Error, Result};
use crate::geometry::{rot6d_backward, unproject, CameraIntrinsics, Pixel, Rotation6D, SE3Transform};
use crate::optim::huber;
use crate::splat::{init_gaussians, matrix_to_quat, GaussianSet};
use crate::tensorio::{LabelMap, RgbImage, ScalarMap};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{
    test_time_align, train, AlignConfig, AlignResult, GaussianLr, TrainConfig, TrainLoss, TrainResult,
};

/// One rigid motion per Gaussian, taking time 0 to time 1 in the world
/// frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MotionField {
    pub rot6: Vec<Rotation6D>,
    pub trans: Vec<Vector3<f64>>,
    pub region_id: Vec<u32>,
}

impl MotionField {
    pub fn len(&self) -> usize {
        self.rot6.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rot6.is_empty()
    }

    pub fn transform(&self, i: usize) -> Result<SE3Transform> {
        SE3Transform::new(self.rot6[i], self.trans[i])
    }

    /// Identity motion for every Gaussian.
    pub fn identity(gaussians: &GaussianSet) -> Self {
        Self {
            rot6: vec![Rotation6D::identity(); gaussians.len()],
            trans: vec![Vector3::zeros(); gaussians.len()],
            region_id: gaussians.region_id.clone(),
        }
    }
}

/// Every entry starts at its region's world motion; static entries at the
/// identity.
pub fn init_field(gaussians: &GaussianSet, ba: &BAResult) -> Result<MotionField> {
    let mut field = MotionField::identity(gaussians);
    for (i, &region) in gaussians.region_id.iter().enumerate() {
        if region == 0 {
            continue;
        }
        let t = ba.region_motion(region)?;
        field.rot6[i] = *t.rotation6d();
        field.trans[i] = *t.translation();
    }
    Ok(field)
}

fn quat_mul(a: &Vector4<f64>, b: &Vector4<f64>) -> Vector4<f64> {
    let (aw, av) = (a[0], Vector3::new(a[1], a[2], a[3]));
    let (bw, bv) = (b[0], Vector3::new(b[1], b[2], b[3]));
    let v = bv * aw + av * bw + av.cross(&bv);
    Vector4::new(aw * bw - av.dot(&bv), v.x, v.y, v.z)
}

/// Moves every Gaussian along its screw path to `ratio`, co-rotating the
/// shape.
pub fn apply_field(gaussians: &GaussianSet, field: &MotionField, ratio: f64) -> Result<GaussianSet> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidParameter(format!("ratio {ratio} outside [0, 1]")));
    }
    if field.len() != gaussians.len() {
        return Err(Error::DimensionMismatch {
            entry: "motion field".into(),
            expected: (gaussians.len(), 1),
            found: (field.len(), 1),
        });
    }
    let mut out = gaussians.clone();
    if ratio == 0.0 {
        return Ok(out);
    }
    for i in 0..gaussians.len() {
        let t = field.transform(i)?;
        let t = if ratio == 1.0 { t } else { t.interpolate(ratio)? };
        out.positions[i] = t.apply(&gaussians.positions[i]);
        out.rotations[i] = quat_mul(&matrix_to_quat(t.rotation()), &gaussians.rotations[i]);
    }
    Ok(out)
}

/// Value and gradient of the rigidity regularizer.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldReg {
    pub value: f64,
    pub rot6: Vec<[f64; 6]>,
    pub trans: Vec<Vector3<f64>>,
}

/// Huber penalty on each entry's deviation from its region's mean
/// translation and mean normalized 6D rotation. The static region is
/// excluded.
pub fn field_regularization(field: &MotionField, lambda_t: f64, lambda_r: f64, delta: f64) -> Result<FieldReg> {
    let n = field.len();
    let mut out = FieldReg {
        value: 0.0,
        rot6: vec![[0.0; 6]; n],
        trans: vec![Vector3::zeros(); n],
    };
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &r) in field.region_id.iter().enumerate() {
        if r != 0 {
            groups.entry(r).or_default().push(i);
        }
    }
    for idx in groups.values() {
        let m = idx.len() as f64;
        let normed: Vec<[f64; 6]> = idx
            .iter()
            .map(|&i| field.rot6[i].normalized().map(|r| r.to_array()))
            .collect::<Result<_>>()?;
        let mut mean_t = Vector3::zeros();
        let mut mean_r = [0.0; 6];
        for (k, &i) in idx.iter().enumerate() {
            mean_t += field.trans[i];
            for c in 0..6 {
                mean_r[c] += normed[k][c];
            }
        }
        mean_t /= m;
        mean_r.iter_mut().for_each(|v| *v /= m);

        // d/dx_j sum_k h(x_k - mean) = h'(x_j - mean) - mean_k h'(x_k - mean)
        let mut gt: Vec<Vector3<f64>> = Vec::with_capacity(idx.len());
        let mut gr: Vec<[f64; 6]> = Vec::with_capacity(idx.len());
        let mut sum_gt = Vector3::zeros();
        let mut sum_gr = [0.0; 6];
        for (k, &i) in idx.iter().enumerate() {
            let mut g = Vector3::zeros();
            for c in 0..3 {
                let (v, d) = huber(field.trans[i][c] - mean_t[c], delta);
                out.value += lambda_t * v;
                g[c] = lambda_t * d;
            }
            sum_gt += g;
            gt.push(g);
            let mut g6 = [0.0; 6];
            for c in 0..6 {
                let (v, d) = huber(normed[k][c] - mean_r[c], delta);
                out.value += lambda_r * v;
                g6[c] = lambda_r * d;
                sum_gr[c] += g6[c];
            }
            gr.push(g6);
        }
        for (k, &i) in idx.iter().enumerate() {
            out.trans[i] = gt[k] - sum_gt / m;
            let mut gmat = Matrix3::zeros();
            for c in 0..3 {
                gmat[(c, 0)] = gr[k][c] - sum_gr[c] / m;
                gmat[(c, 1)] = gr[k][3 + c] - sum_gr[3 + c] / m;
            }
            out.rot6[i] = rot6d_backward(&field.rot6[i], &gmat)?;
        }
    }
    Ok(out)
}

/// Frame-0 Gaussians for every valid pixel, plus frame-1 Gaussians for
/// pixels that frame 0 does not see (zero backward confidence), moved back
/// to time 0 through the camera and their region's motion. Without
/// `labels1` the extra Gaussians are assigned to the static region.
#[allow(clippy::too_many_arguments)]
pub fn init_two_frame_gaussians(
    i0: &RgbImage,
    i1: &RgbImage,
    labels0: &LabelMap,
    labels1: Option<&LabelMap>,
    w_bwd: Option<&ScalarMap>,
    ba: &BAResult,
    k: &CameraIntrinsics,
    stride: usize,
) -> Result<GaussianSet> {
    let mut set = init_gaussians(i0, &ba.depth0, labels0, k, &SE3Transform::identity(), stride)?;
    let Some(w_bwd) = w_bwd else {
        return Ok(set);
    };
    let (w, h) = k.dims();
    let stride = stride.max(1);
    let to_world = ba.t_cam.inverse();
    let pix = 1.0 / k.fx.min(k.fy);
    for y in (0..h).step_by(stride) {
        for x in (0..w).step_by(stride) {
            let d = ba.depth1.get(x, y);
            if w_bwd.get(x, y) > 0.0 || !(d > 0.0) || !d.is_finite() {
                continue;
            }
            let region = labels1.map(|l| l.get(x, y)).unwrap_or(0);
            let motion = ba.region_motion(region)?;
            let p = to_world.apply(&unproject(k, &Pixel::new(x as f64, y as f64), d)?);
            let canonical = motion.inverse().apply(&p);
            set.push(
                canonical,
                Vector4::new(1.0, 0.0, 0.0, 0.0),
                Vector3::repeat((d * pix * stride as f64).ln()),
                crate::splat::INIT_OPACITY,
                Vector3::from(i1.get(x, y)),
                region,
            );
        }
    }
    Ok(set)
}
