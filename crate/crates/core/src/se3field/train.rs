//! Joint fitting of Gaussians, motion field and frame-1 pose, and the
//! test-time pose/ratio alignment.

use nalgebra::{Vector3, Vector4};
use serde::{Deserialize, Serialize};

use super::{field_regularization, MotionField};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Rotation6D, SE3Transform};
use crate::optim::{Adam, AdamConfig};
use crate::splat::{
    image_loss, rasterize, rasterize_backward, sigmoid, GaussianSet, Motion, MotionGrads, RenderConfig,
    RenderGrads,
};
use crate::tensorio::RgbImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussianLr {
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for GaussianLr {
    fn default() -> Self {
        Self {
            position: 5e-4,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 0.05,
            color: 2.5e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iters: usize,
    pub lr: GaussianLr,
    pub lr_field: f64,
    pub lr_camera: f64,
    pub lambda_t: f64,
    pub lambda_r: f64,
    pub huber_delta: f64,
    /// Multiplier on the whole regularizer.
    pub reg_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 1000,
            lr: GaussianLr::default(),
            lr_field: 1e-4,
            lr_camera: 1e-4,
            lambda_t: 1.0,
            lambda_r: 1.0,
            huber_delta: 0.01,
            reg_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let l = &self.lr;
        let rates = [l.position, l.rotation, l.scale, l.opacity, l.color, self.lr_field, self.lr_camera];
        if rates.iter().any(|r| !(*r > 0.0))
            || !(self.lambda_t >= 0.0)
            || !(self.lambda_r >= 0.0)
            || !(self.reg_weight >= 0.0)
            || !(self.huber_delta > 0.0)
        {
            return Err(Error::InvalidParameter(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLoss {
    pub photo0: f64,
    pub photo1: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub gaussians: GaussianSet,
    pub field: MotionField,
    pub t_cam: SE3Transform,
    /// Losses before each step.
    pub history: Vec<TrainLoss>,
    /// Losses of the returned model.
    pub final_loss: TrainLoss,
    /// Largest compositing-weight normalization error seen in any render.
    pub max_weight_error: f64,
}

fn photometric(
    g: &GaussianSet,
    motion: &Motion,
    cam: &SE3Transform,
    target: &RgbImage,
    k: &CameraIntrinsics,
    rc: &RenderConfig,
) -> Result<(f64, RenderGrads, f64)> {
    let out = rasterize(g, motion, cam, k, rc)?;
    let (loss, grad) = image_loss(&out.image, target, rc.dssim_weight)?;
    let grads = rasterize_backward(g, motion, cam, k, rc, &out, &grad)?;
    Ok((loss, grads, out.max_weight_error))
}

fn flat3(v: &[Vector3<f64>]) -> Vec<f64> {
    v.iter().flat_map(|x| [x.x, x.y, x.z]).collect()
}

fn unflat3(src: &[f64], dst: &mut [Vector3<f64>]) {
    for (i, d) in dst.iter_mut().enumerate() {
        *d = Vector3::new(src[3 * i], src[3 * i + 1], src[3 * i + 2]);
    }
}

fn flat4(v: &[Vector4<f64>]) -> Vec<f64> {
    v.iter().flat_map(|x| [x[0], x[1], x[2], x[3]]).collect()
}

fn check_finite(iteration: usize, terms: &[(&str, f64)]) -> Result<()> {
    match terms.iter().find(|(_, v)| !v.is_finite()) {
        Some((name, _)) => Err(Error::NonFiniteLoss {
            iteration,
            term: name.to_string(),
        }),
        None => Ok(()),
    }
}

struct Step {
    loss: TrainLoss,
    g0: RenderGrads,
    g1: RenderGrads,
    reg_rot6: Vec<[f64; 6]>,
    reg_trans: Vec<Vector3<f64>>,
    weight_err: f64,
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    g: &GaussianSet,
    field: &MotionField,
    cam: &SE3Transform,
    i0: &RgbImage,
    i1: &RgbImage,
    k: &CameraIntrinsics,
    cfg: &TrainConfig,
    rc: &RenderConfig,
) -> Result<Step> {
    let (l0, g0, e0) = photometric(g, &Motion::None, &SE3Transform::identity(), i0, k, rc)?;
    let (l1, g1, e1) = photometric(g, &Motion::Full(field), cam, i1, k, rc)?;
    let reg = field_regularization(field, cfg.lambda_t, cfg.lambda_r, cfg.huber_delta)?;
    let reg_value = cfg.reg_weight * reg.value;
    Ok(Step {
        loss: TrainLoss {
            photo0: l0,
            photo1: l1,
            reg: reg_value,
            total: l0 + l1 + reg_value,
        },
        g0,
        g1,
        reg_rot6: reg.rot6,
        reg_trans: reg.trans,
        weight_err: e0.max(e1),
    })
}

/// Adam on both photometric losses plus the rigidity regularizer. Frame 0
/// is rendered at the identity pose without motion, frame 1 through the
/// full field from the optimized `t_cam`. Static field entries stay at the
/// identity.
#[allow(clippy::too_many_arguments)]
pub fn train(
    gaussians: &GaussianSet,
    field: &MotionField,
    t_cam: &SE3Transform,
    i0: &RgbImage,
    i1: &RgbImage,
    k: &CameraIntrinsics,
    cfg: &TrainConfig,
    rc: &RenderConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    gaussians.validate()?;
    let mut g = gaussians.clone();
    let mut f = field.clone();
    let n = g.len();
    let mut cam = t_cam.to_params();
    let lr = &cfg.lr;
    let mut opt_pos = Adam::new(AdamConfig::with_lr(lr.position), 3 * n);
    let mut opt_rot = Adam::new(AdamConfig::with_lr(lr.rotation), 4 * n);
    let mut opt_scale = Adam::new(AdamConfig::with_lr(lr.scale), 3 * n);
    let mut opt_op = Adam::new(AdamConfig::with_lr(lr.opacity), n);
    let mut opt_col = Adam::new(AdamConfig::with_lr(lr.color), 3 * n);
    let mut opt_frot = Adam::new(AdamConfig::with_lr(cfg.lr_field), 6 * n);
    let mut opt_ftr = Adam::new(AdamConfig::with_lr(cfg.lr_field), 3 * n);
    let mut opt_cam = Adam::new(AdamConfig::with_lr(cfg.lr_camera), 9);

    let mut history = Vec::with_capacity(cfg.iters);
    let mut max_weight_error: f64 = 0.0;
    for iter in 0..cfg.iters {
        let pose = SE3Transform::from_params(&cam)?;
        let s = evaluate(&g, &f, &pose, i0, i1, k, cfg, rc)?;
        check_finite(iter, &[("photo0", s.loss.photo0), ("photo1", s.loss.photo1), ("reg", s.loss.reg)])?;
        history.push(s.loss);
        max_weight_error = max_weight_error.max(s.weight_err);

        let (a, b) = (&s.g0.gaussians, &s.g1.gaussians);
        let sum3 = |x: &[Vector3<f64>], y: &[Vector3<f64>]| {
            x.iter().zip(y).flat_map(|(p, q)| { let v = p + q; [v.x, v.y, v.z] }).collect::<Vec<_>>()
        };
        let mut p = flat3(&g.positions);
        opt_pos.step(&mut p, &sum3(&a.positions, &b.positions));
        unflat3(&p, &mut g.positions);
        let mut p = flat4(&g.rotations);
        let gr: Vec<f64> = a.rotations.iter().zip(&b.rotations).flat_map(|(p, q)| { let v = p + q; [v[0], v[1], v[2], v[3]] }).collect();
        opt_rot.step(&mut p, &gr);
        for (i, q) in g.rotations.iter_mut().enumerate() {
            *q = Vector4::new(p[4 * i], p[4 * i + 1], p[4 * i + 2], p[4 * i + 3]);
        }
        g.normalize_rotations();
        let mut p = flat3(&g.log_scales);
        opt_scale.step(&mut p, &sum3(&a.log_scales, &b.log_scales));
        unflat3(&p, &mut g.log_scales);
        let go: Vec<f64> = a.logit_opacity.iter().zip(&b.logit_opacity).map(|(p, q)| p + q).collect();
        opt_op.step(&mut g.logit_opacity, &go);
        let mut p = flat3(&g.colors);
        opt_col.step(&mut p, &sum3(&a.colors, &b.colors));
        unflat3(&p, &mut g.colors);
        for c in &mut g.colors {
            c.apply(|v| *v = v.clamp(0.0, 1.0));
        }

        let MotionGrads::Field { rot6, trans } = &s.g1.motion else {
            unreachable!("full motion yields field gradients")
        };
        let mut frot: Vec<f64> = f.rot6.iter().flat_map(|r| r.to_array()).collect();
        let mut gfrot = vec![0.0; 6 * n];
        let mut gftr = vec![0.0; 3 * n];
        for i in 0..n {
            if f.region_id[i] == 0 {
                continue;
            }
            for c in 0..6 {
                gfrot[6 * i + c] = rot6[i][c] + cfg.reg_weight * s.reg_rot6[i][c];
            }
            for c in 0..3 {
                gftr[3 * i + c] = trans[i][c] + cfg.reg_weight * s.reg_trans[i][c];
            }
        }
        opt_frot.step(&mut frot, &gfrot);
        for (i, r) in f.rot6.iter_mut().enumerate() {
            *r = Rotation6D::from_array(std::array::from_fn(|c| frot[6 * i + c]));
        }
        let mut ftr = flat3(&f.trans);
        opt_ftr.step(&mut ftr, &gftr);
        unflat3(&ftr, &mut f.trans);

        opt_cam.step(&mut cam, &s.g1.camera);
    }
    let t_cam = SE3Transform::from_params(&cam)?;
    let last = evaluate(&g, &f, &t_cam, i0, i1, k, cfg, rc)?;
    check_finite(cfg.iters, &[("photo0", last.loss.photo0), ("photo1", last.loss.photo1), ("reg", last.loss.reg)])?;
    max_weight_error = max_weight_error.max(last.weight_err);
    Ok(TrainResult {
        gaussians: g,
        field: f,
        t_cam,
        history,
        final_loss: last.loss,
        max_weight_error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub iters: usize,
    pub lr_pose: f64,
    /// Rate on the ratio logits.
    pub lr_ratio: f64,
    pub optimize_ratios: bool,
    pub optimize_pose: bool,
    pub init_ratio: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            iters: 300,
            lr_pose: 1e-3,
            lr_ratio: 0.05,
            optimize_ratios: true,
            optimize_pose: true,
            init_ratio: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignResult {
    pub t_cam_test: crate::tensorio::PoseEntry,
    /// One ratio per dynamic region, in region-id order.
    pub ratios: Vec<f64>,
    pub final_loss: f64,
    pub history: Vec<f64>,
}

/// Number of region ids used by a Gaussian set, static included.
pub(crate) fn region_count(g: &GaussianSet) -> usize {
    g.region_id.iter().max().map(|&m| m as usize + 1).unwrap_or(1)
}

/// Fits the test camera and per-region ratios against `i_test` with the
/// model frozen. Ratios live behind a sigmoid.
pub fn test_time_align(
    gaussians: &GaussianSet,
    field: &MotionField,
    i_test: &RgbImage,
    k: &CameraIntrinsics,
    init_pose: &SE3Transform,
    cfg: &AlignConfig,
    rc: &RenderConfig,
) -> Result<AlignResult> {
    if !(cfg.init_ratio > 0.0 && cfg.init_ratio < 1.0) {
        return Err(Error::InvalidParameter("initial ratio must be inside (0, 1)".into()));
    }
    let regions = region_count(gaussians);
    let mut logits = vec![crate::splat::logit(cfg.init_ratio); regions];
    let mut cam = init_pose.to_params();
    let mut opt_pose = Adam::new(AdamConfig::with_lr(cfg.lr_pose), 9);
    let mut opt_ratio = Adam::new(AdamConfig::with_lr(cfg.lr_ratio), regions);
    let ratios_of = |l: &[f64]| -> Vec<f64> {
        l.iter().enumerate().map(|(i, &v)| if i == 0 { 0.0 } else { sigmoid(v) }).collect()
    };
    let mut history = Vec::with_capacity(cfg.iters);
    let eval = |cam: &[f64; 9], ratios: &[f64]| -> Result<(f64, RenderGrads)> {
        let pose = SE3Transform::from_params(cam)?;
        let motion = Motion::Ratios { field, ratios };
        let out = rasterize(gaussians, &motion, &pose, k, rc)?;
        let (loss, grad) = image_loss(&out.image, i_test, rc.dssim_weight)?;
        let grads = rasterize_backward(gaussians, &motion, &pose, k, rc, &out, &grad)?;
        Ok((loss, grads))
    };
    for iter in 0..cfg.iters {
        let ratios = ratios_of(&logits);
        let (loss, grads) = eval(&cam, &ratios)?;
        check_finite(iter, &[("photo", loss)])?;
        history.push(loss);
        if cfg.optimize_pose {
            opt_pose.step(&mut cam, &grads.camera);
        }
        if cfg.optimize_ratios {
            let MotionGrads::Ratios(gr) = grads.motion else {
                unreachable!("ratio motion yields ratio gradients")
            };
            let gl: Vec<f64> = gr
                .iter()
                .zip(&ratios)
                .enumerate()
                .map(|(i, (g, r))| if i == 0 { 0.0 } else { g * r * (1.0 - r) })
                .collect();
            opt_ratio.step(&mut logits, &gl);
        }
    }
    let ratios = ratios_of(&logits);
    let (final_loss, _) = eval(&cam, &ratios)?;
    check_finite(cfg.iters, &[("photo", final_loss)])?;
    let pose = SE3Transform::from_params(&cam)?;
    Ok(AlignResult {
        t_cam_test: (&pose).into(),
        ratios: ratios[1..].to_vec(),
        final_loss,
        history,
    })
}
