//! Object-level dense bundle adjustment over a frame pair.
//!
//! Each region `i` owns a relative motion `T^(i)` mapping frame-0 camera
//! coordinates to frame-1 camera coordinates. Depth is optimized as a
//! per-pixel log-depth; monocular depths enter through a global scale/shift
//! per frame.

use std::path::PathBuf;

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correspondence::{forward_backward_weights, in_bounds_weights, ConsistencyParams};
use crate::error::{Error, Result};
use crate::geometry::{
    project_jacobian, rot6d_backward, rot6d_to_matrix, CameraIntrinsics, Pixel, Rotation6D,
    SE3Transform, MIN_DEPTH,
};
use crate::init_pnp::{build_region_correspondences, ransac_pnp, RansacParams};
use crate::optim::{smooth_l1, Adam, AdamConfig};
use crate::tensorio::{FlowMap, LabelMap, PoseEntry, ScalarMap, Scene};

/// Pixels per reduction chunk. Fixed so sums do not depend on thread count.
const CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BAParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr_depth: f64,
    pub lr_pose: f64,
    pub iters: usize,
    pub bidirectional: bool,
    /// Huber radius of the reprojection terms, pixels.
    pub reproj_delta: f64,
    /// Huber radius of the depth terms, scene units.
    pub depth_delta: f64,
}

impl Default for BAParams {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
            lr_depth: 1e-3,
            lr_pose: 1e-4,
            iters: 2000,
            bidirectional: true,
            reproj_delta: 0.1,
            depth_delta: 0.01,
        }
    }
}

impl BAParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda1 >= 0.0
            && self.lambda2 >= 0.0
            && self.lr_depth > 0.0
            && self.lr_pose > 0.0
            && self.iters >= 1
            && self.reproj_delta > 0.0
            && self.depth_delta > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid BA parameters {self:?}")))
        }
    }
}

/// Everything the adjustment reads from a scene.
#[derive(Debug, Clone)]
pub struct BAInputs {
    pub k: CameraIntrinsics,
    pub labels0: LabelMap,
    pub labels1: Option<LabelMap>,
    pub d0: ScalarMap,
    pub d1: ScalarMap,
    pub flow_fwd: FlowMap,
    pub flow_bwd: Option<FlowMap>,
    pub w_fwd: ScalarMap,
    pub w_bwd: Option<ScalarMap>,
}

impl BAInputs {
    /// Confidences come from the forward/backward check when backward flow
    /// exists, and from an in-bounds test otherwise.
    pub fn from_scene(scene: &Scene, consistency: &ConsistencyParams) -> Result<Self> {
        let (w_fwd, w_bwd) = match &scene.flow_bwd {
            Some(bwd) => (
                forward_backward_weights(&scene.flow_fwd, bwd, consistency)?,
                Some(forward_backward_weights(bwd, &scene.flow_fwd, consistency)?),
            ),
            None => (in_bounds_weights(&scene.flow_fwd), None),
        };
        Ok(Self {
            k: scene.intrinsics,
            labels0: scene.labels.clone(),
            labels1: scene.labels1.clone(),
            d0: scene.d0.clone(),
            d1: scene.d1.clone(),
            flow_fwd: scene.flow_fwd.clone(),
            flow_bwd: scene.flow_bwd.clone(),
            w_fwd,
            w_bwd,
        })
    }

    pub fn num_regions(&self) -> usize {
        self.labels0.max_label() as usize + 1
    }
}

/// Per-region PnP outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionInit {
    pub region: u32,
    pub pixels: usize,
    pub correspondences: usize,
    pub inliers: usize,
    /// Set when PnP failed and a fallback pose was used.
    pub fallback: Option<String>,
}

/// Robust PnP for every region. A failed static region falls back to the
/// identity; a failed dynamic region inherits the static estimate.
pub fn initialize_poses(
    inputs: &BAInputs,
    ransac: &RansacParams,
) -> Result<(Vec<SE3Transform>, Vec<RegionInit>)> {
    let n = inputs.num_regions();
    let mut poses = Vec::with_capacity(n);
    let mut stats = Vec::with_capacity(n);
    for region in 0..n as u32 {
        let pixels = inputs.labels0.count(region);
        let params = RansacParams {
            seed: ransac.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(region as u64),
            ..*ransac
        };
        let corrs = build_region_correspondences(
            region,
            &inputs.labels0,
            &inputs.d0,
            &inputs.flow_fwd,
            &inputs.w_fwd,
            &inputs.k,
        );
        let n_corr = corrs.as_ref().map(|c| c.len()).unwrap_or(0);
        let solved = corrs.and_then(|c| ransac_pnp(&c, &inputs.k, &params));
        let (pose, inliers, fallback) = match solved {
            Ok((t, mask)) => (t, mask.iter().filter(|&&m| m).count(), None),
            Err(e) => {
                let fb = if region == 0 {
                    SE3Transform::identity()
                } else {
                    poses[0]
                };
                (fb, 0, Some(e.to_string()))
            }
        };
        poses.push(pose);
        stats.push(RegionInit {
            region,
            pixels,
            correspondences: n_corr,
            inliers,
            fallback,
        });
    }
    Ok((poses, stats))
}

/// Per-term losses. `total` applies the `lambda` weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BALosses {
    pub reproj: f64,
    pub depth_a: f64,
    pub depth_b: f64,
    pub reproj_bwd: f64,
    pub depth_a1: f64,
    pub depth_b1: f64,
    pub total: f64,
}

impl BALosses {
    fn finish(&mut self, p: &BAParams) {
        self.total = p.lambda1 * (self.reproj + self.reproj_bwd)
            + p.lambda2 * (self.depth_a + self.depth_b + self.depth_a1 + self.depth_b1);
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("reproj", self.reproj),
            ("depth_a", self.depth_a),
            ("depth_b", self.depth_b),
            ("reproj_bwd", self.reproj_bwd),
            ("depth_a1", self.depth_a1),
            ("depth_b1", self.depth_b1),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Optimization variables.
#[derive(Debug, Clone, PartialEq)]
pub struct BAState {
    /// `[a1; a2; t]` per region.
    pub poses: Vec<[f64; 9]>,
    /// `ln D0_hat`, NaN where the input depth is invalid.
    pub log_depth0: Vec<f64>,
    /// `ln D1_hat`; only present for bidirectional runs.
    pub log_depth1: Option<Vec<f64>>,
    /// `(theta0, gamma0, theta1, gamma1)`.
    pub scale_shift: [f64; 4],
}

impl BAState {
    /// `D_hat = D`, `theta = 1`, `gamma = 0`.
    pub fn initial(inputs: &BAInputs, transforms: &[SE3Transform], bidirectional: bool) -> Self {
        let ln = |d: &ScalarMap| d.data.iter().map(|&v| if v > 0.0 { v.ln() } else { f64::NAN }).collect();
        Self {
            poses: transforms.iter().map(SE3Transform::to_params).collect(),
            log_depth0: ln(&inputs.d0),
            log_depth1: bidirectional.then(|| ln(&inputs.d1)),
            scale_shift: [1.0, 0.0, 1.0, 0.0],
        }
    }

    pub fn transforms(&self) -> Result<Vec<SE3Transform>> {
        self.poses.iter().map(|p| SE3Transform::from_params(p)).collect()
    }
}

/// Gradient with the same layout as [`BAState`].
#[derive(Debug, Clone, PartialEq)]
pub struct BAGrad {
    pub poses: Vec<[f64; 9]>,
    pub log_depth0: Vec<f64>,
    pub log_depth1: Option<Vec<f64>>,
    pub scale_shift: [f64; 4],
}

impl BAGrad {
    fn zeros_like(s: &BAState) -> Self {
        Self {
            poses: vec![[0.0; 9]; s.poses.len()],
            log_depth0: vec![0.0; s.log_depth0.len()],
            log_depth1: s.log_depth1.as_ref().map(|v| vec![0.0; v.len()]),
            scale_shift: [0.0; 4],
        }
    }
}

/// One term's value and gradient.
#[derive(Debug, Clone)]
pub struct TermEval {
    /// True L1 value.
    pub l1: f64,
    /// Smoothed value that the gradient belongs to.
    pub smooth: f64,
    pub grad: BAGrad,
}

#[derive(Debug, Clone)]
pub struct BAEval {
    pub l1: BALosses,
    pub smooth: BALosses,
    pub grad: BAGrad,
}

#[derive(Debug, Clone, Copy)]
struct FwdPx {
    idx: usize,
    bearing: Vector3<f64>,
    target: Pixel,
    weight: f64,
    depth: f64,
    /// Other-frame input depth sampled at `target`; NaN when unavailable.
    depth_target: f64,
    bearing_target: Vector3<f64>,
}

/// Partial sums over a chunk of pixels.
struct Acc {
    l1: f64,
    smooth: f64,
    g_rot: Matrix3<f64>,
    g_t: Vector3<f64>,
    g_ss: [f64; 4],
    depth: Vec<(usize, f64)>,
}

impl Acc {
    fn new() -> Self {
        Self {
            l1: 0.0,
            smooth: 0.0,
            g_rot: Matrix3::zeros(),
            g_t: Vector3::zeros(),
            g_ss: [0.0; 4],
            depth: Vec::new(),
        }
    }

    fn merge(&mut self, o: Acc) {
        self.l1 += o.l1;
        self.smooth += o.smooth;
        self.g_rot += o.g_rot;
        self.g_t += o.g_t;
        for i in 0..4 {
            self.g_ss[i] += o.g_ss[i];
        }
        self.depth.extend(o.depth);
    }
}

fn reduce(items: &[FwdPx], f: impl Fn(&FwdPx, &mut Acc) + Sync) -> Acc {
    let parts: Vec<Acc> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = Acc::new();
            for px in chunk {
                f(px, &mut acc);
            }
            acc
        })
        .collect();
    let mut out = Acc::new();
    for p in parts {
        out.merge(p);
    }
    out
}

#[derive(Clone, Copy)]
enum DepthMap {
    Frame0,
    Frame1,
}

/// Precomputed pixel sets of one adjustment problem.
#[derive(Debug, Clone)]
pub struct BAProblem {
    k: CameraIntrinsics,
    regions: Vec<Vec<FwdPx>>,
    /// Frame-1 static pixels with valid depth, paired with frame 0 through
    /// the backward flow. Empty unless bidirectional.
    static1: Vec<FwdPx>,
    static1_mask: Vec<bool>,
    bidirectional: bool,
    width: usize,
    height: usize,
}

impl BAProblem {
    pub fn new(inputs: &BAInputs, bidirectional: bool) -> Result<Self> {
        let k = inputs.k;
        let (w, h) = k.dims();
        for (entry, dims) in [
            ("labels", inputs.labels0.dims()),
            ("d0", inputs.d0.dims()),
            ("d1", inputs.d1.dims()),
            ("flow_fwd", inputs.flow_fwd.dims()),
            ("w_fwd", inputs.w_fwd.dims()),
        ] {
            if dims != (w, h) {
                return Err(Error::DimensionMismatch {
                    entry: entry.into(),
                    expected: (w, h),
                    found: dims,
                });
            }
        }
        let n = inputs.num_regions();
        let mut regions = vec![Vec::new(); n];
        for y in 0..h {
            for x in 0..w {
                let depth = inputs.d0.get(x, y);
                if !(depth > 0.0) {
                    continue;
                }
                let p0 = Pixel::new(x as f64, y as f64);
                let target = p0 + inputs.flow_fwd.get(x, y);
                let mut weight = inputs.w_fwd.get(x, y);
                if !(target.x.is_finite() && target.y.is_finite()) {
                    weight = 0.0;
                }
                let depth_target = inputs.d1.sample(&target).unwrap_or(f64::NAN);
                regions[inputs.labels0.get(x, y) as usize].push(FwdPx {
                    idx: y * w + x,
                    bearing: k.bearing(&p0),
                    target,
                    weight,
                    depth,
                    depth_target,
                    bearing_target: k.bearing(&target),
                });
            }
        }

        let mut static1 = Vec::new();
        let mut static1_mask = vec![false; w * h];
        if bidirectional {
            let missing = || Error::MissingFile {
                entry: "flow_bwd".into(),
                path: PathBuf::from("<not listed in manifest>"),
            };
            let bwd = inputs.flow_bwd.as_ref().ok_or_else(missing)?;
            let w_bwd = inputs.w_bwd.as_ref().ok_or_else(missing)?;
            for y in 0..h {
                for x in 0..w {
                    let p1 = Pixel::new(x as f64, y as f64);
                    let target = p1 + bwd.get(x, y);
                    let weight = w_bwd.get(x, y);
                    let is_static = match &inputs.labels1 {
                        Some(l1) => l1.get(x, y) == 0,
                        None => {
                            let (rx, ry) = (target.x.round(), target.y.round());
                            weight > 0.0
                                && k.in_bounds(&Pixel::new(rx, ry))
                                && inputs.labels0.get(rx as usize, ry as usize) == 0
                        }
                    };
                    let depth = inputs.d1.get(x, y);
                    if !is_static || !(depth > 0.0) {
                        continue;
                    }
                    static1_mask[y * w + x] = true;
                    let finite = target.x.is_finite() && target.y.is_finite();
                    static1.push(FwdPx {
                        idx: y * w + x,
                        bearing: k.bearing(&p1),
                        target,
                        weight: if finite { weight } else { 0.0 },
                        depth,
                        depth_target: inputs.d0.sample(&target).unwrap_or(f64::NAN),
                        bearing_target: k.bearing(&target),
                    });
                }
            }
        }
        Ok(Self {
            k,
            regions,
            static1,
            static1_mask,
            bidirectional,
            width: w,
            height: h,
        })
    }

    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn bidirectional(&self) -> bool {
        self.bidirectional
    }

    /// Frame-1 pixels that carry an optimized depth.
    pub fn static1_mask(&self) -> &[bool] {
        &self.static1_mask
    }

    pub fn weighted_pixels(&self, region: u32) -> usize {
        self.regions
            .get(region as usize)
            .map(|r| r.iter().filter(|p| p.weight > 0.0).count())
            .unwrap_or(0)
    }

    fn region(&self, region: u32) -> Result<&[FwdPx]> {
        let pxs = self
            .regions
            .get(region as usize)
            .ok_or(Error::UnknownRegion(region))?;
        if !pxs.iter().any(|p| p.weight > 0.0) {
            return Err(Error::EmptyRegion(region));
        }
        Ok(pxs)
    }

    fn pose(state: &BAState, region: u32) -> Result<(Matrix3<f64>, Vector3<f64>)> {
        let p = state
            .poses
            .get(region as usize)
            .ok_or(Error::UnknownRegion(region))?;
        let rot = Rotation6D::from_array([p[0], p[1], p[2], p[3], p[4], p[5]]);
        Ok((rot6d_to_matrix(&rot)?, Vector3::new(p[6], p[7], p[8])))
    }

    fn reproj_acc(&self, r: &Matrix3<f64>, t: &Vector3<f64>, ld: &[f64], pxs: &[FwdPx], delta: f64) -> Acc {
        let k = &self.k;
        reduce(pxs, |px, acc| {
            if !(px.weight > 0.0) {
                return;
            }
            let d = ld[px.idx].exp();
            let p = px.bearing * d;
            let q = r * p + t;
            if q.z <= MIN_DEPTH {
                return;
            }
            let res = Vector2::new(k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy) - px.target;
            let (vx, gx) = smooth_l1(res.x, delta);
            let (vy, gy) = smooth_l1(res.y, delta);
            acc.l1 += px.weight * (res.x.abs() + res.y.abs());
            acc.smooth += px.weight * (vx + vy);
            let gq = project_jacobian(k, &q).transpose() * Vector2::new(gx, gy) * px.weight;
            acc.g_rot += gq * p.transpose();
            acc.g_t += gq;
            acc.depth.push((px.idx, (r.transpose() * gq).dot(&px.bearing) * d));
        })
    }

    /// Backward reprojection through `T^-1`: `q = R^T (P1 - t)`.
    fn reproj_inv_acc(&self, r: &Matrix3<f64>, t: &Vector3<f64>, ld: &[f64], delta: f64) -> Acc {
        let k = &self.k;
        reduce(&self.static1, |px, acc| {
            if !(px.weight > 0.0) {
                return;
            }
            let d = ld[px.idx].exp();
            let u = px.bearing * d - t;
            let q = r.transpose() * u;
            if q.z <= MIN_DEPTH {
                return;
            }
            let res = Vector2::new(k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy) - px.target;
            let (vx, gx) = smooth_l1(res.x, delta);
            let (vy, gy) = smooth_l1(res.y, delta);
            acc.l1 += px.weight * (res.x.abs() + res.y.abs());
            acc.smooth += px.weight * (vx + vy);
            let gq = project_jacobian(k, &q).transpose() * Vector2::new(gx, gy) * px.weight;
            let gu = r * gq;
            acc.g_rot += u * gq.transpose();
            acc.g_t -= gu;
            acc.depth.push((px.idx, gu.dot(&px.bearing) * d));
        })
    }

    /// `|D_hat - (theta D + gamma)|` over `pxs`; `ss` indexes theta in
    /// `scale_shift`.
    fn depth_a_acc(ld: &[f64], pxs: &[FwdPx], theta: f64, gamma: f64, ss: usize, delta: f64) -> Acc {
        reduce(pxs, |px, acc| {
            let d = ld[px.idx].exp();
            let x = d - (theta * px.depth + gamma);
            let (v, g) = smooth_l1(x, delta);
            acc.l1 += x.abs();
            acc.smooth += v;
            acc.depth.push((px.idx, g * d));
            acc.g_ss[ss] -= g * px.depth;
            acc.g_ss[ss + 1] -= g;
        })
    }

    /// 3D agreement with the other frame's aligned depth. `inverse` applies
    /// `T^-1` instead of `T`; `ss` indexes the other frame's theta.
    #[allow(clippy::too_many_arguments)]
    fn depth_b_acc(
        r: &Matrix3<f64>,
        t: &Vector3<f64>,
        ld: &[f64],
        pxs: &[FwdPx],
        theta: f64,
        gamma: f64,
        ss: usize,
        inverse: bool,
        delta: f64,
    ) -> Acc {
        reduce(pxs, |px, acc| {
            if !(px.weight > 0.0) || !px.depth_target.is_finite() {
                return;
            }
            let d = ld[px.idx].exp();
            let p = px.bearing * d;
            let (q, u) = if inverse {
                let u = p - t;
                (r.transpose() * u, u)
            } else {
                (r * p + t, p)
            };
            let s = theta * px.depth_target + gamma;
            let res = q - px.bearing_target * s;
            let mut gr = Vector3::zeros();
            for c in 0..3 {
                let (v, g) = smooth_l1(res[c], delta);
                acc.l1 += px.weight * res[c].abs();
                acc.smooth += px.weight * v;
                gr[c] = g * px.weight;
            }
            let gp = if inverse {
                acc.g_rot += u * gr.transpose();
                let gu = r * gr;
                acc.g_t -= gu;
                gu
            } else {
                acc.g_rot += gr * u.transpose();
                acc.g_t += gr;
                r.transpose() * gr
            };
            acc.depth.push((px.idx, gp.dot(&px.bearing) * d));
            let gs = gr.dot(&px.bearing_target);
            acc.g_ss[ss] -= gs * px.depth_target;
            acc.g_ss[ss + 1] -= gs;
        })
    }

    fn scatter(&self, state: &BAState, grad: &mut BAGrad, region: u32, acc: &Acc, scale: f64, map: DepthMap) -> Result<()> {
        let p = &state.poses[region as usize];
        let rot = Rotation6D::from_array([p[0], p[1], p[2], p[3], p[4], p[5]]);
        let g6 = rot6d_backward(&rot, &(acc.g_rot * scale))?;
        let gp = &mut grad.poses[region as usize];
        for i in 0..6 {
            gp[i] += g6[i];
        }
        for i in 0..3 {
            gp[6 + i] += scale * acc.g_t[i];
        }
        for i in 0..4 {
            grad.scale_shift[i] += scale * acc.g_ss[i];
        }
        let target = match map {
            DepthMap::Frame0 => &mut grad.log_depth0,
            DepthMap::Frame1 => grad
                .log_depth1
                .as_mut()
                .ok_or_else(|| Error::InvalidParameter("state has no frame-1 depth".into()))?,
        };
        for &(i, g) in &acc.depth {
            target[i] += scale * g;
        }
        Ok(())
    }

    fn check_state(&self, state: &BAState) -> Result<()> {
        if state.poses.len() != self.regions.len() {
            return Err(Error::InvalidParameter(format!(
                "state has {} poses for {} regions",
                state.poses.len(),
                self.regions.len()
            )));
        }
        let n = self.width * self.height;
        if state.log_depth0.len() != n {
            return Err(Error::InvalidParameter("log_depth0 has the wrong size".into()));
        }
        if self.bidirectional && state.log_depth1.as_ref().map(Vec::len) != Some(n) {
            return Err(Error::InvalidParameter("bidirectional state needs log_depth1".into()));
        }
        Ok(())
    }

    /// Forward reprojection loss of one region, unweighted by `lambda1`.
    pub fn reproj_loss(&self, state: &BAState, region: u32, delta: f64) -> Result<TermEval> {
        self.check_state(state)?;
        let pxs = self.region(region)?;
        let (r, t) = Self::pose(state, region)?;
        let acc = self.reproj_acc(&r, &t, &state.log_depth0, pxs, delta);
        let mut grad = BAGrad::zeros_like(state);
        self.scatter(state, &mut grad, region, &acc, 1.0, DepthMap::Frame0)?;
        Ok(TermEval {
            l1: acc.l1,
            smooth: acc.smooth,
            grad,
        })
    }

    /// Depth regularization (alignment plus 3D agreement) of one region,
    /// unweighted by `lambda2`.
    pub fn depth_reg_loss(&self, state: &BAState, region: u32, delta: f64) -> Result<TermEval> {
        self.check_state(state)?;
        let pxs = self.region(region)?;
        let mut grad = BAGrad::zeros_like(state);
        let (a, b) = self.depth_reg_accs(state, region, pxs, delta)?;
        self.scatter(state, &mut grad, region, &a, 1.0, DepthMap::Frame0)?;
        self.scatter(state, &mut grad, region, &b, 1.0, DepthMap::Frame0)?;
        Ok(TermEval {
            l1: a.l1 + b.l1,
            smooth: a.smooth + b.smooth,
            grad,
        })
    }

    fn depth_reg_accs(&self, state: &BAState, region: u32, pxs: &[FwdPx], delta: f64) -> Result<(Acc, Acc)> {
        let (r, t) = Self::pose(state, region)?;
        let [th0, ga0, th1, ga1] = state.scale_shift;
        let a = Self::depth_a_acc(&state.log_depth0, pxs, th0, ga0, 0, delta);
        let b = Self::depth_b_acc(&r, &t, &state.log_depth0, pxs, th1, ga1, 2, false, delta);
        Ok((a, b))
    }

    /// The full objective with gradients.
    pub fn evaluate(&self, state: &BAState, params: &BAParams) -> Result<BAEval> {
        self.check_state(state)?;
        let mut l1 = BALosses::default();
        let mut sm = BALosses::default();
        let mut grad = BAGrad::zeros_like(state);
        for region in 0..self.regions.len() as u32 {
            let pxs = self.region(region)?;
            let (r, t) = Self::pose(state, region)?;
            let rep = self.reproj_acc(&r, &t, &state.log_depth0, pxs, params.reproj_delta);
            let (a, b) = self.depth_reg_accs(state, region, pxs, params.depth_delta)?;
            l1.reproj += rep.l1;
            sm.reproj += rep.smooth;
            l1.depth_a += a.l1;
            sm.depth_a += a.smooth;
            l1.depth_b += b.l1;
            sm.depth_b += b.smooth;
            self.scatter(state, &mut grad, region, &rep, params.lambda1, DepthMap::Frame0)?;
            self.scatter(state, &mut grad, region, &a, params.lambda2, DepthMap::Frame0)?;
            self.scatter(state, &mut grad, region, &b, params.lambda2, DepthMap::Frame0)?;
        }
        if self.bidirectional {
            let (r, t) = Self::pose(state, 0)?;
            let ld1 = state.log_depth1.as_deref().unwrap_or_default();
            let [th0, ga0, th1, ga1] = state.scale_shift;
            let rep = self.reproj_inv_acc(&r, &t, ld1, params.reproj_delta);
            let a = Self::depth_a_acc(ld1, &self.static1, th1, ga1, 2, params.depth_delta);
            let b = Self::depth_b_acc(&r, &t, ld1, &self.static1, th0, ga0, 0, true, params.depth_delta);
            l1.reproj_bwd = rep.l1;
            sm.reproj_bwd = rep.smooth;
            l1.depth_a1 = a.l1;
            sm.depth_a1 = a.smooth;
            l1.depth_b1 = b.l1;
            sm.depth_b1 = b.smooth;
            self.scatter(state, &mut grad, 0, &rep, params.lambda1, DepthMap::Frame1)?;
            self.scatter(state, &mut grad, 0, &a, params.lambda2, DepthMap::Frame1)?;
            self.scatter(state, &mut grad, 0, &b, params.lambda2, DepthMap::Frame1)?;
        }
        l1.finish(params);
        sm.finish(params);
        Ok(BAEval {
            l1,
            smooth: sm,
            grad,
        })
    }
}

/// Outcome of [`run_ba`].
#[derive(Debug, Clone, PartialEq)]
pub struct BAResult {
    pub t_cam: SE3Transform,
    /// World-frame motion of every dynamic region, `t_obj[i - 1]` for
    /// region `i`.
    pub t_obj: Vec<SE3Transform>,
    /// Optimized `T^(i)` for every region, static first.
    pub relative: Vec<SE3Transform>,
    pub depth0: ScalarMap,
    pub depth1: ScalarMap,
    pub scale_shift: [f64; 4],
    pub initial_losses: BALosses,
    pub final_losses: BALosses,
    /// L1 losses before each step.
    pub trajectory: Vec<BALosses>,
}

impl BAResult {
    /// World motion of `region`; identity for the static region.
    pub fn region_motion(&self, region: u32) -> Result<SE3Transform> {
        if region == 0 {
            return Ok(SE3Transform::identity());
        }
        self.t_obj
            .get(region as usize - 1)
            .copied()
            .ok_or(Error::UnknownRegion(region))
    }

    pub fn report(&self, regions: Vec<RegionInit>) -> BAReport {
        BAReport {
            t_cam: (&self.t_cam).into(),
            t_obj: self.t_obj.iter().map(PoseEntry::from).collect(),
            relative: self.relative.iter().map(PoseEntry::from).collect(),
            scale_shift: self.scale_shift,
            initial_losses: self.initial_losses,
            final_losses: self.final_losses,
            trajectory: self.trajectory.clone(),
            regions,
        }
    }

    /// Rebuilds a result from its report and depth maps.
    pub fn from_report(report: &BAReport, depth0: ScalarMap, depth1: ScalarMap) -> Self {
        Self {
            t_cam: report.t_cam.to_transform(),
            t_obj: report.t_obj.iter().map(PoseEntry::to_transform).collect(),
            relative: report.relative.iter().map(PoseEntry::to_transform).collect(),
            depth0,
            depth1,
            scale_shift: report.scale_shift,
            initial_losses: report.initial_losses,
            final_losses: report.final_losses,
            trajectory: report.trajectory.clone(),
        }
    }
}

/// JSON form of a BA run. Depth maps are stored beside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BAReport {
    pub t_cam: PoseEntry,
    pub t_obj: Vec<PoseEntry>,
    pub relative: Vec<PoseEntry>,
    pub scale_shift: [f64; 4],
    pub initial_losses: BALosses,
    pub final_losses: BALosses,
    pub trajectory: Vec<BALosses>,
    pub regions: Vec<RegionInit>,
}

/// `T_cam = T^(0)`, `T_obj^(i) = T_cam^-1 T^(i)`.
///
/// With the world frame at camera 0, a point `X` of region `i` moves to
/// `M X` and is seen at `T_cam M X = T^(i) X`, which fixes `M`.
pub fn decompose(relative: &[SE3Transform]) -> (SE3Transform, Vec<SE3Transform>) {
    let t_cam = relative[0];
    let inv = t_cam.inverse();
    let t_obj = relative[1..].iter().map(|t| inv.compose(t)).collect();
    (t_cam, t_obj)
}

/// Adam on the full objective, then pose decomposition.
pub fn run_ba(inputs: &BAInputs, initial: &[SE3Transform], params: &BAParams) -> Result<BAResult> {
    params.validate()?;
    let problem = BAProblem::new(inputs, params.bidirectional)?;
    if initial.len() != problem.num_regions() {
        return Err(Error::InvalidParameter(format!(
            "{} initial transforms for {} regions",
            initial.len(),
            problem.num_regions()
        )));
    }
    let mut state = BAState::initial(inputs, initial, params.bidirectional);
    let n_pose = 9 * state.poses.len();
    let mut pose_opt = Adam::new(AdamConfig::with_lr(params.lr_pose), n_pose);
    let mut d0_opt = Adam::new(AdamConfig::with_lr(params.lr_depth), state.log_depth0.len());
    let mut d1_opt = state
        .log_depth1
        .as_ref()
        .map(|v| Adam::new(AdamConfig::with_lr(params.lr_depth), v.len()));
    let mut ss_opt = Adam::new(AdamConfig::with_lr(params.lr_depth), 4);

    let mut trajectory = Vec::with_capacity(params.iters);
    let mut pose_flat = vec![0.0; n_pose];
    let mut pose_grad = vec![0.0; n_pose];
    for iter in 0..params.iters {
        let eval = problem.evaluate(&state, params)?;
        if let Some(term) = eval.smooth.first_non_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: iter,
                term: term.to_string(),
            });
        }
        trajectory.push(eval.l1);
        for (i, (p, g)) in state.poses.iter().zip(&eval.grad.poses).enumerate() {
            pose_flat[9 * i..9 * i + 9].copy_from_slice(p);
            pose_grad[9 * i..9 * i + 9].copy_from_slice(g);
        }
        pose_opt.step(&mut pose_flat, &pose_grad);
        for (i, p) in state.poses.iter_mut().enumerate() {
            p.copy_from_slice(&pose_flat[9 * i..9 * i + 9]);
        }
        d0_opt.step(&mut state.log_depth0, &eval.grad.log_depth0);
        if let (Some(opt), Some(ld), Some(g)) = (
            d1_opt.as_mut(),
            state.log_depth1.as_mut(),
            eval.grad.log_depth1.as_ref(),
        ) {
            opt.step(ld, g);
        }
        ss_opt.step(&mut state.scale_shift, &eval.grad.scale_shift);
    }
    let last = problem.evaluate(&state, params)?;
    if let Some(term) = last.smooth.first_non_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: params.iters,
            term: term.to_string(),
        });
    }

    let relative = state.transforms()?;
    let (t_cam, t_obj) = decompose(&relative);
    let (w, h) = inputs.k.dims();
    let depth0 = ScalarMap {
        width: w,
        height: h,
        data: state.log_depth0.iter().map(|v| v.exp()).collect(),
    };
    let [_, _, th1, ga1] = state.scale_shift;
    let mask = problem.static1_mask();
    let depth1 = ScalarMap {
        width: w,
        height: h,
        data: (0..w * h)
            .map(|i| match &state.log_depth1 {
                Some(ld) if mask[i] => ld[i].exp(),
                _ => {
                    let d = inputs.d1.data[i];
                    if d > 0.0 {
                        th1 * d + ga1
                    } else {
                        f64::NAN
                    }
                }
            })
            .collect(),
    };
    Ok(BAResult {
        t_cam,
        t_obj,
        relative,
        depth0,
        depth1,
        scale_shift: state.scale_shift,
        initial_losses: trajectory.first().copied().unwrap_or(last.l1),
        final_losses: last.l1,
        trajectory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, unproject};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const W: usize = 14;
    const H: usize = 12;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(20.0, 20.0, 6.5, 5.5, W, H).unwrap()
    }

    fn twist(v: [f64; 6]) -> SE3Transform {
        SE3Transform::exp(&nalgebra::Vector6::from(v))
    }

    /// Two regions (right third is region 1) with exact forward flow from
    /// the given motions. Frame-1 depth is the frame-0 depth, which makes
    /// the 3D term inexact but keeps it smooth.
    fn scene(motions: &[SE3Transform], seed: u64) -> BAInputs {
        let k = k();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d0 = ScalarMap::filled(W, H, 0.0);
        let mut labels = LabelMap::new(W, H, vec![0; W * H]).unwrap();
        let mut flow = FlowMap::zeros(W, H);
        let mut bwd = FlowMap::zeros(W, H);
        for y in 0..H {
            for x in 0..W {
                let d = 3.0 + 0.1 * x as f64 + rng.random_range(0.0..0.2);
                d0.set(x, y, d);
                let region = if x >= 2 * W / 3 && motions.len() > 1 { 1 } else { 0 };
                labels.data[y * W + x] = region;
                let p0 = Pixel::new(x as f64, y as f64);
                let p1 = project(&k, &motions[region as usize].apply(&unproject(&k, &p0, d).unwrap())).unwrap();
                flow.set(x, y, p1 - p0);
                bwd.set(x, y, p0 - p1);
            }
        }
        BAInputs {
            k,
            labels0: labels,
            labels1: None,
            d1: d0.clone(),
            d0,
            flow_fwd: flow,
            flow_bwd: Some(bwd),
            w_fwd: ScalarMap::filled(W, H, 1.0),
            w_bwd: Some(ScalarMap::filled(W, H, 1.0)),
        }
    }

    fn motions() -> Vec<SE3Transform> {
        vec![
            twist([0.05, -0.02, 0.03, 0.01, 0.02, -0.01]),
            twist([-0.1, 0.05, 0.02, -0.03, 0.01, 0.04]),
        ]
    }

    #[test]
    fn identity_with_zero_flow_has_zero_reprojection() {
        let ids = vec![SE3Transform::identity(); 2];
        let inputs = scene(&ids, 1);
        let problem = BAProblem::new(&inputs, false).unwrap();
        let state = BAState::initial(&inputs, &ids, false);
        for r in 0..2 {
            let t = problem.reproj_loss(&state, r, 0.1).unwrap();
            assert!(t.l1.abs() < 1e-12);
        }
    }

    #[test]
    fn consistent_construction_has_zero_reprojection() {
        let m = motions();
        let inputs = scene(&m, 2);
        let problem = BAProblem::new(&inputs, false).unwrap();
        let state = BAState::initial(&inputs, &m, false);
        let e = problem.evaluate(&state, &BAParams { lambda2: 0.0, ..Default::default() }).unwrap();
        assert!(e.l1.total < 1e-9, "{:?}", e.l1);
    }

    #[test]
    fn depth_perturbation_matches_hand_computation_and_gradient_pushes_back() {
        let m = motions();
        let inputs = scene(&m, 3);
        let problem = BAProblem::new(&inputs, false).unwrap();
        let mut state = BAState::initial(&inputs, &m, false);
        let idx = 5 * W + 3;
        let d = inputs.d0.data[idx];
        state.log_depth0[idx] = (1.1 * d).ln();
        let t = problem.reproj_loss(&state, 0, 0.1).unwrap();
        let p0 = Pixel::new(3.0, 5.0);
        let p1 = p0 + inputs.flow_fwd.get(3, 5);
        let moved = project(&inputs.k, &m[0].apply(&unproject(&inputs.k, &p0, 1.1 * d).unwrap())).unwrap();
        let expect = (moved - p1).abs().sum();
        assert!((t.l1 - expect).abs() < 1e-9);
        assert!(t.grad.log_depth0[idx] > 0.0);
    }

    #[test]
    fn scale_term_closed_form() {
        let ids = vec![SE3Transform::identity()];
        let mut inputs = scene(&ids, 4);
        inputs.d0 = ScalarMap::filled(W, H, 1.0);
        let problem = BAProblem::new(&inputs, false).unwrap();
        let mut state = BAState::initial(&inputs, &ids, false);
        state.scale_shift[0] = 2.0;
        let (a, _) = problem.depth_reg_accs(&state, 0, problem.region(0).unwrap(), 0.01).unwrap();
        assert!((a.l1 - (W * H) as f64).abs() < 1e-9);
    }

    #[test]
    fn zero_weights_give_zero_loss() {
        let m = motions();
        let inputs = scene(&m, 5);
        let problem = BAProblem::new(&inputs, true).unwrap();
        let mut state = BAState::initial(&inputs, &m, true);
        state.scale_shift = [1.3, 0.2, 0.8, -0.1];
        let p = BAParams { lambda1: 0.0, lambda2: 0.0, ..Default::default() };
        let e = problem.evaluate(&state, &p).unwrap();
        assert_eq!(e.l1.total, 0.0);
        assert!(e.grad.log_depth0.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn bidirectional_adds_exactly_the_backward_terms() {
        let m = motions();
        let inputs = scene(&m, 6);
        let mut state = BAState::initial(&inputs, &m, true);
        state.scale_shift = [1.1, 0.05, 0.9, 0.02];
        state.poses[0][7] += 0.01;
        let p = BAParams::default();
        let on = BAProblem::new(&inputs, true).unwrap().evaluate(&state, &p).unwrap();
        let off = BAProblem::new(&inputs, false).unwrap().evaluate(&state, &p).unwrap();
        let extra = p.lambda1 * on.l1.reproj_bwd + p.lambda2 * (on.l1.depth_a1 + on.l1.depth_b1);
        assert!(on.l1.reproj_bwd > 0.0);
        assert!((on.l1.total - off.l1.total - extra).abs() < 1e-9 * on.l1.total);
    }

    #[test]
    fn missing_backward_flow_is_reported() {
        let m = motions();
        let mut inputs = scene(&m, 7);
        inputs.flow_bwd = None;
        inputs.w_bwd = None;
        match BAProblem::new(&inputs, true) {
            Err(Error::MissingFile { entry, .. }) => assert_eq!(entry, "flow_bwd"),
            other => panic!("{other:?}"),
        }
    }

    fn fd_check(problem: &BAProblem, state: &BAState, params: &BAParams) {
        let f = |s: &BAState| problem.evaluate(s, params).unwrap().smooth.total;
        let g = problem.evaluate(state, params).unwrap().grad;
        let check = |analytic: f64, perturb: &dyn Fn(&mut BAState, f64), x: f64, what: &str| {
            let h = 1e-4 * x.abs().max(1.0);
            let mut a = state.clone();
            perturb(&mut a, h);
            let mut b = state.clone();
            perturb(&mut b, -h);
            let num = (f(&a) - f(&b)) / (2.0 * h);
            let err = (analytic - num).abs() / analytic.abs().max(num.abs()).max(1e-6);
            assert!(err < 1e-3, "{what}: analytic {analytic} numeric {num}");
        };
        for r in 0..state.poses.len() {
            for j in 0..9 {
                check(g.poses[r][j], &|s, h| s.poses[r][j] += h, state.poses[r][j], &format!("pose {r}/{j}"));
            }
        }
        for j in 0..4 {
            check(g.scale_shift[j], &|s, h| s.scale_shift[j] += h, state.scale_shift[j], "scale_shift");
        }
        for idx in [0, 17, 40, W * H - 1] {
            check(g.log_depth0[idx], &|s, h| s.log_depth0[idx] += h, state.log_depth0[idx], "log_depth0");
            if let Some(ld1) = &state.log_depth1 {
                let gl = g.log_depth1.as_ref().unwrap()[idx];
                check(gl, &|s, h| s.log_depth1.as_mut().unwrap()[idx] += h, ld1[idx], "log_depth1");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = motions();
        let inputs = scene(&m, 8);
        let problem = BAProblem::new(&inputs, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..3 {
            let mut state = BAState::initial(&inputs, &m, true);
            for p in &mut state.poses {
                for v in p.iter_mut() {
                    *v += rng.random_range(-0.05..0.05);
                }
            }
            for v in state.log_depth0.iter_mut().chain(state.log_depth1.as_mut().unwrap()) {
                *v += rng.random_range(-0.1..0.1);
            }
            for v in &mut state.scale_shift {
                *v += rng.random_range(-0.2..0.2);
            }
            fd_check(&problem, &state, &BAParams::default());
        }
    }

    #[test]
    fn static_scene_stays_at_identity_and_runs_are_deterministic() {
        let ids = vec![SE3Transform::identity()];
        let inputs = scene(&ids, 10);
        let p = BAParams { iters: 60, ..Default::default() };
        let a = run_ba(&inputs, &ids, &p).unwrap();
        assert!(a.t_cam.angle() < 1e-4);
        assert!(a.t_obj.is_empty());
        let b = run_ba(&inputs, &ids, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decomposition_recovers_world_motion() {
        let cam = twist([0.1, 0.0, 0.05, 0.0, 0.03, 0.0]);
        let obj = twist([0.0, 0.2, 0.0, 0.1, 0.0, 0.0]);
        let (t_cam, t_obj) = decompose(&[cam, cam.compose(&obj)]);
        assert_eq!(t_cam, cam);
        let diff = t_obj[0].inverse().compose(&obj);
        assert!(diff.angle() < 1e-12 && diff.translation().norm() < 1e-12);
    }

    #[test]
    fn pnp_initialization_recovers_exact_motions() {
        let m = motions();
        let inputs = scene(&m, 11);
        let (poses, stats) = initialize_poses(&inputs, &RansacParams { min_inliers: 6, ..Default::default() }).unwrap();
        assert!(stats.iter().all(|s| s.fallback.is_none()), "{stats:?}");
        for (a, b) in poses.iter().zip(&m) {
            assert!(a.inverse().compose(b).angle() < 1e-6);
        }
    }
}
