//! Per-region rigid-motion initialization: DLT + Gauss-Newton PnP inside a
//! seeded RANSAC loop.

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Matrix6, Vector3, Vector6};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{hat, project, project_jacobian, unproject, CameraIntrinsics, Pixel, Point3, SE3Transform};
use crate::tensorio::{FlowMap, LabelMap, ScalarMap};

pub const MIN_PNP_POINTS: usize = 6;
/// Regions larger than this are subsampled for RANSAC scoring.
pub const RANSAC_MAX_POINTS: usize = 5000;
/// Least-squares refits on the inlier set after the sampling loop.
const REFIT_ROUNDS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct RegionCorrespondences {
    pub region_id: u32,
    /// Frame-0 camera coordinates.
    pub points3d: Vec<Point3>,
    /// Source pixels in frame 0.
    pub pixels0: Vec<Pixel>,
    /// Tracked positions in frame 1.
    pub pixels1: Vec<Pixel>,
    pub weights: Vec<f64>,
}

impl RegionCorrespondences {
    pub fn len(&self) -> usize {
        self.points3d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points3d.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            region_id: self.region_id,
            points3d: idx.iter().map(|&i| self.points3d[i]).collect(),
            pixels0: idx.iter().map(|&i| self.pixels0[i]).collect(),
            pixels1: idx.iter().map(|&i| self.pixels1[i]).collect(),
            weights: idx.iter().map(|&i| self.weights[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacParams {
    /// Inlier reprojection threshold in pixels.
    pub threshold: f64,
    pub max_iters: usize,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            threshold: 2.0,
            max_iters: 1000,
            min_inliers: 20,
            seed: 0,
        }
    }
}

/// Pairs every trusted, validly-deep pixel of `region_id` with its tracked
/// position in frame 1.
pub fn build_region_correspondences(
    region_id: u32,
    labels: &LabelMap,
    d0: &ScalarMap,
    f_fwd: &FlowMap,
    w_fwd: &ScalarMap,
    k: &CameraIntrinsics,
) -> Result<RegionCorrespondences> {
    let (w, h) = labels.dims();
    let mut out = RegionCorrespondences {
        region_id,
        points3d: Vec::new(),
        pixels0: Vec::new(),
        pixels1: Vec::new(),
        weights: Vec::new(),
    };
    for y in 0..h {
        for x in 0..w {
            if labels.get(x, y) != region_id {
                continue;
            }
            let weight = w_fwd.get(x, y);
            let depth = d0.get(x, y);
            if !(weight > 0.0) || !(depth > 0.0) {
                continue;
            }
            let p0 = Pixel::new(x as f64, y as f64);
            let p1 = p0 + f_fwd.get(x, y);
            if !k.in_bounds(&p1) {
                continue;
            }
            out.points3d.push(unproject(k, &p0, depth)?);
            out.pixels0.push(p0);
            out.pixels1.push(p1);
            out.weights.push(weight);
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyRegion(region_id));
    }
    Ok(out)
}

fn reprojection_error(k: &CameraIntrinsics, t: &SE3Transform, p: &Point3, px: &Pixel) -> f64 {
    match project(k, &t.apply(p)) {
        Ok(q) => (q - px).norm(),
        Err(_) => f64::INFINITY,
    }
}

/// Linear estimate of `[R | t]` from normalized bearings.
fn dlt(points: &[Point3], pixels: &[Pixel], k: &CameraIntrinsics) -> Result<SE3Transform> {
    let n = points.len();
    let centroid = points.iter().sum::<Vector3<f64>>() / n as f64;
    let mean_dist = points.iter().map(|p| (p - centroid).norm()).sum::<f64>() / n as f64;
    if !(mean_dist > 1e-12) {
        return Err(Error::DegenerateConfiguration("3D points coincide".into()));
    }
    let s = 3f64.sqrt() / mean_dist;

    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, (p, px)) in points.iter().zip(pixels).enumerate() {
        let q = (p - centroid) * s;
        let xh = [q.x, q.y, q.z, 1.0];
        let b = k.bearing(px);
        for j in 0..4 {
            a[(2 * i, j)] = xh[j];
            a[(2 * i, 8 + j)] = -b.x * xh[j];
            a[(2 * i + 1, 4 + j)] = xh[j];
            a[(2 * i + 1, 8 + j)] = -b.y * xh[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::DegenerateConfiguration("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv = |r: usize| svd.singular_values[order[r]];
    if order.len() < 12 || !(sv(10) > 1e-10 * sv(0)) {
        return Err(Error::DegenerateConfiguration(
            "DLT system has a null space of dimension > 1".into(),
        ));
    }
    let null = v_t.row(order[11]);
    let pn = Matrix3x4::from_fn(|r, c| null[4 * r + c]);
    // undo the point normalization: P = Pn [sI | -s c]
    let m_n = pn.fixed_view::<3, 3>(0, 0).into_owned();
    let mut m = m_n * s;
    let mut last = pn.column(3).into_owned() - m_n * centroid * s;
    if m.determinant() < 0.0 {
        m = -m;
        last = -last;
    }
    let svd_m = m.svd(true, true);
    let (u, vt) = (svd_m.u.unwrap(), svd_m.v_t.unwrap());
    let r: Matrix3<f64> = u * vt;
    let scale = svd_m.singular_values.sum() / 3.0;
    if !(scale > 0.0) {
        return Err(Error::DegenerateConfiguration("zero-scale DLT solution".into()));
    }
    let t = last / scale;
    Ok(SE3Transform::from_matrix(&r, t))
}

fn reprojection_cost(points: &[Point3], pixels: &[Pixel], k: &CameraIntrinsics, t: &SE3Transform) -> f64 {
    points
        .iter()
        .zip(pixels)
        .map(|(p, px)| match project(k, &t.apply(p)) {
            Ok(q) => (q - px).norm_squared(),
            Err(_) => 1e6,
        })
        .sum()
}

/// Gauss-Newton on the pixel reprojection error with left-multiplied
/// updates `T <- exp(delta) T`. Backtracks when a step does not decrease
/// the cost.
fn refine(points: &[Point3], pixels: &[Pixel], k: &CameraIntrinsics, init: SE3Transform) -> SE3Transform {
    let mut t = init;
    let mut cost = reprojection_cost(points, pixels, k, &t);
    for _ in 0..20 {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for (p, px) in points.iter().zip(pixels) {
            let q = t.apply(p);
            let Ok(proj) = project(k, &q) else { continue };
            let r = proj - px;
            let jp = project_jacobian(k, &q);
            let mut dq = nalgebra::Matrix3x6::<f64>::zeros();
            dq.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-hat(&q)));
            dq.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            let j = jp * dq;
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        if jtr.norm() < 1e-10 {
            break;
        }
        let Some(step) = jtj.lu().solve(&(-jtr)) else { break };
        let mut scale = 1.0;
        let mut improved = false;
        for _ in 0..8 {
            let d = step * scale;
            let dw = Vector3::new(d[0], d[1], d[2]);
            let dt = Vector3::new(d[3], d[4], d[5]);
            let update = SE3Transform::exp(&Vector6::new(0.0, 0.0, 0.0, dw.x, dw.y, dw.z));
            let candidate = SE3Transform::from_matrix(
                &(update.rotation() * t.rotation()),
                update.rotation() * t.translation() + dt,
            );
            let c = reprojection_cost(points, pixels, k, &candidate);
            if c < cost {
                t = candidate;
                cost = c;
                improved = true;
                break;
            }
            scale *= 0.5;
        }
        if !improved {
            break;
        }
    }
    t
}

/// Least-squares pose mapping `points3d` onto `pixels1`.
pub fn pnp_solve(corrs: &RegionCorrespondences, k: &CameraIntrinsics) -> Result<SE3Transform> {
    if corrs.len() < MIN_PNP_POINTS {
        return Err(Error::DegenerateConfiguration(format!(
            "{} correspondences, at least {MIN_PNP_POINTS} required",
            corrs.len()
        )));
    }
    let init = dlt(&corrs.points3d, &corrs.pixels1, k)?;
    Ok(refine(&corrs.points3d, &corrs.pixels1, k, init))
}

#[derive(Debug, Clone, Copy)]
struct Score {
    inliers: usize,
    /// Sum of squared errors truncated at the threshold.
    cost: f64,
}

fn score(corrs: &RegionCorrespondences, k: &CameraIntrinsics, t: &SE3Transform, threshold: f64) -> Score {
    let cap = threshold * threshold;
    let mut inliers = 0;
    let mut cost = 0.0;
    for (p, px) in corrs.points3d.iter().zip(&corrs.pixels1) {
        let e = reprojection_error(k, t, p, px);
        if e < threshold {
            inliers += 1;
            cost += e * e;
        } else {
            cost += cap;
        }
    }
    Score { inliers, cost }
}

fn better(a: &Score, b: &Score) -> bool {
    a.cost < b.cost || (a.cost == b.cost && a.inliers > b.inliers)
}

/// Robust PnP. Returns the pose and the inlier mask over `corrs`.
///
/// Each iteration draws its minimal sample from a stream derived from
/// `(seed, iteration)`, so the result does not depend on scheduling.
pub fn ransac_pnp(
    corrs: &RegionCorrespondences,
    k: &CameraIntrinsics,
    params: &RansacParams,
) -> Result<(SE3Transform, Vec<bool>)> {
    if !(params.threshold > 0.0) || params.max_iters == 0 {
        return Err(Error::InvalidParameter(
            "RANSAC needs threshold > 0 and max_iters >= 1".into(),
        ));
    }
    let required = params.min_inliers.max(MIN_PNP_POINTS);
    if corrs.len() < required {
        return Err(Error::InsufficientInliers {
            found: corrs.len(),
            required,
        });
    }
    let scoring = if corrs.len() > RANSAC_MAX_POINTS {
        let mut rng = crate::rng_stream(params.seed, u64::MAX);
        let mut idx = sample(&mut rng, corrs.len(), RANSAC_MAX_POINTS).into_vec();
        idx.sort_unstable();
        corrs.subset(&idx)
    } else {
        corrs.clone()
    };

    let candidates: Vec<Option<(SE3Transform, Score)>> = (0..params.max_iters)
        .into_par_iter()
        .map(|it| {
            let mut rng = crate::rng_stream(params.seed, it as u64);
            let idx = sample(&mut rng, scoring.len(), MIN_PNP_POINTS).into_vec();
            let minimal = scoring.subset(&idx);
            let t = pnp_solve(&minimal, k).ok()?;
            let s = score(&scoring, k, &t, params.threshold);
            Some((t, s))
        })
        .collect();

    let mut best: Option<(SE3Transform, Score)> = None;
    for (t, s) in candidates.into_iter().flatten() {
        if best.as_ref().is_none_or(|(_, b)| better(&s, b)) {
            best = Some((t, s));
        }
    }
    let Some((best_t, _)) = best else {
        return Err(Error::InsufficientInliers { found: 0, required });
    };

    let mask_for = |t: &SE3Transform| -> Vec<bool> {
        corrs
            .points3d
            .iter()
            .zip(&corrs.pixels1)
            .map(|(p, px)| reprojection_error(k, t, p, px) < params.threshold)
            .collect()
    };
    let mut final_t = best_t;
    let mut final_mask = mask_for(&best_t);
    for _ in 0..REFIT_ROUNDS {
        let idx: Vec<usize> = (0..corrs.len()).filter(|&i| final_mask[i]).collect();
        let Ok(refit) = pnp_solve(&corrs.subset(&idx), k) else { break };
        let mask = mask_for(&refit);
        final_t = refit;
        if mask == final_mask {
            break;
        }
        final_mask = mask;
    }
    let found = final_mask.iter().filter(|&&b| b).count();
    if found < required {
        return Err(Error::InsufficientInliers { found, required });
    }
    Ok((final_t, final_mask))
}
