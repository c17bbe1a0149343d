//! Tile rasterizer and its reverse pass.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;

use super::{project_cov, quat_backward, quat_to_matrix, sigmoid, GaussianSet, RenderConfig, TILE};
use crate::error::{Error, Result};
use crate::geometry::{hat, rot6d_backward, rot6d_to_matrix, se3_log, CameraIntrinsics, SE3Transform};
use crate::se3field::MotionField;
use crate::tensorio::{RgbImage, ScalarMap};

/// How Gaussians move before projection.
#[derive(Debug, Clone, Copy)]
pub enum Motion<'a> {
    /// Time 0: positions as stored.
    None,
    /// Time 1: the full field motion. Gradients flow to the field.
    Full(&'a MotionField),
    /// Screw-interpolated field, one ratio per region id (region 0 is held
    /// at the identity). Gradients flow to the ratios.
    Ratios {
        field: &'a MotionField,
        ratios: &'a [f64],
    },
}

#[derive(Debug, Clone, Copy)]
struct GMotion {
    a: Matrix3<f64>,
    b: Vector3<f64>,
    /// `(v, omega)` of the field motion when the ratio is a variable.
    twist: Option<(Vector3<f64>, Vector3<f64>)>,
}

fn resolve_motion(g: &GaussianSet, motion: &Motion) -> Result<Option<Vec<GMotion>>> {
    let field = match motion {
        Motion::None => return Ok(None),
        Motion::Full(f) | Motion::Ratios { field: f, .. } => f,
    };
    if field.len() != g.len() {
        return Err(Error::DimensionMismatch {
            entry: "motion field".into(),
            expected: (g.len(), 1),
            found: (field.len(), 1),
        });
    }
    let out: Result<Vec<GMotion>> = (0..g.len())
        .into_par_iter()
        .map(|i| match motion {
            Motion::Full(f) => Ok(GMotion {
                a: rot6d_to_matrix(&f.rot6[i])?,
                b: f.trans[i],
                twist: None,
            }),
            Motion::Ratios { field, ratios } => {
                let region = g.region_id[i];
                if region == 0 {
                    return Ok(GMotion {
                        a: Matrix3::identity(),
                        b: Vector3::zeros(),
                        twist: None,
                    });
                }
                let r = *ratios.get(region as usize).ok_or(Error::UnknownRegion(region))?;
                if !(0.0..=1.0).contains(&r) {
                    return Err(Error::InvalidParameter(format!("ratio {r} outside [0, 1]")));
                }
                let xi = se3_log(&field.transform(i)?)?;
                let t = SE3Transform::exp(&(xi * r));
                Ok(GMotion {
                    a: *t.rotation(),
                    b: *t.translation(),
                    twist: Some((xi.fixed_rows::<3>(0).into_owned(), xi.fixed_rows::<3>(3).into_owned())),
                })
            }
            Motion::None => unreachable!(),
        })
        .collect();
    out.map(Some)
}

#[derive(Debug, Clone, Copy)]
struct Splat {
    mean: Vector2<f64>,
    /// Inverse covariance `(a, b, c)` of `[[a, b], [b, c]]`.
    conic: [f64; 3],
    opacity: f64,
    color: Vector3<f64>,
    depth: f64,
    radius: f64,
}

/// World-frame mean and covariance after motion, plus the pieces the
/// reverse pass needs.
struct WorldGaussian {
    xw: Vector3<f64>,
    sigma_w: Matrix3<f64>,
    sigma0: Matrix3<f64>,
    rq: Matrix3<f64>,
    s2: Vector3<f64>,
}

fn world_gaussian(g: &GaussianSet, i: usize, m: Option<&GMotion>) -> WorldGaussian {
    let rq = quat_to_matrix(&g.rotations[i]);
    let s2 = g.log_scales[i].map(|v| (2.0 * v).exp());
    let sigma0 = rq * Matrix3::from_diagonal(&s2) * rq.transpose();
    let (xw, sigma_w) = match m {
        Some(m) => (m.a * g.positions[i] + m.b, m.a * sigma0 * m.a.transpose()),
        None => (g.positions[i], sigma0),
    };
    WorldGaussian {
        xw,
        sigma_w,
        sigma0,
        rq,
        s2,
    }
}

fn make_splat(
    g: &GaussianSet,
    i: usize,
    m: Option<&GMotion>,
    cam: &SE3Transform,
    k: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> Option<Splat> {
    let wg = world_gaussian(g, i, m);
    let (p, _, _, _) = project_cov(&wg.xw, &wg.sigma_w, cam, k, cfg.near_clip).ok()?;
    let c = p.cov2d;
    let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(0, 1)];
    if !(det > 0.0) {
        return None;
    }
    let mid = 0.5 * (c[(0, 0)] + c[(1, 1)]);
    let lmax = mid + (mid * mid - det).max(0.0).sqrt();
    Some(Splat {
        mean: p.mean2d,
        conic: [c[(1, 1)] / det, -c[(0, 1)] / det, c[(0, 0)] / det],
        opacity: sigmoid(g.logit_opacity[i]),
        color: g.colors[i],
        depth: p.depth,
        radius: cfg.gaussian_extent * lmax.sqrt(),
    })
}

#[derive(Debug, Clone)]
struct ForwardState {
    cfg: RenderConfig,
    cam: SE3Transform,
    k: CameraIntrinsics,
    n: usize,
    splats: Vec<Option<Splat>>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
}

/// A rendered image with what the reverse pass needs.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: RgbImage,
    /// Accumulated opacity `1 - T_final`.
    pub alpha: ScalarMap,
    /// Largest `|sum_i w_i + T_final - 1|` over pixels.
    pub max_weight_error: f64,
    /// Gaussians that survived clipping.
    pub visible: usize,
    /// Per pixel, the Gaussian with the largest compositing weight.
    pub winner: Vec<Option<u32>>,
    state: ForwardState,
}

fn tile_pixels(tile: usize, tiles_x: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let (tx, ty) = (tile % tiles_x, tile / tiles_x);
    let (x0, y0) = (tx * TILE, ty * TILE);
    let (x1, y1) = ((x0 + TILE).min(w), (y0 + TILE).min(h));
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

/// Visits the Gaussians that pass the support and opacity gates at one
/// pixel, front to back: `(list position, alpha, G, dx, dy)`.
#[inline]
fn for_each_contributor(
    x: usize,
    y: usize,
    list: &[u32],
    splats: &[Option<Splat>],
    cfg: &RenderConfig,
    mut f: impl FnMut(usize, &Splat, f64, f64, f64, f64),
) {
    let ext2 = cfg.gaussian_extent * cfg.gaussian_extent;
    for (j, &gid) in list.iter().enumerate() {
        let s = splats[gid as usize].as_ref().expect("listed splat");
        let dx = x as f64 - s.mean.x;
        let dy = y as f64 - s.mean.y;
        let [a, b, c] = s.conic;
        let maha = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        if !(maha <= ext2) {
            continue;
        }
        let gv = (-0.5 * maha).exp();
        let alpha = s.opacity * gv;
        if alpha < cfg.alpha_threshold || alpha <= 0.0 {
            continue;
        }
        f(j, s, alpha, gv, dx, dy);
    }
}

/// Forward render from world-to-camera pose `cam`.
pub fn rasterize(
    g: &GaussianSet,
    motion: &Motion,
    cam: &SE3Transform,
    k: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> Result<RenderOutput> {
    g.validate()?;
    cfg.validate()?;
    let motions = resolve_motion(g, motion)?;
    let (w, h) = k.dims();
    let splats: Vec<Option<Splat>> = (0..g.len())
        .into_par_iter()
        .map(|i| make_splat(g, i, motions.as_ref().map(|m| &m[i]), cam, k, cfg))
        .collect();

    let mut order: Vec<u32> = (0..g.len() as u32).filter(|&i| splats[i as usize].is_some()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (splats[a as usize].unwrap().depth, splats[b as usize].unwrap().depth);
        da.total_cmp(&db).then(a.cmp(&b))
    });

    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for &gid in &order {
        let s = splats[gid as usize].unwrap();
        let xmin = (s.mean.x - s.radius).floor().max(0.0);
        let xmax = (s.mean.x + s.radius).ceil().min((w - 1) as f64);
        let ymin = (s.mean.y - s.radius).floor().max(0.0);
        let ymax = (s.mean.y + s.radius).ceil().min((h - 1) as f64);
        if !(xmin <= xmax && ymin <= ymax) {
            continue;
        }
        for ty in (ymin as usize / TILE)..=(ymax as usize / TILE) {
            for tx in (xmin as usize / TILE)..=(xmax as usize / TILE) {
                tiles[ty * tiles_x + tx].push(gid);
            }
        }
    }

    let bg = Vector3::from(cfg.background);
    let rendered: Vec<(Vec<([f64; 4], Option<u32>)>, f64)> = tiles
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let mut out = Vec::with_capacity(TILE * TILE);
            let mut max_err: f64 = 0.0;
            for (x, y) in tile_pixels(t, tiles_x, w, h) {
                let mut color = Vector3::zeros();
                let mut trans = 1.0;
                let mut wsum = 0.0;
                let mut best = (0.0, None);
                for_each_contributor(x, y, list, &splats, cfg, |j, s, alpha, _, _, _| {
                    let wgt = alpha * trans;
                    if wgt > best.0 {
                        best = (wgt, Some(list[j]));
                    }
                    color += s.color * wgt;
                    wsum += wgt;
                    trans *= 1.0 - alpha;
                });
                color += bg * trans;
                max_err = max_err.max((wsum + trans - 1.0).abs());
                out.push(([color.x, color.y, color.z, 1.0 - trans], best.1));
            }
            (out, max_err)
        })
        .collect();

    let mut image = RgbImage::filled(w, h, [0.0; 3]);
    let mut alpha = ScalarMap::filled(w, h, 0.0);
    let mut winner = vec![None; w * h];
    let mut max_weight_error: f64 = 0.0;
    for (t, (pixels, err)) in rendered.into_iter().enumerate() {
        max_weight_error = max_weight_error.max(err);
        for ((x, y), (v, best)) in tile_pixels(t, tiles_x, w, h).zip(pixels) {
            let i = y * w + x;
            image.data[3 * i..3 * i + 3].copy_from_slice(&v[..3]);
            alpha.data[i] = v[3];
            winner[i] = best;
        }
    }
    Ok(RenderOutput {
        image,
        alpha,
        max_weight_error,
        visible: order.len(),
        winner,
        state: ForwardState {
            cfg: *cfg,
            cam: *cam,
            k: *k,
            n: g.len(),
            splats,
            tiles,
            tiles_x,
        },
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianGrads {
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<Vector4<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub logit_opacity: Vec<f64>,
    pub colors: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MotionGrads {
    None,
    Field {
        rot6: Vec<[f64; 6]>,
        trans: Vec<Vector3<f64>>,
    },
    /// Indexed like the ratio slice.
    Ratios(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrads {
    pub gaussians: GaussianGrads,
    pub motion: MotionGrads,
    /// `[a1; a2; t]` of the world-to-camera pose.
    pub camera: [f64; 9],
}

struct PerGaussian {
    pos: Vector3<f64>,
    quat: Vector4<f64>,
    scale: Vector3<f64>,
    logit: f64,
    color: Vector3<f64>,
    rot6: [f64; 6],
    trans: Vector3<f64>,
    ratio: f64,
    g_w: Matrix3<f64>,
    g_tc: Vector3<f64>,
}

impl PerGaussian {
    fn zero() -> Self {
        Self {
            pos: Vector3::zeros(),
            quat: Vector4::zeros(),
            scale: Vector3::zeros(),
            logit: 0.0,
            color: Vector3::zeros(),
            rot6: [0.0; 6],
            trans: Vector3::zeros(),
            ratio: 0.0,
            g_w: Matrix3::zeros(),
            g_tc: Vector3::zeros(),
        }
    }
}

/// Reverse pass for a loss whose gradient with respect to the rendered
/// image is `grad_image` (interleaved RGB). The depth order is held fixed.
pub fn rasterize_backward(
    g: &GaussianSet,
    motion: &Motion,
    cam: &SE3Transform,
    k: &CameraIntrinsics,
    cfg: &RenderConfig,
    fwd: &RenderOutput,
    grad_image: &[f64],
) -> Result<RenderGrads> {
    let st = &fwd.state;
    if st.cfg != *cfg || st.cam != *cam || st.k != *k || st.n != g.len() {
        return Err(Error::StaleIntermediates(
            "backward called with a different scene, pose or config than the forward render".into(),
        ));
    }
    let (w, h) = k.dims();
    if grad_image.len() != 3 * w * h {
        return Err(Error::DimensionMismatch {
            entry: "grad_image".into(),
            expected: (w, h),
            found: (grad_image.len() / 3, 1),
        });
    }
    let motions = resolve_motion(g, motion)?;
    let bg = Vector3::from(cfg.background);

    // Screen-space gradients: mean(2), conic(3), opacity, color(3).
    let per_tile: Vec<Vec<[f64; 9]>> = st
        .tiles
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let mut buf = vec![[0.0; 9]; list.len()];
            let mut hits: Vec<(usize, f64, f64, f64, f64, f64)> = Vec::new();
            for (x, y) in tile_pixels(t, st.tiles_x, w, h) {
                let pi = 3 * (y * w + x);
                let gc = Vector3::new(grad_image[pi], grad_image[pi + 1], grad_image[pi + 2]);
                if gc == Vector3::zeros() {
                    continue;
                }
                hits.clear();
                let mut trans = 1.0;
                for_each_contributor(x, y, list, &st.splats, cfg, |j, _, alpha, gv, dx, dy| {
                    hits.push((j, alpha, gv, trans, dx, dy));
                    trans *= 1.0 - alpha;
                });
                // color composited behind the current Gaussian
                let mut behind = bg;
                for &(j, alpha, gv, t_i, dx, dy) in hits.iter().rev() {
                    let s = st.splats[list[j] as usize].as_ref().unwrap();
                    let e = &mut buf[j];
                    let wc = alpha * t_i;
                    e[6] += wc * gc.x;
                    e[7] += wc * gc.y;
                    e[8] += wc * gc.z;
                    let g_alpha = t_i * (s.color - behind).dot(&gc);
                    behind = s.color * alpha + behind * (1.0 - alpha);
                    e[5] += g_alpha * gv;
                    let g_power = g_alpha * s.opacity * gv;
                    let [a, b, c] = s.conic;
                    e[0] += g_power * (a * dx + b * dy);
                    e[1] += g_power * (b * dx + c * dy);
                    e[2] += -0.5 * dx * dx * g_power;
                    e[3] += -dx * dy * g_power;
                    e[4] += -0.5 * dy * dy * g_power;
                }
            }
            buf
        })
        .collect();

    let mut g2d = vec![[0.0; 9]; g.len()];
    for (list, buf) in st.tiles.iter().zip(&per_tile) {
        for (&gid, e) in list.iter().zip(buf) {
            let d = &mut g2d[gid as usize];
            for c in 0..9 {
                d[c] += e[c];
            }
        }
    }

    let wr = *cam.rotation();
    let per: Result<Vec<PerGaussian>> = (0..g.len())
        .into_par_iter()
        .map(|i| {
            let Some(_) = st.splats[i] else {
                return Ok(PerGaussian::zero());
            };
            let e = g2d[i];
            let m = motions.as_ref().map(|m| &m[i]);
            let wg = world_gaussian(g, i, m);
            let (p, t, j, cov_c) = project_cov(&wg.xw, &wg.sigma_w, cam, k, cfg.near_clip)?;
            let c = p.cov2d;
            let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(0, 1)];
            let q = Matrix2::new(c[(1, 1)], -c[(0, 1)], -c[(1, 0)], c[(0, 0)]) / det;
            let g_q = Matrix2::new(e[2], 0.5 * e[3], 0.5 * e[3], e[4]);
            let g_cov2 = -(q * g_q * q);
            let g_covc = j.transpose() * g_cov2 * j;
            let g_j = 2.0 * g_cov2 * j * cov_c;

            let (fx, fy) = (k.fx, k.fy);
            let iz = 1.0 / t.z;
            let iz2 = iz * iz;
            let mut g_t = j.transpose() * Vector2::new(e[0], e[1]);
            g_t.x += g_j[(0, 2)] * (-fx * iz2);
            g_t.y += g_j[(1, 2)] * (-fy * iz2);
            g_t.z += g_j[(0, 0)] * (-fx * iz2)
                + g_j[(0, 2)] * (2.0 * fx * t.x * iz2 * iz)
                + g_j[(1, 1)] * (-fy * iz2)
                + g_j[(1, 2)] * (2.0 * fy * t.y * iz2 * iz);

            let g_w = g_t * wg.xw.transpose() + 2.0 * g_covc * wr * wg.sigma_w;
            let g_xw = wr.transpose() * g_t;
            let g_sw = wr.transpose() * g_covc * wr;

            let mut out = PerGaussian::zero();
            out.g_w = g_w;
            out.g_tc = g_t;
            let g_s0 = match m {
                Some(m) => {
                    out.pos = m.a.transpose() * g_xw;
                    let g_a = g_xw * g.positions[i].transpose() + 2.0 * g_sw * m.a * wg.sigma0;
                    match motion {
                        Motion::Full(f) => {
                            out.rot6 = rot6d_backward(&f.rot6[i], &g_a)?;
                            out.trans = g_xw;
                        }
                        Motion::Ratios { .. } => {
                            if let Some((v, om)) = m.twist {
                                out.ratio = (g_a.component_mul(&(hat(&om) * m.a))).sum()
                                    + g_xw.dot(&(om.cross(&m.b) + v));
                            }
                        }
                        Motion::None => {}
                    }
                    m.a.transpose() * g_sw * m.a
                }
                None => {
                    out.pos = g_xw;
                    g_sw
                }
            };
            let g_rq = 2.0 * g_s0 * wg.rq * Matrix3::from_diagonal(&wg.s2);
            out.quat = quat_backward(&g.rotations[i], &g_rq);
            let local = wg.rq.transpose() * g_s0 * wg.rq;
            out.scale = Vector3::new(
                2.0 * wg.s2.x * local[(0, 0)],
                2.0 * wg.s2.y * local[(1, 1)],
                2.0 * wg.s2.z * local[(2, 2)],
            );
            let op = sigmoid(g.logit_opacity[i]);
            out.logit = e[5] * op * (1.0 - op);
            out.color = Vector3::new(e[6], e[7], e[8]);
            Ok(out)
        })
        .collect();
    let per = per?;

    let mut g_w = Matrix3::zeros();
    let mut g_tc = Vector3::zeros();
    let mut grads = GaussianGrads::default();
    let mut motion_grads = match motion {
        Motion::None => MotionGrads::None,
        Motion::Full(_) => MotionGrads::Field {
            rot6: Vec::with_capacity(g.len()),
            trans: Vec::with_capacity(g.len()),
        },
        Motion::Ratios { ratios, .. } => MotionGrads::Ratios(vec![0.0; ratios.len()]),
    };
    for (i, p) in per.into_iter().enumerate() {
        g_w += p.g_w;
        g_tc += p.g_tc;
        grads.positions.push(p.pos);
        grads.rotations.push(p.quat);
        grads.log_scales.push(p.scale);
        grads.logit_opacity.push(p.logit);
        grads.colors.push(p.color);
        match &mut motion_grads {
            MotionGrads::Field { rot6, trans } => {
                rot6.push(p.rot6);
                trans.push(p.trans);
            }
            MotionGrads::Ratios(r) => {
                let region = g.region_id[i] as usize;
                if region > 0 {
                    r[region] += p.ratio;
                }
            }
            MotionGrads::None => {}
        }
    }
    let g6 = rot6d_backward(cam.rotation6d(), &g_w)?;
    let mut camera = [0.0; 9];
    camera[..6].copy_from_slice(&g6);
    camera[6] = g_tc.x;
    camera[7] = g_tc.y;
    camera[8] = g_tc.z;
    Ok(RenderGrads {
        gaussians: grads,
        motion: motion_grads,
        camera,
    })
}
