//! Synthetic piecewise-rigid scenes built from Gaussians: a textured relief
//! wall plus textured spheres, rendered at times 0, 1 and an intermediate
//! ratio, with exact depth, flow and region maps.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project, CameraIntrinsics, Pixel, SE3Transform, Twist};
use crate::rng_stream;
use crate::se3field::{apply_field, MotionField};
use crate::splat::{matrix_to_quat, rasterize, GaussianSet, Motion, RenderConfig, RenderOutput};
use crate::tensorio::{
    save_manifest, EvalEntry, FlowMap, FrameEntries, LabelMap, Manifest, OracleEntry, PoseEntry, RgbImage,
    ScalarMap, Scene,
};

const WALL_DEPTH: f64 = 8.0;
const WALL_RELIEF: f64 = 0.6;
/// Wall Gaussian spacing in pixels at the wall depth.
const WALL_SPACING_PX: f64 = 1.5;
const OBJECT_DEPTH: (f64, f64) = (4.5, 6.0);
const BLOB_OPACITY: f64 = 0.99;
const MIN_COVERAGE: f64 = 0.95;
const MIN_OBJECT_PIXELS: usize = 30;
const PLACEMENT_TRIES: usize = 200;

const STREAM_LAYOUT: u64 = 1;
const STREAM_WALL: u64 = 2;
const STREAM_DEPTH_NOISE: u64 = 10;
const STREAM_FLOW_NOISE: u64 = 11;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectSpec {
    /// Gaussians on the sphere surface.
    pub blobs: usize,
    pub radius: f64,
    pub texture_seed: u64,
}

impl Default for ObjectSpec {
    fn default() -> Self {
        Self {
            blobs: 700,
            radius: 0.8,
            texture_seed: 0,
        }
    }
}

/// Corruption applied to an exact bundle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Mean relative depth error of the log-normal factor.
    pub depth: f64,
    /// Flow noise standard deviation in pixels.
    pub flow: f64,
    /// Mask morphology radius: positive dilates, negative erodes.
    pub mask: i32,
}

impl NoiseSpec {
    pub fn is_zero(&self) -> bool {
        self.depth == 0.0 && self.flow == 0.0 && self.mask == 0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.depth >= 0.0 && self.depth.is_finite()) || !(self.flow >= 0.0 && self.flow.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise levels must be >= 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub objects: Vec<ObjectSpec>,
    pub camera_rotation_deg: f64,
    pub camera_translation: f64,
    pub object_rotation_deg: f64,
    pub object_translation: f64,
    pub ratio: f64,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            objects: vec![ObjectSpec::default()],
            camera_rotation_deg: 2.0,
            camera_translation: 0.25,
            object_rotation_deg: 8.0,
            object_translation: 0.6,
            ratio: 0.5,
            noise: NoiseSpec::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mags = [
            self.camera_rotation_deg,
            self.camera_translation,
            self.object_rotation_deg,
            self.object_translation,
        ];
        if mags.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
            return Err(Error::InvalidParameter("motion magnitudes must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::InvalidParameter(format!("ratio {} outside [0, 1]", self.ratio)));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::InvalidParameter("image must be at least 8x8".into()));
        }
        if self.camera_rotation_deg >= 45.0 || self.object_rotation_deg >= 170.0 {
            return Err(Error::InvalidParameter("rotation magnitude too large".into()));
        }
        for o in &self.objects {
            if o.blobs < 20 || !(o.radius > 0.0) {
                return Err(Error::InvalidParameter(format!("object needs >= 20 blobs and radius > 0: {o:?}")));
            }
        }
        self.noise.validate()
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        let f = self.width as f64;
        CameraIntrinsics::new(
            f,
            f,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height,
        )
    }
}

/// Everything a generated scene knows about itself.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthBundle {
    pub config: SynthConfig,
    pub intrinsics: CameraIntrinsics,
    pub i0: RgbImage,
    pub i1: RgbImage,
    pub i_mid: RgbImage,
    pub d0: ScalarMap,
    pub d1: ScalarMap,
    pub flow_fwd: FlowMap,
    pub flow_bwd: FlowMap,
    pub labels0: LabelMap,
    pub labels1: LabelMap,
    pub gaussians: GaussianSet,
    pub field: MotionField,
    pub t_cam: SE3Transform,
    /// World motion of region `i + 1`.
    pub t_obj: Vec<SE3Transform>,
    pub t_cam_test: SE3Transform,
    pub ratio: f64,
}

pub const FILE_NAMES: [&str; 10] = [
    "manifest.json",
    "i0.pfm",
    "i1.pfm",
    "i_mid.pfm",
    "d0.pfm",
    "d1.pfm",
    "flow_fwd.flo",
    "flow_bwd.flo",
    "labels0.pgm",
    "labels1.pgm",
];

impl SynthBundle {
    /// Frame-0 camera to frame-1 camera motion of a region's points.
    pub fn region_motion(&self, region: u32) -> Result<SE3Transform> {
        if region == 0 {
            return Ok(self.t_cam);
        }
        let t = self.t_obj.get(region as usize - 1).ok_or(Error::UnknownRegion(region))?;
        Ok(self.t_cam.compose(t))
    }

    pub fn oracle(&self) -> OracleEntry {
        OracleEntry {
            t_cam: (&self.t_cam).into(),
            t_obj: self.t_obj.iter().map(PoseEntry::from).collect(),
            ratio: self.ratio,
            t_cam_test: Some((&self.t_cam_test).into()),
        }
    }

    pub fn manifest(&self) -> Manifest {
        let p = |i: usize| PathBuf::from(FILE_NAMES[i]);
        Manifest {
            intrinsics: self.intrinsics,
            frames: FrameEntries {
                i0: p(1),
                i1: p(2),
                d0: p(4),
                d1: p(5),
                flow_fwd: p(6),
                flow_bwd: Some(p(7)),
                labels: p(8),
                labels1: Some(p(9)),
            },
            eval: Some(EvalEntry { i_test: p(3) }),
            oracle: Some(self.oracle()),
        }
    }

    /// Writes the rasters and `manifest.json` into `dir`; returns the
    /// manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let f = |i: usize| dir.join(FILE_NAMES[i]);
        self.i0.write(&f(1))?;
        self.i1.write(&f(2))?;
        self.i_mid.write(&f(3))?;
        self.d0.write(&f(4))?;
        self.d1.write(&f(5))?;
        self.flow_fwd.write(&f(6))?;
        self.flow_bwd.write(&f(7))?;
        self.labels0.write(&f(8))?;
        self.labels1.write(&f(9))?;
        let path = f(0);
        save_manifest(&path, &self.manifest())?;
        Ok(path)
    }

    /// The bundle as a loaded scene, without a round trip through disk.
    pub fn scene(&self) -> Scene {
        let mut d0 = self.d0.clone();
        let mut d1 = self.d1.clone();
        for v in d0.data.iter_mut().chain(d1.data.iter_mut()) {
            if !(*v > 0.0) {
                *v = f64::NAN;
            }
        }
        Scene {
            manifest: self.manifest(),
            root: PathBuf::from("."),
            intrinsics: self.intrinsics,
            i0: self.i0.clone(),
            i1: self.i1.clone(),
            d0,
            d1,
            flow_fwd: self.flow_fwd.clone(),
            flow_bwd: Some(self.flow_bwd.clone()),
            labels: self.labels0.clone(),
            labels1: Some(self.labels1.clone()),
            i_test: Some(self.i_mid.clone()),
            relabeled: Vec::new(),
        }
    }

    pub fn scene_diameter(&self) -> f64 {
        scene_diameter(&self.d0, &self.intrinsics)
    }

    /// Ground-truth view at another ratio: every object and the camera at
    /// `ratio` along their screw paths. Returns the image and the camera.
    pub fn render_at(&self, ratio: f64) -> Result<(RgbImage, SE3Transform)> {
        let cam = self.t_cam.interpolate(ratio)?;
        let g = apply_field(&self.gaussians, &self.field, ratio)?;
        let out = rasterize(&g, &Motion::None, &cam, &self.intrinsics, &RenderConfig::default())?;
        Ok((out.image, cam))
    }
}

/// Bounding-box diagonal of the frame-0 points with valid depth.
pub fn scene_diameter(d0: &ScalarMap, k: &CameraIntrinsics) -> f64 {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for y in 0..d0.height {
        for x in 0..d0.width {
            let d = d0.get(x, y);
            if d > 0.0 && d.is_finite() {
                let p = k.bearing(&Pixel::new(x as f64, y as f64)) * d;
                lo = lo.inf(&p);
                hi = hi.sup(&p);
            }
        }
    }
    if lo.x > hi.x {
        return 0.0;
    }
    (hi - lo).norm()
}

fn unit_vector(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

fn random_motion(rng: &mut impl Rng, rotation_deg: f64, translation: f64) -> SE3Transform {
    let axis = unit_vector(rng);
    let dir = unit_vector(rng);
    let w = axis * rotation_deg.to_radians();
    let r = SE3Transform::exp(&Twist::new(0.0, 0.0, 0.0, w.x, w.y, w.z));
    SE3Transform::from_matrix(r.rotation(), dir * translation)
}

/// Quaternion turning the local z axis onto `normal`.
fn disk_rotation(normal: &Vector3<f64>) -> nalgebra::Vector4<f64> {
    let n = normal.normalize();
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let t1 = helper.cross(&n).normalize();
    let t2 = n.cross(&t1);
    matrix_to_quat(&Matrix3::from_columns(&[t1, t2, n]))
}

struct Wave {
    freq: Vector3<f64>,
    phase: f64,
    amp: f64,
}

fn waves(rng: &mut impl Rng, n: usize, fmin: f64, fmax: f64, amp: f64) -> Vec<Wave> {
    (0..n)
        .map(|_| Wave {
            freq: unit_vector(rng) * rng.random_range(fmin..fmax),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            amp: amp * rng.random_range(0.5..1.0),
        })
        .collect()
}

fn texture(base: &Vector3<f64>, channels: &[Vec<Wave>; 3], p: &Vector3<f64>) -> Vector3<f64> {
    Vector3::from_fn(|c, _| {
        let v = base[c] + channels[c].iter().map(|w| w.amp * (w.freq.dot(p) + w.phase).sin()).sum::<f64>();
        v.clamp(0.03, 0.97)
    })
}

fn wall_depth(x: f64, y: f64, ph: (f64, f64)) -> (f64, Vector3<f64>) {
    let (a, b) = (0.55, 0.45);
    let z = WALL_DEPTH + WALL_RELIEF * (a * x + ph.0).sin() * (b * y + ph.1).cos();
    let dzdx = WALL_RELIEF * a * (a * x + ph.0).cos() * (b * y + ph.1).cos();
    let dzdy = -WALL_RELIEF * b * (a * x + ph.0).sin() * (b * y + ph.1).sin();
    (z, Vector3::new(-dzdx, -dzdy, 1.0).normalize())
}

/// Half-extent of the wall patch that covers every camera's view.
fn wall_extent(k: &CameraIntrinsics, cams: &[SE3Transform]) -> Result<(f64, f64)> {
    let far = WALL_DEPTH + WALL_RELIEF;
    let (w, h) = k.dims();
    let corners = [(0.0, 0.0), (w as f64 - 1.0, 0.0), (0.0, h as f64 - 1.0), (w as f64 - 1.0, h as f64 - 1.0)];
    let (mut ex, mut ey) = (0.0f64, 0.0f64);
    for cam in cams {
        let inv = cam.inverse();
        let center = *inv.translation();
        for &(u, v) in &corners {
            for off in [-0.5, 0.5] {
                let d = inv.rotation() * k.bearing(&Pixel::new(u + off, v + off));
                if !(d.z > 1e-3) {
                    return Err(Error::ConfigInfeasible("a camera looks away from the background".into()));
                }
                let s = (far - center.z) / d.z;
                if !(s > 0.0) {
                    return Err(Error::ConfigInfeasible("a camera sits behind the background".into()));
                }
                let p = center + d * s;
                ex = ex.max(p.x.abs());
                ey = ey.max(p.y.abs());
            }
        }
    }
    Ok((ex, ey))
}

fn build_wall(k: &CameraIntrinsics, cams: &[SE3Transform], seed: u64, set: &mut GaussianSet) -> Result<()> {
    let mut rng = rng_stream(seed, STREAM_WALL);
    let ph = (rng.random_range(0.0..6.28), rng.random_range(0.0..6.28));
    let channels = [
        waves(&mut rng, 3, 0.8, 2.6, 0.16),
        waves(&mut rng, 3, 0.8, 2.6, 0.16),
        waves(&mut rng, 3, 0.8, 2.6, 0.16),
    ];
    let base = Vector3::new(rng.random_range(0.35..0.65), rng.random_range(0.35..0.65), rng.random_range(0.35..0.65));
    let spacing = WALL_SPACING_PX * WALL_DEPTH / k.fx.min(k.fy);
    let (ex, ey) = wall_extent(k, cams)?;
    let nx = ((ex + 3.0 * spacing) / spacing).ceil() as i64;
    let ny = ((ey + 3.0 * spacing) / spacing).ceil() as i64;
    let sigma = 0.75 * spacing;
    for iy in -ny..=ny {
        for ix in -nx..=nx {
            let (x, y) = (ix as f64 * spacing, iy as f64 * spacing);
            let (z, n) = wall_depth(x, y, ph);
            let p = Vector3::new(x, y, z);
            set.push(
                p,
                disk_rotation(&n),
                Vector3::new(sigma.ln(), sigma.ln(), (0.05 * sigma).ln()),
                BLOB_OPACITY,
                texture(&base, &channels, &p),
                0,
            );
        }
    }
    Ok(())
}

fn build_sphere(spec: &ObjectSpec, center: &Vector3<f64>, region: u32, set: &mut GaussianSet) {
    let mut rng = rng_stream(spec.texture_seed, region as u64);
    let base = Vector3::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8));
    let channels = [
        waves(&mut rng, 2, 2.0, 4.0, 0.18),
        waves(&mut rng, 2, 2.0, 4.0, 0.18),
        waves(&mut rng, 2, 2.0, 4.0, 0.18),
    ];
    let n = spec.blobs;
    let spacing = (4.0 * std::f64::consts::PI / n as f64).sqrt() * spec.radius;
    let sigma = 0.75 * spacing;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    for i in 0..n {
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - z * z).sqrt();
        let phi = golden * i as f64;
        let u = Vector3::new(r * phi.cos(), r * phi.sin(), z);
        set.push(
            center + u * spec.radius,
            disk_rotation(&u),
            Vector3::new(sigma.ln(), sigma.ln(), (0.05 * sigma).ln()),
            BLOB_OPACITY,
            texture(&base, &channels, &(u * 1.0)),
            region,
        );
    }
}

/// Whether a sphere stays inside the image with a one-pixel margin.
fn sphere_in_view(k: &CameraIntrinsics, cam: &SE3Transform, center: &Vector3<f64>, radius: f64) -> bool {
    let c = cam.apply(center);
    if c.z - radius < 1.0 {
        return false;
    }
    let Ok(p) = project(k, &c) else { return false };
    let rpx = k.fx.max(k.fy) * radius / (c.z - radius) + 1.0;
    let (w, h) = k.dims();
    p.x - rpx >= 0.0 && p.y - rpx >= 0.0 && p.x + rpx <= (w - 1) as f64 && p.y + rpx <= (h - 1) as f64
}

struct Placed {
    center: Vector3<f64>,
    motion: SE3Transform,
}

fn place_objects(
    cfg: &SynthConfig,
    k: &CameraIntrinsics,
    t_cam: &SE3Transform,
    t_cam_test: &SE3Transform,
    rng: &mut impl Rng,
) -> Result<Vec<Placed>> {
    let mut placed: Vec<Placed> = Vec::new();
    let (w, h) = k.dims();
    for (oi, spec) in cfg.objects.iter().enumerate() {
        let mut found = None;
        for _ in 0..PLACEMENT_TRIES {
            let depth = rng.random_range(OBJECT_DEPTH.0..OBJECT_DEPTH.1);
            let px = Pixel::new(rng.random_range(0.0..(w - 1) as f64), rng.random_range(0.0..(h - 1) as f64));
            let center = k.bearing(&px) * depth;
            let axis = unit_vector(rng);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let dir = Vector3::new(phi.cos(), phi.sin(), rng.random_range(-0.3..0.3)).normalize();
            let w_rot = axis * cfg.object_rotation_deg.to_radians();
            let rot = *SE3Transform::exp(&Twist::new(0.0, 0.0, 0.0, w_rot.x, w_rot.y, w_rot.z)).rotation();
            let motion = SE3Transform::from_matrix(&rot, center - rot * center + dir * cfg.object_translation);
            let at = |m: &SE3Transform, c: &Vector3<f64>, view: usize| -> Result<Vector3<f64>> {
                Ok(match view {
                    0 => *c,
                    1 => m.apply(c),
                    _ => m.interpolate(cfg.ratio)?.apply(c),
                })
            };
            let mut ok = true;
            for (view, cam) in [SE3Transform::identity(), *t_cam, *t_cam_test].iter().enumerate() {
                let c = at(&motion, &center, view)?;
                ok &= sphere_in_view(k, cam, &c, spec.radius);
                for (o, os) in placed.iter().zip(&cfg.objects) {
                    ok &= (at(&o.motion, &o.center, view)? - c).norm() > os.radius + spec.radius + 0.3;
                }
            }
            if ok {
                found = Some(Placed { center, motion });
                break;
            }
        }
        match found {
            Some(p) => placed.push(p),
            None => {
                return Err(Error::ConfigInfeasible(format!(
                    "object {} cannot stay in view of all three frames",
                    oi + 1
                )))
            }
        }
    }
    Ok(placed)
}

/// Depth along the pixel ray where the Gaussian density peaks, in the
/// camera frame.
fn ray_peak_depth(mean_c: &Vector3<f64>, inv_cov_c: &Matrix3<f64>, bearing: &Vector3<f64>) -> f64 {
    let a = inv_cov_c * bearing;
    a.dot(mean_c) / a.dot(bearing)
}

struct Frame {
    depth: ScalarMap,
    labels: LabelMap,
    /// Camera-frame surface point per pixel.
    points: Vec<Option<(Vector3<f64>, u32)>>,
}

fn frame_geometry(g: &GaussianSet, out: &RenderOutput, cam: &SE3Transform, k: &CameraIntrinsics) -> Frame {
    let (w, h) = k.dims();
    let mut depth = ScalarMap::filled(w, h, f64::NAN);
    let mut labels = LabelMap::new(w, h, vec![0; w * h]).expect("sized");
    let mut points = vec![None; w * h];
    let rc = cam.rotation();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let Some(win) = out.winner[i] else { continue };
            let win = win as usize;
            let mean_c = cam.apply(&g.positions[win]);
            let Some(inv) = g.covariance(win).try_inverse() else { continue };
            let inv_c = rc * inv * rc.transpose();
            let b = k.bearing(&Pixel::new(x as f64, y as f64));
            let d = ray_peak_depth(&mean_c, &inv_c, &b);
            if !(d > 0.0) {
                continue;
            }
            depth.set(x, y, d);
            labels.data[i] = g.region_id[win];
            points[i] = Some((b * d, g.region_id[win]));
        }
    }
    Frame { depth, labels, points }
}

fn flow_from(points: &[Option<(Vector3<f64>, u32)>], motions: &[SE3Transform], k: &CameraIntrinsics) -> Result<FlowMap> {
    let (w, h) = k.dims();
    let mut flow = FlowMap::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let Some((p, region)) = points[y * w + x] else { continue };
            let q = motions[region as usize].apply(&p);
            let uv = project(k, &q).map_err(|_| {
                Error::ConfigInfeasible(format!("pixel ({x}, {y}) moves behind the other camera"))
            })?;
            flow.set(x, y, uv - Vector2::new(x as f64, y as f64));
        }
    }
    Ok(flow)
}

fn check_coverage(name: &str, out: &RenderOutput) -> Result<()> {
    let min = out.alpha.data.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min >= MIN_COVERAGE) {
        return Err(Error::ConfigInfeasible(format!("{name} has uncovered pixels (alpha {min:.3})")));
    }
    Ok(())
}

/// Builds and renders an oracle scene, then applies `cfg.noise`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthBundle> {
    cfg.validate()?;
    let k = cfg.intrinsics()?;
    let mut rng = rng_stream(cfg.seed, STREAM_LAYOUT);
    let t_cam = random_motion(&mut rng, cfg.camera_rotation_deg, cfg.camera_translation);
    let t_cam_test = t_cam.interpolate(cfg.ratio)?;
    let placed = place_objects(cfg, &k, &t_cam, &t_cam_test, &mut rng)?;

    let mut g = GaussianSet::default();
    build_wall(&k, &[SE3Transform::identity(), t_cam, t_cam_test], cfg.seed, &mut g)?;
    for (i, (spec, p)) in cfg.objects.iter().zip(&placed).enumerate() {
        build_sphere(spec, &p.center, i as u32 + 1, &mut g);
    }
    let t_obj: Vec<SE3Transform> = placed.iter().map(|p| p.motion).collect();
    let mut field = MotionField::identity(&g);
    for i in 0..g.len() {
        let r = g.region_id[i] as usize;
        if r > 0 {
            field.rot6[i] = *t_obj[r - 1].rotation6d();
            field.trans[i] = *t_obj[r - 1].translation();
        }
    }

    let rc = RenderConfig::default();
    let g1 = apply_field(&g, &field, 1.0)?;
    let g_mid = apply_field(&g, &field, cfg.ratio)?;
    let out0 = rasterize(&g, &Motion::None, &SE3Transform::identity(), &k, &rc)?;
    let out1 = rasterize(&g1, &Motion::None, &t_cam, &k, &rc)?;
    let out_mid = rasterize(&g_mid, &Motion::None, &t_cam_test, &k, &rc)?;
    check_coverage("frame 0", &out0)?;
    check_coverage("frame 1", &out1)?;
    check_coverage("the intermediate frame", &out_mid)?;

    let f0 = frame_geometry(&g, &out0, &SE3Transform::identity(), &k);
    let f1 = frame_geometry(&g1, &out1, &t_cam, &k);
    for region in 1..=cfg.objects.len() as u32 {
        let (c0, c1) = (f0.labels.count(region), f1.labels.count(region));
        if c0 < MIN_OBJECT_PIXELS || c1 < MIN_OBJECT_PIXELS {
            return Err(Error::ConfigInfeasible(format!(
                "object {region} covers {c0} / {c1} pixels in frames 0 / 1"
            )));
        }
    }
    let fwd: Vec<SE3Transform> = std::iter::once(t_cam).chain(t_obj.iter().map(|t| t_cam.compose(t))).collect();
    let bwd: Vec<SE3Transform> = fwd.iter().map(SE3Transform::inverse).collect();
    let flow_fwd = flow_from(&f0.points, &fwd, &k)?;
    let flow_bwd = flow_from(&f1.points, &bwd, &k)?;

    let exact = SynthBundle {
        config: cfg.clone(),
        intrinsics: k,
        i0: out0.image,
        i1: out1.image,
        i_mid: out_mid.image,
        d0: f0.depth,
        d1: f1.depth,
        flow_fwd,
        flow_bwd,
        labels0: f0.labels,
        labels1: f1.labels,
        gaussians: g,
        field,
        t_cam,
        t_obj,
        t_cam_test,
        ratio: cfg.ratio,
    };
    perturb(&exact, &cfg.noise, cfg.seed)
}

/// Log-normal depth noise, Gaussian flow noise and mask morphology. The
/// ground-truth fields are left untouched.
pub fn perturb(bundle: &SynthBundle, noise: &NoiseSpec, seed: u64) -> Result<SynthBundle> {
    noise.validate()?;
    let mut out = bundle.clone();
    if noise.is_zero() {
        return Ok(out);
    }
    if noise.depth > 0.0 {
        // E|exp(s z) - 1| ~ s sqrt(2 / pi) for small s
        let sigma = noise.depth * (std::f64::consts::PI / 2.0).sqrt();
        let mut rng = rng_stream(seed, STREAM_DEPTH_NOISE);
        for v in out.d0.data.iter_mut().chain(out.d1.data.iter_mut()) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v *= (sigma * z).exp();
        }
    }
    if noise.flow > 0.0 {
        let mut rng = rng_stream(seed, STREAM_FLOW_NOISE);
        for v in out.flow_fwd.data.iter_mut().chain(out.flow_bwd.data.iter_mut()) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += noise.flow * z;
        }
    }
    if noise.mask != 0 {
        out.labels0 = morph(&out.labels0, noise.mask);
        out.labels1 = morph(&out.labels1, noise.mask);
    }
    Ok(out)
}

/// Square-window erosion (`radius < 0`) or dilation (`radius > 0`) of the
/// dynamic regions. Dilation hands a static pixel to the nearest dynamic
/// label, ties to the smaller id.
pub fn morph(labels: &LabelMap, radius: i32) -> LabelMap {
    let (w, h) = labels.dims();
    let r = radius.unsigned_abs() as i64;
    let mut out = labels.clone();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let here = labels.data[(y * w as i64 + x) as usize];
            let mut best: Option<(i64, u32)> = None;
            let mut mixed = false;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (xx, yy) = (x + dx, y + dy);
                    if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                        continue;
                    }
                    let l = labels.data[(yy * w as i64 + xx) as usize];
                    if l != here {
                        mixed = true;
                    }
                    if l != 0 {
                        let key = (dx * dx + dy * dy, l);
                        if best.is_none_or(|b| key < b) {
                            best = Some(key);
                        }
                    }
                }
            }
            let i = (y * w as i64 + x) as usize;
            if radius < 0 && here != 0 && mixed {
                out.data[i] = 0;
            } else if radius > 0 && here == 0 {
                if let Some((_, l)) = best {
                    out.data[i] = l;
                }
            }
        }
    }
    out
}
