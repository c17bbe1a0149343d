//! End-to-end acceptance suite. Runs every criterion in sequence, prints one
//! PASS/FAIL line per criterion with its runtime, then fails if any did.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use dynsplat::correspondence::ConsistencyParams;
use dynsplat::dense_ba::{initialize_poses, run_ba, BAInputs, BAParams, BAProblem, BAState};
use dynsplat::geometry::{rotation_distance, se3_interpolate, CameraIntrinsics, Pixel, Rotation6D, SE3Transform};
use dynsplat::init_pnp::{ransac_pnp, RansacParams, RegionCorrespondences};
use dynsplat::se3field::{load_checkpoint, AlignResult, MotionField};
use dynsplat::splat::{image_loss, rasterize, rasterize_backward, GaussianSet, Motion, MotionGrads, RenderConfig};
use dynsplat::synthgen::{generate, NoiseSpec, SynthConfig};
use dynsplat::tensorio::{load_manifest, FlowMap, LabelMap, PoseEntry, ScalarMap};
use dynsplat_cli::{stage_seed, RunReport, Stage};
use nalgebra::{Vector3, Vector4, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// Bypasses the test harness's output capture.
fn say(line: String) {
    let _ = writeln!(std::io::stderr().lock(), "{line}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_twist(r: &mut ChaCha8Rng, max_angle: f64, max_trans: f64) -> SE3Transform {
    let axis = Vector3::from_fn(|_, _| r.random_range(-1.0..1.0)).normalize();
    let w = axis * r.random_range(0.0..max_angle);
    let v = Vector3::from_fn(|_, _| r.random_range(-1.0..1.0)) * max_trans;
    SE3Transform::exp(&Vector6::new(v.x, v.y, v.z, w.x, w.y, w.z))
}

fn pose_diff(a: &SE3Transform, b: &SE3Transform) -> (f64, f64) {
    (
        rotation_distance(a.rotation(), b.rotation()),
        (a.translation() - b.translation()).norm(),
    )
}

fn matrix_diff(a: &SE3Transform, b: &SE3Transform) -> f64 {
    let r = (a.rotation() - b.rotation()).amax();
    let t = (a.translation() - b.translation()).amax();
    r.max(t)
}

fn group_laws() -> Outcome {
    const N: usize = 200;
    let mut r = rng(1);
    let mut worst = [0.0f64; 7];
    for _ in 0..N {
        let a = random_twist(&mut r, 3.0, 2.0);
        let b = random_twist(&mut r, 3.0, 2.0);
        let c = random_twist(&mut r, 3.0, 2.0);
        let id = SE3Transform::identity();
        worst[0] = worst[0].max(matrix_diff(&a.compose(&b).compose(&c), &a.compose(&b.compose(&c))));
        worst[1] = worst[1].max(matrix_diff(&a.compose(&id), &a).max(matrix_diff(&id.compose(&a), &a)));
        worst[2] = worst[2].max(matrix_diff(&a.compose(&a.inverse()), &id).max(matrix_diff(&a.inverse().compose(&a), &id)));

        let p = Vector3::from_fn(|_, _| r.random_range(-5.0..5.0));
        let q = Vector3::from_fn(|_, _| r.random_range(-5.0..5.0));
        worst[3] = worst[3].max(((a.apply(&p) - a.apply(&q)).norm() - (p - q).norm()).abs());

        let t = random_twist(&mut r, 3.0, 2.0);
        let back = SE3Transform::exp(&t.log().map_err(|e| e.to_string())?);
        worst[4] = worst[4].max(matrix_diff(&back, &t));

        let rot = *random_twist(&mut r, 3.1, 0.0).rotation();
        let six = Rotation6D::from_matrix(&rot);
        worst[5] = worst[5].max((six.to_matrix().map_err(|e| e.to_string())? - rot).amax());

        let s = random_twist(&mut r, 2.0, 2.0);
        let x = r.random_range(0.0..1.0);
        let y = r.random_range(0.0..1.0 - x);
        let lhs = se3_interpolate(&s, x + y).map_err(|e| e.to_string())?;
        let rhs = se3_interpolate(&s, x)
            .and_then(|u| Ok(u.compose(&se3_interpolate(&s, y)?)))
            .map_err(|e| e.to_string())?;
        let half = se3_interpolate(&s, 0.5).map_err(|e| e.to_string())?;
        worst[6] = worst[6].max(matrix_diff(&lhs, &rhs)).max(matrix_diff(&half.compose(&half), &s));
    }
    let names = ["assoc", "identity", "inverse", "isometry", "exp-log", "6d", "subgroup"];
    let tol = [1e-9, 1e-9, 1e-9, 1e-9, 1e-8, 1e-9, 1e-7];
    for i in 0..7 {
        ensure!(worst[i] < tol[i], "{} error {:e} exceeds {:e}", names[i], worst[i], tol[i]);
    }
    let d: Vec<String> = names.iter().zip(&worst).map(|(n, w)| format!("{n} {w:.1e}")).collect();
    Ok(format!("{N} samples; max errors: {}", d.join(", ")))
}

fn rel_err(an: f64, num: f64) -> f64 {
    (an - num).abs() / an.abs().max(num.abs()).max(1e-6)
}

fn random_gaussians(n: usize, seed: u64) -> GaussianSet {
    let mut r = rng(seed);
    let mut g = GaussianSet::default();
    for i in 0..n {
        g.push(
            Vector3::new(r.random_range(-1.2..1.2), r.random_range(-1.2..1.2), 3.0 + 0.04 * i as f64),
            Vector4::from_fn(|_, _| r.random_range(-1.0..1.0)),
            Vector3::from_fn(|_, _| r.random_range(-2.6..-1.6)),
            r.random_range(0.2..0.9),
            Vector3::from_fn(|_, _| r.random_range(0.0..1.0)),
            (i % 3) as u32,
        );
    }
    g
}

fn random_field(g: &GaussianSet, seed: u64) -> MotionField {
    let mut r = rng(seed);
    let mut f = MotionField::default();
    for &region in &g.region_id {
        let t = random_twist(&mut r, 0.15, 0.1);
        let mut a = t.rotation6d().to_array();
        a[0] *= 1.1;
        a[4] += 0.05;
        f.rot6.push(Rotation6D::from_array(a));
        f.trans.push(*t.translation());
        f.region_id.push(region);
    }
    f
}

/// Finite differences of a scalar function of one parameter.
fn fd(mut eval: impl FnMut(f64) -> f64, x: f64) -> f64 {
    let h = 1e-5 * x.abs().max(1.0);
    (eval(x + h) - eval(x - h)) / (2.0 * h)
}

fn splat_gradients() -> Result<(usize, f64), String> {
    let k = CameraIntrinsics::new(32.0, 32.0, 15.5, 15.5, 32, 32).map_err(|e| e.to_string())?;
    let rc = RenderConfig {
        gaussian_extent: 9.0,
        alpha_threshold: 0.0,
        background: [0.2, 0.1, 0.4],
        ..Default::default()
    };
    let g = random_gaussians(50, 21);
    let f = random_field(&g, 22);
    let cam = SE3Transform::exp(&Vector6::new(0.05, -0.03, 0.1, 0.02, -0.04, 0.01));
    let mut r = rng(23);
    let weights: Vec<f64> = (0..3 * 32 * 32).map(|_| r.random_range(-1.0..1.0)).collect();
    let render = |g: &GaussianSet, m: &Motion, cam: &SE3Transform| rasterize(g, m, cam, &k, &rc).unwrap();
    let loss = |g: &GaussianSet, f: &MotionField, cam: &SE3Transform| -> f64 {
        let img = render(g, &Motion::Full(f), cam).image;
        img.data.iter().zip(&weights).map(|(a, b)| a * b).sum()
    };
    let out = render(&g, &Motion::Full(&f), &cam);
    let gr = rasterize_backward(&g, &Motion::Full(&f), &cam, &k, &rc, &out, &weights).map_err(|e| e.to_string())?;
    let MotionGrads::Field { rot6, trans } = &gr.motion else {
        return Err("field gradients missing".into());
    };
    let (mut checked, mut worst) = (0usize, 0.0f64);
    let mut note = |what: &str, an: f64, num: f64| -> Result<(), String> {
        let e = rel_err(an, num);
        worst = worst.max(e);
        checked += 1;
        ensure!(e < 1e-3, "splat {what}: analytic {an} numeric {num}");
        Ok(())
    };
    for i in 0..g.len() {
        for c in 0..3 {
            let num = fd(|v| { let mut a = g.clone(); a.positions[i][c] = v; loss(&a, &f, &cam) }, g.positions[i][c]);
            note("position", gr.gaussians.positions[i][c], num)?;
            let num = fd(|v| { let mut a = g.clone(); a.log_scales[i][c] = v; loss(&a, &f, &cam) }, g.log_scales[i][c]);
            note("log-scale", gr.gaussians.log_scales[i][c], num)?;
            let num = fd(|v| { let mut a = g.clone(); a.colors[i][c] = v; loss(&a, &f, &cam) }, g.colors[i][c]);
            note("color", gr.gaussians.colors[i][c], num)?;
            let num = fd(|v| { let mut a = f.clone(); a.trans[i][c] = v; loss(&g, &a, &cam) }, f.trans[i][c]);
            note("field translation", trans[i][c], num)?;
        }
        for c in 0..4 {
            let num = fd(|v| { let mut a = g.clone(); a.rotations[i][c] = v; loss(&a, &f, &cam) }, g.rotations[i][c]);
            note("quaternion", gr.gaussians.rotations[i][c], num)?;
        }
        for c in 0..6 {
            let base = f.rot6[i].to_array();
            let num = fd(
                |v| {
                    let mut a = f.clone();
                    let mut arr = base;
                    arr[c] = v;
                    a.rot6[i] = Rotation6D::from_array(arr);
                    loss(&g, &a, &cam)
                },
                base[c],
            );
            note("field rotation", rot6[i][c], num)?;
        }
        let num = fd(|v| { let mut a = g.clone(); a.logit_opacity[i] = v; loss(&a, &f, &cam) }, g.logit_opacity[i]);
        note("opacity", gr.gaussians.logit_opacity[i], num)?;
    }
    let p = cam.to_params();
    for c in 0..9 {
        let num = fd(
            |v| {
                let mut a = p;
                a[c] = v;
                loss(&g, &f, &SE3Transform::from_params(&a).unwrap())
            },
            p[c],
        );
        note("camera", gr.camera[c], num)?;
    }

    let ratios = [0.0, 0.3, 0.7];
    let m = Motion::Ratios { field: &f, ratios: &ratios };
    let out = render(&g, &m, &cam);
    let gr = rasterize_backward(&g, &m, &cam, &k, &rc, &out, &weights).map_err(|e| e.to_string())?;
    let MotionGrads::Ratios(an) = gr.motion else {
        return Err("ratio gradients missing".into());
    };
    for reg in 1..3 {
        let num = fd(
            |v| {
                let mut rs = ratios;
                rs[reg] = v;
                let img = render(&g, &Motion::Ratios { field: &f, ratios: &rs }, &cam).image;
                img.data.iter().zip(&weights).map(|(a, b)| a * b).sum()
            },
            ratios[reg],
        );
        note("ratio", an[reg], num)?;
    }

    let target = render(&random_gaussians(50, 24), &Motion::None, &SE3Transform::identity()).image;
    let (_, grad) = image_loss(&out.image, &target, rc.dssim_weight).map_err(|e| e.to_string())?;
    for idx in (0..out.image.data.len()).step_by(7) {
        if (out.image.data[idx] - target.data[idx]).abs() < 1e-3 {
            continue;
        }
        let num = fd(
            |v| {
                let mut img = out.image.clone();
                img.data[idx] = v;
                image_loss(&img, &target, rc.dssim_weight).unwrap().0
            },
            out.image.data[idx],
        );
        note("image loss", grad[idx], num)?;
    }
    Ok((checked, worst))
}

/// 14 x 14 pixels, right third dynamic, exact flow from `motions`.
fn ba_toy(motions: &[SE3Transform], seed: u64) -> BAInputs {
    const W: usize = 14;
    const H: usize = 14;
    let k = CameraIntrinsics::new(20.0, 20.0, 6.5, 6.5, W, H).unwrap();
    let mut r = rng(seed);
    let mut d0 = ScalarMap::filled(W, H, 0.0);
    let mut labels = vec![0u32; W * H];
    let mut fwd = FlowMap::zeros(W, H);
    let mut bwd = FlowMap::zeros(W, H);
    for y in 0..H {
        for x in 0..W {
            let d = 3.0 + 0.1 * x as f64 + r.random_range(0.0..0.2);
            d0.set(x, y, d);
            let region = usize::from(x >= 2 * W / 3);
            labels[y * W + x] = region as u32;
            let p0 = Pixel::new(x as f64, y as f64);
            let p1 = dynsplat::geometry::project(&k, &motions[region].apply(&dynsplat::geometry::unproject(&k, &p0, d).unwrap()))
                .unwrap();
            fwd.set(x, y, p1 - p0);
            bwd.set(x, y, p0 - p1);
        }
    }
    BAInputs {
        k,
        labels0: LabelMap::new(W, H, labels).unwrap(),
        labels1: None,
        d1: d0.clone(),
        d0,
        flow_fwd: fwd,
        flow_bwd: Some(bwd),
        w_fwd: ScalarMap::filled(W, H, 1.0),
        w_bwd: Some(ScalarMap::filled(W, H, 1.0)),
    }
}

fn ba_gradients() -> Result<(usize, f64), String> {
    let motions = [
        SE3Transform::exp(&Vector6::new(0.05, -0.02, 0.03, 0.01, 0.02, -0.01)),
        SE3Transform::exp(&Vector6::new(-0.1, 0.05, 0.02, -0.03, 0.01, 0.04)),
    ];
    let inputs = ba_toy(&motions, 31);
    let params = BAParams::default();
    let problem = BAProblem::new(&inputs, true).map_err(|e| e.to_string())?;
    let mut r = rng(32);
    let (mut checked, mut worst) = (0usize, 0.0f64);
    for _ in 0..2 {
        let mut state = BAState::initial(&inputs, &motions, true);
        for p in &mut state.poses {
            p.iter_mut().for_each(|v| *v += r.random_range(-0.05..0.05));
        }
        for v in state.log_depth0.iter_mut().chain(state.log_depth1.as_mut().unwrap()) {
            *v += r.random_range(-0.1..0.1);
        }
        state.scale_shift.iter_mut().for_each(|v| *v += r.random_range(-0.2..0.2));
        let f = |s: &BAState| problem.evaluate(s, &params).unwrap().smooth.total;
        let g = problem.evaluate(&state, &params).map_err(|e| e.to_string())?.grad;
        let fd_at = |set: &dyn Fn(&mut BAState, f64), x: f64| {
            let h = 1e-6 * x.abs().max(1.0);
            let mut a = state.clone();
            set(&mut a, x + h);
            let mut b = state.clone();
            set(&mut b, x - h);
            (f(&a) - f(&b)) / (2.0 * h)
        };
        let mut note = |what: &str, an: f64, num: f64| -> Result<(), String> {
            let e = rel_err(an, num);
            worst = worst.max(e);
            checked += 1;
            ensure!(e < 1e-3, "BA {what}: analytic {an} numeric {num}");
            Ok(())
        };
        for reg in 0..state.poses.len() {
            for j in 0..9 {
                note("pose", g.poses[reg][j], fd_at(&|s, v| s.poses[reg][j] = v, state.poses[reg][j]))?;
            }
        }
        for j in 0..4 {
            note("scale/shift", g.scale_shift[j], fd_at(&|s, v| s.scale_shift[j] = v, state.scale_shift[j]))?;
        }
        for i in 0..state.log_depth0.len() {
            note("depth0", g.log_depth0[i], fd_at(&|s, v| s.log_depth0[i] = v, state.log_depth0[i]))?;
            let ld1 = state.log_depth1.as_ref().unwrap()[i];
            let an = g.log_depth1.as_ref().unwrap()[i];
            note("depth1", an, fd_at(&|s, v| s.log_depth1.as_mut().unwrap()[i] = v, ld1))?;
        }
    }
    Ok((checked, worst))
}

fn gradient_oracle() -> Outcome {
    let (ns, ws) = splat_gradients()?;
    let (nb, wb) = ba_gradients()?;
    Ok(format!("splat {ns} partials (max rel {ws:.1e}), BA {nb} partials over 196 px (max rel {wb:.1e})"))
}

fn oracle_pose_recovery() -> Outcome {
    let b = generate(&SynthConfig::default()).map_err(|e| e.to_string())?;
    ensure!(b.t_obj.len() == 1, "expected one dynamic object");
    let inputs = BAInputs::from_scene(&b.scene(), &ConsistencyParams::default()).map_err(|e| e.to_string())?;
    let (init, _) = initialize_poses(&inputs, &RansacParams::default()).map_err(|e| e.to_string())?;
    let params = BAParams::default();
    let res = run_ba(&inputs, &init, &params).map_err(|e| e.to_string())?;
    let ident = vec![SE3Transform::identity(); inputs.num_regions()];
    let problem = BAProblem::new(&inputs, params.bidirectional).map_err(|e| e.to_string())?;
    let initial = problem
        .evaluate(&BAState::initial(&inputs, &ident, params.bidirectional), &params)
        .map_err(|e| e.to_string())?
        .l1
        .total;
    let diam = b.scene_diameter();
    let (rc, tc) = pose_diff(&res.t_cam, &b.t_cam);
    let (ro, to) = pose_diff(&res.t_obj[0], &b.t_obj[0]);
    let (rc, ro) = (rc.to_degrees(), ro.to_degrees());
    let ratio = res.final_losses.total / initial;
    ensure!(rc < 0.2 && ro < 0.2, "rotation errors {rc:.4} / {ro:.4} deg");
    ensure!(tc < 0.01 * diam && to < 0.01 * diam, "translation errors {tc:.4} / {to:.4}, diameter {diam:.3}");
    ensure!(ratio <= 1e-2, "final/initial loss {ratio:.2e}");
    Ok(format!(
        "camera {rc:.4} deg {:.4}%, object {ro:.4} deg {:.4}%, loss {:.3} / {initial:.1} = {ratio:.1e}",
        100.0 * tc / diam,
        100.0 * to / diam,
        res.final_losses.total
    ))
}

fn robust_initialization() -> Outcome {
    let k = CameraIntrinsics::new(64.0, 64.0, 31.5, 31.5, 64, 64).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let mut r = rng(100 + seed);
        let truth = random_twist(&mut r, 0.2, 0.3);
        let mut c = RegionCorrespondences {
            region_id: 0,
            points3d: vec![],
            pixels0: vec![],
            pixels1: vec![],
            weights: vec![],
        };
        while c.points3d.len() < 400 {
            let p0 = Pixel::new(r.random_range(0.0..63.0), r.random_range(0.0..63.0));
            let x = dynsplat::geometry::unproject(&k, &p0, r.random_range(3.0..8.0)).unwrap();
            let Ok(p1) = dynsplat::geometry::project(&k, &truth.apply(&x)) else { continue };
            c.points3d.push(x);
            c.pixels0.push(p0);
            c.pixels1.push(p1);
            c.weights.push(1.0);
        }
        let n = c.len();
        for i in 0..(3 * n / 10) {
            c.pixels1[i] = Pixel::new(r.random_range(0.0..63.0), r.random_range(0.0..63.0));
        }
        let params = RansacParams { seed, ..Default::default() };
        let (a, mask_a) = ransac_pnp(&c, &k, &params).map_err(|e| e.to_string())?;
        let (b, mask_b) = ransac_pnp(&c, &k, &params).map_err(|e| e.to_string())?;
        ensure!(a == b && mask_a == mask_b, "seed {seed}: repeated runs differ");
        let err = rotation_distance(a.rotation(), truth.rotation()).to_degrees();
        ensure!(err < 0.1, "seed {seed}: rotation error {err:.4} deg");
        worst = worst.max(err);
    }
    Ok(format!("5 seeds, 30% outliers, max rotation error {worst:.2e} deg, repeat runs identical"))
}

fn occlude_fraction(w_fwd: &mut ScalarMap, start: usize, fraction: f64) -> usize {
    let (w, h) = w_fwd.dims();
    let valid = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| w_fwd.get(x, y) > 0.0)
        .count();
    let target = (valid as f64 * fraction).ceil() as usize;
    let mut zeroed = 0;
    for x in (start..w).chain(0..start) {
        for y in 0..h {
            if zeroed < target && w_fwd.get(x, y) > 0.0 {
                w_fwd.set(x, y, 0.0);
                zeroed += 1;
            }
        }
    }
    zeroed * 1000 / valid
}

fn bidirectional_ablation() -> Outcome {
    let mut lines = Vec::new();
    let (mut sum_bi, mut sum_fwd, mut wins) = (0.0, 0.0, 0);
    for seed in 0..5u64 {
        let cfg = SynthConfig {
            seed: 500 + seed,
            noise: NoiseSpec {
                depth: 0.05,
                flow: 0.0,
                mask: 0,
            },
            ..Default::default()
        };
        let b = generate(&cfg).map_err(|e| e.to_string())?;
        let mut inputs = BAInputs::from_scene(&b.scene(), &ConsistencyParams::default()).map_err(|e| e.to_string())?;
        let (w, _) = inputs.k.dims();
        let permille = occlude_fraction(&mut inputs.w_fwd, (seed as usize * 7) % w, 0.2);
        ensure!((200..=201).contains(&permille), "scene {seed}: occluded {permille} permille");
        let (init, _) = initialize_poses(&inputs, &RansacParams::default()).map_err(|e| e.to_string())?;
        let run = |bidirectional: bool| -> Result<f64, String> {
            let p = BAParams { bidirectional, ..Default::default() };
            let r = run_ba(&inputs, &init, &p).map_err(|e| e.to_string())?;
            Ok(rotation_distance(r.t_cam.rotation(), b.t_cam.rotation()).to_degrees())
        };
        let (bi, fwd) = (run(true)?, run(false)?);
        sum_bi += bi;
        sum_fwd += fwd;
        wins += usize::from(bi <= fwd);
        lines.push(format!("{bi:.4}/{fwd:.4}"));
    }
    let (bi, fwd) = (sum_bi / 5.0, sum_fwd / 5.0);
    let detail = format!(
        "camera rotation error deg (bi/fwd) {}; mean {bi:.4} vs {fwd:.4}; bidirectional no worse on {wins}/5 scenes",
        lines.join(" ")
    );
    ensure!(bi <= fwd, "{detail}");
    Ok(detail)
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dynsplat"))
}

fn run_cli(args: &[&str], threads: Option<usize>) -> Result<Value, String> {
    let mut cmd = bin();
    cmd.args(args);
    if let Some(n) = threads {
        cmd.env(dynsplat_cli::THREADS_ENV, n.to_string());
    }
    let out = cmd.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("dynsplat {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn write_config(dir: &Path, name: &str, v: Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    p
}

fn read_report(dir: &Path) -> Result<RunReport, String> {
    let text = std::fs::read_to_string(dir.join("report.json")).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn pipeline(config: &Path, out: &Path, seed: u64, extra: &[&str], threads: Option<usize>) -> Result<(RunReport, Duration), String> {
    let seed = seed.to_string();
    let mut args = vec!["pipeline", "--config", path_str(config), "--out", path_str(out), "--seed", &seed];
    args.extend_from_slice(extra);
    let t = Instant::now();
    run_cli(&args, threads)?;
    Ok((read_report(out)?, t.elapsed()))
}

fn test_psnr(r: &RunReport) -> Result<f64, String> {
    r.test.map(|m| m.psnr).ok_or_else(|| "report has no test metrics".into())
}

/// Scene with its oracle mid-frame at ratio 0.3, trained once with the full
/// method and once without field initialization.
struct SceneA {
    dir: PathBuf,
    seed: u64,
    full: RunReport,
    full_time: Duration,
    no_se3: RunReport,
}

const SEED_A: u64 = 1;
const SEED_B: u64 = 1;

fn scene_a(root: &Path) -> Result<SceneA, String> {
    let cfg = write_config(root, "scene_a.json", serde_json::json!({ "synth": { "ratio": 0.3 } }));
    let dir = root.join("a_full");
    let (full, full_time) = pipeline(&cfg, &dir, SEED_A, &[], None)?;
    let (no_se3, _) = pipeline(&cfg, &root.join("a_no_se3"), SEED_A, &["--no-se3-init"], None)?;
    Ok(SceneA {
        dir,
        seed: SEED_A,
        full,
        full_time,
        no_se3,
    })
}

fn training_fit(a: &SceneA) -> Outcome {
    let t = &a.full.train;
    let (p0, p1) = (t.frame0.psnr, t.frame1.psnr);
    ensure!(t.loss_curve.len() == 1000, "trained {} iterations", t.loss_curve.len());
    ensure!(t.gaussians <= 8000, "{} Gaussians", t.gaussians);
    ensure!(p0 >= 35.0 && p1 >= 35.0, "PSNR {p0:.2} / {p1:.2} dB");
    ensure!(t.max_weight_error <= 1e-6, "weight normalization error {:e}", t.max_weight_error);
    ensure!(a.full_time < Duration::from_secs(600), "pipeline took {:?}", a.full_time);
    Ok(format!(
        "PSNR I0 {p0:.2} dB, I1 {p1:.2} dB, {} Gaussians, max weight error {:.1e}, full pipeline {:.0} s",
        t.gaussians,
        t.max_weight_error,
        a.full_time.as_secs_f64()
    ))
}

fn mid_frame_synthesis(a: &SceneA) -> Outcome {
    let cfg = SynthConfig {
        ratio: 0.3,
        seed: stage_seed(a.seed, Stage::Synth),
        ..Default::default()
    };
    let b = generate(&cfg).map_err(|e| e.to_string())?;
    let written = load_manifest(&a.dir.join("scene/manifest.json")).map_err(|e| e.to_string())?;
    ensure!(written.manifest.oracle.as_ref().map(|o| o.ratio) == Some(0.3), "scene ratio differs");
    ensure!(written.manifest.oracle == Some(b.oracle()), "regenerated scene differs from the pipeline's");
    let (mid, pose) = b.render_at(0.5).map_err(|e| e.to_string())?;
    let target = a.dir.join("mid05.pfm");
    mid.write(&target).map_err(|e| e.to_string())?;
    let pose_path = write_config(&a.dir, "mid05_pose.json", serde_json::to_value(PoseEntry::from(&pose)).unwrap());
    let out = run_cli(
        &[
            "render",
            "--checkpoint",
            path_str(&a.dir.join("model.dspl")),
            "--pose",
            path_str(&pose_path),
            "--ratio",
            "0.5",
            "--target",
            path_str(&target),
            "--out",
            path_str(&a.dir.join("mid05.png")),
        ],
        None,
    )?;
    let psnr = out["metrics"]["psnr"].as_f64().ok_or("render reported no metrics")?;
    ensure!(psnr >= 30.0, "mid-frame PSNR {psnr:.2} dB");
    Ok(format!("PSNR at ground-truth pose and ratio 0.5: {psnr:.2} dB"))
}

fn ratio_alignment(a: &SceneA) -> Outcome {
    let aligned = a.full.align.as_ref().ok_or("no alignment in report")?;
    let errs = a.full.oracle.as_ref().and_then(|o| o.ratios.clone()).ok_or("no ratio errors")?;
    ensure!(errs.iter().all(|e| *e <= 0.05), "ratios {:?} (truth 0.3)", aligned.ratios);
    let ck = a.dir.join("model.dspl");
    let manifest = a.dir.join("scene/manifest.json");
    let fixed = a.dir.join("align_fixed.json");
    run_cli(
        &[
            "align",
            "--checkpoint",
            path_str(&ck),
            "--manifest",
            path_str(&manifest),
            "--no-ratio-align",
            "--out",
            path_str(&fixed),
        ],
        None,
    )?;
    let fixed_result: AlignResult =
        serde_json::from_str(&std::fs::read_to_string(&fixed).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure!(fixed_result.ratios.iter().all(|r| (r - 0.5).abs() < 1e-12), "fixed ratios moved: {:?}", fixed_result.ratios);
    let out = run_cli(
        &[
            "render",
            "--checkpoint",
            path_str(&ck),
            "--align",
            path_str(&fixed),
            "--manifest",
            path_str(&manifest),
            "--out",
            path_str(&a.dir.join("test_fixed.png")),
        ],
        None,
    )?;
    let p_fixed = out["metrics"]["psnr"].as_f64().ok_or("render reported no metrics")?;
    let p_full = test_psnr(&a.full)?;
    let p_no_se3 = test_psnr(&a.no_se3)?;
    ensure!(
        p_full > p_fixed && p_fixed > p_no_se3,
        "ordering broken: full {p_full:.2}, fixed 0.5 {p_fixed:.2}, no SE(3) init {p_no_se3:.2}"
    );
    Ok(format!(
        "ratios {:?} (truth 0.3); PSNR full {p_full:.2} > fixed-0.5 {p_fixed:.2} > no-SE(3)-init {p_no_se3:.2}",
        aligned.ratios.iter().map(|r| (r * 1e4).round() / 1e4).collect::<Vec<_>>()
    ))
}

fn mean_object_displacement(manifest: &Path) -> Result<f64, String> {
    let s = load_manifest(manifest).map_err(|e| e.to_string())?;
    let (w, h) = s.labels.dims();
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if s.labels.get(x, y) > 0 {
                sum += s.flow_fwd.get(x, y).norm();
                n += 1;
            }
        }
    }
    ensure!(n > 0, "no object pixels");
    Ok(sum / n as f64)
}

fn se3_init_ablation(root: &Path) -> Outcome {
    let cfg = write_config(root, "scene_b.json", serde_json::json!({ "synth": { "object_translation": 1.8 } }));
    let (full, _) = pipeline(&cfg, &root.join("b_full"), SEED_B, &[], None)?;
    let disp = mean_object_displacement(&root.join("b_full/scene/manifest.json"))?;
    ensure!(disp >= 20.0, "object displacement {disp:.1} px");
    let (no_se3, _) = pipeline(&cfg, &root.join("b_no_se3"), SEED_B, &["--no-se3-init"], None)?;
    let (pf, pn) = (test_psnr(&full)?, test_psnr(&no_se3)?);
    ensure!(pf > pn, "full {pf:.2} dB <= no SE(3) init {pn:.2} dB");
    Ok(format!("object displacement {disp:.1} px; test PSNR full {pf:.2} dB > no SE(3) init {pn:.2} dB"))
}

fn determinism(root: &Path) -> Outcome {
    let cfg = write_config(
        root,
        "small.json",
        serde_json::json!({
            "synth": { "width": 32, "height": 32, "objects": [{ "blobs": 300 }] },
            "ba": { "iters": 200 },
            "train": { "iters": 60 },
            "align": { "iters": 20 },
        }),
    );
    let runs = [("t1a", 1), ("t1b", 1), ("t4", 4)];
    let mut bytes = Vec::new();
    for (name, threads) in runs {
        let dir = root.join(name);
        pipeline(&cfg, &dir, 7, &[], Some(threads))?;
        let read = |f: &str| std::fs::read(dir.join(f)).map_err(|e| e.to_string());
        bytes.push((read("report.json")?, read("model.dspl")?, read("test.png")?));
    }
    for (i, (name, _)) in runs.iter().enumerate().skip(1) {
        ensure!(bytes[i].0 == bytes[0].0, "report of {name} differs");
        ensure!(bytes[i].1 == bytes[0].1, "checkpoint of {name} differs");
        ensure!(bytes[i].2 == bytes[0].2, "test render of {name} differs");
    }
    let ck = load_checkpoint(&root.join("t1a/model.dspl")).map_err(|e| e.to_string())?;
    Ok(format!(
        "report, checkpoint ({} Gaussians) and render identical across 2 runs at 1 thread and 1 at 4 threads",
        ck.gaussians.len()
    ))
}

struct Line {
    id: usize,
    name: &'static str,
    outcome: Outcome,
    secs: f64,
}

fn timed(id: usize, name: &'static str, f: impl FnOnce() -> Outcome) -> Line {
    let t = Instant::now();
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
        .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
    let line = Line {
        id,
        name,
        outcome,
        secs: t.elapsed().as_secs_f64(),
    };
    let (tag, text) = match &line.outcome {
        Ok(s) => ("PASS", s),
        Err(s) => ("FAIL", s),
    };
    say(format!("criterion {:>2} [{tag}] {} ({:.1} s): {text}", line.id, line.name, line.secs));
    line
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut lines = vec![
        timed(1, "Lie-group suite", group_laws),
        timed(2, "gradient oracle", gradient_oracle),
        timed(3, "oracle pose recovery", oracle_pose_recovery),
        timed(4, "robust initialization", robust_initialization),
        timed(5, "bidirectional ablation", bidirectional_ablation),
    ];
    let t = Instant::now();
    let a = scene_a(root);
    let shared = t.elapsed().as_secs_f64();
    say(format!("scene A pipelines (full and no SE(3) init) took {shared:.1} s"));
    match &a {
        Ok(a) => {
            lines.push(timed(6, "training fit", || training_fit(a)));
            lines.push(timed(7, "mid-frame synthesis", || mid_frame_synthesis(a)));
            lines.push(timed(8, "ratio alignment", || ratio_alignment(a)));
        }
        Err(e) => {
            for (id, name) in [(6, "training fit"), (7, "mid-frame synthesis"), (8, "ratio alignment")] {
                lines.push(timed(id, name, || Err(e.clone())));
            }
        }
    }
    lines.push(timed(9, "SE(3)-init ablation", || se3_init_ablation(root)));
    lines.push(timed(10, "determinism", || determinism(root)));

    let limits = [(1, 5.0), (2, 120.0), (3, 60.0), (4, 10.0)];
    for (id, max) in limits {
        let l = lines.iter_mut().find(|l| l.id == id).unwrap();
        if l.outcome.is_ok() && l.secs >= max {
            l.outcome = Err(format!("runtime {:.1} s over {max} s", l.secs));
            say(format!("criterion {id:>2} [FAIL] {} runtime {:.1} s over {max} s", l.name, l.secs));
        }
    }
    let failed: Vec<usize> = lines.iter().filter(|l| l.outcome.is_err()).map(|l| l.id).collect();
    say(format!("acceptance: {} of {} criteria passed", lines.len() - failed.len(), lines.len()));
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
