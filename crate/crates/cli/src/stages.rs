//! Stage implementations. Stages hand data to each other through files, so
//! `pipeline` and the chained subcommands see identical inputs.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dynsplat::dense_ba::{initialize_poses, run_ba, BAInputs, BAReport, BAResult};
use dynsplat::geometry::SE3Transform;
use dynsplat::se3field::{
    init_field, init_two_frame_gaussians, load_checkpoint, save_checkpoint, test_time_align, train, AlignConfig,
    AlignResult, Checkpoint, MotionField,
};
use dynsplat::splat::{metrics, rasterize, Metrics, Motion, RenderConfig};
use dynsplat::synthgen::{generate, scene_diameter, SynthConfig};
use dynsplat::tensorio::{load_manifest, RgbImage, ScalarMap, Scene};
use dynsplat::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{PipelineConfig, Stage};
use crate::report::{BaSummary, Flags, OracleErrors, PoseError, RunReport, Timings, TrainReport};

pub const SCENE_DIR: &str = "scene";
pub const BA_DIR: &str = "ba";
pub const BA_REPORT: &str = "ba.json";
pub const BA_DEPTH0: &str = "ba_depth0.pfm";
pub const BA_DEPTH1: &str = "ba_depth1.pfm";
pub const CHECKPOINT: &str = "model.dspl";
pub const ALIGN_REPORT: &str = "align.json";
pub const TEST_RENDER: &str = "test.png";
pub const RUN_REPORT: &str = "report.json";
pub const TIMINGS: &str = "timings.json";

/// An error tagged with the stage that raised it.
#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub error: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage.name(), self.error)
    }
}

impl std::error::Error for StageError {}

impl StageError {
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::json!({
            "stage": self.stage.name(),
            "kind": self.error.kind(),
            "message": self.error.to_string(),
        });
        if let Error::MissingFile { entry, path } = &self.error {
            v["entry"] = entry.as_str().into();
            v["path"] = path.display().to_string().into();
        }
        v
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

pub trait AtStage<T> {
    fn at(self, stage: Stage) -> StageResult<T>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> StageResult<T> {
        self.map_err(|error| StageError { stage, error })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(entry: &str, path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile {
            entry: entry.into(),
            path: path.to_path_buf(),
        },
        _ => Error::Io(e),
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Generates a scene into `dir`; returns the manifest path.
pub fn synth(cfg: &SynthConfig, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    generate(cfg)?.write(dir)
}

/// PnP initialization and dense BA. Writes the report and refined depths
/// into `dir`.
pub fn ba(manifest: &Path, dir: &Path, cfg: &PipelineConfig) -> Result<BAReport> {
    let scene = load_manifest(manifest)?;
    if cfg.ba.bidirectional && scene.flow_bwd.is_none() {
        return Err(Error::MissingFile {
            entry: "flow_bwd".into(),
            path: manifest.to_path_buf(),
        });
    }
    let inputs = BAInputs::from_scene(&scene, &cfg.consistency)?;
    let (init, regions) = initialize_poses(&inputs, &cfg.ransac)?;
    let result = run_ba(&inputs, &init, &cfg.ba)?;
    fs::create_dir_all(dir)?;
    result.depth0.write(&dir.join(BA_DEPTH0))?;
    result.depth1.write(&dir.join(BA_DEPTH1))?;
    let report = result.report(regions);
    write_json(&dir.join(BA_REPORT), &report)?;
    Ok(report)
}

/// Reads a BA report and the depth maps stored beside it.
pub fn load_ba(report: &Path) -> Result<BAResult> {
    let r: BAReport = read_json("ba report", report)?;
    let dir = report.parent().unwrap_or(Path::new("."));
    let depth = |name: &str| -> Result<ScalarMap> {
        let p = dir.join(name);
        if !p.is_file() {
            return Err(Error::MissingFile { entry: name.into(), path: p });
        }
        ScalarMap::read(&p)
    };
    Ok(BAResult::from_report(&r, depth(BA_DEPTH0)?, depth(BA_DEPTH1)?))
}

/// `model.dspl` -> `model.train.json`.
pub fn train_report_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("train.json")
}

fn frame_metrics(ck: &Checkpoint, i0: &RgbImage, i1: &RgbImage, rc: &RenderConfig) -> Result<(Metrics, Metrics)> {
    let k = &ck.intrinsics;
    let r0 = rasterize(&ck.gaussians, &Motion::None, &SE3Transform::identity(), k, rc)?;
    let r1 = rasterize(&ck.gaussians, &Motion::Full(&ck.field), &ck.t_cam, k, rc)?;
    Ok((metrics(&r0.image, i0)?, metrics(&r1.image, i1)?))
}

/// Gaussian initialization from the BA depths, field initialization and
/// joint training. Writes the checkpoint and its training report.
pub fn train_model(
    manifest: &Path,
    ba_report: &Path,
    checkpoint: &Path,
    cfg: &PipelineConfig,
    se3_init: bool,
) -> Result<TrainReport> {
    let scene = load_manifest(manifest)?;
    let ba = load_ba(ba_report)?;
    let k = scene.intrinsics;
    let inputs = BAInputs::from_scene(&scene, &cfg.consistency)?;
    let g = init_two_frame_gaussians(
        &scene.i0,
        &scene.i1,
        &scene.labels,
        scene.labels1.as_ref(),
        inputs.w_bwd.as_ref(),
        &ba,
        &k,
        cfg.stride,
    )?;
    let field = if se3_init {
        init_field(&g, &ba)?
    } else {
        MotionField::identity(&g)
    };
    let r = train(&g, &field, &ba.t_cam, &scene.i0, &scene.i1, &k, &cfg.train, &cfg.render)?;
    let ck = Checkpoint {
        intrinsics: k,
        t_cam: r.t_cam,
        gaussians: r.gaussians,
        field: r.field,
    };
    if let Some(dir) = checkpoint.parent() {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(checkpoint, &ck)?;
    let (frame0, frame1) = frame_metrics(&ck, &scene.i0, &scene.i1, &cfg.render)?;
    let report = TrainReport {
        se3_init,
        gaussians: ck.gaussians.len(),
        loss_curve: r.history,
        final_loss: r.final_loss,
        max_weight_error: r.max_weight_error,
        t_cam: (&ck.t_cam).into(),
        frame0,
        frame1,
    };
    write_json(&train_report_path(checkpoint), &report)?;
    Ok(report)
}

/// Test pose stored with the scene, else the midpoint of the camera path.
pub fn default_test_pose(scene: Option<&Scene>, ck: &Checkpoint) -> Result<SE3Transform> {
    let stored = scene
        .and_then(|s| s.manifest.oracle.as_ref())
        .and_then(|o| o.t_cam_test.as_ref());
    match stored {
        Some(p) => Ok(p.to_transform()),
        None => ck.t_cam.interpolate(0.5),
    }
}

fn dynamic_regions(ck: &Checkpoint) -> usize {
    ck.gaussians.region_id.iter().max().map(|&m| m as usize).unwrap_or(0)
}

/// Renders at `pose` with one ratio per dynamic region; a single ratio is
/// shared by all of them.
pub fn render_view(ck: &Checkpoint, pose: &SE3Transform, ratios: &[f64], rc: &RenderConfig) -> Result<RgbImage> {
    let n = dynamic_regions(ck);
    let mut full = vec![0.0; n + 1];
    match ratios.len() {
        1 => full[1..].fill(ratios[0]),
        m if m == n => full[1..].copy_from_slice(ratios),
        m => {
            return Err(Error::InvalidParameter(format!(
                "{m} ratios given for {n} dynamic regions"
            )))
        }
    }
    let motion = Motion::Ratios {
        field: &ck.field,
        ratios: &full,
    };
    Ok(rasterize(&ck.gaussians, &motion, pose, &ck.intrinsics, rc)?.image)
}

/// Test-time alignment with the model frozen. Without `ratio_align` the
/// ratios stay at the configured initial value.
pub fn align(
    ck: &Checkpoint,
    target: &RgbImage,
    init_pose: &SE3Transform,
    cfg: &AlignConfig,
    ratio_align: bool,
    rc: &RenderConfig,
) -> Result<AlignResult> {
    let cfg = AlignConfig {
        optimize_ratios: cfg.optimize_ratios && ratio_align,
        ..*cfg
    };
    test_time_align(&ck.gaussians, &ck.field, target, &ck.intrinsics, init_pose, &cfg, rc)
}

fn oracle_errors(scene: &Scene, ba: &BAReport, ck: &Checkpoint, align: Option<&AlignResult>) -> Option<OracleErrors> {
    let oracle = scene.manifest.oracle.as_ref()?;
    let diameter = scene_diameter(&scene.d0, &scene.intrinsics);
    let gt_cam = oracle.t_cam.to_transform();
    let ba_objects = ba
        .t_obj
        .iter()
        .zip(&oracle.t_obj)
        .map(|(e, g)| PoseError::between(&e.to_transform(), &g.to_transform(), diameter))
        .collect();
    Some(OracleErrors {
        scene_diameter: diameter,
        ba_camera: PoseError::between(&ba.t_cam.to_transform(), &gt_cam, diameter),
        ba_objects,
        train_camera: PoseError::between(&ck.t_cam, &gt_cam, diameter),
        ratios: align.map(|a| a.ratios.iter().map(|r| (r - oracle.ratio).abs()).collect()),
    })
}

/// Every stage in order under `out`. Generates a scene from `cfg.synth`
/// (or the default scene) unless `manifest` is given.
pub fn pipeline(
    cfg: &PipelineConfig,
    manifest: Option<&Path>,
    out: &Path,
    flags: Flags,
    seed: u64,
) -> StageResult<(RunReport, Timings)> {
    let start = Instant::now();
    let mut timings = Timings::default();
    let mut cfg = cfg.clone();
    if manifest.is_none() && cfg.synth.is_none() {
        cfg.synth = Some(SynthConfig::default());
    }
    let cfg = cfg.with_seed(seed);
    cfg.validate().at(Stage::Config)?;
    fs::create_dir_all(out).map_err(Error::from).at(Stage::Config)?;

    let t = Instant::now();
    let manifest = match manifest {
        Some(m) => m.to_path_buf(),
        None => synth(cfg.synth.as_ref().expect("filled above"), &out.join(SCENE_DIR)).at(Stage::Synth)?,
    };
    timings.synth = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let ba_dir = out.join(BA_DIR);
    let ba_report = ba(&manifest, &ba_dir, &cfg).at(Stage::Ba)?;
    timings.ba = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let ck_path = out.join(CHECKPOINT);
    let train_report = train_model(&manifest, &ba_dir.join(BA_REPORT), &ck_path, &cfg, flags.se3_init).at(Stage::Train)?;
    timings.train = t.elapsed().as_secs_f64();

    let ck = load_checkpoint(&ck_path).at(Stage::Render)?;
    let scene = load_manifest(&manifest).at(Stage::Render)?;
    let (mut align_result, mut test) = (None, None);
    if let Some(target) = &scene.i_test {
        let t = Instant::now();
        let init = default_test_pose(Some(&scene), &ck).at(Stage::Align)?;
        let a = align(&ck, target, &init, &cfg.align, flags.ratio_align, &cfg.render).at(Stage::Align)?;
        write_json(&out.join(ALIGN_REPORT), &a).at(Stage::Align)?;
        timings.align = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let img = render_view(&ck, &a.t_cam_test.to_transform(), &a.ratios, &cfg.render).at(Stage::Render)?;
        img.write(&out.join(TEST_RENDER)).at(Stage::Render)?;
        test = Some(metrics(&img, target).at(Stage::Eval)?);
        timings.render = t.elapsed().as_secs_f64();
        align_result = Some(a);
    }

    let report = RunReport {
        seed,
        flags,
        oracle: oracle_errors(&scene, &ba_report, &ck, align_result.as_ref()),
        ba: BaSummary::new(&ba_report, cfg.ba.bidirectional),
        config: cfg,
        train: train_report,
        align: align_result,
        test,
    };
    write_json(&out.join(RUN_REPORT), &report).at(Stage::Report)?;
    timings.total = start.elapsed().as_secs_f64();
    write_json(&out.join(TIMINGS), &timings).at(Stage::Report)?;
    Ok((report, timings))
}
