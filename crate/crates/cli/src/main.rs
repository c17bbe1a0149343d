use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dynsplat::geometry::SE3Transform;
use dynsplat::se3field::{load_checkpoint, AlignResult};
use dynsplat::splat::metrics;
use dynsplat::synthgen::SynthConfig;
use dynsplat::tensorio::{load_manifest, PoseEntry, RgbImage};
use dynsplat::Error;
use dynsplat_cli::stages::{self, read_json, write_json};
use dynsplat_cli::{init_threads, AtStage, BaSummary, Flags, PipelineConfig, Stage, StageResult};
use serde_json::{json, Value};

/// Two-view dynamic scene reconstruction with an SE(3) field over Gaussians.
#[derive(Parser)]
#[command(name = "dynsplat", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Pipeline config JSON; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Direction {
    /// Use backward flow as well (the default).
    #[arg(long)]
    bidirectional: bool,
    #[arg(long, conflicts_with = "bidirectional")]
    forward_only: bool,
}

impl Direction {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if self.bidirectional {
            cfg.ba.bidirectional = true;
        }
        if self.forward_only {
            cfg.ba.bidirectional = false;
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene with ground truth.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// PnP initialization and dense bundle adjustment.
    Ba {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        direction: Direction,
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for the report and refined depths.
        #[arg(long)]
        out: PathBuf,
    },
    /// Initialize and train the Gaussians and motion field.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// BA report written by `ba`.
        #[arg(long)]
        ba: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Start the field at the identity instead of the BA motions.
        #[arg(long)]
        no_se3_init: bool,
    },
    /// Render a checkpoint at a camera pose and per-object ratios.
    Render {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output PNG.
        #[arg(long)]
        out: PathBuf,
        /// World-to-camera pose JSON.
        #[arg(long)]
        pose: Option<PathBuf>,
        /// Alignment result supplying pose and ratios.
        #[arg(long)]
        align: Option<PathBuf>,
        /// Manifest supplying a stored test pose and test image.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// One ratio for every object.
        #[arg(long, conflicts_with = "ratios")]
        ratio: Option<f64>,
        /// Comma-separated ratio per object.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        /// Image to score the render against.
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Fit the test camera and object ratios to a test image.
    Align {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test image; defaults to the manifest's.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Initial pose JSON; defaults to the manifest's test pose or the
        /// camera path midpoint.
        #[arg(long)]
        init_pose: Option<PathBuf>,
        /// Hold ratios at their initial value.
        #[arg(long)]
        no_ratio_align: bool,
        /// Output JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Image metrics of a render against a reference.
    Eval {
        #[arg(long)]
        rendered: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every stage in order.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        direction: Direction,
        /// Existing scene; a synthetic one is generated otherwise.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_se3_init: bool,
        #[arg(long)]
        no_ratio_align: bool,
    },
}

fn load_config(path: Option<&Path>, seed: u64) -> StageResult<PipelineConfig> {
    Ok(PipelineConfig::load(path).at(Stage::Config)?.with_seed(seed))
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

fn run(cmd: Cmd) -> StageResult<Value> {
    match cmd {
        Cmd::Synth { common, out } => {
            let mut cfg = PipelineConfig::load(common.config.as_deref()).at(Stage::Config)?;
            cfg.synth.get_or_insert_with(SynthConfig::default);
            let cfg = cfg.with_seed(common.seed);
            let manifest = stages::synth(cfg.synth.as_ref().expect("set above"), &out).at(Stage::Synth)?;
            Ok(json!({ "manifest": manifest }))
        }
        Cmd::Ba {
            common,
            direction,
            manifest,
            out,
        } => {
            let mut cfg = load_config(common.config.as_deref(), common.seed)?;
            direction.apply(&mut cfg);
            let report = stages::ba(&manifest, &out, &cfg).at(Stage::Ba)?;
            let mut v = to_value(&BaSummary::new(&report, cfg.ba.bidirectional));
            v.as_object_mut().expect("object").remove("loss_curve");
            v["report"] = out.join(stages::BA_REPORT).display().to_string().into();
            Ok(v)
        }
        Cmd::Train {
            common,
            manifest,
            ba,
            out,
            no_se3_init,
        } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let r = stages::train_model(&manifest, &ba, &out, &cfg, !no_se3_init).at(Stage::Train)?;
            Ok(json!({
                "checkpoint": out,
                "gaussians": r.gaussians,
                "final_loss": r.final_loss,
                "max_weight_error": r.max_weight_error,
                "frame0": r.frame0,
                "frame1": r.frame1,
            }))
        }
        Cmd::Render {
            config,
            checkpoint,
            out,
            pose,
            align,
            manifest,
            ratio,
            ratios,
            target,
        } => {
            let cfg = load_config(config.as_deref(), 0)?;
            let ck = load_checkpoint(&checkpoint).at(Stage::Render)?;
            let scene = manifest.as_deref().map(load_manifest).transpose().at(Stage::Render)?;
            let aligned: Option<AlignResult> = align
                .as_deref()
                .map(|p| read_json("align", p))
                .transpose()
                .at(Stage::Render)?;
            let pose = match (&aligned, &pose) {
                (Some(a), _) => a.t_cam_test.to_transform(),
                (None, Some(p)) => read_json::<PoseEntry>("pose", p).at(Stage::Render)?.to_transform(),
                (None, None) => stages::default_test_pose(scene.as_ref(), &ck).at(Stage::Render)?,
            };
            let ratios = match (ratios, ratio, &aligned) {
                (Some(r), _, _) => r,
                (None, Some(r), _) => vec![r],
                (None, None, Some(a)) => a.ratios.clone(),
                (None, None, None) => vec![0.5],
            };
            let img = stages::render_view(&ck, &pose, &ratios, &cfg.render).at(Stage::Render)?;
            img.write(&out).at(Stage::Render)?;
            let reference = match target {
                Some(t) => Some(RgbImage::read(&t).at(Stage::Eval)?),
                None => scene.and_then(|s| s.i_test),
            };
            let m = reference.map(|t| metrics(&img, &t)).transpose().at(Stage::Eval)?;
            Ok(json!({
                "image": out,
                "pose": PoseEntry::from(&pose),
                "ratios": ratios,
                "metrics": m,
            }))
        }
        Cmd::Align {
            config,
            checkpoint,
            image,
            manifest,
            init_pose,
            no_ratio_align,
            out,
        } => {
            let cfg = load_config(config.as_deref(), 0)?;
            let ck = load_checkpoint(&checkpoint).at(Stage::Align)?;
            let scene = manifest.as_deref().map(load_manifest).transpose().at(Stage::Align)?;
            let target = match (image, scene.as_ref().and_then(|s| s.i_test.clone())) {
                (Some(p), _) => RgbImage::read(&p).at(Stage::Align)?,
                (None, Some(t)) => t,
                (None, None) => {
                    return Err(Error::InvalidParameter("align needs --image or a manifest with a test image".into()))
                        .at(Stage::Align)
                }
            };
            let init: SE3Transform = match init_pose {
                Some(p) => read_json::<PoseEntry>("init pose", &p).at(Stage::Align)?.to_transform(),
                None => stages::default_test_pose(scene.as_ref(), &ck).at(Stage::Align)?,
            };
            let a = stages::align(&ck, &target, &init, &cfg.align, !no_ratio_align, &cfg.render).at(Stage::Align)?;
            write_json(&out, &a).at(Stage::Align)?;
            let mut v = to_value(&a);
            v.as_object_mut().expect("object").remove("history");
            Ok(v)
        }
        Cmd::Eval { rendered, target, out } => {
            let a = RgbImage::read(&rendered).at(Stage::Eval)?;
            let b = RgbImage::read(&target).at(Stage::Eval)?;
            let m = metrics(&a, &b).at(Stage::Eval)?;
            if let Some(out) = out {
                write_json(&out, &m).at(Stage::Eval)?;
            }
            Ok(to_value(&m))
        }
        Cmd::Pipeline {
            common,
            direction,
            manifest,
            out,
            no_se3_init,
            no_ratio_align,
        } => {
            let mut cfg = PipelineConfig::load(common.config.as_deref()).at(Stage::Config)?;
            direction.apply(&mut cfg);
            let flags = Flags {
                se3_init: !no_se3_init,
                ratio_align: !no_ratio_align,
            };
            let (report, timings) = stages::pipeline(&cfg, manifest.as_deref(), &out, flags, common.seed)?;
            Ok(json!({
                "report": out.join(stages::RUN_REPORT),
                "frame0": report.train.frame0,
                "frame1": report.train.frame1,
                "test": report.test,
                "ratios": report.align.as_ref().map(|a| &a.ratios),
                "oracle": report.oracle,
                "timings": timings,
            }))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().at(Stage::Config).and_then(|()| run(cli.cmd));
    match result {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
