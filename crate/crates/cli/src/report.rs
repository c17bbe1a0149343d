//! JSON documents written by the stages.

use dynsplat::dense_ba::{BALosses, BAReport, RegionInit};
use dynsplat::geometry::{rotation_distance, SE3Transform};
use dynsplat::se3field::{AlignResult, TrainLoss};
use dynsplat::splat::Metrics;
use dynsplat::tensorio::PoseEntry;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    /// Initialize the field from the BA motions, else from the identity.
    pub se3_init: bool,
    /// Fit per-object ratios at test time, else hold them at 0.5.
    pub ratio_align: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Self {
            se3_init: true,
            ratio_align: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub se3_init: bool,
    pub gaussians: usize,
    pub loss_curve: Vec<TrainLoss>,
    pub final_loss: TrainLoss,
    pub max_weight_error: f64,
    pub t_cam: PoseEntry,
    /// Fit of the returned model to the two input frames.
    pub frame0: Metrics,
    pub frame1: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaSummary {
    pub bidirectional: bool,
    pub initial_losses: BALosses,
    pub final_losses: BALosses,
    /// Total loss before each step.
    pub loss_curve: Vec<f64>,
    pub t_cam: PoseEntry,
    pub t_obj: Vec<PoseEntry>,
    pub regions: Vec<RegionInit>,
}

impl BaSummary {
    pub fn new(report: &BAReport, bidirectional: bool) -> Self {
        Self {
            bidirectional,
            initial_losses: report.initial_losses,
            final_losses: report.final_losses,
            loss_curve: report.trajectory.iter().map(|l| l.total).collect(),
            t_cam: report.t_cam,
            t_obj: report.t_obj.clone(),
            regions: report.regions.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub rotation_deg: f64,
    pub translation: f64,
    /// Translation error over the scene diameter.
    pub translation_rel: f64,
}

impl PoseError {
    pub fn between(est: &SE3Transform, gt: &SE3Transform, diameter: f64) -> Self {
        let translation = (est.translation() - gt.translation()).norm();
        Self {
            rotation_deg: rotation_distance(est.rotation(), gt.rotation()).to_degrees(),
            translation,
            translation_rel: translation / diameter,
        }
    }
}

/// Errors against the ground truth stored in a synthetic manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleErrors {
    pub scene_diameter: f64,
    pub ba_camera: PoseError,
    pub ba_objects: Vec<PoseError>,
    pub train_camera: PoseError,
    /// Absolute error of each aligned ratio.
    pub ratios: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub flags: Flags,
    pub config: PipelineConfig,
    pub ba: BaSummary,
    pub train: TrainReport,
    pub align: Option<AlignResult>,
    /// Rendered test view against the manifest's test image.
    pub test: Option<Metrics>,
    pub oracle: Option<OracleErrors>,
}

/// Wall-clock seconds per stage. Kept apart from the report so reports
/// stay reproducible.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub synth: f64,
    pub ba: f64,
    pub train: f64,
    pub align: f64,
    pub render: f64,
    pub total: f64,
}
