//! Pipeline configuration and seed fan-out.

use std::path::Path;

use dynsplat::correspondence::ConsistencyParams;
use dynsplat::dense_ba::BAParams;
use dynsplat::init_pnp::RansacParams;
use dynsplat::se3field::{AlignConfig, TrainConfig};
use dynsplat::splat::RenderConfig;
use dynsplat::synthgen::SynthConfig;
use dynsplat::{Error, Result};
use rand::RngCore;
use serde::{Deserialize, Serialize};

/// Every tunable of every stage. Missing fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Scene to generate when `pipeline` is not given a manifest.
    pub synth: Option<SynthConfig>,
    pub consistency: ConsistencyParams,
    pub ransac: RansacParams,
    pub ba: BAParams,
    pub train: TrainConfig,
    pub align: AlignConfig,
    pub render: RenderConfig,
    /// Pixel stride of the Gaussian initialization.
    pub stride: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            synth: None,
            consistency: ConsistencyParams::default(),
            ransac: RansacParams::default(),
            ba: BAParams::default(),
            train: TrainConfig::default(),
            align: AlignConfig::default(),
            render: RenderConfig::default(),
            stride: 1,
        }
    }
}

impl PipelineConfig {
    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile {
                entry: "config".into(),
                path: path.to_path_buf(),
            },
            _ => Error::Io(e),
        })?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidParameter(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        self.ba.validate()?;
        self.train.validate()?;
        self.render.validate()?;
        if self.stride == 0 {
            return Err(Error::InvalidParameter("stride must be positive".into()));
        }
        Ok(())
    }

    /// Overwrites every stage seed with one derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        if let Some(s) = self.synth.as_mut() {
            s.seed = stage_seed(seed, Stage::Synth);
        }
        self.ransac.seed = stage_seed(seed, Stage::Ba);
        self.train.seed = stage_seed(seed, Stage::Train);
        self
    }
}

/// Pipeline stage, used for seed streams and error attribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Config,
    Synth,
    Ba,
    Train,
    Render,
    Align,
    Eval,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Synth => "synth",
            Stage::Ba => "ba",
            Stage::Train => "train",
            Stage::Render => "render",
            Stage::Align => "align",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }
}

pub fn stage_seed(seed: u64, stage: Stage) -> u64 {
    dynsplat::rng_stream(seed, stage as u64 + 1).next_u64()
}
