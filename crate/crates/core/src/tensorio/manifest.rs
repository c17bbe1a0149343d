use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{contiguous_mapping, FlowMap, LabelMap, RgbImage, ScalarMap};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, SE3Transform};

/// Paths are relative to the manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntries {
    pub i0: PathBuf,
    pub i1: PathBuf,
    pub d0: PathBuf,
    pub d1: PathBuf,
    pub flow_fwd: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_bwd: Option<PathBuf>,
    pub labels: PathBuf,
    /// Frame-1 regions. Only used to seed Gaussians in pixels frame 0 does
    /// not see.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels1: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub i_test: PathBuf,
}

/// Rotation matrix (row-major) plus translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseEntry {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl From<&SE3Transform> for PoseEntry {
    fn from(t: &SE3Transform) -> Self {
        let r = t.rotation();
        let tr = t.translation();
        Self {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [tr.x, tr.y, tr.z],
        }
    }
}

impl PoseEntry {
    pub fn to_transform(&self) -> SE3Transform {
        let r = Matrix3::from_fn(|i, j| self.rotation[i][j]);
        SE3Transform::from_matrix(&r, Vector3::from(self.translation))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    /// World (frame-0 camera) to frame-1 camera.
    pub t_cam: PoseEntry,
    /// World-frame motion of each dynamic region, indexed by `region - 1`.
    pub t_obj: Vec<PoseEntry>,
    pub ratio: f64,
    /// World to test-view camera.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_cam_test: Option<PoseEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub intrinsics: CameraIntrinsics,
    pub frames: FrameEntries,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleEntry>,
}

/// A manifest with all of its rasters loaded and cross-checked.
#[derive(Debug, Clone)]
pub struct Scene {
    pub manifest: Manifest,
    pub root: PathBuf,
    pub intrinsics: CameraIntrinsics,
    pub i0: RgbImage,
    pub i1: RgbImage,
    pub d0: ScalarMap,
    pub d1: ScalarMap,
    pub flow_fwd: FlowMap,
    pub flow_bwd: Option<FlowMap>,
    pub labels: LabelMap,
    pub labels1: Option<LabelMap>,
    pub i_test: Option<RgbImage>,
    /// `(original, contiguous)` ids that were rewritten on load.
    pub relabeled: Vec<(u32, u32)>,
}

impl Scene {
    pub fn num_regions(&self) -> usize {
        self.labels.max_label() as usize + 1
    }

    pub fn oracle_t_cam(&self) -> Option<SE3Transform> {
        self.manifest.oracle.as_ref().map(|o| o.t_cam.to_transform())
    }

    pub fn oracle_t_obj(&self) -> Option<Vec<SE3Transform>> {
        self.manifest
            .oracle
            .as_ref()
            .map(|o| o.t_obj.iter().map(PoseEntry::to_transform).collect())
    }
}

fn resolve(root: &Path, entry: &str, p: &Path) -> Result<PathBuf> {
    let full = if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    };
    if !full.is_file() {
        return Err(Error::MissingFile {
            entry: entry.to_string(),
            path: full,
        });
    }
    Ok(full)
}

fn check_dims(entry: &str, k: &CameraIntrinsics, found: (usize, usize)) -> Result<()> {
    if found != k.dims() {
        return Err(Error::DimensionMismatch {
            entry: entry.to_string(),
            expected: k.dims(),
            found,
        });
    }
    Ok(())
}

fn sanitize_depth(d: &mut ScalarMap) {
    for v in &mut d.data {
        if !(*v > 0.0) || !v.is_finite() {
            *v = f64::NAN;
        }
    }
}

pub fn load_manifest(path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile {
            entry: "manifest".into(),
            path: path.to_path_buf(),
        },
        _ => Error::Io(e),
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::MalformedManifest(format!("{}: {e}", path.display())))?;
    manifest
        .intrinsics
        .validate()
        .map_err(|e| Error::MalformedManifest(format!("intrinsics: {e}")))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let k = manifest.intrinsics;
    let f = &manifest.frames;

    let i0 = RgbImage::read(&resolve(&root, "i0", &f.i0)?)?;
    check_dims("i0", &k, i0.dims())?;
    let i1 = RgbImage::read(&resolve(&root, "i1", &f.i1)?)?;
    check_dims("i1", &k, i1.dims())?;
    let mut d0 = ScalarMap::read(&resolve(&root, "d0", &f.d0)?)?;
    check_dims("d0", &k, d0.dims())?;
    sanitize_depth(&mut d0);
    let mut d1 = ScalarMap::read(&resolve(&root, "d1", &f.d1)?)?;
    check_dims("d1", &k, d1.dims())?;
    sanitize_depth(&mut d1);
    let flow_fwd = FlowMap::read(&resolve(&root, "flow_fwd", &f.flow_fwd)?)?;
    check_dims("flow_fwd", &k, flow_fwd.dims())?;
    let flow_bwd = match &f.flow_bwd {
        Some(p) => {
            let m = FlowMap::read(&resolve(&root, "flow_bwd", p)?)?;
            check_dims("flow_bwd", &k, m.dims())?;
            Some(m)
        }
        None => None,
    };
    let mut labels = LabelMap::read(&resolve(&root, "labels", &f.labels)?)?;
    check_dims("labels", &k, labels.dims())?;
    let mapping = contiguous_mapping(&labels.data);
    let relabeled: Vec<(u32, u32)> = mapping.iter().copied().filter(|(a, b)| a != b).collect();
    labels.apply_mapping(&mapping);

    let labels1 = match &f.labels1 {
        Some(p) => {
            let mut m = LabelMap::read(&resolve(&root, "labels1", p)?)?;
            check_dims("labels1", &k, m.dims())?;
            if let Some(bad) = m
                .data
                .iter()
                .find(|v| mapping.binary_search_by_key(*v, |&(o, _)| o).is_err())
            {
                return Err(Error::MalformedManifest(format!(
                    "labels1 uses region {bad}, which frame 0 does not contain"
                )));
            }
            m.apply_mapping(&mapping);
            Some(m)
        }
        None => None,
    };
    let i_test = match &manifest.eval {
        Some(e) => {
            let img = RgbImage::read(&resolve(&root, "i_test", &e.i_test)?)?;
            check_dims("i_test", &k, img.dims())?;
            Some(img)
        }
        None => None,
    };
    if let Some(o) = &manifest.oracle {
        let dynamic = labels.max_label() as usize;
        if o.t_obj.len() != dynamic {
            return Err(Error::MalformedManifest(format!(
                "oracle lists {} object motions for {dynamic} dynamic regions",
                o.t_obj.len()
            )));
        }
    }
    Ok(Scene {
        intrinsics: k,
        manifest,
        root,
        i0,
        i1,
        d0,
        d1,
        flow_fwd,
        flow_bwd,
        labels,
        labels1,
        i_test,
        relabeled,
    })
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(path, text)?;
    Ok(())
}
