//! Dense rasters and their on-disk formats.
//!
//! Every raster is row-major with `(0, 0)` at the top-left pixel. Float
//! payloads are kept in `f64` in memory; the float file formats store `f32`.

mod flo;
mod manifest;
mod pfm;
mod pgm;
mod png;

use std::path::Path;

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::geometry::Pixel;

pub use flo::{read_flo, write_flo, FLO_MAGIC};
pub use manifest::{
    load_manifest, save_manifest, EvalEntry, FrameEntries, Manifest, OracleEntry, PoseEntry, Scene,
};
pub use pfm::{read_pfm, write_pfm, PfmData};
pub use pgm::{read_pgm16, write_pgm16};
pub use png::{read_png, write_png};

/// Bilinear sample of a `channels`-wide raster at a continuous position.
/// Returns `None` outside `[0, w-1] x [0, h-1]`; NaN neighbors give NaN.
fn bilinear<const C: usize>(
    width: usize,
    height: usize,
    data: &[f64],
    p: &Pixel,
) -> Option<[f64; C]> {
    if width == 0 || height == 0 {
        return None;
    }
    let (x, y) = (p.x, p.y);
    if !(x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64) {
        return None;
    }
    let x0 = (x.floor() as usize).min(width - 1);
    let y0 = (y.floor() as usize).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let mut out = [0.0; C];
    let taps = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ];
    for (tx, ty, w) in taps {
        let base = (ty * width + tx) * C;
        for c in 0..C {
            let v = data[base + c];
            // zero-weight NaN taps still poison the sample
            if v.is_nan() {
                return Some([f64::NAN; C]);
            }
            out[c] += w * v;
        }
    }
    Some(out)
}

fn check_len(entry: &str, width: usize, height: usize, channels: usize, len: usize) -> Result<()> {
    if len != width * height * channels {
        return Err(Error::InvalidParameter(format!(
            "{entry}: payload has {len} values, expected {}",
            width * height * channels
        )));
    }
    Ok(())
}

/// Single-channel float raster (depth in scene units, or a confidence).
/// NaN marks invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ScalarMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_len("ScalarMap", width, height, 1, data.len())?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn sample(&self, p: &Pixel) -> Option<f64> {
        bilinear::<1>(self.width, self.height, &self.data, p).map(|v| v[0])
    }

    pub fn read(path: &Path) -> Result<Self> {
        match read_pfm(path)? {
            PfmData::Gray(m) => Ok(m),
            PfmData::Color(_) => Err(Error::UnsupportedFormat(format!(
                "{}: expected single-channel PFM",
                path.display()
            ))),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_pfm(path, 1, self.width, self.height, &self.data)
    }
}

/// Two-channel `(du, dv)` flow raster in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl FlowMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_len("FlowMap", width, height, 2, data.len())?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 2 * width * height],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Vector2<f64> {
        let i = 2 * (y * self.width + x);
        Vector2::new(self.data[i], self.data[i + 1])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: Vector2<f64>) {
        let i = 2 * (y * self.width + x);
        self.data[i] = v.x;
        self.data[i + 1] = v.y;
    }

    pub fn sample(&self, p: &Pixel) -> Option<Vector2<f64>> {
        bilinear::<2>(self.width, self.height, &self.data, p).map(|v| Vector2::new(v[0], v[1]))
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_flo(path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_flo(path, self)
    }
}

/// Region ids, 0 is the static background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u32>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, data: Vec<u32>) -> Result<Self> {
        check_len("LabelMap", width, height, 1, data.len())?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.data[y * self.width + x]
    }

    pub fn max_label(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn count(&self, label: u32) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }

    /// Maps the static label 0 to itself and the remaining ids, in ascending
    /// order, onto `1..=n`. Returns the `(old, new)` pairs that changed.
    pub fn make_contiguous(&mut self) -> Vec<(u32, u32)> {
        let map = contiguous_mapping(&self.data);
        let changed = map.iter().copied().filter(|(a, b)| a != b).collect();
        self.apply_mapping(&map);
        changed
    }

    fn apply_mapping(&mut self, map: &[(u32, u32)]) {
        for v in &mut self.data {
            if let Ok(i) = map.binary_search_by_key(v, |&(old, _)| old) {
                *v = map[i].1;
            }
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_pgm16(path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_pgm16(path, self)
    }
}

pub(crate) fn contiguous_mapping(labels: &[u32]) -> Vec<(u32, u32)> {
    let mut ids: Vec<u32> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut next = 1;
    ids.into_iter()
        .map(|old| {
            if old == 0 {
                (0, 0)
            } else {
                let new = next;
                next += 1;
                (old, new)
            }
        })
        .collect()
}

/// RGB raster with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_len("RgbImage", width, height, 3, data.len())?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
    }

    /// PNG, or three-channel PFM when the extension is `.pfm`.
    pub fn read(path: &Path) -> Result<Self> {
        let mut img = if has_ext(path, "pfm") {
            match read_pfm(path)? {
                PfmData::Color(img) => img,
                PfmData::Gray(_) => {
                    return Err(Error::UnsupportedFormat(format!(
                        "{}: expected three-channel PFM",
                        path.display()
                    )))
                }
            }
        } else {
            read_png(path)?
        };
        img.clamp01();
        Ok(img)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if has_ext(path, "pfm") {
            write_pfm(path, 3, self.width, self.height, &self.data)
        } else {
            write_png(path, self)
        }
    }
}

fn has_ext(path: &Path, ext: &str) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case(ext))
}
