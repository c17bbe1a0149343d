//! Versioned little-endian model file.
//!
//! Layout: magic `DSPL`, `u32` version, intrinsics (`4 x f64`, `2 x u64`),
//! frame-1 pose (`9 x f64`), `u64` count, then per-Gaussian arrays
//! (positions, quaternions, log-scales, opacity logits, colors, region ids)
//! and the field (6D rotations, translations).

use std::fs;
use std::path::Path;

use nalgebra::{Vector3, Vector4};

use super::MotionField;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Rotation6D, SE3Transform};
use crate::splat::GaussianSet;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSPL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub intrinsics: CameraIntrinsics,
    pub t_cam: SE3Transform,
    pub gaussians: GaussianSet,
    pub field: MotionField,
}

struct Writer(Vec<u8>);

impl Writer {
    fn f(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(bytes.try_into().expect("length checked"))
    }
    fn f(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn v3(&mut self) -> Result<Vector3<f64>> {
        Ok(Vector3::new(self.f()?, self.f()?, self.f()?))
    }
}

pub fn encode_checkpoint(c: &Checkpoint) -> Result<Vec<u8>> {
    let g = &c.gaussians;
    g.validate()?;
    if c.field.len() != g.len() || c.field.trans.len() != g.len() {
        return Err(Error::Checkpoint("field and Gaussian counts differ".into()));
    }
    let mut w = Writer(Vec::with_capacity(64 + g.len() * 200));
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let k = &c.intrinsics;
    for v in [k.fx, k.fy, k.cx, k.cy] {
        w.f(v);
    }
    w.u64(k.width as u64);
    w.u64(k.height as u64);
    for v in c.t_cam.to_params() {
        w.f(v);
    }
    w.u64(g.len() as u64);
    for p in &g.positions {
        p.iter().for_each(|&v| w.f(v));
    }
    for q in &g.rotations {
        q.iter().for_each(|&v| w.f(v));
    }
    for s in &g.log_scales {
        s.iter().for_each(|&v| w.f(v));
    }
    g.logit_opacity.iter().for_each(|&v| w.f(v));
    for c in &g.colors {
        c.iter().for_each(|&v| w.f(v));
    }
    g.region_id.iter().for_each(|&r| w.u32(r));
    for r in &c.field.rot6 {
        r.to_array().iter().for_each(|&v| w.f(v));
    }
    for t in &c.field.trans {
        t.iter().for_each(|&v| w.f(v));
    }
    Ok(w.0)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if &r.take::<4>()? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let (fx, fy, cx, cy) = (r.f()?, r.f()?, r.f()?, r.f()?);
    let (w, h) = (r.u64()? as usize, r.u64()? as usize);
    let intrinsics = CameraIntrinsics::new(fx, fy, cx, cy, w, h)?;
    let mut cam = [0.0; 9];
    for v in &mut cam {
        *v = r.f()?;
    }
    let t_cam = SE3Transform::from_params(&cam)?;
    let n = r.u64()? as usize;
    // 23 floats and one id per Gaussian
    if buf.len().saturating_sub(r.pos) != n * (23 * 8 + 4) {
        return Err(Error::Checkpoint(format!(
            "payload size does not match {n} Gaussians"
        )));
    }
    let mut g = GaussianSet::default();
    for _ in 0..n {
        g.positions.push(r.v3()?);
    }
    for _ in 0..n {
        g.rotations.push(Vector4::new(r.f()?, r.f()?, r.f()?, r.f()?));
    }
    for _ in 0..n {
        g.log_scales.push(r.v3()?);
    }
    for _ in 0..n {
        g.logit_opacity.push(r.f()?);
    }
    for _ in 0..n {
        g.colors.push(r.v3()?);
    }
    for _ in 0..n {
        g.region_id.push(r.u32()?);
    }
    let mut field = MotionField {
        region_id: g.region_id.clone(),
        ..Default::default()
    };
    for _ in 0..n {
        let mut a = [0.0; 6];
        for v in &mut a {
            *v = r.f()?;
        }
        field.rot6.push(Rotation6D::from_array(a));
    }
    for _ in 0..n {
        field.trans.push(r.v3()?);
    }
    Ok(Checkpoint {
        intrinsics,
        t_cam,
        gaussians: g,
        field,
    })
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(c)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::MissingFile {
            entry: "checkpoint".into(),
            path: path.to_path_buf(),
        });
    }
    decode_checkpoint(&fs::read(path)?)
}
