//! Middlebury `.flo`: f32 magic 202021.25, i32 width, i32 height, then
//! row-major interleaved `(du, dv)` f32 pairs, all little-endian.

use std::fs;
use std::path::Path;

use super::FlowMap;
use crate::error::{Error, Result};

pub const FLO_MAGIC: f32 = 202021.25;

pub fn read_flo(path: &Path) -> Result<FlowMap> {
    let buf = fs::read(path)?;
    parse_flo(&buf).map_err(|e| match e {
        Error::CorruptHeader(m) => Error::CorruptHeader(format!("{}: {m}", path.display())),
        Error::UnsupportedFormat(m) => {
            Error::UnsupportedFormat(format!("{}: {m}", path.display()))
        }
        other => other,
    })
}

pub(crate) fn parse_flo(buf: &[u8]) -> Result<FlowMap> {
    if buf.len() < 12 {
        return Err(Error::CorruptHeader("file shorter than the .flo header".into()));
    }
    let word = |i: usize| [buf[i], buf[i + 1], buf[i + 2], buf[i + 3]];
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(Error::UnsupportedFormat(format!("bad .flo magic {magic}")));
    }
    let width = i32::from_le_bytes(word(4));
    let height = i32::from_le_bytes(word(8));
    if width <= 0 || height <= 0 {
        return Err(Error::CorruptHeader(format!("invalid size {width}x{height}")));
    }
    let (width, height) = (width as usize, height as usize);
    let payload = &buf[12..];
    if payload.len() != 8 * width * height {
        return Err(Error::CorruptHeader(format!(
            "header says {width}x{height} but payload holds {} bytes",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    FlowMap::new(width, height, data)
}

pub fn write_flo(path: &Path, flow: &FlowMap) -> Result<()> {
    let mut out = Vec::with_capacity(12 + 4 * flow.data.len());
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for v in &flow.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_payload_mismatch_is_corrupt() {
        let mut buf = FLO_MAGIC.to_le_bytes().to_vec();
        buf.extend_from_slice(&4i32.to_le_bytes());
        buf.extend_from_slice(&4i32.to_le_bytes());
        buf.extend_from_slice(&[0u8; 8 * 15]);
        assert!(matches!(parse_flo(&buf), Err(Error::CorruptHeader(_))));
    }

    #[test]
    fn wrong_magic_is_unsupported() {
        let mut buf = 1.0f32.to_le_bytes().to_vec();
        buf.extend_from_slice(&[0u8; 8]);
        assert!(matches!(parse_flo(&buf), Err(Error::UnsupportedFormat(_))));
    }

    proptest! {
        #[test]
        fn round_trip(w in 1usize..6, h in 1usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data = (0..2 * w * h).map(|_| rng.random_range(-50.0f32..50.0) as f64).collect();
            let f = FlowMap::new(w, h, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("f.flo");
            f.write(&p).unwrap();
            prop_assert_eq!(FlowMap::read(&p).unwrap(), f);
        }
    }
}
