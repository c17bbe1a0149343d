//! Portable float map: `Pf` (gray) or `PF` (RGB), f32 samples, rows stored
//! bottom-up. A negative scale marks little-endian data.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{RgbImage, ScalarMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum PfmData {
    Gray(ScalarMap),
    Color(RgbImage),
}

/// Splits off the next whitespace-delimited token, consuming exactly one
/// trailing whitespace byte.
fn next_token<'a>(buf: &'a [u8], pos: &mut usize) -> Option<&'a str> {
    while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos || *pos >= buf.len() {
        return None;
    }
    let tok = std::str::from_utf8(&buf[start..*pos]).ok()?;
    *pos += 1;
    Some(tok)
}

pub fn read_pfm(path: &Path) -> Result<PfmData> {
    let buf = fs::read(path)?;
    parse_pfm(&buf).map_err(|e| match e {
        Error::CorruptHeader(m) => Error::CorruptHeader(format!("{}: {m}", path.display())),
        Error::UnsupportedFormat(m) => {
            Error::UnsupportedFormat(format!("{}: {m}", path.display()))
        }
        other => other,
    })
}

pub(crate) fn parse_pfm(buf: &[u8]) -> Result<PfmData> {
    let mut pos = 0;
    let magic = next_token(buf, &mut pos).ok_or_else(|| Error::CorruptHeader("empty file".into()))?;
    let channels = match magic {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::UnsupportedFormat(format!("not a PFM file (magic {other:?})"))),
    };
    let mut field = |name: &str| {
        next_token(buf, &mut pos).ok_or_else(|| Error::CorruptHeader(format!("missing {name}")))
    };
    let width: usize = field("width")?
        .parse()
        .map_err(|_| Error::CorruptHeader("bad width".into()))?;
    let height: usize = field("height")?
        .parse()
        .map_err(|_| Error::CorruptHeader("bad height".into()))?;
    let scale: f64 = field("scale")?
        .parse()
        .map_err(|_| Error::CorruptHeader("bad scale".into()))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::CorruptHeader(format!("invalid scale {scale}")));
    }
    let little = scale < 0.0;
    let n = width * height * channels;
    let payload = &buf[pos..];
    if payload.len() != 4 * n {
        return Err(Error::CorruptHeader(format!(
            "header says {width}x{height}x{channels} but payload holds {} bytes",
            payload.len()
        )));
    }
    let mut data = vec![0.0; n];
    let row = width * channels;
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let bytes = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(bytes)
        } else {
            f32::from_be_bytes(bytes)
        };
        let file_row = i / row;
        let col = i % row;
        data[(height - 1 - file_row) * row + col] = v as f64;
    }
    Ok(if channels == 1 {
        PfmData::Gray(ScalarMap {
            width,
            height,
            data,
        })
    } else {
        PfmData::Color(RgbImage {
            width,
            height,
            data,
        })
    })
}

/// Writes little-endian PFM. Values are rounded to `f32`.
pub fn write_pfm(
    path: &Path,
    channels: usize,
    width: usize,
    height: usize,
    data: &[f64],
) -> Result<()> {
    let magic = match channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::UnsupportedFormat(format!("PFM with {c} channels"))),
    };
    let row = width * channels;
    let mut out = Vec::with_capacity(32 + 4 * data.len());
    write!(out, "{magic}\n{width} {height}\n-1.0\n")?;
    for y in (0..height).rev() {
        for v in &data[y * row..(y + 1) * row] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scalar_map_round_trip_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..256).map(|_| (rng.random::<f32>() * 10.0) as f64).collect();
        let mut data = data;
        data[5] = f64::NAN;
        let m = ScalarMap::new(16, 16, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        m.write(&p).unwrap();
        let back = ScalarMap::read(&p).unwrap();
        for (a, b) in m.data.iter().zip(&back.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rows_are_stored_bottom_up() {
        let m = ScalarMap::new(1, 2, vec![1.0, 2.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        m.write(&p).unwrap();
        let raw = fs::read(&p).unwrap();
        let payload = &raw[raw.len() - 8..];
        assert_eq!(f32::from_le_bytes(payload[0..4].try_into().unwrap()), 2.0);
    }

    #[test]
    fn big_endian_files_are_read() {
        let mut buf = b"Pf\n2 1\n1.0\n".to_vec();
        buf.extend_from_slice(&1.5f32.to_be_bytes());
        buf.extend_from_slice(&(-2.0f32).to_be_bytes());
        match parse_pfm(&buf).unwrap() {
            PfmData::Gray(m) => assert_eq!(m.data, vec![1.5, -2.0]),
            _ => panic!("expected gray"),
        }
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let mut buf = b"Pf\n2 2\n-1.0\n".to_vec();
        buf.extend_from_slice(&[0u8; 12]);
        assert!(matches!(parse_pfm(&buf), Err(Error::CorruptHeader(_))));
        assert!(matches!(parse_pfm(b"P6\n1 1\n255\n"), Err(Error::UnsupportedFormat(_))));
    }
}
