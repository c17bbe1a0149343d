//! Binary PGM (`P5`) with maxval 65535 and big-endian 16-bit samples.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::LabelMap;
use crate::error::{Error, Result};

pub fn read_pgm16(path: &Path) -> Result<LabelMap> {
    let buf = fs::read(path)?;
    parse_pgm16(&buf).map_err(|e| match e {
        Error::CorruptHeader(m) => Error::CorruptHeader(format!("{}: {m}", path.display())),
        Error::UnsupportedFormat(m) => {
            Error::UnsupportedFormat(format!("{}: {m}", path.display()))
        }
        other => other,
    })
}

fn header_tokens(buf: &[u8]) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < buf.len() && buf[pos] == b'#' {
            while pos < buf.len() && buf[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos || pos >= buf.len() {
            return Err(Error::CorruptHeader("truncated PGM header".into()));
        }
        tokens.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
    }
    // single whitespace byte separates header and raster
    Ok((tokens, pos + 1))
}

pub(crate) fn parse_pgm16(buf: &[u8]) -> Result<LabelMap> {
    if !buf.starts_with(b"P5") {
        return Err(Error::UnsupportedFormat("not a binary PGM (P5)".into()));
    }
    let (tok, start) = header_tokens(buf)?;
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::CorruptHeader(format!("bad {what} {s:?}")))
    };
    let width = parse(&tok[1], "width")?;
    let height = parse(&tok[2], "height")?;
    let maxval = parse(&tok[3], "maxval")?;
    if maxval != 65535 {
        return Err(Error::UnsupportedFormat(format!(
            "label PGM must use maxval 65535, found {maxval}"
        )));
    }
    let payload = &buf[start.min(buf.len())..];
    if payload.len() != 2 * width * height {
        return Err(Error::CorruptHeader(format!(
            "header says {width}x{height} but payload holds {} bytes",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
        .collect();
    LabelMap::new(width, height, data)
}

pub fn write_pgm16(path: &Path, labels: &LabelMap) -> Result<()> {
    let mut out = Vec::with_capacity(32 + 2 * labels.data.len());
    write!(out, "P5\n{} {}\n65535\n", labels.width, labels.height)?;
    for &v in &labels.data {
        let v = u16::try_from(v)
            .map_err(|_| Error::InvalidParameter(format!("label {v} does not fit 16 bits")))?;
        out.extend_from_slice(&v.to_be_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}
