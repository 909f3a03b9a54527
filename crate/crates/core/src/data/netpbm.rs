//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    pub maxval: u16,
    /// Interleaved samples, row-major.
    pub pixels: Vec<u8>,
}

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

/// Quantizes `[0,1]` values as `round(255·v)`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), width * height);
    let mut out = header("P5", width, height);
    out.extend(values.iter().map(|&v| quantize(v)));
    out
}

/// `planar` holds three `height×width` planes (R, G, B).
pub fn encode_ppm(width: usize, height: usize, planar: &[f64]) -> Vec<u8> {
    let plane = width * height;
    assert_eq!(planar.len(), 3 * plane);
    let mut out = header("P6", width, height);
    for i in 0..plane {
        for c in 0..3 {
            out.push(quantize(planar[c * plane + i]));
        }
    }
    out
}

fn malformed(offset: usize, reason: impl Into<String>) -> Error {
    Error::Malformed {
        format: "netpbm",
        offset,
        reason: reason.into(),
    }
}

fn skip_space_and_comments(buf: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < buf.len() && buf[pos] == b'#' {
            while pos < buf.len() && buf[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn read_uint(buf: &[u8], pos: usize, what: &str) -> Result<(usize, usize)> {
    let start = skip_space_and_comments(buf, pos);
    let mut end = start;
    while end < buf.len() && buf[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err(malformed(start, format!("expected {what}")));
    }
    let v = std::str::from_utf8(&buf[start..end])
        .unwrap()
        .parse::<usize>()
        .map_err(|_| malformed(start, format!("{what} out of range")))?;
    Ok((v, end))
}

pub fn decode(buf: &[u8]) -> Result<Raster> {
    if buf.len() < 2 || buf[0] != b'P' {
        return Err(malformed(0, "missing P5/P6 magic"));
    }
    let channels = match buf[1] {
        b'5' => 1,
        b'6' => 3,
        _ => return Err(malformed(1, "only binary P5 and P6 are supported")),
    };
    let (width, pos) = read_uint(buf, 2, "width")?;
    let (height, pos) = read_uint(buf, pos, "height")?;
    let (maxval, pos) = read_uint(buf, pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(malformed(pos, "zero image extent"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(malformed(pos, format!("maxval {maxval} not in 1..=255")));
    }
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err(malformed(pos, "expected single whitespace after maxval"));
    }
    let data = pos + 1;
    let need = width * height * channels;
    if buf.len() - data < need {
        return Err(malformed(
            buf.len(),
            format!("payload truncated: need {need} bytes, have {}", buf.len() - data),
        ));
    }
    Ok(Raster {
        width,
        height,
        channels,
        maxval: maxval as u16,
        pixels: buf[data..data + need].to_vec(),
    })
}

pub fn read(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Malformed {
            format,
            offset,
            reason,
        } => Error::Malformed {
            format,
            offset,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    })
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_is_exact() {
        let bytes = encode_pgm(2, 2, &[0.0, 1.0, 0.5, 0.2]);
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&bytes[11..], &[0, 255, 128, 51]);
    }

    #[test]
    fn ppm_interleaves_planes() {
        let planar = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let bytes = encode_ppm(2, 1, &planar);
        assert_eq!(&bytes[11..], &[255, 0, 0, 0, 255, 0]);
    }

    #[test]
    fn decodes_comments_and_small_maxval() {
        let mut bytes = b"P5 # comment\n3 1\n# another\n15\n".to_vec();
        bytes.extend_from_slice(&[0, 8, 15]);
        let r = decode(&bytes).unwrap();
        assert_eq!((r.width, r.height, r.channels, r.maxval), (3, 1, 1, 15));
        assert_eq!(r.pixels, vec![0, 8, 15]);
    }

    #[test]
    fn malformed_headers_report_offsets() {
        match decode(b"P3\n1 1\n255\n").unwrap_err() {
            Error::Malformed { offset, .. } => assert_eq!(offset, 1),
            e => panic!("{e}"),
        }
        match decode(b"P5\n1 x\n255\n").unwrap_err() {
            Error::Malformed { offset, .. } => assert_eq!(offset, 5),
            e => panic!("{e}"),
        }
        assert!(decode(b"P5\n2 2\n255\n\x01").is_err());
        assert!(decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }
}
