//! Minimal binary PGM (P5) / PPM (P6) reader and writer, maxval 255.
//!
//! The on-disk byte layout is fixed (`P5\n{w} {h}\n255\n` + raw payload) so
//! that equal inputs always produce byte-identical files.

use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic, expected {expected}")]
    BadMagic { path: String, expected: &'static str },
    #[error("{path}: malformed header")]
    BadHeader { path: String },
    #[error("{path}: unsupported maxval {maxval}, only 255 is supported")]
    BadMaxval { path: String, maxval: u32 },
    #[error("{path}: payload has {got} bytes, expected {expected}")]
    ShortPayload {
        path: String,
        got: usize,
        expected: usize,
    },
}

/// A grayscale byte image (one byte per pixel, row-major).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// An RGB byte image (three bytes per pixel, row-major).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

fn io_err(path: &Path, source: std::io::Error) -> PnmError {
    PnmError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<(), PnmError> {
    assert_eq!(data.len(), width * height, "pgm payload size mismatch");
    let mut buf = Vec::with_capacity(data.len() + 32);
    write!(buf, "P5\n{} {}\n255\n", width, height).expect("vec write");
    buf.extend_from_slice(data);
    fs::write(path, &buf).map_err(|e| io_err(path, e))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<(), PnmError> {
    assert_eq!(data.len(), width * height * 3, "ppm payload size mismatch");
    let mut buf = Vec::with_capacity(data.len() + 32);
    write!(buf, "P6\n{} {}\n255\n", width, height).expect("vec write");
    buf.extend_from_slice(data);
    fs::write(path, &buf).map_err(|e| io_err(path, e))
}

/// Parse the header after the magic: width, height, maxval, then one
/// whitespace byte before the payload. `#` comments are accepted.
fn parse_header(path: &Path, bytes: &[u8], pos: &mut usize) -> Result<(usize, usize), PnmError> {
    let bad = || PnmError::BadHeader {
        path: path.display().to_string(),
    };
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if start == *pos {
            return Err(bad());
        }
        let text = std::str::from_utf8(&bytes[start..*pos]).map_err(|_| bad())?;
        *field = text.parse().map_err(|_| bad())?;
    }
    if *pos >= bytes.len() || !bytes[*pos].is_ascii_whitespace() {
        return Err(bad());
    }
    *pos += 1; // single whitespace separates header from payload
    if fields[2] != 255 {
        return Err(PnmError::BadMaxval {
            path: path.display().to_string(),
            maxval: fields[2] as u32,
        });
    }
    Ok((fields[0], fields[1]))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage, PnmError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if !bytes.starts_with(b"P5") {
        return Err(PnmError::BadMagic {
            path: path.display().to_string(),
            expected: "P5",
        });
    }
    let mut pos = 2;
    let (width, height) = parse_header(path, &bytes, &mut pos)?;
    let expected = width * height;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(PnmError::ShortPayload {
            path: path.display().to_string(),
            got: payload.len(),
            expected,
        });
    }
    Ok(GrayImage {
        width,
        height,
        data: payload[..expected].to_vec(),
    })
}

pub fn read_ppm(path: &Path) -> Result<RgbImage, PnmError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if !bytes.starts_with(b"P6") {
        return Err(PnmError::BadMagic {
            path: path.display().to_string(),
            expected: "P6",
        });
    }
    let mut pos = 2;
    let (width, height) = parse_header(path, &bytes, &mut pos)?;
    let expected = width * height * 3;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(PnmError::ShortPayload {
            path: path.display().to_string(),
            got: payload.len(),
            expected,
        });
    }
    Ok(RgbImage {
        width,
        height,
        data: payload[..expected].to_vec(),
    })
}
