//! Binary PGM (P5, maxval 255) reading and writing.
//!
//! Parse failures report the file and the byte offset where the problem was
//! found. Writes go through a temp file and rename so readers never observe a
//! partial file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::image::{BinaryMask, GrayImage};

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: byte {offset}: {what}")]
    Parse {
        path: PathBuf,
        offset: usize,
        what: String,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> PgmError {
    PgmError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, offset: usize, what: impl Into<String>) -> PgmError {
    PgmError::Parse {
        path: path.to_path_buf(),
        offset,
        what: what.into(),
    }
}

/// Write bytes to `path` atomically (temp file in the same directory, then rename).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), PgmError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<(), PgmError> {
    assert_eq!(data.len(), width * height, "pixel buffer size mismatch");
    let header = format!("P5\n{} {}\n255\n", width, height);
    let mut bytes = Vec::with_capacity(header.len() + data.len());
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend_from_slice(data);
    atomic_write(path, &bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    /// Skip whitespace and `#` comments (which run to end of line).
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn read_uint(&mut self, what: &str) -> Result<usize, PgmError> {
        self.skip_separators();
        let start = self.pos;
        let mut value: usize = 0;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((self.bytes[self.pos] - b'0') as usize))
                .ok_or_else(|| parse_err(self.path, start, format!("{what} overflows")))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(parse_err(
                self.path,
                self.pos,
                format!("expected {what}, found {}", describe_byte(self.bytes.get(self.pos))),
            ));
        }
        Ok(value)
    }
}

fn describe_byte(b: Option<&u8>) -> String {
    match b {
        Some(b) => format!("byte 0x{b:02x}"),
        None => "end of file".to_string(),
    }
}

/// Read a binary PGM. Returns (width, height, pixels).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), PgmError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if !bytes.starts_with(b"P5") {
        return Err(parse_err(path, 0, "missing P5 magic"));
    }
    cur.pos = 2;
    let width = cur.read_uint("width")?;
    let height = cur.read_uint("height")?;
    let maxval = cur.read_uint("maxval")?;
    if maxval != 255 {
        return Err(parse_err(path, cur.pos, format!("unsupported maxval {maxval}, expected 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(parse_err(path, cur.pos, "expected single whitespace before raster"));
    }
    cur.pos += 1;
    let expected = width
        .checked_mul(height)
        .ok_or_else(|| parse_err(path, 2, "image dimensions overflow"))?;
    let available = bytes.len() - cur.pos;
    if available < expected {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("raster truncated: expected {expected} bytes, found {available}"),
        ));
    }
    Ok((width, height, bytes[cur.pos..cur.pos + expected].to_vec()))
}

pub fn write_gray(path: &Path, image: &GrayImage) -> Result<(), PgmError> {
    write_pgm(path, image.width(), image.height(), image.data())
}

pub fn read_gray(path: &Path) -> Result<GrayImage, PgmError> {
    let (w, h, data) = read_pgm(path)?;
    GrayImage::from_raw(w, h, data)
        .map_err(|e| parse_err(path, 0, e.to_string()))
}

/// Masks are stored with 0 = background and 255 = aircraft.
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<(), PgmError> {
    let data: Vec<u8> = mask.data().iter().map(|&v| if v == 1 { 255 } else { 0 }).collect();
    write_pgm(path, mask.width(), mask.height(), &data)
}

pub fn read_mask(path: &Path) -> Result<BinaryMask, PgmError> {
    let (w, h, data) = read_pgm(path)?;
    let mut bits = Vec::with_capacity(data.len());
    for (i, &v) in data.iter().enumerate() {
        match v {
            0 => bits.push(0),
            255 => bits.push(1),
            other => {
                // Raster starts after the header; recover its offset for the report.
                let header_len = format!("P5\n{w} {h}\n255\n").len();
                return Err(parse_err(
                    path,
                    header_len + i,
                    format!("mask value {other} is neither 0 nor 255"),
                ));
            }
        }
    }
    BinaryMask::from_raw(w, h, bits).map_err(|e| parse_err(path, 0, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().expect("tempdir")
    }

    #[test]
    fn round_trip_gray() {
        let dir = tmpdir();
        let path = dir.path().join("a.pgm");
        let img = GrayImage::from_raw(3, 2, vec![0, 10, 20, 30, 200, 255]).unwrap();
        write_gray(&path, &img).unwrap();
        assert_eq!(read_gray(&path).unwrap(), img);
    }

    #[test]
    fn round_trip_mask() {
        let dir = tmpdir();
        let path = dir.path().join("m.pgm");
        let mask = BinaryMask::from_raw(2, 2, vec![0, 1, 1, 0]).unwrap();
        write_mask(&path, &mask).unwrap();
        assert_eq!(read_mask(&path).unwrap(), mask);
    }

    #[test]
    fn truncated_raster_reports_offset() {
        let dir = tmpdir();
        let path = dir.path().join("t.pgm");
        std::fs::write(&path, b"P5\n4 4\n255\nshort").unwrap();
        let err = read_pgm(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("truncated"), "unexpected message: {msg}");
        assert!(msg.contains("byte"), "offset missing from: {msg}");
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tmpdir();
        let path = dir.path().join("b.pgm");
        std::fs::write(&path, b"P6\n1 1\n255\nx").unwrap();
        assert!(read_pgm(&path).is_err());
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let dir = tmpdir();
        let path = dir.path().join("c.pgm");
        std::fs::write(&path, b"P5\n# generated\n2 1\n255\nab").unwrap();
        let (w, h, data) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(data, b"ab");
    }

    #[test]
    fn mask_with_stray_value_names_byte() {
        let dir = tmpdir();
        let path = dir.path().join("s.pgm");
        std::fs::write(&path, b"P5\n2 1\n255\n\x00\x7f").unwrap();
        let err = read_mask(&path).unwrap_err();
        assert!(err.to_string().contains("127"), "{err}");
    }
}
