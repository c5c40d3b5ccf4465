//! Binary PGM (P5) reading and writing.
//!
//! Dataset channel planes are 16-bit (maxval 65535, big-endian samples per
//! the netpbm convention); heat-map exports are 8-bit (maxval 255).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// A decoded P5 image; `pixels` are widened to u16 regardless of depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

fn encode_header(width: usize, height: usize, maxval: u16) -> Vec<u8> {
    format!("P5\n{width} {height}\n{maxval}\n").into_bytes()
}

/// Write a 16-bit P5 file (maxval 65535, big-endian samples).
pub fn write_pgm16(path: &Path, width: usize, height: usize, pixels: &[u16]) -> Result<()> {
    assert_eq!(pixels.len(), width * height, "pixel count mismatch");
    let mut buf = encode_header(width, height, 65535);
    buf.reserve(pixels.len() * 2);
    for &p in pixels {
        buf.extend_from_slice(&p.to_be_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Write an 8-bit P5 file (maxval 255).
pub fn write_pgm8(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height, "pixel count mismatch");
    let mut buf = encode_header(width, height, 255);
    buf.extend_from_slice(pixels);
    fs::write(path, buf)?;
    Ok(())
}

/// Read a binary P5 file of either depth. Handles `#` comments and arbitrary
/// whitespace between header tokens.
pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = fs::read(path)?;
    parse_pgm(&bytes).map_err(|msg| Error::Parse(format!("{}: {msg}", path.display())))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<Pgm, String> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err("not a binary PGM (missing P5 magic)".into());
    }
    let mut pos = 2usize;
    let mut token = |pos: &mut usize| -> std::result::Result<usize, String> {
        // skip whitespace and comment lines
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
            return Err("malformed header: expected an integer".into());
        }
        std::str::from_utf8(&bytes[start..*pos])
            .map_err(|_| "malformed header".to_string())?
            .parse::<usize>()
            .map_err(|_| "malformed header: integer out of range".into())
    };
    let width = token(&mut pos)?;
    let height = token(&mut pos)?;
    let maxval = token(&mut pos)?;
    if width == 0 || height == 0 {
        return Err("malformed header: zero dimension".into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("malformed header: maxval {maxval} outside 1..=65535"));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("malformed header: missing separator before raster".into());
    }
    pos += 1;
    let raster = &bytes[pos..];
    let n = width * height;
    let pixels = if maxval > 255 {
        if raster.len() != n * 2 {
            return Err(format!("raster has {} bytes, expected {}", raster.len(), n * 2));
        }
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        if raster.len() != n {
            return Err(format!("raster has {} bytes, expected {n}", raster.len()));
        }
        raster.iter().map(|&b| b as u16).collect()
    };
    Ok(Pgm { width, height, maxval: maxval as u16, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixteen_bit_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let pixels: Vec<u16> = (0..12).map(|i| (i * 5461) as u16).collect();
        write_pgm16(&path, 4, 3, &pixels).unwrap();
        let pgm = read_pgm(&path).unwrap();
        assert_eq!((pgm.width, pgm.height, pgm.maxval), (4, 3, 65535));
        assert_eq!(pgm.pixels, pixels);
    }

    #[test]
    fn eight_bit_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let pixels: Vec<u8> = (0..6).map(|i| i * 40).collect();
        write_pgm8(&path, 3, 2, &pixels).unwrap();
        let pgm = read_pgm(&path).unwrap();
        assert_eq!(pgm.maxval, 255);
        assert_eq!(pgm.pixels, vec![0, 40, 80, 120, 160, 200]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# a comment\n2 1\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 9]);
        let pgm = parse_pgm(&bytes).unwrap();
        assert_eq!(pgm.pixels, vec![7, 9]);
    }

    #[test]
    fn malformed_headers_are_rejected() {
        assert!(parse_pgm(b"P6\n1 1\n255\nx").is_err());
        assert!(parse_pgm(b"P5\n1\n255\nx").is_err());
        assert!(parse_pgm(b"P5\n1 1\n70000\nxx").is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\nxy").is_err()); // short raster
        assert!(parse_pgm(b"P5\n0 1\n255\n").is_err());
    }

    #[test]
    fn full_scale_pixel_reads_back_as_maxval() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        write_pgm16(&path, 1, 1, &[65535]).unwrap();
        let pgm = read_pgm(&path).unwrap();
        assert_eq!(pgm.pixels, vec![65535]);
    }
}
