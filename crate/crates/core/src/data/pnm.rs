//! Binary Netpbm I/O: P6 for color images, P5 for label masks.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{GridShape, LabelMask};
use crate::kernels::GridImage;

/// Quantizes a `[0, 1]` channel value to 8 bits.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(image: &GridImage) -> Vec<u8> {
    let s = image.shape();
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    out
}

pub fn encode_pgm(mask: &LabelMask) -> Vec<u8> {
    let s = mask.shape();
    let mut out = format!("P5\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.extend_from_slice(mask.labels());
    out
}

pub fn write_ppm(path: &Path, image: &GridImage) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_ppm(image))?;
    w.flush()?;
    Ok(())
}

pub fn write_pgm(path: &Path, mask: &LabelMask) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_pgm(mask))?;
    w.flush()?;
    Ok(())
}

/// Splits a Netpbm header into magic, width, height, maxval and the pixel payload.
fn parse_header(bytes: &[u8]) -> Result<(&[u8], usize, usize, usize, &[u8])> {
    let mut pos = 0;
    let mut tokens: Vec<&[u8]> = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated Netpbm header".into()));
        }
        tokens.push(&bytes[start..pos]);
    }
    // exactly one whitespace byte separates maxval from the raster
    if pos >= bytes.len() {
        return Err(Error::Format("missing Netpbm raster".into()));
    }
    pos += 1;
    let num = |t: &[u8]| -> Result<usize> {
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad header field {:?}", String::from_utf8_lossy(t))))
    };
    Ok((tokens[0], num(tokens[1])?, num(tokens[2])?, num(tokens[3])?, &bytes[pos..]))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<GridImage> {
    let (magic, w, h, maxval, raster) = parse_header(bytes)?;
    if magic != b"P6" {
        return Err(Error::Format("expected binary PPM (P6)".into()));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    let shape = GridShape::new(h, w).map_err(|e| Error::Format(e.to_string()))?;
    if raster.len() < 3 * shape.len() {
        return Err(Error::Format("PPM raster is truncated".into()));
    }
    let rgb = raster[..3 * shape.len()]
        .iter()
        .map(|&b| (b as f64 / maxval as f64).min(1.0))
        .collect();
    GridImage::new(shape, rgb)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMask> {
    let (magic, w, h, maxval, raster) = parse_header(bytes)?;
    if magic != b"P5" {
        return Err(Error::Format("expected binary PGM (P5)".into()));
    }
    if maxval != 255 {
        return Err(Error::Format(format!("label masks need maxval 255, got {maxval}")));
    }
    let shape = GridShape::new(h, w).map_err(|e| Error::Format(e.to_string()))?;
    if raster.len() < shape.len() {
        return Err(Error::Format("PGM raster is truncated".into()));
    }
    LabelMask::new(shape, raster[..shape.len()].to_vec())
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    Ok(buf)
}

pub fn read_ppm(path: &Path) -> Result<GridImage> {
    decode_ppm(&read_all(path)?)
}

pub fn read_pgm(path: &Path) -> Result<LabelMask> {
    decode_pgm(&read_all(path)?)
}
