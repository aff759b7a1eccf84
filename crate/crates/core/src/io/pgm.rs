//! Binary PGM (P5). Images map `0..=maxval` linearly onto `[0, 1]`; masks
//! store raw label values.

use std::path::Path;

use super::{atomic_write, read_bytes};
use crate::error::{Error, Result};
use crate::image::{GrayImage, LabelMask};

/// Sample width of a written image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BitDepth {
    #[default]
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn maxval(self) -> u16 {
        match self {
            BitDepth::Eight => 255,
            BitDepth::Sixteen => 65535,
        }
    }
}

/// Decoded raster before intensity interpretation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

fn fmt_err(msg: impl Into<String>, offset: usize) -> Error {
    Error::Format { msg: msg.into(), offset }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    /// Next decimal field and the offset of its first digit.
    fn number(&mut self, what: &str) -> Result<(usize, usize)> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(fmt_err(format!("expected {what}"), start));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map(|v| (v, start))
            .ok_or_else(|| fmt_err(format!("{what} out of range"), start))
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Pgm> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(fmt_err("missing P5 magic", 0));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let (width, _) = cur.number("width")?;
    let (height, _) = cur.number("height")?;
    let (maxval, maxval_at) = cur.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(fmt_err(format!("maxval {maxval} outside 1..=65535"), maxval_at));
    }
    if width == 0 || height == 0 {
        return Err(fmt_err(format!("empty raster {width}×{height}"), maxval_at));
    }
    match bytes.get(cur.pos) {
        Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(fmt_err("expected one whitespace byte before raster", cur.pos)),
    }
    let start = cur.pos;
    let wide = maxval > 255;
    let n = width
        .checked_mul(height)
        .ok_or_else(|| fmt_err("raster size overflows", maxval_at))?;
    let need = n * if wide { 2 } else { 1 };
    let have = bytes.len() - start;
    if have < need {
        return Err(fmt_err(format!("truncated raster: {have} of {need} bytes"), bytes.len()));
    }
    if have > need {
        return Err(fmt_err(format!("{} trailing bytes after raster", have - need), start + need));
    }
    let raw = &bytes[start..];
    let samples: Vec<u16> = if wide {
        raw.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
    } else {
        raw.iter().map(|&b| b as u16).collect()
    };
    if let Some(i) = samples.iter().position(|&v| v as usize > maxval) {
        return Err(fmt_err(
            format!("sample {} exceeds maxval {maxval}", samples[i]),
            start + i * if wide { 2 } else { 1 },
        ));
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

pub fn encode_pgm(pgm: &Pgm) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", pgm.width, pgm.height, pgm.maxval).into_bytes();
    if pgm.maxval > 255 {
        for v in &pgm.samples {
            out.extend_from_slice(&v.to_be_bytes());
        }
    } else {
        out.extend(pgm.samples.iter().map(|&v| v as u8));
    }
    out
}

/// Quantizes intensities to `round(v · maxval)`.
pub fn image_to_pgm(image: &GrayImage, depth: BitDepth) -> Pgm {
    let m = depth.maxval() as f64;
    Pgm {
        width: image.width,
        height: image.height,
        maxval: depth.maxval(),
        samples: image.data.iter().map(|v| (v.clamp(0.0, 1.0) * m).round() as u16).collect(),
    }
}

pub fn pgm_to_image(pgm: &Pgm) -> Result<GrayImage> {
    let m = pgm.maxval as f64;
    GrayImage::new(pgm.height, pgm.width, pgm.samples.iter().map(|&v| v as f64 / m).collect())
}

/// Raw labels; at most 8-bit and every label below `class_count`.
pub fn pgm_to_mask(pgm: &Pgm, class_count: usize) -> Result<LabelMask> {
    if pgm.maxval > 255 {
        return Err(fmt_err(format!("mask maxval {} is not 8-bit", pgm.maxval), 0));
    }
    let data: Vec<u8> = pgm.samples.iter().map(|&v| v as u8).collect();
    let mask = LabelMask::new(pgm.height, pgm.width, data)?;
    mask.validate(class_count)?;
    Ok(mask)
}

pub fn mask_to_pgm(mask: &LabelMask) -> Pgm {
    Pgm {
        width: mask.width,
        height: mask.height,
        maxval: 255,
        samples: mask.data.iter().map(|&v| v as u16).collect(),
    }
}

pub fn read_image(path: &Path) -> Result<GrayImage> {
    pgm_to_image(&decode_pgm(&read_bytes(path)?).map_err(|e| e.in_file(path))?)
}

pub fn write_image(path: &Path, image: &GrayImage, depth: BitDepth) -> Result<()> {
    atomic_write(path, &encode_pgm(&image_to_pgm(image, depth)))
}

pub fn read_mask(path: &Path, class_count: usize) -> Result<LabelMask> {
    pgm_to_mask(&decode_pgm(&read_bytes(path)?).map_err(|e| e.in_file(path))?, class_count).map_err(|e| e.in_file(path))
}

pub fn write_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    atomic_write(path, &encode_pgm(&mask_to_pgm(mask)))
}
