//! Binary PPM (P6) and PGM (P5) image files, 8-bit.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; 3 * width * height] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    write_bytes(path, &out)
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    write_bytes(path, &out)
}

/// Reads the P6/P5 header: magic, then 3 decimal fields separated by
/// whitespace or #-comments, then one whitespace byte before pixel data.
fn parse_header<'a>(path: &Path, bytes: &'a [u8], magic: &str) -> Result<(usize, usize, &'a [u8])> {
    let bad = |why: &str| Error::Dataset(format!("{}: {why}", path.display()));
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(bad(&format!("not a {magic} file")));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while !matches!(bytes.get(pos), None | Some(b'\n')) {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(c) if c.is_ascii_digit() => break,
                _ => return Err(bad("truncated header")),
            }
        }
        let mut v = 0usize;
        while let Some(c) = bytes.get(pos).filter(|c| c.is_ascii_digit()) {
            v = v * 10 + (c - b'0') as usize;
            pos += 1;
        }
        *field = v;
    }
    if !matches!(bytes.get(pos), Some(c) if c.is_ascii_whitespace()) {
        return Err(bad("missing separator after maxval"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(bad("only maxval 255 supported"));
    }
    Ok((w, h, &bytes[pos..]))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let (width, height, rest) = parse_header(path, &bytes, "P6")?;
    let n = 3 * width * height;
    if rest.len() < n {
        return Err(Error::Dataset(format!("{}: short pixel data", path.display())));
    }
    Ok(RgbImage { width, height, data: rest[..n].to_vec() })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let (width, height, rest) = parse_header(path, &bytes, "P5")?;
    let n = width * height;
    if rest.len() < n {
        return Err(Error::Dataset(format!("{}: short pixel data", path.display())));
    }
    Ok(GrayImage { width, height, data: rest[..n].to_vec() })
}
