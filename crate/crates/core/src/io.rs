//! File helpers: atomic writes, PGM rasters, CSV tables.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Maps `[-1, 1]` linearly onto `0..=255` (clamping outside values).
pub fn to_gray8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

pub fn from_gray8(b: u8) -> f32 {
    b as f32 / 255.0 * 2.0 - 1.0
}

/// Binary PGM (P5, maxval 255) of a single-channel image whose last two
/// non-unit extents are height and width.
pub fn encode_pgm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = image_dims(img)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| to_gray8(v)));
    Ok(out)
}

pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    write_atomic(path, &encode_pgm(img)?)
}

/// Parses a P5 PGM into a `[h, w]` tensor in `[-1, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::Parse(format!("pgm: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary graymap"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    if fields[3] != "255" {
        return Err(bad("only maxval 255 is supported"));
    }
    let px = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated pixels"))?;
    Tensor::new(vec![h, w], px.iter().map(|&b| from_gray8(b)).collect())
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    decode_pgm(&fs::read(path)?)
}

fn image_dims(img: &Tensor) -> Result<(usize, usize)> {
    let dims: Vec<usize> = img.shape().iter().copied().filter(|&d| d != 1).collect();
    match dims.as_slice() {
        [h, w] => Ok((*h, *w)),
        _ => Err(Error::Shape(format!(
            "expected a single-channel image, got {:?}",
            img.shape()
        ))),
    }
}

/// Comma-separated table with a header row and LF line endings.
#[derive(Clone, Debug, Default)]
pub struct Csv {
    text: String,
    columns: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self {
            text: format!("{}\n", header.join(",")),
            columns: header.len(),
        }
    }

    pub fn row<S: AsRef<str>>(&mut self, cells: &[S]) {
        debug_assert_eq!(cells.len(), self.columns);
        let cells: Vec<&str> = cells.iter().map(AsRef::as_ref).collect();
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.text.as_bytes())
    }
}

/// Shortest round-trippable decimal form, so CSV output is stable across runs.
pub fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}
