//! Integer class maps and their binary PGM (P5) encoding.

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};

/// Ground-truth sentinel excluded from losses and metrics.
pub const IGNORE: u8 = 255;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        LabelMap {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                labels.push(f(y, x));
            }
        }
        LabelMap {
            height,
            width,
            labels,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }
    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.labels[y * self.width + x] = v;
    }

    /// Checks every non-ignore label is below `classes`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .find(|&&l| l != IGNORE && l as usize >= classes)
        {
            Some(l) => Err(Error::Label(format!("label {l} >= class count {classes}"))),
            None => Ok(()),
        }
    }

    /// Largest non-ignore label, if any.
    pub fn max_label(&self) -> Option<u8> {
        self.labels.iter().copied().filter(|&l| l != IGNORE).max()
    }

    /// Extend to `height x width` with IGNORE on the bottom/right.
    pub fn pad_to(&self, height: usize, width: usize) -> Self {
        assert!(height >= self.height && width >= self.width);
        LabelMap::from_fn(height, width, |y, x| {
            if y < self.height && x < self.width {
                self.get(y, x)
            } else {
                IGNORE
            }
        })
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::from(FormatError::Pgm(m.to_string()));
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // whitespace and comments between header tokens
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
                return Err(bad("truncated header"));
            }
            fields.push(&bytes[start..pos]);
        }
        if fields[0] != b"P5" {
            return Err(bad("not a binary PGM (P5)"));
        }
        let num = |f: &[u8]| -> Result<usize> {
            std::str::from_utf8(f)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("malformed header number"))
        };
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("only maxval 255 label images are supported"));
        }
        // exactly one whitespace byte separates header and raster
        pos += 1;
        let need = width * height;
        let raster = bytes.get(pos..).unwrap_or(&[]);
        if raster.len() < need {
            return Err(FormatError::Truncated {
                needed: need - raster.len(),
            }
            .into());
        }
        LabelMap::new(height, width, raster[..need].to_vec())
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode_pgm()).map_err(|e| Error::from(e).at(path))
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::from(e).at(path))?;
        Self::decode_pgm(&bytes).map_err(|e| e.at(path))
    }
}
