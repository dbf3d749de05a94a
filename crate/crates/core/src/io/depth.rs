//! Depth maps as raw little-endian `f32` (`+inf` for misses) with a text
//! header sidecar next to it (`<file>.hdr`):
//!
//! ```text
//! format f32le
//! width 64
//! height 48
//! ```

use std::path::{Path, PathBuf};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DepthHeader {
    pub width: usize,
    pub height: usize,
}

impl DepthHeader {
    pub fn parse(text: &str, path: &Path) -> Result<Self, Error> {
        let (mut width, mut height, mut format) = (None, None, None);
        for (n, line) in text.lines().enumerate() {
            let err = |m: &str| Error::parse(path, n + 1, m);
            let mut tok = line.split_whitespace();
            let (Some(key), Some(value), None) = (tok.next(), tok.next(), tok.next()) else {
                if line.trim().is_empty() {
                    continue;
                }
                return Err(err("expected `key value`"));
            };
            let dim = || value.parse::<usize>().ok().filter(|v| *v > 0).ok_or_else(|| err("bad dimension"));
            match key {
                "format" if value == "f32le" => format = Some(()),
                "format" => return Err(err("only f32le depth is supported")),
                "width" => width = Some(dim()?),
                "height" => height = Some(dim()?),
                _ => return Err(err(&format!("unknown key `{key}`"))),
            }
        }
        match (width, height, format) {
            (Some(width), Some(height), Some(())) if width.checked_mul(height).is_some_and(|n| n <= 1 << 28) => {
                Ok(Self { width, height })
            }
            _ => Err(Error::parse(path, 1, "header needs format, width and height")),
        }
    }

    pub fn format(&self) -> String {
        format!("format f32le\nwidth {}\nheight {}\n", self.width, self.height)
    }
}

pub fn sidecar_path(raw: &Path) -> PathBuf {
    let mut s = raw.as_os_str().to_owned();
    s.push(".hdr");
    PathBuf::from(s)
}

/// Decodes a raw payload for `header`.
pub fn decode_depth(header: &DepthHeader, bytes: &[u8], path: &Path) -> Result<Vec<f64>, Error> {
    let n = header.width * header.height;
    if bytes.len() != n * 4 {
        return Err(Error::Invalid(format!(
            "{}: expected {} bytes of depth, found {}",
            path.display(),
            n * 4,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn encode_depth(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect()
}

pub fn write_depth(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<(), Error> {
    debug_assert_eq!(values.len(), width * height);
    let header = DepthHeader { width, height };
    std::fs::write(path, encode_depth(values)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    std::fs::write(&side, header.format()).map_err(|e| Error::io(side, e))
}

pub fn read_depth(path: &Path) -> Result<(DepthHeader, Vec<f64>), Error> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let header = DepthHeader::parse(&text, &side)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((header, decode_depth(&header, &bytes, path)?))
}
