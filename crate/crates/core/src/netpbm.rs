//! Binary PGM (P5) and PPM (P6) with maxval 255.

use std::path::Path;

use crate::error::{with_path, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    /// Interleaved samples, row-major.
    pub bytes: Vec<u8>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Raster {
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.bytes);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // whitespace and comments
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
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
                pos += 1;
            }
            if start == pos {
                return Err(format_err("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| format_err("non-ASCII header"))?);
        }
        let channels = match fields[0] {
            "P5" => 1,
            "P6" => 3,
            other => return Err(format_err(format!("unsupported magic `{other}` (expected P5 or P6)"))),
        };
        let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format_err(format!("bad {what} `{s}`")));
        let width = num(fields[1], "width")?;
        let height = num(fields[2], "height")?;
        let maxval = num(fields[3], "maxval")?;
        if maxval != 255 {
            return Err(format_err(format!("maxval {maxval} unsupported (expected 255)")));
        }
        if width == 0 || height == 0 {
            return Err(format_err("zero extent"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let n = width * height * channels;
        if bytes.len() < pos + n {
            return Err(format_err(format!("raster truncated: need {n} bytes")));
        }
        Ok(Raster {
            width,
            height,
            channels,
            bytes: bytes[pos..pos + n].to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&with_path(path, std::fs::read(path))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        with_path(path, std::fs::write(path, self.encode()))
    }
}
