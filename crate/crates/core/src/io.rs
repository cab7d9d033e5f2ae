//! File plumbing shared by the model containers and report writers.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// On-disk float width for `EMB1` / `DNN1` payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::format(format!("unknown precision '{other}'"))),
        }
    }

    pub fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    /// Largest absolute round-trip error for a value of magnitude `<= max_abs`.
    pub fn roundtrip_bound(self, max_abs: f64) -> f64 {
        match self {
            Precision::F64 => 0.0,
            // half an ulp at the top binade, plus the subnormal floor
            Precision::F32 => max_abs * f32::EPSILON as f64 * 0.5 + f32::MIN_POSITIVE as f64,
        }
    }
}

pub(crate) fn put_floats(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>, precision: Precision) {
    for v in values {
        match precision {
            Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
}

/// Cursor over a byte buffer mixing `\n`-terminated text lines and binary
/// little-endian float runs.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("unterminated header line"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::format("header is not UTF-8"))
    }

    pub fn floats(&mut self, n: usize, precision: Precision) -> Result<Vec<f64>> {
        let need = n * precision.width();
        if self.bytes.len() - self.pos < need {
            return Err(Error::format(format!(
                "truncated payload: need {need} bytes, have {}",
                self.bytes.len() - self.pos
            )));
        }
        let chunk = &self.bytes[self.pos..self.pos + need];
        self.pos += need;
        let values: Vec<f64> = match precision {
            Precision::F32 => chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Precision::F64 => chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("non-finite value in payload"));
        }
        Ok(values)
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// `key=value` fields from a whitespace separated header line.
pub(crate) fn header_field<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    line.split_whitespace()
        .filter_map(|f| f.split_once('='))
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v)
}

pub(crate) fn header_usize(line: &str, key: &str) -> Result<usize> {
    header_field(line, key)
        .ok_or_else(|| Error::format(format!("header '{line}' lacks {key}=")))?
        .parse()
        .map_err(|_| Error::format(format!("bad {key}= in header '{line}'")))
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::input(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
