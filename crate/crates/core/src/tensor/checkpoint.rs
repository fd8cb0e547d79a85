//! Versioned checkpoint container.
//!
//! ```text
//! posefield-checkpoint
//! version 1
//! meta <key> <value>
//! tensor <name> <d0>x<d1>... <byte offset> <element count>
//! end
//! <little-endian f64 payload>
//! ```
//!
//! A rank-0 tensor writes its shape as `-`. Offsets are relative to the start
//! of the payload. Identical contents always serialize to identical bytes.

use std::path::Path;

use thiserror::Error;

use super::Tensor;

pub const CHECKPOINT_MAGIC: &str = "posefield-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed header line {line}: {message}")]
    Header { line: usize, message: String },
    #[error("payload too short for tensor `{0}`")]
    Truncated(String),
    #[error("missing entry `{0}`")]
    Missing(String),
    #[error("invalid name or value `{0}` (whitespace and newlines are not allowed)")]
    InvalidName(String),
    #[error("checkpoint mismatch for `{key}`: stored {stored}, expected {expected}")]
    Mismatch {
        key: String,
        stored: String,
        expected: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key, value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta(key)
            .ok_or_else(|| CheckpointError::Missing(key.to_string()))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        let raw = self.require_meta(key)?;
        raw.parse().map_err(|_| CheckpointError::Mismatch {
            key: key.to_string(),
            stored: raw.to_string(),
            expected: std::any::type_name::<T>().to_string(),
        })
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.tensors
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|rest| (rest, t)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let check = |s: &str, allow_space: bool| {
            if s.is_empty() && !allow_space
                || s.contains('\n')
                || s.contains('\r')
                || (!allow_space && s.chars().any(char::is_whitespace))
            {
                Err(CheckpointError::InvalidName(s.to_string()))
            } else {
                Ok(())
            }
        };
        let mut header = format!("{CHECKPOINT_MAGIC}\nversion {CHECKPOINT_VERSION}\n");
        for (k, v) in &self.meta {
            check(k, false)?;
            check(v, true)?;
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            check(name, false)?;
            let shape = if t.shape().is_empty() {
                "-".to_string()
            } else {
                t.shape()
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join("x")
            };
            header.push_str(&format!("tensor {name} {shape} {offset} {}\n", t.numel()));
            offset += 8 * t.numel();
        }
        header.push_str("end\n");
        let mut bytes = header.into_bytes();
        bytes.reserve(offset);
        for (_, t) in &self.tensors {
            for x in t.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut pos = 0usize;
        let mut line_no = 0usize;
        let mut next_line = || -> Option<String> {
            let rest = &bytes[pos..];
            let end = rest.iter().position(|&b| b == b'\n')?;
            pos += end + 1;
            line_no += 1;
            Some(String::from_utf8_lossy(&rest[..end]).into_owned())
        };
        if next_line().as_deref() != Some(CHECKPOINT_MAGIC) {
            return Err(CheckpointError::BadMagic);
        }
        let version_line = next_line().ok_or(CheckpointError::BadMagic)?;
        let version: u32 = version_line
            .strip_prefix("version ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or(CheckpointError::Header {
                line: 2,
                message: version_line.clone(),
            })?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut meta = Vec::new();
        let mut manifest = Vec::new();
        let mut line = 2;
        loop {
            let text = next_line().ok_or(CheckpointError::Header {
                line: line + 1,
                message: "missing `end`".into(),
            })?;
            line += 1;
            let header_err = |message: &str| CheckpointError::Header {
                line,
                message: format!("{message}: `{text}`"),
            };
            if text == "end" {
                break;
            }
            if let Some(rest) = text.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = text.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 4 {
                    return Err(header_err("tensor record needs 4 fields"));
                }
                let shape: Vec<usize> = if parts[1] == "-" {
                    vec![]
                } else {
                    parts[1]
                        .split('x')
                        .map(str::parse)
                        .collect::<Result<_, _>>()
                        .map_err(|_| header_err("bad shape"))?
                };
                let offset: usize = parts[2].parse().map_err(|_| header_err("bad offset"))?;
                let count: usize = parts[3].parse().map_err(|_| header_err("bad count"))?;
                if shape.iter().product::<usize>() != count {
                    return Err(header_err("shape does not match count"));
                }
                manifest.push((parts[0].to_string(), shape, offset, count));
            } else {
                return Err(header_err("unknown record"));
            }
        }
        let payload = &bytes[pos..];
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, shape, offset, count) in manifest {
            let end = offset + 8 * count;
            if end > payload.len() {
                return Err(CheckpointError::Truncated(name));
            }
            let data = payload[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t =
                Tensor::new(shape, data).map_err(|_| CheckpointError::Truncated(name.clone()))?;
            tensors.push((name, t));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
