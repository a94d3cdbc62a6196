//! The `NEAT` checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"NEAT"            magic
//! u32                format version
//! u64                header length in bytes
//! header             UTF-8 text, one record per line:
//!                      endian little
//!                      payload <bytes> <crc32 hex>
//!                      meta <key> <value...>
//!                      entry <name> <f32|f64> <byte offset> <d0,d1,...>
//! payload            raw little-endian floats, entries back to back
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::diff::Tensor;

pub const MAGIC: &[u8; 4] = b"NEAT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}, not a NEAT checkpoint")]
    BadMagic([u8; 4]),
    #[error("format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("payload checksum mismatch: header says {expected:08x}, payload hashes to {actual:08x}")]
    ChecksumMismatch { expected: u32, actual: u32 },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("missing entry `{0}`")]
    MissingEntry(String),
    #[error("unknown entry `{0}`")]
    UnknownEntry(String),
    #[error("entry `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    fn parse(s: &str) -> Option<DType> {
        match s {
            "f32" => Some(DType::F32),
            "f64" => Some(DType::F64),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor,
}

/// Named arrays plus free-form metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn push(&mut self, name: impl Into<String>, dtype: DType, tensor: Tensor) {
        self.entries.push(Entry {
            name: name.into(),
            dtype,
            tensor,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut payload = Vec::new();
        let mut lines = vec!["endian little".to_string()];
        let mut entry_lines = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            if e.name.is_empty() || e.name.contains(char::is_whitespace) {
                return Err(CheckpointError::MalformedHeader(format!(
                    "entry name {:?} must be non-empty without whitespace",
                    e.name
                )));
            }
            let dims: Vec<String> = e.tensor.shape().iter().map(|d| d.to_string()).collect();
            entry_lines.push(format!(
                "entry {} {} {} {}",
                e.name,
                e.dtype.as_str(),
                payload.len(),
                dims.join(",")
            ));
            for &v in e.tensor.data() {
                match e.dtype {
                    DType::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        lines.push(format!(
            "payload {} {:08x}",
            payload.len(),
            crc32fast::hash(&payload)
        ));
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(CheckpointError::MalformedHeader(format!("meta key {k:?}")));
            }
            lines.push(format!("meta {k} {v}"));
        }
        lines.extend(entry_lines);
        let header = lines.join("\n") + "\n";

        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated {
                expected: 16,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize.saturating_add(header_len);
        if bytes.len() < header_end {
            return Err(CheckpointError::Truncated {
                expected: header_end,
                found: bytes.len(),
            });
        }
        let header = std::str::from_utf8(&bytes[16..header_end])
            .map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;
        let payload = &bytes[header_end..];

        let bad = |line: &str| CheckpointError::MalformedHeader(format!("line {line:?}"));
        let mut out = Container::default();
        let mut declared: Option<(usize, u32)> = None;
        let mut raw_entries = Vec::new();
        for line in header.lines().filter(|l| !l.is_empty()) {
            let mut parts = line.splitn(2, ' ');
            let tag = parts.next().unwrap_or_default();
            let rest = parts.next().unwrap_or_default();
            match tag {
                "endian" if rest == "little" => {}
                "endian" => {
                    return Err(CheckpointError::MalformedHeader(format!(
                        "unsupported byte order {rest:?}"
                    )))
                }
                "payload" => {
                    let mut f = rest.split(' ');
                    let len = f.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad(line))?;
                    let crc = f
                        .next()
                        .and_then(|s| u32::from_str_radix(s, 16).ok())
                        .ok_or_else(|| bad(line))?;
                    declared = Some((len, crc));
                }
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    out.meta.insert(k.to_string(), v.to_string());
                }
                "entry" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    let [name, dtype, offset, dims] = f[..] else {
                        return Err(bad(line));
                    };
                    let dtype = DType::parse(dtype).ok_or_else(|| bad(line))?;
                    let offset: usize = offset.parse().map_err(|_| bad(line))?;
                    let shape = dims
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|d| d.parse::<usize>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|_| bad(line))?;
                    raw_entries.push((name.to_string(), dtype, offset, shape));
                }
                _ => return Err(bad(line)),
            }
        }
        let (payload_len, crc) =
            declared.ok_or_else(|| CheckpointError::MalformedHeader("no payload record".into()))?;
        if payload.len() != payload_len {
            return Err(CheckpointError::Truncated {
                expected: header_end + payload_len,
                found: bytes.len(),
            });
        }
        let actual = crc32fast::hash(payload);
        if actual != crc {
            return Err(CheckpointError::ChecksumMismatch {
                expected: crc,
                actual,
            });
        }
        for (name, dtype, offset, shape) in raw_entries {
            let n: usize = shape.iter().product();
            let end = offset + n * dtype.width();
            if end > payload.len() {
                return Err(CheckpointError::Truncated {
                    expected: header_end + end,
                    found: bytes.len(),
                });
            }
            let raw = &payload[offset..end];
            let data: Vec<f64> = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;
            out.entries.push(Entry { name, dtype, tensor });
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes()?;
        // Write-then-rename so an interrupted save never clobbers the last good file.
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Container::from_bytes(&fs::read(path)?)
    }
}
