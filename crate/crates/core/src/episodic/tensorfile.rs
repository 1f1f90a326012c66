//! Binary container for named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "STNT" | version u16 | tensor count u32
//! per tensor: name len u16 | name utf-8 | dtype u8 (0=f32, 1=f64)
//!             | ndim u8 | dims u32 each | payload row-major
//! trailing crc32 (of every preceding byte)
//! ```
//!
//! Reads are fully bounds-checked and never panic on malformed input;
//! structural damage reports [`DataError::Format`] with the byte offset,
//! payload damage reports [`DataError::ChecksumMismatch`].

use super::DataError;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"STNT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorPayload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorPayload {
    pub fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype_code(&self) -> u8 {
        match self {
            Self::F32(_) => 0,
            Self::F64(_) => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub dims: Vec<usize>,
    pub payload: TensorPayload,
}

impl TensorData {
    pub fn f32(dims: Vec<usize>, values: Vec<f32>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), values.len());
        Self {
            dims,
            payload: TensorPayload::F32(values),
        }
    }

    pub fn f64(dims: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), values.len());
        Self {
            dims,
            payload: TensorPayload::F64(values),
        }
    }
}

/// Named tensors in deterministic (sorted) order.
pub type TensorMap = BTreeMap<String, TensorData>;

/// Serializes a tensor map to bytes.
pub fn write_tensor_map(map: &TensorMap) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(map.len() as u32).to_le_bytes());
    for (name, tensor) in map {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(tensor.payload.dtype_code());
        out.push(tensor.dims.len() as u8);
        for &d in &tensor.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &tensor.payload {
            TensorPayload::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorPayload::F64(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T, DataError> {
        Err(DataError::Format {
            offset: self.pos as u64,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        if self.data.len() - self.pos < n {
            return self.err(format!(
                "unexpected end of data while reading {what} ({n} bytes needed, {} left)",
                self.data.len() - self.pos
            ));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, DataError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, DataError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a tensor map from bytes.
pub fn read_tensor_map(data: &[u8]) -> Result<TensorMap, DataError> {
    if data.len() < MAGIC.len() + 2 + 4 + 4 {
        return Err(DataError::Format {
            offset: data.len() as u64,
            message: "file too short for header and checksum".into(),
        });
    }
    let body = &data[..data.len() - 4];
    let stored = u32::from_le_bytes(data[data.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(DataError::ChecksumMismatch { stored, computed });
    }

    let mut r = Reader { data: body, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(DataError::Format {
            offset: 0,
            message: format!("bad magic {magic:?}"),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(DataError::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("tensor count")?;
    let mut map = TensorMap::new();
    for i in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name_offset = r.pos;
        let name_bytes = r.take(name_len, "name")?;
        let name = match std::str::from_utf8(name_bytes) {
            Ok(s) => s.to_string(),
            Err(e) => {
                return Err(DataError::Format {
                    offset: name_offset as u64,
                    message: format!("tensor {i} name is not utf-8: {e}"),
                })
            }
        };
        let dtype = r.u8("dtype")?;
        let elem_size: usize = match dtype {
            0 => 4,
            1 => 8,
            other => {
                return Err(DataError::Format {
                    offset: (r.pos - 1) as u64,
                    message: format!("tensor '{name}' has unknown dtype {other}"),
                })
            }
        };
        let ndim = r.u8("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        let mut elems: u64 = 1;
        for _ in 0..ndim {
            let d = r.u32("dim")? as u64;
            elems = elems.checked_mul(d).ok_or(DataError::Format {
                offset: r.pos as u64,
                message: format!("tensor '{name}' dimension product overflows"),
            })?;
            dims.push(d as usize);
        }
        let payload_bytes = elems
            .checked_mul(elem_size as u64)
            .ok_or(DataError::Format {
                offset: r.pos as u64,
                message: format!("tensor '{name}' payload size overflows"),
            })?;
        if payload_bytes > (r.data.len() - r.pos) as u64 {
            return Err(DataError::Format {
                offset: r.pos as u64,
                message: format!(
                    "tensor '{name}' payload of {payload_bytes} bytes exceeds remaining data"
                ),
            });
        }
        let raw = r.take(payload_bytes as usize, "payload")?;
        let payload = match dtype {
            0 => TensorPayload::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            _ => TensorPayload::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
        };
        if map
            .insert(name.clone(), TensorData { dims, payload })
            .is_some()
        {
            return Err(DataError::Format {
                offset: name_offset as u64,
                message: format!("duplicate tensor name '{name}'"),
            });
        }
    }
    if r.pos != body.len() {
        return Err(DataError::Format {
            offset: r.pos as u64,
            message: format!("{} trailing bytes after last tensor", body.len() - r.pos),
        });
    }
    Ok(map)
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes a tensor map to disk atomically (temp file + rename).
pub fn save_tensor_map(path: &Path, map: &TensorMap) -> Result<(), DataError> {
    let bytes = write_tensor_map(map);
    atomic_write(path, &bytes)
}

/// Atomically replaces `path` with `bytes`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    let tmp = path.with_extension("tmp~");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
        f.sync_all().map_err(|e| io_err(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Reads a tensor map from disk.
pub fn load_tensor_map(path: &Path) -> Result<TensorMap, DataError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    read_tensor_map(&bytes)
}
