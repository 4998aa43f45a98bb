//! ELFT binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "ELFT"
//! 4       1     version (1)
//! 5       1     dtype: 0 = f32, 1 = f64
//! 6       1     ndim
//! 7       4*n   dims, u32 each
//! 7+4n    ...   payload, row-major, dtype-sized elements
//! ```
//!
//! Writes go through [`write_atomic`]: the bytes land in a temp file in the
//! same directory which is renamed over the target only once fully written,
//! so an interrupted write never leaves a truncated tensor behind.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{dims_product, dims_str, Tensor};

const MAGIC: [u8; 4] = *b"ELFT";
const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    fn elem_size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Serialize a tensor to ELFT bytes. `F32` narrows each value.
pub fn encode(t: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    let dims = t.dims();
    if dims.len() > u8::MAX as usize {
        return Err(Error::Format(format!("ndim {} exceeds format limit 255", dims.len())));
    }
    for &d in dims {
        if d > u32::MAX as usize {
            return Err(Error::Format(format!("dim {d} exceeds u32 range")));
        }
    }
    let mut out = Vec::with_capacity(7 + 4 * dims.len() + t.elem_count() * dtype.elem_size());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match dtype {
        DType::F32 => {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Parse ELFT bytes back into a tensor (f32 payloads widen to f64 exactly).
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 7 {
        return Err(Error::Format(format!("file too short for header: {} bytes", bytes.len())));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"ELFT\"",
            &bytes[0..4.min(bytes.len())]
        )));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}, expected {VERSION}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5])?;
    let ndim = bytes[6] as usize;
    let header = 7 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Format(format!(
            "dims field truncated: header needs {header} bytes, file has {}",
            bytes.len()
        )));
    }
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 7 + 4 * i;
        let d = u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
        if d == 0 {
            return Err(Error::Format(format!("dim {i} is zero")));
        }
        dims.push(d as usize);
    }
    let count = dims_product(&dims);
    let want = count * dtype.elem_size();
    let payload = &bytes[header..];
    if payload.len() != want {
        return Err(Error::Format(format!(
            "payload length mismatch for dims {}: expected {want} bytes, found {}",
            dims_str(&dims),
            payload.len()
        )));
    }
    let mut data = Vec::with_capacity(count);
    match dtype {
        DType::F32 => {
            for chunk in payload.chunks_exact(4) {
                data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
            }
        }
        DType::F64 => {
            for chunk in payload.chunks_exact(8) {
                data.push(f64::from_le_bytes([
                    chunk[0], chunk[1], chunk[2], chunk[3], chunk[4], chunk[5], chunk[6], chunk[7],
                ]));
            }
        }
    }
    Tensor::new(dims, data)
}

pub fn write_tensor(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    let bytes = encode(t, dtype)?;
    write_atomic(path, |w| w.write_all(&bytes).map_err(Error::from))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn tmp_path_for(path: &Path) -> PathBuf {
    let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp-{}-{n}", std::process::id()))
}

/// Run `fill` against a temp file in the target's directory, then rename the
/// temp file over the target. If `fill` fails, the temp file is removed and
/// the target is left untouched.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let tmp = tmp_path_for(path);
    let result = (|| {
        let mut file = fs::File::create(&tmp)?;
        fill(&mut file)?;
        file.flush()?;
        Ok(())
    })();
    match result {
        Ok(()) => {
            fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

/// Convenience wrapper for writing a full string atomically.
pub fn write_string_atomic(path: &Path, content: &str) -> Result<()> {
    write_atomic(path, |w| w.write_all(content.as_bytes()).map_err(Error::from))
}
