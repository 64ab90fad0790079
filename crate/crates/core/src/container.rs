//! Binary Q/K/V container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SMRF"
//! 4       2     version, u16 LE (1 = Q/K/V, 2 = output only)
//! 6       4     N_q, u32 LE
//! 10      4     N_k, u32 LE
//! 14      4     d,   u32 LE
//! 18      4     d_v, u32 LE
//! 22      ..    f32 LE row-major: Q (N_q×d), K (N_k×d), V (N_k×d_v)
//! ```
//!
//! A version-2 file stores a single `N_q×d_v` output matrix with `N_k = 0`
//! and `d = d_v`; the K and V sections are omitted.

use std::io::Write;
use std::path::Path;

use crate::attention::AttentionInstance;
use crate::error::{Result, SmyrfError};
use crate::tensor::Matrix;

pub const MAGIC: [u8; 4] = *b"SMRF";
pub const HEADER_LEN: usize = 22;
pub const VERSION_QKV: u16 = 1;
pub const VERSION_OUTPUT: u16 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Container {
    Qkv(AttentionInstance),
    Output(Matrix),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Header {
    version: u16,
    n_q: u32,
    n_k: u32,
    d: u32,
    d_v: u32,
}

impl Header {
    fn float_count(&self) -> Result<u128> {
        let (nq, nk, d, dv) = (self.n_q as u128, self.n_k as u128, self.d as u128, self.d_v as u128);
        match self.version {
            VERSION_QKV => Ok(nq * d + nk * d + nk * dv),
            VERSION_OUTPUT => {
                if nk != 0 || d != dv {
                    return Err(SmyrfError::Format(format!(
                        "output container must have N_k = 0 and d = d_v, got N_k = {nk}, d = {d}, d_v = {dv}"
                    )));
                }
                Ok(nq * dv)
            }
            v => Err(SmyrfError::Format(format!("unsupported container version {v}"))),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        for v in [self.n_q, self.n_k, self.d, self.d_v] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| SmyrfError::Format(format!("{what} = {n} does not fit in u32")))
}

fn push_f32(out: &mut Vec<u8>, m: &Matrix) -> Result<()> {
    for &v in m.data() {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(SmyrfError::Data(format!("value {v} does not fit in f32")));
        }
        out.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(())
}

/// Serializes a Q/K/V instance. Values are narrowed to f32.
pub fn encode_container(inst: &AttentionInstance) -> Result<Vec<u8>> {
    let (nq, nk, d, dv) = inst.shape();
    let header = Header {
        version: VERSION_QKV,
        n_q: to_u32(nq, "N_q")?,
        n_k: to_u32(nk, "N_k")?,
        d: to_u32(d, "d")?,
        d_v: to_u32(dv, "d_v")?,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * header.float_count()? as usize);
    header.write(&mut out);
    push_f32(&mut out, inst.queries())?;
    push_f32(&mut out, inst.keys())?;
    push_f32(&mut out, inst.values())?;
    Ok(out)
}

/// Serializes an output matrix as a version-2 container.
pub fn encode_output(output: &Matrix) -> Result<Vec<u8>> {
    let header = Header {
        version: VERSION_OUTPUT,
        n_q: to_u32(output.rows(), "N_q")?,
        n_k: 0,
        d: to_u32(output.cols(), "d")?,
        d_v: to_u32(output.cols(), "d_v")?,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * output.data().len());
    header.write(&mut out);
    push_f32(&mut out, output)?;
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

fn read_matrix(body: &[u8], offset: &mut usize, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
    let n = rows * cols;
    let mut data = Vec::with_capacity(n);
    for (i, chunk) in body[*offset..*offset + 4 * n].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        if !v.is_finite() {
            return Err(SmyrfError::Data(format!(
                "non-finite value {v} in {what} at row {}, column {}",
                i / cols.max(1),
                i % cols.max(1)
            )));
        }
        data.push(v as f64);
    }
    *offset += 4 * n;
    Matrix::new(rows, cols, data)
}

pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(SmyrfError::Format("bad magic".into()));
        }
        return Err(SmyrfError::Length {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    if bytes[..4] != MAGIC {
        return Err(SmyrfError::Format("bad magic".into()));
    }
    let header = Header {
        version: u16::from_le_bytes([bytes[4], bytes[5]]),
        n_q: read_u32(bytes, 6),
        n_k: read_u32(bytes, 10),
        d: read_u32(bytes, 14),
        d_v: read_u32(bytes, 18),
    };
    let expected = HEADER_LEN as u128 + 4 * header.float_count()?;
    if bytes.len() as u128 != expected {
        return Err(SmyrfError::Length {
            expected: u64::try_from(expected).unwrap_or(u64::MAX),
            actual: bytes.len() as u64,
        });
    }
    let body = &bytes[HEADER_LEN..];
    let (nq, nk, d, dv) = (header.n_q as usize, header.n_k as usize, header.d as usize, header.d_v as usize);
    let mut offset = 0;
    match header.version {
        VERSION_QKV => {
            let q = read_matrix(body, &mut offset, nq, d, "Q")?;
            let k = read_matrix(body, &mut offset, nk, d, "K")?;
            let v = read_matrix(body, &mut offset, nk, dv, "V")?;
            Ok(Container::Qkv(AttentionInstance::new(q, k, v)?))
        }
        _ => Ok(Container::Output(read_matrix(body, &mut offset, nq, dv, "output")?)),
    }
}

/// Decodes bytes that must hold a Q/K/V instance.
pub fn decode_instance(bytes: &[u8]) -> Result<AttentionInstance> {
    match decode_container(bytes)? {
        Container::Qkv(inst) => Ok(inst),
        Container::Output(_) => Err(SmyrfError::Format(
            "expected a Q/K/V container, found an output container".into(),
        )),
    }
}

pub fn read_container(path: impl AsRef<Path>) -> Result<AttentionInstance> {
    decode_instance(&std::fs::read(path)?)
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        // Temporary files are created owner-only; published files should not be.
        builder.permissions(std::fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder.tempfile_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| SmyrfError::Io(e.error))?;
    Ok(())
}

pub fn write_container(path: impl AsRef<Path>, inst: &AttentionInstance) -> Result<()> {
    write_atomic(path, &encode_container(inst)?)
}

pub fn write_output_container(path: impl AsRef<Path>, output: &Matrix) -> Result<()> {
    write_atomic(path, &encode_output(output)?)
}
