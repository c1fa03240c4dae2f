//! `.fpqt` tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset 0   magic  "FPQT"
//! offset 4   u16    version (1)
//! offset 6   u8     dtype: 0 = f32, 1 = f64, 2 = code4, 3 = code8
//! offset 7   u8     ndim
//! offset 8   u64 x ndim shape
//! then       payload, row-major
//! ```
//!
//! `code4` packs two codes per byte, earlier element in the low nibble; an odd
//! element count leaves the last high nibble zero.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FPQT";
pub const VERSION: u16 = 1;
const HEADER_FIXED: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    F32,
    F64,
    Code4,
    Code8,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::Code4 => 2,
            DType::Code8 => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::Code4),
            3 => Some(DType::Code8),
            _ => None,
        }
    }

    /// Payload bytes for `n` elements.
    pub fn payload_len(self, n: usize) -> usize {
        match self {
            DType::F32 => n * 4,
            DType::F64 => n * 8,
            DType::Code4 => n.div_ceil(2),
            DType::Code8 => n,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Tensor {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
    Code4(ArrayD<u8>),
    Code8(ArrayD<u8>),
}

impl Tensor {
    pub fn dtype(&self) -> DType {
        match self {
            Tensor::F32(_) => DType::F32,
            Tensor::F64(_) => DType::F64,
            Tensor::Code4(_) => DType::Code4,
            Tensor::Code8(_) => DType::Code8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F32(a) => a.shape(),
            Tensor::F64(a) => a.shape(),
            Tensor::Code4(a) | Tensor::Code8(a) => a.shape(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_f64(a: Array2<f64>) -> Self {
        Tensor::F64(a.into_dyn())
    }

    /// Codes stored as `code4` when every value fits a nibble is the caller's
    /// choice; this picks by code width.
    pub fn from_codes(a: Array2<u8>, width: u32) -> Self {
        if width <= 4 {
            Tensor::Code4(a.into_dyn())
        } else {
            Tensor::Code8(a.into_dyn())
        }
    }

    /// Real tensor as a matrix; 1-D tensors become a single row.
    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        let a = match self {
            Tensor::F32(a) => a.mapv(f64::from),
            Tensor::F64(a) => a.clone(),
            _ => {
                return Err(Error::input(format!(
                    "expected a real tensor, found {:?}",
                    self.dtype()
                )))
            }
        };
        into_matrix(a)
    }

    pub fn to_code_matrix(&self) -> Result<Array2<u8>> {
        match self {
            Tensor::Code4(a) | Tensor::Code8(a) => into_matrix(a.clone()),
            _ => Err(Error::input(format!(
                "expected a code tensor, found {:?}",
                self.dtype()
            ))),
        }
    }
}

fn into_matrix<T>(a: ArrayD<T>) -> Result<Array2<T>> {
    let shape = a.shape().to_vec();
    let (r, c) = match shape[..] {
        [c] => (1, c),
        [r, c] => (r, c),
        _ => {
            return Err(Error::input(format!(
                "expected a 1-D or 2-D tensor, found shape {shape:?}"
            )))
        }
    };
    Ok(a.into_shape_with_order((r, c)).expect("element count preserved"))
}

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let shape = t.shape();
    let ndim = u8::try_from(shape.len())
        .map_err(|_| Error::input(format!("{} dimensions exceed 255", shape.len())))?;
    let n = t.len();
    let mut out = Vec::with_capacity(HEADER_FIXED + 8 * shape.len() + t.dtype().payload_len(n));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(t.dtype().tag());
    out.push(ndim);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match t {
        Tensor::F32(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Tensor::F64(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Tensor::Code8(a) => out.extend(a.iter()),
        Tensor::Code4(a) => {
            if let Some((i, &v)) = a.iter().enumerate().find(|(_, v)| **v > 15) {
                return Err(Error::input(format!(
                    "code {v} at flat index {i} does not fit in 4 bits"
                )));
            }
            let codes: Vec<u8> = a.iter().copied().collect();
            out.extend(
                codes
                    .chunks(2)
                    .map(|p| p[0] | p.get(1).map_or(0, |hi| hi << 4)),
            );
        }
    }
    Ok(out)
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

fn take<'a>(bytes: &'a [u8], at: usize, n: usize, what: &str) -> Result<&'a [u8]> {
    bytes.get(at..at + n).ok_or_else(|| {
        format_err(
            bytes.len(),
            format!("truncated {what}: need {n} bytes at offset {at}, file has {}", bytes.len()),
        )
    })
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let magic = take(bytes, 0, 4, "magic")?;
    if magic != MAGIC {
        return Err(format_err(0, format!("bad magic {magic:02x?}, expected \"FPQT\"")));
    }
    let version = u16::from_le_bytes(take(bytes, 4, 2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let tag = take(bytes, 6, 1, "dtype")?[0];
    let dtype = DType::from_tag(tag).ok_or_else(|| format_err(6, format!("unknown dtype tag {tag}")))?;
    let ndim = take(bytes, 7, 1, "ndim")?[0] as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut n: usize = 1;
    for i in 0..ndim {
        let at = HEADER_FIXED + 8 * i;
        let d = u64::from_le_bytes(take(bytes, at, 8, "shape")?.try_into().unwrap());
        let d = usize::try_from(d).map_err(|_| format_err(at, format!("dimension {d} too large")))?;
        n = n
            .checked_mul(d)
            .filter(|n| dtype.payload_len(*n) <= isize::MAX as usize)
            .ok_or_else(|| format_err(at, "element count overflows"))?;
        shape.push(d);
    }
    let start = HEADER_FIXED + 8 * ndim;
    let want = dtype.payload_len(n);
    let have = bytes.len().saturating_sub(start);
    if have != want {
        let offset = start + want.min(have);
        return Err(format_err(
            offset,
            format!("payload for shape {shape:?} {dtype:?} needs {want} bytes, found {have}"),
        ));
    }
    let p = &bytes[start..];
    let dim = IxDyn(&shape);
    let t = match dtype {
        DType::F32 => Tensor::F32(ArrayD::from_shape_vec(
            dim,
            p.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
        .expect("length checked")),
        DType::F64 => Tensor::F64(ArrayD::from_shape_vec(
            dim,
            p.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
        .expect("length checked")),
        DType::Code8 => Tensor::Code8(ArrayD::from_shape_vec(dim, p.to_vec()).expect("length checked")),
        DType::Code4 => {
            if n % 2 == 1 && p[want - 1] >> 4 != 0 {
                return Err(format_err(
                    start + want - 1,
                    "padding nibble of the last code4 byte is not zero",
                ));
            }
            let codes: Vec<u8> = p
                .iter()
                .flat_map(|b| [b & 15, b >> 4])
                .take(n)
                .collect();
            Tensor::Code4(ArrayD::from_shape_vec(dim, codes).expect("length checked"))
        }
    };
    Ok(t)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    decode(&bytes)
}

/// Writes to a temporary file in the target directory, then renames it into place.
pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_atomic(path.as_ref(), &encode(t)?)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
