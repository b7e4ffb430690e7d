//! Named-tensor container.
//!
//! A file is a concatenation of records, each laid out little-endian as
//!
//! ```text
//! magic "GDR2" | version u16 | dtype u8 (1 = f32, 2 = f64) | ndim u8
//! | dims u64 × ndim | name length u32 | name UTF-8 | payload
//! ```
//!
//! with the payload row-major. Decoding errors name the field that failed and
//! the byte offset where it starts.

use std::path::Path;

use gdr2_core::{Matrix, Precision, Real};
use thiserror::Error;

use crate::error::{CliError, Result};

pub const MAGIC: [u8; 4] = *b"GDR2";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("truncated {field} at byte {offset}: need {need} bytes, {have} left")]
    Truncated {
        field: &'static str,
        offset: usize,
        need: u64,
        have: usize,
    },

    #[error("bad magic at byte {offset}: {found:?}")]
    BadMagic { offset: usize, found: [u8; 4] },

    #[error("unsupported version {found} at byte {offset}")]
    Version { offset: usize, found: u16 },

    #[error("unknown dtype code {found} at byte {offset}")]
    DtypeCode { offset: usize, found: u8 },

    #[error("dims at byte {offset}: element count overflows")]
    Dims { offset: usize },

    #[error("name at byte {offset} is not valid UTF-8")]
    Name { offset: usize },

    #[error("duplicate tensor {name:?} at byte {offset}")]
    Duplicate { name: String, offset: usize },

    #[error("tensor {name:?}: dtype is {found}, expected {expected}")]
    DtypeMismatch {
        name: String,
        expected: Precision,
        found: Precision,
    },

    #[error("tensor {name:?}: {detail}")]
    Shape { name: String, detail: String },

    #[error("tensor {name:?}: non-finite value at index {index}")]
    NonFinite { name: String, index: usize },

    #[error("missing tensor {name:?}")]
    Missing { name: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn precision(&self) -> Precision {
        match self {
            TensorData::F32(_) => Precision::Binary32,
            TensorData::F64(_) => Precision::Binary64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn first_non_finite(&self) -> Option<usize> {
        match self {
            TensorData::F32(v) => v.iter().position(|x| !x.is_finite()),
            TensorData::F64(v) => v.iter().position(|x| !x.is_finite()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    /// A `rows × cols` tensor in the matrix's own precision.
    pub fn from_matrix<T: Real>(name: impl Into<String>, m: &Matrix<T>) -> Self {
        // `as_f64` is exact from either precision and `cast` back is the identity.
        let data = match T::PRECISION {
            Precision::Binary32 => TensorData::F32(m.data().iter().map(|x| x.as_f64() as f32).collect()),
            Precision::Binary64 => TensorData::F64(m.data().iter().map(|x| x.as_f64()).collect()),
        };
        Tensor {
            name: name.into(),
            dims: vec![m.rows() as u64, m.cols() as u64],
            data,
        }
    }

    pub fn precision(&self) -> Precision {
        self.data.precision()
    }

    /// Reads the tensor back as a matrix of the same precision; a 1-D tensor
    /// becomes a single row.
    pub fn to_matrix<T: Real>(&self) -> Result<Matrix<T>, TensorError> {
        if self.precision() != T::PRECISION {
            return Err(TensorError::DtypeMismatch {
                name: self.name.clone(),
                expected: T::PRECISION,
                found: self.precision(),
            });
        }
        let (rows, cols) = match self.dims[..] {
            [n] => (1, n as usize),
            [r, c] => (r as usize, c as usize),
            _ => {
                return Err(TensorError::Shape {
                    name: self.name.clone(),
                    detail: format!("{} dimensions cannot form a matrix", self.dims.len()),
                })
            }
        };
        let values: Vec<T> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| T::cast(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::cast(x)).collect(),
        };
        Matrix::from_vec(rows, cols, values).map_err(|e| TensorError::Shape {
            name: self.name.clone(),
            detail: e.to_string(),
        })
    }
}

/// An ordered set of uniquely named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    pub tensors: Vec<Tensor>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tensor: Tensor) {
        self.tensors.push(tensor);
    }

    pub fn push_matrix<T: Real>(&mut self, name: impl Into<String>, m: &Matrix<T>) {
        self.push(Tensor::from_matrix(name, m));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn matrix<T: Real>(&self, name: &str) -> Result<Matrix<T>, TensorError> {
        self.get(name)
            .ok_or_else(|| TensorError::Missing { name: name.to_string() })?
            .to_matrix()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TensorError> {
        let mut out = Vec::new();
        for (i, t) in self.tensors.iter().enumerate() {
            if self.tensors[..i].iter().any(|u| u.name == t.name) {
                return Err(TensorError::Duplicate {
                    name: t.name.clone(),
                    offset: out.len(),
                });
            }
            if let Some(index) = t.data.first_non_finite() {
                return Err(TensorError::NonFinite {
                    name: t.name.clone(),
                    index,
                });
            }
            let count = element_count(&t.dims).ok_or(TensorError::Dims { offset: out.len() })?;
            if count != t.data.len() as u64 || t.dims.len() > u8::MAX as usize {
                return Err(TensorError::Shape {
                    name: t.name.clone(),
                    detail: format!("dims {:?} hold {count} values, payload has {}", t.dims, t.data.len()),
                });
            }
            out.extend_from_slice(&MAGIC);
            out.extend_from_slice(&VERSION.to_le_bytes());
            out.push(match t.precision() {
                Precision::Binary32 => 1,
                Precision::Binary64 => 2,
            });
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let mut file = TensorFile::new();
        while cur.pos < bytes.len() {
            let record = cur.pos;
            let magic = cur.take("magic", 4)?;
            if magic != MAGIC {
                return Err(TensorError::BadMagic {
                    offset: record,
                    found: magic.try_into().expect("four bytes"),
                });
            }
            let at = cur.pos;
            let version = u16::from_le_bytes(cur.take("version", 2)?.try_into().expect("two bytes"));
            if version != VERSION {
                return Err(TensorError::Version { offset: at, found: version });
            }
            let at = cur.pos;
            let dtype = match cur.take("dtype", 1)?[0] {
                1 => Precision::Binary32,
                2 => Precision::Binary64,
                other => return Err(TensorError::DtypeCode { offset: at, found: other }),
            };
            let ndim = cur.take("ndim", 1)?[0] as usize;
            let at = cur.pos;
            let dims: Vec<u64> = cur
                .take("dims", 8 * ndim as u64)?
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            let count = element_count(&dims).ok_or(TensorError::Dims { offset: at })?;
            let name_len = u32::from_le_bytes(cur.take("name length", 4)?.try_into().expect("four bytes"));
            let at = cur.pos;
            let name = std::str::from_utf8(cur.take("name", name_len as u64)?)
                .map_err(|_| TensorError::Name { offset: at })?
                .to_string();
            if file.get(&name).is_some() {
                return Err(TensorError::Duplicate { name, offset: record });
            }
            let size = dtype.size_of() as u64;
            let payload = cur.take("payload", count.checked_mul(size).ok_or(TensorError::Dims { offset: at })?)?;
            let data = match dtype {
                Precision::Binary32 => TensorData::F32(
                    payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                        .collect(),
                ),
                Precision::Binary64 => TensorData::F64(
                    payload
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                        .collect(),
                ),
            };
            file.push(Tensor { name, dims, data });
        }
        Ok(file)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes().map_err(|source| CliError::Tensor {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        TensorFile::from_bytes(&bytes).map_err(|source| CliError::Tensor {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn element_count(dims: &[u64]) -> Option<u64> {
    dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, field: &'static str, need: u64) -> Result<&'a [u8], TensorError> {
        let have = self.bytes.len() - self.pos;
        if need > have as u64 {
            return Err(TensorError::Truncated {
                field,
                offset: self.pos,
                need,
                have,
            });
        }
        let out = &self.bytes[self.pos..self.pos + need as usize];
        self.pos += need as usize;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorFile {
        let mut f = TensorFile::new();
        f.push_matrix("w", &Matrix::from_rows(&[[1.5f64, -0.0], [f64::MIN_POSITIVE, 3.25e-300]]));
        f.push_matrix("b", &Matrix::from_rows(&[[0.1f32, 7.0, -2.5]]));
        f
    }

    #[test]
    fn round_trip_is_bitwise_for_both_precisions() {
        let f = sample();
        let bytes = f.to_bytes().unwrap();
        let back = TensorFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, f);
        let w: Matrix<f64> = back.matrix("w").unwrap();
        assert_eq!(w[(0, 1)].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back.matrix::<f32>("b").unwrap()[(0, 0)].to_bits(), 0.1f32.to_bits());
    }

    #[test]
    fn layout_of_one_record() {
        let mut f = TensorFile::new();
        f.push_matrix("ab", &Matrix::from_rows(&[[1.0f32]]));
        let bytes = f.to_bytes().unwrap();
        let mut want = b"GDR2".to_vec();
        want.extend_from_slice(&[1, 0, 1, 2]);
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.extend_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn truncation_reports_the_field_and_offset() {
        let bytes = sample().to_bytes().unwrap();
        // First record: 4 + 2 + 1 + 1 + 16 + 4 + 1 = 29 header bytes, then 32 payload bytes.
        for (cut, field, offset) in [(2, "magic", 0), (5, "version", 4), (20, "dims", 8), (26, "name length", 24), (40, "payload", 29)] {
            match TensorFile::from_bytes(&bytes[..cut]) {
                Err(TensorError::Truncated { field: f, offset: o, have, .. }) => {
                    assert_eq!((f, o), (field, offset), "cut at {cut}");
                    assert_eq!(have, cut - offset);
                }
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
        let second = 29 + 32;
        assert!(matches!(
            TensorFile::from_bytes(&bytes[..second + 3]),
            Err(TensorError::Truncated { field: "magic", offset, .. }) if offset == second
        ));
    }

    #[test]
    fn header_errors() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(TensorFile::from_bytes(&bytes), Err(TensorError::BadMagic { offset: 0, .. })));
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(TensorFile::from_bytes(&bytes), Err(TensorError::Version { offset: 4, found: 9 })));
        let mut bytes = sample().to_bytes().unwrap();
        bytes[6] = 3;
        assert!(matches!(TensorFile::from_bytes(&bytes), Err(TensorError::DtypeCode { offset: 6, found: 3 })));
        let mut bytes = sample().to_bytes().unwrap();
        bytes[28] = 0xff;
        assert!(matches!(TensorFile::from_bytes(&bytes), Err(TensorError::Name { offset: 28 })));
    }

    #[test]
    fn cross_precision_read_is_a_dtype_error() {
        let f = TensorFile::from_bytes(&sample().to_bytes().unwrap()).unwrap();
        let err = f.matrix::<f32>("w").unwrap_err();
        assert!(matches!(
            err,
            TensorError::DtypeMismatch {
                expected: Precision::Binary32,
                found: Precision::Binary64,
                ..
            }
        ));
        assert!(err.to_string().contains("dtype"));
        assert!(matches!(f.matrix::<f64>("nope"), Err(TensorError::Missing { .. })));
    }

    #[test]
    fn writer_rejects_bad_tensors() {
        let mut f = TensorFile::new();
        f.push_matrix("x", &Matrix::from_rows(&[[1.0f64, f64::NAN]]));
        assert!(matches!(f.to_bytes(), Err(TensorError::NonFinite { index: 1, .. })));
        let mut f = sample();
        f.push_matrix("w", &Matrix::from_rows(&[[0.0f64]]));
        assert!(matches!(f.to_bytes(), Err(TensorError::Duplicate { .. })));
    }

    #[test]
    fn empty_input_is_an_empty_file() {
        assert_eq!(TensorFile::from_bytes(&[]).unwrap(), TensorFile::new());
    }
}
