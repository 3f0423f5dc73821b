//! Binary tensor files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic    8 bytes  "NTRNTNSR"
//! version  u32      1
//! rank     u32
//! dims     u64 x rank
//! payload  f64 x product(dims), row-major
//! ```

use std::fs;
use std::path::Path;

use neutreno_core::Matrix;
use thiserror::Error;

pub const MAGIC: [u8; 8] = *b"NTRNTNSR";
pub const VERSION: u32 = 1;

const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a tensor file: bad magic {found:02x?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported tensor file version {found} (expected {VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("truncated tensor file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("tensor file has {extra} bytes after the payload")]
    TrailingBytes { extra: usize },
    #[error("tensor dims {dims:?} overflow the addressable size")]
    TooLarge { dims: Vec<u64> },
    #[error("payload of {len} values does not match dims {dims:?}")]
    ShapeMismatch { dims: Vec<usize>, len: usize },
    #[error("expected a rank-1 or rank-2 tensor, found rank {rank}")]
    NotAMatrix { rank: usize },
    #[error("csv line {line}: {message}")]
    Csv { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(TensorError::ShapeMismatch { dims, len: data.len() });
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Rank 2 maps to its own shape, rank 1 to a column.
    pub fn into_matrix(self) -> Result<Matrix, TensorError> {
        let (rows, cols) = match self.dims[..] {
            [n] => (n, 1),
            [r, c] => (r, c),
            _ => return Err(TensorError::NotAMatrix { rank: self.rank() }),
        };
        Ok(Matrix::new(rows, cols, self.data).expect("dims checked on construction"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * (self.dims.len() + self.data.len()));
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let truncated = |expected: usize| TensorError::Truncated {
            expected,
            found: bytes.len(),
        };
        if bytes.len() < MAGIC.len() || bytes[..8] != MAGIC {
            return Err(TensorError::BadMagic {
                found: bytes[..bytes.len().min(8)].to_vec(),
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(truncated(HEADER_LEN));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(TensorError::UnsupportedVersion { found: version });
        }
        let rank = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let dims_end = rank
            .checked_mul(8)
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| truncated(usize::MAX))?;
        if bytes.len() < dims_end {
            return Err(truncated(dims_end));
        }
        let raw_dims: Vec<u64> = bytes[HEADER_LEN..dims_end]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let too_large = || TensorError::TooLarge { dims: raw_dims.clone() };
        let dims = raw_dims
            .iter()
            .map(|&d| usize::try_from(d).map_err(|_| too_large()))
            .collect::<Result<Vec<_>, _>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(too_large)?;
        let expected = count
            .checked_mul(8)
            .and_then(|n| n.checked_add(dims_end))
            .ok_or_else(too_large)?;
        if bytes.len() < expected {
            return Err(truncated(expected));
        }
        if bytes.len() > expected {
            return Err(TensorError::TrailingBytes {
                extra: bytes.len() - expected,
            });
        }
        let data = bytes[dims_end..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { dims, data })
    }
}

impl From<&Matrix> for Tensor {
    fn from(m: &Matrix) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }
}

fn io_error(path: &Path, source: std::io::Error) -> TensorError {
    TensorError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<(), TensorError> {
    let path = path.as_ref();
    fs::write(path, tensor.to_bytes()).map_err(|e| io_error(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor, TensorError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    Tensor::from_bytes(&bytes)
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<Matrix, TensorError> {
    load_tensor(path)?.into_matrix()
}

/// Comma-separated rows with 17 significant digits, no header.
pub fn matrix_to_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for r in m.row_iter() {
        let cells: Vec<String> = r.iter().map(|&x| crate::report::real(x)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Parses headerless numeric CSV; every row must have the same width.
pub fn matrix_from_csv(text: &str) -> Result<Matrix, TensorError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| TensorError::Csv {
                line: idx + 1,
                message: e.to_string(),
            })?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(TensorError::Csv {
                    line: idx + 1,
                    message: format!("expected {} values, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Matrix::new(rows.len(), cols, data).expect("rows have equal width"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor {
        Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.1 - 0.55).collect()).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = Tensor::new(vec![2], vec![1.0, -0.0]).unwrap().to_bytes();
        assert_eq!(&bytes[..8], b"NTRNTNSR");
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[1, 0, 0, 0]);
        assert_eq!(&bytes[16..24], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[24..32], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[32..40], &(-0.0f64).to_le_bytes());
        assert_eq!(bytes.len(), 40);
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            Tensor::from_bytes(&bytes[..bytes.len() - 1]),
            Err(TensorError::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::from_bytes(&bad), Err(TensorError::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(
            Tensor::from_bytes(&bad),
            Err(TensorError::UnsupportedVersion { found: 2 })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Tensor::from_bytes(&long), Err(TensorError::TrailingBytes { extra: 1 })));
        assert!(matches!(Tensor::from_bytes(b"NTRN"), Err(TensorError::BadMagic { .. })));
        assert!(matches!(Tensor::from_bytes(&bytes[..12]), Err(TensorError::Truncated { .. })));
    }

    #[test]
    fn huge_dims_do_not_allocate() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(Tensor::from_bytes(&bytes).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = sample().into_matrix().unwrap();
        let back = matrix_from_csv(&matrix_to_csv(&m)).unwrap();
        assert_eq!(back, m);
        assert!(matches!(matrix_from_csv("1,2\n3\n"), Err(TensorError::Csv { line: 2, .. })));
        assert!(matches!(matrix_from_csv("1,x\n"), Err(TensorError::Csv { line: 1, .. })));
    }

    #[test]
    fn matrix_views() {
        let m = sample().into_matrix().unwrap();
        assert_eq!(m.shape(), (3, 4));
        assert_eq!(Tensor::from(&m), sample());
        let col = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().into_matrix().unwrap();
        assert_eq!(col.shape(), (3, 1));
        assert!(matches!(
            Tensor::new(vec![1, 1, 1], vec![0.0]).unwrap().into_matrix(),
            Err(TensorError::NotAMatrix { rank: 3 })
        ));
        assert!(Tensor::new(vec![2, 2], vec![0.0]).is_err());
    }
}
