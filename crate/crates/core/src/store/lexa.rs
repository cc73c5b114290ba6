// SPDX-License-Identifier: MIT OR Apache-2.0

//! LEXA v1 matrix files.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "LEXA"
//! 4       4     version, u32 LE (= 1)
//! 8       8     n_rows, u64 LE
//! 16      8     dim, u64 LE
//! 24      1     dtype (0 = f32)
//! 25      7     reserved, zero
//! 32      ...   n_rows * dim f32 LE, row-major
//! ```

use crate::error::{LexError, Result};

pub const MAGIC: &[u8; 4] = b"LEXA";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;
pub const DTYPE_F32: u8 = 0;

/// Dense row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(LexError::DimensionMismatch(format!(
                "{rows}x{cols} matrix given {} values",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(cols: usize, rows: &[Vec<f32>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(LexError::DimensionMismatch(format!(
                    "row {i} has {} values, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact(0) panics; a zero-width matrix still has `rows` empty rows.
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// First non-finite cell as `(row, col)`.
    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|i| (i / self.cols.max(1), i % self.cols.max(1)))
    }
}

/// Decoded header fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub n_rows: u64,
    pub dim: u64,
    pub dtype: u8,
}

impl Header {
    /// Payload size in bytes, if it fits in `usize`.
    pub fn payload_len(&self) -> Option<usize> {
        let cells = self.n_rows.checked_mul(self.dim)?;
        let bytes = cells.checked_mul(4)?;
        usize::try_from(bytes).ok()
    }
}

/// Parse and check the 32-byte header. `name` labels errors.
pub fn decode_header(name: &str, bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(LexError::format(
            name,
            format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(LexError::format(
            name,
            format!("bad magic bytes {:02x?}, expected \"LEXA\"", &bytes[0..4]),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(LexError::format(
            name,
            format!("unsupported LEXA version {version} (this build reads {VERSION})"),
        ));
    }
    let n_rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let dim = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let dtype = bytes[24];
    if dtype != DTYPE_F32 {
        return Err(LexError::format(name, format!("unsupported dtype code {dtype}")));
    }
    if bytes[25..32].iter().any(|&b| b != 0) {
        return Err(LexError::format(name, "reserved header bytes are not zero"));
    }
    Ok(Header {
        version,
        n_rows,
        dim,
        dtype,
    })
}

/// Decode a whole LEXA file. Non-finite payload values are returned as-is;
/// rejecting them is the job of validation.
pub fn decode(name: &str, bytes: &[u8]) -> Result<Matrix> {
    let header = decode_header(name, bytes)?;
    let payload_len = header
        .payload_len()
        .ok_or_else(|| LexError::format(name, "row/dim product overflows"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != payload_len {
        return Err(LexError::format(
            name,
            format!(
                "payload is {} bytes, header implies {payload_len}",
                payload.len()
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Matrix {
        rows: header.n_rows as usize,
        cols: header.dim as usize,
        data,
    })
}

pub fn encode(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols as u64).to_le_bytes());
    out.push(DTYPE_F32);
    out.extend_from_slice(&[0u8; 7]);
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Read a LEXA file from disk.
pub fn read_file(path: &std::path::Path) -> Result<Matrix> {
    let bytes = std::fs::read(path).map_err(|e| LexError::io(path, e))?;
    decode(&path.display().to_string(), &bytes)
}

/// Write a LEXA file, refusing non-finite values.
pub fn write_file(path: &std::path::Path, m: &Matrix) -> Result<()> {
    if let Some((r, c)) = m.first_non_finite() {
        return Err(LexError::InvalidInput(format!(
            "non-finite value at row {r}, col {c}; refusing to write {}",
            path.display()
        )));
    }
    std::fs::write(path, encode(m)).map_err(|e| LexError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Matrix {
        Matrix::new(2, 3, vec![1.0, -2.5, 0.0, 3.25, f32::MIN_POSITIVE, 7.0]).unwrap()
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[0..4], b"LEXA");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &3u64.to_le_bytes());
        assert_eq!(bytes[24], 0);
        assert_eq!(&bytes[25..32], &[0; 7]);
        assert_eq!(bytes.len(), 32 + 6 * 4);
        assert_eq!(&bytes[32..36], &1.0f32.to_le_bytes());
    }

    #[test]
    fn decode_inverts_encode() {
        let m = sample();
        assert_eq!(decode("x", &encode(&m)).unwrap(), m);
    }

    #[test]
    fn rejects_corruption_with_cause() {
        let good = encode(&sample());
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let err = decode("f.lexa", &bad_magic).unwrap_err().to_string();
        assert!(err.contains("f.lexa") && err.contains("magic"), "{err}");

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(decode("f", &bad_version).unwrap_err().to_string().contains("version"));

        let mut bad_dtype = good.clone();
        bad_dtype[24] = 1;
        assert!(decode("f", &bad_dtype).unwrap_err().to_string().contains("dtype"));

        let mut reserved = good.clone();
        reserved[30] = 9;
        assert!(decode("f", &reserved).unwrap_err().to_string().contains("reserved"));

        let truncated = &good[..good.len() - 1];
        assert!(decode("f", truncated).unwrap_err().to_string().contains("payload"));
        assert!(decode("f", &good[..10]).unwrap_err().to_string().contains("truncated"));

        let mut huge = good;
        huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode("f", &huge).is_err());
    }

    #[test]
    fn zero_rows_and_zero_width() {
        let empty = Matrix::zeros(0, 5);
        assert_eq!(decode("e", &encode(&empty)).unwrap(), empty);
        let narrow = Matrix::zeros(3, 0);
        let back = decode("n", &encode(&narrow)).unwrap();
        assert_eq!(back.rows(), 3);
        assert_eq!(back.iter_rows().count(), 3);
    }

    #[test]
    fn write_refuses_inf() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix::new(1, 2, vec![1.0, f32::INFINITY]).unwrap();
        let path = dir.path().join("a.lexa");
        assert!(write_file(&path, &m).is_err());
        assert!(!path.exists());
    }
}
