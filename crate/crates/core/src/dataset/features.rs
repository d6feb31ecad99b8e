//! `MILF` clip feature files: magic `MILF`, u32 version = 1, u32 T, u32 d,
//! then `T*d` little-endian f32 values row-major.

use std::path::Path;

use crate::binio::{read_file, u32_len, write_file, ByteReader, ByteWriter};
use crate::scalar::Scalar;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MILF";
const VERSION: u32 = 1;

/// Per-clip features of one video, one row per clip in temporal order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipFeatureMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> ClipFeatureMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 {
            return Err(Error::invalid("feature matrix", "no clips"));
        }
        if cols == 0 {
            return Err(Error::invalid("feature matrix", "dimension 0"));
        }
        if data.len() != rows * cols {
            return Err(Error::dims("feature matrix", rows * cols, data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "feature matrix",
                format!("non-finite entry at row {} col {}", i / cols, i % cols),
            ));
        }
        Ok(ClipFeatureMatrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.as_ref().len() != cols {
                return Err(Error::dims(format!("feature row {i}"), cols, r.as_ref().len()));
            }
            data.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn num_clips(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(u32_len(self.rows, "clip count")?);
        w.u32(u32_len(self.cols, "feature dim")?);
        w.f32s(self.data.iter().map(|v| v.to_f32_lossy()));
        Ok(w.buf)
    }

    pub fn decode(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut r = ByteReader::new(bytes, origin);
        r.magic(MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.error(at, format!("unsupported version {version}")));
        }
        let at = r.offset();
        let rows = r.u32("clip count")? as usize;
        if rows == 0 {
            return Err(r.error(at, "clip count 0"));
        }
        let at = r.offset();
        let cols = r.u32("feature dim")? as usize;
        if cols == 0 {
            return Err(r.error(at, "dimension 0"));
        }
        let payload_at = r.offset();
        let values = r.f32s(rows * cols, "payload")?;
        r.expect_end()?;
        let data = values.into_iter().map(T::from_f32_exact).collect();
        Self::new(rows, cols, data).map_err(|e| r.error(payload_at, e.to_string()))
    }
}

pub fn read_features<T: Scalar>(path: impl AsRef<Path>) -> Result<ClipFeatureMatrix<T>> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    ClipFeatureMatrix::decode(&bytes, &path.display().to_string())
}

pub fn write_features<T: Scalar>(path: impl AsRef<Path>, matrix: &ClipFeatureMatrix<T>) -> Result<()> {
    write_file(path.as_ref(), &matrix.encode()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_matrix_round_trip() {
        let m = ClipFeatureMatrix::<f32>::new(1, 1, vec![-0.0]).unwrap();
        let bytes = m.encode().unwrap();
        assert_eq!(bytes.len(), 20);
        let back = ClipFeatureMatrix::<f32>::decode(&bytes, "mem").unwrap();
        assert_eq!(back.as_slice()[0].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn wrong_magic_names_offset() {
        let mut bytes = ClipFeatureMatrix::<f32>::new(1, 2, vec![1.0, 2.0]).unwrap().encode().unwrap();
        bytes[1] = b'Z';
        let e = ClipFeatureMatrix::<f32>::decode(&bytes, "clip.milf").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("offset 0") && msg.contains("clip.milf"), "{msg}");
    }

    #[test]
    fn truncated_and_zero_dim_rejected() {
        let bytes = ClipFeatureMatrix::<f32>::new(2, 2, vec![1.0; 4]).unwrap().encode().unwrap();
        let e = ClipFeatureMatrix::<f32>::decode(&bytes[..bytes.len() - 1], "f").unwrap_err();
        assert!(matches!(e, Error::Format { offset: 16, .. }), "{e}");

        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(1);
        w.u32(3);
        w.u32(0);
        let e = ClipFeatureMatrix::<f32>::decode(&w.buf, "f").unwrap_err();
        assert!(matches!(e, Error::Format { offset: 12, .. }), "{e}");

        let mut v2 = bytes.clone();
        v2[4] = 9;
        assert!(matches!(
            ClipFeatureMatrix::<f32>::decode(&v2, "f"),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(ClipFeatureMatrix::<f64>::new(1, 2, vec![1.0, f64::INFINITY]).is_err());
        assert!(ClipFeatureMatrix::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }
}
