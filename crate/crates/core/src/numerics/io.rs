//! Binary checkpoint format: each matrix is `rows: u32 LE, cols: u32 LE`
//! followed by `rows·cols` little-endian `f64` values in row-major order.

use std::io::{Read, Write};

use super::matrix::Matrix;
use crate::error::{Error, Result};

pub fn write_matrix<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    let rows = u32::try_from(m.rows()).map_err(|_| crate::error::invalid("too many rows"))?;
    let cols = u32::try_from(m.cols()).map_err(|_| crate::error::invalid("too many columns"))?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&cols.to_le_bytes())?;
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_matrix<R: Read>(r: &mut R) -> Result<Matrix> {
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    let mut buf = [0u8; 8];
    for _ in 0..rows * cols {
        r.read_exact(&mut buf).map_err(truncated)?;
        data.push(f64::from_le_bytes(buf));
    }
    Matrix::new(rows, cols, data)
}

/// Writes a count-prefixed (`u32 LE`) sequence of matrices.
pub fn write_matrices<W: Write>(w: &mut W, ms: &[Matrix]) -> Result<()> {
    w.write_all(&(ms.len() as u32).to_le_bytes())?;
    for m in ms {
        write_matrix(w, m)?;
    }
    Ok(())
}

pub fn read_matrices<R: Read>(r: &mut R) -> Result<Vec<Matrix>> {
    let n = read_u32(r)? as usize;
    (0..n).map(|_| read_matrix(r)).collect()
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(u32::from_le_bytes(buf))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Truncated("matrix checkpoint".into())
    } else {
        Error::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let ms = vec![
            Matrix::from_rows(&[vec![1.0, -2.5], vec![3.0, 1e-300]]).unwrap(),
            Matrix::zeros(0, 3),
            Matrix::scalar(7.0),
        ];
        let mut buf = Vec::new();
        write_matrices(&mut buf, &ms).unwrap();
        assert_eq!(&buf[4..12], &[2, 0, 0, 0, 2, 0, 0, 0]);
        let back = read_matrices(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ms);
        assert!(matches!(
            read_matrices(&mut &buf[..buf.len() - 3]),
            Err(Error::Truncated(_))
        ));
    }
}
