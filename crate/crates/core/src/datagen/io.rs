//! Flat binary dataset files: a fixed header (`SGDG`, version, n, dim, K as
//! little-endian `u32`) followed by `n·dim` little-endian `f64` inputs and
//! `n` little-endian `u32` labels.

use std::io::{Read, Write};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SGDG";
pub const VERSION: u32 = 1;

/// A labeled dataset as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub k: usize,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

fn to_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::Format(format!("{what} {value} does not fit in u32")))
}

pub fn write_dataset<W: Write>(mut w: W, inputs: &Tensor, labels: &[usize], k: usize) -> Result<()> {
    if inputs.shape().len() != 2 {
        return Err(Error::Format(format!("expected a matrix, got shape {:?}", inputs.shape())));
    }
    if inputs.rows() != labels.len() {
        return Err(Error::LengthMismatch(inputs.rows(), labels.len()));
    }
    w.write_all(MAGIC)?;
    for v in [VERSION, to_u32(inputs.rows(), "n")?, to_u32(inputs.cols(), "dim")?, to_u32(k, "K")?] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in inputs.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    for &l in labels {
        w.write_all(&to_u32(l, "label")?.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<DatasetFile> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let n = read_u32(&mut r)? as usize;
    let dim = read_u32(&mut r)? as usize;
    let k = read_u32(&mut r)? as usize;
    let mut data = Vec::with_capacity(n * dim);
    let mut buf = [0u8; 8];
    for _ in 0..n * dim {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    let labels = (0..n)
        .map(|_| read_u32(&mut r).map(|l| l as usize))
        .collect::<Result<Vec<_>>>()?;
    if let Some(l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Format(format!("label {l} outside 0..{k}")));
    }
    Ok(DatasetFile {
        k,
        inputs: Tensor::matrix(n, dim, data)?,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let x = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.25, 1e-300, 7.0, 0.0]).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &x, &[1, 0], 3).unwrap();
        assert_eq!(buf.len(), 4 + 16 + 48 + 8);
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, DatasetFile { k: 3, inputs: x, labels: vec![1, 0] });
    }

    #[test]
    fn rejects_corrupt_headers() {
        assert!(read_dataset(&b"XXXX"[..]).is_err());
        let x = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &x, &[0], 2).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_dataset(buf.as_slice()).is_err());
    }
}
