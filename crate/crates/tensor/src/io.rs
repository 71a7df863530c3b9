//! Binary tensor files.
//!
//! Layout: magic `RAPT`, version byte, dtype byte (0 = single, 1 = double),
//! ndim byte, `ndim` little-endian `u32` dims, then the row-major values in
//! little-endian order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::real::{DType, Real};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RAPT";
pub const VERSION: u8 = 1;

/// Parsed header of a tensor file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub dtype: DType,
    pub shape: Vec<usize>,
}

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.ndim() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.code());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn write_to<T: Real, W: Write>(t: &Tensor<T>, mut w: W) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

pub fn save<T: Real>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(t, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_header<R: Read>(r: &mut R) -> Result<Header> {
    let mut fixed = [0u8; 7];
    r.read_exact(&mut fixed)?;
    if &fixed[..4] != MAGIC {
        return Err(TensorError::Format(format!("bad magic {:?}, expected \"RAPT\"", &fixed[..4])));
    }
    if fixed[4] != VERSION {
        return Err(TensorError::Format(format!("unsupported version {}, expected {VERSION}", fixed[4])));
    }
    let dtype = DType::from_code(fixed[5])
        .ok_or_else(|| TensorError::Format(format!("unknown dtype code {}", fixed[5])))?;
    let ndim = fixed[6] as usize;
    if ndim == 0 {
        return Err(TensorError::Format("ndim must be at least 1".into()));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut d = [0u8; 4];
        r.read_exact(&mut d)?;
        let d = u32::from_le_bytes(d) as usize;
        if d == 0 {
            return Err(TensorError::Format("zero-sized dimension".into()));
        }
        shape.push(d);
    }
    Ok(Header { dtype, shape })
}

/// Reads a tensor, converting from the stored precision to `T`.
pub fn read_from<T: Real, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let header = read_header(r)?;
    let numel: usize = header.shape.iter().product();
    let size = header.dtype.size();
    let mut bytes = vec![0u8; numel * size];
    r.read_exact(&mut bytes)
        .map_err(|e| TensorError::Format(format!("truncated payload for shape {:?}: {e}", header.shape)))?;
    let data: Vec<T> = match header.dtype {
        DType::Single => bytes
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::read_le(c) as f64))
            .collect(),
        DType::Double => bytes.chunks_exact(8).map(|c| T::from_f64_lossy(f64::read_le(c))).collect(),
    };
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(TensorError::Format("trailing bytes after payload".into()));
    }
    Tensor::new(&header.shape, data)
}

pub fn decode<T: Real>(mut bytes: &[u8]) -> Result<Tensor<T>> {
    read_from(&mut bytes)
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let mut r = BufReader::new(File::open(path)?);
    read_from(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::new(&[2, 1], vec![1.0, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"RAPT");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 0);
        assert_eq!(b[6], 2);
        assert_eq!(&b[7..11], &2u32.to_le_bytes());
        assert_eq!(&b[11..15], &1u32.to_le_bytes());
        assert_eq!(&b[15..19], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 23);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let t = Tensor::<f64>::ones(&[3]);
        let mut b = encode(&t);
        b[0] = b'X';
        assert!(decode::<f64>(&b).unwrap_err().to_string().contains("magic"));
        let mut b = encode(&t);
        b[4] = 9;
        assert!(decode::<f64>(&b).unwrap_err().to_string().contains("version"));
        let b = encode(&t);
        assert!(decode::<f64>(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn converts_precision_on_read() {
        let t = Tensor::<f64>::new(&[2], vec![0.5, 0.25]).unwrap();
        let back: Tensor<f32> = decode(&encode(&t)).unwrap();
        assert_eq!(back.data(), &[0.5f32, 0.25]);
    }
}
