//! Raw tensor encoding:
//!
//! ```text
//! "SALT" | u32 dtype (4 = f32, 8 = f64) | u32 rank | u32 extent * rank | payload
//! ```
//!
//! All integers and payload values are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SALT";

/// Writes `tensor` in its own dtype.
pub fn write_tensor_to<T: Scalar, W: Write>(w: &mut W, tensor: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 4 * tensor.rank() + tensor.len() * T::DTYPE.size_bytes());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&T::DTYPE.code().to_le_bytes());
    buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &e in tensor.shape() {
        let e = u32::try_from(e)
            .map_err(|_| Error::Dimension(format!("extent {e} does not fit in u32")))?;
        buf.extend_from_slice(&e.to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncation)?;
    Ok(u32::from_le_bytes(b))
}

fn truncation(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Integrity("tensor block is truncated".into())
    } else {
        Error::Io(e)
    }
}

/// Reads one tensor block, converting the payload to `T` if needed.
pub fn read_tensor_from<T: Scalar, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncation)?;
    if &magic != MAGIC {
        return Err(Error::Integrity(format!("bad tensor magic {magic:?}")));
    }
    let code = read_u32(r)?;
    let dtype = DType::from_code(code)
        .ok_or_else(|| Error::Integrity(format!("unknown dtype code {code}")))?;
    let rank = read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let len: usize = shape.iter().product();
    let width = dtype.size_bytes();
    let mut payload = vec![0u8; len * width];
    r.read_exact(&mut payload).map_err(truncation)?;
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| T::from_f64(f64::read_le(c)))
            .collect(),
    };
    Tensor::new(shape, data)
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(&mut w, tensor)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor_from(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_little_endian() {
        let t = Tensor::<f32>::new(vec![2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"SALT");
        assert_eq!(&buf[4..8], &4u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &2u32.to_le_bytes());
        assert_eq!(&buf[16..20], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 24);
    }

    #[test]
    fn round_trip_f64() {
        let t = Tensor::<f64>::new(vec![2, 1, 3], (0..6).map(|i| i as f64 * 0.1).collect()).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        let back: Tensor<f64> = read_tensor_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_block_is_integrity_error() {
        let t = Tensor::<f64>::zeros(vec![4]);
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_tensor_from::<f64, _>(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "{err}");
    }
}
