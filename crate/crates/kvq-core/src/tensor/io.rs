//! KVQT binary tensor files.
//!
//! Layout: magic `KVQT`, u8 version, u8 dtype code, u32 rank, `rank` u32 dims
//! (little-endian), then the raw little-endian scalar payload. Used for
//! fixtures, dataset clips, and checkpoint parameter blocks.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{KvqError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"KVQT";
const VERSION: u8 = 1;

/// Scalar encodings supported by the container.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F64 = 0,
    F32 = 1,
}

/// Writes `t` as an f64-payload KVQT record.
pub fn write_tensor_to<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    write_with_dtype(w, t, Dtype::F64)
}

/// Writes `t` with an f32 payload (training-scale checkpoints); values are
/// narrowed with round-to-nearest.
pub fn write_tensor_f32<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    write_with_dtype(w, t, Dtype::F32)
}

fn write_with_dtype<W: Write>(w: &mut W, t: &Tensor, dtype: Dtype) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, dtype as u8])?;
    let rank = u32::try_from(t.shape().len())
        .map_err(|_| KvqError::Format("rank exceeds u32".to_string()))?;
    w.write_all(&rank.to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| KvqError::Format("dim exceeds u32".to_string()))?;
        w.write_all(&d.to_le_bytes())?;
    }
    match dtype {
        Dtype::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Dtype::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Reads one KVQT record; f32 payloads are widened to f64.
pub fn read_tensor_from<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(KvqError::Format("bad magic, not a KVQT file".to_string()));
    }
    if head[4] != VERSION {
        return Err(KvqError::Format(format!("unsupported version {}", head[4])));
    }
    let dtype = match head[5] {
        0 => Dtype::F64,
        1 => Dtype::F32,
        c => return Err(KvqError::Format(format!("unknown dtype code {c}"))),
    };
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut u32buf)?;
        shape.push(u32::from_le_bytes(u32buf) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    match dtype {
        Dtype::F64 => {
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
        }
        Dtype::F32 => {
            let mut buf = [0u8; 4];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
        }
    }
    Tensor::new(shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor_from(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let t = Tensor::from_fn(&[3, 2, 4], |i| (i as f64).sin() * 1e3 + 1e-9);
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        let back = read_tensor_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn f32_payload_widens() {
        let t = Tensor::new(vec![2], vec![1.5, -0.25]).unwrap();
        let mut buf = Vec::new();
        write_tensor_f32(&mut buf, &t).unwrap();
        assert_eq!(buf[5], 1);
        let back = read_tensor_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.data(), &[1.5, -0.25]);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let buf = b"NOPE\x01\x00\x00\x00\x00\x00".to_vec();
        assert!(matches!(
            read_tensor_from(&mut buf.as_slice()),
            Err(KvqError::Format(_))
        ));
    }

    #[test]
    fn scalar_rank_zero_round_trip() {
        let t = Tensor::scalar(42.0);
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        let back = read_tensor_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), &[] as &[usize]);
        assert_eq!(back.item().unwrap(), 42.0);
    }
}
