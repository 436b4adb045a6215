//! DTF tensor files.
//!
//! Layout: `"DTF1"`, one byte dtype code (0 = float32), one byte rank `r`,
//! `r` little-endian `u32` extents, then the row-major payload as
//! little-endian scalars.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const DTF_MAGIC: &[u8; 4] = b"DTF1";
const DTYPE_F32: u8 = 0;

pub fn write_dtf<W: Write>(w: &mut W, t: &Tensor<f32>) -> std::io::Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| {
        std::io::Error::new(std::io::ErrorKind::InvalidInput, "rank exceeds 255")
    })?;
    w.write_all(DTF_MAGIC)?;
    w.write_all(&[DTYPE_F32, rank])?;
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "extent exceeds u32")
        })?;
        w.write_all(&e.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format("DTF", format!("truncated while reading {what}"))
        } else {
            Error::format("DTF", e.to_string())
        }
    })
}

pub fn read_dtf<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    let mut head = [0u8; 6];
    read_exact(r, &mut head, "header")?;
    if &head[..4] != DTF_MAGIC {
        return Err(Error::format("DTF", "bad magic"));
    }
    if head[4] != DTYPE_F32 {
        return Err(Error::format(
            "DTF",
            format!("unsupported dtype code {}", head[4]),
        ));
    }
    let rank = head[5] as usize;
    if rank == 0 {
        return Err(Error::format("DTF", "rank 0"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        read_exact(r, &mut b, "extents")?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::format("DTF", "extent product overflows"))?;
    let mut payload = vec![0u8; n * 4];
    read_exact(r, &mut payload, "payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::format("DTF", e.to_string()))
}

pub fn write_dtf_file(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_dtf(&mut w, t)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_dtf_file(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dtf(&mut BufReader::new(f))
}
