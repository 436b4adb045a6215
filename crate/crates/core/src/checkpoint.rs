//! Named-tensor checkpoint files.
//!
//! Layout: `"CMK1"`, little-endian `u32` entry count, then per entry a
//! little-endian `u16` name length, the UTF-8 name and an embedded DTF tensor.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_dtf, write_dtf, Tensor};

pub const CMK_MAGIC: &[u8; 4] = b"CMK1";

pub fn write_entries<W: Write>(w: &mut W, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    let io = |e| Error::format("checkpoint", format!("write failed: {e}"));
    w.write_all(CMK_MAGIC).map_err(io)?;
    let count = u32::try_from(entries.len()).map_err(|_| Error::invalid("too many checkpoint entries"))?;
    w.write_all(&count.to_le_bytes()).map_err(io)?;
    for (name, t) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::invalid(format!("checkpoint entry name too long: {name}")))?;
        w.write_all(&len.to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        write_dtf(w, t).map_err(io)?;
    }
    Ok(())
}

/// Reads every entry; any defect fails the whole read.
pub fn read_entries<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != CMK_MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let mut b4 = [0u8; 4];
    read_exact(r, &mut b4, "entry count")?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let mut b2 = [0u8; 2];
        read_exact(r, &mut b2, "name length")?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        read_exact(r, &mut name, "name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format("checkpoint", format!("entry {i} name is not UTF-8")))?;
        let t = read_dtf(r).map_err(|e| Error::format("checkpoint", format!("entry {name:?}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format("checkpoint", format!("truncated while reading {what}")))
}

pub fn save(path: impl AsRef<Path>, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    let path = path.as_ref();
    // write to a sibling then rename, so readers never see a partial file
    let tmp = path.with_extension("cmk.partial");
    {
        let f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(f);
        write_entries(&mut w, entries)?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<f32>)>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_entries(&mut BufReader::new(f))
}
