//! Named-tensor container used for weights and descriptor files.
//!
//! Layout (little-endian): magic `ADMT`, `u32` version, `u32` entry count;
//! per entry a `u16` name length, UTF-8 name, `u8` rank, `rank × u64` dims,
//! then the row-major `f32` payload.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"ADMT";
pub const VERSION: u32 = 1;

pub fn write_tensors(mut w: impl Write, entries: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(entries.len()).map_err(|_| Error::Format("too many entries".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank too large for {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf)
}

fn truncated(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Format("truncated tensor container".into())
    } else {
        Error::Io(e)
    }
}

pub fn read_tensors(mut r: impl Read) -> Result<Vec<(String, Tensor)>> {
    if &read_exact::<4>(&mut r)? != MAGIC {
        return Err(Error::Format("bad magic, not an ADMT container".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut r)?);
    let mut out = Vec::with_capacity(count.min(1024) as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
        let rank = read_exact::<1>(&mut r)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(u64::from_le_bytes(read_exact(&mut r)?))
                .map_err(|_| Error::Format(format!("dimension overflow in {name}")))?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Format(format!("dimension overflow in {name}")))?;
            shape.push(d);
        }
        let bytes = numel
            .checked_mul(4)
            .ok_or_else(|| Error::Format(format!("dimension overflow in {name}")))?;
        let mut payload = Vec::new();
        r.by_ref().take(bytes as u64).read_to_end(&mut payload)?;
        if payload.len() != bytes {
            return Err(Error::Format(format!("truncated payload for {name}")));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last entry".into()));
    }
    Ok(out)
}

pub fn to_bytes(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, entries).expect("writing to memory");
    buf
}

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, to_bytes(entries))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_tensors(io::BufReader::new(fs::File::open(path)?))
}

/// Single-tensor helper: looks up `name` or fails with a format error.
pub fn find<'a>(entries: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Format(format!("container has no entry {name}")))
}
