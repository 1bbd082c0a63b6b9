//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian): the magic `TRKT`, a `u32` version,
//! then one record per parameter until end of file: `u32` name length, UTF-8
//! name, `u32` rank, `rank × u64` dims, `f32` elements.

use std::io::{Read, Write};

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TRKT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<T: Scalar, W: Write>(store: &ParamStore<T>, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (_, name, tensor) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(tensor.numel() * 4);
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Checkpoint(format!("truncated while reading {what}: {e}")))
}

/// Reads all `(name, tensor)` records.
pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<Vec<(String, Tensor<T>)>> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    read_exact_or(&mut r, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let mut records = Vec::new();
    loop {
        // A clean end of file is only allowed at a record boundary.
        let mut first = [0u8; 1];
        if r.read(&mut first)? == 0 {
            break;
        }
        let mut rest = [0u8; 3];
        read_exact_or(&mut r, &mut rest, "name length")?;
        let name_len = u32::from_le_bytes([first[0], rest[0], rest[1], rest[2]]) as usize;
        let mut name = vec![0u8; name_len];
        read_exact_or(&mut r, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(format!("name is not UTF-8: {e}")))?;
        read_exact_or(&mut r, &mut word, "rank")?;
        let rank = u32::from_le_bytes(word) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d = [0u8; 8];
            read_exact_or(&mut r, &mut d, "dims")?;
            shape.push(u64::from_le_bytes(d) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        read_exact_or(&mut r, &mut bytes, "elements")?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])).unwrap())
            .collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        records.push((name, tensor));
    }
    Ok(records)
}
