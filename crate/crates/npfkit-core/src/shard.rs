//! Binary shard files holding derivative-tensor batches.
//!
//! Layout (all integers little-endian):
//!   magic `NPFT` (4 bytes), version `u16` = 1, dtype code `u8`
//!   (0 = real64, 1 = complex128), rank `u8`, n_states `u32`, order `u8`,
//!   batch ordinal `u32`, batch total `u32`, then one `(start u64, end u64)`
//!   pair per dimension; payload of row-major values (complex stored as
//!   re, im pairs); footer: FNV-1a 64-bit checksum of the payload bytes.

use crate::error::{Error, Result};
use crate::system::DerivativeTensorBatch;
use crate::tensor::{DenseTensor, IndexRange, TensorData};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const MAGIC: &[u8; 4] = b"NPFT";
pub const VERSION: u16 = 1;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Canonical shard filename for (order, ordinal).
pub fn shard_filename(order: usize, ordinal: u64) -> String {
    format!("order{order}_batch{ordinal:08}.npft")
}

pub fn write_shard(
    w: &mut impl Write,
    batch: &DerivativeTensorBatch,
    batch_total: u32,
) -> Result<()> {
    let rank = batch.ranges.len();
    if rank != batch.order + 1 || rank > u8::MAX as usize {
        return Err(Error::ShardFormat(format!(
            "rank {rank} inconsistent with order {}",
            batch.order
        )));
    }
    if batch.ordinal > u32::MAX as u64 {
        return Err(Error::ShardFormat("batch ordinal exceeds u32".into()));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let dtype_code: u8 = match batch.values.data() {
        TensorData::Real(_) => 0,
        TensorData::Complex(_) => 1,
    };
    w.write_all(&[dtype_code, rank as u8])?;
    w.write_all(&(batch.n_states as u32).to_le_bytes())?;
    w.write_all(&[batch.order as u8])?;
    w.write_all(&(batch.ordinal as u32).to_le_bytes())?;
    w.write_all(&batch_total.to_le_bytes())?;
    for r in &batch.ranges {
        w.write_all(&(r.start as u64).to_le_bytes())?;
        w.write_all(&(r.end as u64).to_le_bytes())?;
    }
    let payload = match batch.values.data() {
        TensorData::Real(v) => {
            let mut p = Vec::with_capacity(v.len() * 8);
            for x in v {
                p.extend_from_slice(&x.to_le_bytes());
            }
            p
        }
        TensorData::Complex(v) => {
            let mut p = Vec::with_capacity(v.len() * 16);
            for x in v {
                p.extend_from_slice(&x.re.to_le_bytes());
                p.extend_from_slice(&x.im.to_le_bytes());
            }
            p
        }
    };
    w.write_all(&payload)?;
    w.write_all(&fnv1a64(&payload).to_le_bytes())?;
    Ok(())
}

pub fn read_shard(r: &mut impl Read) -> Result<(DerivativeTensorBatch, u32)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::ShardFormat("bad magic".into()));
    }
    let version = read_u16(r)?;
    if version != VERSION {
        return Err(Error::ShardFormat(format!("unsupported version {version}")));
    }
    let mut two = [0u8; 2];
    r.read_exact(&mut two)?;
    let (dtype_code, rank) = (two[0], two[1] as usize);
    if dtype_code > 1 {
        return Err(Error::ShardFormat(format!("unknown dtype code {dtype_code}")));
    }
    if rank < 1 {
        return Err(Error::ShardFormat("rank must be >= 1".into()));
    }
    let n_states = read_u32(r)? as usize;
    let mut one = [0u8; 1];
    r.read_exact(&mut one)?;
    let order = one[0] as usize;
    if order + 1 != rank {
        return Err(Error::ShardFormat(format!(
            "order {order} inconsistent with rank {rank}"
        )));
    }
    let ordinal = read_u32(r)? as u64;
    let batch_total = read_u32(r)?;
    let mut ranges = Vec::with_capacity(rank);
    for _ in 0..rank {
        let start = read_u64(r)? as usize;
        let end = read_u64(r)? as usize;
        let range = IndexRange::new(start, end)
            .map_err(|e| Error::ShardFormat(format!("bad range: {e}")))?;
        range
            .validate(n_states)
            .map_err(|e| Error::ShardFormat(format!("bad range: {e}")))?;
        ranges.push(range);
    }
    let widths: Vec<usize> = ranges.iter().map(|r| r.width()).collect();
    let cells: usize = widths.iter().product();
    let elem = if dtype_code == 0 { 8 } else { 16 };
    let mut payload = vec![0u8; cells * elem];
    r.read_exact(&mut payload)?;
    let mut footer = [0u8; 8];
    r.read_exact(&mut footer)?;
    if u64::from_le_bytes(footer) != fnv1a64(&payload) {
        return Err(Error::ShardFormat("payload checksum mismatch".into()));
    }
    let values = if dtype_code == 0 {
        let v: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        DenseTensor::real(widths, v)?
    } else {
        let v: Vec<num_complex::Complex64> = payload
            .chunks_exact(16)
            .map(|c| {
                num_complex::Complex64::new(
                    f64::from_le_bytes(c[..8].try_into().unwrap()),
                    f64::from_le_bytes(c[8..].try_into().unwrap()),
                )
            })
            .collect();
        DenseTensor::complex(widths, v)?
    };
    Ok((
        DerivativeTensorBatch {
            order,
            n_states,
            ordinal,
            ranges,
            values,
            warnings: Vec::new(),
        },
        batch_total,
    ))
}

pub fn write_shard_file(
    dir: &Path,
    batch: &DerivativeTensorBatch,
    batch_total: u32,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(shard_filename(batch.order, batch.ordinal));
    let mut w = BufWriter::new(File::create(&path)?);
    write_shard(&mut w, batch, batch_total)?;
    w.flush()?;
    Ok(path)
}

pub fn read_shard_file(path: &Path) -> Result<(DerivativeTensorBatch, u32)> {
    let mut r = BufReader::new(File::open(path)?);
    read_shard(&mut r)
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
