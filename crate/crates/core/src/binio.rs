//! Little-endian primitives shared by the checkpoint and index formats.

use std::io::{self, Read, Write};

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_f64s<W: Write>(w: &mut W, vals: &[f64]) -> io::Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_f64s<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn read_magic<R: Read>(r: &mut R, expected: &[u8; 8]) -> io::Result<bool> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(&b == expected)
}

/// Guards allocations driven by untrusted header fields.
pub fn checked_len(rows: u64, cols: u64) -> Option<usize> {
    const LIMIT: u64 = 1 << 32;
    rows.checked_mul(cols)
        .filter(|&n| n <= LIMIT)
        .map(|n| n as usize)
}
