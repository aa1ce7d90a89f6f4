//! Little-endian primitives with truncation-safe reads.

use crate::error::{Error, Result};
use std::io::{Read, Write};

pub fn write_u8<W: Write>(w: &mut W, v: u8) -> Result<()> {
    w.write_all(&[v])?;
    Ok(())
}

pub fn write_u16<W: Write>(w: &mut W, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_i16<W: Write>(w: &mut W, v: i16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f32_slice<W: Write>(w: &mut W, vs: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 4);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let bytes = s.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(Error::Format("string field too long".into()));
    }
    write_u16(w, bytes.len() as u16)?;
    w.write_all(bytes)?;
    Ok(())
}

fn fill<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("truncated file".into()))
}

pub fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    fill(r, &mut b)?;
    Ok(b[0])
}

pub fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    fill(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    fill(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    fill(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_i16<R: Read>(r: &mut R) -> Result<i16> {
    let mut b = [0u8; 2];
    fill(r, &mut b)?;
    Ok(i16::from_le_bytes(b))
}

pub fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    fill(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_f32_vec<R: Read>(r: &mut R, count: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; count * 4];
    fill(r, &mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u16(r)? as usize;
    let mut buf = vec![0u8; len];
    fill(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("invalid utf-8 in string field".into()))
}

pub fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut b = [0u8; 4];
    fill(r, &mut b)?;
    if &b != magic {
        return Err(Error::Format(format!("bad magic for {what} file")));
    }
    Ok(())
}

pub fn expect_version<R: Read>(r: &mut R, want: u16, what: &str) -> Result<()> {
    let got = read_u16(r)?;
    if got != want {
        return Err(Error::Format(format!(
            "{what} file version {got} unsupported (expected {want})"
        )));
    }
    Ok(())
}
