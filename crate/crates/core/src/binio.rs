//! Small helpers for the little-endian binary file formats.

use crate::error::{GtaError, Result};

pub fn write_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn write_string(buf: &mut Vec<u8>, s: &str) {
    write_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

/// Copy `out.len()` bytes off the front of `cur`, advancing it.
pub fn read_exact_buf(cur: &mut &[u8], out: &mut [u8]) -> Result<()> {
    if cur.len() < out.len() {
        return Err(GtaError::Corrupt("unexpected end of file".into()));
    }
    let (head, rest) = cur.split_at(out.len());
    out.copy_from_slice(head);
    *cur = rest;
    Ok(())
}

pub fn read_u32(cur: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_buf(cur, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_string(cur: &mut &[u8]) -> Result<String> {
    let len = read_u32(cur)? as usize;
    let mut b = vec![0u8; len];
    read_exact_buf(cur, &mut b)?;
    String::from_utf8(b).map_err(|_| GtaError::Corrupt("string field is not utf-8".into()))
}
