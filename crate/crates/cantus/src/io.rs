//! Binary file helpers. Every on-disk artifact starts with a 4-byte magic and
//! a little-endian u16 version; readers reject unknown magics and newer
//! versions loudly.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub fn write_magic(w: &mut impl Write, magic: &[u8; 4], version: u16) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())?;
    Ok(())
}

pub fn read_magic(r: &mut impl Read, magic: &[u8; 4], max_version: u16) -> Result<u16> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::BadFormat(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&m)
        )));
    }
    let v = read_u16(r)?;
    if v > max_version {
        return Err(Error::BadFormat(format!(
            "file version {v} is newer than supported {max_version}"
        )));
    }
    Ok(v)
}

pub fn write_u16(w: &mut impl Write, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_f32_slice(w: &mut impl Write, data: &[f32]) -> Result<()> {
    for &x in data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_f32_vec(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)?;
    Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn write_u32_slice(w: &mut impl Write, data: &[u32]) -> Result<()> {
    for &x in data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_u32_vec(r: &mut impl Read, n: usize) -> Result<Vec<u32>> {
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)?;
    Ok(raw.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_str(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut raw = vec![0u8; n];
    r.read_exact(&mut raw)?;
    String::from_utf8(raw).map_err(|e| Error::BadFormat(format!("invalid utf-8 string: {e}")))
}

pub fn write_mat(w: &mut impl Write, m: &crate::tensor::Mat) -> Result<()> {
    write_u32(w, m.rows as u32)?;
    write_u32(w, m.cols as u32)?;
    write_f32_slice(w, &m.data)
}

pub fn read_mat(r: &mut impl Read) -> Result<crate::tensor::Mat> {
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let data = read_f32_vec(r, rows * cols)?;
    Ok(crate::tensor::Mat::from_vec(rows, cols, data))
}

/// Named parameter blob: count, then (name, mat) records in the given order.
pub fn write_named_mats<'a>(
    w: &mut impl Write,
    mats: impl ExactSizeIterator<Item = (&'a str, &'a crate::tensor::Mat)>,
) -> Result<()> {
    write_u32(w, mats.len() as u32)?;
    for (name, m) in mats {
        write_str(w, name)?;
        write_mat(w, m)?;
    }
    Ok(())
}

pub fn read_named_mats(r: &mut impl Read) -> Result<Vec<(String, crate::tensor::Mat)>> {
    let n = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let name = read_str(r)?;
        let m = read_mat(r)?;
        out.push((name, m));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn magic_round_trip_and_rejection() {
        let mut buf = Vec::new();
        write_magic(&mut buf, b"TOKS", 1).unwrap();
        let v = read_magic(&mut buf.as_slice(), b"TOKS", 1).unwrap();
        assert_eq!(v, 1);
        assert!(read_magic(&mut buf.as_slice(), b"RVQ1", 1).is_err());

        let mut newer = Vec::new();
        write_magic(&mut newer, b"TOKS", 9).unwrap();
        assert!(read_magic(&mut newer.as_slice(), b"TOKS", 1).is_err());
    }

    #[test]
    fn scalar_round_trips() {
        let mut buf = Vec::new();
        write_u32(&mut buf, 0xDEAD_BEEF).unwrap();
        write_u64(&mut buf, 42).unwrap();
        write_str(&mut buf, "hello").unwrap();
        write_f32_slice(&mut buf, &[1.5, -2.25]).unwrap();
        let mut r = buf.as_slice();
        assert_eq!(read_u32(&mut r).unwrap(), 0xDEAD_BEEF);
        assert_eq!(read_u64(&mut r).unwrap(), 42);
        assert_eq!(read_str(&mut r).unwrap(), "hello");
        assert_eq!(read_f32_vec(&mut r, 2).unwrap(), vec![1.5, -2.25]);
    }
}
