//! `BDTN` named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "BDTN" | version u16 | count u32 |
//!   count x ( name_len u32 | name utf-8 | rank u8 | rank x extent u64 | payload f64 LE )
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BDTN";
pub const VERSION: u16 = 1;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Format(format!("tensor '{name}' has rank > 255")))?;
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    if &read_array::<4, _>(&mut r)? != MAGIC {
        return Err(Error::Format("not a BDTN checkpoint".into()));
    }
    let version = u16::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported BDTN version {version}")));
    }
    let count = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("name is not utf-8".into()))?;
        let rank = read_array::<1, _>(&mut r)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(read_array(&mut r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Format(format!("truncated payload of '{name}': {e}")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_tensors(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let f = std::fs::File::open(path)?;
    read_tensors(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let tensors = vec![
            ("a".to_string(), Tensor::scalar(f64::MIN_POSITIVE)),
            (
                "enc.0.w".to_string(),
                Tensor::from_fn(&[2, 3, 1], |i| (i as f64 * 0.1).sin() / 3.0),
            ),
            ("ünï".to_string(), Tensor::new(&[0], vec![]).unwrap()),
        ];
        let mut buf = Vec::new();
        write_tensors(&mut buf, &tensors).unwrap();
        let back = read_tensors(&buf[..]).unwrap();
        assert_eq!(back.len(), 3);
        for ((n0, t0), (n1, t1)) in tensors.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            let b0: Vec<u64> = t0.data().iter().map(|v| v.to_bits()).collect();
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b0, b1);
        }
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("x".into(), Tensor::ones(&[2]))]).unwrap();
        assert_eq!(&buf[..4], b"BDTN");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        assert_eq!(u32::from_le_bytes(buf[6..10].try_into().unwrap()), 1);
        // name_len(4) + name(1) + rank(1) + extent(8) + payload(16)
        assert_eq!(buf.len(), 10 + 4 + 1 + 1 + 8 + 16);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_tensors(&b"XXXX\x01\x00"[..]), Err(Error::Format(_))));
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("x".into(), Tensor::ones(&[4]))]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_tensors(&buf[..]), Err(Error::Format(_))));
    }
}
