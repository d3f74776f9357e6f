//! Parameter checkpoint container.
//!
//! Layout: the 7-byte magic `SFAGC01`, then one record per tensor until EOF:
//! name length (u64 LE), name bytes (UTF-8), rank (u64 LE), each extent
//! (u64 LE), then the values (f64 LE, row-major).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"SFAGC01";

pub fn write_records<W: Write>(mut w: W, records: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in records {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_records<R: Read>(mut r: R, source: &str) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(Error::parse(source, "missing SFAGC01 magic"));
    }
    let mut pos = MAGIC.len();
    let mut out = Vec::new();
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(Error::parse(source, format!("truncated record at byte offset {}", *pos)));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let u64_at = |pos: &mut usize| -> Result<u64> {
        Ok(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
    };
    while pos < buf.len() {
        let start = pos;
        let name_len = u64_at(&mut pos)? as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| Error::parse(source, format!("non-UTF-8 name at byte offset {start}")))?
            .to_string();
        let rank = u64_at(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64_at(&mut pos)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::parse(source, format!("record {name} at byte offset {start}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let records: Vec<(&str, &Tensor)> = store.iter().map(|(_, n, t)| (n, t)).collect();
    let mut bytes = Vec::new();
    write_records(&mut bytes, &records)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let f = std::fs::File::open(path)?;
    read_records(std::io::BufReader::new(f), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::matrix(1, 2, vec![1.5, -0.0]).unwrap();
        let mut bytes = Vec::new();
        write_records(&mut bytes, &[("ab", &t)]).unwrap();
        let mut expected = b"SFAGC01".to_vec();
        expected.extend(2u64.to_le_bytes());
        expected.extend(b"ab");
        expected.extend(2u64.to_le_bytes());
        expected.extend(1u64.to_le_bytes());
        expected.extend(2u64.to_le_bytes());
        expected.extend(1.5f64.to_le_bytes());
        expected.extend((-0.0f64).to_le_bytes());
        assert_eq!(bytes, expected);
        let back = read_records(&bytes[..], "mem").unwrap();
        assert_eq!(back, vec![("ab".to_string(), t)]);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        assert!(read_records(&b"SFAGC02"[..], "mem").is_err());
        let t = Tensor::scalar(1.0);
        let mut bytes = Vec::new();
        write_records(&mut bytes, &[("x", &t)]).unwrap();
        bytes.pop();
        let err = read_records(&bytes[..], "mem").unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }
}
