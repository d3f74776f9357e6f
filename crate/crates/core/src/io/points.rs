//! Point cloud files: whitespace text and the `PCBIN01` binary layout.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::PointSet;
use crate::tensor::Tensor;

pub const BIN_MAGIC: &[u8; 7] = b"PCBIN01";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    XyzText,
    Bin,
}

impl Format {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "xyz-text" | "xyz" | "txt" => Ok(Format::XyzText),
            "bin" => Ok(Format::Bin),
            other => Err(Error::invalid(format!("unknown point format {other:?}"))),
        }
    }

    /// `.bin` files are binary, everything else is text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => Format::Bin,
            _ => Format::XyzText,
        }
    }
}

/// Parses rows of whitespace-separated floats; every row must have the same width.
pub fn parse_rows<R: BufRead>(reader: R, source: &str) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut n = 0;
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::parse(source, format!("line {}: {tok:?} is not a number", i + 1)))?;
            if !v.is_finite() {
                return Err(Error::parse(source, format!("line {}: non-finite value", i + 1)));
            }
            data.push(v);
            n += 1;
        }
        match width {
            None => width = Some(n),
            Some(w) if w != n => {
                return Err(Error::parse(source, format!("line {}: expected {w} values, found {n}", i + 1)))
            }
            _ => {}
        }
        rows += 1;
    }
    let width = width.ok_or_else(|| Error::parse(source, "no points"))?;
    Tensor::new(vec![rows, width], data)
}

pub fn load_points(path: &Path, format: Format) -> Result<PointSet> {
    let source = path.display().to_string();
    let coords = match format {
        Format::XyzText => parse_rows(BufReader::new(fs::File::open(path)?), &source)?,
        Format::Bin => read_bin(&mut BufReader::new(fs::File::open(path)?), &source)?,
    };
    PointSet::from_coords(coords)
}

pub fn save_points(path: &Path, coords: &Tensor, format: Format) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    match format {
        Format::XyzText => {
            for i in 0..coords.rows() {
                let row: Vec<String> = coords.row(i).iter().map(|v| format!("{v:?}")).collect();
                writeln!(w, "{}", row.join(" "))?;
            }
        }
        Format::Bin => write_bin(&mut w, coords)?,
    }
    w.flush()?;
    Ok(())
}

pub fn write_bin<W: Write>(w: &mut W, coords: &Tensor) -> Result<()> {
    w.write_all(BIN_MAGIC)?;
    w.write_all(&(coords.rows() as u64).to_le_bytes())?;
    w.write_all(&(coords.cols() as u64).to_le_bytes())?;
    for v in coords.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_bin<R: Read>(r: &mut R, source: &str) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 23 || &bytes[..7] != BIN_MAGIC {
        return Err(Error::parse(source, "offset 0: missing PCBIN01 header"));
    }
    let word = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    let (n, c) = (word(7), word(15));
    let count = n.checked_mul(c).and_then(|m| m.checked_mul(8));
    let expected = count.and_then(|m| m.checked_add(23));
    if n == 0 || c == 0 || expected != Some(bytes.len() as u64) {
        return Err(Error::parse(
            source,
            format!("offset 7: header says {n}×{c} values but payload is {} bytes", bytes.len() - 23),
        ));
    }
    let data: Vec<f64> = bytes[23..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::parse(source, format!("offset {}: non-finite value", 23 + 8 * i)));
    }
    Tensor::new(vec![n as usize, c as usize], data)
}

/// Translates to zero centroid and scales so the largest norm is 1. A
/// cloud whose points all coincide is only translated.
pub fn normalize_unit_sphere(coords: &Tensor) -> Tensor {
    let (n, c) = (coords.rows(), coords.cols());
    let mut centroid = vec![0.0; c];
    for i in 0..n {
        for (m, v) in centroid.iter_mut().zip(coords.row(i)) {
            *m += v;
        }
    }
    centroid.iter_mut().for_each(|m| *m /= n as f64);
    let mut out: Vec<f64> = Vec::with_capacity(n * c);
    for i in 0..n {
        out.extend(coords.row(i).iter().zip(&centroid).map(|(v, m)| v - m));
    }
    let max = out
        .chunks(c)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    if max > 1e-300 {
        out.iter_mut().for_each(|v| *v /= max);
    }
    Tensor::from_parts(vec![n, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_rows_parse() {
        let t = parse_rows("0 0 0\n1 2 3\n\n4 5 6\n".as_bytes(), "t").unwrap();
        assert_eq!(t.shape(), &[3, 3]);
        let e = parse_rows("1 2 3\n1 2\n".as_bytes(), "t").unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
        assert!(parse_rows("".as_bytes(), "t").is_err());
        assert!(parse_rows("1 x 3".as_bytes(), "t").is_err());
    }

    #[test]
    fn bin_truncation_is_reported() {
        let t = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let mut buf = Vec::new();
        write_bin(&mut buf, &t).unwrap();
        assert_eq!(read_bin(&mut buf.as_slice(), "b").unwrap(), t);
        buf.pop();
        assert!(read_bin(&mut buf.as_slice(), "b").is_err());
        assert!(read_bin(&mut &b"PCBIN02"[..], "b").is_err());
    }

    #[test]
    fn single_point_goes_to_origin() {
        let t = Tensor::matrix(1, 3, vec![4., 5., 6.]).unwrap();
        assert_eq!(normalize_unit_sphere(&t).data(), &[0.0, 0.0, 0.0]);
    }
}
