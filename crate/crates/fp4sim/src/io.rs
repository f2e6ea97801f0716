//! FPT1 / FPQ1 file formats.
//!
//! FPT1 (plain tensor): ASCII magic `FPT1`, little-endian u32 ndim,
//! ndim x u32 dims, then a row-major IEEE-754 binary32 payload.
//!
//! FPQ1 (quantized tensor): ASCII magic `FPQ1`, format tag (u8: 0=E1M2,
//! 1=E2M1, 2=E3M0), axis tag (u8: 0=tensor, 1=row, 2=column), u32 rows,
//! u32 cols, per-group scales as binary32, then the packed nibble payload
//! (two codes per byte, low nibble first, row-major).
//!
//! Everything is little-endian so files are bit-exact across
//! implementations.

use std::io::{Read, Write};
use std::path::Path;

use crate::fp4::{Fp4Format, QuantizedTensor, ScaleAxis};
use crate::linalg::DenseMatrix;
use crate::{Error, Result};

const FPT1_MAGIC: &[u8; 4] = b"FPT1";
const FPQ1_MAGIC: &[u8; 4] = b"FPQ1";

fn format_tag(f: Fp4Format) -> u8 {
    match f {
        Fp4Format::E1M2 => 0,
        Fp4Format::E2M1 => 1,
        Fp4Format::E3M0 => 2,
    }
}

fn format_from_tag(tag: u8) -> Result<Fp4Format> {
    match tag {
        0 => Ok(Fp4Format::E1M2),
        1 => Ok(Fp4Format::E2M1),
        2 => Ok(Fp4Format::E3M0),
        other => Err(Error::FileFormat(format!("unknown format tag {other}"))),
    }
}

fn axis_tag(a: ScaleAxis) -> u8 {
    match a {
        ScaleAxis::PerTensor => 0,
        ScaleAxis::PerRow => 1,
        ScaleAxis::PerColumn => 2,
    }
}

fn axis_from_tag(tag: u8) -> Result<ScaleAxis> {
    match tag {
        0 => Ok(ScaleAxis::PerTensor),
        1 => Ok(ScaleAxis::PerRow),
        2 => Ok(ScaleAxis::PerColumn),
        other => Err(Error::FileFormat(format!("unknown axis tag {other}"))),
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut buf = [0u8; 1];
    r.read_exact(&mut buf)?;
    Ok(buf[0])
}

fn checked_dim(v: u32, what: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::FileFormat(format!("{what} {v} overflows usize")))
}

fn checked_elems(rows: usize, cols: usize) -> Result<usize> {
    rows.checked_mul(cols)
        .ok_or_else(|| Error::FileFormat(format!("element count {rows}x{cols} overflows")))
}

/// Write a matrix as a 2-D FPT1 tensor.
pub fn write_fpt1(w: &mut impl Write, x: &DenseMatrix) -> Result<()> {
    w.write_all(FPT1_MAGIC)?;
    w.write_all(&2u32.to_le_bytes())?;
    w.write_all(&(x.rows() as u32).to_le_bytes())?;
    w.write_all(&(x.cols() as u32).to_le_bytes())?;
    for &v in x.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Read an FPT1 tensor; 1-D tensors come back as a single row.
pub fn read_fpt1(r: &mut impl Read) -> Result<DenseMatrix> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FPT1_MAGIC {
        return Err(Error::FileFormat(format!(
            "bad magic {:?}, expected \"FPT1\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let ndim = read_u32(r)?;
    let (rows, cols) = match ndim {
        1 => (1, checked_dim(read_u32(r)?, "dim")?),
        2 => (
            checked_dim(read_u32(r)?, "rows")?,
            checked_dim(read_u32(r)?, "cols")?,
        ),
        n => {
            return Err(Error::FileFormat(format!(
                "unsupported ndim {n} (this toolkit handles 1-D and 2-D tensors)"
            )))
        }
    };
    let total = checked_elems(rows, cols)?;
    let mut payload = vec![0u8; total.checked_mul(4).ok_or_else(|| {
        Error::FileFormat("payload size overflows".into())
    })?];
    r.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    DenseMatrix::new(rows, cols, data)
}

pub fn write_fpq1(w: &mut impl Write, q: &QuantizedTensor) -> Result<()> {
    w.write_all(FPQ1_MAGIC)?;
    w.write_all(&[format_tag(q.format()), axis_tag(q.axis())])?;
    w.write_all(&(q.rows() as u32).to_le_bytes())?;
    w.write_all(&(q.cols() as u32).to_le_bytes())?;
    for &s in q.scales() {
        w.write_all(&(s as f32).to_le_bytes())?;
    }
    w.write_all(q.packed_codes())?;
    Ok(())
}

pub fn read_fpq1(r: &mut impl Read) -> Result<QuantizedTensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FPQ1_MAGIC {
        return Err(Error::FileFormat(format!(
            "bad magic {:?}, expected \"FPQ1\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let format = format_from_tag(read_u8(r)?)?;
    let axis = axis_from_tag(read_u8(r)?)?;
    let rows = checked_dim(read_u32(r)?, "rows")?;
    let cols = checked_dim(read_u32(r)?, "cols")?;
    let total = checked_elems(rows, cols)?;
    let n_scales = match axis {
        ScaleAxis::PerTensor => 1,
        ScaleAxis::PerRow => rows,
        ScaleAxis::PerColumn => cols,
    };
    let mut scale_bytes = vec![0u8; n_scales * 4];
    r.read_exact(&mut scale_bytes)?;
    let scales = scale_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mut codes = vec![0u8; total.div_ceil(2)];
    r.read_exact(&mut codes)?;
    QuantizedTensor::from_parts(rows, cols, codes, scales, axis, format)
}

pub fn write_fpt1_file(path: impl AsRef<Path>, x: &DenseMatrix) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_fpt1(&mut f, x)
}

pub fn read_fpt1_file(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_fpt1(&mut f)
}

pub fn write_fpq1_file(path: impl AsRef<Path>, q: &QuantizedTensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_fpq1(&mut f, q)
}

pub fn read_fpq1_file(path: impl AsRef<Path>) -> Result<QuantizedTensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_fpq1(&mut f)
}
