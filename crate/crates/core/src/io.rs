//! Little-endian binary float formats.
//!
//! * Matrix block: `u64 rows`, `u64 cols`, then `rows * cols` `f32` values, row-major.
//!   Embedding tables are one block; encoder parameters are several blocks back to back.
//! * Raw tensor: `u64 rank`, `rank` × `u64` dims, then the `f32` values in row-major order.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAX_ELEMENTS: u64 = 1 << 32;

fn checked_len(what: &'static str, dims: &[u64]) -> Result<usize> {
    let mut n: u64 = 1;
    for &d in dims {
        n = n.checked_mul(d).filter(|&n| n <= MAX_ELEMENTS).ok_or(Error::Format {
            what,
            msg: format!("dimensions {dims:?} are too large"),
        })?;
    }
    Ok(n as usize)
}

fn read_f32s(reader: &mut impl Read, what: &'static str, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0f32; n];
    reader.read_f32_into::<LittleEndian>(&mut buf).map_err(|e| Error::Format {
        what,
        msg: format!("truncated payload ({e})"),
    })?;
    Ok(buf.into_iter().map(f64::from).collect())
}

/// Reads one matrix block.
pub fn read_matrix(reader: &mut impl Read) -> Result<Array2<f64>> {
    let rows = reader.read_u64::<LittleEndian>()?;
    let cols = reader.read_u64::<LittleEndian>()?;
    let n = checked_len("matrix block", &[rows, cols])?;
    let data = read_f32s(reader, "matrix block", n)?;
    Ok(Array2::from_shape_vec((rows as usize, cols as usize), data).expect("length checked"))
}

/// Writes one matrix block. Values are narrowed to `f32`.
pub fn write_matrix(writer: &mut impl Write, m: &Array2<f64>) -> Result<()> {
    writer.write_u64::<LittleEndian>(m.nrows() as u64)?;
    writer.write_u64::<LittleEndian>(m.ncols() as u64)?;
    for &v in m.iter() {
        writer.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(())
}

pub fn read_tensor(reader: &mut impl Read) -> Result<ArrayD<f64>> {
    let rank = reader.read_u64::<LittleEndian>()?;
    if rank > 8 {
        return Err(Error::Format {
            what: "raw tensor",
            msg: format!("rank {rank} is not supported"),
        });
    }
    let dims = (0..rank)
        .map(|_| reader.read_u64::<LittleEndian>())
        .collect::<std::io::Result<Vec<_>>>()?;
    let n = checked_len("raw tensor", &dims)?;
    let data = read_f32s(reader, "raw tensor", n)?;
    let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&shape), data).expect("length checked"))
}

pub fn write_tensor(writer: &mut impl Write, t: &ArrayD<f64>) -> Result<()> {
    writer.write_u64::<LittleEndian>(t.ndim() as u64)?;
    for &d in t.shape() {
        writer.write_u64::<LittleEndian>(d as u64)?;
    }
    for &v in t.iter() {
        writer.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(())
}

/// Rounds every entry through `f32` so in-memory values equal what a file round-trip yields.
pub fn round_to_f32<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) {
    a.mapv_inplace(|v| f64::from(v as f32));
}
