//! Self-describing binary container for named float arrays.
//!
//! Layout: the version tag `FKAC1` leads the file, followed by an
//! optional UTF-8 metadata block (u32 length + bytes, used for the
//! network config echo), a u32 entry count, one header record per array
//! (u16 name length + name, u8 dtype tag, u8 rank, rank x u64 extents),
//! and finally the raw little-endian float payloads in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::{Dtype, Real, Shape, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"FKAC1";

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn dtype(&self) -> Dtype {
        match self {
            ArrayData::F32(_) => Dtype::F32,
            ArrayData::F64(_) => Dtype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lossless only for f32 payloads or integral-representable values.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn from_tensor<F: Real>(name: impl Into<String>, tensor: &Tensor<F>) -> NamedArray {
        let data = match F::DTYPE {
            Dtype::F32 => {
                ArrayData::F32(tensor.data().iter().map(|v| v.as_f64() as f32).collect())
            }
            Dtype::F64 => ArrayData::F64(tensor.data().iter().map(|v| v.as_f64()).collect()),
        };
        NamedArray {
            name: name.into(),
            dims: tensor.dims().to_vec(),
            data,
        }
    }

    pub fn scalar_f64(name: impl Into<String>, value: f64) -> NamedArray {
        NamedArray {
            name: name.into(),
            dims: vec![1],
            data: ArrayData::F64(vec![value]),
        }
    }

    /// Reconstruct a tensor; the stored dtype must match `F` so values
    /// stay bit-identical.
    pub fn to_tensor<F: Real>(&self) -> Result<Tensor<F>> {
        if self.data.dtype() != F::DTYPE {
            return Err(Error::Checkpoint(format!(
                "array `{}` stored as {:?}, requested {:?}",
                self.name,
                self.data.dtype(),
                F::DTYPE
            )));
        }
        let data: Vec<F> = match &self.data {
            ArrayData::F32(v) => v.iter().map(|&x| F::from_f64(x as f64)).collect(),
            ArrayData::F64(v) => v.iter().map(|&x| F::from_f64(x)).collect(),
        };
        Tensor::new(Shape::new(&self.dims)?, data)
    }
}

pub fn write_checkpoint(
    mut w: impl Write,
    meta: Option<&str>,
    arrays: &[NamedArray],
) -> Result<()> {
    w.write_all(MAGIC)?;
    let meta_bytes = meta.unwrap_or("").as_bytes();
    w.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
    w.write_all(meta_bytes)?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for array in arrays {
        let numel: usize = array.dims.iter().product();
        if numel != array.data.len() {
            return Err(Error::Checkpoint(format!(
                "array `{}`: {} values for dims {:?}",
                array.name,
                array.data.len(),
                array.dims
            )));
        }
        let name = array.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[array.data.dtype().tag(), array.dims.len() as u8])?;
        for &d in &array.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    for array in arrays {
        match &array.data {
            ArrayData::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            ArrayData::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<(Option<String>, Vec<NamedArray>)> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("missing FKAC1 tag".into()));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let meta = if meta_len > 0 {
        let mut buf = vec![0u8; meta_len];
        r.read_exact(&mut buf)?;
        Some(String::from_utf8(buf).map_err(|_| {
            Error::Checkpoint("metadata is not valid UTF-8".into())
        })?)
    } else {
        None
    };
    let count = read_u32(&mut r)? as usize;
    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("array name is not valid UTF-8".into()))?;
        let mut tag_rank = [0u8; 2];
        r.read_exact(&mut tag_rank)?;
        let dtype = Dtype::from_tag(tag_rank[0])?;
        let rank = tag_rank[1] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            dims.push(u64::from_le_bytes(b) as usize);
        }
        headers.push((name, dtype, dims));
    }
    let mut arrays = Vec::with_capacity(count);
    for (name, dtype, dims) in headers {
        let numel: usize = dims.iter().product();
        let data = match dtype {
            Dtype::F32 => {
                let mut v = Vec::with_capacity(numel);
                let mut b = [0u8; 4];
                for _ in 0..numel {
                    r.read_exact(&mut b)?;
                    v.push(f32::from_le_bytes(b));
                }
                ArrayData::F32(v)
            }
            Dtype::F64 => {
                let mut v = Vec::with_capacity(numel);
                let mut b = [0u8; 8];
                for _ in 0..numel {
                    r.read_exact(&mut b)?;
                    v.push(f64::from_le_bytes(b));
                }
                ArrayData::F64(v)
            }
        };
        arrays.push(NamedArray { name, dims, data });
    }
    Ok((meta, arrays))
}

pub fn save_to_path(
    path: impl AsRef<Path>,
    meta: Option<&str>,
    arrays: &[NamedArray],
) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, meta, arrays)?;
    w.flush()?;
    Ok(())
}

pub fn load_from_path(path: impl AsRef<Path>) -> Result<(Option<String>, Vec<NamedArray>)> {
    let file = File::open(path)?;
    read_checkpoint(BufReader::new(file))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}
