//! Binary tensor dump format `.btf`.
//!
//! Layout: magic `"BTF1"`, `u32` rank, `rank` little-endian `u32` extents,
//! then the row-major payload as little-endian `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"BTF1";
const MAX_RANK: u32 = 8;
const MAX_ELEMS: u64 = 1 << 30;

pub fn write_btf<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_btf<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"BTF1\"")));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let rank = u32::from_le_bytes(buf4);
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Format(format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut elems: u64 = 1;
    for _ in 0..rank {
        r.read_exact(&mut buf4)?;
        let e = u32::from_le_bytes(buf4);
        if e == 0 {
            return Err(Error::Format("zero extent".into()));
        }
        elems = elems.saturating_mul(e as u64);
        shape.push(e as usize);
    }
    if elems > MAX_ELEMS {
        return Err(Error::Format(format!("tensor too large: {elems} elements")));
    }
    let mut data = Vec::with_capacity(elems as usize);
    for _ in 0..elems {
        r.read_exact(&mut buf4)?;
        data.push(f32::from_le_bytes(buf4));
    }
    let t = Tensor::new(shape, data)?;
    t.validate_finite("btf payload")?;
    Ok(t)
}

pub fn write_btf_file<P: AsRef<Path>>(path: P, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_btf(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_btf_file<P: AsRef<Path>>(path: P) -> Result<Tensor> {
    read_btf(BufReader::new(File::open(path)?))
}
