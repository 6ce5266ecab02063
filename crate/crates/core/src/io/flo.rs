//! Dense-flow interchange files (Middlebury convention, "PIEH" magic).

use super::DenseFlow;
use crate::error::{CoreError, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const FLO_MAGIC: &[u8; 4] = b"PIEH";

pub fn write_flo(path: &Path, map: &DenseFlow) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FLO_MAGIC)?;
    w.write_all(&(map.width as i32).to_le_bytes())?;
    w.write_all(&(map.height as i32).to_le_bytes())?;
    for v in &map.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_flo(path: &Path) -> Result<DenseFlow> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| CoreError::Truncated { what: "flo" })?;
    if &magic != FLO_MAGIC {
        return Err(CoreError::BadMagic {
            what: "flo",
            expected: "PIEH",
        });
    }
    let width = read_i32(&mut r, "flo")? as usize;
    let height = read_i32(&mut r, "flo")? as usize;
    let count = width * height * 2;
    let mut data = vec![0f32; count];
    let mut buf = [0u8; 4];
    for v in data.iter_mut() {
        r.read_exact(&mut buf)
            .map_err(|_| CoreError::Truncated { what: "flo" })?;
        *v = f32::from_le_bytes(buf);
        if !v.is_finite() {
            return Err(CoreError::NonFiniteValue { what: "flo" });
        }
    }
    if r.read(&mut buf)? != 0 {
        return Err(CoreError::Truncated { what: "flo" });
    }
    DenseFlow::new(width, height, data)
}

pub(crate) fn read_i32(r: &mut impl Read, what: &'static str) -> Result<i32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| CoreError::Truncated { what })?;
    Ok(i32::from_le_bytes(buf))
}
