//! Raw float32 tensor files ("RTEN"): frames are stored without an image
//! codec so fixtures stay bit-exact.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const RTEN_MAGIC: &[u8; 4] = b"RTEN";

pub fn write_rten(path: &Path, tensor: &Tensor<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(RTEN_MAGIC)?;
    w.write_all(&(tensor.shape().len() as i32).to_le_bytes())?;
    for &d in tensor.shape() {
        w.write_all(&(d as i32).to_le_bytes())?;
    }
    for v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rten(path: &Path) -> Result<Tensor<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| CoreError::Truncated { what: "rten" })?;
    if &magic != RTEN_MAGIC {
        return Err(CoreError::BadMagic {
            what: "rten",
            expected: "RTEN",
        });
    }
    let ndim = super::flo::read_i32(&mut r, "rten")? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(super::flo::read_i32(&mut r, "rten")? as usize);
    }
    let count: usize = shape.iter().product();
    let mut data = vec![0f32; count];
    let mut buf = [0u8; 4];
    for v in data.iter_mut() {
        r.read_exact(&mut buf)
            .map_err(|_| CoreError::Truncated { what: "rten" })?;
        *v = f32::from_le_bytes(buf);
    }
    if r.read(&mut buf)? != 0 {
        return Err(CoreError::Truncated { what: "rten" });
    }
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.rten");
        let mut rng = SplitMix64::new(2);
        let t = Tensor::from_vec(
            vec![3, 4, 5],
            (0..60).map(|_| rng.uniform(-1.0, 1.0) as f32).collect(),
        )
        .unwrap();
        write_rten(&path, &t).unwrap();
        let back = read_rten(&path).unwrap();
        assert_eq!(t.shape(), back.shape());
        assert_eq!(t.data(), back.data());
    }

    #[test]
    fn bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.rten");
        write_rten(&path, &Tensor::zeros(&[2, 2])).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(
            read_rten(&path),
            Err(CoreError::Truncated { what: "rten" })
        ));
    }
}
