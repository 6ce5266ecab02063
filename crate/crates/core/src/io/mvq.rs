//! Quantized block motion vectors ("MVQ1") and the flow <-> block-MV
//! conversions that emulate what a compressed-video decoder hands out.

use super::{BlockMotion, DenseFlow};
use crate::error::{CoreError, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MVQ_MAGIC: &[u8; 4] = b"MVQ1";

fn validate_block_params(block_size: usize, quant_step: f32) -> Result<()> {
    if !matches!(block_size, 4 | 8 | 16) {
        return Err(CoreError::BadBlockSize(block_size));
    }
    if !(quant_step > 0.0) || !quant_step.is_finite() {
        return Err(CoreError::BadQuantStep(quant_step));
    }
    Ok(())
}

pub fn write_mvq(path: &Path, map: &BlockMotion) -> Result<()> {
    validate_block_params(map.block_size, map.quant_step)?;
    for &v in &map.data {
        if v > i16::MAX as i32 || v < i16::MIN as i32 {
            return Err(CoreError::MvOverflow { value: v });
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MVQ_MAGIC)?;
    w.write_all(&(map.width as i32).to_le_bytes())?;
    w.write_all(&(map.height as i32).to_le_bytes())?;
    w.write_all(&(map.block_size as i32).to_le_bytes())?;
    w.write_all(&map.quant_step.to_le_bytes())?;
    for &v in &map.data {
        w.write_all(&(v as i16).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_mvq(path: &Path) -> Result<BlockMotion> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| CoreError::Truncated { what: "mvq" })?;
    if &magic != MVQ_MAGIC {
        return Err(CoreError::BadMagic {
            what: "mvq",
            expected: "MVQ1",
        });
    }
    let width = super::flo::read_i32(&mut r, "mvq")? as usize;
    let height = super::flo::read_i32(&mut r, "mvq")? as usize;
    let block_size = super::flo::read_i32(&mut r, "mvq")? as usize;
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)
        .map_err(|_| CoreError::Truncated { what: "mvq" })?;
    let quant_step = f32::from_le_bytes(buf4);
    validate_block_params(block_size, quant_step)?;
    let blocks = width.div_ceil(block_size) * height.div_ceil(block_size);
    let mut data = vec![0i32; blocks * 2];
    let mut buf2 = [0u8; 2];
    for v in data.iter_mut() {
        r.read_exact(&mut buf2)
            .map_err(|_| CoreError::Truncated { what: "mvq" })?;
        *v = i16::from_le_bytes(buf2) as i32;
    }
    if r.read(&mut buf4)? != 0 {
        return Err(CoreError::Truncated { what: "mvq" });
    }
    Ok(BlockMotion {
        width,
        height,
        block_size,
        quant_step,
        data,
    })
}

/// Coarsen dense flow into block motion vectors: per block, the mean
/// displacement over the block's pixels, rounded to the nearest multiple of
/// `quant_step` and stored in integer quantization units. Deterministic.
pub fn degrade_flow_to_mv(dense: &DenseFlow, block_size: usize, quant_step: f32) -> BlockMotion {
    let bx = dense.width.div_ceil(block_size);
    let by = dense.height.div_ceil(block_size);
    let mut data = vec![0i32; bx * by * 2];
    for byi in 0..by {
        for bxi in 0..bx {
            let y0 = byi * block_size;
            let x0 = bxi * block_size;
            let y1 = (y0 + block_size).min(dense.height);
            let x1 = (x0 + block_size).min(dense.width);
            let mut sum_dx = 0f32;
            let mut sum_dy = 0f32;
            for y in y0..y1 {
                for x in x0..x1 {
                    let (dx, dy) = dense.at(x, y);
                    sum_dx += dx;
                    sum_dy += dy;
                }
            }
            let count = ((y1 - y0) * (x1 - x0)) as f32;
            let i = (byi * bx + bxi) * 2;
            data[i] = (sum_dx / count / quant_step).round() as i32;
            data[i + 1] = (sum_dy / count / quant_step).round() as i32;
        }
    }
    BlockMotion {
        width: dense.width,
        height: dense.height,
        block_size,
        quant_step,
        data,
    }
}

/// Nearest-neighbor upsample: every pixel takes its block's displacement in
/// pixels.
pub fn mv_to_dense(block: &BlockMotion) -> DenseFlow {
    let bx = block.blocks_x();
    let mut out = DenseFlow::zeros(block.width, block.height);
    for y in 0..block.height {
        for x in 0..block.width {
            let bi = ((y / block.block_size) * bx + x / block.block_size) * 2;
            let dx = block.data[bi] as f32 * block.quant_step;
            let dy = block.data[bi + 1] as f32 * block.quant_step;
            out.set(x, y, dx, dy);
        }
    }
    out
}
