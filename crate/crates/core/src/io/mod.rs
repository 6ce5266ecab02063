//! Bit-exact file formats and dataset tooling.
//!
//! All formats are little-endian with 4-byte magics:
//!
//! - `.flo`  ("PIEH"): dense per-pixel flow, `i32 w, i32 h`, then h rows of
//!   w interleaved `f32 (dx, dy)` pairs.
//! - `.mvq`  ("MVQ1"): quantized block motion vectors, `i32 w, h,
//!   block_size`, `f32 quant_step`, then row-major `i16 (dx, dy)` pairs per
//!   block; displacement in pixels is `stored * quant_step`.
//! - `.rten` ("RTEN"): raw tensor, `i32 ndim`, `i32` dims, `f32` data.
//! - `.ckpt` ("IFTN"): checkpoint, see [`checkpoint`].

pub mod checkpoint;
pub mod dataset;
pub mod flo;
pub mod mvq;
pub mod rten;
pub mod synthetic;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointEntry};
pub use dataset::{load_clip, read_index, write_index, ClipMeta, MotionKind};
pub use flo::{read_flo, write_flo};
pub use mvq::{degrade_flow_to_mv, mv_to_dense, read_mvq, write_mvq};
pub use rten::{read_rten, write_rten};
pub use synthetic::{gen_synthetic, MotionScript, SyntheticConfig};

use crate::error::{CoreError, Result};

/// Dense per-pixel displacement field; `data` holds interleaved (dx, dy) in
/// pixels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFlow {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DenseFlow {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 2],
        }
    }

    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 2 {
            return Err(CoreError::InvalidShape {
                shape_len: width * height * 2,
                data_len: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = (y * self.width + x) * 2;
        (self.data[i], self.data[i + 1])
    }

    pub fn set(&mut self, x: usize, y: usize, dx: f32, dy: f32) {
        let i = (y * self.width + x) * 2;
        self.data[i] = dx;
        self.data[i + 1] = dy;
    }
}

/// Per-block displacement field in integer quantized units; `data` holds
/// interleaved (dx, dy) row-major over blocks. Values are stored on disk as
/// i16, kept wider in memory so quantization overflow is caught at write
/// time.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMotion {
    pub width: usize,
    pub height: usize,
    pub block_size: usize,
    pub quant_step: f32,
    pub data: Vec<i32>,
}

impl BlockMotion {
    pub fn blocks_x(&self) -> usize {
        self.width.div_ceil(self.block_size)
    }

    pub fn blocks_y(&self) -> usize {
        self.height.div_ceil(self.block_size)
    }
}

/// Either motion representation, as ingested by the temporal stream.
#[derive(Debug, Clone, PartialEq)]
pub enum MotionMap {
    Dense(DenseFlow),
    Block(BlockMotion),
}
