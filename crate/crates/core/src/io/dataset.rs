//! Dataset index files and clip loading.
//!
//! The index is line-oriented text: `relative_path<TAB>label<TAB>num_frames`.
//! Each clip directory holds `frame_###.rten` tensors and `flow_###.flo`
//! motion maps (optionally `flow_###.mvq` companions for the block-MV path).

use super::{flo, mvq, rten};
use crate::error::{CoreError, Result};
use crate::io::DenseFlow;
use crate::pipeline::VideoSample;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipMeta {
    pub rel_path: String,
    pub label: usize,
    pub num_frames: usize,
}

/// How the temporal stream ingests motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MotionKind {
    /// Dense flow from `.flo` files.
    Flow,
    /// Quantized block motion vectors, upsampled to dense. Reads an `.mvq`
    /// companion when present, otherwise degrades the dense flow in memory
    /// (both routes produce identical values).
    Mv { block_size: usize, quant_step: f32 },
}

impl MotionKind {
    pub fn mv_default() -> Self {
        MotionKind::Mv {
            block_size: 16,
            quant_step: 0.25,
        }
    }
}

pub fn write_index(path: &Path, clips: &[ClipMeta]) -> Result<()> {
    let mut text = String::new();
    for c in clips {
        text.push_str(&format!("{}\t{}\t{}\n", c.rel_path, c.label, c.num_frames));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_index(path: &Path) -> Result<Vec<ClipMeta>> {
    let text = std::fs::read_to_string(path)?;
    let mut clips = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let bad = || CoreError::BadIndexLine {
            line: i + 1,
            text: line.to_string(),
        };
        let rel_path = parts.next().ok_or_else(bad)?.to_string();
        let label = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(bad)?;
        let num_frames = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(bad)?;
        clips.push(ClipMeta {
            rel_path,
            label,
            num_frames,
        });
    }
    Ok(clips)
}

/// Load one clip from disk as frames plus dense motion maps (block MVs are
/// upsampled on ingestion; the temporal stream always sees dense maps).
pub fn load_clip(root: &Path, meta: &ClipMeta, motion: MotionKind) -> Result<VideoSample> {
    let dir = root.join(&meta.rel_path);
    let mut frames = Vec::with_capacity(meta.num_frames);
    let mut maps: Vec<DenseFlow> = Vec::with_capacity(meta.num_frames);
    for t in 0..meta.num_frames {
        frames.push(rten::read_rten(&dir.join(format!("frame_{t:03}.rten")))?);
        let map = match motion {
            MotionKind::Flow => flo::read_flo(&dir.join(format!("flow_{t:03}.flo")))?,
            MotionKind::Mv {
                block_size,
                quant_step,
            } => {
                let mvq_path = dir.join(format!("flow_{t:03}.mvq"));
                let block = if mvq_path.exists() {
                    mvq::read_mvq(&mvq_path)?
                } else {
                    let dense = flo::read_flo(&dir.join(format!("flow_{t:03}.flo")))?;
                    mvq::degrade_flow_to_mv(&dense, block_size, quant_step)
                };
                mvq::mv_to_dense(&block)
            }
        };
        maps.push(map);
    }
    VideoSample::new(frames, maps, meta.label, meta.rel_path.clone())
}
