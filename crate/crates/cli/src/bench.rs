//! Inference throughput harness.
//!
//! Measures end-to-end videos/second and frames/second for the dense-flow
//! ingestion path and the block-MV ingestion+upsample path, with warmup
//! excluded and a per-stage time breakdown (file I/O, input assembly, each
//! network stage, score fusion). Absolute numbers are hardware-bound; the
//! harness reports its own run-to-run variation instead.

use anyhow::{bail, Context, Result};
use std::path::Path;
use std::time::Instant;
use tempora_core::fusion::fuse_pyramid;
use tempora_core::io::{mv_to_dense, read_flo, read_mvq, ClipMeta, DenseFlow};
use tempora_core::io::rten::read_rten;
use tempora_core::params::{Fwd, ParamBinding};
use tempora_core::pipeline::{
    argmax, consensus, sample_segments, softmax_f64, Model, SampleMode, MOTION_SCALE,
};
use tempora_core::rng::SplitMix64;
use tempora_core::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchPath {
    Flow,
    Mv,
}

impl BenchPath {
    pub fn label(&self) -> &'static str {
        match self {
            BenchPath::Flow => "flow",
            BenchPath::Mv => "mv",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct StageNanos {
    pub io: u128,
    pub assemble: u128,
    pub spatial: u128,
    pub temporal: u128,
    pub fusion: u128,
    pub ttn: u128,
    pub consensus: u128,
}

#[derive(Debug, Clone)]
pub struct RunStats {
    pub videos_per_sec: f64,
    pub frames_per_sec: f64,
    pub iter_ms_mean: f64,
    pub iter_ms_min: f64,
    pub iter_ms_max: f64,
}

#[derive(Debug, Clone)]
pub struct PathBench {
    pub path: BenchPath,
    pub runs: Vec<RunStats>,
    pub stage: StageNanos,
    pub motion_bytes: u64,
    pub iters: usize,
}

impl PathBench {
    pub fn mean_vps(&self) -> f64 {
        self.runs.iter().map(|r| r.videos_per_sec).sum::<f64>() / self.runs.len().max(1) as f64
    }

    /// Coefficient of variation of videos/sec across runs.
    pub fn cov(&self) -> f64 {
        let mean = self.mean_vps();
        if self.runs.len() < 2 || mean == 0.0 {
            return 0.0;
        }
        let var = self
            .runs
            .iter()
            .map(|r| (r.videos_per_sec - mean).powi(2))
            .sum::<f64>()
            / self.runs.len() as f64;
        var.sqrt() / mean
    }
}

struct LoadedInputs {
    frames: Vec<Tensor<f32>>,
    maps: Vec<Vec<DenseFlow>>, // per snippet, `stack` maps
    motion_bytes: u64,
}

fn load_inputs(
    root: &Path,
    meta: &ClipMeta,
    chosen: &[usize],
    stack: usize,
    path: BenchPath,
) -> Result<LoadedInputs> {
    let dir = root.join(&meta.rel_path);
    let mut frames = Vec::with_capacity(chosen.len());
    let mut maps = Vec::with_capacity(chosen.len());
    let mut motion_bytes = 0u64;
    for &idx in chosen {
        frames.push(read_rten(&dir.join(format!("frame_{idx:03}.rten")))?);
        let mut snippet_maps = Vec::with_capacity(stack);
        for f in 0..stack {
            let t = (idx + f).min(meta.num_frames - 1);
            let map = match path {
                BenchPath::Flow => {
                    let p = dir.join(format!("flow_{t:03}.flo"));
                    motion_bytes += std::fs::metadata(&p)?.len();
                    read_flo(&p)?
                }
                BenchPath::Mv => {
                    let p = dir.join(format!("flow_{t:03}.mvq"));
                    if !p.exists() {
                        bail!(
                            "missing {} -- run `tempora convert-flow --input <dataset> --to mvq` first",
                            p.display()
                        );
                    }
                    motion_bytes += std::fs::metadata(&p)?.len();
                    mv_to_dense(&read_mvq(&p)?)
                }
            };
            snippet_maps.push(map);
        }
        maps.push(snippet_maps);
    }
    Ok(LoadedInputs {
        frames,
        maps,
        motion_bytes,
    })
}

fn assemble(inputs: &LoadedInputs, stack: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let k = inputs.frames.len();
    let h = inputs.frames[0].shape()[1];
    let w = inputs.frames[0].shape()[2];
    let hw = h * w;
    let mut rgb = Vec::with_capacity(k * 3 * hw);
    let mut mot = Vec::with_capacity(k * 2 * stack * hw);
    for s in 0..k {
        rgb.extend(inputs.frames[s].data().iter().map(|&v| v * 2.0 - 1.0));
        for f in 0..stack {
            let m = &inputs.maps[s][f];
            for plane in 0..2 {
                for y in 0..h {
                    for x in 0..w {
                        let (dx, dy) = m.at(x, y);
                        mot.push((if plane == 0 { dx } else { dy }) / MOTION_SCALE);
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(vec![k, 3, h, w], rgb)?,
        Tensor::from_vec(vec![k, 2 * stack, h, w], mot)?,
    ))
}

/// One staged forward; returns the predicted class so the harness has a
/// side effect the optimizer cannot remove.
fn staged_forward(
    model: &mut Model<f32>,
    rgb: Tensor<f32>,
    motion: Tensor<f32>,
    stage: &mut StageNanos,
) -> Result<usize> {
    let k = model.config.k;
    let mut g = Graph::inference();
    let mut binding = ParamBinding::new();
    let rgb_v = g.constant(rgb);
    let mot_v = g.constant(motion);
    let config = model.config.clone();

    let t = Instant::now();
    let mut fx = Fwd::new(&mut g, &mut model.store, &mut binding);
    let (pyr_s, logits_s) = model.spatial.forward_pyramid(&mut fx, rgb_v, false)?;
    stage.spatial += t.elapsed().as_nanos();

    let t = Instant::now();
    let mut fx = Fwd::new(&mut g, &mut model.store, &mut binding);
    let (pyr_t, logits_t) = model.temporal.forward_pyramid(&mut fx, mot_v, false)?;
    stage.temporal += t.elapsed().as_nanos();

    let t = Instant::now();
    let mut fx = Fwd::new(&mut g, &mut model.store, &mut binding);
    let fused = fuse_pyramid(
        &mut fx,
        &pyr_s,
        &pyr_t,
        config.fusion_mode,
        model.fusion.as_ref(),
        &config.fused_stages,
    )?;
    let idx_i: Vec<usize> = (0..k - 1).collect();
    let idx_j: Vec<usize> = (1..k).collect();
    let mut f_i = std::collections::BTreeMap::new();
    let mut f_j = std::collections::BTreeMap::new();
    for (&l, &v) in &fused {
        f_i.insert(l, g.select_rows(v, &idx_i)?);
        f_j.insert(l, g.select_rows(v, &idx_j)?);
    }
    stage.fusion += t.elapsed().as_nanos();

    let t = Instant::now();
    let mut fx = Fwd::new(&mut g, &mut model.store, &mut binding);
    let logits_r = model.ttn.forward(&mut fx, &f_i, &f_j, false)?;
    stage.ttn += t.elapsed().as_nanos();

    let t = Instant::now();
    let rows = |v| -> Vec<Vec<f64>> {
        let t = g.value(v);
        let (n, c) = t.dims2().expect("logits");
        (0..n)
            .map(|r| t.data()[r * c..(r + 1) * c].iter().map(|&x| x as f64).collect())
            .collect()
    };
    let cs = consensus(&rows(logits_s))?;
    let ct = consensus(&rows(logits_t))?;
    let cr = consensus(&rows(logits_r))?;
    let w = config.score_weights;
    let combined: Vec<f64> = cs
        .iter()
        .zip(&ct)
        .zip(&cr)
        .map(|((s, tv), r)| w.0 * s + w.1 * tv + w.2 * r)
        .collect();
    let dist = softmax_f64(&combined);
    stage.consensus += t.elapsed().as_nanos();
    Ok(argmax(&dist))
}

/// Benchmark one ingestion path: `warmup` untimed videos, then `runs` timed
/// passes of `iters` videos each, cycling through the clip list.
#[allow(clippy::too_many_arguments)]
pub fn bench_path(
    model: &mut Model<f32>,
    root: &Path,
    clips: &[ClipMeta],
    path: BenchPath,
    warmup: usize,
    iters: usize,
    runs: usize,
) -> Result<PathBench> {
    if clips.is_empty() {
        bail!("no clips to benchmark");
    }
    if iters == 0 || runs == 0 {
        bail!("iters and runs must be >= 1");
    }
    let k = model.config.k;
    let stack = model.config.stack;
    let mut stage = StageNanos::default();
    let mut motion_bytes = 0u64;
    let mut sink = 0usize;

    let mut one = |clip_no: usize, stage: &mut StageNanos, bytes: &mut u64| -> Result<f64> {
        let meta = &clips[clip_no % clips.len()];
        let mut rng = SplitMix64::new(0);
        let sel = sample_segments(meta.num_frames, k, SampleMode::Eval, &mut rng, stack)?;
        let start = Instant::now();
        let t = Instant::now();
        let inputs = load_inputs(root, meta, &sel.chosen, stack, path)
            .with_context(|| format!("loading {}", meta.rel_path))?;
        stage.io += t.elapsed().as_nanos();
        *bytes += inputs.motion_bytes;
        let t = Instant::now();
        let (rgb, motion) = assemble(&inputs, stack)?;
        stage.assemble += t.elapsed().as_nanos();
        sink += staged_forward(model, rgb, motion, stage)?;
        Ok(start.elapsed().as_secs_f64())
    };

    let mut warm_stage = StageNanos::default();
    let mut warm_bytes = 0u64;
    for i in 0..warmup {
        one(i, &mut warm_stage, &mut warm_bytes)?;
    }

    let mut run_stats = Vec::with_capacity(runs);
    let mut clip_no = warmup;
    for _ in 0..runs {
        let mut times = Vec::with_capacity(iters);
        for _ in 0..iters {
            times.push(one(clip_no, &mut stage, &mut motion_bytes)?);
            clip_no += 1;
        }
        let total: f64 = times.iter().sum();
        let mean = total / iters as f64;
        run_stats.push(RunStats {
            videos_per_sec: iters as f64 / total,
            frames_per_sec: (iters * k) as f64 / total,
            iter_ms_mean: mean * 1e3,
            iter_ms_min: times.iter().cloned().fold(f64::INFINITY, f64::min) * 1e3,
            iter_ms_max: times.iter().cloned().fold(0.0, f64::max) * 1e3,
        });
    }
    std::hint::black_box(sink);
    Ok(PathBench {
        path,
        runs: run_stats,
        stage,
        motion_bytes,
        iters,
    })
}
