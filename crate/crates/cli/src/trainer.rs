//! Progressive three-phase trainer.
//!
//! Phase 1 trains the spatial stream from scratch, seeds the temporal stream
//! by cross-modality transfer and trains it; phase 2 freezes both streams
//! (weights and batch-norm state) and trains the transformation network plus
//! any fusion scalars on aggregated pair logits; phase 3 unfreezes everything
//! and finetunes on the fused prediction at a reduced learning rate.
//!
//! Everything is seeded: clip order, snippet sampling, augmentation and
//! dropout streams derive from the run seed, so a repeated run reproduces
//! the loss trace bit for bit.

use crate::config::TrainConfig;
use anyhow::{anyhow, bail, Context, Result};
use std::path::{Path, PathBuf};
use tempora_core::backbone::init_cross_modality;
use tempora_core::io::checkpoint::{save_checkpoint, Checkpoint};
use tempora_core::io::{load_clip, read_index, MotionKind};
use tempora_core::params::ParamBinding;
use tempora_core::pipeline::{
    argmax, sample_segments, ForwardOpts, ForwardScores, Model, SampleMode, SnippetSelection,
    VideoSample, MOTION_SCALE,
};
use tempora_core::rng::{mix, SplitMix64};
use tempora_core::tensor::{Graph, SgdMomentum, Tensor, Var};

pub struct LoadedDataset {
    pub root: PathBuf,
    pub train: Vec<VideoSample>,
    pub eval: Vec<VideoSample>,
    pub num_classes: usize,
}

pub fn load_dataset(root: &Path, motion: MotionKind) -> Result<LoadedDataset> {
    let load_split = |name: &str| -> Result<Vec<VideoSample>> {
        let metas = read_index(&root.join(name))
            .with_context(|| format!("reading {}/{name}", root.display()))?;
        metas
            .iter()
            .map(|m| load_clip(root, m, motion).map_err(|e| anyhow!("{}: {e}", m.rel_path)))
            .collect()
    };
    let train = load_split("train.idx")?;
    let eval = load_split("eval.idx")?;
    let num_classes = train
        .iter()
        .chain(&eval)
        .map(|v| v.label + 1)
        .max()
        .unwrap_or(0);
    if num_classes < 2 {
        bail!("dataset must contain at least two classes");
    }
    Ok(LoadedDataset {
        root: root.to_path_buf(),
        train,
        eval,
        num_classes,
    })
}

/// Per-clip augmentation: optional horizontal flip (motion dx negated) plus
/// integer crop jitter with edge clamping, identical across the clip.
#[derive(Debug, Clone, Copy)]
pub struct Aug {
    pub flip: bool,
    pub ox: i32,
    pub oy: i32,
}

impl Aug {
    pub fn none() -> Self {
        Self {
            flip: false,
            ox: 0,
            oy: 0,
        }
    }

    pub fn sample(cfg: &TrainConfig, rng: &mut SplitMix64) -> Self {
        let j = cfg.crop_jitter as i64;
        Self {
            flip: cfg.hflip && rng.chance(0.5),
            ox: if j > 0 { (rng.below(2 * j as usize + 1) as i64 - j) as i32 } else { 0 },
            oy: if j > 0 { (rng.below(2 * j as usize + 1) as i64 - j) as i32 } else { 0 },
        }
    }
}

/// Assemble the normalized [B*K, 3, H, W] and [B*K, 2F, H, W] input batch
/// with augmentation applied during the copy.
pub fn assemble_batch(
    videos: &[&VideoSample],
    sels: &[SnippetSelection],
    augs: &[Aug],
    stack: usize,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let k = sels[0].chosen.len();
    let (h, w) = (videos[0].height(), videos[0].width());
    let hw = h * w;
    let b = videos.len();
    let mut rgb = vec![0f32; b * k * 3 * hw];
    let mut mot = vec![0f32; b * k * 2 * stack * hw];
    let clampi = |v: i32, hi: usize| v.clamp(0, hi as i32 - 1) as usize;
    for (vi, ((video, sel), aug)) in videos.iter().zip(sels).zip(augs).enumerate() {
        for (s, &idx) in sel.chosen.iter().enumerate() {
            let row = vi * k + s;
            let frame = video.frames[idx].data();
            for y in 0..h {
                for x in 0..w {
                    let mut sx = clampi(x as i32 - aug.ox, w);
                    let sy = clampi(y as i32 - aug.oy, h);
                    if aug.flip {
                        sx = w - 1 - sx;
                    }
                    for c in 0..3 {
                        rgb[((row * 3 + c) * h + y) * w + x] =
                            frame[(c * h + sy) * w + sx] * 2.0 - 1.0;
                    }
                }
            }
            for f in 0..stack {
                let m = &video.motion[(idx + f).min(video.num_frames() - 1)];
                for y in 0..h {
                    for x in 0..w {
                        let mut sx = clampi(x as i32 - aug.ox, w);
                        let sy = clampi(y as i32 - aug.oy, h);
                        if aug.flip {
                            sx = w - 1 - sx;
                        }
                        let (dx, dy) = m.at(sx, sy);
                        let dx = if aug.flip { -dx } else { dx };
                        mot[((row * 2 * stack + 2 * f) * h + y) * w + x] = dx / MOTION_SCALE;
                        mot[((row * 2 * stack + 2 * f + 1) * h + y) * w + x] = dy / MOTION_SCALE;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(vec![b * k, 3, h, w], rgb)?,
        Tensor::from_vec(vec![b * k, 2 * stack, h, w], mot)?,
    ))
}

/// What a phase optimizes and which modules run in training mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseKind {
    SpatialOnly,
    TemporalOnly,
    Ttn,
    Joint,
}

impl PhaseKind {
    fn opts(&self) -> ForwardOpts {
        match self {
            PhaseKind::SpatialOnly => ForwardOpts {
                train_streams: true,
                train_ttn: false,
                with_spatial: true,
                with_temporal: false,
                with_ttn: false,
            },
            PhaseKind::TemporalOnly => ForwardOpts {
                train_streams: true,
                train_ttn: false,
                with_spatial: false,
                with_temporal: true,
                with_ttn: false,
            },
            PhaseKind::Ttn => ForwardOpts {
                train_streams: false,
                train_ttn: true,
                with_spatial: true,
                with_temporal: true,
                with_ttn: true,
            },
            PhaseKind::Joint => ForwardOpts {
                train_streams: true,
                train_ttn: true,
                with_spatial: true,
                with_temporal: true,
                with_ttn: true,
            },
        }
    }

    fn tag(&self) -> u64 {
        match self {
            PhaseKind::SpatialOnly => 1,
            PhaseKind::TemporalOnly => 2,
            PhaseKind::Ttn => 3,
            PhaseKind::Joint => 4,
        }
    }
}

/// Phase-relevant consensus logits that the loss runs on.
fn phase_logits(
    model: &Model<f32>,
    g: &mut Graph<f32>,
    scores: &ForwardScores,
    kind: PhaseKind,
    weights: (f64, f64, f64),
) -> Result<Var> {
    Ok(match kind {
        PhaseKind::SpatialOnly => scores
            .cons_spatial
            .ok_or_else(|| anyhow!("spatial branch missing"))?,
        PhaseKind::TemporalOnly => scores
            .cons_temporal
            .ok_or_else(|| anyhow!("temporal branch missing"))?,
        PhaseKind::Ttn => scores.cons_ttn.ok_or_else(|| anyhow!("ttn branch missing"))?,
        PhaseKind::Joint => model.combined_logits(g, scores, weights)?,
    })
}

#[derive(Debug, Clone, Default)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default)]
pub struct PhaseTrace {
    pub epochs: Vec<EpochStats>,
}

/// One epoch over the train split. Returns mean loss and train accuracy of
/// the phase-relevant branch.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut Model<f32>,
    data: &LoadedDataset,
    cfg: &TrainConfig,
    kind: PhaseKind,
    epoch: usize,
    opt: &mut SgdMomentum<f32>,
) -> Result<EpochStats> {
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut shuffle_rng =
        SplitMix64::derive(cfg.seed, mix(kind.tag(), 0x5u64 << 32 | epoch as u64));
    shuffle_rng.shuffle(&mut order);

    let mut loss_sum = 0f64;
    let mut correct = 0usize;
    let mut steps = 0usize;
    for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let videos: Vec<&VideoSample> = chunk.iter().map(|&i| &data.train[i]).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| data.train[i].label).collect();
        let mut sels = Vec::with_capacity(chunk.len());
        let mut augs = Vec::with_capacity(chunk.len());
        for &ci in chunk {
            let mut rng = SplitMix64::derive(
                cfg.seed,
                mix(kind.tag() << 8, ((epoch as u64) << 32) | ci as u64),
            );
            sels.push(sample_segments(
                data.train[ci].num_frames(),
                cfg.k,
                SampleMode::Train,
                &mut rng,
                cfg.stack,
            )?);
            augs.push(Aug::sample(cfg, &mut rng));
        }
        let (rgb, motion) = assemble_batch(&videos, &sels, &augs, cfg.stack)?;
        let dropout_seed = mix(cfg.seed, (kind.tag() << 40) | ((epoch as u64) << 20) | batch_no as u64);
        let mut g = Graph::new(dropout_seed);
        let mut binding = ParamBinding::new();
        let scores = model.forward_batch(&mut g, &mut binding, rgb, motion, chunk.len(), kind.opts())?;
        let logits = phase_logits(model, &mut g, &scores, kind, cfg.score_weights)?;
        let loss = g.softmax_cross_entropy(logits, &labels)?;
        let loss_val = loss_item(&g, loss);
        if !loss_val.is_finite() {
            bail!("training diverged: non-finite loss at epoch {epoch}, batch {batch_no}");
        }
        g.backward(loss)?;
        binding.harvest(&g, &mut model.store);
        opt.step(&mut model.store)?;

        loss_sum += loss_val;
        steps += 1;
        let t = g.value(logits);
        let (n, c) = t.dims2().expect("logits 2-d");
        for (row, &label) in labels.iter().enumerate().take(n) {
            let row_logits: Vec<f64> = t.data()[row * c..(row + 1) * c]
                .iter()
                .map(|&v| v as f64)
                .collect();
            if argmax(&row_logits) == label {
                correct += 1;
            }
        }
    }
    Ok(EpochStats {
        loss: loss_sum / steps.max(1) as f64,
        accuracy: correct as f64 / data.train.len() as f64,
    })
}

fn loss_item(g: &Graph<f32>, v: Var) -> f64 {
    g.value(v).item() as f64
}

fn schedule_lr(base: f64, epoch: usize, interval: usize) -> f64 {
    if interval == 0 {
        base
    } else {
        base * 0.1f64.powi((epoch / interval) as i32)
    }
}

/// Run one training sub-phase with lr schedule and optional early stopping.
/// Progress goes to stderr so report files stay deterministic.
fn run_kind(
    model: &mut Model<f32>,
    data: &LoadedDataset,
    cfg: &TrainConfig,
    kind: PhaseKind,
    max_epochs: usize,
    decay: usize,
    base_lr: f64,
) -> Result<PhaseTrace> {
    let mut opt = SgdMomentum::new(base_lr, cfg.momentum, cfg.weight_decay);
    let mut trace = PhaseTrace::default();
    let mut hits = 0usize;
    for epoch in 0..max_epochs {
        opt.lr = schedule_lr(base_lr, epoch, decay);
        let started = std::time::Instant::now();
        let stats = train_epoch(model, data, cfg, kind, epoch, &mut opt)?;
        eprintln!(
            "[{kind:?}] epoch {epoch:3}  loss {:.6}  acc {:.4}  lr {:.5}  ({:.1}s)",
            stats.loss,
            stats.accuracy,
            opt.lr,
            started.elapsed().as_secs_f64()
        );
        trace.epochs.push(stats.clone());
        if let Some(target) = cfg.early_stop_acc {
            hits = if stats.accuracy >= target { hits + 1 } else { 0 };
            if hits >= 2 {
                break;
            }
        }
    }
    Ok(trace)
}

fn freeze_for(model: &mut Model<f32>, cfg: &TrainConfig, kind: PhaseKind) {
    let store = &mut model.store;
    store.set_all_frozen(true);
    match kind {
        PhaseKind::SpatialOnly => store.set_frozen_prefix("spatial.", false),
        PhaseKind::TemporalOnly => store.set_frozen_prefix("temporal.", false),
        PhaseKind::Ttn => {
            store.set_frozen_prefix("ttn.", false);
            store.set_frozen_prefix("fusion.", false);
        }
        PhaseKind::Joint => store.set_all_frozen(false),
    }
    if cfg.alpha_frozen {
        store.set_frozen_prefix("fusion.", true);
    }
}

pub struct PhaseOutcome {
    pub traces: Vec<(String, PhaseTrace)>,
    pub checkpoint_path: PathBuf,
}

/// Phase 1: spatial stream from scratch, then temporal stream initialized by
/// cross-modality transfer from the trained spatial weights. Also writes a
/// spatial-only intermediate checkpoint.
pub fn phase1_train_two_stream(
    cfg: &TrainConfig,
    data: &LoadedDataset,
    out_dir: &Path,
) -> Result<(Model<f32>, PhaseOutcome)> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut model = Model::build(cfg.model_config(data.num_classes), cfg.seed)?;
    let echo = cfg.echo(data.num_classes);

    freeze_for(&mut model, cfg, PhaseKind::SpatialOnly);
    let spatial_trace = run_kind(
        &mut model,
        data,
        cfg,
        PhaseKind::SpatialOnly,
        cfg.epochs.0,
        cfg.lr_decay.0,
        cfg.lr,
    )?;
    let spatial_ckpt = Checkpoint::from_store(
        &model.store,
        "phase1-spatial",
        &model.config.fusion_mode.to_string(),
        &echo,
        Some("spatial."),
    );
    save_checkpoint(&out_dir.join("phase1-spatial.ckpt"), &spatial_ckpt)?;

    init_cross_modality(&mut model.store, &model.spatial, &model.temporal)?;
    freeze_for(&mut model, cfg, PhaseKind::TemporalOnly);
    let temporal_trace = run_kind(
        &mut model,
        data,
        cfg,
        PhaseKind::TemporalOnly,
        cfg.epochs.0,
        cfg.lr_decay.0,
        cfg.lr,
    )?;

    let path = out_dir.join("phase1.ckpt");
    save_checkpoint(&path, &model.to_checkpoint("phase1", &echo))?;
    Ok((
        model,
        PhaseOutcome {
            traces: vec![
                ("spatial".into(), spatial_trace),
                ("temporal".into(), temporal_trace),
            ],
            checkpoint_path: path,
        },
    ))
}

/// Phase 2: freeze the streams, seed the transformation network from the
/// trained spatial stages, train it (plus fusion scalars) on aggregated pair
/// logits.
pub fn phase2_train_ttn(
    cfg: &TrainConfig,
    data: &LoadedDataset,
    model: &mut Model<f32>,
    out_dir: &Path,
) -> Result<PhaseOutcome> {
    model.ttn.init_from_backbone(&mut model.store, &model.spatial)?;
    freeze_for(model, cfg, PhaseKind::Ttn);
    let trace = run_kind(
        model,
        data,
        cfg,
        PhaseKind::Ttn,
        cfg.epochs.1,
        cfg.lr_decay.1,
        cfg.lr,
    )?;
    let path = out_dir.join("phase2.ckpt");
    let echo = cfg.echo(data.num_classes);
    save_checkpoint(&path, &model.to_checkpoint("phase2", &echo))?;
    Ok(PhaseOutcome {
        traces: vec![("ttn".into(), trace)],
        checkpoint_path: path,
    })
}

/// Phase 3: everything unfrozen, joint loss on the fused prediction, reduced
/// learning rate.
pub fn phase3_joint_finetune(
    cfg: &TrainConfig,
    data: &LoadedDataset,
    model: &mut Model<f32>,
    out_dir: &Path,
) -> Result<PhaseOutcome> {
    freeze_for(model, cfg, PhaseKind::Joint);
    let trace = run_kind(
        model,
        data,
        cfg,
        PhaseKind::Joint,
        cfg.epochs.2,
        cfg.lr_decay.2,
        cfg.lr * cfg.joint_lr_scale,
    )?;
    let path = out_dir.join("phase3.ckpt");
    let echo = cfg.echo(data.num_classes);
    save_checkpoint(&path, &model.to_checkpoint("phase3", &echo))?;
    Ok(PhaseOutcome {
        traces: vec![("joint".into(), trace)],
        checkpoint_path: path,
    })
}

/// Rebuild a model from a checkpoint (config echo + tensors).
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(Model<f32>, TrainConfig)> {
    let (cfg, classes) = TrainConfig::from_echo(&ckpt.config_echo)?;
    let mut model = Model::build(cfg.model_config(classes), cfg.seed)?;
    model.load_checkpoint_data(ckpt)?;
    Ok((model, cfg))
}
