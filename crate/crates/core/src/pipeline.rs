//! End-to-end model assembly: segment sampling, the two-stream forward with
//! per-stage fusion, transformation modeling over adjacent snippet pairs,
//! segmental consensus and final score fusion.

use crate::backbone::{init_cross_modality, Backbone, BackboneConfig, Pyramid};
use crate::error::{CoreError, Result};
use crate::fusion::{fuse_pyramid, FusionMode, FusionParams};
use crate::io::checkpoint::Checkpoint;
use crate::io::DenseFlow;
use crate::params::{Fwd, ParamBinding, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::{mean_rows, Element, Graph, Tensor, Var};
use crate::ttn::Ttn;

/// Input normalization applied when snippets are assembled: frames in [0,1]
/// map to [-1,1], motion components are divided by this many pixels.
pub const MOTION_SCALE: f32 = 4.0;

#[derive(Debug, Clone)]
pub struct VideoSample {
    pub frames: Vec<Tensor<f32>>,
    pub motion: Vec<DenseFlow>,
    pub label: usize,
    pub id: String,
}

impl VideoSample {
    pub fn new(
        frames: Vec<Tensor<f32>>,
        motion: Vec<DenseFlow>,
        label: usize,
        id: String,
    ) -> Result<Self> {
        if frames.is_empty() || frames.len() != motion.len() {
            return Err(CoreError::ShapeMismatch {
                op: "video",
                left: vec![frames.len()],
                right: vec![motion.len()],
            });
        }
        let shape = frames[0].shape().to_vec();
        for f in &frames {
            if f.shape() != shape {
                return Err(CoreError::ShapeMismatch {
                    op: "video frames",
                    left: shape,
                    right: f.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            frames,
            motion,
            label,
            id,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn height(&self) -> usize {
        self.frames[0].shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames[0].shape()[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Eval,
}

/// K segment bounds plus the frame chosen to represent each segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnippetSelection {
    pub bounds: Vec<(usize, usize)>,
    pub chosen: Vec<usize>,
    pub stack: usize,
}

/// Split `[0, num_frames)` into K near-equal contiguous segments and pick a
/// representative frame per segment: uniform random in train mode, the
/// segment center in eval mode. Indices are strictly increasing.
pub fn sample_segments(
    num_frames: usize,
    k: usize,
    mode: SampleMode,
    rng: &mut SplitMix64,
    stack: usize,
) -> Result<SnippetSelection> {
    if k < 2 || num_frames < k {
        return Err(CoreError::SegmentCount {
            frames: num_frames,
            k,
        });
    }
    let mut bounds = Vec::with_capacity(k);
    let mut chosen = Vec::with_capacity(k);
    for s in 0..k {
        let lo = s * num_frames / k;
        let hi = (s + 1) * num_frames / k;
        bounds.push((lo, hi));
        let idx = match mode {
            SampleMode::Train => lo + rng.below(hi - lo),
            SampleMode::Eval => lo + (hi - lo - 1) / 2,
        };
        chosen.push(idx);
    }
    Ok(SnippetSelection {
        bounds,
        chosen,
        stack,
    })
}

/// Assemble per-snippet inputs: the RGB frame at each chosen index and
/// `stack` consecutive motion maps starting there (clamped at the end of the
/// video), channel-stacked as (dx1, dy1, ..., dxF, dyF).
pub fn snippet_inputs<E: Element>(
    video: &VideoSample,
    sel: &SnippetSelection,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let k = sel.chosen.len();
    let (h, w) = (video.height(), video.width());
    let hw = h * w;
    let mut rgb = Vec::with_capacity(k * 3 * hw);
    let mut motion = Vec::with_capacity(k * 2 * sel.stack * hw);
    for &idx in &sel.chosen {
        for &v in video.frames[idx].data() {
            rgb.push(E::from_f64((v * 2.0 - 1.0) as f64));
        }
        for f in 0..sel.stack {
            let m = &video.motion[(idx + f).min(video.num_frames() - 1)];
            for plane in 0..2 {
                for y in 0..h {
                    for x in 0..w {
                        let (dx, dy) = m.at(x, y);
                        let v = if plane == 0 { dx } else { dy };
                        motion.push(E::from_f64((v / MOTION_SCALE) as f64));
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(vec![k, 3, h, w], rgb)?,
        Tensor::from_vec(vec![k, 2 * sel.stack, h, w], motion)?,
    ))
}

/// Elementwise mean of per-segment score rows; exactly permutation-invariant.
pub fn consensus(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    mean_rows(rows)
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub k: usize,
    pub stack: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub fusion_mode: FusionMode,
    pub alpha_init: (f64, f64, f64),
    pub fused_stages: Vec<usize>,
    pub dropout_spatial: f64,
    pub dropout_temporal: f64,
    pub dropout_ttn: f64,
    pub score_weights: (f64, f64, f64),
}

impl ModelConfig {
    pub fn new(num_classes: usize) -> Self {
        let stage_channels = vec![16, 32, 64];
        let fused_stages = Self::default_fused(stage_channels.len());
        Self {
            num_classes,
            k: 7,
            stack: 2,
            stage_channels,
            blocks_per_stage: 2,
            fusion_mode: FusionMode::Attention,
            alpha_init: (1.0, 0.0, 1.0),
            fused_stages,
            dropout_spatial: 0.8,
            dropout_temporal: 0.7,
            dropout_ttn: 0.8,
            score_weights: (1.0, 1.0, 1.0),
        }
    }

    /// Top two pyramid stages.
    pub fn default_fused(num_stages: usize) -> Vec<usize> {
        assert!(num_stages >= 2, "need at least two backbone stages");
        vec![num_stages - 1, num_stages]
    }
}

/// Which branches run and which of them run in training mode (batch-norm
/// batch stats plus active dropout). Frozen phases run their frozen parts in
/// eval mode so buffers stay bit-identical; single-stream phases skip the
/// other stream entirely.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOpts {
    pub train_streams: bool,
    pub train_ttn: bool,
    pub with_spatial: bool,
    pub with_temporal: bool,
    pub with_ttn: bool,
}

impl ForwardOpts {
    pub fn eval() -> Self {
        Self {
            train_streams: false,
            train_ttn: false,
            with_spatial: true,
            with_temporal: true,
            with_ttn: true,
        }
    }
}

/// Graph handles produced by one batched forward pass; branches that were
/// switched off are `None`.
pub struct ForwardScores {
    pub spatial_logits: Option<Var>,
    pub temporal_logits: Option<Var>,
    pub ttn_logits: Option<Var>,
    pub cons_spatial: Option<Var>,
    pub cons_temporal: Option<Var>,
    pub cons_ttn: Option<Var>,
}

#[derive(Clone)]
pub struct Model<E: Element> {
    pub config: ModelConfig,
    pub store: ParamStore<E>,
    pub spatial: Backbone,
    pub temporal: Backbone,
    pub fusion: Option<FusionParams>,
    pub ttn: Ttn,
}

impl<E: Element> Model<E> {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        assert!(config.k >= 2, "need at least two segments");
        assert!(config.stack >= 1, "need at least one motion map per snippet");
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::derive(seed, 0xB00);
        let spatial_cfg = BackboneConfig {
            in_channels: 3,
            stage_channels: config.stage_channels.clone(),
            blocks_per_stage: config.blocks_per_stage,
            num_classes: config.num_classes,
            head_dropout: config.dropout_spatial,
        };
        let temporal_cfg = BackboneConfig {
            in_channels: 2 * config.stack,
            head_dropout: config.dropout_temporal,
            ..spatial_cfg.clone()
        };
        let spatial = Backbone::build(spatial_cfg, &mut store, "spatial", &mut rng)?;
        let temporal = Backbone::build(temporal_cfg, &mut store, "temporal", &mut rng)?;
        let fusion = match config.fusion_mode {
            FusionMode::Adaptive => Some(FusionParams::build(
                &mut store,
                "fusion",
                &config.fused_stages,
                config.alpha_init,
            )?),
            FusionMode::Attention => None,
        };
        let ttn = Ttn::build(
            &mut store,
            "ttn",
            &spatial,
            &config.fused_stages,
            config.dropout_ttn,
            &mut rng,
        )?;
        Ok(Self {
            config,
            store,
            spatial,
            temporal,
            fusion,
            ttn,
        })
    }

    /// Batched forward over `clips` videos of K snippets each. `rgb` is
    /// [clips*K, 3, H, W], `motion` [clips*K, 2F, H, W]; rows are grouped by
    /// clip in segment order.
    pub fn forward_batch(
        &mut self,
        g: &mut Graph<E>,
        binding: &mut ParamBinding,
        rgb: Tensor<E>,
        motion: Tensor<E>,
        clips: usize,
        opts: ForwardOpts,
    ) -> Result<ForwardScores> {
        let k = self.config.k;
        let rows = clips * k;
        if rgb.shape()[0] != rows || motion.shape()[0] != rows {
            return Err(CoreError::ShapeMismatch {
                op: "forward_batch",
                left: vec![rgb.shape()[0]],
                right: vec![rows],
            });
        }
        let run_spatial = opts.with_spatial || opts.with_ttn;
        let run_temporal = opts.with_temporal || opts.with_ttn;
        let rgb_v = g.constant(rgb);
        let mot_v = g.constant(motion);
        let mut fx = Fwd::new(g, &mut self.store, binding);
        let mut spatial = None;
        if run_spatial {
            spatial = Some(self.spatial.forward_pyramid(&mut fx, rgb_v, opts.train_streams)?);
        }
        let mut temporal = None;
        if run_temporal {
            temporal = Some(self.temporal.forward_pyramid(&mut fx, mot_v, opts.train_streams)?);
        }

        let ttn_logits = if opts.with_ttn {
            let (pyr_s, _) = spatial.as_ref().expect("spatial runs with the ttn branch");
            let (pyr_t, _) = temporal.as_ref().expect("temporal runs with the ttn branch");
            let fused = fuse_pyramid(
                &mut fx,
                pyr_s,
                pyr_t,
                self.config.fusion_mode,
                self.fusion.as_ref(),
                &self.config.fused_stages,
            )?;
            let mut idx_i = Vec::with_capacity(clips * (k - 1));
            let mut idx_j = Vec::with_capacity(clips * (k - 1));
            for b in 0..clips {
                for i in 0..k - 1 {
                    idx_i.push(b * k + i);
                    idx_j.push(b * k + i + 1);
                }
            }
            let mut f_i = Pyramid::new();
            let mut f_j = Pyramid::new();
            for (&l, &v) in &fused {
                f_i.insert(l, fx.g.select_rows(v, &idx_i)?);
                f_j.insert(l, fx.g.select_rows(v, &idx_j)?);
            }
            Some(self.ttn.forward(&mut fx, &f_i, &f_j, opts.train_ttn)?)
        } else {
            None
        };

        let spatial_logits = spatial.map(|(_, logits)| logits);
        let temporal_logits = temporal.map(|(_, logits)| logits);
        let mut consensus_of = |v: Option<Var>| -> Result<Option<Var>> {
            Ok(match v {
                Some(v) => Some(g.group_mean(v, clips)?),
                None => None,
            })
        };
        let cons_spatial = consensus_of(spatial_logits)?;
        let cons_temporal = consensus_of(temporal_logits)?;
        let cons_ttn = consensus_of(ttn_logits)?;
        Ok(ForwardScores {
            spatial_logits,
            temporal_logits,
            ttn_logits,
            cons_spatial,
            cons_temporal,
            cons_ttn,
        })
    }

    /// Weighted sum of the three consensus logit rows (still in the graph,
    /// for joint training).
    pub fn combined_logits(
        &self,
        g: &mut Graph<E>,
        scores: &ForwardScores,
        weights: (f64, f64, f64),
    ) -> Result<Var> {
        validate_weights(weights)?;
        let need = |v: Option<Var>| {
            v.ok_or(CoreError::EmptyBatch {
                op: "combined_logits needs all branches",
            })
        };
        let ws = need(scores.cons_spatial)?;
        let wt = need(scores.cons_temporal)?;
        let wr = need(scores.cons_ttn)?;
        let ws = g.scale_const(ws, E::from_f64(weights.0));
        let wt = g.scale_const(wt, E::from_f64(weights.1));
        let wr = g.scale_const(wr, E::from_f64(weights.2));
        let partial = g.add(ws, wt)?;
        g.add(partial, wr)
    }

    pub fn to_checkpoint(&self, phase: &str, config_echo: &str) -> Checkpoint {
        Checkpoint::from_store(
            &self.store,
            phase,
            &self.config.fusion_mode.to_string(),
            config_echo,
            None,
        )
    }

    /// Restore parameters from a checkpoint. Missing namespaces follow the
    /// progressive-training recipe: an absent temporal stream is seeded from
    /// the loaded spatial stream via cross-modality transfer, an absent
    /// transformation network is copied from the spatial stages, absent
    /// fusion scalars keep their built defaults. Anything else missing is an
    /// error.
    pub fn load_checkpoint_data(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let missing = ckpt.apply_to_store(&mut self.store)?;
        let mut temporal_missing = false;
        let mut ttn_missing = false;
        for name in &missing {
            if name.starts_with("temporal.") {
                temporal_missing = true;
            } else if name.starts_with("ttn.") {
                ttn_missing = true;
            } else if !name.starts_with("fusion.") {
                return Err(CoreError::CheckpointMissing { name: name.clone() });
            }
        }
        if temporal_missing {
            init_cross_modality(&mut self.store, &self.spatial, &self.temporal)?;
        }
        if ttn_missing {
            self.ttn.init_from_backbone(&mut self.store, &self.spatial)?;
        }
        Ok(())
    }
}

fn validate_weights(weights: (f64, f64, f64)) -> Result<()> {
    let (a, b, c) = weights;
    if a < 0.0 || b < 0.0 || c < 0.0 || (a == 0.0 && b == 0.0 && c == 0.0) {
        return Err(CoreError::InvalidWeights);
    }
    Ok(())
}

/// All per-branch scores for one video, plus the fused class distribution.
#[derive(Debug, Clone)]
pub struct ScoreBundle {
    pub spatial: Vec<Vec<f64>>,
    pub temporal: Vec<Vec<f64>>,
    pub ttn: Vec<Vec<f64>>,
    pub fused: Vec<f64>,
}

impl ScoreBundle {
    /// Weighted fusion of the three consensus rows, softmaxed.
    pub fn fuse(&self, weights: (f64, f64, f64)) -> Result<Vec<f64>> {
        validate_weights(weights)?;
        let cs = consensus(&self.spatial)?;
        let ct = consensus(&self.temporal)?;
        let cr = consensus(&self.ttn)?;
        let logits: Vec<f64> = cs
            .iter()
            .zip(&ct)
            .zip(&cr)
            .map(|((s, t), r)| weights.0 * s + weights.1 * t + weights.2 * r)
            .collect();
        Ok(softmax_f64(&logits))
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.fused)
    }
}

pub fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|v| v / denom).collect()
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn rows_of<E: Element>(g: &Graph<E>, v: Var) -> Vec<Vec<f64>> {
    let t = g.value(v);
    let (n, c) = t.dims2().expect("logits are 2-d");
    (0..n)
        .map(|r| t.data()[r * c..(r + 1) * c].iter().map(|x| x.to_f64()).collect())
        .collect()
}

/// Run the whole model on one clip's assembled inputs (eval mode) and return
/// every branch's scores plus the fused distribution at the model's
/// configured score weights.
pub fn forward_ifttn<E: Element>(
    model: &mut Model<E>,
    rgb: Tensor<E>,
    motion: Tensor<E>,
) -> Result<ScoreBundle> {
    let mut g = Graph::inference();
    let mut binding = ParamBinding::new();
    let scores = model.forward_batch(&mut g, &mut binding, rgb, motion, 1, ForwardOpts::eval())?;
    let bundle_weights = model.config.score_weights;
    let mut bundle = ScoreBundle {
        spatial: rows_of(&g, scores.spatial_logits.expect("eval runs all branches")),
        temporal: rows_of(&g, scores.temporal_logits.expect("eval runs all branches")),
        ttn: rows_of(&g, scores.ttn_logits.expect("eval runs the ttn branch")),
        fused: Vec::new(),
    };
    bundle.fused = bundle.fuse(bundle_weights)?;
    Ok(bundle)
}

/// Segment the video (eval-mode center sampling), run the model, fuse with
/// the given weights. Returns the class distribution and the full bundle.
pub fn predict<E: Element>(
    model: &mut Model<E>,
    video: &VideoSample,
    weights: (f64, f64, f64),
) -> Result<(Vec<f64>, ScoreBundle)> {
    validate_weights(weights)?;
    let mut rng = SplitMix64::new(0);
    let sel = sample_segments(
        video.num_frames(),
        model.config.k,
        SampleMode::Eval,
        &mut rng,
        model.config.stack,
    )?;
    let (rgb, motion) = snippet_inputs::<E>(video, &sel)?;
    let mut bundle = forward_ifttn(model, rgb, motion)?;
    bundle.fused = bundle.fuse(weights)?;
    let dist = bundle.fused.clone();
    Ok((dist, bundle))
}
