//! Small residual convolutional backbone.
//!
//! A stem conv followed by L stages of residual blocks; spatial resolution
//! halves at every stage after the first while channels follow the config.
//! The forward pass exposes the per-stage feature maps (the feature pyramid)
//! alongside classifier logits, and the temporal stream is seeded from a
//! trained spatial stream by channel-averaging the stem kernels.

use crate::error::{CoreError, Result};
use crate::params::{Fwd, ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::{Element, Tensor, Var};
use std::collections::BTreeMap;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Ordered map from stage index (1-based) to that stage's output.
pub type Pyramid = BTreeMap<usize, Var>;

#[derive(Debug, Clone)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub num_classes: usize,
    pub head_dropout: f64,
}

impl BackboneConfig {
    pub fn new(in_channels: usize, num_classes: usize) -> Self {
        Self {
            in_channels,
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 2,
            num_classes,
            head_dropout: 0.8,
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Smallest input extent the stride chain supports.
    pub fn min_extent(&self) -> usize {
        1 << (self.stages() - 1)
    }
}

fn he_normal<E: Element>(shape: &[usize], fan_in: usize, rng: &mut SplitMix64) -> Tensor<E> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape.to_vec(),
        (0..n).map(|_| E::from_f64(rng.normal() * std)).collect(),
    )
    .expect("shape/volume agree")
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn build<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let w = store.add_weight(
            format!("{name}.w"),
            he_normal(&[out_ch, in_ch, k, k], in_ch * k * k, rng),
        )?;
        let b = if bias {
            Some(store.add_weight(format!("{name}.b"), Tensor::zeros(&[out_ch]))?)
        } else {
            None
        };
        Ok(Self { w, b, stride, pad })
    }

    pub fn forward<E: Element>(&self, fx: &mut Fwd<E>, x: Var) -> Result<Var> {
        let w = fx.param(self.w);
        let b = self.b.map(|id| fx.bind.bind(fx.g, fx.store, id));
        fx.g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn build<E: Element>(store: &mut ParamStore<E>, name: &str, ch: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_weight(format!("{name}.gamma"), Tensor::ones(&[ch]))?,
            beta: store.add_weight(format!("{name}.beta"), Tensor::zeros(&[ch]))?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[ch]))?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[ch]))?,
        })
    }

    pub fn forward<E: Element>(&self, fx: &mut Fwd<E>, x: Var, train: bool) -> Result<Var> {
        let gamma = fx.param(self.gamma);
        let beta = fx.param(self.beta);
        let mut rm = fx.store.get(self.running_mean).data().to_vec();
        let mut rv = fx.store.get(self.running_var).data().to_vec();
        let out = fx
            .g
            .batch_norm(x, gamma, beta, &mut rm, &mut rv, train, BN_MOMENTUM, BN_EPS)?;
        if train {
            fx.store.set_values(self.running_mean, &rm)?;
            fx.store.set_values(self.running_var, &rv)?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn build<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add_weight(format!("{name}.w"), he_normal(&[in_dim, out_dim], in_dim, rng))?,
            b: store.add_weight(format!("{name}.b"), Tensor::zeros(&[out_dim]))?,
        })
    }

    pub fn forward<E: Element>(&self, fx: &mut Fwd<E>, x: Var) -> Result<Var> {
        let w = fx.param(self.w);
        let b = fx.param(self.b);
        fx.g.linear(x, w, b)
    }
}

/// conv-bn-relu-conv-bn plus an identity or projection shortcut, then relu.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl ResidualBlock {
    pub fn build<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let conv1 = Conv2d::build(
            store,
            &format!("{name}.conv1"),
            in_ch,
            out_ch,
            3,
            stride,
            1,
            false,
            rng,
        )?;
        let bn1 = BatchNorm2d::build(store, &format!("{name}.bn1"), out_ch)?;
        let conv2 = Conv2d::build(store, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, false, rng)?;
        let bn2 = BatchNorm2d::build(store, &format!("{name}.bn2"), out_ch)?;
        let shortcut = if stride != 1 || in_ch != out_ch {
            let conv = Conv2d::build(
                store,
                &format!("{name}.shortcut.conv"),
                in_ch,
                out_ch,
                1,
                stride,
                0,
                false,
                rng,
            )?;
            let bn = BatchNorm2d::build(store, &format!("{name}.shortcut.bn"), out_ch)?;
            Some((conv, bn))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        })
    }

    pub fn forward<E: Element>(&self, fx: &mut Fwd<E>, x: Var, train: bool) -> Result<Var> {
        let mut h = self.conv1.forward(fx, x)?;
        h = self.bn1.forward(fx, h, train)?;
        h = fx.g.relu(h);
        h = self.conv2.forward(fx, h)?;
        h = self.bn2.forward(fx, h, train)?;
        let sc = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(fx, x)?;
                bn.forward(fx, s, train)?
            }
            None => x,
        };
        let sum = fx.g.add(h, sc)?;
        Ok(fx.g.relu(sum))
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub blocks: Vec<ResidualBlock>,
}

impl Stage {
    /// Stage mirroring the backbone layout: the first block changes channels
    /// and applies the stage stride, the rest keep shape.
    pub fn build<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        blocks: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let mut list = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let (ic, s) = if b == 0 { (in_ch, stride) } else { (out_ch, 1) };
            list.push(ResidualBlock::build(
                store,
                &format!("{name}.block{b}"),
                ic,
                out_ch,
                s,
                rng,
            )?);
        }
        Ok(Self { blocks: list })
    }

    pub fn forward<E: Element>(&self, fx: &mut Fwd<E>, mut x: Var, train: bool) -> Result<Var> {
        for block in &self.blocks {
            x = block.forward(fx, x, train)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub prefix: String,
    pub stem: Conv2d,
    pub stages: Vec<Stage>,
    pub head: Linear,
}

impl Backbone {
    /// Stem 3x3 conv (stride 1) + one stage per configured channel count +
    /// GAP/dropout/linear classifier head. He fan-in initialization.
    pub fn build<E: Element>(
        config: BackboneConfig,
        store: &mut ParamStore<E>,
        prefix: &str,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        assert!(!config.stage_channels.is_empty(), "stage_channels empty");
        let stem = Conv2d::build(
            store,
            &format!("{prefix}.stem"),
            config.in_channels,
            config.stage_channels[0],
            3,
            1,
            1,
            true,
            rng,
        )?;
        let mut stages = Vec::new();
        let mut in_ch = config.stage_channels[0];
        for (i, &out_ch) in config.stage_channels.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            stages.push(Stage::build(
                store,
                &format!("{prefix}.stage{}", i + 1),
                in_ch,
                out_ch,
                stride,
                config.blocks_per_stage,
                rng,
            )?);
            in_ch = out_ch;
        }
        let head = Linear::build(
            store,
            &format!("{prefix}.head"),
            *config.stage_channels.last().unwrap(),
            config.num_classes,
            rng,
        )?;
        Ok(Self {
            config,
            prefix: prefix.to_string(),
            stem,
            stages,
            head,
        })
    }

    /// Run the backbone, returning every stage output plus classifier logits.
    pub fn forward_pyramid<E: Element>(
        &self,
        fx: &mut Fwd<E>,
        x: Var,
        train: bool,
    ) -> Result<(Pyramid, Var)> {
        let (_, c, h, w) = fx.g.value(x).dims4()?;
        if c != self.config.in_channels {
            return Err(CoreError::ChannelMismatch {
                op: "forward_pyramid",
                got: c,
                expected: self.config.in_channels,
            });
        }
        let min = self.config.min_extent();
        if h < min || w < min {
            return Err(CoreError::KernelTooLarge {
                kh: min,
                kw: min,
                h,
                w,
            });
        }
        let mut feat = self.stem.forward(fx, x)?;
        let mut pyramid = Pyramid::new();
        for (i, stage) in self.stages.iter().enumerate() {
            feat = stage.forward(fx, feat, train)?;
            pyramid.insert(i + 1, feat);
        }
        let pooled = fx.g.global_avg_pool(feat)?;
        let dropped = fx.g.dropout(pooled, self.config.head_dropout, train)?;
        let logits = self.head.forward(fx, dropped)?;
        Ok((pyramid, logits))
    }
}

/// Seed `dst` (any stem width) from a trained 3-channel `src` in the same
/// store: every entry is copied verbatim except the stem kernels, which
/// become the channel mean replicated across the target channels and scaled
/// by 3/target so constant-channel inputs produce identical stem responses.
pub fn init_cross_modality<E: Element>(
    store: &mut ParamStore<E>,
    src: &Backbone,
    dst: &Backbone,
) -> Result<()> {
    if src.config.in_channels != 3 {
        return Err(CoreError::ChannelMismatch {
            op: "init_cross_modality",
            got: src.config.in_channels,
            expected: 3,
        });
    }
    store.copy_within(&src.prefix, &dst.prefix, &[".stem.w"])?;

    let src_w = store.get(src.stem.w).clone();
    let (oc, ic, kh, kw) = src_w.dims4()?;
    let tc = dst.config.in_channels;
    // Mean and scale in f64 so channel-identical kernels at target width 3
    // round-trip bit-exactly.
    let scale = 3.0 / tc as f64;
    let mut data = vec![E::ZERO; oc * tc * kh * kw];
    for o in 0..oc {
        for y in 0..kh {
            for x in 0..kw {
                let mut mean = 0f64;
                for i in 0..ic {
                    mean += src_w.data()[((o * ic + i) * kh + y) * kw + x].to_f64();
                }
                let v = E::from_f64(mean / ic as f64 * scale);
                for t in 0..tc {
                    data[((o * tc + t) * kh + y) * kw + x] = v;
                }
            }
        }
    }
    store.set_values(dst.stem.w, &data)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamBinding;
    use crate::tensor::Graph;

    fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            in_channels: 3,
            stage_channels: vec![4, 6],
            blocks_per_stage: 1,
            num_classes: 2,
            head_dropout: 0.0,
        }
    }

    #[test]
    fn default_pyramid_shapes_on_32px_input() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = SplitMix64::new(1);
        let bb = Backbone::build(BackboneConfig::new(3, 5), &mut store, "spatial", &mut rng).unwrap();
        let mut g = Graph::inference();
        let mut bind = ParamBinding::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 32, 32]));
        let mut fx = Fwd::new(&mut g, &mut store, &mut bind);
        let (pyr, logits) = bb.forward_pyramid(&mut fx, x, false).unwrap();
        assert_eq!(pyr.len(), 3);
        assert_eq!(g.value(pyr[&1]).shape(), &[2, 16, 32, 32]);
        assert_eq!(g.value(pyr[&2]).shape(), &[2, 32, 16, 16]);
        assert_eq!(g.value(pyr[&3]).shape(), &[2, 64, 8, 8]);
        assert_eq!(g.value(logits).shape(), &[2, 5]);
    }

    #[test]
    fn same_config_same_param_count_same_seed_same_bits() {
        let build = |seed: u64| {
            let mut store = ParamStore::<f32>::new();
            let mut rng = SplitMix64::new(seed);
            Backbone::build(BackboneConfig::new(3, 4), &mut store, "bb", &mut rng).unwrap();
            store
        };
        let a = build(3);
        let b = build(3);
        let c = build(9);
        assert_eq!(a.len(), b.len());
        assert_eq!(a.len(), c.len());
        for (id_a, id_b) in a.ids().zip(b.ids()) {
            assert_eq!(a.get(id_a).data(), b.get(id_b).data());
        }
        let differs = a
            .ids()
            .zip(c.ids())
            .any(|(x, y)| a.get(x).data() != c.get(y).data());
        assert!(differs, "different seeds should differ somewhere");
    }

    #[test]
    fn rejects_wrong_channel_count_and_tiny_input() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = SplitMix64::new(1);
        let bb = Backbone::build(BackboneConfig::new(3, 2), &mut store, "bb", &mut rng).unwrap();
        let mut g = Graph::inference();
        let mut bind = ParamBinding::new();
        let bad_ch = g.constant(Tensor::zeros(&[1, 2, 32, 32]));
        let tiny = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let mut fx = Fwd::new(&mut g, &mut store, &mut bind);
        assert!(matches!(
            bb.forward_pyramid(&mut fx, bad_ch, false),
            Err(CoreError::ChannelMismatch { .. })
        ));
        assert!(matches!(
            bb.forward_pyramid(&mut fx, tiny, false),
            Err(CoreError::KernelTooLarge { .. })
        ));
    }

    #[test]
    fn residual_block_with_zero_weights_is_identity_on_nonneg_input() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = SplitMix64::new(4);
        let bb = Backbone::build(tiny_config(), &mut store, "bb", &mut rng).unwrap();
        // Zero the non-shortcut path of the second stage's block; its input
        // comes from a relu so it is non-negative, and the block must then act
        // as the (projected) shortcut alone. Use a block with identity
        // shortcut: add one extra block by rebuilding with 2 blocks.
        let mut store = ParamStore::<f32>::new();
        let mut rng = SplitMix64::new(4);
        let mut cfg = tiny_config();
        cfg.blocks_per_stage = 2;
        let bb2 = Backbone::build(cfg, &mut store, "bb", &mut rng).unwrap();
        drop(bb);
        let block = &bb2.stages[0].blocks[1];
        assert!(block.shortcut.is_none(), "second block keeps shape");
        let zeros_w = vec![0.0f32; store.get(block.conv2.w).numel()];
        store.set_values(block.conv2.w, &zeros_w).unwrap();
        let zeros_g = vec![0.0f32; store.get(block.bn2.gamma).numel()];
        store.set_values(block.bn2.gamma, &zeros_g).unwrap();

        let mut g = Graph::inference();
        let mut bind = ParamBinding::new();
        let mut rng2 = SplitMix64::new(11);
        let input_data: Vec<f32> = (0..2 * 4 * 8 * 8).map(|_| rng2.uniform(0.0, 1.0) as f32).collect();
        let x = g.constant(Tensor::from_vec(vec![2, 4, 8, 8], input_data).unwrap());
        let mut fx = Fwd::new(&mut g, &mut store, &mut bind);
        let h = bb2.stages[0].blocks[0].forward(&mut fx, x, false).unwrap();
        let out = block.forward(&mut fx, h, false).unwrap();
        assert_eq!(fx.g.value(out).data(), fx.g.value(h).data());
    }

    #[test]
    fn cross_modality_stem_rules() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = SplitMix64::new(6);
        let spatial =
            Backbone::build(tiny_config(), &mut store, "spatial", &mut rng).unwrap();
        let mut tcfg = tiny_config();
        tcfg.in_channels = 4;
        let temporal = Backbone::build(tcfg, &mut store, "temporal", &mut rng).unwrap();
        init_cross_modality(&mut store, &spatial, &temporal).unwrap();

        // Non-stem entries bit-identical to source.
        for (name, tensor) in store.iter_named() {
            if let Some(suffix) = name.strip_prefix("temporal.") {
                if suffix == "stem.w" {
                    continue;
                }
                let src = store.id_of(&format!("spatial.{suffix}")).unwrap();
                assert_eq!(store.get(src).data(), tensor.data(), "{name}");
            }
        }

        // Constant-channel responses match: feed P on all channels.
        let mut rng2 = SplitMix64::new(13);
        let plane: Vec<f32> = (0..64).map(|_| rng2.uniform(-1.0, 1.0) as f32).collect();
        let mut rgb = Vec::new();
        for _ in 0..3 {
            rgb.extend_from_slice(&plane);
        }
        let mut four = Vec::new();
        for _ in 0..4 {
            four.extend_from_slice(&plane);
        }
        let mut g = Graph::inference();
        let mut bind = ParamBinding::new();
        let x3 = g.constant(Tensor::from_vec(vec![1, 3, 8, 8], rgb).unwrap());
        let x4 = g.constant(Tensor::from_vec(vec![1, 4, 8, 8], four).unwrap());
        let mut fx = Fwd::new(&mut g, &mut store, &mut bind);
        let s3 = spatial.stem.forward(&mut fx, x3).unwrap();
        let s4 = temporal.stem.forward(&mut fx, x4).unwrap();
        let (a, b) = (fx.g.value(s3).data(), fx.g.value(s4).data());
        let max_dev = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max_dev < 1e-5, "max deviation {max_dev}");
    }

    #[test]
    fn cross_modality_identical_channels_keeps_stem() {
        // Kernels identical across input channels: the mean replicated at
        // target 3 with scale 3/3 reproduces the original stem.
        let mut store = ParamStore::<f32>::new();
        let mut rng = SplitMix64::new(8);
        let spatial = Backbone::build(tiny_config(), &mut store, "spatial", &mut rng).unwrap();
        let temporal = Backbone::build(tiny_config(), &mut store, "temporal", &mut rng).unwrap();
        // Force channel-identical stem kernels on the source.
        let w = store.get(spatial.stem.w).clone();
        let (oc, ic, kh, kw) = w.dims4().unwrap();
        let mut data = w.data().to_vec();
        for o in 0..oc {
            for y in 0..kh {
                for x in 0..kw {
                    let v = data[((o * ic) * kh + y) * kw + x];
                    for i in 1..ic {
                        data[((o * ic + i) * kh + y) * kw + x] = v;
                    }
                }
            }
        }
        store.set_values(spatial.stem.w, &data).unwrap();
        init_cross_modality(&mut store, &spatial, &temporal).unwrap();
        assert_eq!(
            store.get(temporal.stem.w).data(),
            store.get(spatial.stem.w).data()
        );
    }

    #[test]
    fn end_to_end_gradient_check_micro() {
        use crate::tensor::grad_check;
        let mut store = ParamStore::<f64>::new();
        let mut rng = SplitMix64::new(17);
        let bb = Backbone::build(tiny_config(), &mut store, "bb", &mut rng).unwrap();
        let ids = store.weight_ids();
        let inputs: Vec<Tensor<f64>> = ids.iter().map(|&id| store.get(id).clone()).collect();
        let mut rng2 = SplitMix64::new(18);
        let x = Tensor::from_vec(
            vec![2, 3, 8, 8],
            (0..2 * 3 * 64).map(|_| rng2.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let store_ref = &store;
        let err = grad_check(
            |g, vars| {
                let mut store = store_ref.clone();
                let mut bind = ParamBinding::prebound(&ids, vars);
                let xv = g.constant(x.clone());
                let mut fx = Fwd::new(g, &mut store, &mut bind);
                let (_, logits) = bb.forward_pyramid(&mut fx, xv, true)?;
                fx.g.softmax_cross_entropy(logits, &[0, 1])
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
