//! Temporal transformation network.
//!
//! Models the ordered change between adjacent snippets: fused-feature
//! differences enter a truncated stack of residual stages (mirroring the
//! upper backbone stages so pre-trained weights drop in), with a merge
//! between consecutive stages that adds the next stage's feature difference
//! onto the running representation. Pair outputs are averaged per video.

use crate::backbone::{Backbone, Linear, Pyramid, Stage};
use crate::error::{CoreError, Result};
use crate::params::{Fwd, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::{mean_rows, Element, Graph, Var};

/// Adjacent segment pairs (i, i+1), 0-based, covering every i once in order.
pub fn adjacent_pairs(k: usize) -> Vec<(usize, usize)> {
    (0..k.saturating_sub(1)).map(|i| (i, i + 1)).collect()
}

/// The merge between TTN stages: `r_in = (f_j - f_i) + r_out`.
/// Shape is preserved, which is what lets backbone weights serve as TTN
/// weights unchanged.
pub fn ttm_merge<E: Element>(g: &mut Graph<E>, f_i: Var, f_j: Var, r_out: Var) -> Result<Var> {
    let diff = g.sub(f_j, f_i)?;
    g.add(diff, r_out)
}

#[derive(Debug, Clone)]
pub struct Ttn {
    pub prefix: String,
    /// Stages whose fused-feature differences feed the network (l_s..L-1).
    pub taps: Vec<usize>,
    /// Residual stages l_s+1..=L, each shaped like its backbone counterpart.
    pub stages: Vec<(usize, Stage)>,
    pub head: Linear,
    pub head_dropout: f64,
    pub num_classes: usize,
}

impl Ttn {
    /// Mirror the backbone's stages above the first fused stage. With fused
    /// stages `l_s..=L`, differences tap stages `l_s..L-1` and the network
    /// runs stages `l_s+1..=L`; the final stage output goes straight to the
    /// head.
    pub fn build<E: Element>(
        store: &mut ParamStore<E>,
        prefix: &str,
        backbone: &Backbone,
        fused_stages: &[usize],
        head_dropout: f64,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let total = backbone.config.stages();
        let ls = *fused_stages.iter().min().expect("fused_stages nonempty");
        assert!(
            ls >= 1 && ls < total + 1 && fused_stages.iter().all(|&l| l <= total),
            "fused stages out of range"
        );
        assert!(ls < total, "need at least one stage above the first tap");
        let taps: Vec<usize> = (ls..total).collect();
        let mut stages = Vec::new();
        for t in (ls + 1)..=total {
            let in_ch = backbone.config.stage_channels[t - 2];
            let out_ch = backbone.config.stage_channels[t - 1];
            stages.push((
                t,
                Stage::build(
                    store,
                    &format!("{prefix}.stage{t}"),
                    in_ch,
                    out_ch,
                    2,
                    backbone.config.blocks_per_stage,
                    rng,
                )?,
            ));
        }
        let head = Linear::build(
            store,
            &format!("{prefix}.head"),
            *backbone.config.stage_channels.last().unwrap(),
            backbone.config.num_classes,
            rng,
        )?;
        Ok(Self {
            prefix: prefix.to_string(),
            taps,
            stages,
            head,
            head_dropout,
            num_classes: backbone.config.num_classes,
        })
    }

    /// Forward a batch of ordered snippet pairs. `f_i` and `f_j` are
    /// stage-aligned fused pyramids (rows = pairs); returns pair logits.
    pub fn forward<E: Element>(
        &self,
        fx: &mut Fwd<E>,
        f_i: &Pyramid,
        f_j: &Pyramid,
        train: bool,
    ) -> Result<Var> {
        let tap = |p: &Pyramid, l: usize| -> Result<Var> {
            p.get(&l).copied().ok_or(CoreError::MissingStage { stage: l })
        };
        let ls = self.taps[0];
        let mut r = fx.g.sub(tap(f_j, ls)?, tap(f_i, ls)?)?;
        for (t, stage) in &self.stages {
            r = stage.forward(fx, r, train)?;
            if self.taps.contains(t) {
                r = ttm_merge(fx.g, tap(f_i, *t)?, tap(f_j, *t)?, r)?;
            }
        }
        let pooled = fx.g.global_avg_pool(r)?;
        let dropped = fx.g.dropout(pooled, self.head_dropout, train)?;
        self.head.forward(fx, dropped)
    }

    /// Copy weights (and batch-norm state) from the backbone's matching
    /// stages and head; shapes agree by construction.
    pub fn init_from_backbone<E: Element>(
        &self,
        store: &mut ParamStore<E>,
        backbone: &Backbone,
    ) -> Result<usize> {
        store.copy_within(&backbone.prefix, &self.prefix, &[])
    }
}

/// Mean of per-pair class scores.
pub fn aggregate_pairs<E: Element>(pair_rows: &[Vec<E>]) -> Result<Vec<E>> {
    mean_rows(pair_rows)
}
