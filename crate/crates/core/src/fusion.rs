//! Per-stage fusion of appearance and motion features.
//!
//! Two forms over a stage-aligned feature pair (a = appearance, b = motion):
//!
//! - attention: `f = a + a ⊙ b` — the motion map gates which appearance
//!   features get enhanced, with the raw appearance kept as the base term.
//! - adaptive:  `f = α1·a + α2·b + α3·(a ⊙ b)` with learnable scalars per
//!   fused stage; at α = (1, 0, 1) it reproduces attention exactly.

use crate::backbone::Pyramid;
use crate::error::{CoreError, Result};
use crate::params::{Fwd, ParamId, ParamStore};
use crate::tensor::{Element, Graph, Tensor, Var};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Attention,
    Adaptive,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionMode::Attention => write!(f, "attention"),
            FusionMode::Adaptive => write!(f, "adaptive"),
        }
    }
}

impl FromStr for FusionMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "attention" => Ok(FusionMode::Attention),
            "adaptive" => Ok(FusionMode::Adaptive),
            other => Err(format!("unknown fusion mode {other:?}")),
        }
    }
}

/// Learnable (α1, α2, α3) triple per fused stage.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub stages: BTreeMap<usize, [ParamId; 3]>,
}

impl FusionParams {
    /// One scalar triple per fused stage. The (1, 0, 1) default starts the
    /// adaptive form exactly at the attention special case.
    pub fn build<E: Element>(
        store: &mut ParamStore<E>,
        prefix: &str,
        fused_stages: &[usize],
        init: (f64, f64, f64),
    ) -> Result<Self> {
        let mut stages = BTreeMap::new();
        for &l in fused_stages {
            let ids = [
                store.add_weight(
                    format!("{prefix}.stage{l}.alpha1"),
                    Tensor::scalar(E::from_f64(init.0)),
                )?,
                store.add_weight(
                    format!("{prefix}.stage{l}.alpha2"),
                    Tensor::scalar(E::from_f64(init.1)),
                )?,
                store.add_weight(
                    format!("{prefix}.stage{l}.alpha3"),
                    Tensor::scalar(E::from_f64(init.2)),
                )?,
            ];
            stages.insert(l, ids);
        }
        Ok(Self { stages })
    }

    pub fn alphas<E: Element>(&self, store: &ParamStore<E>, stage: usize) -> Option<(f64, f64, f64)> {
        self.stages.get(&stage).map(|ids| {
            (
                store.get(ids[0]).item().to_f64(),
                store.get(ids[1]).item().to_f64(),
                store.get(ids[2]).item().to_f64(),
            )
        })
    }
}

/// `f = a + a ⊙ b`
pub fn fuse_attention<E: Element>(g: &mut Graph<E>, a: Var, b: Var) -> Result<Var> {
    let gated = g.hadamard(a, b)?;
    g.add(a, gated)
}

/// `f = α1·a + α2·b + α3·(a ⊙ b)`
pub fn fuse_adaptive<E: Element>(
    fx: &mut Fwd<E>,
    a: Var,
    b: Var,
    alphas: &[ParamId; 3],
) -> Result<Var> {
    let a1 = fx.param(alphas[0]);
    let a2 = fx.param(alphas[1]);
    let a3 = fx.param(alphas[2]);
    let term1 = fx.g.scale_var(a1, a)?;
    let term2 = fx.g.scale_var(a2, b)?;
    let gated = fx.g.hadamard(a, b)?;
    let term3 = fx.g.scale_var(a3, gated)?;
    let partial = fx.g.add(term1, term2)?;
    fx.g.add(partial, term3)
}

/// Fuse two stage-aligned pyramids on the requested stages; stages outside
/// `fused_stages` are absent from the output.
pub fn fuse_pyramid<E: Element>(
    fx: &mut Fwd<E>,
    appearance: &Pyramid,
    motion: &Pyramid,
    mode: FusionMode,
    params: Option<&FusionParams>,
    fused_stages: &[usize],
) -> Result<Pyramid> {
    let mut out = Pyramid::new();
    for &l in fused_stages {
        let a = *appearance.get(&l).ok_or(CoreError::MissingStage { stage: l })?;
        let b = *motion.get(&l).ok_or(CoreError::MissingStage { stage: l })?;
        let fused = match mode {
            FusionMode::Attention => fuse_attention(fx.g, a, b)?,
            FusionMode::Adaptive => {
                let p = params.ok_or(CoreError::MissingStage { stage: l })?;
                let ids = p.stages.get(&l).ok_or(CoreError::MissingStage { stage: l })?;
                fuse_adaptive(fx, a, b, ids)?
            }
        };
        out.insert(l, fused);
    }
    Ok(out)
}
