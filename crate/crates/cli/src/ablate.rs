//! Ablation grid: separate two-stream baseline vs attention vs adaptive
//! fusion, per-branch accuracies, and optionally the block-MV motion path.

use crate::config::TrainConfig;
use crate::evaluate::{evaluate, BranchAccuracies};
use crate::report::Report;
use crate::trainer::{
    load_dataset, phase1_train_two_stream, phase2_train_ttn, phase3_joint_finetune,
};
use anyhow::Result;
use std::path::Path;
use tempora_core::fusion::FusionMode;

pub struct AblationRow {
    pub name: String,
    pub acc: BranchAccuracies,
}

/// Train one full progressive run and evaluate it; also returns the
/// evaluation of the phase-1 model (the consensus-only two-stream baseline).
fn run_full(
    cfg: &TrainConfig,
    data_root: &Path,
    out_dir: &Path,
) -> Result<(BranchAccuracies, BranchAccuracies)> {
    let data = load_dataset(data_root, cfg.motion_kind())?;
    let (mut model, _) = phase1_train_two_stream(cfg, &data, out_dir)?;
    let (two_stream, _) = evaluate(&model, &data, cfg.score_weights, cfg.threads)?;
    phase2_train_ttn(cfg, &data, &mut model, out_dir)?;
    phase3_joint_finetune(cfg, &data, &mut model, out_dir)?;
    let (complete, _) = evaluate(&model, &data, cfg.score_weights, cfg.threads)?;
    Ok((two_stream, complete))
}

pub fn run_ablation(
    base: &TrainConfig,
    data_root: &Path,
    out_dir: &Path,
    with_mv: bool,
) -> Result<(Vec<AblationRow>, Report)> {
    let mut rows = Vec::new();

    let mut attention = base.clone();
    attention.fusion_mode = FusionMode::Attention;
    let att_dir = out_dir.join("attention");
    std::fs::create_dir_all(&att_dir)?;
    let (two_stream, att) = run_full(&attention, data_root, &att_dir)?;
    rows.push(AblationRow {
        name: "separate-two-stream".into(),
        acc: two_stream,
    });
    rows.push(AblationRow {
        name: "attention-ifm".into(),
        acc: att,
    });

    let mut adaptive = base.clone();
    adaptive.fusion_mode = FusionMode::Adaptive;
    let ada_dir = out_dir.join("adaptive");
    std::fs::create_dir_all(&ada_dir)?;
    let (_, ada) = run_full(&adaptive, data_root, &ada_dir)?;
    rows.push(AblationRow {
        name: "adaptive-ifm".into(),
        acc: ada,
    });

    if with_mv {
        let mut mv = base.clone();
        mv.fusion_mode = FusionMode::Attention;
        mv.motion = "mv".into();
        let mv_dir = out_dir.join("mv");
        std::fs::create_dir_all(&mv_dir)?;
        let (_, mv_acc) = run_full(&mv, data_root, &mv_dir)?;
        rows.push(AblationRow {
            name: "attention-ifm-mv".into(),
            acc: mv_acc,
        });
    }

    let mut report = Report::new();
    for row in &rows {
        let a = &row.acc;
        report.set_acc(format!("{}.spatial", row.name), a.spatial);
        report.set_acc(format!("{}.temporal", row.name), a.temporal);
        report.set_acc(format!("{}.two_stream", row.name), a.two_stream);
        report.set_acc(format!("{}.ttn", row.name), a.ttn);
        report.set_acc(format!("{}.complete", row.name), a.complete);
    }
    Ok((rows, report))
}
