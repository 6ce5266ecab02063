//! Single-pass evaluation with per-branch accuracies, plus score dumping and
//! score-file ensembling.

use crate::trainer::LoadedDataset;
use anyhow::{anyhow, bail, Result};
use std::path::Path;
use tempora_core::pipeline::{
    argmax, consensus, forward_ifttn, sample_segments, snippet_inputs, Model, SampleMode,
    VideoSample,
};
use tempora_core::rng::SplitMix64;

/// Per-clip evaluation record: the fused pre-softmax logits and every
/// branch's decision.
#[derive(Debug, Clone)]
pub struct ClipScores {
    pub id: String,
    pub label: usize,
    pub fused_logits: Vec<f64>,
    pub decisions: BranchDecisions,
}

#[derive(Debug, Clone, Copy)]
pub struct BranchDecisions {
    pub spatial: usize,
    pub temporal: usize,
    pub two_stream: usize,
    pub ttn: usize,
    pub complete: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BranchAccuracies {
    pub spatial: f64,
    pub temporal: f64,
    pub two_stream: f64,
    pub ttn: f64,
    pub complete: f64,
    pub clips: usize,
}

fn weighted_logits(cs: &[f64], ct: &[f64], cr: &[f64], w: (f64, f64, f64)) -> Vec<f64> {
    cs.iter()
        .zip(ct)
        .zip(cr)
        .map(|((s, t), r)| w.0 * s + w.1 * t + w.2 * r)
        .collect()
}

fn eval_one(
    model: &mut Model<f32>,
    video: &VideoSample,
    weights: (f64, f64, f64),
) -> Result<ClipScores> {
    let mut rng = SplitMix64::new(0);
    let sel = sample_segments(
        video.num_frames(),
        model.config.k,
        SampleMode::Eval,
        &mut rng,
        model.config.stack,
    )?;
    let (rgb, motion) = snippet_inputs::<f32>(video, &sel)?;
    let bundle = forward_ifttn(model, rgb, motion)?;
    let cs = consensus(&bundle.spatial)?;
    let ct = consensus(&bundle.temporal)?;
    let cr = consensus(&bundle.ttn)?;
    let fused_logits = weighted_logits(&cs, &ct, &cr, weights);
    let decisions = BranchDecisions {
        spatial: argmax(&cs),
        temporal: argmax(&ct),
        two_stream: argmax(&weighted_logits(&cs, &ct, &cr, (1.0, 1.0, 0.0))),
        ttn: argmax(&cr),
        complete: argmax(&fused_logits),
    };
    Ok(ClipScores {
        id: video.id.clone(),
        label: video.label,
        fused_logits,
        decisions,
    })
}

/// Evaluate the whole eval split with eval-mode sampling. Clips may be
/// processed on multiple threads; results merge in index order so the report
/// is identical regardless of thread count.
pub fn evaluate(
    model: &Model<f32>,
    data: &LoadedDataset,
    weights: (f64, f64, f64),
    threads: usize,
) -> Result<(BranchAccuracies, Vec<ClipScores>)> {
    if data.eval.is_empty() {
        bail!("eval split is empty");
    }
    if model.config.num_classes < data.num_classes {
        bail!(
            "checkpoint has {} classes but dataset labels need {}",
            model.config.num_classes,
            data.num_classes
        );
    }
    let scores: Vec<ClipScores> = if threads <= 1 {
        let mut m = model.clone();
        data.eval
            .iter()
            .map(|v| eval_one(&mut m, v, weights))
            .collect::<Result<_>>()?
    } else {
        let chunk = data.eval.len().div_ceil(threads);
        let results: Vec<Result<Vec<ClipScores>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = data
                .eval
                .chunks(chunk)
                .map(|part| {
                    let mut m = model.clone();
                    scope.spawn(move || {
                        part.iter()
                            .map(|v| eval_one(&mut m, v, weights))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let mut merged = Vec::with_capacity(data.eval.len());
        for part in results {
            merged.extend(part?);
        }
        merged
    };
    Ok((accuracies_of(&scores), scores))
}

pub fn accuracies_of(scores: &[ClipScores]) -> BranchAccuracies {
    let n = scores.len().max(1) as f64;
    let count = |f: &dyn Fn(&ClipScores) -> usize| {
        scores.iter().filter(|s| f(s) == s.label).count() as f64 / n
    };
    BranchAccuracies {
        spatial: count(&|s| s.decisions.spatial),
        temporal: count(&|s| s.decisions.temporal),
        two_stream: count(&|s| s.decisions.two_stream),
        ttn: count(&|s| s.decisions.ttn),
        complete: count(&|s| s.decisions.complete),
        clips: scores.len(),
    }
}

/// Per-class accuracy of one branch, indexed by label.
pub fn per_class(scores: &[ClipScores], branch: &dyn Fn(&ClipScores) -> usize) -> Vec<(usize, f64)> {
    let max_label = scores.iter().map(|s| s.label).max().unwrap_or(0);
    let mut hits = vec![0usize; max_label + 1];
    let mut totals = vec![0usize; max_label + 1];
    for s in scores {
        totals[s.label] += 1;
        if branch(s) == s.label {
            hits[s.label] += 1;
        }
    }
    (0..=max_label)
        .filter(|&l| totals[l] > 0)
        .map(|l| (l, hits[l] as f64 / totals[l] as f64))
        .collect()
}

/// Write per-clip fused logits: `id<TAB>label<TAB>v1,v2,...`.
pub fn dump_scores(path: &Path, scores: &[ClipScores]) -> Result<()> {
    let mut text = String::new();
    for s in scores {
        let values: Vec<String> = s.fused_logits.iter().map(|v| format!("{v:.9e}")).collect();
        text.push_str(&format!("{}\t{}\t{}\n", s.id, s.label, values.join(",")));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<(String, usize, Vec<f64>)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let bad = || anyhow!("score file line {} malformed", i + 1);
        let id = parts.next().ok_or_else(bad)?.to_string();
        let label: usize = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let values: Vec<f64> = parts
            .next()
            .ok_or_else(bad)?
            .split(',')
            .map(|v| v.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        out.push((id, label, values));
    }
    Ok(out)
}

/// Average the current run's fused logits with a saved score file (matched by
/// clip id) and report the ensembled accuracy.
pub fn ensemble_accuracy(scores: &[ClipScores], other_path: &Path) -> Result<f64> {
    let other = read_scores(other_path)?;
    let mut correct = 0usize;
    for s in scores {
        let (_, _, other_logits) = other
            .iter()
            .find(|(id, _, _)| *id == s.id)
            .ok_or_else(|| anyhow!("score file has no entry for clip {}", s.id))?;
        if other_logits.len() != s.fused_logits.len() {
            bail!("score width mismatch for clip {}", s.id);
        }
        let avg: Vec<f64> = s
            .fused_logits
            .iter()
            .zip(other_logits)
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        if argmax(&avg) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / scores.len().max(1) as f64)
}
