//! Command-line surface: gen-data, train, eval, predict, bench,
//! convert-flow, ablate.

use crate::ablate::run_ablation;
use crate::bench::{bench_path, BenchPath, PathBench};
use crate::config::TrainConfig;
use crate::evaluate::{dump_scores, ensemble_accuracy, evaluate, BranchAccuracies};
use crate::report::Report;
use crate::trainer::{
    load_dataset, model_from_checkpoint, phase1_train_two_stream, phase2_train_ttn,
    phase3_joint_finetune, LoadedDataset, PhaseOutcome,
};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::time::Instant;
use tempora_core::io::checkpoint::load_checkpoint;
use tempora_core::io::{
    degrade_flow_to_mv, mv_to_dense, read_flo, read_index, read_mvq, write_flo, write_mvq,
    MotionScript, SyntheticConfig,
};
use tempora_core::pipeline::{predict, Model};

#[derive(Parser)]
#[command(
    name = "tempora",
    version,
    about = "Two-stream action recognition with ordered temporal transformation modeling"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Config assignments shared by the training-style subcommands. Values apply
/// on top of the config file; the generic --set accepts any config key.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Optional key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra assignments, e.g. --set lr=0.01 (repeatable, applied in order).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_name = "P1,P2,P3")]
    epochs: Option<String>,
    #[arg(long, value_name = "attention|adaptive")]
    fusion: Option<String>,
    #[arg(long, value_name = "flow|mv")]
    motion: Option<String>,
    #[arg(long, value_name = "C1,C2,...")]
    stage_channels: Option<String>,
    #[arg(long)]
    early_stop_acc: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Final score fusion weights w_s,w_t,w_ttn.
    #[arg(long, value_name = "WS,WT,WR")]
    weights: Option<String>,
}

impl Overrides {
    fn build(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for pair in &self.sets {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {pair:?}"))?;
            cfg.set(k, v)?;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = &self.epochs {
            cfg.set("epochs", v)?;
        }
        if let Some(v) = &self.fusion {
            cfg.set("fusion_mode", v)?;
        }
        if let Some(v) = &self.motion {
            cfg.set("motion", v)?;
        }
        if let Some(v) = &self.stage_channels {
            cfg.set("stage_channels", v)?;
        }
        if let Some(v) = self.early_stop_acc {
            cfg.early_stop_acc = Some(v);
        }
        if let Some(v) = self.threads {
            cfg.threads = v;
        }
        if let Some(v) = &self.weights {
            cfg.set("score_weights", v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic clip dataset with analytic motion ground truth.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Preset (orderpair | scenes | mixed) or comma-separated script
        /// names (hop-fwd, hop-rev, slide-checker, slide-disc, mover-top,
        /// mover-bottom).
        #[arg(long, default_value = "mixed")]
        classes: String,
        #[arg(long, default_value_t = 100)]
        clips_train: usize,
        #[arg(long, default_value_t = 50)]
        clips_eval: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 21)]
        frames: usize,
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the progressive trainer.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// 1, 2, 3 or all.
        #[arg(long, default_value = "all")]
        phase: String,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on the eval split with per-branch accuracies.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_name = "WS,WT,WR")]
        weights: Option<String>,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write per-clip fused logits to this file.
        #[arg(long)]
        dump_scores: Option<PathBuf>,
        /// Average fused logits with a saved score file and report the
        /// ensembled accuracy.
        #[arg(long)]
        ensemble_with: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Class distribution for a single clip.
    Predict {
        #[arg(long)]
        data: PathBuf,
        /// Clip path relative to the dataset root (as in the index files).
        #[arg(long)]
        clip: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_name = "WS,WT,WR")]
        weights: Option<String>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Throughput harness over the flow and block-MV ingestion paths.
    Bench {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 50)]
        iters: usize,
        #[arg(long, default_value_t = 1)]
        runs: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Convert between dense flow and quantized block motion vectors.
    ConvertFlow {
        /// A .flo/.mvq file, or a dataset directory (converts every .flo).
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_name = "mvq|flo")]
        to: String,
        #[arg(long, default_value_t = 16)]
        block: usize,
        #[arg(long, default_value_t = 0.25)]
        quant: f32,
        /// Output path (single-file mode only; defaults to the input with
        /// the new extension).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train and evaluate the fusion-mode / motion-quality grid.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also train and evaluate the block-MV motion variant.
        #[arg(long, default_value_t = false)]
        with_mv: bool,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

pub fn cli_main<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.exit_code() == 0 { 0 } else { 2 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn parse_classes(spec: &str) -> Result<Vec<MotionScript>> {
    if let Some(preset) = MotionScript::preset(spec) {
        return Ok(preset);
    }
    spec.split(',')
        .map(|name| {
            MotionScript::parse(name.trim())
                .ok_or_else(|| anyhow!("unknown class script {name:?}"))
        })
        .collect()
}

fn parse_weights(spec: &Option<String>) -> Result<Option<(f64, f64, f64)>> {
    match spec {
        None => Ok(None),
        Some(s) => {
            let parts: Vec<f64> = s
                .split(',')
                .map(|p| p.trim().parse().map_err(|_| anyhow!("bad weight {p:?}")))
                .collect::<Result<_>>()?;
            if parts.len() != 3 {
                bail!("weights expect three comma-separated values");
            }
            Ok(Some((parts[0], parts[1], parts[2])))
        }
    }
}

fn load_model(ckpt_path: &Path) -> Result<(Model<f32>, TrainConfig)> {
    let ckpt = load_checkpoint(ckpt_path)
        .with_context(|| format!("loading checkpoint {}", ckpt_path.display()))?;
    model_from_checkpoint(&ckpt)
}

fn emit(report: &Report, path: &Option<PathBuf>) -> Result<()> {
    report.print();
    if let Some(p) = path {
        report.write(p)?;
    }
    Ok(())
}

fn acc_block(report: &mut Report, prefix: &str, acc: &BranchAccuracies) {
    report.set_acc(format!("{prefix}.spatial"), acc.spatial);
    report.set_acc(format!("{prefix}.temporal"), acc.temporal);
    report.set_acc(format!("{prefix}.two_stream"), acc.two_stream);
    report.set_acc(format!("{prefix}.ttn"), acc.ttn);
    report.set_acc(format!("{prefix}.complete"), acc.complete);
    report.set(format!("{prefix}.clips"), acc.clips);
}

fn per_class_block(report: &mut Report, scores: &[crate::evaluate::ClipScores]) {
    use crate::evaluate::per_class;
    type Pick = fn(&crate::evaluate::ClipScores) -> usize;
    let branches: [(&str, Pick); 5] = [
        ("spatial", |s| s.decisions.spatial),
        ("temporal", |s| s.decisions.temporal),
        ("two_stream", |s| s.decisions.two_stream),
        ("ttn", |s| s.decisions.ttn),
        ("complete", |s| s.decisions.complete),
    ];
    for (name, pick) in branches {
        let rows = per_class(scores, &pick);
        let text: Vec<String> = rows
            .iter()
            .map(|(l, a)| format!("{l}:{a:.2}"))
            .collect();
        report.set(format!("per_class.{name}"), text.join(" "));
    }
}

fn trace_block(report: &mut Report, outcome: &PhaseOutcome) {
    for (name, trace) in &outcome.traces {
        for (e, stats) in trace.epochs.iter().enumerate() {
            report.set(
                format!("train.{name}.epoch{e:03}"),
                format!("loss={:.6} acc={:.4}", stats.loss, stats.accuracy),
            );
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData {
            out,
            classes,
            clips_train,
            clips_eval,
            size,
            frames,
            noise,
            seed,
        } => {
            let config = SyntheticConfig {
                image_size: size,
                frames_per_clip: frames,
                classes: parse_classes(&classes)?,
                clips_per_class_train: clips_train,
                clips_per_class_eval: clips_eval,
                noise,
                seed,
            };
            tempora_core::io::gen_synthetic(&config, &out)?;
            println!("wrote dataset to {}", out.display());
            print!("{}", config.echo());
            Ok(())
        }

        Cmd::Train {
            data,
            out,
            phase,
            report,
            overrides,
        } => {
            let cfg = overrides.build()?;
            let dataset = load_dataset(&data, cfg.motion_kind())?;
            std::fs::create_dir_all(&out)?;
            let started = Instant::now();
            let mut rep = Report::new();
            rep.set("command", "train");
            rep.set("phase", &phase);
            for line in cfg.echo(dataset.num_classes).lines() {
                if let Some((k, v)) = line.split_once(" = ") {
                    rep.set(format!("config.{k}"), v);
                }
            }

            let mut model = match phase.as_str() {
                "1" | "all" => {
                    let (model, outcome) = phase1_train_two_stream(&cfg, &dataset, &out)?;
                    trace_block(&mut rep, &outcome);
                    model
                }
                "2" | "3" => {
                    let prev = if phase == "2" { "phase1.ckpt" } else { "phase2.ckpt" };
                    let path = out.join(prev);
                    if !path.exists() {
                        bail!(
                            "{} not found in {} -- run the earlier phase first",
                            prev,
                            out.display()
                        );
                    }
                    let (model, _) = load_model(&path)?;
                    model
                }
                other => bail!("unknown phase {other:?} (expected 1, 2, 3 or all)"),
            };

            if phase == "2" || phase == "all" {
                let outcome = phase2_train_ttn(&cfg, &dataset, &mut model, &out)?;
                trace_block(&mut rep, &outcome);
            }
            if phase == "3" || phase == "all" {
                let outcome = phase3_joint_finetune(&cfg, &dataset, &mut model, &out)?;
                trace_block(&mut rep, &outcome);
            }

            let (acc, _) = evaluate(&model, &dataset, cfg.score_weights, cfg.threads)?;
            acc_block(&mut rep, "eval", &acc);
            emit(&rep, &report)?;
            println!("wall_clock_s = {:.1}", started.elapsed().as_secs_f64());
            Ok(())
        }

        Cmd::Eval {
            data,
            ckpt,
            weights,
            report,
            dump_scores: dump,
            ensemble_with,
            threads,
        } => {
            let (model, cfg) = load_model(&ckpt)?;
            let dataset = load_dataset(&data, cfg.motion_kind())?;
            let w = parse_weights(&weights)?.unwrap_or(cfg.score_weights);
            let (acc, scores) = evaluate(&model, &dataset, w, threads.max(1))?;
            let mut rep = Report::new();
            rep.set("command", "eval");
            rep.set("checkpoint", ckpt.display());
            rep.set("weights", format!("{},{},{}", w.0, w.1, w.2));
            acc_block(&mut rep, "eval", &acc);
            per_class_block(&mut rep, &scores);
            if let Some(p) = &dump {
                dump_scores(p, &scores)?;
                rep.set("scores_dumped", p.display());
            }
            if let Some(p) = &ensemble_with {
                rep.set_acc("eval.ensemble", ensemble_accuracy(&scores, p)?);
            }
            emit(&rep, &report)
        }

        Cmd::Predict {
            data,
            clip,
            ckpt,
            weights,
            report,
        } => {
            let (mut model, cfg) = load_model(&ckpt)?;
            let meta = find_clip(&data, &clip)?;
            let video = tempora_core::io::load_clip(&data, &meta, cfg.motion_kind())?;
            let w = parse_weights(&weights)?.unwrap_or(cfg.score_weights);
            let (dist, bundle) = predict(&mut model, &video, w)?;
            let mut rep = Report::new();
            rep.set("command", "predict");
            rep.set("clip", &clip);
            rep.set("label", meta.label);
            rep.set("predicted", tempora_core::pipeline::argmax(&dist));
            rep.set(
                "distribution",
                dist.iter()
                    .map(|v| format!("{v:.6}"))
                    .collect::<Vec<_>>()
                    .join(","),
            );
            rep.set("ttn_rows", bundle.ttn.len());
            emit(&rep, &report)
        }

        Cmd::Bench {
            data,
            ckpt,
            warmup,
            iters,
            runs,
            report,
        } => {
            let (mut model, _) = load_model(&ckpt)?;
            let clips = read_index(&data.join("eval.idx"))
                .or_else(|_| read_index(&data.join("train.idx")))?;
            let mut rep = Report::new();
            rep.set("command", "bench");
            rep.set("warmup", warmup);
            rep.set("iters", iters);
            rep.set("runs", runs);
            let flow = bench_path(&mut model, &data, &clips, BenchPath::Flow, warmup, iters, runs)?;
            let mv = bench_path(&mut model, &data, &clips, BenchPath::Mv, warmup, iters, runs)?;
            for b in [&flow, &mv] {
                bench_block(&mut rep, b, model.config.k);
            }
            rep.set(
                "io_time_mv_le_flow",
                (mv.stage.io <= flow.stage.io).to_string(),
            );
            rep.set(
                "motion_bytes_mv_le_flow",
                (mv.motion_bytes <= flow.motion_bytes).to_string(),
            );
            emit(&rep, &report)
        }

        Cmd::ConvertFlow {
            input,
            to,
            block,
            quant,
            output,
        } => {
            let count = convert_flow(&input, &to, block, quant, output.as_deref())?;
            println!("converted {count} file(s)");
            Ok(())
        }

        Cmd::Ablate {
            data,
            out,
            with_mv,
            report,
            overrides,
        } => {
            let cfg = overrides.build()?;
            std::fs::create_dir_all(&out)?;
            let (rows, mut rep) = run_ablation(&cfg, &data, &out, with_mv)?;
            rep.set("command", "ablate");
            for row in &rows {
                println!(
                    "{:<22} spatial {:.3}  temporal {:.3}  two-stream {:.3}  ttn {:.3}  complete {:.3}",
                    row.name,
                    row.acc.spatial,
                    row.acc.temporal,
                    row.acc.two_stream,
                    row.acc.ttn,
                    row.acc.complete
                );
            }
            emit(&rep, &report)
        }
    }
}

fn bench_block(report: &mut Report, b: &PathBench, k: usize) {
    let p = b.path.label();
    for (i, run) in b.runs.iter().enumerate() {
        report.set(
            format!("{p}.run{i}.videos_per_sec"),
            format!("{:.2}", run.videos_per_sec),
        );
        report.set(
            format!("{p}.run{i}.frames_per_sec"),
            format!("{:.2}", run.frames_per_sec),
        );
        report.set(
            format!("{p}.run{i}.iter_ms"),
            format!(
                "mean={:.3} min={:.3} max={:.3}",
                run.iter_ms_mean, run.iter_ms_min, run.iter_ms_max
            ),
        );
    }
    report.set(format!("{p}.videos_per_sec_mean"), format!("{:.2}", b.mean_vps()));
    report.set(
        format!("{p}.frames_per_sec_mean"),
        format!("{:.2}", b.mean_vps() * k as f64),
    );
    report.set(format!("{p}.cov"), format!("{:.4}", b.cov()));
    let total = (b.stage.io
        + b.stage.assemble
        + b.stage.spatial
        + b.stage.temporal
        + b.stage.fusion
        + b.stage.ttn
        + b.stage.consensus)
        .max(1);
    for (name, ns) in [
        ("io", b.stage.io),
        ("assemble", b.stage.assemble),
        ("spatial", b.stage.spatial),
        ("temporal", b.stage.temporal),
        ("fusion", b.stage.fusion),
        ("ttn", b.stage.ttn),
        ("consensus", b.stage.consensus),
    ] {
        report.set(
            format!("{p}.stage.{name}"),
            format!("{:.3}ms ({:.1}%)", ns as f64 / 1e6, 100.0 * ns as f64 / total as f64),
        );
    }
    report.set(format!("{p}.motion_bytes"), b.motion_bytes);
}

fn find_clip(data: &Path, rel: &str) -> Result<tempora_core::io::ClipMeta> {
    for idx in ["eval.idx", "train.idx"] {
        let path = data.join(idx);
        if path.exists() {
            if let Some(meta) = read_index(&path)?.into_iter().find(|m| m.rel_path == rel) {
                return Ok(meta);
            }
        }
    }
    bail!("clip {rel:?} not found in eval.idx or train.idx under {}", data.display())
}

/// flo <-> mvq conversion; directories convert every .flo to an .mvq sibling.
fn convert_flow(
    input: &Path,
    to: &str,
    block: usize,
    quant: f32,
    output: Option<&Path>,
) -> Result<usize> {
    if input.is_dir() {
        if to != "mvq" {
            bail!("directory mode only converts to mvq");
        }
        let mut files = Vec::new();
        collect_flo(input, &mut files)?;
        files.sort();
        for path in &files {
            let dense = read_flo(path)?;
            let mv = degrade_flow_to_mv(&dense, block, quant);
            write_mvq(&path.with_extension("mvq"), &mv)?;
        }
        return Ok(files.len());
    }
    match to {
        "mvq" => {
            let dense = read_flo(input)?;
            let mv = degrade_flow_to_mv(&dense, block, quant);
            let out = output
                .map(Path::to_path_buf)
                .unwrap_or_else(|| input.with_extension("mvq"));
            write_mvq(&out, &mv)?;
        }
        "flo" => {
            let mv = read_mvq(input)?;
            let dense = mv_to_dense(&mv);
            let out = output
                .map(Path::to_path_buf)
                .unwrap_or_else(|| input.with_extension("flo"));
            write_flo(&out, &dense)?;
        }
        other => bail!("unknown target format {other:?} (expected mvq or flo)"),
    }
    Ok(1)
}

fn collect_flo(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_flo(&path, out)?;
        } else if path.extension().map(|e| e == "flo").unwrap_or(false) {
            out.push(path);
        }
    }
    Ok(())
}

/// Re-exported for tests: a loaded dataset handle.
pub fn open_dataset(root: &Path, cfg: &TrainConfig) -> Result<LoadedDataset> {
    load_dataset(root, cfg.motion_kind())
}
