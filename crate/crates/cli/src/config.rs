//! Training configuration: defaults, the line-oriented `key = value` config
//! file, and flag merging (flags override the file).

use anyhow::{anyhow, bail, Context, Result};
use std::path::Path;
use tempora_core::fusion::FusionMode;
use tempora_core::io::MotionKind;
use tempora_core::pipeline::ModelConfig;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub k: usize,
    pub stack: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Max epochs per phase (two-stream, transformation, joint).
    pub epochs: (usize, usize, usize),
    /// Epoch interval per phase after which lr steps down by 10x.
    pub lr_decay: (usize, usize, usize),
    /// Joint finetune runs at this fraction of the base lr.
    pub joint_lr_scale: f64,
    pub dropout_spatial: f64,
    pub dropout_temporal: f64,
    pub dropout_ttn: f64,
    pub fusion_mode: FusionMode,
    pub alpha_init: (f64, f64, f64),
    pub alpha_frozen: bool,
    pub fused_stages: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub motion: String, // "flow" | "mv"
    pub block_size: usize,
    pub quant_step: f32,
    pub hflip: bool,
    pub crop_jitter: usize,
    pub score_weights: (f64, f64, f64),
    pub seed: u64,
    /// Stop a phase early once train accuracy stays at or above this for two
    /// consecutive epochs.
    pub early_stop_acc: Option<f64>,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let stage_channels = vec![16, 32, 64];
        Self {
            k: 7,
            stack: 2,
            batch_size: 64,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: (30, 50, 20),
            lr_decay: (20, 33, 13),
            joint_lr_scale: 0.1,
            dropout_spatial: 0.8,
            dropout_temporal: 0.7,
            dropout_ttn: 0.8,
            fusion_mode: FusionMode::Attention,
            alpha_init: (1.0, 0.0, 1.0),
            alpha_frozen: false,
            fused_stages: ModelConfig::default_fused(stage_channels.len()),
            stage_channels,
            blocks_per_stage: 2,
            motion: "flow".into(),
            block_size: 16,
            quant_step: 0.25,
            hflip: true,
            crop_jitter: 2,
            score_weights: (1.0, 1.0, 1.0),
            seed: 0,
            early_stop_acc: None,
            threads: 1,
        }
    }
}

fn parse_triple<T: std::str::FromStr>(v: &str) -> Result<(T, T, T)> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        bail!("expected three comma-separated values, got {v:?}");
    }
    let mut it = parts.iter().map(|p| {
        p.parse::<T>()
            .map_err(|_| anyhow!("cannot parse {p:?} in {v:?}"))
    });
    Ok((
        it.next().unwrap()?,
        it.next().unwrap()?,
        it.next().unwrap()?,
    ))
}

fn parse_list(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| anyhow!("cannot parse {p:?} in {v:?}"))
        })
        .collect()
}

impl TrainConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "k" => self.k = v.parse()?,
            "stack" => self.stack = v.parse()?,
            "batch_size" => self.batch_size = v.parse()?,
            "lr" => self.lr = v.parse()?,
            "momentum" => self.momentum = v.parse()?,
            "weight_decay" => self.weight_decay = v.parse()?,
            "epochs" => self.epochs = parse_triple(v)?,
            "lr_decay" => self.lr_decay = parse_triple(v)?,
            "joint_lr_scale" => self.joint_lr_scale = v.parse()?,
            "dropout_spatial" => self.dropout_spatial = v.parse()?,
            "dropout_temporal" => self.dropout_temporal = v.parse()?,
            "dropout_ttn" => self.dropout_ttn = v.parse()?,
            "fusion_mode" => self.fusion_mode = v.parse().map_err(|e: String| anyhow!(e))?,
            "alpha_init" => self.alpha_init = parse_triple(v)?,
            "alpha_frozen" => self.alpha_frozen = v.parse()?,
            "fused_stages" => self.fused_stages = parse_list(v)?,
            "stage_channels" => {
                self.stage_channels = parse_list(v)?;
                self.fused_stages = ModelConfig::default_fused(self.stage_channels.len());
            }
            "blocks_per_stage" => self.blocks_per_stage = v.parse()?,
            "motion" => {
                if v != "flow" && v != "mv" {
                    bail!("motion must be flow or mv, got {v:?}");
                }
                self.motion = v.to_string();
            }
            "block_size" => self.block_size = v.parse()?,
            "quant_step" => self.quant_step = v.parse()?,
            "hflip" => self.hflip = v.parse()?,
            "crop_jitter" => self.crop_jitter = v.parse()?,
            "score_weights" => self.score_weights = parse_triple(v)?,
            "seed" => self.seed = v.parse()?,
            "early_stop_acc" => {
                self.early_stop_acc = if v == "none" { None } else { Some(v.parse()?) }
            }
            "threads" => self.threads = v.parse()?,
            "num_classes" => {} // informational echo, set from the dataset
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    /// Load assignments from a `key = value` file; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value, got {raw:?}", i + 1))?;
            self.set(key, value)
                .with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            bail!("k must be >= 2");
        }
        if self.stack < 1 {
            bail!("stack must be >= 1");
        }
        if self.lr <= 0.0 || self.batch_size == 0 {
            bail!("lr and batch_size must be positive");
        }
        if self.stage_channels.len() < 2 {
            bail!("need at least two backbone stages");
        }
        let l = self.stage_channels.len();
        if self.fused_stages.is_empty()
            || self.fused_stages.iter().any(|&s| s < 1 || s > l)
            || *self.fused_stages.iter().min().unwrap() >= l
        {
            bail!("fused_stages must name stages in 1..={l} with room above the first");
        }
        for (name, p) in [
            ("dropout_spatial", self.dropout_spatial),
            ("dropout_temporal", self.dropout_temporal),
            ("dropout_ttn", self.dropout_ttn),
        ] {
            if !(0.0..1.0).contains(&p) {
                bail!("{name} must lie in [0, 1), got {p}");
            }
        }
        Ok(())
    }

    /// `key = value` echo of every field, embedded in checkpoints/reports.
    /// `num_classes` rides along so a model can be rebuilt from the echo.
    pub fn echo(&self, num_classes: usize) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        let mut push = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        push("num_classes", num_classes.to_string());
        push("k", self.k.to_string());
        push("stack", self.stack.to_string());
        push("batch_size", self.batch_size.to_string());
        push("lr", self.lr.to_string());
        push("momentum", self.momentum.to_string());
        push("weight_decay", self.weight_decay.to_string());
        push(
            "epochs",
            format!("{},{},{}", self.epochs.0, self.epochs.1, self.epochs.2),
        );
        push(
            "lr_decay",
            format!("{},{},{}", self.lr_decay.0, self.lr_decay.1, self.lr_decay.2),
        );
        push("joint_lr_scale", self.joint_lr_scale.to_string());
        push("dropout_spatial", self.dropout_spatial.to_string());
        push("dropout_temporal", self.dropout_temporal.to_string());
        push("dropout_ttn", self.dropout_ttn.to_string());
        push("fusion_mode", self.fusion_mode.to_string());
        push(
            "alpha_init",
            format!(
                "{},{},{}",
                self.alpha_init.0, self.alpha_init.1, self.alpha_init.2
            ),
        );
        push("alpha_frozen", self.alpha_frozen.to_string());
        push("fused_stages", list(&self.fused_stages));
        push("stage_channels", list(&self.stage_channels));
        push("blocks_per_stage", self.blocks_per_stage.to_string());
        push("motion", self.motion.clone());
        push("block_size", self.block_size.to_string());
        push("quant_step", self.quant_step.to_string());
        push("hflip", self.hflip.to_string());
        push("crop_jitter", self.crop_jitter.to_string());
        push(
            "score_weights",
            format!(
                "{},{},{}",
                self.score_weights.0, self.score_weights.1, self.score_weights.2
            ),
        );
        push("seed", self.seed.to_string());
        push(
            "early_stop_acc",
            self.early_stop_acc
                .map(|v| v.to_string())
                .unwrap_or_else(|| "none".into()),
        );
        push("threads", self.threads.to_string());
        s
    }

    /// Rebuild a config from an echo (used when loading checkpoints).
    /// Returns the config and the echoed class count.
    pub fn from_echo(echo: &str) -> Result<(Self, usize)> {
        let mut cfg = TrainConfig::default();
        let mut classes = 0usize;
        for line in echo.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("bad echo line {line:?}"))?;
            if key.trim() == "num_classes" {
                classes = value.trim().parse()?;
            } else {
                cfg.set(key, value)?;
            }
        }
        if classes == 0 {
            bail!("checkpoint echo lacks num_classes");
        }
        Ok((cfg, classes))
    }

    pub fn motion_kind(&self) -> MotionKind {
        if self.motion == "mv" {
            MotionKind::Mv {
                block_size: self.block_size,
                quant_step: self.quant_step,
            }
        } else {
            MotionKind::Flow
        }
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            num_classes,
            k: self.k,
            stack: self.stack,
            stage_channels: self.stage_channels.clone(),
            blocks_per_stage: self.blocks_per_stage,
            fusion_mode: self.fusion_mode,
            alpha_init: self.alpha_init,
            fused_stages: self.fused_stages.clone(),
            dropout_spatial: self.dropout_spatial,
            dropout_temporal: self.dropout_temporal,
            dropout_ttn: self.dropout_ttn,
            score_weights: self.score_weights,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_settings() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.k, 7);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.dropout_spatial, 0.8);
        assert_eq!(cfg.dropout_temporal, 0.7);
        assert_eq!(cfg.dropout_ttn, 0.8);
        assert_eq!(cfg.fused_stages, vec![2, 3]);
        cfg.validate().unwrap();
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.k = 5;
        cfg.stage_channels = vec![8, 16, 32];
        cfg.fusion_mode = FusionMode::Adaptive;
        cfg.early_stop_acc = Some(0.98);
        let echo = cfg.echo(6);
        let (back, classes) = TrainConfig::from_echo(&echo).unwrap();
        assert_eq!(classes, 6);
        assert_eq!(back.k, 5);
        assert_eq!(back.stage_channels, vec![8, 16, 32]);
        assert_eq!(back.fusion_mode, FusionMode::Adaptive);
        assert_eq!(back.early_stop_acc, Some(0.98));
    }

    #[test]
    fn file_parsing_with_comments_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.txt");
        std::fs::write(&path, "# comment\nk = 5\nbatch_size = 8 # trailing\n").unwrap();
        let mut cfg = TrainConfig::default();
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.k, 5);
        assert_eq!(cfg.batch_size, 8);

        std::fs::write(&path, "nonsense = 1\n").unwrap();
        assert!(cfg.apply_file(&path).is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = TrainConfig::default();
        cfg.k = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.dropout_ttn = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.fused_stages = vec![9];
        assert!(cfg.validate().is_err());
    }
}
