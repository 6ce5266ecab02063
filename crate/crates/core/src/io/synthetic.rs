//! Synthetic moving-shape clips with analytic ground-truth motion.
//!
//! Each class is a motion script. The generator knows every displacement
//! exactly, so the emitted flow files are ground truth rather than estimates.
//! Displacements larger than [`MATCH_RADIUS`] are recorded as zero motion,
//! mirroring the bounded search range of real flow estimators and codec
//! motion search: a teleporting shape produces no usable motion signal.
//!
//! The script set is built so the benchmark probes specific pathways:
//!
//! - [`MotionScript::RasterHop`]: a dot teleports through a fixed grid in
//!   scan order (columns top-to-bottom). The reversed class is the exact
//!   frame reversal of its forward partner, so the two share frame sets and
//!   differ only in temporal order; recorded motion is zero for both.
//! - [`MotionScript::Slide`]: a textured shape translating at constant
//!   velocity; classes differ in texture, so appearance alone solves them.
//! - [`MotionScript::MoverRow`]: two identical dots stacked vertically
//!   inside the same 16px block row; one of them drifts and bounces. Which
//!   row moves is invisible in any single frame, crisp in dense flow, and
//!   washed out by 16px block averaging.

use super::{flo, rten, DenseFlow};
use crate::error::{CoreError, Result};
use crate::io::dataset::{write_index, ClipMeta};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::path::Path;

/// Displacements beyond this many pixels per frame yield zero recorded
/// motion.
pub const MATCH_RADIUS: f32 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MotionScript {
    RasterHop { reverse: bool },
    Slide { vx: f32, vy: f32, disc: bool },
    MoverRow { mover_top: bool },
}

impl MotionScript {
    pub fn name(&self) -> String {
        match self {
            MotionScript::RasterHop { reverse: false } => "hop-fwd".into(),
            MotionScript::RasterHop { reverse: true } => "hop-rev".into(),
            MotionScript::Slide { disc: false, .. } => "slide-checker".into(),
            MotionScript::Slide { disc: true, .. } => "slide-disc".into(),
            MotionScript::MoverRow { mover_top: true } => "mover-top".into(),
            MotionScript::MoverRow { mover_top: false } => "mover-bottom".into(),
        }
    }

    pub fn parse(name: &str) -> Option<MotionScript> {
        match name {
            "hop-fwd" => Some(MotionScript::RasterHop { reverse: false }),
            "hop-rev" => Some(MotionScript::RasterHop { reverse: true }),
            "slide-checker" => Some(MotionScript::Slide {
                vx: 2.0,
                vy: 0.0,
                disc: false,
            }),
            "slide-disc" => Some(MotionScript::Slide {
                vx: 0.0,
                vy: 2.0,
                disc: true,
            }),
            "mover-top" => Some(MotionScript::MoverRow { mover_top: true }),
            "mover-bottom" => Some(MotionScript::MoverRow { mover_top: false }),
            _ => None,
        }
    }

    /// Named class lists: `orderpair`, `scenes`, `mixed`.
    pub fn preset(name: &str) -> Option<Vec<MotionScript>> {
        let names: &[&str] = match name {
            "orderpair" => &["hop-fwd", "hop-rev"],
            "scenes" => &["slide-checker", "slide-disc"],
            "mixed" => &[
                "hop-fwd",
                "hop-rev",
                "slide-checker",
                "slide-disc",
                "mover-top",
                "mover-bottom",
            ],
            _ => return None,
        };
        Some(names.iter().map(|n| MotionScript::parse(n).unwrap()).collect())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub frames_per_clip: usize,
    pub classes: Vec<MotionScript>,
    pub clips_per_class_train: usize,
    pub clips_per_class_eval: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: &str| {
            Err(CoreError::BadSyntheticConfig {
                reason: reason.to_string(),
            })
        };
        if self.classes.len() < 2 {
            return fail("need at least 2 classes");
        }
        if self.image_size < 16 {
            return fail("image_size must be >= 16");
        }
        if self.frames_per_clip < 2 {
            return fail("frames_per_clip must be >= 2");
        }
        if self.clips_per_class_train == 0 && self.clips_per_class_eval == 0 {
            return fail("no clips requested");
        }
        if self.noise < 0.0 {
            return fail("noise must be non-negative");
        }
        let has_fwd = self
            .classes
            .iter()
            .any(|s| matches!(s, MotionScript::RasterHop { reverse: false }));
        for s in &self.classes {
            if matches!(s, MotionScript::RasterHop { reverse: true }) && !has_fwd {
                return fail("hop-rev requires its forward partner hop-fwd");
            }
        }
        Ok(())
    }

    pub fn echo(&self) -> String {
        let mut s = String::new();
        let names: Vec<String> = self.classes.iter().map(|c| c.name()).collect();
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "frames_per_clip = {}", self.frames_per_clip);
        let _ = writeln!(s, "classes = {}", names.join(","));
        let _ = writeln!(s, "clips_per_class_train = {}", self.clips_per_class_train);
        let _ = writeln!(s, "clips_per_class_eval = {}", self.clips_per_class_eval);
        let _ = writeln!(s, "noise = {}", self.noise);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}

const BG: [f32; 3] = [0.12, 0.12, 0.14];

struct Frame {
    size: usize,
    data: Vec<f32>, // [3, size, size]
}

impl Frame {
    fn background(size: usize) -> Self {
        let mut data = vec![0.0; 3 * size * size];
        for ch in 0..3 {
            for p in data[ch * size * size..(ch + 1) * size * size].iter_mut() {
                *p = BG[ch];
            }
        }
        Self { size, data }
    }

    /// Alpha-over paint with per-pixel coverage.
    fn paint(&mut self, coverage: &dyn Fn(f32, f32) -> f32, color: [f32; 3]) {
        let s = self.size;
        for y in 0..s {
            for x in 0..s {
                let cov = coverage(x as f32, y as f32).clamp(0.0, 1.0);
                if cov > 0.0 {
                    for ch in 0..3 {
                        let p = &mut self.data[ch * s * s + y * s + x];
                        *p = *p * (1.0 - cov) + color[ch] * cov;
                    }
                }
            }
        }
    }

    /// Paint with a position-dependent color (textures).
    fn paint_tex(
        &mut self,
        coverage: &dyn Fn(f32, f32) -> f32,
        color: &dyn Fn(f32, f32) -> [f32; 3],
    ) {
        let s = self.size;
        for y in 0..s {
            for x in 0..s {
                let cov = coverage(x as f32, y as f32).clamp(0.0, 1.0);
                if cov > 0.0 {
                    let c = color(x as f32, y as f32);
                    for ch in 0..3 {
                        let p = &mut self.data[ch * s * s + y * s + x];
                        *p = *p * (1.0 - cov) + c[ch] * cov;
                    }
                }
            }
        }
    }

    fn add_noise(&mut self, sigma: f64, rng: &mut SplitMix64) {
        if sigma == 0.0 {
            return;
        }
        for p in self.data.iter_mut() {
            *p = (*p + (sigma * rng.normal()) as f32).clamp(0.0, 1.0);
        }
    }

    fn into_tensor(self) -> Tensor<f32> {
        Tensor::from_vec(vec![3, self.size, self.size], self.data).expect("frame layout")
    }
}

fn stamp_motion(flow: &mut DenseFlow, coverage: &dyn Fn(f32, f32) -> f32, dx: f32, dy: f32) {
    if dx.hypot(dy) > MATCH_RADIUS {
        return;
    }
    for y in 0..flow.height {
        for x in 0..flow.width {
            if coverage(x as f32, y as f32) > 0.5 {
                flow.set(x, y, dx, dy);
            }
        }
    }
}

fn disc_cov(cx: f32, cy: f32, r: f32) -> impl Fn(f32, f32) -> f32 {
    move |x, y| r + 0.5 - ((x - cx) * (x - cx) + (y - cy) * (y - cy)).sqrt()
}

/// Square coverage with wrap-around copies so sliding shapes reenter.
fn square_cov_wrap(cx: f32, cy: f32, half: f32, size: f32) -> impl Fn(f32, f32) -> f32 {
    move |x, y| {
        let mut best = 0.0f32;
        for oy in [-size, 0.0, size] {
            for ox in [-size, 0.0, size] {
                let dx = (x - cx - ox).abs();
                let dy = (y - cy - oy).abs();
                let c = (half + 0.5 - dx).min(half + 0.5 - dy);
                best = best.max(c);
            }
        }
        best
    }
}

fn disc_cov_wrap(cx: f32, cy: f32, r: f32, size: f32) -> impl Fn(f32, f32) -> f32 {
    move |x, y| {
        let mut best = f32::MIN;
        for oy in [-size, 0.0, size] {
            for ox in [-size, 0.0, size] {
                let d = (x - cx - ox).hypot(y - cy - oy);
                best = best.max(r + 0.5 - d);
            }
        }
        best
    }
}

/// Per-clip sampled layout plus renderers for every frame.
enum ClipPlan {
    Hop {
        origin: (f32, f32),
        spacing: (f32, f32),
        rows: usize,
        radius: f32,
    },
    Slide {
        start: (f32, f32),
        v: (f32, f32),
        half: f32,
        disc: bool,
    },
    Mover {
        mover_top: bool,
        y_top: f32,
        y_bot: f32,
        static_x: f32,
        /// Bounce trajectory of the mover, precomputed per frame (one extra
        /// frame so the final motion map is defined).
        xs: Vec<f32>,
        radius: f32,
    },
}

impl ClipPlan {
    fn sample(script: &MotionScript, size: usize, frames: usize, rng: &mut SplitMix64) -> Self {
        let s = size as f32 / 32.0;
        match script {
            MotionScript::RasterHop { .. } => {
                // Tall columns: most adjacent-segment pairs then differ by a
                // plain vertical offset, so temporal order shows up as the
                // sign of that offset. Rung spacing stays above the match
                // radius so every hop records zero motion.
                let rows = frames.min(7);
                let margin = 6.0 * s;
                let span = size as f32 - 2.0 * margin;
                let cols = frames.div_ceil(rows);
                let spacing_y = span / (rows.max(2) - 1) as f32;
                let spacing_x = if cols > 1 {
                    span / (cols - 1) as f32
                } else {
                    0.0
                };
                let origin = (
                    margin + rng.uniform(-1.5, 1.5) as f32 * s,
                    margin + rng.uniform(-1.5, 1.5) as f32 * s,
                );
                ClipPlan::Hop {
                    origin,
                    spacing: (spacing_x, spacing_y),
                    rows,
                    radius: 2.2 * s,
                }
            }
            MotionScript::Slide { vx, vy, disc } => {
                let start = (
                    rng.uniform(0.0, size as f64) as f32,
                    rng.uniform(0.0, size as f64) as f32,
                );
                let half = (if *disc { 4.5 } else { 5.0 } + rng.uniform(-0.5, 0.5)) as f32 * s;
                ClipPlan::Slide {
                    start,
                    v: (*vx * s, *vy * s),
                    half,
                    disc: *disc,
                }
            }
            MotionScript::MoverRow { mover_top } => {
                let y_top = (5.5 + rng.uniform(-1.0, 1.0)) as f32 * s;
                let y_bot = (11.5 + rng.uniform(-1.0, 1.0)) as f32 * s;
                let static_x = rng.uniform(6.0, 26.0) as f32 * s;
                let mut x = rng.uniform(6.0, 26.0) as f32 * s;
                let mut v = rng.uniform(0.9, 1.3) as f32 * s;
                if rng.chance(0.5) {
                    v = -v;
                }
                let (lo, hi) = (4.5 * s, 27.5 * s);
                let mut xs = Vec::with_capacity(frames + 1);
                for _ in 0..=frames {
                    xs.push(x);
                    x += v;
                    if x > hi {
                        x = 2.0 * hi - x;
                        v = -v;
                    } else if x < lo {
                        x = 2.0 * lo - x;
                        v = -v;
                    }
                }
                ClipPlan::Mover {
                    mover_top: *mover_top,
                    y_top,
                    y_bot,
                    static_x,
                    xs,
                    radius: 2.2 * s,
                }
            }
        }
    }

    fn hop_center(&self, t: usize) -> (f32, f32) {
        match self {
            ClipPlan::Hop {
                origin,
                spacing,
                rows,
                ..
            } => {
                let col = t / rows;
                let row = t % rows;
                (
                    origin.0 + col as f32 * spacing.0,
                    origin.1 + row as f32 * spacing.1,
                )
            }
            _ => unreachable!(),
        }
    }

    fn render(&self, t: usize, size: usize, noise: f64, rng: &mut SplitMix64) -> (Tensor<f32>, DenseFlow) {
        let mut frame = Frame::background(size);
        let mut flow = DenseFlow::zeros(size, size);
        let sizef = size as f32;
        match self {
            ClipPlan::Hop { radius, .. } => {
                let (cx, cy) = self.hop_center(t);
                let cov = disc_cov(cx, cy, *radius);
                frame.paint(&cov, [0.95, 0.92, 0.85]);
                // Hops exceed the match radius: zero recorded motion.
                let (nx, ny) = self.hop_center(t + 1);
                stamp_motion(&mut flow, &cov, nx - cx, ny - cy);
            }
            ClipPlan::Slide {
                start,
                v,
                half,
                disc,
            } => {
                let cx = (start.0 + v.0 * t as f32).rem_euclid(sizef);
                let cy = (start.1 + v.1 * t as f32).rem_euclid(sizef);
                if *disc {
                    let cov = disc_cov_wrap(cx, cy, *half, sizef);
                    frame.paint(&cov, [0.25, 0.45, 0.95]);
                    stamp_motion(&mut flow, &cov, v.0, v.1);
                } else {
                    let cov = square_cov_wrap(cx, cy, *half, sizef);
                    let cell = 2.5 * sizef / 32.0;
                    let color = move |x: f32, y: f32| {
                        // Texture rides with the shape.
                        let lx = ((x - cx).rem_euclid(sizef) / cell).floor() as i64;
                        let ly = ((y - cy).rem_euclid(sizef) / cell).floor() as i64;
                        if (lx + ly) % 2 == 0 {
                            [0.9, 0.25, 0.2]
                        } else {
                            [0.2, 0.85, 0.3]
                        }
                    };
                    frame.paint_tex(&cov, &color);
                    stamp_motion(&mut flow, &cov, v.0, v.1);
                }
            }
            ClipPlan::Mover {
                mover_top,
                y_top,
                y_bot,
                static_x,
                xs,
                radius,
            } => {
                let (my, sy) = if *mover_top { (*y_top, *y_bot) } else { (*y_bot, *y_top) };
                let color = [0.95, 0.85, 0.2];
                let static_cov = disc_cov(*static_x, sy, *radius);
                frame.paint(&static_cov, color);
                let mover_cov = disc_cov(xs[t], my, *radius);
                frame.paint(&mover_cov, color);
                stamp_motion(&mut flow, &mover_cov, xs[t + 1] - xs[t], 0.0);
            }
        }
        frame.add_noise(noise, rng);
        (frame.into_tensor(), flow)
    }
}

/// Render one clip. For a reversed hop class the forward partner is rendered
/// with the identical stream and the frame order flipped, so the reversal
/// pair shares frames bitwise; its recorded motion is zero either way.
fn render_clip(
    script: &MotionScript,
    config: &SyntheticConfig,
    rng: &mut SplitMix64,
) -> (Vec<Tensor<f32>>, Vec<DenseFlow>) {
    let reverse = matches!(script, MotionScript::RasterHop { reverse: true });
    let base = if reverse {
        MotionScript::RasterHop { reverse: false }
    } else {
        *script
    };
    let plan = ClipPlan::sample(&base, config.image_size, config.frames_per_clip, rng);
    let mut frames = Vec::with_capacity(config.frames_per_clip);
    let mut motion = Vec::with_capacity(config.frames_per_clip);
    for t in 0..config.frames_per_clip {
        let (f, m) = plan.render(t, config.image_size, config.noise, rng);
        frames.push(f);
        motion.push(m);
    }
    if reverse {
        frames.reverse();
        // Reversed displacement ground truth; hop motion is zero regardless.
        motion = (0..config.frames_per_clip)
            .map(|_| DenseFlow::zeros(config.image_size, config.image_size))
            .collect();
    }
    (frames, motion)
}

fn clip_seed(config: &SyntheticConfig, split: u64, class_pair_base: usize, k: usize) -> u64 {
    crate::rng::mix(
        config.seed,
        (split << 48) | ((class_pair_base as u64) << 24) | k as u64,
    )
}

/// Index of the class used to seed a clip: a reversed hop class shares its
/// forward partner's seed so the two render identical frames.
fn pair_base(classes: &[MotionScript], ci: usize) -> usize {
    match classes[ci] {
        MotionScript::RasterHop { reverse: true } => classes
            .iter()
            .position(|s| matches!(s, MotionScript::RasterHop { reverse: false }))
            .unwrap_or(ci),
        _ => ci,
    }
}

/// Generate the dataset on disk: per-clip directories of `.rten` frames and
/// `.flo` motion maps plus `train.idx` / `eval.idx` index files, a
/// `classes.txt` name list and a `dataset.txt` config echo.
pub fn gen_synthetic(config: &SyntheticConfig, out_dir: &Path) -> Result<()> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("dataset.txt"), config.echo())?;
    let names: Vec<String> = config.classes.iter().map(|c| c.name()).collect();
    std::fs::write(out_dir.join("classes.txt"), names.join("\n") + "\n")?;

    for (split, split_tag, clips_per_class) in [
        ("train", 1u64, config.clips_per_class_train),
        ("eval", 2u64, config.clips_per_class_eval),
    ] {
        let mut metas = Vec::new();
        let mut clip_idx = 0usize;
        for (ci, script) in config.classes.iter().enumerate() {
            let base = pair_base(&config.classes, ci);
            for k in 0..clips_per_class {
                let mut rng = SplitMix64::new(clip_seed(config, split_tag, base, k));
                let (frames, motion) = render_clip(script, config, &mut rng);
                let rel = format!("{split}/clip_{clip_idx:05}");
                let dir = out_dir.join(&rel);
                std::fs::create_dir_all(&dir)?;
                for (t, frame) in frames.iter().enumerate() {
                    rten::write_rten(&dir.join(format!("frame_{t:03}.rten")), frame)?;
                }
                for (t, m) in motion.iter().enumerate() {
                    flo::write_flo(&dir.join(format!("flow_{t:03}.flo")), m)?;
                }
                metas.push(ClipMeta {
                    rel_path: rel,
                    label: ci,
                    num_frames: config.frames_per_clip,
                });
                clip_idx += 1;
            }
        }
        write_index(&out_dir.join(format!("{split}.idx")), &metas)?;
    }
    Ok(())
}
