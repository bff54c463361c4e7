//! Deterministic synthetic datasets with labels planted in the pixels.
//!
//! Each task draws shapes whose intensities or positions encode the label, so
//! small CNNs can fit them in a few epochs:
//!
//! * VA: a rectangle in the red channel with intensity `(v + 1) / 2` and a
//!   disk in the green channel with intensity `(a + 1) / 2`.
//! * EXPR: a central square whose RGB on/off pattern is the class index in
//!   binary and whose side grows with the class index.
//! * AU: a 4 × 3 grid of cells, one per AU in canonical order, lit when the AU
//!   is active.
//!
//! Label marginals follow the imbalance of the real annotations: expression
//! classes are drawn from [`EXPR_COUNTS`], VA labels lean positive with a
//! configurable share of exact ±1 values, and AU15/AU23/AU24 are rare.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, weighted::WeightedIndex};

use super::{DatasetSplit, Provenance, SplitName};
use crate::error::{Error, Result};
use crate::seed;
use crate::types::{
    AuLabels, ExpressionLabel, FrameRecord, Image, Task, VaLabel, VideoSequence, N_AUS,
    N_EXPR_CLASSES,
};

/// Per-class frame counts of the expression training annotations
/// (neutral, anger, disgust, fear, happiness, sadness, surprise, other).
pub const EXPR_COUNTS: [u32; N_EXPR_CLASSES] =
    [177_498, 16_573, 10_810, 9_080, 95_633, 79_862, 31_637, 165_866];

/// Stationary activation rate per AU in canonical order.
pub const AU_RATES: [f64; N_AUS] = [
    0.25, 0.20, 0.30, 0.40, 0.45, 0.40, 0.45, 0.08, 0.07, 0.07, 0.60, 0.30,
];

const NOISE: f32 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    pub image_size: usize,
    /// Share of VA labels (per dimension) set exactly to ±1.
    pub extreme_fraction: f64,
    pub split: SplitName,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            image_size: 112,
            extreme_fraction: 0.15,
            split: SplitName::Train,
        }
    }
}

/// Generates `n_videos` videos of `frames_per_video` frames for `task`.
/// Output is a pure function of the arguments.
pub fn generate_synthetic(
    seed: u64,
    n_videos: usize,
    frames_per_video: usize,
    task: Task,
    opts: &SynthOptions,
) -> Result<DatasetSplit> {
    if n_videos == 0 {
        return Err(Error::config("n_videos", "must be positive"));
    }
    if frames_per_video == 0 {
        return Err(Error::config("frames_per_video", "must be positive"));
    }
    if opts.image_size < 8 {
        return Err(Error::config("image_size", "synthetic frames need at least 8 pixels"));
    }
    let mut rng = seed::rng(seed, &format!("synthetic/{task}/{}", opts.split));
    let mut sequences = Vec::with_capacity(n_videos);
    for v in 0..n_videos {
        let video_id = format!("{task}-{}-{v:03}", opts.split);
        let frames = match task {
            Task::Va => va_video(&mut rng, &video_id, frames_per_video, opts),
            Task::Expr => expr_video(&mut rng, &video_id, frames_per_video, opts),
            Task::Au => au_video(&mut rng, &video_id, frames_per_video, opts),
        };
        sequences.push(VideoSequence::new(video_id, frames)?);
    }
    DatasetSplit::new(opts.split, sequences, Provenance::Synthetic)
}

fn noisy_background(rng: &mut ChaCha8Rng, size: usize, level: f32) -> Image {
    Image::from_shape_simple_fn((size, size, 3), || {
        (level + rng.random_range(-NOISE..NOISE)).clamp(0.0, 1.0)
    })
}

/// Adds `value - level` over the rectangle, keeping the existing noise.
fn paint_rect(img: &mut Image, rows: (usize, usize), cols: (usize, usize), ch: usize, value: f32, level: f32) {
    for y in rows.0..rows.1 {
        for x in cols.0..cols.1 {
            let p = &mut img[[y, x, ch]];
            *p = (*p - level + value).clamp(0.0, 1.0);
        }
    }
}

fn paint_disk(img: &mut Image, center: (f32, f32), radius: f32, ch: usize, value: f32, level: f32) {
    let size = img.dim().0;
    for y in 0..size {
        for x in 0..size {
            let dy = y as f32 + 0.5 - center.0;
            let dx = x as f32 + 0.5 - center.1;
            if dx * dx + dy * dy <= radius * radius {
                let p = &mut img[[y, x, ch]];
                *p = (*p - level + value).clamp(0.0, 1.0);
            }
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn va_video(rng: &mut ChaCha8Rng, video_id: &str, n: usize, opts: &SynthOptions) -> Vec<FrameRecord> {
    const LEVEL: f32 = 0.1;
    let s = opts.image_size;
    let mut zv = 0.35 * gaussian(rng);
    let mut za = 0.25 * gaussian(rng);
    (0..n)
        .map(|i| {
            zv = 0.9 * zv + 0.15 * gaussian(rng);
            za = 0.9 * za + 0.11 * gaussian(rng);
            let mut v = (0.2 + zv).clamp(-0.9, 0.9);
            let mut a = (0.15 + 0.45 * v.abs() + za).clamp(-0.9, 0.9);
            for x in [&mut v, &mut a] {
                if rng.random_bool(opts.extreme_fraction) {
                    *x = if rng.random_bool(0.7) { 1.0 } else { -1.0 };
                }
            }
            let mut img = noisy_background(rng, s, LEVEL);
            paint_rect(&mut img, (s / 4, 3 * s / 4), (s / 8, s / 2 - s / 16), 0, ((v + 1.0) / 2.0) as f32, LEVEL);
            let center = (s as f32 / 2.0, 3.0 * s as f32 / 4.0);
            paint_disk(&mut img, center, s as f32 / 5.0, 1, ((a + 1.0) / 2.0) as f32, LEVEL);
            FrameRecord {
                video_id: video_id.to_string(),
                frame_index: i,
                image: img,
                va: Some(VaLabel::new(v, a)),
                expr: None,
                aus: None,
            }
        })
        .collect()
}

fn expr_video(rng: &mut ChaCha8Rng, video_id: &str, n: usize, opts: &SynthOptions) -> Vec<FrameRecord> {
    const LEVEL: f32 = 0.1;
    let s = opts.image_size;
    let classes = WeightedIndex::new(EXPR_COUNTS).expect("positive class weights");
    (0..n)
        .map(|i| {
            let class = classes.sample(rng);
            let mut img = noisy_background(rng, s, LEVEL);
            let side = ((0.3 + 0.04 * class as f64) * s as f64).round() as usize;
            let max_shift = (s / 16).max(1) as i64;
            let dy = rng.random_range(-max_shift..=max_shift);
            let dx = rng.random_range(-max_shift..=max_shift);
            let y0 = ((s - side) as i64 / 2 + dy).clamp(0, (s - side) as i64) as usize;
            let x0 = ((s - side) as i64 / 2 + dx).clamp(0, (s - side) as i64) as usize;
            for ch in 0..3 {
                let on = (class >> ch) & 1 == 1;
                let value = if on { 0.85 } else { 0.25 };
                paint_rect(&mut img, (y0, y0 + side), (x0, x0 + side), ch, value, LEVEL);
            }
            FrameRecord {
                video_id: video_id.to_string(),
                frame_index: i,
                image: img,
                va: None,
                expr: Some(ExpressionLabel::new(class as i64).expect("class < 8")),
                aus: None,
            }
        })
        .collect()
}

fn au_video(rng: &mut ChaCha8Rng, video_id: &str, n: usize, opts: &SynthOptions) -> Vec<FrameRecord> {
    const LEVEL: f32 = 0.15;
    const LEAVE: f64 = 0.15;
    let s = opts.image_size;
    let mut state: [bool; N_AUS] = AU_RATES.map(|r| rng.random_bool(r));
    let (cell_h, cell_w) = (s / 3, s / 4);
    (0..n)
        .map(|i| {
            if i > 0 {
                for (on, rate) in state.iter_mut().zip(AU_RATES) {
                    let enter = LEAVE * rate / (1.0 - rate);
                    *on = if *on { !rng.random_bool(LEAVE) } else { rng.random_bool(enter) };
                }
            }
            let mut img = noisy_background(rng, s, LEVEL);
            for (j, on) in state.iter().enumerate() {
                if !on {
                    continue;
                }
                let (r, c) = (j / 4, j % 4);
                let rows = (r * cell_h + cell_h / 4, r * cell_h + 3 * cell_h / 4);
                let cols = (c * cell_w + cell_w / 4, c * cell_w + 3 * cell_w / 4);
                for ch in 0..3 {
                    paint_rect(&mut img, rows, cols, ch, 0.9, LEVEL);
                }
            }
            let labels = AuLabels::new(state.map(|b| b as i8)).expect("binary labels");
            FrameRecord {
                video_id: video_id.to_string(),
                frame_index: i,
                image: img,
                va: None,
                expr: None,
                aus: Some(labels),
            }
        })
        .collect()
}
