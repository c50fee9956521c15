//! Synthetic paired audio-video data and the flow-matching training loop.
//!
//! Every sample is a bouncing square: its vertical position selects the
//! frequency band of a phase-continuous tone, and each floor/ceiling impact
//! emits a short broadband ping at the exact reflection time. Captions are
//! derived deterministically from the generation parameters, so text, video
//! and audio stay mutually consistent.
//!
//! Training follows the straight-path parameterization
//! `x_t = (1 - t) x + t n`, velocity target `n - x` (t = 0 is data), with
//! independent per-modality timesteps and Bernoulli condition dropping.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::artifacts::{save_checkpoint, MetricsCsv};
use crate::codecs::{
    audio_featurize, band_centers, AudioCodec, AudioCodecConfig, AudioFeatureFrames, AudioLatent,
    VideoCodec, VideoLatent,
};
use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::model::{AvDit, ForwardFlags};
use crate::nn::{Adam, Ctx, ParamStore};
use crate::tensor::{seeded_rng, Tensor};
use crate::textcond::{stub_encode, standardize_layers, TextConfig, Tokenizer};

// ---- synthetic data ----

#[derive(Clone, Copy, Debug)]
pub struct DataConfig {
    /// Pixel frames per clip; must be 1 mod the codec's temporal factor.
    pub px_frames: usize,
    pub px_h: usize,
    pub px_w: usize,
    pub pixel_fps: f64,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            px_frames: 7,
            px_h: 16,
            px_w: 16,
            pixel_fps: 10.0,
            n_train: 192,
            n_eval: 16,
            seed: 1234,
        }
    }
}

impl DataConfig {
    pub fn clip_seconds(&self) -> f64 {
        self.px_frames as f64 / self.pixel_fps
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SquareParams {
    pub color: [f64; 3],
    pub color_word: &'static str,
    pub size: usize,
    pub x0: f64,
    pub y0: f64,
    pub vx: f64,
    pub vy: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub video_frames: Tensor,
    pub waveform: [Vec<f64>; 2],
    pub audio_features: AudioFeatureFrames,
    pub caption: String,
    /// Exact vertical reflection times in seconds, strictly inside the clip.
    pub impact_times: Vec<f64>,
    pub params: SquareParams,
}

const PALETTE: [([f64; 3], &str); 4] = [
    ([0.9, 0.15, 0.1], "red"),
    ([0.1, 0.8, 0.2], "green"),
    ([0.15, 0.3, 0.9], "blue"),
    ([0.9, 0.8, 0.1], "yellow"),
];

/// Words the caption templates can emit, the tokenizer vocabulary.
pub fn caption_vocab() -> Tokenizer {
    Tokenizer::new(&[
        "red", "green", "blue", "yellow", "square", "bounces", "drifts", "slowly", "quickly",
        "low", "mid", "high", "tone,", "tone", "click", "on", "impact", "steady",
    ])
}

/// Vertical position with reflecting boundaries plus the reflection times.
fn reflecting_track(p0: f64, v: f64, limit: f64, t_end: f64) -> (Vec<f64>, impl Fn(f64) -> f64) {
    // events
    let mut events = Vec::new();
    if v.abs() > 1e-12 {
        let mut t = 0.0;
        let mut pos = p0;
        let mut vel = v;
        while t < t_end {
            let dt = if vel > 0.0 {
                (limit - pos) / vel
            } else {
                pos / -vel
            };
            let hit = t + dt;
            if hit >= t_end {
                break;
            }
            events.push(hit);
            pos = if vel > 0.0 { limit } else { 0.0 };
            vel = -vel;
            t = hit;
        }
    }
    let eval = move |t: f64| -> f64 {
        if v.abs() < 1e-12 || limit <= 0.0 {
            return p0.clamp(0.0, limit.max(0.0));
        }
        // fold the free-flight position into [0, 2*limit) and reflect
        let raw = p0 + v * t;
        let period = 2.0 * limit;
        let m = raw.rem_euclid(period);
        if m <= limit {
            m
        } else {
            period - m
        }
    };
    (events, eval)
}

fn derive_params(seed: u64, cfg: &DataConfig) -> SquareParams {
    let mut rng = seeded_rng(cfg.seed, &[0x5a11, seed]);
    let (color, color_word) = PALETTE[rng.gen_range(0..PALETTE.len())];
    let size = rng.gen_range(3..=4usize);
    let y_limit = (cfg.px_h - size) as f64;
    let x_limit = (cfg.px_w - size) as f64;
    let y0 = rng.gen_range(0.0..y_limit);
    let vy_mag = rng.gen_range(15.0..40.0);
    let vy = if rng.gen_bool(0.5) { vy_mag } else { -vy_mag };
    // horizontal drift stays away from the side walls within the clip
    let x0 = rng.gen_range(0.3 * x_limit..0.7 * x_limit);
    let vx = rng.gen_range(-3.0..3.0);
    SquareParams {
        color,
        color_word,
        size,
        x0,
        y0,
        vx,
        vy,
    }
}

/// Deterministic sample for a seed.
pub fn make_sample(seed: u64, cfg: &DataConfig, audio_cfg: &AudioCodecConfig) -> Result<SyntheticSample> {
    make_sample_from(derive_params(seed, cfg), cfg, audio_cfg)
}

/// Sample from explicit square parameters (tests pin the motion).
pub fn make_sample_from(
    params: SquareParams,
    cfg: &DataConfig,
    audio_cfg: &AudioCodecConfig,
) -> Result<SyntheticSample> {
    let t_end = cfg.clip_seconds();
    let y_limit = (cfg.px_h - params.size) as f64;
    let x_limit = (cfg.px_w - params.size) as f64;
    let (impact_times, y_of) = reflecting_track(params.y0, params.vy, y_limit, t_end);
    let x_of = {
        let (x0, vx) = (params.x0, params.vx);
        move |t: f64| (x0 + vx * t).clamp(0.0, x_limit)
    };

    // video frames
    let mut frames = vec![0.08; cfg.px_frames * cfg.px_h * cfg.px_w * 3];
    for j in 0..cfg.px_frames {
        let t = j as f64 / cfg.pixel_fps;
        let sy = y_of(t).round() as usize;
        let sx = x_of(t).round() as usize;
        for y in sy..(sy + params.size).min(cfg.px_h) {
            for x in sx..(sx + params.size).min(cfg.px_w) {
                for c in 0..3 {
                    frames[((j * cfg.px_h + y) * cfg.px_w + x) * 3 + c] = params.color[c];
                }
            }
        }
    }
    let video_frames = Tensor::from_vec(&[cfg.px_frames, cfg.px_h, cfg.px_w, 3], frames);

    // audio: phase-continuous tone whose band follows the vertical position,
    // plus a broadband ping at each impact time
    let centers = band_centers(audio_cfg);
    let n_bands = audio_cfg.n_bands;
    let rate = audio_cfg.sample_rate as f64;
    let n_samples = (t_end * rate).round() as usize;
    let bin_of = |t: f64| -> usize {
        let norm = if y_limit > 0.0 { y_of(t) / y_limit } else { 0.0 };
        // low position on screen (large y) drives a low tone
        (((1.0 - norm) * (n_bands - 1) as f64).round() as usize).min(n_bands - 1)
    };
    let pan = |t: f64| -> (f64, f64) {
        let norm = if x_limit > 0.0 { x_of(t) / x_limit } else { 0.5 };
        (0.7 + 0.3 * (1.0 - norm), 0.7 + 0.3 * norm)
    };
    let mut left = vec![0.0; n_samples];
    let mut right = vec![0.0; n_samples];
    let mut phase = 0.0f64;
    // slew the oscillator toward the target band center instead of jumping;
    // instantaneous frequency steps would splatter energy across all bands
    // and masquerade as impact pings
    let slew = 1.0 - (-1.0 / (0.004 * rate)).exp();
    let mut freq = centers[bin_of(0.0)];
    for i in 0..n_samples {
        let t = i as f64 / rate;
        freq += (centers[bin_of(t)] - freq) * slew;
        phase += std::f64::consts::TAU * freq / rate;
        let tone = 0.2 * phase.sin();
        let (gl, gr) = pan(t);
        left[i] = tone * gl;
        right[i] = tone * gr;
    }
    for &hit in &impact_times {
        let start = (hit * rate) as usize;
        let len = (0.018 * rate) as usize;
        for i in start..(start + len).min(n_samples) {
            let tau = (i - start) as f64 / rate;
            let env = (-tau / 0.008).exp();
            let mut ping = 0.0;
            for &fc in &centers {
                ping += (std::f64::consts::TAU * fc * tau).sin();
            }
            let v = 0.06 * env * ping;
            left[i] = (left[i] + v).clamp(-1.0, 1.0);
            right[i] = (right[i] + v).clamp(-1.0, 1.0);
        }
    }
    let audio_features = audio_featurize(&[left.clone(), right.clone()], audio_cfg)?;

    // caption
    let speed = if params.vy.abs() >= 27.0 || params.vy.abs() < 1e-9 {
        "quickly"
    } else {
        "slowly"
    };
    let mean_bin = (bin_of(0.0) + bin_of(t_end * 0.5) + bin_of(t_end * 0.999)) / 3;
    let tone_word = match mean_bin {
        b if b < n_bands / 3 => "low",
        b if b < 2 * n_bands / 3 => "mid",
        _ => "high",
    };
    let caption = if params.vy.abs() < 1e-9 {
        format!(
            "{} square drifts {} tone steady",
            params.color_word, tone_word
        )
    } else {
        format!(
            "{} square bounces {} {} tone, click on impact",
            params.color_word, speed, tone_word
        )
    };

    Ok(SyntheticSample {
        video_frames,
        waveform: [left, right],
        audio_features,
        caption,
        impact_times,
        params,
    })
}

// ---- event extraction (sync verification) ----

/// Click times read back from the audio features.
///
/// A click is broadband: it lifts nearly every band at once, while the
/// sweeping tone only disturbs the bands adjacent to its current position.
/// A frame is a candidate when most bands rise simultaneously against their
/// local baseline. The first and last two frames are skipped; the tone
/// onset and the trailing window ramp produce spurious steps there.
pub fn extract_audio_click_times(features: &AudioFeatureFrames, n_bands: usize) -> Vec<f64> {
    let n = features.n_frames();
    if n < 7 {
        return Vec::new();
    }
    let width = 2 * n_bands;
    let spiking = |f: usize, c: usize| -> f64 {
        let now = features.frames.at(&[f, c]);
        let lo = features.frames.at(&[f - 2, c]);
        let hi = features.frames.at(&[f + 2, c]);
        now - 0.5 * (lo + hi)
    };
    let counts: Vec<usize> = (0..n)
        .map(|f| {
            if f < 2 || f + 2 >= n {
                return 0;
            }
            (0..width).filter(|&c| spiking(f, c) > 0.006).count()
        })
        .collect();
    let need = 3 * width / 5;
    let mut ranges: Vec<(usize, usize)> = Vec::new();
    let mut f = 0;
    while f < n {
        if counts[f] >= need {
            let start = f;
            while f < n && counts[f] >= need {
                f += 1;
            }
            // merge with the previous range when within 6 frames
            match ranges.last_mut() {
                Some((_, last_end)) if start - *last_end <= 6 => *last_end = f - 1,
                _ => ranges.push((start, f - 1)),
            }
        } else {
            f += 1;
        }
    }
    // sub-frame position: magnitude-weighted centroid over the burst,
    // shifted by one hop (the analysis window peaks one hop after the
    // frame start)
    ranges
        .into_iter()
        .map(|(start, end)| {
            let mut num = 0.0;
            let mut den = 0.0;
            for f in start..=end {
                let w: f64 = (0..width).map(|c| spiking(f, c).max(0.0)).sum();
                num += (f as f64 + 1.0) * w;
                den += w;
            }
            num / den / features.frame_rate
        })
        .collect()
}

/// Vertical reversal times read back from the rendered frames via the
/// bright-pixel centroid. Rounding to pixels can flatten the apex into a
/// short plateau, so reversals are located between the surrounding clearly
/// moving segments and reported at the plateau midpoint.
pub fn extract_video_reversal_times(frames: &Tensor, fps: f64) -> Vec<f64> {
    let shape = frames.shape();
    let (t, h, w) = (shape[0], shape[1], shape[2]);
    let centroid = |j: usize| -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for y in 0..h {
            for x in 0..w {
                let luma = (frames.at(&[j, y, x, 0]) + frames.at(&[j, y, x, 1]) + frames.at(&[j, y, x, 2])) / 3.0;
                if luma > 0.2 {
                    num += y as f64;
                    den += 1.0;
                }
            }
        }
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    };
    let ys: Vec<f64> = (0..t).map(centroid).collect();
    // slopes with clear motion only (quarter-pixel floor)
    let moving: Vec<(usize, f64)> = (0..t.saturating_sub(1))
        .map(|j| (j, ys[j + 1] - ys[j]))
        .filter(|(_, s)| s.abs() > 0.25)
        .collect();
    let mut events = Vec::new();
    for pair in moving.windows(2) {
        let (j1, s1) = pair[0];
        let (j2, s2) = pair[1];
        if s1 * s2 < 0.0 {
            // reversal happened somewhere in ((j1+1), j2+1); take the center
            events.push((j1 + 1 + j2) as f64 / 2.0 / fps);
        }
    }
    events
}

#[derive(Debug, Clone, Default)]
pub struct SyncReport {
    pub n_true_interior: usize,
    pub n_audio_extracted: usize,
    pub n_video_extracted: usize,
    pub max_audio_gap_frames: f64,
    pub max_video_gap_frames: f64,
}

/// Verify the impact-time alignment of one sample: every interior impact
/// must be visible in both modalities, audio within one feature frame and
/// video within one pixel frame of the shared schedule. "Interior" leaves
/// two full frame intervals at each end, the minimum the video-side slope
/// detector needs.
pub fn check_impact_sync(
    sample: &SyntheticSample,
    cfg: &DataConfig,
    audio_cfg: &AudioCodecConfig,
) -> Result<SyncReport> {
    let frame = 1.0 / cfg.pixel_fps;
    let interior: Vec<f64> = sample
        .impact_times
        .iter()
        .cloned()
        .filter(|&t| t > 2.2 * frame && t < cfg.clip_seconds() - 2.2 * frame)
        .collect();
    let clicks = extract_audio_click_times(&sample.audio_features, audio_cfg.n_bands);
    let reversals = extract_video_reversal_times(&sample.video_frames, cfg.pixel_fps);
    let mut report = SyncReport {
        n_true_interior: interior.len(),
        n_audio_extracted: clicks.len(),
        n_video_extracted: reversals.len(),
        ..Default::default()
    };
    for &truth in &interior {
        let audio_gap = clicks
            .iter()
            .map(|c| (c - truth).abs())
            .fold(f64::INFINITY, f64::min)
            * audio_cfg.frame_rate;
        let video_gap = reversals
            .iter()
            .map(|r| (r - truth).abs())
            .fold(f64::INFINITY, f64::min)
            * cfg.pixel_fps;
        if audio_gap > 1.0 {
            return Err(CoreError::invalid(
                "impact_sync",
                format!("impact at {truth:.3}s missing in audio (gap {audio_gap:.2} feature frames)"),
            ));
        }
        if video_gap > 1.0 {
            return Err(CoreError::invalid(
                "impact_sync",
                format!("impact at {truth:.3}s missing in video (gap {video_gap:.2} frames)"),
            ));
        }
        report.max_audio_gap_frames = report.max_audio_gap_frames.max(audio_gap);
        report.max_video_gap_frames = report.max_video_gap_frames.max(video_gap);
    }
    Ok(report)
}

// ---- encoded dataset ----

/// One training example in latent space, with its encoded prompt stack.
#[derive(Clone)]
pub struct EncodedSample {
    pub video: VideoLatent,
    pub audio: AudioLatent,
    pub stack: Tensor,
    pub prompt_len: usize,
    pub caption: String,
}

/// Generate, featurize, and encode the train/eval splits.
pub fn build_dataset(
    store: &ParamStore,
    audio_codec: &AudioCodec,
    video_codec: &VideoCodec,
    data_cfg: &DataConfig,
    text_cfg: &TextConfig,
) -> Result<(Vec<EncodedSample>, Vec<EncodedSample>)> {
    let tokenizer = caption_vocab();
    let encode = |seed_offset: u64, count: usize| -> Result<Vec<EncodedSample>> {
        (0..count as u64)
            .map(|i| {
                let sample = make_sample(seed_offset + i, data_cfg, &audio_codec.cfg)?;
                let video =
                    video_codec.encode_latent(store, &sample.video_frames, data_cfg.pixel_fps)?;
                let audio = audio_codec.encode_latent(store, &sample.audio_features)?;
                let prompt = tokenizer.encode(&sample.caption);
                let prompt_len = prompt.len().min(text_cfg.t_max);
                let stack = stub_encode(&prompt[..prompt_len], text_cfg)?;
                Ok(EncodedSample {
                    video,
                    audio,
                    stack,
                    prompt_len,
                    caption: sample.caption,
                })
            })
            .collect()
    };
    let train = encode(0, data_cfg.n_train)?;
    let eval = encode(1_000_000, data_cfg.n_eval)?;
    Ok((train, eval))
}

/// Write a dataset split as AVT1 tensors plus a JSON index.
pub fn cache_dataset(dir: &Path, split: &str, samples: &[EncodedSample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut index = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let video = format!("{split}_{i:04}_video.avt");
        let audio = format!("{split}_{i:04}_audio.avt");
        s.video.grid.save(&dir.join(&video))?;
        s.audio.tokens.save(&dir.join(&audio))?;
        index.push(serde_json::json!({
            "video": video,
            "audio": audio,
            "caption": s.caption,
            "prompt_len": s.prompt_len,
            "latent_fps": s.video.latent_fps,
            "token_rate": s.audio.token_rate,
            "n_frames": s.audio.n_frames,
        }));
    }
    crate::artifacts::write_json(&dir.join(format!("{split}_index.json")), &index)
}

// ---- flow matching ----

/// Straight-path interpolation: `x_t = (1 - t) x + t n`, target `n - x`.
pub fn flow_path(x_clean: &Tensor, noise: &Tensor, t: f64) -> (Tensor, Tensor) {
    assert_eq!(x_clean.shape(), noise.shape(), "flow_path shape mismatch");
    assert!((0.0..=1.0).contains(&t), "flow_path t {t} outside [0, 1]");
    let x_t: Vec<f64> = x_clean
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&x, &n)| (1.0 - t) * x + t * n)
        .collect();
    let v: Vec<f64> = x_clean
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&x, &n)| n - x)
        .collect();
    (
        Tensor::from_vec(x_clean.shape(), x_t),
        Tensor::from_vec(x_clean.shape(), v),
    )
}

/// The random draws of one training example.
#[derive(Clone)]
pub struct FlowDraw {
    pub t_v: f64,
    pub t_a: f64,
    pub noise_v: Tensor,
    pub noise_a: Tensor,
    pub flags: ForwardFlags,
}

/// Sample a draw for (step, slot) deterministically.
pub fn draw_for(
    seed: u64,
    step: usize,
    slot: usize,
    sample: &EncodedSample,
    drop_text: f64,
    drop_modal: f64,
) -> FlowDraw {
    let mut rng = seeded_rng(seed, &[0xd1a3, step as u64, slot as u64]);
    let t_v: f64 = rng.gen();
    let t_a: f64 = rng.gen();
    let noise_v = Tensor::randn(sample.video.grid.shape(), &mut rng);
    let noise_a = Tensor::randn(sample.audio.tokens.shape(), &mut rng);
    let flags = ForwardFlags {
        drop_text_video: rng.gen_bool(drop_text),
        drop_text_audio: rng.gen_bool(drop_text),
        drop_modal_video: rng.gen_bool(drop_modal),
        drop_modal_audio: rng.gen_bool(drop_modal),
        ..Default::default()
    };
    FlowDraw {
        t_v,
        t_a,
        noise_v,
        noise_a,
        flags,
    }
}

/// Per-sample flow-matching loss: mean squared velocity error per stream,
/// summed with unit weights. Returns the loss var plus the two stream
/// values.
pub fn flow_match_loss<'g>(
    ctx: &Ctx<'g>,
    model: &AvDit,
    sample: &EncodedSample,
    draw: &FlowDraw,
) -> Result<(Var<'g>, f64, f64)> {
    let (x_v, target_v) = flow_path(&sample.video.grid, &draw.noise_v, draw.t_v);
    let (x_a, target_a) = flow_path(&sample.audio.tokens, &draw.noise_a, draw.t_a);
    let v_lat = VideoLatent {
        grid: x_v,
        latent_fps: sample.video.latent_fps,
    };
    let a_lat = AudioLatent {
        tokens: x_a,
        token_rate: sample.audio.token_rate,
        n_frames: sample.audio.n_frames,
    };
    let (cond_v, cond_a) = model.condition(ctx, &sample.stack, sample.prompt_len)?;
    let out = model.forward(
        ctx, &v_lat, &a_lat, draw.t_v, draw.t_a, &cond_v, &cond_a, draw.flags,
    )?;
    let loss_v = out
        .velocity_video
        .sub(ctx.constant(target_v))
        .square()
        .mean_all();
    let loss_a = out
        .velocity_audio
        .sub(ctx.constant(target_a))
        .square()
        .mean_all();
    let total = loss_v.add(loss_a);
    total.value().validate("flow_match_loss")?;
    Ok((total, loss_v.value().data()[0], loss_a.value().data()[0]))
}

// ---- training loop ----

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub drop_text: f64,
    pub drop_modal: f64,
    /// Step after which the extractor projection W is frozen.
    pub freeze_w_step: usize,
    pub ckpt_every: usize,
    pub seed: u64,
    /// First step index (nonzero when resuming).
    pub start_step: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch: 8,
            lr: 1e-3,
            drop_text: 0.1,
            drop_modal: 0.1,
            freeze_w_step: 200,
            ckpt_every: 1000,
            seed: 7,
            start_step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_video: f64,
    pub loss_audio: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Default)]
pub struct TrainReport {
    pub metrics: Vec<StepMetrics>,
    pub checkpoints: Vec<PathBuf>,
    pub standardization_violations: usize,
}

impl TrainReport {
    /// Mean of loss_video + loss_audio over a window centered at `at`.
    pub fn smoothed_total(&self, at: usize, window: usize) -> f64 {
        let pos = self
            .metrics
            .iter()
            .position(|m| m.step >= at)
            .unwrap_or(self.metrics.len().saturating_sub(1));
        let lo = pos.saturating_sub(window / 2);
        let hi = (pos + window / 2 + 1).min(self.metrics.len());
        let slice = &self.metrics[lo..hi];
        slice
            .iter()
            .map(|m| m.loss_video + m.loss_audio)
            .sum::<f64>()
            / slice.len() as f64
    }
}

/// Flow-matching training. Batch samples run as independent graphs (in
/// parallel when threads are available) and their gradients are summed in
/// slot order, so results do not depend on the thread count. Checkpoints
/// and metrics land under `out_dir` when given; on divergence the last good
/// parameters are saved before the error is returned.
pub fn train(
    model: &AvDit,
    store: &mut ParamStore,
    opt: &mut Adam,
    data: &[EncodedSample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    config_hash: &str,
) -> Result<TrainReport> {
    assert!(!data.is_empty(), "empty training set");
    let mut report = TrainReport::default();
    let mut csv = match out_dir {
        Some(dir) => Some(MetricsCsv::create(&dir.join("metrics.csv"))?),
        None => None,
    };
    let pool = crate::thread_pool();
    let mut initial_total: Option<f64> = None;

    for step in cfg.start_step..cfg.steps {
        if step >= cfg.freeze_w_step && !opt.is_frozen(crate::textcond::W_PROJ) {
            opt.freeze(crate::textcond::W_PROJ);
        }
        let mut pick = seeded_rng(cfg.seed, &[0xba7c, step as u64]);
        let batch: Vec<(usize, &EncodedSample)> = (0..cfg.batch)
            .map(|slot| (slot, &data[pick.gen_range(0..data.len())]))
            .collect();

        let results: Vec<Result<(BTreeMap<String, Tensor>, f64, f64)>> = pool.install(|| {
            batch
                .par_iter()
                .map(|(slot, sample)| {
                    let draw =
                        draw_for(cfg.seed, step, *slot, sample, cfg.drop_text, cfg.drop_modal);
                    let graph = Graph::new();
                    let ctx = Ctx::new(&graph, store);
                    let (loss, lv, la) = flow_match_loss(&ctx, model, sample, &draw)?;
                    graph.backward(loss)?;
                    Ok((ctx.grads(), lv, la))
                })
                .collect()
        });

        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss_v = 0.0;
        let mut loss_a = 0.0;
        let scale = 1.0 / cfg.batch as f64;
        for result in results {
            let (sample_grads, lv, la) = result?;
            loss_v += lv * scale;
            loss_a += la * scale;
            for (name, grad) in sample_grads {
                match grads.get_mut(&name) {
                    Some(acc) => {
                        let merged: Vec<f64> = acc
                            .data()
                            .iter()
                            .zip(grad.data())
                            .map(|(a, g)| a + g * scale)
                            .collect();
                        *acc = Tensor::from_vec(grad.shape(), merged);
                    }
                    None => {
                        grads.insert(name, grad.map(|v| v * scale));
                    }
                }
            }
        }
        let grad_norm = grads
            .values()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();

        let total = loss_v + loss_a;
        let init = *initial_total.get_or_insert(total);
        if !total.is_finite() || total > 10.0 * init {
            if let Some(dir) = out_dir {
                // the store still holds the pre-divergence parameters
                let last_good = dir.join("ckpt_last_good");
                save_checkpoint(&last_good, store, opt, step, cfg.seed, config_hash)?;
                report.checkpoints.push(last_good);
            }
            return Err(CoreError::Diverged {
                step,
                loss: total,
                limit: 10.0 * init,
            });
        }

        // the extractor's standardization invariant must hold on live data
        if step % 250 == 0 {
            let stack = &batch[0].1.stack;
            if !standardization_holds(stack) {
                report.standardization_violations += 1;
            }
        }

        opt.apply(store, &grads);

        let metrics = StepMetrics {
            step,
            loss_video: loss_v,
            loss_audio: loss_a,
            grad_norm,
        };
        if let Some(csv) = csv.as_mut() {
            csv.append(step, loss_v, loss_a, grad_norm)?;
        }
        report.metrics.push(metrics);

        let done = step + 1;
        if let Some(dir) = out_dir {
            if done % cfg.ckpt_every == 0 || done == cfg.steps {
                let path = dir.join(format!("ckpt_{done:06}"));
                save_checkpoint(&path, store, opt, done, cfg.seed, config_hash)?;
                report.checkpoints.push(path);
            }
        }
    }
    if let Some(csv) = csv.as_mut() {
        csv.flush()?;
    }
    Ok(report)
}

fn standardization_holds(stack: &Tensor) -> bool {
    let Ok(flat) = standardize_layers(stack, Some(1e-6)) else {
        return false;
    };
    let (t, dl) = (flat.shape()[0], flat.shape()[1]);
    let l = stack.shape()[2];
    let d = dl / l;
    let n = (t * d) as f64;
    for layer in 0..l {
        let mut sum = 0.0;
        let mut sq = 0.0;
        for pos in 0..t {
            for dim in 0..d {
                let v = flat.at(&[pos, layer * d + dim]);
                sum += v;
                sq += v * v;
            }
        }
        let mean = sum / n;
        let var = sq / n - mean * mean;
        if mean.abs() > 1e-9 || (var - 1.0).abs() > 1e-9 {
            return false;
        }
    }
    true
}

/// Held-out audio velocity loss with real video context vs with the
/// cross-modal condition dropped. The same draws are used on both sides.
pub fn audio_context_losses(
    model: &AvDit,
    store: &ParamStore,
    eval: &[EncodedSample],
    seed: u64,
) -> Result<(f64, f64)> {
    assert!(!eval.is_empty(), "empty eval set");
    let pool = crate::thread_pool();
    let losses: Vec<Result<(f64, f64)>> = pool.install(|| {
        eval.par_iter()
            .enumerate()
            .map(|(i, sample)| {
                let mut base = draw_for(seed, 0, i, sample, 0.0, 0.0);
                base.flags = ForwardFlags::default();
                let graph = Graph::new();
                let ctx = Ctx::new(&graph, store);
                let (_, _, with_ctx) = flow_match_loss(&ctx, model, sample, &base)?;
                let mut dropped = base.clone();
                dropped.flags.drop_modal_audio = true;
                let graph2 = Graph::new();
                let ctx2 = Ctx::new(&graph2, store);
                let (_, _, without_ctx) = flow_match_loss(&ctx2, model, sample, &dropped)?;
                Ok((with_ctx, without_ctx))
            })
            .collect()
    });
    let mut with_sum = 0.0;
    let mut without_sum = 0.0;
    for result in losses {
        let (w, wo) = result?;
        with_sum += w;
        without_sum += wo;
    }
    let n = eval.len() as f64;
    Ok((with_sum / n, without_sum / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codecs::VideoCodecConfig;
    use crate::model::ModelConfig;
    use crate::nn::ParamInit;

    fn audio_cfg() -> AudioCodecConfig {
        AudioCodecConfig::default()
    }

    #[test]
    fn make_sample_is_deterministic() {
        let cfg = DataConfig::default();
        let a = make_sample(5, &cfg, &audio_cfg()).unwrap();
        let b = make_sample(5, &cfg, &audio_cfg()).unwrap();
        assert_eq!(a.video_frames.data(), b.video_frames.data());
        assert_eq!(a.audio_features.frames.data(), b.audio_features.frames.data());
        assert_eq!(a.caption, b.caption);
        assert_eq!(a.impact_times, b.impact_times);
    }

    #[test]
    fn pinned_square_constant_tone_no_clicks() {
        let cfg = DataConfig::default();
        let params = SquareParams {
            color: [0.9, 0.15, 0.1],
            color_word: "red",
            size: 4,
            x0: 6.0,
            y0: 5.0,
            vx: 0.0,
            vy: 0.0,
        };
        let sample = make_sample_from(params, &cfg, &audio_cfg()).unwrap();
        assert!(sample.impact_times.is_empty());
        assert!(extract_audio_click_times(&sample.audio_features, 16).is_empty());
        // constant tone: the dominant band never changes
        let n = sample.audio_features.n_frames();
        let dominant = |f: usize| -> usize {
            (0..16)
                .max_by(|&a, &b| {
                    sample
                        .audio_features
                        .frames
                        .at(&[f, a])
                        .partial_cmp(&sample.audio_features.frames.at(&[f, b]))
                        .unwrap()
                })
                .unwrap()
        };
        let first = dominant(2);
        for f in 2..n - 2 {
            assert_eq!(dominant(f), first, "tone moved at frame {f}");
        }
        assert!(sample.caption.contains("steady"));
    }

    #[test]
    fn impacts_cotimed_across_100_seeds() {
        // longer clips than the training default so every clip carries
        // interior impacts; the generator itself is length-agnostic
        let cfg = DataConfig {
            px_frames: 31,
            ..DataConfig::default()
        };
        let acfg = audio_cfg();
        let mut with_events = 0;
        for seed in 0..100 {
            let sample = make_sample(seed, &cfg, &acfg).unwrap();
            let report = check_impact_sync(&sample, &cfg, &acfg)
                .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
            if report.n_true_interior > 0 {
                with_events += 1;
            }
        }
        assert!(
            with_events >= 90,
            "only {with_events}/100 clips had interior impacts"
        );
    }

    #[test]
    fn flow_path_endpoints_and_closed_form() {
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]);
        let n = Tensor::from_vec(&[3], vec![0.3, 0.1, -0.7]);
        let (x0, v0) = flow_path(&x, &n, 0.0);
        assert_eq!(x0.data(), x.data());
        let (x1, _) = flow_path(&x, &n, 1.0);
        assert_eq!(x1.data(), n.data());
        // x_clean = 0 -> x_t = t*n, v = n
        let zero = Tensor::zeros(&[3]);
        let (xt, v) = flow_path(&zero, &n, 0.25);
        for (a, b) in xt.data().iter().zip(n.data()) {
            assert!((a - 0.25 * b).abs() < 1e-15);
        }
        assert_eq!(v.data(), n.data());
        let _ = v0;
    }

    #[test]
    fn drop_rates_match_configuration() {
        let cfg = DataConfig {
            px_frames: 3,
            px_h: 8,
            px_w: 8,
            n_train: 1,
            n_eval: 0,
            ..Default::default()
        };
        let sample = EncodedSample {
            video: VideoLatent {
                grid: Tensor::zeros(&[2, 2, 2, 8]),
                latent_fps: 5.0,
            },
            audio: AudioLatent {
                tokens: Tensor::zeros(&[4, 128]),
                token_rate: 25.0,
                n_frames: 16,
            },
            stack: Tensor::zeros(&[4, 2, 2]),
            prompt_len: 2,
            caption: String::new(),
        };
        let _ = cfg;
        let mut text_drops = 0usize;
        let mut modal_drops = 0usize;
        let n = 10_000;
        for i in 0..n {
            let draw = draw_for(42, i, 0, &sample, 0.1, 0.1);
            if draw.flags.drop_text_video {
                text_drops += 1;
            }
            if draw.flags.drop_modal_audio {
                modal_drops += 1;
            }
        }
        let text_rate = text_drops as f64 / n as f64;
        let modal_rate = modal_drops as f64 / n as f64;
        assert!((text_rate - 0.1).abs() < 0.02, "text drop rate {text_rate}");
        assert!(
            (modal_rate - 0.1).abs() < 0.02,
            "modal drop rate {modal_rate}"
        );
    }

    fn micro_setup() -> (ParamStore, AvDit, crate::codecs::AudioCodec, VideoCodec) {
        let mut store = ParamStore::new();
        let mut p = ParamInit::new(&mut store, 3);
        let model = AvDit::new(&mut p, crate::model::tests::small_config()).unwrap();
        let audio = crate::codecs::AudioCodec::new(
            &mut p,
            AudioCodecConfig {
                c_latent: 8,
                hidden: 16,
                ..AudioCodecConfig::default()
            },
        );
        let video = VideoCodec::new(
            &mut p,
            VideoCodecConfig {
                c_latent: 4,
                hidden: 12,
                ..VideoCodecConfig::default()
            },
        );
        (store, model, audio, video)
    }

    fn micro_sample(model: &AvDit, seed: u64) -> EncodedSample {
        let mut rng = seeded_rng(seed, &[0xabc]);
        EncodedSample {
            video: VideoLatent {
                grid: Tensor::randn(&[2, 2, 2, model.cfg.c_video], &mut rng),
                latent_fps: 5.0,
            },
            audio: AudioLatent {
                tokens: Tensor::randn(&[5, model.cfg.c_audio], &mut rng),
                token_rate: 25.0,
                n_frames: 20,
            },
            stack: stub_encode(&[300, 301], &model.cfg.text).unwrap(),
            prompt_len: 2,
            caption: "test".into(),
        }
    }

    #[test]
    fn zero_model_loss_equals_mean_target_norms() {
        let (store, model, _, _) = micro_setup();
        let sample = micro_sample(&model, 1);
        let mut draw = draw_for(9, 0, 0, &sample, 0.0, 0.0);
        draw.flags = ForwardFlags::default();
        // out_proj is zero-initialized, so the model predicts zero velocity
        let graph = Graph::new();
        let ctx = Ctx::new(&graph, &store);
        let (loss, lv, la) = flow_match_loss(&ctx, &model, &sample, &draw).unwrap();
        let (_, target_v) = flow_path(&sample.video.grid, &draw.noise_v, draw.t_v);
        let (_, target_a) = flow_path(&sample.audio.tokens, &draw.noise_a, draw.t_a);
        let mean_sq = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64;
        assert!((lv - mean_sq(&target_v)).abs() < 1e-12);
        assert!((la - mean_sq(&target_a)).abs() < 1e-12);
        assert!((loss.value().data()[0] - lv - la).abs() < 1e-12);
    }

    #[test]
    fn short_training_runs_and_is_deterministic() {
        let (store0, model, _, _) = micro_setup();
        let data: Vec<EncodedSample> = (0..4).map(|i| micro_sample(&model, i)).collect();
        let cfg = TrainConfig {
            steps: 3,
            batch: 2,
            lr: 1e-3,
            freeze_w_step: 2,
            ckpt_every: 100,
            seed: 5,
            ..Default::default()
        };
        let run = || {
            let mut store = store0.clone();
            let mut opt = Adam::new(cfg.lr);
            let report = train(&model, &mut store, &mut opt, &data, &cfg, None, "h").unwrap();
            (store, report)
        };
        let (s1, r1) = run();
        let (s2, r2) = run();
        for (name, t) in s1.iter() {
            assert_eq!(t.data(), s2.get(name).data(), "param {name} differs");
        }
        assert_eq!(r1.metrics.len(), 3);
        for (a, b) in r1.metrics.iter().zip(&r2.metrics) {
            assert_eq!(a.loss_video, b.loss_video);
            assert_eq!(a.loss_audio, b.loss_audio);
            assert_eq!(a.grad_norm, b.grad_norm);
        }
        assert_eq!(r1.standardization_violations, 0);
    }

    #[test]
    fn resume_from_checkpoint_reproduces_next_steps_bitwise() {
        let (store0, model, _, _) = micro_setup();
        let data: Vec<EncodedSample> = (0..4).map(|i| micro_sample(&model, i)).collect();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            steps: 4,
            batch: 2,
            lr: 1e-3,
            freeze_w_step: 1,
            ckpt_every: 2,
            seed: 5,
            ..Default::default()
        };
        // straight run
        let mut full_store = store0.clone();
        let mut full_opt = Adam::new(cfg.lr);
        train(&model, &mut full_store, &mut full_opt, &data, &cfg, None, "h").unwrap();

        // run to step 2, checkpoint, then resume
        let mut store = store0.clone();
        let mut opt = Adam::new(cfg.lr);
        let half = TrainConfig {
            steps: 2,
            ..cfg.clone()
        };
        train(&model, &mut store, &mut opt, &data, &half, Some(dir.path()), "h").unwrap();
        let loaded = crate::artifacts::load_checkpoint(&dir.path().join("ckpt_000002")).unwrap();
        let mut resumed_store = loaded.store.clone();
        let mut resumed_opt = crate::artifacts::restore_optimizer(&loaded);
        let resume_cfg = TrainConfig {
            start_step: loaded.manifest.step,
            ..cfg.clone()
        };
        train(
            &model,
            &mut resumed_store,
            &mut resumed_opt,
            &data,
            &resume_cfg,
            None,
            "h",
        )
        .unwrap();
        for (name, t) in full_store.iter() {
            assert_eq!(
                t.data(),
                resumed_store.get(name).data(),
                "param {name} differs after resume"
            );
        }
    }
}
