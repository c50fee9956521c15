//! Modality-specific causal autoencoders and their feature front ends.
//!
//! The audio path: stereo 16 kHz waveform -> per-channel triangular-band
//! magnitude frames at 100/s (channels concatenated) -> strictly causal
//! temporal encoder downsampling 4x to 25 tokens/s with 128 channels.
//!
//! The video path: `[T, H, W, 3]` frames with a causal first frame
//! (T = 1 mod f_t) -> causal spatiotemporal encoder with factors
//! (f_t, f_s, f_s) = (2, 4, 4).
//!
//! Causality is structural: every temporal convolution is left-padded, so
//! perturbing future inputs can never change past latents.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{CoreError, Result};
use crate::graph::{GatherPlan, Graph, Var};
use crate::nn::{Ctx, Linear, ParamInit, ParamStore};
use crate::tensor::Tensor;

// ---- configuration ----

#[derive(Clone, Copy, Debug)]
pub struct AudioCodecConfig {
    pub sample_rate: usize,
    /// Triangular filter bands per channel (F).
    pub n_bands: usize,
    pub hop: usize,
    pub window: usize,
    pub fft_size: usize,
    /// Feature frames per second (sample_rate / hop).
    pub frame_rate: f64,
    /// Temporal downsampling factor (frames per latent token).
    pub down_factor: usize,
    /// Latent channels per token.
    pub c_latent: usize,
    pub token_rate: f64,
    pub hidden: usize,
}

impl Default for AudioCodecConfig {
    fn default() -> Self {
        AudioCodecConfig {
            sample_rate: 16_000,
            n_bands: 16,
            hop: 160,
            window: 320,
            fft_size: 512,
            frame_rate: 100.0,
            down_factor: 4,
            c_latent: 128,
            token_rate: 25.0,
            hidden: 64,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VideoCodecConfig {
    /// Temporal compression factor.
    pub f_t: usize,
    /// Spatial compression factor per axis.
    pub f_s: usize,
    /// Latent channels.
    pub c_latent: usize,
    pub hidden: usize,
}

impl Default for VideoCodecConfig {
    fn default() -> Self {
        VideoCodecConfig {
            f_t: 2,
            f_s: 4,
            c_latent: 8,
            hidden: 48,
        }
    }
}

// ---- latent contracts ----

/// Stereo magnitude features `[T_frames, 2F]`, both channels concatenated
/// along the feature axis.
#[derive(Clone, Debug)]
pub struct AudioFeatureFrames {
    pub frames: Tensor,
    pub frame_rate: f64,
}

impl AudioFeatureFrames {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn seconds(&self) -> f64 {
        self.n_frames() as f64 / self.frame_rate
    }
}

/// Audio latent tokens `[T_tok, C_a]` at 25 tokens per second. Carries the
/// source frame count so decoding can trim the trailing pad block.
#[derive(Clone, Debug)]
pub struct AudioLatent {
    pub tokens: Tensor,
    pub token_rate: f64,
    pub n_frames: usize,
}

impl AudioLatent {
    pub fn n_tokens(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn seconds(&self) -> f64 {
        self.n_tokens() as f64 / self.token_rate
    }
}

/// Video latent grid `[T_lat, H_lat, W_lat, C_v]` with its seconds mapping.
#[derive(Clone, Debug)]
pub struct VideoLatent {
    pub grid: Tensor,
    pub latent_fps: f64,
}

impl VideoLatent {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.grid.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn seconds(&self) -> f64 {
        self.grid.shape()[0] as f64 / self.latent_fps
    }
}

// ---- feature extraction ----

/// Per-channel windowed triangular-band magnitudes, channels concatenated.
/// Rejects anything but exactly two equal-length channels.
pub fn audio_featurize(channels: &[Vec<f64>], cfg: &AudioCodecConfig) -> Result<AudioFeatureFrames> {
    if channels.len() != 2 {
        return Err(CoreError::invalid(
            "audio_featurize",
            format!("expected stereo input, got {} channel(s)", channels.len()),
        ));
    }
    if channels[0].len() != channels[1].len() {
        return Err(CoreError::invalid(
            "audio_featurize",
            "channel lengths differ",
        ));
    }
    if channels[0].is_empty() {
        return Err(CoreError::invalid("audio_featurize", "empty waveform"));
    }
    let n_frames = channels[0].len().div_ceil(cfg.hop);
    let bank = filterbank(cfg);
    let hann: Vec<f64> = (0..cfg.window)
        .map(|i| {
            let phase = std::f64::consts::TAU * i as f64 / cfg.window as f64;
            0.5 * (1.0 - phase.cos())
        })
        .collect();
    let win_sum: f64 = hann.iter().sum();
    let scale = 2.0 / win_sum;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.fft_size);
    let n_bins = cfg.fft_size / 2 + 1;

    let mut out = vec![0.0; n_frames * 2 * cfg.n_bands];
    for (ch, samples) in channels.iter().enumerate() {
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
        for frame in 0..n_frames {
            let start = frame * cfg.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                let v = if i < cfg.window {
                    samples.get(start + i).copied().unwrap_or(0.0) * hann[i]
                } else {
                    0.0
                };
                *slot = Complex::new(v, 0.0);
            }
            fft.process(&mut buf);
            for band in 0..cfg.n_bands {
                let mut acc = 0.0;
                for bin in 0..n_bins {
                    let w = bank[band * n_bins + bin];
                    if w > 0.0 {
                        acc += w * buf[bin].norm();
                    }
                }
                out[frame * 2 * cfg.n_bands + ch * cfg.n_bands + band] = acc * scale;
            }
        }
    }
    Ok(AudioFeatureFrames {
        frames: Tensor::from_vec(&[n_frames, 2 * cfg.n_bands], out),
        frame_rate: cfg.frame_rate,
    })
}

fn mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_inv(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Band center frequencies in Hz, used by featurization and resynthesis.
pub fn band_centers(cfg: &AudioCodecConfig) -> Vec<f64> {
    let lo = mel(60.0);
    let hi = mel(7600.0);
    (1..=cfg.n_bands)
        .map(|b| mel_inv(lo + (hi - lo) * b as f64 / (cfg.n_bands + 1) as f64))
        .collect()
}

fn filterbank(cfg: &AudioCodecConfig) -> Vec<f64> {
    let n_bins = cfg.fft_size / 2 + 1;
    let lo = mel(60.0);
    let hi = mel(7600.0);
    let edges: Vec<f64> = (0..cfg.n_bands + 2)
        .map(|i| mel_inv(lo + (hi - lo) * i as f64 / (cfg.n_bands + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
    let mut bank = vec![0.0; cfg.n_bands * n_bins];
    for band in 0..cfg.n_bands {
        let (left, center, right) = (edges[band], edges[band + 1], edges[band + 2]);
        for bin in 0..n_bins {
            let f = bin as f64 * bin_hz;
            let w = if f >= left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f <= right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            bank[band * n_bins + bin] = w;
        }
    }
    bank
}

/// Deterministic sinusoidal resynthesis of feature frames into a stereo
/// waveform at `out_rate`. A stand-in for a trained vocoder: per band, an
/// oscillator at the band center with the frame magnitudes as its envelope.
pub fn resynthesize(
    features: &AudioFeatureFrames,
    cfg: &AudioCodecConfig,
    out_rate: usize,
) -> [Vec<f64>; 2] {
    let centers = band_centers(cfg);
    let n_frames = features.n_frames();
    let n_samples = (n_frames as f64 / features.frame_rate * out_rate as f64).round() as usize;
    let mut out = [vec![0.0; n_samples], vec![0.0; n_samples]];
    for (ch, target) in out.iter_mut().enumerate() {
        for (band, &fc) in centers.iter().enumerate() {
            let phase0 = 2.399963229728653 * band as f64; // fixed per-band phase
            for (i, slot) in target.iter_mut().enumerate() {
                let t = i as f64 / out_rate as f64;
                let pos = (t * features.frame_rate).min(n_frames as f64 - 1.0);
                let f0 = pos.floor() as usize;
                let f1 = (f0 + 1).min(n_frames - 1);
                let frac = pos - f0 as f64;
                let a0 = features.frames.at(&[f0, ch * cfg.n_bands + band]);
                let a1 = features.frames.at(&[f1, ch * cfg.n_bands + band]);
                let amp = a0 + frac * (a1 - a0);
                *slot += amp * (std::f64::consts::TAU * fc * t + phase0).sin();
            }
        }
        for v in target.iter_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
    }
    out
}

// ---- causal 1-D convolution ----

/// Gather plan for a strictly causal conv over the leading axis of
/// `[T, C]`: output `t` sees inputs in the window ending at
/// `t*stride + stride - 1`, left-padded with zeros.
fn causal_plan(t_in: usize, channels: usize, kernel: usize, stride: usize) -> GatherPlan {
    let t_out = t_in.div_ceil(stride);
    let mut indices = Vec::with_capacity(t_out * kernel * channels);
    for t in 0..t_out {
        let end = (t * stride + stride - 1) as i64;
        for j in 0..kernel {
            let src_t = end - (kernel - 1 - j) as i64;
            for c in 0..channels {
                if src_t < 0 || src_t >= t_in as i64 {
                    indices.push(-1);
                } else {
                    indices.push(src_t * channels as i64 + c as i64);
                }
            }
        }
    }
    GatherPlan::new(indices, vec![t_out, kernel * channels], t_in * channels)
}

#[derive(Clone)]
struct CausalConv1d {
    proj: Linear,
    kernel: usize,
    stride: usize,
    c_in: usize,
}

impl CausalConv1d {
    fn new(
        p: &mut ParamInit,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> CausalConv1d {
        CausalConv1d {
            proj: Linear::new(p, name, kernel * c_in, c_out, true),
            kernel,
            stride,
            c_in,
        }
    }

    fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let shape = x.shape();
        assert_eq!(shape[1], self.c_in, "causal conv channel mismatch");
        let plan = causal_plan(shape[0], self.c_in, self.kernel, self.stride);
        self.proj.forward(ctx, x.gather(&plan))
    }
}

/// Nearest-neighbor upsample along the leading axis of `[T, C]`.
fn repeat_rows<'g>(x: Var<'g>, factor: usize) -> Var<'g> {
    let shape = x.shape();
    let (t, c) = (shape[0], shape[1]);
    let mut indices = Vec::with_capacity(t * factor * c);
    for out_t in 0..t * factor {
        let src_t = out_t / factor;
        for ch in 0..c {
            indices.push((src_t * c + ch) as i64);
        }
    }
    let plan = GatherPlan::new(indices, vec![t * factor, c], t * c);
    x.gather(&plan)
}

// ---- audio codec ----

pub struct AudioCodec {
    pub cfg: AudioCodecConfig,
    enc1: CausalConv1d,
    enc2: CausalConv1d,
    enc_out: Linear,
    dec_in: Linear,
    dec1: CausalConv1d,
    dec2: CausalConv1d,
    dec_out: Linear,
}

impl AudioCodec {
    pub fn new(p: &mut ParamInit, cfg: AudioCodecConfig) -> AudioCodec {
        assert_eq!(cfg.down_factor, 4, "encoder is built from two stride-2 stages");
        let c_feat = 2 * cfg.n_bands;
        let h = cfg.hidden;
        AudioCodec {
            cfg,
            enc1: CausalConv1d::new(p, "codec.audio.enc1", c_feat, h, 4, 2),
            enc2: CausalConv1d::new(p, "codec.audio.enc2", h, h, 4, 2),
            enc_out: Linear::new(p, "codec.audio.enc_out", h, 2 * cfg.c_latent, true),
            dec_in: Linear::new(p, "codec.audio.dec_in", cfg.c_latent, h, true),
            dec1: CausalConv1d::new(p, "codec.audio.dec1", h, h, 4, 1),
            dec2: CausalConv1d::new(p, "codec.audio.dec2", h, h, 4, 1),
            dec_out: Linear::new(p, "codec.audio.dec_out", h, c_feat, true),
        }
    }

    /// Posterior mean and log-variance, each `[T_tok, C_a]`.
    pub fn encode<'g>(
        &self,
        ctx: &Ctx<'g>,
        frames: &AudioFeatureFrames,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let t = frames.n_frames();
        if t < self.cfg.down_factor {
            return Err(CoreError::invalid(
                "audio_encode",
                format!("need at least {} frames, got {t}", self.cfg.down_factor),
            ));
        }
        let x = ctx.constant(frames.frames.clone());
        let h = self.enc1.forward(ctx, x).silu();
        let h = self.enc2.forward(ctx, h).silu();
        let stats = self.enc_out.forward(ctx, h);
        let mean = stats.narrow(1, 0, self.cfg.c_latent);
        let logvar = stats.narrow(1, self.cfg.c_latent, self.cfg.c_latent);
        Ok((mean, logvar))
    }

    /// Decode latent tokens back to `[n_frames, 2F]` feature frames.
    pub fn decode<'g>(&self, ctx: &Ctx<'g>, z: Var<'g>, n_frames: usize) -> Result<Var<'g>> {
        let t_tok = z.shape()[0];
        if n_frames > t_tok * self.cfg.down_factor {
            return Err(CoreError::invalid(
                "audio_decode",
                format!("{n_frames} frames exceed {t_tok} tokens x {}", self.cfg.down_factor),
            ));
        }
        let h = self.dec_in.forward(ctx, z).silu();
        let h = self.dec1.forward(ctx, repeat_rows(h, 2)).silu();
        let h = self.dec2.forward(ctx, repeat_rows(h, 2)).silu();
        let frames = self.dec_out.forward(ctx, h).softplus();
        Ok(frames.narrow(0, 0, n_frames))
    }

    /// Deterministic latent (the posterior mean).
    pub fn encode_latent(&self, store: &ParamStore, frames: &AudioFeatureFrames) -> Result<AudioLatent> {
        let graph = Graph::new();
        let ctx = Ctx::new(&graph, store);
        let (mean, _) = self.encode(&ctx, frames)?;
        Ok(AudioLatent {
            tokens: mean.value(),
            token_rate: self.cfg.token_rate,
            n_frames: frames.n_frames(),
        })
    }

    pub fn decode_frames(&self, store: &ParamStore, latent: &AudioLatent) -> Result<AudioFeatureFrames> {
        let graph = Graph::new();
        let ctx = Ctx::new(&graph, store);
        let z = ctx.constant(latent.tokens.clone());
        let frames = self.decode(&ctx, z, latent.n_frames)?;
        Ok(AudioFeatureFrames {
            frames: frames.value(),
            frame_rate: self.cfg.frame_rate,
        })
    }
}

// ---- video codec ----

pub struct VideoCodec {
    pub cfg: VideoCodecConfig,
    patch_in: Linear,
    enc_mix: Linear,
    enc_time: Linear,
    enc_out: Linear,
    dec_in: Linear,
    dec_mix: Linear,
    dec_head: Linear,
    patch_out: Linear,
}

impl VideoCodec {
    pub fn new(p: &mut ParamInit, cfg: VideoCodecConfig) -> VideoCodec {
        assert_eq!(cfg.f_t, 2, "temporal head is built for f_t = 2");
        let patch = cfg.f_s * cfg.f_s * 3;
        let h = cfg.hidden;
        VideoCodec {
            cfg,
            patch_in: Linear::new(p, "codec.video.patch_in", patch, h, true),
            enc_mix: Linear::new(p, "codec.video.enc_mix", h, h, true),
            enc_time: Linear::new(p, "codec.video.enc_time", 3 * h, h, true),
            enc_out: Linear::new(p, "codec.video.enc_out", h, 2 * cfg.c_latent, true),
            dec_in: Linear::new(p, "codec.video.dec_in", cfg.c_latent, h, true),
            dec_mix: Linear::new(p, "codec.video.dec_mix", 2 * h + 1, h, true),
            dec_head: Linear::new(p, "codec.video.dec_head", h, h, true),
            patch_out: Linear::new(p, "codec.video.patch_out", h, patch, true),
        }
    }

    fn check_dims(&self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        if shape.len() != 4 || shape[3] != 3 {
            return Err(CoreError::shape(
                "video_encode",
                format!("expected [T, H, W, 3], got {shape:?}"),
            ));
        }
        let (t, h, w) = (shape[0], shape[1], shape[2]);
        if t % self.cfg.f_t != 1 {
            return Err(CoreError::invalid(
                "video_encode",
                format!("frame count {t} must be 1 mod {}", self.cfg.f_t),
            ));
        }
        if h % self.cfg.f_s != 0 || w % self.cfg.f_s != 0 {
            return Err(CoreError::invalid(
                "video_encode",
                format!("spatial dims {h}x{w} must be divisible by {}", self.cfg.f_s),
            ));
        }
        Ok((t, h, w))
    }

    /// Fold each `f_s x f_s` pixel block into one feature row.
    fn patchify_plan(&self, t: usize, h: usize, w: usize) -> GatherPlan {
        let fs = self.cfg.f_s;
        let (hl, wl) = (h / fs, w / fs);
        let patch = fs * fs * 3;
        let mut indices = Vec::with_capacity(t * hl * wl * patch);
        for ft in 0..t {
            for py in 0..hl {
                for px in 0..wl {
                    for dy in 0..fs {
                        for dx in 0..fs {
                            for c in 0..3 {
                                let y = py * fs + dy;
                                let x = px * fs + dx;
                                indices.push((((ft * h + y) * w + x) * 3 + c) as i64);
                            }
                        }
                    }
                }
            }
        }
        GatherPlan::new(indices, vec![t * hl * wl, patch], t * h * w * 3)
    }

    /// Inverse of [`Self::patchify_plan`]: rows of patch features back to pixels.
    fn unpatchify_plan(&self, t: usize, h: usize, w: usize) -> GatherPlan {
        let fs = self.cfg.f_s;
        let (hl, wl) = (h / fs, w / fs);
        let patch = fs * fs * 3;
        let mut indices = vec![0i64; t * h * w * 3];
        for ft in 0..t {
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        let (py, dy) = (y / fs, y % fs);
                        let (px, dx) = (x / fs, x % fs);
                        let row = (ft * hl + py) * wl + px;
                        let col = (dy * fs + dx) * 3 + c;
                        indices[((ft * h + y) * w + x) * 3 + c] = (row * patch + col) as i64;
                    }
                }
            }
        }
        GatherPlan::new(indices, vec![t, h, w, 3], t * hl * wl * patch)
    }

    /// Causal temporal fold: latent frame j sees pixel frames 2j-2..2j.
    fn temporal_plan(&self, t_px: usize, spatial: usize, ch: usize) -> GatherPlan {
        let t_lat = (t_px + 1) / 2;
        let k = 3;
        let mut indices = Vec::with_capacity(t_lat * spatial * k * ch);
        for j in 0..t_lat {
            for s in 0..spatial {
                for tap in 0..k {
                    let src_t = 2 * j as i64 - (k - 1 - tap) as i64;
                    for c in 0..ch {
                        if src_t < 0 {
                            indices.push(-1);
                        } else {
                            indices.push(((src_t as usize * spatial + s) * ch + c) as i64);
                        }
                    }
                }
            }
        }
        GatherPlan::new(
            indices,
            vec![t_lat * spatial, k * ch],
            t_px * spatial * ch,
        )
    }

    /// Expand latents for decoding: pixel frame k reads latents
    /// ceil(k/2)-1 and ceil(k/2) plus a parity flag channel.
    fn expand_plan(&self, t_lat: usize, spatial: usize, ch: usize) -> (GatherPlan, Tensor) {
        let t_px = 2 * t_lat - 1;
        let mut indices = Vec::with_capacity(t_px * spatial * 2 * ch);
        let mut parity = Vec::with_capacity(t_px * spatial);
        for k in 0..t_px {
            let j = k.div_ceil(2);
            for s in 0..spatial {
                for (slot, src_j) in [(0usize, j as i64 - 1), (1, j as i64)] {
                    let _ = slot;
                    for c in 0..ch {
                        if src_j < 0 {
                            indices.push(-1);
                        } else {
                            indices.push(((src_j as usize * spatial + s) * ch + c) as i64);
                        }
                    }
                }
                parity.push((k % 2) as f64);
            }
        }
        (
            GatherPlan::new(indices, vec![t_px * spatial, 2 * ch], t_lat * spatial * ch),
            Tensor::from_vec(&[t_px * spatial, 1], parity),
        )
    }

    /// Posterior mean and log-variance, each `[T_lat, H_lat, W_lat, C_v]`.
    pub fn encode<'g>(&self, ctx: &Ctx<'g>, frames: &Tensor) -> Result<(Var<'g>, Var<'g>)> {
        let (t, h, w) = self.check_dims(frames.shape())?;
        let (hl, wl) = (h / self.cfg.f_s, w / self.cfg.f_s);
        let t_lat = (t + 1) / 2;
        let x = ctx.constant(frames.clone());
        let patched = x.gather(&self.patchify_plan(t, h, w));
        let hdn = self.patch_in.forward(ctx, patched).silu();
        let hdn = self.enc_mix.forward(ctx, hdn).silu();
        let folded = hdn.gather(&self.temporal_plan(t, hl * wl, self.cfg.hidden));
        let hdn = self.enc_time.forward(ctx, folded).silu();
        let stats = self.enc_out.forward(ctx, hdn);
        let mean = stats
            .narrow(1, 0, self.cfg.c_latent)
            .reshape(&[t_lat, hl, wl, self.cfg.c_latent]);
        let logvar = stats
            .narrow(1, self.cfg.c_latent, self.cfg.c_latent)
            .reshape(&[t_lat, hl, wl, self.cfg.c_latent]);
        Ok((mean, logvar))
    }

    /// Decode a latent grid to `[2*T_lat - 1, H, W, 3]` pixels in [0, 1].
    pub fn decode<'g>(&self, ctx: &Ctx<'g>, z: Var<'g>) -> Result<Var<'g>> {
        let shape = z.shape();
        if shape.len() != 4 || shape[3] != self.cfg.c_latent {
            return Err(CoreError::shape(
                "video_decode",
                format!("expected [T, h, w, {}], got {shape:?}", self.cfg.c_latent),
            ));
        }
        let (t_lat, hl, wl) = (shape[0], shape[1], shape[2]);
        let spatial = hl * wl;
        let t_px = 2 * t_lat - 1;
        let (h, w) = (hl * self.cfg.f_s, wl * self.cfg.f_s);

        let hdn = self
            .dec_in
            .forward(ctx, z.reshape(&[t_lat * spatial, self.cfg.c_latent]))
            .silu();
        let (plan, parity) = self.expand_plan(t_lat, spatial, self.cfg.hidden);
        let expanded = hdn.gather(&plan);
        let with_parity = {
            // append the parity flag as an extra input channel
            let rows = t_px * spatial;
            let mut select = vec![0i64; rows * (2 * self.cfg.hidden + 1)];
            let width = 2 * self.cfg.hidden;
            for r in 0..rows {
                for c in 0..width {
                    select[r * (width + 1) + c] = (r * width + c) as i64;
                }
                select[r * (width + 1) + width] = -1;
            }
            let gather = GatherPlan::new(select, vec![rows, width + 1], rows * width);
            let padded = expanded.gather(&gather);
            let mut mask = vec![0.0; rows * (width + 1)];
            for r in 0..rows {
                mask[r * (width + 1) + width] = 1.0;
            }
            let mask = ctx.constant(Tensor::from_vec(&[rows, width + 1], mask));
            let parity_col = ctx.constant(parity);
            padded.add(mask.mul(parity_col))
        };
        let hdn = self.dec_mix.forward(ctx, with_parity).silu();
        let hdn = self.dec_head.forward(ctx, hdn).silu();
        let patches = self.patch_out.forward(ctx, hdn).sigmoid();
        Ok(patches.gather(&self.unpatchify_plan(t_px, h, w)))
    }

    pub fn encode_latent(&self, store: &ParamStore, frames: &Tensor, pixel_fps: f64) -> Result<VideoLatent> {
        let graph = Graph::new();
        let ctx = Ctx::new(&graph, store);
        let (mean, _) = self.encode(&ctx, frames)?;
        Ok(VideoLatent {
            grid: mean.value(),
            latent_fps: pixel_fps / self.cfg.f_t as f64,
        })
    }

    pub fn decode_frames(&self, store: &ParamStore, latent: &VideoLatent) -> Result<Tensor> {
        let graph = Graph::new();
        let ctx = Ctx::new(&graph, store);
        let z = ctx.constant(latent.grid.clone());
        Ok(self.decode(&ctx, z)?.value())
    }
}

// ---- joint codec training ----

/// One paired training example for the codecs.
#[derive(Clone)]
pub struct CodecSample {
    pub video_frames: Tensor,
    pub audio_features: AudioFeatureFrames,
}

#[derive(Clone, Copy, Debug)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            steps: 2000,
            batch: 4,
            lr: 1e-3,
            kl_weight: 1e-4,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CodecTrainReport {
    pub losses: Vec<f64>,
}

impl CodecTrainReport {
    pub fn smoothed(&self, at: usize, window: usize) -> f64 {
        let lo = at.saturating_sub(window / 2);
        let hi = (at + window / 2 + 1).min(self.losses.len());
        let slice = &self.losses[lo..hi];
        slice.iter().sum::<f64>() / slice.len() as f64
    }
}

/// Reconstruction MSE plus a small KL-to-unit-Gaussian penalty on both
/// codecs jointly. Aborts if the loss exceeds 10x its initial value.
pub fn train_codecs(
    store: &mut ParamStore,
    audio: &AudioCodec,
    video: &VideoCodec,
    dataset: &[CodecSample],
    cfg: CodecTrainConfig,
) -> Result<CodecTrainReport> {
    use crate::tensor::seeded_rng;
    use rand::Rng;

    assert!(!dataset.is_empty(), "empty codec dataset");
    let mut report = CodecTrainReport::default();
    if cfg.steps == 0 {
        return Ok(report);
    }
    let mut opt = crate::nn::Adam::new(cfg.lr);
    let mut initial = None;
    for step in 0..cfg.steps {
        let mut step_rng = seeded_rng(cfg.seed, &[0xc0de, step as u64]);
        let mut grads: std::collections::BTreeMap<String, Tensor> = Default::default();
        let mut loss_acc = 0.0;
        for b in 0..cfg.batch {
            let sample = &dataset[step_rng.gen_range(0..dataset.len())];
            let mut eps_rng = seeded_rng(cfg.seed, &[0xeb5, step as u64, b as u64]);
            let graph = Graph::new();
            let ctx = Ctx::new(&graph, store);

            // audio branch
            let (a_mean, a_logvar) = audio.encode(&ctx, &sample.audio_features)?;
            let a_eps = ctx.constant(Tensor::randn(&a_mean.shape(), &mut eps_rng));
            let a_z = a_mean.add(a_logvar.affine(0.5, 0.0).exp().mul(a_eps));
            let a_recon = audio.decode(&ctx, a_z, sample.audio_features.n_frames())?;
            let a_target = ctx.constant(sample.audio_features.frames.clone());
            let a_mse = a_recon.sub(a_target).square().mean_all();
            let a_kl = kl_to_unit(a_mean, a_logvar);

            // video branch
            let (v_mean, v_logvar) = video.encode(&ctx, &sample.video_frames)?;
            let v_eps = ctx.constant(Tensor::randn(&v_mean.shape(), &mut eps_rng));
            let v_z = v_mean.add(v_logvar.affine(0.5, 0.0).exp().mul(v_eps));
            let v_recon = video.decode(&ctx, v_z)?;
            let v_target = ctx.constant(sample.video_frames.clone());
            let v_mse = v_recon.sub(v_target).square().mean_all();
            let v_kl = kl_to_unit(v_mean, v_logvar);

            let loss = a_mse
                .add(v_mse)
                .add(a_kl.add(v_kl).affine(cfg.kl_weight, 0.0));
            graph.backward(loss)?;
            loss_acc += loss.value().data()[0];
            for (name, grad) in ctx.grads() {
                let scaled = grad.map(|v| v / cfg.batch as f64);
                grads
                    .entry(name)
                    .and_modify(|acc| {
                        let merged: Vec<f64> = acc
                            .data()
                            .iter()
                            .zip(scaled.data())
                            .map(|(a, b)| a + b)
                            .collect();
                        *acc = Tensor::from_vec(scaled.shape(), merged);
                    })
                    .or_insert(scaled);
            }
        }
        let loss = loss_acc / cfg.batch as f64;
        report.losses.push(loss);
        let init = *initial.get_or_insert(loss);
        if loss > 10.0 * init {
            return Err(CoreError::Diverged {
                step,
                loss,
                limit: 10.0 * init,
            });
        }
        opt.apply(store, &grads);
    }
    Ok(report)
}

fn kl_to_unit<'g>(mean: Var<'g>, logvar: Var<'g>) -> Var<'g> {
    // 0.5 * mean(mu^2 + exp(logvar) - logvar - 1)
    mean.square()
        .add(logvar.exp())
        .sub(logvar)
        .affine(0.5, -0.5)
        .mean_all()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    fn acfg() -> AudioCodecConfig {
        AudioCodecConfig::default()
    }

    fn build_codecs(seed: u64) -> (ParamStore, AudioCodec, VideoCodec) {
        let mut store = ParamStore::new();
        let mut p = ParamInit::new(&mut store, seed);
        let audio = AudioCodec::new(&mut p, acfg());
        let video = VideoCodec::new(&mut p, VideoCodecConfig::default());
        (store, audio, video)
    }

    fn tone(seconds: f64, freq: f64, rate: usize) -> Vec<f64> {
        (0..(seconds * rate as f64) as usize)
            .map(|i| 0.5 * (std::f64::consts::TAU * freq * i as f64 / rate as f64).sin())
            .collect()
    }

    #[test]
    fn featurize_rejects_mono_and_ragged() {
        let cfg = acfg();
        assert!(audio_featurize(&[vec![0.0; 1600]], &cfg).is_err());
        assert!(audio_featurize(&[vec![0.0; 1600], vec![0.0; 1601]], &cfg).is_err());
    }

    #[test]
    fn featurize_silence_is_zero_and_frame_count_matches_hop() {
        let cfg = acfg();
        let silence = vec![0.0; 16_000];
        let frames = audio_featurize(&[silence.clone(), silence], &cfg).unwrap();
        assert_eq!(frames.n_frames(), 100);
        assert!(frames.frames.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn featurize_identical_channels_are_symmetric() {
        let cfg = acfg();
        let wave = tone(0.5, 440.0, cfg.sample_rate);
        let frames = audio_featurize(&[wave.clone(), wave], &cfg).unwrap();
        for f in 0..frames.n_frames() {
            for b in 0..cfg.n_bands {
                assert_eq!(
                    frames.frames.at(&[f, b]),
                    frames.frames.at(&[f, cfg.n_bands + b])
                );
            }
        }
        // magnitude features are non-negative and a tone excites something
        assert!(frames.frames.data().iter().all(|&v| v >= 0.0));
        assert!(frames.frames.data().iter().any(|&v| v > 1e-3));
    }

    #[test]
    fn audio_latent_contract_two_seconds() {
        let (store, audio, _) = build_codecs(1);
        let cfg = acfg();
        let wave = tone(2.0, 330.0, cfg.sample_rate);
        let frames = audio_featurize(&[wave.clone(), wave], &cfg).unwrap();
        assert_eq!(frames.n_frames(), 200);
        let latent = audio.encode_latent(&store, &frames).unwrap();
        assert_eq!(latent.n_tokens(), 50);
        assert_eq!(latent.channels(), 128);
        assert!((latent.seconds() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn audio_encoder_is_strictly_causal() {
        let (store, audio, _) = build_codecs(2);
        let cfg = acfg();
        let mut rng = seeded_rng(5, &[10]);
        let base = Tensor::rand_uniform(&[80, 2 * cfg.n_bands], 0.0, 1.0, &mut rng);
        let frames = AudioFeatureFrames {
            frames: base.clone(),
            frame_rate: cfg.frame_rate,
        };
        let z0 = audio.encode_latent(&store, &frames).unwrap();
        for k in [4usize, 17, 40, 79] {
            let mut data = base.to_vec();
            for f in k..80 {
                for c in 0..2 * cfg.n_bands {
                    data[f * 2 * cfg.n_bands + c] += 3.5;
                }
            }
            let perturbed = AudioFeatureFrames {
                frames: Tensor::from_vec(base.shape(), data),
                frame_rate: cfg.frame_rate,
            };
            let z1 = audio.encode_latent(&store, &perturbed).unwrap();
            let safe = k / 4;
            for tok in 0..safe {
                for c in 0..cfg.c_latent {
                    assert_eq!(
                        z0.tokens.at(&[tok, c]),
                        z1.tokens.at(&[tok, c]),
                        "token {tok} changed by a perturbation at frame {k}"
                    );
                }
            }
        }
    }

    #[test]
    fn audio_encode_rejects_too_short_input() {
        let (store, audio, _) = build_codecs(3);
        let frames = AudioFeatureFrames {
            frames: Tensor::zeros(&[3, 32]),
            frame_rate: 100.0,
        };
        assert!(audio.encode_latent(&store, &frames).is_err());
    }

    #[test]
    fn video_shape_contract_9x32x32() {
        let (store, _, video) = build_codecs(4);
        let mut rng = seeded_rng(6, &[0]);
        let frames = Tensor::rand_uniform(&[9, 32, 32, 3], 0.0, 1.0, &mut rng);
        let latent = video.encode_latent(&store, &frames, 10.0).unwrap();
        assert_eq!(latent.grid.shape(), &[5, 8, 8, 8]);
        assert_eq!(latent.latent_fps, 5.0);
        let decoded = video.decode_frames(&store, &latent).unwrap();
        assert_eq!(decoded.shape(), &[9, 32, 32, 3]);
    }

    #[test]
    fn video_rejects_bad_dims() {
        let (store, _, video) = build_codecs(5);
        // even frame count breaks the causal start
        let bad_t = Tensor::zeros(&[8, 32, 32, 3]);
        assert!(video.encode_latent(&store, &bad_t, 10.0).is_err());
        // indivisible spatial dims
        let bad_s = Tensor::zeros(&[5, 30, 32, 3]);
        assert!(video.encode_latent(&store, &bad_s, 10.0).is_err());
    }

    #[test]
    fn video_encoder_is_strictly_causal() {
        let (store, _, video) = build_codecs(7);
        let mut rng = seeded_rng(8, &[0]);
        let base = Tensor::rand_uniform(&[9, 16, 16, 3], 0.0, 1.0, &mut rng);
        let z0 = video.encode_latent(&store, &base, 10.0).unwrap();
        let frame_elems = 16 * 16 * 3;
        for k in [1usize, 2, 5, 8] {
            let mut data = base.to_vec();
            for v in data[k * frame_elems..].iter_mut() {
                *v += 1.0;
            }
            let z1 = video
                .encode_latent(&store, &Tensor::from_vec(base.shape(), data), 10.0)
                .unwrap();
            let safe = k.div_ceil(2); // latent j depends on pixel frames <= 2j
            for j in 0..safe {
                for y in 0..4 {
                    for x in 0..4 {
                        for c in 0..8 {
                            assert_eq!(
                                z0.grid.at(&[j, y, x, c]),
                                z1.grid.at(&[j, y, x, c]),
                                "latent frame {j} changed by a perturbation at pixel frame {k}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_steps_training_keeps_parameters() {
        let (mut store, audio, video) = build_codecs(9);
        let before: Vec<(String, Vec<f64>)> = store
            .iter()
            .map(|(k, v)| (k.clone(), v.data().to_vec()))
            .collect();
        let dataset = vec![CodecSample {
            video_frames: Tensor::zeros(&[5, 16, 16, 3]),
            audio_features: AudioFeatureFrames {
                frames: Tensor::zeros(&[40, 32]),
                frame_rate: 100.0,
            },
        }];
        let cfg = CodecTrainConfig {
            steps: 0,
            ..Default::default()
        };
        let report = train_codecs(&mut store, &audio, &video, &dataset, cfg).unwrap();
        assert!(report.losses.is_empty());
        for (name, data) in before {
            assert_eq!(store.get(&name).data(), &data[..]);
        }
    }

    #[test]
    fn short_codec_training_reduces_loss() {
        let (mut store, audio, video) = build_codecs(10);
        let mut rng = seeded_rng(11, &[0]);
        let dataset: Vec<CodecSample> = (0..4)
            .map(|_| CodecSample {
                video_frames: Tensor::rand_uniform(&[5, 16, 16, 3], 0.0, 1.0, &mut rng),
                audio_features: AudioFeatureFrames {
                    frames: Tensor::rand_uniform(&[40, 32], 0.0, 0.5, &mut rng),
                    frame_rate: 100.0,
                },
            })
            .collect();
        let cfg = CodecTrainConfig {
            steps: 60,
            batch: 2,
            lr: 2e-3,
            kl_weight: 1e-4,
            seed: 12,
        };
        let report = train_codecs(&mut store, &audio, &video, &dataset, cfg).unwrap();
        let first = report.smoothed(2, 5);
        let last = report.smoothed(report.losses.len() - 3, 5);
        assert!(last < first, "codec loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn resynthesis_duration_tracks_frames() {
        let cfg = acfg();
        let frames = AudioFeatureFrames {
            frames: Tensor::full(&[70, 32], 0.1),
            frame_rate: 100.0,
        };
        let out = resynthesize(&frames, &cfg, 24_000);
        assert_eq!(out[0].len(), (0.7 * 24_000.0) as usize);
        assert_eq!(out[1].len(), out[0].len());
        assert!(out[0].iter().all(|v| v.abs() <= 1.0));
    }
}
