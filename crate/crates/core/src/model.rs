//! The asymmetric dual-stream diffusion transformer.
//!
//! Both streams share the depth; each block performs, in lockstep across the
//! streams: self-attention (3D rotary for video, 1D temporal for audio),
//! text cross-attention, bidirectional audio-visual cross-attention, and an
//! FFN, with RMS norms interleaved and AdaLN-style timestep conditioning.
//!
//! The audio-visual exchange is symmetric: both directions read the peer's
//! hidden state as it stands after the self/text sub-layers of the same
//! block. Queries and keys carry only the temporal rotary component there,
//! and the output gate is conditioned on the other modality's timestep. All
//! gates start at zero, so the streams are exactly decoupled at
//! initialization.

use crate::codecs::{AudioLatent, VideoLatent};
use crate::error::{CoreError, Result};
use crate::graph::{RotationTable, Var};
use crate::nn::{Ctx, Init, Linear, MultiHead, ParamInit, QkvMods, RmsNorm, TimestepEmbed};
use crate::posenc::{audio_coords, rope_1d_table, rope_3d_table, video_coords, RopeConfig};
use crate::tensor::Tensor;
use crate::textcond::{CondTokens, Connector, FeatureExtractor, Stream, TextConfig};

/// Width and head count of one stream.
#[derive(Clone, Copy, Debug)]
pub struct StreamConfig {
    pub d_model: usize,
    pub n_heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    /// Block count, identical for both streams (blocks are paired).
    pub depth: usize,
    pub video: StreamConfig,
    pub audio: StreamConfig,
    /// FFN width multiplier.
    pub ffn_mult: usize,
    /// Shared audio-visual cross-attention width.
    pub d_cross: usize,
    pub cross_heads: usize,
    /// Timestep embedding width.
    pub d_time: usize,
    pub rope_base: f64,
    /// Video latent channels (codec contract).
    pub c_video: usize,
    /// Audio latent channels (codec contract).
    pub c_audio: usize,
    pub text: TextConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 4,
            video: StreamConfig {
                d_model: 128,
                n_heads: 4,
            },
            audio: StreamConfig {
                d_model: 64,
                n_heads: 2,
            },
            ffn_mult: 4,
            d_cross: 64,
            cross_heads: 2,
            d_time: 64,
            rope_base: crate::posenc::ROPE_BASE,
            c_video: 8,
            c_audio: 128,
            text: TextConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.video.d_model <= self.audio.d_model {
            return Err(CoreError::Config(format!(
                "video width {} must exceed audio width {}",
                self.video.d_model, self.audio.d_model
            )));
        }
        let head_v = self.video.d_model / self.video.n_heads;
        if head_v * self.video.n_heads != self.video.d_model || head_v % 8 != 0 {
            return Err(CoreError::Config(format!(
                "video head dim {head_v} must be a multiple of 8 for the 3D rotary split"
            )));
        }
        let head_a = self.audio.d_model / self.audio.n_heads;
        if head_a * self.audio.n_heads != self.audio.d_model || head_a % 2 != 0 {
            return Err(CoreError::Config("bad audio head split".into()));
        }
        let head_x = self.d_cross / self.cross_heads;
        if head_x * self.cross_heads != self.d_cross || head_x % 2 != 0 {
            return Err(CoreError::Config("bad cross-attention head split".into()));
        }
        if self.depth == 0 {
            return Err(CoreError::Config("depth must be at least 1".into()));
        }
        Ok(())
    }

    fn video_head_dim(&self) -> usize {
        self.video.d_model / self.video.n_heads
    }

    fn audio_head_dim(&self) -> usize {
        self.audio.d_model / self.audio.n_heads
    }

    fn cross_head_dim(&self) -> usize {
        self.d_cross / self.cross_heads
    }
}

/// Per-sample drop switches and execution options for one forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardFlags {
    pub drop_text_video: bool,
    pub drop_text_audio: bool,
    pub drop_modal_video: bool,
    pub drop_modal_audio: bool,
    /// Disable the audio-visual cross-attention sub-layer entirely
    /// (the unimodal ablation).
    pub disable_av: bool,
    /// Capture head-averaged cross-attention maps.
    pub record_attention: bool,
}

/// Head-averaged cross-attention probabilities per layer.
///
/// `a2v[i]` is `[T_video, T_audio]` (video queries gathering from audio);
/// `v2a[i]` is `[T_audio, T_video]`.
#[derive(Clone, Debug, Default)]
pub struct AttentionCapture {
    pub a2v: Vec<Tensor>,
    pub v2a: Vec<Tensor>,
}

pub struct ForwardOutput<'g> {
    pub velocity_video: Var<'g>,
    pub velocity_audio: Var<'g>,
    pub capture: Option<AttentionCapture>,
}

/// Zero-initialized map from a timestep embedding to `parts` modulation
/// vectors of width `d`.
struct AdaMap {
    lin: Linear,
    parts: usize,
    d: usize,
}

impl AdaMap {
    fn new(p: &mut ParamInit, name: &str, d_time: usize, parts: usize, d: usize) -> AdaMap {
        AdaMap {
            lin: Linear::new_zeros(p, name, d_time, parts * d, true),
            parts,
            d,
        }
    }

    fn forward<'g>(&self, ctx: &Ctx<'g>, t_emb: Var<'g>) -> Vec<Var<'g>> {
        let all = self.lin.forward(ctx, t_emb.silu());
        (0..self.parts)
            .map(|i| all.narrow(1, i * self.d, self.d))
            .collect()
    }
}

struct StreamBlock {
    norm_self: RmsNorm,
    self_attn: MultiHead,
    self_mod: AdaMap,
    norm_text: RmsNorm,
    text_attn: MultiHead,
    text_gate: AdaMap,
    norm_cross: RmsNorm,
    norm_cross_kv: RmsNorm,
    cross: MultiHead,
    cross_q_mod: AdaMap,
    cross_kv_mod: AdaMap,
    cross_gate: AdaMap,
    norm_ffn: RmsNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    ffn_mod: AdaMap,
}

impl StreamBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        p: &mut ParamInit,
        name: &str,
        d: usize,
        heads: usize,
        d_other: usize,
        d_cross: usize,
        cross_heads: usize,
        d_cond: usize,
        d_time: usize,
        ffn_mult: usize,
    ) -> StreamBlock {
        StreamBlock {
            norm_self: RmsNorm::new(p, &format!("{name}.norm_self"), d, 1e-6),
            self_attn: MultiHead::new(p, &format!("{name}.self_attn"), d, d, d, d, heads),
            self_mod: AdaMap::new(p, &format!("{name}.self_mod"), d_time, 3, d),
            norm_text: RmsNorm::new(p, &format!("{name}.norm_text"), d, 1e-6),
            text_attn: MultiHead::new(p, &format!("{name}.text_attn"), d, d_cond, d, d, heads),
            text_gate: AdaMap::new(p, &format!("{name}.text_gate"), d_time, 1, d),
            norm_cross: RmsNorm::new(p, &format!("{name}.norm_cross"), d, 1e-6),
            norm_cross_kv: RmsNorm::new(p, &format!("{name}.norm_cross_kv"), d_other, 1e-6),
            cross: MultiHead::new(
                p,
                &format!("{name}.cross"),
                d,
                d_other,
                d_cross,
                d,
                cross_heads,
            ),
            cross_q_mod: AdaMap::new(p, &format!("{name}.cross_q_mod"), d_time, 2, d_cross),
            cross_kv_mod: AdaMap::new(p, &format!("{name}.cross_kv_mod"), d_time, 2, d_cross),
            cross_gate: AdaMap::new(p, &format!("{name}.cross_gate"), d_time, 1, d),
            norm_ffn: RmsNorm::new(p, &format!("{name}.norm_ffn"), d, 1e-6),
            ffn_in: Linear::new(p, &format!("{name}.ffn_in"), d, ffn_mult * d, true),
            ffn_out: Linear::new(p, &format!("{name}.ffn_out"), ffn_mult * d, d, true),
            ffn_mod: AdaMap::new(p, &format!("{name}.ffn_mod"), d_time, 3, d),
        }
    }

    fn self_and_text<'g>(
        &self,
        ctx: &Ctx<'g>,
        h: Var<'g>,
        cond: &CondTokens<'g>,
        t_own: Var<'g>,
        rope: &RotationTable,
    ) -> Result<Var<'g>> {
        let mods = self.self_mod.forward(ctx, t_own);
        let (shift, scale, gate) = (mods[0], mods[1], mods[2]);
        let x = self
            .norm_self
            .forward(ctx, h)
            .mul(scale.affine(1.0, 1.0))
            .add(shift);
        let (attended, _) = self
            .self_attn
            .forward(ctx, x, x, Some(rope), Some(rope), QkvMods::default())?;
        let h = h.add(gate.mul(attended));

        let x = self.norm_text.forward(ctx, h);
        let (attended, _) =
            self.text_attn
                .forward(ctx, x, cond.tokens, None, None, QkvMods::default())?;
        let gate = self.text_gate.forward(ctx, t_own)[0];
        Ok(h.add(gate.mul(attended)))
    }

    /// The audio-visual cross-attention sub-layer: queries from this stream
    /// modulated by its own timestep, keys/values from the peer modulated by
    /// the peer's timestep, temporal rotary on Q and K, and a residual gate
    /// conditioned on the peer's timestep.
    #[allow(clippy::too_many_arguments)]
    fn audio_visual<'g>(
        &self,
        ctx: &Ctx<'g>,
        h: Var<'g>,
        peer: Var<'g>,
        t_own: Var<'g>,
        t_peer: Var<'g>,
        rope_q: &RotationTable,
        rope_k: &RotationTable,
    ) -> Result<(Var<'g>, Var<'g>)> {
        if peer.shape()[0] == 0 {
            return Err(CoreError::invalid(
                "av_cross_attention",
                "empty key/value sequence",
            ));
        }
        let q_in = self.norm_cross.forward(ctx, h);
        let kv_in = self.norm_cross_kv.forward(ctx, peer);
        let qm = self.cross_q_mod.forward(ctx, t_own);
        let km = self.cross_kv_mod.forward(ctx, t_peer);
        let mods = QkvMods {
            q_shift: Some(qm[0]),
            q_scale: Some(qm[1]),
            kv_shift: Some(km[0]),
            kv_scale: Some(km[1]),
        };
        let (attended, probs) = self
            .cross
            .forward(ctx, q_in, kv_in, Some(rope_q), Some(rope_k), mods)?;
        let gate = self.cross_gate.forward(ctx, t_peer)[0];
        Ok((h.add(gate.mul(attended)), probs))
    }

    fn ffn<'g>(&self, ctx: &Ctx<'g>, h: Var<'g>, t_own: Var<'g>) -> Var<'g> {
        let mods = self.ffn_mod.forward(ctx, t_own);
        let (shift, scale, gate) = (mods[0], mods[1], mods[2]);
        let x = self
            .norm_ffn
            .forward(ctx, h)
            .mul(scale.affine(1.0, 1.0))
            .add(shift);
        let out = self.ffn_out.forward(ctx, self.ffn_in.forward(ctx, x).silu());
        h.add(gate.mul(out))
    }
}

struct DualBlock {
    video: StreamBlock,
    audio: StreamBlock,
}

struct StreamHead {
    t_embed: TimestepEmbed,
    in_proj: Linear,
    final_norm: RmsNorm,
    final_mod: AdaMap,
    out_proj: Linear,
    null_modal: String,
}

/// Latent inputs as graph vars, so probes can differentiate with respect to
/// them. `video` is `[T, H, W, C_v]`, `audio` is `[T_a, C_a]`.
#[derive(Clone, Copy)]
pub struct LatentVars<'g> {
    pub video: Var<'g>,
    pub audio: Var<'g>,
    pub video_fps: f64,
    pub audio_rate: f64,
}

pub struct AvDit {
    pub cfg: ModelConfig,
    video_head: StreamHead,
    audio_head: StreamHead,
    blocks: Vec<DualBlock>,
    pub extractor: FeatureExtractor,
    pub video_connector: Connector,
    pub audio_connector: Connector,
}

impl AvDit {
    pub fn new(p: &mut ParamInit, cfg: ModelConfig) -> Result<AvDit> {
        cfg.validate()?;
        let mk_head = |p: &mut ParamInit, stream: Stream, d: usize, d_other: usize, c_lat: usize| {
            let n = stream.name();
            let null_modal = format!("{n}.null_modal");
            p.tensor(&null_modal, &[1, d_other], Init::Normal(0.02));
            StreamHead {
                t_embed: TimestepEmbed::new(p, &format!("{n}.t_embed"), cfg.d_time),
                in_proj: Linear::new(p, &format!("{n}.in_proj"), c_lat, d, true),
                final_norm: RmsNorm::new(p, &format!("{n}.final_norm"), d, 1e-6),
                final_mod: AdaMap::new(p, &format!("{n}.final_mod"), cfg.d_time, 2, d),
                out_proj: Linear::new_zeros(p, &format!("{n}.out_proj"), d, c_lat, true),
                null_modal,
            }
        };
        let video_head = mk_head(
            p,
            Stream::Video,
            cfg.video.d_model,
            cfg.audio.d_model,
            cfg.c_video,
        );
        let audio_head = mk_head(
            p,
            Stream::Audio,
            cfg.audio.d_model,
            cfg.video.d_model,
            cfg.c_audio,
        );
        let blocks = (0..cfg.depth)
            .map(|i| DualBlock {
                video: StreamBlock::new(
                    p,
                    &format!("video.blocks.{i}"),
                    cfg.video.d_model,
                    cfg.video.n_heads,
                    cfg.audio.d_model,
                    cfg.d_cross,
                    cfg.cross_heads,
                    cfg.text.d_cond,
                    cfg.d_time,
                    cfg.ffn_mult,
                ),
                audio: StreamBlock::new(
                    p,
                    &format!("audio.blocks.{i}"),
                    cfg.audio.d_model,
                    cfg.audio.n_heads,
                    cfg.video.d_model,
                    cfg.d_cross,
                    cfg.cross_heads,
                    cfg.text.d_cond,
                    cfg.d_time,
                    cfg.ffn_mult,
                ),
            })
            .collect();
        let extractor = FeatureExtractor::new(p, cfg.text);
        let video_connector = Connector::new(p, Stream::Video, cfg.text);
        let audio_connector = Connector::new(p, Stream::Audio, cfg.text);
        Ok(AvDit {
            cfg,
            video_head,
            audio_head,
            blocks,
            extractor,
            video_connector,
            audio_connector,
        })
    }

    /// Run the text pipeline for both streams on an encoded prompt stack.
    pub fn condition<'g>(
        &self,
        ctx: &Ctx<'g>,
        stack: &Tensor,
        prompt_len: usize,
    ) -> Result<(CondTokens<'g>, CondTokens<'g>)> {
        let features = self.extractor.forward(ctx, stack)?;
        let v = self.video_connector.connect(ctx, features, prompt_len)?;
        let a = self.audio_connector.connect(ctx, features, prompt_len)?;
        Ok((v, a))
    }

    /// Joint denoising pass over value-level latents.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'g>(
        &self,
        ctx: &Ctx<'g>,
        v_lat: &VideoLatent,
        a_lat: &AudioLatent,
        t_v: f64,
        t_a: f64,
        cond_v: &CondTokens<'g>,
        cond_a: &CondTokens<'g>,
        flags: ForwardFlags,
    ) -> Result<ForwardOutput<'g>> {
        let latents = LatentVars {
            video: ctx.constant(v_lat.grid.clone()),
            audio: ctx.constant(a_lat.tokens.clone()),
            video_fps: v_lat.latent_fps,
            audio_rate: a_lat.token_rate,
        };
        self.forward_vars(ctx, latents, t_v, t_a, cond_v, cond_a, flags)
    }

    /// Same as [`Self::forward`], over caller-supplied latent vars.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_vars<'g>(
        &self,
        ctx: &Ctx<'g>,
        latents: LatentVars<'g>,
        t_v: f64,
        t_a: f64,
        cond_v: &CondTokens<'g>,
        cond_a: &CondTokens<'g>,
        flags: ForwardFlags,
    ) -> Result<ForwardOutput<'g>> {
        let cfg = &self.cfg;
        let v_shape = latents.video.shape();
        if v_shape.len() != 4 || v_shape[3] != cfg.c_video {
            return Err(CoreError::shape(
                "model_forward",
                format!("video latent {v_shape:?}, expected [T, H, W, {}]", cfg.c_video),
            ));
        }
        let a_shape = latents.audio.shape();
        if a_shape.len() != 2 || a_shape[1] != cfg.c_audio {
            return Err(CoreError::shape(
                "model_forward",
                format!("audio latent {a_shape:?}, expected [T, {}]", cfg.c_audio),
            ));
        }
        let (t_lat, h_lat, w_lat) = (v_shape[0], v_shape[1], v_shape[2]);
        let n_video = t_lat * h_lat * w_lat;
        let n_audio = a_shape[0];

        // timestep embeddings validate t in [0, 1]
        let t_emb_v = self.video_head.t_embed.forward(ctx, t_v)?;
        let t_emb_a = self.audio_head.t_embed.forward(ctx, t_a)?;

        // rotary tables: 3D for video self-attention, 1D temporal elsewhere
        let coords_v = video_coords(t_lat, h_lat, w_lat, latents.video_fps)?;
        let coords_a = audio_coords(n_audio, latents.audio_rate)?;
        let rope_v = rope_3d_table(
            &coords_v,
            &RopeConfig::spatiotemporal(cfg.video_head_dim(), cfg.rope_base)?,
        )?;
        let rope_a = rope_1d_table(&coords_a.t_seconds, cfg.audio_head_dim(), cfg.rope_base)?;
        let cross_dim = cfg.cross_head_dim();
        let cross_v = rope_1d_table(&coords_v.t_seconds, cross_dim, cfg.rope_base)?;
        let cross_a = rope_1d_table(&coords_a.t_seconds, cross_dim, cfg.rope_base)?;
        let cross_null = rope_1d_table(&[0.0], cross_dim, cfg.rope_base)?;

        // conditioning, with per-stream null substitution
        let cond_v_used = if flags.drop_text_video {
            self.video_connector.null_conditioning(ctx)
        } else {
            *cond_v
        };
        let cond_a_used = if flags.drop_text_audio {
            self.audio_connector.null_conditioning(ctx)
        } else {
            *cond_a
        };

        let mut h_v = self
            .video_head
            .in_proj
            .forward(ctx, latents.video.reshape(&[n_video, cfg.c_video]));
        let mut h_a = self.audio_head.in_proj.forward(ctx, latents.audio);

        let record = flags.record_attention
            && !flags.disable_av
            && !flags.drop_modal_video
            && !flags.drop_modal_audio;
        let mut capture = if record {
            Some(AttentionCapture::default())
        } else {
            None
        };

        for (layer, block) in self.blocks.iter().enumerate() {
            let v_mid = block
                .video
                .self_and_text(ctx, h_v, &cond_v_used, t_emb_v, &rope_v)?;
            let a_mid = block
                .audio
                .self_and_text(ctx, h_a, &cond_a_used, t_emb_a, &rope_a)?;

            if flags.disable_av {
                h_v = v_mid;
                h_a = a_mid;
            } else {
                let (v_peer, v_peer_rope) = if flags.drop_modal_video {
                    (ctx.param(&self.video_head.null_modal), &cross_null)
                } else {
                    (a_mid, &cross_a)
                };
                let (v_next, a2v) = block.video.audio_visual(
                    ctx, v_mid, v_peer, t_emb_v, t_emb_a, &cross_v, v_peer_rope,
                )?;
                let (a_peer, a_peer_rope) = if flags.drop_modal_audio {
                    (ctx.param(&self.audio_head.null_modal), &cross_null)
                } else {
                    (v_mid, &cross_v)
                };
                let (a_next, v2a) = block.audio.audio_visual(
                    ctx, a_mid, a_peer, t_emb_a, t_emb_v, &cross_a, a_peer_rope,
                )?;
                if let Some(cap) = capture.as_mut() {
                    cap.a2v.push(head_mean(&a2v.value()));
                    cap.v2a.push(head_mean(&v2a.value()));
                }
                h_v = v_next;
                h_a = a_next;
            }

            h_v = block.video.ffn(ctx, h_v, t_emb_v);
            h_a = block.audio.ffn(ctx, h_a, t_emb_a);
            h_v.value()
                .validate(&format!("video hidden state after layer {layer}"))?;
            h_a.value()
                .validate(&format!("audio hidden state after layer {layer}"))?;
        }

        let finish = |head: &StreamHead, h: Var<'g>, t_emb: Var<'g>| {
            let mods = head.final_mod.forward(ctx, t_emb);
            let x = head
                .final_norm
                .forward(ctx, h)
                .mul(mods[1].affine(1.0, 1.0))
                .add(mods[0]);
            head.out_proj.forward(ctx, x)
        };
        let velocity_video =
            finish(&self.video_head, h_v, t_emb_v).reshape(&[t_lat, h_lat, w_lat, cfg.c_video]);
        let velocity_audio = finish(&self.audio_head, h_a, t_emb_a);

        Ok(ForwardOutput {
            velocity_video,
            velocity_audio,
            capture,
        })
    }
}

/// Mean over the leading (head) axis: `[H, Tq, Tk] -> [Tq, Tk]`.
fn head_mean(probs: &Tensor) -> Tensor {
    let s = probs.shape();
    let (h, tq, tk) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; tq * tk];
    for head in 0..h {
        for (slot, &v) in out
            .iter_mut()
            .zip(&probs.data()[head * tq * tk..(head + 1) * tq * tk])
        {
            *slot += v;
        }
    }
    for v in out.iter_mut() {
        *v /= h as f64;
    }
    Tensor::from_vec(&[tq, tk], out)
}
