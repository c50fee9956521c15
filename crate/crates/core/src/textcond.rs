//! Text conditioning: a frozen deterministic stub encoder standing in for
//! the LLM, the multi-layer feature extractor, and per-stream connectors
//! that splice learnable thinking tokens into padded positions.
//!
//! The stub keeps the `[T, D, L]` layer-stack interface of a real decoder
//! stack, so a genuine LLM could be slotted in behind [`stub_encode`].

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::graph::Var;
use crate::nn::{Ctx, Init, Linear, MultiHead, ParamInit, QkvMods, RmsNorm};
use crate::tensor::{splitmix, Tensor};

/// Stream selector for the per-stream connectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Video,
    Audio,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Video => "video",
            Stream::Audio => "audio",
        }
    }
}

/// Dimensions of the text pipeline.
#[derive(Clone, Copy, Debug)]
pub struct TextConfig {
    /// Stub embedding width D.
    pub d_embed: usize,
    /// Stub layer count L.
    pub n_layers: usize,
    /// Padded prompt length.
    pub t_max: usize,
    /// Connector width / conditioning width.
    pub d_cond: usize,
    /// Maximum thinking tokens spliced into pads.
    pub k_max: usize,
    /// Connector depth.
    pub n_conn: usize,
    /// Connector attention heads.
    pub n_heads: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            d_embed: 64,
            n_layers: 4,
            t_max: 32,
            d_cond: 64,
            k_max: 8,
            n_conn: 2,
            n_heads: 2,
        }
    }
}

// ---- tokenizer ----

/// Whitespace tokenizer with byte fallback. Ids 0..256 are reserved for
/// raw bytes; word ids start at 256. The vocabulary round-trips as a JSON
/// map from word to id.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    words: BTreeMap<String, u32>,
}

pub const BYTE_VOCAB: u32 = 256;

impl Tokenizer {
    pub fn new(words: &[&str]) -> Tokenizer {
        let mut map = BTreeMap::new();
        for w in words {
            let next = BYTE_VOCAB + map.len() as u32;
            map.entry(w.to_string()).or_insert(next);
        }
        Tokenizer { words: map }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            match self.words.get(word) {
                Some(&id) => out.push(id),
                None => out.extend(word.bytes().map(u32::from)),
            }
        }
        out
    }

    pub fn vocab_len(&self) -> usize {
        BYTE_VOCAB as usize + self.words.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.words)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Tokenizer> {
        let raw = std::fs::read_to_string(path)?;
        let words: BTreeMap<String, u32> = serde_json::from_str(&raw)?;
        Ok(Tokenizer { words })
    }
}

// ---- stub encoder ----

/// Pseudo embeddings of shape `[T_max, D, L]`: every (token, position,
/// layer, dim) cell comes from a seeded hash, padded positions carry a fixed
/// pad vector. Bitwise identical across runs.
pub fn stub_encode(prompt: &[u32], cfg: &TextConfig) -> Result<Tensor> {
    if prompt.len() > cfg.t_max {
        return Err(CoreError::invalid(
            "stub_encode",
            format!("prompt length {} exceeds T_max {}", prompt.len(), cfg.t_max),
        ));
    }
    let mut data = Vec::with_capacity(cfg.t_max * cfg.d_embed * cfg.n_layers);
    for pos in 0..cfg.t_max {
        for d in 0..cfg.d_embed {
            for l in 0..cfg.n_layers {
                let cell = match prompt.get(pos) {
                    Some(&tok) => hash_unit(&[1, tok as u64, pos as u64, l as u64, d as u64]),
                    // pad vector: independent of position
                    None => hash_unit(&[2, l as u64, d as u64]),
                };
                data.push(cell);
            }
        }
    }
    Ok(Tensor::from_vec(&[cfg.t_max, cfg.d_embed, cfg.n_layers], data))
}

fn hash_unit(tags: &[u64]) -> f64 {
    let mut h = 0x51ab_1e00_7ea7_c0deu64;
    for &t in tags {
        h = splitmix(h ^ t);
    }
    // map the top 53 bits to [-1, 1)
    (h >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

// ---- feature extractor ----

/// Step 1 of the extractor: per layer, subtract the mean and divide by the
/// standard deviation computed jointly over the (T, D) axes, then flatten
/// layers per token into `[T, D*L]` (layer-major feature order).
///
/// `eps` is a variance floor: a layer with variance at or below it is
/// zeroed. Passing `None` disables the floor and makes zero variance an
/// error.
pub fn standardize_layers(stack: &Tensor, eps: Option<f64>) -> Result<Tensor> {
    let shape = stack.shape();
    if shape.len() != 3 {
        return Err(CoreError::shape(
            "standardize_layers",
            format!("expected [T, D, L], got {shape:?}"),
        ));
    }
    let (t, d, l) = (shape[0], shape[1], shape[2]);
    let n = (t * d) as f64;
    let src = stack.data();
    let mut out = vec![0.0; t * d * l];
    for layer in 0..l {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for pos in 0..t {
            for dim in 0..d {
                let v = src[(pos * d + dim) * l + layer];
                sum += v;
                sum_sq += v * v;
            }
        }
        let mean = sum / n;
        let var = (sum_sq / n - mean * mean).max(0.0);
        let floor = eps.unwrap_or(0.0);
        if var <= floor {
            if eps.is_none() {
                return Err(CoreError::invalid(
                    "standardize_layers",
                    format!("layer {layer} has zero variance and the eps floor is disabled"),
                ));
            }
            continue; // layer slice stays zero
        }
        let std = var.sqrt();
        for pos in 0..t {
            for dim in 0..d {
                let v = src[(pos * d + dim) * l + layer];
                out[pos * (d * l) + layer * d + dim] = (v - mean) / std;
            }
        }
    }
    Ok(Tensor::from_vec(&[t, d * l], out))
}

/// The learnable projection from the flattened layer stack to the
/// conditioning width.
#[derive(Clone)]
pub struct FeatureExtractor {
    pub cfg: TextConfig,
    pub eps: Option<f64>,
}

/// Name of the jointly-optimized-then-frozen projection matrix.
pub const W_PROJ: &str = "text.extractor.w";

impl FeatureExtractor {
    pub fn new(p: &mut ParamInit, cfg: TextConfig) -> FeatureExtractor {
        let d_in = cfg.d_embed * cfg.n_layers;
        p.tensor(
            W_PROJ,
            &[d_in, cfg.d_cond],
            Init::Xavier {
                fan_in: d_in,
                fan_out: cfg.d_cond,
            },
        );
        FeatureExtractor {
            cfg,
            eps: Some(1e-6),
        }
    }

    /// Standardize + flatten + project: `[T, D, L] -> [T, D_cond]`.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, stack: &Tensor) -> Result<Var<'g>> {
        let flat = standardize_layers(stack, self.eps)?;
        let w = ctx.param(W_PROJ);
        Ok(ctx.constant(flat).matmul(w))
    }
}

// ---- connectors ----

/// Conditioning tokens handed to the diffusion cross-attention. `tokens`
/// lives on the caller's graph so connector parameters receive gradients.
#[derive(Clone, Copy)]
pub struct CondTokens<'g> {
    pub tokens: Var<'g>,
    pub prompt_len: usize,
    pub n_thinking: usize,
    pub is_null: bool,
}

struct ConnBlock {
    norm_attn: RmsNorm,
    attn: MultiHead,
    norm_ffn: RmsNorm,
    ffn_in: Linear,
    ffn_out: Linear,
}

impl ConnBlock {
    fn new(p: &mut ParamInit, name: &str, d: usize, heads: usize) -> ConnBlock {
        ConnBlock {
            norm_attn: RmsNorm::new(p, &format!("{name}.norm_attn"), d, 1e-6),
            attn: MultiHead::new(p, &format!("{name}.attn"), d, d, d, d, heads),
            norm_ffn: RmsNorm::new(p, &format!("{name}.norm_ffn"), d, 1e-6),
            ffn_in: Linear::new(p, &format!("{name}.ffn_in"), d, 4 * d, true),
            ffn_out: Linear::new(p, &format!("{name}.ffn_out"), 4 * d, d, true),
        }
    }

    fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.norm_attn.forward(ctx, x);
        let (attended, _) = self
            .attn
            .forward(ctx, h, h, None, None, QkvMods::default())?;
        let x = x.add(attended);
        let h = self.norm_ffn.forward(ctx, x);
        let ffn = self.ffn_out.forward(ctx, self.ffn_in.forward(ctx, h).silu());
        Ok(x.add(ffn))
    }
}

/// Per-stream text connector: thinking-token splice, bidirectional
/// transformer blocks, caption projection, and the learned null sequence
/// for classifier-free guidance.
pub struct Connector {
    pub stream: Stream,
    pub cfg: TextConfig,
    thinking: String,
    null_seq: String,
    blocks: Vec<ConnBlock>,
    caption: Linear,
}

impl Connector {
    pub fn new(p: &mut ParamInit, stream: Stream, cfg: TextConfig) -> Connector {
        let prefix = format!("{}.connector", stream.name());
        let thinking = format!("{prefix}.thinking");
        p.tensor(&thinking, &[cfg.k_max, cfg.d_cond], Init::Normal(0.02));
        let null_seq = format!("{prefix}.null_seq");
        p.tensor(&null_seq, &[cfg.t_max, cfg.d_cond], Init::Normal(0.02));
        let blocks = (0..cfg.n_conn)
            .map(|i| ConnBlock::new(p, &format!("{prefix}.block{i}"), cfg.d_cond, cfg.n_heads))
            .collect();
        let caption = Linear::new(p, &format!("{prefix}.caption"), cfg.d_cond, cfg.d_cond, true);
        Connector {
            stream,
            cfg,
            thinking,
            null_seq,
            blocks,
            caption,
        }
    }

    /// Splice thinking tokens over the leading pad positions, refine through
    /// the bidirectional blocks, and project. Output length is always T_max.
    pub fn connect<'g>(
        &self,
        ctx: &Ctx<'g>,
        features: Var<'g>,
        prompt_len: usize,
    ) -> Result<CondTokens<'g>> {
        let t_max = self.cfg.t_max;
        if prompt_len > t_max {
            return Err(CoreError::invalid(
                "connect_text",
                format!("prompt_len {prompt_len} exceeds T_max {t_max}"),
            ));
        }
        let shape = features.shape();
        if shape != [t_max, self.cfg.d_cond] {
            return Err(CoreError::shape(
                "connect_text",
                format!("features {shape:?}, expected [{t_max}, {}]", self.cfg.d_cond),
            ));
        }
        let n_thinking = self.cfg.k_max.min(t_max - prompt_len);

        let mut x = features;
        if n_thinking > 0 {
            // selection matrix routes thinking token j to pad position
            // prompt_len + j; the keep mask zeroes the replaced rows
            let mut select = vec![0.0; t_max * self.cfg.k_max];
            let mut keep = vec![1.0; t_max];
            for j in 0..n_thinking {
                select[(prompt_len + j) * self.cfg.k_max + j] = 1.0;
                keep[prompt_len + j] = 0.0;
            }
            let select = ctx.constant(Tensor::from_vec(&[t_max, self.cfg.k_max], select));
            let keep = ctx.constant(Tensor::from_vec(&[t_max, 1], keep));
            let spliced = select.matmul(ctx.param(&self.thinking));
            x = x.mul(keep).add(spliced);
        }
        for block in &self.blocks {
            x = block.forward(ctx, x)?;
        }
        let tokens = self.caption.forward(ctx, x);
        Ok(CondTokens {
            tokens,
            prompt_len,
            n_thinking,
            is_null: false,
        })
    }

    /// The stream's learned null sequence, stable across calls.
    pub fn null_conditioning<'g>(&self, ctx: &Ctx<'g>) -> CondTokens<'g> {
        CondTokens {
            tokens: ctx.param(&self.null_seq),
            prompt_len: 0,
            n_thinking: 0,
            is_null: true,
        }
    }
}
