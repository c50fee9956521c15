//! Desk-scale asymmetric dual-stream audiovisual diffusion transformer.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`graph`] / [`nn`]: dense f64 tensors, reverse-mode
//!   autodiff, layers, optimizer, gradient checking.
//! - [`posenc`]: rotary positional embeddings (3D video, 1D temporal) on a
//!   shared seconds-based time axis.
//! - [`textcond`]: stub text encoder, multi-layer feature extractor, and
//!   per-stream connectors with thinking tokens.
//! - [`model`]: the dual-stream transformer backbone.
//! - [`codecs`]: causal audio/video autoencoders and the feature front ends.
//! - [`flowtrain`]: synthetic paired data and the flow-matching trainer.
//! - [`sampler`]: guided Euler sampling, latent upscaling, tiled refinement.
//! - [`probes`]: the named invariant-probe registry behind `avdit probe`.
//! - [`artifacts`] / [`config`]: checkpoints, WAV/PNG outputs, run configs.

pub mod artifacts;
pub mod codecs;
pub mod error;
pub mod flowtrain;
pub mod graph;
pub mod model;
pub mod nn;
pub mod posenc;
pub mod tensor;
pub mod textcond;

pub use error::{CoreError, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

/// Worker pool for independent graphs (batch samples, tiles). Honors the
/// `AVDIT_THREADS` cap; results never depend on the chosen thread count
/// because reductions happen in slot order.
pub fn thread_pool() -> rayon::ThreadPool {
    let threads = std::env::var("AVDIT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    builder.build().expect("failed to build thread pool")
}
