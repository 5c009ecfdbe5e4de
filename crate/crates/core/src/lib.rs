//! Mask-aware diffusion inpainting.
//!
//! The pipeline finetunes a small denoiser on the known region of a single
//! image, then samples the hole with a DDIM loop that re-imposes the known
//! region after every step. Optional guidance comes from a text prompt, an
//! exemplar bound to a subject token, a colour stroke injected at an
//! intermediate timestep, or any mix of these; masked attention keeps the
//! guidance from bleeding into known pixels.
//!
//! Modules map onto the pipeline stages:
//!
//! * [`codec`]: lossless image <-> latent transform and mask downsampling
//! * [`schedule`]: noise schedule, forward noising, DDIM and CFG arithmetic
//! * [`backbone`]: the trainable U-Net, tokenizer and checkpoints
//! * [`attention`]: masked attention and mask construction
//! * [`finetune`]: masked background / exemplar losses and the training loop
//! * [`guidance`]: subject-token retrieval and guidance specs
//! * [`sampler`]: the blending inpainting loop
//! * [`metrics`]: stroke RMSE, known-region error, embedding similarity
//! * [`pipeline`]: the prepare / finetune / inpaint steps front ends share

pub mod attention;
pub mod backbone;
pub mod codec;
pub mod error;
pub mod finetune;
pub mod graph;
pub mod guidance;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod raster;
pub mod sampler;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
