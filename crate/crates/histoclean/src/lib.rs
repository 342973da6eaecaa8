//! Weakly-supervised CycleGAN toolkit for removing artifacts from
//! histopathology tiles.
//!
//! Slide scanning leaves tiles contaminated with pen marker, ink, blur, air
//! bubbles, tissue folds, dust and filaments. This crate trains unpaired
//! image-to-image translation models that map artifact tiles (domain A) to
//! clean tissue (domain B) and evaluates them with Fréchet distances over
//! feature embeddings. Six model variants are supported:
//!
//! * `base` — plain CycleGAN with UNet generators and patch discriminators,
//! * `dpa` — same objective with attention-gated UNet generators,
//! * `cond` — `G_BA`/`D_A` conditioned on a one-hot artifact class,
//! * `no_aba` — the A→B→A cycle weight set to zero,
//! * `attn` — a per-pixel attention map over the cleaner's penultimate
//!   features is handed to `G_BA` as an extra input channel,
//! * `ws` — `attn` plus a weak-label classifier with smoothness/sparsity
//!   regularisation of the attention mask.
//!
//! The crate is organised the way the training pipeline flows:
//!
//! * [`data`] — tile manifests, train/test splitting, augmentation, the
//!   synthetic paired-artifact corpus, and unpaired batch streams.
//! * [`tape`] — a small reverse-mode autodiff engine over `ndarray`.
//! * [`params`] / [`optim`] — named parameter storage and AdamW.
//! * [`networks`] — UNet generators, patch discriminators, the attention
//!   head, RGB projector, weak-label classifier and condition encoding.
//! * [`losses`] — least-squares adversarial, cycle, identity,
//!   classification, smoothness and sparsity objectives plus their
//!   weighted compositions.
//! * [`trainer`] — the alternating minmax loop, checkpoints and metrics.
//! * [`eval`] — feature extraction, Fréchet distance, paired PSNR, mask
//!   statistics and mosaic rendering.
//! * [`cli`] — the `histoclean` command-line front end.
//!
//! Runnable entry points for each capability live under `examples/`.

pub mod cli;
pub mod data;
pub mod eval;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod params;
pub mod tape;
pub mod trainer;

mod seed;

pub use seed::derive_seed;
