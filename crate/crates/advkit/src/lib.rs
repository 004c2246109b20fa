//! Training and evaluation of universal adversarial noise against frozen
//! image encoders.
//!
//! The library is organized around a small number of moving parts:
//!
//! * [`config`] — run configuration, validation, and content digests.
//! * [`tensor`] — a reverse-mode autodiff graph over `f64` ndarrays, plus the
//!   Adam optimizer. Everything that trains goes through this.
//! * [`frequency`] — ideal low-pass / high-frequency decomposition in the
//!   2-D FFT domain.
//! * [`generator`] — the upsampling conv generator that maps a fixed latent
//!   vector to a full-resolution noise image.
//! * [`losses`] — contrastive, high-frequency, and quality objectives.
//! * [`attack`] — noise/patch application, the training loop, and artifact
//!   serialization.
//! * [`encoders`] — a small contrastive encoder trained from scratch, linear
//!   probes, and checkpoint I/O.
//! * [`data`] — synthetic and on-disk dataset loading.
//! * [`evaluation`] — accuracy, attack success rate, retrieval mAP, and
//!   transfer matrices.
//! * [`defenses`] — input corruption, pruning, fine-tuning, and adversarial
//!   re-training counters.
//! * [`plan`] — multi-stage experiment plans, run manifests, and report
//!   emission.
//!
//! Batch-level work is data-parallel over a rayon pool when the `parallel`
//! feature (on by default) is enabled; a sequential path is always compiled
//! and produces bit-identical results, see [`parallel::ExecMode`].

pub mod attack;
pub mod config;
pub mod data;
pub mod defenses;
pub mod encoders;
pub mod evaluation;
pub mod frequency;
pub mod generator;
pub mod losses;
pub mod parallel;
pub mod plan;
pub mod tensor;

mod plot;
mod serialize;

pub use config::{AttackConfig, Mode, PatchPosition};

/// Version string recorded in manifests and checkpoints.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
