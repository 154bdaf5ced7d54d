//! Thalamic nuclei segmentation toolkit.
//!
//! Segments the 13 thalamic nuclei from multimodal MRI crops at ultra-high
//! resolution (0.5 mm isotropic), using a decoder-only pyramidal network,
//! a subject-specific atlas prior built by fast deformable registration and
//! local weighted label fusion, and an incremental semi-supervised curriculum
//! that absorbs unlabeled cohorts in similarity order.
//!
//! The crate is organised around a small set of subsystems:
//!
//! - [`volumes`]: 3-D volume / label-map types and the exact geometry ops
//!   the method depends on (crop, mirror, pad, pool, resample, z-score).
//! - [`phantom`]: deterministic synthetic thalamus phantoms with ground-truth
//!   nuclei labels, used everywhere real data would be.
//! - [`nn`]: a compact CPU tensor engine (conv3d, batch norm, pooling,
//!   resampling, displacement warps) with reverse-mode gradients.
//! - [`models`]: declarative network builders (pyramidal decoder, U-shaped
//!   baseline, synthesis, superresolution, autoencoder, registration) and the
//!   full-volume training loop with augmentation and Adamax.
//! - [`losses`] / [`metrics`]: the log-composite segmentation loss
//!   (volume-weighted generalised Dice + binary cross entropy), Dice reports,
//!   and the Wilcoxon signed-rank test.
//! - [`atlas`]: similarity-based library selection, registration and local
//!   weighted majority-vote label fusion into a subject-specific prior.
//! - [`curriculum`]: embedding index, batch ranking, pseudo-labeling and the
//!   resumable incremental fine-tuning engine.
//! - [`pipeline`]: the end-to-end standard-resolution T1 pipeline
//!   (denoise, affine, bias, normalise, ICV, superresolve, crop, synthesise,
//!   atlas, ensemble segmentation) plus the label-transfer workflow.
//! - [`report`]: volumetry reports, asymmetry, normative bounds and the
//!   dispersion comparison.
//!
//! All randomness flows from explicit `u64` seeds; every operation in the
//! crate is deterministic given its inputs and seed.

pub mod atlas;
pub mod config;
pub mod curriculum;
pub mod error;
pub mod experiments;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod report;
pub mod volumes;

pub use error::{Error, Result};
