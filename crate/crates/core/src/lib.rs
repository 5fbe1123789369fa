//! Template-conditioned diffusion over structured pose maps.
//!
//! A 6D object pose is represented as two `p x p x 3` maps: a bundle of
//! object-centred rays encoding the rotation and a dense map of normalised
//! centroid offsets plus a zoom-normalised depth encoding the translation.
//! A small multiview transformer denoises these maps conditioned on a query
//! crop and a set of posed template crops; the pose is recovered by SVD
//! alignment of the rays and back-projection of the offsets.
//!
//! Module map:
//! - [`geometry`]: rigid transforms, Procrustes alignment, rotation metrics
//! - [`posemap`]: exact codecs between poses and pose maps
//! - [`diffusion`]: noise schedules, forward corruption, ancestral sampler
//! - [`model`]: tensors, reverse-mode autodiff, the denoising network, Adam
//! - [`losses`]: rotation, translation and total training objectives
//! - [`datagen`]: procedural toy objects, rendering, template samplers, dataset files
//! - [`harness`]: training, coarse-to-fine inference, evaluation, ablations, plotting

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod model;
pub mod posemap;

pub use error::{Error, Result};
pub use geometry::{CropSpec, Intrinsics, Pose, Rotation};
pub use posemap::{CanonicalGrid, CellMap, RayMap, TranslationMap};
