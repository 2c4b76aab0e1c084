//! CORA: a desk-scale semi-supervised reasoning-segmentation framework.
//!
//! The crate covers the full pipeline:
//!
//! - [`data`] renders a synthetic "shapes-world" dataset (images + exact
//!   label maps) and produces labeled/unlabeled split manifests.
//! - [`maskgeo`] extracts object instances and spatial relations from
//!   label maps.
//! - [`instructgen`] synthesizes semantic, attribute-based, and
//!   conditional segmentation instructions from labeled masks, plus the
//!   per-class query database used on unlabeled images.
//! - [`model`] is a small, fully differentiable query-conditioned mask
//!   predictor with hand-derived gradients.
//! - [`losses`] implements the labeled and unlabeled training objectives
//!   (BCE + Dice, weighted pseudo-label loss, InfoNCE token alignment)
//!   with analytic gradients.
//! - [`consistency`] turns prediction variance across query rephrasings
//!   into per-pixel reliability weights, and hosts the pluggable
//!   pseudo-labelers.
//! - [`tokenbank`] keeps a class-keyed FIFO memory of segmentation
//!   tokens from labeled passes for the contrastive loss.
//! - [`train`] runs the three-stage training loop with AdamW and
//!   evaluates cumulative IoU.
//!
//! Everything is deterministic per seed in single-thread mode; all
//! randomness flows through [`rng`] sub-seed derivation.

pub mod consistency;
pub mod data;
pub mod instructgen;
pub mod losses;
pub mod maskgeo;
pub mod model;
pub mod pnm;
pub mod rng;
pub mod tokenbank;
pub mod train;

pub use maskgeo::{BinaryMask, LabelMap, ObjectInstance, SpatialRelation};
