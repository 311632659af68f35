//! Glioma segmentation pipeline components: volumetric data model and I/O,
//! preprocessing, style-transfer augmentation, a deep-supervised U-Net
//! trained from scratch, cross-validation bookkeeping and evaluation
//! statistics, plus a synthetic phantom generator for end-to-end checks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![cfg_attr(test, allow(clippy::needless_range_loop))]

pub mod descriptor;
pub mod error;
pub mod features;
pub mod metrics;
pub mod nifti;
pub mod nst;
pub mod optim;
pub mod phantom;
pub mod preprocess;
pub mod real;
pub mod stats;
pub mod train;
pub mod unet;
pub mod volume;

pub use error::{Error, Result};
