//! Deep-supervised U-Net (2D and 3D) trained from scratch.
//!
//! 2D models work on axial slices: their spatial tensors have depth 1 and
//! every kernel/stride triple has a leading 1.

mod checkpoint;
mod infer;
mod loss;
mod model;
mod ops;
mod tensor;

pub use checkpoint::{
    checkpoint_decode, checkpoint_encode, checkpoint_load, checkpoint_save, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use infer::{sliding_window_predict, sliding_window_probabilities, tile_starts};
pub use loss::{deep_supervision_weights, dice_ce_loss, downsample_labels, LevelLoss, LossOutput, DICE_EPS};
pub use model::{poly_lr, ForwardCache, Gradients, LRSchedule, ModelState, ParamInfo, ParamKind, RngState};
pub use ops::{ConvGeom, UpGeom, LEAKY_SLOPE, NORM_EPS};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::NUM_CLASSES;

/// Number of input channels (T1, T1ce, T2, FLAIR).
pub const IN_CHANNELS: usize = 4;
/// Feature width cap.
pub const MAX_FEATURES: usize = 320;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dimensionality {
    #[serde(rename = "2D")]
    TwoD,
    #[serde(rename = "3D")]
    ThreeD,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub dimensionality: Dimensionality,
    pub base_features: usize,
    pub stage_count: usize,
    /// Stride of the first convolution of each encoder stage, `(D, H, W)`.
    pub strides: Vec<[usize; 3]>,
    /// Convolution kernel per stage, `(D, H, W)`.
    pub kernels: Vec<[usize; 3]>,
    /// Training patch, `(D, H, W)`; `D = 1` for 2D.
    pub patch_size: [usize; 3],
    pub batch_size: usize,
    pub deep_supervision_levels: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl UNetConfig {
    /// Desk-scale 2D model: base 8, three stages, 32² patches.
    pub fn desk_2d(seed: u64) -> Self {
        UNetConfig {
            dimensionality: Dimensionality::TwoD,
            base_features: 8,
            stage_count: 3,
            strides: vec![[1, 1, 1], [1, 2, 2], [1, 2, 2]],
            kernels: vec![[1, 3, 3]; 3],
            patch_size: [1, 32, 32],
            batch_size: 4,
            deep_supervision_levels: 1,
            num_classes: NUM_CLASSES,
            seed,
        }
    }

    /// Desk-scale 3D model: base 8, three stages, 32³ patches.
    pub fn desk_3d(seed: u64) -> Self {
        UNetConfig {
            dimensionality: Dimensionality::ThreeD,
            base_features: 8,
            stage_count: 3,
            strides: vec![[1, 1, 1], [2, 2, 2], [2, 2, 2]],
            kernels: vec![[3, 3, 3]; 3],
            patch_size: [32, 32, 32],
            batch_size: 2,
            deep_supervision_levels: 1,
            num_classes: NUM_CLASSES,
            seed,
        }
    }

    /// Full-resolution 3D configuration: batch 2, 128³ patches, 32 base
    /// features, six stages.
    pub fn full_3d(seed: u64) -> Self {
        let mut strides = vec![[1, 1, 1]];
        strides.extend(std::iter::repeat_n([2, 2, 2], 5));
        UNetConfig {
            dimensionality: Dimensionality::ThreeD,
            base_features: 32,
            stage_count: 6,
            strides,
            kernels: vec![[3, 3, 3]; 6],
            patch_size: [128, 128, 128],
            batch_size: 2,
            deep_supervision_levels: 4,
            num_classes: NUM_CLASSES,
            seed,
        }
    }

    /// Full-resolution 2D configuration: batch 105, 192×160 patches.
    pub fn full_2d(seed: u64) -> Self {
        let mut strides = vec![[1, 1, 1]];
        strides.extend(std::iter::repeat_n([1, 2, 2], 5));
        UNetConfig {
            dimensionality: Dimensionality::TwoD,
            base_features: 32,
            stage_count: 6,
            strides,
            kernels: vec![[1, 3, 3]; 6],
            patch_size: [1, 192, 160],
            batch_size: 105,
            deep_supervision_levels: 4,
            num_classes: NUM_CLASSES,
            seed,
        }
    }

    /// Named presets used by the CLI and experiment manifests.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "desk2d" => Ok(Self::desk_2d(seed)),
            "desk3d" => Ok(Self::desk_3d(seed)),
            "full2d" => Ok(Self::full_2d(seed)),
            "full3d" => Ok(Self::full_3d(seed)),
            other => Err(Error::InvalidArgument(format!(
                "unknown model config {other:?} (expected desk2d, desk3d, full2d, full3d)"
            ))),
        }
    }

    pub fn with_patch(mut self, patch: [usize; 3]) -> Self {
        self.patch_size = patch;
        self
    }

    /// Feature width of stage `s`.
    pub fn features(&self, stage: usize) -> usize {
        (self.base_features << stage).min(MAX_FEATURES)
    }

    /// Cumulative downsampling factor of decoder level `k` relative to the patch.
    pub fn level_factor(&self, level: usize) -> [usize; 3] {
        let mut f = [1usize; 3];
        for s in self.strides.iter().take(level + 1) {
            for a in 0..3 {
                f[a] *= s[a];
            }
        }
        f
    }

    pub fn level_shape(&self, level: usize, spatial: [usize; 3]) -> [usize; 3] {
        let f = self.level_factor(level);
        std::array::from_fn(|a| spatial[a] / f[a])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.stage_count == 0 || self.base_features == 0 || self.batch_size == 0 {
            return bad("stage_count, base_features and batch_size must be positive".into());
        }
        if self.strides.len() != self.stage_count || self.kernels.len() != self.stage_count {
            return bad(format!(
                "need one stride and kernel per stage ({}), got {} / {}",
                self.stage_count,
                self.strides.len(),
                self.kernels.len()
            ));
        }
        if self.num_classes != NUM_CLASSES {
            return bad(format!("num_classes must be {NUM_CLASSES}"));
        }
        if self.deep_supervision_levels + 1 > self.stage_count {
            return bad(format!(
                "deep_supervision_levels {} must be ≤ stage_count − 1 = {}",
                self.deep_supervision_levels,
                self.stage_count - 1
            ));
        }
        if self.kernels.iter().flatten().any(|&k| k == 0 || k % 2 == 0) {
            return bad(format!("kernels must be odd, got {:?}", self.kernels));
        }
        if self.strides.iter().flatten().any(|&s| s == 0) {
            return bad("strides must be positive".into());
        }
        if self.dimensionality == Dimensionality::TwoD
            && (self.patch_size[0] != 1
                || self.strides.iter().any(|s| s[0] != 1)
                || self.kernels.iter().any(|k| k[0] != 1))
        {
            return bad("2D configs need depth 1 patches, strides and kernels".into());
        }
        let total = self.level_factor(self.stage_count - 1);
        for a in 0..3 {
            if self.patch_size[a] == 0 || !self.patch_size[a].is_multiple_of(total[a]) {
                return Err(Error::Shape(format!(
                    "patch {:?} is not divisible by the stride product {:?}",
                    self.patch_size, total
                )));
            }
        }
        Ok(())
    }
}
