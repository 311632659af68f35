//! Volumetric data model: intensity grids, label volumes, composite tumour
//! regions and the per-case container.
//!
//! Arrays are stored as `(D, H, W)` in row-major order, i.e. the NIfTI `x`
//! axis is the fastest varying one and `D` is the axial (`z`) axis. Spacing
//! triples follow the same `(D, H, W)` order.

use std::fmt;

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;
pub const NECROTIC_CORE: u8 = 1;
pub const EDEMA: u8 = 2;
pub const ENHANCING: u8 = 3;
pub const NUM_CLASSES: usize = 4;

/// Spatial orientation fields carried through I/O untouched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Orientation {
    pub qform_code: i16,
    pub sform_code: i16,
    pub qfac: f32,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow_x: [f32; 4],
    pub srow_y: [f32; 4],
    pub srow_z: [f32; 4],
}

impl Default for Orientation {
    fn default() -> Self {
        Orientation {
            qform_code: 0,
            sform_code: 0,
            qfac: 1.0,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow_x: [0.0; 4],
            srow_y: [0.0; 4],
            srow_z: [0.0; 4],
        }
    }
}

/// A 3D grid with physical spacing. `VoxelGrid` and `LabelVolume` are the two
/// instantiations used throughout the crate.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    data: Array3<T>,
    spacing: [f32; 3],
    pub orientation: Orientation,
}

pub type VoxelGrid = Volume<f32>;
pub type LabelVolume = Volume<u8>;

fn check_spacing(spacing: [f32; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("spacing components must be positive, got {spacing:?}")))
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::InvalidArgument(format!("dimensions must be positive, got {dims:?}")));
    }
    Ok(())
}

impl<T> Volume<T> {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn into_data(self) -> Array3<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same dims and spacing.
    pub fn same_geometry<U>(&self, other: &Volume<U>) -> bool {
        self.dims() == other.dims() && self.spacing == other.spacing
    }
}

impl VoxelGrid {
    /// Validated constructor: positive dims and spacing, every value finite.
    pub fn new(data: Array3<f32>, spacing: [f32; 3]) -> Result<Self> {
        check_dims(data.shape())?;
        check_spacing(spacing)?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite intensity at flat index {pos}")));
        }
        Ok(Volume { data: data.as_standard_layout().into_owned(), spacing, orientation: Orientation::default() })
    }

    pub fn zeros(dims: (usize, usize, usize), spacing: [f32; 3]) -> Result<Self> {
        Self::new(Array3::zeros(dims), spacing)
    }

    /// Replaces the payload, keeping spacing and orientation.
    pub fn with_data(&self, data: Array3<f32>) -> Result<Self> {
        let mut v = Self::new(data, self.spacing)?;
        v.orientation = self.orientation;
        Ok(v)
    }
}

impl LabelVolume {
    pub fn new(data: Array3<u8>, spacing: [f32; 3]) -> Result<Self> {
        check_dims(data.shape())?;
        check_spacing(spacing)?;
        if let Some(bad) = data.iter().find(|&&c| c as usize >= NUM_CLASSES) {
            return Err(Error::InvalidArgument(format!("invalid label code {bad}")));
        }
        Ok(Volume { data: data.as_standard_layout().into_owned(), spacing, orientation: Orientation::default() })
    }

    pub fn with_data(&self, data: Array3<u8>) -> Result<Self> {
        let mut v = Self::new(data, self.spacing)?;
        v.orientation = self.orientation;
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    T1,
    T1ce,
    T2,
    #[serde(rename = "FLAIR")]
    Flair,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T1, Modality::T1ce, Modality::T2, Modality::Flair];

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "T1",
            Modality::T1ce => "T1ce",
            Modality::T2 => "T2",
            Modality::Flair => "FLAIR",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Four co-registered channels in fixed order T1, T1ce, T2, FLAIR.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalVolume {
    channels: [VoxelGrid; 4],
}

impl MultiModalVolume {
    pub fn new(channels: [VoxelGrid; 4]) -> Result<Self> {
        let first = &channels[0];
        for (m, ch) in Modality::ALL.iter().zip(channels.iter()).skip(1) {
            if !first.same_geometry(ch) {
                return Err(Error::Shape(format!(
                    "channel {m} has dims {:?} spacing {:?}, expected {:?} {:?}",
                    ch.dims(),
                    ch.spacing(),
                    first.dims(),
                    first.spacing()
                )));
            }
        }
        Ok(MultiModalVolume { channels })
    }

    pub fn channel(&self, m: Modality) -> &VoxelGrid {
        &self.channels[m.index()]
    }

    pub fn channels(&self) -> &[VoxelGrid; 4] {
        &self.channels
    }

    pub fn into_channels(self) -> [VoxelGrid; 4] {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.channels[0].dims()
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.channels[0].spacing()
    }

    /// Fallible per-channel map preserving channel order.
    pub fn try_map(&self, mut f: impl FnMut(Modality, &VoxelGrid) -> Result<VoxelGrid>) -> Result<Self> {
        let [a, b, c, d] = &self.channels;
        Self::new([f(Modality::T1, a)?, f(Modality::T1ce, b)?, f(Modality::T2, c)?, f(Modality::Flair, d)?])
    }
}

/// Composite evaluation regions built from label codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    #[serde(rename = "ET")]
    Enhancing,
    #[serde(rename = "TC")]
    TumorCore,
    #[serde(rename = "WT")]
    WholeTumor,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Enhancing, Region::TumorCore, Region::WholeTumor];

    pub fn members(self) -> &'static [u8] {
        match self {
            Region::Enhancing => &[ENHANCING],
            Region::TumorCore => &[NECROTIC_CORE, ENHANCING],
            Region::WholeTumor => &[NECROTIC_CORE, EDEMA, ENHANCING],
        }
    }

    pub fn contains(self, code: u8) -> bool {
        match self {
            Region::Enhancing => code == ENHANCING,
            Region::TumorCore => code == NECROTIC_CORE || code == ENHANCING,
            Region::WholeTumor => code != BACKGROUND,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Region::Enhancing => "ET",
            Region::TumorCore => "TC",
            Region::WholeTumor => "WT",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

/// Binary mask of the voxels whose label belongs to `region`.
pub fn region_mask(labels: &LabelVolume, region: Region) -> Array3<bool> {
    labels.data().mapv(|c| region.contains(c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "GLI")]
    Gli,
    #[serde(rename = "SSA")]
    Ssa,
    #[serde(rename = "PHANTOM_CLEAN")]
    PhantomClean,
    #[serde(rename = "PHANTOM_DEGRADED")]
    PhantomDegraded,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Gli => "GLI",
            Domain::Ssa => "SSA",
            Domain::PhantomClean => "PHANTOM_CLEAN",
            Domain::PhantomDegraded => "PHANTOM_DEGRADED",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub images: MultiModalVolume,
    pub truth: Option<LabelVolume>,
    pub domain: Domain,
}

impl Case {
    pub fn new(
        id: impl Into<String>,
        images: MultiModalVolume,
        truth: Option<LabelVolume>,
        domain: Domain,
    ) -> Result<Self> {
        let id = id.into();
        if let Some(t) = &truth {
            if t.dims() != images.dims() || t.spacing() != images.spacing() {
                return Err(Error::Shape(format!(
                    "case {id}: truth geometry {:?}/{:?} differs from images {:?}/{:?}",
                    t.dims(),
                    t.spacing(),
                    images.dims(),
                    images.spacing()
                )));
            }
        }
        Ok(Case { id, images, truth, domain })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.images.dims()
    }

    /// Voxels nonzero in at least one channel.
    pub fn nonzero_support(&self) -> Array3<bool> {
        let mut support = Array3::from_elem(self.dims(), false);
        for ch in self.images.channels() {
            Zip::from(&mut support).and(ch.data()).for_each(|s, &v| *s |= v != 0.0);
        }
        support
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(data: Array3<u8>) -> LabelVolume {
        LabelVolume::new(data, [1.0; 3]).unwrap()
    }

    #[test]
    fn empty_labels_give_empty_whole_tumor() {
        let l = labels(Array3::zeros((4, 4, 4)));
        assert!(region_mask(&l, Region::WholeTumor).iter().all(|&b| !b));
    }

    #[test]
    fn tumor_core_keeps_ncr_and_et_only() {
        let mut d = Array3::zeros((1, 1, 3));
        d[[0, 0, 0]] = NECROTIC_CORE;
        d[[0, 0, 1]] = EDEMA;
        d[[0, 0, 2]] = ENHANCING;
        let m = region_mask(&labels(d), Region::TumorCore);
        assert_eq!(m.iter().copied().collect::<Vec<_>>(), vec![true, false, true]);
    }

    #[test]
    fn region_members_nested() {
        let et = Region::Enhancing.members();
        let tc = Region::TumorCore.members();
        let wt = Region::WholeTumor.members();
        assert!(et.iter().all(|c| tc.contains(c)));
        assert!(tc.iter().all(|c| wt.contains(c)));
        for code in 0..4u8 {
            for r in Region::ALL {
                assert_eq!(r.contains(code), r.members().contains(&code));
            }
        }
    }

    #[test]
    fn rejects_bad_codes_and_spacing() {
        assert!(LabelVolume::new(Array3::from_elem((2, 2, 2), 4), [1.0; 3]).is_err());
        assert!(VoxelGrid::new(Array3::zeros((2, 2, 2)), [1.0, 0.0, 1.0]).is_err());
        let mut d = Array3::zeros((2, 2, 2));
        d[[1, 1, 1]] = f32::NAN;
        assert!(VoxelGrid::new(d, [1.0; 3]).is_err());
    }

    #[test]
    fn multimodal_requires_matching_geometry() {
        let a = VoxelGrid::zeros((2, 2, 2), [1.0; 3]).unwrap();
        let b = VoxelGrid::zeros((2, 2, 3), [1.0; 3]).unwrap();
        assert!(MultiModalVolume::new([a.clone(), a.clone(), a.clone(), b]).is_err());
        let c = VoxelGrid::zeros((2, 2, 2), [1.0, 1.0, 2.0]).unwrap();
        assert!(MultiModalVolume::new([a.clone(), a.clone(), c, a]).is_err());
    }

    proptest! {
        #[test]
        fn region_masks_nest(codes in proptest::collection::vec(0u8..4, 27)) {
            let l = labels(Array3::from_shape_vec((3, 3, 3), codes).unwrap());
            let et = region_mask(&l, Region::Enhancing);
            let tc = region_mask(&l, Region::TumorCore);
            let wt = region_mask(&l, Region::WholeTumor);
            for ((&e, &t), &w) in et.iter().zip(tc.iter()).zip(wt.iter()) {
                prop_assert!(w >= t && t >= e);
            }
        }

        #[test]
        fn enhancing_mask_matches_voxel_scan(codes in proptest::collection::vec(0u8..4, 512)) {
            let l = labels(Array3::from_shape_vec((8, 8, 8), codes.clone()).unwrap());
            let m = region_mask(&l, Region::Enhancing);
            for z in 0..8 { for y in 0..8 { for x in 0..8 {
                prop_assert_eq!(m[[z, y, x]], codes[z * 64 + y * 8 + x] == 3);
            }}}
        }
    }
}
