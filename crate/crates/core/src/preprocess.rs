//! Data-coherence chain applied to every case before training or inference:
//! foreground cropping, z-score normalisation over the nonzero support and
//! resampling to a common voxel spacing.

use ndarray::{s, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Case, LabelVolume, MultiModalVolume, Volume, VoxelGrid};

/// Inclusive index box, `(D, H, W)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox {
    pub fn full(dims: (usize, usize, usize)) -> Self {
        BoundingBox { lo: [0; 3], hi: [dims.0 - 1, dims.1 - 1, dims.2 - 1] }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.hi[0] - self.lo[0] + 1, self.hi[1] - self.lo[1] + 1, self.hi[2] - self.lo[2] + 1)
    }

    fn crop<T: Clone>(&self, a: &Array3<T>) -> Array3<T> {
        a.slice(s![self.lo[0]..=self.hi[0], self.lo[1]..=self.hi[1], self.lo[2]..=self.hi[2]]).to_owned()
    }
}

/// Minimal box around voxels nonzero in any channel, or `None` if there are none.
pub fn foreground_box(case: &Case) -> Option<BoundingBox> {
    let support = case.nonzero_support();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for ((z, y, x), &v) in support.indexed_iter() {
        if v {
            any = true;
            for (a, c) in [z, y, x].into_iter().enumerate() {
                lo[a] = lo[a].min(c);
                hi[a] = hi[a].max(c);
            }
        }
    }
    any.then_some(BoundingBox { lo, hi })
}

fn crop_volume<T: Clone>(
    v: &Volume<T>,
    bbox: &BoundingBox,
    build: impl Fn(Array3<T>) -> Result<Volume<T>>,
) -> Result<Volume<T>> {
    let mut out = build(bbox.crop(v.data()))?;
    out.orientation = v.orientation;
    Ok(out)
}

/// Crops every channel and the truth to the foreground box.
pub fn crop_foreground(case: &Case) -> Result<(Case, BoundingBox)> {
    let bbox =
        foreground_box(case).ok_or_else(|| Error::Degenerate(format!("case {}: every voxel is zero", case.id)))?;
    Ok((crop_to(case, &bbox)?, bbox))
}

pub fn crop_to(case: &Case, bbox: &BoundingBox) -> Result<Case> {
    let spacing = case.images.spacing();
    let images = case.images.try_map(|_, g| crop_volume(g, bbox, |d| VoxelGrid::new(d, spacing)))?;
    let truth = case.truth.as_ref().map(|t| crop_volume(t, bbox, |d| LabelVolume::new(d, spacing))).transpose()?;
    Case::new(case.id.clone(), images, truth, case.domain)
}

/// Mean and population standard deviation over nonzero voxels.
pub fn nonzero_moments(values: impl IntoIterator<Item = f32>) -> Option<(f64, f64, usize)> {
    let (mut n, mut sum) = (0usize, 0f64);
    let vals: Vec<f64> = values
        .into_iter()
        .filter(|&v| v != 0.0)
        .map(f64::from)
        .inspect(|v| {
            n += 1;
            sum += v;
        })
        .collect();
    if n == 0 {
        return None;
    }
    let mean = sum / n as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    Some((mean, var.sqrt(), n))
}

/// Z-score over the nonzero support; zero voxels stay exactly zero.
pub fn normalize_nonzero(grid: &VoxelGrid) -> Result<VoxelGrid> {
    let (mean, sd, _) = nonzero_moments(grid.data().iter().copied())
        .ok_or_else(|| Error::Degenerate("normalisation of an all-zero grid".into()))?;
    if sd == 0.0 {
        return Err(Error::Degenerate("normalisation: all nonzero voxels share one value".into()));
    }
    let out = grid.data().mapv(|v| if v == 0.0 { 0.0 } else { ((f64::from(v) - mean) / sd) as f32 });
    grid.with_data(out)
}

/// Output size along one axis for a spacing change.
pub fn resampled_len(len: usize, from: f32, to: f32) -> usize {
    ((len as f64 * f64::from(from) / f64::from(to)).round() as usize).max(1)
}

/// Continuous source index sampled by output voxel `i` (voxel centres aligned
/// at physical origin of the first voxel's corner).
fn source_coord(i: usize, ratio: f64) -> f64 {
    (i as f64 + 0.5) * ratio - 0.5
}

fn check_target(target: [f32; 3]) -> Result<()> {
    if target.iter().all(|t| t.is_finite() && *t > 0.0) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("target spacing must be positive, got {target:?}")))
    }
}

/// Linear resampling of one axis with edge clamping.
fn resample_axis(a: &Array3<f32>, axis: usize, out_len: usize, ratio: f64) -> Array3<f32> {
    let n = a.len_of(Axis(axis));
    let mut shape = [a.shape()[0], a.shape()[1], a.shape()[2]];
    shape[axis] = out_len;
    let mut out = Array3::<f32>::zeros(shape);
    for i in 0..out_len {
        let x = source_coord(i, ratio).clamp(0.0, (n - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        let f = (x - i0 as f64) as f32;
        let lo = a.index_axis(Axis(axis), i0);
        let hi = a.index_axis(Axis(axis), i1);
        let mut dst = out.index_axis_mut(Axis(axis), i);
        ndarray::Zip::from(&mut dst)
            .and(&lo)
            .and(&hi)
            .for_each(|d, &l, &h| *d = if f == 0.0 { l } else { l + f * (h - l) });
    }
    out
}

/// Trilinear resize of a raw array to `dims`, voxel-centre aligned.
pub fn resize_trilinear(data: &Array3<f32>, dims: [usize; 3]) -> Array3<f32> {
    let mut out = data.clone();
    for (axis, &len) in dims.iter().enumerate() {
        let n = out.len_of(Axis(axis));
        if n != len {
            out = resample_axis(&out, axis, len.max(1), n as f64 / len.max(1) as f64);
        }
    }
    out
}

/// Trilinear resampling at voxel centres with edge clamping. Separable, so
/// it is applied one axis at a time.
pub fn resample_trilinear(grid: &VoxelGrid, target: [f32; 3]) -> Result<VoxelGrid> {
    check_target(target)?;
    let src = grid.spacing();
    let mut data = grid.data().clone();
    for axis in 0..3 {
        let n = data.len_of(Axis(axis));
        let out_len = resampled_len(n, src[axis], target[axis]);
        if out_len == n && src[axis] == target[axis] {
            continue;
        }
        let ratio = f64::from(target[axis]) / f64::from(src[axis]);
        data = resample_axis(&data, axis, out_len, ratio);
    }
    let mut out = VoxelGrid::new(data, target)?;
    out.orientation = grid.orientation;
    Ok(out)
}

/// Nearest-neighbour resampling for label volumes; never invents codes.
pub fn resample_labels(labels: &LabelVolume, target: [f32; 3]) -> Result<LabelVolume> {
    check_target(target)?;
    let src = labels.spacing();
    let (d, h, w) = labels.dims();
    let dims = [d, h, w];
    let maps: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            let out_len = resampled_len(dims[a], src[a], target[a]);
            let ratio = f64::from(target[a]) / f64::from(src[a]);
            (0..out_len)
                .map(|i| {
                    let x = source_coord(i, ratio).clamp(0.0, (dims[a] - 1) as f64);
                    (x + 0.5).floor().min((dims[a] - 1) as f64) as usize
                })
                .collect()
        })
        .collect();
    let src_data = labels.data();
    let data = Array3::from_shape_fn((maps[0].len(), maps[1].len(), maps[2].len()), |(z, y, x)| {
        src_data[[maps[0][z], maps[1][y], maps[2][x]]]
    });
    let mut out = LabelVolume::new(data, target)?;
    out.orientation = labels.orientation;
    Ok(out)
}

/// crop → normalise (per channel) → resample (channels trilinear, truth nearest).
pub fn preprocess_case(case: &Case, target: [f32; 3]) -> Result<Case> {
    let (cropped, _) = crop_foreground(case)?;
    let images = cropped.images.try_map(|m, g| {
        normalize_nonzero(g)
            .map_err(|e| Error::Degenerate(format!("case {} channel {m}: {e}", case.id)))
            .and_then(|n| resample_trilinear(&n, target))
    })?;
    let truth = cropped.truth.as_ref().map(|t| resample_labels(t, target)).transpose()?;
    Case::new(case.id.clone(), images, truth, case.domain)
}

/// Applies [`preprocess_case`] to a list, keeping order.
pub fn preprocess_all(cases: &[Case], target: [f32; 3]) -> Result<Vec<Case>> {
    cases.iter().map(|c| preprocess_case(c, target)).collect()
}

pub fn same_images(a: &MultiModalVolume, b: &MultiModalVolume, tol: f32) -> bool {
    a.dims() == b.dims()
        && a.channels()
            .iter()
            .zip(b.channels())
            .all(|(x, y)| x.data().iter().zip(y.data()).all(|(p, q)| (p - q).abs() <= tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Domain, NUM_CLASSES};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn case_from(ch: Array3<f32>, spacing: [f32; 3]) -> Case {
        let g = VoxelGrid::new(ch, spacing).unwrap();
        let labels = LabelVolume::new(g.data().mapv(|v| if v != 0.0 { 2 } else { 0 }), spacing).unwrap();
        let imgs = MultiModalVolume::new([g.clone(), g.clone(), g.clone(), g]).unwrap();
        Case::new("c", imgs, Some(labels), Domain::PhantomClean).unwrap()
    }

    #[test]
    fn full_support_crop_is_noop() {
        let c = case_from(Array3::from_elem((3, 4, 5), 1.5), [1.0; 3]);
        let (out, bbox) = crop_foreground(&c).unwrap();
        assert_eq!(bbox, BoundingBox::full((3, 4, 5)));
        assert_eq!(out, c);
    }

    #[test]
    fn point_support_crops_to_single_voxel() {
        let mut a = Array3::zeros((5, 5, 5));
        a[[2, 2, 2]] = 7.0;
        let (out, bbox) = crop_foreground(&case_from(a, [1.0; 3])).unwrap();
        assert_eq!(bbox, BoundingBox { lo: [2; 3], hi: [2; 3] });
        assert_eq!(out.dims(), (1, 1, 1));
        assert_eq!(out.truth.unwrap().data()[[0, 0, 0]], 2);
    }

    #[test]
    fn all_zero_case_is_degenerate() {
        let err = crop_foreground(&case_from(Array3::zeros((3, 3, 3)), [1.0; 3])).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn crop_matches_coordinate_scan_and_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a =
                Array3::from_shape_fn((8, 8, 8), |_| if rng.gen_bool(0.03) { rng.gen_range(0.5f32..2.0) } else { 0.0 });
            if a.iter().all(|&v| v == 0.0) {
                continue;
            }
            let c = case_from(a.clone(), [1.0; 3]);
            let (once, bbox) = crop_foreground(&c).unwrap();
            let coords: Vec<[usize; 3]> =
                a.indexed_iter().filter(|(_, &v)| v != 0.0).map(|((z, y, x), _)| [z, y, x]).collect();
            for ax in 0..3 {
                assert_eq!(bbox.lo[ax], coords.iter().map(|c| c[ax]).min().unwrap());
                assert_eq!(bbox.hi[ax], coords.iter().map(|c| c[ax]).max().unwrap());
            }
            let (twice, _) = crop_foreground(&once).unwrap();
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn two_point_normalisation() {
        let mut a = Array3::zeros((1, 2, 3));
        a[[0, 0, 1]] = 2.0;
        a[[0, 1, 2]] = 4.0;
        let n = normalize_nonzero(&VoxelGrid::new(a, [1.0; 3]).unwrap()).unwrap();
        assert_eq!(n.data()[[0, 0, 1]], -1.0);
        assert_eq!(n.data()[[0, 1, 2]], 1.0);
        assert_eq!(n.data().iter().filter(|&&v| v == 0.0).count(), 4);
    }

    #[test]
    fn normalisation_degenerate_inputs() {
        assert!(normalize_nonzero(&VoxelGrid::zeros((2, 2, 2), [1.0; 3]).unwrap()).is_err());
        let mut a = Array3::zeros((2, 2, 2));
        a[[0, 0, 0]] = 3.0;
        a[[1, 1, 1]] = 3.0;
        assert!(matches!(normalize_nonzero(&VoxelGrid::new(a, [1.0; 3]).unwrap()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn normalisation_idempotent_on_standardised_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Array3::from_shape_fn((6, 6, 6), |_| if rng.gen_bool(0.6) { rng.gen_range(1.0f32..9.0) } else { 0.0 });
        let once = normalize_nonzero(&VoxelGrid::new(a, [1.0; 3]).unwrap()).unwrap();
        let twice = normalize_nonzero(&once).unwrap();
        for (p, q) in once.data().iter().zip(twice.data()) {
            assert!((p - q).abs() < 1e-6, "{p} vs {q}");
        }
    }

    #[test]
    fn identity_resample() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = VoxelGrid::new(Array3::from_shape_fn((4, 5, 6), |_| rng.gen()), [1.0, 1.5, 2.0]).unwrap();
        assert_eq!(resample_trilinear(&g, [1.0, 1.5, 2.0]).unwrap(), g);
    }

    #[test]
    fn ramp_downsample_voxel_centres() {
        // Output voxel i covers source voxels 2i and 2i+1, centre at source index 2i + 0.5.
        let g = VoxelGrid::new(Array3::from_shape_vec((1, 1, 4), vec![0.0, 1.0, 2.0, 3.0]).unwrap(), [1.0; 3]).unwrap();
        let r = resample_trilinear(&g, [1.0, 1.0, 2.0]).unwrap();
        assert_eq!(r.dims(), (1, 1, 2));
        assert_eq!(r.data().iter().copied().collect::<Vec<_>>(), vec![0.5, 2.5]);
    }

    #[test]
    fn ramp_upsample_is_clamped_at_edges() {
        let g = VoxelGrid::new(Array3::from_shape_vec((2, 1, 1), vec![0.0, 1.0]).unwrap(), [2.0, 1.0, 1.0]).unwrap();
        let r = resample_trilinear(&g, [1.0, 1.0, 1.0]).unwrap();
        // source coords: -0.25 (clamped to 0), 0.25, 0.75, 1.25 (clamped to 1)
        assert_eq!(r.data().iter().copied().collect::<Vec<_>>(), vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn resample_matches_direct_trilinear_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let src = Array3::from_shape_fn((5, 6, 7), |_| rng.gen_range(-1.0f32..1.0));
        let sp = [1.0f32, 1.2, 0.8];
        let target = [1.7f32, 0.9, 1.1];
        let g = VoxelGrid::new(src.clone(), sp).unwrap();
        let r = resample_trilinear(&g, target).unwrap();
        let dims = [5usize, 6, 7];
        for ((z, y, x), &v) in r.data().indexed_iter() {
            let idx = [z, y, x];
            let mut pos = [0usize; 3];
            let mut frac = [0f64; 3];
            for a in 0..3 {
                let c =
                    ((idx[a] as f64 + 0.5) * target[a] as f64 / sp[a] as f64 - 0.5).clamp(0.0, (dims[a] - 1) as f64);
                pos[a] = c.floor() as usize;
                frac[a] = c - c.floor();
            }
            let mut acc = 0.0f64;
            for corner in 0..8 {
                let mut w = 1.0;
                let mut at = [0usize; 3];
                for a in 0..3 {
                    let bit = (corner >> a) & 1;
                    at[a] = (pos[a] + bit).min(dims[a] - 1);
                    w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                }
                acc += w * src[[at[0], at[1], at[2]]] as f64;
            }
            assert!((acc - v as f64).abs() < 1e-5, "{acc} vs {v}");
        }
    }

    #[test]
    fn preprocess_on_already_processed_case_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = Array3::from_shape_fn((6, 6, 6), |_| rng.gen_range(1.0f32..5.0));
        let c = case_from(a, [1.0; 3]);
        let once = preprocess_case(&c, [1.0; 3]).unwrap();
        let twice = preprocess_case(&once, [1.0; 3]).unwrap();
        assert!(same_images(&once.images, &twice.images, 1e-6));
        assert_eq!(once.truth, twice.truth);
    }

    proptest! {
        #[test]
        fn normalisation_moments_and_zero_set(vals in proptest::collection::vec(prop_oneof![Just(0.0f32), -50.0f32..50.0], 64)) {
            let g = VoxelGrid::new(Array3::from_shape_vec((4, 4, 4), vals.clone()).unwrap(), [1.0; 3]).unwrap();
            let nz: Vec<f32> = vals.iter().copied().filter(|&v| v != 0.0).collect();
            prop_assume!(nz.len() >= 2 && nz.iter().any(|&v| v != nz[0]));
            let n = normalize_nonzero(&g).unwrap();
            for (a, b) in vals.iter().zip(n.data()) {
                prop_assert_eq!(*a == 0.0, *b == 0.0);
            }
            let (m, sd, _) = nonzero_moments(n.data().iter().copied()).unwrap();
            prop_assert!(m.abs() < 1e-6);
            prop_assert!((sd - 1.0).abs() < 1e-6);
        }

        #[test]
        fn nearest_labels_never_invent_codes(
            codes in proptest::collection::vec(0u8..NUM_CLASSES as u8, 5 * 4 * 3),
            target in proptest::array::uniform3(0.3f32..3.0),
        ) {
            let l = LabelVolume::new(Array3::from_shape_vec((5, 4, 3), codes.clone()).unwrap(), [1.0; 3]).unwrap();
            let r = resample_labels(&l, target).unwrap();
            prop_assert!(r.data().iter().all(|c| codes.contains(c)));
        }

        #[test]
        fn constant_grid_round_trip_exact(c in -100.0f32..100.0, target in proptest::array::uniform3(0.3f32..3.0)) {
            let g = VoxelGrid::new(Array3::from_elem((4, 5, 6), c), [1.0, 1.0, 1.0]).unwrap();
            let there = resample_trilinear(&g, target).unwrap();
            prop_assert!(there.data().iter().all(|&v| v == c));
            let back = resample_trilinear(&there, [1.0; 3]).unwrap();
            prop_assert!(back.data().iter().all(|&v| v == c));
        }
    }
}
