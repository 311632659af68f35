//! Synthetic multi-modal brain phantoms with nested tumour regions, and a
//! degradation operator mimicking low-field, incomplete acquisitions.

use ndarray::{Array3, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::resize_trilinear;
use crate::volume::{
    Case, Domain, LabelVolume, Modality, MultiModalVolume, VoxelGrid, BACKGROUND, EDEMA, ENHANCING, NECROTIC_CORE,
};

/// Tissue columns of [`PhantomSpec::contrast`].
pub const TISSUES: [&str; 4] = ["brain", "edema", "enhancing", "necrotic"];

/// Default multipliers, rows in modality order (T1, T1ce, T2, FLAIR).
pub const DEFAULT_CONTRAST: [[f64; 4]; 4] =
    [[1.0, 0.8, 1.0, 0.5], [1.0, 0.9, 2.0, 0.4], [1.0, 1.8, 1.3, 2.0], [1.0, 2.0, 1.4, 1.2]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// `(D, H, W)`.
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    /// Brain ellipsoid semi-axes in voxels, centred in the volume.
    pub brain_semi_axes: [f64; 3],
    pub tumor_center: [f64; 3],
    /// Per-axis stretch of the tumour shells.
    pub tumor_axes: [f64; 3],
    pub edema_radius: f64,
    pub core_radius: f64,
    pub necrosis_radius: f64,
    /// Modality × tissue intensity multipliers.
    pub contrast: [[f64; 4]; 4],
    pub intensity_scale: f64,
    /// Gaussian noise sd, in intensity units, inside the brain.
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::centered([64, 64, 64], 0)
    }
}

impl PhantomSpec {
    /// Tumour offset from the centre with fixed proportions.
    pub fn centered(dims: [usize; 3], seed: u64) -> Self {
        let m = dims.iter().copied().min().unwrap_or(1) as f64;
        let centre: [f64; 3] = std::array::from_fn(|a| (dims[a] as f64 - 1.0) / 2.0);
        PhantomSpec {
            dims,
            spacing: [1.0; 3],
            brain_semi_axes: std::array::from_fn(|a| 0.42 * dims[a] as f64),
            tumor_center: [centre[0], centre[1] + 0.1 * m, centre[2] - 0.1 * m],
            tumor_axes: [1.0; 3],
            edema_radius: 0.2 * m,
            core_radius: 0.12 * m,
            necrosis_radius: 0.06 * m,
            contrast: DEFAULT_CONTRAST,
            intensity_scale: 100.0,
            noise_sd: 5.0,
            seed,
        }
    }

    /// Seeded jitter of tumour position, size and shape.
    pub fn randomized(seed: u64, dims: [usize; 3]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_FACE);
        let mut spec = Self::centered(dims, seed);
        let m = dims.iter().copied().min().unwrap_or(1) as f64;
        spec.edema_radius = m * rng.gen_range(0.12..0.2);
        spec.core_radius = spec.edema_radius * rng.gen_range(0.5..0.75);
        spec.necrosis_radius = spec.core_radius * rng.gen_range(0.35..0.6);
        spec.tumor_axes = std::array::from_fn(|_| rng.gen_range(0.8..1.2));
        let centre: [f64; 3] = std::array::from_fn(|a| (dims[a] as f64 - 1.0) / 2.0);
        // keep the stretched edema shell inside the brain
        loop {
            let c: [f64; 3] = std::array::from_fn(|a| centre[a] + rng.gen_range(-0.2..0.2) * dims[a] as f64);
            spec.tumor_center = c;
            if spec.tumor_inside_brain() {
                break;
            }
        }
        spec
    }

    fn brain_centre(&self) -> [f64; 3] {
        std::array::from_fn(|a| (self.dims[a] as f64 - 1.0) / 2.0)
    }

    fn tumor_inside_brain(&self) -> bool {
        let bc = self.brain_centre();
        (0..3).all(|a| {
            [-1.0, 1.0].iter().all(|&s| {
                let mut p = self.tumor_center;
                p[a] += s * self.edema_radius * self.tumor_axes[a];
                (0..3).map(|b| ((p[b] - bc[b]) / self.brain_semi_axes[b]).powi(2)).sum::<f64>() < 1.0
            })
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.dims.contains(&0) {
            return bad(format!("phantom dims must be positive, got {:?}", self.dims));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad(format!("spacing must be positive, got {:?}", self.spacing));
        }
        if !(0.0 < self.necrosis_radius
            && self.necrosis_radius < self.core_radius
            && self.core_radius < self.edema_radius)
        {
            return bad(format!(
                "need 0 < necrosis radius < core radius < edema radius, got {} / {} / {}",
                self.necrosis_radius, self.core_radius, self.edema_radius
            ));
        }
        if self.brain_semi_axes.iter().chain(&self.tumor_axes).any(|v| !(*v > 0.0)) {
            return bad("brain semi-axes and tumour axes must be positive".into());
        }
        if !self.tumor_inside_brain() {
            return bad("tumour extends outside the brain ellipsoid".into());
        }
        if !(self.noise_sd >= 0.0) || !(self.intensity_scale > 0.0) {
            return bad("noise sd must be ≥ 0 and intensity scale > 0".into());
        }
        Ok(())
    }

    pub fn case_id(&self) -> String {
        format!("phantom-{}", self.seed)
    }
}

/// Renders the phantom: labels from nested shells, channels from the
/// contrast table plus in-brain noise.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Case> {
    spec.validate()?;
    let [d, h, w] = spec.dims;
    let bc = spec.brain_centre();
    let mut brain = Array3::from_elem((d, h, w), false);
    let mut labels = Array3::<u8>::zeros((d, h, w));
    for ((z, y, x), v) in labels.indexed_iter_mut() {
        let p = [z as f64, y as f64, x as f64];
        let rb: f64 = (0..3).map(|a| ((p[a] - bc[a]) / spec.brain_semi_axes[a]).powi(2)).sum();
        if rb > 1.0 {
            continue;
        }
        brain[[z, y, x]] = true;
        let rt = (0..3).map(|a| ((p[a] - spec.tumor_center[a]) / spec.tumor_axes[a]).powi(2)).sum::<f64>().sqrt();
        *v = if rt < spec.necrosis_radius {
            NECROTIC_CORE
        } else if rt < spec.core_radius {
            ENHANCING
        } else if rt < spec.edema_radius {
            EDEMA
        } else {
            BACKGROUND
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sd.max(f64::MIN_POSITIVE)).expect("finite sd");
    let channels: Vec<VoxelGrid> = Modality::ALL
        .iter()
        .map(|m| {
            let row = spec.contrast[m.index()];
            let mut data = Array3::<f32>::zeros((d, h, w));
            Zip::from(&mut data).and(&brain).and(&labels).for_each(|v, &inside, &l| {
                if !inside {
                    return;
                }
                let tissue = match l {
                    EDEMA => 1,
                    ENHANCING => 2,
                    NECROTIC_CORE => 3,
                    _ => 0,
                };
                let mut val = spec.intensity_scale * row[tissue];
                if spec.noise_sd > 0.0 {
                    val += noise.sample(&mut rng);
                }
                // keep brain voxels strictly nonzero so the support is the brain
                *v = (val as f32).max(1e-3);
            });
            VoxelGrid::new(data, spec.spacing)
        })
        .collect::<Result<_>>()?;
    let images = MultiModalVolume::new(channels.try_into().expect("four channels"))?;
    let truth = LabelVolume::new(labels, spec.spacing)?;
    Case::new(spec.case_id(), images, Some(truth), Domain::PhantomClean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradeSpec {
    /// Resolution loss factor (downsample then upsample), ≥ 1.
    pub factor: usize,
    pub noise_sd: f64,
    /// Multiplicative bias field `1 + amplitude · g`, `g` a unit linear ramp.
    pub bias_amplitude: f64,
    /// Number of bottom axial slices zeroed.
    pub truncate_slices: usize,
    pub seed: u64,
}

impl Default for DegradeSpec {
    fn default() -> Self {
        DegradeSpec { factor: 2, noise_sd: 12.0, bias_amplitude: 0.3, truncate_slices: 0, seed: 0 }
    }
}

impl DegradeSpec {
    pub fn identity() -> Self {
        DegradeSpec { factor: 1, noise_sd: 0.0, bias_amplitude: 0.0, truncate_slices: 0, seed: 0 }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.factor == 0 {
            return Err(Error::InvalidArgument("degradation factor must be ≥ 1".into()));
        }
        if self.truncate_slices >= depth {
            return Err(Error::InvalidArgument(format!("cannot truncate {} of {depth} slices", self.truncate_slices)));
        }
        if !(self.noise_sd >= 0.0) || !self.bias_amplitude.is_finite() || self.bias_amplitude.abs() >= 1.0 {
            return Err(Error::InvalidArgument("noise sd must be ≥ 0 and |bias amplitude| < 1".into()));
        }
        Ok(())
    }
}

/// Blur, bias, noise and slab truncation; the truth is untouched.
pub fn degrade_case(case: &Case, spec: &DegradeSpec) -> Result<Case> {
    let (d, h, w) = case.dims();
    spec.validate(d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dir: [f64; 3] = {
        let v: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        std::array::from_fn(|a| v[a] / n)
    };
    let centre = [(d as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0];
    let half = [d as f64 / 2.0, h as f64 / 2.0, w as f64 / 2.0];
    let field = Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        let p = [z as f64, y as f64, x as f64];
        let g: f64 = (0..3).map(|a| dir[a] * (p[a] - centre[a]) / half[a]).sum();
        1.0 + spec.bias_amplitude * g.clamp(-1.0, 1.0)
    });
    let noise = Normal::new(0.0, spec.noise_sd.max(f64::MIN_POSITIVE)).expect("finite sd");
    let images = case.images.try_map(|_, grid| {
        let clean = grid.data();
        let mut data = if spec.factor > 1 {
            let low: [usize; 3] = [d, h, w].map(|n| n.div_ceil(spec.factor));
            resize_trilinear(&resize_trilinear(clean, low), [d, h, w])
        } else {
            clean.clone()
        };
        Zip::from(&mut data).and(clean).and(&field).for_each(|v, &c, &b| {
            if c == 0.0 {
                *v = 0.0;
                return;
            }
            let mut val = *v as f64 * b;
            if spec.noise_sd > 0.0 {
                val += noise.sample(&mut rng);
            }
            *v = val as f32;
        });
        for z in 0..spec.truncate_slices {
            data.index_axis_mut(ndarray::Axis(0), z).fill(0.0);
        }
        grid.with_data(data)
    })?;
    Case::new(format!("{}-deg", case.id), images, case.truth.clone(), Domain::PhantomDegraded)
}

/// `count` randomized phantoms with per-case seeds derived from `seed`.
pub fn phantom_cohort(count: usize, dims: [usize; 3], seed: u64) -> Result<Vec<Case>> {
    (0..count as u64).map(|i| generate_phantom(&PhantomSpec::randomized(cohort_seed(seed, i), dims))).collect()
}

/// Degrades each case with the spec, varying the degradation seed per case.
pub fn degrade_cohort(cases: &[Case], spec: &DegradeSpec) -> Result<Vec<Case>> {
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| degrade_case(c, &DegradeSpec { seed: cohort_seed(spec.seed, i as u64), ..spec.clone() }))
        .collect()
}

fn cohort_seed(seed: u64, i: u64) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(i)
}
