//! Overlap metrics: per-region Dice and lesion-wise Dice.

use std::collections::VecDeque;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{region_mask, LabelVolume, Region};

/// `2|A∩B| / (|A|+|B|)`; both empty gives 1, exactly one empty gives 0.
pub fn dice_binary(a: &Array3<bool>, b: &Array3<bool>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("mask dims {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    Ok(if na + nb == 0 { 1.0 } else { 2.0 * inter as f64 / (na + nb) as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    #[serde(rename = "ET")]
    pub et: f64,
    #[serde(rename = "TC")]
    pub tc: f64,
    #[serde(rename = "WT")]
    pub wt: f64,
}

impl DiceReport {
    pub fn get(&self, region: Region) -> f64 {
        match region {
            Region::Enhancing => self.et,
            Region::TumorCore => self.tc,
            Region::WholeTumor => self.wt,
        }
    }

    pub fn mean(&self) -> f64 {
        (self.et + self.tc + self.wt) / 3.0
    }
}

fn check_geometry(pred: &LabelVolume, truth: &LabelVolume) -> Result<()> {
    if !pred.same_geometry(truth) {
        return Err(Error::Shape(format!(
            "prediction {:?} @ {:?} vs truth {:?} @ {:?}",
            pred.dims(),
            pred.spacing(),
            truth.dims(),
            truth.spacing()
        )));
    }
    Ok(())
}

pub fn region_dice_report(pred: &LabelVolume, truth: &LabelVolume) -> Result<DiceReport> {
    check_geometry(pred, truth)?;
    let d = |r| dice_binary(&region_mask(pred, r), &region_mask(truth, r));
    Ok(DiceReport { et: d(Region::Enhancing)?, tc: d(Region::TumorCore)?, wt: d(Region::WholeTumor)? })
}

/// 26-connected component labelling. Components are numbered `1..=K` in the
/// order their first voxel appears in a row-major scan; background is 0.
pub fn components_26(mask: &Array3<bool>) -> (Array3<u32>, usize) {
    let (d, h, w) = mask.dim();
    let mut labels = Array3::<u32>::zeros((d, h, w));
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask[[z, y, x]] || labels[[z, y, x]] != 0 {
                    continue;
                }
                next += 1;
                labels[[z, y, x]] = next;
                queue.push_back([z, y, x]);
                while let Some(p) = queue.pop_front() {
                    for q in neighbours(p, [d, h, w], 1) {
                        if mask[q] && labels[q] == 0 {
                            labels[q] = next;
                            queue.push_back(q);
                        }
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// Voxels within Chebyshev distance `r` of `p` (excluding `p`), clipped to the grid.
fn neighbours(p: [usize; 3], dims: [usize; 3], r: usize) -> impl Iterator<Item = [usize; 3]> {
    let lo: [usize; 3] = std::array::from_fn(|a| p[a].saturating_sub(r));
    let hi: [usize; 3] = std::array::from_fn(|a| (p[a] + r).min(dims[a] - 1));
    (lo[0]..=hi[0]).flat_map(move |z| {
        (lo[1]..=hi[1]).flat_map(move |y| (lo[2]..=hi[2]).map(move |x| [z, y, x]).filter(move |&q| q != p))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LesionParams {
    pub dilation_radius: usize,
    pub min_lesion: usize,
}

impl Default for LesionParams {
    fn default() -> Self {
        LesionParams { dilation_radius: 1, min_lesion: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionWiseReport {
    pub region: Region,
    pub score: f64,
    pub true_positives: usize,
    pub false_negatives: usize,
    pub false_positives: usize,
    pub params: LesionParams,
}

fn component_voxels(labels: &Array3<u32>, count: usize) -> Vec<Vec<[usize; 3]>> {
    let mut out = vec![Vec::new(); count];
    for ((z, y, x), &l) in labels.indexed_iter() {
        if l > 0 {
            out[l as usize - 1].push([z, y, x]);
        }
    }
    out
}

/// Lesion-wise Dice for one region.
///
/// Ground-truth lesions are 26-components with at least `min_lesion` voxels.
/// Predicted components touching a lesion's dilated footprint are assigned to
/// it and scored against it; missed lesions and unassigned predicted
/// components (of at least `min_lesion` voxels) each contribute 0. The score
/// is the mean contribution, or 1 when both sides are empty.
pub fn lesion_wise_dice(
    pred: &LabelVolume,
    truth: &LabelVolume,
    region: Region,
    params: LesionParams,
) -> Result<LesionWiseReport> {
    check_geometry(pred, truth)?;
    let (d, h, w) = truth.dims();
    let dims = [d, h, w];
    let (t_lab, t_n) = components_26(&region_mask(truth, region));
    let (p_lab, p_n) = components_26(&region_mask(pred, region));
    let gt: Vec<Vec<[usize; 3]>> =
        component_voxels(&t_lab, t_n).into_iter().filter(|c| c.len() >= params.min_lesion).collect();
    let pred_comps = component_voxels(&p_lab, p_n);

    let mut assigned_any = vec![false; p_n];
    let mut contributions = Vec::new();
    let (mut tp, mut fn_) = (0, 0);
    let mut zone = Array3::<bool>::from_elem((d, h, w), false);
    for lesion in &gt {
        let mut touched = Vec::new();
        for &p in lesion {
            for q in neighbours(p, dims, params.dilation_radius).chain(std::iter::once(p)) {
                if !zone[q] {
                    zone[q] = true;
                    touched.push(q);
                }
            }
        }
        let mut hit = vec![false; p_n];
        for &q in &touched {
            let l = p_lab[q];
            if l > 0 {
                hit[l as usize - 1] = true;
            }
        }
        for &q in &touched {
            zone[q] = false;
        }
        let pred_voxels: usize = (0..p_n).filter(|&i| hit[i]).map(|i| pred_comps[i].len()).sum();
        if pred_voxels == 0 {
            fn_ += 1;
            contributions.push(0.0);
            continue;
        }
        tp += 1;
        let inter = lesion.iter().filter(|&&p| p_lab[p] > 0 && hit[p_lab[p] as usize - 1]).count();
        contributions.push(2.0 * inter as f64 / (pred_voxels + lesion.len()) as f64);
        for i in 0..p_n {
            assigned_any[i] |= hit[i];
        }
    }
    let fp = (0..p_n).filter(|&i| !assigned_any[i] && pred_comps[i].len() >= params.min_lesion).count();
    contributions.extend(std::iter::repeat_n(0.0, fp));
    let score =
        if contributions.is_empty() { 1.0 } else { contributions.iter().sum::<f64>() / contributions.len() as f64 };
    Ok(LesionWiseReport { region, score, true_positives: tp, false_negatives: fn_, false_positives: fp, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(dims: (usize, usize, usize), on: &[[usize; 3]]) -> Array3<bool> {
        let mut m = Array3::from_elem(dims, false);
        for &p in on {
            m[p] = true;
        }
        m
    }

    fn labels(data: Array3<u8>) -> LabelVolume {
        LabelVolume::new(data, [1.0; 3]).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = mask((1, 1, 8), &[[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 3]]);
        let b = mask((1, 1, 8), &[[0, 0, 2], [0, 0, 3], [0, 0, 4], [0, 0, 5]]);
        let c = mask((1, 1, 8), &[[0, 0, 7]]);
        let empty = mask((1, 1, 8), &[]);
        assert_eq!(dice_binary(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_binary(&a, &c).unwrap(), 0.0);
        assert_eq!(dice_binary(&a, &b).unwrap(), 0.5);
        assert_eq!(dice_binary(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice_binary(&empty, &a).unwrap(), 0.0);
        assert!(dice_binary(&a, &mask((1, 2, 4), &[])).is_err());
    }

    #[test]
    fn region_report_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = labels(Array3::from_shape_fn((8, 8, 8), |_| rng.gen_range(0..4)));
        let p = labels(Array3::from_shape_fn((8, 8, 8), |_| rng.gen_range(0..4)));
        let same = region_dice_report(&t, &t).unwrap();
        assert_eq!((same.et, same.tc, same.wt), (1.0, 1.0, 1.0));
        let bg = labels(Array3::zeros((8, 8, 8)));
        assert_eq!(region_dice_report(&bg, &t).unwrap().wt, 0.0);

        // brute-force counting oracle
        let r = region_dice_report(&p, &t).unwrap();
        for (region, codes) in
            [(Region::Enhancing, &[3u8][..]), (Region::TumorCore, &[1, 3]), (Region::WholeTumor, &[1, 2, 3])]
        {
            let (mut i, mut np, mut nt) = (0.0, 0.0, 0.0);
            for (a, b) in p.data().iter().zip(t.data().iter()) {
                let (ina, inb) = (codes.contains(a), codes.contains(b));
                np += ina as u8 as f64;
                nt += inb as u8 as f64;
                i += (ina && inb) as u8 as f64;
            }
            assert_eq!(r.get(region), 2.0 * i / (np + nt));
        }
    }

    #[test]
    fn component_examples() {
        let (_, n) = components_26(&mask((5, 5, 5), &[[0, 0, 0], [1, 1, 1]]));
        assert_eq!(n, 1);
        let (l, n) = components_26(&mask((5, 5, 5), &[[0, 0, 0], [4, 4, 4]]));
        assert_eq!(n, 2);
        assert_eq!((l[[0, 0, 0]], l[[4, 4, 4]]), (1, 2));
    }

    fn union_find_count(m: &Array3<bool>) -> usize {
        let (d, h, w) = m.dim();
        let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
        let mut parent: Vec<usize> = (0..d * h * w).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if !m[[z, y, x]] {
                        continue;
                    }
                    for dz in -1i32..=1 {
                        for dy in -1i32..=1 {
                            for dx in -1i32..=1 {
                                let (zz, yy, xx) = (z as i32 + dz, y as i32 + dy, x as i32 + dx);
                                if zz < 0 || yy < 0 || xx < 0 || zz >= d as i32 || yy >= h as i32 || xx >= w as i32 {
                                    continue;
                                }
                                if m[[zz as usize, yy as usize, xx as usize]] {
                                    let a = find(&mut parent, idx(z, y, x));
                                    let b = find(&mut parent, idx(zz as usize, yy as usize, xx as usize));
                                    parent[a] = b;
                                }
                            }
                        }
                    }
                }
            }
        }
        (0..d * h * w).filter(|&i| m.as_slice().unwrap()[i] && find(&mut parent, i) == i).count()
    }

    proptest! {
        #[test]
        fn component_count_matches_union_find(seed in any::<u64>(), density in 0.02f64..0.3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Array3::from_shape_fn((7, 8, 9), |_| rng.gen_bool(density));
            let (labels, n) = components_26(&m);
            prop_assert_eq!(n, union_find_count(&m));
            // first-voxel scan order
            let mut seen = 0;
            for &l in labels.iter() {
                if l as usize > seen {
                    prop_assert_eq!(l as usize, seen + 1);
                    seen += 1;
                }
            }
        }

        #[test]
        fn dice_is_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Array3::from_shape_fn((4, 5, 6), |_| rng.gen_bool(0.3));
            let b = Array3::from_shape_fn((4, 5, 6), |_| rng.gen_bool(0.3));
            prop_assert_eq!(dice_binary(&a, &b).unwrap(), dice_binary(&b, &a).unwrap());
        }

        #[test]
        fn lesion_wise_perfect_prediction_scores_one(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = labels(Array3::from_shape_fn((6, 7, 8), |_| if rng.gen_bool(0.15) { rng.gen_range(1..4) } else { 0 }));
            for r in [Region::Enhancing, Region::TumorCore, Region::WholeTumor] {
                prop_assert_eq!(lesion_wise_dice(&t, &t, r, LesionParams::default()).unwrap().score, 1.0);
            }
        }
    }

    fn cube(vol: &mut Array3<u8>, lo: [usize; 3], side: usize, code: u8) {
        for z in lo[0]..lo[0] + side {
            for y in lo[1]..lo[1] + side {
                for x in lo[2]..lo[2] + side {
                    vol[[z, y, x]] = code;
                }
            }
        }
    }

    #[test]
    fn lesion_wise_examples() {
        let p = LesionParams::default();
        let mut one = Array3::zeros((12, 12, 12));
        cube(&mut one, [1, 1, 1], 3, 2);
        let one = labels(one);
        let r = lesion_wise_dice(&one, &one, Region::WholeTumor, p).unwrap();
        assert_eq!((r.score, r.true_positives, r.false_negatives, r.false_positives), (1.0, 1, 0, 0));

        let mut two = one.data().clone();
        cube(&mut two, [8, 8, 8], 3, 2);
        let two = labels(two);
        let r = lesion_wise_dice(&one, &two, Region::WholeTumor, p).unwrap();
        assert_eq!((r.score, r.true_positives, r.false_negatives), (0.5, 1, 1));

        let r = lesion_wise_dice(&two, &one, Region::WholeTumor, p).unwrap();
        assert_eq!((r.score, r.false_positives), (0.5, 1));

        let empty = labels(Array3::zeros((12, 12, 12)));
        assert_eq!(lesion_wise_dice(&empty, &empty, Region::Enhancing, p).unwrap().score, 1.0);
    }

    #[test]
    fn single_lesion_equals_plain_dice() {
        let mut t = Array3::zeros((10, 10, 10));
        cube(&mut t, [2, 2, 2], 4, 1);
        let mut pr = Array3::zeros((10, 10, 10));
        cube(&mut pr, [3, 2, 3], 4, 1);
        let (t, pr) = (labels(t), labels(pr));
        let lw = lesion_wise_dice(&pr, &t, Region::TumorCore, LesionParams::default()).unwrap().score;
        let plain = region_dice_report(&pr, &t).unwrap().tc;
        assert_eq!(lw, plain);
    }
}
