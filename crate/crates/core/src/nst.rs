//! Neural style transfer used as data augmentation: the low-quality case is
//! the content image, a randomly paired high-quality case supplies the
//! style statistics, and pixels are optimised with Adam against
//! `alpha · content + beta · style`.

use ndarray::Zip;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{gram_matrix, FeatureExtractor, FeatureMap, GramMatrix, Image};
use crate::optim::{adam_update, AdamParams};
use crate::preprocess::normalize_nonzero;
use crate::real::Real;
use crate::volume::{Case, Modality, VoxelGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InitMode {
    ContentCopy,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleTransferConfig {
    pub alpha: f64,
    pub beta: f64,
    pub iterations: usize,
    pub step_size: f64,
    pub seed: u64,
    pub init: InitMode,
}

impl Default for StyleTransferConfig {
    fn default() -> Self {
        StyleTransferConfig {
            alpha: 1.0,
            beta: 1e3,
            iterations: 100,
            step_size: 0.02,
            seed: 0,
            init: InitMode::ContentCopy,
        }
    }
}

impl StyleTransferConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha >= 0.0
            && self.beta >= 0.0
            && self.alpha + self.beta > 0.0
            && self.step_size > 0.0
            && self.iterations >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "style transfer config needs alpha, beta ≥ 0 (not both 0), step_size > 0, iterations ≥ 1: {self:?}"
            )))
        }
    }
}

/// `½ Σ (F − P)²` and its gradient `F − P`.
pub fn content_loss<T: Real>(generated: &FeatureMap<T>, target: &FeatureMap<T>) -> Result<(T, FeatureMap<T>)> {
    if generated.shape() != target.shape() {
        return Err(Error::Shape(format!("content features {:?} vs {:?}", generated.shape(), target.shape())));
    }
    let diff: Vec<T> = generated.data.iter().zip(&target.data).map(|(&f, &p)| f - p).collect();
    let loss = diff.iter().map(|&d| d * d).sum::<T>() * T::of(0.5);
    Ok((loss, FeatureMap { data: diff, ..generated.clone() }))
}

/// Style loss for one layer, `1/(4N²M²) Σ (G − A)²`, with its gradient
/// w.r.t. the feature map, `(G − A) F / (N²M²)`.
pub fn style_layer_loss<T: Real>(features: &FeatureMap<T>, target: &GramMatrix<T>) -> Result<(T, FeatureMap<T>)> {
    let g = gram_matrix(features);
    if g.n != target.n {
        return Err(Error::Shape(format!("gram {}×{} vs target {}×{}", g.n, g.n, target.n, target.n)));
    }
    let (n, m) = (g.n, g.m);
    let norm = T::of((n * n) as f64 * (m * m) as f64);
    let diff: Vec<T> = g.data.iter().zip(&target.data).map(|(&a, &b)| a - b).collect();
    let loss = diff.iter().map(|&d| d * d).sum::<T>() / (T::of(4.0) * norm);
    let mut grad = FeatureMap::zeros(features.channels, features.height, features.width);
    for i in 0..n {
        let dst = &mut grad.data[i * m..(i + 1) * m];
        for j in 0..n {
            let c = diff[i * n + j] / norm;
            if c == T::zero() {
                continue;
            }
            let fj = &features.data[j * m..(j + 1) * m];
            for (d, &f) in dst.iter_mut().zip(fj) {
                *d += c * f;
            }
        }
    }
    Ok((loss, grad))
}

/// Weighted multi-layer style loss. `features` and `targets` are parallel to
/// `weights`; returns the total and per-layer feature gradients.
pub fn style_loss<T: Real>(
    features: &[&FeatureMap<T>],
    targets: &[GramMatrix<T>],
    weights: &[f64],
) -> Result<(T, Vec<FeatureMap<T>>)> {
    if features.len() != targets.len() || features.len() != weights.len() {
        return Err(Error::Shape(format!(
            "style loss needs matching layer lists, got {}/{}/{}",
            features.len(),
            targets.len(),
            weights.len()
        )));
    }
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(features.len());
    for ((f, a), &w) in features.iter().zip(targets).zip(weights) {
        let (l, mut g) = style_layer_loss(f, a)?;
        let w = T::of(w);
        total += w * l;
        g.data.iter_mut().for_each(|v| *v *= w);
        grads.push(g);
    }
    Ok((total, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub total: f64,
    pub content: f64,
    pub style: f64,
}

#[derive(Debug, Clone)]
pub struct NstOutcome<T> {
    pub image: Image<T>,
    /// Entry 0 is the loss at the initial image; entry k the loss after k steps.
    pub trace: Vec<LossRecord>,
}

impl<T> NstOutcome<T> {
    pub fn initial(&self) -> LossRecord {
        self.trace[0]
    }

    pub fn last(&self) -> LossRecord {
        *self.trace.last().expect("trace has the initial entry")
    }
}

/// Precomputed targets for one content/style pair.
struct Objective<'a, T> {
    extractor: &'a FeatureExtractor<T>,
    content_target: FeatureMap<T>,
    style_targets: Vec<GramMatrix<T>>,
    alpha: T,
    beta: T,
}

impl<'a, T: Real> Objective<'a, T> {
    fn new(
        extractor: &'a FeatureExtractor<T>,
        content: &Image<T>,
        style: &Image<T>,
        alpha: f64,
        beta: f64,
    ) -> Result<Self> {
        let spec = extractor.spec();
        let cf = extractor.extract_features(content)?;
        let sf = extractor.extract_features(style)?;
        Ok(Objective {
            extractor,
            content_target: cf[spec.content_layer].clone(),
            style_targets: spec.style_layers.iter().map(|&l| gram_matrix(&sf[l])).collect(),
            alpha: T::of(alpha),
            beta: T::of(beta),
        })
    }

    fn evaluate(&self, image: &Image<T>, want_grad: bool) -> Result<(LossRecord, Option<Image<T>>)> {
        let spec = self.extractor.spec();
        let tape = self.extractor.forward(image)?;
        let (lc, gc) = content_loss(&tape.features[spec.content_layer], &self.content_target)?;
        let feats: Vec<&FeatureMap<T>> = spec.style_layers.iter().map(|&l| &tape.features[l]).collect();
        let (ls, gs) = style_loss(&feats, &self.style_targets, &spec.style_weights)?;
        let total = self.alpha * lc + self.beta * ls;
        let rec = LossRecord { total: total.as_f64(), content: lc.as_f64(), style: ls.as_f64() };
        if !want_grad {
            return Ok((rec, None));
        }
        let mut layer_grads: Vec<Option<FeatureMap<T>>> = vec![None; spec.layers.len()];
        let mut add = |layer: usize, g: FeatureMap<T>, scale: T| {
            let slot = layer_grads[layer].get_or_insert_with(|| FeatureMap::zeros(g.channels, g.height, g.width));
            for (d, &v) in slot.data.iter_mut().zip(&g.data) {
                *d += scale * v;
            }
        };
        if self.alpha != T::zero() {
            add(spec.content_layer, gc, self.alpha);
        }
        if self.beta != T::zero() {
            for (&l, g) in spec.style_layers.iter().zip(gs) {
                add(l, g, self.beta);
            }
        }
        let grad = self.extractor.backward(&tape, &layer_grads)?;
        Ok((rec, Some(grad)))
    }
}

/// Total NST loss and its gradient w.r.t. the generated pixels.
pub fn nst_loss_and_grad<T: Real>(
    generated: &Image<T>,
    content: &Image<T>,
    style: &Image<T>,
    extractor: &FeatureExtractor<T>,
    alpha: f64,
    beta: f64,
) -> Result<(LossRecord, Image<T>)> {
    let obj = Objective::new(extractor, content, style, alpha, beta)?;
    let (rec, g) = obj.evaluate(generated, true)?;
    Ok((rec, g.expect("gradient requested")))
}

/// Iterative pixel optimisation of `content` towards the style of `style`.
pub fn nst_optimize<T: Real>(
    content: &Image<T>,
    style: &Image<T>,
    extractor: &FeatureExtractor<T>,
    config: &StyleTransferConfig,
) -> Result<NstOutcome<T>> {
    config.validate()?;
    if content.shape() != style.shape() {
        return Err(Error::Shape(format!("content {:?} and style {:?} slices differ", content.shape(), style.shape())));
    }
    let obj = Objective::new(extractor, content, style, config.alpha, config.beta)?;
    let mut image = match config.init {
        InitMode::ContentCopy => content.clone(),
        InitMode::Noise => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            FeatureMap {
                data: (0..content.data.len()).map(|_| T::of(StandardNormal.sample(&mut rng))).collect(),
                ..content.clone()
            }
        }
    };
    let params = AdamParams::default();
    let mut m = vec![T::zero(); image.data.len()];
    let mut v = vec![T::zero(); image.data.len()];
    let mut trace = Vec::with_capacity(config.iterations + 1);
    let mut initial = f64::NAN;
    for step in 0..=config.iterations {
        let last = step == config.iterations;
        let (rec, grad) = obj.evaluate(&image, !last)?;
        if !rec.total.is_finite() {
            return Err(Error::Numerical(format!("style transfer loss became non-finite at iteration {step}")));
        }
        if step == 0 {
            initial = rec.total;
        } else if rec.total > 10.0 * initial && rec.total > 0.0 {
            return Err(Error::Numerical(format!(
                "style transfer diverged at iteration {step}: loss {:.6e} exceeds 10× initial {:.6e}",
                rec.total, initial
            )));
        }
        trace.push(rec);
        if let Some(g) = grad {
            adam_update(&params, &mut image.data, &g.data, &mut m, &mut v, step as u64 + 1, config.step_size);
        }
    }
    Ok(NstOutcome { image, trace })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StylePair {
    pub content_case_id: String,
    pub style_case_id: String,
}

/// Every content id once, each with a style id drawn uniformly with
/// replacement.
pub fn pair_randomly(ssa_ids: &[String], gli_ids: &[String], seed: u64) -> Result<Vec<StylePair>> {
    if ssa_ids.is_empty() || gli_ids.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "pairing needs non-empty id lists (content {}, style {})",
            ssa_ids.len(),
            gli_ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ssa_ids
        .iter()
        .map(|c| StylePair {
            content_case_id: c.clone(),
            style_case_id: gli_ids[rng.gen_range(0..gli_ids.len())].clone(),
        })
        .collect())
}

/// Axial slice of the style volume matched to content slice `z` by
/// proportional depth.
pub fn matching_slice(z: usize, content_depth: usize, style_depth: usize) -> usize {
    ((z * style_depth) / content_depth).min(style_depth - 1)
}

/// Centre crop or zero pad a 2D slice to `(h, w)`.
pub fn fit_slice<T: Real>(src: &Image<T>, h: usize, w: usize) -> Image<T> {
    let mut out = FeatureMap::zeros(1, h, w);
    // offset of the source inside the destination
    let oy = (h as isize - src.height as isize) / 2;
    let ox = (w as isize - src.width as isize) / 2;
    for y in 0..h {
        let sy = y as isize - oy;
        if sy < 0 || sy >= src.height as isize {
            continue;
        }
        for x in 0..w {
            let sx = x as isize - ox;
            if sx < 0 || sx >= src.width as isize {
                continue;
            }
            out.data[y * w + x] = src.data[sy as usize * src.width + sx as usize];
        }
    }
    out
}

fn axial_slice(grid: &VoxelGrid, z: usize) -> Image<f32> {
    let (_, h, w) = grid.dims();
    let s = grid.data().index_axis(ndarray::Axis(0), z);
    FeatureMap { channels: 1, height: h, width: w, data: s.iter().copied().collect() }
}

/// Per-slice bookkeeping of one augmentation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub content_case_id: String,
    pub style_case_id: String,
    pub channel: Modality,
    pub slice_index: usize,
    pub style_slice_index: usize,
    pub initial: LossRecord,
    pub last: LossRecord,
}

#[derive(Debug, Clone)]
pub struct AugmentOutcome {
    pub cases: Vec<Case>,
    pub pairs: Vec<StylePair>,
    pub slices: Vec<SliceRecord>,
}

impl AugmentOutcome {
    /// Fraction of optimised slices whose final total loss is below the initial one.
    pub fn descent_fraction(&self) -> f64 {
        if self.slices.is_empty() {
            return 1.0;
        }
        let ok = self.slices.iter().filter(|s| s.last.total < s.initial.total).count();
        ok as f64 / self.slices.len() as f64
    }
}

/// Stylises one channel volume slice-wise along the axial axis. Slices with
/// no nonzero content are copied through. The result keeps the content's
/// zero set and is re-standardised over its nonzero support.
pub fn stylize_volume(
    content: &VoxelGrid,
    style: &VoxelGrid,
    extractor: &FeatureExtractor<f32>,
    config: &StyleTransferConfig,
    mut on_slice: impl FnMut(usize, usize, &NstOutcome<f32>),
) -> Result<VoxelGrid> {
    let (cd, h, w) = content.dims();
    let (sd, _, _) = style.dims();
    let mut out = content.data().clone();
    for z in 0..cd {
        let c = axial_slice(content, z);
        if c.data.iter().all(|&v| v == 0.0) {
            continue;
        }
        let zs = matching_slice(z, cd, sd);
        let s = fit_slice(&axial_slice(style, zs), h, w);
        let slice_cfg = StyleTransferConfig { seed: config.seed.wrapping_add(z as u64), ..config.clone() };
        let res = nst_optimize(&c, &s, extractor, &slice_cfg)?;
        on_slice(z, zs, &res);
        let mut dst = out.index_axis_mut(ndarray::Axis(0), z);
        for (d, &v) in dst.iter_mut().zip(&res.image.data) {
            *d = v;
        }
    }
    Zip::from(&mut out).and(content.data()).for_each(|o, &c| {
        if c == 0.0 {
            *o = 0.0;
        }
    });
    let stylized = content.with_data(out)?;
    if stylized.data().iter().all(|&v| v == 0.0) {
        return Ok(stylized);
    }
    normalize_nonzero(&stylized).or_else(|_| Ok(stylized))
}

/// Builds one stylised copy (id suffix `-nst`) of every content case.
pub fn augment_dataset(
    ssa_cases: &[Case],
    gli_cases: &[Case],
    extractor: &FeatureExtractor<f32>,
    config: &StyleTransferConfig,
) -> Result<AugmentOutcome> {
    config.validate()?;
    let ssa_ids: Vec<String> = ssa_cases.iter().map(|c| c.id.clone()).collect();
    let gli_ids: Vec<String> = gli_cases.iter().map(|c| c.id.clone()).collect();
    let pairs = pair_randomly(&ssa_ids, &gli_ids, config.seed)?;
    let mut cases = Vec::with_capacity(pairs.len());
    let mut slices = Vec::new();
    for (pi, (pair, content)) in pairs.iter().zip(ssa_cases).enumerate() {
        let style = gli_cases.iter().find(|c| c.id == pair.style_case_id).expect("style id drawn from the style list");
        if content.images.spacing() != style.images.spacing() {
            return Err(Error::InvalidArgument(format!(
                "pair {} / {}: spacing {:?} vs {:?}; preprocess to a common spacing first",
                pair.content_case_id,
                pair.style_case_id,
                content.images.spacing(),
                style.images.spacing()
            )));
        }
        let images = content.images.try_map(|m, grid| {
            let cfg = StyleTransferConfig {
                seed: config
                    .seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add(((pi as u64) << 8) | m.index() as u64),
                ..config.clone()
            };
            stylize_volume(grid, style.images.channel(m), extractor, &cfg, |z, zs, res| {
                slices.push(SliceRecord {
                    content_case_id: pair.content_case_id.clone(),
                    style_case_id: pair.style_case_id.clone(),
                    channel: m,
                    slice_index: z,
                    style_slice_index: zs,
                    initial: res.initial(),
                    last: res.last(),
                });
            })
            .map_err(|e| {
                let msg = format!(
                    "pair {} (content) / {} (style), channel {m}: {e}",
                    pair.content_case_id, pair.style_case_id
                );
                if e.is_numerical() {
                    Error::Numerical(msg)
                } else {
                    Error::InvalidArgument(msg)
                }
            })
        })?;
        cases.push(Case::new(format!("{}-nst", content.id), images, content.truth.clone(), content.domain)?);
    }
    Ok(AugmentOutcome { cases, pairs, slices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{image_from_vec, FeatureExtractorSpec};

    fn rand_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn content_loss_examples() {
        let f = FeatureMap::from_vec(1, 1, 2, vec![1.0, 2.0]).unwrap();
        let (l, g) = content_loss(&f, &f).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data.iter().all(|&v| v == 0.0));
        let p = FeatureMap::from_vec(1, 1, 2, vec![1.0, 4.0]).unwrap();
        let (l, g) = content_loss(&f, &p).unwrap();
        assert_eq!(l, 2.0);
        assert_eq!(g.data, vec![0.0, -2.0]);
        assert!(content_loss(&f, &rand_map(2, 1, 1, 0)).is_err());
    }

    #[test]
    fn style_loss_examples() {
        let f = rand_map(3, 2, 2, 1);
        let a = gram_matrix(&f);
        let (l, _) = style_loss(&[&f], &[a], &[1.0]).unwrap();
        assert_eq!(l, 0.0);
        // N = M = 1, F = [2] so G = [4]; A = [0] → 16 / 4 = 4
        let f = FeatureMap::from_vec(1, 1, 1, vec![2.0]).unwrap();
        let a = GramMatrix { n: 1, m: 1, data: vec![0.0] };
        let (l, g) = style_loss(&[&f], &[a], &[1.0]).unwrap();
        assert_eq!(l, 4.0);
        // d/dF (F² − 0)²/4 = F³ = 8
        assert_eq!(g[0].data, vec![8.0]);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let f = rand_map(3, 2, 3, 2);
        let p = rand_map(3, 2, 3, 3);
        let a = gram_matrix(&rand_map(3, 2, 3, 4));
        let (_, gc) = content_loss(&f, &p).unwrap();
        let (_, gs) = style_layer_loss(&f, &a).unwrap();
        let h = 1e-4;
        for i in 0..f.data.len() {
            let mut fp = f.clone();
            fp.data[i] += h;
            let mut fm = f.clone();
            fm.data[i] -= h;
            let fd_c = (content_loss(&fp, &p).unwrap().0 - content_loss(&fm, &p).unwrap().0) / (2.0 * h);
            let fd_s = (style_layer_loss(&fp, &a).unwrap().0 - style_layer_loss(&fm, &a).unwrap().0) / (2.0 * h);
            assert!(rel_err(fd_c, gc.data[i]) < 1e-4);
            assert!(rel_err(fd_s, gs.data[i]) < 1e-4, "{fd_s} vs {}", gs.data[i]);
        }
    }

    #[test]
    fn total_pixel_gradient_matches_finite_differences() {
        let ex = FeatureExtractor::<f64>::build(&FeatureExtractorSpec::default()).unwrap();
        let c = rand_map(1, 8, 8, 5);
        let s = rand_map(1, 8, 8, 6);
        let x = rand_map(1, 8, 8, 7);
        let (_, g) = nst_loss_and_grad(&x, &c, &s, &ex, 1.0, 1e3).unwrap();
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let lp = nst_loss_and_grad(&xp, &c, &s, &ex, 1.0, 1e3).unwrap().0.total;
            let lm = nst_loss_and_grad(&xm, &c, &s, &ex, 1.0, 1e3).unwrap().0.total;
            worst = worst.max(rel_err((lp - lm) / (2.0 * h), g.data[i]));
        }
        assert!(worst < 1e-4, "max rel err {worst}");
    }

    #[test]
    fn identical_content_and_style_is_a_fixed_point() {
        let ex = FeatureExtractor::<f32>::build(&FeatureExtractorSpec::default()).unwrap();
        let img = image_from_vec(8, 8, (0..64).map(|i| (i % 7) as f32 - 3.0).collect()).unwrap();
        let out = nst_optimize(&img, &img, &ex, &StyleTransferConfig { iterations: 5, ..Default::default() }).unwrap();
        assert_eq!(out.trace[0].total, 0.0);
        assert_eq!(out.image, img);
    }

    #[test]
    fn optimisation_is_deterministic() {
        let ex = FeatureExtractor::<f32>::build(&FeatureExtractorSpec::default()).unwrap();
        let c = rand_map(1, 8, 8, 1).cast::<f32>();
        let s = rand_map(1, 8, 8, 2).cast::<f32>();
        let cfg = StyleTransferConfig { iterations: 10, init: InitMode::Noise, seed: 3, ..Default::default() };
        let a = nst_optimize(&c, &s, &ex, &cfg).unwrap();
        let b = nst_optimize(&c, &s, &ex, &cfg).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.len(), 11);
    }

    #[test]
    fn divergence_guard_trips() {
        let ex = FeatureExtractor::<f64>::build(&FeatureExtractorSpec::default()).unwrap();
        let c = rand_map(1, 8, 8, 1);
        let s = rand_map(1, 8, 8, 2);
        let cfg = StyleTransferConfig { iterations: 50, step_size: 50.0, ..Default::default() };
        let err = nst_optimize(&c, &s, &ex, &cfg).unwrap_err();
        assert!(err.is_numerical(), "{err}");
    }

    #[test]
    fn style_only_descent() {
        let ex = FeatureExtractor::<f64>::build(&FeatureExtractorSpec::default()).unwrap();
        let c = rand_map(1, 16, 16, 8);
        let s = rand_map(1, 16, 16, 9);
        let cfg = StyleTransferConfig { alpha: 0.0, beta: 1e3, iterations: 50, ..Default::default() };
        let out = nst_optimize(&c, &s, &ex, &cfg).unwrap();
        assert!(out.last().style < out.initial().style);
    }

    #[test]
    fn pairing_contract() {
        let ssa: Vec<String> = (0..60).map(|i| format!("SSA-{i}")).collect();
        let gli: Vec<String> = (0..1251).map(|i| format!("GLI-{i}")).collect();
        let p = pair_randomly(&ssa, &gli, 4).unwrap();
        assert_eq!(p.len(), 60);
        for (pair, id) in p.iter().zip(&ssa) {
            assert_eq!(&pair.content_case_id, id);
            assert!(gli.contains(&pair.style_case_id));
        }
        assert_eq!(p, pair_randomly(&ssa, &gli, 4).unwrap());
        let one = pair_randomly(&ssa[..1], &gli[..1], 9).unwrap();
        assert_eq!(one, vec![StylePair { content_case_id: "SSA-0".into(), style_case_id: "GLI-0".into() }]);
        assert!(pair_randomly(&[], &gli, 1).is_err());
        assert!(pair_randomly(&ssa, &[], 1).is_err());
    }

    #[test]
    fn slice_mapping_and_fitting() {
        assert_eq!(matching_slice(0, 10, 20), 0);
        assert_eq!(matching_slice(9, 10, 20), 18);
        assert_eq!(matching_slice(9, 10, 5), 4);
        let src = image_from_vec(2, 2, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let padded = fit_slice(&src, 4, 4);
        assert_eq!(padded.data[5], 1.0);
        assert_eq!(padded.data[10], 4.0);
        assert_eq!(padded.data.iter().filter(|&&v| v != 0.0).count(), 4);
        let cropped = fit_slice(&padded, 2, 2);
        assert_eq!(cropped, src);
    }
}
