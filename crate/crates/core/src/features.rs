//! Fixed convolutional feature pyramid used for content and style statistics.
//!
//! The network is a stack of bias-free 3×3 convolutions (stride 1, zero
//! padding 1) with ReLU, optionally followed by 2×2 average pooling. Weights
//! are drawn once from a seed and never trained. The recorded feature map of
//! a layer is its post-ReLU, pre-pool activation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Channel-major `(C, H, W)` map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap { channels, height, width, data: vec![T::zero(); channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "feature map ({channels},{height},{width}) needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(FeatureMap { channels, height, width, data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Spatial size `H·W`.
    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// A single-channel 2D slice.
pub type Image<T> = FeatureMap<T>;

pub fn image_from_vec<T: Real>(height: usize, width: usize, data: Vec<T>) -> Result<Image<T>> {
    FeatureMap::from_vec(1, height, width, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    /// 2×2 average pool after the activation.
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractorSpec {
    pub layers: Vec<ConvLayerSpec>,
    pub content_layer: usize,
    pub style_layers: Vec<usize>,
    pub style_weights: Vec<f64>,
    pub seed: u64,
}

impl Default for FeatureExtractorSpec {
    /// Four layers of widths 8, 16, 16, 32 with pooling after the first and
    /// third; content from the last layer, uniform style weights on all.
    fn default() -> Self {
        let widths = [8, 16, 16, 32];
        FeatureExtractorSpec {
            layers: widths
                .iter()
                .enumerate()
                .map(|(i, &w)| ConvLayerSpec { out_channels: w, pool: i == 0 || i == 2 })
                .collect(),
            content_layer: 3,
            style_layers: vec![0, 1, 2, 3],
            style_weights: vec![0.25; 4],
            seed: 0x5EED_F00D,
        }
    }
}

impl FeatureExtractorSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.layers.len();
        if n == 0 {
            return Err(Error::InvalidArgument("extractor needs at least one layer".into()));
        }
        if self.layers.iter().any(|l| l.out_channels == 0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        if self.content_layer >= n {
            return Err(Error::InvalidArgument(format!(
                "content layer {} out of range for {n} layers",
                self.content_layer
            )));
        }
        if self.style_layers.is_empty() || self.style_layers.iter().any(|&l| l >= n) {
            return Err(Error::InvalidArgument(format!("style layers {:?} invalid for {n} layers", self.style_layers)));
        }
        if self.style_weights.len() != self.style_layers.len()
            || self.style_weights.iter().any(|&w| !(w > 0.0))
            || (self.style_weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidArgument(format!(
                "style weights {:?} must be positive, one per style layer, summing to 1",
                self.style_weights
            )));
        }
        Ok(())
    }

    /// Smallest side length an input may have so every pool sees ≥ 2 pixels.
    pub fn min_input_side(&self) -> usize {
        1usize << self.layers.iter().filter(|l| l.pool).count()
    }

    /// Feature-map shapes for an `H×W` input.
    pub fn feature_shapes(&self, height: usize, width: usize) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = (height, width);
        self.layers
            .iter()
            .map(|l| {
                let s = (l.out_channels, h, w);
                if l.pool {
                    h /= 2;
                    w /= 2;
                }
                s
            })
            .collect()
    }
}

/// Orthogonal rows (blockwise when there are more rows than columns), drawn
/// from a Gaussian and orthonormalised with modified Gram-Schmidt.
fn orthogonal_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut m: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    for r in 0..rows {
        let block_start = (r / cols) * cols;
        for p in block_start..r {
            let dot: f64 = (0..cols).map(|k| m[r * cols + k] * m[p * cols + k]).sum();
            for k in 0..cols {
                m[r * cols + k] -= dot * m[p * cols + k];
            }
        }
        let norm = (0..cols).map(|k| m[r * cols + k].powi(2)).sum::<f64>().sqrt();
        for k in 0..cols {
            m[r * cols + k] /= norm;
        }
    }
    m
}

/// Extractor with materialised weights, laid out `(out, in, 3, 3)` per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor<T> {
    spec: FeatureExtractorSpec,
    in_channels: Vec<usize>,
    weights: Vec<Vec<T>>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape<T> {
    inputs: Vec<FeatureMap<T>>,
    pre: Vec<FeatureMap<T>>,
    /// Post-ReLU outputs, one per layer; these are the pyramid features.
    pub features: Vec<FeatureMap<T>>,
}

/// Selected feature maps of one image, indexed by layer.
pub type FeaturePyramid<T> = Vec<FeatureMap<T>>;

impl<T: Real> FeatureExtractor<T> {
    pub fn build(spec: &FeatureExtractorSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut in_ch = 1;
        let mut in_channels = Vec::new();
        let mut weights = Vec::new();
        for l in &spec.layers {
            let fan_in = in_ch * 9;
            let scale = (2.0 / fan_in as f64).sqrt();
            let w = orthogonal_rows(l.out_channels, fan_in, &mut rng);
            weights.push(w.into_iter().map(|v| T::of(v * scale)).collect());
            in_channels.push(in_ch);
            in_ch = l.out_channels;
        }
        Ok(FeatureExtractor { spec: spec.clone(), in_channels, weights })
    }

    pub fn spec(&self) -> &FeatureExtractorSpec {
        &self.spec
    }

    pub fn weights(&self, layer: usize) -> &[T] {
        &self.weights[layer]
    }

    pub fn check_input(&self, image: &Image<T>) -> Result<()> {
        let min = self.spec.min_input_side().max(1);
        if image.channels != 1 || image.height < min || image.width < min {
            return Err(Error::Shape(format!(
                "extractor input must be 1×H×W with H,W ≥ {min}, got {:?}",
                image.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, image: &Image<T>) -> Result<ForwardTape<T>> {
        self.check_input(image)?;
        let n = self.spec.layers.len();
        let mut tape =
            ForwardTape { inputs: Vec::with_capacity(n), pre: Vec::with_capacity(n), features: Vec::with_capacity(n) };
        let mut x = image.clone();
        for (li, l) in self.spec.layers.iter().enumerate() {
            let pre = conv3x3(&x, &self.weights[li], l.out_channels);
            let post = FeatureMap { data: pre.data.iter().map(|&v| v.max(T::zero())).collect(), ..pre.clone() };
            let next = if l.pool { avg_pool2(&post) } else { post.clone() };
            tape.inputs.push(std::mem::replace(&mut x, next));
            tape.pre.push(pre);
            tape.features.push(post);
        }
        Ok(tape)
    }

    pub fn extract_features(&self, image: &Image<T>) -> Result<FeaturePyramid<T>> {
        Ok(self.forward(image)?.features)
    }

    /// Gradient w.r.t. the input image given gradients w.r.t. any subset of
    /// the per-layer feature maps.
    pub fn backward(&self, tape: &ForwardTape<T>, feature_grads: &[Option<FeatureMap<T>>]) -> Result<Image<T>> {
        let n = self.spec.layers.len();
        if feature_grads.len() != n {
            return Err(Error::Shape(format!("expected {n} feature gradients, got {}", feature_grads.len())));
        }
        // gradient flowing into the current layer's output (after pooling)
        let mut upstream: Option<FeatureMap<T>> = None;
        for li in (0..n).rev() {
            let l = &self.spec.layers[li];
            let post_shape = tape.features[li].shape();
            let mut d_post = match upstream.take() {
                Some(g) if l.pool => avg_pool2_backward(&g, post_shape),
                Some(g) => g,
                None => FeatureMap::zeros(post_shape.0, post_shape.1, post_shape.2),
            };
            if let Some(g) = &feature_grads[li] {
                if g.shape() != post_shape {
                    return Err(Error::Shape(format!(
                        "layer {li} gradient shape {:?} != feature shape {post_shape:?}",
                        g.shape()
                    )));
                }
                for (d, &v) in d_post.data.iter_mut().zip(&g.data) {
                    *d += v;
                }
            }
            for (d, &p) in d_post.data.iter_mut().zip(&tape.pre[li].data) {
                if p <= T::zero() {
                    *d = T::zero();
                }
            }
            upstream = Some(conv3x3_backward_input(&d_post, &self.weights[li], self.in_channels[li]));
        }
        Ok(upstream.expect("at least one layer"))
    }
}

/// Zero-padded 3×3 convolution without bias.
pub fn conv3x3<T: Real>(x: &FeatureMap<T>, w: &[T], out_channels: usize) -> FeatureMap<T> {
    let (c, h, wd) = x.shape();
    let mut out = FeatureMap::zeros(out_channels, h, wd);
    for o in 0..out_channels {
        let dst = &mut out.data[o * h * wd..(o + 1) * h * wd];
        for i in 0..c {
            let src = &x.data[i * h * wd..(i + 1) * h * wd];
            for ky in 0..3 {
                for kx in 0..3 {
                    let k = w[((o * c + i) * 3 + ky) * 3 + kx];
                    if k == T::zero() {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &src[sy as usize * wd..(sy as usize + 1) * wd];
                        let drow = &mut dst[y * wd..(y + 1) * wd];
                        let x0 = if kx == 0 { 1 } else { 0 };
                        let x1 = if kx == 2 { wd.saturating_sub(1) } else { wd };
                        for xx in x0..x1 {
                            drow[xx] += k * srow[xx + kx - 1];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3x3_backward_input<T: Real>(dy: &FeatureMap<T>, w: &[T], in_channels: usize) -> FeatureMap<T> {
    let (oc, h, wd) = dy.shape();
    let mut dx = FeatureMap::zeros(in_channels, h, wd);
    for o in 0..oc {
        let src = &dy.data[o * h * wd..(o + 1) * h * wd];
        for i in 0..in_channels {
            let dst = &mut dx.data[i * h * wd..(i + 1) * h * wd];
            for ky in 0..3 {
                for kx in 0..3 {
                    let k = w[((o * in_channels + i) * 3 + ky) * 3 + kx];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let grow = &src[y * wd..(y + 1) * wd];
                        let drow = &mut dst[sy as usize * wd..(sy as usize + 1) * wd];
                        let x0 = if kx == 0 { 1 } else { 0 };
                        let x1 = if kx == 2 { wd.saturating_sub(1) } else { wd };
                        for xx in x0..x1 {
                            drow[xx + kx - 1] += k * grow[xx];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn avg_pool2<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = FeatureMap::zeros(c, oh, ow);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let at = |dy: usize, dx: usize| x.data[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
                out.data[(ch * oh + y) * ow + xx] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * quarter;
            }
        }
    }
    out
}

fn avg_pool2_backward<T: Real>(g: &FeatureMap<T>, shape: (usize, usize, usize)) -> FeatureMap<T> {
    let (c, h, w) = shape;
    let (oh, ow) = (g.height, g.width);
    let quarter = T::of(0.25);
    let mut out = FeatureMap::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let v = g.data[(ch * oh + y) * ow + xx] * quarter;
                for dy in 0..2 {
                    for dx in 0..2 {
                        out.data[(ch * h + 2 * y + dy) * w + 2 * xx + dx] = v;
                    }
                }
            }
        }
    }
    out
}

/// Symmetric channel-by-channel inner-product matrix of a feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix<T> {
    /// Number of channels `N`.
    pub n: usize,
    /// Spatial size `M = H·W` the products were summed over.
    pub m: usize,
    pub data: Vec<T>,
}

impl<T: Real> GramMatrix<T> {
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.n + j]
    }
}

/// `G = F Fᵀ` with `F` flattened to `N × M`; unnormalised.
pub fn gram_matrix<T: Real>(f: &FeatureMap<T>) -> GramMatrix<T> {
    let n = f.channels;
    let m = f.spatial();
    let mut g = vec![T::zero(); n * n];
    for i in 0..n {
        let fi = &f.data[i * m..(i + 1) * m];
        for j in i..n {
            let fj = &f.data[j * m..(j + 1) * m];
            let dot: T = fi.iter().zip(fj).map(|(&a, &b)| a * b).sum();
            g[i * n + j] = dot;
            g[j * n + i] = dot;
        }
    }
    GramMatrix { n, m, data: g }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        image_from_vec(h, w, (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn same_seed_same_weights_different_seed_differs() {
        let spec = FeatureExtractorSpec::default();
        let a = FeatureExtractor::<f32>::build(&spec).unwrap();
        let b = FeatureExtractor::<f32>::build(&spec).unwrap();
        assert_eq!(a, b);
        let c = FeatureExtractor::<f32>::build(&FeatureExtractorSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.weights(0), c.weights(0));
    }

    #[test]
    fn default_feature_shapes_on_32() {
        let ex = FeatureExtractor::<f64>::build(&FeatureExtractorSpec::default()).unwrap();
        let f = ex.extract_features(&random_image(32, 32, 1)).unwrap();
        let shapes: Vec<_> = f.iter().map(|m| m.shape()).collect();
        assert_eq!(shapes, vec![(8, 32, 32), (16, 16, 16), (16, 16, 16), (32, 8, 8)]);
        assert_eq!(shapes, FeatureExtractorSpec::default().feature_shapes(32, 32));
    }

    #[test]
    fn orthogonal_kernels_are_scaled_orthonormal_rows() {
        let ex = FeatureExtractor::<f64>::build(&FeatureExtractorSpec::default()).unwrap();
        let w = ex.weights(1);
        let fan_in = 8 * 9;
        let scale2 = 2.0 / fan_in as f64;
        for a in 0..16 {
            for b in 0..16 {
                let dot: f64 = (0..fan_in).map(|k| w[a * fan_in + k] * w[b * fan_in + k]).sum();
                let expect = if a == b { scale2 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let ex = FeatureExtractor::<f64>::build(&FeatureExtractorSpec::default()).unwrap();
        let f = ex.extract_features(&FeatureMap::zeros(1, 16, 16)).unwrap();
        assert!(f.iter().all(|m| m.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn first_layer_is_linear() {
        let ex = FeatureExtractor::<f64>::build(&FeatureExtractorSpec::default()).unwrap();
        let x = random_image(12, 12, 2);
        let x2 = FeatureMap { data: x.data.iter().map(|v| 2.0 * v).collect(), ..x.clone() };
        let a = ex.forward(&x).unwrap();
        let b = ex.forward(&x2).unwrap();
        for (p, q) in a.pre[0].data.iter().zip(&b.pre[0].data) {
            assert!((2.0 * p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn undersized_input_rejected() {
        let ex = FeatureExtractor::<f64>::build(&FeatureExtractorSpec::default()).unwrap();
        assert!(ex.extract_features(&FeatureMap::zeros(1, 3, 8)).is_err());
        assert!(ex.extract_features(&FeatureMap::zeros(1, 4, 4)).is_ok());
    }

    #[test]
    fn forward_matches_nested_loop_oracle() {
        let spec = FeatureExtractorSpec::default();
        let ex = FeatureExtractor::<f64>::build(&spec).unwrap();
        let img = random_image(16, 16, 3);
        let got = ex.extract_features(&img).unwrap();

        // independent direct evaluation: out[o,y,x] = relu(Σ_i Σ_ky Σ_kx w·in[i,y+ky-1,x+kx-1])
        let mut cur: Vec<Vec<Vec<f64>>> = vec![(0..16).map(|y| img.data[y * 16..(y + 1) * 16].to_vec()).collect()];
        for (li, l) in spec.layers.iter().enumerate() {
            let (c, h, w) = (cur.len(), cur[0].len(), cur[0][0].len());
            let wt = ex.weights(li);
            let mut out = vec![vec![vec![0.0; w]; h]; l.out_channels];
            for o in 0..l.out_channels {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for i in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                        acc += wt[((o * c + i) * 3 + ky) * 3 + kx] * cur[i][sy as usize][sx as usize];
                                    }
                                }
                            }
                        }
                        out[o][y][x] = acc.max(0.0);
                    }
                }
            }
            for o in 0..l.out_channels {
                for y in 0..h {
                    for x in 0..w {
                        let v = got[li].data[(o * h + y) * w + x];
                        assert!((v - out[o][y][x]).abs() < 1e-5, "layer {li}");
                    }
                }
            }
            cur = if l.pool {
                out.iter()
                    .map(|ch| {
                        (0..h / 2)
                            .map(|y| {
                                (0..w / 2)
                                    .map(|x| {
                                        (ch[2 * y][2 * x]
                                            + ch[2 * y][2 * x + 1]
                                            + ch[2 * y + 1][2 * x]
                                            + ch[2 * y + 1][2 * x + 1])
                                            / 4.0
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            } else {
                out
            };
        }
    }

    #[test]
    fn interior_translation_consistency() {
        let spec = FeatureExtractorSpec {
            layers: vec![ConvLayerSpec { out_channels: 4, pool: false }, ConvLayerSpec { out_channels: 4, pool: true }],
            content_layer: 1,
            style_layers: vec![0, 1],
            style_weights: vec![0.5, 0.5],
            seed: 9,
        };
        let ex = FeatureExtractor::<f64>::build(&spec).unwrap();
        let mut a = FeatureMap::zeros(1, 16, 16);
        let mut b = FeatureMap::zeros(1, 16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for y in 4..10 {
            for x in 4..10 {
                let v = rng.gen_range(-1.0..1.0);
                a.data[y * 16 + x] = v;
                b.data[(y + 1) * 16 + x + 1] = v;
            }
        }
        let fa = ex.forward(&a).unwrap();
        let fb = ex.forward(&b).unwrap();
        for li in 0..2 {
            for c in 0..4 {
                for y in 0..15 {
                    for x in 0..15 {
                        let p = fa.pre[li].data[(c * 16 + y) * 16 + x];
                        let q = fb.pre[li].data[(c * 16 + y + 1) * 16 + x + 1];
                        assert!((p - q).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn gram_examples() {
        let f = FeatureMap::from_vec(2, 1, 1, vec![1.0, 2.0]).unwrap();
        assert_eq!(gram_matrix(&f).data, vec![1.0, 2.0, 2.0, 4.0]);
        assert!(gram_matrix(&FeatureMap::<f64>::zeros(3, 2, 2)).data.iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vals: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let f = FeatureMap::from_vec(3, 2, 2, vals.clone()).unwrap();
        let g = gram_matrix(&f);
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += vals[i * 4 + k] * vals[j * 4 + k];
                }
                assert!((g.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gram_symmetric_and_psd() {
        let ex = FeatureExtractor::<f64>::build(&FeatureExtractorSpec::default()).unwrap();
        let f = ex.extract_features(&random_image(16, 16, 7)).unwrap();
        for fm in &f {
            let g = gram_matrix(fm);
            let n = g.n;
            let trace: f64 = (0..n).map(|i| g.get(i, i)).sum();
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(g.get(i, j), g.get(j, i));
                }
            }
            // PSD via xᵀGx ≥ -tol for random probes
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
            for _ in 0..50 {
                let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm2: f64 = x.iter().map(|v| v * v).sum();
                let q: f64 = (0..n).map(|i| (0..n).map(|j| x[i] * g.get(i, j) * x[j]).sum::<f64>()).sum();
                assert!(q >= -1e-6 * trace * norm2);
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let ex = FeatureExtractor::<f64>::build(&FeatureExtractorSpec::default()).unwrap();
        let img = random_image(8, 8, 11);
        // scalar objective: Σ_l Σ c_l ⊙ F_l with fixed random coefficients
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let shapes = ex.spec().feature_shapes(8, 8);
        let coeffs: Vec<FeatureMap<f64>> = shapes
            .iter()
            .map(|&(c, h, w)| {
                FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect();
        let objective = |x: &Image<f64>| -> f64 {
            let f = ex.extract_features(x).unwrap();
            f.iter().zip(&coeffs).map(|(a, b)| a.data.iter().zip(&b.data).map(|(p, q)| p * q).sum::<f64>()).sum()
        };
        let tape = ex.forward(&img).unwrap();
        let grads: Vec<_> = coeffs.iter().cloned().map(Some).collect();
        let g = ex.backward(&tape, &grads).unwrap();
        let step = 1e-4;
        for i in 0..img.data.len() {
            let mut p = img.clone();
            p.data[i] += step;
            let mut m = img.clone();
            m.data[i] -= step;
            let fd = (objective(&p) - objective(&m)) / (2.0 * step);
            let denom = fd.abs().max(g.data[i].abs()).max(1e-8);
            assert!(
                (fd - g.data[i]).abs() / denom < 1e-4 || (fd - g.data[i]).abs() < 1e-9,
                "pixel {i}: {fd} vs {}",
                g.data[i]
            );
        }
    }
}
