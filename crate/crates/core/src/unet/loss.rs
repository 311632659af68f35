use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

/// Soft-Dice smoothing term.
pub const DICE_EPS: f64 = 1e-5;

/// Weights `∝ 2^-k` for levels `0..=levels`, normalised to sum to one.
pub fn deep_supervision_weights(levels: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..=levels).map(|k| 0.5f64.powi(k as i32)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / sum).collect()
}

/// Nearest-neighbour label downsampling of a `(B, D, H, W)` label batch by
/// integer factors; output voxel `i` reads input `i·f + f/2`.
pub fn downsample_labels(labels: &[u8], batch: usize, spatial: [usize; 3], factor: [usize; 3]) -> Vec<u8> {
    if factor == [1, 1, 1] {
        return labels.to_vec();
    }
    let [d, h, w] = spatial;
    let out: [usize; 3] = std::array::from_fn(|a| spatial[a] / factor[a]);
    let mut res = Vec::with_capacity(batch * out.iter().product::<usize>());
    for b in 0..batch {
        let base = b * d * h * w;
        for z in 0..out[0] {
            let sz = z * factor[0] + factor[0] / 2;
            for y in 0..out[1] {
                let sy = y * factor[1] + factor[1] / 2;
                for x in 0..out[2] {
                    let sx = x * factor[2] + factor[2] / 2;
                    res.push(labels[base + (sz * h + sy) * w + sx]);
                }
            }
        }
    }
    res
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelLoss {
    pub weight: f64,
    pub dice: f64,
    pub ce: f64,
}

impl LevelLoss {
    pub fn total(&self) -> f64 {
        self.dice + self.ce
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub total: f64,
    pub levels: Vec<LevelLoss>,
    /// Gradient of `total` with respect to each level's logits.
    pub dlogits: Vec<Tensor<T>>,
}

/// Deep-supervised soft Dice + cross-entropy.
///
/// `target` holds label codes for the full-resolution `(B, D, H, W)` patch
/// batch; coarser levels see nearest-neighbour downsampled copies. Dice is
/// taken over foreground classes with sums pooled across the batch.
pub fn dice_ce_loss<T: Real>(logits: &[Tensor<T>], target: &[u8]) -> Result<LossOutput<T>> {
    let Some(first) = logits.first() else {
        return Err(Error::InvalidArgument("no logits given".into()));
    };
    let classes = first.channels();
    if classes < 2 {
        return Err(Error::Shape("need at least two classes".into()));
    }
    let full = first.spatial();
    if target.len() != first.batch() * first.spatial_len() {
        return Err(Error::Shape(format!(
            "target has {} labels, logits imply {}",
            target.len(),
            first.batch() * first.spatial_len()
        )));
    }
    if let Some(&bad) = target.iter().find(|&&c| c as usize >= classes) {
        return Err(Error::InvalidArgument(format!("label code {bad} outside 0..{classes}")));
    }
    let weights = deep_supervision_weights(logits.len() - 1);
    let mut out = LossOutput { total: 0.0, levels: Vec::new(), dlogits: Vec::new() };
    for (lg, &wk) in logits.iter().zip(&weights) {
        let sp = lg.spatial();
        if lg.channels() != classes || (0..3).any(|a| sp[a] == 0 || full[a] % sp[a] != 0) {
            return Err(Error::Shape(format!("level logits {:?} incompatible with {:?}", lg.shape, first.shape)));
        }
        let factor: [usize; 3] = std::array::from_fn(|a| full[a] / sp[a]);
        let g = downsample_labels(target, lg.batch(), full, factor);
        let (level, grad) = level_loss(lg, &g, wk);
        out.total += wk * level.total();
        out.levels.push(level);
        out.dlogits.push(grad);
    }
    Ok(out)
}

fn level_loss<T: Real>(logits: &Tensor<T>, target: &[u8], weight: f64) -> (LevelLoss, Tensor<T>) {
    let (nb, c, s) = (logits.batch(), logits.channels(), logits.spatial_len());
    let n = (nb * s) as f64;
    // softmax probabilities, (B, C, S)
    let mut p = vec![0.0f64; logits.data.len()];
    let mut ce = 0.0;
    for b in 0..nb {
        let src = logits.sample(b);
        let dst = &mut p[b * c * s..(b + 1) * c * s];
        for v in 0..s {
            let max = (0..c).map(|k| src[k * s + v].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..c {
                let e = (src[k * s + v].as_f64() - max).exp();
                dst[k * s + v] = e;
                sum += e;
            }
            for k in 0..c {
                dst[k * s + v] /= sum;
            }
            let t = target[b * s + v] as usize;
            ce -= dst[t * s + v].max(f64::MIN_POSITIVE).ln();
        }
    }
    ce /= n;

    let fg = c - 1;
    let mut inter = vec![0.0; c];
    let mut psum = vec![0.0; c];
    let mut gsum = vec![0.0; c];
    for b in 0..nb {
        for k in 1..c {
            for v in 0..s {
                let pv = p[(b * c + k) * s + v];
                psum[k] += pv;
                if target[b * s + v] as usize == k {
                    inter[k] += pv;
                    gsum[k] += 1.0;
                }
            }
        }
    }
    let mut dice_mean = 0.0;
    // dL/dp_k(v) = -(1/fg)·(2 g / den − num / den²)
    let mut coef_g = vec![0.0; c];
    let mut coef_c = vec![0.0; c];
    for k in 1..c {
        let num = 2.0 * inter[k] + DICE_EPS;
        let den = psum[k] + gsum[k] + DICE_EPS;
        dice_mean += num / den;
        coef_g[k] = -2.0 / (den * fg as f64);
        coef_c[k] = num / (den * den * fg as f64);
    }
    let dice = 1.0 - dice_mean / fg as f64;

    let mut grad = Tensor::zeros(logits.shape);
    let mut dp = vec![0.0; c];
    for b in 0..nb {
        let gs = grad.sample_mut(b);
        for v in 0..s {
            let t = target[b * s + v] as usize;
            let mut dot = 0.0;
            for k in 0..c {
                let pk = p[(b * c + k) * s + v];
                dp[k] = if k == 0 { 0.0 } else { coef_c[k] + if k == t { coef_g[k] } else { 0.0 } };
                dot += pk * dp[k];
            }
            for k in 0..c {
                let pk = p[(b * c + k) * s + v];
                let d_dice = pk * (dp[k] - dot);
                let d_ce = (pk - if k == t { 1.0 } else { 0.0 }) / n;
                gs[k * s + v] = T::of(weight * (d_dice + d_ce));
            }
        }
    }
    (LevelLoss { weight, dice, ce }, grad)
}
