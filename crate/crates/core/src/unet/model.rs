use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{
    conv_backward, conv_forward, instance_norm_backward, instance_norm_forward, leaky_relu_backward,
    leaky_relu_forward, up_backward, up_forward, ConvGeom, NormCache, UpGeom,
};
use super::tensor::Tensor;
use super::{UNetConfig, IN_CHANNELS};
use crate::error::{Error, Result};
use crate::optim::{adam_update, AdamParams};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub fan_in: usize,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvRef {
    geom: ConvGeom,
    w: usize,
    b: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct NormRef {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockRef {
    conv1: ConvRef,
    norm1: NormRef,
    conv2: ConvRef,
    norm2: NormRef,
}

#[derive(Debug, Clone, Copy)]
struct UpRef {
    geom: UpGeom,
    w: usize,
    b: usize,
}

/// Layer graph with indices into the flat parameter list.
#[derive(Debug, Clone)]
struct Arch {
    encoder: Vec<BlockRef>,
    /// Indexed by decoder level `s` (0 = full resolution).
    ups: Vec<UpRef>,
    decoder: Vec<BlockRef>,
    /// Indexed by supervision level.
    heads: Vec<ConvRef>,
    params: Vec<ParamInfo>,
}

impl Arch {
    fn new(cfg: &UNetConfig) -> Self {
        let mut params = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, kind: ParamKind, fan_in: usize| {
            params.push(ParamInfo { name, shape, kind, fan_in });
            params.len() - 1
        };
        let conv = |push: &mut dyn FnMut(String, Vec<usize>, ParamKind, usize) -> usize,
                    name: &str,
                    g: ConvGeom,
                    bias: bool| {
            let w = push(
                format!("{name}.weight"),
                vec![g.out_channels, g.in_channels, g.kernel[0], g.kernel[1], g.kernel[2]],
                ParamKind::Weight,
                g.in_channels * g.kernel_len(),
            );
            let b = bias.then(|| push(format!("{name}.bias"), vec![g.out_channels], ParamKind::Bias, 0));
            ConvRef { geom: g, w, b }
        };
        let norm =
            |push: &mut dyn FnMut(String, Vec<usize>, ParamKind, usize) -> usize, name: &str, c: usize| NormRef {
                gamma: push(format!("{name}.gamma"), vec![c], ParamKind::Gamma, 0),
                beta: push(format!("{name}.beta"), vec![c], ParamKind::Beta, 0),
            };
        let block = |push: &mut dyn FnMut(String, Vec<usize>, ParamKind, usize) -> usize,
                     name: &str,
                     cin: usize,
                     cout: usize,
                     kernel: [usize; 3],
                     stride: [usize; 3]| {
            let conv1 = conv(
                push,
                &format!("{name}.conv1"),
                ConvGeom { in_channels: cin, out_channels: cout, kernel, stride },
                false,
            );
            let norm1 = norm(push, &format!("{name}.norm1"), cout);
            let conv2 = conv(
                push,
                &format!("{name}.conv2"),
                ConvGeom { in_channels: cout, out_channels: cout, kernel, stride: [1, 1, 1] },
                false,
            );
            let norm2 = norm(push, &format!("{name}.norm2"), cout);
            BlockRef { conv1, norm1, conv2, norm2 }
        };

        let s_count = cfg.stage_count;
        let mut encoder = Vec::with_capacity(s_count);
        let mut cin = IN_CHANNELS;
        for s in 0..s_count {
            let f = cfg.features(s);
            encoder.push(block(&mut push, &format!("encoder.{s}"), cin, f, cfg.kernels[s], cfg.strides[s]));
            cin = f;
        }
        let mut ups = vec![None; s_count.saturating_sub(1)];
        let mut decoder = vec![None; s_count.saturating_sub(1)];
        for s in (0..s_count.saturating_sub(1)).rev() {
            let (fin, fout) = (cfg.features(s + 1), cfg.features(s));
            let geom = UpGeom { in_channels: fin, out_channels: fout, stride: cfg.strides[s + 1] };
            let w = push(
                format!("decoder.{s}.up.weight"),
                vec![fin, fout, geom.stride[0], geom.stride[1], geom.stride[2]],
                ParamKind::Weight,
                fin,
            );
            let b = push(format!("decoder.{s}.up.bias"), vec![fout], ParamKind::Bias, 0);
            ups[s] = Some(UpRef { geom, w, b });
            decoder[s] = Some(block(&mut push, &format!("decoder.{s}"), 2 * fout, fout, cfg.kernels[s], [1, 1, 1]));
        }
        let heads = (0..=cfg.deep_supervision_levels)
            .map(|k| {
                let f = cfg.features(k);
                conv(
                    &mut push,
                    &format!("head.{k}"),
                    ConvGeom { in_channels: f, out_channels: cfg.num_classes, kernel: [1, 1, 1], stride: [1, 1, 1] },
                    true,
                )
            })
            .collect();
        Arch {
            encoder,
            ups: ups.into_iter().map(Option::unwrap).collect(),
            decoder: decoder.into_iter().map(Option::unwrap).collect(),
            heads,
            params,
        }
    }
}

/// Serializable snapshot of the training RNG.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position, decimal string (u128 does not survive JSON numbers).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad RNG word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Weights, Adam moments, counters and RNG of one model.
#[derive(Debug, Clone)]
pub struct ModelState<T> {
    pub config: UNetConfig,
    pub params: Vec<Vec<T>>,
    pub adam_m: Vec<Vec<T>>,
    pub adam_v: Vec<Vec<T>>,
    pub step: u64,
    pub epoch: u64,
    pub rng: ChaCha8Rng,
    /// Smoothed validation Dice carried across epochs (and checkpoints).
    pub pseudo_dice_ema: Option<f64>,
    arch: Arch,
}

impl<T: Real> PartialEq for ModelState<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.params == other.params
            && self.adam_m == other.adam_m
            && self.adam_v == other.adam_v
            && self.step == other.step
            && self.epoch == other.epoch
            && self.rng == other.rng
            && self.pseudo_dice_ema == other.pseudo_dice_ema
    }
}

pub type Gradients<T> = Vec<Vec<T>>;

#[derive(Debug, Clone)]
struct BlockCache<T> {
    input: Tensor<T>,
    norm1: NormCache<T>,
    pre1: Tensor<T>,
    act1: Tensor<T>,
    norm2: NormCache<T>,
    pre2: Tensor<T>,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    encoder: Vec<BlockCache<T>>,
    enc_out: Vec<Tensor<T>>,
    up_in: Vec<Tensor<T>>,
    decoder: Vec<BlockCache<T>>,
    dec_out: Vec<Tensor<T>>,
}

impl<T: Real> ForwardCache<T> {
    /// Sign of every LeakyReLU input, encoder blocks first. Two inputs with
    /// equal patterns lie on the same smooth piece of the network.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|b| b.pre1.data.iter().chain(&b.pre2.data))
            .map(|v| *v > T::zero())
            .collect()
    }
}

impl<T: Real> ModelState<T> {
    /// He-initialised model; identical config (incl. seed) gives identical weights.
    pub fn build(config: &UNetConfig) -> Result<Self> {
        config.validate()?;
        let arch = Arch::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params: Vec<Vec<T>> = arch
            .params
            .iter()
            .map(|p| match p.kind {
                ParamKind::Weight => {
                    let normal = Normal::new(0.0, (2.0 / p.fan_in as f64).sqrt()).expect("positive sd");
                    (0..p.len()).map(|_| T::of(normal.sample(&mut rng))).collect()
                }
                ParamKind::Gamma => vec![T::one(); p.len()],
                ParamKind::Bias | ParamKind::Beta => vec![T::zero(); p.len()],
            })
            .collect();
        let zeros: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        // training stream is independent of the init stream
        let train_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xA5A5_5A5A_C3C3_3C3C);
        Ok(ModelState {
            config: config.clone(),
            params,
            adam_m: zeros.clone(),
            adam_v: zeros,
            step: 0,
            epoch: 0,
            rng: train_rng,
            pseudo_dice_ema: None,
            arch,
        })
    }

    /// Rebuilds a state from raw parts (checkpoint loading).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        config: UNetConfig,
        params: Vec<Vec<T>>,
        adam_m: Vec<Vec<T>>,
        adam_v: Vec<Vec<T>>,
        step: u64,
        epoch: u64,
        rng: ChaCha8Rng,
        pseudo_dice_ema: Option<f64>,
    ) -> Result<Self> {
        config.validate()?;
        let arch = Arch::new(&config);
        for (i, info) in arch.params.iter().enumerate() {
            for (what, v) in [("weights", &params), ("first moments", &adam_m), ("second moments", &adam_v)] {
                if v.len() != arch.params.len() || v[i].len() != info.len() {
                    return Err(Error::Checkpoint(format!("{what} do not match the architecture at {}", info.name)));
                }
            }
        }
        Ok(ModelState { config, params, adam_m, adam_v, step, epoch, rng, pseudo_dice_ema, arch })
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.arch.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn zero_grads(&self) -> Gradients<T> {
        self.params.iter().map(|p| vec![T::zero(); p.len()]).collect()
    }

    /// Copies weights and counters into another precision.
    pub fn cast<U: Real>(&self) -> ModelState<U> {
        let conv = |v: &Vec<Vec<T>>| -> Vec<Vec<U>> {
            v.iter().map(|p| p.iter().map(|x| U::of(x.as_f64())).collect()).collect()
        };
        ModelState {
            config: self.config.clone(),
            params: conv(&self.params),
            adam_m: conv(&self.adam_m),
            adam_v: conv(&self.adam_v),
            step: self.step,
            epoch: self.epoch,
            rng: self.rng.clone(),
            pseudo_dice_ema: self.pseudo_dice_ema,
            arch: self.arch.clone(),
        }
    }

    /// Clears Adam moments and the step counter (fine-tuning restart).
    pub fn reset_optimizer(&mut self) {
        for v in self.adam_m.iter_mut().chain(self.adam_v.iter_mut()) {
            v.iter_mut().for_each(|x| *x = T::zero());
        }
        self.step = 0;
    }

    fn block_forward(&self, blk: &BlockRef, x: &Tensor<T>) -> (Tensor<T>, BlockCache<T>) {
        let p = &self.params;
        let c1 = conv_forward(x, &blk.conv1.geom, &p[blk.conv1.w], None);
        let (pre1, norm1) = instance_norm_forward(&c1, &p[blk.norm1.gamma], &p[blk.norm1.beta]);
        let act1 = leaky_relu_forward(&pre1);
        let c2 = conv_forward(&act1, &blk.conv2.geom, &p[blk.conv2.w], None);
        let (pre2, norm2) = instance_norm_forward(&c2, &p[blk.norm2.gamma], &p[blk.norm2.beta]);
        let out = leaky_relu_forward(&pre2);
        (out, BlockCache { input: x.clone(), norm1, pre1, act1, norm2, pre2 })
    }

    fn block_backward(
        &self,
        blk: &BlockRef,
        cache: &BlockCache<T>,
        dout: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Tensor<T> {
        let p = &self.params;
        let d_pre2 = leaky_relu_backward(&cache.pre2, dout);
        let (dg, db) = two_mut(grads, blk.norm2.gamma, blk.norm2.beta);
        let d_c2 = instance_norm_backward(&d_pre2, &cache.norm2, &p[blk.norm2.gamma], dg, db);
        let d_act1 = conv_backward(&cache.act1, &d_c2, &blk.conv2.geom, &p[blk.conv2.w], &mut grads[blk.conv2.w], None);
        let d_pre1 = leaky_relu_backward(&cache.pre1, &d_act1);
        let (dg, db) = two_mut(grads, blk.norm1.gamma, blk.norm1.beta);
        let d_c1 = instance_norm_backward(&d_pre1, &cache.norm1, &p[blk.norm1.gamma], dg, db);
        conv_backward(&cache.input, &d_c1, &blk.conv1.geom, &p[blk.conv1.w], &mut grads[blk.conv1.w], None)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != IN_CHANNELS || x.spatial() != self.config.patch_size {
            return Err(Error::Shape(format!(
                "model expects (B, {IN_CHANNELS}, {:?}), got {:?}",
                self.config.patch_size, x.shape
            )));
        }
        Ok(())
    }

    /// Logits per supervision level (level 0 at full patch resolution).
    pub fn forward(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> Result<(Vec<Tensor<T>>, ForwardCache<T>)> {
        self.check_input(x)?;
        let s_count = self.config.stage_count;
        let mut cache = ForwardCache {
            encoder: Vec::with_capacity(s_count),
            enc_out: Vec::with_capacity(s_count),
            up_in: vec![Tensor::zeros([0; 5]); s_count - 1],
            decoder: Vec::with_capacity(s_count - 1),
            dec_out: vec![Tensor::zeros([0; 5]); s_count - 1],
        };
        let mut cur = x.clone();
        for blk in &self.arch.encoder {
            let (out, c) = self.block_forward(blk, &cur);
            cache.encoder.push(c);
            cache.enc_out.push(out.clone());
            cur = out;
        }
        let mut dec_caches: Vec<Option<BlockCache<T>>> = vec![None; s_count - 1];
        for s in (0..s_count - 1).rev() {
            let up = &self.arch.ups[s];
            let upped = up_forward(&cur, &up.geom, &self.params[up.w], &self.params[up.b]);
            cache.up_in[s] = cur;
            let cat = Tensor::concat_channels(&upped, &cache.enc_out[s]);
            let (out, c) = self.block_forward(&self.arch.decoder[s], &cat);
            dec_caches[s] = Some(c);
            cache.dec_out[s] = out.clone();
            cur = out;
        }
        cache.decoder = dec_caches.into_iter().map(Option::unwrap).collect();
        let logits = self
            .arch
            .heads
            .iter()
            .enumerate()
            .map(|(k, h)| {
                let feat = self.level_features(&cache, k);
                conv_forward(feat, &h.geom, &self.params[h.w], h.b.map(|b| &self.params[b][..]))
            })
            .collect();
        Ok((logits, cache))
    }

    fn level_features<'c>(&self, cache: &'c ForwardCache<T>, level: usize) -> &'c Tensor<T> {
        if level < self.config.stage_count - 1 {
            &cache.dec_out[level]
        } else {
            &cache.enc_out[level]
        }
    }

    /// Gradients of all parameters given logit gradients per level.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &[Tensor<T>]) -> Result<Gradients<T>> {
        if dlogits.len() != self.arch.heads.len() {
            return Err(Error::Shape(format!(
                "expected {} logit gradients, got {}",
                self.arch.heads.len(),
                dlogits.len()
            )));
        }
        let s_count = self.config.stage_count;
        let mut grads = self.zero_grads();
        let mut d_enc: Vec<Option<Tensor<T>>> = vec![None; s_count];
        let mut d_dec: Vec<Option<Tensor<T>>> = vec![None; s_count - 1];
        let accumulate = |slot: &mut Option<Tensor<T>>, g: Tensor<T>| match slot {
            Some(t) => t.add_assign(&g),
            None => *slot = Some(g),
        };
        for (k, (h, dl)) in self.arch.heads.iter().zip(dlogits).enumerate() {
            let feat = self.level_features(cache, k);
            let (gw, gb) = match h.b {
                Some(b) => {
                    let (gw, gb) = two_mut(&mut grads, h.w, b);
                    (gw, Some(gb))
                }
                None => (&mut grads[h.w][..], None),
            };
            let d_feat = conv_backward(feat, dl, &h.geom, &self.params[h.w], gw, gb);
            if k < s_count - 1 {
                accumulate(&mut d_dec[k], d_feat);
            } else {
                accumulate(&mut d_enc[k], d_feat);
            }
        }
        for s in 0..s_count - 1 {
            let Some(dout) = d_dec[s].take() else { continue };
            let d_cat = self.block_backward(&self.arch.decoder[s], &cache.decoder[s], &dout, &mut grads);
            let up = &self.arch.ups[s];
            let (d_up, d_skip) = d_cat.split_channels(up.geom.out_channels);
            accumulate(&mut d_enc[s], d_skip);
            let (gw, gb) = two_mut(&mut grads, up.w, up.b);
            let d_in = up_backward(&cache.up_in[s], &d_up, &up.geom, &self.params[up.w], gw, gb);
            if s + 1 < s_count - 1 {
                accumulate(&mut d_dec[s + 1], d_in);
            } else {
                accumulate(&mut d_enc[s + 1], d_in);
            }
        }
        for s in (0..s_count).rev() {
            let Some(dout) = d_enc[s].take() else { continue };
            let dx = self.block_backward(&self.arch.encoder[s], &cache.encoder[s], &dout, &mut grads);
            if s > 0 {
                accumulate(&mut d_enc[s - 1], dx);
            }
        }
        Ok(grads)
    }

    /// One Adam update; rejects non-finite gradients naming the parameter.
    pub fn adam_step(&mut self, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Shape(format!("expected {} gradient tensors, got {}", self.params.len(), grads.len())));
        }
        for (info, (g, p)) in self.arch.params.iter().zip(grads.iter().zip(&self.params)) {
            if g.len() != p.len() {
                return Err(Error::Shape(format!(
                    "gradient for {} has {} values, expected {}",
                    info.name,
                    g.len(),
                    p.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient in {}", info.name)));
            }
        }
        self.step += 1;
        let params = AdamParams::default();
        for (((w, g), m), v) in
            self.params.iter_mut().zip(grads).zip(self.adam_m.iter_mut()).zip(self.adam_v.iter_mut())
        {
            adam_update(&params, w, g, m, v, self.step, lr);
        }
        Ok(())
    }
}

fn two_mut<T>(v: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a][..], &mut hi[0][..])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LRSchedule {
    pub initial_lr: f64,
    pub poly_exponent: f64,
    pub max_epochs: u64,
}

impl LRSchedule {
    pub fn new(initial_lr: f64, poly_exponent: f64, max_epochs: u64) -> Result<Self> {
        if !(initial_lr > 0.0) || !(poly_exponent > 0.0 && poly_exponent <= 1.0) || max_epochs == 0 {
            return Err(Error::InvalidArgument(format!(
                "schedule needs initial_lr > 0, 0 < exponent ≤ 1, max_epochs ≥ 1 (got {initial_lr}, {poly_exponent}, {max_epochs})"
            )));
        }
        Ok(LRSchedule { initial_lr, poly_exponent, max_epochs })
    }
}

/// `initial · (1 − epoch / max)^exponent`, clamped to the schedule's range.
pub fn poly_lr(schedule: &LRSchedule, epoch: u64) -> f64 {
    let frac = (epoch.min(schedule.max_epochs) as f64) / schedule.max_epochs as f64;
    schedule.initial_lr * (1.0 - frac).powf(schedule.poly_exponent)
}
