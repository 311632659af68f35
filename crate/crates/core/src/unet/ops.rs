//! Forward and backward kernels for the U-Net building blocks. Convolutions
//! are lowered to matrix products (im2col) per batch element.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::tensor::Tensor;
use crate::real::Real;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;

/// Static geometry of a convolution with "same"-style padding `k / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

impl ConvGeom {
    pub fn pad(&self) -> [usize; 3] {
        [self.kernel[0] / 2, self.kernel[1] / 2, self.kernel[2] / 2]
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_len()
    }

    pub fn out_spatial(&self, input: [usize; 3]) -> [usize; 3] {
        let p = self.pad();
        std::array::from_fn(|a| (input[a] + 2 * p[a] - self.kernel[a]) / self.stride[a] + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1]
    }
}

/// Output positions `o` in `0..out_len` whose source `o·s + k − p` lies in `0..in_len`.
#[inline]
fn valid_range(in_len: usize, out_len: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    // largest o with o·s + k − p ≤ in_len − 1
    let hi_num = in_len as isize - 1 + p as isize - k as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = ((hi_num as usize) / s + 1).min(out_len);
    (lo.min(hi), hi)
}

fn im2col<T: Real>(x: &[T], geom: &ConvGeom, input: [usize; 3], out: [usize; 3], col: &mut [T]) {
    let [id, ih, iw] = input;
    let [od, oh, ow] = out;
    let [kd, kh, kw] = geom.kernel;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.pad();
    let n_out = od * oh * ow;
    col.iter_mut().for_each(|v| *v = T::zero());
    let mut row = 0;
    for c in 0..geom.in_channels {
        let src = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            let (z0, z1) = valid_range(id, od, kz, sd, pd);
            for ky in 0..kh {
                let (y0, y1) = valid_range(ih, oh, ky, sh, ph);
                for kx in 0..kw {
                    let (x0, x1) = valid_range(iw, ow, kx, sw, pw);
                    let dst = &mut col[row * n_out..(row + 1) * n_out];
                    for oz in z0..z1 {
                        let iz = oz * sd + kz - pd;
                        for oy in y0..y1 {
                            let iy = oy * sh + ky - ph;
                            let drow = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            let srow = &src[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                            if sw == 1 {
                                let off = x0 + kx - pw;
                                drow[x0..x1].copy_from_slice(&srow[off..off + (x1 - x0)]);
                            } else {
                                for ox in x0..x1 {
                                    drow[ox] = srow[ox * sw + kx - pw];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], geom: &ConvGeom, input: [usize; 3], out: [usize; 3], dx: &mut [T]) {
    let [id, ih, iw] = input;
    let [od, oh, ow] = out;
    let [kd, kh, kw] = geom.kernel;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.pad();
    let n_out = od * oh * ow;
    let mut row = 0;
    for c in 0..geom.in_channels {
        let dst = &mut dx[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            let (z0, z1) = valid_range(id, od, kz, sd, pd);
            for ky in 0..kh {
                let (y0, y1) = valid_range(ih, oh, ky, sh, ph);
                for kx in 0..kw {
                    let (x0, x1) = valid_range(iw, ow, kx, sw, pw);
                    let src = &col[row * n_out..(row + 1) * n_out];
                    for oz in z0..z1 {
                        let iz = oz * sd + kz - pd;
                        for oy in y0..y1 {
                            let iy = oy * sh + ky - ph;
                            let srow = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            let drow = &mut dst[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                            if sw == 1 {
                                let off = x0 + kx - pw;
                                for (d, &s) in drow[off..off + (x1 - x0)].iter_mut().zip(&srow[x0..x1]) {
                                    *d += s;
                                }
                            } else {
                                for ox in x0..x1 {
                                    drow[ox * sw + kx - pw] += srow[ox];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `y = W * x (+ bias)`, weight layout `(out, in, kd, kh, kw)`.
pub fn conv_forward<T: Real>(x: &Tensor<T>, geom: &ConvGeom, weight: &[T], bias: Option<&[T]>) -> Tensor<T> {
    assert_eq!(x.channels(), geom.in_channels, "conv input channels");
    let input = x.spatial();
    let out = geom.out_spatial(input);
    let n_out: usize = out.iter().product();
    let ck = geom.in_channels * geom.kernel_len();
    let mut y = Tensor::zeros([x.batch(), geom.out_channels, out[0], out[1], out[2]]);
    let w = ArrayView2::from_shape((geom.out_channels, ck), weight).expect("weight shape");
    let mut col = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); ck * n_out] };
    for b in 0..x.batch() {
        let xs = x.sample(b);
        let cols = if geom.is_pointwise() {
            ArrayView2::from_shape((ck, n_out), xs).expect("pointwise shape")
        } else {
            im2col(xs, geom, input, out, &mut col);
            ArrayView2::from_shape((ck, n_out), &col[..]).expect("col shape")
        };
        let ys = y.sample_mut(b);
        let mut yv = ArrayViewMut2::from_shape((geom.out_channels, n_out), ys).expect("out shape");
        general_mat_mul(T::one(), &w, &cols, T::zero(), &mut yv);
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                ys[o * n_out..(o + 1) * n_out].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    y
}

/// Accumulates weight (and bias) gradients and returns the input gradient.
pub fn conv_backward<T: Real>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    geom: &ConvGeom,
    weight: &[T],
    dweight: &mut [T],
    dbias: Option<&mut [T]>,
) -> Tensor<T> {
    let input = x.spatial();
    let out = geom.out_spatial(input);
    let n_out: usize = out.iter().product();
    let ck = geom.in_channels * geom.kernel_len();
    let w = ArrayView2::from_shape((geom.out_channels, ck), weight).expect("weight shape");
    let mut dw = ArrayViewMut2::from_shape((geom.out_channels, ck), dweight).expect("dweight shape");
    let mut dx = Tensor::zeros(x.shape);
    let pointwise = geom.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); ck * n_out] };
    let mut dcol = vec![T::zero(); ck * n_out];
    for b in 0..x.batch() {
        let xs = x.sample(b);
        let dys = ArrayView2::from_shape((geom.out_channels, n_out), dy.sample(b)).expect("dy shape");
        let cols = if pointwise {
            ArrayView2::from_shape((ck, n_out), xs).expect("pointwise shape")
        } else {
            im2col(xs, geom, input, out, &mut col);
            ArrayView2::from_shape((ck, n_out), &col[..]).expect("col shape")
        };
        general_mat_mul(T::one(), &dys, &cols.t(), T::one(), &mut dw);
        if pointwise {
            let mut dxv = ArrayViewMut2::from_shape((ck, n_out), dx.sample_mut(b)).expect("dx shape");
            general_mat_mul(T::one(), &w.t(), &dys, T::zero(), &mut dxv);
        } else {
            let mut dcv = ArrayViewMut2::from_shape((ck, n_out), &mut dcol[..]).expect("dcol shape");
            general_mat_mul(T::one(), &w.t(), &dys, T::zero(), &mut dcv);
            col2im(&dcol, geom, input, out, dx.sample_mut(b));
        }
    }
    if let Some(db) = dbias {
        for b in 0..dy.batch() {
            let s = dy.sample(b);
            for (o, d) in db.iter_mut().enumerate() {
                *d += s[o * n_out..(o + 1) * n_out].iter().copied().sum::<T>();
            }
        }
    }
    dx
}

/// Transposed convolution with kernel equal to stride (non-overlapping
/// upsampling). Weight layout `(in, out, sd, sh, sw)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: [usize; 3],
}

impl UpGeom {
    pub fn kernel_len(&self) -> usize {
        self.stride.iter().product()
    }

    pub fn weight_len(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel_len()
    }
}

pub fn up_forward<T: Real>(x: &Tensor<T>, geom: &UpGeom, weight: &[T], bias: &[T]) -> Tensor<T> {
    let [id, ih, iw] = x.spatial();
    let [sd, sh, sw] = geom.stride;
    let k = geom.kernel_len();
    let n_in = id * ih * iw;
    let ok = geom.out_channels * k;
    let w = ArrayView2::from_shape((geom.in_channels, ok), weight).expect("up weight");
    let mut y = Tensor::zeros([x.batch(), geom.out_channels, id * sd, ih * sh, iw * sw]);
    let (yd, yh, yw) = (id * sd, ih * sh, iw * sw);
    let mut buf = vec![T::zero(); ok * n_in];
    for b in 0..x.batch() {
        let xv = ArrayView2::from_shape((geom.in_channels, n_in), x.sample(b)).expect("x");
        let mut bv = ArrayViewMut2::from_shape((ok, n_in), &mut buf[..]).expect("buf");
        general_mat_mul(T::one(), &w.t(), &xv, T::zero(), &mut bv);
        let ys = y.sample_mut(b);
        for o in 0..geom.out_channels {
            for a in 0..sd {
                for bb in 0..sh {
                    for c in 0..sw {
                        let kidx = (a * sh + bb) * sw + c;
                        let src = &buf[(o * k + kidx) * n_in..(o * k + kidx + 1) * n_in];
                        for z in 0..id {
                            for yy in 0..ih {
                                let base = ((o * yd + z * sd + a) * yh + yy * sh + bb) * yw + c;
                                let srow = &src[(z * ih + yy) * iw..(z * ih + yy + 1) * iw];
                                for (xx, &v) in srow.iter().enumerate() {
                                    ys[base + xx * sw] = v + bias[o];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn up_backward<T: Real>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    geom: &UpGeom,
    weight: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
) -> Tensor<T> {
    let [id, ih, iw] = x.spatial();
    let [sd, sh, sw] = geom.stride;
    let k = geom.kernel_len();
    let n_in = id * ih * iw;
    let ok = geom.out_channels * k;
    let (yd, yh, yw) = (id * sd, ih * sh, iw * sw);
    let w = ArrayView2::from_shape((geom.in_channels, ok), weight).expect("up weight");
    let mut dw = ArrayViewMut2::from_shape((geom.in_channels, ok), dweight).expect("up dweight");
    let mut dx = Tensor::zeros(x.shape);
    let mut buf = vec![T::zero(); ok * n_in];
    for b in 0..x.batch() {
        let dys = dy.sample(b);
        for o in 0..geom.out_channels {
            for a in 0..sd {
                for bb in 0..sh {
                    for c in 0..sw {
                        let kidx = (a * sh + bb) * sw + c;
                        let dst = &mut buf[(o * k + kidx) * n_in..(o * k + kidx + 1) * n_in];
                        for z in 0..id {
                            for yy in 0..ih {
                                let base = ((o * yd + z * sd + a) * yh + yy * sh + bb) * yw + c;
                                let drow = &mut dst[(z * ih + yy) * iw..(z * ih + yy + 1) * iw];
                                for (xx, d) in drow.iter_mut().enumerate() {
                                    *d = dys[base + xx * sw];
                                }
                            }
                        }
                    }
                }
            }
            dbias[o] += dys[o * yd * yh * yw..(o + 1) * yd * yh * yw].iter().copied().sum::<T>();
        }
        let bv = ArrayView2::from_shape((ok, n_in), &buf[..]).expect("buf");
        let xv = ArrayView2::from_shape((geom.in_channels, n_in), x.sample(b)).expect("x");
        general_mat_mul(T::one(), &xv, &bv.t(), T::one(), &mut dw);
        let mut dxv = ArrayViewMut2::from_shape((geom.in_channels, n_in), dx.sample_mut(b)).expect("dx");
        general_mat_mul(T::one(), &w, &bv, T::zero(), &mut dxv);
    }
    dx
}

/// Per-instance, per-channel normalisation with affine scale and shift.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

pub fn instance_norm_forward<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> (Tensor<T>, NormCache<T>) {
    let (b, c, s) = (x.batch(), x.channels(), x.spatial_len());
    let mut y = Tensor::zeros(x.shape);
    let mut xhat = Tensor::zeros(x.shape);
    let mut inv_std = Vec::with_capacity(b * c);
    let n = T::of(s as f64);
    let eps = T::of(NORM_EPS);
    for i in 0..b * c {
        let src = &x.data[i * s..(i + 1) * s];
        let mean = src.iter().copied().sum::<T>() / n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        let ch = i % c;
        let (g, bt) = (gamma[ch], beta[ch]);
        let xh = &mut xhat.data[i * s..(i + 1) * s];
        let yo = &mut y.data[i * s..(i + 1) * s];
        for ((h, o), &v) in xh.iter_mut().zip(yo.iter_mut()).zip(src) {
            *h = (v - mean) * is;
            *o = g * *h + bt;
        }
    }
    (y, NormCache { xhat, inv_std })
}

pub fn instance_norm_backward<T: Real>(
    dy: &Tensor<T>,
    cache: &NormCache<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor<T> {
    let (b, c, s) = (dy.batch(), dy.channels(), dy.spatial_len());
    let mut dx = Tensor::zeros(dy.shape);
    let n = T::of(s as f64);
    for i in 0..b * c {
        let ch = i % c;
        let g = &dy.data[i * s..(i + 1) * s];
        let xh = &cache.xhat.data[i * s..(i + 1) * s];
        let sum_g: T = g.iter().copied().sum();
        let sum_gx: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        dgamma[ch] += sum_gx;
        dbeta[ch] += sum_g;
        let k = gamma[ch] * cache.inv_std[i] / n;
        let dst = &mut dx.data[i * s..(i + 1) * s];
        for ((d, &gv), &h) in dst.iter_mut().zip(g).zip(xh) {
            *d = k * (n * gv - sum_g - h * sum_gx);
        }
    }
    dx
}

pub fn leaky_relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let slope = T::of(LEAKY_SLOPE);
    Tensor { shape: x.shape, data: x.data.iter().map(|&v| if v > T::zero() { v } else { v * slope }).collect() }
}

/// `pre` is the activation input.
pub fn leaky_relu_backward<T: Real>(pre: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let slope = T::of(LEAKY_SLOPE);
    Tensor {
        shape: dy.shape,
        data: dy.data.iter().zip(&pre.data).map(|(&g, &v)| if v > T::zero() { g } else { g * slope }).collect(),
    }
}
