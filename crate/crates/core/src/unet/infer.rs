use ndarray::{Array3, Array4};

use super::model::ModelState;
use super::tensor::Tensor;
use super::IN_CHANNELS;
use crate::error::Result;
use crate::real::Real;
use crate::volume::{LabelVolume, MultiModalVolume};

/// Tile origins along one axis: half-patch steps, last tile flush with the end.
pub fn tile_starts(dim: usize, patch: usize) -> Vec<usize> {
    if dim <= patch {
        return vec![0];
    }
    let step = (patch / 2).max(1);
    let mut starts: Vec<usize> = (0..).map(|i| i * step).take_while(|&s| s + patch < dim).collect();
    starts.push(dim - patch);
    starts.dedup();
    starts
}

/// Softmax averaged over overlapping tiles, `(C, D, H, W)` at the input size.
pub fn sliding_window_probabilities<T: Real>(model: &ModelState<T>, images: &MultiModalVolume) -> Result<Array4<f32>> {
    let patch = model.config.patch_size;
    let (d, h, w) = images.dims();
    let dims = [d, h, w];
    let padded: [usize; 3] = std::array::from_fn(|a| dims[a].max(patch[a]));
    let classes = model.config.num_classes;

    let mut input = Array4::<T>::zeros((IN_CHANNELS, padded[0], padded[1], padded[2]));
    for (c, grid) in images.channels().iter().enumerate() {
        input.slice_mut(ndarray::s![c, ..d, ..h, ..w]).assign(&grid.data().mapv(|v| T::of(v as f64)));
    }
    let mut acc = Array4::<f64>::zeros((classes, padded[0], padded[1], padded[2]));
    let mut hits = Array3::<u32>::zeros((padded[0], padded[1], padded[2]));

    let starts: Vec<Vec<usize>> = (0..3).map(|a| tile_starts(padded[a], patch[a])).collect();
    let plen: usize = patch.iter().product();
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                let tile = input.slice(ndarray::s![.., z0..z0 + patch[0], y0..y0 + patch[1], x0..x0 + patch[2]]);
                let x =
                    Tensor::from_vec([1, IN_CHANNELS, patch[0], patch[1], patch[2]], tile.iter().copied().collect());
                let logits = model.forward(&x)?.swap_remove(0);
                let mut view = acc.slice_mut(ndarray::s![.., z0..z0 + patch[0], y0..y0 + patch[1], x0..x0 + patch[2]]);
                for v in 0..plen {
                    let (pz, rest) = (v / (patch[1] * patch[2]), v % (patch[1] * patch[2]));
                    let (py, px) = (rest / patch[2], rest % patch[2]);
                    let max =
                        (0..classes).map(|k| logits.data[k * plen + v].as_f64()).fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = (0..classes).map(|k| (logits.data[k * plen + v].as_f64() - max).exp()).sum();
                    for k in 0..classes {
                        view[[k, pz, py, px]] += (logits.data[k * plen + v].as_f64() - max).exp() / sum;
                    }
                }
                hits.slice_mut(ndarray::s![z0..z0 + patch[0], y0..y0 + patch[1], x0..x0 + patch[2]])
                    .mapv_inplace(|n| n + 1);
            }
        }
    }
    let mut out = Array4::<f32>::zeros((classes, d, h, w));
    for ((k, z, y, x), v) in out.indexed_iter_mut() {
        *v = (acc[[k, z, y, x]] / hits[[z, y, x]] as f64) as f32;
    }
    Ok(out)
}

/// Tiled prediction; ties go to the lowest class code.
pub fn sliding_window_predict<T: Real>(model: &ModelState<T>, images: &MultiModalVolume) -> Result<LabelVolume> {
    let probs = sliding_window_probabilities(model, images)?;
    let labels = argmax_classes(&probs);
    let mut vol = LabelVolume::new(labels, images.spacing())?;
    vol.orientation = images.channels()[0].orientation;
    Ok(vol)
}

pub(crate) fn argmax_classes(probs: &Array4<f32>) -> Array3<u8> {
    let (c, d, h, w) = probs.dim();
    Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        let mut best = 0;
        for k in 1..c {
            if probs[[k, z, y, x]] > probs[[best, z, y, x]] {
                best = k;
            }
        }
        best as u8
    })
}
