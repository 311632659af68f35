//! WebAssembly bindings for the static demo page in `www/`.
//!
//! The exported functions are thin wrappers over plain Rust functions so the
//! logic is testable natively.

use ndarray::Axis;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use glioseg::features::{image_from_vec, FeatureExtractor, FeatureExtractorSpec, Image};
use glioseg::nst::{nst_optimize, StyleTransferConfig};
use glioseg::phantom::{degrade_case, generate_phantom, DegradeSpec, PhantomSpec};
use glioseg::preprocess::normalize_nonzero;
use glioseg::stats::{paired_t_test, TTestResult};
use glioseg::volume::{Case, Modality, Region};

const OVERLAY: [[u8; 3]; 4] = [[0, 0, 0], [220, 50, 50], [60, 200, 80], [250, 220, 40]];

fn modality(index: usize) -> Result<Modality, String> {
    Modality::ALL.get(index).copied().ok_or_else(|| format!("modality index {index} out of range 0..4"))
}

fn phantom(seed: u64, size: usize, degrade: bool) -> Result<Case, String> {
    if !(16..=128).contains(&size) {
        return Err(format!("size {size} outside 16..=128"));
    }
    let case = generate_phantom(&PhantomSpec::randomized(seed, [size; 3])).map_err(|e| e.to_string())?;
    if degrade {
        degrade_case(&case, &DegradeSpec { seed, ..DegradeSpec::default() }).map_err(|e| e.to_string())
    } else {
        Ok(case)
    }
}

fn axial_slice(case: &Case, m: Modality, z: usize) -> Result<Image<f32>, String> {
    let grid = normalize_nonzero(case.images.channel(m)).map_err(|e| e.to_string())?;
    let (d, h, w) = grid.dims();
    if z >= d {
        return Err(format!("slice {z} outside 0..{d}"));
    }
    let data = grid.data().index_axis(Axis(0), z).iter().copied().collect();
    image_from_vec(h, w, data).map_err(|e| e.to_string())
}

/// Min-max windowed grey levels.
fn grey(values: &[f32]) -> Vec<u8> {
    let (lo, hi) = values.iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    let span = (hi - lo).max(1e-6);
    values.iter().map(|&v| ((v - lo) / span * 255.0).round() as u8).collect()
}

/// RGBA pixels of one axial slice, optionally with the label overlay.
pub fn phantom_rgba(
    seed: u64,
    size: usize,
    z: usize,
    modality_index: usize,
    degrade: bool,
    overlay: bool,
) -> Result<Vec<u8>, String> {
    let case = phantom(seed, size, degrade)?;
    let img = axial_slice(&case, modality(modality_index)?, z)?;
    let truth = case.truth.as_ref().ok_or("phantom without labels")?;
    let labels = truth.data().index_axis(Axis(0), z);
    let mut out = Vec::with_capacity(img.data.len() * 4);
    for (g, &l) in grey(&img.data).into_iter().zip(labels.iter()) {
        let px = if overlay && l > 0 {
            let c = OVERLAY[l as usize];
            [
                ((g as u16 + c[0] as u16) / 2) as u8,
                ((g as u16 + c[1] as u16) / 2) as u8,
                ((g as u16 + c[2] as u16) / 2) as u8,
            ]
        } else {
            [g, g, g]
        };
        out.extend_from_slice(&[px[0], px[1], px[2], 255]);
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct StylizedSlice {
    pub size: usize,
    pub content: Vec<u8>,
    pub style: Vec<u8>,
    pub result: Vec<u8>,
    pub total: Vec<f64>,
    pub content_loss: Vec<f64>,
    pub style_loss: Vec<f64>,
}

/// Style transfer of a degraded phantom slice towards a clean one.
pub fn stylize(seed: u64, size: usize, z: usize, iterations: usize, beta: f64) -> Result<StylizedSlice, String> {
    let content = axial_slice(&phantom(seed, size, true)?, Modality::T1, z)?;
    let style = axial_slice(&phantom(seed.wrapping_add(1), size, false)?, Modality::T1, z)?;
    let ex = FeatureExtractor::<f32>::build(&FeatureExtractorSpec::default()).map_err(|e| e.to_string())?;
    let cfg = StyleTransferConfig { iterations, beta, seed, ..StyleTransferConfig::default() };
    let out = nst_optimize(&content, &style, &ex, &cfg).map_err(|e| e.to_string())?;
    Ok(StylizedSlice {
        size,
        content: grey(&content.data),
        style: grey(&style.data),
        result: grey(&out.image.data),
        total: out.trace.iter().map(|r| r.total).collect(),
        content_loss: out.trace.iter().map(|r| r.content).collect(),
        style_loss: out.trace.iter().map(|r| r.style).collect(),
    })
}

fn parse_numbers(s: &str) -> Result<Vec<f64>, String> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("{t:?} is not a number")))
        .collect()
}

pub fn t_test(a: &str, b: &str) -> Result<TTestResult, String> {
    paired_t_test(&parse_numbers(a)?, &parse_numbers(b)?).map_err(|e| e.to_string())
}

/// Tumour voxel share of the slice per region (for the page legend).
pub fn region_fractions(seed: u64, size: usize, z: usize) -> Result<[f64; 3], String> {
    let case = phantom(seed, size, false)?;
    let truth = case.truth.as_ref().ok_or("phantom without labels")?;
    let labels = truth.data().index_axis(Axis(0), z);
    let n = labels.len() as f64;
    Ok(Region::ALL.map(|r| labels.iter().filter(|&&l| r.contains(l)).count() as f64 / n))
}

/// Axial index of the tumour centre.
pub fn tumour_slice(seed: u64, size: usize) -> usize {
    let c = PhantomSpec::randomized(seed, [size; 3]).tumor_center[0];
    (c.round().max(0.0) as usize).min(size.saturating_sub(1))
}

fn js(e: String) -> JsValue {
    JsValue::from_str(&e)
}

fn to_json<T: Serialize>(v: &T) -> Result<String, JsValue> {
    serde_json::to_string(v).map_err(|e| js(e.to_string()))
}

#[wasm_bindgen(js_name = renderPhantom)]
pub fn render_phantom(
    seed: u64,
    size: usize,
    z: usize,
    modality: usize,
    degrade: bool,
    overlay: bool,
) -> Result<Vec<u8>, JsValue> {
    phantom_rgba(seed, size, z, modality, degrade, overlay).map_err(js)
}

#[wasm_bindgen(js_name = tumourSlice)]
pub fn tumour_slice_js(seed: u64, size: usize) -> usize {
    tumour_slice(seed, size)
}

#[wasm_bindgen(js_name = regionFractions)]
pub fn region_fractions_js(seed: u64, size: usize, z: usize) -> Result<Vec<f64>, JsValue> {
    region_fractions(seed, size, z).map(|f| f.to_vec()).map_err(js)
}

/// JSON `StylizedSlice`.
#[wasm_bindgen(js_name = stylizeSlice)]
pub fn stylize_slice(seed: u64, size: usize, z: usize, iterations: usize, beta: f64) -> Result<String, JsValue> {
    to_json(&stylize(seed, size, z, iterations, beta).map_err(js)?)
}

/// JSON `TTestResult` for two comma- or space-separated columns.
#[wasm_bindgen(js_name = pairedTTest)]
pub fn paired_t_test_js(a: &str, b: &str) -> Result<String, JsValue> {
    to_json(&t_test(a, b).map_err(js)?)
}
