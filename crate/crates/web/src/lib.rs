//! WebAssembly bindings for the browser demo. Every function returns flat
//! row-major buffers that the page paints straight onto canvases.

use mxvis::hyperconv::MarkerSet;
use mxvis::masking::{build_mask_plan, MaskConfig};
use mxvis::preprocess::{arcsinh_transform, butterworth_gain, butterworth_lowpass};
use mxvis::rng::stream;
use mxvis::synth::{generate_image, CohortSpec};
use mxvis::tensor::Tensor;
use wasm_bindgen::prelude::*;

/// Cell in a mask plan rendering.
pub const OUTSIDE_TARGET: u8 = 0;
pub const VISIBLE: u8 = 1;
pub const HIDDEN_PIXEL: u8 = 2;
pub const DROPPED: u8 = 3;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// One synthetic marker channel: `[noisy, clean, sigma]`, each `size²`.
#[wasm_bindgen]
pub fn synth_channel(seed: u32, size: usize, marker: usize) -> Result<Vec<f32>, JsError> {
    let spec = CohortSpec { height: size, width: size, ..CohortSpec::default() };
    let names: Vec<String> = spec.markers.iter().map(|m| m.name.clone()).collect();
    let c = marker.min(names.len() - 1);
    let img = generate_image(&spec, &names, &mut stream(seed as u64, &[c as u64])).map_err(js_err)?;
    let mut out = Vec::with_capacity(3 * size * size);
    for t in [&img.noisy, &img.clean, &img.sigma] {
        out.extend_from_slice(t.slab(c));
    }
    Ok(out)
}

/// Arcsinh then Butterworth low-pass of a `size²` raster.
#[wasm_bindgen]
pub fn denoise(raster: &[f32], size: usize, cofactor: f64, order: u32, cutoff: f64) -> Result<Vec<f32>, JsError> {
    let x = Tensor::new(&[1, size, size], raster.to_vec()).map_err(js_err)?;
    let y = arcsinh_transform(&x, cofactor).map_err(js_err)?;
    Ok(butterworth_lowpass(&y, order, cutoff).map_err(js_err)?.into_data())
}

/// Filter gain sampled at `n` frequencies from 0 to Nyquist.
#[wasm_bindgen]
pub fn filter_response(order: u32, cutoff: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| butterworth_gain(0.5 * i as f64 / (n - 1).max(1) as f64, order, cutoff)).collect()
}

/// Draws one masking plan for a `channels`-marker panel and renders it as
/// `[channels, size, size]` cells coded with the constants above.
#[wasm_bindgen]
pub fn mask_plan(
    seed: u32,
    channels: usize,
    size: usize,
    alpha: f64,
    beta: f64,
    rho: f64,
    patch: usize,
) -> Result<Vec<u8>, JsError> {
    let cfg = MaskConfig { alpha, beta, rho, patch };
    let panel = MarkerSet::new((0..channels).collect(), channels).map_err(js_err)?;
    let plan = build_mask_plan(&panel, &cfg, size, size, &mut stream(seed as u64, &[])).map_err(js_err)?;
    let area = size * size;
    let mut out = vec![OUTSIDE_TARGET; channels * area];
    for m in plan.tgt_set.iter() {
        let cells = &mut out[m * area..(m + 1) * area];
        match plan.in_set.position(m) {
            Some(i) => {
                for (cell, &hidden) in cells.iter_mut().zip(plan.patch_mask.slab(i)) {
                    *cell = if hidden > 0.5 { HIDDEN_PIXEL } else { VISIBLE };
                }
            }
            None => cells.fill(DROPPED),
        }
    }
    Ok(out)
}
