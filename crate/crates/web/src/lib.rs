//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Images cross the boundary as RGBA byte buffers in row-major order, the
//! layout of `ImageData.data`. Every function has a plain Rust twin returning
//! `Result<_, String>` so the logic is testable off the browser.

use dico::color_invariants::{ensemble, invariants, LearnableEnsemble, DEFAULT_EPSILON};
use dico::data::{generate_synthetic_scene, synth_background, SyntheticSceneSpec};
use dico::disentangle::{disentangle, MaskParams};
use dico::feature_extractor::FeatureExtractor;
use dico::{Shape, Tensor};
use wasm_bindgen::prelude::*;

/// Side length of the demo scene.
pub const DEMO_SIZE: usize = 64;

fn to_tensor(rgba: &[u8], width: usize, height: usize) -> Result<Tensor, String> {
    if width == 0 || height == 0 || rgba.len() != width * height * 4 {
        return Err(format!(
            "expected {width}x{height} RGBA ({} bytes), got {} bytes",
            width * height * 4,
            rgba.len()
        ));
    }
    Ok(Tensor::from_fn(
        Shape::new(1, 3, height, width),
        |[_, c, y, x]| rgba[(y * width + x) * 4 + c] as f32 / 255.0,
    ))
}

fn to_rgba(t: &Tensor) -> Vec<u8> {
    let s = t.shape();
    let (h, w) = (s.h(), s.w());
    let mut out = vec![255u8; h * w * 4];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = t.get([0, c.min(s.c() - 1), y, x]).clamp(0.0, 1.0);
                out[(y * w + x) * 4 + c] = (v * 255.0).round() as u8;
            }
        }
    }
    out
}

/// Stretches every channel of `t` to [0, 1] independently.
fn stretch(t: &Tensor) -> Tensor {
    let s = t.shape();
    let plane = s.h() * s.w();
    let mut data = t.data().to_vec();
    for ch in data.chunks_mut(plane) {
        let lo = ch.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = ch.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = hi - lo;
        ch.iter_mut()
            .for_each(|v| *v = if span > 0.0 { (*v - lo) / span } else { 0.0 });
    }
    Tensor::new(s, data).expect("same shape")
}

fn channel(t: &Tensor, c: usize) -> Tensor {
    let s = t.shape();
    Tensor::from_fn(Shape::new(1, 1, s.h(), s.w()), |[_, _, y, x]| {
        t.get([0, c, y, x])
    })
}

/// Nearest-neighbour resize of a single-channel map.
fn resize(t: &Tensor, width: usize, height: usize) -> Tensor {
    let s = t.shape();
    Tensor::from_fn(Shape::new(1, 1, height, width), |[_, _, y, x]| {
        t.get([0, 0, y * s.h() / height, x * s.w() / width])
    })
}

/// Night frame, day frame and mean-of-day background of a procedural scene,
/// concatenated as three DEMO_SIZE² RGBA images.
pub fn demo_scene_rgba(seed: u64) -> Result<Vec<u8>, String> {
    let spec = SyntheticSceneSpec {
        seed,
        width: DEMO_SIZE,
        height: DEMO_SIZE,
        day_frames: 12,
        night_frames: 1,
        ..SyntheticSceneSpec::default()
    };
    let scene = generate_synthetic_scene(&spec).map_err(|e| e.to_string())?;
    let background = synth_background(&scene.day).map_err(|e| e.to_string())?;
    let mut out = to_rgba(&scene.night[0]);
    out.extend(to_rgba(&scene.day[0]));
    out.extend(to_rgba(&background));
    Ok(out)
}

/// The five invariant maps E, W, C, H, N, each contrast-stretched to gray and
/// concatenated as RGBA images of the input size.
pub fn invariant_maps_rgba(
    rgba: &[u8],
    width: usize,
    height: usize,
    sigma: f32,
) -> Result<Vec<u8>, String> {
    let image = to_tensor(rgba, width, height)?;
    let phi = invariants(&image, sigma, DEFAULT_EPSILON).map_err(|e| e.to_string())?;
    let phi = stretch(&phi);
    Ok((0..5).flat_map(|c| to_rgba(&channel(&phi, c))).collect())
}

/// ξ = ΛΦ + b for a user-chosen 3x5 mixture, `weights` row-major by output
/// channel. Each output channel is stretched for display.
pub fn mix_rgba(
    rgba: &[u8],
    width: usize,
    height: usize,
    sigma: f32,
    weights: &[f32],
) -> Result<Vec<u8>, String> {
    if weights.len() != 15 {
        return Err(format!(
            "expected 15 mixture weights, got {}",
            weights.len()
        ));
    }
    let image = to_tensor(rgba, width, height)?;
    let phi = invariants(&image, sigma, DEFAULT_EPSILON).map_err(|e| e.to_string())?;
    let lambda = LearnableEnsemble {
        weight: Tensor::new(Shape::new(3, 5, 1, 1), weights.to_vec()).map_err(|e| e.to_string())?,
        ..LearnableEnsemble::default()
    };
    let xi = ensemble(&phi, &lambda).map_err(|e| e.to_string())?;
    Ok(to_rgba(&stretch(&xi)))
}

/// Soft background mask of `rgba` against `reference_rgba` at one extractor
/// stage, upsampled to the input size. White is background.
pub fn background_mask_rgba(
    rgba: &[u8],
    reference_rgba: &[u8],
    width: usize,
    height: usize,
    stage: &str,
    gamma: f32,
    s0: f32,
) -> Result<Vec<u8>, String> {
    let image = to_tensor(rgba, width, height)?;
    let reference = to_tensor(reference_rgba, width, height)?;
    let extractor = FeatureExtractor::standard(0);
    let ref_pyr = extractor.extract(&reference).map_err(|e| e.to_string())?;
    let params = MaskParams {
        gamma,
        s0,
        ..MaskParams::default()
    };
    let (_, masks) = disentangle(&extractor, &image, &ref_pyr, &[stage.to_string()], params)
        .map_err(|e| e.to_string())?;
    let mask = masks.get(stage).ok_or("stage produced no mask")?;
    Ok(to_rgba(&resize(mask, width, height)))
}

fn js(r: Result<Vec<u8>, String>) -> Result<Vec<u8>, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = demoSize)]
pub fn demo_size() -> usize {
    DEMO_SIZE
}

#[wasm_bindgen(js_name = demoScene)]
pub fn demo_scene(seed: u32) -> Result<Vec<u8>, JsError> {
    js(demo_scene_rgba(seed as u64))
}

#[wasm_bindgen(js_name = invariantMaps)]
pub fn invariant_maps(
    rgba: &[u8],
    width: usize,
    height: usize,
    sigma: f32,
) -> Result<Vec<u8>, JsError> {
    js(invariant_maps_rgba(rgba, width, height, sigma))
}

#[wasm_bindgen(js_name = mixInvariants)]
pub fn mix_invariants(
    rgba: &[u8],
    width: usize,
    height: usize,
    sigma: f32,
    weights: &[f32],
) -> Result<Vec<u8>, JsError> {
    js(mix_rgba(rgba, width, height, sigma, weights))
}

#[wasm_bindgen(js_name = backgroundMask)]
pub fn background_mask(
    rgba: &[u8],
    reference_rgba: &[u8],
    width: usize,
    height: usize,
    stage: &str,
    gamma: f32,
    s0: f32,
) -> Result<Vec<u8>, JsError> {
    js(background_mask_rgba(
        rgba,
        reference_rgba,
        width,
        height,
        stage,
        gamma,
        s0,
    ))
}
