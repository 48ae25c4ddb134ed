//! WebAssembly bindings for the static demo page in `www/`.

use wasm_bindgen::prelude::*;

use segdecoder::arch::{ArchConfig, DecoderConfig};
use segdecoder::dataset::generate_scene;
use segdecoder::profiler::{emit_report, profile, Format};
use segdecoder::training::{poly_lr, TrainConfig};
use segdecoder::{Precision, Shape};

/// Mask palette: void, road, lanes, curb.
pub const PALETTE: [[u8; 3]; 4] = [[40, 40, 40], [128, 64, 128], [255, 255, 0], [255, 0, 0]];

/// A generated scene as two RGBA buffers ready for `ImageData`.
#[wasm_bindgen]
pub struct Scene {
    width: usize,
    height: usize,
    image: Vec<u8>,
    mask: Vec<u8>,
    shares: Vec<f64>,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        self.image.clone()
    }

    pub fn mask_rgba(&self) -> Vec<u8> {
        self.mask.clone()
    }

    /// Pixel share of void, road, lanes, curb.
    pub fn class_shares(&self) -> Vec<f64> {
        self.shares.clone()
    }
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn scene(seed: u32, height: usize, width: usize) -> Result<Scene, JsError> {
    let s = generate_scene(u64::from(seed), height, width).map_err(js_err)?;
    let plane = height * width;
    let px = s.image.data();
    let mut image = Vec::with_capacity(plane * 4);
    let mut mask = Vec::with_capacity(plane * 4);
    for i in 0..plane {
        for c in 0..3 {
            image.push((px[c * plane + i] * 255.0).round() as u8);
        }
        image.push(255);
        mask.extend_from_slice(&PALETTE[s.mask[i] as usize]);
        mask.push(255);
    }
    Ok(Scene {
        width,
        height,
        shares: s.class_shares(PALETTE.len()),
        image,
        mask,
    })
}

/// Profile of the default encoder with the given decoder (preset name or
/// `(mNp)` string) at `height`x`width`, as a text table or JSON.
#[wasm_bindgen]
pub fn profile_decoder(config: &str, height: usize, width: usize, json: bool) -> Result<String, JsError> {
    let arch = ArchConfig::from_text(config)
        .resolve()
        .map_err(js_err)?
        .with_input(height, width);
    let graph = arch.graph().map_err(js_err)?;
    let report = profile(&graph, Shape::new(1, 3, height, width), Precision::F32).map_err(js_err)?;
    Ok(emit_report(&report, if json { Format::Json } else { Format::Text }))
}

/// Canonical form of a decoder string, or the parse error.
#[wasm_bindgen]
pub fn canonical_decoder(config: &str) -> Result<String, JsError> {
    let dec: DecoderConfig = segdecoder::arch::parse_decoder_config(config).map_err(js_err)?;
    dec.render().map_err(js_err)
}

/// `points` samples of the polynomial schedule over `[0, max_iters]`.
#[wasm_bindgen]
pub fn lr_curve(lr0: f64, max_iters: usize, power: f64, points: usize) -> Vec<f64> {
    let cfg = TrainConfig {
        lr0,
        max_iters,
        poly_power: power,
        ..TrainConfig::default()
    };
    let n = points.max(2);
    (0..n).map(|i| poly_lr(i * max_iters / (n - 1), &cfg)).collect()
}
