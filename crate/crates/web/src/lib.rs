//! WebAssembly bindings for the browser demo. Every export returns JSON text.

pub mod demo;

use wasm_bindgen::prelude::*;

use dicoop::prompt::Layout;
use dicoop::trainer::Schedule;

fn to_json<T: serde::Serialize>(value: dicoop::error::Result<T>) -> Result<String, JsError> {
    let value = value.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = featureMap)]
pub fn feature_map(alpha: f64, sigma: f64, seed: u32) -> Result<String, JsError> {
    to_json(demo::feature_map(alpha, sigma, u64::from(seed)))
}

/// `request` is a JSON object with any of layout, lambda, epochs, seed,
/// holdout and alpha.
#[wasm_bindgen(js_name = trainDemo)]
pub fn train_demo(request: &str) -> Result<String, JsError> {
    let req: demo::TrainRequest = serde_json::from_str(request).map_err(|e| JsError::new(&e.to_string()))?;
    to_json(demo::train_demo(&req))
}

#[wasm_bindgen(js_name = layoutView)]
pub fn layout_view(layout: &str, m: u32, ramp: bool, lambda_max: f64) -> Result<String, JsError> {
    let layout: Layout = layout.parse().map_err(|e: dicoop::error::Error| JsError::new(&e.to_string()))?;
    let schedule = if ramp { Schedule::DannRamp } else { Schedule::Constant };
    to_json(demo::layout_view(layout, m as usize, schedule, lambda_max, 51))
}
