//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each exported function returns a JSON string; the plain Rust functions
//! underneath return `serde_json::Value` and are what the tests call.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use flattenet::layers::bilinear_upsample;
use flattenet::shuffle::{connectivity_matrix, RearrangeKind, RearrangeSpec, Rearrangement};
use flattenet::toylab::decode_plane;
use flattenet::toylab::task::render_heatmap;
use flattenet::Tensor;

type Res<T> = Result<T, String>;

fn kind(name: &str) -> Res<RearrangeKind> {
    serde_json::from_value(Value::String(name.into())).map_err(|_| format!("unknown rearrangement {name:?} (cs+ps, ps-only, randperm+ps)"))
}

/// Where every stacked input channel lands after `R`.
///
/// `map[c][y][x]` is the stacked channel that feeds output channel `c` at
/// offset `(y, x)` inside each `s2 × s2` cell.
pub fn rearrangement(s2: usize, c_tilde: usize, kind_name: &str, seed: u64) -> Res<Value> {
    if s2 == 0 || c_tilde == 0 {
        return Err("s2 and C̃ must be positive".into());
    }
    match s2.checked_mul(s2).and_then(|b| b.checked_mul(c_tilde)) {
        Some(n) if n <= 1 << 16 => {}
        _ => return Err(format!("s2 = {s2}, C̃ = {c_tilde} is too large to draw")),
    }
    let spec = RearrangeSpec::new(s2, c_tilde);
    let r = Rearrangement::new(spec, kind(kind_name)?, seed).map_err(|e| e.to_string())?;
    let n = spec.stacked_channels();
    let iota = Tensor::from_vec((1, n, 1, 1), (0..n).map(|v| v as f64).collect()).map_err(|e| e.to_string())?;
    let out = r.apply(&iota).map_err(|e| e.to_string())?;
    let map: Vec<Vec<Vec<usize>>> = (0..c_tilde)
        .map(|c| {
            let plane = out.plane(0, c);
            plane.chunks(s2).map(|row| row.iter().map(|&v| v as usize).collect()).collect()
        })
        .collect();
    Ok(json!({ "s2": s2, "c_tilde": c_tilde, "stacked": n, "kind": kind_name, "map": map }))
}

/// Output-by-input reachability of grouped 1×1 conv → shuffle → grouped 1×1 conv.
pub fn connectivity(g1: usize, g2: usize, g3: usize, c: usize) -> Res<Value> {
    if c > 512 {
        return Err(format!("c = {c} is too large to draw (max 512)"));
    }
    let m = connectivity_matrix(g1, g2, g3, c).map_err(|e| e.to_string())?;
    let rows: Vec<String> = (0..m.rows())
        .map(|r| (0..m.cols()).map(|i| if m.get(r, i) { '1' } else { '0' }).collect())
        .collect();
    Ok(json!({ "c": c, "ones": m.count_ones(), "dense": m.is_dense(), "rows": rows }))
}

/// Renders a Gaussian heatmap, upsamples it bilinearly and decodes both maps.
pub fn heatmap(side: usize, cy: f64, cx: f64, sigma: f64, factor: usize) -> Res<Value> {
    if side == 0 || side > 128 || factor == 0 || factor > 8 {
        return Err("side must be in 1..=128 and factor in 1..=8".into());
    }
    if !(sigma >= 0.0) || !cy.is_finite() || !cx.is_finite() {
        return Err("sigma must be non-negative and the centre finite".into());
    }
    let h = render_heatmap(side, cy, cx, sigma);
    let (dy, dx) = decode_plane(&h, side, side).map_err(|e| e.to_string())?;
    let t = Tensor::from_vec((1, 1, side, side), h.clone()).map_err(|e| e.to_string())?;
    let up = bilinear_upsample(&t, factor).map_err(|e| e.to_string())?;
    let up_side = side * factor;
    let (uy, ux) = decode_plane(up.data(), up_side, up_side).map_err(|e| e.to_string())?;
    // upsampled pixel back to heatmap pixel, centres aligned
    let back = |v: f64| (v + 0.5) / factor as f64 - 0.5;
    Ok(json!({
        "side": side,
        "factor": factor,
        "heatmap": h,
        "upsampled": up.data(),
        "decoded": [dy, dx],
        "decoded_upsampled": [uy, ux],
        "decoded_upsampled_in_heatmap_px": [back(uy), back(ux)],
        "error_px": (dy - cy).hypot(dx - cx),
        "error_upsampled_px": (back(uy) - cy).hypot(back(ux) - cx),
    }))
}

fn to_js(r: Res<Value>) -> Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = rearrangement)]
pub fn rearrangement_js(s2: usize, c_tilde: usize, kind: &str, seed: u32) -> Result<String, JsValue> {
    to_js(rearrangement(s2, c_tilde, kind, seed as u64))
}

#[wasm_bindgen(js_name = connectivity)]
pub fn connectivity_js(g1: usize, g2: usize, g3: usize, c: usize) -> Result<String, JsValue> {
    to_js(connectivity(g1, g2, g3, c))
}

#[wasm_bindgen(js_name = heatmap)]
pub fn heatmap_js(side: usize, cy: f64, cx: f64, sigma: f64, factor: usize) -> Result<String, JsValue> {
    to_js(heatmap(side, cy, cx, sigma, factor))
}
