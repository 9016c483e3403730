//! Browser bindings. Every entry point takes plain values and returns a JSON
//! string; errors come back as `{"error": "..."}` so the page never throws.

use detnas::microdet::gen_dataset;
use detnas::morph::{f_evolve, Action, StudentState};
use detnas::netgraph::{decode_arch, encode_arch, flops_breakdown, ArchSpec, Detector};
use detnas::tensor::{Graph, Mode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn respond(r: Result<Value, String>) -> String {
    r.unwrap_or_else(|e| json!({ "error": e })).to_string()
}

fn costs(arch: &ArchSpec, res: usize) -> Result<Value, String> {
    let b = flops_breakdown(arch, (res, res)).map_err(|e| e.to_string())?;
    Ok(json!({
        "encoding": encode_arch(arch),
        "depths": arch.depths(),
        "stem": b.stem,
        "stages": b.stages,
        "neck": b.neck,
        "backbone": b.backbone(),
        "total": b.total(),
    }))
}

/// FLOPS of an architecture string at `res`×`res`, split by part.
#[wasm_bindgen]
pub fn analyze(encoding: &str, res: usize) -> String {
    respond(decode_arch(encoding).map_err(|e| e.to_string()).and_then(|a| costs(&a, res)))
}

fn outputs(d: &Detector, x: &Tensor) -> Result<Vec<f64>, String> {
    let mut g = Graph::new(Mode::Eval);
    let xv = g.input(x.clone());
    let o = d.forward(&mut g, xv).map_err(|e| e.to_string())?;
    let mut v = g.value(o.cls).data().to_vec();
    v.extend_from_slice(g.value(o.reg).data());
    Ok(v)
}

fn evolve_inner(encoding: &str, action: &str, seed: u64, res: usize) -> Result<Value, String> {
    let arch = decode_arch(encoding).map_err(|e| e.to_string())?;
    let action: Action = serde_json::from_str(action).map_err(|e| format!("action: {e}"))?;
    let mut parent = Detector::fresh(arch, seed).map_err(|e| e.to_string())?;
    // fresh BN scales are all 1, which leaves channel pruning nothing to rank
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gammas: Vec<String> = parent.params.names().filter(|n| n.ends_with(".gamma")).cloned().collect();
    for name in gammas {
        let t = parent.params.get_mut(&name).expect("listed");
        t.data_mut().iter_mut().for_each(|g| *g = rng.random_range(0.2..1.5));
    }
    let child = f_evolve(&StudentState::new(parent.clone()), action).map_err(|e| e.to_string())?;
    let child = child.detector().map_err(|e| e.to_string())?;
    let scene = gen_dataset(seed, 1, &[res]).layouts[0].render(res);
    let x = scene.image.reshape(vec![1, 3, res, res]).map_err(|e| e.to_string())?;
    let (a, b) = (outputs(&parent, &x)?, outputs(&child, &x)?);
    let diff = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    Ok(json!({
        "parent": costs(&parent.arch, res)?,
        "child": costs(&child.arch, res)?,
        "max_output_diff": diff,
    }))
}

/// Applies a morph action (JSON, e.g. `{"kind":"add_layer","stage":1}`) to
/// a freshly initialised detector with random BN scales and compares both networks' head outputs
/// on one rendered scene.
#[wasm_bindgen]
pub fn evolve(encoding: &str, action: &str, seed: u64, res: usize) -> String {
    respond(evolve_inner(encoding, action, seed, res))
}

/// Renders scene 0 of the dataset with `seed` at `res`×`res`. Pixels are
/// RGBA bytes; boxes are normalised `(x1, y1, x2, y2)`.
#[wasm_bindgen]
pub fn render_scene(seed: u64, res: usize) -> String {
    if !(8..=256).contains(&res) {
        return respond(Err(format!("resolution must be in 8..=256, got {res}")));
    }
    let layout = &gen_dataset(seed, 1, &[res]).layouts[0];
    let img = layout.render(res).image;
    let d = img.data();
    let plane = res * res;
    let mut rgba = Vec::with_capacity(4 * plane);
    for i in 0..plane {
        for c in 0..3 {
            rgba.push((d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        rgba.push(255);
    }
    let objects: Vec<Value> = layout.objects.iter().map(|o| json!({ "class_id": o.class_id, "bbox": o.bbox })).collect();
    respond(Ok(json!({ "size": res, "rgba": rgba, "objects": objects })))
}
