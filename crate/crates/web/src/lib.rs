//! Browser bindings: toy-domain rendering, the growth schedule and a small
//! Sliced Wasserstein comparison, all computed client-side.

use serde_json::json;
use twingan::autograd::Tensor;
use twingan::data::toy::{attributes, render};
use twingan::evaluation::{swd_images, SwdConfig};
use twingan::schedule::{stage_at, total_images};
use twingan::{DomainId, NetworkConfig, TrainPlan};
use wasm_bindgen::prelude::*;

fn domain(name: &str) -> Result<DomainId, String> {
    name.parse().map_err(|e: twingan::Error| e.to_string())
}

/// RGBA pixels of toy sample `index` in domain `"a"` or `"b"`.
#[wasm_bindgen]
pub fn render_toy(seed: u64, index: usize, domain_name: &str, size: usize) -> Result<Vec<u8>, String> {
    let d = domain(domain_name)?;
    if size < 4 {
        return Err("size must be at least 4".into());
    }
    let rgb = render(&attributes(seed, index), d, size);
    Ok(rgb.chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect())
}

fn plan_for(max_resolution: usize, stage_length: u64) -> Result<(TrainPlan, NetworkConfig), String> {
    let cfg = NetworkConfig {
        max_resolution,
        ..NetworkConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let plan = TrainPlan {
        stage_length,
        ..TrainPlan::default()
    };
    plan.validate(&cfg).map_err(|e| e.to_string())?;
    Ok((plan, cfg))
}

/// JSON array of `{images, stage, resolution, phase, alpha}` sampled evenly over
/// the whole schedule, `points` samples in total.
#[wasm_bindgen]
pub fn schedule_curve(max_resolution: usize, stage_length: u64, points: usize) -> Result<String, String> {
    let (plan, cfg) = plan_for(max_resolution, stage_length)?;
    let total = total_images(&plan, &cfg);
    let n = points.max(2);
    let rows: Vec<_> = (0..n)
        .map(|i| {
            let g = total * i as u64 / (n as u64 - 1);
            let s = stage_at(g.min(total - 1), &plan, &cfg);
            json!({
                "images": g,
                "stage": s.index,
                "resolution": s.resolution,
                "phase": s.phase.as_str(),
                "alpha": s.alpha,
            })
        })
        .collect();
    Ok(serde_json::Value::Array(rows).to_string())
}

fn toy_set(seed: u64, start: usize, n: usize, d: DomainId, size: usize) -> Tensor {
    let imgs: Vec<Tensor> = (start..start + n)
        .map(|i| {
            let rgb = render(&attributes(seed, i), d, size);
            Tensor::from_fn([1, 3, size, size], |k| {
                let (c, p) = (k / (size * size), k % (size * size));
                rgb[p * 3 + c] as f32 / 127.5 - 1.0
            })
        })
        .collect();
    Tensor::stack(&imgs)
}

/// Scores toy A against toy B and against a disjoint sample of A itself, at
/// levels 16 and 32. Returns JSON `{"a_vs_b": {...}, "a_vs_a": {...}}`.
#[wasm_bindgen]
pub fn toy_swd(seed: u64, n_images: usize) -> Result<String, String> {
    let n = n_images.clamp(4, 256);
    let cfg = SwdConfig {
        levels: vec![16, 32],
        n_images: n,
        descriptors_per_image: 32,
        n_projections: 64,
        seed,
        ..SwdConfig::default()
    };
    let a = toy_set(seed, 0, n, DomainId::A, 32);
    let a2 = toy_set(seed, n, n, DomainId::A, 32);
    let b = toy_set(seed, 0, n, DomainId::B, 32);
    let ab = swd_images(&a, &b, &cfg).map_err(|e| e.to_string())?;
    let aa = swd_images(&a, &a2, &cfg).map_err(|e| e.to_string())?;
    let obj = |r: &twingan::evaluation::SwdReport| {
        json!({
            "levels": r.levels.iter().map(|(l, v)| json!([l, v])).collect::<Vec<_>>(),
            "average": r.average,
        })
    };
    Ok(json!({ "a_vs_b": obj(&ab), "a_vs_a": obj(&aa) }).to_string())
}
