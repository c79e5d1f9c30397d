//! Browser bindings: synthetic samples with their critical points, the
//! temperature-softened prototype, and FROC scoring of simulated detections.

use comoto_core::autodiff::Graph;
use comoto_core::data::{generate_sample, sample_id, LesionBox, Modality, Sample, SyntheticSpec};
use comoto_core::detector::Detection;
use comoto_core::eval::{froc, mean_average_precision, mean_sensitivity, sensitivity_at, CaseResult};
use comoto_core::geometry::{critical_points, scale_box, BBox};
use comoto_core::losses::soften;
use comoto_core::tensor::DenseArray;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Total stride of the detector's feature map.
const STRIDE: usize = 8;

fn sample(seed: u32, volume: bool, index: u32) -> Sample {
    let spec = SyntheticSpec { seed: seed.into(), ..SyntheticSpec::default() };
    let modality = if volume { Modality::T } else { Modality::M };
    generate_sample(&spec, modality, &sample_id(modality, index as usize)).0
}

fn visible(b: &LesionBox, slice: usize) -> bool {
    b.slices.is_none_or(|(lo, hi)| (lo..=hi).contains(&slice))
}

#[wasm_bindgen]
pub fn image_size() -> usize {
    SyntheticSpec::default().image_size
}

#[wasm_bindgen]
pub fn slice_count(volume: bool) -> usize {
    if volume {
        SyntheticSpec::default().volume_slices
    } else {
        1
    }
}

/// Row-major intensities of one slice.
#[wasm_bindgen]
pub fn sample_slice(seed: u32, volume: bool, index: u32, slice: usize) -> Vec<f32> {
    let s = sample(seed, volume, index);
    let slice = slice.min(s.slices() - 1);
    s.slice(slice).data().iter().map(|&v| v as f32).collect()
}

/// JSON list of the lesions visible on `slice`, each with its box and the
/// nine critical points mapped back to image coordinates (cell centers).
#[wasm_bindgen]
pub fn sample_overlay(seed: u32, volume: bool, index: u32, slice: usize) -> String {
    let s = sample(seed, volume, index);
    let n = s.pixels.shape()[1];
    let feat = n / STRIDE;
    let half = STRIDE as f64 / 2.0;
    let lesions: Vec<_> = s
        .boxes
        .iter()
        .filter(|b| visible(b, slice))
        .map(|b| {
            let points: Vec<[f64; 2]> = critical_points(&scale_box(&b.bbox, STRIDE, feat, feat))
                .cells()
                .iter()
                .map(|c| [(c.col * STRIDE) as f64 + half, (c.row * STRIDE) as f64 + half])
                .collect();
            json!({
                "box": [b.bbox.x_min, b.bbox.y_min, b.bbox.x_max, b.bbox.y_max],
                "central": b.central_slice == Some(slice) || b.central_slice.is_none(),
                "points": points,
            })
        })
        .collect();
    json!({ "id": s.id, "lesions": lesions }).to_string()
}

/// Softmax of `logits / tau`, the per-point distribution the lesion
/// distillation compares.
#[wasm_bindgen]
pub fn soften_logits(logits: Vec<f64>, tau: f64) -> Result<Vec<f64>, JsError> {
    let mut g = Graph::new();
    let n = logits.len();
    let x = g.constant(DenseArray::new(vec![n, 1], logits).map_err(|e| JsError::new(&e.to_string()))?);
    let s = soften(&mut g, x, tau, None).map_err(|e| JsError::new(&e.to_string()))?;
    Ok(g.value(s).data().to_vec())
}

fn jitter(rng: &mut ChaCha8Rng, b: &BBox, amount: f64) -> BBox {
    let (w, h) = (b.width(), b.height());
    let mut d = |scale: f64| rng.random_range(-amount..=amount) * scale;
    BBox { x_min: b.x_min + d(w), y_min: b.y_min + d(h), x_max: b.x_max + d(w), y_max: b.y_max + d(h) }
}

/// Scores a simulated detector on `cases` synthetic images. Each lesion is
/// found with probability `1 - miss_rate`; each case also gets up to
/// `2 * fp_rate` spurious boxes. Returns JSON with the FROC points and the
/// summary metrics.
#[wasm_bindgen]
pub fn froc_demo(seed: u32, cases: u32, miss_rate: f64, fp_rate: f64, noise: f64) -> Result<String, JsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.into());
    let n = image_size() as f64;
    let max_fp = (2.0 * fp_rate).round().max(0.0) as usize;
    let results: Vec<CaseResult> = (0..cases.max(1))
        .map(|i| {
            let s = sample(seed, false, i);
            let gt = s.gt_boxes();
            let mut dets = Vec::new();
            for b in &gt {
                if !rng.random_bool(miss_rate.clamp(0.0, 1.0)) {
                    let score = rng.random_range(0.3..1.0);
                    dets.push(Detection { bbox: jitter(&mut rng, b, noise), score, slice_index: None });
                }
            }
            for _ in 0..rng.random_range(0..=max_fp) {
                let (x, y, size) = (rng.random_range(0.0..n - 16.0), rng.random_range(0.0..n - 16.0), rng.random_range(8.0..16.0));
                let bbox = BBox { x_min: x, y_min: y, x_max: x + size, y_max: y + size };
                dets.push(Detection { bbox, score: rng.random_range(0.0..0.8), slice_index: None });
            }
            CaseResult::new(s.id, gt, dets)
        })
        .collect();
    let err = |e: comoto_core::error::Error| JsError::new(&e.to_string());
    let curve = froc(&results).map_err(err)?;
    let points: Vec<[f64; 3]> = curve.points.iter().map(|p| [p.fps_per_case, p.sensitivity, p.threshold]).collect();
    Ok(json!({
        "points": points,
        "mean_sensitivity": mean_sensitivity(&curve),
        "sensitivity_at_2fp": sensitivity_at(&curve, 2.0).map_err(err)?,
        "map": mean_average_precision(&results, 0.5).map_err(err)?,
    })
    .to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_points_lie_in_their_boxes_give_or_take_a_cell() {
        for i in 0..10 {
            let v: serde_json::Value = serde_json::from_str(&sample_overlay(3, false, i, 0)).unwrap();
            for l in v["lesions"].as_array().unwrap() {
                let b: Vec<f64> = l["box"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
                for p in l["points"].as_array().unwrap() {
                    let (x, y) = (p[0].as_f64().unwrap(), p[1].as_f64().unwrap());
                    let slack = STRIDE as f64;
                    assert!(x >= b[0] - slack && x <= b[2] + slack && y >= b[1] - slack && y <= b[3] + slack);
                }
            }
        }
    }

    #[test]
    fn slices_have_image_size() {
        let n = image_size();
        assert_eq!(sample_slice(1, false, 0, 0).len(), n * n);
        assert_eq!(sample_slice(1, true, 2, 99).len(), n * n);
    }

    #[test]
    fn softened_logits_are_a_distribution() {
        let p = soften_logits(vec![1.0, -2.0, 0.5, 3.0], 4.0).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[3] > p[0] && p[0] > p[2] && p[2] > p[1]);
    }

    #[test]
    fn perfect_detector_scores_one() {
        let v: serde_json::Value = serde_json::from_str(&froc_demo(5, 12, 0.0, 0.0, 0.0).unwrap()).unwrap();
        assert_eq!(v["mean_sensitivity"].as_f64(), Some(1.0));
        assert_eq!(v["map"].as_f64(), Some(1.0));
    }
}
