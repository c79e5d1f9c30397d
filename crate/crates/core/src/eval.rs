//! Lesion-detection evaluation: FROC, sensitivity at fixed false-positive
//! budgets and single-class average precision.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Modality, Sample};
use crate::detector::{nms, Detection, Network, PostProcess};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// FP-per-case budgets averaged into the mean sensitivity.
pub const FP_BUDGETS: [f64; 4] = [1.0, 2.0, 3.0, 4.0];

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub case_id: String,
    pub gt_boxes: Vec<BBox>,
    detections: Vec<Detection>,
}

fn by_score_desc(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score)
}

impl CaseResult {
    /// Detections are stably sorted by descending score.
    pub fn new(case_id: impl Into<String>, gt_boxes: Vec<BBox>, mut detections: Vec<Detection>) -> Self {
        detections.sort_by(by_score_desc);
        Self { case_id: case_id.into(), gt_boxes, detections }
    }

    pub fn detections(&self) -> &[Detection] {
        &self.detections
    }

    /// Hit flag of every detection, in score order: a detection hits when
    /// its center lies inside a ground-truth box not already hit.
    pub fn hit_flags(&self) -> Vec<bool> {
        let mut taken = vec![false; self.gt_boxes.len()];
        self.detections
            .iter()
            .map(|d| {
                let (cx, cy) = d.bbox.center();
                let hit = (0..self.gt_boxes.len()).find(|&g| !taken[g] && self.gt_boxes[g].contains_point(cx, cy));
                if let Some(g) = hit {
                    taken[g] = true;
                }
                hit.is_some()
            })
            .collect()
    }
}

/// Pools a volume's slice detections and suppresses in-plane duplicates,
/// ignoring which slice each came from.
pub fn aggregate_volume(slice_detections: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    nms(slice_detections, iou_thresh)
}

/// True and false positives among detections scoring at least `threshold`.
pub fn match_detections(case: &CaseResult, threshold: f64) -> (usize, usize) {
    let flags = case.hit_flags();
    let kept = case.detections.iter().take_while(|d| d.score >= threshold).count();
    let tp = flags[..kept].iter().filter(|&&h| h).count();
    (tp, kept - tp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub fps_per_case: f64,
    pub sensitivity: f64,
}

/// One point per distinct detection score, thresholds descending.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrocCurve {
    pub points: Vec<FrocPoint>,
}

pub fn total_lesions(cases: &[CaseResult]) -> usize {
    cases.iter().map(|c| c.gt_boxes.len()).sum()
}

pub fn froc(cases: &[CaseResult]) -> Result<FrocCurve> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("froc: no cases".into()));
    }
    let lesions = total_lesions(cases);
    if lesions == 0 {
        return Err(Error::InvalidArgument("froc: no ground-truth lesions".into()));
    }
    let mut scored: Vec<(f64, bool)> = cases
        .iter()
        .flat_map(|c| c.detections.iter().map(|d| d.score).zip(c.hit_flags()))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(score, hit)) in scored.iter().enumerate() {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        if scored.get(i + 1).is_none_or(|next| next.0 != score) {
            points.push(FrocPoint {
                threshold: score,
                fps_per_case: fp as f64 / cases.len() as f64,
                sensitivity: tp as f64 / lesions as f64,
            });
        }
    }
    Ok(FrocCurve { points })
}

/// Best sensitivity reachable within `fps_budget` false positives per case.
pub fn sensitivity_at(curve: &FrocCurve, fps_budget: f64) -> Result<f64> {
    if fps_budget.is_nan() || fps_budget <= 0.0 {
        return Err(Error::InvalidArgument(format!("fps budget must be positive, got {fps_budget}")));
    }
    Ok(curve
        .points
        .iter()
        .filter(|p| p.fps_per_case <= fps_budget)
        .map(|p| p.sensitivity)
        .fold(0.0, f64::max))
}

pub fn mean_sensitivity(curve: &FrocCurve) -> f64 {
    FP_BUDGETS.iter().map(|&b| sensitivity_at(curve, b).expect("positive budget")).sum::<f64>() / FP_BUDGETS.len() as f64
}

/// Single-class AP with greedy IoU matching over globally score-sorted
/// detections and all-point interpolation.
pub fn mean_average_precision(cases: &[CaseResult], iou_thresh: f64) -> Result<f64> {
    let lesions = total_lesions(cases);
    if lesions == 0 {
        return Err(Error::InvalidArgument("mAP: no ground-truth lesions".into()));
    }
    let mut order: Vec<(usize, usize)> = cases
        .iter()
        .enumerate()
        .flat_map(|(c, case)| (0..case.detections.len()).map(move |d| (c, d)))
        .collect();
    order.sort_by(|&(ca, da), &(cb, db)| by_score_desc(&cases[ca].detections[da], &cases[cb].detections[db]));
    let mut taken: Vec<Vec<bool>> = cases.iter().map(|c| vec![false; c.gt_boxes.len()]).collect();
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(c, d) in &order {
        let det = &cases[c].detections[d];
        let best = cases[c]
            .gt_boxes
            .iter()
            .enumerate()
            .map(|(g, gt)| (g, det.bbox.iou(gt)))
            .fold(None, |acc: Option<(usize, f64)>, (g, iou)| match acc {
                Some((_, best)) if best >= iou => acc,
                _ => Some((g, iou)),
            });
        match best {
            Some((g, iou)) if iou >= iou_thresh && !taken[c][g] => {
                taken[c][g] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / lesions as f64);
    }
    Ok(all_point_ap(&recall, &precision))
}

/// Area under the monotone precision envelope.
pub fn all_point_ap(recall: &[f64], precision: &[f64]) -> f64 {
    let mut mrec = Vec::with_capacity(recall.len() + 2);
    mrec.push(0.0);
    mrec.extend_from_slice(recall);
    mrec.push(1.0);
    let mut mpre = Vec::with_capacity(precision.len() + 2);
    mpre.push(0.0);
    mpre.extend_from_slice(precision);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (1..mrec.len()).filter(|&i| mrec[i] != mrec[i - 1]).map(|i| (mrec[i] - mrec[i - 1]) * mpre[i]).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub sensitivity: [f64; 4],
    pub mean_sensitivity: f64,
    pub map: f64,
}

impl Metrics {
    pub fn sensitivity_at_2(&self) -> f64 {
        self.sensitivity[1]
    }

    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("mean_sensitivity", self.mean_sensitivity),
            ("sensitivity_at_1fp", self.sensitivity[0]),
            ("sensitivity_at_2fp", self.sensitivity[1]),
            ("sensitivity_at_3fp", self.sensitivity[2]),
            ("sensitivity_at_4fp", self.sensitivity[3]),
            ("map", self.map),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub curve: FrocCurve,
}

pub fn evaluate(cases: &[CaseResult]) -> Result<Evaluation> {
    let curve = froc(cases)?;
    let sensitivity = FP_BUDGETS.map(|b| sensitivity_at(&curve, b).expect("positive budget"));
    let metrics = Metrics {
        sensitivity,
        mean_sensitivity: mean_sensitivity(&curve),
        map: mean_average_precision(cases, 0.5)?,
    };
    Ok(Evaluation { metrics, curve })
}

pub fn metrics_csv(metrics: &Metrics) -> String {
    let mut out = String::from("metric,value\n");
    for (name, v) in metrics.rows() {
        writeln!(out, "{name},{v}").unwrap();
    }
    out
}

pub fn froc_csv(curve: &FrocCurve) -> String {
    let mut out = String::from("threshold,fps_per_case,sensitivity\n");
    for p in &curve.points {
        writeln!(out, "{},{},{}", p.threshold, p.fps_per_case, p.sensitivity).unwrap();
    }
    out
}

/// Detections of one case: a plane image, or every slice of a volume
/// pooled and suppressed.
pub fn predict_case(net: &Network, sample: &Sample, post: &PostProcess) -> Result<CaseResult> {
    let slices: Vec<_> = (0..sample.slices()).map(|s| sample.slice(s)).collect();
    let refs: Vec<_> = slices.iter().collect();
    let per_slice = net.detect(&refs, post)?;
    let detections = match sample.modality {
        Modality::M => per_slice.into_iter().next().unwrap_or_default(),
        Modality::T => {
            let pooled: Vec<Detection> = per_slice
                .into_iter()
                .enumerate()
                .flat_map(|(s, dets)| dets.into_iter().map(move |d| Detection { slice_index: Some(s), ..d }))
                .collect();
            aggregate_volume(&pooled, post.iou_thresh)
        }
    };
    Ok(CaseResult::new(sample.id.clone(), sample.gt_boxes(), detections))
}

pub fn predict_cases(net: &Network, samples: &[&Sample], post: &PostProcess) -> Result<Vec<CaseResult>> {
    samples.iter().map(|s| predict_case(net, s, post)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DetectionRecord {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    score: f64,
    slice_index: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredictionLine {
    case_id: String,
    detections: Vec<DetectionRecord>,
}

pub fn predictions_jsonl(cases: &[CaseResult]) -> String {
    let mut out = String::new();
    for c in cases {
        let line = PredictionLine {
            case_id: c.case_id.clone(),
            detections: c
                .detections
                .iter()
                .map(|d| DetectionRecord {
                    x_min: d.bbox.x_min,
                    y_min: d.bbox.y_min,
                    x_max: d.bbox.x_max,
                    y_max: d.bbox.y_max,
                    score: d.score,
                    slice_index: d.slice_index,
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line).expect("prediction serializes"));
        out.push('\n');
    }
    out
}

/// Reads per-case predictions, returned in file order.
pub fn read_predictions(path: &Path) -> Result<Vec<(String, Vec<Detection>)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionLine =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let dets = rec
            .detections
            .into_iter()
            .map(|d| Detection {
                bbox: BBox::new(d.x_min, d.y_min, d.x_max, d.y_max),
                score: d.score,
                slice_index: d.slice_index,
            })
            .collect();
        out.push((rec.case_id, dets));
    }
    Ok(out)
}

/// Pairs external predictions with ground truth; every prediction must name
/// a known case and cases without predictions get no detections.
pub fn cases_from_predictions(samples: &[&Sample], predictions: Vec<(String, Vec<Detection>)>) -> Result<Vec<CaseResult>> {
    let mut by_id: std::collections::BTreeMap<String, Vec<Detection>> = std::collections::BTreeMap::new();
    for (id, dets) in predictions {
        if !samples.iter().any(|s| s.id == id) {
            return Err(Error::Data(format!("prediction for unknown case {id}")));
        }
        by_id.entry(id).or_default().extend(dets);
    }
    Ok(samples
        .iter()
        .map(|s| CaseResult::new(s.id.clone(), s.gt_boxes(), by_id.remove(&s.id).unwrap_or_default()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f64, y: f64, score: f64) -> Detection {
        Detection { bbox: BBox::new(x - 2.0, y - 2.0, x + 2.0, y + 2.0), score, slice_index: None }
    }

    #[test]
    fn aggregate_merges_slices() {
        let b = BBox::new(10.0, 10.0, 20.0, 20.0);
        let d = |s, score| Detection { bbox: b, score, slice_index: Some(s) };
        let out = aggregate_volume(&[d(2, 0.9), d(3, 0.7)], 0.5);
        assert_eq!(out, vec![d(2, 0.9)]);
        let far = Detection { bbox: BBox::new(50.0, 50.0, 60.0, 60.0), score: 0.4, slice_index: Some(5) };
        assert_eq!(aggregate_volume(&[d(2, 0.9), far], 0.5).len(), 2);
    }

    #[test]
    fn matching_rules() {
        let gt = vec![BBox::new(0.0, 0.0, 10.0, 10.0)];
        let one = CaseResult::new("a", gt.clone(), vec![det(5.0, 5.0, 0.9)]);
        assert_eq!(match_detections(&one, 0.5), (1, 0));
        let none = CaseResult::new("b", gt.clone(), vec![]);
        assert_eq!(match_detections(&none, 0.5), (0, 0));
        let two = CaseResult::new("c", gt, vec![det(5.0, 5.0, 0.9), det(6.0, 6.0, 0.8)]);
        assert_eq!(match_detections(&two, 0.5), (1, 1));
    }

    fn two_case_example() -> Vec<CaseResult> {
        vec![
            CaseResult::new("c1", vec![BBox::new(0.0, 0.0, 10.0, 10.0)], vec![det(5.0, 5.0, 0.9), det(50.0, 50.0, 0.8)]),
            CaseResult::new("c2", vec![BBox::new(0.0, 0.0, 10.0, 10.0)], vec![det(50.0, 50.0, 0.7)]),
        ]
    }

    #[test]
    fn froc_threshold_sweep() {
        let curve = froc(&two_case_example()).unwrap();
        let pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.fps_per_case, p.sensitivity)).collect();
        assert_eq!(pts, vec![(0.0, 0.5), (0.5, 0.5), (1.0, 0.5)]);
        assert_eq!(sensitivity_at(&curve, 1.0).unwrap(), 0.5);
        assert_eq!(sensitivity_at(&curve, 2.0).unwrap(), 0.5);
        assert!(sensitivity_at(&curve, 0.0).is_err());
        let mut rev = two_case_example();
        rev.reverse();
        assert_eq!(froc(&rev).unwrap(), curve);
    }

    #[test]
    fn froc_rejects_empty_ground_truth() {
        assert!(froc(&[CaseResult::new("x", vec![], vec![det(1.0, 1.0, 0.5)])]).is_err());
        assert!(froc(&[]).is_err());
    }

    #[test]
    fn budget_below_first_point() {
        let cases = vec![CaseResult::new("a", vec![BBox::new(0.0, 0.0, 4.0, 4.0)], vec![det(50.0, 50.0, 0.9), det(60.0, 60.0, 0.8), det(2.0, 2.0, 0.1)])];
        let curve = froc(&cases).unwrap();
        assert_eq!(sensitivity_at(&curve, 0.5).unwrap(), 0.0);
        assert_eq!(sensitivity_at(&curve, 2.0).unwrap(), 1.0);
    }

    #[test]
    fn perfect_detector() {
        let cases = vec![CaseResult::new("a", vec![BBox::new(0.0, 0.0, 10.0, 10.0)], vec![Detection {
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
            score: 0.9,
            slice_index: None,
        }])];
        let e = evaluate(&cases).unwrap();
        assert_eq!(e.curve.points[0].sensitivity, 1.0);
        assert_eq!(e.curve.points[0].fps_per_case, 0.0);
        assert_eq!(e.metrics.map, 1.0);
        assert_eq!(e.metrics.mean_sensitivity, 1.0);
    }

    #[test]
    fn map_of_false_positive_only() {
        let cases = vec![CaseResult::new("a", vec![BBox::new(0.0, 0.0, 10.0, 10.0)], vec![det(50.0, 50.0, 0.9)])];
        assert_eq!(mean_average_precision(&cases, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn map_hand_executed_pr_sweep() {
        // Three lesions; in score order the detections are TP, FP, TP, TP(dup), TP.
        let g = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(20.0, 20.0, 30.0, 30.0), BBox::new(40.0, 40.0, 50.0, 50.0)];
        let d = |b: BBox, s| Detection { bbox: b, score: s, slice_index: None };
        let cases = vec![CaseResult::new(
            "a",
            g.to_vec(),
            vec![
                d(g[0], 0.95),
                d(BBox::new(70.0, 70.0, 80.0, 80.0), 0.9),
                d(g[1], 0.8),
                d(g[1], 0.7),
                d(g[2], 0.6),
            ],
        )];
        // Precision 1, 1/2, 2/3, 2/4, 3/5 at recall 1/3, 1/3, 2/3, 2/3, 1.
        // Envelope: 1 on (0, 1/3], 2/3 on (1/3, 2/3], 3/5 on (2/3, 1].
        let expected = (1.0 + 2.0 / 3.0 + 3.0 / 5.0) / 3.0;
        assert!((mean_average_precision(&cases, 0.5).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn csv_layouts() {
        let e = evaluate(&two_case_example()).unwrap();
        let m = metrics_csv(&e.metrics);
        assert!(m.starts_with("metric,value\nmean_sensitivity,0.5\n"));
        assert!(froc_csv(&e.curve).starts_with("threshold,fps_per_case,sensitivity\n0.9,0,0.5\n"));
    }
}
