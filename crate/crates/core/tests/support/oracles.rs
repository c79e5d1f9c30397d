//! Brute-force reference implementations of the evaluation geometry and
//! metrics, compared against the library on random small instances.

use comoto_core::detector::{nms, Detection};
use comoto_core::eval::{aggregate_volume, froc, mean_average_precision, sensitivity_at, CaseResult, FP_BUDGETS};
use comoto_core::geometry::{critical_points, scale_box, BBox, Cell};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug)]
pub struct OracleReport {
    pub name: &'static str,
    pub instances: usize,
    pub mismatches: usize,
    pub first_mismatch: Option<String>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }
}

const FLOAT_TOL: f64 = 1e-9;

fn tally(name: &'static str, instances: usize, mut one: impl FnMut(usize) -> Option<String>) -> OracleReport {
    let mut report = OracleReport { name, instances, mismatches: 0, first_mismatch: None };
    for i in 0..instances {
        if let Some(msg) = one(i) {
            report.mismatches += 1;
            report.first_mismatch.get_or_insert(format!("instance {i}: {msg}"));
        }
    }
    report
}

// ---- critical points ----

/// Nearest integer by scanning candidates; ties go to the smaller one.
fn nearest_index(v: f64, max: usize) -> usize {
    let mut best = 0;
    for k in 0..=max {
        if (v - k as f64).abs() < (v - best as f64).abs() {
            best = k;
        }
    }
    best
}

fn oracle_critical(b: &BBox, max: usize) -> [(usize, usize); 9] {
    let xs = [b.x_min, (b.x_min + b.x_max) / 2.0, b.x_max].map(|v| nearest_index(v, max));
    let ys = [b.y_min, (b.y_min + b.y_max) / 2.0, b.y_max].map(|v| nearest_index(v, max));
    let (left, mid_x, right) = (xs[0], xs[1], xs[2]);
    let (top, mid_y, bottom) = (ys[0], ys[1], ys[2]);
    [
        (mid_y, mid_x),
        (top, left),
        (top, right),
        (bottom, left),
        (bottom, right),
        (top, mid_x),
        (bottom, mid_x),
        (mid_y, left),
        (mid_y, right),
    ]
}

/// Coordinates on a quarter-pixel lattice so that rounding ties occur.
fn lattice_box(rng: &mut ChaCha8Rng, extent: f64) -> BBox {
    let q = |rng: &mut ChaCha8Rng| (rng.random_range(0.0..extent) * 4.0).round() / 4.0;
    loop {
        let (a, b, c, d) = (q(rng), q(rng), q(rng), q(rng));
        let bb = BBox::new(a.min(b), c.min(d), a.max(b), c.max(d));
        if bb.x_max > bb.x_min && bb.y_max > bb.y_min {
            return bb;
        }
    }
}

pub fn check_critical_points(instances: usize, seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tally("critical_points", instances, |_| {
        let (stride, feat) = (8usize, 16usize);
        let image_box = lattice_box(&mut rng, (stride * feat) as f64);
        let scaled = scale_box(&image_box, stride, feat, feat);
        let got: Vec<(usize, usize)> = critical_points(&scaled).cells().iter().map(|c: &Cell| (c.row, c.col)).collect();
        let want = oracle_critical(&scaled, feat - 1);
        (got != want).then(|| format!("{scaled:?}: got {got:?}, want {want:?}"))
    })
}

// ---- suppression ----

fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    let area = |r: &BBox| (r.x_max - r.x_min) * (r.y_max - r.y_min);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Rank order: score descending, input position breaking ties.
fn rank_order(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    for i in 0..idx.len() {
        for j in (i + 1..idx.len()).rev() {
            let (a, b) = (idx[j - 1], idx[j]);
            if dets[b].score > dets[a].score {
                idx.swap(j - 1, j);
            }
        }
    }
    idx
}

/// Full pairwise IoU matrix, then one pass marking suppressed boxes.
fn oracle_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let n = dets.len();
    let iou: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| oracle_iou(&dets[i].bbox, &dets[j].bbox)).collect()).collect();
    let order = rank_order(dets);
    let mut suppressed = vec![false; n];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(dets[i]);
        for &j in &order[pos + 1..] {
            if iou[i][j] >= thr {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// Survival as a fixpoint: a box lives iff no living higher-ranked box
/// overlaps it at the threshold.
fn oracle_aggregate(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let order = rank_order(dets);
    let mut alive = vec![true; order.len()];
    loop {
        let next: Vec<bool> = (0..order.len())
            .map(|p| (0..p).all(|q| !alive[q] || oracle_iou(&dets[order[q]].bbox, &dets[order[p]].bbox) < thr))
            .collect();
        if next == alive {
            break;
        }
        alive = next;
    }
    order.iter().zip(&alive).filter(|(_, &a)| a).map(|(&i, _)| dets[i]).collect()
}

/// Integer-coordinate boxes clustered so that overlaps are common.
fn random_detections(rng: &mut ChaCha8Rng, slices: Option<usize>) -> Vec<Detection> {
    let n = rng.random_range(0..=12);
    let centers: Vec<(f64, f64)> = (0..3).map(|_| (rng.random_range(10..50) as f64, rng.random_range(10..50) as f64)).collect();
    (0..n)
        .map(|_| {
            let (cx, cy) = centers[rng.random_range(0..centers.len())];
            let x0 = cx + rng.random_range(-6..=2) as f64;
            let y0 = cy + rng.random_range(-6..=2) as f64;
            let bbox = BBox::new(x0, y0, x0 + rng.random_range(3..=12) as f64, y0 + rng.random_range(3..=12) as f64);
            let score = if rng.random_bool(0.3) { [0.2, 0.5, 0.8][rng.random_range(0..3)] } else { rng.random_range(0.0..1.0) };
            Detection { bbox, score, slice_index: slices.map(|s| rng.random_range(0..s)) }
        })
        .collect()
}

fn same_detections(got: &[Detection], want: &[Detection]) -> Option<String> {
    (got != want).then(|| format!("got {} boxes {got:?}, want {} boxes {want:?}", got.len(), want.len()))
}

pub fn check_nms(instances: usize, seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tally("nms", instances, |_| {
        let dets = random_detections(&mut rng, None);
        let thr = [0.3, 0.5, 0.7][rng.random_range(0..3)];
        same_detections(&nms(&dets, thr), &oracle_nms(&dets, thr))
    })
}

pub fn check_aggregate_volume(instances: usize, seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tally("aggregate_volume", instances, |_| {
        let dets = random_detections(&mut rng, Some(8));
        same_detections(&aggregate_volume(&dets, 0.5), &oracle_aggregate(&dets, 0.5))
    })
}

// ---- FROC ----

struct OracleCase {
    gt: Vec<BBox>,
    /// Detections in their given order.
    dets: Vec<Detection>,
}

/// Hits among the detections scoring at least `t`, recomputed from
/// scratch: visit them by descending score (stable) and credit the first
/// unclaimed ground-truth box containing the detection center.
fn hits_at(case: &OracleCase, t: f64) -> (usize, usize) {
    let mut considered: Vec<&Detection> = case.dets.iter().filter(|d| d.score >= t).collect();
    considered.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut claimed = vec![false; case.gt.len()];
    let mut tp = 0;
    for d in &considered {
        let cx = (d.bbox.x_min + d.bbox.x_max) / 2.0;
        let cy = (d.bbox.y_min + d.bbox.y_max) / 2.0;
        for (g, b) in case.gt.iter().enumerate() {
            if !claimed[g] && cx >= b.x_min && cx <= b.x_max && cy >= b.y_min && cy <= b.y_max {
                claimed[g] = true;
                tp += 1;
                break;
            }
        }
    }
    (tp, considered.len() - tp)
}

/// `(threshold, fps per case, sensitivity)` at every distinct score, descending.
fn oracle_froc(cases: &[OracleCase]) -> Vec<(f64, f64, f64)> {
    let lesions: usize = cases.iter().map(|c| c.gt.len()).sum();
    let mut thresholds: Vec<f64> = cases.iter().flat_map(|c| c.dets.iter().map(|d| d.score)).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    thresholds
        .into_iter()
        .map(|t| {
            let (tp, fp) = cases.iter().map(|c| hits_at(c, t)).fold((0, 0), |acc, x| (acc.0 + x.0, acc.1 + x.1));
            (t, fp as f64 / cases.len() as f64, tp as f64 / lesions as f64)
        })
        .collect()
}

fn oracle_sensitivity_at(curve: &[(f64, f64, f64)], budget: f64) -> f64 {
    let mut best = 0.0;
    for &(_, fps, sens) in curve {
        if fps <= budget && sens > best {
            best = sens;
        }
    }
    best
}

fn random_cases(rng: &mut ChaCha8Rng) -> Vec<OracleCase> {
    let n = rng.random_range(1..=4);
    let mut cases: Vec<OracleCase> = (0..n)
        .map(|_| {
            let gt: Vec<BBox> = (0..rng.random_range(0..=3))
                .map(|_| {
                    let (x, y) = (rng.random_range(0..40) as f64, rng.random_range(0..40) as f64);
                    BBox::new(x, y, x + rng.random_range(4..=16) as f64, y + rng.random_range(4..=16) as f64)
                })
                .collect();
            let mut dets = random_detections(rng, None);
            // Put some detections on ground truth so that hits and multiple claims occur.
            for b in &gt {
                for _ in 0..rng.random_range(0..=2) {
                    let (dx, dy) = (rng.random_range(-3..=3) as f64, rng.random_range(-3..=3) as f64);
                    let bbox = BBox::new(b.x_min + dx, b.y_min + dy, b.x_max + dx, b.y_max + dy);
                    dets.push(Detection { bbox, score: rng.random_range(0.0..1.0), slice_index: None });
                }
            }
            OracleCase { gt, dets }
        })
        .collect();
    if cases.iter().all(|c| c.gt.is_empty()) {
        cases[0].gt.push(BBox::new(20.0, 20.0, 30.0, 30.0));
    }
    cases
}

fn library_cases(cases: &[OracleCase]) -> Vec<CaseResult> {
    cases.iter().enumerate().map(|(i, c)| CaseResult::new(format!("c{i}"), c.gt.clone(), c.dets.clone())).collect()
}

pub fn check_froc(instances: usize, seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tally("froc/sensitivity_at", instances, |_| {
        let cases = random_cases(&mut rng);
        let want = oracle_froc(&cases);
        let curve = match froc(&library_cases(&cases)) {
            Ok(c) => c,
            Err(e) => return Some(format!("froc failed: {e}")),
        };
        let got: Vec<(f64, f64, f64)> = curve.points.iter().map(|p| (p.threshold, p.fps_per_case, p.sensitivity)).collect();
        if got.len() != want.len()
            || got.iter().zip(&want).any(|(g, w)| g.0 != w.0 || (g.1 - w.1).abs() > FLOAT_TOL || (g.2 - w.2).abs() > FLOAT_TOL)
        {
            return Some(format!("curve {got:?} vs {want:?}"));
        }
        let budgets = FP_BUDGETS.into_iter().chain([rng.random_range(0.05..6.0)]);
        for b in budgets {
            let s = sensitivity_at(&curve, b).expect("positive budget");
            let w = oracle_sensitivity_at(&want, b);
            if (s - w).abs() > FLOAT_TOL {
                return Some(format!("sensitivity_at({b}) = {s}, want {w}"));
            }
        }
        None
    })
}

// ---- average precision ----

/// Greedy VOC matching over all detections by descending score (stable in
/// case order), then the area under the precision envelope taken as the
/// sum over true positives of the best precision at or beyond that rank.
fn oracle_map(cases: &[CaseResult], thr: f64) -> f64 {
    let lesions: usize = cases.iter().map(|c| c.gt_boxes.len()).sum();
    let mut all: Vec<(usize, Detection)> =
        cases.iter().enumerate().flat_map(|(c, case)| case.detections().iter().map(move |d| (c, *d))).collect();
    all.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap());
    let mut claimed: Vec<Vec<bool>> = cases.iter().map(|c| vec![false; c.gt_boxes.len()]).collect();
    let mut flags = Vec::new();
    for (c, d) in &all {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in cases[*c].gt_boxes.iter().enumerate() {
            let v = oracle_iou(&d.bbox, gt);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        let tp = matches!(best, Some((g, v)) if v >= thr && !claimed[*c][g]);
        if let (true, Some((g, _))) = (tp, best) {
            claimed[*c][g] = true;
        }
        flags.push(tp);
    }
    let precision: Vec<f64> = (0..flags.len())
        .map(|k| flags[..=k].iter().filter(|&&f| f).count() as f64 / (k + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for k in 0..flags.len() {
        if flags[k] {
            let envelope = precision[k..].iter().cloned().fold(0.0, f64::max);
            ap += envelope / lesions as f64;
        }
    }
    ap
}

pub fn check_map(instances: usize, seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tally("mean_average_precision", instances, |_| {
        let cases = library_cases(&random_cases(&mut rng));
        let thr = [0.3, 0.5][rng.random_range(0..2)];
        let got = match mean_average_precision(&cases, thr) {
            Ok(v) => v,
            Err(e) => return Some(format!("mAP failed: {e}")),
        };
        let want = oracle_map(&cases, thr);
        ((got - want).abs() > FLOAT_TOL).then(|| format!("mAP {got} vs oracle {want}"))
    })
}

pub fn run_all(instances: usize, seed: u64) -> Vec<OracleReport> {
    vec![
        check_critical_points(instances, seed),
        check_nms(instances, seed + 1),
        check_aggregate_volume(instances, seed + 2),
        check_froc(instances, seed + 3),
        check_map(instances, seed + 4),
    ]
}
