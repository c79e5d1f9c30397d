//! Single-level anchor-based detector: a strided conv encoder whose output
//! is the distillation tap, a small conv head, focal + smooth-L1 loss, box
//! decoding and greedy NMS.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::losses::{identity_projection, Projection};
use crate::optim::ParamStore;
use crate::tensor::DenseArray;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Output channels of each stride-2 stage; the last one is `D`.
    pub stage_channels: Vec<usize>,
    pub kernel: usize,
}

impl EncoderConfig {
    pub fn channels(&self) -> usize {
        *self.stage_channels.last().expect("encoder needs at least one stage")
    }

    pub fn stride(&self) -> usize {
        1 << self.stage_channels.len()
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { in_channels: 1, stage_channels: vec![8, 16, 32], kernel: 3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorConfig {
    pub sizes: Vec<f64>,
    pub ratios: Vec<f64>,
    pub stride: usize,
}

impl AnchorConfig {
    pub fn per_cell(&self) -> usize {
        self.sizes.len() * self.ratios.len()
    }
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self { sizes: vec![12.0, 24.0, 48.0], ratios: vec![0.5, 1.0, 2.0], stride: 8 }
    }
}

/// Anchors for an `h × w` grid. Index order is anchor-type major:
/// `index = type · h·w + row · w + col` with `type = size · |ratios| + ratio`,
/// which matches the channel layout of the head outputs.
pub fn generate_anchors(cfg: &AnchorConfig, feat_h: usize, feat_w: usize) -> Vec<BBox> {
    let s = cfg.stride as f64;
    let mut out = Vec::with_capacity(feat_h * feat_w * cfg.per_cell());
    for &size in &cfg.sizes {
        for &ratio in &cfg.ratios {
            let (w, h) = (size * ratio.sqrt(), size / ratio.sqrt());
            for row in 0..feat_h {
                for col in 0..feat_w {
                    let (cx, cy) = ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s);
                    out.push(BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0));
                }
            }
        }
    }
    out
}

// Largest log-scale accepted when decoding widths and heights.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Center/size regression target of `gt` relative to `anchor`.
pub fn encode_box(gt: &BBox, anchor: &BBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    [
        (gx - ax) / anchor.width(),
        (gy - ay) / anchor.height(),
        (gt.width() / anchor.width()).ln(),
        (gt.height() / anchor.height()).ln(),
    ]
}

pub fn decode_box(deltas: [f64; 4], anchor: &BBox) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + deltas[0] * aw;
    let cy = ay + deltas[1] * ah;
    let w = aw * deltas[2].min(MAX_LOG_SCALE).exp();
    let h = ah * deltas[3].min(MAX_LOG_SCALE).exp();
    BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub encoder: EncoderConfig,
    pub anchors: AnchorConfig,
    pub image_height: usize,
    pub image_width: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), anchors: AnchorConfig::default(), image_height: 128, image_width: 128 }
    }
}

impl DetectorConfig {
    pub fn feature_size(&self) -> (usize, usize) {
        let s = self.encoder.stride();
        (self.image_height / s, self.image_width / s)
    }

    pub fn anchors(&self) -> Vec<BBox> {
        let (h, w) = self.feature_size();
        generate_anchors(&self.anchors, h, w)
    }
}

/// Bias of the classification layer giving every anchor an initial lesion
/// probability of 1%.
pub fn prior_bias() -> f64 {
    -((1.0 - 0.01f64) / 0.01).ln()
}

/// Encoder, head and the student-side projection, all as named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub cfg: DetectorConfig,
    pub params: ParamStore,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    /// `[N, D, H/s, W/s]` feature map.
    pub features: Var,
    /// `[N, A, H/s, W/s]` classification logits.
    pub cls: Var,
    /// `[N, 4A, H/s, W/s]` box deltas; anchor type `a` owns channels `4a..4a+4`.
    pub reg: Var,
}

fn conv_weight<R: Rng>(rng: &mut R, out_c: usize, in_c: usize, k: usize, std: f64) -> DenseArray {
    DenseArray::from_fn(&[out_c, in_c, k, k], |_| std * rng.sample::<f64, _>(StandardNormal))
}

impl Network {
    pub fn new(cfg: DetectorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let k = cfg.encoder.kernel;
        let mut in_c = cfg.encoder.in_channels;
        for (i, &c) in cfg.encoder.stage_channels.iter().enumerate() {
            let std = (2.0 / (in_c * k * k) as f64).sqrt();
            params.push(format!("enc{i}.w"), conv_weight(&mut rng, c, in_c, k, std));
            params.push(format!("enc{i}.b"), DenseArray::zeros(&[c]));
            in_c = c;
        }
        let d = cfg.encoder.channels();
        let a = cfg.anchors.per_cell();
        params.push("head.w", conv_weight(&mut rng, d, d, 3, (2.0 / (d * 9) as f64).sqrt()));
        params.push("head.b", DenseArray::zeros(&[d]));
        params.push("cls.w", conv_weight(&mut rng, a, d, 3, 0.01));
        params.push("cls.b", DenseArray::filled(&[a], prior_bias()));
        params.push("reg.w", conv_weight(&mut rng, 4 * a, d, 3, 0.01));
        params.push("reg.b", DenseArray::zeros(&[4 * a]));
        let (pw, pb) = identity_projection(d);
        params.push("proj.w", pw);
        params.push("proj.b", pb);
        Self { cfg, params }
    }

    fn stages(&self) -> usize {
        self.cfg.encoder.stage_channels.len()
    }

    /// Projection handles among the bound parameter vars.
    pub fn projection(&self, vars: &[Var]) -> Projection {
        let n = vars.len();
        Projection { weight: vars[n - 2], bias: vars[n - 1] }
    }

    /// Stacks `[1, H, W]` images into an `[N, 1, H, W]` batch.
    pub fn batch_images(&self, images: &[&DenseArray]) -> Result<DenseArray> {
        let (h, w) = (self.cfg.image_height, self.cfg.image_width);
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if img.len() != h * w {
                return Err(Error::Shape(format!("expected {h}x{w} image, got {:?}", img.shape())));
            }
            data.extend_from_slice(img.data());
        }
        DenseArray::new(vec![images.len(), 1, h, w], data)
    }

    /// Encoder only: `[N, C, H, W]` → `[N, D, H/s, W/s]`.
    pub fn encode(&self, graph: &mut Graph, vars: &[Var], images: Var) -> Result<Var> {
        let shape = graph.value(images).shape().to_vec();
        let s = self.cfg.encoder.stride();
        if shape.len() != 4 || shape[2] % s != 0 || shape[3] % s != 0 {
            return Err(Error::Shape(format!("encode: input {shape:?} must be [N, C, H, W] with H, W divisible by {s}")));
        }
        let pad = (self.cfg.encoder.kernel - 1) / 2;
        let mut x = images;
        for i in 0..self.stages() {
            x = graph.conv2d(x, vars[2 * i], 2, pad)?;
            x = graph.add_broadcast(x, vars[2 * i + 1], 1)?;
            x = graph.relu(x);
        }
        Ok(x)
    }

    pub fn forward(&self, graph: &mut Graph, vars: &[Var], images: Var) -> Result<ForwardOut> {
        let features = self.encode(graph, vars, images)?;
        let base = 2 * self.stages();
        let h = graph.conv2d(features, vars[base], 1, 1)?;
        let h = graph.add_broadcast(h, vars[base + 1], 1)?;
        let h = graph.relu(h);
        let cls = graph.conv2d(h, vars[base + 2], 1, 1)?;
        let cls = graph.add_broadcast(cls, vars[base + 3], 1)?;
        let reg = graph.conv2d(h, vars[base + 4], 1, 1)?;
        let reg = graph.add_broadcast(reg, vars[base + 5], 1)?;
        Ok(ForwardOut { features, cls, reg })
    }

    /// Feature map of a single `[1, H, W]` image, outside any training graph.
    pub fn encode_image(&self, image: &DenseArray) -> Result<DenseArray> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(self.batch_images(&[image])?);
        let f = self.encode(&mut g, &vars, x)?;
        let shape = g.value(f).shape()[1..].to_vec();
        g.value(f).reshaped(&shape)
    }

    /// Detections for each `[1, H, W]` image, evaluated in chunks.
    pub fn detect(&self, images: &[&DenseArray], post: &PostProcess) -> Result<Vec<Vec<Detection>>> {
        const CHUNK: usize = 16;
        let anchors = self.cfg.anchors();
        let (fh, fw) = self.cfg.feature_size();
        let grid_cells = fh * fw;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let mut g = Graph::new();
            let vars = self.params.bind(&mut g, false);
            let x = g.constant(self.batch_images(chunk)?);
            let fw = self.forward(&mut g, &vars, x)?;
            let (cls, reg) = (g.value(fw.cls), g.value(fw.reg));
            let (per_cls, per_reg) = (cls.len() / chunk.len(), reg.len() / chunk.len());
            for i in 0..chunk.len() {
                out.push(decode_and_nms(
                    &cls.data()[i * per_cls..(i + 1) * per_cls],
                    &reg.data()[i * per_reg..(i + 1) * per_reg],
                    &anchors,
                    grid_cells,
                    self.cfg.image_width as f64,
                    self.cfg.image_height as f64,
                    post,
                ));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetLossConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub smooth_l1_beta: f64,
    /// Also mark each ground-truth box's best anchors positive.
    pub low_quality_matches: bool,
}

impl Default for DetLossConfig {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 0.25, pos_iou: 0.5, neg_iou: 0.4, smooth_l1_beta: 1.0 / 9.0, low_quality_matches: true }
    }
}

/// Per-anchor assignment for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    Negative,
    Ignored,
    Positive(usize),
}

pub fn match_anchors(anchors: &[BBox], gt: &[BBox], cfg: &DetLossConfig) -> Vec<Assignment> {
    let mut out = vec![Assignment::Negative; anchors.len()];
    if gt.is_empty() {
        return out;
    }
    let mut best_per_gt = vec![0.0f64; gt.len()];
    let ious: Vec<(usize, f64)> = anchors
        .iter()
        .map(|a| {
            let mut best = (0, -1.0);
            for (g, b) in gt.iter().enumerate() {
                let iou = a.iou(b);
                best_per_gt[g] = best_per_gt[g].max(iou);
                if iou > best.1 {
                    best = (g, iou);
                }
            }
            best
        })
        .collect();
    for (slot, &(g, iou)) in out.iter_mut().zip(&ious) {
        *slot = if iou >= cfg.pos_iou {
            Assignment::Positive(g)
        } else if iou < cfg.neg_iou {
            Assignment::Negative
        } else {
            Assignment::Ignored
        };
    }
    if cfg.low_quality_matches {
        for (j, a) in anchors.iter().enumerate() {
            for (g, b) in gt.iter().enumerate() {
                if best_per_gt[g] > 0.0 && a.iou(b) == best_per_gt[g] {
                    out[j] = Assignment::Positive(g);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct DetectionLoss {
    pub total: Var,
    pub cls: Var,
    pub reg: Var,
    pub positives: usize,
    /// Images that had ground truth but no positive anchor.
    pub unmatched_images: usize,
}

/// Focal classification loss plus smooth-L1 regression on positive anchors,
/// both normalized by the number of positive anchors in the batch.
pub fn detection_loss(
    graph: &mut Graph,
    cls: Var,
    reg: Var,
    anchors: &[BBox],
    gt: &[Vec<BBox>],
    cfg: &DetLossConfig,
) -> Result<DetectionLoss> {
    let cls_shape = graph.value(cls).shape().to_vec();
    let reg_shape = graph.value(reg).shape().to_vec();
    let n = cls_shape[0];
    let per_image = graph.value(cls).len() / n;
    if per_image != anchors.len() || gt.len() != n || graph.value(reg).len() != 4 * n * per_image {
        return Err(Error::Shape(format!(
            "detection_loss: logits {cls_shape:?}, deltas {reg_shape:?}, {} anchors and {} targets disagree",
            anchors.len(),
            gt.len()
        )));
    }
    let hw = cls_shape[2] * cls_shape[3];
    let mut labels = vec![0.0; n * per_image];
    let mut weights = vec![0.0; n * per_image];
    let mut reg_target = vec![0.0; 4 * n * per_image];
    let mut reg_mask = vec![0.0; 4 * n * per_image];
    let (mut positives, mut unmatched) = (0usize, 0usize);
    for (i, boxes) in gt.iter().enumerate() {
        let assign = match_anchors(anchors, boxes, cfg);
        let mut image_pos = 0;
        for (j, a) in assign.iter().enumerate() {
            let k = i * per_image + j;
            match *a {
                Assignment::Negative => weights[k] = 1.0,
                Assignment::Ignored => {}
                Assignment::Positive(g) => {
                    weights[k] = 1.0;
                    labels[k] = 1.0;
                    image_pos += 1;
                    let deltas = encode_box(&boxes[g], &anchors[j]);
                    let (t, cell) = (j / hw, j % hw);
                    for (c, d) in deltas.iter().enumerate() {
                        let r = i * 4 * per_image + (4 * t + c) * hw + cell;
                        reg_target[r] = *d;
                        reg_mask[r] = 1.0;
                    }
                }
            }
        }
        if !boxes.is_empty() && image_pos == 0 {
            unmatched += 1;
        }
        positives += image_pos;
    }
    let norm = positives.max(1) as f64;

    let y = DenseArray::from_parts(cls_shape.clone(), labels);
    let alpha_w = DenseArray::from_fn(&cls_shape, |k| {
        let a = if y.data()[k] > 0.5 { cfg.alpha } else { 1.0 - cfg.alpha };
        -a * weights[k] / norm
    });
    let one_minus_y = y.map(|v| 1.0 - v);
    let y = graph.constant(y);
    let ny = graph.constant(one_minus_y);
    let aw = graph.constant(alpha_w);
    let log_p = graph.log_sigmoid(cls);
    let neg_cls = graph.scale(cls, -1.0);
    let log_q = graph.log_sigmoid(neg_cls);
    let a = graph.mul(y, log_p)?;
    let b = graph.mul(ny, log_q)?;
    let log_pt = graph.add(a, b)?;
    let pt = graph.exp(log_pt);
    let one_minus_pt = graph.one_minus(pt);
    let modulator = graph.pow_const(one_minus_pt, cfg.gamma);
    let focal = graph.mul(modulator, log_pt)?;
    let focal = graph.mul(aw, focal)?;
    let cls_loss = graph.sum_all(focal);

    let target = graph.constant(DenseArray::from_parts(reg_shape.clone(), reg_target));
    let mask = graph.constant(DenseArray::from_parts(reg_shape, reg_mask.iter().map(|m| m / norm).collect()));
    let diff = graph.sub(reg, target)?;
    let sl1 = graph.smooth_l1(diff, cfg.smooth_l1_beta);
    let masked = graph.mul(mask, sl1)?;
    let reg_loss = graph.sum_all(masked);

    let total = graph.add(cls_loss, reg_loss)?;
    Ok(DetectionLoss { total, cls: cls_loss, reg: reg_loss, positives, unmatched_images: unmatched })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub slice_index: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostProcess {
    pub score_thresh: f64,
    pub iou_thresh: f64,
    pub max_dets: usize,
    pub pre_nms_top_k: usize,
}

impl Default for PostProcess {
    fn default() -> Self {
        Self { score_thresh: 0.05, iou_thresh: 0.5, max_dets: 20, pre_nms_top_k: 500 }
    }
}

/// Greedy suppression over candidates already sorted by descending score.
fn greedy_suppress(sorted: &[Detection], iou_thresh: f64, max_dets: usize) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept.len() >= max_dets {
            break;
        }
        if kept.iter().all(|k| k.bbox.iou(&d.bbox) < iou_thresh) {
            kept.push(*d);
        }
    }
    kept
}

/// Greedy NMS by descending score; equal scores keep input order.
pub fn nms(detections: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut sorted = detections.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    greedy_suppress(&sorted, iou_thresh, usize::MAX)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decodes one image's head outputs (laid out as in [`ForwardOut`], with
/// `grid_cells` feature cells per anchor type) into scored boxes and applies
/// NMS. Equal scores are ordered by anchor index.
pub fn decode_and_nms(
    cls: &[f64],
    reg: &[f64],
    anchors: &[BBox],
    grid_cells: usize,
    image_w: f64,
    image_h: f64,
    post: &PostProcess,
) -> Vec<Detection> {
    let n = anchors.len();
    assert_eq!(cls.len(), n);
    assert_eq!(reg.len(), 4 * n);
    assert_eq!(n % grid_cells, 0);
    let mut cand: Vec<(usize, f64)> = cls
        .iter()
        .enumerate()
        .map(|(j, &logit)| (j, sigmoid(logit)))
        .filter(|&(_, s)| s >= post.score_thresh)
        .collect();
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cand.truncate(post.pre_nms_top_k);
    let dets: Vec<Detection> = cand
        .into_iter()
        .filter_map(|(j, score)| {
            let (t, cell) = (j / grid_cells, j % grid_cells);
            let d = [0, 1, 2, 3].map(|c| reg[(4 * t + c) * grid_cells + cell]);
            let bbox = decode_box(d, &anchors[j]).clamp_to(image_w, image_h);
            bbox.is_proper().then_some(Detection { bbox, score, slice_index: None })
        })
        .collect();
    greedy_suppress(&dets, post.iou_thresh, post.max_dets)
}
