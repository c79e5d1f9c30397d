//! Two-phase training: a teacher on modality `M` with the alignment loss,
//! then a student on modality `T` distilled from the frozen teacher.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::codec::{read_blob, write_blob, Precision};
use crate::data::{augment_flip, central_slice_batch, default_ratios, make_splits, plane_image, Dataset, Modality, Sample, SliceImage, SplitManifest};
use crate::detector::{detection_loss, DetLossConfig, DetectorConfig, Network, PostProcess};
use crate::error::{Error, Result};
use crate::eval::{evaluate, mean_average_precision, predict_cases};
use crate::geometry::{critical_points, gather_cells, gather_critical, sample_noncritical, scale_box, BBox, NUM_CRITICAL};
use crate::losses::{impa_loss, lesion_prototype, lskd_loss, mean_of, soften, PointMask};
use crate::optim::{sgd_step, StepSchedule};
use crate::tensor::DenseArray;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Teacher,
    StudentBaseline,
    StudentImageKd,
    StudentComoto,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Teacher, Mode::StudentBaseline, Mode::StudentImageKd, Mode::StudentComoto];

    pub fn is_student(self) -> bool {
        self != Mode::Teacher
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Teacher => "teacher",
            Mode::StudentBaseline => "student-baseline",
            Mode::StudentImageKd => "student-imagekd",
            Mode::StudentComoto => "student-comoto",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_drop_epoch: usize,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub seed: u64,
    pub subsample_ratio: f64,
    pub point_mask: PointMask,
    pub mode: Mode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            batch_size: 8,
            epochs: 50,
            lr_drop_epoch: 30,
            alpha: 2.0,
            beta: 2.0,
            tau: 4.0,
            seed: 0,
            subsample_ratio: 1.0,
            point_mask: PointMask::ALL,
            mode: Mode::Teacher,
        }
    }
}

const CONFIG_KEYS: [&str; 12] = [
    "lr",
    "momentum",
    "batch_size",
    "epochs",
    "lr_drop_epoch",
    "alpha",
    "beta",
    "tau",
    "seed",
    "subsample_ratio",
    "point_mask",
    "mode",
];

impl TrainConfig {
    /// Parses flat `key = value` lines over the defaults. Blank lines and
    /// `#` comments are skipped; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            if !CONFIG_KEYS.contains(&key) {
                return Err(Error::Config(format!("line {}: unknown key {key:?}", n + 1)));
            }
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            seen.push(key);
            cfg.set(key, value).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "lr" => self.lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "lr_drop_epoch" => self.lr_drop_epoch = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "subsample_ratio" => self.subsample_ratio = num(key, value)?,
            "point_mask" => self.point_mask = value.parse().map_err(|e: Error| Error::Config(format!("point_mask: {e}")))?,
            "mode" => self.mode = value.parse()?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if self.epochs < self.lr_drop_epoch {
            return bad(format!("epochs ({}) must be at least lr_drop_epoch ({})", self.epochs, self.lr_drop_epoch));
        }
        if !(self.tau > 0.0) || !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return bad("tau must be positive and alpha, beta non-negative".into());
        }
        if !(self.subsample_ratio > 0.0 && self.subsample_ratio <= 1.0) {
            return bad(format!("subsample_ratio must lie in (0, 1], got {}", self.subsample_ratio));
        }
        Ok(())
    }

    /// Canonical `key = value` text; parsing it yields the same config.
    pub fn to_text(&self) -> String {
        format!(
            "lr = {}\nmomentum = {}\nbatch_size = {}\nepochs = {}\nlr_drop_epoch = {}\nalpha = {}\nbeta = {}\ntau = {}\nseed = {}\nsubsample_ratio = {}\npoint_mask = {}\nmode = {}\n",
            self.lr,
            self.momentum,
            self.batch_size,
            self.epochs,
            self.lr_drop_epoch,
            self.alpha,
            self.beta,
            self.tau,
            self.seed,
            self.subsample_ratio,
            self.point_mask,
            self.mode
        )
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn schedule(&self) -> StepSchedule {
        StepSchedule { base: self.lr, drop_epoch: self.lr_drop_epoch }
    }

    /// Weight on the auxiliary loss: beta for the teacher, alpha for
    /// distilling students, zero for the baseline.
    pub fn aux_weight(&self) -> f64 {
        match self.mode {
            Mode::Teacher => self.beta,
            Mode::StudentBaseline => 0.0,
            Mode::StudentImageKd | Mode::StudentComoto => self.alpha,
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Split manifests of both modalities, stored next to the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    #[serde(rename = "M")]
    pub m: SplitManifest,
    #[serde(rename = "T")]
    pub t: SplitManifest,
}

impl Splits {
    pub const FILE: &'static str = "splits.json";

    pub fn make(dataset: &Dataset, ratios: Option<[f64; 3]>, subsample_ratio: f64, seed: u64) -> Result<Self> {
        let split = |m: Modality| make_splits(&dataset.ids(m), ratios.unwrap_or(default_ratios(m)), subsample_ratio, seed);
        Ok(Self { m: split(Modality::M)?, t: split(Modality::T)? })
    }

    pub fn get(&self, modality: Modality) -> &SplitManifest {
        match modality {
            Modality::M => &self.m,
            Modality::T => &self.t,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("splits serialize");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Leading `ratio` share of the full shuffled training order.
pub fn training_ids(manifest: &SplitManifest, ratio: f64) -> Result<Vec<String>> {
    let full: Vec<String> = manifest.train.iter().chain(&manifest.train_unused).cloned().collect();
    let keep = ((full.len() as f64) * ratio).round() as usize;
    if keep == 0 {
        return Err(Error::Data(format!("subsample ratio {ratio} of {} training ids leaves none", full.len())));
    }
    Ok(full[..keep].to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub mode: Mode,
    pub epoch: usize,
    pub val_map: f64,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    mode: Mode,
    epoch: usize,
    val_map: f64,
    config_hash: String,
    params: usize,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CMCK";

impl Checkpoint {
    /// `CMCK`, `u32` header length, JSON header, then per parameter a
    /// `u32`-prefixed name and an `f64` array blob.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            mode: self.mode,
            epoch: self.epoch,
            val_map: self.val_map,
            config_hash: self.config_hash.clone(),
            params: self.network.params.len(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for p in self.network.params.params() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            write_blob(&mut out, Precision::F64, p.value.shape(), p.value.data()).expect("in-memory write");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut input = bytes;
        let trunc = |e: std::io::Error| Error::Data(format!("truncated checkpoint: {e}"));
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(trunc)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Data("not a checkpoint file".into()));
        }
        let read_len = |input: &mut &[u8]| -> Result<usize> {
            let mut b = [0u8; 4];
            input.read_exact(&mut b).map_err(trunc)?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let hlen = read_len(&mut input)?;
        if input.len() < hlen {
            return Err(Error::Data("truncated checkpoint header".into()));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&input[..hlen]).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
        input = &input[hlen..];
        let mut network = Network::new(DetectorConfig::default(), 0);
        if header.params != network.params.len() {
            return Err(Error::Data(format!("checkpoint has {} parameters, expected {}", header.params, network.params.len())));
        }
        for i in 0..header.params {
            let nlen = read_len(&mut input)?;
            if input.len() < nlen {
                return Err(Error::Data("truncated parameter name".into()));
            }
            let name = String::from_utf8(input[..nlen].to_vec()).map_err(|_| Error::Data("parameter name is not UTF-8".into()))?;
            input = &input[nlen..];
            let (_, dims, data) = read_blob(&mut input)?;
            let p = &mut network.params.params_mut()[i];
            if p.name != name || p.value.shape() != dims.as_slice() {
                return Err(Error::Data(format!(
                    "checkpoint parameter {name} {dims:?} does not match expected {} {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = DenseArray::new(dims, data)?;
        }
        if !input.is_empty() {
            return Err(Error::Data(format!("{} trailing bytes after checkpoint", input.len())));
        }
        Ok(Self { network, mode: header.mode, epoch: header.epoch, val_map: header.val_map, config_hash: header.config_hash })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }
}

/// SHA-256 over every parameter's name and value bytes.
pub fn parameter_hash(net: &Network) -> String {
    let mut h = Sha256::new();
    for p in net.params.params() {
        h.update(p.name.as_bytes());
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub l_det: f64,
    pub l_aux: f64,
    pub weight: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub val_map: f64,
    /// Alignment loss on a fixed validation batch (teacher runs only).
    pub probe_impa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Best validation-mAP checkpoint; ties keep the earlier epoch.
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Set when training stopped on a non-finite loss or gradient.
    pub aborted: Option<String>,
    /// Images with lesions whose boxes matched no anchor.
    pub unmatched_images: usize,
}

impl TrainOutcome {
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,lr,mean_loss,val_map,probe_impa\n");
        for e in &self.epochs {
            let probe = e.probe_impa.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.lr, e.mean_loss, e.val_map, probe));
        }
        out
    }

    pub fn steps_csv(&self) -> String {
        let mut out = String::from("epoch,step,lr,l_det,l_aux,weight,total\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{},{},{},{},{}\n", s.epoch, s.step, s.lr, s.l_det, s.l_aux, s.weight, s.total));
        }
        out
    }
}

/// Per-lesion critical feature matrices of every image in a batch.
fn critical_batch(graph: &mut Graph, features: Var, boxes: &[Vec<BBox>], stride: usize) -> Result<Vec<Vec<Var>>> {
    let shape = graph.value(features).shape().to_vec();
    let (fh, fw) = (shape[2], shape[3]);
    boxes
        .iter()
        .enumerate()
        .map(|(i, bs)| {
            bs.iter()
                .map(|b| gather_critical(graph, features, i, &critical_points(&scale_box(b, stride, fh, fw))))
                .collect()
        })
        .collect()
}

/// Alignment loss of a batch: per-image lesion features against
/// `NUM_CRITICAL` background cells sampled away from every box.
fn impa_for_batch(graph: &mut Graph, features: Var, boxes: &[Vec<BBox>], stride: usize, rng: &mut ChaCha8Rng) -> Result<Option<Var>> {
    let shape = graph.value(features).shape().to_vec();
    let (fh, fw) = (shape[2], shape[3]);
    let crit = critical_batch(graph, features, boxes, stride)?;
    let (mut fc, mut fnc) = (Vec::new(), Vec::new());
    for (i, lesions) in crit.iter().enumerate() {
        if lesions.is_empty() {
            continue;
        }
        fc.push(mean_of(graph, lesions)?);
        let scaled: Vec<BBox> = boxes[i].iter().map(|b| scale_box(b, stride, fh, fw)).collect();
        let cells = sample_noncritical(fh, fw, &scaled, NUM_CRITICAL, rng)?;
        fnc.push(gather_cells(graph, features, i, &cells)?);
    }
    if fc.is_empty() {
        return Ok(None);
    }
    Ok(Some(impa_loss(graph, &fc, &fnc)?.total))
}

/// Softened `D × 9` lesion prototype of a batch, or `D × 1` for the
/// global-average variant.
fn batch_prototype(
    graph: &mut Graph,
    features: Var,
    boxes: &[Vec<BBox>],
    stride: usize,
    image_level: bool,
    tau: f64,
    projection: Option<crate::losses::Projection>,
) -> Result<Option<Var>> {
    let proto = if image_level {
        let pooled = graph.mean(features, &[2, 3])?;
        let mean = graph.mean(pooled, &[0])?;
        let d = graph.value(mean).len();
        graph.reshape(mean, &[d, 1])?
    } else {
        let crit: Vec<Vec<Var>> = critical_batch(graph, features, boxes, stride)?.into_iter().filter(|l| !l.is_empty()).collect();
        if crit.is_empty() {
            return Ok(None);
        }
        lesion_prototype(graph, &crit)?
    };
    Ok(Some(soften(graph, proto, tau, projection)?))
}

/// Teacher-side softened prototype, computed without gradients.
fn teacher_prototype(teacher: &Network, batch: &[&SliceImage], image_level: bool, tau: f64) -> Result<Option<DenseArray>> {
    let mut g = Graph::new();
    let vars = teacher.params.bind(&mut g, false);
    let images: Vec<&DenseArray> = batch.iter().map(|s| &s.image).collect();
    let x = g.constant(teacher.batch_images(&images)?);
    let f = teacher.encode(&mut g, &vars, x)?;
    let boxes: Vec<Vec<BBox>> = batch.iter().map(|s| s.boxes.clone()).collect();
    let proto = batch_prototype(&mut g, f, &boxes, teacher.cfg.encoder.stride(), image_level, tau, None)?;
    Ok(proto.map(|p| g.value(p).clone()))
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Everything a training run needs besides its config.
struct RunInputs<'a> {
    train: Vec<SliceImage>,
    val: Vec<&'a Sample>,
    teacher: Option<&'a Network>,
    /// Starting weights; a fresh seeded network when absent.
    init: Option<&'a Network>,
    /// Modality-M images feeding the teacher prototype.
    teacher_pool: Vec<SliceImage>,
    probe: Vec<SliceImage>,
}


fn nonfinite(what: &str, epoch: usize, step: usize) -> String {
    format!("non-finite {what} at epoch {epoch}, step {step}")
}

fn run(cfg: &TrainConfig, inputs: RunInputs<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if inputs.train.is_empty() {
        return Err(Error::Data("no training images".into()));
    }
    let mut net = match inputs.init {
        Some(init) => init.clone(),
        None => Network::new(DetectorConfig::default(), cfg.seed),
    };
    net.params.clear_state();
    let stride = net.cfg.encoder.stride();
    let anchors = net.cfg.anchors();
    let weight = cfg.aux_weight();
    let image_level = cfg.mode == Mode::StudentImageKd;
    let distill = matches!(cfg.mode, Mode::StudentImageKd | Mode::StudentComoto);
    let mask: Vec<bool> = if image_level { vec![true] } else { cfg.point_mask.as_array().to_vec() };
    let (mut order_rng, mut flip_rng, mut pool_rng, mut bg_rng) =
        (stream(cfg.seed, 1), stream(cfg.seed, 2), stream(cfg.seed, 3), stream(cfg.seed, 4));
    let post = PostProcess::default();

    let mut best: Option<Checkpoint> = None;
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut unmatched_images = 0;
    let mut aborted = None;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..inputs.train.len()).collect();

    'epochs: for epoch in 1..=cfg.epochs {
        let lr = cfg.schedule().lr_at(epoch);
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let (imgs, boxes): (Vec<DenseArray>, Vec<Vec<BBox>>) = chunk
                .iter()
                .map(|&i| augment_flip(&inputs.train[i].image, &inputs.train[i].boxes, &mut flip_rng))
                .unzip();
            let teacher_proto = match (distill, inputs.teacher) {
                (true, Some(teacher)) => {
                    let n = cfg.batch_size.min(inputs.teacher_pool.len());
                    let picks = rand::seq::index::sample(&mut pool_rng, inputs.teacher_pool.len(), n);
                    let batch: Vec<&SliceImage> = picks.into_iter().map(|i| &inputs.teacher_pool[i]).collect();
                    teacher_prototype(teacher, &batch, image_level, cfg.tau)?
                }
                _ => None,
            };

            let mut g = Graph::new();
            let vars = net.params.bind(&mut g, true);
            let refs: Vec<&DenseArray> = imgs.iter().collect();
            let x = g.constant(net.batch_images(&refs)?);
            let out = net.forward(&mut g, &vars, x)?;
            let det = detection_loss(&mut g, out.cls, out.reg, &anchors, &boxes, &DetLossConfig::default())?;
            unmatched_images += det.unmatched_images;
            let aux = match cfg.mode {
                Mode::Teacher if weight > 0.0 => impa_for_batch(&mut g, out.features, &boxes, stride, &mut bg_rng)?,
                Mode::StudentImageKd | Mode::StudentComoto => match teacher_proto {
                    Some(t) => {
                        let projection = Some(net.projection(&vars));
                        match batch_prototype(&mut g, out.features, &boxes, stride, image_level, cfg.tau, projection)? {
                            Some(s) => {
                                let t = g.constant(t);
                                Some(lskd_loss(&mut g, t, s, &mask)?)
                            }
                            None => None,
                        }
                    }
                    None => None,
                },
                _ => None,
            };
            let total = match aux {
                Some(a) => crate::losses::weighted_sum(&mut g, det.total, a, weight)?,
                None => det.total,
            };
            let record = StepRecord {
                epoch,
                step,
                lr,
                l_det: g.value(det.total).item(),
                l_aux: aux.map_or(0.0, |a| g.value(a).item()),
                weight,
                total: g.value(total).item(),
            };
            steps.push(record);
            if !record.total.is_finite() {
                aborted = Some(nonfinite("loss", epoch, step));
                break 'epochs;
            }
            g.backward(total)?;
            net.params.accumulate_grads(&g, &vars);
            if let Err(e) = sgd_step(net.params.params_mut(), lr, cfg.momentum) {
                aborted = Some(format!("{e} at epoch {epoch}, step {step}"));
                break 'epochs;
            }
            loss_sum += record.total;
            batches += 1;
        }

        let val_cases = predict_cases(&net, &inputs.val, &post)?;
        let val_map = mean_average_precision(&val_cases, 0.5)?;
        let probe_impa = if cfg.mode == Mode::Teacher && !inputs.probe.is_empty() {
            Some(probe_impa(&net, &inputs.probe, cfg.seed)?)
        } else {
            None
        };
        epochs.push(EpochRecord { epoch, lr, mean_loss: loss_sum / batches as f64, val_map, probe_impa });
        if best.as_ref().is_none_or(|b| val_map > b.val_map) {
            let mut network = net.clone();
            network.params.clear_state();
            best = Some(Checkpoint { network, mode: cfg.mode, epoch, val_map, config_hash: cfg.hash() });
        }
    }
    net.params.clear_state();
    let checkpoint = best.unwrap_or_else(|| Checkpoint { network: net, mode: cfg.mode, epoch: 0, val_map: 0.0, config_hash: cfg.hash() });
    Ok(TrainOutcome { checkpoint, steps, epochs, aborted, unmatched_images })
}

/// Alignment loss of `net` on a fixed batch with fixed background cells.
pub fn probe_impa(net: &Network, probe: &[SliceImage], seed: u64) -> Result<f64> {
    let mut g = Graph::new();
    let vars = net.params.bind(&mut g, false);
    let images: Vec<&DenseArray> = probe.iter().map(|s| &s.image).collect();
    let x = g.constant(net.batch_images(&images)?);
    let f = net.encode(&mut g, &vars, x)?;
    let boxes: Vec<Vec<BBox>> = probe.iter().map(|s| s.boxes.clone()).collect();
    let mut rng = stream(seed, 5);
    match impa_for_batch(&mut g, f, &boxes, net.cfg.encoder.stride(), &mut rng)? {
        Some(v) => Ok(g.value(v).item()),
        None => Err(Error::Data("probe batch has no lesions".into())),
    }
}

fn mode_error(cfg: &TrainConfig, expected: &str) -> Error {
    Error::Config(format!("mode {} cannot be used for {expected} training", cfg.mode))
}

pub fn train_teacher(cfg: &TrainConfig, dataset: &Dataset, splits: &Splits) -> Result<TrainOutcome> {
    if cfg.mode != Mode::Teacher {
        return Err(mode_error(cfg, "teacher"));
    }
    let train_ids = training_ids(&splits.m, cfg.subsample_ratio)?;
    let train = dataset.select(&train_ids)?.into_iter().map(plane_image).collect();
    let val = dataset.select(&splits.m.val)?;
    let probe = val.iter().take(8).map(|s| plane_image(s)).collect();
    run(cfg, RunInputs { train, val, teacher: None, init: None, teacher_pool: Vec::new(), probe })
}

/// Fine-tunes a copy of the teacher on central slices of modality `T`,
/// distilling from the frozen original when the mode asks for it.
pub fn train_student(cfg: &TrainConfig, dataset: &Dataset, splits: &Splits, teacher: &Checkpoint) -> Result<TrainOutcome> {
    if !cfg.mode.is_student() {
        return Err(mode_error(cfg, "student"));
    }
    let student_d = DetectorConfig::default().encoder.channels();
    let teacher_d = teacher.network.cfg.encoder.channels();
    if student_d != teacher_d {
        return Err(Error::Config(format!("teacher has {teacher_d} channels, student {student_d}")));
    }
    let train_ids = training_ids(&splits.t, cfg.subsample_ratio)?;
    let train = central_slice_batch(&dataset.select(&train_ids)?);
    let val = dataset.select(&splits.t.val)?;
    let teacher_pool = dataset.select(&splits.m.train)?.into_iter().map(plane_image).collect();
    run(cfg, RunInputs { train, val, teacher: Some(&teacher.network), init: Some(&teacher.network), teacher_pool, probe: Vec::new() })
}

/// Test-split evaluation of a checkpoint for the given modality.
pub fn evaluate_split(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    ids: &[String],
) -> Result<(crate::eval::Evaluation, Vec<crate::eval::CaseResult>)> {
    let samples = dataset.select(ids)?;
    let cases = predict_cases(&checkpoint.network, &samples, &PostProcess::default())?;
    Ok((evaluate(&cases)?, cases))
}
