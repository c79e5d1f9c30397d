//! Synthetic unpaired two-modality lesion data.
//!
//! Modality `M` samples are single 2-D images; modality `T` samples are
//! short slice stacks in which every lesion spans a few consecutive slices
//! with its peak on a central slice. Both share the same lesion model, an
//! isotropic Gaussian blob whose ground-truth box is its half-peak extent.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{read_blob, write_blob, Precision};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::DenseArray;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    M,
    T,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::M => "M",
            Modality::T => "T",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "M" | "m" => Ok(Modality::M),
            "T" | "t" => Ok(Modality::T),
            other => Err(Error::InvalidArgument(format!("unknown modality {other:?} (expected M or T)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub volume_slices: usize,
    pub lesions_min: usize,
    pub lesions_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub smoothing_min: f64,
    pub smoothing_max: f64,
    pub background_floor: f64,
    pub background_range: f64,
    pub gamma_t: f64,
    pub noise_sigma_t: f64,
    pub span_min: usize,
    pub span_max: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 128,
            volume_slices: 8,
            lesions_min: 1,
            lesions_max: 3,
            radius_min: 6.0,
            radius_max: 16.0,
            contrast_min: 0.3,
            contrast_max: 0.6,
            smoothing_min: 4.0,
            smoothing_max: 8.0,
            background_floor: 0.1,
            background_range: 0.3,
            gamma_t: 1.4,
            noise_sigma_t: 0.05,
            span_min: 3,
            span_max: 5,
            seed: 0,
        }
    }
}

/// One annotated lesion. Slice fields are set for modality `T` only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionBox {
    #[serde(flatten)]
    pub bbox: BBox,
    pub central_slice: Option<usize>,
    /// Inclusive range of slices on which the lesion is visible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slices: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub modality: Modality,
    /// `[1, H, W]` for modality `M`, `[S, H, W]` for modality `T`.
    pub pixels: DenseArray,
    pub boxes: Vec<LesionBox>,
}

impl Sample {
    pub fn slices(&self) -> usize {
        self.pixels.shape()[0]
    }

    /// Slice `s` as a `[1, H, W]` image.
    pub fn slice(&self, s: usize) -> DenseArray {
        let (h, w) = (self.pixels.shape()[1], self.pixels.shape()[2]);
        let data = self.pixels.data()[s * h * w..(s + 1) * h * w].to_vec();
        DenseArray::from_parts(vec![1, h, w], data)
    }

    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.boxes.iter().map(|b| b.bbox).collect()
    }
}

/// Parameters of a planted lesion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lesion {
    pub cx: f64,
    pub cy: f64,
    /// Half-peak radius in pixels.
    pub radius: f64,
    pub contrast: f64,
}

impl Lesion {
    pub fn sigma(&self) -> f64 {
        self.radius / (2.0 * std::f64::consts::LN_2).sqrt()
    }

    pub fn bbox(&self) -> BBox {
        BBox::new(self.cx - self.radius, self.cy - self.radius, self.cx + self.radius, self.cy + self.radius)
    }

    /// Contrast at the center of pixel `(row, col)`.
    pub fn value_at(&self, row: usize, col: usize) -> f64 {
        let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
        let d2 = (x - self.cx).powi(2) + (y - self.cy).powi(2);
        self.contrast * (-d2 / (2.0 * self.sigma().powi(2))).exp()
    }
}

/// This lesion alone rendered on an empty `size × size` canvas.
pub fn render_lesion(lesion: &Lesion, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            out[r * size + c] = lesion.value_at(r, c);
        }
    }
    out
}

/// Per-sample seed derived from the global seed and the sample id.
pub fn sample_seed(global: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with clamped borders.
fn blur(img: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |i: isize| i.clamp(0, size as isize - 1) as usize;
    let mut tmp = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = k.iter().enumerate().map(|(j, w)| w * img[y * size + clamp(x as isize + j as isize - r)]).sum();
        }
    }
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = k.iter().enumerate().map(|(j, w)| w * tmp[clamp(y as isize + j as isize - r) * size + x]).sum();
        }
    }
    out
}

/// Band-limited background: smoothed uniform noise rescaled into
/// `[floor, floor + range]`.
fn background<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Vec<f64> {
    let n = spec.image_size;
    let noise: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
    let sigma = rng.random_range(spec.smoothing_min..=spec.smoothing_max);
    let smooth = blur(&noise, n, sigma);
    let (lo, hi) = smooth.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    smooth.iter().map(|v| spec.background_floor + spec.background_range * (v - lo) / span).collect()
}

/// Non-overlapping lesions fully inside the image.
fn place_lesions<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Vec<Lesion> {
    let count = rng.random_range(spec.lesions_min..=spec.lesions_max);
    let size = spec.image_size as f64;
    let mut out: Vec<Lesion> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count && attempts < 1000 {
        attempts += 1;
        let radius = rng.random_range(spec.radius_min..=spec.radius_max);
        let margin = radius + 1.0;
        let cx = rng.random_range(margin..=size - margin);
        let cy = rng.random_range(margin..=size - margin);
        let contrast = rng.random_range(spec.contrast_min..=spec.contrast_max);
        let cand = Lesion { cx, cy, radius, contrast };
        let clear = out.iter().all(|l| {
            let gap = ((l.cx - cx).powi(2) + (l.cy - cy).powi(2)).sqrt();
            gap > 1.5 * (l.radius + radius)
        });
        if clear || out.is_empty() {
            out.push(cand);
        }
    }
    out
}

fn quantize(v: f64) -> f64 {
    v.clamp(0.0, 1.0) as f32 as f64
}

/// Generates one sample, returning it with the planted lesion parameters.
pub fn generate_sample(spec: &SyntheticSpec, modality: Modality, id: &str) -> (Sample, Vec<Lesion>) {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, id));
    let n = spec.image_size;
    let bg = background(spec, &mut rng);
    let lesions = place_lesions(spec, &mut rng);
    let layers: Vec<Vec<f64>> = lesions.iter().map(|l| render_lesion(l, n)).collect();
    match modality {
        Modality::M => {
            let pixels: Vec<f64> = (0..n * n)
                .map(|i| quantize(bg[i] + layers.iter().map(|l| l[i]).sum::<f64>()))
                .collect();
            let boxes = lesions
                .iter()
                .map(|l| LesionBox { bbox: l.bbox(), central_slice: None, slices: None })
                .collect();
            let sample = Sample { id: id.to_string(), modality, pixels: DenseArray::from_parts(vec![1, n, n], pixels), boxes };
            (sample, lesions)
        }
        Modality::T => {
            let s = spec.volume_slices;
            let mut spans = Vec::with_capacity(lesions.len());
            for _ in &lesions {
                let len = rng.random_range(spec.span_min..=spec.span_max.min(s));
                let before = (len - 1) / 2;
                let after = len - 1 - before;
                let center = rng.random_range(before..=s - 1 - after);
                spans.push((center, center - before, center + after));
            }
            let mut pixels = Vec::with_capacity(s * n * n);
            for z in 0..s {
                let factors: Vec<f64> = spans
                    .iter()
                    .map(|&(c, lo, hi)| {
                        if z < lo || z > hi {
                            0.0
                        } else {
                            let half = (c - lo).max(hi - c) as f64;
                            1.0 - (z as f64 - c as f64).abs() / (half + 1.0)
                        }
                    })
                    .collect();
                for i in 0..n * n {
                    let clean = bg[i] + layers.iter().zip(&factors).map(|(l, f)| f * l[i]).sum::<f64>();
                    let noise: f64 = rng.sample(StandardNormal);
                    pixels.push(quantize(clean.clamp(0.0, 1.0).powf(spec.gamma_t) + spec.noise_sigma_t * noise));
                }
            }
            let boxes = lesions
                .iter()
                .zip(&spans)
                .map(|(l, &(c, lo, hi))| LesionBox { bbox: l.bbox(), central_slice: Some(c), slices: Some((lo, hi)) })
                .collect();
            let sample = Sample { id: id.to_string(), modality, pixels: DenseArray::from_parts(vec![s, n, n], pixels), boxes };
            (sample, lesions)
        }
    }
}

pub fn sample_id(modality: Modality, index: usize) -> String {
    match modality {
        Modality::M => format!("m{index:04}"),
        Modality::T => format!("t{index:04}"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationLine {
    id: String,
    modality: Modality,
    boxes: Vec<LesionBox>,
}

const ANNOTATIONS: &str = "annotations.jsonl";
const SPEC_FILE: &str = "dataset.json";

pub fn generate_dataset(spec: &SyntheticSpec, count_m: usize, count_t: usize) -> Result<Dataset> {
    if count_m < 10 || count_t < 10 {
        return Err(Error::InvalidArgument(format!("need at least 10 samples per modality, got {count_m}/{count_t}")));
    }
    let mut samples = Vec::with_capacity(count_m + count_t);
    for (modality, count) in [(Modality::M, count_m), (Modality::T, count_t)] {
        for i in 0..count {
            samples.push(generate_sample(spec, modality, &sample_id(modality, i)).0);
        }
    }
    Ok(Dataset { spec: spec.clone(), samples })
}

impl Dataset {
    pub fn by_modality(&self, modality: Modality) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.modality == modality)
    }

    pub fn ids(&self, modality: Modality) -> Vec<String> {
        self.by_modality(modality).map(|s| s.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn select(&self, ids: &[String]) -> Result<Vec<&Sample>> {
        ids.iter()
            .map(|id| self.get(id).ok_or_else(|| Error::Data(format!("sample {id} not in dataset"))))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let samples_dir = dir.join("samples");
        fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
        let spec_path = dir.join(SPEC_FILE);
        let spec_json = serde_json::to_string_pretty(&self.spec).expect("spec serializes");
        fs::write(&spec_path, spec_json + "\n").map_err(|e| Error::io(&spec_path, e))?;
        let ann_path = dir.join(ANNOTATIONS);
        let mut ann = BufWriter::new(fs::File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?);
        for s in &self.samples {
            let line = AnnotationLine { id: s.id.clone(), modality: s.modality, boxes: s.boxes.clone() };
            writeln!(ann, "{}", serde_json::to_string(&line).expect("annotation serializes")).map_err(|e| Error::io(&ann_path, e))?;
            let path = samples_dir.join(format!("{}.cmt", s.id));
            let dims = match s.modality {
                Modality::M => s.pixels.shape()[1..].to_vec(),
                Modality::T => s.pixels.shape().to_vec(),
            };
            let mut buf = Vec::with_capacity(s.pixels.len() * 4 + 32);
            write_blob(&mut buf, Precision::F32, &dims, s.pixels.data()).expect("in-memory write");
            fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        }
        ann.flush().map_err(|e| Error::io(&ann_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec_path = dir.join(SPEC_FILE);
        let spec_text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        let spec: SyntheticSpec =
            serde_json::from_str(&spec_text).map_err(|e| Error::Data(format!("{}: {e}", spec_path.display())))?;
        let ann_path = dir.join(ANNOTATIONS);
        let file = fs::File::open(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
        let mut samples = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&ann_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let ann: AnnotationLine = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", ann_path.display(), n + 1)))?;
            let path = dir.join("samples").join(format!("{}.cmt", ann.id));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let (_, dims, data) = read_blob(&mut bytes.as_slice())?;
            let shape = match (ann.modality, dims.len()) {
                (Modality::M, 2) => vec![1, dims[0], dims[1]],
                (Modality::T, 3) => dims,
                (m, r) => return Err(Error::Data(format!("{}: rank {r} invalid for modality {m}", path.display()))),
            };
            let pixels = DenseArray::new(shape, data)?;
            validate_boxes(&ann.id, &pixels, &ann.boxes)?;
            samples.push(Sample { id: ann.id, modality: ann.modality, pixels, boxes: ann.boxes });
        }
        Ok(Self { spec, samples })
    }
}

fn validate_boxes(id: &str, pixels: &DenseArray, boxes: &[LesionBox]) -> Result<()> {
    let (s, h, w) = (pixels.shape()[0], pixels.shape()[1] as f64, pixels.shape()[2] as f64);
    for b in boxes {
        let inside = b.bbox.is_proper() && b.bbox.x_min >= 0.0 && b.bbox.y_min >= 0.0 && b.bbox.x_max <= w && b.bbox.y_max <= h;
        let slice_ok = b.central_slice.is_none_or(|c| c < s);
        if !inside || !slice_ok {
            return Err(Error::Data(format!("sample {id}: annotation {b:?} out of bounds")));
        }
    }
    Ok(())
}

/// Train/val/test partition of one modality's ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    /// Training ids left out by subsampling.
    pub train_unused: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub ratios: [f64; 3],
    pub subsample_ratio: f64,
    pub seed: u64,
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Default ratios: 60/20/20 for modality `M`, 50/20/30 for modality `T`.
pub fn default_ratios(modality: Modality) -> [f64; 3] {
    match modality {
        Modality::M => [0.6, 0.2, 0.2],
        Modality::T => [0.5, 0.2, 0.3],
    }
}

/// Seeded shuffle, partition by `ratios`, then keep the leading
/// `subsample_ratio` share of the training list.
pub fn make_splits(ids: &[String], ratios: [f64; 3], subsample_ratio: f64, seed: u64) -> Result<SplitManifest> {
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| r < 0.0) {
        return Err(Error::InvalidArgument(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    if !(subsample_ratio > 0.0 && subsample_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("subsample ratio {subsample_ratio} outside (0, 1]")));
    }
    let mut shuffled: Vec<String> = ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = shuffled.len();
    let n_train = ((n as f64) * ratios[0]).round() as usize;
    let n_val = (((n as f64) * ratios[1]).round() as usize).min(n - n_train);
    let test = shuffled.split_off(n_train + n_val);
    let val = shuffled.split_off(n_train);
    let mut train = shuffled;
    let keep = ((train.len() as f64) * subsample_ratio).round() as usize;
    let train_unused = train.split_off(keep.min(train.len()));
    if train.is_empty() {
        return Err(Error::Data(format!("split of {n} ids leaves an empty training set")));
    }
    Ok(SplitManifest { train, train_unused, val, test, ratios, subsample_ratio, seed })
}

/// A 2-D training image with its boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    pub source: String,
    pub slice: usize,
    /// `[1, H, W]`.
    pub image: DenseArray,
    pub boxes: Vec<BBox>,
}

/// The image of a modality-`M` sample.
pub fn plane_image(sample: &Sample) -> SliceImage {
    SliceImage { source: sample.id.clone(), slice: 0, image: sample.slice(0), boxes: sample.gt_boxes() }
}

/// One image per distinct lesion-central slice, carrying every lesion
/// visible on that slice.
pub fn central_slice_batch(samples: &[&Sample]) -> Vec<SliceImage> {
    let mut out = Vec::new();
    for s in samples.iter().filter(|s| s.modality == Modality::T) {
        let centrals: BTreeSet<usize> = s.boxes.iter().filter_map(|b| b.central_slice).collect();
        for z in centrals {
            let boxes = s
                .boxes
                .iter()
                .filter(|b| match (b.slices, b.central_slice) {
                    (Some((lo, hi)), _) => lo <= z && z <= hi,
                    (None, Some(c)) => c == z,
                    (None, None) => false,
                })
                .map(|b| b.bbox)
                .collect();
            out.push(SliceImage { source: s.id.clone(), slice: z, image: s.slice(z), boxes });
        }
    }
    out
}

/// Mirror a `[1, H, W]` image and its boxes left to right.
pub fn flip_horizontal(image: &DenseArray, boxes: &[BBox]) -> (DenseArray, Vec<BBox>) {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = image.clone();
    for ch in 0..c {
        for r in 0..h {
            let row = &mut out.data_mut()[(ch * h + r) * w..(ch * h + r + 1) * w];
            row.reverse();
        }
    }
    let flipped = boxes.iter().map(|b| b.flip_horizontal(w as f64)).collect();
    (out, flipped)
}

/// Flip with probability one half.
pub fn augment_flip<R: Rng + ?Sized>(image: &DenseArray, boxes: &[BBox], rng: &mut R) -> (DenseArray, Vec<BBox>) {
    if rng.random_bool(0.5) {
        flip_horizontal(image, boxes)
    } else {
        (image.clone(), boxes.to_vec())
    }
}
