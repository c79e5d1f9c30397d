//! Ablation grids over distillation components, loss weight, distilled
//! point sets and training-data share.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::PointMask;
use crate::train::{evaluate_split, hex, train_student, Checkpoint, Mode, Splits, TrainConfig};

/// Which teacher a cell distills from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TeacherKind {
    /// Trained with the alignment term switched off.
    Plain,
    /// Trained with the alignment term.
    Aligned,
}

impl TeacherKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TeacherKind::Plain => "plain",
            TeacherKind::Aligned => "aligned",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Study {
    Components,
    Alpha,
    PointMask,
    DataRatio,
}

impl Study {
    pub fn as_str(self) -> &'static str {
        match self {
            Study::Components => "components",
            Study::Alpha => "alpha",
            Study::PointMask => "point_mask",
            Study::DataRatio => "data_ratio",
        }
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Labels of the 2×2 component grid: alignment-trained teacher × lesion-level distillation.
pub const COMPONENT_CELLS: [(&str, Mode, TeacherKind); 4] = [
    ("align-off/lesion-off", Mode::StudentImageKd, TeacherKind::Plain),
    ("align-off/lesion-on", Mode::StudentComoto, TeacherKind::Plain),
    ("align-on/lesion-off", Mode::StudentImageKd, TeacherKind::Aligned),
    ("align-on/lesion-on", Mode::StudentComoto, TeacherKind::Aligned),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub study: Study,
    pub label: String,
    pub teacher: TeacherKind,
    pub config: TrainConfig,
}

/// The teacher each student mode is paired with outside the component grid.
pub fn default_teacher(mode: Mode) -> TeacherKind {
    match mode {
        Mode::StudentComoto => TeacherKind::Aligned,
        _ => TeacherKind::Plain,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    /// Settings shared by every cell; each axis overrides one field.
    pub base: TrainConfig,
    pub components: bool,
    pub alphas: Vec<f64>,
    pub point_masks: Vec<PointMask>,
    pub subsample_ratios: Vec<f64>,
    pub ratio_modes: Vec<Mode>,
    pub data: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
    pub plain_teacher: Option<PathBuf>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            base: TrainConfig { mode: Mode::StudentComoto, subsample_ratio: 0.1, ..TrainConfig::default() },
            components: false,
            alphas: Vec::new(),
            point_masks: Vec::new(),
            subsample_ratios: Vec::new(),
            ratio_modes: vec![Mode::StudentBaseline, Mode::StudentImageKd, Mode::StudentComoto],
            data: None,
            teacher: None,
            plain_teacher: None,
        }
    }
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}"))))
        .collect()
}

impl Grid {
    /// `key = value` lines. Axis keys take comma-separated lists; path keys
    /// resolve against `root`; every other key sets a field of the base config.
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut grid = Grid::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            match key {
                "components" => {
                    grid.components = value.parse().map_err(|_| Error::Config(format!("components: bad bool {value:?}")))?
                }
                "alpha_sweep" => grid.alphas = list(key, value)?,
                "mask_sweep" => grid.point_masks = list(key, value)?,
                "ratio_sweep" => grid.subsample_ratios = list(key, value)?,
                "ratio_modes" => grid.ratio_modes = list(key, value)?,
                "data" => grid.data = Some(root.join(value)),
                "teacher" => grid.teacher = Some(root.join(value)),
                "plain_teacher" => grid.plain_teacher = Some(root.join(value)),
                _ => grid.base.set(key, value)?,
            }
        }
        if grid.ratio_modes.iter().any(|m| !m.is_student()) {
            return Err(Error::Config("ratio_modes takes student modes only".into()));
        }
        grid.base.validate()?;
        Ok(grid)
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        let with = |study, label: String, teacher, edit: &dyn Fn(&mut TrainConfig)| {
            let mut config = self.base.clone();
            edit(&mut config);
            Cell { study, label, teacher, config }
        };
        if self.components {
            for (label, mode, teacher) in COMPONENT_CELLS {
                cells.push(with(Study::Components, label.into(), teacher, &|c| c.mode = mode));
            }
        }
        for &a in &self.alphas {
            cells.push(with(Study::Alpha, format!("alpha={a}"), TeacherKind::Aligned, &|c| {
                c.mode = Mode::StudentComoto;
                c.alpha = a;
            }));
        }
        for &m in &self.point_masks {
            cells.push(with(Study::PointMask, m.to_string(), TeacherKind::Aligned, &|c| {
                c.mode = Mode::StudentComoto;
                c.point_mask = m;
            }));
        }
        for &mode in &self.ratio_modes {
            for &r in &self.subsample_ratios {
                cells.push(with(Study::DataRatio, format!("{mode}@{r}"), default_teacher(mode), &|c| {
                    c.mode = mode;
                    c.subsample_ratio = r;
                }));
            }
        }
        cells
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub mean_sensitivity: f64,
    pub sensitivity_at_2fp: f64,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub study: Study,
    pub cell: String,
    pub mode: Mode,
    pub teacher: TeacherKind,
    pub alpha: f64,
    pub point_mask: PointMask,
    pub subsample_ratio: f64,
    pub seed: u64,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub study: Study,
    pub cell: String,
    pub runs: usize,
    /// (mean, std) of mean sensitivity, sensitivity at 2 FPs, mAP.
    pub stats: [(f64, f64); 3],
}

#[derive(Debug, Default)]
pub struct Report {
    pub rows: Vec<Row>,
    pub skipped: Vec<String>,
}

pub struct Inputs<'a> {
    pub dataset: &'a Dataset,
    pub splits: &'a Splits,
    pub teacher: Option<&'a Checkpoint>,
    pub plain_teacher: Option<&'a Checkpoint>,
}

#[derive(Serialize, Deserialize)]
struct CachedRun {
    key: String,
    /// `f64::to_bits` of mean sensitivity, sensitivity at 2 FPs, mAP.
    metrics: [u64; 3],
}

fn run_key(config: &TrainConfig, teacher: &Checkpoint, splits: &Splits, dataset: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update(config.to_text());
    h.update(teacher.hash());
    h.update(serde_json::to_vec(splits).expect("splits serialize"));
    h.update(serde_json::to_vec(&dataset.spec).expect("spec serialize"));
    h.update(dataset.samples.len().to_le_bytes());
    hex(&h.finalize())
}

fn train_and_score(config: &TrainConfig, teacher: &Checkpoint, inputs: &Inputs) -> Result<RunMetrics> {
    let outcome = train_student(config, inputs.dataset, inputs.splits, teacher)?;
    if let Some(reason) = outcome.aborted {
        return Err(Error::Numerical(reason));
    }
    let (ev, _) = evaluate_split(&outcome.checkpoint, inputs.dataset, &inputs.splits.t.test)?;
    Ok(RunMetrics { mean_sensitivity: ev.metrics.mean_sensitivity, sensitivity_at_2fp: ev.metrics.sensitivity_at_2(), map: ev.metrics.map })
}

fn cached(dir: &Path, key: &str) -> Option<RunMetrics> {
    let text = fs::read_to_string(dir.join(format!("{key}.json"))).ok()?;
    let run: CachedRun = serde_json::from_str(&text).ok()?;
    (run.key == key).then(|| RunMetrics {
        mean_sensitivity: f64::from_bits(run.metrics[0]),
        sensitivity_at_2fp: f64::from_bits(run.metrics[1]),
        map: f64::from_bits(run.metrics[2]),
    })
}

fn store(dir: &Path, key: &str, m: &RunMetrics) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let run = CachedRun { key: key.to_string(), metrics: [m.mean_sensitivity.to_bits(), m.sensitivity_at_2fp.to_bits(), m.map.to_bits()] };
    let path = dir.join(format!("{key}.json"));
    fs::write(&path, serde_json::to_string(&run).expect("run serialize")).map_err(|e| Error::io(&path, e))
}

/// Trains and scores every (cell, seed). Cells whose teacher is missing and
/// runs that abort numerically are skipped and reported through `log`.
/// Identical runs shared between studies train once; with `cache` set,
/// finished runs persist across invocations.
pub fn run_ablation(
    grid: &Grid,
    seeds: &[u64],
    inputs: &Inputs,
    cache: Option<&Path>,
    mut log: impl FnMut(&str),
) -> Result<Report> {
    let mut report = Report::default();
    let mut memo: BTreeMap<String, RunMetrics> = BTreeMap::new();
    for cell in grid.cells() {
        let teacher = match cell.teacher {
            TeacherKind::Aligned => inputs.teacher,
            TeacherKind::Plain => inputs.plain_teacher,
        };
        let Some(teacher) = teacher else {
            let msg = format!("skipped {}/{}: no {} teacher", cell.study, cell.label, cell.teacher.as_str());
            log(&msg);
            report.skipped.push(msg);
            continue;
        };
        for &seed in seeds {
            let config = TrainConfig { seed, ..cell.config.clone() };
            let key = run_key(&config, teacher, inputs.splits, inputs.dataset);
            let metrics = match memo.get(&key).cloned().or_else(|| cache.and_then(|d| cached(d, &key))) {
                Some(m) => m,
                None => match train_and_score(&config, teacher, inputs) {
                    Ok(m) => {
                        if let Some(dir) = cache {
                            store(dir, &key, &m)?;
                        }
                        log(&format!("{}/{} seed {seed}: mean sensitivity {:.4}", cell.study, cell.label, m.mean_sensitivity));
                        m
                    }
                    Err(Error::Numerical(reason)) => {
                        let msg = format!("skipped {}/{} seed {seed}: {reason}", cell.study, cell.label);
                        log(&msg);
                        report.skipped.push(msg);
                        continue;
                    }
                    Err(e) => return Err(e),
                },
            };
            memo.insert(key, metrics.clone());
            report.rows.push(Row {
                study: cell.study,
                cell: cell.label.clone(),
                mode: config.mode,
                teacher: cell.teacher,
                alpha: config.alpha,
                point_mask: config.point_mask,
                subsample_ratio: config.subsample_ratio,
                seed,
                metrics,
            });
        }
    }
    Ok(report)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl Report {
    /// Per-cell aggregates in first-appearance order; std is the sample std.
    pub fn summaries(&self) -> Vec<Summary> {
        let mut order: Vec<(Study, String)> = Vec::new();
        for r in &self.rows {
            let k = (r.study, r.cell.clone());
            if !order.contains(&k) {
                order.push(k);
            }
        }
        order
            .into_iter()
            .map(|(study, cell)| {
                let rows: Vec<&Row> = self.rows.iter().filter(|r| r.study == study && r.cell == cell).collect();
                let col = |f: fn(&RunMetrics) -> f64| mean_std(&rows.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
                Summary {
                    study,
                    cell,
                    runs: rows.len(),
                    stats: [col(|m| m.mean_sensitivity), col(|m| m.sensitivity_at_2fp), col(|m| m.map)],
                }
            })
            .collect()
    }

    pub fn rows_csv(&self) -> String {
        let mut out = String::from(
            "study,cell,mode,teacher,alpha,point_mask,subsample_ratio,seed,mean_sensitivity,sensitivity_at_2fp,map\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.study,
                r.cell,
                r.mode,
                r.teacher.as_str(),
                r.alpha,
                r.point_mask,
                r.subsample_ratio,
                r.seed,
                r.metrics.mean_sensitivity,
                r.metrics.sensitivity_at_2fp,
                r.metrics.map
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "study,cell,runs,mean_sensitivity_mean,mean_sensitivity_std,sensitivity_at_2fp_mean,sensitivity_at_2fp_std,map_mean,map_std\n",
        );
        for s in self.summaries() {
            let _ = write!(out, "{},{},{}", s.study, s.cell, s.runs);
            for (m, sd) in s.stats {
                let _ = write!(out, ",{m},{sd}");
            }
            out.push('\n');
        }
        out
    }

    /// Mean sensitivity of two cells averaged over the seeds both completed.
    pub fn paired_means(&self, study: Study, a: &str, b: &str) -> Option<(f64, f64, usize)> {
        let pick = |cell: &str| -> BTreeMap<u64, f64> {
            self.rows
                .iter()
                .filter(|r| r.study == study && r.cell == cell)
                .map(|r| (r.seed, r.metrics.mean_sensitivity))
                .collect()
        };
        let (ra, rb) = (pick(a), pick(b));
        let seeds: Vec<u64> = ra.keys().filter(|s| rb.contains_key(s)).copied().collect();
        if seeds.is_empty() {
            return None;
        }
        let n = seeds.len() as f64;
        let ma = seeds.iter().map(|s| ra[s]).sum::<f64>() / n;
        let mb = seeds.iter().map(|s| rb[s]).sum::<f64>() / n;
        Some((ma, mb, seeds.len()))
    }

    /// `(x, mean, std)` of mean sensitivity per series of one sweep, in
    /// series order. The alpha sweep is one series; the data-ratio sweep
    /// has one per mode.
    pub fn sweep_series(&self, study: Study) -> Vec<(String, Vec<(f64, f64, f64)>)> {
        let mut series: Vec<(String, Vec<(f64, f64, f64)>)> = Vec::new();
        for s in self.summaries().into_iter().filter(|s| s.study == study) {
            let row = self.rows.iter().find(|r| r.study == study && r.cell == s.cell).expect("summary has rows");
            let (name, x) = match study {
                Study::DataRatio => (row.mode.to_string(), row.subsample_ratio),
                _ => (study.to_string(), row.alpha),
            };
            let (m, sd) = s.stats[0];
            match series.iter_mut().find(|(n, _)| *n == name) {
                Some((_, pts)) => pts.push((x, m, sd)),
                None => series.push((name, vec![(x, m, sd)])),
            }
        }
        for (_, pts) in &mut series {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        series
    }
}
