mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use comoto_core::ablation::{run_ablation, Grid, Inputs, Study};
use comoto_core::data::{generate_dataset, Dataset, Modality, SyntheticSpec};
use comoto_core::detector::PostProcess;
use comoto_core::eval::{
    cases_from_predictions, evaluate, froc_csv, metrics_csv, predict_cases, predictions_jsonl, read_predictions, Evaluation,
};
use comoto_core::gradcheck::{loss_checks, op_checks, GradCheck};
use comoto_core::train::{train_student, train_teacher, Checkpoint, Mode, Splits, TrainConfig, TrainOutcome};
use comoto_core::Error;

use plot::{line_chart, Series};

const CHECKPOINT_FILE: &str = "checkpoint.cmck";

#[derive(Parser)]
#[command(name = "comoto", version, about = "Cross-modal lesion detection distillation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-modality dataset.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        count_m: usize,
        #[arg(long, default_value_t = 100)]
        count_t: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write train/val/test manifests for both modalities.
    Split {
        #[arg(long)]
        data: PathBuf,
        /// Train,val,test shares applied to both modalities.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        ratios: Option<Vec<f64>>,
        #[arg(long, default_value_t = 1.0)]
        subsample: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to `splits.json` inside the dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the source-modality detector.
    TrainTeacher(TrainArgs),
    /// Fine-tune a student on the target modality from a frozen teacher.
    TrainStudent(TrainArgs),
    /// Evaluate a checkpoint, or an external predictions file, on one split.
    Eval {
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// JSON-lines detections to score instead of running a checkpoint.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        /// Defaults to `M` for teacher checkpoints and `T` otherwise.
        #[arg(long)]
        modality: Option<Modality>,
        #[arg(long)]
        splits: Option<PathBuf>,
        #[arg(long)]
        metrics_out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and score an ablation grid.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        /// Comma-separated seeds or a half-open range such as `0..5`.
        #[arg(long, default_value = "0")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
        /// Finished-run cache; defaults to `runs/` inside the output directory.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    splits: Option<PathBuf>,
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

/// Bad flags or configuration.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Numerical(_)) => 3,
        Some(Error::Config(_) | Error::InvalidArgument(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { seed, count_m, count_t, out } => gen_data(seed, count_m, count_t, &out),
        Command::Split { data, ratios, subsample, seed, out } => split(&data, ratios, subsample, seed, out),
        Command::TrainTeacher(args) => train(args, false),
        Command::TrainStudent(args) => train(args, true),
        Command::Eval { checkpoint, predictions, data, split, modality, splits, metrics_out } => {
            eval(checkpoint, predictions, &data, split, modality, splits, &metrics_out)
        }
        Command::Gradcheck { instances, seed } => gradcheck(instances, seed),
        Command::Ablate { grid, seeds, out, cache } => ablate(&grid, &seeds, &out, cache),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io { path: path.to_path_buf(), source: e }.into())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e }.into())
}

fn gen_data(seed: u64, count_m: usize, count_t: usize, out: &Path) -> Result<()> {
    let spec = SyntheticSpec { seed, ..SyntheticSpec::default() };
    let ds = generate_dataset(&spec, count_m, count_t)?;
    ds.save(out)?;
    println!("wrote {} M and {} T samples to {}", count_m, count_t, out.display());
    Ok(())
}

fn split(data: &Path, ratios: Option<Vec<f64>>, subsample: f64, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let ratios = ratios.map(|r| [r[0], r[1], r[2]]);
    let ds = Dataset::load(data)?;
    let splits = Splits::make(&ds, ratios, subsample, seed)?;
    let out = out.unwrap_or_else(|| data.join(Splits::FILE));
    splits.save(&out)?;
    for (name, m) in [("M", &splits.m), ("T", &splits.t)] {
        println!(
            "{name}: train {} (+{} unused) val {} test {}",
            m.train.len(),
            m.train_unused.len(),
            m.val.len(),
            m.test.len()
        );
    }
    Ok(())
}

fn load_splits(data: &Path, explicit: Option<PathBuf>) -> Result<Splits> {
    let path = explicit.unwrap_or_else(|| data.join(Splits::FILE));
    if !path.exists() {
        return Err(Error::Data(format!("{} not found; run `comoto split` first", path.display())).into());
    }
    Ok(Splits::load(&path)?)
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(TrainConfig::parse(&text).with_context(|| format!("config {}", path.display()))?)
}

fn train(args: TrainArgs, student: bool) -> Result<()> {
    let cfg = load_config(&args.config)?;
    if cfg.mode.is_student() != student {
        let want = if student { "a student mode" } else { "mode = teacher" };
        bail!(usage(format!("{} sets mode = {}, this command needs {want}", args.config.display(), cfg.mode)));
    }
    let ds = Dataset::load(&args.data)?;
    let splits = load_splits(&args.data, args.splits)?;
    let started = Instant::now();
    let outcome = if student {
        let path = args.teacher.ok_or_else(|| usage("train-student needs --teacher"))?;
        let teacher = Checkpoint::load(&path)?;
        train_student(&cfg, &ds, &splits, &teacher)?
    } else {
        if args.teacher.is_some() {
            bail!(usage("train-teacher takes no --teacher"));
        }
        train_teacher(&cfg, &ds, &splits)?
    };
    write_training_outputs(&args.out, &cfg, &outcome)?;
    eprintln!("trained in {:.1}s", started.elapsed().as_secs_f64());
    println!(
        "best epoch {} val mAP {:.4} checkpoint {}",
        outcome.checkpoint.epoch,
        outcome.checkpoint.val_map,
        outcome.checkpoint.hash()
    );
    if outcome.unmatched_images > 0 {
        eprintln!("warning: {} training images had lesions matching no anchor", outcome.unmatched_images);
    }
    match outcome.aborted {
        Some(reason) => Err(Error::Numerical(reason).into()),
        None => Ok(()),
    }
}

fn write_training_outputs(out: &Path, cfg: &TrainConfig, outcome: &TrainOutcome) -> Result<()> {
    create_dir(out)?;
    outcome.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    write(&out.join("config.txt"), cfg.to_text())?;
    write(&out.join("history.csv"), outcome.history_csv())?;
    write(&out.join("steps.csv"), outcome.steps_csv())?;
    if !outcome.epochs.is_empty() {
        let series = vec![
            Series { name: "mean loss".into(), points: outcome.epochs.iter().map(|e| (e.epoch as f64, e.mean_loss)).collect() },
            Series { name: "val mAP".into(), points: outcome.epochs.iter().map(|e| (e.epoch as f64, e.val_map)).collect() },
        ];
        line_chart(&out.join("history.svg"), &format!("{} training", cfg.mode), "epoch", "value", &series)?;
    }
    Ok(())
}

fn split_ids(splits: &Splits, modality: Modality, name: SplitName) -> Vec<String> {
    let m = splits.get(modality);
    match name {
        SplitName::Train => m.train.clone(),
        SplitName::Val => m.val.clone(),
        SplitName::Test => m.test.clone(),
    }
}

fn eval(
    checkpoint: Option<PathBuf>,
    predictions: Option<PathBuf>,
    data: &Path,
    split: SplitName,
    modality: Option<Modality>,
    splits: Option<PathBuf>,
    metrics_out: &Path,
) -> Result<()> {
    let ds = Dataset::load(data)?;
    let splits = load_splits(data, splits)?;
    create_dir(metrics_out)?;
    let cases = match (checkpoint, predictions) {
        (Some(path), None) => {
            let ckpt = Checkpoint::load(&path)?;
            let default = if ckpt.mode == Mode::Teacher { Modality::M } else { Modality::T };
            let samples = ds.select(&split_ids(&splits, modality.unwrap_or(default), split))?;
            let cases = predict_cases(&ckpt.network, &samples, &PostProcess::default())?;
            write(&metrics_out.join("predictions.jsonl"), predictions_jsonl(&cases))?;
            cases
        }
        (None, Some(path)) => {
            let samples = ds.select(&split_ids(&splits, modality.unwrap_or(Modality::T), split))?;
            cases_from_predictions(&samples, read_predictions(&path)?)?
        }
        _ => bail!(usage("give exactly one of --checkpoint and --predictions")),
    };
    let Evaluation { metrics, curve } = evaluate(&cases)?;
    write(&metrics_out.join("metrics.csv"), metrics_csv(&metrics))?;
    write(&metrics_out.join("froc.csv"), froc_csv(&curve))?;
    if !curve.points.is_empty() {
        let froc = Series { name: "FROC".into(), points: curve.points.iter().map(|p| (p.fps_per_case, p.sensitivity)).collect() };
        line_chart(&metrics_out.join("froc.svg"), "FROC", "false positives per case", "sensitivity", &[froc])?;
    }
    for (name, value) in metrics.rows() {
        println!("{name:<20} {value:.4}");
    }
    Ok(())
}

fn print_checks(title: &str, checks: &[GradCheck]) -> bool {
    println!("{title}");
    let mut ok = true;
    for c in checks {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!("  {:<26} n={:<4} max rel err {:.3e}  {verdict}", c.name, c.instances, c.max_rel_error);
        ok &= c.passed();
    }
    ok
}

fn gradcheck(instances: usize, seed: u64) -> Result<()> {
    let started = Instant::now();
    let losses = loss_checks(instances, seed)?;
    let ops = op_checks(instances.min(20).max(1), seed)?;
    let ok = print_checks("losses", &losses) & print_checks("operations", &ops);
    println!("finished in {:.1}s", started.elapsed().as_secs_f64());
    if ok {
        Ok(())
    } else {
        Err(Error::Numerical("analytic and numeric gradients disagree".into()).into())
    }
}

fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let bad = || usage(format!("bad --seeds {spec:?}"));
    if let Some((a, b)) = spec.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a >= b {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    let seeds = spec.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect::<Result<Vec<u64>>>()?;
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn optional_checkpoint(path: Option<&PathBuf>, what: &str) -> Result<Option<Checkpoint>> {
    match path {
        Some(p) if p.exists() => Ok(Some(Checkpoint::load(p)?)),
        Some(p) => {
            eprintln!("{what} {} not found; its cells will be skipped", p.display());
            Ok(None)
        }
        None => Ok(None),
    }
}

fn ablate(grid_path: &Path, seeds: &str, out: &Path, cache: Option<PathBuf>) -> Result<()> {
    let seeds = parse_seeds(seeds)?;
    let text = fs::read_to_string(grid_path).map_err(|e| Error::Io { path: grid_path.to_path_buf(), source: e })?;
    let root = grid_path.parent().unwrap_or(Path::new("."));
    let grid = Grid::parse(&text, root).with_context(|| format!("grid {}", grid_path.display()))?;
    let data = grid.data.clone().ok_or_else(|| usage("grid file needs a `data = <dir>` line"))?;
    let ds = Dataset::load(&data)?;
    let splits = load_splits(&data, None)?;
    let teacher = optional_checkpoint(grid.teacher.as_ref(), "teacher")?;
    let plain = optional_checkpoint(grid.plain_teacher.as_ref(), "plain teacher")?;
    create_dir(out)?;
    let cache = cache.unwrap_or_else(|| out.join("runs"));
    let inputs = Inputs { dataset: &ds, splits: &splits, teacher: teacher.as_ref(), plain_teacher: plain.as_ref() };
    let report = run_ablation(&grid, &seeds, &inputs, Some(&cache), |msg| eprintln!("{msg}"))?;

    write(&out.join("ablation.csv"), report.rows_csv())?;
    write(&out.join("ablation_summary.csv"), report.summary_csv())?;
    write(&out.join("skipped.txt"), report.skipped.iter().map(|s| format!("{s}\n")).collect::<String>())?;
    let chart = |study: Study, file: &str, title: &str, x: &str| -> Result<()> {
        let series: Vec<Series> = report
            .sweep_series(study)
            .into_iter()
            .map(|(name, pts)| Series { name, points: pts.into_iter().map(|(x, m, _)| (x, m)).collect() })
            .collect();
        if series.is_empty() {
            return Ok(());
        }
        line_chart(&out.join(file), title, x, "mean sensitivity", &series)
    };
    chart(Study::Alpha, "alpha_sweep.svg", "Distillation weight sweep", "alpha")?;
    chart(Study::DataRatio, "data_ratio.svg", "Training-data share", "subsample ratio")?;
    for s in report.summaries() {
        let (m, sd) = s.stats[0];
        println!("{:<11} {:<28} n={} mean sensitivity {m:.4} ± {sd:.4}", s.study.as_str(), s.cell, s.runs);
    }
    if report.rows.is_empty() {
        return Err(anyhow!("no ablation cell produced a result"));
    }
    Ok(())
}
