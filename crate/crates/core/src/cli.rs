//! The `sinonet` command line: dataset generation, training, evaluation and
//! the three audits. Every command resolves one [`RunConfig`] from a preset,
//! an optional JSON file and flag overrides, echoes it into the output
//! directory and writes nothing outside that directory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::audit::{
    equivariance_audit, gradient_suite, visibility_audit, write_csv, EquivarianceAuditConfig,
    VisibilityAuditConfig,
};
use crate::data::{build_dataset, default_geometry, DatasetFile, RingParams, STUDY_SIZES};
use crate::error::{Error, Result};
use crate::layers::{build_model, ArchConfig};
use crate::svg::{line_chart, Chart, Series};
use crate::tomo::Geometry;
use crate::train::{
    evaluate, mean_predictor_mse, read_metrics_csv, write_metrics_csv, MetricRow, Samples,
    TrainConfig, Trainer,
};

/// Environment variable holding the worker-thread count of the audits.
pub const THREADS_ENV: &str = "SINONET_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub geometry: Geometry,
    /// Noise level relative to the mean absolute measurement.
    pub noise: f64,
    pub rings: RingParams,
    /// One training file per size; a single size is written as `train.eqmd`,
    /// several as `train_<n>.eqmd`.
    pub train_sizes: Vec<usize>,
    pub test_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            geometry: default_geometry(),
            noise: 0.05,
            rings: RingParams::default(),
            train_sizes: vec![1000],
            test_size: 200,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub checkpoint: Option<String>,
    pub dataset: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradientAuditConfig {
    /// Appends a case with a deliberately wrong backward rule.
    pub inject_fault: bool,
}

/// Everything a command needs. The master `seed` drives data generation,
/// initialisation, shuffling and the audits; `train.seed` is overwritten by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: String,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub equivariance: EquivarianceAuditConfig,
    pub visibility: VisibilityAuditConfig,
    pub gradients: GradientAuditConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: "sinonet-out".into(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            equivariance: EquivarianceAuditConfig::default(),
            visibility: VisibilityAuditConfig::default(),
            gradients: GradientAuditConfig::default(),
        }
    }
}

pub const PRESETS: [&str; 5] = ["smoke", "desk", "full", "sizes", "trend"];

/// Architecture and schedule used for the desk-scale regression run.
pub fn desk_train() -> TrainConfig {
    TrainConfig {
        epochs: 40,
        arch: ArchConfig {
            lift_points: 128,
            lift_k: 64,
            eval_draws: 16,
            ..ArchConfig::default()
        },
        ..TrainConfig::default()
    }
}

pub fn preset(name: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    match name {
        "smoke" => {
            cfg.out = "sinonet-smoke".into();
            cfg.data.train_sizes = vec![32];
            cfg.data.test_size = 16;
            let arch = ArchConfig {
                channels: 4,
                k: 9,
                lift_k: 9,
                basis: 8,
                hidden: 16,
                lift_points: 64,
                ..ArchConfig::default()
            };
            cfg.train = TrainConfig {
                epochs: 5,
                arch: arch.clone(),
                ..TrainConfig::default()
            };
            cfg.equivariance = EquivarianceAuditConfig {
                angle_counts: vec![2, 8],
                offsets: 17,
                elements: 4,
                calibration_samples: 8,
                arch: ArchConfig {
                    rotation_orbits: 16,
                    ..arch
                },
                ..EquivarianceAuditConfig::default()
            };
        }
        "desk" => {
            cfg.out = "sinonet-desk".into();
            cfg.train = desk_train();
        }
        "full" => {
            cfg.out = "sinonet-full".into();
            cfg.train = TrainConfig {
                epochs: 3000,
                arch: ArchConfig {
                    channels: 22,
                    lift_points: 2700,
                    ..ArchConfig::default()
                },
                ..TrainConfig::default()
            };
        }
        "sizes" => {
            cfg.out = "sinonet-sizes".into();
            cfg.data.train_sizes = STUDY_SIZES.to_vec();
            cfg.train = desk_train();
        }
        "trend" => {
            cfg.out = "sinonet-trend".into();
            cfg.equivariance.train_epochs = 2;
            cfg.equivariance.train_samples = 64;
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; choose one of {}",
                PRESETS.join(", ")
            )))
        }
    }
    Ok(cfg)
}

/// Recursively overlays `top` on `base`; objects merge key by key, anything
/// else is replaced.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// JSON run configuration; keys override the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Base configuration: smoke, desk, full, sizes or trend.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Subcommand, Clone, Debug)]
pub enum Command {
    /// Write train/test datasets and their target summaries.
    GenData(Common),
    /// Train a model; writes checkpoint.bin and metrics.csv after every epoch.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from checkpoint.bin in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs in this invocation; `--resume` later.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset; writes eval.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Invariance residuals of models across sensor geometries.
    AuditEquivariance(Common),
    /// Visibility condition of discretized Radon operators.
    AuditVisibility(Common),
    /// Finite-difference check of every op and layer.
    AuditGradients(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData(c)
            | Command::AuditEquivariance(c)
            | Command::AuditVisibility(c)
            | Command::AuditGradients(c) => c,
            Command::Train { common, .. } | Command::Eval { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::AuditEquivariance(_) => "audit-equivariance",
            Command::AuditVisibility(_) => "audit-visibility",
            Command::AuditGradients(_) => "audit-gradients",
        }
    }
}

#[derive(Parser, Clone, Debug)]
#[command(
    name = "sinonet",
    version,
    about = "Equivariant networks on sparse tomographic measurements"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// A resolved configuration plus the text echoed as `config.json`.
pub struct Resolved {
    pub cfg: RunConfig,
    pub echo: String,
    pub out: PathBuf,
}

pub fn resolve(common: &Common) -> Result<Resolved> {
    let base = match &common.preset {
        Some(p) => preset(p)?,
        None => RunConfig::default(),
    };
    let (cfg, echo) = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            let top: Value = serde_json::from_str(&text).map_err(|e| {
                Error::Config(format!("config {} is not JSON: {e}", path.display()))
            })?;
            let mut merged = serde_json::to_value(&base)?;
            merge(&mut merged, top);
            let cfg: RunConfig = serde_json::from_value(merged)
                .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
            (cfg, text)
        }
        None => {
            let text = serde_json::to_string_pretty(&base)?;
            (base, text)
        }
    };
    let mut cfg = cfg;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.to_string_lossy().into_owned();
    }
    cfg.train.seed = cfg.seed;
    cfg.train.validate().map_err(|e| match e {
        Error::Usage(m) => Error::Config(m),
        e => e,
    })?;
    cfg.data
        .geometry
        .validate()
        .map_err(|e| Error::Config(e.to_string()))?;
    let out = PathBuf::from(&cfg.out);
    Ok(Resolved { cfg, echo, out })
}

fn echo_config(r: &Resolved, command: &str) -> Result<()> {
    fs::create_dir_all(&r.out)?;
    fs::write(r.out.join("config.json"), &r.echo)?;
    let run = serde_json::json!({ "command": command, "config": r.cfg });
    fs::write(
        r.out.join("resolved.json"),
        serde_json::to_string_pretty(&run)?,
    )?;
    Ok(())
}

/// Worker threads from the environment, defaulting to the available cores.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.parse::<usize>().ok().filter(|n| *n > 0).ok_or_else(|| {
            Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))
        }),
        Err(_) => Ok(std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)),
    }
}

fn train_file_name(sizes: &[usize], n: usize) -> String {
    if sizes.len() == 1 {
        "train.eqmd".into()
    } else {
        format!("train_{n}.eqmd")
    }
}

fn gen_data(r: &Resolved) -> Result<()> {
    let d = &r.cfg.data;
    if d.train_sizes.is_empty() {
        return Err(Error::Config("data.train_sizes is empty".into()));
    }
    let mut jobs: Vec<(String, usize, u64)> = d
        .train_sizes
        .iter()
        .map(|&n| (train_file_name(&d.train_sizes, n), n, r.cfg.seed))
        .collect();
    jobs.push(("test.eqmd".into(), d.test_size, r.cfg.seed.wrapping_add(1)));
    for (name, n, seed) in jobs {
        let ds = build_dataset(n, &d.geometry, d.noise, &d.rings, seed)?;
        let path = r.out.join(&name);
        ds.save(&path)?;
        let summary = r.out.join(name.replace(".eqmd", ".summary.csv"));
        ds.write_summary_csv(fs::File::create(&summary)?)?;
        println!("wrote {} ({} samples)", path.display(), ds.len());
    }
    Ok(())
}

fn load_dataset(path: &Path) -> Result<DatasetFile> {
    if !path.exists() {
        return Err(Error::Usage(format!(
            "dataset {} not found; run gen-data first or point the config at an existing file",
            path.display()
        )));
    }
    DatasetFile::load(path)
}

fn default_train_path(r: &Resolved) -> PathBuf {
    match &r.cfg.train.train_data {
        Some(p) => PathBuf::from(p),
        None => r.out.join(train_file_name(
            &r.cfg.data.train_sizes,
            r.cfg.data.train_sizes[0],
        )),
    }
}

fn train(r: &Resolved, resume: bool, max_epochs: Option<usize>) -> Result<()> {
    if r.cfg.data.train_sizes.is_empty() && r.cfg.train.train_data.is_none() {
        return Err(Error::Config("no training data configured".into()));
    }
    let train = Samples::from_dataset(&load_dataset(&default_train_path(r))?);
    let test = match &r.cfg.train.test_data {
        Some(p) => Some(Samples::from_dataset(&load_dataset(Path::new(p))?)),
        None => {
            let p = r.out.join("test.eqmd");
            if p.exists() {
                Some(Samples::from_dataset(&DatasetFile::load(&p)?))
            } else {
                None
            }
        }
    };
    let tcfg = r.cfg.train.clone();
    let model = build_model(&tcfg.arch, &train.sensors, r.cfg.seed)?;
    println!(
        "model: {} trainable parameters",
        model.store().trainable_count()
    );
    let mut trainer = Trainer::new(tcfg.clone(), model)?;
    let ckpt = r.out.join("checkpoint.bin");
    let metrics = r.out.join("metrics.csv");
    let mut rows: Vec<MetricRow> = Vec::new();
    if resume && ckpt.exists() {
        trainer.load_file(&ckpt)?;
        if metrics.exists() {
            let done = trainer.progress.epoch;
            rows = read_metrics_csv(fs::File::open(&metrics)?)?
                .into_iter()
                .filter(|m| m.epoch < done)
                .collect();
        }
        println!("resuming at epoch {}", trainer.progress.epoch);
    } else {
        if resume {
            println!("no checkpoint in {}; starting fresh", r.out.display());
        }
        trainer.fit_targets(&train)?;
    }
    let per_epoch = train.len().div_ceil(tcfg.batch_size) as u64;
    let last = max_epochs.map_or(tcfg.epochs, |m| tcfg.epochs.min(trainer.progress.epoch + m));
    while trainer.progress.epoch < last {
        let left = per_epoch - trainer.progress.step as u64;
        let new = match trainer.run(&train, test.as_ref(), Some(left)) {
            Ok(new) => new,
            Err(e) => {
                write_metrics_csv(fs::File::create(&metrics)?, &rows)?;
                return Err(e);
            }
        };
        let line: Vec<String> = new
            .iter()
            .map(|m| format!("{} {} {:.4e}", m.split, m.metric, m.value))
            .collect();
        println!(
            "epoch {:>4}: {}",
            trainer.progress.epoch - 1,
            line.join(", ")
        );
        rows.extend(new);
        trainer.save_file(&ckpt)?;
        write_metrics_csv(fs::File::create(&metrics)?, &rows)?;
    }
    if trainer.progress.epoch < tcfg.epochs {
        println!(
            "stopped at epoch {} of {}",
            trainer.progress.epoch, tcfg.epochs
        );
    }
    println!("wrote {} and {}", ckpt.display(), metrics.display());
    Ok(())
}

fn eval(r: &Resolved, checkpoint: Option<&Path>, dataset: Option<&Path>) -> Result<()> {
    let ckpt = checkpoint
        .map(Path::to_path_buf)
        .or_else(|| r.cfg.eval.checkpoint.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| r.out.join("checkpoint.bin"));
    let data_path = dataset
        .map(Path::to_path_buf)
        .or_else(|| r.cfg.eval.dataset.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| r.out.join("test.eqmd"));
    let data = Samples::from_dataset(&load_dataset(&data_path)?);
    let model = build_model(&r.cfg.train.arch, &data.sensors, r.cfg.seed)?;
    let mut trainer = Trainer::new(r.cfg.train.clone(), model)?;
    trainer.load_file(&ckpt).map_err(|e| {
        Error::Config(format!(
            "checkpoint {} does not fit the configured model: {e}",
            ckpt.display()
        ))
    })?;
    let m = evaluate(&*trainer.model, &data, r.cfg.train.batch_size, r.cfg.seed)?;
    let epoch = trainer.progress.epoch;
    let mut rows = m.rows(epoch, "eval");
    if let crate::train::Targets::Regression { .. } = data.targets {
        let (mean_id, _) = trainer.model.target_stats();
        let mean = trainer.model.store().get(mean_id).data().to_vec();
        rows.push(MetricRow {
            epoch,
            split: "eval".into(),
            metric: "mean_predictor_mse".into(),
            value: mean_predictor_mse(&mean, &data)?,
        });
    }
    for row in &rows {
        println!("{:<20} {:.6e}", row.metric, row.value);
    }
    write_metrics_csv(fs::File::create(r.out.join("eval.csv"))?, &rows)?;
    Ok(())
}

fn audit_equivariance(r: &Resolved) -> Result<()> {
    let (rows, medians) = equivariance_audit(&r.cfg.equivariance, r.cfg.seed, threads_from_env()?)?;
    write_csv(fs::File::create(r.out.join("equivariance.csv"))?, &rows)?;
    write_csv(
        fs::File::create(r.out.join("equivariance_medians.csv"))?,
        &medians,
    )?;
    let mut series = Vec::new();
    for trained in [false, true] {
        let points: Vec<(f64, f64)> = medians
            .iter()
            .filter(|m| m.trained == trained)
            .map(|m| (m.angles as f64, m.median))
            .collect();
        if !points.is_empty() {
            let name = if trained { "trained" } else { "untrained" };
            series.push(Series {
                name: name.into(),
                points,
            });
        }
    }
    let chart = Chart {
        title: "Invariance residual vs. number of angles".into(),
        x_label: "angles".into(),
        y_label: "median relative residual".into(),
        log_x: true,
        log_y: true,
    };
    fs::write(r.out.join("equivariance.svg"), line_chart(&chart, &series))?;
    for m in &medians {
        println!(
            "{:>4} angles {:<9} median residual {:.4e}",
            m.angles,
            if m.trained { "trained" } else { "untrained" },
            m.median
        );
    }
    Ok(())
}

fn audit_visibility(r: &Resolved) -> Result<()> {
    let rows = visibility_audit(&r.cfg.visibility, r.cfg.seed)?;
    write_csv(fs::File::create(r.out.join("visibility.csv"))?, &rows)?;
    for row in &rows {
        println!(
            "{:<10} {:>3} angles  g = ({:+.3}, {:+.3}; {:+.1}°)  {}  angle {:.3e}  dims {}/{}",
            row.geometry,
            row.angles,
            row.shift_x,
            row.shift_y,
            row.angle_deg,
            if row.holds { "holds " } else { "fails " },
            row.mismatch_angle,
            row.kernel_dim,
            row.transformed_kernel_dim
        );
    }
    Ok(())
}

fn audit_gradients(r: &Resolved) -> Result<()> {
    let reports = gradient_suite(r.cfg.seed, r.cfg.gradients.inject_fault)?;
    write_csv(fs::File::create(r.out.join("gradients.csv"))?, &reports)?;
    for g in &reports {
        println!(
            "{:<24} {:.3e}  {}",
            g.name,
            g.max_rel_err,
            if g.passed { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = reports
        .iter()
        .filter(|g| !g.passed)
        .map(|g| g.name.as_str())
        .collect();
    if !failed.is_empty() {
        return Err(Error::Numerical(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )));
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(())
}

pub fn execute(cmd: &Command) -> Result<()> {
    let r = resolve(cmd.common())?;
    echo_config(&r, cmd.name())?;
    match cmd {
        Command::GenData(_) => gen_data(&r),
        Command::Train {
            resume, max_epochs, ..
        } => train(&r, *resume, *max_epochs),
        Command::Eval {
            checkpoint,
            dataset,
            ..
        } => eval(&r, checkpoint.as_deref(), dataset.as_deref()),
        Command::AuditEquivariance(_) => audit_equivariance(&r),
        Command::AuditVisibility(_) => audit_visibility(&r),
        Command::AuditGradients(_) => audit_gradients(&r),
    }
}

/// 0 on success, 1 for usage and configuration errors, 2 for numerical
/// failures (non-finite training, failed audits).
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => 2,
        _ => 1,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve_and_round_trip() {
        for p in PRESETS {
            let cfg = preset(p).unwrap();
            let text = serde_json::to_string(&cfg).unwrap();
            let back: RunConfig = serde_json::from_str(&text).unwrap();
            assert_eq!(back, cfg);
        }
        assert!(matches!(preset("nope"), Err(Error::Config(_))));
        assert_eq!(
            preset("sizes").unwrap().data.train_sizes,
            vec![1000, 2000, 4000, 8000]
        );
    }

    #[test]
    fn merge_overrides_nested_keys() {
        let mut base = serde_json::json!({"a": {"b": 1, "c": 2}, "d": [1, 2]});
        merge(&mut base, serde_json::json!({"a": {"c": 5}, "d": [3]}));
        assert_eq!(base, serde_json::json!({"a": {"b": 1, "c": 5}, "d": [3]}));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"train": {"epoch": 3}}"#).unwrap();
        let common = Common {
            config: Some(path),
            ..Common::default()
        };
        assert!(matches!(resolve(&common), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_apply() {
        let common = Common {
            seed: Some(9),
            out: Some("x/y".into()),
            preset: Some("smoke".into()),
            ..Common::default()
        };
        let r = resolve(&common).unwrap();
        assert_eq!((r.cfg.seed, r.cfg.train.seed), (9, 9));
        assert_eq!(r.out, PathBuf::from("x/y"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Numerical("x".into())), 2);
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(run(["sinonet", "no-such-command"]), 1);
        assert_eq!(run(["sinonet", "--help"]), 0);
    }
}
