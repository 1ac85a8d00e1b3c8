use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sigprop::checkpoint::Checkpoint;
use sigprop::data::{Source, Split};
use sigprop::ep::{ep_fit, write_alignment_csv, EpConfig, EpNet};
use sigprop::gradcheck::{layer_suites, loss_suites};
use sigprop::snn::{snn_fit, SnnConfig, SnnNet};
use sigprop::tensor::RngStream;
use sigprop::trainer::{
    fit, write_csv, Method, MetricRow, Network, PredictMode, Summary, TrainConfig,
};
use sigprop::Scalar;

use crate::error::CliError;

/// Where a run reads data and writes its artifacts.
#[derive(Debug, Clone)]
pub struct Paths {
    pub data: PathBuf,
    pub out: PathBuf,
}

impl Paths {
    fn create(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out).map_err(|e| {
            CliError::Config(format!(
                "output dir {} is not writable: {e}",
                self.out.display()
            ))
        })
    }

    fn file(&self, name: &str) -> Result<BufWriter<File>, CliError> {
        Ok(BufWriter::new(
            File::create(self.out.join(name)).map_err(sigprop::Error::from)?,
        ))
    }
}

fn load_split(
    data: &Path,
    dataset: &str,
    train: Option<usize>,
    test: Option<usize>,
) -> Result<Split, CliError> {
    Ok(Source::parse(dataset)?.load(data)?.truncate(train, test))
}

fn save_checkpoint<T: Scalar>(
    paths: &Paths,
    ckpt: &Checkpoint<T>,
) -> Result<(String, String), CliError> {
    let path = paths.out.join("checkpoint.spck");
    let hash = ckpt.save(&path)?;
    Ok((path.display().to_string(), hash))
}

fn write_outputs(paths: &Paths, rows: &[MetricRow], summary: &Summary) -> Result<(), CliError> {
    write_csv(paths.file("metrics.csv")?, rows)?;
    let mut f = paths.file("summary.json")?;
    serde_json::to_writer_pretty(&mut f, summary).map_err(sigprop::Error::from)?;
    Ok(())
}

fn progress(rows: &[MetricRow]) {
    if let Some(r) = rows.iter().find(|r| r.layer == "step") {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |e| format!("{:.2}%", 100.0 * e));
        eprintln!(
            "{} epoch {}: train {} test {}",
            r.mode,
            r.epoch,
            pct(r.train_err),
            pct(r.test_err)
        );
    }
}

/// `train` (sigprop) and `baseline` (bp, fa, shallow).
pub fn train(
    paths: &Paths,
    cfg: TrainConfig,
    resolved: Value,
    baseline: bool,
) -> Result<Summary, CliError> {
    match (baseline, cfg.method) {
        (true, Method::Sigprop) => {
            return Err(CliError::Config(
                "baseline needs method bp, fa or shallow".into(),
            ));
        }
        (false, m) if m != Method::Sigprop => {
            return Err(CliError::Config(format!(
                "train runs sigprop; use `baseline` for {m:?}"
            )));
        }
        _ => {}
    }
    cfg.validate()?;
    paths.create()?;
    let split = load_split(&paths.data, &cfg.dataset, cfg.train_subset, cfg.test_subset)?;
    let mut net = Network::<f32>::build(&cfg, &split.train.image_shape(), split.train.classes)?;
    let report = fit(&mut net, &split.train, &split.test, &cfg, progress)?;
    let (ckpt, hash) = save_checkpoint(paths, &net.checkpoint(cfg.seed, cfg.epochs))?;
    let summary = Summary {
        mode: cfg.mode_label().into(),
        config: resolved,
        epochs: cfg.epochs,
        train_err: report.train_err,
        test_err: report.test_err,
        classifier_test_err: report.eval.classifier_err,
        output_target_test_err: report.eval.error(PredictMode::OutputTarget).ok(),
        layer_test_err: report.eval.layer_err.clone(),
        params: net.param_count(),
        checkpoint: Some(ckpt),
        checkpoint_sha256: Some(hash),
        wall_s: cfg.record_timing.then_some(report.wall_s),
    };
    write_outputs(paths, &report.rows, &summary)?;
    Ok(summary)
}

pub fn ep(paths: &Paths, cfg: EpConfig, resolved: Value) -> Result<Summary, CliError> {
    cfg.validate()?;
    paths.create()?;
    let split = load_split(&paths.data, &cfg.dataset, cfg.train_subset, cfg.test_subset)?;
    let inputs = split.train.image_shape().iter().product();
    let mut rng = RngStream::new(cfg.seed);
    let mut net = EpNet::<f32>::new(
        inputs,
        &cfg.hidden,
        split.train.classes,
        cfg.loop_trainable,
        &mut rng,
    )?;
    let report = ep_fit(&mut net, &split.train, &split.test, &cfg, |row, angles| {
        progress(std::slice::from_ref(row));
        for a in angles {
            eprintln!(
                "  {} {:.2} deg (std {:.2})",
                a.pair, a.mean_angle_deg, a.std
            );
        }
    })?;
    write_alignment_csv(paths.file("alignment.csv")?, &report.alignment)?;
    let (ckpt, hash) = save_checkpoint(paths, &net.checkpoint(cfg.seed, cfg.epochs))?;
    let params = net
        .checkpoint(cfg.seed, cfg.epochs)
        .tensors
        .iter()
        .map(|(_, t)| t.len())
        .sum();
    let summary = Summary {
        mode: "ep".into(),
        config: resolved,
        epochs: cfg.epochs,
        train_err: Some(report.train_err),
        test_err: report.test_err,
        classifier_test_err: None,
        output_target_test_err: None,
        layer_test_err: Vec::new(),
        params,
        checkpoint: Some(ckpt),
        checkpoint_sha256: Some(hash),
        wall_s: Some(report.wall_s),
    };
    write_outputs(paths, &report.rows, &summary)?;
    Ok(summary)
}

pub fn snn(paths: &Paths, cfg: SnnConfig, resolved: Value) -> Result<Summary, CliError> {
    cfg.validate()?;
    paths.create()?;
    let split = load_split(&paths.data, &cfg.dataset, cfg.train_subset, cfg.test_subset)?;
    let mut net = SnnNet::<f32>::build(&cfg, &split.train.image_shape(), split.train.classes)?;
    let report = snn_fit(&mut net, &split.train, &split.test, &cfg, progress)?;
    let ckpt_data = net.checkpoint(cfg.seed, cfg.epochs);
    let params = ckpt_data.tensors.iter().map(|(_, t)| t.len()).sum();
    let (ckpt, hash) = save_checkpoint(paths, &ckpt_data)?;
    let summary = Summary {
        mode: cfg.mode.label().into(),
        config: resolved,
        epochs: cfg.epochs,
        train_err: report.train_err,
        test_err: report.test_err,
        classifier_test_err: Some(report.test_err),
        output_target_test_err: None,
        layer_test_err: Vec::new(),
        params,
        checkpoint: Some(ckpt),
        checkpoint_sha256: Some(hash),
        wall_s: cfg.record_timing.then_some(report.wall_s),
    };
    write_outputs(paths, &report.rows, &summary)?;
    Ok(summary)
}

/// Settings of the `bench` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Shared run settings; `method` and `stages` are set per mode.
    pub train: TrainConfig,
    pub modes: Vec<String>,
    /// Pipeline stages of `sp_pipeline`; 0 puts every block in its own.
    pub stages: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                epochs: 1,
                record_timing: true,
                ..TrainConfig::default()
            },
            modes: vec!["sp_sequential".into(), "sp_pipeline".into(), "bp".into()],
            stages: 0,
            seed: 0,
        }
    }
}

/// Time per sample and peak bytes of one benchmarked mode.
#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub mode: String,
    pub time_per_sample_s: f64,
    /// Largest per-layer peak for local learning, the whole step for bp.
    pub peak_bytes: u64,
    pub test_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchSummary {
    pub config: Value,
    pub results: Vec<BenchResult>,
    /// Sequential over pipelined time per sample.
    pub pipeline_speedup: Option<f64>,
    /// Sigprop per-layer peak over backprop step peak.
    pub memory_ratio: Option<f64>,
}

pub fn bench(paths: &Paths, cfg: BenchConfig, resolved: Value) -> Result<BenchSummary, CliError> {
    for need in ["sp_sequential", "sp_pipeline", "bp"] {
        if !cfg.modes.iter().any(|m| m == need) {
            return Err(CliError::Config(format!("bench needs mode '{need}'")));
        }
    }
    paths.create()?;
    let base = TrainConfig {
        seed: cfg.seed,
        record_timing: true,
        ..cfg.train.clone()
    };
    let split = load_split(
        &paths.data,
        &base.dataset,
        base.train_subset,
        base.test_subset,
    )?;
    let depth = base.arch.depth();
    let mut all_rows = Vec::new();
    let mut results = Vec::new();
    for mode in &cfg.modes {
        let run = match mode.as_str() {
            "sp_sequential" => TrainConfig {
                stages: 1,
                ..base.clone()
            },
            "sp_pipeline" => TrainConfig {
                stages: if cfg.stages == 0 { depth } else { cfg.stages },
                ..base.clone()
            },
            "bp" => TrainConfig {
                method: Method::Bp,
                stages: 1,
                ..base.clone()
            },
            "fa" => TrainConfig {
                method: Method::Fa,
                stages: 1,
                ..base.clone()
            },
            "shallow" => TrainConfig {
                method: Method::Shallow,
                stages: 1,
                ..base.clone()
            },
            other => return Err(CliError::Config(format!("unknown bench mode '{other}'"))),
        };
        run.validate()?;
        let mut net = Network::<f32>::build(&run, &split.train.image_shape(), split.train.classes)?;
        let report = fit(&mut net, &split.train, &split.test, &run, progress)?;
        let last = run.epochs - 1;
        let rows: Vec<&MetricRow> = report.rows.iter().filter(|r| r.epoch == last).collect();
        let step = rows
            .iter()
            .find(|r| r.layer == "step")
            .expect("fit emits a step row");
        let peak = if run.method == Method::Sigprop {
            rows.iter()
                .filter(|r| r.layer != "step")
                .map(|r| r.peak_bytes)
                .max()
                .unwrap_or(0)
        } else {
            step.peak_bytes
        };
        let time = step.time_per_sample_s.unwrap_or(0.0);
        eprintln!("{mode}: {:.3} ms/sample, peak {} bytes", 1e3 * time, peak);
        results.push(BenchResult {
            mode: mode.clone(),
            time_per_sample_s: time,
            peak_bytes: peak,
            test_err: report.test_err,
        });
        all_rows.extend(report.rows);
    }
    let get = |m: &str| results.iter().find(|r| r.mode == m);
    let ratio = |a: f64, b: f64| (b > 0.0).then(|| a / b);
    let seq = get("sp_sequential").expect("required");
    let pipe = get("sp_pipeline").expect("required");
    let bp = get("bp").expect("required");
    let summary = BenchSummary {
        config: resolved,
        pipeline_speedup: ratio(seq.time_per_sample_s, pipe.time_per_sample_s),
        memory_ratio: ratio(seq.peak_bytes as f64, bp.peak_bytes as f64),
        results,
    };
    write_csv(paths.file("bench.csv")?, &all_rows)?;
    let mut f = paths.file("bench_summary.json")?;
    serde_json::to_writer_pretty(&mut f, &summary).map_err(sigprop::Error::from)?;
    if let Some(s) = summary.pipeline_speedup {
        println!("pipeline speedup over sequential: {s:.2}x");
    }
    if let Some(m) = summary.memory_ratio {
        println!("sigprop per-layer peak / bp step peak: {m:.3}");
    }
    Ok(summary)
}

/// Finite-difference tolerance of the gradient suites.
pub const GRAD_TOL: f64 = 1e-4;

pub fn gradcheck(instances: usize, seed: u64) -> Result<(), CliError> {
    let mut reports = layer_suites(instances, seed)?;
    reports.extend(loss_suites(instances, seed)?);
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.max_rel_err <= GRAD_TOL;
        println!(
            "{:<24} {:>4} instances  max rel err {:.3e}  {}",
            r.suite,
            r.instances,
            r.max_rel_err,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.suite.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}
