//! Experiment commands behind the `bfno` binary.

pub mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use bfno_core::autodiff::{finite_diff_check, FdReport};
use bfno_core::data::{gen_synthetic, load_idx_dataset, subset, DataError, Dataset, Split};
use bfno_core::layers::{LayerError, OdeFunctionConfig};
use bfno_core::tensor::{ParamStore, Prng};
use bfno_core::training::{
    evaluate, train, GradMode, MetricsRow, Model, TrainError, METRICS_HEADER,
};
use thiserror::Error;

pub use config::{ConfigError, DataSource, RunConfig};

/// Largest `dim_g` accepted by the gradient check.
pub const GRADCHECK_MAX_DIM_G: usize = 16;
/// Finite-difference bar of the gradient check.
pub const FD_THRESHOLD: f64 = 1e-5;
/// Adjoint-vs-discrete bar of the gradient check.
pub const ADJOINT_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("{0}")]
    Train(#[from] TrainError),
    #[error("cannot access {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parameter snapshot: {0}")]
    Snapshot(String),
    #[error("invalid sweep `{0}`: expected key=v1,v2,...")]
    Sweep(String),
    #[error("gradient check failed at `{param}`: {detail}")]
    Gradcheck { param: String, detail: String },
}

impl CliError {
    /// 1 configuration, 2 data, 3 solver, 4 gradient check.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Snapshot(_) | CliError::Sweep(_) => 1,
            CliError::Data(_) | CliError::Io { .. } => 2,
            CliError::Train(e) => match e {
                TrainError::Layer(LayerError::Config(_)) | TrainError::Config(_) => 1,
                TrainError::InputShape { .. } => 2,
                _ => 3,
            },
            CliError::Gradcheck { .. } => 4,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Keeps freed heap memory mapped between solver steps. Every tape
/// allocates fresh buffers, and returning them to the kernel makes each
/// evaluation pay the page faults again.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        const LIMIT: libc::c_int = 1 << 30;
        // SAFETY: mallopt only adjusts allocator thresholds.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, LIMIT);
            libc::mallopt(libc::M_TRIM_THRESHOLD, LIMIT);
        }
    }
}

/// Reads a config file, applies `BFNO_DATA_DIR` and validates it.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::from_file(path)?;
    cfg.apply_env();
    cfg.validate()?;
    Ok(cfg)
}

/// Train and test splits selected by the config.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    let d = &cfg.data;
    match d.source {
        DataSource::Idx => {
            let train = load_idx_dataset(&d.dir, &d.name, Split::Train)?;
            let test = load_idx_dataset(&d.dir, &d.name, Split::Test)?;
            let train = if d.train_size == 0 { train } else { subset(&train, d.train_size, cfg.seed)? };
            let test = if d.test_size == 0 { test } else { subset(&test, d.test_size, cfg.seed)? };
            Ok((train, test))
        }
        DataSource::Synthetic(kind) => Ok((
            gen_synthetic(kind, d.train_size, cfg.seed, Split::Train)?,
            gen_synthetic(kind, d.test_size, cfg.seed, Split::Test)?,
        )),
    }
}

/// Model config with the input geometry taken from the data.
pub fn model_config(cfg: &RunConfig, data: &Dataset) -> OdeFunctionConfig {
    let s = data.sample_shape();
    OdeFunctionConfig { in_channels: s[0], height: s[1], width: s[2], ..cfg.model.clone() }
}

pub fn build_model(cfg: &RunConfig, train: &Dataset, test: &Dataset) -> Result<Model, CliError> {
    let classes = train.classes.max(test.classes);
    Ok(Model::init(model_config(cfg, train), classes, cfg.seed)?)
}

/// Length-prefixed little-endian `f64` dump of the flattened store.
pub fn write_snapshot(path: &Path, store: &ParamStore) -> Result<(), CliError> {
    let flat = store.flatten().map_err(|e| CliError::Snapshot(e.to_string()))?;
    let mut bytes = Vec::with_capacity(8 + 8 * flat.len());
    bytes.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in flat.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_snapshot(path: &Path) -> Result<Vec<f64>, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Snapshot(format!("cannot read {}: {e}", path.display())))?;
    let (head, body) = bytes
        .split_first_chunk::<8>()
        .ok_or_else(|| CliError::Snapshot(format!("{} bytes, too short for the length header", bytes.len())))?;
    let n = u64::from_le_bytes(*head) as usize;
    if body.len() != n.saturating_mul(8) {
        return Err(CliError::Snapshot(format!("header says {n} values but {} payload bytes follow", body.len())));
    }
    Ok(body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect())
}

/// Result of a training command.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub param_count: usize,
}

struct MetricsSink {
    csv: BufWriter<File>,
    jsonl: BufWriter<File>,
    csv_path: PathBuf,
    error: Option<CliError>,
}

impl MetricsSink {
    fn create(out: &Path, stem: &str) -> Result<Self, CliError> {
        let csv_path = out.join(format!("{stem}.csv"));
        let jsonl_path = out.join(format!("{stem}.jsonl"));
        let mut csv = BufWriter::new(File::create(&csv_path).map_err(io_err(&csv_path))?);
        let jsonl = BufWriter::new(File::create(&jsonl_path).map_err(io_err(&jsonl_path))?);
        writeln!(csv, "{METRICS_HEADER}").map_err(io_err(&csv_path))?;
        Ok(Self { csv, jsonl, csv_path, error: None })
    }

    fn push(&mut self, row: &MetricsRow) {
        let res = writeln!(self.csv, "{}", row.csv_line())
            .and_then(|_| writeln!(self.jsonl, "{}", row.json_line()))
            .and_then(|_| self.csv.flush())
            .and_then(|_| self.jsonl.flush());
        if let (Err(e), None) = (res, &self.error) {
            self.error = Some(CliError::Io { path: self.csv_path.clone(), source: e });
        }
    }

    fn finish(self) -> Result<(), CliError> {
        self.error.map_or(Ok(()), Err)
    }
}

/// Trains on `cfg` and streams metrics to `<out>/<stem>.csv` and `.jsonl`.
/// Epoch lines go to stdout unless `quiet`.
pub fn run_training(cfg: &RunConfig, out: &Path, stem: &str, quiet: bool) -> Result<(TrainOutcome, Model), CliError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let (train_set, test_set) = load_data(cfg)?;
    let mut model = build_model(cfg, &train_set, &test_set)?;
    let mut sink = MetricsSink::create(out, stem)?;
    let start = Instant::now();
    let rows = train(&mut model, &train_set, &test_set, &cfg.train_config(), |row| {
        sink.push(row);
        if !quiet {
            println!(
                "epoch {} train_loss {:.6} test_acc {:.4} nfe_fwd {} nfe_bwd {}",
                row.epoch, row.train_loss, row.test_acc, row.nfe_fwd, row.nfe_bwd
            );
            eprintln!("epoch {} done after {:.1}s", row.epoch, start.elapsed().as_secs_f64());
        }
    })?;
    sink.finish()?;
    let param_count = model.num_params();
    Ok((TrainOutcome { rows, param_count }, model))
}

/// `bfno train`: writes `metrics.csv`, `metrics.jsonl`,
/// `resolved_config.txt` and `params.bin` into `out`.
pub fn cmd_train(config: &Path, out: &Path) -> Result<TrainOutcome, CliError> {
    train_to_dir(&load_config(config)?, out)
}

/// [`cmd_train`] for an already loaded config.
pub fn train_to_dir(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome, CliError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let echo = out.join("resolved_config.txt");
    fs::write(&echo, cfg.echo()).map_err(io_err(&echo))?;
    let (outcome, model) = run_training(cfg, out, "metrics", false)?;
    write_snapshot(&out.join("params.bin"), &model.store)?;
    Ok(outcome)
}

/// `bfno eval`: test accuracy of a parameter snapshot.
pub fn cmd_eval(config: &Path, params: &Path) -> Result<f64, CliError> {
    let cfg = load_config(config)?;
    let theta = read_snapshot(params)?;
    let (train_set, test_set) = load_data(&cfg)?;
    let mut model = build_model(&cfg, &train_set, &test_set)?;
    if theta.len() != model.num_params() {
        return Err(CliError::Snapshot(format!(
            "{} values for a model with {} parameters",
            theta.len(),
            model.num_params()
        )));
    }
    model.store.unflatten(&theta).map_err(|e| CliError::Snapshot(e.to_string()))?;
    Ok(evaluate(&model, &test_set, &cfg.solver)?)
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub fd: FdReport,
    /// Name and element offset of the worst finite-difference coordinate.
    pub fd_param: (String, usize),
    pub coords_checked: usize,
    /// `‖g_adj - g_disc‖ / ‖g_disc‖`.
    pub adjoint_rel_err: f64,
    /// Parameter tensor with the largest adjoint-vs-discrete discrepancy.
    pub adjoint_param: String,
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

/// `bfno gradcheck`: tape gradient against finite differences, and adjoint
/// against discrete backpropagation. `inject_fault` arms the tape's VJP
/// fault hook.
pub fn cmd_gradcheck(config: &Path, inject_fault: bool) -> Result<GradcheckReport, CliError> {
    let cfg = load_config(config)?;
    gradcheck(&cfg, inject_fault)
}

pub fn gradcheck(cfg: &RunConfig, inject_fault: bool) -> Result<GradcheckReport, CliError> {
    if cfg.model.dim_g > GRADCHECK_MAX_DIM_G {
        return Err(ConfigError::Invalid(format!(
            "gradcheck needs dim_g <= {GRADCHECK_MAX_DIM_G}, got {}",
            cfg.model.dim_g
        ))
        .into());
    }
    let (train_set, test_set) = load_data(cfg)?;
    let model = build_model(cfg, &train_set, &test_set)?;
    let n = cfg.gradcheck.samples.min(train_set.len());
    let samples: Vec<_> = (0..n).map(|i| (train_set.image(i), train_set.labels[i])).collect();
    let solver = &cfg.solver;

    let mean_grad = |mode: GradMode| -> Result<Vec<f64>, CliError> {
        let mut acc = vec![0.0; model.num_params()];
        for (x, y) in &samples {
            let g = model.sample_grad_with(x, *y, solver, mode, inject_fault)?;
            acc.iter_mut().zip(&g.grad).for_each(|(a, b)| *a += b / n as f64);
        }
        Ok(acc)
    };
    let discrete = mean_grad(GradMode::Discrete)?;
    let adjoint = mean_grad(GradMode::Adjoint)?;

    let theta = model.store.flatten().map_err(TrainError::from)?.into_data();
    let coords: Option<Vec<usize>> = match cfg.gradcheck.coords {
        0 => None,
        k if k >= theta.len() => None,
        k => {
            let mut idx: Vec<usize> = (0..theta.len()).collect();
            Prng::new(cfg.seed).shuffle(&mut idx);
            idx.truncate(k);
            idx.sort_unstable();
            Some(idx)
        }
    };
    let mut failure = None;
    let fd = finite_diff_check(
        |t| match model.loss_at(t, &samples, solver) {
            Ok(l) => l,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        &theta,
        &discrete,
        cfg.gradcheck.eps,
        coords.as_deref(),
    );
    if let Some(e) = failure {
        return Err(e.into());
    }
    let locate = |i: usize| model.store.locate(i).map(|(s, o)| (s.to_string(), o)).unwrap_or_default();
    let fd_param = locate(fd.worst_index);

    let adjoint_rel_err = rel_l2(&adjoint, &discrete);
    let mut worst = (f64::NEG_INFINITY, String::new());
    let mut offset = 0;
    for (name, t) in model.store.iter() {
        let r = offset..offset + t.len();
        let e = rel_l2(&adjoint[r.clone()], &discrete[r]);
        if e > worst.0 {
            worst = (e, name.to_string());
        }
        offset += t.len();
    }
    Ok(GradcheckReport {
        fd,
        fd_param,
        coords_checked: coords.map_or(theta.len(), |c| c.len()),
        adjoint_rel_err,
        adjoint_param: worst.1,
    })
}

impl GradcheckReport {
    /// `Err` naming the offending parameter when a threshold is breached.
    pub fn verdict(&self) -> Result<(), CliError> {
        if !(self.fd.max_rel_err < FD_THRESHOLD) {
            return Err(CliError::Gradcheck {
                param: format!("{}[{}]", self.fd_param.0, self.fd_param.1),
                detail: format!(
                    "finite-difference relative error {:.3e} >= {FD_THRESHOLD:e} (analytic {:e}, numeric {:e})",
                    self.fd.max_rel_err, self.fd.analytic, self.fd.numeric
                ),
            });
        }
        if !(self.adjoint_rel_err < ADJOINT_THRESHOLD) {
            return Err(CliError::Gradcheck {
                param: self.adjoint_param.clone(),
                detail: format!("adjoint vs discrete relative error {:.3e} >= {ADJOINT_THRESHOLD:e}", self.adjoint_rel_err),
            });
        }
        Ok(())
    }
}

/// One row of the ablation summary.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub point: String,
    pub final_test_acc: f64,
    pub param_count: usize,
    pub mean_nfe: f64,
}

pub const SUMMARY_HEADER: &str = "point,final_test_acc,param_count,mean_nfe";

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.point, r.final_test_acc, r.param_count, r.mean_nfe));
    }
    out
}

/// Parses `key=v1,v2,...` into the key and its values.
pub fn parse_sweep(spec: &str) -> Result<(String, Vec<String>), CliError> {
    let bad = || CliError::Sweep(spec.to_string());
    let (key, values) = spec.split_once('=').ok_or_else(bad)?;
    let key = key.trim();
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    if key.is_empty() || values.iter().any(String::is_empty) {
        return Err(bad());
    }
    if !config::KEYS.contains(&key) {
        return Err(ConfigError::UnknownKey(key.to_string()).into());
    }
    Ok((key.to_string(), values))
}

fn run_point(cfg: &RunConfig, key: &str, value: &str, out: &Path) -> Result<SummaryRow, CliError> {
    let mut point = cfg.clone();
    point.set(key, value)?;
    point.validate()?;
    let stem = format!("metrics_{key}={value}");
    let (outcome, _) = run_training(&point, out, &stem, true)?;
    let rows = &outcome.rows;
    Ok(SummaryRow {
        point: format!("{key}={value}"),
        final_test_acc: rows.last().map_or(0.0, |r| r.test_acc),
        param_count: outcome.param_count,
        mean_nfe: if rows.is_empty() { 0.0 } else { rows.iter().map(|r| r.nfe_fwd).sum::<f64>() / rows.len() as f64 },
    })
}

/// `bfno ablate`: one training run per sweep point with the config's seed,
/// a metrics file per point and `summary.csv` in sweep order. With
/// `parallel`, points run on separate threads.
pub fn cmd_ablate(config: &Path, sweep: &str, out: &Path, parallel: bool) -> Result<Vec<SummaryRow>, CliError> {
    let cfg = load_config(config)?;
    ablate(&cfg, sweep, out, parallel)
}

pub fn ablate(cfg: &RunConfig, sweep: &str, out: &Path, parallel: bool) -> Result<Vec<SummaryRow>, CliError> {
    let (key, values) = parse_sweep(sweep)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let echo = out.join("resolved_config.txt");
    fs::write(&echo, cfg.echo()).map_err(io_err(&echo))?;
    let rows: Vec<Result<SummaryRow, CliError>> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = values.iter().map(|v| s.spawn(|| run_point(cfg, &key, v, out))).collect();
            handles.into_iter().map(|h| h.join().expect("ablation worker panicked")).collect()
        })
    } else {
        values.iter().map(|v| run_point(cfg, &key, v, out)).collect()
    };
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    let path = out.join("summary.csv");
    fs::write(&path, summary_csv(&rows)).map_err(io_err(&path))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.insert("a", bfno_core::tensor::Tensor::from_vec(vec![1.5, -2.0, 3.25])).unwrap();
        let p = dir.path().join("p.bin");
        write_snapshot(&p, &store).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 8 + 24);
        assert_eq!(&bytes[..8], &3u64.to_le_bytes());
        assert_eq!(read_snapshot(&p).unwrap(), vec![1.5, -2.0, 3.25]);
        fs::write(&p, &bytes[..20]).unwrap();
        assert!(matches!(read_snapshot(&p), Err(CliError::Snapshot(_))));
        fs::write(&p, &bytes[..5]).unwrap();
        assert!(matches!(read_snapshot(&p), Err(CliError::Snapshot(_))));
    }

    #[test]
    fn sweep_parsing() {
        assert_eq!(parse_sweep("L=1,2,4,8").unwrap(), ("L".to_string(), vec!["1".into(), "2".into(), "4".into(), "8".into()]));
        assert!(matches!(parse_sweep("L"), Err(CliError::Sweep(_))));
        assert!(matches!(parse_sweep("L=1,,2"), Err(CliError::Sweep(_))));
        assert_eq!(parse_sweep("bogus=1").unwrap_err().exit_code(), 1);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::from(ConfigError::UnknownKey("x".into())).exit_code(), 1);
        assert_eq!(CliError::from(DataError::BadMagic(0)).exit_code(), 2);
        let solver = TrainError::Solver(bfno_core::odeint::OdeError::NonFinite { t: 0.5 });
        assert_eq!(CliError::from(solver).exit_code(), 3);
        let g = CliError::Gradcheck { param: "enc.w".into(), detail: String::new() };
        assert_eq!(g.exit_code(), 4);
    }

    #[test]
    fn summary_layout() {
        let rows = vec![SummaryRow { point: "L=1".into(), final_test_acc: 0.5, param_count: 10, mean_nfe: 4.0 }];
        assert_eq!(summary_csv(&rows), "point,final_test_acc,param_count,mean_nfe\nL=1,0.5,10,4\n");
    }
}
