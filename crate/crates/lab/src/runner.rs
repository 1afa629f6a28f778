//! Runs one configured experiment and writes its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use satlab_core::convergence::{
    closed_form_residual, predicted_steps, random_system, verify_qlinear, QlinearVerdict,
    SpectralData,
};
use satlab_core::data::{gen_blobs, split_train_val, Dataset};
use satlab_core::nn::Mlp;
use satlab_core::probe::encoder_eval;
use satlab_core::report::MetricRow;
use satlab_core::sat::{train_erm, train_supervised, LoopOptions, SatLoss};
use satlab_core::selective::{risk_coverage_curve, train_selective};
use satlab_core::ssl::{train_ssl, Encoder};

use crate::config::{echo, ConfigError, ExperimentConfig, Kind};
use crate::output::{write_dataset_csv, write_text, Table};

/// Steps simulated for a system whose learning rate is not stable.
pub const DIVERGENCE_STEPS: usize = 200;
/// Steps compared against the closed-form residual.
pub const CLOSED_FORM_STEPS: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{context}: {source}")]
    Core {
        context: String,
        source: satlab_core::Error,
    },
    #[error("writing {path}: {message}")]
    Output { path: PathBuf, message: String },
}

impl RunError {
    /// Process exit code: 2 for invalid input, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 1,
        }
    }
}

trait Context<T> {
    fn ctx(self, context: impl Into<String>) -> Result<T, RunError>;
}

impl<T> Context<T> for satlab_core::Result<T> {
    fn ctx(self, context: impl Into<String>) -> Result<T, RunError> {
        self.map_err(|source| RunError::Core {
            context: context.into(),
            source,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub kind: Kind,
    pub seed: u64,
    /// One row per epoch (per system for convergence sweeps).
    pub metrics: Table,
    /// Additional tables keyed by file name.
    pub tables: Vec<(&'static str, Table)>,
    pub final_metrics: BTreeMap<String, f64>,
    pub mechanisms: Vec<&'static str>,
    pub config_echo: String,
    pub wall_clock: f64,
    pub dataset: Option<Dataset>,
}

impl RunReport {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.final_metrics.get(name).copied()
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": self.kind.name(),
            "seed": self.seed,
            "final_metrics": self.final_metrics,
            "mechanisms_exercised": self.mechanisms,
            "wall_clock_seconds": self.wall_clock,
        })
    }
}

fn table_of<R: MetricRow>(rows: &[R]) -> Table {
    let mut t = Table::new(R::COLUMNS);
    rows.iter().for_each(|r| t.push(r.values()));
    t
}

fn last_row_metrics(t: &Table, skip: &[&str]) -> BTreeMap<String, f64> {
    t.columns
        .iter()
        .filter(|c| !skip.contains(c))
        .filter_map(|c| Some((c.to_string(), t.last(c)?)))
        .collect()
}

fn blobs(cfg: &ExperimentConfig) -> Result<Dataset, RunError> {
    let d = &cfg.data;
    let ds =
        gen_blobs(d.classes, d.per_class, d.dim, d.spread, cfg.seed).ctx("generating blobs")?;
    match &cfg.noise {
        Some(spec) => Ok(spec.apply(&ds).ctx("corrupting data")?.dataset),
        None => Ok(ds),
    }
}

/// Runs `cfg` without touching the file system.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunReport, RunError> {
    crate::config::validate(cfg)?;
    let start = Instant::now();
    let mut report = match cfg.kind {
        Kind::Erm | Kind::SatSupervised => supervised(cfg)?,
        Kind::Selective => selective(cfg)?,
        Kind::SatSsl | Kind::SslFixedNoise => ssl(cfg)?,
        Kind::ConvergenceSweep => convergence(cfg)?,
    };
    report.wall_clock = start.elapsed().as_secs_f64();
    Ok(report)
}

fn empty_report(cfg: &ExperimentConfig, metrics: Table) -> RunReport {
    RunReport {
        kind: cfg.kind,
        seed: cfg.seed,
        metrics,
        tables: Vec::new(),
        final_metrics: BTreeMap::new(),
        mechanisms: Vec::new(),
        config_echo: echo(cfg),
        wall_clock: 0.0,
        dataset: None,
    }
}

fn supervised(cfg: &ExperimentConfig) -> Result<RunReport, RunError> {
    let ds = blobs(cfg)?;
    let (train, val) = split_train_val(&ds, cfg.data.n_train).ctx("splitting data")?;
    let mut model = Mlp::seeded(&cfg.widths(), cfg.seed).ctx("building model")?;
    let opts = LoopOptions {
        batch_size: cfg.optim.batch_size,
        seed: cfg.seed,
    };
    let rows = if cfg.kind == Kind::Erm {
        train_erm(&mut model, &train, Some(&val), &cfg.optim.sgd, &opts)
            .ctx("training")?
            .1
    } else {
        train_supervised(
            &mut model,
            &train,
            Some(&val),
            &cfg.sat,
            &cfg.optim.sgd,
            &opts,
        )
        .ctx("training")?
        .1
    };
    let mut report = empty_report(cfg, table_of(&rows));
    report.final_metrics = last_row_metrics(&report.metrics, &["epoch", "lr"]);
    let best = rows
        .iter()
        .map(|r| r.clean_val_acc)
        .fold(f64::NEG_INFINITY, f64::max);
    report
        .final_metrics
        .insert("best_clean_val_acc".into(), best);
    report.final_metrics.insert(
        "train_wrong_label_fraction".into(),
        train.wrong_label_fraction(),
    );
    report.mechanisms = if cfg.kind == Kind::Erm {
        vec!["erm_baseline"]
    } else {
        let mut m = vec!["ema_soft_targets", "target_start_epoch", "label_recovery"];
        if cfg.sat.reweight {
            m.push("confidence_reweighting");
        }
        if matches!(cfg.sat.loss, SatLoss::SatSce(_)) {
            m.push("symmetric_cross_entropy");
        }
        m
    };
    if cfg.noise.is_some() {
        report.mechanisms.push("data_corruption");
    }
    report.dataset = cfg.write_dataset.then_some(ds);
    Ok(report)
}

fn selective(cfg: &ExperimentConfig) -> Result<RunReport, RunError> {
    let ds = blobs(cfg)?;
    let (train, val) = split_train_val(&ds, cfg.data.n_train).ctx("splitting data")?;
    let mut model = Mlp::seeded(&cfg.widths(), cfg.seed).ctx("building model")?;
    let opts = LoopOptions {
        batch_size: cfg.optim.batch_size,
        seed: cfg.seed,
    };
    let (_, rows) = train_selective(
        &mut model,
        &train,
        Some(&val),
        &cfg.selective,
        &cfg.optim.sgd,
        &opts,
    )
    .ctx("training")?;
    let curve = risk_coverage_curve(&model, val.inputs(), val.clean_labels(), &cfg.coverages)
        .ctx("risk-coverage evaluation")?;
    let mut rc = Table::new(&["coverage", "tau", "n_classified", "selective_error"]);
    let mut report = empty_report(cfg, table_of(&rows));
    report.final_metrics = last_row_metrics(&report.metrics, &["epoch", "lr"]);
    for p in &curve {
        rc.push(vec![
            p.coverage,
            p.tau,
            p.n_classified as f64,
            p.selective_error,
        ]);
        report.final_metrics.insert(
            format!("selective_error_at_{}", p.requested),
            p.selective_error,
        );
        report
            .final_metrics
            .insert(format!("coverage_at_{}", p.requested), p.coverage);
    }
    report.tables.push(("risk_coverage.csv", rc));
    report.mechanisms = vec!["abstention_class", "ema_soft_targets", "risk_coverage"];
    if cfg.noise.is_some() {
        report.mechanisms.push("data_corruption");
    }
    report.dataset = cfg.write_dataset.then_some(ds);
    Ok(report)
}

fn ssl(cfg: &ExperimentConfig) -> Result<RunReport, RunError> {
    let ds = blobs(cfg)?;
    let (train, test) = split_train_val(&ds, cfg.data.n_train).ctx("splitting data")?;
    let s = &cfg.ssl;
    let init = Encoder::init(&cfg.backbone_widths(), s.proj_hidden, s.embed, cfg.seed)
        .ctx("building encoder")?;
    let probe = |backbone: &Mlp| {
        encoder_eval(
            backbone,
            train.inputs(),
            train.clean_labels(),
            test.inputs(),
            test.clean_labels(),
            cfg.data.classes,
            &s.probe,
        )
    };
    let random_acc = if s.eval_random {
        probe(&init.backbone).ctx("probing the random encoder")?
    } else {
        f64::NAN
    };
    let mut encoder = init;
    let opts = LoopOptions {
        batch_size: cfg.optim.batch_size,
        seed: cfg.seed,
    };
    let run = train_ssl(
        &mut encoder,
        &train,
        Some(&test),
        &s.train,
        &cfg.optim.sgd,
        &opts,
    )
    .ctx("training")?;
    let acc = probe(&encoder.backbone).ctx("probing the trained encoder")?;
    let mut report = empty_report(cfg, table_of(&run.report));
    report.final_metrics = last_row_metrics(&report.metrics, &["epoch"]);
    report.final_metrics.insert("linear_eval_acc".into(), acc);
    report
        .final_metrics
        .insert("random_encoder_acc".into(), random_acc);
    report
        .final_metrics
        .insert("projection_collapse".into(), run.projection_collapse);
    report.mechanisms = if cfg.kind == Kind::SslFixedNoise {
        vec!["fixed_random_targets", "linear_evaluation"]
    } else {
        vec![
            "ema_representation_targets",
            "linear_evaluation",
            "online_probe",
        ]
    };
    if s.train.momentum_encoder {
        report.mechanisms.push("momentum_encoder");
    }
    if s.train.predictor {
        report.mechanisms.push("predictor");
    }
    if s.train.n_views == 2 {
        report.mechanisms.push("two_views");
    }
    report.dataset = cfg.write_dataset.then_some(ds);
    Ok(report)
}

pub const SYSTEM_COLUMNS: &[&str] = &[
    "system",
    "n",
    "d",
    "alpha",
    "eta_over_bound",
    "bound",
    "steps",
    "predicted_steps",
    "final_over_initial",
    "late_ratio",
    "a_i_sq",
    "converged",
    "diverged",
    "divergence_expected",
    "closed_form_error",
];

pub const SWEEP_COLUMNS: &[&str] = &[
    "n",
    "d",
    "alpha",
    "eta_over_bound",
    "k",
    "residual",
    "ratio",
    "a_i_sq",
];

/// Largest max-norm gap between simulated and closed-form residual vectors
/// over the first `steps` steps.
pub fn closed_form_error(
    sys: &satlab_core::convergence::LinearSystem,
    steps: usize,
) -> satlab_core::Result<f64> {
    let spectral = SpectralData::of(sys)?;
    let mut state = sys.clone();
    let mut worst: f64 = 0.0;
    for k in 0..=steps {
        let exact = closed_form_residual(&spectral, k);
        let sim = state.residual_vector();
        worst = sim
            .iter()
            .zip(&exact)
            .fold(worst, |w, (a, b)| w.max((a - b).abs()));
        state.step();
    }
    Ok(worst)
}

/// Verdict for `sys` run for `k_max` steps, or for its predicted step count.
pub fn verdict_for(
    sys: &satlab_core::convergence::LinearSystem,
    k_max: Option<usize>,
    residual_tol: f64,
    ratio_tol: f64,
) -> satlab_core::Result<QlinearVerdict> {
    let steps = match k_max {
        Some(k) => k,
        None => predicted_steps(&SpectralData::of(sys)?, residual_tol).unwrap_or(DIVERGENCE_STEPS),
    };
    verify_qlinear(sys, steps.max(1), residual_tol, ratio_tol)
}

fn convergence(cfg: &ExperimentConfig) -> Result<RunReport, RunError> {
    let c = &cfg.convergence;
    let mut systems = Table::new(SYSTEM_COLUMNS);
    let mut sweep = Table::new(SWEEP_COLUMNS);
    let mut index = 0u64;
    let (mut converged, mut diverged, mut expected, mut agree) = (0.0, 0.0, 0.0, 0.0);
    let mut worst_closed_form: f64 = 0.0;
    for &alpha in &c.alphas {
        for &frac in &c.eta_fracs {
            for _ in 0..c.systems {
                let sys_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(index);
                let sys = random_system(c.n, c.d, alpha, frac, c.design, sys_seed)
                    .ctx(format!("building system {index}"))?;
                let v = verdict_for(&sys, c.k_max, c.residual_tol, c.ratio_tol)
                    .ctx(format!("system {index}"))?;
                let steps = v.residuals.len() - 1;
                let cf = if v.divergence_expected {
                    f64::NAN
                } else {
                    let e = closed_form_error(&sys, steps.min(CLOSED_FORM_STEPS))
                        .ctx(format!("system {index}"))?;
                    worst_closed_form = worst_closed_form.max(e);
                    e
                };
                converged += f64::from(u8::from(v.converged()));
                diverged += f64::from(u8::from(v.diverged));
                expected += f64::from(u8::from(v.divergence_expected));
                let consistent = if v.divergence_expected {
                    v.diverged
                } else {
                    v.converged()
                };
                agree += f64::from(u8::from(consistent));
                systems.push(vec![
                    index as f64,
                    c.n as f64,
                    c.d as f64,
                    alpha,
                    v.eta_over_bound,
                    v.bound,
                    steps as f64,
                    v.predicted_steps.map_or(f64::NAN, |k| k as f64),
                    v.final_residual() / v.r0,
                    v.late_ratio,
                    v.a_sq,
                    f64::from(u8::from(v.converged())),
                    f64::from(u8::from(v.diverged)),
                    f64::from(u8::from(v.divergence_expected)),
                    cf,
                ]);
                for (k, r) in v.residuals.iter().enumerate() {
                    let ratio = if k == 0 {
                        f64::NAN
                    } else {
                        r / v.residuals[k - 1]
                    };
                    sweep.push(vec![
                        c.n as f64,
                        c.d as f64,
                        alpha,
                        v.eta_over_bound,
                        k as f64,
                        *r,
                        ratio,
                        v.a_sq,
                    ]);
                }
                index += 1;
            }
        }
    }
    let mut report = empty_report(cfg, systems);
    report.tables.push(("sweep.csv", sweep));
    let fm = &mut report.final_metrics;
    fm.insert("systems".into(), index as f64);
    fm.insert("converged".into(), converged);
    fm.insert("diverged".into(), diverged);
    fm.insert("divergence_expected".into(), expected);
    fm.insert("verdicts_consistent".into(), agree);
    fm.insert("max_closed_form_error".into(), worst_closed_form);
    report.mechanisms = vec![
        "alternating_dynamics",
        "closed_form_residual",
        "stable_step_bound",
        "q_linear_rate",
    ];
    Ok(report)
}

fn out_err(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Writes `config.txt`, `metrics.csv`, the extra tables, `summary.json` and
/// (when requested) `dataset.csv` into `dir`.
pub fn write_outputs(report: &RunReport, dir: &Path) -> Result<(), RunError> {
    std::fs::create_dir_all(dir).map_err(|e| out_err(dir, e))?;
    let path = dir.join("config.txt");
    write_text(&path, &report.config_echo).map_err(|e| out_err(&path, e))?;
    let path = dir.join("metrics.csv");
    report
        .metrics
        .write_csv(&path)
        .map_err(|e| out_err(&path, e))?;
    for (name, table) in &report.tables {
        let path = dir.join(name);
        table.write_csv(&path).map_err(|e| out_err(&path, e))?;
    }
    if let Some(ds) = &report.dataset {
        let path = dir.join("dataset.csv");
        write_dataset_csv(ds, &path).map_err(|e| out_err(&path, e))?;
    }
    let path = dir.join("summary.json");
    let json =
        serde_json::to_string_pretty(&report.summary_json()).map_err(|e| out_err(&path, e))?;
    write_text(&path, &(json + "\n")).map_err(|e| out_err(&path, e))?;
    Ok(())
}

/// Runs `cfg` and writes its outputs under [`ExperimentConfig::run_dir`].
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport, RunError> {
    let report = execute(cfg)?;
    write_outputs(&report, &cfg.run_dir())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{load_config, parse_config};

    fn small(kind: &str, extra: &str, out: &Path) -> ExperimentConfig {
        let text = format!(
            "experiment.kind = {kind}\nexperiment.out_dir = {}\ndata.per_class = 40\ndata.dim = 6\ndata.n_train = 300\n\
             optim.epochs = 4\noptim.batch_size = 32\n{extra}",
            out.display()
        );
        parse_config(&text).unwrap()
    }

    #[test]
    fn supervised_rows_match_epochs_and_summary_matches_last_row() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(
            "sat_supervised",
            "model.hidden = 16\nnoise.scheme = symmetric_labels\n",
            dir.path(),
        );
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.metrics.rows.len(), 4);
        assert_eq!(
            report.metric("clean_val_acc"),
            report.metrics.last("clean_val_acc")
        );
        let run = cfg.run_dir();
        let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
        assert!(csv.starts_with("epoch,lr,noisy_train_acc,clean_train_acc,noisy_val_acc,clean_val_acc,loss,recovery_acc,mean_clean_weight,mean_corrupt_weight\n"));
        assert_eq!(csv.lines().count(), 5);
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap())
                .unwrap();
        assert_eq!(summary["kind"], "sat_supervised");
        assert!(summary["final_metrics"]["recovery_acc"].is_number());
        assert_eq!(load_config(&run.join("config.txt")).unwrap(), cfg);
    }

    #[test]
    fn reruns_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(
            "selective",
            "model.hidden = 16\nselective.coverages = 1, 0.5\n",
            dir.path(),
        );
        run_experiment(&cfg).unwrap();
        let read = |f: &str| std::fs::read(cfg.run_dir().join(f)).unwrap();
        let (a, b) = (read("metrics.csv"), read("risk_coverage.csv"));
        run_experiment(&cfg).unwrap();
        assert_eq!(read("metrics.csv"), a);
        assert_eq!(read("risk_coverage.csv"), b);
        assert_eq!(
            String::from_utf8(b).unwrap().lines().next().unwrap(),
            "coverage,tau,n_classified,selective_error"
        );
    }

    #[test]
    fn ssl_kinds_run() {
        let dir = tempfile::tempdir().unwrap();
        for kind in ["sat_ssl", "ssl_fixed_noise"] {
            let cfg = small(
                kind,
                "ssl.backbone = 8, 4\nssl.proj_hidden = 8\nssl.embed = 4\nssl.probe_epochs = 2\n",
                dir.path(),
            );
            let r = execute(&cfg).unwrap();
            assert_eq!(r.metrics.rows.len(), 4);
            assert!(r.metric("linear_eval_acc").unwrap() > 0.0);
            assert!(r.metric("random_encoder_acc").unwrap() > 0.0);
        }
    }

    #[test]
    fn convergence_sweep_matches_direct_verdicts() {
        let cfg = parse_config(
            "experiment.kind = convergence_sweep\nconvergence.n = 8\nconvergence.d = 4\nconvergence.systems = 3\n\
             convergence.alphas = 0.5, 0.9\nconvergence.eta_fracs = 0.5, 1.1\nconvergence.design = well_conditioned\n",
        )
        .unwrap();
        let r = execute(&cfg).unwrap();
        assert_eq!(r.metrics.rows.len(), 12);
        assert_eq!(r.metric("verdicts_consistent"), Some(12.0));
        let c = &cfg.convergence;
        let mut index = 0u64;
        for &alpha in &c.alphas {
            for &frac in &c.eta_fracs {
                for _ in 0..c.systems {
                    let sys = random_system(c.n, c.d, alpha, frac, c.design, index).unwrap();
                    let v = verdict_for(&sys, c.k_max, c.residual_tol, c.ratio_tol).unwrap();
                    let row = &r.metrics.rows[index as usize];
                    assert_eq!(row[11], f64::from(u8::from(v.converged())));
                    assert_eq!(row[12], f64::from(u8::from(v.diverged)));
                    assert_eq!(row[9].to_bits(), v.late_ratio.to_bits());
                    index += 1;
                }
            }
        }
        let sweep = r.table("sweep.csv").unwrap();
        let total: usize = r.metrics.rows.iter().map(|row| row[6] as usize + 1).sum();
        assert_eq!(sweep.rows.len(), total);
    }

    #[test]
    fn invalid_config_maps_to_exit_code_two() {
        let mut cfg = parse_config("experiment.kind = erm").unwrap();
        cfg.optim.sgd.lr = -1.0;
        let err = execute(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("optim.lr"));
    }
}
