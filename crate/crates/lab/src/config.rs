//! Experiment configuration files.
//!
//! The format is one `section.key = value` assignment per line. `#` starts a
//! comment, blank lines are ignored, and lists are comma separated. Every key
//! has a default, so a file only needs `experiment.kind`. Sections that the
//! selected kind does not use are rejected rather than silently ignored.
//!
//! ```text
//! experiment.kind = sat_supervised
//! experiment.seed = 3
//! noise.scheme = symmetric_labels
//! noise.rate = 0.4
//! model.hidden = 128, 128
//! ```

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use satlab_core::convergence::Design;
use satlab_core::losses::SceWeights;
use satlab_core::noise::{CorruptionSpec, Scheme};
use satlab_core::optim::{Schedule, SgdConfig};
use satlab_core::probe::ProbeConfig;
use satlab_core::sat::{start_epoch_for, SatConfig, SatLoss};
use satlab_core::selective::SelectiveConfig;
use satlab_core::ssl::{Augment, SslConfig};

/// Offset between the experiment seed and the label-noise seed.
pub const NOISE_SEED_OFFSET: u64 = 100;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: `{key}` assigned twice")]
    Duplicate { key: String, line: usize },
    #[error("unknown key `{key}`{}", suggestion.as_ref().map(|s| format!(" (did you mean `{s}`?)")).unwrap_or_default())]
    UnknownKey {
        key: String,
        suggestion: Option<String>,
    },
    #[error("`{key}`: expected {expected}, found `{value}`")]
    Type {
        key: String,
        expected: &'static str,
        value: String,
    },
    #[error("`{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("`{key}` is not used by experiment kind {kind}")]
    Unused { key: String, kind: Kind },
    #[error("`experiment.kind` is required")]
    MissingKind,
}

type Result<T> = std::result::Result<T, ConfigError>;

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Erm,
    SatSupervised,
    Selective,
    SatSsl,
    SslFixedNoise,
    ConvergenceSweep,
}

impl Kind {
    pub const ALL: [Kind; 6] = [
        Kind::Erm,
        Kind::SatSupervised,
        Kind::Selective,
        Kind::SatSsl,
        Kind::SslFixedNoise,
        Kind::ConvergenceSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kind::Erm => "erm",
            Kind::SatSupervised => "sat_supervised",
            Kind::Selective => "selective",
            Kind::SatSsl => "sat_ssl",
            Kind::SslFixedNoise => "ssl_fixed_noise",
            Kind::ConvergenceSweep => "convergence_sweep",
        }
    }

    /// Sections read by this kind, in echo order.
    pub fn sections(self) -> &'static [&'static str] {
        match self {
            Kind::Erm => &["experiment", "data", "noise", "model", "optim"],
            Kind::SatSupervised => &["experiment", "data", "noise", "model", "optim", "sat"],
            Kind::Selective => &["experiment", "data", "noise", "model", "optim", "selective"],
            Kind::SatSsl | Kind::SslFixedNoise => &["experiment", "data", "optim", "ssl"],
            Kind::ConvergenceSweep => &["experiment", "convergence"],
        }
    }

    pub fn is_ssl(self) -> bool {
        matches!(self, Kind::SatSsl | Kind::SslFixedNoise)
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kind {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        Kind::ALL.into_iter().find(|k| k.name() == s).ok_or(())
    }
}

/// Every recognised key.
pub const KEYS: &[&str] = &[
    "experiment.kind",
    "experiment.name",
    "experiment.seed",
    "experiment.out_dir",
    "experiment.write_dataset",
    "data.classes",
    "data.per_class",
    "data.dim",
    "data.spread",
    "data.n_train",
    "noise.scheme",
    "noise.rate",
    "model.hidden",
    "optim.lr",
    "optim.momentum",
    "optim.weight_decay",
    "optim.warmup_epochs",
    "optim.epochs",
    "optim.schedule",
    "optim.milestones",
    "optim.step_factor",
    "optim.batch_size",
    "sat.start_epoch",
    "sat.alpha",
    "sat.reweight",
    "sat.sce",
    "sat.sce_forward",
    "sat.sce_reverse",
    "selective.start_epoch",
    "selective.alpha",
    "selective.renormalize",
    "selective.coverages",
    "ssl.backbone",
    "ssl.proj_hidden",
    "ssl.embed",
    "ssl.alpha",
    "ssl.beta",
    "ssl.n_views",
    "ssl.predictor",
    "ssl.momentum_encoder",
    "ssl.aug_noise",
    "ssl.aug_mask",
    "ssl.aug_scale",
    "ssl.renormalize_on_store",
    "ssl.probe_epochs",
    "ssl.probe_lr",
    "ssl.eval_random",
    "convergence.n",
    "convergence.d",
    "convergence.systems",
    "convergence.alphas",
    "convergence.eta_fracs",
    "convergence.design",
    "convergence.k_max",
    "convergence.residual_tol",
    "convergence.ratio_tol",
];

#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub n_train: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimSpec {
    pub sgd: SgdConfig,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslSpec {
    /// Backbone hidden and output widths (the input width comes from the data).
    pub backbone: Vec<usize>,
    pub proj_hidden: usize,
    pub embed: usize,
    pub train: SslConfig,
    pub probe: ProbeConfig,
    /// Also score a freshly initialised encoder with the same probe.
    pub eval_random: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceSpec {
    pub n: usize,
    pub d: usize,
    pub systems: usize,
    pub alphas: Vec<f64>,
    pub eta_fracs: Vec<f64>,
    pub design: Design,
    /// `None` runs each system for its predicted step count.
    pub k_max: Option<usize>,
    pub residual_tol: f64,
    pub ratio_tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: Kind,
    pub name: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub write_dataset: bool,
    pub data: DataSpec,
    /// Absent when no corruption is applied.
    pub noise: Option<CorruptionSpec>,
    pub hidden: Vec<usize>,
    pub optim: OptimSpec,
    pub sat: SatConfig,
    pub selective: SelectiveConfig,
    pub coverages: Vec<f64>,
    pub ssl: SslSpec,
    pub convergence: ConvergenceSpec,
}

impl ExperimentConfig {
    /// Directory holding this run's outputs.
    pub fn run_dir(&self) -> PathBuf {
        self.out_dir
            .join(format!("{}-seed{}", self.name, self.seed))
    }

    /// Layer widths of the supervised model.
    pub fn widths(&self) -> Vec<usize> {
        let out = match self.kind {
            Kind::Selective => self.data.classes + 1,
            _ => self.data.classes,
        };
        let mut w = vec![self.data.dim];
        w.extend(&self.hidden);
        w.push(out);
        w
    }

    pub fn backbone_widths(&self) -> Vec<usize> {
        let mut w = vec![self.data.dim];
        w.extend(&self.ssl.backbone);
        w
    }

    /// Replaces the seed, keeping the noise seed tied to it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.ssl.probe.seed = seed;
        if let Some(n) = &mut self.noise {
            n.seed = seed + NOISE_SEED_OFFSET;
        }
        self
    }
}

/// Assignments of one file, in key order, with their line numbers.
struct Raw(BTreeMap<String, (String, usize)>);

impl Raw {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: line_no,
                reason: format!("expected `section.key = value`, found `{body}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !key.contains('.') {
                return Err(ConfigError::Syntax {
                    line: line_no,
                    reason: format!("key `{key}` has no section"),
                });
            }
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                    suggestion: nearest_key(key),
                });
            }
            if map
                .insert(key.to_string(), (value.to_string(), line_no))
                .is_some()
            {
                return Err(ConfigError::Duplicate {
                    key: key.to_string(),
                    line: line_no,
                });
            }
        }
        Ok(Self(map))
    }

    fn get<T: FromStr>(&self, key: &str, expected: &'static str, default: T) -> Result<T> {
        match self.0.get(key) {
            None => Ok(default),
            Some((v, _)) => v.parse().map_err(|_| ConfigError::Type {
                key: key.to_string(),
                expected,
                value: v.clone(),
            }),
        }
    }

    fn get_list<T: FromStr>(
        &self,
        key: &str,
        expected: &'static str,
        default: Vec<T>,
    ) -> Result<Vec<T>> {
        match self.0.get(key) {
            None => Ok(default),
            Some((v, _)) => v
                .split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse().map_err(|_| ConfigError::Type {
                        key: key.to_string(),
                        expected,
                        value: v.clone(),
                    })
                })
                .collect(),
        }
    }

    fn get_str(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(|(v, _)| v.as_str())
    }
}

/// Closest known key by edit distance, if reasonably close.
pub fn nearest_key(key: &str) -> Option<String> {
    KEYS.iter()
        .map(|k| (strsim::levenshtein(key, k), *k))
        .min()
        .filter(|(d, _)| *d <= key.len().max(4) / 2)
        .map(|(_, k)| k.to_string())
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let raw = Raw::parse(text)?;
    let kind_text = raw
        .get_str("experiment.kind")
        .ok_or(ConfigError::MissingKind)?;
    let kind: Kind = kind_text.parse().map_err(|_| ConfigError::Type {
        key: "experiment.kind".into(),
        expected:
            "one of erm, sat_supervised, selective, sat_ssl, ssl_fixed_noise, convergence_sweep",
        value: kind_text.to_string(),
    })?;
    if let Some(key) = raw.0.keys().find(|k| {
        !kind
            .sections()
            .iter()
            .any(|s| k.starts_with(&format!("{s}.")))
    }) {
        return Err(ConfigError::Unused {
            key: key.clone(),
            kind,
        });
    }

    let seed: u64 = raw.get("experiment.seed", "a non-negative integer", 0)?;
    let name = raw
        .get_str("experiment.name")
        .unwrap_or(kind.name())
        .to_string();
    if name.is_empty() || name.contains(['/', '\\']) {
        return Err(invalid("experiment.name", "must be a non-empty file name"));
    }
    let out_dir = PathBuf::from(raw.get_str("experiment.out_dir").unwrap_or("runs"));
    let write_dataset = raw.get("experiment.write_dataset", "true or false", false)?;

    let data = DataSpec {
        classes: raw.get("data.classes", "an integer", 10)?,
        per_class: raw.get("data.per_class", "an integer", 600)?,
        dim: raw.get("data.dim", "an integer", 16)?,
        spread: raw.get("data.spread", "a real number", 0.4)?,
        n_train: raw.get("data.n_train", "an integer", 5000)?,
    };

    let scheme = raw.get_str("noise.scheme").unwrap_or("none");
    let noise = match scheme {
        "none" => None,
        s => {
            let scheme = Scheme::from_name(s).ok_or_else(|| ConfigError::Type {
                key: "noise.scheme".into(),
                expected: "none or a corruption scheme name",
                value: s.to_string(),
            })?;
            Some(CorruptionSpec {
                scheme,
                rate: raw.get("noise.rate", "a real number", 0.4)?,
                seed: seed + NOISE_SEED_OFFSET,
            })
        }
    };
    if noise.is_none() && raw.0.contains_key("noise.rate") {
        return Err(invalid("noise.rate", "set without a noise.scheme"));
    }

    let hidden = raw.get_list("model.hidden", "comma-separated integers", vec![128, 128])?;

    let schedule = match raw.get_str("optim.schedule").unwrap_or("cosine") {
        "cosine" => Schedule::Cosine,
        "constant" => Schedule::Constant,
        "step" => Schedule::Step {
            milestones: raw.get_list("optim.milestones", "comma-separated integers", vec![])?,
            factor: raw.get("optim.step_factor", "a real number", 0.1)?,
        },
        s => {
            return Err(ConfigError::Type {
                key: "optim.schedule".into(),
                expected: "cosine, constant or step",
                value: s.to_string(),
            })
        }
    };
    if !matches!(schedule, Schedule::Step { .. }) {
        for key in ["optim.milestones", "optim.step_factor"] {
            if raw.0.contains_key(key) {
                return Err(invalid(key, "only used by the step schedule"));
            }
        }
    }
    let sgd = SgdConfig {
        lr: raw.get("optim.lr", "a real number", 0.1)?,
        momentum: raw.get("optim.momentum", "a real number", 0.9)?,
        weight_decay: raw.get("optim.weight_decay", "a real number", 5e-4)?,
        warmup_epochs: raw.get("optim.warmup_epochs", "an integer", 0)?,
        epochs: raw.get("optim.epochs", "an integer", 100)?,
        schedule,
    };
    let optim = OptimSpec {
        sgd,
        batch_size: raw.get(
            "optim.batch_size",
            "an integer",
            if kind.is_ssl() { 64 } else { 128 },
        )?,
    };

    let epochs = optim.sgd.epochs;
    let sce = raw.get("sat.sce", "true or false", false)?;
    let sat = SatConfig {
        start_epoch: raw.get(
            "sat.start_epoch",
            "an integer",
            start_epoch_for(epochs, 0.3),
        )?,
        alpha: raw.get("sat.alpha", "a real number", 0.9)?,
        reweight: raw.get("sat.reweight", "true or false", true)?,
        loss: if sce {
            let d = SceWeights::default();
            SatLoss::SatSce(SceWeights {
                forward: raw.get("sat.sce_forward", "a real number", d.forward)?,
                reverse: raw.get("sat.sce_reverse", "a real number", d.reverse)?,
            })
        } else {
            for key in ["sat.sce_forward", "sat.sce_reverse"] {
                if raw.0.contains_key(key) {
                    return Err(invalid(key, "set while sat.sce = false"));
                }
            }
            SatLoss::Sat
        },
    };

    let sel_default = SelectiveConfig::default();
    let selective = SelectiveConfig {
        start_epoch: raw.get(
            "selective.start_epoch",
            "an integer",
            sel_default.start_epoch,
        )?,
        alpha: raw.get("selective.alpha", "a real number", sel_default.alpha)?,
        renormalize: raw.get(
            "selective.renormalize",
            "true or false",
            sel_default.renormalize,
        )?,
    };
    let coverages = raw.get_list(
        "selective.coverages",
        "comma-separated reals",
        vec![1.0, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7],
    )?;

    let base = if kind == Kind::SslFixedNoise {
        SslConfig::fixed_noise()
    } else {
        SslConfig::default()
    };
    let probe_default = ProbeConfig::default();
    let ssl = SslSpec {
        backbone: raw.get_list("ssl.backbone", "comma-separated integers", vec![64, 16])?,
        proj_hidden: raw.get("ssl.proj_hidden", "an integer", 64)?,
        embed: raw.get("ssl.embed", "an integer", 32)?,
        train: SslConfig {
            alpha: raw.get("ssl.alpha", "a real number", base.alpha)?,
            beta: raw.get("ssl.beta", "a real number", base.beta)?,
            n_views: raw.get("ssl.n_views", "1 or 2", base.n_views)?,
            predictor: raw.get("ssl.predictor", "true or false", base.predictor)?,
            momentum_encoder: raw.get(
                "ssl.momentum_encoder",
                "true or false",
                base.momentum_encoder,
            )?,
            augment: Augment {
                noise: raw.get("ssl.aug_noise", "a real number", base.augment.noise)?,
                mask: raw.get("ssl.aug_mask", "a real number", base.augment.mask)?,
                scale: raw.get("ssl.aug_scale", "a real number", base.augment.scale)?,
            },
            alpha_ramp: None,
            beta_ramp: None,
            renormalize_on_store: raw.get(
                "ssl.renormalize_on_store",
                "true or false",
                base.renormalize_on_store,
            )?,
        },
        probe: ProbeConfig {
            sgd: SgdConfig {
                epochs: raw.get("ssl.probe_epochs", "an integer", probe_default.sgd.epochs)?,
                lr: raw.get("ssl.probe_lr", "a real number", probe_default.sgd.lr)?,
                ..probe_default.sgd.clone()
            },
            seed,
            ..probe_default
        },
        eval_random: raw.get("ssl.eval_random", "true or false", true)?,
    };

    let design = match raw.get_str("convergence.design").unwrap_or("gaussian") {
        "gaussian" => Design::Gaussian,
        "well_conditioned" => Design::WellConditioned,
        s => {
            return Err(ConfigError::Type {
                key: "convergence.design".into(),
                expected: "gaussian or well_conditioned",
                value: s.to_string(),
            })
        }
    };
    let k_max = match raw.get_str("convergence.k_max").unwrap_or("auto") {
        "auto" => None,
        _ => Some(raw.get("convergence.k_max", "auto or an integer", 0)?),
    };
    let convergence = ConvergenceSpec {
        n: raw.get("convergence.n", "an integer", 30)?,
        d: raw.get("convergence.d", "an integer", 10)?,
        systems: raw.get("convergence.systems", "an integer", 10)?,
        alphas: raw.get_list(
            "convergence.alphas",
            "comma-separated reals",
            vec![0.5, 0.9, 0.99],
        )?,
        eta_fracs: raw.get_list(
            "convergence.eta_fracs",
            "comma-separated reals",
            vec![0.5, 1.1],
        )?,
        design,
        k_max,
        residual_tol: raw.get("convergence.residual_tol", "a real number", 1e-12)?,
        ratio_tol: raw.get("convergence.ratio_tol", "a real number", 1e-6)?,
    };

    let cfg = ExperimentConfig {
        kind,
        name,
        seed,
        out_dir,
        write_dataset,
        data,
        noise,
        hidden,
        optim,
        sat,
        selective,
        coverages,
        ssl,
        convergence,
    };
    validate(&cfg)?;
    Ok(cfg)
}

fn unit_open(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(invalid(key, format!("{v} outside (0, 1)")))
    }
}

fn unit_closed(key: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(invalid(key, format!("{v} outside [0, 1]")))
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(key, format!("{v} must be positive")))
    }
}

fn at_least(key: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(invalid(key, format!("{v} is below the minimum {min}")))
    }
}

fn widths(key: &str, w: &[usize]) -> Result<()> {
    if w.contains(&0) {
        return Err(invalid(key, "layer widths must be positive"));
    }
    Ok(())
}

/// Range and cross-field checks for the sections `cfg.kind` uses.
pub fn validate(cfg: &ExperimentConfig) -> Result<()> {
    let kind = cfg.kind;
    if kind != Kind::ConvergenceSweep {
        let d = &cfg.data;
        at_least("data.classes", d.classes, 2)?;
        at_least("data.per_class", d.per_class, 1)?;
        at_least("data.dim", d.dim, 2)?;
        if !(d.spread >= 0.0 && d.spread.is_finite()) {
            return Err(invalid(
                "data.spread",
                format!("{} must be finite and non-negative", d.spread),
            ));
        }
        let total = d.classes * d.per_class;
        if d.n_train == 0 || d.n_train >= total {
            return Err(invalid(
                "data.n_train",
                format!(
                    "{} must leave both splits non-empty out of {total}",
                    d.n_train
                ),
            ));
        }
        let s = &cfg.optim.sgd;
        positive("optim.lr", s.lr)?;
        if !(0.0..1.0).contains(&s.momentum) {
            return Err(invalid(
                "optim.momentum",
                format!("{} outside [0, 1)", s.momentum),
            ));
        }
        if !(s.weight_decay >= 0.0 && s.weight_decay.is_finite()) {
            return Err(invalid("optim.weight_decay", "must be non-negative"));
        }
        at_least("optim.epochs", s.epochs, 1)?;
        if s.warmup_epochs >= s.epochs {
            return Err(invalid(
                "optim.warmup_epochs",
                "must be smaller than optim.epochs",
            ));
        }
        if let Schedule::Step { factor, .. } = &s.schedule {
            positive("optim.step_factor", *factor)?;
        }
        at_least("optim.batch_size", cfg.optim.batch_size, 1)?;
    }
    if matches!(kind, Kind::Erm | Kind::SatSupervised | Kind::Selective) {
        widths("model.hidden", &cfg.hidden)?;
        if let Some(n) = &cfg.noise {
            unit_closed("noise.rate", n.rate)?;
            if n.scheme == Scheme::AsymmetricCircular && n.rate > 0.5 {
                return Err(invalid(
                    "noise.rate",
                    "circular flipping is defined for rates up to 0.5",
                ));
            }
        }
    }
    match kind {
        Kind::SatSupervised => {
            unit_open("sat.alpha", cfg.sat.alpha)?;
            if let SatLoss::SatSce(w) = cfg.sat.loss {
                if !(w.forward >= 0.0 && w.reverse >= 0.0) {
                    return Err(invalid(
                        "sat.sce_forward",
                        "SCE coefficients must be non-negative",
                    ));
                }
            }
        }
        Kind::Selective => {
            unit_open("selective.alpha", cfg.selective.alpha)?;
            if cfg.coverages.is_empty() {
                return Err(invalid(
                    "selective.coverages",
                    "needs at least one coverage",
                ));
            }
            for &q in &cfg.coverages {
                if !(q > 0.0 && q <= 1.0) {
                    return Err(invalid(
                        "selective.coverages",
                        format!("{q} outside (0, 1]"),
                    ));
                }
            }
        }
        Kind::SatSsl | Kind::SslFixedNoise => {
            let s = &cfg.ssl;
            if s.backbone.is_empty() {
                return Err(invalid("ssl.backbone", "needs at least one layer"));
            }
            widths("ssl.backbone", &s.backbone)?;
            at_least("ssl.proj_hidden", s.proj_hidden, 1)?;
            at_least("ssl.embed", s.embed, 2)?;
            let t = &s.train;
            unit_closed("ssl.alpha", t.alpha)?;
            unit_closed("ssl.beta", t.beta)?;
            if kind == Kind::SslFixedNoise && t.alpha != 1.0 {
                return Err(invalid(
                    "ssl.alpha",
                    "the fixed-noise variant keeps its targets, so alpha must be 1",
                ));
            }
            if !(1..=2).contains(&t.n_views) {
                return Err(invalid(
                    "ssl.n_views",
                    format!("{} not in {{1, 2}}", t.n_views),
                ));
            }
            for (key, v) in [
                ("ssl.aug_noise", t.augment.noise),
                ("ssl.aug_mask", t.augment.mask),
                ("ssl.aug_scale", t.augment.scale),
            ] {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(invalid(key, format!("{v} must be finite and non-negative")));
                }
            }
            if t.augment.mask >= 1.0 {
                return Err(invalid("ssl.aug_mask", "must be below 1"));
            }
            if t.augment.scale >= 1.0 {
                return Err(invalid("ssl.aug_scale", "must be below 1"));
            }
            at_least("ssl.probe_epochs", s.probe.sgd.epochs, 1)?;
            positive("ssl.probe_lr", s.probe.sgd.lr)?;
            t.validate().map_err(|e| invalid("ssl", e.to_string()))?;
        }
        Kind::ConvergenceSweep => {
            let c = &cfg.convergence;
            at_least("convergence.n", c.n, 1)?;
            at_least("convergence.d", c.d, 1)?;
            at_least("convergence.systems", c.systems, 1)?;
            if c.alphas.is_empty() {
                return Err(invalid("convergence.alphas", "needs at least one value"));
            }
            for &a in &c.alphas {
                unit_open("convergence.alphas", a)?;
            }
            if c.eta_fracs.is_empty() {
                return Err(invalid("convergence.eta_fracs", "needs at least one value"));
            }
            for &f in &c.eta_fracs {
                if !(f >= 0.0 && f.is_finite()) {
                    return Err(invalid(
                        "convergence.eta_fracs",
                        format!("{f} must be finite and non-negative"),
                    ));
                }
            }
            if c.k_max == Some(0) {
                return Err(invalid("convergence.k_max", "must be auto or at least 1"));
            }
            unit_open("convergence.residual_tol", c.residual_tol)?;
            positive("convergence.ratio_tol", c.ratio_tol)?;
        }
        Kind::Erm => {}
    }
    Ok(())
}

fn list<T: fmt::Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Fully resolved config in the input format: every key the kind reads,
/// defaults included. Parsing the echo yields the same config.
pub fn echo(cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(out, "{k} = {v}");
    };
    let sections = cfg.kind.sections();
    put("experiment.kind", cfg.kind.to_string());
    put("experiment.name", cfg.name.clone());
    put("experiment.seed", cfg.seed.to_string());
    put("experiment.out_dir", cfg.out_dir.display().to_string());
    put("experiment.write_dataset", cfg.write_dataset.to_string());
    if sections.contains(&"data") {
        let d = &cfg.data;
        put("data.classes", d.classes.to_string());
        put("data.per_class", d.per_class.to_string());
        put("data.dim", d.dim.to_string());
        put("data.spread", d.spread.to_string());
        put("data.n_train", d.n_train.to_string());
    }
    if sections.contains(&"noise") {
        match &cfg.noise {
            None => put("noise.scheme", "none".into()),
            Some(n) => {
                put("noise.scheme", n.scheme.name().into());
                put("noise.rate", n.rate.to_string());
            }
        }
    }
    if sections.contains(&"model") {
        put("model.hidden", list(&cfg.hidden));
    }
    if sections.contains(&"optim") {
        let s = &cfg.optim.sgd;
        put("optim.lr", s.lr.to_string());
        put("optim.momentum", s.momentum.to_string());
        put("optim.weight_decay", s.weight_decay.to_string());
        put("optim.warmup_epochs", s.warmup_epochs.to_string());
        put("optim.epochs", s.epochs.to_string());
        match &s.schedule {
            Schedule::Cosine => put("optim.schedule", "cosine".into()),
            Schedule::Constant => put("optim.schedule", "constant".into()),
            Schedule::Step { milestones, factor } => {
                put("optim.schedule", "step".into());
                put("optim.milestones", list(milestones));
                put("optim.step_factor", factor.to_string());
            }
        }
        put("optim.batch_size", cfg.optim.batch_size.to_string());
    }
    if sections.contains(&"sat") {
        let s = &cfg.sat;
        put("sat.start_epoch", s.start_epoch.to_string());
        put("sat.alpha", s.alpha.to_string());
        put("sat.reweight", s.reweight.to_string());
        match s.loss {
            SatLoss::Sat => put("sat.sce", "false".into()),
            SatLoss::SatSce(w) => {
                put("sat.sce", "true".into());
                put("sat.sce_forward", w.forward.to_string());
                put("sat.sce_reverse", w.reverse.to_string());
            }
        }
    }
    if sections.contains(&"selective") {
        let s = &cfg.selective;
        put("selective.start_epoch", s.start_epoch.to_string());
        put("selective.alpha", s.alpha.to_string());
        put("selective.renormalize", s.renormalize.to_string());
        put("selective.coverages", list(&cfg.coverages));
    }
    if sections.contains(&"ssl") {
        let s = &cfg.ssl;
        let t = &s.train;
        put("ssl.backbone", list(&s.backbone));
        put("ssl.proj_hidden", s.proj_hidden.to_string());
        put("ssl.embed", s.embed.to_string());
        put("ssl.alpha", t.alpha.to_string());
        put("ssl.beta", t.beta.to_string());
        put("ssl.n_views", t.n_views.to_string());
        put("ssl.predictor", t.predictor.to_string());
        put("ssl.momentum_encoder", t.momentum_encoder.to_string());
        put("ssl.aug_noise", t.augment.noise.to_string());
        put("ssl.aug_mask", t.augment.mask.to_string());
        put("ssl.aug_scale", t.augment.scale.to_string());
        put(
            "ssl.renormalize_on_store",
            t.renormalize_on_store.to_string(),
        );
        put("ssl.probe_epochs", s.probe.sgd.epochs.to_string());
        put("ssl.probe_lr", s.probe.sgd.lr.to_string());
        put("ssl.eval_random", s.eval_random.to_string());
    }
    if sections.contains(&"convergence") {
        let c = &cfg.convergence;
        put("convergence.n", c.n.to_string());
        put("convergence.d", c.d.to_string());
        put("convergence.systems", c.systems.to_string());
        put("convergence.alphas", list(&c.alphas));
        put("convergence.eta_fracs", list(&c.eta_fracs));
        put(
            "convergence.design",
            match c.design {
                Design::Gaussian => "gaussian",
                Design::WellConditioned => "well_conditioned",
            }
            .into(),
        );
        put(
            "convergence.k_max",
            c.k_max.map_or("auto".into(), |k| k.to_string()),
        );
        put("convergence.residual_tol", c.residual_tol.to_string());
        put("convergence.ratio_tol", c.ratio_tol.to_string());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        parse_config(text)
    }

    #[test]
    fn minimal_sat_config_gets_defaults() {
        let cfg = parse("experiment.kind = sat_supervised\noptim.epochs = 200\n").unwrap();
        assert_eq!(cfg.sat.start_epoch, 60);
        assert_eq!(cfg.sat.alpha, 0.9);
        assert!(cfg.sat.reweight);
        let cfg = parse("experiment.kind = sat_supervised").unwrap();
        assert_eq!(cfg.sat.start_epoch, 30);
    }

    #[test]
    fn out_of_range_alpha_names_the_key() {
        let err = parse("experiment.kind = sat_supervised\nsat.alpha = 1.5").unwrap_err();
        assert!(
            matches!(&err, ConfigError::Invalid { key, .. } if key == "sat.alpha"),
            "{err}"
        );
        assert!(err.to_string().contains("sat.alpha"));
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let err = parse("experiment.kind = erm\noptim.lrr = 0.1").unwrap_err();
        match err {
            ConfigError::UnknownKey { key, suggestion } => {
                assert_eq!(key, "optim.lrr");
                assert_eq!(suggestion.as_deref(), Some("optim.lr"));
            }
            e => panic!("{e}"),
        }
        let err = parse("experiment.kind = erm\nsat.alhpa = 0.9").unwrap_err();
        assert!(err.to_string().contains("sat.alpha"), "{err}");
    }

    #[test]
    fn type_mismatch_names_the_key() {
        let err = parse("experiment.kind = erm\noptim.epochs = ten").unwrap_err();
        assert!(
            matches!(&err, ConfigError::Type { key, .. } if key == "optim.epochs"),
            "{err}"
        );
    }

    #[test]
    fn sections_outside_the_kind_are_rejected() {
        let err = parse("experiment.kind = erm\nssl.alpha = 0.7").unwrap_err();
        assert!(
            matches!(&err, ConfigError::Unused { key, kind: Kind::Erm } if key == "ssl.alpha"),
            "{err}"
        );
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = parse("# header\nexperiment.kind = erm\nnot an assignment").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 3, .. }));
        let err = parse("experiment.kind = erm\nexperiment.kind = erm").unwrap_err();
        assert!(matches!(err, ConfigError::Duplicate { line: 2, .. }));
        assert!(matches!(
            parse("data.dim = 3"),
            Err(ConfigError::MissingKind)
        ));
    }

    #[test]
    fn fixed_noise_requires_frozen_targets() {
        let cfg = parse("experiment.kind = ssl_fixed_noise").unwrap();
        assert_eq!(cfg.ssl.train.alpha, 1.0);
        assert!(!cfg.ssl.train.predictor);
        let err = parse("experiment.kind = ssl_fixed_noise\nssl.alpha = 0.7").unwrap_err();
        assert!(matches!(&err, ConfigError::Invalid { key, .. } if key == "ssl.alpha"));
    }

    #[test]
    fn cross_field_checks() {
        let err = parse("experiment.kind = erm\noptim.warmup_epochs = 100").unwrap_err();
        assert!(err.to_string().contains("optim.warmup_epochs"));
        let err = parse("experiment.kind = erm\ndata.n_train = 6000").unwrap_err();
        assert!(err.to_string().contains("data.n_train"));
        let err = parse("experiment.kind = erm\nnoise.rate = 0.2").unwrap_err();
        assert!(err.to_string().contains("noise.rate"));
        let err = parse("experiment.kind = erm\noptim.step_factor = 0.2").unwrap_err();
        assert!(err.to_string().contains("optim.step_factor"));
    }

    #[test]
    fn echo_round_trips_for_every_kind() {
        for kind in Kind::ALL {
            let text = format!(
                "experiment.kind = {kind}\nexperiment.seed = 7\n{}",
                match kind {
                    Kind::SatSupervised => "sat.sce = true\nnoise.scheme = asymmetric_circular\nnoise.rate = 0.3\noptim.schedule = step\noptim.milestones = 30, 60\n",
                    Kind::ConvergenceSweep => "convergence.k_max = 500\nconvergence.alphas = 0.5, 0.99\n",
                    _ => "",
                }
            );
            let cfg = parse(&text).unwrap();
            let echoed = echo(&cfg);
            assert_eq!(parse(&echoed).unwrap(), cfg, "{kind}:\n{echoed}");
            assert_eq!(echo(&parse(&echoed).unwrap()), echoed);
        }
    }

    #[test]
    fn every_key_is_echoed_by_some_kind() {
        let mut seen = std::collections::BTreeSet::new();
        for kind in Kind::ALL {
            let extra = match kind {
                Kind::SatSupervised => {
                    "sat.sce = true\nnoise.scheme = symmetric_labels\noptim.schedule = step\n"
                }
                _ => "",
            };
            let cfg = parse(&format!("experiment.kind = {kind}\n{extra}")).unwrap();
            for line in echo(&cfg).lines() {
                seen.insert(line.split(" = ").next().unwrap().to_string());
            }
        }
        let all: std::collections::BTreeSet<String> = KEYS.iter().map(|k| k.to_string()).collect();
        assert_eq!(seen, all);
    }

    #[test]
    fn seed_override_moves_noise_seed() {
        let cfg = parse("experiment.kind = erm\nnoise.scheme = symmetric_labels")
            .unwrap()
            .with_seed(5);
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.noise.unwrap().seed, 5 + NOISE_SEED_OFFSET);
    }
}
