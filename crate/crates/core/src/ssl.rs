//! Self-supervised self-adaptive training.
//!
//! Every sample owns a target vector drawn from a standard normal at the
//! start. Per batch, a momentum copy of the encoder embeds an augmented view,
//! the sample's target moves toward that embedding on the unit sphere, and the
//! online encoder (followed by a predictor) is trained to match the target
//! under a normalised squared error. Neither the targets nor the momentum
//! encoder receive gradient.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{NodeId, Tape};
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::losses::Objective;
use crate::nn::Mlp;
use crate::optim::{Sgd, SgdConfig};
use crate::probe::{online_probe_step, OnlineProbe, ONLINE_PROBE_LR};
use crate::report::SslEpoch;
use crate::rng::{self, streams, Rng};
use crate::sat::LoopOptions;
use crate::tensor::{self, Tensor};
use crate::train::{check_batch_size, epoch_batches};

#[derive(Debug, Clone, PartialEq)]
pub struct SslTargetStore {
    targets: Tensor,
    alpha: f64,
    renormalize: bool,
}

/// Store of `n` targets of width `d` with i.i.d. standard normal entries.
pub fn init_random_targets(n: usize, d: usize, alpha: f64, seed: u64) -> Result<SslTargetStore> {
    if n == 0 || d == 0 {
        return Err(invalid("n, d", "must be positive"));
    }
    check_unit("alpha", alpha)?;
    let mut rng = rng::seeded(seed, streams::TARGETS);
    let data = (0..n * d).map(|_| rng::normal(&mut rng)).collect();
    Ok(SslTargetStore {
        targets: Tensor::matrix(n, d, data)?,
        alpha,
        renormalize: false,
    })
}

fn check_unit(name: &'static str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(invalid(name, format!("{v} outside [0, 1]")));
    }
    Ok(())
}

impl SslTargetStore {
    /// Store unit-normalised rows instead of the raw convex combination.
    pub fn renormalize_on_store(mut self, on: bool) -> Self {
        self.renormalize = on;
        self
    }

    pub fn len(&self) -> usize {
        self.targets.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.targets.cols()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        check_unit("alpha", alpha)?;
        self.alpha = alpha;
        Ok(())
    }

    pub fn targets(&self) -> &Tensor {
        &self.targets
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.targets.row(i)
    }
}

/// `t_i ← α·t_i/‖t_i‖ + (1−α)·z/‖z‖`.
pub fn ssl_target_update<'a>(
    store: &'a mut SslTargetStore,
    i: usize,
    z: &[f64],
) -> Result<&'a [f64]> {
    if i >= store.len() {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: store.len(),
        });
    }
    if z.len() != store.dim() {
        return Err(Error::Shape(format!(
            "embedding of width {} for targets of width {}",
            z.len(),
            store.dim()
        )));
    }
    let zn = tensor::normalized(z).ok_or(Error::DegenerateRow { row: i })?;
    let tn = tensor::normalized(store.row(i)).ok_or(Error::DegenerateRow { row: i })?;
    let a = store.alpha;
    let row = store.targets.row_mut(i);
    for ((t, tv), zv) in row.iter_mut().zip(&tn).zip(&zn) {
        *t = a * tv + (1.0 - a) * zv;
    }
    if store.renormalize {
        if let Some(u) = tensor::normalized(row) {
            row.copy_from_slice(&u);
        }
    }
    Ok(store.targets.row(i))
}

/// `θ_m ← β·θ_m + (1−β)·θ` for every parameter.
pub fn momentum_encoder_update(target: &mut Mlp, online: &Mlp, beta: f64) -> Result<()> {
    if target.widths() != online.widths() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            target.widths(),
            online.widths()
        )));
    }
    check_unit("beta", beta)?;
    for (m, p) in target.params_mut().zip(online.params()) {
        m.data_mut()
            .iter_mut()
            .zip(p.data())
            .for_each(|(a, b)| *a = beta * *a + (1.0 - beta) * b);
    }
    Ok(())
}

/// Mean pairwise cosine similarity (`i ≠ j`) of the rows of `reps`.
pub fn collapse_metric(reps: &Tensor) -> Result<f64> {
    let (m, _) = reps.dims2()?;
    if m < 2 {
        return Err(invalid("representations", "need at least two rows"));
    }
    let unit = tensor::l2_normalize_rows(reps)?;
    Ok(mean_pairwise_cos(&unit))
}

fn mean_pairwise_cos(unit: &Tensor) -> f64 {
    let m = unit.rows() as f64;
    let mut sum = vec![0.0; unit.cols()];
    unit.row_iter()
        .for_each(|r| sum.iter_mut().zip(r).for_each(|(s, v)| *s += v));
    let sq: f64 = sum.iter().map(|s| s * s).sum();
    let self_terms: f64 = unit.row_iter().map(|r| tensor::dot(r, r)).sum();
    (sq - self_terms) / (m * (m - 1.0))
}

/// Collapse metric over the non-degenerate rows; 1 if fewer than two remain.
fn collapse_tolerant(reps: &Tensor) -> Result<f64> {
    let rows: Vec<Vec<f64>> = reps.row_iter().filter_map(tensor::normalized).collect();
    if rows.len() < 2 {
        return Ok(1.0);
    }
    Ok(mean_pairwise_cos(&Tensor::from_rows(&rows)?))
}

/// Strengths of the stochastic view generator for vector data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augment {
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Probability of zeroing each coordinate.
    pub mask: f64,
    /// Per-sample scale factor drawn uniformly from `[1 − s, 1 + s]`.
    pub scale: f64,
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            noise: 0.3,
            mask: 0.1,
            scale: 0.2,
        }
    }
}

impl Augment {
    pub const NONE: Self = Self {
        noise: 0.0,
        mask: 0.0,
        scale: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(invalid("noise", "must be finite and non-negative"));
        }
        check_unit("mask", self.mask)?;
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(invalid("scale", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// `x' = mask ⊙ (s·(x + σ·ε))` row by row.
pub fn augment(x: &Tensor, strengths: &Augment, seed: u64) -> Result<Tensor> {
    let mut rng = rng::seeded(seed, streams::AUGMENT);
    augment_with(x, strengths, &mut rng)
}

pub(crate) fn augment_with(x: &Tensor, s: &Augment, rng: &mut Rng) -> Result<Tensor> {
    s.validate()?;
    let (_, d) = x.dims2()?;
    let mut out = x.clone();
    if *s == Augment::NONE {
        return Ok(out);
    }
    for row in out.data_mut().chunks_exact_mut(d) {
        let scale = if s.scale > 0.0 {
            1.0 + s.scale * (2.0 * rng::uniform(rng) - 1.0)
        } else {
            1.0
        };
        for v in row.iter_mut() {
            if s.noise > 0.0 {
                *v += s.noise * rng::normal(rng);
            }
            *v *= scale;
            if s.mask > 0.0 && rng::uniform(rng) < s.mask {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Backbone followed by a projector. Linear evaluation and the per-epoch
/// collapse metric use the backbone output (the representation); the training
/// objective uses the projector output.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub backbone: Mlp,
    pub projector: Mlp,
}

impl Encoder {
    /// `backbone_widths` from input to feature width; the projector has one
    /// hidden layer of width `hidden` and output width `embed`.
    pub fn init(backbone_widths: &[usize], hidden: usize, embed: usize, seed: u64) -> Result<Self> {
        let mut rng = rng::seeded(seed, streams::INIT);
        let backbone = Mlp::init(backbone_widths, &mut rng)?;
        let projector = Mlp::init(&[backbone.output_width(), hidden, embed], &mut rng)?;
        Ok(Self {
            backbone,
            projector,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.projector.output_width()
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.backbone.forward(x)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.projector.forward(&self.backbone.forward(x)?)
    }

    /// Returns the feature node, the output node and the leaves of backbone and projector.
    fn forward_tape(
        &self,
        tape: &mut Tape,
        x: NodeId,
    ) -> Result<(NodeId, NodeId, Vec<NodeId>, Vec<NodeId>)> {
        let (h, lb) = self.backbone.forward_tape(tape, x)?;
        let (z, lp) = self.projector.forward_tape(tape, h)?;
        Ok((h, z, lb, lp))
    }

    fn momentum_update(&mut self, online: &Encoder, beta: f64) -> Result<()> {
        momentum_encoder_update(&mut self.backbone, &online.backbone, beta)?;
        momentum_encoder_update(&mut self.projector, &online.projector, beta)
    }
}

/// Predictor mirroring the projector: one hidden layer, same output width.
pub fn predictor_for(encoder: &Encoder, seed: u64) -> Result<Mlp> {
    let hidden = encoder.projector.widths()[1];
    let e = encoder.embed_dim();
    Mlp::seeded(&[e, hidden, e], seed ^ 0x5eed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslConfig {
    pub alpha: f64,
    pub beta: f64,
    pub n_views: usize,
    pub predictor: bool,
    pub momentum_encoder: bool,
    pub augment: Augment,
    /// Linear ramps `(start, end)` over the epochs; replace `alpha`/`beta` when set.
    pub alpha_ramp: Option<(f64, f64)>,
    pub beta_ramp: Option<(f64, f64)>,
    pub renormalize_on_store: bool,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 0.99,
            n_views: 1,
            predictor: true,
            momentum_encoder: true,
            augment: Augment::default(),
            alpha_ramp: None,
            beta_ramp: None,
            renormalize_on_store: false,
        }
    }
}

impl SslConfig {
    /// Targets frozen at their random initialisation, trained without a predictor.
    pub fn fixed_noise() -> Self {
        Self {
            alpha: 1.0,
            predictor: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_unit("alpha", self.alpha)?;
        check_unit("beta", self.beta)?;
        for (name, ramp) in [
            ("alpha_ramp", self.alpha_ramp),
            ("beta_ramp", self.beta_ramp),
        ] {
            if let Some((a, b)) = ramp {
                check_unit(name, a)?;
                check_unit(name, b)?;
            }
        }
        if !(1..=2).contains(&self.n_views) {
            return Err(invalid(
                "n_views",
                format!("{} not in {{1, 2}}", self.n_views),
            ));
        }
        self.augment.validate()
    }

    fn ramp(fixed: f64, ramp: Option<(f64, f64)>, epoch: usize, epochs: usize) -> f64 {
        match ramp {
            None => fixed,
            Some((a, b)) if epochs > 1 => a + (b - a) * epoch as f64 / (epochs - 1) as f64,
            Some((a, _)) => a,
        }
    }

    pub fn alpha_at(&self, epoch: usize, epochs: usize) -> f64 {
        Self::ramp(self.alpha, self.alpha_ramp, epoch, epochs)
    }

    pub fn beta_at(&self, epoch: usize, epochs: usize) -> f64 {
        Self::ramp(self.beta, self.beta_ramp, epoch, epochs)
    }
}

#[derive(Debug, Clone)]
pub struct SslRun {
    pub momentum: Option<Encoder>,
    pub predictor: Option<Mlp>,
    pub store: SslTargetStore,
    pub probe: OnlineProbe,
    pub report: Vec<SslEpoch>,
    /// Nodes recorded on the training tapes over the whole run.
    pub tape_nodes: usize,
    /// Collapse metric of the projector outputs after the last epoch.
    pub projection_collapse: f64,
}

/// Trains `encoder` in place. Labels of `data` feed only the online probe,
/// which is scored on `eval` (or on `data` when absent).
pub fn train_ssl(
    encoder: &mut Encoder,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &SslConfig,
    sgd: &SgdConfig,
    opts: &LoopOptions,
) -> Result<SslRun> {
    cfg.validate()?;
    sgd.validate()?;
    check_batch_size(opts.batch_size)?;
    if encoder.backbone.input_width() != data.dim() {
        return Err(Error::Shape(format!(
            "encoder input {} for data of dim {}",
            encoder.backbone.input_width(),
            data.dim()
        )));
    }
    let embed = encoder.embed_dim();
    let mut store = init_random_targets(data.len(), embed, cfg.alpha_at(0, sgd.epochs), opts.seed)?
        .renormalize_on_store(cfg.renormalize_on_store);
    let mut momentum = cfg.momentum_encoder.then(|| encoder.clone());
    let mut predictor = if cfg.predictor {
        Some(predictor_for(encoder, opts.seed)?)
    } else {
        None
    };
    let mut probe = OnlineProbe::new(encoder.backbone.output_width(), data.classes())?;
    let (mut opt_b, mut opt_p, mut opt_g) = (
        Sgd::from_config(sgd),
        Sgd::from_config(sgd),
        Sgd::from_config(sgd),
    );
    let mut shuffle = rng::seeded(opts.seed, streams::SHUFFLE);
    let mut views = rng::seeded(opts.seed, streams::AUGMENT);
    let eval_set = eval.unwrap_or(data);
    let mut tape_nodes = 0;
    let mut report = Vec::with_capacity(sgd.epochs);

    for epoch in 0..sgd.epochs {
        let lr = sgd.lr_at(epoch)?;
        store.set_alpha(cfg.alpha_at(epoch, sgd.epochs))?;
        let beta = cfg.beta_at(epoch, sgd.epochs);
        let mut total = 0.0;
        let batches = epoch_batches(data.len(), opts.batch_size, &mut shuffle);
        for idx in &batches {
            let xb = data.inputs().select_rows(idx);
            let mut probe_feats = None;
            for _ in 0..cfg.n_views {
                let xv = augment_with(&xb, &cfg.augment, &mut views)?;
                let z = match &momentum {
                    Some(m) => m.forward(&xv)?,
                    None => encoder.forward(&xv)?,
                };
                for (r, &i) in idx.iter().enumerate() {
                    ssl_target_update(&mut store, i, z.row(r))?;
                }
                let targets = store.targets().select_rows(idx);

                let mut tape = Tape::new();
                let x = tape.leaf(&xv)?;
                let (h, out, lb, lp) = encoder.forward_tape(&mut tape, x)?;
                let (out, lg) = match &predictor {
                    Some(g) => {
                        let (o, l) = g.forward_tape(&mut tape, out)?;
                        (o, Some(l))
                    }
                    None => (out, None),
                };
                let loss = tape.loss(out, Objective::NormalizedMse { targets })?;
                let grads = tape.backward(loss)?;
                encoder.backbone.accumulate_grads(&grads, &lb)?;
                encoder.projector.accumulate_grads(&grads, &lp)?;
                if let (Some(g), Some(lg)) = (predictor.as_mut(), lg) {
                    g.accumulate_grads(&grads, &lg)?;
                }
                total += tape.scalar(loss);
                tape_nodes += tape.len();
                if probe_feats.is_none() {
                    probe_feats = Some(tape.value(h).clone());
                }
            }
            opt_b.step_model(&mut encoder.backbone, lr)?;
            opt_p.step_model(&mut encoder.projector, lr)?;
            if let Some(g) = predictor.as_mut() {
                opt_g.step_model(g, lr)?;
            }
            if let Some(m) = momentum.as_mut() {
                m.momentum_update(encoder, beta)?;
            }
            let labels: Vec<usize> = idx.iter().map(|&i| data.observed_labels()[i]).collect();
            let feats = probe_feats.expect("at least one view");
            online_probe_step(&mut probe, &feats, &labels, ONLINE_PROBE_LR)?;
        }
        let collapse = collapse_tolerant(&encoder.features(data.inputs())?)?;
        let probe_acc = probe.accuracy(
            &encoder.features(eval_set.inputs())?,
            eval_set.clean_labels(),
        )?;
        report.push(SslEpoch {
            epoch,
            ssl_loss: total / (batches.len() * cfg.n_views) as f64,
            collapse_metric: collapse,
            online_probe_acc: probe_acc,
        });
    }
    let projection_collapse = collapse_tolerant(&encoder.forward(data.inputs())?)?;
    Ok(SslRun {
        momentum,
        predictor,
        store,
        probe,
        report,
        tape_nodes,
        projection_collapse,
    })
}
