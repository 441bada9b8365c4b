//! The staged training protocol: auto-encoder pretraining, per-style
//! pathway training, and fine-tuning of the assembled model with split
//! learning rates and plateau annealing.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{build_scae, AttributeStage, BdnModel, CompositeStack, Head, Pathway, Profile, Scae, Variant};
use crate::augment::Pipeline;
use crate::data::{batch_iterator, BatchMode, Bucket, Dataset, Record, STYLE_COUNT};
use crate::error::{invalid, Error, Result};
use crate::layers::{mse_loss, softmax, softmax_xent};
use crate::network::{mix_seed, Mode};
use crate::optim::Sgd;
use crate::rating::{
    distribution_kl_loss, distribution_softmax_loss, fit_gaussian, kl_loss_and_grad, BinaryLabel, KlForm,
    RatingGaussian,
};
use crate::tensor::Tensor;

/// Most times the synthesis learning rate may be divided by 10 in a run.
pub const MAX_ANNEALS: usize = 2;
pub const ANNEAL_FACTOR: f64 = 10.0;

/// Training hyper-parameters, read from a `key = value` text file (TOML).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Auto-encoder pretraining rate; never annealed.
    pub eta_scae: f64,
    /// Supervised pathway training rate.
    pub eta_pathway: f64,
    /// Pathway rate during fine-tuning.
    pub eta_prime_pathway_ft: f64,
    /// Initial synthesis-network rate during fine-tuning.
    pub rho_synthesis: f64,
    pub momentum: f64,
    /// Epochs without improvement before the synthesis rate is divided.
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub max_anneals: usize,
    /// Augmentation pipeline, e.g. `default`, `none` or
    /// `reflection:0.5,scaling,small-noise`.
    pub augmentation: String,
    pub seed: u64,
    pub epochs_scae: usize,
    pub epochs_pathway: usize,
    pub epochs_finetune: usize,
    pub validation_fraction: f64,
    /// Exclusion half-width for binary labels.
    pub delta: f64,
    /// Start Gaussian-head training from a trained binary model and
    /// update only the synthesis network.
    pub head_warm_start: bool,
    pub profile: Profile,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            eta_scae: 0.05,
            eta_pathway: 0.01,
            eta_prime_pathway_ft: 0.001,
            rho_synthesis: 0.01,
            momentum: 0.9,
            plateau_patience: 5,
            plateau_min_delta: 1e-3,
            max_anneals: MAX_ANNEALS,
            augmentation: "default".into(),
            seed: 0,
            epochs_scae: 20,
            epochs_pathway: 30,
            epochs_finetune: 50,
            validation_fraction: 0.1,
            delta: 0.0,
            head_warm_start: true,
            profile: Profile::Desk,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("eta_scae", self.eta_scae),
            ("eta_pathway", self.eta_pathway),
            ("eta_prime_pathway_ft", self.eta_prime_pathway_ft),
            ("rho_synthesis", self.rho_synthesis),
        ];
        if let Some((k, v)) = rates.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(invalid(format!("{} must be positive, got {}", k, v)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.max_anneals > MAX_ANNEALS {
            return Err(invalid(format!("max_anneals is at most {}", MAX_ANNEALS)));
        }
        if self.plateau_patience == 0 || !(self.plateau_min_delta >= 0.0) {
            return Err(invalid("plateau_patience must be >= 1 and plateau_min_delta >= 0"));
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return Err(invalid("validation_fraction must be in [0, 0.5)"));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(invalid(format!("delta must be non-negative, got {}", self.delta)));
        }
        self.pipeline()?;
        Ok(())
    }

    pub fn pipeline(&self) -> Result<Pipeline> {
        Pipeline::from_str(&self.augmentation)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        TrainConfig::from_str(&text).map_err(|e| match e {
            Error::InvalidArgument(m) => invalid(format!("{}: {}", path.display(), m)),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

impl FromStr for TrainConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| invalid(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One epoch of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    /// Rate of the stage's main parameter group (the synthesis network
    /// during fine-tuning).
    pub lr: f64,
    /// Pathway rate during fine-tuning; 0 when pathways are frozen.
    pub lr_pathway: Option<f64>,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// The plateau rule fired after this epoch.
    pub annealed: bool,
    pub wall_ms: u64,
}

/// Append-only per-epoch log, stored as JSON lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn push(&mut self, r: EpochRecord) {
        self.records.push(r);
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.records.extend(other.records);
    }

    pub fn stage(&self, name: &str) -> impl Iterator<Item = &EpochRecord> + '_ {
        let name = name.to_string();
        self.records.iter().filter(move |r| r.stage == name)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(out, "{}", serde_json::to_string(r).expect("record serialises"));
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut log = TrainLog::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            log.push(serde_json::from_str(line).map_err(|e| invalid(format!("log line {}: {}", i + 1, e)))?);
        }
        Ok(log)
    }

    /// Appends to `path`, creating it if needed.
    pub fn append_to(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    /// The log with wall-clock times zeroed, for run-to-run comparison.
    pub fn without_wall_clock(&self) -> TrainLog {
        TrainLog {
            records: self
                .records
                .iter()
                .map(|r| EpochRecord {
                    wall_ms: 0,
                    ..r.clone()
                })
                .collect(),
        }
    }
}

/// Fires when the best loss has not improved by `min_delta` for `patience`
/// consecutive observations, then restarts the count. Fires at most
/// `max_firings` times.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauDetector {
    pub patience: usize,
    pub min_delta: f64,
    pub max_firings: usize,
    best: f64,
    stale: usize,
    firings: usize,
}

impl PlateauDetector {
    pub fn new(patience: usize, min_delta: f64, max_firings: usize) -> Self {
        PlateauDetector {
            patience,
            min_delta,
            max_firings,
            best: f64::INFINITY,
            stale: 0,
            firings: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best - self.min_delta || self.best == f64::INFINITY {
            self.best = self.best.min(loss);
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= self.patience && self.firings < self.max_firings {
            self.firings += 1;
            self.stale = 0;
            return true;
        }
        false
    }

    pub fn firings(&self) -> usize {
        self.firings
    }
}

/// Epoch numbers (1-based) at which the detector fires.
pub fn plateau_detector(losses: &[f64], patience: usize, min_delta: f64) -> Vec<usize> {
    let mut d = PlateauDetector::new(patience, min_delta, MAX_ANNEALS);
    losses
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| d.observe(l).then_some(i + 1))
        .collect()
}

/// What a training stage fits.
#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    /// Mean squared reconstruction error.
    Reconstruction,
    /// Presence of one style.
    Style(usize),
    /// Presence of each listed style, one two-way group per style.
    Composite(Vec<usize>),
    /// Low/High at the given exclusion half-width.
    Binary { delta: f64 },
    /// KL divergence to the fitted rating Gaussian.
    Gaussian,
    /// Cross-entropy to the rating histogram.
    DistSoftmax,
    /// KL divergence to the rating histogram.
    DistKl,
}

impl Objective {
    pub fn for_head(variant: Variant, head: Head, delta: f64) -> Result<Self> {
        if !variant.supports(head) {
            return Err(invalid(format!("variant {} cannot be trained with the {} head", variant, head)));
        }
        Ok(match (head, variant) {
            (Head::Binary, _) => Objective::Binary { delta },
            (Head::Gaussian, _) => Objective::Gaussian,
            (Head::Dist10, Variant::BdnKlD) => Objective::DistKl,
            (Head::Dist10, _) => Objective::DistSoftmax,
        })
    }

    /// Whether a record has a usable label.
    pub fn accepts(&self, r: &Record) -> Result<bool> {
        Ok(match self {
            Objective::Binary { delta } => r.binary_label(*delta)? != BinaryLabel::Excluded,
            Objective::Gaussian | Objective::DistSoftmax | Objective::DistKl => r.ratings.total() > 0,
            _ => true,
        })
    }

    pub fn loss(&self, output: &Tensor, input: &Tensor, records: &[&Record]) -> Result<(f64, Tensor)> {
        match self {
            Objective::Reconstruction => mse_loss(output, input),
            Objective::Style(s) => {
                let labels: Vec<usize> = records.iter().map(|r| r.styles[*s] as usize).collect();
                softmax_xent(output, &labels)
            }
            Objective::Composite(styles) => {
                let labels: Vec<Vec<bool>> = records
                    .iter()
                    .map(|r| styles.iter().map(|&s| r.styles[s]).collect())
                    .collect();
                crate::arch::composite_label_loss(output, &labels)
            }
            Objective::Binary { delta } => {
                let labels = records
                    .iter()
                    .map(|r| {
                        r.binary_label(*delta)?
                            .class()
                            .ok_or_else(|| invalid(format!("{} has no binary label", r.image_id)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                softmax_xent(output, &labels)
            }
            Objective::Gaussian => {
                let targets = records
                    .iter()
                    .map(|r| fit_gaussian(&r.ratings))
                    .collect::<Result<Vec<RatingGaussian>>>()?;
                kl_loss_and_grad(output, &targets, KlForm::Corrected)
            }
            Objective::DistSoftmax => {
                let h: Vec<_> = records.iter().map(|r| r.ratings).collect();
                distribution_softmax_loss(output, &h)
            }
            Objective::DistKl => {
                let h: Vec<_> = records.iter().map(|r| r.ratings).collect();
                distribution_kl_loss(output, &h)
            }
        }
    }
}

/// Learning rates for one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rates {
    /// Whole model, or the synthesis network during fine-tuning.
    pub main: f64,
    /// Pathways during fine-tuning.
    pub pathway: f64,
}

/// A network the stage loop can train.
pub trait Trainable {
    type Trace;
    fn needs_hsv(&self) -> bool {
        false
    }
    fn forward_bucket(&self, bucket: &Bucket, mode: Mode) -> Result<Self::Trace>;
    fn output<'t>(&self, trace: &'t Self::Trace) -> &'t Tensor;
    fn backward(&mut self, trace: &Self::Trace, grad: &Tensor) -> Result<()>;
    /// Applies and clears the accumulated gradients.
    fn update(&mut self, opt: &mut Sgd, rates: Rates) -> Result<()>;
}

impl Trainable for Scae {
    type Trace = crate::arch::ScaeTrace;
    fn forward_bucket(&self, b: &Bucket, mode: Mode) -> Result<Self::Trace> {
        self.forward(&b.input, mode)
    }
    fn output<'t>(&self, t: &'t Self::Trace) -> &'t Tensor {
        &t.output
    }
    fn backward(&mut self, t: &Self::Trace, g: &Tensor) -> Result<()> {
        Scae::backward(self, t, g)
    }
    fn update(&mut self, opt: &mut Sgd, rates: Rates) -> Result<()> {
        for (k, p) in self.params_mut() {
            opt.step(&k, p, rates.main)?;
        }
        Ok(())
    }
}

impl Trainable for Pathway {
    type Trace = crate::arch::PathwayTrace;
    fn forward_bucket(&self, b: &Bucket, mode: Mode) -> Result<Self::Trace> {
        self.forward(&b.input, mode)
    }
    fn output<'t>(&self, t: &'t Self::Trace) -> &'t Tensor {
        t.output()
    }
    fn backward(&mut self, t: &Self::Trace, g: &Tensor) -> Result<()> {
        Pathway::backward(self, t, g)
    }
    fn update(&mut self, opt: &mut Sgd, rates: Rates) -> Result<()> {
        for (k, p) in self.params_mut() {
            opt.step(&k, p, rates.main)?;
        }
        Ok(())
    }
}

impl Trainable for CompositeStack {
    type Trace = crate::arch::CompositeTrace;
    fn forward_bucket(&self, b: &Bucket, mode: Mode) -> Result<Self::Trace> {
        self.forward(&b.input, mode)
    }
    fn output<'t>(&self, t: &'t Self::Trace) -> &'t Tensor {
        t.output()
    }
    fn backward(&mut self, t: &Self::Trace, g: &Tensor) -> Result<()> {
        CompositeStack::backward(self, t, g)
    }
    fn update(&mut self, opt: &mut Sgd, rates: Rates) -> Result<()> {
        for (k, p) in self.params_mut() {
            opt.step(&k, p, rates.main)?;
        }
        Ok(())
    }
}

impl Trainable for BdnModel {
    type Trace = crate::arch::BdnTrace;
    fn needs_hsv(&self) -> bool {
        true
    }
    fn forward_bucket(&self, b: &Bucket, mode: Mode) -> Result<Self::Trace> {
        let hsv = b.hsv.as_ref().ok_or_else(|| invalid("bucket lacks HSV planes"))?;
        self.forward(&b.input, hsv, mode)
    }
    fn output<'t>(&self, t: &'t Self::Trace) -> &'t Tensor {
        t.output()
    }
    fn backward(&mut self, t: &Self::Trace, g: &Tensor) -> Result<()> {
        BdnModel::backward(self, t, g)
    }
    fn update(&mut self, opt: &mut Sgd, rates: Rates) -> Result<()> {
        apply_update(self, opt, rates)
    }
}

/// Fine-tuning update: synthesis parameters move at `rates.main`, pathway
/// parameters at `rates.pathway`, and frozen pathways not at all.
pub fn apply_update(model: &mut BdnModel, opt: &mut Sgd, rates: Rates) -> Result<()> {
    for (k, p) in model.synthesis_params_mut() {
        opt.step(&k, p, rates.main)?;
    }
    if !model.frozen_pathways {
        for (k, p) in model.pathway_params_mut() {
            opt.step(&k, p, rates.pathway)?;
        }
    }
    Ok(())
}

/// Splits `0..n` into (train, validation) by a seeded shuffle; both lists
/// are returned sorted.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = if n > 1 { ((n as f64 * fraction).round() as usize).min(n - 1) } else { 0 };
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Seed tags keeping the stages' random streams apart.
mod tag {
    pub const SCAE: u64 = 1;
    pub const PATHWAY: u64 = 100;
    pub const COMPOSITE: u64 = 200;
    pub const FINETUNE: u64 = 300;
    pub const SPLIT: u64 = 400;
    pub const INIT: u64 = 500;
}

struct Stage<'a> {
    name: String,
    tag: u64,
    dataset: &'a Dataset,
    train: Vec<usize>,
    val: Vec<usize>,
    objective: Objective,
    epochs: usize,
    pipeline: Pipeline,
    lr: f64,
    lr_pathway: Option<f64>,
    anneal: bool,
}

fn bucket_records<'d>(dataset: &'d Dataset, indices: &[usize], bucket: &Bucket) -> Vec<&'d Record> {
    bucket
        .positions
        .iter()
        .map(|&p| &dataset.records()[indices[p]])
        .collect()
}

fn check_loss(stage: &str, epoch: usize, loss: f64) -> Result<f64> {
    if !loss.is_finite() {
        return Err(Error::Training(format!("{} loss became non-finite in epoch {}", stage, epoch)));
    }
    Ok(loss)
}

/// Mean per-image loss over `indices` in inference mode.
pub fn evaluate_loss<M: Trainable>(
    model: &M,
    dataset: &Dataset,
    indices: &[usize],
    objective: &Objective,
    batch_size: usize,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(invalid("cannot evaluate on an empty set"));
    }
    let none = Pipeline::none();
    let mut total = 0.0;
    for batch in batch_iterator(dataset, indices, batch_size, &none, 0, BatchMode::Eval)? {
        for b in batch.buckets(model.needs_hsv())? {
            let trace = model.forward_bucket(&b, Mode::Infer)?;
            let records = bucket_records(dataset, &batch.indices, &b);
            let (loss, _) = objective.loss(model.output(&trace), &b.input, &records)?;
            total += loss * b.positions.len() as f64;
        }
    }
    Ok(total / indices.len() as f64)
}

fn run_stage<M: Trainable>(model: &mut M, stage: Stage<'_>, cfg: &TrainConfig) -> Result<TrainLog> {
    if stage.train.is_empty() {
        return Err(Error::Training(format!("{}: no training images", stage.name)));
    }
    let mut opt = Sgd::new(cfg.momentum);
    let mut plateau = PlateauDetector::new(cfg.plateau_patience, cfg.plateau_min_delta, cfg.max_anneals);
    let mut lr = stage.lr;
    let mut log = TrainLog::default();
    let stage_seed = mix_seed(cfg.seed, stage.tag);
    let mut step = 0u64;
    for epoch in 0..stage.epochs {
        let started = Instant::now();
        let epoch_seed = mix_seed(stage_seed, epoch as u64);
        let mut total = 0.0;
        let batches = batch_iterator(
            stage.dataset,
            &stage.train,
            cfg.batch_size,
            &stage.pipeline,
            epoch_seed,
            BatchMode::Train,
        )?;
        for batch in batches {
            let n = batch.len() as f64;
            for (bi, b) in batch.buckets(model.needs_hsv())?.iter().enumerate() {
                let mode = Mode::Train {
                    seed: mix_seed(mix_seed(stage_seed, 0xD0 + step), bi as u64),
                };
                let trace = model.forward_bucket(b, mode)?;
                let records = bucket_records(stage.dataset, &batch.indices, b);
                let (loss, grad) = stage.objective.loss(model.output(&trace), &b.input, &records)?;
                let weight = b.positions.len() as f64 / n;
                model.backward(&trace, &grad.map(|g| g * weight))?;
                total += loss * b.positions.len() as f64;
            }
            model.update(
                &mut opt,
                Rates {
                    main: lr,
                    pathway: stage.lr_pathway.unwrap_or(0.0),
                },
            )?;
            step += 1;
        }
        let train_loss = check_loss(&stage.name, epoch, total / stage.train.len() as f64)?;
        let val_loss = if stage.val.is_empty() {
            None
        } else {
            Some(check_loss(
                &stage.name,
                epoch,
                evaluate_loss(model, stage.dataset, &stage.val, &stage.objective, cfg.batch_size)?,
            )?)
        };
        let annealed = stage.anneal && plateau.observe(val_loss.unwrap_or(train_loss));
        log.push(EpochRecord {
            stage: stage.name.clone(),
            epoch,
            lr,
            lr_pathway: stage.lr_pathway,
            train_loss,
            val_loss,
            annealed,
            wall_ms: started.elapsed().as_millis() as u64,
        });
        if annealed {
            lr /= ANNEAL_FACTOR;
        }
    }
    Ok(log)
}

/// Unsupervised auto-encoder pretraining on every image at the constant
/// rate `eta_scae`. `blocks` is 1 for style pathways, or the number of
/// attribute blocks for the merged baselines.
pub fn pretrain_scae(dataset: &Dataset, blocks: usize, cfg: &TrainConfig) -> Result<(Scae, TrainLog)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(invalid("auto-encoder pretraining needs at least one image"));
    }
    let mut scae = build_scae(cfg.profile, blocks, mix_seed(cfg.seed, tag::INIT + tag::SCAE))?;
    let stage = Stage {
        name: "scae".into(),
        tag: tag::SCAE,
        dataset,
        train: (0..dataset.len()).collect(),
        val: Vec::new(),
        objective: Objective::Reconstruction,
        epochs: cfg.epochs_scae,
        pipeline: Pipeline::none(),
        lr: cfg.eta_scae,
        lr_pathway: None,
        anneal: false,
    };
    let log = run_stage(&mut scae, stage, cfg)?;
    Ok((scae, log))
}

/// Mean reconstruction error of `scae` over the whole dataset.
pub fn reconstruction_loss(scae: &Scae, dataset: &Dataset, batch_size: usize) -> Result<f64> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    evaluate_loss(scae, dataset, &all, &Objective::Reconstruction, batch_size)
}

fn labelled_split(dataset: &Dataset, objective: &Objective, cfg: &TrainConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    let (train, val) = split_validation(dataset.len(), cfg.validation_fraction, mix_seed(cfg.seed, tag::SPLIT));
    let keep = |idx: Vec<usize>| -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(idx.len());
        for i in idx {
            if objective.accepts(&dataset.records()[i])? {
                out.push(i);
            }
        }
        Ok(out)
    };
    Ok((keep(train)?, keep(val)?))
}

/// A pathway after supervised training, classifier included.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedPathway {
    pub profile: Profile,
    pub style: usize,
    pub pathway: Pathway,
}

impl TrainedPathway {
    /// conv1-conv3 only, as handed to fine-tuning.
    pub fn state(&self) -> AttributeStage {
        self.with_head().headless()
    }

    pub fn with_head(&self) -> AttributeStage {
        AttributeStage {
            profile: self.profile,
            source: Variant::Bdn,
            styles: vec![self.style],
            trunks: vec![self.pathway.trunk.clone()],
            head: Some(self.pathway.head.clone()),
        }
    }
}

fn check_style_labels(dataset: &Dataset, indices: &[usize], style: usize) -> Result<()> {
    if style >= STYLE_COUNT {
        return Err(invalid(format!("style index {} out of range", style)));
    }
    let positives = indices.iter().filter(|&&i| dataset.records()[i].styles[style]).count();
    if positives == 0 {
        return Err(invalid(format!(
            "style {} has no positive examples",
            crate::data::STYLE_NAMES[style]
        )));
    }
    if positives == indices.len() {
        return Err(invalid(format!(
            "style {} has no negative examples",
            crate::data::STYLE_NAMES[style]
        )));
    }
    Ok(())
}

/// Supervised training of one style pathway: conv1/conv2 from encoder
/// `block` of `scae`, fresh conv3/conv4, softmax loss at `eta_pathway`.
pub fn train_pathway(
    dataset: &Dataset,
    style: usize,
    scae: &Scae,
    block: usize,
    cfg: &TrainConfig,
) -> Result<(TrainedPathway, TrainLog)> {
    cfg.validate()?;
    if scae.profile != cfg.profile {
        return Err(invalid(format!(
            "auto-encoder is {} profile but the config asks for {}",
            scae.profile, cfg.profile
        )));
    }
    let objective = Objective::Style(style);
    let (train, val) = labelled_split(dataset, &objective, cfg)?;
    check_style_labels(dataset, &train, style)?;
    let tag = tag::PATHWAY + style as u64;
    let mut pathway = scae.init_pathway(block, mix_seed(cfg.seed, tag::INIT + tag))?;
    let stage = Stage {
        name: format!("pathway-{}", style),
        tag,
        dataset,
        train,
        val,
        objective,
        epochs: cfg.epochs_pathway,
        pipeline: cfg.pipeline()?,
        lr: cfg.eta_pathway,
        lr_pathway: None,
        anneal: false,
    };
    let log = run_stage(&mut pathway, stage, cfg)?;
    Ok((
        TrainedPathway {
            profile: cfg.profile,
            style,
            pathway,
        },
        log,
    ))
}

/// Fraction of `indices` whose style flag the pathway predicts correctly.
pub fn style_accuracy(pathway: &Pathway, dataset: &Dataset, indices: &[usize], style: usize) -> Result<f64> {
    if indices.is_empty() {
        return Err(invalid("cannot score an empty set"));
    }
    let none = Pipeline::none();
    let mut correct = 0usize;
    for batch in batch_iterator(dataset, indices, 64, &none, 0, BatchMode::Eval)? {
        for b in batch.buckets(false)? {
            let out = pathway.forward(&b.input, Mode::Infer)?;
            for (k, &p) in b.positions.iter().enumerate() {
                let probs = softmax(out.output().item(k));
                let predicted = probs[1] > probs[0];
                correct += (predicted == dataset.records()[batch.indices[p]].styles[style]) as usize;
            }
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Attribute stage of the unsupervised baseline: one trunk per encoder
/// block of a merged auto-encoder, conv3 left at its initialisation.
pub fn unsupervised_attributes(scae: &Scae, cfg: &TrainConfig) -> Result<AttributeStage> {
    let trunks = (0..scae.blocks.len())
        .map(|b| Ok(scae.init_pathway(b, mix_seed(cfg.seed, tag::INIT + tag::COMPOSITE + b as u64))?.trunk))
        .collect::<Result<Vec<_>>>()?;
    let stage = AttributeStage {
        profile: scae.profile,
        source: Variant::Bfcn,
        styles: Vec::new(),
        trunks,
        head: None,
    };
    stage.validate()?;
    Ok(stage)
}

/// Attribute stage supervised by the composite label over `styles`: one
/// trunk per encoder block of a merged auto-encoder, a shared conv4.
pub fn train_composite(
    dataset: &Dataset,
    styles: &[usize],
    scae: &Scae,
    cfg: &TrainConfig,
) -> Result<(AttributeStage, TrainLog)> {
    cfg.validate()?;
    if scae.blocks.len() != styles.len() {
        return Err(invalid(format!(
            "composite training needs one auto-encoder block per style ({} blocks, {} styles)",
            scae.blocks.len(),
            styles.len()
        )));
    }
    let objective = Objective::Composite(styles.to_vec());
    let (train, val) = labelled_split(dataset, &objective, cfg)?;
    for &s in styles {
        check_style_labels(dataset, &train, s)?;
    }
    let trunks = (0..scae.blocks.len())
        .map(|b| Ok(scae.init_pathway(b, mix_seed(cfg.seed, tag::INIT + tag::COMPOSITE + b as u64))?.trunk))
        .collect::<Result<Vec<_>>>()?;
    let mut stack = CompositeStack::new(
        scae.profile,
        styles.to_vec(),
        trunks,
        mix_seed(cfg.seed, tag::INIT + tag::COMPOSITE),
    )?;
    let stage = Stage {
        name: "composite".into(),
        tag: tag::COMPOSITE,
        dataset,
        train,
        val,
        objective,
        epochs: cfg.epochs_pathway,
        pipeline: cfg.pipeline()?,
        lr: cfg.eta_pathway,
        lr_pathway: None,
        anneal: false,
    };
    let log = run_stage(&mut stack, stage, cfg)?;
    let out = AttributeStage {
        profile: stack.profile,
        source: Variant::BdnWp,
        styles: stack.styles,
        trunks: stack.trunks,
        head: Some(stack.head),
    };
    Ok((out, log))
}

/// Assembles an untrained model from an attribute stage, checking that the
/// stage came from the protocol the variant requires.
pub fn assemble(stage: &AttributeStage, variant: Variant, head: Head, cfg: &TrainConfig) -> Result<BdnModel> {
    stage.validate()?;
    let required = match variant {
        Variant::Bdn | Variant::BdnSoftD | Variant::BdnKlD => Variant::Bdn,
        other => other,
    };
    if stage.source != required {
        return Err(invalid(format!(
            "variant {} needs attributes from {} training, got {}",
            variant, required, stage.source
        )));
    }
    if stage.profile != cfg.profile {
        return Err(invalid(format!(
            "attributes are {} profile but the config asks for {}",
            stage.profile, cfg.profile
        )));
    }
    BdnModel::new(
        variant,
        head,
        stage.profile,
        stage.trunks.clone(),
        stage.styles.clone(),
        mix_seed(cfg.seed, tag::INIT + tag::FINETUNE),
    )
}

/// A Gaussian-head copy of a trained binary model: every weight carried
/// over, pathways frozen so only the synthesis network is retrained.
pub fn warm_start_gaussian(binary: &BdnModel) -> Result<BdnModel> {
    if binary.head != Head::Binary {
        return Err(invalid(format!("warm start needs a binary-head model, got {}", binary.head)));
    }
    if !binary.variant.supports(Head::Gaussian) {
        return Err(invalid(format!("variant {} has no Gaussian head", binary.variant)));
    }
    let mut m = binary.clone();
    m.head = Head::Gaussian;
    m.frozen_pathways = true;
    Ok(m)
}

/// Trains the synthesis network at `rho_synthesis` with plateau annealing,
/// and the pathways at `eta_prime_pathway_ft` unless frozen.
pub fn finetune(model: &mut BdnModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    let objective = Objective::for_head(model.variant, model.head, cfg.delta)?;
    let (train, val) = labelled_split(dataset, &objective, cfg)?;
    let stage = Stage {
        name: format!("finetune-{}-{}", model.variant, model.head),
        tag: tag::FINETUNE,
        dataset,
        train,
        val,
        objective,
        epochs: cfg.epochs_finetune,
        pipeline: cfg.pipeline()?,
        lr: cfg.rho_synthesis,
        lr_pathway: Some(if model.frozen_pathways {
            0.0
        } else {
            cfg.eta_prime_pathway_ft
        }),
        anneal: true,
    };
    run_stage(model, stage, cfg)
}

/// Assembles and fine-tunes a model. The Gaussian head, with
/// `head_warm_start` set, must instead start from a binary model via
/// [`warm_start_gaussian`] and [`finetune`].
pub fn finetune_bdn(
    dataset: &Dataset,
    stage: &AttributeStage,
    variant: Variant,
    head: Head,
    frozen_pathways: bool,
    cfg: &TrainConfig,
) -> Result<(BdnModel, TrainLog)> {
    if head == Head::Gaussian && cfg.head_warm_start {
        return Err(invalid(
            "head_warm_start is set: train the Gaussian head from a binary model checkpoint",
        ));
    }
    let mut model = assemble(stage, variant, head, cfg)?;
    model.frozen_pathways = frozen_pathways;
    let log = finetune(&mut model, dataset, cfg)?;
    Ok((model, log))
}
