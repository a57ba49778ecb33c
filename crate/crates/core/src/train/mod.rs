//! Joint training of the classifier and its decoders under a cyclic learning
//! rate, keeping one snapshot per cycle, plus ensemble prediction and
//! evaluation.

mod config;

pub use config::{parse_key_values, RunConfig};

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::capsnet::{argmax_rows, lengths, lengths_backward, MarginLoss};
use crate::data::checkpoint::{Checkpoint, TrainingMetadata};
use crate::data::LabeledImageSet;
use crate::decoder::{mask_true_class, psnr_from_mse, ReconLossKind};
use crate::error::{Error, Result};
use crate::model::{join, parse_list, ModelConfig, TextCaps};
use crate::optim::Adam;
use crate::tensor::{Element, Precision, Tensor};

/// How snapshot predictions are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnsembleRule {
    /// Argmax of the capsule lengths averaged over snapshots.
    #[default]
    Mean,
    /// Most frequent per-snapshot prediction, lowest class on ties.
    Vote,
}

impl EnsembleRule {
    pub fn as_str(self) -> &'static str {
        match self {
            EnsembleRule::Mean => "mean",
            EnsembleRule::Vote => "vote",
        }
    }
}

impl fmt::Display for EnsembleRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnsembleRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(EnsembleRule::Mean),
            "vote" => Ok(EnsembleRule::Vote),
            other => Err(Error::Config(format!("unknown ensemble rule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub cycle_length: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    /// Weight of the summed reconstruction losses against the margin loss.
    pub recon_weight: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub precision: Precision,
    pub ensemble: EnsembleRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 90,
            cycle_length: 30,
            lr_max: 1e-3,
            lr_min: 1e-5,
            batch_size: 32,
            recon_weight: 0.392,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            precision: Precision::Single,
            ensemble: EnsembleRule::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cycle_length == 0 || !self.epochs.is_multiple_of(self.cycle_length) {
            return Err(Error::Config(format!(
                "epochs ({}) must be a multiple of cycle_length ({})",
                self.epochs, self.cycle_length
            )));
        }
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < lr_min < lr_max, got lr_min {} and lr_max {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.recon_weight >= 0.0 && self.recon_weight.is_finite()) {
            return Err(Error::Config(format!("recon_weight must be >= 0, got {}", self.recon_weight)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config("Adam needs betas in [0, 1) and epsilon > 0".into()));
        }
        Ok(())
    }

    pub fn snapshot_count(&self) -> usize {
        self.epochs / self.cycle_length.max(1)
    }

    /// Learning rate at position `q ∈ [0, cycle_length]` of a cycle: cosine
    /// decay from `lr_max` at 0 to `lr_min` at `cycle_length`, both exact.
    pub fn cycle_lr(&self, q: f64) -> f64 {
        let w = (1.0 + (PI * q / self.cycle_length as f64).cos()) / 2.0;
        self.lr_max * w + self.lr_min * (1.0 - w)
    }

    /// Learning rate at (fractional) epoch `t`; restarts at `lr_max` at every
    /// multiple of the cycle length.
    pub fn cyclic_lr(&self, t: f64) -> f64 {
        self.cycle_lr(t.rem_euclid(self.cycle_length as f64))
    }
}

/// Margin loss plus `w` times the sum of every decoder's reconstruction loss
/// against `target`.
pub fn total_loss<T: Element>(
    lengths: &Tensor<T>,
    labels: &[usize],
    recons: &[(ReconLossKind, &Tensor<T>)],
    target: &Tensor<T>,
    w: f64,
) -> Result<f64> {
    if !(w >= 0.0) {
        return Err(Error::InvalidArgument(format!("reconstruction weight {w} is negative")));
    }
    let mut loss = MarginLoss::default().loss(lengths, labels)?;
    for (kind, recon) in recons {
        loss += w * kind.value(recon, target)?;
    }
    Ok(loss)
}

/// Forward pass of one batch under [`total_loss`], with the images as the
/// reconstruction target. When the loss is finite its gradient is
/// accumulated into every parameter of `model`.
pub fn backprop_batch<T: Element>(model: &mut TextCaps<T>, images: &Tensor<T>, labels: &[usize], w: f64) -> Result<f64> {
    let trace = model.classifier.forward_trace(images)?;
    let caps = &trace.output;
    let len = lengths(caps)?;
    let masked = mask_true_class(caps, labels)?;
    let dec_traces = model
        .decoders
        .iter()
        .map(|d| d.forward_trace(&masked))
        .collect::<Result<Vec<_>>>()?;
    let recons: Vec<_> = model.decoders.iter().zip(&dec_traces).map(|(d, t)| (d.loss(), &t.output)).collect();
    let loss = total_loss(&len, labels, &recons, images, w)?;
    if !loss.is_finite() {
        return Ok(loss);
    }

    let margin = MarginLoss::default();
    let mut grad_caps = lengths_backward(caps, &margin.gradient(&len, labels)?)?;
    let weight = T::from_f64_lossy(w);
    for (dec, dt) in model.decoders.iter_mut().zip(&dec_traces) {
        let mut g = dec.loss().gradient(&dt.output, images)?;
        g.scale(weight);
        let grad_masked = dec.backward(dt, &g)?;
        grad_caps.add_assign(&mask_true_class(&grad_masked, labels)?)?;
    }
    model.classifier.backward(&trace, &grad_caps)?;
    Ok(loss)
}

/// Mean [`total_loss`] over `set`, without touching gradients.
pub fn dataset_loss<T: Element>(model: &TextCaps<T>, set: &LabeledImageSet, w: f64, batch_size: usize) -> Result<f64> {
    let indices: Vec<usize> = (0..set.len()).collect();
    let mut total = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let x = set.batch::<T>(chunk);
        let labels = set.labels_at(chunk);
        let caps = model.classifier.forward(&x)?;
        let masked = mask_true_class(&caps, &labels)?;
        let outs = model.decoders.iter().map(|d| d.decode(&masked)).collect::<Result<Vec<_>>>()?;
        let recons: Vec<_> = model.decoders.iter().zip(&outs).map(|(d, o)| (d.loss(), o)).collect();
        total += total_loss(&lengths(&caps)?, &labels, &recons, &x, w)? * chunk.len() as f64;
    }
    Ok(total / set.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<T = f64> {
    /// Epochs completed when the snapshot was taken.
    pub epoch: usize,
    pub model: TextCaps<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<T = f64> {
    pub snapshots: Vec<Snapshot<T>>,
    pub rule: EnsembleRule,
}

/// Combines per-snapshot capsule lengths `[J, M]` into one label per sample.
pub fn combine_lengths(per_snapshot: &[Tensor<f64>], rule: EnsembleRule) -> Result<Vec<usize>> {
    let first = per_snapshot
        .first()
        .ok_or_else(|| Error::InvalidArgument("an ensemble needs at least one snapshot".into()))?;
    first.expect_rank(2, "combine_lengths")?;
    for t in per_snapshot {
        t.expect_same_shape(first, "combine_lengths")?;
    }
    let m = first.dim(1);
    match rule {
        EnsembleRule::Mean => {
            let mut sum = first.clone();
            for t in &per_snapshot[1..] {
                sum.add_assign(t)?;
            }
            let n = per_snapshot.len() as f64;
            let mean: Vec<f64> = sum.data().iter().map(|&s| s / n).collect();
            Ok(argmax_rows(&mean, m))
        }
        EnsembleRule::Vote => {
            let mut votes = vec![0usize; first.len()];
            for t in per_snapshot {
                for (j, c) in argmax_rows(t.data(), m).into_iter().enumerate() {
                    votes[j * m + c] += 1;
                }
            }
            Ok(argmax_rows(&votes, m))
        }
    }
}

impl<T: Element> Ensemble<T> {
    pub fn single(model: TextCaps<T>) -> Self {
        Self {
            snapshots: vec![Snapshot { epoch: 0, model }],
            rule: EnsembleRule::Mean,
        }
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// The most recent snapshot, which serves reconstruction and generation.
    pub fn latest(&self) -> Result<&TextCaps<T>> {
        self.snapshots
            .last()
            .map(|s| &s.model)
            .ok_or_else(|| Error::InvalidArgument("ensemble has no snapshots".into()))
    }

    pub fn latest_mut(&mut self) -> Result<&mut TextCaps<T>> {
        self.snapshots
            .last_mut()
            .map(|s| &mut s.model)
            .ok_or_else(|| Error::InvalidArgument("ensemble has no snapshots".into()))
    }

    pub fn predict(&self, set: &LabeledImageSet, batch_size: usize) -> Result<Vec<usize>> {
        let lengths = self
            .snapshots
            .iter()
            .map(|s| Ok(s.model.encode(set, batch_size)?.lengths))
            .collect::<Result<Vec<_>>>()?;
        combine_lengths(&lengths, self.rule)
    }

    /// Parameters of every snapshot under `snapshot<i>.`, with the snapshot
    /// epochs, count and precision in the metadata.
    pub fn to_checkpoint(&self, config: BTreeMap<String, String>, mut metadata: TrainingMetadata) -> Result<Checkpoint> {
        let model = self.latest()?;
        let mut config = config;
        config.extend(model.config().to_map());
        config.insert("ensemble".into(), self.rule.to_string());
        let mut tensors = BTreeMap::new();
        for (i, s) in self.snapshots.iter().enumerate() {
            tensors.extend(s.model.to_tensors(&format!("snapshot{i}.")));
        }
        let epochs: Vec<usize> = self.snapshots.iter().map(|s| s.epoch).collect();
        metadata.extra.insert("snapshots".into(), self.len().to_string());
        metadata.extra.insert("snapshot_epochs".into(), join(&epochs));
        metadata.extra.insert("precision".into(), T::PRECISION.as_str().into());
        if metadata.loss_kind.is_empty() {
            metadata.loss_kind = join(&model.config().losses());
        }
        Ok(Checkpoint {
            config,
            metadata,
            tensors,
            ..Default::default()
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model_cfg = ModelConfig::from_map(&ckpt.config)?;
        let rule = match ckpt.config.get("ensemble") {
            Some(r) => r.parse()?,
            None => EnsembleRule::Mean,
        };
        let extra = &ckpt.metadata.extra;
        let epochs: Vec<usize> = match extra.get("snapshot_epochs") {
            Some(e) if !e.is_empty() => parse_list("snapshot_epochs", e)?,
            _ => Vec::new(),
        };
        if extra.get("snapshots").map(String::as_str) != Some(&epochs.len().to_string()) {
            return Err(Error::Config("checkpoint snapshot count disagrees with its epochs".into()));
        }
        let snapshots = epochs
            .into_iter()
            .enumerate()
            .map(|(i, epoch)| {
                let model = TextCaps::from_tensors(model_cfg.clone(), &ckpt.tensors, &format!("snapshot{i}."))?;
                Ok(Snapshot { epoch, model })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { snapshots, rule })
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct Training<T> {
    pub ensemble: Ensemble<T>,
    /// Mean per-sample training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch Adam training of `model` on `data`. Batch order comes from a
/// generator seeded with `cfg.seed`; a snapshot of the model is kept at the
/// end of every cycle.
pub fn train<T: Element>(model: &mut TextCaps<T>, data: &LabeledImageSet, cfg: &TrainConfig) -> Result<Training<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let side = model.config().classifier.input_side;
    if data.class_count() != model.config().classes() || data.height() != side || data.width() != side {
        return Err(Error::shape(
            "train",
            format!(
                "{} classes of {}x{} images for a model of {} classes at {side}x{side}",
                data.class_count(),
                data.height(),
                data.width(),
                model.config().classes()
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batches = data.len().div_ceil(cfg.batch_size);
    let mut ensemble = Ensemble {
        snapshots: Vec::with_capacity(cfg.snapshot_count()),
        rule: cfg.ensemble,
    };
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    model.classifier.params_mut().zero_grads();
    for d in &mut model.decoders {
        d.params_mut().zero_grads();
    }

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let lr = cfg.cyclic_lr(epoch as f64 + batch as f64 / batches as f64);
            let x = data.batch::<T>(chunk);
            let loss = match backprop_batch(model, &x, &data.labels_at(chunk), cfg.recon_weight) {
                Err(Error::NonFinite(_)) => f64::NAN,
                other => other?,
            };
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch, loss });
            }
            total += loss * chunk.len() as f64;
            adam.step(model.classifier.params_mut(), lr, "classifier.")?;
            for (i, d) in model.decoders.iter_mut().enumerate() {
                adam.step(d.params_mut(), lr, &format!("decoder{i}."))?;
            }
        }
        let mean = total / data.len() as f64;
        info!("epoch {}/{}: loss {mean:.6}", epoch + 1, cfg.epochs);
        epoch_losses.push(mean);
        if (epoch + 1) % cfg.cycle_length == 0 {
            ensemble.snapshots.push(Snapshot {
                epoch: epoch + 1,
                model: model.clone(),
            });
        }
    }
    Ok(Training { ensemble, epoch_losses })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Mean over images of the PSNR between input and reconstruction, in dB.
    pub mean_psnr: f64,
}

/// Fraction of `predicted` equal to `labels`.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    correct as f64 / labels.len().max(1) as f64
}

/// Per-image PSNR of `recons` `[J, H, W, 1]` against the images of `set`.
pub fn image_psnrs(recons: &Tensor<f64>, set: &LabeledImageSet) -> Result<Vec<f64>> {
    let per = set.height() * set.width();
    if recons.len() != set.len() * per {
        return Err(Error::shape("image_psnrs", format!("{:?} for {} images", recons.shape(), set.len())));
    }
    Ok(recons
        .data()
        .chunks_exact(per)
        .enumerate()
        .map(|(j, r)| {
            let mse = r.iter().zip(set.image(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / per as f64;
            psnr_from_mse(mse)
        })
        .collect())
}

/// Ensemble accuracy on `test`, and mean reconstruction PSNR of the latest
/// snapshot.
pub fn evaluate<T: Element>(ensemble: &Ensemble<T>, test: &LabeledImageSet, batch_size: usize) -> Result<Evaluation> {
    let predicted = ensemble.predict(test, batch_size)?;
    let recons = ensemble.latest()?.reconstruct(test, batch_size)?;
    let psnrs = image_psnrs(&recons, test)?;
    Ok(Evaluation {
        accuracy: accuracy(&predicted, test.labels()),
        mean_psnr: psnrs.iter().sum::<f64>() / psnrs.len().max(1) as f64,
    })
}
