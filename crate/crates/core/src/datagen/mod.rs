//! New training images from a trained model: decoder sharpening and
//! perturbation of instantiation parameters.

mod algorithm;
mod unsharp;

pub use algorithm::{class_variance, noise_caps, perturb, perturb_params, pick_param, NoiseCaps};
pub use unsharp::{gaussian_blur, unsharp_batch, unsharp_mask, UnsharpParams};

use log::info;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::capsnet::classify;
use crate::data::LabeledImageSet;
use crate::decoder::{mask_true_class, Decoder};
use crate::error::{Error, Result};
use crate::model::TextCaps;
use crate::optim::Adam;
use crate::tensor::{Element, Tensor};

/// Decoder inputs paired with reconstruction targets.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrainPairs {
    /// Masked capsules `[P, M, D]`.
    pub inputs: Tensor<f64>,
    /// Target images `[P, H, W, 1]`.
    pub targets: Tensor<f64>,
}

impl RetrainPairs {
    pub fn len(&self) -> usize {
        self.inputs.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Each of the `J` inputs twice: first with its reconstruction as the target,
/// then with the sharpened reconstruction.
pub fn build_retrain_targets(masked: &Tensor<f64>, recons: &Tensor<f64>, p: &UnsharpParams) -> Result<RetrainPairs> {
    masked.expect_rank(3, "build_retrain_targets")?;
    recons.expect_rank(4, "build_retrain_targets")?;
    if masked.dim(0) != recons.dim(0) {
        return Err(Error::shape(
            "build_retrain_targets",
            format!("{} inputs for {} reconstructions", masked.dim(0), recons.dim(0)),
        ));
    }
    let sharp = unsharp_batch(recons, p)?;
    let mut inputs = masked.data().to_vec();
    inputs.extend_from_slice(masked.data());
    let mut targets = recons.data().to_vec();
    targets.extend_from_slice(sharp.data());
    let mut in_shape = masked.shape().to_vec();
    in_shape[0] *= 2;
    let mut out_shape = recons.shape().to_vec();
    out_shape[0] *= 2;
    Ok(RetrainPairs {
        inputs: Tensor::new(in_shape, inputs)?,
        targets: Tensor::new(out_shape, targets)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 1e-4,
            batch_size: 32,
            seed: 0,
        }
    }
}

fn rows<T: Element>(t: &Tensor<f64>, idx: &[usize]) -> Result<Tensor<T>> {
    let per = t.len() / t.dim(0);
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend(t.data()[i * per..(i + 1) * per].iter().map(|&v| T::from_f64_lossy(v)));
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data)
}

/// Trains one decoder on `pairs` with its own reconstruction loss, returning
/// the mean loss of each epoch. Nothing but the decoder is touched.
pub fn retrain_decoder<T: Element>(decoder: &mut Decoder<T>, pairs: &RetrainPairs, cfg: &RetrainConfig) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no retraining pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::default();
    let kind = decoder.loss();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    decoder.params_mut().zero_grads();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let x = rows::<T>(&pairs.inputs, chunk)?;
            let y = rows::<T>(&pairs.targets, chunk)?;
            let trace = decoder.forward_trace(&x)?;
            let loss = kind.value(&trace.output, &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("decoder retraining loss".into()));
            }
            total += loss * chunk.len() as f64;
            decoder.backward(&trace, &kind.gradient(&trace.output, &y)?)?;
            adam.step(decoder.params_mut(), cfg.learning_rate, "")?;
        }
        history.push(total / pairs.len() as f64);
    }
    Ok(history)
}

/// Sharpens every decoder of `model` by retraining it on its own
/// reconstructions of `set` plus their unsharp-masked versions.
pub fn sharpen_decoders<T: Element>(
    model: &mut TextCaps<T>,
    set: &LabeledImageSet,
    unsharp: &UnsharpParams,
    cfg: &RetrainConfig,
) -> Result<Vec<Vec<f64>>> {
    let enc = model.encode(set, cfg.batch_size)?;
    let masked = mask_true_class(&enc.capsules, set.labels())?;
    let recons = model.decode_all(&masked, cfg.batch_size)?;
    let mut histories = Vec::new();
    for (i, (decoder, recon)) in model.decoders.iter_mut().zip(recons).enumerate() {
        let pairs = build_retrain_targets(&masked, &recon, unsharp)?;
        let history = retrain_decoder(decoder, &pairs, cfg)?;
        info!("decoder {i} retrained on {} pairs, epoch losses {history:?}", pairs.len());
        histories.push(history);
    }
    Ok(histories)
}

/// Indices of the samples whose predicted class matches the label.
pub fn filter_misreconstructed(caps: &Tensor<f64>, labels: &[usize]) -> Result<Vec<usize>> {
    let predicted = classify(caps)?;
    if predicted.len() != labels.len() {
        return Err(Error::shape(
            "filter_misreconstructed",
            format!("{} labels for {} samples", labels.len(), predicted.len()),
        ));
    }
    Ok(predicted
        .iter()
        .zip(labels)
        .enumerate()
        .filter(|(_, (p, l))| p == l)
        .map(|(j, _)| j)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbConfig {
    /// Variance ranks `a` to generate from; each yields one image per sample.
    pub ranks: Vec<usize>,
    pub per_class: usize,
    pub seed: u64,
    /// Scale each perturbation by a uniform draw from `(0, 1]`.
    pub random_scale: bool,
    pub batch_size: usize,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            ranks: vec![0, 1],
            per_class: 50,
            seed: 0,
            random_scale: false,
            batch_size: 32,
        }
    }
}

/// Perturbed images of every correctly classified sample for each configured
/// rank, labelled like their source. Images are decoded with the first
/// decoder.
pub fn perturbed_pool<T: Element>(model: &TextCaps<T>, original: &LabeledImageSet, cfg: &PerturbConfig) -> Result<LabeledImageSet> {
    if cfg.ranks.is_empty() {
        return Err(Error::Config("no variance ranks to generate from".into()));
    }
    let classes = original.class_count();
    let enc = model.encode(original, cfg.batch_size)?;
    let kept = filter_misreconstructed(&enc.capsules, original.labels())?;
    let labels = original.labels_at(&kept);
    let mut counts = vec![0; classes];
    for &l in &labels {
        counts[l] += 1;
    }
    if let Some(class) = counts.iter().position(|&c| c < 2) {
        return Err(Error::InsufficientClassSamples {
            class,
            found: counts[class],
            needed: 2,
        });
    }
    info!("{} of {} samples classified correctly, per class {counts:?}", kept.len(), original.len());
    let caps = rows::<f64>(&enc.capsules, &kept)?;
    let masked = mask_true_class(&caps, &labels)?;
    let tau = noise_caps(&masked, &labels)?;
    let sigma = class_variance(&masked, &labels)?;
    let mut scale_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);

    let mut pixels = Vec::new();
    let mut pool_labels = Vec::new();
    for &a in &cfg.ranks {
        let k_hat = pick_param(&sigma, a)?;
        let rng = cfg.random_scale.then_some(&mut scale_rng);
        let moved = perturb_params(&masked, &labels, &k_hat, &tau, rng)?;
        let images = model.decode_all(&moved, cfg.batch_size)?.swap_remove(0);
        pixels.extend_from_slice(images.data());
        pool_labels.extend_from_slice(&labels);
    }
    LabeledImageSet::new(pixels, pool_labels, classes, original.height(), original.width())
}

/// Draws `per_class` images per class without replacement from the
/// perturbed pool, keeping pool order within the draw.
pub fn generate_dataset<T: Element>(model: &TextCaps<T>, original: &LabeledImageSet, cfg: &PerturbConfig) -> Result<LabeledImageSet> {
    if cfg.per_class == 0 {
        return Err(Error::Config("per_class must be at least 1".into()));
    }
    let pool = perturbed_pool(model, original, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut chosen = Vec::new();
    for class in 0..pool.class_count() {
        let members: Vec<usize> = (0..pool.len()).filter(|&i| pool.label(i) == class).collect();
        if members.len() < cfg.per_class {
            return Err(Error::InsufficientClassSamples {
                class,
                found: members.len(),
                needed: cfg.per_class,
            });
        }
        let mut picks = index::sample(&mut rng, members.len(), cfg.per_class).into_vec();
        picks.sort_unstable();
        chosen.extend(picks.into_iter().map(|p| members[p]));
    }
    Ok(pool.subset(&chosen))
}
