//! The full generation pipeline: train M1, sharpen its decoders, generate a
//! perturbed dataset from it, then train and sharpen M2 on the enlarged set.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::checkpoint::{save_checkpoint, Checkpoint, TrainingMetadata};
use crate::data::idx::write_idx;
use crate::data::LabeledImageSet;
use crate::datagen::{generate_dataset, sharpen_decoders};
use crate::error::Result;
use crate::model::TextCaps;
use crate::tensor::Element;
use crate::train::{evaluate, train, Ensemble, Evaluation, RunConfig};

pub const GENERATED_IMAGES: &str = "generated-images-idx3-ubyte";
pub const GENERATED_LABELS: &str = "generated-labels-idx1-ubyte";

/// Checkpoint of `ensemble` carrying the whole run configuration.
pub fn run_checkpoint<T: Element>(
    ensemble: &Ensemble<T>,
    cfg: &RunConfig,
    extra: BTreeMap<String, String>,
) -> Result<Checkpoint> {
    let metadata = TrainingMetadata {
        epoch: ensemble.snapshots.last().map_or(0, |s| s.epoch),
        seed: cfg.train.seed,
        loss_kind: String::new(),
        extra,
    };
    ensemble.to_checkpoint(cfg.to_map(), metadata)
}

/// A fresh model for `classes` classes, initialised from the run seed on
/// generator stream `stream`.
pub fn init_model<T: Element>(cfg: &RunConfig, classes: usize, stream: u64) -> Result<TextCaps<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    rng.set_stream(stream);
    TextCaps::new(cfg.model_config(classes)?, &mut rng)
}

#[derive(Debug, Clone)]
pub struct PipelineRun<T> {
    /// M1 as trained, before decoder sharpening.
    pub m1: Ensemble<T>,
    pub m1_eval: Evaluation,
    /// M1 with sharpened decoders in its latest snapshot.
    pub m1_sharpened: Ensemble<T>,
    pub m1_sharpened_eval: Evaluation,
    /// Perturbed images, quantised to bytes as they are stored.
    pub generated: LabeledImageSet,
    pub m2: Ensemble<T>,
    pub m2_eval: Evaluation,
}

impl<T> PipelineRun<T> {
    /// Test PSNR of M2 minus that of M1, in dB.
    pub fn psnr_gain(&self) -> f64 {
        self.m2_eval.mean_psnr - self.m1_eval.mean_psnr
    }

    pub fn report(&self) -> String {
        let mut s = String::new();
        for (name, e) in [
            ("m1", &self.m1_eval),
            ("m1_sharpened", &self.m1_sharpened_eval),
            ("m2", &self.m2_eval),
        ] {
            let _ = writeln!(s, "{name}_accuracy={}", e.accuracy);
            let _ = writeln!(s, "{name}_psnr={}", e.mean_psnr);
        }
        let _ = writeln!(s, "generated={}", self.generated.len());
        let _ = writeln!(s, "psnr_gain={}", self.psnr_gain());
        s
    }
}

/// Runs every stage on `original` (the reduced training set), evaluating on
/// `test` after each model-changing stage.
pub fn run_pipeline<T: Element>(original: &LabeledImageSet, test: &LabeledImageSet, cfg: &RunConfig) -> Result<PipelineRun<T>> {
    cfg.validate()?;
    info!("stage 1: training M1 on {} samples", original.len());
    let mut model = init_model::<T>(cfg, original.class_count(), 0)?;
    let m1 = train(&mut model, original, &cfg.train)?.ensemble;
    continue_pipeline(m1, original, test, cfg)
}

/// The stages after M1 training, starting from a trained M1.
pub fn continue_pipeline<T: Element>(
    m1: Ensemble<T>,
    original: &LabeledImageSet,
    test: &LabeledImageSet,
    cfg: &RunConfig,
) -> Result<PipelineRun<T>> {
    cfg.validate()?;
    let batch = cfg.train.batch_size;
    let m1_eval = evaluate(&m1, test, batch)?;
    info!("M1: accuracy {:.4}, PSNR {:.3} dB", m1_eval.accuracy, m1_eval.mean_psnr);

    info!("stage 2: sharpening M1 decoders");
    let mut m1_sharpened = m1.clone();
    sharpen_decoders(m1_sharpened.latest_mut()?, original, &cfg.unsharp, &cfg.retrain_config())?;
    let m1_sharpened_eval = evaluate(&m1_sharpened, test, batch)?;

    info!("stage 3: generating {} images per class", cfg.per_class);
    let generated = generate_dataset(m1_sharpened.latest()?, original, &cfg.perturb_config())?.quantized();

    let enlarged = original.concat(&generated)?;
    info!("stage 4: training M2 on {} samples", enlarged.len());
    let mut model = init_model::<T>(cfg, original.class_count(), 1)?;
    let mut m2 = train(&mut model, &enlarged, &cfg.train)?.ensemble;
    sharpen_decoders(m2.latest_mut()?, &enlarged, &cfg.unsharp, &cfg.retrain_config())?;
    let m2_eval = evaluate(&m2, test, batch)?;
    info!("M2: accuracy {:.4}, PSNR {:.3} dB", m2_eval.accuracy, m2_eval.mean_psnr);

    Ok(PipelineRun {
        m1,
        m1_eval,
        m1_sharpened,
        m1_sharpened_eval,
        generated,
        m2,
        m2_eval,
    })
}

impl<T: Element> PipelineRun<T> {
    /// Writes `m1.ckpt`, `m1-sharpened.ckpt`, the generated IDX pair,
    /// `m2.ckpt` and `report.txt` into `dir`.
    pub fn save(&self, dir: &Path, cfg: &RunConfig, extra: &BTreeMap<String, String>) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (file, ens, eval) in [
            ("m1.ckpt", &self.m1, &self.m1_eval),
            ("m1-sharpened.ckpt", &self.m1_sharpened, &self.m1_sharpened_eval),
            ("m2.ckpt", &self.m2, &self.m2_eval),
        ] {
            let mut meta = extra.clone();
            meta.insert("accuracy".into(), eval.accuracy.to_string());
            save_checkpoint(dir.join(file), &run_checkpoint(ens, cfg, meta)?)?;
        }
        write_idx(&self.generated, dir.join(GENERATED_IMAGES), dir.join(GENERATED_LABELS))?;
        std::fs::write(dir.join("report.txt"), self.report())?;
        Ok(())
    }
}
