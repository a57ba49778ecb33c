// Cyclic-learning-rate training with one snapshot per cycle on a small
// digit subset, then ensemble evaluation and a checkpoint round trip.
//
// The network is narrowed so the example runs in seconds; drop the
// architecture overrides for the full-size model.

use std::collections::BTreeMap;
use std::path::Path;

use textcaps::data::{load_checkpoint, load_dataset, save_checkpoint, take_per_class, DatasetKind, Split};
use textcaps::pipeline::{init_model, run_checkpoint};
use textcaps::train::{evaluate, parse_key_values, train, Ensemble, RunConfig};

const CONFIG: &str = "
epochs = 4
cycle_length = 2
lr_max = 0.005
lr_min = 0.0005
batch_size = 16
conv_channels = 8,8,8
primary_channels = 4
primary_kernel = 5
decoder_base = 7,7,8
decoder_channels = 8,8,4,1
";

pub fn run_example() -> textcaps::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/mnist012");
    let full = load_dataset(&dir, DatasetKind::Mnist, Split::Train)?.with_class_count(3)?;
    let (train_set, _) = take_per_class(&full, 30)?;
    let test = load_dataset(&dir, DatasetKind::Mnist, Split::Test)?.with_class_count(3)?;

    let cfg = RunConfig::from_map(&parse_key_values(CONFIG)?)?;
    for epoch in [0.0, 0.5, 1.0, 1.5, 2.0] {
        println!("lr at epoch {epoch}: {:.2e}", cfg.train.cyclic_lr(epoch));
    }
    let mut model = init_model::<f32>(&cfg, 3, 0)?;
    let run = train(&mut model, &train_set, &cfg.train)?;
    println!("epoch losses {:.4?}", run.epoch_losses);
    let eval = evaluate(&run.ensemble, &test, 32)?;
    println!(
        "{} snapshots: accuracy {:.1}%, PSNR {:.2} dB",
        run.ensemble.len(),
        100.0 * eval.accuracy,
        eval.mean_psnr
    );

    let path = std::env::temp_dir().join("textcaps-snapshot-example.ckpt");
    save_checkpoint(&path, &run_checkpoint(&run.ensemble, &cfg, BTreeMap::new())?)?;
    let restored = Ensemble::<f32>::from_checkpoint(&load_checkpoint(&path)?)?;
    assert_eq!(restored.predict(&test, 32)?, run.ensemble.predict(&test, 32)?);
    println!("checkpoint {} restores the same predictions", path.display());
    Ok(())
}

fn main() -> textcaps::Result<()> {
    run_example()
}
