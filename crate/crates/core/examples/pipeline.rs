// The whole generation pipeline on a narrowed model: train M1, sharpen its
// decoders, generate perturbed images, train M2 on the enlarged set and
// compare reconstruction quality.

use std::collections::BTreeMap;
use std::path::Path;

use textcaps::data::{load_dataset, take_per_class, DatasetKind, Split};
use textcaps::pipeline::run_pipeline;
use textcaps::train::{parse_key_values, RunConfig};

const CONFIG: &str = "
epochs = 6
cycle_length = 3
lr_max = 0.005
lr_min = 0.0005
batch_size = 16
retrain_epochs = 1
per_class = 5
conv_channels = 8,8,8
primary_channels = 4
primary_kernel = 5
decoder_base = 7,7,8
decoder_channels = 8,8,4,1
";

pub fn run_example() -> textcaps::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/mnist012");
    let full = load_dataset(&dir, DatasetKind::Mnist, Split::Train)?.with_class_count(3)?;
    let (original, _) = take_per_class(&full, 20)?;
    let test = load_dataset(&dir, DatasetKind::Mnist, Split::Test)?.with_class_count(3)?;
    let cfg = RunConfig::from_map(&parse_key_values(CONFIG)?)?;

    let run = run_pipeline::<f32>(&original, &test, &cfg)?;
    print!("{}", run.report());
    let out = std::env::temp_dir().join("textcaps-pipeline-example");
    run.save(&out, &cfg, &BTreeMap::new())?;
    println!("checkpoints and generated set in {}", out.display());
    Ok(())
}

fn main() -> textcaps::Result<()> {
    run_example()
}
