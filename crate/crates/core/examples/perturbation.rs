// Variance-ranked perturbation of class capsules: a lightly trained model
// encodes a digit subset, the most variable instantiation parameter of each
// class is pushed by its noise cap, and the decoder renders new images.

use std::path::Path;

use textcaps::data::{export_pgm, load_dataset, take_per_class, DatasetKind, Split};
use textcaps::datagen::{class_variance, generate_dataset, noise_caps, pick_param};
use textcaps::decoder::mask_true_class;
use textcaps::pipeline::init_model;
use textcaps::train::{parse_key_values, train, RunConfig};

const CONFIG: &str = "
epochs = 6
cycle_length = 3
lr_max = 0.005
lr_min = 0.0005
batch_size = 16
per_class = 4
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
    let cfg = RunConfig::from_map(&parse_key_values(CONFIG)?)?;
    let mut model = init_model::<f32>(&cfg, 3, 0)?;
    let model = train(&mut model, &original, &cfg.train)?.ensemble.latest()?.clone();

    let caps = model.encode(&original, 32)?.capsules;
    let masked = mask_true_class(&caps, original.labels())?;
    let variance = class_variance(&masked, original.labels())?;
    let caps_bounds = noise_caps(&masked, original.labels())?;
    for a in 0..2 {
        let picked = pick_param(&variance, a)?;
        let bounds: Vec<f64> = picked.iter().map(|&k| caps_bounds.tau_k.data()[k]).collect();
        println!("rank {a}: parameter per class {picked:?}, cross-class caps {bounds:.4?}");
    }

    let generated = generate_dataset(&model, &original, &cfg.perturb_config())?;
    println!("generated {} images, per class {:?}", generated.len(), generated.class_histogram());
    let out = std::env::temp_dir().join("textcaps-perturbation-example");
    std::fs::create_dir_all(&out)?;
    for i in 0..generated.len().min(3) {
        export_pgm(generated.image(i), 28, 28, out.join(format!("generated{i}.pgm")))?;
    }
    println!("sample images in {}", out.display());
    Ok(())
}

fn main() -> textcaps::Result<()> {
    run_example()
}
