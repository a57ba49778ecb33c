// Unsharp masking of a blurred digit, as used for decoder sharpening targets.

use std::path::Path;

use textcaps::data::{load_dataset, DatasetKind, Split};
use textcaps::datagen::{gaussian_blur, unsharp_mask, UnsharpParams};
use textcaps::decoder::psnr;
use textcaps::tensor::Tensor;

pub fn run_example() -> textcaps::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/mnist012");
    let set = load_dataset(&dir, DatasetKind::Mnist, Split::Test)?;
    let original = set.image(1);
    let blurred = gaussian_blur(original, 28, 28, 1.0);
    let as_tensor = |v: &[f64]| Tensor::new([28, 28], v.to_vec());
    let reference = as_tensor(original)?;
    println!("blurred: PSNR {:.2} dB", psnr(&as_tensor(&blurred)?, &reference)?);
    for repeats in [1, 3, 10] {
        let p = UnsharpParams { repeats, ..Default::default() };
        let sharp = unsharp_mask(&blurred, 28, 28, &p)?;
        println!("unsharp x{repeats}: PSNR {:.2} dB", psnr(&as_tensor(&sharp)?, &reference)?);
    }
    Ok(())
}

fn main() -> textcaps::Result<()> {
    run_example()
}
