// Reconstruction losses and quality metrics on a digit from the bundled
// fixture, plus the two-decoder per-pixel combination.

use std::path::Path;

use textcaps::data::{load_dataset, DatasetKind, Split};
use textcaps::datagen::gaussian_blur;
use textcaps::decoder::{combine_two, psnr, ssim, ReconLossKind, SsimParams};
use textcaps::tensor::Tensor;

pub fn run_example() -> textcaps::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/mnist012");
    let set = load_dataset(&dir, DatasetKind::Mnist, Split::Test)?;
    let image = Tensor::new([28, 28], set.image(0).to_vec())?;
    let blurred = Tensor::new([28, 28], gaussian_blur(set.image(0), 28, 28, 1.0))?;
    let dimmed = image.map(|p| p * 0.8);

    for (name, x) in [("blurred", &blurred), ("dimmed", &dimmed)] {
        print!("{name}: PSNR {:.2} dB, SSIM {:.4}", psnr(x, &image)?, ssim(x, &image, &SsimParams::default())?.mean);
        for kind in [ReconLossKind::Mse, ReconLossKind::L1, ReconLossKind::Bce, ReconLossKind::Dssim] {
            print!(", {} {:.4}", kind.as_str(), kind.value(x, &image)?);
        }
        println!();
    }
    let both = combine_two(&blurred, &dimmed, &image)?;
    println!("per-pixel combination: PSNR {:.2} dB", psnr(&both, &image)?);
    Ok(())
}

fn main() -> textcaps::Result<()> {
    run_example()
}
