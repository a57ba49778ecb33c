// Central finite-difference checks of the convolution and transposed
// convolution kernels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textcaps::tensor::{
    conv2d, conv2d_backward, deconv2d, deconv2d_backward, grad_check, projected, ConvSpec, Padding, Tensor,
};

pub fn run_example() -> textcaps::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut random = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));

    let spec = ConvSpec::new(3, 2, Padding::Same, 2, 3);
    let (x, w, b) = (random(&[1, 6, 6, 2]), random(&spec.conv_weight_shape()), random(&[3]));
    let r = random(conv2d(&x, &w, &b, &spec)?.shape());
    let op = projected(
        |w| conv2d(&x, w, &b, &spec),
        |w, r| Ok(conv2d_backward(r, &x, w, &spec)?.weights),
        r,
    );
    println!("conv2d weights: max relative error {:.2e}", grad_check(&op, &w, 1e-5)?);

    let (x, w, b) = (random(&[1, 3, 3, 2]), random(&[3, 3, 3, 2]), random(&[3]));
    let spec = ConvSpec::new(3, 2, Padding::Same, 2, 3);
    let r = random(deconv2d(&x, &w, &b, &spec)?.shape());
    let op = projected(
        |x| deconv2d(x, &w, &b, &spec),
        |x, r| Ok(deconv2d_backward(r, x, &w, &spec)?.input),
        r,
    );
    println!("deconv2d input: max relative error {:.2e}", grad_check(&op, &x, 1e-5)?);
    Ok(())
}

fn main() -> textcaps::Result<()> {
    run_example()
}
