//! 2-d convolution and transposed convolution over `[N, H, W, C]` batches,
//! lowered to im2col + GEMM.

use super::linalg::matmul;
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Upper bound on the im2col scratch buffer, in elements. Batches are split
/// into sample chunks that fit.
const COL_BUDGET: usize = 1 << 23;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Kernel geometry of a convolution layer.
///
/// Convolution weights are `[kh, kw, in_channels, out_channels]`. Transposed
/// convolution weights are `[kh, kw, out_channels, in_channels]`, i.e. the
/// weights of the convolution it is the adjoint of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: Padding,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize, stride: usize, padding: Padding, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
            in_channels,
            out_channels,
        }
    }

    /// Spatial output size of the forward convolution along one axis.
    pub fn conv_output_len(&self, input: usize, kernel: usize) -> Result<usize> {
        let s = self.stride;
        match self.padding {
            Padding::Same => Ok(input.div_ceil(s)),
            Padding::Valid => {
                if input < kernel {
                    return Err(Error::shape(
                        "conv2d",
                        format!("valid padding needs input {input} >= kernel {kernel}"),
                    ));
                }
                Ok((input - kernel) / s + 1)
            }
        }
    }

    /// Spatial output size of the transposed convolution along one axis.
    pub fn deconv_output_len(&self, input: usize, kernel: usize) -> usize {
        match self.padding {
            Padding::Same => input * self.stride,
            Padding::Valid => (input - 1) * self.stride + kernel,
        }
    }

    pub fn conv_output_shape(&self, input: &[usize]) -> Result<[usize; 4]> {
        Ok([
            input[0],
            self.conv_output_len(input[1], self.kernel_h)?,
            self.conv_output_len(input[2], self.kernel_w)?,
            self.out_channels,
        ])
    }

    pub fn conv_weight_shape(&self) -> [usize; 4] {
        [self.kernel_h, self.kernel_w, self.in_channels, self.out_channels]
    }

    pub fn deconv_weight_shape(&self) -> [usize; 4] {
        [self.kernel_h, self.kernel_w, self.out_channels, self.in_channels]
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 {
            return Err(Error::shape(op, "kernel and stride must be positive"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::shape(op, "channel counts must be positive"));
        }
        Ok(())
    }
}

/// Gradients returned by the backward passes.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Index mapping between a "large" spatial grid and the "small" grid the
/// convolution produces from it.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    big_h: usize,
    big_w: usize,
    small_h: usize,
    small_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    channels: usize,
}

impl Geometry {
    fn new(spec: &ConvSpec, big: (usize, usize), small: (usize, usize), channels: usize) -> Self {
        let pad = |big: usize, small: usize, k: usize| match spec.padding {
            Padding::Same => ((small - 1) * spec.stride + k).saturating_sub(big) / 2,
            Padding::Valid => 0,
        };
        Self {
            big_h: big.0,
            big_w: big.1,
            small_h: small.0,
            small_w: small.1,
            kh: spec.kernel_h,
            kw: spec.kernel_w,
            stride: spec.stride,
            pad_top: pad(big.0, small.0, spec.kernel_h),
            pad_left: pad(big.1, small.1, spec.kernel_w),
            channels,
        }
    }

    fn rows(&self) -> usize {
        self.small_h * self.small_w
    }

    fn cols(&self) -> usize {
        self.kh * self.kw * self.channels
    }

    fn big_len(&self) -> usize {
        self.big_h * self.big_w * self.channels
    }

    fn chunk(&self, batch: usize) -> usize {
        (COL_BUDGET / (self.rows() * self.cols()).max(1)).clamp(1, batch)
    }

    /// Source offset in the big grid for kernel tap `(ky, kx)` of output `(oy, ox)`.
    #[inline]
    fn tap(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (iy < self.big_h && ix < self.big_w).then(|| (iy * self.big_w + ix) * self.channels)
    }

    fn im2col<T: Element>(&self, big: &[T], col: &mut [T]) {
        let c = self.channels;
        let mut row = 0;
        for oy in 0..self.small_h {
            for ox in 0..self.small_w {
                let dst_row = &mut col[row * self.cols()..(row + 1) * self.cols()];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let dst = &mut dst_row[(ky * self.kw + kx) * c..(ky * self.kw + kx + 1) * c];
                        match self.tap(oy, ox, ky, kx) {
                            Some(src) => dst.copy_from_slice(&big[src..src + c]),
                            None => dst.iter_mut().for_each(|x| *x = T::zero()),
                        }
                    }
                }
                row += 1;
            }
        }
    }

    fn col2im<T: Element>(&self, col: &[T], big: &mut [T]) {
        let c = self.channels;
        let mut row = 0;
        for oy in 0..self.small_h {
            for ox in 0..self.small_w {
                let src_row = &col[row * self.cols()..(row + 1) * self.cols()];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        if let Some(dst) = self.tap(oy, ox, ky, kx) {
                            let src = &src_row[(ky * self.kw + kx) * c..(ky * self.kw + kx + 1) * c];
                            for (d, &s) in big[dst..dst + c].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn check_input<T: Element>(input: &Tensor<T>, channels: usize, op: &'static str) -> Result<()> {
    input.expect_rank(4, op)?;
    if input.dim(3) != channels {
        return Err(Error::shape(
            op,
            format!("input channels: expected {channels}, got {}", input.dim(3)),
        ));
    }
    Ok(())
}

fn check_params<T: Element>(
    weights: &Tensor<T>,
    expected_weights: [usize; 4],
    bias: Option<&Tensor<T>>,
    bias_len: usize,
    op: &'static str,
) -> Result<()> {
    if weights.shape() != expected_weights {
        return Err(Error::shape(
            op,
            format!("weights: expected {expected_weights:?}, got {:?}", weights.shape()),
        ));
    }
    if let Some(bias) = bias {
        if bias.shape() != [bias_len] {
            return Err(Error::shape(
                op,
                format!("bias: expected [{bias_len}], got {:?}", bias.shape()),
            ));
        }
    }
    Ok(())
}

fn conv_geometry<T: Element>(input: &Tensor<T>, spec: &ConvSpec) -> Result<(Geometry, [usize; 4])> {
    let out = spec.conv_output_shape(input.shape())?;
    let geo = Geometry::new(
        spec,
        (input.dim(1), input.dim(2)),
        (out[1], out[2]),
        spec.in_channels,
    );
    Ok((geo, out))
}

pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d";
    spec.validate(OP)?;
    check_input(input, spec.in_channels, OP)?;
    check_params(weights, spec.conv_weight_shape(), Some(bias), spec.out_channels, OP)?;
    let (geo, out_shape) = conv_geometry(input, spec)?;
    let batch = input.dim(0);
    let cout = spec.out_channels;
    let mut out = Tensor::zeros(out_shape);
    let chunk = geo.chunk(batch);
    let mut col = vec![T::zero(); chunk * geo.rows() * geo.cols()];
    let out_per = geo.rows() * cout;

    for start in (0..batch).step_by(chunk) {
        let n = chunk.min(batch - start);
        for s in 0..n {
            let src = &input.data()[(start + s) * geo.big_len()..(start + s + 1) * geo.big_len()];
            geo.im2col(src, &mut col[s * geo.rows() * geo.cols()..(s + 1) * geo.rows() * geo.cols()]);
        }
        let dst = &mut out.data_mut()[start * out_per..(start + n) * out_per];
        matmul(&col, false, weights.data(), false, dst, n * geo.rows(), geo.cols(), cout, false);
        for row in dst.chunks_exact_mut(cout) {
            for (x, &b) in row.iter_mut().zip(bias.data()) {
                *x += b;
            }
        }
    }
    out.checked(OP)
}

pub fn conv2d_backward<T: Element>(
    upstream: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    const OP: &str = "conv2d_backward";
    spec.validate(OP)?;
    check_input(input, spec.in_channels, OP)?;
    check_params(weights, spec.conv_weight_shape(), None, spec.out_channels, OP)?;
    let (geo, out_shape) = conv_geometry(input, spec)?;
    upstream.expect_shape(&out_shape, OP)?;
    let batch = input.dim(0);
    let cout = spec.out_channels;
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_weights = Tensor::zeros(weights.shape());
    let mut grad_bias = Tensor::zeros([cout]);
    let chunk = geo.chunk(batch);
    let mut col = vec![T::zero(); chunk * geo.rows() * geo.cols()];
    let out_per = geo.rows() * cout;

    for start in (0..batch).step_by(chunk) {
        let n = chunk.min(batch - start);
        let rows = n * geo.rows();
        let g = &upstream.data()[start * out_per..(start + n) * out_per];
        for s in 0..n {
            let src = &input.data()[(start + s) * geo.big_len()..(start + s + 1) * geo.big_len()];
            geo.im2col(src, &mut col[s * geo.rows() * geo.cols()..(s + 1) * geo.rows() * geo.cols()]);
        }
        matmul(&col, true, g, false, grad_weights.data_mut(), geo.cols(), rows, cout, true);
        for row in g.chunks_exact(cout) {
            for (gb, &x) in grad_bias.data_mut().iter_mut().zip(row) {
                *gb += x;
            }
        }
        matmul(g, false, weights.data(), true, &mut col, rows, cout, geo.cols(), false);
        for s in 0..n {
            let dst = &mut grad_input.data_mut()[(start + s) * geo.big_len()..(start + s + 1) * geo.big_len()];
            geo.col2im(&col[s * geo.rows() * geo.cols()..(s + 1) * geo.rows() * geo.cols()], dst);
        }
    }
    Ok(ConvGrads {
        input: grad_input.checked(OP)?,
        weights: grad_weights.checked(OP)?,
        bias: grad_bias.checked(OP)?,
    })
}

fn deconv_geometry<T: Element>(input: &Tensor<T>, spec: &ConvSpec) -> ([usize; 4], Geometry) {
    let out_h = spec.deconv_output_len(input.dim(1), spec.kernel_h);
    let out_w = spec.deconv_output_len(input.dim(2), spec.kernel_w);
    let geo = Geometry::new(
        spec,
        (out_h, out_w),
        (input.dim(1), input.dim(2)),
        spec.out_channels,
    );
    ([input.dim(0), out_h, out_w, spec.out_channels], geo)
}

/// Transposed convolution: the adjoint of [`conv2d`] with tied weights, plus
/// a bias. With `Padding::Same` a stride-`s` layer maps spatial size `n` to `n·s`.
pub fn deconv2d<T: Element>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    const OP: &str = "deconv2d";
    spec.validate(OP)?;
    check_input(input, spec.in_channels, OP)?;
    check_params(weights, spec.deconv_weight_shape(), Some(bias), spec.out_channels, OP)?;
    let (out_shape, geo) = deconv_geometry(input, spec);
    let batch = input.dim(0);
    let cin = spec.in_channels;
    let mut out = Tensor::zeros(out_shape);
    let chunk = geo.chunk(batch);
    let mut col = vec![T::zero(); chunk * geo.rows() * geo.cols()];
    let in_per = geo.rows() * cin;

    for start in (0..batch).step_by(chunk) {
        let n = chunk.min(batch - start);
        let x = &input.data()[start * in_per..(start + n) * in_per];
        matmul(x, false, weights.data(), true, &mut col, n * geo.rows(), cin, geo.cols(), false);
        for s in 0..n {
            let dst = &mut out.data_mut()[(start + s) * geo.big_len()..(start + s + 1) * geo.big_len()];
            geo.col2im(&col[s * geo.rows() * geo.cols()..(s + 1) * geo.rows() * geo.cols()], dst);
        }
    }
    for px in out.data_mut().chunks_exact_mut(spec.out_channels) {
        for (x, &b) in px.iter_mut().zip(bias.data()) {
            *x += b;
        }
    }
    out.checked(OP)
}

pub fn deconv2d_backward<T: Element>(
    upstream: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    const OP: &str = "deconv2d_backward";
    spec.validate(OP)?;
    check_input(input, spec.in_channels, OP)?;
    check_params(weights, spec.deconv_weight_shape(), None, spec.out_channels, OP)?;
    let (out_shape, geo) = deconv_geometry(input, spec);
    upstream.expect_shape(&out_shape, OP)?;
    let batch = input.dim(0);
    let cin = spec.in_channels;
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_weights = Tensor::zeros(weights.shape());
    let mut grad_bias = Tensor::zeros([spec.out_channels]);
    let chunk = geo.chunk(batch);
    let mut col = vec![T::zero(); chunk * geo.rows() * geo.cols()];
    let in_per = geo.rows() * cin;

    for px in upstream.data().chunks_exact(spec.out_channels) {
        for (gb, &g) in grad_bias.data_mut().iter_mut().zip(px) {
            *gb += g;
        }
    }
    for start in (0..batch).step_by(chunk) {
        let n = chunk.min(batch - start);
        let rows = n * geo.rows();
        for s in 0..n {
            let src = &upstream.data()[(start + s) * geo.big_len()..(start + s + 1) * geo.big_len()];
            geo.im2col(src, &mut col[s * geo.rows() * geo.cols()..(s + 1) * geo.rows() * geo.cols()]);
        }
        let x = &input.data()[start * in_per..(start + n) * in_per];
        let gx = &mut grad_input.data_mut()[start * in_per..(start + n) * in_per];
        matmul(&col, false, weights.data(), false, gx, rows, geo.cols(), cin, false);
        matmul(&col, true, x, false, grad_weights.data_mut(), geo.cols(), rows, cin, true);
    }
    Ok(ConvGrads {
        input: grad_input.checked(OP)?,
        weights: grad_weights.checked(OP)?,
        bias: grad_bias.checked(OP)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, projected};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_kernel_is_identity() {
        let spec = ConvSpec::new(1, 1, Padding::Same, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 5, 4, 1], &mut rng);
        let w = Tensor::full([1, 1, 1, 1], 1.0);
        let b = Tensor::zeros([1]);
        assert_eq!(conv2d(&x, &w, &b, &spec).unwrap(), x);
        assert_eq!(deconv2d(&x, &w, &b, &spec).unwrap(), x);
        let g = conv2d_backward(&x, &x, &w, &spec).unwrap();
        assert_eq!(g.input, x);
    }

    #[test]
    fn all_ones_kernel_counts_window_support() {
        let spec = ConvSpec::new(3, 1, Padding::Same, 1, 1);
        let x = Tensor::full([1, 3, 3, 1], 1.0);
        let w = Tensor::full([3, 3, 1, 1], 1.0);
        let y = conv2d(&x, &w, &Tensor::zeros([1]), &spec).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn output_sizes() {
        let spec = ConvSpec::new(3, 2, Padding::Same, 1, 2);
        let x = Tensor::<f64>::zeros([1, 28, 28, 1]);
        let y = conv2d(&x, &Tensor::zeros([3, 3, 1, 2]), &Tensor::zeros([2]), &spec).unwrap();
        assert_eq!(y.shape(), &[1, 14, 14, 2]);

        let valid = ConvSpec::new(3, 2, Padding::Valid, 1, 1);
        assert_eq!(valid.conv_output_len(28, 3).unwrap(), 13);
        assert!(valid.conv_output_len(2, 3).is_err());

        let up = ConvSpec::new(3, 2, Padding::Same, 4, 2);
        let x = Tensor::<f64>::zeros([1, 7, 7, 4]);
        let y = deconv2d(&x, &Tensor::zeros([3, 3, 2, 4]), &Tensor::zeros([2]), &up).unwrap();
        assert_eq!(y.shape(), &[1, 14, 14, 2]);
    }

    #[test]
    fn same_padding_stride_one_preserves_size() {
        for k in [1, 2, 3, 4, 5, 9] {
            let spec = ConvSpec::new(k, 1, Padding::Same, 1, 1);
            let x = Tensor::<f64>::zeros([1, 6, 7, 1]);
            let y = conv2d(&x, &Tensor::zeros([k, k, 1, 1]), &Tensor::zeros([1]), &spec).unwrap();
            assert_eq!(&y.shape()[1..3], &[6, 7]);
        }
    }

    #[test]
    fn mismatched_channels_are_rejected() {
        let spec = ConvSpec::new(3, 1, Padding::Same, 2, 1);
        let x = Tensor::<f64>::zeros([1, 4, 4, 3]);
        let err = conv2d(&x, &Tensor::zeros([3, 3, 2, 1]), &Tensor::zeros([1]), &spec).unwrap_err();
        assert!(err.to_string().contains("input channels"));
        let x = Tensor::<f64>::zeros([1, 4, 4, 2]);
        let err = conv2d(&x, &Tensor::zeros([3, 3, 1, 1]), &Tensor::zeros([1]), &spec).unwrap_err();
        assert!(err.to_string().contains("weights"));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let spec = ConvSpec::new(3, 2, Padding::Same, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 6, 6, 2], &mut rng);
        let w = random(&[3, 3, 2, 3], &mut rng);
        let g = conv2d_backward(&Tensor::zeros([2, 3, 3, 3]), &x, &w, &spec).unwrap();
        assert_eq!(g.input.max_abs(), 0.0);
        assert_eq!(g.weights.max_abs(), 0.0);
        assert_eq!(g.bias.max_abs(), 0.0);
    }

    #[test]
    fn deconv_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for stride in [1, 2] {
            let spec = ConvSpec::new(3, stride, Padding::Same, 3, 2);
            let w = random(&[3, 3, 3, 2], &mut rng);
            let x = random(&[2, 4, 4, 3], &mut rng);
            let conv_x = conv2d(&x, &w, &Tensor::zeros([2]), &spec).unwrap();
            let g = random(conv_x.shape(), &mut rng);
            let dspec = ConvSpec::new(3, stride, Padding::Same, 2, 3);
            let deconv_g = deconv2d(&g, &w, &Tensor::zeros([3]), &dspec).unwrap();
            let lhs = deconv_g.dot(&x).unwrap();
            let rhs = g.dot(&conv_x).unwrap();
            assert!((lhs - rhs).abs() < 1e-10, "stride {stride}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_is_linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = ConvSpec::new(3, 2, Padding::Same, 2, 2);
        let w = random(&[3, 3, 2, 2], &mut rng);
        let zero = Tensor::zeros([2]);
        let x = random(&[1, 5, 5, 2], &mut rng);
        let y = random(&[1, 5, 5, 2], &mut rng);
        let (a, b) = (0.7, -1.3);
        let mix = x.zip_map(&y, "mix", |p, q| a * p + b * q).unwrap();
        let lhs = conv2d(&mix, &w, &zero, &spec).unwrap();
        let fx = conv2d(&x, &w, &zero, &spec).unwrap();
        let fy = conv2d(&y, &w, &zero, &spec).unwrap();
        let rhs = fx.zip_map(&fy, "mix", |p, q| a * p + b * q).unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() < 1e-10);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (stride, padding) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid)] {
            let spec = ConvSpec::new(3, stride, padding, 2, 3);
            let x = random(&[2, 5, 5, 2], &mut rng);
            let w = random(&[3, 3, 2, 3], &mut rng);
            let b = random(&[3], &mut rng);
            let out_shape = spec.conv_output_shape(x.shape()).unwrap();
            let r = random(&out_shape, &mut rng);

            let wrt_input = projected(
                |x: &Tensor<f64>| conv2d(x, &w, &b, &spec),
                |x: &Tensor<f64>, g: &Tensor<f64>| Ok(conv2d_backward(g, x, &w, &spec)?.input),
                r.clone(),
            );
            assert!(grad_check(&wrt_input, &x, 1e-5).unwrap() < 1e-4);

            let wrt_weights = projected(
                |w: &Tensor<f64>| conv2d(&x, w, &b, &spec),
                |w: &Tensor<f64>, g: &Tensor<f64>| Ok(conv2d_backward(g, &x, w, &spec)?.weights),
                r.clone(),
            );
            assert!(grad_check(&wrt_weights, &w, 1e-5).unwrap() < 1e-4);

            let wrt_bias = projected(
                |b: &Tensor<f64>| conv2d(&x, &w, b, &spec),
                |_: &Tensor<f64>, g: &Tensor<f64>| Ok(conv2d_backward(g, &x, &w, &spec)?.bias),
                r,
            );
            assert!(grad_check(&wrt_bias, &b, 1e-5).unwrap() < 1e-4);
        }
    }

    #[test]
    fn deconv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for stride in [1, 2] {
            let spec = ConvSpec::new(3, stride, Padding::Same, 3, 2);
            let x = random(&[2, 3, 3, 3], &mut rng);
            let w = random(&spec.deconv_weight_shape(), &mut rng);
            let b = random(&[2], &mut rng);
            let r = random(&[2, 3 * stride, 3 * stride, 2], &mut rng);
            let wrt_input = projected(
                |x: &Tensor<f64>| deconv2d(x, &w, &b, &spec),
                |x: &Tensor<f64>, g: &Tensor<f64>| Ok(deconv2d_backward(g, x, &w, &spec)?.input),
                r.clone(),
            );
            assert!(grad_check(&wrt_input, &x, 1e-5).unwrap() < 1e-4);
            let wrt_weights = projected(
                |w: &Tensor<f64>| deconv2d(&x, w, &b, &spec),
                |w: &Tensor<f64>, g: &Tensor<f64>| Ok(deconv2d_backward(g, &x, w, &spec)?.weights),
                r.clone(),
            );
            assert!(grad_check(&wrt_weights, &w, 1e-5).unwrap() < 1e-4);
            let wrt_bias = projected(
                |b: &Tensor<f64>| deconv2d(&x, &w, b, &spec),
                |_: &Tensor<f64>, g: &Tensor<f64>| Ok(deconv2d_backward(g, &x, &w, &spec)?.bias),
                r,
            );
            assert!(grad_check(&wrt_bias, &b, 1e-5).unwrap() < 1e-4);
        }
    }

    #[test]
    fn batched_conv_matches_per_sample_runs() {
        let spec = ConvSpec::new(9, 2, Padding::Same, 64, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[5, 14, 14, 64], &mut rng);
        let w = random(&spec.conv_weight_shape(), &mut rng);
        let b = random(&[8], &mut rng);
        let whole = conv2d(&x, &w, &b, &spec).unwrap();
        let per = 14 * 14 * 64;
        for s in 0..5 {
            let xs = Tensor::new([1, 14, 14, 64], x.data()[s * per..(s + 1) * per].to_vec()).unwrap();
            let ys = conv2d(&xs, &w, &b, &spec).unwrap();
            let n = ys.len();
            for (a, b) in whole.data()[s * n..(s + 1) * n].iter().zip(ys.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
