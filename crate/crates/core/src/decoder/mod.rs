//! Reconstruction of input images from class-masked capsule outputs.

pub mod loss;

pub use loss::{
    bce, combine_two, dssim, l1, mse, psnr, psnr_from_mse, ssim, ReconLossKind, Ssim, SsimParams,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    deconv2d, deconv2d_backward, dense, dense_backward, glorot_limit, relu, relu_backward, sigmoid,
    sigmoid_backward, uniform, ConvSpec, Element, Padding, ParamStore, Tensor,
};

/// Zeroes every class block of `caps: [J, M, D]` except the one at each
/// sample's label.
pub fn mask_true_class<T: Element>(caps: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    caps.expect_rank(3, "mask_true_class")?;
    let (j, m, d) = (caps.dim(0), caps.dim(1), caps.dim(2));
    if labels.len() != j {
        return Err(Error::shape(
            "mask_true_class",
            format!("{} labels for {j} samples", labels.len()),
        ));
    }
    let mut out = Tensor::zeros(caps.shape());
    for (s, &label) in labels.iter().enumerate() {
        if label >= m {
            return Err(Error::LabelOutOfRange { label, classes: m });
        }
        let r = (s * m + label) * d..(s * m + label + 1) * d;
        out.data_mut()[r.clone()].copy_from_slice(&caps.data()[r]);
    }
    Ok(out)
}

/// One transposed-convolution layer of the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeconvLayer {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub classes: usize,
    pub class_dim: usize,
    /// Height, width and channels the dense layer's output is reshaped to.
    pub base: [usize; 3],
    /// ReLU layers followed by a final sigmoid layer that must have one channel.
    pub layers: Vec<DeconvLayer>,
    pub loss: ReconLossKind,
}

impl DecoderConfig {
    /// Dense 6272 → 7×7×128 → deconv 128/s1, 64/s2, 32/s2, 1/s1 → 28×28×1.
    pub fn new(classes: usize, loss: ReconLossKind) -> Self {
        let layer = |channels, stride| DeconvLayer {
            channels,
            kernel: 3,
            stride,
        };
        Self {
            classes,
            class_dim: 16,
            base: [7, 7, 128],
            layers: vec![layer(128, 1), layer(64, 2), layer(32, 2), layer(1, 1)],
            loss,
        }
    }

    pub fn fc_units(&self) -> usize {
        self.base.iter().product()
    }

    pub fn input_units(&self) -> usize {
        self.classes * self.class_dim
    }

    pub fn output_side(&self) -> (usize, usize) {
        let scale: usize = self.layers.iter().map(|l| l.stride).product();
        (self.base[0] * scale, self.base[1] * scale)
    }

    pub fn layer_specs(&self) -> Vec<ConvSpec> {
        let mut cin = self.base[2];
        self.layers
            .iter()
            .map(|l| {
                let spec = ConvSpec::new(l.kernel, l.stride, Padding::Same, cin, l.channels);
                cin = l.channels;
                spec
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.class_dim == 0 || self.base.contains(&0) {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        match self.layers.last() {
            Some(last) if last.channels == 1 => {}
            _ => return Err(Error::Config("decoder must end in a single-channel layer".into())),
        }
        if self.layers.iter().any(|l| l.channels == 0 || l.kernel == 0 || l.stride == 0) {
            return Err(Error::Config("decoder layer sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Activations kept by [`Decoder::forward_trace`] for the backward pass.
#[derive(Debug, Clone)]
pub struct DecoderTrace<T> {
    input: Tensor<T>,
    fc_pre: Tensor<T>,
    /// Input to each deconvolution layer.
    layer_inputs: Vec<Tensor<T>>,
    layer_pre: Vec<Tensor<T>>,
    /// Reconstructions `[J, H, W, 1]`.
    pub output: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T = f64> {
    config: DecoderConfig,
    params: ParamStore<T>,
}

fn layer_name(i: usize, field: &str) -> String {
    format!("deconv{}.{field}", i + 1)
}

impl<T: Element> Decoder<T> {
    /// Glorot-uniform weights and zero biases.
    pub fn new<R: Rng + ?Sized>(config: DecoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let (din, dout) = (config.input_units(), config.fc_units());
        params.insert("fc.weight", uniform(&[din, dout], glorot_limit(din, dout), rng));
        params.insert("fc.bias", Tensor::zeros([dout]));
        for (i, spec) in config.layer_specs().iter().enumerate() {
            let area = spec.kernel_h * spec.kernel_w;
            let limit = glorot_limit(area * spec.in_channels, area * spec.out_channels);
            params.insert(layer_name(i, "weight"), uniform(&spec.deconv_weight_shape(), limit, rng));
            params.insert(layer_name(i, "bias"), Tensor::zeros([spec.out_channels]));
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: DecoderConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut expected = vec![
            ("fc.weight".to_string(), vec![config.input_units(), config.fc_units()]),
            ("fc.bias".to_string(), vec![config.fc_units()]),
        ];
        for (i, spec) in config.layer_specs().iter().enumerate() {
            expected.push((layer_name(i, "weight"), spec.deconv_weight_shape().to_vec()));
            expected.push((layer_name(i, "bias"), vec![spec.out_channels]));
        }
        for (name, shape) in &expected {
            params.get(name)?.value.expect_shape(shape, "Decoder::from_params")?;
        }
        if params.len() != expected.len() {
            return Err(Error::Config(format!(
                "decoder expects {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn loss(&self) -> ReconLossKind {
        self.config.loss
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Reconstructions `[J, H, W, 1]` from masked capsules `[J, M, D]`.
    pub fn decode(&self, masked: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_trace(masked)?.output)
    }

    pub fn forward_trace(&self, masked: &Tensor<T>) -> Result<DecoderTrace<T>> {
        let (m, d) = (self.config.classes, self.config.class_dim);
        if masked.rank() != 3 || masked.shape()[1..] != [m, d] {
            return Err(Error::shape(
                "decode",
                format!("expected [J, {m}, {d}] capsules, got {:?}", masked.shape()),
            ));
        }
        let batch = masked.dim(0);
        let input = masked.clone().reshape([batch, m * d])?;
        let fc_pre = dense(&input, self.params.value("fc.weight"), self.params.value("fc.bias"))?;
        let [h, w, c] = self.config.base;
        let mut x = relu(&fc_pre).reshape([batch, h, w, c])?;
        let specs = self.config.layer_specs();
        let mut layer_inputs = Vec::with_capacity(specs.len());
        let mut layer_pre = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let pre = deconv2d(
                &x,
                self.params.value(&layer_name(i, "weight")),
                self.params.value(&layer_name(i, "bias")),
                spec,
            )?;
            let out = if i + 1 == specs.len() { sigmoid(&pre) } else { relu(&pre) };
            layer_inputs.push(std::mem::replace(&mut x, out));
            layer_pre.push(pre);
        }
        Ok(DecoderTrace {
            input,
            fc_pre,
            layer_inputs,
            layer_pre,
            output: x,
        })
    }

    /// Accumulates parameter gradients and returns `∂L/∂masked`.
    pub fn backward(&mut self, trace: &DecoderTrace<T>, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
        grad_output.expect_same_shape(&trace.output, "decoder_backward")?;
        let specs = self.config.layer_specs();
        let mut grad = grad_output.clone();
        for (i, spec) in specs.iter().enumerate().rev() {
            let g = if i + 1 == specs.len() {
                sigmoid_backward(&grad, &trace.output)?
            } else {
                relu_backward(&grad, &trace.layer_pre[i])?
            };
            let weight = layer_name(i, "weight");
            let grads = deconv2d_backward(&g, &trace.layer_inputs[i], self.params.value(&weight), spec)?;
            self.params.accumulate(&weight, &grads.weights)?;
            self.params.accumulate(&layer_name(i, "bias"), &grads.bias)?;
            grad = grads.input;
        }
        let batch = trace.input.dim(0);
        let grad = grad.reshape([batch, self.config.fc_units()])?;
        let g = relu_backward(&grad, &trace.fc_pre)?;
        let grads = dense_backward(&g, &trace.input, self.params.value("fc.weight"))?;
        self.params.accumulate("fc.weight", &grads.weights)?;
        self.params.accumulate("fc.bias", &grads.bias)?;
        grads
            .input
            .reshape([batch, self.config.classes, self.config.class_dim])
    }
}
