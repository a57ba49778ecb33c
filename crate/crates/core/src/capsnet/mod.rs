//! The capsule classifier: a ReLU convolution stack, a primary capsule layer,
//! and class capsules connected by routing by agreement.

mod margin;
mod routing;
mod squash;

pub use margin::{argmax_rows, classify, lengths, lengths_backward, margin_loss, MarginLoss};
pub use routing::{route, route_backward, route_traced, votes, votes_backward, RoutingTrace};
pub use squash::{squash, squash_backward};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d, conv2d_backward, glorot_limit, relu, relu_backward, uniform, ConvSpec, Element, Padding, ParamStore,
    Tensor,
};

/// Layer sizes of the classifier. The default is the 28×28 configuration
/// with `classes` class capsules.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub input_side: usize,
    pub conv_channels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub conv_kernel: usize,
    pub primary_channels: usize,
    pub primary_dim: usize,
    pub primary_kernel: usize,
    pub primary_stride: usize,
    pub classes: usize,
    pub class_dim: usize,
    pub routing_iterations: usize,
}

impl ClassifierConfig {
    pub fn new(classes: usize) -> Self {
        Self {
            input_side: 28,
            conv_channels: vec![64, 128, 256],
            conv_strides: vec![1, 1, 2],
            conv_kernel: 3,
            primary_channels: 32,
            primary_dim: 8,
            primary_kernel: 9,
            primary_stride: 2,
            classes,
            class_dim: 16,
            routing_iterations: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.input_side,
            self.conv_kernel,
            self.primary_channels,
            self.primary_dim,
            self.primary_kernel,
            self.primary_stride,
            self.classes,
            self.class_dim,
        ];
        if positive.contains(&0) || self.conv_channels.contains(&0) || self.conv_strides.contains(&0) {
            return Err(Error::Config("classifier sizes must be positive".into()));
        }
        if self.conv_channels.len() != self.conv_strides.len() {
            return Err(Error::Config(format!(
                "{} conv channel counts but {} strides",
                self.conv_channels.len(),
                self.conv_strides.len()
            )));
        }
        if self.routing_iterations == 0 {
            return Err(Error::Config("routing_iterations must be at least 1".into()));
        }
        Ok(())
    }

    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        let mut cin = 1;
        self.conv_channels
            .iter()
            .zip(&self.conv_strides)
            .map(|(&cout, &stride)| {
                let spec = ConvSpec::new(self.conv_kernel, stride, Padding::Same, cin, cout);
                cin = cout;
                spec
            })
            .collect()
    }

    pub fn primary_spec(&self) -> ConvSpec {
        let cin = self.conv_channels.last().copied().unwrap_or(1);
        ConvSpec::new(
            self.primary_kernel,
            self.primary_stride,
            Padding::Same,
            cin,
            self.primary_channels * self.primary_dim,
        )
    }

    /// Side of the primary capsule grid.
    pub fn primary_grid(&self) -> usize {
        let side = self.conv_strides.iter().fold(self.input_side, |n, &s| n.div_ceil(s));
        side.div_ceil(self.primary_stride)
    }

    /// Number of primary capsules `N`.
    pub fn primary_count(&self) -> usize {
        self.primary_grid().pow(2) * self.primary_channels
    }

    pub fn transform_shape(&self) -> [usize; 4] {
        [self.primary_count(), self.classes, self.class_dim, self.primary_dim]
    }
}

/// Activations kept by [`Classifier::forward_trace`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ClassifierTrace<T> {
    /// Inputs to each convolution, starting with the images.
    conv_inputs: Vec<Tensor<T>>,
    /// Pre-ReLU output of each convolution of the feature stack.
    conv_pre: Vec<Tensor<T>>,
    /// Primary capsules before squashing, `[J, N, d]`.
    primary_pre: Tensor<T>,
    /// Squashed primary capsules `[J, N, d]`.
    pub primary: Tensor<T>,
    /// Votes `[J, N, M, D]`.
    votes: Tensor<T>,
    routing: Vec<RoutingTrace<T>>,
    /// Class capsules `[J, M, D]`.
    pub output: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T = f64> {
    config: ClassifierConfig,
    params: ParamStore<T>,
}

fn conv_name(layer: usize, field: &str) -> String {
    format!("conv{}.{field}", layer + 1)
}

impl<T: Element> Classifier<T> {
    /// Randomly initialised classifier: Glorot-uniform convolutions, zero
    /// biases, transform matrices uniform in ±0.1.
    pub fn new<R: Rng + ?Sized>(config: ClassifierConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut layers: Vec<(String, ConvSpec)> = config
            .conv_specs()
            .into_iter()
            .enumerate()
            .map(|(i, s)| (conv_name(i, ""), s))
            .collect();
        layers.push(("primary.".into(), config.primary_spec()));
        for (prefix, spec) in layers {
            let fan_in = spec.kernel_h * spec.kernel_w * spec.in_channels;
            let fan_out = spec.kernel_h * spec.kernel_w * spec.out_channels;
            let limit = glorot_limit(fan_in, fan_out);
            params.insert(format!("{prefix}weight"), uniform(&spec.conv_weight_shape(), limit, rng));
            params.insert(format!("{prefix}bias"), Tensor::zeros([spec.out_channels]));
        }
        params.insert("capsules.weight", uniform(&config.transform_shape(), 0.1, rng));
        Ok(Self { config, params })
    }

    /// Wraps existing parameters, checking every expected tensor is present
    /// with the right shape.
    pub fn from_params(config: ClassifierConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, spec) in config.conv_specs().iter().enumerate() {
            expected.push((conv_name(i, "weight"), spec.conv_weight_shape().to_vec()));
            expected.push((conv_name(i, "bias"), vec![spec.out_channels]));
        }
        let p = config.primary_spec();
        expected.push(("primary.weight".into(), p.conv_weight_shape().to_vec()));
        expected.push(("primary.bias".into(), vec![p.out_channels]));
        expected.push(("capsules.weight".into(), config.transform_shape().to_vec()));
        for (name, shape) in &expected {
            params.get(name)?.value.expect_shape(shape, "Classifier::from_params")?;
        }
        if params.len() != expected.len() {
            return Err(Error::Config(format!(
                "classifier expects {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    /// Class capsule outputs `[J, M, D]` for images `[J, side, side, 1]`.
    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_trace(images)?.output)
    }

    pub fn forward_trace(&self, images: &Tensor<T>) -> Result<ClassifierTrace<T>> {
        let side = self.config.input_side;
        if images.rank() != 4 || images.shape()[1..] != [side, side, 1] {
            return Err(Error::shape(
                "classifier_forward",
                format!("expected [J, {side}, {side}, 1] images, got {:?}", images.shape()),
            ));
        }
        let batch = images.dim(0);
        let mut conv_inputs = vec![images.clone()];
        let mut conv_pre = Vec::new();
        for (i, spec) in self.config.conv_specs().iter().enumerate() {
            let x = conv_inputs.last().expect("non-empty");
            let pre = conv2d(
                x,
                self.params.value(&conv_name(i, "weight")),
                self.params.value(&conv_name(i, "bias")),
                spec,
            )?;
            conv_inputs.push(relu(&pre));
            conv_pre.push(pre);
        }
        let primary_out = conv2d(
            conv_inputs.last().expect("non-empty"),
            self.params.value("primary.weight"),
            self.params.value("primary.bias"),
            &self.config.primary_spec(),
        )?;
        let (n, d) = (self.config.primary_count(), self.config.primary_dim);
        let primary_pre = primary_out.reshape([batch, n, d])?;
        let mut primary = Tensor::zeros([batch, n, d]);
        for (s, v) in primary_pre
            .data()
            .chunks_exact(d)
            .zip(primary.data_mut().chunks_exact_mut(d))
        {
            squash::squash_into(s, v);
        }

        let all_votes = votes(&primary, self.params.value("capsules.weight"))?;
        let (m, dc) = (self.config.classes, self.config.class_dim);
        let per_sample = n * m * dc;
        let mut output = Tensor::zeros([batch, m, dc]);
        let mut routing = Vec::with_capacity(batch);
        for j in 0..batch {
            let v = Tensor::new([n, m, dc], all_votes.data()[j * per_sample..(j + 1) * per_sample].to_vec())?;
            let trace = route_traced(&v, self.config.routing_iterations)?;
            output.data_mut()[j * m * dc..(j + 1) * m * dc].copy_from_slice(trace.output().data());
            routing.push(trace);
        }
        Ok(ClassifierTrace {
            conv_inputs,
            conv_pre,
            primary_pre,
            primary,
            votes: all_votes,
            routing,
            output,
        })
    }

    /// Accumulates parameter gradients given `∂L/∂output` for a traced
    /// forward pass.
    pub fn backward(&mut self, trace: &ClassifierTrace<T>, grad_output: &Tensor<T>) -> Result<()> {
        grad_output.expect_same_shape(&trace.output, "classifier_backward")?;
        let batch = trace.output.dim(0);
        let (n, d) = (self.config.primary_count(), self.config.primary_dim);
        let (m, dc) = (self.config.classes, self.config.class_dim);
        let per_sample = n * m * dc;

        let mut grad_votes = Tensor::zeros(trace.votes.shape());
        for j in 0..batch {
            let v = Tensor::new([n, m, dc], trace.votes.data()[j * per_sample..(j + 1) * per_sample].to_vec())?;
            let g = Tensor::new([m, dc], grad_output.data()[j * m * dc..(j + 1) * m * dc].to_vec())?;
            let gv = route_backward(&v, &trace.routing[j], &g)?;
            grad_votes.data_mut()[j * per_sample..(j + 1) * per_sample].copy_from_slice(gv.data());
        }
        let (grad_u, grad_w) = votes_backward(&grad_votes, &trace.primary, self.params.value("capsules.weight"))?;
        self.params.accumulate("capsules.weight", &grad_w)?;

        let mut grad = Tensor::zeros(trace.primary_pre.shape());
        for ((s, g), out) in trace
            .primary_pre
            .data()
            .chunks_exact(d)
            .zip(grad_u.data().chunks_exact(d))
            .zip(grad.data_mut().chunks_exact_mut(d))
        {
            squash::squash_backward_into(s, g, out);
        }
        let last_input = trace.conv_inputs.last().expect("non-empty");
        let [_, h, w, _] = self.config.primary_spec().conv_output_shape(last_input.shape())?;
        let grad = grad.reshape([batch, h, w, self.config.primary_channels * d])?;
        let grads = conv2d_backward(&grad, last_input, self.params.value("primary.weight"), &self.config.primary_spec())?;
        self.params.accumulate("primary.weight", &grads.weights)?;
        self.params.accumulate("primary.bias", &grads.bias)?;

        let mut grad = grads.input;
        for (i, spec) in self.config.conv_specs().iter().enumerate().rev() {
            let g = relu_backward(&grad, &trace.conv_pre[i])?;
            let weight_name = conv_name(i, "weight");
            let grads = conv2d_backward(&g, &trace.conv_inputs[i], self.params.value(&weight_name), spec)?;
            self.params.accumulate(&weight_name, &grads.weights)?;
            self.params.accumulate(&conv_name(i, "bias"), &grads.bias)?;
            grad = grads.input;
        }
        Ok(())
    }
}
