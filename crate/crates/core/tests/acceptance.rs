//! Acceptance run: one PASS/FAIL line per criterion. Exits non-zero when any
//! criterion fails.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use textcaps::capsnet::{
    lengths, lengths_backward, route_backward, route_traced, squash, squash_backward, Classifier, ClassifierConfig,
    MarginLoss,
};
use textcaps::data::idx::write_idx;
use textcaps::data::{load_dataset, take_per_class, DatasetKind, LabeledImageSet, Split};
use textcaps::datagen::{class_variance, noise_caps, perturb, pick_param, NoiseCaps};
use textcaps::decoder::{combine_two, psnr, psnr_from_mse, ssim, Decoder, DecoderConfig, ReconLossKind, SsimParams};
use textcaps::model::{ModelConfig, TextCaps};
use textcaps::pipeline::{continue_pipeline, init_model};
use textcaps::tensor::{
    conv2d, conv2d_backward, deconv2d, deconv2d_backward, dense, dense_backward, grad_check, objective, projected,
    relu, relu_backward, sigmoid, sigmoid_backward, uniform, ConvSpec, Padding, Tensor,
};
use textcaps::train::{backprop_batch, dataset_loss, evaluate, train, Ensemble, RunConfig};

type Outcome = Result<String, String>;

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/mnist012");
const STEP: f64 = 1e-5;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T>(r: textcaps::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

// ---------------------------------------------------------------- criterion 1

struct GradReport {
    worst: f64,
    worst_name: String,
}

impl GradReport {
    fn record(&mut self, name: &str, err: textcaps::Result<f64>) -> Result<(), String> {
        let err = err.map_err(|e| format!("{name}: {e}"))?;
        if err > self.worst || self.worst_name.is_empty() {
            self.worst = err;
            self.worst_name = name.to_string();
        }
        Ok(())
    }
}

fn conv_checks(report: &mut GradReport, rng: &mut ChaCha8Rng) -> Result<(), String> {
    for (stride, side) in [(1, 5), (2, 5), (2, 6)] {
        let spec = ConvSpec::new(3, stride, Padding::Same, 2, 3);
        let x = random(&[2, side, side, 2], -1.0, 1.0, rng);
        let w = random(&spec.conv_weight_shape(), -1.0, 1.0, rng);
        let b = random(&[3], -1.0, 1.0, rng);
        let out_shape = ok(conv2d(&x, &w, &b, &spec))?.shape().to_vec();
        let r = random(&out_shape, -1.0, 1.0, rng);
        let tag = format!("conv2d s{stride} n{side}");
        let (w1, b1) = (w.clone(), b.clone());
        let op = projected(
            |x| conv2d(x, &w1, &b1, &spec),
            |x, r| Ok(conv2d_backward(r, x, &w1, &spec)?.input),
            r.clone(),
        );
        report.record(&format!("{tag} input"), grad_check(&op, &x, STEP))?;
        let op = projected(
            |w| conv2d(&x, w, &b, &spec),
            |w, r| Ok(conv2d_backward(r, &x, w, &spec)?.weights),
            r.clone(),
        );
        report.record(&format!("{tag} weights"), grad_check(&op, &w, STEP))?;
        let op = projected(
            |b| conv2d(&x, &w, b, &spec),
            |_, r| Ok(conv2d_backward(r, &x, &w, &spec)?.bias),
            r,
        );
        report.record(&format!("{tag} bias"), grad_check(&op, &b, STEP))?;
    }
    Ok(())
}

fn deconv_checks(report: &mut GradReport, rng: &mut ChaCha8Rng) -> Result<(), String> {
    for stride in [1, 2] {
        let spec = ConvSpec::new(3, stride, Padding::Same, 3, 2);
        let x = random(&[2, 3, 3, 3], -1.0, 1.0, rng);
        let w = random(&spec.deconv_weight_shape(), -1.0, 1.0, rng);
        let b = random(&[2], -1.0, 1.0, rng);
        let out_shape = ok(deconv2d(&x, &w, &b, &spec))?.shape().to_vec();
        let r = random(&out_shape, -1.0, 1.0, rng);
        let tag = format!("deconv2d s{stride}");
        let (w1, b1) = (w.clone(), b.clone());
        let op = projected(
            |x| deconv2d(x, &w1, &b1, &spec),
            |x, r| Ok(deconv2d_backward(r, x, &w1, &spec)?.input),
            r.clone(),
        );
        report.record(&format!("{tag} input"), grad_check(&op, &x, STEP))?;
        let op = projected(
            |w| deconv2d(&x, w, &b, &spec),
            |w, r| Ok(deconv2d_backward(r, &x, w, &spec)?.weights),
            r.clone(),
        );
        report.record(&format!("{tag} weights"), grad_check(&op, &w, STEP))?;
        let op = projected(
            |b| deconv2d(&x, &w, b, &spec),
            |_, r| Ok(deconv2d_backward(r, &x, &w, &spec)?.bias),
            r,
        );
        report.record(&format!("{tag} bias"), grad_check(&op, &b, STEP))?;
    }
    Ok(())
}

fn dense_checks(report: &mut GradReport, rng: &mut ChaCha8Rng) -> Result<(), String> {
    let x = random(&[3, 5], -1.0, 1.0, rng);
    let w = random(&[5, 4], -1.0, 1.0, rng);
    let b = random(&[4], -1.0, 1.0, rng);
    let r = random(&[3, 4], -1.0, 1.0, rng);
    let (w1, b1) = (w.clone(), b.clone());
    let op = projected(|x| dense(x, &w1, &b1), |x, r| Ok(dense_backward(r, x, &w1)?.input), r.clone());
    report.record("dense input", grad_check(&op, &x, STEP))?;
    let op = projected(|w| dense(&x, w, &b), |w, r| Ok(dense_backward(r, &x, w)?.weights), r.clone());
    report.record("dense weights", grad_check(&op, &w, STEP))?;
    let op = projected(|b| dense(&x, &w, b), |_, r| Ok(dense_backward(r, &x, &w)?.bias), r);
    report.record("dense bias", grad_check(&op, &b, STEP))
}

fn activation_checks(report: &mut GradReport, rng: &mut ChaCha8Rng) -> Result<(), String> {
    // ReLU is checked away from its kink.
    let x = Tensor::from_fn([4, 6], |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    });
    let r = random(&[4, 6], -1.0, 1.0, rng);
    let op = projected(|x| Ok(relu(x)), |x, r| relu_backward(r, x), r.clone());
    report.record("relu", grad_check(&op, &x, STEP))?;
    let x = random(&[4, 6], -4.0, 4.0, rng);
    let op = projected(|x| Ok(sigmoid(x)), |x, r| sigmoid_backward(r, &sigmoid(x)), r);
    report.record("sigmoid", grad_check(&op, &x, STEP))
}

fn capsule_checks(report: &mut GradReport, rng: &mut ChaCha8Rng) -> Result<(), String> {
    for scale in [0.1, 1.0, 3.0] {
        let s = random(&[8], -scale, scale, rng);
        let r = random(&[8], -1.0, 1.0, rng);
        let op = projected(
            |s| Tensor::new([8], squash(s.data())),
            |s, r| Tensor::new([8], squash_backward(s.data(), r.data())),
            r,
        );
        report.record(&format!("squash scale {scale}"), grad_check(&op, &s, STEP))?;
    }

    for (n, m, d) in [(6, 3, 4), (10, 4, 5)] {
        let u = random(&[n, m, d], -1.0, 1.0, rng);
        let r = random(&[m, d], -1.0, 1.0, rng);
        let op = projected(
            |u| Ok(route_traced(u, 3)?.output().clone()),
            |u, r| route_backward(u, &route_traced(u, 3)?, r),
            r,
        );
        report.record(&format!("routing 3 iterations {n}x{m}x{d}"), grad_check(&op, &u, STEP))?;
    }

    let margin = MarginLoss::default();
    let labels = [0, 2, 1, 2];
    let caps = random(&[4, 3, 6], -0.5, 0.5, rng);
    let op = objective(
        |c| margin.loss(&lengths(c)?, &labels),
        |c| lengths_backward(c, &margin.gradient(&lengths(c)?, &labels)?),
    );
    report.record("margin loss", grad_check(&op, &caps, STEP))
}

fn reconstruction_checks(report: &mut GradReport, rng: &mut ChaCha8Rng) -> Result<(), String> {
    for kind in [ReconLossKind::Mse, ReconLossKind::L1, ReconLossKind::Bce, ReconLossKind::Dssim] {
        let y = random(&[2, 8, 8, 1], 0.0, 1.0, rng);
        // L1 is checked away from its kink at x = y.
        let x = Tensor::from_fn([2, 8, 8, 1], |i| {
            let off = rng.random_range(0.05..0.4) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            (y.data()[i] + off).clamp(0.02, 0.98)
        });
        let op = objective(|x| kind.value(x, &y), |x| kind.gradient(x, &y));
        report.record(&format!("{} loss", kind.as_str()), grad_check(&op, &x, STEP))?;
    }
    Ok(())
}

fn flatten(model: &TextCaps<f64>) -> Tensor<f64> {
    let data: Vec<f64> = model.to_tensors("").values().flat_map(|t| t.data().to_vec()).collect();
    Tensor::new([data.len()], data).unwrap()
}

fn unflatten(model: &TextCaps<f64>, flat: &Tensor<f64>) -> textcaps::Result<TextCaps<f64>> {
    let mut tensors = model.to_tensors("");
    let mut off = 0;
    for t in tensors.values_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat.data()[off..off + n]);
        off += n;
    }
    TextCaps::from_tensors(model.config().clone(), &tensors, "")
}

/// Accumulated gradients in the same name order as [`flatten`].
fn gradients(model: &TextCaps<f64>) -> Tensor<f64> {
    let mut named: Vec<(String, Tensor<f64>)> = Vec::new();
    for (n, p) in model.classifier.params().iter() {
        named.push((format!("classifier.{n}"), p.grad.clone()));
    }
    for (i, d) in model.decoders.iter().enumerate() {
        for (n, p) in d.params().iter() {
            named.push((format!("decoder{i}.{n}"), p.grad.clone()));
        }
    }
    named.sort_by(|a, b| a.0.cmp(&b.0));
    let data: Vec<f64> = named.into_iter().flat_map(|(_, g)| g.into_data()).collect();
    Tensor::new([data.len()], data).unwrap()
}

fn tiny_model_config(classes: usize, side: usize, losses: &str) -> ModelConfig {
    let base = side / 4;
    let map: BTreeMap<String, String> = [
        ("classes", classes.to_string()),
        ("input_side", side.to_string()),
        ("conv_channels", "3,4,4".into()),
        ("primary_channels", "2".into()),
        ("primary_dim", "4".into()),
        ("primary_kernel", "3".into()),
        ("class_dim", "6".into()),
        ("decoder_base", format!("{base},{base},4")),
        ("decoder_channels", "4,3,2,1".into()),
        ("decoder_strides", "1,2,2,1".into()),
        ("losses", losses.into()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    ModelConfig::from_map(&map).unwrap()
}

fn total_loss_checks(report: &mut GradReport, rng: &mut ChaCha8Rng) -> Result<(), String> {
    for losses in ["mse,bce", "dssim", "l1"] {
        let cfg = tiny_model_config(2, 8, losses);
        let mut model = ok(TextCaps::<f64>::new(cfg, rng))?;
        // Larger weights and nonzero biases keep ReLU inputs away from the
        // kink; the check runs along random directions in parameter space.
        let w = uniform(&model.config().classifier.transform_shape(), 1.0, rng);
        ok(model.classifier.params_mut().set_value("capsules.weight", w))?;
        for name in ["conv1.weight", "conv2.weight", "conv3.weight", "primary.weight"] {
            let v = model.classifier.params().value(name).map(|x| x * 2.5);
            ok(model.classifier.params_mut().set_value(name, v))?;
        }
        let mut tensors = model.to_tensors("");
        for (name, t) in tensors.iter_mut() {
            if name.ends_with(".bias") {
                *t = Tensor::from_fn(t.shape(), |_| rng.random_range(-0.2..0.2));
            } else if name.starts_with("decoder") {
                *t = t.map(|x| x * 2.0);
            }
        }
        let model = ok(TextCaps::from_tensors(model.config().clone(), &tensors, ""))?;
        let images = random(&[2, 8, 8, 1], 0.05, 0.95, rng);
        let labels = [1, 0];
        let set = ok(LabeledImageSet::from_tensor(&images, labels.to_vec(), 2))?;
        let theta = flatten(&model);
        let mut m = model.clone();
        ok(backprop_batch(&mut m, &images, &labels, 0.7))?;
        let grad = gradients(&m);
        for dir in 0..8 {
            let u = Tensor::from_fn(theta.shape(), |_| rng.random_range(-1.0..1.0));
            let along = |t: f64| theta.zip_map(&u, "direction", |a, b| a + t * b);
            let op = objective(
                |t| dataset_loss(&unflatten(&model, &along(t.data()[0])?)?, &set, 0.7, 2),
                |_| Tensor::scalar(grad.dot(&u)?).reshape([1]),
            );
            let err = grad_check(&op, &Tensor::zeros([1]), STEP);
            report.record(&format!("total loss ({losses}) direction {dir}"), err)?;
        }
    }
    Ok(())
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut report = GradReport {
        worst: 0.0,
        worst_name: String::new(),
    };
    conv_checks(&mut report, &mut rng)?;
    deconv_checks(&mut report, &mut rng)?;
    dense_checks(&mut report, &mut rng)?;
    activation_checks(&mut report, &mut rng)?;
    capsule_checks(&mut report, &mut rng)?;
    reconstruction_checks(&mut report, &mut rng)?;
    total_loss_checks(&mut report, &mut rng)?;
    let elapsed = start.elapsed();
    let detail = format!(
        "max relative error {:.2e} ({}), {:.1}s",
        report.worst,
        report.worst_name,
        elapsed.as_secs_f64()
    );
    ensure(report.worst < 1e-4 && elapsed < Duration::from_secs(120), || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 2

/// Routing by agreement written out with nested vectors, in the same
/// floating-point operation order as the library.
fn oracle_route(u: &[Vec<Vec<f64>>], iterations: usize) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
    let (n, m, d) = (u.len(), u[0].len(), u[0][0].len());
    let mut b = vec![vec![0.0; m]; n];
    let mut couplings = Vec::new();
    let mut v = vec![vec![0.0; d]; m];
    for it in 0..iterations {
        let mut c = vec![vec![0.0; m]; n];
        for i in 0..n {
            let mx = b[i].iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x));
            let e: Vec<f64> = b[i].iter().map(|x| (x - mx).exp()).collect();
            let z = e.iter().fold(0.0, |a, x| a + x);
            for j in 0..m {
                c[i][j] = e[j] / z;
            }
        }
        for j in 0..m {
            let mut s = vec![0.0; d];
            for i in 0..n {
                for k in 0..d {
                    s[k] += c[i][j] * u[i][j][k];
                }
            }
            let sq = s.iter().fold(0.0, |a, x| a + x * x);
            v[j] = if sq == 0.0 {
                vec![0.0; d]
            } else {
                let scale = sq / (1.0 + sq) / sq.sqrt();
                s.iter().map(|x| x * scale).collect()
            };
        }
        if it + 1 < iterations {
            for i in 0..n {
                for j in 0..m {
                    b[i][j] += (0..d).fold(0.0, |a, k| a + u[i][j][k] * v[j][k]);
                }
            }
        }
        couplings.push(c);
    }
    (couplings, v)
}

fn routing_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_sum = 0.0f64;
    let mut longest = 0.0f64;
    for case in 0..1000 {
        let (n, m, d) = (rng.random_range(1..16), rng.random_range(2..8), rng.random_range(2..10));
        let iterations = rng.random_range(1..5);
        let scale = rng.random_range(0.01..3.0);
        let votes = random(&[n, m, d], -scale, scale, &mut rng);
        let trace = ok(route_traced(&votes, iterations))?;
        let again = ok(route_traced(&votes, iterations))?;
        for (c, o) in trace.couplings.iter().zip(&trace.outputs) {
            for row in c.data().chunks_exact(m) {
                worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
            }
            for vj in o.data().chunks_exact(d) {
                longest = longest.max(vj.iter().map(|x| x * x).sum::<f64>().sqrt());
            }
        }
        let bits = |ts: &[Tensor<f64>]| ts.iter().flat_map(|t| t.data().iter().map(|x| x.to_bits())).collect::<Vec<_>>();
        ensure(
            bits(&trace.couplings) == bits(&again.couplings) && bits(&trace.outputs) == bits(&again.outputs),
            || format!("case {case}: repeated runs differ"),
        )?;

        let nested: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|i| (0..m).map(|j| votes.data()[(i * m + j) * d..(i * m + j + 1) * d].to_vec()).collect())
            .collect();
        let (oc, ov) = oracle_route(&nested, iterations);
        let oc_flat: Vec<u64> = oc.iter().flatten().flatten().map(|x| x.to_bits()).collect();
        let ov_flat: Vec<u64> = ov.iter().flatten().map(|x| x.to_bits()).collect();
        ensure(oc_flat == bits(&trace.couplings), || format!("case {case}: couplings differ from oracle"))?;
        ensure(ov_flat == bits(&trace.outputs[iterations - 1..]), || {
            format!("case {case}: outputs differ from oracle")
        })?;
    }
    let detail = format!("1000 cases, max |sum c - 1| {worst_sum:.1e}, max |v| {longest:.6}, oracle bitwise equal");
    ensure(worst_sum <= 1e-12 && longest < 1.0, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 3

fn shape_contract() -> Outcome {
    let classes = 3;
    let cc = ClassifierConfig::new(classes);
    ensure(cc.primary_grid() == 7 && cc.primary_channels == 32 && cc.primary_count() == 1568, || {
        format!("primary grid {} x {} channels", cc.primary_grid(), cc.primary_channels)
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let classifier = ok(Classifier::<f32>::new(cc, &mut rng))?;
    let image = Tensor::from_fn([1, 28, 28, 1], |_| rng.random_range(0.0f32..1.0));
    let trace = ok(classifier.forward_trace(&image))?;
    ensure(trace.primary.shape() == [1, 1568, 8], || format!("primary capsules {:?}", trace.primary.shape()))?;
    ensure(trace.output.shape() == [1, classes, 16], || format!("class capsules {:?}", trace.output.shape()))?;

    let dc = DecoderConfig::new(classes, ReconLossKind::Bce);
    ensure(dc.fc_units() == 6272 && dc.output_side() == (28, 28), || {
        format!("decoder fc {} output {:?}", dc.fc_units(), dc.output_side())
    })?;
    let decoder = ok(Decoder::<f32>::new(dc, &mut rng))?;
    let fc = decoder.params().value("fc.weight").shape().to_vec();
    ensure(fc == [classes * 16, 6272], || format!("fc weight {fc:?}"))?;
    let masked = ok(textcaps::decoder::mask_true_class(&trace.output, &[1]))?;
    let recon = ok(decoder.decode(&masked))?;
    ensure(recon.shape() == [1, 28, 28, 1], || format!("reconstruction {:?}", recon.shape()))?;
    Ok("1568 primary capsules (7x7x32), class capsules 3x16, fc 6272 units, output 28x28x1".into())
}

// ---------------------------------------------------------------- criterion 4

fn oracle_variance(x: &[Vec<f64>]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().fold(0.0, |a, r| a + r[0]) / n;
    x.iter().fold(0.0, |a, r| a + (r[0] - mean) * (r[0] - mean)) / n
}

fn algorithm_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (classes, per, d) = (2, 3, 16);
    for case in 0..200 {
        // Rows cycle through the classes; a few values are tied or zero.
        let labels: Vec<usize> = (0..classes * per).map(|j| j % classes).collect();
        let mut masked = Tensor::zeros([labels.len(), classes, d]);
        for (j, &m) in labels.iter().enumerate() {
            for k in 0..d {
                let v = match rng.random_range(0..10) {
                    0 => 0.0,
                    1 => 0.25,
                    _ => rng.random_range(-0.6..0.6),
                };
                masked.data_mut()[(j * classes + m) * d + k] = v;
            }
        }
        if case % 4 == 0 {
            // Duplicate a parameter column to force variance ties.
            for j in 0..labels.len() {
                let m = labels[j];
                let src = masked.data()[(j * classes + m) * d + 3];
                masked.data_mut()[(j * classes + m) * d + 7] = src;
            }
        }
        let value = |j: usize, k: usize| masked.data()[(j * classes + labels[j]) * d + k];
        let rows = |m: usize, k: usize| -> Vec<Vec<f64>> {
            (0..labels.len()).filter(|&j| labels[j] == m).map(|j| vec![value(j, k)]).collect()
        };

        let var = ok(class_variance(&masked, &labels))?;
        let caps = ok(noise_caps(&masked, &labels))?;
        for m in 0..classes {
            for k in 0..d {
                let r = rows(m, k);
                let expect = oracle_variance(&r);
                ensure(var.data()[m * d + k].to_bits() == expect.to_bits(), || {
                    format!("case {case}: variance ({m},{k})")
                })?;
                let hi = r.iter().map(|x| x[0]).fold(f64::NEG_INFINITY, f64::max);
                let lo = r.iter().map(|x| x[0]).fold(f64::INFINITY, f64::min);
                ensure(caps.tau_mk.data()[m * d + k].to_bits() == ((hi - lo) / 2.0).to_bits(), || {
                    format!("case {case}: tau ({m},{k})")
                })?;
            }
        }
        for k in 0..d {
            let mean = (0..classes).fold(0.0, |a, m| a + caps.tau_mk.data()[m * d + k]) / classes as f64;
            ensure(caps.tau_k.data()[k].to_bits() == mean.to_bits(), || format!("case {case}: tau_k {k}"))?;
        }

        for a in [0, 1, 5, 15] {
            let picked = ok(pick_param(&var, a))?;
            let mut brute = Vec::new();
            for m in 0..classes {
                let row = &var.data()[m * d..(m + 1) * d];
                // The parameter preceded by exactly `a` others in descending
                // order, ties broken toward the lower index.
                let k = (0..d)
                    .find(|&k| (0..d).filter(|&o| row[o] > row[k] || (row[o] == row[k] && o < k)).count() == a)
                    .unwrap();
                brute.push(k);
            }
            ensure(picked == brute, || format!("case {case}: pick_param a={a} {picked:?} vs {brute:?}"))?;

            let out = ok(perturb(&masked, &labels, a, &caps))?;
            let mut expect = masked.clone();
            for (j, &m) in labels.iter().enumerate() {
                let k = brute[m];
                let (tm, tk) = (caps.tau_mk.data()[m * d + k], caps.tau_k.data()[k]);
                let delta = if tm < tk { tm } else { tk };
                let idx = (j * classes + m) * d + k;
                let v = expect.data()[idx];
                expect.data_mut()[idx] = if v > 0.0 { v + delta } else { v - delta };
            }
            let bits = |t: &Tensor<f64>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            ensure(bits(&out) == bits(&expect), || format!("case {case}: perturb a={a}"))?;
        }
    }

    // Worked values: samples {0.2, 0.4, 0.6} give tau = (0.6 - 0.2) / 2, and
    // 0.3 moves to 0.3 + min(0.2, 0.15).
    let worked = Tensor::new([3, 1, 1], vec![0.2, 0.4, 0.6]).unwrap();
    let tau = ok(noise_caps(&worked, &[0, 0, 0]))?.tau_mk.data()[0];
    ensure(tau == (0.6 - 0.2) / 2.0, || format!("tau {tau}"))?;
    ensure((tau - 0.2).abs() <= f64::EPSILON * 0.2, || format!("tau {tau} not within 1 ulp of 0.2"))?;
    let caps = NoiseCaps {
        tau_mk: Tensor::new([1, 1], vec![0.2]).unwrap(),
        tau_k: Tensor::new([1], vec![0.15]).unwrap(),
    };
    let single = Tensor::new([2, 1, 1], vec![0.3, 0.3]).unwrap();
    let moved = ok(perturb(&single, &[0, 0], 0, &caps))?.data()[0];
    ensure(moved == 0.3 + 0.15, || format!("0.3 moved to {moved}"))?;
    ensure((moved - 0.45).abs() <= f64::EPSILON * 0.45, || format!("{moved} not within 1 ulp of 0.45"))?;
    Ok(format!(
        "200 random 2x3x16 cases bitwise equal; tau={tau:?}, 0.3->{moved:?} (exact binary results, 1 ulp from decimal)"
    ))
}

// ---------------------------------------------------------------- criterion 5

fn oracle_ssim_map(x: &[f64], y: &[f64], h: usize, w: usize) -> Vec<f64> {
    let p = SsimParams::default();
    let r = (p.window / 2) as isize;
    let g = |o: isize| (-((o * o) as f64) / (2.0 * p.sigma * p.sigma)).exp();
    let mut map = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let (mut wsum, mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for a in -r..=r {
                for b in -r..=r {
                    let (q, s) = (i + a, j + b);
                    if q < 0 || s < 0 || q >= h as isize || s >= w as isize {
                        continue;
                    }
                    let wt = g(a) * g(b);
                    let idx = q as usize * w + s as usize;
                    wsum += wt;
                    mx += wt * x[idx];
                    my += wt * y[idx];
                    xx += wt * x[idx] * x[idx];
                    yy += wt * y[idx] * y[idx];
                    xy += wt * x[idx] * y[idx];
                }
            }
            let (mx, my) = (mx / wsum, my / wsum);
            let (vx, vy, cxy) = (xx / wsum - mx * mx, yy / wsum - my * my, xy / wsum - mx * my);
            let (c1, c2) = (p.c1(), p.c2());
            map[i as usize * w + j as usize] =
                ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    map
}

fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut check = |name: &str, got: f64, want: f64| -> Result<(), String> {
        let err = (got - want).abs();
        worst = worst.max(err);
        ensure(err <= 1e-10, || format!("{name}: {got} vs {want}"))
    };
    for _ in 0..100 {
        let x = random(&[8, 8], 0.0, 1.0, &mut rng);
        let y = random(&[8, 8], 0.0, 1.0, &mut rng);
        let (xs, ys) = (x.data(), y.data());
        let n = xs.len() as f64;
        let mut sq = 0.0;
        let mut abs = 0.0;
        let mut ce = 0.0;
        for i in 0..xs.len() {
            sq += (xs[i] - ys[i]).powi(2);
            abs += (xs[i] - ys[i]).abs();
            let p = xs[i].clamp(1e-7, 1.0 - 1e-7);
            ce -= ys[i] * p.ln() + (1.0 - ys[i]) * (1.0 - p).ln();
        }
        check("mse", ok(ReconLossKind::Mse.value(&x, &y))?, sq / n)?;
        check("l1", ok(ReconLossKind::L1.value(&x, &y))?, abs / n)?;
        check("bce", ok(ReconLossKind::Bce.value(&x, &y))?, ce / n)?;
        check("psnr", ok(psnr(&x, &y))?, 10.0 * (1.0 / (sq / n)).log10())?;
        let map = oracle_ssim_map(xs, ys, 8, 8);
        let dssim = map.iter().map(|s| 1.0 - s).sum::<f64>() / n;
        check("dssim", ok(ReconLossKind::Dssim.value(&x, &y))?, dssim)?;

        let p = SsimParams::default();
        let self_sim = ok(ssim(&x, &x, &p))?.mean;
        ensure(self_sim == 1.0, || format!("ssim(x, x) = {self_sim}"))?;
        let (xy, yx) = (ok(ssim(&x, &y, &p))?.mean, ok(ssim(&y, &x, &p))?.mean);
        ensure(xy == yx, || format!("ssim asymmetric: {xy} vs {yx}"))?;
    }
    let p20 = psnr_from_mse(0.01);
    ensure(p20 == 20.0, || format!("psnr_from_mse(0.01) = {p20:?}"))?;
    Ok(format!("100 random 8x8 pairs, max deviation {worst:.1e}; psnr(0.01)=20 exactly; ssim(x,x)=1 and symmetric exactly"))
}

// ---------------------------------------------------------------- criterion 6

fn combiner_dominance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..1000 {
        let (h, w) = (rng.random_range(1..30), rng.random_range(1..30));
        let t = random(&[h, w], 0.0, 1.0, &mut rng);
        let a = random(&[h, w], 0.0, 1.0, &mut rng);
        let b = random(&[h, w], 0.0, 1.0, &mut rng);
        let c = ok(combine_two(&a, &b, &t))?;
        let (pc, pa, pb) = (ok(psnr(&c, &t))?, ok(psnr(&a, &t))?, ok(psnr(&b, &t))?);
        ensure(pc >= pa.max(pb), || format!("case {case}: {pc} < max({pa}, {pb})"))?;
    }
    Ok("1000 random triples, combined PSNR never below the better input".into())
}

// ---------------------------------------------------------- criteria 7 and 8

struct Desk {
    original: LabeledImageSet,
    test: LabeledImageSet,
    cfg: RunConfig,
    m1: Option<Ensemble<f32>>,
}

fn desk_setup() -> Result<Desk, String> {
    let dir = Path::new(FIXTURE);
    let train_full = ok(load_dataset(dir, DatasetKind::Mnist, Split::Train).and_then(|s| s.with_class_count(3)))?;
    let test = ok(load_dataset(dir, DatasetKind::Mnist, Split::Test).and_then(|s| s.with_class_count(3)))?;
    let (original, _) = ok(take_per_class(&train_full, 100))?;
    let mut cfg = RunConfig::default();
    for (k, v) in [("epochs", "20"), ("cycle_length", "10"), ("precision", "single"), ("seed", "0")] {
        ok(cfg.set(k, v))?;
    }
    Ok(Desk {
        original,
        test,
        cfg,
        m1: None,
    })
}

fn desk_training(desk: &mut Desk) -> Outcome {
    let start = Instant::now();
    let mut model = ok(init_model::<f32>(&desk.cfg, desk.original.class_count(), 0))?;
    let run = ok(train(&mut model, &desk.original, &desk.cfg.train))?;
    let eval = ok(evaluate(&run.ensemble, &desk.test, desk.cfg.train.batch_size))?;
    let elapsed = start.elapsed();
    desk.m1 = Some(run.ensemble);
    let detail = format!(
        "{} train / {} test, {} epochs: accuracy {:.2}%, PSNR {:.3} dB, {:.0}s",
        desk.original.len(),
        desk.test.len(),
        desk.cfg.train.epochs,
        100.0 * eval.accuracy,
        eval.mean_psnr,
        elapsed.as_secs_f64()
    );
    ensure(eval.accuracy >= 0.95 && elapsed <= Duration::from_secs(20 * 60), || detail.clone())?;
    Ok(detail)
}

fn pipeline_improvement(desk: &mut Desk) -> Outcome {
    let m1 = desk.m1.take().ok_or("no M1 from the desk-scale training run")?;
    let start = Instant::now();
    let run = ok(continue_pipeline(m1, &desk.original, &desk.test, &desk.cfg))?;
    let h = run.generated.class_histogram();
    ensure(h.iter().all(|&c| c == desk.cfg.per_class), || format!("generated per class {h:?}"))?;
    let detail = format!(
        "M1 {:.3} dB, M1 sharpened {:.3} dB, M2 {:.3} dB (gain {:+.3} dB), M2 accuracy {:.2}%, {} generated, {:.0}s",
        run.m1_eval.mean_psnr,
        run.m1_sharpened_eval.mean_psnr,
        run.m2_eval.mean_psnr,
        run.psnr_gain(),
        100.0 * run.m2_eval.accuracy,
        run.generated.len(),
        start.elapsed().as_secs_f64()
    );
    ensure(run.psnr_gain() >= 0.0, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 9

const TINY_28: &str = "\
conv_channels=4,4,4
primary_channels=2
primary_dim=4
primary_kernel=3
class_dim=6
decoder_base=7,7,4
decoder_channels=4,4,2,1
";

fn textcaps(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_textcaps"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "textcaps {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn files_in(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        out.insert(name, std::fs::read(&path).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tmp.path().join("run.cfg");
    let text = format!(
        "{TINY_28}epochs=4\ncycle_length=2\nlr_max=0.005\nlr_min=0.0005\nsamples_per_class=20\nper_class=5\n\
         retrain_epochs=1\nbatch_size=8\nseed=7\n"
    );
    std::fs::write(&config, text).map_err(|e| e.to_string())?;
    let outs: Vec<PathBuf> = (0..2).map(|i| tmp.path().join(format!("run{i}"))).collect();
    for out in &outs {
        textcaps(&[
            "pipeline",
            "--data",
            FIXTURE,
            "--dataset",
            "mnist",
            "--classes",
            "3",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])?;
    }
    let (a, b) = (files_in(&outs[0])?, files_in(&outs[1])?);
    ensure(a.keys().eq(b.keys()), || format!("file sets differ: {:?} vs {:?}", a.keys(), b.keys()))?;
    for (name, bytes) in &a {
        ensure(&b[name] == bytes, || format!("{name} differs between runs"))?;
    }
    for needed in ["m1.ckpt", "m2.ckpt", "generated-images-idx3-ubyte"] {
        ensure(a.contains_key(needed), || format!("{needed} missing"))?;
    }
    Ok(format!("two pipeline runs, {} output files byte-identical", a.len()))
}

// --------------------------------------------------------------- criterion 10

fn fake_split(kind: DatasetKind, dir: &Path, split: Split, rng: &mut ChaCha8Rng) -> Result<LabeledImageSet, String> {
    let classes = kind.class_count().unwrap();
    let offset = usize::from(kind == DatasetKind::EmnistLetters);
    let n = classes * 3;
    let pixels = (0..n * 784).map(|_| f64::from(rng.random::<u8>()) / 255.0).collect();
    let labels = (0..n).map(|i| i % classes + offset).collect();
    let set = ok(LabeledImageSet::new(pixels, labels, classes + offset, 28, 28))?;
    let (images, labels) = kind.files(dir, split);
    ok(write_idx(&set, images, labels))?;
    Ok(set)
}

fn full_dataset_naming() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let config = tmp.path().join("tiny.cfg");
    std::fs::write(&config, format!("{TINY_28}cycle_length=1\nbatch_size=16\n")).map_err(|e| e.to_string())?;
    let mut accepted = Vec::new();
    for kind in [
        DatasetKind::Mnist,
        DatasetKind::EmnistLetters,
        DatasetKind::EmnistBalanced,
        DatasetKind::EmnistDigits,
    ] {
        let dir = tmp.path().join(kind.as_str());
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let raw = fake_split(kind, &dir, Split::Train, &mut rng)?;
        fake_split(kind, &dir, Split::Test, &mut rng)?;

        let loaded = ok(load_dataset(&dir, kind, Split::Train))?;
        ensure(loaded.class_count() == kind.class_count().unwrap(), || {
            format!("{}: {} classes", kind.as_str(), loaded.class_count())
        })?;
        let shift = usize::from(kind == DatasetKind::EmnistLetters);
        ensure(loaded.labels().iter().zip(raw.labels()).all(|(&l, &r)| l + shift == r), || {
            format!("{}: labels not mapped", kind.as_str())
        })?;
        let (a, b) = (raw.image(0), loaded.image(0));
        let transposed = (0..28).all(|r| (0..28).all(|c| b[r * 28 + c] == a[c * 28 + r]));
        ensure(transposed == kind.is_emnist() || a == b, || format!("{}: orientation", kind.as_str()))?;

        let ckpt = dir.join("model.ckpt");
        let data = dir.to_str().unwrap();
        textcaps(&[
            "train",
            "--data",
            data,
            "--dataset",
            kind.as_str(),
            "--samples-per-class",
            "2",
            "--epochs",
            "1",
            "--config",
            config.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
        ])?;
        textcaps(&["eval", "--model", ckpt.to_str().unwrap(), "--data", data, "--dataset", kind.as_str()])?;
        accepted.push(kind.as_str());
    }
    Ok(format!("train and eval accepted {}", accepted.join(", ")))
}

// ------------------------------------------------------------------- driver

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS {name}: {detail} [{secs:.1}s]");
            true
        }
        Err(detail) => {
            println!("FAIL {name}: {detail} [{secs:.1}s]");
            false
        }
    }
}

/// Criterion 8 is directional: its result is reported but does not set the
/// exit status.
const SOFT: &str = "8 pipeline improvement";

fn main() {
    let mut passed = vec![
        run("1 gradient integrity", gradient_integrity),
        run("2 routing invariants", routing_invariants),
        run("3 shape contract", shape_contract),
        run("4 perturbation oracle", algorithm_oracle),
        run("5 loss oracles", loss_oracles),
        run("6 combiner dominance", combiner_dominance),
    ];
    let soft_passed = match desk_setup() {
        Ok(mut desk) => {
            passed.push(run("7 desk-scale accuracy", || desk_training(&mut desk)));
            run(SOFT, || pipeline_improvement(&mut desk))
        }
        Err(e) => {
            println!("FAIL 7 desk-scale accuracy: {e}");
            println!("FAIL {SOFT}: {e}");
            passed.push(false);
            false
        }
    };
    passed.push(run("9 determinism", determinism));
    passed.push(run("10 full-dataset naming", full_dataset_naming));
    let failed = passed.iter().filter(|p| !**p).count();
    let total = passed.len() + 1;
    let passing = passed.len() - failed + usize::from(soft_passed);
    println!("{passing} of {total} criteria passed");
    if !soft_passed {
        println!("soft criterion `{SOFT}` failed; it does not affect the exit status");
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
