//! A classifier together with its one or two decoders.

use std::collections::BTreeMap;

use rand::Rng;

use crate::capsnet::{classify, lengths, Classifier, ClassifierConfig};
use crate::data::LabeledImageSet;
use crate::decoder::{combine_two, mask_true_class, DeconvLayer, Decoder, DecoderConfig, ReconLossKind};
use crate::error::{Error, Result};
use crate::tensor::{Element, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub classifier: ClassifierConfig,
    pub decoders: Vec<DecoderConfig>,
}

pub(crate) fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub(crate) fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{s}`")))
        })
        .collect()
}

pub(crate) fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

impl ModelConfig {
    /// Every key of the flat form.
    pub const KEYS: &'static [&'static str] = &[
        "classes",
        "input_side",
        "conv_channels",
        "conv_strides",
        "conv_kernel",
        "primary_channels",
        "primary_dim",
        "primary_kernel",
        "primary_stride",
        "class_dim",
        "routing_iterations",
        "decoder_base",
        "decoder_channels",
        "decoder_strides",
        "decoder_kernel",
        "losses",
    ];

    /// The full-size architecture with one decoder per loss.
    pub fn new(classes: usize, losses: &[ReconLossKind]) -> Self {
        Self {
            classifier: ClassifierConfig::new(classes),
            decoders: losses.iter().map(|&l| DecoderConfig::new(classes, l)).collect(),
        }
    }

    pub fn classes(&self) -> usize {
        self.classifier.classes
    }

    pub fn losses(&self) -> Vec<ReconLossKind> {
        self.decoders.iter().map(|d| d.loss).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.classifier.validate()?;
        if self.decoders.is_empty() || self.decoders.len() > 2 {
            return Err(Error::Config(format!(
                "a model has one or two decoders, got {}",
                self.decoders.len()
            )));
        }
        let side = self.classifier.input_side;
        for d in &self.decoders {
            d.validate()?;
            if d.classes != self.classifier.classes || d.class_dim != self.classifier.class_dim {
                return Err(Error::Config("decoder input does not match the class capsules".into()));
            }
            if d.output_side() != (side, side) {
                return Err(Error::Config(format!(
                    "decoder produces {:?} images for {side}x{side} inputs",
                    d.output_side()
                )));
            }
        }
        Ok(())
    }

    /// Flat key=value form, as stored in checkpoints and config files.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let c = &self.classifier;
        let d = &self.decoders[0];
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("classes", c.classes.to_string());
        put("input_side", c.input_side.to_string());
        put("conv_channels", join(&c.conv_channels));
        put("conv_strides", join(&c.conv_strides));
        put("conv_kernel", c.conv_kernel.to_string());
        put("primary_channels", c.primary_channels.to_string());
        put("primary_dim", c.primary_dim.to_string());
        put("primary_kernel", c.primary_kernel.to_string());
        put("primary_stride", c.primary_stride.to_string());
        put("class_dim", c.class_dim.to_string());
        put("routing_iterations", c.routing_iterations.to_string());
        put("decoder_base", join(&d.base));
        put("decoder_channels", join(&d.layers.iter().map(|l| l.channels).collect::<Vec<_>>()));
        put("decoder_strides", join(&d.layers.iter().map(|l| l.stride).collect::<Vec<_>>()));
        put("decoder_kernel", d.layers[0].kernel.to_string());
        put("losses", join(&self.losses()));
        m
    }

    /// Reads the keys written by [`ModelConfig::to_map`]; missing keys take
    /// the full-size defaults.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| map.get(k).map(String::as_str);
        let classes: usize = parse_value("classes", get("classes").ok_or_else(|| Error::Config("missing `classes`".into()))?)?;
        let losses: Vec<ReconLossKind> = match get("losses") {
            Some(v) => parse_list("losses", v)?,
            None => vec![ReconLossKind::Mse],
        };
        let mut cfg = Self::new(classes, &losses);
        let c = &mut cfg.classifier;
        macro_rules! scalar {
            ($field:expr, $key:literal) => {
                if let Some(v) = get($key) {
                    $field = parse_value($key, v)?;
                }
            };
        }
        macro_rules! list {
            ($field:expr, $key:literal) => {
                if let Some(v) = get($key) {
                    $field = parse_list($key, v)?;
                }
            };
        }
        scalar!(c.input_side, "input_side");
        list!(c.conv_channels, "conv_channels");
        list!(c.conv_strides, "conv_strides");
        scalar!(c.conv_kernel, "conv_kernel");
        scalar!(c.primary_channels, "primary_channels");
        scalar!(c.primary_dim, "primary_dim");
        scalar!(c.primary_kernel, "primary_kernel");
        scalar!(c.primary_stride, "primary_stride");
        scalar!(c.class_dim, "class_dim");
        scalar!(c.routing_iterations, "routing_iterations");
        let class_dim = c.class_dim;
        let d0 = cfg.decoders[0].clone();
        let mut base: Vec<usize> = d0.base.to_vec();
        list!(base, "decoder_base");
        let mut channels: Vec<usize> = d0.layers.iter().map(|l| l.channels).collect();
        list!(channels, "decoder_channels");
        let mut strides: Vec<usize> = d0.layers.iter().map(|l| l.stride).collect();
        list!(strides, "decoder_strides");
        let mut kernel = d0.layers[0].kernel;
        scalar!(kernel, "decoder_kernel");
        let base: [usize; 3] = base
            .try_into()
            .map_err(|_| Error::Config("`decoder_base` needs three values".into()))?;
        if channels.len() != strides.len() {
            return Err(Error::Config("`decoder_channels` and `decoder_strides` differ in length".into()));
        }
        let layers: Vec<DeconvLayer> = channels
            .iter()
            .zip(&strides)
            .map(|(&channels, &stride)| DeconvLayer { channels, kernel, stride })
            .collect();
        for d in &mut cfg.decoders {
            d.class_dim = class_dim;
            d.base = base;
            d.layers = layers.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-sample outputs of a model on a labelled set.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Class capsules `[J, M, D]`.
    pub capsules: Tensor<f64>,
    /// Capsule lengths `[J, M]`.
    pub lengths: Tensor<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextCaps<T = f64> {
    config: ModelConfig,
    pub classifier: Classifier<T>,
    pub decoders: Vec<Decoder<T>>,
}

fn prefixed<T: Element>(out: &mut BTreeMap<String, Tensor<f64>>, prefix: &str, store: &ParamStore<T>) {
    for (name, p) in store.iter() {
        out.insert(format!("{prefix}{name}"), p.value.cast());
    }
}

fn extract<T: Element>(tensors: &BTreeMap<String, Tensor<f64>>, prefix: &str) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for (name, t) in tensors.range(prefix.to_string()..) {
        let Some(rest) = name.strip_prefix(prefix) else { break };
        store.insert(rest, t.cast());
    }
    store
}

impl<T: Element> TextCaps<T> {
    /// Classifier first, then decoders in order, all from the same stream.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let classifier = Classifier::new(config.classifier.clone(), rng)?;
        let decoders = config
            .decoders
            .iter()
            .map(|d| Decoder::new(d.clone(), rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            classifier,
            decoders,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// All parameters as double-precision tensors named `classifier.*` and
    /// `decoder<i>.*`.
    pub fn to_tensors(&self, prefix: &str) -> BTreeMap<String, Tensor<f64>> {
        let mut out = BTreeMap::new();
        prefixed(&mut out, &format!("{prefix}classifier."), self.classifier.params());
        for (i, d) in self.decoders.iter().enumerate() {
            prefixed(&mut out, &format!("{prefix}decoder{i}."), d.params());
        }
        out
    }

    pub fn from_tensors(config: ModelConfig, tensors: &BTreeMap<String, Tensor<f64>>, prefix: &str) -> Result<Self> {
        config.validate()?;
        let classifier = Classifier::from_params(config.classifier.clone(), extract(tensors, &format!("{prefix}classifier.")))?;
        let decoders = config
            .decoders
            .iter()
            .enumerate()
            .map(|(i, d)| Decoder::from_params(d.clone(), extract(tensors, &format!("{prefix}decoder{i}."))))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            classifier,
            decoders,
        })
    }

    /// Same parameters in another precision.
    pub fn cast<U: Element>(&self) -> Result<TextCaps<U>> {
        TextCaps::from_tensors(self.config.clone(), &self.to_tensors(""), "")
    }

    /// Class capsules and their lengths for every image of `set`.
    pub fn encode(&self, set: &LabeledImageSet, batch_size: usize) -> Result<Encoded> {
        let (m, d) = (self.config.classes(), self.config.classifier.class_dim);
        let mut caps = Vec::with_capacity(set.len() * m * d);
        let indices: Vec<usize> = (0..set.len()).collect();
        for chunk in indices.chunks(batch_size.max(1)) {
            let out = self.classifier.forward(&set.batch::<T>(chunk))?;
            caps.extend(out.data().iter().map(|v| v.as_f64()));
        }
        let capsules = Tensor::new([set.len(), m, d], caps)?;
        let lengths = lengths(&capsules)?;
        Ok(Encoded { capsules, lengths })
    }

    pub fn predict(&self, set: &LabeledImageSet, batch_size: usize) -> Result<Vec<usize>> {
        classify(&self.encode(set, batch_size)?.capsules)
    }

    /// Decodes masked capsules `[J, M, D]` with every decoder.
    pub fn decode_all(&self, masked: &Tensor<f64>, batch_size: usize) -> Result<Vec<Tensor<f64>>> {
        let j = masked.dim(0);
        let per = masked.len() / j.max(1);
        let mut outs = vec![Vec::new(); self.decoders.len()];
        let mut shape = Vec::new();
        for start in (0..j).step_by(batch_size.max(1)) {
            let n = batch_size.max(1).min(j - start);
            let mut s = masked.shape().to_vec();
            s[0] = n;
            let chunk: Tensor<T> = Tensor::new(s, masked.data()[start * per..(start + n) * per].to_vec())?.cast();
            for (out, dec) in outs.iter_mut().zip(&self.decoders) {
                let r = dec.decode(&chunk)?;
                shape = r.shape()[1..].to_vec();
                out.extend(r.data().iter().map(|v| v.as_f64()));
            }
        }
        outs.into_iter()
            .map(|data| {
                let mut s = vec![j];
                s.extend(&shape);
                Tensor::new(s, data)
            })
            .collect()
    }

    /// Reconstructions `[J, H, W, 1]` of `set` from its true-class capsules.
    /// With two decoders the per-pixel closer of the two reconstructions to
    /// the input is kept.
    pub fn reconstruct(&self, set: &LabeledImageSet, batch_size: usize) -> Result<Tensor<f64>> {
        let enc = self.encode(set, batch_size)?;
        let masked = mask_true_class(&enc.capsules, set.labels())?;
        let mut recons = self.decode_all(&masked, batch_size)?;
        if recons.len() == 2 {
            let target = set.batch::<f64>(&(0..set.len()).collect::<Vec<_>>());
            let b = recons.pop().expect("two decoders");
            let a = recons.pop().expect("two decoders");
            return combine_two(&a, &b, &target);
        }
        Ok(recons.pop().expect("at least one decoder"))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// An 8×8-input model small enough for unit tests.
    pub(crate) fn tiny_config(classes: usize, losses: &[ReconLossKind]) -> ModelConfig {
        let mut map = BTreeMap::new();
        for (k, v) in [
            ("classes", classes.to_string()),
            ("input_side", "8".into()),
            ("conv_channels", "3,4,4".into()),
            ("primary_channels", "2".into()),
            ("primary_dim", "4".into()),
            ("primary_kernel", "3".into()),
            ("class_dim", "6".into()),
            ("decoder_base", "2,2,4".into()),
            ("decoder_channels", "4,3,2,1".into()),
            ("decoder_strides", "1,2,2,1".into()),
            ("losses", join(losses)),
        ] {
            map.insert(k.to_string(), v);
        }
        ModelConfig::from_map(&map).unwrap()
    }

    #[test]
    fn config_map_round_trip() {
        let full = ModelConfig::new(47, &[ReconLossKind::Bce, ReconLossKind::Dssim]);
        assert_eq!(ModelConfig::from_map(&full.to_map()).unwrap(), full);
        let tiny = tiny_config(3, &[ReconLossKind::Mse]);
        assert_eq!(ModelConfig::from_map(&tiny.to_map()).unwrap(), tiny);
        assert_eq!(tiny.classifier.input_side, 8);
        let map = full.to_map();
        let keys: Vec<&str> = map.keys().map(String::as_str).collect();
        let mut expected = ModelConfig::KEYS.to_vec();
        expected.sort_unstable();
        assert_eq!(keys, expected);
    }

    #[test]
    fn mismatched_decoder_rejected() {
        let mut cfg = tiny_config(2, &[ReconLossKind::Mse]);
        cfg.decoders[0].base = [3, 3, 4];
        assert!(cfg.validate().is_err());
        let mut map = cfg.to_map();
        map.insert("losses".into(), "mse,l1,bce".into());
        assert!(ModelConfig::from_map(&map).is_err());
    }

    #[test]
    fn tensors_round_trip_and_cast() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let cfg = tiny_config(2, &[ReconLossKind::Mse, ReconLossKind::Bce]);
        let model = TextCaps::<f64>::new(cfg.clone(), &mut rng).unwrap();
        let tensors = model.to_tensors("snap0.");
        assert!(tensors.keys().any(|k| k == "snap0.decoder1.fc.weight"));
        let back = TextCaps::<f64>::from_tensors(cfg, &tensors, "snap0.").unwrap();
        assert_eq!(back, model);
        let single: TextCaps<f32> = model.cast().unwrap();
        assert_eq!(single.cast::<f64>().unwrap().classifier.params().len(), model.classifier.params().len());
    }

    #[test]
    fn reconstruct_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let model = TextCaps::<f64>::new(tiny_config(2, &[ReconLossKind::Mse, ReconLossKind::L1]), &mut rng).unwrap();
        let set = LabeledImageSet::new((0..5 * 64).map(|i| (i % 9) as f64 / 9.0).collect(), vec![0, 1, 1, 0, 1], 2, 8, 8).unwrap();
        let r = model.reconstruct(&set, 2).unwrap();
        assert_eq!(r.shape(), &[5, 8, 8, 1]);
        assert_eq!(model.predict(&set, 3).unwrap().len(), 5);
    }
}
