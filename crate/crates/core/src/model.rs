//! Models with parameters held as raw 32-bit memory words.
//!
//! [`Model`] is the stored form: topology plus the exact word patterns the
//! weight memory holds. [`Network`] is the decoded, ready-to-run form; it is
//! produced once per model variant and shared read-only across threads.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{decode_word_f32, NumericFormat};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
    },
    FullyConnected {
        in_features: usize,
        out_features: usize,
    },
    Maxpool2d {
        pool: [usize; 2],
        stride: [usize; 2],
    },
    Relu,
    ClippedRelu {
        #[serde(with = "threshold_serde")]
        threshold: f32,
    },
    Flatten,
    /// Classifier head marker. Passes logits through unchanged: softmax is
    /// monotone, so the predicted class is the argmax of the raw logits.
    SoftmaxArgmax,
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::FullyConnected { .. })
    }

    pub fn is_activation(&self) -> bool {
        matches!(self, LayerKind::Relu | LayerKind::ClippedRelu { .. })
    }

    /// Expected `(weight, bias)` shapes for parameterised layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel[0], kernel[1]],
                vec![out_channels],
            )),
            LayerKind::FullyConnected {
                in_features,
                out_features,
            } => Some((vec![out_features, in_features], vec![out_features])),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

/// JSON has no infinity; `+∞` thresholds are written as the string `"inf"`.
mod threshold_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &f32, s: S) -> Result<S::Ok, S::Error> {
        if *t == f32::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f32(*t)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f32),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f32, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f32::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad threshold {s:?}"))),
        }
    }
}

/// A parameter tensor as stored words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordTensor {
    pub shape: Vec<usize>,
    pub words: Vec<u32>,
}

impl WordTensor {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn decode(&self, fmt: NumericFormat) -> Tensor {
        let data = self.words.iter().map(|&w| decode_word_f32(w, fmt)).collect();
        Tensor::new(self.shape.clone(), data).expect("word tensor shape checked at construction")
    }
}

/// Weight and bias words of one conv/fc layer. Fault word indices address
/// the weight words first, then the bias words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerParams {
    pub weight: WordTensor,
    pub bias: WordTensor,
}

impl LayerParams {
    pub fn word_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn word(&self, index: usize) -> Option<u32> {
        let nw = self.weight.len();
        if index < nw {
            Some(self.weight.words[index])
        } else {
            self.bias.words.get(index - nw).copied()
        }
    }

    pub fn word_mut(&mut self, index: usize) -> Option<&mut u32> {
        let nw = self.weight.len();
        if index < nw {
            Some(&mut self.weight.words[index])
        } else {
            self.bias.words.get_mut(index - nw)
        }
    }
}

/// Per-channel input normalisation applied after the `/255` pixel scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub format: NumericFormat,
    pub normalization: Option<Normalization>,
    /// Free-form string metadata (provenance and the like), preserved
    /// verbatim through save/load.
    pub metadata: BTreeMap<String, String>,
    layers: Vec<LayerSpec>,
    params: Vec<Option<LayerParams>>,
}

impl Model {
    /// Builds and validates a model. `params` is parallel to `layers`.
    pub fn new(
        name: impl Into<String>,
        input_shape: Vec<usize>,
        num_classes: usize,
        format: NumericFormat,
        layers: Vec<LayerSpec>,
        params: Vec<Option<LayerParams>>,
    ) -> Result<Self> {
        let model = Self {
            name: name.into(),
            input_shape,
            num_classes,
            format,
            normalization: None,
            metadata: BTreeMap::new(),
            layers,
            params,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_normalization(mut self, norm: Option<Normalization>) -> Result<Self> {
        self.normalization = norm;
        self.validate()?;
        Ok(self)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Option<LayerParams>] {
        &mut self.params
    }

    /// Indices of the conv/fc layers.
    pub fn param_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.params[i].is_some()).collect()
    }

    /// Indices of the relu / clipped-relu layers.
    pub fn activation_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.is_activation())
            .map(|(i, _)| i)
            .collect()
    }

    /// Resolves a layer by index or name.
    pub fn layer_index(&self, key: &str) -> Option<usize> {
        match key.parse::<usize>() {
            Ok(i) if i < self.layers.len() => Some(i),
            Ok(_) => None,
            Err(_) => self.layers.iter().position(|l| l.name == key),
        }
    }

    /// Nearest conv/fc layer at or before `layer`.
    pub fn producing_param_layer(&self, layer: usize) -> Option<usize> {
        (0..=layer.min(self.layers.len().saturating_sub(1)))
            .rev()
            .find(|&i| self.params[i].is_some())
    }

    /// Clip thresholds, one per activation layer, when every activation layer
    /// is clipped.
    pub fn thresholds(&self) -> Option<Vec<f32>> {
        self.activation_layers()
            .into_iter()
            .map(|i| match self.layers[i].kind {
                LayerKind::ClippedRelu { threshold } => Some(threshold),
                _ => None,
            })
            .collect()
    }

    /// Replaces every activation layer with a clipped ReLU using the given
    /// thresholds. Parameter words are not touched.
    pub fn set_thresholds(&self, thresholds: &[f32]) -> Result<Model> {
        let acts = self.activation_layers();
        if acts.len() != thresholds.len() {
            return Err(Error::Config(format!(
                "model has {} activation layers, got {} thresholds",
                acts.len(),
                thresholds.len()
            )));
        }
        let mut out = self.clone();
        for (&i, &t) in acts.iter().zip(thresholds) {
            ops::check_threshold(t)?;
            out.layers[i].kind = LayerKind::ClippedRelu { threshold: t };
        }
        Ok(out)
    }

    /// Sets the threshold of a single activation layer.
    pub fn set_layer_threshold(&self, layer: usize, threshold: f32) -> Result<Model> {
        if !self.layers.get(layer).is_some_and(|l| l.kind.is_activation()) {
            return Err(Error::Config(format!("layer {layer} is not an activation layer")));
        }
        ops::check_threshold(threshold)?;
        let mut out = self.clone();
        out.layers[layer].kind = LayerKind::ClippedRelu { threshold };
        Ok(out)
    }

    /// The unbounded variant: every activation layer becomes a plain ReLU.
    pub fn without_clipping(&self) -> Model {
        let mut out = self.clone();
        for l in &mut out.layers {
            if l.kind.is_activation() {
                l.kind = LayerKind::Relu;
            }
        }
        out
    }

    /// Re-encodes all parameters in another stored format. Returns the model
    /// and the number of saturated words.
    pub fn reencode(&self, fmt: NumericFormat) -> Result<(Model, usize)> {
        fmt.validate()?;
        let mut out = self.clone();
        let mut saturated = 0;
        for p in out.params.iter_mut().flatten() {
            for w in p.weight.words.iter_mut().chain(p.bias.words.iter_mut()) {
                let e = crate::format::encode_word(crate::format::decode_word(*w, self.format), fmt);
                saturated += e.saturated as usize;
                *w = e.word;
            }
        }
        out.format = fmt;
        Ok((out, saturated))
    }

    pub fn total_words(&self) -> usize {
        self.params.iter().flatten().map(LayerParams::word_count).sum()
    }

    /// CRC32 over every parameter word, for "weights untouched" checks.
    pub fn param_checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for p in self.params.iter().flatten() {
            for w in p.weight.words.iter().chain(&p.bias.words) {
                h.update(&w.to_le_bytes());
            }
        }
        h.finalize()
    }

    /// Decodes the parameter words into a runnable network.
    pub fn decode(&self) -> Network {
        Network {
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|p| {
                    p.as_ref()
                        .map(|p| (p.weight.decode(self.format), p.bias.decode(self.format)))
                })
                .collect(),
            input_shape: self.input_shape.clone(),
            normalization: self.normalization.clone(),
        }
    }

    /// Runs one `C×H×W` image. Decodes the parameter words once.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        self.decode().forward(image)
    }

    /// Output shape of every layer, checking each layer against its input.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            shape = infer_shape(l, &shape)?;
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.format.validate()?;
        if self.input_shape.len() != 3 || self.input_shape.contains(&0) {
            return Err(Error::Model(format!(
                "input shape must be C×H×W with positive dims, got {:?}",
                self.input_shape
            )));
        }
        if self.params.len() != self.layers.len() {
            return Err(Error::Model("parameter table not parallel to layer list".into()));
        }
        for (l, p) in self.layers.iter().zip(&self.params) {
            match (l.kind.param_shapes(), p) {
                (Some((ws, bs)), Some(p)) => {
                    for (role, t, want) in [("weight", &p.weight, ws), ("bias", &p.bias, bs)] {
                        if t.shape != want {
                            return Err(Error::Model(format!(
                                "layer {}: {role} shape {:?}, expected {want:?}",
                                l.name, t.shape
                            )));
                        }
                        let n: usize = t.shape.iter().product();
                        if n != t.words.len() {
                            return Err(Error::InconsistentTensorSize {
                                tensor: format!("{}.{role}", l.name),
                                shape: t.shape.clone(),
                                expected: n,
                                declared: t.words.len(),
                            });
                        }
                    }
                }
                (None, None) => {}
                (Some(_), None) => {
                    return Err(Error::Model(format!("layer {} is missing weight/bias", l.name)))
                }
                (None, Some(_)) => {
                    return Err(Error::Model(format!("layer {} cannot carry parameters", l.name)))
                }
            }
            if let LayerKind::ClippedRelu { threshold } = l.kind {
                ops::check_threshold(threshold)?;
            }
        }
        if let Some(n) = &self.normalization {
            let c = self.input_shape[0];
            if n.mean.len() != c || n.std.len() != c || n.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
                return Err(Error::Model(format!(
                    "normalization needs {c} means and {c} positive stds"
                )));
            }
        }
        let shapes = self.output_shapes()?;
        let out: usize = shapes.last().map_or(0, |s| s.iter().product());
        if out != self.num_classes {
            return Err(Error::Model(format!(
                "network emits {out} values but declares {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }
}

fn infer_shape(layer: &LayerSpec, input: &[usize]) -> Result<Vec<usize>> {
    let bad = |what: String| Error::Model(format!("layer {}: {what}", layer.name));
    match layer.kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let [c, h, w] = *input else {
                return Err(bad(format!("conv2d expects C×H×W input, got {input:?}")));
            };
            if c != in_channels {
                return Err(bad(format!("expects {in_channels} channels, input has {c}")));
            }
            if stride.contains(&0) || h + 2 * padding[0] < kernel[0] || w + 2 * padding[1] < kernel[1] {
                return Err(bad(format!("kernel {kernel:?}/stride {stride:?} do not fit input {input:?}")));
            }
            Ok(vec![
                out_channels,
                (h + 2 * padding[0] - kernel[0]) / stride[0] + 1,
                (w + 2 * padding[1] - kernel[1]) / stride[1] + 1,
            ])
        }
        LayerKind::Maxpool2d { pool, stride } => {
            let [c, h, w] = *input else {
                return Err(bad(format!("maxpool2d expects C×H×W input, got {input:?}")));
            };
            if pool.contains(&0) || stride.contains(&0) || pool[0] > h || pool[1] > w {
                return Err(bad(format!("pool {pool:?} does not fit input {input:?}")));
            }
            Ok(vec![c, (h - pool[0]) / stride[0] + 1, (w - pool[1]) / stride[1] + 1])
        }
        LayerKind::FullyConnected {
            in_features,
            out_features,
        } => {
            let n: usize = input.iter().product();
            if n != in_features {
                return Err(bad(format!("expects {in_features} features, input has {n}")));
            }
            Ok(vec![out_features])
        }
        LayerKind::Flatten => Ok(vec![input.iter().product()]),
        LayerKind::Relu | LayerKind::ClippedRelu { .. } | LayerKind::SoftmaxArgmax => {
            Ok(input.to_vec())
        }
    }
}

/// A decoded model ready for inference.
#[derive(Debug, Clone)]
pub struct Network {
    pub(crate) layers: Vec<LayerSpec>,
    pub(crate) params: Vec<Option<(Tensor, Tensor)>>,
    pub(crate) input_shape: Vec<usize>,
    pub(crate) normalization: Option<Normalization>,
}

impl Network {
    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Decoded `(weight, bias)` of a conv/fc layer.
    pub fn layer_params(&self, layer: usize) -> Option<&(Tensor, Tensor)> {
        self.params.get(layer).and_then(Option::as_ref)
    }

    /// Changes one activation layer's clip threshold in place.
    pub fn set_threshold(&mut self, layer: usize, threshold: f32) -> Result<()> {
        ops::check_threshold(threshold)?;
        match self.layers.get_mut(layer) {
            Some(l) if l.kind.is_activation() => {
                l.kind = LayerKind::ClippedRelu { threshold };
                Ok(())
            }
            _ => Err(Error::Config(format!("layer {layer} is not an activation layer"))),
        }
    }

    /// Checks the input shape and applies the optional normalisation.
    pub fn preprocess(&self, image: &Tensor) -> Result<Tensor> {
        if image.shape() != self.input_shape.as_slice() {
            return Err(Error::dim(
                "network input",
                "shape",
                format!("{:?}", self.input_shape),
                format!("{:?}", image.shape()),
            ));
        }
        let Some(norm) = &self.normalization else {
            return Ok(image.clone());
        };
        let plane = self.input_shape[1] * self.input_shape[2];
        let mut out = image.clone();
        for (c, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
            for v in chunk {
                *v = (*v - norm.mean[c]) / norm.std[c];
            }
        }
        Ok(out)
    }

    pub fn apply_layer(&self, index: usize, x: &Tensor) -> Result<Tensor> {
        let layer = &self.layers[index];
        match layer.kind {
            LayerKind::Conv2d {
                stride, padding, ..
            } => {
                let (w, b) = self.params[index].as_ref().expect("validated");
                ops::conv2d_forward(x, w, b, stride, padding)
            }
            LayerKind::FullyConnected { .. } => {
                let (w, b) = self.params[index].as_ref().expect("validated");
                ops::fc_forward(x, w, b)
            }
            LayerKind::Maxpool2d { pool, stride } => ops::maxpool2d_forward(x, pool, stride),
            LayerKind::Relu => Ok(ops::relu(x)),
            LayerKind::ClippedRelu { threshold } => ops::clipped_relu(x, threshold),
            LayerKind::Flatten => Ok(x.clone().flatten()),
            LayerKind::SoftmaxArgmax => Ok(x.clone()),
        }
    }

    /// Logits for one raw image.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let x = self.preprocess(image)?;
        self.forward_from(0, x)
    }

    /// Continues a forward pass from the input of layer `start`.
    pub fn forward_from(&self, start: usize, mut x: Tensor) -> Result<Tensor> {
        for i in start..self.layers.len() {
            x = self.apply_layer(i, &x)?;
        }
        Ok(x.flatten())
    }

    /// Output of every layer for one raw image.
    pub fn forward_trace(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = self.preprocess(image)?;
        let mut outs = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            x = self.apply_layer(i, &x)?;
            outs.push(x.clone());
        }
        Ok(outs)
    }
}
