//! Differentiable classifiers: a LeNet-style CNN for images and a
//! multi-layer perceptron for attribute vectors.
//!
//! Parameters live in a [`ParamSet`], an ordered list of named arrays that
//! flattens to the single vector exchanged between clients and server.
//! Dense weights are stored `[fan_in, fan_out]` so a layer is `x·W + b`.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{grad, softmax_cross_entropy, Activation, Graph, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayer {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Architecture {
    Mlp { hidden: Vec<usize> },
    Cnn { convs: Vec<ConvLayer>, dense: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub activation: Activation,
    pub dropout_rate: f64,
    /// Per-sample shape: `[C, H, W]` for the CNN, `[features]` for the MLP.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    /// Scales every conv layer's filter count.
    pub filter_multiplier: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Eval,
}

/// Where the classification layer sits inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FinalLayer {
    pub weight_offset: usize,
    pub fan_in: usize,
    pub classes: usize,
    pub bias_offset: Option<usize>,
}

impl ModelSpec {
    /// conv(12·fm, 5×5, stride 2, pad 2) → act → conv(12·fm, 5×5, stride 2,
    /// pad 2) → act → dense(num_classes).
    pub fn lenet(input_shape: [usize; 3], num_classes: usize, activation: Activation) -> Self {
        let conv = ConvLayer {
            filters: 12,
            kernel: 5,
            stride: 2,
            padding: 2,
        };
        Self {
            architecture: Architecture::Cnn {
                convs: vec![conv.clone(), conv],
                dense: vec![],
            },
            activation,
            dropout_rate: 0.0,
            input_shape: input_shape.to_vec(),
            num_classes,
            filter_multiplier: 1,
        }
    }

    pub fn mlp(features: usize, hidden: Vec<usize>, num_classes: usize, activation: Activation) -> Self {
        Self {
            architecture: Architecture::Mlp { hidden },
            activation,
            dropout_rate: 0.0,
            input_shape: vec![features],
            num_classes,
            filter_multiplier: 1,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate must lie in [0, 1)"));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::config("input_shape extents must be positive"));
        }
        if self.filter_multiplier == 0 {
            return Err(Error::config("filter_multiplier must be positive"));
        }
        self.layers().map(|_| ())
    }

    /// Named parameter shapes in flattening order.
    pub fn layers(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut out = Vec::new();
        let features = match &self.architecture {
            Architecture::Mlp { hidden } => {
                if self.input_shape.len() != 1 || self.input_shape[0] == 0 {
                    return Err(Error::config("mlp input_shape must be [features]"));
                }
                let mut width = self.input_shape[0];
                for (i, &h) in hidden.iter().enumerate() {
                    if h == 0 {
                        return Err(Error::config("hidden layer width must be positive"));
                    }
                    out.push((format!("dense{i}.weight"), vec![width, h]));
                    out.push((format!("dense{i}.bias"), vec![h]));
                    width = h;
                }
                width
            }
            Architecture::Cnn { convs, dense } => {
                let [c, h, w] = self.input_shape[..] else {
                    return Err(Error::config("cnn input_shape must be [channels, height, width]"));
                };
                let (mut c, mut h, mut w) = (c, h, w);
                for (i, layer) in convs.iter().enumerate() {
                    let f = layer.filters * self.filter_multiplier;
                    let oh = conv_extent(h, layer)?;
                    let ow = conv_extent(w, layer)?;
                    out.push((format!("conv{i}.weight"), vec![f, c, layer.kernel, layer.kernel]));
                    out.push((format!("conv{i}.bias"), vec![f]));
                    (c, h, w) = (f, oh, ow);
                }
                let mut width = c * h * w;
                for (i, &d) in dense.iter().enumerate() {
                    if d == 0 {
                        return Err(Error::config("dense layer width must be positive"));
                    }
                    out.push((format!("dense{i}.weight"), vec![width, d]));
                    out.push((format!("dense{i}.bias"), vec![d]));
                    width = d;
                }
                width
            }
        };
        if features == 0 {
            return Err(Error::config("model has an empty feature map"));
        }
        out.push(("out.weight".into(), vec![features, self.num_classes]));
        out.push(("out.bias".into(), vec![self.num_classes]));
        Ok(out)
    }

    pub fn total_dim(&self) -> Result<usize> {
        Ok(self.layers()?.iter().map(|(_, s)| s.iter().product::<usize>()).sum())
    }

    pub fn final_layer(&self) -> Result<FinalLayer> {
        let layers = self.layers()?;
        let total: usize = layers.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        let (_, w) = &layers[layers.len() - 2];
        Ok(FinalLayer {
            weight_offset: total - self.num_classes - w[0] * w[1],
            fan_in: w[0],
            classes: self.num_classes,
            bias_offset: Some(total - self.num_classes),
        })
    }
}

fn conv_extent(input: usize, layer: &ConvLayer) -> Result<usize> {
    let padded = input + 2 * layer.padding;
    if layer.kernel == 0 || layer.stride == 0 || layer.kernel > padded || layer.filters == 0 {
        return Err(Error::config(format!(
            "conv layer {layer:?} does not fit a spatial extent of {input}"
        )));
    }
    Ok((padded - layer.kernel) / layer.stride + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f64>,
}

/// Ordered, named model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    total_dim: usize,
    params: Vec<Param>,
}

const MANIFEST_END: &[u8] = b"# end-manifest\n";

impl ParamSet {
    pub fn new(params: Vec<Param>) -> Result<Self> {
        for p in &params {
            if p.shape.iter().product::<usize>() != p.data.len() {
                return Err(Error::DataLength {
                    shape: p.shape.clone(),
                    len: p.data.len(),
                    expected: p.shape.iter().product(),
                });
            }
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn total_dim(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    /// A parameter set with this layout holding `flat`.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.total_dim() {
            return Err(Error::ShapeMismatch {
                op: "unflatten",
                lhs: vec![self.total_dim()],
                rhs: vec![flat.len()],
            });
        }
        let mut offset = 0;
        let params = self
            .params
            .iter()
            .map(|p| {
                let n = p.data.len();
                let data = flat[offset..offset + n].to_vec();
                offset += n;
                Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data,
                }
            })
            .collect();
        Ok(ParamSet { params })
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| Tensor::from_vec(&p.shape, p.data.clone()).expect("validated param shape"))
            .collect()
    }

    /// Registers every parameter as a leaf of `graph`.
    pub fn leaves(&self, graph: &Graph) -> Vec<Tensor> {
        self.to_tensors().iter().map(|t| graph.leaf(t)).collect()
    }

    /// Shape manifest (TOML) followed by the flat little-endian `f64` vector.
    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            total_dim: self.total_dim(),
            params: self.params.clone(),
        };
        let mut out = toml::to_string(&manifest).expect("manifest serializes").into_bytes();
        out.extend_from_slice(MANIFEST_END);
        for v in self.params.iter().flat_map(|p| &p.data) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .windows(MANIFEST_END.len())
            .position(|w| w == MANIFEST_END)
            .ok_or_else(|| Error::Data("parameter file has no manifest terminator".into()))?;
        let text = std::str::from_utf8(&bytes[..split]).map_err(|e| Error::Data(e.to_string()))?;
        let manifest: Manifest = toml::from_str(text).map_err(|e| Error::Data(e.to_string()))?;
        let body = &bytes[split + MANIFEST_END.len()..];
        if body.len() != manifest.total_dim * 8 {
            return Err(Error::Data(format!(
                "parameter body has {} bytes, manifest declares {} values",
                body.len(),
                manifest.total_dim
            )));
        }
        let mut values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let params = manifest
            .params
            .into_iter()
            .map(|p| {
                let n = p.shape.iter().product();
                Param {
                    data: values.by_ref().take(n).collect(),
                    ..p
                }
            })
            .collect();
        let set = ParamSet::new(params)?;
        if set.total_dim() != manifest.total_dim {
            return Err(Error::Data("manifest total_dim disagrees with shapes".into()));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Glorot-uniform weights, zero biases; deterministic in `seed`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = spec
        .layers()?
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let (fan_in, fan_out) = match shape.len() {
                    4 => (shape[1] * shape[2] * shape[3], shape[0] * shape[2] * shape[3]),
                    _ => (shape[0], shape[1]),
                };
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            };
            Param { name, shape, data }
        })
        .collect();
    ParamSet::new(params)
}

/// Leading batch size of `x`, validating the per-sample shape.
fn batch_of(spec: &ModelSpec, x: &Tensor) -> Result<usize> {
    let s = x.shape();
    if s == spec.input_shape.as_slice() {
        Ok(1)
    } else if s.len() == spec.input_shape.len() + 1 && s[1..] == spec.input_shape[..] && s[0] > 0 {
        Ok(s[0])
    } else {
        Err(Error::ShapeMismatch {
            op: "forward",
            lhs: s.to_vec(),
            rhs: spec.input_shape.clone(),
        })
    }
}

struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    fn new(spec: &ModelSpec, mode: Mode) -> Self {
        let rng = match mode {
            Mode::Train { dropout_seed } if spec.dropout_rate > 0.0 => {
                Some(ChaCha8Rng::seed_from_u64(dropout_seed))
            }
            _ => None,
        };
        Self {
            rate: spec.dropout_rate,
            rng,
        }
    }

    fn apply(&mut self, h: Tensor) -> Result<Tensor> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(h);
        };
        let keep = 1.0 - self.rate;
        let mask = (0..h.numel())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        h.mul(&Tensor::from_vec(h.shape(), mask)?)
    }
}

fn dense(h: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = h.matmul(w)?;
    let out = b.numel();
    let bias = b.reshape(&[1, out])?.broadcast_to(y.shape())?;
    y.add(&bias)
}

/// Logits `[batch, num_classes]` for `x` shaped like one sample or a batch.
pub fn forward_tensors(spec: &ModelSpec, params: &[Tensor], x: &Tensor, mode: Mode) -> Result<Tensor> {
    let batch = batch_of(spec, x)?;
    let act = spec.activation;
    let mut dropout = Dropout::new(spec, mode);
    let mut p = params.iter();
    let mut next = || {
        p.next()
            .ok_or_else(|| Error::config("parameter list shorter than the model"))
    };
    let mut h = match &spec.architecture {
        Architecture::Mlp { hidden } => {
            let mut h = x.reshape(&[batch, spec.input_len()])?;
            for _ in hidden {
                let (w, b) = (next()?, next()?);
                h = dropout.apply(dense(&h, w, b)?.activation(act)?)?;
            }
            h
        }
        Architecture::Cnn { convs, dense: widths } => {
            let mut shape = vec![batch];
            shape.extend_from_slice(&spec.input_shape);
            let mut h = x.reshape(&shape)?;
            for layer in convs {
                let (k, b) = (next()?, next()?);
                let y = h.conv2d(k, layer.stride, layer.padding)?;
                let bias = b.reshape(&[1, b.numel(), 1, 1])?.broadcast_to(y.shape())?;
                h = y.add(&bias)?.activation(act)?;
            }
            let features = h.numel() / batch;
            h = dropout.apply(h.reshape(&[batch, features])?)?;
            for _ in widths {
                let (w, b) = (next()?, next()?);
                h = dropout.apply(dense(&h, w, b)?.activation(act)?)?;
            }
            h
        }
    };
    let (w, b) = (next()?, next()?);
    h = dense(&h, w, b)?;
    Ok(h)
}

pub fn forward(spec: &ModelSpec, params: &ParamSet, x: &Tensor, mode: Mode) -> Result<Tensor> {
    forward_tensors(spec, &params.to_tensors(), x, mode)
}

/// Mean cross-entropy of a batch together with its parameter gradients.
/// With `retain_graph` the gradients stay attached to the graph that
/// `params` and `x` live on.
pub fn loss_and_gradient_tensors(
    spec: &ModelSpec,
    params: &[Tensor],
    x: &Tensor,
    labels: &[usize],
    mode: Mode,
    retain_graph: bool,
) -> Result<(Tensor, Vec<Tensor>)> {
    if labels.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let logits = forward_tensors(spec, params, x, mode)?;
    let loss = softmax_cross_entropy(&logits, labels)?;
    let wrt: Vec<&Tensor> = params.iter().collect();
    let grads = grad(&loss, &wrt, retain_graph)?;
    Ok((loss, grads))
}

/// Mean cross-entropy and the flat gradient over all parameters.
pub fn loss_and_gradients(
    spec: &ModelSpec,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
    mode: Mode,
) -> Result<(f64, Vec<f64>)> {
    let graph = Graph::new();
    let leaves = params.leaves(&graph);
    let (loss, grads) = loss_and_gradient_tensors(spec, &leaves, &x.detach(), labels, mode, false)?;
    Ok((loss.item(), grads.iter().flat_map(|g| g.data().iter().copied()).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{finite_diff, rel_err, rng, uniform_vec};

    fn small_cnn(act: Activation) -> ModelSpec {
        ModelSpec {
            architecture: Architecture::Cnn {
                convs: vec![ConvLayer {
                    filters: 3,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                }],
                dense: vec![5],
            },
            activation: act,
            dropout_rate: 0.0,
            input_shape: vec![1, 6, 6],
            num_classes: 4,
            filter_multiplier: 1,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = ModelSpec::lenet([1, 28, 28], 10, Activation::Sigmoid);
        let a = init_params(&spec, 5).unwrap();
        let b = init_params(&spec, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&spec, 6).unwrap());
        for p in a.params().iter().filter(|p| p.name.ends_with(".bias")) {
            assert!(p.data.iter().all(|&v| v == 0.0));
        }
        // 12·1·25+12 + 12·12·25+12 + 588·10+10
        assert_eq!(a.total_dim(), 312 + 3612 + 5890);
    }

    #[test]
    fn mlp_total_dim() {
        let spec = ModelSpec::mlp(4, vec![8], 2, Activation::Sigmoid);
        assert_eq!(spec.total_dim().unwrap(), 58);
        assert_eq!(init_params(&spec, 0).unwrap().total_dim(), 58);
        let fl = spec.final_layer().unwrap();
        assert_eq!(fl, FinalLayer { weight_offset: 40, fan_in: 8, classes: 2, bias_offset: Some(56) });
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = ModelSpec::mlp(4, vec![8], 1, Activation::Sigmoid);
        assert!(spec.validate().is_err());
        spec.num_classes = 3;
        spec.dropout_rate = 1.0;
        assert!(spec.validate().is_err());
        assert!(ModelSpec::lenet([1, 0, 4], 10, Activation::Sigmoid).validate().is_err());
        assert!(ModelSpec::lenet([0, 28, 28], 10, Activation::Sigmoid).validate().is_err());
        // 2×2 still fits one 5×5 tap window thanks to the padding.
        assert!(ModelSpec::lenet([1, 2, 2], 10, Activation::Sigmoid).validate().is_ok());
    }

    #[test]
    fn flatten_roundtrip_and_serialization() {
        let spec = small_cnn(Activation::Tanh);
        let p = init_params(&spec, 1).unwrap();
        let flat = p.flatten();
        assert_eq!(flat.len(), p.total_dim());
        assert_eq!(p.unflatten(&flat).unwrap(), p);
        assert!(p.unflatten(&flat[1..]).is_err());
        let back = ParamSet::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(back, p);
        let bytes = p.to_bytes();
        assert!(ParamSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let spec = small_cnn(Activation::Sigmoid);
        let p = init_params(&spec, 1).unwrap();
        let zero = p.unflatten(&vec![0.0; p.total_dim()]).unwrap();
        let mut r = rng(2);
        let x = Tensor::from_vec(&[1, 6, 6], uniform_vec(&mut r, 36, 0.0, 1.0)).unwrap();
        let logits = forward(&spec, &zero, &x, Mode::Eval).unwrap();
        assert_eq!(logits.shape(), &[1, 4]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_mode_ignores_dropout() {
        let mut spec = small_cnn(Activation::Sigmoid);
        let p = init_params(&spec, 3).unwrap();
        let mut r = rng(4);
        let x = Tensor::from_vec(&[1, 6, 6], uniform_vec(&mut r, 36, 0.0, 1.0)).unwrap();
        let plain = forward(&spec, &p, &x, Mode::Train { dropout_seed: 1 }).unwrap();
        spec.dropout_rate = 0.5;
        let eval = forward(&spec, &p, &x, Mode::Eval).unwrap();
        assert_eq!(plain, eval);
        let train = forward(&spec, &p, &x, Mode::Train { dropout_seed: 1 }).unwrap();
        assert_ne!(train, eval);
    }

    #[test]
    fn batch_rows_match_single_forward() {
        let spec = small_cnn(Activation::Tanh);
        let p = init_params(&spec, 3).unwrap();
        let mut r = rng(5);
        let xs = uniform_vec(&mut r, 3 * 36, 0.0, 1.0);
        let batch = forward(&spec, &p, &Tensor::from_vec(&[3, 1, 6, 6], xs.clone()).unwrap(), Mode::Eval).unwrap();
        for i in 0..3 {
            let xi = Tensor::from_vec(&[1, 6, 6], xs[i * 36..(i + 1) * 36].to_vec()).unwrap();
            let row = forward(&spec, &p, &xi, Mode::Eval).unwrap();
            for c in 0..4 {
                assert!((batch.data()[i * 4 + c] - row.data()[c]).abs() < 1e-14);
            }
        }
        let bad = Tensor::zeros(&[1, 5, 6]);
        assert!(forward(&spec, &p, &bad, Mode::Eval).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, act) in [(1, Activation::Sigmoid), (2, Activation::Tanh)] {
            let spec = small_cnn(act);
            let p = init_params(&spec, seed).unwrap();
            let mut r = rng(seed + 10);
            let x = Tensor::from_vec(&[2, 1, 6, 6], uniform_vec(&mut r, 72, 0.0, 1.0)).unwrap();
            let labels = [1, 3];
            let (_, g) = loss_and_gradients(&spec, &p, &x, &labels, Mode::Eval).unwrap();
            let fd = finite_diff(
                |w| {
                    let q = p.unflatten(w).unwrap();
                    let logits = forward(&spec, &q, &x, Mode::Eval).unwrap();
                    softmax_cross_entropy(&logits, &labels).unwrap().item()
                },
                &p.flatten(),
                1e-5,
            );
            assert!(rel_err(&g, &fd) < 1e-4);
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_per_sample() {
        let spec = ModelSpec::mlp(6, vec![5], 3, Activation::Sigmoid);
        let p = init_params(&spec, 8).unwrap();
        let mut r = rng(9);
        let xs = uniform_vec(&mut r, 18, 0.0, 1.0);
        let labels = [0, 2, 2];
        let x = Tensor::from_vec(&[3, 6], xs.clone()).unwrap();
        let (_, g) = loss_and_gradients(&spec, &p, &x, &labels, Mode::Eval).unwrap();
        let mut mean = vec![0.0; g.len()];
        for i in 0..3 {
            let xi = Tensor::from_vec(&[6], xs[i * 6..(i + 1) * 6].to_vec()).unwrap();
            let (_, gi) = loss_and_gradients(&spec, &p, &xi, &labels[i..=i], Mode::Eval).unwrap();
            for (m, v) in mean.iter_mut().zip(gi) {
                *m += v / 3.0;
            }
        }
        for (a, b) in g.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }

        // Duplicated sample: identical to the single-sample batch.
        let x1 = Tensor::from_vec(&[1, 6], xs[..6].to_vec()).unwrap();
        let x2 = Tensor::from_vec(&[2, 6], [&xs[..6], &xs[..6]].concat()).unwrap();
        let (l1, g1) = loss_and_gradients(&spec, &p, &x1, &[0], Mode::Eval).unwrap();
        let (l2, g2) = loss_and_gradients(&spec, &p, &x2, &[0, 0], Mode::Eval).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
        assert!(rel_err(&g2, &g1) < 1e-14);
    }

    #[test]
    fn final_bias_gradient_has_one_negative_entry() {
        let spec = ModelSpec::lenet([1, 12, 12], 5, Activation::Sigmoid);
        let p = init_params(&spec, 4).unwrap();
        let fl = spec.final_layer().unwrap();
        let mut r = rng(6);
        for label in 0..5 {
            let x = Tensor::from_vec(&[1, 12, 12], uniform_vec(&mut r, 144, 0.0, 1.0)).unwrap();
            let (_, g) = loss_and_gradients(&spec, &p, &x, &[label], Mode::Eval).unwrap();
            let bias = &g[fl.bias_offset.unwrap()..];
            let negatives: Vec<usize> = (0..5).filter(|&i| bias[i] < 0.0).collect();
            assert_eq!(negatives, vec![label]);
        }
    }

    #[test]
    fn dropout_seeds_change_gradients() {
        let mut spec = small_cnn(Activation::Sigmoid);
        spec.dropout_rate = 0.3;
        let p = init_params(&spec, 3).unwrap();
        let x = Tensor::full(&[1, 6, 6], 0.5);
        let (_, a) = loss_and_gradients(&spec, &p, &x, &[1], Mode::Train { dropout_seed: 1 }).unwrap();
        let (_, b) = loss_and_gradients(&spec, &p, &x, &[1], Mode::Train { dropout_seed: 2 }).unwrap();
        let (_, c) = loss_and_gradients(&spec, &p, &x, &[1], Mode::Train { dropout_seed: 1 }).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
