use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "id")]
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative at pre-activation `z`; ReLU uses 0 at the kink.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// A dense layer `y = act(W x + b)` with `W` stored row-major, `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
    activation: Activation,
}

impl Layer {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
        activation: Activation,
    ) -> Result<Self, ModelError> {
        if in_dim == 0 || out_dim == 0 {
            return Err(ModelError::Config("layer dims must be positive".into()));
        }
        if weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(ModelError::Config(format!(
                "layer {in_dim}->{out_dim} needs {} weights and {out_dim} biases, got {} and {}",
                in_dim * out_dim,
                weights.len(),
                bias.len()
            )));
        }
        if !weights.iter().chain(&bias).all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub(crate) fn params_mut(&mut self) -> (&mut [f32], &mut [f32]) {
        (&mut self.weights, &mut self.bias)
    }

    /// Pre-activations `W x + b`, accumulated in `f64`.
    pub(crate) fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| {
                row.iter()
                    .zip(x)
                    .fold(f64::from(*b), |acc, (w, v)| acc + f64::from(*w) * v)
            })
            .collect()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model parameters must be finite")]
    NonFinite,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("shape mismatch: expected length {expected}, got {got}")]
pub struct ShapeError {
    pub expected: usize,
    pub got: usize,
}

/// The shared-weight encoder head. Every branch of a triplet runs through
/// this one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct SiameseModel {
    layers: Vec<Layer>,
}

impl SiameseModel {
    /// Validates that dims chain and the last layer is linear.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, ModelError> {
        let last = layers
            .last()
            .ok_or_else(|| ModelError::Config("model needs at least one layer".into()))?;
        if last.activation != Activation::Identity {
            return Err(ModelError::Config("last layer must be linear".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(ModelError::Config(format!(
                    "layer dims do not chain: {} then {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn embedding_size(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Every parameter, layer by layer, weights before biases.
    pub fn flat_params(&self) -> Vec<f32> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub(crate) fn check_input(&self, x: &[f32]) -> Result<(), ShapeError> {
        if x.len() == self.input_dim() {
            Ok(())
        } else {
            Err(ShapeError {
                expected: self.input_dim(),
                got: x.len(),
            })
        }
    }

    /// Encodes `x` keeping full `f64` precision.
    pub fn encode(&self, x: &[f32]) -> Result<Vec<f64>, ShapeError> {
        self.check_input(x)?;
        let mut a: Vec<f64> = x.iter().map(|v| f64::from(*v)).collect();
        for layer in &self.layers {
            a = layer
                .affine(&a)
                .into_iter()
                .map(|z| layer.activation.apply(z))
                .collect();
        }
        Ok(a)
    }

    /// Forward pass keeping each layer's input and pre-activation.
    pub(crate) fn forward_cached(&self, x: &[f32]) -> ForwardCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a: Vec<f64> = x.iter().map(|v| f64::from(*v)).collect();
        for layer in &self.layers {
            let z = layer.affine(&a);
            let next = z.iter().map(|v| layer.activation.apply(*v)).collect();
            inputs.push(std::mem::replace(&mut a, next));
            pre.push(z);
        }
        ForwardCache {
            inputs,
            pre,
            output: a,
        }
    }

    /// Backpropagates `d_out` (gradient w.r.t. the output) through a cached
    /// pass, adding parameter gradients into `grads`.
    pub(crate) fn accumulate(&self, cache: &ForwardCache, d_out: &[f64], grads: &mut Gradients) {
        let mut delta: Vec<f64> = d_out.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            for (d, z) in delta.iter_mut().zip(&cache.pre[k]) {
                *d *= layer.activation.derivative(*z);
            }
            let g = &mut grads.layers[k];
            let input = &cache.inputs[k];
            for (i, d) in delta.iter().enumerate() {
                g.bias[i] += d;
                if *d != 0.0 {
                    let row = &mut g.weights[i * layer.in_dim..(i + 1) * layer.in_dim];
                    for (gw, a) in row.iter_mut().zip(input) {
                        *gw += d * a;
                    }
                }
            }
            if k > 0 {
                let mut prev = vec![0.0; layer.in_dim];
                for (row, d) in layer.weights.chunks_exact(layer.in_dim).zip(&delta) {
                    if *d == 0.0 {
                        continue;
                    }
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += d * f64::from(*w);
                    }
                }
                delta = prev;
            }
        }
    }
}

pub(crate) struct ForwardCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

/// Gradient of one layer, same shapes as its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameter gradients for a whole model, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros(model: &SiameseModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// Flattened in the same order as [`SiameseModel::flat_params`].
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.flat().iter().all(|g| *g == 0.0)
    }
}

/// Glorot-uniform weights, zero biases, ReLU between layers and a linear
/// output layer. Deterministic per seed.
pub fn init_model(
    input_dim: usize,
    hidden_dims: &[usize],
    embedding_size: usize,
    seed: u64,
) -> Result<SiameseModel, ModelError> {
    if input_dim == 0 || embedding_size == 0 || hidden_dims.contains(&0) {
        return Err(ModelError::Config("all dims must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims: Vec<usize> = std::iter::once(input_dim)
        .chain(hidden_dims.iter().copied())
        .chain(std::iter::once(embedding_size))
        .collect();
    let n_layers = dims.len() - 1;
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(k, pair)| {
            let (d_in, d_out) = (pair[0], pair[1]);
            let limit = (6.0 / (d_in + d_out) as f64).sqrt() as f32;
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            let weights = (0..d_in * d_out).map(|_| dist.sample(&mut rng)).collect();
            let activation = if k + 1 == n_layers {
                Activation::Identity
            } else {
                Activation::Relu
            };
            Layer::new(d_in, d_out, weights, vec![0.0; d_out], activation)
        })
        .collect::<Result<Vec<_>, _>>()?;
    SiameseModel::from_layers(layers)
}

/// Encodes `x` and returns the `f32` embedding.
pub fn forward(model: &SiameseModel, x: &[f32]) -> Result<Vec<f32>, ShapeError> {
    Ok(model.encode(x)?.into_iter().map(|v| v as f32).collect())
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    w: Vec<Vec<f32>>,
    b: Vec<f32>,
    act: Activation,
}

/// On-disk model: parameters plus the configuration that produced them.
#[derive(Serialize, Deserialize)]
struct CheckpointRecord {
    input_dim: usize,
    embedding_size: usize,
    layers: Vec<LayerRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_config: Option<TrainConfig>,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid checkpoint: {0}")]
    Model(#[from] ModelError),
}

/// A model and, if it was trained, its training configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SiameseModel,
    pub train_config: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String, serde_json::Error> {
        let record = CheckpointRecord {
            input_dim: self.model.input_dim(),
            embedding_size: self.model.embedding_size(),
            layers: self
                .model
                .layers
                .iter()
                .map(|l| LayerRecord {
                    w: l.weights
                        .chunks_exact(l.in_dim)
                        .map(<[f32]>::to_vec)
                        .collect(),
                    b: l.bias.clone(),
                    act: l.activation,
                })
                .collect(),
            train_config: self.train_config.clone(),
        };
        serde_json::to_string_pretty(&record)
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let record: CheckpointRecord = serde_json::from_str(text)?;
        let layers = record
            .layers
            .into_iter()
            .map(|l| {
                let out_dim = l.w.len();
                let in_dim = l.w.first().map_or(0, Vec::len);
                if l.w.iter().any(|row| row.len() != in_dim) {
                    return Err(ModelError::Config("ragged weight matrix".into()));
                }
                Layer::new(in_dim, out_dim, l.w.concat(), l.b, l.act)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let model = SiameseModel::from_layers(layers)?;
        if model.input_dim() != record.input_dim || model.embedding_size() != record.embedding_size
        {
            return Err(ModelError::Config(format!(
                "declared dims {}->{} disagree with layers {}->{}",
                record.input_dim,
                record.embedding_size,
                model.input_dim(),
                model.embedding_size()
            ))
            .into());
        }
        Ok(Self {
            model,
            train_config: record.train_config,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CheckpointError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let a = init_model(6, &[5, 4], 3, 11).unwrap();
        let b = init_model(6, &[5, 4], 3, 11).unwrap();
        let bits = |m: &SiameseModel| {
            m.flat_params()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
        let c = init_model(6, &[5, 4], 3, 12).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn no_hidden_layers_is_one_linear_map() {
        let m = init_model(7, &[], 3, 0).unwrap();
        assert_eq!(m.layers().len(), 1);
        assert_eq!((m.input_dim(), m.embedding_size()), (7, 3));
        assert_eq!(m.layers()[0].activation(), Activation::Identity);
    }

    #[test]
    fn parameter_count() {
        let m = init_model(4, &[3], 2, 0).unwrap();
        assert_eq!(m.param_count(), 4 * 3 + 3 + 3 * 2 + 2);
        assert_eq!(m.param_count(), 23);
    }

    #[test]
    fn weights_within_glorot_bounds_and_bias_zero() {
        let m = init_model(10, &[20], 6, 3).unwrap();
        for l in m.layers() {
            let limit = (6.0 / (l.in_dim() + l.out_dim()) as f64).sqrt() as f32;
            assert!(l.weights().iter().all(|w| w.abs() <= limit));
            assert!(l.bias().iter().all(|b| *b == 0.0));
        }
        assert_eq!(m.layers()[0].activation(), Activation::Relu);
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(init_model(0, &[], 2, 0).is_err());
        assert!(init_model(3, &[0], 2, 0).is_err());
        assert!(init_model(3, &[2], 0, 0).is_err());
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = Layer::new(
            3,
            3,
            vec![1., 0., 0., 0., 1., 0., 0., 0., 1.],
            vec![0.; 3],
            Activation::Identity,
        )
        .unwrap();
        let m = SiameseModel::from_layers(vec![layer]).unwrap();
        assert_eq!(
            forward(&m, &[0.5, -2.0, 9.0]).unwrap(),
            vec![0.5, -2.0, 9.0]
        );
    }

    #[test]
    fn hand_evaluated_two_layer_net() {
        let l1 = Layer::new(2, 1, vec![1.0, -1.0], vec![0.0], Activation::Relu).unwrap();
        let l2 = Layer::new(1, 1, vec![2.0], vec![0.0], Activation::Identity).unwrap();
        let m = SiameseModel::from_layers(vec![l1, l2]).unwrap();
        assert_eq!(forward(&m, &[3.0, 1.0]).unwrap(), vec![4.0]);
        // ReLU clips the negative branch
        assert_eq!(forward(&m, &[1.0, 3.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn wrong_input_length() {
        let m = init_model(4, &[], 2, 0).unwrap();
        assert_eq!(
            forward(&m, &[1.0; 3]),
            Err(ShapeError {
                expected: 4,
                got: 3
            })
        );
    }

    #[test]
    fn structural_invariants_enforced() {
        let relu_last = Layer::new(2, 2, vec![0.0; 4], vec![0.0; 2], Activation::Relu).unwrap();
        assert!(SiameseModel::from_layers(vec![relu_last]).is_err());
        let a = Layer::new(2, 3, vec![0.0; 6], vec![0.0; 3], Activation::Relu).unwrap();
        let b = Layer::new(2, 2, vec![0.0; 4], vec![0.0; 2], Activation::Identity).unwrap();
        assert!(SiameseModel::from_layers(vec![a, b]).is_err());
        assert_eq!(
            Layer::new(1, 1, vec![f32::NAN], vec![0.0], Activation::Identity),
            Err(ModelError::NonFinite)
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = init_model(5, &[4], 3, 9).unwrap();
        let cp = Checkpoint {
            model: m,
            train_config: Some(TrainConfig::default()),
        };
        let json = cp.to_json().unwrap();
        let back = Checkpoint::from_json(&json).unwrap();
        assert_eq!(back, cp);
        assert_eq!(back.to_json().unwrap(), json);
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["input_dim"], 5);
        assert_eq!(value["embedding_size"], 3);
        assert_eq!(value["layers"][0]["act"], "relu");
        assert_eq!(value["layers"][1]["act"], "id");
        assert_eq!(value["layers"][0]["w"].as_array().unwrap().len(), 4);
    }
}
