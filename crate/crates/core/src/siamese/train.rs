use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::loss::backward_into;
use super::model::{init_model, Gradients, ModelError, ShapeError, SiameseModel};
use super::sampling::{sample_triplets, SampleError};
use crate::embed::EmbeddingStore;

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Triplets per SGD step.
    pub batch_size: usize,
    pub margin: f64,
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
    pub embedding_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 450,
            learning_rate: 1e-5,
            batch_size: 8,
            margin: 1.0,
            seed: 0,
            hidden_dims: vec![256],
            embedding_size: 128,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid training config: {0}")]
pub struct ConfigError(pub String);

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |what: &str| Err(ConfigError(what.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return bad("margin must be positive");
        }
        if self.embedding_size == 0 || self.hidden_dims.contains(&0) {
            return bad("layer dims must be positive");
        }
        Ok(())
    }
}

/// What happened during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean triplet loss of each epoch, measured before each step's update.
    pub epoch_loss: Vec<f64>,
    pub wall_clock_seconds: f64,
    pub triplets_seen: usize,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no embedding for test `{0}`")]
    MissingEmbedding(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error("training diverged: non-finite parameters after epoch {0}")]
    Diverged(usize),
}

fn apply_update(model: &mut SiameseModel, grads: &Gradients, scale: f64) {
    for (layer, g) in model.layers_mut().iter_mut().zip(&grads.layers) {
        let (w, b) = layer.params_mut();
        for (p, d) in w.iter_mut().zip(&g.weights) {
            *p = (f64::from(*p) - scale * d) as f32;
        }
        for (p, d) in b.iter_mut().zip(&g.bias) {
            *p = (f64::from(*p) - scale * d) as f32;
        }
    }
}

/// Plain minibatch SGD on the triplet loss.
///
/// Each epoch draws one random triplet per labeled example and steps
/// `θ ← θ − lr · mean(batch gradient)` every `batch_size` triplets. Runs on
/// one thread and is bit-for-bit deterministic for a fixed `cfg.seed`.
pub fn train<L: Ord>(
    mut model: SiameseModel,
    store: &EmbeddingStore,
    labeled: &[(String, L)],
    cfg: &TrainConfig,
) -> Result<(SiameseModel, TrainLog), TrainError> {
    cfg.validate()?;
    if store.dim() != model.input_dim() {
        return Err(ShapeError {
            expected: model.input_dim(),
            got: store.dim(),
        }
        .into());
    }
    let inputs: Vec<&[f32]> = labeled
        .iter()
        .map(|(id, _)| {
            store
                .get(id)
                .map(|v| v.as_slice())
                .ok_or_else(|| TrainError::MissingEmbedding(id.clone()))
        })
        .collect::<Result<_, _>>()?;
    let labels: Vec<&L> = labeled.iter().map(|(_, l)| l).collect();

    // Stream 0 of the seed initializes weights; stream 1 drives sampling.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let started = Instant::now();
    let mut log = TrainLog {
        epoch_loss: Vec::with_capacity(cfg.epochs),
        wall_clock_seconds: 0.0,
        triplets_seen: 0,
    };
    for epoch in 0..cfg.epochs {
        let triplets = sample_triplets(&labels, labeled.len(), &mut rng)?;
        let mut epoch_loss = 0.0;
        for batch in triplets.chunks(cfg.batch_size) {
            let mut grads = Gradients::zeros(&model);
            let mut active = false;
            for t in batch {
                let loss = backward_into(
                    &model,
                    inputs[t.anchor],
                    inputs[t.positive],
                    inputs[t.negative],
                    cfg.margin,
                    &mut grads,
                )?;
                epoch_loss += loss;
                active |= loss > 0.0;
            }
            if active {
                apply_update(&mut model, &grads, cfg.learning_rate / batch.len() as f64);
            }
        }
        log.triplets_seen += triplets.len();
        log.epoch_loss.push(epoch_loss / triplets.len() as f64);
        if !model.flat_params().iter().all(|p| p.is_finite()) {
            return Err(TrainError::Diverged(epoch + 1));
        }
    }
    log.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok((model, log))
}

/// Initializes a model sized for `store` from `cfg` and trains it.
pub fn fit<L: Ord>(
    store: &EmbeddingStore,
    labeled: &[(String, L)],
    cfg: &TrainConfig,
) -> Result<(SiameseModel, TrainLog), TrainError> {
    cfg.validate()?;
    let model = init_model(store.dim(), &cfg.hidden_dims, cfg.embedding_size, cfg.seed)?;
    train(model, store, labeled, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::EmbeddingVector;

    fn toy_store() -> (EmbeddingStore, Vec<(String, u8)>) {
        let mut store = EmbeddingStore::new(3);
        let mut labeled = Vec::new();
        for i in 0..12 {
            let class = (i % 3) as u8;
            let base = f32::from(class) * 2.0;
            let jitter = (i as f32) * 0.01;
            let v = vec![base + jitter, -base + jitter, 0.5 * base - jitter];
            store
                .insert(format!("t{i}"), EmbeddingVector::new(v).unwrap())
                .unwrap();
            labeled.push((format!("t{i}"), class));
        }
        (store, labeled)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (store, labeled) = toy_store();
        let cfg = TrainConfig {
            epochs: 5,
            learning_rate: 0.0,
            hidden_dims: vec![4],
            embedding_size: 2,
            ..TrainConfig::default()
        };
        let init = init_model(3, &[4], 2, cfg.seed).unwrap();
        let (trained, log) = train(init.clone(), &store, &labeled, &cfg).unwrap();
        assert_eq!(trained, init);
        assert_eq!(log.epoch_loss.len(), 5);
        assert!(log.wall_clock_seconds >= 0.0);
    }

    #[test]
    fn one_epoch_sees_one_triplet_per_example() {
        let (store, labeled) = toy_store();
        let cfg = TrainConfig {
            epochs: 1,
            hidden_dims: vec![],
            embedding_size: 2,
            ..TrainConfig::default()
        };
        let (_, log) = fit(&store, &labeled, &cfg).unwrap();
        assert_eq!(log.triplets_seen, 12);
        assert_eq!(log.epoch_loss.len(), 1);
    }

    #[test]
    fn missing_embedding_names_id() {
        let (store, mut labeled) = toy_store();
        labeled.push(("ghost".into(), 0));
        let err = fit(&store, &labeled, &TrainConfig::default()).unwrap_err();
        assert_eq!(err.to_string(), "no embedding for test `ghost`");
    }

    #[test]
    fn dim_mismatch_is_shape_error() {
        let (store, labeled) = toy_store();
        let model = init_model(4, &[], 2, 0).unwrap();
        assert!(matches!(
            train(model, &store, &labeled, &TrainConfig::default()),
            Err(TrainError::Shape(_))
        ));
    }

    #[test]
    fn invalid_config_rejected() {
        let (store, labeled) = toy_store();
        for cfg in [
            TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                margin: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: f64::NAN,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(
                fit(&store, &labeled, &cfg),
                Err(TrainError::Config(_))
            ));
        }
    }

    #[test]
    fn training_is_bit_deterministic() {
        let (store, labeled) = toy_store();
        let cfg = TrainConfig {
            epochs: 20,
            learning_rate: 1e-2,
            hidden_dims: vec![5],
            embedding_size: 3,
            seed: 17,
            ..TrainConfig::default()
        };
        let (a, la) = fit(&store, &labeled, &cfg).unwrap();
        let (b, lb) = fit(&store, &labeled, &cfg).unwrap();
        let bits = |m: &SiameseModel| {
            m.flat_params()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(la.epoch_loss, lb.epoch_loss);
    }

    #[test]
    fn loss_trends_down_on_separable_data() {
        let (store, labeled) = toy_store();
        let cfg = TrainConfig {
            epochs: 200,
            learning_rate: 1e-3,
            margin: 20.0,
            hidden_dims: vec![8],
            embedding_size: 4,
            seed: 3,
            ..TrainConfig::default()
        };
        let (_, log) = fit(&store, &labeled, &cfg).unwrap();
        let window = |r: std::ops::Range<usize>| {
            log.epoch_loss[r.clone()].iter().sum::<f64>() / r.len() as f64
        };
        let means: Vec<f64> = (0..4).map(|w| window(w * 50..(w + 1) * 50)).collect();
        for pair in means.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "{means:?}");
        }
        assert!(means[3] < means[0], "{means:?}");
    }
}
