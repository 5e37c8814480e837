//! SGD with classical momentum over labeled tiles, plus the
//! landcover-classification pretraining used to warm-start fine-tuning.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConvNetError, LayerSpec, Network, NetworkSpec, Tensor};
use crate::rng::Stream;
use crate::tiler::TileImage;

/// One training example: a tile and a soft target distribution whose length
/// matches the network head.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTile {
    pub tile: TileImage,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    FromScratch,
    FineTune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// In FineTune mode, how many leading layers receive zero updates.
    pub frozen_prefix_layers: usize,
    pub input_bands: usize,
    /// Share of the training tiles held back as the dev set whose loss is
    /// reported per epoch.
    pub dev_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            epochs: 14,
            seed: 1,
            mode: TrainMode::FromScratch,
            frozen_prefix_layers: 6,
            input_bands: 3,
            dev_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConvNetError> {
        let err = |field: &'static str, message: String| ConvNetError::InvalidTrainConfig {
            field,
            message,
        };
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(err("learning_rate", format!("{} must be > 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(err("momentum", format!("{} not in [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(err("batch_size", "must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(err("epochs", "must be at least 1".into()));
        }
        if self.input_bands != 3 && self.input_bands != 4 {
            return Err(err("input_bands", format!("{} must be 3 or 4", self.input_bands)));
        }
        if self.mode == TrainMode::FineTune && self.input_bands != 3 {
            return Err(err(
                "input_bands",
                "fine-tuning transfers 3-band weights, so input_bands must be 3".into(),
            ));
        }
        if !(0.0..=0.9).contains(&self.dev_fraction) {
            return Err(err("dev_fraction", format!("{} not in [0, 0.9]", self.dev_fraction)));
        }
        Ok(())
    }
}

/// Per-epoch losses. `train_loss` is the running mean of the epoch's batch
/// losses (measured as the weights move); `dev_loss` is evaluated on the
/// held-back dev tiles after the epoch, or equals `train_loss` when the dev
/// set is empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub network: Network,
    pub trace: Vec<EpochLoss>,
}

/// Split example indices into (dev, train) deterministically.
fn dev_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    Stream::new(seed, "dev-split", &[]).shuffle(&mut order);
    let dev_count = (fraction * n as f64).floor() as usize;
    let dev = order[..dev_count].to_vec();
    let train = order[dev_count..].to_vec();
    (dev, train)
}

/// Train a copy of `net` on the labeled tiles. Weight updates follow
/// classical momentum (v <- m v - lr g; w <- w + v) over seeded-shuffled
/// batches; the outcome and trace are deterministic in (net, examples,
/// config).
pub fn train(
    net: &Network,
    examples: &[LabeledTile],
    config: &TrainConfig,
) -> Result<TrainOutcome, ConvNetError> {
    config.validate()?;
    if examples.is_empty() {
        return Err(ConvNetError::EmptyTrainingSet);
    }
    for ex in examples {
        if ex.tile.bands != config.input_bands {
            return Err(ConvNetError::ShapeMismatch {
                site: "training tiles".into(),
                expected: vec![config.input_bands],
                actual: vec![ex.tile.bands],
            });
        }
    }

    let mut net = net.clone();
    net.frozen_mask = match config.mode {
        TrainMode::FromScratch => vec![false; net.spec.layers.len()],
        TrainMode::FineTune => (0..net.spec.layers.len())
            .map(|ix| ix < config.frozen_prefix_layers)
            .collect(),
    };

    let (dev_ix, train_ix) = dev_split(examples.len(), config.dev_fraction, config.seed);
    if train_ix.is_empty() {
        return Err(ConvNetError::InvalidTrainConfig {
            field: "dev_fraction",
            message: format!(
                "holding back {} of {} examples leaves nothing to train on",
                dev_ix.len(),
                examples.len()
            ),
        });
    }
    let dev_samples: Vec<(&TileImage, &[f64])> = dev_ix
        .iter()
        .map(|&i| (&examples[i].tile, examples[i].target.as_slice()))
        .collect();

    let mut velocity: Vec<Vec<Tensor>> = net.zero_gradients();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut order = train_ix;
    for epoch in 1..=config.epochs {
        Stream::new(config.seed, "epoch-shuffle", &[epoch as u64]).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let samples: Vec<(&TileImage, &[f64])> = chunk
                .iter()
                .map(|&i| (&examples[i].tile, examples[i].target.as_slice()))
                .collect();
            let (batch_loss, grads) = net.backward_batch(&samples)?;
            if !batch_loss.is_finite() {
                return Err(ConvNetError::Diverged {
                    epoch,
                    learning_rate: config.learning_rate,
                });
            }
            loss_sum += batch_loss * samples.len() as f64;
            seen += samples.len();
            for (layer, frozen) in net.frozen_mask.clone().iter().enumerate() {
                if *frozen {
                    continue;
                }
                for (t_ix, grad) in grads[layer].iter().enumerate() {
                    let v = &mut velocity[layer][t_ix].values;
                    let w = &mut net.weights[layer][t_ix].values;
                    for i in 0..v.len() {
                        v[i] = config.momentum * v[i] - config.learning_rate * grad.values[i];
                        w[i] += v[i];
                    }
                }
            }
        }
        let train_loss = loss_sum / seen as f64;
        let dev_loss = if dev_samples.is_empty() {
            train_loss
        } else {
            net.batch_loss(&dev_samples)?
        };
        if !dev_loss.is_finite() {
            return Err(ConvNetError::Diverged {
                epoch,
                learning_rate: config.learning_rate,
            });
        }
        trace.push(EpochLoss {
            epoch,
            train_loss,
            dev_loss,
        });
    }
    Ok(TrainOutcome { network: net, trace })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    /// A network with the target spec: pretrained trunk, fresh head.
    pub network: Network,
    pub trace: Vec<EpochLoss>,
    /// Top-1 accuracy on the proxy dev set, if one was held back.
    pub dev_accuracy: Option<f64>,
}

/// Pretrain the trunk of `net` on a proxy classification task (landcover
/// fractions as soft 5-class targets), then return a network with the
/// original spec: trained trunk weights, freshly initialized head. The head
/// is whatever follows the last parameter-free pooling stage — concretely,
/// the final Dense layer.
pub fn pretrain_proxy(
    net: &Network,
    examples: &[LabeledTile],
    config: &TrainConfig,
) -> Result<PretrainOutcome, ConvNetError> {
    config.validate()?;
    if examples.is_empty() {
        return Err(ConvNetError::EmptyTrainingSet);
    }
    let classes = examples[0].target.len();
    let head_ix = head_dense_index(&net.spec)?;

    // Same trunk, re-headed for the proxy task.
    let mut proxy_spec = net.spec.clone();
    proxy_spec.layers[head_ix] = LayerSpec::Dense {
        out_features: classes,
    };
    let proxy_net = Network::new(proxy_spec, config.seed)?;
    let outcome = train(&proxy_net, examples, config)?;

    // Dev accuracy of the proxy task (argmax prediction vs argmax label).
    let (dev_ix, _) = dev_split(examples.len(), config.dev_fraction, config.seed);
    let dev_accuracy = if dev_ix.is_empty() {
        None
    } else {
        let tiles: Vec<&TileImage> = dev_ix.iter().map(|&i| &examples[i].tile).collect();
        let preds = outcome.network.forward_batch(&tiles)?;
        let hits = preds
            .iter()
            .zip(dev_ix.iter())
            .filter(|(p, &i)| argmax(p) == argmax(&examples[i].target))
            .count();
        Some(hits as f64 / dev_ix.len() as f64)
    };

    // Transplant the trunk into a fresh network with the original head.
    let mut result = Network::new(net.spec.clone(), config.seed)?;
    for layer in 0..result.weights.len() {
        if layer != head_ix {
            result.weights[layer] = outcome.network.weights[layer].clone();
        }
    }
    // Re-head: a distinct seeded stream so the head is not a copy of the
    // original initialization.
    for (t_ix, tensor) in result.weights[head_ix].iter_mut().enumerate() {
        if t_ix % 2 == 0 {
            let fan_in: usize = tensor.shape[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            let mut rng = Stream::new(config.seed, "proxy-rehead", &[t_ix as u64]);
            for v in tensor.values.iter_mut() {
                *v = std * rng.normal();
            }
        } else {
            tensor.values.fill(0.0);
        }
    }
    Ok(PretrainOutcome {
        network: result,
        trace: outcome.trace,
        dev_accuracy,
    })
}

fn head_dense_index(spec: &NetworkSpec) -> Result<usize, ConvNetError> {
    spec.layers
        .iter()
        .rposition(|l| matches!(l, LayerSpec::Dense { .. }))
        .ok_or_else(|| ConvNetError::InvalidSpec {
            layer: spec.layers.len(),
            message: "pretraining needs a Dense head to replace".into(),
        })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Write the per-epoch loss trace.
pub fn write_loss_trace_csv(path: &Path, trace: &[EpochLoss]) -> Result<(), ConvNetError> {
    let io_err = |source| ConvNetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    writeln!(out, "epoch,train_loss,dev_loss").map_err(io_err)?;
    for row in trace {
        writeln!(out, "{},{},{}", row.epoch, row.train_loss, row.dev_loss).map_err(io_err)?;
    }
    out.flush().map_err(io_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> NetworkSpec {
        NetworkSpec {
            input: vec![3, 8, 8],
            layers: vec![
                LayerSpec::Conv {
                    kernel: 3,
                    out_channels: 4,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { out_features: 3 },
                LayerSpec::Softmax,
            ],
        }
    }

    fn examples(n: usize, seed: u64) -> Vec<LabeledTile> {
        let mut rng = Stream::new(seed, "train-test-examples", &[]);
        (0..n)
            .map(|_| {
                let pixels = (0..3 * 8 * 8).map(|_| rng.uniform()).collect();
                let raw = [rng.uniform(), rng.uniform(), rng.uniform()];
                let sum: f64 = raw.iter().sum();
                LabeledTile {
                    tile: TileImage::new(8, 8, 3, pixels).unwrap(),
                    target: raw.map(|v| v / sum).to_vec(),
                }
            })
            .collect()
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            batch_size: 8,
            epochs: 3,
            seed: 7,
            dev_fraction: 0.1,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation_names_fields() {
        let mut c = quick_config();
        c.learning_rate = 0.0;
        assert!(matches!(
            c.validate(),
            Err(ConvNetError::InvalidTrainConfig { field: "learning_rate", .. })
        ));
        let mut c = quick_config();
        c.momentum = 1.0;
        assert!(matches!(
            c.validate(),
            Err(ConvNetError::InvalidTrainConfig { field: "momentum", .. })
        ));
        let mut c = quick_config();
        c.mode = TrainMode::FineTune;
        c.input_bands = 4;
        assert!(matches!(
            c.validate(),
            Err(ConvNetError::InvalidTrainConfig { field: "input_bands", .. })
        ));
    }

    #[test]
    fn vanishing_learning_rate_leaves_weights_bit_identical() {
        // Smallest positive f64: every update lr*g underflows to an exact
        // zero step, so training must be a bit-identical no-op.
        let net = Network::new(spec(), 1).unwrap();
        let config = TrainConfig {
            learning_rate: f64::from_bits(1),
            epochs: 1,
            ..quick_config()
        };
        let outcome = train(&net, &examples(12, 1), &config).unwrap();
        assert_eq!(outcome.network.weights, net.weights);
    }

    #[test]
    fn training_is_deterministic() {
        let net = Network::new(spec(), 2).unwrap();
        let ex = examples(24, 2);
        let a = train(&net, &ex, &quick_config()).unwrap();
        let b = train(&net, &ex, &quick_config()).unwrap();
        assert_eq!(a.network, b.network);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.len(), 3);
    }

    #[test]
    fn training_reduces_loss_on_a_learnable_task() {
        // Brightness-coded targets: dark tiles lean on bucket 0, bright on 2.
        let mut rng = Stream::new(9, "learnable", &[]);
        let ex: Vec<LabeledTile> = (0..40)
            .map(|i| {
                let level = (i % 4) as f64 / 4.0;
                let pixels = (0..3 * 8 * 8)
                    .map(|_| (level + 0.1 * rng.uniform()).min(1.0))
                    .collect();
                let t = [1.0 - level, level.min(1.0 - level), level];
                let sum: f64 = t.iter().sum();
                LabeledTile {
                    tile: TileImage::new(8, 8, 3, pixels).unwrap(),
                    target: t.map(|v| v / sum).to_vec(),
                }
            })
            .collect();
        let net = Network::new(spec(), 3).unwrap();
        let config = TrainConfig {
            epochs: 30,
            dev_fraction: 0.0,
            ..quick_config()
        };
        let outcome = train(&net, &ex, &config).unwrap();
        let first = outcome.trace.first().unwrap().train_loss;
        let last = outcome.trace.last().unwrap().train_loss;
        assert!(last < first, "loss did not fall: {first} -> {last}");
    }

    #[test]
    fn finetune_keeps_frozen_prefix_bit_identical() {
        let net = Network::new(spec(), 4).unwrap();
        let config = TrainConfig {
            mode: TrainMode::FineTune,
            frozen_prefix_layers: 4,
            epochs: 4,
            ..quick_config()
        };
        let outcome = train(&net, &examples(20, 4), &config).unwrap();
        for layer in 0..4 {
            assert_eq!(outcome.network.weights[layer], net.weights[layer]);
        }
        assert_ne!(outcome.network.weights[4], net.weights[4]);
    }

    #[test]
    fn divergence_reports_epoch_and_learning_rate() {
        // Large enough that after one update the product of any two updated
        // weights overflows f64, so the next forward pass yields NaN logits.
        let net = Network::new(spec(), 5).unwrap();
        let config = TrainConfig {
            learning_rate: 1e200,
            momentum: 0.0,
            epochs: 10,
            ..quick_config()
        };
        match train(&net, &examples(16, 5), &config) {
            Err(ConvNetError::Diverged { epoch, learning_rate }) => {
                assert!(epoch >= 1);
                assert_eq!(learning_rate, 1e200);
            }
            other => panic!("expected divergence, got {:?}", other.map(|_| "ok")),
        }
    }

    #[test]
    fn dev_split_uses_floor_counts() {
        let (dev, train) = dev_split(25, 0.1, 3);
        assert_eq!(dev.len(), 2);
        assert_eq!(train.len(), 23);
        let mut all: Vec<usize> = dev.iter().chain(train.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..25).collect::<Vec<_>>());
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let net = Network::new(spec(), 6).unwrap();
        assert!(matches!(
            train(&net, &[], &quick_config()),
            Err(ConvNetError::EmptyTrainingSet)
        ));
    }

    #[test]
    fn pretrain_returns_original_head_shape_with_new_trunk() {
        let net = Network::new(spec(), 7).unwrap();
        let proxy_examples: Vec<LabeledTile> = examples(20, 7)
            .into_iter()
            .map(|mut ex| {
                ex.target = vec![0.2, 0.2, 0.2, 0.2, 0.2];
                ex
            })
            .collect();
        let config = TrainConfig {
            epochs: 2,
            ..quick_config()
        };
        let outcome = pretrain_proxy(&net, &proxy_examples, &config).unwrap();
        assert_eq!(outcome.network.spec, net.spec);
        for (a, b) in outcome.network.weights.iter().zip(&net.weights) {
            for (ta, tb) in a.iter().zip(b) {
                assert_eq!(ta.shape, tb.shape);
            }
        }
        // Trunk trained away from the initial weights; head freshly drawn.
        assert_ne!(outcome.network.weights[0], net.weights[0]);
        assert_ne!(outcome.network.weights[4], net.weights[4]);
        assert!(outcome.dev_accuracy.is_some());
    }

    #[test]
    fn loss_trace_csv_has_the_documented_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss_trace.csv");
        let trace = vec![
            EpochLoss {
                epoch: 1,
                train_loss: 1.5,
                dev_loss: 1.6,
            },
            EpochLoss {
                epoch: 2,
                train_loss: 1.25,
                dev_loss: 1.31,
            },
        ];
        write_loss_trace_csv(&path, &trace).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "epoch,train_loss,dev_loss\n1,1.5,1.6\n2,1.25,1.31\n");
    }
}
