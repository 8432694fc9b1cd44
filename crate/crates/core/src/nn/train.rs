use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{backward_pass, batch_loss, forward_pass, sgd_step, CircConvLayer, Layer, Network, SgdConfig, SgdState, Targets};
use crate::circulant::{project_tensor, CompressionScheme, PartitionConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

fn accuracy(outputs: &[super::Activation], labels: &[usize]) -> f64 {
    let hits = outputs
        .iter()
        .zip(labels)
        .filter(|(o, &l)| {
            o.as_slice()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                == Some(l)
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Mean cross-entropy and accuracy over a labelled set.
pub fn evaluate(net: &Network, inputs: &[Tensor3], labels: &[usize]) -> Result<(f64, f64)> {
    let cache = forward_pass(net, inputs)?;
    let loss = batch_loss(net, &cache, Targets::Labels(labels))?;
    Ok((loss, accuracy(cache.outputs(), labels)))
}

/// Runs `steps` minibatch SGD steps. Minibatches come from a per-epoch
/// shuffle seeded by `seed`; `on_step` sees the minibatch loss and accuracy.
pub fn train(
    net: &mut Network,
    inputs: &[Tensor3],
    labels: &[usize],
    cfg: &SgdConfig,
    steps: usize,
    seed: u64,
    mut on_step: impl FnMut(&Network, &StepRecord) -> bool,
) -> Result<usize> {
    cfg.validate()?;
    if inputs.len() != labels.len() || inputs.is_empty() {
        return Err(Error::shape("training inputs and labels must be non-empty and of equal length"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = SgdState::new(net);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let batch = cfg.batch_size.min(inputs.len());
    for step in 0..steps {
        if cursor + batch > order.len() {
            order = (0..inputs.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let xs: Vec<Tensor3> = idx.iter().map(|&i| inputs[i].clone()).collect();
        let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let cache = forward_pass(net, &xs)?;
        let (loss, grads) = backward_pass(net, &cache, Targets::Labels(&ys))?;
        if !loss.is_finite() {
            return Err(Error::Contract(format!("loss diverged at step {step}")));
        }
        let record = StepRecord {
            step,
            loss,
            accuracy: accuracy(cache.outputs(), &ys),
        };
        sgd_step(net, &grads, &mut state, cfg)?;
        if !on_step(net, &record) {
            return Ok(step + 1);
        }
    }
    Ok(steps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerConversion {
    pub layer: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub relative_error: f64,
    pub partially_padded_blocks: usize,
}

#[derive(Debug, Clone)]
pub struct Conversion {
    pub network: Network,
    pub layers: Vec<LayerConversion>,
}

/// Replaces convolution layers by their nearest block-circulant kernels.
/// `scheme` has one entry per convolution layer, in order; an entry of 1
/// keeps a dense layer dense.
pub fn convert_network(net: &Network, scheme: &CompressionScheme) -> Result<Conversion> {
    let convs = net
        .layers()
        .iter()
        .filter(|l| matches!(l, Layer::DenseConv(_) | Layer::CircConv(_)))
        .count();
    if convs != scheme.len() {
        return Err(Error::Config(format!(
            "scheme has {} entries but the network has {convs} convolution layers",
            scheme.len()
        )));
    }
    let mut ratios = scheme.ratios().iter();
    let mut layers = Vec::with_capacity(net.layers().len());
    let mut report = Vec::new();
    for layer in net.layers() {
        let converted = match layer {
            Layer::DenseConv(d) => {
                let n = *ratios.next().expect("counted");
                if n == 1 {
                    layer.clone()
                } else {
                    let (_, _, c0, c2) = d.weight.dims();
                    let projection = project_tensor(&d.weight, PartitionConfig::new(n, c0, c2)?)?;
                    report.push(LayerConversion {
                        layer: d.name.clone(),
                        n,
                        relative_error: projection.relative_error(),
                        partially_padded_blocks: projection.partially_padded_blocks,
                    });
                    Layer::CircConv(CircConvLayer {
                        name: d.name.clone(),
                        base: projection.base,
                        bias: d.bias.clone(),
                        geometry: d.geometry,
                    })
                }
            }
            Layer::CircConv(c) => {
                let n = *ratios.next().expect("counted");
                if n != c.base.config().n() {
                    return Err(Error::Config(format!(
                        "layer `{}` is already circulant with N={}, scheme asks for {n}",
                        c.name,
                        c.base.config().n()
                    )));
                }
                layer.clone()
            }
            other => other.clone(),
        };
        layers.push(converted);
    }
    Ok(Conversion {
        network: Network::new(net.input_dims(), layers, net.head())?,
        layers: report,
    })
}

/// Losses around a convert-then-retrain run, all on the same labelled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainLog {
    pub pre_conversion: f64,
    pub post_conversion: f64,
    pub post_retrain: f64,
    pub steps: usize,
    /// `(steps taken, loss)` at every evaluation point.
    pub history: Vec<(usize, f64)>,
    pub layers: Vec<LayerConversion>,
}

/// Converts `net` with `scheme`, then retrains for at most `max_steps`,
/// evaluating every `eval_every` steps. With `target_ratio = Some(t)` training
/// stops once the loss is at most `t` times the pre-conversion loss.
#[allow(clippy::too_many_arguments)]
pub fn convert_and_retrain(
    net: &Network,
    scheme: &CompressionScheme,
    inputs: &[Tensor3],
    labels: &[usize],
    cfg: &SgdConfig,
    max_steps: usize,
    eval_every: usize,
    target_ratio: Option<f64>,
    seed: u64,
) -> Result<(Network, RetrainLog)> {
    let eval_every = eval_every.max(1);
    let (pre, _) = evaluate(net, inputs, labels)?;
    let conversion = convert_network(net, scheme)?;
    let mut student = conversion.network;
    let (post, _) = evaluate(&student, inputs, labels)?;
    let mut history = vec![(0, post)];
    let mut err = None;
    let reached = |loss: f64| target_ratio.is_some_and(|t| loss <= t * pre);
    let steps = if reached(post) {
        0
    } else {
        train(&mut student, inputs, labels, cfg, max_steps, seed, |net, rec| {
            let taken = rec.step + 1;
            if taken % eval_every != 0 && taken != max_steps {
                return true;
            }
            match evaluate(net, inputs, labels) {
                Ok((loss, _)) => {
                    history.push((taken, loss));
                    !reached(loss)
                }
                Err(e) => {
                    err = Some(e);
                    false
                }
            }
        })?
    };
    if let Some(e) = err {
        return Err(e);
    }
    let (post_retrain, _) = evaluate(&student, inputs, labels)?;
    Ok((
        student,
        RetrainLog {
            pre_conversion: pre,
            post_conversion: post,
            post_retrain,
            steps,
            history,
            layers: conversion.layers,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circulant::is_block_circulant;
    use crate::nn::{PlantedTask, TaskConfig};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let task = PlantedTask::generate(&TaskConfig {
            dims: (8, 8, 4),
            train_samples: 64,
            eval_samples: 8,
            ..TaskConfig::default()
        })
        .unwrap();
        let run = || {
            let mut net =
                Network::classifier((8, 8, 4), 8, 4, Some(4), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let before = evaluate(&net, &task.train_inputs, &task.train_labels).unwrap().0;
            let mut log = Vec::new();
            train(&mut net, &task.train_inputs, &task.train_labels, &SgdConfig::default(), 60, 3, |_, r| {
                log.push(*r);
                true
            })
            .unwrap();
            let after = evaluate(&net, &task.train_inputs, &task.train_labels).unwrap().0;
            (before, after, log, net)
        };
        let (before, after, log, net) = run();
        assert!(after < before, "{after} !< {before}");
        assert_eq!(log.len(), 60);
        assert_eq!(run().3, net);
        let Layer::CircConv(c) = &net.layers()[0] else { panic!() };
        assert!(is_block_circulant(&crate::circulant::expand(&c.base), 4));
    }

    #[test]
    fn conversion_checks_scheme_length_and_keeps_ones_dense() {
        let net = Network::classifier((4, 4, 4), 8, 3, None, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(convert_network(&net, &CompressionScheme::new(vec![2, 2]).unwrap()).is_err());
        let same = convert_network(&net, &CompressionScheme::new(vec![1]).unwrap()).unwrap();
        assert_eq!(same.network.layers(), net.layers());
        let conv = convert_network(&net, &CompressionScheme::new(vec![4]).unwrap()).unwrap();
        assert!(matches!(conv.network.layers()[0], Layer::CircConv(_)));
        assert_eq!(conv.layers.len(), 1);
        assert!(conv.layers[0].relative_error > 0.0);
    }
}
