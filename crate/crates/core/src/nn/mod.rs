//! A small layer stack with circulant and dense convolutions, enough to train
//! from scratch and to convert a trained dense network and retrain it.

mod data;
mod sgd;
mod train;

pub use data::{PlantedTask, TaskConfig};
pub use sgd::{sgd_step, SgdConfig, SgdState};
pub use train::{
    convert_and_retrain, convert_network, evaluate, train, Conversion, LayerConversion, RetrainLog,
    StepRecord,
};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::circulant::{expand, CirculantBaseTensor, PartitionConfig};
use crate::convops::{
    circ_backward_input_with, circ_backward_weight, circ_forward_with, conv_naive, conv_naive_backward_input,
    conv_naive_backward_weight, CircKernelSpectra, ConvGeometry,
};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor3, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct CircConvLayer {
    pub name: String,
    pub base: CirculantBaseTensor,
    pub bias: Vec<f64>,
    pub geometry: ConvGeometry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseConvLayer {
    pub name: String,
    pub weight: Tensor4,
    pub bias: Vec<f64>,
    pub geometry: ConvGeometry,
}

/// `y = W x + b` with `W` of shape `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct FullyConnectedLayer {
    pub name: String,
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    CircConv(CircConvLayer),
    DenseConv(DenseConvLayer),
    Relu,
    GlobalAveragePool,
    FullyConnected(FullyConnectedLayer),
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::CircConv(l) => &l.name,
            Layer::DenseConv(l) => &l.name,
            Layer::FullyConnected(l) => &l.name,
            Layer::Relu => "relu",
            Layer::GlobalAveragePool => "gap",
        }
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::CircConv(l) => vec![l.base.base_mut().as_mut_slice(), &mut l.bias],
            Layer::DenseConv(l) => vec![l.weight.as_mut_slice(), &mut l.bias],
            Layer::FullyConnected(l) => vec![l.weight.as_mut_slice(), &mut l.bias],
            Layer::Relu | Layer::GlobalAveragePool => Vec::new(),
        }
    }

    fn params(&self) -> Vec<&[f64]> {
        match self {
            Layer::CircConv(l) => vec![l.base.base().as_slice(), &l.bias],
            Layer::DenseConv(l) => vec![l.weight.as_slice(), &l.bias],
            Layer::FullyConnected(l) => vec![l.weight.as_slice(), &l.bias],
            Layer::Relu | Layer::GlobalAveragePool => Vec::new(),
        }
    }
}

/// Value flowing between layers.
#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    Map(Tensor3),
    Vector(Vec<f64>),
}

impl Activation {
    pub fn as_slice(&self) -> &[f64] {
        match self {
            Activation::Map(t) => t.as_slice(),
            Activation::Vector(v) => v,
        }
    }

    fn describe(&self) -> String {
        match self {
            Activation::Map(t) => format!("map {:?}", t.dims()),
            Activation::Vector(v) => format!("vector of {}", v.len()),
        }
    }
}

/// Loss attached to the network output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossHead {
    /// Softmax over the output vector, cross-entropy against a class label.
    SoftmaxCrossEntropy,
    /// `0.5 * ||y - t||^2` against a target of the output's size.
    SquaredError,
}

/// Per-sample supervision.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Labels(&'a [usize]),
    Values(&'a [Vec<f64>]),
}

impl Targets<'_> {
    fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Values(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input: (usize, usize, usize),
    layers: Vec<Layer>,
    head: LossHead,
    version: u64,
}

/// Activations saved by [`forward_pass`] for [`backward_pass`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[s][l]` is the input of layer `l` for sample `s`.
    inputs: Vec<Vec<Activation>>,
    outputs: Vec<Activation>,
    version: u64,
}

impl ForwardCache {
    /// Network outputs (logits), one per sample.
    pub fn outputs(&self) -> &[Activation] {
        &self.outputs
    }
}

/// Gradients for every free parameter, in [`Network::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            tensors: net.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

impl Network {
    pub fn new(input: (usize, usize, usize), layers: Vec<Layer>, head: LossHead) -> Result<Self> {
        let net = Self {
            input,
            layers,
            head,
            version: 0,
        };
        net.output_shape()?;
        Ok(net)
    }

    /// `conv(3x3, pad 1) -> relu -> global average pool -> fc`. With
    /// `partition = Some(n)` the convolution is block-circulant.
    pub fn classifier<R: Rng + ?Sized>(
        input: (usize, usize, usize),
        conv_channels: usize,
        classes: usize,
        partition: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let c0 = input.2;
        let geometry = ConvGeometry::padded(1);
        let conv = match partition {
            Some(n) => Layer::CircConv(CircConvLayer {
                name: "conv1".into(),
                base: CirculantBaseTensor::random_he(3, 3, PartitionConfig::new(n, c0, conv_channels)?, rng),
                bias: vec![0.0; conv_channels],
                geometry,
            }),
            None => {
                let std = (2.0 / (9 * c0) as f64).sqrt();
                let mut weight = Tensor4::random((3, 3, c0, conv_channels), rng);
                weight.as_mut_slice().iter_mut().for_each(|v| *v *= std);
                Layer::DenseConv(DenseConvLayer {
                    name: "conv1".into(),
                    weight,
                    bias: vec![0.0; conv_channels],
                    geometry,
                })
            }
        };
        let fc_std = (1.0 / conv_channels as f64).sqrt();
        let fc = FullyConnectedLayer {
            name: "fc".into(),
            weight: Matrix::from_fn(classes, conv_channels, |_, _| fc_std * rng.sample::<f64, _>(StandardNormal)),
            bias: vec![0.0; classes],
        };
        Self::new(
            input,
            vec![conv, Layer::Relu, Layer::GlobalAveragePool, Layer::FullyConnected(fc)],
            LossHead::SoftmaxCrossEntropy,
        )
    }

    pub fn input_dims(&self) -> (usize, usize, usize) {
        self.input
    }

    pub fn head(&self) -> LossHead {
        self.head
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable layer access; invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut Vec<Layer> {
        self.version += 1;
        &mut self.layers
    }

    /// Free parameters: for each parameterised layer its weight (the base
    /// tensor for circulant layers) then its bias.
    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    /// Mutable free parameters; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Shape of the network output; errors name the first inconsistent layer.
    pub fn output_shape(&self) -> Result<Activation> {
        let mut shape = Activation::Map(Tensor3::zeros(self.input.0, self.input.1, self.input.2));
        for layer in &self.layers {
            shape = layer_shape(layer, &shape)?;
        }
        Ok(shape)
    }

    /// Same network with every circulant layer replaced by its dense expansion.
    pub fn densified(&self) -> Network {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::CircConv(c) => {
                    let cfg = c.base.config();
                    Layer::DenseConv(DenseConvLayer {
                        name: c.name.clone(),
                        weight: expand(&c.base).with_channels(cfg.c0(), cfg.c2()),
                        bias: c.bias.clone(),
                        geometry: c.geometry,
                    })
                }
                other => other.clone(),
            })
            .collect();
        Network {
            input: self.input,
            layers,
            head: self.head,
            version: 0,
        }
    }
}

fn zero_like(a: &Activation) -> Activation {
    match a {
        Activation::Map(t) => Activation::Map(Tensor3::zeros(t.width(), t.height(), t.channels())),
        Activation::Vector(v) => Activation::Vector(vec![0.0; v.len()]),
    }
}

fn layer_shape(layer: &Layer, input: &Activation) -> Result<Activation> {
    let mismatch = |want: String| {
        Error::shape(format!(
            "layer `{}` expects {want}, got {}",
            layer.name(),
            input.describe()
        ))
    };
    match (layer, input) {
        (Layer::CircConv(c), Activation::Map(t)) => {
            let cfg = c.base.config();
            if t.channels() != cfg.c0() {
                return Err(mismatch(format!("{} channels", cfg.c0())));
            }
            if c.bias.len() != cfg.c2() {
                return Err(mismatch(format!("bias of length {}", cfg.c2())));
            }
            let (w2, h2) = c.geometry.output_dims((t.width(), t.height()), c.base.kernel_size())?;
            Ok(Activation::Map(Tensor3::zeros(w2, h2, cfg.c2())))
        }
        (Layer::DenseConv(d), Activation::Map(t)) => {
            let (kw, kh, c0, c2) = d.weight.dims();
            if t.channels() != c0 || d.bias.len() != c2 {
                return Err(mismatch(format!("{c0} channels")));
            }
            let (w2, h2) = d.geometry.output_dims((t.width(), t.height()), (kw, kh))?;
            Ok(Activation::Map(Tensor3::zeros(w2, h2, c2)))
        }
        (Layer::Relu, a) => Ok(zero_like(a)),
        (Layer::GlobalAveragePool, Activation::Map(t)) => Ok(Activation::Vector(vec![0.0; t.channels()])),
        (Layer::FullyConnected(f), a) => {
            if a.as_slice().len() != f.weight.cols() || f.bias.len() != f.weight.rows() {
                return Err(mismatch(format!("{} inputs", f.weight.cols())));
            }
            Ok(Activation::Vector(vec![0.0; f.weight.rows()]))
        }
        (Layer::CircConv(_) | Layer::DenseConv(_) | Layer::GlobalAveragePool, Activation::Vector(_)) => {
            Err(mismatch("a feature map".into()))
        }
    }
}

fn add_bias(mut y: Tensor3, bias: &[f64]) -> Tensor3 {
    let (w, h, _) = y.dims();
    for i in 0..w {
        for j in 0..h {
            for (v, b) in y.pixel_mut(i, j).iter_mut().zip(bias) {
                *v += b;
            }
        }
    }
    y
}

fn bias_grad(grad_y: &Tensor3) -> Vec<f64> {
    let (w, h, c) = grad_y.dims();
    let mut out = vec![0.0; c];
    for i in 0..w {
        for j in 0..h {
            for (o, g) in out.iter_mut().zip(grad_y.pixel(i, j)) {
                *o += g;
            }
        }
    }
    out
}

/// Per-layer precomputed state shared across a batch.
enum Prepared {
    Circ(CircKernelSpectra),
    None,
}

fn apply(layer: &Layer, prepared: &Prepared, x: &Activation) -> Result<Activation> {
    layer_shape(layer, x)?;
    Ok(match (layer, x) {
        (Layer::CircConv(c), Activation::Map(t)) => {
            let Prepared::Circ(spectra) = prepared else {
                unreachable!("circulant layer prepared with spectra")
            };
            Activation::Map(add_bias(circ_forward_with(t, spectra, c.geometry)?, &c.bias))
        }
        (Layer::DenseConv(d), Activation::Map(t)) => {
            Activation::Map(add_bias(conv_naive(t, &d.weight, d.geometry)?, &d.bias))
        }
        (Layer::Relu, Activation::Map(t)) => {
            let mut y = t.clone();
            y.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            Activation::Map(y)
        }
        (Layer::Relu, Activation::Vector(v)) => Activation::Vector(v.iter().map(|x| x.max(0.0)).collect()),
        (Layer::GlobalAveragePool, Activation::Map(t)) => {
            let mut out = vec![0.0; t.channels()];
            let area = (t.width() * t.height()) as f64;
            for i in 0..t.width() {
                for j in 0..t.height() {
                    for (o, v) in out.iter_mut().zip(t.pixel(i, j)) {
                        *o += v;
                    }
                }
            }
            out.iter_mut().for_each(|v| *v /= area);
            Activation::Vector(out)
        }
        (Layer::FullyConnected(f), a) => {
            let xs = a.as_slice();
            Activation::Vector(
                (0..f.weight.rows())
                    .map(|o| f.bias[o] + (0..xs.len()).map(|i| f.weight.get(o, i) * xs[i]).sum::<f64>())
                    .collect(),
            )
        }
        _ => unreachable!("shape checked"),
    })
}

/// Runs every sample of `batch` through the network.
pub fn forward_pass(net: &Network, batch: &[Tensor3]) -> Result<ForwardCache> {
    let prepared: Vec<Prepared> = net
        .layers
        .iter()
        .map(|l| match l {
            Layer::CircConv(c) => Prepared::Circ(CircKernelSpectra::forward(&c.base)),
            _ => Prepared::None,
        })
        .collect();
    let mut inputs = Vec::with_capacity(batch.len());
    let mut outputs = Vec::with_capacity(batch.len());
    for (s, x) in batch.iter().enumerate() {
        if x.dims() != net.input {
            return Err(Error::shape(format!(
                "sample {s} has dims {:?}, network input is {:?}",
                x.dims(),
                net.input
            )));
        }
        let mut acts = Vec::with_capacity(net.layers.len());
        let mut current = Activation::Map(x.clone());
        for (layer, prep) in net.layers.iter().zip(&prepared) {
            let next = apply(layer, prep, &current)?;
            acts.push(current);
            current = next;
        }
        inputs.push(acts);
        outputs.push(current);
    }
    Ok(ForwardCache {
        inputs,
        outputs,
        version: net.version,
    })
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Loss of one sample and its gradient with respect to the output.
fn head_loss(head: LossHead, output: &[f64], target: Targets<'_>, s: usize) -> Result<(f64, Vec<f64>)> {
    match (head, target) {
        (LossHead::SoftmaxCrossEntropy, Targets::Labels(labels)) => {
            let label = labels[s];
            if label >= output.len() {
                return Err(Error::Config(format!(
                    "label {label} out of range for {} classes",
                    output.len()
                )));
            }
            let p = softmax(output);
            let max = output.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + output.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            let mut grad = p;
            grad[label] -= 1.0;
            Ok((lse - output[label], grad))
        }
        (LossHead::SquaredError, Targets::Values(values)) => {
            let t = &values[s];
            if t.len() != output.len() {
                return Err(Error::shape(format!(
                    "target of length {} for output of length {}",
                    t.len(),
                    output.len()
                )));
            }
            let grad: Vec<f64> = output.iter().zip(t).map(|(y, t)| y - t).collect();
            Ok((0.5 * grad.iter().map(|d| d * d).sum::<f64>(), grad))
        }
        _ => Err(Error::Config("targets do not match the loss head".into())),
    }
}

/// Mean loss over the batch held in `cache`.
pub fn batch_loss(net: &Network, cache: &ForwardCache, targets: Targets<'_>) -> Result<f64> {
    if targets.len() != cache.outputs.len() {
        return Err(Error::shape("targets and batch differ in length"));
    }
    let mut total = 0.0;
    for (s, out) in cache.outputs.iter().enumerate() {
        total += head_loss(net.head, out.as_slice(), targets, s)?.0;
    }
    Ok(total / cache.outputs.len().max(1) as f64)
}

/// Mean loss over the batch and its gradient with respect to every free
/// parameter. Circulant layers receive gradients for their base tensors only.
pub fn backward_pass(net: &Network, cache: &ForwardCache, targets: Targets<'_>) -> Result<(f64, Gradients)> {
    if cache.version != net.version {
        return Err(Error::Contract(
            "forward cache is stale: network parameters changed since the forward pass".into(),
        ));
    }
    if targets.len() != cache.outputs.len() {
        return Err(Error::shape("targets and batch differ in length"));
    }
    let batch = cache.outputs.len();
    let reversed: Vec<Option<CircKernelSpectra>> = net
        .layers
        .iter()
        .map(|l| match l {
            Layer::CircConv(c) => Some(CircKernelSpectra::reversed(&c.base)),
            _ => None,
        })
        .collect();
    // parameter slot of each layer's first tensor
    let mut slots = Vec::with_capacity(net.layers.len());
    let mut next = 0;
    for l in &net.layers {
        slots.push(next);
        next += l.params().len();
    }

    let mut grads = Gradients::zeros_like(net);
    let mut total = 0.0;
    for s in 0..batch {
        let (loss, g_out) = head_loss(net.head, cache.outputs[s].as_slice(), targets, s)?;
        total += loss;
        let mut grad = match &cache.outputs[s] {
            Activation::Map(t) => Activation::Map(Tensor3::from_vec(t.dims(), g_out)?),
            Activation::Vector(_) => Activation::Vector(g_out),
        };
        for (l, layer) in net.layers.iter().enumerate().rev() {
            let x = &cache.inputs[s][l];
            let need_input_grad = l > 0;
            grad = match (layer, x, grad) {
                (Layer::CircConv(c), Activation::Map(xt), Activation::Map(gy)) => {
                    let cfg = c.base.config();
                    let gw = circ_backward_weight(xt, &gy, c.base.kernel_size(), cfg, c.geometry)?;
                    accumulate(&mut grads.tensors[slots[l]], gw.base().as_slice());
                    accumulate(&mut grads.tensors[slots[l] + 1], &bias_grad(&gy));
                    if need_input_grad {
                        let spectra = reversed[l].as_ref().expect("circulant layer");
                        Activation::Map(circ_backward_input_with(
                            &gy,
                            spectra,
                            (xt.width(), xt.height()),
                            c.geometry,
                        )?)
                    } else {
                        Activation::Vector(Vec::new())
                    }
                }
                (Layer::DenseConv(d), Activation::Map(xt), Activation::Map(gy)) => {
                    let (kw, kh, _, _) = d.weight.dims();
                    let gw = conv_naive_backward_weight(xt, &gy, (kw, kh), d.geometry)?;
                    accumulate(&mut grads.tensors[slots[l]], gw.as_slice());
                    accumulate(&mut grads.tensors[slots[l] + 1], &bias_grad(&gy));
                    if need_input_grad {
                        Activation::Map(conv_naive_backward_input(
                            &gy,
                            &d.weight,
                            (xt.width(), xt.height()),
                            d.geometry,
                        )?)
                    } else {
                        Activation::Vector(Vec::new())
                    }
                }
                (Layer::Relu, x, g) => {
                    let mask = x.as_slice();
                    match g {
                        Activation::Map(mut t) => {
                            t.as_mut_slice()
                                .iter_mut()
                                .zip(mask)
                                .for_each(|(g, &v)| if v <= 0.0 { *g = 0.0 });
                            Activation::Map(t)
                        }
                        Activation::Vector(mut v) => {
                            v.iter_mut().zip(mask).for_each(|(g, &m)| if m <= 0.0 { *g = 0.0 });
                            Activation::Vector(v)
                        }
                    }
                }
                (Layer::GlobalAveragePool, Activation::Map(xt), g) => {
                    let area = (xt.width() * xt.height()) as f64;
                    let gv = g.as_slice();
                    let t = Tensor3::from_fn(xt.dims(), |_, _, c| gv[c] / area);
                    Activation::Map(t)
                }
                (Layer::FullyConnected(f), x, g) => {
                    let xs = x.as_slice();
                    let gv = g.as_slice();
                    let (rows, cols) = (f.weight.rows(), f.weight.cols());
                    let gw = &mut grads.tensors[slots[l]];
                    for o in 0..rows {
                        for i in 0..cols {
                            gw[o * cols + i] += gv[o] * xs[i];
                        }
                    }
                    accumulate(&mut grads.tensors[slots[l] + 1], gv);
                    let dx: Vec<f64> = (0..cols)
                        .map(|i| (0..rows).map(|o| f.weight.get(o, i) * gv[o]).sum())
                        .collect();
                    match x {
                        Activation::Map(t) => Activation::Map(Tensor3::from_vec(t.dims(), dx)?),
                        Activation::Vector(_) => Activation::Vector(dx),
                    }
                }
                (layer, _, _) => {
                    return Err(Error::Contract(format!(
                        "cached activation does not match layer `{}`",
                        layer.name()
                    )))
                }
            };
        }
    }
    let scale = 1.0 / batch.max(1) as f64;
    for t in &mut grads.tensors {
        t.iter_mut().for_each(|v| *v *= scale);
    }
    Ok((total * scale, grads))
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circulant::fold_dense_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_net(seed: u64, partition: Option<usize>) -> Network {
        Network::classifier((5, 4, 4), 6, 3, partition, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn batch(seed: u64, n: usize) -> Vec<Tensor3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Tensor3::random((5, 4, 4), &mut rng)).collect()
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let mut net = tiny_net(1, Some(2));
        for p in net.params_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        if let Layer::FullyConnected(f) = &mut net.layers_mut()[3] {
            f.bias = vec![0.5, -1.0, 2.0];
        }
        let cache = forward_pass(&net, &batch(2, 2)).unwrap();
        for out in cache.outputs() {
            assert_eq!(out.as_slice(), &[0.5, -1.0, 2.0]);
            let p = softmax(out.as_slice());
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let net = tiny_net(1, None);
        let err = forward_pass(&net, &[Tensor3::zeros(5, 4, 3)]).unwrap_err();
        assert!(err.to_string().contains("network input"));
        let bad = Network::new(
            (4, 4, 2),
            vec![Layer::FullyConnected(FullyConnectedLayer {
                name: "head".into(),
                weight: Matrix::zeros(2, 5),
                bias: vec![0.0; 2],
            })],
            LossHead::SoftmaxCrossEntropy,
        );
        assert!(bad.unwrap_err().to_string().contains("`head`"));
    }

    #[test]
    fn circulant_net_matches_dense_twin() {
        let net = tiny_net(3, Some(2));
        let twin = net.densified();
        let xs = batch(4, 3);
        let a = forward_pass(&net, &xs).unwrap();
        let b = forward_pass(&twin, &xs).unwrap();
        for (x, y) in a.outputs().iter().zip(b.outputs()) {
            for (u, v) in x.as_slice().iter().zip(y.as_slice()) {
                assert!((u - v).abs() < 1e-10);
            }
        }
        let labels = [0, 2, 1];
        let (la, ga) = backward_pass(&net, &a, Targets::Labels(&labels)).unwrap();
        let (lb, gb) = backward_pass(&twin, &b, Targets::Labels(&labels)).unwrap();
        assert!((la - lb).abs() < 1e-10);
        let Layer::CircConv(c) = &net.layers()[0] else { panic!() };
        let cfg = c.base.config();
        let dense_grad = Tensor4::from_vec((3, 3, 4, 6), gb.tensors[0].clone())
            .unwrap()
            .with_channels(cfg.padded_c0(), cfg.padded_c2());
        let folded = fold_dense_gradient(&dense_grad, cfg).unwrap();
        for (u, v) in ga.tensors[0].iter().zip(folded.base().as_slice()) {
            assert!((u - v).abs() < 1e-10);
        }
        for k in 1..ga.tensors.len() {
            for (u, v) in ga.tensors[k].iter().zip(&gb.tensors[k]) {
                assert!((u - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for partition in [Some(2), Some(3), None] {
            let net = tiny_net(5, partition);
            let xs = batch(6, 2);
            let labels = [1, 2];
            let cache = forward_pass(&net, &xs).unwrap();
            let (_, grads) = backward_pass(&net, &cache, Targets::Labels(&labels)).unwrap();
            let h = 1e-5;
            let shapes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
            for (t, &len) in shapes.iter().enumerate() {
                for i in (0..len).step_by(5) {
                    let mut plus = net.clone();
                    plus.params_mut()[t][i] += h;
                    let mut minus = net.clone();
                    minus.params_mut()[t][i] -= h;
                    let lp = batch_loss(&plus, &forward_pass(&plus, &xs).unwrap(), Targets::Labels(&labels)).unwrap();
                    let lm =
                        batch_loss(&minus, &forward_pass(&minus, &xs).unwrap(), Targets::Labels(&labels)).unwrap();
                    let fd = (lp - lm) / (2.0 * h);
                    let an = grads.tensors[t][i];
                    assert!(
                        (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3),
                        "{partition:?} tensor {t} index {i}: fd {fd} analytic {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn certain_prediction_has_zero_head_gradient() {
        let (loss, grad) = head_loss(LossHead::SoftmaxCrossEntropy, &[0.0, 800.0], Targets::Labels(&[1]), 0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| g.abs() == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut net = tiny_net(7, Some(2));
        let cache = forward_pass(&net, &batch(8, 1)).unwrap();
        net.params_mut()[0][0] += 1.0;
        assert!(matches!(
            backward_pass(&net, &cache, Targets::Labels(&[0])),
            Err(Error::Contract(_))
        ));
    }
}
