//! Parameter and FLOP accounting for dense and circulant layers, and
//! evaluation of per-block compression schemes against a baseline model.
//!
//! FLOP model (constants live in [`FlopConventions`]):
//!
//! - dense conv: `mul_add * W2 * H2 * W1 * H1 * (C0 / groups) * C2`
//! - fully connected: `mul_add * C0 * C2`
//! - circulant conv, per group with `R = ceil(C0g / N)`, `S = ceil(C2g / N)`:
//!   `W0 * H0 * R * fft(N)` input transforms, plus
//!   `W2 * H2 * W1 * H1 * R * S * mac(N)` spectral multiply-accumulates, plus
//!   `W2 * H2 * S * fft(N)` inverse transforms.
//!
//! `fft(1) = 0`, `fft(2) = radix2_real_pair / 2` (real-only butterflies), and
//! otherwise `fft(N) = round(fft_coefficient * N * log2 N)`. Only bins
//! `0..=N/2` of a real spectrum are multiplied; `mac(N)` costs `mul_add` for
//! each purely real bin (DC, and Nyquist when `N` is even) and
//! `complex_mul + complex_add` for each other bin. Kernel spectra are
//! precomputed once per weight update and not counted.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::circulant::{CompressionScheme, PartitionConfig};
use crate::error::{Error, Result};
use crate::nn::{Layer, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    CircConv,
    Fc,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::CircConv => "circconv",
            LayerKind::Fc => "fc",
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::CircConv)
    }
}

/// Shape of one layer for accounting purposes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Kernel spatial extent `(W1, H1)`; `(1, 1)` for fully connected layers.
    pub kernel: (usize, usize),
    /// `(C0, C2)`; for fully connected layers `(inputs, outputs)`.
    pub channels: (usize, usize),
    /// Input spatial dims `(W0, H0)`.
    pub input: (usize, usize),
    /// Output spatial dims `(W2, H2)`.
    pub output: (usize, usize),
    /// Partition size; 1 for dense layers.
    pub n: usize,
    pub groups: usize,
    /// Compression unit (block) this layer belongs to, if it is compressible.
    pub unit: Option<usize>,
}

impl LayerSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        name: &str,
        kernel: usize,
        c0: usize,
        c2: usize,
        input: usize,
        output: usize,
        groups: usize,
        unit: Option<usize>,
    ) -> Self {
        Self {
            name: name.to_string(),
            kind: LayerKind::Conv,
            kernel: (kernel, kernel),
            channels: (c0, c2),
            input: (input, input),
            output: (output, output),
            n: 1,
            groups,
            unit,
        }
    }

    pub fn fc(name: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            name: name.to_string(),
            kind: LayerKind::Fc,
            kernel: (1, 1),
            channels: (inputs, outputs),
            input: (1, 1),
            output: (1, 1),
            n: 1,
            groups: 1,
            unit: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c0, c2) = self.channels;
        let field = |f: &str| format!("{}.{f}", self.name);
        if c0 == 0 || c2 == 0 {
            return Err(Error::validation(field("channels"), "channel counts must be positive"));
        }
        if self.groups == 0 || c0 % self.groups != 0 || c2 % self.groups != 0 {
            return Err(Error::validation(
                field("groups"),
                format!("{} groups do not divide channels {:?}", self.groups, self.channels),
            ));
        }
        if self.n == 0 {
            return Err(Error::validation(field("n"), "partition size must be at least 1"));
        }
        let (cg0, cg2) = (c0 / self.groups, c2 / self.groups);
        if self.n > cg0.max(cg2) {
            return Err(Error::validation(
                field("n"),
                format!("partition size {} exceeds channels ({cg0}, {cg2})", self.n),
            ));
        }
        if self.kind == LayerKind::Fc && self.n != 1 {
            return Err(Error::validation(field("n"), "fully connected layers are not partitioned"));
        }
        Ok(())
    }

    fn group_partition(&self) -> PartitionConfig {
        let (c0, c2) = self.channels;
        PartitionConfig::new(self.n, c0 / self.groups, c2 / self.groups)
            .expect("validated layer has positive sizes")
    }

    /// This layer compressed with partition size `n` (1 restores dense).
    pub fn with_partition(&self, n: usize) -> LayerSpec {
        let mut out = self.clone();
        if self.kind.is_conv() {
            out.n = n;
            out.kind = if n > 1 { LayerKind::CircConv } else { LayerKind::Conv };
        }
        out
    }

    /// Dense equivalent of this layer.
    pub fn dense(&self) -> LayerSpec {
        self.with_partition(1)
    }
}

/// Declared FLOP-counting constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlopConventions {
    /// Real FLOPs per `N log2 N` for a length-`N` FFT (N > 2).
    pub fft_coefficient: f64,
    pub complex_mul: u64,
    pub complex_add: u64,
    /// A real multiply plus add.
    pub mul_add: u64,
    /// Forward plus inverse real-only length-2 transform.
    pub radix2_real_pair: u64,
}

impl Default for FlopConventions {
    fn default() -> Self {
        Self {
            fft_coefficient: 5.0,
            complex_mul: 6,
            complex_add: 2,
            mul_add: 2,
            radix2_real_pair: 4,
        }
    }
}

impl FlopConventions {
    pub fn fft(&self, n: usize) -> u64 {
        match n {
            0 | 1 => 0,
            2 => self.radix2_real_pair / 2,
            _ => (self.fft_coefficient * n as f64 * (n as f64).log2()).round() as u64,
        }
    }

    /// One half-spectrum multiply-accumulate of length `n`.
    pub fn spectral_mac(&self, n: usize) -> u64 {
        let half = n / 2 + 1;
        let real = if n.is_multiple_of(2) && n > 1 { 2 } else { 1 };
        real as u64 * self.mul_add + (half - real) as u64 * (self.complex_mul + self.complex_add)
    }

    pub fn describe(&self) -> String {
        format!(
            "dense: {ma}*W2*H2*W1*H1*(C0/g)*C2; fc: {ma}*C0*C2; circconv per group: \
             W0*H0*R*fft(N) + W2*H2*W1*H1*R*S*mac(N) + W2*H2*S*fft(N), \
             fft(1)=0, fft(2)={f2}, fft(N)={c}*N*log2(N); \
             mac(N)={ma} per real bin + {cm}+{ca} per complex bin over bins 0..=N/2",
            ma = self.mul_add,
            f2 = self.radix2_real_pair / 2,
            c = self.fft_coefficient,
            cm = self.complex_mul,
            ca = self.complex_add,
        )
    }
}

/// Weight parameters of a layer (biases excluded).
pub fn param_count(layer: &LayerSpec) -> u64 {
    let (w1, h1) = layer.kernel;
    let (c0, c2) = layer.channels;
    match layer.kind {
        LayerKind::Fc => (c0 * c2) as u64,
        LayerKind::Conv if layer.n == 1 => (w1 * h1 * (c0 / layer.groups) * c2) as u64,
        LayerKind::Conv | LayerKind::CircConv => {
            let p = layer.group_partition();
            (layer.groups * w1 * h1 * p.r() * p.n() * p.s()) as u64
        }
    }
}

/// Bias parameters of a layer.
pub fn bias_count(layer: &LayerSpec) -> u64 {
    layer.channels.1 as u64
}

/// FLOPs of one forward pass through a layer.
pub fn flop_count(layer: &LayerSpec, conv: &FlopConventions) -> u64 {
    let (w1, h1) = layer.kernel;
    let (c0, c2) = layer.channels;
    let (w0, h0) = layer.input;
    let (w2, h2) = layer.output;
    match layer.kind {
        LayerKind::Fc => conv.mul_add * (c0 * c2) as u64,
        LayerKind::Conv if layer.n == 1 => {
            conv.mul_add * (w2 * h2 * w1 * h1 * (c0 / layer.groups) * c2) as u64
        }
        LayerKind::Conv | LayerKind::CircConv => {
            let p = layer.group_partition();
            let (r, s, n) = (p.r() as u64, p.s() as u64, p.n());
            let forward = (w0 * h0) as u64 * r * conv.fft(n);
            let products = (w2 * h2 * w1 * h1) as u64 * r * s * conv.spectral_mac(n);
            let inverse = (w2 * h2) as u64 * s * conv.fft(n);
            layer.groups as u64 * (forward + products + inverse)
        }
    }
}

/// Named list of layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.layers.iter().try_for_each(LayerSpec::validate)
    }

    /// Accounting view of a network. Each convolution layer is its own
    /// compression unit, numbered in order.
    pub fn from_network(name: &str, net: &Network) -> Result<ModelSpec> {
        let (mut w, mut h, mut c) = net.input_dims();
        let mut layers = Vec::new();
        let mut unit = 0;
        for layer in net.layers() {
            let (kernel, c2, geometry, n) = match layer {
                Layer::DenseConv(d) => {
                    let (kw, kh, _, c2) = d.weight.dims();
                    ((kw, kh), c2, d.geometry, 1)
                }
                Layer::CircConv(cc) => {
                    let cfg = cc.base.config();
                    (cc.base.kernel_size(), cfg.c2(), cc.geometry, cfg.n())
                }
                Layer::FullyConnected(f) => {
                    layers.push(LayerSpec::fc(&f.name, f.weight.cols(), f.weight.rows()));
                    (w, h, c) = (1, 1, f.weight.rows());
                    continue;
                }
                Layer::GlobalAveragePool => {
                    (w, h) = (1, 1);
                    continue;
                }
                Layer::Relu => continue,
            };
            let (w2, h2) = geometry.output_dims((w, h), kernel)?;
            let spec = LayerSpec {
                name: layer.name().to_string(),
                kind: LayerKind::Conv,
                kernel,
                channels: (c, c2),
                input: (w, h),
                output: (w2, h2),
                n: 1,
                groups: 1,
                unit: Some(unit),
            }
            .with_partition(n);
            spec.validate()?;
            layers.push(spec);
            unit += 1;
            (w, h, c) = (w2, h2, c2);
        }
        Ok(ModelSpec {
            name: name.to_string(),
            layers,
        })
    }

    /// Every layer restored to dense.
    pub fn densified(&self) -> ModelSpec {
        ModelSpec {
            name: self.name.clone(),
            layers: self.layers.iter().map(LayerSpec::dense).collect(),
        }
    }

    /// Compression units in order of first appearance.
    pub fn units(&self) -> Vec<usize> {
        let mut units = Vec::new();
        for u in self.layers.iter().filter_map(|l| l.unit) {
            if !units.contains(&u) {
                units.push(u);
            }
        }
        units
    }

    /// The model with every compressible layer's partition set by `scheme`
    /// (one ratio per unit; ratio 1 leaves the layer as given).
    pub fn apply_scheme(&self, scheme: &CompressionScheme) -> Result<ModelSpec> {
        let units = self.units();
        if units.len() != scheme.len() {
            return Err(Error::Config(format!(
                "scheme {scheme} has {} entries but model `{}` has {} compressible units",
                scheme.len(),
                self.name,
                units.len()
            )));
        }
        let mut out = self.clone();
        for layer in &mut out.layers {
            if let Some(u) = layer.unit {
                let idx = units.iter().position(|&x| x == u).expect("unit listed");
                let ratio = scheme.ratios()[idx];
                if ratio > 1 {
                    *layer = layer.with_partition(ratio);
                }
            }
        }
        out.validate()?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCost {
    pub layer: String,
    pub kind: LayerKind,
    #[serde(rename = "N")]
    pub n: usize,
    pub params: u64,
    pub biases: u64,
    pub flops: u64,
    pub ratio_params: f64,
    pub ratio_flops: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Totals {
    pub params: u64,
    pub flops: u64,
    pub baseline_params: u64,
    pub baseline_flops: u64,
    pub ratio_params: f64,
    pub ratio_flops: f64,
}

impl Totals {
    fn new(params: u64, flops: u64, baseline_params: u64, baseline_flops: u64) -> Self {
        Self {
            params,
            flops,
            baseline_params,
            baseline_flops,
            ratio_params: percent(params, baseline_params),
            ratio_flops: percent(flops, baseline_flops),
        }
    }
}

/// Costs of a (possibly compressed) model relative to a baseline. Ratios are
/// percentages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub model: String,
    pub baseline: String,
    pub scheme: Option<String>,
    pub layers: Vec<LayerCost>,
    /// Convolution weights only, biases excluded.
    pub conv: Totals,
    /// Every layer, weights and biases.
    pub whole_model: Totals,
    pub flop_model: String,
}

fn percent(part: u64, whole: u64) -> f64 {
    if whole == 0 {
        100.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

/// Costs of `model` against `baseline`; layers are matched by name, falling
/// back to the layer's own dense form.
pub fn cost_report(model: &ModelSpec, baseline: &ModelSpec, conv: &FlopConventions) -> Result<CostReport> {
    model.validate()?;
    baseline.validate()?;
    let layers = model
        .layers
        .iter()
        .map(|l| {
            let reference = baseline
                .layers
                .iter()
                .find(|b| b.name == l.name)
                .cloned()
                .unwrap_or_else(|| l.dense());
            let params = param_count(l);
            let flops = flop_count(l, conv);
            LayerCost {
                layer: l.name.clone(),
                kind: l.kind,
                n: l.n,
                params,
                biases: bias_count(l),
                flops,
                ratio_params: percent(params, param_count(&reference)),
                ratio_flops: percent(flops, flop_count(&reference, conv)),
            }
        })
        .collect();

    let sum = |m: &ModelSpec, conv_only: bool| -> (u64, u64) {
        m.layers
            .iter()
            .filter(|l| !conv_only || l.kind.is_conv())
            .fold((0, 0), |(p, f), l| {
                let bias = if conv_only { 0 } else { bias_count(l) };
                (p + param_count(l) + bias, f + flop_count(l, conv))
            })
    };
    let (cp, cf) = sum(model, true);
    let (bcp, bcf) = sum(baseline, true);
    let (wp, wf) = sum(model, false);
    let (bwp, bwf) = sum(baseline, false);
    Ok(CostReport {
        model: model.name.clone(),
        baseline: baseline.name.clone(),
        scheme: None,
        layers,
        conv: Totals::new(cp, cf, bcp, bcf),
        whole_model: Totals::new(wp, wf, bwp, bwf),
        flop_model: conv.describe(),
    })
}

/// Applies `scheme` to `model` and reports costs against `baseline`.
pub fn evaluate_scheme(
    model: &ModelSpec,
    scheme: &CompressionScheme,
    baseline: &ModelSpec,
    conv: &FlopConventions,
) -> Result<CostReport> {
    let compressed = model.apply_scheme(scheme)?;
    let mut report = cost_report(&compressed, baseline, conv)?;
    report.scheme = Some(scheme.to_string());
    Ok(report)
}

impl CostReport {
    /// Machine-readable form.
    pub fn to_json(&self) -> Value {
        json!(self)
    }

    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "model: {}  baseline: {}  scheme: {}",
            self.model,
            self.baseline,
            self.scheme.as_deref().unwrap_or("-")
        );
        let _ = writeln!(
            out,
            "{:<12} {:<9} {:>4} {:>12} {:>16} {:>9} {:>9}",
            "layer", "kind", "N", "params", "flops", "params%", "flops%"
        );
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{:<12} {:<9} {:>4} {:>12} {:>16} {:>9.2} {:>9.2}",
                l.layer,
                l.kind.as_str(),
                l.n,
                l.params,
                l.flops,
                l.ratio_params,
                l.ratio_flops
            );
        }
        for (label, t) in [("conv-only", &self.conv), ("whole-model", &self.whole_model)] {
            let _ = writeln!(
                out,
                "{label:<12} params {} / {} = {:.2}%   flops {} / {} = {:.2}%",
                t.params, t.baseline_params, t.ratio_params, t.flops, t.baseline_flops, t.ratio_flops
            );
        }
        let _ = writeln!(out, "flop model: {}", self.flop_model);
        out
    }
}

/// Shape presets.
pub mod presets {
    use super::{LayerSpec, ModelSpec};

    pub const NAMES: &[&str] = &["alexnet", "alexnet-grouped", "alexnet-ungrouped", "resnet32"];

    pub fn by_name(name: &str) -> Option<ModelSpec> {
        match name {
            "alexnet" => Some(alexnet()),
            "alexnet-grouped" => Some(alexnet_grouped()),
            "alexnet-ungrouped" => Some(alexnet_ungrouped()),
            "resnet32" => Some(resnet32()),
            _ => None,
        }
    }

    fn alexnet_head(mut layers: Vec<LayerSpec>) -> Vec<LayerSpec> {
        layers.push(LayerSpec::fc("fc6", 6 * 6 * 256, 4096));
        layers.push(LayerSpec::fc("fc7", 4096, 4096));
        layers.push(LayerSpec::fc("fc8", 4096, 1000));
        layers
    }

    /// Single-tower AlexNet (64-192-384-384-256 filters, 224x224 input),
    /// one compression unit per conv layer.
    pub fn alexnet() -> ModelSpec {
        ModelSpec {
            name: "alexnet".into(),
            layers: alexnet_head(vec![
                LayerSpec::conv("conv1", 11, 3, 64, 224, 55, 1, Some(0)),
                LayerSpec::conv("conv2", 5, 64, 192, 27, 27, 1, Some(1)),
                LayerSpec::conv("conv3", 3, 192, 384, 13, 13, 1, Some(2)),
                LayerSpec::conv("conv4", 3, 384, 384, 13, 13, 1, Some(3)),
                LayerSpec::conv("conv5", 3, 384, 256, 13, 13, 1, Some(4)),
            ]),
        }
    }

    fn alexnet_two_tower(grouped: bool) -> Vec<LayerSpec> {
        let g = if grouped { 2 } else { 1 };
        alexnet_head(vec![
            LayerSpec::conv("conv1", 11, 3, 96, 227, 55, 1, Some(0)),
            LayerSpec::conv("conv2", 5, 96, 256, 27, 27, g, Some(1)),
            LayerSpec::conv("conv3", 3, 256, 384, 13, 13, 1, Some(2)),
            LayerSpec::conv("conv4", 3, 384, 384, 13, 13, g, Some(3)),
            LayerSpec::conv("conv5", 3, 384, 256, 13, 13, g, Some(4)),
        ])
    }

    /// Original two-GPU AlexNet (96-256-384-384-256, 227x227 input) with
    /// grouped conv2/conv4/conv5.
    pub fn alexnet_grouped() -> ModelSpec {
        ModelSpec {
            name: "alexnet-grouped".into(),
            layers: alexnet_two_tower(true),
        }
    }

    /// The two-GPU AlexNet shapes with all groups merged.
    pub fn alexnet_ungrouped() -> ModelSpec {
        ModelSpec {
            name: "alexnet-ungrouped".into(),
            layers: alexnet_two_tower(false),
        }
    }

    /// CIFAR ResNet-32 split into 15 compression units: unit 1 holds the stem
    /// plus the first residual block; units 6 and 11 hold the downsampling
    /// blocks with their 1x1 projection shortcuts.
    pub fn resnet32() -> ModelSpec {
        let mut layers = vec![LayerSpec::conv("stem", 3, 3, 16, 32, 32, 1, Some(0))];
        let stages = [(16usize, 32usize), (32, 16), (64, 8)];
        let mut unit = 0;
        for (stage, &(width, size)) in stages.iter().enumerate() {
            for block in 0..5 {
                let name = |k: &str| format!("b{}.{k}", unit + 1);
                if stage > 0 && block == 0 {
                    let prev = stages[stage - 1].0;
                    let prev_size = stages[stage - 1].1;
                    layers.push(LayerSpec::conv(&name("conv1"), 3, prev, width, prev_size, size, 1, Some(unit)));
                    layers.push(LayerSpec::conv(&name("conv2"), 3, width, width, size, size, 1, Some(unit)));
                    layers.push(LayerSpec::conv(&name("proj"), 1, prev, width, prev_size, size, 1, Some(unit)));
                } else {
                    layers.push(LayerSpec::conv(&name("conv1"), 3, width, width, size, size, 1, Some(unit)));
                    layers.push(LayerSpec::conv(&name("conv2"), 3, width, width, size, size, 1, Some(unit)));
                }
                unit += 1;
            }
        }
        layers.push(LayerSpec::fc("fc", 64, 10));
        ModelSpec {
            name: "resnet32".into(),
            layers,
        }
    }

    /// Block-wise schemes for ResNet-32, models 1 to 7.
    pub const RESNET32_SCHEMES: [[usize; 15]; 7] = [
        [1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 2, 2],
        [1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 2, 2, 2, 2],
        [1, 1, 2, 2, 2, 1, 2, 2, 2, 2, 1, 2, 2, 2, 2],
        [1, 1, 2, 2, 2, 1, 2, 2, 2, 2, 1, 4, 4, 4, 4],
        [1, 1, 2, 2, 2, 1, 4, 4, 4, 4, 1, 4, 4, 4, 4],
        [1, 1, 4, 4, 4, 1, 4, 4, 4, 4, 1, 4, 4, 4, 4],
        [1, 1, 4, 4, 4, 1, 8, 8, 8, 8, 1, 16, 16, 16, 16],
    ];
}
