//! On-disk formats.
//!
//! A model file is a JSON manifest, a line reading `END-MANIFEST`, then the
//! parameter tensors as raw little-endian scalars in manifest order. Tensor
//! files use the same framing with a single blob. Scheme files are TOML
//! tables mapping convolution layer names to partition sizes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::circulant::{CirculantBaseTensor, CompressionScheme, PartitionConfig};
use crate::convops::ConvGeometry;
use crate::error::{Error, Result};
use crate::nn::{CircConvLayer, DenseConvLayer, FullyConnectedLayer, Layer, LossHead, Network};
use crate::tensor::{Matrix, Tensor3, Tensor4};

pub const MODEL_FORMAT: &str = "circconv-model/1";
pub const TENSOR_FORMAT: &str = "circconv-tensor/1";
const TERMINATOR: &[u8] = b"\nEND-MANIFEST\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn width(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadEntry {
    SoftmaxCrossEntropy,
    SquaredError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeometryEntry {
    pub pad_w: usize,
    pub pad_h: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
}

impl TensorEntry {
    fn count(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    /// `conv`, `circconv`, `relu`, `gap` or `fc`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<[usize; 2]>,
    /// `[inputs, outputs]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<[usize; 2]>,
    #[serde(rename = "N", default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<GeometryEntry>,
    #[serde(default)]
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub precision: Precision,
    pub endianness: String,
    pub input: [usize; 3],
    pub head: HeadEntry,
    pub layers: Vec<LayerEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::parse("manifest", e.to_string()))?;
        check_format(&value, MODEL_FORMAT)?;
        let m: Manifest = serde_json::from_value(value).map_err(|e| Error::parse("manifest", e.to_string()))?;
        if m.endianness != "little" {
            return Err(Error::validation("endianness", format!("expected `little`, found `{}`", m.endianness)));
        }
        Ok(m)
    }
}

fn check_format(value: &serde_json::Value, expected: &str) -> Result<()> {
    match value.get("format").and_then(|f| f.as_str()) {
        Some(f) if f == expected => Ok(()),
        Some(f) => Err(Error::Version {
            found: f.to_string(),
            expected: expected.to_string(),
        }),
        None => Err(Error::parse("format", "missing format field")),
    }
}

fn geometry_entry(g: ConvGeometry) -> GeometryEntry {
    GeometryEntry {
        pad_w: g.pad_w,
        pad_h: g.pad_h,
        stride: g.stride,
    }
}

fn describe(net: &Network, precision: Precision) -> Manifest {
    let layers = net
        .layers()
        .iter()
        .map(|layer| match layer {
            Layer::CircConv(c) => {
                let cfg = c.base.config();
                let (kw, kh) = c.base.kernel_size();
                LayerEntry {
                    name: c.name.clone(),
                    kind: "circconv".into(),
                    kernel: Some([kw, kh]),
                    channels: Some([cfg.c0(), cfg.c2()]),
                    n: Some(cfg.n()),
                    geometry: Some(geometry_entry(c.geometry)),
                    tensors: vec![
                        TensorEntry {
                            name: "base".into(),
                            dims: dims4(c.base.base().dims()),
                        },
                        TensorEntry {
                            name: "bias".into(),
                            dims: vec![c.bias.len()],
                        },
                    ],
                }
            }
            Layer::DenseConv(d) => {
                let (kw, kh, c0, c2) = d.weight.dims();
                LayerEntry {
                    name: d.name.clone(),
                    kind: "conv".into(),
                    kernel: Some([kw, kh]),
                    channels: Some([c0, c2]),
                    n: None,
                    geometry: Some(geometry_entry(d.geometry)),
                    tensors: vec![
                        TensorEntry {
                            name: "weight".into(),
                            dims: dims4(d.weight.dims()),
                        },
                        TensorEntry {
                            name: "bias".into(),
                            dims: vec![c2],
                        },
                    ],
                }
            }
            Layer::FullyConnected(f) => LayerEntry {
                name: f.name.clone(),
                kind: "fc".into(),
                kernel: None,
                channels: Some([f.weight.cols(), f.weight.rows()]),
                n: None,
                geometry: None,
                tensors: vec![
                    TensorEntry {
                        name: "weight".into(),
                        dims: vec![f.weight.rows(), f.weight.cols()],
                    },
                    TensorEntry {
                        name: "bias".into(),
                        dims: vec![f.bias.len()],
                    },
                ],
            },
            Layer::Relu => simple("relu"),
            Layer::GlobalAveragePool => simple("gap"),
        })
        .collect();
    let (w, h, c) = net.input_dims();
    Manifest {
        format: MODEL_FORMAT.into(),
        precision,
        endianness: "little".into(),
        input: [w, h, c],
        head: match net.head() {
            LossHead::SoftmaxCrossEntropy => HeadEntry::SoftmaxCrossEntropy,
            LossHead::SquaredError => HeadEntry::SquaredError,
        },
        layers,
    }
}

fn simple(kind: &str) -> LayerEntry {
    LayerEntry {
        name: kind.into(),
        kind: kind.into(),
        kernel: None,
        channels: None,
        n: None,
        geometry: None,
        tensors: Vec::new(),
    }
}

fn dims4(d: (usize, usize, usize, usize)) -> Vec<usize> {
    vec![d.0, d.1, d.2, d.3]
}

fn encode(values: &[f64], precision: Precision, out: &mut Vec<u8>) {
    for &v in values {
        match precision {
            Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
            Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
}

fn decode(bytes: &[u8], precision: Precision) -> Vec<f64> {
    match precision {
        Precision::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Precision::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    }
}

fn frame(manifest_text: &str, payload: &[u8]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(manifest_text.len() + TERMINATOR.len() + payload.len());
    bytes.extend_from_slice(manifest_text.as_bytes());
    bytes.extend_from_slice(TERMINATOR);
    bytes.extend_from_slice(payload);
    bytes
}

fn unframe(bytes: &[u8]) -> Result<(&str, &[u8])> {
    let at = bytes
        .windows(TERMINATOR.len())
        .position(|w| w == TERMINATOR)
        .ok_or_else(|| Error::parse("manifest", "missing END-MANIFEST line"))?;
    let text = std::str::from_utf8(&bytes[..at]).map_err(|e| Error::parse("manifest", e.to_string()))?;
    Ok((text, &bytes[at + TERMINATOR.len()..]))
}

/// Serializes a model to bytes.
pub fn encode_model(net: &Network, precision: Precision) -> Vec<u8> {
    let manifest = describe(net, precision);
    let mut payload = Vec::new();
    for p in net.params() {
        encode(p, precision, &mut payload);
    }
    frame(&manifest.to_text(), &payload)
}

pub fn save_model(net: &Network, path: &Path, precision: Precision) -> Result<()> {
    fs::write(path, encode_model(net, precision)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Network> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

/// Parses and fully validates a model.
pub fn decode_model(bytes: &[u8]) -> Result<Network> {
    let (text, payload) = unframe(bytes)?;
    let manifest = Manifest::parse(text)?;
    let width = manifest.precision.width();

    let mut cursor = 0;
    let mut blobs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(manifest.layers.len());
    for (i, layer) in manifest.layers.iter().enumerate() {
        let mut tensors = Vec::with_capacity(layer.tensors.len());
        for t in &layer.tensors {
            let field = format!("layers[{i}].{}", t.name);
            let expected = t
                .count()
                .checked_mul(width)
                .ok_or_else(|| Error::validation(&field, "element count overflows"))?;
            let available = payload.len() - cursor;
            if available < expected {
                return Err(Error::TruncatedBlob {
                    field,
                    expected,
                    found: available,
                });
            }
            tensors.push(decode(&payload[cursor..cursor + expected], manifest.precision));
            cursor += expected;
        }
        blobs.push(tensors);
    }
    if cursor != payload.len() {
        return Err(Error::validation(
            "payload",
            format!("{} trailing bytes after the last tensor", payload.len() - cursor),
        ));
    }

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, (entry, tensors)) in manifest.layers.iter().zip(blobs).enumerate() {
        layers.push(build_layer(i, entry, tensors)?);
    }
    let head = match manifest.head {
        HeadEntry::SoftmaxCrossEntropy => LossHead::SoftmaxCrossEntropy,
        HeadEntry::SquaredError => LossHead::SquaredError,
    };
    let [w, h, c] = manifest.input;
    Network::new((w, h, c), layers, head)
}

fn require<T: Copy>(value: Option<T>, field: &str) -> Result<T> {
    value.ok_or_else(|| Error::validation(field, "required for this layer kind"))
}

fn expect_tensors(i: usize, entry: &LayerEntry, names: &[&str], dims: &[Vec<usize>]) -> Result<()> {
    let found: Vec<&str> = entry.tensors.iter().map(|t| t.name.as_str()).collect();
    if found != names {
        return Err(Error::validation(
            format!("layers[{i}].tensors"),
            format!("expected {names:?}, found {found:?}"),
        ));
    }
    for (t, d) in entry.tensors.iter().zip(dims) {
        if &t.dims != d {
            return Err(Error::validation(
                format!("layers[{i}].{}", t.name),
                format!("dims {:?} do not match the layer, expected {d:?}", t.dims),
            ));
        }
    }
    Ok(())
}

fn build_layer(i: usize, entry: &LayerEntry, mut tensors: Vec<Vec<f64>>) -> Result<Layer> {
    let field = |name: &str| format!("layers[{i}].{name}");
    let geometry = |entry: &LayerEntry| -> Result<ConvGeometry> {
        let g = require(entry.geometry, &field("geometry"))?;
        if g.stride == 0 {
            return Err(Error::validation(field("geometry.stride"), "must be at least 1"));
        }
        Ok(ConvGeometry::new(g.pad_w, g.pad_h, g.stride))
    };
    Ok(match entry.kind.as_str() {
        "conv" => {
            let [kw, kh] = require(entry.kernel, &field("kernel"))?;
            let [c0, c2] = require(entry.channels, &field("channels"))?;
            expect_tensors(i, entry, &["weight", "bias"], &[vec![kw, kh, c0, c2], vec![c2]])?;
            let bias = tensors.pop().expect("two tensors");
            let weight = Tensor4::from_vec((kw, kh, c0, c2), tensors.pop().expect("two tensors"))
                .map_err(|e| Error::validation(field("weight"), e.to_string()))?;
            Layer::DenseConv(DenseConvLayer {
                name: entry.name.clone(),
                weight,
                bias,
                geometry: geometry(entry)?,
            })
        }
        "circconv" => {
            let [kw, kh] = require(entry.kernel, &field("kernel"))?;
            let [c0, c2] = require(entry.channels, &field("channels"))?;
            let n = require(entry.n, &field("N"))?;
            let cfg = PartitionConfig::new(n, c0, c2).map_err(|e| Error::validation(field("N"), e.to_string()))?;
            let base_dims = &entry.tensors.first().map(|t| t.dims.clone()).unwrap_or_default();
            if base_dims.len() == 4 && (!base_dims[2].is_multiple_of(n) || base_dims[3] * n != cfg.padded_c2()) {
                return Err(Error::validation(
                    field("N"),
                    format!("N={n} does not partition base dims {base_dims:?}"),
                ));
            }
            expect_tensors(
                i,
                entry,
                &["base", "bias"],
                &[vec![kw, kh, cfg.padded_c0(), cfg.s()], vec![c2]],
            )?;
            let bias = tensors.pop().expect("two tensors");
            let base = Tensor4::from_vec((kw, kh, cfg.padded_c0(), cfg.s()), tensors.pop().expect("two tensors"))
                .and_then(|t| CirculantBaseTensor::new(t, cfg))
                .map_err(|e| Error::validation(field("base"), e.to_string()))?;
            Layer::CircConv(CircConvLayer {
                name: entry.name.clone(),
                base,
                bias,
                geometry: geometry(entry)?,
            })
        }
        "fc" => {
            let [inputs, outputs] = require(entry.channels, &field("channels"))?;
            expect_tensors(i, entry, &["weight", "bias"], &[vec![outputs, inputs], vec![outputs]])?;
            let bias = tensors.pop().expect("two tensors");
            let w = tensors.pop().expect("two tensors");
            if w.iter().chain(&bias).any(|v| !v.is_finite()) {
                return Err(Error::validation(field("weight"), "non-finite value"));
            }
            Layer::FullyConnected(FullyConnectedLayer {
                name: entry.name.clone(),
                weight: Matrix::from_fn(outputs, inputs, |o, i| w[o * inputs + i]),
                bias,
            })
        }
        "relu" | "gap" => {
            expect_tensors(i, entry, &[], &[])?;
            if entry.kind == "relu" {
                Layer::Relu
            } else {
                Layer::GlobalAveragePool
            }
        }
        other => return Err(Error::validation(field("kind"), format!("unknown layer kind `{other}`"))),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TensorManifest {
    format: String,
    precision: Precision,
    endianness: String,
    dims: [usize; 3],
}

pub fn encode_tensor(t: &Tensor3, precision: Precision) -> Vec<u8> {
    let (w, h, c) = t.dims();
    let manifest = TensorManifest {
        format: TENSOR_FORMAT.into(),
        precision,
        endianness: "little".into(),
        dims: [w, h, c],
    };
    let mut payload = Vec::new();
    encode(t.as_slice(), precision, &mut payload);
    frame(&serde_json::to_string_pretty(&manifest).expect("serializes"), &payload)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor3> {
    let (text, payload) = unframe(bytes)?;
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::parse("manifest", e.to_string()))?;
    check_format(&value, TENSOR_FORMAT)?;
    let m: TensorManifest = serde_json::from_value(value).map_err(|e| Error::parse("manifest", e.to_string()))?;
    if m.endianness != "little" {
        return Err(Error::validation("endianness", format!("expected `little`, found `{}`", m.endianness)));
    }
    let [w, h, c] = m.dims;
    let expected = w * h * c * m.precision.width();
    if payload.len() < expected {
        return Err(Error::TruncatedBlob {
            field: "data".into(),
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::validation("payload", "trailing bytes after the tensor"));
    }
    Tensor3::from_vec((w, h, c), decode(payload, m.precision)).map_err(|e| Error::validation("data", e.to_string()))
}

pub fn save_tensor(t: &Tensor3, path: &Path, precision: Precision) -> Result<()> {
    fs::write(path, encode_tensor(t, precision)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor3> {
    decode_tensor(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Partition size per convolution layer name.
pub type SchemeMap = BTreeMap<String, usize>;

pub fn parse_scheme_file(text: &str) -> Result<SchemeMap> {
    let map: SchemeMap = toml::from_str(text).map_err(|e| Error::parse("scheme", e.to_string()))?;
    if let Some((name, _)) = map.iter().find(|(_, &n)| n == 0) {
        return Err(Error::validation(name.clone(), "partition size must be at least 1"));
    }
    Ok(map)
}

pub fn load_scheme_file(path: &Path) -> Result<SchemeMap> {
    parse_scheme_file(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn render_scheme_file(map: &SchemeMap) -> String {
    toml::to_string(map).expect("flat table serializes")
}

/// Orders a scheme map by the network's convolution layers. Layers absent
/// from the map stay at 1; names that match no convolution layer are errors.
pub fn scheme_for_network(net: &Network, map: &SchemeMap) -> Result<CompressionScheme> {
    let names: Vec<&str> = net
        .layers()
        .iter()
        .filter_map(|l| match l {
            Layer::DenseConv(d) => Some(d.name.as_str()),
            Layer::CircConv(c) => Some(c.name.as_str()),
            _ => None,
        })
        .collect();
    if let Some(unknown) = map.keys().find(|k| !names.contains(&k.as_str())) {
        return Err(Error::validation(unknown.clone(), "no convolution layer with this name"));
    }
    CompressionScheme::new(names.iter().map(|n| map.get(*n).copied().unwrap_or(1)).collect())
}
