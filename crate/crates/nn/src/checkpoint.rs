//! Self-describing checkpoints in the safetensors container.
//!
//! The header metadata carries the architecture (`architecture` key) so a file
//! can be reloaded without the code that built it, including quantized layers
//! whose integer codes and per-row scales are stored as separate tensors.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Duration;

use half::f16;
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::layers::{
    BatchNorm2d, ClassToken, Conv2d, Dense, HalfLinear, LayerNorm, Linear, MultiHeadAttention, PositionEmbedding,
    Projection, QuantizedLinearInt8, TensorData,
};
use crate::network::{Network, Node, Op};
use crate::scalar::Scalar;

pub const ARCHITECTURE_KEY: &str = "architecture";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenseStorage {
    Float,
    Qint8,
    Float16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseSpec {
    pub in_features: usize,
    pub out_features: usize,
    pub bias: bool,
    pub storage: DenseStorage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub name: String,
    #[serde(flatten)]
    pub dense: DenseSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpSpec {
    Input,
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
        bias: bool,
    },
    Linear(DenseSpec),
    BatchNorm2d { channels: usize, eps: f64 },
    LayerNorm { dim: usize, eps: f64 },
    Attention {
        num_heads: usize,
        head_dim: usize,
        projections: Vec<ProjectionSpec>,
    },
    ClassToken { dim: usize },
    PositionEmbedding { tokens: usize, dim: usize },
    Relu,
    Gelu,
    Add,
    MaxPool2d { kernel: usize, stride: usize, padding: usize },
    GlobalAvgPool,
    Flatten,
    PatchTokens,
    SelectToken { index: usize },
    MeanTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub inputs: Vec<usize>,
    #[serde(flatten)]
    pub op: OpSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_us: Option<u64>,
}

/// Weight-free description of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub input_shape: Vec<usize>,
    pub nodes: Vec<NodeSpec>,
}

fn dense_spec<T: Scalar>(d: &Dense<T>) -> DenseSpec {
    DenseSpec {
        in_features: d.in_features(),
        out_features: d.out_features(),
        bias: d.bias().is_some(),
        storage: match d {
            Dense::Float(_) => DenseStorage::Float,
            Dense::Int8(_) => DenseStorage::Qint8,
            Dense::Half(_) => DenseStorage::Float16,
        },
    }
}

fn zeros<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

fn dense_skeleton<T: Scalar>(s: &DenseSpec) -> Dense<T> {
    let bias = s.bias.then(|| zeros(&[s.out_features]));
    let shape = (s.out_features, s.in_features);
    match s.storage {
        DenseStorage::Float => Dense::Float(Linear { weight: zeros(&[s.out_features, s.in_features]), bias }),
        DenseStorage::Qint8 => Dense::Int8(QuantizedLinearInt8 {
            weight: Array2::zeros(shape),
            scales: Array1::ones(s.out_features),
            bias,
        }),
        DenseStorage::Float16 => Dense::Half(HalfLinear { weight: Array2::from_elem(shape, f16::ZERO), bias }),
    }
}

impl ArchitectureSpec {
    pub fn of<T: Scalar>(net: &Network<T>) -> Self {
        let nodes = net
            .nodes()
            .iter()
            .map(|n| NodeSpec {
                name: n.name.clone(),
                inputs: n.inputs.clone(),
                delay_us: n.delay.map(|d| d.as_micros() as u64),
                op: match &n.op {
                    Op::Input => OpSpec::Input,
                    Op::Conv2d(c) => OpSpec::Conv2d {
                        in_channels: c.in_channels(),
                        out_channels: c.out_channels(),
                        kernel: c.kernel(),
                        stride: c.stride,
                        padding: c.padding,
                        groups: c.groups,
                        bias: c.bias.is_some(),
                    },
                    Op::Linear(d) => OpSpec::Linear(dense_spec(d)),
                    Op::BatchNorm2d(bn) => OpSpec::BatchNorm2d { channels: bn.channels(), eps: bn.eps },
                    Op::LayerNorm(ln) => OpSpec::LayerNorm { dim: ln.dim(), eps: ln.eps },
                    Op::Attention(a) => OpSpec::Attention {
                        num_heads: a.num_heads,
                        head_dim: a.head_dim,
                        projections: a
                            .projections()
                            .iter()
                            .map(|p| ProjectionSpec { name: p.name.clone(), dense: dense_spec(&p.dense) })
                            .collect(),
                    },
                    Op::ClassToken(c) => OpSpec::ClassToken { dim: c.token.len() },
                    Op::PositionEmbedding(p) => OpSpec::PositionEmbedding {
                        tokens: p.table.shape()[0],
                        dim: p.table.shape()[1],
                    },
                    Op::Relu => OpSpec::Relu,
                    Op::Gelu => OpSpec::Gelu,
                    Op::Add => OpSpec::Add,
                    Op::MaxPool2d { kernel, stride, padding } => OpSpec::MaxPool2d {
                        kernel: *kernel,
                        stride: *stride,
                        padding: *padding,
                    },
                    Op::GlobalAvgPool => OpSpec::GlobalAvgPool,
                    Op::Flatten => OpSpec::Flatten,
                    Op::PatchTokens => OpSpec::PatchTokens,
                    Op::SelectToken(i) => OpSpec::SelectToken { index: *i },
                    Op::MeanTokens => OpSpec::MeanTokens,
                },
            })
            .collect();
        Self { input_shape: net.input_shape().to_vec(), nodes }
    }

    /// Network with this architecture and all-zero tensors.
    pub fn skeleton<T: Scalar>(&self) -> Result<Network<T>> {
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let op = match &n.op {
                OpSpec::Input => Op::Input,
                OpSpec::Conv2d { in_channels, out_channels, kernel, stride, padding, groups, bias } => {
                    if *groups == 0 || in_channels % groups != 0 {
                        return Err(NnError::Checkpoint(format!("bad groups for `{}`", n.name)));
                    }
                    Op::Conv2d(Conv2d {
                        weight: zeros(&[*out_channels, in_channels / groups, kernel.0, kernel.1]),
                        bias: bias.then(|| zeros(&[*out_channels])),
                        stride: *stride,
                        padding: *padding,
                        groups: *groups,
                    })
                }
                OpSpec::Linear(d) => Op::Linear(dense_skeleton(d)),
                OpSpec::BatchNorm2d { channels, eps } => Op::BatchNorm2d(BatchNorm2d {
                    weight: zeros(&[*channels]),
                    bias: zeros(&[*channels]),
                    running_mean: zeros(&[*channels]),
                    running_var: zeros(&[*channels]),
                    eps: *eps,
                }),
                OpSpec::LayerNorm { dim, eps } => Op::LayerNorm(LayerNorm {
                    weight: zeros(&[*dim]),
                    bias: zeros(&[*dim]),
                    eps: *eps,
                }),
                OpSpec::Attention { num_heads, head_dim, projections } => {
                    let p: Vec<Projection<T>> = projections
                        .iter()
                        .map(|p| Projection { name: p.name.clone(), dense: dense_skeleton(&p.dense) })
                        .collect();
                    let [query, key, value, output]: [Projection<T>; 4] = p
                        .try_into()
                        .map_err(|_| NnError::Checkpoint(format!("`{}` needs 4 projections", n.name)))?;
                    Op::Attention(MultiHeadAttention {
                        query,
                        key,
                        value,
                        output,
                        num_heads: *num_heads,
                        head_dim: *head_dim,
                    })
                }
                OpSpec::ClassToken { dim } => Op::ClassToken(ClassToken { token: zeros(&[*dim]) }),
                OpSpec::PositionEmbedding { tokens, dim } => {
                    Op::PositionEmbedding(PositionEmbedding { table: zeros(&[*tokens, *dim]) })
                }
                OpSpec::Relu => Op::Relu,
                OpSpec::Gelu => Op::Gelu,
                OpSpec::Add => Op::Add,
                OpSpec::MaxPool2d { kernel, stride, padding } => Op::MaxPool2d {
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                },
                OpSpec::GlobalAvgPool => Op::GlobalAvgPool,
                OpSpec::Flatten => Op::Flatten,
                OpSpec::PatchTokens => Op::PatchTokens,
                OpSpec::SelectToken { index } => Op::SelectToken(*index),
                OpSpec::MeanTokens => Op::MeanTokens,
            };
            nodes.push(Node {
                name: n.name.clone(),
                op,
                inputs: n.inputs.clone(),
                delay: n.delay_us.map(Duration::from_micros),
            });
        }
        Network::new(nodes, self.input_shape.clone())
    }
}

fn float_bytes<T: Scalar>(a: &ArrayD<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(a.len() * T::width());
    for v in a.iter() {
        match T::DTYPE {
            crate::scalar::FloatDType::F32 => out.extend((v.as_f64() as f32).to_le_bytes()),
            crate::scalar::FloatDType::F64 => out.extend(v.as_f64().to_le_bytes()),
        }
    }
    out
}

fn float_dtype<T: Scalar>() -> Dtype {
    match T::DTYPE {
        crate::scalar::FloatDType::F32 => Dtype::F32,
        crate::scalar::FloatDType::F64 => Dtype::F64,
    }
}

/// Serialize a network and free-form metadata into safetensors bytes.
pub fn to_bytes<T: Scalar>(net: &Network<T>, metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut owned: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = Vec::new();
    for node in net.nodes() {
        for t in node.tensors() {
            let (dtype, bytes) = match t.data {
                TensorData::Float(a) => (float_dtype::<T>(), float_bytes(a)),
                TensorData::Int8(a) => (Dtype::I8, a.iter().map(|&v| v as u8).collect()),
                TensorData::Half(a) => (Dtype::F16, a.iter().flat_map(|v| v.to_le_bytes()).collect()),
                TensorData::F32(a) => (Dtype::F32, a.iter().flat_map(|v| v.to_le_bytes()).collect()),
            };
            owned.push((t.key, dtype, t.data.shape(), bytes));
        }
    }
    let views = owned
        .iter()
        .map(|(k, dtype, shape, bytes)| {
            TensorView::new(*dtype, shape.clone(), bytes)
                .map(|v| (k.clone(), v))
                .map_err(|e| NnError::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta: HashMap<String, String> = metadata.clone().into_iter().collect();
    let arch = serde_json::to_string(&ArchitectureSpec::of(net)).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    meta.insert(ARCHITECTURE_KEY.to_string(), arch);
    safetensors::serialize(views, Some(meta)).map_err(|e| NnError::Checkpoint(e.to_string()))
}

pub fn save<T: Scalar>(net: &Network<T>, path: &Path, metadata: &BTreeMap<String, String>) -> Result<()> {
    let bytes = to_bytes(net, metadata)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Header metadata of a safetensors buffer.
pub fn read_metadata(bytes: &[u8]) -> Result<BTreeMap<String, String>> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    Ok(meta.metadata().clone().unwrap_or_default().into_iter().collect())
}

/// Rebuild a network saved with [`save`] / [`to_bytes`].
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(Network<T>, BTreeMap<String, String>)> {
    let mut meta = read_metadata(bytes)?;
    let arch = meta
        .remove(ARCHITECTURE_KEY)
        .ok_or_else(|| NnError::Checkpoint("missing architecture metadata".into()))?;
    let arch: ArchitectureSpec = serde_json::from_str(&arch).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let mut net = arch.skeleton::<T>()?;
    let tensors = SafeTensors::deserialize(bytes).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let missing = fill(&mut net, &tensors)?;
    if let Some(first) = missing.into_iter().next() {
        return Err(NnError::MissingTensor(first));
    }
    Ok((net, meta))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(Network<T>, BTreeMap<String, String>)> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

fn squeeze_leading(shape: &[usize]) -> &[usize] {
    let start = shape.iter().position(|&d| d != 1).unwrap_or(shape.len().saturating_sub(1));
    &shape[start..]
}

fn check_shape(key: &str, want: &[usize], got: &[usize]) -> Result<()> {
    if want == got || squeeze_leading(want) == squeeze_leading(got) {
        Ok(())
    } else {
        Err(NnError::Checkpoint(format!("`{key}` has shape {got:?}, expected {want:?}")))
    }
}

fn decode_float<T: Scalar>(key: &str, view: &TensorView<'_>, want: &[usize]) -> Result<ArrayD<T>> {
    check_shape(key, want, view.shape())?;
    let data = view.data();
    let vals: Vec<T> = match view.dtype() {
        Dtype::F32 => data
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect(),
        Dtype::F64 => data
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect(),
        Dtype::F16 => data
            .chunks_exact(2)
            .map(|c| T::of(f16::from_le_bytes([c[0], c[1]]).to_f64()))
            .collect(),
        Dtype::BF16 => data
            .chunks_exact(2)
            .map(|c| T::of(half::bf16::from_le_bytes([c[0], c[1]]).to_f64()))
            .collect(),
        other => return Err(NnError::Checkpoint(format!("`{key}` has unsupported dtype {other:?}"))),
    };
    ArrayD::from_shape_vec(IxDyn(want), vals).map_err(|e| NnError::Checkpoint(e.to_string()))
}

/// [`fill`] from raw safetensors bytes, e.g. a hub checkpoint without architecture metadata.
pub fn fill_from_bytes<T: Scalar>(net: &mut Network<T>, bytes: &[u8]) -> Result<Vec<String>> {
    let tensors = SafeTensors::deserialize(bytes).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    fill(net, &tensors)
}

/// Copy every tensor the network expects out of `tensors`; returns keys that were absent.
pub fn fill<T: Scalar>(net: &mut Network<T>, tensors: &SafeTensors<'_>) -> Result<Vec<String>> {
    let mut missing = Vec::new();
    for node in net.nodes_mut() {
        // quantized payloads first, they are not reachable through float_tensors_mut
        let mut dense_slots: Vec<(String, &mut Dense<T>)> = Vec::new();
        let name = node.name.clone();
        match &mut node.op {
            Op::Linear(d) if d.is_quantized() => dense_slots.push((name.clone(), d)),
            Op::Attention(a) => {
                for p in a.projections_mut() {
                    if p.dense.is_quantized() {
                        dense_slots.push((p.name.clone(), &mut p.dense));
                    }
                }
            }
            _ => {}
        }
        for (prefix, dense) in dense_slots {
            let wkey = format!("{prefix}.weight");
            match (dense, tensors.tensor(&wkey)) {
                (Dense::Int8(q), Ok(view)) => {
                    check_shape(&wkey, q.weight.shape(), view.shape())?;
                    if view.dtype() != Dtype::I8 {
                        return Err(NnError::Checkpoint(format!("`{wkey}` must be I8")));
                    }
                    let dim = q.weight.dim();
                    q.weight = Array2::from_shape_vec(dim, view.data().iter().map(|&b| b as i8).collect())
                        .map_err(|e| NnError::Checkpoint(e.to_string()))?;
                    let skey = format!("{prefix}.scale");
                    let sview = tensors.tensor(&skey).map_err(|_| NnError::MissingTensor(skey.clone()))?;
                    let scales = decode_float::<f64>(&skey, &sview, &[q.scales.len()])?;
                    q.scales = scales.iter().map(|&v| v as f32).collect();
                }
                (Dense::Half(h), Ok(view)) => {
                    check_shape(&wkey, h.weight.shape(), view.shape())?;
                    let vals = decode_float::<f64>(&wkey, &view, h.weight.shape())?;
                    h.weight = vals
                        .into_dimensionality()
                        .map_err(|e| NnError::Checkpoint(e.to_string()))?
                        .mapv(f16::from_f64);
                }
                (_, Err(_)) => missing.push(wkey),
                _ => {}
            }
        }
        for (key, slot) in node.float_tensors_mut() {
            match tensors.tensor(&key) {
                Ok(view) => {
                    let shape = slot.shape().to_vec();
                    *slot = decode_float(&key, &view, &shape)?;
                }
                Err(_) => missing.push(key),
            }
        }
    }
    Ok(missing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkBuilder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mixed() -> Network<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut b = NetworkBuilder::new(vec![2, 4, 4]);
        let c = b.push("conv", Op::Conv2d(Conv2d::new(&mut rng, 2, 4, (2, 2), (2, 2), (0, 0), 1, true)), &[0]);
        let bn = b.push("bn", Op::BatchNorm2d(BatchNorm2d::new(&mut rng, 4)), &[c]);
        let t = b.push("tokens", Op::PatchTokens, &[bn]);
        let names = ["a.q", "a.k", "a.v", "a.o"].map(String::from);
        let a = b.push("a", Op::Attention(MultiHeadAttention::new(&mut rng, names, 4, 2, 2)), &[t]);
        let m = b.push("mean", Op::MeanTokens, &[a]);
        let lin = Linear::new(&mut rng, 4, 3, true);
        b.push("head", Op::Linear(Dense::Int8(QuantizedLinearInt8::from_linear(&lin))), &[m]);
        b.build().unwrap()
    }

    #[test]
    fn round_trip_preserves_network_and_metadata() {
        let net = mixed();
        let mut meta = BTreeMap::new();
        meta.insert("scheme".to_string(), "qint8".to_string());
        let bytes = to_bytes(&net, &meta).unwrap();
        let (back, meta_back) = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(meta_back, meta);
    }

    #[test]
    fn missing_tensor_is_reported() {
        let net = mixed();
        let bytes = to_bytes(&net, &BTreeMap::new()).unwrap();
        let tensors = SafeTensors::deserialize(&bytes).unwrap();
        let mut bigger = ArchitectureSpec::of(&net);
        bigger.nodes.push(NodeSpec {
            name: "extra".into(),
            inputs: vec![6],
            op: OpSpec::Linear(DenseSpec { in_features: 3, out_features: 2, bias: false, storage: DenseStorage::Float }),
            delay_us: None,
        });
        let mut skel = bigger.skeleton::<f32>().unwrap();
        let missing = fill(&mut skel, &tensors).unwrap();
        assert_eq!(missing, vec!["extra.weight".to_string()]);
    }

    #[test]
    fn leading_unit_axes_are_tolerated() {
        assert!(check_shape("k", &[768], &[1, 1, 768]).is_ok());
        assert!(check_shape("k", &[197, 768], &[1, 197, 768]).is_ok());
        assert!(check_shape("k", &[4, 3], &[3, 4]).is_err());
    }
}
