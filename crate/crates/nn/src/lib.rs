//! Scalar-generic inference engine used by the compression pipeline.
//!
//! Networks are flat dataflow graphs of named nodes. Every layer keeps its
//! tensors in plain `ndarray` storage so structured pruning can slice them and
//! dynamic quantization can swap dense layers for integer or half-precision
//! variants in place.

pub mod checkpoint;
pub mod error;
pub mod layers;
pub mod network;
pub mod scalar;

pub use error::{NnError, Result};
pub use layers::{
    BatchNorm2d, ClassToken, Conv2d, Dense, HalfLinear, LayerNorm, Linear, MultiHeadAttention, PositionEmbedding,
    Projection, QuantizedLinearInt8, TensorData, TensorRef, TensorRole,
};
pub use network::{ForwardObserver, Network, NetworkBuilder, Node, NodeId, Op};
pub use scalar::{FloatDType, Scalar};

pub type Network32 = Network<f32>;
pub type Network64 = Network<f64>;
pub type Tensor32 = ndarray::ArrayD<f32>;
pub type Tensor64 = ndarray::ArrayD<f64>;
