//! Small in-repo models with fixed seeds, used by tests and offline runs.

use std::collections::BTreeMap;
use std::time::Duration;

use ndarray::{ArrayD, IxDyn};
use profagent_nn::{Conv2d, Dense, Linear, NetworkBuilder, Op, Result as NnResult, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::architectures::{self, VitConfig};
use super::{Device, Family, ModelHandle, Preprocessor, WeightsSource};
use crate::error::Result;

pub const TINY_CNN: &str = "tiny-test-cnn";
pub const TINY_VIT: &str = "tiny-test-vit";
pub const TINY_RESNET: &str = "tiny-resnet";
pub const TINY_RESIDUAL: &str = "tiny-residual";
pub const TINY_MLP: &str = "tiny-mlp";
pub const TINY_BN_CNN: &str = "tiny-bn-cnn";
pub const TINY_CONV_ONLY: &str = "tiny-conv-only";
pub const SLOW_LAYER_CNN: &str = "slow-layer-cnn";
pub const BRIGHTNESS: &str = "tiny-brightness-classifier";

pub const NAMES: &[&str] = &[
    TINY_CNN,
    TINY_VIT,
    TINY_RESNET,
    TINY_RESIDUAL,
    TINY_MLP,
    TINY_BN_CNN,
    TINY_CONV_ONLY,
    SLOW_LAYER_CNN,
    BRIGHTNESS,
];

/// Injected latency of the instrumented layer in [`SLOW_LAYER_CNN`].
pub const SLOW_LAYER_DELAY: Duration = Duration::from_millis(10);
pub const SLOW_LAYER_NAME: &str = "features.2";

pub fn tiny_vit_config() -> VitConfig {
    VitConfig {
        prefix: "vit".into(),
        image_size: 16,
        patch_size: 4,
        channels: 3,
        hidden: 32,
        layers: 2,
        heads: 4,
        mlp: 64,
        num_labels: 5,
        layer_norm_eps: 1e-6,
    }
}

const WORDS: &[&str] = &["apple", "bird", "cloud", "dune", "ember", "fern", "glacier", "harbor"];

fn labels(n: usize) -> Vec<String> {
    WORDS.iter().take(n).map(|s| s.to_string()).collect()
}

fn conv<T: Scalar>(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, stride: usize) -> Op<T> {
    Op::Conv2d(Conv2d::new(rng, cin, cout, (k, k), (stride, stride), (k / 2, k / 2), 1, true))
}

fn linear<T: Scalar>(rng: &mut ChaCha8Rng, i: usize, o: usize) -> Op<T> {
    Op::Linear(Dense::Float(Linear::new(rng, i, o, true)))
}

fn tensor<T: Scalar>(shape: &[usize], values: &[f64]) -> ArrayD<T> {
    ArrayD::from_shape_vec(IxDyn(shape), values.iter().map(|&v| T::of(v)).collect()).expect("fixture shape")
}

fn tiny_cnn<T: Scalar>(rng: &mut ChaCha8Rng) -> NnResult<profagent_nn::Network<T>> {
    let mut b = NetworkBuilder::new(vec![3, 16, 16]);
    let c0 = b.push("features.0", conv(rng, 3, 8, 3, 1), &[0]);
    let a0 = b.push("features.1", Op::Relu, &[c0]);
    let c1 = b.push("features.2", conv(rng, 8, 4, 3, 1), &[a0]);
    let a1 = b.push("features.3", Op::Relu, &[c1]);
    let p = b.push("pool", Op::GlobalAvgPool, &[a1]);
    b.push("classifier", linear(rng, 4, 3), &[p]);
    b.build()
}

fn tiny_conv_only<T: Scalar>(rng: &mut ChaCha8Rng) -> NnResult<profagent_nn::Network<T>> {
    let mut b = NetworkBuilder::new(vec![3, 16, 16]);
    let c0 = b.push("features.0", conv(rng, 3, 8, 3, 1), &[0]);
    let a0 = b.push("features.1", Op::Relu, &[c0]);
    let c1 = b.push("features.2", conv(rng, 8, 4, 1, 1), &[a0]);
    b.push("pool", Op::GlobalAvgPool, &[c1]);
    b.build()
}

fn slow_layer_cnn<T: Scalar>(rng: &mut ChaCha8Rng) -> NnResult<profagent_nn::Network<T>> {
    let mut b = NetworkBuilder::new(vec![3, 16, 16]);
    let c0 = b.push("features.0", conv(rng, 3, 8, 3, 1), &[0]);
    let a0 = b.push("features.1", Op::Relu, &[c0]);
    let c1 = b.push(SLOW_LAYER_NAME, conv(rng, 8, 8, 3, 1), &[a0]);
    b.set_delay(c1, SLOW_LAYER_DELAY);
    let a1 = b.push("features.3", Op::Relu, &[c1]);
    let p = b.push("pool", Op::GlobalAvgPool, &[a1]);
    b.push("classifier", linear(rng, 8, 3), &[p]);
    b.build()
}

fn tiny_bn_cnn<T: Scalar>(rng: &mut ChaCha8Rng) -> NnResult<profagent_nn::Network<T>> {
    let mut b = NetworkBuilder::new(vec![3, 16, 16]);
    let c0 = b.push("features.0", conv(rng, 3, 8, 3, 1), &[0]);
    let n0 = b.push("features.1", Op::BatchNorm2d(profagent_nn::BatchNorm2d::new(rng, 8)), &[c0]);
    let a0 = b.push("features.2", Op::Relu, &[n0]);
    let p = b.push("pool", Op::GlobalAvgPool, &[a0]);
    b.push("classifier", linear(rng, 8, 3), &[p]);
    b.build()
}

fn tiny_mlp<T: Scalar>(rng: &mut ChaCha8Rng) -> NnResult<profagent_nn::Network<T>> {
    let mut b = NetworkBuilder::new(vec![3, 4, 4]);
    let f = b.push("flatten", Op::Flatten, &[0]);
    let l0 = b.push("fc1", linear(rng, 48, 64), &[f]);
    let a0 = b.push("act1", Op::Relu, &[l0]);
    let l1 = b.push("fc2", linear(rng, 64, 64), &[a0]);
    let a1 = b.push("act2", Op::Relu, &[l1]);
    b.push("fc3", linear(rng, 64, 4), &[a1]);
    b.build()
}

/// Two convolution branches summed, so both branch outputs must share one width.
fn tiny_residual<T: Scalar>(rng: &mut ChaCha8Rng) -> NnResult<profagent_nn::Network<T>> {
    let mut b = NetworkBuilder::new(vec![3, 16, 16]);
    let s = b.push("stem", conv(rng, 3, 8, 3, 1), &[0]);
    let sa = b.push("stem_act", Op::Relu, &[s]);
    let a0 = b.push("branch_a.0", conv(rng, 8, 8, 3, 1), &[sa]);
    let a0r = b.push("branch_a.act", Op::Relu, &[a0]);
    let a1 = b.push("branch_a.1", conv(rng, 8, 8, 3, 1), &[a0r]);
    let b0 = b.push("branch_b.0", conv(rng, 8, 8, 1, 1), &[sa]);
    let sum = b.push("merge", Op::Add, &[a1, b0]);
    let act = b.push("merge_act", Op::Relu, &[sum]);
    let p = b.push("pool", Op::GlobalAvgPool, &[act]);
    b.push("head", linear(rng, 8, 3), &[p]);
    b.build()
}

/// Residual CNN whose names follow `encoder.stages{s}.layer.{l}.convolution`.
fn tiny_resnet<T: Scalar>(rng: &mut ChaCha8Rng) -> NnResult<profagent_nn::Network<T>> {
    let mut b = NetworkBuilder::new(vec![3, 16, 16]);
    let mut conv_bn = |b: &mut NetworkBuilder<T>, base: &str, x, cin, cout, k, stride, relu: bool| {
        let c = b.push(format!("{base}.convolution"), conv(rng, cin, cout, k, stride), &[x]);
        let n = b.push(
            format!("{base}.normalization"),
            Op::BatchNorm2d(profagent_nn::BatchNorm2d::new(rng, cout)),
            &[c],
        );
        if relu {
            b.push(format!("{base}.activation"), Op::Relu, &[n])
        } else {
            n
        }
    };
    let stem = conv_bn(&mut b, "embedder", 0, 3, 8, 3, 1, true);
    let h = conv_bn(&mut b, "encoder.stages0.layer.0", stem, 8, 8, 3, 1, true);
    let h = conv_bn(&mut b, "encoder.stages0.layer.1", h, 8, 8, 3, 1, false);
    let s0 = b.push("encoder.stages0.residual", Op::Add, &[h, stem]);
    let s0 = b.push("encoder.stages0.activation", Op::Relu, &[s0]);
    let sc = conv_bn(&mut b, "encoder.stages1.shortcut", s0, 8, 16, 1, 2, false);
    let h = conv_bn(&mut b, "encoder.stages1.layer.0", s0, 8, 16, 3, 2, true);
    let h = conv_bn(&mut b, "encoder.stages1.layer.1", h, 16, 16, 3, 1, false);
    let s1 = b.push("encoder.stages1.residual", Op::Add, &[h, sc]);
    let s1 = b.push("encoder.stages1.activation", Op::Relu, &[s1]);
    let p = b.push("pooler", Op::GlobalAvgPool, &[s1]);
    b.push("classifier", linear(rng, 16, 4), &[p]);
    b.build()
}

/// Mean-brightness classifier with closed-form weights: label `bright` iff mean pixel > 0.5.
fn brightness<T: Scalar>() -> NnResult<profagent_nn::Network<T>> {
    let mut b = NetworkBuilder::new(vec![3, 8, 8]);
    let c = b.push(
        "features.0",
        Op::Conv2d(Conv2d {
            weight: tensor(&[4, 3, 1, 1], &[1.0 / 3.0; 12]),
            bias: Some(tensor(&[4], &[0.0; 4])),
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
        }),
        &[0],
    );
    let a = b.push("features.1", Op::Relu, &[c]);
    let p = b.push("pool", Op::GlobalAvgPool, &[a]);
    b.push(
        "classifier",
        Op::Linear(Dense::Float(Linear {
            weight: tensor(&[2, 4], &[-1.0, -1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 1.0]),
            bias: Some(tensor(&[2], &[2.0, -2.0])),
        })),
        &[p],
    );
    b.build()
}

/// Build the named fixture, or `None` if `name` is not a fixture.
pub fn build<T: Scalar>(name: &str) -> Option<Result<ModelHandle<T>>> {
    let seed = 7 + NAMES.iter().position(|n| *n == name)? as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (net, family, n_labels) = match name {
        TINY_CNN => (tiny_cnn(&mut rng), Family::Convolutional, 3),
        TINY_VIT => (architectures::vit(&tiny_vit_config(), &mut rng), Family::Transformer, 5),
        TINY_RESNET => (tiny_resnet(&mut rng), Family::Convolutional, 4),
        TINY_RESIDUAL => (tiny_residual(&mut rng), Family::Convolutional, 3),
        TINY_MLP => (tiny_mlp(&mut rng), Family::Hybrid, 4),
        TINY_BN_CNN => (tiny_bn_cnn(&mut rng), Family::Convolutional, 3),
        TINY_CONV_ONLY => (tiny_conv_only(&mut rng), Family::Convolutional, 4),
        SLOW_LAYER_CNN => (slow_layer_cnn(&mut rng), Family::Convolutional, 3),
        BRIGHTNESS => (brightness(), Family::Convolutional, 2),
        _ => return None,
    };
    Some(net.map_err(Into::into).map(|network| {
        let shape = network.input_shape().to_vec();
        let labels = if name == BRIGHTNESS { vec!["dark".into(), "bright".into()] } else { labels(n_labels) };
        let mut metadata = BTreeMap::new();
        metadata.insert("image_size".to_string(), json!(shape[1]));
        metadata.insert("num_channels".to_string(), json!(shape[0]));
        metadata.insert("preprocessor_size".to_string(), json!([shape[1], shape[2]]));
        ModelHandle {
            model_id: name.to_string(),
            family,
            device: Device::Cpu,
            preprocessor: Preprocessor::plain(shape[0], shape[1], shape[2]),
            network,
            labels,
            metadata,
            weights: WeightsSource::Fixture,
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn every_fixture_runs() {
        for name in NAMES {
            let h = build::<f32>(name).unwrap().unwrap();
            let x = Array::from_elem(IxDyn(h.network.input_shape()), 0.5f32);
            let y = h.network.forward(&x).unwrap();
            assert!(y.iter().all(|v| v.is_finite()), "{name}");
            if name != &TINY_CONV_ONLY {
                assert_eq!(y.len(), h.labels.len(), "{name}");
            }
        }
    }

    #[test]
    fn fixtures_are_seeded() {
        let a = build::<f64>(TINY_VIT).unwrap().unwrap();
        let b = build::<f64>(TINY_VIT).unwrap().unwrap();
        assert_eq!(a.network, b.network);
    }

    #[test]
    fn brightness_rule() {
        let h = build::<f64>(BRIGHTNESS).unwrap().unwrap();
        for (level, want) in [(0.2, 0), (0.8, 1)] {
            let x = Array::from_elem(IxDyn(&[3, 8, 8]), level);
            let y = h.network.forward(&x).unwrap();
            let arg = if y[[1]] > y[[0]] { 1 } else { 0 };
            assert_eq!(arg, want);
        }
    }
}
