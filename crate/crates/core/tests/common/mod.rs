#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use profagent::zoo::{Device, Family, ModelHandle, Preprocessor, WeightsSource};
use profagent_nn::{Network, Scalar};

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

/// Raw agent response for the ResNet-style plan: one structured conv directive at 0.2
/// and qint8 on all linear layers.
pub fn resnet_agent_plan() -> String {
    std::fs::read_to_string(fixture_dir().join("resnet_agent_plan.txt")).expect("fixture")
}

/// Wrap a bare network with a plain preprocessor so pipeline functions accept it.
pub fn handle_from<T: Scalar>(network: Network<T>, n_labels: usize) -> ModelHandle<T> {
    let s = network.input_shape().to_vec();
    let (c, h, w) = match s.as_slice() {
        [c, h, w] => (*c, *h, *w),
        _ => panic!("unsupported input rank {s:?}"),
    };
    ModelHandle {
        model_id: "test-network".into(),
        family: Family::Hybrid,
        device: Device::Cpu,
        network,
        preprocessor: Preprocessor::plain(c, h, w),
        labels: (0..n_labels).map(|i| format!("class{i}")).collect(),
        metadata: BTreeMap::new(),
        weights: WeightsSource::Fixture,
    }
}

/// Count every multiply of a direct convolution, padded positions included.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv_macs(cin: usize, cout: usize, k: usize, s: usize, p: usize, g: usize, h: usize, w: usize) -> u64 {
    let mut count = 0u64;
    for _oc in 0..cout {
        let mut y = 0;
        while y + k <= h + 2 * p {
            let mut x = 0;
            while x + k <= w + 2 * p {
                for _ic in 0..cin / g {
                    for _ky in 0..k {
                        for _kx in 0..k {
                            count += 1;
                        }
                    }
                }
                x += s;
            }
            y += s;
        }
    }
    count
}

pub fn naive_linear_macs(tokens: usize, inp: usize, out: usize) -> u64 {
    let mut count = 0u64;
    for _t in 0..tokens {
        for _o in 0..out {
            for _i in 0..inp {
                count += 1;
            }
        }
    }
    count
}
