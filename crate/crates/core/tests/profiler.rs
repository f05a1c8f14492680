use profagent::profiler::{
    deserialize_report, profile, profile_dynamic, profile_end_to_end, serialize_report, ProfileOptions,
};
use profagent::zoo::{acquire_model, fixtures, Device, InputSpec, ModelHandle};
use profagent::Error;

fn slow() -> (ModelHandle<f32>, InputSpec) {
    (acquire_model(fixtures::SLOW_LAYER_CNN, Device::Cpu).unwrap(), InputSpec::image(3, 16, 16))
}

#[test]
fn delayed_conv_dominates_self_time() {
    let (h, spec) = slow();
    let ops = profile_dynamic(&h, &spec, Device::Cpu, 1, 5).unwrap();
    let conv = ops
        .iter()
        .find(|o| o.op_name == "conv2d" && o.input_shapes == vec![vec![8, 16, 16]])
        .expect("delayed conv row");
    assert_eq!(conv.calls, 5);
    assert!((9_000.0..=15_000.0).contains(&conv.self_time_us), "{}", conv.self_time_us);
    assert!(conv.min_us <= conv.self_time_us && conv.self_time_us <= conv.max_us);
    let first = ops.iter().find(|o| o.input_shapes == vec![vec![3, 16, 16]]).unwrap();
    assert!(first.self_time_us < conv.self_time_us);
}

#[test]
fn layer_latency_points_at_delayed_layer() {
    let (h, spec) = slow();
    let r = profile(&h, &spec, ProfileOptions { warmup: 1, repeats: 5, accelerator: false }).unwrap();
    let slowest = r.layer_latency.iter().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    assert_eq!(slowest.0, fixtures::SLOW_LAYER_NAME);
    let e2e = profile_end_to_end(&h, &spec, 1, 5).unwrap();
    let sum: f64 = r.layer_latency.values().sum();
    assert!(sum <= 1.5 * e2e, "{sum} vs {e2e}");
    r.check().unwrap();
}

#[test]
fn report_roundtrip_is_lossless() {
    let (h, spec) = slow();
    let r = profile(&h, &spec, ProfileOptions { warmup: 0, repeats: 2, accelerator: false }).unwrap();
    let back = deserialize_report(&serialize_report(&r).unwrap()).unwrap();
    assert_eq!(back, r);
}

#[test]
fn accelerator_profile_needs_a_device() {
    let (h, spec) = slow();
    assert!(matches!(
        profile(&h, &spec, ProfileOptions { warmup: 0, repeats: 1, accelerator: true }),
        Err(Error::DeviceUnavailable(_))
    ));
}
