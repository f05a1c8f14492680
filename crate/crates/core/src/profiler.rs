//! Static (MACs, parameters) and dynamic (latency, memory) profiling.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use ndarray::ArrayD;
use profagent_nn::{ForwardObserver, Node, Op, Scalar};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::zoo::{self, enumerate_network, Device, Family, InputSpec, LayerDescriptor, LayerKind, ModelHandle};

pub const DEFAULT_WARMUP: usize = 5;
pub const DEFAULT_REPEATS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticLayerProfile {
    pub qualified_name: String,
    pub kind: LayerKind,
    pub mac_count: u64,
    pub param_count: u64,
    pub input_shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticProfile {
    pub layers: Vec<StaticLayerProfile>,
    pub total_macs: u64,
    pub total_params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicOpProfile {
    pub op_name: String,
    pub device: Device,
    /// Mean time per call, microseconds.
    pub self_time_us: f64,
    pub min_us: f64,
    pub max_us: f64,
    pub total_us: f64,
    /// Largest output buffer produced by one call.
    pub memory_bytes: u64,
    /// False when the runtime could not attribute memory to the op (bytes are then 0).
    pub memory_attributed: bool,
    pub input_shapes: Vec<Vec<usize>>,
    pub calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEnvironment {
    pub devices: Vec<String>,
    pub timestamp: DateTime<Utc>,
    pub warmup: usize,
    pub repeats: usize,
    pub batch_size: usize,
    pub scalar: String,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilingReport {
    pub model_id: String,
    pub family: Family,
    pub input_spec: InputSpec,
    #[serde(rename = "static")]
    pub static_profile: StaticProfile,
    pub dynamic_cpu: Vec<DynamicOpProfile>,
    pub dynamic_accel: Vec<DynamicOpProfile>,
    /// Mean microseconds per parameterized top-level layer.
    pub layer_latency: BTreeMap<String, f64>,
    pub environment: ProfileEnvironment,
}

impl ProfilingReport {
    pub fn check(&self) -> std::result::Result<(), String> {
        let s = &self.static_profile;
        let macs: u64 = s.layers.iter().map(|l| l.mac_count).sum();
        let params: u64 = s.layers.iter().map(|l| l.param_count).sum();
        if macs != s.total_macs || params != s.total_params {
            return Err(format!(
                "totals ({}, {}) disagree with per-layer sums ({macs}, {params})",
                s.total_macs, s.total_params
            ));
        }
        let names: BTreeSet<&str> = s.layers.iter().map(|l| l.qualified_name.as_str()).collect();
        if let Some(k) = self.layer_latency.keys().find(|k| !names.contains(k.as_str())) {
            return Err(format!("layer_latency key `{k}` is not a profiled layer"));
        }
        for d in self.dynamic_cpu.iter().chain(&self.dynamic_accel) {
            if d.calls == 0 || !d.self_time_us.is_finite() || d.self_time_us < 0.0 {
                return Err(format!("invalid dynamic entry for `{}`", d.op_name));
            }
        }
        Ok(())
    }
}

fn conv_out(size: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (size + 2 * p).checked_sub(k).map(|v| v / s.max(1) + 1)
}

/// Multiply-accumulates of one forward pass through `layer` at batch 1.
pub fn count_macs(layer: &LayerDescriptor, input_shape: &[usize]) -> Result<u64> {
    let mismatch = |what: &str| {
        Error::ShapeMismatch(format!("{} ({what}) on input {input_shape:?}", layer.qualified_name))
    };
    match layer.kind {
        LayerKind::Conv2d => {
            let g = layer.conv.ok_or_else(|| mismatch("missing conv geometry"))?;
            if input_shape.len() != 3 || input_shape[0] != layer.in_channels {
                return Err(mismatch(&format!("expects {} channels", layer.in_channels)));
            }
            let ho = conv_out(input_shape[1], g.kernel.0, g.stride.0, g.padding.0)
                .ok_or_else(|| mismatch("kernel larger than padded input"))?;
            let wo = conv_out(input_shape[2], g.kernel.1, g.stride.1, g.padding.1)
                .ok_or_else(|| mismatch("kernel larger than padded input"))?;
            let per_group = layer.in_channels / g.groups.max(1);
            Ok((layer.out_channels * per_group * g.kernel.0 * g.kernel.1 * ho * wo) as u64)
        }
        LayerKind::Linear => {
            let (&last, lead) = input_shape.split_last().ok_or_else(|| mismatch("empty shape"))?;
            if last != layer.in_channels {
                return Err(mismatch(&format!("expects {} features", layer.in_channels)));
            }
            let tokens: usize = lead.iter().product();
            Ok((layer.in_channels * layer.out_channels * tokens) as u64)
        }
        LayerKind::Attention => {
            if input_shape.len() != 2 || input_shape[1] != layer.in_channels {
                return Err(mismatch("expects [tokens, dim]"));
            }
            let n = input_shape[0];
            let inner = layer.num_heads.unwrap_or(0) * layer.head_dim.unwrap_or(0);
            // scores Q·Kᵀ plus context A·V; projections are separate descriptors
            Ok((2 * n * n * inner) as u64)
        }
        LayerKind::Norm | LayerKind::Other => Ok(0),
    }
}

/// Per-layer MACs and parameters, in `enumerate_layers` order.
pub fn profile_static<T: Scalar>(handle: &ModelHandle<T>, spec: &InputSpec) -> Result<StaticProfile> {
    let net = &handle.network;
    let shapes = net
        .infer_shapes(&spec.shape())
        .map_err(|e| Error::ForwardShapeError(e.to_string()))?;
    let descriptors = enumerate_network(net);
    let mut input_of: HashMap<&str, Vec<usize>> = HashMap::new();
    for node in net.nodes() {
        let Some(&src) = node.inputs.first() else { continue };
        let x = shapes[src].clone();
        if let Op::Attention(a) = &node.op {
            let inner = vec![x[0], a.num_heads * a.head_dim];
            input_of.insert(&a.query.name, x.clone());
            input_of.insert(&a.key.name, x.clone());
            input_of.insert(&a.value.name, x.clone());
            input_of.insert(&a.output.name, inner);
        }
        input_of.insert(&node.name, x);
    }
    let mut layers = Vec::with_capacity(descriptors.len());
    for d in &descriptors {
        let input_shape = input_of.get(d.qualified_name.as_str()).cloned().unwrap_or_default();
        let mac_count = count_macs(d, &input_shape).map_err(|e| Error::ForwardShapeError(e.to_string()))?;
        layers.push(StaticLayerProfile {
            qualified_name: d.qualified_name.clone(),
            kind: d.kind,
            mac_count,
            param_count: d.param_count,
            input_shape,
        });
    }
    Ok(StaticProfile {
        total_macs: layers.iter().map(|l| l.mac_count).sum(),
        total_params: layers.iter().map(|l| l.param_count).sum(),
        layers,
    })
}

struct Event {
    node: usize,
    op: &'static str,
    input_shapes: Vec<Vec<usize>>,
    elapsed: Duration,
    out_bytes: u64,
}

#[derive(Default)]
struct Recorder {
    started: Option<(Instant, Vec<Vec<usize>>)>,
    index: HashMap<String, usize>,
    events: Vec<Event>,
}

impl<T: Scalar> ForwardObserver<T> for Recorder {
    fn before(&mut self, _node: &Node<T>, inputs: &[&ArrayD<T>]) {
        let shapes = inputs.iter().map(|x| x.shape().to_vec()).collect();
        self.started = Some((Instant::now(), shapes));
    }

    fn after(&mut self, node: &Node<T>, output: &ArrayD<T>) {
        let elapsed_end = Instant::now();
        let Some((start, input_shapes)) = self.started.take() else { return };
        let next = self.index.len();
        let idx = *self.index.entry(node.name.clone()).or_insert(next);
        self.events.push(Event {
            node: idx,
            op: node.op.kind_name(),
            input_shapes,
            elapsed: elapsed_end - start,
            out_bytes: (output.len() * T::width()) as u64,
        });
    }
}

fn run_passes<T: Scalar>(handle: &ModelHandle<T>, spec: &InputSpec, warmup: usize, repeats: usize) -> Result<Recorder> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    handle.device.ensure_available()?;
    let x = zoo::probe_input::<T>(&spec.shape(), 0);
    for _ in 0..warmup {
        handle.network.forward(&x).map_err(|e| Error::ForwardShapeError(e.to_string()))?;
    }
    let mut rec = Recorder::default();
    for _ in 0..repeats {
        handle
            .network
            .forward_observed(&x, &mut rec)
            .map_err(|e| Error::ForwardShapeError(e.to_string()))?;
    }
    Ok(rec)
}

fn us(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

/// Per-operator timing grouped by (operator, input shapes), in first-execution order.
pub fn profile_dynamic<T: Scalar>(
    handle: &ModelHandle<T>,
    spec: &InputSpec,
    device: Device,
    warmup: usize,
    repeats: usize,
) -> Result<Vec<DynamicOpProfile>> {
    device.ensure_available()?;
    let rec = run_passes(handle, spec, warmup, repeats)?;
    let mut order: Vec<(&'static str, Vec<Vec<usize>>)> = Vec::new();
    let mut stats: HashMap<(&'static str, Vec<Vec<usize>>), (u64, f64, f64, f64, u64)> = HashMap::new();
    for e in &rec.events {
        let key = (e.op, e.input_shapes.clone());
        let t = us(e.elapsed);
        let s = stats.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (0, 0.0, f64::INFINITY, 0.0, 0)
        });
        s.0 += 1;
        s.1 += t;
        s.2 = s.2.min(t);
        s.3 = s.3.max(t);
        s.4 = s.4.max(e.out_bytes);
    }
    Ok(order
        .into_iter()
        .map(|key| {
            let (calls, total, min, max, bytes) = stats[&key];
            DynamicOpProfile {
                op_name: key.0.to_string(),
                device,
                self_time_us: total / calls as f64,
                min_us: min,
                max_us: max,
                total_us: total,
                memory_bytes: bytes,
                memory_attributed: true,
                input_shapes: key.1,
                calls,
            }
        })
        .collect())
}

/// Mean microseconds spent inside each parameterized top-level layer.
pub fn profile_layers<T: Scalar>(
    handle: &ModelHandle<T>,
    spec: &InputSpec,
    warmup: usize,
    repeats: usize,
) -> Result<BTreeMap<String, f64>> {
    let rec = run_passes(handle, spec, warmup, repeats)?;
    let names: HashMap<usize, &str> = rec.index.iter().map(|(k, &v)| (v, k.as_str())).collect();
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    for e in &rec.events {
        let name = names[&e.node];
        let node = handle.network.node(name).expect("recorded node exists");
        if node.op.has_parameters() {
            *sums.entry(name.to_string()).or_insert(0.0) += us(e.elapsed);
        }
    }
    for v in sums.values_mut() {
        *v /= repeats as f64;
    }
    Ok(sums)
}

/// Mean end-to-end forward latency in microseconds.
pub fn profile_end_to_end<T: Scalar>(
    handle: &ModelHandle<T>,
    spec: &InputSpec,
    warmup: usize,
    repeats: usize,
) -> Result<f64> {
    let x = zoo::probe_input::<T>(&spec.shape(), 0);
    for _ in 0..warmup {
        handle.network.forward(&x).map_err(|e| Error::ForwardShapeError(e.to_string()))?;
    }
    let start = Instant::now();
    for _ in 0..repeats.max(1) {
        handle.network.forward(&x).map_err(|e| Error::ForwardShapeError(e.to_string()))?;
    }
    Ok(us(start.elapsed()) / repeats.max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProfileOptions {
    pub warmup: usize,
    pub repeats: usize,
    pub accelerator: bool,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self { warmup: DEFAULT_WARMUP, repeats: DEFAULT_REPEATS, accelerator: false }
    }
}

/// Full report: static tables, CPU operator timing, per-layer latency.
pub fn profile<T: Scalar>(handle: &ModelHandle<T>, spec: &InputSpec, opts: ProfileOptions) -> Result<ProfilingReport> {
    let static_profile = profile_static(handle, spec)?;
    let dynamic_cpu = profile_dynamic(handle, spec, Device::Cpu, opts.warmup, opts.repeats)?;
    let dynamic_accel = if opts.accelerator {
        profile_dynamic(handle, spec, Device::Accelerator, opts.warmup, opts.repeats)?
    } else {
        Vec::new()
    };
    let layer_latency = profile_layers(handle, spec, opts.warmup, opts.repeats)?;
    let mut devices = vec!["cpu".to_string()];
    if opts.accelerator {
        devices.push("accelerator".into());
    }
    Ok(ProfilingReport {
        model_id: handle.model_id.clone(),
        family: handle.family,
        input_spec: *spec,
        static_profile,
        dynamic_cpu,
        dynamic_accel,
        layer_latency,
        environment: ProfileEnvironment {
            devices,
            timestamp: Utc::now(),
            warmup: opts.warmup,
            repeats: opts.repeats,
            batch_size: 1,
            scalar: format!("{:?}", T::DTYPE).to_lowercase(),
            notes: Vec::new(),
        },
    })
}

pub fn serialize_report(report: &ProfilingReport) -> Result<Vec<u8>> {
    crate::artifacts::to_pretty(report)
}

pub fn deserialize_report(bytes: &[u8]) -> Result<ProfilingReport> {
    let report: ProfilingReport = serde_json::from_slice(bytes).map_err(|e| Error::CorruptReport(e.to_string()))?;
    report.check().map_err(Error::CorruptReport)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{acquire_model, fixtures};

    fn linear(i: usize, o: usize) -> LayerDescriptor {
        LayerDescriptor {
            qualified_name: "fc".into(),
            kind: LayerKind::Linear,
            out_channels: o,
            in_channels: i,
            num_heads: None,
            param_count: (i * o + o) as u64,
            has_bias: true,
            conv: None,
            head_dim: None,
            storage: None,
        }
    }

    #[test]
    fn linear_macs() {
        assert_eq!(count_macs(&linear(4, 8), &[4]).unwrap(), 32);
        assert_eq!(count_macs(&linear(4, 8), &[10, 4]).unwrap(), 320);
        assert!(matches!(count_macs(&linear(4, 8), &[5]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn static_profile_totals_and_determinism() {
        let h = acquire_model::<f32>(fixtures::TINY_VIT, Device::Cpu).unwrap();
        let spec = InputSpec::image(3, 16, 16);
        let a = profile_static(&h, &spec).unwrap();
        let b = profile_static(&h, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.total_params, h.param_count());
        assert!(a.total_macs > 0);
        let bad = InputSpec::image(1, 16, 16);
        assert!(matches!(profile_static(&h, &bad), Err(Error::ForwardShapeError(_))));
    }

    #[test]
    fn dynamic_op_set_is_stable() {
        let h = acquire_model::<f32>(fixtures::TINY_CNN, Device::Cpu).unwrap();
        let spec = InputSpec::image(3, 16, 16);
        let one = profile_dynamic(&h, &spec, Device::Cpu, 0, 1).unwrap();
        let many = profile_dynamic(&h, &spec, Device::Cpu, 2, 5).unwrap();
        let names = |v: &[DynamicOpProfile]| v.iter().map(|d| d.op_name.clone()).collect::<BTreeSet<_>>();
        assert_eq!(names(&one), names(&many));
        assert!(many.iter().all(|d| d.calls >= 5));
        assert!(matches!(
            profile_dynamic(&h, &spec, Device::Accelerator, 0, 1),
            Err(Error::DeviceUnavailable(_))
        ));
    }

    #[test]
    fn missing_static_is_corrupt() {
        let h = acquire_model::<f32>(fixtures::TINY_CNN, Device::Cpu).unwrap();
        let spec = InputSpec::image(3, 16, 16);
        let r = profile(&h, &spec, ProfileOptions { warmup: 0, repeats: 1, accelerator: false }).unwrap();
        let bytes = serialize_report(&r).unwrap();
        assert_eq!(deserialize_report(&bytes).unwrap(), r);
        let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        v.as_object_mut().unwrap().remove("static");
        let broken = serde_json::to_vec(&v).unwrap();
        assert!(matches!(deserialize_report(&broken), Err(Error::CorruptReport(_))));
    }
}
