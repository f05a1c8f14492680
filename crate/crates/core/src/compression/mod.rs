//! Plan execution: dependency-aware pruning and dynamic quantization.

mod graph;
mod prune;

use std::collections::BTreeMap;

use profagent_nn::{Dense, HalfLinear, Network, Op, QuantizedLinearInt8, Scalar, TensorData};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use graph::{build_dependency_graph, build_network_graph, Axis, DependencyGraph, GroupKind, GroupMember, PruneGroup};
pub use prune::{
    apply_head_pruning, apply_structured_pruning, check_forward, lowest_indices, member_width, prune_groups,
    removal_count, select_removed, GroupChange, GroupTarget, Importance, LayerWidthChange, PruneSummary,
};

use crate::analysis::{compile_pattern, pruning_targets, CompressionPlan, PruningType, QuantDtype, QuantizationDirective};
use crate::error::{Error, Result};
use crate::zoo::{enumerate_layers, InputSpec, ModelHandle};

fn input_spec<T: Scalar>(handle: &ModelHandle<T>) -> InputSpec {
    let s = handle.input_shape();
    InputSpec::image(s[0], s[1], s[2])
}

/// Apply every pruning directive of `plan` to a copy of `handle`.
///
/// Directives are resolved to dependency groups first; when two directives reach the
/// same group the later one applies.
pub fn apply_pruning_plan<T: Scalar>(
    handle: &ModelHandle<T>,
    plan: &CompressionPlan,
    importance: Importance,
) -> Result<(ModelHandle<T>, PruneSummary)> {
    let mut pruned = handle.clone();
    let graph = build_dependency_graph(&pruned, &input_spec(&pruned))?;
    let layers = enumerate_layers(&pruned);
    let mut warnings = Vec::new();
    let mut targets: BTreeMap<usize, GroupTarget> = BTreeMap::new();
    for d in &plan.pruning {
        let names = pruning_targets(d, &layers)?;
        let found = match d.pruning_type {
            PruningType::Structured => prune::structured_targets(&graph, &names, d.pruning_ratio, &d.layer_pattern, &mut warnings),
            PruningType::Head => prune::head_targets(&graph, &names, d.pruning_ratio, &d.layer_pattern, &mut warnings),
        };
        for (g, t) in found {
            if let Some(prev) = targets.insert(g, t) {
                if prev.directive != d.layer_pattern {
                    warnings.push(format!("group {g}: `{}` overrides `{}`", d.layer_pattern, prev.directive));
                }
            }
        }
    }
    if targets.is_empty() {
        return Err(Error::EmptyPlan);
    }
    let mut summary = prune_groups(&mut pruned, &graph, &targets.into_values().collect::<Vec<_>>(), importance)?;
    warnings.append(&mut summary.warnings);
    summary.warnings = warnings;
    Ok((pruned, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizationSummary {
    /// Layer name and the storage it now uses.
    pub replaced: Vec<(String, String)>,
    pub params_before: u64,
    pub params_after: u64,
    pub bytes_before: u64,
    pub bytes_after: u64,
}

fn for_each_dense_mut<T: Scalar>(net: &mut Network<T>, mut f: impl FnMut(&str, &mut Dense<T>)) {
    for node in net.nodes_mut() {
        match &mut node.op {
            Op::Linear(d) => f(&node.name, d),
            Op::Attention(a) => {
                for p in a.projections_mut() {
                    f(&p.name, &mut p.dense);
                }
            }
            _ => {}
        }
    }
}

fn quantize_dense<T: Scalar>(d: &Dense<T>, dtype: QuantDtype) -> Option<Dense<T>> {
    let l = d.as_float()?;
    Some(match dtype {
        QuantDtype::Qint8 => Dense::Int8(QuantizedLinearInt8::from_linear(l)),
        QuantDtype::Float16 => Dense::Half(HalfLinear::from_linear(l)),
    })
}

/// Replace matched float linear layers with dynamically quantized equivalents.
pub fn apply_quantization_plan<T: Scalar>(
    handle: &ModelHandle<T>,
    plan: &CompressionPlan,
) -> Result<(ModelHandle<T>, QuantizationSummary)> {
    if plan.quantization.is_empty() {
        return Err(Error::EmptyPlan);
    }
    handle.device.ensure_available()?;
    let mut out = handle.clone();
    let mut replaced = Vec::new();
    for d in &plan.quantization {
        let re = d.layer_selector.matcher()?;
        for_each_dense_mut(&mut out.network, |name, dense| {
            if re.as_ref().is_some_and(|r| !r.is_match(name)) {
                return;
            }
            if let Some(q) = quantize_dense(dense, d.dtype) {
                *dense = q;
                replaced.push((name.to_string(), d.dtype.as_str().to_string()));
            }
        });
    }
    if replaced.is_empty() {
        return Err(Error::NoEligibleLayers(format!("no float linear layer in `{}` matches the plan", handle.model_id)));
    }
    let summary = QuantizationSummary {
        replaced,
        params_before: handle.param_count(),
        params_after: out.param_count(),
        bytes_before: estimate_model_bytes(handle, None)?,
        bytes_after: estimate_model_bytes(&out, None)?,
    };
    Ok((out, summary))
}

fn dense_bytes_as<T: Scalar>(d: &Dense<T>, dtype: QuantDtype) -> u64 {
    let (out, inp) = (d.out_features() as u64, d.in_features() as u64);
    let bias = d.bias().map_or(0, |b| b.len() as u64 * T::width() as u64);
    match dtype {
        QuantDtype::Qint8 => out * inp + out * 4 + bias,
        QuantDtype::Float16 => out * inp * 2 + bias,
    }
}

fn directive_dtype(ds: &[QuantizationDirective], name: &str) -> Result<Option<QuantDtype>> {
    let mut hit = None;
    for d in ds {
        match d.layer_selector.matcher()? {
            None => hit = Some(d.dtype),
            Some(r) if r.is_match(name) => hit = Some(d.dtype),
            Some(_) => {}
        }
    }
    Ok(hit)
}

/// Bytes of all parameters and buffers.
///
/// Without a plan this reads the stored element widths: 1 byte per qint8 weight plus a
/// 4-byte scale per output row, 2 per float16 weight, the scalar width for everything
/// else. With a plan, matched float linear layers are counted as if already quantized.
pub fn estimate_model_bytes<T: Scalar>(handle: &ModelHandle<T>, plan: Option<&CompressionPlan>) -> Result<u64> {
    let Some(plan) = plan.filter(|p| !p.quantization.is_empty()) else {
        return Ok(handle.network.storage_bytes());
    };
    let mut total = 0u64;
    for node in handle.network.nodes() {
        let mut denses: Vec<(&str, &Dense<T>)> = Vec::new();
        match &node.op {
            Op::Linear(d) => denses.push((&node.name, d)),
            Op::Attention(a) => denses.extend(a.projections().iter().map(|p| (p.name.as_str(), &p.dense))),
            _ => {}
        }
        if denses.is_empty() {
            total += node.tensors().iter().map(|t| (t.data.len() * t.data.element_width()) as u64).sum::<u64>();
            continue;
        }
        for (name, d) in denses {
            let as_dtype = if d.as_float().is_some() { directive_dtype(&plan.quantization, name)? } else { None };
            total += match as_dtype {
                Some(dt) => dense_bytes_as(d, dt),
                None => {
                    let mut tensors = Vec::new();
                    d_tensors(d, name, &mut tensors);
                    tensors.iter().sum()
                }
            };
        }
    }
    Ok(total)
}

fn d_tensors<T: Scalar>(d: &Dense<T>, name: &str, out: &mut Vec<u64>) {
    let mut refs = Vec::new();
    d.tensors(name, &mut refs);
    out.extend(refs.iter().map(|t| (t.data.len() * t.data.element_width()) as u64));
}

/// SHA-256 over every stored tensor, in node order.
pub fn parameter_checksum<T: Scalar>(net: &Network<T>) -> String {
    let mut h = Sha256::new();
    for node in net.nodes() {
        for t in node.tensors() {
            h.update(t.key.as_bytes());
            for d in t.data.shape() {
                h.update((d as u64).to_le_bytes());
            }
            match t.data {
                TensorData::Float(a) => a.iter().for_each(|v| h.update(v.as_f64().to_le_bytes())),
                TensorData::Int8(a) => a.iter().for_each(|v| h.update(v.to_le_bytes())),
                TensorData::Half(a) => a.iter().for_each(|v| h.update(v.to_bits().to_le_bytes())),
                TensorData::F32(a) => a.iter().for_each(|v| h.update(v.to_le_bytes())),
            }
        }
    }
    format!("{:x}", h.finalize())
}

/// Patterns are anchored; exposed so callers can test a selector against names.
pub fn selector_matches(pattern: &str, name: &str) -> Result<bool> {
    Ok(compile_pattern(pattern)?.is_match(name))
}
