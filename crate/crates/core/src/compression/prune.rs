//! Structured channel and head pruning over dependency groups.

use std::collections::BTreeMap;

use ndarray::{ArrayD, Axis as NdAxis};
use profagent_nn::{Dense, Node, Op, Scalar};
use serde::{Deserialize, Serialize};

use super::graph::{Axis, DependencyGraph, GroupKind, GroupMember, PruneGroup};
use crate::baselines::{l1_importance, l2_importance, random_selection};
use crate::error::{Error, Result};
use crate::zoo::{probe_input, ModelHandle};

/// Channel ranking used to pick which indices go.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum Importance {
    L1,
    #[default]
    L2,
    Random { seed: u64 },
}

/// Number of indices removed from a group of `width` at `ratio`: floor, keeping at least one.
pub fn removal_count(width: usize, ratio: f64) -> usize {
    // the epsilon absorbs representation error such as 0.1 * 30 = 2.9999999999999996
    let n = (ratio * width as f64 + 1e-9).floor().max(0.0) as usize;
    n.min(width.saturating_sub(1))
}

/// Indices of the `n` lowest scores; ties go to the lower index.
pub fn lowest_indices(scores: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut out: Vec<usize> = order.into_iter().take(n).collect();
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWidthChange {
    pub layer: String,
    pub channels_before: usize,
    pub channels_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupChange {
    pub group_id: usize,
    pub kind: GroupKind,
    pub width_before: usize,
    pub width_after: usize,
    pub removed: Vec<usize>,
    pub directive: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSummary {
    pub layers: Vec<LayerWidthChange>,
    pub params_before: u64,
    pub params_after: u64,
    pub applied_directives: Vec<String>,
    pub groups: Vec<GroupChange>,
    pub warnings: Vec<String>,
}

/// A group scheduled for pruning and the directive that asked for it.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupTarget {
    pub group_id: usize,
    pub ratio: f64,
    pub directive: String,
}

fn member_node<'a, T: Scalar>(handle: &'a ModelHandle<T>, m: &GroupMember) -> Result<&'a Node<T>> {
    handle
        .network
        .node(&m.node)
        .ok_or_else(|| Error::TraceFailure(format!("graph refers to missing node `{}`", m.node)))
}

fn dense_weight<'a, T: Scalar>(d: &'a Dense<T>, name: &str) -> Result<&'a ArrayD<T>> {
    d.as_float()
        .map(|l| &l.weight)
        .ok_or_else(|| Error::TraceFailure(format!("`{name}` is quantized and cannot be pruned")))
}

fn projection<'a, T: Scalar>(node: &'a Node<T>, layer: &str) -> Result<&'a Dense<T>> {
    match &node.op {
        Op::Attention(a) => a
            .projections()
            .into_iter()
            .find(|p| p.name == layer)
            .map(|p| &p.dense)
            .ok_or_else(|| Error::TraceFailure(format!("no projection `{layer}` in `{}`", node.name))),
        Op::Linear(d) => Ok(d),
        _ => Err(Error::TraceFailure(format!("`{}` has no dense weight", node.name))),
    }
}

/// Weight rows (one per output channel, filters flattened) of a producing member.
fn producer_rows<T: Scalar>(node: &Node<T>, m: &GroupMember) -> Result<Vec<Vec<f64>>> {
    let w = match &node.op {
        Op::Conv2d(c) => &c.weight,
        _ => dense_weight(projection(node, &m.layer)?, &m.layer)?,
    };
    let rows = w.shape()[0];
    Ok((0..rows)
        .map(|r| w.index_axis(NdAxis(0), r).iter().map(|v| v.as_f64()).collect())
        .collect())
}

/// Per-index rows for a group: channels for channel groups, whole heads for head groups.
fn group_rows<T: Scalar>(handle: &ModelHandle<T>, group: &PruneGroup) -> Result<Vec<Vec<f64>>> {
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); group.width];
    for m in group.producers() {
        let node = member_node(handle, m)?;
        match group.kind {
            GroupKind::Channels => {
                for (i, r) in producer_rows(node, m)?.into_iter().enumerate() {
                    rows[i].extend(r);
                }
            }
            GroupKind::Heads => {
                let Op::Attention(a) = &node.op else {
                    return Err(Error::TraceFailure(format!("`{}` is not an attention block", m.node)));
                };
                // the output projection's columns are not part of the head score
                if m.layer == a.output.name {
                    continue;
                }
                let hd = a.head_dim;
                for (i, r) in producer_rows(node, m)?.into_iter().enumerate() {
                    rows[i / hd].extend(r);
                }
            }
        }
    }
    Ok(rows)
}

/// Indices to remove from `group`.
pub fn select_removed<T: Scalar>(
    handle: &ModelHandle<T>,
    group: &PruneGroup,
    n: usize,
    importance: Importance,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    match importance {
        Importance::Random { seed } => Ok(random_selection(group.width, n, seed.wrapping_add(group.group_id as u64))),
        Importance::L1 | Importance::L2 => {
            let rows = group_rows(handle, group)?;
            let scores = if importance == Importance::L1 { l1_importance(&rows) } else { l2_importance(&rows) };
            Ok(lowest_indices(&scores, n))
        }
    }
}

fn keep_from_removed(width: usize, removed: &[usize]) -> Vec<usize> {
    (0..width).filter(|i| removed.binary_search(i).is_err()).collect()
}

fn slice(a: &mut ArrayD<impl Clone>, axis: usize, keep: &[usize]) {
    *a = a.select(NdAxis(axis), keep).as_standard_layout().into_owned();
}

fn slice_dense<T: Scalar>(d: &mut Dense<T>, axis: usize, keep: &[usize], name: &str) -> Result<()> {
    let l = d
        .as_float_mut()
        .ok_or_else(|| Error::TraceFailure(format!("`{name}` is quantized and cannot be pruned")))?;
    slice(&mut l.weight, axis, keep);
    if axis == 0 {
        if let Some(b) = l.bias.as_mut() {
            slice(b, 0, keep);
        }
    }
    Ok(())
}

fn apply_member<T: Scalar>(node: &mut Node<T>, m: &GroupMember, keep: &[usize]) -> Result<()> {
    let last = |a: &ArrayD<T>| a.ndim() - 1;
    match (&mut node.op, m.axis) {
        (Op::Conv2d(c), Axis::OutChannels) => {
            slice(&mut c.weight, 0, keep);
            if let Some(b) = c.bias.as_mut() {
                slice(b, 0, keep);
            }
        }
        (Op::Conv2d(c), Axis::InChannels) => slice(&mut c.weight, 1, keep),
        (Op::Conv2d(c), Axis::Channels) => {
            // depthwise: one filter per channel
            slice(&mut c.weight, 0, keep);
            if let Some(b) = c.bias.as_mut() {
                slice(b, 0, keep);
            }
            c.groups = keep.len();
        }
        (Op::Linear(d), Axis::OutChannels) => slice_dense(d, 0, keep, &m.layer)?,
        (Op::Linear(d), Axis::InChannels) => slice_dense(d, 1, keep, &m.layer)?,
        (Op::BatchNorm2d(bn), Axis::Channels) => {
            for t in [&mut bn.weight, &mut bn.bias, &mut bn.running_mean, &mut bn.running_var] {
                slice(t, 0, keep);
            }
        }
        (Op::LayerNorm(ln), Axis::Channels) => {
            slice(&mut ln.weight, 0, keep);
            slice(&mut ln.bias, 0, keep);
        }
        (Op::ClassToken(t), Axis::Channels) => {
            let ax = last(&t.token);
            slice(&mut t.token, ax, keep);
        }
        (Op::PositionEmbedding(p), Axis::Channels) => {
            let ax = last(&p.table);
            slice(&mut p.table, ax, keep);
        }
        (Op::Attention(a), Axis::InChannels | Axis::OutChannels) => {
            let axis = if m.axis == Axis::OutChannels { 0 } else { 1 };
            let p = a
                .projections_mut()
                .into_iter()
                .find(|p| p.name == m.layer)
                .ok_or_else(|| Error::TraceFailure(format!("no projection `{}`", m.layer)))?;
            slice_dense(&mut p.dense, axis, keep, &m.layer)?;
        }
        (Op::Attention(a), Axis::Heads) => {
            let hd = a.head_dim;
            let cols: Vec<usize> = keep.iter().flat_map(|&h| h * hd..(h + 1) * hd).collect();
            let is_output = a.output.name == m.layer;
            let p = a
                .projections_mut()
                .into_iter()
                .find(|p| p.name == m.layer)
                .ok_or_else(|| Error::TraceFailure(format!("no projection `{}`", m.layer)))?;
            slice_dense(&mut p.dense, if is_output { 1 } else { 0 }, &cols, &m.layer)?;
        }
        (_, axis) => {
            return Err(Error::TraceFailure(format!(
                "cannot slice `{}` along {axis:?}",
                m.layer
            )))
        }
    }
    Ok(())
}

/// Width of a member's tensors along its group axis, read from the model itself.
pub fn member_width<T: Scalar>(handle: &ModelHandle<T>, m: &GroupMember) -> Result<usize> {
    let node = member_node(handle, m)?;
    let dense_dim = |d: &Dense<T>, axis: Axis| match axis {
        Axis::InChannels => d.in_features(),
        _ => d.out_features(),
    };
    Ok(match (&node.op, m.axis) {
        (Op::Conv2d(c), Axis::InChannels) => c.in_channels(),
        (Op::Conv2d(c), _) => c.out_channels(),
        (Op::Linear(d), axis) => dense_dim(d, axis),
        (Op::BatchNorm2d(bn), _) => bn.channels(),
        (Op::LayerNorm(ln), _) => ln.dim(),
        (Op::ClassToken(t), _) => *t.token.shape().last().unwrap_or(&0),
        (Op::PositionEmbedding(p), _) => *p.table.shape().last().unwrap_or(&0),
        (Op::Attention(a), Axis::Heads) => {
            let d = projection(node, &m.layer)?;
            let w = if a.output.name == m.layer { d.in_features() } else { d.out_features() };
            if w % a.head_dim != 0 || w / a.head_dim != a.num_heads {
                return Err(Error::TraceFailure(format!("`{}` is not a whole number of heads", m.layer)));
            }
            a.num_heads
        }
        (Op::Attention(_), axis) => dense_dim(projection(node, &m.layer)?, axis),
        _ => return Err(Error::TraceFailure(format!("`{}` has no group axis", m.layer))),
    })
}

fn output_shape<T: Scalar>(handle: &ModelHandle<T>) -> Result<Vec<usize>> {
    let shapes = handle.network.infer_shapes(&handle.input_shape()).map_err(|e| Error::BrokenForward(e.to_string()))?;
    Ok(shapes.last().cloned().unwrap_or_default())
}

/// Forward a probe and require finite output of the expected shape.
pub fn check_forward<T: Scalar>(handle: &ModelHandle<T>, expected: &[usize], seed: u64) -> Result<()> {
    let x = probe_input::<T>(&handle.input_shape(), seed);
    let y = handle.network.forward(&x).map_err(|e| Error::BrokenForward(e.to_string()))?;
    if y.shape() != expected {
        return Err(Error::BrokenForward(format!("output shape {:?}, expected {expected:?}", y.shape())));
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::BrokenForward("non-finite output".into()));
    }
    Ok(())
}

/// Prune every targeted group in one pass. Keep-sets are all chosen against the
/// unmodified weights before any tensor is sliced.
pub fn prune_groups<T: Scalar>(
    handle: &mut ModelHandle<T>,
    graph: &DependencyGraph,
    targets: &[GroupTarget],
    importance: Importance,
) -> Result<PruneSummary> {
    let params_before = handle.param_count();
    let expected = output_shape(handle)?;
    let mut warnings = Vec::new();
    let mut plans: Vec<(GroupChange, Vec<usize>)> = Vec::new();
    for t in targets {
        let group = graph.group(t.group_id);
        if group.frozen {
            warnings.push(format!("group {} is fixed by the model interface; `{}` skipped", t.group_id, t.directive));
            continue;
        }
        if group.width <= 1 {
            warnings.push(format!("group {} has width {}; `{}` skipped", t.group_id, group.width, t.directive));
            continue;
        }
        let n = removal_count(group.width, t.ratio);
        let removed = select_removed(handle, group, n, importance)?;
        let keep = keep_from_removed(group.width, &removed);
        plans.push((
            GroupChange {
                group_id: t.group_id,
                kind: group.kind,
                width_before: group.width,
                width_after: keep.len(),
                removed,
                directive: t.directive.clone(),
            },
            keep,
        ));
    }

    let mut layers = Vec::new();
    for (change, keep) in &plans {
        let group = graph.group(change.group_id);
        if change.removed.is_empty() {
            continue;
        }
        for m in &group.members {
            let node = handle
                .network
                .node_mut(&m.node)
                .ok_or_else(|| Error::TraceFailure(format!("graph refers to missing node `{}`", m.node)))?;
            apply_member(node, m, keep)?;
        }
        if group.kind == GroupKind::Heads {
            let node = handle.network.node_mut(&group.members[0].node).expect("checked above");
            if let Op::Attention(a) = &mut node.op {
                a.num_heads = keep.len();
            }
        }
    }
    for (change, _) in &plans {
        let group = graph.group(change.group_id);
        for m in group.members.iter().filter(|m| m.axis != Axis::InChannels) {
            layers.push(LayerWidthChange {
                layer: m.layer.clone(),
                channels_before: change.width_before,
                channels_after: change.width_after,
            });
        }
    }

    check_forward(handle, &expected, 0)?;
    let mut applied: Vec<String> = Vec::new();
    for (c, _) in &plans {
        if !applied.contains(&c.directive) {
            applied.push(c.directive.clone());
        }
    }
    Ok(PruneSummary {
        layers,
        params_before,
        params_after: handle.param_count(),
        applied_directives: applied,
        groups: plans.into_iter().map(|(c, _)| c).collect(),
        warnings,
    })
}

/// Resolve layer names to the channel groups their outputs belong to.
pub fn structured_targets(
    graph: &DependencyGraph,
    layers: &[String],
    ratio: f64,
    directive: &str,
    warnings: &mut Vec<String>,
) -> BTreeMap<usize, GroupTarget> {
    let mut out = BTreeMap::new();
    for layer in layers {
        let group = graph.layer_to_groups.get(layer).and_then(|ids| {
            ids.iter().map(|&g| graph.group(g)).find(|g| {
                g.kind == GroupKind::Channels
                    && g.members.iter().any(|m| &m.layer == layer && m.axis == Axis::OutChannels)
            })
        });
        match group {
            Some(g) => {
                out.insert(g.group_id, GroupTarget { group_id: g.group_id, ratio, directive: directive.to_string() });
            }
            None => warnings.push(format!(
                "`{layer}` has no prunable output channels (attention projections are pruned by head)"
            )),
        }
    }
    out
}

pub fn head_targets(
    graph: &DependencyGraph,
    layers: &[String],
    ratio: f64,
    directive: &str,
    warnings: &mut Vec<String>,
) -> BTreeMap<usize, GroupTarget> {
    let mut out = BTreeMap::new();
    for layer in layers {
        match graph.head_group(layer) {
            Some(g) => {
                out.insert(g.group_id, GroupTarget { group_id: g.group_id, ratio, directive: directive.to_string() });
            }
            None => warnings.push(format!("`{layer}` is not an attention block")),
        }
    }
    out
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("pruning ratio {ratio} must lie in (0, 1)")))
    }
}

/// Remove `floor(ratio * width)` output channels from the groups of `layers`.
pub fn apply_structured_pruning<T: Scalar>(
    handle: &mut ModelHandle<T>,
    graph: &DependencyGraph,
    layers: &[String],
    ratio: f64,
    importance: Importance,
) -> Result<PruneSummary> {
    check_ratio(ratio)?;
    let mut warnings = Vec::new();
    let targets = structured_targets(graph, layers, ratio, "structured", &mut warnings);
    let mut summary = prune_groups(handle, graph, &targets.into_values().collect::<Vec<_>>(), importance)?;
    warnings.append(&mut summary.warnings);
    summary.warnings = warnings;
    Ok(summary)
}

/// Remove `floor(ratio * heads)` heads from each attention block in `layers`.
pub fn apply_head_pruning<T: Scalar>(
    handle: &mut ModelHandle<T>,
    graph: &DependencyGraph,
    layers: &[String],
    ratio: f64,
    importance: Importance,
) -> Result<PruneSummary> {
    check_ratio(ratio)?;
    let mut warnings = Vec::new();
    let targets = head_targets(graph, layers, ratio, "head", &mut warnings);
    let mut summary = prune_groups(handle, graph, &targets.into_values().collect::<Vec<_>>(), importance)?;
    warnings.append(&mut summary.warnings);
    summary.warnings = warnings;
    Ok(summary)
}
