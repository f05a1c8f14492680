//! Channel-coupling analysis over the dataflow graph.

use std::collections::BTreeMap;

use profagent_nn::{Dense, Network, Op, Scalar};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::zoo::{InputSpec, ModelHandle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Rows of a producing conv/linear weight (and its bias).
    OutChannels,
    /// Columns of a consuming conv/linear weight.
    InChannels,
    /// Per-channel tensors carried along: norm parameters, tokens, depthwise filters.
    Channels,
    /// Head slices of an attention projection.
    Heads,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Channels,
    Heads,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupMember {
    /// Qualified layer name; a projection name for attention members.
    pub layer: String,
    /// Graph node holding the tensors.
    pub node: String,
    pub axis: Axis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneGroup {
    pub group_id: usize,
    pub kind: GroupKind,
    pub members: Vec<GroupMember>,
    pub width: usize,
    /// Input, output and reshape-bound groups cannot change width.
    pub frozen: bool,
}

impl PruneGroup {
    pub fn producers(&self) -> impl Iterator<Item = &GroupMember> {
        self.members
            .iter()
            .filter(|m| matches!(m.axis, Axis::OutChannels | Axis::Heads))
    }

    pub fn is_prunable(&self) -> bool {
        !self.frozen && self.width > 1 && self.producers().next().is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyGraph {
    pub groups: Vec<PruneGroup>,
    pub layer_to_groups: BTreeMap<String, Vec<usize>>,
}

impl DependencyGraph {
    pub fn group(&self, id: usize) -> &PruneGroup {
        &self.groups[id]
    }

    /// Group whose width is the output width of `layer`.
    pub fn output_group(&self, layer: &str) -> Option<&PruneGroup> {
        self.layer_to_groups.get(layer)?.iter().map(|&g| &self.groups[g]).find(|g| {
            g.members
                .iter()
                .any(|m| m.layer == layer && matches!(m.axis, Axis::OutChannels | Axis::Channels | Axis::Heads))
        })
    }

    /// Head group of an attention block, addressed by block or projection name.
    pub fn head_group(&self, layer: &str) -> Option<&PruneGroup> {
        self.layer_to_groups
            .get(layer)?
            .iter()
            .map(|&g| &self.groups[g])
            .find(|g| g.kind == GroupKind::Heads)
    }

    pub fn prunable_groups(&self) -> impl Iterator<Item = &PruneGroup> {
        self.groups.iter().filter(|g| g.is_prunable())
    }
}

struct Slots {
    parent: Vec<usize>,
    width: Vec<usize>,
    frozen: Vec<bool>,
    members: Vec<Vec<GroupMember>>,
}

impl Slots {
    fn new_slot(&mut self, width: usize, frozen: bool) -> usize {
        let id = self.parent.len();
        self.parent.push(id);
        self.width.push(width);
        self.frozen.push(frozen);
        self.members.push(Vec::new());
        id
    }

    fn find(&mut self, mut s: usize) -> usize {
        while self.parent[s] != s {
            self.parent[s] = self.parent[self.parent[s]];
            s = self.parent[s];
        }
        s
    }

    fn union(&mut self, a: usize, b: usize) -> usize {
        let (a, b) = (self.find(a), self.find(b));
        if a == b {
            return a;
        }
        // the older slot stays root so group ids follow definition order
        let (root, child) = if a < b { (a, b) } else { (b, a) };
        self.parent[child] = root;
        self.frozen[root] |= self.frozen[child];
        let moved = std::mem::take(&mut self.members[child]);
        self.members[root].extend(moved);
        root
    }

    fn freeze(&mut self, s: usize) {
        let r = self.find(s);
        self.frozen[r] = true;
    }

    fn add(&mut self, s: usize, layer: &str, node: &str, axis: Axis) {
        let r = self.find(s);
        self.members[r].push(GroupMember { layer: layer.to_string(), node: node.to_string(), axis });
    }
}

fn channel_width(shape: &[usize]) -> usize {
    match shape.len() {
        2 => shape[1],
        0 => 1,
        _ => shape[0],
    }
}

pub fn build_dependency_graph<T: Scalar>(handle: &ModelHandle<T>, spec: &InputSpec) -> Result<DependencyGraph> {
    build_network_graph(&handle.network, spec)
}

pub fn build_network_graph<T: Scalar>(net: &Network<T>, spec: &InputSpec) -> Result<DependencyGraph> {
    let shapes = net
        .infer_shapes(&spec.shape())
        .map_err(|e| Error::TraceFailure(e.to_string()))?;
    let mut slots = Slots { parent: Vec::new(), width: Vec::new(), frozen: Vec::new(), members: Vec::new() };
    let mut node_slot = vec![usize::MAX; net.nodes().len()];
    let mut head_groups: Vec<PruneGroup> = Vec::new();

    for (i, node) in net.nodes().iter().enumerate() {
        let name = node.name.as_str();
        let width = channel_width(&shapes[i]);
        let input = node.inputs.first().map(|&j| node_slot[j]);
        let inp = || input.ok_or_else(|| Error::TraceFailure(format!("node `{name}` has no input")));
        let slot = match &node.op {
            Op::Input => slots.new_slot(width, true),
            Op::Conv2d(c) => {
                let s_in = inp()?;
                if c.groups == 1 {
                    slots.add(s_in, name, name, Axis::InChannels);
                    let s = slots.new_slot(width, false);
                    slots.add(s, name, name, Axis::OutChannels);
                    s
                } else if c.is_depthwise() {
                    slots.add(s_in, name, name, Axis::Channels);
                    s_in
                } else {
                    slots.freeze(s_in);
                    slots.new_slot(width, true)
                }
            }
            Op::Linear(Dense::Float(_)) => {
                let s_in = inp()?;
                slots.add(s_in, name, name, Axis::InChannels);
                let s = slots.new_slot(width, false);
                slots.add(s, name, name, Axis::OutChannels);
                s
            }
            Op::Linear(_) => {
                slots.freeze(inp()?);
                slots.new_slot(width, true)
            }
            Op::BatchNorm2d(_) | Op::LayerNorm(_) | Op::ClassToken(_) | Op::PositionEmbedding(_) => {
                let s = inp()?;
                slots.add(s, name, name, Axis::Channels);
                s
            }
            Op::Relu
            | Op::Gelu
            | Op::MaxPool2d { .. }
            | Op::GlobalAvgPool
            | Op::PatchTokens
            | Op::SelectToken(_)
            | Op::MeanTokens => inp()?,
            Op::Flatten => {
                let s = inp()?;
                let in_shape = &shapes[node.inputs[0]];
                if in_shape.len() == 3 && in_shape[1] * in_shape[2] > 1 {
                    slots.freeze(s);
                    slots.new_slot(width, true)
                } else {
                    s
                }
            }
            Op::Add => {
                let mut s = inp()?;
                for &j in &node.inputs[1..] {
                    s = slots.union(s, node_slot[j]);
                }
                s
            }
            Op::Attention(a) => {
                let s_in = inp()?;
                let all_float = a.projections().iter().all(|p| matches!(p.dense, Dense::Float(_)));
                for p in [&a.query, &a.key, &a.value] {
                    slots.add(s_in, &p.name, name, Axis::InChannels);
                }
                if !all_float {
                    slots.freeze(s_in);
                }
                let s = slots.new_slot(width, !all_float);
                slots.add(s, &a.output.name, name, Axis::OutChannels);
                head_groups.push(PruneGroup {
                    group_id: 0,
                    kind: GroupKind::Heads,
                    members: a
                        .projections()
                        .iter()
                        .map(|p| GroupMember { layer: p.name.clone(), node: name.to_string(), axis: Axis::Heads })
                        .collect(),
                    width: a.num_heads,
                    frozen: !all_float,
                });
                s
            }
        };
        node_slot[i] = slots.find(slot);
    }
    if let Some(&last) = node_slot.last() {
        slots.freeze(last);
    }

    let mut groups = Vec::new();
    for s in 0..slots.parent.len() {
        if slots.find(s) != s || slots.members[s].is_empty() {
            continue;
        }
        groups.push(PruneGroup {
            group_id: groups.len(),
            kind: GroupKind::Channels,
            members: std::mem::take(&mut slots.members[s]),
            width: slots.width[s],
            frozen: slots.frozen[s],
        });
    }
    for mut g in head_groups {
        g.group_id = groups.len();
        groups.push(g);
    }

    let mut layer_to_groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for g in &groups {
        for m in &g.members {
            for key in [&m.layer, &m.node] {
                let ids = layer_to_groups.entry(key.clone()).or_default();
                if !ids.contains(&g.group_id) {
                    ids.push(g.group_id);
                }
            }
        }
    }
    Ok(DependencyGraph { groups, layer_to_groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::fixtures;

    fn graph(name: &str) -> DependencyGraph {
        let h = fixtures::build::<f32>(name).unwrap().unwrap();
        let spec = InputSpec::image(h.input_shape()[0], h.input_shape()[1], h.input_shape()[2]);
        build_dependency_graph(&h, &spec).unwrap()
    }

    #[test]
    fn conv_chain_couples_producer_and_consumer() {
        let g = graph(fixtures::TINY_CNN);
        let grp = g.output_group("features.0").unwrap();
        assert!(grp.members.iter().any(|m| m.layer == "features.2" && m.axis == Axis::InChannels));
        assert_eq!(grp.width, 8);
        assert!(grp.is_prunable());
        // classifier output is the network output
        assert!(g.output_group("classifier").unwrap().frozen);
    }

    #[test]
    fn residual_branches_share_a_group() {
        let g = graph(fixtures::TINY_RESIDUAL);
        let a = g.output_group("branch_a.1").unwrap().group_id;
        let b = g.output_group("branch_b.0").unwrap().group_id;
        assert_eq!(a, b);
        assert!(g.group(a).members.iter().any(|m| m.layer == "head" && m.axis == Axis::InChannels));
    }

    #[test]
    fn attention_head_group_membership() {
        let g = graph(fixtures::TINY_VIT);
        let cfg = fixtures::tiny_vit_config();
        let block = format!("{}.encoder.layer.0.attention", cfg.prefix);
        let hg = g.head_group(&block).unwrap();
        assert_eq!(hg.width, cfg.heads);
        let names: Vec<_> = hg.members.iter().map(|m| m.layer.clone()).collect();
        let base = format!("{}.encoder.layer.0.attention", cfg.prefix);
        assert_eq!(
            names,
            vec![
                format!("{base}.attention.query"),
                format!("{base}.attention.key"),
                format!("{base}.attention.value"),
                format!("{base}.output.dense"),
            ]
        );
    }

    #[test]
    fn flatten_over_space_freezes() {
        let g = graph(fixtures::TINY_MLP);
        assert!(g.output_group("fc1").unwrap().is_prunable());
        let fc1_in = g
            .groups
            .iter()
            .find(|grp| grp.members.iter().any(|m| m.layer == "fc1" && m.axis == Axis::InChannels))
            .unwrap();
        assert!(fc1_in.frozen);
    }
}
