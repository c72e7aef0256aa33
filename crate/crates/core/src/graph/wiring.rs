//! Expansion of an [`ArchitectureSpec`] into an explicit wiring plan.
//!
//! Every computational node (3x3x3 conv layer, 1x1x1 layer, classifier) is
//! listed with the exact sequence of feature blocks it concatenates as input.
//! Block order matters: it fixes which weight slice talks to which source,
//! and the connection-reuse analysis depends on it. The rules are:
//!
//! * Layer 1 of stream s reads only input stream s.
//! * Within-stream dense wiring presents earlier blocks depth-descending:
//!   layer l reads `[l-1, l-2, ..., 1]`.
//! * Cross-stream dense wiring additionally interleaves, per depth, the
//!   blocks of every stream, ordered by the spec's permutation rule (own
//!   stream first by default).
//! * The 1x1x1 stage reads, for each surviving stream in ascending order,
//!   that stream's full accumulated state: every conv block it can see, in
//!   its own permutation order. Cross-wired streams each see all blocks, so
//!   the same block appears once per stream view.
//! * Within the 1x1x1 stage the layers form a plain chain.
//!
//! Spatial alignment: deeper blocks are smaller (valid convolutions erode 2
//! voxels per axis), so consumers centre-crop every source block to the
//! smallest one before concatenating.

use super::{ArchitectureSpec, FusionMode, PermutationRule};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Identity of a feature block: a network input, the output of a conv layer
/// (stream and 1-based depth), a 1x1x1 layer output, or the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKey {
    /// Input of stream `s` (1-based).
    Input { stream: usize },
    /// Output of conv layer `layer` of stream `stream` (both 1-based).
    Conv { stream: usize, layer: usize },
    /// Output of 1x1x1 layer `index` (0-based).
    Fc { index: usize },
    Classifier,
}

impl NodeKey {
    /// Short stable name: `s2L0` (input), `s1L4` (conv), `fc1`, `cls`.
    pub fn name(&self) -> String {
        match self {
            NodeKey::Input { stream } => format!("s{stream}L0"),
            NodeKey::Conv { stream, layer } => format!("s{stream}L{layer}"),
            NodeKey::Fc { index } => format!("fc{}", index + 1),
            NodeKey::Classifier => "cls".to_string(),
        }
    }
}

impl std::fmt::Display for NodeKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

/// One computational node and the blocks it concatenates, in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeDesc {
    pub key: NodeKey,
    pub sources: Vec<NodeKey>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub prelu: bool,
    pub dropout: bool,
}

/// Fully expanded wiring in execution (topological) order: conv layers
/// depth-major with streams ascending, then the 1x1x1 chain, then the
/// classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WiringPlan {
    pub spec: ArchitectureSpec,
    pub nodes: Vec<NodeDesc>,
}

impl WiringPlan {
    pub fn node_index(&self, key: NodeKey) -> Option<usize> {
        self.nodes.iter().position(|n| n.key == key)
    }

    /// Channels a block contributes when used as a source.
    pub fn channels_of(&self, key: NodeKey) -> usize {
        match key {
            NodeKey::Input { stream } => self.spec.input_channels(stream),
            NodeKey::Conv { layer, .. } => self.spec.conv_kernels[layer - 1],
            NodeKey::Fc { index } => self.spec.fc_kernels[index],
            NodeKey::Classifier => self.spec.num_classes,
        }
    }
}

/// Streams that own a conv layer at depth `layer`.
fn streams_at(spec: &ArchitectureSpec, layer: usize) -> Vec<usize> {
    match spec.fusion_mode {
        FusionMode::SingleDense => vec![1],
        FusionMode::DualDense | FusionMode::HyperDense => (1..=spec.num_modalities).collect(),
        FusionMode::DualSingle => {
            if layer == 1 {
                (1..=spec.num_modalities).collect()
            } else {
                vec![1]
            }
        }
    }
}

/// Stream order in which consumer stream `s` reads one depth's blocks.
fn stream_order(spec: &ArchitectureSpec, consumer: usize, depth_streams: &[usize]) -> Vec<usize> {
    match spec.permutation_rule {
        PermutationRule::StreamAscending => depth_streams.to_vec(),
        PermutationRule::OwnStreamFirst => {
            let mut order = Vec::with_capacity(depth_streams.len());
            if depth_streams.contains(&consumer) {
                order.push(consumer);
            }
            order.extend(depth_streams.iter().copied().filter(|&t| t != consumer));
            order
        }
    }
}

/// Accumulated dense state visible to stream `consumer` after `upto` conv
/// layers: for each depth from `upto` down to 1, that depth's blocks in the
/// consumer's stream order (own stream only for fusion modes without cross
/// links).
fn dense_state(spec: &ArchitectureSpec, consumer: usize, upto: usize) -> Vec<NodeKey> {
    let mut blocks = Vec::new();
    for depth in (1..=upto).rev() {
        match spec.fusion_mode {
            FusionMode::SingleDense | FusionMode::DualDense => {
                blocks.push(NodeKey::Conv { stream: consumer, layer: depth });
            }
            FusionMode::HyperDense => {
                let at = streams_at(spec, depth);
                for t in stream_order(spec, consumer, &at) {
                    blocks.push(NodeKey::Conv { stream: t, layer: depth });
                }
            }
            FusionMode::DualSingle => {
                let at = streams_at(spec, depth);
                for t in stream_order(spec, consumer, &at) {
                    blocks.push(NodeKey::Conv { stream: t, layer: depth });
                }
            }
        }
    }
    blocks
}

/// Expand a spec into its wiring plan.
pub fn plan_wiring(spec: &ArchitectureSpec) -> Result<WiringPlan> {
    spec.validate()?;
    let depth = spec.conv_depth();
    let mut nodes = Vec::new();

    for layer in 1..=depth {
        for s in streams_at(spec, layer) {
            let sources = if layer == 1 {
                vec![NodeKey::Input { stream: s }]
            } else {
                dense_state(spec, s, layer - 1)
            };
            nodes.push(NodeDesc {
                key: NodeKey::Conv { stream: s, layer },
                sources,
                in_channels: 0, // filled below
                out_channels: spec.conv_kernels[layer - 1],
                kernel: 3,
                prelu: true,
                dropout: false,
            });
        }
    }

    // 1x1x1 stage input: per surviving stream (ascending), its full state.
    let mut fc_input = Vec::new();
    for s in streams_at(spec, depth) {
        fc_input.extend(dense_state(spec, s, depth));
    }

    for (i, &width) in spec.fc_kernels.iter().enumerate() {
        let sources = if i == 0 { fc_input.clone() } else { vec![NodeKey::Fc { index: i - 1 }] };
        nodes.push(NodeDesc {
            key: NodeKey::Fc { index: i },
            sources,
            in_channels: 0,
            out_channels: width,
            kernel: 1,
            prelu: true,
            dropout: true,
        });
    }

    let cls_sources = if spec.fc_kernels.is_empty() {
        fc_input
    } else {
        vec![NodeKey::Fc { index: spec.fc_kernels.len() - 1 }]
    };
    nodes.push(NodeDesc {
        key: NodeKey::Classifier,
        sources: cls_sources,
        in_channels: 0,
        out_channels: spec.num_classes,
        kernel: 1,
        prelu: false,
        dropout: false,
    });

    let mut plan = WiringPlan { spec: spec.clone(), nodes };
    for i in 0..plan.nodes.len() {
        let sum: usize = plan.nodes[i].sources.iter().map(|&k| plan.channels_of(k)).sum();
        plan.nodes[i].in_channels = sum;
    }

    // Sanity: every source must be an input or an earlier node.
    for (i, node) in plan.nodes.iter().enumerate() {
        for src in &node.sources {
            let ok = match src {
                NodeKey::Input { stream } => *stream >= 1 && *stream <= spec.input_streams(),
                key => plan.node_index(*key).map(|j| j < i).unwrap_or(false),
            };
            if !ok {
                return Err(Error::InvalidArchitecture(format!(
                    "node {} reads {} which is not defined before it",
                    node.key, src
                )));
            }
        }
    }
    Ok(plan)
}

/// One row of the human-readable wiring table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WiringRow {
    pub id: String,
    pub kernel: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub prelu: bool,
    pub dropout: bool,
    pub sources: Vec<String>,
}

/// Resolved architecture summary for the `describe` command.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DescribeReport {
    pub fusion_mode: String,
    pub num_modalities: usize,
    pub input_streams: usize,
    pub num_classes: usize,
    pub conv_layers: usize,
    pub pointwise_layers: usize,
    /// Cubic receptive field edge of one output voxel.
    pub receptive_field: usize,
    /// Voxels lost per axis side between input and output.
    pub margin: usize,
    pub parameters: super::ParameterCount,
    pub nodes: Vec<WiringRow>,
}

pub fn describe(spec: &ArchitectureSpec) -> Result<DescribeReport> {
    let plan = plan_wiring(spec)?;
    let params = super::params::count_plan(&plan);
    let nodes = plan
        .nodes
        .iter()
        .map(|n| WiringRow {
            id: n.key.name(),
            kernel: format!("{0}x{0}x{0}", n.kernel),
            in_channels: n.in_channels,
            out_channels: n.out_channels,
            prelu: n.prelu,
            dropout: n.dropout,
            sources: n.sources.iter().map(|s| s.name()).collect(),
        })
        .collect();
    Ok(DescribeReport {
        fusion_mode: spec.fusion_mode.as_str().to_string(),
        num_modalities: spec.num_modalities,
        input_streams: spec.input_streams(),
        num_classes: spec.num_classes,
        conv_layers: spec.conv_depth(),
        pointwise_layers: spec.fc_kernels.len(),
        receptive_field: spec.receptive_field(),
        margin: spec.margin(),
        parameters: params,
        nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::preset;

    fn names(keys: &[NodeKey]) -> Vec<String> {
        keys.iter().map(|k| k.name()).collect()
    }

    #[test]
    fn hyper_dense_layer_sees_all_streams_depth_descending_own_first() {
        let spec = preset("hyperdense-2mod").unwrap();
        let plan = plan_wiring(&spec).unwrap();
        let l4s1 = &plan.nodes[plan.node_index(NodeKey::Conv { stream: 1, layer: 4 }).unwrap()];
        assert_eq!(
            names(&l4s1.sources),
            vec!["s1L3", "s2L3", "s1L2", "s2L2", "s1L1", "s2L1"]
        );
        let l4s2 = &plan.nodes[plan.node_index(NodeKey::Conv { stream: 2, layer: 4 }).unwrap()];
        assert_eq!(
            names(&l4s2.sources),
            vec!["s2L3", "s1L3", "s2L2", "s1L2", "s2L1", "s1L1"]
        );
        // in channels at layer 4: both streams' layers 1-3 = 2 * (25+25+25)
        assert_eq!(l4s1.in_channels, 150);
    }

    #[test]
    fn ascending_permutation_rule_is_honoured() {
        let mut spec = preset("hyperdense-2mod").unwrap();
        spec.permutation_rule = PermutationRule::StreamAscending;
        let plan = plan_wiring(&spec).unwrap();
        let l3s2 = &plan.nodes[plan.node_index(NodeKey::Conv { stream: 2, layer: 3 }).unwrap()];
        assert_eq!(names(&l3s2.sources), vec!["s1L2", "s2L2", "s1L1", "s2L1"]);
    }

    #[test]
    fn dual_dense_streams_stay_separate_until_pointwise() {
        let spec = preset("dual-2mod").unwrap();
        let plan = plan_wiring(&spec).unwrap();
        let l5s2 = &plan.nodes[plan.node_index(NodeKey::Conv { stream: 2, layer: 5 }).unwrap()];
        assert_eq!(names(&l5s2.sources), vec!["s2L4", "s2L3", "s2L2", "s2L1"]);
        let fc1 = &plan.nodes[plan.node_index(NodeKey::Fc { index: 0 }).unwrap()];
        assert_eq!(
            names(&fc1.sources),
            vec![
                "s1L9", "s1L8", "s1L7", "s1L6", "s1L5", "s1L4", "s1L3", "s1L2", "s1L1",
                "s2L9", "s2L8", "s2L7", "s2L6", "s2L5", "s2L4", "s2L3", "s2L2", "s2L1"
            ]
        );
        assert_eq!(fc1.in_channels, 900);
    }

    #[test]
    fn single_dense_reads_fused_input_once() {
        let spec = preset("single-2mod").unwrap();
        let plan = plan_wiring(&spec).unwrap();
        let l1 = &plan.nodes[plan.node_index(NodeKey::Conv { stream: 1, layer: 1 }).unwrap()];
        assert_eq!(names(&l1.sources), vec!["s1L0"]);
        assert_eq!(l1.in_channels, 2); // both modalities fused
        let l2 = &plan.nodes[plan.node_index(NodeKey::Conv { stream: 1, layer: 2 }).unwrap()];
        // raw input is not re-read by deeper layers
        assert_eq!(names(&l2.sources), vec!["s1L1"]);
        let fc1 = &plan.nodes[plan.node_index(NodeKey::Fc { index: 0 }).unwrap()];
        assert_eq!(fc1.in_channels, 450);
    }

    #[test]
    fn dual_single_merges_after_layer_one() {
        let spec = preset("dual-single-2mod").unwrap();
        let plan = plan_wiring(&spec).unwrap();
        // stream 2 only has layer 1
        assert!(plan.node_index(NodeKey::Conv { stream: 2, layer: 2 }).is_none());
        let l2 = &plan.nodes[plan.node_index(NodeKey::Conv { stream: 1, layer: 2 }).unwrap()];
        assert_eq!(names(&l2.sources), vec!["s1L1", "s2L1"]);
        let l4 = &plan.nodes[plan.node_index(NodeKey::Conv { stream: 1, layer: 4 }).unwrap()];
        assert_eq!(names(&l4.sources), vec!["s1L3", "s1L2", "s1L1", "s2L1"]);
        assert_eq!(l4.in_channels, 100);
        let fc1 = &plan.nodes[plan.node_index(NodeKey::Fc { index: 0 }).unwrap()];
        assert_eq!(fc1.in_channels, 475);
    }

    #[test]
    fn hyper_dense_pointwise_sees_each_block_once_per_stream_view() {
        let spec = preset("hyperdense-2mod").unwrap();
        let plan = plan_wiring(&spec).unwrap();
        let fc1 = &plan.nodes[plan.node_index(NodeKey::Fc { index: 0 }).unwrap()];
        assert_eq!(fc1.sources.len(), 36); // 18 blocks, twice
        assert_eq!(fc1.in_channels, 1800);
        // stream 1 view first, own-stream-first within each depth
        assert_eq!(names(&fc1.sources[0..4]), vec!["s1L9", "s2L9", "s1L8", "s2L8"]);
        // stream 2 view starts half-way
        assert_eq!(names(&fc1.sources[18..22]), vec!["s2L9", "s1L9", "s2L8", "s1L8"]);
    }

    #[test]
    fn pointwise_stage_is_a_plain_chain() {
        let spec = preset("hyperdense-2mod").unwrap();
        let plan = plan_wiring(&spec).unwrap();
        let fc2 = &plan.nodes[plan.node_index(NodeKey::Fc { index: 1 }).unwrap()];
        assert_eq!(names(&fc2.sources), vec!["fc1"]);
        assert_eq!(fc2.in_channels, 400);
        let cls = plan.nodes.last().unwrap();
        assert_eq!(cls.key, NodeKey::Classifier);
        assert_eq!(names(&cls.sources), vec!["fc3"]);
        assert_eq!(cls.in_channels, 150);
        assert_eq!(cls.out_channels, 4);
        assert!(!cls.prelu);
        assert!(!cls.dropout);
    }

    #[test]
    fn three_modality_hyper_dense_wires_all_streams() {
        let spec = preset("hyperdense-3mod").unwrap();
        let plan = plan_wiring(&spec).unwrap();
        let l2s2 = &plan.nodes[plan.node_index(NodeKey::Conv { stream: 2, layer: 2 }).unwrap()];
        assert_eq!(names(&l2s2.sources), vec!["s2L1", "s1L1", "s3L1"]);
        let fc1 = &plan.nodes[plan.node_index(NodeKey::Fc { index: 0 }).unwrap()];
        assert_eq!(fc1.in_channels, 3 * 3 * 450);
    }

    #[test]
    fn describe_reports_geometry() {
        let spec = preset("hyperdense-2mod").unwrap();
        let rep = describe(&spec).unwrap();
        assert_eq!(rep.receptive_field, 19);
        assert_eq!(rep.margin, 9);
        assert_eq!(rep.conv_layers, 9);
        assert_eq!(rep.nodes.len(), 18 + 3 + 1);
        let j = serde_json::to_string(&rep).unwrap();
        assert!(j.contains("\"s1L9\""));
    }
}
