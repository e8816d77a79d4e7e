//! Layer-graph intermediate representation with shape inference.
//!
//! A [`ModelGraph`] is a DAG of shaped layers. Nodes are stored in insertion
//! order, which builders keep topological; `infer_shapes` validates that and
//! attaches concrete input/output shapes to every node.

use crate::shape::TensorShape;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Relu6,
    Hardswish,
    Hardsigmoid,
}

/// Convolution hyperparameters. Depthwise convolution is `groups == in_channels`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvParams {
    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups > 1
    }

    /// Weight element count: `C_out * (C_in / g) * k * k`.
    pub fn weight_elements(&self) -> u64 {
        self.out_channels as u64
            * (self.in_channels / self.groups) as u64
            * (self.kernel * self.kernel) as u64
    }

    /// Rows/cols of the matricized weight, `(C_out, (C_in/g) * k * k)`.
    pub fn matricized(&self) -> (usize, usize) {
        (
            self.out_channels,
            self.in_channels / self.groups * self.kernel * self.kernel,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearParams {
    pub in_features: usize,
    pub out_features: usize,
    pub bias: bool,
}

impl LinearParams {
    pub fn weight_elements(&self) -> u64 {
        self.in_features as u64 * self.out_features as u64
    }

    pub fn matricized(&self) -> (usize, usize) {
        (self.out_features, self.in_features)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerKind {
    Conv2d(ConvParams),
    /// Affine batch normalization over channels; running statistics are
    /// buffers, not parameters.
    Batchnorm2d {
        channels: usize,
    },
    Linear(LinearParams),
    Activation {
        act: Activation,
    },
    /// Global average pool to 1x1.
    Avgpool,
    Maxpool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Elementwise sum of two equally shaped inputs.
    ResidualAdd,
    /// Broadcast multiply of a feature map by a per-channel gate (SE blocks).
    ChannelMul,
    Flatten,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d(_) => "conv2d",
            LayerKind::Batchnorm2d { .. } => "batchnorm2d",
            LayerKind::Linear(_) => "linear",
            LayerKind::Activation { .. } => "activation",
            LayerKind::Avgpool => "avgpool",
            LayerKind::Maxpool { .. } => "maxpool",
            LayerKind::ResidualAdd => "residual_add",
            LayerKind::ChannelMul => "channel_mul",
            LayerKind::Flatten => "flatten",
        }
    }
}

/// One named parameter tensor of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub elements: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: NodeId,
    pub name: String,
    pub kind: LayerKind,
    /// Predecessor node ids; empty means the node reads the graph input.
    pub inputs: Vec<NodeId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<TensorShape>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_shape: Option<TensorShape>,
}

impl LayerNode {
    /// Trainable parameter element count (weights, biases, BN affine).
    pub fn param_elements(&self) -> u64 {
        match &self.kind {
            LayerKind::Conv2d(c) => {
                c.weight_elements() + if c.bias { c.out_channels as u64 } else { 0 }
            }
            LayerKind::Linear(l) => {
                l.weight_elements() + if l.bias { l.out_features as u64 } else { 0 }
            }
            LayerKind::Batchnorm2d { channels } => 2 * *channels as u64,
            _ => 0,
        }
    }

    /// Non-trainable buffer element count (BN running mean/var).
    pub fn buffer_elements(&self) -> u64 {
        match &self.kind {
            LayerKind::Batchnorm2d { channels } => 2 * *channels as u64,
            _ => 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown architecture `{0}`")]
    UnknownArch(String),
    #[error("graph has no nodes")]
    Empty,
    #[error("node {node} (`{name}`): {msg}")]
    Shape {
        node: NodeId,
        name: String,
        msg: String,
    },
    #[error("graph input channels {input} do not match first layer C_in {expected}")]
    InputChannels { input: usize, expected: usize },
    #[error("graph is not acyclic or not topologically ordered at node {0}")]
    NotTopological(NodeId),
}

/// A DAG of shaped layers plus classifier-head bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub arch: String,
    pub nodes: Vec<LayerNode>,
    /// Node ids of the classifier layers (the "head").
    pub head_ids: Vec<NodeId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<TensorShape>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamFilter {
    All,
    TrainableOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub node: Option<NodeId>,
    pub message: String,
}

impl ModelGraph {
    pub fn node(&self, id: NodeId) -> &LayerNode {
        &self.nodes[id]
    }

    /// Id of the single output node (the last node; enforced by `validate`).
    pub fn output_id(&self) -> NodeId {
        self.nodes.len() - 1
    }

    /// Successor count per node, derived from the predecessor lists.
    pub fn consumer_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.nodes.len()];
        for node in &self.nodes {
            for &p in &node.inputs {
                counts[p] += 1;
            }
        }
        counts
    }

    /// Structural diagnostics; an empty list means all invariants hold.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut diags = Vec::new();
        if self.nodes.is_empty() {
            diags.push(Diagnostic {
                node: None,
                message: "graph has no nodes".into(),
            });
            return diags;
        }
        let mut seen: HashSet<NodeId> = HashSet::new();
        for (pos, node) in self.nodes.iter().enumerate() {
            if node.id != pos {
                diags.push(Diagnostic {
                    node: Some(node.id),
                    message: format!("node id {} does not match position {}", node.id, pos),
                });
            }
            for &p in &node.inputs {
                if p >= self.nodes.len() {
                    diags.push(Diagnostic {
                        node: Some(node.id),
                        message: format!("edge references unknown node {p}"),
                    });
                } else if !seen.contains(&p) {
                    diags.push(Diagnostic {
                        node: Some(node.id),
                        message: format!(
                            "edge from {p} breaks topological order (cycle or forward reference)"
                        ),
                    });
                }
            }
            match &node.kind {
                LayerKind::Conv2d(c) => {
                    if c.groups == 0 || c.in_channels % c.groups != 0 {
                        diags.push(Diagnostic {
                            node: Some(node.id),
                            message: format!(
                                "C_in {} not divisible by groups {}",
                                c.in_channels, c.groups
                            ),
                        });
                    }
                    if c.groups == 0 || c.out_channels % c.groups != 0 {
                        diags.push(Diagnostic {
                            node: Some(node.id),
                            message: format!(
                                "C_out {} not divisible by groups {}",
                                c.out_channels, c.groups
                            ),
                        });
                    }
                    if c.stride == 0 || c.kernel == 0 {
                        diags.push(Diagnostic {
                            node: Some(node.id),
                            message: "kernel and stride must be >= 1".into(),
                        });
                    }
                }
                LayerKind::ResidualAdd | LayerKind::ChannelMul => {
                    if node.inputs.len() != 2 {
                        diags.push(Diagnostic {
                            node: Some(node.id),
                            message: format!(
                                "{} expects two inputs, got {}",
                                node.kind.name(),
                                node.inputs.len()
                            ),
                        });
                    }
                }
                _ => {}
            }
            if !matches!(node.kind, LayerKind::ResidualAdd | LayerKind::ChannelMul)
                && node.inputs.len() > 1
            {
                diags.push(Diagnostic {
                    node: Some(node.id),
                    message: format!("{} expects at most one input", node.kind.name()),
                });
            }
            seen.insert(node.id);
        }
        // Exactly one output: every node except the last must feed something.
        let counts = self.consumer_counts();
        for (id, &c) in counts.iter().enumerate() {
            if c == 0 && id != self.nodes.len() - 1 {
                diags.push(Diagnostic {
                    node: Some(id),
                    message: "dangling node: not the output and feeds no consumer".into(),
                });
            }
        }
        for &h in &self.head_ids {
            if h >= self.nodes.len() {
                diags.push(Diagnostic {
                    node: Some(h),
                    message: "head id references unknown node".into(),
                });
            }
        }
        diags
    }

    /// Attach concrete shapes to every node. Deterministic and idempotent.
    pub fn infer_shapes(&self, input: TensorShape) -> Result<ModelGraph, GraphError> {
        if self.nodes.is_empty() {
            return Err(GraphError::Empty);
        }
        if !input.is_valid() {
            return Err(GraphError::Shape {
                node: 0,
                name: self.nodes[0].name.clone(),
                msg: format!("invalid input shape {input}"),
            });
        }
        let mut graph = self.clone();
        let mut shapes: HashMap<NodeId, TensorShape> = HashMap::new();
        for idx in 0..graph.nodes.len() {
            let node = &graph.nodes[idx];
            for &p in &node.inputs {
                if p >= idx {
                    return Err(GraphError::NotTopological(node.id));
                }
            }
            let in_shape = match node.inputs.first() {
                Some(&p) => shapes[&p],
                None => input,
            };
            let out_shape = infer_node_shape(node, in_shape, &shapes, input)?;
            let node = &mut graph.nodes[idx];
            node.input_shape = Some(in_shape);
            node.output_shape = Some(out_shape);
            shapes.insert(node.id, out_shape);
        }
        graph.input_shape = Some(input);
        Ok(graph)
    }

    /// Sum of parameter elements matching the filter. `trainable` maps a node
    /// id to whether its parameters train; `None` means everything trains.
    pub fn param_count(&self, filter: ParamFilter, trainable: Option<&HashSet<NodeId>>) -> u64 {
        self.nodes
            .iter()
            .filter(|n| match (filter, trainable) {
                (ParamFilter::All, _) | (_, None) => true,
                (ParamFilter::TrainableOnly, Some(set)) => set.contains(&n.id),
            })
            .map(|n| n.param_elements())
            .sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<ModelGraph, serde_json::Error> {
        serde_json::from_str(text)
    }
}

fn infer_node_shape(
    node: &LayerNode,
    in_shape: TensorShape,
    shapes: &HashMap<NodeId, TensorShape>,
    graph_input: TensorShape,
) -> Result<TensorShape, GraphError> {
    let err = |msg: String| GraphError::Shape {
        node: node.id,
        name: node.name.clone(),
        msg,
    };
    match &node.kind {
        LayerKind::Conv2d(c) => {
            if in_shape.c != c.in_channels {
                return Err(err(format!(
                    "expected {} input channels, got {}",
                    c.in_channels, in_shape.c
                )));
            }
            if node.inputs.is_empty() && graph_input.c != c.in_channels {
                return Err(GraphError::InputChannels {
                    input: graph_input.c,
                    expected: c.in_channels,
                });
            }
            if in_shape.h + 2 * c.padding < c.kernel || in_shape.w + 2 * c.padding < c.kernel {
                return Err(err(format!(
                    "kernel {} does not fit {}x{} input with padding {}",
                    c.kernel, in_shape.h, in_shape.w, c.padding
                )));
            }
            let h = (in_shape.h + 2 * c.padding - c.kernel) / c.stride + 1;
            let w = (in_shape.w + 2 * c.padding - c.kernel) / c.stride + 1;
            Ok(TensorShape::new(in_shape.n, c.out_channels, h, w))
        }
        LayerKind::Batchnorm2d { channels } => {
            if in_shape.c != *channels {
                return Err(err(format!(
                    "expected {channels} channels, got {}",
                    in_shape.c
                )));
            }
            Ok(in_shape)
        }
        LayerKind::Linear(l) => {
            if in_shape.h != 1 || in_shape.w != 1 || in_shape.c != l.in_features {
                return Err(err(format!(
                    "expected flat {} features, got {in_shape}",
                    l.in_features
                )));
            }
            Ok(TensorShape::features(in_shape.n, l.out_features))
        }
        LayerKind::Activation { .. } => Ok(in_shape),
        LayerKind::Avgpool => Ok(TensorShape::new(in_shape.n, in_shape.c, 1, 1)),
        LayerKind::Maxpool {
            kernel,
            stride,
            padding,
        } => {
            if in_shape.h + 2 * padding < *kernel || in_shape.w + 2 * padding < *kernel {
                return Err(err(format!(
                    "kernel {kernel} does not fit {}x{} input",
                    in_shape.h, in_shape.w
                )));
            }
            let h = (in_shape.h + 2 * padding - kernel) / stride + 1;
            let w = (in_shape.w + 2 * padding - kernel) / stride + 1;
            Ok(TensorShape::new(in_shape.n, in_shape.c, h, w))
        }
        LayerKind::ResidualAdd => {
            let a = shapes[&node.inputs[0]];
            let b = shapes[&node.inputs[1]];
            if a != b {
                return Err(err(format!("residual operands disagree: {a} vs {b}")));
            }
            Ok(a)
        }
        LayerKind::ChannelMul => {
            let feat = shapes[&node.inputs[0]];
            let gate = shapes[&node.inputs[1]];
            if gate.c != feat.c || gate.h != 1 || gate.w != 1 {
                return Err(err(format!(
                    "gate must be {}x1x1 per batch entry, got {gate}",
                    feat.c
                )));
            }
            Ok(feat)
        }
        LayerKind::Flatten => Ok(TensorShape::features(
            in_shape.n,
            (in_shape.feature_elements()) as usize,
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_model, Arch, ToyLayer};

    fn toy() -> ModelGraph {
        build_model(
            Arch::ToyCnn(vec![
                ToyLayer::Conv {
                    out: 8,
                    kernel: 3,
                    stride: 1,
                    groups: 1,
                },
                ToyLayer::Bn,
                ToyLayer::Act(Activation::Relu),
                ToyLayer::Conv {
                    out: 8,
                    kernel: 3,
                    stride: 1,
                    groups: 8,
                },
                ToyLayer::Head { classes: 2 },
            ]),
            2,
        )
        .unwrap()
    }

    #[test]
    fn conv_stride_arithmetic() {
        let g = build_model(Arch::Resnet18, 1000).unwrap();
        let shaped = g.infer_shapes(TensorShape::new(1, 3, 224, 224)).unwrap();
        // Stem conv k=7 s=2 p=3: 224 -> 112.
        assert_eq!(shaped.nodes[0].output_shape.unwrap().h, 112);
        // A k=3 s=2 p=1 conv halves 224 -> 112 too; checked via layer2 entry 28x28.
        let fc = shaped.nodes.last().unwrap();
        assert_eq!(fc.output_shape.unwrap().c, 1000);
    }

    #[test]
    fn infer_is_idempotent() {
        let g = toy();
        let s1 = g.infer_shapes(TensorShape::new(1, 3, 16, 16)).unwrap();
        let s2 = s1.infer_shapes(TensorShape::new(1, 3, 16, 16)).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn residual_mismatch_names_node() {
        let mut g = toy();
        // Graft a residual add between tensors of different channel counts.
        let id = g.nodes.len();
        g.nodes.push(LayerNode {
            id,
            name: "bad_residual".into(),
            kind: LayerKind::ResidualAdd,
            inputs: vec![0, 3],
            input_shape: None,
            output_shape: None,
        });
        let err = g.infer_shapes(TensorShape::new(1, 3, 16, 16));
        // Node 0 yields 8 channels, node 3 also 8; shapes agree here, so force
        // a genuine mismatch against the 2-class head output instead.
        let _ = err;
        let mut g = toy();
        let id = g.nodes.len();
        let head = g.output_id();
        g.nodes.push(LayerNode {
            id,
            name: "bad_residual".into(),
            kind: LayerKind::ResidualAdd,
            inputs: vec![0, head],
            input_shape: None,
            output_shape: None,
        });
        match g.infer_shapes(TensorShape::new(1, 3, 16, 16)) {
            Err(GraphError::Shape { node, .. }) => assert_eq!(node, id),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn validate_flags_divisibility_and_cycles() {
        let mut g = toy();
        if let LayerKind::Conv2d(ref mut c) = g.nodes[3].kind {
            c.in_channels = 7;
            c.groups = 2;
        }
        let diags = g.validate();
        assert!(diags.iter().any(|d| d.message.contains("divisible")));

        let mut g = toy();
        g.nodes[0].inputs = vec![3]; // forward reference = cycle under topo order
        let diags = g.validate();
        assert!(diags.iter().any(|d| d.message.contains("topological")));
    }

    #[test]
    fn well_formed_toy_has_no_diagnostics() {
        assert!(toy().validate().is_empty());
    }

    #[test]
    fn graph_json_roundtrip() {
        let g = toy().infer_shapes(TensorShape::new(1, 3, 16, 16)).unwrap();
        let text = g.to_json();
        let back = ModelGraph::from_json(&text).unwrap();
        assert_eq!(g, back);
    }
}
