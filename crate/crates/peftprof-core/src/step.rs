//! Expanded training-step plan.
//!
//! A [`StepPlan`] unrolls a `TunedModel` into the exact op sequence one
//! training step executes: base layers, adapter branches, merge points and
//! the loss, each with concrete shapes, parameter records and
//! requires-grad flags. The analytic FLOPs/memory models and the reference
//! engine both walk this structure, which is what makes exact count parity
//! between them a meaningful check.

use crate::graph::{Activation, ConvParams, GraphError, LayerKind, LinearParams, NodeId};
use crate::peft::{AdapterInfo, PeftMethod, TunedModel};
use crate::shape::TensorShape;
use serde::{Deserialize, Serialize};

pub type OpId = usize;
pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OpKind {
    Conv {
        p: ConvParams,
    },
    Linear {
        p: LinearParams,
    },
    Bn {
        channels: usize,
    },
    Act {
        act: Activation,
    },
    Avgpool,
    Maxpool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ResidualAdd,
    ChannelMul,
    Flatten,
    /// `out = in0 + scaling * in1` (lora branch merge).
    AdapterMerge {
        scaling: f64,
    },
    /// DoRA merge: `out = scale (.) in0 + (scale * scaling) (.) in1` with the
    /// per-output-channel `scale = magnitude / ||W0 + scaling*BA||_c` rebuilt
    /// each step in weight space; the norm is detached from the gradient.
    /// `base_op` / `a_op` / `b_op` locate the sibling ops whose weights the
    /// norm reads; `(m, n)` is the matricized base weight.
    DoraMerge {
        scaling: f64,
        rank: usize,
        m: usize,
        n: usize,
        base_op: OpId,
        a_op: OpId,
        b_op: OpId,
    },
    /// Softmax cross-entropy; FLOPs ignored by convention.
    Loss {
        classes: usize,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Conv { .. } => "conv2d",
            OpKind::Linear { .. } => "linear",
            OpKind::Bn { .. } => "batchnorm2d",
            OpKind::Act { .. } => "activation",
            OpKind::Avgpool => "avgpool",
            OpKind::Maxpool { .. } => "maxpool",
            OpKind::ResidualAdd => "residual_add",
            OpKind::ChannelMul => "channel_mul",
            OpKind::Flatten => "flatten",
            OpKind::AdapterMerge { .. } => "adapter_merge",
            OpKind::DoraMerge { .. } => "dora_merge",
            OpKind::Loss { .. } => "loss",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    AdapterA,
    AdapterB,
    DoraMagnitude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub id: ParamId,
    pub op: OpId,
    pub name: String,
    pub kind: ParamKind,
    pub elements: u64,
    /// `(rows = C_out, cols = fan-in)` for weight matrices; `None` for 1-D
    /// parameters, which never project.
    pub matricized: Option<(usize, usize)>,
    pub trainable: bool,
}

/// Where an op reads its activation from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeRef {
    GraphInput,
    Op(OpId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOp {
    pub id: OpId,
    /// Originating graph node; the loss op has none.
    pub node: Option<NodeId>,
    pub name: String,
    pub kind: OpKind,
    pub inputs: Vec<EdgeRef>,
    pub in_shapes: Vec<TensorShape>,
    pub out_shape: TensorShape,
    pub params: Vec<ParamId>,
    /// True when this op's own raw weight tensor trains directly (fft or
    /// galore, and the dense adapter convolutions). Adapter methods leave
    /// the base convolution frozen, which dispatches the efficient grouped
    /// input-gradient path; direct training pins the fused kernel that
    /// forgoes the grouping reduction on the input gradient.
    pub raw_weight_trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPlan {
    pub method: PeftMethod,
    pub input: TensorShape,
    pub ops: Vec<StepOp>,
    pub params: Vec<ParamRecord>,
    /// Per op: gradient of its output is required somewhere.
    pub requires_grad: Vec<bool>,
    /// Per op, per input edge: this op must produce a gradient into it.
    pub grad_into_input: Vec<Vec<bool>>,
}

struct PlanBuilder {
    ops: Vec<StepOp>,
    params: Vec<ParamRecord>,
}

impl PlanBuilder {
    fn push_op(
        &mut self,
        node: Option<NodeId>,
        name: String,
        kind: OpKind,
        inputs: Vec<EdgeRef>,
        in_shapes: Vec<TensorShape>,
        out_shape: TensorShape,
    ) -> OpId {
        let id = self.ops.len();
        self.ops.push(StepOp {
            id,
            node,
            name,
            kind,
            inputs,
            in_shapes,
            out_shape,
            params: Vec::new(),
            raw_weight_trainable: false,
        });
        id
    }

    fn push_param(
        &mut self,
        op: OpId,
        suffix: &str,
        kind: ParamKind,
        elements: u64,
        matricized: Option<(usize, usize)>,
        trainable: bool,
    ) -> ParamId {
        let id = self.params.len();
        let name = format!("{}.{suffix}", self.ops[op].name);
        self.params.push(ParamRecord {
            id,
            op,
            name,
            kind,
            elements,
            matricized,
            trainable,
        });
        self.ops[op].params.push(id);
        id
    }

    /// Base layer + A/B adapter branch; returns (base, a, b) op ids.
    #[allow(clippy::too_many_arguments)]
    fn adapter_branch(
        &mut self,
        gnode_id: NodeId,
        name: &str,
        base_kind: OpKind,
        a_kind: OpKind,
        b_kind: OpKind,
        in_edges: Vec<EdgeRef>,
        in_shapes: Vec<TensorShape>,
        out_shape: TensorShape,
        a_shape: TensorShape,
        adapter: &AdapterInfo,
    ) -> (OpId, OpId, OpId) {
        let base = self.push_op(
            Some(gnode_id),
            name.to_string(),
            base_kind,
            in_edges.clone(),
            in_shapes.clone(),
            out_shape,
        );
        let a_op = self.push_op(
            Some(gnode_id),
            format!("{name}.lora_a"),
            a_kind,
            in_edges,
            in_shapes,
            a_shape,
        );
        self.push_param(
            a_op,
            "weight",
            ParamKind::AdapterA,
            adapter.a_elements(),
            Some((adapter.rank, adapter.n)),
            true,
        );
        self.ops[a_op].raw_weight_trainable = true;
        let b_op = self.push_op(
            Some(gnode_id),
            format!("{name}.lora_b"),
            b_kind,
            vec![EdgeRef::Op(a_op)],
            vec![a_shape],
            out_shape,
        );
        self.push_param(
            b_op,
            "weight",
            ParamKind::AdapterB,
            adapter.b_elements(),
            Some((adapter.m, adapter.rank)),
            true,
        );
        self.ops[b_op].raw_weight_trainable = true;
        (base, a_op, b_op)
    }
}

impl StepPlan {
    pub fn build(tuned: &TunedModel, input: TensorShape) -> Result<StepPlan, GraphError> {
        let shaped = tuned.graph.infer_shapes(input)?;
        let method = tuned.method;
        let mut b = PlanBuilder {
            ops: Vec::new(),
            params: Vec::new(),
        };
        // Graph node id -> op producing that node's output.
        let mut node_out: Vec<OpId> = vec![0; shaped.nodes.len()];

        let full_train = matches!(method, PeftMethod::Fft | PeftMethod::Galore);
        for gnode in &shaped.nodes {
            let in_edges: Vec<EdgeRef> = if gnode.inputs.is_empty() {
                vec![EdgeRef::GraphInput]
            } else {
                gnode
                    .inputs
                    .iter()
                    .map(|&p| EdgeRef::Op(node_out[p]))
                    .collect()
            };
            let in_shapes: Vec<TensorShape> = if gnode.inputs.is_empty() {
                vec![input]
            } else {
                gnode
                    .inputs
                    .iter()
                    .map(|&p| shaped.nodes[p].output_shape.unwrap())
                    .collect()
            };
            let out_shape = gnode.output_shape.unwrap();
            let in_head = shaped.head_ids.contains(&gnode.id);
            let base_trainable = match method {
                PeftMethod::Fft | PeftMethod::Galore => true,
                PeftMethod::Bnh => in_head,
                PeftMethod::Lora | PeftMethod::Dora => false,
            };
            let adapter = tuned.adapters.get(&gnode.id).copied();

            let out_op = match (&gnode.kind, adapter) {
                (LayerKind::Conv2d(c), Some(a)) => {
                    let a_params = ConvParams {
                        in_channels: c.in_channels,
                        out_channels: a.rank,
                        kernel: c.kernel,
                        stride: c.stride,
                        padding: c.padding,
                        groups: 1,
                        bias: false,
                    };
                    let b_params = ConvParams {
                        in_channels: a.rank,
                        out_channels: c.out_channels,
                        kernel: 1,
                        stride: 1,
                        padding: 0,
                        groups: 1,
                        bias: false,
                    };
                    let a_shape = TensorShape::new(out_shape.n, a.rank, out_shape.h, out_shape.w);
                    let (base, a_op, b_op) = b.adapter_branch(
                        gnode.id,
                        &gnode.name,
                        OpKind::Conv { p: *c },
                        OpKind::Conv { p: a_params },
                        OpKind::Conv { p: b_params },
                        in_edges,
                        in_shapes,
                        out_shape,
                        a_shape,
                        &a,
                    );
                    push_conv_params(&mut b, base, c, false);
                    finish_adapter(
                        &mut b,
                        gnode.id,
                        &gnode.name,
                        method,
                        &a,
                        base,
                        a_op,
                        b_op,
                        out_shape,
                    )
                }
                (LayerKind::Linear(l), Some(a)) => {
                    let a_shape = TensorShape::features(out_shape.n, a.rank);
                    let (base, a_op, b_op) = b.adapter_branch(
                        gnode.id,
                        &gnode.name,
                        OpKind::Linear { p: *l },
                        OpKind::Linear {
                            p: LinearParams {
                                in_features: l.in_features,
                                out_features: a.rank,
                                bias: false,
                            },
                        },
                        OpKind::Linear {
                            p: LinearParams {
                                in_features: a.rank,
                                out_features: l.out_features,
                                bias: false,
                            },
                        },
                        in_edges,
                        in_shapes,
                        out_shape,
                        a_shape,
                        &a,
                    );
                    push_linear_params(&mut b, base, l, false);
                    finish_adapter(
                        &mut b,
                        gnode.id,
                        &gnode.name,
                        method,
                        &a,
                        base,
                        a_op,
                        b_op,
                        out_shape,
                    )
                }
                (LayerKind::Conv2d(c), None) => {
                    let op = b.push_op(
                        Some(gnode.id),
                        gnode.name.clone(),
                        OpKind::Conv { p: *c },
                        in_edges,
                        in_shapes,
                        out_shape,
                    );
                    push_conv_params(&mut b, op, c, base_trainable);
                    b.ops[op].raw_weight_trainable = base_trainable && full_train;
                    op
                }
                (LayerKind::Linear(l), None) => {
                    let op = b.push_op(
                        Some(gnode.id),
                        gnode.name.clone(),
                        OpKind::Linear { p: *l },
                        in_edges,
                        in_shapes,
                        out_shape,
                    );
                    push_linear_params(&mut b, op, l, base_trainable);
                    b.ops[op].raw_weight_trainable = base_trainable && full_train;
                    op
                }
                (LayerKind::Batchnorm2d { channels }, _) => {
                    let op = b.push_op(
                        Some(gnode.id),
                        gnode.name.clone(),
                        OpKind::Bn {
                            channels: *channels,
                        },
                        in_edges,
                        in_shapes,
                        out_shape,
                    );
                    // BN affine trains only under full-parameter methods.
                    let t = full_train;
                    b.push_param(op, "gamma", ParamKind::BnGamma, *channels as u64, None, t);
                    b.push_param(op, "beta", ParamKind::BnBeta, *channels as u64, None, t);
                    op
                }
                (LayerKind::Activation { act }, _) => b.push_op(
                    Some(gnode.id),
                    gnode.name.clone(),
                    OpKind::Act { act: *act },
                    in_edges,
                    in_shapes,
                    out_shape,
                ),
                (LayerKind::Avgpool, _) => b.push_op(
                    Some(gnode.id),
                    gnode.name.clone(),
                    OpKind::Avgpool,
                    in_edges,
                    in_shapes,
                    out_shape,
                ),
                (
                    LayerKind::Maxpool {
                        kernel,
                        stride,
                        padding,
                    },
                    _,
                ) => b.push_op(
                    Some(gnode.id),
                    gnode.name.clone(),
                    OpKind::Maxpool {
                        kernel: *kernel,
                        stride: *stride,
                        padding: *padding,
                    },
                    in_edges,
                    in_shapes,
                    out_shape,
                ),
                (LayerKind::ResidualAdd, _) => b.push_op(
                    Some(gnode.id),
                    gnode.name.clone(),
                    OpKind::ResidualAdd,
                    in_edges,
                    in_shapes,
                    out_shape,
                ),
                (LayerKind::ChannelMul, _) => b.push_op(
                    Some(gnode.id),
                    gnode.name.clone(),
                    OpKind::ChannelMul,
                    in_edges,
                    in_shapes,
                    out_shape,
                ),
                (LayerKind::Flatten, _) => b.push_op(
                    Some(gnode.id),
                    gnode.name.clone(),
                    OpKind::Flatten,
                    in_edges,
                    in_shapes,
                    out_shape,
                ),
            };
            node_out[gnode.id] = out_op;
        }

        let logits = node_out[shaped.output_id()];
        let logits_shape = b.ops[logits].out_shape;
        b.push_op(
            None,
            "loss".into(),
            OpKind::Loss {
                classes: logits_shape.c,
            },
            vec![EdgeRef::Op(logits)],
            vec![logits_shape],
            TensorShape::features(logits_shape.n, 1),
        );

        // requires_grad: an op's output gradient is needed iff the op holds a
        // trainable parameter or any producer's does (transitively).
        let n_ops = b.ops.len();
        let mut requires = vec![false; n_ops];
        for op in &b.ops {
            let own = op.params.iter().any(|&p| b.params[p].trainable);
            let upstream = op.inputs.iter().any(|e| match e {
                EdgeRef::Op(p) => requires[*p],
                EdgeRef::GraphInput => false,
            });
            requires[op.id] = own || upstream;
        }
        // Gradients flow into an input edge iff its producer requires grad;
        // the graph input never receives one (no upstream consumer).
        let grad_into_input: Vec<Vec<bool>> = b
            .ops
            .iter()
            .map(|op| {
                op.inputs
                    .iter()
                    .map(|e| match e {
                        EdgeRef::Op(p) => requires[*p],
                        EdgeRef::GraphInput => false,
                    })
                    .collect()
            })
            .collect();

        Ok(StepPlan {
            method,
            input,
            ops: b.ops,
            params: b.params,
            requires_grad: requires,
            grad_into_input,
        })
    }

    /// Ops whose backward executes (produce input grads or weight grads).
    pub fn backward_runs(&self, op: OpId) -> bool {
        self.requires_grad[op]
    }

    pub fn has_trainable_params(&self, op: OpId) -> bool {
        self.ops[op]
            .params
            .iter()
            .any(|&p| self.params[p].trainable)
    }

    pub fn trainable_elements(&self) -> u64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.elements)
            .sum()
    }

    pub fn total_param_elements(&self) -> u64 {
        self.params.iter().map(|p| p.elements).sum()
    }

    /// Non-trainable persistent buffers (BN running statistics).
    pub fn buffer_elements(&self) -> u64 {
        self.ops
            .iter()
            .map(|op| match op.kind {
                OpKind::Bn { channels } => 2 * channels as u64,
                _ => 0,
            })
            .sum()
    }
}

#[allow(clippy::too_many_arguments)]
fn finish_adapter(
    b: &mut PlanBuilder,
    gnode_id: NodeId,
    name: &str,
    method: PeftMethod,
    a: &AdapterInfo,
    base: OpId,
    a_op: OpId,
    b_op: OpId,
    out_shape: TensorShape,
) -> OpId {
    if method == PeftMethod::Dora {
        let merge = b.push_op(
            Some(gnode_id),
            format!("{name}.dora_merge"),
            OpKind::DoraMerge {
                scaling: a.scaling,
                rank: a.rank,
                m: a.m,
                n: a.n,
                base_op: base,
                a_op,
                b_op,
            },
            vec![EdgeRef::Op(base), EdgeRef::Op(b_op)],
            vec![out_shape, out_shape],
            out_shape,
        );
        b.push_param(
            merge,
            "magnitude",
            ParamKind::DoraMagnitude,
            a.m as u64,
            None,
            true,
        );
        merge
    } else {
        b.push_op(
            Some(gnode_id),
            format!("{name}.merge"),
            OpKind::AdapterMerge { scaling: a.scaling },
            vec![EdgeRef::Op(base), EdgeRef::Op(b_op)],
            vec![out_shape, out_shape],
            out_shape,
        )
    }
}

fn push_conv_params(b: &mut PlanBuilder, op: OpId, c: &ConvParams, trainable: bool) {
    b.push_param(
        op,
        "weight",
        ParamKind::Weight,
        c.weight_elements(),
        Some(c.matricized()),
        trainable,
    );
    if c.bias {
        b.push_param(
            op,
            "bias",
            ParamKind::Bias,
            c.out_channels as u64,
            None,
            trainable,
        );
    }
}

fn push_linear_params(b: &mut PlanBuilder, op: OpId, l: &LinearParams, trainable: bool) {
    b.push_param(
        op,
        "weight",
        ParamKind::Weight,
        l.weight_elements(),
        Some(l.matricized()),
        trainable,
    );
    if l.bias {
        b.push_param(
            op,
            "bias",
            ParamKind::Bias,
            l.out_features as u64,
            None,
            trainable,
        );
    }
}
