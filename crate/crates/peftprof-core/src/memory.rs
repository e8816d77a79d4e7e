//! Peak training-step memory per allocation group.
//!
//! Group peaks are taken independently over the step timeline and the total
//! is their sum, mirroring the tracker semantics the reports follow. The
//! reference engine's allocation ledger implements the same accounting, and
//! the parity suite holds the two equal on toy graphs.

use crate::optim::OptimizerPlan;
use crate::peft::{PeftMethod, TunedModel};
use crate::shape::TensorShape;
use crate::step::{EdgeRef, OpId, OpKind, StepPlan};
use serde::{Deserialize, Serialize};

pub const DEFAULT_ELEMENT_WIDTH: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MemoryGroup {
    Param,
    Grad,
    Act,
    Opt,
    Temp,
}

impl MemoryGroup {
    pub const ALL: [MemoryGroup; 5] = [
        MemoryGroup::Param,
        MemoryGroup::Grad,
        MemoryGroup::Act,
        MemoryGroup::Opt,
        MemoryGroup::Temp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MemoryGroup::Param => "PARAM",
            MemoryGroup::Grad => "GRAD",
            MemoryGroup::Act => "ACT",
            MemoryGroup::Opt => "OPT",
            MemoryGroup::Temp => "TEMP",
        }
    }
}

/// What one saved activation entry is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SaveKey {
    GraphInput,
    /// The output tensor of an op, saved for some consumer's backward.
    OpOutput(OpId),
    /// BN per-channel batch mean and inverse std.
    BnStats(OpId),
    /// DoRA per-channel scale and inverse norm, kept for the backward.
    DoraScale(OpId),
    /// Softmax probabilities kept for the loss backward.
    LossProbs(OpId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedEntry {
    pub key: SaveKey,
    pub label: String,
    pub elements: u64,
}

/// The saved-for-backward set: an edge is kept iff some backward computation
/// that will actually run consumes it. Frozen pass-through convolutions need
/// only their weights, so their inputs are not saved; bnh therefore keeps
/// nothing below the classifier.
pub fn saved_activation_set(step: &StepPlan) -> Vec<SavedEntry> {
    let mut entries: Vec<SavedEntry> = Vec::new();
    let mut have_edge = vec![false; step.ops.len()];
    let mut have_graph_input = false;
    let save_edge = |edge: &EdgeRef,
                     entries: &mut Vec<SavedEntry>,
                     have_edge: &mut Vec<bool>,
                     have_graph_input: &mut bool| {
        match edge {
            EdgeRef::GraphInput => {
                if !*have_graph_input {
                    *have_graph_input = true;
                    entries.push(SavedEntry {
                        key: SaveKey::GraphInput,
                        label: "input".into(),
                        elements: step.input.elements(),
                    });
                }
            }
            EdgeRef::Op(p) => {
                if !have_edge[*p] {
                    have_edge[*p] = true;
                    entries.push(SavedEntry {
                        key: SaveKey::OpOutput(*p),
                        label: step.ops[*p].name.clone(),
                        elements: step.ops[*p].out_shape.elements(),
                    });
                }
            }
        }
    };

    for op in &step.ops {
        let runs = step.requires_grad[op.id];
        match &op.kind {
            OpKind::Conv { .. } | OpKind::Linear { .. } => {
                // Any backward through the layer retains its input: the
                // autograd save happens at forward time, before the engine
                // knows whether only the pass-through gradient is wanted.
                if runs {
                    save_edge(
                        &op.inputs[0],
                        &mut entries,
                        &mut have_edge,
                        &mut have_graph_input,
                    );
                }
            }
            OpKind::Bn { channels } => {
                // The backward renormalizes from the saved input and the
                // batch statistics (mean + inverse std).
                if runs && (step.grad_into_input[op.id][0] || step.has_trainable_params(op.id)) {
                    save_edge(
                        &op.inputs[0],
                        &mut entries,
                        &mut have_edge,
                        &mut have_graph_input,
                    );
                    entries.push(SavedEntry {
                        key: SaveKey::BnStats(op.id),
                        label: format!("{}.batch_stats", op.name),
                        elements: 2 * *channels as u64,
                    });
                }
            }
            OpKind::Act { .. } | OpKind::Maxpool { .. } => {
                if runs && step.grad_into_input[op.id][0] {
                    save_edge(
                        &op.inputs[0],
                        &mut entries,
                        &mut have_edge,
                        &mut have_graph_input,
                    );
                }
            }
            OpKind::ChannelMul => {
                if runs {
                    save_edge(
                        &op.inputs[0],
                        &mut entries,
                        &mut have_edge,
                        &mut have_graph_input,
                    );
                    save_edge(
                        &op.inputs[1],
                        &mut entries,
                        &mut have_edge,
                        &mut have_graph_input,
                    );
                }
            }
            OpKind::DoraMerge { m, .. } => {
                // The magnitude gradient reduces dy against both branch
                // outputs, so each stays resident; the per-channel scale and
                // inverse norm ride along.
                if runs {
                    save_edge(
                        &op.inputs[0],
                        &mut entries,
                        &mut have_edge,
                        &mut have_graph_input,
                    );
                    save_edge(
                        &op.inputs[1],
                        &mut entries,
                        &mut have_edge,
                        &mut have_graph_input,
                    );
                    entries.push(SavedEntry {
                        key: SaveKey::DoraScale(op.id),
                        label: format!("{}.scale", op.name),
                        elements: 2 * *m as u64,
                    });
                }
            }
            OpKind::Loss { classes } => {
                entries.push(SavedEntry {
                    key: SaveKey::LossProbs(op.id),
                    label: "softmax_probs".into(),
                    elements: op.out_shape.n as u64 * *classes as u64,
                });
            }
            OpKind::Avgpool
            | OpKind::ResidualAdd
            | OpKind::Flatten
            | OpKind::AdapterMerge { .. } => {}
        }
    }
    // The live input tensor itself is always resident during the step.
    if !have_graph_input {
        entries.insert(
            0,
            SavedEntry {
                key: SaveKey::GraphInput,
                label: "input".into(),
                elements: step.input.elements(),
            },
        );
    }
    entries
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub method: PeftMethod,
    pub element_width: u64,
    pub input: TensorShape,
    pub param_bytes: u64,
    pub grad_bytes: u64,
    pub act_bytes: u64,
    pub opt_bytes: u64,
    pub temp_bytes: u64,
    pub total_bytes: u64,
}

impl MemoryReport {
    pub fn group(&self, group: MemoryGroup) -> u64 {
        match group {
            MemoryGroup::Param => self.param_bytes,
            MemoryGroup::Grad => self.grad_bytes,
            MemoryGroup::Act => self.act_bytes,
            MemoryGroup::Opt => self.opt_bytes,
            MemoryGroup::Temp => self.temp_bytes,
        }
    }
}

pub fn group_bytes(step: &StepPlan, plan: &OptimizerPlan, group: MemoryGroup, width: u64) -> u64 {
    match group {
        // Persistent model state: every parameter (frozen or not, adapters
        // included) plus BN running-statistics buffers.
        MemoryGroup::Param => (step.total_param_elements() + step.buffer_elements()) * width,
        MemoryGroup::Grad => step.trainable_elements() * width,
        MemoryGroup::Act => act_peak_elements(step) * width,
        MemoryGroup::Opt => (plan.state_elements() + plan.peak_extra_elements()) * width,
        MemoryGroup::Temp => temp_peak_elements(step) * width,
    }
}

/// Peak live activation bytes over the forward timeline: the saved-for-
/// backward set accumulates while unsaved intermediates come and go under
/// reference counting. The peak is the maximum of (saved so far) + (live
/// unsaved edges) over op execution order; the engine tracks the same
/// quantity from its actual buffers.
pub fn act_peak_elements(step: &StepPlan) -> u64 {
    let saved = saved_activation_set(step);
    let mut saved_edges = vec![false; step.ops.len()];
    let mut saved_at: Vec<u64> = vec![0; step.ops.len()]; // internal saves (BN, loss)
    let mut saved_graph_input = 0u64;
    for e in &saved {
        match e.key {
            SaveKey::GraphInput => saved_graph_input = e.elements,
            SaveKey::OpOutput(op) => saved_edges[op] = true,
            SaveKey::BnStats(op) | SaveKey::DoraScale(op) | SaveKey::LossProbs(op) => {
                saved_at[op] += e.elements
            }
        }
    }
    // Remaining consumer count per edge.
    let mut consumers = vec![0usize; step.ops.len()];
    for op in &step.ops {
        for e in &op.inputs {
            if let EdgeRef::Op(p) = e {
                consumers[*p] += 1;
            }
        }
    }
    let mut live_unsaved: u64 = 0; // live edges that will be freed
    let mut saved_so_far: u64 = saved_graph_input.max(step.input.elements());
    let mut peak = saved_so_far;
    let mut alive = vec![false; step.ops.len()];
    for op in &step.ops {
        // Normalizations and activations off the gradient chain run in
        // place (nothing downstream re-reads their input), so they add no
        // buffer; everything else materializes its output.
        let in_place = matches!(op.kind, OpKind::Bn { .. } | OpKind::Act { .. })
            && !step.requires_grad[op.id]
            && consumers[match op.inputs[0] {
                EdgeRef::Op(p) => p,
                EdgeRef::GraphInput => usize::MAX,
            }
            .min(step.ops.len() - 1)]
                <= 1
            && matches!(op.inputs[0], EdgeRef::Op(_));
        let out = op.out_shape.elements();
        if saved_edges[op.id] {
            saved_so_far += out;
        } else if !in_place {
            live_unsaved += out;
            alive[op.id] = true;
        }
        saved_so_far += saved_at[op.id];
        peak = peak.max(saved_so_far + live_unsaved);
        // Inputs release once their last consumer ran; an in-place op hands
        // its (renamed) buffer on instead.
        for e in &op.inputs {
            if let EdgeRef::Op(p) = e {
                consumers[*p] -= 1;
                if consumers[*p] == 0 && alive[*p] {
                    if in_place {
                        // Buffer continues life under this op's id.
                        alive[*p] = false;
                        alive[op.id] = true;
                    } else {
                        live_unsaved -= step.ops[*p].out_shape.elements();
                        alive[*p] = false;
                    }
                }
            }
        }
    }
    peak
}

/// Unfold/column workspace of one convolution backward: the input-unfold
/// feeding the weight-gradient product and the column buffer the input
/// gradient scatters from, used one after the other (the larger counts).
/// Under the paper convention a directly trained grouped convolution's
/// column buffer spans the full fan-in.
pub fn conv_bwd_workspace(step: &StepPlan, op: &crate::step::StepOp) -> u64 {
    let OpKind::Conv { p } = &op.kind else {
        return 0;
    };
    let hw = op.out_shape.h as u64 * op.out_shape.w as u64 * op.out_shape.n as u64;
    let k2 = (p.kernel * p.kernel) as u64;
    let w_side = if step.has_trainable_params(op.id) {
        (p.in_channels / p.groups) as u64 * k2 * hw
    } else {
        0
    };
    let x_side = if step.grad_into_input[op.id][0] {
        let fan = if op.raw_weight_trainable {
            p.in_channels
        } else {
            p.in_channels / p.groups
        };
        fan as u64 * k2 * hw
    } else {
        0
    };
    w_side.max(x_side)
}

/// Transient backward buffers under reference counting: the peak of live
/// activation-gradient tensors plus the running op's unfold workspace, with
/// the DoRA forward-time norm rebuild (BA product and directional sum for
/// the largest adapted layer) as the other peak candidate.
pub fn temp_peak_elements(step: &StepPlan) -> u64 {
    // Remaining grad contributions per edge: one per consumer that will
    // write into it, plus the final consumption by the producer's backward.
    let mut pending_writes = vec![0usize; step.ops.len()];
    for op in &step.ops {
        if !step.requires_grad[op.id] {
            continue;
        }
        for (i, e) in op.inputs.iter().enumerate() {
            if step.grad_into_input[op.id][i] {
                if let EdgeRef::Op(p) = e {
                    pending_writes[*p] += 1;
                }
            }
        }
    }
    let mut live = vec![false; step.ops.len()];
    let mut live_elts: u64 = 0;
    let mut peak: u64 = 0;
    for op in step.ops.iter().rev() {
        if !step.requires_grad[op.id] {
            continue;
        }
        // This op's output gradient is live while its backward runs (the
        // loss seed materializes the logits gradient the same way).
        if !live[op.id] {
            live[op.id] = true;
            live_elts += op.out_shape.elements();
        }
        peak = peak.max(live_elts + conv_bwd_workspace(step, op));
        // Gradients written into producer edges stay live until consumed.
        for (i, e) in op.inputs.iter().enumerate() {
            if step.grad_into_input[op.id][i] {
                if let EdgeRef::Op(p) = e {
                    if !live[*p] {
                        live[*p] = true;
                        live_elts += step.ops[*p].out_shape.elements();
                    }
                    pending_writes[*p] -= 1;
                }
            }
        }
        // Own output gradient is consumed once this backward finishes.
        live[op.id] = false;
        live_elts -= op.out_shape.elements();
        peak = peak.max(live_elts);
    }
    // DoRA rebuilds every adapted layer's scale in a step prologue; the
    // weight-space intermediates (BA product and directional sum per layer)
    // live in a scratch arena freed in one batch once all scales exist.
    let dora_build: u64 = step
        .ops
        .iter()
        .map(|op| match &op.kind {
            OpKind::DoraMerge { m, n, .. } => 2 * *m as u64 * *n as u64,
            _ => 0,
        })
        .sum();
    peak.max(dora_build)
}

pub fn profile_step_memory(step: &StepPlan, plan: &OptimizerPlan, width: u64) -> MemoryReport {
    let param_bytes = group_bytes(step, plan, MemoryGroup::Param, width);
    let grad_bytes = group_bytes(step, plan, MemoryGroup::Grad, width);
    let act_bytes = group_bytes(step, plan, MemoryGroup::Act, width);
    let opt_bytes = group_bytes(step, plan, MemoryGroup::Opt, width);
    let temp_bytes = group_bytes(step, plan, MemoryGroup::Temp, width);
    MemoryReport {
        method: step.method,
        element_width: width,
        input: step.input,
        param_bytes,
        grad_bytes,
        act_bytes,
        opt_bytes,
        temp_bytes,
        total_bytes: param_bytes + grad_bytes + act_bytes + opt_bytes + temp_bytes,
    }
}

pub fn profile_memory(
    tuned: &TunedModel,
    plan: &OptimizerPlan,
    input: TensorShape,
    width: u64,
) -> Result<MemoryReport, crate::flops::FlopsError> {
    let step = StepPlan::build(tuned, input)?;
    Ok(profile_step_memory(&step, plan, width))
}
