//! Reverse-mode pass over a forward record, with gradient-buffer gauging
//! that mirrors the analytic TEMP model op for op.

use crate::exec::{EngineError, Executable, ForwardRecord, GradMap};
use crate::tensor::{ParamValue, Tensor};
use peftprof_core::flops::Phase;
use peftprof_core::memory::MemoryGroup;
use peftprof_core::step::{EdgeRef, OpKind};

impl Executable {
    /// Run the backward pass given the loss seed (gradient of the logits).
    /// Gradients appear exactly for trainable parameters.
    pub fn backward(
        &self,
        record: &mut ForwardRecord,
        seed: Tensor,
    ) -> Result<GradMap, EngineError> {
        let plan = &self.plan;
        let width = self.width;
        let mut grads: GradMap = plan
            .params
            .iter()
            .map(|p| {
                if p.trainable {
                    Some(ParamValue::zeros(p.elements))
                } else {
                    None
                }
            })
            .collect();
        record
            .tape
            .ledger
            .gauge(MemoryGroup::Grad)
            .alloc(plan.trainable_elements() * width);

        // Edge gradient buffers, reference counted like the analytic model.
        let mut edge_grads: Vec<Option<Tensor>> = vec![None; plan.ops.len()];

        // Seed: the loss writes the logits gradient.
        let loss_op = plan.ops.last().expect("loss op");
        debug_assert!(matches!(loss_op.kind, OpKind::Loss { .. }));
        let logits_producer = match loss_op.inputs[0] {
            EdgeRef::Op(p) => p,
            EdgeRef::GraphInput => unreachable!("loss reads an op"),
        };
        record
            .tape
            .ledger
            .gauge(MemoryGroup::Temp)
            .alloc(seed.shape.elements() * width);
        edge_grads[logits_producer] = Some(seed);

        for op in plan.ops.iter().rev() {
            if !plan.requires_grad[op.id] || matches!(op.kind, OpKind::Loss { .. }) {
                continue;
            }
            let dy = match edge_grads[op.id].take() {
                Some(t) => t,
                // An op can require grad yet receive none only if every
                // consumer path was grad-free; nothing to do then.
                None => continue,
            };
            let tape = &mut record.tape;
            // Per-op transient workspace (convolutions only).
            let ws_elems = conv_ws_elems(self, op);
            if ws_elems > 0 {
                tape.ledger.gauge(MemoryGroup::Temp).alloc(ws_elems * width);
            }

            // Inputs as saved values.
            let saved_in = |i: usize| -> Tensor {
                match op.inputs[i] {
                    EdgeRef::GraphInput => record.saved_input.clone().expect("input saved"),
                    EdgeRef::Op(p) => record.saved_edges[p]
                        .clone()
                        .unwrap_or_else(|| panic!("edge {} not saved for {}", p, op.name)),
                }
            };
            let grads_in = &plan.grad_into_input[op.id];
            let mut produced: Vec<(usize, Tensor)> = Vec::new();

            match &op.kind {
                OpKind::Conv { p } => {
                    let want_dw = plan.has_trainable_params(op.id);
                    let want_dx = grads_in[0];
                    let x = if want_dw || want_dx {
                        // dx needs only the weights, but the input was saved
                        // for any backward through the layer.
                        saved_in(0)
                    } else {
                        unreachable!("conv backward without work")
                    };
                    let w = self.params[op.params[0]].data.clone();
                    let ungrouped = op.raw_weight_trainable && self.convention_paper;
                    let (dwb, dbb) = split_wb(&mut grads, op.params.as_slice(), p.bias, want_dw);
                    let dx = crate::ops::conv_bwd(
                        &x, &w, &dy, p, want_dw, want_dx, ungrouped, dwb, dbb, tape,
                    );
                    if let Some(dx) = dx {
                        produced.push((0, dx));
                    }
                }
                OpKind::Linear { p } => {
                    let want_dw = plan.has_trainable_params(op.id);
                    let want_dx = grads_in[0];
                    let x = saved_in(0);
                    let w = self.params[op.params[0]].data.clone();
                    let (dwb, dbb) = split_wb(&mut grads, op.params.as_slice(), p.bias, want_dw);
                    let dx =
                        crate::ops::linear_bwd(&x, &w, &dy, p, want_dw, want_dx, dwb, dbb, tape);
                    if let Some(dx) = dx {
                        produced.push((0, dx));
                    }
                }
                OpKind::Bn { .. } => {
                    let x = saved_in(0);
                    let stats = record.bn_stats[op.id].as_ref().expect("bn stats saved");
                    let gamma = self.params[op.params[0]].data.clone();
                    let trainable = plan.has_trainable_params(op.id);
                    let (dg, db) = if trainable {
                        let (a, b) = twin(&mut grads, op.params[0], op.params[1]);
                        (Some(a), Some(b))
                    } else {
                        (None, None)
                    };
                    let dx = crate::ops::bn_bwd(&x, &dy, &gamma, stats, grads_in[0], dg, db, tape);
                    if let Some(dx) = dx {
                        produced.push((0, dx));
                    }
                }
                OpKind::Act { act } => {
                    if grads_in[0] {
                        let x = saved_in(0);
                        let dx = crate::ops::act_bwd(&x, &dy, *act, tape);
                        produced.push((0, dx));
                    }
                }
                OpKind::Avgpool => {
                    if grads_in[0] {
                        let dx = crate::ops::avgpool_bwd(op.in_shapes[0], &dy, tape);
                        produced.push((0, dx));
                    }
                }
                OpKind::Maxpool {
                    kernel,
                    stride,
                    padding,
                } => {
                    if grads_in[0] {
                        let x = saved_in(0);
                        let dx = crate::ops::maxpool_bwd(&x, &dy, *kernel, *stride, *padding);
                        produced.push((0, dx));
                    }
                }
                OpKind::ResidualAdd => {
                    // Pure routing, charged as zero.
                    if grads_in[0] {
                        produced.push((0, dy.clone()));
                    }
                    if grads_in[1] {
                        produced.push((1, dy.clone()));
                    }
                }
                OpKind::ChannelMul => {
                    let feat = saved_in(0);
                    let gate = saved_in(1);
                    let (dfeat, dgate) = crate::ops::channel_mul_bwd(
                        &feat,
                        &gate,
                        &dy,
                        grads_in[0],
                        grads_in[1],
                        tape,
                    );
                    if let Some(d) = dfeat {
                        produced.push((0, d));
                    }
                    if let Some(d) = dgate {
                        produced.push((1, d));
                    }
                }
                OpKind::Flatten => {
                    if grads_in[0] {
                        produced.push((0, Tensor::from_vec(op.in_shapes[0], dy.data.clone())));
                    }
                }
                OpKind::AdapterMerge { scaling } => {
                    if grads_in[0] {
                        produced.push((0, dy.clone()));
                    }
                    if grads_in[1] {
                        let mut d = Tensor::zeros(dy.shape);
                        for i in 0..dy.data.len() {
                            d.data[i] = scaling * dy.data[i];
                        }
                        tape.counters.add(Phase::BwdInput, dy.shape.elements());
                        produced.push((1, d));
                    }
                }
                OpKind::DoraMerge { scaling, .. } => {
                    let (scale, inv) = record.dora.by_op[op.id]
                        .as_ref()
                        .expect("dora scale")
                        .clone();
                    let base = saved_in(0);
                    let lora = saved_in(1);
                    if grads_in[0] {
                        let mut d = Tensor::zeros(dy.shape);
                        for n in 0..dy.shape.n {
                            for c in 0..dy.shape.c {
                                for h in 0..dy.shape.h {
                                    for w in 0..dy.shape.w {
                                        *d.at_mut(n, c, h, w) = dy.at(n, c, h, w) * scale[c];
                                    }
                                }
                            }
                        }
                        tape.counters.add(Phase::BwdInput, dy.shape.elements());
                        produced.push((0, d));
                    }
                    if grads_in[1] {
                        let mut d = Tensor::zeros(dy.shape);
                        for n in 0..dy.shape.n {
                            for c in 0..dy.shape.c {
                                let ss = scale[c] * scaling;
                                for h in 0..dy.shape.h {
                                    for w in 0..dy.shape.w {
                                        *d.at_mut(n, c, h, w) = dy.at(n, c, h, w) * ss;
                                    }
                                }
                            }
                        }
                        tape.counters.add(Phase::BwdInput, dy.shape.elements());
                        produced.push((1, d));
                    }
                    // Magnitude gradient through scale = m * inv_norm, the
                    // norm itself being detached.
                    let dm = grads[op.params[0]].as_mut().expect("magnitude grad");
                    for c in 0..dy.shape.c {
                        let mut acc_base = 0.0;
                        let mut acc_lora = 0.0;
                        for n in 0..dy.shape.n {
                            for h in 0..dy.shape.h {
                                for w in 0..dy.shape.w {
                                    acc_base += dy.at(n, c, h, w) * base.at(n, c, h, w);
                                    acc_lora += dy.at(n, c, h, w) * lora.at(n, c, h, w);
                                }
                            }
                        }
                        dm.data[c] += (acc_base + scaling * acc_lora) * inv[c];
                    }
                    tape.counters.add(Phase::BwdWeight, 4 * dy.shape.elements());
                    tape.counters.add(Phase::BwdWeight, 2 * dy.shape.c as u64);
                }
                OpKind::Loss { .. } => unreachable!(),
            }

            if ws_elems > 0 {
                record
                    .tape
                    .ledger
                    .gauge(MemoryGroup::Temp)
                    .free(ws_elems * width);
            }
            // Consume this op's output gradient, then land the produced
            // input gradients (accumulating where a buffer exists).
            record
                .tape
                .ledger
                .gauge(MemoryGroup::Temp)
                .free(dy.shape.elements() * width);
            drop(dy);
            for (slot, tensor) in produced {
                let target = match op.inputs[slot] {
                    EdgeRef::Op(p) => p,
                    EdgeRef::GraphInput => continue, // never materialized
                };
                match edge_grads[target].as_mut() {
                    Some(existing) => {
                        for (a, b) in existing.data.iter_mut().zip(tensor.data.iter()) {
                            *a += b; // cross-op accumulation is uncharged
                        }
                    }
                    None => {
                        record
                            .tape
                            .ledger
                            .gauge(MemoryGroup::Temp)
                            .alloc(tensor.shape.elements() * width);
                        edge_grads[target] = Some(tensor);
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// Workspace elements a convolution backward allocates: the larger of the
/// weight-side unfold and the input-side column buffer.
fn conv_ws_elems(exec: &Executable, op: &peftprof_core::step::StepOp) -> u64 {
    let OpKind::Conv { p } = &op.kind else {
        return 0;
    };
    let plan = &exec.plan;
    let hw = op.out_shape.n as u64 * (op.out_shape.h * op.out_shape.w) as u64;
    let k2 = (p.kernel * p.kernel) as u64;
    let w_side = if plan.has_trainable_params(op.id) {
        (p.in_channels / p.groups) as u64 * k2 * hw
    } else {
        0
    };
    let x_side = if plan.grad_into_input[op.id][0] {
        let fan = if op.raw_weight_trainable && exec.convention_paper {
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

fn split_wb<'g>(
    grads: &'g mut GradMap,
    params: &[usize],
    has_bias: bool,
    want: bool,
) -> (Option<&'g mut [f64]>, Option<&'g mut [f64]>) {
    if !want {
        return (None, None);
    }
    if has_bias {
        let (a, b) = twin(grads, params[0], params[1]);
        (Some(a), Some(b))
    } else {
        let g = grads[params[0]]
            .as_mut()
            .expect("weight grad")
            .data
            .as_mut_slice();
        (Some(g), None)
    }
}

/// Two disjoint mutable gradient slices.
fn twin(grads: &mut GradMap, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert_ne!(a, b);
    let (lo, hi, swap) = if a < b { (a, b, false) } else { (b, a, true) };
    let (left, right) = grads.split_at_mut(hi);
    let la = left[lo].as_mut().expect("grad buffer").data.as_mut_slice();
    let rb = right[0].as_mut().expect("grad buffer").data.as_mut_slice();
    if swap {
        (rb, la)
    } else {
        (la, rb)
    }
}
