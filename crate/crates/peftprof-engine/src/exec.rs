//! Executable models: parameter storage, seeded initialization, and the
//! instrumented forward/backward passes over a `StepPlan`.

use crate::tape::Tape;
use crate::tensor::{ParamValue, Tensor};
use peftprof_core::flops::Phase;
use peftprof_core::memory::MemoryGroup;
use peftprof_core::peft::TunedModel;
use peftprof_core::step::{EdgeRef, OpKind, ParamId, ParamKind, StepPlan};
use peftprof_core::TensorShape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const DORA_NORM_EPS: f64 = 1e-12;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("input shape {got} does not match the plan input {want}")]
    InputShape { got: TensorShape, want: TensorShape },
    #[error("label {0} out of range for {1} classes")]
    BadLabel(usize, usize),
    #[error("{0}")]
    Graph(#[from] peftprof_core::graph::GraphError),
    #[error("merge_adapters requires an adapter method, got {0}")]
    NotAdapterMethod(peftprof_core::peft::PeftMethod),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnBuffers {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A tuned model bound to concrete, deterministically seeded parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Executable {
    pub tuned: TunedModel,
    pub plan: StepPlan,
    pub params: Vec<ParamValue>,
    pub bn_running: Vec<Option<BnBuffers>>,
    pub bn_mode: BnMode,
    /// Paper counting convention: directly trained grouped convolutions run
    /// the dense input-gradient kernel.
    pub convention_paper: bool,
    /// Element width used for ledger accounting (bytes per element).
    pub width: u64,
}

impl Executable {
    pub fn new(tuned: &TunedModel, input: TensorShape, seed: u64) -> Result<Self, EngineError> {
        let plan = StepPlan::build(tuned, input)?;
        let mut params: Vec<ParamValue> = plan
            .params
            .iter()
            .map(|p| ParamValue::zeros(p.elements))
            .collect();
        // Weight init: zero-mean uniform with fan-in scaling; adapter B and
        // biases start at zero so adapter methods preserve the base output.
        // Each parameter draws from its own name-keyed stream, so identical
        // layers initialize identically across methods.
        for rec in &plan.params {
            let op = &plan.ops[rec.op];
            let mut rng = name_rng(seed, &rec.name);
            match rec.kind {
                ParamKind::Weight | ParamKind::AdapterA => {
                    let fan_in = match &op.kind {
                        OpKind::Conv { p } => p.in_channels / p.groups * p.kernel * p.kernel,
                        OpKind::Linear { p } => p.in_features,
                        _ => rec.elements as usize,
                    };
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    for v in params[rec.id].data.iter_mut() {
                        *v = rng.gen_range(-bound..bound);
                    }
                }
                ParamKind::Bias => {
                    let bound = 0.1;
                    for v in params[rec.id].data.iter_mut() {
                        *v = rng.gen_range(-bound..bound);
                    }
                }
                ParamKind::BnGamma => params[rec.id].data.fill(1.0),
                ParamKind::BnBeta | ParamKind::AdapterB => {}
                ParamKind::DoraMagnitude => {} // set below from the base norms
            }
        }
        // DoRA magnitudes start at the column norms of the base weight, so
        // the initial scale is exactly one.
        for op in &plan.ops {
            if let OpKind::DoraMerge { base_op, m, n, .. } = &op.kind {
                let w0 = plan.ops[*base_op].params[0];
                let mag = op.params[0];
                for row in 0..*m {
                    let mut sq = 0.0;
                    for col in 0..*n {
                        let v = params[w0].data[row * n + col];
                        sq += v * v;
                    }
                    params[mag].data[row] = sq.sqrt();
                }
            }
        }
        let bn_running = plan
            .ops
            .iter()
            .map(|op| match op.kind {
                OpKind::Bn { channels } => Some(BnBuffers {
                    mean: vec![0.0; channels],
                    var: vec![1.0; channels],
                }),
                _ => None,
            })
            .collect();
        Ok(Executable {
            tuned: tuned.clone(),
            plan,
            params,
            bn_running,
            bn_mode: BnMode::Train,
            convention_paper: true,
            width: peftprof_core::memory::DEFAULT_ELEMENT_WIDTH,
        })
    }

    /// Replace every trainable parameter with fresh random values (useful for
    /// gradient checks where adapter B must leave its zero init).
    pub fn randomize_trainable(&mut self, seed: u64) {
        for rec in &self.plan.params {
            if !rec.trainable {
                continue;
            }
            let mut rng = name_rng(seed, &rec.name);
            let scale = match rec.kind {
                ParamKind::DoraMagnitude => 0.2,
                _ => 0.5,
            };
            for v in self.params[rec.id].data.iter_mut() {
                let r: f64 = rng.gen_range(-1.0..1.0);
                match rec.kind {
                    // Keep magnitudes near their norm-anchored init.
                    ParamKind::DoraMagnitude => *v += scale * r * v.abs().max(0.1),
                    _ => *v += scale * r * 0.2,
                }
            }
        }
    }

    pub fn param_value(&self, id: ParamId) -> &[f64] {
        &self.params[id].data
    }

    /// Graph input tensor for tests: deterministic pseudo-random values.
    pub fn random_input(&self, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(self.plan.input);
        for v in t.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }
}

/// DoRA per-layer norm state computed in the step prologue. Only the
/// inverse norms are part of the (detached) snapshot; the scale is always
/// `magnitude * inv_norm` with the live magnitude.
#[derive(Debug, Clone)]
pub struct DoraScales {
    /// (scale, inv_norm) per merge op, indexed by op id.
    pub by_op: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl DoraScales {
    /// The detachable part: inverse norms only.
    pub fn inv_snapshot(&self) -> Vec<Option<Vec<f64>>> {
        self.by_op
            .iter()
            .map(|e| e.as_ref().map(|(_, inv)| inv.clone()))
            .collect()
    }
}

fn name_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the parameter name, mixed with the run seed.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// Everything the backward pass needs from one forward execution.
pub struct ForwardRecord {
    pub tape: Tape,
    /// Saved edge values (by producer op id). The graph input is saved
    /// separately.
    pub saved_edges: Vec<Option<Tensor>>,
    pub saved_input: Option<Tensor>,
    /// BN batch statistics (mean, inv_std) per op.
    pub bn_stats: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    pub dora: DoraScales,
    pub logits: Tensor,
    /// Softmax probabilities saved by the loss.
    pub probs: Option<Tensor>,
    pub loss: f64,
}

/// Gradients per parameter id (entries only for trainable parameters).
pub type GradMap = Vec<Option<ParamValue>>;

pub fn softmax_probs(logits: &Tensor) -> Tensor {
    let mut probs = logits.clone();
    let classes = logits.shape.c;
    for n in 0..logits.shape.n {
        let row = &mut probs.data[n * classes..(n + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    probs
}

pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> f64 {
    let classes = probs.shape.c;
    let mut loss = 0.0;
    for (n, &label) in labels.iter().enumerate() {
        loss -= probs.data[n * classes + label].max(1e-300).ln();
    }
    loss / labels.len() as f64
}

impl Executable {
    /// One instrumented forward pass. When `frozen_norms` is supplied the
    /// DoRA inverse norms are not recomputed (used by finite-difference
    /// checks, which must honor the detached-norm semantics); the scale
    /// itself still tracks the live magnitude parameter.
    pub fn forward(
        &mut self,
        input: &Tensor,
        frozen_norms: Option<&[Option<Vec<f64>>]>,
    ) -> Result<ForwardRecord, EngineError> {
        if input.shape != self.plan.input {
            return Err(EngineError::InputShape {
                got: input.shape,
                want: self.plan.input,
            });
        }
        let plan = self.plan.clone();
        let mut tape = Tape::default();
        let width = self.width;

        // PARAM group: parameters, adapter tensors and BN running buffers.
        let param_bytes = (plan.total_param_elements() + plan.buffer_elements()) * width;
        tape.ledger.gauge(MemoryGroup::Param).alloc(param_bytes);

        // DoRA prologue: rebuild every adapted layer's per-channel scale in a
        // scratch arena, freed in one batch once all scales exist.
        let mut dora = DoraScales {
            by_op: vec![None; plan.ops.len()],
        };
        if let Some(frozen) = frozen_norms {
            for op in &plan.ops {
                if let OpKind::DoraMerge { .. } = &op.kind {
                    let inv = frozen[op.id].as_ref().expect("frozen norm").clone();
                    let mag = &self.params[op.params[0]].data;
                    let scale: Vec<f64> = mag.iter().zip(&inv).map(|(m, i)| m * i).collect();
                    dora.by_op[op.id] = Some((scale, inv));
                }
            }
        } else {
            let mut arena_bytes = 0u64;
            for op in &plan.ops {
                if let OpKind::DoraMerge {
                    scaling,
                    m,
                    n,
                    base_op,
                    a_op,
                    b_op,
                    ..
                } = &op.kind
                {
                    let (m, n) = (*m, *n);
                    let rank = match &plan.ops[*a_op].kind {
                        OpKind::Conv { p } => p.out_channels,
                        OpKind::Linear { p } => p.out_features,
                        _ => unreachable!(),
                    };
                    let w0 = &self.params[plan.ops[*base_op].params[0]].data;
                    let a = &self.params[plan.ops[*a_op].params[0]].data; // (rank, n)
                    let b = &self.params[plan.ops[*b_op].params[0]].data; // (m, rank)
                    let mag = &self.params[op.params[0]].data;
                    // P = B * A, then V = W0 + scaling * P, row norms, scale.
                    let mut p_buf = vec![0.0; m * n];
                    tape.ledger
                        .gauge(MemoryGroup::Temp)
                        .alloc((m * n) as u64 * width);
                    arena_bytes += (m * n) as u64 * width;
                    for i in 0..m {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for k in 0..rank {
                                acc += b[i * rank + k] * a[k * n + j];
                            }
                            p_buf[i * n + j] = acc;
                        }
                    }
                    tape.counters.add(Phase::Fwd, 2 * (m * n * rank) as u64);
                    let mut v_buf = vec![0.0; m * n];
                    tape.ledger
                        .gauge(MemoryGroup::Temp)
                        .alloc((m * n) as u64 * width);
                    arena_bytes += (m * n) as u64 * width;
                    for i in 0..m * n {
                        v_buf[i] = w0[i] + scaling * p_buf[i];
                    }
                    tape.counters.add(Phase::Fwd, 2 * (m * n) as u64);
                    let mut scale = vec![0.0; m];
                    let mut inv = vec![0.0; m];
                    for i in 0..m {
                        let mut sq = 0.0;
                        for j in 0..n {
                            let v = v_buf[i * n + j];
                            sq += v * v;
                        }
                        tape.counters.add(Phase::Fwd, 2 * n as u64);
                        let norm = (sq + DORA_NORM_EPS).sqrt();
                        inv[i] = 1.0 / norm;
                        scale[i] = mag[i] * inv[i];
                        tape.counters.add(Phase::Fwd, 3);
                    }
                    dora.by_op[op.id] = Some((scale, inv));
                }
            }
            tape.ledger.gauge(MemoryGroup::Temp).free(arena_bytes);
        }

        // Forward walk with reference-counted activation buffers.
        let mut remaining: Vec<usize> = vec![0; plan.ops.len()];
        for op in &plan.ops {
            for e in &op.inputs {
                if let EdgeRef::Op(p) = e {
                    remaining[*p] += 1;
                }
            }
        }
        // The saved-for-backward policy, shared with the analytic model.
        let saved_set = peftprof_core::memory::saved_activation_set(&plan);
        let mut edge_saved = vec![false; plan.ops.len()];
        for e in &saved_set {
            if let peftprof_core::memory::SaveKey::OpOutput(op) = e.key {
                edge_saved[op] = true;
            }
        }

        // The live input tensor is resident for the whole step.
        tape.ledger
            .gauge(MemoryGroup::Act)
            .alloc(input.shape.elements() * width);
        let saved_input = Some(input.clone());

        let mut edge_vals: Vec<Option<Tensor>> = vec![None; plan.ops.len()];
        let mut saved_edges: Vec<Option<Tensor>> = vec![None; plan.ops.len()];
        let mut bn_stats: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; plan.ops.len()];
        let mut logits: Option<Tensor> = None;
        let mut probs: Option<Tensor> = None;
        let mut loss = 0.0;

        for op in &plan.ops {
            // Fetch input views (cloning references, not data).
            let get_in = |i: usize, edge_vals: &Vec<Option<Tensor>>| -> Tensor {
                match op.inputs[i] {
                    EdgeRef::GraphInput => input.clone(),
                    EdgeRef::Op(p) => edge_vals[p].clone().expect("producer value live"),
                }
            };
            // In-place fusion for off-chain normalizations/activations with a
            // single consumer: the output continues life in the input buffer.
            let in_place = matches!(op.kind, OpKind::Bn { .. } | OpKind::Act { .. })
                && !plan.requires_grad[op.id]
                && matches!(op.inputs[0], EdgeRef::Op(p) if remaining[p] == 1);

            let out = match &op.kind {
                OpKind::Conv { p } => {
                    let x = get_in(0, &edge_vals);
                    let w = &self.params[op.params[0]].data;
                    let bias = if p.bias {
                        Some(&self.params[op.params[1]].data)
                    } else {
                        None
                    };
                    crate::ops::conv_fwd(
                        &x,
                        w,
                        bias.map(|b| b.as_slice()),
                        p,
                        op.out_shape,
                        &mut tape,
                    )
                }
                OpKind::Linear { p } => {
                    let x = get_in(0, &edge_vals);
                    let w = &self.params[op.params[0]].data;
                    let bias = if p.bias {
                        Some(&self.params[op.params[1]].data)
                    } else {
                        None
                    };
                    crate::ops::linear_fwd(&x, w, bias.map(|b| b.as_slice()), p, &mut tape)
                }
                OpKind::Bn { channels } => {
                    let mut x = if in_place {
                        match op.inputs[0] {
                            EdgeRef::Op(p) => edge_vals[p].take().expect("bn input live"),
                            EdgeRef::GraphInput => unreachable!(),
                        }
                    } else {
                        get_in(0, &edge_vals)
                    };
                    let gamma = &self.params[op.params[0]].data;
                    let beta = &self.params[op.params[1]].data;
                    let running = self.bn_running[op.id].as_mut().expect("bn buffers");
                    let (y, stats) = crate::ops::bn_fwd(
                        &mut x,
                        gamma,
                        beta,
                        running,
                        *channels,
                        self.bn_mode,
                        BN_EPS,
                        BN_MOMENTUM,
                        in_place,
                        &mut tape,
                    );
                    if plan.requires_grad[op.id] {
                        bn_stats[op.id] = Some(stats);
                    }
                    y
                }
                OpKind::Act { act } => {
                    let mut x = if in_place {
                        match op.inputs[0] {
                            EdgeRef::Op(p) => edge_vals[p].take().expect("act input live"),
                            EdgeRef::GraphInput => unreachable!(),
                        }
                    } else {
                        get_in(0, &edge_vals)
                    };
                    crate::ops::act_fwd(&mut x, *act, in_place, &mut tape)
                }
                OpKind::Avgpool => {
                    let x = get_in(0, &edge_vals);
                    crate::ops::avgpool_fwd(&x, &mut tape)
                }
                OpKind::Maxpool {
                    kernel,
                    stride,
                    padding,
                } => {
                    let x = get_in(0, &edge_vals);
                    crate::ops::maxpool_fwd(&x, *kernel, *stride, *padding, op.out_shape)
                }
                OpKind::ResidualAdd => {
                    let a = get_in(0, &edge_vals);
                    let b = get_in(1, &edge_vals);
                    crate::ops::residual_fwd(&a, &b, &mut tape)
                }
                OpKind::ChannelMul => {
                    let a = get_in(0, &edge_vals);
                    let g = get_in(1, &edge_vals);
                    crate::ops::channel_mul_fwd(&a, &g, &mut tape)
                }
                OpKind::Flatten => {
                    let x = get_in(0, &edge_vals);
                    Tensor::from_vec(op.out_shape, x.data)
                }
                OpKind::AdapterMerge { scaling } => {
                    let a = get_in(0, &edge_vals);
                    let b = get_in(1, &edge_vals);
                    crate::ops::adapter_merge_fwd(&a, &b, *scaling, &mut tape)
                }
                OpKind::DoraMerge { scaling, .. } => {
                    let base = get_in(0, &edge_vals);
                    let lora = get_in(1, &edge_vals);
                    let (scale, _) = dora.by_op[op.id].as_ref().expect("dora scale");
                    crate::ops::dora_merge_fwd(&base, &lora, scale, *scaling, &mut tape)
                }
                OpKind::Loss { classes } => {
                    let x = get_in(0, &edge_vals);
                    logits = Some(x.clone());
                    let p = softmax_probs(&x);
                    tape.ledger
                        .gauge(MemoryGroup::Act)
                        .alloc(x.shape.n as u64 * *classes as u64 * width);
                    probs = Some(p);
                    loss = 0.0; // filled by `loss_backward` once labels exist
                    Tensor::zeros(op.out_shape)
                }
            };

            // Account the output buffer (in-place ops reuse their input's).
            if !in_place && !matches!(op.kind, OpKind::Loss { .. }) {
                tape.ledger
                    .gauge(MemoryGroup::Act)
                    .alloc(out.shape.elements() * width);
            }
            // BN stats + dora scale sidecars live with the tape.
            match &op.kind {
                OpKind::Bn { channels } if bn_stats[op.id].is_some() => {
                    tape.ledger
                        .gauge(MemoryGroup::Act)
                        .alloc(2 * *channels as u64 * width);
                }
                OpKind::DoraMerge { m, .. } if plan.requires_grad[op.id] => {
                    tape.ledger
                        .gauge(MemoryGroup::Act)
                        .alloc(2 * *m as u64 * width);
                }
                _ => {}
            }
            edge_vals[op.id] = Some(out);

            // Release inputs whose last consumer just ran; keep saved edges.
            for e in &op.inputs {
                if let EdgeRef::Op(p) = e {
                    remaining[*p] -= 1;
                    if remaining[*p] == 0 {
                        if let Some(t) = edge_vals[*p].take() {
                            if edge_saved[*p] {
                                saved_edges[*p] = Some(t);
                            } else {
                                tape.ledger
                                    .gauge(MemoryGroup::Act)
                                    .free(t.shape.elements() * width);
                            }
                        }
                    }
                }
            }
        }
        // The loss output itself is a scalar; drop the remaining edge (its
        // producer value was captured as `logits`).
        let logits = logits.expect("loss ran");

        Ok(ForwardRecord {
            tape,
            saved_edges,
            saved_input,
            bn_stats,
            dora,
            logits,
            probs,
            loss,
        })
    }

    /// Mean cross-entropy loss and the logits gradient for the given labels.
    pub fn loss_and_seed(
        &self,
        record: &mut ForwardRecord,
        labels: &[usize],
    ) -> Result<(f64, Tensor), EngineError> {
        let probs = record.probs.as_ref().expect("probs saved");
        let classes = probs.shape.c;
        for &l in labels {
            if l >= classes {
                return Err(EngineError::BadLabel(l, classes));
            }
        }
        let loss = cross_entropy(probs, labels);
        record.loss = loss;
        let mut seed = probs.clone();
        let n = labels.len() as f64;
        for (i, &label) in labels.iter().enumerate() {
            for c in 0..classes {
                let idx = i * classes + c;
                seed.data[idx] = (seed.data[idx] - if c == label { 1.0 } else { 0.0 }) / n;
            }
        }
        Ok((loss, seed))
    }
}
