//! Fold adapters back into plain layer weights.

use crate::exec::{EngineError, Executable, DORA_NORM_EPS};
use peftprof_core::peft::{apply_method, PeftConfig, PeftMethod};
use peftprof_core::step::OpKind;

/// Merge lora/dora adapters into the base weights and return an executable
/// over the plain graph: `W0 + (alpha/r) * BA` for lora, the magnitude-
/// rescaled directional sum for dora. Biases of dora layers rescale with
/// their output channel.
pub fn merge_adapters(exec: &Executable) -> Result<Executable, EngineError> {
    if !exec.tuned.method.uses_adapters() {
        return Err(EngineError::NotAdapterMethod(exec.tuned.method));
    }
    // The merged model is the base graph under full fine-tuning flags (plain
    // layers, no adapters); weights are rewritten below.
    let mut config = PeftConfig::new(PeftMethod::Fft);
    config.target_selector = exec.tuned.config.target_selector;
    let base = apply_method(&exec.tuned.graph, config).map_err(|e| {
        EngineError::Graph(peftprof_core::graph::GraphError::UnknownArch(e.to_string()))
    })?;
    let mut merged = Executable::new(&base, exec.plan.input, 0)?;

    // Copy every base parameter across by (node, name) identity.
    let mut by_name: std::collections::BTreeMap<&str, usize> = Default::default();
    for rec in &exec.plan.params {
        by_name.insert(rec.name.as_str(), rec.id);
    }
    for rec in &merged.plan.params {
        if let Some(&src) = by_name.get(rec.name.as_str()) {
            merged.params[rec.id].data = exec.params[src].data.clone();
        }
    }
    for (op_id, buf) in exec.bn_running.iter().enumerate() {
        if let Some(buf) = buf {
            // Graph node ids are shared between the two plans for BN ops.
            let node = exec.plan.ops[op_id].node.expect("bn has a node");
            let dst = merged
                .plan
                .ops
                .iter()
                .find(|o| o.node == Some(node) && matches!(o.kind, OpKind::Bn { .. }))
                .expect("bn survives merge")
                .id;
            merged.bn_running[dst] = Some(buf.clone());
        }
    }

    // Fold each adapter into its base weight.
    for op in &exec.plan.ops {
        let (is_dora, scaling, m, n, base_op, a_op, b_op) = match &op.kind {
            OpKind::AdapterMerge { scaling } => {
                // Locate siblings: base is inputs[0], B is inputs[1], A feeds B.
                let base_op = match op.inputs[0] {
                    peftprof_core::step::EdgeRef::Op(p) => p,
                    _ => unreachable!(),
                };
                let b_op = match op.inputs[1] {
                    peftprof_core::step::EdgeRef::Op(p) => p,
                    _ => unreachable!(),
                };
                let a_op = match exec.plan.ops[b_op].inputs[0] {
                    peftprof_core::step::EdgeRef::Op(p) => p,
                    _ => unreachable!(),
                };
                let (m, n) = weight_dims(&exec.plan.ops[base_op].kind);
                (false, *scaling, m, n, base_op, a_op, b_op)
            }
            OpKind::DoraMerge {
                scaling,
                m,
                n,
                base_op,
                a_op,
                b_op,
                ..
            } => (true, *scaling, *m, *n, *base_op, *a_op, *b_op),
            _ => continue,
        };
        let rank = exec.plan.params[exec.plan.ops[a_op].params[0]]
            .matricized
            .expect("adapter A matricized")
            .0;
        let w0 = &exec.params[exec.plan.ops[base_op].params[0]].data;
        let a = &exec.params[exec.plan.ops[a_op].params[0]].data; // (rank, n)
        let b = &exec.params[exec.plan.ops[b_op].params[0]].data; // (m, rank)
        let mut w_new = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut ba = 0.0;
                for k in 0..rank {
                    ba += b[i * rank + k] * a[k * n + j];
                }
                w_new[i * n + j] = w0[i * n + j] + scaling * ba;
            }
        }
        let mut row_scale = vec![1.0; m];
        if is_dora {
            let mag = &exec.params[op.params[0]].data;
            for (i, rs) in row_scale.iter_mut().enumerate() {
                let mut sq = 0.0;
                for j in 0..n {
                    sq += w_new[i * n + j] * w_new[i * n + j];
                }
                let norm = (sq + DORA_NORM_EPS).sqrt();
                *rs = mag[i] / norm;
                for j in 0..n {
                    w_new[i * n + j] *= *rs;
                }
            }
        }
        // Write back into the merged executable's matching weight.
        let base_name = &exec.plan.params[exec.plan.ops[base_op].params[0]].name;
        let dst = merged
            .plan
            .params
            .iter()
            .find(|r| &r.name == base_name)
            .expect("merged weight exists")
            .id;
        merged.params[dst].data = w_new;
        // DoRA rescales the bias rows too, when present.
        if is_dora && exec.plan.ops[base_op].params.len() > 1 {
            let bias_name = &exec.plan.params[exec.plan.ops[base_op].params[1]].name;
            let dstb = merged
                .plan
                .params
                .iter()
                .find(|r| &r.name == bias_name)
                .expect("merged bias exists")
                .id;
            let src_bias = exec.params[exec.plan.ops[base_op].params[1]].data.clone();
            merged.params[dstb].data = src_bias
                .iter()
                .zip(&row_scale)
                .map(|(b, s)| b * s)
                .collect();
        }
    }
    Ok(merged)
}

fn weight_dims(kind: &OpKind) -> (usize, usize) {
    match kind {
        OpKind::Conv { p } => (
            p.out_channels,
            p.in_channels / p.groups * p.kernel * p.kernel,
        ),
        OpKind::Linear { p } => (p.out_features, p.in_features),
        _ => unreachable!("adapters attach to conv/linear"),
    }
}
