//! Analytic FLOPs model for one training step, resolved by phase.
//!
//! One multiply-accumulate counts as two FLOPs throughout. The `paper`
//! counting convention charges the input gradient of a directly trained
//! grouped convolution at the dense (ungrouped) rate: the fused backward
//! kernel that computes weight and input gradients together does not exploit
//! filter grouping on the input-gradient side. Pass-through (frozen) layers
//! and the `exact` convention use the grouped rate.

use crate::graph::{ConvParams, LayerKind, LayerNode, LinearParams};
use crate::optim::OptimizerPlan;
use crate::peft::{PeftMethod, TunedModel};
use crate::shape::TensorShape;
use crate::step::{OpId, OpKind, StepPlan};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Fwd,
    BwdInput,
    BwdWeight,
    Opt,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Fwd, Phase::BwdInput, Phase::BwdWeight, Phase::Opt];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountingConvention {
    Paper,
    Exact,
}

impl CountingConvention {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "paper" => Some(Self::Paper),
            "exact" => Some(Self::Exact),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Paper => "paper",
            Self::Exact => "exact",
        }
    }
}

#[derive(Debug, Error)]
pub enum FlopsError {
    #[error("layer `{0}` has no inferred shapes")]
    Unshaped(String),
    #[error("forward total is zero; ratio undefined")]
    ZeroForward,
    #[error("{0}")]
    Graph(#[from] crate::graph::GraphError),
}

// Kernel cost formulas. The reference engine's instrumented kernels charge
// the same amounts from inside their loops; these two paths are reconciled
// exactly by the oracle-parity suite.

pub fn conv_fwd_flops(p: &ConvParams, out: TensorShape) -> u64 {
    let macs = out.elements() * (p.in_channels / p.groups) as u64 * (p.kernel * p.kernel) as u64;
    2 * macs + if p.bias { out.elements() } else { 0 }
}

pub fn conv_bwd_input_flops(p: &ConvParams, out: TensorShape, grouped: bool) -> u64 {
    let fan = if grouped {
        p.in_channels / p.groups
    } else {
        p.in_channels
    };
    2 * out.elements() * fan as u64 * (p.kernel * p.kernel) as u64
}

pub fn conv_bwd_weight_flops(p: &ConvParams, out: TensorShape) -> u64 {
    let macs = out.elements() * (p.in_channels / p.groups) as u64 * (p.kernel * p.kernel) as u64;
    2 * macs + if p.bias { out.elements() } else { 0 }
}

pub fn linear_fwd_flops(l: &LinearParams, batch: u64) -> u64 {
    2 * batch * l.in_features as u64 * l.out_features as u64
        + if l.bias {
            batch * l.out_features as u64
        } else {
            0
        }
}

pub fn linear_bwd_input_flops(l: &LinearParams, batch: u64) -> u64 {
    2 * batch * l.in_features as u64 * l.out_features as u64
}

pub fn linear_bwd_weight_flops(l: &LinearParams, batch: u64) -> u64 {
    2 * batch * l.in_features as u64 * l.out_features as u64
        + if l.bias {
            batch * l.out_features as u64
        } else {
            0
        }
}

/// Training-mode BN forward: batch mean/variance, normalize, affine and the
/// running-statistics update.
pub fn bn_fwd_flops(elements: u64, channels: u64) -> u64 {
    8 * elements + 9 * channels
}

/// BN backward: renormalize the saved input, the two reductions and the
/// recentered input gradient. The affine gradients fall out of the same
/// reductions and add nothing.
pub fn bn_bwd_flops(elements: u64, channels: u64) -> u64 {
    9 * elements + 3 * channels
}

pub fn act_flops(elements: u64) -> u64 {
    elements
}

pub fn avgpool_fwd_flops(in_elements: u64, out_elements: u64) -> u64 {
    in_elements + out_elements
}

pub fn avgpool_bwd_flops(in_elements: u64) -> u64 {
    in_elements
}

/// DoRA per-step weight-space norm rebuild: BA product, directional sum,
/// squared column norms and the per-channel scale, all detached from the
/// gradient graph.
pub fn dora_norm_fwd_flops(m: u64, n: u64, r: u64) -> u64 {
    2 * r * m * n + 4 * m * n + 3 * m
}

/// DoRA merge forward: two per-channel scaled branches plus their sum.
pub fn dora_merge_fwd_flops(out_elements: u64) -> u64 {
    3 * out_elements
}

/// DoRA magnitude gradient: two reductions over the output map plus the
/// per-channel rescale by the inverse norm.
pub fn dora_magnitude_bwd_flops(out_elements: u64, channels: u64) -> u64 {
    4 * out_elements + 2 * channels
}

/// Standalone per-layer count for one phase. The layer is treated as its own
/// training target, so under the paper convention a grouped convolution's
/// input gradient is charged ungrouped.
pub fn layer_flops(
    layer: &LayerNode,
    phase: Phase,
    convention: CountingConvention,
) -> Result<u64, FlopsError> {
    let out = layer
        .output_shape
        .ok_or_else(|| FlopsError::Unshaped(layer.name.clone()))?;
    let input = layer
        .input_shape
        .ok_or_else(|| FlopsError::Unshaped(layer.name.clone()))?;
    Ok(match (&layer.kind, phase) {
        (_, Phase::Opt) => 0,
        (LayerKind::Conv2d(p), Phase::Fwd) => conv_fwd_flops(p, out),
        (LayerKind::Conv2d(p), Phase::BwdInput) => {
            conv_bwd_input_flops(p, out, convention == CountingConvention::Exact)
        }
        (LayerKind::Conv2d(p), Phase::BwdWeight) => conv_bwd_weight_flops(p, out),
        (LayerKind::Linear(l), Phase::Fwd) => linear_fwd_flops(l, out.n as u64),
        (LayerKind::Linear(l), Phase::BwdInput) => linear_bwd_input_flops(l, out.n as u64),
        (LayerKind::Linear(l), Phase::BwdWeight) => linear_bwd_weight_flops(l, out.n as u64),
        (LayerKind::Batchnorm2d { channels }, Phase::Fwd) => {
            bn_fwd_flops(out.elements(), *channels as u64)
        }
        (LayerKind::Batchnorm2d { channels }, Phase::BwdInput) => {
            bn_bwd_flops(out.elements(), *channels as u64)
        }
        (LayerKind::Batchnorm2d { .. }, Phase::BwdWeight) => 0,
        (LayerKind::Activation { .. }, Phase::Fwd | Phase::BwdInput) => act_flops(out.elements()),
        (LayerKind::Activation { .. }, Phase::BwdWeight) => 0,
        (LayerKind::Avgpool, Phase::Fwd) => avgpool_fwd_flops(input.elements(), out.elements()),
        (LayerKind::Avgpool, Phase::BwdInput) => avgpool_bwd_flops(input.elements()),
        (LayerKind::Avgpool, Phase::BwdWeight) => 0,
        (LayerKind::Maxpool { .. }, _) => 0,
        (LayerKind::ResidualAdd, Phase::Fwd) => out.elements(),
        (LayerKind::ResidualAdd, _) => 0,
        (LayerKind::ChannelMul, Phase::Fwd) => out.elements(),
        (LayerKind::ChannelMul, Phase::BwdInput) => 3 * out.elements(),
        (LayerKind::ChannelMul, Phase::BwdWeight) => 0,
        (LayerKind::Flatten, _) => 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFlopsRow {
    pub op: OpId,
    pub name: String,
    pub kind: String,
    pub fwd: u64,
    pub bwd_input: u64,
    pub bwd_weight: u64,
    pub opt: u64,
}

/// Phase-resolved FLOPs of one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub method: PeftMethod,
    pub convention: CountingConvention,
    pub input: TensorShape,
    pub layers: Vec<LayerFlopsRow>,
    pub fwd_total: u64,
    pub bwd_input_total: u64,
    pub bwd_weight_total: u64,
    pub opt_total: u64,
    pub grand_total: u64,
}

impl FlopsReport {
    pub fn phase_total(&self, phase: Phase) -> u64 {
        match phase {
            Phase::Fwd => self.fwd_total,
            Phase::BwdInput => self.bwd_input_total,
            Phase::BwdWeight => self.bwd_weight_total,
            Phase::Opt => self.opt_total,
        }
    }

    pub fn backward_total(&self) -> u64 {
        self.bwd_input_total + self.bwd_weight_total
    }
}

/// Exact rational backward/forward ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

pub fn flops_ratio(report: &FlopsReport) -> Result<Ratio, FlopsError> {
    if report.fwd_total == 0 {
        return Err(FlopsError::ZeroForward);
    }
    let num = report.backward_total();
    let den = report.fwd_total;
    let g = gcd(num.max(1), den);
    Ok(Ratio {
        num: num / g,
        den: den / g,
    })
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a.max(1)
    } else {
        gcd(b, a % b)
    }
}

/// Per-op FLOPs of the expanded step under the stated convention, including
/// the optimizer phase attributed back to each op's parameters.
pub fn profile_step_flops(
    step: &StepPlan,
    plan: &OptimizerPlan,
    convention: CountingConvention,
) -> FlopsReport {
    let mut layers: Vec<LayerFlopsRow> = step
        .ops
        .iter()
        .map(|op| {
            let (fwd, bwd_input, bwd_weight) = op_flops(step, op.id, convention);
            LayerFlopsRow {
                op: op.id,
                name: op.name.clone(),
                kind: op.kind.name().into(),
                fwd,
                bwd_input,
                bwd_weight,
                opt: 0,
            }
        })
        .collect();
    // Attribute optimizer work to the op owning each parameter.
    let r = plan.rank as u64;
    for e in &plan.entries {
        let op = step.params[e.param].op;
        let flops = match e.projected {
            Some((m, n)) => crate::optim::galore_projected_flops(m as u64, n as u64, r),
            None => match plan.rule {
                crate::optim::OptimizerRule::SgdMomentum => crate::optim::C_SGD * e.elements,
                _ => crate::optim::C_ADAM * e.elements,
            },
        };
        layers[op].opt += flops;
    }
    let fwd_total = layers.iter().map(|l| l.fwd).sum();
    let bwd_input_total = layers.iter().map(|l| l.bwd_input).sum();
    let bwd_weight_total = layers.iter().map(|l| l.bwd_weight).sum();
    let opt_total: u64 = layers.iter().map(|l| l.opt).sum();
    debug_assert_eq!(opt_total, plan.step_flops());
    FlopsReport {
        method: step.method,
        convention,
        input: step.input,
        grand_total: fwd_total + bwd_input_total + bwd_weight_total + opt_total,
        layers,
        fwd_total,
        bwd_input_total,
        bwd_weight_total,
        opt_total,
    }
}

/// Convenience entry point from a tuned model.
pub fn profile_flops(
    tuned: &TunedModel,
    plan: &OptimizerPlan,
    input: TensorShape,
    convention: CountingConvention,
) -> Result<FlopsReport, FlopsError> {
    let step = StepPlan::build(tuned, input)?;
    Ok(profile_step_flops(&step, plan, convention))
}

fn op_flops(step: &StepPlan, id: OpId, convention: CountingConvention) -> (u64, u64, u64) {
    let op = &step.ops[id];
    let out = op.out_shape;
    let runs_bwd = step.requires_grad[id];
    let grads_in = &step.grad_into_input[id];
    let has_weights = step.has_trainable_params(id);

    match &op.kind {
        OpKind::Conv { p } => {
            let fwd = conv_fwd_flops(p, out);
            let bwd_w = if runs_bwd && has_weights {
                conv_bwd_weight_flops(p, out)
            } else {
                0
            };
            let bwd_i = if runs_bwd && grads_in[0] {
                let grouped = !(convention == CountingConvention::Paper && op.raw_weight_trainable);
                conv_bwd_input_flops(p, out, grouped)
            } else {
                0
            };
            (fwd, bwd_i, bwd_w)
        }
        OpKind::Linear { p } => {
            let batch = out.n as u64;
            let fwd = linear_fwd_flops(p, batch);
            let bwd_w = if runs_bwd && has_weights {
                linear_bwd_weight_flops(p, batch)
            } else {
                0
            };
            let bwd_i = if runs_bwd && grads_in[0] {
                linear_bwd_input_flops(p, batch)
            } else {
                0
            };
            (fwd, bwd_i, bwd_w)
        }
        OpKind::Bn { channels } => {
            let fwd = bn_fwd_flops(out.elements(), *channels as u64);
            // The BN backward kernel runs whenever dx or the affine grads are
            // needed; one pass produces all of them.
            let needs = runs_bwd && (grads_in[0] || has_weights);
            let bwd = if needs {
                bn_bwd_flops(out.elements(), *channels as u64)
            } else {
                0
            };
            (fwd, bwd, 0)
        }
        OpKind::Act { .. } => {
            let fwd = act_flops(out.elements());
            let bwd = if runs_bwd && grads_in[0] {
                act_flops(out.elements())
            } else {
                0
            };
            (fwd, bwd, 0)
        }
        OpKind::Avgpool => {
            let fwd = avgpool_fwd_flops(op.in_shapes[0].elements(), out.elements());
            let bwd = if runs_bwd && grads_in[0] {
                avgpool_bwd_flops(op.in_shapes[0].elements())
            } else {
                0
            };
            (fwd, bwd, 0)
        }
        OpKind::Maxpool { .. } => (0, 0, 0),
        OpKind::ResidualAdd => (out.elements(), 0, 0),
        OpKind::ChannelMul => {
            let mut bwd = 0;
            if runs_bwd {
                if grads_in[0] {
                    bwd += out.elements(); // feature grad: dy * gate
                }
                if grads_in[1] {
                    bwd += 2 * out.elements(); // gate grad: reduce dy * feature
                }
            }
            (out.elements(), bwd, 0)
        }
        OpKind::Flatten => (0, 0, 0),
        OpKind::AdapterMerge { .. } => {
            let fwd = 2 * out.elements();
            // Only the scaled adapter branch costs anything on the way back.
            let bwd = if runs_bwd && grads_in[1] {
                out.elements()
            } else {
                0
            };
            (fwd, bwd, 0)
        }
        OpKind::DoraMerge { rank, m, n, .. } => {
            let fwd = dora_norm_fwd_flops(*m as u64, *n as u64, *rank as u64)
                + dora_merge_fwd_flops(out.elements());
            let mut bwd_i = 0;
            if runs_bwd {
                if grads_in[0] {
                    bwd_i += out.elements(); // base branch: dy * scale
                }
                if grads_in[1] {
                    bwd_i += out.elements(); // adapter branch: dy * (scale*s)
                }
            }
            // magnitude gradient (the op always carries the trainable m)
            let bwd_w = if runs_bwd {
                dora_magnitude_bwd_flops(out.elements(), *m as u64)
            } else {
                0
            };
            (fwd, bwd_i, bwd_w)
        }
        OpKind::Loss { .. } => (0, 0, 0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_model, Arch, ToyLayer};
    use crate::graph::Activation;
    use crate::optim::{build_plan_for, OptimizerRule};
    use crate::peft::{apply_method, PeftConfig};

    fn shaped_conv(c_in: usize, c_out: usize, groups: usize, hw: usize) -> LayerNode {
        let g = build_model(
            Arch::ToyCnn(vec![ToyLayer::Conv {
                out: c_out,
                kernel: 3,
                stride: 1,
                groups,
            }]),
            2,
        )
        .unwrap();
        let mut g = g;
        if let LayerKind::Conv2d(ref mut p) = g.nodes[0].kind {
            p.in_channels = c_in;
        }
        let shaped = g
            .infer_shapes(TensorShape::new(1, c_in, hw, hw))
            .expect("toy conv shapes");
        shaped.nodes[0].clone()
    }

    #[test]
    fn dense_conv_forward_formula() {
        // conv 3x3, 16->16, g=1, out 32x32: 2*1024*16*16*9 = 4,718,592
        let node = shaped_conv(16, 16, 1, 32);
        assert_eq!(
            layer_flops(&node, Phase::Fwd, CountingConvention::Paper).unwrap(),
            4_718_592
        );
    }

    #[test]
    fn depthwise_forward_is_dense_over_cin() {
        let node = shaped_conv(16, 16, 16, 32);
        let fwd = layer_flops(&node, Phase::Fwd, CountingConvention::Paper).unwrap();
        assert_eq!(fwd, 294_912);
        assert_eq!(fwd, 4_718_592 / 16);
    }

    #[test]
    fn depthwise_input_gradient_paper_vs_exact() {
        let node = shaped_conv(16, 16, 16, 32);
        let paper = layer_flops(&node, Phase::BwdInput, CountingConvention::Paper).unwrap();
        let exact = layer_flops(&node, Phase::BwdInput, CountingConvention::Exact).unwrap();
        assert_eq!(paper, 4_718_592);
        assert_eq!(exact, 294_912);
        assert_eq!(paper, exact * 16);
    }

    #[test]
    fn linear_forward_formula() {
        let g = build_model(
            Arch::ToyCnn(vec![ToyLayer::Flatten, ToyLayer::Linear { out: 1000 }]),
            1000,
        )
        .unwrap();
        let mut g = g;
        if let LayerKind::Linear(ref mut l) = g.nodes[1].kind {
            l.in_features = 1280;
            l.bias = false;
        }
        let shaped = g.infer_shapes(TensorShape::new(1, 1280, 1, 1)).unwrap();
        assert_eq!(
            layer_flops(&shaped.nodes[1], Phase::Fwd, CountingConvention::Paper).unwrap(),
            2_560_000
        );
    }

    #[test]
    fn exact_never_exceeds_paper() {
        for groups in [1usize, 4, 16] {
            let node = shaped_conv(16, 16, groups, 8);
            for phase in Phase::ALL {
                let paper = layer_flops(&node, phase, CountingConvention::Paper).unwrap();
                let exact = layer_flops(&node, phase, CountingConvention::Exact).unwrap();
                assert!(exact <= paper, "exact > paper for g={groups} {phase:?}");
            }
        }
    }

    #[test]
    fn report_totals_are_additive() {
        let g = build_model(Arch::MobilenetV2, 10).unwrap();
        let tuned = apply_method(&g, PeftConfig::new(crate::peft::PeftMethod::Lora)).unwrap();
        let step = StepPlan::build(&tuned, TensorShape::new(1, 3, 64, 64)).unwrap();
        let plan = build_plan_for(&tuned, &step, Some(OptimizerRule::Adam));
        let report = profile_step_flops(&step, &plan, CountingConvention::Paper);
        assert_eq!(
            report.fwd_total,
            report.layers.iter().map(|l| l.fwd).sum::<u64>()
        );
        assert_eq!(
            report.grand_total,
            report.fwd_total + report.bwd_input_total + report.bwd_weight_total + report.opt_total
        );
    }

    #[test]
    fn bnh_ratio_below_one() {
        let g = build_model(Arch::MobilenetV2, 10).unwrap();
        let tuned = apply_method(&g, PeftConfig::new(crate::peft::PeftMethod::Bnh)).unwrap();
        let step = StepPlan::build(&tuned, TensorShape::new(1, 3, 64, 64)).unwrap();
        let plan = build_plan_for(&tuned, &step, None);
        let report = profile_step_flops(&step, &plan, CountingConvention::Paper);
        let ratio = flops_ratio(&report).unwrap();
        assert!(
            ratio.as_f64() < 1.0,
            "bnh truncation should leave backward < forward"
        );
    }

    #[test]
    fn activation_counts_one_flop_per_element() {
        let g = build_model(
            Arch::ToyCnn(vec![
                ToyLayer::Conv {
                    out: 4,
                    kernel: 1,
                    stride: 1,
                    groups: 1,
                },
                ToyLayer::Act(Activation::Hardswish),
            ]),
            2,
        )
        .unwrap();
        let shaped = g.infer_shapes(TensorShape::new(1, 3, 8, 8)).unwrap();
        assert_eq!(
            layer_flops(&shaped.nodes[1], Phase::Fwd, CountingConvention::Paper).unwrap(),
            4 * 64
        );
    }
}
