//! Instrumented kernels. Every kernel charges its scalar work to the tape
//! from inside its own loops; these counts are what the analytic model is
//! verified against, so they must not be derived from it.

use crate::exec::{BnBuffers, BnMode};
use crate::tape::Tape;
use crate::tensor::Tensor;
use peftprof_core::flops::Phase;
use peftprof_core::graph::{Activation, ConvParams, LinearParams};
use peftprof_core::TensorShape;

pub fn conv_fwd(
    x: &Tensor,
    w: &[f64],
    bias: Option<&[f64]>,
    p: &ConvParams,
    out_shape: TensorShape,
    tape: &mut Tape,
) -> Tensor {
    let mut y = Tensor::zeros(out_shape);
    let fan = p.in_channels / p.groups;
    let cpg_out = p.out_channels / p.groups;
    let mut macs: u64 = 0;
    for n in 0..out_shape.n {
        for co in 0..p.out_channels {
            let g = co / cpg_out;
            for ho in 0..out_shape.h {
                for wo in 0..out_shape.w {
                    let mut acc = 0.0;
                    for ci_local in 0..fan {
                        let ci = g * fan + ci_local;
                        for kh in 0..p.kernel {
                            for kw in 0..p.kernel {
                                let hi = ho * p.stride + kh;
                                let wi = wo * p.stride + kw;
                                if hi < p.padding || wi < p.padding {
                                    continue;
                                }
                                let (hi, wi) = (hi - p.padding, wi - p.padding);
                                if hi >= x.shape.h || wi >= x.shape.w {
                                    continue;
                                }
                                let widx = ((co * fan + ci_local) * p.kernel + kh) * p.kernel + kw;
                                acc += x.at(n, ci, hi, wi) * w[widx];
                            }
                        }
                    }
                    macs += (fan * p.kernel * p.kernel) as u64;
                    let mut v = acc;
                    if let Some(b) = bias {
                        v += b[co];
                    }
                    *y.at_mut(n, co, ho, wo) = v;
                }
            }
        }
    }
    tape.counters.add(Phase::Fwd, 2 * macs);
    if bias.is_some() {
        tape.counters.add(Phase::Fwd, out_shape.elements());
    }
    y
}

/// Conv backward. Computes the requested gradients, charging the weight-side
/// and input-side products separately. The input gradient runs through a
/// column buffer; when `ungrouped_dx` is set (paper convention, directly
/// trained weights) the columns span the full fan-in, with zeros standing in
/// for the cross-group taps the fused kernel multiplies anyway.
#[allow(clippy::too_many_arguments)]
pub fn conv_bwd(
    x: &Tensor,
    w: &[f64],
    dy: &Tensor,
    p: &ConvParams,
    want_dw: bool,
    want_dx: bool,
    ungrouped_dx: bool,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
    tape: &mut Tape,
) -> Option<Tensor> {
    let fan = p.in_channels / p.groups;
    let cpg_out = p.out_channels / p.groups;
    let k2 = (p.kernel * p.kernel) as u64;
    let dx_fan = if ungrouped_dx { p.in_channels } else { fan };

    if want_dw {
        let dw = dw.expect("dw buffer");
        let mut macs: u64 = 0;
        for n in 0..dy.shape.n {
            for co in 0..p.out_channels {
                let g = co / cpg_out;
                for ci_local in 0..fan {
                    let ci = g * fan + ci_local;
                    for kh in 0..p.kernel {
                        for kw in 0..p.kernel {
                            let mut acc = 0.0;
                            for ho in 0..dy.shape.h {
                                for wo in 0..dy.shape.w {
                                    let hi = ho * p.stride + kh;
                                    let wi = wo * p.stride + kw;
                                    if hi < p.padding || wi < p.padding {
                                        continue;
                                    }
                                    let (hi, wi) = (hi - p.padding, wi - p.padding);
                                    if hi >= x.shape.h || wi >= x.shape.w {
                                        continue;
                                    }
                                    acc += dy.at(n, co, ho, wo) * x.at(n, ci, hi, wi);
                                }
                            }
                            macs += (dy.shape.h * dy.shape.w) as u64;
                            let widx = ((co * fan + ci_local) * p.kernel + kh) * p.kernel + kw;
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
        tape.counters.add(Phase::BwdWeight, 2 * macs);
        if let Some(db) = db {
            for n in 0..dy.shape.n {
                for co in 0..p.out_channels {
                    for ho in 0..dy.shape.h {
                        for wo in 0..dy.shape.w {
                            db[co] += dy.at(n, co, ho, wo);
                        }
                    }
                }
            }
            tape.counters.add(Phase::BwdWeight, dy.shape.elements());
        }
    }

    let dx = if want_dx {
        let mut dx = Tensor::zeros(x.shape);
        let mut macs: u64 = 0;
        for n in 0..dy.shape.n {
            for co in 0..p.out_channels {
                let g = co / cpg_out;
                for ho in 0..dy.shape.h {
                    for wo in 0..dy.shape.w {
                        let grad = dy.at(n, co, ho, wo);
                        for ci_idx in 0..dx_fan {
                            // Under the ungrouped convention the column index
                            // runs over every input channel; out-of-group
                            // channels multiply an implicit zero weight.
                            let (ci, weight_of) = if ungrouped_dx {
                                let ci = ci_idx;
                                let local = ci as isize - (g * fan) as isize;
                                let w_val = if local >= 0 && (local as usize) < fan {
                                    Some(local as usize)
                                } else {
                                    None
                                };
                                (ci, w_val)
                            } else {
                                (g * fan + ci_idx, Some(ci_idx))
                            };
                            for kh in 0..p.kernel {
                                for kw in 0..p.kernel {
                                    let hi = ho * p.stride + kh;
                                    let wi = wo * p.stride + kw;
                                    if hi < p.padding || wi < p.padding {
                                        continue;
                                    }
                                    let (hi, wi) = (hi - p.padding, wi - p.padding);
                                    if hi >= x.shape.h || wi >= x.shape.w {
                                        continue;
                                    }
                                    let w_val = match weight_of {
                                        Some(local) => {
                                            w[((co * fan + local) * p.kernel + kh) * p.kernel + kw]
                                        }
                                        None => 0.0,
                                    };
                                    *dx.at_mut(n, ci, hi, wi) += grad * w_val;
                                }
                            }
                        }
                        macs += dx_fan as u64 * k2;
                    }
                }
            }
        }
        tape.counters.add(Phase::BwdInput, 2 * macs);
        Some(dx)
    } else {
        None
    };
    dx
}

pub fn linear_fwd(
    x: &Tensor,
    w: &[f64],
    bias: Option<&[f64]>,
    p: &LinearParams,
    tape: &mut Tape,
) -> Tensor {
    let n = x.shape.n;
    let mut y = Tensor::zeros(TensorShape::features(n, p.out_features));
    for b in 0..n {
        for o in 0..p.out_features {
            let mut acc = 0.0;
            for i in 0..p.in_features {
                acc += x.data[b * p.in_features + i] * w[o * p.in_features + i];
            }
            if let Some(bv) = bias {
                acc += bv[o];
            }
            y.data[b * p.out_features + o] = acc;
        }
    }
    tape.counters.add(
        Phase::Fwd,
        2 * n as u64 * p.in_features as u64 * p.out_features as u64,
    );
    if bias.is_some() {
        tape.counters
            .add(Phase::Fwd, n as u64 * p.out_features as u64);
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn linear_bwd(
    x: &Tensor,
    w: &[f64],
    dy: &Tensor,
    p: &LinearParams,
    want_dw: bool,
    want_dx: bool,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
    tape: &mut Tape,
) -> Option<Tensor> {
    let n = x.shape.n;
    if want_dw {
        let dwb = dw.expect("dw buffer");
        for b in 0..n {
            for o in 0..p.out_features {
                let g = dy.data[b * p.out_features + o];
                for i in 0..p.in_features {
                    dwb[o * p.in_features + i] += g * x.data[b * p.in_features + i];
                }
            }
        }
        tape.counters.add(
            Phase::BwdWeight,
            2 * n as u64 * p.in_features as u64 * p.out_features as u64,
        );
        if let Some(db) = db {
            for b in 0..n {
                for o in 0..p.out_features {
                    db[o] += dy.data[b * p.out_features + o];
                }
            }
            tape.counters
                .add(Phase::BwdWeight, n as u64 * p.out_features as u64);
        }
    }
    if want_dx {
        let mut dx = Tensor::zeros(x.shape);
        for b in 0..n {
            for o in 0..p.out_features {
                let g = dy.data[b * p.out_features + o];
                for i in 0..p.in_features {
                    dx.data[b * p.in_features + i] += g * w[o * p.in_features + i];
                }
            }
        }
        tape.counters.add(
            Phase::BwdInput,
            2 * n as u64 * p.in_features as u64 * p.out_features as u64,
        );
        Some(dx)
    } else {
        None
    }
}

/// BN forward. Returns the output and the (mean, inv_std) statistics used.
#[allow(clippy::too_many_arguments)]
pub fn bn_fwd(
    x: &mut Tensor,
    gamma: &[f64],
    beta: &[f64],
    running: &mut BnBuffers,
    channels: usize,
    mode: BnMode,
    eps: f64,
    momentum: f64,
    in_place: bool,
    tape: &mut Tape,
) -> (Tensor, (Vec<f64>, Vec<f64>)) {
    let shape = x.shape;
    let per_c = (shape.n * shape.h * shape.w) as f64;
    let mut mean = vec![0.0; channels];
    let mut inv = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    match mode {
        BnMode::Train => {
            for c in 0..channels {
                let mut sum = 0.0;
                for n in 0..shape.n {
                    for h in 0..shape.h {
                        for w in 0..shape.w {
                            sum += x.at(n, c, h, w);
                        }
                    }
                }
                mean[c] = sum / per_c;
                let mut sq = 0.0;
                for n in 0..shape.n {
                    for h in 0..shape.h {
                        for w in 0..shape.w {
                            let d = x.at(n, c, h, w) - mean[c];
                            sq += d * d;
                        }
                    }
                }
                var[c] = sq / per_c;
                inv[c] = 1.0 / (var[c] + eps).sqrt();
                running.mean[c] = running.mean[c] * (1.0 - momentum) + mean[c] * momentum;
                running.var[c] = running.var[c] * (1.0 - momentum) + var[c] * momentum;
            }
            // Per-element: sum pass (1) + variance pass (3) + normalize (2)
            // + affine (2); per-channel tail: two divisions, the inverse
            // std (3) and the running-statistics blend (4).
            tape.counters.add(Phase::Fwd, 4 * shape.elements());
            tape.counters.add(Phase::Fwd, 9 * channels as u64);
        }
        BnMode::Eval => {
            for c in 0..channels {
                mean[c] = running.mean[c];
                inv[c] = 1.0 / (running.var[c] + eps).sqrt();
            }
            tape.counters.add(Phase::Fwd, 3 * channels as u64);
        }
    }
    let mut y = if in_place {
        std::mem::replace(x, Tensor::zeros(TensorShape::new(1, 1, 1, 1)))
    } else {
        Tensor::zeros(shape)
    };
    for n in 0..shape.n {
        for c in 0..channels {
            for h in 0..shape.h {
                for w in 0..shape.w {
                    let v = if in_place {
                        y.at(n, c, h, w)
                    } else {
                        x.at(n, c, h, w)
                    };
                    let xhat = (v - mean[c]) * inv[c];
                    *y.at_mut(n, c, h, w) = gamma[c] * xhat + beta[c];
                }
            }
        }
    }
    tape.counters.add(Phase::Fwd, 4 * shape.elements());
    (y, (mean, inv))
}

/// BN backward from the saved input and batch stats; charges the frozen
/// 9/element + 3/channel convention and fills affine grads when wanted.
#[allow(clippy::too_many_arguments)]
pub fn bn_bwd(
    x: &Tensor,
    dy: &Tensor,
    gamma: &[f64],
    stats: &(Vec<f64>, Vec<f64>),
    want_dx: bool,
    dgamma: Option<&mut [f64]>,
    dbeta: Option<&mut [f64]>,
    tape: &mut Tape,
) -> Option<Tensor> {
    let (mean, inv) = stats;
    let shape = x.shape;
    let channels = gamma.len();
    let per_c = (shape.n * shape.h * shape.w) as f64;
    let mut sum_dy = vec![0.0; channels];
    let mut sum_dy_xhat = vec![0.0; channels];
    for n in 0..shape.n {
        for c in 0..channels {
            for h in 0..shape.h {
                for w in 0..shape.w {
                    let xhat = (x.at(n, c, h, w) - mean[c]) * inv[c];
                    let g = dy.at(n, c, h, w);
                    sum_dy[c] += g;
                    sum_dy_xhat[c] += g * xhat;
                }
            }
        }
    }
    if let Some(dg) = dgamma {
        for c in 0..channels {
            dg[c] += sum_dy_xhat[c];
        }
    }
    if let Some(db) = dbeta {
        for c in 0..channels {
            db[c] += sum_dy[c];
        }
    }
    let dx = if want_dx {
        let mut dx = Tensor::zeros(shape);
        for n in 0..shape.n {
            for c in 0..channels {
                let g1 = gamma[c] * inv[c];
                let a = sum_dy[c] / per_c;
                let b = sum_dy_xhat[c] / per_c;
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        let xhat = (x.at(n, c, h, w) - mean[c]) * inv[c];
                        *dx.at_mut(n, c, h, w) = g1 * (dy.at(n, c, h, w) - a - xhat * b);
                    }
                }
            }
        }
        Some(dx)
    } else {
        None
    };
    // Renormalize (2) + reductions (3) + recentered gradient (4) per
    // element, plus the per-channel scalars.
    tape.counters.add(Phase::BwdInput, 9 * shape.elements());
    tape.counters.add(Phase::BwdInput, 3 * channels as u64);
    dx
}

fn act_value(act: Activation, x: f64) -> f64 {
    match act {
        Activation::Relu => x.max(0.0),
        Activation::Relu6 => x.clamp(0.0, 6.0),
        Activation::Hardswish => x * (x + 3.0).clamp(0.0, 6.0) / 6.0,
        Activation::Hardsigmoid => ((x + 3.0) / 6.0).clamp(0.0, 1.0),
    }
}

fn act_derivative(act: Activation, x: f64) -> f64 {
    match act {
        Activation::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Relu6 => {
            if x > 0.0 && x < 6.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Hardswish => {
            if x <= -3.0 {
                0.0
            } else if x >= 3.0 {
                1.0
            } else {
                (2.0 * x + 3.0) / 6.0
            }
        }
        Activation::Hardsigmoid => {
            if x > -3.0 && x < 3.0 {
                1.0 / 6.0
            } else {
                0.0
            }
        }
    }
}

pub fn act_fwd(x: &mut Tensor, act: Activation, in_place: bool, tape: &mut Tape) -> Tensor {
    tape.counters.add(Phase::Fwd, x.shape.elements());
    if in_place {
        let mut y = std::mem::replace(x, Tensor::zeros(TensorShape::new(1, 1, 1, 1)));
        for v in y.data.iter_mut() {
            *v = act_value(act, *v);
        }
        y
    } else {
        let mut y = Tensor::zeros(x.shape);
        for (o, &v) in y.data.iter_mut().zip(x.data.iter()) {
            *o = act_value(act, v);
        }
        y
    }
}

pub fn act_bwd(x: &Tensor, dy: &Tensor, act: Activation, tape: &mut Tape) -> Tensor {
    let mut dx = Tensor::zeros(x.shape);
    for i in 0..x.data.len() {
        dx.data[i] = dy.data[i] * act_derivative(act, x.data[i]);
    }
    tape.counters.add(Phase::BwdInput, x.shape.elements());
    dx
}

pub fn avgpool_fwd(x: &Tensor, tape: &mut Tape) -> Tensor {
    let shape = x.shape;
    let mut y = Tensor::zeros(TensorShape::new(shape.n, shape.c, 1, 1));
    let hw = (shape.h * shape.w) as f64;
    for n in 0..shape.n {
        for c in 0..shape.c {
            let mut acc = 0.0;
            for h in 0..shape.h {
                for w in 0..shape.w {
                    acc += x.at(n, c, h, w);
                }
            }
            *y.at_mut(n, c, 0, 0) = acc / hw;
        }
    }
    tape.counters
        .add(Phase::Fwd, shape.elements() + y.shape.elements());
    y
}

pub fn avgpool_bwd(in_shape: TensorShape, dy: &Tensor, tape: &mut Tape) -> Tensor {
    let mut dx = Tensor::zeros(in_shape);
    let hw = (in_shape.h * in_shape.w) as f64;
    for n in 0..in_shape.n {
        for c in 0..in_shape.c {
            let g = dy.at(n, c, 0, 0) / hw;
            for h in 0..in_shape.h {
                for w in 0..in_shape.w {
                    *dx.at_mut(n, c, h, w) = g;
                }
            }
        }
    }
    tape.counters.add(Phase::BwdInput, in_shape.elements());
    dx
}

pub fn maxpool_fwd(
    x: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_shape: TensorShape,
) -> Tensor {
    // Comparisons are not multiplies or adds; the pool charges nothing.
    let mut y = Tensor::zeros(out_shape);
    for n in 0..out_shape.n {
        for c in 0..out_shape.c {
            for ho in 0..out_shape.h {
                for wo in 0..out_shape.w {
                    let mut best = f64::NEG_INFINITY;
                    for kh in 0..kernel {
                        for kw in 0..kernel {
                            let hi = ho * stride + kh;
                            let wi = wo * stride + kw;
                            if hi < padding || wi < padding {
                                continue;
                            }
                            let (hi, wi) = (hi - padding, wi - padding);
                            if hi >= x.shape.h || wi >= x.shape.w {
                                continue;
                            }
                            best = best.max(x.at(n, c, hi, wi));
                        }
                    }
                    *y.at_mut(n, c, ho, wo) = best;
                }
            }
        }
    }
    y
}

pub fn maxpool_bwd(
    x: &Tensor,
    dy: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Tensor {
    let mut dx = Tensor::zeros(x.shape);
    for n in 0..dy.shape.n {
        for c in 0..dy.shape.c {
            for ho in 0..dy.shape.h {
                for wo in 0..dy.shape.w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = None;
                    for kh in 0..kernel {
                        for kw in 0..kernel {
                            let hi = ho * stride + kh;
                            let wi = wo * stride + kw;
                            if hi < padding || wi < padding {
                                continue;
                            }
                            let (hi, wi) = (hi - padding, wi - padding);
                            if hi >= x.shape.h || wi >= x.shape.w {
                                continue;
                            }
                            let v = x.at(n, c, hi, wi);
                            if v > best {
                                best = v;
                                best_idx = Some((hi, wi));
                            }
                        }
                    }
                    if let Some((hi, wi)) = best_idx {
                        *dx.at_mut(n, c, hi, wi) += dy.at(n, c, ho, wo);
                    }
                }
            }
        }
    }
    dx
}

pub fn residual_fwd(a: &Tensor, b: &Tensor, tape: &mut Tape) -> Tensor {
    let mut y = Tensor::zeros(a.shape);
    for i in 0..a.data.len() {
        y.data[i] = a.data[i] + b.data[i];
    }
    tape.counters.add(Phase::Fwd, a.shape.elements());
    y
}

pub fn channel_mul_fwd(feat: &Tensor, gate: &Tensor, tape: &mut Tape) -> Tensor {
    let mut y = Tensor::zeros(feat.shape);
    for n in 0..feat.shape.n {
        for c in 0..feat.shape.c {
            let g = gate.at(n, c, 0, 0);
            for h in 0..feat.shape.h {
                for w in 0..feat.shape.w {
                    *y.at_mut(n, c, h, w) = feat.at(n, c, h, w) * g;
                }
            }
        }
    }
    tape.counters.add(Phase::Fwd, feat.shape.elements());
    y
}

pub fn channel_mul_bwd(
    feat: &Tensor,
    gate: &Tensor,
    dy: &Tensor,
    want_dfeat: bool,
    want_dgate: bool,
    tape: &mut Tape,
) -> (Option<Tensor>, Option<Tensor>) {
    let dfeat = if want_dfeat {
        let mut d = Tensor::zeros(feat.shape);
        for n in 0..feat.shape.n {
            for c in 0..feat.shape.c {
                let g = gate.at(n, c, 0, 0);
                for h in 0..feat.shape.h {
                    for w in 0..feat.shape.w {
                        *d.at_mut(n, c, h, w) = dy.at(n, c, h, w) * g;
                    }
                }
            }
        }
        tape.counters.add(Phase::BwdInput, feat.shape.elements());
        Some(d)
    } else {
        None
    };
    let dgate = if want_dgate {
        let mut d = Tensor::zeros(gate.shape);
        for n in 0..feat.shape.n {
            for c in 0..feat.shape.c {
                let mut acc = 0.0;
                for h in 0..feat.shape.h {
                    for w in 0..feat.shape.w {
                        acc += dy.at(n, c, h, w) * feat.at(n, c, h, w);
                    }
                }
                *d.at_mut(n, c, 0, 0) = acc;
            }
        }
        tape.counters
            .add(Phase::BwdInput, 2 * feat.shape.elements());
        Some(d)
    } else {
        None
    };
    (dfeat, dgate)
}

pub fn adapter_merge_fwd(base: &Tensor, branch: &Tensor, scaling: f64, tape: &mut Tape) -> Tensor {
    let mut y = Tensor::zeros(base.shape);
    for i in 0..base.data.len() {
        y.data[i] = base.data[i] + scaling * branch.data[i];
    }
    tape.counters.add(Phase::Fwd, 2 * base.shape.elements());
    y
}

pub fn dora_merge_fwd(
    base: &Tensor,
    lora: &Tensor,
    scale: &[f64],
    scaling: f64,
    tape: &mut Tape,
) -> Tensor {
    let mut y = Tensor::zeros(base.shape);
    for n in 0..base.shape.n {
        for c in 0..base.shape.c {
            let s = scale[c];
            let ss = s * scaling;
            for h in 0..base.shape.h {
                for w in 0..base.shape.w {
                    *y.at_mut(n, c, h, w) = s * base.at(n, c, h, w) + ss * lora.at(n, c, h, w);
                }
            }
        }
    }
    tape.counters.add(Phase::Fwd, 3 * base.shape.elements());
    y
}
