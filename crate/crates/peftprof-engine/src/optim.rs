//! Optimizer execution: SGD with momentum, Adam, and the gradient low-rank
//! projection variant with its periodic subspace refresh.

use crate::exec::{Executable, GradMap};
use crate::tape::Tape;
use peftprof_core::flops::Phase;
use peftprof_core::memory::MemoryGroup;
use peftprof_core::optim::{OptimizerPlan, OptimizerRule, K_SVD};
use peftprof_core::step::ParamId;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
struct ProjectedState {
    /// (m x r) column-orthonormal projection, refreshed every `period` steps.
    p: Vec<f64>,
    rows: usize,
    cols: usize,
    rank: usize,
    /// Rank-space Adam moments over (rank x cols).
    m: Vec<f64>,
    v: Vec<f64>,
    last_refresh: Option<u64>,
}

#[derive(Debug, Clone)]
enum ParamState {
    Sgd { velocity: Vec<f64> },
    Adam(AdamState),
    Projected(ProjectedState),
}

/// Per-parameter optimizer state for one plan.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub plan: OptimizerPlan,
    pub lr: f64,
    pub momentum: f64,
    pub step_count: u64,
    states: Vec<(ParamId, ParamState)>,
}

impl OptimizerState {
    pub fn new(plan: &OptimizerPlan, lr: f64) -> Self {
        let states = plan
            .entries
            .iter()
            .map(|e| {
                let st = match (plan.rule, e.projected) {
                    (OptimizerRule::SgdMomentum, _) => ParamState::Sgd {
                        velocity: vec![0.0; e.elements as usize],
                    },
                    (_, Some((rows, cols))) => ParamState::Projected(ProjectedState {
                        p: vec![0.0; rows * plan.rank],
                        rows,
                        cols,
                        rank: plan.rank,
                        m: vec![0.0; plan.rank * cols],
                        v: vec![0.0; plan.rank * cols],
                        last_refresh: None,
                    }),
                    _ => ParamState::Adam(AdamState {
                        m: vec![0.0; e.elements as usize],
                        v: vec![0.0; e.elements as usize],
                    }),
                };
                (e.param, st)
            })
            .collect();
        OptimizerState {
            plan: plan.clone(),
            lr,
            momentum: 0.9,
            step_count: 0,
            states,
        }
    }

    /// State elements currently allocated (persistent).
    pub fn state_elements(&self) -> u64 {
        self.states
            .iter()
            .map(|(_, s)| match s {
                ParamState::Sgd { velocity } => velocity.len() as u64,
                ParamState::Adam(a) => (a.m.len() + a.v.len()) as u64,
                ParamState::Projected(p) => (p.p.len() + p.m.len() + p.v.len()) as u64,
            })
            .sum()
    }

    /// Orthonormality error of every projection matrix (post-refresh check).
    pub fn worst_projection_error(&self) -> f64 {
        self.states
            .iter()
            .filter_map(|(_, s)| match s {
                ParamState::Projected(p) if p.last_refresh.is_some() => {
                    Some(crate::svd::orthonormality_error(&p.p, p.rows, p.rank))
                }
                _ => None,
            })
            .fold(0.0, f64::max)
    }

    /// Apply one update step. Projected parameters run in two phases: every
    /// rank-space update and its projected-back full-rank buffer are
    /// materialized first, then applied and freed together.
    pub fn step(&mut self, exec: &mut Executable, grads: &GradMap, tape: &mut Tape) {
        let width = exec.width;
        tape.ledger
            .gauge(MemoryGroup::Opt)
            .alloc(self.state_elements() * width);
        self.step_count += 1;
        let t = self.step_count;
        let bc1 = 1.0 - BETA1.powi(t as i32);
        let bc2 = 1.0 - BETA2.powi(t as i32);
        let scale = self.plan.scale;
        let period = self.plan.period as u64;
        let lr = self.lr;
        let momentum = self.momentum;

        // Phase A: dense rules update in place; projected entries stash
        // their full-rank updates.
        let mut staged: Vec<(ParamId, Vec<f64>)> = Vec::new();
        let mut staged_bytes = 0u64;
        for (param, state) in self.states.iter_mut() {
            let g = grads[*param]
                .as_ref()
                .expect("trainable gradient")
                .data
                .clone();
            let w = &mut exec.params[*param].data;
            match state {
                ParamState::Sgd { velocity } => {
                    for i in 0..w.len() {
                        velocity[i] = momentum * velocity[i] + g[i];
                        w[i] -= lr * velocity[i];
                    }
                    tape.counters.add(Phase::Opt, 4 * w.len() as u64);
                }
                ParamState::Adam(a) => {
                    adam_update(w, &g, &mut a.m, &mut a.v, lr, bc1, bc2, tape);
                }
                ParamState::Projected(p) => {
                    let (rows, cols, rank) = (p.rows, p.cols, p.rank);
                    if (t - 1) % period == 0 {
                        // Refresh the subspace from the current gradient; the
                        // charge models a rank-truncated randomized SVD.
                        p.p = crate::svd::top_left_singular_vectors(&g, rows, cols, rank);
                        p.last_refresh = Some(t);
                    }
                    tape.counters
                        .add(Phase::Opt, K_SVD * rows as u64 * cols as u64 * rank as u64);
                    // R = P^T G (rank x cols).
                    let mut r_buf = vec![0.0; rank * cols];
                    tape.ledger
                        .gauge(MemoryGroup::Opt)
                        .alloc((rank * cols) as u64 * width);
                    staged_bytes += (rank * cols) as u64 * width;
                    for a in 0..rank {
                        for j in 0..cols {
                            let mut acc = 0.0;
                            for i in 0..rows {
                                acc += p.p[i * rank + a] * g[i * cols + j];
                            }
                            r_buf[a * cols + j] = acc;
                        }
                    }
                    tape.counters
                        .add(Phase::Opt, 2 * (rows * rank * cols) as u64);
                    // Rank-space Adam on R.
                    let mut n_buf = vec![0.0; rank * cols];
                    for i in 0..r_buf.len() {
                        p.m[i] = BETA1 * p.m[i] + (1.0 - BETA1) * r_buf[i];
                        p.v[i] = BETA2 * p.v[i] + (1.0 - BETA2) * r_buf[i] * r_buf[i];
                        let mh = p.m[i] / bc1;
                        let vh = p.v[i] / bc2;
                        n_buf[i] = lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                    tape.counters.add(Phase::Opt, 14 * (rank * cols) as u64);
                    // Full-rank update U = P * N, staged until phase B.
                    let mut u_buf = vec![0.0; rows * cols];
                    tape.ledger
                        .gauge(MemoryGroup::Opt)
                        .alloc((rows * cols) as u64 * width);
                    staged_bytes += (rows * cols) as u64 * width;
                    for i in 0..rows {
                        for j in 0..cols {
                            let mut acc = 0.0;
                            for a in 0..rank {
                                acc += p.p[i * rank + a] * n_buf[a * cols + j];
                            }
                            u_buf[i * cols + j] = acc;
                        }
                    }
                    tape.counters
                        .add(Phase::Opt, 2 * (rows * rank * cols) as u64);
                    staged.push((*param, u_buf));
                }
            }
        }
        // Phase B: apply the scaled projected updates, then release the
        // staged buffers in one batch.
        for (param, u_buf) in &staged {
            let w = &mut exec.params[*param].data;
            for i in 0..w.len() {
                w[i] -= scale * u_buf[i];
            }
            tape.counters.add(Phase::Opt, 2 * w.len() as u64);
        }
        drop(staged);
        tape.ledger.gauge(MemoryGroup::Opt).free(staged_bytes);
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update(
    w: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    bc1: f64,
    bc2: f64,
    tape: &mut Tape,
) {
    // Two moment updates (3 + 4), bias corrections (1 + 1), sqrt, epsilon
    // add, divide, and the weight update (2): fourteen ops per element.
    for i in 0..w.len() {
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        w[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
    tape.counters.add(Phase::Opt, 14 * w.len() as u64);
}
