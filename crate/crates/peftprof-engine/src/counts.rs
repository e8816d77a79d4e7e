//! One fully instrumented training step: per-phase scalar-op counts and the
//! allocation ledger, the ground truth the analytic models are checked
//! against.

use crate::exec::{EngineError, Executable};
use crate::optim::OptimizerState;
use crate::tape::Tape;
use crate::tensor::Tensor;
use peftprof_core::flops::Phase;
use peftprof_core::memory::MemoryGroup;
use peftprof_core::optim::OptimizerPlan;

#[derive(Debug, Clone, PartialEq)]
pub struct OpCountReport {
    pub fwd: u64,
    pub bwd_input: u64,
    pub bwd_weight: u64,
    pub opt: u64,
    pub loss: f64,
    pub ledger_bytes: [u64; 5],
}

impl OpCountReport {
    pub fn phase(&self, phase: Phase) -> u64 {
        match phase {
            Phase::Fwd => self.fwd,
            Phase::BwdInput => self.bwd_input,
            Phase::BwdWeight => self.bwd_weight,
            Phase::Opt => self.opt,
        }
    }

    pub fn group_bytes(&self, group: MemoryGroup) -> u64 {
        let idx = MemoryGroup::ALL.iter().position(|&g| g == group).unwrap();
        self.ledger_bytes[idx]
    }

    pub fn total_bytes(&self) -> u64 {
        self.ledger_bytes.iter().sum()
    }
}

/// Execute forward + backward + optimizer step on a clone of the executable
/// and report exact counts. `labels` defaults to class 0 for every batch
/// entry when `None`.
pub fn instrumented_counts(
    exec: &Executable,
    plan: &OptimizerPlan,
    input: &Tensor,
    labels: Option<&[usize]>,
) -> Result<OpCountReport, EngineError> {
    let mut exec = exec.clone();
    let default_labels = vec![0usize; input.shape.n];
    let labels = labels.unwrap_or(&default_labels);

    let mut record = exec.forward(input, None)?;
    let (loss, seed) = exec.loss_and_seed(&mut record, labels)?;
    let grads = exec.backward(&mut record, seed)?;
    let mut optimizer = OptimizerState::new(plan, 1e-3);
    let mut tape = std::mem::take(&mut record.tape);
    optimizer.step(&mut exec, &grads, &mut tape);
    Ok(report_from_tape(&tape, loss))
}

pub fn report_from_tape(tape: &Tape, loss: f64) -> OpCountReport {
    OpCountReport {
        fwd: tape.counters.fwd,
        bwd_input: tape.counters.bwd_input,
        bwd_weight: tape.counters.bwd_weight,
        opt: tape.counters.opt,
        loss,
        ledger_bytes: [
            tape.ledger.peak(MemoryGroup::Param),
            tape.ledger.peak(MemoryGroup::Grad),
            tape.ledger.peak(MemoryGroup::Act),
            tape.ledger.peak(MemoryGroup::Opt),
            tape.ledger.peak(MemoryGroup::Temp),
        ],
    }
}
