//! Execution record: instrumented scalar-op counters per phase and the
//! allocation ledger per memory group.

use peftprof_core::flops::Phase;
use peftprof_core::memory::MemoryGroup;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseCounters {
    pub fwd: u64,
    pub bwd_input: u64,
    pub bwd_weight: u64,
    pub opt: u64,
}

impl PhaseCounters {
    pub fn add(&mut self, phase: Phase, ops: u64) {
        match phase {
            Phase::Fwd => self.fwd += ops,
            Phase::BwdInput => self.bwd_input += ops,
            Phase::BwdWeight => self.bwd_weight += ops,
            Phase::Opt => self.opt += ops,
        }
    }

    pub fn get(&self, phase: Phase) -> u64 {
        match phase {
            Phase::Fwd => self.fwd,
            Phase::BwdInput => self.bwd_input,
            Phase::BwdWeight => self.bwd_weight,
            Phase::Opt => self.opt,
        }
    }

    pub fn total(&self) -> u64 {
        self.fwd + self.bwd_input + self.bwd_weight + self.opt
    }
}

/// Live/peak byte tracking for one memory group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GroupGauge {
    pub live: u64,
    pub peak: u64,
}

impl GroupGauge {
    pub fn alloc(&mut self, bytes: u64) {
        self.live += bytes;
        self.peak = self.peak.max(self.live);
    }

    pub fn free(&mut self, bytes: u64) {
        debug_assert!(self.live >= bytes);
        self.live -= bytes;
    }
}

/// Allocation ledger: peak bytes per group over the step timeline.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ledger {
    pub param: GroupGauge,
    pub grad: GroupGauge,
    pub act: GroupGauge,
    pub opt: GroupGauge,
    pub temp: GroupGauge,
}

impl Ledger {
    pub fn gauge(&mut self, group: MemoryGroup) -> &mut GroupGauge {
        match group {
            MemoryGroup::Param => &mut self.param,
            MemoryGroup::Grad => &mut self.grad,
            MemoryGroup::Act => &mut self.act,
            MemoryGroup::Opt => &mut self.opt,
            MemoryGroup::Temp => &mut self.temp,
        }
    }

    pub fn peak(&self, group: MemoryGroup) -> u64 {
        match group {
            MemoryGroup::Param => self.param.peak,
            MemoryGroup::Grad => self.grad.peak,
            MemoryGroup::Act => self.act.peak,
            MemoryGroup::Opt => self.opt.peak,
            MemoryGroup::Temp => self.temp.peak,
        }
    }

    pub fn peak_total(&self) -> u64 {
        MemoryGroup::ALL.iter().map(|&g| self.peak(g)).sum()
    }
}

/// Counters plus ledger for one executed training step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Tape {
    pub counters: PhaseCounters,
    pub ledger: Ledger,
}
