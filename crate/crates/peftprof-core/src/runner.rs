//! High-level run orchestration shared by the CLI and the acceptance suite:
//! profile one configuration, compare methods on one architecture, sweep a
//! rank range, rank feasible configurations under budgets.

use crate::arch::build_model_by_id;
use crate::flops::{flops_ratio, profile_step_flops, CountingConvention, FlopsError};
use crate::memory::{profile_step_memory, DEFAULT_ELEMENT_WIDTH};
use crate::optim::{build_plan_for, OptimizerRule};
use crate::par::par_map;
use crate::peft::{apply_method, PeftConfig, PeftError, PeftMethod};
use crate::report::{
    linear_fit, CompareRow, ComparisonTable, PlanRow, PlanTable, ProfileReport, SweepRow,
    SweepTable, SCHEMA_VERSION,
};
use crate::shape::TensorShape;
use crate::step::StepPlan;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Graph(#[from] crate::graph::GraphError),
    #[error("{0}")]
    Peft(#[from] PeftError),
    #[error("{0}")]
    Flops(#[from] FlopsError),
    #[error("compare requires at least one spec")]
    EmptyCompare,
    #[error("compare requires one architecture, found `{0}` and `{1}`")]
    MixedArch(String, String),
    #[error("sweep requires an adapter or projection method, got {0}")]
    SweepMethod(PeftMethod),
    #[error("budgets must be positive")]
    BadBudget,
}

/// One fully resolved run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arch: String,
    pub num_classes: usize,
    pub input: TensorShape,
    pub peft: PeftConfig,
    pub rule: Option<OptimizerRule>,
    pub convention: CountingConvention,
    pub element_width: u64,
}

impl RunConfig {
    pub fn new(arch: &str, method: PeftMethod) -> Self {
        Self {
            arch: arch.into(),
            num_classes: 1000,
            input: TensorShape::new(1, 3, 224, 224),
            peft: PeftConfig::new(method),
            rule: None,
            convention: CountingConvention::Paper,
            element_width: DEFAULT_ELEMENT_WIDTH,
        }
    }

    pub fn with_rank(mut self, rank: usize) -> Self {
        self.peft = self.peft.with_rank(rank);
        self
    }
}

pub fn run_profile(cfg: &RunConfig) -> Result<ProfileReport, RunError> {
    let graph = build_model_by_id(&cfg.arch, cfg.num_classes)?;
    let tuned = apply_method(&graph, cfg.peft)?;
    let step = StepPlan::build(&tuned, cfg.input)?;
    let plan = build_plan_for(&tuned, &step, cfg.rule);
    let flops = profile_step_flops(&step, &plan, cfg.convention);
    let memory = profile_step_memory(&step, &plan, cfg.element_width);
    let ratio = flops_ratio(&flops)?;
    let params = tuned.trainable_summary(cfg.input);
    Ok(ProfileReport {
        schema_version: SCHEMA_VERSION,
        arch: cfg.arch.clone(),
        method: cfg.peft.method,
        rank: cfg.peft.rank,
        optimizer: plan.rule,
        convention: cfg.convention,
        element_width: cfg.element_width,
        input: cfg.input,
        params,
        backward_forward_ratio: ratio,
        flops,
        memory,
    })
}

/// Profile several methods on one architecture; an fft baseline row is added
/// when absent and every row carries percent deltas against it.
pub fn run_compare(cfgs: &[RunConfig]) -> Result<ComparisonTable, RunError> {
    let first = cfgs.first().ok_or(RunError::EmptyCompare)?;
    for c in cfgs {
        if c.arch != first.arch || c.input != first.input {
            return Err(RunError::MixedArch(first.arch.clone(), c.arch.clone()));
        }
    }
    let mut cfgs: Vec<RunConfig> = cfgs.to_vec();
    if !cfgs.iter().any(|c| c.peft.method == PeftMethod::Fft) {
        let mut fft = first.clone();
        fft.peft = PeftConfig::new(PeftMethod::Fft);
        fft.rule = first.rule;
        cfgs.insert(0, fft);
    }
    let reports = par_map(cfgs, |c| run_profile(&c));
    let reports: Vec<ProfileReport> = reports.into_iter().collect::<Result<_, _>>()?;
    let fft = reports
        .iter()
        .find(|r| r.method == PeftMethod::Fft)
        .expect("fft row present");
    let (fft_flops, fft_mem) = (fft.flops.grand_total, fft.memory.total_bytes);
    let rows = reports
        .iter()
        .map(|r| CompareRow {
            method: r.method,
            rank: r.rank,
            flops_fwd: r.flops.fwd_total,
            flops_bwd: r.flops.backward_total(),
            flops_opt: r.flops.opt_total,
            flops_total: r.flops.grand_total,
            mem_param: r.memory.param_bytes,
            mem_grad: r.memory.grad_bytes,
            mem_act: r.memory.act_bytes,
            mem_opt: r.memory.opt_bytes,
            mem_temp: r.memory.temp_bytes,
            mem_total: r.memory.total_bytes,
            flops_delta_pct: pct_delta(r.flops.grand_total, fft_flops),
            mem_delta_pct: pct_delta(r.memory.total_bytes, fft_mem),
        })
        .collect();
    Ok(ComparisonTable {
        schema_version: SCHEMA_VERSION,
        arch: first.arch.clone(),
        input: first.input,
        convention: first.convention,
        element_width: first.element_width,
        rows,
    })
}

pub fn pct_delta(value: u64, baseline: u64) -> f64 {
    (value as f64 - baseline as f64) / baseline as f64 * 100.0
}

/// FLOPs and memory totals per rank plus least-squares slopes.
pub fn run_sweep(cfg: &RunConfig, ranks: &[usize]) -> Result<SweepTable, RunError> {
    if !matches!(
        cfg.peft.method,
        PeftMethod::Lora | PeftMethod::Dora | PeftMethod::Galore
    ) {
        return Err(RunError::SweepMethod(cfg.peft.method));
    }
    let points: Vec<RunConfig> = ranks.iter().map(|&r| cfg.clone().with_rank(r)).collect();
    let reports = par_map(points, |c| run_profile(&c));
    let reports: Vec<ProfileReport> = reports.into_iter().collect::<Result<_, _>>()?;
    let rows: Vec<SweepRow> = reports
        .iter()
        .map(|r| SweepRow {
            rank: r.rank,
            flops_total: r.flops.grand_total,
            mem_total: r.memory.total_bytes,
        })
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.rank as f64).collect();
    let fy: Vec<f64> = rows.iter().map(|r| r.flops_total as f64).collect();
    let my: Vec<f64> = rows.iter().map(|r| r.mem_total as f64).collect();
    let (flops_slope, _, flops_r2) = linear_fit(&xs, &fy);
    let (mem_slope, _, mem_r2) = linear_fit(&xs, &my);
    Ok(SweepTable {
        schema_version: SCHEMA_VERSION,
        arch: cfg.arch.clone(),
        method: cfg.peft.method,
        input: cfg.input,
        rows,
        flops_slope,
        flops_r2,
        mem_slope,
        mem_r2,
    })
}

/// Filter a grid by both budgets, then rank by FLOPs ascending with memory
/// as the tie-break (memory being the binding constraint gets the filter,
/// FLOPs the ordering).
pub fn run_plan(
    memory_budget_bytes: u64,
    flops_budget: u64,
    grid: &[RunConfig],
) -> Result<PlanTable, RunError> {
    if memory_budget_bytes == 0 || flops_budget == 0 {
        return Err(RunError::BadBudget);
    }
    let reports = par_map(grid.to_vec(), |c| run_profile(&c));
    let reports: Vec<ProfileReport> = reports.into_iter().collect::<Result<_, _>>()?;
    let mut rows: Vec<PlanRow> = reports
        .iter()
        .filter(|r| {
            r.memory.total_bytes <= memory_budget_bytes && r.flops.grand_total <= flops_budget
        })
        .map(|r| PlanRow {
            arch: r.arch.clone(),
            method: r.method,
            rank: r.rank,
            flops_total: r.flops.grand_total,
            mem_total: r.memory.total_bytes,
        })
        .collect();
    rows.sort_by(|a, b| {
        a.flops_total
            .cmp(&b.flops_total)
            .then(a.mem_total.cmp(&b.mem_total))
            .then(a.method.to_string().cmp(&b.method.to_string()))
    });
    Ok(PlanTable {
        schema_version: SCHEMA_VERSION,
        memory_budget_bytes,
        flops_budget,
        rows,
    })
}
