//! Phase-resolved training-cost models for parameter-efficient fine-tuning
//! of convolutional networks.
//!
//! The crate builds shaped layer graphs for the benchmark architectures,
//! applies a PEFT transformation (lora, dora, galore, bnh or full
//! fine-tuning), and predicts per-phase FLOPs and per-group peak memory for
//! one training step. A companion crate (`peftprof-engine`) executes the
//! same step plans with instrumented kernels and serves as the ground-truth
//! oracle for these models.

pub mod arch;
pub mod flops;
pub mod graph;
pub mod memory;
pub mod optim;
pub mod par;
pub mod peft;
pub mod report;
pub mod runner;
pub mod shape;
pub mod step;

pub use arch::{build_model, build_model_by_id, Arch, ToyLayer};
pub use flops::{
    flops_ratio, layer_flops, profile_flops, profile_step_flops, CountingConvention, FlopsReport,
    Phase,
};
pub use graph::{Activation, ConvParams, LayerKind, LayerNode, LinearParams, ModelGraph};
pub use memory::{
    group_bytes, profile_memory, profile_step_memory, saved_activation_set, MemoryGroup,
    MemoryReport,
};
pub use optim::{galore_plan, OptimizerPlan, OptimizerRule};
pub use peft::{apply_method, PeftConfig, PeftMethod, TargetSelector, TunedModel};
pub use report::{ComparisonTable, OutputFormat, PlanTable, ProfileReport, SweepTable};
pub use runner::{run_compare, run_plan, run_profile, run_sweep, RunConfig};
pub use shape::TensorShape;
pub use step::{OpKind, StepOp, StepPlan};
