//! Reference execution engine: forward, reverse-mode gradients and optimizer
//! updates for tuned models at toy scale, with instrumented scalar-op
//! counters and an allocation ledger. Serves as the ground-truth oracle for
//! the analytic FLOPs and memory models in `peftprof-core`.

pub mod backward;
pub mod counts;
pub mod exec;
pub mod merge;
pub mod ops;
pub mod optim;
pub mod svd;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use counts::{instrumented_counts, OpCountReport};
pub use exec::{BnMode, EngineError, Executable, ForwardRecord, GradMap};
pub use merge::merge_adapters;
pub use optim::OptimizerState;
pub use tape::{Ledger, PhaseCounters, Tape};
pub use tensor::Tensor;
pub use train::{synthetic_two_class, train_toy};
