//! Toy-scale training: synthetic two-class data and a seeded training loop.

use crate::exec::{EngineError, Executable};
use crate::optim::OptimizerState;
use crate::tape::Tape;
use crate::tensor::Tensor;
use peftprof_core::optim::OptimizerPlan;
use peftprof_core::TensorShape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A separable two-class image set. The classes differ by stripe
/// orientation (rows vs columns), a spatial signature that survives the
/// per-sample normalization batch-norm applies at batch size one.
pub fn synthetic_two_class(
    shape: TensorShape,
    per_class: usize,
    seed: u64,
) -> Vec<(Tensor, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * per_class);
    for class in 0..2 {
        for _ in 0..per_class {
            let mut t = Tensor::zeros(shape);
            for c in 0..shape.c {
                let offset = if class == 0 { 1.0 } else { -1.0 } * (0.5 + 0.5 * c as f64);
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        let phase = if class == 0 { h } else { w };
                        let stripe = if (phase / 2) % 2 == 0 { 2.0 } else { -2.0 };
                        let noise: f64 = rng.gen_range(-0.2..0.2);
                        *t.at_mut(0, c, h, w) = offset + stripe + noise;
                    }
                }
            }
            data.push((t, class));
        }
    }
    data
}

/// Train sample-by-sample for the given epochs; returns the mean loss per
/// epoch. Deterministic for fixed seeds and inputs.
pub fn train_toy(
    exec: &mut Executable,
    data: &[(Tensor, usize)],
    plan: &OptimizerPlan,
    epochs: usize,
    lr: f64,
) -> Result<Vec<f64>, EngineError> {
    assert!(!data.is_empty(), "dataset must be nonempty");
    let mut optimizer = OptimizerState::new(plan, lr);
    let mut curve = Vec::with_capacity(epochs);
    let mut scratch = Tape::default();
    for _ in 0..epochs {
        let mut total = 0.0;
        for (x, label) in data {
            let mut record = exec.forward(x, None)?;
            let (loss, seed) = exec.loss_and_seed(&mut record, &[*label])?;
            let grads = exec.backward(&mut record, seed)?;
            optimizer.step(exec, &grads, &mut scratch);
            total += loss;
        }
        curve.push(total / data.len() as f64);
    }
    Ok(curve)
}
