//! Toy-scale training behavior across methods.

use peftprof_core::arch::{build_model, Arch, ToyLayer};
use peftprof_core::graph::Activation;
use peftprof_core::optim::{build_plan_for, OptimizerRule};
use peftprof_core::peft::{apply_method, PeftConfig, PeftMethod};
use peftprof_core::TensorShape;
use peftprof_engine::exec::Executable;
use peftprof_engine::train::{synthetic_two_class, train_toy};

fn task_graph() -> peftprof_core::ModelGraph {
    build_model(
        Arch::ToyCnn(vec![
            ToyLayer::Conv {
                out: 6,
                kernel: 3,
                stride: 1,
                groups: 1,
            },
            ToyLayer::Act(Activation::Relu),
            ToyLayer::Conv {
                out: 6,
                kernel: 3,
                stride: 1,
                groups: 6,
            },
            ToyLayer::Act(Activation::Relu),
            ToyLayer::Head { classes: 2 },
        ]),
        2,
    )
    .unwrap()
}

#[test]
fn every_method_learns_the_separable_task() {
    let input = TensorShape::new(1, 3, 8, 8);
    let data = synthetic_two_class(input, 12, 99);
    for method in PeftMethod::ALL {
        let tuned = apply_method(&task_graph(), PeftConfig::new(method).with_rank(2)).unwrap();
        let mut exec = Executable::new(&tuned, input, 123).unwrap();
        let step = exec.plan.clone();
        let plan = build_plan_for(&tuned, &step, Some(OptimizerRule::Adam));
        let curve = train_toy(&mut exec, &data, &plan, 10, 2e-2).unwrap();
        assert!(
            curve.last().unwrap() < &(0.5 * curve[0]),
            "{method}: loss {:?} did not halve",
            curve
        );
    }
}

#[test]
fn training_is_deterministic() {
    let input = TensorShape::new(1, 3, 8, 8);
    let data = synthetic_two_class(input, 6, 5);
    let run = || {
        let tuned = apply_method(
            &task_graph(),
            PeftConfig::new(PeftMethod::Lora).with_rank(2),
        )
        .unwrap();
        let mut exec = Executable::new(&tuned, input, 7).unwrap();
        let step = exec.plan.clone();
        let plan = build_plan_for(&tuned, &step, Some(OptimizerRule::Adam));
        train_toy(&mut exec, &data, &plan, 3, 5e-3).unwrap()
    };
    assert_eq!(run(), run());
}
