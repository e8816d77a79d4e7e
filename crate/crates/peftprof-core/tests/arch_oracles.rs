//! Architecture oracles: parameter totals recomputed layer by layer from the
//! published stacks, independent of the builders.

use peftprof_core::arch::{build_model, Arch};
use peftprof_core::graph::{LayerKind, ParamFilter};
use peftprof_core::TensorShape;

/// Spreadsheet-style summation over the published ResNet-18 stack.
fn resnet18_param_oracle(classes: u64) -> u64 {
    let conv = |c_out: u64, c_in: u64, k: u64| c_out * c_in * k * k;
    let bn = |c: u64| 2 * c;
    let mut total = 0;
    // stem
    total += conv(64, 3, 7) + bn(64);
    // layer1: two blocks of [conv3x3 64, conv3x3 64]
    total += 2 * (conv(64, 64, 3) + bn(64) + conv(64, 64, 3) + bn(64));
    // layers 2-4: first block carries a 1x1 downsample
    for (c_in, c_out) in [(64u64, 128u64), (128, 256), (256, 512)] {
        total += conv(c_out, c_in, 3) + bn(c_out) + conv(c_out, c_out, 3) + bn(c_out);
        total += conv(c_out, c_in, 1) + bn(c_out); // downsample
        total += conv(c_out, c_out, 3) + bn(c_out) + conv(c_out, c_out, 3) + bn(c_out);
    }
    // classifier
    total += 512 * classes + classes;
    total
}

#[test]
fn resnet18_params_match_the_summation_oracle() {
    for classes in [1000u64, 10] {
        let g = build_model(Arch::Resnet18, classes as usize).unwrap();
        assert_eq!(
            g.param_count(ParamFilter::All, None),
            resnet18_param_oracle(classes)
        );
    }
    assert_eq!(resnet18_param_oracle(1000), 11_689_512);
}

#[test]
fn mobilenet_v2_block_table_trace() {
    // Manual trace of the published inverted-residual table on 1x3x224x224:
    // stage outputs (channels, spatial side).
    let g = build_model(Arch::MobilenetV2, 1000).unwrap();
    let shaped = g.infer_shapes(TensorShape::new(1, 3, 224, 224)).unwrap();
    let expected = [
        (16usize, 112usize),
        (24, 56),
        (32, 28),
        (64, 14),
        (96, 14),
        (160, 7),
        (320, 7),
    ];
    // Stage boundaries are the project convs that change the channel count
    // to each stage's width for the first time.
    let mut found = Vec::new();
    for node in &shaped.nodes {
        if let LayerKind::Conv2d(c) = node.kind {
            if c.kernel == 1 && expected.iter().any(|&(ch, _)| ch == c.out_channels) {
                let out = node.output_shape.unwrap();
                if !found.contains(&(c.out_channels, out.h)) {
                    found.push((c.out_channels, out.h));
                }
            }
        }
    }
    for e in expected {
        assert!(found.contains(&e), "missing stage {e:?} in {found:?}");
    }
    // Pre-classifier feature width is 1280.
    let fc = shaped.nodes.last().unwrap();
    assert_eq!(fc.input_shape.unwrap().c, 1280);
}

#[test]
fn mobilenet_v3_classifier_has_two_linear_layers() {
    let g = build_model(Arch::MobilenetV3Large, 1000).unwrap();
    let linears: Vec<_> = g
        .nodes
        .iter()
        .filter(|n| matches!(n.kind, LayerKind::Linear(_)))
        .collect();
    assert_eq!(linears.len(), 2);
    assert_eq!(g.head_ids.len(), 2);
}

#[test]
fn graph_json_schema_is_stable() {
    // Golden check over the export schema: nodes array with kind tags,
    // params and predecessor lists.
    let g = build_model(
        Arch::ToyCnn(vec![
            peftprof_core::ToyLayer::Conv {
                out: 4,
                kernel: 3,
                stride: 1,
                groups: 1,
            },
            peftprof_core::ToyLayer::Bn,
            peftprof_core::ToyLayer::Head { classes: 2 },
        ]),
        2,
    )
    .unwrap()
    .infer_shapes(TensorShape::new(1, 3, 8, 8))
    .unwrap();
    let json = g.to_json();
    let value: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(value["arch"], "toy_cnn");
    let nodes = value["nodes"].as_array().unwrap();
    assert_eq!(nodes.len(), 5);
    assert_eq!(nodes[0]["kind"]["kind"], "conv2d");
    assert_eq!(nodes[0]["kind"]["out_channels"], 4);
    assert_eq!(nodes[1]["kind"]["kind"], "batchnorm2d");
    assert_eq!(nodes[1]["inputs"][0], 0);
    assert_eq!(nodes[0]["output_shape"]["h"], 8);
    assert_eq!(value["head_ids"][0], 4);
    let back = peftprof_core::ModelGraph::from_json(&json).unwrap();
    assert_eq!(back, g);
}
