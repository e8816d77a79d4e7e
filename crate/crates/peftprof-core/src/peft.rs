//! PEFT transformations: turn a base graph into a `TunedModel` with adapter
//! structure and trainability flags for one of lora/dora/galore/bnh/fft.

use crate::graph::{LayerKind, ModelGraph, NodeId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeftMethod {
    Lora,
    Dora,
    Galore,
    Bnh,
    Fft,
}

impl PeftMethod {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lora" => Some(Self::Lora),
            "dora" => Some(Self::Dora),
            "galore" => Some(Self::Galore),
            "bnh" => Some(Self::Bnh),
            "fft" => Some(Self::Fft),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Lora => "lora",
            Self::Dora => "dora",
            Self::Galore => "galore",
            Self::Bnh => "bnh",
            Self::Fft => "fft",
        }
    }

    pub fn uses_adapters(&self) -> bool {
        matches!(self, Self::Lora | Self::Dora)
    }

    pub const ALL: [PeftMethod; 5] = [Self::Fft, Self::Bnh, Self::Lora, Self::Dora, Self::Galore];
}

impl std::fmt::Display for PeftMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GaloreProjection {
    Std,
}

/// Which layers receive adapters under lora/dora.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSelector {
    pub convs: bool,
    pub linears: bool,
    pub depthwise: bool,
    pub head: bool,
}

impl Default for TargetSelector {
    fn default() -> Self {
        // Depthwise (grouped) convolutions are excluded: the A/B pair
        // factors the full-fan-in matricization, which a grouped kernel
        // does not expose, and the adapter library the decomposition
        // mirrors rejects grouped convolutions outright.
        Self {
            convs: true,
            linears: true,
            depthwise: false,
            head: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeftConfig {
    pub method: PeftMethod,
    pub rank: usize,
    pub alpha: f64,
    pub galore_scale: f64,
    pub galore_period: usize,
    pub galore_projection: GaloreProjection,
    pub target_selector: TargetSelector,
}

impl PeftConfig {
    pub fn new(method: PeftMethod) -> Self {
        Self {
            method,
            rank: 4,
            alpha: 4.0,
            galore_scale: 0.25,
            galore_period: 200,
            galore_projection: GaloreProjection::Std,
            target_selector: TargetSelector::default(),
        }
    }

    pub fn with_rank(mut self, rank: usize) -> Self {
        self.rank = rank;
        self
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<(), PeftError> {
        if self.rank < 1 {
            return Err(PeftError::InvalidConfig("rank must be >= 1".into()));
        }
        if self.alpha <= 0.0 {
            return Err(PeftError::InvalidConfig("alpha must be > 0".into()));
        }
        if self.galore_period < 1 {
            return Err(PeftError::InvalidConfig(
                "galore period T must be >= 1".into(),
            ));
        }
        if self.galore_scale <= 0.0 {
            return Err(PeftError::InvalidConfig("galore scale must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PeftError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("graph failed validation: {0}")]
    InvalidGraph(String),
    #[error("rank {rank} too large for layer `{layer}` (matricized {m}x{n})")]
    RankTooLarge {
        layer: String,
        rank: usize,
        m: usize,
        n: usize,
    },
    #[error("method {0} attaches no adapters; nothing matched the target selector")]
    NoTargets(PeftMethod),
    #[error("unsupported target kind for {method}: layer `{layer}` is a grouped convolution")]
    UnsupportedTarget { method: PeftMethod, layer: String },
    #[error("merge_adapters requires an adapter method, got {0}")]
    NotAdapterMethod(PeftMethod),
}

/// Adapter attachment for one layer: `A` maps the layer input to `rank`
/// channels, `B` maps `rank` to the layer's outputs, output scaled by
/// `alpha / rank`. DoRA additionally carries a per-output-channel magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterInfo {
    pub rank: usize,
    pub scaling: f64,
    /// Matricized base-weight dims `(C_out, fan_in)`.
    pub m: usize,
    pub n: usize,
}

impl AdapterInfo {
    pub fn a_elements(&self) -> u64 {
        self.rank as u64 * self.n as u64
    }

    pub fn b_elements(&self) -> u64 {
        self.m as u64 * self.rank as u64
    }

    /// DoRA magnitude vector length (one entry per output channel).
    pub fn magnitude_elements(&self) -> u64 {
        self.m as u64
    }
}

/// A base graph plus one PEFT method's adapter structure and trainable set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedModel {
    pub graph: ModelGraph,
    pub method: PeftMethod,
    pub config: PeftConfig,
    pub adapters: BTreeMap<NodeId, AdapterInfo>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub total: u64,
    pub trainable: u64,
    pub fraction: f64,
}

pub fn apply_method(graph: &ModelGraph, config: PeftConfig) -> Result<TunedModel, PeftError> {
    config.validate()?;
    let diags = graph.validate();
    if !diags.is_empty() {
        return Err(PeftError::InvalidGraph(diags[0].message.clone()));
    }
    let mut adapters = BTreeMap::new();
    if config.method.uses_adapters() {
        for node in &graph.nodes {
            let sel = config.target_selector;
            let matricized = match &node.kind {
                LayerKind::Conv2d(c) if sel.convs => {
                    if c.groups > 1 && !sel.depthwise {
                        None
                    } else if c.groups > 1 && config.method == PeftMethod::Dora {
                        // The magnitude/direction split needs the base weight
                        // in the same matricization the adapters factor.
                        return Err(PeftError::UnsupportedTarget {
                            method: config.method,
                            layer: node.name.clone(),
                        });
                    } else {
                        // Adapter A sees the full input: fan-in C_in * k * k.
                        Some((c.out_channels, c.in_channels * c.kernel * c.kernel))
                    }
                }
                LayerKind::Linear(l) if sel.linears => {
                    if !sel.head && graph.head_ids.contains(&node.id) {
                        None
                    } else {
                        Some(l.matricized())
                    }
                }
                _ => None,
            };
            if let Some((m, n)) = matricized {
                // The rank bound applies to the matricization the adapters
                // actually factor: full fan-in for the lora conv pair,
                // the base weight's own (grouped) shape for dora.
                if config.rank > m.min(n) {
                    return Err(PeftError::RankTooLarge {
                        layer: node.name.clone(),
                        rank: config.rank,
                        m,
                        n,
                    });
                }
                adapters.insert(
                    node.id,
                    AdapterInfo {
                        rank: config.rank,
                        scaling: config.scaling(),
                        m,
                        n,
                    },
                );
            }
        }
        if adapters.is_empty() {
            return Err(PeftError::NoTargets(config.method));
        }
    }
    Ok(TunedModel {
        graph: graph.clone(),
        method: config.method,
        config,
        adapters,
    })
}

impl TunedModel {
    /// Parameter elements added by adapters (A + B, plus DoRA magnitudes).
    pub fn adapter_param_elements(&self) -> u64 {
        self.adapters
            .values()
            .map(|a| {
                a.a_elements()
                    + a.b_elements()
                    + if self.method == PeftMethod::Dora {
                        a.magnitude_elements()
                    } else {
                        0
                    }
            })
            .sum()
    }

    pub fn trainable_summary(&self, input: crate::shape::TensorShape) -> ParamSummary {
        let plan = crate::step::StepPlan::build(self, input).expect("tuned model plans");
        let total: u64 = plan.params.iter().map(|p| p.elements).sum();
        let trainable: u64 = plan
            .params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.elements)
            .sum();
        ParamSummary {
            total,
            trainable,
            fraction: trainable as f64 / total as f64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_model, Arch};
    use crate::shape::TensorShape;

    #[test]
    fn lora_adapter_counts_on_linear() {
        let g = build_model(Arch::MobilenetV2, 1000).unwrap();
        let tuned = apply_method(&g, PeftConfig::new(PeftMethod::Lora)).unwrap();
        let head = *g.head_ids.first().unwrap();
        let a = tuned.adapters[&head];
        // linear 1280 -> 1000, r=4: A 4*1280, B 4*1000.
        assert_eq!(a.a_elements(), 4 * 1280);
        assert_eq!(a.b_elements(), 4 * 1000);
        assert_eq!(a.a_elements() + a.b_elements(), 9_120);
    }

    #[test]
    fn dora_adds_magnitude_entries() {
        let g = build_model(Arch::MobilenetV2, 1000).unwrap();
        let lora = apply_method(&g, PeftConfig::new(PeftMethod::Lora)).unwrap();
        let dora = apply_method(&g, PeftConfig::new(PeftMethod::Dora)).unwrap();
        let head = *g.head_ids.first().unwrap();
        // Same linear decomposition plus one magnitude per output column:
        // 9,120 + 1,000 = 10,120.
        let l = lora.adapters[&head];
        let d = dora.adapters[&head];
        assert_eq!(l.a_elements() + l.b_elements(), 9_120);
        assert_eq!(
            d.a_elements() + d.b_elements() + d.magnitude_elements(),
            10_120
        );
    }

    #[test]
    fn conv_adapter_parameter_arithmetic() {
        // conv 3x3, 32 -> 64, r=4: A = 4*32*9 = 1152, B = 4*64 = 256.
        let g = build_model(
            Arch::ToyCnn(vec![
                crate::arch::ToyLayer::Conv {
                    out: 32,
                    kernel: 3,
                    stride: 1,
                    groups: 1,
                },
                crate::arch::ToyLayer::Conv {
                    out: 64,
                    kernel: 3,
                    stride: 1,
                    groups: 1,
                },
                crate::arch::ToyLayer::Head { classes: 8 },
            ]),
            8,
        )
        .unwrap();
        let tuned = apply_method(&g, PeftConfig::new(PeftMethod::Lora)).unwrap();
        let a = tuned.adapters[&1];
        assert_eq!(a.a_elements(), 1152);
        assert_eq!(a.b_elements(), 256);
        assert_eq!(a.a_elements() + a.b_elements(), 1408);
    }

    #[test]
    fn rank_too_large_names_the_layer() {
        let g = build_model(
            Arch::ToyCnn(vec![
                crate::arch::ToyLayer::Conv {
                    out: 8,
                    kernel: 3,
                    stride: 1,
                    groups: 1,
                },
                crate::arch::ToyLayer::Head { classes: 2 },
            ]),
            2,
        )
        .unwrap();
        // Head linear is 8 -> 2; matricized min dim 2 < rank 4.
        let err = apply_method(&g, PeftConfig::new(PeftMethod::Lora)).unwrap_err();
        match err {
            PeftError::RankTooLarge { layer, .. } => assert!(layer.contains("head")),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn fft_fraction_is_one() {
        let g = build_model(Arch::Resnet18, 10).unwrap();
        let tuned = apply_method(&g, PeftConfig::new(PeftMethod::Fft)).unwrap();
        let s = tuned.trainable_summary(TensorShape::new(1, 3, 32, 32));
        assert_eq!(s.total, s.trainable);
        assert!((s.fraction - 1.0).abs() < 1e-12);
    }

    #[test]
    fn apply_method_leaves_base_graph_unchanged() {
        let g = build_model(Arch::MobilenetV2, 1000).unwrap();
        let before = g.clone();
        let _ = apply_method(&g, PeftConfig::new(PeftMethod::Dora)).unwrap();
        assert_eq!(g, before);
    }

    #[test]
    fn rank_zero_rejected() {
        let g = build_model(Arch::Resnet18, 10).unwrap();
        let cfg = PeftConfig::new(PeftMethod::Lora).with_rank(0);
        assert!(apply_method(&g, cfg).is_err());
    }
}
