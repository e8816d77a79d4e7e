//! Run-spec documents: a TOML file that fully describes one profiling run.
//! Unknown keys are rejected; omitted fields take the baseline defaults
//! (rank 4, alpha 4, scale 0.25, period 200, std projection, 1x3x224x224).

use peftprof_core::flops::CountingConvention;
use peftprof_core::memory::DEFAULT_ELEMENT_WIDTH;
use peftprof_core::optim::OptimizerRule;
use peftprof_core::peft::{PeftConfig, PeftMethod, TargetSelector};
use peftprof_core::report::OutputFormat;
use peftprof_core::runner::RunConfig;
use peftprof_core::TensorShape;
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpecDoc {
    pub arch: String,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_hw")]
    pub input_height: usize,
    #[serde(default = "default_hw")]
    pub input_width: usize,
    #[serde(default)]
    pub convention: Option<String>,
    #[serde(default)]
    pub optimizer: Option<String>,
    #[serde(default)]
    pub bytes_per_element: Option<u64>,
    #[serde(default)]
    pub format: Option<String>,
    pub method: MethodDoc,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodDoc {
    pub name: String,
    #[serde(default)]
    pub rank: Option<usize>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub galore_scale: Option<f64>,
    #[serde(default)]
    pub galore_period: Option<usize>,
    #[serde(default)]
    pub galore_projection: Option<String>,
    #[serde(default)]
    pub target_depthwise: Option<bool>,
    #[serde(default)]
    pub target_head: Option<bool>,
}

fn default_classes() -> usize {
    1000
}

fn default_batch() -> usize {
    1
}

fn default_hw() -> usize {
    224
}

#[derive(Debug)]
pub enum SpecError {
    Parse(String),
    Invalid(String),
}

impl std::fmt::Display for SpecError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SpecError::Parse(m) => write!(f, "run spec parse error: {m}"),
            SpecError::Invalid(m) => write!(f, "invalid run spec: {m}"),
        }
    }
}

#[derive(Debug)]
pub struct ParsedSpec {
    pub run: RunConfig,
    pub format: Option<OutputFormat>,
}

/// Parse and fully default a run-spec document.
pub fn parse_run_spec(text: &str) -> Result<ParsedSpec, SpecError> {
    let doc: RunSpecDoc = toml::from_str(text).map_err(|e| SpecError::Parse(e.to_string()))?;
    let method = PeftMethod::parse(&doc.method.name)
        .ok_or_else(|| SpecError::Invalid(format!("unknown method `{}`", doc.method.name)))?;
    let mut peft = PeftConfig::new(method);
    if let Some(r) = doc.method.rank {
        peft.rank = r;
    }
    if let Some(a) = doc.method.alpha {
        peft.alpha = a;
    }
    if let Some(s) = doc.method.galore_scale {
        peft.galore_scale = s;
    }
    if let Some(t) = doc.method.galore_period {
        peft.galore_period = t;
    }
    if let Some(p) = &doc.method.galore_projection {
        if p != "std" {
            return Err(SpecError::Invalid(format!(
                "unknown projection `{p}` (expected `std`)"
            )));
        }
    }
    let mut selector = TargetSelector::default();
    if let Some(d) = doc.method.target_depthwise {
        selector.depthwise = d;
    }
    if let Some(h) = doc.method.target_head {
        selector.head = h;
    }
    peft.target_selector = selector;
    peft.validate()
        .map_err(|e| SpecError::Invalid(e.to_string()))?;

    let convention = match doc.convention.as_deref() {
        None => CountingConvention::Paper,
        Some(c) => CountingConvention::parse(c)
            .ok_or_else(|| SpecError::Invalid(format!("unknown convention `{c}`")))?,
    };
    let rule = match doc.optimizer.as_deref() {
        None => None,
        Some(o) => Some(
            OptimizerRule::parse(o)
                .ok_or_else(|| SpecError::Invalid(format!("unknown optimizer `{o}`")))?,
        ),
    };
    let format = match doc.format.as_deref() {
        None => None,
        Some(f) => Some(
            OutputFormat::parse(f)
                .ok_or_else(|| SpecError::Invalid(format!("unknown format `{f}`")))?,
        ),
    };
    if doc.batch < 1 || doc.input_height < 1 || doc.input_width < 1 {
        return Err(SpecError::Invalid("input dims must be >= 1".into()));
    }
    Ok(ParsedSpec {
        run: RunConfig {
            arch: doc.arch,
            num_classes: doc.num_classes,
            input: TensorShape::new(doc.batch, 3, doc.input_height, doc.input_width),
            peft,
            rule,
            convention,
            element_width: doc.bytes_per_element.unwrap_or(DEFAULT_ELEMENT_WIDTH),
        },
        format,
    })
}
