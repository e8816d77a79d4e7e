//! Command-line profiler: predict per-phase FLOPs and per-group peak memory
//! of one PEFT training step on edge CNN architectures, compare methods,
//! sweep ranks, rank configurations against budgets, and verify the analytic
//! models against the instrumented reference engine.

mod runspec;

use clap::{Args, Parser, Subcommand};
use peftprof_core::flops::CountingConvention;
use peftprof_core::memory::DEFAULT_ELEMENT_WIDTH;
use peftprof_core::optim::OptimizerRule;
use peftprof_core::peft::{PeftConfig, PeftMethod};
use peftprof_core::report::OutputFormat;
use peftprof_core::runner::{run_compare, run_plan, run_profile, run_sweep, RunConfig};
use peftprof_core::TensorShape;
use std::io::Write;
use std::process::ExitCode;

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(
    name = "peftprof",
    about = "Training-step FLOPs and peak-memory profiler for PEFT methods on edge CNNs",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Profile one configuration: phase-resolved FLOPs + per-group memory.
    Profile(ProfileArgs),
    /// Compare methods on one architecture with percent deltas vs fft.
    Compare(CompareArgs),
    /// Sweep adapter/projection ranks and fit slopes.
    Sweep(SweepArgs),
    /// Rank feasible configurations under memory and FLOPs budgets.
    Plan(PlanArgs),
    /// Run the oracle suites (analytic models vs the reference engine).
    Verify(VerifyArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Architecture: mobilenet_v2 | mobilenet_v3_large | resnet18
    #[arg(long)]
    arch: Option<String>,
    /// Classifier classes
    #[arg(long, default_value_t = 1000)]
    classes: usize,
    /// Input spatial size as HxW (e.g. 224x224)
    #[arg(long)]
    input: Option<String>,
    /// Output format
    #[arg(long, default_value = "table")]
    format: String,
    /// Input-gradient counting convention
    #[arg(long = "input-grad", default_value = "paper")]
    input_grad: String,
    /// Accounting bytes per element
    #[arg(long = "bytes-per-element", default_value_t = DEFAULT_ELEMENT_WIDTH)]
    bytes_per_element: u64,
    /// Optimizer rule: sgd_momentum | adam (galore always uses galore_adam)
    #[arg(long)]
    optimizer: Option<String>,
    /// Write the report here instead of stdout
    #[arg(long)]
    out: Option<std::path::PathBuf>,
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Run-spec TOML file; command-line flags override its fields
    #[arg(long)]
    spec: Option<std::path::PathBuf>,
    /// Method: lora | dora | galore | bnh | fft
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Also write the shaped layer graph as JSON to this path
    #[arg(long = "dump-graph")]
    dump_graph: Option<std::path::PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated method list (an fft baseline is added when absent)
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "fft,bnh,lora,dora,galore"
    )]
    methods: Vec<String>,
    #[arg(long)]
    rank: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Method: lora | dora | galore
    #[arg(long)]
    method: String,
    /// Ascending rank list
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    ranks: Vec<usize>,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Peak-memory budget in bytes
    #[arg(long = "memory-budget")]
    memory_budget: u64,
    /// Per-step FLOPs budget
    #[arg(long = "flops-budget")]
    flops_budget: u64,
    /// Grid methods
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "fft,bnh,lora,dora,galore"
    )]
    methods: Vec<String>,
    /// Grid ranks for adapter/projection methods
    #[arg(long, value_delimiter = ',', default_value = "4")]
    ranks: Vec<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Verification scale (only `toy` is defined)
    #[arg(long, default_value = "toy")]
    scale: String,
    /// Number of randomized toy graphs per suite
    #[arg(long, default_value_t = 8)]
    graphs: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Keep clap's rendering but pin the usage exit code.
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_VALIDATION)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.command {
        Command::Profile(args) => cmd_profile(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Plan(args) => cmd_plan(args),
        Command::Verify(args) => cmd_verify(args),
    }
}

fn parse_input(s: &str, batch: usize) -> Result<TensorShape, String> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 2 {
        return Err(format!("--input expects HxW, got `{s}`"));
    }
    let h: usize = parts[0]
        .parse()
        .map_err(|_| format!("bad height in `{s}`"))?;
    let w: usize = parts[1]
        .parse()
        .map_err(|_| format!("bad width in `{s}`"))?;
    if h == 0 || w == 0 {
        return Err("input dims must be >= 1".into());
    }
    Ok(TensorShape::new(batch, 3, h, w))
}

fn base_config(common: &CommonArgs, method: PeftMethod) -> Result<RunConfig, String> {
    let arch = common.arch.clone().ok_or("--arch is required")?;
    let mut cfg = RunConfig::new(&arch, method);
    cfg.num_classes = common.classes;
    if let Some(inp) = &common.input {
        cfg.input = parse_input(inp, 1)?;
    }
    cfg.convention = CountingConvention::parse(&common.input_grad)
        .ok_or_else(|| format!("unknown convention `{}`", common.input_grad))?;
    cfg.element_width = common.bytes_per_element;
    if cfg.element_width == 0 {
        return Err("--bytes-per-element must be >= 1".into());
    }
    if let Some(o) = &common.optimizer {
        cfg.rule = Some(OptimizerRule::parse(o).ok_or_else(|| format!("unknown optimizer `{o}`"))?);
    }
    Ok(cfg)
}

fn out_format(common: &CommonArgs) -> Result<OutputFormat, String> {
    OutputFormat::parse(&common.format).ok_or_else(|| format!("unknown format `{}`", common.format))
}

fn emit(common: &CommonArgs, text: String) -> Result<ExitCode, String> {
    match &common.out {
        Some(path) => {
            let mut f = std::fs::File::create(path)
                .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
            f.write_all(text.as_bytes()).map_err(|e| e.to_string())?;
        }
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_profile(args: ProfileArgs) -> Result<ExitCode, String> {
    let mut format = out_format(&args.common)?;
    let mut cfg = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            let parsed = runspec::parse_run_spec(&text).map_err(|e| e.to_string())?;
            if let Some(f) = parsed.format {
                format = f;
            }
            let mut cfg = parsed.run;
            // Flags override the document.
            if let Some(arch) = &args.common.arch {
                cfg.arch = arch.clone();
            }
            if let Some(inp) = &args.common.input {
                cfg.input = parse_input(inp, cfg.input.n)?;
            }
            cfg
        }
        None => {
            let method = args
                .method
                .as_deref()
                .ok_or("--method (or --spec) is required")
                .and_then(|m| PeftMethod::parse(m).ok_or("unknown method"))
                .map_err(|e| e.to_string())?;
            base_config(&args.common, method)?
        }
    };
    if let Some(m) = &args.method {
        let method = PeftMethod::parse(m).ok_or_else(|| format!("unknown method `{m}`"))?;
        if method != cfg.peft.method {
            cfg.peft = PeftConfig { method, ..cfg.peft };
        }
    }
    if let Some(r) = args.rank {
        cfg.peft.rank = r;
    }
    if let Some(a) = args.alpha {
        cfg.peft.alpha = a;
    }
    cfg.peft.validate().map_err(|e| e.to_string())?;
    if let Some(path) = &args.dump_graph {
        let graph = peftprof_core::build_model_by_id(&cfg.arch, cfg.num_classes)
            .map_err(|e| e.to_string())?
            .infer_shapes(cfg.input)
            .map_err(|e| e.to_string())?;
        std::fs::write(path, graph.to_json())
            .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    }
    let report = run_profile(&cfg).map_err(|e| e.to_string())?;
    let text = match format {
        OutputFormat::Json => report.to_json() + "\n",
        OutputFormat::Csv => report.to_csv(),
        OutputFormat::Table => report.to_table(),
    };
    emit(&args.common, text)
}

fn parse_methods(names: &[String]) -> Result<Vec<PeftMethod>, String> {
    names
        .iter()
        .map(|m| PeftMethod::parse(m).ok_or_else(|| format!("unknown method `{m}`")))
        .collect()
}

fn cmd_compare(args: CompareArgs) -> Result<ExitCode, String> {
    let format = out_format(&args.common)?;
    let methods = parse_methods(&args.methods)?;
    let mut cfgs = Vec::new();
    for m in methods {
        let mut cfg = base_config(&args.common, m)?;
        if let Some(r) = args.rank {
            cfg.peft.rank = r;
        }
        cfgs.push(cfg);
    }
    let table = run_compare(&cfgs).map_err(|e| e.to_string())?;
    let text = match format {
        OutputFormat::Json => table.to_json() + "\n",
        OutputFormat::Csv => table.to_csv(),
        OutputFormat::Table => table.to_table(),
    };
    emit(&args.common, text)
}

fn cmd_sweep(args: SweepArgs) -> Result<ExitCode, String> {
    let format = out_format(&args.common)?;
    let method = PeftMethod::parse(&args.method)
        .ok_or_else(|| format!("unknown method `{}`", args.method))?;
    if !args.ranks.windows(2).all(|w| w[0] < w[1]) {
        return Err("--ranks must be strictly ascending".into());
    }
    let cfg = base_config(&args.common, method)?;
    let table = run_sweep(&cfg, &args.ranks).map_err(|e| e.to_string())?;
    let text = match format {
        OutputFormat::Json => table.to_json() + "\n",
        OutputFormat::Csv => table.to_csv(),
        OutputFormat::Table => table.to_table(),
    };
    emit(&args.common, text)
}

fn cmd_plan(args: PlanArgs) -> Result<ExitCode, String> {
    let format = out_format(&args.common)?;
    let methods = parse_methods(&args.methods)?;
    let mut grid = Vec::new();
    for m in methods {
        if matches!(m, PeftMethod::Lora | PeftMethod::Dora | PeftMethod::Galore) {
            for &r in &args.ranks {
                let mut cfg = base_config(&args.common, m)?;
                cfg.peft.rank = r;
                grid.push(cfg);
            }
        } else {
            grid.push(base_config(&args.common, m)?);
        }
    }
    let table =
        run_plan(args.memory_budget, args.flops_budget, &grid).map_err(|e| e.to_string())?;
    let text = match format {
        OutputFormat::Json => table.to_json() + "\n",
        OutputFormat::Csv => table.to_csv(),
        OutputFormat::Table => table.to_table(),
    };
    emit(&args.common, text)
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode, String> {
    if args.scale != "toy" {
        return Err(format!(
            "unknown verify scale `{}` (only `toy`)",
            args.scale
        ));
    }
    let results = peftprof_engine::verify::run_all_suites(args.graphs.max(2), 11);
    let mut failures = 0usize;
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {} - {}", r.name, r.detail);
        if !r.passed {
            failures += 1;
        }
    }
    println!("verify: {} checks, {} failed", results.len(), failures);
    if failures > 0 {
        Ok(ExitCode::from(EXIT_VERIFY))
    } else {
        Ok(ExitCode::SUCCESS)
    }
}
