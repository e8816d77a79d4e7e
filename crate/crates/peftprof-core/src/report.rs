//! Report artifacts and their JSON/CSV/table emission.

use crate::flops::{CountingConvention, FlopsReport, Ratio};
use crate::memory::MemoryReport;
use crate::optim::OptimizerRule;
use crate::peft::{ParamSummary, PeftMethod};
use crate::shape::TensorShape;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Json,
    Csv,
    Table,
}

impl OutputFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "json" => Some(Self::Json),
            "csv" => Some(Self::Csv),
            "table" | "human" => Some(Self::Table),
            _ => None,
        }
    }
}

/// Everything `profile` emits for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub schema_version: u32,
    pub arch: String,
    pub method: PeftMethod,
    pub rank: usize,
    pub optimizer: OptimizerRule,
    pub convention: CountingConvention,
    pub element_width: u64,
    pub input: TensorShape,
    pub params: ParamSummary,
    pub backward_forward_ratio: Ratio,
    pub flops: FlopsReport,
    pub memory: MemoryReport,
}

impl ProfileReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("key,value\n");
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push(',');
            out.push_str(&v);
            out.push('\n');
        };
        kv("schema_version", self.schema_version.to_string());
        kv("arch", self.arch.clone());
        kv("method", self.method.to_string());
        kv("rank", self.rank.to_string());
        kv("optimizer", self.optimizer.name().into());
        kv("convention", self.convention.name().into());
        kv("element_width", self.element_width.to_string());
        kv("input", self.input.to_string());
        kv("params_total", self.params.total.to_string());
        kv("params_trainable", self.params.trainable.to_string());
        kv("trainable_fraction", format_f64(self.params.fraction));
        kv("flops_fwd", self.flops.fwd_total.to_string());
        kv("flops_bwd_input", self.flops.bwd_input_total.to_string());
        kv("flops_bwd_weight", self.flops.bwd_weight_total.to_string());
        kv("flops_opt", self.flops.opt_total.to_string());
        kv("flops_total", self.flops.grand_total.to_string());
        kv(
            "backward_forward_ratio",
            format_f64(self.backward_forward_ratio.as_f64()),
        );
        kv("mem_param_bytes", self.memory.param_bytes.to_string());
        kv("mem_grad_bytes", self.memory.grad_bytes.to_string());
        kv("mem_act_bytes", self.memory.act_bytes.to_string());
        kv("mem_opt_bytes", self.memory.opt_bytes.to_string());
        kv("mem_temp_bytes", self.memory.temp_bytes.to_string());
        kv("mem_total_bytes", self.memory.total_bytes.to_string());
        out
    }

    pub fn to_table(&self) -> String {
        let f = &self.flops;
        let m = &self.memory;
        let mut out = String::new();
        out.push_str(&format!(
            "profile  arch={} method={} rank={} optimizer={} convention={} input={}\n",
            self.arch,
            self.method,
            self.rank,
            self.optimizer.name(),
            self.convention.name(),
            self.input
        ));
        out.push_str(&format!(
            "params   total={} trainable={} fraction={:.6}\n",
            self.params.total, self.params.trainable, self.params.fraction
        ));
        out.push_str("phase        FLOPs\n");
        out.push_str(&format!("  fwd        {}\n", f.fwd_total));
        out.push_str(&format!("  bwd_input  {}\n", f.bwd_input_total));
        out.push_str(&format!("  bwd_weight {}\n", f.bwd_weight_total));
        out.push_str(&format!("  opt        {}\n", f.opt_total));
        out.push_str(&format!("  total      {}\n", f.grand_total));
        out.push_str(&format!(
            "  backward/forward = {:.3}\n",
            self.backward_forward_ratio.as_f64()
        ));
        out.push_str("group      peak bytes\n");
        out.push_str(&format!("  PARAM    {}\n", m.param_bytes));
        out.push_str(&format!("  GRAD     {}\n", m.grad_bytes));
        out.push_str(&format!("  ACT      {}\n", m.act_bytes));
        out.push_str(&format!("  OPT      {}\n", m.opt_bytes));
        out.push_str(&format!("  TEMP     {}\n", m.temp_bytes));
        out.push_str(&format!("  total    {}\n", m.total_bytes));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: PeftMethod,
    pub rank: usize,
    pub flops_fwd: u64,
    pub flops_bwd: u64,
    pub flops_opt: u64,
    pub flops_total: u64,
    pub mem_param: u64,
    pub mem_grad: u64,
    pub mem_act: u64,
    pub mem_opt: u64,
    pub mem_temp: u64,
    pub mem_total: u64,
    /// Percent deltas vs the fft row; the fft row itself carries zeros.
    pub flops_delta_pct: f64,
    pub mem_delta_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub schema_version: u32,
    pub arch: String,
    pub input: TensorShape,
    pub convention: CountingConvention,
    pub element_width: u64,
    pub rows: Vec<CompareRow>,
}

impl ComparisonTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(
            "method,rank,flops_fwd,flops_bwd,flops_opt,flops_total,mem_param,mem_grad,mem_act,mem_opt,mem_temp,mem_total,flops_delta_pct,mem_delta_pct\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.method,
                r.rank,
                r.flops_fwd,
                r.flops_bwd,
                r.flops_opt,
                r.flops_total,
                r.mem_param,
                r.mem_grad,
                r.mem_act,
                r.mem_opt,
                r.mem_temp,
                r.mem_total,
                format_f64(r.flops_delta_pct),
                format_f64(r.mem_delta_pct)
            ));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "compare  arch={} input={} convention={}\n",
            self.arch,
            self.input,
            self.convention.name()
        );
        out.push_str("method   rank  flops_total      dFLOPs%   mem_total      dMEM%\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<8} {:<4}  {:<15} {:>7.1}   {:<13} {:>7.1}\n",
                r.method.to_string(),
                r.rank,
                r.flops_total,
                r.flops_delta_pct,
                r.mem_total,
                r.mem_delta_pct
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rank: usize,
    pub flops_total: u64,
    pub mem_total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub schema_version: u32,
    pub arch: String,
    pub method: PeftMethod,
    pub input: TensorShape,
    pub rows: Vec<SweepRow>,
    /// Least-squares fits of the totals against rank.
    pub flops_slope: f64,
    pub flops_r2: f64,
    pub mem_slope: f64,
    pub mem_r2: f64,
}

impl SweepTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,flops_total,mem_total\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.rank, r.flops_total, r.mem_total));
        }
        out.push_str(&format!(
            "slope,{},{}\n",
            format_f64(self.flops_slope),
            format_f64(self.mem_slope)
        ));
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("sweep  arch={} method={}\n", self.arch, self.method);
        out.push_str("rank   flops_total       mem_total\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<6} {:<17} {}\n",
                r.rank, r.flops_total, r.mem_total
            ));
        }
        out.push_str(&format!(
            "fit    flops: slope={:.1} R2={:.6}   memory: slope={:.1} R2={:.6}\n",
            self.flops_slope, self.flops_r2, self.mem_slope, self.mem_r2
        ));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub arch: String,
    pub method: PeftMethod,
    pub rank: usize,
    pub flops_total: u64,
    pub mem_total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanTable {
    pub schema_version: u32,
    pub memory_budget_bytes: u64,
    pub flops_budget: u64,
    /// Feasible grid entries, total FLOPs ascending, memory as tie-break.
    pub rows: Vec<PlanRow>,
}

impl PlanTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("arch,method,rank,flops_total,mem_total\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.arch, r.method, r.rank, r.flops_total, r.mem_total
            ));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "plan  memory_budget={} flops_budget={}\n",
            self.memory_budget_bytes, self.flops_budget
        );
        if self.rows.is_empty() {
            out.push_str("no feasible configuration\n");
            return out;
        }
        out.push_str("arch                method   rank  flops_total       mem_total\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<19} {:<8} {:<5} {:<17} {}\n",
                r.arch,
                r.method.to_string(),
                r.rank,
                r.flops_total,
                r.mem_total
            ));
        }
        out
    }
}

/// Least-squares line fit; returns (slope, intercept, r_squared).
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        (sxy * sxy) / (sxx * syy)
    };
    (slope, intercept, r2)
}

/// Shortest representation that round-trips through f64 (serde_json's rule),
/// so CSV and JSON carry identical numbers.
pub fn format_f64(v: f64) -> String {
    serde_json::to_string(&v).expect("f64 serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_fit_recovers_exact_line() {
        let xs = [1.0, 2.0, 4.0, 8.0, 16.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x + 7.0).collect();
        let (slope, intercept, r2) = linear_fit(&xs, &ys);
        assert!((slope - 3.0).abs() < 1e-9);
        assert!((intercept - 7.0).abs() < 1e-9);
        assert!(r2 > 0.999999);
    }
}
