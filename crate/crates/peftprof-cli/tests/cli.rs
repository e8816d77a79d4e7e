//! End-to-end CLI checks: exit codes, format agreement, run-spec handling.

use std::process::Command;

fn peftprof(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_peftprof"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(args: &[&str]) -> String {
    let out = peftprof(args);
    assert!(
        out.status.success(),
        "{:?}: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn profile_json_roundtrips() {
    let text = stdout(&[
        "profile",
        "--arch",
        "resnet18",
        "--method",
        "lora",
        "--classes",
        "10",
        "--input",
        "64x64",
        "--format",
        "json",
    ]);
    let report = peftprof_core::ProfileReport::from_json(&text).expect("parses back");
    assert_eq!(report.schema_version, peftprof_core::report::SCHEMA_VERSION);
    assert_eq!(report.to_json() + "\n", text);
}

#[test]
fn csv_json_and_table_agree_on_numbers() {
    let args_base = [
        "profile",
        "--arch",
        "mobilenet_v2",
        "--method",
        "bnh",
        "--classes",
        "10",
        "--input",
        "64x64",
    ];
    let json = stdout(&[&args_base[..], &["--format", "json"]].concat());
    let csv = stdout(&[&args_base[..], &["--format", "csv"]].concat());
    let table = stdout(&[&args_base[..], &["--format", "table"]].concat());
    let report = peftprof_core::ProfileReport::from_json(&json).unwrap();
    let find = |key: &str| -> u64 {
        csv.lines()
            .find(|l| l.starts_with(&format!("{key},")))
            .unwrap_or_else(|| panic!("{key} in csv"))
            .split(',')
            .nth(1)
            .unwrap()
            .parse()
            .unwrap()
    };
    assert_eq!(find("flops_total"), report.flops.grand_total);
    assert_eq!(find("mem_total_bytes"), report.memory.total_bytes);
    assert_eq!(find("flops_fwd"), report.flops.fwd_total);
    assert!(table.contains(&report.flops.grand_total.to_string()));
    assert!(table.contains(&report.memory.total_bytes.to_string()));
}

#[test]
fn usage_errors_exit_1() {
    let out = peftprof(&["profile", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn validation_errors_exit_2() {
    let out = peftprof(&["profile", "--arch", "alexnet", "--method", "lora"]);
    assert_eq!(out.status.code(), Some(2));
    let out = peftprof(&[
        "profile", "--arch", "resnet18", "--method", "lora", "--rank", "0",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_spec_file_drives_profile() {
    let dir = std::env::temp_dir().join(format!("peftprof-spec-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let spec = dir.join("run.toml");
    std::fs::write(
        &spec,
        r#"
arch = "resnet18"
num_classes = 10
input_height = 64
input_width = 64
format = "json"

[method]
name = "galore"
"#,
    )
    .unwrap();
    let text = stdout(&["profile", "--spec", spec.to_str().unwrap()]);
    let report = peftprof_core::ProfileReport::from_json(&text).unwrap();
    assert_eq!(report.arch, "resnet18");
    assert_eq!(report.method, peftprof_core::PeftMethod::Galore);
    assert_eq!(report.rank, 4);

    // Unknown keys are rejected with a validation exit.
    std::fs::write(
        &spec,
        "arch = \"resnet18\"\nnope = 1\n[method]\nname = \"fft\"\n",
    )
    .unwrap();
    let out = peftprof(&["profile", "--spec", spec.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn compare_orders_mobilenet_v2_methods_as_published() {
    let text = stdout(&["compare", "--arch", "mobilenet_v2", "--format", "json"]);
    let table: peftprof_core::ComparisonTable = serde_json::from_str(&text).unwrap();
    let total =
        |m: peftprof_core::PeftMethod| table.rows.iter().find(|r| r.method == m).unwrap().mem_total;
    use peftprof_core::PeftMethod::*;
    assert!(total(Bnh) < total(Lora));
    assert!(total(Lora) < total(Galore));
    assert!(total(Galore) < total(Fft));
    assert!(total(Fft) < total(Dora));
}

#[test]
fn sweep_rejects_unsorted_ranks() {
    let out = peftprof(&[
        "sweep",
        "--arch",
        "mobilenet_v2",
        "--method",
        "lora",
        "--ranks",
        "4,2",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn plan_with_tiny_budget_is_empty_but_ok() {
    let text = stdout(&[
        "plan",
        "--arch",
        "resnet18",
        "--classes",
        "10",
        "--input",
        "64x64",
        "--memory-budget",
        "1",
        "--flops-budget",
        "1",
        "--format",
        "json",
    ]);
    let table: peftprof_core::PlanTable = serde_json::from_str(&text).unwrap();
    assert!(table.rows.is_empty());
}

#[test]
fn out_flag_writes_the_report_file() {
    let dir = std::env::temp_dir().join(format!("peftprof-out-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("report.json");
    let _ = stdout(&[
        "profile",
        "--arch",
        "resnet18",
        "--method",
        "fft",
        "--classes",
        "10",
        "--input",
        "64x64",
        "--format",
        "json",
        "--out",
        path.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(peftprof_core::ProfileReport::from_json(&text).is_ok());
    std::fs::remove_dir_all(&dir).ok();
}
