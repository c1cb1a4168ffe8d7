//! Result emission: per-VM CSV, event-trace CSV, and the architecture ×
//! scenario summary matrix. All renderers are pure string builders, so
//! identical inputs produce byte-identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::arch::ArchitectureKind;
use crate::scenario::{ExperimentResult, RunMetrics, ScenarioKind, SweepCell};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub const CSV_HEADER: &str = "vm_index,arrival_s,running_s,deploy_s,node,arch,scenario,run";
pub const TRACE_HEADER: &str = "run,time_s,event_kind,vm_id,node_id,detail";

fn opt_seconds(v: Option<f64>) -> String {
    v.map(|s| format!("{s:.3}")).unwrap_or_default()
}

fn csv_field(raw: &str) -> String {
    if raw.contains([',', '"', '\n']) {
        format!("\"{}\"", raw.replace('"', "\"\""))
    } else {
        raw.to_string()
    }
}

fn push_metric_rows(
    out: &mut String,
    metrics: &RunMetrics,
    arch: ArchitectureKind,
    scenario: ScenarioKind,
    run: &str,
) {
    for i in 0..metrics.arrivals_s.len() {
        let _ = writeln!(
            out,
            "{},{:.3},{},{},{},{},{},{}",
            i + 1,
            metrics.arrivals_s[i],
            opt_seconds(metrics.running_s[i]),
            opt_seconds(metrics.deploy_s[i]),
            metrics.nodes[i].0 + 1,
            arch.label(),
            scenario.label(),
            run,
        );
    }
}

/// Per-VM rows for every run, then the `mean` pseudo-run.
pub fn render_csv(result: &ExperimentResult) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for (idx, run) in result.runs.iter().enumerate() {
        push_metric_rows(
            &mut out,
            &run.metrics,
            result.arch,
            result.scenario.kind,
            &(idx + 1).to_string(),
        );
    }
    if !result.runs.is_empty() {
        push_metric_rows(
            &mut out,
            &result.mean,
            result.arch,
            result.scenario.kind,
            "mean",
        );
    }
    out
}

/// The full event trace of every run, with a leading run column.
pub fn render_trace_csv(result: &ExperimentResult) -> String {
    let mut out = String::new();
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for (idx, run) in result.runs.iter().enumerate() {
        for ev in &run.outcome.trace {
            let _ = writeln!(
                out,
                "{},{:.6},{},{},{},{}",
                idx + 1,
                ev.time_s,
                ev.kind,
                ev.vm.map(|v| v.to_string()).unwrap_or_default(),
                ev.node.map(|n| n.to_string()).unwrap_or_default(),
                csv_field(&ev.detail),
            );
        }
    }
    out
}

/// Aggregate totals in minutes (one decimal), architectures as rows and
/// scenarios as columns. Only the architectures and scenarios present in
/// `cells` appear; cells that never deployed print `-`.
pub fn render_summary(cells: &[SweepCell]) -> String {
    let archs: Vec<ArchitectureKind> = ArchitectureKind::ALL
        .into_iter()
        .filter(|a| cells.iter().any(|c| c.arch == *a))
        .collect();
    let scenarios: Vec<ScenarioKind> = ScenarioKind::ALL
        .into_iter()
        .filter(|s| cells.iter().any(|c| c.scenario == *s))
        .collect();
    let mut out = String::new();
    let _ = write!(out, "{:<8}", "arch");
    for s in &scenarios {
        let _ = write!(out, "{:>9}", s.label());
    }
    out.push('\n');
    for arch in archs {
        let _ = write!(out, "{:<8}", arch.label());
        for scenario in &scenarios {
            let value = cells
                .iter()
                .find(|c| c.arch == arch && c.scenario == *scenario)
                .and_then(|c| c.result.mean.total_s)
                .map(|total| format!("{:.1}", total / 60.0))
                .unwrap_or_else(|| "-".to_string());
            let _ = write!(out, "{value:>9}");
        }
        out.push('\n');
    }
    out
}

pub fn write_text(path: &Path, contents: &str) -> Result<(), ReportError> {
    std::fs::write(path, contents).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::RunSetup;
    use crate::cloud::{Calibration, RunOutcome, VmOutcome, Warmup};
    use crate::domain::ClusterSpec;
    use crate::domain::{
        ImageTemplate, MacPool, NodeId, NodeSpec, OsFamily, SharedStorageSpec, VmId,
    };
    use crate::lifecycle::{StageDurations, StageTable};
    use crate::scenario::{
        compute_metrics, run_experiment, sweep_grid_serial, Scenario, SingleRun,
    };

    fn setup(arch: ArchitectureKind) -> RunSetup {
        RunSetup {
            arch,
            cluster: ClusterSpec {
                nodes: (0..5)
                    .map(|i| NodeSpec {
                        id: format!("esxi{}", i + 1),
                        disk_capacity_mib: 512_000.0,
                        nic_mib_s: 117.0,
                        local_disk_mib_s: 640.0,
                        max_concurrent_receives: 1,
                        ram_mib: 8192.0,
                    })
                    .collect(),
                storage: SharedStorageSpec {
                    disk_rate_mib_s: 22.0,
                    nic_mib_s: 117.0,
                    colocated_with_frontend: false,
                },
                mac_entries: MacPool::default_entries(20),
            },
            templates: vec![ImageTemplate {
                id: "base".into(),
                size_mib: 8192.0,
                os: OsFamily::WindowsXp,
                version: 1,
            }],
            stages: StageTable {
                windows_xp: StageDurations {
                    booting_s: 90.0,
                    mac_lookup_s: 30.0,
                    renaming_s: 30.0,
                    sid_reset_s: Some(300.0),
                    rebooting_s: 120.0,
                },
                linux: StageDurations {
                    booting_s: 90.0,
                    mac_lookup_s: 30.0,
                    renaming_s: 30.0,
                    sid_reset_s: None,
                    rebooting_s: 120.0,
                },
            },
            calibration: Calibration::default(),
            jitter_sigma: 0.0,
            seed: 42,
            warmup: Warmup::Full,
        }
    }

    fn fast_experiment() -> ExperimentResult {
        run_experiment(
            &setup(ArchitectureKind::Arch4DistributedLocalCache),
            &Scenario::new(ScenarioKind::SingleBurst),
            3,
        )
        .unwrap()
    }

    #[test]
    fn ten_vms_and_three_runs_make_forty_data_rows() {
        let csv = render_csv(&fast_experiment());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 1 + 40);
        assert_eq!(lines.iter().filter(|l| l.ends_with(",mean")).count(), 10);
        assert!(lines[1].starts_with("1,0.000,"));
        assert!(lines[1].ends_with(",arch4,sb,1"));
    }

    #[test]
    fn without_jitter_the_mean_rows_repeat_the_run_rows() {
        let csv = render_csv(&fast_experiment());
        let lines: Vec<&str> = csv.lines().collect();
        let strip_run = |line: &str| line.rsplit_once(',').unwrap().0.to_string();
        for i in 0..10 {
            assert_eq!(strip_run(lines[1 + i]), strip_run(lines[31 + i]));
        }
    }

    #[test]
    fn identical_experiments_render_identical_bytes() {
        let a = render_csv(&fast_experiment());
        let b = render_csv(&fast_experiment());
        assert_eq!(a, b);
        let ta = render_trace_csv(&fast_experiment());
        let tb = render_trace_csv(&fast_experiment());
        assert_eq!(ta, tb);
    }

    fn handmade_result(per_vm: Vec<VmOutcome>) -> ExperimentResult {
        let outcome = RunOutcome {
            per_vm,
            trace: Vec::new(),
            final_clock_s: 0.0,
            audit_violations: Vec::new(),
            image_warnings: Vec::new(),
        };
        let metrics = compute_metrics(&outcome);
        ExperimentResult {
            arch: ArchitectureKind::Arch1CentralNoFrontend,
            scenario: Scenario::new(ScenarioKind::SingleBurst),
            base_seed: 42,
            runs: vec![SingleRun {
                seed: 42,
                metrics: metrics.clone(),
                outcome,
            }],
            mean: metrics,
        }
    }

    #[test]
    fn failed_vms_leave_the_time_columns_blank() {
        let result = handmade_result(vec![VmOutcome {
            vm: VmId(0),
            node: NodeId(2),
            arrival_s: 5.0,
            running_s: None,
            failed: true,
            fail_reason: Some("mac lookup failed".into()),
            hostname: None,
            mac: None,
            stage_log: Vec::new(),
        }]);
        let csv = render_csv(&result);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], "1,5.000,,,3,arch1,sb,1");
    }

    #[test]
    fn an_experiment_with_no_runs_renders_header_only() {
        let mut result = handmade_result(Vec::new());
        result.runs.clear();
        assert_eq!(render_csv(&result), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn the_summary_is_a_minutes_matrix() {
        let cells = sweep_grid_serial(
            &setup(ArchitectureKind::Arch1CentralNoFrontend),
            2,
            180.0,
            1,
        )
        .unwrap();
        let summary = render_summary(&cells);
        let lines: Vec<&str> = summary.lines().collect();
        assert_eq!(lines.len(), 5);
        let header: Vec<&str> = lines[0].split_whitespace().collect();
        assert_eq!(header, vec!["arch", "sb", "mb", "si", "mi"]);
        for (i, line) in lines[1..].iter().enumerate() {
            assert!(line.starts_with(&format!("arch{}", i + 1)));
            assert_eq!(line.split_whitespace().count(), 5);
        }
        // Two VMs on the shared array: 2*8192/22 + 580 s = 22.1 min.
        assert!(lines[1].contains("22.1"));
    }

    #[test]
    fn a_single_cell_makes_a_one_by_one_matrix() {
        let cells = vec![SweepCell {
            arch: ArchitectureKind::Arch3DistributedRemoteCopy,
            scenario: ScenarioKind::MultiInterval,
            result: fast_experiment(),
        }];
        let summary = render_summary(&cells);
        let lines: Vec<&str> = summary.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(
            lines[0].split_whitespace().collect::<Vec<_>>(),
            vec!["arch", "mi"]
        );
        assert!(lines[1].starts_with("arch3"));
    }

    #[test]
    fn trace_rows_carry_run_ids_and_microsecond_times() {
        let trace = render_trace_csv(&fast_experiment());
        let lines: Vec<&str> = trace.lines().collect();
        assert_eq!(lines[0], TRACE_HEADER);
        assert!(lines[1].starts_with("1,0.000000,"));
        assert!(lines.iter().any(|l| l.starts_with("2,")));
        assert!(lines.iter().any(|l| l.starts_with("3,")));
        // Six-decimal times on every data row.
        for line in &lines[1..] {
            let time = line.split(',').nth(1).unwrap();
            assert_eq!(time.split('.').nth(1).unwrap().len(), 6, "{line}");
        }
    }

    #[test]
    fn detail_fields_with_commas_are_quoted() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a, b"), "\"a, b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }
}
