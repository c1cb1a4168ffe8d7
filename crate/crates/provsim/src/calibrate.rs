//! Calibration: grid search over the tunable rate parameters, scored by
//! squared relative error of aggregate totals against measured targets.
//!
//! Targets come from a small CSV (`arch,scenario,target_minutes`, header
//! optional, `#` comments allowed). The search is exhaustive over a
//! candidate grid and deterministic: ties keep the earliest candidate in
//! grid order, and parallel evaluation (feature `parallel`) yields the
//! same winner as serial.

use std::str::FromStr;

use thiserror::Error;

use crate::arch::ArchitectureKind;
use crate::cloud::{Calibration, RunSetup};
use crate::scenario::{maybe_par_map, run_experiment, Scenario, ScenarioError, ScenarioKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationTarget {
    pub arch: ArchitectureKind,
    pub scenario: ScenarioKind,
    pub target_minutes: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum CalibrateError {
    #[error("targets line {line}: {message}")]
    BadTargets { line: usize, message: String },
    #[error("no calibration targets given")]
    NoTargets,
    #[error("every candidate failed to produce a deployment total")]
    NoViableCandidate,
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

/// Parses `arch,scenario,target_minutes` lines. A leading header row,
/// blank lines and `#` comments are skipped.
pub fn parse_targets(contents: &str) -> Result<Vec<CalibrationTarget>, CalibrateError> {
    let mut targets = Vec::new();
    for (idx, raw) in contents.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if idx == 0 && line.eq_ignore_ascii_case("arch,scenario,target_minutes") {
            continue;
        }
        let bad = |message: String| CalibrateError::BadTargets {
            line: idx + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(bad(format!("expected 3 fields, got {}", fields.len())));
        }
        let arch = ArchitectureKind::from_str(fields[0]).map_err(|e| bad(e.to_string()))?;
        let scenario = ScenarioKind::from_str(fields[1]).map_err(|e| bad(e.to_string()))?;
        let target_minutes: f64 = fields[2]
            .parse()
            .map_err(|_| bad(format!("bad minutes value {:?}", fields[2])))?;
        if !target_minutes.is_finite() || target_minutes <= 0.0 {
            return Err(bad(format!(
                "target minutes must be positive and finite, got {target_minutes}"
            )));
        }
        targets.push(CalibrationTarget {
            arch,
            scenario,
            target_minutes,
        });
    }
    if targets.is_empty() {
        return Err(CalibrateError::NoTargets);
    }
    Ok(targets)
}

/// The candidate values tried for each calibration parameter; the search
/// visits their cartesian product.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGrid {
    pub ssh_stream_rate_mib_s: Vec<f64>,
    pub frontend_transfer_rate_mib_s: Vec<f64>,
    pub register_s: Vec<f64>,
    pub colocation_factor: Vec<f64>,
}

impl Default for CandidateGrid {
    fn default() -> CandidateGrid {
        CandidateGrid {
            ssh_stream_rate_mib_s: vec![5.0, 6.0, 7.0, 8.0, 9.0],
            frontend_transfer_rate_mib_s: vec![14.0, 16.0, 18.0, 20.0, 22.0],
            register_s: vec![5.0, 10.0, 15.0],
            colocation_factor: vec![0.88, 0.90, 0.92, 0.94, 0.96],
        }
    }
}

impl CandidateGrid {
    pub fn candidates(&self) -> Vec<Calibration> {
        let mut out = Vec::new();
        for &ssh in &self.ssh_stream_rate_mib_s {
            for &frontend in &self.frontend_transfer_rate_mib_s {
                for &register in &self.register_s {
                    for &colocation in &self.colocation_factor {
                        out.push(Calibration {
                            ssh_stream_rate_mib_s: ssh,
                            frontend_transfer_rate_mib_s: frontend,
                            register_s: register,
                            colocation_factor: colocation,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOutcome {
    pub best: Calibration,
    /// Sum over targets of ((achieved − target) / target)².
    pub score: f64,
    pub evaluated: usize,
    /// Achieved totals (minutes) under `best`, one per target.
    pub achieved_minutes: Vec<f64>,
}

fn achieved_total_minutes(
    base: &RunSetup,
    candidate: Calibration,
    target: &CalibrationTarget,
    n_vms: usize,
    interval_s: f64,
    runs: usize,
) -> Option<f64> {
    let mut setup = base.clone();
    setup.arch = target.arch;
    setup.calibration = candidate;
    let scenario = Scenario {
        kind: target.scenario,
        n_vms,
        interval_s,
    };
    run_experiment(&setup, &scenario, runs)
        .ok()
        .and_then(|r| r.mean.total_s)
        .map(|total| total / 60.0)
}

fn score_candidate(
    base: &RunSetup,
    candidate: Calibration,
    targets: &[CalibrationTarget],
    n_vms: usize,
    interval_s: f64,
    runs: usize,
) -> f64 {
    let mut score = 0.0;
    for target in targets {
        match achieved_total_minutes(base, candidate, target, n_vms, interval_s, runs) {
            Some(minutes) => {
                let rel = (minutes - target.target_minutes) / target.target_minutes;
                score += rel * rel;
            }
            None => return f64::INFINITY,
        }
    }
    score
}

/// Exhaustive search over `grid`, minimizing the squared relative error
/// of aggregate deployment totals against `targets`.
pub fn calibrate(
    base: &RunSetup,
    targets: &[CalibrationTarget],
    grid: &CandidateGrid,
    n_vms: usize,
    interval_s: f64,
    runs: usize,
) -> Result<CalibrationOutcome, CalibrateError> {
    if targets.is_empty() {
        return Err(CalibrateError::NoTargets);
    }
    let candidates = grid.candidates();
    let scores = maybe_par_map(candidates.clone(), |candidate| {
        score_candidate(base, candidate, targets, n_vms, interval_s, runs)
    });
    let mut best: Option<(usize, f64)> = None;
    for (idx, &score) in scores.iter().enumerate() {
        if !score.is_finite() {
            continue;
        }
        if best.map_or(true, |(_, s)| score < s) {
            best = Some((idx, score));
        }
    }
    let (idx, score) = best.ok_or(CalibrateError::NoViableCandidate)?;
    let winner = candidates[idx];
    let achieved_minutes = targets
        .iter()
        .map(|t| {
            achieved_total_minutes(base, winner, t, n_vms, interval_s, runs)
                .expect("winning candidate already produced totals")
        })
        .collect();
    Ok(CalibrationOutcome {
        best: winner,
        score,
        evaluated: candidates.len(),
        achieved_minutes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Warmup;
    use crate::domain::{
        ClusterSpec, ImageTemplate, MacPool, NodeSpec, OsFamily, SharedStorageSpec,
    };
    use crate::lifecycle::{StageDurations, StageTable};

    fn base_setup() -> RunSetup {
        RunSetup {
            arch: ArchitectureKind::Arch1CentralNoFrontend,
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

    fn single_value_grid(ssh: Vec<f64>) -> CandidateGrid {
        let d = Calibration::default();
        CandidateGrid {
            ssh_stream_rate_mib_s: ssh,
            frontend_transfer_rate_mib_s: vec![d.frontend_transfer_rate_mib_s],
            register_s: vec![d.register_s],
            colocation_factor: vec![d.colocation_factor],
        }
    }

    #[test]
    fn targets_parse_with_or_without_a_header() {
        let with = parse_targets("arch,scenario,target_minutes\narch3,sb,204.7\n").unwrap();
        let without = parse_targets("arch3, sb, 204.7\n# comment\n\n").unwrap();
        assert_eq!(with, without);
        assert_eq!(with[0].arch, ArchitectureKind::Arch3DistributedRemoteCopy);
        assert_eq!(with[0].scenario, ScenarioKind::SingleBurst);
        assert_eq!(with[0].target_minutes, 204.7);
    }

    #[test]
    fn bad_target_lines_name_their_line_number() {
        let err = parse_targets("arch1,sb,70\narch9,sb,70\n").unwrap_err();
        assert!(
            matches!(err, CalibrateError::BadTargets { line: 2, .. }),
            "{err}"
        );
        let err = parse_targets("arch1,sb\n").unwrap_err();
        assert!(matches!(err, CalibrateError::BadTargets { line: 1, .. }));
        let err = parse_targets("arch1,sb,-3\n").unwrap_err();
        assert!(matches!(err, CalibrateError::BadTargets { line: 1, .. }));
        assert_eq!(
            parse_targets("# nothing\n").unwrap_err(),
            CalibrateError::NoTargets
        );
    }

    #[test]
    fn the_search_recovers_a_known_transfer_rate() {
        let base = base_setup();
        // Ten sequential capped copies at 8 MiB/s, then handoff.
        let true_total_minutes = (10.0 * 8192.0 / 8.0 + 10.0 + 570.0) / 60.0;
        let targets = vec![CalibrationTarget {
            arch: ArchitectureKind::Arch3DistributedRemoteCopy,
            scenario: ScenarioKind::SingleBurst,
            target_minutes: true_total_minutes,
        }];
        let outcome = calibrate(
            &base,
            &targets,
            &single_value_grid(vec![6.0, 7.0, 8.0, 9.0]),
            10,
            180.0,
            1,
        )
        .unwrap();
        assert_eq!(outcome.best.ssh_stream_rate_mib_s, 8.0);
        assert_eq!(outcome.evaluated, 4);
        assert!(outcome.score < 1e-18, "score {}", outcome.score);
        assert!((outcome.achieved_minutes[0] - true_total_minutes).abs() < 1e-9);
    }

    #[test]
    fn ties_keep_the_earliest_candidate() {
        let base = base_setup();
        // The first architecture never opens an ssh stream, so every ssh
        // rate scores identically; grid order must decide.
        let achieved = (10.0 * 8192.0 / 22.0 + 10.0 + 570.0) / 60.0;
        let targets = vec![CalibrationTarget {
            arch: ArchitectureKind::Arch1CentralNoFrontend,
            scenario: ScenarioKind::SingleBurst,
            target_minutes: achieved,
        }];
        let outcome = calibrate(
            &base,
            &targets,
            &single_value_grid(vec![5.0, 6.0, 7.0]),
            10,
            180.0,
            1,
        )
        .unwrap();
        assert_eq!(outcome.best.ssh_stream_rate_mib_s, 5.0);
    }

    #[test]
    fn empty_target_lists_are_rejected() {
        assert_eq!(
            calibrate(&base_setup(), &[], &CandidateGrid::default(), 10, 180.0, 1).unwrap_err(),
            CalibrateError::NoTargets
        );
    }
}
