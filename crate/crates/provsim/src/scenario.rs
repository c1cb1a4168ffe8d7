//! Benchmark scenarios: the four arrival patterns, repeated seeded runs,
//! elementwise averaging, and the arch × scenario sweep grid.
//!
//! With the `parallel` feature (on by default) the independent runs of an
//! experiment and the cells of a sweep execute on a rayon pool; results
//! are collected in submission order, so parallel and serial execution
//! produce identical output.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::arch::ArchitectureKind;
use crate::cloud::{CloudError, CloudSim, RunOutcome, RunSetup};
use crate::domain::{ClusterSpec, NodeId, Placement, TemplateId, VmId, VmRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScenarioKind {
    /// All requests at t = 0, pinned to the first node.
    SingleBurst,
    /// All requests at t = 0, round-robin over every node.
    MultiBurst,
    /// One request per interval, pinned to the first node.
    SingleInterval,
    /// One request per interval, round-robin over every node.
    MultiInterval,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::SingleBurst,
        ScenarioKind::MultiBurst,
        ScenarioKind::SingleInterval,
        ScenarioKind::MultiInterval,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ScenarioKind::SingleBurst => "sb",
            ScenarioKind::MultiBurst => "mb",
            ScenarioKind::SingleInterval => "si",
            ScenarioKind::MultiInterval => "mi",
        }
    }

    fn burst(self) -> bool {
        matches!(self, ScenarioKind::SingleBurst | ScenarioKind::MultiBurst)
    }

    fn single_node(self) -> bool {
        matches!(
            self,
            ScenarioKind::SingleBurst | ScenarioKind::SingleInterval
        )
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("unknown scenario {0:?} (expected sb, mb, si or mi)")]
pub struct ParseScenarioError(String);

impl FromStr for ScenarioKind {
    type Err = ParseScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sb" => Ok(ScenarioKind::SingleBurst),
            "mb" => Ok(ScenarioKind::MultiBurst),
            "si" => Ok(ScenarioKind::SingleInterval),
            "mi" => Ok(ScenarioKind::MultiInterval),
            other => Err(ParseScenarioError(other.to_string())),
        }
    }
}

/// A scenario kind with its workload parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub n_vms: usize,
    /// Gap between arrivals; only the interval kinds read it.
    pub interval_s: f64,
}

impl Scenario {
    pub fn new(kind: ScenarioKind) -> Scenario {
        Scenario {
            kind,
            n_vms: 10,
            interval_s: 180.0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("scenario generates zero requests")]
    EmptyScenario,
    #[error("experiment needs at least one run")]
    ZeroRuns,
    #[error(transparent)]
    Cloud(#[from] CloudError),
}

/// Expands a scenario into concrete requests against the given cluster.
pub fn generate_requests(
    scenario: &Scenario,
    cluster: &ClusterSpec,
) -> Result<Vec<VmRequest>, ScenarioError> {
    if scenario.n_vms == 0 {
        return Err(ScenarioError::EmptyScenario);
    }
    let n_nodes = cluster.nodes.len().max(1);
    Ok((0..scenario.n_vms)
        .map(|i| VmRequest {
            id: VmId(i),
            template: TemplateId(0),
            arrival_s: if scenario.kind.burst() {
                0.0
            } else {
                i as f64 * scenario.interval_s
            },
            placement: if scenario.kind.single_node() {
                Placement::Node(NodeId(0))
            } else {
                Placement::Node(NodeId(i % n_nodes))
            },
        })
        .collect())
}

/// The metrics of one simulation run (or the mean over several).
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub arrivals_s: Vec<f64>,
    pub nodes: Vec<NodeId>,
    /// Time each VM reached Running, by request index; `None` when it
    /// never deployed.
    pub running_s: Vec<Option<f64>>,
    /// Deployment time per VM: running − arrival.
    pub deploy_s: Vec<Option<f64>>,
    /// Sorted Running timestamps (failed VMs excluded): the cumulative
    /// deployment curve.
    pub curve_s: Vec<f64>,
    /// Last Running − first arrival; `None` when nothing deployed.
    pub total_s: Option<f64>,
    pub failures: usize,
    /// Requests that neither failed nor deployed (still queued at idle).
    pub stalled: usize,
}

/// Derives the metrics of a finished run.
pub fn compute_metrics(outcome: &RunOutcome) -> RunMetrics {
    let arrivals_s: Vec<f64> = outcome.per_vm.iter().map(|v| v.arrival_s).collect();
    let nodes: Vec<NodeId> = outcome.per_vm.iter().map(|v| v.node).collect();
    let running_s: Vec<Option<f64>> = outcome.per_vm.iter().map(|v| v.running_s).collect();
    let deploy_s: Vec<Option<f64>> = outcome
        .per_vm
        .iter()
        .map(|v| v.running_s.map(|r| r - v.arrival_s))
        .collect();
    let mut curve_s: Vec<f64> = running_s.iter().filter_map(|r| *r).collect();
    curve_s.sort_by(f64::total_cmp);
    let total_s = curve_s.last().map(|last| {
        let first_arrival = arrivals_s.iter().copied().fold(f64::INFINITY, f64::min);
        last - first_arrival
    });
    let failures = outcome.per_vm.iter().filter(|v| v.failed).count();
    let stalled = outcome
        .per_vm
        .iter()
        .filter(|v| !v.failed && v.running_s.is_none())
        .count();
    RunMetrics {
        arrivals_s,
        nodes,
        running_s,
        deploy_s,
        curve_s,
        total_s,
        failures,
        stalled,
    }
}

/// One seeded simulation: its metrics plus the full outcome (trace,
/// audits) it was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleRun {
    pub seed: u64,
    pub metrics: RunMetrics,
    pub outcome: RunOutcome,
}

/// A repeated experiment: every run plus the elementwise mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub arch: ArchitectureKind,
    pub scenario: Scenario,
    pub base_seed: u64,
    pub runs: Vec<SingleRun>,
    pub mean: RunMetrics,
}

/// Runs one seeded simulation of `scenario` under `setup` (the setup's
/// own seed field is ignored in favor of `seed`).
pub fn run_single(
    setup: &RunSetup,
    scenario: &Scenario,
    seed: u64,
) -> Result<SingleRun, ScenarioError> {
    let requests = generate_requests(scenario, &setup.cluster)?;
    let mut run_setup = setup.clone();
    run_setup.seed = seed;
    let mut sim = CloudSim::new(run_setup)?;
    sim.submit(&requests)?;
    let outcome = sim.run_until_idle()?;
    Ok(SingleRun {
        seed,
        metrics: compute_metrics(&outcome),
        outcome,
    })
}

/// Elementwise arithmetic mean over runs. When every run produced
/// identical metrics (the zero-jitter case) the first run is returned
/// bit-for-bit, so averaging constants is exact.
fn mean_metrics(runs: &[RunMetrics]) -> RunMetrics {
    let first = &runs[0];
    if runs.iter().all(|r| r == first) {
        return first.clone();
    }
    let n = runs.len() as f64;
    let per_vm = first.arrivals_s.len();
    let mean_opt = |pick: &dyn Fn(&RunMetrics) -> &Vec<Option<f64>>| -> Vec<Option<f64>> {
        (0..per_vm)
            .map(|i| {
                let mut sum = 0.0;
                for run in runs {
                    match pick(run)[i] {
                        Some(v) => sum += v,
                        None => return None,
                    }
                }
                Some(sum / n)
            })
            .collect()
    };
    let running_s = mean_opt(&|r: &RunMetrics| &r.running_s);
    let deploy_s = mean_opt(&|r: &RunMetrics| &r.deploy_s);
    let mut curve_s: Vec<f64> = running_s.iter().filter_map(|r| *r).collect();
    curve_s.sort_by(f64::total_cmp);
    let total_s = curve_s.last().map(|last| {
        let first_arrival = first
            .arrivals_s
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        last - first_arrival
    });
    RunMetrics {
        arrivals_s: first.arrivals_s.clone(),
        nodes: first.nodes.clone(),
        running_s,
        deploy_s,
        curve_s,
        total_s,
        failures: runs.iter().map(|r| r.failures).max().unwrap_or(0),
        stalled: runs.iter().map(|r| r.stalled).max().unwrap_or(0),
    }
}

fn collect_experiment(
    setup: &RunSetup,
    scenario: &Scenario,
    runs: Vec<Result<SingleRun, ScenarioError>>,
) -> Result<ExperimentResult, ScenarioError> {
    let runs: Vec<SingleRun> = runs.into_iter().collect::<Result<_, _>>()?;
    let mean = mean_metrics(&runs.iter().map(|r| r.metrics.clone()).collect::<Vec<_>>());
    Ok(ExperimentResult {
        arch: setup.arch,
        scenario: *scenario,
        base_seed: setup.seed,
        runs,
        mean,
    })
}

/// Runs `runs` independent simulations seeded `base, base+1, …` and
/// averages them. Runs execute in parallel when the `parallel` feature
/// is enabled; the result is identical either way.
pub fn run_experiment(
    setup: &RunSetup,
    scenario: &Scenario,
    runs: usize,
) -> Result<ExperimentResult, ScenarioError> {
    if runs == 0 {
        return Err(ScenarioError::ZeroRuns);
    }
    let seeds: Vec<u64> = (0..runs as u64).map(|i| setup.seed + i).collect();
    let results = maybe_par_map(seeds, |seed| run_single(setup, scenario, seed));
    collect_experiment(setup, scenario, results)
}

/// Sequential twin of [`run_experiment`], independent of the feature set.
pub fn run_experiment_serial(
    setup: &RunSetup,
    scenario: &Scenario,
    runs: usize,
) -> Result<ExperimentResult, ScenarioError> {
    if runs == 0 {
        return Err(ScenarioError::ZeroRuns);
    }
    let results = (0..runs as u64)
        .map(|i| run_single(setup, scenario, setup.seed + i))
        .collect();
    collect_experiment(setup, scenario, results)
}

/// One cell of the 4 × 4 architecture × scenario grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub arch: ArchitectureKind,
    pub scenario: ScenarioKind,
    pub result: ExperimentResult,
}

fn grid_inputs(n_vms: usize, interval_s: f64) -> Vec<(ArchitectureKind, Scenario)> {
    let mut cells = Vec::new();
    for arch in ArchitectureKind::ALL {
        for kind in ScenarioKind::ALL {
            cells.push((
                arch,
                Scenario {
                    kind,
                    n_vms,
                    interval_s,
                },
            ));
        }
    }
    cells
}

/// Runs the full grid (16 cells, architecture-major order). Cells execute
/// in parallel when the `parallel` feature is enabled.
pub fn sweep_grid(
    setup: &RunSetup,
    n_vms: usize,
    interval_s: f64,
    runs: usize,
) -> Result<Vec<SweepCell>, ScenarioError> {
    let results = maybe_par_map(grid_inputs(n_vms, interval_s), |(arch, scenario)| {
        let mut cell_setup = setup.clone();
        cell_setup.arch = arch;
        run_experiment(&cell_setup, &scenario, runs).map(|result| SweepCell {
            arch,
            scenario: scenario.kind,
            result,
        })
    });
    results.into_iter().collect()
}

/// Sequential twin of [`sweep_grid`]; same cells, same order, one thread.
pub fn sweep_grid_serial(
    setup: &RunSetup,
    n_vms: usize,
    interval_s: f64,
    runs: usize,
) -> Result<Vec<SweepCell>, ScenarioError> {
    grid_inputs(n_vms, interval_s)
        .into_iter()
        .map(|(arch, scenario)| {
            let mut cell_setup = setup.clone();
            cell_setup.arch = arch;
            run_experiment_serial(&cell_setup, &scenario, runs).map(|result| SweepCell {
                arch,
                scenario: scenario.kind,
                result,
            })
        })
        .collect()
}

/// Order-preserving map that uses the rayon pool when available.
#[cfg(feature = "parallel")]
pub(crate) fn maybe_par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Send + Sync,
{
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn maybe_par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}
