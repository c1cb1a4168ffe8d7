//! VM lifecycle: the states a request moves through from queueing to
//! running, which transitions are legal, and how long the timed
//! contextualization stages take.
//!
//! The boot path is fixed:
//!
//! ```text
//! Queued -> Provisioning -> Booting -> MacLookup -> Renaming
//!        -> [SidReset, Windows XP only] -> Rebooting -> Running
//! ```
//!
//! `Running -> ShutDown` is the only transition after the boot path.
//! Windows XP guests visit `SidReset` (security-ID regeneration before the
//! final reboot); Linux guests skip straight from `Renaming` to
//! `Rebooting`.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use thiserror::Error;

use crate::domain::OsFamily;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LifecycleState {
    Queued,
    Provisioning,
    Booting,
    MacLookup,
    Renaming,
    SidReset,
    Rebooting,
    Running,
    ShutDown,
}

impl fmt::Display for LifecycleState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            LifecycleState::Queued => "Queued",
            LifecycleState::Provisioning => "Provisioning",
            LifecycleState::Booting => "Booting",
            LifecycleState::MacLookup => "MacLookup",
            LifecycleState::Renaming => "Renaming",
            LifecycleState::SidReset => "SidReset",
            LifecycleState::Rebooting => "Rebooting",
            LifecycleState::Running => "Running",
            LifecycleState::ShutDown => "ShutDown",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum LifecycleError {
    #[error("stage {stage} is not on the boot path for {os}")]
    StageNotOnPath { stage: LifecycleState, os: OsFamily },
    #[error("{0} is not a timed contextualization stage")]
    NotATimedStage(LifecycleState),
    #[error("no transition follows {0} on the boot path")]
    PathExhausted(LifecycleState),
}

/// The state following `current` on the boot path, or an error once the
/// path is exhausted (`Running` is terminal until an explicit shutdown).
pub fn boot_next(current: LifecycleState, os: OsFamily) -> Result<LifecycleState, LifecycleError> {
    use LifecycleState::*;
    Ok(match current {
        Queued => Provisioning,
        Provisioning => Booting,
        Booting => MacLookup,
        MacLookup => Renaming,
        Renaming => match os {
            OsFamily::WindowsXp => SidReset,
            OsFamily::Linux => Rebooting,
        },
        SidReset => match os {
            OsFamily::WindowsXp => Rebooting,
            OsFamily::Linux => {
                return Err(LifecycleError::StageNotOnPath {
                    stage: SidReset,
                    os,
                })
            }
        },
        Rebooting => Running,
        Running | ShutDown => return Err(LifecycleError::PathExhausted(current)),
    })
}

/// Whether `from -> to` is a legal transition for the given OS family.
pub fn is_legal_transition(from: LifecycleState, to: LifecycleState, os: OsFamily) -> bool {
    if from == LifecycleState::Running && to == LifecycleState::ShutDown {
        return true;
    }
    boot_next(from, os) == Ok(to)
}

/// The ordered list of states a guest of `os` visits, queue to running.
pub fn boot_path(os: OsFamily) -> Vec<LifecycleState> {
    let mut path = vec![LifecycleState::Queued];
    let mut cur = LifecycleState::Queued;
    while cur != LifecycleState::Running {
        cur = boot_next(cur, os).expect("boot path terminates at Running");
        path.push(cur);
    }
    path
}

/// Base durations (seconds) for the timed contextualization stages of one
/// OS family. `sid_reset_s` is only meaningful for Windows XP.
#[derive(Debug, Clone, PartialEq)]
pub struct StageDurations {
    pub booting_s: f64,
    pub mac_lookup_s: f64,
    pub renaming_s: f64,
    pub sid_reset_s: Option<f64>,
    pub rebooting_s: f64,
}

/// Per-OS stage duration tables.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTable {
    pub windows_xp: StageDurations,
    pub linux: StageDurations,
}

impl StageTable {
    pub fn for_os(&self, os: OsFamily) -> &StageDurations {
        match os {
            OsFamily::WindowsXp => &self.windows_xp,
            OsFamily::Linux => &self.linux,
        }
    }
}

/// Base duration of a timed stage, before jitter.
pub fn base_stage_duration(
    stage: LifecycleState,
    os: OsFamily,
    table: &StageTable,
) -> Result<f64, LifecycleError> {
    let d = table.for_os(os);
    match stage {
        LifecycleState::Booting => Ok(d.booting_s),
        LifecycleState::MacLookup => Ok(d.mac_lookup_s),
        LifecycleState::Renaming => Ok(d.renaming_s),
        LifecycleState::SidReset => match os {
            OsFamily::WindowsXp => Ok(d
                .sid_reset_s
                .expect("windows_xp stage table carries sid_reset_s")),
            OsFamily::Linux => Err(LifecycleError::StageNotOnPath { stage, os }),
        },
        LifecycleState::Rebooting => Ok(d.rebooting_s),
        other => Err(LifecycleError::NotATimedStage(other)),
    }
}

/// Applies multiplicative lognormal jitter to a base duration.
///
/// `sigma == 0` is the deterministic case: the base value is returned and
/// the RNG is left untouched, so seeded runs without jitter are identical
/// regardless of seed.
pub fn jittered(base_s: f64, sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
    if sigma <= 0.0 {
        return base_s;
    }
    // Median-1 multiplier: exp(N(0, sigma)).
    let dist = LogNormal::new(0.0, sigma).expect("sigma is finite and positive");
    base_s * dist.sample(rng)
}

/// Duration of `stage` for a guest of `os`, jittered when `sigma > 0`.
pub fn stage_duration(
    stage: LifecycleState,
    os: OsFamily,
    table: &StageTable,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64, LifecycleError> {
    base_stage_duration(stage, os, table).map(|base| jittered(base, sigma, rng))
}

/// Draws an arbitrary value so tests can compare RNG streams.
#[doc(hidden)]
pub fn probe_rng(rng: &mut ChaCha8Rng) -> u64 {
    rng.gen()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn default_table() -> StageTable {
        StageTable {
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
        }
    }

    #[test]
    fn windows_path_includes_sid_reset_exactly_once() {
        let path = boot_path(OsFamily::WindowsXp);
        assert_eq!(
            path,
            vec![
                LifecycleState::Queued,
                LifecycleState::Provisioning,
                LifecycleState::Booting,
                LifecycleState::MacLookup,
                LifecycleState::Renaming,
                LifecycleState::SidReset,
                LifecycleState::Rebooting,
                LifecycleState::Running,
            ]
        );
    }

    #[test]
    fn linux_path_skips_sid_reset() {
        let path = boot_path(OsFamily::Linux);
        assert!(!path.contains(&LifecycleState::SidReset));
        assert_eq!(
            &path[4..],
            &[
                LifecycleState::Renaming,
                LifecycleState::Rebooting,
                LifecycleState::Running,
            ]
        );
    }

    #[test]
    fn renaming_advances_to_sid_reset_only_on_windows() {
        assert_eq!(
            boot_next(LifecycleState::Renaming, OsFamily::WindowsXp),
            Ok(LifecycleState::SidReset)
        );
        assert_eq!(
            boot_next(LifecycleState::Renaming, OsFamily::Linux),
            Ok(LifecycleState::Rebooting)
        );
    }

    #[test]
    fn advancing_past_running_is_an_error() {
        assert_eq!(
            boot_next(LifecycleState::Running, OsFamily::Linux),
            Err(LifecycleError::PathExhausted(LifecycleState::Running))
        );
    }

    #[test]
    fn shutdown_is_only_legal_from_running() {
        assert!(is_legal_transition(
            LifecycleState::Running,
            LifecycleState::ShutDown,
            OsFamily::Linux
        ));
        assert!(!is_legal_transition(
            LifecycleState::Booting,
            LifecycleState::ShutDown,
            OsFamily::Linux
        ));
        assert!(!is_legal_transition(
            LifecycleState::Booting,
            LifecycleState::Renaming,
            OsFamily::Linux
        ));
    }

    #[test]
    fn sid_reset_duration_for_linux_is_rejected() {
        let table = default_table();
        assert_eq!(
            base_stage_duration(LifecycleState::SidReset, OsFamily::Linux, &table),
            Err(LifecycleError::StageNotOnPath {
                stage: LifecycleState::SidReset,
                os: OsFamily::Linux,
            })
        );
    }

    #[test]
    fn queued_is_not_a_timed_stage() {
        let table = default_table();
        assert_eq!(
            base_stage_duration(LifecycleState::Queued, OsFamily::Linux, &table),
            Err(LifecycleError::NotATimedStage(LifecycleState::Queued))
        );
    }

    #[test]
    fn zero_sigma_returns_base_and_skips_the_rng() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let d = jittered(90.0, 0.0, &mut a);
        assert_eq!(d, 90.0);
        // RNG untouched: both streams still agree.
        assert_eq!(probe_rng(&mut a), probe_rng(&mut b));
    }

    #[test]
    fn jitter_is_deterministic_per_seed_and_positive() {
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        let da = jittered(90.0, 0.1, &mut a);
        let db = jittered(90.0, 0.1, &mut b);
        assert_eq!(da, db);
        assert!(da > 0.0);
        assert_ne!(da, 90.0, "sigma=0.1 should perturb the duration");
    }

    #[test]
    fn stage_duration_uses_the_windows_table() {
        let table = default_table();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = stage_duration(
            LifecycleState::SidReset,
            OsFamily::WindowsXp,
            &table,
            0.0,
            &mut rng,
        )
        .unwrap();
        assert_eq!(d, 300.0);
    }
}
