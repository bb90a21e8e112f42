//! Expanding a stimulus set into an executable schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stimuli::{StimulusRow, StimulusSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DesignMode {
    OneTrialPerRun,
    MultipleTrialsPerRun,
}

impl std::fmt::Display for DesignMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DesignMode::OneTrialPerRun => "one-trial-per-run",
            DesignMode::MultipleTrialsPerRun => "multiple-trials-per-run",
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DesignError {
    #[error("sessions must be at least 1")]
    NoSessions,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPlan {
    pub run_index: u32,
    /// Presentation order; the 1-based position is the trial index.
    pub trials: Vec<StimulusRow>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionPlan {
    pub session_index: u32,
    pub runs: Vec<RunPlan>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub sessions: Vec<SessionPlan>,
    pub mode: DesignMode,
    pub seed: u64,
    /// Whether item order was actually shuffled (always false for
    /// one-trial-per-run designs).
    pub random_item: bool,
}

impl Schedule {
    pub fn empty(mode: DesignMode) -> Self {
        Self {
            sessions: Vec::new(),
            mode,
            seed: 0,
            random_item: false,
        }
    }

    pub fn total_trials(&self) -> usize {
        self.sessions
            .iter()
            .flat_map(|s| &s.runs)
            .map(|r| r.trials.len())
            .sum()
    }

    pub fn total_runs(&self) -> usize {
        self.sessions.iter().map(|s| s.runs.len()).sum()
    }

    /// Iterates `(session_index, run)` in execution order.
    pub fn runs(&self) -> impl Iterator<Item = (u32, &RunPlan)> {
        self.sessions
            .iter()
            .flat_map(|s| s.runs.iter().map(move |r| (s.session_index, r)))
    }
}

/// Groups rows by run, keeping runs in order of first appearance and rows in
/// file order.
fn group_runs(set: &StimulusSet) -> Vec<RunPlan> {
    let mut runs: Vec<RunPlan> = Vec::new();
    for row in &set.rows {
        match runs.iter_mut().find(|r| r.run_index == row.run) {
            Some(run) => run.trials.push(row.clone()),
            None => runs.push(RunPlan {
                run_index: row.run,
                trials: vec![row.clone()],
            }),
        }
    }
    runs
}

pub fn schedule_mode(set: &StimulusSet) -> DesignMode {
    if group_runs(set).iter().all(|r| r.trials.len() == 1) {
        DesignMode::OneTrialPerRun
    } else {
        DesignMode::MultipleTrialsPerRun
    }
}

/// Generator for the trial order of one run in one session. Each
/// `(session, run)` pair reads its own ChaCha stream under the experiment
/// seed, so permutations are reproducible and mutually independent.
fn run_rng(seed: u64, session_index: u32, run_index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((u64::from(session_index) << 32) | u64::from(run_index));
    rng
}

fn fisher_yates<T>(items: &mut [T], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

pub fn build_schedule(
    set: &StimulusSet,
    sessions: u32,
    random_item: bool,
    seed: u64,
) -> Result<Schedule, DesignError> {
    if sessions == 0 {
        return Err(DesignError::NoSessions);
    }
    let mode = schedule_mode(set);
    let random_item = random_item && mode == DesignMode::MultipleTrialsPerRun;
    let template = group_runs(set);

    let sessions = (1..=sessions)
        .map(|session_index| {
            let mut runs = template.clone();
            if random_item {
                for run in &mut runs {
                    let mut rng = run_rng(seed, session_index, run.run_index);
                    fisher_yates(&mut run.trials, &mut rng);
                }
            }
            SessionPlan {
                session_index,
                runs,
            }
        })
        .collect();

    Ok(Schedule {
        sessions,
        mode,
        seed,
        random_item,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set_from(runs: &[u32]) -> StimulusSet {
        let rows = runs
            .iter()
            .enumerate()
            .map(|(i, &run)| StimulusRow::new(run, i as u32 + 1, "c", format!("prompt {i}")))
            .collect();
        StimulusSet::from_rows(rows, "mem").unwrap()
    }

    fn items(run: &RunPlan) -> Vec<u32> {
        run.trials.iter().map(|t| t.item).collect()
    }

    #[test]
    fn two_runs_of_sixteen_keep_file_order() {
        let runs: Vec<u32> = (0..32).map(|i| 1 + i / 16).collect();
        let set = set_from(&runs);
        let schedule = build_schedule(&set, 1, false, 7).unwrap();
        assert_eq!(schedule.mode, DesignMode::MultipleTrialsPerRun);
        assert_eq!(schedule.sessions.len(), 1);
        let plan = &schedule.sessions[0];
        assert_eq!(plan.runs.len(), 2);
        assert_eq!(items(&plan.runs[0]), (1..=16).collect::<Vec<_>>());
        assert_eq!(items(&plan.runs[1]), (17..=32).collect::<Vec<_>>());
    }

    #[test]
    fn one_trial_design_disables_randomization() {
        let set = set_from(&[1, 2, 3, 4, 5, 6, 7, 8]);
        let schedule = build_schedule(&set, 1, true, 7).unwrap();
        assert_eq!(schedule.mode, DesignMode::OneTrialPerRun);
        assert!(!schedule.random_item);
        assert_eq!(schedule.total_runs(), 8);
        assert!(schedule.runs().all(|(_, r)| r.trials.len() == 1));
    }

    #[test]
    fn sessions_replicate_the_set() {
        let set = set_from(&(1..=40).collect::<Vec<_>>());
        let schedule = build_schedule(&set, 100, false, 0).unwrap();
        assert_eq!(schedule.total_trials(), 4000);
        let indices: Vec<u32> = schedule.sessions.iter().map(|s| s.session_index).collect();
        assert_eq!(indices, (1..=100).collect::<Vec<_>>());
    }

    #[test]
    fn mode_detection() {
        assert_eq!(
            schedule_mode(&set_from(&[1, 1, 2, 2])),
            DesignMode::MultipleTrialsPerRun
        );
        assert_eq!(
            schedule_mode(&set_from(&[1, 2, 3])),
            DesignMode::OneTrialPerRun
        );
        assert_eq!(schedule_mode(&set_from(&[4])), DesignMode::OneTrialPerRun);
    }

    #[test]
    fn run_order_follows_first_appearance() {
        let set = set_from(&[3, 1, 3, 2, 1]);
        let schedule = build_schedule(&set, 1, false, 0).unwrap();
        let order: Vec<u32> = schedule.sessions[0]
            .runs
            .iter()
            .map(|r| r.run_index)
            .collect();
        assert_eq!(order, vec![3, 1, 2]);
    }

    #[test]
    fn zero_sessions_rejected() {
        assert_eq!(
            build_schedule(&set_from(&[1]), 0, false, 0).unwrap_err(),
            DesignError::NoSessions
        );
    }

    #[test]
    fn sessions_draw_independent_permutations() {
        // A run of three trials has 3! = 6 orders, so two independent
        // uniform permutations coincide with probability 1/6.
        let set = set_from(&[1, 1, 1]);
        let trials = 1000;
        let same = (0..trials)
            .filter(|&seed| {
                let s = build_schedule(&set, 2, true, seed).unwrap();
                items(&s.sessions[0].runs[0]) == items(&s.sessions[1].runs[0])
            })
            .count();
        let rate = same as f64 / trials as f64;
        let p: f64 = 1.0 / 6.0;
        let sd = (p * (1.0 - p) / trials as f64).sqrt();
        assert!((rate - p).abs() < 4.0 * sd, "coincidence rate {rate}");
    }

    #[test]
    fn shuffle_is_roughly_uniform() {
        let set = set_from(&[1, 1, 1]);
        let mut counts = std::collections::HashMap::new();
        for seed in 0..6000 {
            let s = build_schedule(&set, 1, true, seed).unwrap();
            *counts
                .entry(items(&s.sessions[0].runs[0]))
                .or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        for (order, count) in counts {
            assert!(
                (850..1150).contains(&count),
                "{order:?} drawn {count} times"
            );
        }
    }

    proptest! {
        #[test]
        fn randomized_runs_are_permutations(
            runs in proptest::collection::vec(1u32..4, 1..30),
            sessions in 1u32..4,
            seed in any::<u64>(),
        ) {
            let set = set_from(&runs);
            let plain = build_schedule(&set, sessions, false, seed).unwrap();
            let shuffled = build_schedule(&set, sessions, true, seed).unwrap();
            prop_assert_eq!(plain.total_trials(), set.len() * sessions as usize);
            for (a, b) in plain.runs().zip(shuffled.runs()) {
                prop_assert_eq!(a.0, b.0);
                prop_assert_eq!(a.1.run_index, b.1.run_index);
                let mut x = items(a.1);
                let mut y = items(b.1);
                x.sort();
                y.sort();
                prop_assert_eq!(x, y);
            }
            prop_assert_eq!(build_schedule(&set, sessions, true, seed).unwrap(), shuffled);
        }
    }
}
