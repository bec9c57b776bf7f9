//! Parameter sweeps over a base scenario.

use std::str::FromStr;

use rayon::prelude::*;

use crate::protocol::Variant;
use crate::scenario::{ConfigError, Scenario};
use crate::sim::{run_scenario, RunSummary, SimOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Sources,
    MaxSpeed,
    Rate,
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sources" => Ok(Axis::Sources),
            "max_speed" => Ok(Axis::MaxSpeed),
            "rate" => Ok(Axis::Rate),
            other => Err(format!("unknown axis `{other}` (expected sources, max_speed or rate)")),
        }
    }
}

impl Axis {
    pub fn apply(self, s: &mut Scenario, v: f64) -> Result<(), ConfigError> {
        match self {
            Axis::Sources => {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(ConfigError::Invalid {
                        key: "sources".into(),
                        msg: format!("sweep value {v} is not a positive integer"),
                    });
                }
                s.sources = v as usize;
                s.flows = None;
            }
            Axis::MaxSpeed => {
                s.max_speed = v;
                if s.min_speed > v {
                    s.min_speed = v;
                }
            }
            Axis::Rate => {
                s.rate = v;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SweepJob {
    pub value: f64,
    pub seed: u64,
    pub variant: Variant,
    pub scenario: Scenario,
}

/// Jobs in output order: axis value, then seed, then variant.
pub fn plan(
    base: &Scenario,
    axis: Axis,
    values: &[f64],
    seeds: &[u64],
    variants: &[Variant],
) -> Result<Vec<SweepJob>, ConfigError> {
    let mut jobs = Vec::new();
    for &value in values {
        for &seed in seeds {
            for &variant in variants {
                let mut s = base.clone();
                axis.apply(&mut s, value)?;
                s.seed = seed;
                s.variant = variant;
                s.validate()?;
                jobs.push(SweepJob {
                    value,
                    seed,
                    variant,
                    scenario: s,
                });
            }
        }
    }
    Ok(jobs)
}

/// Runs every job, in parallel; rows come back in plan order.
pub fn sweep(
    base: &Scenario,
    axis: Axis,
    values: &[f64],
    seeds: &[u64],
    variants: &[Variant],
) -> Result<Vec<RunSummary>, ConfigError> {
    let jobs = plan(base, axis, values, seeds, variants)?;
    jobs.into_par_iter()
        .map(|j| run_scenario(j.scenario, SimOptions::default()).map(|o| o.summary))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_size_and_order() {
        let base = Scenario::default();
        let jobs = plan(
            &base,
            Axis::Sources,
            &[1.0, 2.0, 5.0, 10.0, 15.0, 20.0],
            &[1, 2, 3, 4, 5],
            &Variant::ALL,
        )
        .unwrap();
        assert_eq!(jobs.len(), 90);
        assert_eq!((jobs[0].value, jobs[0].seed, jobs[0].variant), (1.0, 1, Variant::Odmrp));
        assert_eq!((jobs[2].value, jobs[2].seed, jobs[2].variant), (1.0, 1, Variant::Proposed));
        assert_eq!((jobs[3].value, jobs[3].seed), (1.0, 2));
        assert_eq!(jobs[89].scenario.sources, 20);
    }

    #[test]
    fn axis_parsing_and_bad_values() {
        assert_eq!("rate".parse::<Axis>(), Ok(Axis::Rate));
        assert!("speed".parse::<Axis>().is_err());
        let mut s = Scenario::default();
        assert!(Axis::Sources.apply(&mut s, 2.5).is_err());
        Axis::MaxSpeed.apply(&mut s, 0.5).unwrap();
        assert_eq!((s.min_speed, s.max_speed), (0.5, 0.5));
    }
}
