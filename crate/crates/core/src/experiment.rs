//! Parameter sweeps emitting one CSV row per `(ε, seed)`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runner::{init_threads, run, Row, RunSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    /// Everything but `epsilon` and `seed`, which are swept.
    pub base: RunSpec,
    pub epsilons: Vec<f64>,
    /// Seeds `base.seed .. base.seed + seeds`.
    pub seeds: usize,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.epsilons.is_empty() || self.seeds == 0 {
            return Err(Error::invalid("experiment needs at least one ε and one seed"));
        }
        Ok(())
    }
}

/// Runs the grid in parallel; rows come back ordered by ε, then seed.
pub fn experiment_suite(spec: &ExperimentSpec) -> Result<Vec<Row>> {
    spec.validate()?;
    init_threads();
    let grid: Vec<(f64, u64)> = spec
        .epsilons
        .iter()
        .flat_map(|&e| (0..spec.seeds as u64).map(move |i| (e, i)))
        .collect();
    grid.par_iter()
        .map(|&(epsilon, i)| {
            let mut s = spec.base.clone();
            s.epsilon = epsilon;
            s.seed = spec.base.seed.wrapping_add(i);
            run(&s, None, None).map(|r| r.row)
        })
        .collect()
}

pub fn write_csv<W: Write>(rows: &[Row], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::{Algo, CSV_HEADER};

    #[test]
    fn basic_rows_are_constant_two_n() {
        let mut base = RunSpec::new(Algo::Basic, 200);
        base.k = 14;
        let rows = experiment_suite(&ExperimentSpec { base, epsilons: vec![0.25, 0.5], seeds: 3 }).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.bandwidth == 400 && !r.aborted));
        assert_eq!(rows[3].epsilon, 0.5);
        assert_eq!(rows[3].seed, 0);
    }

    #[test]
    fn csv_output_has_header_and_rows() {
        let base = RunSpec::new(Algo::Root, 64);
        let rows = experiment_suite(&ExperimentSpec { base, epsilons: vec![1.0], seeds: 2 }).unwrap();
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("root,64,0,0,0,0,1.0,0,"));
    }

    #[test]
    fn empty_grid_is_rejected() {
        let base = RunSpec::new(Algo::Root, 64);
        assert!(experiment_suite(&ExperimentSpec { base, epsilons: vec![], seeds: 2 }).is_err());
    }
}
