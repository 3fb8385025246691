//! Bookkeeping shared by both solvers.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminatedBy {
    Tolerance,
    MaxIters,
    /// The restart stopped improving while still worse than an earlier restart.
    Stall,
}

impl fmt::Display for TerminatedBy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TerminatedBy::Tolerance => "tolerance",
            TerminatedBy::MaxIters => "max_iters",
            TerminatedBy::Stall => "stall",
        })
    }
}

/// Objective values in bits; `losses[0]` is the value at initialization and
/// `losses[k]` the value after iteration `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    pub losses: Vec<f64>,
    pub iterations: usize,
    pub terminated_by: TerminatedBy,
}

impl SolveTrace {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("trace always holds the initial loss")
    }

    /// Largest single-step increase, `max_k (losses[k+1] - losses[k])`.
    pub fn max_increase(&self) -> f64 {
        self.losses
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["iteration", "loss"])?;
        for (k, l) in self.losses.iter().enumerate() {
            wr.write_record([k.to_string(), l.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// One restart summarized for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    /// κ for the bipartite solver, β for the variational one.
    pub knob: f64,
    pub final_loss: f64,
    pub iterations: usize,
    pub terminated_by: TerminatedBy,
    pub mi_z_xv: f64,
    pub cond_mi_sum: f64,
    pub wall_ms: f64,
    pub param_count: Option<usize>,
}

/// Writes one row per restart. The knob column is named `knob_name`, and a
/// `param_count` column is added when any record carries one. With
/// `timing == false` the `wall_ms` column is left empty so files are
/// reproducible byte for byte.
pub fn write_run_records<W: Write>(
    w: W,
    records: &[RunRecord],
    knob_name: &str,
    timing: bool,
) -> Result<()> {
    let with_params = records.iter().any(|r| r.param_count.is_some());
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec![
        "seed",
        knob_name,
        "final_loss",
        "iterations",
        "terminated_by",
        "mi_z_xv",
        "cond_mi_sum",
        "wall_ms",
    ];
    if with_params {
        header.push("param_count");
    }
    wr.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.seed.to_string(),
            r.knob.to_string(),
            r.final_loss.to_string(),
            r.iterations.to_string(),
            r.terminated_by.to_string(),
            r.mi_z_xv.to_string(),
            r.cond_mi_sum.to_string(),
            if timing {
                format!("{:.3}", r.wall_ms)
            } else {
                String::new()
            },
        ];
        if with_params {
            row.push(r.param_count.map(|p| p.to_string()).unwrap_or_default());
        }
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

/// Index of the winning restart: lowest final loss, then fewest iterations,
/// then lowest seed.
pub fn best_index(records: &[RunRecord]) -> Option<usize> {
    (0..records.len()).min_by(|&a, &b| {
        let (ra, rb) = (&records[a], &records[b]);
        ra.final_loss
            .total_cmp(&rb.final_loss)
            .then(ra.iterations.cmp(&rb.iterations))
            .then(ra.seed.cmp(&rb.seed))
    })
}

pub(crate) fn check_positive(value: f64, what: &str) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} must be > 0, got {value}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(seed: u64, loss: f64, iters: usize) -> RunRecord {
        RunRecord {
            seed,
            knob: 0.5,
            final_loss: loss,
            iterations: iters,
            terminated_by: TerminatedBy::Tolerance,
            mi_z_xv: 1.0,
            cond_mi_sum: 0.0,
            wall_ms: 1.5,
            param_count: None,
        }
    }

    #[test]
    fn tie_break_order() {
        let rs = vec![rec(5, 0.1, 10), rec(3, 0.1, 10), rec(1, 0.1, 12), rec(9, 0.2, 1)];
        assert_eq!(best_index(&rs), Some(1));
        assert_eq!(best_index(&[]), None);
    }

    #[test]
    fn csv_columns() {
        let mut out = Vec::new();
        write_run_records(&mut out, &[rec(1, 0.0, 3)], "kappa", false).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "seed,kappa,final_loss,iterations,terminated_by,mi_z_xv,cond_mi_sum,wall_ms"
        );
        assert_eq!(lines.next().unwrap(), "1,0.5,0,3,tolerance,1,0,");

        let mut r = rec(1, 0.0, 3);
        r.param_count = Some(256);
        let mut out = Vec::new();
        write_run_records(&mut out, &[r], "beta", true).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.lines().next().unwrap().ends_with("wall_ms,param_count"));
        assert!(text.lines().nth(1).unwrap().ends_with(",1.500,256"));
    }

    #[test]
    fn max_increase() {
        let t = SolveTrace {
            losses: vec![3.0, 2.0, 2.5, 1.0],
            iterations: 3,
            terminated_by: TerminatedBy::MaxIters,
        };
        assert_eq!(t.max_increase(), 0.5);
        assert_eq!(t.final_loss(), 1.0);
    }
}
