//! Grid sweeps over the solver knob with repeated restarts.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bipartite::{self, kappa_from_beta, BipartiteSolver, Kappas};
use crate::error::{Error, Result};
use crate::eval::{clustering_accuracy, DecodeMode};
use crate::prob::{enumerate_bipartitions, Encoder, JointDist};
use crate::rng;
use crate::solver::{best_index, RunRecord, TerminatedBy};
use crate::synth::{build_joint, sample_dataset, LabeledDataset, SynthSpec};
use crate::vi::{self, VIConfig, VISolver};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Bipartite,
    Vi,
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolverKind::Bipartite => "bipartite",
            SolverKind::Vi => "vi",
        })
    }
}

/// `n` points spaced geometrically on `[lo, hi]`.
pub fn geometric_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|k| lo * (hi / lo).powf(k as f64 / (n - 1) as f64))
            .collect(),
    }
}

fn default_grid() -> Vec<f64> {
    geometric_grid(0.1, 10.0, 20)
}
fn default_restarts() -> usize {
    25
}
fn default_max_iters() -> usize {
    10_000
}
fn default_loss_tol() -> f64 {
    1e-6
}
fn default_accuracy_samples() -> usize {
    10_000
}
fn default_smoothing() -> f64 {
    vi::DEFAULT_SMOOTHING
}
fn default_patience() -> usize {
    50
}
fn default_stall_eps() -> f64 {
    1e-8
}

/// A sweep over `grid` with `restarts` solves per grid value. For the
/// variational solver the grid value is `β`; for the bipartite solver it is
/// mapped to a shared `κ = β / (1 + |Π_V| β)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub solver: SolverKind,
    pub synth: SynthSpec,
    /// Defaults to `|Y|`.
    #[serde(default)]
    pub z_cardinality: Option<usize>,
    #[serde(default = "default_grid")]
    pub grid: Vec<f64>,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_loss_tol")]
    pub loss_tol: f64,
    /// Size of the fresh labeled set scored per grid value; 0 skips scoring.
    #[serde(default = "default_accuracy_samples")]
    pub accuracy_samples: usize,
    /// Variational solver only.
    #[serde(default = "default_smoothing")]
    pub smoothing: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_stall_eps")]
    pub stall_eps: f64,
}

impl SweepConfig {
    pub fn new(solver: SolverKind, synth: SynthSpec) -> Self {
        Self {
            solver,
            synth,
            z_cardinality: None,
            grid: default_grid(),
            restarts: default_restarts(),
            base_seed: 0,
            max_iters: default_max_iters(),
            loss_tol: default_loss_tol(),
            accuracy_samples: default_accuracy_samples(),
            smoothing: default_smoothing(),
            patience: default_patience(),
            stall_eps: default_stall_eps(),
        }
    }

    pub fn z(&self) -> usize {
        self.z_cardinality.unwrap_or(self.synth.y_cardinality)
    }

    /// The same config with every optional field filled in.
    pub fn resolved(&self) -> Self {
        Self {
            z_cardinality: Some(self.z()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        if self.grid.is_empty() {
            return Err(Error::InvalidArgument("grid is empty".into()));
        }
        if self.grid.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(Error::InvalidArgument("grid values must be > 0".into()));
        }
        if self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("grid must be strictly increasing".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidArgument("restarts must be >= 1".into()));
        }
        if self.z() == 0 {
            return Err(Error::InvalidArgument("z_cardinality must be >= 1".into()));
        }
        Ok(())
    }

    fn vi_config(&self, beta: f64) -> VIConfig {
        VIConfig {
            beta,
            max_iters: self.max_iters,
            loss_tol: self.loss_tol,
            restarts: self.restarts,
            seed: self.base_seed,
            patience: self.patience,
            stall_eps: self.stall_eps,
            smoothing: self.smoothing,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub solver: SolverKind,
    pub grid_index: usize,
    pub restart: usize,
    pub grid_value: f64,
    pub seed: u64,
    pub final_loss: f64,
    pub iterations: usize,
    pub terminated_by: TerminatedBy,
    pub wall_ms: f64,
    pub mi_z_xv: f64,
    pub cond_mi_sum: f64,
    /// Only on the best-loss restart of each grid value.
    pub accuracy: Option<f64>,
    pub param_count: usize,
    /// Largest single-iteration loss increase of the restart's trace.
    pub max_increase: f64,
}

impl SweepRecord {
    fn from_run(
        solver: SolverKind,
        g: usize,
        r: usize,
        grid_value: f64,
        run: &RunRecord,
        param_count: usize,
        max_increase: f64,
    ) -> Self {
        Self {
            solver,
            grid_index: g,
            restart: r,
            grid_value,
            seed: run.seed,
            final_loss: run.final_loss,
            iterations: run.iterations,
            terminated_by: run.terminated_by,
            wall_ms: run.wall_ms,
            mi_z_xv: run.mi_z_xv,
            cond_mi_sum: run.cond_mi_sum,
            accuracy: None,
            param_count,
            max_increase,
        }
    }
}

/// Winner of one grid value.
#[derive(Debug, Clone)]
pub struct GridBest {
    pub grid_value: f64,
    /// Index into [`SweepOutcome::records`].
    pub record: usize,
    pub encoder: Encoder,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    /// Sorted by grid index, then restart.
    pub records: Vec<SweepRecord>,
    pub best: Vec<GridBest>,
}

struct Cell {
    records: Vec<SweepRecord>,
    best: usize,
    encoder: Encoder,
}

fn run_cell(cfg: &SweepConfig, joint: &JointDist, g: usize, value: f64) -> Result<Cell> {
    let seed = |r: usize| rng::derive_seed(cfg.base_seed, g as u64, r as u64);
    let mut records = Vec::with_capacity(cfg.restarts);
    let mut runs = Vec::with_capacity(cfg.restarts);
    match cfg.solver {
        SolverKind::Bipartite => {
            let splits = enumerate_bipartitions(joint.spec().num_sources())?.len();
            let kappa = kappa_from_beta(value, splits);
            let solver = BipartiteSolver::new(joint, &Kappas::Shared(kappa))?;
            let pc = bipartite::param_count(joint.spec());
            for r in 0..cfg.restarts {
                let run = solver.run(seed(r), cfg.max_iters, cfg.loss_tol);
                let rec = run.record(joint, value)?;
                let inc = run.trace.max_increase();
                records.push(SweepRecord::from_run(cfg.solver, g, r, value, &rec, pc, inc));
                runs.push(run.encoder);
            }
        }
        SolverKind::Vi => {
            let solver = VISolver::new(joint, &cfg.vi_config(value))?;
            let pc = vi::param_count(joint.spec());
            let mut bar = f64::INFINITY;
            for r in 0..cfg.restarts {
                let run = solver.run(seed(r), bar);
                bar = bar.min(run.trace.final_loss());
                let rec = run.record(joint, value)?;
                let inc = run.trace.max_increase();
                records.push(SweepRecord::from_run(cfg.solver, g, r, value, &rec, pc, inc));
                runs.push(run.encoder);
            }
        }
    }
    let as_runs: Vec<RunRecord> = records
        .iter()
        .map(|s| RunRecord {
            seed: s.seed,
            knob: s.grid_value,
            final_loss: s.final_loss,
            iterations: s.iterations,
            terminated_by: s.terminated_by,
            mi_z_xv: s.mi_z_xv,
            cond_mi_sum: s.cond_mi_sum,
            wall_ms: s.wall_ms,
            param_count: None,
        })
        .collect();
    let best = best_index(&as_runs).expect("restarts >= 1");
    let encoder = runs.swap_remove(best);
    Ok(Cell {
        records,
        best,
        encoder,
    })
}

/// Seeds of the accuracy dataset and of the decoding stream of grid value `g`.
fn accuracy_seeds(base: u64, g: usize) -> (u64, u64) {
    (rng::substream(base, 1), rng::substream(rng::substream(base, 2), g as u64))
}

/// Every (grid value, restart) cell. Restart `r` at grid index `g` is seeded
/// with `derive_seed(base_seed, g, r)`. Grid values run in parallel on the
/// current rayon pool; the output does not depend on the pool size.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let joint = build_joint(&cfg.synth)?.with_z(cfg.z())?;
    let cells = cfg
        .grid
        .par_iter()
        .enumerate()
        .map(|(g, &value)| run_cell(cfg, &joint, g, value))
        .collect::<Result<Vec<_>>>()?;
    let data: Option<LabeledDataset> = if cfg.accuracy_samples > 0 {
        Some(sample_dataset(&cfg.synth, cfg.accuracy_samples, accuracy_seeds(cfg.base_seed, 0).0)?)
    } else {
        None
    };
    let mut records = Vec::with_capacity(cfg.grid.len() * cfg.restarts);
    let mut best = Vec::with_capacity(cfg.grid.len());
    for (g, mut cell) in cells.into_iter().enumerate() {
        if let Some(d) = &data {
            let acc = clustering_accuracy(&cell.encoder, d, accuracy_seeds(cfg.base_seed, g).1, DecodeMode::Sample)?;
            cell.records[cell.best].accuracy = Some(acc.accuracy);
        }
        best.push(GridBest {
            grid_value: cfg.grid[g],
            record: records.len() + cell.best,
            encoder: cell.encoder,
        });
        records.extend(cell.records);
    }
    Ok(SweepOutcome { records, best })
}

/// Runs the sweep on a dedicated pool of `threads` workers.
pub fn run_sweep_with_threads(cfg: &SweepConfig, threads: usize) -> Result<SweepOutcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| run_sweep(cfg))
}

pub const CSV_HEADER: [&str; 11] = [
    "solver",
    "grid_value",
    "seed",
    "final_loss",
    "iterations",
    "terminated_by",
    "wall_ms",
    "mi_z_xv",
    "cond_mi_sum",
    "accuracy",
    "param_count",
];

/// With `timing == false` the `wall_ms` column is left empty.
pub fn write_sweep_csv<W: Write>(w: W, records: &[SweepRecord], timing: bool) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(CSV_HEADER)?;
    for r in records {
        wr.write_record([
            r.solver.to_string(),
            r.grid_value.to_string(),
            r.seed.to_string(),
            r.final_loss.to_string(),
            r.iterations.to_string(),
            r.terminated_by.to_string(),
            if timing {
                format!("{:.3}", r.wall_ms)
            } else {
                String::new()
            },
            r.mi_z_xv.to_string(),
            r.cond_mi_sum.to_string(),
            r.accuracy.map(|a| a.to_string()).unwrap_or_default(),
            r.param_count.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// `a` is no worse on both axes and strictly better on one.
pub fn dominates(a: &SweepRecord, b: &SweepRecord) -> bool {
    a.cond_mi_sum <= b.cond_mi_sum
        && a.mi_z_xv <= b.mi_z_xv
        && (a.cond_mi_sum < b.cond_mi_sum || a.mi_z_xv < b.mi_z_xv)
}

/// Records not dominated in `(cond_mi_sum, mi_z_xv)`, sorted by
/// `cond_mi_sum` and then `mi_z_xv`.
pub fn pareto_frontier(records: &[SweepRecord]) -> Result<Vec<SweepRecord>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records".into()));
    }
    let mut sorted: Vec<&SweepRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        a.cond_mi_sum
            .total_cmp(&b.cond_mi_sum)
            .then(a.mi_z_xv.total_cmp(&b.mi_z_xv))
    });
    let mut out: Vec<SweepRecord> = Vec::new();
    let mut best_mi = f64::INFINITY;
    let mut i = 0;
    while i < sorted.len() {
        // records sharing a cond_mi_sum compete only on mi_z_xv
        let c = sorted[i].cond_mi_sum;
        let mut j = i;
        while j < sorted.len() && sorted[j].cond_mi_sum == c {
            j += 1;
        }
        let lo = sorted[i].mi_z_xv;
        if lo < best_mi {
            out.extend(sorted[i..j].iter().filter(|r| r.mi_z_xv == lo).map(|r| (*r).clone()));
            best_mi = lo;
        }
        i = j;
    }
    Ok(out)
}

/// Lowest `mi_z_xv` among records with `cond_mi_sum < bar`.
pub fn best_below(records: &[SweepRecord], bar: f64) -> Option<&SweepRecord> {
    records
        .iter()
        .filter(|r| r.cond_mi_sum < bar)
        .min_by(|a, b| a.mi_z_xv.total_cmp(&b.mi_z_xv))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRow {
    pub z_cardinality: usize,
    /// Sum of per-solve wall times over the whole sweep.
    pub total_wall_ms: f64,
}

/// Single-threaded sweep time for each `|Z|`, accuracy scoring off.
pub fn runtime_profile(cfg: &SweepConfig, zs: &[usize]) -> Result<Vec<RuntimeRow>> {
    zs.iter()
        .map(|&z| {
            let c = SweepConfig {
                z_cardinality: Some(z),
                accuracy_samples: 0,
                ..cfg.clone()
            };
            let out = run_sweep_with_threads(&c, 1)?;
            Ok(RuntimeRow {
                z_cardinality: z,
                total_wall_ms: out.records.iter().map(|r| r.wall_ms).sum(),
            })
        })
        .collect()
}

pub fn write_runtime_csv<W: Write>(w: W, solver: SolverKind, rows: &[RuntimeRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["solver", "z_cardinality", "total_wall_ms"])?;
    for r in rows {
        wr.write_record([solver.to_string(), r.z_cardinality.to_string(), format!("{:.3}", r.total_wall_ms)])?;
    }
    wr.flush()?;
    Ok(())
}
