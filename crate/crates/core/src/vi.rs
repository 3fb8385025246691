//! Variational common information by alternating minimization.
//!
//! The variables are a fixed uniform prior `P_θ(Z)` and per-source tables
//! `P_θ(X_i|Z)`. The model joint is the mixture of products
//! `P_θ(x) = Σ_z P_θ(z) ∏ P_θ(x_i|z)` and the minimized surrogate, in bits, is
//!
//! ```text
//! L(θ) = -Σ_i H_θ(X_i|Z) - E_θ[log P(X^V)] + β D(P_θ ‖ P)
//! ```
//!
//! Sources are updated in index order. The update of source `i` is the
//! closed-form stationary point with `log P_θ` held at its current value:
//!
//! ```text
//! P'(x_i|z) ∝ exp Σ_w q(w|z) [ (1+β) ln P(x_i,w) - β ln P_θ(x_i,w) ]
//! ```
//!
//! where `w` ranges over the other sources and `q(w|z) = ∏_{j≠i} P_θ(x_j|z)`.
//! This equals `p(x_i) exp{-D[q(·|z) ‖ P(·|x_i)] + β Σ_w q log(P/P_θ)}` up to a
//! per-`z` constant. The sub-problem in `P(X_i|Z)` is convex and the update
//! minimizes its linearization in the `P_θ log P_θ` term, so the step points
//! downhill; when the full step overshoots it is halved until the loss does
//! not increase.

use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::info_report;
use crate::prob::{Encoder, JointDist, SourceSpec};
use crate::rng;
use crate::solver::{best_index, check_positive, RunRecord, SolveTrace, TerminatedBy};

const LN2: f64 = std::f64::consts::LN_2;
/// Halvings tried before an update is abandoned for the current iteration.
const MAX_BACKTRACK: usize = 40;

/// Prior and per-source conditionals. Table `i` is stored row-major with one
/// row per symbol of `X_i` and one column per latent symbol, so entry
/// `(x, z)` sits at `x * |Z| + z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VIParamsFile", into = "VIParamsFile")]
pub struct VIParams {
    z_prior: Vec<f64>,
    source_conds: Vec<Vec<f64>>,
    spec: SourceSpec,
}

#[derive(Serialize, Deserialize)]
struct VIParamsFile {
    z_prior: Vec<f64>,
    /// `source_conds[i][x][z] = P_θ(X_i = x | Z = z)`
    source_conds: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<VIParamsFile> for VIParams {
    type Error = Error;
    fn try_from(f: VIParamsFile) -> Result<Self> {
        let nz = f.z_prior.len();
        let mut tables = Vec::new();
        for (i, t) in f.source_conds.iter().enumerate() {
            if let Some(r) = t.iter().find(|r| r.len() != nz) {
                return Err(Error::ShapeMismatch(format!(
                    "table {} row has {} entries, expected {nz}",
                    i + 1,
                    r.len()
                )));
            }
            tables.push(t.concat());
        }
        let cards = f.source_conds.iter().map(Vec::len).collect();
        VIParams::new(SourceSpec::new(cards, nz)?, f.z_prior, tables)
    }
}

impl From<VIParams> for VIParamsFile {
    fn from(p: VIParams) -> Self {
        let nz = p.z_prior.len();
        VIParamsFile {
            source_conds: p
                .source_conds
                .iter()
                .map(|t| t.chunks(nz).map(<[f64]>::to_vec).collect())
                .collect(),
            z_prior: p.z_prior,
        }
    }
}

fn check_columns(table: &[f64], rows: usize, nz: usize, what: &str) -> Result<()> {
    for z in 0..nz {
        let mut s = 0.0;
        for x in 0..rows {
            let v = table[x * nz + z];
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidDistribution(format!(
                    "{what}: entry ({x}, {z}) is {v}"
                )));
            }
            s += v;
        }
        if (s - 1.0).abs() > 1e-12f64.max(rows as f64 * f64::EPSILON) {
            return Err(Error::InvalidDistribution(format!(
                "{what}: column {z} sums to {s}"
            )));
        }
    }
    Ok(())
}

impl VIParams {
    pub fn new(spec: SourceSpec, z_prior: Vec<f64>, source_conds: Vec<Vec<f64>>) -> Result<Self> {
        let nz = spec.z_cardinality();
        if z_prior.len() != nz || source_conds.len() != spec.num_sources() {
            return Err(Error::ShapeMismatch(format!(
                "expected prior of length {nz} and {} tables",
                spec.num_sources()
            )));
        }
        check_columns(&z_prior, nz, 1, "z_prior")?;
        for (i, (t, &c)) in source_conds.iter().zip(spec.cardinalities()).enumerate() {
            if t.len() != c * nz {
                return Err(Error::ShapeMismatch(format!(
                    "table {} needs {} entries, got {}",
                    i + 1,
                    c * nz,
                    t.len()
                )));
            }
            check_columns(t, c, nz, &format!("table {}", i + 1))?;
        }
        Ok(Self {
            z_prior,
            source_conds,
            spec,
        })
    }

    /// Uniform prior; every column drawn uniform on (0,1) and normalized.
    pub fn random(spec: &SourceSpec, seed: u64) -> Self {
        let nz = spec.z_cardinality();
        let mut r = rng::rng(seed);
        let source_conds = spec
            .cardinalities()
            .iter()
            .map(|&c| {
                let mut t = vec![0.0; c * nz];
                for z in 0..nz {
                    let col: Vec<f64> = (0..c).map(|_| r.gen::<f64>()).collect();
                    let s: f64 = col.iter().sum();
                    for (x, v) in col.into_iter().enumerate() {
                        t[x * nz + z] = v / s;
                    }
                }
                t
            })
            .collect();
        Self {
            z_prior: vec![1.0 / nz as f64; nz],
            source_conds,
            spec: spec.clone(),
        }
    }

    pub fn spec(&self) -> &SourceSpec {
        &self.spec
    }

    pub fn z_prior(&self) -> &[f64] {
        &self.z_prior
    }

    pub fn table(&self, i: usize) -> &[f64] {
        &self.source_conds[i]
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: VIParamsFile = serde_json::from_str(text)?;
        f.try_into()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `|Z| Σ|X_i|`.
pub fn param_count(spec: &SourceSpec) -> usize {
    spec.z_cardinality() * spec.cardinalities().iter().sum::<usize>()
}

fn default_max_iters() -> usize {
    10_000
}
fn default_loss_tol() -> f64 {
    1e-6
}
fn default_restarts() -> usize {
    25
}
fn default_patience() -> usize {
    50
}
fn default_stall_eps() -> f64 {
    1e-8
}
fn default_smoothing() -> f64 {
    DEFAULT_SMOOTHING
}

/// Weight of the uniform distribution mixed into the target joint before
/// solving. Without it any zero of `P` sends every log-likelihood of a random
/// start to `-∞`.
pub const DEFAULT_SMOOTHING: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VIConfig {
    pub beta: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_loss_tol")]
    pub loss_tol: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_stall_eps")]
    pub stall_eps: f64,
    #[serde(default = "default_smoothing")]
    pub smoothing: f64,
}

impl VIConfig {
    pub fn new(beta: f64) -> Self {
        Self {
            beta,
            max_iters: default_max_iters(),
            loss_tol: default_loss_tol(),
            restarts: default_restarts(),
            seed: 0,
            patience: default_patience(),
            stall_eps: default_stall_eps(),
            smoothing: default_smoothing(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_positive(self.beta, "beta")?;
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::InvalidArgument(format!(
                "smoothing must lie in [0, 1), got {}",
                self.smoothing
            )));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidArgument("restarts must be >= 1".into()));
        }
        Ok(())
    }
}

/// `(1-ε) P + ε U`.
pub fn smooth_joint(joint: &JointDist, eps: f64) -> Result<JointDist> {
    let n = joint.probs().len() as f64;
    let probs = joint
        .probs()
        .iter()
        .map(|p| (1.0 - eps) * p + eps / n)
        .collect();
    JointDist::new(joint.spec().clone(), probs)
}

/// Per-realization symbol table, `symbols[x * V + i]`.
struct Layout {
    v: usize,
    nz: usize,
    cards: Vec<usize>,
    symbols: Vec<usize>,
}

impl Layout {
    fn new(spec: &SourceSpec) -> Self {
        let n = spec.joint_size();
        let v = spec.num_sources();
        let mut symbols = Vec::with_capacity(n * v);
        for x in 0..n {
            symbols.extend(spec.unflatten(x));
        }
        Self {
            v,
            nz: spec.z_cardinality(),
            cards: spec.cardinalities().to_vec(),
            symbols,
        }
    }

    fn sym(&self, x: usize) -> &[usize] {
        &self.symbols[x * self.v..(x + 1) * self.v]
    }

    fn model_joint(&self, prior: &[f64], tables: &[Vec<f64>]) -> Vec<f64> {
        let nz = self.nz;
        let n = self.symbols.len() / self.v;
        let mut out = vec![0.0; n];
        for (x, o) in out.iter_mut().enumerate() {
            let s = self.sym(x);
            let mut acc = 0.0;
            for z in 0..nz {
                let mut p = prior[z];
                for (t, &xi) in tables.iter().zip(s) {
                    p *= t[xi * nz + z];
                }
                acc += p;
            }
            *o = acc;
        }
        out
    }

    /// Surrogate in bits against `target`; `+∞` on support mismatch.
    fn loss(&self, prior: &[f64], tables: &[Vec<f64>], target: &[f64], beta: f64) -> f64 {
        let nz = self.nz;
        let mut neg_h = 0.0;
        for (t, &c) in tables.iter().zip(&self.cards) {
            for z in 0..nz {
                for x in 0..c {
                    let l = t[x * nz + z];
                    if l > 0.0 {
                        neg_h += prior[z] * l * l.ln();
                    }
                }
            }
        }
        let model = self.model_joint(prior, tables);
        let mut cross = 0.0;
        let mut kl = 0.0;
        for (&q, &p) in model.iter().zip(target) {
            if q > 0.0 {
                if p <= 0.0 {
                    return f64::INFINITY;
                }
                cross -= q * p.ln();
                kl += q * (q / p).ln();
            }
        }
        (neg_h + cross + beta * kl) / LN2
    }

    /// Closed-form target for table `i`. Columns whose every logit is `-∞`
    /// keep their previous values.
    fn update_target(&self, prior: &[f64], tables: &[Vec<f64>], target: &[f64], i: usize, beta: f64) -> Vec<f64> {
        let nz = self.nz;
        let ci = self.cards[i];
        let model = self.model_joint(prior, tables);
        let mut logit = vec![0.0; ci * nz];
        let mut q = vec![0.0; nz];
        for (x, (&p, &m)) in target.iter().zip(&model).enumerate() {
            let s = self.sym(x);
            q.iter_mut().for_each(|v| *v = 1.0);
            for (j, (t, &xj)) in tables.iter().zip(s).enumerate() {
                if j != i {
                    for z in 0..nz {
                        q[z] *= t[xj * nz + z];
                    }
                }
            }
            let a = (1.0 + beta) * p.ln() - beta * m.max(f64::MIN_POSITIVE).ln();
            let row = &mut logit[s[i] * nz..(s[i] + 1) * nz];
            for z in 0..nz {
                // 0·(-∞) counts as 0
                if q[z] > 0.0 {
                    row[z] += q[z] * a;
                }
            }
        }
        let old = &tables[i];
        let mut out = vec![0.0; ci * nz];
        for z in 0..nz {
            let m = (0..ci).map(|x| logit[x * nz + z]).fold(f64::NEG_INFINITY, f64::max);
            if !m.is_finite() {
                for x in 0..ci {
                    out[x * nz + z] = old[x * nz + z];
                }
                continue;
            }
            let mut s = 0.0;
            for x in 0..ci {
                let e = (logit[x * nz + z] - m).exp();
                out[x * nz + z] = e;
                s += e;
            }
            for x in 0..ci {
                out[x * nz + z] /= s;
            }
        }
        out
    }

    /// Closed-form step on table `i` followed by halving until the loss does
    /// not increase. Returns the new loss.
    fn descend(&self, prior: &[f64], tables: &mut [Vec<f64>], target: &[f64], i: usize, beta: f64, current: f64) -> f64 {
        let goal = self.update_target(prior, tables, target, i, beta);
        let old = tables[i].clone();
        let mut t = 1.0;
        for _ in 0..MAX_BACKTRACK {
            tables[i] = old.iter().zip(&goal).map(|(a, b)| a + t * (b - a)).collect();
            let l = self.loss(prior, tables, target, beta);
            if l <= current {
                return l;
            }
            t *= 0.5;
        }
        tables[i] = old;
        current
    }
}

/// `P_θ(X^V) = Σ_z P_θ(z) ∏ P_θ(X_i|z)`.
pub fn model_joint(params: &VIParams) -> Result<JointDist> {
    let lay = Layout::new(&params.spec);
    let probs = lay.model_joint(&params.z_prior, &params.source_conds);
    JointDist::new(params.spec.clone(), probs)
}

fn check_params_joint(params: &VIParams, joint: &JointDist) -> Result<()> {
    if params.spec.cardinalities() != joint.spec().cardinalities() {
        return Err(Error::InvalidArgument(format!(
            "parameter cardinalities {:?} differ from joint {:?}",
            params.spec.cardinalities(),
            joint.spec().cardinalities()
        )));
    }
    Ok(())
}

/// `-Σ H_θ(X_i|Z) - E_θ[log2 P(X^V)] + β D(P_θ ‖ P)` in bits, or `+∞` when
/// the model puts mass where `P` has none.
pub fn surrogate_loss(params: &VIParams, joint: &JointDist, beta: f64) -> Result<f64> {
    check_params_joint(params, joint)?;
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
    }
    let lay = Layout::new(&params.spec);
    Ok(lay.loss(&params.z_prior, &params.source_conds, joint.probs(), beta))
}

/// The new table for source `i` with the others held fixed; the loss never
/// increases.
pub fn update_source(params: &VIParams, joint: &JointDist, i: usize, beta: f64) -> Result<Vec<f64>> {
    check_params_joint(params, joint)?;
    if i >= params.spec.num_sources() {
        return Err(Error::InvalidArgument(format!("source index {i} out of range")));
    }
    check_positive(beta, "beta")?;
    let lay = Layout::new(&params.spec);
    let mut tables = params.source_conds.clone();
    let current = lay.loss(&params.z_prior, &tables, joint.probs(), beta);
    lay.descend(&params.z_prior, &mut tables, joint.probs(), i, beta, current);
    Ok(tables.swap_remove(i))
}

/// Posterior `P_θ(z|x) ∝ P_θ(z) ∏ P_θ(x_i|z)`. Realizations with zero
/// likelihood under every `z` get a uniform row and are flagged.
pub fn project_encoder(params: &VIParams) -> (Encoder, Vec<bool>) {
    let lay = Layout::new(&params.spec);
    let nz = lay.nz;
    let n = params.spec.joint_size();
    let mut rows = vec![0.0; n * nz];
    let mut flagged = vec![false; n];
    for x in 0..n {
        let s = lay.sym(x);
        let row = &mut rows[x * nz..(x + 1) * nz];
        for (z, r) in row.iter_mut().enumerate() {
            let mut p = params.z_prior[z];
            for (t, &xi) in params.source_conds.iter().zip(s) {
                p *= t[xi * nz + z];
            }
            *r = p;
        }
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|r| *r /= total);
        } else {
            row.iter_mut().for_each(|r| *r = 1.0 / nz as f64);
            flagged[x] = true;
        }
    }
    (Encoder::from_rows_unchecked(params.spec.clone(), rows), flagged)
}

/// Outcome of a single restart.
#[derive(Debug, Clone)]
pub struct Restart {
    pub seed: u64,
    pub params: VIParams,
    pub encoder: Encoder,
    pub trace: SolveTrace,
    pub wall_ms: f64,
}

impl Restart {
    pub fn record(&self, joint: &JointDist, beta: f64) -> Result<RunRecord> {
        let r = info_report(joint, &self.encoder)?;
        Ok(RunRecord {
            seed: self.seed,
            knob: beta,
            final_loss: self.trace.final_loss(),
            iterations: self.trace.iterations,
            terminated_by: self.trace.terminated_by,
            mi_z_xv: r.mi_z_xv,
            cond_mi_sum: r.cond_mi_sum,
            wall_ms: self.wall_ms,
            param_count: Some(param_count(self.params.spec())),
        })
    }
}

/// A target joint prepared for repeated restarts.
pub struct VISolver {
    spec: SourceSpec,
    target: Vec<f64>,
    lay: Layout,
    cfg: VIConfig,
}

impl VISolver {
    pub fn new(joint: &JointDist, cfg: &VIConfig) -> Result<Self> {
        cfg.validate()?;
        let target = smooth_joint(joint, cfg.smoothing)?;
        Ok(Self {
            spec: joint.spec().clone(),
            lay: Layout::new(joint.spec()),
            target: target.probs().to_vec(),
            cfg: cfg.clone(),
        })
    }

    /// Loss against the smoothed target, the quantity the iteration descends.
    pub fn loss(&self, params: &VIParams) -> f64 {
        self.lay.loss(&params.z_prior, &params.source_conds, &self.target, self.cfg.beta)
    }

    /// One restart. `bar` is the best final loss of earlier restarts; a
    /// restart that stops improving while above it ends as a stall.
    pub fn run(&self, seed: u64, bar: f64) -> Restart {
        let start = Instant::now();
        let params = VIParams::random(&self.spec, seed);
        let (params, trace) = self.iterate(params, bar);
        let (encoder, _) = project_encoder(&params);
        Restart {
            seed,
            params,
            encoder,
            trace,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        }
    }

    pub fn run_from(&self, init: &VIParams) -> Result<(VIParams, SolveTrace)> {
        if init.spec != self.spec {
            return Err(Error::InvalidArgument(
                "initial parameters do not match the problem spec".into(),
            ));
        }
        Ok(self.iterate(init.clone(), f64::NEG_INFINITY))
    }

    fn iterate(&self, mut params: VIParams, bar: f64) -> (VIParams, SolveTrace) {
        let cfg = &self.cfg;
        let mut loss = self.loss(&params);
        let mut losses = vec![loss];
        let mut best = loss;
        let mut since_best = 0;
        let mut terminated_by = TerminatedBy::MaxIters;
        let mut iterations = 0;
        while iterations < cfg.max_iters {
            iterations += 1;
            let prev = loss;
            for i in 0..self.lay.v {
                loss = self.lay.descend(
                    &params.z_prior,
                    &mut params.source_conds,
                    &self.target,
                    i,
                    cfg.beta,
                    loss,
                );
            }
            losses.push(loss);
            if (prev - loss).abs() < cfg.loss_tol {
                terminated_by = TerminatedBy::Tolerance;
                break;
            }
            if loss < best - cfg.stall_eps {
                best = loss;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience && loss > bar {
                    terminated_by = TerminatedBy::Stall;
                    break;
                }
            }
        }
        (
            params,
            SolveTrace {
                losses,
                iterations,
                terminated_by,
            },
        )
    }
}

#[derive(Debug, Clone)]
pub struct VISolution {
    pub params: VIParams,
    pub encoder: Encoder,
    pub trace: SolveTrace,
    pub seed: u64,
    pub records: Vec<RunRecord>,
    pub best: usize,
}

pub fn restart_seed(base: u64, r: usize) -> u64 {
    rng::derive_seed(base, 0, r as u64)
}

/// Every restart runs sequentially so the stall bar is well defined; stalled
/// restarts still count against the budget.
pub fn solve(joint: &JointDist, cfg: &VIConfig) -> Result<VISolution> {
    let solver = VISolver::new(joint, cfg)?;
    let mut runs: Vec<Restart> = Vec::with_capacity(cfg.restarts);
    let mut records = Vec::with_capacity(cfg.restarts);
    let mut bar = f64::INFINITY;
    for r in 0..cfg.restarts {
        let run = solver.run(restart_seed(cfg.seed, r), bar);
        bar = bar.min(run.trace.final_loss());
        records.push(run.record(joint, cfg.beta)?);
        runs.push(run);
    }
    let best = best_index(&records).expect("at least one restart");
    let win = runs.swap_remove(best);
    Ok(VISolution {
        params: win.params,
        encoder: win.encoder,
        trace: win.trace,
        seed: win.seed,
        records,
        best,
    })
}
