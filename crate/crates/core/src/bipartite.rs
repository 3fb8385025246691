//! Bipartite common information by the difference-of-convex algorithm.
//!
//! The objective, in bits and with constants dropped, is
//!
//! ```text
//! L(P(Z|X^V)) = I(X^V;Z) - Σ_S κ_S [ I(X_S;Z) + I(X_{S^c};Z) ]
//! ```
//!
//! Writing `L = f - g` with `f = -H(Z|X^V)` and
//! `g = -H(Z) + Σ_S κ_S [I(X_S;Z) + I(X_{S^c};Z)]`, both convex in the encoder,
//! each iteration minimizes `f` against the linearization of `g` at the current
//! encoder. The minimizer is the exponential tilt
//!
//! ```text
//! P'(z|x) ∝ p(z) · exp Σ_S κ_S [ ln p(x_S|z)/p(x_S) + ln p(x_{S^c}|z)/p(x_{S^c}) ]
//! ```
//!
//! with every marginal taken under the previous encoder.

use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::info_report;
use crate::prob::{axis_map, check_same_sources, enumerate_bipartitions};
use crate::prob::{Encoder, JointDist, SourceSpec};
use crate::rng;
use crate::solver::{best_index, RunRecord, SolveTrace, TerminatedBy};

/// Consecutive iterations a latent symbol may carry zero mass before reseeding.
pub const DEAD_PATIENCE: usize = 10;
/// Mass mixed into every encoder entry on reseed.
pub const RESEED_MASS: f64 = 1e-6;

/// Per-bipartition weights. `Default` means `κ_S = 1/|Π_V|` for every split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Kappas {
    #[default]
    Default,
    Shared(f64),
    /// One weight per split, in [`enumerate_bipartitions`] order.
    PerSplit(Vec<f64>),
}

impl Kappas {
    pub fn resolve(&self, num_sources: usize) -> Result<Vec<f64>> {
        let n = enumerate_bipartitions(num_sources)?.len();
        let ks = match self {
            Kappas::Default => vec![1.0 / n as f64; n],
            Kappas::Shared(k) => vec![*k; n],
            Kappas::PerSplit(v) => {
                if v.len() != n {
                    return Err(Error::InvalidArgument(format!(
                        "{} kappas given for {n} bipartitions",
                        v.len()
                    )));
                }
                v.clone()
            }
        };
        if let Some(k) = ks.iter().find(|k| !(k.is_finite() && **k > 0.0 && **k <= 1.0)) {
            return Err(Error::InvalidArgument(format!(
                "kappa must lie in (0, 1], got {k}"
            )));
        }
        Ok(ks)
    }
}

/// `κ = β / (1 + |Π_V| β)`.
pub fn kappa_from_beta(beta: f64, num_splits: usize) -> f64 {
    beta / (1.0 + num_splits as f64 * beta)
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BipartiteConfig {
    #[serde(default)]
    pub kappas: Kappas,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_loss_tol")]
    pub loss_tol: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for BipartiteConfig {
    fn default() -> Self {
        Self {
            kappas: Kappas::Default,
            max_iters: default_max_iters(),
            loss_tol: default_loss_tol(),
            restarts: default_restarts(),
            seed: 0,
        }
    }
}

impl BipartiteConfig {
    pub fn with_kappa(kappa: f64) -> Self {
        Self {
            kappas: Kappas::Shared(kappa),
            ..Self::default()
        }
    }
}

/// Entries uniform on (0,1), rows normalized.
pub fn random_encoder(spec: &SourceSpec, seed: u64) -> Encoder {
    let nz = spec.z_cardinality();
    let mut r = rng::rng(seed);
    let mut rows: Vec<f64> = (0..spec.joint_size() * nz)
        .map(|_| r.gen::<f64>())
        .collect();
    for row in rows.chunks_mut(nz) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        } else {
            row.iter_mut().for_each(|v| *v = 1.0 / nz as f64);
        }
    }
    Encoder::from_rows_unchecked(spec.clone(), rows)
}

struct Side {
    /// Projection of each support point onto this side.
    index: Vec<usize>,
    size: usize,
    ln_p: Vec<f64>,
    p: Vec<f64>,
}

struct Split {
    kappa: f64,
    s: Side,
    c: Side,
}

/// A joint distribution preprocessed for repeated iteration. Only realizations
/// with positive mass enter the computation; rows off the support are set to
/// the current `p(z)`, which does not affect any quantity of the objective.
pub struct BipartiteSolver {
    spec: SourceSpec,
    kappas: Vec<f64>,
    support: Vec<usize>,
    px: Vec<f64>,
    splits: Vec<Split>,
}

struct Stats {
    pz: Vec<f64>,
    /// `p(x_S, z)` and `p(x_{S^c}, z)` per split.
    sides: Vec<(Vec<f64>, Vec<f64>)>,
}

const LN2: f64 = std::f64::consts::LN_2;

/// `Σ p(a,z) ln[p(a,z) / (p(a) p(z))]` in nats.
fn side_mi(paz: &[f64], pa: &[f64], pz: &[f64]) -> f64 {
    let nz = pz.len();
    let mut acc = 0.0;
    for (a, row) in paz.chunks(nz).enumerate() {
        for (z, &p) in row.iter().enumerate() {
            if p > 0.0 {
                acc += p * (p / (pa[a] * pz[z])).ln();
            }
        }
    }
    acc
}

impl BipartiteSolver {
    pub fn new(joint: &JointDist, kappas: &Kappas) -> Result<Self> {
        let spec = joint.spec().clone();
        let v = spec.num_sources();
        let kvals = kappas.resolve(v)?;
        let support = joint.support();
        let px: Vec<f64> = support.iter().map(|&x| joint.probs()[x]).collect();
        let dims = spec.cardinalities();
        let side = |axes: &[usize]| {
            let map = axis_map(dims, axes);
            let size: usize = axes.iter().map(|&a| dims[a]).product();
            let mut p = vec![0.0; size];
            for (x, &m) in joint.probs().iter().zip(&map) {
                p[m] += x;
            }
            Side {
                index: support.iter().map(|&x| map[x]).collect(),
                size,
                ln_p: p.iter().map(|v| v.ln()).collect(),
                p,
            }
        };
        let splits = enumerate_bipartitions(v)?
            .iter()
            .zip(&kvals)
            .map(|(b, &kappa)| Split {
                kappa,
                s: side(b.s()),
                c: side(b.complement()),
            })
            .collect();
        Ok(Self {
            spec,
            kappas: kvals,
            support,
            px,
            splits,
        })
    }

    pub fn kappas(&self) -> &[f64] {
        &self.kappas
    }

    fn stats(&self, enc: &[f64], nz: usize) -> Stats {
        let mut pz = vec![0.0; nz];
        let mut sides: Vec<(Vec<f64>, Vec<f64>)> = self
            .splits
            .iter()
            .map(|sp| (vec![0.0; sp.s.size * nz], vec![0.0; sp.c.size * nz]))
            .collect();
        for (k, (&x, &p)) in self.support.iter().zip(&self.px).enumerate() {
            let row = &enc[x * nz..(x + 1) * nz];
            for (z, &e) in row.iter().enumerate() {
                pz[z] += p * e;
            }
            for (sp, (ps, pc)) in self.splits.iter().zip(sides.iter_mut()) {
                let (si, ci) = (sp.s.index[k] * nz, sp.c.index[k] * nz);
                for (z, &e) in row.iter().enumerate() {
                    ps[si + z] += p * e;
                    pc[ci + z] += p * e;
                }
            }
        }
        Stats { pz, sides }
    }

    /// Objective in bits from precomputed marginals.
    fn loss(&self, enc: &[f64], st: &Stats) -> f64 {
        let nz = st.pz.len();
        let mut mi = 0.0;
        for (&x, &p) in self.support.iter().zip(&self.px) {
            let row = &enc[x * nz..(x + 1) * nz];
            for (z, &e) in row.iter().enumerate() {
                if e > 0.0 {
                    mi += p * e * (e / st.pz[z]).ln();
                }
            }
        }
        let mut parts = 0.0;
        for (sp, (ps, pc)) in self.splits.iter().zip(&st.sides) {
            parts += sp.kappa * (side_mi(ps, &sp.s.p, &st.pz) + side_mi(pc, &sp.c.p, &st.pz));
        }
        (mi - parts) / LN2
    }

    /// The closed-form minimizer of the convexified objective.
    fn tilt(&self, st: &Stats) -> Vec<f64> {
        let nz = st.pz.len();
        let ln_pz: Vec<f64> = st.pz.iter().map(|v| v.ln()).collect();
        // κ·ln[p(a,z) / (p(a) p(z))]; a dead z contributes nothing here
        let ratio = |paz: &[f64], side: &Side, kappa: f64| -> Vec<f64> {
            let mut out = vec![0.0; paz.len()];
            for a in 0..side.size {
                for z in 0..nz {
                    if st.pz[z] > 0.0 {
                        out[a * nz + z] = kappa * (paz[a * nz + z].ln() - ln_pz[z] - side.ln_p[a]);
                    }
                }
            }
            out
        };
        let tables: Vec<(Vec<f64>, Vec<f64>)> = self
            .splits
            .iter()
            .zip(&st.sides)
            .map(|(sp, (ps, pc))| (ratio(ps, &sp.s, sp.kappa), ratio(pc, &sp.c, sp.kappa)))
            .collect();

        let mut out = Vec::with_capacity(self.spec.joint_size() * nz);
        for _ in 0..self.spec.joint_size() {
            out.extend_from_slice(&st.pz);
        }
        let mut logit = vec![0.0; nz];
        for (k, &x) in self.support.iter().enumerate() {
            logit.copy_from_slice(&ln_pz);
            for (sp, (ts, tc)) in self.splits.iter().zip(&tables) {
                let (si, ci) = (sp.s.index[k] * nz, sp.c.index[k] * nz);
                for z in 0..nz {
                    logit[z] += ts[si + z] + tc[ci + z];
                }
            }
            let m = logit.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                continue;
            }
            let row = &mut out[x * nz..(x + 1) * nz];
            let mut s = 0.0;
            for (r, &l) in row.iter_mut().zip(&logit) {
                *r = (l - m).exp();
                s += *r;
            }
            row.iter_mut().for_each(|r| *r /= s);
        }
        out
    }

    pub fn objective(&self, enc: &Encoder) -> Result<f64> {
        check_same_sources(&self.spec, enc.spec())?;
        let st = self.stats(enc.rows(), enc.spec().z_cardinality());
        Ok(self.loss(enc.rows(), &st))
    }

    pub fn step(&self, enc: &Encoder) -> Result<Encoder> {
        check_same_sources(&self.spec, enc.spec())?;
        let rows = self.tilt(&self.stats(enc.rows(), enc.spec().z_cardinality()));
        Ok(Encoder::from_rows_unchecked(enc.spec().clone(), rows))
    }

    /// One restart from `random_encoder(spec, seed)`.
    pub fn run(&self, seed: u64, max_iters: usize, loss_tol: f64) -> Restart {
        let start = Instant::now();
        let init = random_encoder(&self.spec, seed);
        let (encoder, trace) = self.iterate(init.rows().to_vec(), max_iters, loss_tol);
        Restart {
            seed,
            encoder,
            trace,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        }
    }

    /// Runs the iteration from an arbitrary starting encoder.
    pub fn run_from(&self, init: &Encoder, max_iters: usize, loss_tol: f64) -> Result<(Encoder, SolveTrace)> {
        if init.spec() != &self.spec {
            return Err(Error::InvalidArgument(
                "initial encoder does not match the problem spec".into(),
            ));
        }
        Ok(self.iterate(init.rows().to_vec(), max_iters, loss_tol))
    }

    fn iterate(&self, mut enc: Vec<f64>, max_iters: usize, loss_tol: f64) -> (Encoder, SolveTrace) {
        let nz = self.spec.z_cardinality();
        let mut st = self.stats(&enc, nz);
        let mut losses = vec![self.loss(&enc, &st)];
        let mut dead = vec![0usize; nz];
        let mut terminated_by = TerminatedBy::MaxIters;
        let mut iterations = 0;
        while iterations < max_iters {
            iterations += 1;
            enc = self.tilt(&st);
            st = self.stats(&enc, nz);
            let mut loss = self.loss(&enc, &st);

            for (d, &p) in dead.iter_mut().zip(&st.pz) {
                *d = if p > 0.0 { 0 } else { *d + 1 };
            }
            if dead.iter().any(|&d| d >= DEAD_PATIENCE) {
                dead.iter_mut().for_each(|d| *d = 0);
                let norm = 1.0 + nz as f64 * RESEED_MASS;
                let candidate: Vec<f64> = enc.iter().map(|e| (e + RESEED_MASS) / norm).collect();
                let cst = self.stats(&candidate, nz);
                let closs = self.loss(&candidate, &cst);
                // keep the reseed only when it does not cost objective
                if closs <= loss {
                    enc = candidate;
                    st = cst;
                    loss = closs;
                }
            }

            let prev = *losses.last().unwrap();
            losses.push(loss);
            if (prev - loss).abs() < loss_tol {
                terminated_by = TerminatedBy::Tolerance;
                break;
            }
        }
        (
            Encoder::from_rows_unchecked(self.spec.clone(), enc),
            SolveTrace {
                losses,
                iterations,
                terminated_by,
            },
        )
    }
}

/// Outcome of a single restart.
#[derive(Debug, Clone)]
pub struct Restart {
    pub seed: u64,
    pub encoder: Encoder,
    pub trace: SolveTrace,
    pub wall_ms: f64,
}

impl Restart {
    pub fn record(&self, joint: &JointDist, knob: f64) -> Result<RunRecord> {
        let r = info_report(joint, &self.encoder)?;
        Ok(RunRecord {
            seed: self.seed,
            knob,
            final_loss: self.trace.final_loss(),
            iterations: self.trace.iterations,
            terminated_by: self.trace.terminated_by,
            mi_z_xv: r.mi_z_xv,
            cond_mi_sum: r.cond_mi_sum,
            wall_ms: self.wall_ms,
            param_count: None,
        })
    }
}

/// One DCA iteration from `enc_k`.
pub fn dca_step(joint: &JointDist, enc_k: &Encoder, cfg: &BipartiteConfig) -> Result<Encoder> {
    BipartiteSolver::new(joint, &cfg.kappas)?.step(enc_k)
}

/// `I(X^V;Z) - Σ_S κ_S [I(X_S;Z) + I(X_{S^c};Z)]` in bits.
pub fn objective(joint: &JointDist, enc: &Encoder, cfg: &BipartiteConfig) -> Result<f64> {
    BipartiteSolver::new(joint, &cfg.kappas)?.objective(enc)
}

/// Number of free encoder entries, `|Z| ∏|X_i|`.
pub fn param_count(spec: &SourceSpec) -> usize {
    spec.z_cardinality() * spec.joint_size()
}

#[derive(Debug, Clone)]
pub struct BipartiteSolution {
    pub encoder: Encoder,
    pub trace: SolveTrace,
    pub seed: u64,
    /// Every restart in run order.
    pub records: Vec<RunRecord>,
    pub best: usize,
}

/// Seed of restart `r` under `base`.
pub fn restart_seed(base: u64, r: usize) -> u64 {
    rng::derive_seed(base, 0, r as u64)
}

/// All restarts; the winner has the lowest final loss (ties: fewer iterations,
/// then lower seed).
pub fn solve(joint: &JointDist, cfg: &BipartiteConfig) -> Result<BipartiteSolution> {
    if cfg.restarts == 0 {
        return Err(Error::InvalidArgument("restarts must be >= 1".into()));
    }
    let solver = BipartiteSolver::new(joint, &cfg.kappas)?;
    let knob = solver.kappas()[0];
    let mut runs = Vec::with_capacity(cfg.restarts);
    let mut records = Vec::with_capacity(cfg.restarts);
    for r in 0..cfg.restarts {
        let run = solver.run(restart_seed(cfg.seed, r), cfg.max_iters, cfg.loss_tol);
        records.push(run.record(joint, knob)?);
        runs.push(run);
    }
    let best = best_index(&records).expect("at least one restart");
    let win = runs.swap_remove(best);
    Ok(BipartiteSolution {
        encoder: win.encoder,
        trace: win.trace,
        seed: win.seed,
        records,
        best,
    })
}
