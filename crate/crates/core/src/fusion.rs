//! Common-randomness fusion of exponential-family experts.
//!
//! Every fusion here is the projection
//!
//! ```text
//! log P(z|x^V) = log P_0(z) + Σ_j w_j [log P_j(z) - log P_0(z)] + const
//! ```
//!
//! over a weighted list of experts. The bipartite form lists both sides of
//! every split with weight `κ_S`; the variational form lists every source
//! with the shared weight `κ_[V]`. The reference `P_0` is `N(0, I)` for
//! Gaussian experts and uniform for categorical ones. Values are in nats.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;
const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianFile", into = "GaussianFile")]
pub struct GaussianExpert {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    precision: DMatrix<f64>,
    log_det: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianFile {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl TryFrom<GaussianFile> for GaussianExpert {
    type Error = Error;
    fn try_from(f: GaussianFile) -> Result<Self> {
        GaussianExpert::new(f.mean, f.cov)
    }
}

impl From<GaussianExpert> for GaussianFile {
    fn from(g: GaussianExpert) -> Self {
        GaussianFile {
            mean: g.mean.iter().copied().collect(),
            cov: g.cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }
}

/// Inverse and log-determinant of an SPD matrix, `None` if the Cholesky
/// factorization fails.
fn spd_inverse(m: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    let chol = m.clone().cholesky()?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let inv = chol.inverse();
    Some(((&inv + inv.transpose()) * 0.5, log_det))
}

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let d = m.nrows();
    for i in 0..d {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL {
                return Err(Error::InvalidArgument(format!(
                    "{what} is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

impl GaussianExpert {
    pub fn new(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::InvalidArgument("mean must be nonempty".into()));
        }
        if cov.len() != d || cov.iter().any(|r| r.len() != d) {
            return Err(Error::ShapeMismatch(format!("covariance must be {d} x {d}")));
        }
        if mean.iter().chain(cov.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite Gaussian parameter".into()));
        }
        let cov = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
        Self::from_matrices(DVector::from_vec(mean), cov)
    }

    fn from_matrices(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&cov, "covariance")?;
        let (precision, log_det) = spd_inverse(&cov).ok_or_else(|| {
            Error::InvalidArgument("covariance is not positive definite".into())
        })?;
        Ok(Self {
            mean,
            cov,
            precision,
            log_det,
        })
    }

    /// `N(0, I)` in `d` dimensions.
    pub fn standard(d: usize) -> Self {
        Self {
            mean: DVector::zeros(d),
            cov: DMatrix::identity(d, d),
            precision: DMatrix::identity(d, d),
            log_det: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// `[Σ⁻¹μ, vec(Σ⁻¹)]` with the precision flattened row-major.
    pub fn to_natural(&self) -> NaturalParamExpert {
        let h = &self.precision * &self.mean;
        let mut eta: Vec<f64> = h.iter().copied().collect();
        eta.extend(self.precision.transpose().iter().copied());
        NaturalParamExpert {
            eta,
            family: Family::Gaussian { dim: self.dim() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CategoricalFile", into = "CategoricalFile")]
pub struct CategoricalExpert {
    log_probs: Vec<f64>,
}

/// JSON has no `-∞`, so zero-probability entries are written as `null`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CategoricalFile {
    log_probs: Vec<Option<f64>>,
}

impl TryFrom<CategoricalFile> for CategoricalExpert {
    type Error = Error;
    fn try_from(f: CategoricalFile) -> Result<Self> {
        CategoricalExpert::new(f.log_probs.into_iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)).collect())
    }
}

impl From<CategoricalExpert> for CategoricalFile {
    fn from(c: CategoricalExpert) -> Self {
        CategoricalFile {
            log_probs: c.log_probs.into_iter().map(|v| v.is_finite().then_some(v)).collect(),
        }
    }
}

impl CategoricalExpert {
    pub fn new(log_probs: Vec<f64>) -> Result<Self> {
        if log_probs.is_empty() {
            return Err(Error::InvalidArgument("log_probs must be nonempty".into()));
        }
        if let Some(v) = log_probs.iter().find(|v| v.is_nan() || **v == f64::INFINITY) {
            return Err(Error::InvalidDistribution(format!("log probability {v}")));
        }
        let s: f64 = log_probs.iter().map(|v| v.exp()).sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {s}"
            )));
        }
        Ok(Self { log_probs })
    }

    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        Self::new(probs.iter().map(|p| p.ln()).collect())
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            log_probs: vec![-(n as f64).ln(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|v| v.exp()).collect()
    }

    /// `η_z = log q_z - log q_last` for every `z` but the last. Needs a
    /// positive last entry.
    pub fn to_natural(&self) -> Result<NaturalParamExpert> {
        let last = *self.log_probs.last().expect("nonempty");
        if !last.is_finite() {
            return Err(Error::DomainViolation(
                "reference category has zero probability".into(),
            ));
        }
        let eta = self.log_probs[..self.len() - 1].iter().map(|v| v - last).collect();
        Ok(NaturalParamExpert {
            eta,
            family: Family::Categorical { size: self.len() },
        })
    }
}

/// Shifts by the maximum first so equal logits give exactly `-ln n`.
fn softmax_log(logits: &[f64]) -> Result<Vec<f64>> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::InvalidDistribution(
            "every category has zero fused probability".into(),
        ));
    }
    let shifted: Vec<f64> = logits.iter().map(|l| l - m).collect();
    let ln_z = shifted.iter().map(|x| x.exp()).sum::<f64>().ln();
    Ok(shifted.into_iter().map(|x| x - ln_z).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Family {
    Gaussian { dim: usize },
    /// Natural parameters relative to the last category.
    Categorical { size: usize },
    /// Rate `λ`, natural parameter `-λ`.
    Exponential,
}

impl Family {
    pub fn eta_len(&self) -> usize {
        match *self {
            Family::Gaussian { dim } => dim + dim * dim,
            Family::Categorical { size } => size - 1,
            Family::Exponential => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalParamExpert {
    pub eta: Vec<f64>,
    pub family: Family,
}

impl NaturalParamExpert {
    pub fn new(eta: Vec<f64>, family: Family) -> Result<Self> {
        let e = Self { eta, family };
        e.check_domain()?;
        Ok(e)
    }

    pub fn exponential(rate: f64) -> Result<Self> {
        Self::new(vec![-rate], Family::Exponential)
    }

    pub fn check_domain(&self) -> Result<()> {
        if self.eta.len() != self.family.eta_len() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} needs {} natural parameters, got {}",
                self.family,
                self.family.eta_len(),
                self.eta.len()
            )));
        }
        if self.eta.iter().any(|v| !v.is_finite()) {
            return Err(Error::DomainViolation("non-finite natural parameter".into()));
        }
        match self.family {
            Family::Gaussian { .. } => {
                self.to_gaussian()?;
            }
            Family::Categorical { size } => {
                if size < 2 {
                    return Err(Error::DomainViolation("categorical needs >= 2 categories".into()));
                }
            }
            Family::Exponential => {
                if self.eta[0] >= 0.0 {
                    return Err(Error::DomainViolation(format!(
                        "exponential natural parameter {} must be < 0",
                        self.eta[0]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_gaussian(&self) -> Result<GaussianExpert> {
        let Family::Gaussian { dim } = self.family else {
            return Err(Error::InvalidArgument(format!("{:?} is not Gaussian", self.family)));
        };
        let h = DVector::from_row_slice(&self.eta[..dim]);
        let prec = DMatrix::from_row_slice(dim, dim, &self.eta[dim..]);
        check_symmetric(&prec, "precision").map_err(|e| Error::DomainViolation(e.to_string()))?;
        let (cov, _) = spd_inverse(&prec)
            .ok_or_else(|| Error::DomainViolation("precision is not positive definite".into()))?;
        let mean = &cov * h;
        GaussianExpert::from_matrices(mean, cov).map_err(|e| Error::DomainViolation(e.to_string()))
    }

    pub fn to_categorical(&self) -> Result<CategoricalExpert> {
        let Family::Categorical { .. } = self.family else {
            return Err(Error::InvalidArgument(format!("{:?} is not categorical", self.family)));
        };
        let mut logits = self.eta.clone();
        logits.push(0.0);
        Ok(CategoricalExpert {
            log_probs: softmax_log(&logits)?,
        })
    }
}

/// A family member that fuses by weighted projection against its reference.
pub trait Expert: Sized {
    fn reference_like(&self) -> Self;
    /// Projection of the weighted list; all experts share one shape.
    fn fuse_weighted(experts: &[(f64, &Self)]) -> Result<Self>;
    /// `D(self ‖ reference)`.
    fn kl_to_reference(&self) -> Result<f64>;
    /// `E_self[log expert(Z) - log reference(Z)]`.
    fn expected_log_ratio(&self, expert: &Self) -> Result<f64>;
}

fn check_dims<E>(experts: &[(f64, &E)], dim: impl Fn(&E) -> usize, what: &str) -> Result<usize> {
    let d = experts
        .first()
        .map(|(_, e)| dim(e))
        .ok_or_else(|| Error::InvalidArgument("no experts to fuse".into()))?;
    if let Some((_, e)) = experts.iter().find(|(_, e)| dim(e) != d) {
        return Err(Error::ShapeMismatch(format!(
            "{what} {} differs from {d}",
            dim(e)
        )));
    }
    if let Some((w, _)) = experts.iter().find(|(w, _)| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::InvalidArgument(format!("kappa must be > 0, got {w}")));
    }
    Ok(d)
}

impl Expert for GaussianExpert {
    fn reference_like(&self) -> Self {
        Self::standard(self.dim())
    }

    fn fuse_weighted(experts: &[(f64, &Self)]) -> Result<Self> {
        let d = check_dims(experts, Self::dim, "dimension")?;
        let eye = DMatrix::<f64>::identity(d, d);
        let mut prec = eye.clone();
        let mut h = DVector::zeros(d);
        for (w, e) in experts {
            prec += (&e.precision - &eye) * *w;
            h += &e.precision * &e.mean * *w;
        }
        let prec = (&prec + prec.transpose()) * 0.5;
        let kappa_scale: f64 = experts.iter().map(|(w, _)| w).sum();
        let chol = prec
            .cholesky()
            .ok_or(Error::FusionDegenerate { kappa_scale })?;
        let mean = chol.solve(&h);
        let cov = chol.inverse();
        let cov = (&cov + cov.transpose()) * 0.5;
        Self::from_matrices(mean, cov).map_err(|_| Error::FusionDegenerate { kappa_scale })
    }

    fn kl_to_reference(&self) -> Result<f64> {
        Ok(gaussian_kl_to_standard(self))
    }

    /// `E_N(μ,Σ)[log N(z; μ_j, Σ_j) - log N(z; 0, I)]`.
    fn expected_log_ratio(&self, e: &Self) -> Result<f64> {
        if e.dim() != self.dim() {
            return Err(Error::ShapeMismatch("Gaussian dimensions differ".into()));
        }
        let diff = &self.mean - &e.mean;
        let quad = (diff.transpose() * &e.precision * &diff)[(0, 0)];
        let tr = (&e.precision * &self.cov).trace();
        let expert = -0.5 * (e.log_det + tr + quad);
        let reference = -0.5 * (self.cov.trace() + self.mean.norm_squared());
        Ok(expert - reference)
    }
}

impl Expert for CategoricalExpert {
    fn reference_like(&self) -> Self {
        Self::uniform(self.len())
    }

    fn fuse_weighted(experts: &[(f64, &Self)]) -> Result<Self> {
        let n = check_dims(experts, Self::len, "category count")?;
        let mut logits = vec![0.0; n];
        for (w, e) in experts {
            for (l, v) in logits.iter_mut().zip(&e.log_probs) {
                *l += w * v;
            }
        }
        Ok(Self {
            log_probs: softmax_log(&logits)?,
        })
    }

    fn kl_to_reference(&self) -> Result<f64> {
        let ln_n = (self.len() as f64).ln();
        Ok(self
            .log_probs
            .iter()
            .filter(|l| l.is_finite())
            .map(|l| l.exp() * (l + ln_n))
            .sum::<f64>()
            .max(0.0))
    }

    fn expected_log_ratio(&self, e: &Self) -> Result<f64> {
        if e.len() != self.len() {
            return Err(Error::ShapeMismatch("category counts differ".into()));
        }
        let ln_n = (self.len() as f64).ln();
        let mut s = 0.0;
        for (&a, &b) in self.log_probs.iter().zip(&e.log_probs) {
            if a.is_finite() {
                if !b.is_finite() {
                    return Ok(f64::NEG_INFINITY);
                }
                s += a.exp() * (b + ln_n);
            }
        }
        Ok(s)
    }
}

fn pair_list<'a, E>(pairs: &'a [(E, E)], kappas: &[f64]) -> Result<Vec<(f64, &'a E)>> {
    if pairs.len() != kappas.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} expert pairs but {} kappas",
            pairs.len(),
            kappas.len()
        )));
    }
    Ok(pairs
        .iter()
        .zip(kappas)
        .flat_map(|((s, c), &k)| [(k, s), (k, c)])
        .collect())
}

/// Precision-weighted product of experts against `N(0, I)`:
/// `Σ_eq⁻¹ = I + Σ κ_S (Σ_S⁻¹ + Σ_Sᶜ⁻¹ - 2I)`,
/// `μ_eq = Σ_eq Σ κ_S (Σ_S⁻¹μ_S + Σ_Sᶜ⁻¹μ_Sᶜ)`.
pub fn gaussian_fuse(pairs: &[(GaussianExpert, GaussianExpert)], kappas: &[f64]) -> Result<GaussianExpert> {
    GaussianExpert::fuse_weighted(&pair_list(pairs, kappas)?)
}

/// `Softmax(Σ κ_S [log q_S + log q_Sᶜ])`.
pub fn categorical_fuse(
    pairs: &[(CategoricalExpert, CategoricalExpert)],
    kappas: &[f64],
) -> Result<CategoricalExpert> {
    CategoricalExpert::fuse_weighted(&pair_list(pairs, kappas)?)
}

/// `η_eq = η_0 + Σ κ_S [η_S + η_Sᶜ - 2η_0]`, checked against the family domain.
pub fn expfam_fuse(
    pairs: &[(NaturalParamExpert, NaturalParamExpert)],
    prior: &NaturalParamExpert,
    kappas: &[f64],
) -> Result<NaturalParamExpert> {
    let list = pair_list(pairs, kappas)?;
    let mut eta = prior.eta.clone();
    for (k, e) in list {
        if e.family != prior.family || e.eta.len() != eta.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot fuse {:?} with {:?}",
                e.family, prior.family
            )));
        }
        if !(k.is_finite() && k > 0.0) {
            return Err(Error::InvalidArgument(format!("kappa must be > 0, got {k}")));
        }
        for ((o, a), b) in eta.iter_mut().zip(&e.eta).zip(&prior.eta) {
            *o += k * (a - b);
        }
    }
    let out = NaturalParamExpert {
        eta,
        family: prior.family,
    };
    out.check_domain()?;
    Ok(out)
}

/// `D(N(μ, Σ) ‖ N(0, I)) = ½[tr Σ + μᵀμ - d - log|Σ|]` in nats.
pub fn gaussian_kl_to_standard(e: &GaussianExpert) -> f64 {
    let d = e.dim() as f64;
    (0.5 * (e.cov.trace() + e.mean.norm_squared() - d - e.log_det)).max(0.0)
}

/// Sample average of
/// `D(P(Z|x) ‖ P_0) - Σ_j w_j E_{P(Z|x)}[log P_j(Z) - log P_0(Z)]`
/// where `P(Z|x)` is the projection of that sample's weighted experts.
pub fn empirical_loss<E: Expert>(samples: &[Vec<(f64, E)>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let list: Vec<(f64, &E)> = s.iter().map(|(w, e)| (*w, e)).collect();
        let post = E::fuse_weighted(&list)?;
        let mut term = post.kl_to_reference()?;
        for (w, e) in &list {
            term -= w * post.expected_log_ratio(e)?;
        }
        total += term;
    }
    Ok(total / samples.len() as f64)
}

/// The bipartite configuration: per sample one expert pair per split.
pub fn bipartite_empirical_loss<E: Expert + Clone>(samples: &[Vec<(E, E)>], kappas: &[f64]) -> Result<f64> {
    let lists = samples
        .iter()
        .map(|pairs| {
            Ok(pair_list(pairs, kappas)?
                .into_iter()
                .map(|(k, e)| (k, e.clone()))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    empirical_loss(&lists)
}

/// The variational configuration: per sample one expert per source, all
/// weighted by `kappa`.
pub fn variational_empirical_loss<E: Expert + Clone>(samples: &[Vec<E>], kappa: f64) -> Result<f64> {
    let lists: Vec<Vec<(f64, E)>> = samples
        .iter()
        .map(|es| es.iter().map(|e| (kappa, e.clone())).collect())
        .collect();
    empirical_loss(&lists)
}

/// `κ_S = 1/(2|Π|)` for every split, the product-of-experts weighting.
pub fn poe_kappas(num_pairs: usize) -> Vec<f64> {
    vec![0.5 / num_pairs as f64; num_pairs]
}

/// A fusion job as read by the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum FusionRequest {
    Gaussian {
        pairs: Vec<(GaussianExpert, GaussianExpert)>,
        #[serde(default)]
        kappas: Option<Vec<f64>>,
    },
    Categorical {
        pairs: Vec<(CategoricalExpert, CategoricalExpert)>,
        #[serde(default)]
        kappas: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FusionResult {
    Gaussian {
        kappas: Vec<f64>,
        fused: GaussianExpert,
        kl_to_prior: f64,
    },
    Categorical {
        kappas: Vec<f64>,
        fused: CategoricalExpert,
        kl_to_prior: f64,
    },
}

impl FusionRequest {
    /// Missing kappas default to the product-of-experts weighting.
    pub fn resolved(&self) -> Self {
        match self {
            FusionRequest::Gaussian { pairs, kappas } => FusionRequest::Gaussian {
                kappas: Some(kappas.clone().unwrap_or_else(|| poe_kappas(pairs.len()))),
                pairs: pairs.clone(),
            },
            FusionRequest::Categorical { pairs, kappas } => FusionRequest::Categorical {
                kappas: Some(kappas.clone().unwrap_or_else(|| poe_kappas(pairs.len()))),
                pairs: pairs.clone(),
            },
        }
    }

    pub fn run(&self) -> Result<FusionResult> {
        match self.resolved() {
            FusionRequest::Gaussian { pairs, kappas } => {
                let kappas = kappas.expect("resolved");
                let fused = gaussian_fuse(&pairs, &kappas)?;
                Ok(FusionResult::Gaussian {
                    kl_to_prior: gaussian_kl_to_standard(&fused),
                    fused,
                    kappas,
                })
            }
            FusionRequest::Categorical { pairs, kappas } => {
                let kappas = kappas.expect("resolved");
                let fused = categorical_fuse(&pairs, &kappas)?;
                Ok(FusionResult::Categorical {
                    kl_to_prior: fused.kl_to_reference()?,
                    fused,
                    kappas,
                })
            }
        }
    }
}
