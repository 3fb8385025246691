//! Dense discrete probability containers.
//!
//! Layout convention used everywhere in this crate: tensors are row-major with
//! source 1 as the slowest-varying axis. When a latent axis `Z` is present it is
//! always the last (fastest) axis, so an [`Encoder`] row for the joint
//! realization `x` occupies `rows[x * |Z| .. (x + 1) * |Z|]`.
//!
//! Source indices are zero-based in code and one-based when displayed.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest dense joint tensor we agree to build.
pub const MAX_TENSOR_ENTRIES: u128 = 100_000_000;

pub(crate) fn sum_tolerance(n: usize) -> f64 {
    1e-12f64.max(n as f64 * f64::EPSILON)
}

/// Alphabet sizes of the sources and of the latent variable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpec {
    cardinalities: Vec<usize>,
    z_cardinality: usize,
}

impl SourceSpec {
    pub fn new(cardinalities: Vec<usize>, z_cardinality: usize) -> Result<Self> {
        if cardinalities.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 sources, got {}",
                cardinalities.len()
            )));
        }
        if let Some((i, c)) = cardinalities.iter().enumerate().find(|(_, &c)| c < 2) {
            return Err(Error::InvalidSpec(format!(
                "source {} has cardinality {c}, need >= 2",
                i + 1
            )));
        }
        if z_cardinality < 1 {
            return Err(Error::InvalidSpec("z_cardinality must be >= 1".into()));
        }
        let entries = cardinalities
            .iter()
            .try_fold(1u128, |acc, &c| acc.checked_mul(c as u128))
            .unwrap_or(u128::MAX);
        if entries > MAX_TENSOR_ENTRIES {
            return Err(Error::TooLarge {
                entries,
                limit: MAX_TENSOR_ENTRIES,
            });
        }
        Ok(Self {
            cardinalities,
            z_cardinality,
        })
    }

    pub fn num_sources(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    pub fn z_cardinality(&self) -> usize {
        self.z_cardinality
    }

    /// Same sources, different latent alphabet.
    pub fn with_z(&self, z_cardinality: usize) -> Result<Self> {
        Self::new(self.cardinalities.clone(), z_cardinality)
    }

    /// Number of joint realizations `∏|X_i|`.
    pub fn joint_size(&self) -> usize {
        self.cardinalities.iter().product()
    }

    pub fn strides(&self) -> Vec<usize> {
        strides(&self.cardinalities)
    }

    /// Decompose a flat joint index into per-source symbols.
    pub fn unflatten(&self, mut flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.cardinalities.len()];
        for (slot, &c) in out.iter_mut().zip(&self.cardinalities).rev() {
            *slot = flat % c;
            flat /= c;
        }
        out
    }

    pub fn flatten(&self, symbols: &[usize]) -> Result<usize> {
        if symbols.len() != self.cardinalities.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} symbols, got {}",
                self.cardinalities.len(),
                symbols.len()
            )));
        }
        let mut flat = 0;
        for (i, (&s, &c)) in symbols.iter().zip(&self.cardinalities).enumerate() {
            if s >= c {
                return Err(Error::InvalidArgument(format!(
                    "symbol {s} out of range for source {} (cardinality {c})",
                    i + 1
                )));
            }
            flat = flat * c + s;
        }
        Ok(flat)
    }
}

pub(crate) fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// For every flat index of a tensor with shape `dims`, the flat index of its
/// projection onto `keep` (axes listed in the order they should appear).
pub(crate) fn axis_map(dims: &[usize], keep: &[usize]) -> Vec<usize> {
    let n: usize = dims.iter().product();
    let kept_dims: Vec<usize> = keep.iter().map(|&a| dims[a]).collect();
    let kept_strides = strides(&kept_dims);
    // stride contributed by each full axis to the kept flat index
    let mut contrib = vec![0usize; dims.len()];
    for (k, &a) in keep.iter().enumerate() {
        contrib[a] = kept_strides[k];
    }
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; dims.len()];
    let mut cur = 0usize;
    for _ in 0..n {
        out.push(cur);
        for ax in (0..dims.len()).rev() {
            idx[ax] += 1;
            cur += contrib[ax];
            if idx[ax] < dims[ax] {
                break;
            }
            cur -= contrib[ax] * dims[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// A dense nonnegative tensor with named shape; used for marginals and for
/// `P(X^V, Z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl ProbTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} imply {n} entries, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sum out every axis not in `keep`. Kept axes appear in ascending order.
    pub fn marginal(&self, keep: &[usize]) -> Result<ProbTensor> {
        if keep.is_empty() {
            return Err(Error::InvalidArgument("keep set is empty".into()));
        }
        let mut axes = keep.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&a| a >= self.dims.len()) {
            return Err(Error::InvalidArgument(format!(
                "axis {bad} out of range for rank {}",
                self.dims.len()
            )));
        }
        let kept_dims: Vec<usize> = axes.iter().map(|&a| self.dims[a]).collect();
        let mut out = vec![0.0; kept_dims.iter().product()];
        for (v, k) in self.data.iter().zip(axis_map(&self.dims, &axes)) {
            out[k] += v;
        }
        Ok(ProbTensor {
            dims: kept_dims,
            data: out,
        })
    }
}

fn check_simplex(values: &[f64], what: &str) -> Result<()> {
    if let Some((i, v)) = values
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v < 0.0)
    {
        return Err(Error::InvalidDistribution(format!(
            "{what}: entry {i} is {v}"
        )));
    }
    let s: f64 = values.iter().sum();
    if (s - 1.0).abs() > sum_tolerance(values.len()) {
        return Err(Error::InvalidDistribution(format!(
            "{what}: entries sum to {s}"
        )));
    }
    Ok(())
}

/// Joint distribution `P(X^V)` over finite alphabets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "JointDistFile", into = "JointDistFile")]
pub struct JointDist {
    spec: SourceSpec,
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct JointDistFile {
    cardinalities: Vec<usize>,
    z_cardinality: usize,
    probs: Vec<f64>,
}

impl TryFrom<JointDistFile> for JointDist {
    type Error = Error;
    fn try_from(f: JointDistFile) -> Result<Self> {
        JointDist::new(SourceSpec::new(f.cardinalities, f.z_cardinality)?, f.probs)
    }
}

impl From<JointDist> for JointDistFile {
    fn from(j: JointDist) -> Self {
        JointDistFile {
            cardinalities: j.spec.cardinalities,
            z_cardinality: j.spec.z_cardinality,
            probs: j.probs,
        }
    }
}

impl JointDist {
    pub fn new(spec: SourceSpec, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != spec.joint_size() {
            return Err(Error::ShapeMismatch(format!(
                "joint needs {} entries, got {}",
                spec.joint_size(),
                probs.len()
            )));
        }
        check_simplex(&probs, "joint")?;
        Ok(Self { spec, probs })
    }

    pub fn spec(&self) -> &SourceSpec {
        &self.spec
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Same probabilities, different latent cardinality carried in the spec.
    pub fn with_z(&self, z_cardinality: usize) -> Result<Self> {
        Ok(Self {
            spec: self.spec.with_z(z_cardinality)?,
            probs: self.probs.clone(),
        })
    }

    pub fn as_tensor(&self) -> ProbTensor {
        ProbTensor {
            dims: self.spec.cardinalities.clone(),
            data: self.probs.clone(),
        }
    }

    /// Flat indices with positive mass.
    pub fn support(&self) -> Vec<usize> {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: JointDistFile = serde_json::from_str(text)?;
        f.try_into()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check_sources(spec: &SourceSpec, set: &[usize], what: &str) -> Result<Vec<usize>> {
    let mut s = set.to_vec();
    s.sort_unstable();
    s.dedup();
    if s.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} set is empty")));
    }
    if let Some(&bad) = s.iter().find(|&&i| i >= spec.num_sources()) {
        return Err(Error::InvalidArgument(format!(
            "{what} contains source index {bad}, only {} sources",
            spec.num_sources()
        )));
    }
    Ok(s)
}

/// Marginal of the joint over the sources in `keep` (ascending order).
pub fn marginalize(joint: &JointDist, keep: &[usize]) -> Result<ProbTensor> {
    let keep = check_sources(&joint.spec, keep, "keep")?;
    joint.as_tensor().marginal(&keep)
}

/// `P(X_target | X_given)` stored with one simplex row per realization of the
/// conditioning sources.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalTable {
    pub target: Vec<usize>,
    pub given: Vec<usize>,
    pub given_size: usize,
    pub target_size: usize,
    pub rows: Vec<f64>,
    /// Rows whose conditioning realization had zero mass; filled uniformly.
    pub degenerate: Vec<bool>,
}

impl ConditionalTable {
    pub fn row(&self, given_index: usize) -> &[f64] {
        &self.rows[given_index * self.target_size..(given_index + 1) * self.target_size]
    }
}

pub fn conditional_on(
    joint: &JointDist,
    target: &[usize],
    given: &[usize],
) -> Result<ConditionalTable> {
    let target = check_sources(&joint.spec, target, "target")?;
    let given = check_sources(&joint.spec, given, "given")?;
    if target.iter().any(|t| given.contains(t)) {
        return Err(Error::InvalidArgument(
            "target and given sets overlap".into(),
        ));
    }
    let dims = joint.spec.cardinalities();
    let given_size: usize = given.iter().map(|&i| dims[i]).product();
    let target_size: usize = target.iter().map(|&i| dims[i]).product();

    // Marginal laid out as (given..., target...) regardless of axis order.
    let mut pair = vec![0.0; given_size * target_size];
    let gmap = axis_map(dims, &given);
    let tmap = axis_map(dims, &target);
    for (x, &p) in joint.probs.iter().enumerate() {
        pair[gmap[x] * target_size + tmap[x]] += p;
    }

    let mut degenerate = vec![false; given_size];
    for g in 0..given_size {
        let row = &mut pair[g * target_size..(g + 1) * target_size];
        let mass: f64 = row.iter().sum();
        if mass > 0.0 {
            row.iter_mut().for_each(|v| *v /= mass);
        } else {
            row.iter_mut().for_each(|v| *v = 1.0 / target_size as f64);
            degenerate[g] = true;
        }
    }
    Ok(ConditionalTable {
        target,
        given,
        given_size,
        target_size,
        rows: pair,
        degenerate,
    })
}

/// Conditional table `P(Z | X^V)`: one simplex row of length `|Z|` per joint
/// realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EncoderFile", into = "EncoderFile")]
pub struct Encoder {
    spec: SourceSpec,
    rows: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct EncoderFile {
    cardinalities: Vec<usize>,
    z_cardinality: usize,
    rows: Vec<Vec<f64>>,
}

impl TryFrom<EncoderFile> for Encoder {
    type Error = Error;
    fn try_from(f: EncoderFile) -> Result<Self> {
        let spec = SourceSpec::new(f.cardinalities, f.z_cardinality)?;
        if let Some(r) = f.rows.iter().find(|r| r.len() != spec.z_cardinality) {
            return Err(Error::ShapeMismatch(format!(
                "encoder row has {} entries, expected {}",
                r.len(),
                spec.z_cardinality
            )));
        }
        Encoder::new(spec, f.rows.concat())
    }
}

impl From<Encoder> for EncoderFile {
    fn from(e: Encoder) -> Self {
        EncoderFile {
            rows: e
                .rows
                .chunks(e.spec.z_cardinality)
                .map(<[f64]>::to_vec)
                .collect(),
            cardinalities: e.spec.cardinalities,
            z_cardinality: e.spec.z_cardinality,
        }
    }
}

impl Encoder {
    pub fn new(spec: SourceSpec, rows: Vec<f64>) -> Result<Self> {
        let nz = spec.z_cardinality;
        if rows.len() != spec.joint_size() * nz {
            return Err(Error::ShapeMismatch(format!(
                "encoder needs {} entries, got {}",
                spec.joint_size() * nz,
                rows.len()
            )));
        }
        for (x, row) in rows.chunks(nz).enumerate() {
            check_simplex(row, &format!("encoder row {x}"))?;
        }
        Ok(Self { spec, rows })
    }

    /// Skips validation; callers guarantee simplex rows.
    pub(crate) fn from_rows_unchecked(spec: SourceSpec, rows: Vec<f64>) -> Self {
        Self { spec, rows }
    }

    pub fn uniform(spec: &SourceSpec) -> Self {
        let nz = spec.z_cardinality;
        Self {
            rows: vec![1.0 / nz as f64; spec.joint_size() * nz],
            spec: spec.clone(),
        }
    }

    /// Every realization maps to `z0` with probability one.
    pub fn constant(spec: &SourceSpec, z0: usize) -> Result<Self> {
        let nz = spec.z_cardinality;
        if z0 >= nz {
            return Err(Error::InvalidArgument(format!(
                "z0 = {z0} out of range for |Z| = {nz}"
            )));
        }
        let mut rows = vec![0.0; spec.joint_size() * nz];
        rows.iter_mut().skip(z0).step_by(nz).for_each(|v| *v = 1.0);
        Ok(Self {
            spec: spec.clone(),
            rows,
        })
    }

    pub fn spec(&self) -> &SourceSpec {
        &self.spec
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    pub fn row(&self, x: usize) -> &[f64] {
        let nz = self.spec.z_cardinality;
        &self.rows[x * nz..(x + 1) * nz]
    }

    /// Max-norm distance between two encoders of the same shape.
    pub fn max_abs_diff(&self, other: &Encoder) -> f64 {
        self.rows
            .iter()
            .zip(&other.rows)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: EncoderFile = serde_json::from_str(text)?;
        f.try_into()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub(crate) fn check_same_sources(joint: &SourceSpec, enc: &SourceSpec) -> Result<()> {
    if joint.cardinalities != enc.cardinalities {
        return Err(Error::InvalidArgument(format!(
            "source cardinalities differ: joint {:?}, encoder {:?}",
            joint.cardinalities, enc.cardinalities
        )));
    }
    Ok(())
}

/// `P(X^V, Z)` with the latent as the last axis.
pub fn joint_zx(joint: &JointDist, enc: &Encoder) -> Result<ProbTensor> {
    check_same_sources(&joint.spec, &enc.spec)?;
    let nz = enc.spec.z_cardinality;
    let mut data = Vec::with_capacity(enc.rows.len());
    for (row, &p) in enc.rows.chunks(nz).zip(&joint.probs) {
        data.extend(row.iter().map(|q| q * p));
    }
    let mut dims = joint.spec.cardinalities.clone();
    dims.push(nz);
    Ok(ProbTensor { dims, data })
}

/// An unordered split `(S, S^c)` of the source indices with `|S| <= |S^c|`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Bipartition {
    s: Vec<usize>,
    complement: Vec<usize>,
}

impl Bipartition {
    pub fn new(s: Vec<usize>, num_sources: usize) -> Result<Self> {
        let mut s = s;
        s.sort_unstable();
        s.dedup();
        if s.is_empty() || s.iter().any(|&i| i >= num_sources) {
            return Err(Error::InvalidArgument(format!(
                "bad bipartition side {s:?} for {num_sources} sources"
            )));
        }
        let complement: Vec<usize> = (0..num_sources).filter(|i| !s.contains(i)).collect();
        if complement.is_empty() {
            return Err(Error::InvalidArgument(
                "bipartition complement is empty".into(),
            ));
        }
        // canonical orientation
        let (s, complement) = if s.len() > complement.len()
            || (s.len() == complement.len() && complement[0] < s[0])
        {
            (complement, s)
        } else {
            (s, complement)
        };
        Ok(Self { s, complement })
    }

    pub fn s(&self) -> &[usize] {
        &self.s
    }

    pub fn complement(&self) -> &[usize] {
        &self.complement
    }
}

impl fmt::Display for Bipartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = |v: &[usize]| {
            v.iter()
                .map(|i| (i + 1).to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        write!(f, "{{{}}}|{{{}}}", side(&self.s), side(&self.complement))
    }
}

/// Every unordered split of `0..v`, sorted by `(|S|, S)`.
pub fn enumerate_bipartitions(v: usize) -> Result<Vec<Bipartition>> {
    if v < 2 {
        return Err(Error::InvalidSpec(format!("need V >= 2, got {v}")));
    }
    if v > 20 {
        return Err(Error::InvalidSpec(format!("V = {v} is too many sources")));
    }
    let mut out = Vec::new();
    for mask in 1u32..(1 << v) - 1 {
        let s: Vec<usize> = (0..v).filter(|i| mask & (1 << i) != 0).collect();
        let complement: Vec<usize> = (0..v).filter(|i| mask & (1 << i) == 0).collect();
        let keep = s.len() < complement.len() || (s.len() == complement.len() && s[0] == 0);
        if keep {
            out.push(Bipartition { s, complement });
        }
    }
    out.sort_by(|a, b| (a.s.len(), &a.s).cmp(&(b.s.len(), &b.s)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn joint(cards: Vec<usize>, probs: Vec<f64>) -> JointDist {
        JointDist::new(SourceSpec::new(cards, 2).unwrap(), probs).unwrap()
    }

    fn sides(b: &[Bipartition]) -> Vec<(Vec<usize>, Vec<usize>)> {
        b.iter()
            .map(|p| {
                (
                    p.s().iter().map(|i| i + 1).collect(),
                    p.complement().iter().map(|i| i + 1).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn bipartitions_small() {
        assert_eq!(
            sides(&enumerate_bipartitions(2).unwrap()),
            vec![(vec![1], vec![2])]
        );
        assert_eq!(
            sides(&enumerate_bipartitions(3).unwrap()),
            vec![
                (vec![1], vec![2, 3]),
                (vec![2], vec![1, 3]),
                (vec![3], vec![1, 2])
            ]
        );
        assert_eq!(
            sides(&enumerate_bipartitions(4).unwrap()),
            vec![
                (vec![1], vec![2, 3, 4]),
                (vec![2], vec![1, 3, 4]),
                (vec![3], vec![1, 2, 4]),
                (vec![4], vec![1, 2, 3]),
                (vec![1, 2], vec![3, 4]),
                (vec![1, 3], vec![2, 4]),
                (vec![1, 4], vec![2, 3]),
            ]
        );
        assert!(matches!(
            enumerate_bipartitions(1),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn bipartitions_match_brute_force() {
        // all subsets, dedup unordered pairs through a canonical key
        for v in 2..=7usize {
            let mut seen = std::collections::BTreeSet::new();
            for mask in 1u32..(1 << v) - 1 {
                let s: Vec<usize> = (0..v).filter(|i| mask & (1 << i) != 0).collect();
                let c: Vec<usize> = (0..v).filter(|i| mask & (1 << i) == 0).collect();
                seen.insert(if s < c { (s, c) } else { (c, s) });
            }
            let got = enumerate_bipartitions(v).unwrap();
            assert_eq!(got.len(), (1 << (v - 1)) - 1);
            assert_eq!(got.len(), seen.len());
            for b in &got {
                assert!(b.s().len() <= b.complement().len());
                let key = if b.s() < b.complement() {
                    (b.s().to_vec(), b.complement().to_vec())
                } else {
                    (b.complement().to_vec(), b.s().to_vec())
                };
                assert!(seen.contains(&key));
            }
        }
    }

    #[test]
    fn bipartition_new_canonicalizes() {
        let b = Bipartition::new(vec![2, 1], 3).unwrap();
        assert_eq!(b.s(), &[0]);
        assert_eq!(b.complement(), &[1, 2]);
        assert_eq!(b.to_string(), "{1}|{2,3}");
        let b = Bipartition::new(vec![2, 3], 4).unwrap();
        assert_eq!(b.s(), &[0, 1]);
    }

    #[test]
    fn marginalize_examples() {
        let j = joint(vec![2, 2], vec![0.25; 4]);
        assert_eq!(marginalize(&j, &[0]).unwrap().data, vec![0.5, 0.5]);

        let p = [0.2, 0.3, 0.5];
        let q = [0.6, 0.4];
        let prod: Vec<f64> = p.iter().flat_map(|a| q.iter().map(move |b| a * b)).collect();
        let j = joint(vec![3, 2], prod);
        let m = marginalize(&j, &[1]).unwrap();
        for (a, b) in m.data.iter().zip(q) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(
            marginalize(&j, &[]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn marginalize_random_rows() {
        let raw: Vec<f64> = (1..=16).map(|i| ((i * 37) % 11 + 1) as f64).collect();
        let s: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let j = joint(vec![4, 4], probs.clone());
        let m = marginalize(&j, &[0]).unwrap();
        for a in 0..4 {
            let row: f64 = probs[a * 4..a * 4 + 4].iter().sum();
            assert!((m.data[a] - row).abs() < 1e-15);
        }
        let m2 = marginalize(&j, &[1]).unwrap();
        for b in 0..4 {
            let col: f64 = (0..4).map(|a| probs[a * 4 + b]).sum();
            assert!((m2.data[b] - col).abs() < 1e-15);
        }
    }

    #[test]
    fn conditional_examples() {
        let j = joint(vec![2, 2], vec![0.25; 4]);
        let c = conditional_on(&j, &[1], &[0]).unwrap();
        assert_eq!(c.rows, vec![0.5; 4]);
        assert!(c.degenerate.iter().all(|d| !d));

        // copy joint
        let j = joint(vec![3, 3], {
            let mut v = vec![0.0; 9];
            for i in 0..3 {
                v[i * 3 + i] = 1.0 / 3.0;
            }
            v
        });
        let c = conditional_on(&j, &[1], &[0]).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(c.row(a)[b], if a == b { 1.0 } else { 0.0 });
            }
        }

        let raw = [3.0, 1.0, 0.5, 2.0, 2.0, 1.0, 0.25, 4.0, 1.25];
        let s: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let j = joint(vec![3, 3], probs.clone());
        let c = conditional_on(&j, &[1], &[0]).unwrap();
        for a in 0..3 {
            let pa: f64 = probs[a * 3..a * 3 + 3].iter().sum();
            for b in 0..3 {
                assert!((c.row(a)[b] - probs[a * 3 + b] / pa).abs() < 1e-15);
            }
        }
        // conditioning on the slow axis from the fast one
        let c = conditional_on(&j, &[0], &[1]).unwrap();
        for b in 0..3 {
            let pb: f64 = (0..3).map(|a| probs[a * 3 + b]).sum();
            for a in 0..3 {
                assert!((c.row(b)[a] - probs[a * 3 + b] / pb).abs() < 1e-15);
            }
        }
        assert!(conditional_on(&j, &[0], &[0]).is_err());
    }

    #[test]
    fn zero_mass_slice_is_flagged() {
        let j = joint(vec![2, 2], vec![0.5, 0.5, 0.0, 0.0]);
        let c = conditional_on(&j, &[1], &[0]).unwrap();
        assert_eq!(c.degenerate, vec![false, true]);
        assert_eq!(c.row(1), &[0.5, 0.5]);
    }

    #[test]
    fn joint_zx_examples() {
        let raw = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let s: f64 = raw.iter().sum();
        let j = JointDist::new(
            SourceSpec::new(vec![2, 3], 4).unwrap(),
            raw.iter().map(|v| v / s).collect(),
        )
        .unwrap();
        let e = Encoder::constant(j.spec(), 2).unwrap();
        let t = joint_zx(&j, &e).unwrap();
        assert_eq!(t.dims, vec![2, 3, 4]);
        for x in 0..6 {
            for z in 0..4 {
                let want = if z == 2 { j.probs()[x] } else { 0.0 };
                assert_eq!(t.data[x * 4 + z], want);
            }
        }
        let e = Encoder::uniform(j.spec());
        let t = joint_zx(&j, &e).unwrap();
        for x in 0..6 {
            for z in 0..4 {
                assert!((t.data[x * 4 + z] - j.probs()[x] / 4.0).abs() < 1e-17);
            }
        }
        let other = Encoder::uniform(&SourceSpec::new(vec![3, 2], 4).unwrap());
        assert!(joint_zx(&j, &other).is_err());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let j = joint(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]);
        let back = JointDist::from_json(&j.to_json().unwrap()).unwrap();
        assert_eq!(j, back);
        let bad = r#"{"cardinalities":[2,2],"z_cardinality":2,"probs":[0.5,0.5,0.5,0.5]}"#;
        assert!(matches!(
            JointDist::from_json(bad),
            Err(Error::InvalidDistribution(_))
        ));
        let e = Encoder::uniform(j.spec());
        assert_eq!(Encoder::from_json(&e.to_json().unwrap()).unwrap(), e);
    }

    #[test]
    fn spec_validation() {
        assert!(SourceSpec::new(vec![4], 2).is_err());
        assert!(SourceSpec::new(vec![4, 1], 2).is_err());
        assert!(SourceSpec::new(vec![4, 4], 0).is_err());
        assert!(matches!(
            SourceSpec::new(vec![1000, 1000, 1000], 2),
            Err(Error::TooLarge { .. })
        ));
        let s = SourceSpec::new(vec![3, 4, 5], 2).unwrap();
        for flat in 0..60 {
            assert_eq!(s.flatten(&s.unflatten(flat)).unwrap(), flat);
        }
    }

    fn arb_joint() -> impl Strategy<Value = JointDist> {
        prop::collection::vec(2usize..=4, 2..=4).prop_flat_map(|cards| {
            let n: usize = cards.iter().product();
            prop::collection::vec(0.0f64..1.0, n).prop_map(move |raw| {
                let s: f64 = raw.iter().sum::<f64>() + 1e-9;
                let mut p: Vec<f64> = raw.iter().map(|v| v / s).collect();
                let t: f64 = p.iter().sum();
                p[0] += 1.0 - t;
                JointDist::new(SourceSpec::new(cards.clone(), 3).unwrap(), p).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn nested_marginals_agree(j in arb_joint(), mask in 1u32..16, sub in 1u32..16) {
            let v = j.spec().num_sources();
            let s: Vec<usize> = (0..v).filter(|i| mask & (1 << i) != 0).collect();
            prop_assume!(!s.is_empty());
            let t: Vec<usize> = s.iter().enumerate()
                .filter(|(k, _)| sub & (1 << k) != 0).map(|(_, &i)| i).collect();
            prop_assume!(!t.is_empty());
            let ms = marginalize(&j, &s).unwrap();
            let positions: Vec<usize> = t.iter().map(|i| s.iter().position(|x| x == i).unwrap()).collect();
            let via = ms.marginal(&positions).unwrap();
            let direct = marginalize(&j, &t).unwrap();
            prop_assert!((via.total() - 1.0).abs() < 1e-12);
            for (a, b) in via.data.iter().zip(&direct.data) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn summing_out_z_recovers_joint(j in arb_joint(), seed in any::<u64>()) {
            let enc = crate::bipartite::random_encoder(j.spec(), seed);
            let t = joint_zx(&j, &enc).unwrap();
            let v = j.spec().num_sources();
            let back = t.marginal(&(0..v).collect::<Vec<_>>()).unwrap();
            prop_assert!((t.total() - 1.0).abs() < 1e-12);
            for (a, b) in back.data.iter().zip(j.probs()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
