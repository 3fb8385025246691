//! Exact information measures on dense tensors. Everything is in bits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::{axis_map, check_same_sources, enumerate_bipartitions, joint_zx, Bipartition};
use crate::prob::{Encoder, JointDist, ProbTensor};

/// Rounding slack around zero for information quantities.
pub const ZERO_TOL: f64 = 1e-9;

/// `-Σ p log2 p` without validation; zero entries contribute nothing.
pub(crate) fn entropy_bits(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.log2())
        .sum::<f64>()
}

pub(crate) fn clamp_nonneg(value: f64, what: &str) -> Result<f64> {
    if value >= 0.0 {
        Ok(value)
    } else if value >= -ZERO_TOL {
        Ok(0.0)
    } else {
        Err(Error::Consistency(format!("{what} is {value} bits")))
    }
}

fn check_distribution(dist: &[f64]) -> Result<()> {
    if let Some(v) = dist.iter().find(|v| v.is_nan() || **v < -1e-12) {
        return Err(Error::InvalidDistribution(format!("negative entry {v}")));
    }
    let s: f64 = dist.iter().sum();
    if (s - 1.0).abs() > ZERO_TOL {
        return Err(Error::InvalidDistribution(format!("entries sum to {s}")));
    }
    Ok(())
}

pub fn entropy(dist: &[f64]) -> Result<f64> {
    check_distribution(dist)?;
    Ok(entropy_bits(dist).max(0.0))
}

/// `Σ p log2(p/q)`. Returns `f64::INFINITY` when `p` puts mass where `q` has none.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(format!(
            "kl: lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return Ok(f64::INFINITY);
            }
            acc += a * (a / b).log2();
        }
    }
    Ok(acc.max(0.0))
}

/// Mutual information of a row-major `rows × cols` joint, unclamped.
pub(crate) fn mi_2d(data: &[f64], rows: usize, cols: usize) -> f64 {
    let mut pa = vec![0.0; rows];
    let mut pb = vec![0.0; cols];
    for (r, row) in data.chunks(cols).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            pa[r] += v;
            pb[c] += v;
        }
    }
    entropy_bits(&pa) + entropy_bits(&pb) - entropy_bits(data)
}

/// `I(A;B)` for a two-axis joint tensor.
pub fn mutual_information(joint2: &ProbTensor) -> Result<f64> {
    if joint2.dims.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "mutual_information needs a 2-axis tensor, got dims {:?}",
            joint2.dims
        )));
    }
    check_distribution(&joint2.data)?;
    clamp_nonneg(
        mi_2d(&joint2.data, joint2.dims[0], joint2.dims[1]),
        "mutual information",
    )
}

/// Per-bipartition terms of the key relation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BipartitionInfo {
    pub bipartition: Bipartition,
    /// `I(X_S; Z)`
    pub mi_z_s: f64,
    /// `I(X_{S^c}; Z)`
    pub mi_z_complement: f64,
    /// `I(X_S; X_{S^c})`, a constant of the joint.
    pub mi_sources: f64,
    /// `I(X_S; X_{S^c} | Z)`
    pub cond_mi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoReport {
    pub mi_z_xv: f64,
    pub parts: Vec<BipartitionInfo>,
    pub cond_mi_sum: f64,
}

impl InfoReport {
    /// Flat key/value view for reports, e.g. `cond_mi[{1}|{2}]`.
    pub fn to_flat_map(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("mi_z_xv".to_string(), self.mi_z_xv);
        m.insert("cond_mi_sum".to_string(), self.cond_mi_sum);
        for p in &self.parts {
            let b = &p.bipartition;
            m.insert(format!("mi_z_s[{b}]"), p.mi_z_s);
            m.insert(format!("mi_z_complement[{b}]"), p.mi_z_complement);
            m.insert(format!("mi_sources[{b}]"), p.mi_sources);
            m.insert(format!("cond_mi[{b}]"), p.cond_mi);
        }
        m
    }

    pub fn to_flat_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_flat_map())?)
    }
}

/// Entropy of the marginal of `t` on `keep`.
fn marginal_entropy(t: &ProbTensor, keep: &[usize]) -> Result<f64> {
    Ok(entropy_bits(&t.marginal(keep)?.data))
}

/// Every term of the key relation for `(joint, enc)`.
///
/// The conditional mutual information is computed twice: once definitionally
/// from `P(X^V, Z)` and once through
/// `I(X^V;Z) - I(X_S;Z) - I(X_{S^c};Z) + I(X_S;X_{S^c})`. Disagreement above
/// [`ZERO_TOL`] is reported as [`Error::Consistency`].
pub fn info_report(joint: &JointDist, enc: &Encoder) -> Result<InfoReport> {
    check_same_sources(joint.spec(), enc.spec())?;
    let v = joint.spec().num_sources();
    let nz = enc.spec().z_cardinality();
    let pxz = joint_zx(joint, enc)?;
    let pz = pxz.marginal(&[v])?.data;
    let n_x = joint.spec().joint_size();

    let mi_z_xv_raw = mi_2d(&pxz.data, n_x, nz);
    let h_x = entropy_bits(joint.probs());
    let jt = joint.as_tensor();

    let mut parts = Vec::new();
    for b in enumerate_bipartitions(v)? {
        let mut s_axes = b.s().to_vec();
        s_axes.push(v);
        let mut c_axes = b.complement().to_vec();
        c_axes.push(v);
        let psz = pxz.marginal(&s_axes)?;
        let pcz = pxz.marginal(&c_axes)?;
        let n_s = psz.data.len() / nz;
        let n_c = pcz.data.len() / nz;
        let mi_s = mi_2d(&psz.data, n_s, nz);
        let mi_c = mi_2d(&pcz.data, n_c, nz);
        let mi_sources = marginal_entropy(&jt, b.s())? + marginal_entropy(&jt, b.complement())?
            - h_x;
        let via_identity = mi_z_xv_raw - mi_s - mi_c + mi_sources;

        // Σ p(x,z) log2[p(x,z) p(z) / (p(x_S,z) p(x_Sc,z))]
        let smap = axis_map(&pxz.dims, &s_axes);
        let cmap = axis_map(&pxz.dims, &c_axes);
        let mut direct = 0.0;
        for (i, &p) in pxz.data.iter().enumerate() {
            if p > 0.0 {
                let z = i % nz;
                direct += p
                    * (p.ln() + pz[z].ln() - psz.data[smap[i]].ln() - pcz.data[cmap[i]].ln())
                    / std::f64::consts::LN_2;
            }
        }
        if (direct - via_identity).abs() > ZERO_TOL {
            return Err(Error::Consistency(format!(
                "key relation breach on {b}: direct {direct}, identity {via_identity}"
            )));
        }
        parts.push(BipartitionInfo {
            mi_z_s: clamp_nonneg(mi_s, "I(X_S;Z)")?,
            mi_z_complement: clamp_nonneg(mi_c, "I(X_Sc;Z)")?,
            mi_sources: clamp_nonneg(mi_sources, "I(X_S;X_Sc)")?,
            cond_mi: clamp_nonneg(direct, "I(X_S;X_Sc|Z)")?,
            bipartition: b,
        });
    }
    let cond_mi_sum = parts.iter().map(|p| p.cond_mi).sum();
    Ok(InfoReport {
        mi_z_xv: clamp_nonneg(mi_z_xv_raw, "I(X^V;Z)")?,
        parts,
        cond_mi_sum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::SourceSpec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    // Σ p(a,b) log2 p(a,b)/(p(a)p(b))
    fn mi_definitional(data: &[f64], rows: usize, cols: usize) -> f64 {
        let pa: Vec<f64> = (0..rows).map(|r| data[r * cols..(r + 1) * cols].iter().sum()).collect();
        let pb: Vec<f64> = (0..cols).map(|c| (0..rows).map(|r| data[r * cols + c]).sum()).collect();
        let mut acc = 0.0;
        for r in 0..rows {
            for c in 0..cols {
                let p = data[r * cols + c];
                if p > 0.0 {
                    acc += p * (p / (pa[r] * pb[c])).log2();
                }
            }
        }
        acc
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[1.0]).unwrap(), 0.0);
        assert!((entropy(&[0.125; 8]).unwrap() - 3.0).abs() < 1e-15);
        assert!((entropy(&[0.5, 0.25, 0.25]).unwrap() - 1.5).abs() < 1e-15);
        assert!(matches!(
            entropy(&[1.1, -0.1]),
            Err(Error::InvalidDistribution(_))
        ));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 1.0).abs() < 1e-15);
        let want = 0.7 * 1.4f64.log2() + 0.3 * 0.6f64.log2();
        assert!((kl_divergence(&[0.7, 0.3], &[0.5, 0.5]).unwrap() - want).abs() < 1e-15);
        assert_eq!(
            kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap(),
            f64::INFINITY
        );
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn mi_examples() {
        let p = [0.2, 0.8];
        let q = [0.1, 0.3, 0.6];
        let prod: Vec<f64> = p.iter().flat_map(|a| q.iter().map(move |b| a * b)).collect();
        let t = ProbTensor::new(vec![2, 3], prod).unwrap();
        assert!(mutual_information(&t).unwrap().abs() < 1e-12);

        let mut copy = vec![0.0; 64];
        for i in 0..8 {
            copy[i * 8 + i] = 0.125;
        }
        let t = ProbTensor::new(vec![8, 8], copy).unwrap();
        assert!((mutual_information(&t).unwrap() - 3.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = random_simplex(&mut rng, 16);
        let t = ProbTensor::new(vec![4, 4], d.clone()).unwrap();
        assert!((mutual_information(&t).unwrap() - mi_definitional(&d, 4, 4)).abs() < 1e-12);
    }

    #[test]
    fn report_constant_encoder_recovers_source_mi() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = SourceSpec::new(vec![3, 2, 2], 3).unwrap();
        let joint = JointDist::new(spec.clone(), random_simplex(&mut rng, 12)).unwrap();
        let r = info_report(&joint, &Encoder::constant(&spec, 1).unwrap()).unwrap();
        assert!(r.mi_z_xv.abs() < 1e-12);
        for p in &r.parts {
            assert!((p.cond_mi - p.mi_sources).abs() < 1e-12);
        }
    }

    #[test]
    fn independent_sources_with_x1_encoder_have_no_cond_mi() {
        // X1 ⊥ X2 on 2×2, encoder depends on x1 only
        let p1 = [0.3, 0.7];
        let p2 = [0.6, 0.4];
        let probs: Vec<f64> = p1.iter().flat_map(|a| p2.iter().map(move |b| a * b)).collect();
        let spec = SourceSpec::new(vec![2, 2], 2).unwrap();
        let joint = JointDist::new(spec.clone(), probs).unwrap();
        let by_x1 = [[0.9, 0.1], [0.2, 0.8]];
        let rows: Vec<f64> = (0..4).flat_map(|x| by_x1[x / 2]).collect();
        let enc = Encoder::new(spec, rows).unwrap();
        let r = info_report(&joint, &enc).unwrap();

        // brute force I(X1;X2|Z) over the 2×2×2 tensor
        let mut pxz = [[[0.0; 2]; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                for z in 0..2 {
                    pxz[a][b][z] = p1[a] * p2[b] * by_x1[a][z];
                }
            }
        }
        let mut brute = 0.0;
        for z in 0..2 {
            let pz: f64 = (0..2).flat_map(|a| (0..2).map(move |b| (a, b))).map(|(a, b)| pxz[a][b][z]).sum();
            for a in 0..2 {
                for b in 0..2 {
                    let p = pxz[a][b][z];
                    let pa: f64 = (0..2).map(|bb| pxz[a][bb][z]).sum();
                    let pb: f64 = (0..2).map(|aa| pxz[aa][b][z]).sum();
                    brute += p * (p * pz / (pa * pb)).log2();
                }
            }
        }
        assert!(brute.abs() < 1e-12);
        assert!(r.cond_mi_sum.abs() < 1e-12);
    }

    #[test]
    fn flat_map_keys() {
        let spec = SourceSpec::new(vec![2, 2], 2).unwrap();
        let joint = JointDist::new(spec.clone(), vec![0.25; 4]).unwrap();
        let r = info_report(&joint, &Encoder::uniform(&spec)).unwrap();
        let m = r.to_flat_map();
        assert!(m.contains_key("cond_mi[{1}|{2}]"));
        assert!(m.contains_key("mi_z_xv"));
        assert_eq!(m.len(), 2 + 4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn report_invariants(seed in any::<u64>(), v in 2usize..=3, nz in 1usize..=5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cards: Vec<usize> = (0..v).map(|_| rng.gen_range(2..=4)).collect();
            let spec = SourceSpec::new(cards, nz).unwrap();
            let joint = JointDist::new(spec.clone(), random_simplex(&mut rng, spec.joint_size())).unwrap();
            let enc = crate::bipartite::random_encoder(&spec, rng.gen());
            let r = info_report(&joint, &enc).unwrap();
            prop_assert!(r.mi_z_xv >= -ZERO_TOL);
            for p in &r.parts {
                prop_assert!(p.cond_mi >= -ZERO_TOL);
                prop_assert!(r.mi_z_xv >= p.mi_z_s - ZERO_TOL);
                prop_assert!(r.mi_z_xv >= p.mi_z_complement - ZERO_TOL);
            }
        }
    }
}
