//! Clustering evaluation and the contrastive correlation loss.

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::{Encoder, ProbTensor};
use crate::rng;
use crate::synth::{inverse_transform, LabeledDataset};

/// Samples `z` from row `x` of the encoder: the smallest `z` whose
/// cumulative mass strictly exceeds `u`. `x` is the flat realization index.
pub fn bayes_decode(enc: &Encoder, x: usize, u: f64) -> usize {
    inverse_transform(enc.row(x), u)
}

/// Most probable `z`, lowest index on ties.
pub fn argmax_decode(enc: &Encoder, x: usize) -> usize {
    let row = enc.row(x);
    let mut best = 0;
    for (z, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = z;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Sample,
    /// Diagnostic only; ignores the uniform stream.
    Argmax,
}

/// `confusion[z][y]` counts.
pub fn confusion_matrix(pairs: &[(usize, usize)], nz: usize, ny: usize) -> Result<Vec<Vec<u64>>> {
    let mut c = vec![vec![0u64; ny]; nz];
    for &(z, y) in pairs {
        if z >= nz || y >= ny {
            return Err(Error::InvalidArgument(format!(
                "pair ({z}, {y}) outside a {nz} x {ny} confusion matrix"
            )));
        }
        c[z][y] += 1;
    }
    Ok(c)
}

fn optimum(w: &[Vec<i64>], rows: &[usize], cols: &[usize]) -> i64 {
    if rows.is_empty() {
        return 0;
    }
    let data = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| w[r][c]))
        .collect();
    let m = Matrix::from_vec(rows.len(), cols.len(), data).expect("dimensions agree");
    kuhn_munkres(&m).0
}

/// Lexicographically smallest maximum-weight assignment of every row to a
/// distinct column; needs `rows <= cols`.
fn assign(w: &[Vec<i64>], ncols: usize) -> Vec<usize> {
    let nrows = w.len();
    let all_rows: Vec<usize> = (0..nrows).collect();
    let all_cols: Vec<usize> = (0..ncols).collect();
    let best = optimum(w, &all_rows, &all_cols);
    let mut used = vec![false; ncols];
    let mut out = Vec::with_capacity(nrows);
    let mut acc = 0;
    for r in 0..nrows {
        let rest_rows = &all_rows[r + 1..];
        let c = (0..ncols)
            .filter(|&c| !used[c])
            .find(|&c| {
                let cols: Vec<usize> = (0..ncols).filter(|&k| !used[k] && k != c).collect();
                acc + w[r][c] + optimum(w, rest_rows, &cols) == best
            })
            .expect("an optimal completion always exists");
        used[c] = true;
        acc += w[r][c];
        out.push(c);
    }
    out
}

/// Assignment of cluster labels to class labels maximizing the matched count.
/// Entry `z` of the result is the class matched to cluster `z`; when there
/// are more clusters than classes the surplus clusters get `None`.
///
/// Ties go to the lexicographically smallest assignment vector, taken over
/// the shorter side: clusters when `|Z| <= |Y|`, classes otherwise.
pub fn label_match(confusion: &[Vec<u64>]) -> Vec<Option<usize>> {
    let nz = confusion.len();
    let ny = confusion.first().map_or(0, Vec::len);
    if nz == 0 || ny == 0 {
        return vec![None; nz];
    }
    let w: Vec<Vec<i64>> = confusion
        .iter()
        .map(|r| r.iter().map(|&v| v as i64).collect())
        .collect();
    if nz <= ny {
        assign(&w, ny).into_iter().map(Some).collect()
    } else {
        let wt: Vec<Vec<i64>> = (0..ny).map(|y| (0..nz).map(|z| w[z][y]).collect()).collect();
        let mut out = vec![None; nz];
        for (y, z) in assign(&wt, nz).into_iter().enumerate() {
            out[z] = Some(y);
        }
        out
    }
}

/// Sum of the matched confusion entries.
pub fn matched_count(confusion: &[Vec<u64>], permutation: &[Option<usize>]) -> u64 {
    permutation
        .iter()
        .enumerate()
        .filter_map(|(z, y)| y.map(|y| confusion[z][y]))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub accuracy: f64,
    /// Class matched to each cluster.
    pub permutation: Vec<Option<usize>>,
    /// `confusion[z][y]`
    pub confusion: Vec<Vec<u64>>,
}

impl ClusterResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Decodes every sample, matches labels and reports the matched fraction.
/// In sampling mode one uniform draw per sample is taken from the seeded
/// stream in dataset order.
pub fn clustering_accuracy(
    enc: &Encoder,
    data: &LabeledDataset,
    seed: u64,
    mode: DecodeMode,
) -> Result<ClusterResult> {
    if enc.spec().cardinalities() != data.spec.cardinalities() {
        return Err(Error::InvalidArgument(format!(
            "encoder cardinalities {:?} differ from dataset {:?}",
            enc.spec().cardinalities(),
            data.spec.cardinalities()
        )));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let nz = enc.spec().z_cardinality();
    let mut r = rng::rng(seed);
    let mut pairs = Vec::with_capacity(data.len());
    for (x, y) in &data.samples {
        let flat = data.spec.flatten(x)?;
        let z = match mode {
            DecodeMode::Sample => bayes_decode(enc, flat, r.gen::<f64>()),
            DecodeMode::Argmax => argmax_decode(enc, flat),
        };
        pairs.push((z, *y));
    }
    let confusion = confusion_matrix(&pairs, nz, data.y_cardinality)?;
    let permutation = label_match(&confusion);
    let accuracy = matched_count(&confusion, &permutation) as f64 / data.len() as f64;
    Ok(ClusterResult {
        accuracy,
        permutation,
        confusion,
    })
}

/// `Σ_x max_y P(x, y)` for a labeled joint whose last axis is the label: the
/// accuracy of the maximum a posteriori decoder.
pub fn bayes_optimal_accuracy(labeled: &ProbTensor) -> Result<f64> {
    let ny = *labeled
        .dims
        .last()
        .ok_or_else(|| Error::ShapeMismatch("labeled joint has no axes".into()))?;
    Ok(labeled
        .data
        .chunks(ny)
        .map(|row| row.iter().copied().fold(0.0, f64::max))
        .sum())
}

/// `-(1/N) Σ_n ln(h_nn / Σ_k h_nk)` in nats, with row-normalized scores as
/// `Q_N(·|w_1^(n))`. A zero row sum or a zero positive score gives `+∞`.
pub fn contrastive_loss(scores: &[Vec<f64>]) -> Result<f64> {
    let n = scores.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need N >= 2, got {n}")));
    }
    let mut total = 0.0;
    for (i, row) in scores.iter().enumerate() {
        if row.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "row {i} has {} scores, expected {n}",
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidArgument(format!("row {i} holds score {v}")));
        }
        let s: f64 = row.iter().sum();
        if s <= 0.0 || row[i] <= 0.0 {
            return Ok(f64::INFINITY);
        }
        total -= (row[i] / s).ln();
    }
    Ok(total / n as f64)
}

/// Mutual information of the empirical paired joint over `N` pairs, `ln N`.
pub fn paired_information(n: usize) -> f64 {
    (n as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::SourceSpec;
    use crate::synth::{build_labeled_joint, posterior_encoder, sample_dataset, SynthSpec};
    use proptest::prelude::*;

    /// Every injection of rows into columns, in lexicographic order.
    fn injections(rows: usize, cols: usize) -> Vec<Vec<usize>> {
        fn rec(r: usize, rows: usize, cols: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if r == rows {
                out.push(cur.clone());
                return;
            }
            for c in 0..cols {
                if !cur.contains(&c) {
                    cur.push(c);
                    rec(r + 1, rows, cols, cur, out);
                    cur.pop();
                }
            }
        }
        let mut out = Vec::new();
        rec(0, rows, cols, &mut Vec::new(), &mut out);
        out
    }

    fn brute_force(m: &[Vec<u64>]) -> (u64, Vec<Option<usize>>) {
        let (nz, ny) = (m.len(), m[0].len());
        let mut best: Option<(u64, Vec<Option<usize>>)> = None;
        if nz <= ny {
            for a in injections(nz, ny) {
                let v = a.iter().enumerate().map(|(z, &y)| m[z][y]).sum();
                if best.as_ref().map_or(true, |b| v > b.0) {
                    best = Some((v, a.into_iter().map(Some).collect()));
                }
            }
        } else {
            for a in injections(ny, nz) {
                let v = a.iter().enumerate().map(|(y, &z)| m[z][y]).sum();
                if best.as_ref().map_or(true, |b| v > b.0) {
                    let mut p = vec![None; nz];
                    for (y, &z) in a.iter().enumerate() {
                        p[z] = Some(y);
                    }
                    best = Some((v, p));
                }
            }
        }
        best.unwrap()
    }

    #[test]
    fn decode_examples() {
        let spec = SourceSpec::new(vec![2, 2], 4).unwrap();
        let mut rows = vec![0.0, 0.0, 1.0, 0.0, 0.25, 0.25, 0.25, 0.25];
        rows.extend_from_slice(&rows.clone());
        let enc = Encoder::new(spec, rows).unwrap();
        for u in [0.0, 0.3, 0.999] {
            assert_eq!(bayes_decode(&enc, 0, u), 2);
        }
        assert_eq!(bayes_decode(&enc, 1, 0.6), 2);
        assert_eq!(bayes_decode(&enc, 1, 0.5), 2);
        assert_eq!(bayes_decode(&enc, 1, 0.49), 1);
        assert_eq!(argmax_decode(&enc, 1), 0);
    }

    #[test]
    fn decode_frequencies_match_row() {
        let row = [0.1, 0.35, 0.05, 0.5];
        let enc = Encoder::new(SourceSpec::new(vec![2, 2], 4).unwrap(), row.repeat(4)).unwrap();
        let n = 100_000;
        let mut counts = [0usize; 4];
        for k in 0..n {
            counts[bayes_decode(&enc, 0, (k as f64 + 0.5) / n as f64)] += 1;
        }
        for (c, p) in counts.iter().zip(row) {
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - p).abs() <= 3.0 * sigma + 1e-9);
        }
    }

    #[test]
    fn match_examples() {
        let id = vec![vec![5, 1, 0], vec![0, 7, 2], vec![1, 0, 9]];
        assert_eq!(label_match(&id), vec![Some(0), Some(1), Some(2)]);
        // cluster z holds class perm[z]
        let perm = [2, 0, 3, 1];
        let mut m = vec![vec![0u64; 4]; 4];
        for (z, &y) in perm.iter().enumerate() {
            m[z][y] = 10;
        }
        assert_eq!(label_match(&m), perm.iter().map(|&y| Some(y)).collect::<Vec<_>>());
        assert_eq!(label_match(&vec![vec![0u64; 3]; 3]), vec![Some(0), Some(1), Some(2)]);
    }

    #[test]
    fn rectangular_matching() {
        let wide = vec![vec![0, 4, 1], vec![3, 0, 0]];
        assert_eq!(label_match(&wide), vec![Some(1), Some(0)]);
        let tall = vec![vec![0, 4], vec![3, 0], vec![5, 0]];
        assert_eq!(label_match(&tall), vec![Some(1), None, Some(0)]);
    }

    proptest! {
        #[test]
        fn matching_equals_exhaustive_search(
            nz in 1usize..=6,
            ny in 1usize..=6,
            cells in prop::collection::vec(0u64..4, 36),
        ) {
            let m: Vec<Vec<u64>> = (0..nz).map(|z| cells[z * 6..z * 6 + ny].to_vec()).collect();
            let p = label_match(&m);
            let (v, want) = brute_force(&m);
            prop_assert_eq!(matched_count(&m, &p), v);
            prop_assert_eq!(p, want);
        }
    }

    #[test]
    fn exact_encoder_is_perfect() {
        let s = SynthSpec::invertible(2);
        let enc = posterior_encoder(&s).unwrap();
        let data = sample_dataset(&s, 10_000, 3).unwrap();
        let r = clustering_accuracy(&enc, &data, 4, DecodeMode::Sample).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.confusion.iter().flatten().sum::<u64>(), 10_000);
        assert_eq!(r.permutation, (0..8).map(Some).collect::<Vec<_>>());
    }

    #[test]
    fn relabeling_clusters_keeps_accuracy() {
        let s = SynthSpec::non_invertible(2);
        let enc = posterior_encoder(&s).unwrap();
        let nz = 8;
        let shift: Vec<f64> = enc
            .rows()
            .chunks(nz)
            .flat_map(|r| (0..nz).map(move |z| r[(z + 3) % nz]))
            .collect();
        let moved = Encoder::new(enc.spec().clone(), shift).unwrap();
        let data = sample_dataset(&s, 10_000, 9).unwrap();
        let a = clustering_accuracy(&enc, &data, 1, DecodeMode::Argmax).unwrap();
        let b = clustering_accuracy(&moved, &data, 1, DecodeMode::Argmax).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        // sampling walks the cumulative sum in a different order, so only the
        // distribution of the accuracy is preserved
        let a = clustering_accuracy(&enc, &data, 1, DecodeMode::Sample).unwrap();
        let b = clustering_accuracy(&moved, &data, 1, DecodeMode::Sample).unwrap();
        assert!((a.accuracy - b.accuracy).abs() < 0.02);
    }

    #[test]
    fn uniform_encoder_is_near_chance() {
        let s = SynthSpec::invertible(2);
        let enc = Encoder::uniform(&s.source_spec().unwrap());
        let data = sample_dataset(&s, 10_000, 5).unwrap();
        let a = clustering_accuracy(&enc, &data, 6, DecodeMode::Sample).unwrap().accuracy;
        // matching lifts the maximum slightly above 1/8
        let sigma = (0.125 * 0.875 / 10_000f64).sqrt();
        assert!((a - 0.125).abs() < 3.0 * sigma + 0.01, "{a}");
    }

    #[test]
    fn bayes_optimal_of_invertible_case_is_one() {
        let l = build_labeled_joint(&SynthSpec::invertible(2)).unwrap();
        assert!((bayes_optimal_accuracy(&l).unwrap() - 1.0).abs() < 1e-12);
        let l = build_labeled_joint(&SynthSpec::non_invertible(2)).unwrap();
        let a = bayes_optimal_accuracy(&l).unwrap();
        assert!(a > 0.125 && a < 1.0);
    }

    #[test]
    fn argmax_mode_on_exact_encoder() {
        let s = SynthSpec::non_invertible(2);
        let enc = posterior_encoder(&s).unwrap();
        let l = build_labeled_joint(&s).unwrap();
        let data = sample_dataset(&s, 20_000, 11).unwrap();
        let a = clustering_accuracy(&enc, &data, 0, DecodeMode::Argmax).unwrap().accuracy;
        let want = bayes_optimal_accuracy(&l).unwrap();
        let sigma = (want * (1.0 - want) / 20_000f64).sqrt();
        assert!((a - want).abs() < 4.0 * sigma, "{a} vs {want}");
    }

    #[test]
    fn contrastive_examples() {
        for n in [2, 8, 64] {
            let s = vec![vec![0.7; n]; n];
            assert!((contrastive_loss(&s).unwrap() - paired_information(n)).abs() < 1e-12);
        }
        let l = contrastive_loss(&[vec![9.0, 1.0], vec![1.0, 9.0]]).unwrap();
        assert!((l - -(0.9f64).ln()).abs() < 1e-15);
        let s = [vec![1.0, 2.0, 0.5], vec![0.2, 0.3, 4.0], vec![1.0, 1.0, 1.0]];
        let want = -((1.0f64 / 3.5).ln() + (0.3f64 / 4.5).ln() + (1.0f64 / 3.0).ln()) / 3.0;
        assert!((contrastive_loss(&s).unwrap() - want).abs() < 1e-14);
        assert_eq!(contrastive_loss(&[vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap(), f64::INFINITY);
        assert_eq!(contrastive_loss(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap(), f64::INFINITY);
        assert!(contrastive_loss(&[vec![1.0]]).is_err());
        assert!(contrastive_loss(&[vec![1.0, -1.0], vec![1.0, 1.0]]).is_err());
    }

    #[test]
    fn result_json() {
        let r = ClusterResult {
            accuracy: 0.5,
            permutation: vec![Some(1), None],
            confusion: vec![vec![0, 1], vec![1, 0]],
        };
        let back: ClusterResult = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
