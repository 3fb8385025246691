//! Synthetic mixture-of-products sources driven by a uniform label `Y`.
//!
//! Each source is emitted through the same column-stochastic kernel
//! `P(X_i|Y)`: alphabet `X_i` is split into `|Y|` blocks of length `b`, and
//! column `y` puts `l - δ` on block `y` and `δ` on block `y + 1 (mod |Y|)`.

use std::io::{Read, Write};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::{Encoder, JointDist, ProbTensor, SourceSpec};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub y_cardinality: usize,
    pub block: Vec<f64>,
    pub shift: Vec<f64>,
    pub num_sources: usize,
}

impl SynthSpec {
    /// `|Y| = 8`, `l = [0.5, 0.5]`, `δ = 0`: each symbol determines its label.
    pub fn invertible(num_sources: usize) -> Self {
        Self {
            y_cardinality: 8,
            block: vec![0.5, 0.5],
            shift: vec![0.0, 0.0],
            num_sources,
        }
    }

    /// `|Y| = 8`, `l = [0.5, 0.5]`, `δ = [0.05, 0.05]`.
    pub fn non_invertible(num_sources: usize) -> Self {
        Self {
            shift: vec![0.05, 0.05],
            ..Self::invertible(num_sources)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.y_cardinality < 1 {
            return Err(Error::InvalidSpec("y_cardinality must be >= 1".into()));
        }
        if self.num_sources < 2 {
            return Err(Error::InvalidSpec(format!(
                "num_sources must be >= 2, got {}",
                self.num_sources
            )));
        }
        if self.block.is_empty() {
            return Err(Error::InvalidSpec("block is empty".into()));
        }
        if self.block.len() != self.shift.len() {
            return Err(Error::InvalidSpec(format!(
                "block has {} entries but shift has {}",
                self.block.len(),
                self.shift.len()
            )));
        }
        for (j, (&l, &d)) in self.block.iter().zip(&self.shift).enumerate() {
            if !(l.is_finite() && d.is_finite() && 0.0 <= d && d <= l) {
                return Err(Error::InvalidSpec(format!(
                    "need 0 <= shift[{j}] <= block[{j}], got shift {d}, block {l}"
                )));
            }
        }
        let s: f64 = self.block.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidSpec(format!("block sums to {s}, need 1")));
        }
        if self.alphabet_size() < 2 {
            return Err(Error::InvalidSpec(
                "source alphabet b*|Y| must be >= 2".into(),
            ));
        }
        Ok(())
    }

    /// `|X_i| = b·|Y|`.
    pub fn alphabet_size(&self) -> usize {
        self.block.len() * self.y_cardinality
    }

    /// Source spec with `|Z| = |Y|`.
    pub fn source_spec(&self) -> Result<SourceSpec> {
        self.validate()?;
        SourceSpec::new(
            vec![self.alphabet_size(); self.num_sources],
            self.y_cardinality,
        )
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: SynthSpec = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Column-stochastic kernel `P(X_i|Y)`, rows indexed by `x`, columns by `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceKernel {
    pub x_size: usize,
    pub y_size: usize,
    pub data: Vec<f64>,
}

impl SourceKernel {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[x * self.y_size + y]
    }

    pub fn column(&self, y: usize) -> Vec<f64> {
        (0..self.x_size).map(|x| self.get(x, y)).collect()
    }
}

pub fn build_source_conditional(spec: &SynthSpec) -> Result<SourceKernel> {
    spec.validate()?;
    let ny = spec.y_cardinality;
    let b = spec.block.len();
    let nx = spec.alphabet_size();
    let mut data = vec![0.0; nx * ny];
    for y in 0..ny {
        let next = (y + 1) % ny;
        for j in 0..b {
            data[(y * b + j) * ny + y] += spec.block[j] - spec.shift[j];
            data[(next * b + j) * ny + y] += spec.shift[j];
        }
    }
    Ok(SourceKernel {
        x_size: nx,
        y_size: ny,
        data,
    })
}

/// `P(X^V, Y)` with the label as the last axis.
pub fn build_labeled_joint(spec: &SynthSpec) -> Result<ProbTensor> {
    let src = spec.source_spec()?;
    let k = build_source_conditional(spec)?;
    let ny = spec.y_cardinality;
    let columns: Vec<Vec<f64>> = (0..ny).map(|y| k.column(y)).collect();
    let mut out = vec![0.0; src.joint_size() * ny];
    for (y, col) in columns.iter().enumerate() {
        let mut prod = vec![1.0 / ny as f64];
        for _ in 0..spec.num_sources {
            prod = prod
                .iter()
                .flat_map(|&a| col.iter().map(move |&c| a * c))
                .collect();
        }
        for (x, p) in prod.into_iter().enumerate() {
            out[x * ny + y] = p;
        }
    }
    let mut dims = src.cardinalities().to_vec();
    dims.push(ny);
    ProbTensor::new(dims, out)
}

/// `P(X^V) = Σ_y P(y) ∏ P(X_i|y)` with uniform `P(y)`.
pub fn build_joint(spec: &SynthSpec) -> Result<JointDist> {
    let src = spec.source_spec()?;
    let labeled = build_labeled_joint(spec)?;
    let v = spec.num_sources;
    let joint = labeled.marginal(&(0..v).collect::<Vec<_>>())?;
    JointDist::new(src, joint.data)
}

/// The true label posterior `P(Y|X^V)` as an encoder with `|Z| = |Y|`.
/// Realizations outside the support get uniform rows.
pub fn posterior_encoder(spec: &SynthSpec) -> Result<Encoder> {
    let src = spec.source_spec()?;
    let labeled = build_labeled_joint(spec)?;
    let ny = spec.y_cardinality;
    let mut rows = labeled.data;
    for row in rows.chunks_mut(ny) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        } else {
            row.iter_mut().for_each(|v| *v = 1.0 / ny as f64);
        }
    }
    Ok(Encoder::from_rows_unchecked(src, rows))
}

/// Smallest index whose running sum strictly exceeds `u`. Falls back to the
/// last index with positive mass when rounding leaves the total below `u`.
pub fn inverse_transform(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if acc > u {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub spec: SourceSpec,
    pub y_cardinality: usize,
    pub samples: Vec<(Vec<usize>, usize)>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let v = self.spec.num_sources();
        let mut header: Vec<String> = (1..=v).map(|i| format!("x{i}")).collect();
        header.push("y".into());
        wr.write_record(&header)?;
        for (x, y) in &self.samples {
            let mut rec: Vec<String> = x.iter().map(usize::to_string).collect();
            rec.push(y.to_string());
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads the `x1,...,xV,y` layout, checking every symbol against `spec`.
    pub fn read_csv<R: Read>(r: R, spec: &SourceSpec, y_cardinality: usize) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let v = spec.num_sources();
        let width = rd.headers()?.len();
        if width != v + 1 {
            return Err(Error::ShapeMismatch(format!(
                "dataset has {width} columns, expected {}",
                v + 1
            )));
        }
        let mut samples = Vec::new();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            let vals: Vec<usize> = rec
                .iter()
                .map(|f| {
                    f.trim().parse::<usize>().map_err(|e| {
                        Error::Format(format!("row {}: {f:?}: {e}", line + 1))
                    })
                })
                .collect::<Result<_>>()?;
            let (x, y) = (vals[..v].to_vec(), vals[v]);
            spec.flatten(&x)?;
            if y >= y_cardinality {
                return Err(Error::InvalidArgument(format!(
                    "row {}: label {y} out of range for |Y| = {y_cardinality}",
                    line + 1
                )));
            }
            samples.push((x, y));
        }
        Ok(Self {
            spec: spec.clone(),
            y_cardinality,
            samples,
        })
    }
}

/// Draws `y` uniformly, then every `x_i` from column `y` by inverse transform.
/// Uniform draws are consumed in the order `y, x_1, ..., x_V` per sample.
pub fn sample_dataset(spec: &SynthSpec, n: usize, seed: u64) -> Result<LabeledDataset> {
    if n < 1 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let src = spec.source_spec()?;
    let k = build_source_conditional(spec)?;
    let ny = spec.y_cardinality;
    let columns: Vec<Vec<f64>> = (0..ny).map(|y| k.column(y)).collect();
    let py = vec![1.0 / ny as f64; ny];
    let mut r = rng::rng(seed);
    let samples = (0..n)
        .map(|_| {
            let y = inverse_transform(&py, r.gen::<f64>());
            let x = (0..spec.num_sources)
                .map(|_| inverse_transform(&columns[y], r.gen::<f64>()))
                .collect();
            (x, y)
        })
        .collect();
    Ok(LabeledDataset {
        spec: src,
        y_cardinality: ny,
        samples,
    })
}
