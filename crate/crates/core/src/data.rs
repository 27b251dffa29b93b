//! Datasets, CSV ingestion, deterministic splits and synthetic generators.
//!
//! The synthetic generators exist so that every metric has a ground truth:
//! the `finite` kind samples from an explicit [`FiniteJoint`] over a small
//! alphabet (exact conditionals are then available by enumeration), the
//! `planted` kind draws Gaussian features with a logistic label model whose
//! zero weights mark known-irrelevant features, and `moons` is a small
//! nonlinear 2-D benchmark.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::pairwise_sum;
use crate::rng::{self, Rng};

/// Row-major feature matrix plus integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    feature_names: Vec<String>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(
        rows: Vec<Vec<f64>>,
        labels: Vec<usize>,
        feature_names: Vec<String>,
        n_classes: usize,
    ) -> Result<Self> {
        let d = feature_names.len();
        if d == 0 {
            return Err(Error::invalid("dataset needs at least one feature"));
        }
        if n_classes == 0 {
            return Err(Error::invalid("n_classes must be positive"));
        }
        if rows.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: rows.len(),
                got: labels.len(),
            });
        }
        let mut features = Vec::with_capacity(rows.len() * d);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("row {i} has a non-finite value")));
            }
            features.extend_from_slice(row);
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= n_classes) {
            return Err(Error::LabelOutOfRange {
                row: i,
                label: y as i64,
                n_classes,
            });
        }
        Ok(Self {
            features,
            labels,
            feature_names,
            n_classes,
        })
    }

    /// Dataset with generated names `x0, x1, ...`.
    pub fn from_rows(rows: Vec<Vec<f64>>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        let names = (0..d).map(|i| format!("x{i}")).collect();
        Self::new(rows, labels, names, n_classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_features();
        &self.features[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.features.chunks_exact(self.n_features())
    }

    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        let d = self.n_features();
        let mut features = Vec::with_capacity(idx.len() * d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            labels,
            feature_names: self.feature_names.clone(),
            n_classes: self.n_classes,
        }
    }

    /// Copy without the given feature columns; remaining columns keep their order.
    pub fn drop_columns(&self, drop: &[usize]) -> Result<Dataset> {
        let keep: Vec<usize> = (0..self.n_features())
            .filter(|c| !drop.contains(c))
            .collect();
        if keep.is_empty() {
            return Err(Error::invalid("cannot drop every feature column"));
        }
        let mut features = Vec::with_capacity(self.len() * keep.len());
        for row in self.rows() {
            features.extend(keep.iter().map(|&c| row[c]));
        }
        Ok(Dataset {
            features,
            labels: self.labels.clone(),
            feature_names: keep.iter().map(|&c| self.feature_names[c].clone()).collect(),
            n_classes: self.n_classes,
        })
    }

    /// Writes `feature_names..., label_column` with shortest round-trip decimals.
    pub fn write_csv(&self, path: &Path, label_column: &str) -> Result<()> {
        let mut out = String::new();
        out.push_str(&self.feature_names.join(","));
        out.push(',');
        out.push_str(label_column);
        out.push('\n');
        for (row, y) in self.rows().zip(&self.labels) {
            for v in row {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{y}\n"));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Result of CSV ingestion: the dataset and how many rows were dropped for
/// containing non-finite values.
#[derive(Debug, Clone)]
pub struct CsvLoad {
    pub dataset: Dataset,
    pub rejected_rows: usize,
}

/// Loads a comma-separated file with a header row. Every column except
/// `label_column` becomes a feature, in file order. Rows with a NaN or
/// infinite feature are dropped and counted. Row numbers in errors are
/// 1-based and count data rows only.
pub fn load_csv_dataset(path: &Path, label_column: &str, n_classes: usize) -> Result<CsvLoad> {
    if n_classes == 0 {
        return Err(Error::invalid("n_classes must be positive"));
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .quoting(false)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::MissingColumn(label_column.to_owned()))?;
    let feature_cols: Vec<usize> = (0..header.len()).filter(|&c| c != label_idx).collect();
    let names: Vec<String> = feature_cols.iter().map(|&c| header[c].clone()).collect();

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut rejected = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row_no = i + 1;
        let cell = |c: usize| record.get(c).unwrap_or("");
        let raw_label = cell(label_idx);
        let label: i64 = raw_label.parse().map_err(|_| Error::ParseCell {
            row: row_no,
            column: label_column.to_owned(),
            value: raw_label.to_owned(),
        })?;
        if label < 0 || label as usize >= n_classes {
            return Err(Error::LabelOutOfRange {
                row: row_no,
                label,
                n_classes,
            });
        }
        let mut row = Vec::with_capacity(feature_cols.len());
        for &c in &feature_cols {
            let raw = cell(c);
            let v: f64 = raw.parse().map_err(|_| Error::ParseCell {
                row: row_no,
                column: header[c].clone(),
                value: raw.to_owned(),
            })?;
            row.push(v);
        }
        if row.iter().any(|v| !v.is_finite()) {
            rejected += 1;
            continue;
        }
        rows.push(row);
        labels.push(label as usize);
    }
    if rows.is_empty() {
        return Err(Error::invalid(format!(
            "{} contains no usable rows",
            path.display()
        )));
    }
    Ok(CsvLoad {
        dataset: Dataset::new(rows, labels, names, n_classes)?,
        rejected_rows: rejected,
    })
}

pub fn feature_means(ds: &Dataset) -> Vec<f64> {
    let n = ds.len() as f64;
    (0..ds.n_features())
        .map(|c| {
            let col: Vec<f64> = ds.rows().map(|r| r[c]).collect();
            pairwise_sum(&col) / n
        })
        .collect()
}

/// Per-feature z-scoring fitted on one dataset and applied to others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &Dataset) -> Self {
        let mean = feature_means(ds);
        let n = ds.len() as f64;
        let scale = (0..ds.n_features())
            .map(|c| {
                let sq: Vec<f64> = ds.rows().map(|r| (r[c] - mean[c]).powi(2)).collect();
                let sd = (pairwise_sum(&sq) / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        let mut out = ds.clone();
        let d = ds.n_features();
        for (k, v) in out.features.iter_mut().enumerate() {
            let c = k % d;
            *v = (*v - self.mean[c]) / self.scale[c];
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Finite joint distributions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportPoint {
    pub x: Vec<f64>,
    pub y: usize,
}

/// An explicit joint distribution over finitely many `(x, y)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteJoint {
    pub support: Vec<SupportPoint>,
    pub probs: Vec<f64>,
    pub n_classes: usize,
}

impl FiniteJoint {
    pub fn new(support: Vec<SupportPoint>, probs: Vec<f64>, n_classes: usize) -> Result<Self> {
        let joint = Self {
            support,
            probs,
            n_classes,
        };
        joint.validate()?;
        Ok(joint)
    }

    pub fn validate(&self) -> Result<()> {
        if self.support.is_empty() || self.support.len() != self.probs.len() {
            return Err(Error::invalid(
                "joint needs a nonempty support with one probability per point",
            ));
        }
        if self.n_classes == 0 {
            return Err(Error::invalid("n_classes must be positive"));
        }
        let d = self.support[0].x.len();
        if d == 0 {
            return Err(Error::invalid("support points need at least one feature"));
        }
        let mut seen = HashSet::new();
        for p in &self.support {
            if p.x.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: p.x.len(),
                });
            }
            if p.y >= self.n_classes || p.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("support point has invalid label or value"));
            }
            let key: Vec<u64> = p.x.iter().map(|v| v.to_bits()).collect();
            if !seen.insert((key, p.y)) {
                return Err(Error::invalid("duplicate support point"));
            }
        }
        if self.probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::invalid("probabilities must be finite and nonnegative"));
        }
        let total = pairwise_sum(&self.probs);
        if total == 0.0 {
            return Err(Error::invalid("degenerate joint: all probabilities are zero"));
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        self.support[0].x.len()
    }

    pub fn marginal_y(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n_classes];
        for (pt, &p) in self.support.iter().zip(&self.probs) {
            m[pt.y] += p;
        }
        m
    }

    /// Sorted distinct values taken by each coordinate.
    pub fn alphabets(&self) -> Vec<Vec<f64>> {
        (0..self.n_features())
            .map(|c| {
                let mut vals: Vec<f64> = self.support.iter().map(|p| p.x[c]).collect();
                vals.sort_by(f64::total_cmp);
                vals.dedup();
                vals
            })
            .collect()
    }

    /// Draws one support index by inverse-CDF on a uniform draw.
    pub fn sample_index(&self, cdf: &[f64], rng: &mut Rng) -> usize {
        let u = rng::uniform_f64(rng) * cdf[cdf.len() - 1];
        cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
    }

    pub fn cdf(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect()
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Dataset {
        let cdf = self.cdf();
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let pt = &self.support[self.sample_index(&cdf, rng)];
            rows.push(pt.x.clone());
            labels.push(pt.y);
        }
        Dataset::from_rows(rows, labels, self.n_classes).expect("joint validated")
    }
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

fn default_noise() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GeneratorKind {
    Finite {
        joint: FiniteJoint,
    },
    /// Binary task: `x ~ N(0, I)`, `P(y = 1 | x) = sigmoid(w . x + bias)`.
    Planted {
        weights: Vec<f64>,
        #[serde(default)]
        bias: f64,
    },
    Moons {
        #[serde(default = "default_noise")]
        noise: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    #[serde(flatten)]
    pub kind: GeneratorKind,
    pub version: u32,
}

impl GeneratorSpec {
    pub fn new(kind: GeneratorKind) -> Self {
        Self { kind, version: 1 }
    }
}

/// Draws `n` i.i.d. samples. Returns the joint only for the `finite` kind.
pub fn make_synthetic(
    spec: &GeneratorSpec,
    n: usize,
    seed: u64,
) -> Result<(Dataset, Option<FiniteJoint>)> {
    if spec.version != 1 {
        return Err(Error::UnsupportedVersion(spec.version));
    }
    if n == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    let mut rng = rng::component_rng(seed, "generator");
    match &spec.kind {
        GeneratorKind::Finite { joint } => {
            joint.validate()?;
            Ok((joint.sample(n, &mut rng), Some(joint.clone())))
        }
        GeneratorKind::Planted { weights, bias } => {
            if weights.is_empty() || weights.iter().any(|w| !w.is_finite()) {
                return Err(Error::invalid("planted generator needs finite weights"));
            }
            let d = weights.len();
            let mut rows = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let x: Vec<f64> = (0..d).map(|_| rng::standard_normal(&mut rng)).collect();
                let z: f64 = bias + x.iter().zip(weights).map(|(a, w)| a * w).sum::<f64>();
                let p1 = 1.0 / (1.0 + (-z).exp());
                labels.push(usize::from(rng::uniform_f64(&mut rng) < p1));
                rows.push(x);
            }
            Ok((Dataset::from_rows(rows, labels, 2)?, None))
        }
        GeneratorKind::Moons { noise } => {
            if !(*noise >= 0.0) {
                return Err(Error::invalid("moons noise must be nonnegative"));
            }
            let mut rows = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let y = usize::from(rng::uniform_f64(&mut rng) < 0.5);
                let t = std::f64::consts::PI * rng::uniform_f64(&mut rng);
                let (a, b) = if y == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                rows.push(vec![
                    a + noise * rng::standard_normal(&mut rng),
                    b + noise * rng::standard_normal(&mut rng),
                ]);
                labels.push(y);
            }
            Ok((Dataset::from_rows(rows, labels, 2)?, None))
        }
    }
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fractions: (f64, f64, f64),
    pub seed: u64,
}

/// Shuffled partition into (train, val, test). Part sizes are
/// `round(f_train * N)`, `round(f_val * N)` and the remainder.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = spec.fractions;
    if [a, b, c].iter().any(|f| !(*f >= 0.0)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions ({a}, {b}, {c}) must be nonnegative and sum to 1"
        )));
    }
    let n = ds.len();
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let n_test = n - n_train - n_val;
    for (name, frac, size) in [("train", a, n_train), ("val", b, n_val), ("test", c, n_test)] {
        if frac > 0.0 && size == 0 {
            return Err(Error::invalid(format!(
                "{name} fraction {frac} yields no rows out of {n}"
            )));
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut rng::component_rng(spec.seed, "split"), &mut idx);
    Ok((
        ds.select_rows(&idx[..n_train]),
        ds.select_rows(&idx[n_train..n_train + n_val]),
        ds.select_rows(&idx[n_train + n_val..]),
    ))
}

/// Index form of [`split`], used by tests to check the partition property.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<[Vec<usize>; 3]> {
    let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
    let ds = Dataset::from_rows(rows, vec![0; n], 1)?;
    let (a, b, c) = split(&ds, spec)?;
    let ids = |d: &Dataset| d.rows().map(|r| r[0] as usize).collect::<Vec<_>>();
    Ok([ids(&a), ids(&b), ids(&c)])
}
