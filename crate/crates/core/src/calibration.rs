//! Temperature scaling and perturbation-level recalibration (ReCalX).
//!
//! A [`ReCalXCalibrator`] splits the perturbation level `lambda(S)` range
//! `[0, 1]` into `B` equal-width bins, left-closed with the last bin closed,
//! and holds one temperature per bin. Temperatures are fitted by minimising
//! mean cross-entropy over `log10 T in [-2, 2]` with golden-section search.
//! Dividing logits by `T > 0` preserves the ranking of classes, so
//! recalibration never changes a predicted class.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::numeric::{floored_ln, pairwise_sum, softmax};
use crate::perturbation::{Coalition, PerturbationStrategy};
use crate::rng;

pub const T_MIN: f64 = 0.01;
pub const T_MAX: f64 = 100.0;

const LOG_T_LO: f64 = -2.0;
const LOG_T_HI: f64 = 2.0;
const LOG_T_TOL: f64 = 1e-4;
const FLAT_TOL: f64 = 1e-12;

pub fn apply_temperature(z: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(T_MIN..=T_MAX).contains(&t) {
        return Err(Error::TemperatureOutOfRange(t));
    }
    let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
    Ok(softmax(&scaled))
}

/// `log softmax(z / t)`. Unlike the probabilities, these never underflow
/// to equal values, so class rankings stay strict at extreme temperatures.
pub fn temperature_log_probs(z: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(T_MIN..=T_MAX).contains(&t) {
        return Err(Error::TemperatureOutOfRange(t));
    }
    let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(scaled.into_iter().map(|v| v - lse).collect())
}

/// Mean cross-entropy of `softmax(z / t)` against the labels.
pub fn temperature_objective(logits: &[Vec<f64>], labels: &[usize], t: f64) -> f64 {
    let losses: Vec<f64> = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
            -floored_ln(softmax(&scaled)[y])
        })
        .collect();
    pairwise_sum(&losses) / logits.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitWarning {
    /// Only one label present; the optimum sits on the search boundary.
    SingleClass,
    /// Objective constant over the search range; `T = 1` returned.
    FlatObjective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    /// Objective at `T = 1`.
    pub ce_before: f64,
    pub ce_after: f64,
    pub warning: Option<FitWarning>,
    /// Best objective value after each golden-section step.
    pub trace: Vec<f64>,
}

/// Golden-section search over `log10 T`, bracket `[-2, 2]`, stopping when
/// the bracket is narrower than `1e-4`.
pub fn fit_temperature_logits(logits: &[Vec<f64>], labels: &[usize]) -> Result<TemperatureFit> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::invalid(
            "temperature fitting needs a nonempty set of (logits, label) pairs",
        ));
    }
    let f = |u: f64| temperature_objective(logits, labels, 10f64.powf(u));
    let ce_before = f(0.0);

    let probes = [f(LOG_T_LO), ce_before, f(LOG_T_HI)];
    let spread = probes.iter().cloned().fold(f64::MIN, f64::max)
        - probes.iter().cloned().fold(f64::MAX, f64::min);
    if spread <= FLAT_TOL * (1.0 + ce_before.abs()) {
        return Ok(TemperatureFit {
            temperature: 1.0,
            ce_before,
            ce_after: ce_before,
            warning: Some(FitWarning::FlatObjective),
            trace: vec![ce_before],
        });
    }

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (LOG_T_LO, LOG_T_HI);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    let mut best = (0.0, ce_before);
    let mut trace = Vec::new();
    for (u, v) in [(LOG_T_LO, probes[0]), (LOG_T_HI, probes[2]), (c, fc), (d, fd)] {
        if v < best.1 {
            best = (u, v);
        }
    }
    trace.push(best.1);
    while b - a > LOG_T_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
            if fc < best.1 {
                best = (c, fc);
            }
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
            if fd < best.1 {
                best = (d, fd);
            }
        }
        trace.push(best.1);
    }

    let single_class = labels.iter().all(|&y| y == labels[0]);
    Ok(TemperatureFit {
        temperature: 10f64.powf(best.0).clamp(T_MIN, T_MAX),
        ce_before,
        ce_after: best.1,
        warning: single_class.then_some(FitWarning::SingleClass),
        trace,
    })
}

/// Classical temperature scaling on unperturbed validation data.
pub fn fit_temperature(model: &Classifier, val: &Dataset) -> Result<TemperatureFit> {
    let logits = val
        .rows()
        .map(|x| model.logits(x))
        .collect::<Result<Vec<_>>>()?;
    fit_temperature_logits(&logits, val.labels())
}

// ---------------------------------------------------------------------------
// ReCalX
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratorMeta {
    pub strategy: String,
    pub seed: u64,
    pub validation_size: usize,
    pub bin_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReCalXCalibrator {
    edges: Vec<f64>,
    temperatures: Vec<f64>,
    meta: CalibratorMeta,
}

#[derive(Serialize, Deserialize)]
struct CalibratorFile {
    version: u32,
    #[serde(rename = "B")]
    bins: usize,
    edges: Vec<f64>,
    temperatures: Vec<f64>,
    strategy: String,
    seed: u64,
    validation_size: usize,
    bin_counts: Vec<usize>,
}

/// Bin of a coalition: `min(floor((d - |S|) * B / d), B - 1)` in exact
/// integer arithmetic.
pub fn bin_for_coalition(s: &Coalition, bins: usize) -> usize {
    (s.n_perturbed() * bins / s.d()).min(bins - 1)
}

/// Bin of a raw level in `[0, 1]`; a `1e-9` slack absorbs representation
/// error for levels that are exact bin edges.
pub fn bin_for_level(level: f64, bins: usize) -> usize {
    ((level * bins as f64 + 1e-9).floor().max(0.0) as usize).min(bins - 1)
}

impl ReCalXCalibrator {
    pub fn new(temperatures: Vec<f64>, meta: CalibratorMeta) -> Result<Self> {
        let bins = temperatures.len();
        if bins == 0 {
            return Err(Error::invalid("a calibrator needs at least one bin"));
        }
        if let Some(&t) = temperatures.iter().find(|t| !(T_MIN..=T_MAX).contains(*t)) {
            return Err(Error::TemperatureOutOfRange(t));
        }
        let edges = (0..=bins).map(|b| b as f64 / bins as f64).collect();
        Ok(Self {
            edges,
            temperatures,
            meta,
        })
    }

    /// Single-bin calibrator applying one temperature to every coalition.
    pub fn uniform(temperature: f64, meta: CalibratorMeta) -> Result<Self> {
        Self::new(vec![temperature], meta)
    }

    pub fn bins(&self) -> usize {
        self.temperatures.len()
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn temperatures(&self) -> &[f64] {
        &self.temperatures
    }

    pub fn meta(&self) -> &CalibratorMeta {
        &self.meta
    }

    pub fn select_temperature(&self, s: &Coalition) -> f64 {
        self.temperatures[bin_for_coalition(s, self.bins())]
    }

    pub fn temperature_for_level(&self, level: f64) -> f64 {
        self.temperatures[bin_for_level(level, self.bins())]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&CalibratorFile {
            version: 1,
            bins: self.bins(),
            edges: self.edges.clone(),
            temperatures: self.temperatures.clone(),
            strategy: self.meta.strategy.clone(),
            seed: self.meta.seed,
            validation_size: self.meta.validation_size,
            bin_counts: self.meta.bin_counts.clone(),
        })?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let f: CalibratorFile = serde_json::from_str(json)?;
        if f.version != 1 {
            return Err(Error::UnsupportedVersion(f.version));
        }
        if f.bins != f.temperatures.len() {
            return Err(Error::invalid("B does not match the number of temperatures"));
        }
        let c = Self::new(
            f.temperatures,
            CalibratorMeta {
                strategy: f.strategy,
                seed: f.seed,
                validation_size: f.validation_size,
                bin_counts: f.bin_counts,
            },
        )?;
        if c.edges.len() != f.edges.len()
            || c.edges.iter().zip(&f.edges).any(|(a, b)| (a - b).abs() > 1e-12)
        {
            return Err(Error::invalid("calibrator edges are not equal-width"));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinFit {
    pub bin: usize,
    /// Achievable perturbation levels `k / d` falling in this bin.
    pub levels: Vec<f64>,
    pub samples: usize,
    pub temperature: f64,
    pub ce_before: f64,
    pub ce_after: f64,
    /// Set when the bin had no achievable level and copied a neighbour.
    pub inherited_from: Option<usize>,
    pub warning: Option<FitWarning>,
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub bins: Vec<BinFit>,
    pub size_rule: String,
    pub reps_per_level: usize,
    pub validation_size: usize,
}

/// Fits one temperature per perturbation-level bin.
///
/// For bin `b`, every validation point contributes `reps_per_level`
/// perturbed copies. Each copy draws a perturbed-feature count `k`
/// uniformly among the counts whose level `k / d` lies in the bin, then a
/// uniform coalition with `d - k` kept features. Bin `b` samples from the
/// stream `mix(derive_seed(seed, "recalx"), b)`, so bins are independent.
pub fn fit_recalx(
    model: &Classifier,
    val: &Dataset,
    strategy: &PerturbationStrategy,
    bins: usize,
    reps_per_level: usize,
    seed: u64,
) -> Result<(ReCalXCalibrator, FitReport)> {
    if bins == 0 || reps_per_level == 0 {
        return Err(Error::invalid("bins and reps_per_level must be at least 1"));
    }
    if val.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let d = model.input_dim();
    if val.n_features() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: val.n_features(),
        });
    }
    strategy.validate(d)?;
    let mut counts_per_bin: Vec<Vec<usize>> = vec![Vec::new(); bins];
    for k in 0..=d {
        counts_per_bin[(k * bins / d).min(bins - 1)].push(k);
    }
    let base = rng::derive_seed(seed, "recalx");

    let fitted: Vec<Option<BinFit>> = (0..bins)
        .into_par_iter()
        .map(|b| -> Result<Option<BinFit>> {
            let ks = &counts_per_bin[b];
            if ks.is_empty() {
                return Ok(None);
            }
            let bin_seed = rng::mix(base, &[b as u64]);
            let mut rng = rng::rng_from(bin_seed);
            let mut logits = Vec::with_capacity(val.len() * reps_per_level);
            let mut labels = Vec::with_capacity(val.len() * reps_per_level);
            for (i, (x, &y)) in val.rows().zip(val.labels()).enumerate() {
                for r in 0..reps_per_level {
                    let k = ks[rng::uniform_index(&mut rng, ks.len())];
                    let s = Coalition::new(rng::subset_mask(&mut rng, d, d - k), d)?;
                    let call_seed = rng::mix(bin_seed, &[i as u64, r as u64]);
                    logits.push(model.restricted_logits(x, &s, strategy, call_seed)?);
                    labels.push(y);
                }
            }
            let fit = fit_temperature_logits(&logits, &labels)?;
            Ok(Some(BinFit {
                bin: b,
                levels: ks.iter().map(|&k| k as f64 / d as f64).collect(),
                samples: logits.len(),
                temperature: fit.temperature,
                ce_before: fit.ce_before,
                ce_after: fit.ce_after,
                inherited_from: None,
                warning: fit.warning,
                trace: fit.trace,
            }))
        })
        .collect::<Result<Vec<_>>>()?;

    let achievable: Vec<usize> = (0..bins).filter(|&b| fitted[b].is_some()).collect();
    let report_bins: Vec<BinFit> = (0..bins)
        .map(|b| match &fitted[b] {
            Some(f) => f.clone(),
            None => {
                // nearest achievable bin, lower index on ties
                let src = *achievable
                    .iter()
                    .min_by_key(|&&a| (a.abs_diff(b), a))
                    .expect("bin containing level 0 is always achievable");
                let f = fitted[src].as_ref().expect("achievable");
                BinFit {
                    bin: b,
                    levels: Vec::new(),
                    samples: 0,
                    temperature: f.temperature,
                    ce_before: f64::NAN,
                    ce_after: f64::NAN,
                    inherited_from: Some(src),
                    warning: None,
                    trace: Vec::new(),
                }
            }
        })
        .collect();

    let calibrator = ReCalXCalibrator::new(
        report_bins.iter().map(|b| b.temperature).collect(),
        CalibratorMeta {
            strategy: strategy.name().to_owned(),
            seed,
            validation_size: val.len(),
            bin_counts: report_bins.iter().map(|b| b.samples).collect(),
        },
    )?;
    Ok((
        calibrator,
        FitReport {
            bins: report_bins,
            size_rule: "perturbed-feature count uniform over the counts whose level falls in the bin; kept set uniform of that size".into(),
            reps_per_level,
            validation_size: val.len(),
        },
    ))
}
