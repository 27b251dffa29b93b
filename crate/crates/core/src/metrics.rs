//! Information-theoretic calibration metrics.
//!
//! Everything here is built from two primitives, cross-entropy and KL
//! divergence, plus an estimate of `P(Y | f(X))`. For predictors with a
//! finite output range the conditional is estimated exactly by grouping
//! identical prediction vectors; otherwise a Gaussian Nadaraya-Watson
//! kernel on the probability simplex is used.
//!
//! The predictive power of a coalition decomposes as
//! `v(S) = KL(P_Y || f_empty) + I(f_S; Y) - CE_KL(f_S)`. With a
//! [`FiniteJoint`] every term can be enumerated exactly, which is what
//! [`exact_decomposition`] does; [`decomposition_report`] computes the same
//! quantities on a sample.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::ReCalXCalibrator;
use crate::data::{Dataset, FiniteJoint};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::numeric::{floored_ln, mean, pairwise_sum, PROB_FLOOR};
use crate::perturbation::{
    coalition_size_for_level, restricted_predict, Coalition, PerturbationStrategy,
};
use crate::rng;

pub const MAX_GROUPS: usize = 10_000;
pub const DEFAULT_BANDWIDTH: f64 = 0.05;

/// Exponent beyond which `exp(-a)` underflows to zero in `f64`.
const KERNEL_CUTOFF: f64 = 745.0;

pub fn cross_entropy(p: &[f64], y: usize) -> f64 {
    -floored_ln(p[y])
}

/// `sum_i p_i ln(p_i / max(q_i, 1e-12))`, terms with `p_i = 0` dropped.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let total: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(PROB_FLOOR).ln()))
        .sum();
    total.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ConditionalEstimatorSpec {
    ExactGroupby,
    Kernel { bandwidth: f64, leave_one_out: bool },
}

impl Default for ConditionalEstimatorSpec {
    fn default() -> Self {
        ConditionalEstimatorSpec::Kernel {
            bandwidth: DEFAULT_BANDWIDTH,
            leave_one_out: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalEstimate {
    pub rows: Vec<Vec<f64>>,
    /// Rows whose leave-one-out weight mass was zero and which fell back to
    /// including themselves.
    pub isolated: usize,
}

fn check_inputs(preds: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if preds.len() < 2 || preds.len() != labels.len() {
        return Err(Error::invalid(
            "conditional estimation needs at least two (prediction, label) pairs",
        ));
    }
    let k = preds[0].len();
    if let Some(p) = preds.iter().find(|p| p.len() != k) {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: p.len(),
        });
    }
    if labels.iter().any(|&y| y >= k) {
        return Err(Error::invalid("label outside the prediction's class range"));
    }
    Ok(k)
}

fn pred_key(p: &[f64]) -> Vec<u64> {
    p.iter().map(|v| (v + 0.0).to_bits()).collect()
}

/// Distinct prediction vectors with per-class label counts, in first-seen order.
struct Groups {
    values: Vec<Vec<f64>>,
    counts: Vec<Vec<f64>>,
    member: Vec<usize>,
}

fn group(preds: &[Vec<f64>], labels: &[usize], k: usize) -> Groups {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut g = Groups {
        values: Vec::new(),
        counts: Vec::new(),
        member: Vec::with_capacity(preds.len()),
    };
    for (p, &y) in preds.iter().zip(labels) {
        let id = *index.entry(pred_key(p)).or_insert_with(|| {
            g.values.push(p.clone());
            g.counts.push(vec![0.0; k]);
            g.values.len() - 1
        });
        g.counts[id][y] += 1.0;
        g.member.push(id);
    }
    g
}

pub fn estimate_conditional(
    preds: &[Vec<f64>],
    labels: &[usize],
    spec: &ConditionalEstimatorSpec,
) -> Result<ConditionalEstimate> {
    let k = check_inputs(preds, labels)?;
    let groups = group(preds, labels, k);
    match *spec {
        ConditionalEstimatorSpec::ExactGroupby => {
            if groups.values.len() > MAX_GROUPS {
                return Err(Error::invalid(format!(
                    "exact group-by needs at most {MAX_GROUPS} distinct predictions, got {}",
                    groups.values.len()
                )));
            }
            let freqs: Vec<Vec<f64>> = groups
                .counts
                .iter()
                .map(|c| {
                    let n: f64 = c.iter().sum();
                    c.iter().map(|v| v / n).collect()
                })
                .collect();
            Ok(ConditionalEstimate {
                rows: groups.member.iter().map(|&g| freqs[g].clone()).collect(),
                isolated: 0,
            })
        }
        ConditionalEstimatorSpec::Kernel {
            bandwidth,
            leave_one_out,
        } => {
            if !(bandwidth > 0.0) {
                return Err(Error::invalid("kernel bandwidth must be positive"));
            }
            let sums = kernel_sums(&groups, bandwidth);
            let mut isolated = 0;
            let rows = groups
                .member
                .iter()
                .zip(labels)
                .map(|(&g, &y)| {
                    let mut acc = sums[g].clone();
                    if leave_one_out {
                        acc[y] -= 1.0;
                        if acc.iter().sum::<f64>() <= f64::MIN_POSITIVE {
                            isolated += 1;
                            acc[y] += 1.0;
                        }
                    }
                    let total: f64 = acc.iter().sum();
                    acc.iter().map(|v| (v / total).max(0.0)).collect()
                })
                .collect();
            Ok(ConditionalEstimate { rows, isolated })
        }
    }
}

/// Kernel-weighted label counts around every distinct prediction,
/// `sum_j exp(-|p_g - p_j|^2 / (2 h^2)) onehot(y_j)`, self included.
/// Candidates are pruned with a window on the first coordinate; pairs
/// beyond the window have weights that underflow to zero anyway.
fn kernel_sums(groups: &Groups, h: f64) -> Vec<Vec<f64>> {
    let n = groups.values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| groups.values[a][0].total_cmp(&groups.values[b][0]));
    let first: Vec<f64> = order.iter().map(|&g| groups.values[g][0]).collect();
    let radius = h * (2.0 * KERNEL_CUTOFF).sqrt();
    let inv = 1.0 / (2.0 * h * h);
    let mut out = vec![Vec::new(); n];
    let sums: Vec<(usize, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|pos| {
            let g = order[pos];
            let u = &groups.values[g];
            let lo = first.partition_point(|&v| v < u[0] - radius);
            let hi = first.partition_point(|&v| v <= u[0] + radius);
            let mut acc = vec![0.0; u.len()];
            for &other in &order[lo..hi] {
                let v = &groups.values[other];
                let dist2: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
                let w = (-dist2 * inv).exp();
                if w > 0.0 {
                    for (a, c) in acc.iter_mut().zip(&groups.counts[other]) {
                        *a += w * c;
                    }
                }
            }
            (g, acc)
        })
        .collect();
    for (g, acc) in sums {
        out[g] = acc;
    }
    out
}

fn empirical_marginal(labels: &[usize], k: usize) -> Vec<f64> {
    let mut m = vec![0.0; k];
    for &y in labels {
        m[y] += 1.0;
    }
    let n = labels.len() as f64;
    m.iter().map(|v| v / n).collect()
}

/// `E[KL(P(Y | f(X)) || f(X))]` with the conditional from `spec`.
pub fn calibration_error_kl(
    preds: &[Vec<f64>],
    labels: &[usize],
    spec: &ConditionalEstimatorSpec,
) -> Result<f64> {
    let cond = estimate_conditional(preds, labels, spec)?;
    let terms: Vec<f64> = cond
        .rows
        .iter()
        .zip(preds)
        .map(|(c, p)| kl_divergence(c, p))
        .collect();
    Ok(mean(&terms))
}

/// `I(f(X); Y) = E[KL(P(Y | f(X)) || P_Y)]` with the empirical label marginal.
pub fn mutual_information(
    preds: &[Vec<f64>],
    labels: &[usize],
    spec: &ConditionalEstimatorSpec,
) -> Result<f64> {
    let cond = estimate_conditional(preds, labels, spec)?;
    let marginal = empirical_marginal(labels, preds[0].len());
    let terms: Vec<f64> = cond.rows.iter().map(|c| kl_divergence(c, &marginal)).collect();
    Ok(mean(&terms))
}

/// Restricted predictions for every row; row `i` perturbs with seed `mix(seed, i)`.
pub fn restricted_predictions(
    model: &Classifier,
    calib: Option<&ReCalXCalibrator>,
    data: &Dataset,
    s: &Coalition,
    strategy: &PerturbationStrategy,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            restricted_predict(model, calib, data.row(i), s, strategy, rng::mix(seed, &[i as u64]))
        })
        .collect()
}

fn mean_loss(preds: &[Vec<f64>], labels: &[usize]) -> f64 {
    let losses: Vec<f64> = preds
        .iter()
        .zip(labels)
        .map(|(p, &y)| cross_entropy(p, y))
        .collect();
    mean(&losses)
}

/// `E[L(f_empty(X), Y)] - E[L(f_S(X), Y)]` over the dataset.
pub fn predictive_power(
    model: &Classifier,
    calib: Option<&ReCalXCalibrator>,
    data: &Dataset,
    s: &Coalition,
    strategy: &PerturbationStrategy,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("predictive power needs data"));
    }
    let empty = Coalition::empty(s.d());
    let base = restricted_predictions(model, calib, data, &empty, strategy, seed)?;
    let with_s = restricted_predictions(model, calib, data, s, strategy, seed)?;
    Ok(mean_loss(&base, data.labels()) - mean_loss(&with_s, data.labels()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecompositionMode {
    Exact,
    Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub coalition: Coalition,
    pub mode: DecompositionMode,
    pub baseline_bias: f64,
    pub mutual_info: f64,
    pub calib_error: f64,
    pub predictive_power: f64,
    /// `v - (bias + MI - CE)`.
    pub residual: f64,
}

impl DecompositionReport {
    fn new(
        coalition: Coalition,
        mode: DecompositionMode,
        baseline_bias: f64,
        mutual_info: f64,
        calib_error: f64,
        predictive_power: f64,
    ) -> Self {
        Self {
            coalition,
            mode,
            baseline_bias,
            mutual_info,
            calib_error,
            predictive_power,
            residual: predictive_power - (baseline_bias + mutual_info - calib_error),
        }
    }
}

/// Weighted decomposition over points `(pred_S, pred_empty, y, weight)`,
/// with the conditional of `Y` given `pred_S` obtained by exact grouping.
fn weighted_decomposition(
    s: Coalition,
    mode: DecompositionMode,
    with_s: &[Vec<f64>],
    empty: &[Vec<f64>],
    labels: &[usize],
    weights: &[f64],
    marginal: &[f64],
) -> DecompositionReport {
    let k = marginal.len();
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut mass: Vec<Vec<f64>> = Vec::new();
    let member: Vec<usize> = with_s
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((p, &y), &w)| {
            let id = *index.entry(pred_key(p)).or_insert_with(|| {
                mass.push(vec![0.0; k]);
                mass.len() - 1
            });
            mass[id][y] += w;
            id
        })
        .collect();
    let cond: Vec<Vec<f64>> = mass
        .iter()
        .map(|m| {
            let t: f64 = m.iter().sum();
            m.iter().map(|v| v / t).collect()
        })
        .collect();
    let weighted = |f: &dyn Fn(usize) -> f64| -> f64 {
        let terms: Vec<f64> = (0..labels.len())
            .filter(|&i| weights[i] > 0.0)
            .map(|i| weights[i] * f(i))
            .collect();
        pairwise_sum(&terms)
    };
    let calib_error = weighted(&|i| kl_divergence(&cond[member[i]], &with_s[i]));
    let mutual_info = weighted(&|i| kl_divergence(&cond[member[i]], marginal));
    let baseline_bias = weighted(&|i| kl_divergence(marginal, &empty[i]));
    let power = weighted(&|i| cross_entropy(&empty[i], labels[i]) - cross_entropy(&with_s[i], labels[i]));
    DecompositionReport::new(s, mode, baseline_bias, mutual_info, calib_error, power)
}

/// All four terms by enumeration over the joint's support. Needs a
/// deterministic strategy so the pushforward of the joint is exact.
pub fn exact_decomposition(
    model: &Classifier,
    calib: Option<&ReCalXCalibrator>,
    joint: &FiniteJoint,
    s: &Coalition,
    strategy: &PerturbationStrategy,
) -> Result<DecompositionReport> {
    if !strategy.is_deterministic() {
        return Err(Error::invalid("exact mode needs a deterministic strategy"));
    }
    let empty = Coalition::empty(s.d());
    let mut with_s = Vec::with_capacity(joint.support.len());
    let mut base = Vec::with_capacity(joint.support.len());
    for pt in &joint.support {
        with_s.push(restricted_predict(model, calib, &pt.x, s, strategy, 0)?);
        base.push(restricted_predict(model, calib, &pt.x, &empty, strategy, 0)?);
    }
    let labels: Vec<usize> = joint.support.iter().map(|p| p.y).collect();
    Ok(weighted_decomposition(
        *s,
        DecompositionMode::Exact,
        &with_s,
        &base,
        &labels,
        &joint.probs,
        &joint.marginal_y(),
    ))
}

/// Sample version of the decomposition: empirical label marginal,
/// conditional from `spec`. The residual is reported, not asserted.
pub fn decomposition_report(
    model: &Classifier,
    calib: Option<&ReCalXCalibrator>,
    data: &Dataset,
    s: &Coalition,
    strategy: &PerturbationStrategy,
    spec: &ConditionalEstimatorSpec,
    seed: u64,
) -> Result<DecompositionReport> {
    let with_s = restricted_predictions(model, calib, data, s, strategy, seed)?;
    let base = restricted_predictions(model, calib, data, &Coalition::empty(s.d()), strategy, seed)?;
    let labels = data.labels();
    let marginal = empirical_marginal(labels, model.n_classes());
    if matches!(spec, ConditionalEstimatorSpec::ExactGroupby) {
        let w = vec![1.0 / data.len() as f64; data.len()];
        return Ok(weighted_decomposition(
            *s,
            DecompositionMode::Estimate,
            &with_s,
            &base,
            labels,
            &w,
            &marginal,
        ));
    }
    let ce = calibration_error_kl(&with_s, labels, spec)?;
    let mi = mutual_information(&with_s, labels, spec)?;
    let bias_terms: Vec<f64> = base.iter().map(|p| kl_divergence(&marginal, p)).collect();
    let power = mean_loss(&base, labels) - mean_loss(&with_s, labels);
    Ok(DecompositionReport::new(
        *s,
        DecompositionMode::Estimate,
        mean(&bias_terms),
        mi,
        ce,
        power,
    ))
}

/// Default level grid: 11 evenly spaced levels `0.0, 0.1, ..., 1.0`.
pub fn default_levels() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelProfile {
    pub version: u32,
    pub strategy: String,
    pub levels: Vec<f64>,
    pub ce_per_level: Vec<f64>,
    pub ce_avg: f64,
    pub ce_max: f64,
    pub estimator: ConditionalEstimatorSpec,
    pub seed: u64,
    pub reps: usize,
}

impl LevelProfile {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,ce\n");
        for (l, ce) in self.levels.iter().zip(&self.ce_per_level) {
            out.push_str(&format!("{l},{ce}\n"));
        }
        out
    }
}

/// Calibration error per perturbation level. At level `lambda` every row
/// contributes `reps` predictions under uniform coalitions of size
/// `round((1 - lambda) d)`; the pooled predictions are scored with
/// [`calibration_error_kl`].
#[allow(clippy::too_many_arguments)]
pub fn per_level_profile(
    model: &Classifier,
    calib: Option<&ReCalXCalibrator>,
    data: &Dataset,
    strategy: &PerturbationStrategy,
    levels: &[f64],
    reps: usize,
    seed: u64,
    spec: &ConditionalEstimatorSpec,
) -> Result<LevelProfile> {
    if levels.is_empty() || levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(Error::invalid("levels must be a nonempty subset of [0, 1]"));
    }
    if reps == 0 || data.is_empty() {
        return Err(Error::invalid("profile needs reps >= 1 and data"));
    }
    let d = model.input_dim();
    let base = rng::derive_seed(seed, "profile");
    let ce_per_level = levels
        .par_iter()
        .enumerate()
        .map(|(li, &level)| {
            let level_seed = rng::mix(base, &[li as u64]);
            let mut rng = rng::rng_from(level_seed);
            let size = coalition_size_for_level(d, level);
            let mut preds = Vec::with_capacity(data.len() * reps);
            let mut labels = Vec::with_capacity(data.len() * reps);
            for (i, (x, &y)) in data.rows().zip(data.labels()).enumerate() {
                for r in 0..reps {
                    let s = Coalition::new(rng::subset_mask(&mut rng, d, size), d)?;
                    let call_seed = rng::mix(level_seed, &[i as u64, r as u64]);
                    preds.push(restricted_predict(model, calib, x, &s, strategy, call_seed)?);
                    labels.push(y);
                }
            }
            calibration_error_kl(&preds, &labels, spec)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(LevelProfile {
        version: 1,
        strategy: strategy.name().to_owned(),
        levels: levels.to_vec(),
        ce_avg: mean(&ce_per_level),
        ce_max: ce_per_level.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        ce_per_level,
        estimator: *spec,
        seed,
        reps,
    })
}

/// Largest exact calibration error over all `2^d` coalitions.
pub fn exact_max_calibration_error(
    model: &Classifier,
    calib: Option<&ReCalXCalibrator>,
    joint: &FiniteJoint,
    strategy: &PerturbationStrategy,
) -> Result<f64> {
    let d = joint.n_features();
    let mut worst = 0.0f64;
    for mask in 0..1u64 << d {
        let s = Coalition::new(mask, d)?;
        worst = worst.max(exact_decomposition(model, calib, joint, &s, strategy)?.calib_error);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SupportPoint;
    use crate::model::bayes_restricted_oracle;

    const EXACT: ConditionalEstimatorSpec = ConditionalEstimatorSpec::ExactGroupby;

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy(&[0.5, 0.5], 0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(cross_entropy(&[1.0, 0.0], 0), 0.0);
        assert!((cross_entropy(&[0.0, 1.0], 0) - 27.631021).abs() < 1e-6);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((kl_divergence(&[0.5, 0.5], &[0.25, 0.75]) - 0.143841).abs() < 1e-6);
    }

    #[test]
    fn conditional_collapses_to_marginal() {
        let preds = vec![vec![0.6, 0.4]; 10];
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let c = estimate_conditional(&preds, &labels, &EXACT).unwrap();
        assert!(c.rows.iter().all(|r| r == &vec![0.5, 0.5]));
        let k = estimate_conditional(&preds, &labels, &ConditionalEstimatorSpec::default())
            .unwrap();
        for r in &k.rows {
            assert!((r[0] - 0.5).abs() < 0.06);
        }
    }

    #[test]
    fn one_hot_predictions_recover_labels() {
        let labels = vec![0, 1, 1, 0, 1];
        let preds: Vec<Vec<f64>> = labels
            .iter()
            .map(|&y| if y == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
            .collect();
        let c = estimate_conditional(&preds, &labels, &EXACT).unwrap();
        assert_eq!(c.rows, preds);
        assert_eq!(calibration_error_kl(&preds, &labels, &EXACT).unwrap(), 0.0);
    }

    #[test]
    fn two_group_counting() {
        // group A: p = (0.8, 0.2), 10 rows with 7 of label 0
        // group B: p = (0.3, 0.7), 10 rows with 3 of label 0
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            preds.push(vec![0.8, 0.2]);
            labels.push(usize::from(i >= 7));
            preds.push(vec![0.3, 0.7]);
            labels.push(usize::from(i >= 3));
        }
        let c = estimate_conditional(&preds, &labels, &EXACT).unwrap();
        for (p, r) in preds.iter().zip(&c.rows) {
            let expected = if p[0] == 0.8 { [0.7, 0.3] } else { [0.3, 0.7] };
            assert!((r[0] - expected[0]).abs() < 1e-15 && (r[1] - expected[1]).abs() < 1e-15);
        }
        // independent count: CE = 0.5 KL((.7,.3)||(.8,.2)) + 0.5 KL((.3,.7)||(.3,.7))
        let expected = 0.5 * (0.7 * (0.7f64 / 0.8).ln() + 0.3 * (0.3f64 / 0.2).ln());
        let ce = calibration_error_kl(&preds, &labels, &EXACT).unwrap();
        assert!((ce - expected).abs() < 1e-12);
    }

    #[test]
    fn constant_prediction_error_is_kl_to_marginal() {
        let preds = vec![vec![0.9, 0.1]; 8];
        let labels = vec![0, 0, 0, 1, 1, 0, 1, 0];
        let q = [5.0 / 8.0, 3.0 / 8.0];
        let ce = calibration_error_kl(&preds, &labels, &EXACT).unwrap();
        assert!((ce - kl_divergence(&q, &[0.9, 0.1])).abs() < 1e-12);
        assert_eq!(mutual_information(&preds, &labels, &EXACT).unwrap(), 0.0);
    }

    #[test]
    fn deterministic_channel_information() {
        let labels = vec![0, 1, 0, 1, 1, 0];
        let preds: Vec<Vec<f64>> = labels
            .iter()
            .map(|&y| if y == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
            .collect();
        let mi = mutual_information(&preds, &labels, &EXACT).unwrap();
        assert!((mi - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn groupby_limit_and_input_errors() {
        let preds: Vec<Vec<f64>> = (0..10_001).map(|i| vec![i as f64 * 1e-6, 0.5]).collect();
        let labels = vec![0; 10_001];
        assert!(estimate_conditional(&preds, &labels, &EXACT).is_err());
        assert!(estimate_conditional(&preds[..1], &labels[..1], &EXACT).is_err());
        let bad = ConditionalEstimatorSpec::Kernel {
            bandwidth: 0.0,
            leave_one_out: false,
        };
        assert!(estimate_conditional(&preds[..5], &labels[..5], &bad).is_err());
    }

    #[test]
    fn loo_isolated_singleton_falls_back() {
        let preds = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let spec = ConditionalEstimatorSpec::Kernel {
            bandwidth: 0.001,
            leave_one_out: true,
        };
        let c = estimate_conditional(&preds, &[1, 0], &spec).unwrap();
        assert_eq!(c.isolated, 2);
        assert_eq!(c.rows, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
    }

    fn identity_joint() -> FiniteJoint {
        FiniteJoint::new(
            vec![
                SupportPoint { x: vec![0.0], y: 0 },
                SupportPoint { x: vec![1.0], y: 1 },
            ],
            vec![0.5, 0.5],
            2,
        )
        .unwrap()
    }

    #[test]
    fn oracle_power_is_log_two() {
        let joint = identity_joint();
        let st = PerturbationStrategy::ZeroBaseline;
        let oracle = bayes_restricted_oracle(&joint, &st).unwrap();
        let r = exact_decomposition(&oracle, None, &joint, &Coalition::full(1), &st).unwrap();
        assert!((r.predictive_power - 2f64.ln()).abs() < 1e-12);
        assert!(r.calib_error < 1e-12);
        let data = joint.sample(400, &mut rng::rng_from(1));
        let v = predictive_power(&oracle, None, &data, &Coalition::full(1), &st, 0).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-9);
        let v0 = predictive_power(&oracle, None, &data, &Coalition::empty(1), &st, 0).unwrap();
        assert_eq!(v0, 0.0);
    }

    #[test]
    fn empty_coalition_collapses_identity() {
        let joint = identity_joint();
        let st = PerturbationStrategy::ZeroBaseline;
        let m = Classifier::scaled(bayes_restricted_oracle(&joint, &st).unwrap(), 3.0);
        let r = exact_decomposition(&m, None, &joint, &Coalition::empty(1), &st).unwrap();
        assert_eq!(r.mutual_info, 0.0);
        assert_eq!(r.predictive_power, 0.0);
        assert!((r.baseline_bias - r.calib_error).abs() < 1e-15);
    }

    #[test]
    fn sample_groupby_decomposition_is_exact_on_empirical_measure() {
        let joint = FiniteJoint::new(
            vec![
                SupportPoint { x: vec![0.0], y: 0 },
                SupportPoint { x: vec![0.0], y: 1 },
                SupportPoint { x: vec![1.0], y: 0 },
                SupportPoint { x: vec![1.0], y: 1 },
            ],
            vec![0.4, 0.1, 0.15, 0.35],
            2,
        )
        .unwrap();
        let st = PerturbationStrategy::ZeroBaseline;
        let m = Classifier::scaled(bayes_restricted_oracle(&joint, &st).unwrap(), 3.0);
        let data = joint.sample(300, &mut rng::rng_from(4));
        let r = decomposition_report(&m, None, &data, &Coalition::full(1), &st, &EXACT, 0)
            .unwrap();
        assert!(r.residual.abs() < 1e-12);
        assert!(r.calib_error > 0.0);
    }

    #[test]
    fn profile_is_deterministic() {
        let joint = identity_joint();
        let st = PerturbationStrategy::ZeroBaseline;
        let oracle = bayes_restricted_oracle(&joint, &st).unwrap();
        let data = joint.sample(500, &mut rng::rng_from(2));
        let run = || {
            per_level_profile(&oracle, None, &data, &st, &default_levels(), 2, 3, &EXACT).unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.ce_max <= 0.01);
        assert_eq!(a.to_csv().lines().next(), Some("level,ce"));
    }
}
