//! Downstream checks on explanations: remove-and-retrain fidelity,
//! sensitivity to small input changes, and the explanation-drift bound
//! relating attribution error to the worst-case calibration error.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split, Dataset, FiniteJoint, SplitSpec};
use crate::error::{Error, Result};
use crate::explainers::{shapley_exact, ValueFunction};
use crate::metrics::exact_max_calibration_error;
use crate::model::{bayes_restricted_oracle, mean_cross_entropy, train_mlp, Classifier, TrainConfig};
use crate::numeric::{argmax, mean, pairwise_sum, std_dev};
use crate::perturbation::PerturbationStrategy;
use crate::rng;

// ---------------------------------------------------------------------------
// ROAR
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoarCurve {
    pub ranking: Vec<usize>,
    pub k_values: Vec<usize>,
    pub loss_per_k: Vec<f64>,
    /// Sample standard deviation over retrain seeds.
    pub std_per_k: Vec<f64>,
    pub seeds: Vec<u64>,
    /// `seed_losses[k_index][seed_index]`.
    pub seed_losses: Vec<Vec<f64>>,
}

impl RoarCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,mean_loss,std_loss");
        for s in &self.seeds {
            out.push_str(&format!(",seed_{s}"));
        }
        out.push('\n');
        for (i, k) in self.k_values.iter().enumerate() {
            out.push_str(&format!("{k},{},{}", self.loss_per_k[i], self.std_per_k[i]));
            for l in &self.seed_losses[i] {
                out.push_str(&format!(",{l}"));
            }
            out.push('\n');
        }
        out
    }

    /// Standard error of the mean at position `i` of `k_values`.
    pub fn std_error(&self, i: usize) -> f64 {
        self.std_per_k[i] / (self.seeds.len() as f64).sqrt()
    }
}

fn check_ranking(ranking: &[usize], d: usize) -> Result<()> {
    let mut seen = vec![false; d];
    if ranking.len() != d || ranking.iter().any(|&i| i >= d || std::mem::replace(&mut seen[i], true)) {
        return Err(Error::invalid(format!("ranking must be a permutation of 0..{d}")));
    }
    Ok(())
}

/// Remove-and-retrain: for each `k`, drop the `k` top-ranked columns,
/// retrain from scratch once per seed on the train part of `split_spec`
/// and record the mean cross-entropy on its test part.
pub fn roar(
    ds: &Dataset,
    split_spec: &SplitSpec,
    ranking: &[usize],
    k_values: &[usize],
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<RoarCurve> {
    let d = ds.n_features();
    check_ranking(ranking, d)?;
    if seeds.is_empty() || k_values.is_empty() {
        return Err(Error::invalid("ROAR needs at least one seed and one k"));
    }
    if let Some(&k) = k_values.iter().find(|&&k| k >= d) {
        return Err(Error::invalid(format!("k = {k} must be below d = {d}")));
    }
    let (train, _, test) = split(ds, split_spec)?;
    if test.is_empty() {
        return Err(Error::invalid("ROAR needs a nonempty test part"));
    }
    let jobs: Vec<(usize, usize)> = (0..k_values.len())
        .flat_map(|ki| (0..seeds.len()).map(move |si| (ki, si)))
        .collect();
    let losses = jobs
        .par_iter()
        .map(|&(ki, si)| {
            let dropped = &ranking[..k_values[ki]];
            let tr = train.drop_columns(dropped)?;
            let te = test.drop_columns(dropped)?;
            let model = train_mlp(&tr, &TrainConfig { seed: seeds[si], ..cfg.clone() })?;
            mean_cross_entropy(&model, &te)
        })
        .collect::<Result<Vec<f64>>>()?;
    let seed_losses: Vec<Vec<f64>> = losses.chunks(seeds.len()).map(<[f64]>::to_vec).collect();
    Ok(RoarCurve {
        ranking: ranking.to_vec(),
        k_values: k_values.to_vec(),
        loss_per_k: seed_losses.iter().map(|l| mean(l)).collect(),
        std_per_k: seed_losses.iter().map(|l| std_dev(l)).collect(),
        seeds: seeds.to_vec(),
        seed_losses,
    })
}

// ---------------------------------------------------------------------------
// Sensitivity
// ---------------------------------------------------------------------------

pub const DEFAULT_RADIUS: f64 = 0.05;
pub const DEFAULT_PROBES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub s_avg: f64,
    pub s_max: f64,
    pub radius: f64,
    pub n_probes: usize,
    pub norm: String,
    /// `||phi(x') - phi(x)||_2` per probe.
    pub per_probe: Vec<f64>,
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Average and maximum L2 change of an explanation over `n_probes` points
/// drawn uniformly from the L-infinity ball of `radius` around `x`.
/// `explain(x, seed)` is called with the same explainer seed for the
/// reference point and every probe, so sampling noise of stochastic
/// explainers does not count as sensitivity.
pub fn sensitivity<F>(explain: F, x: &[f64], radius: f64, n_probes: usize, seed: u64) -> Result<SensitivityReport>
where
    F: Fn(&[f64], u64) -> Result<Vec<f64>> + Sync,
{
    if !(radius >= 0.0) || n_probes == 0 {
        return Err(Error::invalid("sensitivity needs radius >= 0 and n_probes >= 1"));
    }
    let explainer_seed = rng::derive_seed(seed, "sensitivity-explainer");
    let mut rng = rng::component_rng(seed, "sensitivity");
    let probes: Vec<Vec<f64>> = (0..n_probes)
        .map(|_| {
            x.iter()
                .map(|v| v + radius * (2.0 * rng::uniform_f64(&mut rng) - 1.0))
                .collect()
        })
        .collect();
    let reference = explain(x, explainer_seed)?;
    let per_probe = probes
        .par_iter()
        .map(|p| Ok(l2_distance(&explain(p, explainer_seed)?, &reference)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(SensitivityReport {
        s_avg: mean(&per_probe),
        s_max: per_probe.iter().copied().fold(0.0, f64::max),
        radius,
        n_probes,
        norm: "L2".to_owned(),
        per_probe,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSensitivity {
    pub mean_s_avg: f64,
    pub mean_s_max: f64,
    pub sample_ids: Vec<usize>,
    pub reports: Vec<SensitivityReport>,
}

/// [`sensitivity`] on each listed row; row `i` uses `mix(seed, [i])`.
pub fn sensitivity_over_rows<F>(
    explain: F,
    data: &Dataset,
    rows: &[usize],
    radius: f64,
    n_probes: usize,
    seed: u64,
) -> Result<DatasetSensitivity>
where
    F: Fn(&[f64], u64) -> Result<Vec<f64>> + Sync,
{
    let reports = rows
        .par_iter()
        .map(|&i| sensitivity(&explain, data.row(i), radius, n_probes, rng::mix(seed, &[i as u64])))
        .collect::<Result<Vec<_>>>()?;
    let avg: Vec<f64> = reports.iter().map(|r| r.s_avg).collect();
    let max: Vec<f64> = reports.iter().map(|r| r.s_max).collect();
    Ok(DatasetSensitivity {
        mean_s_avg: mean(&avg),
        mean_s_max: mean(&max),
        sample_ids: rows.to_vec(),
        reports,
    })
}

// ---------------------------------------------------------------------------
// Drift bound
// ---------------------------------------------------------------------------

pub const MAX_DRIFT_FEATURES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub delta: f64,
    pub n_trials: usize,
    /// Largest exact calibration error over all coalitions.
    pub ce_max: f64,
    /// `2 ce_max + sqrt(8 ln(1 / delta))`.
    pub bound: f64,
    pub violation_rate: f64,
    pub mean_lhs: f64,
    pub max_lhs: f64,
    /// `(1/d) ||phi - phi*||^2` per trial.
    pub lhs: Vec<f64>,
    pub note: Option<String>,
}

/// Compares exact Shapley explanations of `miscal` with those of the Bayes
/// oracle on points drawn from `joint`. The target class is the one
/// `miscal` predicts on the unperturbed point, shared by both explanations.
/// Probability in the bound is read as over draws of `x`.
pub fn drift_bound_check(
    joint: &FiniteJoint,
    miscal: &Classifier,
    strategy: &PerturbationStrategy,
    delta: f64,
    n_trials: usize,
    seed: u64,
) -> Result<DriftReport> {
    let d = joint.n_features();
    if d > MAX_DRIFT_FEATURES {
        return Err(Error::invalid(format!(
            "the drift check enumerates every coalition and needs d <= {MAX_DRIFT_FEATURES}"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) || n_trials == 0 {
        return Err(Error::invalid("drift check needs 0 < delta < 1 and n_trials >= 1"));
    }
    let oracle = bayes_restricted_oracle(joint, strategy)?;
    let ce_max = exact_max_calibration_error(miscal, None, joint, strategy)?;
    let slack = (8.0 * (1.0 / delta).ln()).sqrt();
    let bound = 2.0 * ce_max + slack;

    let mut rng = rng::component_rng(seed, "drift");
    let cdf = joint.cdf();
    let points: Vec<usize> = (0..n_trials).map(|_| joint.sample_index(&cdf, &mut rng)).collect();
    let lhs = points
        .par_iter()
        .map(|&p| {
            let x = &joint.support[p].x;
            let target = argmax(&miscal.logits(x)?);
            let phi = shapley_exact(&ValueFunction::new(miscal, None, x, target, strategy, 0)?)?;
            let star = shapley_exact(&ValueFunction::new(&oracle, None, x, target, strategy, 0)?)?;
            let sq: Vec<f64> = phi.iter().zip(&star).map(|(a, b)| (a - b) * (a - b)).collect();
            Ok(pairwise_sum(&sq) / d as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let violations = lhs.iter().filter(|&&l| l > bound).count();
    // probability-valued games have |phi_i - phi*_i| <= 2, so lhs <= 4
    let note = (slack > 4.0).then(|| {
        format!(
            "vacuous: sqrt(8 ln(1/delta)) = {slack:.4} exceeds 4, the largest possible lhs for probability-valued games"
        )
    });
    Ok(DriftReport {
        delta,
        n_trials,
        ce_max,
        bound,
        violation_rate: violations as f64 / n_trials as f64,
        mean_lhs: mean(&lhs),
        max_lhs: lhs.iter().copied().fold(0.0, f64::max),
        lhs,
        note,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSweep {
    pub scales: Vec<f64>,
    pub reports: Vec<DriftReport>,
    pub mean_lhs: Vec<f64>,
    pub ce_max: Vec<f64>,
    /// Pearson correlation between scale and mean lhs.
    pub correlation: f64,
}

/// [`drift_bound_check`] with the oracle's logits multiplied by each scale.
/// Every scale sees the same trial points.
pub fn drift_scale_sweep(
    joint: &FiniteJoint,
    strategy: &PerturbationStrategy,
    scales: &[f64],
    delta: f64,
    n_trials: usize,
    seed: u64,
) -> Result<ScaleSweep> {
    let oracle = bayes_restricted_oracle(joint, strategy)?;
    let reports = scales
        .iter()
        .map(|&c| {
            let miscal = Classifier::scaled(oracle.clone(), c);
            drift_bound_check(joint, &miscal, strategy, delta, n_trials, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_lhs: Vec<f64> = reports.iter().map(|r| r.mean_lhs).collect();
    Ok(ScaleSweep {
        scales: scales.to_vec(),
        correlation: pearson(scales, &mean_lhs),
        ce_max: reports.iter().map(|r| r.ce_max).collect(),
        mean_lhs,
        reports,
    })
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let cov: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).collect();
    let va: Vec<f64> = a.iter().map(|x| (x - ma) * (x - ma)).collect();
    let vb: Vec<f64> = b.iter().map(|y| (y - mb) * (y - mb)).collect();
    let denom = (pairwise_sum(&va) * pairwise_sum(&vb)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        pairwise_sum(&cov) / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SupportPoint;

    #[test]
    fn sensitivity_zero_radius_and_constant() {
        let f = |x: &[f64], s: u64| Ok(x.iter().map(|v| v * v + s as f64 * 1e-3).collect());
        let r = sensitivity(f, &[0.3, -0.2], 0.0, 5, 1).unwrap();
        assert_eq!((r.s_avg, r.s_max), (0.0, 0.0));
        let c = |_: &[f64], _: u64| Ok(vec![1.0, 2.0]);
        let r = sensitivity(c, &[0.3, -0.2], 0.5, 5, 1).unwrap();
        assert_eq!(r.s_max, 0.0);
    }

    #[test]
    fn sensitivity_identity_explainer() {
        let f = |x: &[f64], _: u64| Ok(x.to_vec());
        let r = sensitivity(f, &[0.0; 3], 0.1, 50, 2).unwrap();
        assert!(r.s_max >= r.s_avg && r.s_avg > 0.0);
        assert!(r.s_max <= 0.1 * 3f64.sqrt() + 1e-15);
        assert_eq!(r, sensitivity(f, &[0.0; 3], 0.1, 50, 2).unwrap());
    }

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 2.0], &[3.0, 3.0]), 0.0);
    }

    fn joint() -> FiniteJoint {
        let mut support = Vec::new();
        let mut probs = Vec::new();
        for m in 0..4u32 {
            let x = vec![f64::from(m & 1), f64::from(m >> 1 & 1)];
            let p1 = [0.1, 0.6, 0.7, 0.95][m as usize];
            support.push(SupportPoint { x: x.clone(), y: 1 });
            probs.push(0.25 * p1);
            support.push(SupportPoint { x, y: 0 });
            probs.push(0.25 * (1.0 - p1));
        }
        FiniteJoint::new(support, probs, 2).unwrap()
    }

    #[test]
    fn oracle_has_no_drift() {
        let j = joint();
        let st = PerturbationStrategy::ZeroBaseline;
        let oracle = bayes_restricted_oracle(&j, &st).unwrap();
        let r = drift_bound_check(&j, &oracle, &st, 0.1, 50, 0).unwrap();
        assert!(r.max_lhs < 1e-20 && r.violation_rate == 0.0);
        assert!(r.ce_max < 1e-12);
        assert!(r.note.is_some());
        assert!((r.bound - (8.0 * 10f64.ln()).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ranking_must_be_permutation() {
        assert!(check_ranking(&[0, 1, 1], 3).is_err());
        assert!(check_ranking(&[2, 0, 1], 3).is_ok());
    }
}
