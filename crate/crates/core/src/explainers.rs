//! Removal-based attribution methods.
//!
//! Each explainer queries a cooperative game `v(S)`, the target-class
//! probability of the restricted model `f_S(x)`, and summarizes the queried
//! values linearly into one score per feature. Coalition values are
//! computed in parallel, cached per bitmask and always consumed in mask
//! order, so results do not depend on scheduling.

use std::collections::{BTreeSet, HashMap};
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::ReCalXCalibrator;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::numeric::{argmax, binomial, pairwise_sum};
use crate::perturbation::{
    restricted_predict, sample_shapley_size, shapley_size_cdf, Coalition, PerturbationStrategy,
};
use crate::rng;

pub const MAX_EXACT_PLAYERS: usize = 15;
pub const DEFAULT_RIDGE: f64 = 1e-3;

/// A cooperative game over `n_players()` features, queried in batches of
/// coalition bitmasks.
pub trait Game: Sync {
    fn n_players(&self) -> usize;
    fn values(&self, masks: &[u64]) -> Result<Vec<f64>>;
}

/// Game given by an explicit table indexed by bitmask.
pub struct TableGame {
    d: usize,
    table: Vec<f64>,
}

impl TableGame {
    pub fn new(table: Vec<f64>) -> Result<Self> {
        let d = table.len().trailing_zeros() as usize;
        if table.len() < 2 || table.len() != 1 << d {
            return Err(Error::invalid("a game table needs 2^d entries with d >= 1"));
        }
        Ok(Self { d, table })
    }

    pub fn from_fn(d: usize, v: impl Fn(u64) -> f64) -> Self {
        Self {
            d,
            table: (0..1u64 << d).map(v).collect(),
        }
    }
}

impl Game for TableGame {
    fn n_players(&self) -> usize {
        self.d
    }

    fn values(&self, masks: &[u64]) -> Result<Vec<f64>> {
        Ok(masks.iter().map(|&m| self.table[m as usize]).collect())
    }
}

/// `v(S) = f_S(x)[target]`, memoized per coalition.
pub struct ValueFunction<'a> {
    model: &'a Classifier,
    calib: Option<&'a ReCalXCalibrator>,
    x: &'a [f64],
    target: usize,
    strategy: &'a PerturbationStrategy,
    seed: u64,
    cache: Mutex<HashMap<u64, f64>>,
    calls: AtomicUsize,
}

impl<'a> ValueFunction<'a> {
    pub fn new(
        model: &'a Classifier,
        calib: Option<&'a ReCalXCalibrator>,
        x: &'a [f64],
        target: usize,
        strategy: &'a PerturbationStrategy,
        seed: u64,
    ) -> Result<Self> {
        if x.len() != model.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.input_dim(),
                got: x.len(),
            });
        }
        if target >= model.n_classes() {
            return Err(Error::invalid(format!(
                "target class {target} out of range for {} classes",
                model.n_classes()
            )));
        }
        strategy.validate(x.len())?;
        Ok(Self {
            model,
            calib,
            x,
            target,
            strategy,
            seed,
            cache: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        })
    }

    /// Number of model evaluations so far (cache hits excluded).
    pub fn model_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn target(&self) -> usize {
        self.target
    }

    fn eval(&self, mask: u64) -> Result<f64> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let s = Coalition::new(mask, self.x.len())?;
        let p = restricted_predict(self.model, self.calib, self.x, &s, self.strategy, self.seed)?;
        Ok(p[self.target])
    }
}

impl Game for ValueFunction<'_> {
    fn n_players(&self) -> usize {
        self.x.len()
    }

    fn values(&self, masks: &[u64]) -> Result<Vec<f64>> {
        let missing: Vec<u64> = {
            let cache = self.cache.lock().expect("cache lock");
            masks
                .iter()
                .filter(|m| !cache.contains_key(m))
                .copied()
                .collect::<BTreeSet<u64>>()
                .into_iter()
                .collect()
        };
        let fresh = missing
            .par_iter()
            .map(|&m| self.eval(m))
            .collect::<Result<Vec<f64>>>()?;
        let mut cache = self.cache.lock().expect("cache lock");
        cache.extend(missing.into_iter().zip(fresh));
        Ok(masks.iter().map(|m| cache[m]).collect())
    }
}

/// Shapley values from a full table `v[mask]` over `d` players.
pub fn shapley_from_table(table: &[f64], d: usize) -> Result<Vec<f64>> {
    if table.len() != 1 << d {
        return Err(Error::DimensionMismatch {
            expected: 1 << d,
            got: table.len(),
        });
    }
    // |S|!(d-|S|-1)!/d! = 1 / (d * C(d-1, |S|))
    let weights: Vec<f64> = (0..d).map(|s| 1.0 / (d as f64 * binomial(d - 1, s))).collect();
    Ok((0..d)
        .map(|i| {
            let bit = 1u64 << i;
            let terms: Vec<f64> = (0..1u64 << d)
                .filter(|m| m & bit == 0)
                .map(|m| weights[m.count_ones() as usize] * (table[(m | bit) as usize] - table[m as usize]))
                .collect();
            pairwise_sum(&terms)
        })
        .collect())
}

/// Exact Shapley values; queries each of the `2^d` coalitions once.
pub fn shapley_exact(game: &dyn Game) -> Result<Vec<f64>> {
    let d = game.n_players();
    if d == 0 || d > MAX_EXACT_PLAYERS {
        return Err(Error::invalid(format!(
            "exact Shapley values need 1 <= d <= {MAX_EXACT_PLAYERS}, got {d}"
        )));
    }
    let masks: Vec<u64> = (0..1u64 << d).collect();
    shapley_from_table(&game.values(&masks)?, d)
}

/// Shapley kernel weight `(d-1) / (C(d,s) s (d-s))` for `0 < s < d`.
pub fn shapley_kernel_weight(d: usize, s: usize) -> f64 {
    (d - 1) as f64 / (binomial(d, s) * (s * (d - s)) as f64)
}

fn full_mask(d: usize) -> u64 {
    if d == 64 {
        u64::MAX
    } else {
        (1u64 << d) - 1
    }
}

fn bits(mask: u64, d: usize) -> impl Iterator<Item = f64> {
    (0..d).map(move |i| ((mask >> i) & 1) as f64)
}

fn solve_spd(a: DMatrix<f64>, b: DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let chol = a.cholesky().ok_or_else(|| Error::Singular(what.to_owned()))?;
    let sol = chol.solve(&b);
    if sol.iter().all(|v| v.is_finite()) {
        Ok(sol)
    } else {
        Err(Error::Singular(what.to_owned()))
    }
}

/// Non-trivial coalitions for KernelSHAP: all of them when the budget
/// covers `2^d - 2`, otherwise Shapley-kernel size draws, deduplicated.
fn kernel_shap_coalitions(d: usize, n_samples: usize, seed: u64) -> Result<Vec<u64>> {
    let full = full_mask(d);
    if d < 63 && n_samples as u128 >= (1u128 << d) - 2 {
        return Ok((1..full).collect());
    }
    let cdf = shapley_size_cdf(d)?;
    let mut rng = rng::component_rng(seed, "kernel-shap");
    let set: BTreeSet<u64> = (0..n_samples)
        .map(|_| {
            let size = sample_shapley_size(&cdf, &mut rng);
            rng::subset_mask(&mut rng, d, size)
        })
        .collect();
    Ok(set.into_iter().collect())
}

/// KernelSHAP values of a game: weighted least squares of
/// `v(S) - v(empty)` on the coalition indicator with Shapley kernel
/// weights, with efficiency imposed by eliminating the last coordinate.
pub fn kernel_shap_game(game: &dyn Game, n_samples: usize, seed: u64) -> Result<Vec<f64>> {
    let d = game.n_players();
    if n_samples < d + 2 {
        return Err(Error::invalid(format!(
            "KernelSHAP needs n_samples >= d + 2 = {}, got {n_samples}",
            d + 2
        )));
    }
    let full = full_mask(d);
    let ends = game.values(&[0, full])?;
    let (v0, total) = (ends[0], ends[1] - ends[0]);
    if d == 1 {
        return Ok(vec![total]);
    }
    let masks = kernel_shap_coalitions(d, n_samples, seed)?;
    if masks.len() < d - 1 {
        return Err(Error::Singular(format!(
            "only {} distinct coalitions sampled for {d} features; increase n_samples",
            masks.len()
        )));
    }
    let vals = game.values(&masks)?;
    let p = d - 1;
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    for (&m, &v) in masks.iter().zip(&vals) {
        let w = shapley_kernel_weight(d, m.count_ones() as usize);
        let z: Vec<f64> = bits(m, d).collect();
        let zl = z[p];
        let row: Vec<f64> = z[..p].iter().map(|zi| zi - zl).collect();
        let target = v - v0 - zl * total;
        for i in 0..p {
            b[i] += w * row[i] * target;
            for j in 0..p {
                a[(i, j)] += w * row[i] * row[j];
            }
        }
    }
    let head = solve_spd(
        a,
        b,
        "KernelSHAP design is rank deficient; increase n_samples",
    )?;
    let mut phi: Vec<f64> = head.iter().copied().collect();
    phi.push(total - pairwise_sum(&phi));
    Ok(phi)
}

/// LIME coefficients of a game: ridge-regularized weighted regression of
/// `v(S_z)` on `z` with an unpenalized intercept and proximity weights
/// `exp(-(d - |S|)^2 / width^2)`. Budgets of at least `2^d` enumerate every
/// coalition once; smaller ones draw `z` uniformly.
pub fn lime_game(
    game: &dyn Game,
    n_samples: usize,
    kernel_width: f64,
    ridge_lambda: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let d = game.n_players();
    if n_samples < d + 2 {
        return Err(Error::invalid(format!(
            "LIME needs n_samples >= d + 2 = {}, got {n_samples}",
            d + 2
        )));
    }
    if !(kernel_width > 0.0) || !(ridge_lambda >= 0.0) {
        return Err(Error::invalid("LIME needs kernel_width > 0 and ridge_lambda >= 0"));
    }
    let full = full_mask(d);
    let mut masks: Vec<u64> = if d < 63 && n_samples as u128 >= 1u128 << d {
        (0..=full).collect()
    } else {
        let mut rng = rng::component_rng(seed, "lime");
        (0..n_samples).map(|_| rng::uniform_u64(&mut rng) & full).collect()
    };
    masks.sort_unstable();
    let vals = game.values(&masks)?;
    let p = d + 1;
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    for (&m, &v) in masks.iter().zip(&vals) {
        let dist = (d - m.count_ones() as usize) as f64;
        let w = (-(dist * dist) / (kernel_width * kernel_width)).exp();
        let row: Vec<f64> = std::iter::once(1.0).chain(bits(m, d)).collect();
        for i in 0..p {
            b[i] += w * row[i] * v;
            for j in 0..p {
                a[(i, j)] += w * row[i] * row[j];
            }
        }
    }
    for i in 1..p {
        a[(i, i)] += ridge_lambda;
    }
    let coef = solve_spd(a, b, "LIME normal equations are singular; use ridge_lambda > 0")?;
    Ok(coef.iter().skip(1).copied().collect())
}

/// `phi_i = v(full) - v(full \ {i})`.
pub fn ablation_game(game: &dyn Game) -> Result<Vec<f64>> {
    let d = game.n_players();
    let full = full_mask(d);
    let masks: Vec<u64> = std::iter::once(full)
        .chain((0..d).map(|i| full & !(1u64 << i)))
        .collect();
    let vals = game.values(&masks)?;
    Ok(vals[1..].iter().map(|v| vals[0] - v).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum ExplainerSpec {
    Shapley,
    KernelShap {
        n_samples: usize,
    },
    Lime {
        n_samples: usize,
        /// Defaults to `0.75 * sqrt(d)`.
        #[serde(default)]
        kernel_width: Option<f64>,
        #[serde(default = "default_ridge")]
        ridge_lambda: f64,
    },
    Ablation,
}

fn default_ridge() -> f64 {
    DEFAULT_RIDGE
}

impl ExplainerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ExplainerSpec::Shapley => "shapley",
            ExplainerSpec::KernelShap { .. } => "kernel-shap",
            ExplainerSpec::Lime { .. } => "lime",
            ExplainerSpec::Ablation => "ablation",
        }
    }

    pub fn lime_default(n_samples: usize) -> Self {
        ExplainerSpec::Lime {
            n_samples,
            kernel_width: None,
            ridge_lambda: DEFAULT_RIDGE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMeta {
    pub strategy: String,
    /// Short content hash of the calibrator, `None` for the raw model.
    pub calibrator: Option<String>,
    pub seed: u64,
    pub n_samples: Option<usize>,
    pub kernel_width: Option<f64>,
    pub ridge_lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionVector {
    pub values: Vec<f64>,
    pub target_class: usize,
    pub method: String,
    /// `v(empty)`, the target-class probability with every feature removed.
    pub base_value: f64,
    pub metadata: AttributionMeta,
}

pub fn calibrator_id(calib: &ReCalXCalibrator) -> String {
    let json = calib.to_json().unwrap_or_default();
    let digest = Sha256::digest(json.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Class predicted on the unperturbed input; temperature scaling never
/// changes it, so it is the same with and without a calibrator.
pub fn predicted_class(model: &Classifier, x: &[f64]) -> Result<usize> {
    Ok(argmax(&model.logits(x)?))
}

#[allow(clippy::too_many_arguments)]
pub fn explain(
    model: &Classifier,
    calib: Option<&ReCalXCalibrator>,
    x: &[f64],
    target: usize,
    strategy: &PerturbationStrategy,
    spec: &ExplainerSpec,
    seed: u64,
) -> Result<AttributionVector> {
    let v = ValueFunction::new(model, calib, x, target, strategy, seed)?;
    let d = x.len();
    let mut meta = AttributionMeta {
        strategy: strategy.name().to_owned(),
        calibrator: calib.map(calibrator_id),
        seed,
        n_samples: None,
        kernel_width: None,
        ridge_lambda: None,
    };
    let values = match *spec {
        ExplainerSpec::Shapley => shapley_exact(&v)?,
        ExplainerSpec::KernelShap { n_samples } => {
            meta.n_samples = Some(n_samples);
            kernel_shap_game(&v, n_samples, seed)?
        }
        ExplainerSpec::Lime {
            n_samples,
            kernel_width,
            ridge_lambda,
        } => {
            let width = kernel_width.unwrap_or(0.75 * (d as f64).sqrt());
            meta.n_samples = Some(n_samples);
            meta.kernel_width = Some(width);
            meta.ridge_lambda = Some(ridge_lambda);
            lime_game(&v, n_samples, width, ridge_lambda, seed)?
        }
        ExplainerSpec::Ablation => ablation_game(&v)?,
    };
    if values.iter().any(|p| !p.is_finite()) {
        return Err(Error::invalid("attribution produced non-finite values"));
    }
    let base_value = v.values(&[0])?[0];
    Ok(AttributionVector {
        values,
        target_class: target,
        method: spec.name().to_owned(),
        base_value,
        metadata: meta,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn kernel_shap(
    model: &Classifier,
    calib: Option<&ReCalXCalibrator>,
    x: &[f64],
    target: usize,
    strategy: &PerturbationStrategy,
    n_samples: usize,
    seed: u64,
) -> Result<AttributionVector> {
    let spec = ExplainerSpec::KernelShap { n_samples };
    explain(model, calib, x, target, strategy, &spec, seed)
}

#[allow(clippy::too_many_arguments)]
pub fn lime(
    model: &Classifier,
    calib: Option<&ReCalXCalibrator>,
    x: &[f64],
    target: usize,
    strategy: &PerturbationStrategy,
    n_samples: usize,
    kernel_width: Option<f64>,
    ridge_lambda: f64,
    seed: u64,
) -> Result<AttributionVector> {
    let spec = ExplainerSpec::Lime {
        n_samples,
        kernel_width,
        ridge_lambda,
    };
    explain(model, calib, x, target, strategy, &spec, seed)
}

pub fn feature_ablation(
    model: &Classifier,
    calib: Option<&ReCalXCalibrator>,
    x: &[f64],
    target: usize,
    strategy: &PerturbationStrategy,
    seed: u64,
) -> Result<AttributionVector> {
    explain(model, calib, x, target, strategy, &ExplainerSpec::Ablation, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalImportance {
    pub method: String,
    /// Feature indices by descending mean |phi|, ties by ascending index.
    pub ranking: Vec<usize>,
    pub mean_abs: Vec<f64>,
    pub sample_ids: Vec<usize>,
    pub seed: u64,
}

/// Descending order of `scores`, ties broken by ascending index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Rows explained by [`explain_dataset`]: all of them when `n_explain`
/// equals the dataset size, otherwise a seeded uniform subset in
/// increasing order.
pub fn explained_rows(n: usize, n_explain: usize, seed: u64) -> Result<Vec<usize>> {
    if n_explain == 0 || n_explain > n {
        return Err(Error::invalid(format!(
            "n_explain must be in 1..={n}, got {n_explain}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if n_explain < n {
        rng::shuffle(&mut rng::component_rng(seed, "explain-rows"), &mut idx);
        idx.truncate(n_explain);
        idx.sort_unstable();
    }
    Ok(idx)
}

/// Explains `n_explain` rows with target = predicted class. Row `i` uses
/// seed `mix(derive_seed(seed, "explain"), [i])`.
pub fn explain_dataset(
    model: &Classifier,
    calib: Option<&ReCalXCalibrator>,
    data: &Dataset,
    spec: &ExplainerSpec,
    strategy: &PerturbationStrategy,
    n_explain: usize,
    seed: u64,
) -> Result<Vec<(usize, AttributionVector)>> {
    let rows = explained_rows(data.len(), n_explain, seed)?;
    let base = rng::derive_seed(seed, "explain");
    rows.par_iter()
        .map(|&i| {
            let x = data.row(i);
            let target = predicted_class(model, x)?;
            let a = explain(model, calib, x, target, strategy, spec, rng::mix(base, &[i as u64]))?;
            Ok((i, a))
        })
        .collect()
}

pub fn global_importance(
    model: &Classifier,
    calib: Option<&ReCalXCalibrator>,
    data: &Dataset,
    spec: &ExplainerSpec,
    strategy: &PerturbationStrategy,
    n_explain: usize,
    seed: u64,
) -> Result<GlobalImportance> {
    let explained = explain_dataset(model, calib, data, spec, strategy, n_explain, seed)?;
    Ok(summarize(&explained, spec.name(), seed))
}

pub fn summarize(explained: &[(usize, AttributionVector)], method: &str, seed: u64) -> GlobalImportance {
    let d = explained.first().map_or(0, |(_, a)| a.values.len());
    let mean_abs: Vec<f64> = (0..d)
        .map(|j| {
            let col: Vec<f64> = explained.iter().map(|(_, a)| a.values[j].abs()).collect();
            pairwise_sum(&col) / col.len() as f64
        })
        .collect();
    GlobalImportance {
        method: method.to_owned(),
        ranking: rank_descending(&mean_abs),
        mean_abs,
        sample_ids: explained.iter().map(|(i, _)| *i).collect(),
        seed,
    }
}

pub fn write_attributions_csv(path: &Path, rows: &[(usize, AttributionVector)]) -> Result<()> {
    let d = rows.first().map_or(0, |(_, a)| a.values.len());
    let mut out = String::from("sample_id,target_class,method");
    for j in 0..d {
        out.push_str(&format!(",feature_{j}"));
    }
    out.push_str(",base_value\n");
    for (i, a) in rows {
        out.push_str(&format!("{i},{},{}", a.target_class, a.method));
        for v in &a.values {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{}\n", a.base_value));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
