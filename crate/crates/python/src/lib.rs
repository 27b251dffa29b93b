//! Python bindings for the `recalx` core crate.
//!
//! Inputs are plain Python lists; strategies are given as `"zero"`,
//! `"noise:SIGMA"`, `"baseline:V1,V2,..."` or a JSON object string, and
//! coalitions as the list of kept feature indices.

#![allow(clippy::too_many_arguments)]

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use recalx::calibration::{self, CalibratorMeta, ReCalXCalibrator};
use recalx::data::{Dataset, FiniteJoint};
use recalx::explainers::{self, ExplainerSpec, DEFAULT_RIDGE};
use recalx::metrics::{self, ConditionalEstimatorSpec};
use recalx::model::{self, TrainConfig};
use recalx::perturbation::{self, Coalition, PerturbationStrategy};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn strategy(spec: &str) -> PyResult<PerturbationStrategy> {
    if spec.trim_start().starts_with('{') {
        return serde_json::from_str(spec).map_err(err);
    }
    match spec {
        "zero" => Ok(PerturbationStrategy::ZeroBaseline),
        s if s.starts_with("noise:") => {
            let sigma = s["noise:".len()..].parse().map_err(err)?;
            Ok(PerturbationStrategy::GaussianNoise { sigma })
        }
        s if s.starts_with("baseline:") => {
            let baseline = s["baseline:".len()..]
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(err)?;
            Ok(PerturbationStrategy::FixedBaseline { baseline })
        }
        other => Err(err(format!(
            "unknown strategy `{other}`; expected zero, noise:SIGMA, baseline:V,.. or a JSON object"
        ))),
    }
}

fn coalition(kept: &[usize], d: usize) -> PyResult<Coalition> {
    Coalition::from_indices(d, kept).map_err(err)
}

fn dataset(x: Vec<Vec<f64>>, y: Vec<usize>, n_classes: usize) -> PyResult<Dataset> {
    Dataset::from_rows(x, y, n_classes).map_err(err)
}

fn estimator(kind: &str, bandwidth: f64) -> PyResult<ConditionalEstimatorSpec> {
    match kind {
        "exact-groupby" => Ok(ConditionalEstimatorSpec::ExactGroupby),
        "kernel" => Ok(ConditionalEstimatorSpec::Kernel { bandwidth, leave_one_out: true }),
        other => Err(err(format!("unknown estimator `{other}`; expected exact-groupby or kernel"))),
    }
}

/// A trained MLP, a Bayes oracle, or one of their logit-scaled wrappers.
#[pyclass(name = "Classifier", module = "recalx", frozen)]
pub struct PyClassifier {
    inner: model::Classifier,
}

#[pymethods]
impl PyClassifier {
    #[staticmethod]
    fn from_json(json: &str) -> PyResult<Self> {
        Ok(Self { inner: model::Classifier::from_json(json).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: model::Classifier::load(path.as_ref()).map_err(err)? })
    }

    /// Trains an MLP with softmax cross-entropy.
    #[staticmethod]
    #[pyo3(signature = (x, y, n_classes=2, hidden=vec![16], epochs=30, learning_rate=0.05, seed=0))]
    fn train(
        py: Python<'_>,
        x: Vec<Vec<f64>>,
        y: Vec<usize>,
        n_classes: usize,
        hidden: Vec<usize>,
        epochs: usize,
        learning_rate: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let data = dataset(x, y, n_classes)?;
        let cfg = TrainConfig { hidden_sizes: hidden, epochs, learning_rate, seed, ..TrainConfig::default() };
        let inner = py.detach(|| model::train_mlp(&data, &cfg)).map_err(err)?;
        Ok(Self { inner })
    }

    /// Exact restricted Bayes predictor of a finite joint (JSON).
    #[staticmethod]
    #[pyo3(signature = (joint_json, strategy_spec="zero"))]
    fn bayes_oracle(joint_json: &str, strategy_spec: &str) -> PyResult<Self> {
        let joint: FiniteJoint = serde_json::from_str(joint_json).map_err(err)?;
        joint.validate().map_err(err)?;
        let inner = model::bayes_restricted_oracle(&joint, &strategy(strategy_spec)?).map_err(err)?;
        Ok(Self { inner })
    }

    /// Multiplies the logits by `factor`, optionally only above a level.
    #[pyo3(signature = (factor, min_level=None))]
    fn scaled(&self, factor: f64, min_level: Option<f64>) -> Self {
        let inner = self.inner.clone();
        Self {
            inner: match min_level {
                Some(l) => model::Classifier::level_scaled(inner, factor, l),
                None => model::Classifier::scaled(inner, factor),
            },
        }
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    fn logits(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.logits(&x).map_err(err)
    }

    fn predict_proba(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.predict_proba(&x).map_err(err)
    }

    /// `f_S(x)` for the coalition of kept features `kept`.
    #[pyo3(signature = (x, kept, strategy_spec="zero", calibrator=None, seed=0))]
    fn restricted_predict(
        &self,
        x: Vec<f64>,
        kept: Vec<usize>,
        strategy_spec: &str,
        calibrator: Option<PyRef<'_, PyCalibrator>>,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let s = coalition(&kept, x.len())?;
        let calib = calibrator.as_ref().map(|c| &c.inner);
        perturbation::restricted_predict(&self.inner, calib, &x, &s, &strategy(strategy_spec)?, seed).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Classifier(kind={}, d={}, K={})", self.inner.kind(), self.inner.input_dim(), self.inner.n_classes())
    }
}

/// Per-level temperature calibrator.
#[pyclass(name = "Calibrator", module = "recalx", frozen)]
pub struct PyCalibrator {
    inner: ReCalXCalibrator,
}

#[pymethods]
impl PyCalibrator {
    #[staticmethod]
    fn from_json(json: &str) -> PyResult<Self> {
        Ok(Self { inner: ReCalXCalibrator::from_json(json).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: ReCalXCalibrator::load(path.as_ref()).map_err(err)? })
    }

    /// A single temperature shared by every level.
    #[staticmethod]
    fn uniform(temperature: f64) -> PyResult<Self> {
        let meta = CalibratorMeta {
            strategy: "any".into(),
            seed: 0,
            validation_size: 0,
            bin_counts: vec![0],
        };
        Ok(Self { inner: ReCalXCalibrator::uniform(temperature, meta).map_err(err)? })
    }

    /// Fits one temperature per level bin on perturbed validation data.
    #[staticmethod]
    #[pyo3(signature = (model, x, y, strategy_spec="zero", bins=10, reps=5, seed=0))]
    fn fit(
        py: Python<'_>,
        model: PyRef<'_, PyClassifier>,
        x: Vec<Vec<f64>>,
        y: Vec<usize>,
        strategy_spec: &str,
        bins: usize,
        reps: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let data = dataset(x, y, model.inner.n_classes())?;
        let strat = strategy(strategy_spec)?;
        let m = &model.inner;
        let (inner, _) = py
            .detach(|| calibration::fit_recalx(m, &data, &strat, bins, reps, seed))
            .map_err(err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(err)
    }

    #[getter]
    fn temperatures(&self) -> Vec<f64> {
        self.inner.temperatures().to_vec()
    }

    #[getter]
    fn edges(&self) -> Vec<f64> {
        self.inner.edges().to_vec()
    }

    fn temperature_for_level(&self, level: f64) -> f64 {
        self.inner.temperature_for_level(level)
    }

    fn __repr__(&self) -> String {
        format!("Calibrator(bins={}, temperatures={:?})", self.inner.bins(), self.inner.temperatures())
    }
}

/// `softmax(z / t)`.
#[pyfunction]
fn apply_temperature(z: Vec<f64>, t: f64) -> PyResult<Vec<f64>> {
    calibration::apply_temperature(&z, t).map_err(err)
}

/// Temperature minimizing the mean cross-entropy of `logits / T`.
/// Returns `(temperature, ce_before, ce_after)`.
#[pyfunction]
fn fit_temperature_logits(logits: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<(f64, f64, f64)> {
    let fit = calibration::fit_temperature_logits(&logits, &labels).map_err(err)?;
    Ok((fit.temperature, fit.ce_before, fit.ce_after))
}

/// Fraction of features outside the coalition.
#[pyfunction]
fn perturbation_level(kept: Vec<usize>, d: usize) -> PyResult<f64> {
    Ok(perturbation::perturbation_level(&coalition(&kept, d)?))
}

/// `pi(x, S)`.
#[pyfunction]
#[pyo3(signature = (x, kept, strategy_spec="zero", seed=0))]
fn perturb(x: Vec<f64>, kept: Vec<usize>, strategy_spec: &str, seed: u64) -> PyResult<Vec<f64>> {
    let s = coalition(&kept, x.len())?;
    perturbation::perturb(&x, &s, &strategy(strategy_spec)?, seed).map_err(err)
}

/// Exact Shapley values of a game given as a `2^d` table indexed by mask.
#[pyfunction]
fn shapley_from_table(table: Vec<f64>, d: usize) -> PyResult<Vec<f64>> {
    explainers::shapley_from_table(&table, d).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (preds, labels, estimator_kind="kernel", bandwidth=metrics::DEFAULT_BANDWIDTH))]
fn calibration_error_kl(preds: Vec<Vec<f64>>, labels: Vec<usize>, estimator_kind: &str, bandwidth: f64) -> PyResult<f64> {
    metrics::calibration_error_kl(&preds, &labels, &estimator(estimator_kind, bandwidth)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (preds, labels, estimator_kind="kernel", bandwidth=metrics::DEFAULT_BANDWIDTH))]
fn mutual_information(preds: Vec<Vec<f64>>, labels: Vec<usize>, estimator_kind: &str, bandwidth: f64) -> PyResult<f64> {
    metrics::mutual_information(&preds, &labels, &estimator(estimator_kind, bandwidth)?).map_err(err)
}

/// Attribution for class `target` at `x`. `method` is one of shapley,
/// kernelshap, lime, ablation.
#[pyfunction]
#[pyo3(signature = (model, x, target, method="shapley", n_samples=200, strategy_spec="zero", calibrator=None, seed=0))]
fn explain(
    py: Python<'_>,
    model: PyRef<'_, PyClassifier>,
    x: Vec<f64>,
    target: usize,
    method: &str,
    n_samples: usize,
    strategy_spec: &str,
    calibrator: Option<PyRef<'_, PyCalibrator>>,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let spec = match method {
        "shapley" => ExplainerSpec::Shapley,
        "kernelshap" => ExplainerSpec::KernelShap { n_samples },
        "lime" => ExplainerSpec::Lime { n_samples, kernel_width: None, ridge_lambda: DEFAULT_RIDGE },
        "ablation" => ExplainerSpec::Ablation,
        other => {
            return Err(err(format!(
                "unknown method `{other}`; expected shapley, kernelshap, lime or ablation"
            )))
        }
    };
    let strat = strategy(strategy_spec)?;
    let m = &model.inner;
    let calib = calibrator.as_ref().map(|c| c.inner.clone());
    py.detach(|| explainers::explain(m, calib.as_ref(), &x, target, &strat, &spec, seed))
        .map(|a| a.values)
        .map_err(err)
}

#[pymodule(name = "recalx")]
fn recalx_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyClassifier>()?;
    m.add_class::<PyCalibrator>()?;
    m.add_function(wrap_pyfunction!(apply_temperature, m)?)?;
    m.add_function(wrap_pyfunction!(fit_temperature_logits, m)?)?;
    m.add_function(wrap_pyfunction!(perturbation_level, m)?)?;
    m.add_function(wrap_pyfunction!(perturb, m)?)?;
    m.add_function(wrap_pyfunction!(shapley_from_table, m)?)?;
    m.add_function(wrap_pyfunction!(calibration_error_kl, m)?)?;
    m.add_function(wrap_pyfunction!(mutual_information, m)?)?;
    m.add_function(wrap_pyfunction!(explain, m)?)?;
    Ok(())
}
