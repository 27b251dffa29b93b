#![allow(dead_code)]

use recalx::data::{Dataset, FiniteJoint, SupportPoint};

/// Three binary features, binary label, nonuniform `P(x)` and a distinct
/// `P(y = 1 | x)` per point.
pub fn joint3() -> FiniteJoint {
    let px = [0.05, 0.10, 0.15, 0.20, 0.08, 0.12, 0.18, 0.12];
    let p1 = [0.10, 0.35, 0.55, 0.80, 0.25, 0.60, 0.70, 0.95];
    let mut support = Vec::new();
    let mut probs = Vec::new();
    for m in 0..8usize {
        let x: Vec<f64> = (0..3).map(|i| ((m >> i) & 1) as f64).collect();
        support.push(SupportPoint { x: x.clone(), y: 1 });
        probs.push(px[m] * p1[m]);
        support.push(SupportPoint { x, y: 0 });
        probs.push(px[m] * (1.0 - p1[m]));
    }
    FiniteJoint::new(support, probs, 2).unwrap()
}

pub fn planted_weights_null_last() -> Vec<f64> {
    vec![3.0, 1.0, 0.0]
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Label frequencies of a dataset.
pub fn label_marginal(ds: &Dataset) -> Vec<f64> {
    let mut m = vec![0.0; ds.n_classes()];
    for &y in ds.labels() {
        m[y] += 1.0;
    }
    m.iter().map(|c| c / ds.len() as f64).collect()
}

pub struct Planted {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub strategy: recalx::perturbation::PerturbationStrategy,
    pub model: recalx::model::Classifier,
}

/// Planted logistic task, MLP trained on half, mean replacement from the
/// train part.
pub fn planted(weights: Vec<f64>, n: usize, seed: u64) -> Planted {
    use recalx::data::{feature_means, make_synthetic, split, GeneratorKind, GeneratorSpec, SplitSpec};
    use recalx::model::{train_mlp, TrainConfig};
    let spec = GeneratorSpec::new(GeneratorKind::Planted { weights, bias: 0.0 });
    let (ds, _) = make_synthetic(&spec, n, seed).unwrap();
    let (train, val, test) = split(&ds, &SplitSpec { fractions: (0.5, 0.25, 0.25), seed }).unwrap();
    let model = train_mlp(&train, &TrainConfig { seed, ..TrainConfig::default() }).unwrap();
    let strategy = recalx::perturbation::PerturbationStrategy::MeanReplacement { mu: feature_means(&train) };
    Planted { train, val, test, strategy, model }
}
