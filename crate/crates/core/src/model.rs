//! Classifiers mapping feature vectors to logits.
//!
//! Besides the trainable MLP and a constant predictor there are three
//! reference constructions used throughout the test suites:
//!
//! * [`BayesOracle`]: exact `P(Y | X_S = x_S)` for a [`FiniteJoint`],
//!   tabulated for every coalition. It is calibrated under every coalition
//!   of its strategy by construction.
//! * `Scaled`: logits of an inner classifier multiplied by a constant, which
//!   over- (factor > 1) or under- (factor < 1) sharpens every prediction.
//! * `LevelScaled`: logits multiplied only when the perturbation level of
//!   the coalition exceeds a threshold, a planted perturbation-specific
//!   miscalibration.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FiniteJoint};
use crate::error::{Error, Result};
use crate::numeric::{floored_ln, softmax};
use crate::perturbation::{perturb, Coalition, PerturbationStrategy};
use crate::rng;

/// Floor used when turning exact probabilities into logits; small enough
/// that `softmax(ln p)` reproduces `p` to double precision.
const LOGIT_PROB_FLOOR: f64 = 1e-300;

const ORACLE_MAX_FEATURES: usize = 16;

// ---------------------------------------------------------------------------
// MLP
// ---------------------------------------------------------------------------

/// Fully connected network, ReLU hidden layers, linear output.
/// `weights[l]` is row-major `dims[l + 1] x dims[l]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpWire", into = "MlpWire")]
pub struct Mlp {
    dims: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct MlpWire {
    dims: Vec<usize>,
    weights: Vec<Vec<String>>,
    biases: Vec<Vec<String>>,
    activation: String,
}

fn to_strings(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| format!("{x:?}")).collect()
}

fn parse_reals(v: &[String]) -> std::result::Result<Vec<f64>, String> {
    v.iter()
        .map(|s| s.parse::<f64>().map_err(|e| format!("bad weight `{s}`: {e}")))
        .collect()
}

impl From<Mlp> for MlpWire {
    fn from(m: Mlp) -> Self {
        MlpWire {
            weights: m.weights.iter().map(|w| to_strings(w)).collect(),
            biases: m.biases.iter().map(|b| to_strings(b)).collect(),
            dims: m.dims,
            activation: "relu".into(),
        }
    }
}

impl TryFrom<MlpWire> for Mlp {
    type Error = String;

    fn try_from(w: MlpWire) -> std::result::Result<Self, String> {
        if w.activation != "relu" {
            return Err(format!("unsupported activation `{}`", w.activation));
        }
        let weights = w
            .weights
            .iter()
            .map(|l| parse_reals(l))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let biases = w
            .biases
            .iter()
            .map(|l| parse_reals(l))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Mlp::from_parts(w.dims, weights, biases).map_err(|e| e.to_string())
    }
}

impl Mlp {
    pub fn from_parts(
        dims: Vec<usize>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid("MLP needs at least input and output layers"));
        }
        let layers = dims.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::invalid("layer count does not match dims"));
        }
        for l in 0..layers {
            if weights[l].len() != dims[l] * dims[l + 1] || biases[l].len() != dims[l + 1] {
                return Err(Error::invalid(format!("layer {l} has wrong shape")));
            }
        }
        if weights.iter().chain(&biases).flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("MLP parameters must be finite"));
        }
        Ok(Self {
            dims,
            weights,
            biases,
        })
    }

    /// He-uniform initialisation: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`,
    /// zero biases, drawn layer by layer in row-major order.
    pub fn init(dims: Vec<usize>, seed: u64) -> Result<Self> {
        let mut rng = rng::component_rng(seed, "mlp-init");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len().saturating_sub(1) {
            let bound = (6.0 / dims[l] as f64).sqrt();
            weights.push(
                (0..dims[l] * dims[l + 1])
                    .map(|_| (2.0 * rng::uniform_f64(&mut rng) - 1.0) * bound)
                    .collect(),
            );
            biases.push(vec![0.0; dims[l + 1]]);
        }
        Self::from_parts(dims, weights, biases)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    fn layer(&self, l: usize, input: &[f64]) -> Vec<f64> {
        let n_in = self.dims[l];
        self.biases[l]
            .iter()
            .enumerate()
            .map(|(o, b)| {
                let row = &self.weights[l][o * n_in..(o + 1) * n_in];
                b + row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>()
            })
            .collect()
    }

    /// Pre-activations of every layer; the last entry is the logit vector.
    fn forward_trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let layers = self.dims.len() - 1;
        let mut pre = Vec::with_capacity(layers);
        let mut act = x.to_vec();
        for l in 0..layers {
            let z = self.layer(l, &act);
            if l + 1 < layers {
                act = z.iter().map(|v| v.max(0.0)).collect();
            }
            pre.push(z);
        }
        pre
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.forward_trace(x).pop().expect("at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden_sizes: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Heavy-ball momentum coefficient; 0 gives plain SGD.
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![16],
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            weight_decay: 0.0,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(
                "learning_rate must be positive and weight_decay nonnegative",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::invalid("hidden layer sizes must be positive"));
        }
        Ok(())
    }
}

/// Mini-batch SGD on mean cross-entropy. Samples are visited in a seeded
/// shuffled order each epoch; gradients are summed in batch order.
pub fn train_mlp(train: &Dataset, cfg: &TrainConfig) -> Result<Classifier> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut dims = vec![train.n_features()];
    dims.extend(&cfg.hidden_sizes);
    dims.push(train.n_classes());
    let mut net = Mlp::init(dims, cfg.seed)?;
    let layers = net.dims.len() - 1;
    let mut vel_w: Vec<Vec<f64>> = net.weights.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut vel_b: Vec<Vec<f64>> = net.biases.iter().map(|b| vec![0.0; b.len()]).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = rng::component_rng(cfg.seed, "mlp-shuffle");

    for epoch in 0..cfg.epochs {
        rng::shuffle(&mut rng, &mut order);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut grad_w: Vec<Vec<f64>> = net.weights.iter().map(|w| vec![0.0; w.len()]).collect();
            let mut grad_b: Vec<Vec<f64>> = net.biases.iter().map(|b| vec![0.0; b.len()]).collect();
            let mut loss = 0.0;
            for &i in chunk {
                let x = train.row(i);
                let y = train.labels()[i];
                let pre = net.forward_trace(x);
                let p = softmax(&pre[layers - 1]);
                loss -= floored_ln(p[y]);
                let mut delta: Vec<f64> = p;
                delta[y] -= 1.0;
                for l in (0..layers).rev() {
                    let input: Vec<f64> = if l == 0 {
                        x.to_vec()
                    } else {
                        pre[l - 1].iter().map(|v| v.max(0.0)).collect()
                    };
                    let n_in = net.dims[l];
                    for (o, &g) in delta.iter().enumerate() {
                        grad_b[l][o] += g;
                        let row = &mut grad_w[l][o * n_in..(o + 1) * n_in];
                        for (gw, a) in row.iter_mut().zip(&input) {
                            *gw += g * a;
                        }
                    }
                    if l > 0 {
                        delta = (0..n_in)
                            .map(|j| {
                                if pre[l - 1][j] <= 0.0 {
                                    return 0.0;
                                }
                                delta
                                    .iter()
                                    .enumerate()
                                    .map(|(o, g)| g * net.weights[l][o * n_in + j])
                                    .sum()
                            })
                            .collect();
                    }
                }
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            let scale = 1.0 / chunk.len() as f64;
            for l in 0..layers {
                for (k, w) in net.weights[l].iter_mut().enumerate() {
                    let g = grad_w[l][k] * scale + cfg.weight_decay * *w;
                    vel_w[l][k] = cfg.momentum * vel_w[l][k] + g;
                    *w -= cfg.learning_rate * vel_w[l][k];
                }
                for (k, b) in net.biases[l].iter_mut().enumerate() {
                    vel_b[l][k] = cfg.momentum * vel_b[l][k] + grad_b[l][k] * scale;
                    *b -= cfg.learning_rate * vel_b[l][k];
                }
            }
            if net.weights.iter().chain(&net.biases).flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
        }
    }
    Ok(Classifier::Mlp(net))
}

// ---------------------------------------------------------------------------
// Bayes oracle
// ---------------------------------------------------------------------------

/// Exact conditional label distribution under a finite joint, for every
/// coalition of a fixed deterministic strategy.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "OracleWire", into = "OracleWire")]
pub struct BayesOracle {
    joint: FiniteJoint,
    strategy: PerturbationStrategy,
    marginal: Vec<f64>,
    /// `tables[mask]` maps a perturbed point (bit patterns) to `P(Y | .)`.
    tables: Vec<HashMap<Vec<u64>, Vec<f64>>>,
}

impl PartialEq for BayesOracle {
    fn eq(&self, other: &Self) -> bool {
        self.joint == other.joint && self.strategy == other.strategy
    }
}

#[derive(Serialize, Deserialize)]
struct OracleWire {
    joint: FiniteJoint,
    strategy: PerturbationStrategy,
}

impl From<BayesOracle> for OracleWire {
    fn from(o: BayesOracle) -> Self {
        OracleWire {
            joint: o.joint,
            strategy: o.strategy,
        }
    }
}

impl TryFrom<OracleWire> for BayesOracle {
    type Error = String;

    fn try_from(w: OracleWire) -> std::result::Result<Self, String> {
        BayesOracle::new(&w.joint, &w.strategy).map_err(|e| e.to_string())
    }
}

fn point_key(x: &[f64]) -> Vec<u64> {
    // +0.0 and -0.0 must share a key
    x.iter().map(|v| (v + 0.0).to_bits()).collect()
}

impl BayesOracle {
    pub fn new(joint: &FiniteJoint, strategy: &PerturbationStrategy) -> Result<Self> {
        joint.validate()?;
        let d = joint.n_features();
        if d > ORACLE_MAX_FEATURES {
            return Err(Error::invalid(format!(
                "oracle tabulation supports d <= {ORACLE_MAX_FEATURES}"
            )));
        }
        if !strategy.is_deterministic() {
            return Err(Error::invalid("the Bayes oracle needs a deterministic strategy"));
        }
        strategy.validate(d)?;
        let alphabets = joint.alphabets();
        let k = joint.n_classes;
        let mut tables = Vec::with_capacity(1 << d);
        for mask in 0..1u64 << d {
            let s = Coalition::new(mask, d)?;
            let mut mass: HashMap<Vec<u64>, Vec<f64>> = HashMap::new();
            for (pt, &p) in joint.support.iter().zip(&joint.probs) {
                let z = perturb(&pt.x, &s, strategy, 0)?;
                for (i, v) in z.iter().enumerate() {
                    if !alphabets[i].iter().any(|a| a == v) {
                        return Err(Error::OutOfAlphabet {
                            feature: i,
                            value: *v,
                        });
                    }
                }
                mass.entry(point_key(&z)).or_insert_with(|| vec![0.0; k])[pt.y] += p;
            }
            let table = mass
                .into_iter()
                .filter_map(|(key, m)| {
                    let total: f64 = m.iter().sum();
                    (total > 0.0).then(|| (key, m.iter().map(|v| v / total).collect()))
                })
                .collect();
            tables.push(table);
        }
        Ok(Self {
            joint: joint.clone(),
            strategy: strategy.clone(),
            marginal: joint.marginal_y(),
            tables,
        })
    }

    pub fn joint(&self) -> &FiniteJoint {
        &self.joint
    }

    pub fn strategy(&self) -> &PerturbationStrategy {
        &self.strategy
    }

    /// `P(Y | pi(X, S) = z)`; the marginal when `z` has zero probability.
    pub fn conditional(&self, z: &[f64], s: &Coalition) -> Vec<f64> {
        self.tables[s.mask() as usize]
            .get(&point_key(z))
            .cloned()
            .unwrap_or_else(|| self.marginal.clone())
    }
}

pub fn bayes_restricted_oracle(
    joint: &FiniteJoint,
    strategy: &PerturbationStrategy,
) -> Result<Classifier> {
    Ok(Classifier::BayesOracle(BayesOracle::new(joint, strategy)?))
}

fn probs_to_logits(p: &[f64]) -> Vec<f64> {
    p.iter().map(|v| v.max(LOGIT_PROB_FLOOR).ln()).collect()
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Classifier {
    Mlp(Mlp),
    BayesOracle(BayesOracle),
    Constant {
        logits: Vec<f64>,
        input_dim: usize,
    },
    Scaled {
        factor: f64,
        inner: Box<Classifier>,
    },
    /// Scales logits by `factor` when the coalition's level exceeds `min_level`.
    LevelScaled {
        factor: f64,
        min_level: f64,
        inner: Box<Classifier>,
    },
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    #[serde(flatten)]
    model: Classifier,
}

impl Classifier {
    pub fn constant(logits: Vec<f64>, input_dim: usize) -> Self {
        Classifier::Constant { logits, input_dim }
    }

    pub fn scaled(inner: Classifier, factor: f64) -> Self {
        Classifier::Scaled {
            factor,
            inner: Box::new(inner),
        }
    }

    pub fn level_scaled(inner: Classifier, factor: f64, min_level: f64) -> Self {
        Classifier::LevelScaled {
            factor,
            min_level,
            inner: Box::new(inner),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Classifier::Mlp(_) => "mlp",
            Classifier::BayesOracle(_) => "bayes-oracle",
            Classifier::Constant { .. } => "constant",
            Classifier::Scaled { .. } => "scaled",
            Classifier::LevelScaled { .. } => "level-scaled",
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Classifier::Mlp(m) => m.dims[0],
            Classifier::BayesOracle(o) => o.joint.n_features(),
            Classifier::Constant { input_dim, .. } => *input_dim,
            Classifier::Scaled { inner, .. } | Classifier::LevelScaled { inner, .. } => {
                inner.input_dim()
            }
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Classifier::Mlp(m) => *m.dims.last().expect("validated dims"),
            Classifier::BayesOracle(o) => o.joint.n_classes,
            Classifier::Constant { logits, .. } => logits.len(),
            Classifier::Scaled { inner, .. } | Classifier::LevelScaled { inner, .. } => {
                inner.n_classes()
            }
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Raw scores on an unperturbed input.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(match self {
            Classifier::Mlp(m) => m.logits(x),
            Classifier::BayesOracle(o) => {
                probs_to_logits(&o.conditional(x, &Coalition::full(x.len())))
            }
            Classifier::Constant { logits, .. } => logits.clone(),
            Classifier::Scaled { factor, inner } => {
                inner.logits(x)?.into_iter().map(|v| v * factor).collect()
            }
            Classifier::LevelScaled { inner, .. } => inner.logits(x)?,
        })
    }

    /// Logits of `f(pi(x, S))`. Coalition-aware kinds (oracle, level-scaled)
    /// use `S` directly; every other kind sees only the perturbed input.
    pub fn restricted_logits(
        &self,
        x: &[f64],
        s: &Coalition,
        strategy: &PerturbationStrategy,
        seed: u64,
    ) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        match self {
            Classifier::BayesOracle(o) => {
                if strategy != &o.strategy {
                    return Err(Error::invalid(format!(
                        "oracle was tabulated for `{}`, asked for `{}`",
                        o.strategy.name(),
                        strategy.name()
                    )));
                }
                let z = perturb(x, s, strategy, seed)?;
                Ok(probs_to_logits(&o.conditional(&z, s)))
            }
            Classifier::Scaled { factor, inner } => Ok(inner
                .restricted_logits(x, s, strategy, seed)?
                .into_iter()
                .map(|v| v * factor)
                .collect()),
            Classifier::LevelScaled {
                factor,
                min_level,
                inner,
            } => {
                let z = inner.restricted_logits(x, s, strategy, seed)?;
                if s.level() > *min_level {
                    Ok(z.into_iter().map(|v| v * factor).collect())
                } else {
                    Ok(z)
                }
            }
            _ => self.logits(&perturb(x, s, strategy, seed)?),
        }
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile {
            version: 1,
            model: self.clone(),
        })?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(json)?;
        if file.version != 1 {
            return Err(Error::UnsupportedVersion(file.version));
        }
        Ok(file.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Fraction of rows whose argmax prediction matches the label.
pub fn accuracy(model: &Classifier, data: &Dataset) -> Result<f64> {
    let mut hits = 0usize;
    for (x, &y) in data.rows().zip(data.labels()) {
        if crate::numeric::argmax(&model.logits(x)?) == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Mean cross-entropy of the unperturbed predictions.
pub fn mean_cross_entropy(model: &Classifier, data: &Dataset) -> Result<f64> {
    let losses = data
        .rows()
        .zip(data.labels())
        .map(|(x, &y)| Ok(-floored_ln(model.predict_proba(x)?[y])))
        .collect::<Result<Vec<f64>>>()?;
    Ok(crate::numeric::mean(&losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SupportPoint;
    use crate::rng::{rng_from, standard_normal, uniform_f64};
    use proptest::prelude::*;

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
    fn constant_and_affine_logits() {
        let c = Classifier::constant(vec![1.0, -1.0], 3);
        assert_eq!(c.logits(&[9.0, 8.0, 7.0]).unwrap(), vec![1.0, -1.0]);
        let id = Mlp::from_parts(vec![2, 2], vec![vec![1.0, 0.0, 0.0, 1.0]], vec![vec![0.0; 2]])
            .unwrap();
        assert_eq!(id.logits(&[3.0, 5.0]), vec![3.0, 5.0]);
        let zero = Mlp::from_parts(
            vec![3, 4, 2],
            vec![vec![0.0; 12], vec![0.0; 8]],
            vec![vec![0.0; 4], vec![0.0; 2]],
        )
        .unwrap();
        assert_eq!(zero.logits(&[1.0, 2.0, 3.0]), vec![0.0, 0.0]);
        assert!(c.logits(&[1.0]).is_err());
    }

    #[test]
    fn predict_proba_examples() {
        let p = Classifier::constant(vec![0.0, 0.0], 1).predict_proba(&[0.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let p = Classifier::constant(vec![2.0, 0.0], 1).predict_proba(&[0.0]).unwrap();
        assert!((p[0] - 0.880797).abs() < 1e-6 && (p[1] - 0.119203).abs() < 1e-6);
        let p = Classifier::constant(vec![1000.0, 0.0], 1).predict_proba(&[0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()) && (p[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn oracle_identity_joint() {
        let joint = identity_joint();
        let st = PerturbationStrategy::ZeroBaseline;
        let oracle = bayes_restricted_oracle(&joint, &st).unwrap();
        let full = Coalition::full(1);
        let p = softmax(&oracle.restricted_logits(&[1.0], &full, &st, 0).unwrap());
        assert!(p[0] < 1e-12 && (p[1] - 1.0).abs() < 1e-12);
        for x in [0.0, 1.0] {
            let p = softmax(
                &oracle
                    .restricted_logits(&[x], &Coalition::empty(1), &st, 0)
                    .unwrap(),
            );
            assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn oracle_rejects_bad_strategies() {
        let joint = identity_joint();
        let off = PerturbationStrategy::FixedBaseline {
            baseline: vec![0.5],
        };
        assert!(matches!(
            bayes_restricted_oracle(&joint, &off),
            Err(Error::OutOfAlphabet { .. })
        ));
        let noise = PerturbationStrategy::GaussianNoise { sigma: 1.0 };
        assert!(bayes_restricted_oracle(&joint, &noise).is_err());
    }

    #[test]
    fn oracle_two_feature_table_matches_enumeration() {
        // x in {0,1}^2; the label depends on both coordinates
        let mut support = Vec::new();
        let mut probs = Vec::new();
        let cell = [[0.3, 0.1], [0.05, 0.15], [0.1, 0.05], [0.05, 0.2]];
        for (k, pair) in cell.iter().enumerate() {
            for (y, &p) in pair.iter().enumerate() {
                support.push(SupportPoint {
                    x: vec![(k >> 1) as f64, (k & 1) as f64],
                    y,
                });
                probs.push(p);
            }
        }
        let joint = FiniteJoint::new(support, probs, 2).unwrap();
        let st = PerturbationStrategy::ZeroBaseline;
        let oracle = bayes_restricted_oracle(&joint, &st).unwrap();
        // hand enumeration for S = {first feature}: x0 = 1 covers cells 2 and 3
        let s = Coalition::from_indices(2, &[0]).unwrap();
        let p = softmax(&oracle.restricted_logits(&[1.0, 1.0], &s, &st, 0).unwrap());
        let expected1 = (0.05 + 0.2) / (0.1 + 0.05 + 0.05 + 0.2);
        assert!((p[1] - expected1).abs() < 1e-12);
        // full coalition, cell 1 = (0, 1)
        let p = softmax(
            &oracle
                .restricted_logits(&[0.0, 1.0], &Coalition::full(2), &st, 0)
                .unwrap(),
        );
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn level_scaled_only_above_threshold() {
        let inner = Classifier::constant(vec![1.0, -1.0], 4);
        let m = Classifier::level_scaled(inner, 3.0, 0.5);
        let st = PerturbationStrategy::ZeroBaseline;
        let low = Coalition::from_indices(4, &[0, 1]).unwrap();
        let high = Coalition::from_indices(4, &[0]).unwrap();
        assert_eq!(m.restricted_logits(&[0.0; 4], &low, &st, 0).unwrap(), vec![1.0, -1.0]);
        assert_eq!(m.restricted_logits(&[0.0; 4], &high, &st, 0).unwrap(), vec![3.0, -3.0]);
    }

    fn blobs(n: usize, seed: u64) -> Dataset {
        let mut rng = rng_from(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let y = usize::from(uniform_f64(&mut rng) < 0.5);
            let c = if y == 1 { 2.0 } else { -2.0 };
            rows.push(vec![c + standard_normal(&mut rng), c + standard_normal(&mut rng)]);
            labels.push(y);
        }
        Dataset::from_rows(rows, labels, 2).unwrap()
    }

    /// Closed-form linear discriminant for two equal-covariance blobs.
    fn lda_accuracy(train: &Dataset, test: &Dataset) -> f64 {
        let mut mu = [[0.0; 2]; 2];
        let mut n = [0.0; 2];
        for (x, &y) in train.rows().zip(train.labels()) {
            mu[y][0] += x[0];
            mu[y][1] += x[1];
            n[y] += 1.0;
        }
        for y in 0..2 {
            mu[y][0] /= n[y];
            mu[y][1] /= n[y];
        }
        let mut cov = [[0.0; 2]; 2];
        for (x, &y) in train.rows().zip(train.labels()) {
            let d = [x[0] - mu[y][0], x[1] - mu[y][1]];
            for a in 0..2 {
                for b in 0..2 {
                    cov[a][b] += d[a] * d[b] / train.len() as f64;
                }
            }
        }
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        let inv = [[cov[1][1] / det, -cov[0][1] / det], [-cov[1][0] / det, cov[0][0] / det]];
        let dm = [mu[1][0] - mu[0][0], mu[1][1] - mu[0][1]];
        let w = [inv[0][0] * dm[0] + inv[0][1] * dm[1], inv[1][0] * dm[0] + inv[1][1] * dm[1]];
        let mid = [(mu[0][0] + mu[1][0]) / 2.0, (mu[0][1] + mu[1][1]) / 2.0];
        let hits = test
            .rows()
            .zip(test.labels())
            .filter(|(x, &y)| {
                let s = w[0] * (x[0] - mid[0]) + w[1] * (x[1] - mid[1]);
                usize::from(s > 0.0) == y
            })
            .count();
        hits as f64 / test.len() as f64
    }

    #[test]
    fn mlp_learns_separable_blobs() {
        let train = blobs(1000, 1);
        let test = blobs(1000, 2);
        assert!(lda_accuracy(&train, &test) >= 0.97);
        let cfg = TrainConfig {
            epochs: 10,
            seed: 3,
            ..TrainConfig::default()
        };
        let m = train_mlp(&train, &cfg).unwrap();
        assert!(accuracy(&m, &test).unwrap() >= 0.95);
    }

    #[test]
    fn zero_epochs_returns_init_and_training_is_deterministic() {
        let train = blobs(200, 4);
        let cfg = TrainConfig {
            epochs: 0,
            seed: 9,
            ..TrainConfig::default()
        };
        let m = train_mlp(&train, &cfg).unwrap();
        let Classifier::Mlp(net) = &m else { panic!() };
        assert_eq!(net, &Mlp::init(vec![2, 16, 2], 9).unwrap());
        assert!(mean_cross_entropy(&m, &train).unwrap().is_finite());

        let cfg = TrainConfig {
            epochs: 3,
            seed: 9,
            ..TrainConfig::default()
        };
        assert_eq!(train_mlp(&train, &cfg).unwrap(), train_mlp(&train, &cfg).unwrap());
    }

    #[test]
    fn huge_learning_rate_reports_non_finite_loss() {
        let train = blobs(200, 4);
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 1e200,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_mlp(&train, &cfg),
            Err(Error::NonFiniteLoss { .. })
        ));
    }

    #[test]
    fn serialization_round_trip() {
        let train = blobs(300, 5);
        let m = train_mlp(
            &train,
            &TrainConfig {
                epochs: 2,
                hidden_sizes: vec![5, 3],
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let wrapped = Classifier::level_scaled(Classifier::scaled(m.clone(), 2.0), 3.0, 0.5);
        for model in [m, wrapped] {
            let json = model.to_json().unwrap();
            let back = Classifier::from_json(&json).unwrap();
            let mut rng = rng_from(6);
            for _ in 0..100 {
                let x = [standard_normal(&mut rng) * 3.0, standard_normal(&mut rng) * 3.0];
                assert_eq!(model.logits(&x).unwrap(), back.logits(&x).unwrap());
            }
        }
        let json = Classifier::Mlp(Mlp::init(vec![2, 2], 0).unwrap()).to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["version"], 1);
        assert_eq!(v["kind"], "mlp");
        assert_eq!(v["activation"], "relu");
        assert!(v["weights"][0][0].is_string());
    }

    #[test]
    fn oracle_serialization_rebuilds_tables() {
        let oracle = bayes_restricted_oracle(&identity_joint(), &PerturbationStrategy::ZeroBaseline)
            .unwrap();
        let back = Classifier::from_json(&oracle.to_json().unwrap()).unwrap();
        assert_eq!(back.logits(&[1.0]).unwrap(), oracle.logits(&[1.0]).unwrap());
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(
            z in prop::collection::vec(-50.0f64..50.0, 2..8),
            c in -100.0f64..100.0,
        ) {
            let a = softmax(&z);
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let b = softmax(&shifted);
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((p - q).abs() < 1e-10);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
