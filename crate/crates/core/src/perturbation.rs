//! Coalitions, perturbation strategies and restricted prediction.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::calibration::ReCalXCalibrator;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::numeric::softmax;
use crate::rng::{self, Rng};

pub const MAX_FEATURES: usize = 64;
pub const MAX_EXHAUSTIVE_FEATURES: usize = 20;

/// Set of *kept* (unperturbed) feature indices over `d` features, as a bitmask.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coalition {
    kept: u64,
    d: usize,
}

impl Coalition {
    pub fn new(kept: u64, d: usize) -> Result<Self> {
        if d == 0 || d > MAX_FEATURES {
            return Err(Error::invalid(format!("feature count {d} outside 1..=64")));
        }
        if d < 64 && kept >> d != 0 {
            return Err(Error::invalid(format!(
                "mask {kept:#x} has bits at or above d = {d}"
            )));
        }
        Ok(Self { kept, d })
    }

    pub fn full(d: usize) -> Self {
        let kept = if d == 64 { u64::MAX } else { (1u64 << d) - 1 };
        Self { kept, d }
    }

    pub fn empty(d: usize) -> Self {
        Self { kept: 0, d }
    }

    pub fn from_indices(d: usize, idx: &[usize]) -> Result<Self> {
        let mut kept = 0u64;
        for &i in idx {
            if i >= d {
                return Err(Error::invalid(format!("feature index {i} >= d = {d}")));
            }
            kept |= 1 << i;
        }
        Self::new(kept, d)
    }

    pub fn mask(&self) -> u64 {
        self.kept
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn contains(&self, i: usize) -> bool {
        i < self.d && self.kept >> i & 1 == 1
    }

    pub fn size(&self) -> usize {
        self.kept.count_ones() as usize
    }

    pub fn n_perturbed(&self) -> usize {
        self.d - self.size()
    }

    pub fn with(&self, i: usize) -> Self {
        Self {
            kept: self.kept | 1 << i,
            d: self.d,
        }
    }

    pub fn without(&self, i: usize) -> Self {
        Self {
            kept: self.kept & !(1 << i),
            d: self.d,
        }
    }

    pub fn is_subset_of(&self, other: &Coalition) -> bool {
        self.kept & !other.kept == 0
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.d).filter(|&i| self.contains(i))
    }

    /// Fraction of perturbed features, `(d - |S|) / d`.
    pub fn level(&self) -> f64 {
        perturbation_level(self)
    }
}

impl fmt::Debug for Coalition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Coalition{{d: {}, kept: {:#x}}}", self.d, self.kept)
    }
}

#[derive(Serialize, Deserialize)]
struct CoalitionWire {
    d: usize,
    kept: String,
}

impl Serialize for Coalition {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CoalitionWire {
            d: self.d,
            kept: format!("{:#x}", self.kept),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Coalition {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let wire = CoalitionWire::deserialize(d)?;
        let hex = wire
            .kept
            .strip_prefix("0x")
            .ok_or_else(|| D::Error::custom("coalition mask must start with 0x"))?;
        if hex.chars().any(|c| c.is_ascii_uppercase()) {
            return Err(D::Error::custom("coalition mask must be lowercase hex"));
        }
        let kept = u64::from_str_radix(hex, 16).map_err(D::Error::custom)?;
        Coalition::new(kept, wire.d).map_err(D::Error::custom)
    }
}

pub fn perturbation_level(s: &Coalition) -> f64 {
    s.n_perturbed() as f64 / s.d as f64
}

/// How perturbed features (those outside the coalition) are replaced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PerturbationStrategy {
    ZeroBaseline,
    FixedBaseline { baseline: Vec<f64> },
    MeanReplacement { mu: Vec<f64> },
    /// Adds `sigma * N(0, 1)` to every perturbed feature.
    GaussianNoise { sigma: f64 },
}

impl PerturbationStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            Self::ZeroBaseline => "zero-baseline",
            Self::FixedBaseline { .. } => "fixed-baseline",
            Self::MeanReplacement { .. } => "mean-replacement",
            Self::GaussianNoise { .. } => "gaussian-noise",
        }
    }

    pub fn is_deterministic(&self) -> bool {
        !matches!(self, Self::GaussianNoise { .. })
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            Self::ZeroBaseline => Ok(()),
            Self::FixedBaseline { baseline: b } | Self::MeanReplacement { mu: b } => {
                if b.len() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: b.len(),
                    });
                }
                if b.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("baseline values must be finite"));
                }
                Ok(())
            }
            Self::GaussianNoise { sigma } => {
                if *sigma > 0.0 && sigma.is_finite() {
                    Ok(())
                } else {
                    Err(Error::invalid("noise sigma must be positive"))
                }
            }
        }
    }
}

/// `pi(x, S)`: features in `S` are copied, the rest replaced per `strategy`.
/// The noise strategy draws from a stream keyed by `(seed, S)`.
pub fn perturb(
    x: &[f64],
    s: &Coalition,
    strategy: &PerturbationStrategy,
    seed: u64,
) -> Result<Vec<f64>> {
    if x.len() != s.d {
        return Err(Error::DimensionMismatch {
            expected: s.d,
            got: x.len(),
        });
    }
    strategy.validate(s.d)?;
    let mut out = x.to_vec();
    match strategy {
        PerturbationStrategy::ZeroBaseline => {
            for (i, v) in out.iter_mut().enumerate() {
                if !s.contains(i) {
                    *v = 0.0;
                }
            }
        }
        PerturbationStrategy::FixedBaseline { baseline: b }
        | PerturbationStrategy::MeanReplacement { mu: b } => {
            for (i, v) in out.iter_mut().enumerate() {
                if !s.contains(i) {
                    *v = b[i];
                }
            }
        }
        PerturbationStrategy::GaussianNoise { sigma } => {
            let mut rng = rng::rng_from(rng::mix(seed, &[s.kept]));
            for (i, v) in out.iter_mut().enumerate() {
                if !s.contains(i) {
                    *v += sigma * rng::standard_normal(&mut rng);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum CoalitionPolicy {
    /// Size uniform in `0..=d`, then a uniform subset of that size.
    UniformSize,
    /// Size `s` in `1..d` with probability proportional to `(d-1)/(s(d-s))`.
    ShapleyKernel,
    /// Every subset has size `round((1 - level) * d)`.
    FixedLevel { level: f64 },
    /// All `2^d` subsets in increasing mask order; `count` is ignored.
    Exhaustive,
}

pub fn coalition_size_for_level(d: usize, level: f64) -> usize {
    (((1.0 - level) * d as f64).round() as usize).min(d)
}

pub fn sample_coalitions(
    d: usize,
    policy: CoalitionPolicy,
    count: usize,
    seed: u64,
) -> Result<Vec<Coalition>> {
    if d == 0 || d > MAX_FEATURES {
        return Err(Error::invalid(format!("feature count {d} outside 1..=64")));
    }
    let mut rng = rng::component_rng(seed, "coalitions");
    let draw = |rng: &mut Rng, size: usize| Coalition {
        kept: rng::subset_mask(rng, d, size),
        d,
    };
    match policy {
        CoalitionPolicy::Exhaustive => {
            if d > MAX_EXHAUSTIVE_FEATURES {
                return Err(Error::invalid(format!(
                    "exhaustive enumeration needs d <= {MAX_EXHAUSTIVE_FEATURES}, got {d}"
                )));
            }
            Ok((0..1u64 << d).map(|kept| Coalition { kept, d }).collect())
        }
        CoalitionPolicy::UniformSize => Ok((0..count)
            .map(|_| {
                let size = rng::uniform_index(&mut rng, d + 1);
                draw(&mut rng, size)
            })
            .collect()),
        CoalitionPolicy::FixedLevel { level } => {
            if !(0.0..=1.0).contains(&level) {
                return Err(Error::invalid(format!("level {level} outside [0, 1]")));
            }
            let size = coalition_size_for_level(d, level);
            Ok((0..count).map(|_| draw(&mut rng, size)).collect())
        }
        CoalitionPolicy::ShapleyKernel => {
            let cdf = shapley_size_cdf(d)?;
            Ok((0..count)
                .map(|_| {
                    let size = sample_shapley_size(&cdf, &mut rng);
                    draw(&mut rng, size)
                })
                .collect())
        }
    }
}

/// Cumulative Shapley-kernel mass over sizes `1..d`; index `k` covers size `k + 1`.
pub(crate) fn shapley_size_cdf(d: usize) -> Result<Vec<f64>> {
    if d < 2 {
        return Err(Error::invalid(
            "the Shapley kernel has no nontrivial coalition sizes for d < 2",
        ));
    }
    let mut acc = 0.0;
    Ok((1..d)
        .map(|s| {
            acc += (d - 1) as f64 / (s * (d - s)) as f64;
            acc
        })
        .collect())
}

pub(crate) fn sample_shapley_size(cdf: &[f64], rng: &mut Rng) -> usize {
    let u = rng::uniform_f64(rng) * cdf[cdf.len() - 1];
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1) + 1
}

/// `f_S(x)`, optionally recalibrated with the temperature selected for `S`.
pub fn restricted_predict(
    model: &Classifier,
    calib: Option<&ReCalXCalibrator>,
    x: &[f64],
    s: &Coalition,
    strategy: &PerturbationStrategy,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut z = model.restricted_logits(x, s, strategy, seed)?;
    if let Some(c) = calib {
        // temperatures are range-checked when the calibrator is built
        let t = c.select_temperature(s);
        z.iter_mut().for_each(|v| *v /= t);
    }
    Ok(softmax(&z))
}
