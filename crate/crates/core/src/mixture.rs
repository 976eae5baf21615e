//! Diagonal-covariance Gaussian mixtures.
//!
//! [`MixtureModel`] is a value type: it is validated on construction and every
//! operation that changes it produces a new model. Per-component normalizing
//! constants are cached so that scoring frames stays cheap.

use std::f64::consts::PI;
use std::fmt;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible per-dimension variance.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Tolerance on the sum of component weights.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One weighted Gaussian with diagonal covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    #[serde(rename = "w")]
    pub weight: f64,
    pub mean: Vec<f64>,
    #[serde(rename = "var")]
    pub variances: Vec<f64>,
}

impl GaussianComponent {
    pub fn new(weight: f64, mean: Vec<f64>, variances: Vec<f64>) -> Self {
        Self {
            weight,
            mean,
            variances,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Unweighted log-density of `x`.
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let mut quad = 0.0;
        let mut log_det = 0.0;
        for ((&xi, &m), &v) in x.iter().zip(&self.mean).zip(&self.variances) {
            let d = xi - m;
            quad += d * d / v;
            log_det += v.ln();
        }
        -0.5 * (self.dim() as f64 * LN_2PI + log_det + quad)
    }

    /// Mean of the diagonal variances, the scalar spread used by pruning.
    pub fn mean_variance(&self) -> f64 {
        self.variances.iter().sum::<f64>() / self.variances.len().max(1) as f64
    }

    fn floor_variances(&mut self) {
        for v in &mut self.variances {
            if v.is_finite() && *v < VARIANCE_FLOOR {
                *v = VARIANCE_FLOOR;
            }
        }
    }
}

/// A broken mixture invariant, as reported by [`validate_components`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Empty,
    DimensionMismatch {
        component: usize,
        expected: usize,
        found: usize,
    },
    NonFinite {
        component: usize,
    },
    WeightOutOfRange {
        component: usize,
        weight: f64,
    },
    WeightSum {
        sum: f64,
    },
    VarianceFloor {
        component: usize,
        dim: usize,
        value: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "model has no components"),
            Violation::DimensionMismatch {
                component,
                expected,
                found,
            } => write!(
                f,
                "component {component} has dimension {found}, expected {expected}"
            ),
            Violation::NonFinite { component } => {
                write!(f, "component {component} has non-finite parameters")
            }
            Violation::WeightOutOfRange { component, weight } => {
                write!(f, "component {component} weight {weight} outside [0, 1]")
            }
            Violation::WeightSum { sum } => write!(f, "weights sum to {sum}, expected 1"),
            Violation::VarianceFloor {
                component,
                dim,
                value,
            } => write!(
                f,
                "component {component} variance {value} in dimension {dim} below floor {VARIANCE_FLOOR}"
            ),
        }
    }
}

/// Checks every mixture invariant and reports all violations found.
pub fn validate_components(components: &[GaussianComponent]) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let Some(first) = components.first() else {
        return Err(vec![Violation::Empty]);
    };
    let dim = first.mean.len();
    let mut sum = 0.0;
    for (k, c) in components.iter().enumerate() {
        if c.mean.len() != dim {
            out.push(Violation::DimensionMismatch {
                component: k,
                expected: dim,
                found: c.mean.len(),
            });
        }
        if c.variances.len() != dim {
            out.push(Violation::DimensionMismatch {
                component: k,
                expected: dim,
                found: c.variances.len(),
            });
        }
        let finite = c.weight.is_finite()
            && c.mean.iter().all(|v| v.is_finite())
            && c.variances.iter().all(|v| v.is_finite());
        if !finite {
            out.push(Violation::NonFinite { component: k });
            continue;
        }
        if !(0.0..=1.0).contains(&c.weight) {
            out.push(Violation::WeightOutOfRange {
                component: k,
                weight: c.weight,
            });
        }
        sum += c.weight;
        for (j, &v) in c.variances.iter().enumerate() {
            if v < VARIANCE_FLOOR {
                out.push(Violation::VarianceFloor {
                    component: k,
                    dim: j,
                    value: v,
                });
            }
        }
    }
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        out.push(Violation::WeightSum { sum });
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[derive(Debug, Clone)]
struct Cached {
    // ln w - 0.5 (d ln 2pi + sum ln var)
    log_norm: f64,
    inv_var: Vec<f64>,
}

/// A validated mixture of diagonal Gaussians sharing one dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawModel", into = "RawModel")]
pub struct MixtureModel {
    dim: usize,
    components: Vec<GaussianComponent>,
    cache: Vec<Cached>,
}

#[derive(Serialize, Deserialize)]
struct RawModel {
    dim: usize,
    components: Vec<GaussianComponent>,
}

impl TryFrom<RawModel> for MixtureModel {
    type Error = Error;

    fn try_from(raw: RawModel) -> Result<Self> {
        let model = MixtureModel::new(raw.components)?;
        if model.dim != raw.dim {
            return Err(Error::DimensionMismatch {
                expected: raw.dim,
                found: model.dim,
            });
        }
        Ok(model)
    }
}

impl From<MixtureModel> for RawModel {
    fn from(m: MixtureModel) -> Self {
        RawModel {
            dim: m.dim,
            components: m.components,
        }
    }
}

impl PartialEq for MixtureModel {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.components == other.components
    }
}

impl MixtureModel {
    /// Builds a model, flooring variances first and then enforcing every invariant.
    pub fn new(mut components: Vec<GaussianComponent>) -> Result<Self> {
        for c in &mut components {
            c.floor_variances();
        }
        validate_components(&components).map_err(Error::InvalidModel)?;
        let dim = components[0].dim();
        let cache = components
            .iter()
            .map(|c| Cached {
                log_norm: c.weight.ln()
                    - 0.5 * (dim as f64 * LN_2PI + c.variances.iter().map(|v| v.ln()).sum::<f64>()),
                inv_var: c.variances.iter().map(|v| 1.0 / v).collect(),
            })
            .collect();
        Ok(Self {
            dim,
            components,
            cache,
        })
    }

    /// Like [`MixtureModel::new`] but rescales the weights to sum to one.
    pub fn from_unnormalized(mut components: Vec<GaussianComponent>) -> Result<Self> {
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::InvalidModel(vec![Violation::WeightSum {
                sum: total,
            }]));
        }
        for c in &mut components {
            c.weight /= total;
        }
        Self::new(components)
    }

    /// A single unit-weight component.
    pub fn single(mean: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        Self::new(vec![GaussianComponent::new(1.0, mean, variances)])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn into_components(self) -> Vec<GaussianComponent> {
        self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Re-checks the invariants. Always `Ok` for models built through the constructors.
    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        validate_components(&self.components)
    }

    /// `ln sum_k w_k N(x; mu_k, diag var_k)`, evaluated with log-sum-exp.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(self.log_density_unchecked(x))
    }

    pub(crate) fn log_density_unchecked(&self, x: &[f64]) -> f64 {
        let mut max = f64::NEG_INFINITY;
        let mut terms = [0.0f64; 32];
        let mut heap = Vec::new();
        let buf: &mut [f64] = if self.cache.len() <= terms.len() {
            &mut terms[..self.cache.len()]
        } else {
            heap.resize(self.cache.len(), 0.0);
            &mut heap
        };
        for ((slot, cached), comp) in buf.iter_mut().zip(&self.cache).zip(&self.components) {
            let mut quad = 0.0;
            for ((&xi, &m), &iv) in x.iter().zip(&comp.mean).zip(&cached.inv_var) {
                let d = xi - m;
                quad += d * d * iv;
            }
            let t = cached.log_norm - 0.5 * quad;
            *slot = t;
            if t > max {
                max = t;
            }
        }
        if max == f64::NEG_INFINITY {
            return max;
        }
        max + buf.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }

    /// Average log-density over the rows of `frames`.
    pub fn mean_log_density(&self, frames: ArrayView2<'_, f64>) -> Result<f64> {
        if frames.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: frames.ncols(),
            });
        }
        if frames.nrows() == 0 {
            return Err(Error::InsufficientData("no frames to score".into()));
        }
        let total: f64 = frames
            .rows()
            .into_iter()
            .map(|row| match row.as_slice() {
                Some(s) => self.log_density_unchecked(s),
                None => self.log_density_unchecked(&row.to_vec()),
            })
            .sum();
        Ok(total / frames.nrows() as f64)
    }

    /// Mixture mean and per-dimension raw second moment.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        mixture_moments(&self.components)
    }

    /// Draws `n` i.i.d. frames; bit-identical for a fixed seed.
    pub fn sample(&self, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(n, &mut rng)
    }

    pub(crate) fn sample_with<R: Rng>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let mut cumulative = Vec::with_capacity(self.components.len());
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            cumulative.push(acc);
            if c.weight > 0.0 {
                last_positive = k;
            }
        }
        let mut out = Array2::zeros((n, self.dim));
        for mut row in out.rows_mut() {
            let u: f64 = rng.random::<f64>() * acc;
            let k = cumulative
                .iter()
                .position(|&c| u < c)
                .unwrap_or(last_positive);
            let comp = &self.components[k];
            for (j, x) in row.iter_mut().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                *x = comp.mean[j] + z * comp.variances[j].sqrt();
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Weighted mean and raw second moment of an arbitrary set of components.
///
/// Weights are used as given; callers normalize if they need a proper mixture.
pub fn mixture_moments(components: &[GaussianComponent]) -> (Vec<f64>, Vec<f64>) {
    let dim = components.first().map_or(0, |c| c.dim());
    let total: f64 = components.iter().map(|c| c.weight).sum();
    let mut mean = vec![0.0; dim];
    let mut second = vec![0.0; dim];
    for c in components {
        for j in 0..dim {
            mean[j] += c.weight * c.mean[j];
            second[j] += c.weight * (c.variances[j] + c.mean[j] * c.mean[j]);
        }
    }
    if total > 0.0 {
        for j in 0..dim {
            mean[j] /= total;
            second[j] /= total;
        }
    }
    (mean, second)
}

/// Density of a standard normal at `z`.
pub(crate) fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}
