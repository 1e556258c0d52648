//! Weighted Bayesian linear regression with a Normal-Inverse-Gamma prior.
//!
//! Each actuator channel is modelled independently as `g(x) = wᵀx + η` with
//! `η ~ N(0, σ²)`. A sample with weight `l` contributes its Gaussian likelihood
//! raised to the power `l`, which keeps the Normal-Inverse-Gamma family
//! conjugate. Posteriors are immutable values; every operation returns a new
//! one.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

/// Floor applied to the inverse-gamma scale after an update.
pub const B_FLOOR: f64 = 1e-12;

/// Tolerance used when deciding whether a posterior has reached the fixed
/// prior strength of the recursive update.
const STRENGTH_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WblrError {
    #[error("feature dimension mismatch: model has {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("sample is not finite")]
    NonFiniteSample,
    #[error("sample weight {0} outside [0, 1]")]
    WeightOutOfRange(f64),
    #[error("recursive update requires a unit-weight sample, got {0}")]
    NonUnitWeight(f64),
    #[error("prior strength n0 must be positive, got {0}")]
    InvalidStrength(f64),
    #[error("invalid posterior parameter {name}: {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("scale matrix is not symmetric positive definite")]
    NotPositiveDefinite,
}

/// Regression input for one actuator channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub DVector<f64>);

impl FeatureVector {
    pub fn new(values: &[f64]) -> Self {
        Self(DVector::from_column_slice(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<[f64; 2]> for FeatureVector {
    fn from(v: [f64; 2]) -> Self {
        Self::new(&v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSample {
    pub x: FeatureVector,
    pub g: f64,
    pub weight: f64,
}

impl WeightedSample {
    pub fn new(x: impl Into<FeatureVector>, g: f64, weight: f64) -> Self {
        Self {
            x: x.into(),
            g,
            weight,
        }
    }

    /// A fully-included sample.
    pub fn unit(x: impl Into<FeatureVector>, g: f64) -> Self {
        Self::new(x, g, 1.0)
    }

    fn validate(&self, dim: usize) -> Result<(), WblrError> {
        if self.x.dim() != dim {
            return Err(WblrError::DimensionMismatch {
                expected: dim,
                got: self.x.dim(),
            });
        }
        if !self.x.is_finite() || !self.g.is_finite() {
            return Err(WblrError::NonFiniteSample);
        }
        if !(0.0..=1.0).contains(&self.weight) {
            return Err(WblrError::WeightOutOfRange(self.weight));
        }
        Ok(())
    }
}

/// Normal-Inverse-Gamma parameters `(w, V, a, b)`: `w | σ² ~ N(w, σ² V)`,
/// `σ² ~ IG(a, b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NigPosterior {
    w_mean: DVector<f64>,
    v: DMatrix<f64>,
    a: f64,
    b: f64,
}

/// Marginal posteriors: `σ² ~ IG(a, b)` and `w ~ T(w, (b/a) V, 2a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMarginals {
    pub w_mean: DVector<f64>,
    pub w_scale: DMatrix<f64>,
    pub dof: f64,
    /// `b / (a - 1)`, only defined for `a > 1`.
    pub sigma2_mean: Option<f64>,
    pub sigma2_mode: f64,
}

impl PosteriorMarginals {
    /// Posterior mean of the noise variance, falling back to the mode when
    /// the mean is undefined.
    pub fn sigma2_point(&self) -> f64 {
        self.sigma2_mean.unwrap_or(self.sigma2_mode)
    }
}

/// Student-t posterior predictive for a single input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    /// Squared scale of the Student-t, `(b/a)(1 + xᵀVx)`.
    pub variance: f64,
    pub dof: f64,
}

impl Prediction {
    /// Gaussian approximation (the `dof → ∞` form) as `(mean, variance)`.
    pub fn gaussian(&self) -> (f64, f64) {
        (self.mean, self.variance)
    }

    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Density family used when scoring data against a posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictiveDensity {
    #[default]
    StudentT,
    Gaussian,
}

impl NigPosterior {
    pub fn new(w_mean: DVector<f64>, v: DMatrix<f64>, a: f64, b: f64) -> Result<Self, WblrError> {
        let d = w_mean.len();
        if v.nrows() != d || v.ncols() != d {
            return Err(WblrError::DimensionMismatch {
                expected: d,
                got: v.nrows(),
            });
        }
        if w_mean.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(WblrError::NonFiniteSample);
        }
        if !(a > 0.0 && a.is_finite()) {
            return Err(WblrError::InvalidParameter { name: "a", value: a });
        }
        if !(b > 0.0 && b.is_finite()) {
            return Err(WblrError::InvalidParameter { name: "b", value: b });
        }
        let asym = (&v - v.transpose()).amax();
        if asym > 1e-9 * v.amax().max(1.0) {
            return Err(WblrError::NotPositiveDefinite);
        }
        if v.clone().cholesky().is_none() {
            return Err(WblrError::NotPositiveDefinite);
        }
        Ok(Self { w_mean, v, a, b })
    }

    /// Prior for a first-order lag `ξ̇ = (u − ξ)/τ`: `w = [1/τ, −1/τ]`,
    /// `V = v0·I`, `b = a·σ²`.
    pub fn first_order_lag(tau: f64, v0: f64, a0: f64, sigma2: f64) -> Result<Self, WblrError> {
        if !(tau > 0.0) {
            return Err(WblrError::InvalidParameter { name: "tau", value: tau });
        }
        Self::new(
            DVector::from_column_slice(&[1.0 / tau, -1.0 / tau]),
            DMatrix::identity(2, 2) * v0,
            a0,
            a0 * sigma2,
        )
    }

    pub fn dim(&self) -> usize {
        self.w_mean.len()
    }

    pub fn w_mean(&self) -> &DVector<f64> {
        &self.w_mean
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    /// Flat record: `w` entries, row-major `V`, `a`, `b`.
    pub fn to_flat(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(d + d * d + 2);
        out.extend(self.w_mean.iter());
        for i in 0..d {
            for j in 0..d {
                out.push(self.v[(i, j)]);
            }
        }
        out.push(self.a);
        out.push(self.b);
        out
    }

    pub fn from_flat(d: usize, flat: &[f64]) -> Result<Self, WblrError> {
        let need = d + d * d + 2;
        if flat.len() != need {
            return Err(WblrError::DimensionMismatch {
                expected: need,
                got: flat.len(),
            });
        }
        let w = DVector::from_column_slice(&flat[..d]);
        let v = DMatrix::from_row_slice(d, d, &flat[d..d + d * d]);
        Self::new(w, v, flat[need - 2], flat[need - 1])
    }

    /// Conjugate update with weighted data.
    ///
    /// Accumulates the precision `V⁻¹ + XᵀLX` and solves through its Cholesky
    /// factor. The noise scale uses the residual form
    /// `b + ½(Σ lᵢ(gᵢ − w_Nᵀxᵢ)² + (w_N − w₀)ᵀV₀⁻¹(w_N − w₀))`, which is
    /// algebraically identical to the completed-square expression but never
    /// cancels catastrophically.
    pub fn update(&self, data: &[WeightedSample]) -> Result<Self, WblrError> {
        let d = self.dim();
        for s in data {
            s.validate(d)?;
        }
        let active: Vec<&WeightedSample> = data.iter().filter(|s| s.weight > 0.0).collect();
        if active.is_empty() {
            return Ok(self.clone());
        }

        let prior_prec = self
            .v
            .clone()
            .cholesky()
            .ok_or(WblrError::NotPositiveDefinite)?
            .inverse();
        let mut prec = prior_prec.clone();
        let mut eta = &prior_prec * &self.w_mean;
        let mut total_weight = 0.0;
        for s in &active {
            let x = &s.x.0;
            prec.ger(s.weight, x, x, 1.0);
            eta.axpy(s.weight * s.g, x, 1.0);
            total_weight += s.weight;
        }
        symmetrize(&mut prec);

        let chol = prec.cholesky().ok_or(WblrError::NotPositiveDefinite)?;
        let w_n = chol.solve(&eta);
        let mut v_n = chol.inverse();
        symmetrize(&mut v_n);
        if v_n.clone().cholesky().is_none() {
            return Err(WblrError::NotPositiveDefinite);
        }

        let mut sse = 0.0;
        for s in &active {
            let r = s.g - w_n.dot(&s.x.0);
            sse += s.weight * r * r;
        }
        let dw = &w_n - &self.w_mean;
        let prior_term = dw.dot(&(&prior_prec * &dw));
        let b_n = (self.b + 0.5 * (sse + prior_term)).max(B_FLOOR);
        let a_n = self.a + 0.5 * total_weight;

        if w_n.iter().any(|x| !x.is_finite()) || !b_n.is_finite() {
            return Err(WblrError::NotPositiveDefinite);
        }
        Ok(Self {
            w_mean: w_n,
            v: v_n,
            a: a_n,
            b: b_n,
        })
    }

    /// One step of the fixed-strength recursive update.
    ///
    /// Below the target strength (`a < n0/2`) this is a plain unit-weight
    /// update. At or above it, the update is followed by the re-weighting
    /// `V ← (n0+1)/n0 · V`, `a ← n0/(n0+1) · a`, `b ← n0/(n0+1) · b`.
    pub fn recursive_step(&self, sample: &WeightedSample, n0: f64) -> Result<Self, WblrError> {
        if !(n0 > 0.0 && n0.is_finite()) {
            return Err(WblrError::InvalidStrength(n0));
        }
        if sample.weight != 1.0 {
            return Err(WblrError::NonUnitWeight(sample.weight));
        }
        let updated = self.update(std::slice::from_ref(sample))?;
        if self.a < 0.5 * n0 - STRENGTH_TOL {
            return Ok(updated);
        }
        let Self { w_mean, v, a, b } = updated;
        Ok(Self {
            w_mean,
            v: v * ((n0 + 1.0) / n0),
            a: a * n0 / (n0 + 1.0),
            b: (b * n0 / (n0 + 1.0)).max(B_FLOOR),
        })
    }

    pub fn marginals(&self) -> PosteriorMarginals {
        PosteriorMarginals {
            w_mean: self.w_mean.clone(),
            w_scale: &self.v * (self.b / self.a),
            dof: 2.0 * self.a,
            sigma2_mean: (self.a > 1.0).then(|| self.b / (self.a - 1.0)),
            sigma2_mode: self.b / (self.a + 1.0),
        }
    }

    pub fn predict(&self, x: &FeatureVector) -> Result<Prediction, WblrError> {
        if x.dim() != self.dim() {
            return Err(WblrError::DimensionMismatch {
                expected: self.dim(),
                got: x.dim(),
            });
        }
        Ok(self.predict_slice(x.as_slice()))
    }

    /// Prediction from a raw slice; the caller guarantees the dimension.
    pub fn predict_slice(&self, x: &[f64]) -> Prediction {
        let d = self.dim();
        debug_assert_eq!(x.len(), d);
        let mut mean = 0.0;
        let mut quad = 0.0;
        for i in 0..d {
            mean += self.w_mean[i] * x[i];
            for j in 0..d {
                quad += x[i] * self.v[(i, j)] * x[j];
            }
        }
        Prediction {
            mean,
            variance: (self.b / self.a) * (1.0 + quad),
            dof: 2.0 * self.a,
        }
    }

    /// Log of the Student-t posterior predictive density of `g` at `x`.
    pub fn log_predictive_density(&self, x: &FeatureVector, g: f64) -> Result<f64, WblrError> {
        let p = self.predict(x)?;
        Ok(student_t_ln_pdf(g, p.mean, p.variance, p.dof))
    }

    /// Log predictive density under the chosen family.
    pub fn log_density_with(
        &self,
        x: &FeatureVector,
        g: f64,
        family: PredictiveDensity,
    ) -> Result<f64, WblrError> {
        let p = self.predict(x)?;
        Ok(match family {
            PredictiveDensity::StudentT => student_t_ln_pdf(g, p.mean, p.variance, p.dof),
            PredictiveDensity::Gaussian => gaussian_ln_pdf(g, p.mean, p.variance),
        })
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Location-scale Student-t log density with squared scale `scale2`.
pub fn student_t_ln_pdf(x: f64, loc: f64, scale2: f64, dof: f64) -> f64 {
    let z2 = (x - loc).powi(2) / scale2;
    ln_gamma(0.5 * (dof + 1.0)) - ln_gamma(0.5 * dof)
        - 0.5 * (dof * std::f64::consts::PI * scale2).ln()
        - 0.5 * (dof + 1.0) * (z2 / dof).ln_1p()
}

pub fn gaussian_ln_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}
