//! Closed-form log-likelihoods and parameter gradients for the distribution
//! families a likelihood head can emit.
//!
//! Every function here is pure. The specialized heads (diagonal Gaussian,
//! full Gaussian, Bernoulli) take the parameterizations the network outputs
//! directly; [`ExpFamily`] covers the generic natural-parameter form
//! `sum_j h(x_j) + eta_j . T(x_j) - A(eta_j)`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// `ln(2 pi)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `ln(1 + e^x)` in the branch form `max(x, 0) + ln(1 + e^{-|x|})`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
pub fn clamp_logvar(v: f64) -> f64 {
    v.clamp(LOGVAR_MIN, LOGVAR_MAX)
}

fn ensure_finite(context: &'static str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context))
    }
}

/// Distribution family tag of one view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    GaussianDiag,
    GaussianFull,
    Bernoulli,
    Poisson,
    Exponential,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::GaussianDiag,
        Family::GaussianFull,
        Family::Bernoulli,
        Family::Poisson,
        Family::Exponential,
    ];

    /// Number of raw head outputs needed for a `dim`-dimensional observation.
    pub fn param_len(self, dim: usize) -> usize {
        match self {
            Family::GaussianDiag => 2 * dim,
            Family::GaussianFull => dim + dim * (dim + 1) / 2,
            Family::Bernoulli | Family::Poisson | Family::Exponential => dim,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Family::GaussianDiag => "gaussian-diag",
            Family::GaussianFull => "gaussian-full",
            Family::Bernoulli => "bernoulli",
            Family::Poisson => "poisson",
            Family::Exponential => "exponential",
        }
    }

    /// Validates that an observation lies in the support of the family.
    pub fn check_support(self, x: &[f64]) -> Result<()> {
        match self {
            Family::Bernoulli => check_binary(x),
            Family::Poisson => {
                for (index, &v) in x.iter().enumerate() {
                    if !(v >= 0.0 && v.fract() == 0.0) {
                        return Err(Error::OutOfDomain(format!(
                            "poisson observation {index} is {v}, expected a non-negative integer"
                        )));
                    }
                }
                Ok(())
            }
            Family::Exponential => {
                for (index, &v) in x.iter().enumerate() {
                    if !(v >= 0.0) {
                        return Err(Error::OutOfDomain(format!(
                            "exponential observation {index} is {v}, expected x >= 0"
                        )));
                    }
                }
                Ok(())
            }
            Family::GaussianDiag | Family::GaussianFull => ensure_finite("gaussian observation", x),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.tag() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown family `{s}`")))
    }
}

fn check_binary(x: &[f64]) -> Result<()> {
    for (index, &value) in x.iter().enumerate() {
        if value != 0.0 && value != 1.0 {
            return Err(Error::NonBinary { index, value });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Diagonal Gaussian, mean / log-variance parameterization.

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDiagParams {
    pub mean: Vec<f64>,
    /// Log-variances, clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub logvar: Vec<f64>,
}

impl GaussianDiagParams {
    pub fn new(mean: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        check_dim("gaussian-diag logvar", mean.len(), logvar.len())?;
        ensure_finite("gaussian-diag mean", &mean)?;
        ensure_finite("gaussian-diag logvar", &logvar)?;
        let logvar = logvar.into_iter().map(clamp_logvar).collect();
        Ok(Self { mean, logvar })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `-(d/2) ln 2pi - 1/2 sum_j [nu_j + (x_j - mu_j)^2 e^{-nu_j}]`.
    pub fn loglik(&self, x: &[f64]) -> Result<f64> {
        check_dim("gaussian-diag observation", self.dim(), x.len())?;
        ensure_finite("gaussian-diag observation", x)?;
        Ok(diag_loglik(x, &self.mean, &self.logvar))
    }

    /// Gradient with respect to `(mean, logvar)`.
    pub fn loglik_grad(&self, x: &[f64]) -> Result<GaussianDiagGrad> {
        check_dim("gaussian-diag observation", self.dim(), x.len())?;
        ensure_finite("gaussian-diag observation", x)?;
        let mut mean = Vec::with_capacity(x.len());
        let mut logvar = Vec::with_capacity(x.len());
        for ((&xj, &mu), &nu) in x.iter().zip(&self.mean).zip(&self.logvar) {
            let prec = (-nu).exp();
            let r = xj - mu;
            mean.push(r * prec);
            logvar.push(0.5 * (r * r * prec - 1.0));
        }
        Ok(GaussianDiagGrad { mean, logvar })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDiagGrad {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
}

pub(crate) fn diag_loglik(x: &[f64], mean: &[f64], logvar: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((&xj, &mu), &nu) in x.iter().zip(mean).zip(logvar) {
        let r = xj - mu;
        acc += nu + r * r * (-nu).exp();
    }
    -0.5 * (x.len() as f64 * LN_2PI + acc)
}

/// Independent-coordinate Gaussian in the variance form.
pub fn gaussian_indep_loglik(x: &[f64], mean: &[f64], var: &[f64]) -> Result<f64> {
    check_dim("gaussian observation", mean.len(), x.len())?;
    check_dim("gaussian variance", mean.len(), var.len())?;
    let mut acc = 0.0;
    for ((&xj, &mu), &s2) in x.iter().zip(mean).zip(var) {
        if !(s2 > 0.0) {
            return Err(Error::OutOfDomain(format!("variance {s2} must be positive")));
        }
        acc += s2.ln() + (xj - mu) * (xj - mu) / s2;
    }
    Ok(-0.5 * x.len() as f64 * (2.0 * PI).ln() - 0.5 * acc)
}

// ---------------------------------------------------------------------------
// Full-covariance Gaussian, lower-triangular factor parameterization.

/// `Sigma = L L^T` with `L` lower triangular. Off-diagonal entries of `L` are
/// free; each diagonal entry is `softplus(raw)` so any finite raw vector is a
/// valid SPD covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFullParams {
    pub mean: Vec<f64>,
    /// Packed lower triangle, row-major (`(0,0), (1,0), (1,1), (2,0), ...`).
    /// Diagonal slots hold the pre-softplus raw value.
    pub factor_raw: Vec<f64>,
}

#[inline]
pub(crate) fn tri_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

impl GaussianFullParams {
    pub fn new(mean: Vec<f64>, factor_raw: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        check_dim("gaussian-full factor", d * (d + 1) / 2, factor_raw.len())?;
        ensure_finite("gaussian-full mean", &mean)?;
        ensure_finite("gaussian-full factor", &factor_raw)?;
        let params = Self { mean, factor_raw };
        if params.factor().iter().step_by(d + 1).any(|&l| !(l > 0.0)) {
            return Err(Error::OutOfDomain("covariance factor diagonal underflowed".into()));
        }
        Ok(params)
    }

    /// Builds the parameters from an explicit SPD covariance via Cholesky.
    pub fn from_covariance(mean: Vec<f64>, cov: &[f64]) -> Result<Self> {
        let d = mean.len();
        check_dim("gaussian-full covariance", d * d, cov.len())?;
        let mut l = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let mut s = cov[i * d + j];
                for k in 0..j {
                    s -= l[i * d + k] * l[j * d + k];
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(Error::OutOfDomain("covariance is not positive definite".into()));
                    }
                    l[i * d + i] = s.sqrt();
                } else {
                    l[i * d + j] = s / l[j * d + j];
                }
            }
        }
        let mut raw = vec![0.0; d * (d + 1) / 2];
        for i in 0..d {
            for j in 0..i {
                raw[tri_index(i, j)] = l[i * d + j];
            }
            raw[tri_index(i, i)] = softplus_inv(l[i * d + i]);
        }
        Self::new(mean, raw)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Dense `d x d` lower-triangular factor `L`, row-major.
    pub fn factor(&self) -> Vec<f64> {
        let d = self.dim();
        let mut l = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..i {
                l[i * d + j] = self.factor_raw[tri_index(i, j)];
            }
            l[i * d + i] = softplus(self.factor_raw[tri_index(i, i)]);
        }
        l
    }

    /// Dense covariance `L L^T`, row-major; symmetric by construction.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim();
        let l = self.factor();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let s: f64 = (0..=j).map(|k| l[i * d + k] * l[j * d + k]).sum();
                cov[i * d + j] = s;
                cov[j * d + i] = s;
            }
        }
        cov
    }

    /// Returns `(u, log|Sigma|)` with `u = L^{-1}(x - mu)`.
    fn whiten(&self, l: &[f64], x: &[f64]) -> (Vec<f64>, f64) {
        let d = self.dim();
        let mut u = vec![0.0; d];
        let mut logdet = 0.0;
        for i in 0..d {
            let mut s = x[i] - self.mean[i];
            for k in 0..i {
                s -= l[i * d + k] * u[k];
            }
            let lii = l[i * d + i];
            u[i] = s / lii;
            logdet += 2.0 * lii.ln();
        }
        (u, logdet)
    }

    pub fn loglik(&self, x: &[f64]) -> Result<f64> {
        check_dim("gaussian-full observation", self.dim(), x.len())?;
        ensure_finite("gaussian-full observation", x)?;
        let l = self.factor();
        let (u, logdet) = self.whiten(&l, x);
        let quad: f64 = u.iter().map(|v| v * v).sum();
        Ok(-0.5 * (self.dim() as f64 * LN_2PI + logdet) - 0.5 * quad)
    }

    /// Gradient with respect to `(mean, factor_raw)`.
    pub fn loglik_grad(&self, x: &[f64]) -> Result<GaussianFullGrad> {
        check_dim("gaussian-full observation", self.dim(), x.len())?;
        ensure_finite("gaussian-full observation", x)?;
        let d = self.dim();
        let l = self.factor();
        let (u, _) = self.whiten(&l, x);
        // w = L^{-T} u = Sigma^{-1} (x - mu)
        let mut w = vec![0.0; d];
        for i in (0..d).rev() {
            let mut s = u[i];
            for k in i + 1..d {
                s -= l[k * d + i] * w[k];
            }
            w[i] = s / l[i * d + i];
        }
        let mut factor_raw = vec![0.0; d * (d + 1) / 2];
        for i in 0..d {
            for j in 0..i {
                factor_raw[tri_index(i, j)] = w[i] * u[j];
            }
            let dl = w[i] * u[i] - 1.0 / l[i * d + i];
            factor_raw[tri_index(i, i)] = dl * sigmoid(self.factor_raw[tri_index(i, i)]);
        }
        Ok(GaussianFullGrad { mean: w, factor_raw })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFullGrad {
    pub mean: Vec<f64>,
    pub factor_raw: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Bernoulli, logit parameterization.

#[derive(Clone, Debug, PartialEq)]
pub struct BernoulliParams {
    pub logits: Vec<f64>,
}

impl BernoulliParams {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        ensure_finite("bernoulli logits", &logits)?;
        Ok(Self { logits })
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| sigmoid(l)).collect()
    }

    /// `sum_j x_j xi_j - softplus(xi_j)`.
    pub fn loglik(&self, x: &[f64]) -> Result<f64> {
        check_dim("bernoulli observation", self.logits.len(), x.len())?;
        check_binary(x)?;
        Ok(x.iter()
            .zip(&self.logits)
            .map(|(&xj, &xi)| xj * xi - softplus(xi))
            .sum())
    }

    /// `x_j - sigmoid(xi_j)`.
    pub fn loglik_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("bernoulli observation", self.logits.len(), x.len())?;
        check_binary(x)?;
        Ok(x.iter()
            .zip(&self.logits)
            .map(|(&xj, &xi)| xj - sigmoid(xi))
            .collect())
    }
}

/// Probability form `sum_j 1{x_j=1} ln eta_j + 1{x_j=0} ln(1 - eta_j)`.
pub fn bernoulli_prob_loglik(x: &[f64], probs: &[f64]) -> Result<f64> {
    check_dim("bernoulli observation", probs.len(), x.len())?;
    check_binary(x)?;
    Ok(x.iter()
        .zip(probs)
        .map(|(&xj, &p)| if xj == 1.0 { p.ln() } else { (1.0 - p).ln() })
        .sum())
}

// ---------------------------------------------------------------------------
// Generic exponential family.

/// Registered exponential-family members, one scalar coordinate each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpFamily {
    /// `T = (x, x^2)`, `eta = (mu/s2, -1/(2 s2))`.
    Gaussian,
    /// `T = x`, `A = softplus(eta)`.
    Bernoulli,
    /// `h = -ln x!`, `T = x`, `A = e^eta`.
    Poisson,
    /// `T = x`, `A = -ln(-eta)`, domain `eta < 0`.
    Exponential,
}

impl ExpFamily {
    pub const ALL: [ExpFamily; 4] = [
        ExpFamily::Gaussian,
        ExpFamily::Bernoulli,
        ExpFamily::Poisson,
        ExpFamily::Exponential,
    ];

    /// Natural parameter length per coordinate.
    pub fn natural_dim(self) -> usize {
        match self {
            ExpFamily::Gaussian => 2,
            _ => 1,
        }
    }

    pub fn base_measure(self, x: f64) -> f64 {
        match self {
            ExpFamily::Gaussian => -0.5 * LN_2PI,
            ExpFamily::Bernoulli | ExpFamily::Exponential => 0.0,
            ExpFamily::Poisson => -ln_factorial(x),
        }
    }

    /// Writes `T(x)` into `out` (length `natural_dim`).
    pub fn sufficient_statistic(self, x: f64, out: &mut [f64]) {
        match self {
            ExpFamily::Gaussian => {
                out[0] = x;
                out[1] = x * x;
            }
            _ => out[0] = x,
        }
    }

    pub fn in_domain(self, eta: &[f64]) -> bool {
        eta.iter().all(|v| v.is_finite())
            && match self {
                ExpFamily::Gaussian => eta[1] < 0.0,
                ExpFamily::Exponential => eta[0] < 0.0,
                ExpFamily::Bernoulli | ExpFamily::Poisson => true,
            }
    }

    fn domain_error(self, eta: &[f64]) -> Error {
        Error::OutOfDomain(format!("{self:?} natural parameter {eta:?}"))
    }

    /// Log-partition `A(eta)`.
    pub fn log_partition(self, eta: &[f64]) -> Result<f64> {
        if !self.in_domain(eta) {
            return Err(self.domain_error(eta));
        }
        Ok(match self {
            ExpFamily::Gaussian => {
                -eta[0] * eta[0] / (4.0 * eta[1]) - 0.5 * (-2.0 * eta[1]).ln()
            }
            ExpFamily::Bernoulli => softplus(eta[0]),
            ExpFamily::Poisson => eta[0].exp(),
            ExpFamily::Exponential => -(-eta[0]).ln(),
        })
    }

    /// `grad A(eta)`, i.e. the mean of the sufficient statistic.
    pub fn log_partition_grad(self, eta: &[f64], out: &mut [f64]) -> Result<()> {
        if !self.in_domain(eta) {
            return Err(self.domain_error(eta));
        }
        match self {
            ExpFamily::Gaussian => {
                let mean = -eta[0] / (2.0 * eta[1]);
                let var = -1.0 / (2.0 * eta[1]);
                out[0] = mean;
                out[1] = mean * mean + var;
            }
            ExpFamily::Bernoulli => out[0] = sigmoid(eta[0]),
            ExpFamily::Poisson => out[0] = eta[0].exp(),
            ExpFamily::Exponential => out[0] = -1.0 / eta[0],
        }
        Ok(())
    }

    /// Natural parameters of `N(mean, var)`.
    pub fn gaussian_natural(mean: f64, var: f64) -> [f64; 2] {
        [mean / var, -0.5 / var]
    }
}

fn ln_factorial(x: f64) -> f64 {
    // Observations are small counts; exact summation keeps this dependency free.
    let n = x as u64;
    (2..=n).map(|k| (k as f64).ln()).sum()
}

fn check_natural_len(x: &[f64], natural: &[f64], family: ExpFamily) -> Result<()> {
    check_dim("natural parameters", x.len() * family.natural_dim(), natural.len())
}

/// `sum_j h(x_j) + eta_j . T(x_j) - A(eta_j)` with `natural` packed per
/// coordinate (`natural_dim` consecutive entries each).
pub fn expfam_loglik(x: &[f64], natural: &[f64], family: ExpFamily) -> Result<f64> {
    check_natural_len(x, natural, family)?;
    let k = family.natural_dim();
    let mut t = [0.0; 2];
    let mut acc = 0.0;
    for (&xj, eta) in x.iter().zip(natural.chunks_exact(k)) {
        family.sufficient_statistic(xj, &mut t);
        let dot: f64 = eta.iter().zip(&t).map(|(e, t)| e * t).sum();
        acc += family.base_measure(xj) + dot - family.log_partition(eta)?;
    }
    Ok(acc)
}

/// Gradient of [`expfam_loglik`] with respect to the natural parameters:
/// `T(x_j) - grad A(eta_j)`.
pub fn expfam_loglik_grad(x: &[f64], natural: &[f64], family: ExpFamily) -> Result<Vec<f64>> {
    check_natural_len(x, natural, family)?;
    let k = family.natural_dim();
    let mut out = vec![0.0; natural.len()];
    let mut t = [0.0; 2];
    let mut ga = [0.0; 2];
    for ((&xj, eta), g) in x.iter().zip(natural.chunks_exact(k)).zip(out.chunks_exact_mut(k)) {
        family.sufficient_statistic(xj, &mut t);
        family.log_partition_grad(eta, &mut ga[..k])?;
        for i in 0..k {
            g[i] = t[i] - ga[i];
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Uniform dispatch over head kinds.

/// Parameters of one likelihood head in the form the network emits.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadParams {
    GaussianDiag(GaussianDiagParams),
    GaussianFull(GaussianFullParams),
    Bernoulli(BernoulliParams),
    /// Generic member in natural parameters.
    Natural { family: ExpFamily, eta: Vec<f64> },
}

impl HeadParams {
    pub fn loglik(&self, x: &[f64]) -> Result<f64> {
        match self {
            HeadParams::GaussianDiag(p) => p.loglik(x),
            HeadParams::GaussianFull(p) => p.loglik(x),
            HeadParams::Bernoulli(p) => p.loglik(x),
            HeadParams::Natural { family, eta } => expfam_loglik(x, eta, *family),
        }
    }

    /// Flattened parameter vector; the layout matches [`HeadParams::loglik_grad`].
    pub fn to_flat(&self) -> Vec<f64> {
        match self {
            HeadParams::GaussianDiag(p) => [p.mean.as_slice(), &p.logvar].concat(),
            HeadParams::GaussianFull(p) => [p.mean.as_slice(), &p.factor_raw].concat(),
            HeadParams::Bernoulli(p) => p.logits.clone(),
            HeadParams::Natural { eta, .. } => eta.clone(),
        }
    }

    /// Rebuilds parameters of the same kind and dimension from a flat vector.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        check_dim("head parameters", self.to_flat().len(), flat.len())?;
        Ok(match self {
            HeadParams::GaussianDiag(p) => {
                let (m, v) = flat.split_at(p.dim());
                HeadParams::GaussianDiag(GaussianDiagParams {
                    mean: m.to_vec(),
                    logvar: v.to_vec(),
                })
            }
            HeadParams::GaussianFull(p) => {
                let (m, f) = flat.split_at(p.dim());
                HeadParams::GaussianFull(GaussianFullParams::new(m.to_vec(), f.to_vec())?)
            }
            HeadParams::Bernoulli(_) => HeadParams::Bernoulli(BernoulliParams::new(flat.to_vec())?),
            HeadParams::Natural { family, .. } => HeadParams::Natural {
                family: *family,
                eta: flat.to_vec(),
            },
        })
    }

    /// Analytic gradient of the log-likelihood, flattened like [`HeadParams::to_flat`].
    pub fn loglik_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            HeadParams::GaussianDiag(p) => {
                let g = p.loglik_grad(x)?;
                Ok([g.mean, g.logvar].concat())
            }
            HeadParams::GaussianFull(p) => {
                let g = p.loglik_grad(x)?;
                Ok([g.mean, g.factor_raw].concat())
            }
            HeadParams::Bernoulli(p) => p.loglik_grad(x),
            HeadParams::Natural { family, eta } => expfam_loglik_grad(x, eta, *family),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{central_diff, rel_err, rng};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normals(r: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| r.sample(StandardNormal)).collect()
    }

    /// Density oracle: invert Sigma and take its determinant by Gauss-Jordan
    /// elimination with partial pivoting.
    fn elimination_density(x: &[f64], mean: &[f64], cov: &[f64]) -> f64 {
        let d = x.len();
        let mut a: Vec<Vec<f64>> = (0..d)
            .map(|i| {
                let mut row = cov[i * d..(i + 1) * d].to_vec();
                row.extend((0..d).map(|j| if i == j { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        let mut det = 1.0;
        for c in 0..d {
            let p = (c..d)
                .max_by(|&i, &j| a[i][c].abs().partial_cmp(&a[j][c].abs()).unwrap())
                .unwrap();
            if p != c {
                a.swap(p, c);
                det = -det;
            }
            let piv = a[c][c];
            det *= piv;
            for v in a[c].iter_mut() {
                *v /= piv;
            }
            for r in 0..d {
                if r != c {
                    let f = a[r][c];
                    for k in 0..2 * d {
                        a[r][k] -= f * a[c][k];
                    }
                }
            }
        }
        let r: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
        let mut quad = 0.0;
        for i in 0..d {
            for j in 0..d {
                quad += r[i] * a[i][d + j] * r[j];
            }
        }
        -0.5 * ((2.0 * PI).powi(d as i32) * det).ln() - 0.5 * quad
    }

    fn random_spd(r: &mut impl Rng, d: usize) -> Vec<f64> {
        let b = normals(r, d * d);
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] = (0..d).map(|k| b[i * d + k] * b[j * d + k]).sum::<f64>()
                    + if i == j { 0.5 } else { 0.0 };
            }
        }
        cov
    }

    #[test]
    fn full_gaussian_standard_normal_at_mean() {
        let p = GaussianFullParams::from_covariance(vec![0.0], &[1.0]).unwrap();
        assert!((p.loglik(&[0.0]).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
        let p = GaussianFullParams::from_covariance(vec![0.3, -1.0], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((p.loglik(&[0.3, -1.0]).unwrap() + LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn full_gaussian_matches_elimination_oracle() {
        let mut r = rng(11);
        for _ in 0..50 {
            let cov = random_spd(&mut r, 3);
            let mean = normals(&mut r, 3);
            let x = normals(&mut r, 3);
            let p = GaussianFullParams::from_covariance(mean.clone(), &cov).unwrap();
            let got = p.loglik(&x).unwrap();
            let want = elimination_density(&x, &mean, &cov);
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
            let back = p.covariance();
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(back[i * 3 + j], back[j * 3 + i]);
                    assert!((back[i * 3 + j] - cov[i * 3 + j]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn full_gaussian_errors() {
        let p = GaussianFullParams::from_covariance(vec![0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(p.loglik(&[0.0]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(p.loglik(&[f64::NAN, 0.0]), Err(Error::NonFinite(_))));
        assert!(GaussianFullParams::from_covariance(vec![0.0], &[-1.0]).is_err());
    }

    #[test]
    fn diag_gaussian_forms_agree() {
        let p = GaussianDiagParams::new(vec![0.0], vec![0.0]).unwrap();
        assert!((p.loglik(&[0.0]).unwrap() + 0.5 * LN_2PI).abs() < 1e-15);

        let mut r = rng(3);
        for _ in 0..200 {
            let d = r.gen_range(1..6);
            let x = normals(&mut r, d);
            let mean = normals(&mut r, d);
            let logvar: Vec<f64> = normals(&mut r, d);
            let p = GaussianDiagParams::new(mean.clone(), logvar.clone()).unwrap();
            let var: Vec<f64> = logvar.iter().map(|v| v.exp()).collect();
            let a = p.loglik(&x).unwrap();
            assert!((a - gaussian_indep_loglik(&x, &mean, &var).unwrap()).abs() < 1e-12);
            let mut cov = vec![0.0; d * d];
            for j in 0..d {
                cov[j * d + j] = var[j];
            }
            let full = GaussianFullParams::from_covariance(mean, &cov).unwrap();
            assert!((a - full.loglik(&x).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn logvar_is_clamped() {
        let p = GaussianDiagParams::new(vec![0.0, 0.0], vec![-50.0, 50.0]).unwrap();
        assert_eq!(p.logvar, vec![LOGVAR_MIN, LOGVAR_MAX]);
    }

    #[test]
    fn bernoulli_examples() {
        let p = BernoulliParams::new(vec![0.0]).unwrap();
        assert!((p.loglik(&[1.0]).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        assert!((p.loglik_grad(&[1.0]).unwrap()[0] - 0.5).abs() < 1e-15);
        let p = BernoulliParams::new(vec![0.0, 0.0]).unwrap();
        assert!((p.loglik(&[1.0, 0.0]).unwrap() - 2.0 * 0.5f64.ln()).abs() < 1e-15);
        assert!(matches!(p.loglik(&[0.5, 0.0]), Err(Error::NonBinary { index: 0, .. })));
    }

    #[test]
    fn bernoulli_logit_matches_probability_form() {
        let mut r = rng(5);
        for _ in 0..200 {
            let d = r.gen_range(1..10);
            let logits: Vec<f64> = normals(&mut r, d).into_iter().map(|v| 3.0 * v).collect();
            let x: Vec<f64> = (0..d).map(|_| r.gen_range(0..2) as f64).collect();
            let p = BernoulliParams::new(logits).unwrap();
            let a = p.loglik(&x).unwrap();
            let b = bernoulli_prob_loglik(&x, &p.probabilities()).unwrap();
            assert!((a - b).abs() < 1e-12, "{a} {b}");
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        for y in [1e-6, 0.3, 2.0, 40.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-9 * y.max(1.0));
        }
    }

    #[test]
    fn generic_family_examples() {
        assert!((expfam_loglik(&[0.0], &[0.0], ExpFamily::Poisson).unwrap() + 1.0).abs() < 1e-15);
        let b = expfam_loglik(&[1.0], &[0.0], ExpFamily::Bernoulli).unwrap();
        assert!((b - BernoulliParams::new(vec![0.0]).unwrap().loglik(&[1.0]).unwrap()).abs() < 1e-15);
        assert!(matches!(
            expfam_loglik(&[1.0], &[0.0], ExpFamily::Exponential),
            Err(Error::OutOfDomain(_))
        ));
        assert!(matches!(
            expfam_loglik(&[1.0], &[0.0, 0.1], ExpFamily::Gaussian),
            Err(Error::OutOfDomain(_))
        ));
        // Exp(rate 2) at x = 0.5: ln 2 - 1.
        let e = expfam_loglik(&[0.5], &[-2.0], ExpFamily::Exponential).unwrap();
        assert!((e - (2f64.ln() - 1.0)).abs() < 1e-15);
        // Poisson(lambda = 3) at x = 2.
        let want = 2.0 * 3f64.ln() - 3.0 - 2f64.ln();
        let got = expfam_loglik(&[2.0], &[3f64.ln()], ExpFamily::Poisson).unwrap();
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn generic_gaussian_matches_diag_head() {
        let mut r = rng(8);
        for _ in 0..200 {
            let d = r.gen_range(1..6);
            let x = normals(&mut r, d);
            let mean = normals(&mut r, d);
            let logvar = normals(&mut r, d);
            let eta: Vec<f64> = mean
                .iter()
                .zip(&logvar)
                .flat_map(|(&m, &v)| ExpFamily::gaussian_natural(m, v.exp()))
                .collect();
            let a = expfam_loglik(&x, &eta, ExpFamily::Gaussian).unwrap();
            let b = GaussianDiagParams::new(mean, logvar).unwrap().loglik(&x).unwrap();
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn log_partition_is_midpoint_convex() {
        let mut r = rng(21);
        for fam in ExpFamily::ALL {
            for _ in 0..500 {
                let draw = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
                    match fam {
                        ExpFamily::Gaussian => vec![r.gen_range(-3.0..3.0), -r.gen_range(0.05..3.0)],
                        ExpFamily::Exponential => vec![-r.gen_range(0.05..5.0)],
                        _ => vec![r.gen_range(-5.0..5.0)],
                    }
                };
                let a = draw(&mut r);
                let b = draw(&mut r);
                let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
                let fa = fam.log_partition(&a).unwrap();
                let fb = fam.log_partition(&b).unwrap();
                let fm = fam.log_partition(&mid).unwrap();
                assert!(fm <= 0.5 * (fa + fb) + 1e-12, "{fam:?} {a:?} {b:?}");
            }
        }
    }

    #[test]
    fn continuous_heads_integrate_to_at_most_one() {
        let mut r = rng(4);
        for _ in 0..20 {
            let mu: f64 = r.sample(StandardNormal);
            let lv: f64 = r.gen_range(-1.0..1.0);
            let p = GaussianDiagParams::new(vec![mu], vec![lv]).unwrap();
            let h = 1e-3;
            let total: f64 = (-20_000..20_000)
                .map(|i| p.loglik(&[mu + i as f64 * h]).unwrap().exp() * h)
                .sum();
            assert!(total <= 1.0 + 1e-6 && total > 0.99, "{total}");
            let rate = r.gen_range(0.2..3.0);
            let total: f64 = (0..200_000)
                .map(|i| {
                    let x = (i as f64 + 0.5) * 2e-4;
                    expfam_loglik(&[x], &[-rate], ExpFamily::Exponential).unwrap().exp() * 2e-4
                })
                .sum();
            assert!(total <= 1.0 + 1e-6 && total > 0.99, "{total}");
        }
    }

    #[test]
    fn poisson_sums_to_one() {
        for lam in [0.1, 1.0, 4.5] {
            let total: f64 = (0..100)
                .map(|k| expfam_loglik(&[k as f64], &[f64::ln(lam)], ExpFamily::Poisson).unwrap().exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn independent_heads_are_permutation_equivariant() {
        let mut r = rng(17);
        let x = normals(&mut r, 5);
        let mean = normals(&mut r, 5);
        let lv = normals(&mut r, 5);
        let perm = [3, 0, 4, 1, 2];
        let pick = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let a = GaussianDiagParams::new(mean.clone(), lv.clone()).unwrap().loglik(&x).unwrap();
        let b = GaussianDiagParams::new(pick(&mean), pick(&lv)).unwrap().loglik(&pick(&x)).unwrap();
        assert!((a - b).abs() < 1e-12);
        let bits = vec![1.0, 0.0, 0.0, 1.0, 1.0];
        let a = BernoulliParams::new(mean.clone()).unwrap().loglik(&bits).unwrap();
        let b = BernoulliParams::new(pick(&mean)).unwrap().loglik(&pick(&bits)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    fn check_head_grad(head: &HeadParams, x: &[f64]) {
        let flat = head.to_flat();
        let analytic = head.loglik_grad(x).unwrap();
        let numeric = central_diff(&flat, 1e-5, |p| head.with_flat(p).unwrap().loglik(x).unwrap());
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(rel_err(*a, *n) < 1e-5, "{head:?}: {a} vs {n}");
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut r = rng(99);
        let diag_zero = GaussianDiagParams::new(vec![1.0, 2.0], vec![0.3, -0.2]).unwrap();
        let g = diag_zero.loglik_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(g.mean, vec![0.0, 0.0]);
        for _ in 0..100 {
            let d = r.gen_range(1..5);
            let x = normals(&mut r, d);
            let bits: Vec<f64> = (0..d).map(|_| r.gen_range(0..2) as f64).collect();
            let counts: Vec<f64> = (0..d).map(|_| r.gen_range(0..6) as f64).collect();
            let pos: Vec<f64> = (0..d).map(|_| r.gen_range(0.05..3.0)).collect();
            let diag = HeadParams::GaussianDiag(
                GaussianDiagParams::new(normals(&mut r, d), normals(&mut r, d)).unwrap(),
            );
            check_head_grad(&diag, &x);
            let full = HeadParams::GaussianFull(
                GaussianFullParams::new(normals(&mut r, d), normals(&mut r, d * (d + 1) / 2)).unwrap(),
            );
            check_head_grad(&full, &x);
            let bern = HeadParams::Bernoulli(BernoulliParams::new(normals(&mut r, d)).unwrap());
            check_head_grad(&bern, &bits);
            let pois = HeadParams::Natural {
                family: ExpFamily::Poisson,
                eta: normals(&mut r, d),
            };
            check_head_grad(&pois, &counts);
            let expo = HeadParams::Natural {
                family: ExpFamily::Exponential,
                eta: (0..d).map(|_| -r.gen_range(0.2..3.0)).collect(),
            };
            check_head_grad(&expo, &pos);
            let gauss = HeadParams::Natural {
                family: ExpFamily::Gaussian,
                eta: (0..d)
                    .flat_map(|_| ExpFamily::gaussian_natural(r.gen_range(-1.0..1.0), r.gen_range(0.3..2.0)))
                    .collect(),
            };
            check_head_grad(&gauss, &x);
        }
    }
}
