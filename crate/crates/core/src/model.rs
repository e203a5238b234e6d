//! Log-densities of the binomial CAR model.
//!
//! ```text
//! y_kt ~ Binomial(m_kt, theta_kt)
//! logit(theta_kt) = x_kt' beta + phi_k + (alpha + delta_k) * (t - tbar) / T
//! phi ~ N(0, tau2_phi (D - rho_int W)^-1),  delta ~ N(0, tau2_delta (D - rho_slo W)^-1)
//! beta_j ~ N(0, beta_var), alpha ~ N(0, alpha_var)
//! tau2_* ~ IG(shape, rate), rho_* ~ Uniform(0, 1)
//! ```

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::data::StratumDataset;
use crate::graph::{CountyGraph, GraphError};

/// Linear predictors are clamped to `[-ETA_CLAMP, ETA_CLAMP]` before the link.
pub const ETA_CLAMP: f64 = 30.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("time index {index} outside 1..={horizon}")]
    IndexOutOfRange { index: usize, horizon: usize },
    #[error("vector has length {found}, expected {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("non-finite log-density in {0}")]
    NonFiniteResult(&'static str),
    #[error("invalid chain state: {0}")]
    InvalidState(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Current value of every model parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    /// Fixed effects; `beta[0]` is the intercept.
    pub beta: Vec<f64>,
    /// National time trend.
    pub alpha: f64,
    /// County spatial baselines.
    pub phi: Vec<f64>,
    /// County deviations from the national trend.
    pub delta: Vec<f64>,
    pub tau2_phi: f64,
    pub tau2_delta: f64,
    pub rho_int: f64,
    pub rho_slo: f64,
}

impl ChainState {
    /// Zero effects with `tau2 = 0.01` and `rho = 0.5`.
    pub fn initial(p: usize, k: usize) -> Self {
        Self {
            beta: vec![0.0; p],
            alpha: 0.0,
            phi: vec![0.0; k],
            delta: vec![0.0; k],
            tau2_phi: 0.01,
            tau2_delta: 0.01,
            rho_int: 0.5,
            rho_slo: 0.5,
        }
    }

    pub fn validate(&self, p: usize, k: usize) -> Result<(), ModelError> {
        if self.beta.len() != p {
            return Err(ModelError::LengthMismatch {
                expected: p,
                found: self.beta.len(),
            });
        }
        for v in [&self.phi, &self.delta] {
            if v.len() != k {
                return Err(ModelError::LengthMismatch {
                    expected: k,
                    found: v.len(),
                });
            }
        }
        if !(self.tau2_phi > 0.0 && self.tau2_delta > 0.0) {
            return Err(ModelError::InvalidState("variances must be positive".into()));
        }
        for rho in [self.rho_int, self.rho_slo] {
            if !(rho > 0.0 && rho < 1.0) {
                return Err(ModelError::InvalidState(format!("rho {rho} outside (0, 1)")));
            }
        }
        if !self.is_finite() {
            return Err(ModelError::InvalidState("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.beta
            .iter()
            .chain(&self.phi)
            .chain(&self.delta)
            .chain(&[
                self.alpha,
                self.tau2_phi,
                self.tau2_delta,
                self.rho_int,
                self.rho_slo,
            ])
            .all(|v| v.is_finite())
    }
}

/// Prior hyperparameters.
///
/// `beta_var` defaults to `1000^2` like `alpha_var`; set it to 1 for an
/// identity prior covariance on the fixed effects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub beta_var: f64,
    pub alpha_var: f64,
    pub tau_shape: f64,
    pub tau_rate: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            beta_var: 1.0e6,
            alpha_var: 1.0e6,
            tau_shape: 1.0,
            tau_rate: 0.01,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let all = [self.beta_var, self.alpha_var, self.tau_shape, self.tau_rate];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(ModelError::DomainError("prior hyperparameters must be positive".into()))
        }
    }
}

pub fn logit(p: f64) -> Result<f64, ModelError> {
    if p > 0.0 && p < 1.0 {
        Ok((p / (1.0 - p)).ln())
    } else {
        Err(ModelError::DomainError(format!("logit of {p}")))
    }
}

pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Centered, scaled time `(t - tbar) / T` for 1-based `t`, `tbar = (1 + T) / 2`.
pub fn time_covariate(t: usize, horizon: usize) -> Result<f64, ModelError> {
    if t == 0 || t > horizon {
        return Err(ModelError::IndexOutOfRange { index: t, horizon });
    }
    let tbar = (1.0 + horizon as f64) / 2.0;
    Ok((t as f64 - tbar) / horizon as f64)
}

/// Time covariates for every year of a horizon, indexed from 0.
pub fn time_covariates(horizon: usize) -> Vec<f64> {
    (1..=horizon)
        .map(|t| time_covariate(t, horizon).expect("t within horizon"))
        .collect()
}

/// `x_kt' beta + phi_k + (alpha + delta_k) * time(t)` for 0-based `k`, `t`.
pub fn linear_predictor(
    state: &ChainState,
    data: &StratumDataset,
    k: usize,
    t: usize,
) -> Result<f64, ModelError> {
    if k >= data.n_counties() {
        return Err(ModelError::DomainError(format!("county index {k}")));
    }
    let time = time_covariate(t + 1, data.n_years())?;
    let xb: f64 = data
        .row(k, t)
        .iter()
        .zip(&state.beta)
        .map(|(x, b)| x * b)
        .sum();
    Ok(xb + state.phi[k] + (state.alpha + state.delta[k]) * time)
}

/// Binomial log-pmf including `log C(m, y)`.
pub fn binomial_loglik(y: u64, m: u64, theta: f64) -> Result<f64, ModelError> {
    if y > m {
        return Err(ModelError::DomainError(format!("{y} successes out of {m}")));
    }
    if !(theta > 0.0 && theta < 1.0) {
        return Err(ModelError::DomainError(format!("probability {theta}")));
    }
    let (y, m) = (y as f64, m as f64);
    Ok(ln_binomial(m as u64, y as u64) + y * theta.ln() + (m - y) * (-theta).ln_1p())
}

/// `log C(m, y)`.
pub fn ln_choose(m: u64, y: u64) -> f64 {
    ln_binomial(m, y)
}

/// Likelihood kernel of one cell on the logit scale, without `log C(m, y)`:
/// `y * eta - m * ln(1 + e^eta)` with `eta` clamped.
#[inline]
pub fn cell_kernel(y: f64, m: f64, eta: f64) -> f64 {
    let eta = eta.clamp(-ETA_CLAMP, ETA_CLAMP);
    if m == 0.0 {
        return 0.0;
    }
    y * eta - m * softplus(eta)
}

/// `v' (D - rho W) v`, summed over the edge list.
pub fn car_quadform(graph: &CountyGraph, v: &[f64], rho: f64) -> Result<f64, ModelError> {
    let (diag, cross) = quadform_parts(graph, v)?;
    Ok(diag - 2.0 * rho * cross)
}

/// `(sum_k d_k v_k^2, sum_{i~j} v_i v_j)`, so `Q(rho) = diag - 2 rho cross`.
pub fn quadform_parts(graph: &CountyGraph, v: &[f64]) -> Result<(f64, f64), ModelError> {
    if v.len() != graph.len() {
        return Err(ModelError::LengthMismatch {
            expected: graph.len(),
            found: v.len(),
        });
    }
    let diag = v
        .iter()
        .enumerate()
        .map(|(k, x)| graph.degree(k) as f64 * x * x)
        .sum();
    let cross = graph.edges().iter().map(|&(i, j)| v[i] * v[j]).sum();
    Ok((diag, cross))
}

/// Log-density of `N_K(0, tau2 (D - rho W)^-1)` at `v`.
pub fn car_logdensity(
    graph: &CountyGraph,
    v: &[f64],
    rho: f64,
    tau2: f64,
) -> Result<f64, ModelError> {
    if !(tau2 > 0.0) {
        return Err(ModelError::DomainError(format!("variance {tau2}")));
    }
    let k = graph.len() as f64;
    let logdet = graph.logdet_precision(rho)?;
    let q = car_quadform(graph, v, rho)?;
    Ok(-0.5 * k * (2.0 * PI).ln() - 0.5 * k * tau2.ln() + 0.5 * logdet - q / (2.0 * tau2))
}

pub fn normal_logpdf(x: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - x * x / (2.0 * var)
}

pub fn inverse_gamma_logpdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
}

/// The additive pieces of the log posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogPosteriorTerms {
    pub likelihood: f64,
    pub car_phi: f64,
    pub car_delta: f64,
    pub beta_prior: f64,
    pub alpha_prior: f64,
    pub tau2_prior: f64,
}

impl LogPosteriorTerms {
    pub fn total(&self) -> f64 {
        self.likelihood
            + self.car_phi
            + self.car_delta
            + self.beta_prior
            + self.alpha_prior
            + self.tau2_prior
    }

    pub fn prior(&self) -> f64 {
        self.total() - self.likelihood
    }
}

fn check_shapes(
    state: &ChainState,
    data: &StratumDataset,
    graph: &CountyGraph,
) -> Result<(), ModelError> {
    if data.n_counties() != graph.len() {
        return Err(ModelError::LengthMismatch {
            expected: graph.len(),
            found: data.n_counties(),
        });
    }
    state.validate(data.n_covariates(), graph.len())
}

/// Full binomial log-likelihood (with combinatorial constants) summed in cell
/// order.
pub fn log_likelihood(state: &ChainState, data: &StratumDataset) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for k in 0..data.n_counties() {
        for t in 0..data.n_years() {
            let c = data.cell(k, t);
            let (y, m) = (data.deaths()[c], data.exposure()[c]);
            let eta = linear_predictor(state, data, k, t)?;
            total += ln_choose(m, y) + cell_kernel(y as f64, m as f64, eta);
        }
    }
    Ok(total)
}

pub fn log_posterior_terms(
    state: &ChainState,
    data: &StratumDataset,
    graph: &CountyGraph,
    priors: &PriorConfig,
) -> Result<LogPosteriorTerms, ModelError> {
    check_shapes(state, data, graph)?;
    let terms = LogPosteriorTerms {
        likelihood: log_likelihood(state, data)?,
        car_phi: car_logdensity(graph, &state.phi, state.rho_int, state.tau2_phi)?,
        car_delta: car_logdensity(graph, &state.delta, state.rho_slo, state.tau2_delta)?,
        beta_prior: state
            .beta
            .iter()
            .map(|b| normal_logpdf(*b, priors.beta_var))
            .sum(),
        alpha_prior: normal_logpdf(state.alpha, priors.alpha_var),
        tau2_prior: inverse_gamma_logpdf(state.tau2_phi, priors.tau_shape, priors.tau_rate)
            + inverse_gamma_logpdf(state.tau2_delta, priors.tau_shape, priors.tau_rate),
    };
    if !terms.total().is_finite() {
        return Err(ModelError::NonFiniteResult("log_posterior"));
    }
    Ok(terms)
}

/// Joint log posterior density, up to the normalizing constant of the data.
/// The uniform priors on both `rho` contribute zero.
pub fn log_posterior(
    state: &ChainState,
    data: &StratumDataset,
    graph: &CountyGraph,
    priors: &PriorConfig,
) -> Result<f64, ModelError> {
    Ok(log_posterior_terms(state, data, graph, priors)?.total())
}

/// Partial derivatives of [`log_posterior`] with respect to every scalar, laid
/// out like [`ChainState`]. Clamped cells contribute no likelihood gradient.
pub fn log_posterior_gradient(
    state: &ChainState,
    data: &StratumDataset,
    graph: &CountyGraph,
    priors: &PriorConfig,
) -> Result<ChainState, ModelError> {
    check_shapes(state, data, graph)?;
    let (k_len, p) = (graph.len(), data.n_covariates());
    let time = time_covariates(data.n_years());
    let mut grad = ChainState {
        beta: state.beta.iter().map(|b| -b / priors.beta_var).collect(),
        alpha: -state.alpha / priors.alpha_var,
        phi: vec![0.0; k_len],
        delta: vec![0.0; k_len],
        tau2_phi: 0.0,
        tau2_delta: 0.0,
        rho_int: 0.0,
        rho_slo: 0.0,
    };

    for k in 0..k_len {
        for (t, &s) in time.iter().enumerate() {
            let c = data.cell(k, t);
            let eta = linear_predictor(state, data, k, t)?;
            if eta.abs() > ETA_CLAMP {
                continue;
            }
            let resid = data.deaths()[c] as f64 - data.exposure()[c] as f64 * inv_logit(eta);
            for (j, x) in data.row(k, t).iter().enumerate().take(p) {
                grad.beta[j] += resid * x;
            }
            grad.alpha += resid * s;
            grad.phi[k] += resid;
            grad.delta[k] += resid * s;
        }
    }

    let precision_times = |v: &[f64], rho: f64| -> Vec<f64> {
        (0..k_len)
            .map(|k| graph.degree(k) as f64 * v[k] - rho * graph.neighbor_sum(k, v))
            .collect()
    };
    for (g, qv) in grad
        .phi
        .iter_mut()
        .zip(precision_times(&state.phi, state.rho_int))
    {
        *g -= qv / state.tau2_phi;
    }
    for (g, qv) in grad
        .delta
        .iter_mut()
        .zip(precision_times(&state.delta, state.rho_slo))
    {
        *g -= qv / state.tau2_delta;
    }

    let k = k_len as f64;
    let variance_grad = |v: &[f64], rho: f64, tau2: f64| -> Result<f64, ModelError> {
        let q = car_quadform(graph, v, rho)?;
        Ok(-0.5 * k / tau2 + q / (2.0 * tau2 * tau2) - (priors.tau_shape + 1.0) / tau2
            + priors.tau_rate / (tau2 * tau2))
    };
    grad.tau2_phi = variance_grad(&state.phi, state.rho_int, state.tau2_phi)?;
    grad.tau2_delta = variance_grad(&state.delta, state.rho_slo, state.tau2_delta)?;

    let rho_grad = |v: &[f64], rho: f64, tau2: f64| -> Result<f64, ModelError> {
        let (_, cross) = quadform_parts(graph, v)?;
        Ok(0.5 * graph.logdet_precision_grad(rho)? + cross / tau2)
    };
    grad.rho_int = rho_grad(&state.phi, state.rho_int, state.tau2_phi)?;
    grad.rho_slo = rho_grad(&state.delta, state.rho_slo, state.tau2_delta)?;
    Ok(grad)
}
