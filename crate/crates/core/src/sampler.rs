//! Metropolis-within-Gibbs sampler.
//!
//! One iteration updates, in this fixed order: the `beta` block, `alpha`,
//! every `phi_k`, every `delta_k` (single-site), the two line moves (see
//! [`SamplerConfig::line_moves`]), `tau2_phi` and `tau2_delta` (conjugate
//! inverse-gamma draws), then `rho_int` and `rho_slo` (random walk on the
//! logit scale). Gaussian random-walk scales adapt every
//! `adapt_interval` iterations during burn-in only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::StratumDataset;
use crate::graph::CountyGraph;
use crate::model::{
    self, car_quadform, cell_kernel, inv_logit, logit, quadform_parts, time_covariates,
    ChainState, ModelError, PriorConfig,
};

/// Multiplicative step used by [`adapt_scale`].
pub const ADAPT_FACTOR: f64 = 1.1;

/// Random-walk step size that targets roughly 0.44 acceptance in one
/// dimension when matched to the conditional standard deviation.
const RW_STEP: f64 = 2.38;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite Metropolis ratio in {0}")]
    NonFiniteDelta(&'static str),
    #[error("chain state became non-finite at iteration {iteration} after {block}: {dump}")]
    NonFiniteState {
        iteration: usize,
        block: &'static str,
        dump: String,
    },
    #[error("dataset counties do not match the graph")]
    GraphMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub burn_in: usize,
    /// Number of saved draws.
    pub samples: usize,
    /// Keep every `thin`-th post-burn-in iteration.
    pub thin: usize,
    pub adapt_interval: usize,
    pub target_accept_low: f64,
    pub target_accept_high: f64,
    pub seed: u64,
    /// RNG stream; use the stratum id so concurrent strata never share draws.
    pub stream: u64,
    /// Move `mean(phi)` into the intercept and `mean(delta)` into `alpha`
    /// after every iteration.
    pub recenter_random_effects: bool,
    /// After the single-site sweeps, draw exact Gibbs moves along
    /// `(beta_0 + c, phi - c)` and `(alpha + c, delta - c)`. Both leave every
    /// linear predictor unchanged, so only the CAR and fixed-effect priors
    /// enter; they fix the slow mixing of the intercept against `mean(phi)`.
    pub line_moves: bool,
    /// Metropolis moves along `(beta_j + c, phi - c * xbar_j)` for every
    /// covariate whose county means `xbar_j` vary, which decorrelates
    /// county-level covariates from `phi`.
    pub shift_moves: bool,
    /// Store every `phi_k` and `delta_k` draw; otherwise only running moments.
    pub store_effects: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            burn_in: 100_000,
            samples: 50_000,
            thin: 1,
            adapt_interval: 100,
            target_accept_low: 0.3,
            target_accept_high: 0.5,
            seed: 1,
            stream: 0,
            recenter_random_effects: false,
            line_moves: true,
            shift_moves: true,
            store_effects: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: &str| Err(SamplerError::InvalidConfig(m.to_string()));
        if self.samples == 0 {
            return bad("samples must be at least 1");
        }
        if self.thin == 0 {
            return bad("thin must be at least 1");
        }
        if self.adapt_interval == 0 {
            return bad("adapt_interval must be at least 1");
        }
        let (lo, hi) = (self.target_accept_low, self.target_accept_high);
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return bad("need 0 < target_accept_low < target_accept_high < 1");
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.burn_in + self.samples * self.thin
    }

    pub fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptanceCounter {
    pub accepted: u64,
    pub attempted: u64,
}

impl AcceptanceCounter {
    pub fn record(&mut self, accepted: bool) {
        self.attempted += 1;
        self.accepted += u64::from(accepted);
    }

    pub fn rate(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            self.accepted as f64 / self.attempted as f64
        }
    }
}

/// Post-burn-in acceptance per Metropolis block (`phi` and `delta` pool their
/// single-site updates, `shift` pools the covariate shift moves).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub beta: AcceptanceCounter,
    pub alpha: AcceptanceCounter,
    pub phi: AcceptanceCounter,
    pub delta: AcceptanceCounter,
    pub rho_int: AcceptanceCounter,
    pub rho_slo: AcceptanceCounter,
    #[serde(default)]
    pub shift: AcceptanceCounter,
}

impl AcceptanceStats {
    /// Blocks that were attempted at least once after burn-in.
    pub fn blocks(&self) -> Vec<(&'static str, AcceptanceCounter)> {
        [
            ("beta", self.beta),
            ("alpha", self.alpha),
            ("phi", self.phi),
            ("delta", self.delta),
            ("rho_int", self.rho_int),
            ("rho_slo", self.rho_slo),
            ("shift", self.shift),
        ]
        .into_iter()
        .filter(|(_, c)| c.attempted > 0)
        .collect()
    }
}

/// Random-walk standard deviations; `rho_*` scales act on the logit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalScales {
    pub beta: Vec<f64>,
    pub alpha: f64,
    pub phi: Vec<f64>,
    pub delta: Vec<f64>,
    pub rho_int: f64,
    pub rho_slo: f64,
    /// Per covariate; zero for columns without a shift move.
    #[serde(default)]
    pub shift: Vec<f64>,
}

/// Scale adaptation rule: grow by [`ADAPT_FACTOR`] above `high`, shrink below
/// `low`, otherwise unchanged.
pub fn adapt_scale(scale: f64, accept_rate: f64, low: f64, high: f64) -> f64 {
    if accept_rate > high {
        scale * ADAPT_FACTOR
    } else if accept_rate < low {
        scale / ADAPT_FACTOR
    } else {
        scale
    }
}

/// Metropolis accept/reject for a log acceptance ratio. A ratio of zero or
/// more is accepted without consuming randomness.
pub fn metropolis_accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    if log_ratio >= 0.0 {
        return true;
    }
    let u: f64 = rng.random();
    u.ln() < log_ratio
}

/// One Gaussian random-walk Metropolis step on a scalar target.
pub fn rw_metropolis_step<R: Rng + ?Sized>(
    current: f64,
    scale: f64,
    log_density: impl Fn(f64) -> f64,
    rng: &mut R,
) -> (f64, bool) {
    let z: f64 = StandardNormal.sample(rng);
    let proposal = current + scale * z;
    let log_ratio = log_density(proposal) - log_density(current);
    if metropolis_accept(log_ratio, rng) {
        (proposal, true)
    } else {
        (current, false)
    }
}

/// Exact draw of a CAR variance from its inverse-gamma full conditional,
/// `IG(shape + K/2, rate + v'(D - rho W)v / 2)`.
pub fn update_tau2<R: Rng + ?Sized>(
    graph: &CountyGraph,
    v: &[f64],
    rho: f64,
    priors: &PriorConfig,
    rng: &mut R,
) -> Result<f64, SamplerError> {
    let q = car_quadform(graph, v, rho)?;
    let (shape, rate) = tau2_conditional(graph.len(), q, priors);
    Ok(draw_inverse_gamma(shape, rate, rng))
}

/// Shape and rate of the variance full conditional given the quadratic form.
pub fn tau2_conditional(k: usize, quadform: f64, priors: &PriorConfig) -> (f64, f64) {
    (
        priors.tau_shape + 0.5 * k as f64,
        priors.tau_rate + 0.5 * quadform.max(0.0),
    )
}

fn draw_inverse_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    let gamma = Gamma::new(shape, 1.0 / rate).expect("positive shape and rate");
    1.0 / gamma.sample(rng)
}

/// Logit-scale random-walk update of a CAR dependence parameter given its
/// effect vector and variance.
///
/// The target is the CAR log-density of `v` plus the logistic Jacobian
/// `log rho + log(1 - rho)`; the uniform prior adds nothing.
pub fn update_rho<R: Rng + ?Sized>(
    graph: &CountyGraph,
    v: &[f64],
    rho: f64,
    tau2: f64,
    scale: f64,
    rng: &mut R,
) -> Result<(f64, bool), SamplerError> {
    let (diag, cross) = quadform_parts(graph, v)?;
    rho_step(graph, diag, cross, rho, tau2, scale, rng)
}

fn rho_step<R: Rng + ?Sized>(
    graph: &CountyGraph,
    diag: f64,
    cross: f64,
    rho: f64,
    tau2: f64,
    scale: f64,
    rng: &mut R,
) -> Result<(f64, bool), SamplerError> {
    let z: f64 = StandardNormal.sample(rng);
    let proposal = inv_logit(logit(rho)? + scale * z);
    if !(proposal > 0.0 && proposal < 1.0) {
        return Ok((rho, false));
    }
    let target = |r: f64| -> Result<f64, SamplerError> {
        let q = diag - 2.0 * r * cross;
        Ok(0.5 * graph.logdet_precision(r).map_err(ModelError::from)? - q / (2.0 * tau2)
            + r.ln()
            + (1.0 - r).ln())
    };
    let log_ratio = target(proposal)? - target(rho)?;
    if log_ratio.is_nan() {
        return Err(SamplerError::NonFiniteDelta("rho"));
    }
    Ok(if metropolis_accept(log_ratio, rng) {
        (proposal, true)
    } else {
        (rho, false)
    })
}

/// Blocks updated by Gaussian random-walk Metropolis steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MhTarget {
    Beta,
    Alpha,
    Phi(usize),
    Delta(usize),
}

/// Result of one Metropolis update.
#[derive(Debug, Clone, PartialEq)]
pub struct MhOutcome {
    pub proposal: Vec<f64>,
    /// Change in log posterior from the current value to the proposal.
    pub log_ratio: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, Default)]
struct Window {
    accepted: u32,
    attempted: u32,
}

impl Window {
    fn record(&mut self, accepted: bool) {
        self.attempted += 1;
        self.accepted += u32::from(accepted);
    }

    fn take_rate(&mut self) -> Option<f64> {
        let rate = (self.attempted > 0).then(|| f64::from(self.accepted) / f64::from(self.attempted));
        *self = Self::default();
        rate
    }
}

#[derive(Debug, Clone)]
struct Windows {
    beta: Window,
    alpha: Window,
    phi: Vec<Window>,
    delta: Vec<Window>,
    rho_int: Window,
    rho_slo: Window,
    shift: Vec<Window>,
}

/// Chain state plus the per-cell caches that make single-site updates local.
///
/// For cell `c = k * T + t` the sampler keeps `x_c' beta`, the linear
/// predictor and the likelihood kernel (without the combinatorial constant,
/// which cancels in every ratio).
#[derive(Debug, Clone)]
pub struct ChainSampler<'a> {
    data: &'a StratumDataset,
    graph: &'a CountyGraph,
    priors: PriorConfig,
    time: Vec<f64>,
    deaths: Vec<f64>,
    exposure: Vec<f64>,
    state: ChainState,
    scales: ProposalScales,
    xb: Vec<f64>,
    eta: Vec<f64>,
    kernel: Vec<f64>,
    scratch_xb: Vec<f64>,
    scratch_eta: Vec<f64>,
    scratch_kernel: Vec<f64>,
    /// County means of each design column that gets a shift move.
    county_means: Vec<Option<Vec<f64>>>,
}

impl<'a> ChainSampler<'a> {
    pub fn new(
        data: &'a StratumDataset,
        graph: &'a CountyGraph,
        priors: PriorConfig,
        state: ChainState,
    ) -> Result<Self, SamplerError> {
        if !data.matches_graph(graph) {
            return Err(SamplerError::GraphMismatch);
        }
        priors.validate()?;
        state.validate(data.n_covariates(), graph.len())?;
        let cells = graph.len() * data.n_years();
        let mut sampler = Self {
            data,
            graph,
            priors,
            time: time_covariates(data.n_years()),
            deaths: data.deaths().iter().map(|&y| y as f64).collect(),
            exposure: data.exposure().iter().map(|&m| m as f64).collect(),
            scales: ProposalScales {
                beta: Vec::new(),
                alpha: 0.0,
                phi: Vec::new(),
                delta: Vec::new(),
                rho_int: 1.0,
                rho_slo: 1.0,
                shift: Vec::new(),
            },
            county_means: county_means(data),
            state,
            xb: vec![0.0; cells],
            eta: vec![0.0; cells],
            kernel: vec![0.0; cells],
            scratch_xb: vec![0.0; cells],
            scratch_eta: vec![0.0; cells],
            scratch_kernel: vec![0.0; cells],
        };
        sampler.refresh_caches();
        sampler.scales = sampler.initial_scales();
        Ok(sampler)
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn scales(&self) -> &ProposalScales {
        &self.scales
    }

    pub fn set_scales(&mut self, scales: ProposalScales) {
        self.scales = scales;
    }

    fn n_years(&self) -> usize {
        self.time.len()
    }

    fn refresh_caches(&mut self) {
        let p = self.data.n_covariates();
        let design = self.data.design();
        let t_len = self.n_years();
        for c in 0..self.xb.len() {
            let (k, t) = (c / t_len, c % t_len);
            let xb: f64 = design[c * p..(c + 1) * p]
                .iter()
                .zip(&self.state.beta)
                .map(|(x, b)| x * b)
                .sum();
            self.xb[c] = xb;
            self.eta[c] =
                xb + self.state.phi[k] + (self.state.alpha + self.state.delta[k]) * self.time[t];
            self.kernel[c] = cell_kernel(self.deaths[c], self.exposure[c], self.eta[c]);
        }
    }

    /// Starting scales from the diagonal of the Fisher information at the
    /// current state.
    fn initial_scales(&self) -> ProposalScales {
        let p = self.data.n_covariates();
        let design = self.data.design();
        let t_len = self.n_years();
        let weight: Vec<f64> = self
            .eta
            .iter()
            .zip(&self.exposure)
            .map(|(&eta, &m)| {
                let theta = inv_logit(eta.clamp(-model::ETA_CLAMP, model::ETA_CLAMP));
                m * theta * (1.0 - theta)
            })
            .collect();

        let mut beta_info = vec![1.0 / self.priors.beta_var; p];
        let mut alpha_info = 1.0 / self.priors.alpha_var;
        let mut phi_info: Vec<f64> = (0..self.graph.len())
            .map(|k| self.graph.degree(k) as f64 / self.state.tau2_phi)
            .collect();
        let mut delta_info: Vec<f64> = (0..self.graph.len())
            .map(|k| self.graph.degree(k) as f64 / self.state.tau2_delta)
            .collect();
        for (c, &w) in weight.iter().enumerate() {
            let (k, t) = (c / t_len, c % t_len);
            let s = self.time[t];
            for (j, x) in design[c * p..(c + 1) * p].iter().enumerate() {
                beta_info[j] += w * x * x;
            }
            alpha_info += w * s * s;
            phi_info[k] += w;
            delta_info[k] += w * s * s;
        }
        let block = RW_STEP / (p as f64).sqrt();
        ProposalScales {
            beta: beta_info.iter().map(|i| block / i.sqrt()).collect(),
            shift: beta_info
                .iter()
                .zip(&self.county_means)
                .map(|(i, m)| if m.is_some() { RW_STEP / i.sqrt() } else { 0.0 })
                .collect(),
            alpha: RW_STEP / alpha_info.sqrt(),
            phi: phi_info.iter().map(|i| RW_STEP / i.sqrt()).collect(),
            delta: delta_info.iter().map(|i| RW_STEP / i.sqrt()).collect(),
            rho_int: 1.0,
            rho_slo: 1.0,
        }
    }

    /// Proposes from the block's random walk and accepts or rejects it.
    pub fn update_block_mh<R: Rng + ?Sized>(
        &mut self,
        target: MhTarget,
        rng: &mut R,
    ) -> Result<MhOutcome, SamplerError> {
        match target {
            MhTarget::Beta => self.update_beta(rng),
            MhTarget::Alpha => self.update_alpha(rng),
            MhTarget::Phi(k) => self.update_site(k, false, rng),
            MhTarget::Delta(k) => self.update_site(k, true, rng),
        }
    }

    fn update_beta<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<MhOutcome, SamplerError> {
        let p = self.data.n_covariates();
        let proposal: Vec<f64> = self
            .state
            .beta
            .iter()
            .zip(&self.scales.beta)
            .map(|(b, s)| {
                let z: f64 = StandardNormal.sample(rng);
                b + s * z
            })
            .collect();
        let design = self.data.design();
        let mut delta_ll = 0.0;
        for c in 0..self.xb.len() {
            let xb: f64 = design[c * p..(c + 1) * p]
                .iter()
                .zip(&proposal)
                .map(|(x, b)| x * b)
                .sum();
            let eta = self.eta[c] - self.xb[c] + xb;
            let kernel = cell_kernel(self.deaths[c], self.exposure[c], eta);
            delta_ll += kernel - self.kernel[c];
            self.scratch_xb[c] = xb;
            self.scratch_eta[c] = eta;
            self.scratch_kernel[c] = kernel;
        }
        let var = self.priors.beta_var;
        let delta_prior: f64 = proposal
            .iter()
            .zip(&self.state.beta)
            .map(|(new, old)| (old * old - new * new) / (2.0 * var))
            .sum();
        let log_ratio = delta_ll + delta_prior;
        if log_ratio.is_nan() {
            return Err(SamplerError::NonFiniteDelta("beta"));
        }
        let accepted = metropolis_accept(log_ratio, rng);
        if accepted {
            self.state.beta.copy_from_slice(&proposal);
            std::mem::swap(&mut self.xb, &mut self.scratch_xb);
            std::mem::swap(&mut self.eta, &mut self.scratch_eta);
            std::mem::swap(&mut self.kernel, &mut self.scratch_kernel);
        }
        Ok(MhOutcome {
            proposal,
            log_ratio,
            accepted,
        })
    }

    fn update_alpha<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<MhOutcome, SamplerError> {
        let z: f64 = StandardNormal.sample(rng);
        let proposal = self.state.alpha + self.scales.alpha * z;
        let step = proposal - self.state.alpha;
        let t_len = self.n_years();
        let mut delta_ll = 0.0;
        for c in 0..self.eta.len() {
            let eta = self.eta[c] + step * self.time[c % t_len];
            let kernel = cell_kernel(self.deaths[c], self.exposure[c], eta);
            delta_ll += kernel - self.kernel[c];
            self.scratch_eta[c] = eta;
            self.scratch_kernel[c] = kernel;
        }
        let var = self.priors.alpha_var;
        let old = self.state.alpha;
        let log_ratio = delta_ll + (old * old - proposal * proposal) / (2.0 * var);
        if log_ratio.is_nan() {
            return Err(SamplerError::NonFiniteDelta("alpha"));
        }
        let accepted = metropolis_accept(log_ratio, rng);
        if accepted {
            self.state.alpha = proposal;
            std::mem::swap(&mut self.eta, &mut self.scratch_eta);
            std::mem::swap(&mut self.kernel, &mut self.scratch_kernel);
        }
        Ok(MhOutcome {
            proposal: vec![proposal],
            log_ratio,
            accepted,
        })
    }

    /// Single-site update of `phi_k` (or `delta_k` when `slope`): touches only
    /// county `k`'s cells and its neighbors' current values.
    fn update_site<R: Rng + ?Sized>(
        &mut self,
        k: usize,
        slope: bool,
        rng: &mut R,
    ) -> Result<MhOutcome, SamplerError> {
        let (values, scale, rho, tau2) = if slope {
            (
                &self.state.delta,
                self.scales.delta[k],
                self.state.rho_slo,
                self.state.tau2_delta,
            )
        } else {
            (
                &self.state.phi,
                self.scales.phi[k],
                self.state.rho_int,
                self.state.tau2_phi,
            )
        };
        let current = values[k];
        let z: f64 = StandardNormal.sample(rng);
        let proposal = current + scale * z;
        let step = proposal - current;

        let degree = self.graph.degree(k) as f64;
        let neighbor_sum = self.graph.neighbor_sum(k, values);
        let delta_q = degree * (proposal * proposal - current * current)
            - 2.0 * rho * step * neighbor_sum;
        let mut log_ratio = -delta_q / (2.0 * tau2);

        let t_len = self.n_years();
        let base = k * t_len;
        for t in 0..t_len {
            let c = base + t;
            let eta = self.eta[c] + if slope { step * self.time[t] } else { step };
            let kernel = cell_kernel(self.deaths[c], self.exposure[c], eta);
            log_ratio += kernel - self.kernel[c];
            self.scratch_eta[c] = eta;
            self.scratch_kernel[c] = kernel;
        }
        if log_ratio.is_nan() {
            return Err(SamplerError::NonFiniteDelta(if slope { "delta" } else { "phi" }));
        }
        let accepted = metropolis_accept(log_ratio, rng);
        if accepted {
            if slope {
                self.state.delta[k] = proposal;
            } else {
                self.state.phi[k] = proposal;
            }
            self.eta[base..base + t_len].copy_from_slice(&self.scratch_eta[base..base + t_len]);
            self.kernel[base..base + t_len]
                .copy_from_slice(&self.scratch_kernel[base..base + t_len]);
        }
        Ok(MhOutcome {
            proposal: vec![proposal],
            log_ratio,
            accepted,
        })
    }

    /// Shift move for covariate `j`: `beta_j + c` and `phi_k - c * xbar_kj`,
    /// so each cell's predictor moves only by `c` times the covariate's
    /// deviation from its county mean. `None` for columns without one.
    pub fn shift_move<R: Rng + ?Sized>(
        &mut self,
        j: usize,
        rng: &mut R,
    ) -> Result<Option<MhOutcome>, SamplerError> {
        let Some(means) = self.county_means.get(j).and_then(Option::as_ref) else {
            return Ok(None);
        };
        let z: f64 = StandardNormal.sample(rng);
        let c = self.scales.shift[j] * z;
        let p = self.data.n_covariates();
        let design = self.data.design();
        let t_len = self.n_years();
        let mut delta_ll = 0.0;
        for cell in 0..self.eta.len() {
            let x = design[cell * p + j];
            let eta = self.eta[cell] + c * (x - means[cell / t_len]);
            let kernel = cell_kernel(self.deaths[cell], self.exposure[cell], eta);
            delta_ll += kernel - self.kernel[cell];
            self.scratch_xb[cell] = self.xb[cell] + c * x;
            self.scratch_eta[cell] = eta;
            self.scratch_kernel[cell] = kernel;
        }
        // Q(phi - c m) - Q(phi) = c^2 m'Qm - 2c m'Q phi, with Q = D - rho W.
        let rho = self.state.rho_int;
        let phi = &self.state.phi;
        let mut m_q_phi: f64 = (0..phi.len())
            .map(|k| self.graph.degree(k) as f64 * means[k] * phi[k])
            .sum();
        m_q_phi -= rho
            * self
                .graph
                .edges()
                .iter()
                .map(|&(a, b)| means[a] * phi[b] + means[b] * phi[a])
                .sum::<f64>();
        let m_q_m = model::car_quadform(self.graph, means, rho)?;
        let delta_q = c * c * m_q_m - 2.0 * c * m_q_phi;
        let old = self.state.beta[j];
        let new = old + c;
        let log_ratio = delta_ll - delta_q / (2.0 * self.state.tau2_phi)
            + (old * old - new * new) / (2.0 * self.priors.beta_var);
        if log_ratio.is_nan() {
            return Err(SamplerError::NonFiniteDelta("shift"));
        }
        let accepted = metropolis_accept(log_ratio, rng);
        if accepted {
            self.state.beta[j] = new;
            self.state
                .phi
                .iter_mut()
                .zip(means)
                .for_each(|(v, m)| *v -= c * m);
            std::mem::swap(&mut self.xb, &mut self.scratch_xb);
            std::mem::swap(&mut self.eta, &mut self.scratch_eta);
            std::mem::swap(&mut self.kernel, &mut self.scratch_kernel);
        }
        Ok(Some(MhOutcome {
            proposal: vec![new],
            log_ratio,
            accepted,
        }))
    }

    fn update_variances<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<(), SamplerError> {
        self.state.tau2_phi =
            update_tau2(self.graph, &self.state.phi, self.state.rho_int, &self.priors, rng)?;
        self.state.tau2_delta =
            update_tau2(self.graph, &self.state.delta, self.state.rho_slo, &self.priors, rng)?;
        Ok(())
    }

    /// Exact draw of `c` along `(beta_0 + c, phi - c)` (or `(alpha + c,
    /// delta - c)` when `slope`). The density along the line is Gaussian with
    /// precision `(1 - rho) sum(d) / tau2 + 1 / prior_var`.
    pub fn line_move<R: Rng + ?Sized>(&mut self, slope: bool, rng: &mut R) -> f64 {
        let (values, rho, tau2, fixed, prior_var) = if slope {
            (
                &self.state.delta,
                self.state.rho_slo,
                self.state.tau2_delta,
                self.state.alpha,
                self.priors.alpha_var,
            )
        } else {
            (
                &self.state.phi,
                self.state.rho_int,
                self.state.tau2_phi,
                self.state.beta[0],
                self.priors.beta_var,
            )
        };
        let degree_sum: f64 = (0..self.graph.len()).map(|k| self.graph.degree(k) as f64).sum();
        let weighted: f64 = values
            .iter()
            .enumerate()
            .map(|(k, v)| self.graph.degree(k) as f64 * v)
            .sum();
        let precision = (1.0 - rho) * degree_sum / tau2 + 1.0 / prior_var;
        let linear = (1.0 - rho) * weighted / tau2 - fixed / prior_var;
        let z: f64 = StandardNormal.sample(rng);
        let c = linear / precision + z / precision.sqrt();
        if slope {
            self.state.alpha += c;
            self.state.delta.iter_mut().for_each(|v| *v -= c);
        } else {
            self.state.beta[0] += c;
            self.state.phi.iter_mut().for_each(|v| *v -= c);
            self.xb.iter_mut().for_each(|v| *v += c);
        }
        c
    }

    /// True when design column 0 is all ones, which [`Self::line_move`] on
    /// the intercept requires.
    pub fn has_intercept(&self) -> bool {
        let p = self.data.n_covariates();
        p > 0 && self.data.design().chunks_exact(p).all(|row| row[0] == 1.0)
    }

    fn recenter(&mut self) {
        let k = self.graph.len() as f64;
        let mean_phi = self.state.phi.iter().sum::<f64>() / k;
        let mean_delta = self.state.delta.iter().sum::<f64>() / k;
        self.state.phi.iter_mut().for_each(|v| *v -= mean_phi);
        self.state.delta.iter_mut().for_each(|v| *v -= mean_delta);
        self.state.beta[0] += mean_phi;
        self.state.alpha += mean_delta;
        // eta and the kernels are unchanged; only the cached x'beta moves.
        self.xb.iter_mut().for_each(|v| *v += mean_phi);
    }

    fn check_finite(&self, iteration: usize, block: &'static str) -> Result<(), SamplerError> {
        if self.state.is_finite() {
            Ok(())
        } else {
            Err(SamplerError::NonFiniteState {
                iteration,
                block,
                dump: format!("{:?}", self.state),
            })
        }
    }
}

/// County means of every design column whose means differ between counties;
/// columns constant across counties (the intercept, year indicators) get
/// `None`.
fn county_means(data: &StratumDataset) -> Vec<Option<Vec<f64>>> {
    let p = data.n_covariates();
    let t_len = data.n_years() as f64;
    (0..p)
        .map(|j| {
            let means: Vec<f64> = (0..data.n_counties())
                .map(|k| (0..data.n_years()).map(|t| data.row(k, t)[j]).sum::<f64>() / t_len)
                .collect();
            let (lo, hi) = means
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &m| (lo.min(m), hi.max(m)));
            let scale = lo.abs().max(hi.abs()).max(1.0);
            (hi - lo > 1e-9 * scale).then_some(means)
        })
        .collect()
}

/// Initial state: intercept at the logit of the pooled crude rate, everything
/// else at [`ChainState::initial`].
pub fn initial_state(data: &StratumDataset) -> ChainState {
    let mut state = ChainState::initial(data.n_covariates(), data.n_counties());
    let exposure: u64 = data.exposure().iter().sum();
    if let Some(rate) = data.pooled_rate() {
        // Half a death keeps the logit finite for all-zero or all-death panels.
        let half = 0.5 / exposure as f64;
        state.beta[0] = logit(rate.clamp(half, 1.0 - half)).unwrap_or(0.0);
    }
    state
}

/// Per-county posterior draws, or running moments when full storage is off.
#[derive(Debug, Clone, PartialEq)]
pub enum EffectDraws {
    /// `draws[k][s]` is draw `s` of county `k`.
    Full(Vec<Vec<f64>>),
    Moments { mean: Vec<f64>, variance: Vec<f64> },
}

impl EffectDraws {
    pub fn full(&self) -> Option<&[Vec<f64>]> {
        match self {
            EffectDraws::Full(d) => Some(d),
            EffectDraws::Moments { .. } => None,
        }
    }
}

/// Acceptance, scales and configuration of the run that produced the draws.
#[derive(Debug, Clone, PartialEq)]
pub struct RunInfo {
    pub acceptance: AcceptanceStats,
    pub scales: ProposalScales,
    pub config: SamplerConfig,
    pub priors: PriorConfig,
}

/// Saved post-burn-in draws. Scalar series all have the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub covariate_names: Vec<String>,
    pub county_ids: Vec<String>,
    /// `beta[j][s]` is draw `s` of coefficient `j`.
    pub beta: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub tau2_phi: Vec<f64>,
    pub tau2_delta: Vec<f64>,
    pub rho_int: Vec<f64>,
    pub rho_slo: Vec<f64>,
    pub phi: EffectDraws,
    pub delta: EffectDraws,
    pub run: Option<RunInfo>,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// Named scalar series: `beta.<covariate>`, `alpha`, `tau2_phi`,
    /// `tau2_delta`, `rho_int`, `rho_slo`.
    pub fn scalar_columns(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = self
            .covariate_names
            .iter()
            .zip(&self.beta)
            .map(|(n, d)| (format!("beta.{n}"), d.as_slice()))
            .collect();
        out.push(("alpha".into(), &self.alpha));
        out.push(("tau2_phi".into(), &self.tau2_phi));
        out.push(("tau2_delta".into(), &self.tau2_delta));
        out.push(("rho_int".into(), &self.rho_int));
        out.push(("rho_slo".into(), &self.rho_slo));
        out
    }

    /// Scalars followed by `phi.<county>` and `delta.<county>` when stored.
    pub fn columns(&self) -> Vec<(String, &[f64])> {
        let mut out = self.scalar_columns();
        for (prefix, effects) in [("phi", &self.phi), ("delta", &self.delta)] {
            if let Some(draws) = effects.full() {
                for (id, d) in self.county_ids.iter().zip(draws) {
                    out.push((format!("{prefix}.{id}"), d.as_slice()));
                }
            }
        }
        out
    }
}

struct Recorder {
    beta: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    tau2_phi: Vec<f64>,
    tau2_delta: Vec<f64>,
    rho_int: Vec<f64>,
    rho_slo: Vec<f64>,
    phi: EffectRecorder,
    delta: EffectRecorder,
}

enum EffectRecorder {
    Full(Vec<Vec<f64>>),
    Welford { n: f64, mean: Vec<f64>, m2: Vec<f64> },
}

impl EffectRecorder {
    fn new(k: usize, samples: usize, full: bool) -> Self {
        if full {
            EffectRecorder::Full(vec![Vec::with_capacity(samples); k])
        } else {
            EffectRecorder::Welford {
                n: 0.0,
                mean: vec![0.0; k],
                m2: vec![0.0; k],
            }
        }
    }

    fn push(&mut self, values: &[f64]) {
        match self {
            EffectRecorder::Full(d) => d.iter_mut().zip(values).for_each(|(d, v)| d.push(*v)),
            EffectRecorder::Welford { n, mean, m2 } => {
                *n += 1.0;
                for ((m, s), &v) in mean.iter_mut().zip(m2.iter_mut()).zip(values) {
                    let d = v - *m;
                    *m += d / *n;
                    *s += d * (v - *m);
                }
            }
        }
    }

    fn finish(self) -> EffectDraws {
        match self {
            EffectRecorder::Full(d) => EffectDraws::Full(d),
            EffectRecorder::Welford { n, mean, m2 } => EffectDraws::Moments {
                variance: m2.iter().map(|s| if n > 1.0 { s / (n - 1.0) } else { 0.0 }).collect(),
                mean,
            },
        }
    }
}

impl Recorder {
    fn new(p: usize, k: usize, samples: usize, full: bool) -> Self {
        Self {
            beta: vec![Vec::with_capacity(samples); p],
            alpha: Vec::with_capacity(samples),
            tau2_phi: Vec::with_capacity(samples),
            tau2_delta: Vec::with_capacity(samples),
            rho_int: Vec::with_capacity(samples),
            rho_slo: Vec::with_capacity(samples),
            phi: EffectRecorder::new(k, samples, full),
            delta: EffectRecorder::new(k, samples, full),
        }
    }

    fn push(&mut self, s: &ChainState) {
        self.beta.iter_mut().zip(&s.beta).for_each(|(d, v)| d.push(*v));
        self.alpha.push(s.alpha);
        self.tau2_phi.push(s.tau2_phi);
        self.tau2_delta.push(s.tau2_delta);
        self.rho_int.push(s.rho_int);
        self.rho_slo.push(s.rho_slo);
        self.phi.push(&s.phi);
        self.delta.push(&s.delta);
    }
}

/// Runs one chain from [`initial_state`].
pub fn run_chain(
    data: &StratumDataset,
    graph: &CountyGraph,
    priors: &PriorConfig,
    config: &SamplerConfig,
) -> Result<PosteriorDraws, SamplerError> {
    run_chain_from(data, graph, priors, config, initial_state(data))
}

/// Runs one chain from an explicit starting state. Bit-reproducible for a
/// fixed `(seed, stream)`.
pub fn run_chain_from(
    data: &StratumDataset,
    graph: &CountyGraph,
    priors: &PriorConfig,
    config: &SamplerConfig,
    init: ChainState,
) -> Result<PosteriorDraws, SamplerError> {
    config.validate()?;
    let mut rng = config.rng();
    let mut sampler = ChainSampler::new(data, graph, *priors, init)?;
    let k_len = graph.len();
    let mut windows = Windows {
        beta: Window::default(),
        alpha: Window::default(),
        phi: vec![Window::default(); k_len],
        delta: vec![Window::default(); k_len],
        rho_int: Window::default(),
        rho_slo: Window::default(),
        shift: vec![Window::default(); data.n_covariates()],
    };
    let mut stats = AcceptanceStats::default();
    let has_intercept = sampler.has_intercept();
    let mut recorder = Recorder::new(data.n_covariates(), k_len, config.samples, config.store_effects);

    for iteration in 0..config.total_iterations() {
        let burning = iteration < config.burn_in;
        let note = |window: &mut Window, counter: &mut AcceptanceCounter, accepted: bool| {
            if burning {
                window.record(accepted);
            } else {
                counter.record(accepted);
            }
        };

        let out = sampler.update_beta(&mut rng)?;
        note(&mut windows.beta, &mut stats.beta, out.accepted);
        let out = sampler.update_alpha(&mut rng)?;
        note(&mut windows.alpha, &mut stats.alpha, out.accepted);
        for k in 0..k_len {
            let out = sampler.update_site(k, false, &mut rng)?;
            note(&mut windows.phi[k], &mut stats.phi, out.accepted);
        }
        for k in 0..k_len {
            let out = sampler.update_site(k, true, &mut rng)?;
            note(&mut windows.delta[k], &mut stats.delta, out.accepted);
        }
        if config.shift_moves {
            for j in 0..data.n_covariates() {
                if let Some(out) = sampler.shift_move(j, &mut rng)? {
                    note(&mut windows.shift[j], &mut stats.shift, out.accepted);
                }
            }
        }
        if config.line_moves {
            if has_intercept {
                sampler.line_move(false, &mut rng);
            }
            sampler.line_move(true, &mut rng);
        }
        sampler.check_finite(iteration, "random effects")?;

        sampler.update_variances(&mut rng)?;

        let (diag, cross) = quadform_parts(graph, &sampler.state.phi)?;
        let (rho, accepted) = rho_step(
            graph,
            diag,
            cross,
            sampler.state.rho_int,
            sampler.state.tau2_phi,
            sampler.scales.rho_int,
            &mut rng,
        )?;
        sampler.state.rho_int = rho;
        note(&mut windows.rho_int, &mut stats.rho_int, accepted);

        let (diag, cross) = quadform_parts(graph, &sampler.state.delta)?;
        let (rho, accepted) = rho_step(
            graph,
            diag,
            cross,
            sampler.state.rho_slo,
            sampler.state.tau2_delta,
            sampler.scales.rho_slo,
            &mut rng,
        )?;
        sampler.state.rho_slo = rho;
        note(&mut windows.rho_slo, &mut stats.rho_slo, accepted);

        if config.recenter_random_effects {
            sampler.recenter();
        }
        sampler.check_finite(iteration, "hyperparameters")?;

        if burning && (iteration + 1) % config.adapt_interval == 0 {
            adapt_all(&mut sampler.scales, &mut windows, config);
        }
        if !burning && (iteration - config.burn_in) % config.thin == 0 {
            recorder.push(&sampler.state);
        }
    }

    Ok(PosteriorDraws {
        covariate_names: data.covariate_names().to_vec(),
        county_ids: data.county_ids().to_vec(),
        beta: recorder.beta,
        alpha: recorder.alpha,
        tau2_phi: recorder.tau2_phi,
        tau2_delta: recorder.tau2_delta,
        rho_int: recorder.rho_int,
        rho_slo: recorder.rho_slo,
        phi: recorder.phi.finish(),
        delta: recorder.delta.finish(),
        run: Some(RunInfo {
            acceptance: stats,
            scales: sampler.scales.clone(),
            config: config.clone(),
            priors: *priors,
        }),
    })
}

fn adapt_all(scales: &mut ProposalScales, windows: &mut Windows, config: &SamplerConfig) {
    let (lo, hi) = (config.target_accept_low, config.target_accept_high);
    let adapt = |scale: &mut f64, window: &mut Window| {
        if let Some(rate) = window.take_rate() {
            *scale = adapt_scale(*scale, rate, lo, hi);
        }
    };
    if let Some(rate) = windows.beta.take_rate() {
        let factor = adapt_scale(1.0, rate, lo, hi);
        scales.beta.iter_mut().for_each(|s| *s *= factor);
    }
    adapt(&mut scales.alpha, &mut windows.alpha);
    for (s, w) in scales.phi.iter_mut().zip(&mut windows.phi) {
        adapt(s, w);
    }
    for (s, w) in scales.delta.iter_mut().zip(&mut windows.delta) {
        adapt(s, w);
    }
    adapt(&mut scales.rho_int, &mut windows.rho_int);
    adapt(&mut scales.rho_slo, &mut windows.rho_slo);
    for (s, w) in scales.shift.iter_mut().zip(&mut windows.shift) {
        adapt(s, w);
    }
}
