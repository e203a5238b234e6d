//! Effective sample size, Geweke z-scores and the convergence report.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::sampler::{AcceptanceStats, EffectDraws, PosteriorDraws};

/// Minimum chain length for [`ess`] and minimum segment length for [`geweke`].
pub const MIN_LENGTH: usize = 10;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("chain has zero variance")]
    DegenerateChain,
    #[error("chain too short: {found} values, need at least {needed}")]
    TooShort { found: usize, needed: usize },
    #[error("chain contains non-finite values")]
    NonFinite,
    #[error("invalid window fractions {first} and {last}")]
    InvalidWindows { first: f64, last: f64 },
    #[error("invalid threshold: {0}")]
    InvalidThreshold(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn check_chain(chain: &[f64], needed: usize) -> Result<(), DiagnosticsError> {
    if chain.len() < needed {
        return Err(DiagnosticsError::TooShort {
            found: chain.len(),
            needed,
        });
    }
    if chain.iter().any(|x| !x.is_finite()) {
        return Err(DiagnosticsError::NonFinite);
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample autocorrelations at lags `0..n`, via a zero-padded FFT.
pub fn autocorrelation(chain: &[f64]) -> Result<Vec<f64>, DiagnosticsError> {
    check_chain(chain, 2)?;
    let n = chain.len();
    let m = mean(chain);
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = chain
        .iter()
        .map(|x| Complex::new(x - m, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    buf.iter_mut().for_each(|c| *c = Complex::new(c.norm_sqr(), 0.0));
    planner.plan_fft_inverse(size).process(&mut buf);
    let c0 = buf[0].re;
    // Rounding in the mean leaves a tiny residual variance on constant chains.
    let scale = chain.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
    if !(c0 / n as f64 > (1e-12 * scale).powi(2)) {
        return Err(DiagnosticsError::DegenerateChain);
    }
    Ok(buf[..n].iter().map(|c| c.re / c0).collect())
}

/// Effective sample size `N / (1 + 2 sum rho_lag)`, truncating the sum at the
/// first lag pair `(2m, 2m + 1)` whose summed autocorrelation is not positive.
/// The result lies in `(0, N]`.
pub fn ess(chain: &[f64]) -> Result<f64, DiagnosticsError> {
    check_chain(chain, MIN_LENGTH)?;
    let n = chain.len();
    let rho = autocorrelation(chain)?;
    let mut tau = -1.0;
    let mut m = 0;
    while 2 * m + 1 < n {
        let pair = rho[2 * m] + rho[2 * m + 1];
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        m += 1;
    }
    let n = n as f64;
    Ok((n / tau.max(f64::MIN_POSITIVE)).min(n))
}

/// Variance of the mean of `x` by non-overlapping batch means with
/// `floor(sqrt(n))` batches.
pub fn batch_means_variance(x: &[f64]) -> Result<f64, DiagnosticsError> {
    let n = x.len();
    let batches = ((n as f64).sqrt().floor() as usize).max(2);
    let size = n / batches;
    if size == 0 {
        return Err(DiagnosticsError::TooShort {
            found: n,
            needed: 4,
        });
    }
    let means: Vec<f64> = x
        .chunks_exact(size)
        .take(batches)
        .map(mean)
        .collect();
    let grand = mean(&means);
    let var = means.iter().map(|b| (b - grand).powi(2)).sum::<f64>() / (batches - 1) as f64;
    // var / batches estimates the variance of a mean over batches * size draws.
    Ok(var / batches as f64)
}

/// Geweke z-score with the default 10% / 50% windows.
pub fn geweke(chain: &[f64]) -> Result<f64, DiagnosticsError> {
    geweke_windows(chain, 0.10, 0.50)
}

/// Geweke z-score comparing the mean of the first `first_frac` of the chain
/// with the mean of the last `last_frac`.
pub fn geweke_windows(chain: &[f64], first_frac: f64, last_frac: f64) -> Result<f64, DiagnosticsError> {
    if !(first_frac > 0.0 && last_frac > 0.0 && first_frac + last_frac <= 1.0) {
        return Err(DiagnosticsError::InvalidWindows {
            first: first_frac,
            last: last_frac,
        });
    }
    check_chain(chain, 1)?;
    let n = chain.len();
    let n_first = (first_frac * n as f64).floor() as usize;
    let n_last = (last_frac * n as f64).floor() as usize;
    let short = n_first.min(n_last);
    if short < MIN_LENGTH {
        return Err(DiagnosticsError::TooShort {
            found: n,
            needed: (MIN_LENGTH as f64 / first_frac.min(last_frac)).ceil() as usize,
        });
    }
    let first = &chain[..n_first];
    let last = &chain[n - n_last..];
    let var = batch_means_variance(first)? + batch_means_variance(last)?;
    if !(var > 0.0) {
        return Err(DiagnosticsError::DegenerateChain);
    }
    Ok((mean(first) - mean(last)) / var.sqrt())
}

/// Two-sided standard normal critical value for `alpha_level`.
pub fn critical_z(alpha_level: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - alpha_level / 2.0)
}

/// Which county effects enter the convergence report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectSelection {
    #[default]
    None,
    All,
    Counties(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceOptions {
    pub ess_threshold: f64,
    pub alpha_level: f64,
    pub effects: EffectSelection,
}

impl Default for ConvergenceOptions {
    fn default() -> Self {
        Self {
            ess_threshold: 200.0,
            alpha_level: 0.05,
            effects: EffectSelection::None,
        }
    }
}

impl ConvergenceOptions {
    pub fn validate(&self) -> Result<(), DiagnosticsError> {
        if !(self.ess_threshold >= 0.0 && self.ess_threshold.is_finite()) {
            return Err(DiagnosticsError::InvalidThreshold("ess_threshold".into()));
        }
        if !(self.alpha_level > 0.0 && self.alpha_level < 1.0) {
            return Err(DiagnosticsError::InvalidThreshold("alpha_level".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterDiagnostic {
    pub name: String,
    /// `None` when the chain is degenerate or too short.
    pub ess: Option<f64>,
    pub geweke_z: Option<f64>,
    pub ess_pass: bool,
    pub geweke_pass: bool,
}

impl ParameterDiagnostic {
    pub fn pass(&self) -> bool {
        self.ess_pass && self.geweke_pass
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub parameters: Vec<ParameterDiagnostic>,
    pub ess_threshold: f64,
    pub alpha_level: f64,
    pub z_critical: f64,
    pub draws: usize,
    pub acceptance: Option<AcceptanceStats>,
}

impl ConvergenceReport {
    pub fn pass(&self) -> bool {
        self.parameters.iter().all(ParameterDiagnostic::pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParameterDiagnostic> {
        self.parameters.iter().filter(|p| !p.pass())
    }

    pub fn get(&self, name: &str) -> Option<&ParameterDiagnostic> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), DiagnosticsError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "parameter,ess,geweke_z,ess_pass,geweke_pass,pass")?;
        for p in &self.parameters {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                p.name,
                opt(p.ess),
                opt(p.geweke_z),
                p.ess_pass,
                p.geweke_pass,
                p.pass()
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl fmt::Display for ConvergenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let failed: Vec<&str> = self.failures().map(|p| p.name.as_str()).collect();
        writeln!(
            f,
            "convergence: {} ({} parameters, {} draws)",
            if self.pass() { "PASS" } else { "FAIL" },
            self.parameters.len(),
            self.draws
        )?;
        writeln!(
            f,
            "  thresholds: ess >= {}, |geweke z| < {:.4} (alpha {})",
            self.ess_threshold, self.z_critical, self.alpha_level
        )?;
        let min_ess = self
            .parameters
            .iter()
            .filter_map(|p| p.ess.map(|e| (e, p.name.as_str())))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((e, name)) = min_ess {
            writeln!(f, "  min ess: {e:.1} ({name})")?;
        }
        if let Some(acc) = &self.acceptance {
            let rates: Vec<String> = acc
                .blocks()
                .iter()
                .map(|(n, c)| format!("{n}={:.3}", c.rate()))
                .collect();
            writeln!(f, "  acceptance: {}", rates.join(" "))?;
        }
        if !failed.is_empty() {
            writeln!(f, "  failed: {}", failed.join(", "))?;
        }
        Ok(())
    }
}

/// Diagnoses one named series against the thresholds.
pub fn diagnose_series(name: &str, chain: &[f64], ess_threshold: f64, z_critical: f64) -> ParameterDiagnostic {
    let e = ess(chain).ok();
    let z = geweke(chain).ok();
    ParameterDiagnostic {
        name: name.to_string(),
        ess: e,
        geweke_z: z,
        ess_pass: e.is_some_and(|e| e >= ess_threshold),
        geweke_pass: z.is_some_and(|z| z.abs() < z_critical),
    }
}

/// ESS and Geweke checks for every scalar parameter plus the selected county
/// effects (only when they were stored in full).
pub fn convergence_report(
    draws: &PosteriorDraws,
    options: &ConvergenceOptions,
) -> Result<ConvergenceReport, DiagnosticsError> {
    options.validate()?;
    let z_critical = critical_z(options.alpha_level);
    let mut series: Vec<(String, &[f64])> = draws.scalar_columns();
    let wanted = |id: &str| match &options.effects {
        EffectSelection::None => false,
        EffectSelection::All => true,
        EffectSelection::Counties(ids) => ids.iter().any(|c| c == id),
    };
    for (prefix, effects) in [("phi", &draws.phi), ("delta", &draws.delta)] {
        if let EffectDraws::Full(d) = effects {
            for (id, chain) in draws.county_ids.iter().zip(d) {
                if wanted(id) {
                    series.push((format!("{prefix}.{id}"), chain.as_slice()));
                }
            }
        }
    }
    let parameters = series
        .iter()
        .map(|(name, chain)| diagnose_series(name, chain, options.ess_threshold, z_critical))
        .collect();
    Ok(ConvergenceReport {
        parameters,
        ess_threshold: options.ess_threshold,
        alpha_level: options.alpha_level,
        z_critical,
        draws: draws.len(),
        acceptance: draws.run.as_ref().map(|r| r.acceptance),
    })
}
