//! Posterior tables: parameter summaries, county effects and
//! variable-importance mean ranks.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::data::{Sex, Standardization, INTERCEPT};
use crate::diagnostics::{ess, geweke};
use crate::graph::CountyGraph;
use crate::sampler::{EffectDraws, PosteriorDraws};

/// Minimum number of draws accepted by [`summarize`].
pub const MIN_DRAWS: usize = 100;

#[derive(Debug, Error)]
pub enum SummaryError {
    #[error("need at least {needed} draws, found {found}")]
    TooFewDraws { found: usize, needed: usize },
    #[error("county effects were not stored in full")]
    EffectsNotStored,
    #[error("draws do not match the graph's counties")]
    CountyMismatch,
    #[error("summary for {model} has no coefficient for {covariate}")]
    MissingCovariate { model: String, covariate: String },
    #[error("standardization has {found} entries for {expected} covariates")]
    StandardizationMismatch { expected: usize, found: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Quantile with linear interpolation between order statistics:
/// position `h = (n - 1) q` on the sorted sample, 0-based.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of an empty sample");
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Mean computed about the first value, exact for constant input.
fn shifted_mean(values: &[f64]) -> f64 {
    let x0 = values[0];
    x0 + values.iter().map(|x| x - x0).sum::<f64>() / values.len() as f64
}

/// Mean and equal-tailed 95% interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn of(values: &[f64]) -> Self {
        let s = sorted(values);
        Self {
            mean: shifted_mean(values),
            lower: quantile_sorted(&s, 0.025),
            upper: quantile_sorted(&s, 0.975),
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub parameter: String,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub ess: Option<f64>,
    pub geweke_z: Option<f64>,
}

impl SummaryRow {
    pub fn interval(&self) -> Interval {
        Interval {
            mean: self.mean,
            lower: self.lower,
            upper: self.upper,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    pub fn get(&self, parameter: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.parameter == parameter)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), SummaryError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "parameter,mean,lower_2.5,upper_97.5,ess,geweke_z")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.parameter,
                r.mean,
                r.lower,
                r.upper,
                opt(r.ess),
                opt(r.geweke_z)
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn summary_row(name: String, values: &[f64]) -> SummaryRow {
    let i = Interval::of(values);
    SummaryRow {
        parameter: name,
        mean: i.mean,
        lower: i.lower,
        upper: i.upper,
        ess: ess(values).ok(),
        geweke_z: geweke(values).ok(),
    }
}

/// Summary of every stored series (scalars, then county effects when stored in
/// full). ESS and Geweke are left empty for degenerate series.
pub fn summarize(draws: &PosteriorDraws) -> Result<SummaryTable, SummaryError> {
    if draws.len() < MIN_DRAWS {
        return Err(SummaryError::TooFewDraws {
            found: draws.len(),
            needed: MIN_DRAWS,
        });
    }
    let rows = draws
        .columns()
        .into_iter()
        .map(|(name, values)| summary_row(name, values))
        .collect();
    Ok(SummaryTable { rows })
}

/// Coefficient draws mapped back to the raw covariate scale, one summary row
/// per coefficient named `beta_raw.<covariate>`.
///
/// A standardized column `z = (x - mean) / sd` contributes `beta / sd` per raw
/// unit, and the intercept absorbs `-beta * mean / sd`.
pub fn raw_scale_summary(
    draws: &PosteriorDraws,
    standardization: &[Option<Standardization>],
) -> Result<SummaryTable, SummaryError> {
    if standardization.len() != draws.beta.len() {
        return Err(SummaryError::StandardizationMismatch {
            expected: draws.beta.len(),
            found: standardization.len(),
        });
    }
    if draws.len() < MIN_DRAWS {
        return Err(SummaryError::TooFewDraws {
            found: draws.len(),
            needed: MIN_DRAWS,
        });
    }
    let intercept = draws.covariate_names.iter().position(|n| n == INTERCEPT);
    let mut raw = draws.beta.clone();
    for (j, s) in standardization.iter().enumerate() {
        let Some(s) = s else { continue };
        for i in 0..draws.len() {
            let b = draws.beta[j][i];
            raw[j][i] = b / s.sd;
            if let Some(c) = intercept {
                raw[c][i] -= b * s.mean / s.sd;
            }
        }
    }
    let rows = draws
        .covariate_names
        .iter()
        .zip(&raw)
        .map(|(n, v)| summary_row(format!("beta_raw.{n}"), v))
        .collect();
    Ok(SummaryTable { rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountyEffectRow {
    pub county: String,
    pub phi: Interval,
    /// Posterior of `alpha + delta_k`, per unit of the scaled time covariate.
    pub trend: Interval,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CountyEffectTable {
    pub rows: Vec<CountyEffectRow>,
}

impl CountyEffectTable {
    pub fn write_csv(&self, path: &Path) -> Result<(), SummaryError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "county,phi_mean,phi_lo,phi_hi,trend_mean,trend_lo,trend_hi")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.county,
                r.phi.mean,
                r.phi.lower,
                r.phi.upper,
                r.trend.mean,
                r.trend.lower,
                r.trend.upper
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-county `phi_k` and `alpha + delta_k`; the trend is formed draw by draw
/// before summarizing.
pub fn county_effects(draws: &PosteriorDraws, graph: &CountyGraph) -> Result<CountyEffectTable, SummaryError> {
    if draws.county_ids.as_slice() != graph.ids() {
        return Err(SummaryError::CountyMismatch);
    }
    let (EffectDraws::Full(phi), EffectDraws::Full(delta)) = (&draws.phi, &draws.delta) else {
        return Err(SummaryError::EffectsNotStored);
    };
    if draws.is_empty() {
        return Err(SummaryError::TooFewDraws { found: 0, needed: 1 });
    }
    let rows = graph
        .ids()
        .iter()
        .zip(phi.iter().zip(delta))
        .map(|(id, (p, d))| {
            let trend: Vec<f64> = d.iter().zip(&draws.alpha).map(|(d, a)| a + d).collect();
            CountyEffectRow {
                county: id.clone(),
                phi: Interval::of(p),
                trend: Interval::of(&trend),
            }
        })
        .collect();
    Ok(CountyEffectTable { rows })
}

/// One age-sex model's coefficient summary, as input to [`variable_importance`].
#[derive(Debug, Clone, Copy)]
pub struct ModelSummary<'a> {
    pub label: &'a str,
    pub sex: Sex,
    pub table: &'a SummaryTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceRow {
    /// `all`, `female` or `male`.
    pub panel: String,
    pub covariate: String,
    pub mean_rank: f64,
    pub models: usize,
}

/// Ranks of `values` by absolute value, descending, starting at 1. Ties share
/// the average of the ranks they span.
pub fn magnitude_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]].abs() == values[order[i]].abs() {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Mean magnitude rank of each covariate across models, using the posterior
/// means of the standardized `beta.<covariate>` rows, for all models and for
/// each sex separately. Panels with no models are omitted.
pub fn variable_importance(
    models: &[ModelSummary<'_>],
    covariates: &[String],
) -> Result<Vec<ImportanceRow>, SummaryError> {
    let mut ranks: Vec<(Sex, Vec<f64>)> = Vec::with_capacity(models.len());
    for m in models {
        let means = covariates
            .iter()
            .map(|c| {
                m.table
                    .get(&format!("beta.{c}"))
                    .map(|r| r.mean)
                    .ok_or_else(|| SummaryError::MissingCovariate {
                        model: m.label.to_string(),
                        covariate: c.clone(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        ranks.push((m.sex, magnitude_ranks(&means)));
    }
    let mut out = Vec::new();
    for (panel, filter) in [("all", None), ("female", Some(Sex::Female)), ("male", Some(Sex::Male))] {
        let chosen: Vec<&Vec<f64>> = ranks
            .iter()
            .filter(|(s, _)| filter.is_none_or(|f| f == *s))
            .map(|(_, r)| r)
            .collect();
        if chosen.is_empty() {
            continue;
        }
        for (j, c) in covariates.iter().enumerate() {
            out.push(ImportanceRow {
                panel: panel.to_string(),
                covariate: c.clone(),
                mean_rank: chosen.iter().map(|r| r[j]).sum::<f64>() / chosen.len() as f64,
                models: chosen.len(),
            });
        }
    }
    Ok(out)
}

pub fn write_importance(path: &Path, rows: &[ImportanceRow]) -> Result<(), SummaryError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "panel,covariate,mean_rank,models")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.panel, r.covariate, r.mean_rank, r.models)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads the `parameter` and `mean` columns of a `summary.csv`.
pub fn read_summary_means(path: &Path) -> Result<BTreeMap<String, f64>, SummaryError> {
    let text = std::fs::read_to_string(path)?;
    let bad = |line: usize, what: &str| {
        SummaryError::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("{}:{line}: {what}", path.display()),
        ))
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.starts_with("parameter,mean") => {}
        _ => return Err(bad(1, "expected header starting with parameter,mean")),
    }
    let mut out = BTreeMap::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut f = line.split(',');
        let (Some(name), Some(mean)) = (f.next(), f.next()) else {
            return Err(bad(i + 1, "missing mean field"));
        };
        let mean: f64 = mean.trim().parse().map_err(|_| bad(i + 1, "mean is not a number"))?;
        out.insert(name.trim().to_string(), mean);
    }
    Ok(out)
}

/// A [`SummaryTable`] with only parameter means, as read back from disk.
pub fn table_from_means(means: &BTreeMap<String, f64>) -> SummaryTable {
    SummaryTable {
        rows: means
            .iter()
            .map(|(k, &m)| SummaryRow {
                parameter: k.clone(),
                mean: m,
                lower: m,
                upper: m,
                ess: None,
                geweke_z: None,
            })
            .collect(),
    }
}
