use std::path::{Path, PathBuf};

use carmort::data::{read_standardization, StratumKey, INTERCEPT};
use carmort::diagnostics::{convergence_report, ConvergenceOptions};
use carmort::draws::read_draws;
use carmort::summary::{raw_scale_summary, summarize, variable_importance, write_importance, ModelSummary, SummaryTable};
use serde::Deserialize;

use crate::error::{write_err, CliError};
use crate::manifest::read_stratum;

/// The `[diagnostics]` table of any config file; other tables are ignored.
fn diagnostics_options(path: &Path) -> Result<ConvergenceOptions, CliError> {
    #[derive(Deserialize)]
    struct Partial {
        #[serde(default)]
        diagnostics: ConvergenceOptions,
    }
    let config_err = |message: String| CliError::Config {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| config_err(e.to_string()))?;
    let p: Partial = toml::from_str(&text).map_err(|e| config_err(e.to_string()))?;
    Ok(p.diagnostics)
}

pub fn cmd_diagnose(draws: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<(), CliError> {
    let options = match config {
        Some(p) => diagnostics_options(p)?,
        None => ConvergenceOptions::default(),
    };
    let draws_data = read_draws(draws)?;
    let report = convergence_report(&draws_data, &options)?;
    println!("{report}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(write_err(dir))?;
        report.write_csv(&dir.join("convergence.csv"))?;
    }
    if !report.pass() {
        let failed: Vec<&str> = report.failures().map(|p| p.name.as_str()).collect();
        return Err(CliError::NotConverged(format!("{}: {}", draws.display(), failed.join(", "))));
    }
    Ok(())
}

struct Model {
    label: String,
    stratum: StratumKey,
    table: SummaryTable,
    covariates: Vec<String>,
}

fn stratum_of(dir: &Path, label: &str) -> Result<StratumKey, CliError> {
    let manifest = dir.join("manifest.toml");
    if manifest.is_file() {
        return read_stratum(&manifest);
    }
    label.replacen('_', ":", 1).parse().map_err(|m: String| {
        CliError::Invalid(format!("{}: no manifest.toml and {m}", dir.display()))
    })
}

fn load_model(draws_path: &Path) -> Result<Model, CliError> {
    let dir = draws_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let label = dir
        .canonicalize()
        .ok()
        .and_then(|d| d.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "model".into());
    let stratum = stratum_of(&dir, &label)?;
    let draws = read_draws(draws_path)?;
    let mut table = summarize(&draws)?;
    let standardization = dir.join("standardization.csv");
    if standardization.is_file() {
        let known = read_standardization(&standardization)?;
        let per_column: Vec<_> = draws.covariate_names.iter().map(|n| known.get(n).copied()).collect();
        table.rows.extend(raw_scale_summary(&draws, &per_column)?.rows);
    }
    let covariates = draws
        .covariate_names
        .iter()
        .filter(|n| n.as_str() != INTERCEPT)
        .cloned()
        .collect();
    Ok(Model {
        label,
        stratum,
        table,
        covariates,
    })
}

/// The draws files under a fit directory (one per stratum subdirectory), or
/// the single file given.
fn draws_files(input: &Path) -> Result<Vec<PathBuf>, CliError> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = std::fs::read_dir(input)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", input.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path().join("draws.csv"))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Invalid(format!("{}: no */draws.csv found", input.display())));
    }
    Ok(files)
}

/// Writes `<out>/<model>/summary.csv` per model and `<out>/variable_importance.csv`.
pub fn cmd_summarize(input: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let files = draws_files(input)?;
    let out = match out {
        Some(o) => o.to_path_buf(),
        None if input.is_file() => input.parent().unwrap_or(Path::new(".")).join("summaries"),
        None => input.join("summaries"),
    };
    let models = files.iter().map(|f| load_model(f)).collect::<Result<Vec<_>, _>>()?;
    let covariates = models[0].covariates.clone();
    if let Some(m) = models.iter().find(|m| m.covariates != covariates) {
        return Err(CliError::Invalid(format!(
            "model {} has covariates [{}], expected [{}]",
            m.label,
            m.covariates.join(","),
            covariates.join(",")
        )));
    }
    for m in &models {
        let dir = out.join(&m.label);
        std::fs::create_dir_all(&dir).map_err(write_err(&dir))?;
        m.table.write_csv(&dir.join("summary.csv"))?;
    }
    let summaries: Vec<ModelSummary<'_>> = models
        .iter()
        .map(|m| ModelSummary {
            label: &m.label,
            sex: m.stratum.sex,
            table: &m.table,
        })
        .collect();
    let rows = variable_importance(&summaries, &covariates)?;
    write_importance(&out.join("variable_importance.csv"), &rows)?;
    println!("summarized {} models into {}", models.len(), out.display());
    Ok(())
}
