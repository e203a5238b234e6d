//! TOML run configuration. Relative paths in a file resolve against the
//! file's directory; command-line flags override file values.

use std::path::{Path, PathBuf};

use carmort::data::{Instrument, ModelKind, StratumKey};
use carmort::diagnostics::ConvergenceOptions;
use carmort::model::PriorConfig;
use carmort::sampler::SamplerConfig;
use carmort::summary::MIN_DRAWS;
use carmort::synthetic::RecoveryScenario;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::Overrides;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// Use the panel as given.
    #[default]
    None,
    /// Merge the counties flagged on the original panel.
    OnePass,
    /// Repeat until no county is flagged.
    Iterative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    /// Edge list `county_a,county_b`.
    pub adjacency: PathBuf,
    /// `county,year,age_group,sex,deaths,population`.
    pub counts: PathBuf,
    /// `county,year,instrument,positives,totals`; needed by mental-health models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub screens: Option<PathBuf>,
    /// `county,year,name,value`; needed by socio-economic models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariates: Option<PathBuf>,
    /// `state,year,name,value`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_covariates: Option<PathBuf>,
    /// Recode counties to 2023 boundaries with the built-in table first.
    #[serde(default)]
    pub fips_2023: bool,
    /// `original,adjusted`, applied after the built-in table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merge_map: Option<PathBuf>,
    #[serde(default)]
    pub low_population_merge: MergeMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `socioeconomic` or `mental_health`.
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instrument: Option<Instrument>,
    pub standardize: bool,
    /// Modeled years; all years in the counts file when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub years: Option<Vec<i32>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: "mental_health".into(),
            instrument: Some(Instrument::SuicidalIdeation),
            standardize: true,
            years: None,
        }
    }
}

impl ModelConfig {
    pub fn model_kind(&self) -> Result<ModelKind, CliError> {
        Ok(ModelKind::parse(&self.kind, self.instrument)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_fit_out")]
    pub out: PathBuf,
    /// Concurrent strata; defaults to the number of cores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    /// `AGE:SEX` labels such as `45-49:female`; every stratum in the counts
    /// file when empty.
    #[serde(default)]
    pub strata: Vec<String>,
    pub inputs: Inputs,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub priors: PriorConfig,
    #[serde(default)]
    pub diagnostics: ConvergenceOptions,
}

fn default_fit_out() -> PathBuf {
    PathBuf::from("fit")
}

fn default_sim_out() -> PathBuf {
    PathBuf::from("sim")
}

fn default_sim_strata() -> Vec<String> {
    vec!["45-49:female".into(), "45-49:male".into()]
}

fn default_sim_seed() -> u64 {
    1
}

/// Settings for `simulate`. The sampler, prior and diagnostics tables are
/// copied into the generated `fit.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default = "default_sim_out")]
    pub out: PathBuf,
    #[serde(default = "default_sim_seed")]
    pub seed: u64,
    #[serde(default = "default_sim_strata")]
    pub strata: Vec<String>,
    #[serde(default = "default_instrument")]
    pub instrument: Instrument,
    #[serde(default)]
    pub scenario: RecoveryScenario,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub priors: PriorConfig,
    #[serde(default)]
    pub diagnostics: ConvergenceOptions,
}

fn default_instrument() -> Instrument {
    Instrument::SuicidalIdeation
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            out: default_sim_out(),
            seed: default_sim_seed(),
            strata: default_sim_strata(),
            instrument: default_instrument(),
            scenario: RecoveryScenario::default(),
            sampler: SamplerConfig::default(),
            priors: PriorConfig::default(),
            diagnostics: ConvergenceOptions::default(),
        }
    }
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    toml::from_str(&text).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Joins a relative path onto `base` and makes it absolute, so echoed
/// configs do not depend on the working directory.
fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
    if let Ok(abs) = std::path::absolute(&*p) {
        *p = abs;
    }
}

fn base_dir(config: &Path) -> PathBuf {
    config
        .parent()
        .map(Path::to_path_buf)
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn parse_strata(labels: &[String]) -> Result<Vec<StratumKey>, CliError> {
    let mut out: Vec<StratumKey> = labels
        .iter()
        .map(|s| s.parse().map_err(CliError::Invalid))
        .collect::<Result<_, _>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

fn apply_sampler_overrides(sampler: &mut SamplerConfig, o: &Overrides) {
    if let Some(seed) = o.seed {
        sampler.seed = seed;
    }
    if let Some(b) = o.burn_in {
        sampler.burn_in = b;
    }
    if let Some(s) = o.samples {
        sampler.samples = s;
    }
}

fn check_sampler(sampler: &SamplerConfig) -> Result<(), CliError> {
    sampler
        .validate()
        .map_err(|e| CliError::Invalid(format!("sampler: {e}")))?;
    if sampler.samples < MIN_DRAWS {
        return Err(CliError::Invalid(format!(
            "sampler: samples must be at least {MIN_DRAWS} for summaries"
        )));
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path, o: &Overrides) -> Result<Self, CliError> {
        let mut c: RunConfig = read_toml(path)?;
        let base = base_dir(path);
        for p in [&mut c.inputs.adjacency, &mut c.inputs.counts, &mut c.out] {
            resolve(&base, p);
        }
        for p in [
            &mut c.inputs.screens,
            &mut c.inputs.covariates,
            &mut c.inputs.state_covariates,
            &mut c.inputs.merge_map,
        ]
        .into_iter()
        .flatten()
        {
            resolve(&base, p);
        }
        if let Some(out) = &o.out {
            c.out = out.clone();
            resolve(Path::new("."), &mut c.out);
        }
        if let Some(strata) = &o.strata {
            c.strata = strata.clone();
        }
        if let Some(j) = o.jobs {
            c.jobs = Some(j);
        }
        apply_sampler_overrides(&mut c.sampler, o);
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<(), CliError> {
        check_sampler(&self.sampler)?;
        self.diagnostics
            .validate()
            .map_err(|e| CliError::Invalid(format!("diagnostics: {e}")))?;
        if self.jobs == Some(0) {
            return Err(CliError::Invalid("jobs must be at least 1".into()));
        }
        parse_strata(&self.strata)?;
        let kind = self.model.model_kind()?;
        let i = &self.inputs;
        let mut required = vec![("adjacency", Some(&i.adjacency)), ("counts", Some(&i.counts))];
        required.push(("merge_map", i.merge_map.as_ref()));
        required.push(("state_covariates", i.state_covariates.as_ref()));
        match kind {
            ModelKind::MentalHealth(_) => {
                if i.screens.is_none() {
                    return Err(CliError::Invalid("inputs.screens is required for mental_health models".into()));
                }
                required.push(("screens", i.screens.as_ref()));
                required.push(("covariates", i.covariates.as_ref()));
            }
            ModelKind::Socioeconomic => {
                if i.covariates.is_none() || i.state_covariates.is_none() {
                    return Err(CliError::Invalid(
                        "inputs.covariates and inputs.state_covariates are required for socioeconomic models".into(),
                    ));
                }
                required.push(("covariates", i.covariates.as_ref()));
                required.push(("screens", i.screens.as_ref()));
            }
        }
        for (name, path) in required {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(CliError::Invalid(format!("inputs.{name}: {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

impl SimulateConfig {
    pub fn load(path: Option<&Path>, o: &Overrides) -> Result<Self, CliError> {
        let mut c = match path {
            Some(p) => {
                let mut c: SimulateConfig = read_toml(p)?;
                resolve(&base_dir(p), &mut c.out);
                c
            }
            None => SimulateConfig::default(),
        };
        if let Some(out) = &o.out {
            c.out = out.clone();
        }
        if let Some(strata) = &o.strata {
            c.strata = strata.clone();
        }
        if let Some(seed) = o.seed {
            c.seed = seed;
        }
        // The seed seeds the simulation; the generated fit config keeps its own.
        apply_sampler_overrides(
            &mut c.sampler,
            &Overrides {
                seed: None,
                ..o.clone()
            },
        );
        check_sampler(&c.sampler)?;
        if parse_strata(&c.strata)?.is_empty() {
            return Err(CliError::Invalid("no strata to simulate".into()));
        }
        Ok(c)
    }
}
