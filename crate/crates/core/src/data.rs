//! County-year panels, screening rates, covariate series and per-stratum design
//! matrices.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{CountyGraph, MergeMap};

/// Screens with fewer positives than this are treated as missing.
pub const MIN_POSITIVE_SCREENS: i64 = 5;

pub const COVID_YEARS: std::ops::RangeInclusive<i32> = 2020..=2021;
pub const POST_2021_YEARS: std::ops::RangeInclusive<i32> = 2022..=2023;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("negative screening count for {county} in {year}")]
    NegativeCount { county: String, year: i32 },
    #[error("{positives} positives exceed {totals} screens for {county} in {year}")]
    PositivesExceedTotals {
        county: String,
        year: i32,
        positives: i64,
        totals: i64,
    },
    #[error("every value is missing")]
    AllMissing,
    #[error("series has no observed value")]
    EmptySeries,
    #[error("years must be strictly increasing")]
    UnsortedYears,
    #[error("covariate {0} cannot be resolved for every county-year")]
    MissingCovariate(String),
    #[error("unknown model kind {0:?} (expected socioeconomic or mental_health)")]
    UnknownModelKind(String),
    #[error("unknown screening instrument {0:?}")]
    UnknownInstrument(String),
    #[error("zero exposure for {0}")]
    ZeroExposure(String),
    #[error("{deaths} deaths exceed population {population} for {county} in {year}")]
    DeathsExceedPopulation {
        county: String,
        year: i32,
        deaths: u64,
        population: u64,
    },
    #[error("no panel row for county {county} in {year}")]
    MissingCell { county: String, year: i32 },
    #[error("county {0} is not in the graph")]
    UnknownCounty(String),
    #[error("dataset shape: {0}")]
    Shape(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One of the eighteen five-year age bands, `0-4` through `85+`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgeGroup(u8);

impl AgeGroup {
    pub const COUNT: u8 = 18;

    pub fn new(index: u8) -> Option<Self> {
        (index < Self::COUNT).then_some(Self(index))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (0..Self::COUNT).map(Self)
    }
}

impl fmt::Display for AgeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lo = u32::from(self.0) * 5;
        if self.0 + 1 == Self::COUNT {
            write!(f, "{lo}+")
        } else {
            write!(f, "{lo}-{}", lo + 4)
        }
    }
}

impl FromStr for AgeGroup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        Self::all()
            .find(|g| g.to_string() == s)
            .ok_or_else(|| format!("unknown age group {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Female,
    Male,
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::Female => "female",
            Sex::Male => "male",
        })
    }
}

impl FromStr for Sex {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "female" | "f" => Ok(Sex::Female),
            "male" | "m" => Ok(Sex::Male),
            other => Err(format!("unknown sex {other:?}")),
        }
    }
}

/// An age group × sex combination; each one is fitted as its own model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StratumKey {
    pub age_group: AgeGroup,
    pub sex: Sex,
}

impl StratumKey {
    pub fn new(age_group: AgeGroup, sex: Sex) -> Self {
        Self { age_group, sex }
    }

    /// Dense id in `0..36`, used to derive per-stratum RNG streams.
    pub fn id(self) -> u64 {
        u64::from(self.age_group.index()) * 2 + u64::from(self.sex == Sex::Male)
    }

    pub fn all() -> impl Iterator<Item = Self> {
        AgeGroup::all().flat_map(|a| [Sex::Female, Sex::Male].map(|s| Self::new(a, s)))
    }
}

impl fmt::Display for StratumKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.age_group, self.sex)
    }
}

impl FromStr for StratumKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (age, sex) = s
            .split_once(':')
            .ok_or_else(|| format!("stratum {s:?} is not of the form AGE:SEX"))?;
        Ok(Self::new(age.parse()?, sex.parse()?))
    }
}

/// Deaths and population for one county, year and stratum.
///
/// Ingestion accepts zero populations and deaths above population so that the
/// low-population merge can repair them; [`build_design_matrix`] rejects both.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanelRow {
    pub county: String,
    pub year: i32,
    pub age_group: AgeGroup,
    pub sex: Sex,
    pub deaths: u64,
    pub population: u64,
}

impl PanelRow {
    pub fn stratum(&self) -> StratumKey {
        StratumKey::new(self.age_group, self.sex)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Instrument {
    Depression,
    SuicidalIdeation,
    Ptsd,
    Psychosis,
    BrfssDistress,
}

impl Instrument {
    pub const ALL: [Instrument; 5] = [
        Instrument::Depression,
        Instrument::SuicidalIdeation,
        Instrument::Ptsd,
        Instrument::Psychosis,
        Instrument::BrfssDistress,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Instrument::Depression => "depression",
            Instrument::SuicidalIdeation => "suicidal_ideation",
            Instrument::Ptsd => "ptsd",
            Instrument::Psychosis => "psychosis",
            Instrument::BrfssDistress => "brfss_distress",
        }
    }
}

impl fmt::Display for Instrument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Instrument {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        Self::ALL
            .into_iter()
            .find(|i| i.as_str() == s)
            .ok_or_else(|| DataError::UnknownInstrument(s.to_string()))
    }
}

/// Screening counts for one county, year and instrument. Empty CSV fields
/// become `None`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScreenRecord {
    pub county: String,
    pub year: i32,
    pub instrument: Instrument,
    pub positives: Option<i64>,
    pub totals: Option<i64>,
}

/// A long-format covariate value keyed by county (or by state for
/// [`read_state_covariates`]).
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateRecord {
    pub unit: String,
    pub year: i32,
    pub name: String,
    pub value: Option<f64>,
}

/// Positive screening rate per county-year.
///
/// Duplicate `(county, year)` records are pooled. A cell is missing when either
/// count is missing, no screens were completed, or fewer than
/// [`MIN_POSITIVE_SCREENS`] were positive.
pub fn compute_psr(
    records: &[ScreenRecord],
) -> Result<BTreeMap<(String, i32), Option<f64>>, DataError> {
    let mut pooled: BTreeMap<(String, i32), Option<(i64, i64)>> = BTreeMap::new();
    for rec in records {
        let counts = match (rec.positives, rec.totals) {
            (Some(p), Some(t)) => {
                if p < 0 || t < 0 {
                    return Err(DataError::NegativeCount {
                        county: rec.county.clone(),
                        year: rec.year,
                    });
                }
                if p > t {
                    return Err(DataError::PositivesExceedTotals {
                        county: rec.county.clone(),
                        year: rec.year,
                        positives: p,
                        totals: t,
                    });
                }
                Some((p, t))
            }
            (p, t) => {
                if p.is_some_and(|v| v < 0) || t.is_some_and(|v| v < 0) {
                    return Err(DataError::NegativeCount {
                        county: rec.county.clone(),
                        year: rec.year,
                    });
                }
                None
            }
        };
        let slot = pooled
            .entry((rec.county.clone(), rec.year))
            .or_insert(Some((0, 0)));
        *slot = match (*slot, counts) {
            (Some((p0, t0)), Some((p, t))) => Some((p0 + p, t0 + t)),
            _ => None,
        };
    }
    Ok(pooled
        .into_iter()
        .map(|(key, counts)| {
            let rate = counts.and_then(|(p, t)| {
                (t > 0 && p >= MIN_POSITIVE_SCREENS).then(|| p as f64 / t as f64)
            });
            (key, rate)
        })
        .collect())
}

/// Replaces missing entries with the unweighted mean of the observed ones.
pub fn impute_national_average(values: &[Option<f64>]) -> Result<Vec<f64>, DataError> {
    let observed: Vec<f64> = values.iter().flatten().copied().collect();
    if observed.is_empty() {
        return Err(DataError::AllMissing);
    }
    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
    Ok(values.iter().map(|v| v.unwrap_or(mean)).collect())
}

/// Fills gaps in a yearly series: linear between the nearest observed years,
/// constant beyond the first and last observation.
///
/// `years` must be strictly increasing; interpolation is in calendar years, so
/// uneven spacing is handled.
pub fn interpolate_years(years: &[i32], values: &[Option<f64>]) -> Result<Vec<f64>, DataError> {
    if years.len() != values.len() {
        return Err(DataError::Shape(format!(
            "{} years but {} values",
            years.len(),
            values.len()
        )));
    }
    if years.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DataError::UnsortedYears);
    }
    let observed: Vec<(i32, f64)> = years
        .iter()
        .zip(values)
        .filter_map(|(&y, v)| v.map(|v| (y, v)))
        .collect();
    let (first, last) = match (observed.first(), observed.last()) {
        (Some(&f), Some(&l)) => (f, l),
        _ => return Err(DataError::EmptySeries),
    };

    let mut right = 0;
    Ok(years
        .iter()
        .zip(values)
        .map(|(&year, value)| {
            if let Some(v) = value {
                return *v;
            }
            if year <= first.0 {
                return first.1;
            }
            if year >= last.0 {
                return last.1;
            }
            while observed[right].0 < year {
                right += 1;
            }
            let (y1, v1) = observed[right];
            let (y0, v0) = observed[right - 1];
            let w = f64::from(year - y0) / f64::from(y1 - y0);
            v0 + w * (v1 - v0)
        })
        .collect())
}

/// Pooled crude rate per stratum and year: summed deaths over summed
/// population across counties.
pub fn crude_rates(panel: &[PanelRow]) -> Result<BTreeMap<(StratumKey, i32), f64>, DataError> {
    let mut cells: BTreeMap<(StratumKey, i32), (u64, u64)> = BTreeMap::new();
    for row in panel {
        let cell = cells.entry((row.stratum(), row.year)).or_insert((0, 0));
        cell.0 += row.deaths;
        cell.1 += row.population;
    }
    cells
        .into_iter()
        .map(|(key, (deaths, population))| {
            if population == 0 {
                Err(DataError::ZeroExposure(format!("{} in {}", key.0, key.1)))
            } else {
                Ok((key, deaths as f64 / population as f64))
            }
        })
        .collect()
}

/// Z-score parameters of one design column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub sd: f64,
}

impl Standardization {
    pub fn apply(&self, raw: f64) -> f64 {
        (raw - self.mean) / self.sd
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.sd + self.mean
    }
}

/// One stratum's county-year panel aligned to a graph's county order.
///
/// Cells are indexed `k * T + t`; the design row of cell `c` is
/// `design[c * p..(c + 1) * p]` and column 0 is an intercept of ones.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumDataset {
    pub stratum: Option<StratumKey>,
    county_ids: Vec<String>,
    years: Vec<i32>,
    deaths: Vec<u64>,
    exposure: Vec<u64>,
    design: Vec<f64>,
    covariate_names: Vec<String>,
    standardization: Vec<Option<Standardization>>,
}

pub const INTERCEPT: &str = "intercept";

impl StratumDataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        stratum: Option<StratumKey>,
        county_ids: Vec<String>,
        years: Vec<i32>,
        deaths: Vec<u64>,
        exposure: Vec<u64>,
        design: Vec<f64>,
        covariate_names: Vec<String>,
        standardization: Vec<Option<Standardization>>,
    ) -> Result<Self, DataError> {
        let dataset = Self {
            stratum,
            county_ids,
            years,
            deaths,
            exposure,
            design,
            covariate_names,
            standardization,
        };
        dataset.validate(false)?;
        Ok(dataset)
    }

    /// A dataset with every death and exposure set to zero, so the likelihood
    /// term vanishes and a fit samples the joint prior.
    pub fn without_likelihood(
        county_ids: Vec<String>,
        years: Vec<i32>,
        design: Vec<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self, DataError> {
        let cells = county_ids.len() * years.len();
        let p = covariate_names.len();
        let dataset = Self {
            stratum: None,
            county_ids,
            years,
            deaths: vec![0; cells],
            exposure: vec![0; cells],
            design,
            covariate_names,
            standardization: vec![None; p],
        };
        dataset.validate(true)?;
        Ok(dataset)
    }

    fn validate(&self, allow_zero_exposure: bool) -> Result<(), DataError> {
        let cells = self.county_ids.len() * self.years.len();
        let p = self.covariate_names.len();
        if self.deaths.len() != cells || self.exposure.len() != cells {
            return Err(DataError::Shape(format!(
                "expected {cells} cells, got {} deaths and {} exposures",
                self.deaths.len(),
                self.exposure.len()
            )));
        }
        if self.design.len() != cells * p {
            return Err(DataError::Shape(format!(
                "design holds {} values, expected {}",
                self.design.len(),
                cells * p
            )));
        }
        if self.standardization.len() != p {
            return Err(DataError::Shape("standardization length differs from p".into()));
        }
        if self.covariate_names.first().map(String::as_str) != Some(INTERCEPT) {
            return Err(DataError::Shape("first covariate must be the intercept".into()));
        }
        if self.years.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DataError::UnsortedYears);
        }
        for c in 0..cells {
            let row = &self.design[c * p..(c + 1) * p];
            if row[0] != 1.0 {
                return Err(DataError::Shape("intercept column must be 1".into()));
            }
            if let Some(name) = row
                .iter()
                .zip(&self.covariate_names)
                .find_map(|(v, n)| (!v.is_finite()).then_some(n))
            {
                return Err(DataError::MissingCovariate(name.clone()));
            }
            let (k, t) = (c / self.years.len(), c % self.years.len());
            if self.deaths[c] > self.exposure[c] {
                return Err(DataError::DeathsExceedPopulation {
                    county: self.county_ids[k].clone(),
                    year: self.years[t],
                    deaths: self.deaths[c],
                    population: self.exposure[c],
                });
            }
            if self.exposure[c] == 0 && !allow_zero_exposure {
                return Err(DataError::ZeroExposure(format!(
                    "{} in {}",
                    self.county_ids[k], self.years[t]
                )));
            }
        }
        Ok(())
    }

    pub fn n_counties(&self) -> usize {
        self.county_ids.len()
    }

    pub fn n_years(&self) -> usize {
        self.years.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn county_ids(&self) -> &[String] {
        &self.county_ids
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn standardization(&self) -> &[Option<Standardization>] {
        &self.standardization
    }

    pub fn deaths(&self) -> &[u64] {
        &self.deaths
    }

    pub fn exposure(&self) -> &[u64] {
        &self.exposure
    }

    pub fn design(&self) -> &[f64] {
        &self.design
    }

    pub fn cell(&self, k: usize, t: usize) -> usize {
        k * self.years.len() + t
    }

    pub fn row(&self, k: usize, t: usize) -> &[f64] {
        let p = self.covariate_names.len();
        let c = self.cell(k, t);
        &self.design[c * p..(c + 1) * p]
    }

    /// Pooled crude rate over all cells; `None` when exposure is zero.
    pub fn pooled_rate(&self) -> Option<f64> {
        let deaths: u64 = self.deaths.iter().sum();
        let exposure: u64 = self.exposure.iter().sum();
        (exposure > 0).then(|| deaths as f64 / exposure as f64)
    }

    /// True when the county order matches `graph`.
    pub fn matches_graph(&self, graph: &CountyGraph) -> bool {
        self.county_ids.as_slice() == graph.ids()
    }

    /// Same panel with new death counts (used by the simulator).
    pub fn with_deaths(&self, deaths: Vec<u64>) -> Result<Self, DataError> {
        let out = Self {
            deaths,
            ..self.clone()
        };
        out.validate(false)?;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "instrument")]
pub enum ModelKind {
    /// Intercept, nine socio-economic columns and the two pandemic indicators.
    Socioeconomic,
    /// Intercept and one positive screening rate.
    MentalHealth(Instrument),
}

impl ModelKind {
    /// Parses `socioeconomic` or `mental_health` (the latter needs an
    /// instrument).
    pub fn parse(kind: &str, instrument: Option<Instrument>) -> Result<Self, DataError> {
        match kind.trim() {
            "socioeconomic" => Ok(ModelKind::Socioeconomic),
            "mental_health" => Ok(ModelKind::MentalHealth(
                instrument.unwrap_or(Instrument::SuicidalIdeation),
            )),
            other => Err(DataError::UnknownModelKind(other.to_string())),
        }
    }

    pub fn covariate_names(self) -> Vec<String> {
        let mut names = vec![INTERCEPT.to_string()];
        match self {
            ModelKind::Socioeconomic => {
                names.extend(SOCIOECONOMIC_COLUMNS.iter().map(|(n, _)| n.to_string()));
                names.extend(["covid".to_string(), "post2021".to_string()]);
            }
            ModelKind::MentalHealth(_) => names.push("psr".to_string()),
        }
        names
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Level {
    County,
    State,
}

/// Continuous socio-economic columns in design order, with the level each is
/// reported at. State-level values are broadcast to counties by the two-digit
/// FIPS state prefix.
const SOCIOECONOMIC_COLUMNS: [(&str, Level); 9] = [
    ("alcohol", Level::State),
    ("educ", Level::County),
    ("crime", Level::County),
    ("hpi", Level::State),
    ("married", Level::County),
    ("hhsize", Level::County),
    ("unemp", Level::County),
    ("race", Level::County),
    ("mh_days", Level::County),
];

pub fn state_of(county: &str) -> &str {
    county.get(..2).unwrap_or(county)
}

/// Raw inputs for building one stratum's dataset.
#[derive(Debug, Clone, Copy)]
pub struct DataSources<'a> {
    pub graph: &'a CountyGraph,
    pub panel: &'a [PanelRow],
    pub screens: &'a [ScreenRecord],
    pub covariates: &'a [CovariateRecord],
    pub state_covariates: &'a [CovariateRecord],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignOptions {
    /// Z-score continuous columns (indicators and intercept are never scaled).
    pub standardize: bool,
    /// Modeled years; defaults to the years present in the stratum's panel.
    pub years: Option<Vec<i32>>,
}

impl Default for DesignOptions {
    fn default() -> Self {
        Self {
            standardize: true,
            years: None,
        }
    }
}

/// Assembles the death counts, exposures and design matrix for one stratum.
///
/// Continuous covariates are filled by per-county linear interpolation over
/// years, then (for counties with no observation at all) by the per-year
/// national average. Screening rates drop sub-threshold cells first and then
/// impute the per-year national average.
pub fn build_design_matrix(
    sources: &DataSources<'_>,
    kind: ModelKind,
    stratum: StratumKey,
    options: &DesignOptions,
) -> Result<StratumDataset, DataError> {
    let graph = sources.graph;
    let rows: Vec<&PanelRow> = sources
        .panel
        .iter()
        .filter(|r| r.stratum() == stratum)
        .collect();
    let years: Vec<i32> = match &options.years {
        Some(y) => y.clone(),
        None => rows
            .iter()
            .map(|r| r.year)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    if years.is_empty() || years.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DataError::UnsortedYears);
    }
    let n_years = years.len();
    let year_index: HashMap<i32, usize> = years.iter().enumerate().map(|(i, &y)| (y, i)).collect();
    let cells = graph.len() * n_years;

    let mut deaths = vec![0u64; cells];
    let mut exposure = vec![0u64; cells];
    let mut seen = vec![false; cells];
    for row in &rows {
        let k = graph
            .index_of(&row.county)
            .ok_or_else(|| DataError::UnknownCounty(row.county.clone()))?;
        let Some(&t) = year_index.get(&row.year) else {
            continue;
        };
        let c = k * n_years + t;
        deaths[c] += row.deaths;
        exposure[c] += row.population;
        seen[c] = true;
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(DataError::MissingCell {
            county: graph.ids()[c / n_years].clone(),
            year: years[c % n_years],
        });
    }

    let names = kind.covariate_names();
    let mut columns: Vec<Vec<f64>> = vec![vec![1.0; cells]];
    let mut continuous = vec![false];
    match kind {
        ModelKind::Socioeconomic => {
            for (name, level) in SOCIOECONOMIC_COLUMNS {
                let records = match level {
                    Level::County => sources.covariates,
                    Level::State => sources.state_covariates,
                };
                columns.push(covariate_column(graph, &years, records, name, level)?);
                continuous.push(true);
            }
            let indicator = |range: &std::ops::RangeInclusive<i32>| -> Vec<f64> {
                (0..cells)
                    .map(|c| f64::from(u8::from(range.contains(&years[c % n_years]))))
                    .collect()
            };
            columns.push(indicator(&COVID_YEARS));
            columns.push(indicator(&POST_2021_YEARS));
            continuous.extend([false, false]);
        }
        ModelKind::MentalHealth(instrument) => {
            columns.push(psr_column(graph, &years, sources.screens, instrument)?);
            continuous.push(true);
        }
    }

    let mut standardization = vec![None; names.len()];
    if options.standardize {
        for (j, column) in columns.iter_mut().enumerate() {
            if !continuous[j] {
                continue;
            }
            let z = column_standardization(column);
            column.iter_mut().for_each(|v| *v = z.apply(*v));
            standardization[j] = Some(z);
        }
    }

    let p = names.len();
    let mut design = vec![0.0; cells * p];
    for (j, column) in columns.iter().enumerate() {
        for (c, &v) in column.iter().enumerate() {
            design[c * p + j] = v;
        }
    }

    StratumDataset::new(
        Some(stratum),
        graph.ids().to_vec(),
        years,
        deaths,
        exposure,
        design,
        names,
        standardization,
    )
}

/// Sample mean and (n - 1) standard deviation. A constant column is centered
/// only (sd recorded as 1).
fn column_standardization(column: &[f64]) -> Standardization {
    let n = column.len() as f64;
    let mean = column.iter().sum::<f64>() / n;
    let var = column.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let sd = var.sqrt();
    Standardization {
        mean,
        sd: if sd > 0.0 && sd.is_finite() { sd } else { 1.0 },
    }
}

fn covariate_column(
    graph: &CountyGraph,
    years: &[i32],
    records: &[CovariateRecord],
    name: &str,
    level: Level,
) -> Result<Vec<f64>, DataError> {
    // unit -> year -> value
    let mut by_unit: HashMap<&str, BTreeMap<i32, Option<f64>>> = HashMap::new();
    for rec in records.iter().filter(|r| r.name == name) {
        let slot = by_unit.entry(rec.unit.as_str()).or_default().entry(rec.year).or_insert(None);
        if rec.value.is_some() {
            *slot = rec.value;
        }
    }

    let n_years = years.len();
    let mut per_county: Vec<Option<Vec<f64>>> = Vec::with_capacity(graph.len());
    for id in graph.ids() {
        let unit = match level {
            Level::County => id.as_str(),
            Level::State => state_of(id),
        };
        let series = by_unit.get(unit).and_then(|obs| {
            let grid: BTreeSet<i32> = obs.keys().copied().chain(years.iter().copied()).collect();
            let grid: Vec<i32> = grid.into_iter().collect();
            let values: Vec<Option<f64>> = grid.iter().map(|y| obs.get(y).copied().flatten()).collect();
            let filled = interpolate_years(&grid, &values).ok()?;
            let lookup: HashMap<i32, f64> = grid.into_iter().zip(filled).collect();
            Some(years.iter().map(|y| lookup[y]).collect::<Vec<_>>())
        });
        per_county.push(series);
    }

    let mut column = vec![0.0; graph.len() * n_years];
    for t in 0..n_years {
        let year_values: Vec<Option<f64>> = per_county
            .iter()
            .map(|s| s.as_ref().map(|v| v[t]))
            .collect();
        let filled = impute_national_average(&year_values)
            .map_err(|_| DataError::MissingCovariate(name.to_string()))?;
        for (k, v) in filled.into_iter().enumerate() {
            column[k * n_years + t] = v;
        }
    }
    Ok(column)
}

fn psr_column(
    graph: &CountyGraph,
    years: &[i32],
    screens: &[ScreenRecord],
    instrument: Instrument,
) -> Result<Vec<f64>, DataError> {
    let selected: Vec<ScreenRecord> = screens
        .iter()
        .filter(|r| r.instrument == instrument)
        .cloned()
        .collect();
    let rates = compute_psr(&selected)?;
    let n_years = years.len();
    let mut column = vec![0.0; graph.len() * n_years];
    for (t, &year) in years.iter().enumerate() {
        let values: Vec<Option<f64>> = graph
            .ids()
            .iter()
            .map(|id| rates.get(&(id.clone(), year)).copied().flatten())
            .collect();
        let filled = impute_national_average(&values)
            .map_err(|_| DataError::MissingCovariate(format!("psr[{instrument}] in {year}")))?;
        for (k, v) in filled.into_iter().enumerate() {
            column[k * n_years + t] = v;
        }
    }
    Ok(column)
}

/// Relabels screening records through a merge map and pools the counts of
/// merged counties into their targets.
pub fn merge_screens(records: &[ScreenRecord], map: &MergeMap) -> Vec<ScreenRecord> {
    let mut pooled: BTreeMap<(String, i32, Instrument), (Option<i64>, Option<i64>)> = BTreeMap::new();
    for rec in records {
        let key = (map.resolve(&rec.county).to_string(), rec.year, rec.instrument);
        let slot = pooled.entry(key).or_insert((Some(0), Some(0)));
        slot.0 = slot.0.zip(rec.positives).map(|(a, b)| a + b);
        slot.1 = slot.1.zip(rec.totals).map(|(a, b)| a + b);
    }
    pooled
        .into_iter()
        .map(|((county, year, instrument), (positives, totals))| ScreenRecord {
            county,
            year,
            instrument,
            positives,
            totals,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// CSV ingestion

struct CsvTable {
    path: String,
    reader: csv::Reader<File>,
    columns: Vec<usize>,
}

impl CsvTable {
    fn open(path: &Path, header: &[&str]) -> Result<Self, DataError> {
        let display = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_error(&display, &e))?;
        let found = reader.headers().map_err(|e| csv_error(&display, &e))?.clone();
        let columns = header
            .iter()
            .map(|name| {
                found.iter().position(|h| h == *name).ok_or_else(|| DataError::Parse {
                    path: display.clone(),
                    line: 1,
                    message: format!("missing column {name:?} (expected header {})", header.join(",")),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            path: display,
            reader,
            columns,
        })
    }

    /// Calls `f(line, fields)` for every record, fields ordered like the
    /// requested header.
    fn for_each(
        mut self,
        mut f: impl FnMut(u64, &[&str]) -> Result<(), String>,
    ) -> Result<(), DataError> {
        let mut record = csv::StringRecord::new();
        loop {
            match self.reader.read_record(&mut record) {
                Ok(false) => return Ok(()),
                Ok(true) => {}
                Err(e) => return Err(csv_error(&self.path, &e)),
            }
            let line = record.position().map_or(0, |p| p.line());
            let fields: Vec<&str> = self
                .columns
                .iter()
                .map(|&i| record.get(i).unwrap_or(""))
                .collect();
            f(line, &fields).map_err(|message| DataError::Parse {
                path: self.path.clone(),
                line,
                message,
            })?;
        }
    }
}

fn csv_error(path: &str, err: &csv::Error) -> DataError {
    DataError::Parse {
        path: path.to_string(),
        line: err.position().map_or(0, |p| p.line()),
        message: err.to_string(),
    }
}

fn parse_field<T: FromStr>(name: &str, raw: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| format!("field {name}: cannot parse {raw:?}: {e}"))
}

fn parse_optional<T: FromStr>(name: &str, raw: &str) -> Result<Option<T>, String>
where
    T::Err: fmt::Display,
{
    if raw.is_empty() {
        Ok(None)
    } else {
        parse_field(name, raw).map(Some)
    }
}

/// Reads `county,year,age_group,sex,deaths,population`.
pub fn read_counts(path: &Path) -> Result<Vec<PanelRow>, DataError> {
    let table = CsvTable::open(
        path,
        &["county", "year", "age_group", "sex", "deaths", "population"],
    )?;
    let mut rows = Vec::new();
    table.for_each(|_, f| {
        rows.push(PanelRow {
            county: f[0].to_string(),
            year: parse_field("year", f[1])?,
            age_group: f[2].parse()?,
            sex: f[3].parse()?,
            deaths: parse_field("deaths", f[4])?,
            population: parse_field("population", f[5])?,
        });
        Ok(())
    })?;
    Ok(rows)
}

/// Reads `county,year,instrument,positives,totals`.
pub fn read_screens(path: &Path) -> Result<Vec<ScreenRecord>, DataError> {
    let table = CsvTable::open(path, &["county", "year", "instrument", "positives", "totals"])?;
    let mut rows = Vec::new();
    table.for_each(|_, f| {
        rows.push(ScreenRecord {
            county: f[0].to_string(),
            year: parse_field("year", f[1])?,
            instrument: f[2].parse().map_err(|e: DataError| e.to_string())?,
            positives: parse_optional("positives", f[3])?,
            totals: parse_optional("totals", f[4])?,
        });
        Ok(())
    })?;
    Ok(rows)
}

fn read_long(path: &Path, unit: &str) -> Result<Vec<CovariateRecord>, DataError> {
    let table = CsvTable::open(path, &[unit, "year", "name", "value"])?;
    let mut rows = Vec::new();
    table.for_each(|_, f| {
        rows.push(CovariateRecord {
            unit: f[0].to_string(),
            year: parse_field("year", f[1])?,
            name: f[2].to_string(),
            value: parse_optional("value", f[3])?,
        });
        Ok(())
    })?;
    Ok(rows)
}

/// Reads county covariates `county,year,name,value`.
pub fn read_covariates(path: &Path) -> Result<Vec<CovariateRecord>, DataError> {
    read_long(path, "county")
}

/// Reads state covariates `state,year,name,value`.
pub fn read_state_covariates(path: &Path) -> Result<Vec<CovariateRecord>, DataError> {
    read_long(path, "state")
}

pub fn write_counts(path: &Path, rows: &[PanelRow]) -> Result<(), DataError> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "county,year,age_group,sex,deaths,population")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.county, r.year, r.age_group, r.sex, r.deaths, r.population
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_screens(path: &Path, rows: &[ScreenRecord]) -> Result<(), DataError> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "county,year,instrument,positives,totals")?;
    let opt = |v: Option<i64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.county,
            r.year,
            r.instrument,
            opt(r.positives),
            opt(r.totals)
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Writes a dataset for audit as `county,year,deaths,exposure,<covariates...>`,
/// one row per cell in county-major order, design values after
/// standardization.
pub fn write_dataset(path: &Path, data: &StratumDataset) -> Result<(), DataError> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "county,year,deaths,exposure")?;
    for name in data.covariate_names() {
        write!(out, ",{name}")?;
    }
    writeln!(out)?;
    for k in 0..data.n_counties() {
        for t in 0..data.n_years() {
            let c = data.cell(k, t);
            write!(
                out,
                "{},{},{},{}",
                data.county_ids()[k],
                data.years()[t],
                data.deaths()[c],
                data.exposure()[c]
            )?;
            for v in data.row(k, t) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Writes `covariate,mean,sd` for every standardized column.
pub fn write_standardization(path: &Path, data: &StratumDataset) -> Result<(), DataError> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "covariate,mean,sd")?;
    for (name, z) in data.covariate_names().iter().zip(data.standardization()) {
        if let Some(z) = z {
            writeln!(out, "{name},{},{}", z.mean, z.sd)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads the file written by [`write_standardization`].
pub fn read_standardization(path: &Path) -> Result<BTreeMap<String, Standardization>, DataError> {
    let table = CsvTable::open(path, &["covariate", "mean", "sd"])?;
    let mut out = BTreeMap::new();
    table.for_each(|_, f| {
        out.insert(
            f[0].to_string(),
            Standardization {
                mean: parse_field("mean", f[1])?,
                sd: parse_field("sd", f[2])?,
            },
        );
        Ok(())
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use approx::assert_abs_diff_eq;

    fn screen(county: &str, positives: i64, totals: i64) -> ScreenRecord {
        ScreenRecord {
            county: county.into(),
            year: 2020,
            instrument: Instrument::Depression,
            positives: Some(positives),
            totals: Some(totals),
        }
    }

    #[test]
    fn age_and_stratum_labels() {
        assert_eq!(AgeGroup::new(0).unwrap().to_string(), "0-4");
        assert_eq!(AgeGroup::new(17).unwrap().to_string(), "85+");
        assert_eq!("40-44".parse::<AgeGroup>().unwrap().index(), 8);
        assert!(AgeGroup::new(18).is_none());
        let key: StratumKey = "85+:male".parse().unwrap();
        assert_eq!(key.id(), 35);
        assert_eq!(StratumKey::all().count(), 36);
        assert_eq!(key.to_string(), "85+:male");
    }

    #[test]
    fn psr_threshold_and_worked_example() {
        let rates = compute_psr(&[screen("a", 10, 1000)]).unwrap();
        assert_eq!(rates[&("a".into(), 2020)], Some(0.01));
        let rates = compute_psr(&[screen("a", 4, 900), screen("b", 5, 10), screen("c", 0, 0)]).unwrap();
        assert_eq!(rates[&("a".into(), 2020)], None);
        assert_eq!(rates[&("b".into(), 2020)], Some(0.5));
        assert_eq!(rates[&("c".into(), 2020)], None);
        assert!(matches!(
            compute_psr(&[screen("a", -1, 10)]),
            Err(DataError::NegativeCount { .. })
        ));
        assert!(matches!(
            compute_psr(&[screen("a", 11, 10)]),
            Err(DataError::PositivesExceedTotals { .. })
        ));
        let missing = ScreenRecord {
            totals: None,
            ..screen("d", 30, 100)
        };
        assert_eq!(compute_psr(&[missing]).unwrap()[&("d".into(), 2020)], None);
    }

    #[test]
    fn national_average() {
        let out = impute_national_average(&[Some(0.2), None, Some(0.4)]).unwrap();
        assert_abs_diff_eq!(out[1], 0.3, epsilon = 1e-15);
        assert_eq!(out[0], 0.2);
        assert_eq!(
            impute_national_average(&[Some(1.0), Some(2.0)]).unwrap(),
            vec![1.0, 2.0]
        );
        assert!(matches!(
            impute_national_average(&[None, None]),
            Err(DataError::AllMissing)
        ));
    }

    #[test]
    fn interpolation_examples() {
        let out = interpolate_years(&[2010, 2011, 2012], &[Some(1.0), None, Some(3.0)]).unwrap();
        assert_eq!(out, vec![1.0, 2.0, 3.0]);
        let out = interpolate_years(&[2010, 2011, 2012], &[None, Some(5.0), None]).unwrap();
        assert_eq!(out, vec![5.0, 5.0, 5.0]);
        assert!(matches!(
            interpolate_years(&[2010], &[None]),
            Err(DataError::EmptySeries)
        ));
        assert!(interpolate_years(&[2011, 2010], &[Some(1.0), None]).is_err());
    }

    #[test]
    fn crude_rate_examples() {
        let stratum = StratumKey::new(AgeGroup::new(3).unwrap(), Sex::Male);
        let row = |county: &str, deaths, population| PanelRow {
            county: county.into(),
            year: 2001,
            age_group: stratum.age_group,
            sex: stratum.sex,
            deaths,
            population,
        };
        let rates = crude_rates(&[row("a", 2, 1000)]).unwrap();
        assert_abs_diff_eq!(rates[&(stratum, 2001)], 0.002, epsilon = 1e-15);
        let rates = crude_rates(&[row("a", 1, 100), row("b", 1, 100)]).unwrap();
        assert_abs_diff_eq!(rates[&(stratum, 2001)], 0.01, epsilon = 1e-15);
        assert!(matches!(
            crude_rates(&[row("a", 0, 0)]),
            Err(DataError::ZeroExposure(_))
        ));
    }

    fn toy_sources() -> (CountyGraph, Vec<PanelRow>, Vec<ScreenRecord>, Vec<CovariateRecord>, Vec<CovariateRecord>) {
        let graph = build_graph(
            &["01001", "01003", "02001"],
            &[("01001", "01003"), ("01003", "02001")],
        )
        .unwrap();
        let stratum = StratumKey::new(AgeGroup::new(8).unwrap(), Sex::Female);
        let years = [2019, 2020, 2021, 2022, 2023];
        let mut panel = Vec::new();
        let mut screens = Vec::new();
        let mut covs = Vec::new();
        let mut states = Vec::new();
        for (k, id) in graph.ids().iter().enumerate() {
            for &y in &years {
                panel.push(PanelRow {
                    county: id.clone(),
                    year: y,
                    age_group: stratum.age_group,
                    sex: stratum.sex,
                    deaths: 3 + k as u64,
                    population: 1000,
                });
                screens.push(ScreenRecord {
                    county: id.clone(),
                    year: y,
                    instrument: Instrument::SuicidalIdeation,
                    positives: Some(10 * (k as i64 + 1)),
                    totals: Some(500),
                });
                for (name, _) in SOCIOECONOMIC_COLUMNS.iter().filter(|(_, l)| *l == Level::County) {
                    // county 02001 has no data at all -> national average
                    if id != "02001" && y != 2021 {
                        covs.push(CovariateRecord {
                            unit: id.clone(),
                            year: y,
                            name: name.to_string(),
                            value: Some(f64::from(y - 2000) + k as f64),
                        });
                    }
                }
            }
        }
        for state in ["01", "02"] {
            for &y in &years {
                for name in ["alcohol", "hpi"] {
                    states.push(CovariateRecord {
                        unit: state.into(),
                        year: y,
                        name: name.into(),
                        value: Some(f64::from(y) * if state == "01" { 1.0 } else { 2.0 }),
                    });
                }
            }
        }
        (graph, panel, screens, covs, states)
    }

    #[test]
    fn socioeconomic_design_columns() {
        let (graph, panel, screens, covs, states) = toy_sources();
        let sources = DataSources {
            graph: &graph,
            panel: &panel,
            screens: &screens,
            covariates: &covs,
            state_covariates: &states,
        };
        let stratum = "40-44:female".parse().unwrap();
        let raw = build_design_matrix(
            &sources,
            ModelKind::Socioeconomic,
            stratum,
            &DesignOptions {
                standardize: false,
                years: None,
            },
        )
        .unwrap();
        assert_eq!(raw.n_covariates(), 12);
        let names = raw.covariate_names();
        let covid = names.iter().position(|n| n == "covid").unwrap();
        let post = names.iter().position(|n| n == "post2021").unwrap();
        for (t, &y) in raw.years().iter().enumerate() {
            let row = raw.row(0, t);
            assert_eq!(row[covid], f64::from(u8::from((2020..=2021).contains(&y))));
            assert_eq!(row[post], f64::from(u8::from((2022..=2023).contains(&y))));
        }
        // interpolated interior gap for county 0 in 2021: value y-2000 + 0
        let educ = names.iter().position(|n| n == "educ").unwrap();
        assert_abs_diff_eq!(raw.row(0, 2)[educ], 21.0, epsilon = 1e-12);
        // county 02001 gets the mean of counties 0 and 1 for each year
        assert_abs_diff_eq!(raw.row(2, 0)[educ], 19.5, epsilon = 1e-12);
        // state broadcast
        let alcohol = names.iter().position(|n| n == "alcohol").unwrap();
        assert_eq!(raw.row(2, 0)[alcohol], 2.0 * 2019.0);

        let z = build_design_matrix(&sources, ModelKind::Socioeconomic, stratum, &DesignOptions::default()).unwrap();
        let cells = z.n_counties() * z.n_years();
        for j in 1..10 {
            let col: Vec<f64> = (0..cells).map(|c| z.design()[c * 12 + j]).collect();
            let mean = col.iter().sum::<f64>() / cells as f64;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (cells as f64 - 1.0)).sqrt();
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(sd, 1.0, epsilon = 1e-10);
            let s = z.standardization()[j].unwrap();
            for c in 0..cells {
                assert_abs_diff_eq!(s.invert(col[c]), raw.design()[c * 12 + j], epsilon = 1e-10);
            }
        }
        assert!(z.standardization()[covid].is_none());
        assert!(z.standardization()[0].is_none());
    }

    #[test]
    fn mental_health_design() {
        let (graph, panel, screens, covs, states) = toy_sources();
        let sources = DataSources {
            graph: &graph,
            panel: &panel,
            screens: &screens,
            covariates: &covs,
            state_covariates: &states,
        };
        let kind = ModelKind::parse("mental_health", Some(Instrument::SuicidalIdeation)).unwrap();
        let raw = build_design_matrix(
            &sources,
            kind,
            "40-44:female".parse().unwrap(),
            &DesignOptions {
                standardize: false,
                years: None,
            },
        )
        .unwrap();
        assert_eq!(raw.covariate_names(), &["intercept".to_string(), "psr".to_string()]);
        assert_abs_diff_eq!(raw.row(1, 0)[1], 20.0 / 500.0, epsilon = 1e-15);
        assert!(matches!(
            ModelKind::parse("poisson", None),
            Err(DataError::UnknownModelKind(_))
        ));
        let missing = build_design_matrix(
            &sources,
            ModelKind::MentalHealth(Instrument::Ptsd),
            "40-44:female".parse().unwrap(),
            &DesignOptions::default(),
        );
        assert!(matches!(missing, Err(DataError::MissingCovariate(_))));
    }

    #[test]
    fn dataset_rejects_bad_cells() {
        let (graph, mut panel, screens, covs, states) = toy_sources();
        panel[0].deaths = 5000;
        let sources = DataSources {
            graph: &graph,
            panel: &panel,
            screens: &screens,
            covariates: &covs,
            state_covariates: &states,
        };
        let kind = ModelKind::MentalHealth(Instrument::SuicidalIdeation);
        let err = build_design_matrix(&sources, kind, "40-44:female".parse().unwrap(), &DesignOptions::default());
        assert!(matches!(err, Err(DataError::DeathsExceedPopulation { .. })));

        let rest = panel[1..].to_vec();
        let sources = DataSources { panel: &rest, ..sources };
        let err = build_design_matrix(&sources, kind, "40-44:female".parse().unwrap(), &DesignOptions::default());
        assert!(matches!(err, Err(DataError::MissingCell { .. })));
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (_, panel, screens, _, _) = toy_sources();
        let p = dir.path().join("counts.csv");
        write_counts(&p, &panel).unwrap();
        assert_eq!(read_counts(&p).unwrap(), panel);
        let s = dir.path().join("screens.csv");
        write_screens(&s, &screens).unwrap();
        assert_eq!(read_screens(&s).unwrap(), screens);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "county,year,age_group,sex,deaths,population\n01001,2020,40-44,female,x,10\n").unwrap();
        match read_counts(&bad) {
            Err(DataError::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("deaths"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = dir.path().join("cov.csv");
        std::fs::write(&c, "county,year,name,value\n01001,2020,educ,\n01001,2021,educ,3.5\n").unwrap();
        let covs = read_covariates(&c).unwrap();
        assert_eq!(covs[0].value, None);
        assert_eq!(covs[1].value, Some(3.5));
    }
}
