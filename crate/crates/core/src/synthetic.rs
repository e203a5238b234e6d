//! Forward simulation from the model, for recovery tests and demo inputs.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::ops::serial::spsolve_csc_lower_triangular;
use nalgebra_sparse::ops::Op;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use thiserror::Error;

use crate::data::{
    build_design_matrix, DataError, DataSources, DesignOptions, Instrument, ModelKind, PanelRow,
    ScreenRecord, StratumDataset, StratumKey, INTERCEPT,
};
use crate::graph::{build_graph, CountyGraph, GraphError};
use crate::model::{inv_logit, time_covariates, ChainState, ModelError, ETA_CLAMP};

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("lattice needs at least 2 rows and 2 columns, got {rows}x{cols}")]
    TooSmall { rows: usize, cols: usize },
    #[error("precision matrix factorization failed")]
    FactorizationFailure,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Ids for lattice nodes: five-digit, row-major, starting at `00001`, so that
/// lexicographic and numeric order agree.
pub fn lattice_id(index: usize) -> String {
    format!("{:05}", index + 1)
}

/// Four-neighbor `rows x cols` grid.
pub fn lattice_graph(rows: usize, cols: usize) -> Result<CountyGraph, SyntheticError> {
    if rows < 2 || cols < 2 {
        return Err(SyntheticError::TooSmall { rows, cols });
    }
    let ids: Vec<String> = (0..rows * cols).map(lattice_id).collect();
    let mut edges = Vec::with_capacity(2 * rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if c + 1 < cols {
                edges.push((ids[i].clone(), ids[i + 1].clone()));
            }
            if r + 1 < rows {
                edges.push((ids[i].clone(), ids[i + cols].clone()));
            }
        }
    }
    Ok(build_graph(&ids, &edges)?)
}

/// Sparse CAR precision `(D - rho W) / tau2`.
pub fn car_precision(graph: &CountyGraph, rho: f64, tau2: f64) -> CscMatrix<f64> {
    let k = graph.len();
    let mut coo = CooMatrix::new(k, k);
    for i in 0..k {
        coo.push(i, i, graph.degree(i) as f64 / tau2);
    }
    for &(i, j) in graph.edges() {
        coo.push(i, j, -rho / tau2);
        coo.push(j, i, -rho / tau2);
    }
    CscMatrix::from(&coo)
}

/// Exact draw from `N(0, tau2 (D - rho W)^{-1})`: with `Q = L L'`, solves
/// `L' x = z` for standard normal `z`.
pub fn sample_car<R: Rng + ?Sized>(
    graph: &CountyGraph,
    rho: f64,
    tau2: f64,
    rng: &mut R,
) -> Result<Vec<f64>, SyntheticError> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(SyntheticError::InvalidParameter(format!("rho = {rho} outside (0, 1)")));
    }
    if !(tau2 > 0.0 && tau2.is_finite()) {
        return Err(SyntheticError::InvalidParameter(format!("tau2 = {tau2} must be positive")));
    }
    let chol = CscCholesky::factor(&car_precision(graph, rho, tau2))
        .map_err(|_| SyntheticError::FactorizationFailure)?;
    let mut x = DVector::from_iterator(
        graph.len(),
        (0..graph.len()).map(|_| StandardNormal.sample(rng)),
    );
    spsolve_csc_lower_triangular(Op::Transpose(chol.l()), &mut x)
        .map_err(|_| SyntheticError::FactorizationFailure)?;
    Ok(x.iter().copied().collect())
}

/// Generative parameters. Effects left as `None` are drawn from their CAR
/// priors.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueParams {
    pub beta: Vec<f64>,
    pub alpha: f64,
    pub tau2_phi: f64,
    pub tau2_delta: f64,
    pub rho_int: f64,
    pub rho_slo: f64,
    pub phi: Option<Vec<f64>>,
    pub delta: Option<Vec<f64>>,
}

/// Draws death counts for a panel whose counties, years, exposures and design
/// are taken from `template`. Returns the simulated dataset and the realized
/// parameter values.
pub fn simulate_dataset<R: Rng + ?Sized>(
    graph: &CountyGraph,
    truth: &TrueParams,
    template: &StratumDataset,
    rng: &mut R,
) -> Result<(StratumDataset, ChainState), SyntheticError> {
    if !template.matches_graph(graph) {
        return Err(SyntheticError::Shape("template counties differ from graph".into()));
    }
    let p = template.n_covariates();
    if truth.beta.len() != p {
        return Err(SyntheticError::Shape(format!(
            "{} coefficients for {p} covariates",
            truth.beta.len()
        )));
    }
    let k_len = graph.len();
    let effect = |given: &Option<Vec<f64>>, rho, tau2, rng: &mut R| match given {
        Some(v) if v.len() == k_len => Ok(v.clone()),
        Some(v) => Err(SyntheticError::Shape(format!("{} effects for {k_len} counties", v.len()))),
        None => sample_car(graph, rho, tau2, rng),
    };
    let phi = effect(&truth.phi, truth.rho_int, truth.tau2_phi, rng)?;
    let delta = effect(&truth.delta, truth.rho_slo, truth.tau2_delta, rng)?;
    let state = ChainState {
        beta: truth.beta.clone(),
        alpha: truth.alpha,
        phi,
        delta,
        tau2_phi: truth.tau2_phi,
        tau2_delta: truth.tau2_delta,
        rho_int: truth.rho_int,
        rho_slo: truth.rho_slo,
    };
    state.validate(p, k_len)?;

    let t_len = template.n_years();
    let time = time_covariates(t_len);
    let mut deaths = Vec::with_capacity(k_len * t_len);
    for k in 0..k_len {
        for (t, s) in time.iter().enumerate() {
            let xb: f64 = template.row(k, t).iter().zip(&state.beta).map(|(x, b)| x * b).sum();
            let eta = xb + state.phi[k] + (state.alpha + state.delta[k]) * s;
            let theta = inv_logit(eta.clamp(-ETA_CLAMP, ETA_CLAMP));
            let m = template.exposure()[template.cell(k, t)];
            let y = if m == 0 {
                0
            } else {
                Binomial::new(m, theta)
                    .map_err(|e| SyntheticError::InvalidParameter(e.to_string()))?
                    .sample(rng)
            };
            deaths.push(y);
        }
    }
    Ok((template.with_deaths(deaths)?, state))
}

/// Lattice recovery scenario with one standard-normal covariate per cell.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoveryScenario {
    pub rows: usize,
    pub cols: usize,
    pub first_year: i32,
    pub n_years: usize,
    pub exposure_min: f64,
    pub exposure_max: f64,
    pub beta: Vec<f64>,
    pub alpha: f64,
    pub tau2_phi: f64,
    pub tau2_delta: f64,
    pub rho_int: f64,
    pub rho_slo: f64,
}

impl Default for RecoveryScenario {
    fn default() -> Self {
        Self {
            rows: 20,
            cols: 20,
            first_year: 2010,
            n_years: 14,
            exposure_min: 500.0,
            exposure_max: 50_000.0,
            beta: vec![-6.0, 0.5],
            alpha: 0.3,
            tau2_phi: 0.5,
            tau2_delta: 0.25,
            rho_int: 0.9,
            rho_slo: 0.5,
        }
    }
}

/// A simulated panel together with its ground truth.
#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub graph: CountyGraph,
    pub dataset: StratumDataset,
    pub truth: ChainState,
}

/// RNG for replicate `replicate` of a scenario seeded with `seed`.
pub fn replicate_rng(seed: u64, replicate: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

fn log_uniform<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> u64 {
    let u: f64 = rng.random();
    (lo.ln() + u * (hi.ln() - lo.ln())).exp().round() as u64
}

impl RecoveryScenario {
    pub fn true_params(&self) -> TrueParams {
        TrueParams {
            beta: self.beta.clone(),
            alpha: self.alpha,
            tau2_phi: self.tau2_phi,
            tau2_delta: self.tau2_delta,
            rho_int: self.rho_int,
            rho_slo: self.rho_slo,
            phi: None,
            delta: None,
        }
    }

    pub fn years(&self) -> Vec<i32> {
        (0..self.n_years as i32).map(|t| self.first_year + t).collect()
    }

    /// Draws exposures (log-uniform), the covariates, both effect vectors and
    /// the death counts.
    pub fn simulate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SimulatedPanel, SyntheticError> {
        let graph = lattice_graph(self.rows, self.cols)?;
        let cells = graph.len() * self.n_years;
        let p = self.beta.len();
        if p == 0 {
            return Err(SyntheticError::Shape("need an intercept coefficient".into()));
        }
        let exposure: Vec<u64> = (0..cells)
            .map(|_| log_uniform(self.exposure_min, self.exposure_max, rng))
            .collect();
        let mut design = Vec::with_capacity(cells * p);
        for _ in 0..cells {
            design.push(1.0);
            for _ in 1..p {
                design.push(StandardNormal.sample(rng));
            }
        }
        let mut names = vec![INTERCEPT.to_string()];
        names.extend((1..p).map(|j| format!("x{j}")));
        let template = StratumDataset::new(
            None,
            graph.ids().to_vec(),
            self.years(),
            vec![0; cells],
            exposure,
            design,
            names,
            vec![None; p],
        )?;
        let (dataset, truth) = simulate_dataset(&graph, &self.true_params(), &template, rng)?;
        Ok(SimulatedPanel {
            graph,
            dataset,
            truth,
        })
    }
}

/// A simulated study in the on-disk input formats: panel rows for every
/// stratum, screening records whose rate is the model covariate, and per
/// stratum the design built from them by the regular pipeline.
#[derive(Debug, Clone)]
pub struct SimulatedStudy {
    pub graph: CountyGraph,
    pub kind: ModelKind,
    pub rows: Vec<PanelRow>,
    pub screens: Vec<ScreenRecord>,
    pub strata: Vec<SimulatedStratum>,
}

#[derive(Debug, Clone)]
pub struct SimulatedStratum {
    pub stratum: StratumKey,
    pub dataset: StratumDataset,
    pub truth: ChainState,
}

/// Screening totals per county-year in [`simulate_study`].
pub const SCREEN_TOTALS: i64 = 1000;

/// Simulates a study on the scenario's lattice using a positive screening
/// rate for `instrument` as the covariate. The screens are shared by all
/// strata; exposures, effects and deaths are drawn per stratum.
pub fn simulate_study<R: Rng + ?Sized>(
    scenario: &RecoveryScenario,
    strata: &[StratumKey],
    instrument: Instrument,
    rng: &mut R,
) -> Result<SimulatedStudy, SyntheticError> {
    if scenario.beta.len() != 2 {
        return Err(SyntheticError::Shape("a screening-rate study has two coefficients".into()));
    }
    if strata.is_empty() {
        return Err(SyntheticError::Shape("no strata to simulate".into()));
    }
    let graph = lattice_graph(scenario.rows, scenario.cols)?;
    let years = scenario.years();
    let mut screens = Vec::with_capacity(graph.len() * years.len());
    for id in graph.ids() {
        let base: f64 = rng.random_range(0.03..0.15);
        for &year in &years {
            let rate = (base + rng.random_range(-0.01..0.01)).clamp(0.01, 0.5);
            let positives = Binomial::new(SCREEN_TOTALS as u64, rate)
                .map_err(|e| SyntheticError::InvalidParameter(e.to_string()))?
                .sample(rng);
            screens.push(ScreenRecord {
                county: id.clone(),
                year,
                instrument,
                positives: Some(positives as i64),
                totals: Some(SCREEN_TOTALS),
            });
        }
    }

    let kind = ModelKind::MentalHealth(instrument);
    let mut all_rows = Vec::with_capacity(graph.len() * years.len() * strata.len());
    let mut fits = Vec::with_capacity(strata.len());
    for &stratum in strata {
        let mut rows = Vec::with_capacity(graph.len() * years.len());
        for id in graph.ids() {
            for &year in &years {
                rows.push(PanelRow {
                    county: id.clone(),
                    year,
                    age_group: stratum.age_group,
                    sex: stratum.sex,
                    deaths: 0,
                    population: log_uniform(scenario.exposure_min, scenario.exposure_max, rng),
                });
            }
        }
        let sources = DataSources {
            graph: &graph,
            panel: &rows,
            screens: &screens,
            covariates: &[],
            state_covariates: &[],
        };
        let template = build_design_matrix(&sources, kind, stratum, &DesignOptions::default())?;
        let (dataset, truth) = simulate_dataset(&graph, &scenario.true_params(), &template, rng)?;
        for (row, &y) in rows.iter_mut().zip(dataset.deaths()) {
            row.deaths = y;
        }
        all_rows.extend(rows);
        fits.push(SimulatedStratum {
            stratum,
            dataset,
            truth,
        });
    }
    Ok(SimulatedStudy {
        graph,
        kind,
        rows: all_rows,
        screens,
        strata: fits,
    })
}

/// Writes `parameter,value` using the draw-file column names.
pub fn write_truth(
    path: &Path,
    truth: &ChainState,
    covariate_names: &[String],
    county_ids: &[String],
) -> Result<(), SyntheticError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "parameter,value")?;
    for (n, b) in covariate_names.iter().zip(&truth.beta) {
        writeln!(out, "beta.{n},{b}")?;
    }
    writeln!(out, "alpha,{}", truth.alpha)?;
    writeln!(out, "tau2_phi,{}", truth.tau2_phi)?;
    writeln!(out, "tau2_delta,{}", truth.tau2_delta)?;
    writeln!(out, "rho_int,{}", truth.rho_int)?;
    writeln!(out, "rho_slo,{}", truth.rho_slo)?;
    for (id, v) in county_ids.iter().zip(&truth.phi) {
        writeln!(out, "phi.{id},{v}")?;
    }
    for (id, v) in county_ids.iter().zip(&truth.delta) {
        writeln!(out, "delta.{id},{v}")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_sizes() {
        let g = lattice_graph(2, 2).unwrap();
        assert_eq!((g.len(), g.edges().len()), (4, 4));
        let g = lattice_graph(3, 3).unwrap();
        assert_eq!((g.len(), g.edges().len()), (9, 12));
        assert_eq!(g.degree(4), 4);
        assert_eq!(g.degree(0), 2);
        assert!(matches!(lattice_graph(1, 5), Err(SyntheticError::TooSmall { .. })));
    }

    #[test]
    fn tiny_variance_gives_near_zero() {
        let g = lattice_graph(3, 4).unwrap();
        let mut rng = replicate_rng(1, 0);
        let v = sample_car(&g, 0.7, 1e-12, &mut rng).unwrap();
        assert!(v.iter().all(|x| x.abs() < 1e-4));
    }

    #[test]
    fn default_scenario_is_reproducible() {
        let s = RecoveryScenario {
            rows: 4,
            cols: 5,
            ..RecoveryScenario::default()
        };
        let a = s.simulate(&mut replicate_rng(9, 2)).unwrap();
        let b = s.simulate(&mut replicate_rng(9, 2)).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.truth, b.truth);
        assert!(a
            .dataset
            .deaths()
            .iter()
            .zip(a.dataset.exposure())
            .all(|(y, m)| y <= m));
    }
}
