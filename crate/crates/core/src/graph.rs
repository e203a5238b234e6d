//! County adjacency graphs: validation, FIPS merging and the spectral data
//! behind CAR log-determinants.
//!
//! The CAR precision used throughout the crate is `D - rho * W`, where `W` is
//! the 0/1 adjacency matrix and `D` the diagonal of neighbor counts. With
//! `lambda_i` the eigenvalues of `D^{-1/2} W D^{-1/2}`,
//!
//! ```text
//! log det(D - rho W) = sum_k log d_k + sum_i log(1 - rho * lambda_i)
//! ```
//!
//! so one eigen-decomposition per graph makes every later log-determinant an
//! O(K) sum.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::data::{PanelRow, StratumKey};
use crate::fips::FIPS_2023_ADJUSTMENTS;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("duplicate county id {0}")]
    DuplicateId(String),
    #[error("edge endpoint {0} is not a listed county")]
    UnknownEndpoint(String),
    #[error("self-loop on county {0}")]
    SelfLoop(String),
    #[error("county {0} has no neighbors")]
    IsolatedCounty(String),
    #[error("graph has {components} connected components; county {example} is outside the first")]
    DisconnectedGraph { components: usize, example: String },
    #[error("unknown county {0}")]
    UnknownCounty(String),
    #[error("merge leaves county {0} without neighbors")]
    MergeCreatesIsolation(String),
    #[error("invalid merge map: {0}")]
    InvalidMergeMap(String),
    #[error("rho must lie strictly inside (0, 1), got {0}")]
    RhoOutOfRange(f64),
    #[error("spectral cache: {0}")]
    SpectralCache(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Symmetric, connected county adjacency with no isolated nodes.
///
/// Immutable once built; share it across chains behind an `Arc` or a plain
/// reference.
#[derive(Debug, Clone)]
pub struct CountyGraph {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    neighbors: Vec<Vec<usize>>,
    edges: Vec<(usize, usize)>,
    log_degree_sum: f64,
    spectrum: OnceLock<Vec<f64>>,
}

/// Builds and validates a graph, then fills the spectral cache.
///
/// Duplicate edges (in either orientation) collapse to one.
pub fn build_graph<S, T>(ids: &[S], edges: &[(T, T)]) -> Result<CountyGraph, GraphError>
where
    S: AsRef<str>,
    T: AsRef<str>,
{
    let graph = CountyGraph::assemble(ids, edges)?;
    graph.spectrum();
    Ok(graph)
}

impl CountyGraph {
    /// Validates structure without computing the spectrum.
    fn assemble<S, T>(ids: &[S], edges: &[(T, T)]) -> Result<Self, GraphError>
    where
        S: AsRef<str>,
        T: AsRef<str>,
    {
        let mut index = HashMap::with_capacity(ids.len());
        let mut owned = Vec::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            let id = id.as_ref().to_string();
            if index.insert(id.clone(), i).is_some() {
                return Err(GraphError::DuplicateId(id));
            }
            owned.push(id);
        }

        let mut edge_set = BTreeSet::new();
        for (a, b) in edges {
            let (a, b) = (a.as_ref(), b.as_ref());
            let ia = *index
                .get(a)
                .ok_or_else(|| GraphError::UnknownEndpoint(a.to_string()))?;
            let ib = *index
                .get(b)
                .ok_or_else(|| GraphError::UnknownEndpoint(b.to_string()))?;
            if ia == ib {
                return Err(GraphError::SelfLoop(a.to_string()));
            }
            edge_set.insert((ia.min(ib), ia.max(ib)));
        }

        let mut neighbors = vec![Vec::new(); owned.len()];
        for &(i, j) in &edge_set {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        if let Some(k) = neighbors.iter().position(Vec::is_empty) {
            return Err(GraphError::IsolatedCounty(owned[k].clone()));
        }

        let graph = Self {
            log_degree_sum: neighbors.iter().map(|n| (n.len() as f64).ln()).sum(),
            ids: owned,
            index,
            neighbors,
            edges: edge_set.into_iter().collect(),
            spectrum: OnceLock::new(),
        };
        graph.check_connected()?;
        Ok(graph)
    }

    fn check_connected(&self) -> Result<(), GraphError> {
        let n = self.len();
        let mut component = vec![usize::MAX; n];
        let mut count = 0;
        for start in 0..n {
            if component[start] != usize::MAX {
                continue;
            }
            let mut queue = VecDeque::from([start]);
            component[start] = count;
            while let Some(v) = queue.pop_front() {
                for &u in &self.neighbors[v] {
                    if component[u] == usize::MAX {
                        component[u] = count;
                        queue.push_back(u);
                    }
                }
            }
            count += 1;
        }
        if count > 1 {
            let stray = component.iter().position(|&c| c != 0).unwrap_or(0);
            return Err(GraphError::DisconnectedGraph {
                components: count,
                example: self.ids[stray].clone(),
            });
        }
        Ok(())
    }

    /// Attaches a previously persisted spectrum instead of recomputing it.
    pub fn with_spectrum(self, spectrum: Vec<f64>) -> Result<Self, GraphError> {
        if spectrum.len() != self.len() {
            return Err(GraphError::SpectralCache(format!(
                "expected {} eigenvalues, found {}",
                self.len(),
                spectrum.len()
            )));
        }
        if let Some(bad) = spectrum
            .iter()
            .find(|l| !l.is_finite() || l.abs() > 1.0 + 1e-9)
        {
            return Err(GraphError::SpectralCache(format!(
                "eigenvalue {bad} outside [-1, 1]"
            )));
        }
        let trace: f64 = spectrum.iter().sum();
        if trace.abs() > 1e-8 * self.len() as f64 {
            return Err(GraphError::SpectralCache(format!(
                "eigenvalues sum to {trace}, expected 0"
            )));
        }
        let cell = OnceLock::new();
        let _ = cell.set(spectrum.into_iter().map(|l| l.clamp(-1.0, 1.0)).collect());
        Ok(Self {
            spectrum: cell,
            ..self
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn neighbors(&self, k: usize) -> &[usize] {
        &self.neighbors[k]
    }

    pub fn degree(&self, k: usize) -> usize {
        self.neighbors[k].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    /// Undirected edges as `(i, j)` index pairs with `i < j`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Eigenvalues of `D^{-1/2} W D^{-1/2}`, ascending, each in `[-1, 1]`.
    pub fn spectrum(&self) -> &[f64] {
        self.spectrum.get_or_init(|| self.compute_spectrum())
    }

    fn compute_spectrum(&self) -> Vec<f64> {
        let n = self.len();
        let inv_sqrt: Vec<f64> = self
            .neighbors
            .iter()
            .map(|nb| 1.0 / (nb.len() as f64).sqrt())
            .collect();
        let mut m = DMatrix::<f64>::zeros(n, n);
        for &(i, j) in &self.edges {
            let w = inv_sqrt[i] * inv_sqrt[j];
            m[(i, j)] = w;
            m[(j, i)] = w;
        }
        let mut values: Vec<f64> = SymmetricEigen::new(m)
            .eigenvalues
            .iter()
            .map(|l| l.clamp(-1.0, 1.0))
            .collect();
        values.sort_by(f64::total_cmp);
        values
    }

    /// `log det(D - rho W)` from the cached spectrum.
    pub fn logdet_precision(&self, rho: f64) -> Result<f64, GraphError> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(GraphError::RhoOutOfRange(rho));
        }
        let mut acc = self.log_degree_sum;
        for &lambda in self.spectrum() {
            let arg = 1.0 - rho * lambda;
            debug_assert!(arg > 0.0);
            acc += arg.ln();
        }
        Ok(acc)
    }

    /// Derivative of [`Self::logdet_precision`] with respect to `rho`.
    pub fn logdet_precision_grad(&self, rho: f64) -> Result<f64, GraphError> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(GraphError::RhoOutOfRange(rho));
        }
        Ok(self
            .spectrum()
            .iter()
            .map(|&l| -l / (1.0 - rho * l))
            .sum())
    }

    /// Sum of `values` over the neighbors of `k`.
    pub fn neighbor_sum(&self, k: usize, values: &[f64]) -> f64 {
        self.neighbors[k].iter().map(|&j| values[j]).sum()
    }
}

/// Returns the neighbor of `county` with the largest population, breaking ties
/// by the lexicographically smallest id.
///
/// `populations` is aligned with [`CountyGraph::ids`]; missing entries count as
/// zero.
pub fn select_merge_target(
    graph: &CountyGraph,
    populations: &[u64],
    county: &str,
) -> Result<String, GraphError> {
    let k = graph
        .index_of(county)
        .ok_or_else(|| GraphError::UnknownCounty(county.to_string()))?;
    let pop = |j: usize| populations.get(j).copied().unwrap_or(0);
    let best = graph.neighbors(k).iter().copied().reduce(|best, j| {
        let (pb, pj) = (pop(best), pop(j));
        if pj > pb || (pj == pb && graph.ids[j] < graph.ids[best]) {
            j
        } else {
            best
        }
    });
    // Graphs never contain isolated counties, so `best` is always set.
    best.map(|j| graph.ids[j].clone())
        .ok_or_else(|| GraphError::IsolatedCounty(county.to_string()))
}

/// Original → adjusted county ids, stored after transitive closure.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeMap {
    entries: BTreeMap<String, String>,
}

impl MergeMap {
    /// Validates the pairs and resolves chains such as `a → b, b → c` to
    /// `a → c, b → c`.
    pub fn new<I, A, B>(pairs: I) -> Result<Self, GraphError>
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        let mut raw: BTreeMap<String, String> = BTreeMap::new();
        for (a, b) in pairs {
            let (a, b) = (a.into(), b.into());
            if a == b {
                continue;
            }
            match raw.get(&a) {
                Some(prev) if *prev != b => {
                    return Err(GraphError::InvalidMergeMap(format!(
                        "{a} maps to both {prev} and {b}"
                    )))
                }
                _ => {
                    raw.insert(a, b);
                }
            }
        }

        let mut entries = BTreeMap::new();
        for original in raw.keys() {
            let mut current = original;
            let mut steps = 0;
            while let Some(next) = raw.get(current) {
                current = next;
                steps += 1;
                if steps > raw.len() {
                    return Err(GraphError::InvalidMergeMap(format!(
                        "cycle through {original}"
                    )));
                }
            }
            entries.insert(original.clone(), current.clone());
        }
        Ok(Self { entries })
    }

    /// The county standardization table for 2023 boundaries.
    pub fn fips_2023() -> Self {
        Self::new(FIPS_2023_ADJUSTMENTS.iter().copied())
            .expect("built-in FIPS table is acyclic")
    }

    /// Final id for `id` (itself when unmapped).
    pub fn resolve<'a>(&'a self, id: &'a str) -> &'a str {
        self.entries.get(id).map_or(id, String::as_str)
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.entries.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }
}

/// Collapses merged counties into their targets.
///
/// Each target keeps its own neighbors plus those of every county merged into
/// it; deaths and exposures are summed per `(county, year, stratum)` key. Map
/// entries whose original is not in the graph are ignored, which makes
/// repeated application a no-op. Output rows are sorted by key.
pub fn apply_merge(
    graph: &CountyGraph,
    rows: &[PanelRow],
    map: &MergeMap,
) -> Result<(CountyGraph, Vec<PanelRow>), GraphError> {
    for id in graph.ids() {
        let target = map.resolve(id);
        if target != id && graph.index_of(target).is_none() {
            return Err(GraphError::UnknownCounty(target.to_string()));
        }
    }

    let kept: Vec<&str> = graph
        .ids()
        .iter()
        .map(String::as_str)
        .filter(|id| map.resolve(id) == *id)
        .collect();
    let edges: Vec<(&str, &str)> = graph
        .edges()
        .iter()
        .map(|&(i, j)| (map.resolve(&graph.ids[i]), map.resolve(&graph.ids[j])))
        .filter(|(a, b)| a != b)
        .collect();

    let merged = CountyGraph::assemble(&kept, &edges).map_err(|e| match e {
        GraphError::IsolatedCounty(c) => GraphError::MergeCreatesIsolation(c),
        other => other,
    })?;

    Ok((merged, merge_rows(rows, map)))
}

fn merge_rows(rows: &[PanelRow], map: &MergeMap) -> Vec<PanelRow> {
    let mut cells: BTreeMap<(String, i32, StratumKey), (u64, u64)> = BTreeMap::new();
    for row in rows {
        let key = (
            map.resolve(&row.county).to_string(),
            row.year,
            row.stratum(),
        );
        let cell = cells.entry(key).or_insert((0, 0));
        cell.0 += row.deaths;
        cell.1 += row.population;
    }
    cells
        .into_iter()
        .map(|((county, year, stratum), (deaths, population))| PanelRow {
            county,
            year,
            age_group: stratum.age_group,
            sex: stratum.sex,
            deaths,
            population,
        })
        .collect()
}

/// Merges counties whose panel has a zero (or missing) population, or more
/// deaths than population, for any year and stratum present in `rows`, into
/// their most populous neighbor.
///
/// Counties are processed one at a time in id order. With `iterative` set the
/// check is repeated on the merged data until nothing is flagged; otherwise
/// only the initially flagged counties are merged. Returns the merged graph,
/// the merged rows and the merges performed (closed under chaining).
pub fn merge_low_population(
    graph: &CountyGraph,
    rows: &[PanelRow],
    iterative: bool,
) -> Result<(CountyGraph, Vec<PanelRow>, MergeMap), GraphError> {
    for row in rows {
        if graph.index_of(&row.county).is_none() {
            return Err(GraphError::UnknownCounty(row.county.clone()));
        }
    }
    let mut graph = graph.clone();
    let mut rows = merge_rows(rows, &MergeMap::default());
    let mut performed: Vec<(String, String)> = Vec::new();

    let mut pending: VecDeque<String> = flagged_counties(&graph, &rows).into();
    while let Some(county) = pending.pop_front() {
        if graph.index_of(&county).is_none() {
            continue;
        }
        let populations = population_totals(&graph, &rows);
        let target = select_merge_target(&graph, &populations, &county)?;
        let single = MergeMap::new([(county.clone(), target.clone())])?;
        let (g, r) = apply_merge(&graph, &rows, &single)?;
        graph = g;
        rows = r;
        performed.push((county, target));
        if iterative && pending.is_empty() {
            pending = flagged_counties(&graph, &rows).into();
        }
    }

    Ok((graph, rows, MergeMap::new(performed)?))
}

fn flagged_counties(graph: &CountyGraph, rows: &[PanelRow]) -> Vec<String> {
    let years: BTreeSet<i32> = rows.iter().map(|r| r.year).collect();
    let strata: BTreeSet<StratumKey> = rows.iter().map(PanelRow::stratum).collect();
    let mut cells: HashMap<(usize, i32, StratumKey), (u64, u64)> = HashMap::new();
    for row in rows {
        if let Some(k) = graph.index_of(&row.county) {
            let cell = cells.entry((k, row.year, row.stratum())).or_insert((0, 0));
            cell.0 += row.deaths;
            cell.1 += row.population;
        }
    }
    (0..graph.len())
        .filter(|&k| {
            years.iter().any(|&y| {
                strata.iter().any(|&s| match cells.get(&(k, y, s)) {
                    Some(&(deaths, population)) => population == 0 || deaths > population,
                    None => true,
                })
            })
        })
        .map(|k| graph.ids[k].clone())
        .collect()
}

/// Total exposure per county over all rows, aligned with the graph ids.
pub fn population_totals(graph: &CountyGraph, rows: &[PanelRow]) -> Vec<u64> {
    let mut totals = vec![0u64; graph.len()];
    for row in rows {
        if let Some(k) = graph.index_of(&row.county) {
            totals[k] += row.population;
        }
    }
    totals
}

#[derive(serde::Deserialize)]
struct EdgeRecord {
    county_a: String,
    county_b: String,
}

#[derive(serde::Deserialize)]
struct MergeRecord {
    original: String,
    adjusted: String,
}

fn parse_error(path: &Path, err: &csv::Error) -> GraphError {
    GraphError::Parse {
        path: path.display().to_string(),
        line: err.position().map_or(0, |p| p.line()),
        message: err.to_string(),
    }
}

/// Builds a graph with a previously persisted spectrum, skipping the
/// eigen-decomposition.
pub fn build_graph_with_spectrum<S, T>(
    ids: &[S],
    edges: &[(T, T)],
    spectrum: Vec<f64>,
) -> Result<CountyGraph, GraphError>
where
    S: AsRef<str>,
    T: AsRef<str>,
{
    CountyGraph::assemble(ids, edges)?.with_spectrum(spectrum)
}

/// Reads an edge list with header `county_a,county_b`.
pub fn read_edge_list(path: &Path) -> Result<Vec<(String, String)>, GraphError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| parse_error(path, &e))?;
    reader
        .deserialize::<EdgeRecord>()
        .map(|rec| {
            rec.map(|r| (r.county_a.trim().to_string(), r.county_b.trim().to_string()))
                .map_err(|e| parse_error(path, &e))
        })
        .collect()
}

/// Builds a graph over every county named in an edge list file; ids are sorted.
pub fn read_adjacency(path: &Path) -> Result<CountyGraph, GraphError> {
    let edges = read_edge_list(path)?;
    let ids: BTreeSet<&str> = edges
        .iter()
        .flat_map(|(a, b)| [a.as_str(), b.as_str()])
        .collect();
    let ids: Vec<&str> = ids.into_iter().collect();
    CountyGraph::assemble(&ids, &edges)
}

pub fn write_edge_list(path: &Path, graph: &CountyGraph) -> Result<(), GraphError> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "county_a,county_b")?;
    for &(i, j) in graph.edges() {
        writeln!(out, "{},{}", graph.ids[i], graph.ids[j])?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a merge map with header `original,adjusted`.
pub fn read_merge_map(path: &Path) -> Result<MergeMap, GraphError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| parse_error(path, &e))?;
    let mut pairs = Vec::new();
    for rec in reader.deserialize::<MergeRecord>() {
        let rec = rec.map_err(|e| parse_error(path, &e))?;
        pairs.push((rec.original.trim().to_string(), rec.adjusted.trim().to_string()));
    }
    MergeMap::new(pairs)
}

const SPECTRUM_MAGIC: &[u8; 8] = b"CARSPEC1";

/// Persists a spectrum as `CARSPEC1`, the count as little-endian `u64`, then
/// each eigenvalue as little-endian IEEE-754 `f64`.
pub fn write_spectrum(path: &Path, spectrum: &[f64]) -> Result<(), GraphError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(SPECTRUM_MAGIC)?;
    out.write_all(&(spectrum.len() as u64).to_le_bytes())?;
    for value in spectrum {
        out.write_all(&value.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_spectrum(path: &Path) -> Result<Vec<f64>, GraphError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != SPECTRUM_MAGIC {
        return Err(GraphError::SpectralCache("missing CARSPEC1 header".into()));
    }
    let mut count = [0u8; 8];
    count.copy_from_slice(&bytes[8..16]);
    let count = u64::from_le_bytes(count) as usize;
    let body = &bytes[16..];
    if body.len() != count * 8 {
        return Err(GraphError::SpectralCache(format!(
            "header promises {count} values, body holds {} bytes",
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| {
            let mut b = [0u8; 8];
            b.copy_from_slice(c);
            f64::from_le_bytes(b)
        })
        .collect())
}
