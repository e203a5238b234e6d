use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use carmort::data::{
    build_design_matrix, merge_screens, read_counts, read_covariates, read_screens,
    read_state_covariates, write_dataset, write_standardization, CovariateRecord, DataSources,
    DesignOptions, PanelRow, ScreenRecord, StratumDataset, StratumKey,
};
use carmort::diagnostics::convergence_report;
use carmort::draws::write_draws;
use carmort::graph::{apply_merge, merge_low_population, read_adjacency, read_merge_map, CountyGraph, MergeMap};
use carmort::sampler::{run_chain, EffectDraws};
use carmort::summary::{county_effects, raw_scale_summary, summarize};

use crate::config::{parse_strata, MergeMode, RunConfig};
use crate::error::{write_err, CliError};
use crate::manifest::{stratum_dir, write_toml, FitManifest, FORMAT_VERSION};

struct Inputs {
    graph: CountyGraph,
    rows: Vec<PanelRow>,
    screens: Vec<ScreenRecord>,
    covariates: Vec<CovariateRecord>,
    state_covariates: Vec<CovariateRecord>,
    merges: Vec<(String, String)>,
}

fn merge(inputs: &mut Inputs, map: &MergeMap) -> Result<(), CliError> {
    let (graph, rows) = apply_merge(&inputs.graph, &inputs.rows, map)?;
    inputs.screens = merge_screens(&inputs.screens, map);
    inputs
        .merges
        .extend(map.iter().filter(|(a, _)| inputs.graph.index_of(a).is_some()).map(|(a, b)| (a.to_string(), b.to_string())));
    inputs.graph = graph;
    inputs.rows = rows;
    Ok(())
}

fn load_inputs(c: &RunConfig) -> Result<Inputs, CliError> {
    let i = &c.inputs;
    let mut inputs = Inputs {
        graph: read_adjacency(&i.adjacency)?,
        rows: read_counts(&i.counts)?,
        screens: i.screens.as_deref().map(read_screens).transpose()?.unwrap_or_default(),
        covariates: i.covariates.as_deref().map(read_covariates).transpose()?.unwrap_or_default(),
        state_covariates: i
            .state_covariates
            .as_deref()
            .map(read_state_covariates)
            .transpose()?
            .unwrap_or_default(),
        merges: Vec::new(),
    };
    if i.fips_2023 {
        merge(&mut inputs, &MergeMap::fips_2023())?;
    }
    if let Some(path) = &i.merge_map {
        merge(&mut inputs, &read_merge_map(path)?)?;
    }
    if i.low_population_merge != MergeMode::None {
        let iterative = i.low_population_merge == MergeMode::Iterative;
        let (graph, rows, map) = merge_low_population(&inputs.graph, &inputs.rows, iterative)?;
        inputs.screens = merge_screens(&inputs.screens, &map);
        inputs.merges.extend(map.iter().map(|(a, b)| (a.to_string(), b.to_string())));
        inputs.graph = graph;
        inputs.rows = rows;
    }
    Ok(inputs)
}

struct Outcome {
    stratum: StratumKey,
    report: String,
    converged: bool,
}

fn fit_stratum(
    c: &RunConfig,
    graph: &CountyGraph,
    stratum: StratumKey,
    data: &StratumDataset,
) -> Result<Outcome, CliError> {
    let label = stratum.to_string();
    let mut sampler = c.sampler.clone();
    sampler.stream = stratum.id();
    let start = Instant::now();
    let draws = run_chain(data, graph, &c.priors, &sampler).map_err(|source| CliError::Sampler {
        stratum: label.clone(),
        source,
    })?;
    let wall = start.elapsed().as_secs_f64();

    let dir = c.out.join(stratum_dir(stratum));
    std::fs::create_dir_all(&dir).map_err(write_err(&dir))?;
    write_draws(&dir.join("draws.csv"), &draws)?;
    let mut table = summarize(&draws)?;
    table.rows.extend(raw_scale_summary(&draws, data.standardization())?.rows);
    table.write_csv(&dir.join("summary.csv"))?;
    if matches!(draws.phi, EffectDraws::Full(_)) {
        county_effects(&draws, graph)?.write_csv(&dir.join("county_effects.csv"))?;
    } else {
        eprintln!("carmort: {label}: county effects not stored, county_effects.csv skipped");
    }
    let report = convergence_report(&draws, &c.diagnostics)?;
    report.write_csv(&dir.join("convergence.csv"))?;
    write_standardization(&dir.join("standardization.csv"), data)?;
    write_dataset(&dir.join("dataset.csv"), data)?;

    let echo = RunConfig {
        strata: vec![label.clone()],
        ..c.clone()
    };
    let acceptance = draws
        .run
        .as_ref()
        .map(|r| r.acceptance.blocks().iter().map(|(n, a)| (n.to_string(), a.rate())).collect())
        .unwrap_or_default();
    write_toml(
        &dir.join("manifest.toml"),
        &FitManifest {
            format_version: FORMAT_VERSION,
            carmort_version: env!("CARGO_PKG_VERSION").into(),
            command: "fit".into(),
            stratum: label.clone(),
            seed: sampler.seed,
            stream: sampler.stream,
            wall_time_seconds: wall,
            converged: report.pass(),
            failed_parameters: report.failures().map(|p| p.name.clone()).collect(),
            draws: draws.len(),
            acceptance,
            config: echo,
        },
    )?;
    Ok(Outcome {
        stratum,
        report: report.to_string(),
        converged: report.pass(),
    })
}

fn write_merges(path: &Path, merges: &[(String, String)]) -> Result<(), CliError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(write_err(path))?);
    let mut body = String::from("original,adjusted\n");
    for (a, b) in merges {
        body.push_str(&format!("{a},{b}\n"));
    }
    out.write_all(body.as_bytes()).map_err(write_err(path))?;
    out.flush().map_err(write_err(path))
}

/// Builds every selected stratum's dataset up front (so input errors surface
/// before any chain runs), then fits the strata on up to `jobs` threads.
pub fn cmd_fit(c: &RunConfig) -> Result<(), CliError> {
    let inputs = load_inputs(c)?;
    let strata = if c.strata.is_empty() {
        inputs.rows.iter().map(PanelRow::stratum).collect::<BTreeSet<_>>().into_iter().collect()
    } else {
        parse_strata(&c.strata)?
    };
    if strata.is_empty() {
        return Err(CliError::Invalid("no strata selected".into()));
    }
    let kind = c.model.model_kind()?;
    let options = DesignOptions {
        standardize: c.model.standardize,
        years: c.model.years.clone(),
    };
    let sources = DataSources {
        graph: &inputs.graph,
        panel: &inputs.rows,
        screens: &inputs.screens,
        covariates: &inputs.covariates,
        state_covariates: &inputs.state_covariates,
    };
    let datasets: Vec<(StratumKey, StratumDataset)> = strata
        .iter()
        .map(|&s| {
            build_design_matrix(&sources, kind, s, &options)
                .map(|d| (s, d))
                .map_err(|e| CliError::Invalid(format!("stratum {s}: {e}")))
        })
        .collect::<Result<_, _>>()?;

    std::fs::create_dir_all(&c.out).map_err(write_err(&c.out))?;
    write_toml(&c.out.join("config.toml"), c)?;
    if !inputs.merges.is_empty() {
        write_merges(&c.out.join("merges.csv"), &inputs.merges)?;
    }

    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let jobs = c.jobs.unwrap_or(cores).clamp(1, datasets.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Outcome, CliError>>>> =
        Mutex::new((0..datasets.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((s, d)) = datasets.get(i) else { break };
                let r = fit_stratum(c, &inputs.graph, *s, d);
                results.lock().expect("no worker panicked holding the lock")[i] = Some(r);
            });
        }
    });

    let mut failed = Vec::new();
    let mut first_error = None;
    for r in results.into_inner().expect("workers joined") {
        match r.expect("every stratum was attempted") {
            Ok(o) => {
                println!("== stratum {} ==\n{}", o.stratum, o.report);
                if !o.converged {
                    failed.push(o.stratum.to_string());
                }
            }
            Err(e) => {
                eprintln!("carmort: {e}");
                first_error.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_error {
        return Err(e);
    }
    if !failed.is_empty() {
        return Err(CliError::NotConverged(failed.join(", ")));
    }
    Ok(())
}
