use std::path::Path;

use carmort::data::{write_counts, write_screens};
use carmort::graph::write_edge_list;
use carmort::synthetic::{replicate_rng, simulate_study, write_truth};

use crate::config::{parse_strata, Inputs, MergeMode, ModelConfig, RunConfig, SimulateConfig};
use crate::error::{write_err, CliError};
use crate::manifest::{stratum_dir, write_toml, SimulateManifest, FORMAT_VERSION};
use crate::Overrides;

/// Writes `adjacency.csv`, `counts.csv`, `screens.csv`, `truth/<stratum>.csv`,
/// a ready-to-run `fit.toml` and `manifest.toml` into the output directory.
pub fn cmd_simulate(config: Option<&Path>, overrides: &Overrides) -> Result<(), CliError> {
    let c = SimulateConfig::load(config, overrides)?;
    let strata = parse_strata(&c.strata)?;
    let study = simulate_study(&c.scenario, &strata, c.instrument, &mut replicate_rng(c.seed, 0))?;

    let out = &c.out;
    std::fs::create_dir_all(out.join("truth")).map_err(write_err(out))?;
    write_edge_list(&out.join("adjacency.csv"), &study.graph)?;
    write_counts(&out.join("counts.csv"), &study.rows)?;
    write_screens(&out.join("screens.csv"), &study.screens)?;
    let mut files = vec!["adjacency.csv".to_string(), "counts.csv".into(), "screens.csv".into()];
    for s in &study.strata {
        let name = format!("truth/{}.csv", stratum_dir(s.stratum));
        write_truth(
            &out.join(&name),
            &s.truth,
            s.dataset.covariate_names(),
            s.dataset.county_ids(),
        )?;
        files.push(name);
    }

    let fit = RunConfig {
        out: "fit".into(),
        jobs: None,
        strata: strata.iter().map(ToString::to_string).collect(),
        inputs: Inputs {
            adjacency: "adjacency.csv".into(),
            counts: "counts.csv".into(),
            screens: Some("screens.csv".into()),
            covariates: None,
            state_covariates: None,
            fips_2023: false,
            merge_map: None,
            low_population_merge: MergeMode::None,
        },
        model: ModelConfig {
            kind: "mental_health".into(),
            instrument: Some(c.instrument),
            standardize: true,
            years: None,
        },
        sampler: c.sampler.clone(),
        priors: c.priors,
        diagnostics: c.diagnostics.clone(),
    };
    write_toml(&out.join("fit.toml"), &fit)?;
    files.push("fit.toml".into());

    write_toml(
        &out.join("manifest.toml"),
        &SimulateManifest {
            format_version: FORMAT_VERSION,
            carmort_version: env!("CARGO_PKG_VERSION"),
            command: "simulate",
            seed: c.seed,
            files,
            config: &c,
        },
    )?;
    println!(
        "simulated {} strata on a {}x{} lattice, {} years, into {}",
        strata.len(),
        c.scenario.rows,
        c.scenario.cols,
        c.scenario.n_years,
        out.display()
    );
    Ok(())
}
