//! Draw files: one CSV row per saved iteration, one column per parameter.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::sampler::{EffectDraws, PosteriorDraws};

const SCALARS: [&str; 5] = ["alpha", "tau2_phi", "tau2_delta", "rho_int", "rho_slo"];

#[derive(Debug, Error)]
pub enum DrawsError {
    #[error("{path}: bad header: {message}")]
    Header { path: PathBuf, message: String },
    #[error("{path}:{line}: field {field}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        field: usize,
        message: String,
    },
    #[error("{path}: no draws")]
    Empty { path: PathBuf },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Writes the draws with the header `beta.<covariate>...,alpha,tau2_phi,
/// tau2_delta,rho_int,rho_slo[,phi.<county>...,delta.<county>...]`. Values use
/// the shortest representation that round-trips, so equal draws give
/// byte-identical files.
pub fn write_draws(path: &Path, draws: &PosteriorDraws) -> Result<(), DrawsError> {
    let io = |source| DrawsError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    let columns = draws.columns();
    let header: Vec<&str> = columns.iter().map(|(n, _)| n.as_str()).collect();
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    let mut line = String::new();
    for s in 0..draws.len() {
        line.clear();
        for (j, (_, values)) in columns.iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&values[s].to_string());
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)?;
    Ok(())
}

/// Reads a file written by [`write_draws`]. County effects are returned in
/// full when their columns are present.
pub fn read_draws(path: &Path) -> Result<PosteriorDraws, DrawsError> {
    let io = |source| DrawsError::Io {
        path: path.to_path_buf(),
        source,
    };
    let header_err = |message: String| DrawsError::Header {
        path: path.to_path_buf(),
        message,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => h.map_err(io)?,
        None => return Err(header_err("file is empty".into())),
    };
    let names: Vec<&str> = header.split(',').map(str::trim).collect();

    let mut covariates = Vec::new();
    let mut idx = 0;
    while idx < names.len() {
        match names[idx].strip_prefix("beta.") {
            Some(c) => covariates.push(c.to_string()),
            None => break,
        }
        idx += 1;
    }
    for expected in SCALARS {
        if names.get(idx) != Some(&expected) {
            return Err(header_err(format!(
                "expected column {expected} at position {}",
                idx + 1
            )));
        }
        idx += 1;
    }
    let mut phi_ids = Vec::new();
    let mut delta_ids = Vec::new();
    for name in &names[idx..] {
        if let Some(id) = name.strip_prefix("phi.") {
            if !delta_ids.is_empty() {
                return Err(header_err(format!("{name} after delta columns")));
            }
            phi_ids.push(id.to_string());
        } else if let Some(id) = name.strip_prefix("delta.") {
            delta_ids.push(id.to_string());
        } else {
            return Err(header_err(format!("unexpected column {name}")));
        }
    }
    if phi_ids != delta_ids {
        return Err(header_err("phi and delta columns name different counties".into()));
    }

    let width = names.len();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); width];
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io)?;
        let line_no = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(DrawsError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                field: fields.len().min(width) + 1,
                message: format!("expected {width} fields, found {}", fields.len()),
            });
        }
        for (j, f) in fields.iter().enumerate() {
            let v: f64 = f.trim().parse().map_err(|_| DrawsError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                field: j + 1,
                message: format!("not a number: {f:?}"),
            })?;
            columns[j].push(v);
        }
    }
    if columns[0].is_empty() {
        return Err(DrawsError::Empty {
            path: path.to_path_buf(),
        });
    }

    let mut it = columns.into_iter();
    let beta: Vec<Vec<f64>> = it.by_ref().take(covariates.len()).collect();
    let mut next = || it.next().expect("column count checked against header");
    let alpha = next();
    let tau2_phi = next();
    let tau2_delta = next();
    let rho_int = next();
    let rho_slo = next();
    let rest: Vec<Vec<f64>> = it.collect();
    let (phi, delta) = if phi_ids.is_empty() {
        (
            EffectDraws::Moments {
                mean: Vec::new(),
                variance: Vec::new(),
            },
            EffectDraws::Moments {
                mean: Vec::new(),
                variance: Vec::new(),
            },
        )
    } else {
        let k = phi_ids.len();
        let mut rest = rest;
        let delta = rest.split_off(k);
        (EffectDraws::Full(rest), EffectDraws::Full(delta))
    };
    Ok(PosteriorDraws {
        covariate_names: covariates,
        county_ids: phi_ids,
        beta,
        alpha,
        tau2_phi,
        tau2_delta,
        rho_int,
        rho_slo,
        phi,
        delta,
        run: None,
    })
}
