//! End-to-end acceptance checks. Runs without the libtest harness and prints
//! one PASS/FAIL line per criterion; exits non-zero if any fails.

mod common;

use std::time::{Duration, Instant};

use carmort::data::{
    build_design_matrix, compute_psr, AgeGroup, CovariateRecord, DataSources, DesignOptions,
    ModelKind, PanelRow, ScreenRecord, Sex, StratumDataset, StratumKey, Instrument,
};
use carmort::diagnostics::{ess, geweke};
use carmort::draws::write_draws;
use carmort::graph::{apply_merge, build_graph, MergeMap};
use carmort::model::{car_logdensity, car_quadform, PriorConfig};
use carmort::sampler::{run_chain, tau2_conditional, update_tau2, AcceptanceStats, SamplerConfig};
use carmort::summary::{quantile_sorted, summarize};
use carmort::synthetic::{lattice_graph, replicate_rng, RecoveryScenario};
use common::*;
use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::gamma::gamma_ur;

const REPLICATES: u64 = 10;
const RECOVERY_BURN_IN: usize = 20_000;
const RECOVERY_SAMPLES: usize = 10_000;
const REPLICATE_TIME_LIMIT: Duration = Duration::from_secs(15 * 60);
const DENSE_TOL: f64 = 1e-8;
const KS_DRAWS: usize = 100_000;
const PRIOR_DRAWS: usize = 50_000;
const PRIOR_THIN: usize = 10;
const RHO_QUANTILE_TOL: f64 = 0.02;
const TAU2_QUANTILE_REL_TOL: f64 = 0.10;
const GEWEKE_CHAINS: u64 = 1000;
const GEWEKE_CHAIN_LEN: usize = 50_000;
const GEWEKE_RATE_TOL: f64 = 0.02;
const ESS_IID_TOL: f64 = 0.20;
const ESS_AR_TOL: f64 = 0.25;
const ACCEPT_BAND: (f64, f64) = (0.25, 0.55);

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, outcome: &Outcome) {
    println!(
        "criterion {id} {name}: {} ({})",
        if outcome.pass { "PASS" } else { "FAIL" },
        outcome.detail
    );
}

struct Replicate {
    covered: Vec<(&'static str, bool)>,
    elapsed: Duration,
    acceptance: AcceptanceStats,
    // rho intervals computed from the realized true effects that miss the truth
    oracle_misses: Vec<&'static str>,
}

fn recovery_replicate(r: u64) -> Replicate {
    let scenario = RecoveryScenario::default();
    let sim = scenario.simulate(&mut replicate_rng(20_240, r)).unwrap();
    let config = SamplerConfig {
        burn_in: RECOVERY_BURN_IN,
        samples: RECOVERY_SAMPLES,
        seed: 1 + r,
        stream: r,
        store_effects: false,
        ..SamplerConfig::default()
    };
    let start = Instant::now();
    let draws = run_chain(&sim.dataset, &sim.graph, &PriorConfig::default(), &config).unwrap();
    let elapsed = start.elapsed();
    let table = summarize(&draws).unwrap();
    let inside = |name: &str, truth: f64| table.get(name).unwrap().interval().contains(truth);
    let t = &sim.truth;
    let priors = PriorConfig::default();
    let mut oracle_misses = Vec::new();
    for (name, effects, truth) in [
        ("rho_int", &t.phi, t.rho_int),
        ("rho_slo", &t.delta, t.rho_slo),
    ] {
        let (lo, hi) =
            rho_interval_given_effects(&sim.graph, effects, priors.tau_shape, priors.tau_rate);
        if !(lo..=hi).contains(&truth) {
            oracle_misses.push(name);
        }
    }
    Replicate {
        covered: vec![
            ("alpha", inside("alpha", t.alpha)),
            (
                "beta",
                inside("beta.intercept", t.beta[0]) && inside("beta.x1", t.beta[1]),
            ),
            ("tau2_phi", inside("tau2_phi", t.tau2_phi)),
            ("tau2_delta", inside("tau2_delta", t.tau2_delta)),
            ("rho_int", inside("rho_int", t.rho_int)),
            ("rho_slo", inside("rho_slo", t.rho_slo)),
        ],
        elapsed,
        acceptance: draws.run.unwrap().acceptance,
        oracle_misses,
    }
}

fn recovery_runs() -> Vec<Replicate> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(4);
    let mut out: Vec<(u64, Replicate)> = Vec::new();
    let ids: Vec<u64> = (0..REPLICATES).collect();
    for chunk in ids.chunks(workers) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&r| (r, s.spawn(move || recovery_replicate(r))))
                .collect();
            for (r, h) in handles {
                out.push((r, h.join().unwrap()));
            }
        });
    }
    out.sort_by_key(|(r, _)| *r);
    out.into_iter().map(|(_, rep)| rep).collect()
}

fn criterion_recovery(reps: &[Replicate]) -> Outcome {
    let per_rep: Vec<usize> = reps
        .iter()
        .map(|r| r.covered.iter().filter(|(_, c)| *c).count())
        .collect();
    let total: usize = per_rep.iter().sum();
    let pairs = reps.len() * 6;
    let slowest = reps.iter().map(|r| r.elapsed).max().unwrap();
    let misses: Vec<String> = reps
        .iter()
        .enumerate()
        .flat_map(|(i, r)| {
            r.covered
                .iter()
                .filter(|(_, c)| !c)
                .map(move |(n, _)| format!("rep{i}:{n}"))
        })
        .collect();
    let oracle: Vec<String> = reps
        .iter()
        .enumerate()
        .flat_map(|(i, r)| r.oracle_misses.iter().map(move |n| format!("rep{i}:{n}")))
        .collect();
    let pass = per_rep.iter().all(|&c| c >= 5)
        && total as f64 >= 0.85 * pairs as f64
        && slowest < REPLICATE_TIME_LIMIT;
    Outcome {
        pass,
        detail: format!(
            "covered {total}/{pairs}, min per replicate {}/6, slowest replicate {:.1}s, \
             misses [{}], misses of the known-effects rho posterior [{}]",
            per_rep.iter().min().unwrap(),
            slowest.as_secs_f64(),
            misses.join(" "),
            oracle.join(" ")
        ),
    }
}

fn criterion_tuning(reps: &[Replicate]) -> Outcome {
    let mut worst = (f64::INFINITY, f64::NEG_INFINITY);
    let mut bad = Vec::new();
    for (i, r) in reps.iter().enumerate() {
        for (name, c) in r.acceptance.blocks() {
            let rate = c.rate();
            worst = (worst.0.min(rate), worst.1.max(rate));
            if !(ACCEPT_BAND.0..=ACCEPT_BAND.1).contains(&rate) {
                bad.push(format!("rep{i}:{name}={rate:.3}"));
            }
        }
    }
    Outcome {
        pass: bad.is_empty(),
        detail: format!(
            "Metropolis block rates in [{:.3}, {:.3}], band {:?}{}",
            worst.0,
            worst.1,
            ACCEPT_BAND,
            if bad.is_empty() { String::new() } else { format!(", outside: {}", bad.join(" ")) }
        ),
    }
}

fn criterion_dense_oracles() -> Outcome {
    let mut worst: f64 = 0.0;
    for g in 0..100u64 {
        let k = 2 + (g as usize * 7) % 49;
        let graph = random_graph(k, 1000 + g);
        let mut r = rng(g);
        let rho: f64 = r.random_range(0.01..0.99);
        let tau2: f64 = r.random_range(0.05..3.0);
        let v: Vec<f64> = (0..k).map(|_| r.random_range(-2.0..2.0)).collect();

        let q = dense_precision(&graph, rho);
        let chol = q.clone().cholesky().unwrap();
        let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let x = DVector::from_column_slice(&v);
        let quad = (x.transpose() * &q * &x)[(0, 0)];
        let dense = -0.5 * k as f64 * (2.0 * std::f64::consts::PI * tau2).ln() + 0.5 * logdet
            - quad / (2.0 * tau2);
        worst = worst
            .max((graph.logdet_precision(rho).unwrap() - logdet).abs())
            .max((car_logdensity(&graph, &v, rho, tau2).unwrap() - dense).abs());
    }
    Outcome {
        pass: worst < DENSE_TOL,
        detail: format!("100 graphs, K <= 50, max abs error {worst:.2e}, tolerance {DENSE_TOL:e}"),
    }
}

fn criterion_conjugate() -> Outcome {
    let priors = PriorConfig::default();
    let crit = ks_critical_1pct(KS_DRAWS);
    let mut stats = Vec::new();
    for case in 0..5u64 {
        let graph = random_graph(5 + 10 * case as usize, 500 + case);
        let mut r = rng(700 + case);
        let v: Vec<f64> = (0..graph.len()).map(|_| r.random_range(-1.5..1.5)).collect();
        let rho = 0.1 + 0.2 * case as f64;
        let q = car_quadform(&graph, &v, rho).unwrap();
        let (shape, rate) = tau2_conditional(graph.len(), q, &priors);
        let draws: Vec<f64> = (0..KS_DRAWS)
            .map(|_| update_tau2(&graph, &v, rho, &priors, &mut r).unwrap())
            .collect();
        stats.push(ks_statistic(&draws, |x| gamma_ur(shape, rate / x)));
    }
    let max = stats.iter().cloned().fold(0.0, f64::max);
    Outcome {
        pass: max < crit,
        detail: format!("5 cases x {KS_DRAWS} draws, max KS D {max:.5}, 1% critical {crit:.5}"),
    }
}

fn criterion_prior_recovery() -> Outcome {
    let graph = lattice_graph(2, 2).unwrap();
    let k = graph.len();
    let years = vec![2001, 2002, 2003];
    let data = StratumDataset::without_likelihood(
        graph.ids().to_vec(),
        years.clone(),
        vec![1.0; k * years.len()],
        vec!["intercept".into()],
    )
    .unwrap();
    let config = SamplerConfig {
        burn_in: 5_000,
        samples: PRIOR_DRAWS,
        thin: PRIOR_THIN,
        seed: 31,
        ..SamplerConfig::default()
    };
    let draws = run_chain(&data, &graph, &PriorConfig::default(), &config).unwrap();
    let qs = [0.1, 0.5, 0.9];
    let sorted = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s
    };
    let mut rho_err: f64 = 0.0;
    for series in [&draws.rho_int, &draws.rho_slo] {
        let s = sorted(series);
        for q in qs {
            rho_err = rho_err.max((quantile_sorted(&s, q) - q).abs());
        }
    }
    // IG(1, b) has CDF exp(-b / x), so its q-quantile is -b / ln q.
    let mut tau_err: f64 = 0.0;
    for series in [&draws.tau2_phi, &draws.tau2_delta] {
        let s = sorted(series);
        for q in qs {
            let truth = -0.01 / f64::ln(q);
            tau_err = tau_err.max((quantile_sorted(&s, q) / truth - 1.0).abs());
        }
    }
    Outcome {
        pass: rho_err <= RHO_QUANTILE_TOL && tau_err <= TAU2_QUANTILE_REL_TOL,
        detail: format!(
            "{PRIOR_DRAWS} draws (thin {PRIOR_THIN}), rho max abs error {rho_err:.4} (tol {RHO_QUANTILE_TOL}), tau2 max rel error {tau_err:.4} (tol {TAU2_QUANTILE_REL_TOL})"
        ),
    }
}

fn normals(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| StandardNormal.sample(&mut r)).collect()
}

fn criterion_diagnostics() -> Outcome {
    let passes = (0..GEWEKE_CHAINS)
        .filter(|&s| geweke(&normals(GEWEKE_CHAIN_LEN, 50_000 + s)).unwrap().abs() < 1.96)
        .count();
    let rate = passes as f64 / GEWEKE_CHAINS as f64;

    let iid: Vec<f64> = (0..5).map(|s| ess(&normals(10_000, 90 + s)).unwrap()).collect();
    let iid_err = iid.iter().map(|e| (e / 10_000.0 - 1.0).abs()).fold(0.0, f64::max);

    let n = 100_000;
    let analytic = n as f64 * 0.1 / 1.9;
    let ar_err = (0..5u64)
        .map(|s| {
            let mut r = rng(300 + s);
            let sd = (1.0_f64 - 0.81).sqrt();
            let mut x: f64 = StandardNormal.sample(&mut r);
            let chain: Vec<f64> = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    x = 0.9 * x + sd * z;
                    x
                })
                .collect();
            (ess(&chain).unwrap() / analytic - 1.0).abs()
        })
        .fold(0.0, f64::max);
    Outcome {
        pass: (rate - 0.95).abs() <= GEWEKE_RATE_TOL && iid_err <= ESS_IID_TOL && ar_err <= ESS_AR_TOL,
        detail: format!(
            "Geweke pass rate {rate:.3} over {GEWEKE_CHAINS} chains, iid ESS max rel error {iid_err:.3}, AR(0.9) ESS max rel error {ar_err:.3}"
        ),
    }
}

fn criterion_pipeline() -> Outcome {
    let mut failures = Vec::new();

    let psr = compute_psr(&[ScreenRecord {
        county: "01001".into(),
        year: 2020,
        instrument: Instrument::Depression,
        positives: Some(10),
        totals: Some(1000),
    }])
    .unwrap();
    if psr[&("01001".to_string(), 2020)] != Some(0.01) {
        failures.push("psr");
    }

    let stratum = StratumKey::new(AgeGroup::new(9).unwrap(), Sex::Male);
    let graph = build_graph(
        &["01011", "01101", "01113"],
        &[("01011", "01101"), ("01101", "01113"), ("01011", "01113")],
    )
    .unwrap();
    let row = |county: &str, year, deaths, population| PanelRow {
        county: county.into(),
        year,
        age_group: stratum.age_group,
        sex: stratum.sex,
        deaths,
        population,
    };
    let rows = vec![
        row("01011", 2019, 3, 900),
        row("01101", 2019, 40, 52_000),
        row("01113", 2019, 7, 8_000),
        row("01011", 2020, 1, 880),
        row("01101", 2020, 45, 51_500),
        row("01113", 2020, 9, 7_900),
    ];
    let (merged, out) = apply_merge(&graph, &rows, &MergeMap::fips_2023()).unwrap();
    let sum = |rows: &[PanelRow], c: &str, y| {
        rows.iter()
            .filter(|r| r.county == c && r.year == y)
            .fold((0, 0), |a, r| (a.0 + r.deaths, a.1 + r.population))
    };
    let conserved = merged.index_of("01011").is_none()
        && sum(&out, "01101", 2019) == (43, 52_900)
        && sum(&out, "01101", 2020) == (46, 52_380)
        && sum(&out, "01113", 2019) == (7, 8_000);
    if !conserved {
        failures.push("merge");
    }

    let years: Vec<i32> = (2016..=2023).collect();
    let graph = build_graph(&["01001", "01003"], &[("01001", "01003")]).unwrap();
    let mut panel = Vec::new();
    let mut covs = Vec::new();
    let mut states = Vec::new();
    for (k, id) in graph.ids().iter().enumerate() {
        for &y in &years {
            panel.push(row(id, y, 2, 1_000));
            for name in ["educ", "crime", "married", "hhsize", "unemp", "race", "mh_days"] {
                covs.push(CovariateRecord {
                    unit: id.clone(),
                    year: y,
                    name: name.into(),
                    value: Some(f64::from(y) + k as f64),
                });
            }
        }
    }
    for &y in &years {
        for name in ["alcohol", "hpi"] {
            states.push(CovariateRecord {
                unit: "01".into(),
                year: y,
                name: name.into(),
                value: Some(f64::from(y % 7)),
            });
        }
    }
    let sources = DataSources {
        graph: &graph,
        panel: &panel,
        screens: &[],
        covariates: &covs,
        state_covariates: &states,
    };
    let data = build_design_matrix(&sources, ModelKind::Socioeconomic, stratum, &DesignOptions::default()).unwrap();
    let names = data.covariate_names();
    let covid = names.iter().position(|n| n == "covid").unwrap();
    let post = names.iter().position(|n| n == "post2021").unwrap();
    let indicators_exact = (0..2).all(|k| {
        data.years().iter().enumerate().all(|(t, y)| {
            let r = data.row(k, t);
            r[covid] == if (2020..=2021).contains(y) { 1.0 } else { 0.0 }
                && r[post] == if (2022..=2023).contains(y) { 1.0 } else { 0.0 }
        })
    });
    if !indicators_exact {
        failures.push("indicators");
    }

    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            "PSR(10, 1000) = 0.01, 01011 -> 01101 conserves deaths and exposure, indicator columns exact".into()
        } else {
            format!("failed: {}", failures.join(", "))
        },
    }
}

fn criterion_reproducibility() -> Outcome {
    let scenario = RecoveryScenario {
        rows: 6,
        cols: 6,
        ..RecoveryScenario::default()
    };
    let sim = scenario.simulate(&mut replicate_rng(77, 0)).unwrap();
    let config = SamplerConfig {
        burn_in: 1_000,
        samples: 1_000,
        seed: 2024,
        ..SamplerConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for run in 0..2 {
        let draws = run_chain(&sim.dataset, &sim.graph, &PriorConfig::default(), &config).unwrap();
        let path = dir.path().join(format!("draws_{run}.csv"));
        write_draws(&path, &draws).unwrap();
        files.push(std::fs::read(&path).unwrap());
    }
    Outcome {
        pass: files[0] == files[1],
        detail: format!("two runs, {} bytes each, identical = {}", files[0].len(), files[0] == files[1]),
    }
}

fn main() {
    // libtest flags such as --nocapture or a name filter are accepted and ignored.
    let listing = std::env::args().any(|a| a == "--list");
    if listing {
        println!("acceptance: test");
        return;
    }
    let reps = recovery_runs();
    let outcomes = [
        (1, "parameter recovery", criterion_recovery(&reps)),
        (2, "dense-oracle equivalence", criterion_dense_oracles()),
        (3, "conjugate correctness", criterion_conjugate()),
        (4, "prior recovery", criterion_prior_recovery()),
        (5, "diagnostic calibration", criterion_diagnostics()),
        (6, "pipeline exactness", criterion_pipeline()),
        (7, "reproducibility", criterion_reproducibility()),
        (8, "sampler tuning", criterion_tuning(&reps)),
    ];
    for (id, name, outcome) in &outcomes {
        report(*id, name, outcome);
    }
    let failed = outcomes.iter().filter(|(_, _, o)| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
