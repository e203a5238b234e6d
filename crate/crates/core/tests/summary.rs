mod common;

use carmort::data::{Sex, Standardization};
use carmort::graph::build_graph;
use carmort::sampler::{EffectDraws, PosteriorDraws};
use carmort::summary::{
    county_effects, magnitude_ranks, quantile_sorted, raw_scale_summary, summarize,
    variable_importance, Interval, ModelSummary, SummaryError, SummaryRow, SummaryTable,
};
use common::rng;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn draws_with(n: usize, seed: u64) -> PosteriorDraws {
    let mut r = rng(seed);
    let mut series = || (0..n).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    PosteriorDraws {
        covariate_names: vec!["intercept".into(), "x".into()],
        county_ids: vec!["a".into(), "b".into(), "c".into()],
        beta: vec![series(), series()],
        alpha: series(),
        tau2_phi: series(),
        tau2_delta: series(),
        rho_int: series(),
        rho_slo: series(),
        phi: EffectDraws::Full(vec![series(), series(), series()]),
        delta: EffectDraws::Full(vec![series(), series(), series()]),
        run: None,
    }
}

fn graph() -> carmort::graph::CountyGraph {
    build_graph(&["a", "b", "c"], &[("a", "b"), ("b", "c")]).unwrap()
}

#[test]
fn quantiles_of_one_to_ten_thousand() {
    let mut d = draws_with(10_000, 1);
    d.alpha = (1..=10_000).map(f64::from).collect();
    let row = summarize(&d).unwrap().get("alpha").unwrap().clone();
    assert!((row.lower - 250.975).abs() < 1e-9);
    assert!((row.upper - 9750.025).abs() < 1e-9);
    assert_eq!(row.mean, 5000.5);
}

#[test]
fn constant_draws_give_point_summary() {
    let mut d = draws_with(500, 2);
    d.rho_int = vec![0.42; 500];
    let row = summarize(&d).unwrap().get("rho_int").unwrap().clone();
    assert_eq!((row.mean, row.lower, row.upper), (0.42, 0.42, 0.42));
    assert!(row.ess.is_none() && row.geweke_z.is_none());
}

#[test]
fn too_few_draws() {
    assert!(matches!(summarize(&draws_with(99, 3)), Err(SummaryError::TooFewDraws { .. })));
}

#[test]
fn summary_is_permutation_invariant() {
    let d = draws_with(1_000, 4);
    let mut shuffled = d.alpha.clone();
    shuffled.shuffle(&mut rng(5));
    let a = Interval::of(&d.alpha);
    let b = Interval::of(&shuffled);
    assert!((a.mean - b.mean).abs() < 1e-12);
    assert_eq!((a.lower, a.upper), (b.lower, b.upper));
}

#[test]
fn symmetric_draws_have_mean_near_median() {
    let mut r = rng(6);
    let x: Vec<f64> = (0..20_000).map(|_| r.random_range(-3.0..3.0)).collect();
    let mut s = x.clone();
    s.sort_by(f64::total_cmp);
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    // Monte Carlo standard error of the mean is sqrt(3 / 20000) ~ 0.012.
    assert!((mean - quantile_sorted(&s, 0.5)).abs() < 0.06);
}

#[test]
fn county_effects_match_brute_force() {
    let d = draws_with(700, 7);
    let table = county_effects(&d, &graph()).unwrap();
    let (EffectDraws::Full(phi), EffectDraws::Full(delta)) = (&d.phi, &d.delta) else {
        unreachable!()
    };
    for (k, row) in table.rows.iter().enumerate() {
        let mut trend: Vec<f64> = (0..700).map(|s| d.alpha[s] + delta[k][s]).collect();
        let mean = trend.iter().sum::<f64>() / 700.0;
        trend.sort_by(f64::total_cmp);
        // Type-7 positions for n = 700: h = 699 q.
        let lo = trend[17] + 0.475 * (trend[18] - trend[17]);
        let hi = trend[681] + 0.525 * (trend[682] - trend[681]);
        assert!((row.trend.mean - mean).abs() < 1e-12);
        assert!((row.trend.lower - lo).abs() < 1e-12);
        assert!((row.trend.upper - hi).abs() < 1e-12);
        let phi_mean = phi[k].iter().sum::<f64>() / 700.0;
        assert!((row.phi.mean - phi_mean).abs() < 1e-12);
    }
}

#[test]
fn county_trend_is_translation_equivariant() {
    let d = draws_with(300, 8);
    let mut shifted = d.clone();
    shifted.alpha.iter_mut().for_each(|a| *a += 2.5);
    let a = county_effects(&d, &graph()).unwrap();
    let b = county_effects(&shifted, &graph()).unwrap();
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert!((y.trend.mean - x.trend.mean - 2.5).abs() < 1e-12);
        assert!((y.trend.lower - x.trend.lower - 2.5).abs() < 1e-12);
        assert!((y.trend.upper - x.trend.upper - 2.5).abs() < 1e-12);
        assert_eq!(x.phi, y.phi);
    }
}

#[test]
fn zero_deltas_give_alpha_trend_and_single_draw_collapses() {
    let mut d = draws_with(200, 9);
    d.delta = EffectDraws::Full(vec![vec![0.0; 200]; 3]);
    let alpha = Interval::of(&d.alpha);
    for row in county_effects(&d, &graph()).unwrap().rows {
        assert_eq!(row.trend, alpha);
    }
    let mut one = draws_with(1, 10);
    one.alpha = vec![0.3];
    let t = county_effects(&one, &graph()).unwrap();
    let r = &t.rows[0];
    assert_eq!((r.phi.lower, r.phi.upper), (r.phi.mean, r.phi.mean));
    assert_eq!((r.trend.lower, r.trend.upper), (r.trend.mean, r.trend.mean));
}

#[test]
fn county_effects_need_full_storage() {
    let mut d = draws_with(200, 11);
    d.phi = EffectDraws::Moments {
        mean: vec![0.0; 3],
        variance: vec![1.0; 3],
    };
    assert!(matches!(county_effects(&d, &graph()), Err(SummaryError::EffectsNotStored)));
}

#[test]
fn raw_scale_back_transform() {
    let mut d = draws_with(200, 12);
    d.beta = vec![vec![-5.0; 200], vec![0.6; 200]];
    let z = Standardization { mean: 10.0, sd: 2.0 };
    let t = raw_scale_summary(&d, &[None, Some(z)]).unwrap();
    assert!((t.get("beta_raw.x").unwrap().mean - 0.3).abs() < 1e-12);
    assert!((t.get("beta_raw.intercept").unwrap().mean - (-5.0 - 0.6 * 10.0 / 2.0)).abs() < 1e-12);
}

fn table(means: &[(&str, f64)]) -> SummaryTable {
    SummaryTable {
        rows: means
            .iter()
            .map(|(n, m)| SummaryRow {
                parameter: format!("beta.{n}"),
                mean: *m,
                lower: *m,
                upper: *m,
                ess: None,
                geweke_z: None,
            })
            .collect(),
    }
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn importance_single_and_identical_models() {
    let t = table(&[("a", 0.5), ("b", -0.9), ("c", 0.1)]);
    let covs = names(&["a", "b", "c"]);
    let one = [ModelSummary { label: "m", sex: Sex::Female, table: &t }];
    let rows = variable_importance(&one, &covs).unwrap();
    let all: Vec<f64> = rows.iter().filter(|r| r.panel == "all").map(|r| r.mean_rank).collect();
    assert_eq!(all, vec![2.0, 1.0, 3.0]);
    assert!(rows.iter().all(|r| r.panel != "male"));

    let two = [
        ModelSummary { label: "f", sex: Sex::Female, table: &t },
        ModelSummary { label: "m", sex: Sex::Male, table: &t },
    ];
    let rows = variable_importance(&two, &covs).unwrap();
    for panel in ["all", "female", "male"] {
        let r: Vec<f64> = rows.iter().filter(|r| r.panel == panel).map(|r| r.mean_rank).collect();
        assert_eq!(r, vec![2.0, 1.0, 3.0], "{panel}");
    }
}

#[test]
fn importance_missing_covariate() {
    let t = table(&[("a", 0.5)]);
    let m = [ModelSummary { label: "m", sex: Sex::Male, table: &t }];
    assert!(matches!(
        variable_importance(&m, &names(&["a", "b"])),
        Err(SummaryError::MissingCovariate { .. })
    ));
}

proptest! {
    #[test]
    fn importance_matches_sort_oracle(means in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..8)) {
        let covs = names(&["w", "x", "y", "z"]);
        let tables: Vec<SummaryTable> = means
            .iter()
            .map(|m| table(&[("w", m[0]), ("x", m[1]), ("y", m[2]), ("z", m[3])]))
            .collect();
        let models: Vec<ModelSummary> = tables
            .iter()
            .enumerate()
            .map(|(i, t)| ModelSummary { label: "m", sex: if i % 2 == 0 { Sex::Female } else { Sex::Male }, table: t })
            .collect();
        let rows = variable_importance(&models, &covs).unwrap();
        // Oracle: rank = 1 + number of strictly larger magnitudes (ties are
        // measure-zero here).
        for (j, c) in covs.iter().enumerate() {
            let oracle: f64 = means
                .iter()
                .map(|m| 1.0 + m.iter().filter(|v| v.abs() > m[j].abs()).count() as f64)
                .sum::<f64>() / means.len() as f64;
            let got = rows.iter().find(|r| r.panel == "all" && &r.covariate == c).unwrap().mean_rank;
            prop_assert!((got - oracle).abs() < 1e-12);
        }
        prop_assert_eq!(magnitude_ranks(&means[0]).len(), 4);
    }
}
