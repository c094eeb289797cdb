mod common;

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use common::{proxy_report, toy_exhaustive_max, TOY_PARTITIONS, TOY_TECHNIQUES};
use proptest::prelude::*;
use splitguard::adversary::{AttackKind, AttackSpec, SessionData};
use splitguard::baselines::{
    best_dp_multiplier, dp_baseline_eval, dp_inject, enumerate, grid_search, noise_sigma,
    select_best, DpRow, DpSettings, GridMode, GridRow, GridSpec, NoiseSpec,
};
use splitguard::controller::{run_search, ControllerConfig, PartitionMenu};
use splitguard::harness::dataset::{generate_dataset, DatasetSpec};
use splitguard::metrics::{MetricsReport, PerfVariant, PrivacyVariant};
use splitguard::model::{build_zoo, ModelGraph, Strategy, TechniqueId};
use splitguard::tensor::{DType, Tensor};
use splitguard::train::{fit_classifier, TrainOpts};
use splitguard::{Error, Result};

fn toy() -> ModelGraph {
    build_zoo("tiny-mlp", DType::F64, 0).unwrap()
}

fn toy_grid() -> GridSpec {
    GridSpec {
        partitions: PartitionMenu::Explicit(TOY_PARTITIONS.to_vec()),
        mode: GridMode::Exhaustive,
        techniques: Some(TOY_TECHNIQUES.to_vec()),
        ..Default::default()
    }
}

#[test]
fn noise_scale_follows_mean_magnitude() {
    let f = Tensor::new_f64(&[3], vec![1.0, -1.0, 2.0]).unwrap();
    assert!((noise_sigma(&f, 0.5) - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(dp_inject(&f, 0.0, &mut splitguard::rng(0)).unwrap(), f);
    assert!(matches!(
        dp_inject(&f, -1.0, &mut splitguard::rng(0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn empirical_noise_std_is_within_five_percent() {
    let n = 100_000;
    let f = Tensor::new_f64(
        &[n],
        (0..n)
            .map(|i| if i % 2 == 0 { 1.5 } else { -0.5 })
            .collect(),
    )
    .unwrap();
    for m in [0.1, 0.5, 1.0, 2.0] {
        let sigma = m * 1.0;
        let out = dp_inject(&f, m, &mut splitguard::rng(42)).unwrap();
        let noise: Vec<f64> = out
            .data()
            .iter()
            .zip(f.data())
            .map(|(a, b)| a - b)
            .collect();
        let mean = noise.iter().sum::<f64>() / n as f64;
        let sd = (noise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((sd / sigma - 1.0).abs() < 0.05, "multiplier {m}: sd {sd}");
        assert!(mean.abs() < 5.0 * sigma / (n as f64).sqrt());
    }
}

#[test]
fn noise_spec_defaults_and_validation() {
    assert_eq!(NoiseSpec::default().multipliers, vec![0.1, 0.5, 1.0, 2.0]);
    assert!(matches!(
        NoiseSpec {
            multipliers: vec![]
        }
        .validate(),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        NoiseSpec {
            multipliers: vec![0.5, 0.0]
        }
        .validate(),
        Err(Error::Config(_))
    ));
}

#[test]
fn uniform_grid_evaluates_each_cell_once() {
    let g = build_zoo("tiny-lenet", DType::F32, 0).unwrap();
    let spec = GridSpec {
        partitions: PartitionMenu::Explicit(vec![3, 6]),
        techniques: Some(vec![TechniqueId::C1, TechniqueId::W1]),
        ..Default::default()
    };
    let calls = AtomicUsize::new(0);
    let eval = |s: &Strategy| -> Result<MetricsReport> {
        calls.fetch_add(1, Ordering::SeqCst);
        MetricsReport::new(
            0.9,
            0.9,
            PrivacyVariant::P1,
            0.5,
            PerfVariant::S1,
            s.partition as f64 / 10.0,
            0.0,
        )
    };
    let out = grid_search(&g, &spec, &eval).unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 6);
    assert_eq!(out.rows.len(), 6);
    assert_eq!(out.best.unwrap().0.partition, 6);
}

#[test]
fn exhaustive_grid_finds_the_toy_optimum() {
    let g = toy();
    let eval = |s: &Strategy| proxy_report(&g, s);
    let out = grid_search(&g, &toy_grid(), &eval).unwrap();
    assert_eq!(out.best.unwrap().1.r, toy_exhaustive_max(&g));
}

#[test]
fn grid_and_search_share_the_evaluator() {
    let g = toy();
    let seen = Mutex::new(HashMap::<String, f64>::new());
    let eval = |s: &Strategy| -> Result<MetricsReport> {
        let r = proxy_report(&g, s)?;
        seen.lock().unwrap().insert(s.to_string(), r.r);
        Ok(r)
    };
    let grid = grid_search(&g, &toy_grid(), &eval).unwrap();
    let cfg = ControllerConfig {
        episodes: 40,
        partitions: PartitionMenu::Explicit(TOY_PARTITIONS.to_vec()),
        techniques: Some(TOY_TECHNIQUES.to_vec()),
        ..Default::default()
    };
    let rl = run_search(&g, &eval, &cfg).unwrap();
    let by_grid: HashMap<String, f64> = grid
        .rows
        .iter()
        .map(|r| (r.strategy.to_string(), r.report.r))
        .collect();
    for row in &rl.log {
        assert_eq!(by_grid[&row.strategy], row.r, "{}", row.strategy);
    }
    assert_eq!(seen.lock().unwrap().len(), by_grid.len());
}

#[test]
fn failed_cells_are_kept_but_never_chosen() {
    let g = toy();
    let eval = |s: &Strategy| -> Result<MetricsReport> {
        if s.partition == 3 {
            return Err(Error::Numeric("diverged".into()));
        }
        proxy_report(&g, s)
    };
    let out = grid_search(&g, &toy_grid(), &eval).unwrap();
    assert!(out
        .rows
        .iter()
        .any(|r| r.error.contains("diverged") && r.report.r == 0.0));
    assert_ne!(out.best.unwrap().0.partition, 3);
}

#[test]
fn empty_menus_are_config_errors() {
    let g = toy();
    let spec = GridSpec {
        partitions: PartitionMenu::Explicit(vec![]),
        ..Default::default()
    };
    assert!(matches!(enumerate(&g, &spec), Err(Error::Config(_))));
    let spec = GridSpec {
        budget: Some(3),
        ..toy_grid()
    };
    assert!(matches!(enumerate(&g, &spec), Err(Error::Config(_))));
    let spec = GridSpec {
        budget: Some(3),
        truncate: true,
        ..toy_grid()
    };
    assert_eq!(enumerate(&g, &spec).unwrap().len(), 3);
}

fn row(strategy: &str, r: f64, encoder_params: usize) -> GridRow {
    let report = MetricsReport {
        a: 0.0,
        a_base: 1.0,
        p_variant: PrivacyVariant::P1,
        p: 0.0,
        s_variant: PerfVariant::S1,
        s: 0.0,
        cr: 0.0,
        r_a: 0.0,
        r_p: 0.0,
        r_s: 0.0,
        r,
    };
    GridRow {
        strategy: strategy.parse().unwrap(),
        report,
        encoder_params,
        error: String::new(),
    }
}

#[test]
fn tie_break_prefers_small_encoders_then_lexicographic_order() {
    let rows = vec![
        row("P:3", 0.5, 100),
        row("P:2", 0.5, 40),
        row("P:1", 0.5, 40),
        row("P:0", 0.4, 0),
    ];
    assert_eq!(
        rows[select_best(&rows).unwrap()].strategy.to_string(),
        "P:1"
    );
}

proptest! {
    #[test]
    fn grid_choice_ignores_enumeration_order(
        cells in proptest::collection::vec((0usize..4, 0usize..3, 0usize..3), 1..12),
        seed in 0u64..1000,
    ) {
        use rand::seq::SliceRandom;
        let rows: Vec<GridRow> = cells
            .iter()
            .enumerate()
            .map(|(i, (r, p, _))| row(&format!("P:{}", i), *r as f64 / 4.0, *p * 10))
            .collect();
        let best = rows[select_best(&rows).unwrap()].strategy.clone();
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut splitguard::rng(seed));
        prop_assert_eq!(&shuffled[select_best(&shuffled).unwrap()].strategy, &best);
    }
}

fn dp_row(multiplier: f64, r: f64) -> DpRow {
    let mut g = row("P:1", r, 0);
    g.report.r = r;
    DpRow {
        partition: 1,
        multiplier,
        report: g.report,
    }
}

#[test]
fn best_dp_group_has_the_highest_mean_reward() {
    let rows = vec![
        dp_row(0.1, 0.2),
        dp_row(0.1, 0.3),
        dp_row(2.0, 0.4),
        dp_row(2.0, 0.35),
        dp_row(1.0, 0.1),
    ];
    assert_eq!(best_dp_multiplier(&rows), Some(2.0));
    assert_eq!(best_dp_multiplier(&[]), None);
}

#[test]
fn noise_baseline_leaves_the_model_untouched() {
    let ds = generate_dataset(&DatasetSpec::scaled(400, 1)).unwrap();
    let data = SessionData::from_dataset(&ds, None).unwrap();
    let mut g = build_zoo("tiny-lenet", DType::F32, 1).unwrap();
    fit_classifier(
        &mut g,
        &data.train.x,
        &data.train.coarse,
        None,
        &TrainOpts {
            epochs: 1,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    let before = g.params.digest();
    let settings = DpSettings {
        attack: AttackSpec {
            kind: AttackKind::InversionMse,
            epochs: 1,
            ..Default::default()
        },
        ..Default::default()
    };
    let rows = dp_baseline_eval(&g, &[3, 6], &NoiseSpec::default(), &data, &settings, 0).unwrap();
    assert_eq!(g.params.digest(), before);
    assert_eq!(rows.len(), 8);
    for r in &rows {
        assert!((0.0..=1.0).contains(&r.report.p));
        assert!((r.report.r - r.report.r_a * r.report.r_p * r.report.r_s).abs() < 1e-12);
    }
    let again = dp_baseline_eval(&g, &[3, 6], &NoiseSpec::default(), &data, &settings, 0).unwrap();
    assert_eq!(rows, again);
    assert!(matches!(
        dp_baseline_eval(&g, &[12], &NoiseSpec::default(), &data, &settings, 0),
        Err(Error::Config(_))
    ));
}
