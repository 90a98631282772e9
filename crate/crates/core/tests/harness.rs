mod common;

use std::collections::BTreeSet;

use common::tiny_config;
use softshift::harness::{
    emit_table, run_experiment, run_experiment_with_logs, ExperimentConfig, Strategy, StrategyKind,
    TableFormat,
};
use softshift::losses::SoftWeight;
use softshift::Error;

#[test]
fn source_only_gives_one_row_per_seed() {
    let mut cfg = tiny_config();
    cfg.strategies = vec![StrategyKind::SourceOnly];
    let table = run_experiment(&cfg).unwrap();
    assert_eq!(table.len(), cfg.seeds.len());
    for r in table.rows() {
        assert_eq!(r.strategy.temperature_text(), "-");
        assert_eq!(r.strategy.rho_text(), "-");
    }
}

#[test]
fn default_grid_covers_the_cross_product_once() {
    let defaults = ExperimentConfig::default();
    // 3 T × 4 ρ distillation, 4 + 1 mean-soft-label, 4 kld-reg, 4 baselines
    let per_seed = 3 * 4 + (4 + 1) + 4 + 4;
    assert_eq!(defaults.cells().unwrap().len(), per_seed);

    let mut cfg = tiny_config();
    cfg.strategies = defaults.strategies.clone();
    let out = run_experiment_with_logs(&cfg).unwrap();
    let table = &out.table;
    assert_eq!(table.len(), per_seed * cfg.seeds.len());
    assert_eq!(out.logs.len(), table.len());

    let keys: BTreeSet<(String, u64)> = table
        .rows()
        .iter()
        .map(|r| (r.strategy.to_string(), r.seed))
        .collect();
    assert_eq!(keys.len(), table.len());
    let expected: BTreeSet<(String, u64)> = cfg
        .cells()
        .unwrap()
        .iter()
        .flat_map(|c| cfg.seeds.iter().map(move |&s| (c.to_string(), s)))
        .collect();
    assert_eq!(keys, expected);

    assert_eq!(table.aggregates().len(), per_seed);
    let text = emit_table(table, TableFormat::Tsv);
    assert_eq!(text.matches("mean(n=2)").count(), per_seed);

    let soft_only = Strategy::new(
        StrategyKind::MeanSoftLabel,
        Some(1.0),
        Some(SoftWeight::SoftOnly),
    )
    .unwrap();
    assert_eq!(table.cell(&soft_only).len(), cfg.seeds.len());
}

#[test]
fn teacher_is_shared_within_a_seed() {
    let mut cfg = tiny_config();
    cfg.strategies = StrategyKind::ALL.to_vec();
    let table = run_experiment(&cfg).unwrap();
    for &seed in &cfg.seeds {
        let prints: BTreeSet<[u8; 32]> = table
            .rows()
            .iter()
            .filter(|r| r.seed == seed)
            .map(|r| r.teacher.unwrap())
            .collect();
        assert_eq!(prints.len(), 1, "seed {seed}");
    }
    let all: BTreeSet<[u8; 32]> = table.rows().iter().map(|r| r.teacher.unwrap()).collect();
    assert_eq!(all.len(), cfg.seeds.len());
}

#[test]
fn reductions_hold_bit_for_bit() {
    let mut cfg = tiny_config();
    cfg.strategies = vec![
        StrategyKind::FineTune,
        StrategyKind::KldReg,
        StrategyKind::Distillation,
        StrategyKind::MeanSoftLabel,
    ];
    cfg.rhos = vec![SoftWeight::Finite(0.0), SoftWeight::Finite(0.5)];
    cfg.temperatures = vec![1.0, 2.0];
    let table = run_experiment(&cfg).unwrap();
    let bits = |s: &Strategy| -> Vec<(u64, u64, u64, usize, usize)> {
        table
            .cell(s)
            .iter()
            .map(|r| {
                (
                    r.seed,
                    r.test_acc.to_bits(),
                    r.val_acc.to_bits(),
                    r.epochs,
                    r.halvings,
                )
            })
            .collect()
    };
    let ft = Strategy::plain(StrategyKind::FineTune).unwrap();
    let msl0 = Strategy::new(
        StrategyKind::MeanSoftLabel,
        Some(1.0),
        Some(SoftWeight::Finite(0.0)),
    )
    .unwrap();
    assert_eq!(bits(&ft), bits(&msl0));
    for rho in [0.0, 0.5] {
        let kld = Strategy::new(
            StrategyKind::KldReg,
            Some(1.0),
            Some(SoftWeight::Finite(rho)),
        )
        .unwrap();
        let dist = Strategy::new(
            StrategyKind::Distillation,
            Some(1.0),
            Some(SoftWeight::Finite(rho)),
        )
        .unwrap();
        assert!(!bits(&kld).is_empty());
        assert_eq!(bits(&kld), bits(&dist), "rho {rho}");
    }
}

#[test]
fn worker_count_does_not_change_results() {
    let mut cfg = tiny_config();
    cfg.strategies = StrategyKind::ALL.to_vec();
    cfg.workers = 1;
    let a = run_experiment_with_logs(&cfg).unwrap();
    cfg.workers = 4;
    let b = run_experiment_with_logs(&cfg).unwrap();
    assert_eq!(
        emit_table(&a.table, TableFormat::Tsv),
        emit_table(&b.table, TableFormat::Tsv)
    );
    assert_eq!(a.logs, b.logs);
}

#[test]
fn failures_name_the_cell() {
    let mut cfg = tiny_config();
    cfg.train.initial_lr = 1e308;
    match run_experiment(&cfg) {
        Err(Error::Cell { cell, source }) => {
            assert!(cell.contains("seed="), "{cell}");
            assert!(matches!(*source, Error::NonFiniteLoss { .. }), "{source}");
        }
        other => panic!("expected an annotated failure, got {other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected_before_running() {
    let mut cfg = tiny_config();
    cfg.seeds = vec![1, 1];
    assert!(matches!(run_experiment(&cfg), Err(Error::InvalidConfig(_))));
    let mut cfg = tiny_config();
    cfg.seeds.clear();
    assert!(run_experiment(&cfg).is_err());
}

#[test]
fn shipped_default_config_matches_built_in_defaults() {
    let text = include_str!("../../../configs/default.cfg");
    let parsed = ExperimentConfig::parse(text).unwrap();
    assert_eq!(parsed.to_text(), ExperimentConfig::default().to_text());
}
