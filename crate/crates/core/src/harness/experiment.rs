//! Grid execution: one frozen source model per seed, then every cell as an
//! independent job.
//!
//! Random streams depend only on the seed and the stream's role, never on the
//! cell, so cells that reduce to each other (fine-tune and mean-soft-label at
//! `ρ = 0`, kld-reg and distillation at `T = 1`) train identically.

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::strategy::{Strategy, StrategyKind};
use super::table::{ResultRow, ResultsTable};
use crate::data::{generate_domain_pair, DomainPair};
use crate::error::{Error, Result};
use crate::losses::{
    combined_loss, hard_loss, soft_cross_entropy, teacher_soft_targets, LossOutput, LossWeights,
    Provenance,
};
use crate::math::{mix_seed, Matrix, SeededRng};
use crate::network::{init_params, ModelParams};
use crate::soft_labels::{compute_mean_soft_labels, hex, lookup, MeanSoftLabelTable};
use crate::training::{evaluate, train, RunResult, TrainConfig};

/// Data stream for a seed.
pub fn data_rng(seed: u64) -> SeededRng {
    SeededRng::derive(seed, "data")
}

fn with_seed(cfg: &TrainConfig, seed: u64, role: &str) -> TrainConfig {
    TrainConfig {
        seed: mix_seed(seed, role),
        ..*cfg
    }
}

/// Trains the source model on source train data, validating on source
/// validation data.
pub fn train_source(
    cfg: &ExperimentConfig,
    data: &DomainPair,
    seed: u64,
) -> Result<(ModelParams, RunResult)> {
    let init = init_params(&cfg.layer_specs(), &mut SeededRng::derive(seed, "init"))?;
    train(
        &init,
        &data.source.train,
        &data.source.validation,
        &|l: &Matrix, y: &[u32], _: &[usize]| hard_loss(l, y),
        &with_seed(&cfg.train, seed, "source"),
    )
}

/// Everything shared by the cells of one seed.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub seed: u64,
    pub data: DomainPair,
    pub teacher: ModelParams,
    pub teacher_run: RunResult,
    /// One table per configured mean-soft-label temperature.
    pub tables: Vec<MeanSoftLabelTable>,
}

impl SeedContext {
    pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let data = generate_domain_pair(&cfg.data, &mut data_rng(seed))?;
        let (teacher, teacher_run) = train_source(cfg, &data, seed)?;
        let tables = if cfg.strategies.contains(&StrategyKind::MeanSoftLabel) {
            cfg.mean_soft_temperatures
                .iter()
                .map(|&t| compute_mean_soft_labels(&teacher, &data.source.train, t))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            seed,
            data,
            teacher,
            teacher_run,
            tables,
        })
    }

    pub fn inputs(&self) -> AdaptInputs<'_> {
        AdaptInputs {
            seed: self.seed,
            data: &self.data,
            teacher: &self.teacher,
            teacher_run: Some(&self.teacher_run),
            tables: &self.tables,
        }
    }
}

/// What a single cell needs. The CLI builds this from files.
#[derive(Debug, Clone, Copy)]
pub struct AdaptInputs<'a> {
    pub seed: u64,
    pub data: &'a DomainPair,
    pub teacher: &'a ModelParams,
    /// Source training trace, reported by the source-only row.
    pub teacher_run: Option<&'a RunResult>,
    pub tables: &'a [MeanSoftLabelTable],
}

/// A finished cell: its table row and its epoch log.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRun {
    pub row: ResultRow,
    pub log: String,
}

fn finish(
    strategy: Strategy,
    inputs: &AdaptInputs<'_>,
    model: &ModelParams,
    mut run: RunResult,
    train_cfg: &TrainConfig,
) -> Result<CellRun> {
    let data = inputs.data;
    let test_acc = evaluate(model, &data.target.test)?;
    let val_acc = evaluate(model, &data.target.validation)?;
    run.test_acc = Some(test_acc);
    let fingerprint = inputs.teacher.fingerprint();
    let log = format!(
        "# strategy={strategy} seed={} teacher={}\n{}",
        inputs.seed,
        hex(&fingerprint),
        run.to_log(train_cfg)
    );
    Ok(CellRun {
        row: ResultRow {
            strategy,
            seed: inputs.seed,
            test_acc,
            val_acc,
            epochs: run.epochs(),
            halvings: run.halvings.len(),
            teacher: Some(fingerprint),
        },
        log,
    })
}

/// Runs one cell. Adaptation trains on target train data and selects the
/// snapshot on target validation data.
pub fn run_cell(
    cfg: &ExperimentConfig,
    strategy: Strategy,
    inputs: &AdaptInputs<'_>,
) -> Result<CellRun> {
    let seed = inputs.seed;
    let data = inputs.data;
    let target = &data.target;
    let adapt_cfg = with_seed(&cfg.train, seed, "adapt");
    let hard = |l: &Matrix, y: &[u32], _: &[usize]| hard_loss(l, y);

    let (model, run, used_cfg) = match strategy.kind() {
        StrategyKind::SourceOnly => {
            let run = inputs.teacher_run.cloned().unwrap_or_else(|| RunResult {
                val_acc: Vec::new(),
                lr: Vec::new(),
                halvings: Vec::new(),
                best_epoch: None,
                test_acc: None,
                wall_clock: Default::default(),
            });
            let source_cfg = with_seed(&cfg.train, seed, "source");
            (inputs.teacher.clone(), run, source_cfg)
        }
        StrategyKind::TargetOnly | StrategyKind::SourcePlusTarget => {
            let init = init_params(
                &cfg.layer_specs(),
                &mut SeededRng::derive(seed, "init-scratch"),
            )?;
            let scratch_cfg = with_seed(&cfg.train, seed, "scratch");
            let train_set = if strategy.kind() == StrategyKind::TargetOnly {
                target.train.clone()
            } else {
                data.source.train.concat(&target.train)?
            };
            let (m, r) = train(&init, &train_set, &target.validation, &hard, &scratch_cfg)?;
            (m, r, scratch_cfg)
        }
        StrategyKind::FineTune => {
            let (m, r) = train(
                inputs.teacher,
                &target.train,
                &target.validation,
                &hard,
                &adapt_cfg,
            )?;
            (m, r, adapt_cfg)
        }
        StrategyKind::KldReg | StrategyKind::Distillation => {
            let (t, rho) = soft_params(&strategy)?;
            let weights = LossWeights::new(t, rho)?;
            let targets = teacher_soft_targets(
                inputs.teacher,
                target.train.features(),
                t,
                Provenance::TeacherOnTarget,
            )?;
            let objective = |l: &Matrix, y: &[u32], rows: &[usize]| -> Result<LossOutput> {
                combined_loss(l, y, &targets.select_rows(rows), &weights)
            };
            let (m, r) = train(
                inputs.teacher,
                &target.train,
                &target.validation,
                &objective,
                &adapt_cfg,
            )?;
            (m, r, adapt_cfg)
        }
        StrategyKind::TeacherStudent => {
            let (source_half, target_half) = data.parallel.halves()?;
            let targets = teacher_soft_targets(
                inputs.teacher,
                source_half.features(),
                1.0,
                Provenance::TeacherOnParallelSource,
            )?;
            let objective = |l: &Matrix, _: &[u32], rows: &[usize]| -> Result<LossOutput> {
                soft_cross_entropy(l, &targets.select_rows(rows), 1.0)
            };
            let (m, r) = train(
                inputs.teacher,
                &target_half,
                &target.validation,
                &objective,
                &adapt_cfg,
            )?;
            (m, r, adapt_cfg)
        }
        StrategyKind::MeanSoftLabel => {
            let (t, rho) = soft_params(&strategy)?;
            let weights = LossWeights::new(t, rho)?;
            let table = inputs
                .tables
                .iter()
                .find(|tb| tb.temperature().to_bits() == t.to_bits())
                .ok_or_else(|| match inputs.tables.first() {
                    Some(tb) => Error::TemperatureMismatch {
                        table: tb.temperature(),
                        requested: t,
                    },
                    None => Error::InvalidConfig(format!("no mean soft-label table for T={t}")),
                })?;
            let objective = |l: &Matrix, y: &[u32], _: &[usize]| -> Result<LossOutput> {
                combined_loss(l, y, &lookup(table, y)?, &weights)
            };
            let (m, r) = train(
                inputs.teacher,
                &target.train,
                &target.validation,
                &objective,
                &adapt_cfg,
            )?;
            (m, r, adapt_cfg)
        }
    };
    finish(strategy, inputs, &model, run, &used_cfg)
}

fn soft_params(strategy: &Strategy) -> Result<(f64, crate::losses::SoftWeight)> {
    match (strategy.temperature(), strategy.rho()) {
        (Some(t), Some(r)) => Ok((t, r)),
        _ => Err(Error::InvalidConfig(format!("{strategy} lacks T or rho"))),
    }
}

fn annotate(strategy: Option<&Strategy>, seed: u64, e: Error) -> Error {
    let cell = match strategy {
        Some(s) => format!("{s} seed={seed}"),
        None => format!("source model seed={seed}"),
    };
    Error::Cell {
        cell,
        source: Box::new(e),
    }
}

/// Table plus one epoch log per row, keyed by a file-name friendly cell id.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub table: ResultsTable,
    pub logs: Vec<(String, String)>,
}

/// Runs the full grid. Results do not depend on the worker count.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultsTable> {
    Ok(run_experiment_with_logs(cfg)?.table)
}

pub fn run_experiment_with_logs(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let cells = cfg.cells()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;

    pool.install(|| {
        let contexts: Vec<SeedContext> = cfg
            .seeds
            .par_iter()
            .map(|&seed| SeedContext::prepare(cfg, seed).map_err(|e| annotate(None, seed, e)))
            .collect::<Vec<_>>()
            .into_iter()
            .collect::<Result<_>>()?;

        let jobs: Vec<(&SeedContext, Strategy)> = contexts
            .iter()
            .flat_map(|ctx| cells.iter().map(move |&c| (ctx, c)))
            .collect();
        let runs: Vec<CellRun> = jobs
            .par_iter()
            .map(|(ctx, strategy)| {
                run_cell(cfg, *strategy, &ctx.inputs())
                    .map_err(|e| annotate(Some(strategy), ctx.seed, e))
            })
            .collect::<Vec<_>>()
            .into_iter()
            .collect::<Result<_>>()?;

        let mut logs: Vec<(String, String)> = runs
            .iter()
            .map(|r| {
                (
                    format!("{}_seed{}", r.row.strategy.slug(), r.row.seed),
                    r.log.clone(),
                )
            })
            .collect();
        logs.sort();
        let table = ResultsTable::new(runs.into_iter().map(|r| r.row).collect())?;
        Ok(ExperimentOutput { table, logs })
    })
}
