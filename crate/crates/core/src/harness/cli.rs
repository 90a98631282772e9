use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::config::ExperimentConfig;
use super::experiment::{data_rng, run_cell, run_experiment_with_logs, train_source, AdaptInputs};
use super::strategy::{parse_rho, Strategy, StrategyKind};
use super::table::{emit_table, parse_tsv, ResultsTable, TableFormat};
use crate::data::{
    generate_domain_pair, load_dataset, save_dataset, DomainPair, DomainSplits, LabeledDataset,
    ParallelDataset,
};
use crate::error::{Error, Result};
use crate::network::{load_model, save_model};
use crate::soft_labels::{
    compute_mean_soft_labels, hex, load_table_checked, save_table, MeanSoftLabelTable,
};

pub const SEED_ENV: &str = "SOFTSHIFT_SEED";

#[derive(Parser, Debug)]
#[command(
    name = "softshift",
    about = "Mean soft-label domain adaptation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seeds
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate source, target and parallel datasets
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the source model on generated data
    TrainSource {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a mean soft-label table from a source model and dataset
    MakeTable {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a source model to the target domain with one strategy
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        rho: Option<String>,
        /// Precomputed table; computed from the source train split otherwise
        #[arg(long)]
        table: Option<PathBuf>,
        /// Epoch log destination
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run the whole experiment grid
    Grid {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Re-emit a results table
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, default_value = "markdown")]
        format: String,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

/// Entry point of the `softshift` binary. Returns the process exit code.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let env_seed = std::env::var(SEED_ENV).ok();
    cli_main_with_env(argv, env_seed.as_deref())
}

/// As [`cli_main`], with the seed environment variable passed explicitly.
pub fn cli_main_with_env<I, S>(argv: I, env_seed: Option<&str>) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, env_seed) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn load_config(
    common: &Common,
    env_seed: Option<&str>,
) -> std::result::Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::parse(&read_text(p)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = env_seed {
        let seed = s
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}: '{s}' is not a seed")))?;
        cfg.seeds = vec![seed];
    }
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))
}

fn read_bytes(p: &Path) -> Result<Vec<u8>> {
    fs::read(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))
}

fn write(p: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(p, bytes).map_err(|e| Error::Io(format!("{}: {e}", p.display())))
}

const SPLIT_FILES: [&str; 8] = [
    "source_train",
    "source_validation",
    "source_test",
    "target_train",
    "target_validation",
    "target_test",
    "parallel_source",
    "parallel_target",
];

fn dataset_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.ssd"))
}

/// Writes every split of a generated pair into `dir`.
pub fn save_domain_pair(dir: &Path, pair: &DomainPair) -> Result<()> {
    let (ps, pt) = pair.parallel.halves()?;
    let sets: [&LabeledDataset; 8] = [
        &pair.source.train,
        &pair.source.validation,
        &pair.source.test,
        &pair.target.train,
        &pair.target.validation,
        &pair.target.test,
        &ps,
        &pt,
    ];
    for (name, ds) in SPLIT_FILES.iter().zip(sets) {
        write(&dataset_path(dir, name), save_dataset(ds))?;
    }
    Ok(())
}

pub fn load_domain_pair(dir: &Path) -> Result<DomainPair> {
    let mut sets = SPLIT_FILES
        .iter()
        .map(|name| load_dataset(&read_bytes(&dataset_path(dir, name))?))
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    let mut next = || sets.next().expect("eight splits");
    let source = DomainSplits {
        train: next(),
        validation: next(),
        test: next(),
    };
    let target = DomainSplits {
        train: next(),
        validation: next(),
        test: next(),
    };
    let (ps, pt) = (next(), next());
    let parallel = ParallelDataset::new(
        ps.features().clone(),
        pt.features().clone(),
        ps.labels().to_vec(),
        ps.num_classes(),
    )?;
    Ok(DomainPair {
        source,
        target,
        parallel,
    })
}

fn dispatch(cmd: Command, env_seed: Option<&str>) -> std::result::Result<(), Failure> {
    match cmd {
        Command::GenData { common, out } => {
            let cfg = load_config(&common, env_seed)?;
            let seed = cfg.seeds[0];
            let pair = generate_domain_pair(&cfg.data, &mut data_rng(seed))?;
            save_domain_pair(&out, &pair)?;
            println!("wrote datasets for seed {seed} to {}", out.display());
        }
        Command::TrainSource { common, data, out } => {
            let cfg = load_config(&common, env_seed)?;
            let seed = cfg.seeds[0];
            let pair = load_domain_pair(&data)?;
            let (model, run) = train_source(&cfg, &pair, seed)?;
            write(&out, save_model(&model))?;
            let mut log_path = out.clone().into_os_string();
            log_path.push(".log");
            write(Path::new(&log_path), run.to_log(&cfg.train))?;
            println!(
                "source val_acc={:.4} epochs={} fingerprint={}",
                run.best_val_acc().unwrap_or(0.0),
                run.epochs(),
                hex(&model.fingerprint())
            );
        }
        Command::MakeTable {
            model,
            data,
            temperature,
            out,
        } => {
            let teacher = load_model(&read_bytes(&model)?)?;
            let ds = load_dataset(&read_bytes(&data)?)?;
            let table = compute_mean_soft_labels(&teacher, &ds, temperature)?;
            write(&out, save_table(&table))?;
            print!("{}", table.to_text());
        }
        Command::Adapt {
            common,
            data,
            model,
            strategy,
            temperature,
            rho,
            table,
            log,
        } => {
            let cfg = load_config(&common, env_seed)?;
            let kind = StrategyKind::parse(&strategy)
                .map_err(|e| Failure::Usage(format!("--strategy: {e}")))?;
            let rho = rho
                .map(|r| parse_rho(&r))
                .transpose()
                .map_err(|e| Failure::Usage(format!("--rho: {e}")))?;
            let temperature = if kind.is_soft() {
                temperature.or(Some(1.0))
            } else {
                temperature
            };
            let strategy = Strategy::new(kind, temperature, rho)
                .map_err(|e| Failure::Usage(format!("--temperature/--rho: {e}")))?;
            let pair = load_domain_pair(&data)?;
            let teacher = load_model(&read_bytes(&model)?)?;
            let tables: Vec<MeanSoftLabelTable> = match (kind, &table, temperature) {
                (StrategyKind::MeanSoftLabel, Some(path), Some(t)) => {
                    let (tb, warning) =
                        load_table_checked(&read_bytes(path)?, &teacher.fingerprint())?;
                    if let Some(w) = warning {
                        eprintln!("warning: {w}");
                    }
                    tb.ensure_temperature(t)?;
                    vec![tb]
                }
                (StrategyKind::MeanSoftLabel, None, Some(t)) => {
                    vec![compute_mean_soft_labels(&teacher, &pair.source.train, t)?]
                }
                _ => Vec::new(),
            };
            let inputs = AdaptInputs {
                seed: cfg.seeds[0],
                data: &pair,
                teacher: &teacher,
                teacher_run: None,
                tables: &tables,
            };
            let cell = run_cell(&cfg, strategy, &inputs)?;
            if let Some(p) = log {
                write(&p, &cell.log)?;
            }
            let table = ResultsTable::new(vec![cell.row])?;
            print!("{}", emit_table(&table, TableFormat::Tsv));
        }
        Command::Grid {
            common,
            output,
            workers,
        } => {
            let mut cfg = load_config(&common, env_seed)?;
            if let Some(o) = output {
                cfg.output = o;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            let out = run_experiment_with_logs(&cfg)?;
            write_grid_outputs(&cfg, &out.table, &out.logs)?;
            print!("{}", emit_table(&out.table, TableFormat::Markdown));
        }
        Command::Report { results, format } => {
            let format = TableFormat::parse(&format).ok_or_else(|| {
                Failure::Usage(format!(
                    "--format: expected tsv or markdown, got '{format}'"
                ))
            })?;
            let table = parse_tsv(&read_text(&results)?)?;
            print!("{}", emit_table(&table, format));
        }
    }
    Ok(())
}

/// `results.tsv`, `results.md`, `config.cfg` and `logs/<cell>.log` under the
/// configured output directory.
pub fn write_grid_outputs(
    cfg: &ExperimentConfig,
    table: &ResultsTable,
    logs: &[(String, String)],
) -> Result<()> {
    let dir = &cfg.output;
    write(
        &dir.join("results.tsv"),
        emit_table(table, TableFormat::Tsv),
    )?;
    write(
        &dir.join("results.md"),
        emit_table(table, TableFormat::Markdown),
    )?;
    write(&dir.join("config.cfg"), cfg.to_text())?;
    for (name, log) in logs {
        write(&dir.join("logs").join(format!("{name}.log")), log)?;
    }
    Ok(())
}
