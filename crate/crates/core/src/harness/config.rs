//! Experiment configuration and its `key = value` file format.
//!
//! ```text
//! # comment
//! [data]
//! classes = 10
//! shift = 4
//! [model]
//! hidden = 64, 64
//! [train]
//! initial_lr = 0.004
//! [grid]
//! strategies = fine-tune, mean-soft-label
//! rhos = 0.1, 0.2, 0.5, 1, inf
//! seeds = 1, 2, 3
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use super::strategy::{parse_rho, Strategy, StrategyKind};
use crate::data::ShiftConfig;
use crate::error::{Error, Result};
use crate::losses::SoftWeight;
use crate::network::{mlp_specs, Activation, LayerSpec};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: ShiftConfig,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Schedule and optimiser settings. The seed is replaced per run.
    pub train: TrainConfig,
    pub strategies: Vec<StrategyKind>,
    /// Temperatures for distillation.
    pub temperatures: Vec<f64>,
    /// Temperatures at which mean soft-label tables are built.
    pub mean_soft_temperatures: Vec<f64>,
    /// Soft weights; `SoftOnly` is used by mean-soft-label only.
    pub rhos: Vec<SoftWeight>,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    /// Concurrent grid cells; 0 picks the number of CPUs.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: ShiftConfig::default(),
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            train: TrainConfig::default(),
            strategies: vec![
                StrategyKind::SourceOnly,
                StrategyKind::TargetOnly,
                StrategyKind::SourcePlusTarget,
                StrategyKind::FineTune,
                StrategyKind::KldReg,
                StrategyKind::Distillation,
                StrategyKind::MeanSoftLabel,
            ],
            temperatures: vec![1.0, 2.0, 5.0],
            mean_soft_temperatures: vec![1.0],
            rhos: vec![
                SoftWeight::Finite(0.1),
                SoftWeight::Finite(0.2),
                SoftWeight::Finite(0.5),
                SoftWeight::Finite(1.0),
                SoftWeight::SoftOnly,
            ],
            seeds: vec![1, 2, 3, 4, 5],
            output: PathBuf::from("results"),
            workers: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        mlp_specs(
            self.data.dim,
            &self.hidden,
            self.data.num_classes,
            self.activation,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        self.data.validate()?;
        self.train.validate()?;
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if self.strategies.is_empty() {
            return bad("strategy list is empty");
        }
        if self.seeds.is_empty() {
            return bad("seed list is empty");
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct");
        }
        let distinct =
            |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<BTreeSet<_>>().len() == v.len();
        if self.strategies.contains(&StrategyKind::Distillation)
            && (self.temperatures.is_empty() || !distinct(&self.temperatures))
        {
            return bad("distillation needs a non-empty list of distinct temperatures");
        }
        if self.strategies.contains(&StrategyKind::MeanSoftLabel)
            && (self.mean_soft_temperatures.is_empty() || !distinct(&self.mean_soft_temperatures))
        {
            return bad("mean-soft-label needs a non-empty list of distinct temperatures");
        }
        let needs_rho = self.strategies.iter().any(|k| k.is_soft());
        if needs_rho && self.rhos.is_empty() {
            return bad("soft-weight grid is empty");
        }
        let rho_keys: Vec<f64> = self
            .rhos
            .iter()
            .map(|r| match r {
                SoftWeight::Finite(v) => *v,
                SoftWeight::SoftOnly => f64::INFINITY,
            })
            .collect();
        if !distinct(&rho_keys) {
            return bad("soft weights must be distinct");
        }
        let any_finite = self.rhos.iter().any(|r| matches!(r, SoftWeight::Finite(_)));
        if !any_finite
            && self
                .strategies
                .iter()
                .any(|k| matches!(k, StrategyKind::KldReg | StrategyKind::Distillation))
        {
            return bad("kld-reg and distillation need at least one finite soft weight");
        }
        self.cells().map(|_| ())
    }

    /// Every grid cell, in table order, without seeds.
    pub fn cells(&self) -> Result<Vec<Strategy>> {
        let finite: Vec<SoftWeight> = self
            .rhos
            .iter()
            .copied()
            .filter(|r| matches!(r, SoftWeight::Finite(_)))
            .collect();
        let mut kinds = self.strategies.clone();
        kinds.sort();
        kinds.dedup();
        let mut cells = Vec::new();
        for kind in kinds {
            match kind {
                StrategyKind::KldReg => {
                    for &r in &finite {
                        cells.push(Strategy::new(kind, Some(1.0), Some(r))?);
                    }
                }
                StrategyKind::Distillation => {
                    for &t in &self.temperatures {
                        for &r in &finite {
                            cells.push(Strategy::new(kind, Some(t), Some(r))?);
                        }
                    }
                }
                StrategyKind::MeanSoftLabel => {
                    for &t in &self.mean_soft_temperatures {
                        for &r in &self.rhos {
                            cells.push(Strategy::new(kind, Some(t), Some(r))?);
                        }
                    }
                }
                _ => cells.push(Strategy::plain(kind)?),
            }
        }
        cells.sort_by(|a, b| a.cmp_key(b));
        Ok(cells)
    }

    /// Parses the `key = value` format, starting from the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |m: String| Error::InvalidConfig(format!("line {}: {m}", lineno + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !["data", "model", "train", "grid"].contains(&name) {
                    return Err(at(format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(&section, key, value).map_err(|e| match e {
                Error::InvalidConfig(m) => at(m),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidConfig(format!("bad value '{v}' for {key}")))
        }
        fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
            v.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| num(key, s))
                .collect()
        }
        let d = &mut self.data;
        match (section, key) {
            ("data", "classes") => d.num_classes = num(key, value)?,
            ("data", "dim") => d.dim = num(key, value)?,
            ("data", "source_train_per_class") => d.source_train_per_class = num(key, value)?,
            ("data", "target_train_per_class") => d.target_train_per_class = num(key, value)?,
            ("data", "validation_per_class") => d.validation_per_class = num(key, value)?,
            ("data", "test_per_class") => d.test_per_class = num(key, value)?,
            ("data", "blob_sigma") => d.blob_sigma = num(key, value)?,
            ("data", "separation") => d.separation = num(key, value)?,
            ("data", "shift") => d.shift = num(key, value)?,
            ("data", "rotation") => d.rotation = num(key, value)?,
            ("data", "label_noise") => d.label_noise = num(key, value)?,
            ("data", "geometry_seed") => d.geometry_seed = num(key, value)?,
            ("model", "hidden") => self.hidden = list(key, value)?,
            ("model", "activation") => {
                self.activation = Activation::parse(value)
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown activation '{value}'")))?
            }
            ("train", "initial_lr") => self.train.initial_lr = num(key, value)?,
            ("train", "halving_threshold") => self.train.halving_threshold = num(key, value)?,
            ("train", "stop_ratio") => self.train.stop_ratio = num(key, value)?,
            ("train", "batch_size") => self.train.batch_size = num(key, value)?,
            ("train", "max_epochs") => self.train.max_epochs = num(key, value)?,
            ("train", "rmsprop_decay") => self.train.rmsprop_decay = num(key, value)?,
            ("train", "rmsprop_epsilon") => self.train.rmsprop_epsilon = num(key, value)?,
            ("grid", "strategies") => {
                self.strategies = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(StrategyKind::parse)
                    .collect::<Result<_>>()?
            }
            ("grid", "temperatures") => self.temperatures = list(key, value)?,
            ("grid", "mean_soft_temperatures") => self.mean_soft_temperatures = list(key, value)?,
            ("grid", "rhos") => {
                self.rhos = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(parse_rho)
                    .collect::<Result<_>>()?
            }
            ("grid", "seeds") => self.seeds = list(key, value)?,
            ("grid", "output") => self.output = PathBuf::from(value),
            ("grid", "workers") => self.workers = num(key, value)?,
            ("", _) => {
                return Err(Error::InvalidConfig(format!(
                    "key '{key}' appears before any section"
                )))
            }
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown key '{key}' in [{section}]"
                )))
            }
        }
        Ok(())
    }

    /// Writes the configuration back out in the file format.
    pub fn to_text(&self) -> String {
        let join = |v: Vec<String>| v.join(", ");
        let d = &self.data;
        let t = &self.train;
        let mut s = String::new();
        let _ = writeln!(s, "[data]");
        let _ = writeln!(s, "classes = {}", d.num_classes);
        let _ = writeln!(s, "dim = {}", d.dim);
        let _ = writeln!(s, "source_train_per_class = {}", d.source_train_per_class);
        let _ = writeln!(s, "target_train_per_class = {}", d.target_train_per_class);
        let _ = writeln!(s, "validation_per_class = {}", d.validation_per_class);
        let _ = writeln!(s, "test_per_class = {}", d.test_per_class);
        let _ = writeln!(s, "blob_sigma = {}", d.blob_sigma);
        let _ = writeln!(s, "separation = {}", d.separation);
        let _ = writeln!(s, "shift = {}", d.shift);
        let _ = writeln!(s, "rotation = {}", d.rotation);
        let _ = writeln!(s, "label_noise = {}", d.label_noise);
        let _ = writeln!(s, "geometry_seed = {}", d.geometry_seed);
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(
            s,
            "hidden = {}",
            join(self.hidden.iter().map(|h| h.to_string()).collect())
        );
        let _ = writeln!(s, "activation = {}", self.activation.name());
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "initial_lr = {}", t.initial_lr);
        let _ = writeln!(s, "halving_threshold = {}", t.halving_threshold);
        let _ = writeln!(s, "stop_ratio = {}", t.stop_ratio);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "max_epochs = {}", t.max_epochs);
        let _ = writeln!(s, "rmsprop_decay = {}", t.rmsprop_decay);
        let _ = writeln!(s, "rmsprop_epsilon = {}", t.rmsprop_epsilon);
        let _ = writeln!(s, "\n[grid]");
        let _ = writeln!(
            s,
            "strategies = {}",
            join(
                self.strategies
                    .iter()
                    .map(|k| k.name().to_string())
                    .collect()
            )
        );
        let _ = writeln!(
            s,
            "temperatures = {}",
            join(self.temperatures.iter().map(|v| v.to_string()).collect())
        );
        let _ = writeln!(
            s,
            "mean_soft_temperatures = {}",
            join(
                self.mean_soft_temperatures
                    .iter()
                    .map(|v| v.to_string())
                    .collect()
            )
        );
        let _ = writeln!(
            s,
            "rhos = {}",
            join(self.rhos.iter().map(|v| v.to_string()).collect())
        );
        let _ = writeln!(
            s,
            "seeds = {}",
            join(self.seeds.iter().map(|v| v.to_string()).collect())
        );
        let _ = writeln!(s, "output = {}", self.output.display());
        let _ = writeln!(s, "workers = {}", self.workers);
        s
    }
}
