use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};
use crate::losses::SoftWeight;

/// Adaptation strategies, in result-table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StrategyKind {
    /// The source model evaluated on the target domain as is.
    SourceOnly,
    /// Trained from scratch on target data.
    TargetOnly,
    /// Trained from scratch on source and target data together.
    SourcePlusTarget,
    /// Source model, hard loss on target data.
    FineTune,
    /// Combined loss at `T = 1` with the source model's posteriors on target inputs.
    KldReg,
    /// Combined loss at any `T ≥ 1` with the source model's posteriors on target inputs.
    Distillation,
    /// Soft loss only, against source-model posteriors on the source half of parallel pairs.
    TeacherStudent,
    /// Combined loss with rows of the mean soft-label table selected by label.
    MeanSoftLabel,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 8] = [
        StrategyKind::SourceOnly,
        StrategyKind::TargetOnly,
        StrategyKind::SourcePlusTarget,
        StrategyKind::FineTune,
        StrategyKind::KldReg,
        StrategyKind::Distillation,
        StrategyKind::TeacherStudent,
        StrategyKind::MeanSoftLabel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::SourceOnly => "source-only",
            StrategyKind::TargetOnly => "target-only",
            StrategyKind::SourcePlusTarget => "source-plus-target",
            StrategyKind::FineTune => "fine-tune",
            StrategyKind::KldReg => "kld-reg",
            StrategyKind::Distillation => "distillation",
            StrategyKind::TeacherStudent => "teacher-student",
            StrategyKind::MeanSoftLabel => "mean-soft-label",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown strategy '{s}'")))
    }

    /// Whether the strategy takes a temperature and a soft weight.
    pub fn is_soft(self) -> bool {
        matches!(
            self,
            StrategyKind::KldReg | StrategyKind::Distillation | StrategyKind::MeanSoftLabel
        )
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One grid cell: a strategy and, where it applies, its `T` and `ρ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Strategy {
    kind: StrategyKind,
    temperature: Option<f64>,
    rho: Option<SoftWeight>,
}

impl Strategy {
    pub fn new(
        kind: StrategyKind,
        temperature: Option<f64>,
        rho: Option<SoftWeight>,
    ) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("{kind}: {m}")));
        if kind.is_soft() {
            let (Some(t), Some(r)) = (temperature, rho) else {
                return bad("needs both a temperature and a soft weight".into());
            };
            if !(t.is_finite() && t >= 1.0) {
                return bad(format!("temperature {t} must be >= 1"));
            }
            if kind == StrategyKind::KldReg && t != 1.0 {
                return bad("temperature is fixed to 1".into());
            }
            match r {
                SoftWeight::SoftOnly if kind != StrategyKind::MeanSoftLabel => {
                    return bad("soft-only weight is only available for mean-soft-label".into())
                }
                SoftWeight::Finite(v) if !(v.is_finite() && v >= 0.0) => {
                    return bad(format!("soft weight {v} must be >= 0"))
                }
                _ => {}
            }
        } else if temperature.is_some() || rho.is_some() {
            return bad("takes neither a temperature nor a soft weight".into());
        }
        Ok(Self {
            kind,
            temperature,
            rho,
        })
    }

    pub fn plain(kind: StrategyKind) -> Result<Self> {
        Self::new(kind, None, None)
    }

    pub fn kind(&self) -> StrategyKind {
        self.kind
    }

    pub fn temperature(&self) -> Option<f64> {
        self.temperature
    }

    pub fn rho(&self) -> Option<SoftWeight> {
        self.rho
    }

    /// Table order: kind, then `T`, then `ρ` with soft-only last.
    pub fn cmp_key(&self, other: &Self) -> Ordering {
        let rho_key = |r: Option<SoftWeight>| match r {
            None => f64::NEG_INFINITY,
            Some(SoftWeight::Finite(v)) => v,
            Some(SoftWeight::SoftOnly) => f64::INFINITY,
        };
        self.kind
            .cmp(&other.kind)
            .then(
                self.temperature
                    .unwrap_or(0.0)
                    .total_cmp(&other.temperature.unwrap_or(0.0)),
            )
            .then(rho_key(self.rho).total_cmp(&rho_key(other.rho)))
    }

    /// `T` column text.
    pub fn temperature_text(&self) -> String {
        self.temperature
            .map_or_else(|| "-".into(), |t| t.to_string())
    }

    /// `ρ` column text.
    pub fn rho_text(&self) -> String {
        self.rho.map_or_else(|| "-".into(), |r| r.to_string())
    }

    /// File-name friendly identifier.
    pub fn slug(&self) -> String {
        let mut s = self.kind.name().to_string();
        if let Some(t) = self.temperature {
            s.push_str(&format!("_T{t}"));
        }
        if let Some(r) = self.rho {
            s.push_str(&format!("_rho{r}"));
        }
        s
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        if let Some(t) = self.temperature {
            write!(f, " T={t}")?;
        }
        if let Some(r) = self.rho {
            write!(f, " rho={r}")?;
        }
        Ok(())
    }
}

/// Parses a `ρ` value; `inf` selects soft-only mode.
pub fn parse_rho(s: &str) -> Result<SoftWeight> {
    match s.trim() {
        "inf" | "∞" => Ok(SoftWeight::SoftOnly),
        v => v
            .parse::<f64>()
            .ok()
            .filter(|r| r.is_finite() && *r >= 0.0)
            .map(SoftWeight::Finite)
            .ok_or_else(|| Error::InvalidConfig(format!("bad soft weight '{v}'"))),
    }
}
