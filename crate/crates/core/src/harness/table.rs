use super::strategy::{parse_rho, Strategy, StrategyKind};
use crate::error::{Error, Result};

/// One (strategy, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub strategy: Strategy,
    pub seed: u64,
    pub test_acc: f64,
    /// Best validation accuracy reached during adaptation.
    pub val_acc: f64,
    pub epochs: usize,
    pub halvings: usize,
    /// Fingerprint of the source model the run started from or learned from.
    /// Not part of the emitted table.
    pub teacher: Option<[u8; 32]>,
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }

    /// Standard error of the mean over `n` values.
    pub fn std_error(&self, n: usize) -> f64 {
        self.std / (n as f64).sqrt()
    }
}

/// Seed aggregate of one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub strategy: Strategy,
    pub n: usize,
    pub test_acc: Summary,
    pub val_acc: Summary,
    pub epochs: Summary,
    pub halvings: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsTable {
    rows: Vec<ResultRow>,
}

impl ResultsTable {
    /// Sorts rows by (strategy, T, ρ, seed). Duplicate keys are rejected.
    pub fn new(mut rows: Vec<ResultRow>) -> Result<Self> {
        rows.sort_by(|a, b| a.strategy.cmp_key(&b.strategy).then(a.seed.cmp(&b.seed)));
        for w in rows.windows(2) {
            if w[0].strategy == w[1].strategy && w[0].seed == w[1].seed {
                return Err(Error::InvalidConfig(format!(
                    "duplicate result for {} seed {}",
                    w[0].strategy, w[0].seed
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[ResultRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows of one cell, in seed order.
    pub fn cell(&self, strategy: &Strategy) -> Vec<&ResultRow> {
        self.rows
            .iter()
            .filter(|r| &r.strategy == strategy)
            .collect()
    }

    /// Rows of every cell with the given kind.
    pub fn kind(&self, kind: StrategyKind) -> Vec<&ResultRow> {
        self.rows
            .iter()
            .filter(|r| r.strategy.kind() == kind)
            .collect()
    }

    /// One aggregate per distinct cell, in table order.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut out = Vec::new();
        let mut start = 0;
        while start < self.rows.len() {
            let strategy = self.rows[start].strategy;
            let end = start
                + self.rows[start..]
                    .iter()
                    .take_while(|r| r.strategy == strategy)
                    .count();
            let group = &self.rows[start..end];
            let col =
                |f: fn(&ResultRow) -> f64| Summary::of(&group.iter().map(f).collect::<Vec<_>>());
            out.push(Aggregate {
                strategy,
                n: group.len(),
                test_acc: col(|r| r.test_acc),
                val_acc: col(|r| r.val_acc),
                epochs: col(|r| r.epochs as f64),
                halvings: col(|r| r.halvings as f64),
            });
            start = end;
        }
        out
    }

    pub fn aggregate(&self, strategy: &Strategy) -> Option<Aggregate> {
        self.aggregates()
            .into_iter()
            .find(|a| &a.strategy == strategy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Tsv,
    Markdown,
}

impl TableFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tsv" => Some(Self::Tsv),
            "markdown" | "md" => Some(Self::Markdown),
            _ => None,
        }
    }
}

pub const COLUMNS: [&str; 8] = [
    "strategy", "T", "rho", "seed", "test_acc", "val_acc", "epochs", "halvings",
];

const AGGREGATE_PREFIX: &str = "mean(n=";

fn render_line(cells: &[String], format: TableFormat) -> String {
    match format {
        TableFormat::Tsv => format!("{}\n", cells.join("\t")),
        TableFormat::Markdown => format!("| {} |\n", cells.join(" | ")),
    }
}

fn pm(s: Summary) -> String {
    format!("{:.4}±{:.4}", s.mean, s.std)
}

/// Raw rows in table order, then one flagged aggregate line per cell.
pub fn emit_table(results: &ResultsTable, format: TableFormat) -> String {
    let header: Vec<String> = COLUMNS.iter().map(|c| c.to_string()).collect();
    let mut out = render_line(&header, format);
    if format == TableFormat::Markdown {
        out.push_str(&render_line(
            &vec!["---".to_string(); COLUMNS.len()],
            format,
        ));
    }
    for r in results.rows() {
        let cells = vec![
            r.strategy.kind().name().to_string(),
            r.strategy.temperature_text(),
            r.strategy.rho_text(),
            r.seed.to_string(),
            format!("{:.4}", r.test_acc),
            format!("{:.4}", r.val_acc),
            r.epochs.to_string(),
            r.halvings.to_string(),
        ];
        out.push_str(&render_line(&cells, format));
    }
    for a in results.aggregates() {
        let cells = vec![
            a.strategy.kind().name().to_string(),
            a.strategy.temperature_text(),
            a.strategy.rho_text(),
            format!("{AGGREGATE_PREFIX}{})", a.n),
            pm(a.test_acc),
            pm(a.val_acc),
            pm(a.epochs),
            pm(a.halvings),
        ];
        out.push_str(&render_line(&cells, format));
    }
    out
}

/// Reads the raw rows of a TSV table back; aggregate lines are skipped and
/// recomputed on demand. Accuracies carry the 4 printed decimals only.
pub fn parse_tsv(text: &str) -> Result<ResultsTable> {
    let mut lines = text.lines().enumerate();
    let bad = |n: usize, m: String| Error::InvalidConfig(format!("results line {}: {m}", n + 1));
    match lines.next() {
        Some((_, h)) if h.split('\t').eq(COLUMNS.iter().copied()) => {}
        _ => return Err(bad(0, "missing or unexpected header".into())),
    }
    let mut rows = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != COLUMNS.len() {
            return Err(bad(
                n,
                format!("expected {} fields, got {}", COLUMNS.len(), f.len()),
            ));
        }
        if f[3].starts_with(AGGREGATE_PREFIX) {
            continue;
        }
        let kind = StrategyKind::parse(f[0]).map_err(|e| bad(n, e.to_string()))?;
        let temperature = match f[1] {
            "-" => None,
            t => Some(
                t.parse::<f64>()
                    .map_err(|_| bad(n, format!("bad T '{t}'")))?,
            ),
        };
        let rho = match f[2] {
            "-" => None,
            r => Some(parse_rho(r).map_err(|e| bad(n, e.to_string()))?),
        };
        let strategy = Strategy::new(kind, temperature, rho).map_err(|e| bad(n, e.to_string()))?;
        let num = |i: usize| {
            f[i].parse::<f64>()
                .map_err(|_| bad(n, format!("bad {} '{}'", COLUMNS[i], f[i])))
        };
        let int = |i: usize| {
            f[i].parse::<usize>()
                .map_err(|_| bad(n, format!("bad {} '{}'", COLUMNS[i], f[i])))
        };
        rows.push(ResultRow {
            strategy,
            seed: f[3]
                .parse()
                .map_err(|_| bad(n, format!("bad seed '{}'", f[3])))?,
            test_acc: num(4)?,
            val_acc: num(5)?,
            epochs: int(6)?,
            halvings: int(7)?,
            teacher: None,
        });
    }
    ResultsTable::new(rows)
}
