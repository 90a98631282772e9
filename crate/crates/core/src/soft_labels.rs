//! Per-class mean soft labels.
//!
//! Row `c` of a [`MeanSoftLabelTable`] is the average of the source model's
//! tempered posteriors over every source sample labelled `c`. Adaptation
//! selects rows by label, so each class always receives the same soft target.

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::{class_index, Provenance, SoftTargetBatch, SIMPLEX_TOLERANCE};
use crate::math::{argmax, softmax_rows, Matrix};
use crate::network::{ByteReader, ModelParams};

/// Samples per forward pass while accumulating a table.
pub const DEFAULT_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct MeanSoftLabelTable {
    rows: Matrix,
    temperature: f64,
    counts: Vec<u64>,
    fingerprint: [u8; 32],
}

impl MeanSoftLabelTable {
    /// Builds a table from explicit rows, enforcing the row-stochastic invariant.
    pub fn from_parts(
        rows: Matrix,
        temperature: f64,
        counts: Vec<u64>,
        fingerprint: [u8; 32],
    ) -> Result<Self> {
        let d = rows.rows();
        if rows.cols() != d || counts.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "table is {}x{} with {} counts",
                rows.rows(),
                rows.cols(),
                counts.len()
            )));
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::MissingClassSamples(c as u32 + 1));
        }
        for (r, row) in rows.iter_rows().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOLERANCE || row.iter().any(|v| !(0.0..=1.0).contains(v))
            {
                return Err(Error::InvalidTargets { row: r, sum });
            }
        }
        Ok(Self {
            rows,
            temperature,
            counts,
            fingerprint,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.rows.rows()
    }

    /// Row `c − 1` holds the mean soft label of class `c`.
    pub fn rows(&self) -> &Matrix {
        &self.rows
    }

    /// Mean soft label of a 1-based class.
    pub fn row(&self, label: u32) -> Result<&[f64]> {
        Ok(self.rows.row(class_index(label, self.num_classes())?))
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }

    /// Fails unless the table was built at temperature `t`.
    pub fn ensure_temperature(&self, t: f64) -> Result<()> {
        if self.temperature.to_bits() != t.to_bits() {
            return Err(Error::TemperatureMismatch {
                table: self.temperature,
                requested: t,
            });
        }
        Ok(())
    }

    /// Fraction of rows whose largest entry sits on the diagonal.
    pub fn diagonal_dominance(&self) -> f64 {
        let d = self.num_classes();
        if d == 0 {
            return 0.0;
        }
        let hits = self
            .rows
            .iter_rows()
            .enumerate()
            .filter(|(c, row)| argmax(row) == *c)
            .count();
        hits as f64 / d as f64
    }

    /// Human-readable dump, one class per line.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# mean soft labels T={} classes={} teacher={}\n",
            self.temperature,
            self.num_classes(),
            hex(&self.fingerprint)
        );
        for (c, row) in self.rows.iter_rows().enumerate() {
            s.push_str(&format!("{}\tn={}", c + 1, self.counts[c]));
            for v in row {
                s.push_str(&format!("\t{v:.6}"));
            }
            s.push('\n');
        }
        s
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Averages the source model's tempered posteriors per class.
///
/// Each entry is summed over its class in ascending order of value, then
/// divided once by `N_c`. The result is bit-identical for any ordering of the
/// samples and any chunk size.
pub fn compute_mean_soft_labels(
    source_model: &ModelParams,
    source_data: &LabeledDataset,
    t: f64,
) -> Result<MeanSoftLabelTable> {
    compute_mean_soft_labels_chunked(source_model, source_data, t, DEFAULT_CHUNK)
}

pub fn compute_mean_soft_labels_chunked(
    source_model: &ModelParams,
    source_data: &LabeledDataset,
    t: f64,
    chunk: usize,
) -> Result<MeanSoftLabelTable> {
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::InvalidTemperature(t));
    }
    let d = source_model.num_classes();
    if source_data.num_classes() != d {
        return Err(Error::DimensionMismatch(format!(
            "dataset has {} classes, model outputs {d}",
            source_data.num_classes()
        )));
    }
    let mut counts = vec![0u64; d];
    for &l in source_data.labels() {
        counts[class_index(l, d)?] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::MissingClassSamples(c as u32 + 1));
    }

    // per class, per output column: every contribution
    let mut contributions: Vec<Vec<Vec<f64>>> = counts
        .iter()
        .map(|&n| vec![Vec::with_capacity(n as usize); d])
        .collect();
    let n = source_data.len();
    let chunk = chunk.max(1);
    let indices: Vec<usize> = (0..n).collect();
    for block in indices.chunks(chunk) {
        let x = source_data.features().select_rows(block);
        let probs = softmax_rows(&source_model.logits(&x)?, t)?;
        for (row, &i) in probs.iter_rows().zip(block) {
            let c = class_index(source_data.labels()[i], d)?;
            for (col, &p) in contributions[c].iter_mut().zip(row) {
                col.push(p);
            }
        }
    }

    let mut rows = Matrix::zeros(d, d);
    for (c, per_col) in contributions.iter_mut().enumerate() {
        for (j, vals) in per_col.iter_mut().enumerate() {
            vals.sort_by(f64::total_cmp);
            let sum: f64 = vals.iter().sum();
            rows.set(c, j, sum / counts[c] as f64);
        }
    }
    MeanSoftLabelTable::from_parts(rows, t, counts, source_model.fingerprint())
}

/// One table row per label, in label order.
pub fn lookup(table: &MeanSoftLabelTable, labels: &[u32]) -> Result<SoftTargetBatch> {
    let d = table.num_classes();
    let mut data = Vec::with_capacity(labels.len() * d);
    for &l in labels {
        data.extend_from_slice(table.rows.row(class_index(l, d)?));
    }
    SoftTargetBatch::new(
        Matrix::new(labels.len(), d, data)?,
        table.temperature,
        Provenance::MeanTable,
    )
}

const TABLE_MAGIC: &[u8; 8] = b"SSHFTTBL";
const TABLE_VERSION: u32 = 1;

/// Table encoding:
///
/// ```text
/// magic "SSHFTTBL" | version u32 | D_C u32 | T f64 | counts u64[D_C]
/// | fingerprint [u8; 32] | rows f64[D_C*D_C] row-major
/// ```
///
/// All little-endian.
pub fn save_table(table: &MeanSoftLabelTable) -> Vec<u8> {
    let d = table.num_classes();
    let mut out = Vec::with_capacity(56 + 8 * d + 8 * d * d);
    out.extend_from_slice(TABLE_MAGIC);
    out.extend_from_slice(&TABLE_VERSION.to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&table.temperature.to_le_bytes());
    for &n in &table.counts {
        out.extend_from_slice(&n.to_le_bytes());
    }
    out.extend_from_slice(&table.fingerprint);
    for v in table.rows.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn load_table(bytes: &[u8]) -> Result<MeanSoftLabelTable> {
    let corrupt = |offset: usize, reason: String| Error::CorruptTable { offset, reason };
    let mut r = ByteReader::new(bytes);
    if r.take(8) != Some(TABLE_MAGIC.as_slice()) {
        return Err(corrupt(0, "bad magic".into()));
    }
    let version = r
        .u32()
        .ok_or_else(|| corrupt(r.pos, "truncated version".into()))?;
    if version != TABLE_VERSION {
        return Err(corrupt(8, format!("unsupported version {version}")));
    }
    let d = r
        .u32()
        .ok_or_else(|| corrupt(r.pos, "truncated class count".into()))? as usize;
    let t = r
        .f64()
        .ok_or_else(|| corrupt(r.pos, "truncated temperature".into()))?;
    let expected = d
        .checked_mul(8)
        .and_then(|c| d.checked_mul(d)?.checked_mul(8)?.checked_add(c + 32));
    if expected != Some(r.remaining()) {
        return Err(corrupt(
            r.pos,
            format!("{} body bytes for {d} classes", r.remaining()),
        ));
    }
    let counts: Vec<u64> = (0..d).map(|_| r.u64().unwrap()).collect();
    let mut fingerprint = [0u8; 32];
    fingerprint.copy_from_slice(r.take(32).unwrap());
    let body_start = r.pos;
    let rows = Matrix::new(d, d, r.f64s(d * d).unwrap())?;
    MeanSoftLabelTable::from_parts(rows, t, counts, fingerprint).map_err(|e| match e {
        Error::InvalidTargets { row, sum } => corrupt(
            body_start + row * d * 8,
            format!("row {} sums to {sum}", row + 1),
        ),
        other => corrupt(body_start, other.to_string()),
    })
}

/// Non-fatal findings when loading a table against a known teacher.
#[derive(Debug, Clone, PartialEq)]
pub enum TableWarning {
    FingerprintMismatch { table: String, expected: String },
}

impl std::fmt::Display for TableWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TableWarning::FingerprintMismatch { table, expected } => write!(
                f,
                "FingerprintMismatch: table built from teacher {table}, expected {expected}"
            ),
        }
    }
}

/// Loads a table and reports, without failing, whether it was built from
/// the teacher identified by `expected`.
pub fn load_table_checked(
    bytes: &[u8],
    expected: &[u8; 32],
) -> Result<(MeanSoftLabelTable, Option<TableWarning>)> {
    let table = load_table(bytes)?;
    let warning = (&table.fingerprint != expected).then(|| TableWarning::FingerprintMismatch {
        table: hex(&table.fingerprint),
        expected: hex(expected),
    });
    Ok((table, warning))
}
