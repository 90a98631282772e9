//! Training criteria over logits: hard cross entropy against one-hot labels,
//! soft cross entropy against probability targets at a temperature, and the
//! weighted combination used by distillation, KL regularisation and mean
//! soft-label adaptation.
//!
//! Every loss returns its value together with `dL/dlogits`. Class labels are
//! 1-based throughout (`1..=num_classes`).
//!
//! In the combined objective the soft-loss gradient is multiplied by `T²` so
//! that the hard and soft branches keep comparable magnitudes as the
//! temperature changes. For `T > 1` the returned gradient is therefore the
//! exact gradient of `hard + ρ·T²·soft`, while the returned value stays
//! `hard + ρ·soft`.

use crate::error::{Error, Result};
use crate::math::{log_softmax_tempered, softmax_rows, softmax_tempered, Matrix};
use crate::network::ModelParams;

/// Maximum deviation from a unit row sum accepted (and then renormalised).
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// Rows closer than this to a unit sum are already normalised up to rounding
/// and are kept verbatim.
const ROUNDING_SLACK: f64 = 1e-12;

/// Where a batch of soft targets came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Source model evaluated on target-domain inputs (distillation, KLD).
    TeacherOnTarget,
    /// Source model evaluated on the source half of parallel pairs.
    TeacherOnParallelSource,
    /// Rows looked up from a mean soft-label table.
    MeanTable,
}

/// One probability vector per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargetBatch {
    probs: Matrix,
    temperature: f64,
    provenance: Provenance,
}

impl SoftTargetBatch {
    /// Validates every row against the probability simplex. Rows within
    /// [`SIMPLEX_TOLERANCE`] of summing to one are renormalised; rows that
    /// only carry rounding error are left untouched.
    pub fn new(mut probs: Matrix, temperature: f64, provenance: Provenance) -> Result<Self> {
        for r in 0..probs.rows() {
            let row = probs.row_mut(r);
            let sum: f64 = row.iter().sum();
            let in_range = row
                .iter()
                .all(|&v| v.is_finite() && (0.0..=1.0 + SIMPLEX_TOLERANCE).contains(&v));
            if !in_range || (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
                return Err(Error::InvalidTargets { row: r, sum });
            }
            if (sum - 1.0).abs() > ROUNDING_SLACK {
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }
        Ok(Self {
            probs,
            temperature,
            provenance,
        })
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.rows() == 0
    }

    /// The listed rows, in order. Already validated rows are copied verbatim.
    pub fn select_rows(&self, indices: &[usize]) -> SoftTargetBatch {
        SoftTargetBatch {
            probs: self.probs.select_rows(indices),
            temperature: self.temperature,
            provenance: self.provenance,
        }
    }
}

/// Weight on the soft branch of a combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SoftWeight {
    Finite(f64),
    /// Soft loss only; the hard branch is dropped.
    SoftOnly,
}

impl std::fmt::Display for SoftWeight {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SoftWeight::Finite(r) => write!(f, "{r}"),
            SoftWeight::SoftOnly => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    temperature: f64,
    soft: SoftWeight,
}

impl LossWeights {
    pub fn new(temperature: f64, soft: SoftWeight) -> Result<Self> {
        if !(temperature.is_finite() && temperature >= 1.0) {
            return Err(Error::InvalidWeights(format!(
                "temperature {temperature} must be finite and >= 1"
            )));
        }
        if let SoftWeight::Finite(rho) = soft {
            if !(rho.is_finite() && rho >= 0.0) {
                return Err(Error::InvalidWeights(format!(
                    "soft weight {rho} must be finite and >= 0"
                )));
            }
        }
        Ok(Self { temperature, soft })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn soft(&self) -> SoftWeight {
        self.soft
    }
}

/// A scalar loss and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Matrix,
}

/// Maps a 1-based label to a 0-based column.
pub fn class_index(label: u32, num_classes: usize) -> Result<usize> {
    if label == 0 || label as usize > num_classes {
        return Err(Error::LabelOutOfRange { label, num_classes });
    }
    Ok(label as usize - 1)
}

fn check_batch(logits: &Matrix, rows: usize, what: &str) -> Result<()> {
    if logits.rows() != rows {
        return Err(Error::DimensionMismatch(format!(
            "{} logit rows but {rows} {what}",
            logits.rows()
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood of the labels under `softmax(z)`.
/// Gradient per row is `(p − onehot)/N`.
pub fn hard_loss(logits: &Matrix, labels: &[u32]) -> Result<LossOutput> {
    check_batch(logits, labels.len(), "labels")?;
    let n = logits.rows();
    let d = logits.cols();
    let mut grad = Matrix::zeros(n, d);
    if n == 0 {
        return Ok(LossOutput { value: 0.0, grad });
    }
    let nf = n as f64;
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let c = class_index(label, d)?;
        let z = logits.row(i);
        let log_p = log_softmax_tempered(z, 1.0)?;
        let p = softmax_tempered(z, 1.0)?;
        total += -log_p[c];
        let g = grad.row_mut(i);
        for (j, (g, &pj)) in g.iter_mut().zip(&p).enumerate() {
            let y = if j == c { 1.0 } else { 0.0 };
            *g = (pj - y) / nf;
        }
    }
    Ok(LossOutput {
        value: total / nf,
        grad,
    })
}

/// Mean `−Σ_c target_c · log q(c|x)` with `q = softmax(z / t)`.
/// Gradient per row is `(q − target)/(N·t)`, without the `T²` factor.
pub fn soft_cross_entropy(
    logits: &Matrix,
    targets: &SoftTargetBatch,
    t: f64,
) -> Result<LossOutput> {
    check_batch(logits, targets.len(), "target rows")?;
    if targets.probs().cols() != logits.cols() {
        return Err(Error::DimensionMismatch(format!(
            "{} logit columns but {} target columns",
            logits.cols(),
            targets.probs().cols()
        )));
    }
    let n = logits.rows();
    let mut grad = Matrix::zeros(n, logits.cols());
    if n == 0 {
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::InvalidTemperature(t));
        }
        return Ok(LossOutput { value: 0.0, grad });
    }
    let scale = n as f64 * t;
    let mut total = 0.0;
    for i in 0..n {
        let z = logits.row(i);
        let target = targets.probs().row(i);
        let log_q = log_softmax_tempered(z, t)?;
        let q = softmax_tempered(z, t)?;
        let row_loss: f64 = target.iter().zip(&log_q).map(|(&y, &lq)| y * lq).sum();
        total += -row_loss;
        for ((g, &qj), &yj) in grad.row_mut(i).iter_mut().zip(&q).zip(target) {
            *g = (qj - yj) / scale;
        }
    }
    Ok(LossOutput {
        value: total / n as f64,
        grad,
    })
}

/// `hard + ρ·soft`, or `soft` alone in soft-only mode. The soft gradient is
/// scaled by `ρ·T²` (`T²` in soft-only mode).
pub fn combined_loss(
    logits: &Matrix,
    labels: &[u32],
    targets: &SoftTargetBatch,
    w: &LossWeights,
) -> Result<LossOutput> {
    let t = w.temperature();
    let soft = soft_cross_entropy(logits, targets, t)?;
    match w.soft() {
        SoftWeight::SoftOnly => {
            // labels still have to be valid even though the hard branch is unused
            for &l in labels {
                class_index(l, logits.cols())?;
            }
            let mut grad = soft.grad;
            grad.scale(t * t);
            Ok(LossOutput {
                value: soft.value,
                grad,
            })
        }
        SoftWeight::Finite(rho) => {
            let hard = hard_loss(logits, labels)?;
            let factor = rho * t * t;
            let mut grad = hard.grad;
            for (g, &s) in grad.data_mut().iter_mut().zip(soft.grad.data()) {
                *g += factor * s;
            }
            Ok(LossOutput {
                value: hard.value + rho * soft.value,
                grad,
            })
        }
    }
}

/// Tempered posteriors of a (frozen) teacher over `batch`.
pub fn teacher_soft_targets(
    teacher: &ModelParams,
    batch: &Matrix,
    t: f64,
    provenance: Provenance,
) -> Result<SoftTargetBatch> {
    let logits = teacher.logits(batch)?;
    SoftTargetBatch::new(softmax_rows(&logits, t)?, t, provenance)
}

/// Shannon entropy in nats; `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// One-hot rows for 1-based labels.
pub fn one_hot(labels: &[u32], num_classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(labels.len(), num_classes);
    for (i, &l) in labels.iter().enumerate() {
        m.set(i, class_index(l, num_classes)?, 1.0);
    }
    Ok(m)
}
