//! Synthetic source/target domains.
//!
//! Classes are isotropic Gaussian blobs whose means sit evenly on a circle in
//! a random 2-D plane of the feature space, so neighbouring classes are
//! genuinely more confusable than distant ones. The target domain applies one
//! rigid motion to every sample: a rotation by `rotation` radians inside the
//! class plane followed by a translation of `shift · blob_sigma` along a fixed
//! in-plane direction. Class adjacency is therefore identical in both domains
//! while a model fitted to the source sees the target displaced.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::losses::class_index;
use crate::math::{Matrix, SeededRng};
use crate::network::ByteReader;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Domain {
    fn tag(self) -> u8 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Domain::Source),
            1 => Some(Domain::Target),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Split::Train),
            1 => Some(Split::Validation),
            2 => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// Parameters of the synthetic domain pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub source_train_per_class: usize,
    pub target_train_per_class: usize,
    pub validation_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of every blob along every axis.
    pub blob_sigma: f64,
    /// Distance between neighbouring class means, in units of `blob_sigma`.
    pub separation: f64,
    /// Target translation length, in units of `blob_sigma`.
    pub shift: f64,
    /// Target rotation inside the class plane, radians.
    pub rotation: f64,
    /// Fraction of target training labels replaced by a different class.
    pub label_noise: f64,
    pub geometry_seed: u64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dim: 20,
            source_train_per_class: 1000,
            target_train_per_class: 50,
            validation_per_class: 100,
            test_per_class: 200,
            blob_sigma: 1.0,
            separation: 3.0,
            shift: 0.0,
            rotation: 0.0,
            label_noise: 0.0,
            geometry_seed: 0,
        }
    }
}

impl ShiftConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.dim < 2 {
            return bad("feature dimension must be at least 2");
        }
        if [
            self.source_train_per_class,
            self.target_train_per_class,
            self.validation_per_class,
            self.test_per_class,
        ]
        .contains(&0)
        {
            return bad("every split needs at least one sample per class");
        }
        if !(self.blob_sigma.is_finite() && self.blob_sigma > 0.0) {
            return bad("blob_sigma must be positive");
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return bad("separation must be >= 0");
        }
        if !(self.shift.is_finite() && self.shift >= 0.0) {
            return bad("shift must be >= 0");
        }
        if !self.rotation.is_finite() {
            return bad("rotation must be finite");
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return bad("label_noise must be in [0, 1)");
        }
        Ok(())
    }
}

/// Generator settings a dataset was drawn with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Origin {
    pub config: ShiftConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Matrix,
    /// 1-based class labels.
    labels: Vec<u32>,
    num_classes: usize,
    domain: Domain,
    split: Split,
    origin: Option<Origin>,
}

impl LabeledDataset {
    pub fn new(
        features: Matrix,
        labels: Vec<u32>,
        num_classes: usize,
        domain: Domain,
        split: Split,
    ) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        for &l in &labels {
            class_index(l, num_classes)?;
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            domain,
            split,
            origin: None,
        })
    }

    pub fn with_origin(mut self, origin: Origin) -> Self {
        self.origin = Some(origin);
        self
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn origin(&self) -> Option<&Origin> {
        self.origin.as_ref()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples per class, indexed by `label − 1`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize - 1] += 1;
        }
        counts
    }

    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            domain: self.domain,
            split: self.split,
            origin: self.origin,
        }
    }

    /// `self` followed by `other`. Domain and split are taken from `self`.
    pub fn concat(&self, other: &LabeledDataset) -> Result<LabeledDataset> {
        if self.num_classes != other.num_classes {
            return Err(Error::DimensionMismatch(format!(
                "{} classes vs {} classes",
                self.num_classes, other.num_classes
            )));
        }
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(LabeledDataset {
            features: self.features.vstack(&other.features)?,
            labels,
            num_classes: self.num_classes,
            domain: self.domain,
            split: self.split,
            origin: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSplits {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
}

/// Source/target samples drawn from the same latent point, sharing a label.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelDataset {
    source: Matrix,
    target: Matrix,
    labels: Vec<u32>,
    num_classes: usize,
}

impl ParallelDataset {
    pub fn new(
        source: Matrix,
        target: Matrix,
        labels: Vec<u32>,
        num_classes: usize,
    ) -> Result<Self> {
        if source.shape() != target.shape() || source.rows() != labels.len() {
            return Err(Error::DimensionMismatch(
                "parallel halves must have equal shapes and one label per pair".into(),
            ));
        }
        for &l in &labels {
            class_index(l, num_classes)?;
        }
        Ok(Self {
            source,
            target,
            labels,
            num_classes,
        })
    }

    pub fn source(&self) -> &Matrix {
        &self.source
    }

    pub fn target(&self) -> &Matrix {
        &self.target
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The two halves as ordinary datasets (target half tagged as train).
    pub fn halves(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        Ok((
            LabeledDataset::new(
                self.source.clone(),
                self.labels.clone(),
                self.num_classes,
                Domain::Source,
                Split::Train,
            )?,
            LabeledDataset::new(
                self.target.clone(),
                self.labels.clone(),
                self.num_classes,
                Domain::Target,
                Split::Train,
            )?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainPair {
    pub source: DomainSplits,
    pub target: DomainSplits,
    pub parallel: ParallelDataset,
}

/// Class means and the target rigid motion, fixed by the geometry seed.
#[derive(Debug, Clone)]
pub struct Geometry {
    means: Matrix,
    plane: [Vec<f64>; 2],
    translation: Vec<f64>,
    rotation: f64,
}

impl Geometry {
    pub fn new(cfg: &ShiftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::derive(cfg.geometry_seed, "geometry");
        let basis = orthonormal_pair(cfg.dim, &mut rng);
        let k = cfg.num_classes;
        // neighbouring means `separation` apart on a regular polygon
        let radius = cfg.separation * cfg.blob_sigma / (2.0 * (PI / k as f64).sin());
        let mut means = Matrix::zeros(k, cfg.dim);
        for c in 0..k {
            let phi = 2.0 * PI * c as f64 / k as f64;
            let (s, co) = phi.sin_cos();
            for (j, m) in means.row_mut(c).iter_mut().enumerate() {
                *m = radius * (co * basis[0][j] + s * basis[1][j]);
            }
        }
        let translation = basis[0]
            .iter()
            .map(|v| v * cfg.shift * cfg.blob_sigma)
            .collect();
        Ok(Self {
            means,
            plane: basis,
            translation,
            rotation: cfg.rotation,
        })
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }

    /// Maps a source-domain point to the target domain.
    pub fn to_target(&self, x: &[f64]) -> Vec<f64> {
        let [u, v] = &self.plane;
        let a: f64 = x.iter().zip(u).map(|(x, u)| x * u).sum();
        let b: f64 = x.iter().zip(v).map(|(x, v)| x * v).sum();
        let (s, c) = self.rotation.sin_cos();
        let (ra, rb) = (c * a - s * b, s * a + c * b);
        x.iter()
            .enumerate()
            .map(|(j, &xj)| xj + (ra - a) * u[j] + (rb - b) * v[j] + self.translation[j])
            .collect()
    }
}

/// Gram–Schmidt on two Gaussian vectors.
fn orthonormal_pair(dim: usize, rng: &mut SeededRng) -> [Vec<f64>; 2] {
    let normalize = |v: &mut Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
    };
    let mut u = rng.standard_normal(dim);
    normalize(&mut u);
    let mut v = rng.standard_normal(dim);
    let proj: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(&u).for_each(|(x, a)| *x -= proj * a);
    normalize(&mut v);
    [u, v]
}

/// Latent draws for `per_class` samples of every class, shuffled.
fn draw_latent(
    geo: &Geometry,
    cfg: &ShiftConfig,
    per_class: usize,
    rng: &mut SeededRng,
) -> (Vec<Vec<f64>>, Vec<u32>) {
    let mut labels: Vec<u32> = (0..cfg.num_classes)
        .flat_map(|c| std::iter::repeat_n(c as u32 + 1, per_class))
        .collect();
    rng.shuffle(&mut labels);
    let points = labels
        .iter()
        .map(|&l| {
            let mean = geo.means.row(l as usize - 1);
            rng.standard_normal(cfg.dim)
                .into_iter()
                .zip(mean)
                .map(|(e, m)| m + cfg.blob_sigma * e)
                .collect()
        })
        .collect();
    (points, labels)
}

fn build(
    rows: &[Vec<f64>],
    labels: Vec<u32>,
    cfg: &ShiftConfig,
    domain: Domain,
    split: Split,
    origin: Origin,
) -> Result<LabeledDataset> {
    Ok(LabeledDataset::new(
        Matrix::from_rows(rows)?,
        labels,
        cfg.num_classes,
        domain,
        split,
    )?
    .with_origin(origin))
}

/// Draws every split of both domains plus the parallel pairs.
///
/// The target training split is also the target half of the parallel pairs;
/// the source half holds the same latent points before the domain motion.
/// Label noise, if configured, is applied to the target training labels after
/// the pairs are formed, so pairs keep their clean shared label.
pub fn generate_domain_pair(cfg: &ShiftConfig, rng: &mut SeededRng) -> Result<DomainPair> {
    let geo = Geometry::new(cfg)?;
    let origin = Origin {
        config: *cfg,
        seed: rng.seed(),
    };

    let mut source_split = |per_class, split| {
        let (pts, labels) = draw_latent(&geo, cfg, per_class, rng);
        build(&pts, labels, cfg, Domain::Source, split, origin)
    };
    let source = DomainSplits {
        train: source_split(cfg.source_train_per_class, Split::Train)?,
        validation: source_split(cfg.validation_per_class, Split::Validation)?,
        test: source_split(cfg.test_per_class, Split::Test)?,
    };

    let (latent, clean) = draw_latent(&geo, cfg, cfg.target_train_per_class, rng);
    let moved: Vec<Vec<f64>> = latent.iter().map(|x| geo.to_target(x)).collect();
    let parallel = ParallelDataset::new(
        Matrix::from_rows(&latent)?,
        Matrix::from_rows(&moved)?,
        clean.clone(),
        cfg.num_classes,
    )?;
    let mut noisy = clean;
    if cfg.label_noise > 0.0 {
        for l in &mut noisy {
            if rng.uniform() < cfg.label_noise {
                let other = rng.below(cfg.num_classes - 1) as u32 + 1;
                *l = if other >= *l { other + 1 } else { other };
            }
        }
    }
    let target_train = build(&moved, noisy, cfg, Domain::Target, Split::Train, origin)?;

    let mut target_split = |per_class, split| {
        let (pts, labels) = draw_latent(&geo, cfg, per_class, rng);
        let moved: Vec<Vec<f64>> = pts.iter().map(|x| geo.to_target(x)).collect();
        build(&moved, labels, cfg, Domain::Target, split, origin)
    };
    let target = DomainSplits {
        train: target_train,
        validation: target_split(cfg.validation_per_class, Split::Validation)?,
        test: target_split(cfg.test_per_class, Split::Test)?,
    };
    Ok(DomainPair {
        source,
        target,
        parallel,
    })
}

const DATA_MAGIC: &[u8; 8] = b"SSHFTDAT";
const DATA_VERSION: u32 = 1;

/// Dataset encoding (little-endian):
///
/// ```text
/// magic "SSHFTDAT" | version u32 | has_origin u8
/// | classes u32 | dim u32 | source_train u32 | target_train u32 | validation u32 | test u32
/// | blob_sigma f64 | separation f64 | shift f64 | rotation f64 | label_noise f64 | geometry_seed u64
/// | seed u64 | domain u8 | split u8 | N u64 | d u64 | D_C u64
/// | features f64[N*d] row-major | labels u32[N]
/// ```
///
/// The config and seed fields are zero when the dataset has no recorded origin.
pub fn save_dataset(ds: &LabeledDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(128 + ds.features.data().len() * 8 + ds.len() * 4);
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&DATA_VERSION.to_le_bytes());
    out.push(u8::from(ds.origin.is_some()));
    let (cfg, seed) = ds.origin.map_or(
        (
            ShiftConfig {
                num_classes: 0,
                dim: 0,
                source_train_per_class: 0,
                target_train_per_class: 0,
                validation_per_class: 0,
                test_per_class: 0,
                blob_sigma: 0.0,
                separation: 0.0,
                shift: 0.0,
                rotation: 0.0,
                label_noise: 0.0,
                geometry_seed: 0,
            },
            0,
        ),
        |o| (o.config, o.seed),
    );
    for v in [
        cfg.num_classes,
        cfg.dim,
        cfg.source_train_per_class,
        cfg.target_train_per_class,
        cfg.validation_per_class,
        cfg.test_per_class,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in [
        cfg.blob_sigma,
        cfg.separation,
        cfg.shift,
        cfg.rotation,
        cfg.label_noise,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&cfg.geometry_seed.to_le_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    out.push(ds.domain.tag());
    out.push(ds.split.tag());
    for v in [ds.len(), ds.dim(), ds.num_classes] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for v in ds.features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in &ds.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn load_dataset(bytes: &[u8]) -> Result<LabeledDataset> {
    let corrupt = |offset: usize, reason: &str| Error::CorruptDataset {
        offset,
        reason: reason.to_string(),
    };
    let mut r = ByteReader::new(bytes);
    if r.take(8) != Some(DATA_MAGIC.as_slice()) {
        return Err(corrupt(0, "bad magic"));
    }
    let version = r.u32().ok_or_else(|| corrupt(r.pos, "truncated header"))?;
    if version != DATA_VERSION {
        return Err(corrupt(8, &format!("unsupported version {version}")));
    }
    let header = (|| {
        let has_origin = r.u8()?;
        let mut ints = [0usize; 6];
        for v in &mut ints {
            *v = r.u32()? as usize;
        }
        let mut floats = [0f64; 5];
        for v in &mut floats {
            *v = r.f64()?;
        }
        let geometry_seed = r.u64()?;
        let seed = r.u64()?;
        let domain = r.u8()?;
        let split = r.u8()?;
        let n = r.u64()?;
        let d = r.u64()?;
        let k = r.u64()?;
        let cfg = ShiftConfig {
            num_classes: ints[0],
            dim: ints[1],
            source_train_per_class: ints[2],
            target_train_per_class: ints[3],
            validation_per_class: ints[4],
            test_per_class: ints[5],
            blob_sigma: floats[0],
            separation: floats[1],
            shift: floats[2],
            rotation: floats[3],
            label_noise: floats[4],
            geometry_seed,
        };
        Some((has_origin, cfg, seed, domain, split, n, d, k))
    })();
    let Some((has_origin, cfg, seed, domain, split, n, d, k)) = header else {
        return Err(corrupt(r.pos, "truncated header"));
    };
    let header_end = r.pos;
    let domain = Domain::from_tag(domain).ok_or_else(|| corrupt(header_end, "bad domain tag"))?;
    let split = Split::from_tag(split).ok_or_else(|| corrupt(header_end, "bad split tag"))?;
    let body = (n as usize)
        .checked_mul(d as usize)
        .and_then(|c| c.checked_mul(8))
        .and_then(|f| (n as usize).checked_mul(4)?.checked_add(f));
    if body != Some(r.remaining()) {
        return Err(corrupt(
            header_end,
            &format!(
                "header declares {n}x{d} samples but body has {} bytes",
                r.remaining()
            ),
        ));
    }
    let (n, d, k) = (n as usize, d as usize, k as usize);
    let features = Matrix::new(n, d, r.f64s(n * d).unwrap())?;
    let labels_at = r.pos;
    let labels: Vec<u32> = (0..n).map(|_| r.u32().unwrap()).collect();
    let ds = LabeledDataset::new(features, labels, k, domain, split)
        .map_err(|e| corrupt(labels_at, &e.to_string()))?;
    Ok(if has_origin == 1 {
        ds.with_origin(Origin { config: cfg, seed })
    } else {
        ds
    })
}
