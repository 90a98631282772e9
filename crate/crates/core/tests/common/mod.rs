#![allow(dead_code)]

use softshift::data::{Geometry, LabeledDataset, ShiftConfig};
use softshift::harness::ExperimentConfig;
use softshift::losses::{
    combined_loss, hard_loss, soft_cross_entropy, LossOutput, LossWeights, Provenance,
    SoftTargetBatch, SoftWeight,
};
use softshift::math::{Matrix, SeededRng};
use softshift::network::{init_params, Activation, LayerSpec, ModelParams};
use softshift::training::{train, TrainConfig};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-5;

/// `‖a − b‖ / (‖a‖ + ‖b‖)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-12)
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn fd_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|k| {
            work[k] = x[k] + FD_STEP;
            let plus = f(&work);
            work[k] = x[k] - FD_STEP;
            let minus = f(&work);
            work[k] = x[k];
            (plus - minus) / (2.0 * FD_STEP)
        })
        .collect()
}

fn log_softmax(z: &[f64], t: f64) -> Vec<f64> {
    let s: Vec<f64> = z.iter().map(|v| v / t).collect();
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    s.iter().map(|v| v - lse).collect()
}

/// Mean negative log-likelihood, written independently of the library.
pub fn oracle_hard(z: &Matrix, labels: &[u32]) -> f64 {
    let n = z.rows() as f64;
    (0..z.rows())
        .map(|i| -log_softmax(z.row(i), 1.0)[labels[i] as usize - 1])
        .sum::<f64>()
        / n
}

/// Mean tempered cross-entropy, written independently of the library.
pub fn oracle_soft(z: &Matrix, targets: &Matrix, t: f64) -> f64 {
    let n = z.rows() as f64;
    (0..z.rows())
        .map(|i| {
            let lq = log_softmax(z.row(i), t);
            -targets
                .row(i)
                .iter()
                .zip(&lq)
                .map(|(p, l)| p * l)
                .sum::<f64>()
        })
        .sum::<f64>()
        / n
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossCase {
    Hard,
    Soft(f64),
    Combined { t: f64, rho: f64 },
    SoftOnly(f64),
}

impl LossCase {
    pub fn all() -> Vec<LossCase> {
        let mut v = vec![LossCase::Hard];
        for t in [1.0, 2.0, 5.0] {
            v.push(LossCase::Soft(t));
        }
        for t in [1.0, 2.0, 5.0] {
            for rho in [0.1, 1.0] {
                v.push(LossCase::Combined { t, rho });
            }
        }
        for t in [1.0, 2.0, 5.0] {
            v.push(LossCase::SoftOnly(t));
        }
        v
    }

    pub fn temperature(&self) -> f64 {
        match *self {
            LossCase::Hard => 1.0,
            LossCase::Soft(t) | LossCase::SoftOnly(t) | LossCase::Combined { t, .. } => t,
        }
    }

    pub fn analytic(&self, z: &Matrix, labels: &[u32], targets: &SoftTargetBatch) -> LossOutput {
        match *self {
            LossCase::Hard => hard_loss(z, labels).unwrap(),
            LossCase::Soft(t) => soft_cross_entropy(z, targets, t).unwrap(),
            LossCase::Combined { t, rho } => {
                let w = LossWeights::new(t, SoftWeight::Finite(rho)).unwrap();
                combined_loss(z, labels, targets, &w).unwrap()
            }
            LossCase::SoftOnly(t) => {
                let w = LossWeights::new(t, SoftWeight::SoftOnly).unwrap();
                combined_loss(z, labels, targets, &w).unwrap()
            }
        }
    }

    /// The scalar whose exact gradient the analytic gradient is: the soft
    /// term carries its `T²` factor.
    pub fn surrogate(&self, z: &Matrix, labels: &[u32], targets: &Matrix) -> f64 {
        match *self {
            LossCase::Hard => oracle_hard(z, labels),
            LossCase::Soft(t) => oracle_soft(z, targets, t),
            LossCase::Combined { t, rho } => {
                oracle_hard(z, labels) + rho * t * t * oracle_soft(z, targets, t)
            }
            LossCase::SoftOnly(t) => t * t * oracle_soft(z, targets, t),
        }
    }
}

pub fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = rng
        .standard_normal(rows * cols)
        .into_iter()
        .map(|v| v * scale)
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

pub fn random_labels(rng: &mut SeededRng, n: usize, classes: usize) -> Vec<u32> {
    (0..n).map(|_| rng.below(classes) as u32 + 1).collect()
}

/// Rows on the simplex, drawn as softmaxes of random logits.
pub fn random_simplex(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
    let mut m = random_matrix(rng, rows, cols, 1.5);
    for i in 0..rows {
        let r = m.row_mut(i);
        let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = r.iter().map(|v| (v - mx).exp()).sum();
        for v in r.iter_mut() {
            *v = (*v - mx).exp() / s;
        }
    }
    m
}

pub fn targets_batch(probs: &Matrix, t: f64) -> SoftTargetBatch {
    SoftTargetBatch::new(probs.clone(), t, Provenance::MeanTable).unwrap()
}

/// Worst relative error of the logit-level gradient over `instances` draws.
pub fn logit_gradient_error(case: LossCase, instances: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = 1 + rng.below(4);
        let k = 2 + rng.below(7);
        let z = random_matrix(&mut rng, n, k, 2.0);
        let labels = random_labels(&mut rng, n, k);
        let probs = random_simplex(&mut rng, n, k);
        let out = case.analytic(&z, &labels, &targets_batch(&probs, case.temperature()));
        let fd = fd_grad(z.data(), |d| {
            case.surrogate(&Matrix::new(n, k, d.to_vec()).unwrap(), &labels, &probs)
        });
        worst = worst.max(rel_err(out.grad.data(), &fd));
    }
    worst
}

fn hidden_preactivations(model: &ModelParams, x: &Matrix) -> Vec<f64> {
    let mut h = x.clone();
    let mut out = Vec::new();
    let last = model.layers.len() - 1;
    for (i, layer) in model.layers.iter().enumerate() {
        let mut a = h.matmul(&layer.weights).unwrap();
        a.add_row_vector(&layer.bias).unwrap();
        if i < last {
            out.extend_from_slice(a.data());
        }
        h = a;
        h.map_inplace(|v| match layer.spec.activation {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Linear => v,
        });
    }
    out
}

/// Random network with every dimension ≤ 8 and a batch of ≤ 4 inputs whose
/// hidden pre-activations stay clear of the ReLU kink.
pub fn random_network(rng: &mut SeededRng) -> (ModelParams, Matrix) {
    loop {
        let input = 1 + rng.below(8);
        let classes = 2 + rng.below(7);
        let depth = rng.below(3);
        let mut dims = vec![input];
        for _ in 0..depth {
            dims.push(1 + rng.below(8));
        }
        dims.push(classes);
        let acts = [Activation::Tanh, Activation::Relu, Activation::Linear];
        let specs: Vec<LayerSpec> = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 2 == dims.len() {
                    Activation::Linear
                } else {
                    acts[rng.below(3)]
                };
                LayerSpec::new(w[0], w[1], act)
            })
            .collect();
        let mut model = init_params(&specs, rng).unwrap();
        for l in &mut model.layers {
            for b in &mut l.bias {
                *b = 0.3 * rng.standard_normal(1)[0];
            }
        }
        let n = 1 + rng.below(4);
        let x = random_matrix(rng, n, input, 1.0);
        if hidden_preactivations(&model, &x)
            .iter()
            .all(|a| a.abs() > 1e-3)
        {
            return (model, x);
        }
    }
}

/// Worst relative error of the parameter gradient through a random network.
pub fn network_gradient_error(case: LossCase, instances: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (model, x) = random_network(&mut rng);
        let k = model.num_classes();
        let labels = random_labels(&mut rng, x.rows(), k);
        let probs = random_simplex(&mut rng, x.rows(), k);
        let (logits, cache) = model.forward(&x).unwrap();
        let out = case.analytic(&logits, &labels, &targets_batch(&probs, case.temperature()));
        let grads = model.backward(&cache, &out.grad).unwrap();
        let flat = model.flat();
        let fd = fd_grad(&flat, |p| {
            let mut m = model.clone();
            for (i, &v) in p.iter().enumerate() {
                *m.flat_mut(i) = v;
            }
            case.surrogate(&m.logits(&x).unwrap(), &labels, &probs)
        });
        worst = worst.max(rel_err(&grads.flat(), &fd));
    }
    worst
}

/// Softmax regression trained on `train` with the hard loss.
pub fn linear_probe(train_set: &LabeledDataset, val: &LabeledDataset, seed: u64) -> ModelParams {
    let specs = vec![LayerSpec::new(
        train_set.dim(),
        train_set.num_classes(),
        Activation::Linear,
    )];
    let init = init_params(&specs, &mut SeededRng::derive(seed, "probe-init")).unwrap();
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let hard = |l: &Matrix, y: &[u32], _: &[usize]| hard_loss(l, y);
    train(&init, train_set, val, &hard, &cfg).unwrap().0
}

/// Accuracy of the nearest-true-mean rule, which is Bayes-optimal for
/// equal-prior isotropic blobs of one common width.
pub fn bayes_accuracy(cfg: &ShiftConfig, data: &LabeledDataset) -> f64 {
    let means = Geometry::new(cfg).unwrap().means().clone();
    let correct = (0..data.len())
        .filter(|&i| {
            let x = data.features().row(i);
            let best = (0..means.rows())
                .min_by(|&a, &b| {
                    let da: f64 = x
                        .iter()
                        .zip(means.row(a))
                        .map(|(p, q)| (p - q).powi(2))
                        .sum();
                    let db: f64 = x
                        .iter()
                        .zip(means.row(b))
                        .map(|(p, q)| (p - q).powi(2))
                        .sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            best as u32 + 1 == data.labels()[i]
        })
        .count();
    correct as f64 / data.len() as f64
}

/// Default experiment at the given shift over the given seeds.
pub fn grid_config(shift: f64, seeds: &[u64]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.shift = shift;
    cfg.seeds = seeds.to_vec();
    cfg
}

/// Small, fast configuration for plumbing tests.
pub fn tiny_config() -> ExperimentConfig {
    let defaults = ExperimentConfig::default();
    ExperimentConfig {
        data: ShiftConfig {
            num_classes: 3,
            dim: 4,
            source_train_per_class: 40,
            target_train_per_class: 10,
            validation_per_class: 10,
            test_per_class: 10,
            shift: 2.0,
            ..ShiftConfig::default()
        },
        hidden: vec![6],
        train: TrainConfig {
            max_epochs: 6,
            batch_size: 16,
            ..defaults.train
        },
        seeds: vec![1, 2],
        workers: 2,
        ..defaults
    }
}
