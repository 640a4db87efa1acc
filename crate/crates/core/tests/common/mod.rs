#![allow(dead_code)]

use slca::dataio::{gen_synthetic, make_split, Dataset, SyntheticConfig};
use slca::linalg::{Matrix, RngState};
use slca::model::HeadConfig;
use slca::optimizer::OptimizerConfig;
use slca::protocol::{Method, RunConfig, TaskStream};

/// Well separated classes: 20 classes, means at distance 8, ten tasks.
pub fn separable_dataset() -> Dataset {
    gen_synthetic(&SyntheticConfig {
        num_classes: 20,
        dim: 16,
        train_per_class: 100,
        test_per_class: 50,
        separation: 8.0,
        seed: 0,
    })
    .unwrap()
}

pub fn separable_stream() -> TaskStream {
    let data = separable_dataset();
    let split = make_split(&data.benchmark_classes(), 10, 0).unwrap();
    TaskStream::from_dataset(&data, &split).unwrap()
}

/// Overlapping classes (means at distance 3 in 16 dimensions), five tasks.
pub fn stressed_stream() -> TaskStream {
    let data = gen_synthetic(&SyntheticConfig {
        num_classes: 20,
        dim: 16,
        train_per_class: 100,
        test_per_class: 100,
        separation: 3.0,
        seed: 0,
    })
    .unwrap();
    let split = make_split(&data.benchmark_classes(), 5, 0).unwrap();
    TaskStream::from_dataset(&data, &split).unwrap()
}

/// Learning rate of the fine-tuning baseline on the stressed stream, ten
/// times the slow learner's classifier rate.
pub const HIGH_UNIFORM_LR: f64 = 0.1;

pub fn stressed_config(method: Method) -> RunConfig {
    RunConfig {
        method,
        head: HeadConfig::Mlp {
            hidden: 64,
            out_dim: 32,
            layers: 2,
        },
        optimizer: OptimizerConfig {
            epochs_per_task: 20,
            ..OptimizerConfig::default()
        },
        uniform_lr: HIGH_UNIFORM_LR,
        ..RunConfig::default()
    }
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut RngState) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.gaussian()).collect()).unwrap()
}

/// Random orthogonal matrix by Gram-Schmidt on a Gaussian matrix.
pub fn orthogonal(d: usize, rng: &mut RngState) -> Matrix {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    Matrix::from_rows(&q).unwrap()
}

/// `A Aᵀ + 0.1 I` for a Gaussian `A`.
pub fn random_spd(d: usize, rng: &mut RngState) -> Matrix {
    let a = gaussian_matrix(d, d, rng);
    let mut s = a.matmul(&a.transpose()).unwrap();
    for i in 0..d {
        s.set(i, i, s.get(i, i) + 0.1);
    }
    s
}
