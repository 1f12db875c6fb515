#![allow(dead_code)]

use detail_core::rng::DetRng;
use detail_core::{IclInstance, Matrix};
use nalgebra::DMatrix;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = DetRng::new(seed, 12345);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.standard_normal()).collect()).unwrap()
}

pub fn random_instance(n: usize, d: usize, c: usize, seed: u64) -> IclInstance {
    let mut rng = DetRng::new(seed, 777);
    let labels = (0..n).map(|_| rng.below(c)).collect();
    let q = rng.below(c);
    IclInstance::new(
        random_matrix(n, d, seed),
        labels,
        random_matrix(1, d, seed ^ 0xdead_beef),
        Some(q),
        c,
    )
    .unwrap()
}

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn one_hot_na(labels: &[usize], c: usize) -> DMatrix<f64> {
    let mut y = DMatrix::zeros(labels.len(), c);
    for (i, &l) in labels.iter().enumerate() {
        y[(i, l)] = 1.0;
    }
    y
}

/// Primal ridge weights `(mᵀm + λI)⁻¹ mᵀY`, computed as the least-squares
/// solution of `[m; √λ I] β = [Y; 0]` by QR so that tiny λ stays accurate.
pub fn primal_beta(m: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let (n, d) = m.shape();
    let c = y.ncols();
    let mut a = DMatrix::zeros(n + d, d);
    a.view_mut((0, 0), (n, d)).copy_from(m);
    for i in 0..d {
        a[(n + i, i)] = lambda.sqrt();
    }
    let mut b = DMatrix::zeros(n + d, c);
    b.view_mut((0, 0), (n, c)).copy_from(y);
    let qr = a.qr();
    let qtb = qr.q().transpose() * b;
    qr.r().solve_upper_triangular(&qtb).expect("full-rank augmented system")
}

pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
