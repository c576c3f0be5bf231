//! Gauss-Hermite rules (Golub-Welsch).

use nalgebra::DMatrix;

/// Nodes and weights for ∫ g(x) exp(-x²) dx.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut j = DMatrix::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        j[(i, i - 1)] = b;
        j[(i - 1, i)] = b;
    }
    let eig = j.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Rule for E[g(Z)], Z ~ N(0, 1): nodes already scaled by √2, weights sum to 1.
pub fn standard_normal_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_hermite(n);
    let s = std::f64::consts::PI.sqrt();
    (x.iter().map(|v| v * std::f64::consts::SQRT_2).collect(), w.iter().map(|v| v / s).collect())
}

pub fn normal_expectation(n: usize, g: impl Fn(f64) -> f64) -> f64 {
    let (x, w) = standard_normal_rule(n);
    x.iter().zip(&w).map(|(&z, &wt)| wt * g(z)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_normal_moments() {
        assert!((normal_expectation(9, |_| 1.0) - 1.0).abs() < 1e-13);
        assert!((normal_expectation(9, |z| z * z) - 1.0).abs() < 1e-12);
        assert!((normal_expectation(9, |z| z.powi(4)) - 3.0).abs() < 1e-11);
        assert!((normal_expectation(64, |z| (0.5 * z).cos()) - (-0.125f64).exp()).abs() < 1e-12);
    }
}
