//! Gauss-Legendre nodes and weights, remapped to the unit interval.

/// Nodes and weights for `n`-point Gauss-Legendre quadrature on `[0, 1]`.
/// Weights sum to 1.
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    // Roots of the Legendre polynomial on [-1,1] by Newton iteration.
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_with_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // Map [-1,1] -> [0,1].
        nodes[n - 1 - i] = 0.5 * (x + 1.0);
        weights[n - 1 - i] = 0.5 * w;
    }
    (nodes, weights)
}

/// Midpoint-rule nodes and uniform weights on `[0, 1]`.
pub fn midpoint_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let nodes = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    let weights = vec![1.0 / n as f64; n];
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_one() {
        for n in [1, 2, 5, 16, 64, 128] {
            let (_, w) = gauss_legendre_unit(n);
            let s: f64 = w.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "n={n} sum={s}");
        }
    }

    #[test]
    fn integrates_polynomials_exactly() {
        // n-point GL is exact through degree 2n-1; check x^5 on [0,1] with n=3.
        let (x, w) = gauss_legendre_unit(3);
        let got: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(5)).sum();
        assert!((got - 1.0 / 6.0).abs() < 1e-14);
    }

    #[test]
    fn midpoint_is_uniform() {
        let (x, w) = midpoint_unit(4);
        assert_eq!(x, vec![0.125, 0.375, 0.625, 0.875]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
