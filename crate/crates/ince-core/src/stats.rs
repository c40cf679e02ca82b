//! Numerical statistics: regularized incomplete gamma (chi-square survival),
//! Cholesky solves for Mahalanobis distances, and Spearman rank correlation
//! with an exact permutation p-value.

use crate::error::{Error, Result};
use crate::mat::Mat;

const MAX_ITER: usize = 500;
const EPS: f64 = 1e-15;

/// ln Gamma(x) for x > 0 (Lanczos approximation, ~1e-14 relative accuracy).
pub fn ln_gamma(x: f64) -> f64 {
    // g = 7, n = 9 Lanczos coefficients
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized lower incomplete gamma P(a, x) by series expansion.
fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut n = a;
    for _ in 0..MAX_ITER {
        n += 1.0;
        term *= x / n;
        sum += term;
        if term.abs() < sum.abs() * EPS {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Regularized upper incomplete gamma Q(a, x) by Lentz continued fraction.
fn gamma_q_cf(a: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..=MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Regularized upper incomplete gamma Q(a, x) = Gamma(a, x) / Gamma(a).
///
/// Series for x < a + 1 (via Q = 1 - P), continued fraction otherwise.
pub fn gamma_q(a: f64, x: f64) -> Result<f64> {
    if a <= 0.0 || x < 0.0 || !a.is_finite() || !x.is_finite() {
        return Err(Error::contract(format!("gamma_q: invalid a={} x={}", a, x)));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    Ok(if x < a + 1.0 { 1.0 - gamma_p_series(a, x) } else { gamma_q_cf(a, x) })
}

/// Chi-square survival function: Pr(X >= x) for X ~ chi-square with k dof.
pub fn chi2_survival(k: u32, x: f64) -> Result<f64> {
    if k == 0 {
        return Err(Error::contract("chi2_survival: dof must be >= 1"));
    }
    if x < 0.0 {
        return Ok(1.0);
    }
    gamma_q(k as f64 / 2.0, x / 2.0)
}

/// Cholesky factor L (lower triangular, row-major) of a symmetric positive
/// definite matrix.
pub fn cholesky(a: &Mat) -> Result<Mat> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::contract("cholesky: matrix must be square"));
    }
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.at(i, j);
            for k in 0..j {
                sum -= l.at(i, k) * l.at(j, k);
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::numeric(format!(
                        "cholesky: matrix not positive definite at pivot {} ({})",
                        i, sum
                    )));
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.at(j, j));
            }
        }
    }
    Ok(l)
}

/// Solve A y = b given the Cholesky factor L of A.
pub fn cholesky_solve(l: &Mat, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    debug_assert_eq!(b.len(), n);
    // forward: L z = b
    let mut z = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l.at(i, k) * z[k];
        }
        z[i] = s / l.at(i, i);
    }
    // backward: L^T y = z
    let mut y = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = z[i];
        for k in i + 1..n {
            s -= l.at(k, i) * y[k];
        }
        y[i] = s / l.at(i, i);
    }
    y
}

/// Average ranks (1-based) with ties sharing the mean rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("no NaN in ranks"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::numeric("correlation undefined for constant vector"));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::contract("spearman: need equal lengths >= 3"));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Spearman rho plus an exact permutation p-value: the one-sided probability
/// that a random pairing achieves rho at least as large. Feasible for the
/// small feature counts this pipeline handles (n <= 10).
pub fn spearman_exact_permutation(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let n = x.len();
    if n > 10 {
        return Err(Error::unsupported(format!(
            "exact permutation p-value enumerates n! orderings; n={} is too large",
            n
        )));
    }
    let rho = spearman(x, y)?;
    let rx = average_ranks(x);
    let ry = average_ranks(y);

    // enumerate permutations of y-ranks with Heap's algorithm
    let mut perm: Vec<usize> = (0..n).collect();
    let mut stack = vec![0usize; n];
    let mut count_ge = 0u64;
    let mut total = 0u64;
    let mut eval = |perm: &[usize]| {
        let permuted: Vec<f64> = perm.iter().map(|&i| ry[i]).collect();
        if let Ok(r) = pearson(&rx, &permuted) {
            if r >= rho - 1e-12 {
                count_ge += 1;
            }
        }
        total += 1;
    };
    eval(&perm);
    let mut i = 1;
    while i < n {
        if stack[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(stack[i], i);
            }
            eval(&perm);
            stack[i] += 1;
            i = 1;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    Ok((rho, count_ge as f64 / total as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi2_two_dof_closed_form() {
        // survival = exp(-x/2) for 2 dof
        for x in [0.0, 2.0 * (2.0f64).ln(), 2.0 * (10.0f64).ln(), 10.0, 0.1] {
            let got = chi2_survival(2, x).unwrap();
            let expect = (-x / 2.0).exp();
            assert!((got - expect).abs() < 1e-12, "x={}: {} vs {}", x, got, expect);
        }
        assert!((chi2_survival(2, 2.0 * (2.0f64).ln()).unwrap() - 0.5).abs() < 1e-12);
        assert!((chi2_survival(2, 2.0 * (10.0f64).ln()).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn chi2_even_dof_closed_forms() {
        // k=4: survival = exp(-x/2) (1 + x/2)
        for x in [0.5, 1.0, 3.0, 8.0, 20.0] {
            let got = chi2_survival(4, x).unwrap();
            let expect = (-x / 2.0).exp() * (1.0 + x / 2.0);
            assert!((got - expect).abs() < 1e-12, "x={}", x);
        }
    }

    #[test]
    fn chi2_one_dof_matches_erfc() {
        // k=1: survival = erfc(sqrt(x/2)); compare against a high-precision
        // series evaluation of erfc
        fn erfc_series(z: f64) -> f64 {
            // erf via its Maclaurin series (fine for z <= 3), else cf bound
            let mut term = z;
            let mut sum = z;
            let mut n = 0u32;
            while term.abs() > 1e-18 && n < 200 {
                n += 1;
                term *= -z * z / n as f64;
                sum += term / (2 * n + 1) as f64;
            }
            1.0 - 2.0 / std::f64::consts::PI.sqrt() * sum
        }
        for x in [0.1, 0.5, 1.0, 2.0, 4.0] {
            let got = chi2_survival(1, x).unwrap();
            let expect = erfc_series((x / 2.0).sqrt());
            assert!((got - expect).abs() < 1e-10, "x={}: {} vs {}", x, got, expect);
        }
    }

    #[test]
    fn gamma_q_bounds_and_edges() {
        assert_eq!(gamma_q(3.0, 0.0).unwrap(), 1.0);
        assert!(gamma_q(0.0, 1.0).is_err());
        for a in [0.5, 1.0, 2.5, 8.0] {
            for x in [0.01, 0.5, 1.0, 5.0, 50.0] {
                let q = gamma_q(a, x).unwrap();
                assert!((0.0..=1.0).contains(&q), "a={} x={} q={}", a, x, q);
            }
        }
    }

    #[test]
    fn cholesky_solves_spd_system() {
        let a = Mat::from_rows(&[
            vec![4.0, 2.0, 0.6],
            vec![2.0, 5.0, 1.2],
            vec![0.6, 1.2, 3.0],
        ]);
        let l = cholesky(&a).unwrap();
        let b = [1.0, -2.0, 0.5];
        let y = cholesky_solve(&l, &b);
        // check A y = b
        for i in 0..3 {
            let got: f64 = (0..3).map(|j| a.at(i, j) * y[j]).sum();
            assert!((got - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(cholesky(&a).is_err());
    }

    #[test]
    fn ranks_with_ties() {
        let r = average_ranks(&[10.0, 20.0, 20.0, 5.0]);
        assert_eq!(r, vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn spearman_extremes() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y_up = [10.0, 20.0, 30.0, 40.0, 50.0];
        let y_down = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&x, &y_up).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &y_down).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_constant_vector_errors() {
        let x = [1.0, 1.0, 1.0, 1.0];
        let y = [1.0, 2.0, 3.0, 4.0];
        assert!(spearman(&x, &y).is_err());
    }

    #[test]
    fn permutation_p_value_for_perfect_match() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [2.0, 4.0, 6.0, 8.0, 10.0];
        let (rho, p) = spearman_exact_permutation(&x, &y).unwrap();
        assert!((rho - 1.0).abs() < 1e-12);
        // only the identity permutation achieves rho = 1 -> p = 1/120
        assert!((p - 1.0 / 120.0).abs() < 1e-12, "p={}", p);
    }
}
