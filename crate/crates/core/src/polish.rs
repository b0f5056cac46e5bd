//! Gauss-Newton refinement of a spectrum and transformed signal against
//! the raw phaseless samples.
//!
//! The samples of vector `i` are `h_i(l) = |sum_j conj(y_j) psi_ij lambda_j^l|^2`.
//! The unknowns are parameterized linearly: with
//! `z = [Re lambda, Im lambda, Re y, Im y]` (length `4d`), `z = map * theta`.
//! Structured models (real symmetric spectra, real signals) are expressed
//! through `map`; the free model uses the identity.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::{Error, Result};

/// Outcome of [`polish`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolishReport {
    /// Residual 2-norm relative to the sample 2-norm, before and after.
    pub initial: f64,
    pub fin: f64,
    pub iterations: usize,
}

/// Splits `z` into `(lambda, y)`.
pub fn unpack(z: &DVector<f64>, d: usize) -> (Vec<Complex64>, Vec<Complex64>) {
    let lambda = (0..d).map(|j| Complex64::new(z[j], z[d + j])).collect();
    let y = (0..d).map(|j| Complex64::new(z[2 * d + j], z[3 * d + j])).collect();
    (lambda, y)
}

/// Inverse of [`unpack`].
pub fn pack(lambda: &[Complex64], y: &[Complex64]) -> DVector<f64> {
    let d = lambda.len();
    let mut z = DVector::zeros(4 * d);
    for j in 0..d {
        z[j] = lambda[j].re;
        z[d + j] = lambda[j].im;
        z[2 * d + j] = y[j].re;
        z[3 * d + j] = y[j].im;
    }
    z
}

/// Model residuals, and optionally the Jacobian with respect to `z`.
fn evaluate(
    samples: &[Vec<f64>],
    psi: &[Vec<Complex64>],
    z: &DVector<f64>,
    d: usize,
    jacobian: bool,
) -> (DVector<f64>, Option<DMatrix<f64>>) {
    let (lambda, y) = unpack(z, d);
    let rows: usize = samples.iter().map(Vec::len).sum();
    let mut r = DVector::zeros(rows);
    let mut jac = jacobian.then(|| DMatrix::zeros(rows, 4 * d));
    let mut row = 0;
    for (h, p) in samples.iter().zip(psi) {
        let active: Vec<usize> = (0..d).filter(|&j| p[j] != Complex64::new(0.0, 0.0)).collect();
        let c: Vec<Complex64> = active.iter().map(|&j| y[j].conj() * p[j]).collect();
        // pow = lambda^l, prev = lambda^(l-1)
        let mut pow = vec![Complex64::new(1.0, 0.0); active.len()];
        let mut prev = vec![Complex64::new(0.0, 0.0); active.len()];
        for (l, &hl) in h.iter().enumerate() {
            let s: Complex64 = c.iter().zip(&pow).map(|(c, p)| c * p).sum();
            r[row] = s.norm_sqr() - hl;
            if let Some(jac) = jac.as_mut() {
                let sc = s.conj();
                for (a, &j) in active.iter().enumerate() {
                    let g = sc * c[a] * prev[a] * l as f64;
                    jac[(row, j)] = 2.0 * g.re;
                    jac[(row, d + j)] = -2.0 * g.im;
                    let t = sc * p[j] * pow[a];
                    jac[(row, 2 * d + j)] = 2.0 * t.re;
                    jac[(row, 3 * d + j)] = 2.0 * t.im;
                }
            }
            for a in 0..active.len() {
                prev[a] = pow[a];
                pow[a] *= lambda[active[a]];
            }
            row += 1;
        }
    }
    (r, jac)
}

/// Minimizes the sample residual over `theta` by Gauss-Newton with
/// minimum-norm steps and step halving. Steps that do not decrease the
/// residual are never taken, so the result is never worse than the start.
pub fn polish(
    samples: &[Vec<f64>],
    psi: &[Vec<Complex64>],
    map: &DMatrix<f64>,
    theta: DVector<f64>,
    max_iter: usize,
) -> Result<(DVector<f64>, PolishReport)> {
    let d = map.nrows() / 4;
    if map.nrows() != 4 * d || map.ncols() != theta.len() {
        return Err(Error::Precondition("parameter map has the wrong shape".into()));
    }
    if samples.len() != psi.len() || psi.iter().any(|p| p.len() != d) {
        return Err(Error::Precondition("sampler coefficients do not match the model".into()));
    }
    let scale = samples
        .iter()
        .flatten()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    let mut theta = theta;
    let (r0, _) = evaluate(samples, psi, &(map * &theta), d, false);
    let mut norm = r0.norm();
    let initial = norm / scale;
    let mut iterations = 0;
    while iterations < max_iter && norm / scale > 1e-15 {
        let (r, jz) = evaluate(samples, psi, &(map * &theta), d, true);
        let jac = jz.expect("requested") * map;
        let svd = jac.svd(true, true);
        let cutoff = 1e-13 * svd.singular_values.max();
        let step = svd.solve(&(-r), cutoff).map_err(|e| Error::Numerical(e.to_string()))?;
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-4 {
            let trial = &theta + &step * t;
            let (rt, _) = evaluate(samples, psi, &(map * &trial), d, false);
            let nt = rt.norm();
            if nt.is_finite() && nt < norm {
                theta = trial;
                accepted = nt < 0.999 * norm;
                norm = nt;
                break;
            }
            t /= 2.0;
        }
        iterations += 1;
        if !accepted {
            break;
        }
    }
    Ok((
        theta,
        PolishReport {
            initial,
            fin: norm / scale,
            iterations,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::measure_from_coefficients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn samples_for(lambda: &[Complex64], y: &[Complex64], psi: &[Vec<Complex64>], l: usize) -> Vec<Vec<f64>> {
        psi.iter()
            .map(|p| {
                let c: Vec<Complex64> = y.iter().zip(p).map(|(y, p)| y.conj() * p).collect();
                measure_from_coefficients(&c, lambda, l)
            })
            .collect()
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 3;
        let mut rc = || Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let lambda: Vec<Complex64> = (0..d).map(|_| rc() * 0.6).collect();
        let y: Vec<Complex64> = (0..d).map(|_| rc()).collect();
        let psi: Vec<Vec<Complex64>> = (0..2).map(|_| (0..d).map(|_| rc()).collect()).collect();
        let h = samples_for(&lambda, &y, &psi, 7);
        let z = pack(&lambda, &y);
        let (_, jac) = evaluate(&h, &psi, &z, d, true);
        let jac = jac.unwrap();
        let eps = 1e-6;
        for col in 0..4 * d {
            let mut zp = z.clone();
            zp[col] += eps;
            let mut zm = z.clone();
            zm[col] -= eps;
            let fd = (evaluate(&h, &psi, &zp, d, false).0 - evaluate(&h, &psi, &zm, d, false).0) / (2.0 * eps);
            assert!((fd - jac.column(col)).amax() < 1e-6, "column {col}");
        }
    }

    #[test]
    fn converges_from_a_perturbed_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 4;
        let lambda: Vec<Complex64> = (0..d)
            .map(|j| Complex64::from_polar(0.7 + 0.07 * j as f64, 1.3 * j as f64 + 0.2))
            .collect();
        let y: Vec<Complex64> = (0..d)
            .map(|_| Complex64::new(rng.random_range(0.5..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let psi: Vec<Vec<Complex64>> = (0..3)
            .map(|_| (0..d).map(|_| Complex64::new(rng.random_range(0.5..1.0), rng.random_range(-1.0..1.0))).collect())
            .collect();
        let h = samples_for(&lambda, &y, &psi, 40);
        let start: Vec<Complex64> = lambda.iter().map(|z| z * Complex64::new(1.0 + 1e-4, 2e-4)).collect();
        let start_y: Vec<Complex64> = y.iter().map(|z| z * (1.0 - 3e-4)).collect();
        let map = DMatrix::identity(4 * d, 4 * d);
        let (theta, report) = polish(&h, &psi, &map, pack(&start, &start_y), 30).unwrap();
        assert!(report.fin < 1e-12, "{report:?}");
        assert!(report.fin <= report.initial);
        let (l2, _) = unpack(&theta, d);
        // the spectrum is fixed up to a common rotation
        let rot = (lambda[0] / l2[0]) / (lambda[0] / l2[0]).norm();
        for (a, b) in lambda.iter().zip(&l2) {
            assert!((a - rot * b).norm() < 1e-8);
        }
    }

    #[test]
    fn rejects_mismatched_map() {
        let map = DMatrix::identity(5, 5);
        assert!(polish(&[vec![1.0]], &[vec![Complex64::new(1.0, 0.0)]], &map, DVector::zeros(5), 3).is_err());
    }
}
