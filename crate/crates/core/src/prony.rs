//! Approximate Prony method for exponential sums `h_l = sum_k eta_k beta_k^l`.
//!
//! The kernel of the sample Hankel matrix is estimated by the right singular
//! vector of its smallest singular value. The roots of the associated
//! polynomial give the bases and a Vandermonde least-squares fit gives the
//! coefficients.

use nalgebra::{DMatrix, DVector, Schur};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::algebra::{build_vandermonde, conditioning_profile, CMatrix, ComplexVector, COINCIDENCE_RTOL};
use crate::matching::hungarian;
use crate::{Error, Result};

/// Leading-coefficient magnitude (relative to the largest) below which the
/// polynomial degree is considered collapsed.
pub const LEADING_COEFF_RTOL: f64 = 1e-12;

/// Vandermonde systems beyond this condition number are rejected.
pub const MAX_FIT_CONDITION: f64 = 1e15;

/// Kernel estimates with `sigma_{K-1} / sigma_K` below this are flagged.
pub const MIN_KERNEL_GAP: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentialSum {
    pub eta: ComplexVector,
    pub beta: ComplexVector,
}

impl ExponentialSum {
    /// Checks equal nonzero lengths, nonzero coefficients and distinct bases.
    pub fn new(eta: Vec<Complex64>, beta: Vec<Complex64>) -> Result<Self> {
        if eta.is_empty() {
            return Err(Error::EmptyInput);
        }
        if eta.len() != beta.len() {
            return Err(Error::LengthMismatch {
                expected: eta.len(),
                found: beta.len(),
            });
        }
        if let Some(k) = eta.iter().position(|e| *e == Complex64::new(0.0, 0.0)) {
            return Err(Error::Precondition(format!("coefficient {k} vanishes")));
        }
        let p = conditioning_profile(&beta);
        if p.sigma < COINCIDENCE_RTOL * p.rho {
            return Err(Error::Singular { separation: p.sigma });
        }
        Ok(Self {
            eta: ComplexVector::new(eta)?,
            beta: ComplexVector::new(beta)?,
        })
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }
}

/// Samples `h_0, ..., h_{L-1}`.
pub fn evaluate(sum: &ExponentialSum, samples: usize) -> Vec<Complex64> {
    let mut h = vec![Complex64::new(0.0, 0.0); samples];
    for (e, b) in sum.eta.iter().zip(sum.beta.iter()) {
        let mut term = *e;
        for hl in h.iter_mut() {
            *hl += term;
            term *= b;
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct HankelMatrix {
    pub matrix: CMatrix,
    pub order: usize,
}

/// `(L-K) x (K+1)` Hankel matrix with entry `(l, k) = h_{l+k}`.
pub fn build_hankel(h: &[Complex64], k: usize) -> Result<HankelMatrix> {
    let l = h.len();
    if k == 0 {
        return Err(Error::Precondition("model order must be positive".into()));
    }
    if l <= 2 * k {
        return Err(Error::InsufficientSamples {
            needed: 2 * k + 1,
            got: l,
        });
    }
    Ok(HankelMatrix {
        matrix: CMatrix::from_fn(l - k, k + 1, |r, c| h[r + c]),
        order: k,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelVector {
    pub gamma: Vec<Complex64>,
    pub sigma_min: f64,
    /// All singular values, descending.
    pub singular_values: Vec<f64>,
}

pub fn kernel_vector(h: &HankelMatrix) -> Result<KernelVector> {
    let svd = h
        .matrix
        .clone()
        .try_svd(false, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("Hankel SVD did not converge".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numerical("Hankel SVD returned no right vectors".into()))?;
    let s = &svd.singular_values;
    let imin = s.imin();
    // rows of v_t are conjugated right singular vectors
    let gamma: Vec<Complex64> = v_t.row(imin).iter().map(|z| z.conj()).collect();
    let mut singular_values: Vec<f64> = s.iter().copied().collect();
    singular_values.sort_by(|a, b| b.total_cmp(a));
    Ok(KernelVector {
        gamma,
        sigma_min: s[imin],
        singular_values,
    })
}

/// `sum_k gamma_k z^k`.
pub fn polynomial_eval(gamma: &[Complex64], z: Complex64) -> Complex64 {
    gamma
        .iter()
        .rev()
        .fold(Complex64::new(0.0, 0.0), |acc, g| acc * z + g)
}

/// Roots of `sum_k gamma_k z^k` from the balanced companion matrix, in
/// canonical order.
pub fn polynomial_roots(gamma: &[Complex64]) -> Result<Vec<Complex64>> {
    if gamma.len() < 2 {
        return Err(Error::Precondition("polynomial must have degree at least 1".into()));
    }
    let k = gamma.len() - 1;
    let scale = gamma.iter().map(|g| g.norm()).fold(0.0, f64::max);
    let lead = gamma[k];
    if lead.norm() < LEADING_COEFF_RTOL * scale {
        return Err(Error::DegenerateLeadingCoefficient {
            ratio: lead.norm() / scale,
        });
    }
    let mut roots = if k == 1 {
        vec![-gamma[0] / lead]
    } else {
        let mut c = CMatrix::zeros(k, k);
        for i in 1..k {
            c[(i, i - 1)] = Complex64::new(1.0, 0.0);
        }
        for i in 0..k {
            c[(i, k - 1)] = -gamma[i] / lead;
        }
        balance(&mut c);
        let schur = Schur::try_new(c, f64::EPSILON, 100_000)
            .ok_or_else(|| Error::Numerical("companion eigenvalues did not converge".into()))?;
        schur
            .eigenvalues()
            .ok_or_else(|| Error::Numerical("companion Schur form not triangular".into()))?
            .iter()
            .copied()
            .collect()
    };
    canonical_order(&mut roots);
    Ok(roots)
}

/// Parlett-Reinsch diagonal similarity with powers of two.
fn balance(m: &mut CMatrix) {
    let n = m.nrows();
    let radix = 2.0f64;
    loop {
        let mut converged = true;
        for i in 0..n {
            let mut c = 0.0;
            let mut r = 0.0;
            for j in 0..n {
                if j != i {
                    c += m[(j, i)].l1_norm();
                    r += m[(i, j)].l1_norm();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let mut g = r / radix;
            while c < g {
                f *= radix;
                c *= radix * radix;
            }
            g = r * radix;
            while c > g {
                f /= radix;
                c /= radix * radix;
            }
            if (c + r) / f < 0.95 * s {
                converged = false;
                for j in 0..n {
                    m[(i, j)] /= f;
                    m[(j, i)] *= f;
                }
            }
        }
        if converged {
            break;
        }
    }
}

/// Descending modulus; runs of moduli equal to 1e-12 relative are ordered
/// by ascending phase.
pub fn canonical_order(z: &mut [Complex64]) {
    z.sort_by(|a, b| b.norm().total_cmp(&a.norm()));
    let mut start = 0;
    while start < z.len() {
        let mut end = start + 1;
        while end < z.len()
            && (z[end - 1].norm() - z[end].norm()).abs() <= 1e-12 * z[start].norm().max(1.0)
        {
            end += 1;
        }
        z[start..end].sort_by(|a, b| a.arg().total_cmp(&b.arg()));
        start = end;
    }
}

/// Least-squares coefficients for fixed bases, solved through the SVD of
/// `V_L(beta)`. Returns `(eta, ||V eta - h||_2)`.
pub fn fit_coefficients(beta: &[Complex64], h: &[Complex64]) -> Result<(Vec<Complex64>, f64)> {
    let k = beta.len();
    if k == 0 {
        return Err(Error::EmptyInput);
    }
    if h.len() < k {
        return Err(Error::InsufficientSamples {
            needed: k,
            got: h.len(),
        });
    }
    let v = build_vandermonde(beta, h.len());
    let p = conditioning_profile(beta);
    if p.sigma < COINCIDENCE_RTOL * p.rho {
        return Err(Error::IllConditioned {
            condition: f64::INFINITY,
        });
    }
    let svd = v
        .clone()
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("Vandermonde SVD did not converge".into()))?;
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = smax / smin;
    if !condition.is_finite() || condition > MAX_FIT_CONDITION {
        return Err(Error::IllConditioned { condition });
    }
    let rhs = DVector::from_column_slice(h);
    let eta = svd
        .solve(&rhs, 0.0)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let residual = (&v * &eta - rhs).norm();
    Ok((eta.iter().copied().collect(), residual))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PronyResult {
    pub sum: ExponentialSum,
    /// Unit-norm kernel estimate, lowest power first.
    pub gamma: Vec<Complex64>,
    pub sigma_min: f64,
    /// `sigma_{K-1} / sigma_K` of the sample Hankel matrix.
    pub kernel_gap: f64,
    pub unreliable_kernel: bool,
    pub residual: f64,
}

pub fn approximate_prony(h: &[Complex64], k: usize) -> Result<PronyResult> {
    let hankel = build_hankel(h, k)?;
    let kv = kernel_vector(&hankel)?;
    let beta = polynomial_roots(&kv.gamma)?;
    let (eta, residual) = fit_coefficients(&beta, h)?;
    let s = &kv.singular_values;
    let kernel_gap = if kv.sigma_min > 0.0 {
        s[k - 1] / kv.sigma_min
    } else {
        f64::INFINITY
    };
    Ok(PronyResult {
        sum: ExponentialSum::new(eta, beta)?,
        gamma: kv.gamma,
        sigma_min: kv.sigma_min,
        kernel_gap,
        unreliable_kernel: kernel_gap < MIN_KERNEL_GAP,
        residual,
    })
}

/// Gauss-Newton on the variable-projection residual `h - P(beta) h` over the
/// real and imaginary parts of the bases, starting from `beta0`. Returns the
/// refined bases and the final residual norm, or `None` when the Vandermonde
/// fit degenerates along the way.
pub fn refine_bases(h: &[Complex64], beta0: &[Complex64], iters: usize) -> Option<(Vec<Complex64>, f64)> {
    let mut beta = beta0.to_vec();
    let (mut r, mut jac) = projected_residual(h, &beta)?;
    let scale = h.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _ in 0..iters {
        let norm = r.norm();
        if norm / scale < 1e-15 {
            break;
        }
        let step = jac.clone().svd(true, true).solve(&(-&r), 1e-14).ok()?;
        let mut t = 1.0;
        let mut improved = false;
        while t > 1e-4 {
            let trial: Vec<Complex64> = beta
                .iter()
                .enumerate()
                .map(|(k, b)| b + t * Complex64::new(step[2 * k], step[2 * k + 1]))
                .collect();
            if let Some((rt, jt)) = projected_residual(h, &trial) {
                if rt.norm() < norm {
                    improved = rt.norm() < 0.999 * norm;
                    beta = trial;
                    r = rt;
                    jac = jt;
                    break;
                }
            }
            t /= 2.0;
        }
        if !improved {
            break;
        }
    }
    let norm = r.norm();
    Some((beta, norm))
}

/// Stacked real and imaginary parts of the projected residual and of its
/// Kaufman Jacobian in `(Re beta_k, Im beta_k)`.
fn projected_residual(h: &[Complex64], beta: &[Complex64]) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let (l, k) = (h.len(), beta.len());
    let p = conditioning_profile(beta);
    if !(p.sigma >= COINCIDENCE_RTOL * p.rho) || !p.rho.is_finite() || p.rho.powi(l as i32) > 1e150 {
        return None;
    }
    let v = build_vandermonde(beta, l);
    let svd = nalgebra::SVD::try_new_unordered(v, true, true, f64::EPSILON, 10_000)?;
    let u = svd.u.as_ref()?;
    let hv = DVector::from_column_slice(h);
    let eta = svd.solve(&hv, 0.0).ok()?;
    let project = |x: &DVector<Complex64>| x - u * (u.adjoint() * x);
    let res = -project(&hv);
    let mut r = DVector::zeros(2 * l);
    for i in 0..l {
        r[i] = res[i].re;
        r[l + i] = res[i].im;
    }
    let mut jac = DMatrix::zeros(2 * l, 2 * k);
    for t in 0..k {
        let col = DVector::from_fn(l, |i, _| {
            if i == 0 {
                Complex64::new(0.0, 0.0)
            } else {
                eta[t] * i as f64 * beta[t].powu(i as u32 - 1)
            }
        });
        let col = project(&col);
        for i in 0..l {
            // d/d Re beta and d/d Im beta (the latter is i times the former)
            jac[(i, 2 * t)] = col[i].re;
            jac[(l + i, 2 * t)] = col[i].im;
            jac[(i, 2 * t + 1)] = -col[i].im;
            jac[(l + i, 2 * t + 1)] = col[i].re;
        }
    }
    Some((r, jac))
}

/// Optimal assignment of estimated to true bases; `perm[i]` is the index in
/// `estimate` matched to `truth[i]`.
pub fn match_bases(truth: &[Complex64], estimate: &[Complex64]) -> Vec<usize> {
    let cost: Vec<Vec<f64>> = truth
        .iter()
        .map(|t| estimate.iter().map(|e| (t - e).norm()).collect())
        .collect();
    hungarian(&cost)
}

/// `(max |beta - beta~|, max |eta - eta~|)` after optimal matching.
pub fn matched_errors(truth: &ExponentialSum, estimate: &ExponentialSum) -> (f64, f64) {
    let perm = match_bases(&truth.beta, &estimate.beta);
    let mut eb = 0.0f64;
    let mut ee = 0.0f64;
    for (i, &j) in perm.iter().enumerate() {
        eb = eb.max((truth.beta[i] - estimate.beta[j]).norm());
        ee = ee.max((truth.eta[i] - estimate.eta[j]).norm());
    }
    (eb, ee)
}

/// Number of singular values above `rtol` times the largest.
pub fn numerical_rank(m: &CMatrix, rtol: f64) -> usize {
    let s = crate::algebra::singular_values(m);
    let top = s.first().copied().unwrap_or(0.0);
    s.iter().filter(|&&v| v > rtol * top).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::spectral_norm;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_sum(rng: &mut ChaCha8Rng, k: usize, min_sep: f64) -> ExponentialSum {
        loop {
            let beta: Vec<Complex64> = (0..k)
                .map(|_| Complex64::from_polar(rng.random_range(0.5..1.0), rng.random_range(-PI..PI)))
                .collect();
            if conditioning_profile(&beta).sigma < min_sep {
                continue;
            }
            let eta = (0..k)
                .map(|_| Complex64::from_polar(rng.random_range(0.125..1.0), rng.random_range(-PI..PI)))
                .collect();
            return ExponentialSum::new(eta, beta).unwrap();
        }
    }

    #[test]
    fn evaluate_small_cases() {
        let s = ExponentialSum::new(vec![c(1.0, 0.0)], vec![c(1.0, 0.0)]).unwrap();
        assert_eq!(evaluate(&s, 4), vec![c(1.0, 0.0); 4]);
        let s = ExponentialSum::new(vec![c(1.0, 0.0); 2], vec![c(1.0, 0.0), c(-1.0, 0.0)]).unwrap();
        assert_eq!(evaluate(&s, 3), vec![c(2.0, 0.0), c(0.0, 0.0), c(2.0, 0.0)]);
    }

    #[test]
    fn evaluate_matches_power_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = random_sum(&mut rng, 6, 0.0);
        let h = evaluate(&s, 25);
        for (l, hl) in h.iter().enumerate() {
            let direct: Complex64 = s.eta.iter().zip(s.beta.iter()).map(|(e, b)| e * b.powu(l as u32)).sum();
            assert!((hl - direct).norm() <= 1e-12);
        }
    }

    #[test]
    fn sum_rejects_bad_input() {
        assert!(ExponentialSum::new(vec![], vec![]).is_err());
        assert!(ExponentialSum::new(vec![c(1.0, 0.0)], vec![]).is_err());
        assert!(ExponentialSum::new(vec![c(0.0, 0.0)], vec![c(1.0, 0.0)]).is_err());
        assert!(ExponentialSum::new(vec![c(1.0, 0.0); 2], vec![c(0.5, 0.0); 2]).is_err());
    }

    #[test]
    fn hankel_index_arithmetic() {
        let h: Vec<Complex64> = (0..5).map(|v| c(v as f64, 0.0)).collect();
        let m = build_hankel(&h, 1).unwrap().matrix;
        assert_eq!(m.shape(), (4, 2));
        for r in 0..4 {
            assert_eq!(m[(r, 0)], c(r as f64, 0.0));
            assert_eq!(m[(r, 1)], c(r as f64 + 1.0, 0.0));
        }
        assert!(matches!(build_hankel(&h[..4], 2), Err(Error::InsufficientSamples { .. })));
    }

    #[test]
    fn hankel_of_geometric_sequence() {
        let s = ExponentialSum::new(vec![c(1.0, 0.0)], vec![c(2.0, 0.0)]).unwrap();
        let m = build_hankel(&evaluate(&s, 6), 1).unwrap().matrix;
        for r in 0..m.nrows() {
            assert_eq!(m[(r, 1)], m[(r, 0)] * 2.0);
        }
    }

    #[test]
    fn hankel_has_rank_k_for_exact_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for k in 1..=6 {
            let s = random_sum(&mut rng, k, 0.2);
            let h = build_hankel(&evaluate(&s, 4 * k + 1), k).unwrap();
            assert_eq!(numerical_rank(&h.matrix, 1e-8), k);
        }
    }

    #[test]
    fn kernel_of_geometric_sequence() {
        let h: Vec<Complex64> = [1.0, 2.0, 4.0, 8.0].iter().map(|&v| c(v, 0.0)).collect();
        let kv = kernel_vector(&build_hankel(&h, 1).unwrap()).unwrap();
        assert!(kv.sigma_min < 1e-12);
        let ratio = kv.gamma[0] / kv.gamma[1];
        assert!((ratio - c(-2.0, 0.0)).norm() < 1e-12);
        let norm: f64 = kv.gamma.iter().map(|g| g.norm_sqr()).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_annihilates_exact_hankel() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = random_sum(&mut rng, 5, 0.2);
        let h = build_hankel(&evaluate(&s, 13), 5).unwrap();
        let kv = kernel_vector(&h).unwrap();
        assert!(kv.sigma_min <= 1e-10 * spectral_norm(&h.matrix));
        for b in s.beta.iter() {
            assert!(polynomial_eval(&kv.gamma, *b).norm() <= 1e-8);
        }
    }

    #[test]
    fn singular_value_perturbation_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (k, l, eps) = (4, 13, 1e-3);
        let s = random_sum(&mut rng, k, 0.2);
        let h = evaluate(&s, l);
        let noisy: Vec<Complex64> = h
            .iter()
            .map(|v| v + Complex64::from_polar(rng.random_range(0.0..eps), rng.random_range(-PI..PI)))
            .collect();
        let exact = kernel_vector(&build_hankel(&h, k).unwrap()).unwrap().sigma_min;
        let pert = kernel_vector(&build_hankel(&noisy, k).unwrap()).unwrap().sigma_min;
        assert!((pert - exact).abs() <= (l as f64 + 1.0) * eps / 2.0);
    }

    #[test]
    fn roots_linear_and_quadratic() {
        assert_eq!(polynomial_roots(&[c(-1.0, 0.0), c(1.0, 0.0)]).unwrap(), vec![c(1.0, 0.0)]);
        let (b0, b1) = (c(0.3, 0.8), c(-0.6, 0.1));
        let r = polynomial_roots(&[b0 * b1, -(b0 + b1), c(1.0, 0.0)]).unwrap();
        assert!((r[0] - b0).norm() < 1e-12 && (r[1] - b1).norm() < 1e-12);
    }

    #[test]
    fn roots_reject_degenerate_leading_coefficient() {
        assert!(matches!(
            polynomial_roots(&[c(1.0, 0.0), c(1.0, 0.0), c(1e-14, 0.0)]),
            Err(Error::DegenerateLeadingCoefficient { .. })
        ));
    }

    #[test]
    fn roots_from_constructed_polynomials() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for k in 1..=10 {
            let s = random_sum(&mut rng, k, 0.15);
            // monic coefficients of prod (z - beta_k)
            let mut p = vec![c(1.0, 0.0)];
            for b in s.beta.iter() {
                let mut next = vec![c(0.0, 0.0); p.len() + 1];
                for (i, v) in p.iter().enumerate() {
                    next[i + 1] += v;
                    next[i] -= v * b;
                }
                p = next;
            }
            let r = polynomial_roots(&p).unwrap();
            let perm = match_bases(&s.beta, &r);
            for (i, &j) in perm.iter().enumerate() {
                assert!((s.beta[i] - r[j]).norm() < 1e-8, "K = {k}");
            }
        }
    }

    #[test]
    fn canonical_order_breaks_ties_by_phase() {
        let mut z = vec![c(0.0, 1.0), c(0.5, 0.0), c(-1.0, 0.0), c(1.0, 0.0)];
        canonical_order(&mut z);
        assert_eq!(z, vec![c(1.0, 0.0), c(0.0, 1.0), c(-1.0, 0.0), c(0.5, 0.0)]);
    }

    #[test]
    fn fit_geometric() {
        let h = [c(3.0, 0.0), c(6.0, 0.0), c(12.0, 0.0)];
        let (eta, res) = fit_coefficients(&[c(2.0, 0.0)], &h).unwrap();
        assert!((eta[0] - c(3.0, 0.0)).norm() < 1e-13);
        assert!(res < 1e-12);
    }

    #[test]
    fn fit_exact_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for k in 1..=5 {
            let s = random_sum(&mut rng, k, 0.2);
            let h = evaluate(&s, 3 * k + 2);
            let (eta, res) = fit_coefficients(&s.beta, &h).unwrap();
            let hn = h.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            assert!(res <= 1e-10 * hn);
            assert!(crate::algebra::max_abs_diff(&eta, &s.eta) <= 1e-9);
        }
    }

    #[test]
    fn fit_rejects_coincident_bases() {
        let h = [c(1.0, 0.0); 5];
        assert!(matches!(
            fit_coefficients(&[c(0.5, 0.0), c(0.5, 0.0)], &h),
            Err(Error::IllConditioned { .. })
        ));
    }

    #[test]
    fn prony_single_term() {
        let s = ExponentialSum::new(vec![c(0.0, 2.0)], vec![c(0.5, 0.0)]).unwrap();
        let r = approximate_prony(&evaluate(&s, 3), 1).unwrap();
        assert!((r.sum.beta[0] - c(0.5, 0.0)).norm() < 1e-13);
        assert!((r.sum.eta[0] - c(0.0, 2.0)).norm() < 1e-13);
        assert!(!r.unreliable_kernel);
    }

    #[test]
    fn prony_flags_overfitted_order() {
        // two-term data analysed with K = 3 has a two-dimensional kernel
        let s = ExponentialSum::new(vec![c(1.0, 0.0), c(0.5, 0.0)], vec![c(0.9, 0.0), c(-0.6, 0.3)]).unwrap();
        let noisy: Vec<Complex64> = evaluate(&s, 12)
            .iter()
            .enumerate()
            .map(|(l, v)| v + c(1e-9 * ((l * 7 % 5) as f64 - 2.0), 0.0))
            .collect();
        let r = approximate_prony(&noisy, 3).unwrap();
        assert!(r.unreliable_kernel);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn prony_round_trip(seed in any::<u64>(), k in 1usize..=6, extra in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_sum(&mut rng, k, 0.2);
            let l = 2 * k + extra;
            let h = evaluate(&s, l);
            let r = approximate_prony(&h, k).unwrap();
            let (eb, ee) = matched_errors(&s, &r.sum);
            prop_assert!(eb <= 1e-8 && ee <= 1e-8, "eb = {eb}, ee = {ee}");
            let back = evaluate(&r.sum, l);
            let resid = back.iter().zip(&h).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
            prop_assert!(resid <= r.residual + 1e-12);
        }
    }

    #[test]
    fn refine_bases_recovers_from_perturbed_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let sum = random_sum(&mut rng, 5, 0.1);
            let h = evaluate(&sum, 11);
            let start: Vec<Complex64> = sum.beta.iter().map(|b| b + c(rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3))).collect();
            let (beta, resid) = refine_bases(&h, &start, 30).unwrap();
            let err = beta.iter().zip(sum.beta.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(err < 1e-9, "{err}");
            assert!(resid < 1e-10, "{resid}");
        }
    }
}
