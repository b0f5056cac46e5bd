//! Dense complex utilities: DFT, Vandermonde construction and closed-form
//! inversion, elementary symmetric polynomials, and the conditioning
//! functionals (base radius, product radius, minimal separation) that drive
//! every perturbation bound in [`crate::sensitivity`].

use std::f64::consts::PI;
use std::ops::Deref;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;

/// Lengths up to this use the direct O(d^2) sum.
const DIRECT_DFT_MAX: usize = 64;

/// Relative distance below which two bases count as coincident.
pub const COINCIDENCE_RTOL: f64 = 1e-10;

/// Finite complex vector. Serializes as a list of `[re, im]` pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComplexVector(Vec<Complex64>);

impl ComplexVector {
    pub fn new(entries: Vec<Complex64>) -> Result<Self> {
        if let Some(i) = entries.iter().position(|z| !z.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self(entries))
    }

    pub fn from_real(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| Complex64::new(v, 0.0)).collect())
    }

    pub fn into_inner(self) -> Vec<Complex64> {
        self.0
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.0
    }
}

impl Deref for ComplexVector {
    type Target = [Complex64];

    fn deref(&self) -> &[Complex64] {
        &self.0
    }
}

impl TryFrom<Vec<Complex64>> for ComplexVector {
    type Error = Error;

    fn try_from(v: Vec<Complex64>) -> Result<Self> {
        Self::new(v)
    }
}

impl Serialize for ComplexVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        to_pairs(&self.0).serialize(s)
    }
}

impl<'de> Deserialize<'de> for ComplexVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let pairs = Vec::<[f64; 2]>::deserialize(d)?;
        Self::new(from_pairs(&pairs)).map_err(serde::de::Error::custom)
    }
}

pub fn to_pairs(v: &[Complex64]) -> Vec<[f64; 2]> {
    v.iter().map(|z| [z.re, z.im]).collect()
}

pub fn from_pairs(p: &[[f64; 2]]) -> Vec<Complex64> {
    p.iter().map(|&[re, im]| Complex64::new(re, im)).collect()
}

/// Maximal base radius, product radius and minimal separation of a set of
/// bases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditioningProfile {
    pub rho: f64,
    pub pi: f64,
    pub sigma: f64,
}

impl ConditioningProfile {
    /// `pi / sigma^(K-1)`, the bound on the row-sum norm of the inverse
    /// square Vandermonde matrix.
    pub fn inverse_vandermonde_bound(&self, k: usize) -> f64 {
        self.pi / separation_power(self.sigma, k)
    }
}

/// `sigma^(K-1)`, with the empty product for `K = 1`.
pub fn separation_power(sigma: f64, k: usize) -> f64 {
    if k <= 1 {
        1.0
    } else {
        sigma.powi(k as i32 - 1)
    }
}

pub fn conditioning_profile(beta: &[Complex64]) -> ConditioningProfile {
    let rho = beta.iter().map(|b| b.norm()).fold(1.0, f64::max);
    let pi = beta.iter().map(|b| 1.0 + b.norm()).product();
    let mut sigma = f64::INFINITY;
    for (i, a) in beta.iter().enumerate() {
        for b in &beta[i + 1..] {
            sigma = sigma.min((a - b).norm());
        }
    }
    ConditioningProfile { rho, pi, sigma }
}

/// Absolute tolerance under which two bases are treated as coincident.
pub fn coincidence_tolerance(beta: &[Complex64]) -> f64 {
    COINCIDENCE_RTOL * conditioning_profile(beta).rho
}

fn ensure_distinct(beta: &[Complex64]) -> Result<ConditioningProfile> {
    let profile = conditioning_profile(beta);
    if profile.sigma < COINCIDENCE_RTOL * profile.rho {
        return Err(Error::Singular {
            separation: profile.sigma,
        });
    }
    Ok(profile)
}

/// `F v` with `F = (exp(-2 pi i jk / d))`.
pub fn dft(v: &[Complex64]) -> Result<Vec<Complex64>> {
    transform(v, false)
}

/// Inverse of [`dft`], including the `1/d` factor.
pub fn idft(v: &[Complex64]) -> Result<Vec<Complex64>> {
    let d = v.len() as f64;
    Ok(transform(v, true)?.into_iter().map(|z| z / d).collect())
}

fn transform(v: &[Complex64], inverse: bool) -> Result<Vec<Complex64>> {
    let d = v.len();
    if d == 0 {
        return Err(Error::EmptyInput);
    }
    if d <= DIRECT_DFT_MAX {
        let sign = if inverse { 1.0 } else { -1.0 };
        return Ok((0..d)
            .map(|j| {
                v.iter()
                    .enumerate()
                    .map(|(k, x)| x * twiddle(sign, j * k, d))
                    .sum()
            })
            .collect());
    }
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(d)
    } else {
        planner.plan_fft_forward(d)
    };
    let mut buf = v.to_vec();
    fft.process(&mut buf);
    Ok(buf)
}

fn twiddle(sign: f64, jk: usize, d: usize) -> Complex64 {
    // reduce before scaling to keep the angle small
    let r = (jk % d) as f64;
    Complex64::from_polar(1.0, sign * 2.0 * PI * r / d as f64)
}

/// The Fourier matrix `F = (exp(-2 pi i jk / d))`.
pub fn fourier_matrix(d: usize) -> CMatrix {
    CMatrix::from_fn(d, d, |j, k| twiddle(-1.0, j * k, d))
}

/// Rectangular Vandermonde matrix with entry `(l, k) = beta_k^l`.
pub fn build_vandermonde(beta: &[Complex64], rows: usize) -> CMatrix {
    let mut v = CMatrix::zeros(rows, beta.len());
    for (k, b) in beta.iter().enumerate() {
        let mut p = Complex64::new(1.0, 0.0);
        for l in 0..rows {
            v[(l, k)] = p;
            p *= b;
        }
    }
    v
}

/// Elementary symmetric polynomials `S_0, ..., S_n` of the `n` variables in
/// `beta` (with `beta[skip]` removed when given), read off from the
/// expansion of `prod (z + beta_k)`.
pub fn elementary_symmetric(beta: &[Complex64], skip: Option<usize>) -> Result<Vec<Complex64>> {
    if let Some(s) = skip {
        if s >= beta.len() {
            return Err(Error::IndexOutOfRange {
                index: s,
                len: beta.len(),
            });
        }
    }
    let mut e = Vec::with_capacity(beta.len() + 1);
    e.push(Complex64::new(1.0, 0.0));
    for (k, b) in beta.iter().enumerate() {
        if Some(k) == skip {
            continue;
        }
        e.push(Complex64::new(0.0, 0.0));
        for i in (1..e.len()).rev() {
            let prev = e[i - 1];
            e[i] += b * prev;
        }
    }
    Ok(e)
}

/// Closed-form inverse of the square Vandermonde matrix `V(beta)`:
/// entry `(l, k) = (-1)^(K-k-1) S^(l)_(K-k-1)(beta) / prod_{m != l}(beta_l - beta_m)`.
pub fn invert_square_vandermonde(beta: &[Complex64]) -> Result<CMatrix> {
    let k_len = beta.len();
    if k_len == 0 {
        return Err(Error::EmptyInput);
    }
    ensure_distinct(beta)?;
    let mut inv = CMatrix::zeros(k_len, k_len);
    for l in 0..k_len {
        let s = elementary_symmetric(beta, Some(l))?;
        let denom: Complex64 = beta
            .iter()
            .enumerate()
            .filter(|&(m, _)| m != l)
            .map(|(_, b)| beta[l] - b)
            .product();
        for k in 0..k_len {
            let idx = k_len - k - 1;
            let sign = if idx % 2 == 0 { 1.0 } else { -1.0 };
            inv[(l, k)] = s[idx] * sign / denom;
        }
    }
    Ok(inv)
}

/// Upper bound `sqrt(K) L pi rho^(L-1) / sigma^(K-1)` on the spectral
/// condition number of `V_L(beta)`.
pub fn vandermonde_condition_bound(beta: &[Complex64], rows: usize) -> Result<f64> {
    let k = beta.len();
    if k == 0 {
        return Err(Error::EmptyInput);
    }
    if rows < k {
        return Err(Error::InsufficientSamples {
            needed: k - 1,
            got: rows,
        });
    }
    let p = ensure_distinct(beta)?;
    Ok((k as f64).sqrt() * rows as f64 * p.pi * p.rho.powi(rows as i32 - 1)
        / separation_power(p.sigma, k))
}

/// Maximum absolute row sum.
pub fn inf_norm(m: &CMatrix) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Maximum absolute column sum.
pub fn one_norm(m: &CMatrix) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Singular values in descending order.
pub fn singular_values(m: &CMatrix) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn spectral_norm(m: &CMatrix) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

pub fn vec_inf_norm(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Smallest modulus, `||v||_{-inf}`.
pub fn vec_min_modulus(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm()).fold(f64::INFINITY, f64::min)
}

pub fn max_abs_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

/// Reduce an angle to `[-pi, pi)`.
pub fn wrap_phase(theta: f64) -> f64 {
    let t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if t >= PI {
        t - 2.0 * PI
    } else {
        t
    }
}
