//! Measurement model: diagonalizable and circulant systems, phaseless
//! samples `|<x, A^l phi>|^2`, noise, collision predicates and seeded
//! instance generators.
//!
//! Inner products are linear in the second argument, `<u, v> = u^* v`.
//! With `A = S diag(lambda) S^{-1}`, `y = S^* x` and `psi = S^{-1} phi` the
//! samples are `|sum_k c_k lambda_k^l|^2` with `c_k = conj(y_k) psi_k`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::algebra::{dft, from_pairs, fourier_matrix, idft, singular_values, to_pairs, wrap_phase, CMatrix, ComplexVector};
use crate::{Error, Result};

/// Systems with a larger eigenvector condition number are rejected.
const MAX_BASIS_CONDITION: f64 = 1e12;

/// Deterministic RNG for `(seed, stream)`; streams separate trials.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DiagonalizableRepr", into = "DiagonalizableRepr")]
pub struct DiagonalizableSystem {
    s: CMatrix,
    s_inv: CMatrix,
    lambda: ComplexVector,
}

#[derive(Serialize, Deserialize)]
struct DiagonalizableRepr {
    basis: Vec<Vec<[f64; 2]>>,
    lambda: ComplexVector,
}

impl TryFrom<DiagonalizableRepr> for DiagonalizableSystem {
    type Error = Error;

    fn try_from(r: DiagonalizableRepr) -> Result<Self> {
        let d = r.basis.len();
        if r.basis.iter().any(|row| row.len() != d) {
            return Err(Error::Config("eigenvector basis must be square".into()));
        }
        let entries: Vec<Complex64> = r.basis.iter().flat_map(|row| from_pairs(row)).collect();
        Self::new(CMatrix::from_row_slice(d, d, &entries), r.lambda.into_inner())
    }
}

impl From<DiagonalizableSystem> for DiagonalizableRepr {
    fn from(s: DiagonalizableSystem) -> Self {
        let basis = s
            .s
            .row_iter()
            .map(|row| to_pairs(&row.iter().copied().collect::<Vec<_>>()))
            .collect();
        Self {
            basis,
            lambda: s.lambda,
        }
    }
}

impl DiagonalizableSystem {
    pub fn new(s: CMatrix, lambda: Vec<Complex64>) -> Result<Self> {
        let d = lambda.len();
        if d == 0 {
            return Err(Error::EmptyInput);
        }
        if s.shape() != (d, d) {
            return Err(Error::LengthMismatch {
                expected: d,
                found: s.nrows(),
            });
        }
        if let Some(k) = lambda.iter().position(|l| l.norm() == 0.0) {
            return Err(Error::Precondition(format!("eigenvalue {k} vanishes")));
        }
        let sv = singular_values(&s);
        let cond = sv[0] / sv[d - 1];
        if !cond.is_finite() || cond > MAX_BASIS_CONDITION {
            return Err(Error::IllConditioned { condition: cond });
        }
        let s_inv = s
            .clone()
            .try_inverse()
            .ok_or(Error::IllConditioned { condition: cond })?;
        Ok(Self {
            s,
            s_inv,
            lambda: ComplexVector::new(lambda)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    pub fn basis(&self) -> &CMatrix {
        &self.s
    }

    pub fn basis_inverse(&self) -> &CMatrix {
        &self.s_inv
    }

    pub fn lambda(&self) -> &[Complex64] {
        &self.lambda
    }

    /// `S diag(lambda) S^{-1}`.
    pub fn matrix(&self) -> CMatrix {
        let mut sl = self.s.clone();
        for (k, l) in self.lambda.iter().enumerate() {
            for v in sl.column_mut(k).iter_mut() {
                *v *= l;
            }
        }
        sl * &self.s_inv
    }

    fn check_len(&self, v: &[Complex64]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::LengthMismatch {
                expected: self.dim(),
                found: v.len(),
            });
        }
        Ok(())
    }

    /// `y = S^* x`.
    pub fn transformed_signal(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        self.check_len(x)?;
        Ok(mat_vec(&self.s.adjoint(), x))
    }

    /// `psi = S^{-1} phi`.
    pub fn transformed_sampler(&self, phi: &[Complex64]) -> Result<Vec<Complex64>> {
        self.check_len(phi)?;
        Ok(mat_vec(&self.s_inv, phi))
    }

    /// `x = (S^*)^{-1} y = (S^{-1})^* y`.
    pub fn signal_from_transformed(&self, y: &[Complex64]) -> Result<Vec<Complex64>> {
        self.check_len(y)?;
        Ok(mat_vec(&self.s_inv.adjoint(), y))
    }

    /// `c_k = conj(y_k) psi_k`.
    pub fn coefficients(&self, x: &[Complex64], phi: &[Complex64]) -> Result<Vec<Complex64>> {
        let y = self.transformed_signal(x)?;
        let psi = self.transformed_sampler(phi)?;
        Ok(y.iter().zip(&psi).map(|(y, p)| y.conj() * p).collect())
    }
}

fn mat_vec(m: &CMatrix, v: &[Complex64]) -> Vec<Complex64> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)] * v[j]).sum())
        .collect()
}

/// Convolution `x -> a * x`, diagonalized by the DFT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CirculantSystem {
    pub a: ComplexVector,
    pub a_hat: ComplexVector,
}

impl CirculantSystem {
    pub fn from_kernel(a: Vec<Complex64>) -> Result<Self> {
        let a_hat = dft(&a)?;
        Ok(Self {
            a: ComplexVector::new(a)?,
            a_hat: ComplexVector::new(a_hat)?,
        })
    }

    pub fn from_spectrum(a_hat: Vec<Complex64>) -> Result<Self> {
        let a = idft(&a_hat)?;
        Ok(Self {
            a: ComplexVector::new(a)?,
            a_hat: ComplexVector::new(a_hat)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    /// `S = F^{-1}`, `S^{-1} = F`, eigenvalues `a_hat`. Then `y = x_hat / d`
    /// and `psi = phi_hat`.
    pub fn to_diagonalizable(&self) -> DiagonalizableSystem {
        let d = self.dim();
        let f = fourier_matrix(d);
        let s = f.map(|z| z.conj() / d as f64);
        DiagonalizableSystem {
            s,
            s_inv: f,
            lambda: self.a_hat.clone(),
        }
    }

    /// Explicit matrix with entry `(i, j) = a_{(i - j) mod d}`.
    pub fn circulant_matrix(&self) -> CMatrix {
        let d = self.dim();
        CMatrix::from_fn(d, d, |i, j| self.a[(i + d - j) % d])
    }

    /// Circular convolution `a * x` through the DFT.
    pub fn apply(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        let xh = dft(x)?;
        let prod: Vec<Complex64> = xh.iter().zip(self.a_hat.iter()).map(|(u, v)| u * v).collect();
        idft(&prod)
    }
}

/// Noise-free samples `|<x, A^l phi>|^2`, `l = 0..L`, from the diagonal form.
pub fn measure(
    system: &DiagonalizableSystem,
    x: &[Complex64],
    phi: &[Complex64],
    samples: usize,
) -> Result<Vec<f64>> {
    let c = system.coefficients(x, phi)?;
    Ok(measure_from_coefficients(&c, system.lambda(), samples))
}

/// `|sum_k c_k lambda_k^l|^2`, identical to `sum_{j,k} c_j conj(c_k)
/// (lambda_j conj(lambda_k))^l`.
pub fn measure_from_coefficients(c: &[Complex64], lambda: &[Complex64], samples: usize) -> Vec<f64> {
    let mut terms = c.to_vec();
    (0..samples)
        .map(|_| {
            let s: Complex64 = terms.iter().sum();
            for (t, l) in terms.iter_mut().zip(lambda) {
                *t *= l;
            }
            s.norm_sqr()
        })
        .collect()
}

/// Samples by repeated application of the explicit matrix `A`.
pub fn measure_direct(a: &CMatrix, x: &[Complex64], phi: &[Complex64], samples: usize) -> Result<Vec<f64>> {
    let d = a.nrows();
    for v in [x, phi] {
        if v.len() != d {
            return Err(Error::LengthMismatch {
                expected: d,
                found: v.len(),
            });
        }
    }
    let mut v = phi.to_vec();
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let ip: Complex64 = x.iter().zip(&v).map(|(a, b)| a.conj() * b).sum();
        out.push(ip.norm_sqr());
        v = mat_vec(a, &v);
    }
    Ok(out)
}

/// The `d^2` terms of the measurement sum, flat index `j d + k` holding
/// coefficient `c_j conj(c_k)` and base `lambda_j conj(lambda_k)`.
pub fn product_terms(c: &[Complex64], lambda: &[Complex64]) -> (Vec<Complex64>, Vec<Complex64>) {
    let mut eta = Vec::with_capacity(c.len() * c.len());
    let mut beta = Vec::with_capacity(c.len() * c.len());
    for j in 0..c.len() {
        for k in 0..c.len() {
            eta.push(c[j] * c[k].conj());
            beta.push(lambda[j] * lambda[k].conj());
        }
    }
    (eta, beta)
}

/// Samples of several sampling vectors with their noise record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementEnsemble {
    pub samples: Vec<Vec<f64>>,
    pub noise_level: f64,
    /// Real part of complex noise kept (real measurement channel).
    pub real_channel: bool,
    pub seed: Option<u64>,
}

impl MeasurementEnsemble {
    pub fn lengths(&self) -> Vec<usize> {
        self.samples.iter().map(Vec::len).collect()
    }
}

/// `h_l + Re e_l` with `|e_l| ~ U[0, eps]` and uniform phase.
pub fn add_noise<R: Rng + ?Sized>(h: &[f64], eps: f64, rng: &mut R) -> Vec<f64> {
    if eps == 0.0 {
        return h.to_vec();
    }
    h.iter().map(|v| v + noise_sample(eps, rng).re).collect()
}

/// `h_l + e_l` with `|e_l| ~ U[0, eps]` and uniform phase.
pub fn add_complex_noise<R: Rng + ?Sized>(h: &[Complex64], eps: f64, rng: &mut R) -> Vec<Complex64> {
    if eps == 0.0 {
        return h.to_vec();
    }
    h.iter().map(|v| v + noise_sample(eps, rng)).collect()
}

fn noise_sample<R: Rng + ?Sized>(eps: f64, rng: &mut R) -> Complex64 {
    let r = rng.random_range(0.0..=eps);
    let theta = rng.random_range(-PI..PI);
    Complex64::from_polar(r, theta)
}

/// Smallest distance between two points of the set, by a sweep over the
/// real parts.
pub fn min_pairwise_distance(points: &[Complex64]) -> f64 {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a.re.total_cmp(&b.re));
    let mut best = f64::INFINITY;
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            if p[j].re - p[i].re >= best {
                break;
            }
            best = best.min((p[j] - p[i]).norm());
        }
    }
    best
}

fn min_gap_real(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

/// Default collision tolerance, `1e-8` times the largest product modulus.
pub fn default_collision_tol(lambda: &[Complex64]) -> f64 {
    let m = lambda.iter().map(|l| l.norm()).fold(0.0, f64::max);
    1e-8 * (m * m).max(f64::MIN_POSITIVE)
}

/// Smallest distance among the products `lambda_j conj(lambda_k)`.
pub fn product_separation(lambda: &[Complex64]) -> f64 {
    let (_, beta) = product_terms(&vec![Complex64::new(1.0, 0.0); lambda.len()], lambda);
    min_pairwise_distance(&beta)
}

/// Smallest gap among the moduli `|lambda_j| |lambda_k|`, `j > k`.
pub fn modulus_product_separation(lambda: &[Complex64]) -> f64 {
    let mut m = Vec::new();
    for j in 0..lambda.len() {
        for k in 0..j {
            m.push(lambda[j].norm() * lambda[k].norm());
        }
    }
    min_gap_real(&m)
}

pub fn is_collision_free(lambda: &[Complex64], tol: f64) -> bool {
    product_separation(lambda) > tol
}

pub fn is_absolutely_collision_free(lambda: &[Complex64], tol: f64) -> bool {
    is_collision_free(lambda, tol) && modulus_product_separation(lambda) > tol
}

/// Real positive, even under `k -> -k mod d`, strictly decreasing on
/// `0..=d/2`.
pub fn is_lowpass_kernel(a_hat: &[Complex64], tol: f64) -> bool {
    let d = a_hat.len();
    if d == 0 {
        return false;
    }
    if a_hat.iter().any(|z| z.im.abs() > tol || z.re <= tol) {
        return false;
    }
    if (1..d).any(|k| (a_hat[k].re - a_hat[d - k].re).abs() > tol) {
        return false;
    }
    (0..d / 2).all(|k| a_hat[k].re - a_hat[k + 1].re > tol)
}

/// The products `a_hat_j a_hat_k`, `0 <= k <= j <= d/2`, are pairwise
/// distinct.
pub fn is_frequency_collision_free(a_hat: &[Complex64], tol: f64) -> bool {
    let n = a_hat.len() / 2 + 1;
    let mut p = Vec::new();
    for j in 0..n {
        for k in 0..=j {
            p.push(a_hat[j] * a_hat[k]);
        }
    }
    min_pairwise_distance(&p) > tol
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstanceKind {
    GenericCollisionFree,
    LowpassReal,
    LowpassComplex,
    MultiVector,
}

impl std::fmt::Display for InstanceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::GenericCollisionFree => "generic-collision-free",
            Self::LowpassReal => "lowpass-real",
            Self::LowpassComplex => "lowpass-complex",
            Self::MultiVector => "multi-vector",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum SystemModel {
    Diagonalizable(DiagonalizableSystem),
    Circulant(CirculantSystem),
}

impl SystemModel {
    pub fn diagonalizable(&self) -> DiagonalizableSystem {
        match self {
            Self::Diagonalizable(s) => s.clone(),
            Self::Circulant(c) => c.to_diagonalizable(),
        }
    }

    pub fn spectrum(&self) -> &[Complex64] {
        match self {
            Self::Diagonalizable(s) => s.lambda(),
            Self::Circulant(c) => &c.a_hat,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorOptions {
    /// Maximum number of draws before giving up.
    pub budget: usize,
    /// Support width of each sampling vector (multi-vector kind).
    pub window: usize,
    /// Draw a circulant system for the generic kind.
    pub circulant: bool,
    /// Eigenvalue moduli are drawn from `[min_modulus, 1]` (generic and
    /// multi-vector kinds).
    pub min_modulus: f64,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        Self {
            budget: 10_000,
            window: 4,
            circulant: false,
            min_modulus: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub kind: InstanceKind,
    pub d: usize,
    pub seed: u64,
    /// Draws rejected before this one was accepted.
    pub rejections: usize,
    pub system: SystemModel,
    pub x: ComplexVector,
    pub sampling: Vec<ComplexVector>,
    /// Eigenbasis supports of `S^{-1} phi_i` (multi-vector kind).
    pub supports: Option<Vec<Vec<usize>>>,
}

impl Instance {
    /// Noise-free samples for every sampling vector, `L` each.
    pub fn measure(&self, samples: usize) -> Result<MeasurementEnsemble> {
        let sys = self.system.diagonalizable();
        let s = self
            .sampling
            .iter()
            .map(|phi| measure(&sys, &self.x, phi, samples))
            .collect::<Result<Vec<_>>>()?;
        Ok(MeasurementEnsemble {
            samples: s,
            noise_level: 0.0,
            real_channel: true,
            seed: Some(self.seed),
        })
    }
}

fn uniform_phase<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> Complex64 {
    Complex64::from_polar(rng.random_range(lo..hi), rng.random_range(-PI..PI))
}

fn random_complex<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<Complex64> {
    (0..d)
        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect()
}

fn random_real<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<Complex64> {
    (0..d)
        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), 0.0))
        .collect()
}

/// Rejection-samples an instance satisfying the hypotheses of the pipeline
/// that consumes `kind`.
pub fn random_instance(kind: InstanceKind, d: usize, seed: u64, options: &GeneratorOptions) -> Result<Instance> {
    if d == 0 {
        return Err(Error::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 0..options.budget {
        let drawn = match kind {
            InstanceKind::GenericCollisionFree => draw_generic(&mut rng, d, options)?,
            InstanceKind::LowpassReal => draw_lowpass(&mut rng, d, false)?,
            InstanceKind::LowpassComplex => draw_lowpass(&mut rng, d, true)?,
            InstanceKind::MultiVector => draw_multi_vector(&mut rng, d, options.window, options.min_modulus)?,
        };
        if let Some((system, x, sampling, supports)) = drawn {
            return Ok(Instance {
                kind,
                d,
                seed,
                rejections: attempt,
                system,
                x: ComplexVector::new(x)?,
                sampling: sampling
                    .into_iter()
                    .map(ComplexVector::new)
                    .collect::<Result<_>>()?,
                supports,
            });
        }
    }
    Err(Error::Generation {
        kind: kind.to_string(),
        attempts: options.budget,
    })
}

type Drawn = Option<(SystemModel, Vec<Complex64>, Vec<Vec<Complex64>>, Option<Vec<Vec<usize>>>)>;

/// Spectrum with separated products, nonreal off-diagonal products and
/// separated modulus products.
fn spectrum_is_separated(lambda: &[Complex64], margin: f64, modulus_margin: f64) -> bool {
    let d = lambda.len();
    for j in 0..d {
        for k in 0..j {
            if (lambda[j] * lambda[k].conj()).im.abs() < margin {
                return false;
            }
        }
    }
    let diag: Vec<f64> = lambda.iter().map(|l| l.norm_sqr()).collect();
    product_separation(lambda) >= margin
        && modulus_product_separation(lambda) >= modulus_margin
        && min_gap_real(&diag) >= modulus_margin
}

/// Smallest circular distance between the arguments of `lambda`.
pub fn min_phase_gap(lambda: &[Complex64]) -> f64 {
    let mut args: Vec<f64> = lambda.iter().map(|l| l.arg()).collect();
    args.sort_by(f64::total_cmp);
    let n = args.len();
    if n < 2 {
        return 2.0 * PI;
    }
    let wrap = args[0] + 2.0 * PI - args[n - 1];
    args.windows(2).map(|w| w[1] - w[0]).fold(wrap, f64::min)
}

/// `d` phases uniformly distributed subject to a circular gap of at least
/// `gap` (sorted uniform draws on a shortened circle, spread by `gap`).
fn phases_with_gap<R: Rng + ?Sized>(rng: &mut R, d: usize, gap: f64) -> Vec<f64> {
    let room = 2.0 * PI - d as f64 * gap;
    let mut u: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..room)).collect();
    u.sort_by(f64::total_cmp);
    let offset = rng.random_range(-PI..PI);
    u.iter()
        .enumerate()
        .map(|(i, v)| wrap_phase(v + i as f64 * gap + offset))
        .collect()
}

fn draw_generic<R: Rng + ?Sized>(rng: &mut R, d: usize, options: &GeneratorOptions) -> Result<Drawn> {
    let margin = 0.2 / (d * d) as f64;
    let phases = phases_with_gap(rng, d, PI / (2 * d) as f64);
    let lambda: Vec<Complex64> = phases
        .into_iter()
        .map(|t| Complex64::from_polar(rng.random_range(options.min_modulus..1.0), t))
        .collect();
    if !spectrum_is_separated(&lambda, margin, margin / 4.0) {
        return Ok(None);
    }
    let system = if options.circulant {
        SystemModel::Circulant(CirculantSystem::from_spectrum(lambda)?)
    } else {
        let s = CMatrix::from_fn(d, d, |_, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let sv = singular_values(&s);
        if sv[0] / sv[d - 1] > 50.0 {
            return Ok(None);
        }
        SystemModel::Diagonalizable(DiagonalizableSystem::new(s, lambda)?)
    };
    let x = random_complex(rng, d);
    let phi = random_complex(rng, d);
    let sys = system.diagonalizable();
    let c = sys.coefficients(&x, &phi)?;
    let cmax = c.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if c.iter().any(|v| v.norm() < 0.1 * cmax) {
        return Ok(None);
    }
    // products c_j conj(c_k) separated, for the known-signal pipeline
    let (eta, _) = product_terms(&c, &vec![Complex64::new(1.0, 0.0); d]);
    if d > 1 && min_pairwise_distance(&eta) < margin * cmax * cmax {
        return Ok(None);
    }
    Ok(Some((system, x, vec![phi], None)))
}

/// Strictly decreasing positive half-spectrum with separated products.
fn draw_lowpass_spectrum<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Option<Vec<Complex64>> {
    let n = d / 2 + 1;
    let k_terms = n * (n + 1) / 2;
    let mut half: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    half.sort_by(|a, b| b.total_cmp(a));
    let margin = 0.25 / k_terms as f64;
    if half.windows(2).any(|w| w[0] - w[1] < margin) {
        return None;
    }
    let a_hat = symmetric_spectrum(&half, d);
    let mut p = Vec::new();
    for j in 0..n {
        for k in 0..=j {
            p.push(half[j] * half[k]);
        }
    }
    if min_gap_real(&p) < margin {
        return None;
    }
    Some(a_hat)
}

/// Extends `half[0..=d/2]` evenly to all `d` frequencies.
pub fn symmetric_spectrum(half: &[f64], d: usize) -> Vec<Complex64> {
    (0..d)
        .map(|k| Complex64::new(half[k.min(d - k)], 0.0))
        .collect()
}

/// Multiplicity of frequency `k` in the folded real sum: 1 for the zero
/// and (even `d`) Nyquist frequency, 2 otherwise.
pub fn fold_weight(k: usize, d: usize) -> f64 {
    if k == 0 || 2 * k == d {
        1.0
    } else {
        2.0
    }
}

/// Folded coefficients `C_k = c_k + c_{-k}` (single term at `0` and the
/// Nyquist frequency), `k = 0..=d/2`.
pub fn folded_coefficients(c: &[Complex64]) -> Vec<Complex64> {
    let d = c.len();
    (0..=d / 2)
        .map(|k| if k == 0 || 2 * k == d { c[k] } else { c[k] + c[d - k] })
        .collect()
}

/// Folded coefficients of one sampling vector are usable: every product
/// coefficient clearly nonzero and the zero frequency, which every other
/// coefficient is divided by, not small.
fn lowpass_coefficients_ok(folded: &[Complex64], complex: bool) -> bool {
    let n = folded.len();
    let w: Vec<f64> = if complex {
        let mut w = Vec::new();
        for j in 0..n {
            for k in 0..=j {
                w.push((folded[j] * folded[k].conj()).re.abs());
            }
        }
        w
    } else {
        folded.iter().map(|z| z.re.abs()).collect()
    };
    let top = w.iter().copied().fold(0.0, f64::max);
    let biggest = folded.iter().map(|z| z.norm()).fold(0.0, f64::max);
    w.iter().all(|&v| v >= 0.05 * top) && folded[0].norm() >= 0.2 * biggest
}

fn draw_lowpass<R: Rng + ?Sized>(rng: &mut R, d: usize, complex: bool) -> Result<Drawn> {
    const VECTOR_RETRIES: usize = 100;
    let Some(a_hat) = draw_lowpass_spectrum(rng, d) else {
        return Ok(None);
    };
    let system = CirculantSystem::from_spectrum(a_hat)?;
    let sys = system.to_diagonalizable();
    let vectors = if complex { 4 } else { 2 };
    let draw = |rng: &mut R| if complex { random_complex(rng, d) } else { random_real(rng, d) };
    let x = draw(rng);
    let x_hat = dft(&x)?;
    if x_hat[0].norm() < 0.2 * x_hat.iter().map(|z| z.norm()).fold(0.0, f64::max) {
        return Ok(None);
    }
    let n = d / 2 + 1;
    let mut phis: Vec<Vec<Complex64>> = Vec::with_capacity(vectors);
    for _ in 0..vectors {
        let mut found = None;
        for _ in 0..VECTOR_RETRIES {
            let phi = draw(rng);
            if lowpass_coefficients_ok(&folded_coefficients(&sys.coefficients(&x, &phi)?), complex) {
                found = Some(phi);
                break;
            }
        }
        match found {
            Some(phi) => phis.push(phi),
            None => return Ok(None),
        }
    }
    let phi_hats: Vec<Vec<Complex64>> = phis.iter().map(|p| dft(p)).collect::<Result<_>>()?;
    if complex {
        if !complex_frequency_systems_ok(&x_hat, &phi_hats, d)? {
            return Ok(None);
        }
    } else {
        // pointwise independence away from the real Nyquist frequency
        for k in 1..n {
            if 2 * k == d {
                continue;
            }
            let (p, q) = (phi_hats[0][k], phi_hats[1][k]);
            if (p.re * q.im - p.im * q.re).abs() < 0.1 * p.norm() * q.norm() {
                return Ok(None);
            }
        }
    }
    Ok(Some((SystemModel::Circulant(system), x, phis, None)))
}

/// Per-frequency real systems of the complex low-pass pipeline, for the
/// true gauge `x_hat_0` made real positive.
pub fn complex_frequency_matrix(c0: &[Complex64], phi_hats: &[Vec<Complex64>], k: usize, d: usize) -> DMatrix<f64> {
    let nyquist = 2 * k == d;
    let cols = if nyquist { 2 } else { 4 };
    DMatrix::from_fn(phi_hats.len(), cols, |i, col| {
        let idx = if col < 2 { k } else { d - k };
        let z = c0[i].conj() * phi_hats[i][idx] / d as f64;
        if col % 2 == 0 {
            z.re
        } else {
            z.im
        }
    })
}

fn complex_frequency_systems_ok(x_hat: &[Complex64], phi_hats: &[Vec<Complex64>], d: usize) -> Result<bool> {
    let x0 = x_hat[0].norm();
    let c0: Vec<Complex64> = phi_hats.iter().map(|p| x0 * p[0] / d as f64).collect();
    for k in 1..=d / 2 {
        let m = complex_frequency_matrix(&c0, phi_hats, k, d);
        let sv = m.singular_values();
        let cond = sv.max() / sv.min();
        if !cond.is_finite() || cond > 1e2 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Supports `{i, ..., i + w - 1}` for `i = 0..=d - w`.
pub fn staggered_supports(d: usize, w: usize) -> Vec<Vec<usize>> {
    if w == 0 || w > d {
        return Vec::new();
    }
    (0..=d - w).map(|i| (i..i + w).collect()).collect()
}

/// `sin` of the angle between `psi_{i1,k1} conj(psi_{i1,k2})` and
/// `psi_{i2,k1} conj(psi_{i2,k2})`; zero when the winding cannot be read
/// off this quadruple.
pub fn winding_sine(psi: &[Vec<Complex64>], i1: usize, i2: usize, k1: usize, k2: usize) -> f64 {
    let p = psi[i1][k1] * psi[i1][k2].conj();
    let q = psi[i2][k1] * psi[i2][k2].conj();
    let n = p.norm() * q.norm();
    if n == 0.0 {
        0.0
    } else {
        (p.re * q.im - p.im * q.re).abs() / n
    }
}

/// Moduli of eigenvalues that meet in the index-separation step of the
/// multi-vector kind differ by at least this much.
pub const MODULUS_SPACING: f64 = 1e-2;

fn draw_multi_vector<R: Rng + ?Sized>(rng: &mut R, d: usize, w: usize, min_modulus: f64) -> Result<Drawn> {
    if w < 2 || w > d {
        return Err(Error::Precondition(format!("window {w} invalid for dimension {d}")));
    }
    const ELEMENT_RETRIES: usize = 1000;
    let margin = 0.2 / (w * w) as f64;
    let gap = PI / (2 * w) as f64;
    // Each eigenvalue is drawn against the ones before it that share a
    // support (phase gap) or meet it in the set algebra (distinct moduli).
    let reach = 2 * w - 1;
    let mut a_hat: Vec<Complex64> = Vec::with_capacity(d);
    for k in 0..d {
        let mut found = None;
        for _ in 0..ELEMENT_RETRIES {
            let z = uniform_phase(rng, min_modulus, 1.0);
            let phase_ok = a_hat[k.saturating_sub(w - 1)..]
                .iter()
                .all(|p: &Complex64| wrap_phase(p.arg() - z.arg()).abs() >= gap);
            let modulus_ok = a_hat[k.saturating_sub(reach - 1)..]
                .iter()
                .all(|p: &Complex64| (p.norm() - z.norm()).abs() >= MODULUS_SPACING);
            if phase_ok && modulus_ok {
                found = Some(z);
                break;
            }
        }
        match found {
            Some(z) => a_hat.push(z),
            None => return Ok(None),
        }
    }
    let supports = staggered_supports(d, w);
    for s in &supports {
        let part: Vec<Complex64> = s.iter().map(|&k| a_hat[k]).collect();
        if !spectrum_is_separated(&part, margin, margin / 4.0) {
            return Ok(None);
        }
    }
    let x_hat: Vec<Complex64> = (0..d).map(|_| uniform_phase(rng, 0.5, 1.0)).collect();
    let psi: Vec<Vec<Complex64>> = supports
        .iter()
        .map(|s| {
            let mut v = vec![Complex64::new(0.0, 0.0); d];
            for &k in s {
                v[k] = uniform_phase(rng, 0.5, 1.0);
            }
            v
        })
        .collect();
    // with w = 2 no pair of vectors shares two indices, so no winding check
    if w >= 3 && supports.len() >= 2 && winding_sine(&psi, 0, 1, 1, 2) < 0.1 {
        return Ok(None);
    }
    let system = CirculantSystem::from_spectrum(a_hat)?;
    let x = idft(&x_hat)?;
    let phis = psi.iter().map(|p| idft(p)).collect::<Result<Vec<_>>>()?;
    Ok(Some((SystemModel::Circulant(system), x, phis, Some(supports))))
}

/// The six-dimensional real low-pass instance with kernel spectrum
/// `cos(2k/5)`, `k = -3..=2`, and fixed signal and sampling vectors.
pub fn pinned_lowpass_real_instance() -> Instance {
    let x = [
        -0.806494570188,
        0.697047937358,
        0.475340169748,
        -0.868496176947,
        -0.373776219367,
        0.573125494692,
    ];
    let phi1 = [
        0.299100737288,
        -0.067652854127,
        0.223548074051,
        -0.419039372471,
        0.398336559020,
        0.439827094742,
    ];
    let phi2 = [
        -0.222947251005,
        0.185111331800,
        0.508076580285,
        -0.024006689074,
        0.491191477978,
        -0.360304943116,
    ];
    let d = 6;
    let a_hat: Vec<Complex64> = (0..d)
        .map(|k| {
            let signed = if k <= 2 { k as f64 } else { k as f64 - d as f64 };
            Complex64::new((2.0 * signed / 5.0).cos(), 0.0)
        })
        .collect();
    let real = |v: &[f64]| ComplexVector::from_real(v).expect("finite constants");
    Instance {
        kind: InstanceKind::LowpassReal,
        d,
        seed: 0,
        rejections: 0,
        system: SystemModel::Circulant(CirculantSystem::from_spectrum(a_hat).expect("nonempty")),
        x: real(&x),
        sampling: vec![real(&phi1), real(&phi2)],
        supports: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::max_abs_diff;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn rel_close(a: &[f64], b: &[f64], rtol: f64) -> bool {
        let scale = a.iter().chain(b).map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
        a.iter().zip(b).all(|(u, v)| (u - v).abs() <= rtol * scale)
    }

    #[test]
    fn single_mode_is_geometric() {
        let s = CMatrix::identity(2, 2);
        let sys = DiagonalizableSystem::new(s, vec![c(2.0, 0.0), c(0.5, 0.0)]).unwrap();
        let e0 = [c(1.0, 0.0), c(0.0, 0.0)];
        let h = measure(&sys, &e0, &e0, 5).unwrap();
        for (l, v) in h.iter().enumerate() {
            assert!((v - 4f64.powi(l as i32)).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_modes_give_zero() {
        let sys = DiagonalizableSystem::new(CMatrix::identity(3, 3), vec![c(1.0, 0.5), c(0.3, 0.0), c(-0.7, 0.2)]).unwrap();
        let x = [c(0.0, 0.0), c(1.0, 2.0), c(0.0, 0.0)];
        let phi = [c(1.0, 0.0), c(0.0, 0.0), c(3.0, 1.0)];
        assert!(measure(&sys, &x, &phi, 6).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn diagonal_path_matches_matrix_powers() {
        for seed in 0..20 {
            for d in 1..=8 {
                let inst = random_instance(InstanceKind::GenericCollisionFree, d, seed, &GeneratorOptions::default()).unwrap();
                let sys = inst.system.diagonalizable();
                let fast = measure(&sys, &inst.x, &inst.sampling[0], 12).unwrap();
                let slow = measure_direct(&sys.matrix(), &inst.x, &inst.sampling[0], 12).unwrap();
                assert!(rel_close(&fast, &slow, 1e-9), "d = {d}, seed = {seed}");
                assert!(fast.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn measure_rejects_dimension_mismatch() {
        let sys = DiagonalizableSystem::new(CMatrix::identity(2, 2), vec![c(1.0, 0.0), c(0.5, 0.0)]).unwrap();
        assert!(matches!(
            measure(&sys, &[c(1.0, 0.0)], &[c(1.0, 0.0), c(0.0, 0.0)], 3),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn circulant_diagonalization_matches_explicit_matrix() {
        let a = vec![c(0.5, 0.1), c(-0.2, 0.3), c(0.7, 0.0), c(0.1, -0.4), c(0.05, 0.2)];
        let circ = CirculantSystem::from_kernel(a).unwrap();
        let direct = circ.circulant_matrix();
        let diag = circ.to_diagonalizable().matrix();
        assert!((direct - diag).iter().all(|z| z.norm() < 1e-12));
        let x = vec![c(1.0, 0.0), c(0.0, 2.0), c(-1.0, 0.5), c(0.3, 0.3), c(0.0, -1.0)];
        let conv = circ.apply(&x).unwrap();
        let mv = mat_vec(&circ.circulant_matrix(), &x);
        assert!(max_abs_diff(&conv, &mv) < 1e-12);
    }

    #[test]
    fn circulant_measurement_matches_convolution_powers() {
        let inst = random_instance(InstanceKind::LowpassComplex, 7, 3, &GeneratorOptions::default()).unwrap();
        let SystemModel::Circulant(circ) = &inst.system else { panic!() };
        let fast = inst.measure(10).unwrap().samples;
        for (phi, h) in inst.sampling.iter().zip(&fast) {
            let mut v = phi.to_vec();
            let mut slow = Vec::new();
            for _ in 0..10 {
                let ip: Complex64 = inst.x.iter().zip(&v).map(|(a, b)| a.conj() * b).sum();
                slow.push(ip.norm_sqr());
                v = circ.apply(&v).unwrap();
            }
            assert!(rel_close(h, &slow, 1e-9));
        }
    }

    #[test]
    fn circulant_transforms_are_scaled_dfts() {
        let circ = CirculantSystem::from_kernel(vec![c(1.0, 0.0), c(0.5, 0.5), c(0.0, 0.2), c(0.1, 0.0)]).unwrap();
        let sys = circ.to_diagonalizable();
        let x = vec![c(0.3, 0.1), c(-1.0, 0.0), c(0.0, 0.7), c(0.4, -0.2)];
        let y = sys.transformed_signal(&x).unwrap();
        let xh: Vec<Complex64> = dft(&x).unwrap().iter().map(|z| z / 4.0).collect();
        assert!(max_abs_diff(&y, &xh) < 1e-14);
        let psi = sys.transformed_sampler(&x).unwrap();
        assert!(max_abs_diff(&psi, &dft(&x).unwrap()) < 1e-14);
        let back = sys.signal_from_transformed(&y).unwrap();
        assert!(max_abs_diff(&back, &x) < 1e-14);
    }

    #[test]
    fn collision_examples() {
        assert!(!is_collision_free(&[c(1.0, 0.0), c(2.0, 0.0)], 1e-8));
        let l = [c(1.0, 0.0), Complex64::from_polar(2.0, PI / 4.0)];
        assert!(is_collision_free(&l, 1e-8));
        assert!(is_absolutely_collision_free(&l, 1e-8));
        let unit: Vec<Complex64> = [0.3, 1.1, 2.0].iter().map(|&t| Complex64::from_polar(1.0, t)).collect();
        assert!(!is_absolutely_collision_free(&unit, 1e-8));
    }

    #[test]
    fn collision_check_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let l: Vec<Complex64> = (0..5).map(|_| uniform_phase(&mut rng, 0.5, 1.0)).collect();
            let (_, b) = product_terms(&[c(1.0, 0.0); 5], &l);
            let mut brute = f64::INFINITY;
            for i in 0..b.len() {
                for j in i + 1..b.len() {
                    brute = brute.min((b[i] - b[j]).norm());
                }
            }
            assert_eq!(product_separation(&l), brute);
        }
    }

    #[test]
    fn lowpass_predicates() {
        let ex = pinned_lowpass_real_instance();
        let a_hat = ex.system.spectrum();
        assert!(is_lowpass_kernel(a_hat, 1e-12));
        assert!(is_frequency_collision_free(a_hat, 1e-12));
        let four = [c(4.0, 0.0), c(2.0, 0.0), c(1.0, 0.0), c(2.0, 0.0)];
        assert!(is_lowpass_kernel(&four, 1e-12));
        assert!(!is_frequency_collision_free(&four, 1e-12));
        assert!(!is_lowpass_kernel(&[c(1.0, 0.0), c(-0.5, 0.0), c(-0.5, 0.0)], 1e-12));
        // the literal cos(2k) values are neither positive nor decreasing
        let literal: Vec<Complex64> = [0.0, 1.0, 2.0, 3.0, -2.0, -1.0]
            .iter()
            .map(|&k: &f64| c((2.0 * k).cos(), 0.0))
            .collect();
        assert!(!is_lowpass_kernel(&literal, 1e-12));
    }

    #[test]
    fn noise_is_bounded_and_reproducible() {
        let h = vec![1.0; 1000];
        assert_eq!(add_noise(&h, 0.0, &mut stream_rng(1, 0)), h);
        let a = add_noise(&h, 1e-3, &mut stream_rng(1, 0));
        let b = add_noise(&h, 1e-3, &mut stream_rng(1, 0));
        assert_eq!(a, b);
        let mut rng = stream_rng(2, 0);
        let z = vec![c(0.0, 0.0); 1_000_000];
        let n = add_complex_noise(&z, 1e-6, &mut rng);
        assert!(n.iter().all(|e| e.norm() <= 1e-6));
        assert!(a.iter().all(|v| (v - 1.0).abs() <= 1e-3));
    }

    #[test]
    fn generators_satisfy_their_predicates() {
        let opts = GeneratorOptions::default();
        for seed in 0..10 {
            let g = random_instance(InstanceKind::GenericCollisionFree, 4, seed, &opts).unwrap();
            assert!(is_absolutely_collision_free(g.system.spectrum(), 1e-8));
            for kind in [InstanceKind::LowpassReal, InstanceKind::LowpassComplex] {
                for d in 2..=6 {
                    let inst = random_instance(kind, d, seed, &opts).unwrap();
                    let a_hat = inst.system.spectrum();
                    assert!(is_lowpass_kernel(a_hat, 1e-12), "{kind} d = {d}");
                    assert!(is_frequency_collision_free(a_hat, 1e-8));
                    if kind == InstanceKind::LowpassReal {
                        assert!(inst.x.iter().all(|z| z.im == 0.0));
                        assert!(inst.system.diagonalizable().lambda().iter().all(|z| z.im.abs() < 1e-15));
                    }
                }
            }
        }
    }

    #[test]
    fn multi_vector_example_shape() {
        let inst = random_instance(InstanceKind::MultiVector, 50, 7, &GeneratorOptions::default()).unwrap();
        assert_eq!(inst.sampling.len(), 47);
        let supports = inst.supports.as_ref().unwrap();
        let sys = inst.system.diagonalizable();
        for (i, phi) in inst.sampling.iter().enumerate() {
            assert_eq!(supports[i], (i..i + 4).collect::<Vec<_>>());
            let psi = sys.transformed_sampler(phi).unwrap();
            for (k, p) in psi.iter().enumerate() {
                assert_eq!(p.norm() > 1e-12, supports[i].contains(&k));
            }
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let opts = GeneratorOptions::default();
        for kind in [
            InstanceKind::GenericCollisionFree,
            InstanceKind::LowpassReal,
            InstanceKind::LowpassComplex,
            InstanceKind::MultiVector,
        ] {
            let a = random_instance(kind, 6, 42, &opts).unwrap();
            let b = random_instance(kind, 6, 42, &opts).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn generation_budget_exhaustion() {
        let opts = GeneratorOptions {
            budget: 0,
            ..Default::default()
        };
        assert!(matches!(
            random_instance(InstanceKind::LowpassReal, 4, 1, &opts),
            Err(Error::Generation { attempts: 0, .. })
        ));
    }

    #[test]
    fn instance_json_round_trip() {
        let opts = GeneratorOptions::default();
        for kind in [InstanceKind::GenericCollisionFree, InstanceKind::MultiVector] {
            let inst = random_instance(kind, 5, 3, &opts).unwrap();
            let json = serde_json::to_string(&inst).unwrap();
            let back: Instance = serde_json::from_str(&json).unwrap();
            assert_eq!(back.seed, inst.seed);
            assert_eq!(back.sampling, inst.sampling);
            let a = inst.measure(8).unwrap().samples;
            let b = back.measure(8).unwrap().samples;
            for (u, v) in a.iter().zip(&b) {
                assert!(rel_close(u, v, 1e-12));
            }
        }
    }
}
