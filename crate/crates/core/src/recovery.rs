//! Reconstruction pipelines.
//!
//! * [`recover_signal_known_system`]: known spectrum and basis, one sampling
//!   vector, signal up to global phase.
//! * [`recover_spectrum_known_signal`]: known signal and basis, spectrum up
//!   to global phase.
//! * [`recover_unordered_spectrum`]: nothing known but the dimension, the
//!   spectrum as an unordered set up to global phase and winding.
//! * [`recover_lowpass_real`] / [`recover_lowpass_complex`]: convolution
//!   with a low-pass kernel, kernel and signal together.
//! * [`recover_multi_vector`]: many sampling vectors with small eigenbasis
//!   supports, spectrum and signal together.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebra::{dft, COINCIDENCE_RTOL, fourier_matrix, idft, singular_values, CMatrix, ComplexVector};
use crate::dynamics::{is_collision_free, product_terms, symmetric_spectrum, DiagonalizableSystem};
use crate::matching::hungarian;
use crate::polish::{pack, polish, unpack, PolishReport};
use crate::prony::{
    approximate_prony, build_hankel, fit_coefficients, kernel_vector, polynomial_roots, refine_bases, ExponentialSum, PronyResult,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryOptions {
    /// Smallest tolerated assignment distance, relative to the largest
    /// target; above it, distances up to half the target separation pass.
    pub pairing_rtol: f64,
    /// Bases with `|Im| <= real_rtol * max(1, |beta|)` count as real.
    pub real_rtol: f64,
    /// Relative tolerance when removing products during peeling.
    pub peel_rtol: f64,
    /// Relative tolerance for comparing moduli across sampling vectors.
    pub magnitude_rtol: f64,
    /// Per-frequency systems with a larger condition number are rejected.
    pub max_condition: f64,
    /// With a known signal, refuse kernels whose singular value gap is
    /// below two. The other pipelines only record the gap.
    pub require_kernel_gap: bool,
    /// Gauss-Newton iterations refining the joint estimates of the low-pass
    /// and multi-vector pipelines against the samples; zero disables.
    pub polish_iterations: usize,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        Self {
            pairing_rtol: 1e-4,
            real_rtol: 1e-6,
            peel_rtol: 1e-2,
            magnitude_rtol: 2e-3,
            max_condition: 1e8,
            require_kernel_gap: true,
            polish_iterations: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Winding {
    AsRecovered,
    Conjugated,
    Undetermined,
}

/// Recovered bases and coefficients with the map from index pairs `(j, k)`
/// to the entry estimating `lambda_j conj(lambda_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductTable {
    pub bases: ComplexVector,
    pub coeffs: ComplexVector,
    #[serde(with = "pair_map")]
    pub tau: BTreeMap<(usize, usize), usize>,
    pub winding: Winding,
}

mod pair_map {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<(usize, usize), usize>, s: S) -> Result<S::Ok, S::Error> {
        m.iter()
            .map(|(&(j, k), &i)| [j, k, i])
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<(usize, usize), usize>, D::Error> {
        let v = Vec::<[usize; 3]>::deserialize(d)?;
        Ok(v.into_iter().map(|[j, k, i]| ((j, k), i)).collect())
    }
}

impl ProductTable {
    pub fn coeff(&self, j: usize, k: usize) -> Option<Complex64> {
        self.tau.get(&(j, k)).map(|&i| self.coeffs[i])
    }

    pub fn base(&self, j: usize, k: usize) -> Option<Complex64> {
        self.tau.get(&(j, k)).map(|&i| self.bases[i])
    }

    /// Swaps every `(j, k)` with `(k, j)`, which is what conjugating the
    /// spectrum and the coefficients does to the labels.
    pub fn conjugated(&self) -> Self {
        Self {
            bases: self.bases.clone(),
            coeffs: self.coeffs.clone(),
            tau: self.tau.iter().map(|(&(j, k), &i)| ((k, j), i)).collect(),
            winding: match self.winding {
                Winding::AsRecovered => Winding::Conjugated,
                Winding::Conjugated => Winding::AsRecovered,
                Winding::Undetermined => Winding::Undetermined,
            },
        }
    }
}

/// Conventions fixed by a reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gauge {
    /// What was made real positive.
    pub convention: String,
    /// Index of the gauged element, if any.
    pub anchor: Option<usize>,
    pub winding: Winding,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub sigma_min: Vec<f64>,
    pub kernel_gap: Vec<f64>,
    pub residual: Vec<f64>,
    pub max_matching_distance: f64,
    pub condition: Option<f64>,
    pub notes: Vec<String>,
}

impl Diagnostics {
    fn record_prony(&mut self, p: &PronyResult) {
        self.sigma_min.push(p.sigma_min);
        self.kernel_gap.push(p.kernel_gap);
        self.residual.push(p.residual);
    }

    fn matched(&mut self, dist: f64) {
        self.max_matching_distance = self.max_matching_distance.max(dist);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryResult {
    pub spectrum: Option<ComplexVector>,
    pub signal: Option<ComplexVector>,
    pub table: Option<ProductTable>,
    pub gauge: Gauge,
    pub diagnostics: Diagnostics,
}

fn to_complex(h: &[f64]) -> Vec<Complex64> {
    h.iter().map(|&v| Complex64::new(v, 0.0)).collect()
}

fn max_norm(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn run_prony(h: &[f64], k: usize, require_gap: bool, diag: &mut Diagnostics) -> Result<PronyResult> {
    let p = approximate_prony(&to_complex(h), k)?;
    diag.record_prony(&p);
    if require_gap && p.unreliable_kernel {
        return Err(Error::UnreliableKernel { gap: p.kernel_gap });
    }
    Ok(p)
}

/// Replaces the Prony estimate by its variable-projection refinement when
/// that lowers the sample residual. Clustered bases leave the roots of the
/// kernel polynomial far less accurate than the samples allow.
fn refine_prony(h: &[f64], p: &mut PronyResult, iters: usize, diag: &mut Diagnostics) {
    let hc = to_complex(h);
    let Some((beta, _)) = refine_bases(&hc, &p.sum.beta, iters) else {
        return;
    };
    let Ok((eta, residual)) = fit_coefficients(&beta, &hc) else {
        return;
    };
    if residual < p.residual {
        if let Ok(sum) = ExponentialSum::new(eta, beta) {
            diag.notes.push(format!("bases refined: residual {:.3e} -> {residual:.3e}", p.residual));
            p.sum = sum;
            p.residual = residual;
        }
    }
}

/// Real parts of the Prony roots alone. The coefficient fit is skipped: for
/// real positive bases it often meets spurious coinciding roots.
fn prony_real_bases(h: &[f64], k: usize, diag: &mut Diagnostics) -> Result<Vec<f64>> {
    let kv = kernel_vector(&build_hankel(&to_complex(h), k)?)?;
    diag.sigma_min.push(kv.sigma_min);
    diag.kernel_gap.push(if kv.sigma_min > 0.0 {
        kv.singular_values[k - 1] / kv.sigma_min
    } else {
        f64::INFINITY
    });
    Ok(polynomial_roots(&kv.gamma)?.iter().map(|b| b.re).collect())
}

/// Optimal assignment of `found` to `targets` (equal lengths); `perm[t]` is
/// the index into `found`. The assignment is only trusted while every
/// matched distance stays below half the smallest target separation (or
/// `floor`, whichever is larger).
fn assign_capped(targets: &[Complex64], found: &[Complex64], floor: f64) -> Result<(Vec<usize>, f64)> {
    if targets.len() != found.len() {
        return Err(Error::LengthMismatch {
            expected: targets.len(),
            found: found.len(),
        });
    }
    let cap = if targets.len() > 1 {
        floor.max(0.5 * crate::dynamics::min_pairwise_distance(targets))
    } else {
        f64::INFINITY
    };
    let cost: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| found.iter().map(|f| (t - f).norm()).collect())
        .collect();
    let perm = hungarian(&cost);
    let worst = perm
        .iter()
        .enumerate()
        .map(|(t, &f)| cost[t][f])
        .fold(0.0, f64::max);
    if worst > cap {
        return Err(Error::PairingFailure {
            distance: worst,
            tolerance: cap,
        });
    }
    Ok((perm, worst))
}

/// `y` from a table of products `c_j conj(c_k)` with `c_j = conj(y_j) psi_j`.
/// Moduli come from the diagonal; phases from the row of the coefficient
/// largest in modulus, which is made real positive.
pub fn factor_rank_one_products(table: &ProductTable, psi: &[Complex64]) -> Result<Vec<Complex64>> {
    let c = factor_coefficients(table, psi.len())?;
    let scale = max_norm(psi);
    c.iter()
        .zip(psi)
        .enumerate()
        .map(|(j, (c, p))| {
            if p.norm() <= 1e-12 * scale || p.norm() == 0.0 {
                return Err(Error::BlockedEigenspace {
                    index: j,
                    magnitude: p.norm(),
                });
            }
            Ok((c / p).conj())
        })
        .collect()
}

/// `c` up to global phase from the products `c_j conj(c_k)`.
pub fn factor_coefficients(table: &ProductTable, d: usize) -> Result<Vec<Complex64>> {
    if d == 0 {
        return Err(Error::EmptyInput);
    }
    let mut diag = Vec::with_capacity(d);
    for j in 0..d {
        diag.push(
            table
                .coeff(j, j)
                .ok_or_else(|| Error::InconsistentTable(format!("missing diagonal entry {j}")))?,
        );
    }
    let scale = diag.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let tol = 1e-6 * scale;
    let mut modulus = Vec::with_capacity(d);
    for (j, z) in diag.iter().enumerate() {
        if z.re < -tol {
            return Err(Error::InconsistentTable(format!(
                "diagonal entry {j} is negative ({:.3e})",
                z.re
            )));
        }
        modulus.push(z.re.max(0.0).sqrt());
    }
    let anchor = (0..d)
        .max_by(|&a, &b| modulus[a].total_cmp(&modulus[b]))
        .expect("nonempty");
    (0..d)
        .map(|j| {
            if j == anchor {
                return Ok(Complex64::new(modulus[j], 0.0));
            }
            let off = table
                .coeff(j, anchor)
                .ok_or_else(|| Error::InconsistentTable(format!("missing entry ({j}, {anchor})")))?;
            Ok(Complex64::from_polar(modulus[j], off.arg()))
        })
        .collect()
}

/// Signal from one sampling vector when spectrum and eigenbasis are known.
pub fn recover_signal_known_system(
    system: &DiagonalizableSystem,
    phi: &[Complex64],
    samples: &[f64],
) -> Result<RecoveryResult> {
    let d = system.dim();
    let lambda = system.lambda();
    let tol = crate::dynamics::default_collision_tol(lambda);
    if d > 1 && !is_collision_free(lambda, tol) {
        return Err(Error::Hypothesis("eigenvalues are not collision-free".into()));
    }
    let psi = system.transformed_sampler(phi)?;
    let scale = max_norm(&psi);
    if let Some(k) = psi.iter().position(|p| p.norm() <= 1e-12 * scale || p.norm() == 0.0) {
        return Err(Error::BlockedEigenspace {
            index: k,
            magnitude: psi[k].norm(),
        });
    }
    if samples.len() < d * d {
        return Err(Error::InsufficientSamples {
            needed: d * d,
            got: samples.len(),
        });
    }
    let (_, bases) = product_terms(&vec![Complex64::new(1.0, 0.0); d], lambda);
    let (coeffs, residual) = fit_coefficients(&bases, &to_complex(samples))?;
    let table = ProductTable {
        bases: ComplexVector::new(bases)?,
        coeffs: ComplexVector::new(coeffs)?,
        tau: (0..d).flat_map(|j| (0..d).map(move |k| ((j, k), j * d + k))).collect(),
        winding: Winding::AsRecovered,
    };
    let y = factor_rank_one_products(&table, &psi)?;
    let x = system.signal_from_transformed(&y)?;
    Ok(RecoveryResult {
        spectrum: None,
        signal: Some(ComplexVector::new(x)?),
        gauge: Gauge {
            convention: "coefficient largest in modulus real positive".into(),
            anchor: None,
            winding: Winding::AsRecovered,
        },
        table: Some(table),
        diagnostics: Diagnostics {
            residual: vec![residual],
            ..Default::default()
        },
    })
}

fn basis_inverse(s: &CMatrix) -> Result<CMatrix> {
    let sv = singular_values(s);
    let cond = sv.first().copied().unwrap_or(0.0) / sv.last().copied().unwrap_or(0.0);
    if !cond.is_finite() || cond > 1e12 {
        return Err(Error::IllConditioned { condition: cond });
    }
    s.clone().try_inverse().ok_or(Error::IllConditioned { condition: cond })
}

fn mat_vec(m: &CMatrix, v: &[Complex64]) -> Vec<Complex64> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)] * v[j]).sum())
        .collect()
}

/// Spectrum from one sampling vector when the signal and eigenbasis are
/// known.
pub fn recover_spectrum_known_signal(
    basis: &CMatrix,
    x: &[Complex64],
    phi: &[Complex64],
    samples: &[f64],
    opts: &RecoveryOptions,
) -> Result<RecoveryResult> {
    let d = x.len();
    if d == 0 {
        return Err(Error::EmptyInput);
    }
    if basis.shape() != (d, d) || phi.len() != d {
        return Err(Error::LengthMismatch {
            expected: d,
            found: phi.len(),
        });
    }
    let y = mat_vec(&basis.adjoint(), x);
    let psi = mat_vec(&basis_inverse(basis)?, phi);
    let c: Vec<Complex64> = y.iter().zip(&psi).map(|(y, p)| y.conj() * p).collect();
    let cmax = max_norm(&c);
    if let Some(k) = c.iter().position(|v| v.norm() <= 1e-12 * cmax || v.norm() == 0.0) {
        return Err(Error::BlockedEigenspace {
            index: k,
            magnitude: c[k].norm(),
        });
    }
    let (products, _) = product_terms(&c, &vec![Complex64::new(1.0, 0.0); d]);
    if d > 1 && !is_collision_free(&c, 1e-8 * cmax * cmax) {
        return Err(Error::Hypothesis("coefficients are not collision-free".into()));
    }
    let k_terms = d * d;
    if samples.len() <= 2 * k_terms {
        return Err(Error::InsufficientSamples {
            needed: 2 * k_terms + 1,
            got: samples.len(),
        });
    }
    let mut diag = Diagnostics::default();
    let p = run_prony(samples, k_terms, opts.require_kernel_gap, &mut diag)?;
    let (perm, dist) = assign_capped(&products, &p.sum.eta, opts.pairing_rtol * cmax * cmax)?;
    diag.matched(dist);
    let base = |j: usize, k: usize| p.sum.beta[perm[j * d + k]];
    let magnitude: Vec<f64> = (0..d).map(|j| base(j, j).re.max(0.0).sqrt()).collect();
    let anchor = (0..d)
        .max_by(|&a, &b| magnitude[a].total_cmp(&magnitude[b]))
        .expect("nonempty");
    let lambda: Vec<Complex64> = (0..d)
        .map(|j| {
            if j == anchor {
                Complex64::new(magnitude[j], 0.0)
            } else {
                Complex64::from_polar(magnitude[j], base(j, anchor).arg())
            }
        })
        .collect();
    let table = ProductTable {
        bases: p.sum.beta.clone(),
        coeffs: p.sum.eta.clone(),
        tau: (0..d)
            .flat_map(|j| (0..d).map(move |k| (j, k)))
            .map(|(j, k)| ((j, k), perm[j * d + k]))
            .collect(),
        winding: Winding::AsRecovered,
    };
    Ok(RecoveryResult {
        spectrum: Some(ComplexVector::new(lambda)?),
        signal: None,
        table: Some(table),
        gauge: Gauge {
            convention: "eigenvalue largest in modulus real positive".into(),
            anchor: Some(anchor),
            winding: Winding::AsRecovered,
        },
        diagnostics: diag,
    })
}

/// Unordered spectrum `mu` (descending modulus) and its product table in
/// the local labels of `mu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnorderedSpectrum {
    pub mu: ComplexVector,
    pub table: ProductTable,
    pub diagnostics: Diagnostics,
}

/// Spectrum up to global phase and winding from the samples of one sampling
/// vector with `d` unblocked eigenvalues.
pub fn recover_unordered_spectrum(samples: &[f64], d: usize, opts: &RecoveryOptions) -> Result<UnorderedSpectrum> {
    if d == 0 {
        return Err(Error::EmptyInput);
    }
    let k_terms = d * d;
    if samples.len() <= 2 * k_terms {
        return Err(Error::InsufficientSamples {
            needed: 2 * k_terms + 1,
            got: samples.len(),
        });
    }
    let mut diag = Diagnostics::default();
    let mut p = run_prony(samples, k_terms, false, &mut diag)?;
    if opts.polish_iterations > 0 {
        refine_prony(samples, &mut p, opts.polish_iterations, &mut diag);
    }
    let beta = &p.sum.beta;
    let scale = max_norm(beta);

    let realness = |b: &Complex64| b.im.abs() / b.norm().max(1.0);
    let mut real_idx: Vec<usize> = (0..k_terms).filter(|&i| realness(&beta[i]) <= opts.real_rtol).collect();
    if real_idx.len() != d {
        // clustered squared moduli can split into a nearly real conjugate
        // pair; accept the d most nearly real bases if the rest stay clear
        let mut order: Vec<usize> = (0..k_terms).collect();
        order.sort_by(|&a, &b| realness(&beta[a]).total_cmp(&realness(&beta[b])));
        let last = realness(&beta[order[d - 1]]);
        let next = order.get(d).map_or(f64::INFINITY, |&i| realness(&beta[i]));
        if last > SPLIT_REAL_RATIO * next {
            return Err(Error::Hypothesis(format!(
                "found {} real bases where {d} squared moduli were expected; the spectrum is not absolutely collision-free",
                real_idx.len()
            )));
        }
        real_idx = order[..d].to_vec();
        diag.notes.push(format!("nearly real bases taken as squared moduli (imaginary ratio up to {last:.2e})"));
    }
    let real_mask: Vec<bool> = (0..k_terms).map(|i| real_idx.contains(&i)).collect();
    let is_real = |i: usize| real_mask[i];
    real_idx.sort_by(|&a, &b| beta[b].re.total_cmp(&beta[a].re));
    let m: Vec<f64> = real_idx.iter().map(|&i| beta[i].re.max(0.0).sqrt()).collect();

    let upper: Vec<usize> = (0..k_terms).filter(|&i| !is_real(i) && beta[i].im > 0.0).collect();
    let lower: Vec<usize> = (0..k_terms).filter(|&i| !is_real(i) && beta[i].im < 0.0).collect();
    let pairs = d * (d - 1) / 2;
    if upper.len() != pairs || lower.len() != pairs {
        return Err(Error::Hypothesis("complex bases do not form conjugate pairs".into()));
    }
    let up_vals: Vec<Complex64> = upper.iter().map(|&i| beta[i]).collect();
    let low_conj: Vec<Complex64> = lower.iter().map(|&i| beta[i].conj()).collect();
    let (conj_perm, dist) = assign_capped(&up_vals, &low_conj, opts.pairing_rtol * scale)?;
    diag.matched(dist);

    // assign each conjugate pair to (j, k), j < k, by modulus
    let slots: Vec<(usize, usize)> = (0..d).flat_map(|j| (j + 1..d).map(move |k| (j, k))).collect();
    let slot_mod = |m: &[f64]| -> Vec<Complex64> { slots.iter().map(|&(j, k)| Complex64::new(m[j] * m[k], 0.0)).collect() };
    let pair_mod: Vec<Complex64> = up_vals.iter().map(|b| Complex64::new(b.norm(), 0.0)).collect();
    let mut candidates = Vec::new();
    if d >= 3 {
        // the squared moduli are the worst conditioned bases when they
        // cluster; the pair moduli fix all of them up to a few discrete
        // alternatives
        let values: Vec<f64> = pair_mod.iter().map(|z| z.re).collect();
        for peeled in moduli_from_pair_peeling(&values, &m, opts.magnitude_rtol) {
            let first = hungarian_distances(&slot_mod(&peeled), &pair_mod);
            candidates.push(moduli_from_pairs(&slots, &first, &pair_mod, d).unwrap_or(peeled));
        }
    }
    candidates.push(m);

    let hc = to_complex(samples);
    let norm = samples.iter().map(|v| v * v).sum::<f64>().sqrt();
    let accept = 10.0 * p.residual + STRUCTURED_REFIT_RTOL * norm;
    let assemble = |m: &[f64]| -> Result<(Vec<Complex64>, ProductTable, f64, f64)> {
        let (slot_perm, dist) = assign_capped(&slot_mod(m), &pair_mod, opts.pairing_rtol * scale)?;
        // slot s -> (upper index, lower index)
        let pair_of: BTreeMap<(usize, usize), (usize, usize)> = slots
            .iter()
            .enumerate()
            .map(|(s, &jk)| {
                let u = slot_perm[s];
                (jk, (upper[u], lower[conj_perm[u]]))
            })
            .collect();
        let mu = place_phases(m, &pair_of, beta)?;
        let mut tau = BTreeMap::new();
        for (j, &i) in real_idx.iter().enumerate() {
            tau.insert((j, j), i);
        }
        for (&(j, k), &(u, l)) in &pair_of {
            let target = mu[j] * mu[k].conj();
            let (jk, kj) = if (beta[u] - target).norm() <= (beta[l] - target).norm() {
                (u, l)
            } else {
                (l, u)
            };
            tau.insert((j, k), jk);
            tau.insert((k, j), kj);
        }
        // structured bases mu_j conj(mu_k) with refitted coefficients; the
        // free Prony table is kept when the structured fit is clearly worse
        let mut bases = beta.to_vec();
        for (&(j, k), &i) in &tau {
            bases[i] = mu[j] * mu[k].conj();
        }
        let table = match fit_coefficients(&bases, &hc) {
            Ok((coeffs, residual)) if residual <= accept => {
                return Ok((
                    mu,
                    ProductTable {
                        bases: ComplexVector::new(bases)?,
                        coeffs: ComplexVector::new(coeffs)?,
                        tau,
                        winding: Winding::Undetermined,
                    },
                    residual,
                    dist,
                ))
            }
            _ => ProductTable {
                bases: p.sum.beta.clone(),
                coeffs: p.sum.eta.clone(),
                tau,
                winding: Winding::Undetermined,
            },
        };
        Ok((mu, table, f64::INFINITY, dist))
    };

    let mut best: Option<(Vec<Complex64>, ProductTable, f64, f64)> = None;
    let mut first_err = None;
    for m in &candidates {
        match assemble(m) {
            Ok(a) => {
                if best.as_ref().is_none_or(|b| a.2 < b.2) {
                    best = Some(a);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let Some((mu, table, residual, dist)) = best else {
        return Err(first_err.expect("at least one candidate"));
    };
    diag.matched(dist);
    if residual.is_infinite() {
        diag.notes.push("structured refit rejected; free Prony table kept".into());
    }
    Ok(UnorderedSpectrum {
        mu: ComplexVector::new(mu)?,
        table,
        diagnostics: diag,
    })
}

/// Relative sample residual up to which a structured refit is preferred
/// to the free Prony fit.
const STRUCTURED_REFIT_RTOL: f64 = 1e-4;

/// Moduli `m_0 > ... > m_{d-1}` from the `d(d-1)/2` products `m_j m_k`,
/// `j < k`. The two largest products are `m_0 m_1` and `m_0 m_2`; each choice
/// of `m_1 m_2` among the others fixes `m_0`, after which the largest
/// product left is always `m_0 m_t`. Several choices can reproduce all
/// products (for four moduli, `m_1 m_2` and `m_0 m_3` are interchangeable).
/// Returns every choice within `rtol`, those whose squares lie closest to
/// the estimates `approx` first.
fn moduli_from_pair_peeling(products: &[f64], approx: &[f64], rtol: f64) -> Vec<Vec<f64>> {
    let d = approx.len();
    if d < 3 || products.len() != d * (d - 1) / 2 || products.iter().any(|&p| !(p > 0.0)) {
        return Vec::new();
    }
    let mut sorted = products.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut found: Vec<(f64, Vec<f64>)> = Vec::new();
    for c in 2..sorted.len() {
        let m0 = (sorted[0] * sorted[1] / sorted[c]).sqrt();
        let mut m = vec![m0, sorted[0] / m0, sorted[1] / m0];
        let mut rest: Vec<f64> = sorted.iter().enumerate().filter(|&(i, _)| i > 1 && i != c).map(|(_, &v)| v).collect();
        let mut worst = 0.0f64;
        for _ in 3..d {
            let top = rest.remove(0);
            let mt = top / m0;
            for &mj in &m[1..] {
                let target = mj * mt;
                let Some((pos, err)) = rest
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (i, (v - target).abs() / target))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                else {
                    worst = f64::INFINITY;
                    break;
                };
                worst = worst.max(err);
                rest.remove(pos);
            }
            m.push(mt);
        }
        if worst > rtol || m.windows(2).any(|w| w[0] <= w[1]) {
            continue;
        }
        let miss = m.iter().zip(approx).map(|(a, b)| (a * a - b * b).abs()).fold(0.0, f64::max);
        found.push((miss, m));
    }
    found.sort_by(|a, b| a.0.total_cmp(&b.0));
    found.into_iter().map(|f| f.1).collect()
}

/// Unit-free phases of `mu` from the moduli and the pair assignment: `mu_0`
/// real positive, `mu_0 conj(mu_1)` in the upper half plane, and every
/// further `mu_k` at the intersection of the candidates from `mu_0` and
/// `mu_1`.
fn place_phases(m: &[f64], pair_of: &BTreeMap<(usize, usize), (usize, usize)>, beta: &[Complex64]) -> Result<Vec<Complex64>> {
    let d = m.len();
    let mut mu = vec![Complex64::new(0.0, 0.0); d];
    mu[0] = Complex64::new(m[0], 0.0);
    if d > 1 {
        let (u01, _) = pair_of[&(0, 1)];
        mu[1] = Complex64::from_polar(m[1], -beta[u01].arg());
    }
    for k in 2..d {
        let (u0, _) = pair_of[&(0, k)];
        let (u1, _) = pair_of[&(1, k)];
        let a0 = beta[u0].arg();
        let a1 = beta[u1].arg();
        // mu_j conj(mu_k) is either member of the pair
        let from0 = [
            Complex64::from_polar(m[k], mu[0].arg() - a0),
            Complex64::from_polar(m[k], mu[0].arg() + a0),
        ];
        let from1 = [
            Complex64::from_polar(m[k], mu[1].arg() - a1),
            Complex64::from_polar(m[k], mu[1].arg() + a1),
        ];
        let mut combos: Vec<(f64, usize)> = Vec::new();
        for (s, a) in from0.iter().enumerate() {
            for b in &from1 {
                combos.push(((a - b).norm(), s));
            }
        }
        combos.sort_by(|x, y| x.0.total_cmp(&y.0));
        let (best, s) = combos[0];
        let runner = combos
            .iter()
            .filter(|c| c.1 != s)
            .map(|c| c.0)
            .fold(f64::INFINITY, f64::min);
        if runner <= 2.0 * best {
            return Err(Error::WindingResolution(format!(
                "candidates for eigenvalue {k} are ambiguous ({best:.3e} vs {runner:.3e})"
            )));
        }
        mu[k] = from0[s];
    }
    Ok(mu)
}

/// Nearly real bases taken as squared moduli must be this much closer to
/// the real axis, relative to their modulus, than every remaining base.
const SPLIT_REAL_RATIO: f64 = 0.1;

fn hungarian_distances(targets: &[Complex64], found: &[Complex64]) -> Vec<usize> {
    let cost: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| found.iter().map(|f| (t - f).norm()).collect())
        .collect();
    hungarian(&cost)
}

/// Least-squares moduli from `log m_j + log m_k = log |beta_(j,k)|` over the
/// assigned pairs; `None` when some pair modulus vanishes.
fn moduli_from_pairs(slots: &[(usize, usize)], perm: &[usize], pair_mod: &[Complex64], d: usize) -> Option<Vec<f64>> {
    let mut a = DMatrix::zeros(slots.len(), d);
    let mut rhs = DVector::zeros(slots.len());
    for (s, &(j, k)) in slots.iter().enumerate() {
        let v = pair_mod[perm[s]].re;
        if !(v > 0.0) {
            return None;
        }
        a[(s, j)] = 1.0;
        a[(s, k)] = 1.0;
        rhs[s] = v.ln();
    }
    let logs = a.svd(true, true).solve(&rhs, 1e-12).ok()?;
    Some(logs.iter().map(|l| l.exp()).collect())
}

/// Half-spectrum `a_hat_0 > ... > a_hat_{n-1}` from the `n(n+1)/2` real
/// products `a_hat_j a_hat_k`. The largest base is `a_hat_0^2`; thereafter
/// the largest base left is always `a_hat_0 a_hat_m`, and the products of
/// `a_hat_m` with all known components are removed.
pub fn peel_lowpass(bases: &[f64], n: usize, rtol: f64) -> Result<Vec<f64>> {
    let k_terms = n * (n + 1) / 2;
    if bases.len() != k_terms {
        return Err(Error::LengthMismatch {
            expected: k_terms,
            found: bases.len(),
        });
    }
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let mut remaining: Vec<f64> = bases.to_vec();
    remaining.sort_by(|a, b| b.total_cmp(a));
    if remaining[0] <= 0.0 {
        return Err(Error::Peeling("largest base is not positive".into()));
    }
    let tol = rtol * remaining[0];
    let mut a = vec![remaining.remove(0).sqrt()];
    for _ in 1..n {
        let top = remaining[0];
        let am = top / a[0];
        let mut next = a.clone();
        next.push(am);
        for &aj in &next {
            let target = aj * am;
            let (pos, dist) = remaining
                .iter()
                .enumerate()
                .map(|(i, r)| (i, (r - target).abs()))
                .min_by(|x, y| x.1.total_cmp(&y.1))
                .ok_or_else(|| Error::Peeling("ran out of products".into()))?;
            if dist > tol {
                return Err(Error::Peeling(format!(
                    "no base matches the product {target:.6e} (closest {dist:.3e} away)"
                )));
            }
            remaining.remove(pos);
        }
        a = next;
    }
    Ok(a)
}

/// Sample residuals after the least-squares fit of every vector on the
/// products of `a`, with the (Kaufman) variable-projection Jacobian in `a`
/// when asked; `None` when the products nearly coincide.
fn projected_residual(samples: &[Vec<f64>], a: &[f64], jacobian: bool) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let (idx, val) = half_products(a);
    let kt = val.len();
    let b: Vec<f64> = val.iter().map(|z| z.re).collect();
    let top = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !top.is_finite() {
        return None;
    }
    let mut sorted = b.clone();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|p| p[1] - p[0] <= COINCIDENCE_RTOL * top) {
        return None;
    }
    let rows: usize = samples.iter().map(Vec::len).sum();
    let mut r_all = DVector::zeros(rows);
    let mut j_all = DMatrix::zeros(if jacobian { rows } else { 0 }, a.len());
    let mut row = 0;
    for h in samples {
        let l = h.len();
        let v = DMatrix::from_fn(l, kt, |i, t| b[t].powi(i as i32));
        if !v.iter().all(|x| x.abs() < 1e150) {
            return None;
        }
        let svd = nalgebra::SVD::try_new_unordered(v, true, true, f64::EPSILON, 10_000)?;
        if !svd.singular_values.iter().all(|s| s.is_finite()) {
            return None;
        }
        let u = svd.u.as_ref().expect("requested");
        let hv = DVector::from_column_slice(h);
        let w = svd.solve(&hv, 0.0).ok()?;
        let fit = u * (u.transpose() * &hv);
        r_all.rows_mut(row, l).copy_from(&(fit - &hv));
        if jacobian {
            for m in 0..a.len() {
                let mut col = DVector::zeros(l);
                for (t, &(j, k)) in idx.iter().enumerate() {
                    let db = if j == m { a[k] } else { 0.0 } + if k == m { a[j] } else { 0.0 };
                    if db == 0.0 {
                        continue;
                    }
                    for i in 1..l {
                        col[i] += w[t] * db * i as f64 * b[t].powi(i as i32 - 1);
                    }
                }
                let proj = &col - u * (u.transpose() * &col);
                j_all.view_mut((row, m), (l, 1)).copy_from(&proj);
            }
        }
        row += l;
    }
    Some((r_all, j_all))
}

/// Refines a half spectrum by Gauss-Newton on the projected residual.
/// Returns the refined components and the residual relative to the samples.
fn refine_half_spectrum(samples: &[Vec<f64>], a0: &[f64], iters: usize) -> Option<(Vec<f64>, f64)> {
    let scale = samples.iter().flatten().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let mut a = a0.to_vec();
    let (mut r, mut jac) = projected_residual(samples, &a, true)?;
    for _ in 0..iters {
        let norm = r.norm();
        if norm / scale < 1e-15 {
            break;
        }
        let delta = jac.clone().svd(true, true).solve(&(-&r), 1e-14).ok()?;
        let mut t = 1.0;
        let mut improved = false;
        while t > 1e-4 {
            let trial: Vec<f64> = a.iter().zip(delta.iter()).map(|(x, dx)| x + t * dx).collect();
            if let Some((rt, jt)) = projected_residual(samples, &trial, true) {
                if rt.norm() < norm {
                    improved = rt.norm() < 0.999 * norm;
                    a = trial;
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
    let rel = r.norm() / scale;
    Some((a, rel))
}

/// Relative residual below which a refined half spectrum is taken to
/// reproduce noise-free samples.
const LENIENT_PEEL_RESIDUAL: f64 = 1e-13;

/// Relative sample residual of a complete low-pass reconstruction under
/// which no further half-spectrum candidates are tried.
const LOWPASS_ACCEPT_RESIDUAL: f64 = 1e-10;

/// The first peel within `peel_rtol` over the vectors' Prony bases.
fn strict_half_spectrum(bases: &[Vec<f64>], n: usize, opts: &RecoveryOptions) -> Result<Vec<f64>> {
    let mut strict = peel_lowpass(&bases[0], n, opts.peel_rtol);
    for b in &bases[1..] {
        if strict.is_ok() {
            break;
        }
        if let Ok(a) = peel_lowpass(b, n, opts.peel_rtol) {
            strict = Ok(a);
        }
    }
    strict
}

/// Strict and tolerance-free peels of every vector, refined against the
/// samples; those reproducing the samples, best first.
fn peeled_candidates(samples: &[Vec<f64>], bases: &[Vec<f64>], n: usize, opts: &RecoveryOptions) -> Vec<(Vec<f64>, f64)> {
    let mut c: Vec<(Vec<f64>, f64)> = strict_half_spectrum(bases, n, opts)
        .into_iter()
        .chain(bases.iter().filter_map(|b| peel_lowpass(b, n, f64::INFINITY).ok()))
        .filter(|a| a.iter().all(|v| v.is_finite() && *v > 0.0))
        .filter_map(|a| refine_half_spectrum(samples, &a, opts.polish_iterations))
        .filter(|c| c.1 <= LENIENT_PEEL_RESIDUAL)
        .collect();
    c.sort_by(|x, y| x.1.total_cmp(&y.1));
    c.dedup_by(|x, y| x.0.iter().zip(&y.0).all(|(u, v)| (u - v).abs() <= 1e-9));
    c
}

/// Completes every half-spectrum candidate with `finish` (which returns the
/// reconstruction and its relative sample residual) and keeps the one that
/// reproduces the samples best. A half spectrum can fit each vector's
/// samples alone through large cancelling weights, so candidates are judged
/// by the full model. Peeled candidates are tried first, the grid search
/// only when none of them is accepted, the plain strict peel last.
fn solve_lowpass<F>(
    samples: &[Vec<f64>],
    bases: &[Vec<f64>],
    n: usize,
    opts: &RecoveryOptions,
    diag: Diagnostics,
    finish: F,
) -> Result<RecoveryResult>
where
    F: Fn(&[f64], &mut Diagnostics) -> Result<(RecoveryResult, f64)>,
{
    if opts.polish_iterations == 0 {
        let mut diag = diag;
        return finish(&strict_half_spectrum(bases, n, opts)?, &mut diag).map(|r| r.0);
    }
    let mut best: Option<(RecoveryResult, f64)> = None;
    let mut first_err = None;
    let mut attempt = |cands: Vec<(Vec<f64>, f64)>, best: &mut Option<(RecoveryResult, f64)>| {
        for (a, rel) in cands {
            let mut d = diag.clone();
            d.notes.push(format!("half spectrum refined, relative residual {rel:.3e}"));
            match finish(&a, &mut d) {
                Ok((r, res)) if best.as_ref().is_none_or(|b| res < b.1) => *best = Some((r, res)),
                Ok(_) => {}
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
    };
    attempt(peeled_candidates(samples, bases, n, opts), &mut best);
    if best.as_ref().is_none_or(|b| !(b.1 <= LOWPASS_ACCEPT_RESIDUAL)) {
        attempt(grid_half_spectrum(samples, bases, n, opts), &mut best);
    }
    if let Some((r, _)) = best {
        return Ok(r);
    }
    match strict_half_spectrum(bases, n, opts) {
        Ok(a) => {
            let mut diag = diag;
            finish(&a, &mut diag).map(|r| r.0)
        }
        Err(e) => Err(first_err.unwrap_or(e)),
    }
}

/// Points per axis of the search over the small half-spectrum components.
const GRID_POINTS: usize = 24;
/// Refined starts taken from the best grid points.
const GRID_STARTS: usize = 8;

/// Multistart search: the two largest components come from the largest
/// Prony bases of some vector, which are the accurate ones; the rest range
/// over a decreasing grid below them. The best grid points are refined
/// against the samples; those reproducing them are returned, best first.
fn grid_half_spectrum(samples: &[Vec<f64>], bases: &[Vec<f64>], n: usize, opts: &RecoveryOptions) -> Vec<(Vec<f64>, f64)> {
    if !(3..=5).contains(&n) {
        return Vec::new();
    }
    let mut leading: Vec<(f64, f64)> = Vec::new();
    for b in bases {
        let mut top = b.clone();
        top.sort_by(|a, b| b.total_cmp(a));
        if top.len() < 4 || top[0] <= 0.0 {
            continue;
        }
        let a0 = top[0].sqrt();
        for &t in &top[1..4] {
            let a1 = t / a0;
            if a1 > 0.0 && a1 < a0 && !leading.iter().any(|&(p, q)| (p - a0).abs() + (q - a1).abs() < 1e-6) {
                leading.push((a0, a1));
            }
        }
    }
    let free = n - 2;
    let mut starts: Vec<(f64, Vec<f64>)> = Vec::new();
    for (a0, a1) in leading {
        let levels: Vec<f64> = (1..=GRID_POINTS).map(|i| a1 * i as f64 / (GRID_POINTS + 1) as f64).collect();
        // strictly decreasing index tuples into `levels`
        let mut idx: Vec<usize> = (0..free).rev().collect();
        loop {
            let mut a = vec![a0, a1];
            a.extend(idx.iter().map(|&i| levels[i]));
            if let Some((r, _)) = projected_residual(samples, &a, false) {
                starts.push((r.norm(), a));
            }
            if !next_decreasing(&mut idx, GRID_POINTS) {
                break;
            }
        }
    }
    starts.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut found: Vec<(Vec<f64>, f64)> = starts
        .into_iter()
        .take(GRID_STARTS)
        .filter_map(|(_, a)| refine_half_spectrum(samples, &a, opts.polish_iterations.max(50)))
        .filter(|c| c.1 <= LENIENT_PEEL_RESIDUAL)
        .collect();
    found.sort_by(|x, y| x.1.total_cmp(&y.1));
    found.dedup_by(|x, y| x.0.iter().zip(&y.0).all(|(u, v)| (u - v).abs() <= 1e-9));
    found
}

/// Advances a strictly decreasing index tuple below `limit`; false once all
/// have been visited.
fn next_decreasing(idx: &mut [usize], limit: usize) -> bool {
    for pos in (0..idx.len()).rev() {
        let cap = if pos == 0 { limit } else { idx[pos - 1] };
        if idx[pos] + 1 < cap {
            idx[pos] += 1;
            let m = idx.len();
            for (q, v) in idx.iter_mut().enumerate().skip(pos + 1) {
                *v = m - 1 - q;
            }
            return true;
        }
    }
    false
}

/// Products `a_j a_k`, `j >= k`, in the order `(0,0), (1,0), (1,1), ...`.
fn half_products(a: &[f64]) -> (Vec<(usize, usize)>, Vec<Complex64>) {
    let mut idx = Vec::new();
    let mut val = Vec::new();
    for j in 0..a.len() {
        for k in 0..=j {
            idx.push((k, j));
            val.push(Complex64::new(a[j] * a[k], 0.0));
        }
    }
    (idx, val)
}

/// Coefficients of the product bases `a_j a_k` in the samples of one
/// sampling vector, keyed by `(min, max)`. They are fitted by least squares
/// on the peeled products: Prony's smallest bases are far less accurate
/// than its largest ones, which are all the peeling consumes.
fn product_weights(h: &[f64], a: &[f64], diag: &mut Diagnostics) -> Result<BTreeMap<(usize, usize), f64>> {
    let (idx, val) = half_products(a);
    let (eta, residual) = fit_coefficients(&val, &to_complex(h))?;
    diag.residual.push(residual);
    Ok(idx.into_iter().zip(eta).map(|(jk, e)| (jk, e.re)).collect())
}

fn check_lowpass_inputs(samples: &[Vec<f64>], phis: &[Vec<Complex64>], vectors: usize, d: usize) -> Result<usize> {
    if d == 0 {
        return Err(Error::EmptyInput);
    }
    if samples.len() != vectors || phis.len() != vectors {
        return Err(Error::Precondition(format!("expected {vectors} sampling vectors")));
    }
    if let Some(p) = phis.iter().find(|p| p.len() != d) {
        return Err(Error::LengthMismatch {
            expected: d,
            found: p.len(),
        });
    }
    let n = d / 2 + 1;
    let k_terms = n * (n + 1) / 2;
    for h in samples {
        if h.len() <= 2 * k_terms {
            return Err(Error::InsufficientSamples {
                needed: 2 * k_terms + 1,
                got: h.len(),
            });
        }
    }
    Ok(n)
}

/// `|x_hat_0|` from `|c_{i,0}|^2 = |x_hat_0 phi_hat_{i,0} / d|^2`, least
/// squares over all vectors.
fn zero_frequency_modulus(weights: &[BTreeMap<(usize, usize), f64>], phi_hat: &[Vec<Complex64>], df: f64) -> Result<f64> {
    let num: f64 = weights.iter().map(|w| w[&(0, 0)].max(0.0)).sum();
    let den: f64 = phi_hat.iter().map(|p| p[0].norm_sqr()).sum();
    if den <= 1e-28 || num == 0.0 {
        return Err(Error::Hypothesis("zero-frequency coefficient vanishes".into()));
    }
    Ok(df * (num / den).sqrt())
}

fn note_polish(diag: &mut Diagnostics, r: &PolishReport) {
    diag.notes.push(format!(
        "polished in {} iterations, relative residual {:.3e} -> {:.3e}",
        r.iterations, r.initial, r.fin
    ));
}

/// Refines the half spectrum `a` and the signal `x` jointly against the
/// samples; `x` is treated as real unless `complex`. Also returns the final
/// relative residual (NaN when refinement is disabled).
fn polish_lowpass(
    samples: &[Vec<f64>],
    phi_hat: &[Vec<Complex64>],
    a: &[f64],
    x: &[Complex64],
    complex: bool,
    opts: &RecoveryOptions,
    diag: &mut Diagnostics,
) -> Result<(Vec<f64>, Vec<Complex64>, f64)> {
    if opts.polish_iterations == 0 {
        return Ok((a.to_vec(), x.to_vec(), f64::NAN));
    }
    let d = x.len();
    let n = a.len();
    let cols = n + if complex { 2 * d } else { d };
    let f = fourier_matrix(d);
    let df = d as f64;
    let mut map = DMatrix::zeros(4 * d, cols);
    for k in 0..d {
        map[(k, k.min(d - k))] = 1.0;
        for m in 0..d {
            let e = f[(k, m)] / df;
            map[(2 * d + k, n + m)] = e.re;
            map[(3 * d + k, n + m)] = e.im;
            if complex {
                map[(2 * d + k, n + d + m)] = -e.im;
                map[(3 * d + k, n + d + m)] = e.re;
            }
        }
    }
    let mut theta = DVector::zeros(cols);
    for (j, v) in a.iter().enumerate() {
        theta[j] = *v;
    }
    for m in 0..d {
        theta[n + m] = x[m].re;
        if complex {
            theta[n + d + m] = x[m].im;
        }
    }
    let (theta, report) = polish(samples, phi_hat, &map, theta, opts.polish_iterations)?;
    note_polish(diag, &report);
    let a = theta.rows(0, n).iter().copied().collect();
    let x = (0..d)
        .map(|m| Complex64::new(theta[n + m], if complex { theta[n + d + m] } else { 0.0 }))
        .collect();
    Ok((a, x, report.fin))
}

/// Real signal and low-pass kernel spectrum from two real sampling vectors.
/// The signal is determined up to sign; `x_hat_0` of the first vector's
/// zero-frequency coefficient is taken positive.
pub fn recover_lowpass_real(
    samples: &[Vec<f64>],
    phis: &[Vec<Complex64>],
    d: usize,
    opts: &RecoveryOptions,
) -> Result<RecoveryResult> {
    let n = check_lowpass_inputs(samples, phis, 2, d)?;
    let k_terms = n * (n + 1) / 2;
    let mut diag = Diagnostics::default();
    let bases = samples
        .iter()
        .map(|h| prony_real_bases(h, k_terms, &mut diag))
        .collect::<Result<Vec<_>>>()?;
    let phi_hat: Vec<Vec<Complex64>> = phis.iter().map(|p| dft(p)).collect::<Result<_>>()?;
    solve_lowpass(samples, &bases, n, opts, diag, |a, diag| {
        lowpass_real_from_half_spectrum(samples, &phi_hat, a, d, opts, diag)
    })
}

fn lowpass_real_from_half_spectrum(
    samples: &[Vec<f64>],
    phi_hat: &[Vec<Complex64>],
    a: &[f64],
    d: usize,
    opts: &RecoveryOptions,
    diag: &mut Diagnostics,
) -> Result<(RecoveryResult, f64)> {
    let n = a.len();
    let weights = samples
        .iter()
        .map(|h| product_weights(h, a, diag))
        .collect::<Result<Vec<_>>>()?;
    let df = d as f64;

    let gamma = |k: usize| crate::dynamics::fold_weight(k, d);
    // zero frequency: c_{i,0} = x_hat_0 phi_hat_{i,0} / d is real; its
    // modulus is fitted over both vectors, the sign fixed by the first
    let x0_abs = zero_frequency_modulus(&weights, phi_hat, df)?;
    let x0 = x0_abs * phi_hat[0][0].re.signum();
    let mut re_c = vec![vec![0.0; n]; 2];
    for i in 0..2 {
        re_c[i][0] = x0 * phi_hat[i][0].re / df;
        if re_c[i][0] == 0.0 {
            return Err(Error::Hypothesis(format!("zero-frequency coefficient of vector {i} vanishes")));
        }
        for k in 1..n {
            re_c[i][k] = weights[i][&(0, k)] / (2.0 * gamma(k) * re_c[i][0]);
        }
    }
    let mut x_hat = vec![Complex64::new(0.0, 0.0); d];
    x_hat[0] = Complex64::new(x0, 0.0);
    let mut worst_cond: f64 = 1.0;
    for k in 1..n {
        if 2 * k == d {
            // real Nyquist coefficient, least squares over both vectors
            let num: f64 = (0..2).map(|i| phi_hat[i][k].re * re_c[i][k]).sum();
            let den: f64 = (0..2).map(|i| phi_hat[i][k].re.powi(2)).sum();
            if den <= 1e-28 {
                return Err(Error::Hypothesis("Nyquist frequency not sampled".into()));
            }
            x_hat[k] = Complex64::new(df * num / den, 0.0);
            continue;
        }
        let m = DMatrix::from_row_slice(
            2,
            2,
            &[phi_hat[0][k].re, phi_hat[0][k].im, phi_hat[1][k].re, phi_hat[1][k].im],
        );
        let sv = m.clone().singular_values();
        let cond = sv.max() / sv.min();
        worst_cond = worst_cond.max(cond);
        if !cond.is_finite() || cond > opts.max_condition {
            return Err(Error::IllConditioned { condition: cond });
        }
        let rhs = DVector::from_vec(vec![df * re_c[0][k], df * re_c[1][k]]);
        let sol = m
            .lu()
            .solve(&rhs)
            .ok_or(Error::IllConditioned { condition: cond })?;
        x_hat[k] = Complex64::new(sol[0], sol[1]);
        x_hat[d - k] = x_hat[k].conj();
    }
    let x: Vec<Complex64> = idft(&x_hat)?.into_iter().map(|z| Complex64::new(z.re, 0.0)).collect();
    diag.condition = Some(worst_cond);
    let (a, x, residual) = polish_lowpass(samples, phi_hat, a, &x, false, opts, diag)?;
    let result = RecoveryResult {
        spectrum: Some(ComplexVector::new(symmetric_spectrum(&a, d))?),
        signal: Some(ComplexVector::new(x)?),
        table: None,
        gauge: Gauge {
            convention: "zero-frequency coefficient of the first vector positive (signal up to sign)".into(),
            anchor: Some(0),
            winding: Winding::AsRecovered,
        },
        diagnostics: diag.clone(),
    };
    Ok((result, residual))
}

/// Complex signal and low-pass kernel spectrum from four complex sampling
/// vectors; `x_hat_0` is made real positive.
pub fn recover_lowpass_complex(
    samples: &[Vec<f64>],
    phis: &[Vec<Complex64>],
    d: usize,
    opts: &RecoveryOptions,
) -> Result<RecoveryResult> {
    let n = check_lowpass_inputs(samples, phis, 4, d)?;
    let k_terms = n * (n + 1) / 2;
    let mut diag = Diagnostics::default();
    let bases = samples
        .iter()
        .map(|h| prony_real_bases(h, k_terms, &mut diag))
        .collect::<Result<Vec<_>>>()?;
    let phi_hat: Vec<Vec<Complex64>> = phis.iter().map(|p| dft(p)).collect::<Result<_>>()?;
    solve_lowpass(samples, &bases, n, opts, diag, |a, diag| {
        lowpass_complex_from_half_spectrum(samples, &phi_hat, a, d, opts, diag)
    })
}

fn lowpass_complex_from_half_spectrum(
    samples: &[Vec<f64>],
    phi_hat: &[Vec<Complex64>],
    a: &[f64],
    d: usize,
    opts: &RecoveryOptions,
    diag: &mut Diagnostics,
) -> Result<(RecoveryResult, f64)> {
    let n = a.len();
    let weights = samples
        .iter()
        .map(|h| product_weights(h, a, diag))
        .collect::<Result<Vec<_>>>()?;
    let df = d as f64;

    let x0 = zero_frequency_modulus(&weights, phi_hat, df)?;
    let c0: Vec<Complex64> = phi_hat.iter().map(|p| x0 * p[0] / df).collect();
    let mut x_hat = vec![Complex64::new(0.0, 0.0); d];
    x_hat[0] = Complex64::new(x0, 0.0);
    let mut worst_cond: f64 = 1.0;
    for k in 1..n {
        let m = crate::dynamics::complex_frequency_matrix(&c0, phi_hat, k, d);
        let rhs = DVector::from_iterator(4, (0..4).map(|i| weights[i][&(0, k)] / 2.0));
        let sv = m.clone().singular_values();
        let cond = sv.max() / sv.min();
        worst_cond = worst_cond.max(cond);
        if !cond.is_finite() || cond > opts.max_condition {
            return Err(Error::IllConditioned { condition: cond });
        }
        let sol = m
            .svd(true, true)
            .solve(&rhs, 0.0)
            .map_err(|e| Error::Numerical(e.to_string()))?;
        x_hat[k] = Complex64::new(sol[0], sol[1]);
        if 2 * k != d {
            x_hat[d - k] = Complex64::new(sol[2], sol[3]);
        }
    }
    diag.condition = Some(worst_cond);
    let x = idft(&x_hat)?;
    let (a, mut x, residual) = polish_lowpass(samples, phi_hat, a, &x, true, opts, diag)?;
    let x0 = dft(&x)?[0];
    if x0.norm() > 0.0 {
        let rot = x0.conj() / x0.norm();
        x.iter_mut().for_each(|z| *z *= rot);
    }
    let result = RecoveryResult {
        spectrum: Some(ComplexVector::new(symmetric_spectrum(&a, d))?),
        signal: Some(ComplexVector::new(x)?),
        table: None,
        gauge: Gauge {
            convention: "zero-frequency signal coefficient real positive".into(),
            anchor: Some(0),
            winding: Winding::AsRecovered,
        },
        diagnostics: diag.clone(),
    };
    Ok((result, residual))
}

/// Canonical index-separation sets for index `k`: the patches containing
/// `k`, and the patches meeting their common support without containing `k`.
fn separation_sets(supports: &[BTreeSet<usize>], k: usize) -> (Vec<usize>, Vec<usize>, BTreeSet<usize>) {
    let f: Vec<usize> = (0..supports.len()).filter(|&i| supports[i].contains(&k)).collect();
    let mut inter = supports[f[0]].clone();
    for &i in &f[1..] {
        inter = inter.intersection(&supports[i]).copied().collect();
    }
    let g: Vec<usize> = (0..supports.len())
        .filter(|&i| !supports[i].contains(&k) && !supports[i].is_disjoint(&inter))
        .collect();
    (f, g, inter)
}

/// Order in which patches join the aligned set: each must share at least
/// two indices with the union of its predecessors.
fn propagation_order(supports: &[BTreeSet<usize>]) -> Result<Vec<usize>> {
    let mut order = vec![0];
    let mut covered = supports[0].clone();
    let mut left: BTreeSet<usize> = (1..supports.len()).collect();
    while !left.is_empty() {
        let best = left
            .iter()
            .map(|&i| (supports[i].intersection(&covered).count(), i))
            .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
            .expect("nonempty");
        if best.0 < 2 {
            return Err(Error::PhasePropagation(format!(
                "sampling vector {} shares fewer than two indices with the aligned ones",
                best.1
            )));
        }
        order.push(best.1);
        covered.extend(supports[best.1].iter().copied());
        left.remove(&best.1);
    }
    Ok(order)
}

/// Checks full cover, index separation and phase propagation of the
/// supports; returns the propagation order.
pub fn validate_supports(supports: &[Vec<usize>], d: usize) -> Result<Vec<usize>> {
    if supports.is_empty() {
        return Err(Error::EmptyInput);
    }
    let sets: Vec<BTreeSet<usize>> = supports.iter().map(|s| s.iter().copied().collect()).collect();
    if let Some(bad) = sets.iter().flatten().find(|&&k| k >= d) {
        return Err(Error::IndexOutOfRange { index: *bad, len: d });
    }
    let union: BTreeSet<usize> = sets.iter().flatten().copied().collect();
    if union.len() != d {
        return Err(Error::Hypothesis("supports do not cover all indices".into()));
    }
    for k in 0..d {
        let (_, g, inter) = separation_sets(&sets, k);
        let mut left = inter;
        for i in g {
            for r in &sets[i] {
                left.remove(r);
            }
        }
        if left.len() != 1 {
            return Err(Error::Hypothesis(format!("index separation fails for index {k}")));
        }
    }
    propagation_order(&sets)
}

/// Unimodular `e^{i theta}` (and optional conjugation) mapping `v` onto
/// `reference` in least squares; returns `(theta, conjugate, residual)`.
fn fit_orbit(reference: &[Complex64], v: &[Complex64], allow_conj: bool) -> (f64, bool, f64, f64) {
    let fit = |conj: bool| {
        let w: Vec<Complex64> = v.iter().map(|z| if conj { z.conj() } else { *z }).collect();
        let ip: Complex64 = reference.iter().zip(&w).map(|(r, z)| r * z.conj()).sum();
        let theta = ip.arg();
        let rot = Complex64::from_polar(1.0, theta);
        let res = reference
            .iter()
            .zip(&w)
            .map(|(r, z)| (r - rot * z).norm())
            .fold(0.0, f64::max);
        (theta, res)
    };
    let (t0, r0) = fit(false);
    if !allow_conj {
        return (t0, false, r0, f64::INFINITY);
    }
    let (t1, r1) = fit(true);
    if r0 <= r1 {
        (t0, false, r0, r1)
    } else {
        (t1, true, r1, r0)
    }
}

/// Spectrum and signal from sampling vectors whose eigenbasis coefficients
/// `S^{-1} phi_i` are supported on `supports[i]`.
pub fn recover_multi_vector(
    samples: &[Vec<f64>],
    basis: &CMatrix,
    phis: &[Vec<Complex64>],
    supports: &[Vec<usize>],
    opts: &RecoveryOptions,
) -> Result<RecoveryResult> {
    let d = basis.nrows();
    if basis.ncols() != d {
        return Err(Error::LengthMismatch {
            expected: d,
            found: basis.ncols(),
        });
    }
    if samples.len() != supports.len() || phis.len() != supports.len() {
        return Err(Error::LengthMismatch {
            expected: supports.len(),
            found: samples.len().min(phis.len()),
        });
    }
    let order = validate_supports(supports, d)?;
    let sets: Vec<BTreeSet<usize>> = supports.iter().map(|s| s.iter().copied().collect()).collect();
    let local: Vec<Vec<usize>> = sets.iter().map(|s| s.iter().copied().collect()).collect();
    let s_inv = basis_inverse(basis)?;
    let psi: Vec<Vec<Complex64>> = phis.iter().map(|p| mat_vec(&s_inv, p)).collect();

    let patches: Vec<UnorderedSpectrum> = samples
        .par_iter()
        .zip(local.par_iter())
        .enumerate()
        .map(|(i, (h, sup))| {
            recover_unordered_spectrum(h, sup.len(), opts).map_err(|e| match e {
                Error::Hypothesis(m) => Error::Hypothesis(format!("sampling vector {i}: {m}")),
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    let mut diag = Diagnostics::default();
    for p in &patches {
        diag.sigma_min.extend(&p.diagnostics.sigma_min);
        diag.kernel_gap.extend(&p.diagnostics.kernel_gap);
        diag.residual.extend(&p.diagnostics.residual);
        diag.matched(p.diagnostics.max_matching_distance);
    }

    // index separation on the recovered moduli
    let scale = patches.iter().map(|p| max_norm(&p.mu)).fold(0.0, f64::max);
    let tol = opts.magnitude_rtol * scale;
    let moduli: Vec<Vec<f64>> = patches.iter().map(|p| p.mu.iter().map(|z| z.norm()).collect()).collect();
    let nearest = |i: usize, v: f64| -> (usize, f64) {
        moduli[i]
            .iter()
            .enumerate()
            .map(|(e, m)| (e, (m - v).abs()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("nonempty patch")
    };
    // element_of[i][e] = global index of local element e of patch i
    let mut element_of: Vec<Vec<Option<usize>>> = patches.iter().map(|p| vec![None; p.mu.len()]).collect();
    for k in 0..d {
        let (f, g, _) = separation_sets(&sets, k);
        let candidates: Vec<usize> = (0..moduli[f[0]].len())
            .filter(|&e| {
                let v = moduli[f[0]][e];
                f[1..].iter().all(|&i| nearest(i, v).1 <= tol) && g.iter().all(|&i| nearest(i, v).1 > tol)
            })
            .collect();
        if candidates.len() != 1 {
            return Err(Error::Hypothesis(format!(
                "index {k}: {} moduli survive the separation step",
                candidates.len()
            )));
        }
        let v = moduli[f[0]][candidates[0]];
        for &i in &f {
            let (e, _) = nearest(i, v);
            if element_of[i][e].replace(k).is_some() {
                return Err(Error::Hypothesis(format!("sampling vector {i}: two indices share one modulus")));
            }
        }
    }
    // local element for each support position
    let mut pos_to_elem: Vec<Vec<usize>> = Vec::with_capacity(patches.len());
    for (i, sup) in local.iter().enumerate() {
        let mut v = Vec::with_capacity(sup.len());
        for &k in sup {
            let e = element_of[i]
                .iter()
                .position(|&g| g == Some(k))
                .ok_or_else(|| Error::Hypothesis(format!("sampling vector {i}: index {k} not identified")))?;
            v.push(e);
        }
        pos_to_elem.push(v);
    }

    // phase propagation
    let mut spectrum: Vec<Option<Complex64>> = vec![None; d];
    for &i in &order {
        let vals: Vec<(usize, Complex64)> = local[i]
            .iter()
            .zip(&pos_to_elem[i])
            .map(|(&k, &e)| (k, patches[i].mu[e]))
            .collect();
        let shared: Vec<(Complex64, Complex64)> = vals
            .iter()
            .filter_map(|&(k, v)| spectrum[k].map(|r| (r, v)))
            .collect();
        let (theta, conj) = if shared.is_empty() {
            (0.0, false)
        } else {
            let (r, v): (Vec<_>, Vec<_>) = shared.into_iter().unzip();
            let (theta, conj, best, other) = fit_orbit(&r, &v, true);
            if other <= 2.0 * best {
                return Err(Error::PhasePropagation(format!(
                    "sampling vector {i}: orientation of the overlap is ambiguous ({best:.3e} vs {other:.3e})"
                )));
            }
            (theta, conj)
        };
        let rot = Complex64::from_polar(1.0, theta);
        for (k, v) in vals {
            if spectrum[k].is_none() {
                spectrum[k] = Some(rot * if conj { v.conj() } else { v });
            }
        }
    }
    let mut lambda: Vec<Complex64> = spectrum.into_iter().map(|v| v.expect("full cover")).collect();

    // winding: solve for u = y_{k1} conj(y_{k2}) from two sampling vectors
    let quad = best_winding_quadruple(&psi, &sets)
        .ok_or_else(|| Error::Hypothesis("no quadruple determines the winding direction".into()))?;
    let (i1, i2, k1, k2, sine) = quad;
    let re_prod = |i: usize| -> Result<f64> {
        let e1 = pos_to_elem[i][local[i].iter().position(|&k| k == k1).expect("k1 in support")];
        let e2 = pos_to_elem[i][local[i].iter().position(|&k| k == k2).expect("k2 in support")];
        patches[i]
            .table
            .coeff(e1, e2)
            .map(|z| z.re)
            .ok_or_else(|| Error::InconsistentTable("missing product".into()))
    };
    let p1 = psi[i1][k1] * psi[i1][k2].conj();
    let p2 = psi[i2][k1] * psi[i2][k2].conj();
    let m = DMatrix::from_row_slice(2, 2, &[p1.re, p1.im, p2.re, p2.im]);
    let rhs = DVector::from_vec(vec![re_prod(i1)?, re_prod(i2)?]);
    let sol = m.lu().solve(&rhs).ok_or_else(|| {
        Error::WindingResolution("winding system is singular".into())
    })?;
    let u = Complex64::new(sol[0], sol[1]);
    let (q1, q2) = (u.conj() * p1, u.conj() * p2);
    let (ic, q) = if q1.im.abs() >= q2.im.abs() { (i1, q1) } else { (i2, q2) };
    let e1 = pos_to_elem[ic][local[ic].iter().position(|&k| k == k1).expect("k1")];
    let e2 = pos_to_elem[ic][local[ic].iter().position(|&k| k == k2).expect("k2")];
    let t = &patches[ic].table;
    let (ca, cb) = (t.coeff(e1, e2).expect("entry"), t.coeff(e2, e1).expect("entry"));
    let true_base = if (ca - q).norm() <= (cb - q).norm() {
        t.base(e1, e2).expect("entry")
    } else {
        t.base(e2, e1).expect("entry")
    };
    let predicted = lambda[k1] * lambda[k2].conj();
    if (true_base - predicted.conj()).norm() < (true_base - predicted).norm() {
        lambda.iter_mut().for_each(|z| *z = z.conj());
    }
    diag.notes.push(format!(
        "winding fixed by vectors ({i1}, {i2}) at indices ({k1}, {k2}), sine {sine:.3e}"
    ));

    // transformed signal per patch, then aligned along the overlaps
    let mut y_glob: Vec<Option<Complex64>> = vec![None; d];
    for &i in &order {
        let sup = &local[i];
        let w = sup.len();
        let mut targets = Vec::with_capacity(w * w);
        let mut keys = Vec::with_capacity(w * w);
        for a in 0..w {
            for b in 0..w {
                targets.push(lambda[sup[a]] * lambda[sup[b]].conj());
                keys.push((a, b));
            }
        }
        let t = &patches[i].table;
        let cap = opts.pairing_rtol.max(10.0 * opts.magnitude_rtol) * scale * scale;
        let (perm, dist) = assign_capped(&targets, &t.bases, cap)?;
        diag.matched(dist);
        let table = ProductTable {
            bases: t.bases.clone(),
            coeffs: t.coeffs.clone(),
            tau: keys.into_iter().zip(perm).collect(),
            winding: Winding::AsRecovered,
        };
        let psi_local: Vec<Complex64> = sup.iter().map(|&k| psi[i][k]).collect();
        let y_local = factor_rank_one_products(&table, &psi_local)?;
        let shared: Vec<(Complex64, Complex64)> = sup
            .iter()
            .zip(&y_local)
            .filter_map(|(&k, &v)| y_glob[k].map(|r| (r, v)))
            .collect();
        let theta = if shared.is_empty() {
            0.0
        } else {
            let (r, v): (Vec<_>, Vec<_>) = shared.into_iter().unzip();
            fit_orbit(&r, &v, false).0
        };
        let rot = Complex64::from_polar(1.0, theta);
        for (&k, v) in sup.iter().zip(y_local) {
            if y_glob[k].is_none() {
                y_glob[k] = Some(rot * v);
            }
        }
    }
    let mut y: Vec<Complex64> = y_glob.into_iter().map(|v| v.expect("full cover")).collect();
    if opts.polish_iterations > 0 {
        let map = DMatrix::identity(4 * d, 4 * d);
        let (theta, report) = polish(samples, &psi, &map, pack(&lambda, &y), opts.polish_iterations)?;
        note_polish(&mut diag, &report);
        (lambda, y) = unpack(&theta, d);
    }
    let x = mat_vec(&s_inv.adjoint(), &y);

    let anchor = (0..d)
        .max_by(|&a, &b| lambda[a].norm().total_cmp(&lambda[b].norm()))
        .expect("nonempty");
    let rot = Complex64::from_polar(1.0, -lambda[anchor].arg());
    lambda.iter_mut().for_each(|z| *z *= rot);
    Ok(RecoveryResult {
        spectrum: Some(ComplexVector::new(lambda)?),
        signal: Some(ComplexVector::new(x)?),
        table: None,
        gauge: Gauge {
            convention: "eigenvalue largest in modulus real positive; signal up to global phase".into(),
            anchor: Some(anchor),
            winding: Winding::AsRecovered,
        },
        diagnostics: diag,
    })
}

/// The quadruple `(i1, i2, k1, k2)` whose winding system is best
/// conditioned, with the sine of the angle between its two rows.
pub fn best_winding_quadruple(
    psi: &[Vec<Complex64>],
    supports: &[BTreeSet<usize>],
) -> Option<(usize, usize, usize, usize, f64)> {
    let mut best: Option<(usize, usize, usize, usize, f64)> = None;
    for i1 in 0..supports.len() {
        for i2 in i1 + 1..supports.len() {
            let shared: Vec<usize> = supports[i1].intersection(&supports[i2]).copied().collect();
            for a in 0..shared.len() {
                for b in a + 1..shared.len() {
                    let s = crate::dynamics::winding_sine(psi, i1, i2, shared[a], shared[b]);
                    if best.is_none_or(|q| s > q.4) {
                        best = Some((i1, i2, shared[a], shared[b], s));
                    }
                }
            }
        }
    }
    best.filter(|q| q.4 > 1e-8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aligned {
    pub aligned: Vec<Complex64>,
    pub err_inf: f64,
    pub conjugated: bool,
}

/// Multiplies `estimate` by the unimodular scalar minimizing the 2-norm
/// distance to `truth`; with `winding_undetermined` the conjugate orbit is
/// tried too and the better one returned.
pub fn align_global_phase(estimate: &[Complex64], truth: &[Complex64], winding_undetermined: bool) -> Result<Aligned> {
    if estimate.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            found: estimate.len(),
        });
    }
    let single = |est: &[Complex64], conj: bool| -> Aligned {
        let ip: Complex64 = est.iter().zip(truth).map(|(e, t)| e.conj() * t).sum();
        let aligned = if ip.norm() > 0.0 {
            let rot = Complex64::from_polar(1.0, ip.arg());
            est.iter().map(|e| e * rot).collect::<Vec<_>>()
        } else {
            let idx = (0..est.len()).find(|&i| est[i].norm() > 0.0 && truth[i].norm() > 0.0);
            match idx {
                Some(i) => align_at_component(est, truth, i),
                None => est.to_vec(),
            }
        };
        let err_inf = crate::algebra::max_abs_diff(&aligned, truth);
        Aligned {
            aligned,
            err_inf,
            conjugated: conj,
        }
    };
    let plain = single(estimate, false);
    if !winding_undetermined {
        return Ok(plain);
    }
    let conj: Vec<Complex64> = estimate.iter().map(|z| z.conj()).collect();
    let flipped = single(&conj, true);
    Ok(if flipped.err_inf < plain.err_inf { flipped } else { plain })
}

/// Rotates `estimate` so that its component `index` has the phase of
/// `truth[index]`.
pub fn align_at_component(estimate: &[Complex64], truth: &[Complex64], index: usize) -> Vec<Complex64> {
    let rot = Complex64::from_polar(1.0, truth[index].arg() - estimate[index].arg());
    estimate.iter().map(|e| e * rot).collect()
}
