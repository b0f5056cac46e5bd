//! Closed-form perturbation bounds for Prony's method and the phaseless
//! reconstructions, and Monte Carlo checkers comparing observed errors
//! with them.
//!
//! Notation: `rho = max(1, |beta|_inf)`, `pi = prod (1 + |beta_k|)`,
//! `sigma` the minimal separation of the bases (see
//! [`ConditioningProfile`]). Bases and coefficients of the phaseless
//! exponential sum are held as `d x d` tables with entry `(j, k)` standing
//! for `lambda_j conj(lambda_k)` or `c_j conj(c_k)`.

use std::collections::BTreeMap;
use std::f64::consts::{PI, SQRT_2};

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebra::{
    build_vandermonde, conditioning_profile, elementary_symmetric, inf_norm, invert_square_vandermonde, one_norm,
    separation_power, singular_values, spectral_norm, vec_inf_norm, vec_min_modulus, wrap_phase, CMatrix,
    ConditioningProfile,
};
use crate::dynamics::stream_rng;
use crate::prony::{build_hankel, evaluate, fit_coefficients, kernel_vector, polynomial_eval, ExponentialSum};
use crate::{Error, Result};

/// Relative slack for rounding when comparing an observed quantity with a
/// bound that can be attained with equality.
pub const ROUNDING_SLACK: f64 = 1e-9;

/// Tight and loose forms of the spectral-norm bound of an error Hankel
/// matrix with entries of modulus at most `eps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HankelErrorBound {
    /// `sqrt((L-K)(K+1)) eps`
    pub tight: f64,
    /// `(L+1) eps / 2`
    pub loose: f64,
}

pub fn hankel_error_norm_bound(eps: f64, l: usize, k: usize) -> Result<HankelErrorBound> {
    if l <= 2 * k {
        return Err(Error::InsufficientSamples {
            needed: 2 * k,
            got: l,
        });
    }
    Ok(HankelErrorBound {
        tight: (((l - k) * (k + 1)) as f64).sqrt() * eps,
        loose: (l + 1) as f64 * eps / 2.0,
    })
}

/// Bounds on `||V_L||_inf`, `||V_L||_1` and `||V_L||_2`.
pub fn vandermonde_norm_bounds(rho: f64, l: usize, k: usize) -> (f64, f64, f64) {
    let p = rho.max(1.0).powi(l as i32 - 1);
    (k as f64 * p, l as f64 * p, ((k * l) as f64).sqrt() * p)
}

/// `pi / sigma^(K-1) * eps`: least-squares coefficient error for exact
/// bases and samples perturbed by at most `eps`.
pub fn coefficient_error_bound(eps: f64, profile: &ConditioningProfile, k: usize) -> Result<f64> {
    if !(profile.sigma > 0.0) && k > 1 {
        return Err(Error::Precondition("bases are not distinct".into()));
    }
    Ok(profile.inverse_vandermonde_bound(k) * eps)
}

/// Coefficient error when the bases themselves are off by at most `delta`
/// (`delta < sigma / 2`) and the samples by at most `eps`.
pub fn coefficient_error_bound_perturbed_bases(
    eps: f64,
    delta: f64,
    beta: &[Complex64],
    l: usize,
    h_inf: f64,
) -> Result<f64> {
    let k = beta.len();
    if k == 0 {
        return Err(Error::EmptyInput);
    }
    let p = conditioning_profile(beta);
    if k > 1 && delta >= p.sigma / 2.0 {
        return Err(Error::Precondition(format!(
            "basis perturbation {delta:.3e} is not below half the separation {:.3e}",
            p.sigma
        )));
    }
    let pi_shift: f64 = beta.iter().map(|b| 1.0 + b.norm() + delta).product();
    let rho_shift = beta.iter().map(|b| b.norm() + delta).fold(1.0, f64::max);
    let sep_shift = if k > 1 { separation_power(p.sigma - 2.0 * delta, k) } else { 1.0 };
    let vander_diff = SQRT_2 * (k * l) as f64 * rho_shift.powi(l as i32 - 1) * delta;
    Ok(pi_shift / sep_shift * (vander_diff * p.inverse_vandermonde_bound(k) * h_inf + eps))
}

/// `L (pi / sigma^(K-1))^2 (sigma_K~ + ||E||_2)^2`, bounding
/// `sum |eta_k|^2 |P~(beta_k)|^2` for the perturbed kernel polynomial.
pub fn weighted_kernel_residual_bound(profile: &ConditioningProfile, k: usize, l: usize, sigma_tilde: f64, e_norm: f64) -> f64 {
    l as f64 * profile.inverse_vandermonde_bound(k).powi(2) * (sigma_tilde + e_norm).powi(2)
}

/// `K L rho^(2L-2) (sigma_K~ + ||E||_2)^2 / sigma_{K-1}^2`, bounding
/// `sum |P~(beta_k)|^2`; `sigma_{K-1}` is the smallest nonzero singular
/// value of the exact Hankel matrix.
pub fn kernel_residual_bound(rho: f64, k: usize, l: usize, sigma_tilde: f64, e_norm: f64, sigma_exact: f64) -> f64 {
    (k * l) as f64 * rho.max(1.0).powi(2 * l as i32 - 2) * (sigma_tilde + e_norm).powi(2) / sigma_exact.powi(2)
}

/// Modulus error of `sqrt(|beta~_jj|)` when `|beta~_jj - |lambda_j|^2| <= delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeBound {
    /// `delta / (2 sqrt(|lambda_j|^2 - delta))`
    pub bound: f64,
    /// `sqrt(2) delta / (2 |lambda_j|)`, valid for `delta < |lambda_j|^2 / 2`.
    pub simplified: Option<f64>,
}

/// `None` when `delta >= |lambda_j|^2`.
pub fn spectrum_magnitude_bound(delta: f64, lambda_abs: f64) -> Option<MagnitudeBound> {
    let sq = lambda_abs * lambda_abs;
    (delta < sq).then(|| MagnitudeBound {
        bound: delta / (2.0 * (sq - delta).sqrt()),
        simplified: (delta < sq / 2.0).then(|| SQRT_2 * delta / (2.0 * lambda_abs)),
    })
}

/// Phase error `2 delta / (|lambda_k| |lambda_j|)` of `lambda_j`, propagated
/// from a real positive `lambda_k`; `None` unless `delta < |lambda_j| |lambda_k|`.
pub fn spectrum_phase_bound(delta: f64, lambda_k_abs: f64, lambda_j_abs: f64) -> Option<f64> {
    let p = lambda_k_abs * lambda_j_abs;
    (delta < p).then(|| 2.0 * delta / p)
}

/// Total spectrum error with the phase propagated from the largest
/// eigenvalue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TotalBound {
    pub bound: f64,
    /// `5 sqrt(2) delta / (2 m)` for `delta <= m^2 / 2`.
    pub simplified: Option<f64>,
}

/// `(2 sqrt(2) / m + 1 / (2 sqrt(m^2 - delta))) delta` with
/// `m = ||lambda||_{-inf}`; `None` unless `delta < m^2`.
pub fn spectrum_total_bound(delta: f64, lambda_min_abs: f64) -> Option<TotalBound> {
    let m = lambda_min_abs;
    (delta < m * m).then(|| TotalBound {
        bound: (2.0 * SQRT_2 / m + 1.0 / (2.0 * (m * m - delta).sqrt())) * delta,
        simplified: (delta <= m * m / 2.0).then(|| 5.0 * SQRT_2 * delta / (2.0 * m)),
    })
}

/// `eps / (2 |psi_j| sqrt(|y_j|^2 |psi_j|^2 - eps))`; `None` unless
/// `eps < |y_j|^2 |psi_j|^2`.
pub fn signal_magnitude_bound(eps: f64, y_abs: f64, psi_abs: f64) -> Option<f64> {
    let c2 = (y_abs * psi_abs).powi(2);
    (eps < c2).then(|| eps / (2.0 * psi_abs * (c2 - eps).sqrt()))
}

/// `2 eps / (|y_k| |y_j| |psi_k| |psi_j|)`; `None` unless `eps` is below
/// the denominator.
pub fn signal_phase_bound(eps: f64, ck_abs: f64, cj_abs: f64) -> Option<f64> {
    let p = ck_abs * cj_abs;
    (eps < p).then(|| 2.0 * eps / p)
}

/// Error bounds for the transformed signal and the signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalBound {
    pub transformed: f64,
    pub signal: f64,
}

/// `None` unless `eps < ||y||_{-inf}^2 ||psi||_{-inf}^2`. `s_inv_one_norm`
/// is the largest absolute column sum of `S^{-1}`.
pub fn signal_error_bound(eps: f64, y: &[Complex64], psi: &[Complex64], s_inv_one_norm: f64) -> Option<SignalBound> {
    let (y_max, y_min) = (vec_inf_norm(y), vec_min_modulus(y));
    let (p_max, p_min) = (vec_inf_norm(psi), vec_min_modulus(psi));
    let floor = (y_min * p_min).powi(2);
    if !(eps < floor) {
        return None;
    }
    let factor = 2.0 * SQRT_2 * y_max * p_max / floor + 1.0 / (2.0 * p_min * (floor - eps).sqrt());
    Some(SignalBound {
        transformed: factor * eps,
        signal: factor * s_inv_one_norm * eps,
    })
}

/// `(1 + 2 (M - 1)) rho`: phase error after aligning `M` partial spectra
/// along a chain, each accurate to `rho`.
pub fn multi_patch_phase_accumulation(rho: f64, m: usize) -> Result<f64> {
    if m == 0 || rho < 0.0 {
        return Err(Error::Precondition("need M >= 1 and rho >= 0".into()));
    }
    Ok((1 + 2 * (m - 1)) as f64 * rho)
}

/// Bounds, observed errors and precondition flags of one perturbation
/// experiment. Bounds are `None` where their preconditions fail.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub eps: f64,
    pub delta: f64,
    pub bounds: BTreeMap<String, Option<f64>>,
    pub empirical: BTreeMap<String, f64>,
    pub preconditions_met: BTreeMap<String, bool>,
}

impl SensitivityReport {
    pub fn new(eps: f64, delta: f64) -> Self {
        Self {
            eps,
            delta,
            ..Self::default()
        }
    }

    pub fn record(&mut self, id: &str, bound: Option<f64>, empirical: f64) {
        self.preconditions_met.insert(id.into(), bound.is_some());
        self.bounds.insert(id.into(), bound);
        self.empirical.insert(id.into(), empirical);
    }

    /// `empirical / bound` for entries whose preconditions hold.
    pub fn ratios(&self) -> BTreeMap<String, f64> {
        self.bounds
            .iter()
            .filter_map(|(id, b)| b.map(|b| (id.clone(), ratio(self.empirical[id], b))))
            .collect()
    }

    /// Entries exceeding their bound beyond rounding.
    pub fn violations(&self) -> Vec<String> {
        self.ratios()
            .into_iter()
            .filter(|(_, r)| *r > 1.0 + ROUNDING_SLACK)
            .map(|(id, _)| id)
            .collect()
    }
}

fn ratio(empirical: f64, bound: f64) -> f64 {
    if bound > 0.0 {
        empirical / bound
    } else if empirical <= 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn largest(values: impl Iterator<Item = f64>) -> usize {
    values
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map_or(0, |(i, _)| i)
}

/// Perturbation analysis of the spectrum estimator: moduli from the
/// diagonal of `tilde` (the perturbed table of `lambda_j conj(lambda_k)`),
/// phases propagated from the estimated largest element. The truth is
/// gauged so that the same element is real positive.
pub fn spectrum_report(lambda: &[Complex64], tilde: &CMatrix, delta: f64) -> SensitivityReport {
    let d = lambda.len();
    let mut rep = SensitivityReport::new(0.0, delta);
    let moduli: Vec<f64> = (0..d).map(|j| tilde[(j, j)].norm().sqrt()).collect();
    let k = largest(moduli.iter().copied());
    let gauge = Complex64::from_polar(1.0, -lambda[k].arg());
    let truth: Vec<Complex64> = lambda.iter().map(|z| z * gauge).collect();
    let est: Vec<Complex64> = (0..d)
        .map(|j| {
            if j == k {
                Complex64::new(moduli[j], 0.0)
            } else {
                Complex64::from_polar(moduli[j], tilde[(j, k)].arg())
            }
        })
        .collect();

    // worst ratio over the components, each against its own bound
    let worst = |id: &str, parts: Vec<(f64, Option<f64>)>, rep: &mut SensitivityReport| {
        if parts.iter().any(|p| p.1.is_none()) {
            rep.record(id, None, parts.iter().map(|p| p.0).fold(0.0, f64::max));
            return;
        }
        let (e, b) = parts
            .into_iter()
            .map(|(e, b)| (e, b.expect("checked")))
            .max_by(|x, y| ratio(x.0, x.1).total_cmp(&ratio(y.0, y.1)))
            .unwrap_or((0.0, 0.0));
        rep.record(id, Some(b), e);
    };
    let mags = (0..d)
        .map(|j| {
            let b = spectrum_magnitude_bound(delta, truth[j].norm()).map(|m| m.bound);
            ((moduli[j] - truth[j].norm()).abs(), b)
        })
        .collect();
    worst("spectrum-magnitude", mags, &mut rep);
    let phases = (0..d)
        .filter(|&j| j != k)
        .map(|j| {
            let e = wrap_phase(est[j].arg() - truth[j].arg()).abs();
            (e, spectrum_phase_bound(delta, truth[k].norm(), truth[j].norm()))
        })
        .collect();
    worst("spectrum-phase", phases, &mut rep);
    let err = (0..d).map(|j| (est[j] - truth[j]).norm()).fold(0.0, f64::max);
    let total = spectrum_total_bound(delta, vec_min_modulus(lambda));
    rep.record("spectrum-total", total.map(|t| t.bound), err);
    rep.record("spectrum-total-simplified", total.and_then(|t| t.simplified), err);
    rep
}

/// Perturbation analysis of the transformed-signal estimator: `|y_j|` from
/// the diagonal of `tilde` (the perturbed table of `c_j conj(c_k)` with
/// `c = conj(y) psi`), phases propagated from the coefficient estimated
/// largest, which is taken real positive in both estimate and truth.
pub fn signal_report(y: &[Complex64], psi: &[Complex64], s_inv: &CMatrix, tilde: &CMatrix, eps: f64) -> SensitivityReport {
    let d = y.len();
    let mut rep = SensitivityReport::new(eps, 0.0);
    let c: Vec<Complex64> = y.iter().zip(psi).map(|(y, p)| y.conj() * p).collect();
    let c_mod: Vec<f64> = (0..d).map(|j| tilde[(j, j)].norm().sqrt()).collect();
    let k = largest(c_mod.iter().copied());
    // c -> c e^{-i arg c_k} means y -> y e^{i arg c_k}
    let gauge = Complex64::from_polar(1.0, c[k].arg());
    let y_true: Vec<Complex64> = y.iter().map(|z| z * gauge).collect();
    let c_true: Vec<Complex64> = c.iter().map(|z| z / gauge).collect();
    let c_est: Vec<Complex64> = (0..d)
        .map(|j| {
            if j == k {
                Complex64::new(c_mod[j], 0.0)
            } else {
                Complex64::from_polar(c_mod[j], tilde[(j, k)].arg())
            }
        })
        .collect();
    let y_est: Vec<Complex64> = c_est.iter().zip(psi).map(|(c, p)| (c / p).conj()).collect();

    let mut mag_parts = Vec::new();
    for j in 0..d {
        let e = (y_est[j].norm() - y_true[j].norm()).abs();
        mag_parts.push((e, signal_magnitude_bound(eps, y[j].norm(), psi[j].norm())));
    }
    let mut phase_parts = Vec::new();
    for j in (0..d).filter(|&j| j != k) {
        let e = wrap_phase(y_est[j].arg() - y_true[j].arg()).abs();
        phase_parts.push((e, signal_phase_bound(eps, c_true[k].norm(), c_true[j].norm())));
    }
    for (id, parts) in [("signal-magnitude", mag_parts), ("signal-phase", phase_parts)] {
        if parts.iter().any(|p| p.1.is_none()) {
            rep.record(id, None, parts.iter().map(|p| p.0).fold(0.0, f64::max));
            continue;
        }
        let (e, b) = parts
            .into_iter()
            .map(|(e, b)| (e, b.expect("checked")))
            .max_by(|x, z| ratio(x.0, x.1).total_cmp(&ratio(z.0, z.1)))
            .unwrap_or((0.0, 0.0));
        rep.record(id, Some(b), e);
    }
    let bound = signal_error_bound(eps, y, psi, one_norm(s_inv));
    let y_err = (0..d).map(|j| (y_est[j] - y_true[j]).norm()).fold(0.0, f64::max);
    let s_inv_adj = s_inv.adjoint();
    let to_x = |v: &[Complex64]| -> Vec<Complex64> {
        (0..d).map(|i| (0..d).map(|j| s_inv_adj[(i, j)] * v[j]).sum()).collect()
    };
    let (x_est, x_true) = (to_x(&y_est), to_x(&y_true));
    let x_err = (0..d).map(|j| (x_est[j] - x_true[j]).norm()).fold(0.0, f64::max);
    rep.record("transformed-signal-total", bound.map(|b| b.transformed), y_err);
    rep.record("signal-total", bound.map(|b| b.signal), x_err);
    rep
}

/// Aggregate of one Monte Carlo bound check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub id: String,
    /// Trials whose preconditions held and were compared with the bound.
    pub trials: usize,
    pub skipped: usize,
    pub violations: usize,
    pub max_ratio: f64,
    /// Trial index (RNG stream under the run seed) of the largest ratio.
    pub worst_trial: Option<u64>,
    pub first_violation: Option<u64>,
}

impl CheckSummary {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// One trial: `Some(ratios)` with one observed/bound ratio per checked
/// inequality, or `None` when the preconditions fail.
type Trial = fn(&mut ChaCha8Rng, Option<f64>) -> Option<Vec<f64>>;

/// A checker id with its trial function.
pub struct BoundCheck {
    pub id: &'static str,
    trial: Trial,
}

/// Runs `check` until `target` precondition-satisfying trials have been
/// compared or `20 * target` have been drawn. Trial `t` draws from
/// `stream_rng(seed, t)`; results are independent of the thread count.
/// `size` fixes the perturbation (`eps`, `delta` or `rho`) instead of
/// drawing it log-uniformly.
pub fn run_check(check: &BoundCheck, seed: u64, target: usize, size: Option<f64>) -> CheckSummary {
    let mut summary = CheckSummary {
        id: check.id.into(),
        trials: 0,
        skipped: 0,
        violations: 0,
        max_ratio: 0.0,
        worst_trial: None,
        first_violation: None,
    };
    let limit = 20 * target as u64;
    let mut next = 0u64;
    while summary.trials < target && next < limit {
        let batch = ((target - summary.trials) as u64 * 2).max(64).min(limit - next);
        let outcomes: Vec<(u64, Option<Vec<f64>>)> = (next..next + batch)
            .into_par_iter()
            .map(|t| (t, (check.trial)(&mut stream_rng(seed, t), size)))
            .collect();
        next += batch;
        for (t, out) in outcomes {
            if summary.trials >= target {
                break;
            }
            let Some(ratios) = out else {
                summary.skipped += 1;
                continue;
            };
            summary.trials += 1;
            let r = ratios.into_iter().fold(0.0, f64::max);
            if r > summary.max_ratio || summary.worst_trial.is_none() {
                summary.max_ratio = r;
                summary.worst_trial = Some(t);
            }
            if r > 1.0 + ROUNDING_SLACK {
                summary.violations += 1;
                summary.first_violation.get_or_insert(t);
            }
        }
    }
    summary
}

/// Every checker, in reporting order.
pub fn all_checks() -> Vec<BoundCheck> {
    vec![
        BoundCheck { id: "vandermonde-norms", trial: trial_vandermonde_norms },
        BoundCheck { id: "elementary-symmetric-sum", trial: trial_elementary_symmetric },
        BoundCheck { id: "inverse-vandermonde-norm", trial: trial_inverse_vandermonde },
        BoundCheck { id: "hankel-singular-values", trial: trial_hankel_singular_values },
        BoundCheck { id: "weighted-kernel-residual", trial: trial_weighted_kernel_residual },
        BoundCheck { id: "kernel-residual", trial: trial_kernel_residual },
        BoundCheck { id: "coefficient-error", trial: trial_coefficient_error },
        BoundCheck { id: "coefficient-error-perturbed-bases", trial: trial_coefficient_error_perturbed },
        BoundCheck { id: "spectrum-magnitude", trial: |r, f| spectrum_trial(r, f, "spectrum-magnitude") },
        BoundCheck { id: "spectrum-phase", trial: |r, f| spectrum_trial(r, f, "spectrum-phase") },
        BoundCheck { id: "spectrum-total", trial: |r, f| spectrum_trial(r, f, "spectrum-total") },
        BoundCheck { id: "signal-magnitude", trial: |r, f| signal_trial(r, f, "signal-magnitude") },
        BoundCheck { id: "signal-phase", trial: |r, f| signal_trial(r, f, "signal-phase") },
        BoundCheck { id: "signal-total", trial: |r, f| signal_trial(r, f, "signal-total") },
        BoundCheck { id: "patch-phase-accumulation", trial: trial_phase_accumulation },
    ]
}

pub fn run_all_checks(seed: u64, target: usize, size: Option<f64>) -> Vec<CheckSummary> {
    all_checks().iter().map(|c| run_check(c, seed, target, size)).collect()
}

// ---- random draws ----

fn polar<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> Complex64 {
    Complex64::from_polar(rng.random_range(lo..=hi), rng.random_range(-PI..PI))
}

/// Bases per the usual Prony test regime, `|beta| ~ U[1/2, 1]`, with the
/// separation kept above `min_sep`.
fn draw_bases<R: Rng + ?Sized>(rng: &mut R, k: usize, min_sep: f64) -> Option<Vec<Complex64>> {
    for _ in 0..100 {
        let beta: Vec<Complex64> = (0..k).map(|_| polar(rng, 0.5, 1.0)).collect();
        if k == 1 || conditioning_profile(&beta).sigma >= min_sep {
            return Some(beta);
        }
    }
    None
}

/// A point uniform in the closed disk of radius `r`; a quarter of the draws
/// sit on the boundary, where the bounds are tightest.
fn disk<R: Rng + ?Sized>(rng: &mut R, r: f64) -> Complex64 {
    let m = if rng.random_bool(0.25) { r } else { r * rng.random::<f64>().sqrt() };
    Complex64::from_polar(m, rng.random_range(-PI..PI))
}

/// Log-uniform on `[lo, hi)` unless `fixed`; the draw is made either way
/// so the remaining stream does not depend on `fixed`.
fn size<R: Rng + ?Sized>(rng: &mut R, fixed: Option<f64>, lo: f64, hi: f64) -> f64 {
    let drawn = rng.random_range(lo.ln()..hi.ln()).exp();
    fixed.unwrap_or(drawn)
}

// ---- trials ----

fn trial_vandermonde_norms(rng: &mut ChaCha8Rng, _fixed: Option<f64>) -> Option<Vec<f64>> {
    let k = rng.random_range(1..=6);
    let l = rng.random_range(k..=4 * k + 1);
    let beta: Vec<Complex64> = (0..k).map(|_| polar(rng, 0.2, 1.3)).collect();
    let v = build_vandermonde(&beta, l);
    let (b_inf, b_one, b_two) = vandermonde_norm_bounds(conditioning_profile(&beta).rho, l, k);
    Some(vec![inf_norm(&v) / b_inf, one_norm(&v) / b_one, spectral_norm(&v) / b_two])
}

fn trial_elementary_symmetric(rng: &mut ChaCha8Rng, _fixed: Option<f64>) -> Option<Vec<f64>> {
    let k = rng.random_range(1..=8);
    let beta: Vec<Complex64> = (0..k).map(|_| polar(rng, 0.0, 2.0)).collect();
    let s = elementary_symmetric(&beta, None).ok()?;
    let total: f64 = s.iter().map(|z| z.norm()).sum();
    Some(vec![total / conditioning_profile(&beta).pi])
}

fn trial_inverse_vandermonde(rng: &mut ChaCha8Rng, _fixed: Option<f64>) -> Option<Vec<f64>> {
    let k = rng.random_range(1..=7);
    let beta: Vec<Complex64> = (0..k).map(|_| polar(rng, 0.1, 1.5)).collect();
    let p = conditioning_profile(&beta);
    if k > 1 && p.sigma < 1e-3 {
        return None;
    }
    let inv = invert_square_vandermonde(&beta).ok()?;
    Some(vec![inf_norm(&inv) / p.inverse_vandermonde_bound(k)])
}

/// Exact and perturbed samples of a random sum with `L > 2K`.
struct NoisyProny {
    k: usize,
    l: usize,
    eta: Vec<Complex64>,
    beta: Vec<Complex64>,
    h: Vec<Complex64>,
    noisy: Vec<Complex64>,
    eps: f64,
}

fn draw_noisy_prony(rng: &mut ChaCha8Rng, fixed: Option<f64>) -> Option<NoisyProny> {
    let k = rng.random_range(1..=5);
    let l = rng.random_range(2 * k + 1..=5 * k + 1);
    let beta = draw_bases(rng, k, 0.05)?;
    let eta: Vec<Complex64> = (0..k).map(|_| polar(rng, 0.125, 1.0)).collect();
    let h = evaluate(&ExponentialSum::new(eta.clone(), beta.clone()).ok()?, l);
    let eps = size(rng, fixed, 1e-10, 1e-1);
    let noisy = h.iter().map(|v| v + disk(rng, eps)).collect();
    Some(NoisyProny {
        k,
        l,
        eta,
        beta,
        h,
        noisy,
        eps,
    })
}

fn trial_hankel_singular_values(rng: &mut ChaCha8Rng, fixed: Option<f64>) -> Option<Vec<f64>> {
    let s = draw_noisy_prony(rng, fixed)?;
    let h = build_hankel(&s.h, s.k).ok()?.matrix;
    let ht = build_hankel(&s.noisy, s.k).ok()?.matrix;
    let e = &ht - &h;
    let e_norm = spectral_norm(&e);
    let (sv, svt) = (singular_values(&h), singular_values(&ht));
    let shift = sv.iter().zip(&svt).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let b = hankel_error_norm_bound(s.eps, s.l, s.k).ok()?;
    Some(vec![ratio(shift, e_norm), e_norm / b.tight, b.tight / b.loose])
}

/// Perturbed kernel polynomial evaluated at the true bases, with
/// `sigma_K~`, `||E||_2` and the exact `sigma_{K-1}`. Trials where the
/// exact nonzero singular values do not dominate `2 ||E||_2` are skipped.
fn kernel_residuals(s: &NoisyProny) -> Option<(Vec<Complex64>, f64, f64, f64)> {
    let h = build_hankel(&s.h, s.k).ok()?;
    let ht = build_hankel(&s.noisy, s.k).ok()?;
    let e_norm = spectral_norm(&(&ht.matrix - &h.matrix));
    let sigma_exact = singular_values(&h.matrix)[s.k - 1];
    if sigma_exact < 2.0 * e_norm {
        return None;
    }
    let kv = kernel_vector(&ht).ok()?;
    let p = s.beta.iter().map(|b| polynomial_eval(&kv.gamma, *b)).collect();
    Some((p, kv.sigma_min, e_norm, sigma_exact))
}

fn trial_weighted_kernel_residual(rng: &mut ChaCha8Rng, fixed: Option<f64>) -> Option<Vec<f64>> {
    let s = draw_noisy_prony(rng, fixed)?;
    let (p, sigma_t, e_norm, _) = kernel_residuals(&s)?;
    let lhs: f64 = s.eta.iter().zip(&p).map(|(e, v)| e.norm_sqr() * v.norm_sqr()).sum();
    let prof = conditioning_profile(&s.beta);
    Some(vec![ratio(lhs, weighted_kernel_residual_bound(&prof, s.k, s.l, sigma_t, e_norm))])
}

fn trial_kernel_residual(rng: &mut ChaCha8Rng, fixed: Option<f64>) -> Option<Vec<f64>> {
    let s = draw_noisy_prony(rng, fixed)?;
    let (p, sigma_t, e_norm, sigma_exact) = kernel_residuals(&s)?;
    let lhs: f64 = p.iter().map(|v| v.norm_sqr()).sum();
    let rho = conditioning_profile(&s.beta).rho;
    Some(vec![ratio(lhs, kernel_residual_bound(rho, s.k, s.l, sigma_t, e_norm, sigma_exact))])
}

fn coefficient_setup(rng: &mut ChaCha8Rng, fixed: Option<f64>) -> Option<(Vec<Complex64>, Vec<Complex64>, Vec<Complex64>, f64, usize)> {
    let k = rng.random_range(1..=6);
    let l = rng.random_range(k..=4 * k + 1);
    let beta = draw_bases(rng, k, 0.05)?;
    let eta: Vec<Complex64> = (0..k).map(|_| polar(rng, 0.125, 1.0)).collect();
    let h = evaluate(&ExponentialSum::new(eta.clone(), beta.clone()).ok()?, l);
    let eps = size(rng, fixed, 1e-8, 1e-2);
    Some((beta, eta, h, eps, l))
}

fn trial_coefficient_error(rng: &mut ChaCha8Rng, fixed: Option<f64>) -> Option<Vec<f64>> {
    let (beta, eta, h, eps, _) = coefficient_setup(rng, fixed)?;
    let noisy: Vec<Complex64> = h.iter().map(|v| v + disk(rng, eps)).collect();
    let (fit, _) = fit_coefficients(&beta, &noisy).ok()?;
    let err = fit.iter().zip(&eta).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    let bound = coefficient_error_bound(eps, &conditioning_profile(&beta), beta.len()).ok()?;
    Some(vec![ratio(err, bound)])
}

fn trial_coefficient_error_perturbed(rng: &mut ChaCha8Rng, fixed: Option<f64>) -> Option<Vec<f64>> {
    let (beta, eta, h, eps, l) = coefficient_setup(rng, fixed)?;
    let sigma = conditioning_profile(&beta).sigma;
    let cap = if beta.len() > 1 { sigma / 2.0 } else { 0.5 };
    let delta = size(rng, fixed, 1e-8, 1e-2);
    if delta >= cap {
        return None;
    }
    let beta_t: Vec<Complex64> = beta.iter().map(|b| b + disk(rng, delta)).collect();
    let noisy: Vec<Complex64> = h.iter().map(|v| v + disk(rng, eps)).collect();
    let (fit, _) = fit_coefficients(&beta_t, &noisy).ok()?;
    let err = fit.iter().zip(&eta).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    let h_inf = vec_inf_norm(&h);
    let bound = coefficient_error_bound_perturbed_bases(eps, delta, &beta, l, h_inf).ok()?;
    Some(vec![ratio(err, bound)])
}

/// Outer-product table `v_j conj(v_k)` with every entry moved by at most `r`.
fn perturbed_table(rng: &mut ChaCha8Rng, v: &[Complex64], r: f64) -> CMatrix {
    let d = v.len();
    CMatrix::from_fn(d, d, |j, k| v[j] * v[k].conj() + disk(rng, r))
}

fn spectrum_trial(rng: &mut ChaCha8Rng, fixed: Option<f64>, id: &str) -> Option<Vec<f64>> {
    let d = rng.random_range(2..=4);
    let lambda: Vec<Complex64> = (0..d).map(|_| polar(rng, 0.5, 1.0)).collect();
    let delta = size(rng, fixed, 1e-8, 0.3);
    let tilde = perturbed_table(rng, &lambda, delta);
    let rep = spectrum_report(&lambda, &tilde, delta);
    let b = rep.bounds[id]?;
    Some(vec![ratio(rep.empirical[id], b)])
}

fn signal_trial(rng: &mut ChaCha8Rng, fixed: Option<f64>, id: &str) -> Option<Vec<f64>> {
    let d = rng.random_range(2..=4);
    let y: Vec<Complex64> = (0..d).map(|_| polar(rng, 0.5, 1.0)).collect();
    let psi: Vec<Complex64> = (0..d).map(|_| polar(rng, 0.5, 1.0)).collect();
    let s_inv = CMatrix::from_fn(d, d, |i, j| polar(rng, 0.0, 0.3) + if i == j { 1.0 } else { 0.0 });
    let c: Vec<Complex64> = y.iter().zip(&psi).map(|(y, p)| y.conj() * p).collect();
    let eps = size(rng, fixed, 1e-8, 0.1);
    let tilde = perturbed_table(rng, &c, eps);
    let rep = signal_report(&y, &psi, &s_inv, &tilde, eps);
    let ids: &[&str] = if id == "signal-total" { &["transformed-signal-total", "signal-total"] } else { &[id] };
    let mut out = Vec::new();
    for id in ids {
        out.push(ratio(rep.empirical[*id], rep.bounds[*id]?));
    }
    Some(out)
}

/// A chain of `M` partial spectra sharing one element with their
/// predecessor. Each carries its own unknown rotation and phase errors of
/// at most `rho`; aligning along the chain accumulates the errors.
fn trial_phase_accumulation(rng: &mut ChaCha8Rng, fixed: Option<f64>) -> Option<Vec<f64>> {
    let m = rng.random_range(1..=8);
    let rho = size(rng, fixed, 1e-6, 0.1);
    let error = |rng: &mut ChaCha8Rng| -> f64 {
        if rng.random_bool(0.3) {
            if rng.random_bool(0.5) {
                rho
            } else {
                -rho
            }
        } else {
            rng.random_range(-rho..=rho)
        }
    };
    // patch i covers elements i*(w-1) ..= i*(w-1) + w - 1
    let w = rng.random_range(2..=4);
    let n = (m - 1) * (w - 1) + w;
    let truth: Vec<f64> = (0..n).map(|_| rng.random_range(-PI..PI)).collect();
    let mut aligned: Vec<Option<f64>> = vec![None; n];
    let mut worst: f64 = 0.0;
    for i in 0..m {
        let start = i * (w - 1);
        let rotation = if i == 0 { 0.0 } else { rng.random_range(-PI..PI) };
        let local: Vec<f64> = (start..start + w).map(|k| truth[k] + rotation + error(rng)).collect();
        let shift = match aligned[start] {
            Some(a) if i > 0 => a - local[0],
            _ => 0.0,
        };
        for (o, k) in (start..start + w).enumerate() {
            let v = local[o] + shift;
            worst = worst.max(wrap_phase(v - truth[k]).abs());
            if aligned[k].is_none() {
                aligned[k] = Some(v);
            }
        }
    }
    let bound = multi_patch_phase_accumulation(rho, m).ok()?;
    Some(vec![ratio(worst, bound)])
}

/// `(id, trials, skipped, violations, max_ratio)` rows.
pub fn write_summary_csv<W: std::io::Write>(summaries: &[CheckSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "trials", "skipped", "violations", "max_ratio", "worst_trial", "first_violation"])?;
    for s in summaries {
        w.write_record([
            s.id.clone(),
            s.trials.to_string(),
            s.skipped.to_string(),
            s.violations.to_string(),
            format!("{:.6e}", s.max_ratio),
            s.worst_trial.map_or(String::new(), |t| t.to_string()),
            s.first_violation.map_or(String::new(), |t| t.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn hankel_bound_examples() {
        let b = hankel_error_norm_bound(1.0, 3, 1).unwrap();
        assert!((b.tight - 2.0).abs() < 1e-15);
        assert!((b.loose - 2.0).abs() < 1e-15);
        let z = hankel_error_norm_bound(0.0, 9, 3).unwrap();
        assert_eq!((z.tight, z.loose), (0.0, 0.0));
        assert!(hankel_error_norm_bound(1.0, 4, 2).is_err());
    }

    #[test]
    fn coefficient_bound_single_base() {
        let p = conditioning_profile(&[c(0.5, 0.0)]);
        assert!((coefficient_error_bound(2.0, &p, 1).unwrap() - 1.5 * 2.0).abs() < 1e-15);
        assert_eq!(coefficient_error_bound(0.0, &p, 1).unwrap(), 0.0);
    }

    #[test]
    fn perturbed_bases_bound_reduces_to_exact_bases() {
        let beta = [c(0.9, 0.1), c(-0.2, 0.7), c(0.3, -0.6)];
        let p = conditioning_profile(&beta);
        let a = coefficient_error_bound_perturbed_bases(1e-3, 0.0, &beta, 9, 2.0).unwrap();
        let b = coefficient_error_bound(1e-3, &p, 3).unwrap();
        assert!((a - b).abs() <= 1e-14 * b);
        assert!(coefficient_error_bound_perturbed_bases(1e-3, p.sigma, &beta, 9, 2.0).is_err());
    }

    #[test]
    fn perturbed_bases_bound_by_hand() {
        // K = 1, L = 2, beta = 1/2, delta = 1/10, eps = 0, |h| = 1:
        // pi~ = 1.6, rho~ = 1, factor sqrt(2) * 2 * 1 * 0.1 * 1.5 * 1
        let v = coefficient_error_bound_perturbed_bases(0.0, 0.1, &[c(0.5, 0.0)], 2, 1.0).unwrap();
        let expect = 1.6 * (SQRT_2 * 2.0 * 0.1 * 1.5);
        assert!((v - expect).abs() < 1e-14);
    }

    #[test]
    fn spectrum_bounds_examples() {
        let m = spectrum_magnitude_bound(0.1, 1.0).unwrap();
        assert!((m.bound - 0.1 / (2.0 * 0.9f64.sqrt())).abs() < 1e-15);
        assert!((m.simplified.unwrap() - SQRT_2 * 0.05).abs() < 1e-15);
        assert!(spectrum_magnitude_bound(1.0, 1.0).is_none());
        assert!(spectrum_magnitude_bound(0.6, 1.0).unwrap().simplified.is_none());
        assert!((spectrum_phase_bound(0.1, 0.5, 0.8).unwrap() - 0.5).abs() < 1e-15);
        assert!(spectrum_phase_bound(0.5, 0.5, 0.8).is_none());
        // delta = m^2 / 2 gives the simplified form exactly
        let t = spectrum_total_bound(0.125, 0.5).unwrap();
        assert!((t.simplified.unwrap() - 5.0 * SQRT_2 * 0.125 / 1.0).abs() < 1e-15);
        assert!(t.simplified.unwrap() >= t.bound);
        assert!(spectrum_total_bound(0.3, 0.5).is_none());
    }

    #[test]
    fn bounds_vanish_with_the_perturbation() {
        assert_eq!(spectrum_magnitude_bound(0.0, 0.7).unwrap().bound, 0.0);
        assert_eq!(spectrum_total_bound(0.0, 0.7).unwrap().bound, 0.0);
        let y = [c(0.6, 0.2), c(-0.5, 0.5)];
        let psi = [c(1.0, 0.0), c(0.0, 0.8)];
        assert_eq!(signal_error_bound(0.0, &y, &psi, 1.0).unwrap().signal, 0.0);
    }

    #[test]
    fn identity_basis_signal_bound_equals_transformed_bound() {
        let y = [c(0.6, 0.2), c(-0.5, 0.5), c(0.9, 0.0)];
        let psi = [c(1.0, 0.0), c(0.0, 0.8), c(0.6, 0.6)];
        let b = signal_error_bound(1e-4, &y, &psi, 1.0).unwrap();
        assert_eq!(b.signal, b.transformed);
        assert!(signal_error_bound(1.0, &y, &psi, 1.0).is_none());
    }

    #[test]
    fn accumulation_examples() {
        assert_eq!(multi_patch_phase_accumulation(0.3, 1).unwrap(), 0.3);
        assert!((multi_patch_phase_accumulation(0.01, 3).unwrap() - 0.05).abs() < 1e-15);
        assert!(multi_patch_phase_accumulation(0.1, 0).is_err());
    }

    #[test]
    fn exact_tables_give_zero_error() {
        let lambda = [c(0.9, 0.1), c(-0.3, 0.6), c(0.2, -0.7)];
        let t = CMatrix::from_fn(3, 3, |j, k| lambda[j] * lambda[k].conj());
        let rep = spectrum_report(&lambda, &t, 1e-12);
        for (id, e) in &rep.empirical {
            assert!(*e < 1e-14, "{id}: {e}");
        }
        assert!(rep.violations().is_empty());
    }

    #[test]
    fn report_entries_are_consistent() {
        let mut rng = stream_rng(5, 0);
        let y: Vec<Complex64> = (0..3).map(|_| polar(&mut rng, 0.5, 1.0)).collect();
        let psi: Vec<Complex64> = (0..3).map(|_| polar(&mut rng, 0.5, 1.0)).collect();
        let c: Vec<Complex64> = y.iter().zip(&psi).map(|(y, p)| y.conj() * p).collect();
        let s_inv = CMatrix::identity(3, 3);
        let tilde = perturbed_table(&mut rng, &c, 1e-3);
        let rep = signal_report(&y, &psi, &s_inv, &tilde, 1e-3);
        assert_eq!(rep.bounds.len(), rep.empirical.len());
        assert_eq!(rep.bounds.len(), rep.preconditions_met.len());
        for (id, b) in &rep.bounds {
            assert_eq!(b.is_some(), rep.preconditions_met[id]);
        }
        // far beyond the preconditions every bound is withheld
        let rep = signal_report(&y, &psi, &s_inv, &tilde, 10.0);
        assert!(rep.preconditions_met.values().all(|m| !m));
        assert!(rep.violations().is_empty());
    }

    #[test]
    fn checks_are_deterministic() {
        let check = &all_checks()[0];
        let a = run_check(check, 11, 50, None);
        let b = run_check(check, 11, 50, None);
        assert_eq!(a, b);
        assert_eq!(a.trials, 50);
    }

    #[test]
    fn oversized_perturbations_are_skipped() {
        let checks = all_checks();
        let total = checks.iter().find(|c| c.id == "spectrum-total").unwrap();
        let s = run_check(total, 2, 20, Some(10.0));
        assert_eq!(s.trials, 0);
        assert_eq!(s.skipped, 400);
        assert!(s.passed());
    }

    #[test]
    fn summary_csv_has_a_row_per_check() {
        let s = vec![run_check(&all_checks()[1], 1, 10, None)];
        let mut buf = Vec::new();
        write_summary_csv(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("id,trials"));
    }

    proptest! {
        #[test]
        fn bounds_are_monotone_in_the_perturbation(a in 1e-6f64..0.2, b in 1e-6f64..0.2, m in 0.5f64..1.0, n in 0.5f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            if let (Some(x), Some(y)) = (spectrum_magnitude_bound(lo, m), spectrum_magnitude_bound(hi, m)) {
                prop_assert!(x.bound <= y.bound);
            }
            if let (Some(x), Some(y)) = (spectrum_phase_bound(lo, m, n), spectrum_phase_bound(hi, m, n)) {
                prop_assert!(x <= y);
            }
            if let (Some(x), Some(y)) = (spectrum_total_bound(lo, m), spectrum_total_bound(hi, m)) {
                prop_assert!(x.bound <= y.bound);
            }
            if let (Some(x), Some(y)) = (signal_magnitude_bound(lo, m, n), signal_magnitude_bound(hi, m, n)) {
                prop_assert!(x <= y);
            }
            let beta = [Complex64::new(m, 0.0), Complex64::new(-n, 0.1)];
            let p = conditioning_profile(&beta);
            prop_assert!(coefficient_error_bound(lo, &p, 2).unwrap() <= coefficient_error_bound(hi, &p, 2).unwrap());
            if hi < p.sigma / 2.0 {
                let x = coefficient_error_bound_perturbed_bases(1e-3, lo, &beta, 7, 1.0).unwrap();
                let y = coefficient_error_bound_perturbed_bases(1e-3, hi, &beta, 7, 1.0).unwrap();
                prop_assert!(x <= y);
            }
            let h1 = hankel_error_norm_bound(lo, 11, 3).unwrap();
            let h2 = hankel_error_norm_bound(hi, 11, 3).unwrap();
            prop_assert!(h1.tight <= h2.tight && h1.loose <= h2.loose);
            prop_assert!(multi_patch_phase_accumulation(lo, 4).unwrap() <= multi_patch_phase_accumulation(hi, 4).unwrap());
        }
    }
}
