//! Seeded numerical experiments behind the `dynphase` binary.
//!
//! Every run is a pure function of its [`ExperimentConfig`]: trials draw
//! from RNG streams derived from `(seed, trial)`, run in parallel, and are
//! sorted by trial before anything is written, so `results.csv` is
//! byte-identical across runs. Wall-clock timings go to `timings.csv`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::algebra::{dft, max_abs_diff};
use crate::dynamics::{
    add_complex_noise, add_noise, measure, pinned_lowpass_real_instance, random_instance, stream_rng,
    GeneratorOptions, Instance, InstanceKind,
};
use crate::prony::{approximate_prony, evaluate, matched_errors, ExponentialSum};
use crate::recovery::{
    align_at_component, align_global_phase, recover_lowpass_complex, recover_lowpass_real, recover_multi_vector,
    recover_signal_known_system, RecoveryOptions, RecoveryResult,
};
use crate::sensitivity::{all_checks, run_check, CheckSummary, SensitivityReport};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    PronyBench,
    LowpassRealDemo,
    LowpassComplexDemo,
    MultivectorDemo,
    SensitivityCheck,
    Roundtrip,
}

impl std::fmt::Display for Command {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::PronyBench => "prony-bench",
            Self::LowpassRealDemo => "lowpass-real-demo",
            Self::LowpassComplexDemo => "lowpass-complex-demo",
            Self::MultivectorDemo => "multivector-demo",
            Self::SensitivityCheck => "sensitivity-check",
            Self::Roundtrip => "roundtrip",
        };
        f.write_str(s)
    }
}

/// Experiment parameters as read from a config file and flags. Unset
/// fields take per-command defaults in [`ExperimentConfig::resolve`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Option<Command>,
    pub d: Option<usize>,
    /// Number of addends (prony-bench); a single value replaces `k_grid`.
    pub k: Option<usize>,
    /// Samples per sampling vector; for prony-bench replaces `l_factors`.
    pub l: Option<usize>,
    pub trials: Option<usize>,
    pub noise: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Support width of the multi-vector sampling vectors.
    pub window: Option<usize>,
    pub k_grid: Option<Vec<usize>>,
    /// prony-bench sample counts `L = f K + 1`.
    pub l_factors: Option<Vec<usize>>,
    /// Include the fixed six-dimensional instance (lowpass-real-demo).
    pub pinned: Option<bool>,
    /// Gauss-Newton refinement iterations of the recovery pipelines.
    pub polish_iterations: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Fields set in `other` win.
    pub fn merged(mut self, other: ExperimentConfig) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f; } )* };
        }
        take!(command, d, k, l, trials, noise, seed, out, window, k_grid, l_factors, pinned, polish_iterations);
        self
    }

    pub fn resolve(&self, command: Command) -> Result<Resolved> {
        if let Some(c) = self.command {
            if c != command {
                return Err(Error::Config(format!("config is for {c}, not {command}")));
            }
        }
        let d = self.d.unwrap_or(match command {
            Command::MultivectorDemo => 50,
            Command::Roundtrip => 4,
            _ => 6,
        });
        let window = self.window.unwrap_or(4);
        let trials = self.trials.unwrap_or(match command {
            Command::PronyBench => 500,
            Command::LowpassRealDemo | Command::LowpassComplexDemo => 50,
            Command::MultivectorDemo => 1,
            Command::SensitivityCheck => 1000,
            Command::Roundtrip => 20,
        });
        let noise = self.noise.unwrap_or(match command {
            Command::PronyBench => 1e-10,
            _ => 0.0,
        });
        let samples = self.l.unwrap_or(match command {
            Command::MultivectorDemo => 4 * window * window + 1,
            Command::Roundtrip => 2 * d * d + 1,
            _ => 4 * d * d + 1,
        });
        let k_grid = match (self.k, &self.k_grid) {
            (Some(k), _) => vec![k],
            (None, Some(g)) => g.clone(),
            (None, None) => vec![5, 10, 15, 20],
        };
        let l_factors = self.l_factors.clone().unwrap_or_else(|| vec![2, 3, 4, 5, 6, 8, 10]);
        let r = Resolved {
            command,
            d,
            window,
            trials,
            noise,
            seed: self.seed.unwrap_or(0),
            out: self.out.clone().unwrap_or_else(|| PathBuf::from(format!("out/{command}"))),
            samples,
            explicit_samples: self.l.is_some(),
            k_grid,
            l_factors,
            pinned: self.pinned.unwrap_or(true),
            polish_iterations: self.polish_iterations.unwrap_or(RecoveryOptions::default().polish_iterations),
        };
        r.validate()?;
        Ok(r)
    }
}

/// A fully specified run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub command: Command,
    pub d: usize,
    pub window: usize,
    pub trials: usize,
    pub noise: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub samples: usize,
    pub explicit_samples: bool,
    pub k_grid: Vec<usize>,
    pub l_factors: Vec<usize>,
    pub pinned: bool,
    pub polish_iterations: usize,
}

impl Resolved {
    fn validate(&self) -> Result<()> {
        let counts = [("d", self.d), ("trials", self.trials), ("l", self.samples), ("window", self.window)];
        if let Some((name, _)) = counts.iter().find(|c| c.1 == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.k_grid.is_empty() || self.k_grid.contains(&0) {
            return Err(Error::Config("K values must be at least 1".into()));
        }
        if self.l_factors.is_empty() || self.l_factors.iter().any(|&f| f < 2) {
            return Err(Error::Config("L factors must be at least 2 (L > 2K)".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be finite and nonnegative, got {}", self.noise)));
        }
        Ok(())
    }

    fn recovery_options(&self) -> RecoveryOptions {
        RecoveryOptions {
            polish_iterations: self.polish_iterations,
            ..RecoveryOptions::default()
        }
    }

    /// Noise levels of the demos: the configured one, preceded by four
    /// decades below it when positive.
    fn noise_levels(&self) -> Vec<f64> {
        if self.noise == 0.0 {
            vec![0.0]
        } else {
            (0..=4).rev().map(|j| self.noise / 10f64.powi(j)).collect()
        }
    }
}

/// One line of `results.csv`. `seed` regenerates the row's instance
/// (together with `trial` and the label where a stream is shared).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub trial: u64,
    pub seed: u64,
    pub label: String,
    /// `ok`, or the failure message.
    pub status: String,
    /// Aligned with [`ExperimentOutput::columns`]; NaN where not available.
    pub values: Vec<f64>,
    pub runtime_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    /// Written to `plotdata/<name>.dat`.
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// gnuplot commands drawing this file.
    pub script: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub config: Resolved,
    pub columns: Vec<String>,
    pub rows: Vec<ResultRow>,
    pub summary: serde_json::Value,
    pub plots: Vec<PlotData>,
    /// Messages (with seeds) of failures that make the run unsuccessful.
    /// Recovery failures on noisy samples are reported per row and group
    /// only; noise-free ones break a guarantee and land here.
    pub failures: Vec<String>,
}

impl ExperimentOutput {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn results_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["trial".to_string(), "seed".into(), "label".into(), "status".into()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.trial.to_string(), r.seed.to_string(), r.label.clone(), r.status.clone()];
            rec.extend(r.values.iter().map(|v| fmt_value(*v)));
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn timings_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["trial", "label", "runtime_ms"])?;
        for r in &self.rows {
            w.write_record([r.trial.to_string(), r.label.clone(), format!("{:.3}", r.runtime_ms)])?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn gnuplot_script(&self) -> String {
        let mut s = String::from("# gnuplot script; run from the output directory\nset terminal pngcairo size 900,600\nset key outside\n");
        for p in &self.plots {
            let _ = writeln!(s, "\nset output '{}.png'\n{}", p.name, p.script.trim_end());
        }
        s
    }

    /// Writes `results.csv`, `timings.csv`, `summary.json`,
    /// `plotdata/*.dat` and `plot.gp` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("plotdata"))?;
        fs::write(dir.join("results.csv"), self.results_csv()?)?;
        fs::write(dir.join("timings.csv"), self.timings_csv()?)?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.summary)? + "\n")?;
        for p in &self.plots {
            let mut text = format!("# {}\n", p.columns.join(" "));
            for row in &p.rows {
                let cells: Vec<String> = row.iter().map(|v| if v.is_nan() { "NaN".into() } else { format!("{v:e}") }).collect();
                text.push_str(&cells.join(" "));
                text.push('\n');
            }
            fs::write(dir.join("plotdata").join(format!("{}.dat", p.name)), text)?;
        }
        fs::write(dir.join("plot.gp"), self.gnuplot_script())?;
        Ok(())
    }
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:e}")
    }
}

pub fn run(config: &Resolved) -> Result<ExperimentOutput> {
    match config.command {
        Command::PronyBench => prony_bench(config),
        Command::LowpassRealDemo => lowpass_demo(config, false),
        Command::LowpassComplexDemo => lowpass_demo(config, true),
        Command::MultivectorDemo => multivector_demo(config),
        Command::SensitivityCheck => sensitivity_check(config),
        Command::Roundtrip => roundtrip(config),
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed().as_secs_f64() * 1e3)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.retain(|x| !x.is_nan());
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn mean(v: &[f64]) -> f64 {
    let ok: Vec<f64> = v.iter().copied().filter(|x| !x.is_nan()).collect();
    if ok.is_empty() {
        f64::NAN
    } else {
        ok.iter().sum::<f64>() / ok.len() as f64
    }
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().filter(|x| !x.is_nan()).fold(f64::NAN, f64::max)
}

/// Draw of the Prony benchmark: `|eta| ~ U[1/8, 1]`, `|beta| ~ U[1/2, 1]`,
/// uniform phases.
pub fn random_exponential_sum<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Result<ExponentialSum> {
    let mut polar = |lo: f64, hi: f64| {
        Complex64::from_polar(rng.random_range(lo..=hi), rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
    };
    let eta: Vec<Complex64> = (0..k).map(|_| polar(0.125, 1.0)).collect();
    let beta: Vec<Complex64> = (0..k).map(|_| polar(0.5, 1.0)).collect();
    ExponentialSum::new(eta, beta)
}

fn prony_stream(k: usize, trial: u64) -> u64 {
    ((k as u64) << 40) | trial
}

fn noise_stream(level: usize, l: usize, k: usize, trial: u64) -> u64 {
    (1 << 63) | ((level as u64) << 56) | ((l as u64) << 48) | ((k as u64) << 40) | trial
}

/// Mean matched base and coefficient errors of the approximate Prony
/// method over a `(K, L)` grid, noise-free and with noise of modulus up to
/// `noise`. All `L` and noise levels of one `(K, trial)` share the sum.
pub fn prony_bench(cfg: &Resolved) -> Result<ExperimentOutput> {
    let levels: Vec<f64> = if cfg.noise > 0.0 { vec![0.0, cfg.noise] } else { vec![0.0] };
    let mut jobs = Vec::new();
    for &k in &cfg.k_grid {
        let ls: Vec<usize> = if cfg.explicit_samples {
            vec![cfg.samples]
        } else {
            cfg.l_factors.iter().map(|f| f * k + 1).collect()
        };
        for &l in &ls {
            for (li, &eps) in levels.iter().enumerate() {
                for t in 0..cfg.trials as u64 {
                    jobs.push((k, l, li, eps, t));
                }
            }
        }
    }
    let rows: Vec<ResultRow> = jobs
        .par_iter()
        .map(|&(k, l, li, eps, t)| {
            let (res, ms) = timed(|| -> Result<(f64, f64, f64, f64)> {
                let truth = random_exponential_sum(&mut stream_rng(cfg.seed, prony_stream(k, t)), k)?;
                let h = add_complex_noise(&evaluate(&truth, l), eps, &mut stream_rng(cfg.seed, noise_stream(li, l, k, t)));
                let est = approximate_prony(&h, k)?;
                let (eb, ee) = matched_errors(&truth, &est.sum);
                Ok((eb, ee, est.sigma_min, est.kernel_gap))
            });
            let (status, m) = match res {
                Ok(m) => ("ok".to_string(), [m.0, m.1, m.2, m.3]),
                Err(e) => (format!("seed {} K {k} L {l} trial {t}: {e}", cfg.seed), [f64::NAN; 4]),
            };
            ResultRow {
                trial: t,
                seed: cfg.seed,
                label: format!("K={k} L={l} noise={eps:e}"),
                status,
                values: vec![k as f64, l as f64, eps, m[0], m[1], m[2], m[3]],
                runtime_ms: ms,
            }
        })
        .collect();
    let columns = ["K", "L", "noise", "base_err", "coeff_err", "sigma_min", "kernel_gap"]
        .map(String::from)
        .to_vec();

    let mut groups = Vec::new();
    for chunk in rows.chunk_by(|a, b| a.label == b.label) {
        let base: Vec<f64> = chunk.iter().map(|r| r.values[3]).collect();
        let coeff: Vec<f64> = chunk.iter().map(|r| r.values[4]).collect();
        groups.push(json!({
            "K": chunk[0].values[0] as usize,
            "L": chunk[0].values[1] as usize,
            "noise": chunk[0].values[2],
            "trials": chunk.len(),
            "failures": chunk.iter().filter(|r| r.status != "ok").count(),
            "mean_base_err": mean(&base),
            "median_base_err": median(base.clone()),
            "max_base_err": max(&base),
            "mean_coeff_err": mean(&coeff),
        }));
    }

    let mut plots = Vec::new();
    for (li, &eps) in levels.iter().enumerate() {
        for (metric, col) in [("bases", 3usize), ("coefficients", 4)] {
            let tag = if li == 0 { "noise_free" } else { "noisy" };
            let name = format!("prony_{metric}_{tag}");
            let mut columns = vec!["L_over_K".to_string()];
            columns.extend(cfg.k_grid.iter().map(|k| format!("K{k}")));
            let factors: Vec<f64> = if cfg.explicit_samples {
                vec![cfg.samples as f64]
            } else {
                cfg.l_factors.iter().map(|&f| f as f64).collect()
            };
            let mut prow = Vec::new();
            for (fi, &f) in factors.iter().enumerate() {
                let mut line = vec![f];
                for &k in &cfg.k_grid {
                    let l = if cfg.explicit_samples { cfg.samples } else { cfg.l_factors[fi] * k + 1 };
                    let v: Vec<f64> = rows
                        .iter()
                        .filter(|r| r.values[0] as usize == k && r.values[1] as usize == l && r.values[2] == eps)
                        .map(|r| r.values[col])
                        .collect();
                    line.push(mean(&v));
                }
                prow.push(line);
            }
            let mut script = format!(
                "set logscale y\nset xlabel '(L-1)/K'\nset ylabel 'mean max {metric} error'\nset title 'Prony {metric}, noise {eps:e}'\nplot "
            );
            let curves: Vec<String> = cfg
                .k_grid
                .iter()
                .enumerate()
                .map(|(i, k)| format!("'plotdata/{name}.dat' using 1:{} with linespoints title 'K={k}'", i + 2))
                .collect();
            script.push_str(&curves.join(", \\\n     "));
            plots.push(PlotData {
                name,
                columns,
                rows: prow,
                script,
            });
        }
    }

    Ok(ExperimentOutput {
        config: cfg.clone(),
        columns,
        summary: json!({ "command": cfg.command, "config": cfg, "groups": groups }),
        rows,
        plots,
        failures: Vec::new(),
    })
}

struct LowpassOutcome {
    spectrum_err: f64,
    signal_err: f64,
    result: RecoveryResult,
    truth_spectrum: Vec<Complex64>,
    truth_signal: Vec<Complex64>,
}

fn lowpass_trial(inst: &Instance, samples: usize, eps: f64, noise_rng: &mut ChaCha8Rng, complex: bool, opts: &RecoveryOptions) -> Result<LowpassOutcome> {
    let h: Vec<Vec<f64>> = inst
        .measure(samples)?
        .samples
        .iter()
        .map(|h| add_noise(h, eps, noise_rng))
        .collect();
    let phis: Vec<Vec<Complex64>> = inst.sampling.iter().map(|p| p.to_vec()).collect();
    let result = if complex {
        recover_lowpass_complex(&h, &phis, inst.d, opts)?
    } else {
        recover_lowpass_real(&h, &phis, inst.d, opts)?
    };
    let spectrum = result.spectrum.as_ref().ok_or_else(|| Error::Numerical("no spectrum returned".into()))?;
    let signal = result.signal.as_ref().ok_or_else(|| Error::Numerical("no signal returned".into()))?;
    let truth_spectrum = inst.system.spectrum().to_vec();
    Ok(LowpassOutcome {
        spectrum_err: max_abs_diff(spectrum, &truth_spectrum),
        signal_err: align_global_phase(signal, &inst.x, false)?.err_inf,
        result,
        truth_spectrum,
        truth_signal: inst.x.to_vec(),
    })
}

/// Low-pass recovery of fresh seeded instances (instance seed `seed +
/// trial`), preceded for real signals in dimension six by the fixed
/// instance (trial 0, seed column 0). With `noise > 0` the sweep runs over
/// five decades up to `noise`.
pub fn lowpass_demo(cfg: &Resolved, complex: bool) -> Result<ExperimentOutput> {
    let kind = if complex { InstanceKind::LowpassComplex } else { InstanceKind::LowpassReal };
    let with_pinned = !complex && cfg.pinned && cfg.d == 6;
    let offset = u64::from(with_pinned);
    let opts = cfg.recovery_options();
    let levels = cfg.noise_levels();
    let mut jobs = Vec::new();
    for (li, &eps) in levels.iter().enumerate() {
        for t in 0..cfg.trials as u64 + offset {
            jobs.push((li, eps, t));
        }
    }
    let outcomes: Vec<(ResultRow, Option<LowpassOutcome>)> = jobs
        .par_iter()
        .map(|&(li, eps, t)| {
            let pinned = with_pinned && t == 0;
            let seed = if pinned { 0 } else { cfg.seed + t - offset };
            let (res, ms) = timed(|| {
                let inst = if pinned {
                    pinned_lowpass_real_instance()
                } else {
                    random_instance(kind, cfg.d, seed, &GeneratorOptions::default())?
                };
                let mut rng = stream_rng(cfg.seed, ((li as u64) << 32) | t);
                lowpass_trial(&inst, cfg.samples, eps, &mut rng, complex, &opts)
            });
            let (status, errs) = match &res {
                Ok(o) => ("ok".to_string(), (o.spectrum_err, o.signal_err)),
                Err(e) => (
                    format!("{}instance seed {seed} noise {eps:e}: {e}", if pinned { "fixed " } else { "" }),
                    (f64::NAN, f64::NAN),
                ),
            };
            let row = ResultRow {
                trial: t,
                seed,
                label: if pinned { "fixed".into() } else { "random".into() },
                status,
                values: vec![eps, f64::from(u8::from(pinned)), cfg.samples as f64, errs.0, errs.1],
                runtime_ms: ms,
            };
            (row, res.ok())
        })
        .collect();
    let columns = ["noise", "fixed", "L", "spectrum_err", "signal_err"].map(String::from).to_vec();
    let failures: Vec<String> = outcomes.iter().filter(|o| o.0.status != "ok" && o.0.values[0] == 0.0).map(|o| o.0.status.clone()).collect();

    let name = if complex { "lowpass_complex" } else { "lowpass_real" };
    let mut plots = Vec::new();
    if let Some(o) = outcomes.first().and_then(|o| o.1.as_ref()) {
        plots.push(lowpass_instance_plot(name, o, complex));
    }
    let mut sweep = Vec::new();
    let mut groups = Vec::new();
    for &eps in &levels {
        let sel: Vec<&ResultRow> = outcomes.iter().map(|o| &o.0).filter(|r| r.values[0] == eps).collect();
        let spectrum_errs: Vec<f64> = sel.iter().map(|r| r.values[3]).collect();
        let sig: Vec<f64> = sel.iter().map(|r| r.values[4]).collect();
        sweep.push(vec![eps, median(spectrum_errs.clone()), median(sig.clone()), max(&spectrum_errs), max(&sig)]);
        let fixed = sel.iter().find(|r| r.label == "fixed");
        groups.push(json!({
            "noise": eps,
            "trials": sel.len(),
            "failures": sel.iter().filter(|r| r.status != "ok").count(),
            "median_spectrum_err": median(spectrum_errs.clone()),
            "median_signal_err": median(sig.clone()),
            "max_spectrum_err": max(&spectrum_errs),
            "max_signal_err": max(&sig),
            "fixed_instance": fixed.map(|r| json!({ "spectrum_err": r.values[3], "signal_err": r.values[4] })),
        }));
    }
    if levels.len() > 1 {
        plots.push(PlotData {
            name: format!("{name}_noise"),
            columns: ["noise", "median_spectrum_err", "median_signal_err", "max_spectrum_err", "max_signal_err"]
                .map(String::from)
                .to_vec(),
            rows: sweep,
            script: format!(
                "set logscale xy\nset xlabel 'noise'\nset ylabel 'error'\nplot 'plotdata/{name}_noise.dat' using 1:2 with linespoints title 'median spectrum', \\\n     '' using 1:3 with linespoints title 'median signal'"
            ),
        });
    }
    Ok(ExperimentOutput {
        config: cfg.clone(),
        columns,
        summary: json!({ "command": cfg.command, "config": cfg, "groups": groups, "failures": failures }),
        rows: outcomes.into_iter().map(|o| o.0).collect(),
        plots,
        failures,
    })
}

fn lowpass_instance_plot(name: &str, o: &LowpassOutcome, complex: bool) -> PlotData {
    let spectrum = o.result.spectrum.as_ref().expect("checked").to_vec();
    let signal = align_global_phase(o.result.signal.as_ref().expect("checked"), &o.truth_signal, false)
        .map(|a| a.aligned)
        .unwrap_or_default();
    let d = spectrum.len();
    let rows = (0..d)
        .map(|k| {
            let mut row = vec![k as f64, o.truth_spectrum[k].re, spectrum[k].re, o.truth_signal[k].re, signal[k].re];
            if complex {
                row.extend([o.truth_signal[k].im, signal[k].im]);
            }
            row
        })
        .collect();
    let mut columns: Vec<String> = ["k", "a_hat", "a_hat_rec", "x_re", "x_re_rec"].map(String::from).to_vec();
    if complex {
        columns.extend(["x_im".into(), "x_im_rec".into()]);
    }
    let mut script = format!(
        "set multiplot layout 1,2\nset xlabel 'k'\nplot 'plotdata/{name}.dat' using 1:2 with points pt 6 title 'kernel spectrum', \\\n     '' using 1:3 with points pt 2 title 'recovered'\n"
    );
    script.push_str("plot '' using 1:4 with points pt 6 title 'Re x', '' using 1:5 with points pt 2 title 'recovered'");
    if complex {
        script.push_str(", \\\n     '' using 1:6 with points pt 4 title 'Im x', '' using 1:7 with points pt 1 title 'recovered'");
    }
    script.push_str("\nunset multiplot");
    PlotData {
        name: name.into(),
        columns,
        rows,
        script,
    }
}

struct MultiOutcome {
    spectrum_err: f64,
    signal_err: f64,
    spectrum_err_global: f64,
    signal_err_global: f64,
    /// `(a_hat, a_hat~, x_hat, x_hat~)`, first-component aligned.
    frequency: (Vec<Complex64>, Vec<Complex64>, Vec<Complex64>, Vec<Complex64>),
}

fn multivector_trial(inst: &Instance, samples: usize, eps: f64, noise_rng: &mut ChaCha8Rng, opts: &RecoveryOptions) -> Result<MultiOutcome> {
    let sys = inst.system.diagonalizable();
    let h: Vec<Vec<f64>> = inst
        .measure(samples)?
        .samples
        .iter()
        .map(|h| add_noise(h, eps, noise_rng))
        .collect();
    let phis: Vec<Vec<Complex64>> = inst.sampling.iter().map(|p| p.to_vec()).collect();
    let supports = inst.supports.as_ref().ok_or_else(|| Error::Precondition("instance has no supports".into()))?;
    let r = recover_multi_vector(&h, sys.basis(), &phis, supports, opts)?;
    let spectrum = r.spectrum.as_ref().ok_or_else(|| Error::Numerical("no spectrum returned".into()))?;
    let signal = r.signal.as_ref().ok_or_else(|| Error::Numerical("no signal returned".into()))?;
    let a_hat = inst.system.spectrum().to_vec();
    let x_hat = dft(&inst.x)?;
    let a_rec = align_at_component(spectrum, &a_hat, 0);
    let x_rec = align_at_component(&dft(signal)?, &x_hat, 0);
    Ok(MultiOutcome {
        spectrum_err: max_abs_diff(&a_rec, &a_hat),
        signal_err: max_abs_diff(&x_rec, &x_hat),
        spectrum_err_global: align_global_phase(spectrum, &a_hat, false)?.err_inf,
        signal_err_global: align_global_phase(signal, &inst.x, false)?.err_inf,
        frequency: (a_hat, a_rec, x_hat, x_rec),
    })
}

/// Simultaneous spectrum and signal recovery of circulant systems sampled
/// by vectors with staggered frequency supports of width `window`.
/// Instance seed `seed + trial`; errors are measured in frequency after
/// aligning the first component, and in space after global alignment.
pub fn multivector_demo(cfg: &Resolved) -> Result<ExperimentOutput> {
    let gen = GeneratorOptions {
        window: cfg.window,
        ..GeneratorOptions::default()
    };
    let opts = cfg.recovery_options();
    let levels = cfg.noise_levels();
    let jobs: Vec<(usize, f64, u64)> = levels
        .iter()
        .enumerate()
        .flat_map(|(li, &eps)| (0..cfg.trials as u64).map(move |t| (li, eps, t)))
        .collect();
    let outcomes: Vec<(ResultRow, Option<MultiOutcome>)> = jobs
        .par_iter()
        .map(|&(li, eps, t)| {
            let seed = cfg.seed + t;
            let (res, ms) = timed(|| {
                let inst = random_instance(InstanceKind::MultiVector, cfg.d, seed, &gen)?;
                multivector_trial(&inst, cfg.samples, eps, &mut stream_rng(cfg.seed, ((li as u64) << 32) | t), &opts)
            });
            let (status, v) = match &res {
                Ok(o) => ("ok".to_string(), [o.spectrum_err, o.signal_err, o.spectrum_err_global, o.signal_err_global]),
                Err(e) => (format!("instance seed {seed} noise {eps:e}: {e}"), [f64::NAN; 4]),
            };
            let row = ResultRow {
                trial: t,
                seed,
                label: format!("d={} w={}", cfg.d, cfg.window),
                status,
                values: vec![eps, cfg.samples as f64, v[0], v[1], v[2], v[3]],
                runtime_ms: ms,
            };
            (row, res.ok())
        })
        .collect();
    let columns = ["noise", "L", "spectrum_err", "signal_freq_err", "spectrum_err_global", "signal_err"]
        .map(String::from)
        .to_vec();
    let failures: Vec<String> = outcomes.iter().filter(|o| o.0.status != "ok" && o.0.values[0] == 0.0).map(|o| o.0.status.clone()).collect();
    let mut plots = Vec::new();
    if let Some(o) = outcomes.first().and_then(|o| o.1.as_ref()) {
        let (a, ar, x, xr) = &o.frequency;
        let rows = (0..a.len())
            .map(|k| {
                vec![
                    k as f64,
                    a[k].norm(),
                    a[k].arg(),
                    ar[k].norm(),
                    ar[k].arg(),
                    x[k].norm(),
                    x[k].arg(),
                    xr[k].norm(),
                    xr[k].arg(),
                ]
            })
            .collect();
        plots.push(PlotData {
            name: "multivector".into(),
            columns: ["k", "abs_a_hat", "arg_a_hat", "abs_a_hat_rec", "arg_a_hat_rec", "abs_x_hat", "arg_x_hat", "abs_x_hat_rec", "arg_x_hat_rec"]
                .map(String::from)
                .to_vec(),
            rows,
            script: [
                "set multiplot layout 2,2",
                "set xlabel 'k'",
                "plot 'plotdata/multivector.dat' using 1:2 with points pt 6 title '|a^|', '' using 1:4 with points pt 2 title 'recovered'",
                "plot '' using 1:3 with points pt 6 title 'arg a^', '' using 1:5 with points pt 2 title 'recovered'",
                "plot '' using 1:6 with points pt 6 title '|x^|', '' using 1:8 with points pt 2 title 'recovered'",
                "plot '' using 1:7 with points pt 6 title 'arg x^', '' using 1:9 with points pt 2 title 'recovered'",
                "unset multiplot",
            ]
            .join("\n"),
        });
    }
    let rows: Vec<ResultRow> = outcomes.into_iter().map(|o| o.0).collect();
    let groups: Vec<serde_json::Value> = levels
        .iter()
        .map(|&eps| {
            let sel: Vec<&ResultRow> = rows.iter().filter(|r| r.values[0] == eps).collect();
            let col = |i: usize| sel.iter().map(|r| r.values[i]).collect::<Vec<f64>>();
            json!({
                "noise": eps,
                "trials": sel.len(),
                "failures": sel.iter().filter(|r| r.status != "ok").count(),
                "max_spectrum_err": max(&col(2)),
                "max_signal_freq_err": max(&col(3)),
                "median_spectrum_err": median(col(2)),
                "median_signal_freq_err": median(col(3)),
            })
        })
        .collect();
    Ok(ExperimentOutput {
        config: cfg.clone(),
        columns,
        summary: json!({
            "command": cfg.command,
            "config": cfg,
            "sampling_vectors": cfg.d.saturating_sub(cfg.window) + 1,
            "groups": groups,
            "failures": failures,
        }),
        rows,
        plots,
        failures,
    })
}

/// Every bound checker with `trials` precondition-satisfying trials each.
/// A positive `noise` fixes the perturbation size of the checkers instead
/// of drawing it.
pub fn sensitivity_check(cfg: &Resolved) -> Result<ExperimentOutput> {
    let size = (cfg.noise > 0.0).then_some(cfg.noise);
    let checks = all_checks();
    let summaries: Vec<(CheckSummary, f64)> = checks.iter().map(|c| timed(|| run_check(c, cfg.seed, cfg.trials, size))).collect();
    let opt = |v: Option<u64>| v.map_or(f64::NAN, |t| t as f64);
    let rows: Vec<ResultRow> = summaries
        .iter()
        .enumerate()
        .map(|(i, (s, ms))| ResultRow {
            trial: i as u64,
            seed: cfg.seed,
            label: s.id.clone(),
            status: if !s.passed() {
                "violated".into()
            } else if s.trials == 0 {
                "skipped".into()
            } else {
                "ok".into()
            },
            values: vec![
                s.trials as f64,
                s.skipped as f64,
                s.violations as f64,
                s.max_ratio,
                opt(s.worst_trial),
                opt(s.first_violation),
            ],
            runtime_ms: *ms,
        })
        .collect();
    let failures: Vec<String> = summaries
        .iter()
        .filter(|(s, _)| !s.passed())
        .map(|(s, _)| {
            format!(
                "bound {} violated in {} of {} trials (max ratio {:e}); first at seed {} trial {}",
                s.id,
                s.violations,
                s.trials,
                s.max_ratio,
                cfg.seed,
                s.first_violation.unwrap_or_default()
            )
        })
        .collect();
    let example = example_report(cfg.seed);
    Ok(ExperimentOutput {
        config: cfg.clone(),
        columns: ["trials", "skipped", "violations", "max_ratio", "worst_trial", "first_violation"]
            .map(String::from)
            .to_vec(),
        summary: json!({
            "command": cfg.command,
            "config": cfg,
            "checks": summaries.iter().map(|s| &s.0).collect::<Vec<_>>(),
            "example_report": example,
            "failures": failures,
        }),
        plots: vec![PlotData {
            name: "sensitivity".into(),
            columns: vec!["check".into(), "max_ratio".into()],
            rows: summaries.iter().enumerate().map(|(i, s)| vec![i as f64, s.0.max_ratio]).collect(),
            script: format!(
                "set style data histogram\nset style fill solid\nset ylabel 'max observed / bound'\nset xtics rotate by -45 ({})\nplot 'plotdata/sensitivity.dat' using 2 title 'max ratio', 1 with lines dt 2 title 'bound'",
                checks.iter().enumerate().map(|(i, c)| format!("'{}' {i}", c.id)).collect::<Vec<_>>().join(", ")
            ),
        }],
        rows,
        failures,
    })
}

/// Spectrum and signal reports of one perturbed product table, for the
/// summary.
fn example_report(seed: u64) -> Vec<SensitivityReport> {
    use crate::algebra::CMatrix;
    use crate::sensitivity::{signal_report, spectrum_report};
    let mut rng = stream_rng(seed, u64::MAX);
    let mut draw = |lo: f64, hi: f64| Complex64::from_polar(rng.random_range(lo..hi), rng.random_range(-3.0..3.0));
    let lambda: Vec<Complex64> = (0..3).map(|_| draw(0.5, 1.0)).collect();
    let y: Vec<Complex64> = (0..3).map(|_| draw(0.5, 1.0)).collect();
    let psi: Vec<Complex64> = (0..3).map(|_| draw(0.5, 1.0)).collect();
    let c: Vec<Complex64> = y.iter().zip(&psi).map(|(y, p)| y.conj() * p).collect();
    let eps = 1e-4;
    let mut shift = |v: &[Complex64]| CMatrix::from_fn(3, 3, |j, k| v[j] * v[k].conj() + draw(0.0, eps));
    let lt = shift(&lambda);
    let ct = shift(&c);
    vec![
        spectrum_report(&lambda, &lt, eps),
        signal_report(&y, &psi, &CMatrix::identity(3, 3), &ct, eps),
    ]
}

/// Serializes instances and recovery results, reads them back, and checks
/// that nothing changed: equal values, bit-identical samples, identical
/// recovery. The first instance and result are kept as JSON files.
pub fn roundtrip(cfg: &Resolved) -> Result<ExperimentOutput> {
    let gen = GeneratorOptions::default();
    let outcomes: Vec<(ResultRow, Option<(String, String)>)> = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|t| {
            let seed = cfg.seed + t;
            let (res, ms) = timed(|| -> Result<([f64; 4], String, String)> {
                let inst = random_instance(InstanceKind::GenericCollisionFree, cfg.d, seed, &gen)?;
                let text = serde_json::to_string(&inst)?;
                let back: Instance = serde_json::from_str(&text)?;
                let sys = inst.system.diagonalizable();
                let h = measure(&sys, &inst.x, &inst.sampling[0], cfg.samples)?;
                let h_back = measure(&back.system.diagonalizable(), &back.x, &back.sampling[0], cfg.samples)?;
                let same_samples = h.iter().zip(&h_back).all(|(a, b)| a.to_bits() == b.to_bits());
                let r = recover_signal_known_system(&sys, &inst.sampling[0], &h)?;
                let r_text = serde_json::to_string(&r)?;
                let r_back: RecoveryResult = serde_json::from_str(&r_text)?;
                let signal = r.signal.as_ref().ok_or_else(|| Error::Numerical("no signal returned".into()))?;
                let err = align_global_phase(signal, &inst.x, false)?.err_inf;
                Ok((
                    [
                        f64::from(u8::from(back == inst)),
                        f64::from(u8::from(same_samples)),
                        f64::from(u8::from(r_back == r)),
                        err,
                    ],
                    serde_json::to_string_pretty(&inst)?,
                    serde_json::to_string_pretty(&r)?,
                ))
            });
            match res {
                Ok((v, a, b)) => {
                    let status = if v[..3].iter().all(|&f| f == 1.0) {
                        "ok".to_string()
                    } else {
                        format!("instance seed {seed}: serialized data did not round-trip")
                    };
                    let row = ResultRow {
                        trial: t,
                        seed,
                        label: format!("d={}", cfg.d),
                        status,
                        values: vec![cfg.d as f64, cfg.samples as f64, v[0], v[1], v[2], v[3]],
                        runtime_ms: ms,
                    };
                    (row, Some((a, b)))
                }
                Err(e) => (
                    ResultRow {
                        trial: t,
                        seed,
                        label: format!("d={}", cfg.d),
                        status: format!("instance seed {seed}: {e}"),
                        values: vec![cfg.d as f64, cfg.samples as f64, f64::NAN, f64::NAN, f64::NAN, f64::NAN],
                        runtime_ms: ms,
                    },
                    None,
                ),
            }
        })
        .collect();
    let failures: Vec<String> = outcomes.iter().filter(|o| o.0.status != "ok").map(|o| o.0.status.clone()).collect();
    let example = outcomes.iter().find_map(|o| o.1.clone());
    let rows: Vec<ResultRow> = outcomes.into_iter().map(|o| o.0).collect();
    let errs: Vec<f64> = rows.iter().map(|r| r.values[5]).collect();
    Ok(ExperimentOutput {
        config: cfg.clone(),
        columns: ["d", "L", "instance_roundtrip", "samples_identical", "result_roundtrip", "signal_err"]
            .map(String::from)
            .to_vec(),
        summary: json!({
            "command": cfg.command,
            "config": cfg,
            "trials": rows.len(),
            "failures": failures,
            "max_signal_err": max(&errs),
            "example_instance": example.as_ref().map(|e| serde_json::from_str::<serde_json::Value>(&e.0).ok()),
            "example_result": example.as_ref().map(|e| serde_json::from_str::<serde_json::Value>(&e.1).ok()),
        }),
        rows,
        plots: Vec::new(),
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolved(command: Command, cfg: ExperimentConfig) -> Resolved {
        cfg.resolve(command).unwrap()
    }

    #[test]
    fn config_toml_roundtrip_and_merge() {
        let text = "command = \"prony-bench\"\nk = 5\ntrials = 10\nnoise = 0.0\nseed = 7\n";
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.k, Some(5));
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        let merged = cfg.clone().merged(ExperimentConfig {
            seed: Some(9),
            ..Default::default()
        });
        assert_eq!(merged.seed, Some(9));
        assert_eq!(merged.trials, Some(10));
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(cfg.resolve(Command::Roundtrip).is_err());
    }

    #[test]
    fn invalid_counts_are_rejected() {
        let bad = [
            ExperimentConfig { trials: Some(0), ..Default::default() },
            ExperimentConfig { d: Some(0), ..Default::default() },
            ExperimentConfig { noise: Some(-1.0), ..Default::default() },
            ExperimentConfig { noise: Some(f64::NAN), ..Default::default() },
            ExperimentConfig { l_factors: Some(vec![1]), ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.resolve(Command::PronyBench), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn defaults_follow_the_command() {
        let m = resolved(Command::MultivectorDemo, ExperimentConfig::default());
        assert_eq!((m.d, m.window, m.samples), (50, 4, 65));
        let l = resolved(Command::LowpassRealDemo, ExperimentConfig::default());
        assert_eq!((l.d, l.samples), (6, 145));
        let p = resolved(Command::PronyBench, ExperimentConfig::default());
        assert_eq!(p.trials, 500);
        assert_eq!(p.k_grid, vec![5, 10, 15, 20]);
    }

    #[test]
    fn prony_bench_is_reproducible() {
        let cfg = resolved(
            Command::PronyBench,
            ExperimentConfig {
                k: Some(3),
                trials: Some(8),
                l_factors: Some(vec![2, 4]),
                seed: Some(5),
                ..Default::default()
            },
        );
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a.results_csv().unwrap(), b.results_csv().unwrap());
        assert_eq!(a.rows.len(), 2 * 2 * 8);
        assert!(a.rows.iter().all(|r| r.status == "ok"));
        // noise-free, K = 3: near machine precision
        assert!(a.rows.iter().filter(|r| r.values[2] == 0.0).all(|r| r.values[3] < 1e-8));
        assert_eq!(a.plots.len(), 4);
    }

    #[test]
    fn failures_carry_the_seed() {
        let cfg = resolved(
            Command::MultivectorDemo,
            ExperimentConfig {
                d: Some(8),
                window: Some(9),
                seed: Some(41),
                ..Default::default()
            },
        );
        let out = run(&cfg).unwrap();
        assert!(!out.succeeded());
        assert!(out.failures[0].contains("seed 41"), "{}", out.failures[0]);
    }

    #[test]
    fn outputs_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = resolved(
            Command::Roundtrip,
            ExperimentConfig {
                trials: Some(3),
                d: Some(3),
                ..Default::default()
            },
        );
        let out = run(&cfg).unwrap();
        assert!(out.succeeded(), "{:?}", out.failures);
        out.write(dir.path()).unwrap();
        for f in ["results.csv", "timings.csv", "summary.json", "plot.gp"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let csv = fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn oversized_sensitivity_perturbations_skip_and_pass() {
        let cfg = resolved(
            Command::SensitivityCheck,
            ExperimentConfig {
                trials: Some(5),
                noise: Some(100.0),
                ..Default::default()
            },
        );
        let out = run(&cfg).unwrap();
        assert!(out.succeeded(), "{:?}", out.failures);
        let skipped: Vec<&str> = out.rows.iter().filter(|r| r.status == "skipped").map(|r| r.label.as_str()).collect();
        assert!(skipped.contains(&"spectrum-total"));
        assert!(skipped.contains(&"signal-total"));
    }
}
