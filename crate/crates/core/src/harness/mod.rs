//! Canned studies: convergence rates, temporal regularity, Malliavin probes, densities and
//! plain runs, each writing CSV tables and a JSON report into an output directory.

pub mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

pub use config::{StudyConfig, StudyKind};

use crate::density::{self, GridSpec, PositivityReport, SampleSet};
use crate::error::{Error, Result};
use crate::integrator::{Scheme, Trajectory};
use crate::malliavin::{nondegeneracy_probe, sample_seed, ProbeTable};
use crate::noise::NoisePath;
use crate::spectral::SpectralField;
use crate::stats::{fit_rate, quantile, LevelError, RateFit};

/// Convergence or regularity table with its log-log fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub study: StudyKind,
    pub levels: Vec<LevelError>,
    /// Abscissae of the fit, one per level.
    pub fit_x: Vec<f64>,
    #[serde(flatten)]
    pub fit: RateFit,
    pub fingerprint: String,
    pub seed: u64,
}

impl RateReport {
    pub fn slope(&self) -> Option<f64> {
        self.fit.slope
    }

    pub fn write_errors_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "level,value,error,stderr,samples")?;
        for l in &self.levels {
            writeln!(w, "{},{:e},{:e},{:e},{}", l.level, l.value, l.error, l.stderr, l.samples)?;
        }
        Ok(())
    }
}

fn fine_noise(cfg: &StudyConfig, i: usize, modes: usize, steps: usize) -> Result<NoisePath> {
    NoisePath::sample(sample_seed(cfg.seed, i), modes, steps, cfg.model.horizon / steps as f64)
}

fn restriction(fine: &NoisePath, time_factor: usize, modes: usize) -> Result<NoisePath> {
    let coarse = fine.coarsen(time_factor, modes)?;
    if !coarse.is_restriction_of(fine) {
        return Err(Error::Precondition("coarse noise is not a restriction of the sample's fine path".into()));
    }
    Ok(coarse)
}

/// Per-sample squared errors for every level, gathered in sample order.
fn squared_errors<F>(cfg: &StudyConfig, levels: usize, per_sample: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(usize) -> Result<Vec<f64>> + Sync,
{
    let rows = (0..cfg.samples)
        .into_par_iter()
        .map(|i| per_sample(i).map_err(|e| e.at_sample(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..levels).map(|l| rows.iter().map(|r| r[l]).collect()).collect())
}

/// Strong error in time at fixed `N`: every level runs on a time-coarsening of one fine path
/// per sample and is compared with the run on the fine path itself.
pub fn temporal_rate(cfg: &StudyConfig) -> Result<RateReport> {
    let cfg = cfg.resolve(StudyKind::TemporalRate)?;
    let n = cfg.max_modes();
    let n_ref = n * cfg.reference_mode_factor;
    let k_ref = cfg.finest_steps() * cfg.reference_time_factor;
    let reference = Scheme::new(cfg.model.clone(), cfg.scheme(n_ref, k_ref))?;
    let schemes = cfg
        .dt_exponents
        .iter()
        .map(|&e| Scheme::new(cfg.model.clone(), cfg.scheme(n, 1 << e)))
        .collect::<Result<Vec<_>>>()?;
    let sq = squared_errors(&cfg, schemes.len(), |i| {
        let fine = fine_noise(&cfg, i, reference.config().noise_modes, k_ref)?;
        let x_ref = reference.run(&fine).map_err(|e| e.at_level(format!("reference dt={}", reference.dt())))?;
        schemes
            .iter()
            .map(|s| {
                let noise = restriction(&fine, k_ref / s.config().steps, s.config().noise_modes)?;
                let x = s.run(&noise).map_err(|e| e.at_level(format!("dt={}", s.dt())))?;
                Ok(cfg.norm.distance_sq(cfg.model.length, x.final_state(), x_ref.final_state()))
            })
            .collect()
    })?;
    let levels: Vec<LevelError> = schemes
        .iter()
        .zip(&sq)
        .enumerate()
        .map(|(l, (s, v))| LevelError::from_squared(l, s.dt(), v))
        .collect();
    let fit_x: Vec<f64> = levels.iter().map(|l| l.value).collect();
    let fit = fit_rate(&levels, &fit_x)?;
    Ok(RateReport {
        study: StudyKind::TemporalRate,
        levels,
        fit_x,
        fit,
        fingerprint: cfg.fingerprint(),
        seed: cfg.seed,
    })
}

/// Strong error in space at fixed `δt`: levels use mode truncations of one fine path. The fit
/// abscissa is `1/λ_N`, so the slope is the exponent of `λ_N^{-1}` and twice it the order in `N`.
pub fn spatial_rate(cfg: &StudyConfig) -> Result<RateReport> {
    let cfg = cfg.resolve(StudyKind::SpatialRate)?;
    let k = cfg.finest_steps();
    let n_ref = cfg.max_modes() * cfg.reference_mode_factor;
    let reference = Scheme::new(cfg.model.clone(), cfg.scheme(n_ref, k))?;
    let schemes = cfg
        .modes
        .iter()
        .map(|&n| Scheme::new(cfg.model.clone(), cfg.scheme(n, k)))
        .collect::<Result<Vec<_>>>()?;
    let sq = squared_errors(&cfg, schemes.len(), |i| {
        let fine = fine_noise(&cfg, i, reference.config().noise_modes, k)?;
        let x_ref = reference.run(&fine).map_err(|e| e.at_level(format!("reference N={n_ref}")))?;
        schemes
            .iter()
            .map(|s| {
                let noise = restriction(&fine, 1, s.config().noise_modes)?;
                let x = s.run(&noise).map_err(|e| e.at_level(format!("N={}", s.config().modes)))?;
                Ok(cfg.norm.distance_sq(cfg.model.length, x.final_state(), x_ref.final_state()))
            })
            .collect()
    })?;
    let levels: Vec<LevelError> = schemes
        .iter()
        .zip(&sq)
        .enumerate()
        .map(|(l, (s, v))| LevelError::from_squared(l, s.config().modes as f64, v))
        .collect();
    let fit_x: Vec<f64> = schemes.iter().map(|s| 1.0 / s.basis().eigenvalue(s.config().modes)).collect();
    let fit = fit_rate(&levels, &fit_x)?;
    Ok(RateReport {
        study: StudyKind::SpatialRate,
        levels,
        fit_x,
        fit,
        fingerprint: cfg.fingerprint(),
        seed: cfg.seed,
    })
}

/// Root-mean-square increments `‖X_K − X_{K−m}‖` against the lag time `m δt`.
pub fn regularity(cfg: &StudyConfig) -> Result<RateReport> {
    let cfg = cfg.resolve(StudyKind::Regularity)?;
    let k = cfg.finest_steps();
    let scheme = Scheme::new(cfg.model.clone(), cfg.scheme(cfg.max_modes(), k).with_full_storage())?;
    let mut lags = cfg.lags.clone();
    lags.sort_unstable();
    lags.dedup();
    let sq = squared_errors(&cfg, lags.len(), |i| {
        let noise = fine_noise(&cfg, i, scheme.config().noise_modes, k)?;
        let traj = scheme.run(&noise)?;
        let end = traj.final_state();
        Ok(lags
            .iter()
            .map(|&m| {
                let earlier = traj.state_at(k - m).expect("full storage");
                cfg.norm.distance_sq(cfg.model.length, end, earlier)
            })
            .collect())
    })?;
    let levels: Vec<LevelError> = lags
        .iter()
        .zip(&sq)
        .enumerate()
        .map(|(l, (&m, v))| LevelError::from_squared(l, m as f64 * scheme.dt(), v))
        .collect();
    let fit_x: Vec<f64> = levels.iter().map(|l| l.value).collect();
    let fit = fit_rate(&levels, &fit_x)?;
    Ok(RateReport {
        study: StudyKind::Regularity,
        levels,
        fit_x,
        fit,
        fingerprint: cfg.fingerprint(),
        seed: cfg.seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub table: ProbeTable,
    /// Empirical fraction at `10⁻³ × median λ_min`.
    pub fraction_at_small_eps: f64,
    pub fingerprint: String,
}

pub fn malliavin_probe(cfg: &StudyConfig) -> Result<ProbeOutcome> {
    let cfg = cfg.resolve(StudyKind::MalliavinProbe)?;
    let scheme = cfg.scheme(cfg.max_modes(), cfg.coarsest_steps());
    let table = nondegeneracy_probe(&cfg.model, &scheme, &cfg.points, &cfg.eps, cfg.samples, cfg.seed)?;
    let fraction_at_small_eps = table.fraction_below(1e-3 * table.summary.median);
    Ok(ProbeOutcome {
        table,
        fraction_at_small_eps,
        fingerprint: cfg.fingerprint(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityOutcome {
    pub samples: SampleSet,
    pub estimate: density::DensityEstimate,
    pub positivity: PositivityReport,
    pub integral: f64,
    pub fingerprint: String,
}

pub fn density_study(cfg: &StudyConfig) -> Result<DensityOutcome> {
    let cfg = cfg.resolve(StudyKind::DensityStudy)?;
    let scheme = cfg.scheme(cfg.max_modes(), cfg.coarsest_steps());
    let samples = density::collect_samples(&cfg.model, &scheme, &cfg.points, cfg.samples, cfg.seed, cfg.shift.as_ref())?;
    let grid = cfg.grid.clone().unwrap_or_else(|| GridSpec::new(if cfg.points.len() == 1 { 256 } else { 64 }));
    let estimate = density::kde(&samples, &grid)?;
    let (qa, qb) = cfg.region_quantiles;
    let region: Vec<(f64, f64)> = (0..samples.dim())
        .map(|i| {
            let c = samples.column(i);
            (quantile(&c, qa), quantile(&c, qb))
        })
        .collect();
    let positivity = density::positivity_report(&estimate, &region, cfg.tau_rel * estimate.peak())?;
    let integral = estimate.integral();
    Ok(DensityOutcome {
        samples,
        estimate,
        positivity,
        integral,
        fingerprint: cfg.fingerprint(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub trajectories: Vec<Trajectory>,
    pub energies: Vec<f64>,
    pub fingerprint: String,
}

/// Plain forward runs, one per sample.
pub fn single_run(cfg: &StudyConfig) -> Result<RunOutcome> {
    let cfg = cfg.resolve(StudyKind::SingleRun)?;
    let scheme = Scheme::new(cfg.model.clone(), cfg.scheme(cfg.max_modes(), cfg.coarsest_steps()))?;
    let runs = (0..cfg.samples)
        .into_par_iter()
        .map(|i| {
            let run = || -> Result<(Trajectory, f64)> {
                let noise = fine_noise(&cfg, i, scheme.config().noise_modes, scheme.config().steps)?;
                let traj = scheme.run(&noise)?;
                let energy = scheme.energy(traj.final_state())?;
                Ok((traj, energy))
            };
            run().map_err(|e| e.at_sample(i))
        })
        .collect::<Result<Vec<_>>>()?;
    let (trajectories, energies) = runs.into_iter().unzip();
    Ok(RunOutcome {
        trajectories,
        energies,
        fingerprint: cfg.fingerprint(),
    })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    File::create(&path).map(BufWriter::new).map_err(|source| Error::Io { path, source })
}

fn write_file(dir: &Path, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut w = create(dir, name)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|source| Error::Io { path: path.clone(), source })?;
    Ok(path)
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<PathBuf> {
    write_file(dir, name, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)
    })
}

fn coeff_row<W: Write>(w: &mut W, label: usize, x: &SpectralField) -> std::io::Result<()> {
    write!(w, "{label}")?;
    for c in x.coeffs() {
        write!(w, ",{c:e}")?;
    }
    writeln!(w)
}

/// Run `kind` under `cfg` and write its files into `out`; returns the written paths.
pub fn run_study(kind: StudyKind, cfg: &StudyConfig, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();
    match kind {
        StudyKind::TemporalRate | StudyKind::SpatialRate | StudyKind::Regularity => {
            let report = match kind {
                StudyKind::TemporalRate => temporal_rate(cfg)?,
                StudyKind::SpatialRate => spatial_rate(cfg)?,
                _ => regularity(cfg)?,
            };
            files.push(write_file(out, "errors.csv", |w| report.write_errors_csv(w))?);
            let mut value = serde_json::to_value(&report).expect("serializable report");
            if kind == StudyKind::SpatialRate {
                let twice = |v: Option<f64>| v.map(|s| 2.0 * s);
                value["slope_in_n"] = json!(twice(report.fit.slope));
                value["ci_low_in_n"] = json!(twice(report.fit.ci_low));
                value["ci_high_in_n"] = json!(twice(report.fit.ci_high));
            }
            files.push(write_json(out, "report.json", &value)?);
        }
        StudyKind::MalliavinProbe => {
            let p = malliavin_probe(cfg)?;
            files.push(write_file(out, "probe.csv", |w| {
                writeln!(w, "eps,empirical_fraction,sample_count")?;
                for r in &p.table.rows {
                    writeln!(w, "{:e},{:e},{}", r.eps, r.empirical_fraction, r.sample_count)?;
                }
                Ok(())
            })?);
            files.push(write_file(out, "lambda_min.csv", |w| {
                writeln!(w, "sample,lambda_min")?;
                for (i, l) in p.table.lambda_min.iter().enumerate() {
                    writeln!(w, "{i},{l:e}")?;
                }
                Ok(())
            })?);
            files.push(write_json(out, "probe_summary.json", &json!(p.table.summary))?);
            files.push(write_json(
                out,
                "report.json",
                &json!({
                    "study": kind,
                    "slope": null,
                    "ci_low": null,
                    "ci_high": null,
                    "fingerprint": p.fingerprint,
                    "all_positive": p.table.summary.all_positive,
                    "median_lambda_min": p.table.summary.median,
                    "fraction_at_1e-3_median": p.fraction_at_small_eps,
                    "tangent": "derivative of the fully discrete scheme",
                }),
            )?);
        }
        StudyKind::DensityStudy => {
            let d = density_study(cfg)?;
            files.push(write_file(out, "samples.csv", |w| d.samples.write_csv(w))?);
            files.push(write_file(out, "density.csv", |w| d.estimate.write_csv(w))?);
            files.push(write_json(out, "positivity.json", &json!(d.positivity))?);
            files.push(write_json(
                out,
                "report.json",
                &json!({
                    "study": kind,
                    "slope": null,
                    "ci_low": null,
                    "ci_high": null,
                    "fingerprint": d.fingerprint,
                    "model_fingerprint": d.samples.model_fingerprint,
                    "scheme_fingerprint": d.samples.scheme_fingerprint,
                    "bandwidth": d.estimate.bandwidth,
                    "integral": d.integral,
                    "peak": d.estimate.peak(),
                }),
            )?);
        }
        StudyKind::SingleRun => {
            let r = single_run(cfg)?;
            files.push(write_file(out, "trajectory.csv", |w| r.trajectories[0].write_csv(w))?);
            files.push(write_file(out, "final_states.csv", |w| {
                let n = r.trajectories[0].final_state().len();
                write!(w, "sample")?;
                for j in 1..=n {
                    write!(w, ",c{j}")?;
                }
                writeln!(w)?;
                for (i, t) in r.trajectories.iter().enumerate() {
                    coeff_row(w, i, t.final_state())?;
                }
                Ok(())
            })?);
            let iters: Vec<f64> = r
                .trajectories
                .iter()
                .flat_map(|t| t.newton_iters.iter().map(|&v| v as f64))
                .collect();
            let max_residual = r
                .trajectories
                .iter()
                .flat_map(|t| t.residuals.iter().copied())
                .fold(0.0, f64::max);
            files.push(write_json(
                out,
                "report.json",
                &json!({
                    "study": kind,
                    "slope": null,
                    "ci_low": null,
                    "ci_high": null,
                    "fingerprint": r.fingerprint,
                    "mean_newton_iterations": iters.iter().sum::<f64>() / iters.len().max(1) as f64,
                    "max_newton_residual": max_residual,
                    "final_energy": r.energies,
                }),
            )?);
        }
    }
    Ok(files)
}
