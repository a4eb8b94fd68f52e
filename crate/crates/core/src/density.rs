//! Monte Carlo laws of point values `(X_K(x_1), …, X_K(x_d))`, their kernel density estimates,
//! and positivity reports on the estimates.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{Scheme, SchemeConfig};
use crate::malliavin::{sample_seed, validate_points};
use crate::model::{fingerprint, Model};
use crate::noise::{NoisePath, ShiftSpec};
use crate::stats::{quantile_sorted, sample_std};

/// Largest supported dimension of the point vector.
pub const MAX_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub points: Vec<f64>,
    /// One row of `d` point values per sample.
    pub samples: Vec<Vec<f64>>,
    pub model_fingerprint: String,
    pub scheme_fingerprint: String,
    pub base_seed: u64,
}

impl SampleSet {
    /// Wrap externally produced rows, e.g. synthetic data for estimator checks.
    pub fn from_rows(points: Vec<f64>, samples: Vec<Vec<f64>>) -> Result<Self> {
        let set = SampleSet {
            points,
            samples,
            model_fingerprint: String::new(),
            scheme_fingerprint: String::new(),
            base_seed: 0,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.samples.len() < 2 {
            return Err(Error::invalid("samples", "a sample set needs at least 2 rows"));
        }
        for (i, row) in self.samples.iter().enumerate() {
            if row.len() != d {
                return Err(Error::DimensionMismatch(format!("row {i} has {} entries, expected {d}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("samples", format!("row {i} is not finite")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.points.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.samples.iter().map(|r| r[i]).collect()
    }

    pub fn translated(&self, shift: &[f64]) -> Self {
        let mut out = self.clone();
        for row in &mut out.samples {
            for (v, c) in row.iter_mut().zip(shift) {
                *v += c;
            }
        }
        out
    }

    pub fn mean(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| self.samples.iter().map(|r| r[i]).sum::<f64>() / self.len() as f64)
            .collect()
    }

    /// Header `sample,x1,…` then one row per sample.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "sample")?;
        for i in 1..=self.dim() {
            write!(w, ",x{i}")?;
        }
        writeln!(w)?;
        for (s, row) in self.samples.iter().enumerate() {
            write!(w, "{s}")?;
            for v in row {
                write!(w, ",{v:e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// `m` independent final-time point evaluations, optionally under shifted noise.
pub fn collect_samples(
    model: &Model,
    config: &SchemeConfig,
    points: &[f64],
    m: usize,
    base_seed: u64,
    shift: Option<&ShiftSpec>,
) -> Result<SampleSet> {
    validate_points(points, model.length)?;
    if m < 2 {
        return Err(Error::invalid("samples", format!("need at least 2 samples, got {m}")));
    }
    let scheme = Scheme::new(model.clone(), config.clone())?;
    if let Some(s) = shift {
        s.validate(model.length, model.horizon)?;
    }
    let samples = (0..m)
        .into_par_iter()
        .map(|i| {
            let run = || -> Result<Vec<f64>> {
                let mut noise =
                    NoisePath::sample(sample_seed(base_seed, i), config.noise_modes, config.steps, scheme.dt())?;
                if let Some(s) = shift {
                    noise = noise.shift(s, scheme.basis())?;
                }
                let traj = scheme.run(&noise)?;
                let x = traj.final_state();
                Ok(points.iter().map(|&p| scheme.basis().eval_at(x, p)).collect())
            };
            run().map_err(|e| e.at_sample(i))
        })
        .collect::<Result<Vec<_>>>()?;
    let set = SampleSet {
        points: points.to_vec(),
        samples,
        model_fingerprint: fingerprint(model),
        scheme_fingerprint: fingerprint(config),
        base_seed,
    };
    set.validate()?;
    Ok(set)
}

/// Smallest sample count accepted by [`kde`] in dimension `d`.
pub fn min_samples(d: usize) -> usize {
    match d {
        1 => 30,
        2 => 200,
        _ => 1000,
    }
}

/// Query box and resolution for [`kde`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Grid cells per dimension; the query points are the cell centers.
    pub cells: usize,
    /// Explicit `(lo, hi)` per dimension; by default the 0.1% and 99.9% sample quantiles widened by
    /// `pad` bandwidths on each side.
    #[serde(default)]
    pub bounds: Option<Vec<(f64, f64)>>,
    #[serde(default = "GridSpec::default_pad")]
    pub pad: f64,
    /// Overrides the Silverman bandwidths.
    #[serde(default)]
    pub bandwidth: Option<Vec<f64>>,
}

impl GridSpec {
    fn default_pad() -> f64 {
        4.0
    }

    pub fn new(cells: usize) -> Self {
        GridSpec {
            cells,
            bounds: None,
            pad: Self::default_pad(),
            bandwidth: None,
        }
    }

    pub fn with_bounds(mut self, bounds: Vec<(f64, f64)>) -> Self {
        self.bounds = Some(bounds);
        self
    }
}

/// Density values on a tensor grid of cell centers, stored with the last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    pub axes: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub bandwidth: Vec<f64>,
}

impl DensityEstimate {
    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn cell_widths(&self) -> Vec<f64> {
        self.axes.iter().map(|a| if a.len() > 1 { a[1] - a[0] } else { 0.0 }).collect()
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_widths().iter().product()
    }

    /// Midpoint-rule integral of the estimate over its box.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_volume()
    }

    pub fn peak(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for a in (0..self.dim()).rev() {
            let n = self.axes[a].len();
            idx[a] = flat % n;
            flat /= n;
        }
        idx
    }

    pub fn coordinates(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat).iter().zip(&self.axes).map(|(&i, a)| a[i]).collect()
    }

    /// Integrate out every axis except `axis`.
    pub fn marginal(&self, axis: usize) -> DensityEstimate {
        let widths = self.cell_widths();
        let other: f64 = widths.iter().enumerate().filter(|(a, _)| *a != axis).map(|(_, w)| w).product();
        let mut values = vec![0.0; self.axes[axis].len()];
        for (flat, v) in self.values.iter().enumerate() {
            values[self.multi_index(flat)[axis]] += v * other;
        }
        DensityEstimate {
            axes: vec![self.axes[axis].clone()],
            values,
            bandwidth: vec![self.bandwidth[axis]],
        }
    }

    /// Header `y1,…,yd,density`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for i in 1..=self.dim() {
            write!(w, "y{i},")?;
        }
        writeln!(w, "density")?;
        for (flat, v) in self.values.iter().enumerate() {
            for c in self.coordinates(flat) {
                write!(w, "{c:e},")?;
            }
            writeln!(w, "{v:e}")?;
        }
        Ok(())
    }
}

/// Silverman's rule `1.06 σ̂_i M^{-1/(d+4)}` per coordinate.
pub fn silverman_bandwidth(samples: &SampleSet) -> Result<Vec<f64>> {
    let d = samples.dim();
    let factor = 1.06 * (samples.len() as f64).powf(-1.0 / (d as f64 + 4.0));
    (0..d)
        .map(|i| {
            let s = sample_std(&samples.column(i));
            if s > 0.0 {
                Ok(factor * s)
            } else {
                Err(Error::DegenerateDirection { coordinate: i })
            }
        })
        .collect()
}

/// Product-Gaussian kernel estimator over a fixed sample.
#[derive(Debug, Clone)]
pub struct Kde<'a> {
    samples: &'a SampleSet,
    bandwidth: Vec<f64>,
}

impl<'a> Kde<'a> {
    pub fn new(samples: &'a SampleSet, bandwidth: Option<Vec<f64>>) -> Result<Self> {
        samples.validate()?;
        let d = samples.dim();
        if d == 0 || d > MAX_DIM {
            return Err(Error::invalid("points", format!("density estimation supports 1..={MAX_DIM} points, got {d}")));
        }
        if samples.len() < min_samples(d) {
            return Err(Error::invalid(
                "samples",
                format!("kde in dimension {d} needs at least {} samples, got {}", min_samples(d), samples.len()),
            ));
        }
        let silverman = silverman_bandwidth(samples)?;
        let bandwidth = match bandwidth {
            Some(h) if h.len() != d || h.iter().any(|v| !(*v > 0.0)) => {
                return Err(Error::invalid("bandwidth", "need one positive bandwidth per dimension"))
            }
            Some(h) => h,
            None => silverman,
        };
        Ok(Kde { samples, bandwidth })
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    pub fn density_at(&self, y: &[f64]) -> f64 {
        let norm: f64 = self.bandwidth.iter().map(|h| h * (2.0 * std::f64::consts::PI).sqrt()).product();
        let total: f64 = self
            .samples
            .samples
            .iter()
            .map(|row| {
                let q: f64 = row.iter().zip(y).zip(&self.bandwidth).map(|((s, y), h)| ((y - s) / h).powi(2)).sum();
                (-0.5 * q).exp()
            })
            .sum();
        total / (norm * self.samples.len() as f64)
    }

    pub fn on_grid(&self, spec: &GridSpec) -> Result<DensityEstimate> {
        let d = self.samples.dim();
        if spec.cells < 2 {
            return Err(Error::invalid("cells", "need at least 2 grid cells per dimension"));
        }
        let bounds = match &spec.bounds {
            Some(b) if b.len() != d || b.iter().any(|(lo, hi)| !(hi > lo)) => {
                return Err(Error::invalid("bounds", "need one increasing (lo, hi) pair per dimension"))
            }
            Some(b) => b.clone(),
            None => (0..d)
                .map(|i| {
                    let mut c = self.samples.column(i);
                    c.sort_by(f64::total_cmp);
                    let pad = spec.pad * self.bandwidth[i];
                    (quantile_sorted(&c, 0.001) - pad, quantile_sorted(&c, 0.999) + pad)
                })
                .collect(),
        };
        let axes: Vec<Vec<f64>> = bounds
            .iter()
            .map(|&(lo, hi)| {
                let w = (hi - lo) / spec.cells as f64;
                (0..spec.cells).map(|i| lo + (i as f64 + 0.5) * w).collect()
            })
            .collect();
        // per-axis kernel weights, one row per grid coordinate
        let weights: Vec<Vec<Vec<f64>>> = axes
            .iter()
            .enumerate()
            .map(|(a, axis)| {
                let h = self.bandwidth[a];
                axis.iter()
                    .map(|&y| self.samples.samples.iter().map(|r| (-0.5 * ((y - r[a]) / h).powi(2)).exp()).collect())
                    .collect()
            })
            .collect();
        let norm: f64 = self.bandwidth.iter().map(|h| h * (2.0 * std::f64::consts::PI).sqrt()).product::<f64>()
            * self.samples.len() as f64;
        let total = spec.cells.pow(d as u32);
        let mut estimate = DensityEstimate {
            axes,
            values: Vec::new(),
            bandwidth: self.bandwidth.clone(),
        };
        estimate.values = (0..total)
            .into_par_iter()
            .map(|flat| {
                let idx = estimate.multi_index(flat);
                let mut s = 0.0;
                for k in 0..self.samples.len() {
                    let mut p = 1.0;
                    for (a, &i) in idx.iter().enumerate() {
                        p *= weights[a][i][k];
                    }
                    s += p;
                }
                s / norm
            })
            .collect();
        Ok(estimate)
    }
}

/// Kernel density estimate of `samples` on the grid described by `spec`.
pub fn kde(samples: &SampleSet, spec: &GridSpec) -> Result<DensityEstimate> {
    Kde::new(samples, spec.bandwidth.clone())?.on_grid(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositivityReport {
    pub threshold: f64,
    pub region: Vec<(f64, f64)>,
    pub cells: usize,
    pub fraction_above: f64,
    pub min_density: f64,
    pub zero_cells: usize,
}

/// Fraction of grid points inside `region` where the estimate is at least `tau`.
pub fn positivity_report(estimate: &DensityEstimate, region: &[(f64, f64)], tau: f64) -> Result<PositivityReport> {
    if region.len() != estimate.dim() {
        return Err(Error::Region(format!(
            "region has {} intervals for a {}-dimensional estimate",
            region.len(),
            estimate.dim()
        )));
    }
    let widths = estimate.cell_widths();
    for (a, &(lo, hi)) in region.iter().enumerate() {
        if !(hi > lo) {
            return Err(Error::Region(format!("empty interval [{lo}, {hi}] on axis {a}")));
        }
        let axis = &estimate.axes[a];
        let (g_lo, g_hi) = (axis[0] - widths[a] / 2.0, axis[axis.len() - 1] + widths[a] / 2.0);
        if lo < g_lo || hi > g_hi {
            return Err(Error::Region(format!(
                "interval [{lo}, {hi}] on axis {a} leaves the estimate's grid [{g_lo}, {g_hi}]"
            )));
        }
    }
    let mut cells = 0;
    let mut above = 0;
    let mut zero = 0;
    let mut min = f64::INFINITY;
    for (flat, &v) in estimate.values.iter().enumerate() {
        let y = estimate.coordinates(flat);
        if y.iter().zip(region).all(|(c, (lo, hi))| c >= lo && c <= hi) {
            cells += 1;
            if v >= tau {
                above += 1;
            }
            if v == 0.0 {
                zero += 1;
            }
            min = min.min(v);
        }
    }
    if cells == 0 {
        return Err(Error::Region("region contains no grid points".into()));
    }
    Ok(PositivityReport {
        threshold: tau,
        region: region.to_vec(),
        cells,
        fraction_above: above as f64 / cells as f64,
        min_density: min,
        zero_cells: zero,
    })
}
