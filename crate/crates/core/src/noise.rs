//! Truncated cylindrical Wiener increments `Δβ_j^k` with exact coupling between resolutions.
//!
//! A path keeps both its increments and the Brownian values `β_j(t_k)` obtained by summing the
//! increments in ascending `k`. Time coarsening subsamples the Brownian values, so coarsening by
//! `r₁` and then `r₂` is bitwise identical to coarsening by `r₁r₂`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::KeyedNormal;
use crate::spectral::DirichletBasis;

pub const DUMP_MAGIC: &[u8; 5] = b"SCHN1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LineageOp {
    Sampled {
        seed: u64,
        modes: usize,
        steps: usize,
        dt: f64,
    },
    Coarsened {
        time_factor: usize,
        mode_cut: usize,
    },
    Shifted {
        z: Vec<f64>,
        anchor: f64,
        window: f64,
    },
    Loaded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    modes: usize,
    steps: usize,
    dt: f64,
    seed: u64,
    // step-major: increments[k * modes + (j - 1)]
    increments: Vec<f64>,
    // step-major Brownian values, steps + 1 rows, first row zero
    brownian: Vec<f64>,
    lineage: Vec<LineageOp>,
}

fn prefix_sums(increments: &[f64], modes: usize, steps: usize) -> Vec<f64> {
    let mut w = vec![0.0; (steps + 1) * modes];
    for k in 0..steps {
        for j in 0..modes {
            w[(k + 1) * modes + j] = w[k * modes + j] + increments[k * modes + j];
        }
    }
    w
}

impl NoisePath {
    /// I.i.d. `Normal(0, δt)` increments keyed by `(seed, k, j)`.
    pub fn sample(seed: u64, modes: usize, steps: usize, dt: f64) -> Result<Self> {
        if modes == 0 {
            return Err(Error::invalid("modes", "need at least one noise mode"));
        }
        if steps == 0 {
            return Err(Error::invalid("steps", "need at least one step"));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::invalid("dt", format!("must be positive, got {dt}")));
        }
        let rng = KeyedNormal::new(seed);
        let sd = dt.sqrt();
        let mut increments = Vec::with_capacity(modes * steps);
        for k in 0..steps {
            for j in 1..=modes {
                increments.push(sd * rng.normal(k as u64, j as u64));
            }
        }
        let brownian = prefix_sums(&increments, modes, steps);
        Ok(Self {
            modes,
            steps,
            dt,
            seed,
            increments,
            brownian,
            lineage: vec![LineageOp::Sampled {
                seed,
                modes,
                steps,
                dt,
            }],
        })
    }

    /// Build a path from explicit increments, given as `increments[k][j-1]`.
    pub fn from_increments(seed: u64, dt: f64, rows: &[Vec<f64>]) -> Result<Self> {
        let steps = rows.len();
        let modes = rows.first().map_or(0, Vec::len);
        if steps == 0 || modes == 0 || rows.iter().any(|r| r.len() != modes) {
            return Err(Error::DimensionMismatch("increment rows must be non-empty and rectangular".into()));
        }
        let increments: Vec<f64> = rows.iter().flatten().copied().collect();
        let brownian = prefix_sums(&increments, modes, steps);
        Ok(Self {
            modes,
            steps,
            dt,
            seed,
            increments,
            brownian,
            lineage: vec![LineageOp::Loaded],
        })
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn lineage(&self) -> &[LineageOp] {
        &self.lineage
    }

    /// `Δβ_j^k` for 1-based `j`.
    pub fn increment(&self, k: usize, j: usize) -> f64 {
        self.increments[k * self.modes + j - 1]
    }

    /// All mode increments of step `k`.
    pub fn step(&self, k: usize) -> &[f64] {
        &self.increments[k * self.modes..(k + 1) * self.modes]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// `β_j(t_k)` for 1-based `j`, `0 ≤ k ≤ K`.
    pub fn brownian(&self, k: usize, j: usize) -> f64 {
        self.brownian[k * self.modes + j - 1]
    }

    /// Perturb a single increment; used by pathwise finite differences.
    pub fn perturbed(&self, k: usize, j: usize, h: f64) -> Self {
        let mut p = self.clone();
        p.increments[k * self.modes + j - 1] += h;
        for kk in k + 1..=self.steps {
            p.brownian[kk * self.modes + j - 1] += h;
        }
        p
    }

    /// Sum blocks of `time_factor` steps and drop modes above `mode_cut`.
    pub fn coarsen(&self, time_factor: usize, mode_cut: usize) -> Result<Self> {
        if time_factor == 0 || self.steps % time_factor != 0 {
            return Err(Error::invalid(
                "time_factor",
                format!("{time_factor} does not divide the step count {}", self.steps),
            ));
        }
        if mode_cut == 0 || mode_cut > self.modes {
            return Err(Error::invalid(
                "mode_cut",
                format!("must lie in 1..={}, got {mode_cut}", self.modes),
            ));
        }
        let steps = self.steps / time_factor;
        let mut brownian = Vec::with_capacity((steps + 1) * mode_cut);
        for kc in 0..=steps {
            let row = kc * time_factor * self.modes;
            brownian.extend_from_slice(&self.brownian[row..row + mode_cut]);
        }
        let mut increments = Vec::with_capacity(steps * mode_cut);
        if time_factor == 1 {
            for k in 0..steps {
                increments.extend_from_slice(&self.increments[k * self.modes..k * self.modes + mode_cut]);
            }
        } else {
            for k in 0..steps {
                for j in 0..mode_cut {
                    increments.push(brownian[(k + 1) * mode_cut + j] - brownian[k * mode_cut + j]);
                }
            }
        }
        let mut lineage = self.lineage.clone();
        lineage.push(LineageOp::Coarsened {
            time_factor,
            mode_cut,
        });
        Ok(Self {
            modes: mode_cut,
            steps,
            dt: self.dt * time_factor as f64,
            seed: self.seed,
            increments,
            brownian,
            lineage,
        })
    }

    /// True when `self` was obtained from `root` by coarsening operations only.
    pub fn is_restriction_of(&self, root: &NoisePath) -> bool {
        self.lineage.len() >= root.lineage.len()
            && self.lineage[..root.lineage.len()] == root.lineage[..]
            && self.lineage[root.lineage.len()..]
                .iter()
                .all(|op| matches!(op, LineageOp::Coarsened { .. }))
    }

    /// Add the deterministic drift `z_i ⟨h^i, e_j⟩` over the shift window to every increment.
    pub fn shift(&self, spec: &ShiftSpec, basis: &DirichletBasis) -> Result<Self> {
        let horizon = self.steps as f64 * self.dt;
        spec.validate(basis.length(), horizon)?;
        let proj = spec.mode_projections(basis, self.modes)?;
        let lo = spec.anchor - spec.eps;
        let mut out = self.clone();
        let mut cumulative = vec![0.0; self.modes];
        for k in 0..self.steps {
            let (t0, t1) = (k as f64 * self.dt, (k + 1) as f64 * self.dt);
            let overlap = (t1.min(spec.anchor) - t0.max(lo)).max(0.0);
            if overlap > 0.0 {
                for j in 0..self.modes {
                    let drift: f64 = spec.z.iter().zip(&proj).map(|(z, p)| z * p[j]).sum::<f64>() * overlap;
                    out.increments[k * self.modes + j] += drift;
                    cumulative[j] += drift;
                }
            }
            for j in 0..self.modes {
                out.brownian[(k + 1) * self.modes + j] += cumulative[j];
            }
        }
        out.lineage.push(LineageOp::Shifted {
            z: spec.z.clone(),
            anchor: spec.anchor,
            window: spec.eps,
        });
        Ok(out)
    }

    /// Binary dump: magic `SCHN1`, LE u64 seed, u32 modes, u32 steps, f64 dt, then the
    /// increments as a modes × steps row-major f64 matrix (row = mode).
    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.modes as u32).to_le_bytes())?;
        w.write_all(&(self.steps as u32).to_le_bytes())?;
        w.write_all(&self.dt.to_le_bytes())?;
        for j in 1..=self.modes {
            for k in 0..self.steps {
                w.write_all(&self.increment(k, j).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(mut r: R) -> Result<Self> {
        let bad = |e: std::io::Error| Error::NoiseFormat(e.to_string());
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::NoiseFormat("bad magic".into()));
        }
        let mut b8 = [0u8; 8];
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b8).map_err(bad)?;
        let seed = u64::from_le_bytes(b8);
        r.read_exact(&mut b4).map_err(bad)?;
        let modes = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4).map_err(bad)?;
        let steps = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8).map_err(bad)?;
        let dt = f64::from_le_bytes(b8);
        if modes == 0 || steps == 0 || !(dt > 0.0) {
            return Err(Error::NoiseFormat(format!("invalid header: modes {modes}, steps {steps}, dt {dt}")));
        }
        let mut rows = vec![vec![0.0; modes]; steps];
        for j in 0..modes {
            for row in rows.iter_mut() {
                r.read_exact(&mut b8).map_err(bad)?;
                row[j] = f64::from_le_bytes(b8);
            }
        }
        Self::from_increments(seed, dt, &rows)
    }
}

/// Noise shift along bump directions localized at `points` over the window `[anchor-ε, anchor]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub z: Vec<f64>,
    pub anchor: f64,
    pub eps: f64,
    pub alpha_exp: f64,
    pub points: Vec<f64>,
}

impl ShiftSpec {
    /// Half-width `ε^α` of the spatial windows.
    pub fn half_width(&self) -> f64 {
        self.eps.powf(self.alpha_exp)
    }

    pub fn validate(&self, length: f64, horizon: f64) -> Result<()> {
        if self.z.len() != self.points.len() || self.points.is_empty() {
            return Err(Error::invalid("z", "need one shift magnitude per point"));
        }
        if !(self.alpha_exp > 0.25 && self.alpha_exp < 1.0) {
            return Err(Error::invalid("alpha_exp", format!("must lie in (1/4, 1), got {}", self.alpha_exp)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("eps", "window length must be positive"));
        }
        if self.anchor - self.eps < -1e-12 * horizon || self.anchor > horizon * (1.0 + 1e-12) {
            return Err(Error::invalid(
                "anchor",
                format!("window [{}, {}] outside [0, {horizon}]", self.anchor - self.eps, self.anchor),
            ));
        }
        let w = self.half_width();
        let mut sorted = self.points.clone();
        sorted.sort_by(f64::total_cmp);
        for &x in &sorted {
            if x - w <= 0.0 || x + w >= length {
                return Err(Error::invalid("points", format!("window around {x} leaves (0, {length})")));
            }
        }
        for pair in sorted.windows(2) {
            if pair[1] - pair[0] < 2.0 * w {
                return Err(Error::invalid(
                    "points",
                    format!("windows around {} and {} overlap", pair[0], pair[1]),
                ));
            }
        }
        Ok(())
    }

    /// `c_n^i = ∫_{t-ε}^t ∫_{x_i-w}^{x_i+w} G(t-r, x_i, y) dy dr`, evaluated mode by mode with the
    /// exact time integral `(1 - e^{-λ²ε})/λ²` and exact sine integrals.
    pub fn normalizer(&self, basis: &DirichletBasis, i: usize) -> f64 {
        let l = basis.length();
        let x = self.points[i];
        let w = self.half_width();
        let amp = 2.0 / l;
        let bound_const = amp * (2.0 * l / std::f64::consts::PI) * (l / std::f64::consts::PI).powi(4) / 4.0;
        let mut sum = 0.0;
        let mut m = 1usize;
        loop {
            let lam = basis.eigenvalue(m);
            let time = (1.0 - (-lam * lam * self.eps).exp()) / (lam * lam);
            sum += basis.eigenfunction(m, x) * sine_integral(basis, m, x - w, x + w) * time;
            let tail = bound_const / (m as f64).powi(4);
            if tail < 1e-14 * sum.abs() || m >= 1_000_000 {
                return sum;
            }
            m += 1;
        }
    }

    /// `⟨h^i(s, ·), e_j⟩` for `j = 1..modes`, one vector per point.
    pub fn mode_projections(&self, basis: &DirichletBasis, modes: usize) -> Result<Vec<Vec<f64>>> {
        let w = self.half_width();
        (0..self.points.len())
            .map(|i| {
                let c = self.normalizer(basis, i);
                if !(c > 0.0) {
                    return Err(Error::Precondition(format!("non-positive shift normalizer {c} at point {i}")));
                }
                let x = self.points[i];
                Ok((1..=modes).map(|j| sine_integral(basis, j, x - w, x + w) / c).collect())
            })
            .collect()
    }
}

/// `∫_a^b e_j(y) dy`.
pub fn sine_integral(basis: &DirichletBasis, j: usize, a: f64, b: f64) -> f64 {
    let l = basis.length();
    let k = j as f64 * std::f64::consts::PI / l;
    (2.0 / l).sqrt() * ((k * a).cos() - (k * b).cos()) / k
}
