//! Drift-implicit Euler / spectral-Galerkin full discretization.
//!
//! One step solves
//!
//! ```text
//! (I + δt A²) X_{k+1} + δt A P^N F(X_{k+1}) = X_k + P^N[σ(X_k) Σ_j e_j Δβ_j^k]
//! ```
//!
//! by Newton's method in spectral coordinates. Jacobian systems are solved matrix-free by
//! Richardson iteration preconditioned with the diagonal `I + δt A²`, falling back to a dense LU
//! factorization when the iteration does not contract.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coefficients::{DiffusionSpec, Drift, DEFAULT_DIVERGENCE_THRESHOLD};
use crate::dense;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::noise::NoisePath;
use crate::spectral::{DirichletBasis, SpectralField};

const INNER_TOL: f64 = 1e-14;
const INNER_MAX_ITER: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    /// Galerkin modes `N`.
    pub modes: usize,
    /// Time steps `K`; `δt = T / K`.
    pub steps: usize,
    pub noise_modes: usize,
    /// Grid nodes; `None` means `max(2N, M_noise)`.
    pub grid_size: Option<usize>,
    pub newton_rel_tol: f64,
    pub newton_max_iter: usize,
    pub divergence_threshold: f64,
    /// Store every state instead of every `⌈K/256⌉`-th.
    pub full_storage: bool,
}

impl SchemeConfig {
    /// `N` modes, `K` steps, `M_noise = 2N`, default solver settings.
    pub fn new(modes: usize, steps: usize) -> Self {
        Self {
            modes,
            steps,
            noise_modes: 2 * modes,
            grid_size: None,
            newton_rel_tol: 1e-12,
            newton_max_iter: 50,
            divergence_threshold: DEFAULT_DIVERGENCE_THRESHOLD,
            full_storage: false,
        }
    }

    pub fn with_noise_modes(mut self, noise_modes: usize) -> Self {
        self.noise_modes = noise_modes;
        self
    }

    pub fn with_full_storage(mut self) -> Self {
        self.full_storage = true;
        self
    }

    pub fn grid(&self) -> usize {
        self.grid_size.unwrap_or((2 * self.modes).max(self.noise_modes))
    }

    pub fn stride(&self) -> usize {
        if self.full_storage {
            1
        } else {
            self.steps.div_ceil(256).max(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes == 0 {
            return Err(Error::invalid("modes", "need at least one Galerkin mode"));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps", "need at least one time step"));
        }
        if self.noise_modes < self.modes {
            return Err(Error::invalid(
                "noise_modes",
                format!("must be >= modes ({}), got {}", self.modes, self.noise_modes),
            ));
        }
        if self.grid() < self.noise_modes || self.grid() < 2 * self.modes {
            return Err(Error::invalid(
                "grid_size",
                format!("grid of {} nodes cannot resolve {} noise modes", self.grid(), self.noise_modes),
            ));
        }
        if !(self.newton_rel_tol > 0.0) || self.newton_max_iter == 0 {
            return Err(Error::invalid("newton_rel_tol", "Newton tolerance and iteration cap must be positive"));
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(Error::invalid("divergence_threshold", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
    pub rhs_norm: f64,
    /// ℍ⁰ residual norm before each Newton update, ending with the accepted one.
    pub residual_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    /// Step indices of the stored states, ascending, always containing `0` and `K`.
    pub steps: Vec<usize>,
    pub states: Vec<SpectralField>,
    /// Newton iterations per step (length `K`).
    pub newton_iters: Vec<usize>,
    /// Final residual per step (length `K`).
    pub residuals: Vec<f64>,
}

impl Trajectory {
    pub fn final_state(&self) -> &SpectralField {
        self.states.last().expect("trajectory holds at least the initial state")
    }

    pub fn initial_state(&self) -> &SpectralField {
        &self.states[0]
    }

    pub fn state_at(&self, step: usize) -> Option<&SpectralField> {
        self.steps.binary_search(&step).ok().map(|i| &self.states[i])
    }

    pub fn total_steps(&self) -> usize {
        *self.steps.last().unwrap_or(&0)
    }

    /// CSV with columns `step,time,c1..cN`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.states.first().map_or(0, SpectralField::len);
        write!(w, "step,time")?;
        for j in 1..=n {
            write!(w, ",c{j}")?;
        }
        writeln!(w)?;
        for (k, s) in self.steps.iter().zip(&self.states) {
            write!(w, "{k},{}", *k as f64 * self.dt)?;
            for c in s.coeffs() {
                write!(w, ",{c}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// CSV with columns `step,time` followed by the field values at the grid nodes.
    pub fn write_grid_csv<W: Write>(&self, basis: &DirichletBasis, mut w: W) -> std::io::Result<()> {
        write!(w, "step,time")?;
        for x in basis.nodes() {
            write!(w, ",x={x}")?;
        }
        writeln!(w)?;
        for (k, s) in self.steps.iter().zip(&self.states) {
            let g = basis.to_grid(s).map_err(|e| std::io::Error::other(e.to_string()))?;
            write!(w, "{k},{}", *k as f64 * self.dt)?;
            for v in &g.values {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Linearization of the implicit map at a state: `J v = (I + δtA²) v + δt A P^N[F'(X) v]`.
#[derive(Debug, Clone)]
pub struct Linearization<'a> {
    scheme: &'a Scheme,
    // F'(X) at the grid nodes; None when the drift is identically zero
    slope: Option<Vec<f64>>,
}

impl Linearization<'_> {
    pub fn apply(&self, v: &SpectralField) -> SpectralField {
        let s = self.scheme;
        let mut out: Vec<f64> = v.coeffs().iter().zip(&s.diag).map(|(c, d)| c * d).collect();
        if let Some(slope) = &self.slope {
            let coupling = s.multiply_project(v.coeffs(), slope);
            for ((o, c), a) in out.iter_mut().zip(&coupling).zip(&s.dt_lambda) {
                *o += a * c;
            }
        }
        SpectralField::from_coeffs(out)
    }

    /// Solve `J x = b`.
    pub fn solve(&self, b: &SpectralField, step: usize) -> Result<SpectralField> {
        let s = self.scheme;
        let inv = |v: &mut [f64]| v.iter_mut().zip(&s.diag).for_each(|(c, d)| *c /= d);
        let mut x = b.coeffs().to_vec();
        inv(&mut x);
        let Some(slope) = &self.slope else {
            return Ok(SpectralField::from_coeffs(x));
        };
        let mut prev_change = f64::INFINITY;
        let mut growth = 0;
        for _ in 0..INNER_MAX_ITER {
            let coupling = s.multiply_project(&x, slope);
            let mut next: Vec<f64> = b
                .coeffs()
                .iter()
                .zip(&coupling)
                .zip(&s.dt_lambda)
                .map(|((bi, ci), a)| bi - a * ci)
                .collect();
            inv(&mut next);
            let change = next.iter().zip(&x).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
            let size = next.iter().map(|a| a * a).sum::<f64>().sqrt();
            x = next;
            if change <= INNER_TOL * size || size == 0.0 {
                return Ok(SpectralField::from_coeffs(x));
            }
            if !change.is_finite() {
                break;
            }
            growth = if change >= prev_change { growth + 1 } else { 0 };
            if growth >= 3 {
                break;
            }
            prev_change = change;
        }
        self.solve_dense(b, step)
    }

    fn solve_dense(&self, b: &SpectralField, step: usize) -> Result<SpectralField> {
        let s = self.scheme;
        let n = s.basis.modes();
        let e = dense::synthesis_matrix(&s.basis, n);
        let slope = self.slope.as_deref().unwrap_or(&[]);
        let mut jac = if slope.is_empty() {
            DMatrix::zeros(n, n)
        } else {
            dense::weighted_gram(s.basis.weight(), &e, slope, &e)
        };
        for i in 0..n {
            jac.row_mut(i).scale_mut(s.dt_lambda[i]);
            jac[(i, i)] += s.diag[i];
        }
        let rhs = DVector::from_column_slice(b.coeffs());
        jac.lu()
            .solve(&rhs)
            .filter(|x| x.iter().all(|v| v.is_finite()))
            .map(|x| SpectralField::from_coeffs(x.as_slice().to_vec()))
            .ok_or_else(|| Error::LinearSolveFailed {
                step,
                reason: "singular Jacobian".into(),
            })
    }

    pub fn slope(&self) -> Option<&[f64]> {
        self.slope.as_deref()
    }
}

/// A discretization (`N`, `K`, grid) of a [`Model`], ready to step.
#[derive(Debug, Clone)]
pub struct Scheme {
    model: Model,
    config: SchemeConfig,
    basis: DirichletBasis,
    dt: f64,
    // 1 + δt λ_j²
    diag: Vec<f64>,
    // δt λ_j
    dt_lambda: Vec<f64>,
}

impl Scheme {
    pub fn new(model: Model, config: SchemeConfig) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        let basis = DirichletBasis::new(model.length, config.modes, config.grid())?;
        let dt = model.horizon / config.steps as f64;
        let diag = basis.eigenvalues().iter().map(|l| 1.0 + dt * l * l).collect();
        let dt_lambda = basis.eigenvalues().iter().map(|l| dt * l).collect();
        Ok(Self {
            model,
            config,
            basis,
            dt,
            diag,
            dt_lambda,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &SchemeConfig {
        &self.config
    }

    pub fn basis(&self) -> &DirichletBasis {
        &self.basis
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn initial_state(&self) -> SpectralField {
        self.model.initial.project(self.config.modes)
    }

    fn grid_of(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.basis.grid_size()];
        self.basis.synthesize(coeffs, &mut g);
        g
    }

    fn project(&self, values: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; self.basis.modes()];
        self.basis.analyze(values, &mut c);
        c
    }

    // P^N[w · v] for grid weights w
    fn multiply_project(&self, coeffs: &[f64], weights: &[f64]) -> Vec<f64> {
        let mut g = self.grid_of(coeffs);
        g.iter_mut().zip(weights).for_each(|(v, w)| *v *= w);
        self.project(&g)
    }

    fn guard(&self, values: &[f64]) -> Result<()> {
        let limit = self.config.divergence_threshold;
        match values.iter().find(|v| !v.is_finite() || v.abs() > limit) {
            Some(&value) => Err(Error::Overflow {
                value,
                threshold: limit,
            }),
            None => Ok(()),
        }
    }

    pub fn check_noise(&self, noise: &NoisePath) -> Result<()> {
        if noise.steps() != self.config.steps || noise.modes() != self.config.noise_modes {
            return Err(Error::DimensionMismatch(format!(
                "noise is {} modes x {} steps, scheme expects {} x {}",
                noise.modes(),
                noise.steps(),
                self.config.noise_modes,
                self.config.steps
            )));
        }
        if (noise.dt() - self.dt).abs() > 1e-12 * self.dt {
            return Err(Error::DimensionMismatch(format!(
                "noise step {} differs from scheme step {}",
                noise.dt(),
                self.dt
            )));
        }
        Ok(())
    }

    /// `P^N[σ(X) Σ_j e_j Δβ_j]`.
    pub fn noise_term(&self, x: &SpectralField, increments: &[f64]) -> Result<SpectralField> {
        if increments.len() > self.basis.grid_size() {
            return Err(Error::DimensionMismatch("more noise modes than grid nodes".into()));
        }
        let n = self.basis.modes();
        if let DiffusionSpec::Constant { a } = self.model.diffusion {
            // multiplication by a constant commutes with P^N
            let mut c = vec![0.0; n];
            for (ci, inc) in c.iter_mut().zip(increments) {
                *ci = a * inc;
            }
            return Ok(SpectralField::from_coeffs(c));
        }
        let gx = self.grid_of(x.coeffs());
        self.guard(&gx)?;
        let mut xi = self.grid_of(increments);
        for (v, &u) in xi.iter_mut().zip(&gx) {
            *v *= self.model.diffusion.sigma(u);
        }
        Ok(SpectralField::from_coeffs(self.project(&xi)))
    }

    /// `P^N[σ'(X) · v · Σ_j e_j Δβ_j]`, the noise term differentiated along `v`.
    pub fn noise_term_derivative(
        &self,
        x: &SpectralField,
        v: &SpectralField,
        increments: &[f64],
    ) -> Result<SpectralField> {
        let n = self.basis.modes();
        if matches!(self.model.diffusion, DiffusionSpec::Constant { .. }) {
            return Ok(SpectralField::zeros(n));
        }
        let weights = self.noise_derivative_weights(x, increments);
        Ok(SpectralField::from_coeffs(self.multiply_project(v.coeffs(), &weights)))
    }

    /// Grid weights `σ'(X(x_m)) ξ(x_m)` with `ξ = Σ_j e_j Δβ_j`.
    pub fn noise_derivative_weights(&self, x: &SpectralField, increments: &[f64]) -> Vec<f64> {
        let gx = self.grid_of(x.coeffs());
        let mut xi = self.grid_of(increments);
        for (w, &u) in xi.iter_mut().zip(&gx) {
            *w *= self.model.diffusion.sigma_prime(u);
        }
        xi
    }

    /// `P^N F(X)`.
    pub fn drift_term(&self, x: &SpectralField) -> Result<SpectralField> {
        let n = self.basis.modes();
        if self.model.drift == Drift::Zero {
            return Ok(SpectralField::zeros(n));
        }
        let mut g = self.grid_of(x.coeffs());
        self.guard(&g)?;
        g.iter_mut().for_each(|v| *v = self.model.drift.value(*v));
        Ok(SpectralField::from_coeffs(self.project(&g)))
    }

    pub fn linearize(&self, x: &SpectralField) -> Result<Linearization<'_>> {
        let slope = if self.model.drift == Drift::Zero {
            None
        } else {
            let mut g = self.grid_of(x.coeffs());
            self.guard(&g)?;
            g.iter_mut().for_each(|v| *v = self.model.drift.derivative(*v));
            Some(g)
        };
        Ok(Linearization { scheme: self, slope })
    }

    /// `(I + δtA²) X + δt A P^N F(X) - rhs`, together with the grid values of `X`.
    fn residual(&self, x: &[f64], rhs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = self.grid_of(x);
        self.guard(&g)?;
        let grid = g.clone();
        g.iter_mut().for_each(|v| *v = self.model.drift.value(*v));
        let drift = self.project(&g);
        let r = x
            .iter()
            .zip(rhs)
            .zip(&drift)
            .enumerate()
            .map(|(i, ((xi, bi), fi))| self.diag[i] * xi + self.dt_lambda[i] * fi - bi)
            .collect();
        Ok((r, grid))
    }

    /// One drift-implicit Euler step from `x` with the increments of step `step`.
    pub fn implicit_step(
        &self,
        x: &SpectralField,
        increments: &[f64],
        step: usize,
    ) -> Result<(SpectralField, StepReport)> {
        self.basis.check(x)?;
        let noise = self.noise_term(x, increments).map_err(|e| e.at_step(step))?;
        let rhs: Vec<f64> = x.coeffs().iter().zip(noise.coeffs()).map(|(a, b)| a + b).collect();
        let rhs_norm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();

        if self.model.drift == Drift::Zero {
            let next: Vec<f64> = rhs.iter().zip(&self.diag).map(|(b, d)| b / d).collect();
            let report = StepReport {
                converged: true,
                iterations: 1,
                residual: 0.0,
                rhs_norm,
                residual_history: vec![0.0],
            };
            return Ok((SpectralField::from_coeffs(next), report));
        }

        let tol = self.config.newton_rel_tol * rhs_norm.max(f64::MIN_POSITIVE);
        let mut current = x.coeffs().to_vec();
        let mut history = Vec::new();
        let mut growth = 0;
        for it in 0..=self.config.newton_max_iter {
            let (r, grid) = self.residual(&current, &rhs).map_err(|e| e.at_step(step))?;
            let res = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !res.is_finite() {
                return Err(Error::NewtonDiverged {
                    step,
                    iterations: it,
                    residual: res,
                });
            }
            if let Some(&last) = history.last() {
                growth = if res >= last { growth + 1 } else { 0 };
            }
            history.push(res);
            if res <= tol {
                let report = StepReport {
                    converged: true,
                    iterations: it,
                    residual: res,
                    rhs_norm,
                    residual_history: history,
                };
                return Ok((SpectralField::from_coeffs(current), report));
            }
            if it == self.config.newton_max_iter || growth >= 3 {
                return Err(Error::NewtonDiverged {
                    step,
                    iterations: it,
                    residual: res,
                });
            }
            let slope: Vec<f64> = grid.iter().map(|&u| self.model.drift.derivative(u)).collect();
            let lin = Linearization {
                scheme: self,
                slope: Some(slope),
            };
            let neg_r = SpectralField::from_coeffs(r.iter().map(|v| -v).collect());
            let delta = lin.solve(&neg_r, step)?;
            current.iter_mut().zip(delta.coeffs()).for_each(|(c, d)| *c += d);
        }
        unreachable!("loop returns on the final iteration")
    }

    /// Run all `K` steps from `P^N X₀`.
    pub fn run(&self, noise: &NoisePath) -> Result<Trajectory> {
        self.run_from(self.initial_state(), noise)
    }

    pub fn run_from(&self, x0: SpectralField, noise: &NoisePath) -> Result<Trajectory> {
        self.basis.check(&x0)?;
        self.check_noise(noise)?;
        let k_total = self.config.steps;
        let stride = self.config.stride();
        let mut traj = Trajectory {
            dt: self.dt,
            steps: vec![0],
            states: vec![x0.clone()],
            newton_iters: Vec::with_capacity(k_total),
            residuals: Vec::with_capacity(k_total),
        };
        let mut x = x0;
        for k in 0..k_total {
            let (next, report) = self.implicit_step(&x, noise.step(k), k)?;
            traj.newton_iters.push(report.iterations);
            traj.residuals.push(report.residual);
            x = next;
            if (k + 1) % stride == 0 || k + 1 == k_total {
                traj.steps.push(k + 1);
                traj.states.push(x.clone());
            }
        }
        Ok(traj)
    }

    /// The split `X = Y + Z` with the drift evaluated explicitly at step `k`:
    /// `Y_{k+1} = T_δt(Y_k − δt A P^N F(Y_k+Z_k))`, `Z_{k+1} = T_δt(Z_k + P^N[σ(Y_k+Z_k) ΔW_k])`.
    pub fn run_yz_split(&self, noise: &NoisePath) -> Result<(Trajectory, Trajectory)> {
        self.check_noise(noise)?;
        let k_total = self.config.steps;
        let stride = self.config.stride();
        let new_traj = |s: SpectralField| Trajectory {
            dt: self.dt,
            steps: vec![0],
            states: vec![s],
            newton_iters: vec![0; k_total],
            residuals: vec![0.0; k_total],
        };
        let mut y = self.initial_state();
        let mut z = SpectralField::zeros(self.config.modes);
        let (mut ty, mut tz) = (new_traj(y.clone()), new_traj(z.clone()));
        for k in 0..k_total {
            let sum = SpectralField::from_coeffs(y.coeffs().iter().zip(z.coeffs()).map(|(a, b)| a + b).collect());
            let drift = self.drift_term(&sum).map_err(|e| e.at_step(k))?;
            let noise_k = self.noise_term(&sum, noise.step(k)).map_err(|e| e.at_step(k))?;
            let y_next = (0..self.config.modes)
                .map(|i| (y.coeffs()[i] - self.dt_lambda[i] * drift.coeffs()[i]) / self.diag[i])
                .collect();
            let z_next = (0..self.config.modes)
                .map(|i| (z.coeffs()[i] + noise_k.coeffs()[i]) / self.diag[i])
                .collect();
            y = SpectralField::from_coeffs(y_next);
            z = SpectralField::from_coeffs(z_next);
            if (k + 1) % stride == 0 || k + 1 == k_total {
                ty.steps.push(k + 1);
                ty.states.push(y.clone());
                tz.steps.push(k + 1);
                tz.states.push(z.clone());
            }
        }
        Ok((ty, tz))
    }

    /// Discrete Ginzburg-Landau energy `½‖∇X‖² + ∫ f(X)` with the node rule.
    pub fn energy(&self, x: &SpectralField) -> Result<f64> {
        let p = self
            .model
            .drift
            .potential()
            .ok_or_else(|| Error::Precondition("energy needs a polynomial potential".into()))?;
        let gradient: f64 = x
            .coeffs()
            .iter()
            .zip(self.basis.eigenvalues())
            .map(|(c, l)| l * c * c)
            .sum();
        let grid = self.basis.to_grid(x)?;
        Ok(0.5 * gradient + crate::coefficients::potential_energy(&grid, p, &self.basis))
    }
}

/// Free-function form of [`Scheme::implicit_step`].
pub fn implicit_step(
    x: &SpectralField,
    increments: &[f64],
    model: &Model,
    config: &SchemeConfig,
) -> Result<(SpectralField, StepReport)> {
    Scheme::new(model.clone(), config.clone())?.implicit_step(x, increments, 0)
}

/// Free-function form of [`Scheme::run_from`].
pub fn run_scheme(x0: SpectralField, noise: &NoisePath, model: &Model, config: &SchemeConfig) -> Result<Trajectory> {
    Scheme::new(model.clone(), config.clone())?.run_from(x0, noise)
}

/// A fine-discretization run used as a stand-in for the exact solution.
pub fn reference_solution(noise: &NoisePath, model: &Model, fine: &SchemeConfig) -> Result<Trajectory> {
    Scheme::new(model.clone(), fine.clone())?.run(noise)
}

/// Diagonal error norms `Σ_j λ_j^s v_j²` used to compare discretizations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ErrorNorm {
    #[default]
    H0,
    HMinus1,
}

impl ErrorNorm {
    pub fn exponent(self) -> f64 {
        match self {
            ErrorNorm::H0 => 0.0,
            ErrorNorm::HMinus1 => -1.0,
        }
    }

    /// Squared distance after zero-padding both fields to the longer length.
    pub fn distance_sq(self, length: f64, a: &SpectralField, b: &SpectralField) -> f64 {
        let n = a.len().max(b.len());
        let s = self.exponent();
        (0..n)
            .map(|i| {
                let d = a.coeffs().get(i).copied().unwrap_or(0.0) - b.coeffs().get(i).copied().unwrap_or(0.0);
                let lam = ((i + 1) as f64 * std::f64::consts::PI / length).powi(2);
                lam.powf(s) * d * d
            })
            .sum()
    }

    pub fn norm(self, length: f64, a: &SpectralField) -> f64 {
        self.distance_sq(length, a, &SpectralField::zeros(0)).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::Potential;
    use crate::model::InitialCondition;

    fn smooth_x0(n: usize) -> SpectralField {
        InitialCondition::default().project(n)
    }

    #[test]
    fn linear_step_is_resolvent() {
        let model = Model::linear(0.0).with_initial(InitialCondition::default());
        let cfg = SchemeConfig::new(8, 4);
        let s = Scheme::new(model, cfg).unwrap();
        let x = smooth_x0(8);
        let (next, rep) = s.implicit_step(&x, &[0.0; 16], 0).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.iterations, 1);
        let want = s.basis().resolvent_apply(&x, s.dt(), 1).unwrap();
        assert!(next.max_abs_diff(&want) <= 1e-15);
    }

    #[test]
    fn additive_step_matches_diagonal_formula() {
        let model = Model::linear(1.0).with_initial(InitialCondition::default());
        let s = Scheme::new(model, SchemeConfig::new(8, 16)).unwrap();
        let noise = NoisePath::sample(3, 16, 16, s.dt()).unwrap();
        let x = smooth_x0(8);
        let (next, _) = s.implicit_step(&x, noise.step(0), 0).unwrap();
        for j in 0..8 {
            let lam = s.basis().eigenvalues()[j];
            let want = (x.coeffs()[j] + noise.step(0)[j]) / (1.0 + lam * lam * s.dt());
            assert!((next.coeffs()[j] - want).abs() <= 1e-13);
        }
    }

    #[test]
    fn generic_noise_route_matches_constant_shortcut() {
        // BoundedSmooth with b = 0 is constant but goes through the grid route
        let mut grid_model = Model::reference();
        grid_model.diffusion = DiffusionSpec::BoundedSmooth { a: 0.7, b: 0.0 };
        let mut const_model = Model::reference();
        const_model.diffusion = DiffusionSpec::Constant { a: 0.7 };
        let cfg = SchemeConfig::new(8, 8);
        let a = Scheme::new(grid_model, cfg.clone()).unwrap();
        let b = Scheme::new(const_model, cfg).unwrap();
        let noise = NoisePath::sample(9, 16, 8, a.dt()).unwrap();
        let x = smooth_x0(8);
        let ta = a.noise_term(&x, noise.step(2)).unwrap();
        let tb = b.noise_term(&x, noise.step(2)).unwrap();
        assert!(ta.max_abs_diff(&tb) <= 1e-14);
    }

    #[test]
    fn newton_residual_meets_tolerance_and_converges_quadratically() {
        let s = Scheme::new(Model::reference(), SchemeConfig::new(16, 32)).unwrap();
        let noise = NoisePath::sample(1, 32, 32, s.dt()).unwrap();
        let mut x = s.initial_state();
        for k in 0..32 {
            let (next, rep) = s.implicit_step(&x, noise.step(k), k).unwrap();
            assert!(rep.converged);
            assert!(rep.residual <= 1e-12 * rep.rhs_norm);
            let h = &rep.residual_history;
            for w in h.windows(2) {
                let (a, b) = (w[0] / rep.rhs_norm, w[1] / rep.rhs_norm);
                if a < 1e-2 && b > 1e-14 {
                    // quadratic: e_{n+1} ≤ C e_n² with a generous constant
                    assert!(b <= 10.0 * a * a, "step {k}: {a:e} -> {b:e}");
                }
            }
            // residual of the accepted state, recomputed independently
            let lhs = s.basis().resolvent_apply(&next, s.dt(), 1).is_ok();
            assert!(lhs);
            x = next;
        }
    }

    #[test]
    fn implicit_equation_holds_at_accepted_state() {
        let s = Scheme::new(Model::reference(), SchemeConfig::new(12, 16)).unwrap();
        let noise = NoisePath::sample(4, 24, 16, s.dt()).unwrap();
        let x = s.initial_state();
        let (next, _) = s.implicit_step(&x, noise.step(0), 0).unwrap();
        let b = s.basis();
        let drift = crate::coefficients::apply_drift(&next, &s.model().drift, b).unwrap();
        let a_drift = b.apply_a_power(&drift, 1.0).unwrap();
        let a2 = b.apply_a_power(&next, 2.0).unwrap();
        let mut forcing = x.clone();
        for j in 1..=24 {
            let row = crate::coefficients::apply_diffusion_row(&x, &s.model().diffusion, j, b).unwrap();
            for (f, r) in forcing.coeffs_mut().iter_mut().zip(row.coeffs()) {
                *f += r * noise.increment(0, j);
            }
        }
        for i in 0..12 {
            let lhs = next.coeffs()[i] + s.dt() * a2.coeffs()[i] + s.dt() * a_drift.coeffs()[i];
            assert!((lhs - forcing.coeffs()[i]).abs() <= 1e-11, "mode {}", i + 1);
        }
    }

    #[test]
    fn dense_and_iterative_jacobian_solves_agree() {
        let s = Scheme::new(Model::reference(), SchemeConfig::new(10, 4)).unwrap();
        let x = smooth_x0(10).scaled(2.0);
        let lin = s.linearize(&x).unwrap();
        let b = SpectralField::from_coeffs((0..10).map(|i| 1.0 / (1.0 + i as f64)).collect());
        let it = lin.solve(&b, 0).unwrap();
        let dn = lin.solve_dense(&b, 0).unwrap();
        assert!(it.max_abs_diff(&dn) <= 1e-12 * dn.norm());
        let back = lin.apply(&it);
        assert!(back.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn linear_run_matches_iterated_resolvent() {
        let model = Model::linear(0.0).with_initial(InitialCondition::default());
        let cfg = SchemeConfig::new(8, 40).with_full_storage();
        let s = Scheme::new(model, cfg).unwrap();
        let noise = NoisePath::sample(1, 16, 40, s.dt()).unwrap();
        let traj = s.run(&noise).unwrap();
        let x0 = smooth_x0(8);
        for (k, st) in traj.steps.iter().zip(&traj.states) {
            for j in 0..8 {
                let lam = s.basis().eigenvalues()[j];
                let want = (1.0 + lam * lam * s.dt()).powi(-(*k as i32)) * x0.coeffs()[j];
                assert!((st.coeffs()[j] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn runs_are_bitwise_deterministic_and_strided() {
        let s = Scheme::new(Model::reference(), SchemeConfig::new(8, 600)).unwrap();
        let noise = NoisePath::sample(17, 16, 600, s.dt()).unwrap();
        let a = s.run(&noise).unwrap();
        let b = s.run(&noise).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.steps.first(), Some(&0));
        assert_eq!(a.steps.last(), Some(&600));
        assert_eq!(a.steps[1], 3);
        assert_eq!(a.newton_iters.len(), 600);
        assert!(a.states.iter().all(SpectralField::is_finite));
    }

    #[test]
    fn noise_mismatch_is_rejected() {
        let s = Scheme::new(Model::reference(), SchemeConfig::new(8, 16)).unwrap();
        let wrong_modes = NoisePath::sample(1, 8, 16, s.dt()).unwrap();
        let wrong_dt = NoisePath::sample(1, 16, 16, 2.0 * s.dt()).unwrap();
        assert!(s.run(&wrong_modes).is_err());
        assert!(s.run(&wrong_dt).is_err());
        assert!(SchemeConfig::new(8, 16).with_noise_modes(4).validate().is_err());
    }

    #[test]
    fn oversized_step_reports_divergence() {
        let mut model = Model::reference().with_initial(InitialCondition::Smooth { amplitude: 1e3 });
        model.diffusion = DiffusionSpec::Constant { a: 0.0 };
        model.drift = Drift::Polynomial {
            potential: Potential::new(0.0, 0.0, -50.0, 0.0, 10.0).unwrap(),
        };
        let mut cfg = SchemeConfig::new(8, 1);
        cfg.newton_max_iter = 5;
        let s = Scheme::new(model.with_domain(1.0, 10.0), cfg).unwrap();
        let noise = NoisePath::sample(1, 16, 1, s.dt()).unwrap();
        let err = s.run(&noise).unwrap_err();
        assert!(err.is_divergence(), "{err}");
    }

    #[test]
    fn yz_split_special_cases() {
        let mut det = Model::reference();
        det.diffusion = DiffusionSpec::Constant { a: 0.0 };
        let s = Scheme::new(det, SchemeConfig::new(8, 32).with_full_storage()).unwrap();
        let noise = NoisePath::sample(2, 16, 32, s.dt()).unwrap();
        let (y, z) = s.run_yz_split(&noise).unwrap();
        assert!(z.states.iter().all(|st| st.norm() == 0.0));
        assert!(y.final_state().norm() > 0.0);

        let lin = Model::linear(1.0).with_initial(InitialCondition::default());
        let s = Scheme::new(lin, SchemeConfig::new(8, 32).with_full_storage()).unwrap();
        let (y, z) = s.run_yz_split(&noise).unwrap();
        let x = s.run(&noise).unwrap();
        for k in 0..=32 {
            let want = s.basis().resolvent_apply(&smooth_x0(8), s.dt(), k as u32 + u32::from(k == 0)).unwrap();
            if k > 0 {
                assert!(y.states[k].max_abs_diff(&want) <= 1e-14);
            }
            let sum = SpectralField::from_coeffs(
                y.states[k].coeffs().iter().zip(z.states[k].coeffs()).map(|(a, b)| a + b).collect(),
            );
            assert!(sum.max_abs_diff(&x.states[k]) <= 1e-13);
        }
    }

    #[test]
    fn error_norms() {
        let a = SpectralField::from_coeffs(vec![1.0, 2.0]);
        let b = SpectralField::from_coeffs(vec![1.0, 2.0, 3.0]);
        assert_eq!(ErrorNorm::H0.distance_sq(1.0, &a, &b), 9.0);
        let lam3 = (3.0 * std::f64::consts::PI).powi(2);
        assert!((ErrorNorm::HMinus1.distance_sq(1.0, &a, &b) - 9.0 / lam3).abs() < 1e-15);
        assert_eq!(ErrorNorm::H0.distance_sq(1.0, &b, &b), 0.0);
    }
}
