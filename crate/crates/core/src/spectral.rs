//! Dirichlet-Laplacian eigensystem on `(0, L)` and the diagonal operators built on it.
//!
//! Eigenpairs are `λ_j = (jπ/L)²`, `e_j(x) = √(2/L) sin(jπx/L)`. Grid values live on the
//! `M_g` interior nodes `x_m = mL/(M_g+1)`, where the sine functions are exactly orthonormal
//! under the rectangle rule, so the synthesis/analysis pair is a scaled type-I discrete sine
//! transform.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Coefficients `v_j`, `j = 1..N`, of a function in `span{e_1..e_N}` (stored 0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    coeffs: Vec<f64>,
}

impl SpectralField {
    pub fn zeros(n: usize) -> Self {
        Self {
            coeffs: vec![0.0; n],
        }
    }

    pub fn from_coeffs(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    /// The basis vector `e_j` (1-based mode index) in an `n`-mode space.
    pub fn unit(n: usize, j: usize) -> Self {
        let mut f = Self::zeros(n);
        if (1..=n).contains(&j) {
            f.coeffs[j - 1] = 1.0;
        }
        f
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    /// ℍ⁰ norm (Euclidean norm of the coefficients).
    pub fn norm(&self) -> f64 {
        self.coeffs.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::from_coeffs(self.coeffs.iter().map(|v| c * v).collect())
    }

    /// Keep the first `n` modes (the projection `P^n`).
    pub fn truncated(&self, n: usize) -> Self {
        Self::from_coeffs(self.coeffs.iter().copied().take(n).collect())
    }

    /// Embed into an `n`-mode space by zero padding (truncates if `n` is smaller).
    pub fn zero_padded(&self, n: usize) -> Self {
        let mut c = self.coeffs.clone();
        c.resize(n, 0.0);
        Self::from_coeffs(c)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Field values at the interior nodes of a basis.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub values: Vec<f64>,
}

impl GridField {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone)]
pub struct DirichletBasis {
    length: f64,
    modes: usize,
    grid_size: usize,
    eigenvalues: Vec<f64>,
    nodes: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for DirichletBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DirichletBasis")
            .field("length", &self.length)
            .field("modes", &self.modes)
            .field("grid_size", &self.grid_size)
            .finish()
    }
}

impl DirichletBasis {
    pub fn new(length: f64, modes: usize, grid_size: usize) -> Result<Self> {
        if !(length > 0.0) || !length.is_finite() {
            return Err(Error::invalid("length", format!("must be positive, got {length}")));
        }
        if modes == 0 {
            return Err(Error::invalid("modes", "need at least one mode"));
        }
        if grid_size < 2 * modes {
            return Err(Error::invalid(
                "grid_size",
                format!("aliasing guard requires grid_size >= 2*modes = {}, got {grid_size}", 2 * modes),
            ));
        }
        let eigenvalues = (1..=modes).map(|j| (j as f64 * PI / length).powi(2)).collect();
        let h = length / (grid_size + 1) as f64;
        let nodes = (1..=grid_size).map(|m| m as f64 * h).collect();
        let fft = FftPlanner::new().plan_fft_forward(2 * (grid_size + 1));
        Ok(Self {
            length,
            modes,
            grid_size,
            eigenvalues,
            nodes,
            fft,
        })
    }

    /// Basis with the default grid `M_g = 2N`.
    pub fn with_default_grid(length: f64, modes: usize) -> Result<Self> {
        Self::new(length, modes, 2 * modes)
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    /// `λ_1..λ_N` (0-based storage).
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Quadrature weight of the node rule.
    pub fn weight(&self) -> f64 {
        self.length / (self.grid_size + 1) as f64
    }

    /// `λ_j` for any 1-based `j`, not only the first `N`.
    pub fn eigenvalue(&self, j: usize) -> f64 {
        (j as f64 * PI / self.length).powi(2)
    }

    /// `e_j(x)` for 1-based `j`.
    pub fn eigenfunction(&self, j: usize, x: f64) -> f64 {
        (2.0 / self.length).sqrt() * (j as f64 * PI * x / self.length).sin()
    }

    pub fn check(&self, f: &SpectralField) -> Result<()> {
        if f.len() != self.modes {
            return Err(Error::BasisMismatch {
                expected: self.modes,
                found: f.len(),
            });
        }
        Ok(())
    }

    // y_m = Σ_{j=1}^{len} c_j sin(π j m / (M+1)), m = 1..M
    fn dst1(&self, input: &[f64], out: &mut [f64]) {
        let m = self.grid_size;
        let n = 2 * (m + 1);
        debug_assert!(input.len() <= m && out.len() == m);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for (j, &c) in input.iter().enumerate() {
            buf[j + 1].re = c;
            buf[n - j - 1].re = -c;
        }
        self.fft.process(&mut buf);
        for (y, z) in out.iter_mut().zip(&buf[1..=m]) {
            *y = -0.5 * z.im;
        }
    }

    /// Grid values of `Σ_j c_j e_j` for up to `M_g` coefficients.
    pub fn synthesize(&self, coeffs: &[f64], out: &mut [f64]) {
        assert!(coeffs.len() <= self.grid_size, "more modes than grid nodes");
        self.dst1(coeffs, out);
        let s = (2.0 / self.length).sqrt();
        out.iter_mut().for_each(|v| *v *= s);
    }

    /// First `out.len()` quadrature projections `h Σ_m g_m e_j(x_m)` of grid values.
    pub fn analyze(&self, values: &[f64], out: &mut [f64]) {
        assert!(out.len() <= self.grid_size, "more modes than grid nodes");
        let mut full = vec![0.0; self.grid_size];
        self.dst1(values, &mut full);
        let s = self.weight() * (2.0 / self.length).sqrt();
        for (o, v) in out.iter_mut().zip(&full) {
            *o = s * v;
        }
    }

    pub fn to_grid(&self, f: &SpectralField) -> Result<GridField> {
        self.check(f)?;
        let mut values = vec![0.0; self.grid_size];
        self.synthesize(f.coeffs(), &mut values);
        Ok(GridField::new(values))
    }

    /// Quadrature projection onto the first `N` modes.
    pub fn to_spectral(&self, g: &GridField) -> Result<SpectralField> {
        if g.len() != self.grid_size {
            return Err(Error::DimensionMismatch(format!(
                "grid field has {} values, basis has {} nodes",
                g.len(),
                self.grid_size
            )));
        }
        let mut coeffs = vec![0.0; self.modes];
        self.analyze(&g.values, &mut coeffs);
        Ok(SpectralField::from_coeffs(coeffs))
    }

    /// Exact sine-series evaluation of `f` at `x`.
    pub fn eval_at(&self, f: &SpectralField, x: f64) -> f64 {
        f.coeffs()
            .iter()
            .enumerate()
            .map(|(i, c)| c * self.eigenfunction(i + 1, x))
            .sum()
    }

    /// Rectangle-rule inner product of two grid fields.
    pub fn grid_inner(&self, a: &GridField, b: &GridField) -> f64 {
        self.weight() * a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum::<f64>()
    }

    pub fn apply_a_power(&self, f: &SpectralField, s: f64) -> Result<SpectralField> {
        self.scale_modes(f, |lam| lam.powf(s))
    }

    /// `(Σ_j λ_j^α v_j²)^{1/2}`.
    pub fn sobolev_norm(&self, f: &SpectralField, alpha: f64) -> Result<f64> {
        self.check(f)?;
        Ok(f.coeffs()
            .iter()
            .zip(&self.eigenvalues)
            .map(|(v, lam)| lam.powf(alpha) * v * v)
            .sum::<f64>()
            .sqrt())
    }

    /// `e^{-A² t} f`.
    pub fn semigroup_apply(&self, f: &SpectralField, t: f64) -> Result<SpectralField> {
        if !(t >= 0.0) {
            return Err(Error::invalid("t", format!("semigroup time must be nonnegative, got {t}")));
        }
        self.scale_modes(f, |lam| (-lam * lam * t).exp())
    }

    /// `T_δt^m f = (I + δt A²)^{-m} f`.
    pub fn resolvent_apply(&self, f: &SpectralField, dt: f64, m: u32) -> Result<SpectralField> {
        if !(dt > 0.0) {
            return Err(Error::invalid("dt", format!("must be positive, got {dt}")));
        }
        if m == 0 {
            return Err(Error::invalid("m", "resolvent power must be at least 1"));
        }
        self.scale_modes(f, |lam| (1.0 + lam * lam * dt).powi(-(m as i32)))
    }

    fn scale_modes(&self, f: &SpectralField, factor: impl Fn(f64) -> f64) -> Result<SpectralField> {
        self.check(f)?;
        Ok(SpectralField::from_coeffs(
            f.coeffs()
                .iter()
                .zip(&self.eigenvalues)
                .map(|(v, &lam)| factor(lam) * v)
                .collect(),
        ))
    }

    /// Operator norm of `T_δt^m` from `span{e_1..e_N}` with the ℍ⁰ norm into the max-norm over
    /// the grid nodes: `max_m (Σ_j (1+λ_j²δt)^{-2m} e_j(x_m)²)^{1/2}`.
    pub fn resolvent_sup_norm(&self, dt: f64, m: u32) -> Result<f64> {
        if !(dt > 0.0) {
            return Err(Error::invalid("dt", format!("must be positive, got {dt}")));
        }
        let weights: Vec<f64> = self
            .eigenvalues
            .iter()
            .map(|lam| (1.0 + lam * lam * dt).powi(-2 * m as i32))
            .collect();
        Ok(self
            .nodes
            .iter()
            .map(|&x| {
                weights
                    .iter()
                    .enumerate()
                    .map(|(i, w)| w * self.eigenfunction(i + 1, x).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max))
    }

    /// Green function of `∂_t + A²` with Dirichlet conditions,
    /// `G(t,x,y) = Σ_j e^{-λ_j² t} e_j(x) e_j(y)`.
    ///
    /// The series is summed until the geometric tail bound
    /// `Σ_{j>J} (2/L) e^{-λ_j² t} ≤ b_{J+1} / (1 - e^{-(λ_{J+2}²-λ_{J+1}²) t})`
    /// drops below `rel_tol · |partial sum|`.
    pub fn green_eval(&self, t: f64, x: f64, y: f64, rel_tol: f64) -> Result<f64> {
        if !(t > 0.0) {
            return Err(Error::invalid("t", format!("Green function needs t > 0, got {t}")));
        }
        if !(rel_tol > 0.0) {
            return Err(Error::invalid("rel_tol", "must be positive"));
        }
        let l = self.length;
        for (name, p) in [("x", x), ("y", y)] {
            if !(0.0..=l).contains(&p) {
                return Err(Error::invalid(name, format!("{p} outside [0, {l}]")));
            }
        }
        if x == 0.0 || y == 0.0 || x == l || y == l {
            return Ok(0.0);
        }
        let amp = 2.0 / l;
        let mut sum = 0.0;
        let mut j = 1usize;
        loop {
            let lam = self.eigenvalue(j);
            sum += (-lam * lam * t).exp() * self.eigenfunction(j, x) * self.eigenfunction(j, y);
            let next = self.eigenvalue(j + 1);
            let after = self.eigenvalue(j + 2);
            let lead = amp * (-next * next * t).exp();
            let ratio = (-(after * after - next * next) * t).exp();
            let tail = lead / (1.0 - ratio);
            if tail <= rel_tol * sum.abs() || tail < f64::MIN_POSITIVE {
                return Ok(sum);
            }
            j += 1;
        }
    }
}

/// Empirical constants for the Green-function bounds over a set of times.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreenConstants {
    /// `sup_t t^{1/4} |G(t,x,y)|`
    pub upper: f64,
    /// `inf_t t^{1/4} G(t,x,x)`
    pub diagonal_lower: f64,
    /// `sup |G(t,x,y) - G(t,x,y')| t^{1/2} / |y - y'|` over the sampled triples
    pub lipschitz: f64,
}

/// Report `GreenConstants` at `(x, y)` over `times`, with Lipschitz pairs `(y, y')` taken from
/// `pairs`.
pub fn green_constants(
    basis: &DirichletBasis,
    x: f64,
    y: f64,
    times: &[f64],
    pairs: &[(f64, f64)],
    rel_tol: f64,
) -> Result<GreenConstants> {
    let mut upper = 0.0f64;
    let mut diagonal_lower = f64::INFINITY;
    let mut lipschitz = 0.0f64;
    for &t in times {
        let q = t.powf(0.25);
        upper = upper.max(q * basis.green_eval(t, x, y, rel_tol)?.abs());
        diagonal_lower = diagonal_lower.min(q * basis.green_eval(t, x, x, rel_tol)?);
        for &(y0, y1) in pairs {
            let dg = basis.green_eval(t, x, y0, rel_tol)? - basis.green_eval(t, x, y1, rel_tol)?;
            lipschitz = lipschitz.max(dg.abs() * t.sqrt() / (y0 - y1).abs());
        }
    }
    Ok(GreenConstants {
        upper,
        diagonal_lower,
        lipschitz,
    })
}
