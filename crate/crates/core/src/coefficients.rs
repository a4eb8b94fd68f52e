//! Drift and diffusion coefficients and their grid-based Nemytskii application.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{DirichletBasis, GridField, SpectralField};

/// Grid values above this magnitude are treated as a blow-up.
pub const DEFAULT_DIVERGENCE_THRESHOLD: f64 = 1e8;

/// Quartic potential `f(ξ) = c₄ξ⁴ + c₃ξ³ + c₂ξ² + c₁ξ + c₀` with `c₄ > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Potential {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
}

impl Potential {
    pub fn new(c0: f64, c1: f64, c2: f64, c3: f64, c4: f64) -> Result<Self> {
        let p = Self { c0, c1, c2, c3, c4 };
        p.validate()?;
        Ok(p)
    }

    /// `¼(ξ² − 1)²`
    pub fn double_well() -> Self {
        Self {
            c0: 0.25,
            c1: 0.0,
            c2: -0.5,
            c3: 0.0,
            c4: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.c0, self.c1, self.c2, self.c3, self.c4];
        if all.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("potential", "coefficients must be finite"));
        }
        if !(self.c4 > 0.0) {
            return Err(Error::invalid("c4", format!("leading coefficient must be positive, got {}", self.c4)));
        }
        Ok(())
    }

    pub fn value(&self, x: f64) -> f64 {
        (((self.c4 * x + self.c3) * x + self.c2) * x + self.c1) * x + self.c0
    }

    pub fn f_prime(&self, x: f64) -> f64 {
        ((4.0 * self.c4 * x + 3.0 * self.c3) * x + 2.0 * self.c2) * x + self.c1
    }

    pub fn f_second(&self, x: f64) -> f64 {
        (12.0 * self.c4 * x + 6.0 * self.c3) * x + 2.0 * self.c2
    }

    /// Max of `|f'|` over `[lo, hi]`, from the endpoints and the critical points of `f'`.
    pub fn max_abs_f_prime(&self, lo: f64, hi: f64) -> f64 {
        let mut cands = vec![lo, hi];
        // roots of f'' = 12c₄ξ² + 6c₃ξ + 2c₂
        let (a, b, c) = (12.0 * self.c4, 6.0 * self.c3, 2.0 * self.c2);
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let s = disc.sqrt();
            cands.extend([(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)]);
        }
        cands
            .into_iter()
            .filter(|x| (lo..=hi).contains(x))
            .map(|x| self.f_prime(x).abs())
            .fold(0.0, f64::max)
    }
}

/// Smooth cutoff `θ_R`: 1 on `[-R, R]`, 0 outside `(-R-1, R+1)`, C^∞ in between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutoffSpec {
    pub radius: f64,
}

fn bump_g(u: f64) -> f64 {
    if u > 0.0 {
        (-1.0 / u).exp()
    } else {
        0.0
    }
}

fn bump_g_prime(u: f64) -> f64 {
    if u > 0.0 {
        bump_g(u) / (u * u)
    } else {
        0.0
    }
}

impl CutoffSpec {
    pub fn new(radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::invalid("radius", format!("must be positive, got {radius}")));
        }
        Ok(Self { radius })
    }

    pub fn theta(&self, x: f64) -> f64 {
        let a = x.abs();
        if a <= self.radius {
            1.0
        } else if a >= self.radius + 1.0 {
            0.0
        } else {
            // g(u)/(g(u)+g(1-u)) rewritten to stay finite near both ends
            let u = self.radius + 1.0 - a;
            1.0 / (1.0 + (1.0 / u - 1.0 / (1.0 - u)).exp())
        }
    }

    pub fn theta_prime(&self, x: f64) -> f64 {
        let a = x.abs();
        if a <= self.radius || a >= self.radius + 1.0 {
            return 0.0;
        }
        let u = self.radius + 1.0 - a;
        let (g0, g1) = (bump_g(u), bump_g(1.0 - u));
        let (d0, d1) = (bump_g_prime(u), bump_g_prime(1.0 - u));
        let ds = (d0 * g1 + g0 * d1) / (g0 + g1).powi(2);
        // du/dx = -sign(x)
        -x.signum() * ds
    }
}

/// The Nemytskii drift `F`: zero, `f'`, or the truncated `θ_R f'`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Drift {
    Zero,
    Polynomial { potential: Potential },
    Truncated { potential: Potential, cutoff: CutoffSpec },
}

impl Drift {
    pub fn double_well() -> Self {
        Drift::Polynomial {
            potential: Potential::double_well(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Drift::Zero => Ok(()),
            Drift::Polynomial { potential } => potential.validate(),
            Drift::Truncated { potential, cutoff } => {
                potential.validate()?;
                CutoffSpec::new(cutoff.radius).map(|_| ())
            }
        }
    }

    pub fn potential(&self) -> Option<&Potential> {
        match self {
            Drift::Zero => None,
            Drift::Polynomial { potential } | Drift::Truncated { potential, .. } => Some(potential),
        }
    }

    /// Pointwise drift value.
    pub fn value(&self, x: f64) -> f64 {
        match self {
            Drift::Zero => 0.0,
            Drift::Polynomial { potential } => potential.f_prime(x),
            Drift::Truncated { potential, cutoff } => truncated_drift(potential, cutoff, x),
        }
    }

    /// Pointwise derivative of the drift.
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Drift::Zero => 0.0,
            Drift::Polynomial { potential } => potential.f_second(x),
            Drift::Truncated { potential, cutoff } => {
                cutoff.theta_prime(x) * potential.f_prime(x) + cutoff.theta(x) * potential.f_second(x)
            }
        }
    }
}

/// `θ_R(ξ) f'(ξ)`.
pub fn truncated_drift(p: &Potential, c: &CutoffSpec, x: f64) -> f64 {
    let th = c.theta(x);
    if th == 0.0 {
        0.0
    } else {
        th * p.f_prime(x)
    }
}

/// Diffusion coefficient families. All are globally Lipschitz and grow at most like `|ξ|^α`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusionSpec {
    /// `σ(ξ) = a`
    Constant { a: f64 },
    /// `σ(ξ) = a + b (1 + ξ²)^{α/2}`
    SublinearPower { a: f64, b: f64, alpha: f64 },
    /// `σ(ξ) = a + b / (1 + ξ²)`
    BoundedSmooth { a: f64, b: f64 },
}

impl DiffusionSpec {
    pub fn constant(a: f64) -> Result<Self> {
        let d = DiffusionSpec::Constant { a };
        d.validate()?;
        Ok(d)
    }

    pub fn sublinear_power(a: f64, b: f64, alpha: f64) -> Result<Self> {
        let d = DiffusionSpec::SublinearPower { a, b, alpha };
        d.validate()?;
        Ok(d)
    }

    pub fn bounded_smooth(a: f64, b: f64) -> Result<Self> {
        let d = DiffusionSpec::BoundedSmooth { a, b };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = match *self {
            DiffusionSpec::Constant { a } => (a, 0.0),
            DiffusionSpec::SublinearPower { a, b, alpha } => {
                if !(0.0..1.0).contains(&alpha) {
                    return Err(Error::invalid("alpha", format!("growth order must lie in [0, 1), got {alpha}")));
                }
                (a, b)
            }
            DiffusionSpec::BoundedSmooth { a, b } => (a, b),
        };
        if !(a >= 0.0) || !a.is_finite() {
            return Err(Error::invalid("a", format!("offset must be finite and >= 0, got {a}")));
        }
        if !(b >= 0.0) || !b.is_finite() {
            return Err(Error::invalid("b", format!("scale must be finite and >= 0, got {b}")));
        }
        let lip = self.estimate_lipschitz(-100.0, 100.0, 20_001);
        if !lip.is_finite() {
            return Err(Error::invalid("diffusion", "Lipschitz estimate is not finite"));
        }
        Ok(())
    }

    pub fn sigma(&self, x: f64) -> f64 {
        match *self {
            DiffusionSpec::Constant { a } => a,
            DiffusionSpec::SublinearPower { a, b, alpha } => a + b * (1.0 + x * x).powf(0.5 * alpha),
            DiffusionSpec::BoundedSmooth { a, b } => a + b / (1.0 + x * x),
        }
    }

    pub fn sigma_prime(&self, x: f64) -> f64 {
        match *self {
            DiffusionSpec::Constant { .. } => 0.0,
            DiffusionSpec::SublinearPower { b, alpha, .. } => {
                b * alpha * x * (1.0 + x * x).powf(0.5 * alpha - 1.0)
            }
            DiffusionSpec::BoundedSmooth { b, .. } => -2.0 * b * x / (1.0 + x * x).powi(2),
        }
    }

    /// `inf_ξ σ(ξ)`.
    pub fn infimum(&self) -> f64 {
        match *self {
            DiffusionSpec::Constant { a } => a,
            DiffusionSpec::SublinearPower { a, b, .. } => a + b,
            DiffusionSpec::BoundedSmooth { a, .. } => a,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(*self, DiffusionSpec::Constant { a } if a == 0.0)
    }

    /// Largest secant slope of `σ` over `samples` equispaced points of `[lo, hi]`.
    pub fn estimate_lipschitz(&self, lo: f64, hi: f64, samples: usize) -> f64 {
        let h = (hi - lo) / (samples - 1) as f64;
        let mut prev = self.sigma(lo);
        let mut best = 0.0f64;
        for i in 1..samples {
            let cur = self.sigma(lo + i as f64 * h);
            best = best.max((cur - prev).abs() / h);
            prev = cur;
        }
        best
    }

    /// `sup |σ'|` sampled on the same grid as [`Self::estimate_lipschitz`].
    pub fn sup_sigma_prime(&self, lo: f64, hi: f64, samples: usize) -> f64 {
        let h = (hi - lo) / (samples - 1) as f64;
        (0..samples)
            .map(|i| self.sigma_prime(lo + i as f64 * h).abs())
            .fold(0.0, f64::max)
    }
}

fn guard(values: &[f64], threshold: f64) -> Result<()> {
    for &v in values {
        if !v.is_finite() || v.abs() > threshold {
            return Err(Error::Overflow { value: v, threshold });
        }
    }
    Ok(())
}

/// `P^N F(f)`: pointwise drift on the grid, projected back to `N` modes.
pub fn apply_drift(f: &SpectralField, drift: &Drift, basis: &DirichletBasis) -> Result<SpectralField> {
    apply_drift_guarded(f, drift, basis, DEFAULT_DIVERGENCE_THRESHOLD)
}

pub fn apply_drift_guarded(
    f: &SpectralField,
    drift: &Drift,
    basis: &DirichletBasis,
    threshold: f64,
) -> Result<SpectralField> {
    let mut g = basis.to_grid(f)?;
    guard(&g.values, threshold)?;
    g.values.iter_mut().for_each(|v| *v = drift.value(*v));
    basis.to_spectral(&g)
}

/// `P^N[σ(f) e_j]` for a noise mode `1 ≤ j ≤ M_g`.
pub fn apply_diffusion_row(
    f: &SpectralField,
    diffusion: &DiffusionSpec,
    j: usize,
    basis: &DirichletBasis,
) -> Result<SpectralField> {
    if j == 0 || j > basis.grid_size() {
        return Err(Error::invalid(
            "j",
            format!("noise mode must lie in 1..={}, got {j}", basis.grid_size()),
        ));
    }
    let mut g = basis.to_grid(f)?;
    guard(&g.values, DEFAULT_DIVERGENCE_THRESHOLD)?;
    for (v, &x) in g.values.iter_mut().zip(basis.nodes()) {
        *v = diffusion.sigma(*v) * basis.eigenfunction(j, x);
    }
    basis.to_spectral(&g)
}

/// Pointwise potential energy `∫ f(X)` with the node rule plus the boundary contribution.
pub fn potential_energy(grid: &GridField, p: &Potential, basis: &DirichletBasis) -> f64 {
    basis.weight() * (grid.values.iter().map(|&v| p.value(v)).sum::<f64>() + p.value(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_project(basis: &DirichletBasis, values: impl Fn(f64) -> f64) -> Vec<f64> {
        let h = basis.weight();
        (1..=basis.modes())
            .map(|j| {
                basis
                    .nodes()
                    .iter()
                    .map(|&x| values(x) * basis.eigenfunction(j, x))
                    .sum::<f64>()
                    * h
            })
            .collect()
    }

    fn sample_field(n: usize, scale: f64) -> SpectralField {
        SpectralField::from_coeffs(
            (0..n)
                .map(|i| scale * (((i * 13 + 5) % 17) as f64 / 8.5 - 1.0) / (1.0 + i as f64))
                .collect(),
        )
    }

    #[test]
    fn double_well_derivatives() {
        let p = Potential::double_well();
        assert_eq!(p.f_prime(0.0), 0.0);
        assert!(p.f_prime(1.0).abs() < 1e-15);
        assert!(p.f_prime(-1.0).abs() < 1e-15);
        assert!((p.f_prime(2.0) - 6.0).abs() < 1e-14);
        assert!((p.f_second(0.0) + 1.0).abs() < 1e-15);
        assert!((p.value(1.0)).abs() < 1e-15);
        assert!(Potential::new(0.0, 0.0, 0.0, 0.0, 0.0).is_err());
        assert!(Potential::new(0.0, 0.0, 0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn sigma_examples() {
        let c = DiffusionSpec::constant(1.0).unwrap();
        assert_eq!(c.sigma(3.7), 1.0);
        assert_eq!(c.sigma_prime(3.7), 0.0);
        let s = DiffusionSpec::sublinear_power(0.5, 0.25, 0.5).unwrap();
        assert!((s.sigma(0.0) - 0.75).abs() < 1e-15);
        assert_eq!(s.infimum(), 0.75);
        assert!(DiffusionSpec::sublinear_power(0.5, 0.25, 1.0).is_err());
        assert!(DiffusionSpec::constant(-1.0).is_err());
        assert!(DiffusionSpec::bounded_smooth(0.1, -0.2).is_err());
    }

    #[test]
    fn sigma_prime_matches_central_differences() {
        let h = 1e-6;
        let families = [
            DiffusionSpec::sublinear_power(0.5, 0.25, 0.5).unwrap(),
            DiffusionSpec::sublinear_power(0.0, 1.0, 0.9).unwrap(),
            DiffusionSpec::bounded_smooth(0.3, 2.0).unwrap(),
        ];
        for d in families {
            for i in 0..100 {
                let x = -5.0 + 10.0 * (i as f64 + 0.37) / 100.0;
                let fd = (d.sigma(x + h) - d.sigma(x - h)) / (2.0 * h);
                let exact = d.sigma_prime(x);
                let rel = (fd - exact).abs() / exact.abs().max(1e-3);
                assert!(rel <= 1e-6, "{d:?} at {x}: fd {fd} exact {exact}");
            }
        }
    }

    #[test]
    fn lipschitz_estimate_matches_sup_derivative() {
        let families = [
            DiffusionSpec::constant(1.0).unwrap(),
            DiffusionSpec::sublinear_power(0.5, 0.25, 0.5).unwrap(),
            DiffusionSpec::sublinear_power(0.1, 2.0, 0.8).unwrap(),
            DiffusionSpec::bounded_smooth(0.3, 2.0).unwrap(),
        ];
        for d in families {
            let lip = d.estimate_lipschitz(-100.0, 100.0, 200_001);
            let sup = d.sup_sigma_prime(-100.0, 100.0, 200_001);
            assert!(lip.is_finite());
            if sup == 0.0 {
                assert_eq!(lip, 0.0);
            } else {
                assert!((lip - sup).abs() <= 0.05 * sup, "{d:?}: {lip} vs {sup}");
            }
        }
    }

    #[test]
    fn cutoff_support_and_monotonicity() {
        let c = CutoffSpec::new(2.0).unwrap();
        let p = Potential::double_well();
        for x in [-2.0, -1.3, 0.0, 0.7, 2.0] {
            assert_eq!(c.theta(x), 1.0);
            assert_eq!(truncated_drift(&p, &c, x), p.f_prime(x));
        }
        for x in [-3.0, -7.5, 3.0, 42.0] {
            assert_eq!(c.theta(x), 0.0);
            assert_eq!(truncated_drift(&p, &c, x), 0.0);
        }
        let mut prev = 1.0;
        for i in 1..2000 {
            let x = 2.0 + i as f64 / 2000.0;
            let th = c.theta(x);
            assert!((0.0..=1.0).contains(&th));
            assert!(th <= prev);
            assert_eq!(th, c.theta(-x));
            // strictly inside (0, 1) wherever the value is representable
            if (2.03..=2.97).contains(&x) {
                assert!(th > 0.0 && th < 1.0, "x={x} th={th}");
            }
            prev = th;
        }
        assert!(CutoffSpec::new(0.0).is_err());
    }

    #[test]
    fn truncated_drift_derivative_matches_differences() {
        let d = Drift::Truncated {
            potential: Potential::double_well(),
            cutoff: CutoffSpec::new(1.5).unwrap(),
        };
        let h = 1e-6;
        for i in 0..400 {
            let x = -3.0 + 6.0 * (i as f64 + 0.5) / 400.0;
            let fd = (d.value(x + h) - d.value(x - h)) / (2.0 * h);
            assert!((fd - d.derivative(x)).abs() <= 1e-5 * (1.0 + fd.abs()), "x={x}");
        }
    }

    #[test]
    fn truncated_drift_is_bounded() {
        let p = Potential::double_well();
        let c = CutoffSpec::new(1.5).unwrap();
        let bound = p.max_abs_f_prime(-2.5, 2.5);
        let sup = (0..=100_000)
            .map(|i| -3.5 + 7.0 * i as f64 / 100_000.0)
            .map(|x| truncated_drift(&p, &c, x).abs())
            .fold(0.0, f64::max);
        assert!(sup <= bound + 1e-12);
    }

    #[test]
    fn drift_examples() {
        let b = DirichletBasis::with_default_grid(1.0, 8).unwrap();
        let dw = Drift::double_well();
        let z = apply_drift(&SpectralField::zeros(8), &dw, &b).unwrap();
        assert!(z.coeffs().iter().all(|&v| v == 0.0));

        // grid values identically 1 are a root of f'
        let ones = b.to_spectral(&GridField::new(vec![1.0; b.grid_size()])).unwrap();
        let mut g = GridField::new(vec![1.0; b.grid_size()]);
        g.values.iter_mut().for_each(|v| *v = dw.value(*v));
        assert!(g.values.iter().all(|v| v.abs() < 1e-15));
        assert_eq!(ones.len(), 8);

        let f = sample_field(8, 0.8);
        let got = apply_drift(&f, &dw, &b).unwrap();
        let oracle = naive_project(&b, |x| dw.value(b.eval_at(&f, x)));
        for (a, o) in got.coeffs().iter().zip(&oracle) {
            assert!((a - o).abs() <= 1e-10);
        }
    }

    #[test]
    fn overflow_is_reported() {
        let b = DirichletBasis::with_default_grid(1.0, 4).unwrap();
        let f = SpectralField::from_coeffs(vec![1e9, 0.0, 0.0, 0.0]);
        assert!(matches!(
            apply_drift(&f, &Drift::double_well(), &b),
            Err(Error::Overflow { .. })
        ));
        let nan = SpectralField::from_coeffs(vec![f64::NAN, 0.0, 0.0, 0.0]);
        assert!(apply_diffusion_row(&nan, &DiffusionSpec::Constant { a: 1.0 }, 1, &b).is_err());
    }

    #[test]
    fn diffusion_row_examples() {
        let n = 8;
        let b = DirichletBasis::with_default_grid(1.0, n).unwrap();
        let one = DiffusionSpec::constant(1.0).unwrap();
        let f = sample_field(n, 0.5);
        for j in 1..=2 * n {
            let row = apply_diffusion_row(&f, &one, j, &b).unwrap();
            let want = SpectralField::unit(n, j);
            assert!(row.max_abs_diff(&want) < 1e-12, "mode {j}");
        }
        let s = DiffusionSpec::sublinear_power(0.5, 0.25, 0.5).unwrap();
        let row = apply_diffusion_row(&SpectralField::zeros(n), &s, 3, &b).unwrap();
        assert!(row.max_abs_diff(&SpectralField::unit(n, 3).scaled(0.75)) < 1e-12);
        assert!(apply_diffusion_row(&f, &s, 0, &b).is_err());
        assert!(apply_diffusion_row(&f, &s, 2 * n + 1, &b).is_err());

        for j in [1, 5, 11, 16] {
            let row = apply_diffusion_row(&f, &s, j, &b).unwrap();
            let oracle = naive_project(&b, |x| s.sigma(b.eval_at(&f, x)) * b.eigenfunction(j, x));
            for (a, o) in row.coeffs().iter().zip(&oracle) {
                assert!((a - o).abs() <= 1e-10);
            }
        }
    }

    proptest! {
        #[test]
        fn drift_is_one_sided_lipschitz(
            u in proptest::collection::vec(-1.5f64..1.5, 16),
            v in proptest::collection::vec(-1.5f64..1.5, 16),
        ) {
            let b = DirichletBasis::with_default_grid(1.0, 16).unwrap();
            let p = Potential::double_well();
            let dw = Drift::double_well();
            let (u, v) = (SpectralField::from_coeffs(u), SpectralField::from_coeffs(v));
            let (gu, gv) = (b.to_grid(&u).unwrap(), b.to_grid(&v).unwrap());
            let range = gu.values.iter().chain(&gv.values).fold(0.0f64, |m, x| m.max(x.abs()));
            // sup |min(f'', 0)| over the sampled range; f'' = 3ξ² - 1 attains its minimum at 0
            let lambda = (0..=1000)
                .map(|i| -range + 2.0 * range * i as f64 / 1000.0)
                .map(|x| (-p.f_second(x)).max(0.0))
                .fold(0.0, f64::max);
            let du: Vec<f64> = gu.values.iter().zip(&gv.values).map(|(a, c)| a - c).collect();
            let df: Vec<f64> = gu.values.iter().zip(&gv.values).map(|(a, c)| dw.value(*a) - dw.value(*c)).collect();
            let h = b.weight();
            let lhs: f64 = h * du.iter().zip(&df).map(|(a, c)| a * c).sum::<f64>();
            let norm2: f64 = h * du.iter().map(|a| a * a).sum::<f64>();
            prop_assert!(lhs >= -lambda * norm2 - 1e-12);
        }
    }
}
