//! Tangent processes of the fully discrete scheme with respect to individual noise increments,
//! and the Malliavin covariance matrix they generate at a set of points.
//!
//! Differentiating one implicit step with respect to `Δβ_j^l` gives the seed
//! `J_{l+1} D_{l+1} = P^N[σ(X_l) e_j]`, and for `k > l`
//!
//! ```text
//! J_{k+1} D_{k+1} = D_k + P^N[σ'(X_k) D_k Σ_j' e_j' Δβ_j'^k]
//! ```
//!
//! where `J_{k+1} = (I + δtA²) + δt A P^N[F'(X_{k+1}) ·]` is the Jacobian of the implicit map at
//! the accepted state.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dense;
use crate::error::{Error, Result};
use crate::integrator::{Scheme, SchemeConfig, Trajectory};
use crate::model::Model;
use crate::noise::NoisePath;
use crate::spectral::SpectralField;

/// Derivative direction: noise mode `mode` (1-based) at step `step`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TangentDirection {
    pub step: usize,
    pub mode: usize,
}

fn full_state(traj: &Trajectory, k: usize) -> Result<&SpectralField> {
    traj.state_at(k).ok_or_else(|| {
        Error::Precondition(format!(
            "trajectory does not store step {k}; tangents need full storage"
        ))
    })
}

fn check_pair(scheme: &Scheme, traj: &Trajectory, noise: &NoisePath) -> Result<()> {
    scheme.check_noise(noise)?;
    if traj.total_steps() != noise.steps() || (traj.dt - noise.dt()).abs() > 1e-12 * traj.dt {
        return Err(Error::DimensionMismatch(format!(
            "trajectory ({} steps, dt {}) does not match noise ({} steps, dt {})",
            traj.total_steps(),
            traj.dt,
            noise.steps(),
            noise.dt()
        )));
    }
    Ok(())
}

/// Tangent at the final step along one noise direction, solved matrix-free.
pub fn propagate_tangent(
    scheme: &Scheme,
    traj: &Trajectory,
    noise: &NoisePath,
    dir: TangentDirection,
) -> Result<SpectralField> {
    let seed = unit_increments(noise.modes(), dir.mode)?;
    propagate_tangent_scaled(scheme, traj, noise, dir.step, &seed)
}

fn unit_increments(modes: usize, mode: usize) -> Result<Vec<f64>> {
    if mode == 0 || mode > modes {
        return Err(Error::invalid("mode", format!("noise mode must lie in 1..={modes}, got {mode}")));
    }
    let mut v = vec![0.0; modes];
    v[mode - 1] = 1.0;
    Ok(v)
}

/// Tangent along an arbitrary combination of the step-`step` increments (`seed[j-1]` weights
/// mode `j`).
pub fn propagate_tangent_scaled(
    scheme: &Scheme,
    traj: &Trajectory,
    noise: &NoisePath,
    step: usize,
    seed: &[f64],
) -> Result<SpectralField> {
    check_pair(scheme, traj, noise)?;
    let k_total = noise.steps();
    if step >= k_total {
        return Err(Error::invalid("step", format!("source step must be < {k_total}, got {step}")));
    }
    let x_l = full_state(traj, step)?;
    let forcing = scheme.noise_term(x_l, seed)?;
    let mut d = scheme
        .linearize(full_state(traj, step + 1)?)
        .map_err(|e| e.at_step(step))?
        .solve(&forcing, step)?;
    for k in step + 1..k_total {
        let x_k = full_state(traj, k)?;
        let extra = scheme.noise_term_derivative(x_k, &d, noise.step(k))?;
        let rhs = SpectralField::from_coeffs(d.coeffs().iter().zip(extra.coeffs()).map(|(a, b)| a + b).collect());
        d = scheme
            .linearize(full_state(traj, k + 1)?)
            .map_err(|e| e.at_step(k))?
            .solve(&rhs, k)?;
    }
    Ok(d)
}

/// `C_ij = Σ_l Σ_j' δt D^{(l,j')}(x_i) D^{(l,j')}(x_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MalliavinMatrix {
    pub points: Vec<f64>,
    pub entries: DMatrix<f64>,
    /// Cutoff radius of the drift, `None` for the untruncated drift.
    pub radius: Option<f64>,
}

impl MalliavinMatrix {
    pub fn dim(&self) -> usize {
        self.points.len()
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace()
    }

    /// Smallest eigenvalue and its unit eigenvector, i.e. the minimizer of `ξᵀCξ` on the sphere.
    pub fn min_eigen(&self) -> (f64, Vec<f64>) {
        let eig = SymmetricEigen::new(self.entries.clone());
        let (i, &lam) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty matrix");
        (lam, eig.eigenvectors.column(i).iter().copied().collect())
    }

    pub fn is_psd(&self) -> bool {
        self.min_eigen().0 >= -1e-10 * self.trace().abs()
    }
}

pub fn validate_points(points: &[f64], length: f64) -> Result<()> {
    if points.is_empty() {
        return Err(Error::invalid("points", "need at least one evaluation point"));
    }
    for &x in points {
        if !(x > 0.0 && x < length) {
            return Err(Error::invalid("points", format!("{x} is not interior to (0, {length})")));
        }
    }
    for (i, a) in points.iter().enumerate() {
        if points[..i].iter().any(|b| b == a) {
            return Err(Error::invalid("points", format!("coincident evaluation points at {a}")));
        }
    }
    Ok(())
}

/// Assemble the Malliavin matrix by one forward sweep carrying every active tangent.
///
/// The step maps are assembled as dense `N × N` quadrature matrices and applied to all tangents
/// at once; this route shares no code with [`propagate_tangent`].
pub fn malliavin_matrix(
    scheme: &Scheme,
    traj: &Trajectory,
    noise: &NoisePath,
    points: &[f64],
) -> Result<MalliavinMatrix> {
    check_pair(scheme, traj, noise)?;
    let basis = scheme.basis();
    validate_points(points, basis.length())?;
    let model = scheme.model();
    let n = basis.modes();
    let m_noise = noise.modes();
    let k_total = noise.steps();
    let h = basis.weight();
    let dt = scheme.dt();
    let e = dense::synthesis_matrix(basis, n);
    let e_noise = dense::synthesis_matrix(basis, m_noise);
    let lambdas = basis.eigenvalues();

    let mut tangents = DMatrix::<f64>::zeros(n, 0);
    let mut grid = vec![0.0; basis.grid_size()];
    let mut xi = vec![0.0; basis.grid_size()];
    for k in 0..k_total {
        let x_k = full_state(traj, k)?;
        let x_next = full_state(traj, k + 1)?;

        basis.synthesize(x_next.coeffs(), &mut grid);
        let slope: Vec<f64> = grid.iter().map(|&u| model.drift.derivative(u)).collect();
        let mut jac = dense::weighted_gram(h, &e, &slope, &e);
        for i in 0..n {
            jac.row_mut(i).scale_mut(dt * lambdas[i]);
            jac[(i, i)] += 1.0 + dt * lambdas[i] * lambdas[i];
        }
        let lu = jac.lu();

        basis.synthesize(x_k.coeffs(), &mut grid);
        if tangents.ncols() > 0 {
            basis.synthesize(noise.step(k), &mut xi);
            let w: Vec<f64> = grid
                .iter()
                .zip(&xi)
                .map(|(&u, &z)| model.diffusion.sigma_prime(u) * z)
                .collect();
            let mut step_map = dense::weighted_gram(h, &e, &w, &e);
            for i in 0..n {
                step_map[(i, i)] += 1.0;
            }
            let moved = &step_map * &tangents;
            tangents = lu
                .solve(&moved)
                .ok_or_else(|| Error::LinearSolveFailed {
                    step: k,
                    reason: "singular Jacobian in tangent sweep".into(),
                })?;
        }
        let sig: Vec<f64> = grid.iter().map(|&u| model.diffusion.sigma(u)).collect();
        let seeds = dense::weighted_gram(h, &e, &sig, &e_noise);
        let born = lu.solve(&seeds).ok_or_else(|| Error::LinearSolveFailed {
            step: k,
            reason: "singular Jacobian in tangent seed".into(),
        })?;
        let old = tangents.ncols();
        tangents = tangents.resize_horizontally(old + m_noise, 0.0);
        tangents.columns_mut(old, m_noise).copy_from(&born);
    }

    let phi = DMatrix::from_fn(points.len(), n, |i, j| basis.eigenfunction(j + 1, points[i]));
    let values = phi * tangents;
    let d = points.len();
    let mut entries = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let s: f64 = values.row(i).iter().zip(values.row(j).iter()).map(|(a, b)| a * b).sum();
            entries[(i, j)] = dt * s;
            entries[(j, i)] = dt * s;
        }
    }
    let radius = match model.drift {
        crate::coefficients::Drift::Truncated { cutoff, .. } => Some(cutoff.radius),
        _ => None,
    };
    Ok(MalliavinMatrix {
        points: points.to_vec(),
        entries,
        radius,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub eps: f64,
    pub empirical_fraction: f64,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub samples: usize,
    pub min: f64,
    pub q05: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub q95: f64,
    pub max: f64,
    pub all_positive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTable {
    pub rows: Vec<ProbeRow>,
    /// `λ_min(C)` per sample, in sample order.
    pub lambda_min: Vec<f64>,
    pub summary: ProbeSummary,
}

impl ProbeTable {
    /// Empirical `P(λ_min ≤ eps)` for any threshold.
    pub fn fraction_below(&self, eps: f64) -> f64 {
        self.lambda_min.iter().filter(|&&l| l <= eps).count() as f64 / self.lambda_min.len() as f64
    }
}

/// Sample seed for index `i` under `base`.
pub fn sample_seed(base: u64, i: usize) -> u64 {
    base ^ i as u64
}

/// `λ_min` of the Malliavin matrix over `samples` independent paths, and the empirical
/// distribution function of `λ_min` on `eps_grid`.
pub fn nondegeneracy_probe(
    model: &Model,
    config: &SchemeConfig,
    points: &[f64],
    eps_grid: &[f64],
    samples: usize,
    base_seed: u64,
) -> Result<ProbeTable> {
    let inf = model.diffusion.infimum();
    if !(inf > 0.0) {
        return Err(Error::Precondition(format!(
            "non-degeneracy probe needs inf sigma > 0, diffusion has infimum {inf}"
        )));
    }
    if samples == 0 {
        return Err(Error::invalid("samples", "need at least one sample"));
    }
    let scheme = Scheme::new(model.clone(), config.clone().with_full_storage())?;
    validate_points(points, model.length)?;
    let lambda_min = (0..samples)
        .into_par_iter()
        .map(|i| {
            let run = || -> Result<f64> {
                let noise =
                    NoisePath::sample(sample_seed(base_seed, i), config.noise_modes, config.steps, scheme.dt())?;
                let traj = scheme.run(&noise)?;
                Ok(malliavin_matrix(&scheme, &traj, &noise, points)?.min_eigen().0)
            };
            run().map_err(|e| e.at_sample(i))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut rows = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let count = lambda_min.iter().filter(|&&l| l <= eps).count();
        rows.push(ProbeRow {
            eps,
            empirical_fraction: count as f64 / samples as f64,
            sample_count: samples,
        });
    }
    let summary = summarize(&lambda_min);
    Ok(ProbeTable {
        rows,
        lambda_min,
        summary,
    })
}

fn summarize(values: &[f64]) -> ProbeSummary {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| crate::stats::quantile_sorted(&sorted, p);
    ProbeSummary {
        samples: values.len(),
        min: sorted[0],
        q05: q(0.05),
        q25: q(0.25),
        median: q(0.5),
        q75: q(0.75),
        q95: q(0.95),
        max: *sorted.last().expect("non-empty"),
        all_positive: sorted[0] > 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{CutoffSpec, DiffusionSpec, Drift, Potential};

    fn setup(model: Model, n: usize, k: usize, seed: u64) -> (Scheme, NoisePath, Trajectory) {
        let scheme = Scheme::new(model, SchemeConfig::new(n, k).with_full_storage()).unwrap();
        let noise = NoisePath::sample(seed, scheme.config().noise_modes, k, scheme.dt()).unwrap();
        let traj = scheme.run(&noise).unwrap();
        (scheme, noise, traj)
    }

    fn rel_err(a: &SpectralField, b: &SpectralField) -> f64 {
        let diff: f64 = a.coeffs().iter().zip(b.coeffs()).map(|(x, y)| (x - y).powi(2)).sum();
        diff.sqrt() / b.norm()
    }

    // C_ik = sum_l dt sum_{j<=N} a^2 (1 + lambda_j^2 dt)^(-2(K-l)) e_j(x_i) e_j(x_k)
    fn closed_sum(a: f64, length: f64, n: usize, k_total: usize, dt: f64, xi: f64, xk: f64) -> f64 {
        let mut total = 0.0;
        for l in 0..k_total {
            for j in 1..=n {
                let lam = (j as f64 * std::f64::consts::PI / length).powi(2);
                let e = |x: f64| (2.0 / length).sqrt() * (j as f64 * std::f64::consts::PI * x / length).sin();
                total += dt * a * a * (1.0 + lam * lam * dt).powi(-2 * (k_total - l) as i32) * e(xi) * e(xk);
            }
        }
        total
    }

    #[test]
    fn linear_tangent_is_resolvent_power() {
        let (scheme, noise, traj) = setup(Model::linear(1.0), 8, 20, 3);
        for (l, j) in [(0, 1), (7, 3), (19, 8), (5, 12)] {
            let d = propagate_tangent(&scheme, &traj, &noise, TangentDirection { step: l, mode: j }).unwrap();
            for i in 1..=8 {
                let expect = if i == j {
                    (1.0 + scheme.basis().eigenvalue(j).powi(2) * scheme.dt()).powi(-((20 - l) as i32))
                } else {
                    0.0
                };
                assert!((d.coeffs()[i - 1] - expect).abs() < 1e-13, "l={l} j={j} i={i}");
            }
        }
    }

    #[test]
    fn tangent_matches_finite_difference() {
        let model = Model::reference().with_domain(4.0, 0.5);
        let scheme = Scheme::new(model, SchemeConfig::new(16, 64).with_noise_modes(16).with_full_storage()).unwrap();
        let noise = NoisePath::sample(11, 16, 64, scheme.dt()).unwrap();
        let traj = scheme.run(&noise).unwrap();
        let h = 1e-5;
        for (l, j) in [(0, 1), (10, 5), (40, 16), (63, 2), (30, 11)] {
            let d = propagate_tangent(&scheme, &traj, &noise, TangentDirection { step: l, mode: j }).unwrap();
            let plus = scheme.run(&noise.perturbed(l, j, h)).unwrap();
            let minus = scheme.run(&noise.perturbed(l, j, -h)).unwrap();
            let fd = SpectralField::from_coeffs(
                plus.final_state()
                    .coeffs()
                    .iter()
                    .zip(minus.final_state().coeffs())
                    .map(|(p, m)| (p - m) / (2.0 * h))
                    .collect(),
            );
            assert!(rel_err(&d, &fd) < 1e-4, "l={l} j={j} err {}", rel_err(&d, &fd));
        }
    }

    #[test]
    fn tangent_is_linear_in_seed() {
        let (scheme, noise, traj) = setup(Model::reference(), 8, 16, 5);
        let base = propagate_tangent(&scheme, &traj, &noise, TangentDirection { step: 3, mode: 2 }).unwrap();
        let mut seed = vec![0.0; noise.modes()];
        seed[1] = -3.5;
        let scaled = propagate_tangent_scaled(&scheme, &traj, &noise, 3, &seed).unwrap();
        assert!(scaled.max_abs_diff(&base.scaled(-3.5)) < 1e-12 * scaled.norm().max(1.0));
    }

    #[test]
    fn rejects_bad_directions_and_strided_trajectories() {
        let (scheme, noise, traj) = setup(Model::reference(), 8, 16, 5);
        assert!(propagate_tangent(&scheme, &traj, &noise, TangentDirection { step: 16, mode: 1 }).is_err());
        assert!(propagate_tangent(&scheme, &traj, &noise, TangentDirection { step: 0, mode: 0 }).is_err());
        let strided = Scheme::new(Model::reference(), SchemeConfig::new(8, 1024)).unwrap();
        let long = NoisePath::sample(1, 16, 1024, strided.dt()).unwrap();
        let traj = strided.run(&long).unwrap();
        assert!(matches!(
            propagate_tangent(&strided, &traj, &long, TangentDirection { step: 0, mode: 1 }),
            Err(Error::Precondition(_))
        ));
        let other = NoisePath::sample(5, 16, 8, 1.0 / 16.0).unwrap();
        assert!(propagate_tangent(&scheme, &traj, &other, TangentDirection { step: 0, mode: 1 }).is_err());
    }

    #[test]
    fn matrix_matches_closed_sum() {
        let model = Model::linear(1.0).with_domain(2.0, 0.25);
        let (scheme, noise, traj) = setup(model, 16, 32, 9);
        let pts = [0.6, 1.4];
        let c = malliavin_matrix(&scheme, &traj, &noise, &pts).unwrap();
        for i in 0..2 {
            for k in 0..2 {
                let want = closed_sum(1.0, 2.0, 16, 32, scheme.dt(), pts[i], pts[k]);
                assert!((c.entries[(i, k)] - want).abs() < 1e-10, "{i}{k}: {} vs {want}", c.entries[(i, k)]);
            }
        }
        assert_eq!(c.entries[(0, 1)].to_bits(), c.entries[(1, 0)].to_bits());
        assert!(c.min_eigen().0 > 0.0);
        assert_eq!(c.radius, None);
    }

    #[test]
    fn matrix_scales_quadratically_in_sigma() {
        let (s1, n1, t1) = setup(Model::linear(1.0), 8, 16, 2);
        let (s2, n2, t2) = setup(Model::linear(2.0), 8, 16, 2);
        let pts = [0.3, 0.7];
        let c1 = malliavin_matrix(&s1, &t1, &n1, &pts).unwrap();
        let c2 = malliavin_matrix(&s2, &t2, &n2, &pts).unwrap();
        for (a, b) in c1.entries.iter().zip(c2.entries.iter()) {
            assert!((4.0 * a - b).abs() < 1e-12 * b.abs().max(1e-3));
        }
    }

    #[test]
    fn sweep_agrees_with_per_direction_tangents() {
        let (scheme, noise, traj) = setup(Model::reference(), 8, 8, 21);
        let pts = [0.2, 0.55, 0.9];
        let c = malliavin_matrix(&scheme, &traj, &noise, &pts).unwrap();
        let mut oracle = DMatrix::<f64>::zeros(3, 3);
        for l in 0..8 {
            for j in 1..=noise.modes() {
                let d = propagate_tangent(&scheme, &traj, &noise, TangentDirection { step: l, mode: j }).unwrap();
                let v: Vec<f64> = pts.iter().map(|&x| scheme.basis().eval_at(&d, x)).collect();
                for a in 0..3 {
                    for b in 0..3 {
                        oracle[(a, b)] += scheme.dt() * v[a] * v[b];
                    }
                }
            }
        }
        let scale = oracle.amax();
        assert!((&c.entries - &oracle).amax() < 1e-10 * scale);
        assert!(c.is_psd());
    }

    #[test]
    fn large_cutoff_leaves_tangent_bitwise_unchanged() {
        let plain = Model::reference();
        let mut cut = plain.clone();
        cut.drift = Drift::Truncated {
            potential: Potential::double_well(),
            cutoff: CutoffSpec::new(50.0).unwrap(),
        };
        let (s1, n1, t1) = setup(plain, 8, 32, 4);
        let (s2, n2, t2) = setup(cut, 8, 32, 4);
        let dir = TangentDirection { step: 2, mode: 3 };
        let d1 = propagate_tangent(&s1, &t1, &n1, dir).unwrap();
        let d2 = propagate_tangent(&s2, &t2, &n2, dir).unwrap();
        assert!(d1.coeffs().iter().zip(d2.coeffs()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let c = malliavin_matrix(&s2, &t2, &n2, &[0.5]).unwrap();
        assert_eq!(c.radius, Some(50.0));
    }

    #[test]
    fn coincident_or_boundary_points_rejected() {
        let (scheme, noise, traj) = setup(Model::linear(1.0), 4, 4, 1);
        assert!(malliavin_matrix(&scheme, &traj, &noise, &[0.5, 0.5]).is_err());
        assert!(malliavin_matrix(&scheme, &traj, &noise, &[0.0]).is_err());
        assert!(malliavin_matrix(&scheme, &traj, &noise, &[]).is_err());
    }

    #[test]
    fn probe_on_linear_model_is_a_step_function() {
        let model = Model::linear(1.0);
        let cfg = SchemeConfig::new(8, 16);
        let pts = [0.3, 0.7];
        let dt = model.horizon / 16.0;
        let oracle = {
            let m = DMatrix::from_fn(2, 2, |i, k| closed_sum(1.0, 1.0, 8, 16, dt, pts[i], pts[k]));
            SymmetricEigen::new(m).eigenvalues.min()
        };
        let eps = [0.0, 0.5 * oracle, 2.0 * oracle];
        let table = nondegeneracy_probe(&model, &cfg, &pts, &eps, 6, 77).unwrap();
        for l in &table.lambda_min {
            assert!((l - oracle).abs() < 1e-10);
        }
        let fr: Vec<f64> = table.rows.iter().map(|r| r.empirical_fraction).collect();
        assert_eq!(fr, vec![0.0, 0.0, 1.0]);
        assert!(table.summary.all_positive);
    }

    #[test]
    fn probe_fractions_monotone_on_nonlinear_model() {
        let cfg = SchemeConfig::new(8, 16);
        let eps: Vec<f64> = (0..12).map(|i| 10f64.powi(i - 10)).collect();
        let table = nondegeneracy_probe(&Model::reference(), &cfg, &[0.3, 0.7], &eps, 8, 1).unwrap();
        assert!(table.rows.windows(2).all(|w| w[0].empirical_fraction <= w[1].empirical_fraction));
        assert!(table.summary.all_positive);
        assert_eq!(table.fraction_below(0.0), 0.0);
    }

    #[test]
    fn probe_rejects_degenerate_diffusion() {
        let mut model = Model::reference();
        model.diffusion = DiffusionSpec::constant(0.0).unwrap();
        let r = nondegeneracy_probe(&model, &SchemeConfig::new(4, 4), &[0.5], &[0.1], 2, 0);
        assert!(matches!(r, Err(Error::Precondition(_))));
    }
}
