use schsim::coefficients::DiffusionSpec;
use schsim::harness::{self, StudyConfig, StudyKind};
use schsim::model::{InitialCondition, Model};

fn config(model: Model, samples: usize) -> StudyConfig {
    StudyConfig {
        model,
        samples,
        ..StudyConfig::default()
    }
}

#[test]
fn deterministic_linear_problem_converges_at_first_order_in_time() {
    let model = Model::linear(0.0).with_initial(InitialCondition::default()).with_domain(4.0, 0.5);
    let mut cfg = config(model, 2);
    cfg.modes = vec![16];
    let r = harness::temporal_rate(&cfg).unwrap();
    assert!(r.levels.iter().all(|l| l.stderr == 0.0));
    let slope = r.slope().unwrap();
    assert!((slope - 1.0).abs() < 0.05, "{slope}");
    assert!(r.levels[4].error < r.levels[0].error);
}

#[test]
fn first_eigenfunction_has_no_spatial_error() {
    let model = Model::linear(0.0).with_initial(InitialCondition::Coefficients { coeffs: vec![1.0] });
    let mut cfg = config(model, 2);
    cfg.dt_exponents = vec![8];
    cfg.modes = vec![1, 2, 4];
    let r = harness::spatial_rate(&cfg).unwrap();
    assert!(r.levels.iter().all(|l| l.error == 0.0));
    assert!(r.slope().is_none() && r.fit.refused.is_some());
}

#[test]
fn doubling_noise_modes_moves_spatial_errors_by_less_than_one_stderr() {
    let mut cfg = config(Model::reference(), 40);
    cfg.dt_exponents = vec![9];
    cfg.modes = vec![4, 8, 16];
    let base = harness::spatial_rate(&cfg).unwrap();
    cfg.noise_factor = 4;
    let doubled = harness::spatial_rate(&cfg).unwrap();
    for (a, b) in base.levels.iter().zip(&doubled.levels) {
        assert!((a.error - b.error).abs() < a.stderr.max(b.stderr), "N={}: {} vs {}", a.value, a.error, b.error);
    }
}

#[test]
fn deterministic_smooth_increments_are_lipschitz_at_small_lags() {
    let mut model = Model::reference();
    model.diffusion = DiffusionSpec::constant(0.0).unwrap();
    let mut cfg = config(model, 2);
    cfg.modes = vec![16];
    cfg.lags = vec![1, 2, 4, 8, 16, 32, 64, 128];
    let r = harness::regularity(&cfg).unwrap();
    let small: Vec<_> = r.levels[..4].to_vec();
    let x: Vec<f64> = small.iter().map(|l| l.value).collect();
    let fit = schsim::stats::fit_rate(&small, &x).unwrap();
    assert!(fit.slope.unwrap() >= 0.9, "{:?}", fit.slope);
}

#[test]
fn increment_moments_are_symmetric_in_the_pair() {
    use schsim::integrator::{ErrorNorm, Scheme, SchemeConfig};
    use schsim::noise::NoisePath;
    let scheme = Scheme::new(Model::reference(), SchemeConfig::new(8, 64).with_full_storage()).unwrap();
    let noise = NoisePath::sample(3, 16, 64, scheme.dt()).unwrap();
    let t = scheme.run(&noise).unwrap();
    let (a, b) = (t.state_at(10).unwrap(), t.state_at(50).unwrap());
    assert_eq!(ErrorNorm::H0.distance_sq(1.0, a, b), ErrorNorm::H0.distance_sq(1.0, b, a));
}

#[test]
fn probe_and_density_studies_run_on_small_configs() {
    let mut cfg = config(Model::reference(), 4);
    cfg.dt_exponents = vec![4];
    cfg.modes = vec![8];
    let p = harness::malliavin_probe(&cfg).unwrap();
    assert!(p.table.summary.all_positive);
    assert_eq!(p.fraction_at_small_eps, 0.0);
    cfg.samples = 60;
    let d = harness::density_study(&cfg).unwrap();
    assert!((d.integral - 1.0).abs() < 0.02);
    assert_eq!(d.samples.len(), 60);
}

#[test]
fn probe_rejects_degenerate_diffusion_as_config_error() {
    let mut model = Model::reference();
    model.diffusion = DiffusionSpec::constant(0.0).unwrap();
    let err = config(model, 4).resolve(StudyKind::MalliavinProbe).unwrap_err();
    assert!(err.is_config());
}
