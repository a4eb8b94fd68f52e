//! Wall-clock cost of full trajectories of the reference model at the study resolutions.
//!
//! `cargo run --release --example step_throughput`

use std::time::Instant;

use schsim::integrator::{Scheme, SchemeConfig};
use schsim::model::Model;
use schsim::noise::NoisePath;

fn main() -> schsim::Result<()> {
    for (n, k) in [(16, 64), (64, 1024), (64, 4096), (128, 8192)] {
        let scheme = Scheme::new(Model::reference(), SchemeConfig::new(n, k))?;
        let start = Instant::now();
        let noise = NoisePath::sample(1, 2 * n, k, scheme.dt())?;
        let sampled = start.elapsed();
        let traj = scheme.run(&noise)?;
        let iters: usize = traj.newton_iters.iter().sum();
        println!(
            "N={n:<4} K={k:<5} noise {:>9.3?}  total {:>9.3?}  Newton iterations/step {:.2}  ‖X_K‖ {:.6}",
            sampled,
            start.elapsed(),
            iters as f64 / k as f64,
            traj.final_state().norm()
        );
    }
    Ok(())
}
