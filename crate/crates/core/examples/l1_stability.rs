//! Two nearby initial data; the L1 gap is compared with its exponential
//! growth bound using the observed second-moment supremum. The sum kernel
//! `0.5 (n+m)` is below `nm`, so `c0 = 1`.

use smolkit::analysis::{check_l1_stability, l1_distance, observed_second_moment_sup};
use smolkit::field::{Grid, MassField};
use smolkit::integrator::{run, RunConfig};
use smolkit::kernels::{DiffusionProfile, Kernel};

fn main() -> smolkit::Result<()> {
    let g = Grid::new(1, 1.0, 64)?;
    let n_max = 32;
    let bump = |x: f64| 0.2 + (-(x - 0.5).powi(2) / 0.02).exp();
    let f0 = MassField::from_fn(g, n_max, |n, x| if n <= 4 { bump(x[0]) / n as f64 } else { 0.0 })?;
    let g0 = MassField::from_fn(g, n_max, |n, x| {
        let shifted = bump((x[0] + 0.01).rem_euclid(1.0));
        if n <= 4 { shifted / n as f64 } else { 0.0 }
    })?;
    let k = Kernel::sum(0.5, n_max)?;
    let dp = DiffusionProfile::power_law(0.1, 0.5, n_max)?;
    let cfg = RunConfig::new(1.0, 5e-3).with_stride(0.1).with_snapshots();
    let a = run(&f0, &k, &dp, &cfg, &mut [])?;
    let b = run(&g0, &k, &dp, &cfg, &mut [])?;
    let sup = observed_second_moment_sup(a.snapshots.iter().chain(&b.snapshots));
    for (t, (fa, fb)) in a.times.iter().zip(a.snapshots.iter().zip(&b.snapshots)) {
        println!("t = {t:.1}  ||f - g||_1 = {:.4e}", l1_distance(fa, fb)?);
    }
    println!("{}", check_l1_stability(&a.times, &a.snapshots, &b.snapshots, &k, 1.0, sup)?);
    Ok(())
}
