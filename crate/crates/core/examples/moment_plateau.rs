//! Higher moments and pair moments should stop changing once the mass cutoff
//! is large enough.

use smolkit::analysis::check_moment_bound;
use smolkit::field::{Grid, MassField};
use smolkit::integrator::{run, RunConfig};
use smolkit::kernels::{DiffusionProfile, Kernel};

fn main() -> smolkit::Result<()> {
    let g = Grid::new(1, 1.0, 16)?;
    let mut records = Vec::new();
    for n_max in [32, 64, 128, 256] {
        let f0 = MassField::monodisperse(g, n_max, |x| 0.5 + 0.5 * (std::f64::consts::TAU * x[0]).cos())?;
        let k = Kernel::sum_power(1.0, 0.5, n_max)?;
        let dp = DiffusionProfile::constant(1.0, n_max)?;
        let mut cfg = RunConfig::new(2.0, 5e-3).with_stride(0.02);
        cfg.pair_moment_exponents = vec![1.0];
        records.push(run(&f0, &k, &dp, &cfg, &mut [])?);
    }
    let p = check_moment_bound(&records, 2.0)?;
    for (i, n) in [32, 64, 128, 256].iter().enumerate() {
        println!(
            "n_max = {n:>3}: sup int X2 = {:.6}  int int Y1 = {:.6}  int int Y1_hat = {:.6}",
            p.sup_moment[i], p.pair_integral[i], p.pair_hat_integral[i]
        );
    }
    println!("{}", p.report);
    Ok(())
}
