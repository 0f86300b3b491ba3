//! Tracks `sup_x X1_hat / (d(1)^(d/2) u)` for a sum kernel in two dimensions,
//! where `u` solves the heat equation from the initial mass-weighted density.

use smolkit::analysis::{HeatMajorantMonitor, MassDriftMonitor, Monitor};
use smolkit::field::{Grid, MassField};
use smolkit::integrator::{run, RunConfig};
use smolkit::kernels::{DiffusionProfile, Kernel};

fn main() -> smolkit::Result<()> {
    let g = Grid::new(2, 1.0, 32)?;
    let n_max = 48;
    let f0 = MassField::monodisperse(g, n_max, |x| {
        let r2 = (x[0] - 0.5).powi(2) + (x[1] - 0.5).powi(2);
        0.05 + (-r2 / 0.005).exp()
    })?;
    let k = Kernel::sum(1.0, n_max)?;
    let dp = DiffusionProfile::power_law(0.05, 0.5, n_max)?;
    let mut majorant = HeatMajorantMonitor::new(&f0, &dp, 1e-6)?;
    let mut mass = MassDriftMonitor::new(&f0, 1e-10);
    let cfg = RunConfig::new(0.5, 2e-3).with_stride(0.1);
    let rec = run(&f0, &k, &dp, &cfg, &mut [&mut majorant, &mut mass])?;
    let ratio = rec.monitor(HeatMajorantMonitor::NAME).expect("monitor column");
    for (t, r) in rec.times.iter().zip(ratio) {
        println!("t = {t:.1}  max ratio = {r:.6}");
    }
    println!("{}", majorant.report());
    println!("{}", mass.report());
    Ok(())
}
