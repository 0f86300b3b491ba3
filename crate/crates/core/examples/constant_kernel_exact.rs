//! Homogeneous constant-kernel run against the closed form
//! `c_n(t) = t^(n-1) / (1+t)^(n+1)` for unit monodisperse data.

use smolkit::integrator::{homogeneous_run, HomogeneousState, RunConfig};
use smolkit::kernels::Kernel;

fn main() -> smolkit::Result<()> {
    let n_max = 64;
    let k = Kernel::constant(1.0, n_max)?;
    let c0 = HomogeneousState::monodisperse(n_max, 1.0);
    let rec = homogeneous_run(&c0, &k, &RunConfig::new(2.0, 1e-3).with_stride(0.5))?;
    let c = &rec.final_homogeneous().expect("homogeneous run").c;
    let t: f64 = 2.0;
    println!("{:>3} {:>14} {:>14} {:>10}", "n", "computed", "exact", "rel err");
    for n in [1, 2, 3, 5, 8, 13, 20] {
        let exact = t.powi(n as i32 - 1) / (1.0 + t).powi(n as i32 + 1);
        let got = c[n - 1];
        println!("{n:>3} {got:>14.6e} {exact:>14.6e} {:>10.2e}", (got - exact).abs() / exact);
    }
    let number = rec.moment(0.0).expect("number is always recorded");
    for (t, x0) in rec.times.iter().zip(number) {
        println!("t = {t:.1}: number {x0:.6} (exact {:.6})", 1.0 / (1.0 + t));
    }
    Ok(())
}
