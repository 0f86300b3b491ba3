//! Gel mass under refinement of the mass cutoff for a gelling and a
//! mass-conserving kernel.

use smolkit::analysis::gelation_scan;
use smolkit::coagulation::TruncationPolicy;
use smolkit::integrator::{HomogeneousState, RunConfig};
use smolkit::kernels::Kernel;

fn main() -> smolkit::Result<()> {
    let cfg = RunConfig::new(1.5, 1e-3).with_policy(TruncationPolicy::GelReservoir);
    let ns = [64, 128, 256, 512];
    for exponent in [1.0, 0.75, 0.4] {
        let k = Kernel::product(exponent, 512)?;
        let v = gelation_scan(&k, &ns, &cfg, |n| HomogeneousState::monodisperse(n, 1.0))?;
        println!("alpha = (nm)^{exponent}");
        print!("{v}");
        println!();
    }
    Ok(())
}
