//! Particle tracers driven by a solver timeline; their mass/position
//! histogram is compared with the solver's mass-weighted density.
//!
//! Tracers move in continuous space while the solver keeps point values, so
//! on coarse grids spatially varying data show a binning bias of order h^2.

use smolkit::field::{Grid, MassField};
use smolkit::integrator::{run, RunConfig};
use smolkit::kernels::{DiffusionProfile, Kernel};
use smolkit::tracer::{density_consistency, simulate, ConsistencyReport, TracerConfig, TracerOptions};

fn main() -> smolkit::Result<()> {
    let g = Grid::new(1, 1.0, 32)?;
    let n_max = 24;
    let f0 = MassField::monodisperse(g, n_max, |x| 0.6 + 0.4 * (std::f64::consts::TAU * x[0]).sin())?;
    let k = Kernel::constant(1.0, n_max)?;
    let dp = DiffusionProfile::power_law(0.05, 0.5, n_max)?;
    let slices = 64;
    let slice_dt = 0.5 / slices as f64;
    let rec = run(&f0, &k, &dp, &RunConfig::new(0.5, slice_dt / 2.0).with_stride(slice_dt).with_snapshots(), &mut [])?;
    let cfg = TracerConfig {
        count: 100_000,
        seed: 7,
        record: vec![0, 16, 32, 64],
    };
    let ens = simulate(&rec.snapshots, &k, &dp, &cfg, slice_dt, TracerOptions::default())?;
    println!("{}", ConsistencyReport::CSV_HEADER);
    for h in &ens.histograms {
        let c = density_consistency(&ens, h, &rec.snapshots[h.slice], ens.initial_number)?;
        println!("{}", c.csv_row());
    }
    let last = ens.histograms.last().expect("recorded");
    println!("alive {}, cemetery {}, escaped {}", last.alive(), last.cemetery, last.escaped);
    Ok(())
}
