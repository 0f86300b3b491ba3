use smolkit::field::{Grid, MassField};
use smolkit::kernels::{DiffusionProfile, Kernel};
use smolkit::tracer::{
    evolve_frozen, frozen_master_equation, simulate, trajectory_rng, TracerConfig, TracerEnsemble, TracerOptions,
    TracerState,
};
use smolkit::with_workers;

const SLICE_DT: f64 = 0.005;

fn frozen_timeline(f: &MassField, slices: usize) -> Vec<MassField> {
    vec![f.clone(); slices + 1]
}

fn ensemble(f: &MassField, k: &Kernel, dp: &DiffusionProfile, slices: usize, count: usize, seed: u64) -> TracerEnsemble {
    simulate(
        &frozen_timeline(f, slices),
        k,
        dp,
        &TracerConfig {
            count,
            seed,
            record: (0..=slices).collect(),
        },
        SLICE_DT,
        TracerOptions::default(),
    )
    .unwrap()
}

// Kolmogorov-Smirnov distance between the sample and a CDF.
fn ks_distance(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, x)| {
            let c = cdf(*x);
            (c - i as f64 / n).abs().max((c - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn without_coagulation_displacements_are_gaussian() {
    // In two dimensions |Δx|² / (2σ²) is Exp(1).
    let g = Grid::new(2, 1.0, 16).unwrap();
    let f = MassField::monodisperse(g, 4, |_| 1.0).unwrap();
    let k = Kernel::constant(0.0, 4).unwrap();
    let dp = DiffusionProfile::power_law(1e-3, 0.5, 4).unwrap();
    let (t, samples) = (0.5, 4000u64);
    let sigma2 = 2.0 * 1e-3 * 2f64.powf(-0.5) * t;
    let start = [0.5, 0.5, 0.0];
    let mut r = Vec::new();
    for id in 0..samples {
        let mut rng = trajectory_rng(9, id);
        let z = TracerState::Alive { x: start, m: 2 };
        match evolve_frozen(z, &f, &k, &dp, t, &mut rng, TracerOptions::default()).unwrap() {
            TracerState::Alive { x, m } => {
                assert_eq!(m, 2);
                let r2 = (x[0] - 0.5).powi(2) + (x[1] - 0.5).powi(2);
                r.push(r2 / (2.0 * sigma2));
            }
            other => panic!("tracer left the alive state: {other:?}"),
        }
    }
    let d = ks_distance(r, |v| 1.0 - (-v).exp());
    assert!(d < 1.63 / (samples as f64).sqrt(), "KS distance {d}");
}

#[test]
fn two_state_chain_matches_master_equation() {
    // Only monomers are present and pairs cannot exceed mass 2, so a monomer
    // either merges into a dimer or dies with equal probability.
    let g = Grid::new(1, 1.0, 2).unwrap();
    let f = MassField::from_fn(g, 2, |n, _| if n == 1 { 1.5 } else { 0.0 }).unwrap();
    let k = Kernel::constant(0.7, 2).unwrap();
    let dp = DiffusionProfile::constant(0.1, 2).unwrap();
    let slices = 20;
    let count = 40_000;
    let ens = ensemble(&f, &k, &dp, slices, count, 5);
    let t = SLICE_DT * slices as f64;
    let (law, cem, esc) = frozen_master_equation(&[1.5, 0.0], &k, TracerOptions::default(), &[1.0, 0.0], t, 400);
    let p1 = (-2.0 * 0.7 * 1.5 * t).exp();
    assert!((law[0] - p1).abs() < 1e-9 && (law[1] - (1.0 - p1) / 2.0).abs() < 1e-9 && (cem - (1.0 - p1) / 2.0).abs() < 1e-9);
    assert_eq!(esc, 0.0);

    let h = ens.at_slice(slices).unwrap();
    let n = count as f64;
    let monomers: u64 = h.counts[..2].iter().sum();
    let dimers: u64 = h.counts[2..].iter().sum();
    for (observed, p) in [(monomers, law[0]), (dimers, law[1]), (h.cemetery, cem)] {
        let se = (p * (1.0 - p) / n).sqrt();
        let z = (observed as f64 / n - p) / se;
        assert!(z.abs() < 4.0, "observed {observed}, expected {:.1}, z = {z:.2}", p * n);
    }
}

#[test]
fn absorbing_counts_never_decrease_and_states_add_up() {
    let g = Grid::new(1, 1.0, 8).unwrap();
    let f = MassField::from_fn(g, 6, |n, x| (1.0 + x[0]) / n as f64).unwrap();
    let k = Kernel::sum(0.3, 6).unwrap();
    let dp = DiffusionProfile::power_law(0.05, 1.0, 6).unwrap();
    let ens = ensemble(&f, &k, &dp, 30, 5000, 11);
    for w in ens.histograms.windows(2) {
        assert!(w[1].cemetery >= w[0].cemetery);
        assert!(w[1].escaped >= w[0].escaped);
    }
    for h in &ens.histograms {
        assert_eq!(h.alive() + h.cemetery + h.escaped, 5000);
    }
    assert!(ens.histograms.last().unwrap().cemetery > 0);
}

#[test]
fn mass_weighted_survival_is_conserved_in_a_frozen_field() {
    let g = Grid::new(1, 1.0, 4).unwrap();
    let n_max = 12;
    let f = MassField::from_fn(g, n_max, |n, x| (0.5 + x[0]) * (-(n as f64)).exp()).unwrap();
    let k = Kernel::sum(0.5, n_max).unwrap();
    let dp = DiffusionProfile::constant(0.05, n_max).unwrap();
    let slices = 80;
    let count = 60_000;
    let ens = ensemble(&f, &k, &dp, slices, count, 3);
    let nc = g.n_cells();
    let weighted = |slice: usize| {
        let h = ens.at_slice(slice).unwrap();
        let (mut s1, mut s2) = (0.0, 0.0);
        for m in 1..=n_max {
            let c: u64 = h.counts[(m - 1) * nc..m * nc].iter().sum();
            s1 += m as f64 * c as f64;
            s2 += (m * m) as f64 * c as f64;
        }
        let n = count as f64;
        (s1 / n, (s2 / n - (s1 / n).powi(2)) / n)
    };
    let (start, _) = weighted(0);
    let (end, var) = weighted(slices);
    assert!(ens.histograms.last().unwrap().cemetery > count as u64 / 10);
    assert!((end - start).abs() < 4.0 * (2.0 * var).sqrt(), "E[m alive]: {start} -> {end}");
}

#[test]
fn histograms_do_not_depend_on_worker_count() {
    let g = Grid::new(2, 1.0, 4).unwrap();
    let f = MassField::from_fn(g, 5, |n, x| (1.0 + x[0] * x[1]) / n as f64).unwrap();
    let k = Kernel::constant(1.0, 5).unwrap();
    let dp = DiffusionProfile::power_law(0.1, 0.5, 5).unwrap();
    let one = with_workers(Some(1), || ensemble(&f, &k, &dp, 10, 3000, 42)).unwrap();
    let many = with_workers(Some(6), || ensemble(&f, &k, &dp, 10, 3000, 42)).unwrap();
    let again = ensemble(&f, &k, &dp, 10, 3000, 42);
    assert_eq!(one.histograms, many.histograms);
    assert_eq!(one.histogram_csv(), again.histogram_csv());
    let other_seed = ensemble(&f, &k, &dp, 10, 3000, 43);
    assert_ne!(one.histograms, other_seed.histograms);
}
