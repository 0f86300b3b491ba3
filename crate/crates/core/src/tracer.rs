//! Tracer-particle Monte Carlo.
//!
//! A tracer of mass `m` at `x` performs Brownian motion with generator
//! `d(m) Δ` and, for each partner mass `n`, attempts to merge at rate
//! `2 alpha(n,m) f_n(x)` (the factor 2 matches the loss term of the PDE).
//! A merge succeeds with probability `m/(n+m)`; otherwise the tracer is
//! sent to the cemetery. Started from the number-weighted law of the
//! initial data, the law of the tracer at time `t` is `f_n(x,t) / M0`.
//!
//! The field is held frozen on each slice of a timeline produced by the
//! solver. Jumps within a slice are sampled exactly by thinning against
//! the largest rate on the grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;

use crate::analysis::BoundReport;
use crate::coagulation::{partner_sums, TruncationPolicy};
use crate::diffusion::BROWNIAN_VARIANCE_FACTOR;
use crate::error::{Error, Result};
use crate::field::{Grid, MassField};
use crate::kernels::{DiffusionProfile, Kernel};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TracerState {
    Alive { x: [f64; 3], m: usize },
    /// Absorbing state reached by a failed merge.
    Cemetery,
    /// Absorbing state reached by a successful merge past the mass range
    /// (gel-reservoir truncation only).
    Escaped,
}

impl TracerState {
    pub fn is_alive(&self) -> bool {
        matches!(self, TracerState::Alive { .. })
    }

    pub fn mass(&self) -> Option<usize> {
        match self {
            TracerState::Alive { m, .. } => Some(*m),
            _ => None,
        }
    }
}

/// Merge rate per partner, relative to `alpha(n,m) f_n(x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RateConvention {
    /// Rate `2 alpha(n,m) f_n`; reproduces the PDE with loss `2 f_n Σ alpha f_m`.
    PairSymmetric,
    /// Rate `alpha(n,m) f_n`; reproduces a PDE with half the coagulation rate.
    PerPartner,
}

impl RateConvention {
    pub fn factor(self) -> f64 {
        match self {
            RateConvention::PairSymmetric => 2.0,
            RateConvention::PerPartner => 1.0,
        }
    }
}

/// Which field drives a slice between two timeline entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SliceRule {
    /// The field at the start of the slice.
    Left,
    /// The average of the fields at both ends.
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TracerOptions {
    pub convention: RateConvention,
    /// Skip the success draw: every merge succeeds.
    pub immortal: bool,
    pub policy: TruncationPolicy,
    pub slice_rule: SliceRule,
}

impl Default for TracerOptions {
    fn default() -> Self {
        TracerOptions {
            convention: RateConvention::PairSymmetric,
            immortal: false,
            policy: TruncationPolicy::Cutoff,
            slice_rule: SliceRule::Average,
        }
    }
}

/// Largest allowed `1 - exp(-dt max_x Λ_m(x))` on a slice.
pub const MAX_SLICE_TRANSITION_PROBABILITY: f64 = 0.1;

/// Per-trajectory generator: substream `traj_id` of the ChaCha stream keyed by `seed`.
pub fn trajectory_rng(seed: u64, traj_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(traj_id);
    rng
}

/// Cumulative tables for drawing from the initial law.
#[derive(Clone, Debug)]
pub struct InitialSampler {
    grid: Grid,
    mass_cdf: Vec<f64>,
    /// Per-mass cumulative cell weights, mass-major.
    cell_cdf: Vec<f64>,
    total: f64,
}

fn draw_index(cdf: &[f64], u: f64) -> usize {
    let target = u * cdf[cdf.len() - 1];
    cdf.partition_point(|c| *c <= target).min(cdf.len() - 1)
}

impl InitialSampler {
    pub fn new(f0: &MassField) -> Result<Self> {
        let grid = *f0.grid();
        let nc = grid.n_cells();
        let mut mass_cdf = Vec::with_capacity(f0.n_max());
        let mut cell_cdf = Vec::with_capacity(f0.n_max() * nc);
        let mut total = 0.0;
        for n in 1..=f0.n_max() {
            let mut acc = 0.0;
            for v in f0.species(n) {
                acc += v.max(0.0);
                cell_cdf.push(acc);
            }
            total += acc;
            mass_cdf.push(total);
        }
        if !(total > 0.0) {
            return Err(Error::EmptyField);
        }
        Ok(InitialSampler {
            grid,
            mass_cdf,
            cell_cdf,
            total: total * grid.cell_volume(),
        })
    }

    /// Total particle number `M0 = Σ_n ∫ f_n`.
    pub fn number(&self) -> f64 {
        self.total
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TracerState {
        let nc = self.grid.n_cells();
        let m = draw_index(&self.mass_cdf, rng.random::<f64>()) + 1;
        let cells = &self.cell_cdf[(m - 1) * nc..m * nc];
        let cell = draw_index(cells, rng.random::<f64>());
        let center = self.grid.center(cell);
        let h = self.grid.spacing();
        let mut x = [0.0; 3];
        for axis in 0..self.grid.dim() {
            x[axis] = center[axis] - 0.5 * h + h * rng.random::<f64>();
        }
        TracerState::Alive { x, m }
    }
}

/// Draws from the initial law: mass proportional to `∫ f_m`, then cell
/// proportional to `f_m`, then uniform within the cell.
pub fn sample_initial<R: Rng + ?Sized>(f0: &MassField, rng: &mut R) -> Result<TracerState> {
    Ok(InitialSampler::new(f0)?.sample(rng))
}

/// A frozen field with precomputed merge rates.
#[derive(Clone, Debug)]
pub struct FrozenSlice<'a> {
    field: MassField,
    kernel: &'a Kernel,
    dp: &'a DiffusionProfile,
    opts: TracerOptions,
    /// `Λ_m(cell)`, mass-major.
    rates: Vec<f64>,
    /// `max_cell Λ_m(cell)` per mass.
    rate_bound: Vec<f64>,
}

impl<'a> FrozenSlice<'a> {
    pub fn new(field: MassField, kernel: &'a Kernel, dp: &'a DiffusionProfile, opts: TracerOptions) -> Result<Self> {
        let n_max = field.n_max();
        if kernel.n_max() < n_max || dp.n_max() < n_max {
            return Err(Error::IndexOutOfRange {
                index: n_max,
                n_max: kernel.n_max().min(dp.n_max()),
            });
        }
        let nc = field.grid().n_cells();
        let factor = opts.convention.factor();
        let per_cell: Vec<Vec<f64>> = (0..nc)
            .into_par_iter()
            .map(|cell| {
                let c: Vec<f64> = field.cell_vector(cell).iter().map(|v| v.max(0.0)).collect();
                let mut out = vec![0.0; n_max];
                partner_sums(&c, kernel, opts.policy, &mut out);
                out
            })
            .collect();
        let mut rates = vec![0.0; n_max * nc];
        let mut rate_bound = vec![0.0_f64; n_max];
        for (cell, sums) in per_cell.iter().enumerate() {
            for m in 1..=n_max {
                let r = factor * sums[m - 1];
                rates[(m - 1) * nc + cell] = r;
                rate_bound[m - 1] = rate_bound[m - 1].max(r);
            }
        }
        Ok(FrozenSlice {
            field,
            kernel,
            dp,
            opts,
            rates,
            rate_bound,
        })
    }

    pub fn field(&self) -> &MassField {
        &self.field
    }

    pub fn rate(&self, m: usize, cell: usize) -> f64 {
        self.rates[(m - 1) * self.field.grid().n_cells() + cell]
    }

    pub fn rate_bound(&self, m: usize) -> f64 {
        self.rate_bound[m - 1]
    }

    /// `1 - exp(-dt max_{m,x} Λ_m(x))`.
    pub fn max_transition_probability(&self, dt: f64) -> f64 {
        let worst = self.rate_bound.iter().fold(0.0_f64, |a, b| a.max(*b));
        -(-dt * worst).exp_m1()
    }

    fn brownian<R: Rng + ?Sized>(&self, x: &mut [f64; 3], m: usize, tau: f64, rng: &mut R) {
        let grid = self.field.grid();
        let sd = (BROWNIAN_VARIANCE_FACTOR * self.dp.value(m) * tau).sqrt();
        if sd == 0.0 {
            return;
        }
        for xi in x.iter_mut().take(grid.dim()) {
            let z: f64 = StandardNormal.sample(rng);
            *xi = (*xi + sd * z).rem_euclid(grid.side());
        }
    }

    fn partner<R: Rng + ?Sized>(&self, m: usize, cell: usize, rng: &mut R) -> usize {
        let n_max = self.field.n_max();
        let limit = self.opts.policy.partner_limit(m, n_max);
        let total = self.rate(m, cell) / self.opts.convention.factor();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut last = 1;
        for n in 1..=limit {
            let w = self.kernel.get(n, m) * self.field.get(n, cell).max(0.0);
            if w > 0.0 {
                acc += w;
                last = n;
                if acc > target {
                    return n;
                }
            }
        }
        last
    }

    /// Evolves one tracer over `dt` with the field frozen. `collisions` counts
    /// accepted merge attempts.
    pub fn evolve<R: Rng + ?Sized>(&self, z: TracerState, dt: f64, rng: &mut R, collisions: &mut u32) -> TracerState {
        let (mut x, mut m) = match z {
            TracerState::Alive { x, m } => (x, m),
            other => return other,
        };
        let grid = *self.field.grid();
        let n_max = self.field.n_max();
        let mut s = 0.0;
        loop {
            let bound = self.rate_bound(m);
            let wait = if bound > 0.0 {
                let e: f64 = Exp1.sample(rng);
                e / bound
            } else {
                f64::INFINITY
            };
            if s + wait >= dt {
                self.brownian(&mut x, m, dt - s, rng);
                return TracerState::Alive { x, m };
            }
            self.brownian(&mut x, m, wait, rng);
            s += wait;
            let cell = grid.cell_of(&x);
            if rng.random::<f64>() * bound >= self.rate(m, cell) {
                continue;
            }
            let n = self.partner(m, cell, rng);
            *collisions += 1;
            let merged = n + m;
            let success = self.opts.immortal || rng.random::<f64>() * (merged as f64) < m as f64;
            if !success {
                return TracerState::Cemetery;
            }
            if merged > n_max {
                return TracerState::Escaped;
            }
            m = merged;
        }
    }
}

/// One frozen-field step for a single tracer.
pub fn evolve_frozen<R: Rng + ?Sized>(
    z: TracerState,
    frozen: &MassField,
    k: &Kernel,
    dp: &DiffusionProfile,
    dt: f64,
    rng: &mut R,
    opts: TracerOptions,
) -> Result<TracerState> {
    let slice = FrozenSlice::new(frozen.clone(), k, dp, opts)?;
    let mut collisions = 0;
    Ok(slice.evolve(z, dt, rng, &mut collisions))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TracerConfig {
    pub count: usize,
    pub seed: u64,
    /// Slice boundaries (0 = initial) at which histograms are recorded.
    pub record: Vec<usize>,
}

/// Counts over `(mass, cell)` plus the absorbing states at one time.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Histogram {
    pub slice: usize,
    /// Mass-major, `n_max * n_cells`.
    pub counts: Vec<u64>,
    pub cemetery: u64,
    pub escaped: u64,
    pub collisions: u64,
    pub max_collisions: u32,
}

impl Histogram {
    fn empty(slice: usize, bins: usize) -> Self {
        Histogram {
            slice,
            counts: vec![0; bins],
            cemetery: 0,
            escaped: 0,
            collisions: 0,
            max_collisions: 0,
        }
    }

    fn merge(&mut self, other: &Histogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.cemetery += other.cemetery;
        self.escaped += other.escaped;
        self.collisions += other.collisions;
        self.max_collisions = self.max_collisions.max(other.max_collisions);
    }

    pub fn alive(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Result of [`simulate`].
#[derive(Clone, Debug, PartialEq)]
pub struct TracerEnsemble {
    pub count: usize,
    pub seed: u64,
    pub grid: Grid,
    pub n_max: usize,
    pub slice_dt: f64,
    /// Total particle number of the initial field.
    pub initial_number: f64,
    pub histograms: Vec<Histogram>,
}

impl TracerEnsemble {
    pub fn time(&self, h: &Histogram) -> f64 {
        h.slice as f64 * self.slice_dt
    }

    pub fn at_slice(&self, slice: usize) -> Option<&Histogram> {
        self.histograms.iter().find(|h| h.slice == slice)
    }

    pub const CSV_HEADER: &'static str = "time,mass,cell,count";

    /// Nonzero bins only, ordered by time, mass, cell.
    pub fn histogram_csv(&self) -> String {
        let nc = self.grid.n_cells();
        let mut s = format!("# smolkit tracer histogram v1\n{}\n", Self::CSV_HEADER);
        for h in &self.histograms {
            let t = self.time(h);
            for (i, c) in h.counts.iter().enumerate() {
                if *c > 0 {
                    s.push_str(&format!("{t:?},{},{},{c}\n", i / nc + 1, i % nc));
                }
            }
        }
        s
    }
}

fn slice_field(timeline: &[MassField], i: usize, rule: SliceRule) -> Result<MassField> {
    match rule {
        SliceRule::Left => Ok(timeline[i].clone()),
        SliceRule::Average => {
            let (a, b) = (&timeline[i], &timeline[i + 1]);
            let data = a.data().iter().zip(b.data()).map(|(x, y)| 0.5 * (x + y)).collect();
            MassField::from_data(*a.grid(), a.n_max(), data, 0.5 * (a.gel() + b.gel()))
        }
    }
}

/// Runs `cfg.count` independent tracers through the slices of `timeline`
/// (fields at times `0, slice_dt, 2 slice_dt, ...`).
///
/// Histograms depend only on the seed, never on the number of workers.
pub fn simulate(
    timeline: &[MassField],
    k: &Kernel,
    dp: &DiffusionProfile,
    cfg: &TracerConfig,
    slice_dt: f64,
    opts: TracerOptions,
) -> Result<TracerEnsemble> {
    let f0 = timeline
        .first()
        .ok_or_else(|| Error::InvalidParameter("empty field timeline".into()))?;
    if !(slice_dt > 0.0) {
        return Err(Error::InvalidParameter(format!("slice_dt = {slice_dt} must be > 0")));
    }
    if timeline.iter().any(|f| f.grid() != f0.grid() || f.n_max() != f0.n_max()) {
        return Err(Error::InvalidParameter("timeline fields must share grid and mass range".into()));
    }
    let n_slices = timeline.len() - 1;
    if let Some(r) = cfg.record.iter().find(|r| **r > n_slices) {
        return Err(Error::InvalidParameter(format!(
            "record slice {r} beyond the {n_slices} available"
        )));
    }
    let sampler = InitialSampler::new(f0)?;
    let slices = (0..n_slices)
        .map(|i| FrozenSlice::new(slice_field(timeline, i, opts.slice_rule)?, k, dp, opts))
        .collect::<Result<Vec<_>>>()?;
    for (i, s) in slices.iter().enumerate() {
        let p = s.max_transition_probability(slice_dt);
        if p > MAX_SLICE_TRANSITION_PROBABILITY {
            return Err(Error::InvalidParameter(format!(
                "slice {i}: transition probability {p:.3} exceeds {MAX_SLICE_TRANSITION_PROBABILITY}; use more slices"
            )));
        }
    }
    let mut record = cfg.record.clone();
    record.sort_unstable();
    record.dedup();
    let nc = f0.grid().n_cells();
    let bins = f0.n_max() * nc;
    let empty: Vec<Histogram> = record.iter().map(|s| Histogram::empty(*s, bins)).collect();
    let grid = *f0.grid();

    let histograms = (0..cfg.count as u64)
        .into_par_iter()
        .fold(
            || empty.clone(),
            |mut acc, id| {
                let mut rng = trajectory_rng(cfg.seed, id);
                let mut z = sampler.sample(&mut rng);
                let mut collisions = 0u32;
                let mut next = 0;
                for slice in 0..=n_slices {
                    while next < record.len() && record[next] == slice {
                        let h = &mut acc[next];
                        match z {
                            TracerState::Alive { x, m } => h.counts[(m - 1) * nc + grid.cell_of(&x)] += 1,
                            TracerState::Cemetery => h.cemetery += 1,
                            TracerState::Escaped => h.escaped += 1,
                        }
                        h.collisions += collisions as u64;
                        h.max_collisions = h.max_collisions.max(collisions);
                        next += 1;
                    }
                    if slice == n_slices || next == record.len() {
                        break;
                    }
                    z = slices[slice].evolve(z, slice_dt, &mut rng, &mut collisions);
                }
                acc
            },
        )
        .reduce(
            || empty.clone(),
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    x.merge(y);
                }
                a
            },
        );

    Ok(TracerEnsemble {
        count: cfg.count,
        seed: cfg.seed,
        grid,
        n_max: f0.n_max(),
        slice_dt,
        initial_number: sampler.number(),
        histograms,
    })
}

/// Bins whose expected count is below this are pooled into one tail bin
/// before z-scores are computed, so normal approximations stay meaningful.
pub const MIN_EXPECTED_COUNT: f64 = 5.0;

/// Comparison of a tracer histogram against a solver field.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyReport {
    pub time: f64,
    /// Total-variation distance over `(mass, cell)` bins plus the absorbed mass.
    pub total_variation: f64,
    pub max_abs_z: f64,
    /// `(mass, cell)` of the largest `|z|`, or `None` for the pooled tail bin
    /// or the absorbed bin.
    pub worst_bin: Option<(usize, usize)>,
    /// 50%, 90%, 99% and 100% quantiles of `|z|`.
    pub z_quantiles: [f64; 4],
    pub scored_bins: usize,
    pub pooled_bins: usize,
}

impl ConsistencyReport {
    pub const CSV_HEADER: &'static str = "time,tv,max_abs_z,z_q50,z_q90,z_q99,z_max,scored_bins,pooled_bins";

    pub fn csv_row(&self) -> String {
        format!(
            "{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{}",
            self.time,
            self.total_variation,
            self.max_abs_z,
            self.z_quantiles[0],
            self.z_quantiles[1],
            self.z_quantiles[2],
            self.z_quantiles[3],
            self.scored_bins,
            self.pooled_bins
        )
    }
}

fn binomial_z(observed: f64, n: f64, p: f64) -> f64 {
    let var = n * p * (1.0 - p);
    if var > 0.0 {
        (observed - n * p) / var.sqrt()
    } else if observed == n * p {
        0.0
    } else {
        f64::INFINITY
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Compares empirical frequencies in `h` with `f_n(x,t) h^dim / M0` from the
/// solver. `m0` is the initial particle number.
pub fn density_consistency(ens: &TracerEnsemble, h: &Histogram, field: &MassField, m0: f64) -> Result<ConsistencyReport> {
    if field.grid() != &ens.grid || field.n_max() != ens.n_max {
        return Err(Error::InvalidParameter("field does not match the tracer grid".into()));
    }
    if !(m0 > 0.0) {
        return Err(Error::InvalidParameter(format!("normalizer M0 = {m0} must be > 0")));
    }
    let nc = ens.grid.n_cells();
    let dv = ens.grid.cell_volume();
    let n = ens.count as f64;
    let mut tv = 0.0;
    let mut expected_alive = 0.0;
    let mut scores: Vec<(f64, Option<(usize, usize)>)> = Vec::new();
    let (mut tail_obs, mut tail_p, mut pooled) = (0.0, 0.0, 0);
    for (i, c) in h.counts.iter().enumerate() {
        let p = (field.data()[i].max(0.0) * dv / m0).min(1.0);
        let obs = *c as f64;
        expected_alive += p;
        tv += (obs / n - p).abs();
        if n * p >= MIN_EXPECTED_COUNT {
            scores.push((binomial_z(obs, n, p), Some((i / nc + 1, i % nc))));
        } else {
            tail_obs += obs;
            tail_p += p;
            pooled += 1;
        }
    }
    let absorbed_p = (1.0 - expected_alive).max(0.0);
    let absorbed_obs = (h.cemetery + h.escaped) as f64;
    tv += (absorbed_obs / n - absorbed_p).abs();
    if pooled > 0 {
        scores.push((binomial_z(tail_obs, n, tail_p.min(1.0)), None));
    }
    scores.push((binomial_z(absorbed_obs, n, absorbed_p.min(1.0)), None));
    let (max_abs_z, worst_bin) = scores
        .iter()
        .fold((0.0, None), |b, (z, bin)| if z.abs() > b.0 { (z.abs(), *bin) } else { b });
    let mut abs: Vec<f64> = scores.iter().map(|(z, _)| z.abs()).collect();
    abs.sort_by(f64::total_cmp);
    Ok(ConsistencyReport {
        time: ens.time(h),
        total_variation: 0.5 * tv,
        max_abs_z,
        worst_bin,
        z_quantiles: [quantile(&abs, 0.5), quantile(&abs, 0.9), quantile(&abs, 0.99), quantile(&abs, 1.0)],
        scored_bins: scores.len(),
        pooled_bins: pooled,
    })
}

/// Checks the L∞ focusing estimate: for non-increasing `d`, the empirical
/// `M0 Σ_m m^q g_m(x,t)` stays below
/// `d(1)^{dim/2} / min_m (m^{1-q} d(m)^{dim/2}) * u(x,t)` up to three
/// standard errors, where `u` is the heat majorant at the same time.
pub fn check_focusing(
    ens: &TracerEnsemble,
    h: &Histogram,
    dp: &DiffusionProfile,
    u: &[f64],
    q: f64,
) -> Result<BoundReport> {
    if let Some(n) = dp.monotonicity_witness() {
        return Err(Error::NotNonIncreasing { n });
    }
    let nc = ens.grid.n_cells();
    if u.len() != nc {
        return Err(Error::InvalidParameter("majorant has the wrong number of cells".into()));
    }
    let half = ens.grid.dim() as f64 / 2.0;
    let denom = (1..=ens.n_max)
        .map(|m| (m as f64).powf(1.0 - q) * dp.value(m).powf(half))
        .fold(f64::INFINITY, f64::min);
    let factor = dp.value(1).powf(half) / denom;
    let n = ens.count as f64;
    let scale = ens.initial_number / (n * ens.grid.cell_volume());
    let mut report = BoundReport::new(format!("focusing_q{q}"), 0.0);
    for cell in 0..nc {
        let (mut s1, mut s2) = (0.0, 0.0);
        for m in 1..=ens.n_max {
            let c = h.counts[(m - 1) * nc + cell] as f64;
            let w = (m as f64).powf(q);
            s1 += w * c;
            s2 += w * w * c;
        }
        let mean = s1 / n;
        let var = (s2 / n - mean * mean).max(0.0);
        let estimate = scale * s1;
        let sigma = scale * (n * var).sqrt();
        let bound = factor * u[cell];
        let excess = estimate - bound - 3.0 * sigma;
        let rel = if bound > 0.0 { excess / bound } else if excess > 0.0 { f64::INFINITY } else { 0.0 };
        report.update(rel, ens.time(h), Some(cell));
    }
    Ok(report)
}

/// Law of a tracer driven by a frozen, spatially homogeneous field, from the
/// linear master equation integrated with RK4. Returns `(g, cemetery, escaped)`
/// with `g[m-1]` the probability of being alive with mass `m`.
pub fn frozen_master_equation(
    c: &[f64],
    k: &Kernel,
    opts: TracerOptions,
    g0: &[f64],
    t: f64,
    steps: usize,
) -> (Vec<f64>, f64, f64) {
    let n_max = c.len();
    let factor = opts.convention.factor();
    // per mass: (merged mass, success rate, failure rate)
    let mut moves: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); n_max];
    for m in 1..=n_max {
        for n in 1..=opts.policy.partner_limit(m, n_max) {
            let r = factor * k.get(n, m) * c[n - 1];
            if r == 0.0 {
                continue;
            }
            let p = if opts.immortal { 1.0 } else { m as f64 / (n + m) as f64 };
            moves[m - 1].push((n + m, r * p, r * (1.0 - p)));
        }
    }
    let deriv = |g: &[f64], out: &mut [f64]| -> (f64, f64) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let (mut cem, mut esc) = (0.0, 0.0);
        for m in 1..=n_max {
            for &(target, rs, rf) in &moves[m - 1] {
                let flow = g[m - 1];
                out[m - 1] -= (rs + rf) * flow;
                cem += rf * flow;
                if target > n_max {
                    esc += rs * flow;
                } else {
                    out[target - 1] += rs * flow;
                }
            }
        }
        (cem, esc)
    };
    let h = t / steps.max(1) as f64;
    let mut g = g0.to_vec();
    let (mut cem, mut esc) = (0.0, 0.0);
    let mut stages = vec![vec![0.0; n_max]; 4];
    let mut tmp = vec![0.0; n_max];
    for _ in 0..steps.max(1) {
        let mut absorbed = [(0.0, 0.0); 4];
        for s in 0..4 {
            let w = [0.0, 0.5, 0.5, 1.0][s];
            for i in 0..n_max {
                tmp[i] = g[i] + if s == 0 { 0.0 } else { w * h * stages[s - 1][i] };
            }
            absorbed[s] = deriv(&tmp, &mut stages[s]);
        }
        for i in 0..n_max {
            g[i] += h / 6.0 * (stages[0][i] + 2.0 * stages[1][i] + 2.0 * stages[2][i] + stages[3][i]);
        }
        cem += h / 6.0 * (absorbed[0].0 + 2.0 * absorbed[1].0 + 2.0 * absorbed[2].0 + absorbed[3].0);
        esc += h / 6.0 * (absorbed[0].1 + 2.0 * absorbed[1].1 + 2.0 * absorbed[2].1 + absorbed[3].1);
    }
    (g, cem, esc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn homogeneous(grid: Grid, c: &[f64]) -> MassField {
        MassField::from_fn(grid, c.len(), |n, _| c[n - 1]).unwrap()
    }

    #[test]
    fn monodisperse_always_starts_at_mass_one() {
        let g = Grid::new(2, 1.0, 4).unwrap();
        let f = MassField::monodisperse(g, 5, |x| 1.0 + x[0]).unwrap();
        let mut rng = trajectory_rng(1, 0);
        for _ in 0..200 {
            assert_eq!(sample_initial(&f, &mut rng).unwrap().mass(), Some(1));
        }
    }

    #[test]
    fn initial_mass_follows_number_integrals() {
        let g = Grid::new(1, 1.0, 4).unwrap();
        let f = homogeneous(g, &[1.0, 3.0]);
        let s = InitialSampler::new(&f).unwrap();
        let mut rng = trajectory_rng(7, 3);
        let n = 40_000;
        let twos = (0..n).filter(|_| s.sample(&mut rng).mass() == Some(2)).count();
        let p = twos as f64 / n as f64;
        assert!((p - 0.75).abs() < 4.0 * (0.75 * 0.25 / n as f64).sqrt());
    }

    #[test]
    fn concentrated_species_lands_in_its_cell() {
        let g = Grid::new(2, 2.0, 4).unwrap();
        let f = MassField::from_fn(g, 1, |_, x| if g.cell_of(x) == 9 { 1.0 } else { 0.0 }).unwrap();
        let mut rng = trajectory_rng(0, 0);
        for _ in 0..500 {
            match sample_initial(&f, &mut rng).unwrap() {
                TracerState::Alive { x, .. } => assert_eq!(g.cell_of(&x), 9),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn zero_field_cannot_be_sampled() {
        let g = Grid::new(1, 1.0, 4).unwrap();
        let f = MassField::zeros(g, 3).unwrap();
        assert!(matches!(sample_initial(&f, &mut trajectory_rng(0, 0)), Err(Error::EmptyField)));
    }

    #[test]
    fn absorbing_states_stay_put() {
        let g = Grid::new(1, 1.0, 4).unwrap();
        let f = homogeneous(g, &[1.0, 1.0]);
        let k = Kernel::constant(1.0, 2).unwrap();
        let dp = DiffusionProfile::constant(1.0, 2).unwrap();
        let mut rng = trajectory_rng(0, 0);
        for z in [TracerState::Cemetery, TracerState::Escaped] {
            assert_eq!(evolve_frozen(z, &f, &k, &dp, 1.0, &mut rng, TracerOptions::default()).unwrap(), z);
        }
    }

    #[test]
    fn master_equation_two_state_closed_form() {
        // alpha(1,1) = gamma, alpha(2,.) = 0, f_1 = c, f_2 = 0
        let (gamma, c, t) = (0.7, 1.3, 0.9);
        let k = Kernel::from_table(vec![gamma, 0.0, 0.0, 0.0], 2).unwrap();
        let opts = TracerOptions::default();
        let (g, cem, esc) = frozen_master_equation(&[c, 0.0], &k, opts, &[1.0, 0.0], t, 2000);
        // leaving rate 2 gamma c, half of the attempts succeed
        let stay = (-2.0 * gamma * c * t).exp();
        assert!((g[0] - stay).abs() < 1e-12);
        assert!((g[1] - 0.5 * (1.0 - stay)).abs() < 1e-12);
        assert!((cem - 0.5 * (1.0 - stay)).abs() < 1e-12);
        assert_eq!(esc, 0.0);
    }

    #[test]
    fn master_equation_per_partner_convention_matches_single_rate() {
        let (gamma, c, t) = (0.7, 1.3, 0.9);
        let k = Kernel::from_table(vec![gamma, 0.0, 0.0, 0.0], 2).unwrap();
        let opts = TracerOptions {
            convention: RateConvention::PerPartner,
            ..TracerOptions::default()
        };
        let (g, _, _) = frozen_master_equation(&[c, 0.0], &k, opts, &[1.0, 0.0], t, 2000);
        assert!((g[0] - (-gamma * c * t).exp()).abs() < 1e-12);
    }

    #[test]
    fn histogram_csv_lists_nonzero_bins() {
        let g = Grid::new(1, 1.0, 2).unwrap();
        let ens = TracerEnsemble {
            count: 3,
            seed: 0,
            grid: g,
            n_max: 2,
            slice_dt: 0.5,
            initial_number: 1.0,
            histograms: vec![Histogram {
                slice: 1,
                counts: vec![2, 0, 0, 1],
                cemetery: 0,
                escaped: 0,
                collisions: 1,
                max_collisions: 1,
            }],
        };
        assert_eq!(
            ens.histogram_csv(),
            "# smolkit tracer histogram v1\ntime,mass,cell,count\n0.5,1,0,2\n0.5,2,1,1\n"
        );
    }
}
