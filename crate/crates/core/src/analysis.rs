//! Numerical checks of the moment bounds, heat-majorant domination,
//! L¹ stability and the conservation/gelation dichotomy.
//!
//! Constants the theory leaves unspecified are never estimated. Checks
//! either compare against explicit inequalities or look for plateaus
//! under mass-range refinement.

use std::fmt;

use crate::coagulation::{partner_sums, TruncationPolicy};
use crate::diffusion::HeatPropagator;
use crate::error::{Error, Result};
use crate::field::{moment, plain_moment, total_mass, MassField, MomentSpec};
use crate::integrator::{homogeneous_run, HomogeneousState, RunConfig, RunRecord};
use crate::kernels::{DiffusionProfile, Kernel};

/// Something evaluated at every output stride of a run.
pub trait Monitor {
    fn name(&self) -> &str;
    /// Returns the value recorded in the series column for this monitor.
    fn observe(&mut self, t: f64, f: &MassField) -> Result<f64>;
    fn report(&self) -> BoundReport;
}

/// Worst violation of one inequality over a run.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub name: String,
    pub max_violation: f64,
    pub at_time: f64,
    pub at_cell: Option<usize>,
    pub tolerance: f64,
    pub passed: bool,
}

impl BoundReport {
    pub fn new(name: impl Into<String>, tolerance: f64) -> Self {
        BoundReport {
            name: name.into(),
            max_violation: 0.0,
            at_time: 0.0,
            at_cell: None,
            tolerance,
            passed: true,
        }
    }

    /// Folds in one observation; negative values count as zero violation.
    pub fn update(&mut self, violation: f64, t: f64, cell: Option<usize>) {
        let v = if violation.is_nan() { f64::INFINITY } else { violation.max(0.0) };
        if v > self.max_violation {
            self.max_violation = v;
            self.at_time = t;
            self.at_cell = cell;
        }
        self.passed = self.max_violation <= self.tolerance;
    }

    pub const CSV_HEADER: &'static str = "name,max_violation,t,cell,tolerance,passed";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{},{:?},{}",
            self.name,
            self.max_violation,
            self.at_time,
            self.at_cell.map(|c| c.to_string()).unwrap_or_default(),
            self.tolerance,
            self.passed
        )
    }
}

impl fmt::Display for BoundReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}: max violation {:.3e} (tolerance {:.1e}) at t = {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_violation,
            self.tolerance,
            self.at_time
        )?;
        if let Some(c) = self.at_cell {
            write!(f, ", cell {c}")?;
        }
        Ok(())
    }
}

/// Exponent of the polynomial moment growth bound for a kernel bracketed by
/// `n^{b2}`/`n^{b1}`-type diffusion decay.
pub fn gamma_exponent(a: f64, b1: f64, b2: f64, dim: usize) -> Result<f64> {
    if !(a >= 0.0 && b2 >= 0.0 && b2 <= b1) {
        return Err(Error::InvalidParameter(format!(
            "need a >= 0 and 0 <= b2 <= b1, got a = {a}, b1 = {b1}, b2 = {b2}"
        )));
    }
    if dim == 0 {
        return Err(Error::UnsupportedDimension(dim));
    }
    let d = dim as f64;
    let base = (2.0 * a + b2 * d - 2.0) / (d + 2.0);
    Ok(if b1 * d > 2.0 {
        base - b1 * (d + 1.0)
    } else {
        base - 0.5 * b1 * d - b1 - 1.0
    })
}

/// Relative drift `|I + G - I(0)| / I(0)` of the tracked-plus-gel mass.
pub struct MassDriftMonitor {
    initial: f64,
    report: BoundReport,
}

impl MassDriftMonitor {
    pub const NAME: &'static str = "mass_drift";

    pub fn new(f0: &MassField, tolerance: f64) -> Self {
        MassDriftMonitor {
            initial: total_mass(f0).with_gel,
            report: BoundReport::new(Self::NAME, tolerance),
        }
    }
}

impl Monitor for MassDriftMonitor {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn observe(&mut self, t: f64, f: &MassField) -> Result<f64> {
        let drift = if self.initial == 0.0 {
            total_mass(f).with_gel.abs()
        } else {
            ((total_mass(f).with_gel - self.initial) / self.initial).abs()
        };
        self.report.update(drift, t, None);
        Ok(drift)
    }

    fn report(&self) -> BoundReport {
        self.report.clone()
    }
}

/// Total particle number `Σ_n ∫ f_n`, which coagulation can only decrease.
pub struct NumberMonitor {
    previous: Option<f64>,
    report: BoundReport,
}

impl NumberMonitor {
    pub const NAME: &'static str = "number_increase";

    pub fn new(tolerance: f64) -> Self {
        NumberMonitor {
            previous: None,
            report: BoundReport::new(Self::NAME, tolerance),
        }
    }
}

impl Monitor for NumberMonitor {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn observe(&mut self, t: f64, f: &MassField) -> Result<f64> {
        let n = f.number();
        if let Some(p) = self.previous {
            if p > 0.0 {
                self.report.update((n - p) / p, t, None);
            }
        }
        self.previous = Some(n);
        Ok(n)
    }

    fn report(&self) -> BoundReport {
        self.report.clone()
    }
}

/// Most negative density seen.
pub struct PositivityMonitor {
    report: BoundReport,
}

impl PositivityMonitor {
    pub const NAME: &'static str = "negativity";

    pub fn new(tolerance: f64) -> Self {
        PositivityMonitor {
            report: BoundReport::new(Self::NAME, tolerance),
        }
    }
}

impl Monitor for PositivityMonitor {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn observe(&mut self, t: f64, f: &MassField) -> Result<f64> {
        let nc = f.grid().n_cells();
        let (idx, min) = f
            .data()
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |b, (i, v)| if *v < b.1 { (i, *v) } else { b });
        self.report.update(-min, t, Some(idx % nc));
        Ok(min.min(0.0))
    }

    fn report(&self) -> BoundReport {
        self.report.clone()
    }
}

/// Pointwise comparison of `X̂_1(x,t)` with `d(1)^{dim/2} u(x,t)`, where `u`
/// solves the heat equation with rate `d(1)` from the initial mass density.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MajorantStats {
    /// Largest `X̂_1 / (d(1)^{dim/2} u) - 1`, floored at zero.
    pub max_excess: f64,
    /// Largest `|X̂_1 / (d(1)^{dim/2} u) - 1|`.
    pub max_deviation: f64,
    /// Largest `X̂_1 / (d(1)^{dim/2} u)`.
    pub max_ratio: f64,
    pub at_time: f64,
    pub at_cell: usize,
}

/// Denominators below this fraction of `max_x d(1)^{dim/2} u` are floored to it,
/// so roundoff in near-empty cells is not reported as a relative violation.
pub const MAJORANT_FLOOR: f64 = 1e-9;

/// Ratio statistics of `X̂_1(f)` against `d(1)^{dim/2} u` for one time.
pub fn majorant_ratio(f: &MassField, u: &[f64], dp: &DiffusionProfile) -> Result<MajorantStats> {
    let xhat = moment(f, MomentSpec::hat(1.0), dp)?;
    let w = dp.value(1).powf(f.grid().dim() as f64 / 2.0);
    let scale = u.iter().fold(0.0_f64, |m, v| m.max(w * v));
    let mut stats = MajorantStats::default();
    if scale == 0.0 {
        if let Some(cell) = xhat.iter().position(|v| *v > 0.0) {
            stats.max_excess = f64::INFINITY;
            stats.max_deviation = f64::INFINITY;
            stats.max_ratio = f64::INFINITY;
            stats.at_cell = cell;
        }
        return Ok(stats);
    }
    for (cell, (x, uu)) in xhat.iter().zip(u).enumerate() {
        let denom = (w * uu).max(MAJORANT_FLOOR * scale);
        let r = x / denom - 1.0;
        if r > stats.max_excess {
            stats.max_excess = r;
            stats.at_cell = cell;
        }
        stats.max_deviation = stats.max_deviation.max(r.abs());
        stats.max_ratio = stats.max_ratio.max(r + 1.0);
    }
    Ok(stats)
}

pub struct HeatMajorantMonitor {
    dp: DiffusionProfile,
    initial_mass_density: Vec<f64>,
    propagator: HeatPropagator,
    stats: MajorantStats,
    report: BoundReport,
}

impl HeatMajorantMonitor {
    pub const NAME: &'static str = "heat_majorant";
    pub const DEFAULT_TOLERANCE: f64 = 1e-6;

    /// Fails with [`Error::NotNonIncreasing`] if `dp` increases somewhere.
    pub fn new(f0: &MassField, dp: &DiffusionProfile, tolerance: f64) -> Result<Self> {
        if let Some(n) = dp.monotonicity_witness() {
            return Err(Error::NotNonIncreasing { n });
        }
        Ok(HeatMajorantMonitor {
            dp: dp.clone(),
            initial_mass_density: plain_moment(f0, 1.0),
            propagator: HeatPropagator::new(*f0.grid()),
            stats: MajorantStats::default(),
            report: BoundReport::new(Self::NAME, tolerance),
        })
    }

    pub fn stats(&self) -> MajorantStats {
        self.stats
    }
}

impl Monitor for HeatMajorantMonitor {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn observe(&mut self, t: f64, f: &MassField) -> Result<f64> {
        let u = self
            .propagator
            .heat_step(&self.initial_mass_density, self.dp.value(1), t)?;
        let s = majorant_ratio(f, &u, &self.dp)?;
        if s.max_excess > self.stats.max_excess {
            self.stats.max_excess = s.max_excess;
            self.stats.at_time = t;
            self.stats.at_cell = s.at_cell;
        }
        self.stats.max_deviation = self.stats.max_deviation.max(s.max_deviation);
        self.stats.max_ratio = self.stats.max_ratio.max(s.max_ratio);
        self.report.update(s.max_excess, t, Some(s.at_cell));
        Ok(s.max_ratio)
    }

    fn report(&self) -> BoundReport {
        self.report.clone()
    }
}

/// Post-processing form of the heat-majorant check over stored snapshots.
pub fn check_heat_majorant(
    times: &[f64],
    snapshots: &[MassField],
    dp: &DiffusionProfile,
    tolerance: f64,
) -> Result<(BoundReport, MajorantStats)> {
    let f0 = snapshots
        .first()
        .ok_or_else(|| Error::InvalidParameter("no snapshots to check".into()))?;
    let mut mon = HeatMajorantMonitor::new(f0, dp, tolerance)?;
    for (t, f) in times.iter().zip(snapshots) {
        mon.observe(*t, f)?;
    }
    Ok((mon.report(), mon.stats()))
}

/// `Σ_cells Σ_n n |f_n - g_n| h^dim`.
pub fn l1_distance(f: &MassField, g: &MassField) -> Result<f64> {
    if f.grid() != g.grid() || f.n_max() != g.n_max() {
        return Err(Error::InvalidParameter("fields live on different grids".into()));
    }
    let nc = f.grid().n_cells();
    let dist: f64 = f
        .data()
        .iter()
        .zip(g.data())
        .enumerate()
        .map(|(i, (a, b))| (i / nc + 1) as f64 * (a - b).abs())
        .sum();
    Ok(dist * f.grid().cell_volume())
}

/// Largest per-cell `Σ_n n^2 f_n` over all fields.
pub fn observed_second_moment_sup<'a>(fields: impl IntoIterator<Item = &'a MassField>) -> f64 {
    fields
        .into_iter()
        .map(|f| plain_moment(f, 2.0).into_iter().fold(0.0, f64::max))
        .fold(0.0, f64::max)
}

/// Smallest `c0` with `alpha(n,m) <= c0 n m` on the truncated range.
pub fn product_bound_constant(k: &Kernel, n_max: usize) -> f64 {
    let mut c0 = 0.0_f64;
    for n in 1..=n_max {
        for m in 1..=n {
            c0 = c0.max(k.get(n, m) / (n * m) as f64);
        }
    }
    c0
}

/// Checks `X(t) <= exp(4 c0 A t) X(0)` for the L¹ distance `X` between two
/// runs recorded at the same times.
///
/// Errors with [`Error::Hypothesis`] if `alpha(n,m) <= c0 n m` fails or if
/// `A` is below the observed sup of `Σ_n n^2 f_n` over both runs.
pub fn check_l1_stability(
    times: &[f64],
    f_snaps: &[MassField],
    g_snaps: &[MassField],
    k: &Kernel,
    c0: f64,
    a_bound: f64,
) -> Result<BoundReport> {
    if f_snaps.len() != times.len() || g_snaps.len() != times.len() || times.is_empty() {
        return Err(Error::InvalidParameter(
            "both runs need one snapshot per recorded time".into(),
        ));
    }
    let n_max = f_snaps[0].n_max();
    let needed = product_bound_constant(k, n_max);
    if needed > c0 * (1.0 + 1e-12) {
        return Err(Error::Hypothesis(format!(
            "kernel needs alpha(n,m) <= c0 n m with c0 >= {needed}, got c0 = {c0}"
        )));
    }
    let sup = observed_second_moment_sup(f_snaps.iter().chain(g_snaps));
    if a_bound < sup * (1.0 - 1e-12) {
        return Err(Error::Hypothesis(format!(
            "L1 stability needs A >= sup_x sum_n n^2 f_n = {sup}, got A = {a_bound}"
        )));
    }
    let x0 = l1_distance(&f_snaps[0], &g_snaps[0])?;
    let mut report = BoundReport::new("l1_stability", 1.0);
    for (i, t) in times.iter().enumerate() {
        let x = l1_distance(&f_snaps[i], &g_snaps[i])?;
        let bound = (4.0 * c0 * a_bound * t).exp() * x0;
        let ratio = if bound > 0.0 {
            x / bound
        } else if x == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        report.update(ratio, *t, None);
    }
    report.passed = report.max_violation <= report.tolerance;
    Ok(report)
}

/// Refinement trend of a moment bound.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentPlateau {
    pub a: f64,
    /// `sup_t ∫ X_a` for each refinement.
    pub sup_moment: Vec<f64>,
    /// `∫∫ Y_{a-1}` for each refinement (empty for homogeneous runs).
    pub pair_integral: Vec<f64>,
    /// `∫∫ Ŷ_{a-1}` for each refinement.
    pub pair_hat_integral: Vec<f64>,
    pub report: BoundReport,
}

/// Relative plateau tolerance between successive refinements.
pub const PLATEAU_TOLERANCE: f64 = 0.05;

fn trapezoid(t: &[f64], y: &[f64]) -> f64 {
    t.windows(2)
        .zip(y.windows(2))
        .map(|(tw, yw)| 0.5 * (tw[1] - tw[0]) * (yw[0] + yw[1]))
        .sum()
}

fn max_relative_step(v: &[f64]) -> (f64, usize) {
    let mut worst = (0.0, 0);
    for (i, w) in v.windows(2).enumerate() {
        let scale = w[0].abs().max(w[1].abs());
        let r = if scale == 0.0 { 0.0 } else { (w[1] - w[0]).abs() / scale };
        if r > worst.0 {
            worst = (r, i + 1);
        }
    }
    worst
}

/// Compares `sup_t ∫X_a`, `∫∫Y_{a-1}` and `∫∫Ŷ_{a-1}` across runs ordered by
/// increasing mass range. Each run must record moment `a` and pair moment `a - 1`.
pub fn check_moment_bound(records: &[RunRecord], a: f64) -> Result<MomentPlateau> {
    if records.len() < 2 {
        return Err(Error::InvalidParameter("plateau check needs at least two refinements".into()));
    }
    let mut out = MomentPlateau {
        a,
        sup_moment: Vec::new(),
        pair_integral: Vec::new(),
        pair_hat_integral: Vec::new(),
        report: BoundReport::new(format!("moment_plateau_a{a}"), PLATEAU_TOLERANCE),
    };
    for r in records {
        let xa = r
            .moment(a)
            .ok_or_else(|| Error::InvalidParameter(format!("run did not record X{a}")))?;
        out.sup_moment.push(xa.iter().copied().fold(0.0, f64::max));
        let p = r
            .pair(a - 1.0)
            .ok_or_else(|| Error::InvalidParameter(format!("run did not record Y{}", a - 1.0)))?;
        if !p.y.is_empty() {
            out.pair_integral.push(trapezoid(&r.times, &p.y));
        }
        out.pair_hat_integral.push(trapezoid(&r.times, &p.y_hat));
    }
    for series in [&out.sup_moment, &out.pair_integral, &out.pair_hat_integral] {
        let (r, i) = max_relative_step(series);
        out.report.update(r, i as f64, None);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GelOutcome {
    Conserving,
    Gelling,
    Inconclusive,
}

impl fmt::Display for GelOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GelOutcome::Conserving => "conserving",
            GelOutcome::Gelling => "gelling",
            GelOutcome::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GelVerdict {
    pub n_list: Vec<usize>,
    /// `I(T) / I(0)` per mass range.
    pub mass_ratio: Vec<f64>,
    /// `G(T)` per mass range.
    pub gel: Vec<f64>,
    pub initial_mass: f64,
    pub outcome: GelOutcome,
    /// `G(T)` at the finest mass range when gelling.
    pub limit: Option<f64>,
}

impl GelVerdict {
    pub const CSV_HEADER: &'static str = "n_max,mass_ratio,gel";

    pub fn to_csv(&self) -> String {
        let mut s = format!("# smolkit gelscan v1\n# verdict = {}\n{}\n", self.outcome, Self::CSV_HEADER);
        for i in 0..self.n_list.len() {
            s.push_str(&format!("{},{:?},{:?}\n", self.n_list[i], self.mass_ratio[i], self.gel[i]));
        }
        s
    }
}

impl fmt::Display for GelVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "gelation scan: {}", self.outcome)?;
        for i in 0..self.n_list.len() {
            writeln!(
                f,
                "  N_max = {:>6}  I(T)/I(0) = {:.6}  G(T) = {:.6e}",
                self.n_list[i], self.mass_ratio[i], self.gel[i]
            )?;
        }
        if let Some(l) = self.limit {
            writeln!(f, "  gel limit = {l:.6}")?;
        }
        Ok(())
    }
}

/// Relative change between successive refinements below which a positive
/// gel mass counts as converged.
pub const GEL_CONVERGENCE: f64 = 0.10;

/// Classifies a sequence of gel masses at increasing mass ranges.
pub fn classify_gel(gel: &[f64], initial_mass: f64) -> (GelOutcome, Option<f64>) {
    let negligible = 1e-14 * initial_mass.abs().max(f64::MIN_POSITIVE);
    if gel.iter().all(|g| *g <= negligible) {
        return (GelOutcome::Conserving, None);
    }
    if gel.len() < 2 {
        return (GelOutcome::Inconclusive, None);
    }
    if gel.windows(2).all(|w| w[1] <= 0.5 * w[0]) {
        return (GelOutcome::Conserving, None);
    }
    let last = *gel.last().unwrap();
    let increasing = gel.windows(2).all(|w| w[1] >= w[0]);
    let decreasing = gel.windows(2).all(|w| w[1] <= w[0]);
    let converged = gel
        .windows(2)
        .all(|w| (w[1] - w[0]).abs() < GEL_CONVERGENCE * w[0].abs().max(w[1].abs()));
    if last > negligible && (increasing || decreasing) && converged {
        (GelOutcome::Gelling, Some(last))
    } else {
        (GelOutcome::Inconclusive, None)
    }
}

/// Largest stable step for the initial state with a 10% margin.
fn initial_stable_dt(c0: &HomogeneousState, k: &Kernel, policy: TruncationPolicy) -> f64 {
    let mut partner = vec![0.0; c0.c.len()];
    partner_sums(&c0.c, k, policy, &mut partner);
    let worst = partner.iter().fold(0.0_f64, |m, v| m.max(*v));
    if worst == 0.0 {
        f64::INFINITY
    } else {
        0.9 * 0.5 / (2.0 * worst)
    }
}

/// Runs the homogeneous system for every mass range in `n_list` (ascending)
/// and classifies the trend of the gel mass `G(T)`.
///
/// `kernel` must be resizable (a parametric family) or already cover the
/// largest range. The step is reduced below `cfg.dt` if the initial state
/// requires it, and halved automatically afterwards.
pub fn gelation_scan(
    kernel: &Kernel,
    n_list: &[usize],
    cfg: &RunConfig,
    initial: impl Fn(usize) -> HomogeneousState,
) -> Result<GelVerdict> {
    if n_list.is_empty() || n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("mass ranges must be strictly increasing".into()));
    }
    let mut verdict = GelVerdict {
        n_list: n_list.to_vec(),
        mass_ratio: Vec::new(),
        gel: Vec::new(),
        initial_mass: 0.0,
        outcome: GelOutcome::Inconclusive,
        limit: None,
    };
    for &n in n_list {
        let k = if kernel.n_max() == n {
            kernel.clone()
        } else {
            kernel.resized(n)?
        };
        let c0 = initial(n);
        if c0.c.len() != n {
            return Err(Error::InvalidParameter(format!(
                "initial state has {} entries, expected {n}",
                c0.c.len()
            )));
        }
        let mut run_cfg = cfg.clone();
        run_cfg.dt = cfg.dt.min(initial_stable_dt(&c0, &k, cfg.policy));
        run_cfg.auto_halve = true;
        run_cfg.stride = cfg.t_final.max(run_cfg.dt);
        let rec = homogeneous_run(&c0, &k, &run_cfg)?;
        let i0 = rec.mass[0];
        verdict.initial_mass = i0;
        let last = rec.mass.len() - 1;
        verdict.mass_ratio.push(if i0 == 0.0 { 1.0 } else { rec.mass[last] / i0 });
        verdict.gel.push(rec.gel[last]);
    }
    let (outcome, limit) = classify_gel(&verdict.gel, verdict.initial_mass);
    verdict.outcome = outcome;
    verdict.limit = limit;
    Ok(verdict)
}

/// Least-squares slope of `log y` against `t`, skipping nonpositive values.
/// Used as a growth diagnostic for `∫X_2`; not a pass/fail check.
pub fn exponential_growth_rate(t: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = t
        .iter()
        .zip(y)
        .filter(|(_, v)| **v > 0.0)
        .map(|(a, v)| (*a, v.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    Some(sxy / sxx)
}
