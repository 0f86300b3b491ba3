//! Time integration of the coagulation–diffusion system by operator
//! splitting, and the spatially homogeneous ODE path.
//!
//! Each step diffuses every species with its own rate `d(n)` using the
//! exact spectral propagator and advances the reaction term cell by cell
//! with classical RK4. The reaction substep is only taken when
//! `dt * 2 * max_n Σ_m alpha(n,m) f_m <= 0.5`; this keeps RK4 well inside
//! its stability region and is what keeps densities nonnegative. Reaction
//! output is never clipped.

use rayon::prelude::*;

use crate::analysis::Monitor;
use crate::coagulation::{cell_rates, partner_sums, TruncationPolicy};
use crate::diffusion::HeatPropagator;
use crate::error::{Error, Result};
use crate::field::{pair_moment, plain_moment, total_mass, Grid, MassField};
use crate::kernels::{DiffusionProfile, Kernel};

/// Largest allowed `dt * 2 * Σ_m alpha(n,m) f_m`.
pub const LOSS_DOMINANCE_LIMIT: f64 = 0.5;

/// Deepest recursion of the automatic step-halving rule.
const MAX_HALVINGS: u32 = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Splitting {
    /// half diffusion, full reaction, half diffusion
    Strang,
    /// full diffusion, then full reaction
    Lie,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub t_final: f64,
    pub dt: f64,
    pub splitting: Splitting,
    pub policy: TruncationPolicy,
    /// Output spacing in physical time, snapped to whole steps.
    pub stride: f64,
    pub seed: u64,
    /// Split a step in halves, recursively, when it violates the loss-dominance bound.
    pub auto_halve: bool,
    /// Extra `∫X_a` columns beyond `X0, X1, X2`.
    pub moment_exponents: Vec<f64>,
    /// `∫Y_a` and `∫Ŷ_a` columns.
    pub pair_moment_exponents: Vec<f64>,
    pub keep_snapshots: bool,
}

impl RunConfig {
    pub fn new(t_final: f64, dt: f64) -> Self {
        RunConfig {
            t_final,
            dt,
            splitting: Splitting::Strang,
            policy: TruncationPolicy::Cutoff,
            stride: t_final.max(dt),
            seed: 0,
            auto_halve: false,
            moment_exponents: Vec::new(),
            pair_moment_exponents: Vec::new(),
            keep_snapshots: false,
        }
    }

    pub fn with_policy(mut self, policy: TruncationPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_stride(mut self, stride: f64) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_splitting(mut self, splitting: Splitting) -> Self {
        self.splitting = splitting;
        self
    }

    pub fn with_snapshots(mut self) -> Self {
        self.keep_snapshots = true;
        self
    }

    pub fn with_auto_halve(mut self) -> Self {
        self.auto_halve = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_final >= 0.0 && self.t_final.is_finite()) {
            return Err(Error::InvalidParameter(format!("t_final = {} must be >= 0", self.t_final)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt = {} must be > 0", self.dt)));
        }
        if !(self.stride > 0.0 && self.stride.is_finite()) {
            return Err(Error::InvalidParameter(format!("stride = {} must be > 0", self.stride)));
        }
        for a in self.moment_exponents.iter().chain(&self.pair_moment_exponents) {
            if !(*a >= 0.0) {
                return Err(Error::InvalidParameter(format!("moment exponent {a} must be >= 0")));
            }
        }
        Ok(())
    }

    /// `(number of steps, effective dt, steps per output stride)`.
    fn schedule(&self) -> (usize, f64, usize) {
        if self.t_final == 0.0 {
            return (0, self.dt, 1);
        }
        let n_steps = ((self.t_final / self.dt) - 1e-9).ceil().max(1.0) as usize;
        let dt = self.t_final / n_steps as f64;
        let per_stride = ((self.stride / dt).round() as usize).max(1);
        (n_steps, dt, per_stride)
    }
}

/// Concentrations of a spatially homogeneous system, index `n - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct HomogeneousState {
    pub c: Vec<f64>,
    pub gel: f64,
}

impl HomogeneousState {
    pub fn monodisperse(n_max: usize, c1: f64) -> Self {
        let mut c = vec![0.0; n_max];
        c[0] = c1;
        HomogeneousState { c, gel: 0.0 }
    }

    pub fn mass(&self) -> f64 {
        self.c.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v).sum()
    }

    pub fn number(&self) -> f64 {
        self.c.iter().sum()
    }
}

/// A named time series.
#[derive(Clone, Debug, PartialEq)]
pub struct Column {
    pub name: String,
    pub values: Vec<f64>,
}

/// Spatial integrals of `Y_a` and `Ŷ_a` at each output time.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSeries {
    pub a: f64,
    /// Empty for homogeneous runs, which carry no diffusion profile.
    pub y: Vec<f64>,
    pub y_hat: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FinalState {
    Field(MassField),
    Homogeneous(HomogeneousState),
}

/// Time series produced by [`run`] and [`homogeneous_run`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub times: Vec<f64>,
    /// Tracked mass `I(t)`.
    pub mass: Vec<f64>,
    pub gel: Vec<f64>,
    pub mass_with_gel: Vec<f64>,
    /// `∫X_a` for `a = 0, 1, 2` and any extra exponents, named `X{a}`.
    pub moments: Vec<(f64, Column)>,
    pub pair_moments: Vec<PairSeries>,
    /// One column per monitor, holding the value it returned at each output.
    pub monitor_columns: Vec<Column>,
    pub snapshots: Vec<MassField>,
    pub final_state: FinalState,
    pub steps: usize,
    pub halvings: usize,
    /// Total negative undershoot removed from diffusion output.
    pub clipped_mass: f64,
}

impl RunRecord {
    pub fn moment(&self, a: f64) -> Option<&[f64]> {
        self.moments
            .iter()
            .find(|(e, _)| *e == a)
            .map(|(_, c)| c.values.as_slice())
    }

    pub fn pair(&self, a: f64) -> Option<&PairSeries> {
        self.pair_moments.iter().find(|p| p.a == a)
    }

    pub fn monitor(&self, name: &str) -> Option<&[f64]> {
        self.monitor_columns
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.values.as_slice())
    }

    pub fn final_field(&self) -> Option<&MassField> {
        match &self.final_state {
            FinalState::Field(f) => Some(f),
            FinalState::Homogeneous(_) => None,
        }
    }

    pub fn final_homogeneous(&self) -> Option<&HomogeneousState> {
        match &self.final_state {
            FinalState::Homogeneous(s) => Some(s),
            FinalState::Field(_) => None,
        }
    }

    /// Largest `|I(t) + G(t) - I(0)| / I(0)` over the record.
    pub fn max_mass_drift(&self) -> f64 {
        let i0 = self.mass_with_gel[0];
        if i0 == 0.0 {
            return 0.0;
        }
        self.mass_with_gel
            .iter()
            .map(|m| ((m - i0) / i0).abs())
            .fold(0.0, f64::max)
    }
}

fn moment_exponents(cfg: &RunConfig) -> Vec<f64> {
    let mut out = vec![0.0, 1.0, 2.0];
    for a in &cfg.moment_exponents {
        if !out.contains(a) {
            out.push(*a);
        }
    }
    out
}

fn moment_name(a: f64) -> String {
    format!("X{a}")
}

struct Workspace {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
    partner: Vec<f64>,
}

impl Workspace {
    fn new(n_max: usize) -> Self {
        Workspace {
            k: std::array::from_fn(|_| vec![0.0; n_max]),
            tmp: vec![0.0; n_max],
            partner: vec![0.0; n_max],
        }
    }
}

/// One RK4 step of `dc/dt = Q(c)`; returns the gel density gained.
fn rk4_cell(c: &mut [f64], k: &Kernel, policy: TruncationPolicy, dt: f64, ws: &mut Workspace) -> f64 {
    let Workspace { k: stages, tmp, partner } = ws;
    let mut fluxes = [0.0; 4];
    let coeffs = [0.0, 0.5, 0.5, 1.0];
    for s in 0..4 {
        if s == 0 {
            tmp.copy_from_slice(c);
        } else {
            let (prev, _) = stages.split_at(s);
            for i in 0..c.len() {
                tmp[i] = c[i] + coeffs[s] * dt * prev[s - 1][i];
            }
        }
        fluxes[s] = cell_rates(tmp, k, policy, &mut stages[s], partner);
    }
    for i in 0..c.len() {
        c[i] += dt / 6.0 * (stages[0][i] + 2.0 * stages[1][i] + 2.0 * stages[2][i] + stages[3][i]);
    }
    dt / 6.0 * (fluxes[0] + 2.0 * fluxes[1] + 2.0 * fluxes[2] + fluxes[3])
}

/// Largest `dt * 2 * Σ_m alpha(n,m) c_m` over `n`, with its mass index.
fn loss_dominance(c: &[f64], k: &Kernel, policy: TruncationPolicy, dt: f64, partner: &mut [f64]) -> (usize, f64) {
    partner_sums(c, k, policy, partner);
    partner
        .iter()
        .enumerate()
        .map(|(i, s)| (i + 1, 2.0 * dt * s))
        .fold((1, 0.0), |best, cur| if cur.1 > best.1 { cur } else { best })
}

/// Diagnostics of a single split step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepInfo {
    pub clipped_mass: f64,
    pub gel_gained: f64,
}

/// Reusable split-step integrator for one grid, kernel and profile.
pub struct Stepper<'a> {
    kernel: &'a Kernel,
    dp: &'a DiffusionProfile,
    propagator: HeatPropagator,
    policy: TruncationPolicy,
    splitting: Splitting,
}

impl<'a> Stepper<'a> {
    pub fn new(
        grid: Grid,
        n_max: usize,
        kernel: &'a Kernel,
        dp: &'a DiffusionProfile,
        policy: TruncationPolicy,
        splitting: Splitting,
    ) -> Result<Self> {
        if kernel.n_max() < n_max || dp.n_max() < n_max {
            return Err(Error::IndexOutOfRange {
                index: n_max,
                n_max: kernel.n_max().min(dp.n_max()),
            });
        }
        Ok(Stepper {
            kernel,
            dp,
            propagator: HeatPropagator::new(grid),
            policy,
            splitting,
        })
    }

    /// Fails with [`Error::StepTooLarge`] naming the worst cell and mass if
    /// the loss-dominance bound is violated.
    pub fn check_stability(&self, f: &MassField, dt: f64) -> Result<()> {
        let nc = f.grid().n_cells();
        let worst = (0..nc)
            .into_par_iter()
            .map_init(
                || vec![0.0; f.n_max()],
                |partner, cell| {
                    let (n, v) = loss_dominance(&f.cell_vector(cell), self.kernel, self.policy, dt, partner);
                    (cell, n, v)
                },
            )
            .reduce(
                || (0, 1, 0.0),
                |a, b| {
                    if b.2 > a.2 || (b.2 == a.2 && b.0 < a.0) {
                        b
                    } else {
                        a
                    }
                },
            );
        if worst.2 > LOSS_DOMINANCE_LIMIT {
            return Err(Error::StepTooLarge {
                cell: worst.0,
                n: worst.1,
                value: worst.2,
            });
        }
        Ok(())
    }

    fn diffuse(&self, f: &mut MassField, tau: f64) -> f64 {
        let nc = f.grid().n_cells();
        let dp = self.dp;
        let prop = &self.propagator;
        let clipped: Vec<f64> = f
            .data_mut()
            .par_chunks_mut(nc)
            .enumerate()
            .map(|(i, slab)| prop.propagate(slab, dp.value(i + 1), tau).clipped_mass)
            .collect();
        clipped.iter().sum()
    }

    fn react(&self, f: &mut MassField, dt: f64) -> f64 {
        let n_max = f.n_max();
        let nc = f.grid().n_cells();
        let mut cells = vec![0.0; n_max * nc];
        {
            let data = f.data();
            for i in 0..n_max {
                for cell in 0..nc {
                    cells[cell * n_max + i] = data[i * nc + cell];
                }
            }
        }
        let mut gel = vec![0.0; nc];
        cells
            .par_chunks_mut(n_max)
            .zip(gel.par_iter_mut())
            .for_each_init(
                || Workspace::new(n_max),
                |ws, (c, g)| {
                    *g = rk4_cell(c, self.kernel, self.policy, dt, ws);
                },
            );
        let data = f.data_mut();
        for i in 0..n_max {
            for cell in 0..nc {
                data[i * nc + cell] = cells[cell * n_max + i];
            }
        }
        let gained = gel.iter().sum::<f64>() * f.grid().cell_volume();
        f.set_gel(f.gel() + gained);
        gained
    }

    /// Advances `f` by `dt` in place. Nothing is modified on error.
    pub fn step(&self, f: &mut MassField, dt: f64) -> Result<StepInfo> {
        self.check_stability(f, dt)?;
        let mut info = StepInfo::default();
        match self.splitting {
            Splitting::Strang => {
                info.clipped_mass += self.diffuse(f, 0.5 * dt);
                info.gel_gained = self.react(f, dt);
                info.clipped_mass += self.diffuse(f, 0.5 * dt);
            }
            Splitting::Lie => {
                info.clipped_mass += self.diffuse(f, dt);
                info.gel_gained = self.react(f, dt);
            }
        }
        Ok(info)
    }
}

/// One split step of length `cfg.dt`.
pub fn step(f: &MassField, k: &Kernel, dp: &DiffusionProfile, cfg: &RunConfig) -> Result<MassField> {
    cfg.validate()?;
    let stepper = Stepper::new(*f.grid(), f.n_max(), k, dp, cfg.policy, cfg.splitting)?;
    let mut out = f.clone();
    stepper.step(&mut out, cfg.dt)?;
    Ok(out)
}

fn first_non_finite(f: &MassField) -> Option<(usize, usize)> {
    let nc = f.grid().n_cells();
    f.data()
        .iter()
        .position(|v| !v.is_finite())
        .map(|i| (i / nc + 1, i % nc))
}

struct Recorder {
    record: RunRecord,
}

impl Recorder {
    fn new(cfg: &RunConfig, final_state: FinalState, monitors: &[&mut dyn Monitor]) -> Self {
        let exponents = moment_exponents(cfg);
        let record = RunRecord {
            times: Vec::new(),
            mass: Vec::new(),
            gel: Vec::new(),
            mass_with_gel: Vec::new(),
            moments: exponents
                .iter()
                .map(|&a| {
                    (
                        a,
                        Column {
                            name: moment_name(a),
                            values: Vec::new(),
                        },
                    )
                })
                .collect(),
            pair_moments: cfg
                .pair_moment_exponents
                .iter()
                .map(|&a| PairSeries {
                    a,
                    y: Vec::new(),
                    y_hat: Vec::new(),
                })
                .collect(),
            monitor_columns: monitors
                .iter()
                .map(|m| Column {
                    name: m.name().to_string(),
                    values: Vec::new(),
                })
                .collect(),
            snapshots: Vec::new(),
            final_state,
            steps: 0,
            halvings: 0,
            clipped_mass: 0.0,
        };
        Recorder { record }
    }
}

/// Integrates the spatial system from `f0` to `cfg.t_final`, recording
/// diagnostics and calling every monitor at each output stride.
pub fn run(
    f0: &MassField,
    k: &Kernel,
    dp: &DiffusionProfile,
    cfg: &RunConfig,
    monitors: &mut [&mut dyn Monitor],
) -> Result<RunRecord> {
    cfg.validate()?;
    f0.validate()?;
    let stepper = Stepper::new(*f0.grid(), f0.n_max(), k, dp, cfg.policy, cfg.splitting)?;
    let (n_steps, dt, per_stride) = cfg.schedule();
    let mut rec = Recorder::new(cfg, FinalState::Field(f0.clone()), monitors);
    let mut f = f0.clone();
    record_field(&mut rec, 0.0, &f, k, dp, cfg, monitors)?;
    for s in 1..=n_steps {
        let t = s as f64 * dt;
        advance(&stepper, &mut f, dt, cfg.auto_halve, 0, &mut rec.record)?;
        if let Some((n, cell)) = first_non_finite(&f) {
            return Err(Error::NonFinite { t, n, cell });
        }
        rec.record.steps = s;
        if s % per_stride == 0 || s == n_steps {
            record_field(&mut rec, t, &f, k, dp, cfg, monitors)?;
        }
    }
    rec.record.final_state = FinalState::Field(f);
    Ok(rec.record)
}

fn advance(
    stepper: &Stepper<'_>,
    f: &mut MassField,
    dt: f64,
    auto_halve: bool,
    depth: u32,
    rec: &mut RunRecord,
) -> Result<()> {
    match stepper.step(f, dt) {
        Ok(info) => {
            rec.clipped_mass += info.clipped_mass;
            Ok(())
        }
        Err(Error::StepTooLarge { .. }) if auto_halve && depth < MAX_HALVINGS => {
            rec.halvings += 1;
            advance(stepper, f, 0.5 * dt, auto_halve, depth + 1, rec)?;
            advance(stepper, f, 0.5 * dt, auto_halve, depth + 1, rec)
        }
        Err(e) => Err(e),
    }
}

fn record_field(
    rec: &mut Recorder,
    t: f64,
    f: &MassField,
    k: &Kernel,
    dp: &DiffusionProfile,
    cfg: &RunConfig,
    monitors: &mut [&mut dyn Monitor],
) -> Result<()> {
    let dv = f.grid().cell_volume();
    let totals = total_mass(f);
    let r = &mut rec.record;
    r.times.push(t);
    r.mass.push(totals.tracked);
    r.gel.push(f.gel());
    r.mass_with_gel.push(totals.with_gel);
    for (a, col) in r.moments.iter_mut() {
        col.values.push(plain_moment(f, *a).iter().sum::<f64>() * dv);
    }
    for p in r.pair_moments.iter_mut() {
        p.y.push(pair_moment(f, p.a, dp, k, false)?.iter().sum::<f64>() * dv);
        p.y_hat.push(pair_moment(f, p.a, dp, k, true)?.iter().sum::<f64>() * dv);
    }
    for (m, col) in monitors.iter_mut().zip(r.monitor_columns.iter_mut()) {
        col.values.push(m.observe(t, f)?);
    }
    if cfg.keep_snapshots {
        r.snapshots.push(f.clone());
    }
    Ok(())
}

fn homogeneous_step(
    state: &mut HomogeneousState,
    k: &Kernel,
    policy: TruncationPolicy,
    dt: f64,
    ws: &mut Workspace,
) -> Result<()> {
    let (n, value) = loss_dominance(&state.c, k, policy, dt, &mut ws.partner);
    if value > LOSS_DOMINANCE_LIMIT {
        return Err(Error::StepTooLarge { cell: 0, n, value });
    }
    state.gel += rk4_cell(&mut state.c, k, policy, dt, ws);
    Ok(())
}

fn homogeneous_advance(
    state: &mut HomogeneousState,
    k: &Kernel,
    cfg: &RunConfig,
    dt: f64,
    depth: u32,
    ws: &mut Workspace,
    halvings: &mut usize,
) -> Result<()> {
    match homogeneous_step(state, k, cfg.policy, dt, ws) {
        Err(Error::StepTooLarge { .. }) if cfg.auto_halve && depth < MAX_HALVINGS => {
            *halvings += 1;
            homogeneous_advance(state, k, cfg, 0.5 * dt, depth + 1, ws, halvings)?;
            homogeneous_advance(state, k, cfg, 0.5 * dt, depth + 1, ws, halvings)
        }
        other => other,
    }
}

/// RK4 integration of `dc_n/dt = Q_n(c)` with the configured truncation.
///
/// Pair-moment columns record only `Ŷ_a`, since no diffusion profile is involved.
pub fn homogeneous_run(c0: &HomogeneousState, k: &Kernel, cfg: &RunConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let n_max = c0.c.len();
    if n_max == 0 {
        return Err(Error::InvalidParameter("homogeneous state is empty".into()));
    }
    if k.n_max() < n_max {
        return Err(Error::IndexOutOfRange {
            index: n_max,
            n_max: k.n_max(),
        });
    }
    if let Some(i) = c0.c.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "concentration c_{} = {} must be nonnegative",
            i + 1,
            c0.c[i]
        )));
    }
    let (n_steps, dt, per_stride) = cfg.schedule();
    let mut rec = Recorder::new(cfg, FinalState::Homogeneous(c0.clone()), &[]);
    let mut state = c0.clone();
    let mut ws = Workspace::new(n_max);
    record_homogeneous(&mut rec.record, 0.0, &state, k);
    for s in 1..=n_steps {
        let t = s as f64 * dt;
        homogeneous_advance(&mut state, k, cfg, dt, 0, &mut ws, &mut rec.record.halvings)?;
        if let Some(i) = state.c.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { t, n: i + 1, cell: 0 });
        }
        rec.record.steps = s;
        if s % per_stride == 0 || s == n_steps {
            record_homogeneous(&mut rec.record, t, &state, k);
        }
    }
    rec.record.final_state = FinalState::Homogeneous(state);
    Ok(rec.record)
}

fn record_homogeneous(r: &mut RunRecord, t: f64, s: &HomogeneousState, k: &Kernel) {
    let mass = s.mass();
    r.times.push(t);
    r.mass.push(mass);
    r.gel.push(s.gel);
    r.mass_with_gel.push(mass + s.gel);
    for (a, col) in r.moments.iter_mut() {
        let v = s
            .c
            .iter()
            .enumerate()
            .map(|(i, c)| ((i + 1) as f64).powf(*a) * c)
            .sum();
        col.values.push(v);
    }
    for p in r.pair_moments.iter_mut() {
        let n_max = s.c.len();
        let mut acc = 0.0;
        for n in 1..=n_max {
            for m in 1..=n_max {
                let (nf, mf) = (n as f64, m as f64);
                acc += (nf.powf(p.a) * mf + mf.powf(p.a) * nf) * k.get(n, m) * s.c[n - 1] * s.c[m - 1];
            }
        }
        p.y_hat.push(acc);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::heat_step;

    fn blob(grid: Grid, n_max: usize) -> MassField {
        MassField::from_fn(grid, n_max, |n, x| {
            let r = x[0] - 0.5;
            if n <= 2 {
                0.2 + (-(r * r) / 0.01).exp() / n as f64
            } else {
                0.0
            }
        })
        .unwrap()
    }

    #[test]
    fn zero_kernel_is_pure_diffusion() {
        let g = Grid::new(1, 1.0, 32).unwrap();
        let f = blob(g, 4);
        let k = Kernel::constant(0.0, 4).unwrap();
        let dp = DiffusionProfile::power_law(0.1, 0.5, 4).unwrap();
        let cfg = RunConfig::new(0.05, 0.05);
        let out = step(&f, &k, &dp, &cfg).unwrap();
        for n in 1..=4 {
            let expect = heat_step(&g, f.species(n), dp.value(n), 0.05).unwrap();
            for (a, b) in out.species(n).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn homogeneous_field_matches_ode_path() {
        let g = Grid::new(2, 1.0, 4).unwrap();
        let n_max = 8;
        let k = Kernel::sum(0.5, n_max).unwrap();
        let dp = DiffusionProfile::power_law(1.0, 1.0, n_max).unwrap();
        let c: Vec<f64> = (1..=n_max).map(|n| 1.0 / (n * n) as f64).collect();
        let f = MassField::from_fn(g, n_max, |n, _| c[n - 1]).unwrap();
        let cfg = RunConfig::new(0.01, 0.01).with_policy(TruncationPolicy::GelReservoir);
        let out = step(&f, &k, &dp, &cfg).unwrap();
        let rec = homogeneous_run(&HomogeneousState { c: c.clone(), gel: 0.0 }, &k, &cfg).unwrap();
        let ode = rec.final_homogeneous().unwrap();
        for n in 1..=n_max {
            for cell in 0..g.n_cells() {
                assert!((out.get(n, cell) - ode.c[n - 1]).abs() < 1e-10);
            }
        }
        assert!((out.gel() - ode.gel * g.volume()).abs() < 1e-10);
    }

    #[test]
    fn oversized_step_names_cell_and_mass() {
        let g = Grid::new(1, 1.0, 4).unwrap();
        let f = MassField::from_fn(g, 4, |n, x| if n == 1 && x[0] > 0.5 { 10.0 } else { 0.1 }).unwrap();
        let k = Kernel::constant(1.0, 4).unwrap();
        let dp = DiffusionProfile::constant(1.0, 4).unwrap();
        let cfg = RunConfig::new(1.0, 1.0);
        match step(&f, &k, &dp, &cfg) {
            Err(Error::StepTooLarge { cell, n, value }) => {
                assert!(cell >= 2);
                assert_eq!(n, 1);
                assert!(value > 0.5);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn auto_halving_rescues_large_steps() {
        let k = Kernel::constant(1.0, 16).unwrap();
        let c0 = HomogeneousState::monodisperse(16, 1.0);
        let strict = RunConfig::new(1.0, 0.5);
        assert!(matches!(homogeneous_run(&c0, &k, &strict), Err(Error::StepTooLarge { .. })));
        let rec = homogeneous_run(&c0, &k, &strict.clone().with_auto_halve()).unwrap();
        assert!(rec.halvings > 0);
        assert!(rec.max_mass_drift() < 1e-12);
    }

    #[test]
    fn zero_horizon_records_only_the_initial_state() {
        let k = Kernel::constant(1.0, 4).unwrap();
        let rec = homogeneous_run(&HomogeneousState::monodisperse(4, 1.0), &k, &RunConfig::new(0.0, 0.1)).unwrap();
        assert_eq!(rec.times, vec![0.0]);
        assert_eq!(rec.steps, 0);
    }

    #[test]
    fn zero_kernel_leaves_concentrations_alone() {
        let k = Kernel::constant(0.0, 6).unwrap();
        let c0 = HomogeneousState {
            c: vec![0.3, 0.2, 0.1, 0.0, 0.5, 0.05],
            gel: 0.0,
        };
        let rec = homogeneous_run(&c0, &k, &RunConfig::new(2.0, 0.1)).unwrap();
        assert_eq!(rec.final_homogeneous().unwrap(), &c0);
    }

    #[test]
    fn strides_snap_to_steps() {
        let k = Kernel::constant(1.0, 4).unwrap();
        let cfg = RunConfig::new(1.0, 0.1).with_stride(0.25);
        let rec = homogeneous_run(&HomogeneousState::monodisperse(4, 1.0), &k, &cfg).unwrap();
        // 10 steps, stride rounds to 2 or 3 steps: 0.2 x 5 or 0.3 x 3 + final
        assert_eq!(*rec.times.last().unwrap(), 1.0);
        for w in rec.times.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig::new(1.0, 0.0).validate().is_err());
        assert!(RunConfig::new(1.0, -0.1).validate().is_err());
        assert!(RunConfig::new(-1.0, 0.1).validate().is_err());
        assert!(RunConfig::new(1.0, 0.1).with_stride(0.0).validate().is_err());
    }
}
