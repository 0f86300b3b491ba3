//! Periodic grids, mass-resolved density fields and their moments.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{DiffusionProfile, Kernel};

/// Uniform periodic grid on the torus `[0, side)^dim`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    dim: usize,
    side: f64,
    cells: usize,
}

impl Grid {
    /// `cells` is the number of cells per side and must be a power of two, at least 2.
    pub fn new(dim: usize, side: f64, cells: usize) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::UnsupportedDimension(dim));
        }
        if !(side > 0.0 && side.is_finite()) {
            return Err(Error::InvalidParameter(format!("grid side {side} must be > 0")));
        }
        if cells < 2 || !cells.is_power_of_two() {
            return Err(Error::InvalidParameter(format!(
                "cells per side must be a power of two >= 2, got {cells}"
            )));
        }
        Ok(Grid { dim, side, cells })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn cells_per_side(&self) -> usize {
        self.cells
    }

    pub fn n_cells(&self) -> usize {
        self.cells.pow(self.dim as u32)
    }

    pub fn spacing(&self) -> f64 {
        self.side / self.cells as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    pub fn volume(&self) -> f64 {
        self.side.powi(self.dim as i32)
    }

    /// Per-axis integer coordinates; the last axis varies fastest.
    pub fn coords(&self, cell: usize) -> [usize; 3] {
        let mut c = [0usize; 3];
        let mut rest = cell;
        for axis in (0..self.dim).rev() {
            c[axis] = rest % self.cells;
            rest /= self.cells;
        }
        c
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        coords[..self.dim]
            .iter()
            .fold(0, |acc, &c| acc * self.cells + (c % self.cells))
    }

    pub fn center(&self, cell: usize) -> [f64; 3] {
        let h = self.spacing();
        let c = self.coords(cell);
        let mut x = [0.0; 3];
        for axis in 0..self.dim {
            x[axis] = (c[axis] as f64 + 0.5) * h;
        }
        x
    }

    /// Cell containing a position; positions are wrapped onto the torus first.
    pub fn cell_of(&self, x: &[f64; 3]) -> usize {
        let h = self.spacing();
        let mut idx = 0;
        for &xi in &x[..self.dim] {
            let w = xi.rem_euclid(self.side);
            let c = ((w / h) as usize).min(self.cells - 1);
            idx = idx * self.cells + c;
        }
        idx
    }

    /// Euclidean length of the minimal-image displacement between cell centres.
    pub fn min_image_distance(&self, a: usize, b: usize) -> f64 {
        let (ca, cb) = (self.coords(a), self.coords(b));
        let h = self.spacing();
        let mut r2 = 0.0;
        for axis in 0..self.dim {
            let raw = ca[axis].abs_diff(cb[axis]);
            let steps = raw.min(self.cells - raw);
            r2 += (steps as f64 * h).powi(2);
        }
        r2.sqrt()
    }
}

/// Densities `f_n(x)` for `n = 1..=n_max`, stored mass-major so each
/// species is a contiguous spatial slab, plus the escaped gel mass.
#[derive(Clone, Debug, PartialEq)]
pub struct MassField {
    grid: Grid,
    n_max: usize,
    data: Vec<f64>,
    gel: f64,
}

impl MassField {
    pub fn zeros(grid: Grid, n_max: usize) -> Result<Self> {
        if n_max == 0 {
            return Err(Error::InvalidParameter("n_max must be at least 1".into()));
        }
        Ok(MassField {
            grid,
            n_max,
            data: vec![0.0; n_max * grid.n_cells()],
            gel: 0.0,
        })
    }

    /// `f_n(x) = density(n, centre of x)`.
    pub fn from_fn(grid: Grid, n_max: usize, density: impl Fn(usize, &[f64; 3]) -> f64) -> Result<Self> {
        let mut f = Self::zeros(grid, n_max)?;
        for n in 1..=n_max {
            for cell in 0..grid.n_cells() {
                f.data[(n - 1) * grid.n_cells() + cell] = density(n, &grid.center(cell));
            }
        }
        f.validate()?;
        Ok(f)
    }

    /// All mass in species 1 with density `profile(x)`.
    pub fn monodisperse(grid: Grid, n_max: usize, profile: impl Fn(&[f64; 3]) -> f64) -> Result<Self> {
        Self::from_fn(grid, n_max, |n, x| if n == 1 { profile(x) } else { 0.0 })
    }

    pub fn from_data(grid: Grid, n_max: usize, data: Vec<f64>, gel: f64) -> Result<Self> {
        if data.len() != n_max * grid.n_cells() {
            return Err(Error::InvalidParameter(format!(
                "field data has {} values, expected {}",
                data.len(),
                n_max * grid.n_cells()
            )));
        }
        if !(gel >= 0.0 && gel.is_finite()) {
            return Err(Error::InvalidParameter(format!("gel reservoir {gel} must be >= 0")));
        }
        let f = MassField { grid, n_max, data, gel };
        f.validate()?;
        Ok(f)
    }

    /// Every density finite and nonnegative.
    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            let nc = self.grid.n_cells();
            return Err(Error::InvalidParameter(format!(
                "density f_{}(cell {}) = {} is not a nonnegative finite number",
                i / nc + 1,
                i % nc,
                self.data[i]
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn gel(&self) -> f64 {
        self.gel
    }

    pub fn set_gel(&mut self, gel: f64) {
        self.gel = gel;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn species(&self, n: usize) -> &[f64] {
        let nc = self.grid.n_cells();
        &self.data[(n - 1) * nc..n * nc]
    }

    pub fn species_mut(&mut self, n: usize) -> &mut [f64] {
        let nc = self.grid.n_cells();
        &mut self.data[(n - 1) * nc..n * nc]
    }

    #[inline]
    pub fn get(&self, n: usize, cell: usize) -> f64 {
        self.data[(n - 1) * self.grid.n_cells() + cell]
    }

    #[inline]
    pub fn set(&mut self, n: usize, cell: usize, value: f64) {
        let nc = self.grid.n_cells();
        self.data[(n - 1) * nc + cell] = value;
    }

    /// The vector `(f_1(x), ..., f_nmax(x))` at one cell.
    pub fn cell_vector(&self, cell: usize) -> Vec<f64> {
        let nc = self.grid.n_cells();
        (0..self.n_max).map(|i| self.data[i * nc + cell]).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }

    /// `∫ f_n dx` for every species.
    pub fn species_integrals(&self) -> Vec<f64> {
        let dv = self.grid.cell_volume();
        (1..=self.n_max)
            .map(|n| self.species(n).iter().sum::<f64>() * dv)
            .collect()
    }

    /// Total particle number `Σ_n ∫ f_n dx`.
    pub fn number(&self) -> f64 {
        self.species_integrals().iter().sum()
    }
}

/// Exponent and weighting for a single-index moment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentSpec {
    pub a: f64,
    /// Multiply each term by `d(n)^(dim/2)`.
    pub hat: bool,
}

impl MomentSpec {
    pub fn plain(a: f64) -> Self {
        MomentSpec { a, hat: false }
    }

    pub fn hat(a: f64) -> Self {
        MomentSpec { a, hat: true }
    }
}

/// Per-mass weights `n^a [d(n)^(dim/2)]`.
fn moment_weights(n_max: usize, dim: usize, spec: MomentSpec, dp: &DiffusionProfile) -> Vec<f64> {
    (1..=n_max)
        .map(|n| {
            let w = (n as f64).powf(spec.a);
            if spec.hat {
                w * dp.value(n).powf(dim as f64 / 2.0)
            } else {
                w
            }
        })
        .collect()
}

/// Per-cell `Σ_n n^a [d(n)^(dim/2)] f_n(x)`.
pub fn moment(f: &MassField, spec: MomentSpec, dp: &DiffusionProfile) -> Result<Vec<f64>> {
    if !(spec.a >= 0.0) {
        return Err(Error::InvalidParameter(format!("moment exponent {} must be >= 0", spec.a)));
    }
    if spec.hat && dp.n_max() < f.n_max() {
        return Err(Error::IndexOutOfRange {
            index: f.n_max(),
            n_max: dp.n_max(),
        });
    }
    let w = moment_weights(f.n_max(), f.grid().dim(), spec, dp);
    let nc = f.grid().n_cells();
    let out: Vec<f64> = (0..nc)
        .into_par_iter()
        .map(|cell| {
            (0..f.n_max())
                .map(|i| w[i] * f.data[i * nc + cell])
                .sum::<f64>()
        })
        .collect();
    if let Some(cell) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "moment of order {} overflows at cell {cell}",
            spec.a
        )));
    }
    Ok(out)
}

/// Same as [`moment`] but for a plain moment, which needs no diffusion profile.
pub fn plain_moment(f: &MassField, a: f64) -> Vec<f64> {
    let nc = f.grid().n_cells();
    let w: Vec<f64> = (1..=f.n_max()).map(|n| (n as f64).powf(a)).collect();
    (0..nc)
        .into_par_iter()
        .map(|cell| {
            (0..f.n_max())
                .map(|i| w[i] * f.data[i * nc + cell])
                .sum::<f64>()
        })
        .collect()
}

/// Per-cell pair moment.
///
/// With `hat = false`: `Σ_{n,m} n m (n^a + m^a)(d(n) + d(m)) f_n f_m`.
/// With `hat = true`: `Σ_{n,m} (n^a m + m^a n) alpha(n,m) f_n f_m`.
pub fn pair_moment(
    f: &MassField,
    a: f64,
    dp: &DiffusionProfile,
    k: &Kernel,
    hat: bool,
) -> Result<Vec<f64>> {
    if !(a >= 0.0) {
        return Err(Error::InvalidParameter(format!("pair moment exponent {a} must be >= 0")));
    }
    let n_max = f.n_max();
    if k.n_max() < n_max || (!hat && dp.n_max() < n_max) {
        return Err(Error::IndexOutOfRange {
            index: n_max,
            n_max: k.n_max().min(dp.n_max()),
        });
    }
    let pw: Vec<f64> = (1..=n_max).map(|n| (n as f64).powf(a)).collect();
    let nc = f.grid().n_cells();
    Ok((0..nc)
        .into_par_iter()
        .map(|cell| {
            let c: Vec<f64> = (0..n_max).map(|i| f.data[i * nc + cell]).collect();
            let mut acc = 0.0;
            for n in 1..=n_max {
                let fn_ = c[n - 1];
                if fn_ == 0.0 {
                    continue;
                }
                let nf = n as f64;
                let mut row = 0.0;
                for m in 1..=n_max {
                    let fm = c[m - 1];
                    if fm == 0.0 {
                        continue;
                    }
                    let mf = m as f64;
                    let w = if hat {
                        (pw[n - 1] * mf + pw[m - 1] * nf) * k.get(n, m)
                    } else {
                        nf * mf * (pw[n - 1] + pw[m - 1]) * (dp.value(n) + dp.value(m))
                    };
                    row += w * fm;
                }
                acc += row * fn_;
            }
            acc
        })
        .collect())
}

/// Mass on the tracked range and including the gel reservoir.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MassTotals {
    pub tracked: f64,
    pub with_gel: f64,
}

/// `I = Σ_n n ∫ f_n dx`, with and without the gel reservoir.
pub fn total_mass(f: &MassField) -> MassTotals {
    let tracked: f64 = f
        .species_integrals()
        .iter()
        .enumerate()
        .map(|(i, v)| (i + 1) as f64 * v)
        .sum();
    MassTotals {
        tracked,
        with_gel: tracked + f.gel(),
    }
}

/// The potential-like weight used by the initial-data admissibility
/// functionals, evaluated at distance `r = |x|`.
///
/// `dim >= 2` is singular at the origin and returns `+inf` there.
pub fn phi0(r: f64, dim: usize) -> Result<f64> {
    let r = r.abs();
    match dim {
        1 => Ok(if 2.0 * r <= 1.0 { 0.5 * (1.0 - r) } else { 0.0 }),
        2 => Ok(if r == 0.0 {
            f64::INFINITY
        } else if r <= 1.0 {
            -r.ln() / (2.0 * std::f64::consts::PI)
        } else {
            0.0
        }),
        3 => Ok(if r == 0.0 { f64::INFINITY } else { 1.0 / r }),
        d => Err(Error::UnsupportedDimension(d)),
    }
}

/// Initial-data functionals `(A1, A2, A3)` for exponent `a`.
///
/// `A1 = ∬ X_a(x) X_1(y) phi0(x - y)`, `A2 = max_x ∫ X_a(y) phi0(x - y) dy`,
/// `A3 = ∫ X_a`. Displacements use the periodic minimal image; in `dim >= 2`
/// the singular zero-displacement pair is skipped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitialFunctionals {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    /// The self-cell term was excluded.
    pub self_pair_skipped: bool,
}

pub fn initial_data_functionals(f: &MassField, a: f64) -> Result<InitialFunctionals> {
    let grid = *f.grid();
    let dim = grid.dim();
    let xa = plain_moment(f, a);
    let x1 = plain_moment(f, 1.0);
    let dv = grid.cell_volume();
    let nc = grid.n_cells();
    let skip_self = dim >= 2;
    // potential of X_a felt at each cell
    let potential: Vec<f64> = (0..nc)
        .into_par_iter()
        .map(|x| {
            let mut acc = 0.0;
            for y in 0..nc {
                if skip_self && x == y {
                    continue;
                }
                let w = phi0(grid.min_image_distance(x, y), dim).expect("dim validated by grid");
                acc += xa[y] * w;
            }
            acc * dv
        })
        .collect();
    let a1 = potential.iter().zip(&x1).map(|(p, v)| p * v).sum::<f64>() * dv;
    let a2 = potential.iter().copied().fold(0.0, f64::max);
    let a3 = xa.iter().sum::<f64>() * dv;
    Ok(InitialFunctionals {
        a1,
        a2,
        a3,
        self_pair_skipped: skip_self,
    })
}

/// Fraction of the domain side covered by the support of a field along any
/// axis, used to warn when initial data is wide enough to feel the periodic wrap.
pub fn support_extent(f: &MassField) -> f64 {
    let grid = f.grid();
    let nc = grid.n_cells();
    let occupied: Vec<bool> = (0..nc)
        .map(|cell| (1..=f.n_max()).any(|n| f.get(n, cell) > 0.0))
        .collect();
    let m = grid.cells_per_side();
    let mut widest = 0usize;
    for axis in 0..grid.dim() {
        let mut present = vec![false; m];
        for (cell, &o) in occupied.iter().enumerate() {
            if o {
                present[grid.coords(cell)[axis]] = true;
            }
        }
        if present.iter().all(|p| *p) {
            return 1.0;
        }
        // longest empty circular run gives the tightest covering arc
        let mut longest_gap = 0;
        let mut run = 0;
        for i in 0..2 * m {
            if present[i % m] {
                run = 0;
            } else {
                run += 1;
                longest_gap = longest_gap.max(run.min(m));
            }
        }
        widest = widest.max(m - longest_gap);
    }
    widest as f64 / m as f64
}
