//! Heat semigroup `S_t^D` on the periodic grid.
//!
//! The default propagator is spectral: every Fourier mode `k` is damped by
//! `exp(-D |k|^2 t)`, which is exact in time. A Crank–Nicolson finite
//! difference propagator is provided for cross-validation.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::field::{Grid, MassField};
use crate::kernels::DiffusionProfile;

/// Per-coordinate variance of a Brownian increment over time `t` is
/// `BROWNIAN_VARIANCE_FACTOR * D * t` for the generator `D Δ` used here.
pub const BROWNIAN_VARIANCE_FACTOR: f64 = 2.0;

/// Cached FFT plans and squared wavenumbers for one grid.
#[derive(Clone)]
pub struct HeatPropagator {
    grid: Grid,
    wave_sq: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for HeatPropagator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HeatPropagator").field("grid", &self.grid).finish()
    }
}

/// Result of a propagation: negative undershoot removed by clipping.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClipReport {
    /// Sum of the clipped negative values times cell volume.
    pub clipped_mass: f64,
}

impl HeatPropagator {
    pub fn new(grid: Grid) -> Self {
        let m = grid.cells_per_side();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(m);
        let inverse = planner.plan_fft_inverse(m);
        let k0 = 2.0 * std::f64::consts::PI / grid.side();
        let wave_sq = (0..grid.n_cells())
            .map(|cell| {
                let c = grid.coords(cell);
                (0..grid.dim())
                    .map(|axis| {
                        let j = c[axis] as f64;
                        let j = if c[axis] > m / 2 { j - m as f64 } else { j };
                        (k0 * j).powi(2)
                    })
                    .sum()
            })
            .collect();
        HeatPropagator {
            grid,
            wave_sq,
            forward,
            inverse,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Mode multipliers `exp(-D |k|^2 t)`, in cell-index order of the spectrum.
    pub fn multipliers(&self, diffusivity: f64, t: f64) -> Vec<f64> {
        self.wave_sq
            .iter()
            .map(|k2| (-diffusivity * k2 * t).exp())
            .collect()
    }

    fn transform(&self, buf: &mut [Complex<f64>], plan: &Arc<dyn Fft<f64>>) {
        let m = self.grid.cells_per_side();
        let dim = self.grid.dim();
        let mut line = vec![Complex::new(0.0, 0.0); m];
        let mut scratch = vec![Complex::new(0.0, 0.0); plan.get_inplace_scratch_len()];
        for axis in 0..dim {
            let stride = m.pow((dim - 1 - axis) as u32);
            let block = stride * m;
            for base in (0..buf.len()).step_by(block) {
                for offset in 0..stride {
                    let start = base + offset;
                    for (i, v) in line.iter_mut().enumerate() {
                        *v = buf[start + i * stride];
                    }
                    plan.process_with_scratch(&mut line, &mut scratch);
                    for (i, v) in line.iter().enumerate() {
                        buf[start + i * stride] = *v;
                    }
                }
            }
        }
    }

    /// Exact spectral propagation without clipping.
    pub fn propagate_raw(&self, g: &mut [f64], diffusivity: f64, t: f64) {
        assert_eq!(g.len(), self.grid.n_cells());
        if t == 0.0 || diffusivity == 0.0 {
            return;
        }
        let mut buf: Vec<Complex<f64>> = g.iter().map(|v| Complex::new(*v, 0.0)).collect();
        self.transform(&mut buf, &self.forward);
        // the zero mode is left untouched so the mean is preserved exactly
        for (v, k2) in buf.iter_mut().zip(&self.wave_sq).skip(1) {
            *v *= (-diffusivity * k2 * t).exp();
        }
        self.transform(&mut buf, &self.inverse);
        let scale = 1.0 / g.len() as f64;
        for (out, v) in g.iter_mut().zip(&buf) {
            *out = v.re * scale;
        }
    }

    /// Propagates in place, then clips negative ringing to zero and rescales
    /// the positive part so the total is unchanged.
    pub fn propagate(&self, g: &mut [f64], diffusivity: f64, t: f64) -> ClipReport {
        let before: f64 = g.iter().sum();
        self.propagate_raw(g, diffusivity, t);
        clip_preserving_sum(g, before, self.grid.cell_volume())
    }

    pub fn heat_step(&self, g: &[f64], diffusivity: f64, t: f64) -> Result<Vec<f64>> {
        if !(diffusivity >= 0.0) || !(t >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "heat step needs D >= 0 and t >= 0, got D = {diffusivity}, t = {t}"
            )));
        }
        if g.len() != self.grid.n_cells() {
            return Err(Error::InvalidParameter(format!(
                "field has {} cells, grid has {}",
                g.len(),
                self.grid.n_cells()
            )));
        }
        let mut out = g.to_vec();
        self.propagate(&mut out, diffusivity, t);
        Ok(out)
    }
}

fn clip_preserving_sum(g: &mut [f64], target: f64, cell_volume: f64) -> ClipReport {
    let negative: f64 = g.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
    if negative == 0.0 {
        return ClipReport::default();
    }
    let positive: f64 = g.iter().filter(|v| **v > 0.0).sum();
    let scale = if positive > 0.0 { target.max(0.0) / positive } else { 0.0 };
    for v in g.iter_mut() {
        *v = if *v > 0.0 { *v * scale } else { 0.0 };
    }
    ClipReport {
        clipped_mass: negative * cell_volume,
    }
}

/// `S_t^D g` on the periodic grid of `grid`.
pub fn heat_step(grid: &Grid, g: &[f64], diffusivity: f64, t: f64) -> Result<Vec<f64>> {
    HeatPropagator::new(*grid).heat_step(g, diffusivity, t)
}

/// Solution at time `t` of `u_t = d(1) Δu` started from the initial mass
/// density `Σ_n n f_n(x, 0)`. This dominates the diffusivity-weighted first
/// moment whenever `d` is non-increasing.
pub fn heat_majorant(f0: &MassField, dp: &DiffusionProfile, t: f64) -> Result<Vec<f64>> {
    if let Some(n) = dp.monotonicity_witness() {
        return Err(Error::NotNonIncreasing { n });
    }
    let x1 = crate::field::plain_moment(f0, 1.0);
    heat_step(f0.grid(), &x1, dp.value(1), t)
}

/// Largest pointwise amount by which `D2^(dim/2) S^{D2} g` exceeds
/// `D1^(dim/2) S^{D1} g`, for `D1 >= D2 > 0` and `g >= 0`. Zero in the continuum.
pub fn comparison_violation(grid: &Grid, d1: f64, d2: f64, g: &[f64], t: f64) -> Result<f64> {
    if !(d1 >= d2 && d2 > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "comparison needs D1 >= D2 > 0, got D1 = {d1}, D2 = {d2}"
        )));
    }
    if g.iter().any(|v| *v < 0.0) {
        return Err(Error::InvalidParameter("comparison needs g >= 0".into()));
    }
    let prop = HeatPropagator::new(*grid);
    let half = grid.dim() as f64 / 2.0;
    let mut a = g.to_vec();
    let mut b = g.to_vec();
    prop.propagate_raw(&mut a, d1, t);
    prop.propagate_raw(&mut b, d2, t);
    let (wa, wb) = (d1.powf(half), d2.powf(half));
    Ok(a
        .iter()
        .zip(&b)
        .map(|(x, y)| (wb * y - wa * x).max(0.0))
        .fold(0.0, f64::max))
}

/// Second-order finite-difference Laplacian on the periodic grid.
fn laplacian(grid: &Grid, u: &[f64], out: &mut [f64]) {
    let m = grid.cells_per_side();
    let h2 = grid.spacing().powi(2);
    for (cell, o) in out.iter_mut().enumerate() {
        let c = grid.coords(cell);
        let mut acc = -2.0 * grid.dim() as f64 * u[cell];
        for axis in 0..grid.dim() {
            let mut up = c;
            let mut down = c;
            up[axis] = (c[axis] + 1) % m;
            down[axis] = (c[axis] + m - 1) % m;
            acc += u[grid.index(&up)] + u[grid.index(&down)];
        }
        *o = acc / h2;
    }
}

/// Crank–Nicolson propagation over `t` in `steps` equal steps; each implicit
/// solve uses conjugate gradients on the symmetric positive definite system.
pub fn crank_nicolson(grid: &Grid, g: &[f64], diffusivity: f64, t: f64, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::InvalidParameter("Crank-Nicolson needs at least one step".into()));
    }
    let n = grid.n_cells();
    let tau = 0.5 * diffusivity * t / steps as f64;
    let mut u = g.to_vec();
    let mut lap = vec![0.0; n];
    let apply = |x: &[f64], lap: &mut Vec<f64>, out: &mut Vec<f64>| {
        laplacian(grid, x, lap);
        for i in 0..n {
            out[i] = x[i] - tau * lap[i];
        }
    };
    let mut rhs = vec![0.0; n];
    let mut r = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut ap = vec![0.0; n];
    for _ in 0..steps {
        laplacian(grid, &u, &mut lap);
        for i in 0..n {
            rhs[i] = u[i] + tau * lap[i];
        }
        // conjugate gradients, warm-started from the previous solution
        apply(&u, &mut lap, &mut ap);
        for i in 0..n {
            r[i] = rhs[i] - ap[i];
            p[i] = r[i];
        }
        let norm_rhs: f64 = rhs.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let mut rr: f64 = r.iter().map(|v| v * v).sum();
        for _ in 0..10 * n {
            if rr.sqrt() <= 1e-14 * norm_rhs {
                break;
            }
            apply(&p, &mut lap, &mut ap);
            let alpha = rr / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
            for i in 0..n {
                u[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rr_new: f64 = r.iter().map(|v| v * v).sum();
            let beta = rr_new / rr;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
            rr = rr_new;
        }
    }
    Ok(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid(dim: usize, m: usize) -> Grid {
        Grid::new(dim, 1.0, m).unwrap()
    }

    #[test]
    fn multipliers_are_in_unit_interval_with_unit_zero_mode() {
        let p = HeatPropagator::new(grid(2, 16));
        let mult = p.multipliers(0.3, 0.7);
        assert_eq!(mult[0], 1.0);
        assert!(mult.iter().all(|m| *m >= 0.0 && *m <= 1.0));
        assert!(mult[1] > 0.0 && mult[1] < 1.0);
    }

    #[test]
    fn constants_are_fixed() {
        let g = grid(2, 8);
        let out = heat_step(&g, &vec![2.5; 64], 1.3, 0.4).unwrap();
        for v in out {
            assert!((v - 2.5).abs() < 1e-14);
        }
    }

    #[test]
    fn single_mode_decays_at_its_eigenvalue() {
        for dim in 1..=3 {
            let g = grid(dim, 16);
            let init: Vec<f64> = (0..g.n_cells())
                .map(|c| (2.0 * PI * g.center(c)[0]).cos())
                .collect();
            let (d, t) = (0.05, 0.8);
            let mut out = init.clone();
            HeatPropagator::new(g).propagate_raw(&mut out, d, t);
            let decay = (-d * (2.0 * PI).powi(2) * t).exp();
            for (o, i) in out.iter().zip(&init) {
                assert!((o - decay * i).abs() < 1e-13, "dim {dim}");
            }
        }
    }

    #[test]
    fn zero_time_is_identity() {
        let g = grid(1, 32);
        let init: Vec<f64> = (0..32).map(|i| (i * i % 7) as f64).collect();
        assert_eq!(heat_step(&g, &init, 1.0, 0.0).unwrap(), init);
    }

    #[test]
    fn rejects_negative_arguments() {
        let g = grid(1, 8);
        assert!(heat_step(&g, &[0.0; 8], -1.0, 1.0).is_err());
        assert!(heat_step(&g, &[0.0; 8], 1.0, -1.0).is_err());
    }

    #[test]
    fn clipping_keeps_the_total() {
        let g = grid(1, 64);
        let mut spike = vec![0.0; 64];
        spike[10] = 1.0;
        let p = HeatPropagator::new(g);
        let mut raw = spike.clone();
        p.propagate_raw(&mut raw, 1e-5, 0.1);
        assert!(raw.iter().any(|v| *v < 0.0), "expected ringing");
        let mut out = spike.clone();
        let report = p.propagate(&mut out, 1e-5, 0.1);
        assert!(report.clipped_mass > 0.0);
        assert!(out.iter().all(|v| *v >= 0.0));
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn majorant_requires_monotone_profile() {
        let g = grid(1, 8);
        let f = MassField::monodisperse(g, 3, |_| 1.0).unwrap();
        let rising = DiffusionProfile::custom(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(heat_majorant(&f, &rising, 0.1), Err(Error::NotNonIncreasing { n: 1 })));
        let dp = DiffusionProfile::power_law(1.0, 0.5, 3).unwrap();
        let u = heat_majorant(&f, &dp, 0.3).unwrap();
        for v in u {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn comparison_identical_diffusivities() {
        let g = grid(1, 32);
        let init: Vec<f64> = (0..32).map(|i| if i < 4 { 1.0 } else { 0.0 }).collect();
        assert_eq!(comparison_violation(&g, 0.5, 0.5, &init, 0.2).unwrap(), 0.0);
        assert_eq!(comparison_violation(&g, 2.0, 1.0, &[3.0; 32], 0.2).unwrap(), 0.0);
    }

    #[test]
    fn comparison_for_a_hot_cell() {
        let g = grid(1, 128);
        let mut hot = vec![0.0; 128];
        hot[64] = 1.0;
        let v = comparison_violation(&g, 2.0, 1.0, &hot, 0.1).unwrap();
        assert!(v < 1e-8, "violation {v}");
    }

    #[test]
    fn crank_nicolson_agrees_with_spectral() {
        let g = grid(1, 256);
        let init: Vec<f64> = (0..256)
            .map(|c| {
                let x = g.center(c)[0] - 0.5;
                (-(x * x) / 0.005).exp()
            })
            .collect();
        let spectral = heat_step(&g, &init, 0.1, 0.05).unwrap();
        let cn = crank_nicolson(&g, &init, 0.1, 0.05, 200).unwrap();
        let err = spectral
            .iter()
            .zip(&cn)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "max error {err}");
    }
}
