//! Gain and loss terms of the coagulation operator on a truncated mass range.
//!
//! Sums run over ordered pairs throughout: the gain term for mass `n`
//! visits both `(m, n-m)` and `(n-m, m)`, and the loss term carries an
//! explicit factor 2. With these conventions `Σ_n n Q_n` telescopes to zero
//! on the untruncated system.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::MassField;
use crate::kernels::Kernel;

/// How pairs whose combined mass exceeds `n_max` are handled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TruncationPolicy {
    /// Such pairs never react; tracked mass is conserved exactly.
    Cutoff,
    /// Such pairs react and their product leaves the tracked range into a
    /// gel reservoir.
    GelReservoir,
}

impl TruncationPolicy {
    /// Largest partner mass a cluster of mass `n` may react with.
    #[inline]
    pub fn partner_limit(self, n: usize, n_max: usize) -> usize {
        match self {
            TruncationPolicy::Cutoff => n_max - n,
            TruncationPolicy::GelReservoir => n_max,
        }
    }
}

/// `Q_n` per cell plus the mass flux leaving into the gel reservoir.
#[derive(Clone, Debug, PartialEq)]
pub struct RateField {
    pub n_max: usize,
    pub n_cells: usize,
    /// Mass-major, same layout as [`MassField`].
    pub q: Vec<f64>,
    pub flux_to_gel: Vec<f64>,
}

impl RateField {
    pub fn species(&self, n: usize) -> &[f64] {
        &self.q[(n - 1) * self.n_cells..n * self.n_cells]
    }
}

#[inline]
fn alpha_row<'a>(k: &'a Kernel, n: usize, scratch: &'a mut Vec<f64>) -> &'a [f64] {
    if let Some(r) = k.row(n) {
        return r;
    }
    scratch.clear();
    scratch.extend((1..=k.n_max()).map(|m| k.get(n, m)));
    scratch
}

/// `Σ_{m ≤ limit} alpha(n, m) c_m` for each `n`, the per-particle loss rate
/// without the factor 2.
pub fn partner_sums(c: &[f64], k: &Kernel, policy: TruncationPolicy, out: &mut [f64]) {
    let n_max = c.len();
    let mut scratch = Vec::new();
    for n in 1..=n_max {
        let limit = policy.partner_limit(n, n_max);
        let row = alpha_row(k, n, &mut scratch);
        out[n - 1] = row[..limit]
            .iter()
            .zip(&c[..limit])
            .map(|(a, f)| a * f)
            .sum();
    }
}

/// Evaluates `Q_n` for one cell's concentrations `c` (index `n - 1`) into
/// `q` and returns the escaping mass flux. `partner` is scratch of length `n_max`.
pub fn cell_rates(
    c: &[f64],
    k: &Kernel,
    policy: TruncationPolicy,
    q: &mut [f64],
    partner: &mut [f64],
) -> f64 {
    let n_max = c.len();
    partner_sums(c, k, policy, partner);
    for n in 1..=n_max {
        let mut gain = 0.0;
        for m in 1..n {
            let (a, b) = (c[m - 1], c[n - m - 1]);
            if a != 0.0 && b != 0.0 {
                gain += k.get(m, n - m) * a * b;
            }
        }
        q[n - 1] = gain - 2.0 * c[n - 1] * partner[n - 1];
    }
    match policy {
        TruncationPolicy::Cutoff => 0.0,
        TruncationPolicy::GelReservoir => gel_flux(c, k),
    }
}

/// `Σ_{n,m ≤ n_max, n+m > n_max} (n+m) alpha(n,m) c_n c_m` over ordered pairs.
pub fn gel_flux(c: &[f64], k: &Kernel) -> f64 {
    let n_max = c.len();
    let mut flux = 0.0;
    for n in 1..=n_max {
        let fn_ = c[n - 1];
        if fn_ == 0.0 {
            continue;
        }
        let mut s = 0.0;
        for m in (n_max - n + 1)..=n_max {
            s += (n + m) as f64 * k.get(n, m) * c[m - 1];
        }
        flux += fn_ * s;
    }
    flux
}

fn check_kernel(f: &MassField, k: &Kernel) -> Result<()> {
    if k.n_max() < f.n_max() {
        return Err(Error::IndexOutOfRange {
            index: f.n_max(),
            n_max: k.n_max(),
        });
    }
    Ok(())
}

fn check_mass(f: &MassField, n: usize) -> Result<()> {
    if n == 0 || n > f.n_max() {
        return Err(Error::IndexOutOfRange {
            index: n,
            n_max: f.n_max(),
        });
    }
    Ok(())
}

/// Per-cell `Q_n^+ = Σ_{m=1}^{n-1} alpha(m, n-m) f_m f_{n-m}`.
pub fn gain(f: &MassField, k: &Kernel, n: usize) -> Result<Vec<f64>> {
    check_kernel(f, k)?;
    check_mass(f, n)?;
    let nc = f.grid().n_cells();
    let mut out = vec![0.0; nc];
    for m in 1..n {
        let a = k.get(m, n - m);
        let (fm, fr) = (f.species(m), f.species(n - m));
        for cell in 0..nc {
            out[cell] += a * fm[cell] * fr[cell];
        }
    }
    Ok(out)
}

/// Per-cell `Q_n^- = 2 f_n Σ_m alpha(n, m) f_m`, partner range set by the policy.
pub fn loss(f: &MassField, k: &Kernel, n: usize, policy: TruncationPolicy) -> Result<Vec<f64>> {
    check_kernel(f, k)?;
    check_mass(f, n)?;
    let nc = f.grid().n_cells();
    let limit = policy.partner_limit(n, f.n_max());
    let fn_ = f.species(n);
    let mut sum = vec![0.0; nc];
    for m in 1..=limit {
        let a = k.get(n, m);
        for (s, fm) in sum.iter_mut().zip(f.species(m)) {
            *s += a * fm;
        }
    }
    Ok(sum.iter().zip(fn_).map(|(s, v)| 2.0 * v * s).collect())
}

/// Assembles `Q_n = Q_n^+ - Q_n^-` for every mass and cell.
pub fn reaction_rates(f: &MassField, k: &Kernel, policy: TruncationPolicy) -> Result<RateField> {
    check_kernel(f, k)?;
    let n_max = f.n_max();
    let nc = f.grid().n_cells();
    let per_cell: Vec<(Vec<f64>, f64)> = (0..nc)
        .into_par_iter()
        .map(|cell| {
            let c = f.cell_vector(cell);
            let mut q = vec![0.0; n_max];
            let mut partner = vec![0.0; n_max];
            let flux = cell_rates(&c, k, policy, &mut q, &mut partner);
            (q, flux)
        })
        .collect();
    let mut q = vec![0.0; n_max * nc];
    let mut flux_to_gel = vec![0.0; nc];
    for (cell, (qc, flux)) in per_cell.into_iter().enumerate() {
        for (i, v) in qc.into_iter().enumerate() {
            q[i * nc + cell] = v;
        }
        flux_to_gel[cell] = flux;
    }
    Ok(RateField {
        n_max,
        n_cells: nc,
        q,
        flux_to_gel,
    })
}

/// Per-cell `Σ_{n,m} alpha(n,m) (phi(n+m) 1[n+m admissible] - phi(n) - phi(m)) f_n f_m`
/// over the pairs the policy lets react; equals `Σ_n phi(n) Q_n`.
pub fn weighted_sum(
    f: &MassField,
    k: &Kernel,
    phi: impl Fn(usize) -> f64,
    policy: TruncationPolicy,
) -> Result<Vec<f64>> {
    check_kernel(f, k)?;
    let n_max = f.n_max();
    let nc = f.grid().n_cells();
    let phis: Vec<f64> = (1..=2 * n_max).map(&phi).collect();
    Ok((0..nc)
        .map(|cell| {
            let c = f.cell_vector(cell);
            let mut acc = 0.0;
            for n in 1..=n_max {
                let limit = policy.partner_limit(n, n_max);
                for m in 1..=limit {
                    let merged = if n + m <= n_max { phis[n + m - 1] } else { 0.0 };
                    acc += k.get(n, m) * (merged - phis[n - 1] - phis[m - 1]) * c[n - 1] * c[m - 1];
                }
            }
            acc
        })
        .collect())
}
