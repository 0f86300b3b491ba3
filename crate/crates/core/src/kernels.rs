//! Coagulation kernels, diffusion profiles, interaction ranges and
//! finite-range certificates for the structural hypotheses the moment and
//! uniqueness bounds rely on.
//!
//! Every certificate in this module is a sweep over `1..=n_max`: it can
//! show a hypothesis holds on the swept range, or produce a concrete
//! witness that it fails, but it never proves an asymptotic statement.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Largest `n_max` for which kernels are tabulated densely.
pub const DENSE_TABLE_LIMIT: usize = 1024;

/// Closed-form families plus tabulated kernels.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelKind {
    /// `alpha = c`
    Constant { c: f64 },
    /// `alpha = c0 (n + m)`
    Sum { c0: f64 },
    /// `alpha = coeff (n + m)^exponent`
    SumPower { coeff: f64, exponent: f64 },
    /// `alpha = (n m)^a`
    Product { a: f64 },
    /// `alpha = n^a m^b + n^b m^a`
    TwoExponent { a: f64, b: f64 },
    /// `alpha = c (d(n) + d(m)) (r(n) + r(m))^(dim - 2)`
    RangeDerived {
        c: f64,
        dim: usize,
        diffusion: Vec<f64>,
        range: RangeProfile,
    },
    /// Explicit symmetric table, row-major over `1..=n_max`.
    Custom { table: Vec<f64> },
}

impl KernelKind {
    fn formula(&self, n: usize, m: usize) -> f64 {
        let (nf, mf) = (n as f64, m as f64);
        match self {
            KernelKind::Constant { c } => *c,
            KernelKind::Sum { c0 } => c0 * (nf + mf),
            KernelKind::SumPower { coeff, exponent } => coeff * (nf + mf).powf(*exponent),
            KernelKind::Product { a } => (nf * mf).powf(*a),
            KernelKind::TwoExponent { a, b } => nf.powf(*a) * mf.powf(*b) + nf.powf(*b) * mf.powf(*a),
            KernelKind::RangeDerived {
                c,
                dim,
                diffusion,
                range,
            } => {
                let d = diffusion[n - 1] + diffusion[m - 1];
                let r = range.value(n) + range.value(m);
                c * d * r.powi(*dim as i32 - 2)
            }
            KernelKind::Custom { table } => {
                let side = (table.len() as f64).sqrt() as usize;
                table[(n - 1) * side + (m - 1)]
            }
        }
    }

    fn label(&self) -> &'static str {
        match self {
            KernelKind::Constant { .. } => "constant",
            KernelKind::Sum { .. } => "sum",
            KernelKind::SumPower { .. } => "sum_power",
            KernelKind::Product { .. } => "product",
            KernelKind::TwoExponent { .. } => "two_exponent",
            KernelKind::RangeDerived { .. } => "range",
            KernelKind::Custom { .. } => "custom",
        }
    }
}

/// Symmetric, nonnegative coagulation rate `alpha(n, m)` on `1..=n_max`.
///
/// Tables are precomputed when `n_max <= DENSE_TABLE_LIMIT`; above that the
/// closed form is evaluated on every call.
#[derive(Clone, Debug)]
pub struct Kernel {
    kind: KernelKind,
    n_max: usize,
    table: Option<Vec<f64>>,
}

impl Kernel {
    pub fn new(kind: KernelKind, n_max: usize) -> Result<Self> {
        if n_max == 0 {
            return Err(Error::InvalidParameter("kernel n_max must be at least 1".into()));
        }
        validate_kind(&kind, n_max)?;
        let table = if n_max <= DENSE_TABLE_LIMIT {
            let mut t = vec![0.0; n_max * n_max];
            for n in 1..=n_max {
                for m in 1..=n_max {
                    t[(n - 1) * n_max + (m - 1)] = kind.formula(n, m);
                }
            }
            Some(t)
        } else {
            None
        };
        let k = Kernel { kind, n_max, table };
        k.check_values()?;
        Ok(k)
    }

    pub fn constant(c: f64, n_max: usize) -> Result<Self> {
        Self::new(KernelKind::Constant { c }, n_max)
    }

    pub fn sum(c0: f64, n_max: usize) -> Result<Self> {
        Self::new(KernelKind::Sum { c0 }, n_max)
    }

    pub fn sum_power(coeff: f64, exponent: f64, n_max: usize) -> Result<Self> {
        Self::new(KernelKind::SumPower { coeff, exponent }, n_max)
    }

    pub fn product(a: f64, n_max: usize) -> Result<Self> {
        Self::new(KernelKind::Product { a }, n_max)
    }

    pub fn two_exponent(a: f64, b: f64, n_max: usize) -> Result<Self> {
        Self::new(KernelKind::TwoExponent { a, b }, n_max)
    }

    /// Builds a kernel from a full row-major table; asymmetric input is rejected.
    pub fn from_table(table: Vec<f64>, n_max: usize) -> Result<Self> {
        if table.len() != n_max * n_max {
            return Err(Error::InvalidParameter(format!(
                "kernel table has {} entries, expected {}",
                table.len(),
                n_max * n_max
            )));
        }
        Self::new(KernelKind::Custom { table }, n_max)
    }

    /// Reads a `n,m,alpha` CSV. Listing only one triangle is enough; if both
    /// orientations are present they must agree exactly.
    pub fn from_csv(path: &Path, n_max: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_csv_str(&text, n_max, path)
    }

    pub fn from_csv_str(text: &str, n_max: usize, path: &Path) -> Result<Self> {
        let csv_err = |line: usize, msg: String| Error::Csv {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut table: Vec<Option<f64>> = vec![None; n_max * n_max];
        let mut saw_header = false;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !saw_header {
                let cols: Vec<&str> = line.split(',').map(str::trim).collect();
                if cols != ["n", "m", "alpha"] {
                    return Err(csv_err(line_no, format!("expected header `n,m,alpha`, got `{line}`")));
                }
                saw_header = true;
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 3 {
                return Err(csv_err(line_no, format!("expected 3 columns, got {}", cols.len())));
            }
            let n: usize = cols[0]
                .parse()
                .map_err(|_| csv_err(line_no, format!("bad mass index `{}`", cols[0])))?;
            let m: usize = cols[1]
                .parse()
                .map_err(|_| csv_err(line_no, format!("bad mass index `{}`", cols[1])))?;
            let a: f64 = cols[2]
                .parse()
                .map_err(|_| csv_err(line_no, format!("bad rate `{}`", cols[2])))?;
            for idx in [n, m] {
                if idx == 0 || idx > n_max {
                    return Err(csv_err(line_no, format!("mass index {idx} outside 1..={n_max}")));
                }
            }
            let slot = &mut table[(n - 1) * n_max + (m - 1)];
            if slot.is_some() {
                return Err(csv_err(line_no, format!("duplicate entry ({n},{m})")));
            }
            *slot = Some(a);
        }
        if !saw_header {
            return Err(csv_err(1, "missing header `n,m,alpha`".into()));
        }
        let mut full = vec![0.0; n_max * n_max];
        for n in 1..=n_max {
            for m in 1..=n {
                let lo = table[(n - 1) * n_max + (m - 1)];
                let hi = table[(m - 1) * n_max + (n - 1)];
                let v = match (lo, hi) {
                    (Some(a), Some(b)) if a != b => {
                        return Err(Error::AsymmetricKernel {
                            n,
                            m,
                            forward: a,
                            backward: b,
                        })
                    }
                    (Some(a), _) | (None, Some(a)) => a,
                    (None, None) => {
                        return Err(csv_err(0, format!("missing entry for pair ({n},{m})")));
                    }
                };
                full[(n - 1) * n_max + (m - 1)] = v;
                full[(m - 1) * n_max + (n - 1)] = v;
            }
        }
        Self::from_table(full, n_max)
    }

    pub fn kind(&self) -> &KernelKind {
        &self.kind
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    /// Checked evaluation.
    pub fn eval(&self, n: usize, m: usize) -> Result<f64> {
        for idx in [n, m] {
            if idx == 0 || idx > self.n_max {
                return Err(Error::IndexOutOfRange {
                    index: idx,
                    n_max: self.n_max,
                });
            }
        }
        Ok(self.get(n, m))
    }

    /// Unchecked evaluation for hot loops; `n, m` must lie in `1..=n_max`.
    #[inline]
    pub fn get(&self, n: usize, m: usize) -> f64 {
        debug_assert!(n >= 1 && m >= 1 && n <= self.n_max && m <= self.n_max);
        match &self.table {
            Some(t) => t[(n - 1) * self.n_max + (m - 1)],
            None => self.kind.formula(n, m),
        }
    }

    /// Row `alpha(n, 1..=n_max)` when tabulated.
    #[inline]
    pub fn row(&self, n: usize) -> Option<&[f64]> {
        self.table
            .as_ref()
            .map(|t| &t[(n - 1) * self.n_max..n * self.n_max])
    }

    /// Same kernel family re-evaluated on a different mass range.
    pub fn resized(&self, n_max: usize) -> Result<Self> {
        let kind = match &self.kind {
            KernelKind::Custom { .. } => {
                return Err(Error::InvalidParameter(
                    "a custom kernel table cannot be resized".into(),
                ))
            }
            KernelKind::RangeDerived { .. } => {
                return Err(Error::InvalidParameter(
                    "rebuild range-derived kernels from a resized diffusion profile".into(),
                ))
            }
            other => other.clone(),
        };
        Kernel::new(kind, n_max)
    }

    fn check_values(&self) -> Result<()> {
        for n in 1..=self.n_max.min(DENSE_TABLE_LIMIT) {
            for m in 1..=n {
                let a = self.get(n, m);
                let b = self.get(m, n);
                if !(a.is_finite() && a >= 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "kernel value alpha({n},{m}) = {a} is not a nonnegative finite number"
                    )));
                }
                if a != b {
                    return Err(Error::AsymmetricKernel {
                        n,
                        m,
                        forward: a,
                        backward: b,
                    });
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} kernel on 1..={}", self.kind.label(), self.n_max)
    }
}

fn validate_kind(kind: &KernelKind, n_max: usize) -> Result<()> {
    let nonneg = |name: &str, v: f64| {
        if v.is_finite() && v >= 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("kernel parameter {name} = {v} must be >= 0")))
        }
    };
    match kind {
        KernelKind::Constant { c } => nonneg("c", *c),
        KernelKind::Sum { c0 } => nonneg("c0", *c0),
        KernelKind::SumPower { coeff, exponent } => {
            nonneg("coeff", *coeff)?;
            if exponent.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter("sum-power exponent must be finite".into()))
            }
        }
        KernelKind::Product { a } => nonneg("a", *a),
        KernelKind::TwoExponent { a, b } => {
            nonneg("a", *a)?;
            nonneg("b", *b)
        }
        KernelKind::RangeDerived {
            c, dim, diffusion, ..
        } => {
            nonneg("c", *c)?;
            if *dim < 3 {
                return Err(Error::UnsupportedDimension(*dim));
            }
            if diffusion.len() < n_max {
                return Err(Error::InvalidParameter(format!(
                    "diffusion profile covers {} masses, kernel needs {n_max}",
                    diffusion.len()
                )));
            }
            Ok(())
        }
        KernelKind::Custom { table } => {
            if table.len() == n_max * n_max {
                Ok(())
            } else {
                Err(Error::InvalidParameter("custom table size mismatch".into()))
            }
        }
    }
}

/// How a [`DiffusionProfile`] was produced.
#[derive(Clone, Debug, PartialEq)]
pub enum DiffusionKind {
    Constant { value: f64 },
    /// `d(n) = r2 n^(-b2)`
    PowerLaw { r2: f64, b2: f64 },
    /// Geometric midpoint of the bracket `r1 n^(-b1) <= d(n) <= r2 n^(-b2)`.
    BracketedPower { r1: f64, b1: f64, r2: f64, b2: f64 },
    Custom,
}

/// Per-mass diffusivity `d(n)`, strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionProfile {
    kind: DiffusionKind,
    values: Vec<f64>,
}

impl DiffusionProfile {
    pub fn constant(value: f64, n_max: usize) -> Result<Self> {
        Self::build(DiffusionKind::Constant { value }, vec![value; n_max])
    }

    pub fn power_law(r2: f64, b2: f64, n_max: usize) -> Result<Self> {
        let values = (1..=n_max).map(|n| r2 * (n as f64).powf(-b2)).collect();
        Self::build(DiffusionKind::PowerLaw { r2, b2 }, values)
    }

    pub fn bracketed(r1: f64, b1: f64, r2: f64, b2: f64, n_max: usize) -> Result<Self> {
        if !(r1 > 0.0 && r2 > 0.0 && r1 <= r2) {
            return Err(Error::InvalidParameter(format!(
                "bracket needs 0 < r1 <= r2, got r1 = {r1}, r2 = {r2}"
            )));
        }
        if !(0.0 <= b2 && b2 <= b1) {
            return Err(Error::InvalidParameter(format!(
                "bracket needs 0 <= b2 <= b1, got b1 = {b1}, b2 = {b2}"
            )));
        }
        let scale = (r1 * r2).sqrt();
        let exponent = 0.5 * (b1 + b2);
        let values = (1..=n_max).map(|n| scale * (n as f64).powf(-exponent)).collect();
        Self::build(DiffusionKind::BracketedPower { r1, b1, r2, b2 }, values)
    }

    pub fn custom(values: Vec<f64>) -> Result<Self> {
        Self::build(DiffusionKind::Custom, values)
    }

    fn build(kind: DiffusionKind, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidParameter("diffusion profile is empty".into()));
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(Error::InvalidParameter(format!(
                "diffusivity d({}) = {v} must be positive and finite",
                i + 1
            )));
        }
        Ok(DiffusionProfile { kind, values })
    }

    pub fn kind(&self) -> &DiffusionKind {
        &self.kind
    }

    pub fn n_max(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn value(&self, n: usize) -> f64 {
        self.values[n - 1]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::MIN, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::MAX, f64::min)
    }

    /// First `n` with `d(n+1) > d(n)`, if any.
    pub fn monotonicity_witness(&self) -> Option<usize> {
        self.values
            .windows(2)
            .position(|w| w[1] > w[0])
            .map(|i| i + 1)
    }

    pub fn is_non_increasing(&self) -> bool {
        self.monotonicity_witness().is_none()
    }

    /// Same family on a different mass range. Custom tables can only shrink.
    pub fn resized(&self, n_max: usize) -> Result<Self> {
        match self.kind {
            DiffusionKind::Constant { value } => Self::constant(value, n_max),
            DiffusionKind::PowerLaw { r2, b2 } => Self::power_law(r2, b2, n_max),
            DiffusionKind::BracketedPower { r1, b1, r2, b2 } => {
                Self::bracketed(r1, b1, r2, b2, n_max)
            }
            DiffusionKind::Custom if n_max <= self.values.len() => {
                Self::custom(self.values[..n_max].to_vec())
            }
            DiffusionKind::Custom => Err(Error::InvalidParameter(
                "a custom diffusion table cannot be extended".into(),
            )),
        }
    }
}

/// Interaction range `r(n) = scale * n^chi`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RangeProfile {
    chi: f64,
    scale: f64,
}

impl RangeProfile {
    pub fn new(chi: f64, scale: f64) -> Result<Self> {
        if !(chi >= 0.0 && chi.is_finite()) {
            return Err(Error::InvalidParameter(format!("range exponent {chi} must be >= 0")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidParameter(format!("range scale {scale} must be > 0")));
        }
        Ok(RangeProfile { chi, scale })
    }

    pub fn chi(&self) -> f64 {
        self.chi
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    #[inline]
    pub fn value(&self, n: usize) -> f64 {
        self.scale * (n as f64).powf(self.chi)
    }
}

/// Collision propensity implied by diffusivity and interaction range in
/// `dim >= 3`: `alpha(n,m) = c (d(n)+d(m)) (r(n)+r(m))^(dim-2)`.
pub fn kinetic_kernel_from_range(
    dp: &DiffusionProfile,
    rp: &RangeProfile,
    dim: usize,
    c: f64,
) -> Result<Kernel> {
    if dim < 3 {
        return Err(Error::UnsupportedDimension(dim));
    }
    Kernel::new(
        KernelKind::RangeDerived {
            c,
            dim,
            diffusion: dp.values().to_vec(),
            range: *rp,
        },
        dp.n_max(),
    )
}

/// A concrete counterexample found by a certificate sweep.
#[derive(Clone, Debug, PartialEq)]
pub enum Witness {
    /// `alpha(n, m) = lhs` exceeds the allowed `rhs`.
    Pair { n: usize, m: usize, lhs: f64, rhs: f64 },
    /// `d(n + 1) > d(n)`.
    Monotonicity { n: usize },
    /// `d(n)` falls below `r1 n^(-b1)`.
    BelowBracket { n: usize, value: f64, bound: f64 },
    /// `d(n)` exceeds `r2 n^(-b2)`.
    AboveBracket { n: usize, value: f64, bound: f64 },
}

impl fmt::Display for Witness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Witness::Pair { n, m, lhs, rhs } => {
                write!(f, "alpha({n},{m}) = {lhs} exceeds bound {rhs}")
            }
            Witness::Monotonicity { n } => write!(f, "d({}) > d({n})", n + 1),
            Witness::BelowBracket { n, value, bound } => {
                write!(f, "d({n}) = {value} below lower bracket {bound}")
            }
            Witness::AboveBracket { n, value, bound } => {
                write!(f, "d({n}) = {value} above upper bracket {bound}")
            }
        }
    }
}

/// Successful finite-range certificate.
#[derive(Clone, Debug, PartialEq)]
pub struct Certificate {
    /// Threshold beyond which the ratio condition holds, when applicable.
    pub k0: Option<usize>,
    pub certified_up_to: usize,
    /// `d` is still decreasing at the top of the swept range, so its
    /// positive lower bound is only known on that range.
    pub positivity_range_limited: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Verdict {
    Pass(Certificate),
    Fail(Witness),
}

impl Verdict {
    pub fn passed(&self) -> bool {
        matches!(self, Verdict::Pass(_))
    }

    pub fn k0(&self) -> Option<usize> {
        match self {
            Verdict::Pass(c) => c.k0,
            Verdict::Fail(_) => None,
        }
    }

    pub fn witness(&self) -> Option<&Witness> {
        match self {
            Verdict::Pass(_) => None,
            Verdict::Fail(w) => Some(w),
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Pass(c) => {
                write!(f, "certified up to n_max = {}", c.certified_up_to)?;
                if let Some(k0) = c.k0 {
                    write!(f, " with k0 = {k0}")?;
                }
                if c.positivity_range_limited {
                    write!(f, " (positivity of d is range-limited)")?;
                }
                Ok(())
            }
            Verdict::Fail(w) => write!(f, "fails: {w}"),
        }
    }
}

fn check_ranges(k: &Kernel, dp: &DiffusionProfile, n_max: usize) -> Result<()> {
    for have in [k.n_max(), dp.n_max()] {
        if have < n_max {
            return Err(Error::IndexOutOfRange { index: n_max, n_max: have });
        }
    }
    Ok(())
}

/// Certifies that `alpha(n,m) / ((n+m)(d(n)+d(m)))` drops below `delta`
/// eventually, over pairs with `n + m <= n_max`.
///
/// `k0` is the largest violating `n + m` (at least 1). Because every
/// finite sweep admits some `k0`, the certificate additionally requires the
/// upper half of the range, `n_max/2 < n + m <= n_max`, to be violation-free;
/// otherwise the first violating pair in sweep order is the witness.
pub fn check_vanishing_ratio(
    k: &Kernel,
    dp: &DiffusionProfile,
    delta: f64,
    n_max: usize,
) -> Result<Verdict> {
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter(format!("delta = {delta} must be > 0")));
    }
    check_ranges(k, dp, n_max)?;
    let mut first: Option<Witness> = None;
    let mut largest_bad_sum = 0usize;
    for n in 1..n_max {
        for m in 1..=(n_max - n) {
            let lhs = k.get(n, m);
            let rhs = delta * (n + m) as f64 * (dp.value(n) + dp.value(m));
            if lhs > rhs {
                largest_bad_sum = largest_bad_sum.max(n + m);
                first.get_or_insert(Witness::Pair { n, m, lhs, rhs });
            }
        }
    }
    if 2 * largest_bad_sum > n_max {
        return Ok(Verdict::Fail(first.expect("a violation was recorded")));
    }
    Ok(Verdict::Pass(Certificate {
        k0: Some(largest_bad_sum.max(1)),
        certified_up_to: n_max,
        positivity_range_limited: false,
    }))
}

fn sum_bound_witness(k: &Kernel, c0: f64, n_max: usize) -> Option<Witness> {
    for n in 1..=n_max {
        for m in 1..=n_max {
            let lhs = k.get(n, m);
            let rhs = c0 * (n + m) as f64;
            if lhs > rhs {
                return Some(Witness::Pair { n, m, lhs, rhs });
            }
        }
    }
    None
}

fn prefix_monotonicity(dp: &DiffusionProfile, n_max: usize) -> Option<Witness> {
    dp.values()[..n_max]
        .windows(2)
        .position(|w| w[1] > w[0])
        .map(|i| Witness::Monotonicity { n: i + 1 })
}

/// Certifies: `d` non-increasing, `alpha(n,m) <= c0 (n+m)` and
/// `r1 n^(-b1) <= d(n) <= r2 n^(-b2)` for all `n, m <= n_max`.
#[allow(clippy::too_many_arguments)]
pub fn check_power_bracket(
    k: &Kernel,
    dp: &DiffusionProfile,
    c0: f64,
    r1: f64,
    b1: f64,
    r2: f64,
    b2: f64,
    n_max: usize,
) -> Result<Verdict> {
    if !(r1 > 0.0 && r2 > 0.0) || !(0.0 <= b2 && b2 <= b1) {
        return Err(Error::InvalidParameter(format!(
            "bracket parameters need r1, r2 > 0 and 0 <= b2 <= b1 (r1={r1}, b1={b1}, r2={r2}, b2={b2})"
        )));
    }
    check_ranges(k, dp, n_max)?;
    if let Some(w) = prefix_monotonicity(dp, n_max) {
        return Ok(Verdict::Fail(w));
    }
    for n in 1..=n_max {
        let value = dp.value(n);
        let nf = n as f64;
        let lower = r1 * nf.powf(-b1);
        let upper = r2 * nf.powf(-b2);
        // relative slack absorbs the last-ulp rounding of powf
        if value < lower * (1.0 - 1e-12) {
            return Ok(Verdict::Fail(Witness::BelowBracket { n, value, bound: lower }));
        }
        if value > upper * (1.0 + 1e-12) {
            return Ok(Verdict::Fail(Witness::AboveBracket { n, value, bound: upper }));
        }
    }
    if let Some(w) = sum_bound_witness(k, c0, n_max) {
        return Ok(Verdict::Fail(w));
    }
    Ok(Verdict::Pass(Certificate {
        k0: None,
        certified_up_to: n_max,
        positivity_range_limited: false,
    }))
}

/// Certifies: `min d > 0`, `d` non-increasing, `alpha(n,m) <= c0 (n+m)`.
///
/// Positivity is only observable on the swept range; the certificate flags
/// it as range-limited when `d` is still decreasing over the upper half.
pub fn check_bounded_below(
    k: &Kernel,
    dp: &DiffusionProfile,
    c0: f64,
    n_max: usize,
) -> Result<Verdict> {
    check_ranges(k, dp, n_max)?;
    if let Some(w) = prefix_monotonicity(dp, n_max) {
        return Ok(Verdict::Fail(w));
    }
    if let Some(w) = sum_bound_witness(k, c0, n_max) {
        return Ok(Verdict::Fail(w));
    }
    let half = (n_max / 2).max(1);
    let range_limited = dp.value(n_max) < dp.value(half);
    Ok(Verdict::Pass(Certificate {
        k0: None,
        certified_up_to: n_max,
        positivity_range_limited: range_limited,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(Kernel::sum(1.0, 8).unwrap().eval(2, 3).unwrap(), 5.0);
        assert_eq!(Kernel::constant(1.0, 16).unwrap().eval(7, 9).unwrap(), 1.0);
        let k = Kernel::two_exponent(0.75, 0.75, 8).unwrap();
        assert!((k.eval(4, 4).unwrap() - 16.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_is_an_error() {
        let k = Kernel::constant(1.0, 4).unwrap();
        assert!(matches!(k.eval(0, 1), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(k.eval(1, 5), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn large_kernels_use_the_closed_form() {
        let k = Kernel::product(1.0, 2000).unwrap();
        assert!(k.row(1).is_none());
        assert_eq!(k.get(2000, 3), 6000.0);
    }

    #[test]
    fn every_family_is_symmetric_and_nonnegative() {
        let n_max = 64;
        let dp = DiffusionProfile::power_law(1.0, 1.0, n_max).unwrap();
        let rp = RangeProfile::new(1.0 / 3.0, 1.0).unwrap();
        let kernels = vec![
            Kernel::constant(2.5, n_max).unwrap(),
            Kernel::sum(0.3, n_max).unwrap(),
            Kernel::sum_power(1.0, 0.5, n_max).unwrap(),
            Kernel::product(0.4, n_max).unwrap(),
            Kernel::two_exponent(0.2, 0.7, n_max).unwrap(),
            kinetic_kernel_from_range(&dp, &rp, 3, 1.0).unwrap(),
        ];
        for k in &kernels {
            for n in 1..=n_max {
                for m in 1..=n_max {
                    let a = k.get(n, m);
                    assert!(a >= 0.0, "{k}: alpha({n},{m}) < 0");
                    assert_eq!(a, k.get(m, n), "{k}: asymmetric at ({n},{m})");
                }
            }
        }
    }

    #[test]
    fn range_kernel_examples() {
        let d1 = DiffusionProfile::constant(1.0, 32).unwrap();
        let r1 = RangeProfile::new(1.0, 1.0).unwrap();
        let k = kinetic_kernel_from_range(&d1, &r1, 3, 1.0).unwrap();
        assert!((k.get(1, 1) - 4.0).abs() < 1e-12);

        let d = DiffusionProfile::power_law(1.0, 1.0, 32).unwrap();
        let r = RangeProfile::new(1.0 / 3.0, 1.0).unwrap();
        let k = kinetic_kernel_from_range(&d, &r, 3, 1.0).unwrap();
        assert!((k.get(1, 8) - 3.375).abs() < 1e-12);

        assert!(matches!(
            kinetic_kernel_from_range(&d, &r, 2, 1.0),
            Err(Error::UnsupportedDimension(2))
        ));
    }

    #[test]
    fn vanishing_ratio_threshold_matches_sweep() {
        let n_max = 256;
        let k = Kernel::sum_power(1.0, 0.5, n_max).unwrap();
        let dp = DiffusionProfile::constant(1.0, n_max).unwrap();
        // brute-force: largest s = n + m with sqrt(s) > 0.25 * s * 2
        let oracle = (2..=n_max)
            .filter(|&s| (s as f64).sqrt() > 0.5 * s as f64)
            .max()
            .unwrap();
        let v = check_vanishing_ratio(&k, &dp, 0.25, n_max).unwrap();
        assert_eq!(v.k0(), Some(oracle));
        assert_eq!(v.k0(), Some(3));
    }

    #[test]
    fn vanishing_ratio_fails_for_linear_kernel() {
        let k = Kernel::sum(1.0, 64).unwrap();
        let dp = DiffusionProfile::constant(1.0, 64).unwrap();
        let v = check_vanishing_ratio(&k, &dp, 0.25, 64).unwrap();
        match v.witness() {
            Some(Witness::Pair { n: 1, m: 1, lhs, rhs }) => {
                assert!((lhs / rhs - 2.0).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_kernel_passes_with_k0_one() {
        let k = Kernel::constant(0.0, 32).unwrap();
        let dp = DiffusionProfile::constant(1.0, 32).unwrap();
        assert_eq!(check_vanishing_ratio(&k, &dp, 0.1, 32).unwrap().k0(), Some(1));
    }

    #[test]
    fn range_kernel_has_vanishing_ratio() {
        let n_max = 512;
        let dp = DiffusionProfile::power_law(1.0, 1.0, n_max).unwrap();
        let rp = RangeProfile::new(1.0 / 3.0, 1.0).unwrap();
        let k = kinetic_kernel_from_range(&dp, &rp, 3, 1.0).unwrap();
        let v = check_vanishing_ratio(&k, &dp, 0.25, n_max).unwrap();
        assert!(v.passed(), "{v}");
    }

    #[test]
    fn power_bracket_examples() {
        let n = 64;
        let k = Kernel::sum(1.0, n).unwrap();
        let dp = DiffusionProfile::power_law(1.0, 0.5, n).unwrap();
        assert!(check_power_bracket(&k, &dp, 1.0, 1.0, 0.5, 1.0, 0.5, n).unwrap().passed());

        let prod = Kernel::product(1.0, n).unwrap();
        let v = check_power_bracket(&prod, &dp, 1.0, 1.0, 0.5, 1.0, 0.5, n).unwrap();
        assert_eq!(
            v.witness(),
            Some(&Witness::Pair { n: 2, m: 3, lhs: 6.0, rhs: 5.0 })
        );

        let rising = DiffusionProfile::custom((1..=n).map(|i| i as f64).collect()).unwrap();
        let v = check_power_bracket(&k, &rising, 1.0, 1.0, 0.0, 100.0, 0.0, n).unwrap();
        assert_eq!(v.witness(), Some(&Witness::Monotonicity { n: 1 }));
    }

    #[test]
    fn bracketed_profiles_certify_themselves() {
        for &(r1, b1, r2, b2) in &[(0.5, 1.0, 2.0, 0.25), (1.0, 0.5, 1.0, 0.5), (0.1, 2.0, 3.0, 0.0)] {
            let n = 128;
            let dp = DiffusionProfile::bracketed(r1, b1, r2, b2, n).unwrap();
            let k = Kernel::sum(0.7, n).unwrap();
            let v = check_power_bracket(&k, &dp, 0.7, r1, b1, r2, b2, n).unwrap();
            assert!(v.passed(), "({r1},{b1},{r2},{b2}): {v}");
        }
    }

    #[test]
    fn bounded_below_examples() {
        let n = 64;
        let k = Kernel::sum(1.0, n).unwrap();
        let flat = DiffusionProfile::constant(1.0, n).unwrap();
        match check_bounded_below(&k, &flat, 1.0, n).unwrap() {
            Verdict::Pass(c) => assert!(!c.positivity_range_limited),
            v => panic!("{v}"),
        }
        let inverse = DiffusionProfile::power_law(1.0, 1.0, n).unwrap();
        match check_bounded_below(&k, &inverse, 1.0, n).unwrap() {
            Verdict::Pass(c) => assert!(c.positivity_range_limited),
            v => panic!("{v}"),
        }
        // n^a m^b + n^b m^a with a = b = 0.75 gives alpha(4,4) = 16 > 8
        let k = Kernel::two_exponent(0.75, 0.75, n).unwrap();
        assert!((k.get(4, 4) - 16.0).abs() < 1e-12);
        let v = check_bounded_below(&k, &flat, 1.0, n).unwrap();
        let expected = (1..=n)
            .flat_map(|a| (1..=n).map(move |b| (a, b)))
            .find(|&(a, b)| k.get(a, b) > (a + b) as f64)
            .unwrap();
        match v.witness() {
            Some(Witness::Pair { n, m, .. }) => assert_eq!((*n, *m), expected),
            other => panic!("{other:?}"),
        }
        // the plain product (nm)^0.75 sits exactly on the bound at (4,4)
        let p = Kernel::product(0.75, n).unwrap();
        assert!((p.get(4, 4) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn csv_tables() {
        let p = Path::new("k.csv");
        let text = "n,m,alpha\n1,1,2\n2,1,3\n2,2,4\n";
        let k = Kernel::from_csv_str(text, 2, p).unwrap();
        assert_eq!(k.get(1, 2), 3.0);
        let bad = "n,m,alpha\n1,1,2\n2,1,3\n1,2,5\n2,2,4\n";
        assert!(matches!(
            Kernel::from_csv_str(bad, 2, p),
            Err(Error::AsymmetricKernel { .. })
        ));
        let missing = "n,m,alpha\n1,1,2\n";
        assert!(Kernel::from_csv_str(missing, 2, p).is_err());
    }
}
