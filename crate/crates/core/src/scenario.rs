//! Scenario files and the pipelines behind the `smolkit` binary.
//!
//! A scenario is a flat UTF-8 text file of `key = value` lines. Keys use
//! dotted section prefixes; `#` starts a comment line. Unknown or repeated
//! keys are errors. See the README for the full key list.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::analysis::{
    check_l1_stability, gelation_scan, observed_second_moment_sup, BoundReport, GelOutcome, HeatMajorantMonitor,
    MassDriftMonitor, Monitor, NumberMonitor, PositivityMonitor,
};
use crate::coagulation::TruncationPolicy;
use crate::error::{Error, Result};
use crate::field::{support_extent, Grid, MassField};
use crate::integrator::{homogeneous_run, run, HomogeneousState, RunConfig, RunRecord, Splitting};
use crate::kernels::{kinetic_kernel_from_range, DiffusionProfile, Kernel, KernelKind, RangeProfile};
use crate::tracer::{density_consistency, simulate, RateConvention, SliceRule, TracerConfig, TracerOptions};

/// Environment variable naming the default output directory.
pub const OUTPUT_ENV: &str = "SMOLKIT_OUT";

/// Output directory used when neither `--out`, `output.dir` nor the
/// environment variable is set.
pub const DEFAULT_OUTPUT_DIR: &str = "smolkit-out";

pub const SERIES_HEADER: &str = "# smolkit series v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Pde,
    Homogeneous,
    Tracer,
    Verify,
    Gelscan,
}

impl Mode {
    fn label(self) -> &'static str {
        match self {
            Mode::Pde => "pde",
            Mode::Homogeneous => "homogeneous",
            Mode::Tracer => "tracer",
            Mode::Verify => "verify",
            Mode::Gelscan => "gelscan",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum KernelSpec {
    Constant { c: f64 },
    Sum { c: f64 },
    SumPower { c: f64, exponent: f64 },
    Product { exponent: f64 },
    TwoExponent { a: f64, b: f64 },
    /// Derived from the diffusion profile and `r(n) = scale n^chi`; needs `grid.dim = 3`.
    Range { c: f64, chi: f64, scale: f64 },
    Csv { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub enum DiffusionSpec {
    Constant { value: f64 },
    Power { r2: f64, b2: f64 },
    Bracketed { r1: f64, b1: f64, r2: f64, b2: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitialSpec {
    /// `f_1 = amplitude`, all other species zero.
    Monodisperse { amplitude: f64 },
    /// `f_n(x) = (background + amplitude exp(-|x - center|^2 / (2 width^2))) n^-decay`
    /// for `n <= species`, with the center in the middle of the box.
    Blob {
        amplitude: f64,
        background: f64,
        width: f64,
        species: usize,
        decay: f64,
    },
    /// Rows `n,cell,value` or snapshot-style `n,i0,..,value`; unlisted entries are zero.
    Csv { path: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MonitorKind {
    Mass,
    Number,
    Positivity,
    HeatMajorant,
    L1Stability,
}

impl MonitorKind {
    fn label(self) -> &'static str {
        match self {
            MonitorKind::Mass => "mass",
            MonitorKind::Number => "number",
            MonitorKind::Positivity => "positivity",
            MonitorKind::HeatMajorant => "heat_majorant",
            MonitorKind::L1Stability => "l1_stability",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntegratorSpec {
    pub t_final: f64,
    pub dt: f64,
    pub splitting: Splitting,
    pub policy: TruncationPolicy,
    pub stride: f64,
    pub auto_halve: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilitySpec {
    /// Relative size of the perturbation applied to the second run.
    pub perturbation: f64,
    pub c0: f64,
    /// `None`: use the observed sup of `Σ n^2 f_n`.
    pub a_bound: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TracerSpec {
    pub count: usize,
    pub slices: usize,
    pub immortal: bool,
    pub convention: RateConvention,
    pub slice_rule: SliceRule,
    /// Slice boundaries at which histograms are written; empty means the last.
    pub record: Vec<usize>,
    pub tv_tolerance: f64,
    pub z_limit: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GelscanSpec {
    pub n_list: Vec<usize>,
    pub expect: Option<GelOutcome>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub mode: Mode,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub write_snapshots: bool,
    pub kernel: KernelSpec,
    pub diffusion: DiffusionSpec,
    pub dim: usize,
    pub side: f64,
    pub cells: usize,
    pub n_max: usize,
    pub initial: InitialSpec,
    pub integrator: IntegratorSpec,
    pub monitors: Vec<MonitorKind>,
    pub mass_tolerance: f64,
    pub heat_majorant_tolerance: f64,
    pub moment_exponents: Vec<f64>,
    pub pair_exponents: Vec<f64>,
    pub stability: StabilitySpec,
    pub tracer: TracerSpec,
    pub gelscan: GelscanSpec,
    /// Directory relative paths are resolved against; not serialized.
    pub base_dir: PathBuf,
}

struct RawConfig {
    path: PathBuf,
    entries: BTreeMap<String, (String, usize)>,
    used: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl RawConfig {
    fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| Error::Config {
                path: path.to_path_buf(),
                line,
                key: trimmed.to_string(),
                msg: "expected `key = value`".into(),
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config {
                    path: path.to_path_buf(),
                    line,
                    key,
                    msg: "empty key".into(),
                });
            }
            if let Some((_, first)) = entries.get(&key) {
                return Err(Error::Config {
                    path: path.to_path_buf(),
                    line,
                    key,
                    msg: format!("duplicate key, first set on line {first}"),
                });
            }
            entries.insert(key, (value.trim().to_string(), line));
        }
        Ok(RawConfig {
            path: path.to_path_buf(),
            entries,
            used: Default::default(),
        })
    }

    fn err(&self, key: &str, msg: impl Into<String>) -> Error {
        Error::Config {
            path: self.path.clone(),
            line: self.entries.get(key).map(|e| e.1).unwrap_or(0),
            key: key.to_string(),
            msg: msg.into(),
        }
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries.get(key).map(|e| e.0.as_str())
    }

    fn required(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| self.err(key, "missing required key"))
    }

    fn parse_value<T: std::str::FromStr>(&self, key: &str, v: &str, what: &str) -> Result<T> {
        v.parse::<T>()
            .map_err(|_| self.err(key, format!("expected {what}, got `{v}`")))
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => self.finite(key, v),
        }
    }

    fn finite(&self, key: &str, v: &str) -> Result<f64> {
        let x: f64 = self.parse_value(key, v, "a number")?;
        if !x.is_finite() {
            return Err(self.err(key, "must be finite"));
        }
        Ok(x)
    }

    fn f64_req(&self, key: &str) -> Result<f64> {
        let v = self.required(key)?;
        self.finite(key, v)
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => self.parse_value(key, v, "a nonnegative integer"),
        }
    }

    fn usize_req(&self, key: &str) -> Result<usize> {
        let v = self.required(key)?;
        self.parse_value(key, v, "a nonnegative integer")
    }

    fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(self.err(key, format!("expected true or false, got `{v}`"))),
        }
    }

    fn list<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<Vec<T>> {
        match self.get(key) {
            None => Ok(Vec::new()),
            Some(v) if v.trim().is_empty() => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|s| self.parse_value(key, s.trim(), what))
                .collect(),
        }
    }

    fn choice<'a>(&self, key: &str, default: Option<&'a str>, options: &[&'a str]) -> Result<&'a str> {
        let v = match (self.get(key), default) {
            (Some(v), _) => v,
            (None, Some(d)) => return Ok(d),
            (None, None) => return Err(self.err(key, "missing required key")),
        };
        options
            .iter()
            .find(|o| **o == v)
            .copied()
            .ok_or_else(|| self.err(key, format!("expected one of {}, got `{v}`", options.join(" | "))))
    }

    fn range(&self, key: &str, ok: bool, msg: &str) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(self.err(key, msg.to_string()))
        }
    }

    fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        if let Some((key, _)) = self.entries.iter().find(|(k, _)| !used.contains(*k)) {
            return Err(self.err(key, "unknown key"));
        }
        Ok(())
    }
}

fn existing_file(raw: &RawConfig, key: &str, base: &Path) -> Result<PathBuf> {
    let p = PathBuf::from(raw.required(key)?);
    let resolved = if p.is_absolute() { p.clone() } else { base.join(&p) };
    if !resolved.is_file() {
        return Err(raw.err(key, format!("file `{}` does not exist", resolved.display())));
    }
    Ok(p)
}

/// Reads and validates a scenario file.
pub fn parse_config(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path)?;
    parse_str(&text, path)
}

/// Parses scenario text; `path` is used for diagnostics and relative paths.
pub fn parse_str(text: &str, path: &Path) -> Result<Scenario> {
    let raw = RawConfig::parse(text, path)?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();

    let name = raw.required("name")?.to_string();
    raw.range("name", !name.is_empty() && !name.contains(['/', '\\']), "must be a nonempty name without path separators")?;
    let mode = match raw.choice("mode", None, &["pde", "homogeneous", "tracer", "verify", "gelscan"])? {
        "pde" => Mode::Pde,
        "homogeneous" => Mode::Homogeneous,
        "tracer" => Mode::Tracer,
        "verify" => Mode::Verify,
        _ => Mode::Gelscan,
    };
    let seed = match raw.get("seed") {
        None => 0,
        Some(v) => raw.parse_value("seed", v, "a 64-bit unsigned integer")?,
    };
    let output_dir = raw.get("output.dir").map(PathBuf::from);
    let write_snapshots = raw.bool_or("output.snapshots", true)?;

    let dim = raw.usize_or("grid.dim", 1)?;
    raw.range("grid.dim", (1..=3).contains(&dim), "must be 1, 2 or 3")?;
    let side = raw.f64_or("grid.side", 1.0)?;
    raw.range("grid.side", side > 0.0, "must be > 0")?;
    let cells = raw.usize_or("grid.cells", 32)?;
    raw.range("grid.cells", cells >= 2 && cells.is_power_of_two(), "must be a power of two >= 2")?;
    let n_max = raw.usize_req("mass.n_max")?;
    raw.range("mass.n_max", n_max >= 1, "must be >= 1")?;

    let kernel = match raw.choice(
        "kernel.type",
        None,
        &["constant", "sum", "sum_power", "product", "two_exponent", "range", "csv"],
    )? {
        "constant" => KernelSpec::Constant { c: raw.f64_or("kernel.c", 1.0)? },
        "sum" => KernelSpec::Sum { c: raw.f64_or("kernel.c", 1.0)? },
        "sum_power" => KernelSpec::SumPower {
            c: raw.f64_or("kernel.c", 1.0)?,
            exponent: raw.f64_req("kernel.exponent")?,
        },
        "product" => KernelSpec::Product {
            exponent: raw.f64_or("kernel.exponent", 1.0)?,
        },
        "two_exponent" => KernelSpec::TwoExponent {
            a: raw.f64_req("kernel.a")?,
            b: raw.f64_req("kernel.b")?,
        },
        "range" => {
            raw.range("kernel.type", dim == 3, "range-derived kernels need grid.dim = 3")?;
            KernelSpec::Range {
                c: raw.f64_or("kernel.c", 1.0)?,
                chi: raw.f64_req("kernel.chi")?,
                scale: raw.f64_or("kernel.scale", 1.0)?,
            }
        }
        _ => KernelSpec::Csv {
            path: existing_file(&raw, "kernel.path", &base_dir)?,
        },
    };
    if let Some(c) = match &kernel {
        KernelSpec::Constant { c } | KernelSpec::Sum { c } | KernelSpec::SumPower { c, .. } | KernelSpec::Range { c, .. } => Some(*c),
        _ => None,
    } {
        raw.range("kernel.c", c >= 0.0, "must be >= 0")?;
    }

    let diffusion = match raw.choice("diffusion.type", Some("constant"), &["constant", "power", "bracketed"])? {
        "constant" => DiffusionSpec::Constant {
            value: raw.f64_or("diffusion.value", 1.0)?,
        },
        "power" => DiffusionSpec::Power {
            r2: raw.f64_or("diffusion.r2", 1.0)?,
            b2: raw.f64_req("diffusion.b2")?,
        },
        _ => DiffusionSpec::Bracketed {
            r1: raw.f64_req("diffusion.r1")?,
            b1: raw.f64_req("diffusion.b1")?,
            r2: raw.f64_req("diffusion.r2")?,
            b2: raw.f64_req("diffusion.b2")?,
        },
    };

    let initial = match raw.choice("initial.type", Some("monodisperse"), &["monodisperse", "blob", "csv"])? {
        "monodisperse" => InitialSpec::Monodisperse {
            amplitude: raw.f64_or("initial.amplitude", 1.0)?,
        },
        "blob" => {
            let spec = InitialSpec::Blob {
                amplitude: raw.f64_or("initial.amplitude", 1.0)?,
                background: raw.f64_or("initial.background", 0.0)?,
                width: raw.f64_or("initial.width", 0.1 * side)?,
                species: raw.usize_or("initial.species", 1)?,
                decay: raw.f64_or("initial.decay", 0.0)?,
            };
            if let InitialSpec::Blob { width, species, background, .. } = &spec {
                raw.range("initial.width", *width > 0.0, "must be > 0")?;
                raw.range("initial.species", (1..=n_max).contains(species), "must be between 1 and mass.n_max")?;
                raw.range("initial.background", *background >= 0.0, "must be >= 0")?;
            }
            spec
        }
        _ => InitialSpec::Csv {
            path: existing_file(&raw, "initial.path", &base_dir)?,
        },
    };
    if let InitialSpec::Monodisperse { amplitude } | InitialSpec::Blob { amplitude, .. } = &initial {
        raw.range("initial.amplitude", *amplitude >= 0.0, "must be >= 0")?;
    }

    let t_final = raw.f64_req("integrator.t_final")?;
    raw.range("integrator.t_final", t_final >= 0.0, "must be >= 0")?;
    let dt = raw.f64_req("integrator.dt")?;
    raw.range("integrator.dt", dt > 0.0, "must be > 0")?;
    let splitting = match raw.choice("integrator.splitting", Some("strang"), &["strang", "lie"])? {
        "strang" => Splitting::Strang,
        _ => Splitting::Lie,
    };
    let default_policy = if mode == Mode::Gelscan { "gel" } else { "cutoff" };
    let policy = match raw.choice("integrator.policy", Some(default_policy), &["cutoff", "gel"])? {
        "cutoff" => TruncationPolicy::Cutoff,
        _ => TruncationPolicy::GelReservoir,
    };
    let stride = raw.f64_or("integrator.stride", t_final.max(dt))?;
    raw.range("integrator.stride", stride > 0.0, "must be > 0")?;
    let auto_halve = raw.bool_or("integrator.auto_halve", false)?;

    let monitor_names: Vec<String> = raw.list("monitors", "a monitor name")?;
    let mut monitors = Vec::new();
    for m in &monitor_names {
        let kind = match m.as_str() {
            "mass" => MonitorKind::Mass,
            "number" => MonitorKind::Number,
            "positivity" => MonitorKind::Positivity,
            "heat_majorant" => MonitorKind::HeatMajorant,
            "l1_stability" => MonitorKind::L1Stability,
            other => {
                return Err(raw.err(
                    "monitors",
                    format!("unknown monitor `{other}`; expected mass, number, positivity, heat_majorant or l1_stability"),
                ))
            }
        };
        if !monitors.contains(&kind) {
            monitors.push(kind);
        }
    }
    let mass_tolerance = raw.f64_or("monitors.mass_tolerance", 1e-10)?;
    raw.range("monitors.mass_tolerance", mass_tolerance > 0.0, "must be > 0")?;
    let heat_majorant_tolerance = raw.f64_or("monitors.heat_majorant_tolerance", HeatMajorantMonitor::DEFAULT_TOLERANCE)?;
    raw.range("monitors.heat_majorant_tolerance", heat_majorant_tolerance > 0.0, "must be > 0")?;

    let moment_exponents: Vec<f64> = raw.list("moments.exponents", "a number")?;
    raw.range("moments.exponents", moment_exponents.iter().all(|a| *a >= 0.0), "exponents must be >= 0")?;
    let pair_exponents: Vec<f64> = raw.list("moments.pair_exponents", "a number")?;
    raw.range("moments.pair_exponents", pair_exponents.iter().all(|a| *a >= 0.0), "exponents must be >= 0")?;

    let stability = StabilitySpec {
        perturbation: raw.f64_or("stability.perturbation", 1e-3)?,
        c0: raw.f64_or("stability.c0", 1.0)?,
        a_bound: match raw.get("stability.a_bound") {
            None | Some("observed") => None,
            Some(v) => Some(raw.finite("stability.a_bound", v)?),
        },
    };
    raw.range("stability.perturbation", stability.perturbation > 0.0, "must be > 0")?;
    raw.range("stability.c0", stability.c0 > 0.0, "must be > 0")?;

    let tracer = TracerSpec {
        count: raw.usize_or("tracer.count", 10_000)?,
        slices: raw.usize_or("tracer.slices", 64)?,
        immortal: raw.bool_or("tracer.immortal", false)?,
        convention: match raw.choice("tracer.convention", Some("pair"), &["pair", "partner"])? {
            "pair" => RateConvention::PairSymmetric,
            _ => RateConvention::PerPartner,
        },
        slice_rule: match raw.choice("tracer.slice_rule", Some("average"), &["average", "left"])? {
            "average" => SliceRule::Average,
            _ => SliceRule::Left,
        },
        record: raw.list("tracer.record", "a slice index")?,
        tv_tolerance: raw.f64_or("tracer.tv_tolerance", 0.02)?,
        z_limit: raw.f64_or("tracer.z_limit", 4.0)?,
    };
    raw.range("tracer.count", tracer.count >= 1, "must be >= 1")?;
    raw.range("tracer.slices", tracer.slices >= 1, "must be >= 1")?;
    raw.range("tracer.record", tracer.record.iter().all(|r| *r <= tracer.slices), "indices must be <= tracer.slices")?;

    let gelscan = GelscanSpec {
        n_list: raw.list("gelscan.n_list", "a mass range")?,
        expect: match raw.choice("gelscan.expect", Some("any"), &["any", "gelling", "conserving"])? {
            "gelling" => Some(GelOutcome::Gelling),
            "conserving" => Some(GelOutcome::Conserving),
            _ => None,
        },
    };
    if mode == Mode::Gelscan {
        raw.range(
            "gelscan.n_list",
            !gelscan.n_list.is_empty() && gelscan.n_list.windows(2).all(|w| w[0] < w[1]) && gelscan.n_list[0] >= 1,
            "must be a nonempty strictly increasing list of mass ranges",
        )?;
    }

    raw.finish()?;
    Ok(Scenario {
        name,
        mode,
        seed,
        output_dir,
        write_snapshots,
        kernel,
        diffusion,
        dim,
        side,
        cells,
        n_max,
        initial,
        integrator: IntegratorSpec {
            t_final,
            dt,
            splitting,
            policy,
            stride,
            auto_halve,
        },
        monitors,
        mass_tolerance,
        heat_majorant_tolerance,
        moment_exponents,
        pair_exponents,
        stability,
        tracer,
        gelscan,
        base_dir,
    })
}

fn join<T: std::fmt::Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

impl Scenario {
    /// Every key, defaults included, in a form [`parse_str`] reads back to an equal scenario.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("name", self.name.clone());
        kv("mode", self.mode.label().into());
        kv("seed", self.seed.to_string());
        if let Some(d) = &self.output_dir {
            kv("output.dir", d.display().to_string());
        }
        kv("output.snapshots", self.write_snapshots.to_string());
        kv("grid.dim", self.dim.to_string());
        kv("grid.side", format!("{:?}", self.side));
        kv("grid.cells", self.cells.to_string());
        kv("mass.n_max", self.n_max.to_string());
        match &self.kernel {
            KernelSpec::Constant { c } => {
                kv("kernel.type", "constant".into());
                kv("kernel.c", format!("{c:?}"));
            }
            KernelSpec::Sum { c } => {
                kv("kernel.type", "sum".into());
                kv("kernel.c", format!("{c:?}"));
            }
            KernelSpec::SumPower { c, exponent } => {
                kv("kernel.type", "sum_power".into());
                kv("kernel.c", format!("{c:?}"));
                kv("kernel.exponent", format!("{exponent:?}"));
            }
            KernelSpec::Product { exponent } => {
                kv("kernel.type", "product".into());
                kv("kernel.exponent", format!("{exponent:?}"));
            }
            KernelSpec::TwoExponent { a, b } => {
                kv("kernel.type", "two_exponent".into());
                kv("kernel.a", format!("{a:?}"));
                kv("kernel.b", format!("{b:?}"));
            }
            KernelSpec::Range { c, chi, scale } => {
                kv("kernel.type", "range".into());
                kv("kernel.c", format!("{c:?}"));
                kv("kernel.chi", format!("{chi:?}"));
                kv("kernel.scale", format!("{scale:?}"));
            }
            KernelSpec::Csv { path } => {
                kv("kernel.type", "csv".into());
                kv("kernel.path", path.display().to_string());
            }
        }
        match &self.diffusion {
            DiffusionSpec::Constant { value } => {
                kv("diffusion.type", "constant".into());
                kv("diffusion.value", format!("{value:?}"));
            }
            DiffusionSpec::Power { r2, b2 } => {
                kv("diffusion.type", "power".into());
                kv("diffusion.r2", format!("{r2:?}"));
                kv("diffusion.b2", format!("{b2:?}"));
            }
            DiffusionSpec::Bracketed { r1, b1, r2, b2 } => {
                kv("diffusion.type", "bracketed".into());
                kv("diffusion.r1", format!("{r1:?}"));
                kv("diffusion.b1", format!("{b1:?}"));
                kv("diffusion.r2", format!("{r2:?}"));
                kv("diffusion.b2", format!("{b2:?}"));
            }
        }
        match &self.initial {
            InitialSpec::Monodisperse { amplitude } => {
                kv("initial.type", "monodisperse".into());
                kv("initial.amplitude", format!("{amplitude:?}"));
            }
            InitialSpec::Blob {
                amplitude,
                background,
                width,
                species,
                decay,
            } => {
                kv("initial.type", "blob".into());
                kv("initial.amplitude", format!("{amplitude:?}"));
                kv("initial.background", format!("{background:?}"));
                kv("initial.width", format!("{width:?}"));
                kv("initial.species", species.to_string());
                kv("initial.decay", format!("{decay:?}"));
            }
            InitialSpec::Csv { path } => {
                kv("initial.type", "csv".into());
                kv("initial.path", path.display().to_string());
            }
        }
        let i = &self.integrator;
        kv("integrator.t_final", format!("{:?}", i.t_final));
        kv("integrator.dt", format!("{:?}", i.dt));
        kv(
            "integrator.splitting",
            match i.splitting {
                Splitting::Strang => "strang",
                Splitting::Lie => "lie",
            }
            .into(),
        );
        kv(
            "integrator.policy",
            match i.policy {
                TruncationPolicy::Cutoff => "cutoff",
                TruncationPolicy::GelReservoir => "gel",
            }
            .into(),
        );
        kv("integrator.stride", format!("{:?}", i.stride));
        kv("integrator.auto_halve", i.auto_halve.to_string());
        kv(
            "monitors",
            self.monitors.iter().map(|m| m.label()).collect::<Vec<_>>().join(","),
        );
        kv("monitors.mass_tolerance", format!("{:?}", self.mass_tolerance));
        kv(
            "monitors.heat_majorant_tolerance",
            format!("{:?}", self.heat_majorant_tolerance),
        );
        kv("moments.exponents", join(&self.moment_exponents));
        kv("moments.pair_exponents", join(&self.pair_exponents));
        kv("stability.perturbation", format!("{:?}", self.stability.perturbation));
        kv("stability.c0", format!("{:?}", self.stability.c0));
        kv(
            "stability.a_bound",
            self.stability
                .a_bound
                .map(|a| format!("{a:?}"))
                .unwrap_or_else(|| "observed".into()),
        );
        let t = &self.tracer;
        kv("tracer.count", t.count.to_string());
        kv("tracer.slices", t.slices.to_string());
        kv("tracer.immortal", t.immortal.to_string());
        kv(
            "tracer.convention",
            match t.convention {
                RateConvention::PairSymmetric => "pair",
                RateConvention::PerPartner => "partner",
            }
            .into(),
        );
        kv(
            "tracer.slice_rule",
            match t.slice_rule {
                SliceRule::Average => "average",
                SliceRule::Left => "left",
            }
            .into(),
        );
        kv("tracer.record", join(&t.record));
        kv("tracer.tv_tolerance", format!("{:?}", t.tv_tolerance));
        kv("tracer.z_limit", format!("{:?}", t.z_limit));
        kv("gelscan.n_list", join(&self.gelscan.n_list));
        kv(
            "gelscan.expect",
            match self.gelscan.expect {
                None => "any",
                Some(GelOutcome::Gelling) => "gelling",
                Some(_) => "conserving",
            }
            .into(),
        );
        s
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dim, self.side, self.cells)
    }

    pub fn diffusion_profile(&self, n_max: usize) -> Result<DiffusionProfile> {
        match self.diffusion {
            DiffusionSpec::Constant { value } => DiffusionProfile::constant(value, n_max),
            DiffusionSpec::Power { r2, b2 } => DiffusionProfile::power_law(r2, b2, n_max),
            DiffusionSpec::Bracketed { r1, b1, r2, b2 } => DiffusionProfile::bracketed(r1, b1, r2, b2, n_max),
        }
    }

    pub fn kernel(&self, n_max: usize) -> Result<Kernel> {
        match &self.kernel {
            KernelSpec::Constant { c } => Kernel::constant(*c, n_max),
            KernelSpec::Sum { c } => Kernel::sum(*c, n_max),
            KernelSpec::SumPower { c, exponent } => Kernel::sum_power(*c, *exponent, n_max),
            KernelSpec::Product { exponent } => Kernel::new(KernelKind::Product { a: *exponent }, n_max),
            KernelSpec::TwoExponent { a, b } => Kernel::two_exponent(*a, *b, n_max),
            KernelSpec::Range { c, chi, scale } => {
                let dp = self.diffusion_profile(n_max)?;
                kinetic_kernel_from_range(&dp, &RangeProfile::new(*chi, *scale)?, self.dim, *c)
            }
            KernelSpec::Csv { path } => Kernel::from_csv(&self.resolve(path), n_max),
        }
    }

    pub fn initial_field(&self) -> Result<MassField> {
        let grid = self.grid()?;
        match &self.initial {
            InitialSpec::Monodisperse { amplitude } => MassField::monodisperse(grid, self.n_max, |_| *amplitude),
            InitialSpec::Blob {
                amplitude,
                background,
                width,
                species,
                decay,
            } => {
                let c = 0.5 * grid.side();
                MassField::from_fn(grid, self.n_max, |n, x| {
                    if n > *species {
                        return 0.0;
                    }
                    let mut r2 = 0.0;
                    for xi in x.iter().take(grid.dim()) {
                        r2 += (xi - c) * (xi - c);
                    }
                    (background + amplitude * (-r2 / (2.0 * width * width)).exp()) * (n as f64).powf(-decay)
                })
            }
            InitialSpec::Csv { path } => read_field_csv(&self.resolve(path), grid, self.n_max),
        }
    }

    /// Spatial average of the initial field, truncated or padded to `n_max`.
    pub fn initial_homogeneous(&self, n_max: usize) -> Result<HomogeneousState> {
        let mut c = match &self.initial {
            InitialSpec::Monodisperse { amplitude } => vec![*amplitude],
            _ => {
                let f = self.initial_field()?;
                let vol = f.grid().volume();
                f.species_integrals().into_iter().map(|v| v / vol).collect()
            }
        };
        c.resize(n_max, 0.0);
        Ok(HomogeneousState { c, gel: 0.0 })
    }

    pub fn run_config(&self) -> RunConfig {
        let i = &self.integrator;
        RunConfig {
            t_final: i.t_final,
            dt: i.dt,
            splitting: i.splitting,
            policy: i.policy,
            stride: i.stride,
            seed: self.seed,
            auto_halve: i.auto_halve,
            moment_exponents: self.moment_exponents.clone(),
            pair_moment_exponents: self.pair_exponents.clone(),
            keep_snapshots: false,
        }
    }

    /// `--out` beats `output.dir`, which beats the environment variable.
    pub fn output_root(&self, cli_out: Option<&Path>) -> PathBuf {
        if let Some(p) = cli_out {
            return p.to_path_buf();
        }
        if let Some(p) = &self.output_dir {
            return self.resolve(p);
        }
        match std::env::var_os(OUTPUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v).join(&self.name),
            _ => PathBuf::from(DEFAULT_OUTPUT_DIR).join(&self.name),
        }
    }
}

/// Reads rows `n,cell,value` (flat cell index) or `n,i0,..,value` (one index
/// per axis, as in snapshot files) into a field on `grid`.
pub fn read_field_csv(path: &Path, grid: Grid, n_max: usize) -> Result<MassField> {
    let text = fs::read_to_string(path)?;
    let mut f = MassField::zeros(grid, n_max)?;
    let csv_err = |line: usize, msg: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        msg,
    };
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') || t.starts_with("n,") {
            continue;
        }
        let parts: Vec<&str> = t.split(',').map(str::trim).collect();
        if parts.len() != 3 && parts.len() != grid.dim() + 2 {
            return Err(csv_err(line, "expected `n,cell,value` or `n,i0,..,value`".into()));
        }
        let last = parts.len() - 1;
        let n: usize = parts[0].parse().map_err(|_| csv_err(line, format!("bad mass `{}`", parts[0])))?;
        let idx = parts[1..last]
            .iter()
            .map(|p| p.parse::<usize>().map_err(|_| csv_err(line, format!("bad cell index `{p}`"))))
            .collect::<Result<Vec<_>>>()?;
        let v: f64 = parts[last].parse().map_err(|_| csv_err(line, format!("bad value `{}`", parts[last])))?;
        let cell = if idx.len() == 1 {
            idx[0]
        } else if idx.iter().all(|i| *i < grid.cells_per_side()) {
            grid.index(&idx)
        } else {
            usize::MAX
        };
        if n == 0 || n > n_max || cell >= grid.n_cells() {
            return Err(csv_err(line, format!("entry `{t}` outside the field")));
        }
        if !(v.is_finite() && v >= 0.0) {
            return Err(csv_err(line, format!("density {v} must be finite and >= 0")));
        }
        f.set(n, cell, v);
    }
    Ok(f)
}

/// Series CSV: `t,I,I_plus_gel,X0,X1,X2,...`, then pair moments and monitor columns.
pub fn series_csv(rec: &RunRecord, monitor_names: &[&str]) -> String {
    let mut header = vec!["t".to_string(), "I".into(), "I_plus_gel".into()];
    header.extend(rec.moments.iter().map(|(_, c)| c.name.clone()));
    for p in &rec.pair_moments {
        if !p.y.is_empty() {
            header.push(format!("Y{}", p.a));
        }
        header.push(format!("Yhat{}", p.a));
    }
    let monitors: Vec<_> = rec
        .monitor_columns
        .iter()
        .filter(|c| monitor_names.contains(&c.name.as_str()))
        .collect();
    header.extend(monitors.iter().map(|c| c.name.clone()));
    let mut s = format!("{SERIES_HEADER}\n{}\n", header.join(","));
    for i in 0..rec.times.len() {
        let mut row = vec![
            format!("{:?}", rec.times[i]),
            format!("{:?}", rec.mass[i]),
            format!("{:?}", rec.mass_with_gel[i]),
        ];
        row.extend(rec.moments.iter().map(|(_, c)| format!("{:?}", c.values[i])));
        for p in &rec.pair_moments {
            if !p.y.is_empty() {
                row.push(format!("{:?}", p.y[i]));
            }
            row.push(format!("{:?}", p.y_hat[i]));
        }
        row.extend(monitors.iter().map(|c| format!("{:?}", c.values[i])));
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Snapshot CSV: `n,i0[,i1[,i2]],value` over all nonzero densities.
pub fn snapshot_csv(t: f64, f: &MassField) -> String {
    let grid = f.grid();
    let coords: Vec<String> = (0..grid.dim()).map(|a| format!("i{a}")).collect();
    let mut s = format!("# smolkit snapshot v1\n# t = {t:?}\n# gel = {:?}\nn,{},value\n", f.gel(), coords.join(","));
    for n in 1..=f.n_max() {
        for (cell, v) in f.species(n).iter().enumerate() {
            if *v != 0.0 {
                let c = grid.coords(cell);
                let idx: Vec<String> = c[..grid.dim()].iter().map(|i| i.to_string()).collect();
                let _ = writeln!(s, "{n},{},{v:?}", idx.join(","));
            }
        }
    }
    s
}

/// What [`execute`] produced.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    pub reports: Vec<BoundReport>,
    pub summary: String,
    pub out_dir: PathBuf,
}

impl Outcome {
    /// 0 when every check passed, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            2
        }
    }
}

fn build_monitors(s: &Scenario, f0: &MassField, dp: &DiffusionProfile) -> Result<Vec<Box<dyn Monitor>>> {
    let mut out: Vec<Box<dyn Monitor>> = Vec::new();
    for m in &s.monitors {
        match m {
            MonitorKind::Mass => out.push(Box::new(MassDriftMonitor::new(f0, s.mass_tolerance))),
            MonitorKind::Number => out.push(Box::new(NumberMonitor::new(1e-12))),
            MonitorKind::Positivity => out.push(Box::new(PositivityMonitor::new(0.0))),
            MonitorKind::HeatMajorant => {
                out.push(Box::new(HeatMajorantMonitor::new(f0, dp, s.heat_majorant_tolerance)?))
            }
            MonitorKind::L1Stability => {}
        }
    }
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::from)
}

fn write_snapshots(dir: &Path, rec: &RunRecord) -> Result<()> {
    let snap_dir = dir.join("snapshots");
    fs::create_dir_all(&snap_dir)?;
    for (i, (t, f)) in rec.times.iter().zip(&rec.snapshots).enumerate() {
        write(&snap_dir.join(format!("snapshot_{i:05}.csv")), &snapshot_csv(*t, f))?;
    }
    Ok(())
}

/// Runs the scenario's pipeline, writing all output below `out_dir`.
///
/// Runtime problems (including violated hypotheses) are errors; failed
/// checks are reported through [`Outcome::passed`].
pub fn execute(s: &Scenario, out_dir: &Path) -> Result<Outcome> {
    fs::create_dir_all(out_dir)?;
    let mut summary = format!("scenario: {}\nmode: {}\nseed: {}\n", s.name, s.mode.label(), s.seed);
    let mut reports = Vec::new();
    let mut passed = true;
    match s.mode {
        Mode::Pde | Mode::Verify => {
            let (rec, mut reps, extra) = pde_pipeline(s, out_dir, s.write_snapshots)?;
            summary.push_str(&extra);
            summary.push_str(&run_stats(&rec));
            reports.append(&mut reps);
        }
        Mode::Homogeneous => {
            let k = s.kernel(s.n_max)?;
            let c0 = s.initial_homogeneous(s.n_max)?;
            let rec = homogeneous_run(&c0, &k, &s.run_config())?;
            write(&out_dir.join("series.csv"), &series_csv(&rec, &[]))?;
            let mut r = BoundReport::new("mass_drift", s.mass_tolerance);
            for (t, m) in rec.times.iter().zip(&rec.mass_with_gel) {
                let i0 = rec.mass_with_gel[0];
                r.update(if i0 == 0.0 { 0.0 } else { ((m - i0) / i0).abs() }, *t, None);
            }
            if s.monitors.contains(&MonitorKind::Mass) {
                reports.push(r);
            }
            summary.push_str(&run_stats(&rec));
        }
        Mode::Tracer => {
            let (ok, extra) = tracer_pipeline(s, out_dir)?;
            passed &= ok;
            summary.push_str(&extra);
        }
        Mode::Gelscan => {
            let k = s.kernel(*s.gelscan.n_list.last().unwrap())?;
            let v = gelation_scan(&k, &s.gelscan.n_list, &s.run_config(), |n| {
                s.initial_homogeneous(n).expect("initial state was validated")
            })?;
            write(&out_dir.join("gelscan.csv"), &v.to_csv())?;
            summary.push_str(&v.to_string());
            passed &= match s.gelscan.expect {
                Some(e) => v.outcome == e,
                None => v.outcome != GelOutcome::Inconclusive,
            };
        }
    }
    for r in &reports {
        passed &= r.passed;
        let _ = writeln!(summary, "{r}");
    }
    if !reports.is_empty() {
        let mut csv = format!("# smolkit bounds v1\n{}\n", BoundReport::CSV_HEADER);
        for r in &reports {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        write(&out_dir.join("bounds.csv"), &csv)?;
    }
    let _ = writeln!(summary, "status: {}", if passed { "PASS" } else { "FAIL" });
    write(&out_dir.join("report.txt"), &summary)?;
    Ok(Outcome {
        passed,
        reports,
        summary,
        out_dir: out_dir.to_path_buf(),
    })
}

fn run_stats(rec: &RunRecord) -> String {
    format!(
        "steps: {}\nhalvings: {}\nclipped mass: {:?}\nfinal I: {:?}\nfinal I + gel: {:?}\n",
        rec.steps,
        rec.halvings,
        rec.clipped_mass,
        rec.mass.last().copied().unwrap_or(0.0),
        rec.mass_with_gel.last().copied().unwrap_or(0.0)
    )
}

fn pde_pipeline(s: &Scenario, out_dir: &Path, snapshots: bool) -> Result<(RunRecord, Vec<BoundReport>, String)> {
    let k = s.kernel(s.n_max)?;
    let dp = s.diffusion_profile(s.n_max)?;
    let f0 = s.initial_field()?;
    let mut extra = String::new();
    let extent = support_extent(&f0);
    if extent > 0.25 && s.monitors.contains(&MonitorKind::HeatMajorant) {
        let _ = writeln!(
            extra,
            "note: initial support covers {:.0}% of the box side; periodic images interact",
            100.0 * extent
        );
    }
    let mut boxed = build_monitors(s, &f0, &dp)?;
    let names: Vec<String> = boxed.iter().map(|m| m.name().to_string()).collect();
    let mut cfg = s.run_config();
    let stability = s.monitors.contains(&MonitorKind::L1Stability);
    cfg.keep_snapshots = snapshots || stability;
    let rec = {
        let mut refs: Vec<&mut dyn Monitor> = boxed.iter_mut().map(|b| b.as_mut() as &mut dyn Monitor).collect();
        run(&f0, &k, &dp, &cfg, &mut refs)?
    };
    let mut reports: Vec<BoundReport> = boxed.iter().map(|m| m.report()).collect();
    if stability {
        let mut g0 = f0.clone();
        let delta = s.stability.perturbation;
        let nc = g0.grid().n_cells();
        for (i, v) in g0.data_mut().iter_mut().enumerate() {
            // deterministic, sign-alternating relative perturbation
            let sign = if (i % nc) % 2 == 0 { 1.0 } else { -1.0 };
            *v *= 1.0 + sign * delta;
        }
        let other = run(&g0, &k, &dp, &cfg, &mut [])?;
        let a = match s.stability.a_bound {
            Some(a) => a,
            None => observed_second_moment_sup(rec.snapshots.iter().chain(&other.snapshots)),
        };
        reports.push(check_l1_stability(&rec.times, &rec.snapshots, &other.snapshots, &k, s.stability.c0, a)?);
        let _ = writeln!(extra, "l1 stability: A = {a:?}, c0 = {:?}", s.stability.c0);
    }
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    write(&out_dir.join("series.csv"), &series_csv(&rec, &name_refs))?;
    if snapshots {
        write_snapshots(out_dir, &rec)?;
    }
    Ok((rec, reports, extra))
}

fn tracer_pipeline(s: &Scenario, out_dir: &Path) -> Result<(bool, String)> {
    let k = s.kernel(s.n_max)?;
    let dp = s.diffusion_profile(s.n_max)?;
    let f0 = s.initial_field()?;
    let t = &s.tracer;
    let slice_dt = s.integrator.t_final / t.slices as f64;
    if !(slice_dt > 0.0) {
        return Err(Error::InvalidParameter("tracer mode needs integrator.t_final > 0".into()));
    }
    let mut cfg = s.run_config();
    cfg.stride = slice_dt;
    cfg.dt = slice_dt / (slice_dt / cfg.dt).ceil();
    cfg.keep_snapshots = true;
    let rec = run(&f0, &k, &dp, &cfg, &mut [])?;
    if rec.snapshots.len() != t.slices + 1 {
        return Err(Error::InvalidParameter(format!(
            "expected {} field slices, got {}",
            t.slices + 1,
            rec.snapshots.len()
        )));
    }
    write(&out_dir.join("series.csv"), &series_csv(&rec, &[]))?;
    if s.write_snapshots {
        write_snapshots(out_dir, &rec)?;
    }
    let record = if t.record.is_empty() { vec![t.slices] } else { t.record.clone() };
    let opts = TracerOptions {
        convention: t.convention,
        immortal: t.immortal,
        policy: s.integrator.policy,
        slice_rule: t.slice_rule,
    };
    let ens = simulate(
        &rec.snapshots,
        &k,
        &dp,
        &TracerConfig {
            count: t.count,
            seed: s.seed,
            record,
        },
        slice_dt,
        opts,
    )?;
    write(&out_dir.join("histogram.csv"), &ens.histogram_csv())?;
    let mut summary_csv = format!("# smolkit tracer summary v1\n{},cemetery,escaped,mean_collisions\n", crate::tracer::ConsistencyReport::CSV_HEADER);
    let mut text = String::new();
    let mut ok = true;
    for h in &ens.histograms {
        let c = density_consistency(&ens, h, &rec.snapshots[h.slice], ens.initial_number)?;
        let mean_coll = h.collisions as f64 / ens.count as f64;
        let _ = writeln!(summary_csv, "{},{},{},{mean_coll:?}", c.csv_row(), h.cemetery, h.escaped);
        let good = t.immortal || (c.total_variation <= t.tv_tolerance && c.max_abs_z <= t.z_limit);
        ok &= good;
        let _ = writeln!(
            text,
            "[{}] tracer t = {:?}: TV = {:.4} (tolerance {}), max |z| = {:.2} (limit {}), cemetery {}, escaped {}, mean collisions {:.3}",
            if good { "PASS" } else { "FAIL" },
            c.time,
            c.total_variation,
            t.tv_tolerance,
            c.max_abs_z,
            t.z_limit,
            h.cemetery,
            h.escaped,
            mean_coll
        );
    }
    if t.immortal {
        text.push_str("note: immortal tracers do not follow the solver law; comparison is descriptive\n");
    }
    write(&out_dir.join("tracer_summary.csv"), &summary_csv)?;
    Ok((ok, text))
}
