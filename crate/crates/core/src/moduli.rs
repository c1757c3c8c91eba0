//! Moduli of continuity and the integral functions built from them.
//!
//! A modulus here is a concave, nondecreasing map `ω: [0, ∞) → [0, ∞)` with
//! `ω(0) = 0`. The composite `r ↦ ω_V(r + λ ω_η(r))` drives both the Osgood
//! classification and the Bihari–LaSalle comparison that turns a differential
//! inequality `Q' ≤ a (ω(Q) + M)` into an explicit bound on `Q`.
//!
//! All integrals are taken in logarithmic variables (`u = ln s` for `G`,
//! `v = ln(s + M)` for the forced comparison function), which keeps the
//! integrands bounded and smooth near the origin.

use std::cell::Cell;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{integrate, Tolerance};

/// Lambert W(1): the log-log family is nondecreasing up to `r* = exp(-1/W(1))`.
const LAMBERT_W1: f64 = 0.567_143_290_409_783_8;

/// Sample tolerance used by the concavity and monotonicity checks.
pub const SHAPE_TOL: f64 = 1e-12;

/// Tolerance for `G` and `H` evaluations.
pub const G_TOLERANCE: Tolerance = Tolerance { abs: 1e-10, rel: 1e-13 };
const STEP_TOLERANCE: Tolerance = Tolerance { abs: 1e-13, rel: 1e-14 };
const SHELL_TOLERANCE: Tolerance = Tolerance { abs: 0.0, rel: 1e-12 };

/// Lowest `ln r` explored when bracketing a level of `G`.
const LN_FLOOR: f64 = -690.0;

#[derive(Clone, Debug, PartialEq)]
pub enum ModulusFamily {
    Linear,
    Power {
        alpha: f64,
    },
    LogLinear,
    LogLog,
    /// Piecewise-linear through `(r, ω)` knots, always starting at `(0, 0)`.
    Tabulated {
        knots: Vec<(f64, f64)>,
    },
}

impl ModulusFamily {
    pub fn name(&self) -> &'static str {
        match self {
            ModulusFamily::Linear => "linear",
            ModulusFamily::Power { .. } => "power",
            ModulusFamily::LogLinear => "loglinear",
            ModulusFamily::LogLog => "loglog",
            ModulusFamily::Tabulated { .. } => "tabulated",
        }
    }

    /// Largest radius on which the closed form is concave and nondecreasing.
    fn natural_cap(&self) -> f64 {
        match self {
            ModulusFamily::Linear | ModulusFamily::Power { .. } => f64::INFINITY,
            ModulusFamily::LogLinear => (-1.0f64).exp(),
            ModulusFamily::LogLog => (-1.0 / LAMBERT_W1).exp(),
            ModulusFamily::Tabulated { knots } => knots.last().map(|k| k.0).unwrap_or(0.0),
        }
    }

    fn base(&self, r: f64) -> f64 {
        if r == 0.0 {
            return 0.0;
        }
        match self {
            ModulusFamily::Linear => r,
            ModulusFamily::Power { alpha } => r.powf(*alpha),
            ModulusFamily::LogLinear => -r * r.ln(),
            ModulusFamily::LogLog => r * (-r.ln()).ln(),
            ModulusFamily::Tabulated { knots } => interpolate(knots, r),
        }
    }

    /// Left derivative of the closed form at `r > 0`.
    fn base_slope(&self, r: f64) -> f64 {
        match self {
            ModulusFamily::Linear => 1.0,
            ModulusFamily::Power { alpha } => alpha * r.powf(alpha - 1.0),
            ModulusFamily::LogLinear => -r.ln() - 1.0,
            ModulusFamily::LogLog => {
                let l = -r.ln();
                l.ln() - 1.0 / l
            }
            ModulusFamily::Tabulated { knots } => {
                let idx = knots.partition_point(|k| k.0 < r).clamp(1, knots.len() - 1);
                let (r0, w0) = knots[idx - 1];
                let (r1, w1) = knots[idx];
                (w1 - w0) / (r1 - r0)
            }
        }
    }
}

fn interpolate(knots: &[(f64, f64)], r: f64) -> f64 {
    let idx = knots.partition_point(|k| k.0 <= r);
    if idx >= knots.len() {
        return knots[knots.len() - 1].1;
    }
    let (r0, w0) = knots[idx - 1];
    let (r1, w1) = knots[idx];
    w0 + (w1 - w0) * (r - r0) / (r1 - r0)
}

/// How `ω` continues past its cap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extension {
    Constant,
    /// Continue along the tangent (last slope for tabulated moduli).
    Tangent,
}

/// A validated modulus of continuity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModulusDecl", into = "ModulusDecl")]
pub struct ModulusSpec {
    family: ModulusFamily,
    scale: f64,
    cap: f64,
    extension: Extension,
    cap_value: f64,
    tail_slope: f64,
}

impl ModulusSpec {
    pub fn new(family: ModulusFamily, scale: f64, r_max: Option<f64>, extension: Extension) -> Result<Self> {
        let mut problems = Vec::new();
        if !(scale.is_finite() && scale > 0.0) {
            problems.push(format!("scale must be positive and finite, got {scale}"));
        }
        let family = match family {
            ModulusFamily::Power { alpha } => {
                if !(alpha > 0.0 && alpha <= 1.0) {
                    problems.push(format!("power exponent must lie in (0, 1], got {alpha}"));
                }
                ModulusFamily::Power { alpha }
            }
            ModulusFamily::Tabulated { knots } => {
                let knots = normalize_knots(knots, &mut problems);
                ModulusFamily::Tabulated { knots }
            }
            other => other,
        };
        let natural = family.natural_cap();
        let cap = match r_max {
            Some(r) if !(r.is_finite() && r > 0.0) => {
                problems.push(format!("r_max must be positive and finite, got {r}"));
                natural
            }
            Some(r) if r > natural * (1.0 + 1e-12) => {
                problems.push(format!(
                    "r_max = {r} exceeds the range {natural} on which the {} family is concave and nondecreasing",
                    family.name()
                ));
                natural
            }
            Some(r) => r.min(natural),
            None => natural,
        };
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        let (cap_value, tail_slope) = if cap.is_finite() {
            let v = scale * family.base(cap);
            let s = match extension {
                Extension::Constant => 0.0,
                Extension::Tangent => (scale * family.base_slope(cap)).max(0.0),
            };
            (v, s)
        } else {
            (f64::INFINITY, 0.0)
        };
        Ok(ModulusSpec { family, scale, cap, extension, cap_value, tail_slope })
    }

    pub fn linear(lipschitz: f64) -> Result<Self> {
        Self::new(ModulusFamily::Linear, lipschitz, None, Extension::Tangent)
    }

    pub fn power(alpha: f64, scale: f64) -> Result<Self> {
        Self::new(ModulusFamily::Power { alpha }, scale, None, Extension::Tangent)
    }

    /// `scale · r |log r|` up to `1/e`, constant afterwards.
    pub fn log_linear(scale: f64) -> Result<Self> {
        Self::new(ModulusFamily::LogLinear, scale, None, Extension::Tangent)
    }

    /// `scale · r log|log r|` up to `exp(-1/W(1))`, constant afterwards.
    pub fn log_log(scale: f64) -> Result<Self> {
        Self::new(ModulusFamily::LogLog, scale, None, Extension::Tangent)
    }

    pub fn tabulated(knots: Vec<(f64, f64)>) -> Result<Self> {
        Self::new(ModulusFamily::Tabulated { knots }, 1.0, None, Extension::Tangent)
    }

    /// The zero modulus (constant functions).
    pub fn zero() -> Self {
        Self::tabulated(vec![(0.0, 0.0), (1.0, 0.0)]).expect("zero knots are valid")
    }

    pub fn family(&self) -> &ModulusFamily {
        &self.family
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    pub fn extension(&self) -> Extension {
        self.extension
    }

    /// `ω(r)`, rejecting negative arguments.
    pub fn eval(&self, r: f64) -> Result<f64> {
        if r.is_nan() || r < 0.0 {
            return Err(Error::Domain(format!("modulus argument must be nonnegative, got {r}")));
        }
        Ok(self.value(r))
    }

    /// `ω(r)` for `r ≥ 0`; negative inputs are treated as zero.
    #[inline]
    pub fn value(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        if r <= self.cap {
            self.scale * self.family.base(r)
        } else {
            self.cap_value + self.tail_slope * (r - self.cap)
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(&self.family, ModulusFamily::Tabulated { knots } if knots.iter().all(|k| k.1 == 0.0))
            && self.tail_slope == 0.0
    }

    /// Radii on which the sampled shape checks run.
    pub fn sample_grid(&self) -> Vec<f64> {
        let top = if self.cap.is_finite() { (4.0 * self.cap).max(4.0) } else { 100.0 };
        let mut grid = vec![0.0];
        let n = 240;
        let (lo, hi) = (1e-12f64.ln(), top.ln());
        for j in 0..=n {
            grid.push((lo + (hi - lo) * j as f64 / n as f64).exp());
        }
        if self.cap.is_finite() {
            grid.push(self.cap);
            grid.sort_by(f64::total_cmp);
        }
        if let ModulusFamily::Tabulated { knots } = &self.family {
            grid.extend(knots.iter().map(|k| k.0));
            grid.sort_by(f64::total_cmp);
            grid.dedup();
        }
        grid
    }

    /// Sampled shape invariants: zero at zero, nondecreasing, midpoint-concave.
    pub fn shape_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.value(0.0) != 0.0 {
            out.push("ω(0) must be 0".to_string());
        }
        let grid = self.sample_grid();
        for pair in grid.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if self.value(a) > self.value(b) + SHAPE_TOL {
                out.push(format!("ω decreases between r = {a:e} and r = {b:e}"));
                break;
            }
        }
        'outer: for (i, &a) in grid.iter().enumerate().step_by(7) {
            for &b in grid[i..].iter().step_by(5) {
                let mid = self.value(0.5 * (a + b));
                if mid < 0.5 * (self.value(a) + self.value(b)) - SHAPE_TOL {
                    out.push(format!("ω is not concave on [{a:e}, {b:e}]"));
                    break 'outer;
                }
            }
        }
        if grid.iter().any(|&r| !self.value(r).is_finite()) {
            out.push("ω is not finite on the sample grid".to_string());
        }
        out
    }

    /// `ω(r) > 0` for every sampled `r > 0`.
    pub fn is_positive(&self) -> bool {
        self.sample_grid().into_iter().filter(|&r| r > 0.0).all(|r| self.value(r) > 0.0)
    }
}

fn normalize_knots(mut knots: Vec<(f64, f64)>, problems: &mut Vec<String>) -> Vec<(f64, f64)> {
    if knots.is_empty() {
        problems.push("tabulated modulus needs at least one knot".to_string());
        return vec![(0.0, 0.0), (1.0, 0.0)];
    }
    if knots[0].0 == 0.0 {
        if knots[0].1 != 0.0 {
            problems.push(format!("tabulated modulus must vanish at 0, got ω(0) = {}", knots[0].1));
        }
    } else {
        knots.insert(0, (0.0, 0.0));
    }
    if knots.len() < 2 {
        problems.push("tabulated modulus needs a knot with r > 0".to_string());
        knots.push((1.0, 0.0));
    }
    let mut prev_slope = f64::INFINITY;
    for w in knots.windows(2) {
        let ((r0, w0), (r1, w1)) = (w[0], w[1]);
        if !(r0.is_finite() && r1.is_finite() && w0.is_finite() && w1.is_finite()) {
            problems.push("tabulated knots must be finite".to_string());
            break;
        }
        if r1 <= r0 {
            problems.push(format!("knot radii must increase strictly ({r0} then {r1})"));
            break;
        }
        let slope = (w1 - w0) / (r1 - r0);
        if slope < 0.0 {
            problems.push(format!("tabulated modulus decreases on [{r0}, {r1}]"));
            break;
        }
        if slope > prev_slope * (1.0 + 1e-12) + 1e-15 {
            problems.push(format!("tabulated modulus is not concave at r = {r0}"));
            break;
        }
        prev_slope = slope;
    }
    knots
}

impl fmt::Display for ModulusSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.family {
            ModulusFamily::Power { alpha } => write!(f, "power(α={alpha}, scale={})", self.scale),
            fam => write!(f, "{}(scale={})", fam.name(), self.scale),
        }
    }
}

/// Serialized form: `{ "family", "scale", "alpha"?, "knots"?, "r_max"?, "extension"? }`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModulusDecl {
    pub family: String,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knots: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extension: Option<Extension>,
}

fn one() -> f64 {
    1.0
}

impl TryFrom<ModulusDecl> for ModulusSpec {
    type Error = Error;

    fn try_from(d: ModulusDecl) -> Result<Self> {
        let family = match d.family.as_str() {
            "linear" => ModulusFamily::Linear,
            "power" => ModulusFamily::Power {
                alpha: d.alpha.ok_or_else(|| Error::Validation(vec!["power modulus needs \"alpha\"".into()]))?,
            },
            "loglinear" => ModulusFamily::LogLinear,
            "loglog" => ModulusFamily::LogLog,
            "tabulated" => ModulusFamily::Tabulated {
                knots: d
                    .knots
                    .ok_or_else(|| Error::Validation(vec!["tabulated modulus needs \"knots\"".into()]))?
                    .into_iter()
                    .map(|k| (k[0], k[1]))
                    .collect(),
            },
            other => return Err(Error::UnknownPreset(format!("modulus family \"{other}\""))),
        };
        ModulusSpec::new(family, d.scale, d.r_max, d.extension.unwrap_or(Extension::Tangent))
    }
}

impl From<ModulusSpec> for ModulusDecl {
    fn from(m: ModulusSpec) -> Self {
        let natural = m.family.natural_cap();
        let (alpha, knots) = match &m.family {
            ModulusFamily::Power { alpha } => (Some(*alpha), None),
            ModulusFamily::Tabulated { knots } => (None, Some(knots.iter().map(|k| [k.0, k.1]).collect())),
            _ => (None, None),
        };
        ModulusDecl {
            family: m.family.name().to_string(),
            scale: m.scale,
            alpha,
            knots,
            r_max: (m.cap != natural).then_some(m.cap),
            extension: (m.extension != Extension::Tangent).then_some(m.extension),
        }
    }
}

/// `r ↦ ω_V(r + λ ω_η(r))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComposedModulus {
    pub omega_v: ModulusSpec,
    pub omega_eta: ModulusSpec,
    pub lambda: f64,
}

impl ComposedModulus {
    pub fn new(omega_v: ModulusSpec, omega_eta: ModulusSpec, lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::Domain(format!("λ must be nonnegative and finite, got {lambda}")));
        }
        Ok(ComposedModulus { omega_v, omega_eta, lambda })
    }

    /// A composite equal to `ω` itself (`ω_η = 0`).
    pub fn plain(omega: ModulusSpec) -> Self {
        ComposedModulus { omega_v: omega, omega_eta: ModulusSpec::zero(), lambda: 0.0 }
    }

    #[inline]
    pub fn value(&self, r: f64) -> f64 {
        self.omega_v.value(r + self.lambda * self.omega_eta.value(r))
    }

    pub fn eval(&self, r: f64) -> Result<f64> {
        if r.is_nan() || r < 0.0 {
            return Err(Error::Domain(format!("modulus argument must be nonnegative, got {r}")));
        }
        Ok(self.value(r))
    }

    /// `e^u / ω(e^u)`, the integrand of `G` in the variable `u = ln s`.
    fn log_integrand<'a>(&'a self, bad: &'a Cell<Option<f64>>) -> impl Fn(f64) -> f64 + 'a {
        move |u: f64| {
            let s = u.exp();
            let w = self.value(s);
            if !(w > 0.0 && w.is_finite()) {
                if bad.get().is_none() {
                    bad.set(Some(s));
                }
                return 0.0;
            }
            s / w
        }
    }

    fn integrate_log(&self, u_from: f64, u_to: f64, tol: Tolerance) -> Result<f64> {
        let bad = Cell::new(None);
        let f = self.log_integrand(&bad);
        let r = integrate(f, u_from, u_to, tol)?;
        if let Some(s) = bad.get() {
            return Err(Error::DegenerateModulus { s });
        }
        Ok(r.value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trend {
    Divergent,
    Convergent,
    Inconclusive,
}

#[derive(Clone, Copy, Debug)]
pub struct OsgoodOptions {
    pub r_probe: f64,
    pub threshold: f64,
    /// Smallest shell endpoint.
    pub floor: f64,
    /// Shells used by the tail trend statistic.
    pub window: usize,
}

impl Default for OsgoodOptions {
    fn default() -> Self {
        OsgoodOptions { r_probe: 1.0 / 16.0, threshold: 50.0, floor: 1e-290, window: 64 }
    }
}

/// Evidence behind an Osgood classification.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OsgoodVerdict {
    pub is_osgood: bool,
    pub threshold: f64,
    pub r_probe: f64,
    pub floor: f64,
    /// `∫ ds/ω` over `[r_probe 2^{-(j+1)}, r_probe 2^{-j}]`.
    pub shell_integrals: Vec<f64>,
    pub partial_sums: Vec<f64>,
    pub threshold_exceeded: bool,
    /// Raabe statistic `j (1 - s_{j+1}/s_j)` averaged over the tail window.
    pub raabe: f64,
    /// Bertrand statistic `ln j · (raabe - 1)`; below 1 means divergent tail.
    pub bertrand: f64,
    pub trend: Trend,
    pub decided_by: String,
}

/// Classifies `∫_{0+} dr / ω_V(r + λ ω_η(r))` as divergent (Osgood) or convergent.
///
/// The integral is accumulated over dyadic shells down to `options.floor`. The
/// shell sequence of a regularly varying integrand decays geometrically when the
/// integral converges and sub-geometrically (like `1/j` or slower) when it
/// diverges; the Bertrand statistic of the tail window separates the two. When
/// the statistic is within 0.1 of the critical value 1, the partial sum is
/// compared against `options.threshold` instead.
pub fn check_osgood(c: &ComposedModulus, options: OsgoodOptions) -> Result<OsgoodVerdict> {
    let OsgoodOptions { r_probe, threshold, floor, window } = options;
    if !(r_probe.is_finite() && r_probe > 0.0) {
        return Err(Error::Domain(format!("r_probe must be positive, got {r_probe}")));
    }
    if !(floor > 0.0 && floor < r_probe) {
        return Err(Error::Domain(format!("floor must lie in (0, r_probe), got {floor}")));
    }
    if !(threshold > 0.0) {
        return Err(Error::Domain(format!("threshold must be positive, got {threshold}")));
    }
    let shells = ((r_probe / floor).log2().floor() as usize).max(8);
    let mut shell_integrals = Vec::with_capacity(shells);
    let mut partial_sums = Vec::with_capacity(shells);
    let mut sum = 0.0;
    let mut threshold_exceeded = false;
    let ln2 = std::f64::consts::LN_2;
    for j in 0..shells {
        let u_hi = r_probe.ln() - j as f64 * ln2;
        let contribution = c.integrate_log(u_hi - ln2, u_hi, SHELL_TOLERANCE)?;
        sum += contribution;
        threshold_exceeded |= sum > threshold;
        shell_integrals.push(contribution);
        partial_sums.push(sum);
    }

    let k = window.clamp(2, shells / 4);
    let last = shells - 1;
    let (s_end, s_start) = (shell_integrals[last], shell_integrals[last - k]);
    let ratio = (s_end / s_start).powf(1.0 / k as f64);
    let j_mid = (last - k / 2) as f64 + 1.0;
    let raabe = j_mid * (1.0 - ratio);
    let bertrand = j_mid.ln() * (raabe - 1.0);
    let trend = if bertrand < 0.9 {
        Trend::Divergent
    } else if bertrand > 1.1 {
        Trend::Convergent
    } else {
        Trend::Inconclusive
    };
    let (is_osgood, decided_by) = match trend {
        Trend::Divergent => (true, "trend"),
        Trend::Convergent => (false, "trend"),
        Trend::Inconclusive => (threshold_exceeded, "threshold"),
    };
    Ok(OsgoodVerdict {
        is_osgood,
        threshold,
        r_probe,
        floor,
        shell_integrals,
        partial_sums,
        threshold_exceeded,
        raabe,
        bertrand,
        trend,
        decided_by: decided_by.to_string(),
    })
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be positive and finite, got {v}")))
    }
}

/// `G(r) = ∫_{r0}^{r} ds / ω_V(s + λ ω_η(s))`, signed.
pub fn eval_g(c: &ComposedModulus, r0: f64, r: f64) -> Result<f64> {
    check_positive("r0", r0)?;
    check_positive("r", r)?;
    c.integrate_log(r0.ln(), r.ln(), G_TOLERANCE)
}

/// Finds `v` with `∫_{v_ref}^{v} h = level`, for a positive integrand `h`.
///
/// `v_floor` bounds the downward search; reaching it without crossing the level
/// reports the value of the integral at the floor.
fn solve_level<F>(h: F, v_ref: f64, level: f64, v_floor: f64, tol: f64) -> std::result::Result<f64, LevelError>
where
    F: Fn(f64) -> f64 + Copy,
{
    let piece = |a: f64, b: f64| -> std::result::Result<f64, LevelError> {
        integrate(h, a, b, STEP_TOLERANCE).map(|r| r.value).map_err(LevelError::Other)
    };
    if level == 0.0 {
        return Ok(v_ref);
    }
    // (lo, value at lo) and hi with value(hi) >= level
    let (mut lo, mut g_lo, mut hi);
    if level > 0.0 {
        lo = v_ref;
        g_lo = 0.0;
        let mut step = 1.0;
        loop {
            let cand = lo + step;
            if cand > 710.0 {
                return Err(LevelError::Other(Error::Domain(format!("level {level} not reached below r = e^710"))));
            }
            let inc = piece(lo, cand)?;
            if g_lo + inc >= level {
                hi = cand;
                break;
            }
            lo = cand;
            g_lo += inc;
            step *= 2.0;
        }
    } else {
        hi = v_ref;
        let mut g_hi = 0.0;
        let mut step = 1.0;
        loop {
            let cand = (hi - step).max(v_floor);
            let dec = piece(cand, hi)?;
            if g_hi - dec <= level {
                lo = cand;
                g_lo = g_hi - dec;
                break;
            }
            if cand <= v_floor {
                return Err(LevelError::BelowFloor(g_hi - dec));
            }
            hi = cand;
            g_hi -= dec;
            step *= 2.0;
        }
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return Ok(mid);
        }
        let g_mid = g_lo + piece(lo, mid)?;
        if (g_mid - level).abs() <= tol {
            return Ok(mid);
        }
        if g_mid < level {
            lo = mid;
            g_lo = g_mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

enum LevelError {
    BelowFloor(f64),
    Other(Error),
}

/// Inverse of [`eval_g`]: the `r > 0` with `G(r) = g`.
pub fn invert_g(c: &ComposedModulus, r0: f64, g: f64) -> Result<f64> {
    check_positive("r0", r0)?;
    if !g.is_finite() {
        return Err(Error::Domain(format!("level must be finite, got {g}")));
    }
    let bad = Cell::new(None);
    let result = {
        let f = c.log_integrand(&bad);
        solve_level(&f, r0.ln(), g, LN_FLOOR, 1e-11)
    };
    if let Some(s) = bad.get() {
        return Err(Error::DegenerateModulus { s });
    }
    match result {
        Ok(u) => Ok(u.exp()),
        Err(LevelError::BelowFloor(floor_value)) => Err(Error::Range { g, floor_value }),
        Err(LevelError::Other(e)) => Err(e),
    }
}

/// Comparison function for the forced inequality: `H(r) = ∫_{r0}^{r} ds / (ω(s) + M)`,
/// integrated in `v = ln(s + M)`.
struct ForcedComparison<'a> {
    c: &'a ComposedModulus,
    forcing: f64,
}

impl ForcedComparison<'_> {
    fn integrand(&self) -> impl Fn(f64) -> f64 + Copy + '_ {
        move |v: f64| {
            let shifted = v.exp();
            let s = (shifted - self.forcing).max(0.0);
            shifted / (self.c.value(s) + self.forcing)
        }
    }
}

/// Bound on `Q(t)` for any `Q` with `Q(0) = 0` and `Q' ≤ a (ω_comp(Q) + M)`.
///
/// Computed as `H⁻¹(H(0) + a t)` with `H(r) = ∫_{r0}^{r} ds / (ω_comp(s) + M)`; the
/// result does not depend on `r0`. With `M = 0` the bound is `0` for Osgood
/// composites and the call is refused otherwise.
pub fn bihari_bound(c: &ComposedModulus, a: f64, forcing: f64, t: f64) -> Result<f64> {
    bihari_bound_with_reference(c, a, forcing, t, 1.0)
}

pub fn bihari_bound_with_reference(c: &ComposedModulus, a: f64, forcing: f64, t: f64, r0: f64) -> Result<f64> {
    check_positive("a", a)?;
    check_positive("r0", r0)?;
    if !(forcing.is_finite() && forcing >= 0.0) {
        return Err(Error::Domain(format!("forcing M must be nonnegative, got {forcing}")));
    }
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::Domain(format!("time must be nonnegative, got {t}")));
    }
    if forcing == 0.0 {
        let verdict = check_osgood(c, OsgoodOptions::default())?;
        if verdict.is_osgood {
            return Ok(0.0);
        }
        return Err(Error::CertificationRefused(format!(
            "composite {} ∘ (id + {}·{}) fails the Osgood condition; no uniqueness modulus exists",
            c.omega_v, c.lambda, c.omega_eta
        )));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let cmp = ForcedComparison { c, forcing };
    let h = cmp.integrand();
    let v_zero = forcing.ln();
    let v_ref = (r0 + forcing).ln();
    let h_at_zero = -integrate(h, v_zero, v_ref, G_TOLERANCE)?.value;
    let level = h_at_zero + a * t;
    let tol = 1e-13 * level.abs().max(1.0);
    match solve_level(h, v_ref, level, v_zero, tol) {
        Ok(v) => Ok((v.exp() - forcing).max(0.0)),
        Err(LevelError::BelowFloor(_)) => Ok(0.0),
        Err(LevelError::Other(e)) => Err(e),
    }
}

/// How a scalar perturbation size `ε` becomes the forcing `M`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Forcing {
    /// `M(ε) = ε`.
    Identity,
    /// `M(ε) = ω_V(‖η‖ ε) + ω_V(λ ε) + ε`, which dominates the three-term budget for
    /// any split of `ε` into datum, kernel and field parts.
    Aggregate { eta_sup: f64 },
}

/// The stability modulus `ε ↦ Ω(ε)` over a fixed horizon.
#[derive(Clone, Debug)]
pub struct StabilityModulus {
    pub composite: ComposedModulus,
    pub a: f64,
    pub horizon: f64,
    pub forcing: Forcing,
}

impl StabilityModulus {
    pub fn forcing_for(&self, eps: f64) -> f64 {
        match self.forcing {
            Forcing::Identity => eps,
            Forcing::Aggregate { eta_sup } => {
                let wv = &self.composite.omega_v;
                wv.value(eta_sup * eps) + wv.value(self.composite.lambda * eps) + eps
            }
        }
    }

    pub fn eval(&self, eps: f64) -> Result<f64> {
        if !(eps.is_finite() && eps >= 0.0) {
            return Err(Error::Domain(format!("ε must be nonnegative, got {eps}")));
        }
        bihari_bound(&self.composite, self.a, self.forcing_for(eps), self.horizon)
    }
}

/// Builds `Ω`; refused unless the composite is Osgood.
pub fn stability_modulus(c: &ComposedModulus, a: f64, horizon: f64, forcing: Forcing) -> Result<StabilityModulus> {
    check_positive("a", a)?;
    check_positive("horizon", horizon)?;
    let verdict = check_osgood(c, OsgoodOptions::default())?;
    if !verdict.is_osgood {
        return Err(Error::CertificationRefused(format!(
            "composite {} with λ = {} is not Osgood",
            c.omega_v, c.lambda
        )));
    }
    Ok(StabilityModulus { composite: c.clone(), a, horizon, forcing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::E;

    fn lin(l: f64) -> ModulusSpec {
        ModulusSpec::linear(l).unwrap()
    }

    fn identity_composite() -> ComposedModulus {
        ComposedModulus::plain(lin(1.0))
    }

    fn lin_lin() -> ComposedModulus {
        ComposedModulus::new(lin(1.0), lin(1.0), 1.0).unwrap()
    }

    #[test]
    fn eval_examples() {
        assert_eq!(lin(2.0).eval(0.5).unwrap(), 1.0);
        for m in [
            lin(3.0),
            ModulusSpec::power(0.3, 2.0).unwrap(),
            ModulusSpec::log_linear(1.0).unwrap(),
            ModulusSpec::log_log(1.0).unwrap(),
            ModulusSpec::tabulated(vec![(1.0, 1.0), (2.0, 1.5)]).unwrap(),
        ] {
            assert_eq!(m.eval(0.0).unwrap(), 0.0, "{m}");
        }
        let ll = ModulusSpec::log_linear(1.0).unwrap();
        let r = (-1.0f64).exp();
        assert!((ll.eval(r).unwrap() - r).abs() < 1e-15);
        // r|log r| at r = 0.1
        assert!((ll.eval(0.1).unwrap() - 0.230_258_509_299_404_57).abs() < 1e-15);
    }

    #[test]
    fn negative_argument_is_domain_error() {
        assert!(matches!(lin(1.0).eval(-1e-3), Err(Error::Domain(_))));
    }

    #[test]
    fn tabulated_interpolates_and_extends_with_last_slope() {
        let m = ModulusSpec::tabulated(vec![(0.0, 0.0), (1.0, 2.0), (3.0, 3.0)]).unwrap();
        assert_eq!(m.value(0.5), 1.0);
        assert_eq!(m.value(2.0), 2.5);
        assert_eq!(m.value(5.0), 4.0);
    }

    #[test]
    fn tabulated_rejects_convex_knots() {
        let err = ModulusSpec::tabulated(vec![(1.0, 1.0), (2.0, 3.0)]).unwrap_err();
        assert!(err.to_string().contains("concave"));
    }

    #[test]
    fn log_families_reject_caps_beyond_monotone_range() {
        assert!(ModulusSpec::new(ModulusFamily::LogLinear, 1.0, Some(0.5), Extension::Tangent).is_err());
        assert!(ModulusSpec::new(ModulusFamily::LogLog, 1.0, Some(0.3), Extension::Tangent).is_err());
        let capped = ModulusSpec::new(ModulusFamily::LogLinear, 1.0, Some(0.1), Extension::Tangent).unwrap();
        // tangent slope at 0.1 is ln 10 - 1
        let expected = 0.1 * 10f64.ln() + (10f64.ln() - 1.0) * 0.4;
        assert!((capped.value(0.5) - expected).abs() < 1e-14);
        assert!(capped.shape_violations().is_empty());
    }

    #[test]
    fn catalog_satisfies_shape_invariants() {
        for m in [
            lin(0.5),
            ModulusSpec::power(0.5, 1.0).unwrap(),
            ModulusSpec::log_linear(2.0).unwrap(),
            ModulusSpec::log_log(1.0).unwrap(),
            ModulusSpec::tabulated(vec![(0.1, 0.3), (1.0, 0.9), (4.0, 1.2)]).unwrap(),
            ModulusSpec::zero(),
        ] {
            assert!(m.shape_violations().is_empty(), "{m}: {:?}", m.shape_violations());
        }
        assert!(!ModulusSpec::zero().is_positive());
        assert!(ModulusSpec::log_log(1.0).unwrap().is_positive());
    }

    #[test]
    fn json_round_trip() {
        let m = ModulusSpec::power(0.5, 2.0).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        assert_eq!(text, r#"{"family":"power","scale":2.0,"alpha":0.5}"#);
        let back: ModulusSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        let bad = serde_json::from_str::<ModulusSpec>(r#"{"family":"cubic"}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn osgood_examples() {
        let v = check_osgood(&lin_lin(), OsgoodOptions::default()).unwrap();
        assert!(v.is_osgood);
        assert!(v.threshold_exceeded);
        let sqrt = ComposedModulus::new(ModulusSpec::power(0.5, 1.0).unwrap(), lin(1.0), 1.0).unwrap();
        let v = check_osgood(&sqrt, OsgoodOptions::default()).unwrap();
        assert!(!v.is_osgood);
        assert_eq!(v.trend, Trend::Convergent);
        // ∫_0^{1/16} ds / sqrt(2s) = sqrt(2 · 1/16)
        let total = *v.partial_sums.last().unwrap();
        assert!((total - (0.125f64).sqrt()).abs() < 1e-9, "{total}");
        let ll = ComposedModulus::new(ModulusSpec::log_linear(1.0).unwrap(), lin(1.0), 1.0).unwrap();
        let v = check_osgood(&ll, OsgoodOptions::default()).unwrap();
        assert!(v.is_osgood);
        assert!(v.partial_sums.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn osgood_degenerate_composite_is_error() {
        let c = ComposedModulus::plain(ModulusSpec::zero());
        assert!(matches!(check_osgood(&c, OsgoodOptions::default()), Err(Error::DegenerateModulus { .. })));
    }

    #[test]
    fn g_closed_forms() {
        let g = eval_g(&identity_composite(), 1.0, E).unwrap();
        assert!((g - 1.0).abs() < 1e-12);
        assert_eq!(eval_g(&lin_lin(), 0.7, 0.7).unwrap(), 0.0);
        let g = eval_g(&lin_lin(), 1.0, 4.0).unwrap();
        assert!((g - 0.5 * 4f64.ln()).abs() < 1e-12);
        assert!((g - std::f64::consts::LN_2).abs() < 1e-12);
        // negative below the reference point
        assert!(eval_g(&lin_lin(), 1.0, 0.5).unwrap() < 0.0);
        assert!(eval_g(&lin_lin(), 0.0, 1.0).is_err());
        assert!(eval_g(&lin_lin(), 1.0, -1.0).is_err());
    }

    #[test]
    fn invert_examples() {
        let r = invert_g(&identity_composite(), 1.0, 1.0).unwrap();
        assert!((r - E).abs() < 1e-9);
        assert_eq!(invert_g(&lin_lin(), 1.0, 0.0).unwrap(), 1.0);
        let r = invert_g(&lin_lin(), 1.0, std::f64::consts::LN_2).unwrap();
        assert!((r - 4.0).abs() < 1e-5);
        let r = invert_g(&lin_lin(), 1.0, -3.0).unwrap();
        assert!((r - (-6.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn invert_below_range_reports_g_zero_plus() {
        let sqrt = ComposedModulus::plain(ModulusSpec::power(0.5, 1.0).unwrap());
        // G(0+) = -∫_0^1 s^{-1/2} ds = -2
        match invert_g(&sqrt, 1.0, -2.5) {
            Err(Error::Range { floor_value, .. }) => assert!((floor_value + 2.0).abs() < 1e-6),
            other => panic!("expected range error, got {other:?}"),
        }
        let r = invert_g(&sqrt, 1.0, -1.0).unwrap();
        assert!((r - 0.25).abs() < 1e-9);
    }

    #[test]
    fn bihari_examples() {
        let c = identity_composite();
        let b = bihari_bound(&c, 1.0, 0.1, 1.0).unwrap();
        assert!((b - 0.1 * (E - 1.0)).abs() < 1e-9, "{b}");
        assert!((b - 0.171_828).abs() < 1e-6);
        assert_eq!(bihari_bound(&c, 1.0, 0.0, 5.0).unwrap(), 0.0);
        assert_eq!(bihari_bound(&lin_lin(), 3.0, 0.0, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn bihari_refuses_non_osgood_without_forcing() {
        let c = ComposedModulus::plain(ModulusSpec::power(0.5, 1.0).unwrap());
        assert!(matches!(bihari_bound(&c, 1.0, 0.0, 1.0), Err(Error::CertificationRefused(_))));
        // with forcing the bound exists
        assert!(bihari_bound(&c, 1.0, 0.01, 1.0).unwrap() > 0.0);
    }

    #[test]
    fn bihari_is_independent_of_reference_point() {
        let c = ComposedModulus::new(ModulusSpec::log_linear(2.0).unwrap(), lin(1.0), 3.0).unwrap();
        let base = bihari_bound_with_reference(&c, 2.0, 1e-3, 1.0, 1.0).unwrap();
        for r0 in [1e-4, 0.1, 10.0, 1e3] {
            let other = bihari_bound_with_reference(&c, 2.0, 1e-3, 1.0, r0).unwrap();
            assert!((other - base).abs() <= 1e-9 * base, "r0 = {r0}: {other} vs {base}");
        }
    }

    #[test]
    fn stability_modulus_examples() {
        let om = stability_modulus(&identity_composite(), 1.0, 1.0, Forcing::Identity).unwrap();
        assert_eq!(om.eval(0.0).unwrap(), 0.0);
        for eps in [1e-3, 1e-2, 0.5] {
            let v = om.eval(eps).unwrap();
            assert!((v - eps * (E - 1.0)).abs() <= 1e-9 * eps, "{eps}: {v}");
        }
        let grid: Vec<f64> = (0..20).map(|j| 2f64.powi(-j)).collect();
        let vals: Vec<f64> = grid.iter().map(|&e| om.eval(e).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0]));
        assert!(*vals.last().unwrap() < 1e-5);
    }

    #[test]
    fn stability_modulus_requires_osgood() {
        let c = ComposedModulus::plain(ModulusSpec::power(0.5, 1.0).unwrap());
        assert!(matches!(stability_modulus(&c, 1.0, 1.0, Forcing::Identity), Err(Error::CertificationRefused(_))));
    }

    fn any_modulus() -> impl Strategy<Value = ModulusSpec> {
        prop_oneof![
            (0.1f64..5.0).prop_map(|l| ModulusSpec::linear(l).unwrap()),
            (0.1f64..1.0, 0.1f64..5.0).prop_map(|(a, s)| ModulusSpec::power(a, s).unwrap()),
            (0.1f64..5.0).prop_map(|s| ModulusSpec::log_linear(s).unwrap()),
            (0.1f64..5.0).prop_map(|s| ModulusSpec::log_log(s).unwrap()),
            (0.1f64..3.0, 0.0f64..1.0, 0.0f64..1.0).prop_map(|(s1, f2, f3)| {
                let s2 = s1 * f2;
                let s3 = s2 * f3;
                ModulusSpec::tabulated(vec![(0.5, 0.5 * s1), (1.5, 0.5 * s1 + s2), (3.0, 0.5 * s1 + s2 + 1.5 * s3)])
                    .unwrap()
            }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn subadditive(m in any_modulus(), r1 in 0.0f64..3.0, r2 in 0.0f64..3.0) {
            let lhs = (m.value(r1) - m.value(r2)).abs();
            prop_assert!(lhs <= m.value((r1 - r2).abs()) + 1e-10);
        }

        #[test]
        fn g_strictly_increasing(lambda in 0.0f64..5.0, r1 in 1e-4f64..10.0, f in 1.001f64..3.0) {
            let c = ComposedModulus::new(ModulusSpec::log_linear(1.0).unwrap(), lin(1.0), lambda).unwrap();
            let r2 = r1 * f;
            prop_assert!(eval_g(&c, 1.0, r1).unwrap() < eval_g(&c, 1.0, r2).unwrap());
        }
    }

    #[test]
    fn osgood_catalog_over_lambdas() {
        for lambda in [0.5, 1.0, 10.0] {
            for (m, expected) in [
                (lin(1.0), true),
                (ModulusSpec::power(0.5, 1.0).unwrap(), false),
                (ModulusSpec::log_linear(1.0).unwrap(), true),
                (ModulusSpec::log_log(1.0).unwrap(), true),
            ] {
                let c = ComposedModulus::new(m.clone(), lin(1.0), lambda).unwrap();
                let v = check_osgood(&c, OsgoodOptions::default()).unwrap();
                assert_eq!(v.is_osgood, expected, "{m} λ = {lambda}: bertrand {}", v.bertrand);
            }
        }
    }

    #[test]
    fn invert_after_eval_is_identity_on_log_grid() {
        let composites = [
            lin_lin(),
            ComposedModulus::new(ModulusSpec::log_linear(1.0).unwrap(), lin(2.0), 0.5).unwrap(),
            ComposedModulus::new(ModulusSpec::power(0.7, 1.0).unwrap(), lin(1.0), 1.0).unwrap(),
        ];
        for c in &composites {
            for j in 0..15 {
                let r = 10f64.powf(-5.0 + 0.5 * j as f64);
                let g = eval_g(c, 1.0, r).unwrap();
                let back = invert_g(c, 1.0, g).unwrap();
                assert!((back - r).abs() <= 1e-6 * r, "{c:?} r = {r}: {back}");
            }
        }
    }
}
