//! Velocity fields `V^i(t, x, u)` and the non-local field `b^i(t,x) = V^i(t, x, ρ∗η^i(t,x))`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::kernels::{dist, norm, KernelVec, SupDistance, SAMPLE_TOL};
use crate::measures::DiscreteMeasureVec;
use crate::moduli::ModulusSpec;
use crate::sampling::{bump_nodes, halton, AxisBox};

/// `sup_s |s(1-s²)e^{-s²/2}|`, attained at `s² = 2 + √3`.
pub const ATTRACT_REPEL_PEAK: f64 = 0.816_691_450_860_391_2;
/// `sup_s |d/ds s(1-s²)e^{-s²/2}|`, attained at `s² = 4 - √7`.
pub const ATTRACT_REPEL_SLOPE: f64 = 1.312_362_830_519_112_6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// `clamp(s, -sat, sat)`.
    #[default]
    Linear,
    /// `sat · e · sign(s) · h(min(|s|, 1/e))` with `h(s) = s ln(1/s)`: log-Lipschitz at 0.
    Loglip,
}

impl Profile {
    #[inline]
    fn apply(self, s: f64, sat: f64) -> f64 {
        match self {
            Profile::Linear => s.clamp(-sat, sat),
            Profile::Loglip => {
                let a = s.abs().min((-1.0f64).exp());
                if a == 0.0 {
                    0.0
                } else {
                    sat * std::f64::consts::E * s.signum() * (-a * a.ln())
                }
            }
        }
    }
}

/// A velocity preset, serialized as `{"family": ..., "params": {...}}`.
///
/// `gain` matrices are `d × k`, row-major, and map the convolution vector `u` into
/// the `d` velocity components before saturation at `sat`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldPreset {
    Constant {
        c: Vec<f64>,
    },
    LinearU {
        gain: Vec<f64>,
        sat: f64,
        #[serde(default)]
        profile: Profile,
    },
    /// Radial `strength · L · g(|x|/L) x̂` with `g(s) = s(1-s²)e^{-s²/2}`, plus the saturated `u` term.
    AttractRepel {
        strength: f64,
        length: f64,
        gain: Vec<f64>,
        sat: f64,
    },
    /// `amplitude · tanh(x_{2 mod d} / L)` in the first component, plus the saturated `u` term.
    Shear {
        amplitude: f64,
        length: f64,
        gain: Vec<f64>,
        sat: f64,
    },
    /// `(1 + depth · sin(freq · t)) · base`.
    TimeMod {
        base: Box<FieldPreset>,
        freq: f64,
        depth: f64,
    },
    /// `inner` averaged over a bump of radius `width` in the joint `(x, u)` variable.
    Mollified {
        inner: Box<FieldPreset>,
        width: f64,
        #[serde(default = "default_nodes")]
        nodes: usize,
    },
}

fn default_nodes() -> usize {
    5
}

#[inline]
fn saturated_u(gain: &[f64], u: &[f64], sat: f64, profile: Profile, c: usize) -> f64 {
    let k = u.len();
    let s: f64 = gain[c * k..(c + 1) * k].iter().zip(u).map(|(g, v)| g * v).sum();
    profile.apply(s, sat)
}

impl FieldPreset {
    pub fn name(&self) -> &'static str {
        match self {
            FieldPreset::Constant { .. } => "constant",
            FieldPreset::LinearU { .. } => "linear_u",
            FieldPreset::AttractRepel { .. } => "attract_repel",
            FieldPreset::Shear { .. } => "shear",
            FieldPreset::TimeMod { .. } => "time_mod",
            FieldPreset::Mollified { .. } => "mollified",
        }
    }

    pub fn validate(&self, d: usize, k: usize) -> Vec<String> {
        let mut out = Vec::new();
        let name = self.name();
        let mut positive = |what: &str, v: f64| {
            if !(v.is_finite() && v > 0.0) {
                out.push(format!("{name} field: {what} must be positive, got {v}"));
            }
        };
        let gain_len = |g: &Vec<f64>| g.len() == d * k && g.iter().all(|v| v.is_finite());
        match self {
            FieldPreset::Constant { c } => {
                if c.len() != d || c.iter().any(|v| !v.is_finite()) {
                    out.push(format!("constant field: c needs {d} finite components, got {c:?}"));
                }
            }
            FieldPreset::LinearU { gain, sat, .. } => {
                positive("sat", *sat);
                if !gain_len(gain) {
                    out.push(format!("linear_u field: gain needs d·k = {} finite entries", d * k));
                }
            }
            FieldPreset::AttractRepel { strength, length, gain, sat }
            | FieldPreset::Shear { amplitude: strength, length, gain, sat } => {
                positive("length", *length);
                if *sat < 0.0 || !sat.is_finite() {
                    out.push(format!("{name} field: sat must be nonnegative, got {sat}"));
                }
                if !strength.is_finite() {
                    out.push(format!("{name} field: strength must be finite"));
                }
                if !gain_len(gain) {
                    out.push(format!("{name} field: gain needs d·k = {} finite entries", d * k));
                }
            }
            FieldPreset::TimeMod { base, freq, depth } => {
                if !freq.is_finite() {
                    out.push("time_mod field: freq must be finite".into());
                }
                if !(depth.is_finite() && *depth >= 0.0 && *depth < 1.0) {
                    out.push(format!("time_mod field: depth must lie in [0, 1), got {depth}"));
                }
                out.extend(base.validate(d, k));
            }
            FieldPreset::Mollified { inner, width, nodes } => {
                positive("width", *width);
                if *nodes == 0 {
                    out.push("mollified field: nodes must be at least 1".into());
                }
                out.extend(inner.validate(d, k));
            }
        }
        out
    }

    /// Writes `V(t, x, u)` into `out` (length `d`).
    pub fn eval_into(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        let d = x.len();
        match self {
            FieldPreset::Constant { c } => out.copy_from_slice(c),
            FieldPreset::LinearU { gain, sat, profile } => {
                for (c, o) in out.iter_mut().enumerate() {
                    *o = saturated_u(gain, u, *sat, *profile, c);
                }
            }
            FieldPreset::AttractRepel { strength, length, gain, sat } => {
                let r = norm(x);
                let radial = if r == 0.0 {
                    0.0
                } else {
                    let s = r / length;
                    strength * length * s * (1.0 - s * s) * (-0.5 * s * s).exp() / r
                };
                for (c, o) in out.iter_mut().enumerate() {
                    *o = radial * x[c] + saturated_u(gain, u, *sat, Profile::Linear, c);
                }
            }
            FieldPreset::Shear { amplitude, length, gain, sat } => {
                for (c, o) in out.iter_mut().enumerate() {
                    *o = saturated_u(gain, u, *sat, Profile::Linear, c);
                }
                out[0] += amplitude * (x[1 % d] / length).tanh();
            }
            FieldPreset::TimeMod { base, freq, depth } => {
                base.eval_into(t, x, u, out);
                let f = 1.0 + depth * (freq * t).sin();
                for o in out.iter_mut() {
                    *o *= f;
                }
            }
            FieldPreset::Mollified { inner, width, nodes } => {
                let k = u.len();
                let mut xs = vec![0.0; d];
                let mut us = vec![0.0; k];
                let mut tmp = vec![0.0; d];
                out.iter_mut().for_each(|o| *o = 0.0);
                for (xi, w) in bump_nodes(d + k, *nodes) {
                    for c in 0..d {
                        xs[c] = x[c] - width * xi[c];
                    }
                    for j in 0..k {
                        us[j] = u[j] - width * xi[d + j];
                    }
                    inner.eval_into(t, &xs, &us, &mut tmp);
                    for (o, v) in out.iter_mut().zip(&tmp) {
                        *o += w * v;
                    }
                }
            }
        }
    }

    /// Closed-form bound on `|V|` (Euclidean).
    pub fn sup(&self, d: usize) -> f64 {
        let sat_part = |sat: f64| sat * (d as f64).sqrt();
        match self {
            FieldPreset::Constant { c } => norm(c),
            FieldPreset::LinearU { sat, .. } => sat_part(*sat),
            FieldPreset::AttractRepel { strength, length, sat, .. } => {
                strength.abs() * length * ATTRACT_REPEL_PEAK + sat_part(*sat)
            }
            FieldPreset::Shear { amplitude, sat, .. } => amplitude.abs() + sat_part(*sat),
            FieldPreset::TimeMod { base, depth, .. } => (1.0 + depth) * base.sup(d),
            FieldPreset::Mollified { inner, .. } => inner.sup(d),
        }
    }

    /// `sup |self - other|` when a closed form is known.
    pub fn closed_sup_distance(&self, other: &FieldPreset) -> Option<f64> {
        if self == other {
            return Some(0.0);
        }
        match (self, other) {
            (FieldPreset::Constant { c: a }, FieldPreset::Constant { c: b }) => Some(dist(a, b)),
            (
                FieldPreset::AttractRepel { strength: s1, length: l1, gain: g1, sat: t1 },
                FieldPreset::AttractRepel { strength: s2, length: l2, gain: g2, sat: t2 },
            ) if l1 == l2 && g1 == g2 && t1 == t2 => Some((s1 - s2).abs() * l1 * ATTRACT_REPEL_PEAK),
            (
                FieldPreset::Shear { amplitude: a1, length: l1, gain: g1, sat: t1 },
                FieldPreset::Shear { amplitude: a2, length: l2, gain: g2, sat: t2 },
            ) if l1 == l2 && g1 == g2 && t1 == t2 => Some((a1 - a2).abs()),
            _ => None,
        }
    }
}

/// `V = (V^1, …, V^k)` with declared bound `‖V‖` and modulus `ω_V`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityFieldSpec {
    pub dim: usize,
    pub presets: Vec<FieldPreset>,
    pub sup_bound: f64,
    pub modulus: ModulusSpec,
}

/// File form: either `{"family", "params", ...}` shared by all species or `{"species": [...], ...}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityDecl {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub species: Option<Vec<FieldPreset>>,
    pub sup_bound: f64,
    pub modulus: ModulusSpec,
}

impl VelocityFieldSpec {
    pub fn new(dim: usize, presets: Vec<FieldPreset>, sup_bound: f64, modulus: ModulusSpec) -> Result<Self> {
        let k = presets.len();
        let mut problems = Vec::new();
        if k == 0 {
            problems.push("velocity needs at least one species".into());
        }
        if !(sup_bound.is_finite() && sup_bound >= 0.0) {
            problems.push(format!("velocity sup_bound must be nonnegative, got {sup_bound}"));
        }
        for (i, p) in presets.iter().enumerate() {
            for v in p.validate(dim, k) {
                problems.push(format!("species {i}: {v}"));
            }
        }
        if problems.is_empty() {
            for (i, p) in presets.iter().enumerate() {
                if p.sup(dim) > sup_bound * (1.0 + 1e-12) + SAMPLE_TOL {
                    problems.push(format!(
                        "species {i}: {} field reaches {} above the declared sup_bound {sup_bound}",
                        p.name(),
                        p.sup(dim)
                    ));
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        Ok(VelocityFieldSpec { dim, presets, sup_bound, modulus })
    }

    pub fn uniform(dim: usize, k: usize, preset: FieldPreset, sup_bound: f64, modulus: ModulusSpec) -> Result<Self> {
        Self::new(dim, vec![preset; k], sup_bound, modulus)
    }

    pub fn from_decl(decl: VelocityDecl, dim: usize, k: usize) -> Result<Self> {
        let presets = match (decl.family, decl.species) {
            (Some(family), None) => {
                let obj = serde_json::json!({ "family": family, "params": decl.params.unwrap_or(Value::Object(Default::default())) });
                let preset: FieldPreset = serde_json::from_value(obj).map_err(|e| {
                    if e.to_string().contains("unknown variant") {
                        Error::UnknownPreset(format!("velocity family \"{family}\""))
                    } else {
                        Error::Parse(format!("velocity params: {e}"))
                    }
                })?;
                vec![preset; k]
            }
            (None, Some(list)) => {
                if list.len() != k {
                    return Err(Error::Validation(vec![format!(
                        "velocity lists {} species presets, expected k = {k}",
                        list.len()
                    )]));
                }
                list
            }
            _ => {
                return Err(Error::Validation(vec![
                    "velocity needs exactly one of \"family\"/\"params\" or \"species\"".into(),
                ]))
            }
        };
        Self::new(dim, presets, decl.sup_bound, decl.modulus)
    }

    pub fn to_decl(&self) -> VelocityDecl {
        VelocityDecl {
            family: None,
            params: None,
            species: Some(self.presets.clone()),
            sup_bound: self.sup_bound,
            modulus: self.modulus.clone(),
        }
    }

    pub fn k(&self) -> usize {
        self.presets.len()
    }

    #[inline]
    pub fn eval_into(&self, i: usize, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.presets[i].eval_into(t, x, u, out)
    }

    pub fn eval(&self, i: usize, t: f64, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(i, t, x, u, &mut out);
        out
    }

    /// Sampled checks of `|V| ≤ ‖V‖` and `|V(t,x,u) - V(t,y,v)| ≤ ω_V(|x-y| + |u-v|_1)`.
    pub fn sampled_violations(&self, region: &FieldRegion, samples: u64) -> Vec<String> {
        let (d, k) = (self.dim, self.k());
        let mut out = Vec::new();
        let dims = 2 * (d + k) + 1;
        for i in 0..k {
            for s in 1..=samples {
                let h = halton(s, dims);
                let (x, u, t) = region.place(&h[..d + k + 1], d, k);
                let scale = 10f64.powf(-6.0 * h[d + k]);
                let y: Vec<f64> =
                    x.iter().zip(&h[d + k + 1..d + k + 1 + d]).map(|(a, v)| a + scale * (2.0 * v - 1.0)).collect();
                let v: Vec<f64> = u.iter().zip(&h[d + k + 1 + d..]).map(|(a, w)| a + scale * (2.0 * w - 1.0)).collect();
                let (a, b) = (self.eval(i, t, &x, &u), self.eval(i, t, &y, &v));
                if norm(&a) > self.sup_bound + SAMPLE_TOL {
                    out.push(format!("species {i}: |V| = {} exceeds sup_bound at x = {x:?}, u = {u:?}", norm(&a)));
                    break;
                }
                let gap = dist(&x, &y) + u.iter().zip(&v).map(|(p, q)| (p - q).abs()).sum::<f64>();
                if dist(&a, &b) > self.modulus.value(gap) + SAMPLE_TOL {
                    out.push(format!(
                        "species {i}: V violates ω_V = {} between (x, u) = ({x:?}, {u:?}) and ({y:?}, {v:?})",
                        self.modulus
                    ));
                    break;
                }
            }
        }
        out
    }
}

/// Domain of a field comparison: an `x` box, the `u` cube `[-u_half, u_half]^k` and `[0, horizon]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldRegion {
    pub x: AxisBox,
    pub u_half: f64,
    pub horizon: f64,
}

impl FieldRegion {
    /// `u_half` defaults to the reachable range `‖ρ̄‖ · ‖η‖`.
    pub fn reachable(x: AxisBox, mass: f64, eta_sup: f64, horizon: f64) -> Self {
        FieldRegion { x, u_half: mass * eta_sup, horizon }
    }

    fn place(&self, unit: &[f64], d: usize, k: usize) -> (Vec<f64>, Vec<f64>, f64) {
        let x = self.x.place(&unit[..d]);
        let u = unit[d..d + k].iter().map(|v| self.u_half * (2.0 * v - 1.0)).collect();
        (x, u, self.horizon * unit[d + k])
    }
}

/// `Σ_i sup |V^i - U^i|` over `region`, closed form where every species has one.
pub fn sup_distance_fields(
    v: &VelocityFieldSpec,
    w: &VelocityFieldSpec,
    region: &FieldRegion,
    n: u64,
) -> Result<SupDistance> {
    if v.dim != w.dim || v.k() != w.k() || region.x.dim() != v.dim {
        return Err(Error::Domain("fields and region disagree on d or k".into()));
    }
    let (d, k) = (v.dim, v.k());
    let mut value = 0.0;
    let mut sampled_total = 0.0;
    let mut exact = true;
    let (mut a, mut b) = (vec![0.0; d], vec![0.0; d]);
    for i in 0..k {
        let (p, q) = (&v.presets[i], &w.presets[i]);
        let mut sampled: f64 = 0.0;
        if p != q {
            for s in 1..=n {
                let (x, u, t) = region.place(&halton(s, d + k + 1), d, k);
                p.eval_into(t, &x, &u, &mut a);
                q.eval_into(t, &x, &u, &mut b);
                sampled = sampled.max(dist(&a, &b));
            }
        }
        sampled_total += sampled;
        match p.closed_sup_distance(q) {
            Some(c) => value += c,
            None => {
                exact = false;
                value += sampled;
            }
        }
    }
    Ok(SupDistance { value, exact, sampled: sampled_total, samples: n })
}

/// A time-indexed provider of measure snapshots.
pub trait MeasureSource {
    fn measure_at(&self, t: f64) -> Result<&DiscreteMeasureVec>;
}

/// One measure valid on a closed time interval.
#[derive(Clone, Debug)]
pub struct FrozenMeasure {
    pub measure: DiscreteMeasureVec,
    pub t0: f64,
    pub t1: f64,
}

impl MeasureSource for FrozenMeasure {
    fn measure_at(&self, t: f64) -> Result<&DiscreteMeasureVec> {
        if t >= self.t0 && t <= self.t1 {
            Ok(&self.measure)
        } else {
            Err(Error::TemporalDomain(t))
        }
    }
}

/// `b^i(t, x) = V^i(t, x, ρ(t) ∗ η^i(x))`.
pub struct NonlocalField<'a, S: MeasureSource + ?Sized> {
    pub velocity: &'a VelocityFieldSpec,
    pub kernels: &'a KernelVec,
    pub source: &'a S,
}

impl<S: MeasureSource + ?Sized> NonlocalField<'_, S> {
    pub fn eval(&self, i: usize, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let m = self.source.measure_at(t)?;
        let u = m.convolve_at(self.kernels, i, x);
        Ok(self.velocity.eval(i, t, x, &u))
    }

    /// Sampled check of `|b(t,x) - b(t,y)| ≤ a · ω_V(|x-y| + ‖ρ‖ ω_η(|x-y|))`; `a` defaults to `k`.
    pub fn verify_modulus(&self, t: f64, sample_pairs: u64, region: &AxisBox, a: Option<f64>) -> Result<ModulusCheck> {
        let m = self.source.measure_at(t)?;
        let mass = m.tv_norm().total;
        let k = self.velocity.k();
        let d = self.velocity.dim;
        let a = a.unwrap_or(k as f64);
        let mut max_ratio: f64 = 0.0;
        let mut violations = 0;
        let mut worst = None;
        for s in 1..=sample_pairs {
            let h = halton(s, 2 * d + 1);
            let x = region.place(&h[..d]);
            // half the pairs are local, half span the box
            let y = if s % 2 == 0 {
                region.place(&h[d..2 * d])
            } else {
                let scale = 10f64.powf(-6.0 * h[2 * d]);
                x.iter().zip(&h[d..2 * d]).map(|(p, v)| p + scale * (2.0 * v - 1.0)).collect()
            };
            let r = dist(&x, &y);
            let bound = a * self.velocity.modulus.value(r + mass * self.kernels.modulus.value(r));
            for i in 0..k {
                let lhs = dist(&self.eval(i, t, &x)?, &self.eval(i, t, &y)?);
                let ratio = if lhs == 0.0 {
                    0.0
                } else if bound == 0.0 {
                    f64::INFINITY
                } else {
                    lhs / bound
                };
                if ratio > max_ratio {
                    max_ratio = ratio;
                    worst = Some((i, x.clone(), y.clone()));
                }
                if lhs > bound + SAMPLE_TOL {
                    violations += 1;
                }
            }
        }
        Ok(ModulusCheck { a, mass, pairs: sample_pairs, max_ratio, violations, worst })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModulusCheck {
    pub a: f64,
    pub mass: f64,
    pub pairs: u64,
    pub max_ratio: f64,
    pub violations: usize,
    pub worst: Option<(usize, Vec<f64>, Vec<f64>)>,
}

impl ModulusCheck {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Kernel;

    fn lin(l: f64) -> ModulusSpec {
        ModulusSpec::linear(l).unwrap()
    }

    #[test]
    fn attract_repel_constants() {
        let g = |s: f64| s * (1.0 - s * s) * (-0.5 * s * s).exp();
        let s = (2.0 + 3f64.sqrt()).sqrt();
        assert!((g(s).abs() - ATTRACT_REPEL_PEAK).abs() < 1e-14);
        let dg = |s: f64| (1.0 - 4.0 * s * s + s.powi(4)) * (-0.5 * s * s).exp();
        let s = (4.0 - 7f64.sqrt()).sqrt();
        assert!((dg(s).abs() - ATTRACT_REPEL_SLOPE).abs() < 1e-14);
    }

    #[test]
    fn loglip_profile_is_bounded_and_odd() {
        let p = Profile::Loglip;
        assert_eq!(p.apply(0.0, 1.0), 0.0);
        assert!((p.apply(1.0, 2.0) - 2.0).abs() < 1e-15);
        assert_eq!(p.apply(-0.1, 1.0), -p.apply(0.1, 1.0));
    }

    #[test]
    fn json_forms() {
        let decl: VelocityDecl = serde_json::from_str(
            r#"{"family":"constant","params":{"c":[1.0]},"sup_bound":1.0,"modulus":{"family":"linear","scale":1.0}}"#,
        )
        .unwrap();
        let v = VelocityFieldSpec::from_decl(decl, 1, 2).unwrap();
        assert_eq!(v.presets.len(), 2);
        let decl: VelocityDecl =
            serde_json::from_str(r#"{"family":"vortex","params":{},"sup_bound":1.0,"modulus":{"family":"linear"}}"#)
                .unwrap();
        assert!(matches!(VelocityFieldSpec::from_decl(decl, 1, 1), Err(Error::UnknownPreset(_))));
        let round: VelocityDecl = serde_json::from_str(&serde_json::to_string(&v.to_decl()).unwrap()).unwrap();
        assert_eq!(VelocityFieldSpec::from_decl(round, 1, 2).unwrap(), v);
    }

    #[test]
    fn declared_bound_is_checked() {
        let err = VelocityFieldSpec::uniform(1, 1, FieldPreset::Constant { c: vec![2.0] }, 1.0, lin(1.0)).unwrap_err();
        assert!(err.to_string().contains("sup_bound"));
    }

    #[test]
    fn eval_field_examples() {
        let kv = KernelVec::uniform(1, Kernel::Gaussian { sigma: 0.5, height: 1.5 }, lin(2.0), 1.5).unwrap();
        let mut m = DiscreteMeasureVec::empty(1, 1);
        m.push(0, &[0.3], 0.7);
        let src = FrozenMeasure { measure: m, t0: 0.0, t1: 1.0 };
        let c = VelocityFieldSpec::uniform(1, 1, FieldPreset::Constant { c: vec![0.25] }, 1.0, lin(1.0)).unwrap();
        let f = NonlocalField { velocity: &c, kernels: &kv, source: &src };
        assert_eq!(f.eval(0, 0.5, &[9.0]).unwrap(), vec![0.25]);
        assert!(matches!(f.eval(0, 1.5, &[0.0]), Err(Error::TemporalDomain(_))));

        let id = VelocityFieldSpec::uniform(
            1,
            1,
            FieldPreset::LinearU { gain: vec![1.0], sat: 10.0, profile: Profile::Linear },
            10.0,
            lin(1.0),
        )
        .unwrap();
        let f = NonlocalField { velocity: &id, kernels: &kv, source: &src };
        assert_eq!(f.eval(0, 0.0, &[0.3]).unwrap(), vec![0.7 * 1.5]);
        let empty = FrozenMeasure { measure: DiscreteMeasureVec::empty(1, 1), t0: 0.0, t1: 1.0 };
        let f = NonlocalField { velocity: &id, kernels: &kv, source: &empty };
        assert_eq!(f.eval(0, 0.0, &[0.3]).unwrap(), vec![0.0]);
    }

    #[test]
    fn closed_form_distances() {
        let region = FieldRegion { x: AxisBox::cube(1, 6.0), u_half: 1.0, horizon: 1.0 };
        let c1 = VelocityFieldSpec::uniform(1, 1, FieldPreset::Constant { c: vec![0.5] }, 1.0, lin(1.0)).unwrap();
        let c2 = VelocityFieldSpec::uniform(1, 1, FieldPreset::Constant { c: vec![-0.25] }, 1.0, lin(1.0)).unwrap();
        let d = sup_distance_fields(&c1, &c2, &region, 16).unwrap();
        assert!(d.exact);
        assert_eq!(d.value, 0.75);
        assert_eq!(sup_distance_fields(&c1, &c1, &region, 16).unwrap().value, 0.0);
    }
}
