//! Checks of the defining identities on computed trajectories: the weak form,
//! the localized mass identity and the behaviour of mollified approximations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{FieldPreset, VelocityFieldSpec};
use crate::flow::{integrate, FlowOptions, FlowTrajectory};
use crate::kernels::{Kernel, KernelVec};
use crate::scenario::ScenarioSpec;

/// Minimum number of grid steps inside the temporal support of a test function.
pub const MIN_STEPS_IN_SUPPORT: usize = 8;
/// Smoothness order of test-function ramps.
pub const RAMP_ORDER: u32 = 6;
/// Order of the mass-identity cutoff (quintic smoothstep).
pub const CUTOFF_ORDER: u32 = 3;

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

/// Smoothstep `S_p(s) = I_s(p, p)`: `S(0) = 0`, `S(1) = 1`, first `p - 1` derivatives vanish at both ends.
pub fn smoothstep(p: u32, s: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    if s >= 1.0 {
        return 1.0;
    }
    let n = 2 * p - 1;
    (p..=n).map(|j| binomial(n, j) * s.powi(j as i32) * (1.0 - s).powi((n - j) as i32)).sum()
}

/// `S_p'(s) = s^{p-1} (1-s)^{p-1} / B(p, p)`.
pub fn smoothstep_slope(p: u32, s: f64) -> f64 {
    if s <= 0.0 || s >= 1.0 {
        return 0.0;
    }
    // 1 / B(p, p) = (2p - 1)! / ((p - 1)!)² = (2p - 1) C(2p - 2, p - 1)
    let inv_beta = (2 * p - 1) as f64 * binomial(2 * p - 2, p - 1);
    inv_beta * (s * (1.0 - s)).powi(p as i32 - 1)
}

/// `sup S_p'`, attained at `s = 1/2`.
pub fn smoothstep_max_slope(p: u32) -> f64 {
    smoothstep_slope(p, 0.5)
}

/// Radial profile: 1 on `[0, inner]`, smooth ramp to 0 on `[inner, outer]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ramp {
    pub inner: f64,
    pub outer: f64,
    pub order: u32,
}

impl Ramp {
    pub fn value(&self, r: f64) -> f64 {
        1.0 - smoothstep(self.order, (r - self.inner) / (self.outer - self.inner))
    }

    pub fn slope(&self, r: f64) -> f64 {
        let w = self.outer - self.inner;
        -smoothstep_slope(self.order, (r - self.inner) / w) / w
    }

    pub fn max_slope(&self) -> f64 {
        smoothstep_max_slope(self.order) / (self.outer - self.inner)
    }
}

/// Spatial factor `β(x) = amplitude · ramp(|x - center|)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: Vec<f64>,
    pub ramp: Ramp,
    pub amplitude: f64,
}

impl Bump {
    pub fn new(center: Vec<f64>, inner: f64, outer: f64, amplitude: f64) -> Result<Self> {
        if !(inner >= 0.0 && outer > inner && outer.is_finite()) {
            return Err(Error::Domain(format!("bump radii must satisfy 0 ≤ inner < outer, got {inner}, {outer}")));
        }
        Ok(Bump { center, ramp: Ramp { inner, outer, order: RAMP_ORDER }, amplitude })
    }

    fn radius(&self, x: &[f64]) -> f64 {
        crate::kernels::dist(x, &self.center)
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.amplitude * self.ramp.value(self.radius(x))
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        let r = self.radius(x);
        let s = self.ramp.slope(r);
        if s == 0.0 || r == 0.0 {
            return vec![0.0; x.len()];
        }
        x.iter().zip(&self.center).map(|(a, c)| self.amplitude * s * (a - c) / r).collect()
    }

    /// `‖∇β‖_∞`.
    pub fn max_grad(&self) -> f64 {
        self.amplitude.abs() * self.ramp.max_slope()
    }
}

/// `φ(t, x) = α(t) β(x)` with `α(t) = ramp(|t - t_center|)`, or a sum of such products.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TestFunction {
    Product { t_center: f64, time: Ramp, space: Bump },
    Sum { terms: Vec<TestFunction> },
}

impl TestFunction {
    pub fn product(t_center: f64, t_inner: f64, t_outer: f64, space: Bump) -> Result<Self> {
        if !(t_inner >= 0.0 && t_outer > t_inner) {
            return Err(Error::Domain("temporal radii must satisfy 0 ≤ inner < outer".into()));
        }
        Ok(TestFunction::Product { t_center, time: Ramp { inner: t_inner, outer: t_outer, order: RAMP_ORDER }, space })
    }

    pub fn zero() -> Self {
        TestFunction::Sum { terms: Vec::new() }
    }

    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            TestFunction::Product { t_center, time, space } => time.value((t - t_center).abs()) * space.value(x),
            TestFunction::Sum { terms } => terms.iter().map(|f| f.value(t, x)).sum(),
        }
    }

    pub fn dt(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            TestFunction::Product { t_center, time, space } => {
                let r = t - t_center;
                time.slope(r.abs()) * r.signum() * space.value(x)
            }
            TestFunction::Sum { terms } => terms.iter().map(|f| f.dt(t, x)).sum(),
        }
    }

    pub fn grad(&self, t: f64, x: &[f64]) -> Vec<f64> {
        match self {
            TestFunction::Product { t_center, time, space } => {
                let a = time.value((t - t_center).abs());
                space.grad(x).into_iter().map(|g| a * g).collect()
            }
            TestFunction::Sum { terms } => {
                let mut out = vec![0.0; x.len()];
                for f in terms {
                    for (o, g) in out.iter_mut().zip(f.grad(t, x)) {
                        *o += g;
                    }
                }
                out
            }
        }
    }

    /// Closed time interval outside which `φ` vanishes; `None` for the zero function.
    pub fn time_support(&self) -> Option<(f64, f64)> {
        match self {
            TestFunction::Product { t_center, time, .. } => Some((t_center - time.outer, t_center + time.outer)),
            TestFunction::Sum { terms } => {
                terms.iter().filter_map(TestFunction::time_support).reduce(|a, b| (a.0.min(b.0), a.1.max(b.1)))
            }
        }
    }
}

/// `Σ_a w_a [∂_t φ + V^i(t, X_a, ρ∗η^i(X_a)) · ∇φ](t, X_a)` at snapshot `n`, per species.
fn weak_integrand(s: &ScenarioSpec, traj: &FlowTrajectory, n: usize, phi: &TestFunction) -> Vec<f64> {
    let snap = &traj.snapshots[n];
    let m = &snap.measure;
    let d = s.dim;
    let mut u = vec![0.0; s.k];
    let mut v = vec![0.0; d];
    m.species
        .iter()
        .enumerate()
        .map(|(i, sp)| {
            let mut acc = 0.0;
            for (x, w) in sp.positions.chunks_exact(d).zip(&sp.weights) {
                let g = phi.grad(snap.t, x);
                let mut transport = 0.0;
                if g.iter().any(|c| *c != 0.0) {
                    m.convolve_into(&s.kernels, i, x, &mut u);
                    s.velocity.eval_into(i, snap.t, x, &u, &mut v);
                    transport = v.iter().zip(&g).map(|(a, b)| a * b).sum();
                }
                acc += w * (phi.dt(snap.t, x) + transport);
            }
            acc
        })
        .collect()
}

/// Weak-form residual per species, time integral by the trapezoid rule on the trajectory grid.
pub fn weak_residual(s: &ScenarioSpec, traj: &FlowTrajectory, phi: &TestFunction) -> Result<Vec<f64>> {
    let Some((lo, hi)) = phi.time_support() else {
        return Ok(vec![0.0; s.k]);
    };
    if hi >= s.horizon {
        return Err(Error::Domain(format!("test function support [{lo}, {hi}] must end before T = {}", s.horizon)));
    }
    let inside = traj.snapshots.iter().filter(|sn| sn.t > lo.max(0.0) && sn.t < hi).count();
    if inside < MIN_STEPS_IN_SUPPORT {
        return Err(Error::Resolution(format!(
            "only {inside} grid times inside the temporal support [{lo}, {hi}]; need {MIN_STEPS_IN_SUPPORT}"
        )));
    }
    let h = traj.step;
    let n_last = traj.snapshots.len() - 1;
    let mut total = vec![0.0; s.k];
    for n in 0..=n_last {
        let t = traj.snapshots[n].t;
        if t > hi + h {
            break;
        }
        let w = if n == 0 || n == n_last { 0.5 * h } else { h };
        for (acc, v) in total.iter_mut().zip(weak_integrand(s, traj, n, phi)) {
            *acc += w * v;
        }
    }
    let init = traj.initial();
    for (i, sp) in init.species.iter().enumerate() {
        total[i] += sp.positions.chunks_exact(s.dim).zip(&sp.weights).map(|(x, w)| w * phi.value(0.0, x)).sum::<f64>();
    }
    Ok(total)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MassRung {
    pub species: usize,
    pub radius: f64,
    /// `max_t |∫β_R dρ^i(t) - ∫β_R dρ̄^i|`.
    pub defect: f64,
    /// `(2/R) ‖ρ̄^i‖ ‖V‖ T + 1e-8`.
    pub budget: f64,
    /// `max_t` of the residual of the integrated identity (trapezoid in time).
    pub identity_residual: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MassIdentityReport {
    /// Weights and per-species norms are bit-identical in every snapshot.
    pub structural: bool,
    pub rungs: Vec<MassRung>,
    pub passed: bool,
}

/// Cutoff `β_R`: 1 on `B_R`, quintic ramp to 0 on `B_{2R}`, `|∇β_R| ≤ 1.875 / R`.
pub fn cutoff(dim: usize, radius: f64) -> Bump {
    Bump {
        center: vec![0.0; dim],
        ramp: Ramp { inner: radius, outer: 2.0 * radius, order: CUTOFF_ORDER },
        amplitude: 1.0,
    }
}

/// Checks the localized mass identity on a ladder of cutoff radii.
pub fn mass_identity_check(s: &ScenarioSpec, traj: &FlowTrajectory, radii: &[f64]) -> Result<MassIdentityReport> {
    if radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::Domain("cutoff radii must be positive".into()));
    }
    let structural = traj.mass_is_constant();
    let masses = traj.initial().tv_norm().per_species;
    let d = s.dim;
    let h = traj.step;
    let mut rungs = Vec::new();
    let mut u = vec![0.0; s.k];
    let mut v = vec![0.0; d];
    for &radius in radii {
        let beta = cutoff(d, radius);
        for i in 0..s.k {
            let mut prev_flux = None;
            let mut integral = 0.0;
            let mut defect: f64 = 0.0;
            let mut identity_residual: f64 = 0.0;
            let base: f64 = {
                let sp = &traj.initial().species[i];
                sp.positions.chunks_exact(d).zip(&sp.weights).map(|(x, w)| w * beta.value(x)).sum()
            };
            for snap in &traj.snapshots {
                let sp = &snap.measure.species[i];
                let mut mass = 0.0;
                let mut flux = 0.0;
                for (x, w) in sp.positions.chunks_exact(d).zip(&sp.weights) {
                    mass += w * beta.value(x);
                    let g = beta.grad(x);
                    if g.iter().any(|c| *c != 0.0) {
                        snap.measure.convolve_into(&s.kernels, i, x, &mut u);
                        s.velocity.eval_into(i, snap.t, x, &u, &mut v);
                        flux += w * v.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if let Some(p) = prev_flux {
                    integral += 0.5 * h * (p + flux);
                }
                prev_flux = Some(flux);
                defect = defect.max((mass - base).abs());
                identity_residual = identity_residual.max((mass - base - integral).abs());
            }
            let budget = 2.0 / radius * masses[i] * s.velocity.sup_bound * s.horizon + 1e-8;
            rungs.push(MassRung { species: i, radius, defect, budget, identity_residual, passed: defect <= budget });
        }
    }
    let passed = structural && rungs.iter().all(|r| r.passed);
    Ok(MassIdentityReport { structural, rungs, passed })
}

/// Replaces every field and kernel of `s` by its mollification of width `eps`.
pub fn mollify_scenario(s: &ScenarioSpec, eps: f64, nodes: usize) -> Result<ScenarioSpec> {
    let presets = s
        .velocity
        .presets
        .iter()
        .map(|p| FieldPreset::Mollified { inner: Box::new(p.clone()), width: eps, nodes })
        .collect();
    let velocity = VelocityFieldSpec::new(s.dim, presets, s.velocity.sup_bound, s.velocity.modulus.clone())?;
    let entries = s
        .kernels
        .entries
        .iter()
        .map(|e| match e {
            Kernel::Zero {} => Kernel::Zero {},
            other => Kernel::Mollified { inner: Box::new(other.clone()), width: eps, nodes },
        })
        .collect();
    let kernels = KernelVec::new(s.k, entries, s.kernels.modulus.clone(), s.kernels.sup_bound)?;
    Ok(ScenarioSpec { name: format!("{} (mollified, ε = {eps})", s.name), velocity, kernels, ..s.clone() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepStatus {
    Converging,
    Inconclusive,
    SingleRung,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObservableSweep {
    pub observable: usize,
    pub species: usize,
    /// `sup_t |F_{ε_{j+1}} - F_{ε_j}|`.
    pub cauchy: Vec<f64>,
    /// `sup_{s≠t} |F_ε(s) - F_ε(t)| / |s - t|`, per rung.
    pub equicontinuity: Vec<f64>,
    /// `‖V‖ ‖∇β‖ ‖ρ̄^i‖`.
    pub cap: f64,
    pub within_cap: bool,
    pub status: SweepStatus,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MollifyReport {
    pub widths: Vec<f64>,
    pub nodes: usize,
    pub observables: Vec<ObservableSweep>,
}

/// Integrates the mollified scenario for each width and tracks `F_ε[β](t) = ∫β dρ_ε(t)`.
pub fn mollify_sweep(
    base: &ScenarioSpec,
    widths: &[f64],
    observables: &[Bump],
    opts: FlowOptions,
    nodes: usize,
) -> Result<MollifyReport> {
    if widths.is_empty() || widths.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(Error::Config("ε ladder must be nonempty and positive".into()));
    }
    if widths.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::Config("ε ladder must decrease".into()));
    }
    let d = base.dim;
    let masses = base.initial.tv_norm().per_species;
    // series[rung][observable][species][time]
    let mut series: Vec<Vec<Vec<Vec<f64>>>> = Vec::new();
    let mut step = 0.0;
    for &eps in widths {
        let sm = mollify_scenario(base, eps, nodes)?;
        let traj = integrate(&sm, opts, &[])?;
        step = traj.step;
        let per_obs = observables
            .iter()
            .map(|beta| {
                (0..base.k)
                    .map(|i| {
                        traj.snapshots
                            .iter()
                            .map(|snap| {
                                let sp = &snap.measure.species[i];
                                sp.positions.chunks_exact(d).zip(&sp.weights).map(|(x, w)| w * beta.value(x)).sum()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        series.push(per_obs);
    }
    let mut out = Vec::new();
    for (o, beta) in observables.iter().enumerate() {
        for i in 0..base.k {
            let cauchy: Vec<f64> = series
                .windows(2)
                .map(|w| w[0][o][i].iter().zip(&w[1][o][i]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .collect();
            let equicontinuity: Vec<f64> = series
                .iter()
                .map(|rung| rung[o][i].windows(2).map(|w| (w[1] - w[0]).abs() / step).fold(0.0, f64::max))
                .collect();
            let cap = base.velocity.sup_bound * beta.max_grad() * masses[i];
            let within_cap = equicontinuity.iter().all(|&c| c <= cap + 1e-9);
            let status = if cauchy.is_empty() {
                SweepStatus::SingleRung
            } else if cauchy.iter().all(|&c| c == 0.0) || cauchy.windows(2).all(|w| w[1] < w[0]) {
                SweepStatus::Converging
            } else {
                SweepStatus::Inconclusive
            };
            out.push(ObservableSweep { observable: o, species: i, cauchy, equicontinuity, cap, within_cap, status });
        }
    }
    Ok(MollifyReport { widths: widths.to_vec(), nodes, observables: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Scheme;
    use crate::measures::DiscreteMeasureVec;
    use crate::moduli::ModulusSpec;

    fn drift(c: f64, atoms: &[(f64, f64)]) -> ScenarioSpec {
        let lin = ModulusSpec::linear(1.0).unwrap();
        let v = VelocityFieldSpec::uniform(1, 1, FieldPreset::Constant { c: vec![c] }, c.abs(), lin.clone()).unwrap();
        let kv = KernelVec::uniform(1, Kernel::Hat { width: 1.0, height: 1.0 }, lin, 1.0).unwrap();
        let mut m = DiscreteMeasureVec::empty(1, 1);
        for &(p, w) in atoms {
            m.push(0, &[p], w);
        }
        ScenarioSpec::new("drift", 1.0, v, kv, m).unwrap()
    }

    #[test]
    fn smoothstep_properties() {
        for p in 1..=6 {
            assert_eq!(smoothstep(p, 0.0), 0.0);
            assert!((smoothstep(p, 1.0 - 1e-15) - 1.0).abs() < 1e-12);
            assert!((smoothstep(p, 0.5) - 0.5).abs() < 1e-14);
            // derivative against central differences
            for s in [0.1, 0.37, 0.8] {
                let fd = (smoothstep(p, s + 1e-6) - smoothstep(p, s - 1e-6)) / 2e-6;
                assert!((fd - smoothstep_slope(p, s)).abs() < 1e-6, "p = {p}, s = {s}");
            }
        }
        assert!((smoothstep_max_slope(3) - 1.875).abs() < 1e-14);
        assert!(smoothstep_max_slope(3) < 2.0);
    }

    #[test]
    fn test_function_derivatives_match_differences() {
        let phi = TestFunction::product(0.3, 0.1, 0.25, Bump::new(vec![0.2, -0.1], 0.3, 0.9, 1.5).unwrap()).unwrap();
        let (t, x) = (0.47, [0.6, 0.3]);
        let e = 1e-6;
        let fd_t = (phi.value(t + e, &x) - phi.value(t - e, &x)) / (2.0 * e);
        assert!((fd_t - phi.dt(t, &x)).abs() < 1e-6);
        let g = phi.grad(t, &x);
        let fd_x = (phi.value(t, &[x[0] + e, x[1]]) - phi.value(t, &[x[0] - e, x[1]])) / (2.0 * e);
        assert!((fd_x - g[0]).abs() < 1e-6);
        let (lo, hi) = phi.time_support().unwrap();
        assert!((lo - 0.05).abs() < 1e-15 && (hi - 0.55).abs() < 1e-15);
        assert_eq!(phi.value(0.56, &x), 0.0);
    }

    #[test]
    fn weak_residual_vanishes_for_exact_transport() {
        let phi = TestFunction::product(0.0, 0.2, 0.6, Bump::new(vec![0.1], 0.2, 0.8, 1.0).unwrap()).unwrap();
        let atoms = [(-0.3, 0.5), (0.2, 1.0), (0.6, 0.25)];
        let still = drift(0.0, &atoms);
        let traj = integrate(&still, FlowOptions::new(1e-3, Scheme::Rk4), &[]).unwrap();
        let r = weak_residual(&still, &traj, &phi).unwrap();
        assert!(r[0].abs() < 1e-10, "{r:?}");
        // moving atoms: only the trapezoid error remains, second order in dt
        let moving = drift(0.7, &atoms);
        let r: Vec<f64> = [0.01, 0.005]
            .iter()
            .map(|&dt| {
                let traj = integrate(&moving, FlowOptions::new(dt, Scheme::Rk4), &[]).unwrap();
                weak_residual(&moving, &traj, &phi).unwrap()[0].abs()
            })
            .collect();
        assert!(r[0] < 1e-4 && (r[0] / r[1] - 4.0).abs() < 0.2, "{r:?}");
    }

    #[test]
    fn weak_residual_needs_resolution() {
        let s = drift(1.0, &[(0.0, 1.0)]);
        let traj = integrate(&s, FlowOptions::new(0.1, Scheme::Euler), &[]).unwrap();
        let phi = TestFunction::product(0.3, 0.0, 0.2, Bump::new(vec![0.0], 0.5, 1.0, 1.0).unwrap()).unwrap();
        assert!(matches!(weak_residual(&s, &traj, &phi), Err(Error::Resolution(_))));
        assert_eq!(weak_residual(&s, &traj, &TestFunction::zero()).unwrap(), vec![0.0]);
    }

    #[test]
    fn mass_identity_ladder() {
        let s = drift(1.0, &[(-0.5, 1.0), (0.5, 2.0)]);
        let traj = integrate(&s, FlowOptions::new(0.01, Scheme::Rk4), &[]).unwrap();
        let rep = mass_identity_check(&s, &traj, &[0.5, 1.0, 1e6]).unwrap();
        assert!(rep.structural && rep.passed, "{rep:?}");
        let far = rep.rungs.last().unwrap();
        assert_eq!(far.defect, 0.0);
        assert!(rep.rungs[0].defect > 0.0);
        assert!(rep.rungs.iter().all(|r| r.identity_residual < 1e-3), "{rep:?}");
    }
}
