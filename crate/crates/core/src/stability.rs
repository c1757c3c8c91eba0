//! Twin simulations and the Lagrangian stability certificate.
//!
//! Two scenarios `(V, η, ρ̄)` and `(U, ν, σ̄)` are integrated on the same grid with
//! a common cloud of registered points. The discrepancy
//! `Q_ζ(t) = Σ_i ⨍ |X^i(t, ·) - Y^i(t, ·)| dμ`, `μ = |ρ̄| + |σ̄| + ζ L^d`, is compared
//! with the bound `Ω` obtained from `Q' ≤ a (ω_V(Q + λ ω_η(Q)) + M)`.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{sup_distance_fields, FieldRegion};
use crate::flow::{integrate, FlowOptions, FlowTrajectory, Tracer};
use crate::kernels::{dist, sup_distance_kernels, SupDistance};
use crate::measures::atomic_tv_distance;
use crate::moduli::{bihari_bound, check_osgood, stability_modulus, ComposedModulus, Forcing, OsgoodOptions};
use crate::sampling::{bump, AxisBox};
use crate::scenario::{ScenarioFile, ScenarioSpec, SCHEMA_VERSION};

/// Largest number of `ζ` grid points accepted.
pub const MAX_GRID_POINTS: usize = 1 << 20;
/// Candidates for the absorbed constant: `2^0, …, 2^A_MAX_EXPONENT`.
pub const A_MAX_EXPONENT: i32 = 10;
/// Relative tolerance of the `Q ≤ Ω` comparison.
pub const CERTIFY_RTOL: f64 = 1e-9;

pub const FINITE_BOX_CAVEAT: &str = "sup-norm distances are estimated on a bounded region; the true M may be larger, so Ω can under-estimate the bound in principle";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudSpec {
    /// Grid box; defaults to the support of `ρ̄ ∪ σ̄` padded by 1.
    #[serde(default)]
    pub lo: Option<Vec<f64>>,
    #[serde(default)]
    pub hi: Option<Vec<f64>>,
    /// Grid points per axis.
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    /// A coarse cloud reports the sup-level comparison without failing on it.
    #[serde(default)]
    pub coarse: bool,
}

fn default_resolution() -> usize {
    16
}

impl Default for CloudSpec {
    fn default() -> Self {
        CloudSpec { lo: None, hi: None, resolution: default_resolution(), coarse: false }
    }
}

#[derive(Clone, Debug)]
pub struct TwinSpec {
    pub a: ScenarioSpec,
    pub b: ScenarioSpec,
    pub cloud: CloudSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinFile {
    pub schema: u32,
    pub a: ScenarioFile,
    pub b: ScenarioFile,
    #[serde(default)]
    pub cloud: CloudSpec,
}

impl TwinSpec {
    pub fn new(a: ScenarioSpec, b: ScenarioSpec, cloud: CloudSpec) -> Result<Self> {
        let mut problems = Vec::new();
        if a.horizon != b.horizon || a.dim != b.dim || a.k != b.k {
            problems.push(format!(
                "twins must share (T, d, k): ({}, {}, {}) vs ({}, {}, {})",
                a.horizon, a.dim, a.k, b.horizon, b.dim, b.k
            ));
        }
        if a.velocity.modulus != b.velocity.modulus {
            problems.push("twins must declare the same velocity modulus".into());
        }
        if a.kernels.modulus != b.kernels.modulus {
            problems.push("twins must declare the same kernel modulus".into());
        }
        if cloud.resolution == 0 {
            problems.push("cloud resolution must be at least 1".into());
        }
        match (&cloud.lo, &cloud.hi) {
            (Some(lo), Some(hi)) => {
                if AxisBox::new(lo.clone(), hi.clone()).is_err() || lo.len() != a.dim {
                    problems.push("cloud box must be a nondegenerate box in R^d".into());
                }
            }
            (None, None) => {}
            _ => problems.push("cloud box needs both lo and hi".into()),
        }
        if cloud.resolution.checked_pow(a.dim as u32).is_none_or(|n| n > MAX_GRID_POINTS) {
            problems.push(format!("cloud grid exceeds {MAX_GRID_POINTS} points"));
        }
        if problems.is_empty() {
            Ok(TwinSpec { a, b, cloud })
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: TwinFile = serde_json::from_str(text).map_err(|e| Error::Parse(format!("{e}")))?;
        if f.schema != SCHEMA_VERSION {
            return Err(Error::Validation(vec![format!("unsupported twin schema {}", f.schema)]));
        }
        let a = ScenarioSpec::from_file_struct(f.a)?;
        let b = ScenarioSpec::from_file_struct(f.b)?;
        TwinSpec::new(a, b, f.cloud)
    }

    pub fn to_json(&self) -> String {
        let f = TwinFile {
            schema: SCHEMA_VERSION,
            a: self.a.to_file_struct(),
            b: self.b.to_file_struct(),
            cloud: self.cloud.clone(),
        };
        serde_json::to_string_pretty(&f).expect("twin files serialize")
    }

    pub fn lambda(&self) -> f64 {
        self.a.initial.tv_norm().total + self.b.initial.tv_norm().total + 1.0
    }

    pub fn composite(&self) -> Result<ComposedModulus> {
        ComposedModulus::new(self.a.velocity.modulus.clone(), self.a.kernels.modulus.clone(), self.lambda())
    }

    fn grid_box(&self) -> AxisBox {
        if let (Some(lo), Some(hi)) = (&self.cloud.lo, &self.cloud.hi) {
            return AxisBox { lo: lo.clone(), hi: hi.clone() };
        }
        let d = self.a.dim;
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for m in [&self.a.initial, &self.b.initial] {
            for sp in &m.species {
                for p in sp.positions.chunks_exact(d) {
                    for c in 0..d {
                        lo[c] = lo[c].min(p[c]);
                        hi[c] = hi[c].max(p[c]);
                    }
                }
            }
        }
        for c in 0..d {
            if !lo[c].is_finite() {
                lo[c] = 0.0;
                hi[c] = 0.0;
            }
            lo[c] -= 1.0;
            hi[c] += 1.0;
        }
        AxisBox { lo, hi }
    }
}

pub fn load_twin(path: &Path) -> Result<TwinSpec> {
    let text = std::fs::read_to_string(path)?;
    TwinSpec::from_json(&text).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Registered points with their `μ` weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Cloud {
    pub dim: usize,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
    /// Points kept when the `ζ` grid is halved (atoms and even grid indices).
    pub half_grid: Vec<bool>,
    /// `‖μ‖ = ‖ρ̄‖ + ‖σ̄‖ + 1`.
    pub total: f64,
    pub grid_box: AxisBox,
    pub resolution: usize,
}

impl Cloud {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, p: usize) -> &[f64] {
        &self.points[p * self.dim..(p + 1) * self.dim]
    }
}

/// Atoms of `ρ̄` and `σ̄` (coincident points merged) followed by the `ζ` grid.
pub fn build_cloud(tw: &TwinSpec) -> Cloud {
    let d = tw.a.dim;
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut points = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    let mut half_grid = Vec::new();
    let mut add = |x: &[f64], w: f64, keep: bool, points: &mut Vec<f64>, weights: &mut Vec<f64>| {
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        match index.get(&key) {
            Some(&p) => {
                weights[p] += w;
                if keep {
                    half_grid[p] = true;
                }
            }
            None => {
                index.insert(key, weights.len());
                points.extend_from_slice(x);
                weights.push(w);
                half_grid.push(keep);
            }
        }
    };
    for m in [&tw.a.initial, &tw.b.initial] {
        for sp in &m.species {
            for (x, w) in sp.positions.chunks_exact(d).zip(&sp.weights) {
                add(x, w.abs(), true, &mut points, &mut weights);
            }
        }
    }
    let bx = tw.grid_box();
    let n = tw.cloud.resolution;
    let count = n.pow(d as u32);
    let mut grid = Vec::with_capacity(count);
    let mut zeta_sum = 0.0;
    for flat in 0..count {
        let mut rem = flat;
        let mut x = vec![0.0; d];
        let mut z = 1.0;
        let mut even = true;
        for c in 0..d {
            let m = rem % n;
            rem /= n;
            let unit = (m as f64 + 0.5) / n as f64;
            x[c] = bx.lo[c] + unit * (bx.hi[c] - bx.lo[c]);
            z *= bump(2.0 * unit - 1.0);
            even &= m.is_multiple_of(2);
        }
        zeta_sum += z;
        grid.push((x, z, even));
    }
    for (x, z, even) in grid {
        add(&x, z / zeta_sum, even, &mut points, &mut weights);
    }
    let total = tw.lambda();
    Cloud { dim: d, points, weights, half_grid, total, grid_box: bx, resolution: n }
}

/// Both trajectories, each carrying one tracer per (species, cloud point), species-major.
pub struct TwinRun {
    pub cloud: Cloud,
    pub a: FlowTrajectory,
    pub b: FlowTrajectory,
}

pub fn run_twins(tw: &TwinSpec, opts: FlowOptions) -> Result<TwinRun> {
    let cloud = build_cloud(tw);
    let tracers: Vec<Tracer> = (0..tw.a.k)
        .flat_map(|i| (0..cloud.len()).map(move |p| (i, p)))
        .map(|(i, p)| Tracer { species: i, x0: cloud.point(p).to_vec() })
        .collect();
    let (ra, rb) = rayon::join(|| integrate(&tw.a, opts, &tracers), || integrate(&tw.b, opts, &tracers));
    Ok(TwinRun { cloud, a: ra?, b: rb? })
}

fn check_registration(run: &TwinRun) -> Result<usize> {
    let (a, b) = (&run.a, &run.b);
    let same_times = a.snapshots.len() == b.snapshots.len()
        && a.snapshots.iter().zip(&b.snapshots).all(|(x, y)| x.t.to_bits() == y.t.to_bits());
    if !same_times || a.scheme != b.scheme {
        return Err(Error::Registration("twin trajectories use different time grids or schemes".into()));
    }
    if a.tracers != b.tracers {
        return Err(Error::Registration("twin trajectories register different points".into()));
    }
    let p = run.cloud.len();
    if p == 0 || a.tracers.len() % p != 0 {
        return Err(Error::Registration("tracer list does not match the cloud".into()));
    }
    Ok(a.tracers.len() / p)
}

/// `|X^i(t_n, p) - Y^i(t_n, p)|` for every species and point.
fn gaps(run: &TwinRun, n: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
    let d = run.cloud.dim;
    let p = run.cloud.len();
    let (xa, xb) = (&run.a.snapshots[n].tracers, &run.b.snapshots[n].tracers);
    xa.chunks_exact(d).zip(xb.chunks_exact(d)).enumerate().map(move |(idx, (x, y))| (idx % p, dist(x, y)))
}

/// `Q_ζ` on the time grid.
pub fn q_zeta(run: &TwinRun) -> Result<Vec<f64>> {
    check_registration(run)?;
    let c = &run.cloud;
    Ok((0..run.a.snapshots.len())
        .into_par_iter()
        .map(|n| gaps(run, n).map(|(p, g)| c.weights[p] * g).sum::<f64>() / c.total)
        .collect())
}

/// `max_{i, p} |X^i(t, p) - Y^i(t, p)|` on the time grid, over all points and over the halved grid.
pub fn flow_sup_distance(run: &TwinRun) -> Result<(Vec<f64>, Vec<f64>)> {
    check_registration(run)?;
    let c = &run.cloud;
    Ok((0..run.a.snapshots.len())
        .into_par_iter()
        .map(|n| {
            gaps(run, n).fold((0.0f64, 0.0f64), |(full, half), (p, g)| {
                (full.max(g), if c.half_grid[p] { half.max(g) } else { half })
            })
        })
        .unzip())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerturbationBudget {
    /// `‖ρ̄ - σ̄‖`.
    pub datum: f64,
    /// `‖V - U‖` estimate.
    pub field: SupDistance,
    /// `‖η - ν‖` estimate.
    pub kernel: SupDistance,
    /// Argument of `Ω`: the sum of the three.
    pub epsilon: f64,
    pub lambda: f64,
    /// `‖η‖` as declared by the first scenario.
    pub eta_sup: f64,
    /// `ω_V(‖η‖ ‖ρ̄ - σ̄‖)`.
    pub m_datum: f64,
    /// `ω_V(λ ‖η - ν‖)`.
    pub m_kernel: f64,
    /// `‖V - U‖`.
    pub m_field: f64,
    pub m: f64,
    pub field_region: FieldRegion,
    pub kernel_box: AxisBox,
}

pub fn perturbation_budget(tw: &TwinSpec, samples: u64) -> Result<PerturbationBudget> {
    let datum = atomic_tv_distance(&tw.a.initial, &tw.b.initial, 0.0)?;
    let (ra, rb) = (tw.a.field_region(0.0), tw.b.field_region(0.0));
    let d = tw.a.dim;
    let x = AxisBox {
        lo: (0..d).map(|c| ra.x.lo[c].min(rb.x.lo[c])).collect(),
        hi: (0..d).map(|c| ra.x.hi[c].max(rb.x.hi[c])).collect(),
    };
    let extent = (0..d).map(|c| x.hi[c] - x.lo[c]).fold(0.0, f64::max);
    let field_region = FieldRegion { x, u_half: ra.u_half.max(rb.u_half), horizon: tw.a.horizon };
    let kernel_box = AxisBox::cube(d, extent.max(tw.a.kernels.reach()).max(tw.b.kernels.reach()));
    let field = sup_distance_fields(&tw.a.velocity, &tw.b.velocity, &field_region, samples)?;
    let kernel = sup_distance_kernels(&tw.a.kernels, &tw.b.kernels, &kernel_box, samples)?;
    let lambda = tw.lambda();
    let eta_sup = tw.a.kernels.sup_bound;
    let wv = &tw.a.velocity.modulus;
    let m_datum = wv.value(eta_sup * datum);
    let m_kernel = wv.value(lambda * kernel.value);
    let m_field = field.value;
    Ok(PerturbationBudget {
        datum,
        epsilon: datum + field.value + kernel.value,
        field,
        kernel,
        lambda,
        eta_sup,
        m_datum,
        m_kernel,
        m_field,
        m: m_datum + m_kernel + m_field,
        field_region,
        kernel_box,
    })
}

/// Terms `Σ_i (1)_i, …, Σ_i (4)_i` and `Σ_i ⨍ |V^i(X, ρ∗η^i(X)) - U^i(Y, σ∗ν^i(Y))|` at snapshot `n`.
pub fn four_terms(tw: &TwinSpec, run: &TwinRun, n: usize) -> Result<([f64; 4], f64)> {
    let k = check_registration(run)?;
    let c = &run.cloud;
    let d = c.dim;
    let (sa, sb) = (&run.a.snapshots[n], &run.b.snapshots[n]);
    let t = sa.t;
    let (rho, sigma) = (&sa.measure, &sb.measure);
    let (eta, nu) = (&tw.a.kernels, &tw.b.kernels);
    let (v, u) = (&tw.a.velocity, &tw.b.velocity);
    let p_count = c.len();
    // collected in order and summed sequentially so results do not depend on scheduling
    let parts: Vec<([f64; 4], f64)> = (0..k * p_count)
        .into_par_iter()
        .map(|idx| {
            let (i, p) = (idx / p_count, idx % p_count);
            let x = &sa.tracers[idx * d..(idx + 1) * d];
            let y = &sb.tracers[idx * d..(idx + 1) * d];
            let v1 = v.eval(i, t, x, &rho.convolve_at(eta, i, x));
            let v2 = v.eval(i, t, y, &rho.convolve_at(eta, i, y));
            let u_se = sigma.convolve_at(eta, i, y);
            let v3 = v.eval(i, t, y, &u_se);
            let u_sn = sigma.convolve_at(nu, i, y);
            let v4 = v.eval(i, t, y, &u_sn);
            let u4 = u.eval(i, t, y, &u_sn);
            let w = c.weights[p] / c.total;
            ([w * dist(&v1, &v2), w * dist(&v2, &v3), w * dist(&v3, &v4), w * dist(&v4, &u4)], w * dist(&v1, &u4))
        })
        .collect();
    let mut terms = [0.0; 4];
    let mut direct = 0.0;
    for (tp, dp) in parts {
        for (a, b) in terms.iter_mut().zip(tp) {
            *a += b;
        }
        direct += dp;
    }
    Ok((terms, direct))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditPoint {
    pub t: f64,
    /// Forward difference of `Q_ζ`.
    pub q_prime: f64,
    pub terms: [f64; 4],
    pub direct: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FourTermAudit {
    pub points: Vec<AuditPoint>,
    /// `k (‖V‖ + ‖U‖) Δt / T`.
    pub slack: f64,
}

impl FourTermAudit {
    pub fn passes(&self, a: f64) -> bool {
        self.points.iter().all(|p| p.q_prime <= a * p.terms.iter().sum::<f64>() + self.slack)
    }

    /// Smallest power of two `a ≤ 2^A_MAX_EXPONENT` passing the audit.
    pub fn smallest_a(&self) -> Option<f64> {
        (0..=A_MAX_EXPONENT).map(|j| 2f64.powi(j)).find(|&a| self.passes(a))
    }
}

fn slack(tw: &TwinSpec, step: f64) -> f64 {
    tw.a.k as f64 * (tw.a.velocity.sup_bound + tw.b.velocity.sup_bound) * step / tw.a.horizon
}

/// Four-term audit at every `stride`-th grid time.
pub fn four_term_audit(tw: &TwinSpec, run: &TwinRun, q: &[f64], stride: usize) -> Result<FourTermAudit> {
    let stride = stride.max(1);
    let h = run.a.step;
    let mut points = Vec::new();
    for n in (0..q.len().saturating_sub(1)).step_by(stride) {
        let (terms, direct) = four_terms(tw, run, n)?;
        points.push(AuditPoint { t: run.a.snapshots[n].t, q_prime: (q[n + 1] - q[n]) / h, terms, direct });
    }
    Ok(FourTermAudit { points, slack: slack(tw, h) })
}

/// `Q'(t_n) ≤ a (ω_comp(max(Q_n, Q_{n+1})) + M) + slack` at every grid step.
pub fn bihari_form_holds(c: &ComposedModulus, q: &[f64], step: f64, m: f64, slack: f64, a: f64) -> bool {
    q.windows(2).all(|w| (w[1] - w[0]) / step <= a * (c.value(w[0].max(w[1])) + m) + slack)
}

/// Everything the certificate needs from one twin pair, before `a` is fixed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TwinAnalysis {
    pub names: (String, String),
    pub horizon: f64,
    pub k: usize,
    pub step: f64,
    pub scheme: String,
    pub times: Vec<f64>,
    pub q: Vec<f64>,
    pub sup_dist: Vec<f64>,
    pub sup_dist_half_grid: Vec<f64>,
    pub budget: PerturbationBudget,
    pub audit: FourTermAudit,
    pub composite: ComposedModulus,
    pub mass_preserved: bool,
    pub cloud_points: usize,
    pub cloud_resolution: usize,
    pub cloud_box: AxisBox,
    pub coarse: bool,
}

impl TwinAnalysis {
    /// Smallest power of two passing both the four-term audit and the Bihari-form inequality.
    pub fn smallest_a(&self) -> Option<f64> {
        let base = self.audit.smallest_a()?;
        (0..=A_MAX_EXPONENT)
            .map(|j| 2f64.powi(j))
            .filter(|&a| a >= base)
            .find(|&a| bihari_form_holds(&self.composite, &self.q, self.step, self.budget.m, self.audit.slack, a))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertifySettings {
    /// Samples per sup-distance estimate.
    pub samples: u64,
    /// Audit every `audit_stride`-th grid time.
    pub audit_stride: usize,
}

impl Default for CertifySettings {
    fn default() -> Self {
        CertifySettings { samples: 4096, audit_stride: 10 }
    }
}

/// Refuses non-Osgood composites before anything is integrated.
pub fn osgood_gate(tw: &TwinSpec) -> Result<ComposedModulus> {
    let c = tw.composite()?;
    let verdict = check_osgood(&c, OsgoodOptions::default())?;
    if !verdict.is_osgood {
        return Err(Error::CertificationRefused(format!(
            "composite {} ∘ (id + {}·{}) is not Osgood; no stability modulus exists",
            c.omega_v, c.lambda, c.omega_eta
        )));
    }
    Ok(c)
}

pub fn analyse(tw: &TwinSpec, opts: FlowOptions, settings: CertifySettings) -> Result<TwinAnalysis> {
    let composite = osgood_gate(tw)?;
    let run = run_twins(tw, opts)?;
    let q = q_zeta(&run)?;
    let (sup_dist, sup_dist_half_grid) = flow_sup_distance(&run)?;
    let budget = perturbation_budget(tw, settings.samples)?;
    let audit = four_term_audit(tw, &run, &q, settings.audit_stride)?;
    Ok(TwinAnalysis {
        names: (tw.a.name.clone(), tw.b.name.clone()),
        horizon: tw.a.horizon,
        k: tw.a.k,
        step: run.a.step,
        scheme: run.a.scheme.name().into(),
        times: run.a.times(),
        q,
        sup_dist,
        sup_dist_half_grid,
        budget,
        audit,
        composite,
        mass_preserved: run.a.mass_is_constant() && run.b.mass_is_constant(),
        cloud_points: run.cloud.len(),
        cloud_resolution: run.cloud.resolution,
        cloud_box: run.cloud.grid_box.clone(),
        coarse: tw.cloud.coarse,
    })
}

/// One `a` for a family of twins: the largest of the per-pair smallest values.
pub fn calibrate_a(family: &[&TwinAnalysis]) -> Result<f64> {
    let mut a: f64 = 1.0;
    for an in family {
        match an.smallest_a() {
            Some(v) => a = a.max(v),
            None => {
                return Err(Error::Validation(vec![format!(
                    "no a ≤ 2^{A_MAX_EXPONENT} satisfies the audit for twins {} / {}",
                    an.names.0, an.names.1
                )]))
            }
        }
    }
    Ok(a)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ASource {
    Calibrated,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpsilonComponents {
    pub datum: f64,
    pub field: f64,
    pub field_exact: bool,
    pub kernel: f64,
    pub kernel_exact: bool,
    pub total: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CloudSummary {
    pub points: usize,
    pub resolution: usize,
    pub grid_box: AxisBox,
    pub coarse: bool,
    /// `sup_t` flow distance over the full cloud minus the same over the halved grid.
    pub refinement_delta: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StabilityReport {
    pub twins: (String, String),
    pub scheme: String,
    pub dt: f64,
    pub horizon: f64,
    pub epsilon: EpsilonComponents,
    pub lambda: f64,
    pub eta_sup: f64,
    pub m_terms: [f64; 3],
    pub m: f64,
    pub field_region: FieldRegion,
    pub kernel_box: AxisBox,
    pub a: f64,
    pub a_source: ASource,
    /// `2k`, the constant produced by summing the term estimates over species.
    pub a_theory: f64,
    pub audit_min_a: Option<f64>,
    pub audit: FourTermAudit,
    pub times: Vec<f64>,
    pub q: Vec<f64>,
    pub sup_dist: Vec<f64>,
    pub omega_running: Vec<f64>,
    pub sup_q: f64,
    pub sup_flow: f64,
    /// `Ω` at the budget `M` over `[0, T]`.
    pub omega: f64,
    /// `Ω(ε)` with the aggregate forcing, valid for any split of `ε`.
    pub omega_of_epsilon: f64,
    pub q_level_pass: bool,
    pub sup_level_pass: bool,
    pub sup_level_gated: bool,
    pub mass_preserved: bool,
    pub cloud: CloudSummary,
    pub caveat: String,
    pub verdict: Verdict,
}

fn within(observed: f64, bound: f64) -> bool {
    observed <= bound * (1.0 + CERTIFY_RTOL)
}

pub fn certificate(an: &TwinAnalysis, a: f64, a_source: ASource) -> Result<StabilityReport> {
    let c = &an.composite;
    let m = an.budget.m;
    let omega = bihari_bound(c, a, m, an.horizon)?;
    let omega_running = an.times.iter().map(|&t| bihari_bound(c, a, m, t)).collect::<Result<Vec<_>>>()?;
    let modulus = stability_modulus(c, a, an.horizon, Forcing::Aggregate { eta_sup: an.budget.eta_sup })?;
    let omega_of_epsilon = modulus.eval(an.budget.epsilon)?;
    let sup_q = an.q.iter().cloned().fold(0.0, f64::max);
    let sup_flow = an.sup_dist.iter().cloned().fold(0.0, f64::max);
    let sup_half = an.sup_dist_half_grid.iter().cloned().fold(0.0, f64::max);
    let q_level_pass = within(sup_q, omega);
    let sup_level_pass = within(sup_flow, omega);
    let sup_level_gated = !an.coarse;
    let pass = q_level_pass && (sup_level_pass || !sup_level_gated) && an.mass_preserved;
    let b = &an.budget;
    Ok(StabilityReport {
        twins: an.names.clone(),
        scheme: an.scheme.clone(),
        dt: an.step,
        horizon: an.horizon,
        epsilon: EpsilonComponents {
            datum: b.datum,
            field: b.field.value,
            field_exact: b.field.exact,
            kernel: b.kernel.value,
            kernel_exact: b.kernel.exact,
            total: b.epsilon,
        },
        lambda: b.lambda,
        eta_sup: b.eta_sup,
        m_terms: [b.m_datum, b.m_kernel, b.m_field],
        m,
        field_region: b.field_region.clone(),
        kernel_box: b.kernel_box.clone(),
        a,
        a_source,
        a_theory: 2.0 * an.k as f64,
        audit_min_a: an.audit.smallest_a(),
        audit: an.audit.clone(),
        times: an.times.clone(),
        q: an.q.clone(),
        sup_dist: an.sup_dist.clone(),
        omega_running,
        sup_q,
        sup_flow,
        omega,
        omega_of_epsilon,
        q_level_pass,
        sup_level_pass,
        sup_level_gated,
        mass_preserved: an.mass_preserved,
        cloud: CloudSummary {
            points: an.cloud_points,
            resolution: an.cloud_resolution,
            grid_box: an.cloud_box.clone(),
            coarse: an.coarse,
            refinement_delta: sup_flow - sup_half,
        },
        caveat: FINITE_BOX_CAVEAT.into(),
        verdict: if pass { Verdict::Pass } else { Verdict::Fail },
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AChoice {
    Auto,
    Fixed(f64),
}

impl std::str::FromStr for AChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(AChoice::Auto);
        }
        match s.parse::<f64>() {
            Ok(a) if a.is_finite() && a > 0.0 => Ok(AChoice::Fixed(a)),
            _ => Err(Error::Config(format!("a must be AUTO or a positive number, got {s:?}"))),
        }
    }
}

pub fn certify(tw: &TwinSpec, opts: FlowOptions, a: AChoice, settings: CertifySettings) -> Result<StabilityReport> {
    let an = analyse(tw, opts, settings)?;
    match a {
        AChoice::Auto => certificate(&an, calibrate_a(&[&an])?, ASource::Calibrated),
        AChoice::Fixed(v) => certificate(&an, v, ASource::Fixed),
    }
}

impl StabilityReport {
    /// Rows `t,q_zeta,sup_dist,omega_running`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,q_zeta,sup_dist,omega_running")?;
        for n in 0..self.times.len() {
            writeln!(w, "{},{},{},{}", self.times[n], self.q[n], self.sup_dist[n], self.omega_running[n])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{FieldPreset, VelocityFieldSpec};
    use crate::flow::Scheme;
    use crate::kernels::{Kernel, KernelVec};
    use crate::measures::DiscreteMeasureVec;
    use crate::moduli::ModulusSpec;

    fn lin() -> ModulusSpec {
        ModulusSpec::linear(1.0).unwrap()
    }

    fn drift(c: f64, atoms: &[(f64, f64)]) -> ScenarioSpec {
        let v = VelocityFieldSpec::uniform(1, 1, FieldPreset::Constant { c: vec![c] }, 1.0, lin()).unwrap();
        let kv = KernelVec::uniform(1, Kernel::Hat { width: 1.0, height: 1.0 }, lin(), 1.0).unwrap();
        let mut m = DiscreteMeasureVec::empty(1, 1);
        for &(p, w) in atoms {
            m.push(0, &[p], w);
        }
        ScenarioSpec::new("drift", 1.0, v, kv, m).unwrap()
    }

    fn coarse() -> CloudSpec {
        CloudSpec { resolution: 4, ..CloudSpec::default() }
    }

    #[test]
    fn cloud_weights_sum_to_lambda() {
        let a = drift(0.5, &[(0.0, 1.0), (1.0, 0.5)]);
        let b = drift(0.5, &[(0.0, 1.0), (2.0, 0.25)]);
        let tw = TwinSpec::new(a, b, coarse()).unwrap();
        let c = build_cloud(&tw);
        assert_eq!(c.len(), 3 + 4);
        assert!((c.weights.iter().sum::<f64>() - c.total).abs() < 1e-14);
        assert_eq!(c.total, 1.5 + 1.25 + 1.0);
        assert_eq!(c.weights[0], 2.0);
    }

    #[test]
    fn constant_fields_diverge_linearly() {
        let atoms = [(0.0, 1.0), (0.5, 0.5)];
        let tw = TwinSpec::new(drift(0.5, &atoms), drift(-0.25, &atoms), coarse()).unwrap();
        let run = run_twins(&tw, FlowOptions::new(0.125, Scheme::Rk4)).unwrap();
        let q = q_zeta(&run).unwrap();
        let (sup, _) = flow_sup_distance(&run).unwrap();
        assert_eq!(q[0], 0.0);
        for (n, t) in run.a.times().iter().enumerate() {
            assert!((q[n] - 0.75 * t).abs() < 1e-14, "{n}: {}", q[n]);
            assert!(sup[n] >= q[n] - 1e-15);
        }
    }

    #[test]
    fn registration_mismatch_is_refused() {
        let atoms = [(0.0, 1.0)];
        let tw = TwinSpec::new(drift(0.5, &atoms), drift(0.5, &atoms), coarse()).unwrap();
        let mut run = run_twins(&tw, FlowOptions::new(0.25, Scheme::Euler)).unwrap();
        run.b = integrate(&tw.b, FlowOptions::new(0.25, Scheme::Euler), &[]).unwrap();
        assert!(matches!(q_zeta(&run), Err(Error::Registration(_))));
        run.b = integrate(&tw.b, FlowOptions::new(0.125, Scheme::Euler), &run.a.tracers).unwrap();
        assert!(matches!(flow_sup_distance(&run), Err(Error::Registration(_))));
    }

    #[test]
    fn identical_twins_certify_with_zeros() {
        let atoms = [(0.0, 1.0), (0.3, 2.0)];
        let tw = TwinSpec::new(drift(0.5, &atoms), drift(0.5, &atoms), coarse()).unwrap();
        let rep = certify(&tw, FlowOptions::new(0.05, Scheme::Rk4), AChoice::Auto, CertifySettings::default()).unwrap();
        assert_eq!(rep.verdict, Verdict::Pass);
        assert_eq!((rep.sup_q, rep.sup_flow, rep.m, rep.omega, rep.epsilon.total), (0.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!(rep.a, 1.0);
    }

    #[test]
    fn datum_budget_reduces_to_one_term() {
        let tw = TwinSpec::new(drift(0.5, &[(0.0, 1.0)]), drift(0.5, &[(0.0, 1.1)]), coarse()).unwrap();
        let b = perturbation_budget(&tw, 256).unwrap();
        assert!((b.datum - 0.1).abs() < 1e-15);
        assert_eq!((b.field.value, b.kernel.value), (0.0, 0.0));
        assert_eq!(b.m, b.m_datum);
        assert!((b.m - 0.1).abs() < 1e-15);
        assert_eq!(b.lambda, 1.0 + 1.1 + 1.0);
    }

    #[test]
    fn non_osgood_twins_are_refused() {
        let mut a = drift(0.5, &[(0.0, 1.0)]);
        let half = ModulusSpec::power(0.5, 1.0).unwrap();
        a.velocity.modulus = half.clone();
        let b = a.clone();
        let tw = TwinSpec::new(a, b, coarse()).unwrap();
        let err = certify(&tw, FlowOptions::new(0.25, Scheme::Euler), AChoice::Auto, CertifySettings::default());
        assert!(matches!(err, Err(Error::CertificationRefused(_))));
    }

    #[test]
    fn mismatched_moduli_are_rejected() {
        let a = drift(0.5, &[(0.0, 1.0)]);
        let mut b = a.clone();
        b.velocity.modulus = ModulusSpec::linear(2.0).unwrap();
        assert!(matches!(TwinSpec::new(a, b, coarse()), Err(Error::Validation(_))));
    }

    #[test]
    fn twin_json_round_trip() {
        let tw = TwinSpec::new(drift(0.5, &[(0.0, 1.0)]), drift(0.25, &[(0.0, 1.0)]), coarse()).unwrap();
        let back = TwinSpec::from_json(&tw.to_json()).unwrap();
        assert_eq!(back.a, tw.a);
        assert_eq!(back.b, tw.b);
        assert_eq!(back.cloud, tw.cloud);
    }
}
