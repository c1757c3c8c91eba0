//! Characteristics of the coupled system: atoms carry mass and move under the field
//! of their own empirical measure, tracers are advected by the same field.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::MeasureSource;
use crate::measures::DiscreteMeasureVec;
use crate::scenario::ScenarioSpec;

/// Allowed mismatch between `N · Δt` and `T`.
pub const GRID_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Euler,
    /// Explicit midpoint.
    Rk2,
    Rk4,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Euler => "euler",
            Scheme::Rk2 => "rk2",
            Scheme::Rk4 => "rk4",
        }
    }

    /// Nominal order for smooth fields.
    pub fn order(self) -> u32 {
        match self {
            Scheme::Euler => 1,
            Scheme::Rk2 => 2,
            Scheme::Rk4 => 4,
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Scheme::Euler),
            "rk2" => Ok(Scheme::Rk2),
            "rk4" => Ok(Scheme::Rk4),
            other => Err(Error::Config(format!("unknown scheme \"{other}\" (euler, rk2, rk4)"))),
        }
    }
}

/// Which measure the Runge–Kutta stages see.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Coupling {
    /// Rebuilt from the stage positions of the atoms.
    #[default]
    Stage,
    /// Frozen at the start of each step.
    Frozen,
}

/// A massless point advected by the field of `species`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tracer {
    pub species: usize,
    pub x0: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowOptions {
    pub dt: f64,
    pub scheme: Scheme,
    pub coupling: Coupling,
}

impl FlowOptions {
    pub fn new(dt: f64, scheme: Scheme) -> Self {
        FlowOptions { dt, scheme, coupling: Coupling::Stage }
    }
}

/// Step count for `Δt` on `[0, T]`, refusing grids that miss `T`.
pub fn step_count(horizon: f64, dt: f64) -> Result<usize> {
    if !(dt.is_finite() && dt > 0.0 && dt <= horizon * (1.0 + GRID_TOL)) {
        return Err(Error::Config(format!("Δt must lie in (0, T] = (0, {horizon}], got {dt}")));
    }
    let n = (horizon / dt).round();
    if (n * dt - horizon).abs() > GRID_TOL * horizon.max(1.0) {
        return Err(Error::Config(format!("Δt = {dt} does not divide T = {horizon}")));
    }
    Ok(n as usize)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: f64,
    pub measure: DiscreteMeasureVec,
    /// Tracer positions, flat.
    pub tracers: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowTrajectory {
    pub dim: usize,
    pub scheme: Scheme,
    pub coupling: Coupling,
    /// Actual step `T / N`.
    pub step: f64,
    pub tracers: Vec<Tracer>,
    pub snapshots: Vec<Snapshot>,
    /// Largest `|V|` met at any stage evaluation.
    pub max_speed: f64,
}

/// Positions of all atoms (species-major) and of the free tracers.
struct State {
    atoms: Vec<f64>,
    free: Vec<f64>,
}

struct Layout {
    dim: usize,
    /// Species of each atom in the flat atom array.
    atom_species: Vec<usize>,
    /// Offsets of each species' atoms.
    offsets: Vec<usize>,
    free_species: Vec<usize>,
    /// For every tracer: aliased atom index or index into the free list.
    tracer_slot: Vec<Slot>,
}

#[derive(Clone, Copy)]
enum Slot {
    Atom(usize),
    Free(usize),
}

impl Layout {
    fn measure(&self, template: &DiscreteMeasureVec, atoms: &[f64]) -> DiscreteMeasureVec {
        let d = self.dim;
        let mut m = template.clone();
        for (i, s) in m.species.iter_mut().enumerate() {
            s.positions.copy_from_slice(&atoms[self.offsets[i] * d..self.offsets[i + 1] * d]);
        }
        m
    }

    fn tracer_positions(&self, state: &State) -> Vec<f64> {
        let d = self.dim;
        let mut out = Vec::with_capacity(self.tracer_slot.len() * d);
        for slot in &self.tracer_slot {
            match *slot {
                Slot::Atom(a) => out.extend_from_slice(&state.atoms[a * d..(a + 1) * d]),
                Slot::Free(f) => out.extend_from_slice(&state.free[f * d..(f + 1) * d]),
            }
        }
        out
    }
}

/// Evaluates the field at every point, in parallel.
fn velocities(
    s: &ScenarioSpec,
    t: f64,
    measure: &DiscreteMeasureVec,
    points: &[f64],
    species: &[usize],
    out: &mut [f64],
) -> Result<f64> {
    let d = s.dim;
    let k = s.k;
    let results: Vec<std::result::Result<f64, usize>> = out
        .par_chunks_mut(d)
        .zip(points.par_chunks(d))
        .enumerate()
        .map_init(
            || vec![0.0; k],
            |u, (n, (o, x))| {
                let i = species[n];
                measure.convolve_into(&s.kernels, i, x, u);
                s.velocity.eval_into(i, t, x, u, o);
                if o.iter().all(|v| v.is_finite()) {
                    Ok(o.iter().map(|v| v * v).sum::<f64>().sqrt())
                } else {
                    Err(n)
                }
            },
        )
        .collect();
    let mut speed: f64 = 0.0;
    for r in results {
        match r {
            Ok(v) => speed = speed.max(v),
            Err(n) => {
                return Err(Error::Integration { t, species: species[n], x: points[n * d..(n + 1) * d].to_vec() })
            }
        }
    }
    Ok(speed)
}

/// Neumaier-compensated `x += δ`.
#[inline]
fn compensated_add(x: &mut f64, c: &mut f64, delta: f64) {
    let t = *x + delta;
    if x.abs() >= delta.abs() {
        *c += (*x - t) + delta;
    } else {
        *c += (delta - t) + *x;
    }
    *x = t;
}

/// Integrates the scenario on a fixed grid, registering `tracers`.
///
/// A tracer whose initial point coincides bit-for-bit with an atom of the same
/// species follows that atom's characteristic exactly and is not integrated twice.
pub fn integrate(s: &ScenarioSpec, opts: FlowOptions, tracers: &[Tracer]) -> Result<FlowTrajectory> {
    let n_steps = step_count(s.horizon, opts.dt)?;
    let h = s.horizon / n_steps as f64;
    let d = s.dim;
    for (n, tr) in tracers.iter().enumerate() {
        if tr.species >= s.k || tr.x0.len() != d || tr.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("tracer {n} has an invalid species or position")));
        }
    }

    let mut offsets = vec![0];
    let mut atom_species = Vec::new();
    let mut atoms = Vec::new();
    for (i, sp) in s.initial.species.iter().enumerate() {
        atoms.extend_from_slice(&sp.positions);
        atom_species.extend(std::iter::repeat_n(i, sp.len()));
        offsets.push(offsets[i] + sp.len());
    }
    let mut lookup: std::collections::HashMap<(usize, Vec<u64>), usize> = std::collections::HashMap::new();
    for (a, &i) in atom_species.iter().enumerate() {
        let key = (i, atoms[a * d..(a + 1) * d].iter().map(|v| v.to_bits()).collect());
        lookup.entry(key).or_insert(a);
    }
    let mut free = Vec::new();
    let mut free_species = Vec::new();
    let mut tracer_slot = Vec::with_capacity(tracers.len());
    for tr in tracers {
        let key = (tr.species, tr.x0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        match lookup.get(&key) {
            Some(&a) => tracer_slot.push(Slot::Atom(a)),
            None => {
                tracer_slot.push(Slot::Free(free_species.len()));
                free_species.push(tr.species);
                free.extend_from_slice(&tr.x0);
            }
        }
    }
    let layout = Layout { dim: d, atom_species, offsets, free_species, tracer_slot };
    let mut state = State { atoms, free };
    let mut comp = State { atoms: vec![0.0; state.atoms.len()], free: vec![0.0; state.free.len()] };

    let mut snapshots = Vec::with_capacity(n_steps + 1);
    snapshots.push(Snapshot { t: 0.0, measure: s.initial.clone(), tracers: layout.tracer_positions(&state) });

    let (na, nf) = (state.atoms.len(), state.free.len());
    // (c_s, b_s · den); stage s starts from x + h c_s k_{s-1}
    let (stages, den): (&[(f64, f64)], f64) = match opts.scheme {
        Scheme::Euler => (&[(0.0, 1.0)], 1.0),
        Scheme::Rk2 => (&[(0.0, 0.0), (0.5, 1.0)], 1.0),
        Scheme::Rk4 => (&[(0.0, 1.0), (0.5, 2.0), (0.5, 2.0), (1.0, 1.0)], 6.0),
    };
    let mut ka = vec![0.0; na];
    let mut kf = vec![0.0; nf];
    let mut incr_a = vec![0.0; na];
    let mut incr_f = vec![0.0; nf];
    let mut stage_a = vec![0.0; na];
    let mut stage_f = vec![0.0; nf];
    let mut max_speed: f64 = 0.0;

    // positions seen by the field: running sums plus their compensation
    let mut base = State { atoms: state.atoms.clone(), free: state.free.clone() };
    for step in 0..n_steps {
        let t = step as f64 * h;
        incr_a.iter_mut().for_each(|v| *v = 0.0);
        incr_f.iter_mut().for_each(|v| *v = 0.0);
        let frozen = layout.measure(&s.initial, &base.atoms);
        for (si, &(c, b)) in stages.iter().enumerate() {
            if si == 0 {
                stage_a.copy_from_slice(&base.atoms);
                stage_f.copy_from_slice(&base.free);
            } else {
                for (x, (p, kv)) in stage_a.iter_mut().zip(base.atoms.iter().zip(&ka)) {
                    *x = p + h * c * kv;
                }
                for (x, (p, kv)) in stage_f.iter_mut().zip(base.free.iter().zip(&kf)) {
                    *x = p + h * c * kv;
                }
            }
            let ts = t + c * h;
            let stage_measure;
            let m = match opts.coupling {
                Coupling::Frozen => &frozen,
                Coupling::Stage if si == 0 => &frozen,
                Coupling::Stage => {
                    stage_measure = layout.measure(&s.initial, &stage_a);
                    &stage_measure
                }
            };
            max_speed = max_speed.max(velocities(s, ts, m, &stage_a, &layout.atom_species, &mut ka)?);
            if nf > 0 {
                max_speed = max_speed.max(velocities(s, ts, m, &stage_f, &layout.free_species, &mut kf)?);
            }
            if b != 0.0 {
                for (acc, kv) in incr_a.iter_mut().zip(&ka) {
                    *acc += b * kv;
                }
                for (acc, kv) in incr_f.iter_mut().zip(&kf) {
                    *acc += b * kv;
                }
            }
        }
        for ((x, c), v) in state.atoms.iter_mut().zip(comp.atoms.iter_mut()).zip(&incr_a) {
            compensated_add(x, c, h * (v / den));
        }
        for ((x, c), v) in state.free.iter_mut().zip(comp.free.iter_mut()).zip(&incr_f) {
            compensated_add(x, c, h * (v / den));
        }
        for (b, (x, c)) in base.atoms.iter_mut().zip(state.atoms.iter().zip(&comp.atoms)) {
            *b = x + c;
        }
        for (b, (x, c)) in base.free.iter_mut().zip(state.free.iter().zip(&comp.free)) {
            *b = x + c;
        }
        let t_next = if step + 1 == n_steps { s.horizon } else { (step + 1) as f64 * h };
        snapshots.push(Snapshot {
            t: t_next,
            measure: layout.measure(&s.initial, &base.atoms),
            tracers: layout.tracer_positions(&base),
        });
    }

    Ok(FlowTrajectory {
        dim: d,
        scheme: opts.scheme,
        coupling: opts.coupling,
        step: h,
        tracers: tracers.to_vec(),
        snapshots,
        max_speed,
    })
}

impl FlowTrajectory {
    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.t).collect()
    }

    pub fn horizon(&self) -> f64 {
        self.snapshots.last().map(|s| s.t).unwrap_or(0.0)
    }

    pub fn initial(&self) -> &DiscreteMeasureVec {
        &self.snapshots[0].measure
    }

    /// Index of the grid time `t`, if any.
    pub fn grid_index(&self, t: f64) -> Option<usize> {
        let tol = GRID_TOL * self.horizon().max(1.0);
        let guess = (t / self.step).round();
        if !(guess >= 0.0) {
            return None;
        }
        let n = guess as usize;
        self.snapshots.get(n).filter(|s| (s.t - t).abs() <= tol).map(|_| n)
    }

    /// Structural mass check: every snapshot carries the initial weights bit-for-bit.
    pub fn mass_is_constant(&self) -> bool {
        let w0: Vec<&Vec<f64>> = self.initial().species.iter().map(|s| &s.weights).collect();
        let n0 = self.initial().tv_norm();
        self.snapshots.iter().all(|snap| {
            snap.measure.species.iter().zip(&w0).all(|(s, w)| &s.weights == *w)
                && snap
                    .measure
                    .tv_norm()
                    .per_species
                    .iter()
                    .zip(&n0.per_species)
                    .all(|(a, b)| a.to_bits() == b.to_bits())
        })
    }

    /// Position of the tracer `n` at snapshot `idx`.
    pub fn tracer_at(&self, idx: usize, n: usize) -> &[f64] {
        &self.snapshots[idx].tracers[n * self.dim..(n + 1) * self.dim]
    }

    /// `X^i(t, x0)` for a registered atom or tracer initial point.
    pub fn flow_map_eval(&self, species: usize, t: f64, x0: &[f64]) -> Result<Vec<f64>> {
        let idx = self.grid_index(t).ok_or(Error::TemporalDomain(t))?;
        let d = self.dim;
        let same = |p: &[f64]| p.len() == x0.len() && p.iter().zip(x0).all(|(a, b)| a.to_bits() == b.to_bits());
        if let Some(sp) = self.initial().species.get(species) {
            if let Some(a) = (0..sp.len()).find(|&a| same(sp.position(a, d))) {
                return Ok(self.snapshots[idx].measure.species[species].position(a, d).to_vec());
            }
        }
        if let Some(n) = self.tracers.iter().position(|tr| tr.species == species && same(&tr.x0)) {
            return Ok(self.tracer_at(idx, n).to_vec());
        }
        Err(Error::Lookup(format!("x0 = {x0:?} is not a registered point of species {species}")))
    }

    /// CSV rows `t,species,id,kind,x_1..x_d,w`; tracers have weight 0.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.dim;
        let mut header = String::from("t,species,id,kind");
        for c in 1..=d {
            header.push_str(&format!(",x_{c}"));
        }
        header.push_str(",w\n");
        w.write_all(header.as_bytes())?;
        for snap in &self.snapshots {
            for (i, sp) in snap.measure.species.iter().enumerate() {
                for a in 0..sp.len() {
                    let mut line = format!("{},{i},{a},atom", snap.t);
                    for v in sp.position(a, d) {
                        line.push_str(&format!(",{v}"));
                    }
                    line.push_str(&format!(",{}\n", sp.weights[a]));
                    w.write_all(line.as_bytes())?;
                }
            }
            for (n, tr) in self.tracers.iter().enumerate() {
                let mut line = format!("{},{},{n},tracer", snap.t, tr.species);
                for v in &snap.tracers[n * d..(n + 1) * d] {
                    line.push_str(&format!(",{v}"));
                }
                line.push_str(",0\n");
                w.write_all(line.as_bytes())?;
            }
        }
        Ok(())
    }
}

impl MeasureSource for FlowTrajectory {
    fn measure_at(&self, t: f64) -> Result<&DiscreteMeasureVec> {
        self.grid_index(t).map(|n| &self.snapshots[n].measure).ok_or(Error::TemporalDomain(t))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub scheme: Scheme,
    pub steps: Vec<f64>,
    /// Max over common grid times and atoms of the position gap between rungs `j` and `j+1`.
    pub differences: Vec<f64>,
    /// `log(δ_j / δ_{j+1}) / log(Δt_j / Δt_{j+1})`.
    pub orders: Vec<f64>,
    pub converging: bool,
}

/// Runs the scenario on a geometric ladder of steps and compares consecutive rungs.
pub fn convergence_study(
    s: &ScenarioSpec,
    scheme: Scheme,
    coupling: Coupling,
    steps: &[f64],
) -> Result<ConvergenceReport> {
    if steps.len() < 3 {
        return Err(Error::Config("a convergence ladder needs at least 3 steps".into()));
    }
    if steps.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::Config("ladder steps must decrease".into()));
    }
    let runs: Vec<FlowTrajectory> =
        steps.iter().map(|&dt| integrate(s, FlowOptions { dt, scheme, coupling }, &[])).collect::<Result<_>>()?;
    let mut differences = Vec::new();
    for pair in runs.windows(2) {
        let (coarse, fine) = (&pair[0], &pair[1]);
        let mut gap: f64 = 0.0;
        for snap in &coarse.snapshots {
            let Some(j) = fine.grid_index(snap.t) else {
                return Err(Error::Config(format!(
                    "ladder rungs {} and {} share no grid time {}",
                    coarse.step, fine.step, snap.t
                )));
            };
            let other = &fine.snapshots[j].measure;
            for (a, b) in snap.measure.species.iter().zip(&other.species) {
                for (p, q) in a.positions.chunks_exact(s.dim).zip(b.positions.chunks_exact(s.dim)) {
                    gap = gap.max(crate::kernels::dist(p, q));
                }
            }
        }
        differences.push(gap);
    }
    let orders: Vec<f64> = differences
        .windows(2)
        .zip(steps.windows(2))
        .map(|(dd, ss)| if dd[1] == 0.0 { f64::INFINITY } else { (dd[0] / dd[1]).ln() / (ss[0] / ss[1]).ln() })
        .collect();
    let converging = differences.iter().all(|&v| v == 0.0) || differences.windows(2).all(|w| w[1] < w[0]);
    Ok(ConvergenceReport { scheme, steps: steps.to_vec(), differences, orders, converging })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{FieldPreset, Profile, VelocityFieldSpec};
    use crate::kernels::{Kernel, KernelVec};
    use crate::moduli::ModulusSpec;

    fn lin(l: f64) -> ModulusSpec {
        ModulusSpec::linear(l).unwrap()
    }

    fn constant_scenario(c: f64, atoms: &[f64]) -> ScenarioSpec {
        let v = VelocityFieldSpec::uniform(1, 1, FieldPreset::Constant { c: vec![c] }, c.abs(), lin(1.0)).unwrap();
        let kv = KernelVec::uniform(1, Kernel::Hat { width: 1.0, height: 1.0 }, lin(1.0), 1.0).unwrap();
        let mut m = DiscreteMeasureVec::empty(1, 1);
        for &p in atoms {
            m.push(0, &[p], 1.0);
        }
        ScenarioSpec::new("constant", 1.0, v, kv, m).unwrap()
    }

    #[test]
    fn constant_field_reaches_exact_endpoint() {
        let s = constant_scenario(1.0, &[0.0]);
        for scheme in [Scheme::Euler, Scheme::Rk2, Scheme::Rk4] {
            for dt in [0.25, 0.1, 1e-3] {
                let traj = integrate(&s, FlowOptions::new(dt, scheme), &[]).unwrap();
                assert_eq!(traj.horizon(), 1.0);
                assert_eq!(traj.snapshots.last().unwrap().measure.species[0].positions[0], 1.0, "{scheme:?} {dt}");
                assert_eq!(traj.snapshots[0].measure, s.initial);
            }
        }
    }

    #[test]
    fn grid_must_divide_horizon() {
        let s = constant_scenario(1.0, &[0.0]);
        assert!(matches!(integrate(&s, FlowOptions::new(0.3, Scheme::Euler), &[]), Err(Error::Config(_))));
        assert!(matches!(integrate(&s, FlowOptions::new(2.0, Scheme::Euler), &[]), Err(Error::Config(_))));
    }

    #[test]
    fn flow_map_lookup() {
        let s = constant_scenario(0.5, &[0.0, 1.0]);
        let tr = [Tracer { species: 0, x0: vec![3.0] }, Tracer { species: 0, x0: vec![1.0] }];
        let traj = integrate(&s, FlowOptions::new(0.125, Scheme::Rk4), &tr).unwrap();
        assert_eq!(traj.flow_map_eval(0, 0.0, &[3.0]).unwrap(), vec![3.0]);
        assert_eq!(traj.flow_map_eval(0, 1.0, &[3.0]).unwrap(), vec![3.5]);
        assert_eq!(traj.flow_map_eval(0, 0.5, &[1.0]).unwrap(), vec![1.25]);
        assert_eq!(
            traj.flow_map_eval(0, 0.5, &[1.0]).unwrap(),
            traj.snapshots[4].measure.species[0].positions[1..2].to_vec()
        );
        assert!(matches!(traj.flow_map_eval(0, 0.5, &[2.0]), Err(Error::Lookup(_))));
        assert!(matches!(traj.flow_map_eval(0, 0.51, &[1.0]), Err(Error::TemporalDomain(_))));
        assert!(traj.mass_is_constant());
    }

    #[test]
    fn non_finite_velocity_is_reported() {
        let v = VelocityFieldSpec::uniform(
            1,
            1,
            FieldPreset::LinearU { gain: vec![1.0], sat: 1.0, profile: Profile::Linear },
            1.0,
            lin(1.0),
        )
        .unwrap();
        let kv = KernelVec::uniform(1, Kernel::Hat { width: 1.0, height: 1.0 }, lin(1.0), 1.0).unwrap();
        let mut m = DiscreteMeasureVec::empty(1, 1);
        m.push(0, &[0.0], 1.0);
        let mut s = ScenarioSpec::new("x", 1.0, v, kv, m).unwrap();
        // bypass validation to inject a field that is NaN at t = 0
        s.velocity.presets[0] = FieldPreset::TimeMod {
            base: Box::new(FieldPreset::Constant { c: vec![1.0] }),
            freq: f64::INFINITY,
            depth: 0.5,
        };
        match integrate(&s, FlowOptions::new(0.5, Scheme::Euler), &[]) {
            Err(Error::Integration { t, species, x }) => {
                assert_eq!((t, species), (0.0, 0));
                assert_eq!(x, vec![0.0]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_layout() {
        let s = constant_scenario(1.0, &[0.0]);
        let traj =
            integrate(&s, FlowOptions::new(0.5, Scheme::Euler), &[Tracer { species: 0, x0: vec![2.0] }]).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,species,id,kind,x_1,w");
        assert_eq!(lines[1], "0,0,0,atom,0,1");
        assert_eq!(lines[2], "0,0,0,tracer,2,0");
        assert_eq!(lines[6], "1,0,0,tracer,3,0");
    }
}
