//! Scenario files: the problem datum `(T, d, k, V, η, ρ̄)` and run configuration.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::fields::{FieldRegion, VelocityDecl, VelocityFieldSpec};
use crate::kernels::{KernelDecl, KernelVec};
use crate::measures::{AtomRecord, DiscreteMeasureVec};
use crate::sampling::AxisBox;

pub const SCHEMA_VERSION: u32 = 1;
/// Name recorded in manifests for the sampling generator.
pub const RNG_NAME: &str = "ChaCha8 (rand_chacha 0.3), stream = species index";

/// Samples drawn by the (V)/(η) checks run at load time.
const VALIDATION_SAMPLES: u64 = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub name: String,
    pub horizon: f64,
    pub dim: usize,
    pub k: usize,
    pub velocity: VelocityFieldSpec,
    pub kernels: KernelVec,
    pub initial: DiscreteMeasureVec,
}

/// How a density becomes atoms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Midpoint tensor grid, weights proportional to the density.
    Grid,
    /// Independent draws with equal weights.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Density {
    Gaussian { mean: Vec<f64>, sigma: f64 },
    Uniform { lo: Vec<f64>, hi: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub species: usize,
    pub density: Density,
    pub mass: f64,
    /// Atom count (per axis for grids this is rounded to `m^d`).
    pub atoms: usize,
    pub layout: Layout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeSet {
    pub seed: u64,
    pub recipes: Vec<Recipe>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema: u32,
    #[serde(default)]
    pub name: String,
    pub horizon: f64,
    pub dim: usize,
    pub species: usize,
    pub velocity: VelocityDecl,
    pub kernels: KernelDecl,
    /// A list of atoms or a [`RecipeSet`].
    pub initial: Value,
}

fn serde_error(context: &str, e: serde_json::Error) -> Error {
    let msg = e.to_string();
    if msg.contains("unknown variant") || msg.contains("unknown preset") {
        Error::UnknownPreset(format!("{context}: {msg}"))
    } else {
        Error::Parse(format!("{context}: {msg}"))
    }
}

impl RecipeSet {
    /// Expands the recipes into atoms; species `i` draws from stream `i` of the seeded generator.
    pub fn expand(&self, k: usize, dim: usize) -> Result<DiscreteMeasureVec> {
        let mut problems = Vec::new();
        let mut m = DiscreteMeasureVec::empty(k, dim);
        for (n, r) in self.recipes.iter().enumerate() {
            let before = problems.len();
            if r.species >= k {
                problems.push(format!("recipe {n}: species {} out of range 0..{k}", r.species));
            }
            if !(r.mass.is_finite() && r.mass >= 0.0) {
                problems.push(format!("recipe {n}: mass {} violates nonnegativity", r.mass));
            }
            if r.atoms == 0 {
                problems.push(format!("recipe {n}: needs at least one atom"));
            }
            match &r.density {
                Density::Gaussian { mean, sigma } => {
                    if mean.len() != dim {
                        problems.push(format!("recipe {n}: mean needs {dim} coordinates"));
                    }
                    if !(sigma.is_finite() && *sigma > 0.0) {
                        problems.push(format!("recipe {n}: sigma must be positive"));
                    }
                }
                Density::Uniform { lo, hi } => {
                    if AxisBox::new(lo.clone(), hi.clone()).map(|b| b.dim() != dim).unwrap_or(true) {
                        problems.push(format!("recipe {n}: uniform box must be ordered with {dim} coordinates"));
                    }
                }
            }
            if problems.len() > before {
                continue;
            }
            let atoms = match r.layout {
                Layout::Grid => grid_atoms(&r.density, r.atoms, dim),
                Layout::Random => {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                    rng.set_stream(r.species as u64);
                    random_atoms(&r.density, r.atoms, dim, &mut rng)
                }
            };
            let total: f64 = atoms.iter().map(|a| a.1).sum();
            for (p, w) in atoms {
                m.push(r.species, &p, r.mass * w / total);
            }
        }
        if problems.is_empty() {
            Ok(m)
        } else {
            Err(Error::Validation(problems))
        }
    }
}

fn grid_atoms(density: &Density, atoms: usize, dim: usize) -> Vec<(Vec<f64>, f64)> {
    let per_axis = ((atoms as f64).powf(1.0 / dim as f64).round() as usize).max(1);
    let (lo, hi): (Vec<f64>, Vec<f64>) = match density {
        Density::Gaussian { mean, sigma } => {
            (mean.iter().map(|m| m - 4.0 * sigma).collect(), mean.iter().map(|m| m + 4.0 * sigma).collect())
        }
        Density::Uniform { lo, hi } => (lo.clone(), hi.clone()),
    };
    let mut out = Vec::with_capacity(per_axis.pow(dim as u32));
    let mut idx = vec![0usize; dim];
    loop {
        let p: Vec<f64> = (0..dim).map(|c| lo[c] + (hi[c] - lo[c]) * (idx[c] as f64 + 0.5) / per_axis as f64).collect();
        let w = match density {
            Density::Gaussian { mean, sigma } => {
                let r2: f64 = p.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
                (-0.5 * r2 / (sigma * sigma)).exp()
            }
            Density::Uniform { .. } => 1.0,
        };
        out.push((p, w));
        let mut c = 0;
        loop {
            if c == dim {
                return out;
            }
            idx[c] += 1;
            if idx[c] < per_axis {
                break;
            }
            idx[c] = 0;
            c += 1;
        }
    }
}

fn random_atoms(density: &Density, atoms: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<(Vec<f64>, f64)> {
    (0..atoms)
        .map(|_| {
            let p = match density {
                Density::Gaussian { mean, sigma } => {
                    let normal = Normal::new(0.0, *sigma).expect("sigma validated");
                    mean.iter().map(|m| m + normal.sample(rng)).collect()
                }
                Density::Uniform { lo, hi } => (0..dim).map(|c| rng.gen_range(lo[c]..=hi[c])).collect(),
            };
            (p, 1.0)
        })
        .collect()
}

impl ScenarioSpec {
    /// Assembles and validates a scenario, reporting every violated invariant.
    pub fn new(
        name: impl Into<String>,
        horizon: f64,
        velocity: VelocityFieldSpec,
        kernels: KernelVec,
        initial: DiscreteMeasureVec,
    ) -> Result<Self> {
        let s =
            ScenarioSpec { name: name.into(), horizon, dim: velocity.dim, k: velocity.k(), velocity, kernels, initial };
        let problems = s.violations();
        if problems.is_empty() {
            Ok(s)
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            out.push(format!("horizon T must be positive, got {}", self.horizon));
        }
        if self.dim == 0 {
            out.push("dimension d must be at least 1".into());
        }
        if self.k == 0 {
            out.push("species count k must be at least 1".into());
        }
        if self.kernels.k != self.k {
            out.push(format!("kernel matrix is {0}×{0} but k = {1}", self.kernels.k, self.k));
        }
        if self.initial.k() != self.k || self.initial.dim != self.dim {
            out.push(format!(
                "initial measure has k = {}, d = {}; scenario has k = {}, d = {}",
                self.initial.k(),
                self.initial.dim,
                self.k,
                self.dim
            ));
        }
        out.extend(self.initial.violations().into_iter().map(|v| format!("initial measure: {v}")));
        for (name, m) in [("ω_V", &self.velocity.modulus), ("ω_η", &self.kernels.modulus)] {
            out.extend(m.shape_violations().into_iter().map(|v| format!("{name}: {v}")));
        }
        if !out.is_empty() {
            return out;
        }
        let region = self.field_region(0.0);
        out.extend(self.kernels.sampled_violations(self.dim, region.x.hi[0] - region.x.lo[0], VALIDATION_SAMPLES));
        out.extend(self.velocity.sampled_violations(&region, VALIDATION_SAMPLES));
        out
    }

    /// Box containing every position reachable by `T`, padded by `pad`.
    pub fn reachable_box(&self, pad: f64) -> AxisBox {
        let d = self.dim;
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for s in &self.initial.species {
            for p in s.positions.chunks_exact(d) {
                for c in 0..d {
                    lo[c] = lo[c].min(p[c]);
                    hi[c] = hi[c].max(p[c]);
                }
            }
        }
        let travel = self.velocity.sup_bound * self.horizon + pad;
        for c in 0..d {
            if !lo[c].is_finite() {
                lo[c] = 0.0;
                hi[c] = 0.0;
            }
            lo[c] -= travel;
            hi[c] += travel;
        }
        AxisBox { lo, hi }
    }

    /// Default comparison region: reachable box widened by the kernel reach, `u` over its reachable range.
    pub fn field_region(&self, pad: f64) -> FieldRegion {
        let x = self.reachable_box(pad + self.kernels.reach().max(1.0));
        FieldRegion::reachable(x, self.initial.tv_norm().total, self.kernels.sup_bound, self.horizon)
    }

    pub fn from_file_struct(f: ScenarioFile) -> Result<Self> {
        if f.schema != SCHEMA_VERSION {
            return Err(Error::Validation(vec![format!("schema must be {SCHEMA_VERSION}, got {}", f.schema)]));
        }
        let (dim, k) = (f.dim, f.species);
        let mut problems = Vec::new();
        if dim == 0 {
            problems.push("dimension d must be at least 1".into());
        }
        if k == 0 {
            problems.push("species count k must be at least 1".into());
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        let mut fatal = None;
        let mut collect = |r: Result<()>| {
            if let Err(e) = r {
                match e {
                    Error::Validation(v) => problems.extend(v),
                    other => {
                        fatal.get_or_insert(other);
                    }
                }
            }
        };
        let mut velocity = None;
        collect(VelocityFieldSpec::from_decl(f.velocity, dim, k).map(|v| velocity = Some(v)));
        let mut kernels = None;
        collect(KernelVec::from_decl(f.kernels, k).map(|v| kernels = Some(v)));
        let mut initial = None;
        collect(initial_from_value(f.initial, k, dim).map(|v| initial = Some(v)));
        if let Some(e) = fatal {
            return Err(e);
        }
        match (velocity, kernels, initial) {
            (Some(v), Some(kv), Some(m)) if problems.is_empty() => {
                let mut s = ScenarioSpec::new(f.name, f.horizon, v, kv, m);
                if let Err(Error::Validation(v)) = &mut s {
                    v.splice(0..0, problems);
                }
                s
            }
            _ => {
                if !(f.horizon.is_finite() && f.horizon > 0.0) {
                    problems.push(format!("horizon T must be positive, got {}", f.horizon));
                }
                Err(Error::Validation(problems))
            }
        }
    }

    pub fn to_file_struct(&self) -> ScenarioFile {
        ScenarioFile {
            schema: SCHEMA_VERSION,
            name: self.name.clone(),
            horizon: self.horizon,
            dim: self.dim,
            species: self.k,
            velocity: self.velocity.to_decl(),
            kernels: self.kernels.to_decl(),
            initial: serde_json::to_value(self.initial.to_records()).expect("atoms serialize"),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ScenarioFile = serde_json::from_str(text).map_err(|e| serde_error("scenario", e))?;
        Self::from_file_struct(f)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file_struct()).expect("scenario serializes")
    }
}

fn initial_from_value(v: Value, k: usize, dim: usize) -> Result<DiscreteMeasureVec> {
    if v.is_array() {
        let atoms: Vec<AtomRecord> = serde_json::from_value(v).map_err(|e| serde_error("initial atoms", e))?;
        DiscreteMeasureVec::from_records(k, dim, &atoms)
    } else {
        let set: RecipeSet = serde_json::from_value(v).map_err(|e| serde_error("initial recipes", e))?;
        set.expand(k, dim)
    }
}

/// Reads and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<ScenarioSpec> {
    let text = std::fs::read_to_string(path)?;
    ScenarioSpec::from_json(&text).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema": 1,
        "horizon": 1.0,
        "dim": 1,
        "species": 1,
        "velocity": {"family": "constant", "params": {"c": [1.0]}, "sup_bound": 1.0,
                     "modulus": {"family": "linear", "scale": 1.0}},
        "kernels": {"entries": {"family": "hat", "params": {"width": 1.0, "height": 1.0}},
                    "modulus": {"family": "linear", "scale": 1.0}, "sup_bound": 1.0},
        "initial": [{"species": 0, "pos": [0.0], "w": 1.0}]
    }"#;

    #[test]
    fn minimal_file_loads() {
        let s = ScenarioSpec::from_json(MINIMAL).unwrap();
        assert_eq!((s.k, s.dim), (1, 1));
        assert_eq!(s.initial.tv_norm().total, 1.0);
        let again = ScenarioSpec::from_json(&s.to_json()).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn negative_weight_names_nonnegativity() {
        let text = MINIMAL.replace(r#""w": 1.0"#, r#""w": -0.5"#);
        let err = ScenarioSpec::from_json(&text).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("nonnegativ"), "{err}");
    }

    #[test]
    fn every_violation_is_listed() {
        let text = MINIMAL.replace(r#""w": 1.0"#, r#""w": -0.5"#).replace(r#""width": 1.0"#, r#""width": -1.0"#);
        match ScenarioSpec::from_json(&text).unwrap_err() {
            Error::Validation(v) => assert!(v.len() >= 2, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_presets_are_reported() {
        let text = MINIMAL.replace(r#""family": "hat""#, r#""family": "spline""#);
        assert!(matches!(ScenarioSpec::from_json(&text), Err(Error::UnknownPreset(_))));
        let text = MINIMAL.replace(r#""family": "constant""#, r#""family": "vortex""#);
        assert!(matches!(ScenarioSpec::from_json(&text), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn syntax_errors_carry_position() {
        let err = ScenarioSpec::from_json("{\n  \"schema\": 1,\n  oops }").unwrap_err();
        assert!(matches!(err, Error::Parse(ref m) if m.contains("line 3")), "{err}");
    }

    #[test]
    fn non_osgood_modulus_still_loads() {
        let text = MINIMAL.replace(
            r#""modulus": {"family": "linear", "scale": 1.0}},
        "kernels""#,
            r#""modulus": {"family": "power", "alpha": 0.5, "scale": 1.0}},
        "kernels""#,
        );
        let s = ScenarioSpec::from_json(&text).unwrap();
        assert_eq!(s.velocity.modulus.family().name(), "power");
    }

    #[test]
    fn recipes_are_deterministic() {
        let set = RecipeSet {
            seed: 7,
            recipes: vec![
                Recipe {
                    species: 0,
                    density: Density::Gaussian { mean: vec![0.0], sigma: 0.5 },
                    mass: 1.0,
                    atoms: 32,
                    layout: Layout::Random,
                },
                Recipe {
                    species: 1,
                    density: Density::Uniform { lo: vec![-1.0], hi: vec![1.0] },
                    mass: 2.0,
                    atoms: 10,
                    layout: Layout::Grid,
                },
            ],
        };
        let a = set.expand(2, 1).unwrap();
        let b = set.expand(2, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.species[0].len(), 32);
        assert!((a.tv_norm().per_species[1] - 2.0).abs() < 1e-14);
        assert_eq!(a.species[1].positions[0], -0.9);
    }
}
