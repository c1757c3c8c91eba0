//! Interaction kernels `η^{ij}: R^d → R` and the `k × k` kernel matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moduli::ModulusSpec;
use crate::sampling::{bump_nodes, halton, AxisBox};

/// Tolerance of the sampled bound and modulus checks.
pub const SAMPLE_TOL: f64 = 1e-9;

/// A preset kernel, serialized as `{"family": ..., "params": {...}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum Kernel {
    Zero {},
    /// `height · max(0, 1 - |z| / width)`.
    Hat {
        width: f64,
        height: f64,
    },
    /// `height · exp(-|z|² / 2σ²)`.
    Gaussian {
        sigma: f64,
        height: f64,
    },
    /// `height · (z_1 / σ) exp(-|z|² / 2σ²)`, odd in the first coordinate.
    OddGaussian {
        sigma: f64,
        height: f64,
    },
    /// `inner` averaged over a bump of radius `width` with `nodes` points per axis.
    Mollified {
        inner: Box<Kernel>,
        width: f64,
        #[serde(default = "default_nodes")]
        nodes: usize,
    },
}

fn default_nodes() -> usize {
    5
}

impl Kernel {
    pub fn name(&self) -> &'static str {
        match self {
            Kernel::Zero {} => "zero",
            Kernel::Hat { .. } => "hat",
            Kernel::Gaussian { .. } => "gaussian",
            Kernel::OddGaussian { .. } => "odd_gaussian",
            Kernel::Mollified { .. } => "mollified",
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let positive = |name: &str, v: f64, out: &mut Vec<String>| {
            if !(v.is_finite() && v > 0.0) {
                out.push(format!("{} kernel: {name} must be positive, got {v}", self.name()));
            }
        };
        let finite = |name: &str, v: f64, out: &mut Vec<String>| {
            if !v.is_finite() {
                out.push(format!("{} kernel: {name} must be finite, got {v}", self.name()));
            }
        };
        match self {
            Kernel::Zero {} => {}
            Kernel::Hat { width, height } => {
                positive("width", *width, &mut out);
                finite("height", *height, &mut out);
            }
            Kernel::Gaussian { sigma, height } | Kernel::OddGaussian { sigma, height } => {
                positive("sigma", *sigma, &mut out);
                finite("height", *height, &mut out);
            }
            Kernel::Mollified { inner, width, nodes } => {
                positive("width", *width, &mut out);
                if *nodes == 0 {
                    out.push("mollified kernel: nodes must be at least 1".into());
                }
                out.extend(inner.validate());
            }
        }
        out
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        match self {
            Kernel::Zero {} => 0.0,
            Kernel::Hat { width, height } => height * (1.0 - norm(z) / width).max(0.0),
            Kernel::Gaussian { sigma, height } => height * (-norm_sq(z) / (2.0 * sigma * sigma)).exp(),
            Kernel::OddGaussian { sigma, height } => {
                height * (z[0] / sigma) * (-norm_sq(z) / (2.0 * sigma * sigma)).exp()
            }
            Kernel::Mollified { inner, width, nodes } => {
                let mut shifted = vec![0.0; z.len()];
                bump_nodes(z.len(), *nodes)
                    .iter()
                    .map(|(xi, w)| {
                        for (s, (zc, x)) in shifted.iter_mut().zip(z.iter().zip(xi)) {
                            *s = zc - width * x;
                        }
                        w * inner.eval(&shifted)
                    })
                    .sum()
            }
        }
    }

    /// `Σ_a w_a η(x - p_a)` over atoms stored flat in `positions`.
    pub fn accumulate(&self, x: &[f64], positions: &[f64], weights: &[f64]) -> f64 {
        let d = x.len();
        match self {
            Kernel::Zero {} => 0.0,
            Kernel::Hat { width, height } if d == 1 => {
                let inv = 1.0 / width;
                let s: f64 =
                    positions.iter().zip(weights).map(|(p, w)| w * (1.0 - (x[0] - p).abs() * inv).max(0.0)).sum();
                height * s
            }
            Kernel::Hat { width, height } => {
                let inv = 1.0 / width;
                let s: f64 =
                    positions.chunks_exact(d).zip(weights).map(|(p, w)| w * (1.0 - dist(x, p) * inv).max(0.0)).sum();
                height * s
            }
            Kernel::Gaussian { sigma, height } => {
                let c = -0.5 / (sigma * sigma);
                let s: f64 = positions.chunks_exact(d).zip(weights).map(|(p, w)| w * (c * dist_sq(x, p)).exp()).sum();
                height * s
            }
            Kernel::OddGaussian { sigma, height } => {
                let c = -0.5 / (sigma * sigma);
                let s: f64 = positions
                    .chunks_exact(d)
                    .zip(weights)
                    .map(|(p, w)| w * (x[0] - p[0]) * (c * dist_sq(x, p)).exp())
                    .sum();
                height * s / sigma
            }
            Kernel::Mollified { .. } => {
                let mut z = vec![0.0; d];
                positions
                    .chunks_exact(d)
                    .zip(weights)
                    .map(|(p, w)| {
                        for (zc, (a, b)) in z.iter_mut().zip(x.iter().zip(p)) {
                            *zc = a - b;
                        }
                        w * self.eval(&z)
                    })
                    .sum()
            }
        }
    }

    /// `sup |η|` in closed form (an upper bound for mollified kernels).
    pub fn sup(&self) -> f64 {
        match self {
            Kernel::Zero {} => 0.0,
            Kernel::Hat { height, .. } | Kernel::Gaussian { height, .. } => height.abs(),
            Kernel::OddGaussian { height, .. } => height.abs() * (-0.5f64).exp(),
            Kernel::Mollified { inner, .. } => inner.sup(),
        }
    }

    /// Lipschitz constant with respect to the Euclidean norm.
    pub fn lipschitz(&self) -> f64 {
        match self {
            Kernel::Zero {} => 0.0,
            Kernel::Hat { width, height } => height.abs() / width,
            Kernel::Gaussian { sigma, height } => height.abs() / (sigma * std::f64::consts::E.sqrt()),
            Kernel::OddGaussian { sigma, height } => height.abs() / sigma,
            Kernel::Mollified { inner, .. } => inner.lipschitz(),
        }
    }

    /// Radius outside which the kernel vanishes or is below `1e-16 · sup`.
    pub fn reach(&self) -> f64 {
        match self {
            Kernel::Zero {} => 0.0,
            Kernel::Hat { width, .. } => *width,
            Kernel::Gaussian { sigma, .. } | Kernel::OddGaussian { sigma, .. } => 8.6 * sigma,
            Kernel::Mollified { inner, width, .. } => inner.reach() + width,
        }
    }

    /// `sup_z |self(z) - other(z)|` when a closed form is known.
    pub fn closed_sup_distance(&self, other: &Kernel) -> Option<f64> {
        if self == other {
            return Some(0.0);
        }
        match (self, other) {
            (Kernel::Zero {}, k) | (k, Kernel::Zero {}) if !matches!(k, Kernel::Mollified { .. }) => Some(k.sup()),
            (Kernel::Hat { width: w1, height: h1 }, Kernel::Hat { width: w2, height: h2 }) => {
                if w1 == w2 {
                    Some((h1 - h2).abs())
                } else if h1 == h2 {
                    let (a, b) = if w1 < w2 { (w1, w2) } else { (w2, w1) };
                    Some(h1.abs() * (1.0 - a / b))
                } else {
                    None
                }
            }
            (Kernel::Gaussian { sigma: s1, height: h1 }, Kernel::Gaussian { sigma: s2, height: h2 }) => {
                if s1 == s2 {
                    Some((h1 - h2).abs())
                } else if h1 == h2 {
                    // with y = |z|²/2 the difference is h(e^{-αy} - e^{-βy})
                    let (alpha, beta) = (1.0 / (s1 * s1), 1.0 / (s2 * s2));
                    let y = (alpha / beta).ln() / (alpha - beta);
                    Some(h1.abs() * ((-alpha * y).exp() - (-beta * y).exp()).abs())
                } else {
                    None
                }
            }
            (Kernel::OddGaussian { sigma: s1, height: h1 }, Kernel::OddGaussian { sigma: s2, height: h2 })
                if s1 == s2 =>
            {
                Some((h1 - h2).abs() * (-0.5f64).exp())
            }
            _ => None,
        }
    }
}

#[inline]
pub(crate) fn norm_sq(z: &[f64]) -> f64 {
    z.iter().map(|v| v * v).sum()
}

#[inline]
pub(crate) fn norm(z: &[f64]) -> f64 {
    norm_sq(z).sqrt()
}

#[inline]
pub(crate) fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    dist_sq(a, b).sqrt()
}

/// The kernel matrix `(η^{ij})` with its declared modulus `ω_η` and bound `‖η‖`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelVec {
    pub k: usize,
    /// Row-major: entry `(i, j)` at `i * k + j`.
    pub entries: Vec<Kernel>,
    pub modulus: ModulusSpec,
    pub sup_bound: f64,
}

/// File form: `entries` is either one kernel used for every pair or a row-major list of `k²`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelDecl {
    pub entries: OneOrMany<Kernel>,
    pub modulus: ModulusSpec,
    pub sup_bound: f64,
}

#[derive(Clone, Debug, Serialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    Many(Vec<T>),
    One(T),
}

// dispatch on the JSON shape so that errors from the inner type survive
impl<'de, T: serde::de::DeserializeOwned> Deserialize<'de> for OneOrMany<T> {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let v = serde_json::Value::deserialize(de)?;
        if v.is_array() {
            serde_json::from_value(v).map(OneOrMany::Many).map_err(D::Error::custom)
        } else {
            serde_json::from_value(v).map(OneOrMany::One).map_err(D::Error::custom)
        }
    }
}

impl KernelVec {
    pub fn new(k: usize, entries: Vec<Kernel>, modulus: ModulusSpec, sup_bound: f64) -> Result<Self> {
        let mut problems = Vec::new();
        if entries.len() != k * k {
            problems.push(format!("kernel matrix needs k² = {} entries, got {}", k * k, entries.len()));
        }
        if !(sup_bound.is_finite() && sup_bound >= 0.0) {
            problems.push(format!("kernel sup_bound must be nonnegative, got {sup_bound}"));
        }
        for (n, e) in entries.iter().enumerate() {
            for p in e.validate() {
                problems.push(format!("kernel ({}, {}): {p}", n / k.max(1), n % k.max(1)));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        Ok(KernelVec { k, entries, modulus, sup_bound })
    }

    /// Same kernel for every pair.
    pub fn uniform(k: usize, kernel: Kernel, modulus: ModulusSpec, sup_bound: f64) -> Result<Self> {
        Self::new(k, vec![kernel; k * k], modulus, sup_bound)
    }

    pub fn from_decl(decl: KernelDecl, k: usize) -> Result<Self> {
        let entries = match decl.entries {
            OneOrMany::One(kern) => vec![kern; k * k],
            OneOrMany::Many(v) => v,
        };
        Self::new(k, entries, decl.modulus, decl.sup_bound)
    }

    pub fn to_decl(&self) -> KernelDecl {
        KernelDecl {
            entries: OneOrMany::Many(self.entries.clone()),
            modulus: self.modulus.clone(),
            sup_bound: self.sup_bound,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> &Kernel {
        &self.entries[i * self.k + j]
    }

    /// Largest radius at which any entry is non-negligible.
    pub fn reach(&self) -> f64 {
        self.entries.iter().map(Kernel::reach).fold(0.0, f64::max)
    }

    /// Sampled checks of the declared bound and modulus on `[-half, half]^dim`.
    pub fn sampled_violations(&self, dim: usize, half: f64, samples: u64) -> Vec<String> {
        let cube = AxisBox::cube(dim, half);
        let mut out = Vec::new();
        for (n, kern) in self.entries.iter().enumerate() {
            let (i, j) = (n / self.k, n % self.k);
            if kern.sup() > self.sup_bound + SAMPLE_TOL {
                out.push(format!(
                    "kernel ({i}, {j}) has sup {} above the declared bound {}",
                    kern.sup(),
                    self.sup_bound
                ));
                continue;
            }
            for s in 1..=samples {
                let u = halton(s, 2 * dim);
                let x = cube.place(&u[..dim]);
                // second point at a log-spread distance from the first
                let scale = half * 10f64.powf(-6.0 * u[dim]);
                let y: Vec<f64> = x.iter().zip(&u[dim..]).map(|(a, v)| a + scale * (2.0 * v - 1.0)).collect();
                let (ex, ey) = (kern.eval(&x), kern.eval(&y));
                if ex.abs() > self.sup_bound + SAMPLE_TOL {
                    out.push(format!("kernel ({i}, {j}) exceeds its bound at {x:?}"));
                    break;
                }
                if (ex - ey).abs() > self.modulus.value(dist(&x, &y)) + SAMPLE_TOL {
                    out.push(format!("kernel ({i}, {j}) violates ω_η = {} between {x:?} and {y:?}", self.modulus));
                    break;
                }
            }
        }
        out
    }
}

/// Result of a sup-distance estimate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SupDistance {
    pub value: f64,
    /// Every component came from a closed form.
    pub exact: bool,
    pub sampled: f64,
    pub samples: u64,
}

/// `Σ_{ij} sup |η^{ij} - ν^{ij}|`, closed form where available, Halton-sampled on `region` otherwise.
pub fn sup_distance_kernels(eta: &KernelVec, nu: &KernelVec, region: &AxisBox, n: u64) -> Result<SupDistance> {
    if eta.k != nu.k {
        return Err(Error::Domain(format!("kernel matrices have k = {} and {}", eta.k, nu.k)));
    }
    let mut value = 0.0;
    let mut sampled_total = 0.0;
    let mut exact = true;
    for (a, b) in eta.entries.iter().zip(&nu.entries) {
        let mut sampled: f64 = 0.0;
        if a != b {
            for s in 1..=n {
                let x = region.place(&halton(s, region.dim()));
                sampled = sampled.max((a.eval(&x) - b.eval(&x)).abs());
            }
        }
        sampled_total += sampled;
        match a.closed_sup_distance(b) {
            Some(c) => value += c,
            None => {
                exact = false;
                value += sampled;
            }
        }
    }
    Ok(SupDistance { value, exact, sampled: sampled_total, samples: n })
}
