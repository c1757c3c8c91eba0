//! Vectors of nonnegative atomic measures on `R^d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{dist, KernelVec};

/// Atoms of one species: positions stored flat (`n · d` values) and weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpeciesAtoms {
    pub positions: Vec<f64>,
    pub weights: Vec<f64>,
}

impl SpeciesAtoms {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn position(&self, a: usize, dim: usize) -> &[f64] {
        &self.positions[a * dim..(a + 1) * dim]
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// `ρ = (ρ^1, …, ρ^k)`, each `ρ^i = Σ_a w_a δ_{p_a}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasureVec {
    pub dim: usize,
    pub species: Vec<SpeciesAtoms>,
}

/// One atom as it appears in files: `{"species": i, "pos": [...], "w": ...}` (species 0-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomRecord {
    pub species: usize,
    pub pos: Vec<f64>,
    pub w: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvNorm {
    pub per_species: Vec<f64>,
    pub total: f64,
}

impl DiscreteMeasureVec {
    pub fn empty(k: usize, dim: usize) -> Self {
        DiscreteMeasureVec { dim, species: vec![SpeciesAtoms::default(); k] }
    }

    pub fn k(&self) -> usize {
        self.species.len()
    }

    pub fn atom_count(&self) -> usize {
        self.species.iter().map(SpeciesAtoms::len).sum()
    }

    pub fn push(&mut self, species: usize, pos: &[f64], w: f64) {
        assert_eq!(pos.len(), self.dim, "atom dimension mismatch");
        let s = &mut self.species[species];
        s.positions.extend_from_slice(pos);
        s.weights.push(w);
    }

    /// Builds from file records, listing every problem found.
    pub fn from_records(k: usize, dim: usize, records: &[AtomRecord]) -> Result<Self> {
        let mut problems = Vec::new();
        let mut m = Self::empty(k, dim);
        for (n, r) in records.iter().enumerate() {
            let mut ok = true;
            if r.species >= k {
                problems.push(format!("atom {n}: species {} out of range 0..{k}", r.species));
                ok = false;
            }
            if r.pos.len() != dim {
                problems.push(format!("atom {n}: position has {} coordinates, expected {dim}", r.pos.len()));
                ok = false;
            }
            if r.pos.iter().any(|v| !v.is_finite()) {
                problems.push(format!("atom {n}: position must be finite"));
                ok = false;
            }
            if !(r.w.is_finite() && r.w >= 0.0) {
                problems.push(format!("atom {n}: weight {} violates nonnegativity", r.w));
                ok = false;
            }
            if ok {
                m.push(r.species, &r.pos, r.w);
            }
        }
        if problems.is_empty() {
            Ok(m)
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn to_records(&self) -> Vec<AtomRecord> {
        let mut out = Vec::with_capacity(self.atom_count());
        for (i, s) in self.species.iter().enumerate() {
            for a in 0..s.len() {
                out.push(AtomRecord { species: i, pos: s.position(a, self.dim).to_vec(), w: s.weights[a] });
            }
        }
        out
    }

    /// Invariant violations: negative or non-finite weights, bad coordinates.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, s) in self.species.iter().enumerate() {
            if s.positions.len() != s.weights.len() * self.dim {
                out.push(format!("species {i}: {} coordinates for {} atoms", s.positions.len(), s.len()));
            }
            if let Some(w) = s.weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
                out.push(format!("species {i}: weight {w} violates nonnegativity"));
            }
            if s.positions.iter().any(|v| !v.is_finite()) {
                out.push(format!("species {i}: non-finite position"));
            }
        }
        out
    }

    pub fn tv_norm(&self) -> TvNorm {
        let per_species: Vec<f64> = self.species.iter().map(SpeciesAtoms::mass).collect();
        let total = per_species.iter().sum();
        TvNorm { per_species, total }
    }

    /// Moves every atom by `map(species, position)`; weights are untouched.
    pub fn pushforward<F>(&self, map: F) -> Self
    where
        F: Fn(usize, &[f64]) -> Vec<f64>,
    {
        let d = self.dim;
        let species = self
            .species
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut positions = Vec::with_capacity(s.positions.len());
                for p in s.positions.chunks_exact(d) {
                    let q = map(i, p);
                    assert_eq!(q.len(), d, "map changed the dimension");
                    positions.extend_from_slice(&q);
                }
                SpeciesAtoms { positions, weights: s.weights.clone() }
            })
            .collect();
        DiscreteMeasureVec { dim: d, species }
    }

    /// `self ⊎ other`: atoms of both, per species.
    pub fn union(&self, other: &Self) -> Result<Self> {
        check_shape(self, other)?;
        let mut out = self.clone();
        for (s, o) in out.species.iter_mut().zip(&other.species) {
            s.positions.extend_from_slice(&o.positions);
            s.weights.extend_from_slice(&o.weights);
        }
        Ok(out)
    }

    /// `(ρ^1 ∗ η^{i1}, …, ρ^k ∗ η^{ik})(x)`.
    pub fn convolve_at(&self, kv: &KernelVec, i: usize, x: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; self.k()];
        self.convolve_into(kv, i, x, &mut u);
        u
    }

    pub fn convolve_into(&self, kv: &KernelVec, i: usize, x: &[f64], out: &mut [f64]) {
        for (j, (s, o)) in self.species.iter().zip(out.iter_mut()).enumerate() {
            *o = kv.get(i, j).accumulate(x, &s.positions, &s.weights);
        }
    }
}

fn check_shape(a: &DiscreteMeasureVec, b: &DiscreteMeasureVec) -> Result<()> {
    if a.k() != b.k() || a.dim != b.dim {
        return Err(Error::Domain(format!(
            "measures have shapes (k={}, d={}) and (k={}, d={})",
            a.k(),
            a.dim,
            b.k(),
            b.dim
        )));
    }
    Ok(())
}

/// Merges atoms at bit-identical positions.
fn merged(s: &SpeciesAtoms, dim: usize) -> Vec<(Vec<f64>, f64)> {
    let mut atoms: Vec<(Vec<f64>, f64)> = (0..s.len()).map(|a| (s.position(a, dim).to_vec(), s.weights[a])).collect();
    atoms.sort_by(|x, y| {
        x.0.iter().zip(&y.0).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut out: Vec<(Vec<f64>, f64)> = Vec::with_capacity(atoms.len());
    for (p, w) in atoms {
        match out.last_mut() {
            Some(last) if last.0 == p => last.1 += w,
            _ => out.push((p, w)),
        }
    }
    out
}

/// Total variation distance between atomic measures.
///
/// Coincident atoms of one measure are merged first. Atoms of `m1` and `m2` closer
/// than `match_tol` are then paired greedily by increasing distance; paired atoms
/// contribute `|w1 - w2|` and unpaired atoms their weight.
pub fn atomic_tv_distance(m1: &DiscreteMeasureVec, m2: &DiscreteMeasureVec, match_tol: f64) -> Result<f64> {
    check_shape(m1, m2)?;
    if !(match_tol >= 0.0) {
        return Err(Error::Domain(format!("match_tol must be nonnegative, got {match_tol}")));
    }
    let d = m1.dim;
    let mut total = 0.0;
    for (s1, s2) in m1.species.iter().zip(&m2.species) {
        let a = merged(s1, d);
        let b = merged(s2, d);
        let mut pairs = Vec::new();
        for (ia, (pa, _)) in a.iter().enumerate() {
            for (ib, (pb, _)) in b.iter().enumerate() {
                let r = dist(pa, pb);
                if r <= match_tol {
                    pairs.push((r, ia, ib));
                }
            }
        }
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut used_a = vec![false; a.len()];
        let mut used_b = vec![false; b.len()];
        for (_, ia, ib) in pairs {
            if !used_a[ia] && !used_b[ib] {
                used_a[ia] = true;
                used_b[ib] = true;
                total += (a[ia].1 - b[ib].1).abs();
            }
        }
        let unpaired_a: f64 = a.iter().zip(&used_a).filter(|(_, u)| !**u).map(|(x, _)| x.1).sum();
        let unpaired_b: f64 = b.iter().zip(&used_b).filter(|(_, u)| !**u).map(|(x, _)| x.1).sum();
        total += unpaired_a + unpaired_b;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Kernel;
    use crate::moduli::ModulusSpec;

    fn one_d(atoms: &[(f64, f64)]) -> DiscreteMeasureVec {
        let mut m = DiscreteMeasureVec::empty(1, 1);
        for &(p, w) in atoms {
            m.push(0, &[p], w);
        }
        m
    }

    #[test]
    fn tv_norm_examples() {
        let n = one_d(&[(0.0, 0.5), (1.0, 0.5)]).tv_norm();
        assert_eq!((n.per_species[0], n.total), (1.0, 1.0));
        assert_eq!(DiscreteMeasureVec::empty(2, 3).tv_norm().total, 0.0);
        let mut m = DiscreteMeasureVec::empty(2, 1);
        m.push(0, &[0.0], 1.0);
        m.push(0, &[1.0], 2.0);
        m.push(1, &[0.0], 3.0);
        let n = m.tv_norm();
        assert_eq!(n.per_species, vec![3.0, 3.0]);
        assert_eq!(n.total, 6.0);
    }

    #[test]
    fn convolution_examples() {
        let hat =
            KernelVec::uniform(1, Kernel::Hat { width: 1.0, height: 1.0 }, ModulusSpec::linear(1.0).unwrap(), 1.0)
                .unwrap();
        assert_eq!(one_d(&[(1.0, 2.0)]).convolve_at(&hat, 0, &[1.5]), vec![1.0]);
        assert_eq!(DiscreteMeasureVec::empty(1, 1).convolve_at(&hat, 0, &[0.2]), vec![0.0]);
        let g = Kernel::Gaussian { sigma: 0.6, height: 1.0 };
        let kv = KernelVec::uniform(1, g.clone(), ModulusSpec::linear(2.0).unwrap(), 1.0).unwrap();
        let u = one_d(&[(-1.0, 1.0), (1.0, 1.0)]).convolve_at(&kv, 0, &[0.0]);
        assert_eq!(u[0], 2.0 * g.eval(&[1.0]));
    }

    #[test]
    fn pushforward_keeps_weights() {
        let m = one_d(&[(0.0, 0.3), (2.0, 0.7)]);
        assert_eq!(m.pushforward(|_, p| p.to_vec()), m);
        let shifted = m.pushforward(|_, p| vec![p[0] + 1.5]);
        assert_eq!(shifted.species[0].positions, vec![1.5, 3.5]);
        assert_eq!(shifted.tv_norm(), m.tv_norm());
    }

    #[test]
    fn tv_distance_examples() {
        let m = one_d(&[(0.0, 1.0), (1.0, 2.0)]);
        assert_eq!(atomic_tv_distance(&m, &m, 0.0).unwrap(), 0.0);
        assert_eq!(atomic_tv_distance(&m, &DiscreteMeasureVec::empty(1, 1), 0.0).unwrap(), 3.0);
        let a = one_d(&[(0.0, 1.0)]);
        let b = one_d(&[(0.0, 0.7)]);
        assert!((atomic_tv_distance(&a, &b, 0.0).unwrap() - 0.3).abs() < 1e-15);
        // duplicates merge before matching
        let split = one_d(&[(0.0, 0.5), (0.0, 0.5)]);
        assert_eq!(atomic_tv_distance(&a, &split, 0.0).unwrap(), 0.0);
        // tolerance pairs nearby atoms
        let near = one_d(&[(1e-9, 1.0)]);
        assert_eq!(atomic_tv_distance(&a, &near, 1e-6).unwrap(), 0.0);
        assert_eq!(atomic_tv_distance(&a, &near, 0.0).unwrap(), 2.0);
    }

    #[test]
    fn records_validation_lists_everything() {
        let recs = vec![
            AtomRecord { species: 0, pos: vec![0.0], w: -1.0 },
            AtomRecord { species: 3, pos: vec![0.0, 1.0], w: 1.0 },
        ];
        match DiscreteMeasureVec::from_records(1, 1, &recs) {
            Err(Error::Validation(v)) => {
                assert_eq!(v.len(), 3);
                assert!(v[0].contains("nonnegativity"));
            }
            other => panic!("{other:?}"),
        }
    }
}
