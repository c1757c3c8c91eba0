//! Deterministic point sets: Halton sequences, axis boxes and the smooth bump
//! shared by mollifiers and the stability weight ζ.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Radical inverse of `index` in base `b`.
fn radical_inverse(mut index: u64, b: u64) -> f64 {
    let inv = 1.0 / b as f64;
    let mut f = inv;
    let mut out = 0.0;
    while index > 0 {
        out += f * (index % b) as f64;
        index /= b;
        f *= inv;
    }
    out
}

/// Point `index` (starting at 1) of the Halton sequence in `[0,1)^dim`.
pub fn halton(index: u64, dim: usize) -> Vec<f64> {
    assert!(dim <= PRIMES.len(), "Halton sequence supports at most {} dimensions", PRIMES.len());
    PRIMES[..dim].iter().map(|&p| radical_inverse(index, p)).collect()
}

/// An axis-aligned box `[lo_1, hi_1] × … × [lo_d, hi_d]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl AxisBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::Domain("box bounds must have equal, nonzero length".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a.is_finite() && b.is_finite() && a <= b)) {
            return Err(Error::Domain(format!("box bounds are not ordered: {lo:?} / {hi:?}")));
        }
        Ok(AxisBox { lo, hi })
    }

    /// `[-half, half]^dim`.
    pub fn cube(dim: usize, half: f64) -> Self {
        AxisBox { lo: vec![-half; dim], hi: vec![half; dim] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    /// Maps unit-cube coordinates into the box.
    pub fn place(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter().zip(self.lo.iter().zip(&self.hi)).map(|(u, (a, b))| a + u * (b - a)).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *a <= *v && *v <= *b)
    }
}

/// Unnormalized polynomial bump `(1 - ξ²)²` on `[-1, 1]`.
#[inline]
pub fn bump(xi: f64) -> f64 {
    if xi.abs() >= 1.0 {
        0.0
    } else {
        let q = 1.0 - xi * xi;
        q * q
    }
}

/// Tensor quadrature of the bump: midpoint nodes `ξ` in `[-1,1]^dim` and weights summing to 1.
pub fn bump_nodes(dim: usize, per_axis: usize) -> Vec<(Vec<f64>, f64)> {
    let per_axis = per_axis.max(1);
    let axis: Vec<(f64, f64)> = (0..per_axis)
        .map(|m| {
            let xi = -1.0 + (2 * m + 1) as f64 / per_axis as f64;
            (xi, bump(xi))
        })
        .collect();
    let mut nodes: Vec<(Vec<f64>, f64)> = vec![(Vec::new(), 1.0)];
    for _ in 0..dim {
        let mut next = Vec::with_capacity(nodes.len() * per_axis);
        for (p, w) in &nodes {
            for &(xi, b) in &axis {
                let mut q = p.clone();
                q.push(xi);
                next.push((q, w * b));
            }
        }
        nodes = next;
    }
    let total: f64 = nodes.iter().map(|n| n.1).sum();
    for n in &mut nodes {
        n.1 /= total;
    }
    nodes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halton_first_points() {
        assert_eq!(halton(1, 2), vec![0.5, 1.0 / 3.0]);
        assert_eq!(halton(2, 2), vec![0.25, 2.0 / 3.0]);
        assert_eq!(halton(3, 1), vec![0.75]);
    }

    #[test]
    fn bump_nodes_have_unit_mass_and_are_symmetric() {
        for d in 1..=3 {
            let nodes = bump_nodes(d, 5);
            assert_eq!(nodes.len(), 5usize.pow(d as u32));
            let mass: f64 = nodes.iter().map(|n| n.1).sum();
            assert!((mass - 1.0).abs() < 1e-15);
            let mean: f64 = nodes.iter().map(|n| n.0[0] * n.1).sum();
            assert!(mean.abs() < 1e-15);
        }
    }
}
