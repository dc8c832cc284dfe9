use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{det_at, ChartMap};
use crate::error::{Error, Result};

/// Axis-aligned box `[lo_i, hi_i]` in chart coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl MeshBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::InvalidDimension { expected: lo.len(), got: hi.len() });
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a.is_finite() && b.is_finite() && a < b)) {
            return Err(Error::InvalidInput("box bounds must be finite with lo < hi".into()));
        }
        Ok(Self { lo, hi })
    }

    /// `[-r, r]^d`.
    pub fn cube(d: usize, r: f64) -> Result<Self> {
        Self::new(vec![-r; d], vec![r; d])
    }

    /// `[c_i - r, c_i + r]`.
    pub fn around(center: &[f64], r: f64) -> Result<Self> {
        Self::new(center.iter().map(|c| c - r).collect(), center.iter().map(|c| c + r).collect())
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }
}

/// Determinant samples on a regular grid; node `(i_0, .., i_{d-1})` has flat
/// index `sum_k i_k prod_{j<k} res_j` (first axis fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshScan {
    pub bounds: MeshBox,
    pub res: Vec<usize>,
    /// `None` at failed nodes.
    pub det: Vec<Option<f64>>,
    pub failures: Vec<usize>,
}

impl MeshScan {
    pub fn dim(&self) -> usize {
        self.res.len()
    }

    pub fn node_count(&self) -> usize {
        self.res.iter().product()
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        self.res
            .iter()
            .map(|&r| {
                let i = flat % r;
                flat /= r;
                i
            })
            .collect()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.res).rev().fold(0, |acc, (&i, &r)| acc * r + i)
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        node_coords(&self.bounds, &self.res, flat)
    }

    pub fn spacing(&self) -> Vec<f64> {
        (0..self.dim()).map(|k| (self.bounds.hi[k] - self.bounds.lo[k]) / (self.res[k] - 1) as f64).collect()
    }

    pub fn failure_fraction(&self) -> f64 {
        self.failures.len() as f64 / self.node_count() as f64
    }

    /// Largest `|det|` over evaluated nodes.
    pub fn det_scale(&self) -> f64 {
        self.det.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

fn node_coords(b: &MeshBox, res: &[usize], mut flat: usize) -> Vec<f64> {
    (0..res.len())
        .map(|k| {
            let i = flat % res[k];
            flat /= res[k];
            b.lo[k] + (b.hi[k] - b.lo[k]) * i as f64 / (res[k] - 1) as f64
        })
        .collect()
}

/// Evaluates the oriented determinant at every node. Nodes are independent,
/// so the result does not depend on the worker count.
pub fn scan_mesh<M: ChartMap>(map: &M, bounds: &MeshBox, res: &[usize]) -> Result<MeshScan> {
    scan_with(map.input_dim(), bounds, res, |v| det_at(map, v).ok())
}

/// Samples an arbitrary scalar field on the grid.
pub fn scan_with<F>(d: usize, bounds: &MeshBox, res: &[usize], f: F) -> Result<MeshScan>
where
    F: Fn(&[f64]) -> Option<f64> + Sync,
{
    if bounds.dim() != d || res.len() != d {
        return Err(Error::InvalidDimension { expected: d, got: res.len().min(bounds.dim()) });
    }
    if res.iter().any(|&r| r < 2) {
        return Err(Error::InvalidInput("mesh needs at least two nodes per axis".into()));
    }
    let total: usize = res.iter().product();
    let det: Vec<Option<f64>> = (0..total)
        .into_par_iter()
        .map(|i| f(&node_coords(bounds, res, i)).filter(|x| x.is_finite()))
        .collect();
    let failures = det.iter().enumerate().filter(|(_, x)| x.is_none()).map(|(i, _)| i).collect();
    Ok(MeshScan { bounds: bounds.clone(), res: res.to_vec(), det, failures })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip() {
        let s = scan_with(3, &MeshBox::cube(3, 1.0).unwrap(), &[3, 4, 5], |_| Some(1.0)).unwrap();
        for i in 0..s.node_count() {
            assert_eq!(s.flat_index(&s.multi_index(i)), i);
        }
        assert_eq!(s.node(0), vec![-1.0; 3]);
        assert_eq!(s.node(s.node_count() - 1), vec![1.0; 3]);
    }

    #[test]
    fn failures_are_recorded() {
        let s = scan_with(2, &MeshBox::cube(2, 1.0).unwrap(), &[4, 4], |v| (v[0] > 0.0).then_some(1.0)).unwrap();
        assert_eq!(s.failures.len(), 8);
    }

    #[test]
    fn rejects_tiny_mesh() {
        assert!(scan_with(2, &MeshBox::cube(2, 1.0).unwrap(), &[1, 4], |_| Some(0.0)).is_err());
    }
}
