//! Finite check that a deterministic mapping `(v, z) -> y` induces the same
//! conditional `P(Y | V, Z)` under any two input distributions.

use serde::Serialize;

use crate::error::{Error, Result};

/// Joint mass over `(v, z, y)` triples, flattened as `((v·nz) + z)·ny + y`.
#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub nv: usize,
    pub nz: usize,
    pub ny: usize,
    pub mass: Vec<f64>,
}

impl Joint {
    /// Joint of an input distribution `d` (`nv·nz` masses, row-major in `v`)
    /// pushed through the deterministic table `f` (`nv·nz` outputs).
    pub fn deterministic(nv: usize, nz: usize, ny: usize, d: &[f64], f: &[usize]) -> Result<Joint> {
        let kernel: Vec<Vec<f64>> = f
            .iter()
            .map(|&y| {
                let mut row = vec![0.0; ny];
                if y < ny {
                    row[y] = 1.0;
                }
                row
            })
            .collect();
        if f.iter().any(|&y| y >= ny) {
            return Err(Error::invalid("mapping output outside the label set"));
        }
        Joint::from_kernel(nv, nz, ny, d, &kernel)
    }

    /// Joint of `d` pushed through a stochastic kernel `P(y | v, z)`.
    pub fn from_kernel(nv: usize, nz: usize, ny: usize, d: &[f64], kernel: &[Vec<f64>]) -> Result<Joint> {
        if d.len() != nv * nz || kernel.len() != nv * nz {
            return Err(Error::invalid("distribution or kernel size does not match nv·nz"));
        }
        if d.iter().any(|&p| !(p >= 0.0)) || kernel.iter().flatten().any(|&p| !(p >= 0.0)) {
            return Err(Error::invalid("masses must be non-negative"));
        }
        let mut mass = Vec::with_capacity(nv * nz * ny);
        for (p, row) in d.iter().zip(kernel) {
            if row.len() != ny {
                return Err(Error::invalid("kernel row width differs from ny"));
            }
            mass.extend(row.iter().map(|q| p * q));
        }
        Ok(Joint { nv, nz, ny, mass })
    }

    /// `P(Y | V = v, Z = z)`, or `None` when the pair has zero mass.
    pub fn conditional(&self, v: usize, z: usize) -> Option<Vec<f64>> {
        let start = (v * self.nz + z) * self.ny;
        let cell = &self.mass[start..start + self.ny];
        let total: f64 = cell.iter().sum();
        (total > 0.0).then(|| cell.iter().map(|m| m / total).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct PropositionReport {
    pub identical: bool,
    /// `(v, z)` pairs with positive mass in both domains.
    pub compared: usize,
    /// Pairs skipped for zero mass in either domain.
    pub skipped: usize,
}

const TOLERANCE: f64 = 1e-12;

/// Compare the conditionals of two joints pair by pair.
pub fn compare_conditionals(a: &Joint, b: &Joint) -> Result<PropositionReport> {
    if (a.nv, a.nz, a.ny) != (b.nv, b.nz, b.ny) {
        return Err(Error::invalid("joints over different supports"));
    }
    let mut report = PropositionReport {
        identical: true,
        compared: 0,
        skipped: 0,
    };
    for v in 0..a.nv {
        for z in 0..a.nz {
            match (a.conditional(v, z), b.conditional(v, z)) {
                (Some(p), Some(q)) => {
                    report.compared += 1;
                    if p.iter().zip(&q).any(|(x, y)| (x - y).abs() > TOLERANCE) {
                        report.identical = false;
                    }
                }
                _ => report.skipped += 1,
            }
        }
    }
    Ok(report)
}

/// Enumerate `P_d(Y | V, Z)` for a deterministic `f` under `d1` and `d2`.
pub fn check_proposition1(
    nv: usize,
    nz: usize,
    ny: usize,
    f: &[usize],
    d1: &[f64],
    d2: &[f64],
) -> Result<PropositionReport> {
    let a = Joint::deterministic(nv, nz, ny, d1, f)?;
    let b = Joint::deterministic(nv, nz, ny, d2, f)?;
    let report = compare_conditionals(&a, &b)?;
    if report.skipped > 0 {
        log::warn!("{} zero-mass (v, z) pairs skipped", report.skipped);
    }
    Ok(report)
}
