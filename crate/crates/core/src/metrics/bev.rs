use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rangeview::PointCloud;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BevConfig {
    /// Cells per side.
    pub cells: usize,
    /// Half-width of the square grid in metres.
    pub extent: f64,
}

impl Default for BevConfig {
    fn default() -> Self {
        Self { cells: 100, extent: 40.0 }
    }
}

/// Occupancy of a top-down grid, normalized to sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct BevHistogram {
    pub cells: usize,
    /// Row-major `cells × cells`, indexed `[iy * cells + ix]`.
    pub mass: Vec<f64>,
    pub counted: u64,
    /// Points outside the grid.
    pub ignored: u64,
}

impl BevConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cells == 0 || !(self.extent > 0.0) {
            return Err(Error::Config("BEV grid needs positive cells and extent".into()));
        }
        Ok(())
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        let n = self.cells as f64;
        let fx = ((x + self.extent) / (2.0 * self.extent) * n).floor();
        let fy = ((y + self.extent) / (2.0 * self.extent) * n).floor();
        if fx >= 0.0 && fx < n && fy >= 0.0 && fy < n {
            Some(fy as usize * self.cells + fx as usize)
        } else {
            None
        }
    }
}

pub fn bev_histogram(clouds: &[PointCloud], config: &BevConfig) -> Result<BevHistogram> {
    config.validate()?;
    if clouds.is_empty() {
        return Err(Error::Empty("BEV histogram of an empty set".into()));
    }
    let mut counts = vec![0u64; config.cells * config.cells];
    let mut ignored = 0;
    for c in clouds {
        for p in &c.xyz {
            match config.cell_of(p[0], p[1]) {
                Some(i) => counts[i] += 1,
                None => ignored += 1,
            }
        }
    }
    let counted: u64 = counts.iter().sum();
    if counted == 0 {
        return Err(Error::Empty("no points fall inside the BEV grid".into()));
    }
    Ok(BevHistogram {
        cells: config.cells,
        mass: counts.iter().map(|&c| c as f64 / counted as f64).collect(),
        counted,
        ignored,
    })
}

fn kl_to_mixture(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() } else { 0.0 })
        .sum()
}

/// Jensen–Shannon divergence in nats.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::DimensionMismatch {
            what: "jsd",
            detail: format!("histograms of {} and {} bins", p.len(), q.len()),
        });
    }
    if p.iter().chain(q).any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Domain("histogram mass must be finite and non-negative".into()));
    }
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let v = 0.5 * kl_to_mixture(p, &m) + 0.5 * kl_to_mixture(q, &m);
    Ok(v.clamp(0.0, std::f64::consts::LN_2))
}
