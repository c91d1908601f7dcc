//! Training-set compression for planar labels by angular sector.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::SupervisedSet;
use crate::error::{CoreError, Result};

/// A compressed training set with one row per occupied 45-degree sector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OctantSummary {
    /// Per-sector mean observation paired with the mean label, ordered by
    /// sector index.
    pub set: SupervisedSet,
    /// How many original rows each output row averages.
    pub counts: Vec<usize>,
    /// Rows whose label was exactly the origin; they are pooled into the
    /// first sector.
    pub zero_label_rows: usize,
}

fn octant_of(z0: f64, z1: f64) -> usize {
    let mut angle = z1.atan2(z0);
    if angle < 0.0 {
        angle += std::f64::consts::TAU;
    }
    // Half-open sectors [k * 45, (k + 1) * 45) degrees.
    ((angle / std::f64::consts::FRAC_PI_4) as usize).min(7)
}

/// Replaces every 45-degree sector of planar labels with one averaged row.
///
/// Sector membership comes from the label angle alone; rows whose label is
/// exactly zero join the first sector and are counted separately. Because a
/// sector's mean label stays inside that sector's cone, applying this to
/// its own output returns it unchanged.
pub fn sparsify_octants(data: &SupervisedSet) -> Result<OctantSummary> {
    if data.state_dim() != 2 {
        return Err(CoreError::DimensionMismatch {
            context: "sector sparsification labels",
            expected: 2,
            got: data.state_dim(),
        });
    }
    let n = data.obs_dim();
    let mut sums_x = vec![vec![0.0; n]; 8];
    let mut sums_z = [[0.0; 2]; 8];
    let mut counts = [0usize; 8];
    let mut zero_label_rows = 0;
    for i in 0..data.len() {
        let z0 = data.zs()[(i, 0)];
        let z1 = data.zs()[(i, 1)];
        let k = if z0 == 0.0 && z1 == 0.0 {
            zero_label_rows += 1;
            0
        } else {
            octant_of(z0, z1)
        };
        counts[k] += 1;
        for (j, slot) in sums_x[k].iter_mut().enumerate() {
            *slot += data.xs()[(i, j)];
        }
        sums_z[k][0] += z0;
        sums_z[k][1] += z1;
    }
    let occupied: Vec<usize> = (0..8).filter(|&k| counts[k] > 0).collect();
    let rows = occupied.len();
    let mut xs = DMatrix::zeros(rows, n);
    let mut zs = DMatrix::zeros(rows, 2);
    for (r, &k) in occupied.iter().enumerate() {
        let c = counts[k] as f64;
        for j in 0..n {
            xs[(r, j)] = sums_x[k][j] / c;
        }
        zs[(r, 0)] = sums_z[k][0] / c;
        zs[(r, 1)] = sums_z[k][1] / c;
    }
    Ok(OctantSummary {
        set: SupervisedSet::new(xs, zs)?,
        counts: occupied.iter().map(|&k| counts[k]).collect(),
        zero_label_rows,
    })
}
