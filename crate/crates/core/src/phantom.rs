//! Synthetic three-tissue phantom.
//!
//! Nested ellipsoids (WM core, GM shell, CSF shell, background outside)
//! with constant tissue parameters. The values are illustrative 3T-like
//! numbers chosen to be well separated, not fitted literature estimates;
//! [`phantom_prior`] is centred on them so the gold standard recovers the
//! construction labels exactly.

use crate::error::Result;
use crate::gold_standard::{Channel, Covariance, TissueGmmPrior};
use crate::volume::{LabelMap, MultiParametricMap, TissueClass, VoxelGrid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TissueValues {
    pub t1_ms: f64,
    pub t2s_ms: f64,
    pub pd: f64,
    pub mt: f64,
}

pub const PHANTOM_TISSUES: [(TissueClass, TissueValues); 3] = [
    (
        TissueClass::Csf,
        TissueValues { t1_ms: 4000.0, t2s_ms: 200.0, pd: 1.0, mt: 0.1 },
    ),
    (
        TissueClass::Gm,
        TissueValues { t1_ms: 1400.0, t2s_ms: 60.0, pd: 0.8, mt: 0.9 },
    ),
    (
        TissueClass::Wm,
        TissueValues { t1_ms: 850.0, t2s_ms: 50.0, pd: 0.7, mt: 1.6 },
    ),
];

/// Normalised radii of the WM, GM and CSF boundaries.
const RADII: [f64; 3] = [0.45, 0.7, 0.9];

fn class_at(r: f64) -> TissueClass {
    if r < RADII[0] {
        TissueClass::Wm
    } else if r < RADII[1] {
        TissueClass::Gm
    } else if r < RADII[2] {
        TissueClass::Csf
    } else {
        TissueClass::Background
    }
}

/// The phantom maps and their construction labels on a 1 mm grid.
pub fn shell_phantom(dims: [usize; 3], subject_id: &str) -> Result<(MultiParametricMap, LabelMap)> {
    let grid = VoxelGrid::isotropic(dims);
    let n = grid.n_voxels();
    let mut labels = Vec::with_capacity(n);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let r2: f64 = [x, y, z]
                    .iter()
                    .zip(dims)
                    .map(|(&i, d)| {
                        let h = d as f64 / 2.0;
                        let u = (i as f64 + 0.5 - h) / h;
                        u * u
                    })
                    .sum();
                labels.push(class_at(r2.sqrt()).index() as u8);
            }
        }
    }
    let pick = |f: fn(&TissueValues) -> f64| -> Vec<f64> {
        labels
            .iter()
            .map(|&l| {
                PHANTOM_TISSUES
                    .iter()
                    .find(|(c, _)| c.index() == l as usize)
                    .map_or(0.0, |(_, v)| f(v))
            })
            .collect()
    };
    let mpm = MultiParametricMap::new(
        grid.clone(),
        pick(|v| v.t1_ms),
        Some(pick(|v| v.t2s_ms)),
        pick(|v| v.pd),
        Some(pick(|v| v.mt)),
        subject_id,
    )?;
    Ok((mpm, LabelMap::new(grid, labels)?))
}

/// Diagonal-covariance prior over T1, T2* and PD centred on the phantom
/// tissues.
pub fn phantom_prior() -> TissueGmmPrior {
    let sd = |v: &TissueValues| vec![(0.1 * v.t1_ms).powi(2), (0.1 * v.t2s_ms).powi(2), 0.04f64.powi(2)];
    let classes = PHANTOM_TISSUES
        .iter()
        .map(|(c, v)| {
            (
                c.name().to_string(),
                vec![v.t1_ms, v.t2s_ms, v.pd],
                Covariance::Diagonal(sd(v)),
                None,
            )
        })
        .collect();
    TissueGmmPrior::new(vec![Channel::T1, Channel::T2s, Channel::Pd], classes, None)
        .expect("phantom prior is valid")
}
