//! Exact Euclidean distance transform on anisotropic grids.
//!
//! Separable squared-distance transform: one lower-envelope-of-parabolas pass
//! per axis, with sample positions scaled by the voxel spacing.

use rayon::prelude::*;

use crate::error::{KevsError, Result};
use crate::grid::{BinaryMask, GridGeometry};

/// Distance in mm from each voxel centre to the nearest foreground voxel centre.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    geometry: GridGeometry,
    values: Vec<f64>,
}

impl DistanceField {
    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn at_index(&self, index: usize) -> f64 {
        self.values[index]
    }
}

pub fn distance_transform(m: &BinaryMask) -> Result<DistanceField> {
    distance_transform_scaled(m, m.geometry().spacing())
}

/// Same as [`distance_transform`] but measuring with an explicit per-axis step,
/// e.g. `[1.0; 3]` for distances in voxel units.
pub fn distance_transform_scaled(m: &BinaryMask, step: [f64; 3]) -> Result<DistanceField> {
    if m.is_empty() {
        return Err(KevsError::EmptyMask("distance transform source".into()));
    }
    let mut sq = squared_distance(m, step);
    sq.par_iter_mut().for_each(|v| *v = v.sqrt());
    Ok(DistanceField {
        geometry: m.geometry().clone(),
        values: sq,
    })
}

fn squared_distance(m: &BinaryMask, step: [f64; 3]) -> Vec<f64> {
    let [nx, ny, nz] = m.geometry().dims();
    let mut f: Vec<f64> = m
        .bits()
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();

    // x: contiguous rows
    f.par_chunks_mut(nx).for_each_init(Envelope::default, |env, row| {
        env.transform_in_place(row, step[0]);
    });

    // y: columns within each slice
    if ny > 1 {
        f.par_chunks_mut(nx * ny).for_each_init(
            || (Envelope::default(), vec![0.0; ny]),
            |(env, col), slice| {
                for x in 0..nx {
                    for y in 0..ny {
                        col[y] = slice[x + nx * y];
                    }
                    env.transform_in_place(col, step[1]);
                    for y in 0..ny {
                        slice[x + nx * y] = col[y];
                    }
                }
            },
        );
    }

    // z: through a z-fastest copy
    if nz > 1 {
        let plane = nx * ny;
        let mut t = vec![0.0; f.len()];
        t.par_chunks_mut(nz).enumerate().for_each_init(Envelope::default, |env, (c, line)| {
            for (z, v) in line.iter_mut().enumerate() {
                *v = f[c + plane * z];
            }
            env.transform_in_place(line, step[2]);
        });
        f.par_chunks_mut(plane).enumerate().for_each(|(z, slice)| {
            for (c, v) in slice.iter_mut().enumerate() {
                *v = t[z + nz * c];
            }
        });
    }
    f
}

/// Scratch buffers for the 1D lower envelope.
#[derive(Default)]
struct Envelope {
    sites: Vec<usize>,
    bounds: Vec<f64>,
    out: Vec<f64>,
}

impl Envelope {
    /// `f[q] <- min_p ((q - p) * step)^2 + f[p]`; infinite entries are not sites.
    fn transform_in_place(&mut self, f: &mut [f64], step: f64) {
        let n = f.len();
        self.sites.clear();
        self.bounds.clear();
        for q in 0..n {
            if !f[q].is_finite() {
                continue;
            }
            let uq = q as f64 * step;
            loop {
                match self.sites.last() {
                    None => {
                        self.sites.push(q);
                        self.bounds.push(f64::NEG_INFINITY);
                        break;
                    }
                    Some(&p) => {
                        let up = p as f64 * step;
                        let cross = ((f[q] + uq * uq) - (f[p] + up * up)) / (2.0 * (uq - up));
                        if cross <= *self.bounds.last().expect("bounds track sites") {
                            self.sites.pop();
                            self.bounds.pop();
                        } else {
                            self.sites.push(q);
                            self.bounds.push(cross);
                            break;
                        }
                    }
                }
            }
        }
        if self.sites.is_empty() {
            return;
        }
        self.out.clear();
        let mut k = 0;
        for q in 0..n {
            let uq = q as f64 * step;
            while k + 1 < self.sites.len() && self.bounds[k + 1] < uq {
                k += 1;
            }
            let p = self.sites[k];
            let d = uq - p as f64 * step;
            self.out.push(d * d + f[p]);
        }
        f.copy_from_slice(&self.out);
    }
}
