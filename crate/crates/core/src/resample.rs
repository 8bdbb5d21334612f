//! Resampling onto a new voxel spacing.
//!
//! Grids are edge-aligned: the outer faces of the first voxel coincide, so
//! output voxel `i` sits at input continuous index `(i + 0.5) * target / source - 0.5`
//! along each axis and the origin (first voxel centre) moves by half the
//! spacing change. Samples outside the input clamp to the edge voxel.

use rayon::prelude::*;

use crate::error::{KevsError, Result};
use crate::grid::{GridGeometry, LabelMap, ScalarVolume};

fn target_geometry(src: &GridGeometry, target_spacing: [f64; 3]) -> Result<GridGeometry> {
    if target_spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(KevsError::InvalidArgument(format!(
            "target spacing must be finite and > 0, got {target_spacing:?}"
        )));
    }
    let dims = src.dims();
    let spacing = src.spacing();
    let out_dims: [usize; 3] =
        std::array::from_fn(|a| ((dims[a] as f64 * spacing[a] / target_spacing[a]).round() as usize).max(1));
    let origin = src.origin();
    let out_origin: [f64; 3] = std::array::from_fn(|a| origin[a] + 0.5 * (target_spacing[a] - spacing[a]));
    GridGeometry::new(out_dims, target_spacing, out_origin)
}

#[inline]
fn source_position(i: usize, ratio: f64) -> f64 {
    if ratio == 1.0 {
        i as f64
    } else {
        (i as f64 + 0.5) * ratio - 0.5
    }
}

/// Per-axis interpolation stencil: lower index, upper index, weight of the upper.
#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn linear_taps(n_in: usize, n_out: usize, ratio: f64) -> Vec<Tap> {
    (0..n_out)
        .map(|i| {
            let pos = source_position(i, ratio).max(0.0);
            let last = (n_in - 1) as f64;
            if pos >= last {
                Tap { lo: n_in - 1, hi: n_in - 1, frac: 0.0 }
            } else {
                let lo = pos.floor() as usize;
                Tap { lo, hi: lo + 1, frac: pos - lo as f64 }
            }
        })
        .collect()
}

fn nearest_taps(n_in: usize, n_out: usize, ratio: f64) -> Vec<usize> {
    (0..n_out)
        .map(|i| ((source_position(i, ratio).max(0.0) + 0.5).floor() as usize).min(n_in - 1))
        .collect()
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}

/// Trilinear resampling of intensities.
pub fn resample_trilinear(v: &ScalarVolume, target_spacing: [f64; 3]) -> Result<ScalarVolume> {
    let src = v.geometry();
    let dst = target_geometry(src, target_spacing)?;
    let [nx, ny, nz] = src.dims();
    let [mx, my, mz] = dst.dims();
    let sp = src.spacing();
    let tx = linear_taps(nx, mx, target_spacing[0] / sp[0]);
    let ty = linear_taps(ny, my, target_spacing[1] / sp[1]);
    let tz = linear_taps(nz, mz, target_spacing[2] / sp[2]);
    let data = v.data();
    let at = |x: usize, y: usize, z: usize| data[x + nx * (y + ny * z)] as f64;

    let mut out = vec![0f32; dst.len()];
    out.par_chunks_mut(mx * my).enumerate().for_each(|(k, slice)| {
        let cz = tz[k];
        for (j, row) in slice.chunks_mut(mx).enumerate() {
            let cy = ty[j];
            for (i, o) in row.iter_mut().enumerate() {
                let cx = tx[i];
                let plane = |z: usize| {
                    let r0 = lerp(at(cx.lo, cy.lo, z), at(cx.hi, cy.lo, z), cx.frac);
                    let r1 = lerp(at(cx.lo, cy.hi, z), at(cx.hi, cy.hi, z), cx.frac);
                    lerp(r0, r1, cy.frac)
                };
                let value = if cz.frac == 0.0 {
                    plane(cz.lo)
                } else {
                    lerp(plane(cz.lo), plane(cz.hi), cz.frac)
                };
                *o = value as f32;
            }
        }
    });
    ScalarVolume::new(dst, out)
}

/// Nearest-neighbour resampling of labels; never invents a label.
pub fn resample_nearest(l: &LabelMap, target_spacing: [f64; 3]) -> Result<LabelMap> {
    let src = l.geometry();
    let dst = target_geometry(src, target_spacing)?;
    let [nx, ny, nz] = src.dims();
    let [mx, my, mz] = dst.dims();
    let sp = src.spacing();
    let ix = nearest_taps(nx, mx, target_spacing[0] / sp[0]);
    let iy = nearest_taps(ny, my, target_spacing[1] / sp[1]);
    let iz = nearest_taps(nz, mz, target_spacing[2] / sp[2]);
    let data = l.data();

    let mut out = vec![0u32; dst.len()];
    out.par_chunks_mut(mx * my).enumerate().for_each(|(k, slice)| {
        for (j, row) in slice.chunks_mut(mx).enumerate() {
            let base = nx * (iy[j] + ny * iz[k]);
            for (i, o) in row.iter_mut().enumerate() {
                *o = data[base + ix[i]];
            }
        }
    });
    LabelMap::new(dst, out, l.schema().clone())
}
