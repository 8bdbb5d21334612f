//! Binary mask algebra, axial-slice erosion, z-extent helpers, boundary
//! extraction and dilation.
//!
//! 3D neighbourhoods use face (6-) connectivity; voxels outside the grid count
//! as background.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KevsError, Result};
use crate::grid::{BinaryMask, GridGeometry, LabelMap};
use crate::schema::Role;

/// True exactly where the label equals the role's id.
pub fn extract_role(l: &LabelMap, role: &Role) -> Result<BinaryMask> {
    let id = l.schema().require(role)?;
    let bits = l.data().par_iter().map(|&v| v == id).collect();
    BinaryMask::new(l.geometry().clone(), bits)
}

/// Union of several roles in a single pass; roles missing from the schema are errors.
pub fn extract_roles(l: &LabelMap, roles: &[Role]) -> Result<BinaryMask> {
    let mut ids = roles
        .iter()
        .map(|r| l.schema().require(r))
        .collect::<Result<Vec<u32>>>()?;
    ids.sort_unstable();
    let bits = l.data().par_iter().map(|v| ids.binary_search(v).is_ok()).collect();
    BinaryMask::new(l.geometry().clone(), bits)
}

fn zip_with(a: &BinaryMask, b: &BinaryMask, what: &str, op: impl Fn(bool, bool) -> bool + Sync) -> Result<BinaryMask> {
    a.geometry().ensure_same(b.geometry(), what)?;
    let bits = a
        .bits()
        .par_iter()
        .zip(b.bits().par_iter())
        .map(|(&x, &y)| op(x, y))
        .collect();
    BinaryMask::new(a.geometry().clone(), bits)
}

/// `a AND NOT b`.
pub fn mask_subtract(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask> {
    zip_with(a, b, "mask subtraction", |x, y| x && !y)
}

pub fn mask_intersect(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask> {
    zip_with(a, b, "mask intersection", |x, y| x && y)
}

pub fn mask_union(masks: &[&BinaryMask]) -> Result<BinaryMask> {
    let (first, rest) = masks
        .split_first()
        .ok_or_else(|| KevsError::InvalidArgument("union of an empty list of masks".into()))?;
    let mut out = (*first).clone();
    for m in rest {
        out = zip_with(&out, m, "mask union", |x, y| x || y)?;
    }
    Ok(out)
}

/// `|a AND b|` without materialising the intersection.
pub fn overlap_count(a: &BinaryMask, b: &BinaryMask) -> Result<usize> {
    a.geometry().ensure_same(b.geometry(), "overlap count")?;
    Ok(a.bits()
        .par_iter()
        .zip(b.bits().par_iter())
        .filter(|(&x, &y)| x && y)
        .count())
}

fn z_histogram(m: &BinaryMask) -> Vec<usize> {
    let nz = m.geometry().dims()[2];
    (0..nz)
        .into_par_iter()
        .map(|z| m.slice_bits(z).iter().filter(|&&b| b).count())
        .collect()
}

/// Median z-index of the true voxels; for an even count the lower middle value.
pub fn median_z(m: &BinaryMask) -> Result<usize> {
    let hist = z_histogram(m);
    let total: usize = hist.iter().sum();
    if total == 0 {
        return Err(KevsError::EmptyMask("median z of an empty mask".into()));
    }
    let rank = (total - 1) / 2;
    let mut seen = 0;
    for (z, &c) in hist.iter().enumerate() {
        seen += c;
        if seen > rank {
            return Ok(z);
        }
    }
    unreachable!("rank is below the total count")
}

/// Inclusive z-range covered by the union of the masks.
pub fn z_extent(masks: &[&BinaryMask]) -> Result<(usize, usize)> {
    let mut lo = usize::MAX;
    let mut hi = 0;
    for m in masks {
        for (z, &c) in z_histogram(m).iter().enumerate() {
            if c > 0 {
                lo = lo.min(z);
                hi = hi.max(z);
            }
        }
    }
    if lo == usize::MAX {
        return Err(KevsError::EmptyMask("z extent of empty masks".into()));
    }
    Ok((lo, hi))
}

/// Clears every slice outside `[z_min, z_max]`.
pub fn crop_to_z(m: &BinaryMask, z_min: usize, z_max: usize) -> Result<BinaryMask> {
    let nz = m.geometry().dims()[2];
    if z_min > z_max || z_max >= nz {
        return Err(KevsError::InvalidArgument(format!(
            "z range [{z_min}, {z_max}] invalid for {nz} slices"
        )));
    }
    let plane = m.geometry().slice_len();
    let mut bits = m.bits().to_vec();
    bits[..z_min * plane].fill(false);
    bits[(z_max + 1) * plane..].fill(false);
    BinaryMask::new(m.geometry().clone(), bits)
}

/// Inclusive bounding box `(lo, hi)` of the true voxels.
pub fn bounding_box(m: &BinaryMask) -> Option<([usize; 3], [usize; 3])> {
    let g = m.geometry();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for i in m.indices() {
        let c = g.coords(i);
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    (lo[0] != usize::MAX).then_some((lo, hi))
}

/// Sub-grid `[lo, hi]` (inclusive) of a mask; origin moves with the crop.
pub fn crop_box(m: &BinaryMask, lo: [usize; 3], hi: [usize; 3]) -> Result<BinaryMask> {
    let g = m.geometry();
    let dims = g.dims();
    if (0..3).any(|a| lo[a] > hi[a] || hi[a] >= dims[a]) {
        return Err(KevsError::InvalidArgument(format!("box {lo:?}..{hi:?} outside {dims:?}")));
    }
    let sub_dims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    let geom = GridGeometry::new(sub_dims, g.spacing(), g.position(lo[0], lo[1], lo[2]))?;
    Ok(BinaryMask::from_fn(geom, |x, y, z| m.get(x + lo[0], y + lo[1], z + lo[2])))
}

/// Neighbourhood used for boundary extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    /// 6 face neighbours in 3D.
    Face6,
    /// 4 edge neighbours within the axial plane.
    InPlane4,
}

/// Foreground voxels with at least one background (or out-of-grid) neighbour.
pub fn boundary_voxels(m: &BinaryMask) -> BinaryMask {
    boundary_voxels_with(m, Connectivity::Face6)
}

pub fn boundary_voxels_with(m: &BinaryMask, conn: Connectivity) -> BinaryMask {
    let g = m.geometry().clone();
    let [nx, ny, nz] = g.dims();
    let plane = nx * ny;
    let src = m.bits();
    let mut out = vec![false; g.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(z, slice)| {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * y + plane * z;
                if !src[i] {
                    continue;
                }
                let mut interior = x > 0 && src[i - 1] && x + 1 < nx && src[i + 1];
                interior = interior && y > 0 && src[i - nx] && y + 1 < ny && src[i + nx];
                if conn == Connectivity::Face6 {
                    interior = interior && z > 0 && src[i - plane] && z + 1 < nz && src[i + plane];
                }
                slice[x + nx * y] = !interior;
            }
        }
    });
    BinaryMask::new(g, out).expect("same geometry")
}

/// `layers` rounds of 6-connected dilation.
pub fn dilate(m: &BinaryMask, layers: usize) -> BinaryMask {
    let g = m.geometry().clone();
    let [nx, ny, nz] = g.dims();
    let plane = nx * ny;
    let mut cur = m.bits().to_vec();
    for _ in 0..layers {
        let src = &cur;
        let mut next = vec![false; g.len()];
        next.par_chunks_mut(plane).enumerate().for_each(|(z, slice)| {
            for y in 0..ny {
                for x in 0..nx {
                    let i = x + nx * y + plane * z;
                    slice[x + nx * y] = src[i]
                        || (x > 0 && src[i - 1])
                        || (x + 1 < nx && src[i + 1])
                        || (y > 0 && src[i - nx])
                        || (y + 1 < ny && src[i + nx])
                        || (z > 0 && src[i - plane])
                        || (z + 1 < nz && src[i + plane]);
                }
            }
        });
        cur = next;
    }
    BinaryMask::new(g, cur).expect("same geometry")
}

/// Planar structuring element for slice erosion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructuringElement {
    /// 3x3 cross (4-connectivity).
    #[default]
    Cross,
    /// Full 3x3 square (8-connectivity).
    Square,
}

/// One axial slice of a mask, with the parent grid it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceMask {
    parent: GridGeometry,
    z: usize,
    bits: Vec<bool>,
}

impl SliceMask {
    pub fn from_mask(m: &BinaryMask, z: usize) -> Result<Self> {
        let nz = m.geometry().dims()[2];
        if z >= nz {
            return Err(KevsError::InvalidArgument(format!("slice {z} outside {nz} slices")));
        }
        Ok(Self {
            parent: m.geometry().clone(),
            z,
            bits: m.slice_bits(z).to_vec(),
        })
    }

    pub fn new(parent: GridGeometry, z: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != parent.slice_len() || z >= parent.dims()[2] {
            return Err(KevsError::Geometry("slice does not fit its parent grid".into()));
        }
        Ok(Self { parent, z, bits })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.parent.dims()[0], self.parent.dims()[1])
    }

    pub fn z(&self) -> usize {
        self.z
    }

    pub fn parent(&self) -> &GridGeometry {
        &self.parent
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Linear indices into the parent volume of the true pixels.
    pub fn volume_indices(&self) -> impl Iterator<Item = usize> + '_ {
        let base = self.z * self.parent.slice_len();
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(move |(i, _)| base + i)
    }
}

/// Single binary erosion; pixels beyond the slice edge are background.
pub fn erode_slice_once(s: &SliceMask, element: StructuringElement) -> SliceMask {
    let (nx, ny) = s.dims();
    let src = &s.bits;
    let at = |x: isize, y: isize| -> bool {
        x >= 0 && y >= 0 && (x as usize) < nx && (y as usize) < ny && src[x as usize + nx * y as usize]
    };
    let mut out = vec![false; src.len()];
    for y in 0..ny {
        for x in 0..nx {
            if !src[x + nx * y] {
                continue;
            }
            let (xi, yi) = (x as isize, y as isize);
            let mut keep = at(xi - 1, yi) && at(xi + 1, yi) && at(xi, yi - 1) && at(xi, yi + 1);
            if element == StructuringElement::Square {
                keep = keep && at(xi - 1, yi - 1) && at(xi + 1, yi - 1) && at(xi - 1, yi + 1) && at(xi + 1, yi + 1);
            }
            out[x + nx * y] = keep;
        }
    }
    SliceMask {
        parent: s.parent.clone(),
        z: s.z,
        bits: out,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErosionOutcome {
    pub mask: SliceMask,
    pub iterations: usize,
    /// Erosion emptied the slice before reaching the target; `mask` is the last nonempty iterate.
    pub degenerate: bool,
    /// Area before erosion followed by the area after each accepted iteration.
    pub areas: Vec<usize>,
}

/// Erodes until the area is at most `fraction` of the original area.
pub fn erode_to_fraction(s: &SliceMask, fraction: f64, element: StructuringElement) -> Result<ErosionOutcome> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(KevsError::InvalidArgument(format!("erosion fraction {fraction} not in (0, 1]")));
    }
    let original = s.area();
    if original == 0 {
        return Err(KevsError::EmptyMask("erosion of an empty slice".into()));
    }
    let target = fraction * original as f64;
    let mut areas = vec![original];
    let mut cur = s.clone();
    let mut iterations = 0;
    while (*areas.last().expect("nonempty")) as f64 > target {
        let next = erode_slice_once(&cur, element);
        let area = next.area();
        if area == 0 {
            return Ok(ErosionOutcome {
                mask: cur,
                iterations,
                degenerate: true,
                areas,
            });
        }
        iterations += 1;
        areas.push(area);
        cur = next;
    }
    Ok(ErosionOutcome {
        mask: cur,
        iterations,
        degenerate: false,
        areas,
    })
}
